//! Synthetic corpora built from sentence templates with typed entity slots.
//!
//! A template such as `{PERSON} flew to {GPE} on {DATE}.` is filled from
//! per-type pools. Every generated line exists in three aligned variants:
//! marked (`⟦PERSON|Ana Ruiz⟧`), replaced (each entity swapped for another
//! member of its pool) and masked (`<PERSON>`).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use splitlab_core::metrics::{parse_marked, MARK_CLOSE, MARK_OPEN};
use splitlab_core::rng;

use crate::error::{LabError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SensiTemplateSpec {
    pub templates: Vec<String>,
    pub pools: BTreeMap<String, Vec<String>>,
    pub count: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SensiCorpora {
    pub marked: Vec<String>,
    pub replaced: Vec<String>,
    pub masked: Vec<String>,
}

impl SensiCorpora {
    /// Marked lines with the markers stripped.
    pub fn plain(&self) -> Vec<String> {
        strip_markers(&self.marked)
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        for (suffix, lines) in [("marked", &self.marked), ("replaced", &self.replaced), ("masked", &self.masked)] {
            write_lines(&dir.join(format!("{stem}.{suffix}.txt")), lines)?;
        }
        Ok(())
    }
}

pub fn strip_markers(lines: &[String]) -> Vec<String> {
    lines
        .iter()
        .map(|l| parse_marked(l).map(|(p, _)| p).unwrap_or_else(|_| l.clone()))
        .collect()
}

pub fn write_lines(path: &Path, lines: &[String]) -> Result<()> {
    let mut s = lines.join("\n");
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

/// One example per non-empty line.
pub fn read_lines(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::Io(format!("{}: {e}", path.display())))?;
    Ok(text.lines().filter(|l| !l.trim().is_empty()).map(str::to_string).collect())
}

enum Piece {
    Text(String),
    Slot(String),
}

fn parse_template(t: &str) -> Result<Vec<Piece>> {
    let mut out = Vec::new();
    let mut rest = t;
    while let Some(i) = rest.find('{') {
        if i > 0 {
            out.push(Piece::Text(rest[..i].to_string()));
        }
        let Some(j) = rest[i..].find('}') else {
            return Err(LabError::Config(format!("unterminated slot in template {t:?}")));
        };
        out.push(Piece::Slot(rest[i + 1..i + j].to_string()));
        rest = &rest[i + j + 1..];
    }
    if !rest.is_empty() {
        out.push(Piece::Text(rest.to_string()));
    }
    Ok(out)
}

impl SensiTemplateSpec {
    pub fn validate(&self) -> Result<()> {
        if self.templates.is_empty() {
            return Err(LabError::Config("template spec has no templates".into()));
        }
        for t in &self.templates {
            for p in parse_template(t)? {
                if let Piece::Slot(kind) = p {
                    match self.pools.get(&kind) {
                        Some(pool) if !pool.is_empty() => {}
                        _ => return Err(LabError::Config(format!("slot {kind} has no entity pool"))),
                    }
                }
            }
        }
        Ok(())
    }

    /// News-like sentences with the entity types of a typical NER tag set.
    pub fn news(count: usize, seed: u64) -> Self {
        let pools = [
            ("PERSON", &["Ana Ruiz", "Tom Hale", "Li Wei", "Omar Said", "Eva Novak", "Raj Patel", "Kim Park", "Jon Berg"][..]),
            ("GPE", &["Paris", "Lagos", "Oslo", "Lima", "Cairo", "Perth", "Kyoto", "Quebec"]),
            ("ORG", &["Acme", "Globex", "Initech", "Umbrella", "Hooli", "Vandelay"]),
            ("DATE", &["Monday", "May 3", "last week", "June 9", "2019", "Friday", "July 21"]),
            ("MONEY", &["$40", "$9 million", "$3,000", "$120", "$75"]),
            ("QUANTITY", &["12 tons", "3 miles", "40 kg", "9 liters", "6 acres"]),
            ("CARDINAL", &["two", "seven", "nine", "dozens of", "four"]),
            ("NORP", &["Dutch", "Kenyan", "Chilean", "Thai", "Irish"]),
            ("TIME", &["noon", "9 am", "midnight", "dawn", "6 pm"]),
        ];
        let templates = [
            "{PERSON} met {PERSON} in {GPE} on {DATE}.",
            "{ORG} paid {MONEY} to {PERSON} in {GPE}.",
            "{PERSON} from {ORG} moved {QUANTITY} on {DATE}.",
            "{CARDINAL} {NORP} workers left {GPE} at {TIME}.",
            "On {DATE} {PERSON} sold {ORG} for {MONEY}.",
            "{PERSON} said {ORG} will open in {GPE}.",
            "The {NORP} team reached {GPE} at {TIME} on {DATE}.",
            "{ORG} hired {CARDINAL} staff in {GPE} for {MONEY}.",
            "{PERSON} called {PERSON} at {TIME} about {ORG}.",
            "Police in {GPE} found {QUANTITY} near {ORG}.",
        ];
        SensiTemplateSpec {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            pools: pools
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
            count,
            seed,
        }
    }

    /// Code-like lines: short statements over identifiers and literals.
    pub fn code(count: usize, seed: u64) -> Self {
        let pools = [
            ("VAR", &["x", "n", "idx", "total", "buf", "acc", "row", "key", "val", "tmp"][..]),
            ("FUNC", &["parse", "load", "sum_list", "get_item", "sort_by", "to_str", "read_csv", "merge"]),
            ("NUM", &["0", "1", "2", "10", "42", "256", "100", "7"]),
            ("TYPE", &["int", "str", "list", "dict", "float", "bool"]),
            ("OP", &["+", "-", "*", "//", "%"]),
        ];
        let templates = [
            "def {FUNC}({VAR}): return {VAR} {OP} {NUM}",
            "for {VAR} in range({NUM}): {VAR} += {VAR}",
            "{VAR} = {FUNC}({VAR}, {NUM})",
            "if {VAR} > {NUM}: {VAR} = {TYPE}({VAR})",
            "while {VAR} < {NUM}: {VAR} = {VAR} {OP} {NUM}",
            "{VAR}: {TYPE} = [{NUM}, {NUM}, {NUM}]",
            "return {FUNC}({VAR}[{NUM}:{VAR}])",
            "assert {FUNC}({NUM}) == {NUM}",
            "{VAR} = dict({VAR}={NUM}, {VAR}={NUM})",
            "print({FUNC}({VAR}) {OP} {VAR})",
        ];
        SensiTemplateSpec {
            templates: templates.iter().map(|s| s.to_string()).collect(),
            pools: pools
                .iter()
                .map(|(k, v)| (k.to_string(), v.iter().map(|s| s.to_string()).collect()))
                .collect(),
            count,
            seed,
        }
    }
}

/// Fill `count` templates; each line also gets a replaced and a masked twin.
pub fn generate_sensi_corpora(spec: &SensiTemplateSpec) -> Result<SensiCorpora> {
    spec.validate()?;
    let parsed: Vec<Vec<Piece>> = spec.templates.iter().map(|t| parse_template(t)).collect::<Result<_>>()?;
    let mut r = rng::stream(spec.seed, "sensi-corpus");
    let mut out = SensiCorpora {
        marked: Vec::with_capacity(spec.count),
        replaced: Vec::with_capacity(spec.count),
        masked: Vec::with_capacity(spec.count),
    };
    for _ in 0..spec.count {
        let pieces = &parsed[r.random_range(0..parsed.len())];
        let mut fills = Vec::new();
        for p in pieces {
            if let Piece::Slot(kind) = p {
                let pool = &spec.pools[kind];
                fills.push((kind.as_str(), pool.choose(&mut r).expect("validated pool").as_str()));
            }
        }
        let used: BTreeSet<&str> = fills.iter().map(|(_, s)| *s).collect();
        let mut swaps = Vec::with_capacity(fills.len());
        for (kind, _) in &fills {
            let alts: Vec<&String> = spec.pools[*kind].iter().filter(|s| !used.contains(s.as_str())).collect();
            let Some(alt) = alts.choose(&mut r) else {
                return Err(LabError::Config(format!("entity pool for {kind} exhausted")));
            };
            swaps.push(alt.as_str());
        }
        let (mut m, mut rep, mut mask) = (String::new(), String::new(), String::new());
        let mut k = 0;
        for p in pieces {
            match p {
                Piece::Text(t) => {
                    for s in [&mut m, &mut rep, &mut mask] {
                        s.push_str(t);
                    }
                }
                Piece::Slot(kind) => {
                    m.push_str(&format!("{MARK_OPEN}{kind}|{}{MARK_CLOSE}", fills[k].1));
                    rep.push_str(swaps[k]);
                    mask.push_str(&format!("<{kind}>"));
                    k += 1;
                }
            }
        }
        out.marked.push(m);
        out.replaced.push(rep);
        out.masked.push(mask);
    }
    Ok(out)
}

/// Plain-text lines of a built-in domain.
pub fn builtin(kind: &str, count: usize, seed: u64) -> Result<Vec<String>> {
    let spec = match kind {
        "news" => SensiTemplateSpec::news(count, seed),
        "code" => SensiTemplateSpec::code(count, seed),
        other => return Err(LabError::Config(format!("unknown built-in corpus {other:?}"))),
    };
    Ok(generate_sensi_corpora(&spec)?.plain())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_generation_is_repeatable() {
        let a = generate_sensi_corpora(&SensiTemplateSpec::news(50, 3)).unwrap();
        let b = generate_sensi_corpora(&SensiTemplateSpec::news(50, 3)).unwrap();
        assert_eq!(a, b);
        let c = generate_sensi_corpora(&SensiTemplateSpec::news(50, 4)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn replaced_lines_share_no_entity_surface() {
        let c = generate_sensi_corpora(&SensiTemplateSpec::news(300, 1)).unwrap();
        for (m, r) in c.marked.iter().zip(&c.replaced) {
            let (plain, spans) = parse_marked(m).unwrap();
            for s in spans {
                let surface = &plain[s.start..s.end];
                assert!(!r.contains(surface), "{surface:?} survives in {r:?}");
            }
        }
    }

    #[test]
    fn masked_lines_hold_only_known_tags() {
        let spec = SensiTemplateSpec::news(200, 2);
        let c = generate_sensi_corpora(&spec).unwrap();
        for line in &c.masked {
            for part in line.split('<').skip(1) {
                let tag = part.split('>').next().unwrap();
                assert!(spec.pools.contains_key(tag), "{tag}");
            }
            assert!(!line.contains(MARK_OPEN));
        }
    }

    #[test]
    fn singleton_pool_cannot_be_replaced() {
        let mut spec = SensiTemplateSpec::news(5, 0);
        spec.templates = vec!["{ORG} grew.".into()];
        spec.pools.insert("ORG".into(), vec!["Acme".into()]);
        let e = generate_sensi_corpora(&spec).unwrap_err();
        assert!(e.to_string().contains("ORG"));
        spec.templates = vec!["{NOPE}".into()];
        assert!(generate_sensi_corpora(&spec).is_err());
    }

    #[test]
    fn lines_fit_the_desk_context() {
        for kind in ["news", "code"] {
            for l in builtin(kind, 500, 9).unwrap() {
                assert!(l.len() < 64, "{l:?}");
            }
        }
    }
}
