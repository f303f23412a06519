use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::TransformResult;
use crate::binformat::{Binary, Origin};
use crate::error::{Error, Result};
use crate::{hexbytes, rng};

pub const NO_CODE_SECTION: &str = "no code section";
pub const NO_MATCHES: &str = "no matches";

/// Probability that a matched site is rewritten in a pass.
pub const SITE_PROBABILITY: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Substitution {
    #[serde(with = "hexbytes")]
    pub pattern: Vec<u8>,
    #[serde(with = "hexbytes")]
    pub replacement: Vec<u8>,
}

/// Equivalent-instruction rewrites over the synthetic code alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubstitutionTable {
    entries: Vec<Substitution>,
}

impl SubstitutionTable {
    pub fn new(entries: Vec<Substitution>) -> Result<Self> {
        for (i, a) in entries.iter().enumerate() {
            if a.pattern.is_empty() {
                return Err(Error::InvalidSpec("empty substitution pattern".into()));
            }
            for (j, b) in entries.iter().enumerate() {
                if i != j && b.pattern.starts_with(&a.pattern) {
                    return Err(Error::InvalidSpec(format!(
                        "pattern {} is a prefix of {}",
                        hex::encode(&a.pattern),
                        hex::encode(&b.pattern)
                    )));
                }
            }
        }
        Ok(SubstitutionTable { entries })
    }

    pub fn entries(&self) -> &[Substitution] {
        &self.entries
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::new(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.entries).expect("table serializes")
    }

    fn match_at(&self, code: &[u8], at: usize) -> Option<&Substitution> {
        self.entries.iter().find(|e| code[at..].starts_with(&e.pattern))
    }

    /// Number of non-overlapping matches in a left-to-right scan.
    pub fn count_sites(&self, code: &[u8]) -> usize {
        let mut i = 0;
        let mut n = 0;
        while i < code.len() {
            match self.match_at(code, i) {
                Some(e) => {
                    n += 1;
                    i += e.pattern.len();
                }
                None => i += 1,
            }
        }
        n
    }
}

impl Default for SubstitutionTable {
    /// Symmetric pairs of same-length x86-style idioms, so rewritten code
    /// stays rewritable.
    fn default() -> Self {
        let pairs: [(&[u8], &[u8]); 4] = [
            (&[0x31, 0xC0], &[0x29, 0xC0]),             // xor eax,eax / sub eax,eax
            (&[0x89, 0xD8], &[0x53, 0x58]),             // mov eax,ebx / push ebx; pop eax
            (&[0x83, 0xC0, 0x01], &[0x40, 0x90, 0x90]), // add eax,1 / inc eax; nop; nop
            (&[0x85, 0xC0], &[0x09, 0xC0]),             // test eax,eax / or eax,eax
        ];
        let mut entries = Vec::new();
        for (a, b) in pairs {
            entries.push(Substitution {
                pattern: a.to_vec(),
                replacement: b.to_vec(),
            });
            entries.push(Substitution {
                pattern: b.to_vec(),
                replacement: a.to_vec(),
            });
        }
        SubstitutionTable::new(entries).expect("default table is prefix-free")
    }
}

fn morph_pass(code: &[u8], table: &SubstitutionTable, r: &mut rng::Rng) -> (Vec<u8>, usize) {
    let mut out = Vec::with_capacity(code.len());
    let mut sites = 0;
    let mut i = 0;
    while i < code.len() {
        match table.match_at(code, i) {
            Some(e) => {
                sites += 1;
                if r.random_bool(SITE_PROBABILITY) {
                    out.extend_from_slice(&e.replacement);
                } else {
                    out.extend_from_slice(&e.pattern);
                }
                i += e.pattern.len();
            }
            None => {
                out.push(code[i]);
                i += 1;
            }
        }
    }
    (out, sites)
}

/// Rewrites substitution sites in the code section, each with probability
/// 0.5 per pass. Other sections and the overlay are untouched.
pub fn morph(
    b: &Binary,
    table: &SubstitutionTable,
    passes: usize,
    seed: u64,
) -> Result<TransformResult> {
    if passes == 0 {
        return Err(Error::InvalidConfig("morph passes must be >= 1".into()));
    }
    let Some(ci) = b.code_section() else {
        return Ok(TransformResult::NotApplicable(NO_CODE_SECTION.into()));
    };
    let base_id = b.parent_id.clone().unwrap_or_else(|| b.id.clone());
    let mut r = rng::stream(seed, &format!("morph/{base_id}"));
    let mut code = b.sections[ci].bytes.clone();
    for pass in 0..passes {
        let (next, sites) = morph_pass(&code, table, &mut r);
        if pass == 0 && sites == 0 {
            return Ok(TransformResult::NotApplicable(NO_MATCHES.into()));
        }
        code = next;
    }
    let mut out = b.clone();
    let mut sections = b.sections.clone();
    sections[ci].bytes = code;
    out.set_sections(sections);
    out.id = format!("{}.morphed", b.id);
    out.origin = Origin::Morphed;
    out.parent_id = Some(base_id);
    Ok(TransformResult::Transformed(out))
}
