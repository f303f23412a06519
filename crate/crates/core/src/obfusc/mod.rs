//! Attacker transforms: a packer emulation (compress header and sections
//! behind a stub, copy the overlay verbatim) and an instruction-substitution
//! morpher over code sections. Plus the augmentation that mixes transformed
//! copies into a training set, and conversion bookkeeping.

pub mod lz;
mod morph;
mod report;

pub use morph::{morph, Substitution, SubstitutionTable};
pub use report::{conversion_report, ConversionReport, ConversionStats, FamilyConversion};

use std::collections::BTreeMap;
use std::path::Path;
use std::process::Command;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::binformat::{
    parse, serialize, Binary, Origin, Section, SectionKind, PACKED_MAGIC,
};
use crate::error::{Error, Result};
use crate::rng;

/// Outcome shared by both transforms.
#[derive(Debug, Clone, PartialEq)]
pub enum TransformResult {
    Transformed(Binary),
    NotApplicable(String),
}

pub type PackResult = TransformResult;
pub type MorphResult = TransformResult;

impl TransformResult {
    pub fn into_binary(self) -> Option<Binary> {
        match self {
            TransformResult::Transformed(b) => Some(b),
            TransformResult::NotApplicable(_) => None,
        }
    }

    pub fn is_transformed(&self) -> bool {
        matches!(self, TransformResult::Transformed(_))
    }
}

pub const ALREADY_PACKED: &str = "already packed";
pub const INCOMPRESSIBLE: &str = "incompressible";

/// Stub layout inside the single packed code section:
/// `"MVXP" | original body length u32 LE | compressed body`.
const STUB_LEN: usize = 8;

fn derived(b: &Binary, origin: Origin, suffix: &str) -> (String, Option<String>) {
    let id = format!("{}.{suffix}", b.id);
    let parent = b.parent_id.clone().unwrap_or_else(|| b.id.clone());
    debug_assert!(origin != Origin::Base);
    (id, Some(parent))
}

fn body_bytes(b: &Binary) -> Vec<u8> {
    let mut all = serialize(b);
    all.truncate(b.body_len());
    all
}

/// Packs header and sections; the overlay is appended untouched.
pub fn pack(b: &Binary) -> PackResult {
    if b.is_packed() {
        return TransformResult::NotApplicable(ALREADY_PACKED.into());
    }
    let body = body_bytes(b);
    let compressed = lz::compress(&body);
    if compressed.len() + STUB_LEN >= body.len() {
        return TransformResult::NotApplicable(INCOMPRESSIBLE.into());
    }
    let mut stub = Vec::with_capacity(STUB_LEN + compressed.len());
    stub.extend_from_slice(&PACKED_MAGIC);
    stub.extend_from_slice(&(body.len() as u32).to_le_bytes());
    stub.extend_from_slice(&compressed);

    let (id, parent) = derived(b, Origin::Packed, "packed");
    let mut out = Binary::new(
        id,
        b.family.clone(),
        PACKED_MAGIC,
        vec![Section::new(SectionKind::Code, stub)],
        b.overlay.clone(),
    );
    out.year = b.year;
    out.origin = Origin::Packed;
    out.parent_id = parent;
    TransformResult::Transformed(out)
}

/// Inverse of [`pack`].
pub fn unpack(b: &Binary) -> Result<Binary> {
    if !b.is_packed() {
        return Err(Error::NotPacked);
    }
    let stub = b
        .sections
        .first()
        .filter(|s| s.bytes.len() >= STUB_LEN && s.bytes[..4] == PACKED_MAGIC)
        .ok_or(Error::NotPacked)?;
    let orig_len = u32::from_le_bytes(stub.bytes[4..8].try_into().unwrap()) as usize;
    let mut bytes = lz::decompress(&stub.bytes[STUB_LEN..], orig_len)?;
    bytes.extend_from_slice(&b.overlay);
    let mut out = parse(&bytes)?;
    out.family = b.family.clone();
    out.year = b.year;
    if b.origin == Origin::Packed {
        out.id = b.parent_id.clone().unwrap_or_else(|| b.id.clone());
        out.origin = Origin::Base;
        out.parent_id = None;
    } else {
        out.id = b.id.clone();
        out.origin = b.origin;
        out.parent_id = b.parent_id.clone();
    }
    Ok(out)
}

/// Packer backend: the built-in emulation, or an external command such as a
/// real UPX. `{input}` and `{output}` in the command are replaced by file paths.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Packer {
    #[default]
    Emulated,
    External(String),
}

impl Packer {
    pub fn from_cmd(cmd: Option<&str>) -> Self {
        match cmd {
            Some(c) if !c.trim().is_empty() => Packer::External(c.to_string()),
            _ => Packer::Emulated,
        }
    }

    pub fn pack(&self, b: &Binary) -> Result<PackResult> {
        match self {
            Packer::Emulated => Ok(pack(b)),
            Packer::External(cmd) => external_pack(cmd, b),
        }
    }
}

fn external_pack(cmd: &str, b: &Binary) -> Result<PackResult> {
    let dir = tempfile::tempdir().map_err(|e| Error::io(std::env::temp_dir(), e))?;
    let input = dir.path().join("input.bin");
    let output = dir.path().join("output.bin");
    std::fs::write(&input, serialize(b)).map_err(|e| Error::io(&input, e))?;
    let line = cmd
        .replace("{input}", &shell_quote(&input))
        .replace("{output}", &shell_quote(&output));
    let status = Command::new("sh")
        .arg("-c")
        .arg(&line)
        .output()
        .map_err(|e| Error::ExternalTool(format!("{line}: {e}")))?;
    if !status.status.success() {
        let msg = String::from_utf8_lossy(&status.stderr).trim().to_string();
        return Ok(TransformResult::NotApplicable(format!("external packer: {msg}")));
    }
    let bytes = std::fs::read(&output).map_err(|e| Error::io(&output, e))?;
    let mut out = parse(&bytes)?;
    let (id, parent) = derived(b, Origin::Packed, "packed");
    out.id = id;
    out.family = b.family.clone();
    out.year = b.year;
    out.origin = Origin::Packed;
    out.parent_id = parent;
    Ok(TransformResult::Transformed(out))
}

fn shell_quote(p: &Path) -> String {
    format!("'{}'", p.display().to_string().replace('\'', r"'\''"))
}

/// Counts from building an enhanced training set.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnhanceStats {
    pub pack_selected: usize,
    pub packed: usize,
    pub pack_skipped: usize,
    pub morph_selected: usize,
    pub morphed: usize,
    pub morph_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct EnhancedSet {
    pub binaries: Vec<Binary>,
    pub stats: EnhanceStats,
}

/// Choice of `round(fraction * n)` base samples, fixed by `(seed, tag)` and
/// independent of input order.
fn select(train: &[Binary], fraction: f64, seed: u64, tag: &str) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..train.len())
        .filter(|&i| train[i].origin == Origin::Base)
        .collect();
    idx.sort_by(|&a, &b| train[a].id.cmp(&train[b].id));
    let k = (fraction * idx.len() as f64).round() as usize;
    let mut r = rng::stream(seed, tag);
    idx.shuffle(&mut r);
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Keeps every original and appends packed/morphed copies of seeded random
/// subsets. Samples a transform does not apply to are skipped and counted.
pub fn build_enhanced_training_set(
    train: &[Binary],
    pack_fraction: f64,
    morph_fraction: f64,
    morph_passes: usize,
    table: &SubstitutionTable,
    packer: &Packer,
    seed: u64,
) -> Result<EnhancedSet> {
    for f in [pack_fraction, morph_fraction] {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::InvalidConfig(format!("fraction {f} outside [0,1]")));
        }
    }
    let mut out = train.to_vec();
    let mut stats = EnhanceStats::default();
    for i in select(train, pack_fraction, seed, "enhance/pack") {
        stats.pack_selected += 1;
        match packer.pack(&train[i])? {
            TransformResult::Transformed(b) => {
                stats.packed += 1;
                out.push(b);
            }
            TransformResult::NotApplicable(_) => stats.pack_skipped += 1,
        }
    }
    for i in select(train, morph_fraction, seed, "enhance/morph") {
        stats.morph_selected += 1;
        match morph(&train[i], table, morph_passes, seed)? {
            TransformResult::Transformed(b) => {
                stats.morphed += 1;
                out.push(b);
            }
            TransformResult::NotApplicable(_) => stats.morph_skipped += 1,
        }
    }
    Ok(EnhancedSet {
        binaries: out,
        stats,
    })
}

/// Applies a transform to every base sample, returning the successes and the
/// not-applicable reasons keyed by sample id.
pub fn transform_all<F>(base: &[Binary], mut f: F) -> Result<(Vec<Binary>, BTreeMap<String, String>)>
where
    F: FnMut(&Binary) -> Result<TransformResult>,
{
    let mut done = Vec::new();
    let mut skipped = BTreeMap::new();
    for b in base.iter().filter(|b| b.origin == Origin::Base) {
        match f(b)? {
            TransformResult::Transformed(t) => done.push(t),
            TransformResult::NotApplicable(why) => {
                skipped.insert(b.id.clone(), why);
            }
        }
    }
    Ok((done, skipped))
}
