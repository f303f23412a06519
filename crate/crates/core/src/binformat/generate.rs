//! Synthetic family corpora.
//!
//! Each family plants a motif (a short pattern repeated into a run) inside a
//! positional band, fills its sections from family-specific byte sources and
//! optionally carries an overlay. Packability is controlled by how many
//! samples get a compressible body, and a family may ship already packed.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{parse, serialize, Binary, Origin, Section, SectionKind, CONTAINER_MAGIC};
use crate::error::{Error, Result};
use crate::hexbytes;
use crate::rng;

/// Where a motif band is measured from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Anchor {
    Start,
    End,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotifSpec {
    #[serde(with = "hexbytes")]
    pub pattern: Vec<u8>,
    /// The planted run is `pattern` repeated this many times.
    pub repeats: usize,
    pub anchor: Anchor,
    /// Byte offsets `[lo, hi)` from the anchor that must contain the whole run.
    pub band: (usize, usize),
}

impl MotifSpec {
    pub fn run(&self) -> Vec<u8> {
        self.pattern.repeat(self.repeats.max(1))
    }
}

/// Byte source for a section or overlay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Filler {
    /// Concatenated instruction encodings drawn uniformly.
    Ops {
        #[serde(with = "hexbytes::list")]
        ops: Vec<Vec<u8>>,
    },
    /// Runs of a palette byte, each 1..=max_run long.
    Runs {
        #[serde(with = "hexbytes")]
        palette: Vec<u8>,
        max_run: usize,
    },
    /// Uniform bytes; incompressible.
    Random,
}

impl Filler {
    fn fill(&self, len: usize, r: &mut rng::Rng) -> Vec<u8> {
        let mut out = Vec::with_capacity(len + 8);
        match self {
            Filler::Ops { ops } => {
                while out.len() < len {
                    let op = &ops[r.random_range(0..ops.len())];
                    out.extend_from_slice(op);
                }
            }
            Filler::Runs { palette, max_run } => {
                while out.len() < len {
                    let b = palette[r.random_range(0..palette.len())];
                    let n = r.random_range(1..=(*max_run).max(1));
                    out.extend(std::iter::repeat_n(b, n));
                }
            }
            Filler::Random => {
                out.resize(len, 0);
                r.fill(&mut out[..]);
            }
        }
        out.truncate(len);
        out
    }

    fn validate(&self) -> Result<()> {
        match self {
            Filler::Ops { ops } if ops.is_empty() || ops.iter().any(|o| o.is_empty()) => {
                Err(Error::InvalidSpec("ops filler needs non-empty ops".into()))
            }
            Filler::Runs { palette, .. } if palette.is_empty() => {
                Err(Error::InvalidSpec("runs filler needs a palette".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SectionSpec {
    pub kind: SectionKind,
    /// Relative share of the body length.
    pub share: f64,
    pub filler: Filler,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilySpec {
    pub name: String,
    /// Total file size range in bytes, inclusive.
    pub min_size: usize,
    pub max_size: usize,
    pub motif: MotifSpec,
    pub sections: Vec<SectionSpec>,
    /// Overlay length range in bytes, inclusive.
    pub overlay: (usize, usize),
    pub overlay_filler: Filler,
    /// Fraction of samples whose sections use their compressible fillers;
    /// the rest get uniform random bodies.
    pub packable: f64,
    /// Samples are shipped already packed (the body sits behind a stub).
    #[serde(default)]
    pub prepacked: bool,
}

impl FamilySpec {
    pub fn has_code(&self) -> bool {
        self.sections.iter().any(|s| s.kind == SectionKind::Code)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidSpec(format!("{}: {m}", self.name)));
        if self.name.is_empty() {
            return bad("empty family name");
        }
        if self.motif.pattern.is_empty() {
            return bad("empty motif");
        }
        if self.min_size > self.max_size {
            return bad("min_size > max_size");
        }
        if self.overlay.0 > self.overlay.1 {
            return bad("overlay min > max");
        }
        if !(0.0..=1.0).contains(&self.packable) {
            return bad("packable outside [0,1]");
        }
        if self.sections.is_empty() || self.sections.iter().any(|s| !(s.share > 0.0)) {
            return bad("sections need positive shares");
        }
        let (lo, hi) = self.motif.band;
        let run = self.motif.run().len();
        if lo >= hi || hi - lo < run {
            return bad("motif band cannot hold the motif run");
        }
        let header = super::FIXED_HEADER_LEN + super::SECTION_ENTRY_LEN * self.sections.len();
        if self.min_size < header + self.overlay.1 + run || self.min_size < hi {
            return bad("min_size too small for header, overlay and motif band");
        }
        for s in &self.sections {
            s.filler.validate()?;
        }
        self.overlay_filler.validate()
    }
}

/// Generates `n` samples of one family. Sample `i` depends only on
/// `(spec, seed, i)`.
pub fn generate_family(spec: &FamilySpec, n: usize, seed: u64) -> Result<Vec<Binary>> {
    spec.validate()?;
    (0..n).map(|i| generate_one(spec, seed, i)).collect()
}

fn generate_one(spec: &FamilySpec, seed: u64, index: usize) -> Result<Binary> {
    let id = format!("{}-{index:04}", spec.name);
    let mut r = rng::stream(seed, &id);
    let total = r.random_range(spec.min_size..=spec.max_size);
    let overlay_len = r.random_range(spec.overlay.0..=spec.overlay.1);
    let compressible = r.random_bool(spec.packable);
    let year = r.random_range(2015..=2022);

    let header_len = super::FIXED_HEADER_LEN + super::SECTION_ENTRY_LEN * spec.sections.len();
    let body = total - header_len - overlay_len;
    let share_sum: f64 = spec.sections.iter().map(|s| s.share).sum();
    let mut remaining = body;
    let mut sections = Vec::with_capacity(spec.sections.len());
    for (k, s) in spec.sections.iter().enumerate() {
        let len = if k + 1 == spec.sections.len() {
            remaining
        } else {
            ((body as f64 * s.share / share_sum).round() as usize).min(remaining)
        };
        remaining -= len;
        let filler = if compressible { &s.filler } else { &Filler::Random };
        sections.push(Section::new(s.kind, filler.fill(len, &mut r)));
    }
    let overlay = spec.overlay_filler.fill(overlay_len, &mut r);
    let mut bin = Binary::new(id.clone(), spec.name.clone(), CONTAINER_MAGIC, sections, overlay);

    if spec.prepacked {
        // shipped packed: the body compresses regardless of the random filler
        if let crate::obfusc::PackResult::Transformed(p) = crate::obfusc::pack(&bin) {
            bin.header = p.header;
            bin.sections = p.sections;
            bin.overlay = p.overlay;
        }
    }

    let mut bytes = serialize(&bin);
    let run = spec.motif.run();
    let len = bytes.len();
    let min_start = match spec.motif.anchor {
        Anchor::Start => bin.header.encoded_len(),
        Anchor::End => 0,
    };
    let (lo, hi) = spec.motif.band;
    let (first, last) = match spec.motif.anchor {
        Anchor::Start => (lo.max(min_start), hi.min(len) - run.len()),
        Anchor::End => (
            len.saturating_sub(hi).max(bin.header.encoded_len()),
            len.saturating_sub(lo).saturating_sub(run.len()),
        ),
    };
    if first > last {
        return Err(Error::InvalidSpec(format!(
            "{}: motif band does not fit a {len}-byte sample",
            spec.name
        )));
    }
    let at = r.random_range(first..=last);
    bytes[at..at + run.len()].copy_from_slice(&run);

    let mut out = parse(&bytes)?;
    out.id = id;
    out.family = spec.name.clone();
    out.year = Some(year);
    out.origin = Origin::Base;
    Ok(out)
}

/// Offsets of every occurrence of `pattern` in `bytes`.
pub fn motif_offsets(bytes: &[u8], pattern: &[u8]) -> Vec<usize> {
    if pattern.is_empty() || pattern.len() > bytes.len() {
        return Vec::new();
    }
    bytes
        .windows(pattern.len())
        .enumerate()
        .filter(|(_, w)| *w == pattern)
        .map(|(i, _)| i)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FamilyEntry {
    #[serde(flatten)]
    pub spec: FamilySpec,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub families: Vec<FamilyEntry>,
}

impl CorpusSpec {
    pub fn family_names(&self) -> Vec<String> {
        self.families.iter().map(|f| f.spec.name.clone()).collect()
    }

    pub fn total(&self) -> usize {
        self.families.iter().map(|f| f.count).sum()
    }

    /// Reads a spec from JSON (`.json`) or TOML (anything else).
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let spec: CorpusSpec = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::InvalidSpec(format!("{}: {}", path.display(), e.message())))?
        };
        for f in &spec.families {
            f.spec.validate()?;
        }
        Ok(spec)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Same families with every count multiplied by `factor` (at least 3 each).
    pub fn scaled(&self, factor: f64) -> CorpusSpec {
        let mut out = self.clone();
        for f in &mut out.families {
            f.count = ((f.count as f64 * factor).round() as usize).max(3);
        }
        out
    }
}

pub fn generate_corpus(spec: &CorpusSpec, seed: u64) -> Result<Vec<Binary>> {
    let mut names = std::collections::BTreeSet::new();
    let mut out = Vec::with_capacity(spec.total());
    for f in &spec.families {
        if !names.insert(f.spec.name.as_str()) {
            return Err(Error::InvalidSpec(format!("duplicate family {}", f.spec.name)));
        }
        let family_seed = rng::derive_seed(seed, &f.spec.name);
        out.extend(generate_family(&f.spec, f.count, family_seed)?);
    }
    Ok(out)
}

fn ops(list: &[&[u8]]) -> Filler {
    Filler::Ops {
        ops: list.iter().map(|o| o.to_vec()).collect(),
    }
}

fn runs(palette: &[u8], max_run: usize) -> Filler {
    Filler::Runs {
        palette: palette.to_vec(),
        max_run,
    }
}

/// Instruction encodings that never contain a default substitution pattern.
const PLAIN_OPS: &[&[u8]] = &[
    &[0x55],
    &[0x8B, 0xEC],
    &[0x5D],
    &[0xC3],
    &[0x50],
    &[0x51],
    &[0xFF, 0xD0],
    &[0x6A, 0x00],
    &[0x8B, 0x45, 0x08],
    &[0x33, 0xD2],
];

/// The five-family default corpus: 1000 samples with a 4:1 imbalance
/// (320/240/200/160/80) and mixed packability and morphability.
pub fn default_corpus_spec() -> CorpusSpec {
    let table_ops: &[&[u8]] = &[
        &[0x31, 0xC0],
        &[0x29, 0xC0],
        &[0x89, 0xD8],
        &[0x53, 0x58],
        &[0x83, 0xC0, 0x01],
        &[0x40, 0x90, 0x90],
    ];
    let mixed = |extra: &[&[u8]]| {
        let mut v: Vec<&[u8]> = PLAIN_OPS.to_vec();
        v.extend_from_slice(table_ops);
        v.extend_from_slice(extra);
        ops(&v)
    };

    let aster = FamilySpec {
        name: "aster".into(),
        min_size: 6 * 1024,
        max_size: 9 * 1024,
        motif: MotifSpec {
            pattern: vec![0xF0, 0xE1, 0xD2, 0xC7, 0xB4, 0xA5, 0xF6, 0xE7],
            repeats: 128,
            anchor: Anchor::Start,
            band: (32, 1600),
        },
        sections: vec![
            SectionSpec {
                kind: SectionKind::Code,
                share: 0.6,
                filler: mixed(&[&[0x8B, 0x4D, 0xFC]]),
            },
            SectionSpec {
                kind: SectionKind::Data,
                share: 0.4,
                filler: runs(&[0x00, 0x00, 0x20, 0x41, 0x65, 0x74], 6),
            },
        ],
        overlay: (1200, 2000),
        overlay_filler: runs(&[0x10, 0x30, 0x30, 0x50], 24),
        packable: 1.0,
        prepacked: false,
    };
    let bramble = FamilySpec {
        name: "bramble".into(),
        min_size: 12 * 1024,
        max_size: 28 * 1024,
        motif: MotifSpec {
            pattern: vec![0x0F, 0x1E, 0x2D, 0x3C, 0x0F, 0x1E, 0x2D, 0x3B],
            repeats: 256,
            anchor: Anchor::Start,
            band: (2048, 6144),
        },
        sections: vec![
            SectionSpec {
                kind: SectionKind::Data,
                share: 0.3,
                filler: runs(&[0x00, 0xFF, 0x7F, 0x80], 16),
            },
            SectionSpec {
                kind: SectionKind::Code,
                share: 0.5,
                filler: mixed(&[&[0xE8, 0x00, 0x10, 0x00, 0x00]]),
            },
            SectionSpec {
                kind: SectionKind::Resource,
                share: 0.2,
                filler: runs(&[0xA0, 0xA8, 0xB0], 32),
            },
        ],
        overlay: (2000, 4000),
        overlay_filler: runs(&[0xC8, 0xD0, 0xD8, 0x00], 12),
        packable: 0.5,
        prepacked: false,
    };
    let cobalt = FamilySpec {
        name: "cobalt".into(),
        min_size: 20 * 1024,
        max_size: 50 * 1024,
        motif: MotifSpec {
            pattern: vec![0xAA, 0x55, 0xAA, 0x55, 0xCC, 0x33, 0xCC, 0x34],
            repeats: 512,
            anchor: Anchor::Start,
            band: (64, 8192),
        },
        sections: vec![
            SectionSpec {
                kind: SectionKind::Data,
                share: 0.5,
                filler: runs(&[0x00, 0x01, 0x02, 0x04, 0x08], 8),
            },
            SectionSpec {
                kind: SectionKind::Resource,
                share: 0.5,
                filler: runs(&[0x60, 0x62, 0x64, 0xE0], 40),
            },
        ],
        overlay: (3000, 6000),
        overlay_filler: runs(&[0x90, 0x98, 0x00, 0x00], 20),
        packable: 1.0,
        prepacked: false,
    };
    let dune = FamilySpec {
        name: "dune".into(),
        min_size: 16 * 1024,
        max_size: 40 * 1024,
        motif: MotifSpec {
            pattern: vec![0x5A, 0x4B, 0x3C, 0x2D, 0x1E, 0x0F, 0x5A, 0x4C],
            repeats: 64,
            anchor: Anchor::End,
            band: (0, 1024),
        },
        sections: vec![
            SectionSpec {
                kind: SectionKind::Code,
                share: 0.7,
                filler: mixed(&[]),
            },
            SectionSpec {
                kind: SectionKind::Data,
                share: 0.3,
                filler: runs(&[0x00, 0x20, 0x30], 10),
            },
        ],
        overlay: (1024, 2048),
        overlay_filler: runs(&[0x44, 0x48], 16),
        packable: 1.0,
        prepacked: true,
    };
    let ember = FamilySpec {
        name: "ember".into(),
        min_size: 3 * 1024,
        max_size: 8 * 1024,
        motif: MotifSpec {
            pattern: vec![0xDE, 0xAD, 0xBE, 0xEF, 0xFE, 0xED, 0xFA, 0xCE],
            repeats: 48,
            anchor: Anchor::Start,
            band: (32, 1024),
        },
        sections: vec![
            SectionSpec {
                kind: SectionKind::Code,
                share: 0.5,
                filler: ops(PLAIN_OPS),
            },
            SectionSpec {
                kind: SectionKind::Data,
                share: 0.5,
                filler: Filler::Random,
            },
        ],
        overlay: (0, 0),
        overlay_filler: Filler::Random,
        packable: 0.0,
        prepacked: false,
    };
    CorpusSpec {
        families: vec![
            FamilyEntry { spec: aster, count: 320 },
            FamilyEntry { spec: bramble, count: 240 },
            FamilyEntry { spec: cobalt, count: 200 },
            FamilyEntry { spec: dune, count: 160 },
            FamilyEntry { spec: ember, count: 80 },
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header_band_spec() -> FamilySpec {
        FamilySpec {
            name: "hb".into(),
            min_size: 512,
            max_size: 1024,
            motif: MotifSpec {
                pattern: vec![0xAB, 0xCD, 0xEF, 0x12],
                repeats: 2,
                anchor: Anchor::Start,
                band: (0, 64),
            },
            sections: vec![
                SectionSpec {
                    kind: SectionKind::Code,
                    share: 1.0,
                    filler: ops(PLAIN_OPS),
                },
                SectionSpec {
                    kind: SectionKind::Data,
                    share: 1.0,
                    filler: runs(&[0, 1], 4),
                },
            ],
            overlay: (0, 16),
            overlay_filler: runs(&[9], 4),
            packable: 1.0,
            prepacked: false,
        }
    }

    #[test]
    fn spec_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = default_corpus_spec();
        let t = dir.path().join("spec.toml");
        std::fs::write(&t, spec.to_toml()).unwrap();
        assert_eq!(CorpusSpec::load(&t).unwrap(), spec);
        let j = dir.path().join("spec.json");
        std::fs::write(&j, serde_json::to_string(&spec).unwrap()).unwrap();
        assert_eq!(CorpusSpec::load(&j).unwrap(), spec);
        std::fs::write(&j, "{\"families\": [], \"extra\": 1}").unwrap();
        assert!(matches!(CorpusSpec::load(&j), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn header_band_motif_lands_in_first_64_bytes() {
        let spec = header_band_spec();
        let b = generate_family(&spec, 1, 7).unwrap();
        let bytes = serialize(&b[0]);
        let hits = motif_offsets(&bytes[..64], &spec.motif.pattern);
        assert!(!hits.is_empty());
    }

    #[test]
    fn generation_is_deterministic() {
        let spec = header_band_spec();
        let a = generate_family(&spec, 5, 11).unwrap();
        let b = generate_family(&spec, 5, 11).unwrap();
        let ab: Vec<_> = a.iter().map(serialize).collect();
        let bb: Vec<_> = b.iter().map(serialize).collect();
        assert_eq!(ab, bb);
        let c = generate_family(&spec, 5, 12).unwrap();
        assert_ne!(ab, c.iter().map(serialize).collect::<Vec<_>>());
    }

    #[test]
    fn sample_does_not_depend_on_batch_size() {
        let spec = header_band_spec();
        let a = generate_family(&spec, 3, 5).unwrap();
        let b = generate_family(&spec, 6, 5).unwrap();
        assert_eq!(a[..], b[..3]);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = header_band_spec();
        s.motif.pattern.clear();
        assert!(matches!(generate_family(&s, 1, 0), Err(Error::InvalidSpec(_))));
        let mut s = header_band_spec();
        s.min_size = 2000;
        assert!(matches!(generate_family(&s, 1, 0), Err(Error::InvalidSpec(_))));
    }

    #[test]
    fn sizes_stay_in_range() {
        let spec = header_band_spec();
        for b in generate_family(&spec, 20, 3).unwrap() {
            let n = b.serialized_len();
            assert!((spec.min_size..=spec.max_size).contains(&n), "{n}");
            b.validate().unwrap();
        }
    }

    #[test]
    fn default_corpus_motifs_are_sound() {
        let spec = default_corpus_spec();
        assert_eq!(spec.total(), 1000);
        let counts: Vec<_> = spec.families.iter().map(|f| f.count).collect();
        let ratio = *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64;
        assert!(ratio <= 4.0);
        let corpus = generate_corpus(&spec, 2024).unwrap();
        assert_eq!(corpus.len(), 1000);
        for b in &corpus {
            let bytes = serialize(b);
            for f in &spec.families {
                let present = !motif_offsets(&bytes, &f.spec.motif.pattern).is_empty();
                assert_eq!(present, f.spec.name == b.family, "{} vs {}", b.id, f.spec.name);
            }
        }
    }
}
