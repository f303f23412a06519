use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{parse, serialize, Binary, Origin};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory unless absolute.
    pub path: String,
    pub family: String,
    pub year: Option<i32>,
    pub origin: Origin,
    pub parent_id: Option<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CorpusManifest {
    pub entries: Vec<ManifestEntry>,
}

impl CorpusManifest {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&serde_json::to_string(e).expect("manifest entry serializes"));
            s.push('\n');
        }
        s
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line).map_err(|e| Error::BadManifest {
                line: i + 1,
                reason: e.to_string(),
            })?;
            entries.push(e);
        }
        let m = CorpusManifest { entries };
        m.check()?;
        Ok(m)
    }

    /// Unique ids; every parent resolves to a base entry.
    pub fn check(&self) -> Result<()> {
        let mut origins = BTreeMap::new();
        for e in &self.entries {
            if origins.insert(e.id.as_str(), e.origin).is_some() {
                return Err(Error::DuplicateId(e.id.clone()));
            }
        }
        for e in &self.entries {
            match (&e.parent_id, e.origin) {
                (Some(p), _) => {
                    if origins.get(p.as_str()) != Some(&Origin::Base) {
                        return Err(Error::BadParent {
                            id: e.id.clone(),
                            parent: p.clone(),
                        });
                    }
                }
                (None, Origin::Base) => {}
                (None, _) => {
                    return Err(Error::BadParent {
                        id: e.id.clone(),
                        parent: String::new(),
                    })
                }
            }
        }
        Ok(())
    }
}

fn file_name_for(id: &str) -> String {
    let safe: String = id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("samples/{safe}.bin")
}

/// Writes every binary under `dir/samples/` plus `dir/manifest.jsonl`.
pub fn save_corpus(binaries: &[Binary], dir: &Path) -> Result<CorpusManifest> {
    let entries: Vec<ManifestEntry> = binaries
        .iter()
        .map(|b| ManifestEntry {
            id: b.id.clone(),
            path: file_name_for(&b.id),
            family: b.family.clone(),
            year: b.year,
            origin: b.origin,
            parent_id: b.parent_id.clone(),
        })
        .collect();
    let manifest = CorpusManifest { entries };
    let mut paths = BTreeSet::new();
    for e in &manifest.entries {
        if !paths.insert(e.path.as_str()) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
    }
    manifest.check()?;

    let samples = dir.join("samples");
    fs::create_dir_all(&samples).map_err(|e| Error::io(&samples, e))?;
    for (b, e) in binaries.iter().zip(&manifest.entries) {
        let p = dir.join(&e.path);
        fs::write(&p, serialize(b)).map_err(|err| Error::io(&p, err))?;
    }
    let mpath = dir.join(MANIFEST_FILE);
    let mut f = fs::File::create(&mpath).map_err(|e| Error::io(&mpath, e))?;
    f.write_all(manifest.to_jsonl().as_bytes())
        .map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// Loads a corpus from a manifest file, or from a directory containing one.
pub fn load_corpus(manifest_path: &Path) -> Result<Vec<Binary>> {
    let mpath: PathBuf = if manifest_path.is_dir() {
        manifest_path.join(MANIFEST_FILE)
    } else {
        manifest_path.to_path_buf()
    };
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest = CorpusManifest::from_jsonl(&text)?;
    let base = mpath.parent().unwrap_or(Path::new("."));
    manifest
        .entries
        .iter()
        .map(|e| {
            let p = base.join(&e.path);
            let bytes = fs::read(&p).map_err(|err| Error::io(&p, err))?;
            let mut b = parse(&bytes)?;
            b.id = e.id.clone();
            b.family = e.family.clone();
            b.year = e.year;
            b.origin = e.origin;
            b.parent_id = e.parent_id.clone();
            Ok(b)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::binformat::{Section, SectionKind, CONTAINER_MAGIC};

    fn bin(id: &str, fill: u8) -> Binary {
        let mut b = Binary::new(
            id,
            "fam",
            CONTAINER_MAGIC,
            vec![Section::new(SectionKind::Data, vec![fill; 40])],
            vec![fill ^ 0xFF; 3],
        );
        b.year = Some(2019);
        b
    }

    #[test]
    fn empty_manifest_loads_empty() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "").unwrap();
        assert!(load_corpus(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn save_then_load_preserves_ids_families_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut child = bin("b.packed", 2);
        child.origin = Origin::Packed;
        child.parent_id = Some("b".into());
        let bins = vec![bin("a", 1), bin("b", 2), child];
        save_corpus(&bins, dir.path()).unwrap();
        let back = load_corpus(&dir.path().join(MANIFEST_FILE)).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in bins.iter().zip(&back) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.family, y.family);
            assert_eq!(serialize(x), serialize(y));
            assert_eq!(x, y);
        }
    }

    #[test]
    fn dangling_parent_is_rejected() {
        let line = r#"{"id":"x","path":"samples/x.bin","family":"f","year":null,"origin":"packed","parent_id":"nope"}"#;
        assert!(matches!(
            CorpusManifest::from_jsonl(line),
            Err(Error::BadParent { .. })
        ));
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let line = r#"{"id":"x","path":"a","family":"f","year":null,"origin":"base","parent_id":null}"#;
        let text = format!("{line}\n{line}\n");
        assert!(matches!(
            CorpusManifest::from_jsonl(&text),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn missing_sample_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let line = r#"{"id":"x","path":"samples/x.bin","family":"f","year":null,"origin":"base","parent_id":null}"#;
        fs::write(dir.path().join(MANIFEST_FILE), line).unwrap();
        assert!(matches!(load_corpus(dir.path()), Err(Error::MissingFile(_))));
    }
}
