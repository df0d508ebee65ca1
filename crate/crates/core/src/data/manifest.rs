//! Tab-separated corpus manifests.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::Label;

pub const MANIFEST_HEADER: &str = "# path\tlabel\tsensor\tmaterial\tid";
/// Material tag of live captures.
pub const LIVE_MATERIAL: &str = "none";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Image path relative to the manifest's directory.
    pub path: String,
    pub label: Label,
    pub sensor: String,
    pub material: String,
    pub id: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<ManifestRecord>) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.id.as_str()) {
                return Err(Error::Invalid(format!("duplicate sample id {:?}", r.id)));
            }
            if r.label == Label::Live && r.material != LIVE_MATERIAL {
                return Err(Error::Invalid(format!(
                    "live sample {:?} has material {:?}; expected {LIVE_MATERIAL:?}",
                    r.id, r.material
                )));
            }
        }
        Ok(Manifest {
            root: root.into(),
            records,
        })
    }

    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.path)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(MANIFEST_HEADER);
        out.push('\n');
        for r in &self.records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", r.path, r.label, r.sensor, r.material, r.id);
        }
        out
    }

    pub fn parse(text: &str, root: impl Into<PathBuf>) -> Result<Self> {
        let mut records = Vec::new();
        let mut offset = 0;
        let mut header_seen = false;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len();
            let line = line.trim_end_matches(['\n', '\r']);
            if line.starts_with('#') {
                header_seen = true;
                continue;
            }
            if !header_seen {
                return Err(Error::parse(start, "manifest must start with a '#' header line"));
            }
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 5 || f.iter().any(|s| s.is_empty()) {
                return Err(Error::parse(
                    start,
                    format!("expected 5 non-empty tab-separated fields, found {line:?}"),
                ));
            }
            records.push(ManifestRecord {
                path: f[0].to_string(),
                label: f[1].parse().map_err(|e: Error| Error::parse(start, e.to_string()))?,
                sensor: f[2].to_string(),
                material: f[3].to_string(),
                id: f[4].to_string(),
            });
        }
        if !header_seen {
            return Err(Error::parse(0, "manifest must start with a '#' header line"));
        }
        Manifest::new(root, records)
    }

    /// Reads a manifest; record paths resolve against its directory.
    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Manifest::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Writes the records as a manifest; paths are stored unchanged, so
    /// the file belongs in `root`.
    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }

    /// Distinct sensor tags, sorted.
    pub fn sensors(&self) -> Vec<String> {
        distinct(self.records.iter().map(|r| r.sensor.as_str()))
    }

    /// Distinct spoof material tags, sorted.
    pub fn materials(&self) -> Vec<String> {
        distinct(
            self.records
                .iter()
                .filter(|r| r.label == Label::Spoof)
                .map(|r| r.material.as_str()),
        )
    }
}

pub(crate) fn distinct<'a>(it: impl Iterator<Item = &'a str>) -> Vec<String> {
    let mut v: Vec<String> = it.map(str::to_string).collect();
    v.sort();
    v.dedup();
    v
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, label: Label, material: &str) -> ManifestRecord {
        ManifestRecord {
            path: format!("images/{id}.pgm"),
            label,
            sensor: "s".into(),
            material: material.into(),
            id: id.into(),
        }
    }

    #[test]
    fn tsv_round_trip() {
        let m = Manifest::new(
            "/x",
            vec![rec("a", Label::Live, "none"), rec("b", Label::Spoof, "latex")],
        )
        .unwrap();
        let text = m.to_tsv();
        assert!(text.starts_with("# path\tlabel"));
        assert_eq!(Manifest::parse(&text, "/x").unwrap(), m);
        assert_eq!(m.materials(), vec!["latex".to_string()]);
    }

    #[test]
    fn rejects_bad_manifests() {
        assert!(Manifest::new("", vec![rec("a", Label::Live, "none"), rec("a", Label::Spoof, "x")]).is_err());
        assert!(Manifest::new("", vec![rec("a", Label::Live, "latex")]).is_err());
        assert!(matches!(
            Manifest::parse("a\tb\n", ""),
            Err(Error::Parse { offset: 0, .. })
        ));
        let bad = format!("{MANIFEST_HEADER}\np\tlive\ts\tnone\tid\np\tmaybe\ts\tnone\tid2\n");
        let second = MANIFEST_HEADER.len() + 1 + "p\tlive\ts\tnone\tid\n".len();
        assert!(matches!(Manifest::parse(&bad, ""), Err(Error::Parse { offset, .. }) if offset == second));
    }
}
