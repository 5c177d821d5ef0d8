//! Line-oriented dataset manifest (`ODED1`).

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};

pub const MAGIC: &str = "ODED1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?} (expected train|val|test)"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// Paths are stored relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub split: Split,
    pub image: PathBuf,
    pub depth: PathBuf,
    pub sensor: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    pub h: usize,
    pub w: usize,
    pub entries: Vec<ManifestEntry>,
    /// Directory relative paths resolve against; not serialized.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn version(&self) -> u32 {
        1
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            for p in [&e.image, &e.depth, &e.sensor] {
                if !seen.insert(p) {
                    return Err(Error::Config(format!("manifest lists {} twice", p.display())));
                }
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split(split).count()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{MAGIC}\n{} {} {}\n", self.h, self.w, self.entries.len());
        for e in &self.entries {
            s += &format!("{}\t{}\t{}\t{}\n", e.split, e.image.display(), e.depth.display(), e.sensor.display());
        }
        s
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut offset = 0;
        let err = |offset: usize, msg: String| Error::Parse { path: path.to_path_buf(), offset, msg };
        let mut lines = text.split_inclusive('\n').map(|l| {
            let at = offset;
            offset += l.len();
            (at, l.trim_end_matches(['\n', '\r']))
        });
        match lines.next() {
            Some((_, MAGIC)) => {}
            Some((at, l)) => return Err(err(at, format!("bad magic {l:?}, expected {MAGIC:?}"))),
            None => return Err(err(0, "empty manifest".into())),
        }
        let (at, dims) = lines.next().ok_or_else(|| err(text.len(), "missing `<h> <w> <n>` line".into()))?;
        let nums: Vec<usize> = dims
            .split_whitespace()
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| err(at, format!("bad dimension line {dims:?}")))?;
        let [h, w, n] = nums[..] else {
            return Err(err(at, format!("expected `<h> <w> <n>`, got {dims:?}")));
        };
        let mut entries = Vec::with_capacity(n);
        for (at, line) in lines {
            if line.is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            let [split, image, depth, sensor] = f[..] else {
                return Err(err(at, format!("expected 4 tab-separated fields, got {}", f.len())));
            };
            let split = split.parse().map_err(|_| err(at, format!("unknown split {split:?}")))?;
            entries.push(ManifestEntry { split, image: image.into(), depth: depth.into(), sensor: sensor.into() });
        }
        if entries.len() != n {
            return Err(err(text.len(), format!("header promises {n} samples, found {}", entries.len())));
        }
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let m = DatasetManifest { h, w, entries, root };
        m.validate()?;
        Ok(m)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        self.validate()?;
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(split: Split, i: usize) -> ManifestEntry {
        ManifestEntry {
            split,
            image: format!("{i}.ppm").into(),
            depth: format!("{i}_d.pfm").into(),
            sensor: format!("{i}_s.pfm").into(),
        }
    }

    #[test]
    fn roundtrip() {
        let m = DatasetManifest {
            h: 4,
            w: 8,
            entries: vec![entry(Split::Train, 0), entry(Split::Val, 1)],
            root: "dir".into(),
        };
        let back = DatasetManifest::parse(&m.to_text(), Path::new("dir/manifest.txt")).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.count(Split::Val), 1);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = DatasetManifest::parse("ODED1\n4 8 0\n", Path::new("m")).unwrap();
        assert!(m.entries.is_empty());
    }

    #[test]
    fn malformed_lines_report_offsets() {
        let cases = [
            ("ODED2\n", 0),
            ("ODED1\n4 8\n", 6),
            ("ODED1\n4 8 1\ntrain\ta\tb\n", 12),
            ("ODED1\n4 8 1\nbogus\ta\tb\tc\n", 12),
            ("ODED1\n4 8 2\ntrain\ta\tb\tc\n", 24),
        ];
        for (text, at) in cases {
            match DatasetManifest::parse(text, Path::new("m")) {
                Err(Error::Parse { offset, .. }) => assert_eq!(offset, at, "{text:?}"),
                other => panic!("{text:?}: {other:?}"),
            }
        }
    }

    #[test]
    fn duplicate_paths_are_rejected() {
        let text = "ODED1\n4 8 2\ntrain\ta\tb\tc\nval\ta\td\te\n";
        assert!(matches!(DatasetManifest::parse(text, Path::new("m")), Err(Error::Config(_))));
    }
}
