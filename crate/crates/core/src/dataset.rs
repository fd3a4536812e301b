//! Dataset manifest: the line-delimited index tying sample ids to image
//! files, mask files, splits, and image-level labels. Paths are stored
//! relative to the manifest so a dataset directory can be moved whole.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::labels::{pgm_to_mask, Mask};
use crate::pgm::pgm_to_image;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!(
                "unknown split '{other}' (expected train or test)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub image_path: String,
    pub mask_path: String,
    pub y: u8,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.id, e.split, e.image_path, e.mask_path, e.y
            ));
        }
        out
    }

    pub fn parse(text: &str) -> Result<Manifest> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 5 {
                return Err(Error::Format {
                    offset: lineno,
                    what: format!(
                        "manifest line {}: expected 5 tab-separated fields",
                        lineno + 1
                    ),
                });
            }
            let y: u8 = fields[4].parse().map_err(|_| Error::Format {
                offset: lineno,
                what: format!(
                    "manifest line {}: label '{}' is not 0 or 1",
                    lineno + 1,
                    fields[4]
                ),
            })?;
            if y > 1 {
                return Err(Error::Format {
                    offset: lineno,
                    what: format!("manifest line {}: label {y} is not 0 or 1", lineno + 1),
                });
            }
            entries.push(ManifestEntry {
                id: fields[0].to_string(),
                split: fields[1].parse().map_err(|_| Error::Format {
                    offset: lineno,
                    what: format!("manifest line {}: bad split '{}'", lineno + 1, fields[1]),
                })?,
                image_path: fields[2].to_string(),
                mask_path: fields[3].to_string(),
                y,
            });
        }
        Ok(Manifest { entries })
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Manifest::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn split_entries(&self, split: Split) -> Vec<&ManifestEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// One sample pulled into memory.
#[derive(Debug, Clone)]
pub struct LoadedSample {
    pub id: String,
    pub image: Image,
    pub mask: Mask,
    pub y: u8,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads every sample of one split, resolving paths against the manifest's
/// directory.
pub fn load_split(manifest_path: &Path, split: Split) -> Result<Vec<LoadedSample>> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    manifest
        .split_entries(split)
        .into_iter()
        .map(|e| {
            let image = pgm_to_image(&read_bytes(&base.join(&e.image_path))?)?;
            let mask = pgm_to_mask(&read_bytes(&base.join(&e.mask_path))?)?;
            Ok(LoadedSample {
                id: e.id.clone(),
                image,
                mask,
                y: e.y,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_manifest() -> Manifest {
        Manifest {
            entries: vec![
                ManifestEntry {
                    id: "0000".into(),
                    split: Split::Train,
                    image_path: "images/0000.pgm".into(),
                    mask_path: "masks/0000.pgm".into(),
                    y: 1,
                },
                ManifestEntry {
                    id: "0001".into(),
                    split: Split::Test,
                    image_path: "images/0001.pgm".into(),
                    mask_path: "masks/0001.pgm".into(),
                    y: 0,
                },
            ],
        }
    }

    #[test]
    fn manifest_text_round_trips() {
        let m = sample_manifest();
        let text = m.to_text();
        assert_eq!(
            text,
            "0000\ttrain\timages/0000.pgm\tmasks/0000.pgm\t1\n\
             0001\ttest\timages/0001.pgm\tmasks/0001.pgm\t0\n"
        );
        assert_eq!(Manifest::parse(&text).unwrap(), m);
    }

    #[test]
    fn parse_rejects_malformed_rows() {
        assert!(matches!(
            Manifest::parse("a\tb\tc\n"),
            Err(Error::Format { what, .. }) if what.contains("5 tab-separated")
        ));
        assert!(matches!(
            Manifest::parse("0\ttrain\ti.pgm\tm.pgm\t7\n"),
            Err(Error::Format { what, .. }) if what.contains("not 0 or 1")
        ));
        assert!(matches!(
            Manifest::parse("0\tvalid\ti.pgm\tm.pgm\t0\n"),
            Err(Error::Format { what, .. }) if what.contains("bad split")
        ));
    }

    #[test]
    fn split_entries_filters() {
        let m = sample_manifest();
        assert_eq!(m.split_entries(Split::Train).len(), 1);
        assert_eq!(m.split_entries(Split::Test)[0].id, "0001");
    }
}
