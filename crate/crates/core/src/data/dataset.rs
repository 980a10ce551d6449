//! `path,mos` manifests and loading samples at both branch resolutions.

use std::fs;
use std::path::{Path, PathBuf};

use super::Image;
use crate::config::ModelConfig;
use crate::error::{Error, Result};

pub const MANIFEST_HEADER: &str = "path,mos";

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestRow {
    /// Relative to the manifest's directory.
    pub path: String,
    pub mos: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn new(rows: Vec<ManifestRow>) -> Self {
        Self { rows }
    }

    /// `(min, max)` of the labels, or `None` when empty.
    pub fn label_range(&self) -> Option<(f64, f64)> {
        let mut it = self.rows.iter().map(|r| r.mos);
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| (lo.min(v), hi.max(v))))
    }

    /// Labels are written in shortest round-trip form, so parsing them
    /// back is exact.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{MANIFEST_HEADER}\n");
        for r in &self.rows {
            out.push_str(&format!("{},{}\n", r.path, r.mos));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
            _ => {
                return Err(Error::Data(format!(
                    "manifest line 1: expected header `{MANIFEST_HEADER}`"
                )))
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let (path, mos) = line.rsplit_once(',').ok_or_else(|| {
                Error::Data(format!("manifest line {line_no}: expected `path,mos`"))
            })?;
            let path = path.trim();
            if path.is_empty() {
                return Err(Error::Data(format!("manifest line {line_no}: empty path")));
            }
            let mos: f64 = mos.trim().parse().map_err(|_| {
                Error::Data(format!(
                    "manifest line {line_no}: bad label `{}`",
                    mos.trim()
                ))
            })?;
            if !mos.is_finite() {
                return Err(Error::Data(format!(
                    "manifest line {line_no}: non-finite label"
                )));
            }
            rows.push(ManifestRow {
                path: path.to_string(),
                mos,
            });
        }
        Ok(Self { rows })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
            e => e,
        })
    }
}

/// One labelled image, resampled to both branch resolutions.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub small: Image,
    pub large: Image,
    pub mos: f64,
}

impl ImageSample {
    pub fn from_image(id: impl Into<String>, image: &Image, mos: f64, cfg: &ModelConfig) -> Self {
        let img = image.with_channels(cfg.channels);
        let (s, l) = (cfg.img_size_small, cfg.img_size_large);
        Self {
            id: id.into(),
            small: img.resize(s, s),
            large: img.resize(l, l),
            mos,
        }
    }
}

fn resolve(manifest_path: &Path, rel: &str) -> PathBuf {
    manifest_path.parent().unwrap_or(Path::new(".")).join(rel)
}

/// Reads a manifest and every image it lists.
pub fn load_dataset(manifest_path: &Path, cfg: &ModelConfig) -> Result<Vec<ImageSample>> {
    let manifest = Manifest::read(manifest_path)?;
    manifest
        .rows
        .iter()
        .map(|row| {
            let path = resolve(manifest_path, &row.path);
            if !path.is_file() {
                return Err(Error::Data(format!(
                    "missing image file {}",
                    path.display()
                )));
            }
            let img = Image::read_pnm(&path)?;
            Ok(ImageSample::from_image(&row.path, &img, row.mos, cfg))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_is_exact() {
        let m = Manifest::new(vec![
            ManifestRow {
                path: "a.pgm".into(),
                mos: 0.1 + 0.2,
            },
            ManifestRow {
                path: "dir/b.pgm".into(),
                mos: 1.0 / 3.0,
            },
        ]);
        assert_eq!(Manifest::parse(&m.to_csv()).unwrap(), m);
        assert_eq!(m.label_range(), Some((0.1 + 0.2, 1.0 / 3.0)));
    }

    #[test]
    fn malformed_rows_report_line_numbers() {
        let err = Manifest::parse("path,mos\na.pgm,0.5\nb.pgm\n").unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = Manifest::parse("path,mos\na.pgm,x\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = Manifest::parse("path,mos\na.pgm,NaN\n").unwrap_err();
        assert!(err.to_string().contains("non-finite"), "{err}");
        assert!(Manifest::parse("file,score\n").is_err());
    }
}
