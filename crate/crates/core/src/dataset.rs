//! Training triplets and the JSON-lines dataset manifest.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::prompt::{PromptId, ShapeKind};
use crate::raster::{Image, Mask};

/// One sample: image, binary mask and the prompt naming the masked region.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub image: Image,
    pub mask: Mask,
    pub prompt: PromptId,
    /// Shape kinds visible in the image; empty when unknown.
    pub scene: Vec<ShapeKind>,
}

impl Triplet {
    /// Scene words, falling back to the prompt's words when unknown.
    pub fn scene_words(&self) -> Vec<ShapeKind> {
        if self.scene.is_empty() {
            self.prompt.words()
        } else {
            self.scene.clone()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestRow {
    /// Paths are relative to the manifest's directory unless absolute.
    pub image: String,
    pub mask: String,
    pub prompt_id: usize,
    pub prompt_text: String,
    pub split: String,
    /// Shape kinds present in the scene, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<Vec<ShapeKind>>,
    /// Mixing option label for augmented rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub option: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub path: PathBuf,
    pub rows: Vec<ManifestRow>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Manifest> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut rows = Vec::new();
        for (i, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let row: ManifestRow = serde_json::from_str(&line).map_err(|e| Error::Manifest {
                path: path.to_path_buf(),
                line: i + 1,
                source: e,
            })?;
            rows.push(row);
        }
        Ok(Manifest {
            path: path.to_path_buf(),
            rows,
        })
    }

    pub fn save(&self) -> Result<()> {
        write_rows(&self.path, &self.rows)
    }

    pub fn dir(&self) -> &Path {
        self.path.parent().unwrap_or_else(|| Path::new("."))
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir().join(p)
        }
    }

    pub fn split(&self, split: &str) -> Vec<&ManifestRow> {
        self.rows.iter().filter(|r| r.split == split).collect()
    }

    pub fn load_row(&self, row: &ManifestRow, channels: usize) -> Result<Triplet> {
        let image = Image::load(&self.resolve(&row.image), channels)?;
        let mask = Mask::load(&self.resolve(&row.mask))?.binarize(0.5);
        if (mask.width, mask.height) != (image.width, image.height) {
            return Err(Error::bad_shape(
                "load_row",
                format!("mask {} does not match image {}", row.mask, row.image),
            ));
        }
        Ok(Triplet {
            image,
            mask,
            prompt: PromptId::new(row.prompt_id)?,
            scene: row.scene.clone().unwrap_or_default(),
        })
    }

    /// Loads every row of `split`, in manifest order.
    pub fn load_split(&self, split: &str, channels: usize) -> Result<Vec<Triplet>> {
        self.split(split)
            .into_iter()
            .map(|r| self.load_row(r, channels))
            .collect()
    }
}

pub fn write_rows(path: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r)?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&out).map_err(|e| Error::io(path, e))
}
