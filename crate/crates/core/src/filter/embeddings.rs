//! Embedding matrices and their on-disk format.
//!
//! Each encoder writes a little-endian binary file
//!
//! ```text
//! b"CNSEMB1\n" | rows: u32 | dim: u32 | rows * dim f32
//! ```
//!
//! next to a `<name>.index.jsonl` mapping rows to image ids (image encoders) or
//! to prompt keys (text encoder).

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CNSEMB1\n";

pub const CLIP_IMAGE_FILE: &str = "clipimg";
pub const DINO_CLS_FILE: &str = "dinocls";
pub const CLIP_TEXT_FILE: &str = "cliptext";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptVariant {
    /// "A picture of a <class>"
    Plain,
    /// "A picture of a <class> in <shift>"
    Shifted,
}

/// Text prompt key. `shift` is `None` for prompts shared across shifts.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PromptKey {
    pub class_index: u32,
    pub variant: PromptVariant,
    pub shift: Option<String>,
}

/// Row-major `rows x dim` block of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub dim: usize,
    pub data: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn from_rows(dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        let mut data = Vec::with_capacity(rows.len() * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    left: dim,
                    right: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(EmbeddingMatrix { dim, data })
    }

    pub fn rows(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + self.data.len() * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], context: &str) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::parse(context, 0, "missing CNSEMB1 header"));
        }
        let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let expected = rows
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::parse(context, 0, "header size overflow"))?;
        let body = &bytes[16..];
        if body.len() != expected {
            return Err(Error::parse(
                context,
                0,
                format!(
                    "expected {expected} payload bytes for {rows}x{dim}, found {}",
                    body.len()
                ),
            ));
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(EmbeddingMatrix { dim, data })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IndexEntry {
    Image {
        row: usize,
        image_id: String,
    },
    Prompt {
        row: usize,
        class_index: u32,
        variant: PromptVariant,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        shift: Option<String>,
    },
}

impl IndexEntry {
    fn row(&self) -> usize {
        match self {
            IndexEntry::Image { row, .. } | IndexEntry::Prompt { row, .. } => *row,
        }
    }
}

fn bin_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.bin"))
}

fn index_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.index.jsonl"))
}

/// Reads `<dir>/<name>.bin` and its index, checking that the index names every
/// row exactly once.
pub fn read_embedding_file(dir: &Path, name: &str) -> Result<(EmbeddingMatrix, Vec<IndexEntry>)> {
    let bin = bin_path(dir, name);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let matrix = EmbeddingMatrix::from_bytes(&bytes, &bin.display().to_string())?;

    let idx = index_path(dir, name);
    let text = fs::read_to_string(&idx).map_err(|e| Error::io(&idx, e))?;
    let ctx = idx.display().to_string();
    let mut entries = Vec::new();
    let mut seen = vec![false; matrix.rows()];
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry =
            serde_json::from_str(line).map_err(|e| Error::parse(&ctx, i + 1, e))?;
        let row = entry.row();
        if row >= seen.len() || std::mem::replace(&mut seen[row], true) {
            return Err(Error::parse(
                &ctx,
                i + 1,
                format!("row {row} out of range or repeated"),
            ));
        }
        entries.push(entry);
    }
    if let Some(missing) = seen.iter().position(|s| !s) {
        return Err(Error::parse(
            &ctx,
            0,
            format!("row {missing} has no index entry"),
        ));
    }
    Ok((matrix, entries))
}

pub fn write_embedding_file(
    dir: &Path,
    name: &str,
    matrix: &EmbeddingMatrix,
    entries: &[IndexEntry],
) -> Result<()> {
    let bin = bin_path(dir, name);
    fs::write(&bin, matrix.to_bytes()).map_err(|e| Error::io(&bin, e))?;
    let idx = index_path(dir, name);
    let mut f = fs::File::create(&idx).map_err(|e| Error::io(&idx, e))?;
    for e in entries {
        let line = serde_json::to_string(e).expect("index entry serializes");
        writeln!(f, "{line}").map_err(|err| Error::io(&idx, err))?;
    }
    Ok(())
}

/// Image and prompt embeddings for the two image encoders and the joint text
/// encoder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingSet {
    pub clip_image: HashMap<String, Vec<f32>>,
    pub dino_cls: HashMap<String, Vec<f32>>,
    pub text: HashMap<PromptKey, Vec<f32>>,
}

impl EmbeddingSet {
    /// Prompt lookup: the shift-specific entry first, then the shift-agnostic
    /// one.
    pub fn prompt(&self, class_index: u32, variant: PromptVariant, shift: &str) -> Option<&[f32]> {
        let specific = PromptKey {
            class_index,
            variant,
            shift: Some(shift.to_string()),
        };
        self.text
            .get(&specific)
            .or_else(|| {
                self.text.get(&PromptKey {
                    class_index,
                    variant,
                    shift: None,
                })
            })
            .map(Vec::as_slice)
    }

    /// Checks per-encoder dimension agreement and finiteness.
    pub fn validate(&self) -> Result<()> {
        fn check<'a, K: std::fmt::Debug + 'a>(
            it: impl Iterator<Item = (&'a K, &'a Vec<f32>)>,
        ) -> Result<()> {
            let mut dim = None;
            for (k, v) in it {
                let d = *dim.get_or_insert(v.len());
                if d != v.len() {
                    return Err(Error::DimensionMismatch {
                        left: d,
                        right: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("{k:?}")));
                }
            }
            Ok(())
        }
        check(self.clip_image.iter())?;
        check(self.dino_cls.iter())?;
        check(self.text.iter())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut set = EmbeddingSet::default();
        for (name, target) in [
            (CLIP_IMAGE_FILE, &mut set.clip_image),
            (DINO_CLS_FILE, &mut set.dino_cls),
        ] {
            let (m, entries) = read_embedding_file(dir, name)?;
            for e in entries {
                match e {
                    IndexEntry::Image { row, image_id } => {
                        target.insert(image_id, m.row(row).to_vec());
                    }
                    IndexEntry::Prompt { row, .. } => {
                        return Err(Error::parse(
                            index_path(dir, name).display().to_string(),
                            row + 1,
                            "prompt entry in an image index",
                        ))
                    }
                }
            }
        }
        let (m, entries) = read_embedding_file(dir, CLIP_TEXT_FILE)?;
        for e in entries {
            match e {
                IndexEntry::Prompt {
                    row,
                    class_index,
                    variant,
                    shift,
                } => {
                    set.text.insert(
                        PromptKey {
                            class_index,
                            variant,
                            shift,
                        },
                        m.row(row).to_vec(),
                    );
                }
                IndexEntry::Image { row, .. } => {
                    return Err(Error::parse(
                        index_path(dir, CLIP_TEXT_FILE).display().to_string(),
                        row + 1,
                        "image entry in the prompt index",
                    ))
                }
            }
        }
        set.validate()?;
        Ok(set)
    }

    /// Writes the three files. Rows follow sorted key order so output is
    /// deterministic.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for (name, map) in [
            (CLIP_IMAGE_FILE, &self.clip_image),
            (DINO_CLS_FILE, &self.dino_cls),
        ] {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let dim = keys.first().map_or(0, |k| map[*k].len());
            let rows: Vec<Vec<f32>> = keys.iter().map(|k| map[*k].clone()).collect();
            let entries: Vec<IndexEntry> = keys
                .iter()
                .enumerate()
                .map(|(row, k)| IndexEntry::Image {
                    row,
                    image_id: (*k).clone(),
                })
                .collect();
            write_embedding_file(
                dir,
                name,
                &EmbeddingMatrix::from_rows(dim, &rows)?,
                &entries,
            )?;
        }
        let mut keys: Vec<&PromptKey> = self.text.keys().collect();
        keys.sort();
        let dim = keys.first().map_or(0, |k| self.text[*k].len());
        let rows: Vec<Vec<f32>> = keys.iter().map(|k| self.text[*k].clone()).collect();
        let entries: Vec<IndexEntry> = keys
            .iter()
            .enumerate()
            .map(|(row, k)| IndexEntry::Prompt {
                row,
                class_index: k.class_index,
                variant: k.variant,
                shift: k.shift.clone(),
            })
            .collect();
        write_embedding_file(
            dir,
            CLIP_TEXT_FILE,
            &EmbeddingMatrix::from_rows(dim, &rows)?,
            &entries,
        )
    }
}
