//! Feature-grid files, the deterministic pseudo-encoder, and the
//! line-delimited question and dialogue corpora.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;
use crate::vocab::tokenize;

pub const FEATURE_MAGIC: [u8; 4] = *b"FEAT";
pub const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER_LEN: usize = 16;

/// `rows` annotation vectors of dimension `cols`, one image's encoding.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("feature grid needs at least one row and column"));
        }
        if data.len() != rows * cols {
            return Err(invalid(format!(
                "feature grid {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if data.iter().any(|x| !x.is_finite()) {
            return Err(invalid("feature grid values must be finite"));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::matrix(self.rows, self.cols, self.data.iter().map(|&x| x as f64).collect())
            .expect("grid shape is valid")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FEATURE_HEADER_LEN + 4 * self.data.len());
        out.extend_from_slice(&FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.cols as u32).to_le_bytes());
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!("file too short for magic: {} bytes", bytes.len()),
            });
        }
        if bytes[..4] != FEATURE_MAGIC {
            return Err(Error::BadMagic {
                expected: FEATURE_MAGIC,
                found: bytes[..4].to_vec(),
            });
        }
        if bytes.len() < FEATURE_HEADER_LEN {
            return Err(Error::Format {
                offset: bytes.len() as u64,
                message: format!(
                    "header needs {FEATURE_HEADER_LEN} bytes, file has {}",
                    bytes.len()
                ),
            });
        }
        let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
        let version = word(4);
        if version != FEATURE_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let (rows, cols) = (word(8) as usize, word(12) as usize);
        if rows == 0 || cols == 0 {
            return Err(Error::Format {
                offset: 8,
                message: format!("empty grid {rows}x{cols}"),
            });
        }
        let expected = FEATURE_HEADER_LEN + 4 * rows * cols;
        if bytes.len() != expected {
            return Err(Error::Format {
                offset: bytes.len().min(expected) as u64,
                message: format!("expected {expected} bytes for a {rows}x{cols} grid, found {}", bytes.len()),
            });
        }
        let data = bytes[FEATURE_HEADER_LEN..]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Self::new(rows, cols, data)
    }
}

pub fn load_feature_grid(path: impl AsRef<Path>) -> Result<FeatureGrid> {
    FeatureGrid::from_bytes(&fs::read(path)?)
}

pub fn save_feature_grid(grid: &FeatureGrid, path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&grid.to_bytes())?;
    Ok(())
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

/// Deterministic stand-in for CNN features: values in `[-1, 1]` drawn from a
/// generator seeded by a hash of `image_id`.
pub fn pseudo_encoder(image_id: &str, rows: usize, cols: usize) -> Result<FeatureGrid> {
    if rows == 0 || cols == 0 {
        return Err(invalid("pseudo_encoder needs rows, cols >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(fnv1a(image_id.as_bytes()));
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.0f32..=1.0)).collect();
    FeatureGrid::new(rows, cols, data)
}

/// One image with its reference questions.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuestionRecord {
    pub image_id: String,
    /// Relative to the dataset file's directory.
    pub features: String,
    pub questions: Vec<String>,
}

impl QuestionRecord {
    pub fn features_path(&self, dataset_dir: &Path) -> PathBuf {
        dataset_dir.join(&self.features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialoguePair {
    pub context: String,
    pub reply: String,
}

fn load_lines<T: serde::de::DeserializeOwned>(
    path: &Path,
    validate: impl Fn(&T) -> std::result::Result<(), String>,
) -> Result<Vec<T>> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record_err = |message: String| Error::Record {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let rec: T = serde_json::from_str(line).map_err(|e| record_err(e.to_string()))?;
        validate(&rec).map_err(record_err)?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_question_dataset(path: impl AsRef<Path>) -> Result<Vec<QuestionRecord>> {
    load_lines(path.as_ref(), |r: &QuestionRecord| {
        if r.questions.is_empty() {
            Err("record has no questions".into())
        } else {
            Ok(())
        }
    })
}

/// Loads a question dataset together with every record's feature grid.
pub fn load_question_dataset_with_grids(path: impl AsRef<Path>) -> Result<Vec<(QuestionRecord, FeatureGrid)>> {
    let path = path.as_ref();
    let dir = path.parent().unwrap_or(Path::new("."));
    load_question_dataset(path)?
        .into_iter()
        .map(|r| {
            let grid = load_feature_grid(r.features_path(dir))?;
            Ok((r, grid))
        })
        .collect()
}

pub fn load_dialogue_pairs(path: impl AsRef<Path>) -> Result<Vec<DialoguePair>> {
    load_lines(path.as_ref(), |p: &DialoguePair| {
        if tokenize(&p.context).is_empty() || tokenize(&p.reply).is_empty() {
            Err("context and reply must both contain tokens".into())
        } else {
            Ok(())
        }
    })
}

/// Writes records one JSON document per line.
pub fn write_records<T: Serialize>(records: &[T], path: impl AsRef<Path>) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}
