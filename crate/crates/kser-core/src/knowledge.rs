//! The external knowledge repository: a portable on-disk pack of per-entity
//! encoded LLM responses, per-sample assembly into the knowledge matrix, and
//! the chunk partition used by the selection gate.
//!
//! Pack layout (bit-exact round trip):
//! - `manifest.json` — field names, dims, join keys, counts, plus fixed
//!   `dtype`/`byte_order`/`layout` markers;
//! - `<name>.keys` — newline-delimited UTF-8 join tokens in row order;
//! - `<name>.f32` — raw row-major little-endian float32 matrix, count x dim.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{KserError, Result};
use crate::schema::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KeyedBy {
    UserId,
    ItemId,
    SampleId,
}

/// How assembly treats samples whose join key is absent from a field.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MissingKey {
    /// Substitute a zero vector and flag the sample.
    #[default]
    ZeroFill,
    /// Fail with an error naming the field and key.
    Strict,
}

#[derive(Serialize, Deserialize)]
struct PackManifest {
    fields: Vec<PackFieldMeta>,
    dtype: String,
    byte_order: String,
    layout: String,
}

#[derive(Serialize, Deserialize)]
struct PackFieldMeta {
    name: String,
    dim: usize,
    keyed_by: KeyedBy,
    count: usize,
}

/// One knowledge field: a keyed map of equal-width float32 vectors.
#[derive(Clone, Debug)]
pub struct KnowledgeField {
    pub name: String,
    pub dim: usize,
    pub keyed_by: KeyedBy,
    keys: Vec<String>,
    index: HashMap<String, usize>,
    /// Row-major `count x dim` values.
    data: Vec<f32>,
}

impl KnowledgeField {
    pub fn new(
        name: impl Into<String>,
        dim: usize,
        keyed_by: KeyedBy,
        keys: Vec<String>,
        data: Vec<f32>,
    ) -> Result<Self> {
        let name = name.into();
        if keys.is_empty() {
            return Err(KserError::Pack {
                field: name,
                msg: "key set is empty".into(),
            });
        }
        if data.len() != keys.len() * dim {
            return Err(KserError::Pack {
                field: name,
                msg: format!(
                    "expected {} values for {} keys of width {}, got {}",
                    keys.len() * dim,
                    keys.len(),
                    dim,
                    data.len()
                ),
            });
        }
        let mut index = HashMap::with_capacity(keys.len());
        for (row, k) in keys.iter().enumerate() {
            if index.insert(k.clone(), row).is_some() {
                return Err(KserError::Pack {
                    field: name,
                    msg: format!("duplicate key '{k}' at row {row}"),
                });
            }
        }
        for (i, v) in data.iter().enumerate() {
            if !v.is_finite() {
                return Err(KserError::Pack {
                    field: name,
                    msg: format!("non-finite value at row {} column {}", i / dim, i % dim),
                });
            }
        }
        Ok(Self {
            name,
            dim,
            keyed_by,
            keys,
            index,
            data,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn keys(&self) -> &[String] {
        &self.keys
    }

    pub fn get(&self, key: &str) -> Option<&[f32]> {
        self.index
            .get(key)
            .map(|&row| &self.data[row * self.dim..(row + 1) * self.dim])
    }
}

/// The knowledge repository: an ordered list of fields sharing one vector
/// width. Immutable after construction.
#[derive(Clone, Debug)]
pub struct KnowledgePack {
    fields: Vec<KnowledgeField>,
}

impl KnowledgePack {
    pub fn new(fields: Vec<KnowledgeField>) -> Result<Self> {
        let Some(first) = fields.first() else {
            return Err(KserError::Pack {
                field: "<pack>".into(),
                msg: "a pack needs at least one field".into(),
            });
        };
        let dim = first.dim;
        let mut names = std::collections::HashSet::new();
        for f in &fields {
            if f.dim != dim {
                return Err(KserError::Pack {
                    field: f.name.clone(),
                    msg: format!(
                        "all fields must share one width: '{}' has {}, expected {}",
                        f.name, f.dim, dim
                    ),
                });
            }
            if !names.insert(f.name.clone()) {
                return Err(KserError::Pack {
                    field: f.name.clone(),
                    msg: "duplicate field name".into(),
                });
            }
        }
        Ok(Self { fields })
    }

    /// Shared vector width `d_k`.
    pub fn dim(&self) -> usize {
        self.fields[0].dim
    }

    /// Number of knowledge fields `L`.
    pub fn field_count(&self) -> usize {
        self.fields.len()
    }

    pub fn fields(&self) -> &[KnowledgeField] {
        &self.fields
    }

    pub fn field(&self, name: &str) -> Option<&KnowledgeField> {
        self.fields.iter().find(|f| f.name == name)
    }
}

/// Per-sample knowledge matrix of shape `d_k x L`, one column per field in
/// pack manifest order.
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeMatrix {
    values: Array2<f32>,
}

impl KnowledgeMatrix {
    pub fn new(values: Array2<f32>) -> Result<Self> {
        if values.ncols() == 0 || values.nrows() == 0 {
            return Err(KserError::ShapeMismatch(
                "knowledge matrix needs at least one row and one column".into(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(KserError::RejectedInput(
                "knowledge matrix contains non-finite values".into(),
            ));
        }
        Ok(Self { values })
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn field_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f32> {
        &self.values
    }

    pub fn column(&self, j: usize) -> Vec<f32> {
        self.values.column(j).to_vec()
    }

    /// Field-major rows as f64: row `j` is column `j` of the matrix. This is
    /// the layout the batched model forward uses.
    pub fn to_field_rows_f64(&self) -> Array2<f64> {
        let (dk, l) = self.values.dim();
        Array2::from_shape_fn((l, dk), |(j, r)| self.values[[r, j]] as f64)
    }
}

/// The chunk partition of a knowledge matrix: a `C x L` grid of contiguous
/// length-`s` slices, `s = d_k / C`.
#[derive(Clone, Debug, PartialEq)]
pub struct ChunkedKnowledge {
    chunks: Vec<Vec<Vec<f32>>>, // [c][j] -> slice of length s
    chunk_len: usize,
}

impl ChunkedKnowledge {
    pub fn chunk_count(&self) -> usize {
        self.chunks.len()
    }

    pub fn field_count(&self) -> usize {
        self.chunks[0].len()
    }

    pub fn chunk_len(&self) -> usize {
        self.chunk_len
    }

    pub fn chunk(&self, c: usize, j: usize) -> &[f32] {
        &self.chunks[c][j]
    }

    /// Reassembles the source matrix by concatenating chunks down each column.
    pub fn unchunk(&self) -> KnowledgeMatrix {
        let c = self.chunk_count();
        let l = self.field_count();
        let dk = c * self.chunk_len;
        let mut values = Array2::<f32>::zeros((dk, l));
        for j in 0..l {
            for ci in 0..c {
                for t in 0..self.chunk_len {
                    values[[ci * self.chunk_len + t, j]] = self.chunks[ci][j][t];
                }
            }
        }
        KnowledgeMatrix { values }
    }
}

/// Partitions each column of the knowledge matrix into `c` contiguous chunks.
pub fn chunk(k: &KnowledgeMatrix, c: usize) -> Result<ChunkedKnowledge> {
    if c == 0 {
        return Err(KserError::RejectedInput("chunk count must be positive".into()));
    }
    let dk = k.dim();
    if dk % c != 0 {
        return Err(KserError::RejectedInput(format!(
            "the knowledge representation dimension d_k = {dk} must be divisible by the number of chunks C = {c}"
        )));
    }
    let s = dk / c;
    let l = k.field_count();
    let mut chunks = vec![vec![Vec::with_capacity(s); l]; c];
    for (ci, row_chunk) in chunks.iter_mut().enumerate() {
        for (j, slot) in row_chunk.iter_mut().enumerate() {
            for t in 0..s {
                slot.push(k.values()[[ci * s + t, j]]);
            }
        }
    }
    Ok(ChunkedKnowledge {
        chunks,
        chunk_len: s,
    })
}

fn join_key<'a>(sample: &'a Sample, keyed_by: KeyedBy) -> &'a str {
    match keyed_by {
        KeyedBy::UserId => &sample.user_id,
        KeyedBy::ItemId => &sample.item_id,
        KeyedBy::SampleId => &sample.id,
    }
}

/// Joins each pack field's vector for the sample into one `d_k x L` matrix.
/// Returns per-field flags marking zero-filled (missing-key) columns.
pub fn assemble_knowledge(
    sample: &Sample,
    pack: &KnowledgePack,
    mode: MissingKey,
) -> Result<(KnowledgeMatrix, Vec<bool>)> {
    let dk = pack.dim();
    let l = pack.field_count();
    let mut values = Array2::<f32>::zeros((dk, l));
    let mut missing = vec![false; l];
    for (j, field) in pack.fields().iter().enumerate() {
        let key = join_key(sample, field.keyed_by);
        match field.get(key) {
            Some(vec) => {
                for (r, v) in vec.iter().enumerate() {
                    values[[r, j]] = *v;
                }
            }
            None => match mode {
                MissingKey::ZeroFill => missing[j] = true,
                MissingKey::Strict => {
                    return Err(KserError::MissingKey {
                        field: field.name.clone(),
                        key: key.to_string(),
                    })
                }
            },
        }
    }
    Ok((KnowledgeMatrix { values }, missing))
}

/// Loads and validates a knowledge pack directory.
pub fn load_pack(dir: impl AsRef<Path>) -> Result<KnowledgePack> {
    let dir = dir.as_ref();
    let manifest_path = dir.join("manifest.json");
    let manifest_raw =
        std::fs::read_to_string(&manifest_path).map_err(|e| KserError::io(&manifest_path, e))?;
    let manifest: PackManifest =
        serde_json::from_str(&manifest_raw).map_err(|e| KserError::json(&manifest_path, e))?;
    if manifest.dtype != "f32" || manifest.byte_order != "little-endian" || manifest.layout != "row-major"
    {
        return Err(KserError::DataFormat {
            path: manifest_path,
            msg: format!(
                "unsupported pack encoding ({}/{}/{})",
                manifest.dtype, manifest.byte_order, manifest.layout
            ),
        });
    }

    let mut fields = Vec::new();
    for meta in &manifest.fields {
        let keys_path = dir.join(format!("{}.keys", meta.name));
        let keys_raw =
            std::fs::read_to_string(&keys_path).map_err(|e| KserError::io(&keys_path, e))?;
        let keys: Vec<String> = keys_raw.lines().map(|l| l.to_string()).collect();
        if keys.len() != meta.count {
            return Err(KserError::Pack {
                field: meta.name.clone(),
                msg: format!("manifest count {} but {} keys on disk", meta.count, keys.len()),
            });
        }

        let mat_path = dir.join(format!("{}.f32", meta.name));
        let mut file = std::fs::File::open(&mat_path).map_err(|e| KserError::io(&mat_path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| KserError::io(&mat_path, e))?;
        let expected = meta.count * meta.dim * 4;
        if bytes.len() != expected {
            return Err(KserError::Pack {
                field: meta.name.clone(),
                msg: format!(
                    "byte-length mismatch: expected {expected} bytes ({} x {} f32), found {}",
                    meta.count,
                    meta.dim,
                    bytes.len()
                ),
            });
        }
        let data: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        fields.push(KnowledgeField::new(
            meta.name.clone(),
            meta.dim,
            meta.keyed_by,
            keys,
            data,
        )?);
    }
    KnowledgePack::new(fields)
}

/// Writes a pack directory; round trip through [`load_pack`] is byte-exact.
pub fn write_pack(pack: &KnowledgePack, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| KserError::io(dir, e))?;
    let manifest = PackManifest {
        fields: pack
            .fields()
            .iter()
            .map(|f| PackFieldMeta {
                name: f.name.clone(),
                dim: f.dim,
                keyed_by: f.keyed_by,
                count: f.len(),
            })
            .collect(),
        dtype: "f32".into(),
        byte_order: "little-endian".into(),
        layout: "row-major".into(),
    };
    let manifest_path = dir.join("manifest.json");
    let manifest_json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| KserError::json(&manifest_path, e))?;
    std::fs::write(&manifest_path, manifest_json.as_bytes())
        .map_err(|e| KserError::io(&manifest_path, e))?;

    for f in pack.fields() {
        let keys_path = dir.join(format!("{}.keys", f.name));
        let mut keys_out = String::with_capacity(f.len() * 8);
        for k in f.keys() {
            keys_out.push_str(k);
            keys_out.push('\n');
        }
        std::fs::write(&keys_path, keys_out.as_bytes()).map_err(|e| KserError::io(&keys_path, e))?;

        let mat_path = dir.join(format!("{}.f32", f.name));
        let mut file = std::fs::File::create(&mat_path).map_err(|e| KserError::io(&mat_path, e))?;
        let mut bytes = Vec::with_capacity(f.len() * f.dim * 4);
        for key in f.keys() {
            for v in f.get(key).unwrap() {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        file.write_all(&bytes).map_err(|e| KserError::io(&mat_path, e))?;
    }
    Ok(())
}
