//! Pluggable sequence encoders.
//!
//! `TinyEncoder` is a desk-scale stand-in for a large PLM: embedding
//! lookup plus positional table plus a bidirectional context-mixing LSTM
//! layer with a residual connection. `FileEncoder` replays precomputed
//! per-token embeddings from an archive, so real PLM features computed
//! offline can drive the head.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::ChaCha20Rng;

use crate::assembler::{AssembledSequence, LayoutOffsets, RealLengths};
use crate::corpus::Label;
use crate::error::{PenError, Result};
use crate::params::{Bindings, ParamStore};
use crate::tensor::lstm::{lstm_states, LstmRefs};
use crate::tensor::{Graph, Scalar, TensorRef};

/// Per-token embeddings for a batch: one row handle of shape `[d]` per
/// position, plus the layout metadata the head needs.
#[derive(Debug)]
pub struct EncodedBatch {
    /// `rows[sample][position]`, each of shape `[d]`.
    pub rows: Vec<Vec<TensorRef>>,
    pub offsets: LayoutOffsets,
    pub real_lengths: Vec<RealLengths>,
    pub labels: Vec<Option<Label>>,
    pub ids: Vec<String>,
    pub d: usize,
}

impl EncodedBatch {
    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Materialize sample `i` as one `[n, d]` tensor (tests and export).
    pub fn full_tensor<F: Scalar>(&self, g: &mut Graph<F>, i: usize) -> Result<TensorRef> {
        g.stack_rows(&self.rows[i])
    }
}

/// Views of one sample at the layout's fixed offsets.
pub struct RegionSlices<'a> {
    pub infer: &'a [TensorRef],
    pub neg: &'a [TensorRef],
    pub pos: &'a [TensorRef],
    pub infer_prompt: &'a [TensorRef],
    pub neg_prompt: &'a [TensorRef],
    pub pos_prompt: &'a [TensorRef],
    pub mask: TensorRef,
    pub neg_label: TensorRef,
    pub pos_label: TensorRef,
    pub real_lengths: RealLengths,
}

/// Slice a sample's rows into region views and special-token vectors.
/// Offsets are guaranteed by the assembler, so this cannot fail.
pub fn slice_regions(batch: &EncodedBatch, i: usize) -> RegionSlices<'_> {
    let o = &batch.offsets;
    let rows = &batch.rows[i];
    RegionSlices {
        infer: &rows[o.infer_content.clone()],
        neg: &rows[o.neg_content.clone()],
        pos: &rows[o.pos_content.clone()],
        infer_prompt: &rows[o.infer_prompt.clone()],
        neg_prompt: &rows[o.neg_prompt.clone()],
        pos_prompt: &rows[o.pos_prompt.clone()],
        mask: rows[o.mask_pos],
        neg_label: rows[o.neg_label_pos],
        pos_label: rows[o.pos_label_pos],
        real_lengths: batch.real_lengths[i],
    }
}

/// Encoder contract: batch of assembled sequences to per-token features of
/// a fixed dimension, deterministic per seed.
pub trait SequenceEncoder<F: Scalar> {
    fn dim(&self) -> usize;

    /// Register trainable parameters (if any) into the store.
    fn init_params(&self, store: &mut ParamStore<F>, rng: &mut ChaCha20Rng);

    fn encode(
        &self,
        g: &mut Graph<F>,
        bindings: &Bindings,
        batch: &[AssembledSequence],
    ) -> Result<EncodedBatch>;
}

fn batch_metadata(batch: &[AssembledSequence]) -> Result<LayoutOffsets> {
    let first = batch.first().ok_or_else(|| PenError::Invalid("empty batch".into()))?;
    for s in batch {
        if s.offsets != first.offsets {
            return Err(PenError::Invalid("batch mixes layouts".into()));
        }
    }
    Ok(first.offsets.clone())
}

// ── TinyEncoder ─────────────────────────────────────────────────────────

pub struct TinyEncoder {
    pub vocab_size: usize,
    pub d: usize,
    pub n: usize,
    pub context_mixing: bool,
}

impl TinyEncoder {
    pub fn new(vocab_size: usize, d: usize, n: usize, context_mixing: bool) -> Self {
        TinyEncoder { vocab_size, d, n, context_mixing }
    }
}

impl<F: Scalar> SequenceEncoder<F> for TinyEncoder {
    fn dim(&self) -> usize {
        self.d
    }

    fn init_params(&self, store: &mut ParamStore<F>, rng: &mut ChaCha20Rng) {
        let d = self.d;
        store.insert("enc.emb", vec![self.vocab_size, d], crate::params::uniform(rng, self.vocab_size * d, 0.1));
        store.insert("enc.pos", vec![self.n, d], crate::params::uniform(rng, self.n * d, 0.1));
        for dir in ["fwd", "bwd"] {
            store.insert(&format!("enc.{dir}.wx"), vec![d, 4 * d], crate::params::xavier(rng, d, 4 * d));
            store.insert(&format!("enc.{dir}.wh"), vec![d, 4 * d], crate::params::xavier(rng, d, 4 * d));
            store.insert(&format!("enc.{dir}.b"), vec![4 * d], vec![F::zero(); 4 * d]);
        }
    }

    fn encode(
        &self,
        g: &mut Graph<F>,
        bindings: &Bindings,
        batch: &[AssembledSequence],
    ) -> Result<EncodedBatch> {
        let offsets = batch_metadata(batch)?;
        if offsets.total_len != self.n {
            return Err(PenError::Invalid(format!(
                "layout length {} does not match encoder n {}",
                offsets.total_len, self.n
            )));
        }
        let emb = bindings.get("enc.emb");
        let pos = bindings.get("enc.pos");
        let mut rows_out = Vec::with_capacity(batch.len());
        for seq in batch {
            let indices: Vec<usize> = seq.token_ids.iter().map(|&t| t as usize).collect();
            let looked = g.lookup(emb, &indices)?;
            let mut rows: Vec<TensorRef> = Vec::with_capacity(self.n);
            for j in 0..self.n {
                let e = g.row(looked, j)?;
                let p = g.row(pos, j)?;
                rows.push(g.add(e, p)?);
            }
            if self.context_mixing {
                let fwd = LstmRefs {
                    wx: bindings.get("enc.fwd.wx"),
                    wh: bindings.get("enc.fwd.wh"),
                    b: bindings.get("enc.fwd.b"),
                    hidden: self.d,
                };
                let bwd = LstmRefs {
                    wx: bindings.get("enc.bwd.wx"),
                    wh: bindings.get("enc.bwd.wh"),
                    b: bindings.get("enc.bwd.b"),
                    hidden: self.d,
                };
                let fwd_states = lstm_states(g, &rows, &fwd, self.n)?;
                let rev: Vec<TensorRef> = rows.iter().rev().copied().collect();
                let bwd_states = lstm_states(g, &rev, &bwd, self.n)?;
                let mut mixed = Vec::with_capacity(self.n);
                for j in 0..self.n {
                    let s = g.add(fwd_states[j], bwd_states[self.n - 1 - j])?;
                    mixed.push(g.add(rows[j], s)?);
                }
                rows = mixed;
            }
            rows_out.push(rows);
        }
        Ok(EncodedBatch {
            rows: rows_out,
            offsets,
            real_lengths: batch.iter().map(|s| s.real_lengths).collect(),
            labels: batch.iter().map(|s| s.label).collect(),
            ids: batch.iter().map(|s| s.id.clone()).collect(),
            d: self.d,
        })
    }
}

// ── Embedding archive (FileEncoder backing store) ───────────────────────

pub const ARCHIVE_MAGIC: &[u8; 4] = b"PENE";
pub const ARCHIVE_VERSION: u32 = 1;

/// Write a precomputed embedding archive: header `{magic "PENE", version
/// u32, d u32, n u32, count u64}` then per record `{id length u16, id
/// bytes, f32 embeddings n x d row-major}`.
pub fn write_archive<W: Write>(
    mut w: W,
    d: usize,
    n: usize,
    records: &[(String, Vec<f32>)],
) -> Result<()> {
    let bad = |e: std::io::Error| PenError::Archive(e.to_string());
    w.write_all(ARCHIVE_MAGIC).map_err(bad)?;
    w.write_u32::<LittleEndian>(ARCHIVE_VERSION).map_err(bad)?;
    w.write_u32::<LittleEndian>(d as u32).map_err(bad)?;
    w.write_u32::<LittleEndian>(n as u32).map_err(bad)?;
    w.write_u64::<LittleEndian>(records.len() as u64).map_err(bad)?;
    for (id, data) in records {
        if data.len() != n * d {
            return Err(PenError::Archive(format!(
                "record {id}: {} values, expected {}",
                data.len(),
                n * d
            )));
        }
        let bytes = id.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(PenError::Archive(format!("id too long: {id}")));
        }
        w.write_u16::<LittleEndian>(bytes.len() as u16).map_err(bad)?;
        w.write_all(bytes).map_err(bad)?;
        for &v in data {
            w.write_f32::<LittleEndian>(v).map_err(bad)?;
        }
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<(usize, usize, Vec<(String, Vec<f32>)>)> {
    let bad = |e: std::io::Error| PenError::Archive(e.to_string());
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != ARCHIVE_MAGIC {
        return Err(PenError::Archive(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(bad)?;
    if version != ARCHIVE_VERSION {
        return Err(PenError::Archive(format!("unsupported version {version}")));
    }
    let d = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let n = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    let count = r.read_u64::<LittleEndian>().map_err(bad)?;
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let id_len = r.read_u16::<LittleEndian>().map_err(bad)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id).map_err(bad)?;
        let id = String::from_utf8(id).map_err(|e| PenError::Archive(format!("bad id: {e}")))?;
        let mut data = Vec::with_capacity(n * d);
        for _ in 0..n * d {
            data.push(r.read_f32::<LittleEndian>().map_err(bad)?);
        }
        records.push((id, data));
    }
    Ok((d, n, records))
}

/// Frozen per-record embeddings indexed by id.
pub struct FileEncoder {
    pub d: usize,
    pub n: usize,
    records: HashMap<String, Vec<f32>>,
}

impl FileEncoder {
    pub fn open(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| PenError::io(path, e))?;
        let (d, n, list) = read_archive(std::io::BufReader::new(f))?;
        Ok(FileEncoder { d, n, records: list.into_iter().collect() })
    }

    pub fn from_records(d: usize, n: usize, list: Vec<(String, Vec<f32>)>) -> Self {
        FileEncoder { d, n, records: list.into_iter().collect() }
    }
}

impl<F: Scalar> SequenceEncoder<F> for FileEncoder {
    fn dim(&self) -> usize {
        self.d
    }

    fn init_params(&self, _store: &mut ParamStore<F>, _rng: &mut ChaCha20Rng) {
        // frozen by construction
    }

    fn encode(
        &self,
        g: &mut Graph<F>,
        _bindings: &Bindings,
        batch: &[AssembledSequence],
    ) -> Result<EncodedBatch> {
        let offsets = batch_metadata(batch)?;
        if offsets.total_len != self.n {
            return Err(PenError::Archive(format!(
                "archive n {} does not match layout length {}",
                self.n, offsets.total_len
            )));
        }
        let mut rows_out = Vec::with_capacity(batch.len());
        for seq in batch {
            let data = self.records.get(&seq.id).ok_or_else(|| {
                PenError::Archive(format!("record id {:?} not in embedding archive", seq.id))
            })?;
            let values: Vec<F> = data.iter().map(|&v| F::from_f32c(v)).collect();
            let full = g.constant(&[self.n, self.d], values);
            let rows: Vec<TensorRef> = (0..self.n).map(|j| g.row(full, j)).collect::<Result<_>>()?;
            rows_out.push(rows);
        }
        Ok(EncodedBatch {
            rows: rows_out,
            offsets,
            real_lengths: batch.iter().map(|s| s.real_lengths).collect(),
            labels: batch.iter().map(|s| s.label).collect(),
            ids: batch.iter().map(|s| s.id.clone()).collect(),
            d: self.d,
        })
    }
}
