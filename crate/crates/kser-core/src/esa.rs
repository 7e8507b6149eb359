//! Embedding-space alignment: each filtered knowledge field is refined by a
//! small dense-rectifier-dense map, chunked and stacked next to a chunked
//! feature-derived query, cross-attended (queries from features, keys and
//! values from knowledge), and the per-field outputs are fused by one
//! self-attention block over their rows before a final affine projection.
//!
//! Attention here is the plain `softmax(Q K^T) V` form without the usual
//! `1/sqrt(n)` temperature; a `scaled_attention` flag turns scaling on for
//! stability experiments.

use ndarray::{s, Array1, Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{KserError, Result};
use crate::esfnet::FilteredKnowledge;
use crate::tensor::{init_affine, Graph, ParamId, ParamSet, Var};

/// Where the cross-attention query comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuerySource {
    /// Masked mean of the history embeddings concatenated with the target
    /// item embedding.
    #[default]
    HistoryItem,
    /// The full feature embedding verbatim.
    FullFeature,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EsaConfig {
    pub query: QuerySource,
    /// Feature-side chunk count `C_x`.
    pub cx: usize,
    /// Knowledge-side chunk count `C_k`.
    pub ck: usize,
    /// Query/key projection width `n`.
    pub n: usize,
    /// Value projection width `m`.
    pub m: usize,
    /// Self-attention head count; `m` must be divisible by it.
    pub heads: usize,
    /// Refinement hidden width; `None` uses `d_k`.
    pub refine_hidden: Option<usize>,
    /// Refinement output width; `None` uses `d_k`. Must be divisible by `ck`.
    pub refine_out: Option<usize>,
    /// Final projection width; `None` uses `d_e / 2`.
    pub output_width: Option<usize>,
    /// Enable `1/sqrt(width)` attention temperature (off by default).
    pub scaled_attention: bool,
}

impl Default for EsaConfig {
    fn default() -> Self {
        Self {
            query: QuerySource::HistoryItem,
            cx: 4,
            ck: 4,
            n: 16,
            m: 16,
            heads: 2,
            refine_hidden: None,
            refine_out: None,
            output_width: None,
            scaled_attention: false,
        }
    }
}

/// Concrete widths resolved from a config plus the data at hand.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct EsaDims {
    pub knowledge_dim: usize,
    pub fields: usize,
    pub query_width: usize,
    pub cx: usize,
    pub ck: usize,
    pub query_chunk: usize,
    pub refine_hidden: usize,
    pub refine_out: usize,
    pub knowledge_chunk: usize,
    pub n: usize,
    pub m: usize,
    pub heads: usize,
    pub out_width: usize,
}

impl EsaConfig {
    pub fn resolve(
        &self,
        knowledge_dim: usize,
        fields: usize,
        query_width: usize,
        feat_width: usize,
    ) -> Result<EsaDims> {
        if self.cx == 0 || self.ck == 0 || self.n == 0 || self.m == 0 || self.heads == 0 {
            return Err(KserError::Config(
                "esa dims (cx, ck, n, m, heads) must be positive".into(),
            ));
        }
        if self.m % self.heads != 0 {
            return Err(KserError::Config(format!(
                "esa.m = {} must be divisible by esa.heads = {}",
                self.m, self.heads
            )));
        }
        let refine_hidden = self.refine_hidden.unwrap_or(knowledge_dim);
        let refine_out = self.refine_out.unwrap_or(knowledge_dim);
        if refine_out % self.ck != 0 {
            return Err(KserError::Config(format!(
                "refined knowledge width {refine_out} must be divisible by ck = {}",
                self.ck
            )));
        }
        if query_width % self.cx != 0 {
            return Err(KserError::Config(format!(
                "query width {query_width} must be divisible by cx = {}",
                self.cx
            )));
        }
        let out_width = self.output_width.unwrap_or((feat_width / 2).max(1));
        if out_width == 0 {
            return Err(KserError::Config("esa output width must be positive".into()));
        }
        Ok(EsaDims {
            knowledge_dim,
            fields,
            query_width,
            cx: self.cx,
            ck: self.ck,
            query_chunk: query_width / self.cx,
            refine_hidden,
            refine_out,
            knowledge_chunk: refine_out / self.ck,
            n: self.n,
            m: self.m,
            heads: self.heads,
            out_width,
        })
    }
}

/// Dense-rectifier-dense refinement applied to one knowledge field.
#[derive(Clone, Debug)]
pub struct RefineParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
}

/// Per-field cross-attention projections.
#[derive(Clone, Debug)]
pub struct CrossAttnParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
}

/// One knowledge field's alignment parameters.
#[derive(Clone, Debug)]
pub struct EsaFieldParams {
    pub refine: RefineParams,
    pub attn: CrossAttnParams,
}

/// Self-attention fusion block (shared projections, heads as column slices).
#[derive(Clone, Debug)]
pub struct FusionParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub heads: usize,
}

/// Full plain-array parameter bundle for the pure single-sample forward.
#[derive(Clone, Debug)]
pub struct EsaParams {
    pub fields: Vec<EsaFieldParams>,
    pub fusion: FusionParams,
    pub output_proj: Option<(Array2<f64>, Array1<f64>)>,
    pub cx: usize,
    pub ck: usize,
    pub scaled: bool,
}

/// Per-field cross-attention outputs, the fused grid, and its flattenings.
#[derive(Clone, Debug)]
pub struct AlignedKnowledge {
    /// `L` matrices of shape `C_x x m`.
    pub per_field: Vec<Array2<f64>>,
    /// Cross-attention score matrices (`C_x x C_k`), one per field.
    pub scores: Vec<Array2<f64>>,
    /// Fused grid after self-attention: `(L * C_x) x m`.
    pub fused: Array2<f64>,
    /// Row-major flattening of `fused` (width `L * C_x * m`).
    pub flat: Vec<f64>,
    /// Post-projection output (equals `flat` when no projection is set).
    pub output: Vec<f64>,
}

fn row_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            denom += *v;
        }
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    out
}

/// Dense-ReLU-Dense refinement of one filtered knowledge column.
pub fn refine_field(kbar_j: &[f64], p: &RefineParams) -> Result<Vec<f64>> {
    if kbar_j.len() != p.w1.nrows() {
        return Err(KserError::ShapeMismatch(format!(
            "refine input width {} but params expect {}",
            kbar_j.len(),
            p.w1.nrows()
        )));
    }
    let x = ndarray::ArrayView1::from(kbar_j);
    let h = (x.dot(&p.w1) + &p.b1).mapv(|v| v.max(0.0));
    let out = h.dot(&p.w2) + &p.b2;
    Ok(out.to_vec())
}

/// Partitions a vector into `chunks` contiguous rows; flattening the result
/// row-major is the identity.
pub fn stack_chunks(v: &[f64], chunks: usize) -> Result<Array2<f64>> {
    if chunks == 0 || v.len() % chunks != 0 {
        return Err(KserError::ShapeMismatch(format!(
            "cannot stack width {} into {} chunks",
            v.len(),
            chunks
        )));
    }
    let w = v.len() / chunks;
    Ok(Array2::from_shape_vec((chunks, w), v.to_vec()).unwrap())
}

/// Inputs available to [`build_query`].
pub struct QueryInputs<'a> {
    /// History item embeddings, one row per position.
    pub history: ArrayView2<'a, f64>,
    /// True at non-pad positions.
    pub mask: &'a [bool],
    /// Target item embedding.
    pub item: &'a [f64],
    /// Full feature embedding `E(x)`.
    pub full_feature: &'a [f64],
}

/// Builds the cross-attention query: masked mean of history embeddings
/// concatenated with the target item embedding (default), or the full
/// feature embedding verbatim. An all-pad history contributes a zero mean.
pub fn build_query(inputs: &QueryInputs, strategy: QuerySource) -> Vec<f64> {
    match strategy {
        QuerySource::FullFeature => inputs.full_feature.to_vec(),
        QuerySource::HistoryItem => {
            let w = inputs.history.ncols();
            let mut mean = vec![0.0; w];
            let count = inputs.mask.iter().filter(|m| **m).count();
            if count > 0 {
                for (t, &keep) in inputs.mask.iter().enumerate() {
                    if keep {
                        for c in 0..w {
                            mean[c] += inputs.history[[t, c]] / count as f64;
                        }
                    }
                }
            }
            mean.extend_from_slice(inputs.item);
            mean
        }
    }
}

/// Cross attention for one knowledge field: queries from the stacked feature
/// chunks, keys and values from the stacked refined knowledge chunks.
/// Returns the output `C_x x m` and the score matrix `C_x x C_k`.
pub fn cross_attend(
    x_stacked: &Array2<f64>,
    k_stacked: &Array2<f64>,
    p: &CrossAttnParams,
    scaled: bool,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if x_stacked.ncols() != p.wq.nrows() {
        return Err(KserError::ShapeMismatch(format!(
            "query chunk width {} but W_Q expects {}",
            x_stacked.ncols(),
            p.wq.nrows()
        )));
    }
    if k_stacked.ncols() != p.wk.nrows() || k_stacked.ncols() != p.wv.nrows() {
        return Err(KserError::ShapeMismatch(format!(
            "knowledge chunk width {} but W_K/W_V expect {}/{}",
            k_stacked.ncols(),
            p.wk.nrows(),
            p.wv.nrows()
        )));
    }
    if p.wq.ncols() != p.wk.ncols() {
        return Err(KserError::ShapeMismatch(
            "W_Q and W_K must share their output width".into(),
        ));
    }
    let q = x_stacked.dot(&p.wq);
    let k = k_stacked.dot(&p.wk);
    let v = k_stacked.dot(&p.wv);
    let mut scores = q.dot(&k.t());
    if scaled {
        scores /= (p.wq.ncols() as f64).sqrt();
    }
    let probs = row_softmax(&scores);
    Ok((probs.dot(&v), probs))
}

/// Self-attention over the rows of `x` with heads as column slices. Returns
/// the output (same shape) and per-head score matrices.
pub fn self_attend(
    x: &Array2<f64>,
    p: &FusionParams,
    scaled: bool,
) -> Result<(Array2<f64>, Vec<Array2<f64>>)> {
    let (rows, m) = x.dim();
    if p.wq.nrows() != m || p.wk.nrows() != m || p.wv.nrows() != m {
        return Err(KserError::ShapeMismatch(
            "fusion projections must match the row width".into(),
        ));
    }
    if m % p.heads != 0 {
        return Err(KserError::ShapeMismatch(format!(
            "row width {m} not divisible by {} heads",
            p.heads
        )));
    }
    let hd = m / p.heads;
    let q = x.dot(&p.wq);
    let k = x.dot(&p.wk);
    let v = x.dot(&p.wv);
    let mut out = Array2::<f64>::zeros((rows, m));
    let mut head_scores = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let cols = h * hd..(h + 1) * hd;
        let qh = q.slice(s![.., cols.clone()]);
        let kh = k.slice(s![.., cols.clone()]);
        let vh = v.slice(s![.., cols.clone()]);
        let mut scores = qh.dot(&kh.t());
        if scaled {
            scores /= (hd as f64).sqrt();
        }
        let probs = row_softmax(&scores);
        out.slice_mut(s![.., cols]).assign(&probs.dot(&vh));
        head_scores.push(probs);
    }
    Ok((out, head_scores))
}

/// Fuses per-field cross-attention outputs: concatenate along the row axis,
/// one self-attention block, row-major flatten, optional affine projection.
pub fn fuse_fields(
    per_field: &[Array2<f64>],
    fusion: &FusionParams,
    output_proj: Option<&(Array2<f64>, Array1<f64>)>,
    scaled: bool,
) -> Result<(Array2<f64>, Vec<f64>, Vec<f64>)> {
    let Some(first) = per_field.first() else {
        return Err(KserError::ShapeMismatch("fusion needs at least one field".into()));
    };
    let shape = first.dim();
    if per_field.iter().any(|m| m.dim() != shape) {
        return Err(KserError::ShapeMismatch(
            "per-field outputs must share one shape".into(),
        ));
    }
    let views: Vec<_> = per_field.iter().map(|m| m.view()).collect();
    let combined = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
    let (fused, _) = self_attend(&combined, fusion, scaled)?;
    let flat: Vec<f64> = fused.iter().cloned().collect();
    let output = match output_proj {
        Some((w, b)) => {
            if w.nrows() != flat.len() {
                return Err(KserError::ShapeMismatch(format!(
                    "projection expects width {}, flat is {}",
                    w.nrows(),
                    flat.len()
                )));
            }
            (ndarray::ArrayView1::from(flat.as_slice()).dot(w) + b).to_vec()
        }
        None => flat.clone(),
    };
    Ok((fused, flat, output))
}

/// Full pure alignment pass for one sample.
pub fn esa_forward(
    kbar: &FilteredKnowledge,
    query: &[f64],
    p: &EsaParams,
) -> Result<AlignedKnowledge> {
    if kbar.field_count() != p.fields.len() {
        return Err(KserError::ShapeMismatch(format!(
            "{} knowledge fields but {} field parameter sets",
            kbar.field_count(),
            p.fields.len()
        )));
    }
    let x_stacked = stack_chunks(query, p.cx)?;
    let mut per_field = Vec::with_capacity(p.fields.len());
    let mut scores = Vec::with_capacity(p.fields.len());
    for (j, fp) in p.fields.iter().enumerate() {
        let refined = refine_field(&kbar.column(j), &fp.refine)?;
        let k_stacked = stack_chunks(&refined, p.ck)?;
        let (o_j, s_j) = cross_attend(&x_stacked, &k_stacked, &fp.attn, p.scaled)?;
        per_field.push(o_j);
        scores.push(s_j);
    }
    let (fused, flat, output) =
        fuse_fields(&per_field, &p.fusion, p.output_proj.as_ref(), p.scaled)?;
    Ok(AlignedKnowledge {
        per_field,
        scores,
        fused,
        flat,
        output,
    })
}

/// Graph-backed alignment module for batched training.
#[derive(Clone, Debug)]
pub struct EsaModule {
    field_ids: Vec<FieldIds>,
    fusion_q: ParamId,
    fusion_k: ParamId,
    fusion_v: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    pub dims: EsaDims,
    pub scaled: bool,
}

#[derive(Clone, Debug)]
struct FieldIds {
    refine_w1: ParamId,
    refine_b1: ParamId,
    refine_w2: ParamId,
    refine_b2: ParamId,
    wq: ParamId,
    wk: ParamId,
    wv: ParamId,
}

/// Batched alignment outputs.
pub struct EsaForward {
    /// `[B, out_width]` post-projection output fed to the backbone.
    pub output: Var,
    /// `[B, L * C_x * m]` pre-projection flatten.
    pub flat: Var,
    /// Per-field cross-attention scores `[B, C_x, C_k]`.
    pub scores: Vec<Var>,
}

impl EsaModule {
    pub fn new(
        pset: &mut ParamSet,
        prefix: &str,
        dims: EsaDims,
        scaled: bool,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let mut field_ids = Vec::with_capacity(dims.fields);
        for j in 0..dims.fields {
            let (rw1, rb1) = init_affine(rng, dims.knowledge_dim, dims.refine_hidden);
            let (rw2, rb2) = init_affine(rng, dims.refine_hidden, dims.refine_out);
            let (wq, _) = init_affine(rng, dims.query_chunk, dims.n);
            let (wk, _) = init_affine(rng, dims.knowledge_chunk, dims.n);
            let (wv, _) = init_affine(rng, dims.knowledge_chunk, dims.m);
            field_ids.push(FieldIds {
                refine_w1: pset.add(format!("{prefix}.f{j}.refine_w1"), rw1.into_dyn(), true),
                refine_b1: pset.add(format!("{prefix}.f{j}.refine_b1"), rb1.into_dyn(), true),
                refine_w2: pset.add(format!("{prefix}.f{j}.refine_w2"), rw2.into_dyn(), true),
                refine_b2: pset.add(format!("{prefix}.f{j}.refine_b2"), rb2.into_dyn(), true),
                wq: pset.add(format!("{prefix}.f{j}.wq"), wq.into_dyn(), true),
                wk: pset.add(format!("{prefix}.f{j}.wk"), wk.into_dyn(), true),
                wv: pset.add(format!("{prefix}.f{j}.wv"), wv.into_dyn(), true),
            });
        }
        let (fq, _) = init_affine(rng, dims.m, dims.m);
        let (fk, _) = init_affine(rng, dims.m, dims.m);
        let (fv, _) = init_affine(rng, dims.m, dims.m);
        let flat_width = dims.fields * dims.cx * dims.m;
        let (pw, pb) = init_affine(rng, flat_width, dims.out_width);
        Self {
            fusion_q: pset.add(format!("{prefix}.fusion_wq"), fq.into_dyn(), true),
            fusion_k: pset.add(format!("{prefix}.fusion_wk"), fk.into_dyn(), true),
            fusion_v: pset.add(format!("{prefix}.fusion_wv"), fv.into_dyn(), true),
            proj_w: pset.add(format!("{prefix}.proj_w"), pw.into_dyn(), true),
            proj_b: pset.add(format!("{prefix}.proj_b"), pb.into_dyn(), true),
            field_ids,
            dims,
            scaled,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for f in &self.field_ids {
            ids.extend([f.refine_w1, f.refine_b1, f.refine_w2, f.refine_b2, f.wq, f.wk, f.wv]);
        }
        ids.extend([self.fusion_q, self.fusion_k, self.fusion_v, self.proj_w, self.proj_b]);
        ids
    }

    /// `kbar` is `[B, L, d_k]` filtered knowledge, `query` is
    /// `[B, query_width]`.
    pub fn forward(&self, g: &mut Graph, pset: &ParamSet, kbar: Var, query: Var) -> EsaForward {
        let d = &self.dims;
        let bs = g.value(kbar).shape()[0];
        let x_stacked = g.reshape(query, &[bs, d.cx, d.query_chunk]);

        let mut per_field = Vec::with_capacity(d.fields);
        let mut all_scores = Vec::with_capacity(d.fields);
        for (j, ids) in self.field_ids.iter().enumerate() {
            let col = g.index_axis1(kbar, j); // [B, d_k]
            let rw1 = g.param(pset, ids.refine_w1);
            let rb1 = g.param(pset, ids.refine_b1);
            let rw2 = g.param(pset, ids.refine_w2);
            let rb2 = g.param(pset, ids.refine_b2);
            let h = g.matmul_last(col, rw1);
            let h = g.add_bias(h, rb1);
            let h = g.relu(h);
            let refined = g.matmul_last(h, rw2);
            let refined = g.add_bias(refined, rb2);
            let k_stacked = g.reshape(refined, &[bs, d.ck, d.knowledge_chunk]);

            let wq = g.param(pset, ids.wq);
            let wk = g.param(pset, ids.wk);
            let wv = g.param(pset, ids.wv);
            let q = g.matmul_last(x_stacked, wq); // [B, cx, n]
            let k = g.matmul_last(k_stacked, wk); // [B, ck, n]
            let v = g.matmul_last(k_stacked, wv); // [B, ck, m]
            let mut scores = g.bmm_nt(q, k); // [B, cx, ck]
            if self.scaled {
                scores = g.scale(scores, 1.0 / (d.n as f64).sqrt());
            }
            let probs = g.softmax_last(scores);
            let o_j = g.bmm(probs, v); // [B, cx, m]
            per_field.push(o_j);
            all_scores.push(probs);
        }

        let combined = g.concat_axis(&per_field, 1); // [B, L*cx, m]
        let fused = self.self_attention(g, pset, combined, bs);
        let flat_width = d.fields * d.cx * d.m;
        let flat = g.reshape(fused, &[bs, flat_width]);
        let pw = g.param(pset, self.proj_w);
        let pb = g.param(pset, self.proj_b);
        let output = g.matmul_last(flat, pw);
        let output = g.add_bias(output, pb);
        EsaForward {
            output,
            flat,
            scores: all_scores,
        }
    }

    fn self_attention(&self, g: &mut Graph, pset: &ParamSet, x: Var, bs: usize) -> Var {
        let d = &self.dims;
        let rows = d.fields * d.cx;
        let hd = d.m / d.heads;
        let wq = g.param(pset, self.fusion_q);
        let wk = g.param(pset, self.fusion_k);
        let wv = g.param(pset, self.fusion_v);
        let q = g.matmul_last(x, wq);
        let k = g.matmul_last(x, wk);
        let v = g.matmul_last(x, wv);
        let split = |g: &mut Graph, t: Var| {
            let t = g.reshape(t, &[bs, rows, d.heads, hd]);
            let t = g.swap_axes(t, 1, 2);
            g.reshape(t, &[bs * d.heads, rows, hd])
        };
        let qh = split(g, q);
        let kh = split(g, k);
        let vh = split(g, v);
        let mut scores = g.bmm_nt(qh, kh); // [B*heads, rows, rows]
        if self.scaled {
            scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        }
        let probs = g.softmax_last(scores);
        let o = g.bmm(probs, vh);
        let o = g.reshape(o, &[bs, d.heads, rows, hd]);
        let o = g.swap_axes(o, 1, 2);
        g.reshape(o, &[bs, rows, d.m])
    }

    /// Copies current values out as plain-array [`EsaParams`].
    pub fn snapshot(&self, pset: &ParamSet) -> EsaParams {
        let to2 = |id: ParamId| -> Array2<f64> {
            pset.value(id).clone().into_dimensionality().expect("rank 2")
        };
        let to1 = |id: ParamId| -> Array1<f64> {
            pset.value(id).clone().into_dimensionality().expect("rank 1")
        };
        EsaParams {
            fields: self
                .field_ids
                .iter()
                .map(|f| EsaFieldParams {
                    refine: RefineParams {
                        w1: to2(f.refine_w1),
                        b1: to1(f.refine_b1),
                        w2: to2(f.refine_w2),
                        b2: to1(f.refine_b2),
                    },
                    attn: CrossAttnParams {
                        wq: to2(f.wq),
                        wk: to2(f.wk),
                        wv: to2(f.wv),
                    },
                })
                .collect(),
            fusion: FusionParams {
                wq: to2(self.fusion_q),
                wk: to2(self.fusion_k),
                wv: to2(self.fusion_v),
                heads: self.dims.heads,
            },
            output_proj: Some((to2(self.proj_w), to1(self.proj_b))),
            cx: self.dims.cx,
            ck: self.dims.ck,
            scaled: self.scaled,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand2(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn refine_identity_passes_nonnegative_input() {
        let p = RefineParams {
            w1: Array2::eye(3),
            b1: Array1::zeros(3),
            w2: Array2::eye(3),
            b2: Array1::zeros(3),
        };
        let out = refine_field(&[0.5, 0.0, 2.0], &p).unwrap();
        assert_eq!(out, vec![0.5, 0.0, 2.0]);
    }

    #[test]
    fn refine_zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = RefineParams {
            w1: rand2(&mut rng, 4, 3),
            b1: Array1::zeros(3),
            w2: rand2(&mut rng, 3, 2),
            b2: Array1::zeros(2),
        };
        assert_eq!(refine_field(&[0.0; 4], &p).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn refine_matches_scalar_oracle() {
        // 3 -> 2 -> 2 toy on [1, -1, 2]
        let p = RefineParams {
            w1: arr2(&[[1.0, 0.5], [-0.5, 1.0], [0.25, -1.0]]),
            b1: arr1(&[0.1, -0.2]),
            w2: arr2(&[[2.0, -1.0], [0.5, 1.5]]),
            b2: arr1(&[0.0, 0.25]),
        };
        let x: [f64; 3] = [1.0, -1.0, 2.0];
        let h0 = (x[0] * 1.0 + x[1] * (-0.5) + x[2] * 0.25 + 0.1).max(0.0);
        let h1 = (x[0] * 0.5 + x[1] * 1.0 + x[2] * (-1.0) + (-0.2)).max(0.0);
        let expect = [h0 * 2.0 + h1 * 0.5 + 0.0, h0 * (-1.0) + h1 * 1.5 + 0.25];
        let out = refine_field(&x, &p).unwrap();
        assert!((out[0] - expect[0]).abs() < 1e-15);
        assert!((out[1] - expect[1]).abs() < 1e-15);
    }

    #[test]
    fn stack_chunks_rows_are_contiguous_slices() {
        let m = stack_chunks(&[1.0, 2.0, 3.0, 4.0], 2).unwrap();
        assert_eq!(m, arr2(&[[1.0, 2.0], [3.0, 4.0]]));
        let single = stack_chunks(&[1.0, 2.0, 3.0], 1).unwrap();
        assert_eq!(single.dim(), (1, 3));
        assert!(stack_chunks(&[0.0; 6], 4).is_err());
    }

    #[test]
    fn stack_then_flatten_is_identity() {
        let v: Vec<f64> = (0..12).map(|i| i as f64).collect();
        for chunks in [1, 2, 3, 4, 6, 12] {
            let m = stack_chunks(&v, chunks).unwrap();
            let back: Vec<f64> = m.iter().cloned().collect();
            assert_eq!(back, v);
        }
    }

    #[test]
    fn query_default_is_masked_mean_plus_item() {
        let hist = arr2(&[[1.0, 1.0], [3.0, 3.0]]);
        let q = build_query(
            &QueryInputs {
                history: hist.view(),
                mask: &[true, true],
                item: &[5.0, 5.0],
                full_feature: &[9.0; 6],
            },
            QuerySource::HistoryItem,
        );
        assert_eq!(q, vec![2.0, 2.0, 5.0, 5.0]);
    }

    #[test]
    fn query_all_pad_history_means_zero() {
        let hist = arr2(&[[7.0, 7.0], [8.0, 8.0]]);
        let q = build_query(
            &QueryInputs {
                history: hist.view(),
                mask: &[false, false],
                item: &[5.0, 5.0],
                full_feature: &[9.0; 6],
            },
            QuerySource::HistoryItem,
        );
        assert_eq!(q, vec![0.0, 0.0, 5.0, 5.0]);
    }

    #[test]
    fn query_full_feature_is_verbatim() {
        let hist = arr2(&[[1.0, 1.0]]);
        let q = build_query(
            &QueryInputs {
                history: hist.view(),
                mask: &[true],
                item: &[5.0, 5.0],
                full_feature: &[9.0, 8.0, 7.0],
            },
            QuerySource::FullFeature,
        );
        assert_eq!(q, vec![9.0, 8.0, 7.0]);
    }

    #[test]
    fn single_key_attention_reduces_to_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = CrossAttnParams {
            wq: rand2(&mut rng, 3, 4),
            wk: rand2(&mut rng, 5, 4),
            wv: rand2(&mut rng, 5, 6),
        };
        let x = rand2(&mut rng, 1, 3);
        let k = rand2(&mut rng, 1, 5);
        let (o, scores) = cross_attend(&x, &k, &p, false).unwrap();
        assert_eq!(scores[[0, 0]], 1.0);
        let expect = k.dot(&p.wv);
        for c in 0..6 {
            assert!((o[[0, c]] - expect[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_knowledge_rows_split_scores_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = CrossAttnParams {
            wq: rand2(&mut rng, 3, 4),
            wk: rand2(&mut rng, 5, 4),
            wv: rand2(&mut rng, 5, 6),
        };
        let x = rand2(&mut rng, 2, 3);
        let row: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut k = Array2::zeros((2, 5));
        for c in 0..5 {
            k[[0, c]] = row[c];
            k[[1, c]] = row[c];
        }
        let (o, scores) = cross_attend(&x, &k, &p, false).unwrap();
        for r in 0..2 {
            assert!((scores[[r, 0]] - 0.5).abs() < 1e-12);
            assert!((scores[[r, 1]] - 0.5).abs() < 1e-12);
        }
        let v = k.dot(&p.wv);
        for r in 0..2 {
            for c in 0..6 {
                let avg = 0.5 * (v[[0, c]] + v[[1, c]]);
                assert!((o[[r, c]] - avg).abs() < 1e-12);
            }
        }
    }

    /// Explicit-loop attention oracle, independent of the ndarray path.
    fn cross_attend_oracle(
        x: &Array2<f64>,
        k: &Array2<f64>,
        p: &CrossAttnParams,
    ) -> (Array2<f64>, Array2<f64>) {
        let (cx, dx) = x.dim();
        let (ck, dk) = k.dim();
        let n = p.wq.ncols();
        let m = p.wv.ncols();
        let mut q = Array2::<f64>::zeros((cx, n));
        for r in 0..cx {
            for c in 0..n {
                for t in 0..dx {
                    q[[r, c]] += x[[r, t]] * p.wq[[t, c]];
                }
            }
        }
        let mut key = Array2::<f64>::zeros((ck, n));
        let mut val = Array2::<f64>::zeros((ck, m));
        for r in 0..ck {
            for c in 0..n {
                for t in 0..dk {
                    key[[r, c]] += k[[r, t]] * p.wk[[t, c]];
                }
            }
            for c in 0..m {
                for t in 0..dk {
                    val[[r, c]] += k[[r, t]] * p.wv[[t, c]];
                }
            }
        }
        let mut probs = Array2::<f64>::zeros((cx, ck));
        for r in 0..cx {
            let mut logits = vec![0.0; ck];
            for c in 0..ck {
                for t in 0..n {
                    logits[c] += q[[r, t]] * key[[c, t]];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|v| (v - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..ck {
                probs[[r, c]] = exps[c] / denom;
            }
        }
        let mut out = Array2::<f64>::zeros((cx, m));
        for r in 0..cx {
            for c in 0..m {
                for t in 0..ck {
                    out[[r, c]] += probs[[r, t]] * val[[t, c]];
                }
            }
        }
        (out, probs)
    }

    #[test]
    fn cross_attention_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let p = CrossAttnParams {
                wq: rand2(&mut rng, 3, 4),
                wk: rand2(&mut rng, 4, 4),
                wv: rand2(&mut rng, 4, 6),
            };
            let x = rand2(&mut rng, 2, 3);
            let k = rand2(&mut rng, 2, 4);
            let (o, s) = cross_attend(&x, &k, &p, false).unwrap();
            let (oo, so) = cross_attend_oracle(&x, &k, &p);
            for (a, b) in o.iter().zip(oo.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            for (a, b) in s.iter().zip(so.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..20 {
            let p = CrossAttnParams {
                wq: rand2(&mut rng, 4, 5),
                wk: rand2(&mut rng, 3, 5),
                wv: rand2(&mut rng, 3, 4),
            };
            let x = rand2(&mut rng, 4, 4);
            let k = rand2(&mut rng, 6, 3);
            let (_, s) = cross_attend(&x, &k, &p, false).unwrap();
            for r in s.rows() {
                assert!((r.sum() - 1.0).abs() < 1e-6);
                assert!(r.iter().all(|v| *v >= 0.0));
            }
        }
    }

    #[test]
    fn permuting_knowledge_chunks_leaves_output_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = CrossAttnParams {
            wq: rand2(&mut rng, 3, 4),
            wk: rand2(&mut rng, 4, 4),
            wv: rand2(&mut rng, 4, 5),
        };
        let x = rand2(&mut rng, 2, 3);
        let k = rand2(&mut rng, 4, 4);
        let (o, _) = cross_attend(&x, &k, &p, false).unwrap();
        // reverse the chunk rows
        let mut k_perm = Array2::zeros((4, 4));
        for r in 0..4 {
            for c in 0..4 {
                k_perm[[r, c]] = k[[3 - r, c]];
            }
        }
        let (o2, _) = cross_attend(&x, &k_perm, &p, false).unwrap();
        for (a, b) in o.iter().zip(o2.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn single_row_self_attention_is_value_projection() {
        let p = FusionParams {
            wq: Array2::eye(4),
            wk: Array2::eye(4),
            wv: Array2::eye(4),
            heads: 1,
        };
        let x = arr2(&[[1.0, -2.0, 3.0, 0.5]]);
        let (out, scores) = self_attend(&x, &p, false).unwrap();
        assert_eq!(scores[0][[0, 0]], 1.0);
        for c in 0..4 {
            assert!((out[[0, c]] - x[[0, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_flattens_row_major() {
        // identity fusion on one 2x2 field: [[a,b],[c,d]] -> [a,b,c,d]
        let field = arr2(&[[1.0, 2.0], [3.0, 4.0]]);
        let p = FusionParams {
            wq: Array2::zeros((2, 2)),
            wk: Array2::zeros((2, 2)),
            wv: Array2::eye(2),
            heads: 1,
        };
        // zero Q/K make scores uniform: each output row = mean of value rows
        let (_, flat, out) = fuse_fields(&[field], &p, None, false).unwrap();
        assert_eq!(flat.len(), 4);
        assert_eq!(out, flat);
        // uniform scores: both rows become the average [2, 3]
        assert!((flat[0] - 2.0).abs() < 1e-12 && (flat[1] - 3.0).abs() < 1e-12);
        assert!((flat[2] - 2.0).abs() < 1e-12 && (flat[3] - 3.0).abs() < 1e-12);
    }

    /// Single-head self-attention loop oracle.
    fn self_attend_oracle(x: &Array2<f64>, p: &FusionParams) -> Array2<f64> {
        let (rows, m) = x.dim();
        let mut q = Array2::<f64>::zeros((rows, m));
        let mut k = Array2::<f64>::zeros((rows, m));
        let mut v = Array2::<f64>::zeros((rows, m));
        for r in 0..rows {
            for c in 0..m {
                for t in 0..m {
                    q[[r, c]] += x[[r, t]] * p.wq[[t, c]];
                    k[[r, c]] += x[[r, t]] * p.wk[[t, c]];
                    v[[r, c]] += x[[r, t]] * p.wv[[t, c]];
                }
            }
        }
        let mut out = Array2::<f64>::zeros((rows, m));
        for r in 0..rows {
            let mut logits = vec![0.0; rows];
            for c in 0..rows {
                for t in 0..m {
                    logits[c] += q[[r, t]] * k[[c, t]];
                }
            }
            let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..rows {
                let w = exps[c] / denom;
                for t in 0..m {
                    out[[r, t]] += w * v[[c, t]];
                }
            }
        }
        out
    }

    #[test]
    fn fusion_matches_single_head_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let p = FusionParams {
                wq: rand2(&mut rng, 4, 4),
                wk: rand2(&mut rng, 4, 4),
                wv: rand2(&mut rng, 4, 4),
                heads: 1,
            };
            let f0 = rand2(&mut rng, 2, 4);
            let f1 = rand2(&mut rng, 2, 4);
            let (fused, _, _) = fuse_fields(&[f0.clone(), f1.clone()], &p, None, false).unwrap();
            let views = [f0.view(), f1.view()];
            let combined = ndarray::concatenate(ndarray::Axis(0), &views).unwrap();
            let expect = self_attend_oracle(&combined, &p);
            for (a, b) in fused.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
        }
    }

    /// Multihead oracle: runs the single-head oracle per column block.
    fn multihead_oracle(x: &Array2<f64>, p: &FusionParams) -> Array2<f64> {
        let (rows, m) = x.dim();
        let hd = m / p.heads;
        let mut out = Array2::<f64>::zeros((rows, m));
        for h in 0..p.heads {
            let cols = h * hd..(h + 1) * hd;
            // project with the full matrices, slice the head's columns
            let q_full = x.dot(&p.wq);
            let k_full = x.dot(&p.wk);
            let v_full = x.dot(&p.wv);
            let q = q_full.slice(s![.., cols.clone()]).to_owned();
            let k = k_full.slice(s![.., cols.clone()]).to_owned();
            let v = v_full.slice(s![.., cols.clone()]).to_owned();
            for r in 0..rows {
                let mut logits = vec![0.0; rows];
                for c in 0..rows {
                    for t in 0..hd {
                        logits[c] += q[[r, t]] * k[[c, t]];
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
                let denom: f64 = exps.iter().sum();
                for c in 0..rows {
                    let w = exps[c] / denom;
                    for t in 0..hd {
                        out[[r, h * hd + t]] += w * v[[c, t]];
                    }
                }
            }
        }
        out
    }

    #[test]
    fn two_head_fusion_matches_multihead_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            let p = FusionParams {
                wq: rand2(&mut rng, 4, 4),
                wk: rand2(&mut rng, 4, 4),
                wv: rand2(&mut rng, 4, 4),
                heads: 2,
            };
            let x = rand2(&mut rng, 3, 4);
            let (out, scores) = self_attend(&x, &p, false).unwrap();
            let expect = multihead_oracle(&x, &p);
            for (a, b) in out.iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-6);
            }
            for head in scores {
                for r in head.rows() {
                    assert!((r.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    fn full_setup(
        rng: &mut ChaCha8Rng,
        heads: usize,
    ) -> (ParamSet, EsaModule, FilteredKnowledge, Vec<f64>) {
        let cfg = EsaConfig {
            cx: 2,
            ck: 2,
            n: 5,
            m: 4,
            heads,
            ..EsaConfig::default()
        };
        let dims = cfg.resolve(6, 2, 8, 10).unwrap();
        let mut pset = ParamSet::new();
        let module = EsaModule::new(&mut pset, "esa", dims, false, rng);
        let kbar_values = Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0f64));
        let kbar = filtered_from(kbar_values);
        let query: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        (pset, module, kbar, query)
    }

    fn filtered_from(values: Array2<f64>) -> FilteredKnowledge {
        // build via the public path: unit weights on a knowledge matrix
        let k32 = values.mapv(|v| v as f32);
        let km = crate::knowledge::KnowledgeMatrix::new(k32).unwrap();
        let w = crate::esfnet::GateWeights::new(Array2::ones((1, values.ncols())));
        crate::esfnet::apply_weights(&km, &w).unwrap()
    }

    #[test]
    fn graph_forward_matches_pure_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for heads in [1, 2] {
            let (pset, module, kbar, query) = full_setup(&mut rng, heads);
            let pure = esa_forward(&kbar, &query, &module.snapshot(&pset)).unwrap();

            let mut g = Graph::new();
            let (dk, l) = (kbar.dim(), kbar.field_count());
            let mut kdata = ArrayD::<f64>::zeros(IxDyn(&[1, l, dk]));
            for j in 0..l {
                for r in 0..dk {
                    kdata[[0, j, r]] = kbar.values()[[r, j]];
                }
            }
            let kv = g.constant(kdata);
            let qv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 8]), query.clone()).unwrap());
            let out = module.forward(&mut g, &pset, kv, qv);
            let gout = g.value(out.output);
            for (i, v) in pure.output.iter().enumerate() {
                assert!(
                    (gout[[0, i]] - v).abs() < 1e-10,
                    "heads={heads} output {i}: graph {} pure {v}",
                    gout[[0, i]]
                );
            }
            let gflat = g.value(out.flat);
            for (i, v) in pure.flat.iter().enumerate() {
                assert!((gflat[[0, i]] - v).abs() < 1e-10);
            }
            for (j, sv) in out.scores.iter().enumerate() {
                let gs = g.value(*sv);
                for r in 0..2 {
                    for c in 0..2 {
                        assert!((gs[[0, r, c]] - pure.scores[j][[r, c]]).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn flat_width_is_fields_times_cx_times_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (pset, module, kbar, query) = full_setup(&mut rng, 2);
        let pure = esa_forward(&kbar, &query, &module.snapshot(&pset)).unwrap();
        assert_eq!(pure.flat.len(), 2 * 2 * 4);
        assert_eq!(pure.per_field.len(), 2);
        assert_eq!(pure.per_field[0].dim(), (2, 4));
    }

    #[test]
    fn esa_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (mut pset, module, kbar, query) = full_setup(&mut rng, 2);
        let (dk, l) = (kbar.dim(), kbar.field_count());
        let mut kdata = ArrayD::<f64>::zeros(IxDyn(&[2, l, dk]));
        let mut qdata = ArrayD::<f64>::zeros(IxDyn(&[2, 8]));
        for b in 0..2 {
            for j in 0..l {
                for r in 0..dk {
                    kdata[[b, j, r]] = rng.random_range(-1.0..1.0);
                }
            }
            for c in 0..8 {
                qdata[[b, c]] = if b == 0 { query[c] } else { rng.random_range(-1.0..1.0) };
            }
        }

        let eval = |pset: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let kv = g.constant(kdata.clone());
            let qv = g.constant(qdata.clone());
            let out = module.forward(&mut g, pset, kv, qv);
            let sq = g.mul(out.output, out.output);
            let loss = g.sum_all(sq);
            g.value(loss)[[0]]
        };

        let mut g = Graph::new();
        let kv = g.constant(kdata.clone());
        let qv = g.constant(qdata.clone());
        let out = module.forward(&mut g, &pset, kv, qv);
        let sq = g.mul(out.output, out.output);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);

        let h = 1e-5;
        for id in module.param_ids() {
            let n = pset.value(id).len();
            // spot-check a few elements per parameter to keep runtime down
            for j in (0..n).step_by(3) {
                let orig = pset.value(id).as_slice().unwrap()[j];
                pset.value_mut(id).as_slice_mut().unwrap()[j] = orig + h;
                let up = eval(&pset);
                pset.value_mut(id).as_slice_mut().unwrap()[j] = orig - h;
                let down = eval(&pset);
                pset.value_mut(id).as_slice_mut().unwrap()[j] = orig;
                let fd = (up - down) / (2.0 * h);
                let an = grads
                    .get(&id)
                    .map(|a| a.as_slice().unwrap()[j])
                    .unwrap_or(0.0);
                let denom = fd.abs().max(an.abs()).max(1e-6);
                assert!(
                    ((fd - an) / denom).abs() < 1e-4,
                    "{} elem {j}: fd={fd} analytic={an}",
                    pset.name(id)
                );
            }
        }
    }

    #[test]
    fn config_rejects_bad_divisibility() {
        let cfg = EsaConfig {
            ck: 5,
            ..EsaConfig::default()
        };
        assert!(cfg.resolve(32, 2, 16, 24).is_err()); // 32 % 5 != 0
        let cfg2 = EsaConfig {
            cx: 3,
            ..EsaConfig::default()
        };
        assert!(cfg2.resolve(32, 2, 16, 24).is_err()); // 16 % 3 != 0
        let cfg3 = EsaConfig {
            heads: 3,
            ..EsaConfig::default()
        };
        assert!(cfg3.resolve(32, 2, 16, 24).is_err()); // m=16 % 3 != 0
    }
}
