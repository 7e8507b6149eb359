//! Reverse-mode automatic differentiation over `f64` ndarrays.
//!
//! Every forward pass builds a fresh [`Graph`]: leaves are either constants
//! (batch data) or parameters registered in a [`ParamSet`], interior nodes are
//! recorded ops. [`Graph::backward`] walks the tape in reverse and returns one
//! gradient per parameter leaf. The op set is intentionally small: dense maps,
//! batched matmuls, activations, softmax variants, gathers and the structural
//! ops (concat / reshape / detach) the model forwards need.
//!
//! All stored values are standard-layout owned arrays, and every op is
//! deterministic, so a fixed graph always produces bit-identical values and
//! gradients.

use std::collections::HashMap;

use ndarray::{s, Array1, Array2, ArrayD, Axis, Ix1, Ix2, Ix3, IxDyn};

/// Dynamic-dimension value type used throughout the graph.
pub type Arr = ArrayD<f64>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Handle to a parameter stored in a [`ParamSet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Named parameter storage shared by the model modules.
///
/// Parameters keep their values between training steps; each step clones the
/// current values into graph leaves and applies the returned gradients.
#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub value: Arr,
    pub trainable: bool,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique within the set.
    pub fn add(&mut self, name: impl Into<String>, value: Arr, trainable: bool) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name: {name}"
        );
        let id = self.entries.len();
        self.by_name.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value,
            trainable,
        });
        ParamId(id)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Arr {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Arr {
        &mut self.entries[id.0].value
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// SHA-256 digest of the given parameters' raw little-endian bytes,
    /// folded in ascending name order. Used by freeze audits.
    pub fn digest(&self, ids: &[ParamId]) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut sorted: Vec<ParamId> = ids.to_vec();
        sorted.sort_by(|a, b| self.name(*a).cmp(self.name(*b)));
        let mut hasher = Sha256::new();
        for id in sorted {
            hasher.update(self.name(id).as_bytes());
            for v in self.value(id).iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

enum Op {
    Constant,
    Param(ParamId),
    /// 2-D matrix product `a (p,q) x b (q,r)`.
    MatMul { a: Var, b: Var },
    /// Applies a 2-D map to the last axis: `a (.., q) x w (q, r)`.
    MatMulLast { a: Var, w: Var },
    /// Batched matmul `a (B,p,q) x b (B,q,r)`.
    Bmm { a: Var, b: Var },
    /// Batched matmul with transposed right operand: `a (B,p,q) x b (B,r,q)^T`.
    BmmNT { a: Var, b: Var },
    /// Broadcasts a rank-1 bias over the last axis.
    AddBias { a: Var, bias: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Relu { a: Var },
    Sigmoid { a: Var },
    SoftmaxLast { a: Var },
    /// Softmax over the last axis restricted to `mask != 0` entries.
    /// Fully masked rows produce all-zero output. The backward pass only
    /// needs the softmax output (masked entries carry p = 0).
    MaskedSoftmaxLast { a: Var },
    ConcatAxis { parts: Vec<Var>, axis: usize },
    Reshape { a: Var },
    SwapAxes { a: Var, ax0: usize, ax1: usize },
    Detach,
    /// Row gather from a 2-D table; output is `(ids.len(), width)`.
    GatherRows { table: Var, ids: Vec<usize> },
    /// Mean of `seq (B,H,w)` rows where `mask (B,H)` is nonzero; all-masked
    /// rows yield zeros.
    MaskedMeanAxis1 { seq: Var, mask: Array2<f64> },
    /// Per-chunk broadcast product: `k (B,L,dk) * w (B,L,C)` where chunk `c`
    /// of each knowledge field is scaled by one shared weight.
    ChunkScale { k: Var, w: Var },
    /// Slice `a (B,L,X)` at position `j` of axis 1 -> `(B,X)`.
    IndexAxis1 { a: Var, j: usize },
    /// Contiguous slice `[start, end)` of the last axis.
    SliceLast { a: Var, start: usize, end: usize },
    /// Repeats `a (B,w)` along a new middle axis -> `(B,h,w)`.
    ExpandAxis1 { a: Var, reps: usize },
    /// Sum over the last axis, keeping it with size 1.
    SumLastKeep { a: Var },
    /// Mean binary cross-entropy from logits `(B,)` against constant labels.
    BceWithLogitsMean { logits: Var, labels: Array1<f64> },
    SumAll { a: Var },
}

/// A single forward tape. Build leaves, compose ops, then call
/// [`Graph::backward`] on a scalar output.
pub struct Graph {
    vals: Vec<Arr>,
    ops: Vec<Op>,
    needs: Vec<bool>,
}

impl Graph {
    pub fn new() -> Self {
        Self {
            vals: Vec::new(),
            ops: Vec::new(),
            needs: Vec::new(),
        }
    }

    fn push(&mut self, val: Arr, op: Op, needs: bool) -> Var {
        // Reshape relies on contiguous standard-layout storage.
        let val = if val.is_standard_layout() {
            val
        } else {
            val.as_standard_layout().to_owned()
        };
        self.vals.push(val);
        self.ops.push(op);
        self.needs.push(needs);
        Var(self.vals.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    pub fn value(&self, v: Var) -> &Arr {
        &self.vals[v.0]
    }

    /// Non-differentiable leaf (batch data, masks, assembled knowledge).
    pub fn constant(&mut self, val: Arr) -> Var {
        self.push(val, Op::Constant, false)
    }

    /// Parameter leaf; its gradient is reported by [`Graph::backward`].
    pub fn param(&mut self, set: &ParamSet, id: ParamId) -> Var {
        self.push(set.value(id).clone(), Op::Param(id), true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let bv = self.vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
        assert_eq!(av.ncols(), bv.nrows(), "matmul inner dims");
        let out = av.dot(&bv).into_dyn();
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::MatMul { a, b }, needs)
    }

    pub fn matmul_last(&mut self, a: Var, w: Var) -> Var {
        let ash = self.vals[a.0].shape().to_vec();
        let wv = self.vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
        let q = *ash.last().expect("matmul_last on scalar");
        assert_eq!(q, wv.nrows(), "matmul_last inner dims");
        let m: usize = ash[..ash.len() - 1].iter().product();
        let a2 = self.vals[a.0]
            .view()
            .into_shape_with_order((m, q))
            .unwrap();
        let out2 = std_layout2(a2.dot(&wv));
        let mut out_shape = ash.clone();
        *out_shape.last_mut().unwrap() = wv.ncols();
        let out = out2.into_shape_with_order(IxDyn(&out_shape)).unwrap();
        let needs = self.needs(a) || self.needs(w);
        self.push(out, Op::MatMulLast { a, w }, needs)
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.vals[b.0].view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm batch dims");
        assert_eq!(av.shape()[2], bv.shape()[1], "bmm inner dims");
        let (bs, p, r) = (av.shape()[0], av.shape()[1], bv.shape()[2]);
        let mut out = ndarray::Array3::<f64>::zeros((bs, p, r));
        for i in 0..bs {
            out.slice_mut(s![i, .., ..])
                .assign(&av.slice(s![i, .., ..]).dot(&bv.slice(s![i, .., ..])));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::Bmm { a, b }, needs)
    }

    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Var {
        let av = self.vals[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.vals[b.0].view().into_dimensionality::<Ix3>().unwrap();
        assert_eq!(av.shape()[0], bv.shape()[0], "bmm_nt batch dims");
        assert_eq!(av.shape()[2], bv.shape()[2], "bmm_nt inner dims");
        let (bs, p, r) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = ndarray::Array3::<f64>::zeros((bs, p, r));
        for i in 0..bs {
            out.slice_mut(s![i, .., ..])
                .assign(&av.slice(s![i, .., ..]).dot(&bv.slice(s![i, .., ..]).t()));
        }
        let needs = self.needs(a) || self.needs(b);
        self.push(out.into_dyn(), Op::BmmNT { a, b }, needs)
    }

    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let bv = self.vals[bias.0].view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(
            *self.vals[a.0].shape().last().unwrap(),
            bv.len(),
            "add_bias width"
        );
        let out = &self.vals[a.0] + &bv;
        let needs = self.needs(a) || self.needs(bias);
        self.push(out, Op::AddBias { a, bias }, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "add shape");
        let out = &self.vals[a.0] + &self.vals[b.0];
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Add { a, b }, needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "sub shape");
        let out = &self.vals[a.0] - &self.vals[b.0];
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Sub { a, b }, needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vals[a.0].shape(), self.vals[b.0].shape(), "mul shape");
        let out = &self.vals[a.0] * &self.vals[b.0];
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::Mul { a, b }, needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = &self.vals[a.0] * c;
        let needs = self.needs(a);
        self.push(out, Op::Scale { a, c }, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].mapv(|x| x.max(0.0));
        let needs = self.needs(a);
        self.push(out, Op::Relu { a }, needs)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].mapv(sigmoid_scalar);
        let needs = self.needs(a);
        self.push(out, Op::Sigmoid { a }, needs)
    }

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let out = softmax_last_value(&self.vals[a.0]);
        let needs = self.needs(a);
        self.push(out, Op::SoftmaxLast { a }, needs)
    }

    pub fn masked_softmax_last(&mut self, a: Var, mask: &Arr) -> Var {
        assert_eq!(self.vals[a.0].shape(), mask.shape(), "mask shape");
        let out = masked_softmax_last_value(&self.vals[a.0], mask);
        let needs = self.needs(a);
        self.push(out, Op::MaskedSoftmaxLast { a }, needs)
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Var {
        let last = self.vals[parts[0].0].ndim() - 1;
        self.concat_axis(parts, last)
    }

    pub fn concat_axis(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        let views: Vec<_> = parts.iter().map(|p| self.vals[p.0].view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat shapes");
        let needs = parts.iter().any(|p| self.needs(*p));
        self.push(
            out,
            Op::ConcatAxis {
                parts: parts.to_vec(),
                axis,
            },
            needs,
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let out = self.vals[a.0]
            .clone()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size");
        let needs = self.needs(a);
        self.push(out, Op::Reshape { a }, needs)
    }

    pub fn swap_axes(&mut self, a: Var, ax0: usize, ax1: usize) -> Var {
        let mut v = self.vals[a.0].view();
        v.swap_axes(ax0, ax1);
        let out = v.as_standard_layout().to_owned();
        let needs = self.needs(a);
        self.push(out, Op::SwapAxes { a, ax0, ax1 }, needs)
    }

    /// Forward value passes through; gradient does not.
    pub fn detach(&mut self, a: Var) -> Var {
        let out = self.vals[a.0].clone();
        self.push(out, Op::Detach, false)
    }

    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.vals[table.0].view().into_dimensionality::<Ix2>().unwrap();
        let w = tv.ncols();
        let mut out = Array2::<f64>::zeros((ids.len(), w));
        for (r, &i) in ids.iter().enumerate() {
            out.row_mut(r).assign(&tv.row(i));
        }
        let needs = self.needs(table);
        self.push(
            out.into_dyn(),
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            needs,
        )
    }

    pub fn masked_mean_axis1(&mut self, seq: Var, mask: &Array2<f64>) -> Var {
        let sv = self.vals[seq.0].view().into_dimensionality::<Ix3>().unwrap();
        let (bs, h, w) = (sv.shape()[0], sv.shape()[1], sv.shape()[2]);
        assert_eq!((bs, h), mask.dim(), "mask shape");
        let mut out = Array2::<f64>::zeros((bs, w));
        for b in 0..bs {
            let count: f64 = mask.row(b).sum();
            if count > 0.0 {
                for t in 0..h {
                    if mask[[b, t]] != 0.0 {
                        out.row_mut(b).scaled_add(1.0 / count, &sv.slice(s![b, t, ..]));
                    }
                }
            }
        }
        let needs = self.needs(seq);
        self.push(
            out.into_dyn(),
            Op::MaskedMeanAxis1 {
                seq,
                mask: mask.clone(),
            },
            needs,
        )
    }

    pub fn chunk_scale(&mut self, k: Var, w: Var) -> Var {
        let kv = self.vals[k.0].view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.vals[w.0].view().into_dimensionality::<Ix3>().unwrap();
        let (bs, l, dk) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
        let c = wv.shape()[2];
        assert_eq!(wv.shape()[0], bs, "chunk_scale batch");
        assert_eq!(wv.shape()[1], l, "chunk_scale fields");
        assert_eq!(dk % c, 0, "chunk count must divide knowledge width");
        let s_len = dk / c;
        let mut out = ndarray::Array3::<f64>::zeros((bs, l, dk));
        for b in 0..bs {
            for f in 0..l {
                for ch in 0..c {
                    let wgt = wv[[b, f, ch]];
                    for t in 0..s_len {
                        out[[b, f, ch * s_len + t]] = kv[[b, f, ch * s_len + t]] * wgt;
                    }
                }
            }
        }
        let needs = self.needs(k) || self.needs(w);
        self.push(out.into_dyn(), Op::ChunkScale { k, w }, needs)
    }

    pub fn index_axis1(&mut self, a: Var, j: usize) -> Var {
        let av = self.vals[a.0].view().into_dimensionality::<Ix3>().unwrap();
        let out = av.index_axis(Axis(1), j).to_owned();
        let needs = self.needs(a);
        self.push(out.into_dyn(), Op::IndexAxis1 { a, j }, needs)
    }

    pub fn slice_last(&mut self, a: Var, start: usize, end: usize) -> Var {
        let ndim = self.vals[a.0].ndim();
        assert!(end <= *self.vals[a.0].shape().last().unwrap() && start < end);
        let out = self.vals[a.0]
            .slice_axis(Axis(ndim - 1), ndarray::Slice::from(start..end))
            .to_owned();
        let needs = self.needs(a);
        self.push(out, Op::SliceLast { a, start, end }, needs)
    }

    pub fn expand_axis1(&mut self, a: Var, reps: usize) -> Var {
        let av = self.vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
        let (bs, w) = av.dim();
        let mut out = ndarray::Array3::<f64>::zeros((bs, reps, w));
        for t in 0..reps {
            out.slice_mut(s![.., t, ..]).assign(&av);
        }
        let needs = self.needs(a);
        self.push(out.into_dyn(), Op::ExpandAxis1 { a, reps }, needs)
    }

    pub fn sum_last_keep(&mut self, a: Var) -> Var {
        let v = &self.vals[a.0];
        let last = v.ndim() - 1;
        let mut out = v.sum_axis(Axis(last));
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = 1;
        out = out.into_shape_with_order(IxDyn(&shape[..shape.len() - 1])).unwrap();
        let out = out.insert_axis(Axis(shape.len() - 1));
        let needs = self.needs(a);
        self.push(out, Op::SumLastKeep { a }, needs)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = ndarray::arr1(&[self.vals[a.0].sum()]).into_dyn();
        let needs = self.needs(a);
        self.push(out, Op::SumAll { a }, needs)
    }

    /// Numerically stable mean BCE between logits and fixed 0/1 labels.
    pub fn bce_with_logits_mean(&mut self, logits: Var, labels: &Array1<f64>) -> Var {
        let lv = self.vals[logits.0].view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(lv.len(), labels.len(), "label count");
        let n = labels.len() as f64;
        let mut total = 0.0;
        for (l, y) in lv.iter().zip(labels.iter()) {
            total += l.max(0.0) - l * y + (1.0 + (-l.abs()).exp()).ln();
        }
        let out = ndarray::arr1(&[total / n]).into_dyn();
        let needs = self.needs(logits);
        self.push(
            out,
            Op::BceWithLogitsMean {
                logits,
                labels: labels.clone(),
            },
            needs,
        )
    }

    /// Reverse pass from a scalar output. Returns gradients keyed by
    /// parameter id; parameters that received no gradient are absent.
    pub fn backward(&mut self, out: Var) -> HashMap<ParamId, Arr> {
        assert_eq!(self.vals[out.0].len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Arr>> = vec![None; self.vals.len()];
        grads[out.0] = Some(ndarray::ArrayD::ones(self.vals[out.0].raw_dim()));

        let mut param_grads: HashMap<ParamId, Arr> = HashMap::new();
        for i in (0..self.vals.len()).rev() {
            if !self.needs[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Constant | Op::Detach => {}
                Op::Param(id) => {
                    param_grads
                        .entry(*id)
                        .and_modify(|acc| *acc += &g)
                        .or_insert(g);
                }
                Op::MatMul { a, b } => {
                    let (a, b) = (*a, *b);
                    let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                    let av = self.vals[a.0].view().into_dimensionality::<Ix2>().unwrap();
                    let bv = self.vals[b.0].view().into_dimensionality::<Ix2>().unwrap();
                    if self.needs(a) {
                        accum(&mut grads[a.0], g2.dot(&bv.t()).into_dyn());
                    }
                    if self.needs(b) {
                        accum(&mut grads[b.0], av.t().dot(&g2).into_dyn());
                    }
                }
                Op::MatMulLast { a, w } => {
                    let (a, w) = (*a, *w);
                    let ash = self.vals[a.0].shape().to_vec();
                    let q = *ash.last().unwrap();
                    let m: usize = ash[..ash.len() - 1].iter().product();
                    let wv = self.vals[w.0].view().into_dimensionality::<Ix2>().unwrap();
                    let r = wv.ncols();
                    let g2 = g.view().into_shape_with_order((m, r)).unwrap();
                    if self.needs(a) {
                        // dot with inner dim 1 yields a non-standard layout
                        let da = std_layout2(g2.dot(&wv.t()));
                        accum(
                            &mut grads[a.0],
                            da.into_shape_with_order(IxDyn(&ash)).unwrap(),
                        );
                    }
                    if self.needs(w) {
                        let a2 = self.vals[a.0].view().into_shape_with_order((m, q)).unwrap();
                        accum(&mut grads[w.0], a2.t().dot(&g2).into_dyn());
                    }
                }
                Op::Bmm { a, b } => {
                    let (a, b) = (*a, *b);
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.vals[a.0].view().into_dimensionality::<Ix3>().unwrap();
                    let bv = self.vals[b.0].view().into_dimensionality::<Ix3>().unwrap();
                    let bs = av.shape()[0];
                    if self.needs(a) {
                        let mut da = ndarray::Array3::<f64>::zeros(av.raw_dim());
                        for i in 0..bs {
                            da.slice_mut(s![i, .., ..]).assign(
                                &g3.slice(s![i, .., ..]).dot(&bv.slice(s![i, .., ..]).t()),
                            );
                        }
                        accum(&mut grads[a.0], da.into_dyn());
                    }
                    if self.needs(b) {
                        let mut db = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                        for i in 0..bs {
                            db.slice_mut(s![i, .., ..]).assign(
                                &av.slice(s![i, .., ..]).t().dot(&g3.slice(s![i, .., ..])),
                            );
                        }
                        accum(&mut grads[b.0], db.into_dyn());
                    }
                }
                Op::BmmNT { a, b } => {
                    let (a, b) = (*a, *b);
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let av = self.vals[a.0].view().into_dimensionality::<Ix3>().unwrap();
                    let bv = self.vals[b.0].view().into_dimensionality::<Ix3>().unwrap();
                    let bs = av.shape()[0];
                    if self.needs(a) {
                        let mut da = ndarray::Array3::<f64>::zeros(av.raw_dim());
                        for i in 0..bs {
                            da.slice_mut(s![i, .., ..])
                                .assign(&g3.slice(s![i, .., ..]).dot(&bv.slice(s![i, .., ..])));
                        }
                        accum(&mut grads[a.0], da.into_dyn());
                    }
                    if self.needs(b) {
                        let mut db = ndarray::Array3::<f64>::zeros(bv.raw_dim());
                        for i in 0..bs {
                            db.slice_mut(s![i, .., ..]).assign(
                                &g3.slice(s![i, .., ..]).t().dot(&av.slice(s![i, .., ..])),
                            );
                        }
                        accum(&mut grads[b.0], db.into_dyn());
                    }
                }
                Op::AddBias { a, bias } => {
                    let (a, bias) = (*a, *bias);
                    if self.needs(a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.needs(bias) {
                        let w = *g.shape().last().unwrap();
                        let m: usize = g.len() / w;
                        let g2 = g.view().into_shape_with_order((m, w)).unwrap();
                        accum(&mut grads[bias.0], g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
                Op::Add { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.needs(b) {
                        accum(&mut grads[b.0], g);
                    }
                }
                Op::Sub { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accum(&mut grads[a.0], g.clone());
                    }
                    if self.needs(b) {
                        accum(&mut grads[b.0], -&g);
                    }
                }
                Op::Mul { a, b } => {
                    let (a, b) = (*a, *b);
                    if self.needs(a) {
                        accum(&mut grads[a.0], &g * &self.vals[b.0]);
                    }
                    if self.needs(b) {
                        accum(&mut grads[b.0], &g * &self.vals[a.0]);
                    }
                }
                Op::Scale { a, c } => {
                    let (a, c) = (*a, *c);
                    if self.needs(a) {
                        accum(&mut grads[a.0], &g * c);
                    }
                }
                Op::Relu { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let mask = self.vals[a.0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                        accum(&mut grads[a.0], &g * &mask);
                    }
                }
                Op::Sigmoid { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let y = &self.vals[i];
                        let dy = y * &(1.0 - y);
                        accum(&mut grads[a.0], &g * &dy);
                    }
                }
                Op::SoftmaxLast { a } | Op::MaskedSoftmaxLast { a } => {
                    // dL/dx_j = p_j * (g_j - sum_k g_k p_k); masked entries have
                    // p = 0 so they contribute and receive nothing.
                    let a = *a;
                    if self.needs(a) {
                        let p = &self.vals[i];
                        let w = *p.shape().last().unwrap();
                        let m = p.len() / w;
                        let p2 = p.view().into_shape_with_order((m, w)).unwrap();
                        let g2 = g.view().into_shape_with_order((m, w)).unwrap();
                        let mut dx = Array2::<f64>::zeros((m, w));
                        for r in 0..m {
                            let dot: f64 = g2.row(r).iter().zip(p2.row(r)).map(|(x, y)| x * y).sum();
                            for c in 0..w {
                                dx[[r, c]] = p2[[r, c]] * (g2[[r, c]] - dot);
                            }
                        }
                        accum(
                            &mut grads[a.0],
                            dx.into_shape_with_order(IxDyn(self.vals[a.0].shape())).unwrap(),
                        );
                    }
                }
                Op::ConcatAxis { parts, axis } => {
                    let parts = parts.clone();
                    let axis = *axis;
                    let mut offset = 0;
                    for p in parts {
                        let w = self.vals[p.0].shape()[axis];
                        if self.needs(p) {
                            let slice = g
                                .slice_axis(Axis(axis), ndarray::Slice::from(offset..offset + w))
                                .to_owned();
                            accum(&mut grads[p.0], slice);
                        }
                        offset += w;
                    }
                }
                Op::Reshape { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let back = g
                            .into_shape_with_order(IxDyn(self.vals[a.0].shape()))
                            .unwrap();
                        accum(&mut grads[a.0], back);
                    }
                }
                Op::SwapAxes { a, ax0, ax1 } => {
                    let (a, ax0, ax1) = (*a, *ax0, *ax1);
                    if self.needs(a) {
                        let mut gv = g.view();
                        gv.swap_axes(ax0, ax1);
                        accum(&mut grads[a.0], gv.as_standard_layout().to_owned());
                    }
                }
                Op::GatherRows { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    if self.needs(table) {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let tshape = self.vals[table.0].shape();
                        let mut dt = Array2::<f64>::zeros((tshape[0], tshape[1]));
                        for (r, &id) in ids.iter().enumerate() {
                            dt.row_mut(id).scaled_add(1.0, &g2.row(r));
                        }
                        accum(&mut grads[table.0], dt.into_dyn());
                    }
                }
                Op::MaskedMeanAxis1 { seq, mask } => {
                    let seq = *seq;
                    let mask = mask.clone();
                    if self.needs(seq) {
                        let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
                        let sshape = self.vals[seq.0].shape().to_vec();
                        let (bs, h, w) = (sshape[0], sshape[1], sshape[2]);
                        let mut ds = ndarray::Array3::<f64>::zeros((bs, h, w));
                        for b in 0..bs {
                            let count: f64 = mask.row(b).sum();
                            if count > 0.0 {
                                for t in 0..h {
                                    if mask[[b, t]] != 0.0 {
                                        ds.slice_mut(s![b, t, ..]).scaled_add(1.0 / count, &g2.row(b));
                                    }
                                }
                            }
                        }
                        accum(&mut grads[seq.0], ds.into_dyn());
                    }
                }
                Op::ChunkScale { k, w } => {
                    let (k, w) = (*k, *w);
                    let kv = self.vals[k.0].view().into_dimensionality::<Ix3>().unwrap();
                    let wv = self.vals[w.0].view().into_dimensionality::<Ix3>().unwrap();
                    let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (bs, l, dk) = (kv.shape()[0], kv.shape()[1], kv.shape()[2]);
                    let c = wv.shape()[2];
                    let s_len = dk / c;
                    if self.needs(k) {
                        let mut dkk = ndarray::Array3::<f64>::zeros((bs, l, dk));
                        for b in 0..bs {
                            for f in 0..l {
                                for ch in 0..c {
                                    for t in 0..s_len {
                                        dkk[[b, f, ch * s_len + t]] =
                                            g3[[b, f, ch * s_len + t]] * wv[[b, f, ch]];
                                    }
                                }
                            }
                        }
                        accum(&mut grads[k.0], dkk.into_dyn());
                    }
                    if self.needs(w) {
                        let mut dw = ndarray::Array3::<f64>::zeros((bs, l, c));
                        for b in 0..bs {
                            for f in 0..l {
                                for ch in 0..c {
                                    let mut acc = 0.0;
                                    for t in 0..s_len {
                                        acc += g3[[b, f, ch * s_len + t]]
                                            * kv[[b, f, ch * s_len + t]];
                                    }
                                    dw[[b, f, ch]] = acc;
                                }
                            }
                        }
                        accum(&mut grads[w.0], dw.into_dyn());
                    }
                }
                Op::IndexAxis1 { a, j } => {
                    let (a, j) = (*a, *j);
                    if self.needs(a) {
                        let ashape = self.vals[a.0].shape().to_vec();
                        let mut da = ndarray::ArrayD::<f64>::zeros(IxDyn(&ashape));
                        da.index_axis_mut(Axis(1), j).assign(
                            &g.view()
                                .into_shape_with_order(IxDyn(&[ashape[0], ashape[2]]))
                                .unwrap(),
                        );
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::SliceLast { a, start, end } => {
                    let (a, start, end) = (*a, *start, *end);
                    if self.needs(a) {
                        let ashape = self.vals[a.0].shape().to_vec();
                        let mut da = ndarray::ArrayD::<f64>::zeros(IxDyn(&ashape));
                        da.slice_axis_mut(
                            Axis(ashape.len() - 1),
                            ndarray::Slice::from(start..end),
                        )
                        .assign(&g);
                        accum(&mut grads[a.0], da);
                    }
                }
                Op::ExpandAxis1 { a, reps } => {
                    let (a, reps) = (*a, *reps);
                    if self.needs(a) {
                        let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                        let (bs, w) = (g3.shape()[0], g3.shape()[2]);
                        let mut da = Array2::<f64>::zeros((bs, w));
                        for t in 0..reps {
                            da += &g3.slice(s![.., t, ..]);
                        }
                        accum(&mut grads[a.0], da.into_dyn());
                    }
                }
                Op::SumLastKeep { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let ashape = self.vals[a.0].shape().to_vec();
                        let w = *ashape.last().unwrap();
                        let m = self.vals[a.0].len() / w;
                        let g1 = g.view().into_shape_with_order(m).unwrap();
                        let mut da = Array2::<f64>::zeros((m, w));
                        for r in 0..m {
                            da.row_mut(r).fill(g1[r]);
                        }
                        accum(
                            &mut grads[a.0],
                            da.into_shape_with_order(IxDyn(&ashape)).unwrap(),
                        );
                    }
                }
                Op::BceWithLogitsMean { logits, labels } => {
                    let logits = *logits;
                    let labels = labels.clone();
                    if self.needs(logits) {
                        let lv = self.vals[logits.0].view().into_dimensionality::<Ix1>().unwrap();
                        let n = labels.len() as f64;
                        let gscalar = g[[0]];
                        let mut dl = Array1::<f64>::zeros(labels.len());
                        for (j, (l, y)) in lv.iter().zip(labels.iter()).enumerate() {
                            dl[j] = gscalar * (sigmoid_scalar(*l) - y) / n;
                        }
                        accum(&mut grads[logits.0], dl.into_dyn());
                    }
                }
                Op::SumAll { a } => {
                    let a = *a;
                    if self.needs(a) {
                        let gscalar = g[[0]];
                        let da =
                            ndarray::ArrayD::<f64>::from_elem(self.vals[a.0].raw_dim(), gscalar);
                        accum(&mut grads[a.0], da);
                    }
                }
            }
        }
        param_grads
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn std_layout2(a: Array2<f64>) -> Array2<f64> {
    if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().to_owned()
    }
}

fn accum(slot: &mut Option<Arr>, g: Arr) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_last_value(a: &Arr) -> Arr {
    let w = *a.shape().last().unwrap();
    let m = a.len() / w;
    let a2 = a.view().into_shape_with_order((m, w)).unwrap();
    let mut out = Array2::<f64>::zeros((m, w));
    for r in 0..m {
        let row = a2.row(r);
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for c in 0..w {
            let e = (row[c] - mx).exp();
            out[[r, c]] = e;
            denom += e;
        }
        out.row_mut(r).mapv_inplace(|x| x / denom);
    }
    out.into_shape_with_order(IxDyn(a.shape())).unwrap()
}

fn masked_softmax_last_value(a: &Arr, mask: &Arr) -> Arr {
    let w = *a.shape().last().unwrap();
    let m = a.len() / w;
    let a2 = a.view().into_shape_with_order((m, w)).unwrap();
    let m2 = mask.view().into_shape_with_order((m, w)).unwrap();
    let mut out = Array2::<f64>::zeros((m, w));
    for r in 0..m {
        let mut mx = f64::NEG_INFINITY;
        for c in 0..w {
            if m2[[r, c]] != 0.0 {
                mx = mx.max(a2[[r, c]]);
            }
        }
        if mx == f64::NEG_INFINITY {
            continue; // fully masked row stays zero
        }
        let mut denom = 0.0;
        for c in 0..w {
            if m2[[r, c]] != 0.0 {
                let e = (a2[[r, c]] - mx).exp();
                out[[r, c]] = e;
                denom += e;
            }
        }
        out.row_mut(r).mapv_inplace(|x| x / denom);
    }
    out.into_shape_with_order(IxDyn(a.shape())).unwrap()
}

/// Draws an affine map `(weight (fan_in, fan_out), bias (fan_out))` with
/// symmetric uniform fan-in scaling; bias starts at zero.
pub fn init_affine(
    rng: &mut impl rand::Rng,
    fan_in: usize,
    fan_out: usize,
) -> (Array2<f64>, Array1<f64>) {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
    (w, Array1::zeros(fan_out))
}

/// Embedding-table init: symmetric uniform scaled by 1/sqrt(width).
pub fn init_table(rng: &mut impl rand::Rng, rows: usize, width: usize) -> Array2<f64> {
    let bound = 1.0 / (width as f64).sqrt();
    Array2::from_shape_fn((rows, width), |_| rng.random_range(-bound..bound))
}
