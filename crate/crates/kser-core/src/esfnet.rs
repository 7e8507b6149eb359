//! Knowledge selection and filtering: a gate neural unit assigns every
//! knowledge chunk in every field an adaptive weight in `(0, kappa)` and the
//! knowledge matrix is rescaled chunk-wise.
//!
//! The gate input is the column-wise flattened knowledge matrix concatenated
//! with the feature embedding, where the feature-embedding component is
//! gradient-blocked: the gate can read the features but its loss contribution
//! never updates the parameters that produced them, so the filter operates
//! without affecting the gradient updates of the recommendation backbone.

use ndarray::{Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{KserError, Result};
use crate::knowledge::KnowledgeMatrix;
use crate::tensor::{init_affine, sigmoid_scalar, Graph, ParamId, ParamSet, Var};

/// Gate hyperparameters.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct EsfnetConfig {
    /// Number of chunks `C` each knowledge vector is partitioned into.
    pub chunks: usize,
    /// Scaling factor on the logistic output; weights live in `(0, kappa)`.
    pub kappa: f64,
    /// Hidden width of the gate unit; `None` picks `max(16, input / 4)`.
    pub gate_hidden: Option<usize>,
}

impl Default for EsfnetConfig {
    fn default() -> Self {
        Self {
            chunks: 4,
            kappa: 2.0,
            gate_hidden: None,
        }
    }
}

impl EsfnetConfig {
    pub fn resolve_hidden(&self, input_width: usize) -> usize {
        self.gate_hidden.unwrap_or_else(|| (input_width / 4).max(16))
    }

    pub fn validate(&self) -> Result<()> {
        if self.chunks == 0 {
            return Err(KserError::Config("esfnet.chunks must be positive".into()));
        }
        if !(self.kappa > 0.0) {
            return Err(KserError::Config("esfnet.kappa must be positive".into()));
        }
        Ok(())
    }
}

/// Plain-array gate parameters: two affine maps with a rectifier between and
/// a `kappa`-scaled logistic output reshaped to `C x L`.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub kappa: f64,
    pub chunks: usize,
    pub fields: usize,
}

impl GateParams {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        w1: Array2<f64>,
        b1: Array1<f64>,
        w2: Array2<f64>,
        b2: Array1<f64>,
        kappa: f64,
        chunks: usize,
        fields: usize,
    ) -> Result<Self> {
        if w1.ncols() != b1.len() || w1.ncols() != w2.nrows() {
            return Err(KserError::ShapeMismatch(
                "gate hidden widths disagree".into(),
            ));
        }
        if w2.ncols() != chunks * fields || b2.len() != chunks * fields {
            return Err(KserError::ShapeMismatch(format!(
                "gate output width {} must equal C*L = {}",
                w2.ncols(),
                chunks * fields
            )));
        }
        if !(kappa > 0.0) {
            return Err(KserError::RejectedInput("kappa must be positive".into()));
        }
        Ok(Self {
            w1,
            b1,
            w2,
            b2,
            kappa,
            chunks,
            fields,
        })
    }

    /// Fan-in-uniform first map; the second map and both biases start at
    /// zero so every weight opens at the neutral value `kappa / 2`, which is
    /// the identity filter at the default `kappa = 2`.
    pub fn init(
        rng: &mut impl rand::Rng,
        input_width: usize,
        hidden: usize,
        chunks: usize,
        fields: usize,
        kappa: f64,
    ) -> Self {
        let (w1, b1) = init_affine(rng, input_width, hidden);
        let w2 = Array2::zeros((hidden, chunks * fields));
        let b2 = Array1::zeros(chunks * fields);
        Self {
            w1,
            b1,
            w2,
            b2,
            kappa,
            chunks,
            fields,
        }
    }

    pub fn input_width(&self) -> usize {
        self.w1.nrows()
    }
}

/// The `C x L` chunk-weight matrix for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct GateWeights {
    values: Array2<f64>,
}

impl GateWeights {
    pub fn new(values: Array2<f64>) -> Self {
        Self { values }
    }

    pub fn chunks(&self) -> usize {
        self.values.nrows()
    }

    pub fn fields(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn get(&self, chunk: usize, field: usize) -> f64 {
        self.values[[chunk, field]]
    }
}

/// The rescaled knowledge matrix (`d_k x L`), same layout as its source.
#[derive(Clone, Debug, PartialEq)]
pub struct FilteredKnowledge {
    values: Array2<f64>,
}

impl FilteredKnowledge {
    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.values.nrows()
    }

    pub fn field_count(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        self.values.column(j).to_vec()
    }
}

/// Column-wise flattening of the knowledge matrix concatenated with the
/// feature embedding: field 0's `d_k` values, then field 1's, ..., then the
/// features. In the training graph the feature component is detached.
pub fn gate_input(k: &KnowledgeMatrix, feat_embed: &[f64]) -> Result<Vec<f64>> {
    if feat_embed.is_empty() {
        return Err(KserError::ShapeMismatch(
            "feature embedding must have at least one element".into(),
        ));
    }
    let mut out = Vec::with_capacity(k.dim() * k.field_count() + feat_embed.len());
    for j in 0..k.field_count() {
        for r in 0..k.dim() {
            out.push(k.values()[[r, j]] as f64);
        }
    }
    out.extend_from_slice(feat_embed);
    Ok(out)
}

/// Runs the gate neural unit on an assembled input vector:
/// `kappa * sigmoid(relu(z W1 + b1) W2 + b2)`, reshaped field-major to
/// `C x L` (all `C` chunks of field 0, then field 1, ...).
pub fn gate_weights(z: &[f64], params: &GateParams) -> Result<GateWeights> {
    if z.len() != params.input_width() {
        return Err(KserError::ShapeMismatch(format!(
            "gate input width {} but params expect {}",
            z.len(),
            params.input_width()
        )));
    }
    let zv = ArrayView1::from(z);
    let hidden = (zv.dot(&params.w1) + &params.b1).mapv(|x| x.max(0.0));
    let pre = hidden.dot(&params.w2) + &params.b2;
    let flat = pre.mapv(|x| params.kappa * sigmoid_scalar(x));
    let mut values = Array2::<f64>::zeros((params.chunks, params.fields));
    for f in 0..params.fields {
        for c in 0..params.chunks {
            values[[c, f]] = flat[f * params.chunks + c];
        }
    }
    Ok(GateWeights { values })
}

/// Rescales the knowledge matrix chunk-wise: all `s = d_k / C` elements of
/// chunk `(c, j)` share the single weight `w[c, j]`.
pub fn apply_weights(k: &KnowledgeMatrix, w: &GateWeights) -> Result<FilteredKnowledge> {
    let dk = k.dim();
    let l = k.field_count();
    if w.fields() != l {
        return Err(KserError::ShapeMismatch(format!(
            "weight matrix has {} fields, knowledge has {l}",
            w.fields()
        )));
    }
    if dk % w.chunks() != 0 {
        return Err(KserError::ShapeMismatch(format!(
            "chunk count {} must divide knowledge width {dk}",
            w.chunks()
        )));
    }
    let s = dk / w.chunks();
    let mut values = Array2::<f64>::zeros((dk, l));
    for j in 0..l {
        for r in 0..dk {
            values[[r, j]] = k.values()[[r, j]] as f64 * w.get(r / s, j);
        }
    }
    Ok(FilteredKnowledge { values })
}

/// Full selection pass: gate input, gate weights, chunk-wise rescale. The
/// weights are returned alongside the filtered knowledge for diagnostics.
pub fn esfnet_forward(
    k: &KnowledgeMatrix,
    feat_embed: &[f64],
    params: &GateParams,
) -> Result<(FilteredKnowledge, GateWeights)> {
    let z = gate_input(k, feat_embed)?;
    let w = gate_weights(&z, params)?;
    let filtered = apply_weights(k, &w)?;
    Ok((filtered, w))
}

/// Graph-backed gate for batched training. Parameters live in a [`ParamSet`];
/// the forward mirrors the pure ops above over a `[B, L, d_k]` knowledge
/// tensor (field-major rows).
#[derive(Clone, Debug)]
pub struct GateUnit {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub kappa: f64,
    pub chunks: usize,
    pub fields: usize,
    pub input_width: usize,
    pub hidden: usize,
}

/// Batched gate outputs: filtered knowledge `[B, L, d_k]` and the weight
/// tensor `[B, L, C]` kept for diagnostics.
pub struct GateForward {
    pub filtered: Var,
    pub weights: Var,
}

impl GateUnit {
    pub fn new(
        pset: &mut ParamSet,
        prefix: &str,
        cfg: &EsfnetConfig,
        knowledge_dim: usize,
        fields: usize,
        feat_width: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        cfg.validate()?;
        if knowledge_dim % cfg.chunks != 0 {
            return Err(KserError::Config(format!(
                "the knowledge representation dimension d_k = {knowledge_dim} must be divisible by the number of chunks C = {}",
                cfg.chunks
            )));
        }
        let input_width = knowledge_dim * fields + feat_width;
        let hidden = cfg.resolve_hidden(input_width);
        let params = GateParams::init(rng, input_width, hidden, cfg.chunks, fields, cfg.kappa);
        Ok(Self {
            w1: pset.add(format!("{prefix}.w1"), params.w1.into_dyn(), true),
            b1: pset.add(format!("{prefix}.b1"), params.b1.into_dyn(), true),
            w2: pset.add(format!("{prefix}.w2"), params.w2.into_dyn(), true),
            b2: pset.add(format!("{prefix}.b2"), params.b2.into_dyn(), true),
            kappa: cfg.kappa,
            chunks: cfg.chunks,
            fields,
            input_width,
            hidden,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// `knowledge` is `[B, L, d_k]`, `feat` is `[B, d_e]`. The feature leg is
    /// detached before entering the gate.
    pub fn forward(
        &self,
        g: &mut Graph,
        pset: &ParamSet,
        knowledge: Var,
        feat: Var,
    ) -> GateForward {
        let kshape = g.value(knowledge).shape().to_vec();
        let (bs, l, dk) = (kshape[0], kshape[1], kshape[2]);
        debug_assert_eq!(l, self.fields);

        let vec_k = g.reshape(knowledge, &[bs, l * dk]);
        let feat_blocked = g.detach(feat);
        let z = g.concat_last(&[vec_k, feat_blocked]);

        let w1 = g.param(pset, self.w1);
        let b1 = g.param(pset, self.b1);
        let w2 = g.param(pset, self.w2);
        let b2 = g.param(pset, self.b2);

        let h = g.matmul_last(z, w1);
        let h = g.add_bias(h, b1);
        let h = g.relu(h);
        let pre = g.matmul_last(h, w2);
        let pre = g.add_bias(pre, b2);
        let sig = g.sigmoid(pre);
        let flat = g.scale(sig, self.kappa);
        // row-major [B, L, C] matches the field-major gate output order
        let weights = g.reshape(flat, &[bs, l, self.chunks]);
        let filtered = g.chunk_scale(knowledge, weights);
        GateForward { filtered, weights }
    }

    /// Copies the current parameter values out as plain-array [`GateParams`].
    pub fn snapshot(&self, pset: &ParamSet) -> GateParams {
        GateParams {
            w1: pset
                .value(self.w1)
                .clone()
                .into_dimensionality()
                .expect("w1 rank"),
            b1: pset
                .value(self.b1)
                .clone()
                .into_dimensionality()
                .expect("b1 rank"),
            w2: pset
                .value(self.w2)
                .clone()
                .into_dimensionality()
                .expect("w2 rank"),
            b2: pset
                .value(self.b2)
                .clone()
                .into_dimensionality()
                .expect("b2 rank"),
            kappa: self.kappa,
            chunks: self.chunks,
            fields: self.fields,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{arr1, arr2, ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn km(values: Array2<f32>) -> KnowledgeMatrix {
        KnowledgeMatrix::new(values).unwrap()
    }

    fn zero_params(input: usize, hidden: usize, c: usize, l: usize, kappa: f64) -> GateParams {
        GateParams::new(
            Array2::zeros((input, hidden)),
            Array1::zeros(hidden),
            Array2::zeros((hidden, c * l)),
            Array1::zeros(c * l),
            kappa,
            c,
            l,
        )
        .unwrap()
    }

    #[test]
    fn gate_input_flattens_columns_then_features() {
        // d_k = 2, L = 2: columns are [1,2] and [3,4]
        let k = km(arr2(&[[1.0, 3.0], [2.0, 4.0]]));
        let z = gate_input(&k, &[9.0]).unwrap();
        assert_eq!(z, vec![1.0, 2.0, 3.0, 4.0, 9.0]);
    }

    #[test]
    fn gate_input_rejects_empty_features() {
        let k = km(arr2(&[[1.0], [2.0]]));
        assert!(gate_input(&k, &[]).is_err());
    }

    #[test]
    fn zero_params_give_neutral_weights() {
        let p = zero_params(5, 3, 2, 2, 2.0);
        let w = gate_weights(&[1.0, -2.0, 0.5, 0.0, 3.0], &p).unwrap();
        for v in w.values().iter() {
            assert_eq!(*v, 1.0, "2 * sigmoid(0) must be exactly 1");
        }
    }

    #[test]
    fn large_bias_saturates_toward_kappa() {
        let mut p = zero_params(3, 2, 2, 1, 2.0);
        p.b2.fill(30.0);
        let w = gate_weights(&[0.0, 0.0, 0.0], &p).unwrap();
        for v in w.values().iter() {
            assert!(*v > 1.999_999 && *v <= 2.0);
        }
    }

    #[test]
    fn gate_weights_match_scalar_oracle() {
        // fixed 2-input toy: hidden 2, C = 2, L = 1
        let p = GateParams::new(
            arr2(&[[0.5, -1.0], [0.25, 0.75]]),
            arr1(&[0.1, -0.2]),
            arr2(&[[1.0, -0.5], [0.5, 2.0]]),
            arr1(&[0.0, 0.3]),
            2.0,
            2,
            1,
        )
        .unwrap();
        let z = [1.0, -1.0];
        // oracle: scalar arithmetic, written independently of the impl path
        let h0 = (1.0f64 * 0.5 + (-1.0) * 0.25 + 0.1).max(0.0);
        let h1 = (1.0f64 * (-1.0) + (-1.0) * 0.75 + (-0.2)).max(0.0);
        let pre0 = h0 * 1.0 + h1 * 0.5 + 0.0;
        let pre1 = h0 * (-0.5) + h1 * 2.0 + 0.3;
        let expect0 = 2.0 / (1.0 + (-pre0).exp());
        let expect1 = 2.0 / (1.0 + (-pre1).exp());
        let w = gate_weights(&z, &p).unwrap();
        assert!((w.get(0, 0) - expect0).abs() < 1e-15);
        assert!((w.get(1, 0) - expect1).abs() < 1e-15);
    }

    #[test]
    fn gate_weights_reject_wrong_width() {
        let p = zero_params(4, 2, 2, 1, 2.0);
        assert!(gate_weights(&[1.0, 2.0], &p).is_err());
    }

    #[test]
    fn unit_weights_leave_knowledge_unchanged() {
        let k = km(arr2(&[[1.5, -3.0], [0.25, 8.0], [2.0, -1.0], [4.0, 0.5]]));
        let w = GateWeights::new(Array2::ones((2, 2)));
        let out = apply_weights(&k, &w).unwrap();
        for j in 0..2 {
            for r in 0..4 {
                assert_eq!(out.values()[[r, j]], k.values()[[r, j]] as f64);
            }
        }
    }

    #[test]
    fn chunk_weights_scale_contiguous_slices() {
        let k = km(arr2(&[[1.0], [2.0], [3.0], [4.0]]));
        let w = GateWeights::new(arr2(&[[2.0], [0.0]]));
        let out = apply_weights(&k, &w).unwrap();
        assert_eq!(out.column(0), vec![2.0, 4.0, 0.0, 0.0]);
    }

    #[test]
    fn apply_weights_matches_elementwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = km(Array2::from_shape_fn((6, 2), |_| rng.random_range(-2.0..2.0)));
        let w = GateWeights::new(Array2::from_shape_fn((3, 2), |_| rng.random_range(0.0..2.0)));
        let out = apply_weights(&k, &w).unwrap();
        let s = 2; // 6 / 3
        for j in 0..2 {
            for r in 0..6 {
                let expect = k.values()[[r, j]] as f64 * w.get(r / s, j);
                assert_eq!(out.values()[[r, j]], expect);
            }
        }
    }

    #[test]
    fn forward_with_zero_init_is_identity_filter() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = GateParams::init(&mut rng, 2 * 4 + 3, 16, 2, 2, 2.0);
        let k = km(Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0)));
        let (filtered, w) = esfnet_forward(&k, &[0.3, -0.4, 1.0], &p).unwrap();
        for v in w.values().iter() {
            assert_eq!(*v, 1.0);
        }
        for j in 0..2 {
            for r in 0..4 {
                assert_eq!(filtered.values()[[r, j]], k.values()[[r, j]] as f64);
            }
        }
    }

    fn batched_knowledge(k: &KnowledgeMatrix) -> ArrayD<f64> {
        let rows = k.to_field_rows_f64();
        let (l, dk) = rows.dim();
        rows.into_shape_with_order(IxDyn(&[1, l, dk]))
            .unwrap()
            .into_dyn()
    }

    #[test]
    fn graph_forward_matches_pure_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let cfg = EsfnetConfig {
            chunks: 3,
            kappa: 2.0,
            gate_hidden: Some(8),
        };
        for _ in 0..20 {
            let mut pset = ParamSet::new();
            let unit = GateUnit::new(&mut pset, "gate", &cfg, 6, 2, 4, &mut rng).unwrap();
            // nonzero second map so the comparison is not trivially neutral
            *pset.value_mut(unit.w2) =
                ArrayD::from_shape_fn(IxDyn(&[8, 6]), |_| rng.random_range(-0.5..0.5));
            let k = km(Array2::from_shape_fn((6, 2), |_| rng.random_range(-1.0..1.0)));
            let feat: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();

            let (pure_f, pure_w) = esfnet_forward(&k, &feat, &unit.snapshot(&pset)).unwrap();

            let mut g = Graph::new();
            let kv = g.constant(batched_knowledge(&k));
            let fv = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, 4]), feat.clone()).unwrap());
            let out = unit.forward(&mut g, &pset, kv, fv);
            let wv = g.value(out.weights);
            let filt = g.value(out.filtered);
            for f in 0..2 {
                for c in 0..3 {
                    assert!((wv[[0, f, c]] - pure_w.get(c, f)).abs() < 1e-12);
                }
                for r in 0..6 {
                    assert!((filt[[0, f, r]] - pure_f.values()[[r, f]]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn gate_path_blocks_gradient_into_feature_parameters() {
        // features come from a parameter; loss depends on them only through
        // the gate input, so their gradient must be exactly zero
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cfg = EsfnetConfig {
            chunks: 2,
            kappa: 2.0,
            gate_hidden: Some(4),
        };
        let mut pset = ParamSet::new();
        let unit = GateUnit::new(&mut pset, "gate", &cfg, 4, 1, 3, &mut rng).unwrap();
        *pset.value_mut(unit.w2) =
            ArrayD::from_shape_fn(IxDyn(&[4, 2]), |_| rng.random_range(-0.5..0.5));
        let feat_param = pset.add(
            "feat",
            ArrayD::from_shape_fn(IxDyn(&[1, 3]), |_| rng.random_range(-1.0..1.0)),
            true,
        );

        let mut g = Graph::new();
        let k = g.constant(ArrayD::from_shape_fn(IxDyn(&[1, 1, 4]), |_| {
            rng.random_range(-1.0..1.0)
        }));
        let feat = g.param(&pset, feat_param);
        let out = unit.forward(&mut g, &pset, k, feat);
        let loss = g.sum_all(out.filtered);
        let grads = g.backward(loss);
        assert!(
            grads.get(&feat_param).is_none(),
            "gate path must not reach feature parameters"
        );
        // while the gate's own parameters do learn
        assert!(grads.contains_key(&unit.w2));
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let cfg = EsfnetConfig {
            chunks: 2,
            kappa: 2.0,
            gate_hidden: Some(5),
        };
        let mut pset = ParamSet::new();
        let unit = GateUnit::new(&mut pset, "gate", &cfg, 4, 2, 3, &mut rng).unwrap();
        *pset.value_mut(unit.w2) =
            ArrayD::from_shape_fn(IxDyn(&[5, 4]), |_| rng.random_range(-0.5..0.5));
        let kdata = ArrayD::from_shape_fn(IxDyn(&[2, 2, 4]), |_| rng.random_range(-1.0..1.0));
        let fdata = ArrayD::from_shape_fn(IxDyn(&[2, 3]), |_| rng.random_range(-1.0..1.0));

        let eval = |pset: &ParamSet| -> f64 {
            let mut g = Graph::new();
            let k = g.constant(kdata.clone());
            let f = g.constant(fdata.clone());
            let out = unit.forward(&mut g, pset, k, f);
            let sq = g.mul(out.filtered, out.filtered);
            let loss = g.sum_all(sq);
            g.value(loss)[[0]]
        };

        let mut g = Graph::new();
        let k = g.constant(kdata.clone());
        let f = g.constant(fdata.clone());
        let out = unit.forward(&mut g, &pset, k, f);
        let sq = g.mul(out.filtered, out.filtered);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);

        let h = 1e-5;
        for id in unit.param_ids() {
            let n = pset.value(id).len();
            for j in 0..n {
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
    fn weights_monotone_in_output_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let mut p = GateParams::init(&mut rng, 6, 4, 2, 2, 2.0);
        p.w2 = Array2::from_shape_fn((4, 4), |_| rng.random_range(-1.0..1.0));
        let z: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let before = gate_weights(&z, &p).unwrap();
        for idx in 0..4 {
            let mut bumped = p.clone();
            bumped.b2[idx] += 0.5;
            let after = gate_weights(&z, &bumped).unwrap();
            let (c, f) = (idx % 2, idx / 2);
            assert!(after.get(c, f) >= before.get(c, f));
        }
    }
}
