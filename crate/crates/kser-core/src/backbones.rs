//! Feature embedding layer, discriminative backbones (MLP, DeepFM-lite,
//! DIN-lite), the trunk decomposition `full = head . trunk . embed`, the
//! knowledge-augmented prediction head, and checkpoint I/O.
//!
//! Backbones live behind [`BackboneKind`]; adding one means adding a trunk
//! builder here, the strategies and the extractor are agnostic to it.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::error::{KserError, Result};
use crate::esa::{EsaConfig, EsaModule, QuerySource};
use crate::esfnet::{EsfnetConfig, GateUnit};
use crate::knowledge::{KnowledgePack, MissingKey};
use crate::schema::{FeatureSchema, FieldKind, Sample};
use crate::tensor::{init_affine, init_table, sigmoid_scalar, Graph, ParamId, ParamSet, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    Mlp,
    DeepfmLite,
    DinLite,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Base,
    AllParams,
    ExtractorOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    None,
    /// Bypass the selection gate; knowledge flows through unfiltered.
    NoEsfnet,
    /// Replace the alignment module with one dense projection to the same
    /// output width, so head shapes stay identical across variants.
    NoEsa,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct ModelConfig {
    pub backbone: BackboneKind,
    pub hidden: Vec<usize>,
    pub field_width: usize,
    /// Hidden width of the DIN-lite attention scorer.
    pub attention_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            backbone: BackboneKind::Mlp,
            hidden: vec![128, 64],
            field_width: 8,
            attention_hidden: 16,
        }
    }
}

/// One encoded minibatch: token indices, history grid with pad mask, labels,
/// and the assembled knowledge tensor when a pack is attached.
pub struct Batch {
    pub size: usize,
    /// Per schema field; the sequence field's slot is empty.
    pub field_ids: Vec<Vec<usize>>,
    /// Flattened `[B * H]` history indices.
    pub hist_ids: Vec<usize>,
    pub hist_mask: Array2<f64>,
    pub h_max: usize,
    pub labels: Array1<f64>,
    /// `[B, L, d_k]` field-major knowledge rows.
    pub knowledge: Option<ArrayD<f64>>,
    /// Per-sample any-field-missing flags from assembly.
    pub knowledge_missing: Vec<bool>,
    pub sample_ids: Vec<String>,
}

enum FieldBinding {
    User,
    Item,
    Context(usize),
    History,
}

fn bind_fields(schema: &FeatureSchema) -> Vec<FieldBinding> {
    let mut ctx = 0;
    schema
        .fields()
        .iter()
        .map(|f| {
            if f.kind == FieldKind::ItemSequence {
                FieldBinding::History
            } else if f.name == "user_id" {
                FieldBinding::User
            } else if f.name == "item_id" {
                FieldBinding::Item
            } else {
                let b = FieldBinding::Context(ctx);
                ctx += 1;
                b
            }
        })
        .collect()
}

/// Encodes samples against a schema (train-frozen vocabularies; unknown
/// tokens map to each field's OOV slot) and assembles their knowledge rows.
pub fn encode_batch(
    samples: &[&Sample],
    schema: &FeatureSchema,
    h_max: usize,
    pack: Option<(&KnowledgePack, MissingKey)>,
) -> Result<Batch> {
    let bindings = bind_fields(schema);
    let bs = samples.len();
    let (seq_idx, seq_spec) = schema.sequence_field();

    let mut field_ids: Vec<Vec<usize>> = schema.fields().iter().map(|_| Vec::new()).collect();
    for (fi, (spec, bind)) in schema.fields().iter().zip(&bindings).enumerate() {
        if fi == seq_idx {
            continue;
        }
        let ids = &mut field_ids[fi];
        ids.reserve(bs);
        for s in samples {
            let token = match bind {
                FieldBinding::User => s.user_id.as_str(),
                FieldBinding::Item => s.item_id.as_str(),
                FieldBinding::Context(c) => {
                    s.context.get(*c).map(|t| t.as_str()).ok_or_else(|| {
                        KserError::Schema(format!(
                            "sample {} lacks context field {}",
                            s.id, spec.name
                        ))
                    })?
                }
                FieldBinding::History => unreachable!(),
            };
            ids.push(spec.vocab.encode(token));
        }
    }

    let mut hist_ids = Vec::with_capacity(bs * h_max);
    let mut hist_mask = Array2::<f64>::zeros((bs, h_max));
    for (b, s) in samples.iter().enumerate() {
        let hist = &s.history;
        let take = hist.len().min(h_max);
        let tail = &hist[hist.len() - take..];
        for t in 0..h_max {
            let token = if t < h_max - take {
                crate::schema::PAD_TOKEN
            } else {
                tail[t - (h_max - take)].as_str()
            };
            let idx = seq_spec.vocab.encode(token);
            hist_ids.push(idx);
            if token != crate::schema::PAD_TOKEN {
                hist_mask[[b, t]] = 1.0;
            }
        }
    }

    let labels = Array1::from_iter(samples.iter().map(|s| s.label as f64));

    let (knowledge, knowledge_missing) = match pack {
        Some((pack, mode)) => {
            let (l, dk) = (pack.field_count(), pack.dim());
            let mut arr = ArrayD::<f64>::zeros(IxDyn(&[bs, l, dk]));
            let mut missing = vec![false; bs];
            for (b, s) in samples.iter().enumerate() {
                let (k, flags) = crate::knowledge::assemble_knowledge(s, pack, mode)?;
                missing[b] = flags.iter().any(|f| *f);
                for j in 0..l {
                    for r in 0..dk {
                        arr[[b, j, r]] = k.values()[[r, j]] as f64;
                    }
                }
            }
            (Some(arr), missing)
        }
        None => (None, vec![false; bs]),
    };

    Ok(Batch {
        size: bs,
        field_ids,
        hist_ids,
        hist_mask,
        h_max,
        labels,
        knowledge,
        knowledge_missing,
        sample_ids: samples.iter().map(|s| s.id.clone()).collect(),
    })
}

/// How the sequence field is pooled into the feature embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeqPooling {
    Mean,
    /// DIN-style target attention over history positions.
    TargetAttention,
}

#[derive(Clone, Debug)]
struct AttnPoolIds {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Per-field embedding tables plus the sequence-pooling rule. The pad row of
/// the sequence table is zero and never receives gradient (masked out of
/// every pooling path), so the pad token always embeds to the zero vector.
#[derive(Clone, Debug)]
pub struct EmbeddingLayer {
    tables: Vec<ParamId>,
    pub widths: Vec<usize>,
    pub seq_field: usize,
    pub item_field: usize,
    pub pooling: SeqPooling,
    att: Option<AttnPoolIds>,
    pub total_width: usize,
}

/// Batched embedding outputs; the raw history grid and target-item embedding
/// feed the alignment query and DIN pooling.
pub struct EmbedOutput {
    pub flat: Var,
    pub per_field: Vec<Var>,
    pub hist_seq: Var,
    pub hist_mask: Array2<f64>,
    pub item: Var,
    /// DIN pooling weights `[B, H]`, present under target attention.
    pub hist_attn: Option<Var>,
}

impl EmbeddingLayer {
    pub fn new(
        pset: &mut ParamSet,
        prefix: &str,
        schema: &FeatureSchema,
        pooling: SeqPooling,
        attention_hidden: usize,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let (seq_field, seq_spec) = schema.sequence_field();
        let item_field = schema
            .field("item_id")
            .map(|(i, _)| i)
            .ok_or_else(|| KserError::Schema("schema needs an 'item_id' field".into()))?;
        let mut tables = Vec::new();
        let mut widths = Vec::new();
        for f in schema.fields() {
            let mut table = init_table(rng, f.vocab.table_rows(), f.embed_width);
            table.row_mut(f.vocab.pad_index()).fill(0.0);
            tables.push(pset.add(format!("{prefix}.{}", f.name), table.into_dyn(), true));
            widths.push(f.embed_width);
        }
        let att = match pooling {
            SeqPooling::Mean => None,
            SeqPooling::TargetAttention => {
                let w_seq = seq_spec.embed_width;
                let w_item = schema.fields()[item_field].embed_width;
                if w_seq != w_item {
                    return Err(KserError::Schema(format!(
                        "target attention needs matching history/item widths, got {w_seq} and {w_item}"
                    )));
                }
                let (w1, b1) = init_affine(rng, 4 * w_seq, attention_hidden);
                let (w2, b2) = init_affine(rng, attention_hidden, 1);
                Some(AttnPoolIds {
                    w1: pset.add(format!("{prefix}.attn.w1"), w1.into_dyn(), true),
                    b1: pset.add(format!("{prefix}.attn.b1"), b1.into_dyn(), true),
                    w2: pset.add(format!("{prefix}.attn.w2"), w2.into_dyn(), true),
                    b2: pset.add(format!("{prefix}.attn.b2"), b2.into_dyn(), true),
                })
            }
        };
        Ok(Self {
            tables,
            widths: widths.clone(),
            seq_field,
            item_field,
            pooling,
            att,
            total_width: widths.iter().sum(),
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.tables.clone();
        if let Some(a) = &self.att {
            ids.extend([a.w1, a.b1, a.w2, a.b2]);
        }
        ids
    }

    pub fn forward(&self, g: &mut Graph, pset: &ParamSet, batch: &Batch) -> EmbedOutput {
        let bs = batch.size;
        let h = batch.h_max;
        let w_seq = self.widths[self.seq_field];

        let seq_table = g.param(pset, self.tables[self.seq_field]);
        let hist_flat = g.gather_rows(seq_table, &batch.hist_ids);
        let hist_seq = g.reshape(hist_flat, &[bs, h, w_seq]);

        let mut per_field: Vec<Var> = Vec::with_capacity(self.tables.len());
        let mut item = None;
        for (fi, table_id) in self.tables.iter().enumerate() {
            if fi == self.seq_field {
                per_field.push(hist_seq); // placeholder, replaced below
                continue;
            }
            let table = g.param(pset, *table_id);
            let emb = g.gather_rows(table, &batch.field_ids[fi]);
            if fi == self.item_field {
                item = Some(emb);
            }
            per_field.push(emb);
        }
        let item = item.expect("item field embedded");

        let mut hist_attn = None;
        let pooled = match self.pooling {
            SeqPooling::Mean => g.masked_mean_axis1(hist_seq, &batch.hist_mask),
            SeqPooling::TargetAttention => {
                let (pooled, attn) =
                    self.target_attention(g, pset, hist_seq, item, &batch.hist_mask, bs, h, w_seq);
                hist_attn = Some(attn);
                pooled
            }
        };
        per_field[self.seq_field] = pooled;

        let flat = g.concat_last(&per_field);
        EmbedOutput {
            flat,
            per_field,
            hist_seq,
            hist_mask: batch.hist_mask.clone(),
            item,
            hist_attn,
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn target_attention(
        &self,
        g: &mut Graph,
        pset: &ParamSet,
        hist_seq: Var,
        item: Var,
        mask: &Array2<f64>,
        bs: usize,
        h: usize,
        w: usize,
    ) -> (Var, Var) {
        let a = self.att.as_ref().expect("attention params");
        let target = g.expand_axis1(item, h); // [B, H, w]
        let prod = g.mul(hist_seq, target);
        let diff = g.sub(hist_seq, target);
        let feat = g.concat_last(&[hist_seq, target, prod, diff]); // [B, H, 4w]
        let w1 = g.param(pset, a.w1);
        let b1 = g.param(pset, a.b1);
        let w2 = g.param(pset, a.w2);
        let b2 = g.param(pset, a.b2);
        let s1 = g.matmul_last(feat, w1);
        let s1 = g.add_bias(s1, b1);
        let s1 = g.relu(s1);
        let s2 = g.matmul_last(s1, w2);
        let s2 = g.add_bias(s2, b2); // [B, H, 1]
        let logits = g.reshape(s2, &[bs, h]);
        let attn = g.masked_softmax_last(logits, &mask.clone().into_dyn());
        let attn3 = g.reshape(attn, &[bs, 1, h]);
        let pooled = g.bmm(attn3, hist_seq); // [B, 1, w]
        (g.reshape(pooled, &[bs, w]), attn)
    }

    /// Single-sample embedding: the flat vector plus the raw pieces.
    pub fn embed_value(
        &self,
        pset: &ParamSet,
        schema: &FeatureSchema,
        sample: &Sample,
        h_max: usize,
    ) -> Result<EmbedValue> {
        let batch = encode_batch(&[sample], schema, h_max, None)?;
        let mut g = Graph::new();
        let out = self.forward(&mut g, pset, &batch);
        let flat = g.value(out.flat).as_slice().unwrap().to_vec();
        let per_field = out
            .per_field
            .iter()
            .map(|v| g.value(*v).as_slice().unwrap().to_vec())
            .collect();
        let hist = g
            .value(out.hist_seq)
            .clone()
            .into_shape_with_order((h_max, self.widths[self.seq_field]))
            .unwrap();
        let item = g.value(out.item).as_slice().unwrap().to_vec();
        let mask = (0..h_max).map(|t| batch.hist_mask[[0, t]] != 0.0).collect();
        Ok(EmbedValue {
            flat,
            per_field,
            history: hist,
            mask,
            item,
        })
    }
}

/// Plain-array single-sample embedding output.
pub struct EmbedValue {
    pub flat: Vec<f64>,
    pub per_field: Vec<Vec<f64>>,
    pub history: Array2<f64>,
    pub mask: Vec<bool>,
    pub item: Vec<f64>,
}

/// Trunk plus base output head. The trunk is everything between the
/// embedding layer and the final affine, so `full = head . trunk` holds
/// structurally.
#[derive(Clone, Debug)]
pub struct BackboneModel {
    pub kind: BackboneKind,
    pub input_width: usize,
    layers: Vec<(ParamId, ParamId)>,
    pub head_w: ParamId,
    pub head_b: ParamId,
    /// DeepFM second-order slices `(start, end)` within the input vector.
    fm_slices: Option<Vec<(usize, usize)>>,
    pub trunk_out_width: usize,
}

impl BackboneModel {
    pub fn new(
        pset: &mut ParamSet,
        prefix: &str,
        kind: BackboneKind,
        input_width: usize,
        hidden: &[usize],
        fm_slices: Option<Vec<(usize, usize)>>,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        if hidden.is_empty() {
            return Err(KserError::Config("backbone needs at least one hidden layer".into()));
        }
        if kind == BackboneKind::DeepfmLite {
            let slices = fm_slices.as_ref().ok_or_else(|| {
                KserError::Config("deepfm_lite needs factorization slices".into())
            })?;
            let mut width = None;
            for (s, e) in slices {
                if *e > input_width || s >= e {
                    return Err(KserError::Config("factorization slice out of range".into()));
                }
                let w = e - s;
                if *width.get_or_insert(w) != w {
                    return Err(KserError::Config(
                        "factorization slices must share one width".into(),
                    ));
                }
            }
        }
        let mut layers = Vec::new();
        let mut prev = input_width;
        for (i, width) in hidden.iter().enumerate() {
            let (w, b) = init_affine(rng, prev, *width);
            layers.push((
                pset.add(format!("{prefix}.l{i}.w"), w.into_dyn(), true),
                pset.add(format!("{prefix}.l{i}.b"), b.into_dyn(), true),
            ));
            prev = *width;
        }
        let trunk_out_width = prev + usize::from(kind == BackboneKind::DeepfmLite);
        let (hw, hb) = init_affine(rng, trunk_out_width, 1);
        Ok(Self {
            kind,
            input_width,
            layers,
            head_w: pset.add(format!("{prefix}.head.w"), hw.into_dyn(), true),
            head_b: pset.add(format!("{prefix}.head.b"), hb.into_dyn(), true),
            fm_slices: if kind == BackboneKind::DeepfmLite {
                fm_slices
            } else {
                None
            },
            trunk_out_width,
        })
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|(w, b)| [*w, *b]).collect()
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        vec![self.head_w, self.head_b]
    }

    /// Hidden representation `[B, trunk_out_width]`.
    pub fn forward_trunk(&self, g: &mut Graph, pset: &ParamSet, input: Var) -> Var {
        assert_eq!(
            *g.value(input).shape().last().unwrap(),
            self.input_width,
            "trunk input width"
        );
        let mut h = input;
        for (w, b) in &self.layers {
            let wv = g.param(pset, *w);
            let bv = g.param(pset, *b);
            h = g.matmul_last(h, wv);
            h = g.add_bias(h, bv);
            h = g.relu(h);
        }
        if let Some(slices) = &self.fm_slices {
            let fm = self.fm_term(g, input, slices);
            h = g.concat_last(&[h, fm]);
        }
        h
    }

    /// Factorization-machine second-order interaction as one scalar:
    /// `0.5 * sum_d [ (sum_f v_fd)^2 - sum_f v_fd^2 ]`.
    fn fm_term(&self, g: &mut Graph, input: Var, slices: &[(usize, usize)]) -> Var {
        let mut sum: Option<Var> = None;
        let mut sum_sq: Option<Var> = None;
        for (s, e) in slices {
            let v = g.slice_last(input, *s, *e);
            let v2 = g.mul(v, v);
            sum = Some(match sum {
                Some(acc) => g.add(acc, v),
                None => v,
            });
            sum_sq = Some(match sum_sq {
                Some(acc) => g.add(acc, v2),
                None => v2,
            });
        }
        let sum = sum.expect("at least one slice");
        let sum_sq = sum_sq.expect("at least one slice");
        let square_of_sum = g.mul(sum, sum);
        let diff = g.sub(square_of_sum, sum_sq);
        let half = g.scale(diff, 0.5);
        g.sum_last_keep(half) // [B, 1]
    }

    /// Base output layer on the trunk representation; returns logits `[B]`.
    pub fn head(&self, g: &mut Graph, pset: &ParamSet, trunk_out: Var) -> Var {
        let w = g.param(pset, self.head_w);
        let b = g.param(pset, self.head_b);
        let logits = g.matmul_last(trunk_out, w);
        let logits = g.add_bias(logits, b);
        let bs = g.value(logits).shape()[0];
        g.reshape(logits, &[bs])
    }

    /// Whole-model logits `[B]` on an embedded (possibly augmented) input.
    pub fn forward_full(&self, g: &mut Graph, pset: &ParamSet, input: Var) -> Var {
        let t = self.forward_trunk(g, pset, input);
        self.head(g, pset, t)
    }

    /// Single-input probability, `logistic(head(trunk(e)))`.
    pub fn forward_full_value(&self, pset: &ParamSet, e: &[f64]) -> Result<f64> {
        if e.len() != self.input_width {
            return Err(KserError::ShapeMismatch(format!(
                "input width {} but model expects {}",
                e.len(),
                self.input_width
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, e.len()]), e.to_vec()).unwrap());
        let logits = self.forward_full(&mut g, pset, x);
        Ok(sigmoid_scalar(g.value(logits)[[0]]))
    }

    /// Single-input trunk representation.
    pub fn forward_trunk_value(&self, pset: &ParamSet, e: &[f64]) -> Result<Vec<f64>> {
        if e.len() != self.input_width {
            return Err(KserError::ShapeMismatch(format!(
                "input width {} but model expects {}",
                e.len(),
                self.input_width
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(ArrayD::from_shape_vec(IxDyn(&[1, e.len()]), e.to_vec()).unwrap());
        let t = self.forward_trunk(&mut g, pset, x);
        Ok(g.value(t).as_slice().unwrap().to_vec())
    }
}

/// The knowledge-augmented output layer: one affine over
/// `vec(o) (+) trunk(E(x))` followed by the logistic activation.
#[derive(Clone, Debug)]
pub struct PredictionHead {
    pub w: ParamId,
    pub b: ParamId,
    pub knowledge_width: usize,
    pub trunk_width: usize,
}

impl PredictionHead {
    /// Warm start: the trunk slice of the weight comes from the base head,
    /// the new knowledge slice starts at zero, so step 0 reproduces the base
    /// model's predictions exactly.
    pub fn new(
        pset: &mut ParamSet,
        prefix: &str,
        knowledge_width: usize,
        trunk_width: usize,
        warm: Option<(&ArrayD<f64>, &ArrayD<f64>)>,
    ) -> Self {
        let mut w = Array2::<f64>::zeros((knowledge_width + trunk_width, 1));
        let mut b = Array1::<f64>::zeros(1);
        if let Some((base_w, base_b)) = warm {
            for r in 0..trunk_width {
                w[[knowledge_width + r, 0]] = base_w[[r, 0]];
            }
            b[0] = base_b[[0]];
        }
        Self {
            w: pset.add(format!("{prefix}.w"), w.into_dyn(), true),
            b: pset.add(format!("{prefix}.b"), b.into_dyn(), true),
            knowledge_width,
            trunk_width,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.w, self.b]
    }

    /// Logits `[B]` from `concat(o_flat, trunk_out)` in that order.
    pub fn forward(&self, g: &mut Graph, pset: &ParamSet, o_flat: Var, trunk_out: Var) -> Var {
        let joined = g.concat_last(&[o_flat, trunk_out]);
        let w = g.param(pset, self.w);
        let b = g.param(pset, self.b);
        let logits = g.matmul_last(joined, w);
        let logits = g.add_bias(logits, b);
        let bs = g.value(logits).shape()[0];
        g.reshape(logits, &[bs])
    }

    /// Single-sample probability.
    pub fn value(&self, pset: &ParamSet, o_flat: &[f64], trunk_out: &[f64]) -> Result<f64> {
        if o_flat.len() != self.knowledge_width || trunk_out.len() != self.trunk_width {
            return Err(KserError::ShapeMismatch(format!(
                "head expects widths ({}, {}), got ({}, {})",
                self.knowledge_width,
                self.trunk_width,
                o_flat.len(),
                trunk_out.len()
            )));
        }
        let mut g = Graph::new();
        let o = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, o_flat.len()]), o_flat.to_vec()).unwrap(),
        );
        let t = g.constant(
            ArrayD::from_shape_vec(IxDyn(&[1, trunk_out.len()]), trunk_out.to_vec()).unwrap(),
        );
        let logits = self.forward(&mut g, pset, o, t);
        Ok(sigmoid_scalar(g.value(logits)[[0]]))
    }
}

/// Everything needed to rebuild a model bundle deterministically.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BundleSpec {
    pub model: ModelConfig,
    pub strategy: Strategy,
    pub ablation: Ablation,
    pub esfnet: EsfnetConfig,
    pub esa: EsaConfig,
    pub h_max: usize,
    pub knowledge_dim: usize,
    pub knowledge_fields: usize,
}

/// A complete model: embedding layer, backbone, and (for the knowledge
/// strategies) the extractor and its prediction head, all parameterized in
/// one [`ParamSet`].
#[derive(Debug)]
pub struct ModelBundle {
    pub spec: BundleSpec,
    pub schema: FeatureSchema,
    pub embedding: EmbeddingLayer,
    pub backbone: BackboneModel,
    pub gate: Option<GateUnit>,
    pub esa: Option<EsaModule>,
    /// `no_esa` replacement: one affine from flattened knowledge.
    pub knowledge_proj: Option<(ParamId, ParamId)>,
    pub knowledge_head: Option<PredictionHead>,
    pub esa_out_width: usize,
}

/// Diagnostics handles surfaced by a forward pass.
pub struct BundleDiagnostics {
    /// `[B, L, C]` gate weights (absent under `no_esfnet`).
    pub gate_weights: Option<Var>,
    /// Per-field cross-attention scores (absent under `no_esa`).
    pub scores: Vec<Var>,
    /// `[B, L, d_k]` knowledge before the filter.
    pub knowledge_pre: Var,
    /// `[B, L, d_k]` knowledge after the filter.
    pub knowledge_post: Var,
}

pub struct BundleForward {
    pub logits: Var,
    pub diagnostics: Option<BundleDiagnostics>,
    /// DIN pooling weights, when the backbone uses target attention.
    pub hist_attn: Option<Var>,
}

impl ModelBundle {
    /// Builds a fresh bundle. Parameter creation order is fixed, so a given
    /// seed always produces identical initial values.
    pub fn build(
        schema: FeatureSchema,
        spec: BundleSpec,
        pset: &mut ParamSet,
        rng: &mut impl rand::Rng,
    ) -> Result<Self> {
        let d_e = schema.total_embed_width();
        let pooling = match spec.model.backbone {
            BackboneKind::DinLite => SeqPooling::TargetAttention,
            _ => SeqPooling::Mean,
        };
        let embedding = EmbeddingLayer::new(
            pset,
            "embed",
            &schema,
            pooling,
            spec.model.attention_hidden,
            rng,
        )?;

        let uses_knowledge = spec.strategy != Strategy::Base;
        let (mut gate, mut esa, mut knowledge_proj, mut esa_out_width) = (None, None, None, 0);
        if uses_knowledge {
            if spec.knowledge_dim == 0 || spec.knowledge_fields == 0 {
                return Err(KserError::Config(
                    "knowledge strategies need a knowledge pack".into(),
                ));
            }
            let query_width = match spec.esa.query {
                QuerySource::HistoryItem => {
                    embedding.widths[embedding.seq_field] + embedding.widths[embedding.item_field]
                }
                QuerySource::FullFeature => d_e,
            };
            let dims =
                spec.esa
                    .resolve(spec.knowledge_dim, spec.knowledge_fields, query_width, d_e)?;
            esa_out_width = dims.out_width;
            if spec.ablation != Ablation::NoEsfnet {
                gate = Some(GateUnit::new(
                    pset,
                    "gate",
                    &spec.esfnet,
                    spec.knowledge_dim,
                    spec.knowledge_fields,
                    d_e,
                    rng,
                )?);
            }
            if spec.ablation == Ablation::NoEsa {
                let flat_w = spec.knowledge_dim * spec.knowledge_fields;
                let (w, b) = init_affine(rng, flat_w, esa_out_width);
                knowledge_proj = Some((
                    pset.add("kproj.w", w.into_dyn(), true),
                    pset.add("kproj.b", b.into_dyn(), true),
                ));
            } else {
                esa = Some(EsaModule::new(
                    pset,
                    "esa",
                    dims,
                    spec.esa.scaled_attention,
                    rng,
                ));
            }
        }

        let backbone_input = match spec.strategy {
            Strategy::AllParams => esa_out_width + d_e,
            _ => d_e,
        };
        let fm_slices = if spec.model.backbone == BackboneKind::DeepfmLite {
            // second-order interactions over the feature-embedding slice;
            // under the augmented input that slice sits after the knowledge
            let offset = backbone_input - d_e;
            let mut slices = Vec::new();
            let mut at = offset;
            for w in &embedding.widths {
                slices.push((at, at + w));
                at += w;
            }
            Some(slices)
        } else {
            None
        };
        let backbone = BackboneModel::new(
            pset,
            "trunk",
            spec.model.backbone,
            backbone_input,
            &spec.model.hidden,
            fm_slices,
            rng,
        )?;

        let knowledge_head = match spec.strategy {
            Strategy::ExtractorOnly => Some(PredictionHead::new(
                pset,
                "khead",
                esa_out_width,
                backbone.trunk_out_width,
                None,
            )),
            _ => None,
        };

        let bundle = Self {
            spec,
            schema,
            embedding,
            backbone,
            gate,
            esa,
            knowledge_proj,
            knowledge_head,
            esa_out_width,
        };
        bundle.apply_trainability(pset);
        Ok(bundle)
    }

    /// Freezes what the strategy freezes: under extractor-only training the
    /// trunk and the retired base head stay untouched.
    fn apply_trainability(&self, pset: &mut ParamSet) {
        if self.spec.strategy == Strategy::ExtractorOnly {
            for id in self.backbone.trunk_param_ids() {
                pset.set_trainable(id, false);
            }
            for id in self.backbone.head_param_ids() {
                pset.set_trainable(id, false);
            }
        }
    }

    /// Copies every same-named parameter from a source set (the base
    /// checkpoint) and warm starts the knowledge head from the base output
    /// layer.
    pub fn warm_start(&self, pset: &mut ParamSet, base: &ParamSet) -> Result<()> {
        for (_, entry) in base.iter() {
            if let Some(id) = pset.id(&entry.name) {
                if pset.value(id).shape() != entry.value.shape() {
                    return Err(KserError::Checkpoint(format!(
                        "parameter '{}' shape changed between builds",
                        entry.name
                    )));
                }
                *pset.value_mut(id) = entry.value.clone();
            }
        }
        if let Some(head) = &self.knowledge_head {
            let base_w = base
                .id("trunk.head.w")
                .map(|id| base.value(id).clone())
                .ok_or_else(|| KserError::Checkpoint("base head weights missing".into()))?;
            let base_b = base
                .id("trunk.head.b")
                .map(|id| base.value(id).clone())
                .ok_or_else(|| KserError::Checkpoint("base head bias missing".into()))?;
            let kw = head.knowledge_width;
            let value = pset.value_mut(head.w);
            for r in 0..head.trunk_width {
                value[[kw + r, 0]] = base_w[[r, 0]];
            }
            pset.value_mut(head.b)[[0]] = base_b[[0]];
        }
        Ok(())
    }

    /// All extractor parameters (gate + alignment or projection).
    pub fn extractor_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        if let Some(gate) = &self.gate {
            ids.extend(gate.param_ids());
        }
        if let Some(esa) = &self.esa {
            ids.extend(esa.param_ids());
        }
        if let Some((w, b)) = &self.knowledge_proj {
            ids.extend([*w, *b]);
        }
        ids
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        pset: &ParamSet,
        batch: &Batch,
        want_diagnostics: bool,
    ) -> Result<BundleForward> {
        let emb = self.embedding.forward(g, pset, batch);

        if self.spec.strategy == Strategy::Base {
            let logits = self.backbone.forward_full(g, pset, emb.flat);
            return Ok(BundleForward {
                logits,
                diagnostics: None,
                hist_attn: emb.hist_attn,
            });
        }

        let kdata = batch.knowledge.as_ref().ok_or_else(|| {
            KserError::ShapeMismatch("knowledge strategies need an assembled knowledge batch".into())
        })?;
        let knowledge = g.constant(kdata.clone());

        let (kbar, gate_weights) = match &self.gate {
            Some(gate) => {
                let out = gate.forward(g, pset, knowledge, emb.flat);
                (out.filtered, Some(out.weights))
            }
            None => (knowledge, None),
        };

        let (esa_out, scores) = match &self.esa {
            Some(esa) => {
                let query = self.build_query(g, &emb);
                let out = esa.forward(g, pset, kbar, query);
                (out.output, out.scores)
            }
            None => {
                let (w, b) = self.knowledge_proj.expect("no_esa projection present");
                let shape = g.value(kbar).shape().to_vec();
                let flat = g.reshape(kbar, &[shape[0], shape[1] * shape[2]]);
                let wv = g.param(pset, w);
                let bv = g.param(pset, b);
                let o = g.matmul_last(flat, wv);
                (g.add_bias(o, bv), Vec::new())
            }
        };

        let logits = match self.spec.strategy {
            Strategy::AllParams => {
                let e = g.concat_last(&[esa_out, emb.flat]);
                self.backbone.forward_full(g, pset, e)
            }
            Strategy::ExtractorOnly => {
                let trunk_out = self.backbone.forward_trunk(g, pset, emb.flat);
                self.knowledge_head
                    .as_ref()
                    .expect("extractor-only head present")
                    .forward(g, pset, esa_out, trunk_out)
            }
            Strategy::Base => unreachable!(),
        };

        let diagnostics = want_diagnostics.then(|| BundleDiagnostics {
            gate_weights,
            scores,
            knowledge_pre: knowledge,
            knowledge_post: kbar,
        });
        Ok(BundleForward {
            logits,
            diagnostics,
            hist_attn: emb.hist_attn,
        })
    }

    fn build_query(&self, g: &mut Graph, emb: &EmbedOutput) -> Var {
        match self.spec.esa.query {
            QuerySource::FullFeature => emb.flat,
            QuerySource::HistoryItem => {
                let mean = g.masked_mean_axis1(emb.hist_seq, &emb.hist_mask);
                g.concat_last(&[mean, emb.item])
            }
        }
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    schema_hash: String,
    spec: BundleSpec,
    params: Vec<ParamMeta>,
}

#[derive(Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Writes `meta.json` plus one raw little-endian f32 file per parameter.
pub fn save_checkpoint(bundle: &ModelBundle, pset: &ParamSet, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| KserError::io(dir, e))?;
    let mut params: Vec<(ParamId, &str)> = pset.iter().map(|(id, e)| (id, e.name.as_str())).collect();
    params.sort_by_key(|(_, name)| name.to_string());

    let meta = CheckpointMeta {
        schema_hash: bundle.schema.hash(),
        spec: bundle.spec.clone(),
        params: params
            .iter()
            .map(|(id, name)| ParamMeta {
                name: name.to_string(),
                shape: pset.value(*id).shape().to_vec(),
                trainable: pset.is_trainable(*id),
            })
            .collect(),
    };
    let meta_path = dir.join("meta.json");
    let meta_json =
        serde_json::to_string_pretty(&meta).map_err(|e| KserError::json(&meta_path, e))?;
    std::fs::write(&meta_path, meta_json).map_err(|e| KserError::io(&meta_path, e))?;

    for (id, name) in params {
        let path = dir.join(format!("{name}.f32"));
        let mut bytes = Vec::with_capacity(pset.value(id).len() * 4);
        for v in pset.value(id).iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(&path).map_err(|e| KserError::io(&path, e))?;
        f.write_all(&bytes).map_err(|e| KserError::io(&path, e))?;
    }
    Ok(())
}

/// Rebuilds the bundle described by `meta.json` (verifying the schema hash)
/// and loads every parameter from its raw file.
pub fn load_checkpoint(
    dir: impl AsRef<Path>,
    schema: &FeatureSchema,
) -> Result<(ModelBundle, ParamSet)> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_raw =
        std::fs::read_to_string(&meta_path).map_err(|e| KserError::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_raw).map_err(|e| KserError::json(&meta_path, e))?;
    if meta.schema_hash != schema.hash() {
        return Err(KserError::Checkpoint(format!(
            "schema hash mismatch: checkpoint {} vs data {}",
            meta.schema_hash,
            schema.hash()
        )));
    }
    // construction only shapes the parameter set; values come from disk
    let mut pset = ParamSet::new();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let bundle = ModelBundle::build(schema.clone(), meta.spec.clone(), &mut pset, &mut rng)?;

    let mut by_name: HashMap<String, ParamMeta> = meta
        .params
        .into_iter()
        .map(|p| (p.name.clone(), p))
        .collect();
    let model_params: Vec<(ParamId, String, Vec<usize>, usize)> = pset
        .iter()
        .map(|(id, e)| (id, e.name.clone(), e.value.shape().to_vec(), e.value.len()))
        .collect();
    for (id, name, shape, len) in model_params {
        let pm = by_name.remove(&name).ok_or_else(|| {
            KserError::Checkpoint(format!("checkpoint lacks parameter '{name}'"))
        })?;
        if pm.shape != shape {
            return Err(KserError::Checkpoint(format!(
                "parameter '{name}' has shape {:?} on disk but {shape:?} in model",
                pm.shape,
            )));
        }
        let path = dir.join(format!("{name}.f32"));
        let mut bytes = Vec::new();
        std::fs::File::open(&path)
            .map_err(|e| KserError::io(&path, e))?
            .read_to_end(&mut bytes)
            .map_err(|e| KserError::io(&path, e))?;
        let expected = len * 4;
        if bytes.len() != expected {
            return Err(KserError::Checkpoint(format!(
                "parameter file {} has {} bytes, expected {expected}",
                path.display(),
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        *pset.value_mut(id) = ArrayD::from_shape_vec(IxDyn(&pm.shape), values).unwrap();
    }
    if !by_name.is_empty() {
        let mut extra: Vec<String> = by_name.into_keys().collect();
        extra.sort();
        return Err(KserError::Checkpoint(format!(
            "checkpoint has parameters the model does not: {extra:?}"
        )));
    }
    Ok((bundle, pset))
}

use rand::SeedableRng;
