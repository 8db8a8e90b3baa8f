//! The differentiable tagger: embeddings, a small pre-norm transformer
//! encoder, a per-token tag head, and a masked-token head.
//!
//! Parameters live in a flat ordered tensor list whose layout is a pure
//! function of the config; the optimizer and the checkpoint format both
//! rely on that ordering. Forward passes are built on a fresh [`Tape`] per
//! batch through [`ForwardPass`], which also exposes the embedded input so
//! callers can inject continuous perturbations before encoding.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedBatch;
use crate::tensor::{Activation, Bcast, Gradients, NodeId, Rng, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub max_seq_len: usize,
    pub num_tag_classes: usize,
    pub dropout_rate: f64,
    pub activation: Activation,
}

impl ModelConfig {
    /// Desk-scale defaults; `vocab_size` and `num_tag_classes` are task
    /// properties and must be filled in by the caller.
    pub fn with_dims(vocab_size: usize, num_tag_classes: usize) -> Self {
        ModelConfig {
            vocab_size,
            embed_dim: 64,
            ffn_dim: 128,
            encoder_layers: 2,
            max_seq_len: 64,
            num_tag_classes,
            dropout_rate: 0.1,
            activation: Activation::Gelu,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("max_seq_len", self.max_seq_len),
            ("num_tag_classes", self.num_tag_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// Per-layer parameter count: two layer norms (gain+bias), four attention
/// projections (weight+bias), and the two feed-forward projections.
const PER_LAYER: usize = 16;
/// token, positional, and segment embedding tables.
const HEAD: usize = 3;
/// final layer norm, tag head, MLM transform, MLM output bias.
const TAIL: usize = 7;

#[derive(Debug, Clone, Copy)]
struct Layout {
    layers: usize,
}

impl Layout {
    const TOKEN_EMBED: usize = 0;
    const POS_EMBED: usize = 1;
    const SEG_EMBED: usize = 2;

    fn layer(self, l: usize, offset: usize) -> usize {
        debug_assert!(l < self.layers && offset < PER_LAYER);
        HEAD + l * PER_LAYER + offset
    }

    fn tail(self, offset: usize) -> usize {
        debug_assert!(offset < TAIL);
        HEAD + self.layers * PER_LAYER + offset
    }

    fn final_ln_gain(self) -> usize {
        self.tail(0)
    }
    fn final_ln_bias(self) -> usize {
        self.tail(1)
    }
    fn cls_w(self) -> usize {
        self.tail(2)
    }
    fn cls_b(self) -> usize {
        self.tail(3)
    }
    fn mlm_w(self) -> usize {
        self.tail(4)
    }
    fn mlm_b(self) -> usize {
        self.tail(5)
    }
    fn mlm_out_bias(self) -> usize {
        self.tail(6)
    }

    fn total(self) -> usize {
        HEAD + self.layers * PER_LAYER + TAIL
    }
}

/// Model weights in layout order.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParameters {
    config: ModelConfig,
    tensors: Vec<Tensor>,
}

const INIT_STD: f64 = 0.02;

impl ModelParameters {
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, f, v) = (config.embed_dim, config.ffn_dim, config.vocab_size);
        let layout = Layout { layers: config.encoder_layers };
        let mut tensors = Vec::with_capacity(layout.total());
        tensors.push(Tensor::randn(vec![v, d], INIT_STD, rng));
        tensors.push(Tensor::randn(vec![config.max_seq_len, d], INIT_STD, rng));
        tensors.push(Tensor::randn(vec![2, d], INIT_STD, rng));
        for _ in 0..config.encoder_layers {
            tensors.push(Tensor::full(vec![d], 1.0)); // ln1 gain
            tensors.push(Tensor::zeros(vec![d])); // ln1 bias
            for _ in 0..4 {
                tensors.push(Tensor::randn(vec![d, d], INIT_STD, rng)); // wq/wk/wv/wo
                tensors.push(Tensor::zeros(vec![d]));
            }
            tensors.push(Tensor::full(vec![d], 1.0)); // ln2 gain
            tensors.push(Tensor::zeros(vec![d])); // ln2 bias
            tensors.push(Tensor::randn(vec![d, f], INIT_STD, rng));
            tensors.push(Tensor::zeros(vec![f]));
            tensors.push(Tensor::randn(vec![f, d], INIT_STD, rng));
            tensors.push(Tensor::zeros(vec![d]));
        }
        tensors.push(Tensor::full(vec![d], 1.0)); // final ln gain
        tensors.push(Tensor::zeros(vec![d])); // final ln bias
        tensors.push(Tensor::randn(vec![d, config.num_tag_classes], INIT_STD, rng));
        tensors.push(Tensor::zeros(vec![config.num_tag_classes]));
        tensors.push(Tensor::randn(vec![d, d], INIT_STD, rng)); // mlm transform
        tensors.push(Tensor::zeros(vec![d]));
        tensors.push(Tensor::zeros(vec![v])); // mlm output bias
        Ok(ModelParameters { config, tensors })
    }

    /// Reassemble from a tensor list in layout order (checkpoint loading).
    pub fn from_tensors(config: ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        config.validate()?;
        let shapes = tensor_shapes(&config);
        if tensors.len() != shapes.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors for this config, found {}",
                shapes.len(),
                tensors.len()
            )));
        }
        for (i, (got, want)) in tensors.iter().zip(&shapes).enumerate() {
            if got.shape() != want.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor {i} ({}) has shape {:?}, expected {:?}",
                    tensor_names(&config)[i],
                    got.shape(),
                    want
                )));
            }
        }
        Ok(ModelParameters { config, tensors })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    fn layout(&self) -> Layout {
        Layout { layers: self.config.encoder_layers }
    }

    /// Begin a forward pass over one batch: validates ids, registers every
    /// parameter as a tape leaf, and flattens the batch to `[B·L]` order.
    pub fn begin(&self, batch: &EncodedBatch) -> Result<ForwardPass> {
        let (b, l) = (batch.batch_len(), batch.seq_len());
        if b == 0 || l == 0 {
            return Err(Error::Data("forward pass over an empty batch".into()));
        }
        if l > self.config.max_seq_len {
            return Err(Error::Config(format!(
                "batch length {l} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        let mut flat = FlatBatch {
            b,
            l,
            tokens: Vec::with_capacity(b * l),
            positions: Vec::with_capacity(b * l),
            segments: Vec::with_capacity(b * l),
            pad_keep: Vec::with_capacity(b * l),
            loss_mask: Vec::with_capacity(b * l),
            tag_ids: Vec::with_capacity(b * l),
        };
        for s in 0..b {
            for p in 0..l {
                let id = batch.token_ids[s][p];
                if id >= self.config.vocab_size {
                    return Err(Error::Data(format!(
                        "token id {id} at sequence {s} position {p} exceeds vocab size {}",
                        self.config.vocab_size
                    )));
                }
                flat.tokens.push(id);
                flat.positions.push(p);
                flat.segments.push(batch.segment_ids[s][p].min(1));
                flat.pad_keep.push(if batch.pad_mask[s][p] { 1.0 } else { 0.0 });
                flat.loss_mask.push(batch.loss_mask[s][p]);
                flat.tag_ids.push(batch.tag_ids[s][p]);
            }
        }
        let mut tape = Tape::new();
        let param_ids = self
            .tensors
            .iter()
            .map(|t| tape.leaf(t.clone()))
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardPass { config: self.config.clone(), layout: self.layout(), tape, param_ids, flat })
    }
}

/// Tensor shapes in layout order, derived from the config alone.
pub fn tensor_shapes(config: &ModelConfig) -> Vec<Vec<usize>> {
    let (d, f) = (config.embed_dim, config.ffn_dim);
    let mut shapes = vec![
        vec![config.vocab_size, d],
        vec![config.max_seq_len, d],
        vec![2, d],
    ];
    for _ in 0..config.encoder_layers {
        shapes.push(vec![d]); // ln1 gain
        shapes.push(vec![d]);
        for _ in 0..4 {
            shapes.push(vec![d, d]); // wq/wk/wv/wo
            shapes.push(vec![d]);
        }
        shapes.push(vec![d]); // ln2 gain
        shapes.push(vec![d]);
        shapes.push(vec![d, f]);
        shapes.push(vec![f]);
        shapes.push(vec![f, d]);
        shapes.push(vec![d]);
    }
    shapes.push(vec![d]); // final ln gain
    shapes.push(vec![d]);
    shapes.push(vec![d, config.num_tag_classes]);
    shapes.push(vec![config.num_tag_classes]);
    shapes.push(vec![d, d]); // mlm transform
    shapes.push(vec![d]);
    shapes.push(vec![config.vocab_size]);
    shapes
}

/// Stable tensor names in layout order, for checkpoints and diagnostics.
pub fn tensor_names(config: &ModelConfig) -> Vec<String> {
    let mut names = vec!["token_embed".into(), "pos_embed".into(), "seg_embed".into()];
    for l in 0..config.encoder_layers {
        for part in [
            "ln1_gain", "ln1_bias", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_gain",
            "ln2_bias", "ff1_w", "ff1_b", "ff2_w", "ff2_b",
        ] {
            names.push(format!("layer{l}.{part}"));
        }
    }
    for part in
        ["final_ln_gain", "final_ln_bias", "cls_w", "cls_b", "mlm_w", "mlm_b", "mlm_out_bias"]
    {
        names.push(part.to_string());
    }
    names
}

/// Whether dropout is applied, and the RNG stream that drives it.
pub enum Mode<'r> {
    Train { dropout_rng: &'r mut Rng },
    Eval,
}

struct FlatBatch {
    b: usize,
    l: usize,
    tokens: Vec<usize>,
    positions: Vec<usize>,
    segments: Vec<usize>,
    /// 1.0 at real positions, 0.0 at padding.
    pad_keep: Vec<f64>,
    loss_mask: Vec<bool>,
    tag_ids: Vec<usize>,
}

/// The continuous input the encoder consumes; gradients with respect to
/// `x` drive perturbation search.
#[derive(Debug, Clone, Copy)]
pub struct EmbeddedInput {
    /// `[B·L, embed_dim]`, zero rows at padded positions.
    pub x: NodeId,
    pub batch: usize,
    pub seq_len: usize,
}

/// One tape-backed forward pass over a single batch.
pub struct ForwardPass {
    config: ModelConfig,
    layout: Layout,
    tape: Tape,
    param_ids: Vec<NodeId>,
    flat: FlatBatch,
}

impl ForwardPass {
    pub fn tape_mut(&mut self) -> &mut Tape {
        &mut self.tape
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tape.value(id)
    }

    pub fn batch_dims(&self) -> (usize, usize) {
        (self.flat.b, self.flat.l)
    }

    /// 1.0 at real positions, 0.0 at padding, in `[B·L]` order.
    pub fn pad_keep(&self) -> &[f64] {
        &self.flat.pad_keep
    }

    /// 1.0 at real query-token positions (segment 0), 0.0 at titles and
    /// padding. Defined for labeled and unlabeled batches alike.
    pub fn query_mask(&self) -> Vec<f64> {
        (0..self.flat.tokens.len())
            .map(|i| {
                if self.flat.pad_keep[i] == 1.0 && self.flat.segments[i] == 0 {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    /// 1.0 where the supervised loss mask is set.
    pub fn supervision_mask(&self) -> Vec<f64> {
        self.flat.loss_mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect()
    }

    pub fn has_supervision(&self) -> bool {
        self.flat.loss_mask.iter().any(|&m| m)
    }

    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        self.tape.backward(loss)
    }

    /// Extract parameter gradients aligned with `ModelParameters::tensors`.
    pub fn parameter_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.param_ids.iter().map(|&id| grads.take(id)).collect()
    }

    fn p(&self, index: usize) -> NodeId {
        self.param_ids[index]
    }

    /// Token + positional + segment embeddings, padded rows zeroed.
    pub fn embed(&mut self) -> Result<EmbeddedInput> {
        let tok = self.tape.gather_rows(self.p(Layout::TOKEN_EMBED), &self.flat.tokens)?;
        let pos = self.tape.gather_rows(self.p(Layout::POS_EMBED), &self.flat.positions)?;
        let seg = self.tape.gather_rows(self.p(Layout::SEG_EMBED), &self.flat.segments)?;
        let sum = self.tape.add(tok, pos)?;
        let sum = self.tape.add(sum, seg)?;
        let keep = self.tape.leaf(Tensor::new(vec![self.flat.b * self.flat.l], self.flat.pad_keep.clone())?)?;
        let x = self.tape.mul_bcast(sum, keep, Bcast::Col)?;
        Ok(EmbeddedInput { x, batch: self.flat.b, seq_len: self.flat.l })
    }

    /// Register an additive input perturbation as a leaf. Its gradient is
    /// available after `backward`, which is what PGD ascends.
    pub fn perturbation(&mut self, delta: Tensor) -> Result<NodeId> {
        let want = [self.flat.b * self.flat.l, self.config.embed_dim];
        if delta.shape() != want {
            return Err(Error::ShapeMismatch {
                op: "perturbation",
                left: want.to_vec(),
                right: delta.shape().to_vec(),
            });
        }
        self.tape.leaf(delta)
    }

    pub fn add_perturbation(&mut self, input: EmbeddedInput, delta: NodeId) -> Result<EmbeddedInput> {
        let x = self.tape.add(input.x, delta)?;
        Ok(EmbeddedInput { x, ..input })
    }

    fn dropout(&mut self, x: NodeId, mode: &mut Mode) -> Result<NodeId> {
        let rate = self.config.dropout_rate;
        let Mode::Train { dropout_rng } = mode else { return Ok(x) };
        if rate == 0.0 {
            return Ok(x);
        }
        let shape = self.tape.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> =
            (0..n).map(|_| if dropout_rng.chance(rate) { 0.0 } else { scale }).collect();
        let mask = self.tape.leaf(Tensor::new(shape, mask)?)?;
        self.tape.mul(x, mask)
    }

    fn layer_norm_affine(&mut self, x: NodeId, gain: usize, bias: usize) -> Result<NodeId> {
        let n = self.tape.layer_norm(x)?;
        let g = self.tape.mul_bcast(n, self.p(gain), Bcast::Row)?;
        self.tape.add_bcast(g, self.p(bias), Bcast::Row)
    }

    /// Single-head self-attention within each sequence; padded keys are
    /// masked out with a large negative score bias.
    fn attention(&mut self, x: NodeId, layer: usize, key_bias: &[NodeId]) -> Result<NodeId> {
        let lt = self.layout;
        let q = self.tape.matmul(x, self.p(lt.layer(layer, 2)))?;
        let q = self.tape.add_bcast(q, self.p(lt.layer(layer, 3)), Bcast::Row)?;
        let k = self.tape.matmul(x, self.p(lt.layer(layer, 4)))?;
        let k = self.tape.add_bcast(k, self.p(lt.layer(layer, 5)), Bcast::Row)?;
        let v = self.tape.matmul(x, self.p(lt.layer(layer, 6)))?;
        let v = self.tape.add_bcast(v, self.p(lt.layer(layer, 7)), Bcast::Row)?;
        let (b, l) = (self.flat.b, self.flat.l);
        let inv_sqrt_d = 1.0 / (self.config.embed_dim as f64).sqrt();
        let mut outs = Vec::with_capacity(b);
        for s in 0..b {
            let qs = self.tape.slice_rows(q, s * l, l)?;
            let ks = self.tape.slice_rows(k, s * l, l)?;
            let vs = self.tape.slice_rows(v, s * l, l)?;
            let scores = self.tape.matmul_nt(qs, ks)?;
            let scores = self.tape.scale(scores, inv_sqrt_d)?;
            let scores = self.tape.add_bcast(scores, key_bias[s], Bcast::Row)?;
            let attn = self.tape.softmax(scores)?;
            outs.push(self.tape.matmul(attn, vs)?);
        }
        let merged = self.tape.concat_rows(&outs)?;
        let o = self.tape.matmul(merged, self.p(lt.layer(layer, 8)))?;
        self.tape.add_bcast(o, self.p(lt.layer(layer, 9)), Bcast::Row)
    }

    /// Run the encoder stack over an embedded (possibly perturbed) input.
    pub fn encode(&mut self, input: EmbeddedInput, mode: &mut Mode) -> Result<NodeId> {
        let lt = self.layout;
        let (b, l) = (self.flat.b, self.flat.l);
        let mut key_bias = Vec::with_capacity(b);
        for s in 0..b {
            let bias: Vec<f64> = (0..l)
                .map(|p| if self.flat.pad_keep[s * l + p] == 1.0 { 0.0 } else { -1e30 })
                .collect();
            key_bias.push(self.tape.leaf(Tensor::new(vec![l], bias)?)?);
        }
        let mut x = self.dropout(input.x, mode)?;
        for layer in 0..self.config.encoder_layers {
            let n1 = self.layer_norm_affine(x, lt.layer(layer, 0), lt.layer(layer, 1))?;
            let attn = self.attention(n1, layer, &key_bias)?;
            let attn = self.dropout(attn, mode)?;
            x = self.tape.add(x, attn)?;
            let n2 = self.layer_norm_affine(x, lt.layer(layer, 10), lt.layer(layer, 11))?;
            let h = self.tape.matmul(n2, self.p(lt.layer(layer, 12)))?;
            let h = self.tape.add_bcast(h, self.p(lt.layer(layer, 13)), Bcast::Row)?;
            let h = self.tape.activation(self.config.activation, h)?;
            let h = self.tape.matmul(h, self.p(lt.layer(layer, 14)))?;
            let h = self.tape.add_bcast(h, self.p(lt.layer(layer, 15)), Bcast::Row)?;
            let h = self.dropout(h, mode)?;
            x = self.tape.add(x, h)?;
        }
        self.layer_norm_affine(x, lt.final_ln_gain(), lt.final_ln_bias())
    }

    /// Per-token tag logits, `[B·L, num_tag_classes]`.
    pub fn tag_logits(&mut self, hidden: NodeId) -> Result<NodeId> {
        let z = self.tape.matmul(hidden, self.p(self.layout.cls_w()))?;
        self.tape.add_bcast(z, self.p(self.layout.cls_b()), Bcast::Row)
    }

    /// Per-token tag distributions (softmax over classes).
    pub fn classify(&mut self, hidden: NodeId) -> Result<NodeId> {
        let logits = self.tag_logits(hidden)?;
        self.tape.softmax(logits)
    }

    /// Vocabulary logits at every position, `[B·L, vocab_size]`. Used by
    /// tests and inference; the training path gathers masked rows first.
    pub fn mlm_logits(&mut self, hidden: NodeId) -> Result<NodeId> {
        let rows: Vec<usize> = (0..self.flat.b * self.flat.l).collect();
        self.mlm_logits_at(hidden, &rows)
    }

    /// Vocabulary logits for selected flat rows only. The output
    /// projection is tied to the token embedding table.
    pub fn mlm_logits_at(&mut self, hidden: NodeId, rows: &[usize]) -> Result<NodeId> {
        let lt = self.layout;
        let picked = self.tape.gather_rows(hidden, rows)?;
        let t = self.tape.matmul(picked, self.p(lt.mlm_w()))?;
        let t = self.tape.add_bcast(t, self.p(lt.mlm_b()), Bcast::Row)?;
        let t = self.tape.activation(self.config.activation, t)?;
        let t = self.tape.layer_norm(t)?;
        let logits = self.tape.matmul_nt(t, self.p(Layout::TOKEN_EMBED))?;
        self.tape.add_bcast(logits, self.p(lt.mlm_out_bias()), Bcast::Row)
    }

    /// Mean cross-entropy over masked-position targets.
    pub fn mlm_loss(&mut self, hidden: NodeId, rows: &[usize], targets: &[usize]) -> Result<NodeId> {
        if rows.is_empty() || rows.len() != targets.len() {
            return Err(Error::Data(format!(
                "mlm_loss got {} rows and {} targets",
                rows.len(),
                targets.len()
            )));
        }
        let logits = self.mlm_logits_at(hidden, rows)?;
        let lp = self.tape.log_softmax(logits)?;
        let v = self.config.vocab_size;
        let mut onehot = vec![0.0; rows.len() * v];
        for (r, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Data(format!("mlm target {t} exceeds vocab size {v}")));
            }
            onehot[r * v + t] = 1.0;
        }
        let hot = self.tape.leaf(Tensor::new(vec![rows.len(), v], onehot)?)?;
        let picked = self.tape.mul(lp, hot)?;
        let total = self.tape.sum(picked)?;
        self.tape.scale(total, -1.0 / rows.len() as f64)
    }

    /// Mean cross-entropy over positions where the supervised-loss mask is
    /// set. Masked-out positions contribute exactly zero loss and zero
    /// gradient because their one-hot rows are all zero.
    pub fn supervised_loss(&mut self, tag_logits: NodeId) -> Result<NodeId> {
        let t = self.config.num_tag_classes;
        let n = self.flat.b * self.flat.l;
        let count = self.flat.loss_mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::Data("supervised loss over an all-masked batch".into()));
        }
        let mut onehot = vec![0.0; n * t];
        for i in 0..n {
            if self.flat.loss_mask[i] {
                let tag = self.flat.tag_ids[i];
                if tag >= t {
                    return Err(Error::Data(format!("tag id {tag} exceeds class count {t}")));
                }
                onehot[i * t + tag] = 1.0;
            }
        }
        let lp = self.tape.log_softmax(tag_logits)?;
        let hot = self.tape.leaf(Tensor::new(vec![n, t], onehot)?)?;
        let picked = self.tape.mul(lp, hot)?;
        let total = self.tape.sum(picked)?;
        self.tape.scale(total, -1.0 / count as f64)
    }
}
