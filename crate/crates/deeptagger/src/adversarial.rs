//! Hard virtual samples in embedding space: the symmetric-KL divergence
//! between predictions on clean and perturbed inputs, norm-ball
//! projection, projected gradient ascent to find the worst perturbation
//! in the ball, and the combined training objective.
//!
//! The clean branch is always treated as a constant: gradients reach the
//! parameters only through the perturbed branch, and the found
//! perturbation is held fixed during the outer parameter update.

use serde::{Deserialize, Serialize};

use crate::corpus::EncodedBatch;
use crate::model::{Mode, ModelParameters};
use crate::tensor::{Bcast, NodeId, Rng, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PerturbationNorm {
    L2,
    Linf,
}

impl std::str::FromStr for PerturbationNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "l2" => Ok(PerturbationNorm::L2),
            "linf" => Ok(PerturbationNorm::Linf),
            other => Err(Error::Config(format!("unknown norm {other:?}, expected l2 or linf"))),
        }
    }
}

impl std::fmt::Display for PerturbationNorm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PerturbationNorm::L2 => "l2",
            PerturbationNorm::Linf => "linf",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationConfig {
    /// Ball radius in the chosen norm, over the whole perturbation tensor.
    pub epsilon: f64,
    /// Ascent step size.
    pub eta: f64,
    /// Ascent iterations.
    pub steps: usize,
    pub norm: PerturbationNorm,
    /// Scale of the Gaussian draw behind the initial perturbation.
    pub init_scale: f64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            epsilon: 1.0,
            eta: 0.1,
            steps: 3,
            norm: PerturbationNorm::L2,
            init_scale: 0.05,
        }
    }
}

impl PerturbationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be positive", self.epsilon)));
        }
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::Config(format!("eta {} must be positive", self.eta)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if !(self.init_scale >= 0.0 && self.init_scale.is_finite()) {
            return Err(Error::Config(format!(
                "init_scale {} must be nonnegative",
                self.init_scale
            )));
        }
        Ok(())
    }
}

/// An additive embedding perturbation constrained to the norm ball;
/// padded rows are zero.
#[derive(Debug, Clone)]
pub struct Perturbation {
    /// Shaped like the embedded input, `[rows, embed_dim]`.
    pub delta: Tensor,
    /// Norm of the tensor under the configured geometry, cached at the
    /// last projection.
    pub norm: f64,
}

/// Mean over masked rows of the symmetric KL divergence
/// `½(KL(P‖Q) + KL(Q‖P))` between per-row distributions. Probabilities
/// are clamped at 1e-12 before the logs.
pub fn sym_kl(p: &Tensor, q: &Tensor, mask: &[f64]) -> Result<f64> {
    if p.shape() != q.shape() || p.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "sym_kl",
            left: p.shape().to_vec(),
            right: q.shape().to_vec(),
        });
    }
    let (rows, cols) = (p.shape()[0], p.shape()[1]);
    if mask.len() != rows {
        return Err(Error::Data(format!(
            "sym_kl mask has {} entries for {rows} rows",
            mask.len()
        )));
    }
    let mut total = 0.0;
    let mut count = 0usize;
    for r in 0..rows {
        if mask[r] <= 0.0 {
            continue;
        }
        count += 1;
        for c in 0..cols {
            let pv = p.data()[r * cols + c];
            let qv = q.data()[r * cols + c];
            total += (pv - qv) * (pv.max(1e-12).ln() - qv.max(1e-12).ln());
        }
    }
    if count == 0 {
        return Err(Error::Data("sym_kl over an empty mask".into()));
    }
    Ok(0.5 * total / count as f64)
}

/// Differentiable symmetric KL against a constant clean branch:
/// `(P - Q)·(lnP - lnQ)` summed per row equals `KL(P‖Q) + KL(Q‖P)`.
/// `clean_probs` and `clean_logprobs` must be constant leaves; gradients
/// flow only through `perturbed_logits`.
pub fn sym_kl_graph(
    tape: &mut Tape,
    clean_probs: NodeId,
    clean_logprobs: NodeId,
    perturbed_logits: NodeId,
    mask: &[f64],
) -> Result<NodeId> {
    let count = mask.iter().filter(|&&m| m > 0.0).count();
    if count == 0 {
        return Err(Error::Data("virtual loss over an empty mask".into()));
    }
    let q = tape.softmax(perturbed_logits)?;
    let lnq = tape.log_softmax(perturbed_logits)?;
    let dp = tape.sub(clean_probs, q)?;
    let dl = tape.sub(clean_logprobs, lnq)?;
    let prod = tape.mul(dp, dl)?;
    let mask_leaf = tape.leaf(Tensor::new(vec![mask.len()], mask.to_vec())?)?;
    let masked = tape.mul_bcast(prod, mask_leaf, Bcast::Col)?;
    let s = tape.sum(masked)?;
    tape.scale(s, 0.5 / count as f64)
}

/// Shrink factor for the projection nudge; a handful of these absorbs the
/// rounding of the single rescale.
const NUDGE: f64 = 1.0 - 4.0 * f64::EPSILON;

fn flat_norm(data: &[f64], norm: PerturbationNorm) -> f64 {
    match norm {
        PerturbationNorm::L2 => data.iter().map(|v| v * v).sum::<f64>().sqrt(),
        PerturbationNorm::Linf => data.iter().fold(0.0f64, |a, v| a.max(v.abs())),
    }
}

/// Project onto the norm ball and re-zero padded rows, in place. Exactly
/// idempotent: projecting an already-feasible point returns it bit for
/// bit. Returns the norm after projection.
pub fn project(
    delta: &mut Tensor,
    pad_keep: &[f64],
    config: &PerturbationConfig,
) -> Result<f64> {
    if delta.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "project",
            left: vec![pad_keep.len(), 0],
            right: delta.shape().to_vec(),
        });
    }
    let rows = delta.rows();
    if pad_keep.len() != rows {
        return Err(Error::Data(format!(
            "projection mask has {} entries for {rows} rows",
            pad_keep.len()
        )));
    }
    let cols = delta.len() / rows;
    for r in 0..rows {
        if pad_keep[r] == 0.0 {
            delta.data_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
    }
    let eps = config.epsilon;
    match config.norm {
        PerturbationNorm::L2 => {
            let norm = flat_norm(delta.data(), PerturbationNorm::L2);
            if norm > eps {
                let s = eps / norm;
                for v in delta.data_mut() {
                    *v *= s;
                }
                while flat_norm(delta.data(), PerturbationNorm::L2) > eps {
                    for v in delta.data_mut() {
                        *v *= NUDGE;
                    }
                }
            }
        }
        PerturbationNorm::Linf => {
            for v in delta.data_mut() {
                *v = v.clamp(-eps, eps);
            }
        }
    }
    Ok(flat_norm(delta.data(), config.norm))
}

/// A point drawn uniformly from the `dims`-dimensional L2 ball of radius
/// `epsilon`: uniform direction, radius `epsilon·U^(1/dims)`.
pub fn uniform_in_ball(dims: usize, epsilon: f64, rng: &mut Rng) -> Vec<f64> {
    loop {
        let dir: Vec<f64> = (0..dims).map(|_| rng.normal()).collect();
        let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            continue;
        }
        let r = epsilon * rng.uniform().powf(1.0 / dims as f64);
        return dir.into_iter().map(|v| v * r / norm).collect();
    }
}

/// A random perturbation drawn uniformly from the ball over the real
/// (unpadded) coordinates; padded rows stay zero.
pub fn sample_virtual_perturbation(
    rows: usize,
    dim: usize,
    pad_keep: &[f64],
    config: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<Perturbation> {
    if pad_keep.len() != rows {
        return Err(Error::Data(format!(
            "pad mask has {} entries for {rows} rows",
            pad_keep.len()
        )));
    }
    let real_rows: Vec<usize> =
        (0..rows).filter(|&r| pad_keep[r] == 1.0).collect();
    if real_rows.is_empty() {
        return Err(Error::Data("perturbation over a fully padded batch".into()));
    }
    let mut delta = Tensor::zeros(vec![rows, dim]);
    match config.norm {
        PerturbationNorm::L2 => {
            let flat = uniform_in_ball(real_rows.len() * dim, config.epsilon, rng);
            for (i, &r) in real_rows.iter().enumerate() {
                delta.data_mut()[r * dim..(r + 1) * dim]
                    .copy_from_slice(&flat[i * dim..(i + 1) * dim]);
            }
        }
        PerturbationNorm::Linf => {
            for &r in &real_rows {
                for v in &mut delta.data_mut()[r * dim..(r + 1) * dim] {
                    *v = rng.uniform_in(-config.epsilon, config.epsilon);
                }
            }
        }
    }
    let norm = flat_norm(delta.data(), config.norm);
    Ok(Perturbation { delta, norm })
}

/// Clean-branch reference: predictions, their logs, and the aggregation
/// mask, all captured as plain tensors so the branch stays constant.
pub struct CleanReference {
    probs: Tensor,
    logprobs: Tensor,
    mask: Vec<f64>,
    pad_keep: Vec<f64>,
}

pub fn clean_reference(params: &ModelParameters, batch: &EncodedBatch) -> Result<CleanReference> {
    let mut pass = params.begin(batch)?;
    let x = pass.embed()?;
    let h = pass.encode(x, &mut Mode::Eval)?;
    let z = pass.tag_logits(h)?;
    let probs = pass.tape_mut().softmax(z)?;
    let logprobs = pass.tape_mut().log_softmax(z)?;
    // The divergence aggregates over supervised positions when the batch
    // has labels, otherwise over all query positions.
    let mask =
        if pass.has_supervision() { pass.supervision_mask() } else { pass.query_mask() };
    Ok(CleanReference {
        probs: pass.value(probs).clone(),
        logprobs: pass.value(logprobs).clone(),
        mask,
        pad_keep: pass.pad_keep().to_vec(),
    })
}

/// Differentiable divergence to the clean reference at a fixed
/// perturbation, on a fresh dropout-free pass. Returns the pass, the loss
/// node, and the perturbation leaf (whose gradient drives the ascent).
pub fn virtual_loss_graph(
    params: &ModelParameters,
    batch: &EncodedBatch,
    clean: &CleanReference,
    delta: Tensor,
) -> Result<(crate::model::ForwardPass, NodeId, NodeId)> {
    let mut pass = params.begin(batch)?;
    let x = pass.embed()?;
    let d = pass.perturbation(delta)?;
    let xp = pass.add_perturbation(x, d)?;
    let h = pass.encode(xp, &mut Mode::Eval)?;
    let z = pass.tag_logits(h)?;
    let p = pass.tape_mut().leaf(clean.probs.clone())?;
    let lp = pass.tape_mut().leaf(clean.logprobs.clone())?;
    let lv = sym_kl_graph(pass.tape_mut(), p, lp, z, &clean.mask)?;
    Ok((pass, lv, d))
}

/// Virtual loss and its gradient with respect to the perturbation.
fn perturbed_loss_grad(
    params: &ModelParameters,
    batch: &EncodedBatch,
    clean: &CleanReference,
    delta: &Tensor,
) -> Result<(f64, Tensor)> {
    let (pass, lv, d) = virtual_loss_graph(params, batch, clean, delta.clone())?;
    let value = pass.value(lv).item()?;
    let mut grads = pass.backward(lv)?;
    let grad = grads
        .take(d)
        .ok_or_else(|| Error::Data("perturbation received no gradient".into()))?;
    Ok((value, grad))
}

/// Ascent steps are normalized by the gradient's L2 norm; below this
/// floor the direction is undefined and the ascent takes a tiny
/// unnormalized random step instead (an exact zero occurs e.g. at
/// delta = 0, a minimum).
const GRAD_FLOOR: f64 = 1e-12;
const ESCAPE_SCALE: f64 = 1e-3;

/// Projected gradient ascent from `delta`, driven by a loss-and-gradient
/// callback. Generic over the objective so small closed-form models can
/// exercise the exact loop the tagger uses.
fn ascend(
    mut delta: Tensor,
    pad_keep: &[f64],
    config: &PerturbationConfig,
    rng: &mut Rng,
    mut loss_grad: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<Perturbation> {
    let mut norm = project(&mut delta, pad_keep, config)?;
    let rows = pad_keep.len();
    let cols = delta.len() / rows;
    for _ in 0..config.steps {
        let (_, grad) = loss_grad(&delta)?;
        if grad.shape() != delta.shape() {
            return Err(Error::ShapeMismatch {
                op: "perturbation ascent",
                left: delta.shape().to_vec(),
                right: grad.shape().to_vec(),
            });
        }
        if grad.data().iter().any(|g| g.is_nan()) {
            return Err(Error::Data("NaN in perturbation gradient".into()));
        }
        let gnorm = flat_norm(grad.data(), PerturbationNorm::L2);
        for r in 0..rows {
            if pad_keep[r] == 0.0 {
                continue;
            }
            let grow = &grad.data()[r * cols..(r + 1) * cols];
            let drow = &mut delta.data_mut()[r * cols..(r + 1) * cols];
            if gnorm < GRAD_FLOOR {
                let step = config.eta * ESCAPE_SCALE;
                for v in drow.iter_mut() {
                    *v += step * rng.normal();
                }
            } else {
                let step = config.eta / gnorm;
                for (v, g) in drow.iter_mut().zip(grow) {
                    *v += step * g;
                }
            }
        }
        norm = project(&mut delta, pad_keep, config)?;
    }
    Ok(Perturbation { delta, norm })
}

fn initial_delta(
    rows: usize,
    dim: usize,
    pad_keep: &[f64],
    config: &PerturbationConfig,
    rng: &mut Rng,
) -> Tensor {
    let mut delta = Tensor::zeros(vec![rows, dim]);
    for r in 0..rows {
        if pad_keep[r] == 1.0 {
            for v in &mut delta.data_mut()[r * dim..(r + 1) * dim] {
                *v = config.init_scale * rng.normal();
            }
        }
    }
    delta
}

/// Projected gradient ascent against an already-captured clean reference,
/// starting from a projected Gaussian draw.
pub fn ascend_from(
    params: &ModelParameters,
    batch: &EncodedBatch,
    clean: &CleanReference,
    config: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<Perturbation> {
    config.validate()?;
    let dim = params.config().embed_dim;
    let rows = clean.pad_keep.len();
    let delta0 = initial_delta(rows, dim, &clean.pad_keep, config, rng);
    ascend(delta0, &clean.pad_keep, config, rng, |d| {
        perturbed_loss_grad(params, batch, clean, d)
    })
}

/// The worst perturbation in the ball found by projected gradient ascent
/// on the virtual loss.
pub fn find_adversarial_perturbation(
    params: &ModelParameters,
    batch: &EncodedBatch,
    config: &PerturbationConfig,
    rng: &mut Rng,
) -> Result<Perturbation> {
    let clean = clean_reference(params, batch)?;
    ascend_from(params, batch, &clean, config, rng)
}

/// Divergence between clean and perturbed predictions, evaluated without
/// building the divergence graph. Independent of the training path.
pub fn virtual_loss(
    params: &ModelParameters,
    batch: &EncodedBatch,
    delta: &Tensor,
) -> Result<f64> {
    let clean = clean_reference(params, batch)?;
    let mut pass = params.begin(batch)?;
    let x = pass.embed()?;
    let d = pass.perturbation(delta.clone())?;
    let xp = pass.add_perturbation(x, d)?;
    let h = pass.encode(xp, &mut Mode::Eval)?;
    let probs = pass.classify(h)?;
    sym_kl(&clean.probs, pass.value(probs), &clean.mask)
}

/// Supervised cross-entropy plus the divergence to the clean reference at
/// a fixed perturbation, both branches on one tape. The perturbation and
/// the clean branch are constants; the caller runs backward on the loss
/// node and steps the parameters.
pub fn augmented_objective(
    params: &ModelParameters,
    batch: &EncodedBatch,
    clean: &CleanReference,
    delta: Tensor,
    mode: &mut Mode,
) -> Result<(crate::model::ForwardPass, NodeId)> {
    let mut pass = params.begin(batch)?;
    let x = pass.embed()?;
    let h = pass.encode(x, mode)?;
    let z = pass.tag_logits(h)?;
    let ce = pass.supervised_loss(z)?;
    let d = pass.perturbation(delta)?;
    let xp = pass.add_perturbation(x, d)?;
    let hq = pass.encode(xp, &mut Mode::Eval)?;
    let zq = pass.tag_logits(hq)?;
    let p = pass.tape_mut().leaf(clean.probs.clone())?;
    let lp = pass.tape_mut().leaf(clean.logprobs.clone())?;
    let lv = sym_kl_graph(pass.tape_mut(), p, lp, zq, &clean.mask)?;
    let total = pass.tape_mut().add(ce, lv)?;
    Ok((pass, total))
}

/// The combined training loss: supervised cross-entropy plus the virtual
/// loss at the worst perturbation the ascent finds.
pub fn adversarial_objective(
    params: &ModelParameters,
    batch: &EncodedBatch,
    config: &PerturbationConfig,
    perturbation_rng: &mut Rng,
    mode: &mut Mode,
) -> Result<(crate::model::ForwardPass, NodeId)> {
    let clean = clean_reference(params, batch)?;
    let worst = ascend_from(params, batch, &clean, config, perturbation_rng)?;
    augmented_objective(params, batch, &clean, worst.delta, mode)
}
