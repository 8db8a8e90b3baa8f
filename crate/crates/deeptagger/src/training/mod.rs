//! The three-stage trainer: masked-language pretraining on unlabeled
//! queries, weak-label training with early stopping on a gold dev split,
//! and supervised fine-tuning with optional perturbation augmentation.
//! Self-training and VAT baselines share the same machinery.
//!
//! Every trainer is a pure function of (datasets, config, seed): random
//! draws come from purpose-keyed forks of the config seed, so changing
//! one consumer (say, the perturbation sampler) never shifts another's
//! stream. Batch order, dropout, and initialization are keyed only by
//! (seed, epoch, batch), which is what makes the vanilla, virtual, and
//! adversarial fine-tuning arms differ in nothing but the loss term.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::adversarial::{
    adversarial_objective, ascend_from, augmented_objective, clean_reference,
    sample_virtual_perturbation, virtual_loss_graph, PerturbationConfig,
};
use crate::corpus::{
    augment_with_titles, encode_batch, mask_for_mlm, repair_bio, EncodedBatch, LabelScheme,
    Quality, QueryExample, Source, Vocabulary, PAD_ID,
};
use crate::eval::{evaluate_tag_sequences, TaggingReport};
use crate::model::{save_checkpoint, Mode, ModelConfig, ModelParameters};
use crate::tensor::{Adam, AdamConfig, Rng, Tensor};
use crate::{Error, Result};

/// Fraction of tokens selected for masking during MLM pretraining.
const MLM_MASK_RATE: f64 = 0.15;
/// Batch size for between-epoch and final evaluation passes.
const EVAL_BATCH: usize = 64;

// Stream purposes. Forking the stage seed by purpose (then epoch, then
// batch) keeps every consumer of randomness on its own stream.
const ORDER: u64 = 1;
const DROPOUT: u64 = 2;
const PERTURB: u64 = 3;
const MASK: u64 = 4;
const UNLABELED_ORDER: u64 = 5;
const INIT: u64 = 6;
const SPLIT: u64 = 7;

fn stream(seed: u64, path: &[u64]) -> Rng {
    let mut rng = Rng::new(seed);
    for &branch in path {
        rng = rng.fork(branch);
    }
    rng
}

fn derive_seed(seed: u64, tag: u64) -> u64 {
    Rng::new(seed).fork(tag).next_u64()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StageTag {
    Pretrain,
    WeakTrain,
    Finetune,
}

impl fmt::Display for StageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StageTag::Pretrain => "pretrain",
            StageTag::WeakTrain => "weak-train",
            StageTag::Finetune => "finetune",
        })
    }
}

/// Loss term used by stage-3 fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FinetuneMode {
    /// Supervised cross-entropy only.
    Vanilla,
    /// Cross-entropy plus divergence at a random in-ball perturbation.
    Virtual,
    /// Cross-entropy plus divergence at the worst in-ball perturbation.
    Adversarial,
}

impl fmt::Display for FinetuneMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FinetuneMode::Vanilla => "vanilla",
            FinetuneMode::Virtual => "virtual",
            FinetuneMode::Adversarial => "adversarial",
        })
    }
}

impl FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(FinetuneMode::Vanilla),
            "virtual" => Ok(FinetuneMode::Virtual),
            "adversarial" => Ok(FinetuneMode::Adversarial),
            other => Err(Error::Config(format!(
                "unknown fine-tuning mode {other:?}; expected vanilla, virtual, or adversarial"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: StageTag,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Early-stopping patience in epochs; read by weak-label training only.
    pub patience: usize,
    /// Perturbation geometry; read by fine-tuning and the VAT baseline.
    pub perturbation: PerturbationConfig,
    /// Fraction of the strong set the pipeline reserves as a dev split.
    pub dev_fraction: f64,
    pub seed: u64,
}

impl StageConfig {
    pub fn pretrain(seed: u64) -> Self {
        StageConfig { stage: StageTag::Pretrain, epochs: 3, ..StageConfig::base(seed) }
    }

    pub fn weak_train(seed: u64) -> Self {
        StageConfig { stage: StageTag::WeakTrain, epochs: 8, ..StageConfig::base(seed) }
    }

    pub fn finetune(seed: u64) -> Self {
        StageConfig { stage: StageTag::Finetune, epochs: 6, ..StageConfig::base(seed) }
    }

    fn base(seed: u64) -> Self {
        StageConfig {
            stage: StageTag::Finetune,
            epochs: 1,
            batch_size: 32,
            learning_rate: 1e-3,
            patience: 2,
            perturbation: PerturbationConfig::default(),
            dev_fraction: 0.1,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.dev_fraction) {
            return Err(Error::Config(format!(
                "dev_fraction {} must lie in [0, 1)",
                self.dev_fraction
            )));
        }
        if self.stage == StageTag::WeakTrain && self.patience == 0 {
            return Err(Error::Config("early stopping needs patience of at least 1".into()));
        }
        Ok(())
    }

    fn expect(&self, want: StageTag) -> Result<()> {
        self.validate()?;
        if self.stage != want {
            return Err(Error::Config(format!(
                "config is tagged {} but was handed to the {} trainer",
                self.stage, want
            )));
        }
        Ok(())
    }
}

/// What one trainer run did. Per-epoch arrays are as long as the number
/// of epochs actually executed; the dev arrays exist only for stages
/// that evaluate a dev set between epochs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub stage: String,
    pub epochs_run: usize,
    pub train_loss: Vec<f64>,
    pub dev_overall_f1: Option<Vec<f64>>,
    pub dev_brand_f1: Option<Vec<f64>>,
    /// Epoch whose weights the trainer returned; 0 when none ran.
    pub best_epoch: usize,
    pub wall_seconds: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    fn new(stage: &str, train_loss: Vec<f64>, best_epoch: usize, started: Instant) -> Self {
        TrainReport {
            stage: stage.to_string(),
            epochs_run: train_loss.len(),
            train_loss,
            dev_overall_f1: None,
            dev_brand_f1: None,
            best_epoch,
            wall_seconds: started.elapsed().as_secs_f64(),
            checkpoint: None,
        }
    }
}

fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

fn gather(data: &[QueryExample], ids: &[usize]) -> Vec<QueryExample> {
    ids.iter().map(|&i| data[i].clone()).collect()
}

fn flat_pad_keep(batch: &EncodedBatch) -> Vec<f64> {
    batch
        .pad_mask
        .iter()
        .flat_map(|row| row.iter().map(|&keep| if keep { 1.0 } else { 0.0 }))
        .collect()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Sum gradients elementwise, treating `None` as zero.
fn add_grads(mut acc: Vec<Option<Tensor>>, extra: Vec<Option<Tensor>>) -> Result<Vec<Option<Tensor>>> {
    if acc.len() != extra.len() {
        return Err(Error::Config(format!(
            "gradient lists disagree: {} vs {}",
            acc.len(),
            extra.len()
        )));
    }
    for (a, e) in acc.iter_mut().zip(extra) {
        match (a.as_mut(), e) {
            (_, None) => {}
            (None, Some(t)) => *a = Some(t),
            (Some(t), Some(u)) => {
                if t.shape() != u.shape() {
                    return Err(Error::ShapeMismatch {
                        op: "add_grads",
                        left: t.shape().to_vec(),
                        right: u.shape().to_vec(),
                    });
                }
                for (x, &y) in t.data_mut().iter_mut().zip(u.data()) {
                    *x += y;
                }
            }
        }
    }
    Ok(acc)
}

/// Title-augment, mask, and pad a batch for MLM. Returns the batch plus
/// the flat row indices (`sequence * width + position`) and original ids
/// of the masked positions.
fn encode_mlm_batch(
    examples: &[QueryExample],
    k: usize,
    max_seq_len: usize,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<(EncodedBatch, Vec<usize>, Vec<usize>)> {
    if examples.is_empty() {
        return Err(Error::Data("MLM encoding got an empty batch".into()));
    }
    let augmented: Vec<_> =
        examples.iter().map(|e| augment_with_titles(e, k, max_seq_len)).collect();
    let width = augmented.iter().map(|a| a.tokens.len()).max().unwrap_or(0);

    let mut batch = EncodedBatch {
        token_ids: Vec::with_capacity(examples.len()),
        pad_mask: Vec::with_capacity(examples.len()),
        segment_ids: Vec::with_capacity(examples.len()),
        loss_mask: Vec::with_capacity(examples.len()),
        tag_ids: Vec::with_capacity(examples.len()),
    };
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (s, aug) in augmented.iter().enumerate() {
        let ids: Vec<usize> = aug.tokens.iter().map(|t| vocab.id(t)).collect();
        let masked = mask_for_mlm(&ids, vocab, MLM_MASK_RATE, rng);
        let n = ids.len();

        let mut token_ids = vec![PAD_ID; width];
        token_ids[..n].copy_from_slice(&masked.input_ids);
        let mut pad_mask = vec![false; width];
        pad_mask[..n].fill(true);
        let mut segment_ids = vec![0usize; width];
        segment_ids[..n].copy_from_slice(&aug.segment_ids);

        batch.token_ids.push(token_ids);
        batch.pad_mask.push(pad_mask);
        batch.segment_ids.push(segment_ids);
        batch.loss_mask.push(vec![false; width]);
        batch.tag_ids.push(vec![0; width]);

        for (&p, &t) in masked.positions.iter().zip(&masked.target_ids) {
            rows.push(s * width + p);
            targets.push(t);
        }
    }
    Ok((batch, rows, targets))
}

/// Argmax tag ids for every row of the encoded batch, optionally under an
/// additive embedding perturbation.
fn argmax_tag_ids(
    params: &ModelParameters,
    batch: &EncodedBatch,
    delta: Option<Tensor>,
) -> Result<Vec<usize>> {
    let mut pass = params.begin(batch)?;
    let mut x = pass.embed()?;
    if let Some(d) = delta {
        let leaf = pass.perturbation(d)?;
        x = pass.add_perturbation(x, leaf)?;
    }
    let h = pass.encode(x, &mut Mode::Eval)?;
    let z = pass.tag_logits(h)?;
    let logits = pass.value(z);
    let t = params.config().num_tag_classes;
    let rows = batch.batch_len() * batch.seq_len();
    Ok((0..rows).map(|r| argmax(&logits.data()[r * t..(r + 1) * t])).collect())
}

/// Greedy per-token decode: argmax tag at each query position.
pub fn predict_tags(
    params: &ModelParameters,
    examples: &[QueryExample],
    k: usize,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch = encode_batch(chunk, k, params.config().max_seq_len, vocab, scheme)?;
        let ids = argmax_tag_ids(params, &batch, None)?;
        let width = batch.seq_len();
        for (s, example) in chunk.iter().enumerate() {
            let n = example.query.len();
            if n > width {
                return Err(Error::Data(format!(
                    "query of {n} tokens exceeds the encoded width {width}"
                )));
            }
            let tags: Result<Vec<String>> =
                (0..n).map(|p| scheme.tag_name(ids[s * width + p])).collect();
            out.push(tags?);
        }
    }
    Ok(out)
}

/// Span F1 and token accuracy of the model's predictions against gold tags.
pub fn score_model(
    params: &ModelParameters,
    examples: &[QueryExample],
    k: usize,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<TaggingReport> {
    let predicted = predict_tags(params, examples, k, vocab, scheme)?;
    let gold: Vec<Vec<String>> = examples
        .iter()
        .map(|e| {
            e.tags
                .clone()
                .ok_or_else(|| Error::Data("scoring needs gold tags on every example".into()))
        })
        .collect::<Result<_>>()?;
    evaluate_tag_sequences(&gold, &predicted)
}

/// Top-1 accuracy at freshly masked positions; chance level is roughly
/// 1/vocab_size.
pub fn masked_prediction_accuracy(
    params: &ModelParameters,
    examples: &[QueryExample],
    k: usize,
    vocab: &Vocabulary,
    rng: &mut Rng,
) -> Result<f64> {
    let mut correct = 0usize;
    let mut total = 0usize;
    for chunk in examples.chunks(EVAL_BATCH) {
        let (batch, rows, targets) =
            encode_mlm_batch(chunk, k, params.config().max_seq_len, vocab, rng)?;
        let mut pass = params.begin(&batch)?;
        let x = pass.embed()?;
        let h = pass.encode(x, &mut Mode::Eval)?;
        let z = pass.mlm_logits_at(h, &rows)?;
        let logits = pass.value(z);
        let v = params.config().vocab_size;
        for (i, &t) in targets.iter().enumerate() {
            if argmax(&logits.data()[i * v..(i + 1) * v]) == t {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(if total == 0 { 0.0 } else { correct as f64 / total as f64 })
}

/// Fraction of query-token argmax decisions that change under one random
/// in-ball perturbation per batch.
pub fn flip_rate_under_perturbation(
    params: &ModelParameters,
    examples: &[QueryExample],
    k: usize,
    config: &PerturbationConfig,
    rng: &mut Rng,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<f64> {
    config.validate()?;
    let dim = params.config().embed_dim;
    let mut flips = 0usize;
    let mut total = 0usize;
    for chunk in examples.chunks(EVAL_BATCH) {
        let batch = encode_batch(chunk, k, params.config().max_seq_len, vocab, scheme)?;
        let clean = argmax_tag_ids(params, &batch, None)?;
        let rows = batch.batch_len() * batch.seq_len();
        let delta =
            sample_virtual_perturbation(rows, dim, &flat_pad_keep(&batch), config, rng)?;
        let noisy = argmax_tag_ids(params, &batch, Some(delta.delta))?;
        let width = batch.seq_len();
        for (s, example) in chunk.iter().enumerate() {
            for p in 0..example.query.len().min(width) {
                total += 1;
                if clean[s * width + p] != noisy[s * width + p] {
                    flips += 1;
                }
            }
        }
    }
    Ok(if total == 0 { 0.0 } else { flips as f64 / total as f64 })
}

/// The loss used by one supervised epoch.
enum LossTerm<'a> {
    /// Cross-entropy only.
    Supervised,
    /// Cross-entropy plus divergence at a sampled perturbation.
    Virtual(&'a PerturbationConfig),
    /// Cross-entropy plus divergence at the PGD worst perturbation.
    Adversarial(&'a PerturbationConfig),
}

/// One pass over the data: shuffled batches, forward, backward, Adam.
/// All randomness is keyed by (cfg.seed, epoch, batch index), so two
/// trainers given the same data and config walk identical trajectories
/// regardless of which loss term they add.
fn supervised_epoch(
    params: &mut ModelParameters,
    optimizer: &mut Adam,
    data: &[QueryExample],
    k: usize,
    cfg: &StageConfig,
    epoch: u64,
    term: &LossTerm<'_>,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<f64> {
    let mut order = stream(cfg.seed, &[ORDER, epoch]);
    let batches = epoch_batches(data.len(), cfg.batch_size, &mut order);
    let mut total = 0.0;
    for (b, ids) in batches.iter().enumerate() {
        let chunk = gather(data, ids);
        let batch = encode_batch(&chunk, k, params.config().max_seq_len, vocab, scheme)?;
        let mut dropout = stream(cfg.seed, &[DROPOUT, epoch]).fork(b as u64);
        let mut mode = Mode::Train { dropout_rng: &mut dropout };
        let (pass, loss) = match term {
            LossTerm::Supervised => {
                let mut pass = params.begin(&batch)?;
                let x = pass.embed()?;
                let h = pass.encode(x, &mut mode)?;
                let z = pass.tag_logits(h)?;
                let loss = pass.supervised_loss(z)?;
                (pass, loss)
            }
            LossTerm::Virtual(pcfg) => {
                let clean = clean_reference(params, &batch)?;
                let mut perturb = stream(cfg.seed, &[PERTURB, epoch]).fork(b as u64);
                let rows = batch.batch_len() * batch.seq_len();
                let delta = sample_virtual_perturbation(
                    rows,
                    params.config().embed_dim,
                    &flat_pad_keep(&batch),
                    pcfg,
                    &mut perturb,
                )?;
                augmented_objective(params, &batch, &clean, delta.delta, &mut mode)?
            }
            LossTerm::Adversarial(pcfg) => {
                let mut perturb = stream(cfg.seed, &[PERTURB, epoch]).fork(b as u64);
                adversarial_objective(params, &batch, pcfg, &mut perturb, &mut mode)?
            }
        };
        total += pass.value(loss).item()?;
        let mut grads = pass.backward(loss)?;
        let grad_vec = pass.parameter_grads(&mut grads);
        optimizer.step(params.tensors_mut(), &grad_vec)?;
    }
    Ok(total / batches.len() as f64)
}

/// Stage I: continual masked-language pretraining on unlabeled queries.
/// Only the encoder and MLM head receive gradients; the classification
/// head is untouched.
pub fn stage1_pretrain(
    mut params: ModelParameters,
    unlabeled: &[QueryExample],
    k: usize,
    cfg: &StageConfig,
    vocab: &Vocabulary,
) -> Result<(ModelParameters, TrainReport)> {
    cfg.expect(StageTag::Pretrain)?;
    if unlabeled.is_empty() {
        return Err(Error::Data("MLM pretraining needs unlabeled examples".into()));
    }
    let started = Instant::now();
    let mut optimizer =
        Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs as u64 {
        let mut order = stream(cfg.seed, &[ORDER, epoch]);
        let batches = epoch_batches(unlabeled.len(), cfg.batch_size, &mut order);
        let mut total = 0.0;
        for (b, ids) in batches.iter().enumerate() {
            let chunk = gather(unlabeled, ids);
            let mut mask_rng = stream(cfg.seed, &[MASK, epoch]).fork(b as u64);
            let (batch, rows, targets) = encode_mlm_batch(
                &chunk,
                k,
                params.config().max_seq_len,
                vocab,
                &mut mask_rng,
            )?;
            let mut dropout = stream(cfg.seed, &[DROPOUT, epoch]).fork(b as u64);
            let mut pass = params.begin(&batch)?;
            let x = pass.embed()?;
            let h = pass.encode(x, &mut Mode::Train { dropout_rng: &mut dropout })?;
            let loss = pass.mlm_loss(h, &rows, &targets)?;
            total += pass.value(loss).item()?;
            let mut grads = pass.backward(loss)?;
            let grad_vec = pass.parameter_grads(&mut grads);
            optimizer.step(params.tensors_mut(), &grad_vec)?;
        }
        train_loss.push(total / batches.len() as f64);
    }
    let best = cfg.epochs;
    let report = TrainReport::new(&StageTag::Pretrain.to_string(), train_loss, best, started);
    Ok((params, report))
}

/// Stage II: supervised training on weak labels, early-stopped on gold
/// dev F1. Returns the weights of the best dev epoch, never a later one.
pub fn stage2_weak_train(
    params: ModelParameters,
    weak: &[QueryExample],
    dev: &[QueryExample],
    k: usize,
    cfg: &StageConfig,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<(ModelParameters, TrainReport)> {
    cfg.expect(StageTag::WeakTrain)?;
    if weak.is_empty() {
        return Err(Error::Data("weak-label training needs weak examples".into()));
    }
    if dev.is_empty() {
        return Err(Error::Data("early stopping needs a non-empty dev set".into()));
    }
    for (i, e) in dev.iter().enumerate() {
        if e.tags.is_none() {
            return Err(Error::Data(format!("dev example {i} has no gold tags")));
        }
    }
    let started = Instant::now();
    let mut optimizer =
        Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut train_loss = Vec::new();
    let mut dev_overall = Vec::new();
    let mut dev_brand = Vec::new();
    let mut current = params.clone();
    // (best dev F1, weights at that epoch, 1-based epoch index)
    let mut best = (f64::NEG_INFINITY, params, 0usize);
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let loss = supervised_epoch(
            &mut current,
            &mut optimizer,
            weak,
            k,
            cfg,
            epoch as u64,
            &LossTerm::Supervised,
            vocab,
            scheme,
        )?;
        train_loss.push(loss);
        let report = score_model(&current, dev, k, vocab, scheme)?;
        dev_overall.push(report.overall_f1());
        dev_brand.push(report.brand_f1());
        if report.overall_f1() > best.0 {
            best = (report.overall_f1(), current.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_params, best_epoch) = best;
    let mut report =
        TrainReport::new(&StageTag::WeakTrain.to_string(), train_loss, best_epoch, started);
    report.dev_overall_f1 = Some(dev_overall);
    report.dev_brand_f1 = Some(dev_brand);
    Ok((best_params, report))
}

/// Stage III: supervised fine-tuning on strong labels, with the loss term
/// picked by `mode`. A zero perturbation radius degenerates every mode to
/// vanilla (the divergence is pinned at zero), and the trainer takes the
/// vanilla path exactly in that case.
pub fn stage3_finetune(
    mut params: ModelParameters,
    strong: &[QueryExample],
    k: usize,
    cfg: &StageConfig,
    mode: FinetuneMode,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<(ModelParameters, TrainReport)> {
    cfg.expect(StageTag::Finetune)?;
    if strong.is_empty() {
        return Err(Error::Data("fine-tuning needs strong examples".into()));
    }
    let degenerate = cfg.perturbation.epsilon == 0.0;
    let term = match mode {
        FinetuneMode::Vanilla => LossTerm::Supervised,
        _ if degenerate => LossTerm::Supervised,
        FinetuneMode::Virtual => {
            cfg.perturbation.validate()?;
            LossTerm::Virtual(&cfg.perturbation)
        }
        FinetuneMode::Adversarial => {
            cfg.perturbation.validate()?;
            LossTerm::Adversarial(&cfg.perturbation)
        }
    };
    let started = Instant::now();
    let mut optimizer =
        Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let loss = supervised_epoch(
            &mut params,
            &mut optimizer,
            strong,
            k,
            cfg,
            epoch as u64,
            &term,
            vocab,
            scheme,
        )?;
        train_loss.push(loss);
    }
    let best = cfg.epochs;
    let report = TrainReport::new(&StageTag::Finetune.to_string(), train_loss, best, started);
    Ok((params, report))
}

/// Classic self-training: a strong-only teacher pseudo-labels the
/// unlabeled pool with hard argmax tags (BIO-repaired), and each round a
/// fresh student retrains from the initial weights on pseudo plus strong
/// data, then replaces the teacher.
pub fn self_training_baseline(
    params: ModelParameters,
    strong: &[QueryExample],
    unlabeled: &[QueryExample],
    k: usize,
    cfg: &StageConfig,
    rounds: usize,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<(ModelParameters, TrainReport)> {
    cfg.expect(StageTag::Finetune)?;
    if strong.is_empty() {
        return Err(Error::Data("self-training needs strong examples".into()));
    }
    if unlabeled.is_empty() {
        return Err(Error::Data("self-training needs an unlabeled pool".into()));
    }
    let initial = params.clone();
    let (mut teacher, mut report) =
        stage3_finetune(params, strong, k, cfg, FinetuneMode::Vanilla, vocab, scheme)?;
    for round in 1..=rounds as u64 {
        let predicted = predict_tags(&teacher, unlabeled, k, vocab, scheme)?;
        let mut data: Vec<QueryExample> = unlabeled
            .iter()
            .zip(predicted)
            .map(|(e, tags)| {
                QueryExample::new(
                    e.query.clone(),
                    e.titles.clone(),
                    Some(repair_bio(&tags)),
                    Quality::Weak,
                    Source::Synthetic,
                )
            })
            .collect::<Result<_>>()?;
        data.extend(strong.iter().cloned());
        let student_cfg = StageConfig { seed: derive_seed(cfg.seed, round), ..cfg.clone() };
        let (student, student_report) = stage3_finetune(
            initial.clone(),
            &data,
            k,
            &student_cfg,
            FinetuneMode::Vanilla,
            vocab,
            scheme,
        )?;
        teacher = student;
        report = student_report;
    }
    report.stage = "self-training".to_string();
    Ok((teacher, report))
}

/// VAT baseline: supervised cross-entropy on strong data plus the
/// divergence at the PGD worst perturbation on unlabeled data, whose
/// labels are never consumed. An empty unlabeled pool reduces the loss to
/// plain strong-only fine-tuning.
pub fn vat_baseline(
    mut params: ModelParameters,
    strong: &[QueryExample],
    unlabeled: &[QueryExample],
    k: usize,
    cfg: &StageConfig,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<(ModelParameters, TrainReport)> {
    cfg.expect(StageTag::Finetune)?;
    if strong.is_empty() {
        return Err(Error::Data("VAT needs strong examples".into()));
    }
    if !unlabeled.is_empty() {
        cfg.perturbation.validate()?;
    }
    let started = Instant::now();
    let mut optimizer =
        Adam::new(AdamConfig { lr: cfg.learning_rate, ..AdamConfig::default() });
    let max_seq_len = params.config().max_seq_len;
    let mut train_loss = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs as u64 {
        let mut order = stream(cfg.seed, &[ORDER, epoch]);
        let batches = epoch_batches(strong.len(), cfg.batch_size, &mut order);
        let mut unlabeled_order: Vec<usize> = (0..unlabeled.len()).collect();
        stream(cfg.seed, &[UNLABELED_ORDER, epoch]).shuffle(&mut unlabeled_order);
        let mut total = 0.0;
        for (b, ids) in batches.iter().enumerate() {
            let chunk = gather(strong, ids);
            let batch = encode_batch(&chunk, k, max_seq_len, vocab, scheme)?;
            let mut dropout = stream(cfg.seed, &[DROPOUT, epoch]).fork(b as u64);
            let mut pass = params.begin(&batch)?;
            let x = pass.embed()?;
            let h = pass.encode(x, &mut Mode::Train { dropout_rng: &mut dropout })?;
            let z = pass.tag_logits(h)?;
            let ce = pass.supervised_loss(z)?;
            let mut step_loss = pass.value(ce).item()?;
            let mut grads = pass.backward(ce)?;
            let mut combined = pass.parameter_grads(&mut grads);

            if !unlabeled.is_empty() {
                // Pair each strong batch with the next slice of the
                // shuffled unlabeled pool, wrapping around.
                let u_ids: Vec<usize> = (0..cfg.batch_size.min(unlabeled.len()))
                    .map(|j| {
                        unlabeled_order[(b * cfg.batch_size + j) % unlabeled.len()]
                    })
                    .collect();
                let u_chunk = gather(unlabeled, &u_ids);
                let u_batch = encode_batch(&u_chunk, k, max_seq_len, vocab, scheme)?;
                let clean = clean_reference(&params, &u_batch)?;
                let mut perturb = stream(cfg.seed, &[PERTURB, epoch]).fork(b as u64);
                let worst =
                    ascend_from(&params, &u_batch, &clean, &cfg.perturbation, &mut perturb)?;
                let (vpass, lv, _) =
                    virtual_loss_graph(&params, &u_batch, &clean, worst.delta)?;
                step_loss += vpass.value(lv).item()?;
                let mut vgrads = vpass.backward(lv)?;
                let vvec = vpass.parameter_grads(&mut vgrads);
                combined = add_grads(combined, vvec)?;
            }
            optimizer.step(params.tensors_mut(), &combined)?;
            total += step_loss;
        }
        train_loss.push(total / batches.len() as f64);
    }
    let best = cfg.epochs;
    let mut report = TrainReport::new("vat", train_loss, best, started);
    report.checkpoint = None;
    Ok((params, report))
}

/// Everything the pipeline trains and tests on. Stage inputs may be empty
/// only when the corresponding stage is disabled.
#[derive(Debug, Clone, Copy)]
pub struct PipelineData<'a> {
    pub unlabeled: &'a [QueryExample],
    pub weak: &'a [QueryExample],
    pub strong: &'a [QueryExample],
    pub test: &'a [QueryExample],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub master_seed: u64,
    /// Titles concatenated after each query.
    pub title_count: usize,
    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,
    /// `None` skips the stage.
    pub stage1: Option<StageConfig>,
    pub stage2: Option<StageConfig>,
    pub stage3: Option<StageConfig>,
    pub finetune_mode: FinetuneMode,
}

impl PipelineConfig {
    /// Default three-stage run. Per-stage seeds are derived from the
    /// master seed, so two configs built from the same master seed agree
    /// on batch order, initialization, and every other draw.
    pub fn new(master_seed: u64) -> Self {
        let dims = ModelConfig::with_dims(1, 1);
        PipelineConfig {
            master_seed,
            title_count: 2,
            embed_dim: dims.embed_dim,
            ffn_dim: dims.ffn_dim,
            encoder_layers: dims.encoder_layers,
            max_seq_len: dims.max_seq_len,
            dropout_rate: dims.dropout_rate,
            stage1: Some(StageConfig::pretrain(derive_seed(master_seed, 1))),
            stage2: Some(StageConfig::weak_train(derive_seed(master_seed, 2))),
            stage3: Some(StageConfig::finetune(derive_seed(master_seed, 3))),
            finetune_mode: FinetuneMode::Adversarial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("embed_dim", self.embed_dim),
            ("ffn_dim", self.ffn_dim),
            ("encoder_layers", self.encoder_layers),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} must lie in [0, 1)",
                self.dropout_rate
            )));
        }
        for (cfg, want, name) in [
            (&self.stage1, StageTag::Pretrain, "stage1"),
            (&self.stage2, StageTag::WeakTrain, "stage2"),
            (&self.stage3, StageTag::Finetune, "stage3"),
        ] {
            if let Some(cfg) = cfg {
                cfg.validate()?;
                if cfg.stage != want {
                    return Err(Error::Config(format!(
                        "{name} config carries tag {}, expected {want}",
                        cfg.stage
                    )));
                }
            }
        }
        Ok(())
    }

    /// The dev fraction actually applied to the strong set: stage 2's if
    /// present (it owns early stopping), otherwise the first enabled
    /// stage's, so ablation arms that drop stage 2 keep the same split.
    fn dev_fraction(&self) -> f64 {
        self.stage2
            .as_ref()
            .or(self.stage3.as_ref())
            .or(self.stage1.as_ref())
            .map_or(0.0, |c| c.dev_fraction)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineReport {
    pub stage1: Option<TrainReport>,
    pub stage2: Option<TrainReport>,
    pub stage3: Option<TrainReport>,
    pub test: TaggingReport,
    pub final_checkpoint: Option<PathBuf>,
}

/// Vocabulary over every query and title in the given sets.
pub fn build_vocab(sets: &[&[QueryExample]]) -> Vocabulary {
    let mut tokens: Vec<&str> = Vec::new();
    for set in sets {
        for e in *set {
            tokens.extend(e.query.iter().map(String::as_str));
            for title in &e.titles {
                tokens.extend(title.iter().map(String::as_str));
            }
        }
    }
    Vocabulary::build(tokens)
}

/// Shuffle-split the strong set into (train, dev), preserving corpus
/// order within each half so the split is stable under re-seeding only.
pub fn split_dev(
    strong: &[QueryExample],
    fraction: f64,
    mut rng: Rng,
) -> (Vec<QueryExample>, Vec<QueryExample>) {
    let mut order: Vec<usize> = (0..strong.len()).collect();
    rng.shuffle(&mut order);
    let dev_n = ((strong.len() as f64 * fraction).round() as usize).min(strong.len());
    let (dev_idx, train_idx) = order.split_at(dev_n);
    let mut dev_idx = dev_idx.to_vec();
    let mut train_idx = train_idx.to_vec();
    dev_idx.sort_unstable();
    train_idx.sort_unstable();
    (gather(strong, &train_idx), gather(strong, &dev_idx))
}

/// Chain the enabled stages, each consuming the previous stage's weights,
/// then score the result on the test set. With a run directory, saves a
/// checkpoint after each stage plus a final one.
pub fn run_pipeline(
    data: &PipelineData<'_>,
    scheme: &LabelScheme,
    config: &PipelineConfig,
    run_dir: Option<&Path>,
) -> Result<(ModelParameters, Vocabulary, PipelineReport)> {
    config.validate()?;
    if config.stage1.is_some() && data.unlabeled.is_empty() {
        return Err(Error::Data("stage 1 is enabled but the unlabeled set is empty".into()));
    }
    if config.stage2.is_some() && data.weak.is_empty() {
        return Err(Error::Data("stage 2 is enabled but the weak set is empty".into()));
    }
    if config.stage3.is_some() && data.strong.is_empty() {
        return Err(Error::Data("stage 3 is enabled but the strong set is empty".into()));
    }
    if data.test.is_empty() {
        return Err(Error::Data("the test set is empty".into()));
    }

    let vocab = build_vocab(&[data.unlabeled, data.weak, data.strong]);
    let mut model_config = ModelConfig::with_dims(vocab.len(), scheme.num_tags());
    model_config.embed_dim = config.embed_dim;
    model_config.ffn_dim = config.ffn_dim;
    model_config.encoder_layers = config.encoder_layers;
    model_config.max_seq_len = config.max_seq_len;
    model_config.dropout_rate = config.dropout_rate;
    let mut init_rng = stream(config.master_seed, &[INIT]);
    let mut params = ModelParameters::init(model_config, &mut init_rng)?;

    let (strong_train, dev) =
        split_dev(data.strong, config.dev_fraction(), stream(config.master_seed, &[SPLIT]));
    let k = config.title_count;

    let save = |params: &ModelParameters, name: &str| -> Result<Option<PathBuf>> {
        match run_dir {
            Some(dir) => {
                let path = dir.join(name);
                save_checkpoint(&path, params, &vocab, scheme)?;
                Ok(Some(path))
            }
            None => Ok(None),
        }
    };

    let mut stage1 = None;
    if let Some(cfg) = &config.stage1 {
        let (p, mut r) = stage1_pretrain(params, data.unlabeled, k, cfg, &vocab)?;
        params = p;
        r.checkpoint = save(&params, "stage1.ckpt")?;
        stage1 = Some(r);
    }
    let mut stage2 = None;
    if let Some(cfg) = &config.stage2 {
        if dev.is_empty() {
            return Err(Error::Config(
                "stage 2 needs a dev split; raise dev_fraction or the strong set size".into(),
            ));
        }
        let (p, mut r) = stage2_weak_train(params, data.weak, &dev, k, cfg, &vocab, scheme)?;
        params = p;
        r.checkpoint = save(&params, "stage2.ckpt")?;
        stage2 = Some(r);
    }
    let mut stage3 = None;
    if let Some(cfg) = &config.stage3 {
        let (p, mut r) = stage3_finetune(
            params,
            &strong_train,
            k,
            cfg,
            config.finetune_mode,
            &vocab,
            scheme,
        )?;
        params = p;
        r.checkpoint = save(&params, "stage3.ckpt")?;
        stage3 = Some(r);
    }

    let test = score_model(&params, data.test, k, &vocab, scheme)?;
    let final_checkpoint = save(&params, "final.ckpt")?;
    let report = PipelineReport { stage1, stage2, stage3, test, final_checkpoint };
    Ok((params, vocab, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, GeneratorConfig, SyntheticCorpus};
    use crate::model::{load_checkpoint, tensor_names};

    fn tiny_corpus() -> SyntheticCorpus {
        let config = GeneratorConfig {
            unlabeled: 120,
            weak: 80,
            strong: 40,
            test: 40,
            lexicon_size: 30,
            ..GeneratorConfig::default()
        };
        generate_synthetic_corpus(&config, &Rng::new(11)).unwrap()
    }

    fn tiny_model(vocab: &Vocabulary, scheme: &LabelScheme, seed: u64) -> ModelParameters {
        let mut config = ModelConfig::with_dims(vocab.len(), scheme.num_tags());
        config.embed_dim = 16;
        config.ffn_dim = 32;
        ModelParameters::init(config, &mut stream(seed, &[INIT])).unwrap()
    }

    fn same_weights(a: &ModelParameters, b: &ModelParameters) -> bool {
        a.tensors().len() == b.tensors().len()
            && a.tensors().iter().zip(b.tensors()).all(|(x, y)| x.data() == y.data())
    }

    #[test]
    fn zero_epoch_stages_return_the_input_weights_bitwise() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 1);
        let (dev, _) = corpus.strong.split_at(4);

        let cfg = StageConfig { epochs: 0, ..StageConfig::pretrain(7) };
        let (out, report) =
            stage1_pretrain(model.clone(), &corpus.unlabeled, 1, &cfg, &vocab).unwrap();
        assert!(same_weights(&model, &out));
        assert_eq!(report.epochs_run, 0);

        let cfg = StageConfig { epochs: 0, ..StageConfig::weak_train(7) };
        let (out, report) =
            stage2_weak_train(model.clone(), &corpus.weak, dev, 1, &cfg, &vocab, &corpus.scheme)
                .unwrap();
        assert!(same_weights(&model, &out));
        assert_eq!(report.best_epoch, 0);

        let cfg = StageConfig { epochs: 0, ..StageConfig::finetune(7) };
        let (out, _) = stage3_finetune(
            model.clone(),
            &corpus.strong,
            1,
            &cfg,
            FinetuneMode::Vanilla,
            &vocab,
            &corpus.scheme,
        )
        .unwrap();
        assert!(same_weights(&model, &out));
    }

    #[test]
    fn pretraining_reduces_the_masked_language_loss() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 2);
        let cfg = StageConfig { epochs: 6, ..StageConfig::pretrain(7) };
        let (_, report) = stage1_pretrain(model, &corpus.unlabeled, 1, &cfg, &vocab).unwrap();
        assert_eq!(report.train_loss.len(), 6);
        assert!(
            report.train_loss[5] < report.train_loss[0],
            "MLM loss did not drop: {:?}",
            report.train_loss
        );
    }

    #[test]
    fn pretraining_beats_chance_at_masked_token_prediction() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 3);
        let untrained =
            masked_prediction_accuracy(&model, &corpus.test, 1, &vocab, &mut Rng::new(40))
                .unwrap();
        let cfg = StageConfig { epochs: 6, ..StageConfig::pretrain(7) };
        let (trained, _) = stage1_pretrain(model, &corpus.unlabeled, 1, &cfg, &vocab).unwrap();
        let accuracy =
            masked_prediction_accuracy(&trained, &corpus.test, 1, &vocab, &mut Rng::new(40))
                .unwrap();
        assert!(
            accuracy > untrained && accuracy > 0.1,
            "masked accuracy {accuracy:.3} vs untrained {untrained:.3}"
        );
    }

    #[test]
    fn pretraining_never_touches_the_tag_head() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 4);
        let names = tensor_names(model.config());
        let cls: Vec<usize> = names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.starts_with("cls_"))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(cls.len(), 2);
        let cfg = StageConfig { epochs: 2, ..StageConfig::pretrain(7) };
        let (trained, _) =
            stage1_pretrain(model.clone(), &corpus.unlabeled, 1, &cfg, &vocab).unwrap();
        assert!(!same_weights(&model, &trained));
        for i in cls {
            assert_eq!(model.tensors()[i].data(), trained.tensors()[i].data(), "{}", names[i]);
        }
    }

    #[test]
    fn weak_training_returns_the_weights_of_the_best_dev_epoch() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 5);
        let (dev, _) = corpus.strong.split_at(8);
        let cfg =
            StageConfig { epochs: 6, patience: 6, ..StageConfig::weak_train(7) };
        let (best, report) =
            stage2_weak_train(model, &corpus.weak, dev, 1, &cfg, &vocab, &corpus.scheme)
                .unwrap();
        let trace = report.dev_overall_f1.unwrap();
        let max = trace.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let rescored =
            score_model(&best, dev, 1, &vocab, &corpus.scheme).unwrap().overall_f1();
        assert_eq!(rescored, max);
        assert_eq!(rescored, trace[report.best_epoch - 1]);
    }

    #[test]
    fn patience_stops_weak_training_once_dev_f1_stalls() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 6);
        let (dev, _) = corpus.strong.split_at(8);
        let cfg = StageConfig {
            epochs: 60,
            patience: 1,
            learning_rate: 3e-2,
            ..StageConfig::weak_train(7)
        };
        let (_, report) =
            stage2_weak_train(model, &corpus.weak, dev, 1, &cfg, &vocab, &corpus.scheme)
                .unwrap();
        assert!(report.epochs_run < 60, "never stalled in {} epochs", report.epochs_run);
        let trace = report.dev_overall_f1.unwrap();
        assert!(trace.last().unwrap() <= &trace[report.best_epoch - 1]);
    }

    #[test]
    fn weak_and_finetune_trainers_walk_the_same_trajectory() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 7);
        let (dev, _) = corpus.strong.split_at(4);
        let weak_cfg = StageConfig { epochs: 3, patience: 4, ..StageConfig::weak_train(7) };
        let fine_cfg = StageConfig { epochs: 3, ..StageConfig::finetune(7) };
        let (_, weak_report) = stage2_weak_train(
            model.clone(), &corpus.weak, dev, 1, &weak_cfg, &vocab, &corpus.scheme,
        )
        .unwrap();
        let (_, fine_report) = stage3_finetune(
            model, &corpus.weak, 1, &fine_cfg, FinetuneMode::Vanilla, &vocab, &corpus.scheme,
        )
        .unwrap();
        assert_eq!(weak_report.train_loss, fine_report.train_loss);
    }

    #[test]
    fn zero_radius_collapses_every_mode_to_vanilla() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 8);
        let run = |mode: FinetuneMode| -> ModelParameters {
            let mut cfg = StageConfig { epochs: 2, ..StageConfig::finetune(7) };
            cfg.perturbation.epsilon = 0.0;
            stage3_finetune(
                model.clone(), &corpus.strong, 1, &cfg, mode, &vocab, &corpus.scheme,
            )
            .unwrap()
            .0
        };
        let vanilla = run(FinetuneMode::Vanilla);
        assert!(same_weights(&vanilla, &run(FinetuneMode::Virtual)));
        assert!(same_weights(&vanilla, &run(FinetuneMode::Adversarial)));
    }

    #[test]
    fn vat_without_unlabeled_data_is_plain_finetuning() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 9);
        let cfg = StageConfig { epochs: 2, ..StageConfig::finetune(7) };
        let (vat, _) =
            vat_baseline(model.clone(), &corpus.strong, &[], 1, &cfg, &vocab, &corpus.scheme)
                .unwrap();
        let (plain, _) = stage3_finetune(
            model, &corpus.strong, 1, &cfg, FinetuneMode::Vanilla, &vocab, &corpus.scheme,
        )
        .unwrap();
        assert!(same_weights(&vat, &plain));
    }

    #[test]
    fn vat_adds_a_nonnegative_divergence_to_the_loss() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 10);
        let cfg = StageConfig {
            epochs: 1,
            batch_size: corpus.strong.len(),
            ..StageConfig::finetune(7)
        };
        let (_, vat) = vat_baseline(
            model.clone(), &corpus.strong, &corpus.unlabeled, 1, &cfg, &vocab, &corpus.scheme,
        )
        .unwrap();
        let (_, plain) = stage3_finetune(
            model, &corpus.strong, 1, &cfg, FinetuneMode::Vanilla, &vocab, &corpus.scheme,
        )
        .unwrap();
        assert!(vat.train_loss[0] >= plain.train_loss[0] - 1e-12);
    }

    #[test]
    fn self_training_with_zero_rounds_is_the_plain_teacher() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 11);
        let cfg = StageConfig { epochs: 2, ..StageConfig::finetune(7) };
        let (student, report) = self_training_baseline(
            model.clone(),
            &corpus.strong,
            &corpus.unlabeled,
            1,
            &cfg,
            0,
            &vocab,
            &corpus.scheme,
        )
        .unwrap();
        let (plain, _) = stage3_finetune(
            model, &corpus.strong, 1, &cfg, FinetuneMode::Vanilla, &vocab, &corpus.scheme,
        )
        .unwrap();
        assert!(same_weights(&student, &plain));
        assert_eq!(report.stage, "self-training");
    }

    #[test]
    fn one_self_training_round_retrains_a_student() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 12);
        let cfg = StageConfig { epochs: 1, ..StageConfig::finetune(7) };
        let (student, report) = self_training_baseline(
            model.clone(),
            &corpus.strong,
            &corpus.unlabeled[..40],
            1,
            &cfg,
            1,
            &vocab,
            &corpus.scheme,
        )
        .unwrap();
        let (teacher, _) = stage3_finetune(
            model, &corpus.strong, 1, &cfg, FinetuneMode::Vanilla, &vocab, &corpus.scheme,
        )
        .unwrap();
        assert!(!same_weights(&student, &teacher));
        assert_eq!(report.epochs_run, 1);
    }

    #[test]
    fn predicted_tags_cover_every_query_token() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 13);
        let tags = predict_tags(&model, &corpus.test, 2, &vocab, &corpus.scheme).unwrap();
        assert_eq!(tags.len(), corpus.test.len());
        for (example, predicted) in corpus.test.iter().zip(&tags) {
            assert_eq!(predicted.len(), example.query.len());
            for tag in predicted {
                corpus.scheme.tag_id(tag).unwrap();
            }
        }
    }

    #[test]
    fn flip_rate_is_a_deterministic_fraction() {
        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.unlabeled, &corpus.weak, &corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 14);
        let pcfg = PerturbationConfig::default();
        let once = flip_rate_under_perturbation(
            &model, &corpus.test, 1, &pcfg, &mut Rng::new(3), &vocab, &corpus.scheme,
        )
        .unwrap();
        let again = flip_rate_under_perturbation(
            &model, &corpus.test, 1, &pcfg, &mut Rng::new(3), &vocab, &corpus.scheme,
        )
        .unwrap();
        assert_eq!(once, again);
        assert!((0.0..=1.0).contains(&once));
    }

    #[test]
    fn split_dev_partitions_the_strong_set() {
        let corpus = tiny_corpus();
        let (train, dev) = split_dev(&corpus.strong, 0.1, Rng::new(99));
        assert_eq!(dev.len(), 4);
        assert_eq!(train.len(), 36);
        for example in &dev {
            assert!(!train.contains(example));
        }
        let (train2, dev2) = split_dev(&corpus.strong, 0.1, Rng::new(99));
        assert_eq!(train, train2);
        assert_eq!(dev, dev2);
    }

    #[test]
    fn vocabulary_covers_title_tokens() {
        let example = QueryExample::unlabeled(
            vec!["juniper".into()],
            vec![vec!["kelvin".into(), "quartz".into()]],
        )
        .unwrap();
        let vocab = build_vocab(&[&[example][..]]);
        let unk = vocab.id("never-seen-token");
        assert_ne!(vocab.id("kelvin"), unk);
        assert_ne!(vocab.id("quartz"), unk);
        assert_ne!(vocab.id("juniper"), unk);
    }

    #[test]
    fn stage_configs_reject_bad_values_and_wrong_trainers() {
        let mut cfg = StageConfig::finetune(7);
        cfg.batch_size = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = StageConfig::finetune(7);
        cfg.learning_rate = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = StageConfig::finetune(7);
        cfg.dev_fraction = 1.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let mut cfg = StageConfig::weak_train(7);
        cfg.patience = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));

        let corpus = tiny_corpus();
        let vocab = build_vocab(&[&corpus.strong]);
        let model = tiny_model(&vocab, &corpus.scheme, 15);
        let wrong = StageConfig::pretrain(7);
        let err = stage3_finetune(
            model,
            &corpus.strong,
            1,
            &wrong,
            FinetuneMode::Vanilla,
            &vocab,
            &corpus.scheme,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn pipeline_rejects_misfiled_stage_configs() {
        let mut config = PipelineConfig::new(7);
        config.stage2 = Some(StageConfig::finetune(3));
        let err = config.validate().unwrap_err();
        assert!(err.to_string().contains("stage2"));
    }

    #[test]
    fn pipeline_with_every_stage_disabled_scores_the_raw_model() {
        let corpus = tiny_corpus();
        let mut config = PipelineConfig::new(7);
        config.embed_dim = 16;
        config.ffn_dim = 32;
        config.stage1 = None;
        config.stage2 = None;
        config.stage3 = None;
        let data = PipelineData {
            unlabeled: &[],
            weak: &[],
            strong: &corpus.strong,
            test: &corpus.test,
        };
        let dir = tempfile::tempdir().unwrap();
        let (_, _, report) =
            run_pipeline(&data, &corpus.scheme, &config, Some(dir.path())).unwrap();
        assert!(report.stage1.is_none() && report.stage2.is_none() && report.stage3.is_none());
        let path = report.final_checkpoint.unwrap();
        load_checkpoint(&path).unwrap();
    }

    #[test]
    fn an_enabled_stage_with_no_data_is_an_error() {
        let corpus = tiny_corpus();
        let mut config = PipelineConfig::new(7);
        config.embed_dim = 16;
        config.ffn_dim = 32;
        let data = PipelineData {
            unlabeled: &[],
            weak: &corpus.weak,
            strong: &corpus.strong,
            test: &corpus.test,
        };
        let err = run_pipeline(&data, &corpus.scheme, &config, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));

        config.stage1 = None;
        config.stage2 = None;
        config.stage3 = None;
        let no_test = PipelineData { unlabeled: &[], weak: &[], strong: &[], test: &[] };
        let err = run_pipeline(&no_test, &corpus.scheme, &config, None).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn identical_pipeline_runs_agree_bitwise() {
        let corpus = tiny_corpus();
        let mut config = PipelineConfig::new(7);
        config.embed_dim = 16;
        config.ffn_dim = 32;
        config.title_count = 1;
        config.stage1 = Some(StageConfig { epochs: 1, ..StageConfig::pretrain(derive_seed(7, 1)) });
        config.stage2 =
            Some(StageConfig { epochs: 2, ..StageConfig::weak_train(derive_seed(7, 2)) });
        config.stage3 =
            Some(StageConfig { epochs: 1, ..StageConfig::finetune(derive_seed(7, 3)) });
        let data = PipelineData {
            unlabeled: &corpus.unlabeled,
            weak: &corpus.weak,
            strong: &corpus.strong,
            test: &corpus.test,
        };
        let run = |dir: &Path| {
            let (params, _, report) =
                run_pipeline(&data, &corpus.scheme, &config, Some(dir)).unwrap();
            let metrics = serde_json::to_string(&report.test).unwrap();
            (params, metrics)
        };
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (params_a, metrics_a) = run(dir_a.path());
        let (params_b, metrics_b) = run(dir_b.path());
        assert!(same_weights(&params_a, &params_b));
        assert_eq!(metrics_a, metrics_b);
        let bytes_a = std::fs::read(dir_a.path().join("final.ckpt")).unwrap();
        let bytes_b = std::fs::read(dir_b.path().join("final.ckpt")).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}
