//! The flat run configuration shared by every subcommand.
//!
//! Three layers, later wins: built-in defaults, a config file of
//! `key = value` lines (dotted keys, `#` comments), then command-line
//! flags. Unknown keys are rejected, not ignored, so a typo can never
//! silently fall back to a default.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use deeptagger::adversarial::{PerturbationConfig, PerturbationNorm};
use deeptagger::corpus::GeneratorConfig;
use deeptagger::model::ModelConfig;
use deeptagger::training::{FinetuneMode, PipelineConfig};
use deeptagger::weak::{MockBehavior, PolarityOrder, PromptStrategy, StrategyKind};
use deeptagger::{Error, Result};

/// Which completion client backs weak labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClientKind {
    Mock,
    Remote,
}

impl ClientKind {
    fn parse(value: &str) -> Result<Self> {
        match value {
            "mock" => Ok(ClientKind::Mock),
            "remote" => Ok(ClientKind::Remote),
            other => Err(Error::Config(format!(
                "unknown client {other:?}, expected mock or remote"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            ClientKind::Mock => "mock",
            ClientKind::Remote => "remote",
        }
    }
}

/// One sweep dimension of the ablate subcommand.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Stage1,
    Mode,
    TitleCount,
}

impl Axis {
    fn parse(value: &str) -> Result<Self> {
        match value {
            "stage1" => Ok(Axis::Stage1),
            "mode" => Ok(Axis::Mode),
            "k" => Ok(Axis::TitleCount),
            other => Err(Error::Config(format!(
                "unknown ablation axis {other:?}, expected stage1, mode, or k"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Axis::Stage1 => "stage1",
            Axis::Mode => "mode",
            Axis::TitleCount => "k",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub title_count: usize,
    pub run_dir: Option<PathBuf>,

    pub data_unlabeled: Option<PathBuf>,
    pub data_weak: Option<PathBuf>,
    pub data_strong: Option<PathBuf>,
    pub data_test: Option<PathBuf>,

    pub gen: GeneratorConfig,

    pub embed_dim: usize,
    pub ffn_dim: usize,
    pub encoder_layers: usize,
    pub max_seq_len: usize,
    pub dropout_rate: f64,

    pub stage1_skip: bool,
    pub stage1_epochs: usize,
    pub stage1_batch_size: usize,
    pub stage1_lr: f64,
    pub stage2_skip: bool,
    pub stage2_epochs: usize,
    pub stage2_batch_size: usize,
    pub stage2_lr: f64,
    pub stage2_patience: usize,
    pub stage3_skip: bool,
    pub stage3_epochs: usize,
    pub stage3_batch_size: usize,
    pub stage3_lr: f64,
    pub stage3_mode: FinetuneMode,
    pub dev_fraction: f64,

    pub adv: PerturbationConfig,

    pub weak_strategy: StrategyKind,
    pub weak_demo_count: usize,
    pub weak_polarity: PolarityOrder,
    pub weak_prompt_titles: usize,
    pub weak_client: ClientKind,
    pub mock: MockBehavior,
    pub rejection_threshold: f64,
    pub weak_input: Option<PathBuf>,
    pub weak_output: Option<PathBuf>,

    pub checkpoint: Option<PathBuf>,
    pub predictions: Option<PathBuf>,

    pub ablate_axes: Vec<Axis>,
    pub ablate_seeds: usize,
    pub ablate_ks: Vec<usize>,
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let dims = ModelConfig::with_dims(1, 1);
        let stages = PipelineConfig::new(0);
        let stage1 = stages.stage1.unwrap();
        let stage2 = stages.stage2.unwrap();
        let stage3 = stages.stage3.unwrap();
        RunConfig {
            seed: 17,
            title_count: stages.title_count,
            run_dir: None,
            data_unlabeled: None,
            data_weak: None,
            data_strong: None,
            data_test: None,
            gen: GeneratorConfig::default(),
            embed_dim: dims.embed_dim,
            ffn_dim: dims.ffn_dim,
            encoder_layers: dims.encoder_layers,
            max_seq_len: dims.max_seq_len,
            dropout_rate: dims.dropout_rate,
            stage1_skip: false,
            stage1_epochs: stage1.epochs,
            stage1_batch_size: stage1.batch_size,
            stage1_lr: stage1.learning_rate,
            stage2_skip: false,
            stage2_epochs: stage2.epochs,
            stage2_batch_size: stage2.batch_size,
            stage2_lr: stage2.learning_rate,
            stage2_patience: stage2.patience,
            stage3_skip: false,
            stage3_epochs: stage3.epochs,
            stage3_batch_size: stage3.batch_size,
            stage3_lr: stage3.learning_rate,
            stage3_mode: stages.finetune_mode,
            dev_fraction: stage3.dev_fraction,
            adv: PerturbationConfig::default(),
            weak_strategy: StrategyKind::ChainOfThoughts,
            weak_demo_count: 3,
            weak_polarity: PolarityOrder::Positive,
            weak_prompt_titles: 3,
            weak_client: ClientKind::Mock,
            mock: MockBehavior::default(),
            rejection_threshold: 1.0,
            weak_input: None,
            weak_output: None,
            checkpoint: None,
            predictions: None,
            ablate_axes: vec![Axis::TitleCount],
            ablate_seeds: 5,
            ablate_ks: vec![0, 1, 2, 3],
            jobs: 1,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .parse::<T>()
        .map_err(|e| Error::Config(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_polarity(value: &str) -> Result<PolarityOrder> {
    match value {
        "positive" => Ok(PolarityOrder::Positive),
        "positive-then-negative" => Ok(PolarityOrder::PositiveThenNegative),
        "negative-then-positive" => Ok(PolarityOrder::NegativeThenPositive),
        other => Err(Error::Config(format!(
            "unknown polarity order {other:?}, expected positive, \
             positive-then-negative, or negative-then-positive"
        ))),
    }
}

fn polarity_name(order: PolarityOrder) -> &'static str {
    match order {
        PolarityOrder::Positive => "positive",
        PolarityOrder::PositiveThenNegative => "positive-then-negative",
        PolarityOrder::NegativeThenPositive => "negative-then-positive",
    }
}

impl RunConfig {
    /// Defaults overlaid with a config file, when one is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = RunConfig::default();
        if let Some(path) = path {
            config.apply_file(path)?;
        }
        Ok(config)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        for (index, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!(
                    "{}:{}: expected `key = value`, got {line:?}",
                    path.display(),
                    index + 1
                ))
            })?;
            self.set(key.trim(), value.trim())?;
        }
        Ok(())
    }

    /// Apply one dotted key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "title-count" => self.title_count = parse(key, value)?,
            "run-dir" => self.run_dir = Some(PathBuf::from(value)),

            "data.unlabeled" => self.data_unlabeled = Some(PathBuf::from(value)),
            "data.weak" => self.data_weak = Some(PathBuf::from(value)),
            "data.strong" => self.data_strong = Some(PathBuf::from(value)),
            "data.test" => self.data_test = Some(PathBuf::from(value)),

            "gen.unlabeled" => self.gen.unlabeled = parse(key, value)?,
            "gen.weak" => self.gen.weak = parse(key, value)?,
            "gen.strong" => self.gen.strong = parse(key, value)?,
            "gen.test" => self.gen.test = parse(key, value)?,
            "gen.lexicon-size" => self.gen.lexicon_size = parse(key, value)?,
            "gen.two-token-entity-prob" => self.gen.two_token_entity_prob = parse(key, value)?,
            "gen.ambiguous-tokens" => self.gen.ambiguous_tokens = parse(key, value)?,
            "gen.ambiguous-query-prob" => self.gen.ambiguous_query_prob = parse(key, value)?,
            "gen.noise-rate" => self.gen.noise_rate = parse(key, value)?,
            "gen.titles-per-query" => self.gen.titles_per_query = parse(key, value)?,
            "gen.title-informative-prob" => {
                self.gen.title_informative_prob = parse(key, value)?;
            }

            "model.embed-dim" => self.embed_dim = parse(key, value)?,
            "model.ffn-dim" => self.ffn_dim = parse(key, value)?,
            "model.layers" => self.encoder_layers = parse(key, value)?,
            "model.max-seq-len" => self.max_seq_len = parse(key, value)?,
            "model.dropout" => self.dropout_rate = parse(key, value)?,

            "stage1.skip" => self.stage1_skip = parse(key, value)?,
            "stage1.epochs" => self.stage1_epochs = parse(key, value)?,
            "stage1.batch-size" => self.stage1_batch_size = parse(key, value)?,
            "stage1.lr" => self.stage1_lr = parse(key, value)?,
            "stage2.skip" => self.stage2_skip = parse(key, value)?,
            "stage2.epochs" => self.stage2_epochs = parse(key, value)?,
            "stage2.batch-size" => self.stage2_batch_size = parse(key, value)?,
            "stage2.lr" => self.stage2_lr = parse(key, value)?,
            "stage2.patience" => self.stage2_patience = parse(key, value)?,
            "stage3.skip" => self.stage3_skip = parse(key, value)?,
            "stage3.epochs" => self.stage3_epochs = parse(key, value)?,
            "stage3.batch-size" => self.stage3_batch_size = parse(key, value)?,
            "stage3.lr" => self.stage3_lr = parse(key, value)?,
            "stage3.mode" => self.stage3_mode = parse(key, value)?,
            "dev-fraction" => self.dev_fraction = parse(key, value)?,

            "adv.epsilon" => self.adv.epsilon = parse(key, value)?,
            "adv.eta" => self.adv.eta = parse(key, value)?,
            "adv.steps" => self.adv.steps = parse(key, value)?,
            "adv.norm" => self.adv.norm = parse(key, value)?,
            "adv.init-scale" => self.adv.init_scale = parse(key, value)?,

            "weak.strategy" => self.weak_strategy = parse(key, value)?,
            "weak.demo-count" => self.weak_demo_count = parse(key, value)?,
            "weak.polarity-order" => self.weak_polarity = parse_polarity(value)?,
            "weak.prompt-titles" => self.weak_prompt_titles = parse(key, value)?,
            "weak.client" => self.weak_client = ClientKind::parse(value)?,
            "weak.mock-bare-flip" => self.mock.bare_flip = parse(key, value)?,
            "weak.mock-demo-flip" => self.mock.demo_flip = parse(key, value)?,
            "weak.mock-title-flip" => self.mock.title_flip = parse(key, value)?,
            "weak.mock-malformed-rate" => self.mock.malformed_rate = parse(key, value)?,
            "weak.rejection-threshold" => self.rejection_threshold = parse(key, value)?,
            "weak.input" => self.weak_input = Some(PathBuf::from(value)),
            "weak.output" => self.weak_output = Some(PathBuf::from(value)),

            "eval.checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "eval.predictions" => self.predictions = Some(PathBuf::from(value)),

            "ablate.axes" => {
                self.ablate_axes = value
                    .split(',')
                    .map(|axis| Axis::parse(axis.trim()))
                    .collect::<Result<_>>()?;
            }
            "ablate.seeds" => self.ablate_seeds = parse(key, value)?,
            "ablate.ks" => {
                self.ablate_ks = value
                    .split(',')
                    .map(|k| parse("ablate.ks", k.trim()))
                    .collect::<Result<_>>()?;
            }
            "ablate.jobs" => self.jobs = parse(key, value)?,

            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// The effective configuration as sorted `key = value` lines, the
    /// same format the config file uses.
    pub fn snapshot(&self) -> String {
        fn path(p: &Option<PathBuf>) -> String {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        }
        let mut pairs: Vec<(String, String)> = vec![
            ("seed".into(), self.seed.to_string()),
            ("title-count".into(), self.title_count.to_string()),
            ("run-dir".into(), path(&self.run_dir)),
            ("data.unlabeled".into(), path(&self.data_unlabeled)),
            ("data.weak".into(), path(&self.data_weak)),
            ("data.strong".into(), path(&self.data_strong)),
            ("data.test".into(), path(&self.data_test)),
            ("gen.unlabeled".into(), self.gen.unlabeled.to_string()),
            ("gen.weak".into(), self.gen.weak.to_string()),
            ("gen.strong".into(), self.gen.strong.to_string()),
            ("gen.test".into(), self.gen.test.to_string()),
            ("gen.lexicon-size".into(), self.gen.lexicon_size.to_string()),
            (
                "gen.two-token-entity-prob".into(),
                self.gen.two_token_entity_prob.to_string(),
            ),
            ("gen.ambiguous-tokens".into(), self.gen.ambiguous_tokens.to_string()),
            (
                "gen.ambiguous-query-prob".into(),
                self.gen.ambiguous_query_prob.to_string(),
            ),
            ("gen.noise-rate".into(), self.gen.noise_rate.to_string()),
            ("gen.titles-per-query".into(), self.gen.titles_per_query.to_string()),
            (
                "gen.title-informative-prob".into(),
                self.gen.title_informative_prob.to_string(),
            ),
            ("model.embed-dim".into(), self.embed_dim.to_string()),
            ("model.ffn-dim".into(), self.ffn_dim.to_string()),
            ("model.layers".into(), self.encoder_layers.to_string()),
            ("model.max-seq-len".into(), self.max_seq_len.to_string()),
            ("model.dropout".into(), self.dropout_rate.to_string()),
            ("stage1.skip".into(), self.stage1_skip.to_string()),
            ("stage1.epochs".into(), self.stage1_epochs.to_string()),
            ("stage1.batch-size".into(), self.stage1_batch_size.to_string()),
            ("stage1.lr".into(), self.stage1_lr.to_string()),
            ("stage2.skip".into(), self.stage2_skip.to_string()),
            ("stage2.epochs".into(), self.stage2_epochs.to_string()),
            ("stage2.batch-size".into(), self.stage2_batch_size.to_string()),
            ("stage2.lr".into(), self.stage2_lr.to_string()),
            ("stage2.patience".into(), self.stage2_patience.to_string()),
            ("stage3.skip".into(), self.stage3_skip.to_string()),
            ("stage3.epochs".into(), self.stage3_epochs.to_string()),
            ("stage3.batch-size".into(), self.stage3_batch_size.to_string()),
            ("stage3.lr".into(), self.stage3_lr.to_string()),
            ("stage3.mode".into(), self.stage3_mode.to_string()),
            ("dev-fraction".into(), self.dev_fraction.to_string()),
            ("adv.epsilon".into(), self.adv.epsilon.to_string()),
            ("adv.eta".into(), self.adv.eta.to_string()),
            ("adv.steps".into(), self.adv.steps.to_string()),
            ("adv.norm".into(), self.adv.norm.to_string()),
            ("adv.init-scale".into(), self.adv.init_scale.to_string()),
            ("weak.strategy".into(), self.weak_strategy.to_string()),
            ("weak.demo-count".into(), self.weak_demo_count.to_string()),
            ("weak.polarity-order".into(), polarity_name(self.weak_polarity).into()),
            ("weak.prompt-titles".into(), self.weak_prompt_titles.to_string()),
            ("weak.client".into(), self.weak_client.name().into()),
            ("weak.mock-bare-flip".into(), self.mock.bare_flip.to_string()),
            ("weak.mock-demo-flip".into(), self.mock.demo_flip.to_string()),
            ("weak.mock-title-flip".into(), self.mock.title_flip.to_string()),
            ("weak.mock-malformed-rate".into(), self.mock.malformed_rate.to_string()),
            ("weak.rejection-threshold".into(), self.rejection_threshold.to_string()),
            ("weak.input".into(), path(&self.weak_input)),
            ("weak.output".into(), path(&self.weak_output)),
            ("eval.checkpoint".into(), path(&self.checkpoint)),
            ("eval.predictions".into(), path(&self.predictions)),
            (
                "ablate.axes".into(),
                self.ablate_axes
                    .iter()
                    .map(|a| a.name())
                    .collect::<Vec<_>>()
                    .join(","),
            ),
            ("ablate.seeds".into(), self.ablate_seeds.to_string()),
            (
                "ablate.ks".into(),
                self.ablate_ks.iter().map(usize::to_string).collect::<Vec<_>>().join(","),
            ),
            ("ablate.jobs".into(), self.jobs.to_string()),
        ];
        pairs.sort();
        let mut out = String::new();
        for (key, value) in pairs {
            let _ = writeln!(out, "{key} = {value}");
        }
        out
    }

    /// The pipeline configuration the train and ablate subcommands run.
    pub fn pipeline(&self) -> PipelineConfig {
        let mut pipeline = PipelineConfig::new(self.seed);
        pipeline.title_count = self.title_count;
        pipeline.embed_dim = self.embed_dim;
        pipeline.ffn_dim = self.ffn_dim;
        pipeline.encoder_layers = self.encoder_layers;
        pipeline.max_seq_len = self.max_seq_len;
        pipeline.dropout_rate = self.dropout_rate;
        pipeline.finetune_mode = self.stage3_mode;
        if let Some(cfg) = &mut pipeline.stage1 {
            cfg.epochs = self.stage1_epochs;
            cfg.batch_size = self.stage1_batch_size;
            cfg.learning_rate = self.stage1_lr;
            cfg.dev_fraction = self.dev_fraction;
            cfg.perturbation = self.adv.clone();
        }
        if let Some(cfg) = &mut pipeline.stage2 {
            cfg.epochs = self.stage2_epochs;
            cfg.batch_size = self.stage2_batch_size;
            cfg.learning_rate = self.stage2_lr;
            cfg.patience = self.stage2_patience;
            cfg.dev_fraction = self.dev_fraction;
            cfg.perturbation = self.adv.clone();
        }
        if let Some(cfg) = &mut pipeline.stage3 {
            cfg.epochs = self.stage3_epochs;
            cfg.batch_size = self.stage3_batch_size;
            cfg.learning_rate = self.stage3_lr;
            cfg.dev_fraction = self.dev_fraction;
            cfg.perturbation = self.adv.clone();
        }
        if self.stage1_skip {
            pipeline.stage1 = None;
        }
        if self.stage2_skip {
            pipeline.stage2 = None;
        }
        if self.stage3_skip {
            pipeline.stage3 = None;
        }
        pipeline
    }

    pub fn strategy(&self) -> PromptStrategy {
        PromptStrategy {
            kind: self.weak_strategy,
            demo_count: self.weak_demo_count,
            polarity_order: self.weak_polarity,
            title_count: self.weak_prompt_titles,
        }
    }

    /// The run directory, required by every subcommand that writes.
    pub fn run_dir(&self) -> Result<&Path> {
        self.run_dir
            .as_deref()
            .ok_or_else(|| Error::Config("run-dir is required (flag --run-dir or key run-dir)".into()))
    }

    pub fn require(&self, what: &str, path: &Option<PathBuf>) -> Result<PathBuf> {
        path.clone().ok_or_else(|| Error::Config(format!("{what} is required")))
    }
}
