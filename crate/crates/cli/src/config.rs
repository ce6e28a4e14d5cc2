//! Line-oriented experiment configuration.
//!
//! ```text
//! # comment
//! seed = 1
//! model.head_dim = 8
//! variant.ntk4 = ntk-scale:4
//! ```
//!
//! Keys are unique; unknown keys are errors. Lists are comma separated.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use ropelab::analysis::DistanceAxis;
use ropelab::model::{Curriculum, ModelConfig, TrainOptions, DEFAULT_INFERENCE_CAP};
use ropelab::rope::{RopeConfig, RotaryVariant};
use ropelab::seed::split_seed;
use ropelab::task::{DepthPolicy, LossScope, SyntheticTask, TaskKind};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("{key}: {msg}")]
    Value { key: String, msg: String },
    #[error("missing required key {0}")]
    Missing(String),
    #[error("unknown key {0}")]
    Unknown(String),
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

type Result<T> = std::result::Result<T, ConfigError>;

// ── Raw key/value layer ─────────────────────────────────────────────────

/// Parsed `key = value` pairs in file order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawConfig {
    pub entries: Vec<(String, String)>,
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: Vec<(String, String)> = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let content = match line.find('#') {
                Some(p) => &line[..p],
                None => line,
            }
            .trim();
            if content.is_empty() {
                continue;
            }
            let Some((k, v)) = content.split_once('=') else {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("expected key = value, got {content:?}"),
                });
            };
            let (k, v) = (k.trim(), v.trim());
            let valid = !k.is_empty()
                && k.split('.').all(|part| {
                    !part.is_empty() && part.chars().all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
                });
            if !valid {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("bad key {k:?}"),
                });
            }
            if entries.iter().any(|(existing, _)| existing == k) {
                return Err(ConfigError::Syntax {
                    line: line_no,
                    msg: format!("duplicate key {k}"),
                });
            }
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(Self { entries })
    }
}

struct Fields {
    entries: Vec<(String, String, bool)>,
}

impl Fields {
    fn new(raw: RawConfig) -> Self {
        Self {
            entries: raw.entries.into_iter().map(|(k, v)| (k, v, false)).collect(),
        }
    }

    fn take(&mut self, key: &str) -> Option<String> {
        self.entries.iter_mut().find(|(k, _, used)| k == key && !*used).map(|e| {
            e.2 = true;
            e.1.clone()
        })
    }

    fn parse<T: FromStr>(&mut self, key: &str) -> Result<Option<T>>
    where
        T::Err: fmt::Display,
    {
        self.take(key)
            .map(|v| {
                v.parse::<T>().map_err(|e| ConfigError::Value {
                    key: key.to_string(),
                    msg: format!("{v:?}: {e}"),
                })
            })
            .transpose()
    }

    fn or<T: FromStr>(&mut self, key: &str, default: T) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        Ok(self.parse(key)?.unwrap_or(default))
    }

    fn required<T: FromStr>(&mut self, key: &str) -> Result<T>
    where
        T::Err: fmt::Display,
    {
        self.parse(key)?.ok_or_else(|| ConfigError::Missing(key.to_string()))
    }

    fn list<T: FromStr>(&mut self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: fmt::Display,
    {
        self.take(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>().map_err(|e| ConfigError::Value {
                            key: key.to_string(),
                            msg: format!("{s:?}: {e}"),
                        })
                    })
                    .collect()
            })
            .transpose()
    }

    fn with_prefix(&mut self, prefix: &str) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (k, v, used) in &mut self.entries {
            if let Some(rest) = k.strip_prefix(prefix) {
                if !*used {
                    *used = true;
                    out.push((rest.to_string(), v.clone()));
                }
            }
        }
        out
    }

    fn finish(self) -> Result<()> {
        match self.entries.into_iter().find(|(_, _, used)| !used) {
            Some((k, _, _)) => Err(ConfigError::Unknown(k)),
            None => Ok(()),
        }
    }
}

// ── Variant specs ───────────────────────────────────────────────────────

/// Compact rotary variant description: `rope`, `pi:ALPHA`, `ntk:NEW_BASE`,
/// `ntk-scale:S`, `yarn:ALPHA` or `yarn:ALPHA:RAMP_LOW:RAMP_HIGH:TEMPERATURE`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum VariantSpec {
    Rope,
    Pi { alpha: f64 },
    Ntk { new_base: f64 },
    NtkScale { scale: f64 },
    Yarn { alpha: f64 },
    YarnExplicit { alpha: f64, ramp_low: f64, ramp_high: f64, temperature: f64 },
}

impl VariantSpec {
    /// `original_context` anchors the default YaRN ramp.
    pub fn resolve(&self, rope: RopeConfig, original_context: usize) -> ropelab::Result<RotaryVariant> {
        match *self {
            Self::Rope => Ok(RotaryVariant::rope(rope)),
            Self::Pi { alpha } => RotaryVariant::pi(rope, alpha),
            Self::Ntk { new_base } => RotaryVariant::ntk(rope, new_base),
            Self::NtkScale { scale } => RotaryVariant::ntk_for_scale(rope, scale),
            Self::Yarn { alpha } => RotaryVariant::yarn_default(rope, alpha, original_context),
            Self::YarnExplicit {
                alpha,
                ramp_low,
                ramp_high,
                temperature,
            } => RotaryVariant::yarn(rope, alpha, ramp_low, ramp_high, temperature),
        }
    }
}

impl fmt::Display for VariantSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Rope => write!(f, "rope"),
            Self::Pi { alpha } => write!(f, "pi:{alpha}"),
            Self::Ntk { new_base } => write!(f, "ntk:{new_base}"),
            Self::NtkScale { scale } => write!(f, "ntk-scale:{scale}"),
            Self::Yarn { alpha } => write!(f, "yarn:{alpha}"),
            Self::YarnExplicit {
                alpha,
                ramp_low,
                ramp_high,
                temperature,
            } => write!(f, "yarn:{alpha}:{ramp_low}:{ramp_high}:{temperature}"),
        }
    }
}

impl FromStr for VariantSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<&str> = s.trim().split(':').collect();
        let num = |i: usize| -> std::result::Result<f64, String> {
            parts[i]
                .parse::<f64>()
                .map_err(|e| format!("bad number {:?} in variant {s:?}: {e}", parts[i]))
        };
        match (parts[0], parts.len()) {
            ("rope", 1) => Ok(Self::Rope),
            ("pi", 2) => Ok(Self::Pi { alpha: num(1)? }),
            ("ntk", 2) => Ok(Self::Ntk { new_base: num(1)? }),
            ("ntk-scale", 2) => Ok(Self::NtkScale { scale: num(1)? }),
            ("yarn", 2) => Ok(Self::Yarn { alpha: num(1)? }),
            ("yarn", 5) => Ok(Self::YarnExplicit {
                alpha: num(1)?,
                ramp_low: num(2)?,
                ramp_high: num(3)?,
                temperature: num(4)?,
            }),
            _ => Err(format!("unrecognized variant {s:?}")),
        }
    }
}

// ── Sections ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSection {
    /// Load weights from here instead of training.
    pub checkpoint: Option<PathBuf>,
    /// Defaults to the task's vocabulary.
    pub vocab_size: Option<usize>,
    pub layer_count: usize,
    pub head_count: usize,
    pub head_dim: usize,
    pub mlp_ratio: usize,
    pub train_context_length: usize,
    pub base: f64,
    pub init_scale: f64,
    pub inference_cap: usize,
    /// Variant used for training: a declared variant name.
    pub variant: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSection {
    pub steps: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub momentum: f64,
    pub clip_norm: Option<f64>,
    pub warmup_steps: usize,
    pub cosine_decay: bool,
    pub curriculum_length: usize,
    /// Zero disables the curriculum stage.
    pub curriculum_steps: usize,
    /// Main-stage tokens; overrides `steps` when set.
    pub token_budget: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSection {
    /// Defaults to powers of two from half to eight times the training length.
    pub lengths: Option<Vec<usize>>,
    pub depths: Vec<f64>,
    pub cases: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PplSection {
    /// Defaults to the needle lengths.
    pub lengths: Option<Vec<usize>>,
    pub stride: Option<usize>,
    pub max_windows: Option<usize>,
    /// Corpus size; defaults to four times the longest window.
    pub corpus_tokens: Option<usize>,
    /// Episode length inside the corpus; defaults to the longest window.
    pub episode_length: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnalyzeSection {
    /// Attention NDJSON files; when set, no model is used.
    pub attention: Vec<PathBuf>,
    pub prompt: Option<Vec<usize>>,
    /// Needle prompt length used when no explicit prompt is given.
    pub length: Option<usize>,
    pub depth: f64,
    pub max_new_tokens: usize,
    pub bucket_width: usize,
    pub axis: DistanceAxis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub threads: usize,
    pub model: ModelSection,
    pub task: SyntheticTask,
    pub train: TrainSection,
    /// Declared variants in file order; `rope` is implied when empty.
    pub variants: Vec<(String, VariantSpec)>,
    pub needle: NeedleSection,
    pub ppl: PplSection,
    pub compare_ppl_threshold: f64,
    pub analyze: AnalyzeSection,
}

fn depth_text(d: &DepthPolicy) -> String {
    match d {
        DepthPolicy::Uniform => "uniform".into(),
        DepthPolicy::Fixed(p) => p.to_string(),
    }
}

fn axis_text(a: DistanceAxis) -> &'static str {
    match a {
        DistanceAxis::Relative => "relative",
        DistanceAxis::Absolute => "absolute",
    }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn value_err(key: &str, msg: impl Into<String>) -> ConfigError {
    ConfigError::Value {
        key: key.into(),
        msg: msg.into(),
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        if raw.entries.is_empty() {
            return Err(ConfigError::Invalid("configuration is empty".into()));
        }
        let mut f = Fields::new(raw);

        let seed = f.required("seed")?;
        let out = f.parse::<PathBuf>("out")?;
        let threads = f.or("threads", 1usize)?;

        let task_kind = match f.take("task.kind") {
            Some(k) => TaskKind::parse(&k).map_err(|e| value_err("task.kind", e.to_string()))?,
            None => TaskKind::KvRetrieval,
        };
        let defaults = SyntheticTask::default();
        let depth = match f.take("task.depth").as_deref() {
            None | Some("uniform") => DepthPolicy::Uniform,
            Some(p) => DepthPolicy::Fixed(p.parse().map_err(|_| value_err("task.depth", format!("{p:?}")))?),
        };
        let loss_scope = match f.take("task.loss").as_deref() {
            None | Some("answer") => LossScope::Answer,
            Some("all") => LossScope::All {
                answer_weight: f.or("task.answer_weight", 1.0)?,
            },
            Some(other) => return Err(value_err("task.loss", format!("expected answer or all, got {other:?}"))),
        };
        let task = SyntheticTask {
            kind: task_kind,
            key_alphabet: f.or("task.key_alphabet", defaults.key_alphabet)?,
            value_alphabet: f.or("task.value_alphabet", defaults.value_alphabet)?,
            filler_alphabet: f.or("task.filler_alphabet", defaults.filler_alphabet)?,
            key_len: f.or("task.key_len", defaults.key_len)?,
            value_len: f.or("task.value_len", defaults.value_len)?,
            depth,
            loss_scope,
        };

        let model = ModelSection {
            checkpoint: f.parse("model.checkpoint")?,
            vocab_size: f.parse("model.vocab_size")?,
            layer_count: f.required("model.layer_count")?,
            head_count: f.required("model.head_count")?,
            head_dim: f.required("model.head_dim")?,
            mlp_ratio: f.or("model.mlp_ratio", 2)?,
            train_context_length: f.required("model.train_context_length")?,
            base: f.or("model.base", RopeConfig::DEFAULT_BASE)?,
            init_scale: f.or("model.init_scale", 1.0)?,
            inference_cap: f.or("model.inference_cap", DEFAULT_INFERENCE_CAP)?,
            variant: f.or("model.variant", "rope".to_string())?,
        };

        let defaults = TrainOptions::default();
        let clip_norm = match f.take("train.clip_norm").as_deref() {
            None => defaults.clip_norm,
            Some("none") => None,
            Some(v) => Some(v.parse().map_err(|_| value_err("train.clip_norm", format!("{v:?}")))?),
        };
        let train = TrainSection {
            steps: f.or("train.steps", defaults.steps)?,
            learning_rate: f.or("train.learning_rate", defaults.learning_rate)?,
            batch_size: f.or("train.batch_size", defaults.batch_size)?,
            momentum: f.or("train.momentum", defaults.momentum)?,
            clip_norm,
            warmup_steps: f.or("train.warmup_steps", defaults.warmup_steps)?,
            cosine_decay: f.or("train.cosine_decay", defaults.cosine_decay)?,
            curriculum_length: f.or("train.curriculum_length", 32)?,
            curriculum_steps: f.or("train.curriculum_steps", 0)?,
            token_budget: f.parse("train.token_budget")?,
        };

        let variants = f
            .with_prefix("variant.")
            .into_iter()
            .map(|(name, spec)| {
                let key = format!("variant.{name}");
                if name.contains('.') {
                    return Err(ConfigError::Unknown(key));
                }
                let spec = spec.parse::<VariantSpec>().map_err(|e| value_err(&key, e))?;
                Ok((name, spec))
            })
            .collect::<Result<Vec<_>>>()?;

        let needle = NeedleSection {
            lengths: f.list("needle.lengths")?,
            depths: f.list("needle.depths")?.unwrap_or_else(|| ropelab::harness::DEFAULT_DEPTHS.to_vec()),
            cases: f.or("needle.cases", ropelab::harness::DEFAULT_CASES_PER_CELL)?,
        };
        let ppl = PplSection {
            lengths: f.list("ppl.lengths")?,
            stride: f.parse("ppl.stride")?,
            max_windows: f.parse("ppl.max_windows")?,
            corpus_tokens: f.parse("ppl.corpus_tokens")?,
            episode_length: f.parse("ppl.episode_length")?,
        };
        let compare_ppl_threshold = f.or("compare.ppl_threshold", 100.0)?;
        let axis = match f.take("analyze.axis").as_deref() {
            None | Some("relative") => DistanceAxis::Relative,
            Some("absolute") => DistanceAxis::Absolute,
            Some(other) => {
                return Err(value_err("analyze.axis", format!("expected relative or absolute, got {other:?}")))
            }
        };
        let analyze = AnalyzeSection {
            attention: f.list("analyze.attention")?.unwrap_or_default(),
            prompt: f.list("analyze.prompt")?,
            length: f.parse("analyze.length")?,
            depth: f.or("analyze.depth", 50.0)?,
            max_new_tokens: f.or("analyze.max_new_tokens", 1)?,
            bucket_width: f.or("analyze.bucket_width", 1)?,
            axis,
        };
        f.finish()?;

        let cfg = Self {
            seed,
            out,
            threads,
            model,
            task,
            train,
            variants,
            needle,
            ppl,
            compare_ppl_threshold,
            analyze,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every sub-configuration checked before anything runs.
    pub fn validate(&self) -> Result<()> {
        let invalid = |e: ropelab::Error| ConfigError::Invalid(e.to_string());
        if self.threads == 0 {
            return Err(ConfigError::Invalid("threads must be >= 1".into()));
        }
        self.task.validate().map_err(invalid)?;
        let mc = self.model_config()?;
        mc.validate().map_err(invalid)?;
        if self.task.vocab_size() > mc.vocab_size {
            return Err(ConfigError::Invalid(format!(
                "task needs vocabulary {} but model.vocab_size is {}",
                self.task.vocab_size(),
                mc.vocab_size
            )));
        }
        for (name, _) in &self.variants {
            if self.variants.iter().filter(|(n, _)| n == name).count() > 1 {
                return Err(ConfigError::Invalid(format!("variant {name} declared twice")));
            }
        }
        self.resolved_variants()?;
        self.train_options().validate().map_err(invalid)?;
        let params = ropelab::harness::GridParams {
            lengths: self.needle_lengths(),
            depths: self.needle.depths.clone(),
            cases_per_cell: self.needle.cases,
            seed: 0,
            threads: 1,
        };
        params.validate().map_err(invalid)?;
        let longest = *self.needle_lengths().iter().chain(&self.ppl_lengths()).max().unwrap_or(&0);
        if longest > self.model.inference_cap {
            return Err(ConfigError::Invalid(format!(
                "length {longest} exceeds model.inference_cap {}",
                self.model.inference_cap
            )));
        }
        if self.ppl_lengths().iter().any(|&n| n < 2) {
            return Err(ConfigError::Invalid("ppl lengths must be >= 2".into()));
        }
        if self.ppl.stride == Some(0) || self.ppl.max_windows == Some(0) || self.ppl.episode_length == Some(0) {
            return Err(ConfigError::Invalid("ppl.stride, ppl.max_windows and ppl.episode_length must be >= 1".into()));
        }
        if self.analyze.bucket_width == 0 {
            return Err(ConfigError::Invalid("analyze.bucket_width must be >= 1".into()));
        }
        if !(0.0..=100.0).contains(&self.analyze.depth) {
            return Err(ConfigError::Invalid("analyze.depth must be in [0, 100]".into()));
        }
        if self.compare_ppl_threshold.is_nan() || self.compare_ppl_threshold <= 0.0 {
            return Err(ConfigError::Invalid("compare.ppl_threshold must be > 0".into()));
        }
        Ok(())
    }

    pub fn rope(&self) -> Result<RopeConfig> {
        RopeConfig::new(self.model.head_dim, self.model.base).map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Declared variants resolved against the model, or plain `rope`.
    pub fn resolved_variants(&self) -> Result<Vec<(String, RotaryVariant)>> {
        let rope = self.rope()?;
        if self.variants.is_empty() {
            return Ok(vec![("rope".into(), RotaryVariant::rope(rope))]);
        }
        self.variants
            .iter()
            .map(|(name, spec)| {
                spec.resolve(rope, self.model.train_context_length)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| ConfigError::Invalid(format!("variant {name}: {e}")))
            })
            .collect()
    }

    pub fn training_variant(&self) -> Result<RotaryVariant> {
        let name = &self.model.variant;
        if let Some((_, v)) = self.resolved_variants()?.into_iter().find(|(n, _)| n == name) {
            return Ok(v);
        }
        if name == "rope" {
            return Ok(RotaryVariant::rope(self.rope()?));
        }
        Err(ConfigError::Invalid(format!("model.variant {name} is not declared")))
    }

    pub fn model_seed(&self) -> u64 {
        split_seed(self.seed, "model")
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let m = &self.model;
        Ok(ModelConfig {
            vocab_size: m.vocab_size.unwrap_or_else(|| self.task.vocab_size()),
            layer_count: m.layer_count,
            head_count: m.head_count,
            head_dim: m.head_dim,
            mlp_ratio: m.mlp_ratio,
            train_context_length: m.train_context_length,
            variant: self.training_variant()?,
            seed: self.model_seed(),
            init_scale: m.init_scale,
            inference_cap: m.inference_cap,
        })
    }

    pub fn train_options(&self) -> TrainOptions {
        let t = &self.train;
        let curriculum = (t.curriculum_steps > 0).then_some(Curriculum {
            length: t.curriculum_length,
            steps: t.curriculum_steps,
        });
        let opts = TrainOptions {
            steps: t.steps,
            learning_rate: t.learning_rate,
            batch_size: t.batch_size,
            momentum: t.momentum,
            clip_norm: t.clip_norm,
            warmup_steps: t.warmup_steps,
            cosine_decay: t.cosine_decay,
            curriculum,
            threads: self.threads,
        };
        match t.token_budget {
            Some(b) => opts.with_token_budget(b, self.model.train_context_length),
            None => opts,
        }
    }

    pub fn needle_lengths(&self) -> Vec<usize> {
        self.needle
            .lengths
            .clone()
            .unwrap_or_else(|| ropelab::harness::default_grid_lengths(self.model.train_context_length))
    }

    pub fn ppl_lengths(&self) -> Vec<usize> {
        self.ppl.lengths.clone().unwrap_or_else(|| self.needle_lengths())
    }

    /// Canonical text covering every field; parsing it yields `self`.
    pub fn to_text(&self) -> String {
        let mut lines = Vec::new();
        let mut put = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        put("seed", self.seed.to_string());
        if let Some(o) = &self.out {
            put("out", o.display().to_string());
        }
        put("threads", self.threads.to_string());
        self.write_body(&mut put);
        lines.join("\n") + "\n"
    }

    /// Canonical text without the output directory and thread count, which
    /// do not influence results.
    pub fn hash_text(&self) -> String {
        let mut lines = Vec::new();
        let mut put = |k: &str, v: String| lines.push(format!("{k} = {v}"));
        put("seed", self.seed.to_string());
        self.write_body(&mut put);
        lines.join("\n") + "\n"
    }

    fn write_body(&self, put: &mut impl FnMut(&str, String)) {
        let m = &self.model;
        if let Some(c) = &m.checkpoint {
            put("model.checkpoint", c.display().to_string());
        }
        if let Some(v) = m.vocab_size {
            put("model.vocab_size", v.to_string());
        }
        put("model.layer_count", m.layer_count.to_string());
        put("model.head_count", m.head_count.to_string());
        put("model.head_dim", m.head_dim.to_string());
        put("model.mlp_ratio", m.mlp_ratio.to_string());
        put("model.train_context_length", m.train_context_length.to_string());
        put("model.base", m.base.to_string());
        put("model.init_scale", m.init_scale.to_string());
        put("model.inference_cap", m.inference_cap.to_string());
        put("model.variant", m.variant.clone());

        let t = &self.task;
        put("task.kind", t.kind.name().to_string());
        put("task.key_alphabet", t.key_alphabet.to_string());
        put("task.value_alphabet", t.value_alphabet.to_string());
        put("task.filler_alphabet", t.filler_alphabet.to_string());
        put("task.key_len", t.key_len.to_string());
        put("task.value_len", t.value_len.to_string());
        put("task.depth", depth_text(&t.depth));
        match t.loss_scope {
            LossScope::Answer => put("task.loss", "answer".into()),
            LossScope::All { answer_weight } => {
                put("task.loss", "all".into());
                put("task.answer_weight", answer_weight.to_string());
            }
        }

        let tr = &self.train;
        put("train.steps", tr.steps.to_string());
        put("train.learning_rate", tr.learning_rate.to_string());
        put("train.batch_size", tr.batch_size.to_string());
        put("train.momentum", tr.momentum.to_string());
        put(
            "train.clip_norm",
            tr.clip_norm.map_or("none".to_string(), |c| c.to_string()),
        );
        put("train.warmup_steps", tr.warmup_steps.to_string());
        put("train.cosine_decay", tr.cosine_decay.to_string());
        put("train.curriculum_length", tr.curriculum_length.to_string());
        put("train.curriculum_steps", tr.curriculum_steps.to_string());
        if let Some(b) = tr.token_budget {
            put("train.token_budget", b.to_string());
        }

        for (name, spec) in &self.variants {
            put(&format!("variant.{name}"), spec.to_string());
        }

        if let Some(l) = &self.needle.lengths {
            put("needle.lengths", join(l));
        }
        put("needle.depths", join(&self.needle.depths));
        put("needle.cases", self.needle.cases.to_string());

        let p = &self.ppl;
        if let Some(l) = &p.lengths {
            put("ppl.lengths", join(l));
        }
        if let Some(s) = p.stride {
            put("ppl.stride", s.to_string());
        }
        if let Some(w) = p.max_windows {
            put("ppl.max_windows", w.to_string());
        }
        if let Some(c) = p.corpus_tokens {
            put("ppl.corpus_tokens", c.to_string());
        }
        if let Some(e) = p.episode_length {
            put("ppl.episode_length", e.to_string());
        }
        put("compare.ppl_threshold", self.compare_ppl_threshold.to_string());

        let a = &self.analyze;
        if !a.attention.is_empty() {
            let paths: Vec<String> = a.attention.iter().map(|p| p.display().to_string()).collect();
            put("analyze.attention", paths.join(", "));
        }
        if let Some(pr) = &a.prompt {
            put("analyze.prompt", join(pr));
        }
        if let Some(l) = a.length {
            put("analyze.length", l.to_string());
        }
        put("analyze.depth", a.depth.to_string());
        put("analyze.max_new_tokens", a.max_new_tokens.to_string());
        put("analyze.bucket_width", a.bucket_width.to_string());
        put("analyze.axis", axis_text(a.axis).to_string());
    }
}
