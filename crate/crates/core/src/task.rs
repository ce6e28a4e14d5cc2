//! Synthetic training tasks.
//!
//! Vocabulary layout (token ids):
//!
//! ```text
//! 0                      query marker / copy separator
//! 1 ..= K                key alphabet
//! K+1 ..= K+V            value alphabet
//! K+V+1 ..               filler alphabet
//! ```
//!
//! A `kv_retrieval` sequence is a filler haystack with one needle
//! (`key span ++ value span`) at a depth-derived offset, followed by the
//! query (`marker ++ key span`) and the value span as the answer.

use rand::Rng;

use crate::error::{Error, Result};

pub const QUERY_TOKEN: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    KvRetrieval,
    Copy,
}

impl TaskKind {
    pub fn name(&self) -> &'static str {
        match self {
            Self::KvRetrieval => "kv_retrieval",
            Self::Copy => "copy",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "kv_retrieval" => Ok(Self::KvRetrieval),
            "copy" => Ok(Self::Copy),
            other => Err(Error::Config(format!("unknown task kind {other:?}"))),
        }
    }
}

/// Where needles go in training sequences.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DepthPolicy {
    /// Depth percentage drawn uniformly from [0, 100].
    Uniform,
    Fixed(f64),
}

/// Which next-token predictions count toward the training loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossScope {
    /// Only the answer (kv_retrieval) or the copied half (copy).
    Answer,
    /// Every prediction, with the answer positions weighted by
    /// `answer_weight` (1 is a plain language-model loss).
    All { answer_weight: f64 },
}

/// A token sequence with per-prediction loss weights. `loss_weights[i]`
/// weights predicting `tokens[i + 1]`; zero means unscored.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingExample {
    pub tokens: Vec<usize>,
    pub loss_weights: Vec<f64>,
}

impl TrainingExample {
    /// Scores every next-token prediction with weight 1.
    pub fn full(tokens: Vec<usize>) -> Self {
        let scored = tokens.len().saturating_sub(1);
        Self {
            tokens,
            loss_weights: vec![1.0; scored],
        }
    }

    pub fn scored_count(&self) -> usize {
        self.loss_weights.iter().filter(|&&w| w > 0.0).count()
    }

    pub fn total_weight(&self) -> f64 {
        self.loss_weights.iter().sum()
    }
}

/// A needle sequence split into the prompt the model sees and the answer it
/// should produce.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleSequence {
    pub prompt: Vec<usize>,
    pub answer: Vec<usize>,
    pub needle_offset: usize,
    pub key: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTask {
    pub kind: TaskKind,
    pub key_alphabet: usize,
    pub value_alphabet: usize,
    pub filler_alphabet: usize,
    pub key_len: usize,
    pub value_len: usize,
    pub depth: DepthPolicy,
    pub loss_scope: LossScope,
}

impl Default for SyntheticTask {
    fn default() -> Self {
        Self {
            kind: TaskKind::KvRetrieval,
            key_alphabet: 4,
            value_alphabet: 8,
            filler_alphabet: 16,
            key_len: 1,
            value_len: 1,
            depth: DepthPolicy::Uniform,
            loss_scope: LossScope::Answer,
        }
    }
}

impl SyntheticTask {
    pub fn validate(&self) -> Result<()> {
        if self.key_alphabet == 0 || self.value_alphabet == 0 || self.filler_alphabet == 0 {
            return Err(Error::Config("task alphabets must be non-empty".into()));
        }
        if self.key_len == 0 || self.value_len == 0 {
            return Err(Error::Config("key and value spans must be non-empty".into()));
        }
        if let LossScope::All { answer_weight } = self.loss_scope {
            if !answer_weight.is_finite() || answer_weight <= 0.0 {
                return Err(Error::Config(format!(
                    "answer weight must be > 0, got {answer_weight}"
                )));
            }
        }
        if let DepthPolicy::Fixed(p) = self.depth {
            if !(0.0..=100.0).contains(&p) {
                return Err(Error::Config(format!("depth {p} outside [0, 100]")));
            }
        }
        Ok(())
    }

    /// Smallest vocabulary that holds every alphabet.
    pub fn vocab_size(&self) -> usize {
        1 + self.key_alphabet + self.value_alphabet + self.filler_alphabet
    }

    pub fn key_token(&self, i: usize) -> usize {
        1 + i
    }

    pub fn value_token(&self, i: usize) -> usize {
        1 + self.key_alphabet + i
    }

    pub fn filler_token(&self, i: usize) -> usize {
        1 + self.key_alphabet + self.value_alphabet + i
    }

    pub fn is_value_token(&self, t: usize) -> bool {
        t > self.key_alphabet && t <= self.key_alphabet + self.value_alphabet
    }

    pub fn needle_len(&self) -> usize {
        self.key_len + self.value_len
    }

    pub fn query_len(&self) -> usize {
        1 + self.key_len
    }

    /// Haystack length that makes prompt plus answer exactly `total` tokens.
    pub fn haystack_for_total(&self, total: usize) -> Result<usize> {
        let overhead = self.query_len() + self.value_len;
        let haystack = total.saturating_sub(overhead);
        self.check_haystack(haystack)?;
        Ok(haystack)
    }

    fn check_haystack(&self, haystack_length: usize) -> Result<()> {
        let needed = self.needle_len() + self.query_len() + 2;
        if haystack_length < needed {
            return Err(Error::TooShort(format!(
                "haystack of {haystack_length} tokens, need at least {needed}"
            )));
        }
        Ok(())
    }

    /// Needle offset for a depth percentage:
    /// `round(depth / 100 * (haystack - needle))`, clamped.
    pub fn needle_offset(&self, haystack_length: usize, depth_percent: f64) -> usize {
        let room = haystack_length.saturating_sub(self.needle_len());
        let raw = (depth_percent / 100.0 * room as f64).round();
        if raw.is_nan() || raw < 0.0 {
            0
        } else {
            (raw as usize).min(room)
        }
    }

    pub fn filler<R: Rng>(&self, rng: &mut R) -> usize {
        self.filler_token(rng.gen_range(0..self.filler_alphabet))
    }

    /// Builds a haystack of `haystack_length` tokens with one needle at
    /// `depth_percent`, then the query. The answer is returned separately.
    pub fn needle_sequence<R: Rng>(
        &self,
        rng: &mut R,
        haystack_length: usize,
        depth_percent: f64,
    ) -> Result<NeedleSequence> {
        self.validate()?;
        self.check_haystack(haystack_length)?;
        if !(0.0..=100.0).contains(&depth_percent) {
            return Err(Error::Validation(format!(
                "depth {depth_percent} outside [0, 100]"
            )));
        }
        let key: Vec<usize> = (0..self.key_len)
            .map(|_| self.key_token(rng.gen_range(0..self.key_alphabet)))
            .collect();
        let value: Vec<usize> = (0..self.value_len)
            .map(|_| self.value_token(rng.gen_range(0..self.value_alphabet)))
            .collect();
        let offset = self.needle_offset(haystack_length, depth_percent);

        let mut prompt = Vec::with_capacity(haystack_length + self.query_len());
        for _ in 0..offset {
            prompt.push(self.filler(rng));
        }
        prompt.extend(&key);
        prompt.extend(&value);
        while prompt.len() < haystack_length {
            prompt.push(self.filler(rng));
        }
        prompt.push(QUERY_TOKEN);
        prompt.extend(&key);

        Ok(NeedleSequence {
            prompt,
            answer: value,
            needle_offset: offset,
            key,
        })
    }

    /// One training sequence of exactly `length` tokens.
    pub fn sample<R: Rng>(&self, rng: &mut R, length: usize) -> Result<TrainingExample> {
        self.validate()?;
        let mut example = self.sample_scoped(rng, length)?;
        if let LossScope::All { answer_weight } = self.loss_scope {
            for w in &mut example.loss_weights {
                *w = if *w > 0.0 { answer_weight } else { 1.0 };
            }
        }
        Ok(example)
    }

    fn sample_scoped<R: Rng>(&self, rng: &mut R, length: usize) -> Result<TrainingExample> {
        match self.kind {
            TaskKind::KvRetrieval => {
                let haystack = self.haystack_for_total(length)?;
                let depth = match self.depth {
                    DepthPolicy::Uniform => rng.gen_range(0.0..=100.0),
                    DepthPolicy::Fixed(p) => p,
                };
                let seq = self.needle_sequence(rng, haystack, depth)?;
                let prompt_len = seq.prompt.len();
                let mut tokens = seq.prompt;
                tokens.extend(&seq.answer);
                let mut loss_weights = vec![0.0; length - 1];
                loss_weights[prompt_len - 1..].fill(1.0);
                Ok(TrainingExample {
                    tokens,
                    loss_weights,
                })
            }
            TaskKind::Copy => {
                if length < 3 {
                    return Err(Error::TooShort(format!(
                        "copy task needs at least 3 tokens, got {length}"
                    )));
                }
                let span = (length - 1) / 2;
                let pad = length - 1 - 2 * span;
                let mut tokens: Vec<usize> = (0..pad + span).map(|_| self.filler(rng)).collect();
                tokens.push(QUERY_TOKEN);
                let copied: Vec<usize> = tokens[pad..pad + span].to_vec();
                tokens.extend(copied);
                let mut loss_weights = vec![0.0; length - 1];
                loss_weights[pad + span..].fill(1.0);
                Ok(TrainingExample {
                    tokens,
                    loss_weights,
                })
            }
        }
    }

    /// Concatenated training sequences of `episode_length` tokens, cut to
    /// `total` tokens. Used as a perplexity corpus.
    pub fn corpus<R: Rng>(&self, rng: &mut R, episode_length: usize, total: usize) -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(total + episode_length);
        while out.len() < total {
            out.extend(self.sample(rng, episode_length)?.tokens);
        }
        out.truncate(total);
        Ok(out)
    }
}
