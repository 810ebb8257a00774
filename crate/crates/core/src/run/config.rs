//! Flat `key = value` run configuration.
//!
//! Every key has a default. Files hold one `key = value` pair per line; blank lines and
//! lines starting with `#` are skipped. Unknown keys are rejected.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::corpus::Dimension;
use crate::decode::Normalization;
use crate::error::{Error, Result};
use crate::reward::RewardLoss;
use crate::rl::RewardSign;
use crate::steer::ControlVector;

/// A value that can be written as, and read back from, one config line.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> std::result::Result<Self, String>;
    fn format_value(&self) -> String;
}

macro_rules! via_fromstr {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                s.parse().map_err(|e| format!("`{s}`: {e}"))
            }
            fn format_value(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

via_fromstr!(u64, usize, bool, String);

impl ConfigValue for f64 {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let v: f64 = s.parse().map_err(|e| format!("`{s}`: {e}"))?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(format!("`{s}` is not finite"))
        }
    }
    fn format_value(&self) -> String {
        self.to_string()
    }
}

/// Empty means unset.
impl ConfigValue for Option<PathBuf> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        Ok((!s.is_empty()).then(|| PathBuf::from(s)))
    }
    fn format_value(&self) -> String {
        self.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
    }
}

impl ConfigValue for ControlVector {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        s.parse().map_err(|e: Error| e.to_string())
    }
    fn format_value(&self) -> String {
        format!("{},{},{}", self.n, self.f, self.e)
    }
}

fn list<T>(s: &str, item: impl Fn(&str) -> std::result::Result<T, String>) -> std::result::Result<Vec<T>, String> {
    if s.trim().is_empty() {
        return Ok(Vec::new());
    }
    s.split(',').map(|p| item(p.trim())).collect()
}

impl ConfigValue for Vec<f64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        list(s, f64::parse_value)
    }
    fn format_value(&self) -> String {
        self.iter().map(f64::format_value).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<u64> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        list(s, u64::parse_value)
    }
    fn format_value(&self) -> String {
        self.iter().map(u64::format_value).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Vec<Dimension> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        let dims = list(s, |p| Dimension::from_tag(p).ok_or_else(|| format!("unknown dimension `{p}`")))?;
        if dims.is_empty() {
            return Err("needs at least one of N, F, E".into());
        }
        Ok(dims)
    }
    fn format_value(&self) -> String {
        self.iter().map(|d| d.tag()).collect::<Vec<_>>().join(",")
    }
}

macro_rules! keyword {
    ($t:ty { $($word:literal => $v:expr),* $(,)? }) => {
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> std::result::Result<Self, String> {
                match s {
                    $($word => Ok($v),)*
                    _ => Err(format!("`{s}`, expected one of: {}", [$($word),*].join(", "))),
                }
            }
            fn format_value(&self) -> String {
                $(if *self == $v { return $word.to_string(); })*
                unreachable!()
            }
        }
    };
}

keyword!(RewardLoss { "bce" => RewardLoss::Bce, "mse" => RewardLoss::Mse });
keyword!(RewardSign { "maximize" => RewardSign::Maximize, "negate" => RewardSign::Negate });
keyword!(Normalization { "global" => Normalization::Global, "per-dimension" => Normalization::PerDimension });

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DecodeMode {
    Static,
    Dynamic,
}

keyword!(DecodeMode { "static" => DecodeMode::Static, "dynamic" => DecodeMode::Dynamic });

macro_rules! run_config {
    ($( $(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr ),* $(,)?) => {
        /// Every setting of every pipeline stage.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $( $(#[doc = $doc])* pub $key: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                Self { $( $key: $default, )* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$( stringify!($key) ),*];

            /// `(key, default value, description)` for every key.
            pub fn documentation() -> Vec<(&'static str, String, &'static str)> {
                let d = Self::default();
                vec![$( (stringify!($key), d.$key.format_value(), concat!($($doc),*).trim()) ),*]
            }

            /// Sets `key` from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let fail = |msg: String| Error::Config { key: key.to_string(), msg };
                match key {
                    $( stringify!($key) => self.$key = <$ty>::parse_value(value.trim()).map_err(fail)?, )*
                    _ => return Err(fail("unknown key".into())),
                }
                Ok(())
            }

            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $( stringify!($key) => Some(self.$key.format_value()), )*
                    _ => None,
                }
            }
        }
    };
}

run_config! {
    /// Master seed; every stage derives its own seeds from it.
    seed: u64 = 0,
    /// Corpus directory read by training and decoding stages.
    corpus: Option<PathBuf> = None,
    /// Output directory.
    out: Option<PathBuf> = None,
    /// Raw record directory read by `ingest`.
    input: Option<PathBuf> = None,
    /// SFT checkpoint.
    sft_model: Option<PathBuf> = None,
    /// Reward-model checkpoint.
    rewards: Option<PathBuf> = None,
    /// RL checkpoint (proposer plus adapters).
    policy: Option<PathBuf> = None,
    /// Weight-predictor checkpoint used by dynamic decoding; trained on the fly when unset.
    predictor: Option<PathBuf> = None,
    /// Papers (one idea each) in a synthetic corpus.
    n: usize = 1600,
    /// Synthetic corpus without the novelty/feasibility coupling.
    orthogonal: bool = false,
    /// Fraction of papers whose ideas form SFT pairs.
    split_sft: f64 = 0.125,
    /// Fraction of papers whose ideas train the reward models.
    split_reward: f64 = 0.5,
    /// Ideas with fewer sentences are filtered out during ingest.
    min_sentences: usize = 2,
    /// Vocabulary size cap, special tokens included.
    vocab_max: usize = 512,
    /// Proposer transformer blocks.
    layers: usize = 4,
    /// Proposer residual width.
    width: usize = 64,
    /// Proposer attention heads.
    heads: usize = 4,
    /// Proposer context length.
    context_len: usize = 256,
    sft_epochs: usize = 8,
    sft_batch: usize = 8,
    sft_lr: f64 = 0.05,
    sft_momentum: f64 = 0.9,
    sft_clip: f64 = 1.0,
    /// Fraction of SFT pairs held out for perplexity.
    sft_eval_fraction: f64 = 0.1,
    /// Paper tokens placed in every proposer prompt.
    max_context: usize = 16,
    reward_layers: usize = 2,
    reward_width: usize = 16,
    reward_heads: usize = 2,
    reward_hidden: usize = 16,
    reward_context: usize = 160,
    /// Paper tokens placed in front of each reward-model input.
    reward_paper_tokens: usize = 8,
    reward_loss: RewardLoss = RewardLoss::Bce,
    reward_epochs: usize = 30,
    reward_batch: usize = 16,
    reward_lr: f64 = 3e-3,
    /// Fraction of reward ideas held out for the fidelity report.
    reward_heldout: f64 = 0.2,
    rl_steps: usize = 30,
    /// Prompts per RL step.
    rl_batch: usize = 16,
    /// Size of the RL prompt pool.
    rl_prompts: usize = 200,
    gamma: f64 = 1.0,
    lambda: f64 = 0.95,
    clip: f64 = 0.2,
    inner_iters: usize = 4,
    kl_coef: f64 = 0.02,
    kl_ceiling: f64 = 1.0,
    divergence_bound: f64 = 1.0,
    rl_lr: f64 = 3e-4,
    value_lr: f64 = 1e-2,
    trunk_lr: f64 = 1e-4,
    clip_norm: f64 = 1.0,
    normalize_advantages: bool = true,
    train_trunk: bool = false,
    /// Dimensions trained by RL.
    dimensions: Vec<Dimension> = Dimension::ALL.to_vec(),
    /// Layer the steering adapters attach to; defaults to the last block when unset.
    attach_layer: Option<usize> = None,
    reward_sign: RewardSign = RewardSign::Maximize,
    /// Sampling temperature.
    temperature: f64 = 1.0,
    /// Generated tokens per idea.
    max_len: usize = 256,
    /// Decoding mode: static or dynamic.
    mode: DecodeMode = DecodeMode::Static,
    /// Static gains `N,F,E`.
    eps: ControlVector = ControlVector::ones(),
    eps_max: f64 = 5.0,
    max_sentences: usize = 24,
    /// Prompts decoded by `decode` and profiled by `eval`.
    decode_prompts: usize = 8,
    /// Ideas above this overall score enter the predictor dataset.
    threshold: f64 = 0.8,
    normalization: Normalization = Normalization::Global,
    /// Ideas generated to build the predictor dataset.
    predictor_ideas: usize = 200,
    predictor_embed: usize = 16,
    predictor_hidden: usize = 32,
    bins: usize = 51,
    predictor_epochs: usize = 40,
    predictor_lr: f64 = 1e-2,
    predictor_batch: usize = 16,
    /// Novelty gains swept with the other two gains at 1.
    gains: Vec<f64> = vec![1.0, 2.0, 3.0, 4.0],
    sweep_seeds: Vec<u64> = vec![0, 1, 2],
    sweep_prompts: usize = 100,
}

impl ConfigValue for Option<usize> {
    fn parse_value(s: &str) -> std::result::Result<Self, String> {
        if s.is_empty() {
            Ok(None)
        } else {
            usize::parse_value(s).map(Some)
        }
    }
    fn format_value(&self) -> String {
        self.map(|v| v.to_string()).unwrap_or_default()
    }
}

impl RunConfig {
    /// Applies `key = value` lines on top of the current values.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                path: origin.to_path_buf(),
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text, Path::new("<config>"))?;
        Ok(c)
    }

    /// Every key in declaration order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for k in Self::KEYS {
            writeln!(out, "{k} = {}", self.get(k).expect("declared key")).expect("string write");
        }
        out
    }

    /// Applies `--key value` pairs. Hyphens in keys are read as underscores.
    pub fn apply_overrides(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(flag) = it.next() {
            let body = flag.strip_prefix("--").ok_or_else(|| Error::Config {
                key: flag.clone(),
                msg: "expected `--key value`".into(),
            })?;
            let (key, value) = match body.split_once('=') {
                Some((k, v)) => (k.replace('-', "_"), v.to_string()),
                None => {
                    let key = body.replace('-', "_");
                    let v = it.next().ok_or_else(|| Error::Config {
                        key: key.clone(),
                        msg: "missing value".into(),
                    })?;
                    (key, v.clone())
                }
            };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        let v = self.get(key).ok_or_else(|| Error::Config {
            key: key.into(),
            msg: "unknown key".into(),
        })?;
        if v.is_empty() {
            return Err(Error::Config {
                key: key.into(),
                msg: "required for this command".into(),
            });
        }
        Ok(PathBuf::from(v))
    }
}
