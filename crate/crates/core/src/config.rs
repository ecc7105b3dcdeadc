//! Experiment configuration.
//!
//! Files are TOML: `key = value` lines grouped in `[section]`s. An optional
//! top-level `preset = "desk" | "paper"` picks the base defaults; every
//! key present in the file overrides that base. Unknown keys are errors.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::DEFAULT_ENTITIES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Elementwise sum of patch and semantic features.
    Add,
    /// Concatenate on the feature axis, then project back to `d_model`.
    ConcatProject,
}

/// Which branches feed the hyper-visual features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Full,
    /// Drop the raw patch branch at fusion; queries still come from patches.
    NoVisual,
    /// Bypass the alignment block entirely.
    NoSem,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::Full, Ablation::NoVisual, Ablation::NoSem];

    /// Row label used in comparison tables.
    pub fn label(self) -> &'static str {
        match self {
            Ablation::Full => "Ours",
            Ablation::NoVisual => "w/o Φ_visual",
            Ablation::NoSem => "w/o Φ_sem",
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoVisual => "no_visual",
            Ablation::NoSem => "no_sem",
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Ablation::Full),
            "no_visual" => Ok(Ablation::NoVisual),
            "no_sem" => Ok(Ablation::NoSem),
            other => Err(Error::config(format!("unknown ablation mode {other:?} (full | no_visual | no_sem)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Encoder and decoder depth.
    pub layers: usize,
    pub heads: usize,
    /// Heads of the anatomical cross-attention.
    pub align_heads: usize,
    pub align_blocks: usize,
    /// Feed-forward inner width as a multiple of `d_model`.
    pub ffn_mult: usize,
    /// Width of the visual features before projection to `d_model`.
    pub d_vis: usize,
    pub in_channels: usize,
    /// Output channels of each stride-2 3x3 conv stage.
    pub conv_channels: Vec<usize>,
    pub patch_positions: bool,
    pub fusion: Fusion,
    pub ablation: Ablation,
    pub tie_embeddings: bool,
    /// Give dictionary tokens their own embedding table instead of sharing
    /// the report vocabulary table.
    pub separate_dictionary_embedding: bool,
    pub init_std: f64,
    pub ln_eps: f64,
    /// Longest report (in tokens, excluding BOS/EOS) the decoder accepts.
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DictionaryConfig {
    pub entities: Vec<String>,
    /// Optional dictionary file; when set, it replaces `entities`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub file: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_visual: f64,
    pub lr_rest: f64,
    /// Multiplicative learning-rate decay applied once per epoch.
    pub lr_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; `0` disables clipping.
    pub grad_clip: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub label_smoothing: f64,
    pub min_freq: usize,
    /// Greedy-decode the validation split each epoch and log NLG metrics.
    pub val_metrics: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam_size: usize,
    /// Length-normalization exponent; `0` ranks by summed log-probability.
    pub alpha: f64,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Config {
    pub seed: u64,
    pub model: ModelConfig,
    pub dictionary: DictionaryConfig,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self::desk()
    }
}

impl Config {
    /// CPU-sized defaults.
    pub fn desk() -> Self {
        Config {
            seed: 42,
            model: ModelConfig {
                d_model: 64,
                layers: 2,
                heads: 4,
                align_heads: 4,
                align_blocks: 1,
                ffn_mult: 4,
                d_vis: 64,
                in_channels: 1,
                conv_channels: vec![16, 32],
                patch_positions: true,
                fusion: Fusion::Add,
                ablation: Ablation::Full,
                tie_embeddings: false,
                separate_dictionary_embedding: false,
                init_std: 0.02,
                ln_eps: 1e-5,
                max_len: 60,
            },
            dictionary: DictionaryConfig {
                entities: DEFAULT_ENTITIES.iter().map(|s| s.to_string()).collect(),
                file: None,
            },
            train: TrainConfig {
                epochs: 100,
                batch_size: 16,
                lr_visual: 1e-4,
                lr_rest: 5e-4,
                lr_decay: 0.8,
                beta1: 0.9,
                beta2: 0.999,
                adam_eps: 1e-8,
                grad_clip: 5.0,
                weight_decay: 0.0,
                warmup_steps: 0,
                label_smoothing: 0.0,
                min_freq: 3,
                val_metrics: true,
            },
            decode: DecodeConfig {
                beam_size: 3,
                alpha: 0.0,
                max_len: 60,
            },
        }
    }

    /// Published model scale: width 512, 3 layers, 8 heads, 2048-wide
    /// visual features.
    pub fn paper() -> Self {
        let mut c = Self::desk();
        c.model.d_model = 512;
        c.model.layers = 3;
        c.model.heads = 8;
        c.model.align_heads = 8;
        c.model.d_vis = 2048;
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(Error::config(format!("unknown preset {other:?} (desk | paper)"))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(Error::config(format!("d_model {} must be divisible by heads {}", m.d_model, m.heads)));
        }
        if m.align_heads == 0 || m.d_model % m.align_heads != 0 {
            return Err(Error::config(format!(
                "d_model {} must be divisible by align_heads {}",
                m.d_model, m.align_heads
            )));
        }
        if m.conv_channels.is_empty() || m.conv_channels.contains(&0) {
            return Err(Error::config("conv_channels needs at least one positive width"));
        }
        if m.d_vis == 0 || m.ffn_mult == 0 || m.in_channels == 0 || m.max_len == 0 {
            return Err(Error::config("d_vis, ffn_mult, in_channels and max_len must be positive"));
        }
        let t = &self.train;
        if t.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if !(t.lr_decay > 0.0 && t.lr_decay <= 1.0) {
            return Err(Error::config(format!("lr_decay must lie in (0, 1], got {}", t.lr_decay)));
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            return Err(Error::config("label_smoothing must lie in [0, 1)"));
        }
        if self.decode.beam_size == 0 || self.decode.max_len == 0 {
            return Err(Error::config("beam_size and decode max_len must be positive"));
        }
        if self.dictionary.entities.is_empty() && self.dictionary.file.is_none() {
            return Err(Error::config("dictionary needs at least one entity"));
        }
        Ok(())
    }

    /// Parses config text; `source_name` labels error messages.
    pub fn from_toml_str(text: &str, source_name: &str) -> Result<Self> {
        let parse_err = |line: usize, msg: String| Error::Parse {
            source_name: source_name.to_string(),
            line,
            msg,
        };
        let mut overlay: toml::Table = text.parse().map_err(|e: toml::de::Error| {
            let line = e.span().map_or(0, |s| line_of(text, s.start));
            parse_err(line, e.message().to_string())
        })?;

        let preset = match overlay.remove("preset") {
            None => "desk".to_string(),
            Some(toml::Value::String(s)) => s,
            Some(other) => return Err(parse_err(find_key_line(text, &[], "preset"), format!("preset must be a string, got {other}"))),
        };
        let base = Self::preset(&preset).map_err(|e| parse_err(find_key_line(text, &[], "preset"), e.to_string()))?;
        let mut merged = toml::Table::try_from(&base).map_err(|e| Error::config(e.to_string()))?;
        merge(&mut merged, overlay, &mut Vec::new(), text, source_name)?;

        let config: Config = toml::Value::Table(merged).try_into().map_err(|e: toml::de::Error| {
            let msg = e.message().to_string();
            let line = msg_key(&msg).map_or(0, |k| find_key_line(text, &[], k));
            parse_err(line, msg)
        })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml_str(&text, &path.display().to_string())
    }

    /// Fully materialized TOML, every default written out.
    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved TOML text.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml_string().as_bytes()))
    }
}

/// Overlays `src` onto `dst`, rejecting keys absent from `dst`.
fn merge(dst: &mut toml::Table, src: toml::Table, path: &mut Vec<String>, text: &str, source_name: &str) -> Result<()> {
    for (key, value) in src {
        // `dictionary.file` is optional and absent from serialized defaults.
        let optional = path.len() == 1 && path[0] == "dictionary" && key == "file";
        match (dst.get_mut(&key), value) {
            (Some(toml::Value::Table(d)), toml::Value::Table(s)) => {
                path.push(key);
                merge(d, s, path, text, source_name)?;
                path.pop();
            }
            (Some(slot), v) => {
                let widen = matches!((&*slot, &v), (toml::Value::Float(_), toml::Value::Integer(_)));
                if std::mem::discriminant(&*slot) != std::mem::discriminant(&v) && !widen {
                    let section: Vec<&str> = path.iter().map(String::as_str).collect();
                    return Err(Error::Parse {
                        source_name: source_name.to_string(),
                        line: find_key_line(text, &section, &key),
                        msg: format!("`{key}` expects a {}, got a {}", slot.type_str(), v.type_str()),
                    });
                }
                *slot = match v {
                    toml::Value::Integer(i) if widen => toml::Value::Float(i as f64),
                    v => v,
                };
            }
            (None, v) if optional => {
                dst.insert(key, v);
            }
            (None, _) => {
                let section: Vec<&str> = path.iter().map(String::as_str).collect();
                let full = section.iter().copied().chain([key.as_str()]).collect::<Vec<_>>().join(".");
                return Err(Error::Parse {
                    source_name: source_name.to_string(),
                    line: find_key_line(text, &section, &key),
                    msg: format!("unknown key `{full}`"),
                });
            }
        }
    }
    Ok(())
}

fn line_of(text: &str, byte: usize) -> usize {
    text[..byte.min(text.len())].matches('\n').count() + 1
}

/// 1-based line where `key` is assigned inside `[section]`, or 0 if absent.
fn find_key_line(text: &str, section: &[&str], key: &str) -> usize {
    let want = section.join(".");
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.starts_with('[') && line.ends_with(']') {
            current = line.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            continue;
        }
        if let Some((k, _)) = line.split_once('=') {
            let k = k.trim();
            if k == key && (current == want || want.is_empty()) {
                return i + 1;
            }
        }
    }
    0
}

fn msg_key(msg: &str) -> Option<&str> {
    let start = msg.find('`')? + 1;
    let end = start + msg[start..].find('`')?;
    msg[start..end].rsplit('.').next()
}
