//! Maximum-likelihood training with Adam, per-epoch learning-rate decay,
//! validation and checkpointing.

mod checkpoint;
mod optim;

pub use checkpoint::{Checkpoint, CheckpointMeta, NamedArray, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use optim::{clip_scale, decay_lr, global_grad_norm, Adam, AdamHyper};

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::AnatomicalDictionary;
use crate::config::{Config, DecodeConfig};
use crate::corpus::{Corpus, Sample, Split, Vocabulary, PAD};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_texts, MetricReport, TextRecord};
use crate::model::{A3Net, Batch};
use crate::tensor::no_grad;

/// One line of the training history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    /// 1-based epoch number.
    pub epoch: usize,
    pub optimizer_step: u64,
    pub lr_visual: f64,
    pub lr_rest: f64,
    /// Token-weighted mean NLL over the epoch's training batches.
    pub train_loss: f64,
    pub val_loss: Option<f64>,
    pub val_metrics: Option<MetricReport>,
    /// Whether this epoch produced the best checkpoint so far.
    pub best: bool,
    pub config_digest: String,
}

/// Resolves the configured dictionary; a relative `file` is looked up
/// under `base_dir` when given.
pub fn resolve_dictionary(config: &Config, base_dir: Option<&Path>) -> Result<AnatomicalDictionary> {
    match &config.dictionary.file {
        Some(file) => {
            let path = Path::new(file);
            let path = match base_dir {
                Some(dir) if path.is_relative() => dir.join(path),
                _ => path.to_path_buf(),
            };
            AnatomicalDictionary::load(&path).map_err(|e| Error::config(format!("dictionary file {}: {e}", path.display())))
        }
        None => AnatomicalDictionary::new(&config.dictionary.entities),
    }
}

/// Rebuilds a model and its vocabulary from a checkpoint.
pub fn load_model(ckpt: &Checkpoint) -> Result<(A3Net, Vocabulary)> {
    let vocab = ckpt.meta.vocab.clone();
    let dictionary = AnatomicalDictionary::new(&ckpt.meta.dictionary)?;
    let model = A3Net::new(&ckpt.config.model, vocab.len(), dictionary.token_ids(&vocab)?, ckpt.config.seed)?;
    for p in model.params.iter() {
        let stored = ckpt
            .get(&p.name)
            .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter {}", p.name)))?;
        if stored.shape != p.tensor.shape() {
            return Err(Error::Format(format!(
                "parameter {} has shape {:?} in the checkpoint but {:?} in the model",
                p.name,
                stored.shape,
                p.tensor.shape()
            )));
        }
        p.tensor.set_data(&stored.data)?;
    }
    Ok((model, vocab))
}

/// Decodes every sample of `split`, in corpus order.
pub fn decode_split(model: &A3Net, vocab: &Vocabulary, corpus: &Corpus, split: Split, decode: &DecodeConfig) -> Result<Vec<TextRecord>> {
    corpus
        .split(split)
        .map(|s| {
            Ok(TextRecord {
                id: s.id.clone(),
                text: model.generate_text(&s.images, decode, vocab)?,
            })
        })
        .collect()
}

fn target_tokens(batch: &Batch) -> usize {
    batch.targets.iter().filter(|&&t| t != PAD).count()
}

const SHUFFLE_STREAM: u64 = 1;

pub struct Trainer {
    pub config: Config,
    pub vocab: Vocabulary,
    pub dictionary: AnatomicalDictionary,
    pub model: A3Net,
    pub optimizer: Adam,
    rng: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_score: Option<f64>,
    pub history: Vec<EpochRecord>,
}

impl Trainer {
    /// Fresh model; the vocabulary comes from the training split plus every
    /// dictionary token.
    pub fn new(config: Config, dictionary: AnatomicalDictionary, corpus: &Corpus) -> Result<Self> {
        config.validate()?;
        corpus.validate()?;
        let train: Vec<&str> = corpus.split(Split::Train).map(|s| s.report.as_str()).collect();
        if train.is_empty() {
            return Err(Error::config("corpus has no training samples"));
        }
        let vocab = Vocabulary::build(train, config.train.min_freq, dictionary.entities());
        let model = A3Net::new(&config.model, vocab.len(), dictionary.token_ids(&vocab)?, config.seed)?;
        let optimizer = Adam::new(&model.params, config.train.lr_visual, config.train.lr_rest, hyper(&config));
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SHUFFLE_STREAM);
        Ok(Self {
            config,
            vocab,
            dictionary,
            model,
            optimizer,
            rng,
            epoch: 0,
            best_score: None,
            history: Vec::new(),
        })
    }

    /// Restores the complete training state, including optimizer moments
    /// and the shuffling stream.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let (model, vocab) = load_model(ckpt)?;
        let mut optimizer = Adam::new(&model.params, ckpt.config.train.lr_visual, ckpt.config.train.lr_rest, hyper(&ckpt.config));
        optimizer.step = ckpt.meta.optimizer_step;
        for (k, name) in optimizer.names.clone().iter().enumerate() {
            for (slot, prefix) in [(&mut optimizer.m[k], "adam.m."), (&mut optimizer.v[k], "adam.v.")] {
                let stored = ckpt
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Format(format!("checkpoint lacks optimizer state {prefix}{name}")))?;
                if stored.data.len() != slot.len() {
                    return Err(Error::Format(format!("optimizer state {prefix}{name} has the wrong size")));
                }
                slot.copy_from_slice(&stored.data);
            }
        }
        Ok(Self {
            config: ckpt.config.clone(),
            vocab,
            dictionary: AnatomicalDictionary::new(&ckpt.meta.dictionary)?,
            model,
            optimizer,
            rng: ckpt.meta.rng.restore()?,
            epoch: ckpt.meta.epoch,
            best_score: ckpt.meta.best_val_loss,
            history: ckpt.meta.history.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut tensors: Vec<NamedArray> = self
            .model
            .params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.tensor.shape().to_vec(),
                data: p.tensor.to_vec(),
            })
            .collect();
        for (k, p) in self.model.params.iter().enumerate() {
            for (prefix, data) in [("adam.m.", &self.optimizer.m[k]), ("adam.v.", &self.optimizer.v[k])] {
                tensors.push(NamedArray {
                    name: format!("{prefix}{}", p.name),
                    shape: p.tensor.shape().to_vec(),
                    data: data.clone(),
                });
            }
        }
        Checkpoint {
            config: self.config.clone(),
            meta: CheckpointMeta {
                config_toml: self.config.to_toml_string(),
                epoch: self.epoch,
                optimizer_step: self.optimizer.step,
                rng: RngState::capture(&self.rng),
                vocab: self.vocab.clone(),
                dictionary: self.dictionary.entities().to_vec(),
                best_val_loss: self.best_score,
                history: self.history.clone(),
            },
            tensors,
        }
    }

    fn batches<'a>(&self, samples: &[&'a Sample]) -> Result<Vec<Batch>> {
        samples
            .chunks(self.config.train.batch_size)
            .map(|chunk| Batch::from_samples(chunk, &self.vocab, self.config.model.max_len))
            .collect()
    }

    /// Token-weighted mean loss over `split` without recording gradients;
    /// `None` for an empty split.
    pub fn evaluate_loss(&self, corpus: &Corpus, split: Split) -> Result<Option<f64>> {
        let samples: Vec<&Sample> = corpus.split(split).collect();
        if samples.is_empty() {
            return Ok(None);
        }
        no_grad(|| {
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in self.batches(&samples)? {
                let n = target_tokens(&batch);
                sum += self.model.loss(&batch, 0.0)?.item() * n as f64;
                count += n;
            }
            Ok(Some(sum / count as f64))
        })
    }

    /// One pass over the shuffled training split followed by validation.
    pub fn run_epoch(&mut self, corpus: &Corpus) -> Result<EpochRecord> {
        let t = &self.config.train;
        self.optimizer.lr_visual = decay_lr(t.lr_visual, t.lr_decay, self.epoch);
        self.optimizer.lr_rest = decay_lr(t.lr_rest, t.lr_decay, self.epoch);
        let (grad_clip, warmup, smoothing) = (t.grad_clip, t.warmup_steps, t.label_smoothing);

        let mut samples: Vec<&Sample> = corpus.split(Split::Train).collect();
        if samples.is_empty() {
            return Err(Error::config("corpus has no training samples"));
        }
        samples.shuffle(&mut self.rng);
        let (mut sum, mut count) = (0.0, 0usize);
        for (k, batch) in self.batches(&samples)?.iter().enumerate() {
            let loss = self.model.loss(batch, smoothing)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::NonFinite(format!(
                    "loss is {value} at epoch {}, batch {k} (samples {})",
                    self.epoch + 1,
                    batch.ids.join(", ")
                )));
            }
            loss.backward()?;
            let scale = clip_scale(global_grad_norm(&self.model.params), grad_clip);
            let lr_scale = if warmup > 0 {
                ((self.optimizer.step + 1) as f64 / warmup as f64).min(1.0)
            } else {
                1.0
            };
            self.optimizer.step(&self.model.params, scale, lr_scale)?;
            self.model.params.zero_grads();
            let n = target_tokens(batch);
            sum += value * n as f64;
            count += n;
        }
        let train_loss = sum / count as f64;

        let val_loss = self.evaluate_loss(corpus, Split::Val)?;
        let val_metrics = if self.config.train.val_metrics && val_loss.is_some() {
            let greedy = DecodeConfig {
                beam_size: 1,
                ..self.config.decode.clone()
            };
            let cands = decode_split(&self.model, &self.vocab, corpus, Split::Val, &greedy)?;
            let refs: Vec<&str> = corpus.split(Split::Val).map(|s| s.report.as_str()).collect();
            let cand_text: Vec<&str> = cands.iter().map(|c| c.text.as_str()).collect();
            Some(evaluate_texts(&cand_text, &refs)?)
        } else {
            None
        };
        let score = val_loss.unwrap_or(train_loss);
        let best = self.best_score.is_none_or(|b| score < b);
        if best {
            self.best_score = Some(score);
        }
        self.epoch += 1;
        let record = EpochRecord {
            epoch: self.epoch,
            optimizer_step: self.optimizer.step,
            lr_visual: self.optimizer.lr_visual,
            lr_rest: self.optimizer.lr_rest,
            train_loss,
            val_loss,
            val_metrics,
            best,
            config_digest: self.config.digest(),
        };
        self.history.push(record.clone());
        Ok(record)
    }

    /// Trains until `config.train.epochs` epochs are complete. With an
    /// output directory, writes `last.ckpt`, `best.ckpt` (lowest validation
    /// loss, or training loss without a validation split) and
    /// `history.jsonl` after every epoch.
    pub fn fit(&mut self, corpus: &Corpus, out_dir: Option<&Path>, mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("config.toml"), self.config.to_toml_string())?;
        }
        while self.epoch < self.config.train.epochs {
            let record = self.run_epoch(corpus)?;
            if let Some(dir) = out_dir {
                let ckpt = self.checkpoint();
                ckpt.save(&dir.join("last.ckpt"))?;
                if record.best {
                    ckpt.save(&dir.join("best.ckpt"))?;
                }
                write_history(&dir.join("history.jsonl"), &self.history)?;
            }
            on_epoch(&record);
        }
        Ok(())
    }
}

fn hyper(config: &Config) -> AdamHyper {
    AdamHyper {
        beta1: config.train.beta1,
        beta2: config.train.beta2,
        eps: config.train.adam_eps,
        weight_decay: config.train.weight_decay,
    }
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in history {
        writeln!(w, "{}", serde_json::to_string(r)?)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic, SyntheticConfig};
    use crate::nn::ParamGroup;

    fn small_config() -> Config {
        let mut c = Config::desk();
        c.model.d_model = 16;
        c.model.heads = 2;
        c.model.align_heads = 2;
        c.model.layers = 1;
        c.model.d_vis = 16;
        c.model.conv_channels = vec![4, 8];
        c.train.batch_size = 4;
        c.train.epochs = 2;
        c.train.min_freq = 1;
        c.train.val_metrics = false;
        c
    }

    fn setup() -> (Trainer, Corpus) {
        let corpus = generate_synthetic(3, 24, &SyntheticConfig::default()).unwrap();
        let cfg = small_config();
        let dict = resolve_dictionary(&cfg, None).unwrap();
        (Trainer::new(cfg, dict, &corpus).unwrap(), corpus)
    }

    #[test]
    fn groups_partition_parameters() {
        let (t, _) = setup();
        let visual = t.model.params.iter().filter(|p| p.group == ParamGroup::Visual).count();
        assert!(visual > 0 && visual < t.model.params.len());
        assert!(t.model.params.iter().all(|p| p.name.starts_with("vision.") == (p.group == ParamGroup::Visual)));
    }

    #[test]
    fn small_step_decreases_batch_loss() {
        let (mut t, corpus) = setup();
        t.optimizer.lr_visual = 1e-5;
        t.optimizer.lr_rest = 1e-5;
        let samples: Vec<&Sample> = corpus.split(Split::Train).take(4).collect();
        let batch = Batch::from_samples(&samples, &t.vocab, 60).unwrap();
        let loss = t.model.loss(&batch, 0.0).unwrap();
        let before = loss.item();
        loss.backward().unwrap();
        t.optimizer.step(&t.model.params, 1.0, 1.0).unwrap();
        let after = no_grad(|| t.model.loss(&batch, 0.0).unwrap().item());
        assert!(after < before, "{after} !< {before}");
    }

    #[test]
    fn lr_decays_per_epoch() {
        let (mut t, corpus) = setup();
        let r1 = t.run_epoch(&corpus).unwrap();
        let r2 = t.run_epoch(&corpus).unwrap();
        assert_eq!(r1.lr_rest, 5e-4);
        assert!((r2.lr_rest - 4e-4).abs() < 1e-18);
        assert!((r2.lr_visual - 8e-5).abs() < 1e-18);
    }

    #[test]
    fn seeded_runs_are_identical_and_resume_matches() {
        let (mut a, corpus) = setup();
        let (mut b, _) = setup();
        let la: Vec<f64> = (0..2).map(|_| a.run_epoch(&corpus).unwrap().train_loss).collect();
        let lb: Vec<f64> = (0..2).map(|_| b.run_epoch(&corpus).unwrap().train_loss).collect();
        assert_eq!(la, lb);

        let (mut c, _) = setup();
        c.run_epoch(&corpus).unwrap();
        let bytes = c.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        let next = resumed.run_epoch(&corpus).unwrap();
        assert!((next.train_loss - la[1]).abs() < 1e-9);
        assert_eq!(resumed.history.len(), 2);
    }

    #[test]
    fn checkpoint_reload_gives_bit_identical_logits() {
        let (mut t, corpus) = setup();
        t.run_epoch(&corpus).unwrap();
        let (model, vocab) = load_model(&Checkpoint::from_bytes(&t.checkpoint().to_bytes().unwrap()).unwrap()).unwrap();
        let samples: Vec<&Sample> = corpus.samples.iter().take(3).collect();
        let batch = Batch::from_samples(&samples, &vocab, 60).unwrap();
        let a = no_grad(|| t.model.logits(&batch).unwrap().to_vec());
        let b = no_grad(|| model.logits(&batch).unwrap().to_vec());
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn fit_writes_artifacts() {
        let (mut t, corpus) = setup();
        let dir = tempfile::tempdir().unwrap();
        let mut seen = 0;
        t.fit(&corpus, Some(dir.path()), |_| seen += 1).unwrap();
        assert_eq!(seen, 2);
        for f in ["last.ckpt", "best.ckpt", "history.jsonl", "config.toml"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let history = std::fs::read_to_string(dir.path().join("history.jsonl")).unwrap();
        assert_eq!(history.lines().count(), 2);
        let rec: EpochRecord = serde_json::from_str(history.lines().next().unwrap()).unwrap();
        assert_eq!(rec.config_digest, t.config.digest());
    }
}
