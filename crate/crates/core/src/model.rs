//! The full A3Net pipeline: visual extractor, anatomical alignment, fusion
//! and the encoder-decoder generator, plus batch assembly.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{align, embed_dictionary, fuse, AttentionBlock};
use crate::config::{Ablation, DecodeConfig, Fusion, ModelConfig};
use crate::corpus::{ImageView, Sample, Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::generator::{beam_search, greedy_decode, Generator, GeneratorConfig, Hypothesis};
use crate::nn::{Linear, ParamBuilder, ParamGroup, ParamStore};
use crate::tensor::{no_grad, Tensor};
use crate::vision::{add_patch_positions, VisualExtractor};

/// Teacher-forcing batch: decoder inputs `[BOS, y…]` and targets `[y…, EOS]`,
/// right-padded with PAD to a common length.
#[derive(Debug, Clone)]
pub struct Batch {
    pub ids: Vec<String>,
    pub images: Vec<Vec<ImageView>>,
    pub inputs: Vec<Vec<usize>>,
    /// Row-major `[B, T]`.
    pub targets: Vec<usize>,
}

impl Batch {
    /// Reports longer than `max_len` tokens are truncated before EOS.
    pub fn from_samples(samples: &[&Sample], vocab: &Vocabulary, max_len: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::contract("cannot build an empty batch"));
        }
        let encoded: Vec<Vec<usize>> = samples
            .iter()
            .map(|s| {
                let mut ids = vocab.encode(&s.report);
                ids.truncate(max_len);
                ids
            })
            .collect();
        let t = encoded.iter().map(Vec::len).max().unwrap_or(0) + 1;
        let mut inputs = Vec::with_capacity(samples.len());
        let mut targets = Vec::with_capacity(samples.len() * t);
        for ids in &encoded {
            let mut input = vec![BOS];
            input.extend_from_slice(ids);
            input.resize(t, PAD);
            inputs.push(input);
            let start = targets.len();
            targets.extend_from_slice(ids);
            targets.push(EOS);
            targets.resize(start + t, PAD);
        }
        Ok(Self {
            ids: samples.iter().map(|s| s.id.clone()).collect(),
            images: samples.iter().map(|s| s.images.clone()).collect(),
            inputs,
            targets,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.inputs[0].len()
    }
}

#[derive(Debug, Clone)]
pub struct A3Net {
    pub config: ModelConfig,
    pub vision: VisualExtractor,
    /// Vocabulary ids of every dictionary token, in dictionary order.
    pub dictionary_ids: Vec<usize>,
    /// Table the dictionary rows are read from; the generator's token table
    /// unless a separate one is configured.
    pub dictionary_table: Tensor,
    /// `None` under [`Ablation::NoSem`], which has no semantic branch.
    pub semantic_projection: Option<Linear>,
    pub align_blocks: Vec<AttentionBlock>,
    pub fusion_projection: Option<Linear>,
    pub generator: Generator,
    pub params: ParamStore,
}

impl A3Net {
    /// Builds a freshly initialized model; parameters are drawn from a
    /// ChaCha8 stream seeded with `seed`.
    pub fn new(config: &ModelConfig, vocab_size: usize, dictionary_ids: Vec<usize>, seed: u64) -> Result<Self> {
        if vocab_size <= EOS + 1 {
            return Err(Error::config(format!("vocabulary of {vocab_size} has no content tokens")));
        }
        if let Some(&bad) = dictionary_ids.iter().find(|&&id| id >= vocab_size) {
            return Err(Error::Index {
                what: "dictionary token",
                index: bad,
                size: vocab_size,
            });
        }
        if config.d_model % config.heads != 0 || config.d_model % config.align_heads != 0 {
            return Err(Error::config("d_model must be divisible by heads and align_heads"));
        }
        let d = config.d_model;
        let mut params = ParamStore::default();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::new(&mut params, &mut rng, config.init_std);

        let vision = {
            let mut v = b.scope("vision").with_group(ParamGroup::Visual);
            VisualExtractor::new(&mut v, config.in_channels, &config.conv_channels, config.d_vis, d)?
        };
        let embed = b.normal("embed.tokens", &[vocab_size, d]);

        let with_sem = config.ablation != Ablation::NoSem;
        let (dictionary_table, semantic_projection, align_blocks) = if with_sem {
            let mut s = b.scope("alignment");
            let table = if config.separate_dictionary_embedding {
                s.normal("dictionary_embed", &[vocab_size, d])
            } else {
                embed.clone()
            };
            let proj = Linear::new(&mut s, "semantic_proj", d, d, true);
            let blocks = (0..config.align_blocks)
                .map(|i| AttentionBlock::new(&mut s, &format!("block{i}"), d, config.align_heads, config.ffn_mult * d, config.ln_eps))
                .collect::<Result<Vec<_>>>()?;
            (table, Some(proj), blocks)
        } else {
            (embed.clone(), None, Vec::new())
        };
        let fusion_projection = (config.ablation == Ablation::Full && config.fusion == Fusion::ConcatProject)
            .then(|| Linear::new(&mut b.scope("fusion"), "proj", 2 * d, d, true));

        let generator = Generator::new(
            &mut b,
            &GeneratorConfig {
                d_model: d,
                layers: config.layers,
                heads: config.heads,
                ffn_hidden: config.ffn_mult * d,
                ln_eps: config.ln_eps,
                max_positions: config.max_len + 1,
                tie_embeddings: config.tie_embeddings,
            },
            embed,
        )?;
        Ok(Self {
            config: config.clone(),
            vision,
            dictionary_ids,
            dictionary_table,
            semantic_projection,
            align_blocks,
            fusion_projection,
            generator,
            params,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.generator.vocab_size()
    }

    /// Hyper-visual features `[B, S, d]` for a batch of samples' views.
    pub fn hyper_visual(&self, images: &[&[ImageView]]) -> Result<Tensor> {
        let patches = add_patch_positions(&self.vision.extract(images)?, self.config.patch_positions)?;
        let Some(proj) = &self.semantic_projection else {
            return Ok(patches);
        };
        let semantic = embed_dictionary(&self.dictionary_ids, &self.dictionary_table, proj, images.len())?;
        let aligned = align(&patches, &semantic, &self.align_blocks)?;
        match self.config.ablation {
            Ablation::NoVisual => Ok(aligned),
            _ => fuse(&patches, &aligned, self.config.fusion, self.fusion_projection.as_ref()),
        }
    }

    /// Teacher-forced logits `[B, T, V]`.
    pub fn logits(&self, batch: &Batch) -> Result<Tensor> {
        let views: Vec<&[ImageView]> = batch.images.iter().map(Vec::as_slice).collect();
        let memory = self.generator.encode(&self.hyper_visual(&views)?)?;
        self.generator.decode(&memory, &batch.inputs)
    }

    /// Mean token negative log-likelihood over non-PAD targets.
    pub fn loss(&self, batch: &Batch, label_smoothing: f64) -> Result<Tensor> {
        nll_loss(&self.logits(batch)?, &batch.targets, PAD, label_smoothing)
    }

    /// Decodes one sample. Beam size 1 runs greedy search.
    pub fn generate(&self, images: &[ImageView], decode: &DecodeConfig) -> Result<Hypothesis> {
        let max_len = decode.max_len.min(self.config.max_len);
        no_grad(|| {
            let memory = self.generator.encode(&self.hyper_visual(&[images])?)?;
            let stepper = self.generator.stepper(&memory)?;
            if decode.beam_size <= 1 {
                greedy_decode(&stepper, max_len)
            } else {
                beam_search(&stepper, decode.beam_size, max_len, decode.alpha)?
                    .into_iter()
                    .next()
                    .ok_or_else(|| Error::contract("beam search returned no hypotheses"))
            }
        })
    }

    /// Decodes and detokenizes one sample.
    pub fn generate_text(&self, images: &[ImageView], decode: &DecodeConfig, vocab: &Vocabulary) -> Result<String> {
        let h = self.generate(images, decode)?;
        Ok(vocab.decode(h.content()))
    }
}

/// Mean of `-log softmax(logits)[target]` over positions whose target is
/// not `pad`; `logits` is `[B, T, V]` and `targets` row-major `[B, T]`.
pub fn nll_loss(logits: &Tensor, targets: &[usize], pad: usize, label_smoothing: f64) -> Result<Tensor> {
    let v = *logits.shape().last().ok_or_else(|| Error::contract("logits must have a vocabulary axis"))?;
    let rows = logits.numel() / v;
    if targets.len() != rows {
        return Err(Error::shape("nll_loss", logits.shape(), &[targets.len()]));
    }
    logits.reshape(&[rows, v])?.cross_entropy(targets, pad, label_smoothing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::corpus::Split;

    fn sample(id: &str, report: &str) -> Sample {
        Sample {
            id: id.into(),
            images: vec![ImageView::blank(16, 16, 1)],
            report: report.into(),
            split: Split::Train,
        }
    }

    #[test]
    fn batch_framing_and_padding() {
        let vocab = Vocabulary::build(["a b c", "a b"], 1, &[]);
        let s1 = sample("x", "a b c");
        let s2 = sample("y", "b");
        let batch = Batch::from_samples(&[&s1, &s2], &vocab, 60).unwrap();
        let (a, b, c) = (vocab.id("a").unwrap(), vocab.id("b").unwrap(), vocab.id("c").unwrap());
        assert_eq!(batch.inputs, vec![vec![BOS, a, b, c], vec![BOS, b, PAD, PAD]]);
        assert_eq!(batch.targets, vec![a, b, c, EOS, b, EOS, PAD, PAD]);
        let short = Batch::from_samples(&[&s1], &vocab, 2).unwrap();
        assert_eq!(short.targets, vec![a, b, EOS]);
    }

    #[test]
    fn nll_hand_example() {
        let logits = Tensor::new(&[1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
        let loss = nll_loss(&logits, &[0, 1], 99, 0.0).unwrap().item();
        let expected = -(1f64.exp() / (1f64.exp() + 2.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
        let uniform = Tensor::zeros(&[2, 3, 7]);
        let l = nll_loss(&uniform, &[1, 2, 0, 3, 0, 0], 0, 0.0).unwrap().item();
        assert!((l - 7f64.ln()).abs() < 1e-12);
        assert!(matches!(nll_loss(&uniform, &[0; 6], 0, 0.0), Err(Error::Contract(_))));
    }

    fn tiny_config(ablation: Ablation) -> ModelConfig {
        let mut c = Config::desk().model;
        c.d_model = 8;
        c.heads = 2;
        c.align_heads = 2;
        c.layers = 1;
        c.d_vis = 8;
        c.conv_channels = vec![4, 4];
        c.ffn_mult = 2;
        c.ablation = ablation;
        c
    }

    #[test]
    fn ablations_route_branches() {
        let cfg = crate::corpus::SyntheticConfig::default();
        let img = crate::corpus::render_views(&cfg, &crate::corpus::synthetic_findings(1, 1, &cfg)[0]);
        let views: [&[ImageView]; 1] = [&img];
        let full = A3Net::new(&tiny_config(Ablation::Full), 12, vec![4, 5], 3).unwrap();
        let no_sem = A3Net::new(&tiny_config(Ablation::NoSem), 12, vec![4, 5], 3).unwrap();
        let no_vis = A3Net::new(&tiny_config(Ablation::NoVisual), 12, vec![4, 5], 3).unwrap();
        assert!(full.params.count() > no_sem.params.count());
        assert_eq!(full.params.count(), no_vis.params.count());

        let patches = add_patch_positions(&full.vision.extract(&views).unwrap(), true).unwrap();
        assert_eq!(no_sem.hyper_visual(&views).unwrap().to_vec(), patches.to_vec());

        let sem = embed_dictionary(&no_vis.dictionary_ids, &no_vis.dictionary_table, no_vis.semantic_projection.as_ref().unwrap(), 1).unwrap();
        let aligned = align(&patches, &sem, &no_vis.align_blocks).unwrap();
        assert_eq!(no_vis.hyper_visual(&views).unwrap().to_vec(), aligned.to_vec());
        let fused = full.hyper_visual(&views).unwrap().to_vec();
        let summed: Vec<f64> = patches.to_vec().iter().zip(aligned.to_vec()).map(|(p, a)| p + a).collect();
        assert_eq!(fused, summed);
    }

    #[test]
    fn init_is_seeded() {
        let a = A3Net::new(&tiny_config(Ablation::Full), 12, vec![4], 9).unwrap();
        let b = A3Net::new(&tiny_config(Ablation::Full), 12, vec![4], 9).unwrap();
        let c = A3Net::new(&tiny_config(Ablation::Full), 12, vec![4], 10).unwrap();
        let flat = |m: &A3Net| m.params.iter().flat_map(|p| p.tensor.to_vec()).collect::<Vec<_>>();
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
    }

    #[test]
    fn bad_dictionary_id_rejected() {
        assert!(matches!(A3Net::new(&tiny_config(Ablation::Full), 12, vec![12], 0), Err(Error::Index { .. })));
    }
}
