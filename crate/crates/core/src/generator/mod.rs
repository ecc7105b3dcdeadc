//! Transformer encoder-decoder report generator.

mod search;

pub use search::{beam_search, beam_search_observed, greedy_decode, BeamStep, Hypothesis, StepModel};

use crate::alignment::{AttentionBlock, MultiHeadAttention};
use crate::corpus::BOS;
use crate::error::{Error, Result};
use crate::nn::{sinusoid_table, FeedForward, LayerNorm, ParamBuilder};
use crate::tensor::{log_softmax_slice, no_grad, Tensor};

#[derive(Debug, Clone)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm_self: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm_cross: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl DecoderLayer {
    fn new(b: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize, hidden: usize, eps: f64) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            self_attn: MultiHeadAttention::new(&mut s, "self_attn", d, heads)?,
            norm_self: LayerNorm::new(&mut s, "norm_self", d, eps),
            cross_attn: MultiHeadAttention::new(&mut s, "cross_attn", d, heads)?,
            norm_cross: LayerNorm::new(&mut s, "norm_cross", d, eps),
            ffn: FeedForward::new(&mut s, "ffn", d, hidden),
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", d, eps),
        })
    }

    fn forward(&self, x: &Tensor, memory: &Tensor) -> Result<Tensor> {
        let x = self.norm_self.forward(&x.add(&self.self_attn.forward(x, x, x, true, "decoder.self")?)?)?;
        let x = self
            .norm_cross
            .forward(&x.add(&self.cross_attn.forward(&x, memory, memory, false, "decoder.cross")?)?)?;
        self.norm_ffn.forward(&x.add(&self.ffn.forward(&x)?)?)
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_hidden: usize,
    pub ln_eps: f64,
    /// Longest decoder input, BOS included.
    pub max_positions: usize,
    pub tie_embeddings: bool,
}

#[derive(Debug, Clone)]
pub struct Generator {
    pub encoder: Vec<AttentionBlock>,
    pub decoder: Vec<DecoderLayer>,
    /// `[V, d]` token table, shared with the dictionary branch by default.
    pub embed: Tensor,
    /// `[d, V]` output projection; `None` when tied to `embed`.
    pub out_weight: Option<Tensor>,
    pub out_bias: Tensor,
    positions: Tensor,
    d_model: usize,
}

impl Generator {
    pub fn new(b: &mut ParamBuilder<'_>, cfg: &GeneratorConfig, embed: Tensor) -> Result<Self> {
        let vocab = embed.shape()[0];
        let encoder = (0..cfg.layers)
            .map(|i| AttentionBlock::new(&mut b.scope("encoder"), &format!("layer{i}"), cfg.d_model, cfg.heads, cfg.ffn_hidden, cfg.ln_eps))
            .collect::<Result<Vec<_>>>()?;
        let decoder = (0..cfg.layers)
            .map(|i| DecoderLayer::new(&mut b.scope("decoder"), &format!("layer{i}"), cfg.d_model, cfg.heads, cfg.ffn_hidden, cfg.ln_eps))
            .collect::<Result<Vec<_>>>()?;
        let mut out = b.scope("output");
        let out_weight = (!cfg.tie_embeddings).then(|| out.normal("weight", &[cfg.d_model, vocab]));
        let out_bias = out.constant("bias", &[vocab], 0.0);
        Ok(Self {
            encoder,
            decoder,
            embed,
            out_weight,
            out_bias,
            positions: sinusoid_table(cfg.max_positions, cfg.d_model)?,
            d_model: cfg.d_model,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embed.shape()[0]
    }

    pub fn max_positions(&self) -> usize {
        self.positions.shape()[0]
    }

    /// Stack of self-attention encoder layers; identity when empty.
    pub fn encode(&self, hyper: &Tensor) -> Result<Tensor> {
        let mut z = hyper.clone();
        for layer in &self.encoder {
            z = layer.forward(&z, &z, "encoder.self")?;
        }
        Ok(z)
    }

    /// Teacher-forced logits `[B, T, V]` for equal-length input rows (each
    /// starting with BOS) against encoder memory `[B, S, d]`.
    pub fn decode(&self, memory: &Tensor, inputs: &[Vec<usize>]) -> Result<Tensor> {
        let b = inputs.len();
        let t = inputs.first().map_or(0, Vec::len);
        if b == 0 || t == 0 || inputs.iter().any(|r| r.len() != t) {
            return Err(Error::contract("decoder inputs must be non-empty rows of equal length"));
        }
        if t > self.max_positions() {
            return Err(Error::contract(format!(
                "decoder prefix of length {t} exceeds the maximum of {}",
                self.max_positions()
            )));
        }
        if memory.rank() != 3 || memory.shape()[0] != b {
            return Err(Error::shape("decode", memory.shape(), &[b, t]));
        }
        let flat: Vec<usize> = inputs.iter().flatten().copied().collect();
        let x = Tensor::embedding(&self.embed, &flat)?
            .scale((self.d_model as f64).sqrt())
            .reshape(&[b, t, self.d_model])?;
        let mut x = x.add(&self.positions.narrow(0, 0, t)?)?;
        for layer in &self.decoder {
            x = layer.forward(&x, memory)?;
        }
        let logits = match &self.out_weight {
            Some(w) => x.matmul(w)?,
            None => x.matmul(&self.embed.transpose_last_two()?)?,
        };
        logits.add(&self.out_bias)
    }

    /// Logits for the token following `prefix` (which starts at BOS), given
    /// one sample's encoder memory `[1, S, d]`.
    pub fn decode_step(&self, memory: &Tensor, prefix: &[usize]) -> Result<Vec<f64>> {
        if prefix.first() != Some(&BOS) {
            return Err(Error::contract("decoder prefix must start with BOS"));
        }
        let logits = self.decode(memory, &[prefix.to_vec()])?;
        let v = self.vocab_size();
        let data = logits.data();
        Ok(data[data.len() - v..].to_vec())
    }

    /// Step model over one sample's memory for greedy and beam search.
    pub fn stepper(&self, memory: &Tensor) -> Result<MemoryStepper<'_>> {
        if memory.rank() != 3 || memory.shape()[0] != 1 {
            return Err(Error::shape("stepper", memory.shape(), &[1]));
        }
        let (s, d) = (memory.shape()[1], memory.shape()[2]);
        Ok(MemoryStepper {
            generator: self,
            memory: memory.detach().reshape(&[s, d])?,
        })
    }
}

/// Adapts a [`Generator`] plus encoder memory to [`StepModel`].
pub struct MemoryStepper<'a> {
    generator: &'a Generator,
    /// `[S, d]`
    memory: Tensor,
}

impl StepModel for MemoryStepper<'_> {
    fn vocab_size(&self) -> usize {
        self.generator.vocab_size()
    }

    fn next_log_probs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        no_grad(|| {
            let memory = self.memory.expand_leading(prefixes.len())?;
            let logits = self.generator.decode(&memory, prefixes)?;
            let v = self.vocab_size();
            let t = prefixes[0].len();
            let data = logits.data();
            Ok((0..prefixes.len())
                .map(|row| {
                    let start = (row * t + t - 1) * v;
                    log_softmax_slice(&data[start..start + v])
                })
                .collect())
        })
    }
}
