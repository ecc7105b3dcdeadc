//! Anatomical attention alignment.
//!
//! Patch features act as queries against the token embeddings of a fixed
//! anatomical dictionary. The attended result is normalized, passed through
//! a feed-forward sublayer and fused back onto the patches, giving the
//! hyper-visual features the encoder consumes.

use std::cell::RefCell;
use std::collections::HashSet;
use std::path::Path;

use crate::config::Fusion;
use crate::corpus::{tokenize, Vocabulary};
use crate::error::{Error, Result};
use crate::nn::{FeedForward, LayerNorm, Linear, ParamBuilder};
use crate::tensor::Tensor;

pub const DEFAULT_ENTITIES: [&str; 5] = ["pneumothorax", "pleural", "spine", "heart", "hernia"];

/// Ordered list of anatomical entity strings.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AnatomicalDictionary {
    entities: Vec<String>,
}

impl Default for AnatomicalDictionary {
    fn default() -> Self {
        Self {
            entities: DEFAULT_ENTITIES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl AnatomicalDictionary {
    /// Lowercases and trims every entry; rejects empty lists, blank entries
    /// and duplicates.
    pub fn new<S: AsRef<str>>(entities: &[S]) -> Result<Self> {
        let mut seen = HashSet::new();
        let mut out = Vec::with_capacity(entities.len());
        for e in entities {
            let norm = e.as_ref().trim().to_lowercase();
            if norm.is_empty() || tokenize(&norm).is_empty() {
                return Err(Error::config(format!("dictionary entry {:?} has no tokens", e.as_ref())));
            }
            if !seen.insert(norm.clone()) {
                return Err(Error::config(format!("duplicate dictionary entry {norm:?}")));
            }
            out.push(norm);
        }
        if out.is_empty() {
            return Err(Error::config("dictionary needs at least one entity"));
        }
        Ok(Self { entities: out })
    }

    /// One entity per line; `#` starts a comment; blank lines are skipped.
    pub fn parse(text: &str) -> Result<Self> {
        let entries: Vec<&str> = text
            .lines()
            .map(|l| l.split('#').next().unwrap_or("").trim())
            .filter(|l| !l.is_empty())
            .collect();
        Self::new(&entries)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn entities(&self) -> &[String] {
        &self.entities
    }

    pub fn len(&self) -> usize {
        self.entities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entities.is_empty()
    }

    /// Vocabulary ids of every entity token, in dictionary order then token
    /// order. A token missing from the vocabulary is a configuration error.
    pub fn token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>> {
        let mut ids = Vec::new();
        for e in &self.entities {
            for tok in tokenize(e) {
                let id = vocab
                    .id(&tok)
                    .ok_or_else(|| Error::config(format!("dictionary token {tok:?} (entity {e:?}) is not in the vocabulary")))?;
                ids.push(id);
            }
        }
        Ok(ids)
    }
}

/// One captured attention-weight tensor.
#[derive(Debug, Clone)]
pub struct AttentionRecord {
    pub site: &'static str,
    /// `[B, Sq, Sk]` for a single head.
    pub shape: Vec<usize>,
    pub weights: Vec<f64>,
}

thread_local! {
    static PROBE: RefCell<Option<Vec<AttentionRecord>>> = const { RefCell::new(None) };
}

/// Runs `f` and returns every attention-weight matrix computed on this
/// thread while it ran, one record per head.
pub fn capture_attention<T>(f: impl FnOnce() -> T) -> (T, Vec<AttentionRecord>) {
    let prev = PROBE.with(|p| p.borrow_mut().replace(Vec::new()));
    let out = f();
    let records = PROBE.with(|p| std::mem::replace(&mut *p.borrow_mut(), prev)).unwrap_or_default();
    (out, records)
}

fn record(site: &'static str, weights: &Tensor) {
    PROBE.with(|p| {
        if let Some(records) = p.borrow_mut().as_mut() {
            records.push(AttentionRecord {
                site,
                shape: weights.shape().to_vec(),
                weights: weights.to_vec(),
            });
        }
    });
}

/// Multi-head scaled dot-product attention without projection biases.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(Error::config(format!("model width {d} is not divisible by {heads} heads")));
        }
        let mut s = b.scope(name);
        Ok(Self {
            w_q: Linear::new(&mut s, "w_q", d, d, false),
            w_k: Linear::new(&mut s, "w_k", d, d, false),
            w_v: Linear::new(&mut s, "w_v", d, d, false),
            w_o: Linear::new(&mut s, "w_o", d, d, false),
            heads,
        })
    }

    /// `Concat_i(softmax(Q W_i^Q (K W_i^K)^T / sqrt(d_k)) V W_i^V) W^O`.
    ///
    /// `q` is `[B, Sq, d]`, `k` and `v` are `[B, Sk, d]`. With `causal`, query
    /// `i` attends only to keys `j <= i` (requires `Sq <= Sk`).
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor, causal: bool, site: &'static str) -> Result<Tensor> {
        let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
        if qs.len() != 3 || ks.len() != 3 || ks != vs || qs[0] != ks[0] || qs[2] != ks[2] {
            return Err(Error::shape("multi_head_attention", qs, ks));
        }
        let d = qs[2];
        if d % self.heads != 0 {
            return Err(Error::shape("multi_head_attention", qs, &[self.heads]));
        }
        let dk = d / self.heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let q = self.w_q.forward(q)?;
        let k = self.w_k.forward(k)?;
        let v = self.w_v.forward(v)?;

        let mut heads = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = q.narrow(2, h * dk, dk)?;
            let kh = k.narrow(2, h * dk, dk)?;
            let vh = v.narrow(2, h * dk, dk)?;
            let scores = qh.matmul(&kh.transpose_last_two()?)?.scale(scale);
            let weights = if causal { scores.softmax_rows_causal()? } else { scores.softmax_rows() };
            record(site, &weights);
            heads.push(weights.matmul(&vh)?);
        }
        let refs: Vec<&Tensor> = heads.iter().collect();
        self.w_o.forward(&Tensor::concat(&refs, 2)?)
    }
}

/// Attention sublayer and feed-forward sublayer, each followed by a
/// residual add and LayerNorm. Serves as the alignment block (cross
/// attention) and as an encoder layer (self attention).
#[derive(Debug, Clone)]
pub struct AttentionBlock {
    pub attn: MultiHeadAttention,
    pub norm_attn: LayerNorm,
    pub ffn: FeedForward,
    pub norm_ffn: LayerNorm,
}

impl AttentionBlock {
    pub fn new(b: &mut ParamBuilder<'_>, name: &str, d: usize, heads: usize, ffn_hidden: usize, eps: f64) -> Result<Self> {
        let mut s = b.scope(name);
        Ok(Self {
            attn: MultiHeadAttention::new(&mut s, "attn", d, heads)?,
            norm_attn: LayerNorm::new(&mut s, "norm_attn", d, eps),
            ffn: FeedForward::new(&mut s, "ffn", d, ffn_hidden),
            norm_ffn: LayerNorm::new(&mut s, "norm_ffn", d, eps),
        })
    }

    /// `Q' = LN(Q + MHA(Q, K, V))`, then `LN(Q' + FFN(Q'))`.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, site: &'static str) -> Result<Tensor> {
        let attended = self.attn.forward(query, kv, kv, false, site)?;
        let q = self.norm_attn.forward(&query.add(&attended)?)?;
        self.norm_ffn.forward(&q.add(&self.ffn.forward(&q)?)?)
    }
}

/// Token rows of the dictionary, projected into the model space and
/// repeated over the batch: `[batch, N, d]`.
pub fn embed_dictionary(token_ids: &[usize], table: &Tensor, proj: &Linear, batch: usize) -> Result<Tensor> {
    if token_ids.is_empty() {
        return Err(Error::config("dictionary has no tokens"));
    }
    let rows = Tensor::embedding(table, token_ids)?;
    proj.forward(&rows)?.expand_leading(batch)
}

/// Cross-attends patches (queries) against semantic features (keys and
/// values) through each block in turn; output has the patch shape.
pub fn align(patches: &Tensor, semantic: &Tensor, blocks: &[AttentionBlock]) -> Result<Tensor> {
    let mut q = patches.clone();
    for block in blocks {
        q = block.forward(&q, semantic, "alignment")?;
    }
    Ok(q)
}

/// Combines patch and semantic features. `projection` is required for
/// [`Fusion::ConcatProject`] and maps `2d → d`.
pub fn fuse(patches: &Tensor, semantic: &Tensor, mode: Fusion, projection: Option<&Linear>) -> Result<Tensor> {
    match mode {
        Fusion::Add => {
            if patches.shape() != semantic.shape() {
                return Err(Error::shape("fuse", patches.shape(), semantic.shape()));
            }
            patches.add(semantic)
        }
        Fusion::ConcatProject => {
            if patches.shape() != semantic.shape() {
                return Err(Error::shape("fuse", patches.shape(), semantic.shape()));
            }
            let proj = projection.ok_or_else(|| Error::config("concat-project fusion needs a projection"))?;
            proj.forward(&patches.concat_last_axis(semantic)?)
        }
    }
}
