//! Pre-norm transformer encoder with grouped-query attention, sentence pooling
//! and Matryoshka prefix truncation.

mod tokenizer;

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use tokenizer::{Tokenizer, BOS, PAD, SEP, UNK};

use crate::checkpoint::Checkpoint;
use crate::diffengine::kernels::norm;
use crate::diffengine::{AttentionLayout, Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::maskschedule::AttentionMask;

const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Pooling {
    #[default]
    Mean,
    LastToken,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    #[serde(default)]
    pub pooling: Pooling,
    pub mrl_dims: Vec<usize>,
}

impl Default for EncoderConfig {
    /// Two layers, hidden 64, 8 query heads over 2 KV heads (4:1), FFN 128.
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden_dim: 64,
            heads: 8,
            kv_heads: 2,
            ffn_dim: 128,
            vocab_size: 512,
            max_len: 64,
            pooling: Pooling::Mean,
            mrl_dims: vec![16, 32, 48, 64],
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::invalid(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.kv_heads == 0 {
            return bad("hidden_dim, heads and kv_heads must be positive".into());
        }
        if !self.heads.is_multiple_of(self.kv_heads) {
            return bad(format!(
                "heads {} not divisible by kv_heads {}",
                self.heads, self.kv_heads
            ));
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.ffn_dim == 0 || self.vocab_size == 0 || self.max_len == 0 {
            return bad("ffn_dim, vocab_size and max_len must be positive".into());
        }
        if self.mrl_dims.is_empty() {
            return bad("mrl_dims must not be empty".into());
        }
        if self.mrl_dims.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("mrl_dims {:?} must be strictly ascending", self.mrl_dims));
        }
        if self.mrl_dims[0] == 0 || *self.mrl_dims.last().unwrap() > self.hidden_dim {
            return bad(format!(
                "mrl_dims {:?} must lie in 1..={}",
                self.mrl_dims, self.hidden_dim
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }
}

/// Trainable weights, kept in a fixed name order.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    cfg: EncoderConfig,
    params: Vec<(String, Tensor)>,
}

/// Per-layer parameter offsets within [`Encoder::params`].
const PER_LAYER: usize = 8;
const ATTN_NORM: usize = 0;
const WQ: usize = 1;
const WK: usize = 2;
const WV: usize = 3;
const WO: usize = 4;
const FFN_NORM: usize = 5;
const W_UP: usize = 6;
const W_DOWN: usize = 7;

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape matches")
}

impl Encoder {
    pub fn new(cfg: EncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = cfg.hidden_dim;
        let kvw = cfg.kv_heads * cfg.head_dim();
        let mut params = vec![("embed".to_string(), uniform(&mut rng, &[cfg.vocab_size, h], 1.0))];
        let bh = 1.0 / (h as f64).sqrt();
        let bf = 1.0 / (cfg.ffn_dim as f64).sqrt();
        for layer in 0..cfg.layers {
            let p = |n: &str| format!("layer{layer}.{n}");
            params.push((p("attn_norm"), Tensor::ones(&[h])));
            params.push((p("wq"), uniform(&mut rng, &[h, h], bh)));
            params.push((p("wk"), uniform(&mut rng, &[h, kvw], bh)));
            params.push((p("wv"), uniform(&mut rng, &[h, kvw], bh)));
            params.push((p("wo"), uniform(&mut rng, &[h, h], bh)));
            params.push((p("ffn_norm"), Tensor::ones(&[h])));
            params.push((p("w_up"), uniform(&mut rng, &[h, cfg.ffn_dim], bh)));
            params.push((p("w_down"), uniform(&mut rng, &[cfg.ffn_dim, h], bf)));
        }
        Ok(Encoder { cfg, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.params.iter_mut().map(|(_, t)| t)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    fn param_index(layer: usize, slot: usize) -> usize {
        1 + layer * PER_LAYER + slot
    }

    /// Register every weight on `g`: as leaves when `trainable`, else constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds max_len {}",
                tokens.len(),
                self.cfg.max_len
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.cfg.vocab_size) {
            return Err(Error::invalid(format!(
                "unknown token id {t} (vocab_size {})",
                self.cfg.vocab_size
            )));
        }
        Ok(())
    }

    /// Pack several sequences (each with its own mask) into one batch.
    pub fn pack(&self, seqs: &[&[u32]], masks: &[Rc<Vec<f64>>]) -> Result<PackedBatch> {
        if seqs.is_empty() || seqs.len() != masks.len() {
            return Err(Error::invalid(format!(
                "{} sequences with {} masks",
                seqs.len(),
                masks.len()
            )));
        }
        let mut tokens = Vec::new();
        let mut segments = Vec::with_capacity(seqs.len());
        for (s, m) in seqs.iter().zip(masks) {
            self.check_tokens(s)?;
            if m.len() != s.len() * s.len() {
                return Err(Error::invalid(format!(
                    "mask of {} entries for a {}-token sequence",
                    m.len(),
                    s.len()
                )));
            }
            segments.push((tokens.len(), s.len()));
            tokens.extend_from_slice(s);
        }
        Ok(PackedBatch {
            tokens,
            segments,
            masks: masks.to_vec(),
        })
    }

    /// Token states `[total_tokens, hidden]` for a packed batch.
    pub fn forward(&self, g: &mut Graph, vars: &[Var], batch: &PackedBatch) -> Result<Var> {
        let cfg = &self.cfg;
        let idx: Vec<usize> = batch.tokens.iter().map(|&t| t as usize).collect();
        let emb = g.index_rows(vars[0], &idx)?;
        let pe = positional_rows(cfg.hidden_dim, &batch.segments);
        let pe = g.constant(pe);
        let mut x = g.add(emb, pe)?;
        let layout = Rc::new(AttentionLayout {
            heads: cfg.heads,
            kv_heads: cfg.kv_heads,
            head_dim: cfg.head_dim(),
            segments: batch.segments.clone(),
            masks: batch.masks.clone(),
        });
        for layer in 0..cfg.layers {
            let p = |slot| vars[Self::param_index(layer, slot)];
            let hn = g.rms_norm(x, p(ATTN_NORM), RMS_EPS)?;
            let q = g.matmul(hn, p(WQ))?;
            let k = g.matmul(hn, p(WK))?;
            let v = g.matmul(hn, p(WV))?;
            let a = g.attention(q, k, v, layout.clone())?;
            let o = g.matmul(a, p(WO))?;
            x = g.add(x, o)?;
            let fnorm = g.rms_norm(x, p(FFN_NORM), RMS_EPS)?;
            let up = g.matmul(fnorm, p(W_UP))?;
            let act = g.silu(up);
            let down = g.matmul(act, p(W_DOWN))?;
            x = g.add(x, down)?;
        }
        Ok(x)
    }

    /// Pooled, not yet normalized sentence vectors `[sequences, hidden]`.
    pub fn pool_raw(&self, g: &mut Graph, states: Var, batch: &PackedBatch) -> Result<Var> {
        match self.cfg.pooling {
            Pooling::Mean => g.segment_mean(states, &batch.segments),
            Pooling::LastToken => {
                let last: Vec<usize> = batch.segments.iter().map(|&(s, n)| s + n - 1).collect();
                g.index_rows(states, &last)
            }
        }
    }

    /// Unit-norm embeddings truncated to the first `dim` coordinates.
    pub fn embed_dim(&self, g: &mut Graph, raw: Var, dim: usize) -> Result<Var> {
        let h = self.cfg.hidden_dim;
        let v = if dim == h {
            raw
        } else {
            g.slice_cols(raw, 0, dim)?
        };
        g.l2_normalize(v)
    }

    /// Next-token logits through the tied embedding table.
    pub fn lm_logits(&self, g: &mut Graph, vars: &[Var], states: Var) -> Result<Var> {
        g.matmul_nt(states, vars[0])
    }

    /// Token states for a single sequence, outside of training.
    pub fn encode(&self, tokens: &[u32], mask: &AttentionMask) -> Result<Tensor> {
        self.check_tokens(tokens)?;
        if mask.n() != tokens.len() {
            return Err(Error::invalid(format!(
                "mask dimension {} differs from token count {}",
                mask.n(),
                tokens.len()
            )));
        }
        let batch = self.pack(&[tokens], &[Rc::new(mask.entries().to_vec())])?;
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let states = self.forward(&mut g, &vars, &batch)?;
        Ok(g.value(states).clone())
    }

    /// Full-width sentence embeddings for many sequences, each under `mask_for(len)`.
    pub fn embed_texts(
        &self,
        seqs: &[Vec<u32>],
        mask_for: &dyn Fn(usize) -> Rc<Vec<f64>>,
    ) -> Result<Vec<SentenceEmbedding>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            let refs: Vec<&[u32]> = chunk.iter().map(|s| s.as_slice()).collect();
            let masks: Vec<_> = chunk.iter().map(|s| mask_for(s.len())).collect();
            let batch = self.pack(&refs, &masks)?;
            let mut g = Graph::new();
            let vars = self.bind(&mut g, false);
            let states = self.forward(&mut g, &vars, &batch)?;
            let raw = self.pool_raw(&mut g, states, &batch)?;
            let t = g.value(raw);
            for r in 0..chunk.len() {
                out.push(SentenceEmbedding::from_raw(t.row(r).to_vec(), None)?);
            }
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, extra: serde_json::Value) -> Checkpoint {
        let mut header = serde_json::json!({ "encoder": self.cfg });
        if let (Some(h), serde_json::Value::Object(e)) = (header.as_object_mut(), extra) {
            h.extend(e);
        }
        let mut c = Checkpoint::new(header);
        for (n, t) in &self.params {
            c.push(n.clone(), t.clone());
        }
        c
    }

    /// Restore weights; when `expected` is given, the stored config must equal it.
    pub fn from_checkpoint(c: &Checkpoint, expected: Option<&EncoderConfig>) -> Result<Self> {
        let stored: EncoderConfig = serde_json::from_value(
            c.header
                .get("encoder")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("header lacks an encoder config".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("encoder config: {e}")))?;
        if let Some(exp) = expected {
            if exp != &stored {
                return Err(Error::ConfigMismatch {
                    stored: serde_json::to_string(&stored).unwrap_or_default(),
                    expected: serde_json::to_string(exp).unwrap_or_default(),
                });
            }
        }
        let template = Encoder::new(stored.clone(), 0)?;
        let mut params = Vec::with_capacity(template.params.len());
        for (name, t) in &template.params {
            let got = c
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing array {name}")))?;
            if got.shape() != t.shape() {
                return Err(Error::ShapeMismatch {
                    op: "checkpoint",
                    left: got.shape().to_vec(),
                    right: t.shape().to_vec(),
                });
            }
            params.push((name.clone(), got.clone()));
        }
        Ok(Encoder {
            cfg: stored,
            params,
        })
    }
}

/// Token ids of several sequences laid end to end.
#[derive(Debug, Clone)]
pub struct PackedBatch {
    pub tokens: Vec<u32>,
    pub segments: Vec<(usize, usize)>,
    pub masks: Vec<Rc<Vec<f64>>>,
}

impl PackedBatch {
    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Fixed sinusoidal position code for position `pos`.
pub fn positional_encoding(hidden: usize, pos: usize) -> Vec<f64> {
    (0..hidden)
        .map(|c| {
            let k = (c / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * k / hidden as f64);
            if c % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

fn positional_rows(hidden: usize, segments: &[(usize, usize)]) -> Tensor {
    let total: usize = segments.iter().map(|s| s.1).sum();
    let mut data = Vec::with_capacity(total * hidden);
    for &(_, n) in segments {
        for pos in 0..n {
            data.extend(positional_encoding(hidden, pos));
        }
    }
    Tensor::new(&[total, hidden], data).expect("consistent")
}

/// A pooled sentence vector. `vector` is the unit-norm prefix of length
/// `dim_used`; `raw` keeps the full pre-normalization pooled vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceEmbedding {
    pub vector: Vec<f64>,
    pub raw: Vec<f64>,
    pub dim_used: usize,
    pub language_tag: Option<String>,
}

impl SentenceEmbedding {
    pub fn from_raw(raw: Vec<f64>, language_tag: Option<String>) -> Result<Self> {
        let dim = raw.len();
        let vector = normalized(&raw[..dim])?;
        Ok(SentenceEmbedding {
            vector,
            raw,
            dim_used: dim,
            language_tag,
        })
    }

    pub fn with_language(mut self, tag: impl Into<String>) -> Self {
        self.language_tag = Some(tag.into());
        self
    }
}

fn normalized(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n == 0.0 || !n.is_finite() {
        return Err(Error::domain("normalize", format!("vector norm is {n}")));
    }
    Ok(v.iter().map(|x| x / n).collect())
}

/// Pool a `[len, hidden]` state matrix into a unit-norm sentence embedding.
pub fn pool(states: &Tensor, mode: Pooling) -> Result<SentenceEmbedding> {
    let (rows, cols) = states.rows_cols();
    if rows == 0 {
        return Err(Error::invalid("pooling needs at least one token state"));
    }
    let raw = match mode {
        Pooling::Mean => {
            let mut acc = vec![0.0; cols];
            for r in 0..rows {
                for (a, v) in acc.iter_mut().zip(states.row(r)) {
                    *a += v;
                }
            }
            acc.iter().map(|a| a / rows as f64).collect()
        }
        Pooling::LastToken => states.row(rows - 1).to_vec(),
    };
    SentenceEmbedding::from_raw(raw, None)
}

/// Keep the first `d` pre-normalization coordinates and renormalize.
pub fn mrl_truncate(e: &SentenceEmbedding, d: usize, cfg: &EncoderConfig) -> Result<SentenceEmbedding> {
    let allowed = d == cfg.hidden_dim || cfg.mrl_dims.contains(&d);
    if !allowed || d > e.raw.len() {
        return Err(Error::invalid(format!(
            "dimension {d} is not among configured mrl_dims {:?}",
            cfg.mrl_dims
        )));
    }
    Ok(SentenceEmbedding {
        vector: normalized(&e.raw[..d])?,
        raw: e.raw.clone(),
        dim_used: d,
        language_tag: e.language_tag.clone(),
    })
}

impl Tokenizer {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!(self.words())
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self> {
        let mut t: Tokenizer = serde_json::from_value(serde_json::json!({ "words": v }))
            .map_err(|e| Error::Checkpoint(format!("tokenizer: {e}")))?;
        t.rebuild_index();
        Ok(t)
    }
}

#[cfg(test)]
mod tests;
