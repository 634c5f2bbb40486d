//! Small pre-norm decoder-only transformer with learned positions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{EOS, MAX_TOKENS};
use crate::error::{Error, Result};
use crate::tensor::{Bound, Graph, ParamSet, Scalar, Tensor, Var};

pub const GROUP: &str = "llm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmConfig {
    /// Filled from the text vocabulary when left at 0.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_len: usize,
    pub dropout: f64,
}

impl Default for LmConfig {
    fn default() -> Self {
        LmConfig {
            vocab_size: 0,
            d_model: 256,
            n_layers: 4,
            n_heads: 4,
            max_len: MAX_TOKENS,
            dropout: 0.0,
        }
    }
}

impl LmConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= crate::dataset::MOTION {
            return Err(Error::Config(format!(
                "vocab_size {} is below the special tokens",
                self.vocab_size
            )));
        }
        if self.n_heads == 0 || self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len != MAX_TOKENS {
            return Err(Error::Config(format!(
                "max_len must be {MAX_TOKENS}, got {}",
                self.max_len
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

fn n(name: &str) -> String {
    format!("{GROUP}.{name}")
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageModel {
    pub config: LmConfig,
    pub params: ParamSet<f32>,
}

/// `allow[i * t + j]` is set when position `i` may attend to `j`.
pub fn causal_mask(t: usize, key_mask: Option<&[bool]>) -> Vec<bool> {
    let mut allow = vec![false; t * t];
    for i in 0..t {
        for j in 0..=i {
            allow[i * t + j] = key_mask.is_none_or(|m| m[j]);
        }
    }
    allow
}

impl LanguageModel {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (v, d, l) = (config.vocab_size, config.d_model, config.n_layers);
        let normal = |std: f64| Normal::new(0.0, std).expect("positive std");
        let mut p = ParamSet::new();
        let mut randn = |p: &mut ParamSet<f32>, name: String, shape: [usize; 2], std: f64| {
            let dist = normal(std);
            p.insert(
                name,
                Tensor::from_fn(shape, |_| dist.sample(&mut rng) as f32),
            );
        };
        let resid_std = 0.02 / ((2 * l.max(1)) as f64).sqrt();
        randn(&mut p, n("tok_emb"), [v, d], 0.02);
        randn(&mut p, n("pos_emb"), [config.max_len, d], 0.01);
        for b in 0..l {
            let h = |s: &str| n(&format!("h{b}.{s}"));
            p.insert(h("ln1.g"), Tensor::full([d], 1.0));
            p.insert(h("ln1.b"), Tensor::zeros([d]));
            randn(&mut p, h("attn.qkv.w"), [d, 3 * d], 0.02);
            p.insert(h("attn.qkv.b"), Tensor::zeros([3 * d]));
            randn(&mut p, h("attn.proj.w"), [d, d], resid_std);
            p.insert(h("attn.proj.b"), Tensor::zeros([d]));
            p.insert(h("ln2.g"), Tensor::full([d], 1.0));
            p.insert(h("ln2.b"), Tensor::zeros([d]));
            randn(&mut p, h("mlp.fc.w"), [d, 4 * d], 0.02);
            p.insert(h("mlp.fc.b"), Tensor::zeros([4 * d]));
            randn(&mut p, h("mlp.proj.w"), [4 * d, d], resid_std);
            p.insert(h("mlp.proj.b"), Tensor::zeros([d]));
        }
        p.insert(n("ln_f.g"), Tensor::full([d], 1.0));
        p.insert(n("ln_f.b"), Tensor::zeros([d]));
        randn(&mut p, n("head.w"), [d, v], 0.02);
        p.insert(n("head.b"), Tensor::zeros([v]));
        Ok(LanguageModel { config, params: p })
    }

    pub fn from_params(config: LmConfig, params: ParamSet<f32>) -> Result<Self> {
        let fresh = LanguageModel::new(config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                _ => {
                    return Err(Error::invalid(format!(
                        "language model parameter {name} missing or misshapen"
                    )))
                }
            }
        }
        Ok(LanguageModel { config, params })
    }

    /// Rows of the token embedding table for `ids`.
    pub fn embed(&self, ids: &[usize]) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, |_| false);
        let e = embed_graph(&mut g, &b, ids)?;
        Ok(g.value(e).clone())
    }

    /// Logits `[T, V]` for an embedding sequence `[T, d_model]`.
    pub fn forward(
        &self,
        embeddings: &Tensor<f32>,
        key_mask: Option<&[bool]>,
    ) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, |_| false);
        let x = g.constant(embeddings.clone());
        let y = forward_graph(&mut g, &b, &self.config, x, key_mask, None)?;
        Ok(g.value(y).clone())
    }

    /// Greedy decoding after an embedded prefix. Stops at EOS or when the
    /// length budget runs out; EOS itself is not returned.
    pub fn generate(&self, prefix: &Tensor<f32>, max_new: usize) -> Result<Vec<usize>> {
        self.decode_with(prefix, max_new, argmax)
    }

    /// Temperature sampling; not used by evaluation.
    pub fn generate_sampled(
        &self,
        prefix: &Tensor<f32>,
        max_new: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Vec<usize>> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        self.decode_with(prefix, max_new, |row| {
            let top = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b)) as f64;
            let w: Vec<f64> = row
                .iter()
                .map(|&v| ((v as f64 - top) / temperature).exp())
                .collect();
            let mut u = rng.random::<f64>() * w.iter().sum::<f64>();
            for (i, &wi) in w.iter().enumerate() {
                if u < wi {
                    return i;
                }
                u -= wi;
            }
            w.len() - 1
        })
    }

    fn decode_with(
        &self,
        prefix: &Tensor<f32>,
        max_new: usize,
        mut pick: impl FnMut(&[f32]) -> usize,
    ) -> Result<Vec<usize>> {
        if prefix.rows() == 0 || prefix.rows() > self.config.max_len {
            return Err(Error::invalid(format!(
                "prefix of {} rows does not fit",
                prefix.rows()
            )));
        }
        let budget = max_new.min(self.config.max_len - prefix.rows());
        let d = self.config.d_model;
        let mut seq = prefix.data().to_vec();
        let mut out = Vec::new();
        for _ in 0..budget {
            let x = Tensor::new([seq.len() / d, d], seq.clone())?;
            let logits = self.forward(&x, None)?;
            let next = pick(logits.row(logits.rows() - 1));
            if next == EOS {
                break;
            }
            out.push(next);
            seq.extend_from_slice(self.embed(&[next])?.data());
        }
        Ok(out)
    }
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn embed_graph<T: Scalar>(g: &mut Graph<T>, b: &Bound<T>, ids: &[usize]) -> Result<Var> {
    Ok(g.embedding(b.var(&n("tok_emb")), ids)?)
}

fn dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    rate: f64,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    match rng {
        Some(rng) if rate > 0.0 => {
            let keep = T::lit(1.0 / (1.0 - rate));
            let shape = g.value(x).shape().to_vec();
            let mask = Tensor::from_fn(shape, |_| {
                if rng.random_bool(rate) {
                    T::zero()
                } else {
                    keep
                }
            });
            let m = g.constant(mask);
            Ok(g.mul(x, m)?)
        }
        _ => Ok(x),
    }
}

/// Transformer over `[T, d_model]` input embeddings; positions are added
/// here. Dropout applies only when `rng` is given.
pub fn forward_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<T>,
    cfg: &LmConfig,
    x: Var,
    key_mask: Option<&[bool]>,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let t = g.value(x).rows();
    if t == 0 || t > cfg.max_len {
        return Err(Error::invalid(format!(
            "sequence of {t} positions exceeds the {} limit",
            cfg.max_len
        )));
    }
    if key_mask.is_some_and(|m| m.len() != t) {
        return Err(Error::invalid(
            "key mask length differs from sequence length",
        ));
    }
    let (d, dh) = (cfg.d_model, cfg.head_dim());
    let pos = g.slice_rows(b.var(&n("pos_emb")), 0, t)?;
    let mut h = g.add(x, pos)?;
    let allow = causal_mask(t, key_mask);
    let scale = T::lit(1.0 / (dh as f64).sqrt());
    for l in 0..cfg.n_layers {
        let p = |s: &str| b.var(&n(&format!("h{l}.{s}")));
        let a = g.layer_norm(h, p("ln1.g"), p("ln1.b"))?;
        let qkv = g.linear(a, p("attn.qkv.w"), p("attn.qkv.b"))?;
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let q = g.slice_cols(qkv, hd * dh, dh)?;
            let k = g.slice_cols(qkv, d + hd * dh, dh)?;
            let v = g.slice_cols(qkv, 2 * d + hd * dh, dh)?;
            let kt = g.transpose(k)?;
            let s = g.matmul(q, kt)?;
            let s = g.scale(s, scale);
            let w = g.softmax(s, Some(&allow))?;
            heads.push(g.matmul(w, v)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            g.concat_cols(&heads)?
        };
        let o = g.linear(cat, p("attn.proj.w"), p("attn.proj.b"))?;
        let o = dropout(g, o, cfg.dropout, rng.as_deref_mut())?;
        h = g.add(h, o)?;
        let m = g.layer_norm(h, p("ln2.g"), p("ln2.b"))?;
        let m = g.linear(m, p("mlp.fc.w"), p("mlp.fc.b"))?;
        let m = g.gelu(m);
        let m = g.linear(m, p("mlp.proj.w"), p("mlp.proj.b"))?;
        let m = dropout(g, m, cfg.dropout, rng.as_deref_mut())?;
        h = g.add(h, m)?;
    }
    let f = g.layer_norm(h, b.var(&n("ln_f.g")), b.var(&n("ln_f.b")))?;
    Ok(g.linear(f, b.var(&n("head.w")), b.var(&n("head.b")))?)
}

/// Mean cross-entropy over positions where `mask` is set.
pub fn lm_loss<T: Scalar>(
    g: &mut Graph<T>,
    logits: Var,
    targets: &[usize],
    mask: &[bool],
) -> Result<Var> {
    Ok(g.cross_entropy(logits, targets, mask)?)
}
