//! Temporal-convolution VQ autoencoder over normalized motion features.

mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{MotionSequence, FEATURE_DIM};
pub use crate::tensor::Bound;
use crate::tensor::{Conv1dSpec, Graph, PadMode, ParamSet, Scalar, Tensor, Var};

pub use train::{
    clip_loss, evaluate_batch, evaluate_loss, train_tokenizer, vq_loss, ClipLoss, LossBreakdown,
    StepLog, TokenizerTrainConfig, TrainedTokenizer, VqLoss,
};

pub const GROUP: &str = "tokenizer";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerConfig {
    pub codebook_size: usize,
    pub code_dim: usize,
    /// Temporal downsampling factor; a power of two.
    pub downsample: usize,
    pub width: usize,
    /// Residual blocks per resolution stage.
    pub res_blocks: usize,
    /// Commitment weight.
    pub beta: f64,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        TokenizerConfig {
            codebook_size: 1024,
            code_dim: 64,
            downsample: 4,
            width: 64,
            res_blocks: 1,
            beta: 0.25,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook_size must be at least 2".into()));
        }
        if !self.downsample.is_power_of_two() {
            return Err(Error::Config(format!(
                "downsample {} is not a power of two",
                self.downsample
            )));
        }
        if self.code_dim == 0 || self.width == 0 {
            return Err(Error::Config("code_dim and width must be positive".into()));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.downsample.trailing_zeros() as usize
    }

    /// Number of latent vectors for `rows` feature rows.
    pub fn latent_len(&self, rows: usize) -> usize {
        rows.div_ceil(self.downsample)
    }
}

/// Indices and code vectors for one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenizedClip {
    pub indices: Vec<usize>,
    /// `[L, code_dim]`
    pub vectors: Tensor<f32>,
    pub source_rows: usize,
}

/// Nearest codebook row for every latent row by exhaustive scan with f64
/// accumulation. Ties go to the lowest index.
pub fn nearest_codes<T: Scalar>(latents: &Tensor<T>, codebook: &Tensor<T>) -> Result<Vec<usize>> {
    let (k, d) = (codebook.rows(), codebook.cols());
    if k == 0 || codebook.numel() == 0 {
        return Err(Error::invalid("empty codebook"));
    }
    if latents.cols() != d {
        return Err(Error::invalid(format!(
            "latent width {} does not match code dim {d}",
            latents.cols()
        )));
    }
    let cb: Vec<f64> = codebook.data().iter().map(|v| v.to_f64c()).collect();
    let mut out = Vec::with_capacity(latents.rows());
    for r in 0..latents.rows() {
        let z: Vec<f64> = latents.row(r).iter().map(|v| v.to_f64c()).collect();
        let mut best = (f64::INFINITY, 0);
        for c in 0..k {
            let row = &cb[c * d..(c + 1) * d];
            let dist: f64 = z.iter().zip(row).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, c);
            }
        }
        out.push(best.1);
    }
    Ok(out)
}

fn conv_weight(rng: &mut ChaCha8Rng, c_out: usize, c_in: usize, k: usize) -> Tensor<f32> {
    let bound = 1.0 / ((c_in * k) as f64).sqrt();
    Tensor::from_fn([c_out, c_in, k], |_| rng.random_range(-bound..bound) as f32)
}

const SAME3: Conv1dSpec = Conv1dSpec {
    stride: 1,
    padding: 1,
    pad_mode: PadMode::Replicate,
};
const POINT: Conv1dSpec = Conv1dSpec {
    stride: 1,
    padding: 0,
    pad_mode: PadMode::Replicate,
};
const DOWN: Conv1dSpec = Conv1dSpec {
    stride: 2,
    padding: 1,
    pad_mode: PadMode::Replicate,
};

#[derive(Clone, Debug, PartialEq)]
pub struct Tokenizer {
    pub config: TokenizerConfig,
    pub params: ParamSet<f32>,
}

fn n(name: &str) -> String {
    format!("{GROUP}.{name}")
}

impl Tokenizer {
    pub fn new(config: TokenizerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (w, d, k) = (config.width, config.code_dim, config.codebook_size);
        let mut p = ParamSet::new();
        let mut conv = |p: &mut ParamSet<f32>, name: &str, c_out, c_in, ks| {
            p.insert(
                n(&format!("{name}.w")),
                conv_weight(&mut rng, c_out, c_in, ks),
            );
            p.insert(n(&format!("{name}.b")), Tensor::zeros([c_out]));
        };
        conv(&mut p, "enc.in", w, FEATURE_DIM, 3);
        for s in 0..config.stages() {
            conv(&mut p, &format!("enc.down{s}"), w, w, 4);
            for r in 0..config.res_blocks {
                conv(&mut p, &format!("enc.res{s}_{r}.a"), w, w, 3);
                conv(&mut p, &format!("enc.res{s}_{r}.b"), w, w, 1);
            }
        }
        conv(&mut p, "enc.out", d, w, 3);
        conv(&mut p, "dec.in", w, d, 3);
        for s in 0..config.stages() {
            for r in 0..config.res_blocks {
                conv(&mut p, &format!("dec.res{s}_{r}.a"), w, w, 3);
                conv(&mut p, &format!("dec.res{s}_{r}.b"), w, w, 1);
            }
            // transposed convolution weights are [c_in, c_out, k]
            conv(&mut p, &format!("dec.up{s}"), w, w, 4);
        }
        conv(&mut p, "dec.out", FEATURE_DIM, w, 3);
        let bound = 1.0 / k as f64;
        p.insert(
            n("codebook"),
            Tensor::from_fn([k, d], |_| rng.random_range(-bound..bound) as f32),
        );
        Ok(Tokenizer { config, params: p })
    }

    pub fn from_params(config: TokenizerConfig, params: ParamSet<f32>) -> Result<Self> {
        config.validate()?;
        let fresh = Tokenizer::new(config.clone(), 0)?;
        for (name, t) in fresh.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return Err(Error::invalid(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        p.shape(),
                        t.shape()
                    )))
                }
                None => {
                    return Err(Error::invalid(format!(
                        "missing tokenizer parameter {name}"
                    )))
                }
            }
        }
        Ok(Tokenizer { config, params })
    }

    pub fn codebook(&self) -> &Tensor<f32> {
        self.params.get(&n("codebook")).expect("codebook")
    }

    /// Minimum feature rows accepted by [`Tokenizer::encode`].
    pub fn min_rows(&self) -> usize {
        self.config.downsample + 1
    }

    fn check_input(&self, seq: &MotionSequence) -> Result<()> {
        if !seq.is_normalized() {
            return Err(Error::invalid("tokenizer input must be normalized"));
        }
        if seq.rows() < self.min_rows() {
            return Err(Error::invalid(format!(
                "clip has {} feature rows, tokenizer needs at least {}",
                seq.rows(),
                self.min_rows()
            )));
        }
        Ok(())
    }

    /// Pre-quantization latents `[L, code_dim]`.
    pub fn encode(&self, seq: &MotionSequence) -> Result<Tensor<f32>> {
        self.check_input(seq)?;
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, |_| false);
        let x = pad_rows(&seq.features, self.config.downsample);
        let x = g.constant(x);
        let e = encode_graph(&mut g, &b, &self.config, x)?;
        Ok(g.value(e).clone())
    }

    pub fn quantize(&self, latents: &Tensor<f32>, source_rows: usize) -> Result<TokenizedClip> {
        let indices = nearest_codes(latents, self.codebook())?;
        Ok(TokenizedClip {
            vectors: self.lookup(&indices)?,
            indices,
            source_rows,
        })
    }

    pub fn tokenize(&self, seq: &MotionSequence) -> Result<TokenizedClip> {
        let latents = self.encode(seq)?;
        self.quantize(&latents, seq.rows())
    }

    pub fn lookup(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let cb = self.codebook();
        let (k, d) = (cb.rows(), cb.cols());
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= k {
                return Err(Error::invalid(format!(
                    "code index {i} out of range for {k} codes"
                )));
            }
            data.extend_from_slice(cb.row(i));
        }
        Ok(Tensor::new([indices.len(), d], data)?)
    }

    /// Decodes code vectors back to `rows` normalized feature rows.
    pub fn decode_vectors(&self, vectors: &Tensor<f32>, rows: usize) -> Result<Tensor<f32>> {
        if rows == 0 || self.config.latent_len(rows) != vectors.rows() {
            return Err(Error::invalid(format!(
                "{} code vectors cannot decode to {rows} rows",
                vectors.rows()
            )));
        }
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, |_| false);
        let z = g.constant(vectors.clone());
        let y = decode_graph(&mut g, &b, &self.config, z, rows)?;
        Ok(g.value(y).clone())
    }

    pub fn decode_indices(&self, indices: &[usize], rows: usize) -> Result<Tensor<f32>> {
        self.decode_vectors(&self.lookup(indices)?, rows)
    }

    /// Encode, quantize and decode; keeps the input's normalization tag.
    pub fn reconstruct(&self, seq: &MotionSequence) -> Result<MotionSequence> {
        let clip = self.tokenize(seq)?;
        let features = self.decode_vectors(&clip.vectors, seq.rows())?;
        let mut out = MotionSequence::new(features, seq.fps)?;
        out.stats_id = seq.stats_id.clone();
        Ok(out)
    }
}

/// Pads rows up to a multiple of `q` by repeating the last row.
pub fn pad_rows<T: Scalar>(x: &Tensor<T>, q: usize) -> Tensor<T> {
    let rows = x.rows();
    let target = rows.div_ceil(q) * q;
    if target == rows {
        return x.clone();
    }
    let mut data = x.data().to_vec();
    let last = x.row(rows - 1).to_vec();
    for _ in rows..target {
        data.extend_from_slice(&last);
    }
    Tensor::new([target, x.cols()], data).expect("padded shape")
}

fn conv<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<T>,
    name: &str,
    x: Var,
    spec: Conv1dSpec,
) -> Result<Var> {
    Ok(g.conv1d(
        x,
        b.var(&n(&format!("{name}.w"))),
        b.var(&n(&format!("{name}.b"))),
        spec,
    )?)
}

fn res_block<T: Scalar>(g: &mut Graph<T>, b: &Bound<T>, name: &str, x: Var) -> Result<Var> {
    let h = conv(g, b, &format!("{name}.a"), x, SAME3)?;
    let h = g.relu(h);
    let h = conv(g, b, &format!("{name}.b"), h, POINT)?;
    Ok(g.add(x, h)?)
}

/// Encoder on rows already padded to a multiple of the downsampling factor.
pub fn encode_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<T>,
    cfg: &TokenizerConfig,
    x: Var,
) -> Result<Var> {
    let h = conv(g, b, "enc.in", x, SAME3)?;
    let mut h = g.relu(h);
    for s in 0..cfg.stages() {
        let d = conv(g, b, &format!("enc.down{s}"), h, DOWN)?;
        h = g.relu(d);
        for r in 0..cfg.res_blocks {
            h = res_block(g, b, &format!("enc.res{s}_{r}"), h)?;
        }
    }
    conv(g, b, "enc.out", h, SAME3)
}

/// Decoder from `[L, d]` code vectors to `rows` feature rows.
pub fn decode_graph<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<T>,
    cfg: &TokenizerConfig,
    z: Var,
    rows: usize,
) -> Result<Var> {
    let h = conv(g, b, "dec.in", z, SAME3)?;
    let mut h = g.relu(h);
    for s in 0..cfg.stages() {
        for r in 0..cfg.res_blocks {
            h = res_block(g, b, &format!("dec.res{s}_{r}"), h)?;
        }
        let up = g.conv_transpose1d(
            h,
            b.var(&n(&format!("dec.up{s}.w"))),
            b.var(&n(&format!("dec.up{s}.b"))),
            2,
            1,
        )?;
        h = g.relu(up);
    }
    let y = conv(g, b, "dec.out", h, SAME3)?;
    if g.value(y).rows() == rows {
        Ok(y)
    } else {
        Ok(g.slice_rows(y, 0, rows)?)
    }
}
