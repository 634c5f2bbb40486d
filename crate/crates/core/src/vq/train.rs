use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    decode_graph, encode_graph, nearest_codes, pad_rows, Bound, Tokenizer, TokenizerConfig,
};
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::motion::MotionSequence;
use crate::tensor::{AdamW, AdamWConfig, Graph, Scalar, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenizerTrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Feature rows per training window.
    pub crop: usize,
    pub dead_code_reset: bool,
    pub reset_every: usize,
    pub usage_decay: f64,
    pub seed: u64,
}

impl Default for TokenizerTrainConfig {
    fn default() -> Self {
        TokenizerTrainConfig {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            crop: 48,
            dead_code_reset: true,
            reset_every: 200,
            usage_decay: 0.99,
            seed: 0,
        }
    }
}

/// The three loss terms and their weighted sum.
#[derive(Clone, Copy, Debug)]
pub struct VqLoss {
    pub total: Var,
    pub recon: Var,
    pub embedding: Var,
    pub commitment: Var,
}

/// L1 reconstruction plus `‖sg(e) − z‖²` plus `β‖e − sg(z)‖²`. Each term is
/// a per-row norm averaged over rows.
pub fn vq_loss<T: Scalar>(
    g: &mut Graph<T>,
    s: Var,
    s_hat: Var,
    e: Var,
    z: Var,
    beta: T,
) -> Result<VqLoss> {
    let recon = g.l1_distance(s_hat, s)?;
    let sg_e = g.stop_gradient(e);
    let embedding = g.sq_l2_distance(sg_e, z)?;
    let sg_z = g.stop_gradient(z);
    let commit = g.sq_l2_distance(e, sg_z)?;
    let commitment = g.scale(commit, beta);
    let partial = g.add(recon, embedding)?;
    let total = g.add(partial, commitment)?;
    Ok(VqLoss {
        total,
        recon,
        embedding,
        commitment,
    })
}

pub struct ClipLoss {
    pub loss: VqLoss,
    pub latents: Var,
    pub indices: Vec<usize>,
}

/// Full forward pass and loss for one clip of normalized rows.
pub fn clip_loss<T: Scalar>(
    g: &mut Graph<T>,
    b: &Bound<T>,
    cfg: &TokenizerConfig,
    x: &Tensor<T>,
) -> Result<ClipLoss> {
    let input = g.constant(pad_rows(x, cfg.downsample));
    let e = encode_graph(g, b, cfg, input)?;
    let cb = b.var("tokenizer.codebook");
    let indices = nearest_codes(g.value(e), g.value(cb))?;
    let z = g.gather_rows(cb, &indices)?;
    let st = g.straight_through(z, e)?;
    let s_hat = decode_graph(g, b, cfg, st, x.rows())?;
    let s = g.constant(x.clone());
    let loss = vq_loss(g, s, s_hat, e, z, T::lit(cfg.beta))?;
    Ok(ClipLoss {
        loss,
        latents: e,
        indices,
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub recon: f64,
    pub embedding: f64,
    pub commitment: f64,
}

impl LossBreakdown {
    fn read<T: Scalar>(g: &Graph<T>, l: &VqLoss) -> Self {
        let f = |v| g.value(v).item().to_f64c();
        LossBreakdown {
            total: f(l.total),
            recon: f(l.recon),
            embedding: f(l.embedding),
            commitment: f(l.commitment),
        }
    }

    fn add(&mut self, o: &LossBreakdown) {
        self.total += o.total;
        self.recon += o.recon;
        self.embedding += o.embedding;
        self.commitment += o.commitment;
    }

    fn scaled(mut self, c: f64) -> Self {
        self.total *= c;
        self.recon *= c;
        self.embedding *= c;
        self.commitment *= c;
        self
    }
}

/// Per-clip losses of a padded batch; rows outside each frame mask are ignored.
pub fn evaluate_batch(tok: &Tokenizer, batch: &Batch) -> Result<Vec<LossBreakdown>> {
    let shape = batch.motion.shape();
    let (frames, c) = (shape[1], shape[2]);
    let mut out = Vec::with_capacity(batch.ids.len());
    for (b, mask) in batch.frame_mask.iter().enumerate() {
        let rows = mask.iter().take_while(|&&m| m).count();
        let off = b * frames * c;
        let x = Tensor::new([rows, c], batch.motion.data()[off..off + rows * c].to_vec())?;
        let mut g = Graph::new();
        let bound = Bound::new(&mut g, &tok.params, |_| false);
        let cl = clip_loss(&mut g, &bound, &tok.config, &x)?;
        out.push(LossBreakdown::read(&g, &cl.loss));
    }
    Ok(out)
}

/// Mean loss over whole clips, without updating anything.
pub fn evaluate_loss(tok: &Tokenizer, clips: &[MotionSequence]) -> Result<LossBreakdown> {
    let mut acc = LossBreakdown::default();
    for c in clips {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &tok.params, |_| false);
        let cl = clip_loss(&mut g, &b, &tok.config, &c.features)?;
        acc.add(&LossBreakdown::read(&g, &cl.loss));
    }
    Ok(acc.scaled(1.0 / clips.len().max(1) as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub loss: LossBreakdown,
    pub active_codes: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedTokenizer {
    pub tokenizer: Tokenizer,
    /// Exponential moving average of each code's share of assignments.
    pub usage: Vec<f64>,
    pub log: Vec<StepLog>,
    pub resets: usize,
}

fn crop(x: &Tensor<f32>, start: usize, len: usize) -> Tensor<f32> {
    let c = x.cols();
    Tensor::new([len, c], x.data()[start * c..(start + len) * c].to_vec()).expect("crop")
}

/// AdamW on the three-term loss over random windows of the training clips.
pub fn train_tokenizer(
    mut tok: Tokenizer,
    train: &[MotionSequence],
    cfg: &TokenizerTrainConfig,
) -> Result<TrainedTokenizer> {
    let min_rows = tok.min_rows();
    let usable: Vec<&MotionSequence> = train.iter().filter(|s| s.rows() >= min_rows).collect();
    if usable.is_empty() {
        return Err(Error::invalid(
            "no training clips long enough for the tokenizer",
        ));
    }
    if usable.iter().any(|s| !s.is_normalized()) {
        return Err(Error::invalid("tokenizer training needs normalized clips"));
    }
    let k = tok.config.codebook_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(AdamWConfig {
        lr: cfg.lr,
        ..AdamWConfig::default()
    });
    let mut usage = vec![1.0 / k as f64; k];
    let mut log = Vec::with_capacity(cfg.steps);
    let mut resets = 0;
    let cb_slot = tok.params.index_of("tokenizer.codebook").expect("codebook");
    for step in 0..cfg.steps {
        let windows: Vec<Tensor<f32>> = (0..cfg.batch_size.max(1))
            .map(|_| {
                let s = usable[rng.random_range(0..usable.len())];
                let len = cfg.crop.clamp(min_rows, s.rows());
                let start = rng.random_range(0..=s.rows() - len);
                crop(&s.features, start, len)
            })
            .collect();
        let (grads, stats, assigned, latents) = {
            let mut g = Graph::new();
            let b = Bound::new(&mut g, &tok.params, |_| true);
            let mut sum: Option<Var> = None;
            let mut stats = LossBreakdown::default();
            let mut assigned = Vec::new();
            let mut latent_vars = Vec::new();
            for w in &windows {
                let cl = clip_loss(&mut g, &b, &tok.config, w)?;
                stats.add(&LossBreakdown::read(&g, &cl.loss));
                assigned.extend(cl.indices);
                latent_vars.push(cl.latents);
                sum = Some(match sum {
                    None => cl.loss.total,
                    Some(s) => g.add(s, cl.loss.total)?,
                });
            }
            let n = windows.len() as f32;
            let loss = g.scale(sum.expect("nonempty batch"), 1.0 / n);
            let stats = stats.scaled(1.0 / n as f64);
            if !stats.total.is_finite() {
                return Err(Error::Numeric(format!(
                    "tokenizer loss is {} at step {step}",
                    stats.total
                )));
            }
            g.backward(loss)?;
            let latents: Vec<Tensor<f32>> =
                latent_vars.iter().map(|&v| g.value(v).clone()).collect();
            (tok.params.grads(&g, b.vars()), stats, assigned, latents)
        };
        opt.step(&mut tok.params, &grads, |_| false);

        let mut counts = vec![0usize; k];
        for &i in &assigned {
            counts[i] += 1;
        }
        let total = assigned.len() as f64;
        for (u, &c) in usage.iter_mut().zip(&counts) {
            *u = cfg.usage_decay * *u + (1.0 - cfg.usage_decay) * c as f64 / total;
        }
        if cfg.dead_code_reset && cfg.reset_every > 0 && (step + 1) % cfg.reset_every == 0 {
            let threshold = 1.0 / (4.0 * k as f64);
            let pool: Vec<&[f32]> = latents
                .iter()
                .flat_map(|t| (0..t.rows()).map(move |r| t.row(r)))
                .collect();
            let d = tok.config.code_dim;
            let cb = tok.params.at_mut(cb_slot);
            for (code, u) in usage.iter_mut().enumerate() {
                if *u < threshold {
                    let src = pool[rng.random_range(0..pool.len())];
                    cb.data_mut()[code * d..(code + 1) * d].copy_from_slice(src);
                    *u = 1.0 / k as f64;
                    resets += 1;
                }
            }
        }
        log.push(StepLog {
            step,
            loss: stats,
            active_codes: counts.iter().filter(|&&c| c > 0).count(),
        });
        if step % 100 == 0 {
            log::debug!("tokenizer step {step}: loss {:.4}", stats.total);
        }
    }
    Ok(TrainedTokenizer {
        tokenizer: tok,
        usage,
        log,
        resets,
    })
}
