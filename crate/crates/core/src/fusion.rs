//! Projection of quantized gesture vectors into the backbone embedding
//! space and their splicing into a text prompt.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{TextVocab, BOS, EOS, MAX_TOKENS, MOTION};
use crate::error::{Error, Result};
use crate::lm::{embed_graph, forward_graph, lm_loss, LmConfig};
use crate::templates::{TemplateBank, TemplateRef};
use crate::tensor::{Bound, Graph, ParamSet, Scalar, Tensor, Var};

pub const GROUP: &str = "mlp";

/// Two linear layers with GELU between, `code_dim → d_model → d_model`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentMlp {
    pub code_dim: usize,
    pub d_model: usize,
    pub params: ParamSet<f32>,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f32> {
    let bound = 1.0 / (rows as f64).sqrt();
    Tensor::from_fn([rows, cols], |_| rng.random_range(-bound..bound) as f32)
}

impl AlignmentMlp {
    pub fn new(code_dim: usize, d_model: usize, seed: u64) -> Result<Self> {
        if code_dim == 0 || d_model == 0 {
            return Err(Error::Config("alignment widths must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        params.insert("mlp.fc1.w", uniform(&mut rng, code_dim, d_model));
        params.insert("mlp.fc1.b", Tensor::zeros([d_model]));
        params.insert("mlp.fc2.w", uniform(&mut rng, d_model, d_model));
        params.insert("mlp.fc2.b", Tensor::zeros([d_model]));
        Ok(AlignmentMlp {
            code_dim,
            d_model,
            params,
        })
    }

    pub fn from_params(code_dim: usize, d_model: usize, params: ParamSet<f32>) -> Result<Self> {
        let fresh = AlignmentMlp::new(code_dim, d_model, 0)?;
        for (name, t) in fresh.params.iter() {
            if params.get(name).map(Tensor::shape) != Some(t.shape()) {
                return Err(Error::invalid(format!(
                    "alignment parameter {name} missing or misshapen"
                )));
            }
        }
        Ok(AlignmentMlp {
            code_dim,
            d_model,
            params,
        })
    }

    /// `[L, code_dim] → [L, d_model]`.
    pub fn project(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &self.params, |_| false);
        let z = g.constant(z.clone());
        let y = project_graph(&mut g, &b, z)?;
        Ok(g.value(y).clone())
    }
}

pub fn project_graph<T: Scalar>(g: &mut Graph<T>, b: &Bound<T>, z: Var) -> Result<Var> {
    let w1 = b.var("mlp.fc1.w");
    let width = g.value(w1).rows();
    if g.value(z).cols() != width {
        return Err(Error::invalid(format!(
            "code vectors have width {}, projection expects {width}",
            g.value(z).cols()
        )));
    }
    let h = g.linear(z, w1, b.var("mlp.fc1.b"))?;
    let h = g.gelu(h);
    Ok(g.linear(h, b.var("mlp.fc2.w"), b.var("mlp.fc2.b"))?)
}

/// Fused embedding rows and which of them came from the gesture.
pub struct Fused {
    pub x: Var,
    pub gesture_mask: Vec<bool>,
}

/// Replaces the single MOTION id in `ids` by the rows of `e_sign`; every
/// other row is the plain token embedding.
pub fn fuse<T: Scalar>(
    g: &mut Graph<T>,
    lm: &Bound<T>,
    ids: &[usize],
    e_sign: Var,
) -> Result<Fused> {
    let found = ids.iter().filter(|&&i| i == MOTION).count();
    if found != 1 {
        return Err(Error::Placeholder { found });
    }
    let l = g.value(e_sign).rows();
    if l == 0 {
        return Err(Error::invalid("empty gesture"));
    }
    let at = ids
        .iter()
        .position(|&i| i == MOTION)
        .expect("counted above");
    let mut parts = Vec::with_capacity(3);
    if at > 0 {
        parts.push(embed_graph(g, lm, &ids[..at])?);
    }
    parts.push(e_sign);
    if at + 1 < ids.len() {
        parts.push(embed_graph(g, lm, &ids[at + 1..])?);
    }
    let x = if parts.len() == 1 {
        parts[0]
    } else {
        g.concat_rows(&parts)?
    };
    let mut gesture_mask = vec![false; ids.len() - 1 + l];
    gesture_mask[at..at + l].fill(true);
    Ok(Fused { x, gesture_mask })
}

/// One supervised sequence. `input_ids` holds BOS, the prompt (with the
/// MOTION id) and the caption; `targets[t]` is the next token after
/// position `t` of the fused sequence and `loss_mask` selects the caption
/// and EOS predictions.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input_ids: Vec<usize>,
    pub codes: Tensor<f32>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
    pub template: TemplateRef,
}

impl Example {
    pub fn fused_len(&self) -> usize {
        self.input_ids.len() - 1 + self.codes.rows()
    }
}

/// BOS followed by the rendered prompt ids.
pub fn prompt_ids(vocab: &TextVocab, prompt: &str) -> Vec<usize> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(prompt));
    ids
}

/// Builds the supervised example for a caption and its code vectors.
/// Returns `None` when the sequence would exceed the length budget.
pub fn build_example(
    vocab: &TextVocab,
    bank: &TemplateBank,
    which: TemplateRef,
    caption: &str,
    codes: &Tensor<f32>,
) -> Result<Option<Example>> {
    if codes.rows() == 0 {
        return Err(Error::invalid("empty gesture"));
    }
    let (prompt, target) = bank.render(which, caption)?;
    let mut input_ids = prompt_ids(vocab, &prompt);
    let caption_ids = vocab.encode(&target);
    let prompt_rows = input_ids.len() - 1 + codes.rows();
    // +1 for the EOS prediction made from the last caption row
    if prompt_rows + caption_ids.len() + 1 > MAX_TOKENS {
        return Ok(None);
    }
    input_ids.extend(&caption_ids);
    let t = prompt_rows + caption_ids.len();
    let mut targets = vec![0; t];
    let mut loss_mask = vec![false; t];
    for (j, &tok) in caption_ids.iter().chain(std::iter::once(&EOS)).enumerate() {
        targets[prompt_rows - 1 + j] = tok;
        loss_mask[prompt_rows - 1 + j] = true;
    }
    Ok(Some(Example {
        input_ids,
        codes: codes.clone(),
        targets,
        loss_mask,
        template: which,
    }))
}

/// Logits for an example under bound alignment and backbone parameters.
pub fn example_logits<T: Scalar>(
    g: &mut Graph<T>,
    mlp: &Bound<T>,
    lm: &Bound<T>,
    cfg: &LmConfig,
    ex: &Example,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let z = g.constant(ex.codes.cast());
    let e_sign = project_graph(g, mlp, z)?;
    let fused = fuse(g, lm, &ex.input_ids, e_sign)?;
    forward_graph(g, lm, cfg, fused.x, None, rng)
}

pub fn example_loss<T: Scalar>(
    g: &mut Graph<T>,
    mlp: &Bound<T>,
    lm: &Bound<T>,
    cfg: &LmConfig,
    ex: &Example,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<Var> {
    let logits = example_logits(g, mlp, lm, cfg, ex, rng)?;
    lm_loss(g, logits, &ex.targets, &ex.loss_mask)
}
