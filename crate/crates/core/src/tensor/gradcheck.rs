//! Central finite-difference checks for every differentiable graph op.
//!
//! Each check builds `loss = sum(op(inputs) * R)` for a random constant `R`,
//! so the upstream gradient is generic, and compares the analytic gradient
//! against `(f(x + h) - f(x - h)) / 2h` in 64-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Conv1dSpec, Graph, OpKind, PadMode, Tensor, TensorResult, Var};

pub const FD_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub step: f64,
    pub checks: Vec<OpCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

type Build = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> TensorResult<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    build: Build,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink at the origin.
fn rand_away(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn dim(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> usize {
    rng.random_range(lo..=hi)
}

fn loss_of(
    case: &Case,
    inputs: &[Tensor<f64>],
    weights: &Tensor<f64>,
    fault: Option<OpKind>,
    want_grad: bool,
) -> TensorResult<(f64, Vec<f64>)> {
    let mut g = Graph::<f64>::new();
    if let Some(f) = fault {
        g.inject_fault(f);
    }
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), want_grad))
        .collect();
    let out = (case.build)(&mut g, &vars)?;
    let w = g.constant(weights.clone());
    let out = if g.value(out).shape() == weights.shape() {
        out
    } else {
        g.reshape(out, weights.shape())?
    };
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod);
    let value = g.value(loss).item();
    let mut grads = Vec::new();
    if want_grad {
        g.backward(loss)?;
        for &v in &vars {
            grads.extend_from_slice(g.grad(v).expect("leaf grad").data());
        }
    }
    Ok((value, grads))
}

fn output_shape(case: &Case) -> TensorResult<Vec<usize>> {
    let mut g = Graph::<f64>::new();
    let vars: Vec<Var> = case.inputs.iter().map(|t| g.constant(t.clone())).collect();
    let out = (case.build)(&mut g, &vars)?;
    Ok(g.value(out).shape().to_vec())
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-6)` over the full gradient vector.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    diff / na.max(nn).max(1e-6)
}

fn check_case(case: &Case, rng: &mut ChaCha8Rng, fault: Option<OpKind>) -> TensorResult<f64> {
    let shape = output_shape(case)?;
    let weights = rand_tensor(rng, &shape);
    let (_, analytic) = loss_of(case, &case.inputs, &weights, fault, true)?;
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut inputs = case.inputs.clone();
    for i in 0..inputs.len() {
        for j in 0..inputs[i].numel() {
            let orig = inputs[i].data()[j];
            inputs[i].data_mut()[j] = orig + FD_STEP;
            let (fp, _) = loss_of(case, &inputs, &weights, None, false)?;
            inputs[i].data_mut()[j] = orig - FD_STEP;
            let (fm, _) = loss_of(case, &inputs, &weights, None, false)?;
            inputs[i].data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * FD_STEP));
        }
    }
    Ok(relative_error(&analytic, &numeric))
}

fn make_case(kind: &str, rng: &mut ChaCha8Rng) -> Case {
    match kind {
        "matmul" => {
            let (m, k, n) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![rand_tensor(rng, &[m, k]), rand_tensor(rng, &[k, n])],
                build: Box::new(|g, v| g.matmul(v[0], v[1])),
            }
        }
        "transpose" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(|g, v| g.transpose(v[0])),
            }
        }
        "add_bias" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[n])],
                build: Box::new(|g, v| g.add_bias(v[0], v[1])),
            }
        }
        "linear" => {
            let (m, i, o) = (dim(rng, 1, 5), dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![
                    rand_tensor(rng, &[m, i]),
                    rand_tensor(rng, &[i, o]),
                    rand_tensor(rng, &[o]),
                ],
                build: Box::new(|g, v| g.linear(v[0], v[1], v[2])),
            }
        }
        "add" | "sub" | "mul" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let k = kind.to_string();
            Case {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| match k.as_str() {
                    "add" => g.add(v[0], v[1]),
                    "sub" => g.sub(v[0], v[1]),
                    _ => g.mul(v[0], v[1]),
                }),
            }
        }
        "scale" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let c = rng.random_range(-2.0..2.0);
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| Ok(g.scale(v[0], c))),
            }
        }
        "relu" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![rand_away(rng, &[m, n])],
                build: Box::new(|g, v| Ok(g.relu(v[0]))),
            }
        }
        "gelu" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(|g, v| Ok(g.gelu(v[0]))),
            }
        }
        "softmax" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 6));
            let mask: Option<Vec<bool>> = if rng.random_bool(0.5) {
                Some(
                    (0..m * n)
                        .map(|i| i % n <= i / n || rng.random_bool(0.5))
                        .collect(),
                )
            } else {
                None
            };
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.softmax(v[0], mask.as_deref())),
            }
        }
        "layer_norm" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 6));
            Case {
                inputs: vec![
                    rand_tensor(rng, &[m, n]),
                    rand_tensor(rng, &[n]),
                    rand_tensor(rng, &[n]),
                ],
                build: Box::new(|g, v| g.layer_norm(v[0], v[1], v[2])),
            }
        }
        "embedding" => {
            let (vocab, d, len) = (dim(rng, 2, 6), dim(rng, 1, 4), dim(rng, 1, 6));
            let ids: Vec<usize> = (0..len).map(|_| rng.random_range(0..vocab)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[vocab, d])],
                build: Box::new(move |g, v| g.embedding(v[0], &ids)),
            }
        }
        "conv1d" => {
            let (c_in, c_out, k) = (dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 4));
            let stride = dim(rng, 1, 2);
            let padding = rng.random_range(0..=k / 2);
            let t = dim(rng, k.max(2), 8);
            let pad_mode = if rng.random_bool(0.5) {
                PadMode::Zeros
            } else {
                PadMode::Replicate
            };
            let spec = Conv1dSpec {
                stride,
                padding,
                pad_mode,
            };
            Case {
                inputs: vec![
                    rand_tensor(rng, &[t, c_in]),
                    rand_tensor(rng, &[c_out, c_in, k]),
                    rand_tensor(rng, &[c_out]),
                ],
                build: Box::new(move |g, v| g.conv1d(v[0], v[1], v[2], spec)),
            }
        }
        "conv_transpose1d" => {
            let (c_in, c_out) = (dim(rng, 1, 3), dim(rng, 1, 3));
            let stride = dim(rng, 1, 2);
            let k = dim(rng, stride.max(2), 4);
            let padding = rng.random_range(0..=(k - 1) / 2);
            let t = dim(rng, 2, 6);
            Case {
                inputs: vec![
                    rand_tensor(rng, &[t, c_in]),
                    rand_tensor(rng, &[c_in, c_out, k]),
                    rand_tensor(rng, &[c_out]),
                ],
                build: Box::new(move |g, v| g.conv_transpose1d(v[0], v[1], v[2], stride, padding)),
            }
        }
        "mean" | "sum" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let is_mean = kind == "mean";
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| Ok(if is_mean { g.mean(v[0]) } else { g.sum(v[0]) })),
            }
        }
        "l1_distance" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            let a = rand_tensor(rng, &[m, n]);
            let gap = rand_away(rng, &[m, n]);
            let b = Tensor::new(
                vec![m, n],
                a.data()
                    .iter()
                    .zip(gap.data())
                    .map(|(x, d)| x + d)
                    .collect(),
            )
            .expect("shape");
            Case {
                inputs: vec![a, b],
                build: Box::new(|g, v| g.l1_distance(v[0], v[1])),
            }
        }
        "sq_l2_distance" => {
            let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
            Case {
                inputs: vec![rand_tensor(rng, &[m, n]), rand_tensor(rng, &[m, n])],
                build: Box::new(|g, v| g.sq_l2_distance(v[0], v[1])),
            }
        }
        "cross_entropy" => {
            let (t, vocab) = (dim(rng, 1, 5), dim(rng, 2, 7));
            let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
            let mut mask: Vec<bool> = (0..t).map(|_| rng.random_bool(0.7)).collect();
            mask[0] = true;
            Case {
                inputs: vec![rand_tensor(rng, &[t, vocab])],
                build: Box::new(move |g, v| g.cross_entropy(v[0], &targets, &mask)),
            }
        }
        "gather_rows" => {
            let (m, n, len) = (dim(rng, 1, 5), dim(rng, 1, 4), dim(rng, 1, 7));
            let idx: Vec<usize> = (0..len).map(|_| rng.random_range(0..m)).collect();
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.gather_rows(v[0], &idx)),
            }
        }
        "concat_rows" => {
            let (a, b, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Case {
                inputs: vec![rand_tensor(rng, &[a, n]), rand_tensor(rng, &[b, n])],
                build: Box::new(|g, v| g.concat_rows(&[v[0], v[1]])),
            }
        }
        "slice_cols" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 2, 6));
            let start = rng.random_range(0..n);
            let len = rng.random_range(1..=n - start);
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.slice_cols(v[0], start, len)),
            }
        }
        "concat_cols" => {
            let (m, a, b) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
            Case {
                inputs: vec![rand_tensor(rng, &[m, a]), rand_tensor(rng, &[m, b])],
                build: Box::new(|g, v| g.concat_cols(&[v[0], v[1]])),
            }
        }
        "reshape" => {
            let (m, n) = (dim(rng, 1, 4), dim(rng, 1, 4));
            Case {
                inputs: vec![rand_tensor(rng, &[m, n])],
                build: Box::new(move |g, v| g.reshape(v[0], &[n, m])),
            }
        }
        "attention" => {
            // causal single-head attention block: the composite the backbone uses
            let (t, d) = (dim(rng, 1, 5), dim(rng, 1, 4));
            let allow: Vec<bool> = (0..t * t).map(|i| i % t <= i / t).collect();
            Case {
                inputs: vec![
                    rand_tensor(rng, &[t, d]),
                    rand_tensor(rng, &[d, d]),
                    rand_tensor(rng, &[d, d]),
                ],
                build: Box::new(move |g, v| {
                    let q = g.matmul(v[0], v[1])?;
                    let k = g.matmul(v[0], v[2])?;
                    let kt = g.transpose(k)?;
                    let s = g.matmul(q, kt)?;
                    let s = g.scale(s, 0.5);
                    let p = g.softmax(s, Some(&allow))?;
                    g.matmul(p, v[0])
                }),
            }
        }
        "mlp_cross_entropy" => {
            let (t, d, vocab) = (dim(rng, 1, 4), dim(rng, 2, 4), dim(rng, 2, 5));
            let targets: Vec<usize> = (0..t).map(|_| rng.random_range(0..vocab)).collect();
            let mask = vec![true; t];
            Case {
                inputs: vec![
                    rand_tensor(rng, &[t, d]),
                    rand_tensor(rng, &[d]),
                    rand_tensor(rng, &[d]),
                    rand_tensor(rng, &[d, vocab]),
                    rand_tensor(rng, &[vocab]),
                ],
                build: Box::new(move |g, v| {
                    let h = g.layer_norm(v[0], v[1], v[2])?;
                    let h = g.gelu(h);
                    let logits = g.linear(h, v[3], v[4])?;
                    g.cross_entropy(logits, &targets, &mask)
                }),
            }
        }
        other => panic!("unknown gradcheck case {other}"),
    }
}

/// Ops checked against finite differences. `stop_gradient` and
/// `straight_through` have defined (non-FD) gradients and are checked
/// separately by [`check_gradient_contracts`].
pub const FD_CASES: [&str; 27] = [
    "matmul",
    "transpose",
    "add_bias",
    "linear",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "gelu",
    "softmax",
    "layer_norm",
    "embedding",
    "conv1d",
    "conv_transpose1d",
    "mean",
    "sum",
    "l1_distance",
    "sq_l2_distance",
    "cross_entropy",
    "gather_rows",
    "concat_rows",
    "slice_cols",
    "concat_cols",
    "reshape",
    "attention",
    "mlp_cross_entropy",
];

/// Exact checks for the two gradient-rewriting ops: `stop_gradient` must
/// deliver zero, `straight_through` must deliver the upstream gradient.
/// Returns the max absolute deviation per op.
pub fn check_gradient_contracts(
    rng: &mut ChaCha8Rng,
    trials: usize,
    fault: Option<OpKind>,
) -> Vec<OpCheck> {
    let mut sg_err: f64 = 0.0;
    let mut st_err: f64 = 0.0;
    for _ in 0..trials {
        let (m, n) = (dim(rng, 1, 5), dim(rng, 1, 5));
        let x = rand_tensor(rng, &[m, n]);
        let q = rand_tensor(rng, &[m, n]);
        let w = rand_tensor(rng, &[m, n]);

        let mut g = Graph::<f64>::new();
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        let xv = g.param(x.clone());
        let wv = g.constant(w.clone());
        let s = g.stop_gradient(xv);
        let direct = g.mul(xv, wv).expect("shape");
        let p = g.mul(s, wv).expect("shape");
        let both = g.add(p, direct).expect("shape");
        let loss = g.sum(both);
        g.backward(loss).expect("scalar");
        // only the direct path contributes: d/dx = w
        let gx = g.grad(xv).expect("leaf");
        for (a, b) in gx.data().iter().zip(w.data()) {
            sg_err = sg_err.max((a - b).abs());
        }

        let mut g = Graph::<f64>::new();
        if let Some(f) = fault {
            g.inject_fault(f);
        }
        let qv = g.param(q.clone());
        let ev = g.param(x.clone());
        let wv = g.constant(w.clone());
        let st = g.straight_through(qv, ev).expect("shape");
        for (a, b) in g.value(st).data().iter().zip(q.data()) {
            st_err = st_err.max((a - b).abs());
        }
        let p = g.mul(st, wv).expect("shape");
        let loss = g.sum(p);
        g.backward(loss).expect("scalar");
        for (a, b) in g.grad(ev).expect("leaf").data().iter().zip(w.data()) {
            st_err = st_err.max((a - b).abs());
        }
        for a in g.grad(qv).expect("leaf").data() {
            st_err = st_err.max(a.abs());
        }
    }
    vec![
        OpCheck {
            op: "stop_gradient".into(),
            trials,
            max_rel_error: sg_err,
            passed: sg_err == 0.0,
        },
        OpCheck {
            op: "straight_through".into(),
            trials,
            max_rel_error: st_err,
            passed: st_err == 0.0,
        },
    ]
}

/// Runs every check with `trials` randomized shapes each.
pub fn run_suite(seed: u64, trials: usize, fault: Option<OpKind>) -> GradcheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for name in FD_CASES {
        let mut max_err: f64 = 0.0;
        for _ in 0..trials {
            let case = make_case(name, &mut rng);
            let err = check_case(&case, &mut rng, fault).unwrap_or(f64::INFINITY);
            max_err = max_err.max(if err.is_nan() { f64::INFINITY } else { err });
        }
        checks.push(OpCheck {
            op: name.to_string(),
            trials,
            max_rel_error: max_err,
            passed: max_err < TOLERANCE,
        });
    }
    checks.extend(check_gradient_contracts(&mut rng, trials, fault));
    GradcheckReport {
        tolerance: TOLERANCE,
        step: FD_STEP,
        checks,
    }
}
