//! Acceptance gate. Runs every criterion, prints one PASS/FAIL line each
//! and exits nonzero if any fails. `ACCEPT_ONLY=3,9` restricts the run.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use lslm_core::checkpoint::Checkpoint;
use lslm_core::config::{InstructScheme, PretrainScheme, RunConfig};
use lslm_core::metrics::{evaluate_corpus, fid, mpjpe, pampjpe, EvalPair};
use lslm_core::motion::io::Split;
use lslm_core::motion::{JointClip, MotionSequence, SynthConfig, NUM_JOINTS};
use lslm_core::pipeline::{write_synthetic_corpus, Corpus};
use lslm_core::schemes::{self, load_tokenizer, RunDir};
use lslm_core::templates::TemplateBank;
use lslm_core::tensor::{Bound, Graph, Tensor};
use lslm_core::vq::{clip_loss, evaluate_loss, nearest_codes, vq_loss, Tokenizer, TokenizerConfig};
use nalgebra::{Rotation3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn ok<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn lslm(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lslm"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn lslm")
}

fn lslm_ok(dir: &Path, args: &[&str]) -> Result<String, String> {
    let out = lslm(dir, args);
    if out.status.success() {
        Ok(String::from_utf8_lossy(&out.stdout).into_owned())
    } else {
        Err(format!(
            "`lslm {}` exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

// ---------------------------------------------------------------- 1

fn gradient_oracle() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let t = Instant::now();
    let out = lslm_ok(dir.path(), &["gradcheck", "--trials", "3"])?;
    let secs = t.elapsed().as_secs_f64();
    let mut worst: (f64, String) = (0.0, String::new());
    let mut checked = 0;
    for line in out.lines().filter(|l| l.contains("max rel err")) {
        let err: f64 = line
            .split("max rel err")
            .nth(1)
            .and_then(|s| s.split_whitespace().next())
            .and_then(|s| s.parse().ok())
            .ok_or(format!("unparsable line {line}"))?;
        ensure!(err < 1e-4, "{line}");
        checked += 1;
        if err >= worst.0 {
            worst = (
                err,
                line.split_whitespace().next().unwrap_or("").to_string(),
            );
        }
    }
    ensure!(checked >= 25, "only {checked} ops reported");
    ensure!(secs < 120.0, "gradcheck took {secs:.1}s");
    let neg = lslm(dir.path(), &["gradcheck", "--fault", "matmul"]);
    ensure!(
        neg.status.code() == Some(4),
        "corrupted backward rule was not caught"
    );
    Ok(format!(
        "{checked} ops, worst {} at {:.1e}, {secs:.1}s; fault injection rejected",
        worst.1, worst.0
    ))
}

// ---------------------------------------------------------------- 2

fn row(v: &[f64]) -> Tensor<f64> {
    Tensor::new([1, v.len()], v.to_vec()).unwrap()
}

fn toy_terms(
    s: Tensor<f64>,
    sh: Tensor<f64>,
    e: Tensor<f64>,
    z: Tensor<f64>,
    beta: f64,
) -> [f64; 4] {
    let mut g = Graph::new();
    let v = [g.param(s), g.param(sh), g.param(e), g.param(z)];
    let l = vq_loss(&mut g, v[0], v[1], v[2], v[3], beta).unwrap();
    [l.recon, l.embedding, l.commitment, l.total].map(|x| g.value(x).item())
}

fn vq_loss_contract() -> Outcome {
    // Hand-derived: recon is the per-row L1 norm, the latent terms are
    // per-row squared L2 norms, all averaged over rows.
    let cases: Vec<([f64; 4], [f64; 4])> = vec![
        (
            toy_terms(
                row(&[1.0, 2.0]),
                row(&[1.0, 2.0]),
                row(&[1.0, 0.0]),
                row(&[0.0, 0.0]),
                1.0,
            ),
            [0.0, 1.0, 1.0, 2.0],
        ),
        (
            toy_terms(
                row(&[1.0, 2.0, 3.0]),
                row(&[0.0, 2.0, 5.0]),
                row(&[0.5, -1.0]),
                row(&[1.5, 1.0]),
                0.25,
            ),
            [3.0, 5.0, 1.25, 9.25],
        ),
        (
            toy_terms(
                Tensor::new([2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
                Tensor::new([2, 2], vec![1.0, 0.0, 1.0, 3.0]).unwrap(),
                Tensor::new([2, 2], vec![0.0, 0.0, 2.0, 0.0]).unwrap(),
                Tensor::new([2, 2], vec![0.0, 1.0, 2.0, 2.0]).unwrap(),
                0.5,
            ),
            [1.5, 2.5, 1.25, 5.25],
        ),
    ];
    for (i, (got, want)) in cases.iter().enumerate() {
        for k in 0..4 {
            ensure!(
                (got[k] - want[k]).abs() < 1e-6,
                "fixture {i} term {k}: {} vs {}",
                got[k],
                want[k]
            );
        }
    }

    let cfg = TokenizerConfig {
        codebook_size: 8,
        code_dim: 4,
        downsample: 2,
        width: 6,
        res_blocks: 1,
        beta: 0.25,
    };
    let tok = ok(Tokenizer::new(cfg.clone(), 11))?;
    let params = tok.params.cast::<f64>();
    let x = Tensor::<f64>::from_fn([8, lslm_core::motion::FEATURE_DIM], |i| {
        ((i * 7 % 13) as f64 - 6.0) * 0.15
    });
    let grads = |term: usize| {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &params, |_| true);
        let cl = clip_loss(&mut g, &b, &cfg, &x).unwrap();
        let l = [
            cl.loss.recon,
            cl.loss.embedding,
            cl.loss.commitment,
            cl.loss.total,
        ][term];
        g.backward(l).unwrap();
        let mut cb = 0.0;
        let mut enc = 0.0;
        for (name, _) in params.iter() {
            let n = g.grad(b.var(name)).map_or(0.0, |t| t.sq_norm());
            if name == "tokenizer.codebook" {
                cb += n;
            } else if name.starts_with("tokenizer.enc") {
                enc += n;
            }
        }
        (cb, enc)
    };
    let (cb_r, enc_r) = grads(0);
    let (cb_e, enc_e) = grads(1);
    let (cb_c, enc_c) = grads(2);
    ensure!(
        cb_r == 0.0 && cb_c == 0.0 && cb_e > 0.0,
        "codebook gradients {cb_r} {cb_e} {cb_c}"
    );
    ensure!(
        enc_e == 0.0 && enc_r > 0.0 && enc_c > 0.0,
        "encoder gradients {enc_r} {enc_e} {enc_c}"
    );
    Ok("3 fixtures exact; codebook <- term 2 only, encoder <- terms 1 and 3 only".into())
}

// ---------------------------------------------------------------- 3

fn scan(z: &[f64], cb: &[Vec<f64>]) -> usize {
    let dist = |c: &Vec<f64>| z.iter().zip(c).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    let mut best = 0;
    for k in 1..cb.len() {
        if dist(&cb[k]) < dist(&cb[best]) {
            best = k;
        }
    }
    best
}

fn quantizer_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let d = 8;
    for k in [2usize, 64, 1024] {
        let cb: Vec<Vec<f64>> = (0..k)
            .map(|_| {
                (0..d)
                    .map(|_| rng.random_range(-1.0f32..1.0) as f64)
                    .collect()
            })
            .collect();
        let lat: Vec<Vec<f64>> = (0..1000)
            .map(|_| {
                (0..d)
                    .map(|_| rng.random_range(-1.2f32..1.2) as f64)
                    .collect()
            })
            .collect();
        let t_cb = Tensor::new([k, d], cb.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        let t_lat =
            Tensor::new([1000, d], lat.iter().flatten().map(|&v| v as f32).collect()).unwrap();
        let got = ok(nearest_codes(&t_lat, &t_cb))?;
        let want: Vec<usize> = lat.iter().map(|z| scan(z, &cb)).collect();
        let bad = got.iter().zip(&want).filter(|(a, b)| a != b).count();
        ensure!(bad == 0, "K={k}: {bad} of 1000 indices differ");
    }
    // Ties: duplicated rows and an equidistant latent both resolve to the lowest index.
    let cb = Tensor::new([4, 2], vec![3.0f32, 3.0, 1.0, 0.0, -1.0, 0.0, 1.0, 0.0]).unwrap();
    let z = Tensor::new([2, 2], vec![0.0f32, 0.0, 0.9, 0.1]).unwrap();
    let got = ok(nearest_codes(&z, &cb))?;
    ensure!(got == vec![1, 1], "tie rule gave {got:?}");
    Ok("K in {2, 64, 1024}: 3000/3000 bit-exact; ties -> lowest index".into())
}

// ---------------------------------------------------------------- 4 & 5

struct Shared {
    _dir: tempfile::TempDir,
    corpus: Corpus,
    root: PathBuf,
}

fn tokenizer_corpus() -> Shared {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = SynthConfig {
        seed: 0,
        gesture_vocab: 8,
        samples: 1000,
        words_per_sample: (1, 4),
    };
    write_synthetic_corpus(&data, &synth, true).unwrap();
    let corpus = Corpus::load(&data).unwrap();
    let root = dir.path().to_path_buf();
    Shared {
        _dir: dir,
        corpus,
        root,
    }
}

fn tokenizer_training(sh: &Shared) -> Outcome {
    let cfg = RunConfig::default();
    let run = RunDir::new(sh.root.join("run4"));
    let t = Instant::now();
    let report = ok(schemes::run_stage1(&cfg, &sh.corpus, &run))?;
    let secs = t.elapsed().as_secs_f64();
    let (tok, stats) = ok(load_tokenizer(&ok(Checkpoint::load(
        &run.stage(schemes::TOKENIZER),
    ))?))?;
    let val: Vec<MotionSequence> = sh
        .corpus
        .split(Split::Val)
        .iter()
        .map(|e| stats.normalize(&e.motion).unwrap())
        .collect();
    let before = ok(evaluate_loss(
        &ok(Tokenizer::new(cfg.tokenizer.clone(), cfg.seed))?,
        &val,
    ))?
    .total;
    let after = ok(evaluate_loss(&tok, &val))?.total;
    let ratio = before / after;
    let m = report.eval.motion.mpjpe;
    let detail = format!(
        "{} steps, val loss {before:.2} -> {after:.2} ({ratio:.2}x), MPJPE {m:.4} m, {secs:.0}s",
        cfg.tokenizer_train.steps
    );
    ensure!(
        cfg.tokenizer_train.steps == 2000,
        "step budget {}",
        cfg.tokenizer_train.steps
    );
    ensure!(ratio >= 5.0, "{detail}");
    ensure!(m < 0.05, "{detail}");
    ensure!(secs < 600.0, "{detail}");
    Ok(detail)
}

fn codebook_study(sh: &Shared) -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.tokenizer_train.steps = 1000;
    let run = RunDir::new(sh.root.join("run5"));
    let sizes = [64, 256, 1024];
    let rows = ok(schemes::codebook_study(
        &cfg, &sh.corpus, &run, &sizes, true,
    ))?;
    ensure!(rows.len() == 3, "{} rows", rows.len());
    let again = ok(schemes::codebook_study(
        &cfg, &sh.corpus, &run, &sizes, false,
    ))?;
    ensure!(again == rows, "re-rendered table differs");
    let (m64, m1024) = (rows[0].mpjpe, rows[2].mpjpe);
    ensure!(m1024 <= m64, "MPJPE K=1024 {m1024:.4} > K=64 {m64:.4}");
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let set: Vec<Vec<f64>> = (0..300)
        .map(|_| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect())
        .collect();
    let same = ok(fid(&set, &set))?.value;
    ensure!(same < 1e-6, "FID(identical) = {same:e}");
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("K={} MPJPE {:.4} FID {:.3}", r.k, r.mpjpe, r.fid))
        .collect();
    Ok(format!("{}; FID(identical) {same:.1e}", table.join(", ")))
}

// ---------------------------------------------------------------- 6

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

fn tensors_of(ck: &Checkpoint, groups: &[String]) -> BTreeSet<String> {
    ck.params
        .iter()
        .map(|(n, _)| n.to_string())
        .filter(|n| groups.iter().any(|g| n.split('.').next() == Some(g)))
        .collect()
}

fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 7;
    cfg.tokenizer = TokenizerConfig {
        codebook_size: 32,
        code_dim: 16,
        width: 16,
        ..TokenizerConfig::default()
    };
    cfg.tokenizer_train.steps = 60;
    cfg.lm.d_model = 32;
    cfg.lm.n_layers = 1;
    cfg.lm.n_heads = 2;
    cfg.scheme.pretrain_steps = 8;
    cfg.scheme.instruct_steps = 8;
    cfg.scheme.mlp_lr = 2e-3;
    cfg.scheme.llm_lr = 1e-3;
    cfg.eval.max_new_tokens = 8;
    cfg
}

fn freeze_contract() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = SynthConfig {
        seed: 2,
        gesture_vocab: 5,
        samples: 30,
        words_per_sample: (1, 3),
    };
    ok(write_synthetic_corpus(&data, &synth, true))?;
    let corpus = ok(Corpus::load(&data))?;
    let cfg = tiny_config();
    let base = RunDir::new(dir.path().join("base"));
    ok(schemes::run_stage1(&cfg, &corpus, &base))?;
    let tok_ck = ok(Checkpoint::load(&base.stage(schemes::TOKENIZER)))?;
    let mut checked = 0;
    let expect =
        |a: &Checkpoint, b: &Checkpoint, groups: &[&str], what: &str| -> Result<(), String> {
            let groups: Vec<String> = groups.iter().map(|s| s.to_string()).collect();
            let changed: BTreeSet<String> = schemes::changed_tensors(a, b).into_iter().collect();
            let want = tensors_of(b, &groups);
            ensure!(
                changed == want,
                "{what}: changed {changed:?}, declared {groups:?}"
            );
            Ok(())
        };
    for p in [
        PretrainScheme::Mlp,
        PretrainScheme::Joint,
        PretrainScheme::Staged,
    ] {
        let run = RunDir::new(dir.path().join(p.name()));
        copy_dir(
            &base.stage(schemes::TOKENIZER),
            &run.stage(schemes::TOKENIZER),
        );
        let init = ok(schemes::initial_model(&cfg, &corpus, &run))?.to_checkpoint(
            "init",
            BTreeMap::new(),
            serde_json::Value::Null,
        );
        ok(schemes::run_pretrain(&cfg, &corpus, &run, p))?;
        let load = |s: &str| ok(Checkpoint::load(&run.stage(s)));
        let pre = load(schemes::PRETRAIN)?;
        ensure!(
            schemes::changed_tensors(&tok_ck, &pre)
                .iter()
                .all(|n| !n.starts_with("tokenizer.")),
            "{}: tokenizer moved",
            p.name()
        );
        match p {
            PretrainScheme::Mlp => expect(&init, &pre, &["mlp"], "mlp")?,
            PretrainScheme::Joint => expect(&init, &pre, &["mlp", "llm"], "joint")?,
            PretrainScheme::Staged => {
                let a = load(schemes::PHASE_A)?;
                let b = load(schemes::PHASE_B)?;
                expect(&init, &a, &["mlp"], "staged phase A")?;
                expect(&a, &b, &["llm"], "staged phase B")?;
                ensure!(
                    tensors_of(&a, &["mlp".into()])
                        .iter()
                        .all(|n| a.params.get(n) == b.params.get(n)),
                    "phase B moved the projection"
                );
                checked += 1;
            }
        }
        checked += 1;
        for i in [
            InstructScheme::Llm,
            InstructScheme::Joint,
            InstructScheme::None,
        ] {
            let sub = RunDir::new(dir.path().join(format!("{}_{}", p.name(), i.name())));
            copy_dir(
                &run.stage(schemes::TOKENIZER),
                &sub.stage(schemes::TOKENIZER),
            );
            copy_dir(&run.stage(schemes::PRETRAIN), &sub.stage(schemes::PRETRAIN));
            ok(schemes::run_instruct(&cfg, &corpus, &sub, i))?;
            let tuned = ok(Checkpoint::load(&sub.stage(schemes::INSTRUCT)))?;
            let groups: &[&str] = match i {
                InstructScheme::Llm => &["llm"],
                InstructScheme::Joint => &["mlp", "llm"],
                InstructScheme::None => &[],
            };
            expect(
                &pre,
                &tuned,
                groups,
                &format!("{} -> {}", p.name(), i.name()),
            )?;
            checked += 1;
        }
    }
    Ok(format!(
        "{checked} checkpoint diffs match their declared trainable groups"
    ))
}

// ---------------------------------------------------------------- 7 & 8

struct Overfit {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

fn overfit_config() -> String {
    serde_json::json!({
        "seed": 0,
        "paths": {"data": "data", "run": "run"},
        "tokenizer": {"codebook_size": 64, "code_dim": 32, "width": 32},
        "tokenizer_train": {"steps": 1000},
        "lm": {"d_model": 128, "n_layers": 2, "n_heads": 4},
        "scheme": {"pretrain_steps": 1500, "instruct_steps": 2500, "mlp_lr": 2e-3, "llm_lr": 1e-3}
    })
    .to_string()
}

fn report_of(path: &Path) -> Result<serde_json::Value, String> {
    ok(serde_json::from_str(&ok(fs::read_to_string(path))?))
}

fn end_to_end(slot: &mut Option<Overfit>) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    fs::write(root.join("cfg.json"), overfit_config()).unwrap();
    let t = Instant::now();
    lslm_ok(
        &root,
        &[
            "synth-data",
            "--seed",
            "0",
            "--samples",
            "32",
            "--gesture-vocab",
            "8",
            "--no-split",
            "--out",
            "data",
        ],
    )?;
    lslm_ok(&root, &["train-tokenizer", "--config", "cfg.json"])?;
    lslm_ok(
        &root,
        &["pretrain", "--scheme", "joint", "--config", "cfg.json"],
    )?;
    lslm_ok(
        &root,
        &["instruct", "--tune", "llm", "--config", "cfg.json"],
    )?;
    let secs = t.elapsed().as_secs_f64();
    lslm_ok(
        &root,
        &[
            "evaluate",
            "--checkpoint",
            "run/instruct",
            "--split",
            "train",
            "--template",
            "0",
            "--out",
            "eval_t0.json",
        ],
    )?;
    let r = report_of(&root.join("eval_t0.json"))?;
    let (b1, wer) = (
        r["report"]["bleu1"].as_f64().unwrap(),
        r["report"]["wer"].as_f64().unwrap(),
    );
    let samples = r["report"]["samples"].as_u64().unwrap();
    *slot = Some(Overfit { _dir: dir, root });
    let detail = format!("{samples} pairs, 5000 steps, BLEU@1 {b1:.3}, WER {wer:.2}%, {secs:.0}s");
    ensure!(samples == 32, "{detail}");
    ensure!(b1 >= 0.9 && wer <= 10.0, "{detail}");
    ensure!(secs < 1800.0, "{detail}");
    Ok(detail)
}

fn held_out_templates(of: &Option<Overfit>) -> Outcome {
    let of = of.as_ref().ok_or("criterion 7 did not produce a model")?;
    let holdout = TemplateBank::builtin().holdout();
    ensure!(holdout.len() == 2, "bank holds out {holdout:?}");
    let mut parts = Vec::new();
    for t in holdout {
        let out = format!("eval_t{t}.json");
        lslm_ok(
            &of.root,
            &[
                "evaluate",
                "--checkpoint",
                "run/instruct",
                "--split",
                "train",
                "--template",
                &t.to_string(),
                "--out",
                &out,
            ],
        )?;
        let r = report_of(&of.root.join(&out))?;
        let preds = r["predictions"].as_array().unwrap();
        let exact = preds
            .iter()
            .filter(|p| {
                let norm = |k: &str| {
                    p[k].as_str()
                        .unwrap()
                        .split_whitespace()
                        .map(str::to_lowercase)
                        .collect::<Vec<_>>()
                };
                norm("hypothesis") == norm("reference")
            })
            .count();
        let frac = exact as f64 / preds.len() as f64;
        parts.push(format!("template {t}: {exact}/{}", preds.len()));
        ensure!(frac >= 0.9, "{}", parts.join(", "));
    }
    Ok(parts.join(", "))
}

// ---------------------------------------------------------------- 9

fn read_fixture(name: &str) -> Vec<(String, String, String)> {
    let p = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/fixtures")
        .join(name);
    fs::read_to_string(&p)
        .unwrap()
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let v: serde_json::Value = serde_json::from_str(l).unwrap();
            let s = |k: &str| v[k].as_str().unwrap().to_string();
            (s("id"), s("hyp"), s("ref"))
        })
        .collect()
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn grams(t: &[String], n: usize) -> Vec<Vec<String>> {
    if t.len() < n {
        return vec![];
    }
    (0..=t.len() - n).map(|i| t[i..i + n].to_vec()).collect()
}

fn counts(g: Vec<Vec<String>>) -> BTreeMap<Vec<String>, f64> {
    let mut m = BTreeMap::new();
    for x in g {
        *m.entry(x).or_insert(0.0) += 1.0;
    }
    m
}

fn oracle_bleu(pairs: &[(Vec<String>, Vec<String>)], max_n: usize) -> f64 {
    let c: usize = pairs.iter().map(|p| p.0.len()).sum();
    let r: usize = pairs.iter().map(|p| p.1.len()).sum();
    if c == 0 {
        return 0.0;
    }
    let mut logp = 0.0;
    for n in 1..=max_n {
        let (mut hit, mut tot) = (0.0, 0.0);
        for (h, rf) in pairs {
            let rc = counts(grams(rf, n));
            for (g, k) in counts(grams(h, n)) {
                hit += f64::min(k, rc.get(&g).copied().unwrap_or(0.0));
                tot += k;
            }
        }
        let p = match (hit == 0.0, n) {
            (true, 1) => return 0.0,
            (true, _) => 1.0 / (tot + 1.0),
            _ => hit / tot,
        };
        logp += p.ln() / max_n as f64;
    }
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * logp.exp()
}

fn lcs(a: &[String], b: &[String], memo: &mut HashMap<(usize, usize), usize>) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    if let Some(&v) = memo.get(&(a.len(), b.len())) {
        return v;
    }
    let v = if a[0] == b[0] {
        1 + lcs(&a[1..], &b[1..], memo)
    } else {
        lcs(&a[1..], b, memo).max(lcs(a, &b[1..], memo))
    };
    memo.insert((a.len(), b.len()), v);
    v
}

fn oracle_rouge(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    pairs
        .iter()
        .map(|(h, r)| {
            let l = lcs(h, r, &mut HashMap::new()) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rc) = (l / h.len() as f64, l / r.len() as f64);
            (1.0 + beta2) * p * rc / (rc + beta2 * p)
        })
        .sum::<f64>()
        / pairs.len() as f64
}

fn oracle_cider(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let docs = pairs.len() as f64;
    let mut total = 0.0;
    for (h, r) in pairs {
        let mut s = 0.0;
        for n in 1..=4 {
            let df = |g: &Vec<String>| {
                pairs
                    .iter()
                    .filter(|(_, rr)| grams(rr, n).contains(g))
                    .count()
                    .max(1) as f64
            };
            let tfidf = |t: &[String]| -> BTreeMap<Vec<String>, f64> {
                counts(grams(t, n))
                    .into_iter()
                    .map(|(g, k)| {
                        let w = k * (docs / df(&g)).ln();
                        (g, w)
                    })
                    .collect()
            };
            let (vh, vr) = (tfidf(h), tfidf(r));
            let dot: f64 = vh.iter().map(|(g, x)| x * vr.get(g).unwrap_or(&0.0)).sum();
            let nh = vh.values().map(|x| x * x).sum::<f64>().sqrt();
            let nr = vr.values().map(|x| x * x).sum::<f64>().sqrt();
            if nh > 0.0 && nr > 0.0 {
                s += dot / (nh * nr);
            }
        }
        total += 10.0 * s / 4.0;
    }
    total / docs
}

/// Every (sub, ins, del) triple reachable by a minimum-cost edit script.
fn edit_triples(
    r: &[String],
    h: &[String],
    memo: &mut HashMap<(usize, usize), (usize, BTreeSet<(usize, usize, usize)>)>,
) -> (usize, BTreeSet<(usize, usize, usize)>) {
    if let Some(v) = memo.get(&(r.len(), h.len())) {
        return v.clone();
    }
    let res = if r.is_empty() {
        (h.len(), BTreeSet::from([(0, h.len(), 0)]))
    } else if h.is_empty() {
        (r.len(), BTreeSet::from([(0, 0, r.len())]))
    } else {
        let mut opts = Vec::new();
        let (c, s) = edit_triples(&r[1..], &h[1..], memo);
        let same = r[0] == h[0];
        opts.push((
            c + usize::from(!same),
            s.iter()
                .map(|&(a, b, d)| (a + usize::from(!same), b, d))
                .collect::<BTreeSet<_>>(),
        ));
        let (c, s) = edit_triples(&r[1..], h, memo);
        opts.push((c + 1, s.iter().map(|&(a, b, d)| (a, b, d + 1)).collect()));
        let (c, s) = edit_triples(r, &h[1..], memo);
        opts.push((c + 1, s.iter().map(|&(a, b, d)| (a, b + 1, d)).collect()));
        let best = opts.iter().map(|o| o.0).min().unwrap();
        (
            best,
            opts.into_iter()
                .filter(|o| o.0 == best)
                .flat_map(|o| o.1)
                .collect(),
        )
    };
    memo.insert((r.len(), h.len()), res.clone());
    res
}

fn check_fixture(name: &str) -> Result<(f64, String), String> {
    let fx = read_fixture(name);
    let pairs: Vec<(Vec<String>, Vec<String>)> =
        fx.iter().map(|(_, h, r)| (words(h), words(r))).collect();
    let corpus: Vec<EvalPair> = fx
        .iter()
        .map(|(id, h, r)| EvalPair::new(id.clone(), h, r))
        .collect();
    let rep = evaluate_corpus(&corpus);
    let mut sid = (0, 0, 0);
    let mut ref_words = 0;
    for (h, r) in &pairs {
        let (_, triples) = edit_triples(r, h, &mut HashMap::new());
        ensure!(
            triples.len() == 1,
            "{name}: ambiguous edit decomposition for {r:?} / {h:?}: {triples:?}"
        );
        let t = triples.into_iter().next().unwrap();
        sid = (sid.0 + t.0, sid.1 + t.1, sid.2 + t.2);
        ref_words += r.len();
    }
    let n = pairs.len() as f64;
    let want = [
        ("bleu1", oracle_bleu(&pairs, 1), rep.bleu1),
        ("bleu4", oracle_bleu(&pairs, 4), rep.bleu4),
        ("rougeL", oracle_rouge(&pairs), rep.rouge_l),
        ("cider", oracle_cider(&pairs), rep.cider),
        (
            "wer",
            100.0 * (sid.0 + sid.1 + sid.2) as f64 / ref_words as f64,
            rep.wer,
        ),
        ("sub", sid.0 as f64 / n, rep.sub),
        ("ins", sid.1 as f64 / n, rep.ins),
        ("del", sid.2 as f64 / n, rep.del),
    ];
    for (k, o, g) in want {
        ensure!(
            g.is_finite() && (o - g).abs() < 1e-6,
            "{name} {k}: oracle {o} vs {g}"
        );
    }
    ensure!(
        (rep.sub_total, rep.ins_total, rep.del_total) == sid,
        "{name}: totals {:?}",
        (rep.sub_total, rep.ins_total, rep.del_total)
    );
    Ok((
        rep.wer,
        format!(
            "BLEU@1 {:.4} BLEU@4 {:.4} ROUGE-L {:.4} CIDEr {:.4} WER {:.2}",
            rep.bleu1, rep.bleu4, rep.rouge_l, rep.cider, rep.wer
        ),
    ))
}

fn metric_oracles() -> Outcome {
    let (_, main) = check_fixture("captions.jsonl")?;
    let (wer, _) = check_fixture("insertion_heavy.jsonl")?;
    ensure!(wer > 100.0, "insertion-heavy WER {wer}");
    Ok(format!("{main}; insertion-heavy WER {wer:.0}%"))
}

// ---------------------------------------------------------------- 10

fn clip(rng: &mut ChaCha8Rng, frames: usize) -> JointClip {
    let pos = (0..frames * NUM_JOINTS)
        .map(|_| {
            Vector3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(0.0..1.8),
                rng.random_range(-1.0..1.0),
            )
        })
        .collect();
    JointClip::new(pos, 20.0).unwrap()
}

fn motion_metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let gt = clip(&mut rng, 6);
    ensure!(
        ok(mpjpe(&gt, &gt))?.abs() < 1e-6 && ok(pampjpe(&gt, &gt))?.abs() < 1e-6,
        "identity is not zero"
    );
    let shift = Vector3::new(0.03, -0.04, 0.0);
    let moved = JointClip::new(gt.positions().iter().map(|p| p + shift).collect(), 20.0).unwrap();
    ensure!(
        (ok(mpjpe(&moved, &gt))? - 0.05).abs() < 1e-6,
        "translation MPJPE"
    );
    let rot = Rotation3::from_euler_angles(0.3, -1.1, 0.7);
    let sim = JointClip::new(
        gt.positions()
            .iter()
            .map(|p| rot * p * 1.7 + Vector3::new(1.0, 2.0, -3.0))
            .collect(),
        20.0,
    )
    .unwrap();
    let pa = ok(pampjpe(&sim, &gt))?;
    ensure!(pa < 1e-6, "similarity-transformed PAMPJPE {pa:e}");
    let n = 100_000;
    let sigma = 1.0 + 5f64.sqrt();
    let a: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![Normal::new(0.0, 1.0).unwrap().sample(&mut rng)])
        .collect();
    let b: Vec<Vec<f64>> = (0..n)
        .map(|_| vec![Normal::new(2.0, sigma).unwrap().sample(&mut rng)])
        .collect();
    let f = ok(fid(&a, &b))?.value;
    ensure!((f - 9.0).abs() < 0.2, "FID {f} vs 9.0");
    Ok(format!(
        "trivial and rigid cases exact; FID N(0,1) vs N(2,(1+sqrt5)^2) = {f:.3} (analytic 9)"
    ))
}

// ---------------------------------------------------------------- 11

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(
                    p.strip_prefix(root).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                );
            }
        }
    }
    out
}

fn determinism() -> Outcome {
    let cfg = tiny_config().to_json();
    let mut trees = Vec::new();
    let mut dirs = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mut v: serde_json::Value = serde_json::from_str(&cfg).unwrap();
        v["paths"] = serde_json::json!({"data": "data", "run": "run"});
        fs::write(root.join("cfg.json"), v.to_string()).unwrap();
        lslm_ok(
            root,
            &[
                "synth-data",
                "--seed",
                "4",
                "--samples",
                "24",
                "--gesture-vocab",
                "5",
                "--out",
                "data",
            ],
        )?;
        lslm_ok(root, &["train-tokenizer", "--config", "cfg.json"])?;
        lslm_ok(
            root,
            &["pretrain", "--scheme", "staged", "--config", "cfg.json"],
        )?;
        lslm_ok(
            root,
            &["instruct", "--tune", "joint", "--config", "cfg.json"],
        )?;
        lslm_ok(
            root,
            &["codebook-study", "--sizes", "8,16", "--config", "cfg.json"],
        )?;
        trees.push(tree(root));
        dirs.push(dir);
    }
    let names: Vec<&String> = trees[0].keys().collect();
    ensure!(
        names == trees[1].keys().collect::<Vec<_>>(),
        "file sets differ"
    );
    let differ: Vec<&String> = names
        .iter()
        .copied()
        .filter(|k| trees[0][*k] != trees[1][*k])
        .collect();
    ensure!(differ.is_empty(), "files differ: {differ:?}");
    ensure!(
        names.iter().any(|n| n.ends_with("metrics.jsonl")),
        "no metric log"
    );
    let cks = names.iter().filter(|n| n.ends_with("index.json")).count();
    Ok(format!(
        "{} files ({cks} checkpoints, metrics.jsonl) byte-identical across two runs",
        names.len()
    ))
}

// ----------------------------------------------------------------

fn guarded(f: impl FnOnce() -> Outcome) -> Outcome {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored.
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPT_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let wanted = |n: u32| only.as_ref().is_none_or(|s| s.contains(&n));
    let mut shared: Option<Shared> = None;
    let mut overfit: Option<Overfit> = None;
    let mut failures = 0;
    let mut report = |n: u32, name: &str, r: Outcome, secs: f64| {
        let line = match &r {
            Ok(d) => format!("criterion {n:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => format!("criterion {n:>2} FAIL  {name}: {d} [{secs:.1}s]"),
        };
        if r.is_err() {
            failures += 1;
        }
        let mut out = std::io::stdout();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    };
    let criteria: [(u32, &str); 11] = [
        (1, "gradient oracle"),
        (2, "VQ loss and gradient routing"),
        (3, "nearest-code quantization"),
        (4, "tokenizer training"),
        (5, "codebook study"),
        (6, "scheme freeze contract"),
        (7, "end-to-end overfit"),
        (8, "held-out instruction templates"),
        (9, "text metric oracles"),
        (10, "motion metrics"),
        (11, "determinism"),
    ];
    for (n, name) in criteria {
        if !wanted(n) {
            continue;
        }
        let t = Instant::now();
        let r = guarded(|| match n {
            1 => gradient_oracle(),
            2 => vq_loss_contract(),
            3 => quantizer_oracle(),
            4 | 5 => {
                let sh = shared.get_or_insert_with(tokenizer_corpus);
                if n == 4 {
                    tokenizer_training(sh)
                } else {
                    codebook_study(sh)
                }
            }
            6 => freeze_contract(),
            7 => end_to_end(&mut overfit),
            8 => {
                if overfit.is_none() {
                    let _ = end_to_end(&mut overfit);
                }
                held_out_templates(&overfit)
            }
            9 => metric_oracles(),
            10 => motion_metrics(),
            _ => determinism(),
        });
        report(n, name, r, t.elapsed().as_secs_f64());
    }
    if failures > 0 {
        println!("acceptance: {failures} criteria failed");
        std::process::exit(1);
    }
    println!("acceptance: all selected criteria passed");
}
