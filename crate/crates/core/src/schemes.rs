//! Stage orchestration: tokenizer training, alignment pretraining under the
//! three freezing schemes, instruction tuning, and the codebook sweep.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{InstructScheme, PretrainScheme, RunConfig, SchemeSpec};
use crate::dataset::build_vocab;
use crate::error::{Error, Result};
use crate::fusion::{build_example, example_loss};
use crate::metrics::EvalReport;
use crate::motion::io::Split;
use crate::motion::{FeatureStats, MotionSequence};
use crate::pipeline::{
    evaluate_model, evaluate_tokenizer, stats_from_json, template_texts, token_dump, CodedSample,
    Corpus, PromptMode, SignModel, TokenizerEval, STATS_FILE, TOKENS_FILE,
};
use crate::templates::{TemplateBank, TemplateRef};
use crate::tensor::{AdamW, AdamWConfig, Bound, Graph, Var};
use crate::vq::{train_tokenizer, Tokenizer, TokenizerConfig};

pub const TOKENIZER: &str = "tokenizer";
pub const PRETRAIN: &str = "pretrain";
pub const PHASE_A: &str = "pretrain_phase_a";
pub const PHASE_B: &str = "pretrain_phase_b";
pub const INSTRUCT: &str = "instruct";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.json";
pub const USAGE_FILE: &str = "codebook_usage.json";
pub const TOKENIZER_CONFIG_FILE: &str = "tokenizer.json";
pub const TOKENIZER_EVAL_FILE: &str = "tokenizer_eval.json";
pub const STUDY_DIR: &str = "codebook_study";

/// Parameter groups of the assembled model.
pub const GROUPS: [&str; 3] = ["tokenizer", "mlp", "llm"];

/// Which parameter groups are frozen. The tokenizer is frozen for good once
/// stage 1 is done.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct FreezeMap {
    frozen: BTreeMap<String, bool>,
}

impl Default for FreezeMap {
    fn default() -> Self {
        let mut frozen: BTreeMap<String, bool> =
            GROUPS.iter().map(|g| (g.to_string(), false)).collect();
        frozen.insert("tokenizer".into(), true);
        FreezeMap { frozen }
    }
}

impl FreezeMap {
    fn check(group: &str) -> Result<()> {
        if GROUPS.contains(&group) {
            Ok(())
        } else {
            Err(Error::Config(format!("unknown parameter group {group:?}")))
        }
    }

    pub fn freeze(&mut self, groups: &[&str]) -> Result<()> {
        for g in groups {
            Self::check(g)?;
        }
        for g in groups {
            self.frozen.insert(g.to_string(), true);
        }
        Ok(())
    }

    pub fn unfreeze(&mut self, groups: &[&str]) -> Result<()> {
        for g in groups {
            Self::check(g)?;
            if *g == "tokenizer" {
                return Err(Error::StageOrder(
                    "the tokenizer is frozen once stage 1 completes".into(),
                ));
            }
        }
        for g in groups {
            self.frozen.insert(g.to_string(), false);
        }
        Ok(())
    }

    /// Unknown groups count as frozen.
    pub fn is_frozen(&self, group: &str) -> bool {
        self.frozen.get(group).copied().unwrap_or(true)
    }

    pub fn trainable(&self) -> Vec<String> {
        self.frozen
            .iter()
            .filter(|(_, f)| !**f)
            .map(|(g, _)| g.clone())
            .collect()
    }

    pub fn to_map(&self) -> BTreeMap<String, bool> {
        self.frozen.clone()
    }

    pub fn from_map(map: &BTreeMap<String, bool>) -> Result<Self> {
        let mut out = FreezeMap::default();
        for (g, &f) in map {
            Self::check(g)?;
            if g == "tokenizer" && !f {
                return Err(Error::StageOrder(
                    "checkpoint marks the tokenizer trainable".into(),
                ));
            }
            out.frozen.insert(g.clone(), f);
        }
        Ok(out)
    }

    fn only(trainable: &[&str]) -> Self {
        let mut m = FreezeMap::default();
        m.freeze(&["mlp", "llm"]).expect("known groups");
        m.unfreeze(trainable).expect("known groups");
        m
    }
}

/// Named sub-phases of a pretraining scheme with their freeze maps.
pub fn pretrain_phases(scheme: PretrainScheme) -> Vec<(&'static str, FreezeMap)> {
    match scheme {
        PretrainScheme::Mlp => vec![(PRETRAIN, FreezeMap::only(&["mlp"]))],
        PretrainScheme::Joint => vec![(PRETRAIN, FreezeMap::only(&["mlp", "llm"]))],
        PretrainScheme::Staged => vec![
            (PHASE_A, FreezeMap::only(&["mlp"])),
            (PHASE_B, FreezeMap::only(&["llm"])),
        ],
    }
}

pub fn instruct_freeze(scheme: InstructScheme) -> Option<FreezeMap> {
    match scheme {
        InstructScheme::Llm => Some(FreezeMap::only(&["llm"])),
        InstructScheme::Joint => Some(FreezeMap::only(&["mlp", "llm"])),
        InstructScheme::None => None,
    }
}

/// One `metrics.jsonl` row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub stage: String,
    pub step: usize,
    pub split: String,
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub sub: f64,
}

impl MetricRecord {
    pub fn new(stage: &str, step: usize, split: Split, r: &EvalReport) -> Self {
        MetricRecord {
            stage: stage.into(),
            step,
            split: split.name().into(),
            bleu1: r.bleu1,
            bleu4: r.bleu4,
            rouge_l: r.rouge_l,
            cider: r.cider,
            wer: r.wer,
            ins: r.ins,
            del: r.del,
            sub: r.sub,
        }
    }
}

/// Layout of a run directory.
#[derive(Clone, Debug)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunDir { root: root.into() }
    }

    pub fn stage(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }

    /// Creates the directory and echoes the config.
    pub fn init(&self, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(&self.root).map_err(Error::io(&self.root))?;
        let p = self.root.join(CONFIG_FILE);
        fs::write(&p, cfg.to_json()).map_err(Error::io(&p))
    }

    pub fn require(&self, name: &str, hint: &str) -> Result<Checkpoint> {
        let dir = self.stage(name);
        if !Checkpoint::exists(&dir) {
            return Err(Error::StageOrder(format!(
                "missing {name} checkpoint at {}; run `{hint}` first",
                dir.display()
            )));
        }
        Checkpoint::load(&dir)
    }

    pub fn append_metric(&self, rec: &MetricRecord) -> Result<()> {
        let p = self.root.join(METRICS_FILE);
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&p)
            .map_err(Error::io(&p))?;
        let line = serde_json::to_string(rec).map_err(Error::json(&p))?;
        writeln!(f, "{line}").map_err(Error::io(&p))
    }

    pub fn read_metrics(&self) -> Result<Vec<MetricRecord>> {
        let p = self.root.join(METRICS_FILE);
        let text = fs::read_to_string(&p).map_err(Error::io(&p))?;
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::json(&p)))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExampleMode {
    Pretrain,
    Instruct,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PhaseLog {
    pub losses: Vec<f64>,
    pub skipped: usize,
}

pub fn optimizer(spec: &SchemeSpec) -> AdamW {
    AdamW::new(AdamWConfig {
        lr: spec.llm_lr,
        weight_decay: spec.weight_decay,
        ..AdamWConfig::default()
    })
    .with_group_lr("mlp", spec.mlp_lr)
    .with_group_lr("llm", spec.llm_lr)
}

/// One training phase over precomputed code vectors. `on_step` runs after
/// every update with the 1-based step count.
#[allow(clippy::too_many_arguments)]
pub fn train_phase(
    model: &mut SignModel,
    train: &[CodedSample],
    freeze: &FreezeMap,
    mode: ExampleMode,
    steps: usize,
    batch_size: usize,
    opt: &mut AdamW,
    rng: &mut ChaCha8Rng,
    mut on_step: impl FnMut(usize, &SignModel) -> Result<()>,
) -> Result<PhaseLog> {
    if train.is_empty() {
        return Err(Error::invalid("no training samples"));
    }
    if freeze.trainable().is_empty() {
        return Err(Error::Config(
            "training phase with every group frozen".into(),
        ));
    }
    let (mlp_on, llm_on) = (!freeze.is_frozen("mlp"), !freeze.is_frozen("llm"));
    let mut log = PhaseLog::default();
    for step in 0..steps {
        let mut examples = Vec::with_capacity(batch_size);
        for _ in 0..batch_size.max(1) {
            let s = &train[rng.random_range(0..train.len())];
            let which = match mode {
                ExampleMode::Pretrain => TemplateRef::Pretrain,
                ExampleMode::Instruct => TemplateRef::Instruction(model.bank.sample(rng)),
            };
            match build_example(&model.vocab, &model.bank, which, &s.text, &s.codes)? {
                Some(ex) => examples.push(ex),
                None => log.skipped += 1,
            }
        }
        if examples.is_empty() {
            continue;
        }
        let (loss, gm, gl) = {
            let mut g = Graph::new();
            let mb = Bound::new(&mut g, &model.mlp.params, |_| mlp_on);
            let lb = Bound::new(&mut g, &model.lm.params, |_| llm_on);
            let mut total: Option<Var> = None;
            for ex in &examples {
                let l = example_loss(&mut g, &mb, &lb, &model.lm.config, ex, Some(rng))?;
                total = Some(match total {
                    None => l,
                    Some(t) => g.add(t, l)?,
                });
            }
            let loss = g.scale(total.expect("nonempty"), 1.0 / examples.len() as f32);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("loss is {value} at step {step}")));
            }
            g.backward(loss)?;
            (
                value,
                model.mlp.params.grads(&g, mb.vars()),
                model.lm.params.grads(&g, lb.vars()),
            )
        };
        opt.step(&mut model.mlp.params, &gm, |grp| freeze.is_frozen(grp));
        opt.step(&mut model.lm.params, &gl, |grp| freeze.is_frozen(grp));
        log.losses.push(loss);
        if step % 50 == 0 {
            log::debug!("step {step}: loss {loss:.4}");
        }
        on_step(step + 1, model)?;
    }
    if log.skipped > 0 {
        log::warn!("skipped {} over-length examples", log.skipped);
    }
    Ok(log)
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn limit<T>(v: Vec<T>, max: usize) -> Vec<T> {
    if max == 0 {
        v
    } else {
        v.into_iter().take(max).collect()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UsageReport {
    pub usage: Vec<f64>,
    pub active_codes_last_step: usize,
    pub resets: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

#[derive(Clone, Debug)]
pub struct Stage1Report {
    pub eval: TokenizerEval,
    pub usage: UsageReport,
}

fn normalized_split(
    corpus: &Corpus,
    stats: &FeatureStats,
    split: Split,
) -> Result<Vec<MotionSequence>> {
    corpus
        .split(split)
        .iter()
        .map(|e| stats.normalize(&e.motion))
        .collect()
}

/// Trains a tokenizer on the train split and saves it with its statistics.
pub fn train_stage1(
    cfg: &RunConfig,
    tok_cfg: &TokenizerConfig,
    corpus: &Corpus,
) -> Result<(Tokenizer, FeatureStats, UsageReport)> {
    let raw: Vec<&MotionSequence> = corpus
        .split(Split::Train)
        .iter()
        .map(|e| &e.motion)
        .collect();
    if raw.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    let stats = FeatureStats::compute(raw.iter().copied())?;
    let train = normalized_split(corpus, &stats, Split::Train)?;
    let tok = Tokenizer::new(tok_cfg.clone(), cfg.seed)?;
    let out = train_tokenizer(tok, &train, &cfg.tokenizer_train)?;
    let usage = UsageReport {
        active_codes_last_step: out.log.last().map_or(0, |l| l.active_codes),
        initial_loss: out.log.first().map_or(f64::NAN, |l| l.loss.total),
        final_loss: out.log.last().map_or(f64::NAN, |l| l.loss.total),
        usage: out.usage,
        resets: out.resets,
    };
    Ok((out.tokenizer, stats, usage))
}

fn tokenizer_checkpoint(
    cfg: &RunConfig,
    tok: &Tokenizer,
    stats: &FeatureStats,
    usage: &UsageReport,
    eval: &TokenizerEval,
) -> Checkpoint {
    let mut ck = Checkpoint::new(TOKENIZER, tok.params.clone());
    ck.freeze = FreezeMap::default().to_map();
    ck.config = cfg.to_value();
    let json = |v: &dyn erased::Ser| v.to_json();
    ck.files.insert(STATS_FILE.into(), json(stats));
    ck.files
        .insert(TOKENIZER_CONFIG_FILE.into(), json(&tok.config));
    ck.files.insert(USAGE_FILE.into(), json(usage));
    ck.files.insert(TOKENIZER_EVAL_FILE.into(), json(eval));
    ck
}

mod erased {
    pub trait Ser {
        fn to_json(&self) -> String;
    }
    impl<T: serde::Serialize> Ser for T {
        fn to_json(&self) -> String {
            serde_json::to_string_pretty(self).expect("serializable") + "\n"
        }
    }
}

pub fn load_tokenizer(ck: &Checkpoint) -> Result<(Tokenizer, FeatureStats)> {
    let tc: TokenizerConfig = serde_json::from_str(ck.file(TOKENIZER_CONFIG_FILE)?)
        .map_err(|e| Error::invalid(format!("tokenizer config: {e}")))?;
    let tok = Tokenizer::from_params(tc, ck.params.group("tokenizer"))?;
    Ok((tok, stats_from_json(ck.file(STATS_FILE)?)?))
}

/// Stage 1: tokenizer training, evaluated on the validation split.
pub fn run_stage1(cfg: &RunConfig, corpus: &Corpus, run: &RunDir) -> Result<Stage1Report> {
    run.init(cfg)?;
    let (tok, stats, usage) = train_stage1(cfg, &cfg.tokenizer, corpus)?;
    let mut eval_split = corpus.split(Split::Val);
    if eval_split.is_empty() {
        eval_split = corpus.split(Split::Train);
    }
    let clips: Vec<&MotionSequence> = eval_split.iter().map(|e| &e.motion).collect();
    let eval = evaluate_tokenizer(&tok, &stats, &clips)?;
    tokenizer_checkpoint(cfg, &tok, &stats, &usage, &eval).save(&run.stage(TOKENIZER))?;
    let p = run.root.join(TOKENS_FILE);
    fs::write(&p, token_dump(&tok, &stats, &corpus.entries)?).map_err(Error::io(&p))?;
    log::info!(
        "tokenizer: loss {:.3} -> {:.3}, val MPJPE {:.4} m",
        usage.initial_loss,
        usage.final_loss,
        eval.motion.mpjpe
    );
    Ok(Stage1Report { eval, usage })
}

/// Samples used for validation; falls back to train when the split is empty.
fn eval_samples(
    model: &SignModel,
    corpus: &Corpus,
    cfg: &RunConfig,
) -> Result<(Split, Vec<CodedSample>)> {
    let (split, entries) = match corpus.split(Split::Val) {
        v if v.is_empty() => (Split::Train, corpus.split(Split::Train)),
        v => (Split::Val, v),
    };
    Ok((split, limit(model.coded(&entries)?, cfg.eval.max_samples)))
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub records: Vec<MetricRecord>,
    pub losses: Vec<f64>,
}

fn evaluate_into(
    run: &RunDir,
    model: &SignModel,
    stage: &str,
    step: usize,
    split: Split,
    samples: &[CodedSample],
    mode: PromptMode,
    max_new: usize,
) -> Result<MetricRecord> {
    let (report, _) = evaluate_model(model, samples, mode, max_new)?;
    let rec = MetricRecord::new(stage, step, split, &report);
    run.append_metric(&rec)?;
    Ok(rec)
}

fn checkpoint_stage(
    model: &SignModel,
    run: &RunDir,
    cfg: &RunConfig,
    stage: &str,
    freeze: &FreezeMap,
) -> Result<()> {
    model
        .to_checkpoint(stage, freeze.to_map(), cfg.to_value())
        .save(&run.stage(stage))
}

/// Runs one phase and dumps the model next to the run if the loss blows up.
#[allow(clippy::too_many_arguments)]
fn guarded_phase(
    model: &mut SignModel,
    run: &RunDir,
    cfg: &RunConfig,
    stage: &str,
    train: &[CodedSample],
    freeze: &FreezeMap,
    mode: ExampleMode,
    steps: usize,
    stream: u64,
    eval: &(Split, Vec<CodedSample>),
    prompt: PromptMode,
) -> Result<(PhaseLog, Vec<MetricRecord>)> {
    let mut opt = optimizer(&cfg.scheme);
    let mut rng = stream_rng(cfg.seed, stream);
    let mut records = Vec::new();
    let every = cfg.scheme.eval_every;
    let res = train_phase(
        model,
        train,
        freeze,
        mode,
        steps,
        cfg.scheme.batch_size,
        &mut opt,
        &mut rng,
        |step, m| {
            if every > 0 && step % every == 0 && step < steps {
                records.push(evaluate_into(
                    run,
                    m,
                    stage,
                    step,
                    eval.0,
                    &eval.1,
                    prompt,
                    cfg.eval.max_new_tokens,
                )?);
            }
            Ok(())
        },
    );
    match res {
        Ok(log) => Ok((log, records)),
        Err(e @ Error::Numeric(_)) => {
            let dump = format!("{stage}_abort");
            log::error!("{e}; dumping state to {}", run.stage(&dump).display());
            checkpoint_stage(model, run, cfg, &dump, freeze)?;
            Err(e)
        }
        Err(e) => Err(e),
    }
}

/// The seeded, untrained model that pretraining starts from.
pub fn initial_model(cfg: &RunConfig, corpus: &Corpus, run: &RunDir) -> Result<SignModel> {
    let ck = run.require(TOKENIZER, "train-tokenizer")?;
    let (tok, stats) = load_tokenizer(&ck)?;
    let bank = TemplateBank::builtin();
    let vocab = build_vocab(&corpus.manifest, &template_texts(&bank), 1)?;
    SignModel::new(tok, stats, vocab, bank, cfg.lm.clone(), cfg.seed)
}

/// Alignment pretraining under `scheme` on top of the stage-1 tokenizer.
pub fn run_pretrain(
    cfg: &RunConfig,
    corpus: &Corpus,
    run: &RunDir,
    scheme: PretrainScheme,
) -> Result<StageReport> {
    let mut model = initial_model(cfg, corpus, run)?;
    run.init(cfg)?;
    let train = model.coded(&corpus.split(Split::Train))?;
    let eval = eval_samples(&model, corpus, cfg)?;
    let max_new = cfg.eval.max_new_tokens;
    let mut records = vec![evaluate_into(
        run,
        &model,
        PRETRAIN,
        0,
        eval.0,
        &eval.1,
        PromptMode::Pretrain,
        max_new,
    )?];
    let mut losses = Vec::new();
    let phases = pretrain_phases(scheme);
    let mut last = FreezeMap::default();
    for (i, (stage, freeze)) in phases.iter().enumerate() {
        let (log, recs) = guarded_phase(
            &mut model,
            run,
            cfg,
            stage,
            &train,
            freeze,
            ExampleMode::Pretrain,
            cfg.scheme.pretrain_steps,
            10 + i as u64,
            &eval,
            PromptMode::Pretrain,
        )?;
        records.extend(recs);
        losses.extend(log.losses);
        checkpoint_stage(&model, run, cfg, stage, freeze)?;
        records.push(evaluate_into(
            run,
            &model,
            stage,
            cfg.scheme.pretrain_steps,
            eval.0,
            &eval.1,
            PromptMode::Pretrain,
            max_new,
        )?);
        last = freeze.clone();
    }
    if scheme == PretrainScheme::Staged {
        checkpoint_stage(&model, run, cfg, PRETRAIN, &last)?;
    }
    Ok(StageReport { records, losses })
}

/// Template used for validation after instruction tuning.
pub const EVAL_TEMPLATE: usize = 0;

/// Instruction tuning on top of the pretraining checkpoint.
pub fn run_instruct(
    cfg: &RunConfig,
    corpus: &Corpus,
    run: &RunDir,
    scheme: InstructScheme,
) -> Result<StageReport> {
    let ck = run.require(PRETRAIN, "pretrain")?;
    FreezeMap::from_map(&ck.freeze)?;
    run.init(cfg)?;
    let mut model = SignModel::from_checkpoint(&ck)?;
    let eval = eval_samples(&model, corpus, cfg)?;
    let prompt = PromptMode::Template(EVAL_TEMPLATE);
    let mut records = Vec::new();
    let mut losses = Vec::new();
    let freeze = match instruct_freeze(scheme) {
        Some(freeze) => {
            let train = model.coded(&corpus.split(Split::Train))?;
            let (log, recs) = guarded_phase(
                &mut model,
                run,
                cfg,
                INSTRUCT,
                &train,
                &freeze,
                ExampleMode::Instruct,
                cfg.scheme.instruct_steps,
                20,
                &eval,
                prompt,
            )?;
            records.extend(recs);
            losses = log.losses;
            freeze
        }
        None => FreezeMap::from_map(&ck.freeze)?,
    };
    checkpoint_stage(&model, run, cfg, INSTRUCT, &freeze)?;
    let steps = if scheme == InstructScheme::None {
        0
    } else {
        cfg.scheme.instruct_steps
    };
    records.push(evaluate_into(
        run,
        &model,
        INSTRUCT,
        steps,
        eval.0,
        &eval.1,
        prompt,
        cfg.eval.max_new_tokens,
    )?);
    Ok(StageReport { records, losses })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodebookRow {
    #[serde(rename = "K")]
    pub k: usize,
    pub fid: f64,
    pub mpjpe: f64,
    pub pampjpe: f64,
    pub perplexity: f64,
    pub active_codes: usize,
}

pub fn study_csv(rows: &[CodebookRow]) -> String {
    let mut s = String::from("K,FID,MPJPE,PAMPJPE,perplexity,active_codes\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{}\n",
            r.k, r.fid, r.mpjpe, r.pampjpe, r.perplexity, r.active_codes
        ));
    }
    s
}

/// Trains (or reloads with `train = false`) one tokenizer per codebook
/// size and scores reconstructions of the test split.
pub fn codebook_study(
    cfg: &RunConfig,
    corpus: &Corpus,
    run: &RunDir,
    sizes: &[usize],
    train: bool,
) -> Result<Vec<CodebookRow>> {
    if sizes.is_empty() {
        return Err(Error::Config(
            "codebook study needs at least one size".into(),
        ));
    }
    let root = run.stage(STUDY_DIR);
    fs::create_dir_all(&root).map_err(Error::io(&root))?;
    let mut test = corpus.split(Split::Test);
    if test.is_empty() {
        test = corpus.split(Split::Train);
    }
    let clips: Vec<&MotionSequence> = test.iter().map(|e| &e.motion).collect();
    let mut rows = Vec::with_capacity(sizes.len());
    for &k in sizes {
        let dir = root.join(format!("k{k}"));
        let (tok, stats) = if train {
            let tc = TokenizerConfig {
                codebook_size: k,
                ..cfg.tokenizer.clone()
            };
            let (tok, stats, usage) = train_stage1(cfg, &tc, corpus)?;
            let eval = evaluate_tokenizer(&tok, &stats, &clips)?;
            tokenizer_checkpoint(cfg, &tok, &stats, &usage, &eval).save(&dir)?;
            (tok, stats)
        } else {
            if !Checkpoint::exists(&dir) {
                return Err(Error::StageOrder(format!(
                    "no saved tokenizer for K={k} at {}",
                    dir.display()
                )));
            }
            load_tokenizer(&Checkpoint::load(&dir)?)?
        };
        let e = evaluate_tokenizer(&tok, &stats, &clips)?;
        log::info!("K={k}: MPJPE {:.4} FID {:.4}", e.motion.mpjpe, e.motion.fid);
        rows.push(CodebookRow {
            k,
            fid: e.motion.fid,
            mpjpe: e.motion.mpjpe,
            pampjpe: e.motion.pampjpe,
            perplexity: e.perplexity,
            active_codes: e.active_codes,
        });
    }
    let write = |name: &str, text: String| -> Result<()> {
        let p = root.join(name);
        fs::write(&p, text).map_err(Error::io(&p))
    };
    write("codebook_study.csv", study_csv(&rows))?;
    write(
        "codebook_study.json",
        serde_json::to_string_pretty(&serde_json::json!({"rows": rows, "config": cfg.to_value()}))
            .expect("serializable")
            + "\n",
    )?;
    Ok(rows)
}

/// Parameter tensors whose bytes differ between two checkpoints.
pub fn changed_tensors(a: &Checkpoint, b: &Checkpoint) -> Vec<String> {
    let mut out = Vec::new();
    for (name, t) in b.params.iter() {
        match a.params.get(name) {
            Some(old) if old == t => {}
            _ => out.push(name.to_string()),
        }
    }
    out
}

pub fn stage_dir_name(path: &Path) -> String {
    path.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}
