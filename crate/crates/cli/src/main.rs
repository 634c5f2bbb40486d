use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use lslm_core::checkpoint::Checkpoint;
use lslm_core::config::{InstructScheme, PretrainScheme, RunConfig};
use lslm_core::metrics::EvalReport;
use lslm_core::motion::io::{read_motion, Split};
use lslm_core::motion::SynthConfig;
use lslm_core::pipeline::{
    evaluate_model, write_synthetic_corpus, Corpus, Prediction, PromptMode, SignModel, MANIFEST,
    MOTION_DIR,
};
use lslm_core::schemes::{self, RunDir};
use lslm_core::templates::user_prompt;
use lslm_core::tensor::gradcheck::run_suite;
use lslm_core::tensor::OpKind;
use serde::Serialize;

#[derive(Parser)]
#[command(
    name = "lslm",
    version,
    about = "Sign-language motion to text: tokenizer, alignment and language model"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic gesture corpus with a manifest.
    SynthData {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
        #[arg(long, default_value_t = 8)]
        gesture_vocab: usize,
        /// Inclusive range of gesture words per clip, as MIN,MAX.
        #[arg(long, default_value = "1,4")]
        words: String,
        #[arg(long)]
        out: PathBuf,
        /// Put every clip in the train split.
        #[arg(long)]
        no_split: bool,
        /// Overwrite an existing corpus in OUT.
        #[arg(long)]
        force: bool,
    },
    /// Stage 1: train the motion tokenizer.
    TrainTokenizer {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 2: alignment pretraining.
    Pretrain {
        #[arg(long, value_parser = ["mlp", "joint", "staged"])]
        scheme: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Stage 3: instruction tuning.
    Instruct {
        #[arg(long, value_parser = ["llm", "joint", "none"])]
        tune: Option<String>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train one tokenizer per codebook size and tabulate reconstruction quality.
    CodebookStudy {
        #[arg(long, value_delimiter = ',', default_value = "64,256,1024")]
        sizes: Vec<usize>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Re-render the table from saved tokenizers.
        #[arg(long)]
        no_train: bool,
    },
    /// Translate one motion file.
    Translate {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Motion header (`<id>.json`).
        #[arg(long)]
        motion: PathBuf,
        /// Instruction text; should contain <Motion_Placeholder>.
        #[arg(long)]
        instruction: Option<String>,
        #[arg(long, default_value_t = 32)]
        max_new_tokens: usize,
    },
    /// Score a checkpoint on a corpus split.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test", value_parser = ["train", "val", "test"])]
        split: String,
        /// Corpus directory; defaults to the one recorded in the checkpoint.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Instruction template id; defaults to the bare pretraining frame
        /// for pretraining checkpoints and template 0 otherwise.
        #[arg(long)]
        template: Option<usize>,
        /// Report path; defaults to `eval_<stage>_<split>.json` beside the checkpoint.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable op.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        trials: usize,
        /// Corrupt the backward rule of this op (negative control).
        #[arg(long)]
        fault: Option<String>,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn open(cfg: &RunConfig) -> Result<(Corpus, RunDir)> {
    let corpus = Corpus::load(&cfg.paths.data)?;
    Ok((corpus, RunDir::new(&cfg.paths.run)))
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn parse_range(s: &str) -> Result<(usize, usize)> {
    let (a, b) = s.split_once(',').context("--words expects MIN,MAX")?;
    let (a, b) = (a.trim().parse()?, b.trim().parse()?);
    if a == 0 || a > b {
        bail!(lslm_core::Error::Config(format!(
            "invalid --words range {s}"
        )));
    }
    Ok((a, b))
}

fn synth_data(
    seed: u64,
    samples: usize,
    gesture_vocab: usize,
    words: &str,
    out: &Path,
    no_split: bool,
    force: bool,
) -> Result<()> {
    let nonempty = out.is_dir() && fs::read_dir(out)?.next().is_some();
    if nonempty && !force {
        bail!(lslm_core::Error::Config(format!(
            "{} is not empty; pass --force to overwrite",
            out.display()
        )));
    }
    let cfg = SynthConfig {
        seed,
        gesture_vocab,
        samples,
        words_per_sample: parse_range(words)?,
    };
    if nonempty {
        let m = out.join(MOTION_DIR);
        if m.is_dir() {
            fs::remove_dir_all(&m)?;
        }
        let _ = fs::remove_file(out.join(MANIFEST));
    }
    let entries = write_synthetic_corpus(out, &cfg, !no_split)?;
    let count = |s| entries.iter().filter(|e| e.split == s).count();
    println!(
        "wrote {} clips to {} (train {}, val {}, test {})",
        entries.len(),
        out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

#[derive(Serialize)]
struct EvaluateOutput<'a> {
    checkpoint: String,
    stage: &'a str,
    split: &'a str,
    prompt: String,
    report: EvalReport,
    predictions: Vec<Prediction>,
}

fn evaluate(
    ckpt: &Path,
    split: &str,
    data: Option<PathBuf>,
    template: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let model = SignModel::from_checkpoint(&ck)?;
    let cfg: RunConfig =
        serde_json::from_value(ck.config.clone()).context("checkpoint config echo")?;
    let data = data.unwrap_or(cfg.paths.data.clone());
    let corpus = Corpus::load(&data)?;
    let split_v = Split::parse(split).expect("validated by clap");
    let entries = corpus.split(split_v);
    if entries.is_empty() {
        bail!(lslm_core::Error::Config(format!(
            "split {split} of {} is empty",
            data.display()
        )));
    }
    let mode = match template {
        Some(t) => PromptMode::Template(t),
        None if ck.stage.starts_with(schemes::PRETRAIN) => PromptMode::Pretrain,
        None => PromptMode::Template(schemes::EVAL_TEMPLATE),
    };
    let samples = model.coded(&entries)?;
    let (report, predictions) = evaluate_model(&model, &samples, mode, cfg.eval.max_new_tokens)?;
    let output = EvaluateOutput {
        checkpoint: ckpt.display().to_string(),
        stage: &ck.stage,
        split,
        prompt: format!("{mode:?}"),
        report,
        predictions,
    };
    let path = out.unwrap_or_else(|| {
        ckpt.parent()
            .unwrap_or(Path::new("."))
            .join(format!("eval_{}_{split}.json", ck.stage))
    });
    fs::write(&path, serde_json::to_string_pretty(&output)? + "\n")
        .with_context(|| path.display().to_string())?;
    print_json(&output.report)?;
    eprintln!("report written to {}", path.display());
    Ok(())
}

fn translate(
    ckpt: &Path,
    motion: &Path,
    instruction: Option<String>,
    max_new: usize,
) -> Result<()> {
    let model = SignModel::from_checkpoint(&Checkpoint::load(ckpt)?)?;
    let (_, seq) = read_motion(motion)?;
    let codes = model.codes(&seq)?;
    let text = match instruction {
        Some(text) => {
            let (prompt, wrapped) = user_prompt(&text);
            if wrapped {
                log::warn!(
                    "instruction has no <Motion_Placeholder>; appending the motion after it"
                );
            }
            model.decode_prompt(&codes, &prompt, max_new)?
        }
        None => model.translate_codes(&codes, PromptMode::Pretrain, max_new)?,
    };
    println!("{text}");
    Ok(())
}

fn gradcheck(seed: u64, trials: usize, fault: Option<String>) -> Result<()> {
    let fault = match fault {
        Some(name) => Some(OpKind::from_name(&name).with_context(|| format!("unknown op {name}"))?),
        None => None,
    };
    let report = run_suite(seed, trials, fault);
    for c in &report.checks {
        println!(
            "{:<20} trials {:>2}  max rel err {:.3e}  {}",
            c.op,
            c.trials,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        );
    }
    if !report.passed() {
        let failed: Vec<&str> = report
            .checks
            .iter()
            .filter(|c| !c.passed)
            .map(|c| c.op.as_str())
            .collect();
        bail!(lslm_core::Error::Numeric(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    println!(
        "all {} checks passed (tolerance {:.0e})",
        report.checks.len(),
        report.tolerance
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::SynthData {
            seed,
            samples,
            gesture_vocab,
            words,
            out,
            no_split,
            force,
        } => synth_data(seed, samples, gesture_vocab, &words, &out, no_split, force),
        Cmd::TrainTokenizer { config } => {
            let cfg = load_config(config.as_deref())?;
            let (corpus, run) = open(&cfg)?;
            let report = schemes::run_stage1(&cfg, &corpus, &run)?;
            print_json(&report.eval)
        }
        Cmd::Pretrain { scheme, config } => {
            let cfg = load_config(config.as_deref())?;
            let scheme = match scheme {
                Some(s) => PretrainScheme::parse(&s)?,
                None => cfg.scheme.pretrain,
            };
            let (corpus, run) = open(&cfg)?;
            let report = schemes::run_pretrain(&cfg, &corpus, &run, scheme)?;
            print_json(&report.records)
        }
        Cmd::Instruct { tune, config } => {
            let cfg = load_config(config.as_deref())?;
            let scheme = match tune {
                Some(s) => InstructScheme::parse(&s)?,
                None => cfg.scheme.instruct,
            };
            let (corpus, run) = open(&cfg)?;
            let report = schemes::run_instruct(&cfg, &corpus, &run, scheme)?;
            print_json(&report.records)
        }
        Cmd::CodebookStudy {
            sizes,
            config,
            no_train,
        } => {
            let cfg = load_config(config.as_deref())?;
            let (corpus, run) = open(&cfg)?;
            let rows = schemes::codebook_study(&cfg, &corpus, &run, &sizes, !no_train)?;
            print!("{}", schemes::study_csv(&rows));
            Ok(())
        }
        Cmd::Translate {
            checkpoint,
            motion,
            instruction,
            max_new_tokens,
        } => translate(&checkpoint, &motion, instruction, max_new_tokens),
        Cmd::Evaluate {
            checkpoint,
            split,
            data,
            template,
            out,
        } => evaluate(&checkpoint, &split, data, template, out),
        Cmd::Gradcheck {
            seed,
            trials,
            fault,
        } => gradcheck(seed, trials, fault),
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LSLM_THREADS") {
        let n: usize = v.parse().with_context(|| format!("LSLM_THREADS={v}"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()?;
    }
    Ok(())
}

fn exit_code(e: &anyhow::Error) -> u8 {
    e.chain()
        .find_map(|c| c.downcast_ref::<lslm_core::Error>())
        .map_or(1, |e| e.exit_code() as u8)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|_| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
