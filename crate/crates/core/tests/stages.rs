use std::collections::BTreeSet;
use std::path::Path;

use lslm_core::checkpoint::Checkpoint;
use lslm_core::config::{InstructScheme, PretrainScheme, RunConfig};
use lslm_core::motion::io::Split;
use lslm_core::motion::SynthConfig;
use lslm_core::pipeline::{write_synthetic_corpus, Corpus, SignModel};
use lslm_core::schemes::{self, load_tokenizer, FreezeMap, RunDir};
use lslm_core::vq::TokenizerConfig;
use lslm_core::Error;

fn corpus(dir: &Path, samples: usize, seed: u64) -> Corpus {
    let data = dir.join("data");
    let cfg = SynthConfig {
        seed,
        gesture_vocab: 5,
        samples,
        words_per_sample: (1, 3),
    };
    write_synthetic_corpus(&data, &cfg, true).unwrap();
    Corpus::load(&data).unwrap()
}

fn tiny() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.seed = 3;
    cfg.tokenizer = TokenizerConfig {
        codebook_size: 16,
        code_dim: 8,
        width: 12,
        ..TokenizerConfig::default()
    };
    cfg.tokenizer_train.steps = 20;
    cfg.lm.d_model = 16;
    cfg.lm.n_layers = 1;
    cfg.lm.n_heads = 2;
    cfg.scheme.pretrain_steps = 3;
    cfg.scheme.instruct_steps = 3;
    cfg.eval.max_new_tokens = 4;
    cfg
}

#[test]
fn stages_enforce_their_order() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 20, 1);
    let cfg = tiny();
    let run = RunDir::new(dir.path().join("run"));
    let e = schemes::run_pretrain(&cfg, &c, &run, PretrainScheme::Joint).unwrap_err();
    assert!(
        matches!(e, Error::StageOrder(ref m) if m.contains("tokenizer")),
        "{e}"
    );
    let e = schemes::run_instruct(&cfg, &c, &run, InstructScheme::Llm).unwrap_err();
    assert!(
        matches!(e, Error::StageOrder(ref m) if m.contains("pretrain")),
        "{e}"
    );
    schemes::run_stage1(&cfg, &c, &run).unwrap();
    assert_eq!(
        schemes::run_instruct(&cfg, &c, &run, InstructScheme::Llm)
            .unwrap_err()
            .exit_code(),
        3
    );
}

#[test]
fn staged_scheme_writes_both_phases_and_logs_full_rows() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 20, 2);
    let cfg = tiny();
    let run = RunDir::new(dir.path().join("run"));
    schemes::run_stage1(&cfg, &c, &run).unwrap();
    schemes::run_pretrain(&cfg, &c, &run, PretrainScheme::Staged).unwrap();
    for stage in [schemes::PHASE_A, schemes::PHASE_B, schemes::PRETRAIN] {
        assert!(Checkpoint::exists(&run.stage(stage)), "{stage}");
    }
    let a = Checkpoint::load(&run.stage(schemes::PHASE_A)).unwrap();
    let fa = FreezeMap::from_map(&a.freeze).unwrap();
    assert_eq!(fa.trainable(), vec!["mlp"]);
    let text = std::fs::read_to_string(run.root.join(schemes::METRICS_FILE)).unwrap();
    let keys = [
        "stage", "step", "split", "bleu1", "bleu4", "rougeL", "cider", "wer", "ins", "del", "sub",
    ];
    let mut stages = Vec::new();
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for k in keys {
            assert!(!v[k].is_null(), "{k} missing in {line}");
        }
        stages.push(v["stage"].as_str().unwrap().to_string());
    }
    assert_eq!(
        stages,
        vec![schemes::PRETRAIN, schemes::PHASE_A, schemes::PHASE_B]
    );
    assert!(run.root.join(schemes::CONFIG_FILE).is_file());
}

#[test]
fn instruct_grid_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 20, 3);
    let cfg = tiny();
    let base = RunDir::new(dir.path().join("base"));
    schemes::run_stage1(&cfg, &c, &base).unwrap();
    let mut rows = Vec::new();
    for p in [PretrainScheme::Mlp, PretrainScheme::Joint] {
        for i in [InstructScheme::Llm, InstructScheme::Joint] {
            let run = RunDir::new(dir.path().join(format!("{}_{}", p.name(), i.name())));
            std::fs::create_dir_all(run.stage(schemes::TOKENIZER)).unwrap();
            for f in std::fs::read_dir(base.stage(schemes::TOKENIZER)).unwrap() {
                let f = f.unwrap();
                std::fs::copy(f.path(), run.stage(schemes::TOKENIZER).join(f.file_name())).unwrap();
            }
            schemes::run_pretrain(&cfg, &c, &run, p).unwrap();
            let r = schemes::run_instruct(&cfg, &c, &run, i).unwrap();
            let last = r.records.last().unwrap().clone();
            assert_eq!(last.stage, schemes::INSTRUCT);
            rows.push((p.name(), i.name(), last));
        }
    }
    assert_eq!(rows.len(), 4);
    let cells: BTreeSet<(&str, &str)> = rows.iter().map(|(p, i, _)| (*p, *i)).collect();
    assert_eq!(cells.len(), 4);
}

#[test]
fn stage_one_tokens_are_stable_after_reload() {
    let dir = tempfile::tempdir().unwrap();
    let c = corpus(dir.path(), 12, 4);
    let cfg = tiny();
    let run = RunDir::new(dir.path().join("run"));
    schemes::run_stage1(&cfg, &c, &run).unwrap();
    let ck = Checkpoint::load(&run.stage(schemes::TOKENIZER)).unwrap();
    let (tok, stats) = load_tokenizer(&ck).unwrap();
    let (tok2, _) =
        load_tokenizer(&Checkpoint::load(&run.stage(schemes::TOKENIZER)).unwrap()).unwrap();
    let clip = stats.normalize(&c.split(Split::Train)[0].motion).unwrap();
    assert_eq!(
        tok.tokenize(&clip).unwrap().indices,
        tok2.tokenize(&clip).unwrap().indices
    );
    assert!(FreezeMap::from_map(&ck.freeze)
        .unwrap()
        .is_frozen("tokenizer"));

    let dump = std::fs::read_to_string(run.root.join(lslm_core::pipeline::TOKENS_FILE)).unwrap();
    assert_eq!(dump.lines().count(), c.entries.len());
    let first: lslm_core::pipeline::TokenRecord =
        serde_json::from_str(dump.lines().next().unwrap()).unwrap();
    let e0 = &c.entries[0];
    assert_eq!(first.id, e0.id);
    assert_eq!(
        first.indices,
        tok.tokenize(&stats.normalize(&e0.motion).unwrap())
            .unwrap()
            .indices
    );
}

#[test]
fn joint_pretraining_improves_validation_bleu() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let synth = SynthConfig {
        seed: 9,
        gesture_vocab: 4,
        samples: 120,
        words_per_sample: (1, 2),
    };
    write_synthetic_corpus(&data, &synth, true).unwrap();
    let c = Corpus::load(&data).unwrap();
    let mut cfg = RunConfig::default();
    cfg.tokenizer = TokenizerConfig {
        codebook_size: 32,
        code_dim: 16,
        width: 16,
        ..TokenizerConfig::default()
    };
    cfg.tokenizer_train.steps = 200;
    cfg.lm.d_model = 32;
    cfg.lm.n_layers = 1;
    cfg.lm.n_heads = 2;
    cfg.scheme.pretrain_steps = 300;
    cfg.scheme.mlp_lr = 2e-3;
    cfg.scheme.llm_lr = 1e-3;
    cfg.eval.max_new_tokens = 6;
    let run = RunDir::new(dir.path().join("run"));
    schemes::run_stage1(&cfg, &c, &run).unwrap();
    let r = schemes::run_pretrain(&cfg, &c, &run, PretrainScheme::Joint).unwrap();
    let (before, after) = (&r.records[0], r.records.last().unwrap());
    assert_eq!((before.step, after.step), (0, 300));
    assert!(
        after.bleu1 > before.bleu1,
        "{} -> {}",
        before.bleu1,
        after.bleu1
    );
    let model =
        SignModel::from_checkpoint(&Checkpoint::load(&run.stage(schemes::PRETRAIN)).unwrap())
            .unwrap();
    assert_eq!(model.lm.config.d_model, 32);
}
