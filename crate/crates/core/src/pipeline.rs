//! Corpus loading, the assembled translation model, and evaluation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{self, TextVocab};
use crate::error::{Error, Result};
use crate::fusion::{fuse, project_graph, prompt_ids, AlignmentMlp};
use crate::lm::{LanguageModel, LmConfig};
use crate::metrics::{
    evaluate_corpus, fid, mpjpe, pampjpe, EvalPair, EvalReport, MotionEvalReport,
};
use crate::motion::io::{
    read_manifest, read_motion, write_manifest, write_motion, ManifestEntry, Split,
};
use crate::motion::{
    extract_features, features_to_joints, synth_corpus, FeatureStats, MotionSequence, Skeleton,
    SynthConfig,
};
use crate::templates::{TemplateBank, TemplateRef};
use crate::tensor::{Bound, Graph, Tensor};
use crate::vq::{Tokenizer, TokenizerConfig};

pub const MANIFEST: &str = "manifest.jsonl";
pub const MOTION_DIR: &str = "motions";

#[derive(Clone, Debug)]
pub struct CorpusEntry {
    pub id: String,
    pub text: String,
    pub split: Split,
    /// Raw (unnormalized) features.
    pub motion: MotionSequence,
}

#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Vec<ManifestEntry>,
    pub entries: Vec<CorpusEntry>,
}

impl Corpus {
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST);
        if !mpath.is_file() {
            return Err(Error::Config(format!(
                "no corpus manifest at {}",
                mpath.display()
            )));
        }
        let manifest = read_manifest(&mpath)?;
        let mut entries = Vec::with_capacity(manifest.len());
        for m in &manifest {
            let (_, motion) = read_motion(&dir.join(&m.motion_path))?;
            if motion.is_normalized() {
                return Err(Error::invalid(format!(
                    "corpus clip {} is stored normalized",
                    m.id
                )));
            }
            entries.push(CorpusEntry {
                id: m.id.clone(),
                text: m.text.clone(),
                split: m.split,
                motion,
            });
        }
        Ok(Corpus { manifest, entries })
    }

    pub fn split(&self, split: Split) -> Vec<&CorpusEntry> {
        self.entries.iter().filter(|e| e.split == split).collect()
    }
}

/// Synthesizes a corpus into `dir`: feature files under `motions/` and a
/// manifest. With `split` set (and at least ten samples) the manifest gets a
/// seeded 80/10/10 split; otherwise every entry is train.
pub fn write_synthetic_corpus(
    dir: &Path,
    cfg: &SynthConfig,
    split: bool,
) -> Result<Vec<ManifestEntry>> {
    let samples = synth_corpus(cfg)?;
    let skel = Skeleton::standard();
    let mdir = dir.join(MOTION_DIR);
    fs::create_dir_all(&mdir).map_err(Error::io(&mdir))?;
    let width = samples.len().max(1).to_string().len();
    let mut entries = Vec::with_capacity(samples.len());
    for (i, s) in samples.iter().enumerate() {
        let id = format!("clip_{i:0width$}");
        let seq = extract_features(&skel, &s.clip)?;
        write_motion(&mdir, &id, &seq)?;
        entries.push(ManifestEntry {
            id: id.clone(),
            motion_path: PathBuf::from(MOTION_DIR).join(format!("{id}.json")),
            text: s.text.clone(),
            split: Split::Train,
        });
    }
    if split && entries.len() >= 10 {
        dataset::split(&mut entries, cfg.seed)?;
    }
    write_manifest(&dir.join(MANIFEST), &entries)?;
    Ok(entries)
}

/// Model shapes stored alongside the weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub tokenizer: TokenizerConfig,
    pub lm: LmConfig,
}

/// Prompt used when decoding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PromptMode {
    Pretrain,
    Template(usize),
}

impl PromptMode {
    fn template(self) -> TemplateRef {
        match self {
            PromptMode::Pretrain => TemplateRef::Pretrain,
            PromptMode::Template(i) => TemplateRef::Instruction(i),
        }
    }
}

/// Quantized code vectors and the caption of one clip.
#[derive(Clone, Debug, PartialEq)]
pub struct CodedSample {
    pub id: String,
    pub codes: Tensor<f32>,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub hypothesis: String,
    pub reference: String,
}

#[derive(Clone, Debug)]
pub struct SignModel {
    pub tokenizer: Tokenizer,
    pub stats: FeatureStats,
    pub mlp: AlignmentMlp,
    pub lm: LanguageModel,
    pub vocab: TextVocab,
    pub bank: TemplateBank,
}

pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.json";
pub const MODEL_FILE: &str = "model.json";
pub const TEMPLATES_FILE: &str = "templates.json";

/// Prompt texts the vocabulary must cover: every rendered template.
pub fn template_texts(bank: &TemplateBank) -> Vec<String> {
    let mut out = vec![
        bank.render(TemplateRef::Pretrain, "")
            .expect("pretrain frame")
            .0,
    ];
    for t in &bank.instructions {
        out.push(
            bank.render(TemplateRef::Instruction(t.id), "")
                .expect("valid id")
                .0,
        );
    }
    out
}

pub fn stats_from_json(text: &str) -> Result<FeatureStats> {
    serde_json::from_str(text).map_err(|e| Error::invalid(format!("feature statistics: {e}")))
}

impl SignModel {
    /// Fresh projection and backbone on top of a trained tokenizer.
    pub fn new(
        tokenizer: Tokenizer,
        stats: FeatureStats,
        vocab: TextVocab,
        bank: TemplateBank,
        mut lm_config: LmConfig,
        seed: u64,
    ) -> Result<Self> {
        lm_config.vocab_size = vocab.len();
        let lm = LanguageModel::new(lm_config, seed)?;
        let mlp = AlignmentMlp::new(
            tokenizer.config.code_dim,
            lm.config.d_model,
            seed.wrapping_add(1),
        )?;
        Ok(SignModel {
            tokenizer,
            stats,
            mlp,
            lm,
            vocab,
            bank,
        })
    }

    /// Normalizes raw features when needed and returns the code vectors.
    pub fn codes(&self, motion: &MotionSequence) -> Result<Tensor<f32>> {
        let seq = match &motion.stats_id {
            None => self.stats.normalize(motion)?,
            Some(id) if *id == self.stats.id => motion.clone(),
            Some(id) => {
                return Err(Error::invalid(format!(
                    "motion normalized with unknown statistics {id}"
                )))
            }
        };
        Ok(self.tokenizer.tokenize(&seq)?.vectors)
    }

    pub fn coded(&self, entries: &[&CorpusEntry]) -> Result<Vec<CodedSample>> {
        entries
            .par_iter()
            .map(|e| {
                Ok(CodedSample {
                    id: e.id.clone(),
                    codes: self.codes(&e.motion)?,
                    text: e.text.clone(),
                })
            })
            .collect()
    }

    /// Greedy decode for a rendered prompt text containing the MOTION token.
    pub fn decode_prompt(
        &self,
        codes: &Tensor<f32>,
        prompt: &str,
        max_new: usize,
    ) -> Result<String> {
        let ids = prompt_ids(&self.vocab, prompt);
        let prefix = {
            let mut g = Graph::new();
            let mb = Bound::new(&mut g, &self.mlp.params, |_| false);
            let lb = Bound::new(&mut g, &self.lm.params, |_| false);
            let z = g.constant(codes.clone());
            let e = project_graph(&mut g, &mb, z)?;
            let f = fuse(&mut g, &lb, &ids, e)?;
            g.value(f.x).clone()
        };
        let out = self.lm.generate(&prefix, max_new)?;
        Ok(self.vocab.decode(&out))
    }

    pub fn translate_codes(
        &self,
        codes: &Tensor<f32>,
        mode: PromptMode,
        max_new: usize,
    ) -> Result<String> {
        let (prompt, _) = self.bank.render(mode.template(), "")?;
        self.decode_prompt(codes, &prompt, max_new)
    }

    pub fn predict(
        &self,
        samples: &[CodedSample],
        mode: PromptMode,
        max_new: usize,
    ) -> Result<Vec<Prediction>> {
        samples
            .par_iter()
            .map(|s| {
                Ok(Prediction {
                    id: s.id.clone(),
                    hypothesis: self.translate_codes(&s.codes, mode, max_new)?,
                    reference: s.text.clone(),
                })
            })
            .collect()
    }

    pub fn to_checkpoint(
        &self,
        stage: &str,
        freeze: BTreeMap<String, bool>,
        config: serde_json::Value,
    ) -> Checkpoint {
        let mut params = self.tokenizer.params.clone();
        params.merge(&self.mlp.params);
        params.merge(&self.lm.params);
        let spec = ModelSpec {
            tokenizer: self.tokenizer.config.clone(),
            lm: self.lm.config.clone(),
        };
        let mut ck = Checkpoint::new(stage, params);
        ck.freeze = freeze;
        ck.config = config;
        ck.files.insert(VOCAB_FILE.into(), self.vocab.to_json());
        ck.files.insert(
            STATS_FILE.into(),
            serde_json::to_string(&self.stats).expect("serializable") + "\n",
        );
        ck.files.insert(
            MODEL_FILE.into(),
            serde_json::to_string_pretty(&spec).expect("serializable") + "\n",
        );
        ck.files.insert(TEMPLATES_FILE.into(), self.bank.to_json());
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let spec: ModelSpec = serde_json::from_str(ck.file(MODEL_FILE)?)
            .map_err(|e| Error::invalid(format!("model spec: {e}")))?;
        let tokenizer =
            Tokenizer::from_params(spec.tokenizer.clone(), ck.params.group("tokenizer"))?;
        let lm = LanguageModel::from_params(spec.lm.clone(), ck.params.group("llm"))?;
        let mlp = AlignmentMlp::from_params(
            spec.tokenizer.code_dim,
            spec.lm.d_model,
            ck.params.group("mlp"),
        )?;
        Ok(SignModel {
            tokenizer,
            stats: stats_from_json(ck.file(STATS_FILE)?)?,
            mlp,
            lm,
            vocab: TextVocab::from_json(ck.file(VOCAB_FILE)?)?,
            bank: TemplateBank::from_json(ck.file(TEMPLATES_FILE)?)?,
        })
    }
}

/// Greedy-decodes every sample and scores the corpus.
pub fn evaluate_model(
    model: &SignModel,
    samples: &[CodedSample],
    mode: PromptMode,
    max_new: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    let preds = model.predict(samples, mode, max_new)?;
    let pairs: Vec<EvalPair> = preds
        .iter()
        .map(|p| EvalPair::new(p.id.clone(), &p.hypothesis, &p.reference))
        .collect();
    Ok((evaluate_corpus(&pairs), preds))
}

/// Reconstruction quality of a tokenizer plus the perplexity of its code usage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenizerEval {
    pub motion: MotionEvalReport,
    pub perplexity: f64,
    pub active_codes: usize,
}

pub const TOKENS_FILE: &str = "tokens.jsonl";

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenRecord {
    pub id: String,
    pub indices: Vec<usize>,
}

/// Code indices of every entry, one JSON object per line, in corpus order.
pub fn token_dump(
    tok: &Tokenizer,
    stats: &FeatureStats,
    entries: &[CorpusEntry],
) -> Result<String> {
    let lines: Vec<String> = entries
        .par_iter()
        .map(|e| {
            let clip = tok.tokenize(&stats.normalize(&e.motion)?)?;
            let rec = TokenRecord {
                id: e.id.clone(),
                indices: clip.indices,
            };
            Ok(serde_json::to_string(&rec).expect("serializable"))
        })
        .collect::<Result<_>>()?;
    Ok(lines.into_iter().map(|l| l + "\n").collect())
}

/// Time-mean of pre-quantization latents.
fn pooled(tok: &Tokenizer, seq: &MotionSequence) -> Result<Vec<f64>> {
    let z = tok.encode(seq)?;
    let mut out = vec![0.0; z.cols()];
    for r in 0..z.rows() {
        for (o, &v) in out.iter_mut().zip(z.row(r)) {
            *o += v as f64;
        }
    }
    Ok(out.into_iter().map(|v| v / z.rows() as f64).collect())
}

pub fn evaluate_tokenizer(
    tok: &Tokenizer,
    stats: &FeatureStats,
    clips: &[&MotionSequence],
) -> Result<TokenizerEval> {
    if clips.is_empty() {
        return Err(Error::invalid("no clips to evaluate"));
    }
    let skel = Skeleton::standard();
    struct PerClip {
        mpjpe: f64,
        pampjpe: f64,
        real: Vec<f64>,
        recon: Vec<f64>,
        codes: Vec<usize>,
    }
    let per: Vec<PerClip> = clips
        .par_iter()
        .map(|raw| {
            let seq = stats.normalize(raw)?;
            let clip = tok.tokenize(&seq)?;
            let features = tok.decode_vectors(&clip.vectors, seq.rows())?;
            let mut rec = MotionSequence::new(features, seq.fps)?;
            rec.stats_id = seq.stats_id.clone();
            let gt = features_to_joints(&skel, raw, None)?;
            let pred = features_to_joints(&skel, &rec, Some(stats))?;
            Ok(PerClip {
                mpjpe: mpjpe(&pred, &gt)?,
                pampjpe: pampjpe(&pred, &gt)?,
                real: pooled(tok, &seq)?,
                recon: pooled(tok, &rec)?,
                codes: clip.indices,
            })
        })
        .collect::<Result<_>>()?;
    let n = per.len() as f64;
    let real: Vec<Vec<f64>> = per.iter().map(|p| p.real.clone()).collect();
    let recon: Vec<Vec<f64>> = per.iter().map(|p| p.recon.clone()).collect();
    let f = fid(&real, &recon)?;
    let mut counts = vec![0usize; tok.config.codebook_size];
    for p in &per {
        for &c in &p.codes {
            counts[c] += 1;
        }
    }
    let total: usize = counts.iter().sum();
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            -q * q.ln()
        })
        .sum();
    Ok(TokenizerEval {
        motion: MotionEvalReport {
            mpjpe: per.iter().map(|p| p.mpjpe).sum::<f64>() / n,
            pampjpe: per.iter().map(|p| p.pampjpe).sum::<f64>() / n,
            fid: f.value,
            clips: per.len(),
            fid_rank_deficient: f.rank_deficient,
        },
        perplexity: entropy.exp(),
        active_codes: counts.iter().filter(|&&c| c > 0).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_corpus(dir: &Path, n: usize) -> Vec<ManifestEntry> {
        write_synthetic_corpus(
            dir,
            &SynthConfig {
                seed: 1,
                gesture_vocab: 3,
                samples: n,
                words_per_sample: (1, 2),
            },
            true,
        )
        .unwrap()
    }

    fn tiny_model(corpus: &Corpus) -> SignModel {
        let train: Vec<&MotionSequence> = corpus
            .split(Split::Train)
            .iter()
            .map(|e| &e.motion)
            .collect();
        let stats = FeatureStats::compute(train.iter().copied()).unwrap();
        let tok = Tokenizer::new(
            TokenizerConfig {
                codebook_size: 8,
                code_dim: 4,
                width: 8,
                ..Default::default()
            },
            0,
        )
        .unwrap();
        let bank = TemplateBank::builtin();
        let vocab = dataset::build_vocab(&corpus.manifest, &template_texts(&bank), 1).unwrap();
        let lm = LmConfig {
            d_model: 8,
            n_layers: 1,
            n_heads: 2,
            ..Default::default()
        };
        SignModel::new(tok, stats, vocab, bank, lm, 0).unwrap()
    }

    #[test]
    fn corpus_round_trip_and_splits() {
        let dir = tempfile::tempdir().unwrap();
        let entries = tiny_corpus(dir.path(), 20);
        let c = Corpus::load(dir.path()).unwrap();
        assert_eq!(c.entries.len(), 20);
        assert_eq!(c.manifest, entries);
        assert_eq!(c.split(Split::Val).len(), 2);
        assert_eq!(c.split(Split::Test).len(), 2);
        assert!(Corpus::load(&dir.path().join("missing")).is_err());
    }

    #[test]
    fn checkpoint_round_trip_keeps_predictions() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 12);
        let c = Corpus::load(dir.path()).unwrap();
        let m = tiny_model(&c);
        let samples = m.coded(&c.split(Split::Train)[..3]).unwrap();
        let before = m.predict(&samples, PromptMode::Pretrain, 4).unwrap();
        let ck = m.to_checkpoint("pretrain", BTreeMap::new(), serde_json::Value::Null);
        ck.save(&dir.path().join("ck")).unwrap();
        let back =
            SignModel::from_checkpoint(&Checkpoint::load(&dir.path().join("ck")).unwrap()).unwrap();
        assert_eq!(
            back.predict(&samples, PromptMode::Pretrain, 4).unwrap(),
            before
        );
        assert_eq!(back.vocab, m.vocab);
    }

    #[test]
    fn vocabulary_covers_template_words() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 12);
        let m = tiny_model(&Corpus::load(dir.path()).unwrap());
        for t in template_texts(&m.bank) {
            assert!(m.vocab.encode(&t).iter().all(|&i| i != dataset::UNK), "{t}");
        }
    }

    #[test]
    fn tokenizer_eval_fields_are_sane() {
        let dir = tempfile::tempdir().unwrap();
        tiny_corpus(dir.path(), 12);
        let c = Corpus::load(dir.path()).unwrap();
        let m = tiny_model(&c);
        let clips: Vec<&MotionSequence> = c.entries.iter().map(|e| &e.motion).collect();
        let r = evaluate_tokenizer(&m.tokenizer, &m.stats, &clips).unwrap();
        assert!(r.motion.pampjpe <= r.motion.mpjpe + 1e-9);
        assert!(r.perplexity >= 1.0 && r.perplexity <= 8.0 + 1e-9);
        assert!(r.motion.fid >= 0.0);
    }
}
