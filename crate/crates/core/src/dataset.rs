//! Splitting, word vocabulary and padded batches.

use std::collections::{BTreeMap, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::io::{ManifestEntry, Split};
use crate::motion::{MotionSequence, FEATURE_DIM};
use crate::tensor::Tensor;

pub const MAX_TOKENS: usize = 250;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const MOTION: usize = 4;
const SPECIALS: [&str; 5] = ["<pad>", "<bos>", "<eos>", "<unk>", "<motion>"];

/// Deterministic permutation of `0..n` for a given seed and epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

/// Assigns 80/10/10 train/val/test by a seeded shuffle. Validation and test
/// get `n / 10` entries each; the remainder goes to train.
pub fn split(entries: &mut [ManifestEntry], seed: u64) -> Result<()> {
    let n = entries.len();
    if n < 10 {
        return Err(Error::invalid(format!(
            "need at least 10 entries to split, got {n}"
        )));
    }
    let tenth = n / 10;
    for (rank, &i) in epoch_order(n, seed, 0).iter().enumerate() {
        entries[i].split = if rank < tenth {
            Split::Val
        } else if rank < 2 * tenth {
            Split::Test
        } else {
            Split::Train
        };
    }
    Ok(())
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

/// Word-level vocabulary with five reserved ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TextVocab {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    specials: BTreeMap<String, usize>,
    tokens: BTreeMap<String, usize>,
}

impl TextVocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        TextVocab { tokens, ids }
    }

    /// Words occurring at least `min_count` times, sorted alphabetically
    /// after the specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize) -> Result<Self> {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        let mut any = false;
        for t in texts {
            any = true;
            for w in tokenize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        if !any {
            return Err(Error::invalid("cannot build a vocabulary from no text"));
        }
        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        tokens.extend(
            counts
                .into_iter()
                .filter(|(w, c)| *c >= min_count.max(1) && !SPECIALS.contains(&w.as_str()))
                .map(|(w, _)| w),
        );
        Ok(Self::from_tokens(tokens))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        self.ids.get(&word.to_lowercase()).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins non-special tokens with spaces; unknown words render as `<unk>`.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != BOS && i != EOS && i != MOTION)
            .filter_map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_json(&self) -> String {
        let file = VocabFile {
            specials: SPECIALS
                .iter()
                .enumerate()
                .map(|(i, s)| (s.to_string(), i))
                .collect(),
            tokens: self
                .tokens
                .iter()
                .enumerate()
                .skip(SPECIALS.len())
                .map(|(i, t)| (t.clone(), i))
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("serializable") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: VocabFile =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("vocab: {e}")))?;
        for (i, s) in SPECIALS.iter().enumerate() {
            if file.specials.get(*s) != Some(&i) {
                return Err(Error::Config(format!(
                    "vocab: special {s} must have id {i}"
                )));
            }
        }
        let n = SPECIALS.len() + file.tokens.len();
        let mut tokens = vec![String::new(); n];
        for (i, s) in SPECIALS.iter().enumerate() {
            tokens[i] = s.to_string();
        }
        for (t, &i) in &file.tokens {
            if i < SPECIALS.len() || i >= n || !tokens[i].is_empty() {
                return Err(Error::Config(format!("vocab: id {i} for {t} is not dense")));
            }
            tokens[i] = t.clone();
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Vocabulary from the train split's captions plus any fixed prompt text.
pub fn build_vocab(
    entries: &[ManifestEntry],
    prompt_texts: &[String],
    min_count: usize,
) -> Result<TextVocab> {
    let train: Vec<&str> = entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .map(|e| e.text.as_str())
        .collect();
    if train.is_empty() {
        return Err(Error::invalid("train split is empty"));
    }
    TextVocab::build(
        train
            .into_iter()
            .chain(prompt_texts.iter().map(String::as_str)),
        min_count,
    )
}

/// One loaded sample.
#[derive(Clone, Debug)]
pub struct Sample {
    pub id: String,
    pub motion: MotionSequence,
    pub text: String,
}

#[derive(Clone, Copy, Debug)]
pub struct BatchConfig {
    pub batch_size: usize,
    pub seed: u64,
    pub epoch: u64,
    /// Tokenizer downsampling factor; sets how many prompt rows a clip fills.
    pub downsample: usize,
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub ids: Vec<String>,
    /// `[batch, max_frames, 623]`, zero beyond each clip's length.
    pub motion: Tensor<f32>,
    pub frame_mask: Vec<Vec<bool>>,
    pub prompt_ids: Vec<Vec<usize>>,
    /// Caption ids followed by EOS, padded with PAD.
    pub target_ids: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<bool>>,
}

#[derive(Clone, Debug)]
pub struct EpochBatches {
    pub batches: Vec<Batch>,
    pub skipped: usize,
}

/// Length of the backbone input once the motion placeholder expands to
/// `motion_tokens` rows: BOS, prompt, caption and EOS.
pub fn fused_length(prompt_len: usize, motion_tokens: usize, caption_len: usize) -> usize {
    1 + prompt_len - 1 + motion_tokens + caption_len + 1
}

pub fn iterate_batches(
    samples: &[Sample],
    vocab: &TextVocab,
    prompt: &str,
    cfg: BatchConfig,
) -> EpochBatches {
    let prompt_ids = vocab.encode(prompt);
    let mut kept = Vec::new();
    let mut skipped = 0;
    for i in epoch_order(samples.len(), cfg.seed, cfg.epoch) {
        let s = &samples[i];
        let tokens = s.motion.rows().div_ceil(cfg.downsample.max(1));
        if fused_length(prompt_ids.len(), tokens, tokenize(&s.text).len()) > MAX_TOKENS {
            skipped += 1;
            continue;
        }
        kept.push(i);
    }
    if skipped > 0 {
        log::warn!("skipped {skipped} over-length samples (limit {MAX_TOKENS} tokens)");
    }
    let batches = kept
        .chunks(cfg.batch_size.max(1))
        .map(|chunk| {
            let frames = chunk
                .iter()
                .map(|&i| samples[i].motion.rows())
                .max()
                .unwrap_or(0);
            let targets: Vec<Vec<usize>> = chunk
                .iter()
                .map(|&i| {
                    let mut t = vocab.encode(&samples[i].text);
                    t.push(EOS);
                    t
                })
                .collect();
            let tlen = targets.iter().map(Vec::len).max().unwrap_or(0);
            let mut motion = Tensor::zeros([chunk.len(), frames, FEATURE_DIM]);
            let mut frame_mask = Vec::new();
            for (b, &i) in chunk.iter().enumerate() {
                let src = samples[i].motion.features.data();
                let off = b * frames * FEATURE_DIM;
                motion.data_mut()[off..off + src.len()].copy_from_slice(src);
                let rows = samples[i].motion.rows();
                frame_mask.push((0..frames).map(|t| t < rows).collect());
            }
            Batch {
                ids: chunk.iter().map(|&i| samples[i].id.clone()).collect(),
                motion,
                frame_mask,
                prompt_ids: vec![prompt_ids.clone(); chunk.len()],
                target_mask: targets
                    .iter()
                    .map(|t| (0..tlen).map(|k| k < t.len()).collect())
                    .collect(),
                target_ids: targets
                    .into_iter()
                    .map(|mut t| {
                        t.resize(tlen, PAD);
                        t
                    })
                    .collect(),
            }
        })
        .collect();
    EpochBatches { batches, skipped }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn entries(n: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry {
                id: format!("s{i}"),
                motion_path: PathBuf::from(format!("{i}.json")),
                text: format!("word{} shared", i % 7),
                split: Split::Train,
            })
            .collect()
    }

    fn sample(id: &str, rows: usize, text: &str) -> Sample {
        Sample {
            id: id.into(),
            motion: MotionSequence::new(Tensor::full([rows, FEATURE_DIM], 1.0), 20.0).unwrap(),
            text: text.into(),
        }
    }

    fn cfg(batch_size: usize) -> BatchConfig {
        BatchConfig {
            batch_size,
            seed: 1,
            epoch: 0,
            downsample: 4,
        }
    }

    #[test]
    fn split_proportions() {
        let mut e = entries(1000);
        split(&mut e, 3).unwrap();
        let count = |s| e.iter().filter(|x| x.split == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (800, 100, 100)
        );
        let mut e = entries(37);
        split(&mut e, 3).unwrap();
        let count = |s| e.iter().filter(|x| x.split == s).count();
        assert_eq!(
            (count(Split::Train), count(Split::Val), count(Split::Test)),
            (31, 3, 3)
        );
    }

    #[test]
    fn split_is_deterministic() {
        let (mut a, mut b) = (entries(50), entries(50));
        split(&mut a, 9).unwrap();
        split(&mut b, 9).unwrap();
        assert_eq!(a, b);
        assert!(split(&mut entries(9), 0).is_err());
    }

    #[test]
    fn vocab_from_two_captions() {
        let v = TextVocab::build(["hello world", "hello"], 1).unwrap();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("Hello"), 5);
        assert_eq!(v.id("world"), 6);
        assert_eq!(v.id("unseen"), UNK);
        assert_eq!(v.encode("<MOTION> hello"), vec![MOTION, 5]);
        assert_eq!(v.decode(&[BOS, 5, 6, EOS]), "hello world");
    }

    #[test]
    fn min_count_filters() {
        let v = TextVocab::build(["a a b", "a c"], 2).unwrap();
        assert_eq!(v.len(), 6);
        assert_eq!(v.id("b"), UNK);
    }

    #[test]
    fn vocab_uses_train_split_only() {
        let mut e = entries(20);
        e[0].split = Split::Test;
        e[0].text = "secret".into();
        let v = build_vocab(&e, &[], 1).unwrap();
        assert_eq!(v.id("secret"), UNK);
        for x in &mut e {
            x.split = Split::Val;
        }
        assert!(build_vocab(&e, &[], 1).is_err());
    }

    #[test]
    fn vocab_rebuild_and_json_are_stable() {
        let texts = ["the cat sat", "on the mat", "cat"];
        let a = TextVocab::build(texts, 1).unwrap();
        let b = TextVocab::build(texts, 1).unwrap();
        assert_eq!(a, b);
        let back = TextVocab::from_json(&a.to_json()).unwrap();
        assert_eq!(back, a);
        assert_eq!(back.to_json(), a.to_json());
    }

    #[test]
    fn single_sample_batch_mask() {
        let v = TextVocab::build(["a b"], 1).unwrap();
        let s = vec![sample("x", 6, "a b")];
        let ep = iterate_batches(&s, &v, "<MOTION>", cfg(4));
        assert_eq!(ep.batches.len(), 1);
        let b = &ep.batches[0];
        assert!(b.frame_mask[0].iter().all(|&m| m));
        assert_eq!(b.target_ids[0], vec![5, 6, EOS]);
        assert!(b.target_mask[0].iter().all(|&m| m));
    }

    #[test]
    fn padding_to_longest_clip() {
        let v = TextVocab::build(["a b"], 1).unwrap();
        let s = vec![sample("x", 10, "a"), sample("y", 14, "a b")];
        let ep = iterate_batches(&s, &v, "<MOTION>", cfg(2));
        let b = &ep.batches[0];
        assert_eq!(b.motion.shape(), &[2, 14, FEATURE_DIM]);
        let mut sums: Vec<usize> = b
            .frame_mask
            .iter()
            .map(|m| m.iter().filter(|&&x| x).count())
            .collect();
        sums.sort();
        assert_eq!(sums, vec![10, 14]);
        for (t, m) in b.target_ids.iter().zip(&b.target_mask) {
            for (&id, &on) in t.iter().zip(m) {
                assert_eq!(on, id != PAD);
            }
        }
    }

    #[test]
    fn epoch_covers_each_entry_once_and_skips_long_ones() {
        let v = TextVocab::build(["a"], 1).unwrap();
        let mut s: Vec<Sample> = (0..23).map(|i| sample(&format!("s{i}"), 8, "a")).collect();
        s.push(sample("long", 4 * 260, "a"));
        let ep = iterate_batches(&s, &v, "<MOTION>", cfg(5));
        assert_eq!(ep.skipped, 1);
        let mut ids: Vec<String> = ep.batches.iter().flat_map(|b| b.ids.clone()).collect();
        ids.sort();
        ids.dedup();
        assert_eq!(ids.len(), 23);
        let again = iterate_batches(&s, &v, "<MOTION>", cfg(5));
        let order = |e: &EpochBatches| {
            e.batches
                .iter()
                .flat_map(|b| b.ids.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(order(&ep), order(&again));
    }
}
