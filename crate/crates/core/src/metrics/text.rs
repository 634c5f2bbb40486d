use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub const ROUGE_BETA2: f64 = 1.44;

/// Hypothesis and single reference for one sample, already tokenized.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EvalPair {
    pub id: String,
    pub hyp: Vec<String>,
    pub reference: Vec<String>,
}

impl EvalPair {
    pub fn new(id: impl Into<String>, hyp: &str, reference: &str) -> Self {
        EvalPair {
            id: id.into(),
            hyp: crate::dataset::tokenize(hyp),
            reference: crate::dataset::tokenize(reference),
        }
    }
}

fn ngrams(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_default() += 1;
        }
    }
    out
}

/// Corpus BLEU with clipped n-gram precision, uniform weights and brevity
/// penalty. For `n > 1`, a corpus-level match count of zero is smoothed to
/// `1 / (total + 1)`; a zero unigram match gives 0.
pub fn bleu(corpus: &[EvalPair], max_n: usize) -> f64 {
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    for p in corpus {
        hyp_len += p.hyp.len();
        ref_len += p.reference.len();
        for n in 1..=max_n {
            let h = ngrams(&p.hyp, n);
            let r = ngrams(&p.reference, n);
            for (g, &c) in &h {
                matches[n - 1] += c.min(r.get(g).copied().unwrap_or(0));
            }
            totals[n - 1] += p.hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 || max_n == 0 {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        let p = if matches[n] == 0 {
            if n == 0 {
                return 0.0;
            }
            1.0 / (totals[n] as f64 + 1.0)
        } else {
            matches[n] as f64 / totals[n] as f64
        };
        log_sum += p.ln();
    }
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * (log_sum / max_n as f64).exp()
}

pub fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure of one pair with recall weight `beta2`.
pub fn rouge_l_pair(hyp: &[String], reference: &[String], beta2: f64) -> f64 {
    if hyp.is_empty() && reference.is_empty() {
        return 1.0;
    }
    let lcs = lcs_len(hyp, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / hyp.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    (1.0 + beta2) * p * r / (r + beta2 * p)
}

/// Mean per-sample ROUGE-L.
pub fn rouge_l(corpus: &[EvalPair], beta2: f64) -> f64 {
    if corpus.is_empty() {
        return 0.0;
    }
    corpus
        .iter()
        .map(|p| rouge_l_pair(&p.hyp, &p.reference, beta2))
        .sum::<f64>()
        / corpus.len() as f64
}

/// CIDEr with corpus-level document frequencies over the references:
/// `idf = ln N − ln max(1, df)`, TF-IDF cosine per n in 1..=4, averaged
/// over n and scaled by 10.
pub fn cider(corpus: &[EvalPair]) -> f64 {
    const N: usize = 4;
    if corpus.is_empty() {
        return 0.0;
    }
    if corpus.len() < 2 {
        log::warn!("CIDEr on a single sample: document frequencies are degenerate");
    }
    let docs = corpus.len() as f64;
    let mut total = 0.0;
    let mut df: Vec<HashMap<&[String], usize>> = vec![HashMap::new(); N];
    for p in corpus {
        for n in 1..=N {
            for g in ngrams(&p.reference, n).into_keys() {
                *df[n - 1].entry(g).or_default() += 1;
            }
        }
    }
    for p in corpus {
        let mut score = 0.0;
        for n in 1..=N {
            let idf = |g: &[String]| {
                docs.ln() - (df[n - 1].get(g).copied().unwrap_or(0).max(1) as f64).ln()
            };
            let vec = |toks: &[String]| -> HashMap<Vec<String>, f64> {
                ngrams(toks, n)
                    .into_iter()
                    .map(|(g, c)| (g.to_vec(), c as f64 * idf(g)))
                    .collect()
            };
            let (h, r) = (vec(&p.hyp), vec(&p.reference));
            let norm =
                |v: &HashMap<Vec<String>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nh, nr) = (norm(&h), norm(&r));
            if nh > 0.0 && nr > 0.0 {
                let dot: f64 = h
                    .iter()
                    .map(|(g, x)| x * r.get(g).copied().unwrap_or(0.0))
                    .sum();
                score += dot / (nh * nr);
            }
        }
        total += 10.0 * score / N as f64;
    }
    total / docs
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum EditOp {
    Match,
    Substitute,
    Insert,
    Delete,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct WerAlignment {
    pub sub: usize,
    pub ins: usize,
    pub del: usize,
    pub ops: Vec<EditOp>,
    pub ref_len: usize,
}

impl WerAlignment {
    pub fn errors(&self) -> usize {
        self.sub + self.ins + self.del
    }

    /// Percentage; an empty reference divides by 1 instead of 0.
    pub fn wer(&self) -> f64 {
        100.0 * self.errors() as f64 / self.ref_len.max(1) as f64
    }
}

/// Unit-cost Levenshtein alignment. Among equal-cost edit scripts the
/// backtrace prefers a match, then deletion, insertion, substitution.
pub fn wer_align(reference: &[String], hyp: &[String]) -> WerAlignment {
    let (n, m) = (reference.len(), hyp.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hyp[j - 1]);
            d[i * w + j] = diag.min(d[(i - 1) * w + j] + 1).min(d[i * w + j - 1] + 1);
        }
    }
    let (mut i, mut j) = (n, m);
    let mut ops = Vec::new();
    let (mut sub, mut ins, mut del) = (0, 0, 0);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 && reference[i - 1] == hyp[j - 1] && d[(i - 1) * w + j - 1] == here {
            ops.push(EditOp::Match);
            i -= 1;
            j -= 1;
        } else if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push(EditOp::Delete);
            del += 1;
            i -= 1;
        } else if j > 0 && d[i * w + j - 1] + 1 == here {
            ops.push(EditOp::Insert);
            ins += 1;
            j -= 1;
        } else {
            ops.push(EditOp::Substitute);
            sub += 1;
            i -= 1;
            j -= 1;
        }
    }
    ops.reverse();
    WerAlignment {
        sub,
        ins,
        del,
        ops,
        ref_len: n,
    }
}

/// Corpus-level text metrics. WER is a percentage; the edit counts are
/// reported both as corpus totals and as per-sample averages.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub samples: usize,
    pub bleu1: f64,
    pub bleu4: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub cider: f64,
    pub wer: f64,
    pub ins: f64,
    pub del: f64,
    pub sub: f64,
    pub ins_total: usize,
    pub del_total: usize,
    pub sub_total: usize,
    pub ref_words: usize,
    /// Samples whose reference was empty (their WER used denominator 1).
    pub empty_refs: usize,
    pub bleu_smoothing: String,
}

pub fn evaluate_corpus(corpus: &[EvalPair]) -> EvalReport {
    let aligns: Vec<WerAlignment> = corpus
        .iter()
        .map(|p| wer_align(&p.reference, &p.hyp))
        .collect();
    let sum = |f: fn(&WerAlignment) -> usize| aligns.iter().map(f).sum::<usize>();
    let (ins, del, sub) = (sum(|a| a.ins), sum(|a| a.del), sum(|a| a.sub));
    let ref_words = sum(|a| a.ref_len);
    let empty_refs = aligns.iter().filter(|a| a.ref_len == 0).count();
    let n = corpus.len().max(1) as f64;
    EvalReport {
        samples: corpus.len(),
        bleu1: bleu(corpus, 1),
        bleu4: bleu(corpus, 4),
        rouge_l: rouge_l(corpus, ROUGE_BETA2),
        cider: cider(corpus),
        wer: 100.0 * (ins + del + sub) as f64 / ref_words.max(1) as f64,
        ins: ins as f64 / n,
        del: del as f64 / n,
        sub: sub as f64 / n,
        ins_total: ins,
        del_total: del,
        sub_total: sub,
        ref_words,
        empty_refs,
        bleu_smoothing: "add-one for n>1 when the corpus match count is zero".into(),
    }
}
