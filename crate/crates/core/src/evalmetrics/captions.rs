//! Caption metrics over token sequences: BLEU-4, consensus CIDEr, ROUGE-L.

use std::collections::{HashMap, HashSet};
use std::hash::Hash;

pub const BLEU_EPS: f64 = 1e-9;
pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

/// Lowercase, strip punctuation, split on whitespace.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_string)
        .collect()
}

fn ngram_counts<T: Hash + Eq + Clone>(s: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut m = HashMap::new();
    if s.len() >= n {
        for w in s.windows(n) {
            *m.entry(w.to_vec()).or_insert(0) += 1;
        }
    }
    m
}

/// Geometric mean of clipped 1..4-gram precisions (each smoothed as
/// `(m+ε)/(t+ε)`) times the brevity penalty against the closest reference length.
pub fn bleu4<T: Hash + Eq + Clone, R: AsRef<[T]>>(cand: &[T], refs: &[R]) -> f64 {
    if cand.is_empty() || refs.is_empty() {
        return 0.0;
    }
    let mut log_p = 0.0;
    for n in 1..=4 {
        let cc = ngram_counts(cand, n);
        let mut max_ref: HashMap<Vec<T>, usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r.as_ref(), n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        let matched: usize = cc
            .iter()
            .map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0)))
            .sum();
        let total = cand.len().saturating_sub(n - 1);
        log_p += ((matched as f64 + BLEU_EPS) / (total as f64 + BLEU_EPS)).ln() / 4.0;
    }
    let c = cand.len();
    let r = refs
        .iter()
        .map(|r| r.as_ref().len())
        .min_by_key(|&l| ((l as i64 - c as i64).abs(), l))
        .unwrap_or(0);
    let bp = if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    bp * log_p.exp()
}

fn lcs<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS F-measure with β = 1.2, best over references.
pub fn rouge_l<T: PartialEq, R: AsRef<[T]>>(cand: &[T], refs: &[R]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    refs.iter()
        .map(|r| {
            let r = r.as_ref();
            let l = lcs(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let (p, rec) = (l / cand.len() as f64, l / r.len() as f64);
            if p == rec {
                p
            } else {
                (1.0 + b2) * p * rec / (rec + b2 * p)
            }
        })
        .fold(0.0, f64::max)
}

/// Document frequencies over a corpus where each document is the reference
/// set of one object.
#[derive(Clone, Debug)]
pub struct CiderScorer<T: Hash + Eq + Clone> {
    df: [HashMap<Vec<T>, usize>; 4],
    n_docs: usize,
}

impl<T: Hash + Eq + Clone> CiderScorer<T> {
    pub fn new<R: AsRef<[T]>>(corpus: &[Vec<R>]) -> Self {
        assert!(
            !corpus.is_empty(),
            "CIDEr needs a non-empty reference corpus"
        );
        let mut df: [HashMap<Vec<T>, usize>; 4] = Default::default();
        for doc in corpus {
            for (n, table) in df.iter_mut().enumerate() {
                let mut seen = HashSet::new();
                for r in doc {
                    for g in ngram_counts(r.as_ref(), n + 1).into_keys() {
                        seen.insert(g);
                    }
                }
                for g in seen {
                    *table.entry(g).or_insert(0) += 1;
                }
            }
        }
        CiderScorer {
            df,
            n_docs: corpus.len(),
        }
    }

    pub fn idf(&self, gram: &[T]) -> f64 {
        let df = self.df[gram.len() - 1]
            .get(gram)
            .copied()
            .unwrap_or(0)
            .max(1);
        (self.n_docs as f64 / df as f64).ln()
    }

    fn vector(&self, s: &[T], n: usize) -> HashMap<Vec<T>, f64> {
        ngram_counts(s, n)
            .into_iter()
            .map(|(g, c)| {
                let w = c as f64 * self.idf(&g);
                (g, w)
            })
            .collect()
    }

    /// `10 · mean_n mean_refs cos(tfidf_n(cand), tfidf_n(ref))`. When both
    /// vectors vanish, the pair counts as similar iff the sequences are equal.
    pub fn score<R: AsRef<[T]>>(&self, cand: &[T], refs: &[R]) -> f64 {
        if refs.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for n in 1..=4 {
            let cv = self.vector(cand, n);
            let cnorm = cv.values().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in refs {
                let rv = self.vector(r.as_ref(), n);
                let rnorm = rv.values().map(|x| x * x).sum::<f64>().sqrt();
                acc += if cnorm == 0.0 && rnorm == 0.0 {
                    if cand == r.as_ref() {
                        1.0
                    } else {
                        0.0
                    }
                } else if cnorm == 0.0 || rnorm == 0.0 {
                    0.0
                } else {
                    let dot: f64 = cv
                        .iter()
                        .map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0))
                        .sum();
                    dot / (cnorm * rnorm)
                };
            }
            total += acc / refs.len() as f64;
        }
        CIDER_SCALE * total / 4.0
    }
}
