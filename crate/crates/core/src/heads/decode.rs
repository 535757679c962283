//! Greedy and beam decoding over any next-token model.

use crate::datasynth::{EOS, PAD};

/// A model that scores the next token of partial sequences.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    /// Log-probabilities over the vocabulary for each partial sequence.
    fn next_logprobs(&self, partials: &[Vec<usize>]) -> Vec<Vec<f64>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct CaptionSequence {
    /// Ends with EOS unless cut at the length limit.
    pub tokens: Vec<usize>,
    pub logprob: f64,
}

impl CaptionSequence {
    /// Cumulative log-probability divided by the token count.
    pub fn normalized(&self) -> f64 {
        self.logprob / self.tokens.len().max(1) as f64
    }

    pub fn finished(&self) -> bool {
        self.tokens.last() == Some(&EOS)
    }
}

fn best_token(lp: &[f64]) -> usize {
    let mut best = usize::MAX;
    for (i, &x) in lp.iter().enumerate() {
        if i == PAD {
            continue;
        }
        if best == usize::MAX || x > lp[best] {
            best = i;
        }
    }
    best
}

pub fn greedy_decode(model: &dyn StepModel, max_len: usize) -> CaptionSequence {
    let mut seq = CaptionSequence {
        tokens: Vec::new(),
        logprob: 0.0,
    };
    while seq.tokens.len() < max_len {
        let lp = model
            .next_logprobs(std::slice::from_ref(&seq.tokens))
            .pop()
            .expect("one row");
        let t = best_token(&lp);
        seq.tokens.push(t);
        seq.logprob += lp[t];
        if t == EOS {
            break;
        }
    }
    seq
}

/// Keeps the `beam` best partial hypotheses by cumulative log-probability;
/// candidates that emit EOS are set aside. Results are ranked by
/// length-normalized log-probability (ties by order of completion).
pub fn beam_search(model: &dyn StepModel, beam: usize, max_len: usize) -> Vec<CaptionSequence> {
    assert!(beam >= 1, "beam must be at least 1");
    let mut alive = vec![CaptionSequence {
        tokens: Vec::new(),
        logprob: 0.0,
    }];
    let mut done: Vec<CaptionSequence> = Vec::new();
    for _ in 0..max_len {
        let partials: Vec<Vec<usize>> = alive.iter().map(|s| s.tokens.clone()).collect();
        let lps = model.next_logprobs(&partials);
        let mut cands: Vec<(f64, usize, usize)> = Vec::new();
        for (h, lp) in lps.iter().enumerate() {
            for (t, &x) in lp.iter().enumerate() {
                if t != PAD {
                    cands.push((alive[h].logprob + x, h, t));
                }
            }
        }
        cands.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut next = Vec::new();
        for &(lp, h, t) in cands.iter().take(beam) {
            let mut tokens = alive[h].tokens.clone();
            tokens.push(t);
            let s = CaptionSequence {
                tokens,
                logprob: lp,
            };
            if t == EOS {
                done.push(s);
            } else {
                next.push(s);
            }
        }
        alive = next;
        if alive.is_empty() {
            break;
        }
    }
    done.extend(alive);
    let mut order: Vec<usize> = (0..done.len()).collect();
    order.sort_by(|&i, &j| {
        done[j]
            .normalized()
            .total_cmp(&done[i].normalized())
            .then(i.cmp(&j))
    });
    order
        .into_iter()
        .take(beam)
        .map(|i| done[i].clone())
        .collect()
}
