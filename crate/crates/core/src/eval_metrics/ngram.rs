use std::collections::HashMap;

use super::{tokens, EvalScore};

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn clipped_overlap(cand: &[String], refr: &[String], n: usize) -> usize {
    let r = ngram_counts(refr, n);
    ngram_counts(cand, n)
        .into_iter()
        .map(|(g, c)| c.min(r.get(g).copied().unwrap_or(0)))
        .sum()
}

/// BLEU-4 with uniform weights over the orders the candidate actually has
/// (`min(4, c)`), clipped precisions and brevity penalty. Zero unigram
/// overlap scores exactly 0; a later zero precision is replaced by
/// `1 / (2^k * c)` where `k` counts the zero precisions seen so far.
pub fn bleu(prediction: &str, reference: &str) -> EvalScore {
    let cand = tokens(prediction);
    let refr = tokens(reference);
    let (c, r) = (cand.len(), refr.len());
    if c == 0 {
        return EvalScore::new("bleu", 0.0).flagged("empty_candidate");
    }
    if r == 0 {
        return EvalScore::new("bleu", 0.0).flagged("empty_reference");
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    let order = c.min(4);
    let mut score = EvalScore::new("bleu", 0.0)
        .with_detail("bp", bp)
        .with_detail("c", c as f64)
        .with_detail("r", r as f64)
        .with_detail("order", order as f64);
    let mut log_sum = 0.0;
    let mut k = 0;
    for n in 1..=order {
        let matches = clipped_overlap(&cand, &refr, n);
        let total = c + 1 - n;
        let p = if matches > 0 {
            matches as f64 / total as f64
        } else if n == 1 {
            score.details.insert("p1".into(), 0.0);
            return score;
        } else {
            k += 1;
            score.flags.push(format!("smoothed_p{n}"));
            1.0 / (2f64.powi(k) * c as f64)
        };
        score.details.insert(format!("p{n}"), p);
        log_sum += p.ln();
    }
    score.value = (bp * (log_sum / order as f64).exp()).min(1.0);
    score
}

fn f1(name: &str, overlap: usize, c: usize, r: usize) -> EvalScore {
    let (p, rec) = (overlap as f64 / c as f64, overlap as f64 / r as f64);
    let f = if overlap == 0 { 0.0 } else { 2.0 * p * rec / (p + rec) };
    EvalScore::new(name, f)
        .with_detail("p", p)
        .with_detail("r", rec)
        .with_detail("f", f)
}

fn rouge_n(name: &str, cand: &[String], refr: &[String], n: usize) -> EvalScore {
    let (c, r) = (cand.len().saturating_sub(n - 1), refr.len().saturating_sub(n - 1));
    if c == 0 || r == 0 {
        let v = if cand == refr { 1.0 } else { 0.0 };
        return EvalScore::new(name, v).flagged("too_short");
    }
    f1(name, clipped_overlap(cand, refr, n), c, r)
}

pub(crate) fn lcs_len(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Clone, Debug, PartialEq)]
pub struct RougeScores {
    pub rouge1: EvalScore,
    pub rouge2: EvalScore,
    pub rouge_l: EvalScore,
}

/// ROUGE-1, ROUGE-2 and ROUGE-L F1 (beta = 1). For an order where one side
/// has no n-grams the score is 1 if the token sequences are identical and 0
/// otherwise.
pub fn rouge(prediction: &str, reference: &str) -> RougeScores {
    let cand = tokens(prediction);
    let refr = tokens(reference);
    if cand.is_empty() || refr.is_empty() {
        let flag = if cand.is_empty() { "empty_candidate" } else { "empty_reference" };
        let z = |n: &str| EvalScore::new(n, 0.0).flagged(flag);
        return RougeScores {
            rouge1: z("rouge1"),
            rouge2: z("rouge2"),
            rouge_l: z("rougeL"),
        };
    }
    RougeScores {
        rouge1: rouge_n("rouge1", &cand, &refr, 1),
        rouge2: rouge_n("rouge2", &cand, &refr, 2),
        rouge_l: f1("rougeL", lcs_len(&cand, &refr), cand.len(), refr.len()),
    }
}
