use std::collections::HashMap;

/// Stand-in numerator for an n-gram order with no clipped matches.
const ZERO_COUNT_EPS: f64 = 1e-9;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with uniform weights over orders `1..=max_n` and the
/// brevity penalty, one reference per candidate.
///
/// Orders with zero clipped matches use a numerator of 1e-9 instead of 0.
pub fn bleu<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>], max_n: usize) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference per candidate");
    assert!((1..=4).contains(&max_n), "max_n must be in 1..=4");
    let mut matched = vec![0usize; max_n];
    let mut total = vec![0usize; max_n];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, refr) in candidates.iter().zip(references) {
        c_len += cand.len();
        r_len += refr.len();
        for n in 1..=max_n {
            let rc = ngram_counts(refr, n);
            for (g, c) in ngram_counts(cand, n) {
                matched[n - 1] += c.min(rc.get(&g).copied().unwrap_or(0));
                total[n - 1] += c;
            }
        }
    }
    if c_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..max_n)
        .map(|i| {
            let num = if matched[i] == 0 { ZERO_COUNT_EPS } else { matched[i] as f64 };
            (num / total[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / max_n as f64;
    let bp = if c_len > r_len {
        1.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    bp * log_p.exp()
}

/// BLEU@1 through BLEU@4.
pub fn bleu_scores<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> [f64; 4] {
    [1, 2, 3, 4].map(|n| bleu(candidates, references, n))
}

fn lcs_len<S: AsRef<str>, T: AsRef<str>>(a: &[S], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() {
                prev[j] + 1
            } else {
                cur[j].max(prev[j + 1])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based F1. Zero when either side is empty.
pub fn rouge_l<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> f64 {
    let lcs = lcs_len(candidate, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / candidate.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    2.0 * p * r / (p + r)
}

/// Mean sentence-level ROUGE-L.
pub fn rouge_l_corpus<S: AsRef<str>, T: AsRef<str>>(candidates: &[Vec<S>], references: &[Vec<T>]) -> f64 {
    assert_eq!(candidates.len(), references.len(), "one reference per candidate");
    if candidates.is_empty() {
        return 0.0;
    }
    candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r)).sum::<f64>() / candidates.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn bleu_cases() {
        let s = w("a person walks forward then sits down");
        assert!((bleu(std::slice::from_ref(&s), std::slice::from_ref(&s), 4) - 1.0).abs() < 1e-12);
        assert!((bleu(&[w("a a b")], &[w("a b")], 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((bleu(&[w("a")], &[w("a b c d")], 1) - (-3f64).exp()).abs() < 1e-12);
        assert_eq!(bleu(&[Vec::<&str>::new()], &[w("a b")], 2), 0.0);
    }

    #[test]
    fn zero_order_is_smoothed_not_zeroed() {
        let b = bleu(&[w("a b c")], &[w("a c b")], 4);
        assert!(b > 0.0 && b < 1e-3);
    }

    #[test]
    fn rouge_cases() {
        assert_eq!(rouge_l(&w("a b c"), &w("a b c")), 1.0);
        assert!((rouge_l(&w("a b c"), &w("a c")) - 0.8).abs() < 1e-12);
        assert_eq!(rouge_l(&w("x y"), &w("a b")), 0.0);
        assert_eq!(rouge_l(&Vec::<&str>::new(), &Vec::<&str>::new()), 0.0);
    }
}
