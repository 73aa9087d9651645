//! Brute-force ranking metrics.

/// O(n²) pairwise AUC.
pub fn auc_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins2, mut pairs) = (0u64, 0u64);
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if labels[i] && !labels[j] {
                pairs += 1;
                if scores[i] > scores[j] {
                    wins2 += 2;
                } else if scores[i] == scores[j] {
                    wins2 += 1;
                }
            }
        }
    }
    (wins2 as f64 / 2.0) / pairs as f64
}

/// Precision at each positive's rank, with ranks computed by counting.
pub fn ap_oracle(scores: &[f64], labels: &[bool]) -> f64 {
    let n = scores.len();
    // rank of i: items strictly above it, plus earlier items tied with it
    let rank = |i: usize| {
        (0..n)
            .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
            .count()
            + 1
    };
    let mut ranked: Vec<(usize, usize)> = (0..n).map(|i| (rank(i), i)).collect();
    ranked.sort();
    let mut sum = 0.0;
    for &(r, i) in &ranked {
        if labels[i] {
            let hits = ranked.iter().filter(|&&(r2, k)| r2 <= r && labels[k]).count();
            sum += hits as f64 / r as f64;
        }
    }
    sum / labels.iter().filter(|&&l| l).count() as f64
}
