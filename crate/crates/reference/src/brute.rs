//! Exhaustive and sort-based reference implementations of the loss and the
//! retrieval ranks.

use ndarray::Array2;

/// Visits every size-`m` subset of `0..n`.
pub fn subsets(n: usize, m: usize, f: &mut impl FnMut(&[usize])) {
    fn go(start: usize, n: usize, m: usize, cur: &mut Vec<usize>, f: &mut impl FnMut(&[usize])) {
        if cur.len() == m {
            f(cur);
            return;
        }
        for i in start..n {
            cur.push(i);
            go(i + 1, n, m, cur, f);
            cur.pop();
        }
    }
    go(0, n, m, &mut Vec::new(), f);
}

/// For each anchor, the worst-case total over every choice of `m` negatives.
/// Each hinge term is monotone in its similarity, so the maximum is attained
/// by the hardest negatives whatever the tie order.
pub fn enumerated_loss(s: &Array2<f64>, m: usize, margin: f64) -> f64 {
    let n = s.nrows();
    let mut total = 0.0;
    for k in 0..n {
        for by_row in [true, false] {
            let negs: Vec<f64> = (0..n)
                .filter(|&j| j != k)
                .map(|j| if by_row { s[[k, j]] } else { s[[j, k]] })
                .collect();
            let mut best = f64::NEG_INFINITY;
            subsets(negs.len(), m, &mut |idx| {
                let v: f64 = idx
                    .iter()
                    .map(|&i| (negs[i] - s[[k, k]] + margin).max(0.0))
                    .sum();
                best = best.max(v);
            });
            total += best;
        }
    }
    total
}

pub fn cos(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Candidate indices ordered best first, ties by index.
pub fn sorted_candidates(q: &[f32], cands: &Array2<f32>) -> Vec<usize> {
    let scores: Vec<f64> = cands
        .rows()
        .into_iter()
        .map(|r| cos(q, r.as_slice().unwrap()))
        .collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    order
}

/// 1-based rank of the first candidate accepted by `correct` in the full sort.
pub fn brute_rank(q: &[f32], cands: &Array2<f32>, correct: impl Fn(usize) -> bool) -> usize {
    1 + sorted_candidates(q, cands)
        .iter()
        .position(|&i| correct(i))
        .expect("some candidate is correct")
}

/// Percentage of ranks within `n`.
pub fn brute_recall(ranks: &[usize], n: usize) -> f64 {
    100.0 * ranks.iter().filter(|&&r| r <= n).count() as f64 / ranks.len() as f64
}

pub fn brute_median(ranks: &[usize]) -> f64 {
    let mut s = ranks.to_vec();
    s.sort_unstable();
    let m = s.len();
    if m % 2 == 1 {
        s[m / 2] as f64
    } else {
        (s[m / 2 - 1] + s[m / 2]) as f64 / 2.0
    }
}

/// Normal-approximation 95% half-width in points for `hits` of `n`.
pub fn brute_ci95(hits: usize, n: usize) -> f64 {
    let p = hits as f64 / n as f64;
    1.96 * (p * (1.0 - p) / n as f64).sqrt() * 100.0
}
