//! Clustering and regression evaluation metrics.
//!
//! Cluster labels are only identified up to permutation, so accuracy is
//! computed over the best relabeling: a maximum-weight assignment on
//! the K×K contingency table (Hungarian method, polynomial in K, rather
//! than a K! scan). The adjusted Rand index is permutation-invariant by
//! construction.

/// Mean squared error over (truth, prediction) pairs. Empty input is 0.
pub fn mse(pairs: &[(f64, f64)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    pairs.iter().map(|(t, p)| (t - p) * (t - p)).sum::<f64>() / pairs.len() as f64
}

/// Contingency table: counts[t][p] = items with truth label t and
/// predicted label p.
fn contingency(truth: &[usize], pred: &[usize], k: usize) -> Vec<Vec<f64>> {
    assert_eq!(truth.len(), pred.len());
    let mut table = vec![vec![0.0; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        assert!(t < k && p < k, "label out of range");
        table[t][p] += 1.0;
    }
    table
}

/// Maximum-weight perfect assignment on a square weight matrix via the
/// Hungarian method with potentials, O(n³). Returns the total weight
/// and, for each row, its assigned column.
pub fn max_assignment(weights: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let n = weights.len();
    assert!(n > 0 && weights.iter().all(|row| row.len() == n));
    // Minimize the negated weights.
    let cost = |i: usize, j: usize| -weights[i][j];

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assigned_row = vec![0usize; n + 1]; // column -> row (1-based, 0 = free)
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assigned_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assigned_row[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assigned_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assigned_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assigned_row[j0] = assigned_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[assigned_row[j] - 1] = j - 1;
    }
    let total = (0..n).map(|i| weights[i][row_to_col[i]]).sum();
    (total, row_to_col)
}

/// Fraction of items whose predicted label matches the truth under the
/// best relabeling of predicted clusters.
pub fn best_permutation_accuracy(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    if truth.is_empty() {
        return 1.0;
    }
    let table = contingency(truth, pred, k);
    let (matched, _) = max_assignment(&table);
    matched / truth.len() as f64
}

fn choose2(n: f64) -> f64 {
    n * (n - 1.0) / 2.0
}

/// Adjusted Rand index between two labelings; 1 for identical
/// partitions, approximately 0 for independent ones.
pub fn adjusted_rand_index(truth: &[usize], pred: &[usize], k: usize) -> f64 {
    assert_eq!(truth.len(), pred.len());
    let n = truth.len() as f64;
    if truth.is_empty() {
        return 1.0;
    }
    let table = contingency(truth, pred, k);
    let sum_cells: f64 = table.iter().flatten().map(|&c| choose2(c)).sum();
    let row_sums: Vec<f64> = table.iter().map(|row| row.iter().sum()).collect();
    let col_sums: Vec<f64> =
        (0..k).map(|j| table.iter().map(|row| row[j]).sum()).collect();
    let sum_rows: f64 = row_sums.iter().map(|&a| choose2(a)).sum();
    let sum_cols: f64 = col_sums.iter().map(|&b| choose2(b)).sum();
    let expected = sum_rows * sum_cols / choose2(n);
    let max_index = 0.5 * (sum_rows + sum_cols);
    if (max_index - expected).abs() < 1e-12 {
        // Degenerate partitions (e.g. everything in one cluster twice).
        return if (sum_cells - expected).abs() < 1e-12 { 1.0 } else { 0.0 };
    }
    (sum_cells - expected) / (max_index - expected)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn mse_basics() {
        assert_eq!(mse(&[]), 0.0);
        assert_eq!(mse(&[(1.0, 1.0), (2.0, 2.0)]), 0.0);
        assert!((mse(&[(0.0, 2.0), (0.0, 0.0)]) - 2.0).abs() <= 1e-15);
    }

    fn brute_force_assignment(weights: &[Vec<f64>]) -> f64 {
        fn recurse(weights: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
            if row == weights.len() {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for col in 0..weights.len() {
                if !used[col] {
                    used[col] = true;
                    best = best.max(weights[row][col] + recurse(weights, row + 1, used));
                    used[col] = false;
                }
            }
            best
        }
        recurse(weights, 0, &mut vec![false; weights.len()])
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let mut rng = ChaCha20Rng::seed_from_u64(1);
        for n in 1..=5 {
            for _ in 0..20 {
                let weights: Vec<Vec<f64>> = (0..n)
                    .map(|_| (0..n).map(|_| rng.random_range(0.0..10.0)).collect())
                    .collect();
                let (fast, assignment) = max_assignment(&weights);
                let exact = brute_force_assignment(&weights);
                assert!((fast - exact).abs() <= 1e-9, "n={n} {fast} vs {exact}");
                let mut seen = vec![false; n];
                for &c in &assignment {
                    assert!(!seen[c]);
                    seen[c] = true;
                }
            }
        }
    }

    #[test]
    fn perfect_relabeling_scores_one() {
        let truth = vec![0, 0, 1, 1, 2, 2];
        let pred = vec![2, 2, 0, 0, 1, 1];
        assert_eq!(best_permutation_accuracy(&truth, &pred, 3), 1.0);
        assert_eq!(adjusted_rand_index(&truth, &pred, 3), 1.0);
    }

    #[test]
    fn accuracy_counts_mismatches() {
        let truth = vec![0, 0, 0, 1, 1, 1];
        let pred = vec![1, 1, 0, 0, 0, 0];
        // Best map: pred 1 -> truth 0 (2 hits), pred 0 -> truth 1 (3 of 4).
        let acc = best_permutation_accuracy(&truth, &pred, 2);
        assert!((acc - 5.0 / 6.0).abs() <= 1e-12);
    }

    #[test]
    fn ari_of_random_labels_is_near_zero() {
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let n = 10_000;
        let truth: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let pred: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let ari = adjusted_rand_index(&truth, &pred, 4);
        assert!(ari.abs() <= 0.05, "ari {ari}");
    }

    #[test]
    fn metrics_invariant_under_label_permutation() {
        let mut rng = ChaCha20Rng::seed_from_u64(8);
        let truth: Vec<usize> = (0..500).map(|_| rng.random_range(0..3)).collect();
        let pred: Vec<usize> = truth
            .iter()
            .map(|&t| if rng.random_range(0..10) == 0 { (t + 1) % 3 } else { t })
            .collect();
        let permuted: Vec<usize> = pred.iter().map(|&p| (p + 2) % 3).collect();
        let a1 = best_permutation_accuracy(&truth, &pred, 3);
        let a2 = best_permutation_accuracy(&truth, &permuted, 3);
        assert!((a1 - a2).abs() <= 1e-12);
        let r1 = adjusted_rand_index(&truth, &pred, 3);
        let r2 = adjusted_rand_index(&truth, &permuted, 3);
        assert!((r1 - r2).abs() <= 1e-12);
    }
}
