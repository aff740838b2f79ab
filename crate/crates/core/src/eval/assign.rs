//! Minimum-cost one-to-one assignment (Hungarian algorithm with potentials).

/// Column assigned to each row of the `rows × cols` cost matrix, minimizing
/// the total cost. With more rows than columns some rows stay unassigned.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = min_cost_assignment(&t);
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                rows[i] = Some(j);
            }
        }
        return rows;
    }
    // 1-based potentials u (rows), v (columns); way[j] is the previous
    // column on the augmenting path, p[j] the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut rows = vec![None; n];
    for j in 1..=m {
        if p[j] != 0 {
            rows[p[j] - 1] = Some(j - 1);
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn total(cost: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
        a.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[i][j])).sum()
    }

    /// Every row-to-column injection that leaves exactly max(0, n - m) rows
    /// unassigned.
    fn all_assignments(n: usize, m: usize) -> Vec<Vec<Option<usize>>> {
        fn rec(n: usize, m: usize, skips: usize, cur: &mut Vec<Option<usize>>, used: &mut [bool], out: &mut Vec<Vec<Option<usize>>>) {
            if cur.len() == n {
                out.push(cur.clone());
                return;
            }
            if skips > 0 {
                cur.push(None);
                rec(n, m, skips - 1, cur, used, out);
                cur.pop();
            }
            for j in 0..m {
                if !used[j] {
                    used[j] = true;
                    cur.push(Some(j));
                    rec(n, m, skips, cur, used, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        rec(n, m, n.saturating_sub(m), &mut Vec::new(), &mut vec![false; m], &mut out);
        out.retain(|a| a.iter().flatten().count() == n.min(m));
        out
    }

    fn brute_force(cost: &[Vec<f64>]) -> f64 {
        let m = cost.first().map_or(0, Vec::len);
        all_assignments(cost.len(), m).iter().map(|a| total(cost, a)).fold(f64::INFINITY, f64::min)
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..300 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let cost: Vec<Vec<f64>> = (0..n).map(|_| (0..m).map(|_| rng.gen_range(0..10) as f64).collect()).collect();
            let fast = min_cost_assignment(&cost);
            assert_eq!(fast.iter().flatten().count(), n.min(m));
            assert!((total(&cost, &fast) - brute_force(&cost)).abs() < 1e-9);
            let mut cols: Vec<usize> = fast.iter().flatten().copied().collect();
            cols.sort_unstable();
            cols.dedup();
            assert_eq!(cols.len(), n.min(m));
        }
    }

    #[test]
    fn enumeration_counts() {
        assert_eq!(all_assignments(3, 3).len(), 6);
        assert_eq!(all_assignments(2, 3).len(), 6);
        assert_eq!(all_assignments(3, 2).len(), 6);
        assert_eq!(all_assignments(0, 2).len(), 1);
    }
}
