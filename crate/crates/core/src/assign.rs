//! Label-assignment solvers.
//!
//! * [`hungarian`]: exact minimum-cost injection of ground truths into queries.
//! * [`brute_force_assign`]: exhaustive enumeration, used as a test oracle.
//! * [`group_wise_assign`]: one independent Hungarian solve per query group.
//! * [`one_to_many_assign`]: rank-greedy top-k baseline with exclusivity.

use crate::matchcost::CostMatrix;
use crate::{Error, Result};

/// Largest ground-truth count accepted by [`brute_force_assign`].
pub const BRUTE_FORCE_MAX_GTS: usize = 8;

/// One-to-One matching: `gt_to_query[j]` is the query matched to ground truth `j`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub gt_to_query: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty() -> Self {
        Self {
            gt_to_query: Vec::new(),
            total_cost: 0.0,
        }
    }

    fn from_indices(cost: &CostMatrix, gt_to_query: Vec<usize>) -> Self {
        let total_cost = gt_to_query.iter().enumerate().map(|(gt, &q)| cost.get(q, gt)).sum();
        Self {
            gt_to_query,
            total_cost,
        }
    }

    pub fn len(&self) -> usize {
        self.gt_to_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gt_to_query.is_empty()
    }

    /// `(query, gt)` pairs.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.gt_to_query.iter().enumerate().map(|(gt, &q)| (q, gt))
    }
}

/// One-to-Many matching: every ground truth owns a list of queries and no
/// query appears under two ground truths.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MultiAssignment {
    pub per_gt: Vec<Vec<usize>>,
}

impl MultiAssignment {
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.per_gt
            .iter()
            .enumerate()
            .flat_map(|(gt, qs)| qs.iter().map(move |&q| (q, gt)))
    }

    pub fn positive_count(&self) -> usize {
        self.per_gt.iter().map(Vec::len).sum()
    }
}

/// Exact minimum-cost assignment of every ground truth (column) to a
/// distinct query (row).
///
/// The rectangular problem is padded to a square one whose extra
/// ground-truth rows cost a constant sentinel above every real entry, then
/// solved with the shortest-augmenting-path form of the Hungarian method
/// (O(N³)). Among equal reduced costs the lowest query index wins.
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.queries(), cost.gts());
    if m > n {
        return Err(Error::TooManyTargets { gts: m, queries: n });
    }
    if m == 0 {
        return Ok(Assignment::empty());
    }
    let max_abs = cost.entries().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let sentinel = max_abs * (m as f64 + 1.0) + 1.0;
    // Rows are ground truths (real, then padding); columns are queries.
    let entry = |row: usize, col: usize| if row < m { cost.get(col, row) } else { sentinel };

    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // owner[col] = row matched to column `col` (1-based, 0 = free).
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        let mut min_slack = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = inf;
            let mut col1 = 0usize;
            for col in 1..=n {
                if used[col] {
                    continue;
                }
                let reduced = entry(r0 - 1, col - 1) - u[r0] - v[col];
                if reduced < min_slack[col] {
                    min_slack[col] = reduced;
                    way[col] = col0;
                }
                if min_slack[col] < delta {
                    delta = min_slack[col];
                    col1 = col;
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    min_slack[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut gt_to_query = vec![usize::MAX; m];
    for col in 1..=n {
        let row = owner[col];
        if row >= 1 && row <= m {
            gt_to_query[row - 1] = col - 1;
        }
    }
    debug_assert!(gt_to_query.iter().all(|&q| q < n));
    Ok(Assignment::from_indices(cost, gt_to_query))
}

/// Minimum-cost assignment by enumerating every injection. Ties resolve to
/// the lexicographically first injection.
pub fn brute_force_assign(cost: &CostMatrix) -> Result<Assignment> {
    let (n, m) = (cost.queries(), cost.gts());
    if m > BRUTE_FORCE_MAX_GTS {
        return Err(Error::BruteForceTooLarge {
            gts: m,
            max: BRUTE_FORCE_MAX_GTS,
        });
    }
    if m > n {
        return Err(Error::TooManyTargets { gts: m, queries: n });
    }

    struct Search<'a> {
        cost: &'a CostMatrix,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_cost: f64,
    }

    impl Search<'_> {
        fn visit(&mut self, gt: usize, partial: f64) {
            if gt == self.cost.gts() {
                if partial < self.best_cost {
                    self.best_cost = partial;
                    self.best.clone_from(&self.current);
                }
                return;
            }
            for q in 0..self.cost.queries() {
                if self.used[q] {
                    continue;
                }
                self.used[q] = true;
                self.current.push(q);
                self.visit(gt + 1, partial + self.cost.get(q, gt));
                self.current.pop();
                self.used[q] = false;
            }
        }
    }

    let mut search = Search {
        cost,
        used: vec![false; n],
        current: Vec::with_capacity(m),
        best: Vec::new(),
        best_cost: f64::INFINITY,
    };
    search.visit(0, 0.0);
    Ok(Assignment::from_indices(cost, search.best))
}

/// Independent One-to-One assignment inside each query group.
///
/// Query indices in the result are local to their group.
pub fn group_wise_assign(costs: &[CostMatrix]) -> Result<Vec<Assignment>> {
    costs
        .iter()
        .enumerate()
        .map(|(group, cost)| {
            if cost.gts() > cost.queries() {
                return Err(Error::InfeasibleGroup {
                    group,
                    gts: cost.gts(),
                    queries: cost.queries(),
                });
            }
            hungarian(cost)
        })
        .collect()
}

/// Rank-greedy One-to-Many assignment.
///
/// All `(query, gt)` pairs are visited by ascending cost (ties: lower gt,
/// then lower query). A pair is taken when the query is still free and the
/// ground truth holds fewer than `multiplicity` queries.
pub fn one_to_many_assign(cost: &CostMatrix, multiplicity: usize) -> Result<MultiAssignment> {
    if multiplicity == 0 {
        return Err(Error::ZeroMultiplicity);
    }
    let (n, m) = (cost.queries(), cost.gts());
    if n < multiplicity * m {
        return Err(Error::TooManyTargets {
            gts: multiplicity * m,
            queries: n,
        });
    }
    let mut order: Vec<(usize, usize)> = (0..m).flat_map(|gt| (0..n).map(move |q| (q, gt))).collect();
    order.sort_by(|&(qa, ga), &(qb, gb)| {
        cost.get(qa, ga)
            .total_cmp(&cost.get(qb, gb))
            .then(ga.cmp(&gb))
            .then(qa.cmp(&qb))
    });
    let mut taken = vec![false; n];
    let mut per_gt: Vec<Vec<usize>> = vec![Vec::with_capacity(multiplicity); m];
    let mut remaining = multiplicity * m;
    for (q, gt) in order {
        if remaining == 0 {
            break;
        }
        if taken[q] || per_gt[gt].len() == multiplicity {
            continue;
        }
        taken[q] = true;
        per_gt[gt].push(q);
        remaining -= 1;
    }
    Ok(MultiAssignment { per_gt })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn matrix(rows: &[&[f64]]) -> CostMatrix {
        let n = rows.len();
        let m = rows.first().map_or(0, |r| r.len());
        CostMatrix::from_entries(n, m, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, n: usize, m: usize) -> CostMatrix {
        CostMatrix::from_entries(n, m, (0..n * m).map(|_| rng.random_range(0.0..10.0)).collect()).unwrap()
    }

    fn all_permutation_minimum(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, gt: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if gt == cost.gts() {
                *best = best.min(acc);
                return;
            }
            for q in 0..cost.queries() {
                if !used[q] {
                    used[q] = true;
                    rec(cost, gt + 1, used, acc + cost.get(q, gt), best);
                    used[q] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(cost, 0, &mut vec![false; cost.queries()], 0.0, &mut best);
        best
    }

    fn assert_injective(a: &Assignment, n: usize) {
        let mut seen = vec![false; n];
        for &q in &a.gt_to_query {
            assert!(q < n);
            assert!(!seen[q], "query {q} used twice");
            seen[q] = true;
        }
    }

    #[test]
    fn single_entry() {
        let a = hungarian(&matrix(&[&[0.0]])).unwrap();
        assert_eq!(a.gt_to_query, vec![0]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn two_by_two() {
        let a = hungarian(&matrix(&[&[1.0, 2.0], &[2.0, 1.0]])).unwrap();
        assert_eq!(a.gt_to_query, vec![0, 1]);
        assert_eq!(a.total_cost, 2.0);
    }

    #[test]
    fn rejects_more_gts_than_queries() {
        let err = hungarian(&matrix(&[&[1.0, 2.0, 3.0]])).unwrap_err();
        assert!(matches!(err, Error::TooManyTargets { gts: 3, queries: 1 }));
    }

    #[test]
    fn empty_ground_truth() {
        let cost = CostMatrix::from_entries(4, 0, Vec::new()).unwrap();
        assert!(hungarian(&cost).unwrap().is_empty());
        assert!(brute_force_assign(&cost).unwrap().is_empty());
    }

    #[test]
    fn six_by_six_matches_permutation_minimum() {
        for seed in 0..1000 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cost = random_matrix(&mut rng, 6, 6);
            let a = hungarian(&cost).unwrap();
            assert_injective(&a, 6);
            let best = all_permutation_minimum(&cost);
            assert!(
                (a.total_cost - best).abs() <= 1e-9,
                "seed {seed}: {} vs {best}",
                a.total_cost
            );
        }
    }

    #[test]
    fn rectangular_agrees_with_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let n = rng.random_range(1..=8);
            let m = rng.random_range(0..=n.min(6));
            let cost = random_matrix(&mut rng, n, m);
            let h = hungarian(&cost).unwrap();
            let b = brute_force_assign(&cost).unwrap();
            assert_injective(&h, n);
            assert!((h.total_cost - b.total_cost).abs() <= 1e-9);
        }
    }

    #[test]
    fn negative_costs_are_handled() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let cost = CostMatrix::from_entries(5, 3, (0..15).map(|_| rng.random_range(-5.0..1.0)).collect()).unwrap();
            let h = hungarian(&cost).unwrap();
            assert!((h.total_cost - all_permutation_minimum(&cost)).abs() <= 1e-9);
        }
    }

    #[test]
    fn brute_force_single_gt_takes_column_minimum() {
        let cost = matrix(&[&[3.0], &[1.0], &[2.0], &[1.0]]);
        let a = brute_force_assign(&cost).unwrap();
        assert_eq!(a.gt_to_query, vec![1]);
        assert_eq!(a.total_cost, 1.0);
    }

    #[test]
    fn brute_force_all_equal() {
        let cost = CostMatrix::from_entries(5, 3, vec![2.5; 15]).unwrap();
        let a = brute_force_assign(&cost).unwrap();
        assert_injective(&a, 5);
        assert_eq!(a.total_cost, 7.5);
    }

    #[test]
    fn brute_force_guard() {
        let cost = CostMatrix::from_entries(9, 9, vec![0.0; 81]).unwrap();
        assert!(matches!(
            brute_force_assign(&cost),
            Err(Error::BruteForceTooLarge { gts: 9, .. })
        ));
    }

    #[test]
    fn group_wise_gives_k_positives_per_gt() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let costs: Vec<CostMatrix> = (0..3).map(|_| random_matrix(&mut rng, 4, 2)).collect();
        let result = group_wise_assign(&costs).unwrap();
        assert_eq!(result.len(), 3);
        let total: usize = result.iter().map(Assignment::len).sum();
        assert_eq!(total, 6);
        for gt in 0..2 {
            assert_eq!(result.iter().filter(|a| a.gt_to_query.len() > gt).count(), 3);
        }
    }

    #[test]
    fn single_group_reduces_to_hungarian() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cost = random_matrix(&mut rng, 5, 3);
        assert_eq!(
            group_wise_assign(std::slice::from_ref(&cost)).unwrap(),
            vec![hungarian(&cost).unwrap()]
        );
    }

    #[test]
    fn identical_groups_get_identical_assignments() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cost = random_matrix(&mut rng, 6, 4);
        let result = group_wise_assign(&[cost.clone(), cost.clone(), cost]).unwrap();
        assert!(result.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn infeasible_group_is_named() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let costs = vec![random_matrix(&mut rng, 3, 2), random_matrix(&mut rng, 1, 2)];
        assert!(matches!(
            group_wise_assign(&costs),
            Err(Error::InfeasibleGroup { group: 1, .. })
        ));
    }

    #[test]
    fn perturbing_one_group_leaves_others_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut costs: Vec<CostMatrix> = (0..3).map(|_| random_matrix(&mut rng, 5, 3)).collect();
        let before = group_wise_assign(&costs).unwrap();
        costs[1] = random_matrix(&mut rng, 5, 3);
        let after = group_wise_assign(&costs).unwrap();
        assert_eq!(before[0], after[0]);
        assert_eq!(before[2], after[2]);
    }

    #[test]
    fn one_to_many_single_gt_takes_cheapest() {
        let cost = matrix(&[&[0.5], &[0.1], &[0.9], &[0.3], &[0.2]]);
        let a = one_to_many_assign(&cost, 3).unwrap();
        assert_eq!(a.per_gt, vec![vec![1, 4, 3]]);
    }

    /// Scripted greedy: repeatedly take the globally cheapest admissible pair.
    fn greedy_oracle(cost: &CostMatrix, k: usize) -> Vec<Vec<usize>> {
        let mut per_gt = vec![Vec::new(); cost.gts()];
        let mut taken = vec![false; cost.queries()];
        for _ in 0..k * cost.gts() {
            let mut best: Option<(f64, usize, usize)> = None;
            for gt in 0..cost.gts() {
                if per_gt[gt].len() == k {
                    continue;
                }
                for q in 0..cost.queries() {
                    if taken[q] {
                        continue;
                    }
                    let c = cost.get(q, gt);
                    if best.is_none_or(|(bc, _, _)| c < bc) {
                        best = Some((c, q, gt));
                    }
                }
            }
            let (_, q, gt) = best.unwrap();
            taken[q] = true;
            per_gt[gt].push(q);
        }
        per_gt
    }

    #[test]
    fn one_to_many_contested_query() {
        // Query 0 is cheap for both; gt 1 reaches it with the smaller cost.
        let cost = matrix(&[&[0.2, 0.1], &[0.5, 0.9], &[0.6, 0.4], &[0.7, 0.8]]);
        let a = one_to_many_assign(&cost, 2).unwrap();
        assert_eq!(a.per_gt, greedy_oracle(&cost, 2));
        assert_eq!(a.per_gt, vec![vec![1, 3], vec![0, 2]]);
    }

    #[test]
    fn one_to_many_matches_greedy_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..300 {
            let k = rng.random_range(1..=3);
            let m = rng.random_range(0..=4);
            let n = k * m + rng.random_range(0..4);
            if n == 0 {
                continue;
            }
            let cost = random_matrix(&mut rng, n, m);
            assert_eq!(one_to_many_assign(&cost, k).unwrap().per_gt, greedy_oracle(&cost, k));
        }
    }

    #[test]
    fn one_to_many_errors() {
        let cost = matrix(&[&[0.2, 0.1], &[0.5, 0.9], &[0.6, 0.4]]);
        assert!(matches!(one_to_many_assign(&cost, 0), Err(Error::ZeroMultiplicity)));
        assert!(matches!(
            one_to_many_assign(&cost, 2),
            Err(Error::TooManyTargets { .. })
        ));
    }

    proptest! {
        #[test]
        fn shift_invariance(seed in 0u64..10_000, shift in -50.0..50.0f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.random_range(1..=7);
            let m = rng.random_range(0..=n);
            let cost = random_matrix(&mut rng, n, m);
            let shifted = CostMatrix::from_entries(n, m, cost.entries().iter().map(|v| v + shift).collect()).unwrap();
            let a = hungarian(&cost).unwrap();
            let b = hungarian(&shifted).unwrap();
            prop_assert_eq!(&a.gt_to_query, &b.gt_to_query);
            prop_assert!((b.total_cost - a.total_cost - m as f64 * shift).abs() < 1e-9);
        }

        #[test]
        fn one_to_many_is_exclusive(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = rng.random_range(1..=4);
            let m = rng.random_range(0..=4);
            let n = (k * m).max(1) + rng.random_range(0..5);
            let cost = random_matrix(&mut rng, n, m);
            let a = one_to_many_assign(&cost, k).unwrap();
            let mut seen = vec![false; n];
            for (q, _) in a.pairs() {
                prop_assert!(!seen[q]);
                seen[q] = true;
            }
            prop_assert!(a.per_gt.iter().all(|qs| qs.len() == k));
        }
    }
}
