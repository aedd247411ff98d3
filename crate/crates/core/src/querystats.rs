//! Query-position diagnostics: perturbation distance (PD), matching
//! distance (MD) and position dumps.
//!
//! For two groups, PD is the mean, over both directions, of each query's
//! Euclidean distance to the nearest query of the other group. MD is the
//! mean distance between the two queries matched to the same ground truth.
//! With more groups both are averaged over all unordered group pairs.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::assign::Assignment;
use crate::{Error, Result};

pub type Point = [f64; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct GroupPositions {
    groups: Vec<Vec<Point>>,
}

impl GroupPositions {
    pub fn new(groups: Vec<Vec<Point>>) -> Result<Self> {
        let n = groups.first().map_or(0, Vec::len);
        if groups.iter().any(|g| g.len() != n) {
            return Err(Error::Invalid("all groups must have the same number of queries".into()));
        }
        let outside = groups
            .iter()
            .flatten()
            .any(|p| !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]));
        if outside {
            return Err(Error::Invalid("positions must lie in the unit square".into()));
        }
        Ok(Self { groups })
    }

    /// Splits `K*N` row-ordered positions into `groups` groups.
    pub fn from_rows(rows: &[Point], groups: usize) -> Result<Self> {
        if groups == 0 || rows.len() % groups != 0 {
            return Err(Error::Invalid(format!(
                "{} positions do not split into {groups} groups",
                rows.len()
            )));
        }
        Self::new(rows.chunks(rows.len() / groups).map(<[Point]>::to_vec).collect())
    }

    pub fn groups(&self) -> usize {
        self.groups.len()
    }

    pub fn queries(&self) -> usize {
        self.groups.first().map_or(0, Vec::len)
    }

    pub fn group(&self, g: usize) -> &[Point] {
        &self.groups[g]
    }
}

fn dist(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

fn nearest(p: Point, others: &[Point]) -> f64 {
    others.iter().map(|&q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn pairs(k: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..k).flat_map(move |a| (a + 1..k).map(move |b| (a, b)))
}

/// Two-group PD.
pub fn pair_perturbation_distance(a: &[Point], b: &[Point]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    let forward: f64 = a.iter().map(|&p| nearest(p, b)).sum();
    let backward: f64 = b.iter().map(|&p| nearest(p, a)).sum();
    (forward + backward) / (a.len() + b.len()) as f64
}

pub fn perturbation_distance(pos: &GroupPositions) -> Result<f64> {
    let k = pos.groups();
    if k < 2 {
        return Err(Error::Invalid(format!(
            "perturbation distance needs at least 2 groups, got {k}"
        )));
    }
    let (sum, n) = pairs(k).fold((0.0, 0usize), |(s, n), (a, b)| {
        (s + pair_perturbation_distance(pos.group(a), pos.group(b)), n + 1)
    });
    Ok(sum / n as f64)
}

/// MD value; `defined` is false when there were no ground truths to match.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchingDistance {
    pub value: f64,
    pub defined: bool,
}

pub fn matching_distance(pos: &GroupPositions, assignments: &[Assignment]) -> Result<MatchingDistance> {
    let k = pos.groups();
    if k < 2 || assignments.len() != k {
        return Err(Error::Invalid(format!(
            "matching distance needs one assignment per group and at least 2 groups, got {} for {k}",
            assignments.len()
        )));
    }
    let m = assignments[0].len();
    if assignments.iter().any(|a| a.len() != m) {
        return Err(Error::Invalid(
            "assignments cover different numbers of ground truths".into(),
        ));
    }
    if let Some(&q) = assignments
        .iter()
        .flat_map(|a| &a.gt_to_query)
        .find(|&&q| q >= pos.queries())
    {
        return Err(Error::OutOfRange {
            what: "group queries",
            index: q,
            len: pos.queries(),
        });
    }
    if m == 0 {
        return Ok(MatchingDistance {
            value: 0.0,
            defined: false,
        });
    }
    let (sum, n) = pairs(k).fold((0.0, 0usize), |(s, n), (a, b)| {
        let total: f64 = (0..m)
            .map(|j| {
                let pa = pos.group(a)[assignments[a].gt_to_query[j]];
                let pb = pos.group(b)[assignments[b].gt_to_query[j]];
                dist(pa, pb)
            })
            .sum();
        (s + total / m as f64, n + 1)
    });
    Ok(MatchingDistance {
        value: sum / n as f64,
        defined: true,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PositionRow {
    pub group: usize,
    pub query: usize,
    pub x: f64,
    pub y: f64,
}

pub fn dump_positions(pos: &GroupPositions) -> Vec<PositionRow> {
    pos.groups
        .iter()
        .enumerate()
        .flat_map(|(group, pts)| {
            pts.iter().enumerate().map(move |(query, p)| PositionRow {
                group,
                query,
                x: p[0],
                y: p[1],
            })
        })
        .collect()
}

/// One-dimensional Wasserstein-1 distance between two equal-size samples.
fn wasserstein_1d(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len().max(1) as f64
}

/// Sum of the x- and y-marginal earth-mover distances between two point sets
/// of equal size.
pub fn marginal_emd(a: &[Point], b: &[Point]) -> f64 {
    let xs = |p: &[Point], i: usize| p.iter().map(|q| q[i]).collect::<Vec<f64>>();
    wasserstein_1d(xs(a, 0), xs(b, 0)) + wasserstein_1d(xs(a, 1), xs(b, 1))
}

/// Mean marginal EMD over all unordered group pairs.
pub fn mean_group_emd(pos: &GroupPositions) -> Result<f64> {
    let k = pos.groups();
    if k < 2 {
        return Err(Error::Invalid("group EMD needs at least 2 groups".into()));
    }
    let (sum, n) = pairs(k).fold((0.0, 0usize), |(s, n), (a, b)| {
        (s + marginal_emd(pos.group(a), pos.group(b)), n + 1)
    });
    Ok(sum / n as f64)
}

pub fn write_positions(path: &Path, rows: &[PositionRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DistanceRow {
    pub step: usize,
    pub pd: f64,
    pub md: f64,
}

pub fn write_distance_series(path: &Path, rows: &[DistanceRow]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn assignment(q: Vec<usize>) -> Assignment {
        Assignment {
            gt_to_query: q,
            total_cost: 0.0,
        }
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
        (0..n).map(|_| [rng.random(), rng.random()]).collect()
    }

    #[test]
    fn identical_groups_have_zero_pd() {
        let g = vec![[0.1, 0.2], [0.5, 0.5], [0.9, 0.3]];
        let pos = GroupPositions::new(vec![g.clone(), g]).unwrap();
        assert_eq!(perturbation_distance(&pos).unwrap(), 0.0);
    }

    #[test]
    fn translated_group_pd_is_the_shift() {
        let g1 = vec![[0.1, 0.1], [0.1, 0.5], [0.5, 0.1], [0.5, 0.5]];
        let g2: Vec<Point> = g1.iter().map(|p| [p[0] + 0.1, p[1]]).collect();
        let pos = GroupPositions::new(vec![g1, g2]).unwrap();
        assert!((perturbation_distance(&pos).unwrap() - 0.1).abs() < 1e-12);
    }

    #[test]
    fn pd_matches_exhaustive_scan_for_three_groups() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let groups: Vec<Vec<Point>> = (0..3).map(|_| random_points(&mut rng, 7)).collect();
        let pos = GroupPositions::new(groups.clone()).unwrap();
        let mut total = 0.0;
        for (a, b) in [(0, 1), (0, 2), (1, 2)] {
            let mut s = 0.0;
            for p in &groups[a] {
                let mut best = f64::MAX;
                for q in &groups[b] {
                    best = best.min(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
                }
                s += best;
            }
            for p in &groups[b] {
                let mut best = f64::MAX;
                for q in &groups[a] {
                    best = best.min(((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt());
                }
                s += best;
            }
            total += s / 14.0;
        }
        assert!((perturbation_distance(&pos).unwrap() - total / 3.0).abs() < 1e-12);
    }

    #[test]
    fn pd_requires_two_groups() {
        let pos = GroupPositions::new(vec![vec![[0.5, 0.5]]]).unwrap();
        assert!(perturbation_distance(&pos).is_err());
    }

    #[test]
    fn md_examples() {
        let g1 = vec![[0.2, 0.2], [0.9, 0.9]];
        let g2 = vec![[0.0, 0.0], [0.5, 0.6]];
        let pos = GroupPositions::new(vec![g1, g2]).unwrap();
        let md = matching_distance(&pos, &[assignment(vec![0]), assignment(vec![1])]).unwrap();
        assert!(md.defined);
        assert!((md.value - 0.5).abs() < 1e-12);

        let same = GroupPositions::new(vec![vec![[0.3, 0.3]], vec![[0.3, 0.3]]]).unwrap();
        let md = matching_distance(&same, &[assignment(vec![0]), assignment(vec![0])]).unwrap();
        assert_eq!(md.value, 0.0);

        let md = matching_distance(&pos, &[assignment(vec![]), assignment(vec![])]).unwrap();
        assert_eq!(
            md,
            MatchingDistance {
                value: 0.0,
                defined: false
            }
        );

        assert!(matching_distance(&pos, &[assignment(vec![0]), assignment(vec![0, 1])]).is_err());
        assert!(matching_distance(&pos, &[assignment(vec![0])]).is_err());
    }

    #[test]
    fn dump_lists_every_query() {
        let anchors = [0.0f64, 1.0, -2.0, 0.5];
        let pts: Vec<Point> = anchors
            .chunks(2)
            .map(|a| [crate::diffcore::sigmoid(a[0]), crate::diffcore::sigmoid(a[1])])
            .collect();
        let rows = dump_positions(&GroupPositions::new(vec![pts.clone()]).unwrap());
        assert_eq!(rows.len(), 2);
        assert_eq!(
            rows[0],
            PositionRow {
                group: 0,
                query: 0,
                x: 0.5,
                y: pts[0][1]
            }
        );
        assert_eq!((rows[1].x, rows[1].y), (pts[1][0], pts[1][1]));

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = random_points(&mut rng, 15);
        let pos = GroupPositions::from_rows(&pts, 3).unwrap();
        assert_eq!(dump_positions(&pos).len(), 15);
        assert_eq!(
            dump_positions(&pos)[7],
            PositionRow {
                group: 1,
                query: 2,
                x: pts[7][0],
                y: pts[7][1]
            }
        );
    }

    #[test]
    fn csv_outputs_have_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d").join("positions.csv");
        write_positions(
            &p,
            &[PositionRow {
                group: 0,
                query: 1,
                x: 0.25,
                y: 0.5,
            }],
        )
        .unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "group,query,x,y\n0,1,0.25,0.5\n");
        let p = dir.path().join("pdmd.csv");
        write_distance_series(
            &p,
            &[DistanceRow {
                step: 3,
                pd: 0.1,
                md: 0.2,
            }],
        )
        .unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), "step,pd,md\n3,0.1,0.2\n");
    }

    #[test]
    fn emd_of_identical_sets_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_points(&mut rng, 10);
        let mut b = a.clone();
        b.reverse();
        assert_eq!(marginal_emd(&a, &b), 0.0);
        let shifted: Vec<Point> = a.iter().map(|p| [p[0], p[1] * 0.5]).collect();
        assert!(marginal_emd(&a, &shifted) > 0.0);
    }

    fn arb_groups(k: usize) -> impl Strategy<Value = Vec<Vec<Point>>> {
        (1usize..8).prop_flat_map(move |n| {
            prop::collection::vec(
                prop::collection::vec((0.0..=1.0f64, 0.0..=1.0f64).prop_map(|(x, y)| [x, y]), n),
                k,
            )
        })
    }

    proptest! {
        #[test]
        fn pd_is_symmetric_under_relabeling(groups in arb_groups(3)) {
            let pos = GroupPositions::new(groups.clone()).unwrap();
            let mut rev = groups;
            rev.reverse();
            let flipped = GroupPositions::new(rev).unwrap();
            prop_assert!((perturbation_distance(&pos).unwrap() - perturbation_distance(&flipped).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn pd_zero_iff_counterparts_exist(groups in arb_groups(2), dup in any::<bool>()) {
            let mut groups = groups;
            if dup {
                let mut copy = groups[0].clone();
                copy.rotate_left(1);
                groups[1] = copy;
            }
            let pos = GroupPositions::new(groups.clone()).unwrap();
            let pd = perturbation_distance(&pos).unwrap();
            let all_matched = groups[0].iter().all(|p| groups[1].contains(p)) && groups[1].iter().all(|p| groups[0].contains(p));
            prop_assert_eq!(pd == 0.0, all_matched);
        }

        #[test]
        fn md_ignores_unmatched_queries(groups in arb_groups(2), seed in any::<u64>()) {
            let n = groups[0].len();
            let a = vec![assignment(vec![0]), assignment(vec![n - 1])];
            let pos = GroupPositions::new(groups.clone()).unwrap();
            let md = matching_distance(&pos, &a).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut moved = groups;
            for g in 0..2 {
                let keep = a[g].gt_to_query[0];
                for (q, p) in moved[g].iter_mut().enumerate() {
                    if q != keep {
                        *p = [rng.random(), rng.random()];
                    }
                }
            }
            let md2 = matching_distance(&GroupPositions::new(moved).unwrap(), &a).unwrap();
            prop_assert_eq!(md, md2);
        }
    }
}
