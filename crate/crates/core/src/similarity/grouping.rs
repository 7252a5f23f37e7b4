//! Exhaustive partition search over a task similarity matrix.
//!
//! Every partition of the task set is scored: a task's value inside a group
//! is its mean similarity to the other members, a group's value is the mean
//! of its members' values (singletons take a caller-supplied value), and a
//! grouping's value is the mean over its groups. The maximizing partition
//! wins, with ties broken by fewer groups and then by the lexicographically
//! smallest canonical form.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Symmetric pairwise-similarity matrix over an ordered task list.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimilarityMatrix {
    tasks: Vec<String>,
    s: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn new(tasks: Vec<String>, s: Vec<f64>) -> Result<Self> {
        let t = tasks.len();
        if s.len() != t * t {
            return Err(Error::shape(format!(
                "similarity matrix for {t} tasks needs {} entries, got {}",
                t * t,
                s.len()
            )));
        }
        for i in 0..t {
            if (s[i * t + i] - 1.0).abs() > 1e-12 {
                return Err(Error::contract("similarity diagonal must be 1"));
            }
            for j in 0..t {
                if !s[i * t + j].is_finite() {
                    return Err(Error::numeric("similarity entries must be finite"));
                }
                if (s[i * t + j] - s[j * t + i]).abs() > 1e-12 {
                    return Err(Error::contract("similarity matrix must be symmetric"));
                }
            }
        }
        Ok(SimilarityMatrix { tasks, s })
    }

    /// Builds a matrix from the strict upper triangle, row by row.
    pub fn from_upper(tasks: Vec<String>, upper: &[f64]) -> Result<Self> {
        let t = tasks.len();
        if upper.len() != t * (t - 1) / 2 {
            return Err(Error::shape(format!(
                "expected {} upper-triangle entries, got {}",
                t * (t - 1) / 2,
                upper.len()
            )));
        }
        let mut s = vec![0.0; t * t];
        let mut it = upper.iter();
        for i in 0..t {
            s[i * t + i] = 1.0;
            for j in (i + 1)..t {
                let v = *it.next().unwrap();
                s[i * t + j] = v;
                s[j * t + i] = v;
            }
        }
        SimilarityMatrix::new(tasks, s)
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn tasks(&self) -> &[String] {
        &self.tasks
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.s[i * self.tasks.len() + j]
    }

    pub fn entries(&self) -> &[f64] {
        &self.s
    }
}

/// One group of a grouping: member indices into the similarity matrix's
/// task list, with the group's similarity value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Group {
    pub members: Vec<usize>,
    pub value: f64,
}

/// A partition of the task set together with its per-group and overall
/// values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grouping {
    pub groups: Vec<Group>,
    pub value: f64,
}

impl Grouping {
    /// Canonical partition shape: members ascending inside each group,
    /// groups ordered by first member.
    pub fn canonical(&self) -> Vec<Vec<usize>> {
        let mut shape: Vec<Vec<usize>> = self
            .groups
            .iter()
            .map(|g| {
                let mut m = g.members.clone();
                m.sort_unstable();
                m
            })
            .collect();
        shape.sort();
        shape
    }
}

/// Visits every partition of `{0, …, n−1}` as a restricted-growth string:
/// `assign[i]` is the block index of element `i`, blocks numbered in order
/// of first appearance. Enumeration order is deterministic.
pub fn enumerate_partitions(n: usize, mut visit: impl FnMut(&[usize])) {
    assert!(n >= 1);
    let mut assign = vec![0usize; n];
    fn rec(assign: &mut Vec<usize>, i: usize, blocks: usize, visit: &mut impl FnMut(&[usize])) {
        let n = assign.len();
        if i == n {
            visit(assign);
            return;
        }
        for b in 0..=blocks {
            assign[i] = b;
            let next_blocks = if b == blocks { blocks + 1 } else { blocks };
            rec(assign, i + 1, next_blocks, visit);
        }
    }
    rec(&mut assign, 1, 1, &mut visit);
}

fn score_partition(s: &SimilarityMatrix, groups: &[Vec<usize>], singleton_value: f64) -> Grouping {
    let mut scored = Vec::with_capacity(groups.len());
    let mut total = 0.0;
    for g in groups {
        let value = if g.len() == 1 {
            singleton_value
        } else {
            // mean over members of (mean similarity to the other members)
            let mut member_sum = 0.0;
            for &t in g {
                let mut sim = 0.0;
                for &o in g {
                    if o != t {
                        sim += s.get(t, o);
                    }
                }
                member_sum += sim / (g.len() - 1) as f64;
            }
            member_sum / g.len() as f64
        };
        total += value;
        scored.push(Group {
            members: g.clone(),
            value,
        });
    }
    Grouping {
        value: total / groups.len() as f64,
        groups: scored,
    }
}

fn groups_from_assignment(assign: &[usize]) -> Vec<Vec<usize>> {
    let blocks = assign.iter().copied().max().unwrap_or(0) + 1;
    let mut groups = vec![Vec::new(); blocks];
    for (task, &b) in assign.iter().enumerate() {
        groups[b].push(task);
    }
    groups
}

/// Grouping values within this band are considered tied, so partitions that
/// are equal under exact arithmetic (e.g. uniform similarity matrices) fall
/// through to the deterministic tie-break instead of being separated by
/// rounding noise.
const VALUE_TIE_EPS: f64 = 1e-12;

/// Exhaustively searches all partitions of the task set for the grouping
/// with maximal value. `singleton_value` is the value assigned to lone
/// tasks, conventionally the fusion threshold so that merging is preferred
/// exactly when mutual similarity clears that bar. Ties (within 1e-12) are
/// broken by fewer groups, then by lexicographically smallest canonical
/// form.
pub fn best_grouping(s: &SimilarityMatrix, singleton_value: f64) -> Result<Grouping> {
    let t = s.len();
    if t == 0 {
        return Err(Error::precondition("best_grouping over an empty task set"));
    }
    if t > 10 {
        return Err(Error::precondition(format!(
            "best_grouping enumerates all partitions; {t} tasks exceeds the supported 10"
        )));
    }
    let mut best: Option<Grouping> = None;
    enumerate_partitions(t, |assign| {
        let groups = groups_from_assignment(assign);
        let candidate = score_partition(s, &groups, singleton_value);
        let replace = match &best {
            None => true,
            Some(b) => {
                if candidate.value > b.value + VALUE_TIE_EPS {
                    true
                } else if candidate.value >= b.value - VALUE_TIE_EPS {
                    let (cg, bg) = (candidate.groups.len(), b.groups.len());
                    cg < bg || (cg == bg && candidate.canonical() < b.canonical())
                } else {
                    false
                }
            }
        };
        if replace {
            best = Some(candidate);
        }
    });
    Ok(best.expect("at least one partition exists"))
}

/// Applies the fusion threshold: exactly the groups with at least two
/// members and a group value of at least `gamma` fuse.
pub fn fusion_decision(g: &Grouping, gamma: f64) -> Vec<Group> {
    g.groups
        .iter()
        .filter(|grp| grp.members.len() >= 2 && grp.value >= gamma)
        .cloned()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sim3(s12: f64, s13: f64, s23: f64) -> SimilarityMatrix {
        SimilarityMatrix::from_upper(
            vec!["t1".into(), "t2".into(), "t3".into()],
            &[s12, s13, s23],
        )
        .unwrap()
    }

    #[test]
    fn bell_numbers_check_out() {
        for (n, bell) in [(1usize, 1usize), (2, 2), (3, 5), (4, 15), (5, 52), (6, 203)] {
            let mut count = 0;
            enumerate_partitions(n, |_| count += 1);
            assert_eq!(count, bell, "Bell({n})");
        }
    }

    #[test]
    fn single_task_is_a_singleton_group() {
        let s = SimilarityMatrix::new(vec!["only".into()], vec![1.0]).unwrap();
        let g = best_grouping(&s, 0.6).unwrap();
        assert_eq!(g.groups.len(), 1);
        assert_eq!(g.groups[0].members, vec![0]);
        assert_eq!(g.value, 0.6);
    }

    #[test]
    fn worked_three_task_example() {
        // enumerating the 5 partitions by hand gives {1,2},{3} at 0.825
        let s = sim3(0.9, 0.2, 0.3);
        let g = best_grouping(&s, 0.75).unwrap();
        assert_eq!(g.canonical(), [vec![0, 1], vec![2]]);
        assert!((g.groups[0].value - 0.9).abs() < 1e-12);
        assert!((g.groups[1].value - 0.75).abs() < 1e-12);
        assert!((g.value - 0.825).abs() < 1e-12);
    }

    #[test]
    fn uniformly_similar_four_tasks_fully_merge() {
        let s = SimilarityMatrix::from_upper((0..4).map(|i| format!("t{i}")).collect(), &[0.95; 6])
            .unwrap();
        let g = best_grouping(&s, 0.75).unwrap();
        assert_eq!(g.canonical(), [vec![0, 1, 2, 3]]);
        assert!((g.value - 0.95).abs() < 1e-12);
    }

    #[test]
    fn grouping_value_is_mean_of_group_values() {
        let s = sim3(0.9, 0.2, 0.3);
        let g = best_grouping(&s, 0.75).unwrap();
        let mean = g.groups.iter().map(|x| x.value).sum::<f64>() / g.groups.len() as f64;
        assert!((g.value - mean).abs() < 1e-12);
    }

    #[test]
    fn fusion_decision_thresholds() {
        let s = sim3(0.9, 0.2, 0.3);
        let g = best_grouping(&s, 0.75).unwrap();
        let fused = fusion_decision(&g, 0.75);
        assert_eq!(fused.len(), 1);
        assert_eq!(fused[0].members, vec![0, 1]);

        // all V_G below the bar → nothing fuses
        assert!(fusion_decision(&g, 0.95).is_empty());

        // vacuous threshold → every non-singleton group fuses
        let all = fusion_decision(&g, 0.0);
        assert_eq!(all.len(), 1);
    }

    #[test]
    fn empty_task_set_is_a_precondition_error() {
        let s = SimilarityMatrix::new(vec![], vec![]).unwrap();
        assert!(matches!(
            best_grouping(&s, 0.5),
            Err(crate::error::Error::Precondition(_))
        ));
    }

    #[test]
    fn disjoint_cover_invariant() {
        let s = sim3(0.4, 0.6, 0.1);
        let g = best_grouping(&s, 0.5).unwrap();
        let mut seen = [false; 3];
        for grp in &g.groups {
            for &m in &grp.members {
                assert!(!seen[m], "task {m} appears twice");
                seen[m] = true;
            }
        }
        assert!(seen.iter().all(|&x| x));
    }

    proptest! {
        #[test]
        fn permutation_equivariance(
            upper in proptest::collection::vec(-0.2f64..1.0, 10),
            swap in 0usize..5,
        ) {
            // 5 tasks, 10 upper-triangle entries
            let tasks: Vec<String> = (0..5).map(|i| format!("t{i}")).collect();
            let s = SimilarityMatrix::from_upper(tasks.clone(), &upper).unwrap();
            let gamma = 0.5;

            // permutation: rotate by `swap`
            let perm: Vec<usize> = (0..5).map(|i| (i + swap) % 5).collect();
            let mut ps = vec![0.0; 25];
            for i in 0..5 {
                for j in 0..5 {
                    ps[perm[i] * 5 + perm[j]] = s.get(i, j);
                }
            }
            let s_perm = SimilarityMatrix::new(tasks, ps).unwrap();

            let g = best_grouping(&s, gamma).unwrap();
            let gp = best_grouping(&s_perm, gamma).unwrap();
            prop_assert!((g.value - gp.value).abs() < 1e-9);

            // when the optimum is unique, the partitions must map exactly
            let mut values = Vec::new();
            enumerate_partitions(5, |assign| {
                let groups = groups_from_assignment(assign);
                values.push(score_partition(&s, &groups, gamma).value);
            });
            values.sort_by(|a, b| b.partial_cmp(a).unwrap());
            if values[0] - values[1] > 1e-9 {
                let mut mapped: Vec<Vec<usize>> = g
                    .canonical()
                    .into_iter()
                    .map(|grp| {
                        let mut m: Vec<usize> = grp.into_iter().map(|t| perm[t]).collect();
                        m.sort_unstable();
                        m
                    })
                    .collect();
                mapped.sort();
                prop_assert_eq!(mapped, gp.canonical());
            }
        }

        #[test]
        fn grouping_invariants_hold(upper in proptest::collection::vec(-0.2f64..1.0, 6)) {
            let tasks: Vec<String> = (0..4).map(|i| format!("t{i}")).collect();
            let s = SimilarityMatrix::from_upper(tasks, &upper).unwrap();
            let g = best_grouping(&s, 0.6).unwrap();
            let mut seen = [false; 4];
            for grp in &g.groups {
                for &m in &grp.members {
                    prop_assert!(!seen[m]);
                    seen[m] = true;
                }
            }
            prop_assert!(seen.iter().all(|&x| x));
            let mean = g.groups.iter().map(|x| x.value).sum::<f64>() / g.groups.len() as f64;
            prop_assert!((g.value - mean).abs() < 1e-12);
        }
    }
}
