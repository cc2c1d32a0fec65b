//! Aggregation/separation regularizer over confident unlabeled predictions.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::principal::{cosine, inner};
use crate::tensor::Tensor;

/// `cos(π/6)`: at or above, two predictions count as the same class.
pub fn cos_same() -> f64 {
    3f64.sqrt() / 2.0
}

/// `cos(π/3)`: at or below, two predictions count as different classes.
pub const COS_DIFF: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct ConfidentSet {
    pub members: Vec<usize>,
    pub beta: f64,
}

/// Batch rows with `||g||² >= β²`.
pub fn confident_set(probs: &Tensor, beta: f64) -> ConfidentSet {
    let members = probs
        .rows()
        .enumerate()
        .filter(|(_, r)| inner(r, r) >= beta * beta)
        .map(|(i, _)| i)
        .collect();
    ConfidentSet { members, beta }
}

/// Partners per confident member, as batch row indices; `None` stands for
/// the default vector (`0_K` for `diff`, `1_K` for `same`).
#[derive(Clone, Debug, PartialEq)]
pub struct PartnerAssignment {
    pub members: Vec<usize>,
    pub same: Vec<Option<usize>>,
    pub diff: Vec<Option<usize>>,
}

impl PartnerAssignment {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

/// For each confident member an independent random permutation of the
/// confident set is scanned from the front; the first entry with cosine
/// `<= 1/2` becomes `diff` and the first with cosine `>= √3/2` becomes
/// `same`. With `exclude_self` the member is left out of its own list.
pub fn assign_partners<R: Rng + ?Sized>(probs: &Tensor, beta: f64, exclude_self: bool, rng: &mut R) -> PartnerAssignment {
    let set = confident_set(probs, beta);
    let mut same = Vec::with_capacity(set.members.len());
    let mut diff = Vec::with_capacity(set.members.len());
    for &v in &set.members {
        let mut list = set.members.clone();
        list.shuffle(rng);
        let gv = probs.row(v);
        let candidates = list.iter().copied().filter(|&w| !(exclude_self && w == v));
        let mut s = None;
        let mut d = None;
        for w in candidates {
            let c = cosine(gv, probs.row(w));
            if d.is_none() && c <= COS_DIFF {
                d = Some(w);
            }
            if s.is_none() && c >= cos_same() {
                s = Some(w);
            }
            if s.is_some() && d.is_some() {
                break;
            }
        }
        same.push(s);
        diff.push(d);
    }
    PartnerAssignment {
        members: set.members,
        same,
        diff,
    }
}

/// Partner distributions `(g_diff, g_same)` of each member with the
/// defaults filled in.
pub fn partner_targets(assign: &PartnerAssignment, probs_old: &Tensor) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let k = probs_old.shape()[1];
    let diff = assign
        .diff
        .iter()
        .map(|d| d.map_or(vec![0.0; k], |w| probs_old.row(w).to_vec()))
        .collect();
    let same = assign
        .same
        .iter()
        .map(|s| s.map_or(vec![1.0; k], |w| probs_old.row(w).to_vec()))
        .collect();
    (diff, same)
}

/// `(1 / m_UL) Σ_v [<g_new(v), g_diff> + 1 - <g_new(v), g_same>]` with the
/// partner distributions held constant.
pub fn inner_loss_graph(
    g: &mut Graph,
    probs_new: Var,
    assign: &PartnerAssignment,
    probs_old: &Tensor,
    m_ul: usize,
) -> Result<Var> {
    let shape = g.shape(probs_new).to_vec();
    if shape.len() != 2 || shape[0] != m_ul {
        return Err(invalid("probs_new", format!("expected [{m_ul}, K], got {shape:?}")));
    }
    let k = shape[1];
    let (diff, same) = partner_targets(assign, probs_old);
    let mut c = vec![0.0; m_ul * k];
    for (i, &v) in assign.members.iter().enumerate() {
        for j in 0..k {
            c[v * k + j] += diff[i][j] - same[i][j];
        }
    }
    let dot = g.dot_const(probs_new, c)?;
    let shifted = g.add_scalar(dot, assign.len() as f64);
    Ok(g.scale(shifted, 1.0 / m_ul as f64))
}

/// Straight-line evaluation of the same loss.
pub fn inner_loss_value(probs_new: &Tensor, assign: &PartnerAssignment, probs_old: &Tensor, m_ul: usize) -> f64 {
    let (diff, same) = partner_targets(assign, probs_old);
    let mut total = 0.0;
    for (i, &v) in assign.members.iter().enumerate() {
        let gn = probs_new.row(v);
        total += inner(gn, &diff[i]) + 1.0 - inner(gn, &same[i]);
    }
    total / m_ul as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::principal::sample_dirichlet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rows(v: &[&[f64]]) -> Tensor {
        Tensor::new(vec![v.len(), v[0].len()], v.concat()).unwrap()
    }

    #[test]
    fn thresholds() {
        assert!((cos_same() - (std::f64::consts::PI / 6.0).cos()).abs() < 1e-15);
        assert!((COS_DIFF - (std::f64::consts::PI / 3.0).cos()).abs() < 1e-15);
    }

    #[test]
    fn confident_membership() {
        let p = rows(&[&[0.9, 0.1], &[0.5, 0.5], &[0.8, 0.2]]);
        // ||(0.8, 0.2)||² = 0.68 >= 0.64 while ||(0.5, 0.5)||² = 0.5 < 0.64
        assert_eq!(confident_set(&p, 0.8).members, vec![0, 2]);
        assert_eq!(confident_set(&p, 0.0).members, vec![0, 1, 2]);
    }

    #[test]
    fn same_class_one_hots_pair_up() {
        let p = rows(&[&[1.0, 0.0, 0.0], &[1.0, 0.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for exclude in [false, true] {
            let a = assign_partners(&p, 0.8, exclude, &mut rng);
            assert_eq!(a.diff, vec![None, None]);
            assert!(a.same.iter().all(Option::is_some));
        }
        let a = assign_partners(&p, 0.8, true, &mut rng);
        assert_eq!(a.same, vec![Some(1), Some(0)]);
    }

    #[test]
    fn different_classes_separate() {
        let p = rows(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = assign_partners(&p, 0.8, true, &mut rng);
        assert_eq!(a.diff, vec![Some(1), Some(0)]);
        assert_eq!(a.same, vec![None, None]);
        // with self in the list each member finds itself as the same-class partner
        let lit = assign_partners(&p, 0.8, false, &mut rng);
        assert_eq!(lit.diff, vec![Some(1), Some(0)]);
        assert_eq!(lit.same, vec![Some(0), Some(1)]);
    }

    #[test]
    fn forty_five_degrees_selects_nothing() {
        // cos((1,0), (1,1)/√2) = 1/√2, strictly between 1/2 and √3/2
        let s = 0.5;
        let p = rows(&[&[1.0, 0.0], &[s, s]]);
        assert!((cosine(p.row(0), p.row(1)) - 0.5f64.sqrt()).abs() < 1e-15);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = assign_partners(&p, 0.7, true, &mut rng);
        assert_eq!(a.members, vec![0, 1]);
        assert_eq!(a.same, vec![None, None]);
        assert_eq!(a.diff, vec![None, None]);
    }

    #[test]
    fn loss_examples_and_bounds() {
        let p = rows(&[&[1.0, 0.0], &[0.0, 1.0], &[1.0, 0.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = assign_partners(&p, 0.8, true, &mut rng);
        // predictions equal to their same-class partners and orthogonal to the different-class ones
        assert_eq!(inner_loss_value(&p, &a, &p, 3), 0.0);
        let defaults = PartnerAssignment {
            members: vec![0],
            same: vec![None],
            diff: vec![None],
        };
        assert_eq!(inner_loss_value(&p, &defaults, &p, 3), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..200 {
            let data: Vec<f64> = (0..6).flat_map(|_| sample_dirichlet(&mut rng, 3, 0.2)).collect();
            let q = Tensor::new(vec![6, 3], data).unwrap();
            let a = assign_partners(&q, 0.6, false, &mut rng);
            let new: Vec<f64> = (0..6).flat_map(|_| sample_dirichlet(&mut rng, 3, 1.0)).collect();
            let new = Tensor::new(vec![6, 3], new).unwrap();
            let (diff, same) = partner_targets(&a, &q);
            for (i, &v) in a.members.iter().enumerate() {
                let term = inner(new.row(v), &diff[i]) + 1.0 - inner(new.row(v), &same[i]);
                assert!((-1e-12..=2.0 + 1e-12).contains(&term));
                if let Some(w) = a.same[i] {
                    assert!(cosine(q.row(v), q.row(w)) >= cos_same());
                }
                if let Some(w) = a.diff[i] {
                    assert!(cosine(q.row(v), q.row(w)) <= COS_DIFF);
                }
            }
            let l = inner_loss_value(&new, &a, &q, 6);
            assert!(l >= -1e-12);
            let mut g = Graph::new();
            let pv = g.leaf(new.clone(), true);
            let lv = inner_loss_graph(&mut g, pv, &a, &q, 6).unwrap();
            assert!((g.value(lv).item() - l).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_ignores_partner_values_beyond_targets() {
        let old = rows(&[&[0.9, 0.1], &[0.95, 0.05], &[0.1, 0.9]]);
        let new = rows(&[&[0.6, 0.4], &[0.7, 0.3], &[0.2, 0.8]]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = assign_partners(&old, 0.8, true, &mut rng);
        let mut g = Graph::new();
        let pv = g.leaf(new.clone(), true);
        let oldc = g.leaf(old.clone(), true);
        let l = inner_loss_graph(&mut g, pv, &a, &old, 3).unwrap();
        g.backward(l).unwrap();
        assert!(g.grad(oldc).is_none() || g.grad(oldc).unwrap().data().iter().all(|&v| v == 0.0));
        // d/dg_new(v) = (g_diff - g_same) / m_UL
        let (diff, same) = partner_targets(&a, &old);
        let grad = g.grad(pv).unwrap();
        for (i, &v) in a.members.iter().enumerate() {
            for j in 0..2 {
                assert!((grad.data()[v * 2 + j] - (diff[i][j] - same[i][j]) / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn normalizes_by_full_batch() {
        let p = rows(&[&[1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let a = PartnerAssignment {
            members: vec![0],
            same: vec![None],
            diff: vec![Some(0)],
        };
        assert_eq!(inner_loss_value(&p, &a, &p, 4), 0.25);
    }
}
