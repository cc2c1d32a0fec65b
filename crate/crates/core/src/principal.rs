//! Scalar machinery over a model output distribution `g`: the maximum
//! probability, the principal-probability indicator and distribution, the
//! residual mass, degenerated entropy and the reliability functions.
//!
//! Logs are natural throughout; `0 log 0 := 0`.

use std::ops::Deref;

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// A K-dimensional probability vector.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    /// Validates non-negativity and unit mass (within `1e-6`).
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if p.is_empty() || p.iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid("g", "entries must be non-negative"));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-6 {
            return Err(invalid("g", format!("entries sum to {s}, expected 1")));
        }
        Ok(Self(p))
    }

    pub fn one_hot(k: usize, class: usize) -> Self {
        let mut p = vec![0.0; k];
        p[class] = 1.0;
        Self(p)
    }

    pub fn uniform(k: usize) -> Self {
        Self(vec![1.0 / k as f64; k])
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for ProbDist {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

/// Principal-probability indicator: `indicator[j] = 1` iff `g[j] >= a * g_max`.
#[derive(Clone, Debug, PartialEq)]
pub struct PpiMask {
    pub indicator: Vec<f64>,
    pub a: f64,
}

impl PpiMask {
    pub fn contains(&self, j: usize) -> bool {
        self.indicator[j] > 0.0
    }

    pub fn count(&self) -> usize {
        self.indicator.iter().filter(|&&v| v > 0.0).count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReliabilityKind {
    /// `1 - H(g) / log K`
    Entropy,
    /// `||g||_2`
    L2norm,
    /// `cos(p, q)`
    Cosine,
    /// `<p, q>`
    Inner,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Reliability {
    pub value: f64,
    pub kind: ReliabilityKind,
}

pub fn g_max(g: &[f64]) -> f64 {
    g.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
}

fn check_ratio(a: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(invalid("a", format!("threshold ratio {a} not in [0, 1]")));
    }
    Ok(())
}

pub fn ppi(g: &[f64], a: f64) -> Result<PpiMask> {
    check_ratio(a)?;
    let thr = a * g_max(g);
    Ok(PpiMask {
        indicator: g.iter().map(|&v| if v >= thr { 1.0 } else { 0.0 }).collect(),
        a,
    })
}

/// Principal-probability distribution `(mask * g) / <mask, g>`.
pub fn ppd(g: &[f64], a: f64) -> Result<ProbDist> {
    let mask = ppi(g, a)?;
    let z: f64 = g.iter().zip(&mask.indicator).map(|(p, m)| p * m).sum();
    Ok(ProbDist(
        g.iter().zip(&mask.indicator).map(|(p, m)| p * m / z).collect(),
    ))
}

/// Mass outside the principal set, summed directly over the excluded
/// entries (equal to `1 - <mask, g>` for a normalized `g`).
pub fn residual_mass_with(g: &[f64], mask: &PpiMask) -> f64 {
    g.iter()
        .zip(&mask.indicator)
        .filter(|(_, &m)| m == 0.0)
        .map(|(p, _)| p)
        .sum()
}

pub fn residual_mass(g: &[f64], a: f64) -> Result<f64> {
    Ok(residual_mass_with(g, &ppi(g, a)?))
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().map(|&v| xlogx(v)).sum::<f64>()
}

/// The `K + 1` vector `[mask * g ; residual]`.
pub fn degenerate(g: &[f64], mask: &PpiMask) -> Vec<f64> {
    let mut out: Vec<f64> = g.iter().zip(&mask.indicator).map(|(p, m)| p * m).collect();
    out.push(residual_mass_with(g, mask));
    out
}

pub fn degenerated_entropy(g: &[f64], a: f64) -> Result<f64> {
    let mask = ppi(g, a)?;
    Ok(entropy(&degenerate(g, &mask)))
}

pub fn l2_norm(p: &[f64]) -> f64 {
    p.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn inner(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| a * b).sum()
}

/// Cosine of the angle between `p` and `q`; zero when either is zero.
pub fn cosine(p: &[f64], q: &[f64]) -> f64 {
    let d = l2_norm(p) * l2_norm(q);
    if d == 0.0 {
        0.0
    } else {
        inner(p, q) / d
    }
}

/// Reliability of a single distribution (`Entropy` or `L2norm`).
pub fn reliability(g: &[f64], kind: ReliabilityKind) -> Result<Reliability> {
    let value = match kind {
        ReliabilityKind::Entropy => {
            if g.len() < 2 {
                1.0
            } else {
                (1.0 - entropy(g) / (g.len() as f64).ln()).clamp(0.0, 1.0)
            }
        }
        ReliabilityKind::L2norm => l2_norm(g).min(1.0),
        other => {
            return Err(invalid(
                "kind",
                format!("{other:?} compares two distributions; use reliability_pair"),
            ))
        }
    };
    Ok(Reliability { value, kind })
}

/// Reliability of `q` against a label distribution `p` (`Cosine` or `Inner`).
pub fn reliability_pair(p: &[f64], q: &[f64], kind: ReliabilityKind) -> Result<Reliability> {
    let value = match kind {
        ReliabilityKind::Cosine => cosine(p, q).clamp(0.0, 1.0),
        ReliabilityKind::Inner => inner(p, q).clamp(0.0, 1.0),
        other => {
            return Err(invalid(
                "kind",
                format!("{other:?} scores one distribution; use reliability"),
            ))
        }
    };
    Ok(Reliability { value, kind })
}

/// Symmetric Dirichlet draw via normalized Gamma variates.
pub fn sample_dirichlet<R: Rng + ?Sized>(rng: &mut R, k: usize, concentration: f64) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    loop {
        let x: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
        let s: f64 = x.iter().sum();
        if s > 0.0 {
            return x.into_iter().map(|v| v / s).collect();
        }
    }
}

/// Differentiable `[mask * g ; 1 - <mask, g>]` for every row of `probs`
/// (`[N, K]` gives `[N, K + 1]`), masks held constant.
pub fn degenerate_graph(graph: &mut Graph, probs: Var, masks: &[PpiMask]) -> Result<Var> {
    let flat: Vec<f64> = masks.iter().flat_map(|m| m.indicator.iter().copied()).collect();
    let masked = graph.mul_const(probs, flat)?;
    let kept = graph.row_sum(masked)?;
    let neg = graph.scale(kept, -1.0);
    let residual = graph.add_scalar(neg, 1.0);
    graph.append_column(masked, residual)
}

/// Sum over rows of the degenerated entropy, as a differentiable scalar.
pub fn degenerated_entropy_graph(graph: &mut Graph, probs: Var, masks: &[PpiMask]) -> Result<Var> {
    let d = degenerate_graph(graph, probs, masks)?;
    let plogp = graph.xlogx(d);
    let s = graph.sum(plogp);
    Ok(graph.scale(s, -1.0))
}

/// Principal masks for every row of a `[N, K]` probability tensor.
pub fn masks_for(probs: &Tensor, a: f64) -> Result<Vec<PpiMask>> {
    probs.rows().map(|r| ppi(r, a)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn worked_example() -> Vec<f64> {
        let mut g = vec![0.01; 6];
        g.extend([0.04, 0.1, 0.3, 0.5]);
        g
    }

    #[test]
    fn g_max_examples() {
        assert_eq!(g_max(&worked_example()), 0.5);
        assert_eq!(g_max(&ProbDist::one_hot(4, 2)), 1.0);
        assert!((g_max(&ProbDist::uniform(10)) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ppi_examples() {
        let m = ppi(&worked_example(), 0.3).unwrap();
        let chosen: Vec<usize> = (0..10).filter(|&j| m.contains(j)).collect();
        assert_eq!(chosen, vec![8, 9]);
        assert_eq!(ppi(&worked_example(), 0.0).unwrap().count(), 10);
        let unique = [0.2, 0.5, 0.3];
        assert_eq!(ppi(&unique, 1.0).unwrap().count(), 1);
        assert!(ppi(&unique, 1.5).is_err());
        assert!(ppi(&unique, -0.1).is_err());
    }

    #[test]
    fn ppi_threshold_is_inclusive() {
        // 0.25 == 0.5 * 0.5 exactly
        let m = ppi(&[0.5, 0.25, 0.25], 0.5).unwrap();
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn ppd_examples() {
        let p = ppd(&worked_example(), 0.3).unwrap();
        let mut expected = vec![0.0; 10];
        expected[8] = 0.3 / 0.8;
        expected[9] = 0.5 / 0.8;
        for (a, b) in p.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((expected[8] - 0.375).abs() < 1e-15 && (expected[9] - 0.625).abs() < 1e-15);
        assert_eq!(&*ppd(&ProbDist::one_hot(3, 1), 0.4).unwrap(), &[0.0, 1.0, 0.0]);
        let g = worked_example();
        for (a, b) in ppd(&g, 0.0).unwrap().iter().zip(&g) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn residual_examples() {
        assert_eq!(residual_mass(&worked_example(), 0.3).unwrap(), 0.2);
        assert_eq!(residual_mass(&ProbDist::one_hot(5, 0), 0.3).unwrap(), 0.0);
        assert_eq!(residual_mass(&worked_example(), 0.0).unwrap(), 0.0);
    }

    #[test]
    fn degenerated_entropy_examples() {
        let de = degenerated_entropy(&worked_example(), 0.3).unwrap();
        let expected = -0.5 * 0.5f64.ln() - 0.3 * 0.3f64.ln() - 0.2 * 0.2f64.ln();
        assert!((de - expected).abs() < 1e-12);
        assert!((de - 1.02965).abs() < 1e-5);
        for a in [0.0, 0.3, 1.0] {
            assert_eq!(degenerated_entropy(&ProbDist::one_hot(7, 3), a).unwrap(), 0.0);
            let u = degenerated_entropy(&ProbDist::uniform(7), a).unwrap();
            assert!((u - 7f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_log_zero_convention() {
        assert_eq!(entropy(&[0.0, 1.0]), 0.0);
        assert!(entropy(&[0.0, 0.5, 0.5]).is_finite());
    }

    #[test]
    fn reliability_examples() {
        let e = reliability(&ProbDist::one_hot(10, 4), ReliabilityKind::Entropy).unwrap();
        assert_eq!(e.value, 1.0);
        let u = reliability(&ProbDist::uniform(10), ReliabilityKind::Entropy).unwrap();
        assert!(u.value.abs() < 1e-12);
        let oh = ProbDist::one_hot(4, 1);
        assert_eq!(reliability_pair(&oh, &oh, ReliabilityKind::Inner).unwrap().value, 1.0);
        let un = ProbDist::uniform(4);
        assert!((reliability_pair(&un, &un, ReliabilityKind::Cosine).unwrap().value - 1.0).abs() < 1e-15);
        assert!((reliability_pair(&un, &un, ReliabilityKind::Inner).unwrap().value - 0.25).abs() < 1e-15);
        assert!(reliability(&un, ReliabilityKind::Cosine).is_err());
        assert!(reliability_pair(&un, &un, ReliabilityKind::Entropy).is_err());
    }

    #[test]
    fn fact_one_inequalities_on_dirichlet_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &k in &[2usize, 10, 100] {
            for _ in 0..2000 {
                let p = sample_dirichlet(&mut rng, k, 0.5);
                let q = sample_dirichlet(&mut rng, k, 0.5);
                let h = entropy(&p) / (k as f64).ln();
                assert!((-1e-12..=1.0 + 1e-12).contains(&h));
                let n = l2_norm(&p);
                assert!(n >= 1.0 / (k as f64).sqrt() - 1e-12 && n <= 1.0 + 1e-12);
                let ip = inner(&p, &q);
                let c = cosine(&p, &q);
                assert!(ip >= 0.0 && ip <= c + 1e-12 && c <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn dirichlet_samples_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            assert!(ProbDist::new(sample_dirichlet(&mut rng, 6, 0.3)).is_ok());
        }
    }

    #[test]
    fn graph_de_matches_scalar_de() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let rows: Vec<Vec<f64>> = (0..4).map(|_| sample_dirichlet(&mut rng, 5, 1.0)).collect();
        let t = Tensor::new(vec![4, 5], rows.concat()).unwrap();
        let masks = masks_for(&t, 0.4).unwrap();
        let mut g = Graph::new();
        let v = g.constant(t);
        let de = degenerated_entropy_graph(&mut g, v, &masks).unwrap();
        let expected: f64 = rows.iter().map(|r| degenerated_entropy(r, 0.4).unwrap()).sum();
        assert!((g.value(de).item() - expected).abs() < 1e-12);
    }

    fn prob_vec() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, 2..12).prop_filter_map("nonzero", |v| {
            let s: f64 = v.iter().sum();
            (s > 1e-6).then(|| v.iter().map(|x| x / s).collect())
        })
    }

    proptest! {
        #[test]
        fn de_is_permutation_invariant(g in prob_vec(), a in 0.0f64..=1.0, rot in 0usize..12) {
            let mut h = g.clone();
            let r = rot % h.len();
            h.rotate_left(r);
            h.reverse();
            let d1 = degenerated_entropy(&g, a).unwrap();
            let d2 = degenerated_entropy(&h, a).unwrap();
            prop_assert!((d1 - d2).abs() < 1e-12);
        }

        #[test]
        fn masks_are_monotone(g in prob_vec(), a1 in 0.0f64..=1.0, a2 in 0.0f64..=1.0) {
            let (lo, hi) = if a1 <= a2 { (a1, a2) } else { (a2, a1) };
            let m_lo = ppi(&g, lo).unwrap();
            let m_hi = ppi(&g, hi).unwrap();
            for j in 0..g.len() {
                prop_assert!(!m_hi.contains(j) || m_lo.contains(j));
            }
            prop_assert!(m_hi.count() >= 1);
        }

        #[test]
        fn residual_is_bounded(g in prob_vec(), a in 0.0f64..=1.0) {
            let r = residual_mass(&g, a).unwrap();
            prop_assert!(r >= 0.0);
            prop_assert!(r <= 1.0 - g_max(&g) + 1e-12);
        }
    }
}
