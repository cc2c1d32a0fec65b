//! Invariant and oracle suite shared by the command line and the
//! acceptance tests.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{preset, HyperParams, MixupKind};
use crate::dataset::{make_synthetic, split, BatchSource, Minibatch};
use crate::error::Result;
use crate::gda::{ccb_projections, ccb_signs, low_prefix, BlockGrid, GradField};
use crate::gradcheck::{directional_check, CheckReport, FD_STEP};
use crate::network::{Arch, ArchFlags, Network};
use crate::objective::{evaluate_step, prepare_step, LossBreakdown};
use crate::principal::{cosine, degenerated_entropy, entropy, inner, l2_norm, residual_mass, sample_dirichlet};
use crate::tensor::Tensor;
use crate::trainer::AveragedModel;

pub const GRAD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} {} ({:.2}s): {}",
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.seconds,
            self.detail
        )
    }
}

fn timed<F>(name: &'static str, f: F) -> CheckOutcome
where
    F: FnOnce() -> Result<(bool, String)>,
{
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckOutcome {
        name,
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    }
}

/// Deliberate defects for checking that the suite notices them.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Faults {
    /// Flip the brightness sign of the gCCB rule.
    pub broken_ccb_sign: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SuiteSizes {
    pub fact1_pairs: usize,
    pub grad_seeds: u64,
    pub ccb_instances: usize,
    pub omega_instances: usize,
    pub frozen_seeds: u64,
}

impl Default for SuiteSizes {
    fn default() -> Self {
        Self {
            fact1_pairs: 10_000,
            grad_seeds: 50,
            ccb_instances: 50,
            omega_instances: 200,
            frozen_seeds: 5,
        }
    }
}

impl SuiteSizes {
    /// A few seconds' worth of every check.
    pub fn quick() -> Self {
        Self {
            fact1_pairs: 200,
            grad_seeds: 2,
            ccb_instances: 20,
            omega_instances: 50,
            frozen_seeds: 1,
        }
    }
}

pub fn worked_example() -> CheckOutcome {
    timed("worked-example", || {
        let mut g = vec![0.01; 6];
        g.extend([0.04, 0.1, 0.3, 0.5]);
        let de = degenerated_entropy(&g, 0.3)?;
        let want = -(0.5f64 * 0.5f64.ln() + 0.3 * 0.3f64.ln() + 0.2 * 0.2f64.ln());
        let rem = residual_mass(&g, 0.3)?;
        let ok = (de - want).abs() < 1e-9 && rem == 0.2;
        Ok((ok, format!("DE {de:.15} vs {want:.15}, residual {rem}")))
    })
}

/// The four bounds of the reliability functions on Dirichlet pairs, plus
/// their equality cases at one-hot and identical inputs.
pub fn fact1(pairs: usize, seed: u64) -> CheckOutcome {
    timed("fact1", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slack = 1e-12;
        let mut violations = 0usize;
        let mut first = String::new();
        let mut note = |what: String, violations: &mut usize| {
            if *violations == 0 {
                first = what;
            }
            *violations += 1;
        };
        for &k in &[2usize, 10, 100] {
            let log_k = (k as f64).ln();
            for n in 0..pairs {
                let conc = [0.05, 0.3, 1.0, 5.0][n % 4];
                let p = sample_dirichlet(&mut rng, k, conc);
                let q = sample_dirichlet(&mut rng, k, conc);
                let h = entropy(&p) / log_k;
                let norm = l2_norm(&p);
                let ip = inner(&p, &q);
                let c = cosine(&p, &q);
                if !(-slack..=1.0 + slack).contains(&h) {
                    note(format!("K={k}: H/log K = {h}"), &mut violations);
                }
                if !(norm >= 1.0 / (k as f64).sqrt() - slack && norm <= 1.0 + slack) {
                    note(format!("K={k}: ||p|| = {norm}"), &mut violations);
                }
                if !(ip >= -slack && ip <= c + slack && c <= 1.0 + slack) {
                    note(format!("K={k}: <p,q> = {ip}, cos = {c}"), &mut violations);
                }
            }
            let e0: Vec<f64> = (0..k).map(|j| if j == 0 { 1.0 } else { 0.0 }).collect();
            let e1: Vec<f64> = (0..k).map(|j| if j == 1 { 1.0 } else { 0.0 }).collect();
            let p = sample_dirichlet(&mut rng, k, 1.0);
            let eq = entropy(&e0).abs() < slack
                && (l2_norm(&e0) - 1.0).abs() < slack
                && (inner(&e0, &e0) - 1.0).abs() < slack
                && inner(&e0, &e1).abs() < slack
                && (cosine(&p, &p) - 1.0).abs() < slack
                && (entropy(&vec![1.0 / k as f64; k]) / log_k - 1.0).abs() < slack
                && (l2_norm(&vec![1.0 / k as f64; k]) - 1.0 / (k as f64).sqrt()).abs() < slack;
            if !eq {
                note(format!("K={k}: equality case"), &mut violations);
            }
        }
        Ok((
            violations == 0,
            if violations == 0 {
                format!("{pairs} pairs for each K in {{2, 10, 100}}")
            } else {
                format!("{violations} violations, first: {first}")
            },
        ))
    })
}

/// Small synthetic minibatch and tiny network.
pub fn tiny_problem(seed: u64, k: usize, flags: ArchFlags) -> Result<(Network, Minibatch)> {
    let pool = make_synthetic(60, k, seed);
    let pools = split(&pool, 12, k, seed)?;
    let mut src = BatchSource::new(pools, true, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mb = src.next_minibatch(4, 6, &mut rng)?;
    let net = Network::build(Arch::Tiny, k, 3, flags, seed)?;
    Ok((net, mb))
}

/// Every term switched on, sized for 8x8 inputs and a near-uniform
/// initial network.
pub fn tiny_hp() -> HyperParams {
    let mut hp = preset("smoke").expect("smoke preset").hp;
    hp.a = 0.5;
    hp.eps = 1.0;
    hp.delta_gvat = 1.0;
    hp.rho_gccb = 1.2;
    hp.rho_groi = 0.9;
    hp.delta_xu = 1.0;
    hp.beta = 0.55;
    hp.inner = true;
    hp.m_ccb = 4;
    hp.m_roi = 2;
    hp
}

fn term_value(b: &LossBreakdown, name: &str) -> f64 {
    let i = LossBreakdown::FIELDS.iter().position(|f| *f == name).expect("field");
    b.values()[i]
}

/// Directional FD check of one named term (or `total`) at the frozen
/// quantities of `seed`'s minibatch.
pub fn term_gradient(seed: u64, name: &str, hp: &HyperParams, trials: usize) -> Result<CheckReport> {
    let flags = if seed % 2 == 0 { ArchFlags::SVHN } else { ArchFlags::CIFAR };
    let (net, mb) = tiny_problem(seed, 3, flags)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let prep = prepare_step(&net, &mb, hp, &mut rng)?;
    let mut sg = evaluate_step(&net, &prep, hp, None)?;
    let root = if name == "total" { sg.root } else { sg.term(name).expect("active term") };
    sg.graph.backward(root)?;
    let grad = net.gather_grad(&sg.graph, &sg.params);
    let theta = net.theta().to_vec();
    let f = |th: &[f64]| -> Result<(f64, u64)> {
        let mut n = net.clone();
        n.load(th)?;
        let s = evaluate_step(&n, &prep, hp, None)?;
        Ok((term_value(&s.breakdown, name), s.graph.branch_signature()))
    };
    directional_check(f, &theta, &grad, trials, FD_STEP, &mut rng)
}

pub const TERM_NAMES: [&str; 7] = ["ce_xx", "gvat", "gccb", "groi", "rem", "ce_xu", "inner"];

/// Autodiff against central differences for every loss term.
pub fn loss_gradients(seeds: u64) -> CheckOutcome {
    timed("loss-gradients", || {
        let mut report = CheckReport::default();
        let mut worst = ("", 0u64);
        for seed in 0..seeds {
            let mut hp = tiny_hp();
            if seed % 3 == 1 {
                hp.mixup = MixupKind::Normal;
                hp.label_reliability = crate::principal::ReliabilityKind::Cosine;
            }
            for name in TERM_NAMES {
                let r = term_gradient(seed, name, &hp, 2)?;
                if r.max_rel_err > report.max_rel_err {
                    worst = (name, seed);
                }
                report.merge(r);
            }
        }
        let ok = report.passes(GRAD_TOL) && report.trials == (seeds as usize) * TERM_NAMES.len() * 2;
        Ok((
            ok,
            format!(
                "{} directions over {seeds} seeds, max rel err {:.2e} ({} seed {}), {} redrawn",
                report.trials, report.max_rel_err, worst.0, worst.1, report.skipped
            ),
        ))
    })
}

/// FD of the weighted objective against autodiff with every term on.
pub fn frozen_target(seeds: u64) -> CheckOutcome {
    timed("frozen-target", || {
        let hp = tiny_hp();
        let mut report = CheckReport::default();
        for seed in 0..seeds {
            report.merge(term_gradient(1000 + seed, "total", &hp, 4)?);
        }
        Ok((
            report.passes(GRAD_TOL),
            format!("{} directions, max rel err {:.2e}", report.trials, report.max_rel_err),
        ))
    })
}

/// Linearized DE change of a sign assignment for one block.
fn ccb_linear(su: &[f64], s1: &[f64], cont: &[f64], bri: &[f64], mag_cont: f64, mag_bri: f64) -> f64 {
    (0..su.len())
        .map(|c| mag_cont * cont[c] * su[c] + mag_bri * bri[c] * s1[c])
        .sum()
}

/// The sign rule against all 64 assignments on single-block 3-channel
/// instances.
pub fn gccb_bruteforce(instances: usize, seed: u64, faults: Faults) -> CheckOutcome {
    timed("gccb-signs", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut misses = 0;
        for n in 0..instances {
            let m = [2usize, 4, 8][n % 3];
            let u = Tensor::new(vec![3, m, m], (0..3 * m * m).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let r = Tensor::new(vec![3, m, m], (0..3 * m * m).map(|_| rng.random_range(-1.0..1.0)).collect())?;
            let field = GradField::new(r);
            let grid = BlockGrid::new(m, m, m)?;
            let (su, s1) = ccb_projections(&u, &field, &grid);
            let (cont, mut bri) = ccb_signs(&u, &field, &grid);
            if faults.broken_ccb_sign {
                bri.iter_mut().for_each(|s| *s = -*s);
            }
            let (mc, mb) = (rng.random_range(0.05..0.5), rng.random_range(0.05..0.5));
            let values: Vec<f64> = (0..64u32)
                .map(|bits| {
                    let cs: Vec<f64> = (0..3).map(|c| if bits >> c & 1 == 1 { 1.0 } else { -1.0 }).collect();
                    let bs: Vec<f64> = (0..3).map(|c| if bits >> (c + 3) & 1 == 1 { 1.0 } else { -1.0 }).collect();
                    ccb_linear(&su, &s1, &cs, &bs, mc, mb)
                })
                .collect();
            let best = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let chosen: u32 = (0..3).map(|c| u32::from(cont[c] > 0.0) << c).sum::<u32>()
                + (0..3).map(|c| u32::from(bri[c] > 0.0) << (c + 3)).sum::<u32>();
            if values[chosen as usize] != best {
                misses += 1;
            }
        }
        Ok((misses == 0, format!("{} of {instances} instances off the maximum", misses)))
    })
}

/// Independent smallest-prefix search: repeatedly take the smallest
/// remaining mass until the running sum reaches `lambda`.
fn enumerate_low(masses: &[f64], lambda: f64) -> Vec<usize> {
    if masses.iter().all(|&m| m == 0.0) {
        return Vec::new();
    }
    let mut left: Vec<usize> = (0..masses.len()).collect();
    let mut taken = Vec::new();
    let mut cum = 0.0;
    while !left.is_empty() {
        let (pos, _) = left
            .iter()
            .enumerate()
            .min_by(|a, b| masses[*a.1].total_cmp(&masses[*b.1]).then(a.1.cmp(b.1)))
            .expect("non-empty");
        let q = left.remove(pos);
        cum += masses[q];
        taken.push(q);
        if cum >= lambda {
            break;
        }
    }
    taken
}

pub fn omega_low(instances: usize, seed: u64) -> CheckOutcome {
    timed("omega-low", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bad = 0;
        for n in 0..instances {
            let q = rng.random_range(2..=64);
            let mut masses = sample_dirichlet(&mut rng, q, [0.2, 1.0, 4.0][n % 3]);
            if n % 5 == 0 {
                // ties and empty blocks
                let v = masses[0];
                masses.iter_mut().step_by(3).for_each(|m| *m = v);
                masses[q - 1] = 0.0;
                let s: f64 = masses.iter().sum();
                masses.iter_mut().for_each(|m| *m /= s);
            }
            let lambda = if n % 7 == 0 { [0.0, 1.0][n % 2] } else { rng.random_range(0.0..1.0) };
            let got = low_prefix(&masses, lambda);
            let cum: f64 = got.iter().map(|&i| masses[i]).sum();
            let pred: f64 = got.iter().take(got.len().saturating_sub(1)).map(|&i| masses[i]).sum();
            let full = got.len() == q;
            let reaches = cum >= lambda || full;
            let minimal = got.len() <= 1 || pred < lambda;
            if got != enumerate_low(&masses, lambda) || !reaches || !minimal {
                bad += 1;
            }
        }
        Ok((bad == 0, format!("{bad} of {instances} mass vectors disagree")))
    })
}

pub fn averaging(seed: u64) -> CheckOutcome {
    timed("snapshot-average", || {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let snaps: Vec<Vec<f64>> = (0..41).map(|_| (0..500).map(|_| rng.random_range(-3.0..3.0)).collect()).collect();
        let mut avg = AveragedModel::default();
        for s in &snaps {
            avg.add(s)?;
        }
        let worst = (0..500)
            .map(|j| (avg.mean[j] - snaps.iter().map(|s| s[j]).sum::<f64>() / 41.0).abs())
            .fold(0.0, f64::max);
        Ok((worst < 1e-12, format!("max deviation {worst:.2e}")))
    })
}

pub fn run_suite(sizes: SuiteSizes, faults: Faults) -> Vec<CheckOutcome> {
    vec![
        worked_example(),
        fact1(sizes.fact1_pairs, 1),
        loss_gradients(sizes.grad_seeds),
        gccb_bruteforce(sizes.ccb_instances, 2, faults),
        omega_low(sizes.omega_instances, 3),
        frozen_target(sizes.frozen_seeds),
        averaging(4),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for c in run_suite(SuiteSizes::quick(), Faults::default()) {
            assert!(c.passed, "{}", c.line());
        }
    }

    #[test]
    fn broken_sign_rule_is_caught() {
        let c = gccb_bruteforce(20, 2, Faults { broken_ccb_sign: true });
        assert!(!c.passed, "{}", c.line());
    }

    #[test]
    fn enumeration_agrees_on_examples() {
        assert_eq!(enumerate_low(&[0.1, 0.4, 0.2, 0.3], 0.25), vec![0, 2]);
        assert_eq!(enumerate_low(&[0.0, 0.0], 0.5), Vec::<usize>::new());
        assert_eq!(enumerate_low(&[0.5, 0.5], 0.0), vec![0]);
    }
}
