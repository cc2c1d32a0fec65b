//! Staged Adam schedule, end-of-cycle snapshot averaging, batch-norm
//! recalibration and test evaluation.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{split, stack_images, BatchSource, Sample, SplitPools};
use crate::error::{Error, Result};
use crate::network::{mix_seed, Mode, Network};
use crate::objective::{evaluate_step, prepare_step, LossBreakdown};

pub const BETA1_WARM: f64 = 0.9;
pub const BETA1_DECAY: f64 = 0.5;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub lr0: f64,
    pub n_cycle: usize,
    pub n_decay: usize,
    pub steps_per_cycle: usize,
    pub m_l: usize,
    pub m_ul: usize,
}

impl Schedule {
    /// Learning rate during cycle `n_c` (0-based).
    pub fn lr(&self, n_c: usize) -> f64 {
        if n_c <= self.n_decay {
            self.lr0
        } else {
            self.lr0 * self.n_cycle.saturating_sub(n_c) as f64 / (self.n_cycle - self.n_decay) as f64
        }
    }

    pub fn beta1(&self, n_c: usize) -> f64 {
        if n_c <= self.n_decay {
            BETA1_WARM
        } else {
            BETA1_DECAY
        }
    }

    pub fn total_steps(&self) -> usize {
        self.n_cycle * self.steps_per_cycle
    }

    /// Number of snapshots entering the average.
    pub fn snapshots(&self) -> usize {
        self.n_cycle - self.n_decay + 1
    }
}

/// Adam moments; the state persists across learning-rate and β₁ changes.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, theta: &mut [f64], grad: &[f64], lr: f64, beta1: f64, beta2: f64) -> Result<()> {
        if theta.len() != self.m.len() || grad.len() != self.m.len() {
            return Err(Error::Shape {
                op: "adam",
                left: vec![theta.len(), grad.len()],
                right: vec![self.m.len()],
            });
        }
        self.t += 1;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        for i in 0..theta.len() {
            self.m[i] = beta1 * self.m[i] + (1.0 - beta1) * grad[i];
            self.v[i] = beta2 * self.v[i] + (1.0 - beta2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(())
    }
}

/// Running arithmetic mean of weight snapshots.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AveragedModel {
    pub mean: Vec<f64>,
    pub count: usize,
}

impl AveragedModel {
    pub fn add(&mut self, weights: &[f64]) -> Result<()> {
        if self.count == 0 {
            self.mean = weights.to_vec();
        } else if weights.len() != self.mean.len() {
            return Err(Error::Shape {
                op: "snapshot",
                left: vec![weights.len()],
                right: vec![self.mean.len()],
            });
        } else {
            let n = (self.count + 1) as f64;
            for (m, &w) in self.mean.iter_mut().zip(weights) {
                *m += (w - *m) / n;
            }
        }
        self.count += 1;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleMetrics {
    pub cycle: usize,
    pub lr: f64,
    pub beta1: f64,
    /// Mean over the steps of the cycle.
    pub loss: LossBreakdown,
    /// Test error with the running statistics, when scheduled.
    pub test_error: Option<f64>,
}

pub fn metrics_csv(rows: &[CycleMetrics]) -> String {
    let mut out = String::from("cycle,lr,beta1");
    for f in LossBreakdown::FIELDS {
        out.push(',');
        out.push_str(f);
    }
    out.push_str(",test_error\n");
    for r in rows {
        write!(out, "{},{},{}", r.cycle, r.lr, r.beta1).unwrap();
        for v in r.loss.values() {
            write!(out, ",{v}").unwrap();
        }
        match r.test_error {
            Some(e) => writeln!(out, ",{e}").unwrap(),
            None => out.push_str(",\n"),
        }
    }
    out
}

/// Fraction of `test` whose argmax prediction (lowest index on ties)
/// differs from the label; eval mode, no augmentation.
pub fn evaluate(net: &Network, test: &[Sample]) -> Result<f64> {
    let labeled: Vec<&Sample> = test.iter().filter(|s| s.label.is_some()).collect();
    if labeled.is_empty() {
        return Err(Error::EmptyPool("evaluation needs labeled samples"));
    }
    let mut wrong = 0usize;
    for chunk in labeled.chunks(256) {
        let owned: Vec<Sample> = chunk.iter().map(|s| (*s).clone()).collect();
        let probs = net.predict(&stack_images(&owned)?, 256)?;
        for (s, row) in chunk.iter().zip(probs.rows()) {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            if Some(best) != s.label {
                wrong += 1;
            }
        }
    }
    Ok(wrong as f64 / labeled.len() as f64)
}

pub struct TrainData {
    pub pools: SplitPools,
    pub test: Vec<Sample>,
}

impl TrainData {
    pub fn load(cfg: &RunConfig, base: &Path) -> Result<Self> {
        let (pool, test) = cfg.dataset.load(base)?;
        let pools = split(&pool, cfg.n_labeled, cfg.dataset.classes(), mix_seed(&[cfg.seed, 0x5b1]))?;
        Ok(Self { pools, test })
    }
}

pub struct TrainOutcome {
    pub prime: Network,
    pub averaged: Network,
    pub snapshot_mean: AveragedModel,
    pub metrics: Vec<CycleMetrics>,
    pub error_prime: f64,
    pub error_averaged: f64,
}

/// Loads averaged weights, re-estimates the batch-norm statistics on the
/// labeled pool and switches to eval mode.
pub fn finalize(net: &Network, weights: &[f64], labeled: &[Sample], cfg: &RunConfig, seed: u64) -> Result<Network> {
    let mut out = net.clone();
    out.load(weights)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    out.recalibrate_bn(labeled, cfg.recal_passes, cfg.recal_batch, &mut rng)?;
    out.mode = Mode::Eval;
    Ok(out)
}

pub fn build_network(cfg: &RunConfig) -> Result<Network> {
    let (channels, _, _) = cfg.dataset.geometry();
    let mut net = Network::build(cfg.arch, cfg.dataset.classes(), channels, cfg.flags(), mix_seed(&[cfg.seed, 0x2e7]))?;
    net.mode = Mode::Train;
    Ok(net)
}

/// Runs `n_cycle × steps_per_cycle` minibatch steps, snapshotting at the
/// end of every cycle from `n_decay` on (the initial weights count as the
/// snapshot after zero cycles), then finalizes the prime and averaged
/// models. `on_cycle` sees each cycle's metrics as soon as they exist.
/// On failure the current weights go to `interrupted.ckpt` in the output
/// directory, if one is configured.
pub fn run_training<F>(cfg: &RunConfig, data: &TrainData, on_cycle: F) -> Result<TrainOutcome>
where
    F: FnMut(&CycleMetrics),
{
    run_training_with(cfg, data, on_cycle, |_| {})
}

/// `run_training` that also hands every averaged snapshot to `on_snapshot`.
pub fn run_training_with<F, S>(cfg: &RunConfig, data: &TrainData, mut on_cycle: F, mut on_snapshot: S) -> Result<TrainOutcome>
where
    F: FnMut(&CycleMetrics),
    S: FnMut(&[f64]),
{
    cfg.validate()?;
    let mut net = build_network(cfg)?;
    let sc = &cfg.schedule;
    let mut adam = Adam::new(net.param_count());
    let mut avg = AveragedModel::default();
    let mut src = BatchSource::new(data.pools.clone(), cfg.flip, cfg.max_shift);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, 0x7a1]));
    let mut metrics = Vec::with_capacity(sc.n_cycle);
    if sc.n_decay == 0 {
        avg.add(net.theta())?;
        on_snapshot(net.theta());
    }
    let mut run = |net: &mut Network| -> Result<()> {
        for cycle in 0..sc.n_cycle {
            let lr = sc.lr(cycle);
            let beta1 = sc.beta1(cycle);
            let mut losses = Vec::with_capacity(sc.steps_per_cycle);
            for s in 0..sc.steps_per_cycle {
                let step = (cycle * sc.steps_per_cycle + s) as u64;
                let mb = src.next_minibatch(sc.m_l, sc.m_ul, &mut rng)?;
                let prep = prepare_step(net, &mb, &cfg.hp, &mut rng)?;
                let mut sg = evaluate_step(net, &prep, &cfg.hp, Some(mix_seed(&[cfg.seed, step])))?;
                if !sg.breakdown.total.is_finite() {
                    return Err(Error::InvalidArgument {
                        name: "loss",
                        reason: format!("non-finite objective at step {step}"),
                    });
                }
                sg.graph.backward(sg.root)?;
                let grad = net.gather_grad(&sg.graph, &sg.params);
                adam.step(net.theta_mut(), &grad, lr, beta1, BETA2)?;
                net.update_running(&sg.bn_stats);
                losses.push(sg.breakdown);
            }
            if cycle + 1 >= sc.n_decay {
                avg.add(net.theta())?;
                on_snapshot(net.theta());
            }
            let test_error = if cfg.eval_every > 0 && (cycle + 1) % cfg.eval_every == 0 {
                Some(evaluate(net, &data.test)?)
            } else {
                None
            };
            let m = CycleMetrics {
                cycle,
                lr,
                beta1,
                loss: LossBreakdown::mean(&losses),
                test_error,
            };
            on_cycle(&m);
            metrics.push(m);
        }
        Ok(())
    };
    if let Err(e) = run(&mut net) {
        if let Some(dir) = &cfg.out_dir {
            let _ = std::fs::create_dir_all(dir);
            let _ = net.save(&dir.join("interrupted.ckpt"));
        }
        return Err(e);
    }
    let labeled = &data.pools.labeled;
    let prime = finalize(&net, &net.snapshot(), labeled, cfg, mix_seed(&[cfg.seed, 0xbe1]))?;
    let averaged = finalize(&net, &avg.mean, labeled, cfg, mix_seed(&[cfg.seed, 0xbe2]))?;
    let error_prime = evaluate(&prime, &data.test)?;
    let error_averaged = evaluate(&averaged, &data.test)?;
    Ok(TrainOutcome {
        prime,
        averaged,
        snapshot_mean: avg,
        metrics,
        error_prime,
        error_averaged,
    })
}
