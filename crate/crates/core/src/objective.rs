//! The composite per-minibatch objective. `prepare_step` computes every
//! quantity that is held at the current weights (targets, masks,
//! reliabilities, augmented images, mixes, partners); `evaluate_step`
//! records the differentiable part.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{ChannelStats, Graph, Var};
use crate::config::{HyperParams, MixupKind};
use crate::dataset::{one_hot_rows, Minibatch};
use crate::error::{invalid, Result};
use crate::gda::{de_fields, gccb, groi, gvat, roi_partition, GradField, RoiPartition};
use crate::inner::{assign_partners, inner_loss_graph, PartnerAssignment};
use crate::mixup::{collab_mix, groi_mix, mixup_supervised, plain, self_mixup, MixedBatch};
use crate::network::{mix_seed, BnMode, ForwardOpts, Network, Params};
use crate::principal::{degenerate, degenerate_graph, masks_for, reliability, reliability_pair, PpiMask};
use crate::tensor::Tensor;

/// Lower clamp of predicted probabilities inside logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_xx: f64,
    pub gvat: f64,
    pub groi: f64,
    pub rem: f64,
    pub gccb: f64,
    pub ce_xu: f64,
    pub inner: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 8] = ["ce_xx", "gvat", "groi", "rem", "gccb", "ce_xu", "inner", "total"];

    pub fn values(&self) -> [f64; 8] {
        [
            self.ce_xx, self.gvat, self.groi, self.rem, self.gccb, self.ce_xu, self.inner, self.total,
        ]
    }

    pub fn from_values(v: [f64; 8]) -> Self {
        Self {
            ce_xx: v[0],
            gvat: v[1],
            groi: v[2],
            rem: v[3],
            gccb: v[4],
            ce_xu: v[5],
            inner: v[6],
            total: v[7],
        }
    }

    /// The weighted sum of the individual terms.
    pub fn weighted_total(&self, hp: &HyperParams) -> f64 {
        self.ce_xx
            + hp.delta_gvat * self.gvat
            + hp.rho_groi * (self.groi + self.rem)
            + hp.rho_gccb * self.gccb
            + hp.delta_xu * self.ce_xu
            + self.inner
    }

    /// Field-wise mean of `items`.
    pub fn mean(items: &[LossBreakdown]) -> Self {
        let mut acc = [0.0; 8];
        for b in items {
            for (a, v) in acc.iter_mut().zip(b.values()) {
                *a += v;
            }
        }
        let n = items.len().max(1) as f64;
        Self::from_values(acc.map(|a| a / n))
    }
}

/// Which terms a configuration actually evaluates; zero-weight terms are
/// skipped and reported as 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ActiveTerms {
    pub gvat: bool,
    pub gccb: bool,
    /// gROI and the residual-mass term share one weight.
    pub groi: bool,
    pub ce_xu: bool,
    pub inner: bool,
}

impl ActiveTerms {
    pub fn of(hp: &HyperParams) -> Self {
        Self {
            gvat: hp.delta_gvat != 0.0,
            gccb: hp.rho_gccb != 0.0,
            groi: hp.rho_groi != 0.0,
            ce_xu: hp.delta_xu != 0.0,
            inner: hp.inner,
        }
    }

    fn needs_fields(&self) -> bool {
        self.gvat || self.gccb || self.groi
    }

    fn needs_unlabeled(&self) -> bool {
        self.needs_fields() || self.ce_xu || self.inner
    }
}

/// Everything held at the current weights for one minibatch.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub k: usize,
    pub m_l: usize,
    pub m_ul: usize,
    pub active: ActiveTerms,
    /// Mixed labeled batch for the supervised term.
    pub mixed: MixedBatch,
    /// Augmented unlabeled batch.
    pub unlabeled: Tensor,
    /// Frozen predictions on the unlabeled batch; empty when no unlabeled term is active.
    pub probs_u: Option<Tensor>,
    pub masks: Vec<PpiMask>,
    pub d_rel: Vec<f64>,
    pub fields: Vec<GradField>,
    pub gvat_images: Option<Tensor>,
    pub gccb_images: Option<Tensor>,
    pub partitions: Vec<RoiPartition>,
    /// Label reliability of each mixed labeled sample.
    pub d_rel_label: Vec<f64>,
    pub groi_mixed: Option<MixedBatch>,
    pub collab: Option<MixedBatch>,
    pub partners: Option<PartnerAssignment>,
}

pub fn frozen_opts(hp: &HyperParams) -> ForwardOpts {
    ForwardOpts {
        bn: hp.frozen_bn,
        dropout_seed: None,
    }
}

fn frozen_probs(net: &Network, images: &Tensor, opts: &ForwardOpts) -> Result<Tensor> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let x = g.constant(images.clone());
    let out = net.forward_graph(&mut g, &params, x, opts)?;
    Ok(g.value(out.probs).clone())
}

fn stack_map<F>(u: &Tensor, f: F) -> Result<Tensor>
where
    F: Fn(usize, &Tensor) -> Result<Tensor>,
{
    let imgs: Vec<Tensor> = u.unstack().iter().enumerate().map(|(i, x)| f(i, x)).collect::<Result<_>>()?;
    Tensor::stack(&imgs)
}

pub fn prepare_step<R: Rng + ?Sized>(net: &Network, mb: &Minibatch, hp: &HyperParams, rng: &mut R) -> Result<Prepared> {
    let k = net.classes;
    let (m_l, m_ul) = (mb.m_l(), mb.m_ul());
    if m_l == 0 || m_ul < m_l {
        return Err(invalid("minibatch", format!("need 0 < m_L <= m_UL, got {m_l} and {m_ul}")));
    }
    let active = ActiveTerms::of(hp);
    let opts = frozen_opts(hp);
    let y = one_hot_rows(&mb.labels, k);
    let mixed = match hp.mixup {
        MixupKind::Normal => mixup_supervised(&mb.labeled, &y, hp.alpha, rng)?,
        MixupKind::SelfMix => self_mixup(&mb.labeled, Some(&mb.labeled_orig), &y, hp.alpha, rng)?,
        MixupKind::None => plain(&mb.labeled, &y)?,
    };
    let mut prep = Prepared {
        k,
        m_l,
        m_ul,
        active,
        mixed,
        unlabeled: mb.unlabeled.clone(),
        probs_u: None,
        masks: Vec::new(),
        d_rel: Vec::new(),
        fields: Vec::new(),
        gvat_images: None,
        gccb_images: None,
        partitions: Vec::new(),
        d_rel_label: Vec::new(),
        groi_mixed: None,
        collab: None,
        partners: None,
    };
    if !active.needs_unlabeled() {
        return Ok(prep);
    }
    let u = &mb.unlabeled;
    let probs = if active.needs_fields() {
        let f = de_fields(net, u, hp.a, &opts)?;
        prep.masks = f.masks;
        prep.fields = f.fields;
        f.probs
    } else {
        let p = frozen_probs(net, u, &opts)?;
        prep.masks = masks_for(&p, hp.a)?;
        p
    };
    prep.d_rel = probs
        .rows()
        .map(|r| reliability(r, hp.reliability).map(|x| x.value))
        .collect::<Result<_>>()?;
    if active.gvat {
        prep.gvat_images = Some(stack_map(u, |i, x| Ok(gvat(x, &prep.fields[i], hp.eps)))?);
    }
    if active.gccb {
        prep.gccb_images = Some(stack_map(u, |i, x| gccb(x, &prep.fields[i], hp.m_ccb, hp.mag_cont, hp.mag_bri))?);
    }
    if active.groi {
        prep.partitions = prep
            .fields
            .iter()
            .map(|f| roi_partition(f, hp.m_roi, hp.lambda_rate))
            .collect::<Result<_>>()?;
        let groi_images = stack_map(u, |i, x| groi(x, &prep.partitions[i], hp.m_roi, hp.zeta_groi))?;
        let label_probs = frozen_probs(net, &prep.mixed.images, &opts)?;
        prep.d_rel_label = (0..m_l)
            .map(|i| reliability_pair(prep.mixed.targets.row(i), label_probs.row(i), hp.label_reliability).map(|r| r.value))
            .collect::<Result<_>>()?;
        prep.groi_mixed = Some(groi_mix(&groi_images, &probs, &prep.mixed, hp.zeta_groi)?);
    }
    if active.ce_xu {
        prep.collab = Some(collab_mix(&mb.labeled, &y, u, &probs, hp.a, hp.zeta_xu)?);
    }
    if active.inner {
        prep.partners = Some(assign_partners(&probs, hp.beta, hp.inner_exclude_self, rng));
    }
    prep.probs_u = Some(probs);
    Ok(prep)
}

/// Recorded objective of one step.
pub struct StepGraph {
    pub graph: Graph,
    pub params: Params,
    pub root: Var,
    pub breakdown: LossBreakdown,
    /// Unweighted term nodes by breakdown field name.
    pub terms: Vec<(&'static str, Var)>,
    /// Batch statistics of the supervised forward.
    pub bn_stats: Vec<ChannelStats>,
}

impl StepGraph {
    pub fn term(&self, name: &str) -> Option<Var> {
        self.terms.iter().find(|(n, _)| *n == name).map(|&(_, v)| v)
    }
}

/// Forward stream identifiers mixed into the dropout seeds.
#[derive(Clone, Copy, Debug)]
enum Stream {
    Supervised = 0,
    Gvat = 1,
    Gccb = 2,
    Groi = 3,
    Unlabeled = 4,
    Collab = 5,
}

fn stream_opts(dropout_seed: Option<u64>, s: Stream) -> ForwardOpts {
    ForwardOpts {
        bn: BnMode::Batch,
        dropout_seed: dropout_seed.map(|d| mix_seed(&[d, s as u64])),
    }
}

fn xlogx_sum(t: &[f64]) -> f64 {
    t.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum()
}

/// `(1 / norm) Σ_i w_i Σ_j t_ij (log t_ij - log pred_ij)` with the
/// targets held constant; without `with_entropy` this is the weighted
/// cross entropy.
fn weighted_divergence(
    g: &mut Graph,
    pred: Var,
    targets: &Tensor,
    weights: &[f64],
    norm: f64,
    with_entropy: bool,
) -> Result<Var> {
    let d = targets.shape()[1];
    let logp = g.log(pred, LOG_FLOOR);
    let mut c = Vec::with_capacity(targets.len());
    let mut constant = 0.0;
    for (i, row) in targets.rows().enumerate() {
        c.extend(row.iter().map(|t| -weights[i] * t / norm));
        if with_entropy {
            constant += weights[i] * xlogx_sum(row) / norm;
        }
    }
    debug_assert_eq!(c.len(), targets.shape()[0] * d);
    let cross = g.dot_const(logp, c)?;
    Ok(g.add_scalar(cross, constant))
}

fn degenerate_targets(probs: &Tensor, masks: &[PpiMask]) -> Result<Tensor> {
    let rows: Vec<f64> = probs.rows().zip(masks).flat_map(|(r, m)| degenerate(r, m)).collect();
    Tensor::new(vec![masks.len(), probs.shape()[1] + 1], rows)
}

pub fn evaluate_step(net: &Network, prep: &Prepared, hp: &HyperParams, dropout_seed: Option<u64>) -> Result<StepGraph> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, true);
    let m_l = prep.m_l as f64;
    let m_ul = prep.m_ul as f64;
    let mut bd = LossBreakdown::default();
    let mut terms = Vec::new();
    let mut named = Vec::new();
    let mut forward = |g: &mut Graph, images: &Tensor, s: Stream| -> Result<(Var, Vec<ChannelStats>)> {
        let x = g.constant(images.clone());
        let out = net.forward_graph(g, &params, x, &stream_opts(dropout_seed, s))?;
        Ok((out.probs, out.bn_stats))
    };

    let (p_xx, bn_stats) = forward(&mut g, &prep.mixed.images, Stream::Supervised)?;
    let ce_xx = weighted_divergence(&mut g, p_xx, &prep.mixed.targets, &vec![1.0; prep.m_l], m_l, false)?;
    bd.ce_xx = g.value(ce_xx).item();
    named.push(("ce_xx", ce_xx));
    terms.push(ce_xx);

    let degenerate_term = |g: &mut Graph, images: &Tensor, s: Stream, forward: &mut dyn FnMut(&mut Graph, &Tensor, Stream) -> Result<(Var, Vec<ChannelStats>)>| -> Result<Var> {
        let probs_u = prep.probs_u.as_ref().expect("frozen predictions");
        let (p, _) = forward(g, images, s)?;
        let pred = degenerate_graph(g, p, &prep.masks)?;
        let targets = degenerate_targets(probs_u, &prep.masks)?;
        weighted_divergence(g, pred, &targets, &prep.d_rel, m_ul, true)
    };

    if let Some(imgs) = &prep.gvat_images {
        let t = degenerate_term(&mut g, imgs, Stream::Gvat, &mut forward)?;
        bd.gvat = g.value(t).item();
        named.push(("gvat", t));
        terms.push(g.scale(t, hp.delta_gvat));
    }
    if let Some(imgs) = &prep.gccb_images {
        let t = degenerate_term(&mut g, imgs, Stream::Gccb, &mut forward)?;
        bd.gccb = g.value(t).item();
        named.push(("gccb", t));
        terms.push(g.scale(t, hp.rho_gccb));
    }
    if let Some(gm) = &prep.groi_mixed {
        let (p, _) = forward(&mut g, &gm.images, Stream::Groi)?;
        let w: Vec<f64> = (0..prep.m_ul)
            .map(|i| 0.5 * (prep.d_rel[i] + prep.d_rel_label[gm.partners[i]]))
            .collect();
        let t = weighted_divergence(&mut g, p, &gm.targets, &w, m_ul, true)?;
        bd.groi = g.value(t).item();
        named.push(("groi", t));
        terms.push(g.scale(t, hp.rho_groi));
    }
    if prep.active.groi || prep.partners.is_some() {
        let (p_u, _) = forward(&mut g, &prep.unlabeled, Stream::Unlabeled)?;
        if prep.active.groi {
            let k = prep.k;
            let mut c = vec![0.0; prep.m_ul * k];
            for (i, m) in prep.masks.iter().enumerate() {
                for j in 0..k {
                    c[i * k + j] = -prep.d_rel[i] * m.indicator[j] / m_ul;
                }
            }
            let covered = g.dot_const(p_u, c)?;
            let t = g.add_scalar(covered, prep.d_rel.iter().sum::<f64>() / m_ul);
            bd.rem = g.value(t).item();
            named.push(("rem", t));
            terms.push(g.scale(t, hp.rho_groi));
        }
        if let Some(assign) = &prep.partners {
            let probs_u = prep.probs_u.as_ref().expect("frozen predictions");
            let t = inner_loss_graph(&mut g, p_u, assign, probs_u, prep.m_ul)?;
            bd.inner = g.value(t).item();
            named.push(("inner", t));
            terms.push(t);
        }
    }
    if let Some(cm) = &prep.collab {
        let (p, _) = forward(&mut g, &cm.images, Stream::Collab)?;
        let t = weighted_divergence(&mut g, p, &cm.targets, &vec![1.0; prep.m_l], m_l, false)?;
        bd.ce_xu = g.value(t).item();
        named.push(("ce_xu", t));
        terms.push(g.scale(t, hp.delta_xu));
    }
    let root = g.add_all(&terms)?;
    bd.total = g.value(root).item();
    Ok(StepGraph {
        graph: g,
        params,
        root,
        breakdown: bd,
        terms: named,
        bn_stats,
    })
}

/// Prepares and evaluates one minibatch without dropout.
pub fn total_loss<R: Rng + ?Sized>(net: &Network, mb: &Minibatch, hp: &HyperParams, rng: &mut R) -> Result<LossBreakdown> {
    let prep = prepare_step(net, mb, hp, rng)?;
    Ok(evaluate_step(net, &prep, hp, None)?.breakdown)
}

/// Loop-by-loop evaluation of every term from plain forward passes.
pub fn oracle_breakdown(net: &Network, prep: &Prepared, hp: &HyperParams, dropout_seed: Option<u64>) -> Result<LossBreakdown> {
    let mut n = net.clone();
    let mut probs = |imgs: &Tensor, s: Stream| n.forward_with(imgs, &stream_opts(dropout_seed, s), false).map(|(_, p)| p);
    let ln = |p: f64| p.max(LOG_FLOOR).ln();
    let ce = |t: &[f64], p: &[f64]| -> f64 { t.iter().zip(p).map(|(a, b)| a * ln(*b)).sum::<f64>() * -1.0 };
    let kl = |t: &[f64], p: &[f64]| -> f64 {
        t.iter()
            .zip(p)
            .map(|(&a, &b)| if a > 0.0 { a * (a.ln() - ln(b)) } else { 0.0 })
            .sum()
    };
    let mut bd = LossBreakdown::default();
    let p = probs(&prep.mixed.images, Stream::Supervised)?;
    bd.ce_xx = (0..prep.m_l).map(|i| ce(prep.mixed.targets.row(i), p.row(i))).sum::<f64>() / prep.m_l as f64;
    let degenerated = |imgs: &Tensor, s: Stream, probs: &mut dyn FnMut(&Tensor, Stream) -> Result<Tensor>| -> Result<f64> {
        let frozen = prep.probs_u.as_ref().expect("frozen predictions");
        let p = probs(imgs, s)?;
        let mut acc = 0.0;
        for i in 0..prep.m_ul {
            let m = &prep.masks[i];
            let t = degenerate(frozen.row(i), m);
            // differentiable side uses 1 - <mask, g> for the residual bucket
            let mut q: Vec<f64> = p.row(i).iter().zip(&m.indicator).map(|(a, b)| a * b).collect();
            let covered: f64 = q.iter().sum();
            q.push(1.0 - covered);
            acc += prep.d_rel[i] * kl(&t, &q);
        }
        Ok(acc / prep.m_ul as f64)
    };
    if let Some(imgs) = &prep.gvat_images {
        bd.gvat = degenerated(imgs, Stream::Gvat, &mut probs)?;
    }
    if let Some(imgs) = &prep.gccb_images {
        bd.gccb = degenerated(imgs, Stream::Gccb, &mut probs)?;
    }
    if let Some(gm) = &prep.groi_mixed {
        let p = probs(&gm.images, Stream::Groi)?;
        let mut acc = 0.0;
        for i in 0..prep.m_ul {
            let w = 0.5 * (prep.d_rel[i] + prep.d_rel_label[i % prep.m_l]);
            acc += w * kl(gm.targets.row(i), p.row(i));
        }
        bd.groi = acc / prep.m_ul as f64;
    }
    if prep.active.groi || prep.partners.is_some() {
        let p = probs(&prep.unlabeled, Stream::Unlabeled)?;
        if prep.active.groi {
            let mut acc = 0.0;
            for i in 0..prep.m_ul {
                let inside: f64 = p.row(i).iter().zip(&prep.masks[i].indicator).map(|(a, b)| a * b).sum();
                acc += prep.d_rel[i] * (1.0 - inside);
            }
            bd.rem = acc / prep.m_ul as f64;
        }
        if let Some(assign) = &prep.partners {
            let frozen = prep.probs_u.as_ref().expect("frozen predictions");
            let k = prep.k;
            let mut acc = 0.0;
            for (i, &v) in assign.members.iter().enumerate() {
                let gv = p.row(v);
                let diff: f64 = assign.diff[i].map_or(0.0, |w| gv.iter().zip(frozen.row(w)).map(|(a, b)| a * b).sum());
                let same: f64 = assign.same[i].map_or(gv.iter().take(k).sum(), |w| gv.iter().zip(frozen.row(w)).map(|(a, b)| a * b).sum());
                acc += diff + 1.0 - same;
            }
            bd.inner = acc / prep.m_ul as f64;
        }
    }
    if let Some(cm) = &prep.collab {
        let p = probs(&cm.images, Stream::Collab)?;
        bd.ce_xu = (0..prep.m_l).map(|i| ce(cm.targets.row(i), p.row(i))).sum::<f64>() / prep.m_l as f64;
    }
    bd.total = bd.weighted_total(hp);
    Ok(bd)
}
