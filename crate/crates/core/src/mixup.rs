//! Mixed training sets: supervised mixup, self-mixup, the gROI mix of
//! unlabeled and mixed labeled images, and the collaborative
//! labeled/unlabeled mix.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::principal::ppd;
use crate::tensor::Tensor;

/// Fixed mixing ratio of the collaborative labeled/unlabeled mix.
pub const ZETA_XU: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MixKind {
    Mixup,
    SelfMixup,
    GroiMix,
    Collab,
    /// Augmented labeled images with one-hot targets, unmixed.
    Plain,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedSample {
    pub image: Tensor,
    pub target: Vec<f64>,
    pub lambda: f64,
    pub origin: MixKind,
}

/// A batch of mixed images `[n, C, H, W]` with soft targets `[n, K]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub images: Tensor,
    pub targets: Tensor,
    /// Weight on the first component of each mix.
    pub lambdas: Vec<f64>,
    /// Index of the second component of each mix.
    pub partners: Vec<usize>,
    pub origin: MixKind,
}

impl MixedBatch {
    pub fn len(&self) -> usize {
        self.lambdas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lambdas.is_empty()
    }

    pub fn sample(&self, i: usize) -> MixedSample {
        MixedSample {
            image: self.images.unstack().swap_remove(i),
            target: self.targets.row(i).to_vec(),
            lambda: self.lambdas[i],
            origin: self.origin,
        }
    }
}

/// Symmetric `Beta(α, α)` draws.
#[derive(Clone, Copy, Debug)]
pub struct BetaSampler {
    alpha: f64,
    dist: Beta<f64>,
}

impl BetaSampler {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid("alpha", format!("Beta shape must be positive, got {alpha}")));
        }
        let dist = Beta::new(alpha, alpha).map_err(|e| invalid("alpha", e.to_string()))?;
        Ok(Self { alpha, dist })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.dist.sample(rng).clamp(0.0, 1.0)
    }
}

fn lerp_rows(a: &[f64], b: &[f64], lambda: f64, out: &mut Vec<f64>) {
    out.extend(a.iter().zip(b).map(|(x, y)| lambda * x + (1.0 - lambda) * y));
}

/// `λ_i · A_i + (1 - λ_i) · B_{partner_i}` for images and targets.
pub fn mix_pairs(
    a_images: &Tensor,
    a_targets: &Tensor,
    b_images: &Tensor,
    b_targets: &Tensor,
    partners: &[usize],
    lambdas: &[f64],
    origin: MixKind,
) -> Result<MixedBatch> {
    let n = a_images.shape()[0];
    if a_targets.shape()[0] != n || partners.len() != n || lambdas.len() != n {
        return Err(invalid("mix", "batch sizes of the first component disagree"));
    }
    if b_images.shape()[1..] != a_images.shape()[1..] || b_targets.shape()[1..] != a_targets.shape()[1..] {
        return Err(invalid("mix", "component shapes disagree"));
    }
    let pix = a_images.len() / n;
    let k = a_targets.shape()[1];
    let mut img = Vec::with_capacity(a_images.len());
    let mut tgt = Vec::with_capacity(a_targets.len());
    for i in 0..n {
        let j = partners[i];
        let l = lambdas[i];
        lerp_rows(
            &a_images.data()[i * pix..(i + 1) * pix],
            &b_images.data()[j * pix..(j + 1) * pix],
            l,
            &mut img,
        );
        lerp_rows(a_targets.row(i), b_targets.row(j), l, &mut tgt);
    }
    Ok(MixedBatch {
        images: Tensor::new(a_images.shape().to_vec(), img)?,
        targets: Tensor::new(vec![n, k], tgt)?,
        lambdas: lambdas.to_vec(),
        partners: partners.to_vec(),
        origin,
    })
}

/// Mixes each labeled sample with a randomly permuted partner using one
/// `λ ~ Beta(α, α)` per sample.
pub fn mixup_supervised<R: Rng + ?Sized>(images: &Tensor, targets: &Tensor, alpha: f64, rng: &mut R) -> Result<MixedBatch> {
    let beta = BetaSampler::new(alpha)?;
    let n = images.shape()[0];
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(rng);
    let lambdas: Vec<f64> = (0..n).map(|_| beta.sample(rng)).collect();
    mix_pairs(images, targets, images, targets, &perm, &lambdas, MixKind::Mixup)
}

/// `λ = max(λ, 1 - λ)`, image `λ x + (1 - λ) x_org`, target kept one-hot.
pub fn self_mixup<R: Rng + ?Sized>(
    augmented: &Tensor,
    originals: Option<&Tensor>,
    targets: &Tensor,
    alpha: f64,
    rng: &mut R,
) -> Result<MixedBatch> {
    let orig = originals.ok_or_else(|| invalid("originals", "self-mixup needs the unaugmented images"))?;
    orig.same_shape(augmented, "self_mixup")?;
    let beta = BetaSampler::new(alpha)?;
    let n = augmented.shape()[0];
    let lambdas: Vec<f64> = (0..n)
        .map(|_| {
            let l = beta.sample(rng);
            l.max(1.0 - l)
        })
        .collect();
    let idx: Vec<usize> = (0..n).collect();
    mix_pairs(augmented, targets, orig, targets, &idx, &lambdas, MixKind::SelfMixup)
}

/// Unmixed labeled batch.
pub fn plain(images: &Tensor, targets: &Tensor) -> Result<MixedBatch> {
    let n = images.shape()[0];
    let idx: Vec<usize> = (0..n).collect();
    mix_pairs(images, targets, images, targets, &idx, &vec![1.0; n], MixKind::Plain)
}

/// `ζ · gROI(u_i) + (1 - ζ) · x^{(x+x)}_{i mod m_L}` with targets
/// `ζ · g(u_i) + (1 - ζ) · y^{(x+x)}_{i mod m_L}`.
pub fn groi_mix(groi_images: &Tensor, fake_labels: &Tensor, mixed: &MixedBatch, zeta: f64) -> Result<MixedBatch> {
    if mixed.is_empty() {
        return Err(invalid("mixed", "the labeled mix is empty"));
    }
    if !(zeta > 0.5 && zeta <= 1.0) {
        return Err(invalid("zeta", format!("{zeta} not in (0.5, 1]")));
    }
    let n = groi_images.shape()[0];
    let partners: Vec<usize> = (0..n).map(|i| i % mixed.len()).collect();
    mix_pairs(
        groi_images,
        fake_labels,
        &mixed.images,
        &mixed.targets,
        &partners,
        &vec![zeta; n],
        MixKind::GroiMix,
    )
}

/// Pairs labeled `x_i` with unlabeled `u_i` (`i < m_L`, batch order) at
/// ratio `zeta` (0.5 by default); targets mix the label with the principal distribution of
/// the frozen prediction for `u_i`.
pub fn collab_mix(
    labeled: &Tensor,
    label_targets: &Tensor,
    unlabeled: &Tensor,
    unlabeled_probs: &Tensor,
    a: f64,
    zeta: f64,
) -> Result<MixedBatch> {
    let m_l = labeled.shape()[0];
    let m_ul = unlabeled.shape()[0];
    if m_ul < m_l {
        return Err(invalid("m_UL", format!("{m_ul} unlabeled samples for {m_l} labeled ones")));
    }
    let k = unlabeled_probs.shape()[1];
    let mut sharp = Vec::with_capacity(m_l * k);
    for i in 0..m_l {
        sharp.extend(ppd(unlabeled_probs.row(i), a)?.into_vec());
    }
    let sharp = Tensor::new(vec![m_l, k], sharp)?;
    let idx: Vec<usize> = (0..m_l).collect();
    let u_head = Tensor::stack(&unlabeled.unstack()[..m_l])?;
    mix_pairs(labeled, label_targets, &u_head, &sharp, &idx, &vec![zeta; m_l], MixKind::Collab)
}
