//! Image datasets: binary loaders, a synthetic generator, labeled/unlabeled
//! splitting, default augmentation and minibatch assembly.
//!
//! Images are `[C, H, W]` tensors with pixels in `[-1, 1]`.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub const RAW_MAGIC: &[u8; 4] = b"MXGD";
pub const RAW_UNLABELED: u16 = 0xFFFF;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub label: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CifarVariant {
    Cifar10,
    Cifar100,
}

impl CifarVariant {
    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    pub fn record_len(self) -> usize {
        match self {
            Self::Cifar10 => 3073,
            Self::Cifar100 => 3074,
        }
    }

    fn header_len(self) -> usize {
        self.record_len() - 3072
    }
}

pub fn byte_to_pixel(p: u8) -> f64 {
    p as f64 / 127.5 - 1.0
}

pub fn pixel_to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn pixels(bytes: &[u8], shape: Vec<usize>) -> Tensor {
    Tensor::new(shape, bytes.iter().map(|&b| byte_to_pixel(b)).collect()).expect("record geometry")
}

pub fn load_cifar_binary(path: &Path, variant: CifarVariant) -> Result<Vec<Sample>> {
    let bytes = fs::read(path)?;
    parse_cifar_binary(&bytes, variant, path)
}

pub fn parse_cifar_binary(bytes: &[u8], variant: CifarVariant, name: &Path) -> Result<Vec<Sample>> {
    let rec = variant.record_len();
    if bytes.len() % rec != 0 {
        return Err(Error::Truncated {
            path: name.to_path_buf(),
            offset: bytes.len() / rec * rec,
        });
    }
    let k = variant.classes();
    bytes
        .chunks(rec)
        .enumerate()
        .map(|(i, r)| {
            // cifar100 records carry (coarse, fine); the fine label is used
            let label = r[variant.header_len() - 1] as usize;
            if label >= k {
                return Err(Error::LabelOutOfRange {
                    path: name.to_path_buf(),
                    offset: i * rec,
                    label,
                    classes: k,
                });
            }
            Ok(Sample {
                image: pixels(&r[variant.header_len()..], vec![3, 32, 32]),
                label: Some(label),
            })
        })
        .collect()
}

/// Inverse of [`parse_cifar_binary`]; the cifar100 coarse byte is written as 0.
pub fn encode_cifar_binary(samples: &[Sample], variant: CifarVariant) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(samples.len() * variant.record_len());
    for s in samples {
        if s.image.shape() != [3, 32, 32] {
            return Err(invalid("image", format!("cifar records are 3x32x32, got {:?}", s.image.shape())));
        }
        let label = s.label.ok_or_else(|| invalid("label", "cifar records need a label"))?;
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(label as u8);
        out.extend(s.image.data().iter().map(|&v| pixel_to_byte(v)));
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawGeometry {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub classes: usize,
}

const RAW_HEADER: usize = 16;

pub fn load_raw(path: &Path, geom: RawGeometry) -> Result<Vec<Sample>> {
    let bytes = fs::read(path)?;
    parse_raw(&bytes, geom, path)
}

pub fn parse_raw(bytes: &[u8], geom: RawGeometry, name: &Path) -> Result<Vec<Sample>> {
    let bad = |reason: String| Error::BadHeader {
        path: name.to_path_buf(),
        reason,
    };
    if bytes.len() < RAW_HEADER {
        return Err(Error::Truncated {
            path: name.to_path_buf(),
            offset: 0,
        });
    }
    if &bytes[..4] != RAW_MAGIC {
        return Err(bad("missing MXGD magic".into()));
    }
    let u16_at = |o: usize| u16::from_le_bytes([bytes[o], bytes[o + 1]]) as usize;
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let found = (u16_at(8), u16_at(10), u16_at(12), u16_at(14));
    let want = (geom.width, geom.height, geom.channels, geom.classes);
    if found != want {
        return Err(bad(format!("geometry (w, h, c, K) = {found:?}, expected {want:?}")));
    }
    let plane = geom.width * geom.height * geom.channels;
    let rec = 2 + plane;
    let body = &bytes[RAW_HEADER..];
    if body.len() != count * rec {
        let whole = (body.len() / rec).min(count);
        return Err(Error::Truncated {
            path: name.to_path_buf(),
            offset: RAW_HEADER + whole * rec,
        });
    }
    body.chunks(rec)
        .enumerate()
        .map(|(i, r)| {
            let raw = u16::from_le_bytes([r[0], r[1]]);
            let label = if raw == RAW_UNLABELED {
                None
            } else if (raw as usize) < geom.classes {
                Some(raw as usize)
            } else {
                return Err(Error::LabelOutOfRange {
                    path: name.to_path_buf(),
                    offset: RAW_HEADER + i * rec,
                    label: raw as usize,
                    classes: geom.classes,
                });
            };
            Ok(Sample {
                image: pixels(&r[2..], vec![geom.channels, geom.height, geom.width]),
                label,
            })
        })
        .collect()
}

pub fn encode_raw(samples: &[Sample], geom: RawGeometry) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(RAW_MAGIC);
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for v in [geom.width, geom.height, geom.channels, geom.classes] {
        out.extend_from_slice(&(v as u16).to_le_bytes());
    }
    let shape = [geom.channels, geom.height, geom.width];
    for s in samples {
        if s.image.shape() != shape {
            return Err(invalid("image", format!("expected {shape:?}, got {:?}", s.image.shape())));
        }
        let label = s.label.map_or(RAW_UNLABELED, |l| l as u16);
        out.extend_from_slice(&label.to_le_bytes());
        out.extend(s.image.data().iter().map(|&v| pixel_to_byte(v)));
    }
    Ok(out)
}

/// Parameters of the oriented-bar generator.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub side: usize,
    pub channels: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
    /// Maximum bar offset from the center, in pixels.
    pub jitter: f64,
    /// Maximum angle perturbation as a fraction of the class spacing.
    pub angle_jitter: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            side: 8,
            channels: 3,
            noise: 0.35,
            jitter: 1.0,
            angle_jitter: 0.25,
        }
    }
}

/// Class `c` draws a bar through the image center at angle `pi * c / K`,
/// shifted and tilted by seeded jitter, plus Gaussian noise. Labels cycle
/// through the classes so counts differ by at most one.
pub fn make_synthetic(n: usize, k: usize, seed: u64) -> Vec<Sample> {
    make_synthetic_with(n, k, seed, &SyntheticSpec::default())
}

pub fn make_synthetic_with(n: usize, k: usize, seed: u64, spec: &SyntheticSpec) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let side = spec.side;
    let center = (side as f64 - 1.0) / 2.0;
    let spacing = std::f64::consts::PI / k as f64;
    (0..n)
        .map(|i| {
            let label = i % k;
            let theta = spacing * label as f64 + spacing * spec.angle_jitter * rng.random_range(-1.0..=1.0);
            let offset = spec.jitter * rng.random_range(-1.0..=1.0);
            let (sin, cos) = theta.sin_cos();
            let tint: Vec<f64> = (0..spec.channels).map(|_| rng.random_range(0.6..=1.0)).collect();
            let mut data = Vec::with_capacity(spec.channels * side * side);
            for &t in &tint {
                for r in 0..side {
                    for c in 0..side {
                        let (y, x) = (r as f64 - center, c as f64 - center);
                        let d = x * sin - y * cos - offset;
                        let bar = (-d * d / 1.5).exp();
                        let noise: f64 = rng.sample(StandardNormal);
                        data.push((t * (2.0 * bar - 1.0) + spec.noise * noise).clamp(-1.0, 1.0));
                    }
                }
            }
            Sample {
                image: Tensor::new(vec![spec.channels, side, side], data).unwrap(),
                label: Some(label),
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct SplitPools {
    pub labeled: Vec<Sample>,
    pub unlabeled: Vec<Sample>,
    /// Source indices of `labeled` and `unlabeled`.
    pub labeled_idx: Vec<usize>,
    pub unlabeled_idx: Vec<usize>,
    pub seed: u64,
}

/// Class-stratified labeled split. Quotas are `n / K` per class with the
/// remainder assigned to a seeded random subset of classes; a class short
/// of its quota is topped up from the other classes. Unlabeled pool
/// entries always go to `D_UL`, and `D_UL` labels are stripped.
pub fn split(pool: &[Sample], n_labeled: usize, classes: usize, seed: u64) -> Result<SplitPools> {
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); classes];
    for (i, s) in pool.iter().enumerate() {
        if let Some(l) = s.label {
            if l >= classes {
                return Err(invalid("label", format!("{l} not below K = {classes}")));
            }
            by_class[l].push(i);
        }
    }
    let available: usize = by_class.iter().map(Vec::len).sum();
    if n_labeled > available {
        return Err(invalid(
            "n_labeled",
            format!("{n_labeled} requested but only {available} labeled samples exist"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for group in &mut by_class {
        group.shuffle(&mut rng);
    }
    let mut quota = vec![n_labeled / classes; classes];
    let mut order: Vec<usize> = (0..classes).collect();
    order.shuffle(&mut rng);
    for &c in order.iter().take(n_labeled % classes) {
        quota[c] += 1;
    }
    let mut taken = vec![0usize; classes];
    for c in 0..classes {
        taken[c] = quota[c].min(by_class[c].len());
    }
    let mut missing = n_labeled - taken.iter().sum::<usize>();
    while missing > 0 {
        for &c in &order {
            if missing > 0 && taken[c] < by_class[c].len() {
                taken[c] += 1;
                missing -= 1;
            }
        }
    }
    let mut labeled_idx: Vec<usize> = (0..classes).flat_map(|c| by_class[c][..taken[c]].to_vec()).collect();
    labeled_idx.sort_unstable();
    let mut is_labeled = vec![false; pool.len()];
    labeled_idx.iter().for_each(|&i| is_labeled[i] = true);
    let unlabeled_idx: Vec<usize> = (0..pool.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(SplitPools {
        labeled: labeled_idx.iter().map(|&i| pool[i].clone()).collect(),
        unlabeled: unlabeled_idx
            .iter()
            .map(|&i| Sample {
                image: pool[i].image.clone(),
                label: None,
            })
            .collect(),
        labeled_idx,
        unlabeled_idx,
        seed,
    })
}

pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = image.shape()[2];
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        for (j, v) in dst.iter_mut().enumerate() {
            *v = src[w - 1 - j];
        }
    }
    out
}

/// Moves content by `(rows, cols)` pixels; vacated pixels become 0.
pub fn translate(image: &Tensor, rows: isize, cols: isize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let src = image.data();
    let mut out = Tensor::zeros(image.shape());
    let dst = out.data_mut();
    for ch in 0..c {
        for i in 0..h {
            let si = i as isize - rows;
            if si < 0 || si >= h as isize {
                continue;
            }
            for j in 0..w {
                let sj = j as isize - cols;
                if sj >= 0 && sj < w as isize {
                    dst[(ch * h + i) * w + j] = src[(ch * h + si as usize) * w + sj as usize];
                }
            }
        }
    }
    out
}

/// Optional horizontal flip (p = 0.5) followed by a random translation of
/// up to `max_shift` pixels per axis.
pub fn default_augment<R: Rng + ?Sized>(image: &Tensor, flip: bool, max_shift: usize, rng: &mut R) -> Tensor {
    let flipped = if flip && rng.random_bool(0.5) {
        flip_horizontal(image)
    } else {
        image.clone()
    };
    let s = max_shift as i64;
    let dr = rng.random_range(-s..=s) as isize;
    let dc = rng.random_range(-s..=s) as isize;
    translate(&flipped, dr, dc)
}

/// Draws indices without replacement, reshuffling after every full pass.
#[derive(Clone, Debug)]
pub struct EpochSampler {
    order: Vec<usize>,
    pos: usize,
}

impl EpochSampler {
    pub fn new(len: usize) -> Self {
        Self {
            order: (0..len).collect(),
            pos: len,
        }
    }

    pub fn next<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Result<usize> {
        if self.order.is_empty() {
            return Err(Error::EmptyPool("epoch sampler over an empty index set"));
        }
        if self.pos == self.order.len() {
            self.order.shuffle(rng);
            self.pos = 0;
        }
        self.pos += 1;
        Ok(self.order[self.pos - 1])
    }
}

/// Augmented labeled and unlabeled batches, each carried with its
/// pre-augmentation originals.
#[derive(Clone, Debug)]
pub struct Minibatch {
    pub labeled: Tensor,
    pub labeled_orig: Tensor,
    pub labels: Vec<usize>,
    pub unlabeled: Tensor,
    pub unlabeled_orig: Tensor,
}

impl Minibatch {
    pub fn m_l(&self) -> usize {
        self.labels.len()
    }

    pub fn m_ul(&self) -> usize {
        self.unlabeled.shape()[0]
    }
}

pub struct BatchSource {
    pub pools: SplitPools,
    pub flip: bool,
    pub max_shift: usize,
    labeled: EpochSampler,
    unlabeled: EpochSampler,
}

impl BatchSource {
    pub fn new(pools: SplitPools, flip: bool, max_shift: usize) -> Self {
        let labeled = EpochSampler::new(pools.labeled.len());
        let unlabeled = EpochSampler::new(pools.labeled.len() + pools.unlabeled.len());
        Self {
            pools,
            flip,
            max_shift,
            labeled,
            unlabeled,
        }
    }

    fn unlabeled_image(&self, i: usize) -> &Tensor {
        let nl = self.pools.labeled.len();
        if i < nl {
            &self.pools.labeled[i].image
        } else {
            &self.pools.unlabeled[i - nl].image
        }
    }

    /// Labeled samples come from `D_L`; unlabeled ones from `D_L ∪ D_UL`.
    pub fn next_minibatch<R: Rng + ?Sized>(&mut self, m_l: usize, m_ul: usize, rng: &mut R) -> Result<Minibatch> {
        let mut lab = Vec::with_capacity(m_l);
        let mut lab_orig = Vec::with_capacity(m_l);
        let mut labels = Vec::with_capacity(m_l);
        for _ in 0..m_l {
            let s = &self.pools.labeled[self.labeled.next(rng)?];
            lab.push(default_augment(&s.image, self.flip, self.max_shift, rng));
            lab_orig.push(s.image.clone());
            labels.push(s.label.ok_or_else(|| invalid("D_L", "labeled pool entry without a label"))?);
        }
        let mut unl = Vec::with_capacity(m_ul);
        let mut unl_orig = Vec::with_capacity(m_ul);
        for _ in 0..m_ul {
            let i = self.unlabeled.next(rng)?;
            let img = self.unlabeled_image(i).clone();
            unl.push(default_augment(&img, self.flip, self.max_shift, rng));
            unl_orig.push(img);
        }
        Ok(Minibatch {
            labeled: Tensor::stack(&lab)?,
            labeled_orig: Tensor::stack(&lab_orig)?,
            labels,
            unlabeled: Tensor::stack(&unl)?,
            unlabeled_orig: Tensor::stack(&unl_orig)?,
        })
    }
}

pub fn one_hot_rows(labels: &[usize], k: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &l) in labels.iter().enumerate() {
        t.data_mut()[i * k + l] = 1.0;
    }
    t
}

pub fn stack_images(samples: &[Sample]) -> Result<Tensor> {
    let imgs: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&imgs)
}
