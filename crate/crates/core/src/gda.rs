//! Gradient-based augmentations built from the input gradient of degenerated
//! entropy: a pixel-wise adversarial step (gVAT), block-wise
//! contrast/brightness perturbation (gCCB) and region-of-interest
//! suppression (gROI).

use crate::autodiff::Graph;
use crate::error::{invalid, Result};
use crate::network::{ForwardOpts, Network};
use crate::principal::{degenerated_entropy_graph, masks_for, PpiMask};
use crate::tensor::Tensor;

/// Fields with an L1 mass below this leave gVAT as the identity.
pub const GVAT_MIN_NORM: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct GradField {
    /// `[C, H, W]`, same shape as the image.
    pub r3d: Tensor,
    pub l1_norm: f64,
}

impl GradField {
    pub fn new(r3d: Tensor) -> Self {
        let l1_norm = r3d.l1_norm();
        Self { r3d, l1_norm }
    }
}

/// Partition of an `H × W` image into `M × M` blocks, numbered row-major.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockGrid {
    pub m: usize,
    pub rows: usize,
    pub cols: usize,
}

impl BlockGrid {
    pub fn new(height: usize, width: usize, m: usize) -> Result<Self> {
        if m == 0 || height % m != 0 || width % m != 0 {
            return Err(invalid(
                "M",
                format!("block side {m} does not tile a {height}x{width} image"),
            ));
        }
        Ok(Self {
            m,
            rows: height / m,
            cols: width / m,
        })
    }

    pub fn for_image(image: &Tensor, m: usize) -> Result<Self> {
        let s = image.shape();
        if s.len() != 3 {
            return Err(invalid("image", format!("expected [C, H, W], got {s:?}")));
        }
        Self::new(s[1], s[2], m)
    }

    /// Number of blocks `Q`.
    pub fn blocks(&self) -> usize {
        self.rows * self.cols
    }

    pub fn block_index(&self, i: usize, j: usize) -> usize {
        (i / self.m) * self.cols + j / self.m
    }

    fn width(&self) -> usize {
        self.cols * self.m
    }

    fn height(&self) -> usize {
        self.rows * self.m
    }
}

/// Frozen-model quantities for a batch: probabilities, principal masks
/// and one DE gradient field per image.
#[derive(Clone, Debug)]
pub struct DeFields {
    pub probs: Tensor,
    pub masks: Vec<PpiMask>,
    pub fields: Vec<GradField>,
}

/// Probabilities, masks and `r3d` for every image of `images: [N, C, H, W]`.
/// The masks are fixed at the current prediction and the field is the
/// gradient of the batch-summed DE through one forward with `opts`.
pub fn de_fields(net: &Network, images: &Tensor, a: f64, opts: &ForwardOpts) -> Result<DeFields> {
    let mut g = Graph::new();
    let params = net.bind(&mut g, false);
    let x = g.leaf(images.clone(), true);
    let out = net.forward_graph(&mut g, &params, x, opts)?;
    let probs = g.value(out.probs).clone();
    let masks = masks_for(&probs, a)?;
    let de = degenerated_entropy_graph(&mut g, out.probs, &masks)?;
    g.backward(de)?;
    let grad = g.grad(x).cloned().unwrap_or_else(|| Tensor::zeros(images.shape()));
    Ok(DeFields {
        probs,
        masks,
        fields: grad.unstack().into_iter().map(GradField::new).collect(),
    })
}

/// Single-image field `∇_r DE(u + r)` at `r = 0`, for `u: [C, H, W]`.
pub fn grad_field(net: &Network, u: &Tensor, a: f64, opts: &ForwardOpts) -> Result<GradField> {
    let batch = Tensor::stack(std::slice::from_ref(u))?;
    Ok(de_fields(net, &batch, a, opts)?.fields.remove(0))
}

/// `u + ε r3d / ||r3d||_1`, unclamped; identity for a vanishing field.
pub fn gvat(u: &Tensor, field: &GradField, eps: f64) -> Tensor {
    if field.l1_norm < GVAT_MIN_NORM {
        return u.clone();
    }
    let k = eps / field.l1_norm;
    let data = u.data().iter().zip(field.r3d.data()).map(|(x, r)| x + k * r).collect();
    Tensor::new(u.shape().to_vec(), data).expect("same shape")
}

fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Per (block, channel) inner products `<S, u>` and `<S, 1>`, indexed
/// `q * C + c`.
pub fn ccb_projections(u: &Tensor, field: &GradField, grid: &BlockGrid) -> (Vec<f64>, Vec<f64>) {
    let (c, h, w) = (u.shape()[0], grid.height(), grid.width());
    let q = grid.blocks();
    let mut su = vec![0.0; q * c];
    let mut s1 = vec![0.0; q * c];
    let (ud, rd) = (u.data(), field.r3d.data());
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let k = (ch * h + i) * w + j;
                let b = grid.block_index(i, j) * c + ch;
                su[b] += rd[k] * ud[k];
                s1[b] += rd[k];
            }
        }
    }
    (su, s1)
}

/// Contrast and brightness signs per (block, channel); `sign(0) = +1`.
pub fn ccb_signs(u: &Tensor, field: &GradField, grid: &BlockGrid) -> (Vec<f64>, Vec<f64>) {
    let (su, s1) = ccb_projections(u, field, grid);
    (su.into_iter().map(sign).collect(), s1.into_iter().map(sign).collect())
}

/// Applies given contrast/brightness offsets per (block, channel), then
/// clamps to `[-1, 1]`.
pub fn apply_ccb(u: &Tensor, grid: &BlockGrid, s_cont: &[f64], s_bri: &[f64]) -> Tensor {
    let (c, h, w) = (u.shape()[0], grid.height(), grid.width());
    let mut out = u.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let k = (ch * h + i) * w + j;
                let b = grid.block_index(i, j) * c + ch;
                d[k] = ((1.0 + s_cont[b]) * d[k] + s_bri[b]).clamp(-1.0, 1.0);
            }
        }
    }
    out
}

pub fn gccb(u: &Tensor, field: &GradField, m: usize, mag_cont: f64, mag_bri: f64) -> Result<Tensor> {
    let grid = BlockGrid::for_image(u, m)?;
    let (cont, bri) = ccb_signs(u, field, &grid);
    let s_cont: Vec<f64> = cont.iter().map(|s| mag_cont * s).collect();
    let s_bri: Vec<f64> = bri.iter().map(|s| mag_bri * s).collect();
    Ok(apply_ccb(u, &grid, &s_cont, &s_bri))
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiPartition {
    /// Low-mass blocks in ascending mass order.
    pub omega_low: Vec<usize>,
    /// Normalized per-block L1 mass (all zeros for a vanishing field).
    pub r2d: Vec<f64>,
}

impl RoiPartition {
    pub fn contains(&self, q: usize) -> bool {
        self.omega_low.contains(&q)
    }
}

/// Per-block share of the field's L1 mass.
pub fn block_masses(field: &GradField, grid: &BlockGrid) -> Vec<f64> {
    let s = field.r3d.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let mut mass = vec![0.0; grid.blocks()];
    let d = field.r3d.data();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                mass[grid.block_index(i, j)] += d[(ch * h + i) * w + j].abs();
            }
        }
    }
    let total = field.l1_norm;
    if total > 0.0 {
        mass.iter_mut().for_each(|v| *v /= total);
    }
    mass
}

/// Smallest ascending prefix (ties by block index) whose cumulative mass
/// reaches `lambda`; the crossing block is included. An all-zero mass
/// vector gives an empty prefix, and if rounding keeps the sum below
/// `lambda` every block is taken.
pub fn low_prefix(masses: &[f64], lambda: f64) -> Vec<usize> {
    if masses.iter().all(|&m| m == 0.0) {
        return Vec::new();
    }
    let mut order: Vec<usize> = (0..masses.len()).collect();
    order.sort_by(|&a, &b| masses[a].total_cmp(&masses[b]).then(a.cmp(&b)));
    let mut cum = 0.0;
    for (l, &q) in order.iter().enumerate() {
        cum += masses[q];
        if cum >= lambda {
            return order[..=l].to_vec();
        }
    }
    order
}

pub fn roi_partition(field: &GradField, m: usize, lambda: f64) -> Result<RoiPartition> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(invalid("lambda_rate", format!("{lambda} not in [0, 1]")));
    }
    let grid = BlockGrid::for_image(&field.r3d, m)?;
    let r2d = block_masses(field, &grid);
    Ok(RoiPartition {
        omega_low: low_prefix(&r2d, lambda),
        r2d,
    })
}

/// Scales every pixel of the `Ω_low` blocks by `(1 - ζ) / ζ`.
pub fn groi(u: &Tensor, part: &RoiPartition, m: usize, zeta: f64) -> Result<Tensor> {
    if !(zeta > 0.5 && zeta <= 1.0) {
        return Err(invalid("zeta", format!("{zeta} not in (0.5, 1]")));
    }
    let grid = BlockGrid::for_image(u, m)?;
    let factor = (1.0 - zeta) / zeta;
    let mut low = vec![false; grid.blocks()];
    part.omega_low.iter().for_each(|&q| low[q] = true);
    let (c, h, w) = (u.shape()[0], grid.height(), grid.width());
    let mut out = u.clone();
    let d = out.data_mut();
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if low[grid.block_index(i, j)] {
                    d[(ch * h + i) * w + j] *= factor;
                }
            }
        }
    }
    Ok(out)
}
