//! Numerical kernels behind the graph operations.
//!
//! All reductions run in a fixed order so results do not depend on the
//! number of worker threads.

use rayon::prelude::*;

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        self.height + 2 * self.padding + 1 - self.kernel
    }

    pub fn out_width(&self) -> usize {
        self.width + 2 * self.padding + 1 - self.kernel
    }

    fn patch(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn in_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = g.out_plane();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut col[r * p..(r + 1) * p];
                for i in 0..oh {
                    let si = i as isize + ki as isize - g.padding as isize;
                    let row = &mut dst[i * ow..(i + 1) * ow];
                    if si < 0 || si >= g.height as isize {
                        row.fill(0.0);
                        continue;
                    }
                    let base = (c * g.height + si as usize) * g.width;
                    for (j, v) in row.iter_mut().enumerate() {
                        let sj = j as isize + kj as isize - g.padding as isize;
                        *v = if sj < 0 || sj >= g.width as isize {
                            0.0
                        } else {
                            x[base + sj as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_height(), g.out_width());
    let p = g.out_plane();
    for c in 0..g.channels {
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let r = (c * g.kernel + ki) * g.kernel + kj;
                let src = &col[r * p..(r + 1) * p];
                for i in 0..oh {
                    let si = i as isize + ki as isize - g.padding as isize;
                    if si < 0 || si >= g.height as isize {
                        continue;
                    }
                    let base = (c * g.height + si as usize) * g.width;
                    for j in 0..ow {
                        let sj = j as isize + kj as isize - g.padding as isize;
                        if sj >= 0 && sj < g.width as isize {
                            dx[base + sj as usize] += src[i * ow + j];
                        }
                    }
                }
            }
        }
    }
}

/// `x: [N, C, H, W]`, `w: [O, C, k, k]`, output `[N, O, OH, OW]`.
pub(crate) fn conv2d_forward(x: &[f64], w: &[f64], b: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let n = x.len() / g.in_len();
    let p = g.out_plane();
    let patch = g.patch();
    let mut out = vec![0.0; n * g.filters * p];
    out.par_chunks_mut(g.filters * p)
        .zip(x.par_chunks(g.in_len()))
        .for_each(|(o, xs)| {
            let mut col = vec![0.0; patch * p];
            im2col(xs, g, &mut col);
            for f in 0..g.filters {
                let orow = &mut o[f * p..(f + 1) * p];
                if let Some(b) = b {
                    orow.fill(b[f]);
                }
                let wrow = &w[f * patch..(f + 1) * patch];
                for (r, &wv) in wrow.iter().enumerate() {
                    let crow = &col[r * p..(r + 1) * p];
                    for (ov, &cv) in orow.iter_mut().zip(crow) {
                        *ov += wv * cv;
                    }
                }
            }
        });
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dw: Vec<f64>,
    pub db: Vec<f64>,
}

pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dout: &[f64],
    g: &ConvGeom,
    need_dx: bool,
) -> ConvGrads {
    let n = x.len() / g.in_len();
    let p = g.out_plane();
    let patch = g.patch();
    let per_sample: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
        .into_par_iter()
        .map(|s| {
            let xs = &x[s * g.in_len()..(s + 1) * g.in_len()];
            let ds = &dout[s * g.filters * p..(s + 1) * g.filters * p];
            let mut col = vec![0.0; patch * p];
            im2col(xs, g, &mut col);
            let mut dw = vec![0.0; g.filters * patch];
            let mut db = vec![0.0; g.filters];
            for f in 0..g.filters {
                let drow = &ds[f * p..(f + 1) * p];
                db[f] = drow.iter().sum();
                for r in 0..patch {
                    let crow = &col[r * p..(r + 1) * p];
                    dw[f * patch + r] = drow.iter().zip(crow).map(|(a, b)| a * b).sum();
                }
            }
            let mut dx = Vec::new();
            if need_dx {
                let mut dcol = vec![0.0; patch * p];
                for f in 0..g.filters {
                    let drow = &ds[f * p..(f + 1) * p];
                    for r in 0..patch {
                        let wv = w[f * patch + r];
                        let dc = &mut dcol[r * p..(r + 1) * p];
                        for (d, &gv) in dc.iter_mut().zip(drow) {
                            *d += wv * gv;
                        }
                    }
                }
                dx = vec![0.0; g.in_len()];
                col2im(&dcol, g, &mut dx);
            }
            (dx, dw, db)
        })
        .collect();

    let mut dw = vec![0.0; g.filters * patch];
    let mut db = vec![0.0; g.filters];
    let mut dx = if need_dx { Some(Vec::with_capacity(x.len())) } else { None };
    for (sdx, sdw, sdb) in per_sample {
        for (a, b) in dw.iter_mut().zip(&sdw) {
            *a += b;
        }
        for (a, b) in db.iter_mut().zip(&sdb) {
            *a += b;
        }
        if let Some(dx) = dx.as_mut() {
            dx.extend_from_slice(&sdx);
        }
    }
    ConvGrads { dx, dw, db }
}

/// 2×2 max pooling with stride 2 over `[N, C, H, W]`. Ties go to the
/// lowest flat index. Returns the pooled values and the source index of
/// every output element.
pub(crate) fn max_pool2x2(x: &[f64], planes: usize, h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for i in 0..oh {
            for j in 0..ow {
                let mut best = base + (2 * i) * w + 2 * j;
                for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * i + di) * w + 2 * j + dj;
                    if x[k] > x[best] {
                        best = k;
                    }
                }
                out.push(x[best]);
                idx.push(best);
            }
        }
    }
    (out, idx)
}
