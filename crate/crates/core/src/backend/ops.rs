// Spatial kernels with explicit forward and reverse passes.
//
// Every kernel works on standard-layout `Array3<f64>` (channels, rows, cols)
// and accumulates in a fixed loop order, so results are bitwise reproducible.

use ndarray::{Array1, Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{GamError, Result};

/// Stride-1 square convolution with zero padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conv2d {
    /// `[out, in, k, k]`
    pub weight: Array4<f64>,
    pub bias: Array1<f64>,
    pub padding: usize,
}

impl Conv2d {
    pub fn new(weight: Array4<f64>, bias: Array1<f64>, padding: usize) -> Result<Self> {
        let (out, _, kh, kw) = weight.dim();
        if kh != kw || kh == 0 {
            return Err(GamError::Shape(format!("kernel must be square and non-empty, got {kh}x{kw}")));
        }
        if bias.len() != out {
            return Err(GamError::Shape(format!("bias length {} for {out} filters", bias.len())));
        }
        Ok(Conv2d {
            weight: weight.as_standard_layout().into_owned(),
            bias,
            padding,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.dim().1
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dim().0
    }

    pub fn kernel(&self) -> usize {
        self.weight.dim().2
    }

    pub fn output_dims(&self, rows: usize, cols: usize) -> Option<(usize, usize)> {
        let k = self.kernel();
        let (r, c) = (rows + 2 * self.padding, cols + 2 * self.padding);
        (r >= k && c >= k).then(|| (r - k + 1, c - k + 1))
    }

    // Row/col ranges of output positions whose input tap (offset `t`) is inside the image.
    fn valid(&self, t: usize, out_len: usize, in_len: usize) -> (usize, usize) {
        let p = self.padding;
        let lo = p.saturating_sub(t);
        let hi = out_len.min((in_len + p).saturating_sub(t));
        (lo, hi.max(lo))
    }

    pub fn forward(&self, x: &Array3<f64>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (oh, ow) = self.output_dims(h, w).expect("conv input smaller than kernel");
        let (cout, k, p) = (self.out_channels(), self.kernel(), self.padding);
        let xs = x.as_slice().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        let mut out = vec![0.0; cout * oh * ow];
        for o in 0..cout {
            let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
            plane.fill(self.bias[o]);
            for c in 0..cin {
                let xc = &xs[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, oh, h);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, ow, w);
                        let wv = ws[((o * cin + c) * k + ky) * k + kx];
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            let dst = &mut plane[oy * ow + x0..oy * ow + x1];
                            let src = &xc[iy * w + x0 + kx - p..iy * w + x1 + kx - p];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((cout, oh, ow), out).expect("shape")
    }

    /// Returns `∂/∂x`; accumulates `∂/∂weight` and `∂/∂bias` into `grads` when given.
    pub fn backward(&self, x: &Array3<f64>, grad_out: &Array3<f64>, grads: Option<&mut Conv2d>) -> Array3<f64> {
        let (cin, h, w) = x.dim();
        let (cout, oh, ow) = grad_out.dim();
        let (k, p) = (self.kernel(), self.padding);
        let xs = x.as_slice().expect("standard layout");
        let gs = grad_out.as_slice().expect("standard layout");
        let ws = self.weight.as_slice().expect("standard layout");
        let mut gx = vec![0.0; cin * h * w];
        for o in 0..cout {
            let go = &gs[o * oh * ow..(o + 1) * oh * ow];
            for c in 0..cin {
                let gxc = &mut gx[c * h * w..(c + 1) * h * w];
                for ky in 0..k {
                    let (y0, y1) = self.valid(ky, oh, h);
                    for kx in 0..k {
                        let (x0, x1) = self.valid(kx, ow, w);
                        let wv = ws[((o * cin + c) * k + ky) * k + kx];
                        for oy in y0..y1 {
                            let iy = oy + ky - p;
                            let dst = &mut gxc[iy * w + x0 + kx - p..iy * w + x1 + kx - p];
                            let src = &go[oy * ow + x0..oy * ow + x1];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
        if let Some(acc) = grads {
            let gw = acc.weight.as_slice_mut().expect("standard layout");
            for o in 0..cout {
                let go = &gs[o * oh * ow..(o + 1) * oh * ow];
                acc.bias[o] += go.iter().sum::<f64>();
                for c in 0..cin {
                    let xc = &xs[c * h * w..(c + 1) * h * w];
                    for ky in 0..k {
                        let (y0, y1) = self.valid(ky, oh, h);
                        for kx in 0..k {
                            let (x0, x1) = self.valid(kx, ow, w);
                            let mut total = 0.0;
                            for oy in y0..y1 {
                                let iy = oy + ky - p;
                                let a = &go[oy * ow + x0..oy * ow + x1];
                                let b = &xc[iy * w + x0 + kx - p..iy * w + x1 + kx - p];
                                total += a.iter().zip(b).map(|(u, v)| u * v).sum::<f64>();
                            }
                            gw[((o * cin + c) * k + ky) * k + kx] += total;
                        }
                    }
                }
            }
        }
        Array3::from_shape_vec((cin, h, w), gx).expect("shape")
    }
}

/// Densely connected unit: `concat(x, relu(conv(x)))` with "same" padding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseUnit {
    pub conv: Conv2d,
}

impl DenseUnit {
    pub fn new(conv: Conv2d) -> Result<Self> {
        if conv.kernel() != 2 * conv.padding + 1 {
            return Err(GamError::Shape("dense unit needs an odd kernel with same padding".into()));
        }
        Ok(DenseUnit { conv })
    }

    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array3<f64>) {
        let pre = self.conv.forward(x);
        let act = pre.mapv(relu);
        let out = ndarray::concatenate(ndarray::Axis(0), &[x.view(), act.view()]).expect("same spatial dims");
        (out.as_standard_layout().into_owned(), pre)
    }

    pub fn backward(&self, x: &Array3<f64>, pre: &Array3<f64>, grad_out: &Array3<f64>, grads: Option<&mut DenseUnit>) -> Array3<f64> {
        let c = x.dim().0;
        let pass = grad_out.slice(ndarray::s![..c, .., ..]);
        let mut grown = grad_out.slice(ndarray::s![c.., .., ..]).to_owned();
        grown.zip_mut_with(pre, |g, &z| {
            if z <= 0.0 {
                *g = 0.0
            }
        });
        let mut gx = self.conv.backward(x, &grown, grads.map(|g| &mut g.conv));
        gx += &pass;
        gx
    }
}

pub(crate) fn relu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.0
    }
}

/// Non-overlapping max pooling; returns the output and the flat argmax of each window.
pub(crate) fn max_pool(x: &Array3<f64>, size: usize) -> (Array3<f64>, Vec<u32>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / size, w / size);
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = (f64::NEG_INFINITY, 0usize);
                for dy in 0..size {
                    for dx in 0..size {
                        let (iy, ix) = (oy * size + dy, ox * size + dx);
                        let v = x[(ch, iy, ix)];
                        if v > best.0 {
                            best = (v, (ch * h + iy) * w + ix);
                        }
                    }
                }
                out[(ch, oy, ox)] = best.0;
                arg.push(best.1 as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn max_pool_backward(input_dim: (usize, usize, usize), argmax: &[u32], grad_out: &Array3<f64>) -> Array3<f64> {
    let mut gx = Array3::zeros(input_dim);
    let flat = gx.as_slice_mut().expect("standard layout");
    for (g, &i) in grad_out.iter().zip(argmax) {
        flat[i as usize] += g;
    }
    gx
}

pub(crate) fn avg_pool(x: &Array3<f64>, size: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / size, w / size);
    let norm = 1.0 / (size * size) as f64;
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let mut total = 0.0;
        for dy in 0..size {
            for dx in 0..size {
                total += x[(ch, oy * size + dy, ox * size + dx)];
            }
        }
        total * norm
    })
}

pub(crate) fn avg_pool_backward(input_dim: (usize, usize, usize), size: usize, grad_out: &Array3<f64>) -> Array3<f64> {
    let norm = 1.0 / (size * size) as f64;
    let (_, oh, ow) = grad_out.dim();
    Array3::from_shape_fn(input_dim, |(ch, iy, ix)| {
        let (oy, ox) = (iy / size, ix / size);
        if oy < oh && ox < ow {
            grad_out[(ch, oy, ox)] * norm
        } else {
            0.0
        }
    })
}
