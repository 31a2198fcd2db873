//! Hand-rolled layers with explicit forward caches and backward passes.
//! Forward reads parameter values; backward reads values and accumulates
//! into the gradient buffer, so callers split the store once per pass:
//! `let (values, grads) = (&store.values[..], &mut store.grads[..]);`

use ndarray::{Array1, Array2, Array3, ArrayView2};

use super::store::{ParamRef, ParamStore};

fn view2<'a>(buf: &'a [f64], r: ParamRef, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &buf[r.offset..r.offset + r.len]).expect("param shape")
}

// ---------------------------------------------------------------------------
// im2col / col2im
// ---------------------------------------------------------------------------

pub fn conv_out_size(h: usize, w: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (ho, wo) = conv_out_size(h, w, k, stride, pad);
    let mut cols = Array2::zeros((c * k * k, ho * wo));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(
    dcols: &Array2<f64>,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Array3<f64> {
    let (ho, wo) = conv_out_size(h, w, k, stride, pad);
    let mut dx = Array3::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Conv2d
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    weight: ParamRef,
    bias: ParamRef,
}

pub struct Conv2dCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
}

impl Conv2d {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.alloc_he(&format!("{name}.weight"), &[cout, cin, k, k], fan_in, rng);
        let bias = store.alloc_zeros(&format!("{name}.bias"), &[cout]);
        Conv2d {
            cin,
            cout,
            k,
            stride,
            pad,
            weight,
            bias,
        }
    }

    pub fn forward(&self, values: &[f64], x: &Array3<f64>) -> (Array3<f64>, Conv2dCache) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(c, self.cin);
        let (ho, wo) = conv_out_size(h, w, self.k, self.stride, self.pad);
        let cols = im2col(x, self.k, self.stride, self.pad);
        let wmat = view2(values, self.weight, self.cout, self.cin * self.k * self.k);
        let mut out_mat = wmat.dot(&cols);
        let bias = &values[self.bias.offset..self.bias.offset + self.bias.len];
        for (mut row, b) in out_mat.rows_mut().into_iter().zip(bias) {
            row += *b;
        }
        let out = out_mat
            .into_shape_with_order((self.cout, ho, wo))
            .expect("conv shape");
        (
            out,
            Conv2dCache {
                cols,
                in_shape: (c, h, w),
            },
        )
    }

    pub fn backward(
        &self,
        values: &[f64],
        grads: &mut [f64],
        cache: &Conv2dCache,
        gout: &Array3<f64>,
    ) -> Array3<f64> {
        let (ho, wo) = (gout.shape()[1], gout.shape()[2]);
        let g_mat = gout
            .to_shape((self.cout, ho * wo))
            .expect("gout shape")
            .to_owned();
        // dW += g . cols^T ; db += row sums ; dx = col2im(W^T . g)
        let dw = g_mat.dot(&cache.cols.t());
        {
            let dwslice = &mut grads[self.weight.offset..self.weight.offset + self.weight.len];
            for (d, s) in dwslice.iter_mut().zip(dw.iter()) {
                *d += s;
            }
            let dbslice = &mut grads[self.bias.offset..self.bias.offset + self.bias.len];
            for (co, db) in dbslice.iter_mut().enumerate() {
                *db += g_mat.row(co).sum();
            }
        }
        let wmat = view2(values, self.weight, self.cout, self.cin * self.k * self.k);
        let dcols = wmat.t().dot(&g_mat);
        let (c, h, w) = cache.in_shape;
        col2im(&dcols, c, h, w, self.k, self.stride, self.pad)
    }
}

// ---------------------------------------------------------------------------
// Linear (applied to a (rows, in) matrix of token/feature vectors)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Linear {
    pub din: usize,
    pub dout: usize,
    weight: ParamRef,
    bias: ParamRef,
}

pub struct LinearCache {
    input: Array2<f64>,
}

impl Linear {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        din: usize,
        dout: usize,
        rng: &mut R,
    ) -> Self {
        let weight = store.alloc_he(&format!("{name}.weight"), &[dout, din], din, rng);
        let bias = store.alloc_zeros(&format!("{name}.bias"), &[dout]);
        Linear {
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn new_zeros(store: &mut ParamStore, name: &str, din: usize, dout: usize) -> Self {
        let weight = store.alloc_zeros(&format!("{name}.weight"), &[dout, din]);
        let bias = store.alloc_zeros(&format!("{name}.bias"), &[dout]);
        Linear {
            din,
            dout,
            weight,
            bias,
        }
    }

    pub fn forward(&self, values: &[f64], x: &Array2<f64>) -> (Array2<f64>, LinearCache) {
        debug_assert_eq!(x.shape()[1], self.din);
        let wmat = view2(values, self.weight, self.dout, self.din);
        let mut out = x.dot(&wmat.t());
        let bias = &values[self.bias.offset..self.bias.offset + self.bias.len];
        for mut row in out.rows_mut() {
            for (o, b) in row.iter_mut().zip(bias) {
                *o += *b;
            }
        }
        (out, LinearCache { input: x.clone() })
    }

    pub fn backward(
        &self,
        values: &[f64],
        grads: &mut [f64],
        cache: &LinearCache,
        gout: &Array2<f64>,
    ) -> Array2<f64> {
        let dw = gout.t().dot(&cache.input);
        {
            let dwslice = &mut grads[self.weight.offset..self.weight.offset + self.weight.len];
            for (d, s) in dwslice.iter_mut().zip(dw.iter()) {
                *d += s;
            }
            let dbslice = &mut grads[self.bias.offset..self.bias.offset + self.bias.len];
            for (j, db) in dbslice.iter_mut().enumerate() {
                *db += gout.column(j).sum();
            }
        }
        let wmat = view2(values, self.weight, self.dout, self.din);
        gout.dot(&wmat)
    }
}

// ---------------------------------------------------------------------------
// GroupNorm over (C, H, W), per-channel affine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct GroupNorm {
    pub channels: usize,
    pub groups: usize,
    gamma: ParamRef,
    beta: ParamRef,
}

pub struct GroupNormCache {
    xhat: Array3<f64>,
    inv_std: Vec<f64>,
}

const GN_EPS: f64 = 1e-5;

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Self {
        assert_eq!(channels % groups, 0);
        let gamma = store.alloc(&format!("{name}.gamma"), &[channels], || 1.0);
        let beta = store.alloc_zeros(&format!("{name}.beta"), &[channels]);
        GroupNorm {
            channels,
            groups,
            gamma,
            beta,
        }
    }

    pub fn forward(&self, values: &[f64], x: &Array3<f64>) -> (Array3<f64>, GroupNormCache) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let per = c / self.groups;
        let n = (per * h * w) as f64;
        let mut xhat = x.clone();
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let mut mean = 0.0;
            for ci in g * per..(g + 1) * per {
                for v in x.index_axis(ndarray::Axis(0), ci) {
                    mean += v;
                }
            }
            mean /= n;
            let mut var = 0.0;
            for ci in g * per..(g + 1) * per {
                for v in x.index_axis(ndarray::Axis(0), ci) {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= n;
            let istd = 1.0 / (var + GN_EPS).sqrt();
            inv_std.push(istd);
            for ci in g * per..(g + 1) * per {
                for v in xhat.index_axis_mut(ndarray::Axis(0), ci) {
                    *v = (*v - mean) * istd;
                }
            }
        }
        let gamma = &values[self.gamma.offset..self.gamma.offset + self.gamma.len];
        let beta = &values[self.beta.offset..self.beta.offset + self.beta.len];
        let mut out = xhat.clone();
        for ci in 0..c {
            for v in out.index_axis_mut(ndarray::Axis(0), ci) {
                *v = *v * gamma[ci] + beta[ci];
            }
        }
        (out, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        values: &[f64],
        grads: &mut [f64],
        cache: &GroupNormCache,
        gout: &Array3<f64>,
    ) -> Array3<f64> {
        let (c, h, w) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
        let per = c / self.groups;
        let n = (per * h * w) as f64;
        let gamma = &values[self.gamma.offset..self.gamma.offset + self.gamma.len];
        // Per-channel affine grads.
        {
            let dgamma = &mut grads[self.gamma.offset..self.gamma.offset + self.gamma.len];
            for ci in 0..c {
                let mut s = 0.0;
                for (g, xh) in gout
                    .index_axis(ndarray::Axis(0), ci)
                    .iter()
                    .zip(cache.xhat.index_axis(ndarray::Axis(0), ci))
                {
                    s += g * xh;
                }
                dgamma[ci] += s;
            }
        }
        {
            let dbeta = &mut grads[self.beta.offset..self.beta.offset + self.beta.len];
            for ci in 0..c {
                dbeta[ci] += gout.index_axis(ndarray::Axis(0), ci).sum();
            }
        }
        // dL/dx via the standard normalized-input backward, per group.
        let mut dx = Array3::zeros((c, h, w));
        for g in 0..self.groups {
            let istd = cache.inv_std[g];
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for ci in g * per..(g + 1) * per {
                for (go, xh) in gout
                    .index_axis(ndarray::Axis(0), ci)
                    .iter()
                    .zip(cache.xhat.index_axis(ndarray::Axis(0), ci))
                {
                    let dxh = go * gamma[ci];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * xh;
                }
            }
            mean_dxhat /= n;
            mean_dxhat_xhat /= n;
            for ci in g * per..(g + 1) * per {
                for y in 0..h {
                    for x_ in 0..w {
                        let dxh = gout[[ci, y, x_]] * gamma[ci];
                        let xh = cache.xhat[[ci, y, x_]];
                        dx[[ci, y, x_]] =
                            istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat);
                    }
                }
            }
        }
        dx
    }
}

// ---------------------------------------------------------------------------
// Elementwise SiLU
// ---------------------------------------------------------------------------

pub fn silu(x: &Array3<f64>) -> Array3<f64> {
    x.mapv(|v| v / (1.0 + (-v).exp()))
}

pub fn silu_backward(x: &Array3<f64>, gout: &Array3<f64>) -> Array3<f64> {
    let mut dx = gout.clone();
    dx.zip_mut_with(x, |g, &v| {
        let s = 1.0 / (1.0 + (-v).exp());
        *g *= s * (1.0 + v * (1.0 - s));
    });
    dx
}

// ---------------------------------------------------------------------------
// Nearest-neighbour x2 upsampling
// ---------------------------------------------------------------------------

pub fn upsample2(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    Array3::from_shape_fn((c, h * 2, w * 2), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(gout: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
    let mut dx = Array3::zeros((c, h2 / 2, w2 / 2));
    for ci in 0..c {
        for y in 0..h2 {
            for x in 0..w2 {
                dx[[ci, y / 2, x / 2]] += gout[[ci, y, x]];
            }
        }
    }
    dx
}

// ---------------------------------------------------------------------------
// Sinusoidal timestep features
// ---------------------------------------------------------------------------

pub fn timestep_features(t: usize, dim: usize) -> Array1<f64> {
    assert!(dim % 2 == 0 && dim >= 2);
    let half = dim / 2;
    let mut out = Array1::zeros(dim);
    for i in 0..half {
        let freq = (-(i as f64) / (half as f64 - 1.0).max(1.0) * 10000f64.ln()).exp();
        out[i] = (t as f64 * freq).sin();
        out[half + i] = (t as f64 * freq).cos();
    }
    out
}
