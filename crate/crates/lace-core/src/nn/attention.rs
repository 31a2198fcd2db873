//! Single-head cross-attention: spatial features attend to the conditioning
//! token sequence, with a residual connection around the block.

use ndarray::{Array2, Array3, ArrayView2};

use super::store::{ParamRef, ParamStore};

fn view2<'a>(buf: &'a [f64], r: ParamRef, rows: usize, cols: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((rows, cols), &buf[r.offset..r.offset + r.len]).expect("param shape")
}

fn accumulate(grads: &mut [f64], r: ParamRef, src: &Array2<f64>) {
    for (d, s) in grads[r.offset..r.offset + r.len].iter_mut().zip(src.iter()) {
        *d += s;
    }
}

#[derive(Debug, Clone)]
pub struct CrossAttention {
    pub channels: usize,
    pub token_dim: usize,
    pub dk: usize,
    wq: ParamRef,
    wk: ParamRef,
    wv: ParamRef,
    wo: ParamRef,
    bo: ParamRef,
}

pub struct CrossAttentionCache {
    xf: Array2<f64>,
    q: Array2<f64>,
    keys: Array2<f64>,
    vals: Array2<f64>,
    attn: Array2<f64>,
    ctx: Array2<f64>,
    tokens: Array2<f64>,
    hw: (usize, usize),
}

impl CrossAttention {
    pub fn new<R: rand::Rng>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        token_dim: usize,
        dk: usize,
        rng: &mut R,
    ) -> Self {
        let wq = store.alloc_he(&format!("{name}.wq"), &[dk, channels], channels, rng);
        let wk = store.alloc_he(&format!("{name}.wk"), &[dk, token_dim], token_dim, rng);
        let wv = store.alloc_he(&format!("{name}.wv"), &[channels, token_dim], token_dim, rng);
        // Zero out-projection makes the block an identity at init, so the
        // residual path trains first and attention fades in.
        let wo = store.alloc_zeros(&format!("{name}.wo"), &[channels, channels]);
        let bo = store.alloc_zeros(&format!("{name}.bo"), &[channels]);
        CrossAttention {
            channels,
            token_dim,
            dk,
            wq,
            wk,
            wv,
            wo,
            bo,
        }
    }

    pub fn forward(
        &self,
        values: &[f64],
        x: &Array3<f64>,
        tokens: &Array2<f64>,
    ) -> (Array3<f64>, CrossAttentionCache) {
        let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        debug_assert_eq!(c, self.channels);
        debug_assert_eq!(tokens.shape()[1], self.token_dim);
        let xf = x
            .to_shape((c, h * w))
            .expect("flatten")
            .t()
            .to_owned(); // (HW, C)
        let wq = view2(values, self.wq, self.dk, self.channels);
        let wk = view2(values, self.wk, self.dk, self.token_dim);
        let wv = view2(values, self.wv, self.channels, self.token_dim);
        let wo = view2(values, self.wo, self.channels, self.channels);
        let bo = &values[self.bo.offset..self.bo.offset + self.bo.len];

        let q = xf.dot(&wq.t()); // (HW, dk)
        let keys = tokens.dot(&wk.t()); // (Nt, dk)
        let vals = tokens.dot(&wv.t()); // (Nt, C)
        let scale = 1.0 / (self.dk as f64).sqrt();
        let mut attn = q.dot(&keys.t());
        attn *= scale;
        for mut row in attn.rows_mut() {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let ctx = attn.dot(&vals); // (HW, C)
        let mut y = ctx.dot(&wo.t());
        for mut row in y.rows_mut() {
            for (o, b) in row.iter_mut().zip(bo) {
                *o += *b;
            }
        }
        y += &xf; // residual
        let out = y
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, h, w))
            .expect("unflatten");
        (
            out,
            CrossAttentionCache {
                xf,
                q,
                keys,
                vals,
                attn,
                ctx,
                tokens: tokens.clone(),
                hw: (h, w),
            },
        )
    }

    /// Returns (d_input, d_tokens).
    pub fn backward(
        &self,
        values: &[f64],
        grads: &mut [f64],
        cache: &CrossAttentionCache,
        gout: &Array3<f64>,
    ) -> (Array3<f64>, Array2<f64>) {
        let (c, h, w) = (gout.shape()[0], gout.shape()[1], gout.shape()[2]);
        let gy = gout
            .to_shape((c, h * w))
            .expect("flatten")
            .t()
            .to_owned(); // (HW, C)
        let wq = view2(values, self.wq, self.dk, self.channels);
        let wk = view2(values, self.wk, self.dk, self.token_dim);
        let wv = view2(values, self.wv, self.channels, self.token_dim);
        let wo = view2(values, self.wo, self.channels, self.channels);

        // Residual + out-projection.
        let mut dxf = gy.clone();
        accumulate(grads, self.wo, &gy.t().dot(&cache.ctx));
        {
            let dbo = &mut grads[self.bo.offset..self.bo.offset + self.bo.len];
            for (j, db) in dbo.iter_mut().enumerate() {
                *db += gy.column(j).sum();
            }
        }
        let dctx = gy.dot(&wo); // (HW, C)

        // Attention-weighted value mixing.
        let dattn = dctx.dot(&cache.vals.t()); // (HW, Nt)
        let dvals = cache.attn.t().dot(&dctx); // (Nt, C)

        // Softmax backward.
        let mut dscores = dattn.clone();
        for (mut drow, arow) in dscores.rows_mut().into_iter().zip(cache.attn.rows()) {
            let dot: f64 = drow.iter().zip(arow.iter()).map(|(d, a)| d * a).sum();
            for (d, a) in drow.iter_mut().zip(arow.iter()) {
                *d = a * (*d - dot);
            }
        }
        let scale = 1.0 / (self.dk as f64).sqrt();
        dscores *= scale;

        let dq = dscores.dot(&cache.keys); // (HW, dk)
        let dkeys = dscores.t().dot(&cache.q); // (Nt, dk)

        dxf += &dq.dot(&wq);
        accumulate(grads, self.wq, &dq.t().dot(&cache.xf));
        accumulate(grads, self.wk, &dkeys.t().dot(&cache.tokens));
        accumulate(grads, self.wv, &dvals.t().dot(&cache.tokens));
        let dtokens = dkeys.dot(&wk) + dvals.dot(&wv);

        let (hh, ww) = cache.hw;
        let dx = dxf
            .t()
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((c, hh, ww))
            .expect("unflatten");
        (dx, dtokens)
    }
}
