//! Convolution, ReLU and dense layers with explicit backward passes.
//!
//! Feature maps for a batch of `n` images are stored channel-major as
//! `[c][n][h][w]` so a whole batch convolves through one matrix product.
//! Dense layers work on column batches: an input of width `d` for `n` items
//! is a `d×n` row-major matrix.

use super::gemm::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::{Grads, ParamId, ParamStore};
use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, PartialEq)]
pub struct Maps {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f32>,
}

impl Maps {
    pub fn zeros(c: usize, n: usize, h: usize, w: usize) -> Self {
        Maps {
            c,
            n,
            h,
            w,
            data: vec![0.0; c * n * h * w],
        }
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

pub const KERNEL: usize = 3;
pub const PAD: usize = 1;

/// 3×3 convolution with zero padding 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

pub struct ConvCache {
    col: Vec<f32>,
    cin: usize,
    n: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

pub fn conv_out_dim(dim: usize, stride: usize) -> usize {
    (dim + 2 * PAD - KERNEL) / stride + 1
}

/// Output positions `o` for which kernel tap `t` reads inside `[0, dim)`.
fn valid_range(t: usize, stride: usize, dim: usize, out: usize) -> (usize, usize) {
    let lo = if t >= PAD { 0 } else { (PAD - t).div_ceil(stride) };
    let hi = if dim + PAD > t {
        ((dim + PAD - t - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

impl Conv2d {
    fn check(&self, store: &ParamStore) -> Result<(), NnError> {
        let ws = store.get(self.weight).shape();
        let bs = store.get(self.bias).shape();
        if ws != [self.cout, self.cin, KERNEL, KERNEL] || bs != [self.cout] {
            return Err(NnError::Shape(format!("conv params {ws:?}/{bs:?} for {}→{}", self.cin, self.cout)));
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, x: &Maps) -> Result<(Maps, ConvCache), NnError> {
        self.check(store)?;
        if x.c != self.cin {
            return Err(NnError::Shape(format!("conv expects {} channels, got {}", self.cin, x.c)));
        }
        if x.h + 2 * PAD < KERNEL || x.w + 2 * PAD < KERNEL {
            return Err(NnError::Shape(format!("input {}×{} smaller than kernel", x.h, x.w)));
        }
        let s = self.stride;
        let ho = conv_out_dim(x.h, s);
        let wo = conv_out_dim(x.w, s);
        let plane_out = ho * wo;
        let p = x.n * plane_out;
        let k = self.cin * KERNEL * KERNEL;

        let mut col = vec![0f32; k * p];
        for ci in 0..self.cin {
            for ky in 0..KERNEL {
                let (oy_lo, oy_hi) = valid_range(ky, s, x.h, ho);
                for kx in 0..KERNEL {
                    let (ox_lo, ox_hi) = valid_range(kx, s, x.w, wo);
                    let row = (ci * KERNEL + ky) * KERNEL + kx;
                    let dst = &mut col[row * p..(row + 1) * p];
                    for ni in 0..x.n {
                        let src = &x.data[(ci * x.n + ni) * x.h * x.w..][..x.h * x.w];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - PAD;
                            let srow = &src[iy * x.w..][..x.w];
                            let drow = &mut dst[ni * plane_out + oy * wo..][..wo];
                            for ox in ox_lo..ox_hi {
                                drow[ox] = srow[ox * s + kx - PAD];
                            }
                        }
                    }
                }
            }
        }

        let mut out = Maps::zeros(self.cout, x.n, ho, wo);
        let bias = store.get(self.bias).data();
        for co in 0..self.cout {
            out.data[co * p..(co + 1) * p].iter_mut().for_each(|v| *v = bias[co]);
        }
        matmul_acc(self.cout, p, k, store.get(self.weight).data(), &col, &mut out.data);
        super::tensor::check_finite(&out.data, "conv2d")?;
        Ok((
            out,
            ConvCache {
                col,
                cin: self.cin,
                n: x.n,
                h: x.h,
                w: x.w,
                ho,
                wo,
            },
        ))
    }

    /// Accumulates parameter gradients; returns the input gradient when asked.
    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &ConvCache,
        dout: &Maps,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Result<Option<Maps>, NnError> {
        let p = cache.n * cache.ho * cache.wo;
        let k = cache.cin * KERNEL * KERNEL;
        if dout.data.len() != self.cout * p {
            return Err(NnError::Shape("conv output gradient size".into()));
        }

        {
            let db = grads.get_mut(self.bias).data_mut();
            for co in 0..self.cout {
                let mut acc = db[co];
                for &g in &dout.data[co * p..(co + 1) * p] {
                    acc += g;
                }
                db[co] = acc;
            }
        }
        matmul_nt_acc(self.cout, k, p, &dout.data, &cache.col, grads.get_mut(self.weight).data_mut());

        if !want_input_grad {
            return Ok(None);
        }
        let mut dcol = vec![0f32; k * p];
        matmul_tn_acc(k, p, self.cout, store.get(self.weight).data(), &dout.data, &mut dcol);

        let s = self.stride;
        let plane_out = cache.ho * cache.wo;
        let mut dx = Maps::zeros(cache.cin, cache.n, cache.h, cache.w);
        for ci in 0..cache.cin {
            for ky in 0..KERNEL {
                let (oy_lo, oy_hi) = valid_range(ky, s, cache.h, cache.ho);
                for kx in 0..KERNEL {
                    let (ox_lo, ox_hi) = valid_range(kx, s, cache.w, cache.wo);
                    let row = (ci * KERNEL + ky) * KERNEL + kx;
                    let src = &dcol[row * p..(row + 1) * p];
                    for ni in 0..cache.n {
                        let dst = &mut dx.data[(ci * cache.n + ni) * cache.h * cache.w..][..cache.h * cache.w];
                        for oy in oy_lo..oy_hi {
                            let iy = oy * s + ky - PAD;
                            let srow = &src[ni * plane_out + oy * cache.wo..][..cache.wo];
                            let drow = &mut dst[iy * cache.w..][..cache.w];
                            for ox in ox_lo..ox_hi {
                                drow[ox * s + kx - PAD] += srow[ox];
                            }
                        }
                    }
                }
            }
        }
        Ok(Some(dx))
    }
}

/// Single-image convolution: `input` is `[c_in, h, w]`, `weights`
/// `[c_out, c_in, 3, 3]`, `bias` `[c_out]`. Padding is 1.
pub fn conv2d_forward(input: &Tensor, weights: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor, NnError> {
    let [cin, h, w] = input.shape() else {
        return Err(NnError::Shape(format!("conv input must be 3-d, got {:?}", input.shape())));
    };
    let [cout, wcin, kh, kw] = weights.shape() else {
        return Err(NnError::Shape(format!("conv weights must be 4-d, got {:?}", weights.shape())));
    };
    if wcin != cin || *kh != KERNEL || *kw != KERNEL || bias.shape() != [*cout] || stride == 0 {
        return Err(NnError::Shape(format!(
            "conv weights {:?} / bias {:?} incompatible with input {:?}",
            weights.shape(),
            bias.shape(),
            input.shape()
        )));
    }
    let mut store = ParamStore::new();
    let wid = store.add("w", weights.clone());
    let bid = store.add("b", bias.clone());
    let conv = Conv2d {
        weight: wid,
        bias: bid,
        cin: *cin,
        cout: *cout,
        stride,
    };
    let x = Maps {
        c: *cin,
        n: 1,
        h: *h,
        w: *w,
        data: input.data().to_vec(),
    };
    let (out, _) = conv.forward(&store, &x)?;
    Tensor::from_vec(&[out.c, out.h, out.w], out.data)
}

pub fn relu_forward(x: &mut [f32]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `dy` in place with the post-activation values `y`.
pub fn relu_backward(y: &[f32], dy: &mut [f32]) {
    for (d, &v) in dy.iter_mut().zip(y) {
        if v <= 0.0 {
            *d = 0.0;
        }
    }
}

/// `[c][n][p]` maps → `(c·p)×n` column batch.
pub fn flatten(m: &Maps) -> Vec<f32> {
    let p = m.plane();
    let mut out = vec![0f32; m.c * p * m.n];
    for c in 0..m.c {
        for ni in 0..m.n {
            let src = &m.data[(c * m.n + ni) * p..][..p];
            for (pi, &v) in src.iter().enumerate() {
                out[(c * p + pi) * m.n + ni] = v;
            }
        }
    }
    out
}

pub fn unflatten(cols: &[f32], c: usize, n: usize, h: usize, w: usize) -> Maps {
    let p = h * w;
    let mut m = Maps::zeros(c, n, h, w);
    for ci in 0..c {
        for ni in 0..n {
            let dst = &mut m.data[(ci * n + ni) * p..][..p];
            for (pi, d) in dst.iter_mut().enumerate() {
                *d = cols[(ci * p + pi) * n + ni];
            }
        }
    }
    m
}

/// Fully connected layer `y = W x + b` over column batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn forward(&self, store: &ParamStore, x: &[f32], n: usize) -> Result<Vec<f32>, NnError> {
        let ws = store.get(self.weight).shape();
        if ws != [self.dout, self.din] || store.get(self.bias).shape() != [self.dout] {
            return Err(NnError::Shape(format!("linear params {ws:?} for {}→{}", self.din, self.dout)));
        }
        if x.len() != self.din * n {
            return Err(NnError::Shape(format!("linear input {} != {}×{}", x.len(), self.din, n)));
        }
        let bias = store.get(self.bias).data();
        let mut y = vec![0f32; self.dout * n];
        for o in 0..self.dout {
            y[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bias[o]);
        }
        matmul_acc(self.dout, n, self.din, store.get(self.weight).data(), x, &mut y);
        super::tensor::check_finite(&y, "linear")?;
        Ok(y)
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        x: &[f32],
        dy: &[f32],
        n: usize,
        grads: &mut Grads,
        want_input_grad: bool,
    ) -> Option<Vec<f32>> {
        {
            let db = grads.get_mut(self.bias).data_mut();
            for o in 0..self.dout {
                let mut acc = db[o];
                for &g in &dy[o * n..(o + 1) * n] {
                    acc += g;
                }
                db[o] = acc;
            }
        }
        matmul_nt_acc(self.dout, self.din, n, dy, x, grads.get_mut(self.weight).data_mut());
        if !want_input_grad {
            return None;
        }
        let mut dx = vec![0f32; self.din * n];
        matmul_tn_acc(self.din, n, self.dout, store.get(self.weight).data(), dy, &mut dx);
        Some(dx)
    }
}
