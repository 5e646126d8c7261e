//! Finite-difference gradient checks against independent double-precision
//! forward implementations.

use abc_core::dataset::Representation;
use abc_core::nn::layers::{relu_backward, relu_forward};
use abc_core::nn::{Conv2d, Linear, Lstm, Maps, ParamId, ParamStore, Tensor};
use abc_core::policy::{Policy, PolicyConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const EPS: f64 = 1e-3;
pub const LAYER_TOL: f64 = 1e-3;
pub const END_TO_END_TOL: f64 = 1e-2;

pub fn rand_vec(rng: &mut ChaCha8Rng, n: usize, scale: f32) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-scale..scale)).collect()
}

pub fn to64(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Relative error with a floor so gradients near zero compare absolutely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
}

/// Central difference of `f` along each coordinate of `x`.
pub fn numeric_grad(x: &[f64], f: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = x[i];
            x[i] = orig + EPS;
            let up = f(&x);
            x[i] = orig - EPS;
            let down = f(&x);
            x[i] = orig;
            (up - down) / (2.0 * EPS)
        })
        .collect()
}

pub fn max_rel(analytic: &[f32], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| rel_err(a as f64, n))
        .fold(0.0, f64::max)
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

// Reference forwards. Layouts follow the library: maps `[c][n][h][w]`,
// column batches `d×n` row-major.

pub fn conv_ref(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    n: usize,
    h: usize,
    wd: usize,
    s: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h - 1) / s + 1;
    let wo = (wd - 1) / s + 1;
    let mut out = vec![0.0; cout * n * ho * wo];
    for co in 0..cout {
        for ni in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * s + ky) as isize - 1;
                                let ix = (ox * s + kx) as isize - 1;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x[((ci * n + ni) * h + iy as usize) * wd + ix as usize];
                                acc += w[((co * cin + ci) * 3 + ky) * 3 + kx] * xv;
                            }
                        }
                    }
                    out[((co * n + ni) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    (out, ho, wo)
}

pub fn linear_ref(x: &[f64], w: &[f64], b: &[f64], din: usize, dout: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; dout * n];
    for o in 0..dout {
        for j in 0..n {
            y[o * n + j] = b[o] + (0..din).map(|i| w[o * din + i] * x[i * n + j]).sum::<f64>();
        }
    }
    y
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn lstm_ref(xs: &[Vec<f64>], wih: &[f64], whh: &[f64], bias: &[f64], din: usize, hs: usize, b: usize) -> Vec<f64> {
    let mut h = vec![0.0; hs * b];
    let mut c = vec![0.0; hs * b];
    for x in xs {
        let mut hn = vec![0.0; hs * b];
        for u in 0..hs {
            for j in 0..b {
                let pre = |gate: usize| {
                    let r = gate * hs + u;
                    bias[r]
                        + (0..din).map(|i| wih[r * din + i] * x[i * b + j]).sum::<f64>()
                        + (0..hs).map(|k| whh[r * hs + k] * h[k * b + j]).sum::<f64>()
                };
                let (i, f, g, o) = (sig(pre(0)), sig(pre(1)), pre(2).tanh(), sig(pre(3)));
                let cn = f * c[u * b + j] + i * g;
                c[u * b + j] = cn;
                hn[u * b + j] = o * cn.tanh();
            }
        }
        h = hn;
    }
    h
}

/// Worst relative error over weight, bias and input gradients for several
/// shapes, including 1×1 inputs and odd sizes. Infinite on a forward mismatch.
pub fn conv_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let shapes = [
        (2, 3, 2, 5, 4, 2),
        (3, 2, 1, 6, 6, 1),
        (1, 2, 3, 7, 5, 2),
        (2, 3, 4, 4, 4, 2),
        (3, 2, 2, 8, 8, 2),
        (3, 3, 4, 2, 2, 2),
        (3, 2, 4, 1, 1, 2),
    ];
    for &(cin, cout, n, h, w, s) in &shapes {
        let mut store = ParamStore::new();
        let wv = rand_vec(&mut rng, cout * cin * 9, 0.5);
        let bv = rand_vec(&mut rng, cout, 0.5);
        let wid = store.add("w", Tensor::from_vec(&[cout, cin, 3, 3], wv.clone()).unwrap());
        let bid = store.add("b", Tensor::from_vec(&[cout], bv.clone()).unwrap());
        let conv = Conv2d {
            weight: wid,
            bias: bid,
            cin,
            cout,
            stride: s,
        };
        let x = Maps {
            c: cin,
            n,
            h,
            w,
            data: rand_vec(&mut rng, cin * n * h * w, 1.0),
        };
        let (y, cache) = conv.forward(&store, &x).unwrap();
        let r = rand_vec(&mut rng, y.data.len(), 1.0);
        let dout = Maps {
            data: r.clone(),
            ..y.clone()
        };
        let mut grads = store.zero_grads();
        let dx = conv.backward(&store, &cache, &dout, &mut grads, true).unwrap().unwrap();

        let r64 = to64(&r);
        let (x64, w64, b64) = (to64(&x.data), to64(&wv), to64(&bv));
        let (yref, _, _) = conv_ref(&x64, &w64, &b64, cin, cout, n, h, w, s);
        let fwd_err = yref.iter().zip(&y.data).map(|(a, &b)| (a - b as f64).abs()).fold(0.0, f64::max);
        if fwd_err >= 1e-5 {
            return f64::INFINITY;
        }

        let nw = numeric_grad(&w64, &|p| dot(&conv_ref(&x64, p, &b64, cin, cout, n, h, w, s).0, &r64));
        let nb = numeric_grad(&b64, &|p| dot(&conv_ref(&x64, &w64, p, cin, cout, n, h, w, s).0, &r64));
        let nx = numeric_grad(&x64, &|p| dot(&conv_ref(p, &w64, &b64, cin, cout, n, h, w, s).0, &r64));
        worst = worst.max(max_rel(grads.get(wid).data(), &nw));
        worst = worst.max(max_rel(grads.get(bid).data(), &nb));
        worst = worst.max(max_rel(&dx.data, &nx));
    }
    worst
}

pub fn linear_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (din, dout, n) = (7, 4, 3);
    let mut store = ParamStore::new();
    let wv = rand_vec(&mut rng, dout * din, 0.5);
    let bv = rand_vec(&mut rng, dout, 0.5);
    let wid = store.add("w", Tensor::from_vec(&[dout, din], wv.clone()).unwrap());
    let bid = store.add("b", Tensor::from_vec(&[dout], bv.clone()).unwrap());
    let lin = Linear {
        weight: wid,
        bias: bid,
        din,
        dout,
    };
    let x = rand_vec(&mut rng, din * n, 1.0);
    let y = lin.forward(&store, &x, n).unwrap();
    let r = rand_vec(&mut rng, y.len(), 1.0);
    let mut grads = store.zero_grads();
    let dx = lin.backward(&store, &x, &r, n, &mut grads, true).unwrap();

    let (x64, w64, b64, r64) = (to64(&x), to64(&wv), to64(&bv), to64(&r));
    let nw = numeric_grad(&w64, &|p| dot(&linear_ref(&x64, p, &b64, din, dout, n), &r64));
    let nb = numeric_grad(&b64, &|p| dot(&linear_ref(&x64, &w64, p, din, dout, n), &r64));
    let nx = numeric_grad(&x64, &|p| dot(&linear_ref(p, &w64, &b64, din, dout, n), &r64));
    max_rel(grads.get(wid).data(), &nw)
        .max(max_rel(grads.get(bid).data(), &nb))
        .max(max_rel(&dx, &nx))
}

/// Inputs are pushed away from zero so central differences stay on one side.
pub fn relu_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x: Vec<f32> = rand_vec(&mut rng, 50, 1.0)
        .into_iter()
        .map(|v| if v.abs() < 0.05 { v + 0.1 } else { v })
        .collect();
    let mut y = x.clone();
    relu_forward(&mut y);
    let r = rand_vec(&mut rng, 50, 1.0);
    let mut dy = r.clone();
    relu_backward(&y, &mut dy);
    let r64 = to64(&r);
    let num = numeric_grad(&to64(&x), &|p| p.iter().zip(&r64).map(|(v, w)| v.max(0.0) * w).sum());
    max_rel(&dy, &num)
}

/// Parameter and per-step input gradients through a 5-step unroll.
pub fn lstm_check() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (din, hs, b, steps) = (3, 4, 2, 5);
    let mut store = ParamStore::new();
    let wih = rand_vec(&mut rng, 4 * hs * din, 0.6);
    let whh = rand_vec(&mut rng, 4 * hs * hs, 0.6);
    let bias = rand_vec(&mut rng, 4 * hs, 0.6);
    let lstm = Lstm {
        w_ih: store.add("w_ih", Tensor::from_vec(&[4 * hs, din], wih.clone()).unwrap()),
        w_hh: store.add("w_hh", Tensor::from_vec(&[4 * hs, hs], whh.clone()).unwrap()),
        bias: store.add("b", Tensor::from_vec(&[4 * hs], bias.clone()).unwrap()),
        din,
        hidden: hs,
    };
    let xs: Vec<Vec<f32>> = (0..steps).map(|_| rand_vec(&mut rng, din * b, 1.0)).collect();
    let (h, cache) = lstm.forward_sequence(&store, &xs, b).unwrap();
    let r = rand_vec(&mut rng, h.len(), 1.0);
    let mut grads = store.zero_grads();
    let dxs = lstm.backward_sequence(&store, &cache, &r, &mut grads);

    let xs64: Vec<Vec<f64>> = xs.iter().map(|x| to64(x)).collect();
    let (wih64, whh64, b64, r64) = (to64(&wih), to64(&whh), to64(&bias), to64(&r));
    let href = lstm_ref(&xs64, &wih64, &whh64, &b64, din, hs, b);
    if !href.iter().zip(&h).all(|(a, &b)| (a - b as f64).abs() < 1e-5) {
        return f64::INFINITY;
    }

    let loss = |xs: &[Vec<f64>], wih: &[f64], whh: &[f64], bias: &[f64]| dot(&lstm_ref(xs, wih, whh, bias, din, hs, b), &r64);
    let n_ih = numeric_grad(&wih64, &|p| loss(&xs64, p, &whh64, &b64));
    let n_hh = numeric_grad(&whh64, &|p| loss(&xs64, &wih64, p, &b64));
    let n_b = numeric_grad(&b64, &|p| loss(&xs64, &wih64, &whh64, p));
    let mut worst = max_rel(grads.get(lstm.w_ih).data(), &n_ih)
        .max(max_rel(grads.get(lstm.w_hh).data(), &n_hh))
        .max(max_rel(grads.get(lstm.bias).data(), &n_b));
    for t in 0..steps {
        let n_x = numeric_grad(&xs64[t], &|p| {
            let mut v = xs64.clone();
            v[t] = p.to_vec();
            loss(&v, &wih64, &whh64, &b64)
        });
        worst = worst.max(max_rel(&dxs[t], &n_x));
    }
    worst
}

pub fn small_policy_config() -> PolicyConfig {
    PolicyConfig {
        representation: Representation::Delta,
        history: 3,
        channels: vec![2, 3, 3, 2],
        feature_dim: 5,
        hidden_dim: 4,
        image_size: 8,
        seed: 9,
        ..PolicyConfig::default()
    }
}

/// Whole-policy reference forward from the parameter store contents. Also
/// returns the smallest conv pre-activation magnitude, the distance to the
/// nearest ReLU kink.
fn policy_ref(p: &[Vec<f64>], names: &[String], cfg: &PolicyConfig, images: &[f64], n: usize, index: &[Vec<usize>]) -> (Vec<f64>, f64) {
    let get = |name: &str| &p[names.iter().position(|x| x == name).unwrap()];
    let mut margin = f64::INFINITY;
    let mut x = images.to_vec();
    let (mut c, mut h) = (3, cfg.image_size);
    for (i, &cout) in cfg.channels.iter().enumerate() {
        let (y, ho, _) = conv_ref(&x, get(&format!("conv{i}.w")), get(&format!("conv{i}.b")), c, cout, n, h, h, 2);
        margin = y.iter().map(|v| v.abs()).fold(margin, f64::min);
        x = y.into_iter().map(|v| v.max(0.0)).collect();
        c = cout;
        h = ho;
    }
    let plane = h * h;
    let mut flat = vec![0.0; c * plane * n];
    for ci in 0..c {
        for ni in 0..n {
            for pi in 0..plane {
                flat[(ci * plane + pi) * n + ni] = x[(ci * n + ni) * plane + pi];
            }
        }
    }
    let f = cfg.feature_dim;
    let feats = linear_ref(&flat, get("fc.w"), get("fc.b"), c * plane, f, n);
    let b = index.len();
    let xs: Vec<Vec<f64>> = (0..cfg.history)
        .map(|k| {
            let mut v = vec![0.0; f * b];
            for (bi, steps) in index.iter().enumerate() {
                for r in 0..f {
                    v[r * b + bi] = feats[r * n + steps[k]];
                }
            }
            v
        })
        .collect();
    let hfin = lstm_ref(&xs, get("lstm.w_ih"), get("lstm.w_hh"), get("lstm.b"), f, cfg.hidden_dim, b);
    (linear_ref(&hfin, get("head.w"), get("head.b"), cfg.hidden_dim, 6, b), margin)
}

/// A randomized small policy whose conv pre-activations all stay at least
/// `margin` away from zero, so central differences never straddle a kink.
fn smooth_policy_case(margin: f64) -> (PolicyConfig, Policy, Maps, Vec<Vec<usize>>, Vec<f32>) {
    let cfg = small_policy_config();
    let index = vec![vec![0, 0, 1], vec![2, 3, 1], vec![3, 3, 3]];
    for seed in 0..100 {
        let mut policy = Policy::new(cfg.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // Biases start at zero; randomize them so their gradients are exercised.
        for i in 0..policy.store.len() {
            let t = policy.store.get_mut(ParamId(i));
            let fresh = rand_vec(&mut rng, t.len(), 0.3);
            for (v, d) in t.data_mut().iter_mut().zip(fresh) {
                *v += d;
            }
        }
        let n = 4;
        let images = Maps {
            c: 3,
            n,
            h: 8,
            w: 8,
            data: (0..3 * n * 64).map(|_| rng.random_range(0.0f32..1.0)).collect(),
        };
        let names: Vec<String> = policy.store.params().iter().map(|p| p.name.clone()).collect();
        let params: Vec<Vec<f64>> = policy.store.params().iter().map(|p| to64(p.value.data())).collect();
        let (_, m) = policy_ref(&params, &names, &cfg, &to64(&images.data), n, &index);
        if m >= margin {
            let r = rand_vec(&mut rng, 6 * index.len(), 1.0);
            return (cfg, policy, images, index, r);
        }
    }
    panic!("no seed keeps pre-activations {margin} away from zero");
}

/// Worst relative error over every policy parameter against the double
/// precision reference forward.
pub fn end_to_end_check() -> f64 {
    let (cfg, policy, images, index, r) = smooth_policy_case(2e-2);
    let n = images.n;
    let (pred, cache) = policy.forward_images(&images, &index).unwrap();
    let grads = policy.backward(&cache, &r).unwrap();

    let names: Vec<String> = policy.store.params().iter().map(|p| p.name.clone()).collect();
    let params: Vec<Vec<f64>> = policy.store.params().iter().map(|p| to64(p.value.data())).collect();
    let img64 = to64(&images.data);
    let r64 = to64(&r);
    let (pref, _) = policy_ref(&params, &names, &cfg, &img64, n, &index);
    if !pref.iter().zip(&pred).all(|(a, &b)| (a - b as f64).abs() < 1e-4) {
        return f64::INFINITY;
    }

    let mut worst = 0.0f64;
    for pi in 0..names.len() {
        let num = numeric_grad(&params[pi], &|v| {
            let mut ps = params.clone();
            ps[pi] = v.to_vec();
            dot(&policy_ref(&ps, &names, &cfg, &img64, n, &index).0, &r64)
        });
        worst = worst.max(max_rel(grads.get(ParamId(pi)).data(), &num));
    }
    worst
}
