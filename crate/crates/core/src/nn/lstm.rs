//! LSTM cell over column batches, with backpropagation through time.
//!
//! Gate rows are stacked `[input; forget; candidate; output]`.

use super::gemm::{matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::{Grads, ParamId, ParamStore};
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub hidden: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub hidden: Vec<f32>,
    pub cell: Vec<f32>,
}

impl LstmState {
    pub fn zeros(size: usize) -> Self {
        LstmState {
            hidden: vec![0.0; size],
            cell: vec![0.0; size],
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

struct StepCache {
    x: Vec<f32>,
    h_prev: Vec<f32>,
    c_prev: Vec<f32>,
    /// Activated gates, `4·hidden × b`.
    gates: Vec<f32>,
    tanh_c: Vec<f32>,
}

pub struct LstmCache {
    steps: Vec<StepCache>,
    batch: usize,
}

impl Lstm {
    fn check(&self, store: &ParamStore) -> Result<(), NnError> {
        let g = 4 * self.hidden;
        if store.get(self.w_ih).shape() != [g, self.din]
            || store.get(self.w_hh).shape() != [g, self.hidden]
            || store.get(self.bias).shape() != [g]
        {
            return Err(NnError::Shape(format!("lstm params for {}→{}", self.din, self.hidden)));
        }
        Ok(())
    }

    /// One step for a batch of `b` columns. `h` and `c` are `hidden×b`.
    fn step(&self, store: &ParamStore, x: &[f32], h: &[f32], c: &[f32], b: usize) -> Result<StepCache, NnError> {
        if x.len() != self.din * b || h.len() != self.hidden * b || c.len() != self.hidden * b {
            return Err(NnError::Shape(format!(
                "lstm step: x {} h {} c {} for batch {b}",
                x.len(),
                h.len(),
                c.len()
            )));
        }
        let hs = self.hidden;
        let g = 4 * hs;
        let bias = store.get(self.bias).data();
        let mut pre = vec![0f32; g * b];
        for r in 0..g {
            pre[r * b..(r + 1) * b].iter_mut().for_each(|v| *v = bias[r]);
        }
        matmul_acc(g, b, self.din, store.get(self.w_ih).data(), x, &mut pre);
        matmul_acc(g, b, hs, store.get(self.w_hh).data(), h, &mut pre);

        let n = hs * b;
        for (i, v) in pre.iter_mut().enumerate() {
            *v = if (2 * n..3 * n).contains(&i) { v.tanh() } else { sigmoid(*v) };
        }
        let mut c_new = vec![0f32; n];
        let mut tanh_c = vec![0f32; n];
        for j in 0..n {
            c_new[j] = pre[n + j] * c[j] + pre[j] * pre[2 * n + j];
            tanh_c[j] = c_new[j].tanh();
        }
        super::tensor::check_finite(&c_new, "lstm")?;
        Ok(StepCache {
            x: x.to_vec(),
            h_prev: h.to_vec(),
            c_prev: c.to_vec(),
            gates: pre,
            tanh_c,
        })
    }

    /// Runs the cell over `xs` (each `din×b`) from a zero state and returns
    /// the final hidden state (`hidden×b`).
    pub fn forward_sequence(&self, store: &ParamStore, xs: &[Vec<f32>], b: usize) -> Result<(Vec<f32>, LstmCache), NnError> {
        self.check(store)?;
        let n = self.hidden * b;
        let mut h = vec![0f32; n];
        let mut c = vec![0f32; n];
        let mut steps = Vec::with_capacity(xs.len());
        for x in xs {
            let sc = self.step(store, x, &h, &c, b)?;
            for j in 0..n {
                c[j] = sc.gates[n + j] * sc.c_prev[j] + sc.gates[j] * sc.gates[2 * n + j];
                h[j] = sc.gates[3 * n + j] * sc.tanh_c[j];
            }
            steps.push(sc);
        }
        Ok((h, LstmCache { steps, batch: b }))
    }

    /// BPTT from a gradient on the final hidden state. Returns the gradient
    /// for each input step.
    pub fn backward_sequence(&self, store: &ParamStore, cache: &LstmCache, dh_final: &[f32], grads: &mut Grads) -> Vec<Vec<f32>> {
        let b = cache.batch;
        let hs = self.hidden;
        let g = 4 * hs;
        let n = hs * b;
        let mut dh = dh_final.to_vec();
        let mut dc = vec![0f32; n];
        let mut dxs = vec![Vec::new(); cache.steps.len()];
        let mut da = vec![0f32; g * b];

        for (t, sc) in cache.steps.iter().enumerate().rev() {
            let gt = &sc.gates;
            for j in 0..n {
                let (i, f, cg, o) = (gt[j], gt[n + j], gt[2 * n + j], gt[3 * n + j]);
                let tc = sc.tanh_c[j];
                let d_o = dh[j] * tc;
                let dcj = dc[j] + dh[j] * o * (1.0 - tc * tc);
                da[j] = dcj * cg * i * (1.0 - i);
                da[n + j] = dcj * sc.c_prev[j] * f * (1.0 - f);
                da[2 * n + j] = dcj * i * (1.0 - cg * cg);
                da[3 * n + j] = d_o * o * (1.0 - o);
                dc[j] = dcj * f;
            }

            {
                let db = grads.get_mut(self.bias).data_mut();
                for r in 0..g {
                    let mut acc = db[r];
                    for &v in &da[r * b..(r + 1) * b] {
                        acc += v;
                    }
                    db[r] = acc;
                }
            }
            matmul_nt_acc(g, self.din, b, &da, &sc.x, grads.get_mut(self.w_ih).data_mut());
            matmul_nt_acc(g, hs, b, &da, &sc.h_prev, grads.get_mut(self.w_hh).data_mut());

            let mut dx = vec![0f32; self.din * b];
            matmul_tn_acc(self.din, b, g, store.get(self.w_ih).data(), &da, &mut dx);
            dxs[t] = dx;

            dh.iter_mut().for_each(|v| *v = 0.0);
            matmul_tn_acc(hs, b, g, store.get(self.w_hh).data(), &da, &mut dh);
        }
        dxs
    }
}

/// One LSTM step for a single input vector.
pub fn lstm_step(lstm: &Lstm, store: &ParamStore, x: &[f32], state: &LstmState) -> Result<(Vec<f32>, LstmState), NnError> {
    lstm.check(store)?;
    let sc = lstm.step(store, x, &state.hidden, &state.cell, 1)?;
    let n = lstm.hidden;
    let mut next = LstmState::zeros(n);
    for j in 0..n {
        next.cell[j] = sc.gates[n + j] * sc.c_prev[j] + sc.gates[j] * sc.gates[2 * n + j];
        next.hidden[j] = sc.gates[3 * n + j] * sc.tanh_c[j];
    }
    Ok((next.hidden.clone(), next))
}
