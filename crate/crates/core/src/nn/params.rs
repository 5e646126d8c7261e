use super::tensor::Tensor;
use super::NnError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Adam first moment.
    pub m: Tensor,
    /// Adam second moment.
    pub v: Tensor,
}

/// Named parameters with their Adam moments and the optimizer step count.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let shape = value.shape().to_vec();
        self.params.push(Param {
            name: name.to_string(),
            value,
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn push_param(&mut self, p: Param) -> Result<ParamId, NnError> {
        if p.m.shape() != p.value.shape() || p.v.shape() != p.value.shape() {
            return Err(NnError::Shape(format!("moment shapes do not match parameter {}", p.name)));
        }
        self.params.push(p);
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Zeroed gradient buffers shaped like the parameters.
    pub fn zero_grads(&self) -> Grads {
        Grads(self.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect())
    }
}

/// Gradient buffers, index-aligned with a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Tensor>);

impl Grads {
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.0[id.0]
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.0[id.0]
    }

    pub fn check_finite(&self) -> Result<(), NnError> {
        self.0.iter().try_for_each(|g| g.check_finite("backward"))
    }

    pub fn scale(&mut self, s: f32) {
        for g in &mut self.0 {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update of every parameter in `store`.
pub fn adam_step(store: &mut ParamStore, grads: &Grads, cfg: &AdamConfig) -> Result<(), NnError> {
    if grads.0.len() != store.params.len() {
        return Err(NnError::Shape(format!(
            "{} gradients for {} parameters",
            grads.0.len(),
            store.params.len()
        )));
    }
    for (p, g) in store.params.iter().zip(&grads.0) {
        if p.value.shape() != g.shape() {
            return Err(NnError::Shape(format!(
                "gradient {:?} for parameter {} {:?}",
                g.shape(),
                p.name,
                p.value.shape()
            )));
        }
    }
    grads.check_finite()?;

    store.step += 1;
    let t = store.step as i32;
    let b1 = cfg.beta1 as f32;
    let b2 = cfg.beta2 as f32;
    let one_m_b1 = (1.0 - cfg.beta1) as f32;
    let one_m_b2 = (1.0 - cfg.beta2) as f32;
    let c1 = (1.0 - cfg.beta1.powi(t)) as f32;
    let c2 = (1.0 - cfg.beta2.powi(t)) as f32;
    let lr = cfg.lr as f32;
    let eps = cfg.eps as f32;

    for (p, g) in store.params.iter_mut().zip(&grads.0) {
        let value = p.value.data_mut();
        let m = p.m.data_mut();
        let v = p.v.data_mut();
        for (i, &gi) in g.data().iter().enumerate() {
            m[i] = b1 * m[i] + one_m_b1 * gi;
            v[i] = b2 * v[i] + one_m_b2 * gi * gi;
            let mhat = m[i] / c1;
            let vhat = v[i] / c2;
            value[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
