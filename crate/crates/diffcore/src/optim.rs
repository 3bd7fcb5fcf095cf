use crate::{DiffError, ParamStore, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam. Moment buffers are created on the first step and
/// follow the store's parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    first: Vec<Vec<f32>>,
    second: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(
        config: AdamConfig,
        step: u64,
        first: Vec<Vec<f32>>,
        second: Vec<Vec<f32>>,
    ) -> Result<Self> {
        if first.len() != second.len()
            || first.iter().zip(&second).any(|(a, b)| a.len() != b.len())
        {
            return Err(DiffError::Invalid("Adam moment buffers disagree in shape".into()));
        }
        Ok(Self {
            config,
            step,
            first,
            second,
        })
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Vec<f32>] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Vec<f32>] {
        &self.second
    }

    /// Applies one update using each parameter's accumulated gradient
    /// (a missing gradient counts as zero).
    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        ensure_buffers(&mut self.first, params)?;
        ensure_buffers(&mut self.second, params)?;
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        for (i, tensor) in params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            let grad = tensor.grad().map(<[f32]>::to_vec);
            let values = tensor.values_mut();
            for j in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                values[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RmsPropConfig {
    pub lr: f32,
    pub rho: f32,
    pub eps: f32,
}

impl Default for RmsPropConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            rho: 0.9,
            eps: 1e-8,
        }
    }
}

/// RMSprop: `v <- rho v + (1 - rho) g^2; w <- w - lr g / (sqrt(v) + eps)`.
#[derive(Clone, Debug, PartialEq)]
pub struct RmsProp {
    pub config: RmsPropConfig,
    square_avg: Vec<Vec<f32>>,
}

impl RmsProp {
    pub fn new(config: RmsPropConfig) -> Self {
        Self {
            config,
            square_avg: Vec::new(),
        }
    }

    pub fn from_parts(config: RmsPropConfig, square_avg: Vec<Vec<f32>>) -> Self {
        Self { config, square_avg }
    }

    pub fn square_avg(&self) -> &[Vec<f32>] {
        &self.square_avg
    }

    pub fn step(&mut self, params: &mut ParamStore) -> Result<()> {
        ensure_buffers(&mut self.square_avg, params)?;
        let RmsPropConfig { lr, rho, eps } = self.config;
        for (i, tensor) in params.tensors_mut().enumerate() {
            let v = &mut self.square_avg[i];
            let grad = tensor.grad().map(<[f32]>::to_vec);
            let values = tensor.values_mut();
            for j in 0..values.len() {
                let g = grad.as_ref().map_or(0.0, |g| g[j]);
                v[j] = rho * v[j] + (1.0 - rho) * g * g;
                values[j] -= lr * g / (v[j].sqrt() + eps);
            }
        }
        Ok(())
    }
}

fn ensure_buffers(buffers: &mut Vec<Vec<f32>>, params: &ParamStore) -> Result<()> {
    if buffers.is_empty() {
        *buffers = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        return Ok(());
    }
    if buffers.len() != params.len() {
        return Err(DiffError::Invalid(format!(
            "optimizer tracks {} tensors but the store has {}",
            buffers.len(),
            params.len()
        )));
    }
    for (buf, (name, t)) in buffers.iter().zip(params.iter()) {
        if buf.len() != t.numel() {
            return Err(DiffError::Invalid(format!(
                "optimizer state for {name} has {} values, tensor has shape {:?}",
                buf.len(),
                t.shape()
            )));
        }
    }
    Ok(())
}

/// Clamps every parameter value into `[-bound, bound]`.
pub fn clip_params(params: &mut ParamStore, bound: f32) -> Result<()> {
    if !(bound > 0.0) {
        return Err(DiffError::Config(format!("clip bound must be positive, got {bound}")));
    }
    for t in params.tensors_mut() {
        clip_tensor(t, bound);
    }
    Ok(())
}

fn clip_tensor(t: &mut Tensor, bound: f32) {
    for v in t.values_mut() {
        *v = v.clamp(-bound, bound);
    }
}
