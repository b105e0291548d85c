//! Momentum SGD, Adam and the cosine learning-rate schedule.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self {
            momentum: 0.9,
            weight_decay: 5e-4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

fn check_shapes(what: &str, params: &[&mut Tensor], grads: &[Tensor], buffers: &[Tensor]) -> Result<()> {
    if params.len() != grads.len() || params.len() != buffers.len() {
        return Err(Error::Argument(format!(
            "{what}: {} params, {} grads, {} buffers",
            params.len(),
            grads.len(),
            buffers.len()
        )));
    }
    for (i, ((p, g), b)) in params.iter().zip(grads).zip(buffers).enumerate() {
        if p.shape() != g.shape() || p.shape() != b.shape() {
            return Err(Error::Argument(format!(
                "{what}: shape mismatch at parameter {i}: {:?} / {:?} / {:?}",
                p.shape(),
                g.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

/// Classic momentum SGD with weight decay folded into the gradient:
/// `v ← μ·v + (g + wd·p)`, `p ← p − lr·v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    config: SgdConfig,
    velocity: Vec<Tensor>,
    decay_mask: Vec<bool>,
}

impl Sgd {
    pub fn new(config: SgdConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            velocity: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            decay_mask: vec![true; params.len()],
        }
    }

    /// Selects which parameters receive weight decay.
    pub fn with_decay_mask(mut self, mask: Vec<bool>) -> Self {
        assert_eq!(mask.len(), self.velocity.len());
        self.decay_mask = mask;
        self
    }

    pub fn config(&self) -> SgdConfig {
        self.config
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    pub fn reset(&mut self) {
        for v in &mut self.velocity {
            v.data_mut().fill(0.0);
        }
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        check_shapes("sgd", &params, grads, &self.velocity)?;
        let SgdConfig { momentum, weight_decay } = self.config;
        for (((p, g), v), &decay) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.velocity)
            .zip(&self.decay_mask)
        {
            let wd = if decay { weight_decay } else { 0.0 };
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                *vv = momentum * *vv + (gv + wd * *pv);
                *pv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    config: AdamConfig,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
    steps: u64,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[&Tensor]) -> Self {
        Self {
            config,
            first: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            second: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn step(&mut self, mut params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        check_shapes("adam", &params, grads, &self.first)?;
        self.steps += 1;
        let AdamConfig { beta1, beta2, epsilon } = self.config;
        let t = self.steps as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let lr = lr as f64;
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.first)
            .zip(&mut self.second)
        {
            for (((pv, &gv), mv), vv) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                let g = gv as f64;
                let m_new = beta1 * *mv as f64 + (1.0 - beta1) * g;
                let v_new = beta2 * *vv as f64 + (1.0 - beta2) * g * g;
                *mv = m_new as f32;
                *vv = v_new as f32;
                let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + epsilon);
                *pv = (*pv as f64 - update) as f32;
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Debug, Clone, PartialEq)]
pub enum Optimizer {
    SgdMomentum(Sgd),
    Adam(Adam),
}

impl Optimizer {
    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor], lr: f32) -> Result<()> {
        match self {
            Optimizer::SgdMomentum(s) => s.step(params, grads, lr),
            Optimizer::Adam(a) => a.step(params, grads, lr),
        }
    }
}

/// `lr0 · ½ · (1 + cos(π · step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f32) -> Result<f32> {
    if total_steps == 0 || step > total_steps {
        return Err(Error::Argument(format!(
            "cosine schedule needs 0 <= step <= total_steps and total_steps > 0, got {step}/{total_steps}"
        )));
    }
    let phase = std::f64::consts::PI * step as f64 / total_steps as f64;
    Ok((lr0 as f64 * 0.5 * (1.0 + phase.cos())) as f32)
}
