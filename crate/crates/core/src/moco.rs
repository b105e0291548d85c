//! Momentum-contrast machinery: view augmentation, InfoNCE against a FIFO
//! queue of negatives, and exponential moving averages of parameters.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::Stack;
use crate::params::ParamSet;
use crate::tensor::Tensor;

/// Rows stored in the queue must be unit length within this tolerance.
pub const UNIT_NORM_TOLERANCE: f32 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MocoConfig {
    pub tau: f32,
    pub ema_momentum: f32,
    pub queue_capacity: usize,
    pub embedding_dim: usize,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            tau: 0.2,
            ema_momentum: 0.99,
            queue_capacity: 6000,
            embedding_dim: 32,
        }
    }
}

impl MocoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("moco.tau must be positive, got {}", self.tau)));
        }
        if !(0.0..1.0).contains(&self.ema_momentum) {
            return Err(Error::Config(format!(
                "moco.ema must lie in [0, 1), got {}",
                self.ema_momentum
            )));
        }
        if self.queue_capacity == 0 || self.embedding_dim == 0 {
            return Err(Error::Config("moco.queue and embedding width must be positive".into()));
        }
        Ok(())
    }
}

/// Ring buffer of unit-norm embeddings; eviction is oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    width: usize,
    capacity: usize,
    data: Vec<f32>,
    cursor: usize,
    fill: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, width: usize) -> Result<Self> {
        if capacity == 0 || width == 0 {
            return Err(Error::Argument("queue capacity and width must be positive".into()));
        }
        Ok(Self {
            width,
            capacity,
            data: vec![0.0; capacity * width],
            cursor: 0,
            fill: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.fill
    }

    pub fn is_empty(&self) -> bool {
        self.fill == 0
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn push(&mut self, keys: &Tensor) -> Result<()> {
        if keys.shape().len() != 2 || keys.row_len() != self.width {
            return Err(Error::Argument(format!(
                "queue rows are {} wide, got keys of shape {:?}",
                self.width,
                keys.shape()
            )));
        }
        for r in 0..keys.rows() {
            let norm = keys.row(r).iter().map(|v| v * v).sum::<f32>().sqrt();
            if (norm - 1.0).abs() > UNIT_NORM_TOLERANCE {
                return Err(Error::Argument(format!(
                    "queue row {r} has norm {norm}, expected unit length"
                )));
            }
        }
        // Only the newest `capacity` rows can survive.
        let skip = keys.rows().saturating_sub(self.capacity);
        for r in skip..keys.rows() {
            let w = self.width;
            self.data[self.cursor * w..(self.cursor + 1) * w].copy_from_slice(keys.row(r));
            self.cursor = (self.cursor + 1) % self.capacity;
            self.fill = (self.fill + 1).min(self.capacity);
        }
        Ok(())
    }

    /// Stored rows from oldest to newest.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> + '_ {
        let start = (self.cursor + self.capacity - self.fill) % self.capacity;
        (0..self.fill).map(move |i| {
            let slot = (start + i) % self.capacity;
            &self.data[slot * self.width..(slot + 1) * self.width]
        })
    }

    pub fn to_tensor(&self) -> Option<Tensor> {
        if self.fill == 0 {
            return None;
        }
        let data = self.rows().flatten().copied().collect();
        Some(Tensor::new(vec![self.fill, self.width], data).expect("queue shape"))
    }
}

/// Per-sample InfoNCE in terms of raw dot products:
/// `−log(e^{pos/τ} / (e^{pos/τ} + Σ e^{neg/τ}))`, max-stabilized.
pub fn info_nce_from_dots(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let pos = positive / tau;
    let max = negatives.iter().map(|d| d / tau).fold(pos, f64::max);
    let denom: f64 = (pos - max).exp() + negatives.iter().map(|d| (d / tau - max).exp()).sum::<f64>();
    denom.ln() + max - pos
}

fn check_inputs(z_q: &Tensor, z_k: &Tensor, queue: &NegativeQueue) -> Result<()> {
    if z_q.shape() != z_k.shape() || z_q.shape().len() != 2 {
        return Err(Error::Argument(format!(
            "query/key shapes differ or are not 2-d: {:?} vs {:?}",
            z_q.shape(),
            z_k.shape()
        )));
    }
    if z_q.row_len() != queue.width() {
        return Err(Error::Argument(format!(
            "embedding width {} does not match queue width {}",
            z_q.row_len(),
            queue.width()
        )));
    }
    Ok(())
}

/// Batch-mean InfoNCE loss with its gradient w.r.t. the queries.
///
/// Keys enter only through their paired row; they are treated as constants.
pub fn info_nce_with_grad(
    z_q: &Tensor,
    z_k: &Tensor,
    queue: &NegativeQueue,
    tau: f32,
) -> Result<(f32, Tensor)> {
    check_inputs(z_q, z_k, queue)?;
    let tau = tau as f64;
    let rows = z_q.rows();
    let negatives: Vec<&[f32]> = queue.rows().collect();
    let mut grad = Tensor::zeros(z_q.shape());
    let mut total = 0.0f64;
    let mut neg_logits = vec![0.0f64; negatives.len()];
    let scale = 1.0 / (rows as f64 * tau);
    for r in 0..rows {
        let q = z_q.row(r);
        let k = z_k.row(r);
        let pos = Tensor::dot(q, k) as f64 / tau;
        let mut max = pos;
        for (l, m) in neg_logits.iter_mut().zip(&negatives) {
            *l = Tensor::dot(q, m) as f64 / tau;
            max = max.max(*l);
        }
        let p_pos = (pos - max).exp();
        let denom = p_pos + neg_logits.iter().map(|l| (l - max).exp()).sum::<f64>();
        total += denom.ln() + max - pos;
        let g = grad.row_mut(r);
        let w_pos = (p_pos / denom - 1.0) * scale;
        for (gv, &kv) in g.iter_mut().zip(k) {
            *gv = (w_pos * kv as f64) as f32;
        }
        for (l, m) in neg_logits.iter().zip(&negatives) {
            let w = ((l - max).exp() / denom * scale) as f32;
            for (gv, &mv) in g.iter_mut().zip(m.iter()) {
                *gv += w * mv;
            }
        }
    }
    let loss = (total / rows as f64) as f32;
    if !loss.is_finite() {
        return Err(Error::Numerical(format!("InfoNCE loss is {loss}")));
    }
    grad.ensure_finite("InfoNCE gradient")?;
    Ok((loss, grad))
}

pub fn info_nce(z_q: &Tensor, z_k: &Tensor, queue: &NegativeQueue, tau: f32) -> Result<f32> {
    info_nce_with_grad(z_q, z_k, queue, tau).map(|(l, _)| l)
}

/// `momentum ← m·momentum + (1−m)·online`, elementwise.
pub fn ema_slice(momentum: &mut [f32], online: &[f32], m: f32) {
    let keep = 1.0 - m;
    for (d, &s) in momentum.iter_mut().zip(online) {
        *d = m * *d + keep * s;
    }
}

pub fn ema_update_set(momentum: &mut ParamSet, online: &ParamSet, m: f32) -> Result<()> {
    momentum.ensure_congruent(online)?;
    for (dst, (_, src)) in momentum.tensors_mut().zip(online.iter()) {
        ema_slice(dst.data_mut(), src.data(), m);
    }
    Ok(())
}

/// An online stack and its exponential-moving-average copy.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentumPair {
    pub online: Stack,
    pub momentum: Stack,
}

impl MomentumPair {
    /// Momentum copy starts equal to the online parameters.
    pub fn new(online: Stack) -> Self {
        let momentum = online.clone();
        Self { online, momentum }
    }

    pub fn is_congruent(&self) -> bool {
        self.online.param_set().is_congruent(&self.momentum.param_set())
    }

    pub fn ema_update(&mut self, m: f32) -> Result<()> {
        let online = self.online.params();
        let momentum = self.momentum.params_mut();
        if online.len() != momentum.len() {
            return Err(Error::Invariant("momentum pair is not congruent".into()));
        }
        for (dst, src) in momentum.into_iter().zip(online) {
            if dst.shape() != src.shape() {
                return Err(Error::Invariant("momentum pair is not congruent".into()));
            }
            ema_slice(dst.data_mut(), src.data(), m);
        }
        Ok(())
    }
}

/// Strengths of the view-generation pipeline: random pad-and-crop shift,
/// horizontal flip, per-channel intensity scale and additive Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentationConfig {
    pub crop_padding: usize,
    pub flip_probability: f32,
    pub noise_sigma: f32,
    pub scale_jitter: f32,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            crop_padding: 2,
            flip_probability: 0.5,
            noise_sigma: 0.05,
            scale_jitter: 0.2,
        }
    }
}

impl AugmentationConfig {
    pub fn identity() -> Self {
        Self {
            crop_padding: 0,
            flip_probability: 0.0,
            noise_sigma: 0.0,
            scale_jitter: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return Err(Error::Config("augment.flip_probability must be in [0, 1]".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 || !(0.0..1.0).contains(&self.scale_jitter) {
            return Err(Error::Config(
                "augment.noise_sigma must be >= 0 and augment.scale_jitter in [0, 1)".into(),
            ));
        }
        Ok(())
    }

    /// One random view of a `(C, H, W)` sample.
    pub fn view(&self, sample: &[f32], shape: [usize; 3], rng: &mut impl Rng) -> Vec<f32> {
        let [c, h, w] = shape;
        let mut out = sample.to_vec();
        if self.crop_padding > 0 {
            let p = self.crop_padding as i64;
            let dy = rng.random_range(-p..=p) as isize;
            let dx = rng.random_range(-p..=p) as isize;
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let sy = y as isize + dy;
                        let sx = x as isize + dx;
                        out[(ch * h + y) * w + x] =
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                sample[(ch * h + sy as usize) * w + sx as usize]
                            } else {
                                0.0
                            };
                    }
                }
            }
        }
        if self.flip_probability > 0.0 && rng.random::<f32>() < self.flip_probability {
            for row in out.chunks_mut(w) {
                row.reverse();
            }
        }
        if self.scale_jitter > 0.0 {
            for plane in out.chunks_mut(h * w) {
                let s = 1.0 + rng.random_range(-self.scale_jitter..=self.scale_jitter);
                plane.iter_mut().for_each(|v| *v *= s);
            }
        }
        if self.noise_sigma > 0.0 {
            for v in &mut out {
                let n: f32 = StandardNormal.sample(rng);
                *v += self.noise_sigma * n;
            }
        }
        out
    }
}

/// Two independent views of one `(C, H, W)` image.
pub fn augment_pair(x: &Tensor, config: &AugmentationConfig, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let &[c, h, w] = x.shape() else {
        return Err(Error::Argument(format!("augment_pair expects (C, H, W), got {:?}", x.shape())));
    };
    let a = config.view(x.data(), [c, h, w], rng);
    let b = config.view(x.data(), [c, h, w], rng);
    Ok((
        Tensor::new(x.shape().to_vec(), a)?,
        Tensor::new(x.shape().to_vec(), b)?,
    ))
}

/// Views for every sample of an `(N, C, H, W)` batch, sample by sample.
pub fn augment_batch(batch: &Tensor, config: &AugmentationConfig, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    let &[_, c, h, w] = batch.shape() else {
        return Err(Error::Argument(format!("augment_batch expects (N, C, H, W), got {:?}", batch.shape())));
    };
    let mut first = Vec::with_capacity(batch.len());
    let mut second = Vec::with_capacity(batch.len());
    for r in 0..batch.rows() {
        first.extend(config.view(batch.row(r), [c, h, w], rng));
        second.extend(config.view(batch.row(r), [c, h, w], rng));
    }
    Ok((
        Tensor::new(batch.shape().to_vec(), first)?,
        Tensor::new(batch.shape().to_vec(), second)?,
    ))
}
