//! Representation quality, online/momentum misalignment and the
//! model-inversion attack.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moco::MomentumPair;
use crate::nn::loss::{mse, softmax_cross_entropy};
use crate::nn::{cosine_lr, Adam, AdamConfig, Conv2d, Dense, Layer, Stack};
use crate::tensor::Tensor;

/// Mean absolute online–momentum difference over clients and coordinates:
/// `Σ_i |φ_i − EMA(φ_i)|₁ / (N · dim)`.
pub fn misalignment<'a>(pairs: impl IntoIterator<Item = &'a MomentumPair>) -> Result<f64> {
    let mut total = 0.0f64;
    let mut clients = 0usize;
    let mut dim = None;
    for pair in pairs {
        let online = pair.online.params();
        let momentum = pair.momentum.params();
        if online.len() != momentum.len() {
            return Err(Error::Invariant("online and momentum structures differ".into()));
        }
        let mut d = 0usize;
        for (a, b) in online.iter().zip(&momentum) {
            if a.shape() != b.shape() {
                return Err(Error::Invariant("online and momentum structures differ".into()));
            }
            d += a.len();
            total += a
                .data()
                .iter()
                .zip(b.data())
                .map(|(x, y)| (*x as f64 - *y as f64).abs())
                .sum::<f64>();
        }
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return Err(Error::Invariant("clients have different parameter counts".into()))
            }
            _ => {}
        }
        clients += 1;
    }
    let dim = dim.ok_or_else(|| Error::Argument("misalignment of zero clients".into()))?;
    if dim == 0 {
        return Ok(0.0);
    }
    Ok(total / (clients as f64 * dim as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisalignmentSample {
    pub step: usize,
    pub value: f64,
    pub sync: bool,
}

/// Misalignment over training; steps strictly increase.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MisalignmentTrace {
    samples: Vec<MisalignmentSample>,
}

impl MisalignmentTrace {
    pub fn push(&mut self, step: usize, value: f64, sync: bool) -> Result<()> {
        if value < 0.0 || !value.is_finite() {
            return Err(Error::Invariant(format!("misalignment {value} is not a finite non-negative value")));
        }
        if self.samples.last().is_some_and(|s| s.step >= step) {
            return Err(Error::Invariant(format!("trace step {step} does not increase")));
        }
        self.samples.push(MisalignmentSample { step, value, sync });
        Ok(())
    }

    pub fn samples(&self) -> &[MisalignmentSample] {
        &self.samples
    }

    pub fn peak(&self) -> f64 {
        self.samples.iter().map(|s| s.value).fold(0.0, f64::max)
    }
}

const FEATURE_CHUNK: usize = 256;

/// Encoder outputs for every image, flattened to rows.
pub fn features(encoder: &Stack, images: &Tensor) -> Result<Tensor> {
    let mut parts = Vec::new();
    let mut start = 0;
    while start < images.rows() {
        let end = (start + FEATURE_CHUNK).min(images.rows());
        let out = encoder.infer(&images.slice_rows(start, end)?)?;
        let rows = out.rows();
        let width = out.row_len();
        parts.push(out.reshape(&[rows, width])?);
        start = end;
    }
    Tensor::concat_rows(&parts.iter().collect::<Vec<_>>())
}

fn normalize_rows(t: &mut Tensor) {
    for r in 0..t.rows() {
        let row = t.row_mut(r);
        let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
}

/// Majority vote among the `k` nearest rows by cosine distance. Ties go to
/// the smaller summed distance, then the lower label.
pub fn knn_classify(memory: &Tensor, labels: &[usize], query: &[f32], k: usize) -> usize {
    let mut dists: Vec<(f32, usize)> = (0..memory.rows())
        .map(|i| (1.0 - Tensor::dot(memory.row(i), query), i))
        .collect();
    dists.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    let mut votes = vec![0usize; classes];
    let mut summed = vec![0.0f64; classes];
    for &(d, i) in dists.iter().take(k.min(memory.rows())) {
        votes[labels[i]] += 1;
        summed[labels[i]] += d as f64;
    }
    (0..classes)
        .filter(|&c| votes[c] > 0)
        .min_by(|&a, &b| {
            votes[b]
                .cmp(&votes[a])
                .then(summed[a].total_cmp(&summed[b]))
                .then(a.cmp(&b))
        })
        .unwrap_or(0)
}

/// k-NN accuracy of precomputed features (rows are L2-normalized here).
pub fn knn_accuracy(
    memory: &Tensor,
    memory_labels: &[usize],
    queries: &Tensor,
    query_labels: &[usize],
    k: usize,
) -> Result<f64> {
    if k == 0 {
        return Err(Error::Argument("k must be at least 1".into()));
    }
    if memory_labels.is_empty() || query_labels.is_empty() {
        return Err(Error::Argument("k-NN needs non-empty memory and query sets".into()));
    }
    let mut mem = memory.clone();
    let mut qs = queries.clone();
    normalize_rows(&mut mem);
    normalize_rows(&mut qs);
    let correct = (0..qs.rows())
        .filter(|&i| knn_classify(&mem, memory_labels, qs.row(i), k) == query_labels[i])
        .count();
    Ok(correct as f64 / qs.rows() as f64)
}

/// Classifies every validation image by its `k` nearest training features.
pub fn knn_eval(encoder: &Stack, train: &Dataset, val: &Dataset, k: usize) -> Result<f64> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Argument("k-NN needs non-empty train and validation sets".into()));
    }
    let mem = features(encoder, &train.images)?;
    let qs = features(encoder, &val.images)?;
    knn_accuracy(&mem, &train.labels, &qs, &val.labels, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch: 128,
            lr: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeReport {
    pub best_accuracy: f64,
    pub final_accuracy: f64,
}

fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Linear probe on precomputed features: one dense layer trained with
/// softmax cross-entropy, Adam and a cosine schedule.
pub fn linear_probe_features(
    train: &Tensor,
    train_labels: &[usize],
    val: &Tensor,
    val_labels: &[usize],
    classes: usize,
    config: &ProbeConfig,
) -> Result<ProbeReport> {
    if let Some(&bad) = train_labels.iter().chain(val_labels).find(|&&l| l >= classes) {
        return Err(Error::Argument(format!("label {bad} out of range for {classes} classes")));
    }
    if train_labels.is_empty() || val_labels.is_empty() {
        return Err(Error::Argument("linear probe needs non-empty train and validation sets".into()));
    }
    if classes < 2 {
        log::warn!("linear probe on a single class is trivially exact");
        return Ok(ProbeReport {
            best_accuracy: 1.0,
            final_accuracy: 1.0,
        });
    }
    if config.batch == 0 || config.epochs == 0 {
        return Err(Error::Config("probe epochs and batch must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut head = Stack::new(vec![Layer::Dense(Dense::init(train.row_len(), classes, &mut rng))]);
    let mut adam = Adam::new(AdamConfig::default(), &head.params());
    let n = train.rows();
    let steps_per_epoch = n.div_ceil(config.batch);
    let total = config.epochs * steps_per_epoch;
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut best = 0.0f64;
    let mut last = 0.0f64;
    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch) {
            let x = train.gather_rows(chunk)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train_labels[i]).collect();
            let logits = head.forward(&x, true)?;
            let (_, grad) = softmax_cross_entropy(&logits, &y)?;
            let grads = head.backward(&grad)?;
            let lr = cosine_lr(step, total, config.lr)?;
            adam.step(head.params_mut(), &grads.params, lr)?;
            step += 1;
        }
        let logits = head.infer(val)?;
        let correct = (0..val.rows()).filter(|&i| argmax(logits.row(i)) == val_labels[i]).count();
        last = correct as f64 / val.rows() as f64;
        best = best.max(last);
    }
    Ok(ProbeReport {
        best_accuracy: best,
        final_accuracy: last,
    })
}

/// Linear evaluation of a frozen encoder; returns best validation accuracy.
pub fn linear_probe(encoder: &Stack, train: &Dataset, val: &Dataset, config: &ProbeConfig) -> Result<ProbeReport> {
    let classes = train.class_count.max(val.class_count);
    if let Some(&bad) = val.labels.iter().find(|&&l| l >= train.class_count) {
        return Err(Error::Argument(format!(
            "validation label {bad} out of range for {} training classes",
            train.class_count
        )));
    }
    let ftrain = features(encoder, &train.images)?;
    let fval = features(encoder, &val.images)?;
    linear_probe_features(&ftrain, &train.labels, &fval, &val.labels, classes, config)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    /// Fraction of the training data available to the attacker, in (0, 1].
    pub attacker_fraction: f64,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            attacker_fraction: 0.01,
            epochs: 50,
            batch: 32,
            lr: 0.001,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackReport {
    /// Reconstruction MSE over the held-out split; higher means more private.
    pub mse: f64,
    pub attacker_samples: usize,
    pub eval_samples: usize,
}

/// Narrowest hidden convolution in the attack decoder.
const DECODER_MIN_WIDTH: usize = 16;

/// Decoder mapping boundary activations back to images.
#[derive(Debug, Clone)]
pub struct AttackDecoder {
    pub stack: Stack,
}

impl AttackDecoder {
    /// Mirrors the client's shape trajectory: an optional dense + reshape
    /// back to the last spatial shape, then per spatial stage a nearest
    /// upsample (when the stage downsampled) and a 3x3 convolution with
    /// ReLU, and a final linear 3x3 convolution to image channels. An empty
    /// client gets a single linear convolution.
    pub fn mirror(client: &Stack, image_shape: [usize; 3], seed: u64) -> Result<Self> {
        let trace = client.shape_trace(&image_shape)?;
        let mut spatial: Vec<Vec<usize>> = vec![image_shape.to_vec()];
        for (layer, shape) in client.layers().iter().zip(&trace[1..]) {
            if matches!(layer, Layer::Conv2d(_) | Layer::AvgPool2d { .. }) {
                spatial.push(shape.clone());
            }
        }
        let boundary = trace.last().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let deepest = spatial.last().unwrap().clone();
        if boundary.len() == 1 {
            layers.push(Layer::Dense(Dense::init(boundary[0], deepest.iter().product(), &mut rng)));
            layers.push(Layer::Relu);
            layers.push(Layer::Reshape { shape: deepest.clone() });
        } else if *boundary != deepest {
            return Err(Error::Config(format!(
                "cannot mirror boundary {boundary:?} from spatial shape {deepest:?}"
            )));
        }
        let mut channels = deepest[0];
        for j in (1..spatial.len()).rev() {
            let (from, to) = (&spatial[j], &spatial[j - 1]);
            if to[1] > from[1] {
                if to[1] % from[1] != 0 || to[2] != from[2] * (to[1] / from[1]) {
                    return Err(Error::Config(format!("no integer upsampling from {from:?} to {to:?}")));
                }
                layers.push(Layer::Upsample { factor: to[1] / from[1] });
            }
            let width = if j > 1 { to[0] } else { DECODER_MIN_WIDTH }.max(DECODER_MIN_WIDTH);
            layers.push(Layer::Conv2d(Conv2d::init(channels, width, 3, 1, &mut rng)));
            layers.push(Layer::Relu);
            channels = width;
        }
        if spatial.len() > 1 {
            layers.push(Layer::Conv2d(Conv2d::init(channels, image_shape[0], 3, 1, &mut rng)));
        }
        if spatial.len() == 1 {
            let c = image_shape[0];
            layers.push(Layer::Conv2d(Conv2d::init(c, c, 3, 1, &mut rng)));
        }
        let stack = Stack::new(layers);
        let out = stack.output_shape(boundary)?;
        if out != image_shape {
            return Err(Error::Invariant(format!("decoder produces {out:?}, images are {image_shape:?}")));
        }
        Ok(Self { stack })
    }
}

/// Trains a decoder on activations of the attacker's share of `data` and
/// reports reconstruction MSE on the remaining samples.
pub fn mia_attack(client: &Stack, data: &Dataset, config: &AttackConfig) -> Result<AttackReport> {
    if !(config.attacker_fraction > 0.0 && config.attacker_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "attacker fraction must lie in (0, 1], got {}",
            config.attacker_fraction
        )));
    }
    let n = data.len();
    let n_attack = ((n as f64 * config.attacker_fraction).round() as usize).min(n);
    if config.batch == 0 || n_attack < config.batch {
        return Err(Error::Config(format!(
            "attacker split of {n_attack} samples is smaller than one batch of {}",
            config.batch
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let (attack_idx, eval_idx) = order.split_at(n_attack);
    // With the whole set given to the attacker, evaluate on it.
    let eval_idx = if eval_idx.is_empty() { attack_idx } else { eval_idx };

    let attack_images = data.batch(attack_idx)?;
    let attack_acts = client.infer(&attack_images)?;
    let mut decoder = AttackDecoder::mirror(client, data.sample_shape(), config.seed ^ 0xDEC0DE)?.stack;
    let mut adam = Adam::new(AdamConfig::default(), &decoder.params());
    let mut local: Vec<usize> = (0..n_attack).collect();
    for _ in 0..config.epochs {
        local.shuffle(&mut rng);
        for chunk in local.chunks(config.batch) {
            let x = attack_acts.gather_rows(chunk)?;
            let y = attack_images.gather_rows(chunk)?;
            let pred = decoder.forward(&x, true)?;
            let (_, grad) = mse(&pred, &y)?;
            let grads = decoder.backward(&grad)?;
            adam.step(decoder.params_mut(), &grads.params, config.lr)?;
        }
    }
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in eval_idx.chunks(FEATURE_CHUNK) {
        let images = data.batch(chunk)?;
        let recon = decoder.infer(&client.infer(&images)?)?;
        let (l, _) = mse(&recon, &images)?;
        total += l as f64 * images.len() as f64;
        count += images.len();
    }
    Ok(AttackReport {
        mse: total / count as f64,
        attacker_samples: n_attack,
        eval_samples: eval_idx.len(),
    })
}
