//! Datasets: a procedural synthetic generator, an IDX reader, and the
//! non-IID class partitioner.

use std::collections::VecDeque;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, LoadError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(n, c, h, w)` with values in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if images.shape().len() != 4 {
            return Err(Error::Argument(format!("images must be (n, c, h, w), got {:?}", images.shape())));
        }
        if images.rows() != labels.len() {
            return Err(Error::Argument(format!(
                "{} images but {} labels",
                images.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Argument(format!("label {bad} outside 0..{class_count}")));
        }
        Ok(Self {
            images,
            labels,
            class_count,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Tensor> {
        self.images.gather_rows(indices)
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Ok(Dataset {
            images: self.images.gather_rows(indices)?,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            class_count: self.class_count,
        })
    }

    /// Mean over pixel positions of the per-position variance across samples.
    pub fn pixel_variance(&self) -> f64 {
        let n = self.len() as f64;
        let w = self.images.row_len();
        let mut total = 0.0;
        for j in 0..w {
            let vals = (0..self.len()).map(|i| self.images.row(i)[j] as f64);
            let mean = vals.clone().sum::<f64>() / n;
            total += vals.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        }
        total / w as f64
    }
}

/// Parameters of the procedural dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub shape: [usize; 3],
    /// Standard deviation of the per-pixel Gaussian noise.
    pub noise: f32,
}

/// Each class is an oriented intensity ramp combined with a bright blob at
/// a class-specific position; samples add Gaussian pixel noise and are
/// clipped to `[0, 1]`. Labels cycle through the classes.
pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<Dataset> {
    let SyntheticSpec { classes, per_class, shape, noise } = *spec;
    if classes == 0 || per_class == 0 || shape.contains(&0) {
        return Err(Error::Argument("synthetic dataset parameters must be positive".into()));
    }
    let [c, h, w] = shape;
    let prototypes: Vec<Vec<f32>> = (0..classes).map(|k| prototype(k, classes, shape)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = classes * per_class;
    let mut data = Vec::with_capacity(n * c * h * w);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let k = i % classes;
        labels.push(k);
        for &p in &prototypes[k] {
            let e: f32 = if noise > 0.0 { StandardNormal.sample(&mut rng) } else { 0.0 };
            data.push((p + noise * e).clamp(0.0, 1.0));
        }
    }
    Dataset::new(Tensor::new(vec![n, c, h, w], data)?, labels, classes)
}

fn prototype(class: usize, classes: usize, [c, h, w]: [usize; 3]) -> Vec<f32> {
    use std::f32::consts::PI;
    let frac = class as f32 / classes as f32;
    let angle = PI * frac;
    let (ca, sa) = (angle.cos(), angle.sin());
    // blob centres walk around a ring, offset from the ramp orientation
    let ring = 2.0 * PI * (frac + 0.5 / classes as f32);
    let (cy, cx) = (h as f32 / 2.0, w as f32 / 2.0);
    let radius = 0.3 * h.min(w) as f32;
    let (by, bx) = (cy + radius * ring.sin(), cx + radius * ring.cos());
    let spread = (0.12 * h.min(w) as f32).max(1.0);
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        let gain = 1.0 - 0.2 * ch as f32 / c as f32;
        for y in 0..h {
            for x in 0..w {
                let (fy, fx) = (y as f32 + 0.5, x as f32 + 0.5);
                let ramp = ((fx - cx) * ca + (fy - cy) * sa) / h.max(w) as f32;
                let d2 = (fy - by).powi(2) + (fx - bx).powi(2);
                let blob = (-d2 / (2.0 * spread * spread)).exp();
                out.push((gain * (0.3 + 0.5 * ramp + 0.6 * blob)).clamp(0.0, 1.0));
            }
        }
    }
    out
}

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|source| {
        LoadError::Io {
            path: path.to_path_buf(),
            source,
        }
        .into()
    })
}

fn read_header(path: &Path, bytes: &[u8], magic: u32, ndims: usize) -> Result<Vec<usize>> {
    let need = 4 * (1 + ndims);
    if bytes.len() < need {
        return Err(LoadError::Truncated {
            path: path.to_path_buf(),
            detail: format!("header needs {need} bytes, file has {}", bytes.len()),
        }
        .into());
    }
    let word = |i: usize| u32::from_be_bytes(bytes[4 * i..4 * i + 4].try_into().unwrap());
    if word(0) != magic {
        return Err(LoadError::BadMagic {
            path: path.to_path_buf(),
            found: word(0),
            expected: magic,
        }
        .into());
    }
    let dims: Vec<usize> = (1..=ndims).map(|i| word(i) as usize).collect();
    let payload = dims.iter().product::<usize>();
    if bytes.len() < need + payload {
        return Err(LoadError::Truncated {
            path: path.to_path_buf(),
            detail: format!("expected {payload} data bytes, found {}", bytes.len() - need),
        }
        .into());
    }
    Ok(dims)
}

/// Reads an unsigned-byte IDX image file and its label file.
pub fn load_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let (ip, lp) = (images_path.as_ref(), labels_path.as_ref());
    let ib = read_file(ip)?;
    let lb = read_file(lp)?;
    let idims = read_header(ip, &ib, IDX_IMAGES_MAGIC, 3)?;
    let ldims = read_header(lp, &lb, IDX_LABELS_MAGIC, 1)?;
    let (n, h, w) = (idims[0], idims[1], idims[2]);
    if n != ldims[0] {
        return Err(LoadError::CountMismatch {
            images: n,
            labels: ldims[0],
        }
        .into());
    }
    if n == 0 || h == 0 || w == 0 {
        return Err(LoadError::Truncated {
            path: ip.to_path_buf(),
            detail: "no images".into(),
        }
        .into());
    }
    let pixels = ib[16..16 + n * h * w].iter().map(|&b| b as f32 / 255.0).collect();
    let labels: Vec<usize> = lb[8..8 + n].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(1, |m| m + 1);
    Dataset::new(Tensor::new(vec![n, 1, h, w], pixels)?, labels, classes)
}

/// Serializes images (rounded to bytes) and labels in IDX format.
pub fn write_idx(dataset: &Dataset, images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<()> {
    let [_, h, w] = dataset.sample_shape();
    let n = dataset.len();
    let mut ib = Vec::with_capacity(16 + n * h * w);
    for v in [IDX_IMAGES_MAGIC, n as u32, h as u32, w as u32] {
        ib.extend_from_slice(&v.to_be_bytes());
    }
    // first channel only; IDX images are single-channel
    for i in 0..n {
        let row = dataset.images.row(i);
        ib.extend(row[..h * w].iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut lb = Vec::with_capacity(8 + n);
    for v in [IDX_LABELS_MAGIC, n as u32] {
        lb.extend_from_slice(&v.to_be_bytes());
    }
    lb.extend(dataset.labels.iter().map(|&l| l as u8));
    std::fs::write(images_path, ib)?;
    std::fs::write(labels_path, lb)?;
    Ok(())
}

/// Per-client sample indices and permitted classes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShardAssignment {
    pub indices: Vec<Vec<usize>>,
    pub classes: Vec<Vec<usize>>,
}

impl ShardAssignment {
    pub fn clients(&self) -> usize {
        self.indices.len()
    }
}

/// Non-IID split: every client is dealt `classes_per_client` distinct
/// classes from a shuffled deck (reshuffled when exhausted), so classes are
/// covered whenever `clients · classes_per_client >= class_count`; classes
/// still left over are handed out round-robin. The samples of each class
/// are shuffled and dealt round-robin to the clients holding that class.
pub fn partition_noniid(
    labels: &[usize],
    class_count: usize,
    n_clients: usize,
    classes_per_client: usize,
    seed: u64,
) -> Result<ShardAssignment> {
    if n_clients == 0 || classes_per_client == 0 || classes_per_client > class_count {
        return Err(Error::Partition(format!(
            "need clients >= 1 and 1 <= classes_per_client <= {class_count}, got {n_clients} clients / {classes_per_client} classes"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut deck: VecDeque<usize> = VecDeque::new();
    let refill = |deck: &mut VecDeque<usize>, rng: &mut ChaCha8Rng| {
        let mut perm: Vec<usize> = (0..class_count).collect();
        perm.shuffle(rng);
        deck.extend(perm);
    };
    let mut classes: Vec<Vec<usize>> = Vec::with_capacity(n_clients);
    for _ in 0..n_clients {
        let mut hand = Vec::with_capacity(classes_per_client);
        while hand.len() < classes_per_client {
            if let Some(pos) = deck.iter().position(|c| !hand.contains(c)) {
                hand.push(deck.remove(pos).unwrap());
            } else {
                refill(&mut deck, &mut rng);
            }
        }
        classes.push(hand);
    }
    let mut orphans: Vec<usize> = (0..class_count)
        .filter(|c| !classes.iter().any(|h| h.contains(c)))
        .collect();
    orphans.shuffle(&mut rng);
    for (j, c) in orphans.into_iter().enumerate() {
        classes[j % n_clients].push(c);
    }
    for hand in &mut classes {
        hand.sort_unstable();
    }

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); class_count];
    for (i, &l) in labels.iter().enumerate() {
        if l >= class_count {
            return Err(Error::Partition(format!("label {l} at index {i} outside 0..{class_count}")));
        }
        by_class[l].push(i);
    }
    let mut indices = vec![Vec::new(); n_clients];
    for (c, members) in by_class.iter_mut().enumerate() {
        let mut holders: Vec<usize> = (0..n_clients).filter(|&i| classes[i].contains(&c)).collect();
        holders.shuffle(&mut rng);
        members.shuffle(&mut rng);
        for (j, &idx) in members.iter().enumerate() {
            indices[holders[j % holders.len()]].push(idx);
        }
    }
    for (i, shard) in indices.iter_mut().enumerate() {
        if shard.is_empty() {
            return Err(Error::Partition(format!("client {i} received no samples")));
        }
        shard.sort_unstable();
    }
    Ok(ShardAssignment { indices, classes })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn spec(noise: f32) -> SyntheticSpec {
        SyntheticSpec {
            classes: 8,
            per_class: 10,
            shape: [1, 16, 16],
            noise,
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_balanced() {
        let a = generate_synthetic(&spec(0.2), 5).unwrap();
        assert_eq!(a, generate_synthetic(&spec(0.2), 5).unwrap());
        assert_ne!(a, generate_synthetic(&spec(0.2), 6).unwrap());
        assert_eq!(a.len(), 80);
        for k in 0..8 {
            assert_eq!(a.labels.iter().filter(|&&l| l == k).count(), 10);
        }
        assert!(a.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_noise_gives_identical_class_members() {
        let d = generate_synthetic(&spec(0.0), 1).unwrap();
        assert_eq!(d.images.row(0), d.images.row(8));
        assert_ne!(d.images.row(0), d.images.row(1));
    }

    #[test]
    fn partition_exact_two_labels_per_shard() {
        let d = generate_synthetic(&spec(0.1), 0).unwrap();
        for seed in 0..20 {
            let p = partition_noniid(&d.labels, 8, 4, 2, seed).unwrap();
            for shard in &p.indices {
                let labels: BTreeSet<_> = shard.iter().map(|&i| d.labels[i]).collect();
                assert_eq!(labels.len(), 2);
            }
        }
    }

    #[test]
    fn partition_full_classes_is_iid_like() {
        let d = generate_synthetic(&spec(0.1), 0).unwrap();
        let p = partition_noniid(&d.labels, 8, 2, 8, 3).unwrap();
        for shard in &p.indices {
            let labels: BTreeSet<_> = shard.iter().map(|&i| d.labels[i]).collect();
            assert_eq!(labels.len(), 8);
            assert_eq!(shard.len(), 40);
        }
    }

    #[test]
    fn partition_invariants_over_seeds() {
        let labels: Vec<usize> = (0..300).map(|i| i % 10).collect();
        for (clients, per) in [(4, 2), (7, 3), (3, 2), (20, 2), (1, 1)] {
            for seed in 0..100u64 {
                let p = partition_noniid(&labels, 10, clients, per, seed).unwrap();
                let mut seen = vec![false; labels.len()];
                for (shard, permitted) in p.indices.iter().zip(&p.classes) {
                    for &i in shard {
                        assert!(!seen[i], "index {i} assigned twice");
                        seen[i] = true;
                        assert!(permitted.contains(&labels[i]));
                    }
                }
                assert!(seen.iter().all(|&s| s), "coverage");
            }
        }
    }

    #[test]
    fn partition_seed_sensitivity_and_errors() {
        let labels: Vec<usize> = (0..80).map(|i| i % 8).collect();
        let a = partition_noniid(&labels, 8, 4, 2, 1).unwrap();
        assert_eq!(a, partition_noniid(&labels, 8, 4, 2, 1).unwrap());
        assert!((2..10).any(|s| partition_noniid(&labels, 8, 4, 2, s).unwrap() != a));
        assert!(partition_noniid(&labels, 8, 4, 9, 0).is_err());
        assert!(partition_noniid(&labels, 8, 0, 2, 0).is_err());
        // more holders of a class than its samples leaves some client empty
        let tiny = vec![0usize, 1];
        assert!(matches!(partition_noniid(&tiny, 2, 5, 1, 0), Err(Error::Partition(_))));
    }

    #[test]
    fn pixel_variance_of_constant_set_is_zero() {
        let d = generate_synthetic(&spec(0.0), 1).unwrap().subset(&[0, 8, 16]).unwrap();
        assert!(d.pixel_variance() < 1e-12);
    }
}
