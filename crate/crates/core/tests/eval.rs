use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use splitmoco::arch::{ArchitectureSpec, Model};
use splitmoco::data::{generate_synthetic, Dataset, SyntheticSpec};
use splitmoco::eval::{
    knn_accuracy, knn_eval, linear_probe, linear_probe_features, mia_attack, AttackConfig, ProbeConfig,
};
use splitmoco::nn::{Conv2d, Layer, Stack};
use splitmoco::Tensor;

/// One Gaussian blob per class around orthogonal unit centres.
fn blobs(classes: usize, per_class: usize, dim: usize, spread: f32, seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for i in 0..classes * per_class {
        let c = i % classes;
        for j in 0..dim {
            let centre = if j == c { 1.0 } else { 0.0 };
            let noise: f32 = StandardNormal.sample(&mut rng);
            data.push(centre + spread * noise);
        }
        labels.push(c);
    }
    (Tensor::new(vec![classes * per_class, dim], data).unwrap(), labels)
}

/// Brute-force k-NN written from scratch in f64: cosine distance, majority
/// vote, ties to the smaller summed distance then the lower label.
fn knn_oracle(mem: &Tensor, ml: &[usize], qs: &Tensor, ql: &[usize], k: usize) -> f64 {
    let unit = |r: &[f32]| {
        let n = r.iter().map(|v| (*v as f64).powi(2)).sum::<f64>().sqrt();
        r.iter().map(|v| if n > 0.0 { *v as f64 / n } else { 0.0 }).collect::<Vec<f64>>()
    };
    let mem: Vec<Vec<f64>> = (0..mem.rows()).map(|i| unit(mem.row(i))).collect();
    let classes = ml.iter().max().unwrap() + 1;
    let mut correct = 0;
    for (qi, &want) in ql.iter().enumerate() {
        let q = unit(qs.row(qi));
        let mut d: Vec<(f64, usize)> = mem
            .iter()
            .enumerate()
            .map(|(i, m)| (1.0 - m.iter().zip(&q).map(|(a, b)| a * b).sum::<f64>(), i))
            .collect();
        d.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut votes = vec![(0usize, 0.0f64); classes];
        for &(dist, i) in d.iter().take(k) {
            votes[ml[i]].0 += 1;
            votes[ml[i]].1 += dist;
        }
        let mut best = None::<usize>;
        for c in 0..classes {
            if votes[c].0 == 0 {
                continue;
            }
            best = match best {
                Some(b) if votes[b].0 > votes[c].0 || (votes[b].0 == votes[c].0 && votes[b].1 <= votes[c].1) => Some(b),
                _ => Some(c),
            };
        }
        if best == Some(want) {
            correct += 1;
        }
    }
    correct as f64 / ql.len() as f64
}

#[test]
fn knn_separates_clean_clusters() {
    let (mem, ml) = blobs(4, 20, 4, 0.05, 1);
    let (qs, ql) = blobs(4, 10, 4, 0.05, 2);
    assert_eq!(knn_accuracy(&mem, &ml, &qs, &ql, 5).unwrap(), 1.0);
}

#[test]
fn knn_matches_brute_force_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (mem, ml) = blobs(3, 12, 5, 0.8, seed);
        let (qs, ql) = blobs(3, 8, 5, 0.8, seed + 100);
        let k = rng.random_range(1..=mem.rows());
        let got = knn_accuracy(&mem, &ml, &qs, &ql, k).unwrap();
        let want = knn_oracle(&mem, &ml, &qs, &ql, k);
        assert!((got - want).abs() < 1e-12, "seed {seed} k {k}: {got} vs {want}");
    }
}

#[test]
fn knn_with_k_equal_to_memory_size_predicts_the_majority() {
    let (mem, mut ml) = blobs(3, 10, 3, 0.1, 4);
    ml[0] = 1; // class 1 now has 11 members, the strict majority
    let (qs, ql) = blobs(3, 10, 3, 0.1, 5);
    let acc = knn_accuracy(&mem, &ml, &qs, &ql, mem.rows()).unwrap();
    let want = ql.iter().filter(|&&l| l == 1).count() as f64 / ql.len() as f64;
    assert_eq!(acc, want);
    assert!(knn_accuracy(&mem, &ml, &qs, &ql, 0).is_err());
}

#[test]
fn probe_learns_separable_features_within_20_epochs() {
    let (tr, tl) = blobs(5, 40, 8, 0.1, 6);
    let (va, vl) = blobs(5, 20, 8, 0.1, 7);
    let cfg = ProbeConfig {
        epochs: 20,
        batch: 32,
        lr: 0.05,
        seed: 1,
    };
    let r = linear_probe_features(&tr, &tl, &va, &vl, 5, &cfg).unwrap();
    assert!(r.best_accuracy >= 0.99, "{r:?}");
    assert_eq!(r, linear_probe_features(&tr, &tl, &va, &vl, 5, &cfg).unwrap());
}

fn small_data(seed: u64, per_class: usize) -> Dataset {
    generate_synthetic(
        &SyntheticSpec {
            classes: 4,
            per_class,
            shape: [1, 16, 16],
            noise: 0.2,
        },
        seed,
    )
    .unwrap()
}

#[test]
fn evaluation_leaves_the_encoder_untouched() {
    let model = Model::build(&ArchitectureSpec::builtin("toy").unwrap(), 3);
    let encoder = model.backbone();
    let before: Vec<u32> = encoder.param_set().flatten().iter().map(|v| v.to_bits()).collect();
    let (train, val) = (small_data(1, 10), small_data(2, 5));
    let cfg = ProbeConfig {
        epochs: 3,
        batch: 8,
        ..ProbeConfig::default()
    };
    let a = linear_probe(&encoder, &train, &val, &cfg).unwrap();
    let k1 = knn_eval(&encoder, &train, &val, 3).unwrap();
    let k2 = knn_eval(&encoder, &train, &val, 3).unwrap();
    assert_eq!(k1, k2);
    assert_eq!(a, linear_probe(&encoder, &train, &val, &cfg).unwrap());
    let after: Vec<u32> = encoder.param_set().flatten().iter().map(|v| v.to_bits()).collect();
    assert_eq!(before, after);
}

fn attack_cfg(seed: u64) -> AttackConfig {
    AttackConfig {
        attacker_fraction: 0.5,
        epochs: 40,
        batch: 16,
        lr: 0.01,
        seed,
    }
}

#[test]
fn attack_on_identity_client_reconstructs_nearly_perfectly() {
    let data = small_data(3, 32);
    let r = mia_attack(&Stack::new(vec![]), &data, &attack_cfg(0)).unwrap();
    assert!(r.mse < 0.05 * data.pixel_variance(), "{r:?} vs var {}", data.pixel_variance());
    assert_eq!(r.attacker_samples + r.eval_samples, data.len());
}

#[test]
fn attack_on_constant_client_cannot_beat_pixel_variance() {
    let data = small_data(4, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut conv = Conv2d::init(1, 2, 3, 2, &mut rng);
    conv.weight.data_mut().fill(0.0);
    conv.bias = Tensor::vector(vec![0.3, -0.2]);
    let client = Stack::new(vec![Layer::Conv2d(conv)]);
    let r = mia_attack(&client, &data, &attack_cfg(1)).unwrap();
    let var = data.pixel_variance();
    assert!(r.mse >= 0.85 * var && r.mse <= 1.5 * var, "mse {} var {var}", r.mse);
}

#[test]
fn attack_is_deterministic_and_validates_its_split() {
    let data = small_data(5, 8);
    let client = Model::build(&ArchitectureSpec::builtin("toy").unwrap(), 1).split(1).unwrap().client;
    let cfg = AttackConfig {
        epochs: 2,
        ..attack_cfg(2)
    };
    assert_eq!(mia_attack(&client, &data, &cfg).unwrap(), mia_attack(&client, &data, &cfg).unwrap());
    let small = AttackConfig {
        attacker_fraction: 0.1,
        ..cfg
    };
    assert!(mia_attack(&client, &data, &small).is_err());
    let all = AttackConfig {
        attacker_fraction: 1.0,
        ..cfg
    };
    assert_eq!(mia_attack(&client, &data, &all).unwrap().eval_samples, data.len());
}
