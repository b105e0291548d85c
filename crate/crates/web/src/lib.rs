//! Browser bindings: traffic planning, a drift-and-sync toy and a partition
//! viewer. Every export returns a JSON string; errors become JS exceptions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde_json::{json, Value};
use splitmoco::arch::ArchitectureSpec;
use splitmoco::data::partition_noniid;
use splitmoco::eval::misalignment;
use splitmoco::experiment::cmd_plan;
use splitmoco::nn::{Dense, Layer, SgdConfig, Stack};
use splitmoco::protocol::{ClientState, SyncScheme, TrafficLedger};
use splitmoco::{Error, Result};
use wasm_bindgen::prelude::*;

fn to_js(r: Result<Value>) -> std::result::Result<String, JsValue> {
    r.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Per-cut bytes for both schemes on a bundled architecture.
pub fn plan_json(arch: &str, images: u64, syncs: u64) -> Result<Value> {
    let spec = ArchitectureSpec::builtin(arch).ok_or_else(|| Error::Config(format!("unknown architecture `{arch}`")))?;
    let plan = cmd_plan(&spec, images, syncs)?;
    let shapes: Vec<String> = (1..=spec.depth())
        .map(|c| spec.shape_at(c).iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x"))
        .collect();
    let curves: Vec<Value> = plan
        .curves
        .iter()
        .map(|(s, rows)| {
            json!({
                "scheme": s.as_str(),
                "argmin": plan.argmin(*s),
                "rows": rows.iter().map(|r| json!({
                    "cut": r.cut_layer,
                    "activation": r.activation_bytes,
                    "sync": r.sync_bytes,
                    "total": r.total(),
                })).collect::<Vec<_>>(),
            })
        })
        .collect();
    Ok(json!({ "arch": plan.arch, "shapes": shapes, "curves": curves }))
}

#[wasm_bindgen]
pub fn plan(arch: &str, images: u32, syncs: u32) -> std::result::Result<String, JsValue> {
    to_js(plan_json(arch, images as u64, syncs as u64))
}

/// Clients share one small dense layer and take noisy steps with a
/// client-specific bias; after every step the momentum copy is refreshed
/// and every `sync_every` steps the clients are synchronized. Returns the
/// misalignment trace for both schemes from identical updates.
pub fn sync_toy_json(
    clients: usize,
    steps: usize,
    sync_every: usize,
    momentum: f32,
    heterogeneity: f32,
    seed: u64,
) -> Result<Value> {
    if clients == 0 || steps == 0 || steps > 5000 || clients > 64 {
        return Err(Error::Argument("need 1..=64 clients and 1..=5000 steps".into()));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(Error::Argument(format!("momentum must lie in [0, 1), got {momentum}")));
    }
    let step_noise = Normal::new(0.0f32, 0.01).map_err(|e| Error::Argument(e.to_string()))?;
    let bias_noise = Normal::new(0.0f32, heterogeneity.max(0.0) * 0.01 + f32::MIN_POSITIVE)
        .map_err(|e| Error::Argument(e.to_string()))?;
    let mut traces = Vec::new();
    for scheme in SyncScheme::ALL {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = Stack::new(vec![Layer::Dense(Dense::init(4, 4, &mut rng))]);
        let mut states = (0..clients)
            .map(|id| ClientState::new(id, base.clone(), SgdConfig::default(), vec![0], seed))
            .collect::<Result<Vec<_>>>()?;
        let dim = base.param_count();
        let biases: Vec<Vec<f32>> =
            (0..clients).map(|_| (0..dim).map(|_| bias_noise.sample(&mut rng)).collect()).collect();
        let mut ledger = TrafficLedger::default();
        let mut trace = Vec::with_capacity(steps);
        for step in 1..=steps {
            for (c, bias) in states.iter_mut().zip(&biases) {
                let mut k = 0;
                for p in c.pair.online.params_mut() {
                    for v in p.data_mut() {
                        *v += bias[k] + step_noise.sample(&mut rng);
                        k += 1;
                    }
                }
                c.pair.ema_update(momentum)?;
            }
            if sync_every > 0 && step % sync_every == 0 {
                scheme.sync(states.iter_mut(), &mut ledger, 1, false)?;
            }
            trace.push(misalignment(states.iter().map(|c| &c.pair))?);
        }
        let mean = trace.iter().sum::<f64>() / trace.len() as f64;
        traces.push(json!({ "scheme": scheme.as_str(), "misalignment": trace, "mean": mean, "bytes": ledger.total() }));
    }
    Ok(json!({ "traces": traces }))
}

#[wasm_bindgen]
pub fn sync_toy(
    clients: u32,
    steps: u32,
    sync_every: u32,
    momentum: f32,
    heterogeneity: f32,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(sync_toy_json(clients as usize, steps as usize, sync_every as usize, momentum, heterogeneity, seed as u64))
}

/// Sample counts per client and class for a balanced label set.
pub fn partition_json(classes: usize, per_class: usize, clients: usize, classes_per_client: usize, seed: u64) -> Result<Value> {
    if classes == 0 || per_class == 0 || classes * per_class > 1_000_000 {
        return Err(Error::Argument("need at least one class and one sample per class".into()));
    }
    let labels: Vec<usize> = (0..classes * per_class).map(|i| i % classes).collect();
    let shards = partition_noniid(&labels, classes, clients, classes_per_client, seed)?;
    let counts: Vec<Vec<usize>> = shards
        .indices
        .iter()
        .map(|idx| {
            let mut row = vec![0; classes];
            for &i in idx {
                row[labels[i]] += 1;
            }
            row
        })
        .collect();
    Ok(json!({ "classes": classes, "counts": counts, "assigned": shards.classes }))
}

#[wasm_bindgen]
pub fn partition(
    classes: u32,
    per_class: u32,
    clients: u32,
    classes_per_client: u32,
    seed: u32,
) -> std::result::Result<String, JsValue> {
    to_js(partition_json(classes as usize, per_class as usize, clients as usize, classes_per_client as usize, seed as u64))
}
