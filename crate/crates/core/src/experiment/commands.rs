use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::arch::{ArchitectureSpec, Model};
use crate::data::{partition_noniid, Dataset};
use crate::error::Result;
use crate::eval::{knn_eval, linear_probe, mia_attack};
use crate::experiment::config::ExperimentConfig;
use crate::experiment::output::{
    eval_fields, ledger_fields, trace_fields, write_checkpoint, write_summary, CsvSink, SummaryRow, ATTACK_HEADER,
    EVAL_HEADER, LEDGER_HEADER, PLAN_HEADER, TRACE_HEADER,
};
use crate::params::ParamSet;
use crate::protocol::{argmin_cut, overhead_curve, run_experiment, OverheadRow, RunReport, SyncScheme};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

/// Directory of one run below the experiment directory.
pub fn run_dir_name(cut_layer: usize, scheme: SyncScheme, seed: u64) -> String {
    format!("cut{cut_layer}-{scheme}-seed{seed}")
}

/// Output root: an explicit path, else the environment value, else the
/// configured one.
pub fn output_root(config: &ExperimentConfig, explicit: Option<PathBuf>, env: Option<String>) -> PathBuf {
    explicit
        .or_else(|| env.filter(|s| !s.is_empty()).map(PathBuf::from))
        .unwrap_or_else(|| config.run.output.clone())
}

/// Result of a single training run with its evaluations.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub dir: PathBuf,
    pub summary: SummaryRow,
    pub report: RunReport,
    pub knn: Vec<(usize, f64)>,
    pub attack_mse: Option<f64>,
}

/// Trains one (cut, scheme, seed) combination, writing every artifact to
/// `dir`. Trace and ledger rows are flushed after each epoch.
#[allow(clippy::too_many_arguments)]
pub fn run_single(
    config: &ExperimentConfig,
    spec: &ArchitectureSpec,
    train: &Dataset,
    val: &Dataset,
    cut_layer: usize,
    scheme: SyncScheme,
    seed: u64,
    dir: &Path,
) -> Result<RunOutcome> {
    std::fs::create_dir_all(dir)?;
    let mut resolved = config.clone();
    resolved.model.cut_layer = cut_layer;
    resolved.training.scheme = scheme;
    resolved.sweep = Default::default();
    resolved.run.seeds = vec![seed];
    std::fs::write(dir.join("config.toml"), resolved.to_text())?;
    std::fs::write(
        dir.join("provenance.txt"),
        format!("version = {VERSION}\nconfig_sha256 = {}\n", resolved.hash()),
    )?;

    let training = config.training(spec, scheme)?;
    let shards = partition_noniid(
        &train.labels,
        train.class_count,
        config.schedule.clients,
        config.partition.classes_per_client,
        config.partition.seed.wrapping_add(seed),
    )?;
    let split = Model::build(spec, seed).split(cut_layer)?;

    let mut trace = CsvSink::create(dir.join("trace.csv"), &TRACE_HEADER)?;
    let mut ledger = CsvSink::create(dir.join("ledger.csv"), &LEDGER_HEADER)?;
    let mut eval = CsvSink::create(dir.join("eval.csv"), &EVAL_HEADER)?;
    let epochs = config.schedule.epochs;
    let every = config.eval.knn_every;
    let mut knn = Vec::new();
    let mut written = 0;
    let report = run_experiment(training, &split, train, &shards, seed, |sim| {
        let epoch = sim.epochs_done();
        for row in &sim.trace[written..] {
            trace.row(trace_fields(row))?;
        }
        written = sim.trace.len();
        for row in sim.ledger.rows().filter(|r| r.epoch == epoch) {
            ledger.row(ledger_fields(&row))?;
        }
        trace.flush()?;
        ledger.flush()?;
        if every > 0 && (epoch % every == 0 || epoch == epochs) {
            let acc = knn_eval(&sim.encoder()?, train, val, config.eval.knn_k)?;
            log::info!("epoch {epoch}: knn {acc:.4}");
            knn.push((epoch, acc));
            if epoch != epochs || !config.eval.probe {
                eval.row(eval_fields(epoch, Some(acc), None))?;
                eval.flush()?;
            }
        }
        Ok(())
    })?;

    let probe = if config.eval.probe {
        let r = linear_probe(&report.encoder, train, val, &config.probe(seed))?;
        Some(r.best_accuracy)
    } else {
        None
    };
    let final_knn = knn.last().filter(|(e, _)| *e == epochs).map(|&(_, a)| a);
    if probe.is_some() {
        eval.row(eval_fields(epochs, final_knn, probe))?;
    }
    eval.flush()?;

    let attack_mse = if config.eval.attack {
        let r = mia_attack(&report.client, train, &config.attack(seed))?;
        let mut sink = CsvSink::create(dir.join("attack.csv"), &ATTACK_HEADER)?;
        sink.row([cut_layer.to_string(), seed.to_string(), r.mse.to_string()])?;
        sink.flush()?;
        Some(r.mse)
    } else {
        None
    };

    write_checkpoint(dir.join("client.ckpt"), &report.client.param_set())?;
    let momentum: Vec<ParamSet> = report.clients.iter().map(|c| c.pair.momentum.param_set()).collect();
    write_checkpoint(dir.join("client_momentum.ckpt"), &ParamSet::mean(&momentum.iter().collect::<Vec<_>>())?)?;
    write_checkpoint(dir.join("server.ckpt"), &report.server.pair.online.param_set())?;
    write_checkpoint(dir.join("server_momentum.ckpt"), &report.server.pair.momentum.param_set())?;

    let summary = SummaryRow {
        cut_layer,
        scheme,
        seed,
        final_knn,
        probe_acc: probe,
        total_bytes: report.ledger.total(),
        peak_misalignment: report.trace.iter().map(|r| r.misalignment).fold(0.0, f64::max),
    };
    Ok(RunOutcome {
        dir: dir.to_path_buf(),
        summary,
        report,
        knn,
        attack_mse,
    })
}

fn execute(config: &ExperimentConfig, root: &Path, combos: &[(usize, SyncScheme, u64)]) -> Result<Vec<RunOutcome>> {
    config.validate()?;
    let spec = config.architecture()?;
    let (train, val) = config.datasets()?;
    let base = root.join(&config.run.name);
    std::fs::create_dir_all(&base)?;
    std::fs::write(base.join("config.toml"), config.to_text())?;
    let mut outcomes = Vec::with_capacity(combos.len());
    for &(cut, scheme, seed) in combos {
        let dir = base.join(run_dir_name(cut, scheme, seed));
        log::info!("running {}", dir.display());
        outcomes.push(run_single(config, &spec, &train, &val, cut, scheme, seed, &dir)?);
    }
    let rows: Vec<SummaryRow> = outcomes.iter().map(|o| o.summary.clone()).collect();
    write_summary(base.join("summary.csv"), &rows)?;
    Ok(outcomes)
}

/// One run per seed at the configured cut and scheme.
pub fn cmd_run(config: &ExperimentConfig, root: &Path) -> Result<Vec<RunOutcome>> {
    let combos: Vec<_> = config
        .run
        .seeds
        .iter()
        .map(|&s| (config.model.cut_layer, config.training.scheme, s))
        .collect();
    execute(config, root, &combos)
}

/// Cartesian sweep over cut layers, schemes and seeds, in that nesting order.
pub fn cmd_sweep(config: &ExperimentConfig, root: &Path) -> Result<Vec<RunOutcome>> {
    let mut combos = Vec::new();
    for cut in config.cut_layers() {
        for scheme in config.schemes() {
            for &seed in &config.run.seeds {
                combos.push((cut, scheme, seed));
            }
        }
    }
    execute(config, root, &combos)
}

/// Analytical per-cut traffic for both schemes.
#[derive(Debug, Clone, PartialEq)]
pub struct Plan {
    pub arch: String,
    pub images_per_epoch: u64,
    pub syncs_per_epoch: u64,
    pub curves: Vec<(SyncScheme, Vec<OverheadRow>)>,
}

impl Plan {
    pub fn argmin(&self, scheme: SyncScheme) -> Option<usize> {
        self.curves.iter().find(|(s, _)| *s == scheme).and_then(|(_, rows)| argmin_cut(rows))
    }

    pub fn render_text(&self) -> String {
        let mut header = vec!["cut".to_string(), "act+grad".to_string()];
        for (s, _) in &self.curves {
            header.push(format!("sync[{s}]"));
            header.push(format!("total[{s}]"));
        }
        let depth = self.curves.first().map_or(0, |(_, r)| r.len());
        let mut table = vec![header];
        for i in 0..depth {
            let first = &self.curves[0].1[i];
            let mut line = vec![first.cut_layer.to_string(), first.activation_bytes.to_string()];
            for (_, rows) in &self.curves {
                line.push(rows[i].sync_bytes.to_string());
                line.push(rows[i].total().to_string());
            }
            table.push(line);
        }
        let widths: Vec<usize> = (0..table[0].len())
            .map(|c| table.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = format!(
            "{}: bytes per client per epoch, {} images, {} syncs\n",
            self.arch, self.images_per_epoch, self.syncs_per_epoch
        );
        for row in &table {
            let cells: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            let _ = writeln!(out, "{}", cells.join("  "));
        }
        for (s, _) in &self.curves {
            if let Some(cut) = self.argmin(*s) {
                let _ = writeln!(out, "argmin[{s}] = cut {cut}");
            }
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut sink = CsvSink::create(path, &PLAN_HEADER)?;
        for (s, rows) in &self.curves {
            for r in rows {
                sink.row([
                    s.as_str().to_string(),
                    r.cut_layer.to_string(),
                    r.activation_bytes.to_string(),
                    r.sync_bytes.to_string(),
                    r.total().to_string(),
                ])?;
            }
        }
        sink.flush()
    }
}

pub fn cmd_plan(spec: &ArchitectureSpec, images_per_epoch: u64, syncs_per_epoch: u64) -> Result<Plan> {
    let curves = SyncScheme::ALL
        .into_iter()
        .map(|s| Ok((s, overhead_curve(spec, images_per_epoch, syncs_per_epoch, s)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Plan {
        arch: spec.name().to_string(),
        images_per_epoch,
        syncs_per_epoch,
        curves,
    })
}
