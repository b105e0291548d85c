use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::arch::SplitArchitecture;
use crate::data::{Dataset, ShardAssignment};
use crate::error::{Error, Result};
use crate::eval::misalignment;
use crate::moco::{AugmentationConfig, MocoConfig};
use crate::nn::{cosine_lr, SgdConfig, Stack};
use crate::params::ParamSet;
use crate::protocol::client::{client_step_backward, ClientState};
use crate::protocol::message::{Message, MessageKind, TrafficLedger, BYTES_PER_ELEMENT};
use crate::protocol::server::{server_step, ServerState};
use crate::protocol::sync::SyncScheme;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schedule {
    pub clients_total: usize,
    pub clients_sampled: usize,
    pub client_batch: usize,
    pub syncs_per_epoch: usize,
    pub epochs: usize,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        if self.clients_total == 0 {
            return Err(Error::Config("schedule.clients must be at least 1".into()));
        }
        if self.clients_sampled == 0 || self.clients_sampled > self.clients_total {
            return Err(Error::Config(format!(
                "schedule.sampled must lie in 1..={}, got {}",
                self.clients_total, self.clients_sampled
            )));
        }
        if self.client_batch == 0 {
            return Err(Error::Config("schedule.batch must be at least 1".into()));
        }
        Ok(())
    }

    /// Images one sampled client processes per epoch.
    pub fn images_per_client_epoch(&self, steps_per_epoch: usize) -> usize {
        steps_per_epoch * self.client_batch
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub schedule: Schedule,
    pub scheme: SyncScheme,
    pub lr: f32,
    pub sgd: SgdConfig,
    /// Apply weight decay to the projector parameters as well.
    pub decay_projector: bool,
    pub reset_velocity_on_sync: bool,
    pub moco: MocoConfig,
    pub augment: AugmentationConfig,
    /// Run client forward/backward passes on worker threads.
    pub parallel_clients: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule {
                clients_total: 4,
                clients_sampled: 4,
                client_batch: 10,
                syncs_per_epoch: 10,
                epochs: 1,
            },
            scheme: SyncScheme::MomentumAligned,
            lr: 0.06,
            sgd: SgdConfig::default(),
            decay_projector: true,
            reset_velocity_on_sync: false,
            moco: MocoConfig::default(),
            augment: AugmentationConfig::default(),
            parallel_clients: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TraceRow {
    /// Global step, starting at 1.
    pub step: usize,
    /// Epoch, starting at 1.
    pub epoch: usize,
    pub loss: f32,
    pub lr: f32,
    /// Measured after the step and after any synchronization it triggered.
    pub misalignment: f64,
    pub sync_event: bool,
}

/// Whether local step `s` (0-based) of an epoch with `steps` steps ends with
/// a synchronization when `syncs` are spread evenly over the epoch.
pub fn is_sync_step(s: usize, steps: usize, syncs: usize) -> bool {
    syncs > 0 && (s + 1) * syncs / steps > s * syncs / steps
}

/// Full federation state between steps.
#[derive(Debug, Clone)]
pub struct Simulation {
    config: TrainingConfig,
    split: SplitArchitecture,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
    pub ledger: TrafficLedger,
    pub trace: Vec<TraceRow>,
    sampler: ChaCha8Rng,
    steps_per_epoch: usize,
    epoch: usize,
    step: usize,
    consensus: Option<(ParamSet, Option<ParamSet>)>,
    version: u64,
}

fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rand::Rng::random(&mut rng)
}

impl Simulation {
    /// Every client starts from the same client layers of `split`.
    pub fn new(config: TrainingConfig, split: &SplitArchitecture, shards: &ShardAssignment, seed: u64) -> Result<Self> {
        let s = &config.schedule;
        s.validate()?;
        config.moco.validate()?;
        config.augment.validate()?;
        if shards.clients() != s.clients_total {
            return Err(Error::Config(format!(
                "partition has {} shards for {} clients",
                shards.clients(),
                s.clients_total
            )));
        }
        let min_shard = shards.indices.iter().map(Vec::len).min().unwrap_or(0);
        let steps_per_epoch = min_shard / s.client_batch;
        if steps_per_epoch == 0 {
            return Err(Error::Scheduling(format!(
                "smallest shard holds {min_shard} samples, fewer than one batch of {}",
                s.client_batch
            )));
        }
        if s.syncs_per_epoch > steps_per_epoch {
            return Err(Error::Scheduling(format!(
                "{} syncs per epoch exceed the {steps_per_epoch} steps per epoch",
                s.syncs_per_epoch
            )));
        }
        let clients = shards
            .indices
            .iter()
            .enumerate()
            .map(|(id, shard)| {
                ClientState::new(id, split.client.clone(), config.sgd, shard.clone(), derive_seed(seed, 16 + id as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask = (!config.decay_projector).then(|| {
            split
                .server
                .layers()
                .iter()
                .enumerate()
                .flat_map(|(i, l)| std::iter::repeat_n(i < split.server_backbone_layers, l.params().len()))
                .collect()
        });
        let server = ServerState::new(split.server.clone(), config.sgd, mask, config.moco)?;
        Ok(Self {
            sampler: ChaCha8Rng::seed_from_u64(derive_seed(seed, 1)),
            split: split.clone(),
            clients,
            server,
            ledger: TrafficLedger::new(),
            trace: Vec::new(),
            steps_per_epoch,
            epoch: 0,
            step: 0,
            consensus: None,
            version: 0,
            config,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn split(&self) -> &SplitArchitecture {
        &self.split
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn total_steps(&self) -> usize {
        self.steps_per_epoch * self.config.schedule.epochs
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    fn sample_clients(&mut self) -> Vec<usize> {
        let s = self.config.schedule;
        let ids: Vec<usize> = (0..s.clients_total).collect();
        let mut active: Vec<usize> = if s.clients_sampled == s.clients_total {
            ids
        } else {
            ids.choose_multiple(&mut self.sampler, s.clients_sampled).copied().collect()
        };
        active.sort_unstable();
        active
    }

    /// A client that missed syncs downloads the latest consensus.
    fn refresh(&mut self, id: usize) -> Result<()> {
        let Some((online, momentum)) = &self.consensus else {
            return Ok(());
        };
        let client = &mut self.clients[id];
        if client.synced_version == self.version {
            return Ok(());
        }
        let bytes = online.dim() as u64 * BYTES_PER_ELEMENT;
        client.pair.online.load_param_set(online)?;
        self.ledger.record_bytes(self.epoch, id, MessageKind::ParamBroadcast, bytes);
        if let Some(m) = momentum {
            client.pair.momentum.load_param_set(m)?;
            self.ledger.record_bytes(self.epoch, id, MessageKind::EmaBroadcast, bytes);
        }
        if self.config.reset_velocity_on_sync {
            client.optimizer.reset();
        }
        client.synced_version = self.version;
        Ok(())
    }

    fn forward_all(&mut self, active: &[usize], data: &Dataset) -> Result<(Vec<Message>, Vec<Message>)> {
        let batch = self.config.schedule.client_batch;
        let augment = self.config.augment;
        let epoch = self.epoch;
        let mut chosen: Vec<&mut ClientState> =
            self.clients.iter_mut().filter(|c| active.binary_search(&c.id).is_ok()).collect();
        let results: Vec<Result<(Message, Message)>> = if self.config.parallel_clients {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chosen
                    .iter_mut()
                    .map(|c| {
                        scope.spawn(move || {
                            let mb = c.next_minibatch(data, batch)?;
                            c.step_forward(&mb, &augment)
                        })
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("client worker panicked")).collect()
            })
        } else {
            chosen
                .iter_mut()
                .map(|c| {
                    let mb = c.next_minibatch(data, batch)?;
                    c.step_forward(&mb, &augment)
                })
                .collect()
        };
        let mut online = Vec::with_capacity(active.len());
        let mut momentum = Vec::with_capacity(active.len());
        for r in results {
            let (a, b) = r?;
            self.ledger.record(epoch, &a);
            self.ledger.record(epoch, &b);
            online.push(a);
            momentum.push(b);
        }
        Ok((online, momentum))
    }

    fn backward_all(&mut self, grads: &[Message], lr: f32) -> Result<()> {
        let m = self.config.moco.ema_momentum;
        let mut chosen: Vec<(&mut ClientState, &Message)> = Vec::with_capacity(grads.len());
        let mut by_id: Vec<Option<&mut ClientState>> = self.clients.iter_mut().map(Some).collect();
        for g in grads {
            let c = by_id
                .get_mut(g.client_id)
                .and_then(Option::take)
                .ok_or_else(|| Error::ProtocolOrder(format!("gradient for unknown client {}", g.client_id)))?;
            chosen.push((c, g));
        }
        if self.config.parallel_clients {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chosen
                    .into_iter()
                    .map(|(c, g)| scope.spawn(move || client_step_backward(c, g, lr, m)))
                    .collect();
                handles
                    .into_iter()
                    .try_for_each(|h| h.join().expect("client worker panicked"))
            })
        } else {
            chosen.into_iter().try_for_each(|(c, g)| client_step_backward(c, g, lr, m))
        }
    }

    /// Runs one epoch; returns its trace rows.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<&[TraceRow]> {
        if self.epoch >= self.config.schedule.epochs {
            return Err(Error::Scheduling("all scheduled epochs have run".into()));
        }
        self.epoch += 1;
        let first_row = self.trace.len();
        let active = self.sample_clients();
        for &id in &active {
            self.refresh(id)?;
            self.clients[id].start_epoch();
        }
        let total = self.total_steps();
        let syncs = self.config.schedule.syncs_per_epoch;
        for s in 0..self.steps_per_epoch {
            let lr = cosine_lr(self.step, total, self.config.lr)?;
            self.step += 1;
            let (online, momentum) = self.forward_all(&active, data)?;
            let (grads, loss) = server_step(&mut self.server, &online, &momentum, lr, &mut self.ledger, self.epoch)?;
            self.backward_all(&grads, lr)?;
            let sync_event = is_sync_step(s, self.steps_per_epoch, syncs);
            if sync_event {
                let chosen = self.clients.iter_mut().filter(|c| active.binary_search(&c.id).is_ok());
                let consensus =
                    self.config
                        .scheme
                        .sync(chosen, &mut self.ledger, self.epoch, self.config.reset_velocity_on_sync)?;
                self.version += 1;
                for &id in &active {
                    self.clients[id].synced_version = self.version;
                }
                self.consensus = Some((consensus.online, consensus.momentum));
            }
            let value = misalignment(active.iter().map(|&id| &self.clients[id].pair))?;
            self.trace.push(TraceRow {
                step: self.step,
                epoch: self.epoch,
                loss,
                lr,
                misalignment: value,
                sync_event,
            });
        }
        Ok(&self.trace[first_row..])
    }

    /// Uniform average of every client's online layers.
    pub fn consensus_client(&self) -> Result<Stack> {
        let sets: Vec<ParamSet> = self.clients.iter().map(|c| c.pair.online.param_set()).collect();
        let mean = ParamSet::mean(&sets.iter().collect::<Vec<_>>())?;
        let mut stack = self.clients[0].pair.online.clone();
        stack.load_param_set(&mean)?;
        Ok(stack)
    }

    /// Consensus client layers followed by the server backbone layers.
    pub fn encoder(&self) -> Result<Stack> {
        Ok(self.split.encoder(&self.consensus_client()?, &self.server.pair.online))
    }

    pub fn into_report(self) -> Result<RunReport> {
        let encoder = self.encoder()?;
        let client = self.consensus_client()?;
        Ok(RunReport {
            steps_per_epoch: self.steps_per_epoch,
            trace: self.trace,
            ledger: self.ledger,
            client,
            encoder,
            clients: self.clients,
            server: self.server,
        })
    }
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub steps_per_epoch: usize,
    pub trace: Vec<TraceRow>,
    pub ledger: TrafficLedger,
    /// Averaged client layers.
    pub client: Stack,
    /// Averaged client layers plus server backbone; projector excluded.
    pub encoder: Stack,
    pub clients: Vec<ClientState>,
    pub server: ServerState,
}

/// Trains for every scheduled epoch, calling `on_epoch` after each one.
pub fn run_experiment(
    config: TrainingConfig,
    split: &SplitArchitecture,
    data: &Dataset,
    shards: &ShardAssignment,
    seed: u64,
    mut on_epoch: impl FnMut(&Simulation) -> Result<()>,
) -> Result<RunReport> {
    let mut sim = Simulation::new(config, split, shards, seed)?;
    for _ in 0..sim.config.schedule.epochs {
        sim.run_epoch(data)?;
        on_epoch(&sim)?;
    }
    sim.into_report()
}
