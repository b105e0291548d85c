use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::moco::{augment_batch, AugmentationConfig, MomentumPair};
use crate::nn::{Sgd, SgdConfig, Stack};
use crate::protocol::message::{Message, MessageKind, TrafficLedger};
use crate::tensor::Tensor;

/// A client device: its copy of the client layers, their EMA, the
/// optimizer for the online copy, and a local data shard.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub pair: MomentumPair,
    pub optimizer: Sgd,
    shard: Vec<usize>,
    order: Vec<usize>,
    cursor: usize,
    rng: ChaCha8Rng,
    pending_rows: Option<usize>,
    /// Consensus version this client last received.
    pub(crate) synced_version: u64,
}

impl ClientState {
    pub fn new(id: usize, client: Stack, sgd: SgdConfig, shard: Vec<usize>, seed: u64) -> Result<Self> {
        if shard.is_empty() {
            return Err(Error::Scheduling(format!("client {id} has an empty shard")));
        }
        let optimizer = Sgd::new(sgd, &client.params());
        Ok(Self {
            id,
            pair: MomentumPair::new(client),
            optimizer,
            order: shard.clone(),
            shard,
            cursor: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
            pending_rows: None,
            synced_version: 0,
        })
    }

    pub fn shard(&self) -> &[usize] {
        &self.shard
    }

    /// Reshuffles the local sample order.
    pub fn start_epoch(&mut self) {
        self.order.clone_from(&self.shard);
        self.order.shuffle(&mut self.rng);
        self.cursor = 0;
    }

    /// Next `batch` images of the local shard; wraps into a fresh epoch
    /// order when the shard is exhausted.
    pub fn next_minibatch(&mut self, data: &Dataset, batch: usize) -> Result<Tensor> {
        if batch == 0 || batch > self.shard.len() {
            return Err(Error::Scheduling(format!(
                "client {}: batch {batch} does not fit a shard of {}",
                self.id,
                self.shard.len()
            )));
        }
        if self.cursor + batch > self.order.len() {
            self.start_epoch();
        }
        let idx = &self.order[self.cursor..self.cursor + batch];
        self.cursor += batch;
        data.batch(idx)
    }

    /// Augments the minibatch twice; view one runs through the online
    /// client layers (recorded for backward), view two through the momentum
    /// copy.
    pub fn step_forward(&mut self, minibatch: &Tensor, augment: &AugmentationConfig) -> Result<(Message, Message)> {
        let (view_q, view_k) = augment_batch(minibatch, augment, &mut self.rng)?;
        let online = self.pair.online.forward(&view_q, true)?;
        let momentum = self.pair.momentum.infer(&view_k)?;
        self.pending_rows = Some(minibatch.rows());
        Ok((
            Message::new(MessageKind::ActivationOnline, self.id, online),
            Message::new(MessageKind::ActivationMomentum, self.id, momentum),
        ))
    }

    /// Backpropagates the boundary gradient, steps the optimizer, then
    /// relaxes the momentum copy toward the updated online layers.
    pub fn step_backward(&mut self, gradient: &Message, lr: f32, ema_momentum: f32) -> Result<()> {
        if gradient.kind != MessageKind::BoundaryGradient || gradient.client_id != self.id {
            return Err(Error::ProtocolOrder(format!(
                "client {} received {} for client {}",
                self.id, gradient.kind, gradient.client_id
            )));
        }
        let rows = self.pending_rows.take().ok_or_else(|| {
            Error::ProtocolOrder(format!("client {}: gradient without a cached forward", self.id))
        })?;
        if gradient.payload.rows() != rows {
            return Err(Error::ProtocolOrder(format!(
                "client {}: gradient for {} rows, forward had {rows}",
                self.id,
                gradient.payload.rows()
            )));
        }
        let grads = self.pair.online.backward(&gradient.payload)?;
        self.optimizer.step(self.pair.online.params_mut(), &grads.params, lr)?;
        self.pair.ema_update(ema_momentum)
    }

    pub fn has_pending_forward(&self) -> bool {
        self.pending_rows.is_some()
    }
}

/// Forward half of a client step; both activations are recorded in the ledger.
pub fn client_step_forward(
    client: &mut ClientState,
    minibatch: &Tensor,
    augment: &AugmentationConfig,
    ledger: &mut TrafficLedger,
    epoch: usize,
) -> Result<(Message, Message)> {
    let (online, momentum) = client.step_forward(minibatch, augment)?;
    ledger.record(epoch, &online);
    ledger.record(epoch, &momentum);
    Ok((online, momentum))
}

pub fn client_step_backward(client: &mut ClientState, gradient: &Message, lr: f32, ema_momentum: f32) -> Result<()> {
    client.step_backward(gradient, lr, ema_momentum)
}
