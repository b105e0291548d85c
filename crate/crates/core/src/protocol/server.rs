use crate::error::{Error, Result};
use crate::moco::{info_nce_with_grad, MocoConfig, MomentumPair, NegativeQueue};
use crate::nn::{Sgd, SgdConfig, Stack};
use crate::protocol::message::{Message, MessageKind, TrafficLedger};
use crate::tensor::Tensor;

/// The single server: server-side layers plus projector, their EMA, the
/// optimizer and the negative queue.
#[derive(Debug, Clone)]
pub struct ServerState {
    pub pair: MomentumPair,
    pub optimizer: Sgd,
    pub queue: NegativeQueue,
    pub steps: u64,
    moco: MocoConfig,
}

impl ServerState {
    /// `decay_mask` selects which server parameters receive weight decay;
    /// `None` applies it to all of them.
    pub fn new(server: Stack, sgd: SgdConfig, decay_mask: Option<Vec<bool>>, moco: MocoConfig) -> Result<Self> {
        moco.validate()?;
        let mut optimizer = Sgd::new(sgd, &server.params());
        if let Some(mask) = decay_mask {
            optimizer = optimizer.with_decay_mask(mask);
        }
        Ok(Self {
            pair: MomentumPair::new(server),
            optimizer,
            queue: NegativeQueue::new(moco.queue_capacity, moco.embedding_dim)?,
            steps: 0,
            moco,
        })
    }

    pub fn moco(&self) -> &MocoConfig {
        &self.moco
    }

    /// One server optimization step over the concatenated client batch.
    ///
    /// Messages are ordered by ascending client id before concatenation.
    /// Returns one boundary gradient per client, in that order, and the loss.
    pub fn step(&mut self, online: &[Message], momentum: &[Message], lr: f32) -> Result<(Vec<Message>, f32)> {
        if online.is_empty() {
            return Err(Error::ProtocolOrder("server step without client activations".into()));
        }
        let mut on: Vec<&Message> = online.iter().collect();
        let mut mo: Vec<&Message> = momentum.iter().collect();
        on.sort_by_key(|m| m.client_id);
        mo.sort_by_key(|m| m.client_id);
        if on.len() != mo.len() {
            return Err(Error::ProtocolOrder(format!(
                "{} online but {} momentum activations",
                on.len(),
                mo.len()
            )));
        }
        for (i, (a, b)) in on.iter().zip(&mo).enumerate() {
            if a.kind != MessageKind::ActivationOnline || b.kind != MessageKind::ActivationMomentum {
                return Err(Error::ProtocolOrder(format!(
                    "unexpected message kinds {} / {}",
                    a.kind, b.kind
                )));
            }
            if a.client_id != b.client_id || (i > 0 && on[i - 1].client_id == a.client_id) {
                return Err(Error::ProtocolOrder(format!(
                    "missing or duplicated activation for client {}",
                    a.client_id
                )));
            }
            if a.payload.shape() != b.payload.shape() {
                return Err(Error::ProtocolOrder(format!(
                    "client {} sent mismatched activation shapes",
                    a.client_id
                )));
            }
        }
        let batch_q = Tensor::concat_rows(&on.iter().map(|m| &m.payload).collect::<Vec<_>>())?;
        let batch_k = Tensor::concat_rows(&mo.iter().map(|m| &m.payload).collect::<Vec<_>>())?;

        let z_q = self.pair.online.forward(&batch_q, true)?;
        let z_k = self.pair.momentum.infer(&batch_k)?;
        let (loss, grad_q) = info_nce_with_grad(&z_q, &z_k, &self.queue, self.moco.tau)?;
        let grads = self.pair.online.backward(&grad_q)?;
        self.optimizer.step(self.pair.online.params_mut(), &grads.params, lr)?;
        self.pair.ema_update(self.moco.ema_momentum)?;
        self.queue.push(&z_k)?;
        self.steps += 1;

        let mut out = Vec::with_capacity(on.len());
        let mut row = 0;
        for m in &on {
            let n = m.payload.rows();
            let slice = grads.input.slice_rows(row, row + n)?;
            row += n;
            out.push(Message::new(MessageKind::BoundaryGradient, m.client_id, slice));
        }
        Ok((out, loss))
    }
}

/// [`ServerState::step`] with the returned gradients recorded in the ledger.
pub fn server_step(
    server: &mut ServerState,
    online: &[Message],
    momentum: &[Message],
    lr: f32,
    ledger: &mut TrafficLedger,
    epoch: usize,
) -> Result<(Vec<Message>, f32)> {
    let (grads, loss) = server.step(online, momentum, lr)?;
    for g in &grads {
        ledger.record(epoch, g);
    }
    Ok((grads, loss))
}
