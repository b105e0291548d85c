use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamSet;
use crate::protocol::client::ClientState;
use crate::protocol::message::{MessageKind, TrafficLedger, BYTES_PER_ELEMENT};

/// How client models are reconciled at a synchronization event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyncScheme {
    /// Average and broadcast the online client layers only.
    #[serde(alias = "mocosfl")]
    OnlineOnly,
    /// Additionally average and broadcast the client momentum layers.
    #[serde(alias = "monacosfl")]
    MomentumAligned,
}

impl SyncScheme {
    pub const ALL: [SyncScheme; 2] = [SyncScheme::OnlineOnly, SyncScheme::MomentumAligned];

    pub fn as_str(self) -> &'static str {
        match self {
            SyncScheme::OnlineOnly => "online-only",
            SyncScheme::MomentumAligned => "momentum-aligned",
        }
    }

    /// Parameter sets moved per synchronization.
    pub fn synced_sets(self) -> u64 {
        match self {
            SyncScheme::OnlineOnly => 1,
            SyncScheme::MomentumAligned => 2,
        }
    }

    pub fn sync<'a>(
        self,
        clients: impl IntoIterator<Item = &'a mut ClientState>,
        ledger: &mut TrafficLedger,
        epoch: usize,
        reset_velocity: bool,
    ) -> Result<Consensus> {
        match self {
            SyncScheme::OnlineOnly => sync_online(clients, ledger, epoch, reset_velocity),
            SyncScheme::MomentumAligned => sync_momentum_aligned(clients, ledger, epoch, reset_velocity),
        }
    }
}

impl fmt::Display for SyncScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyncScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "online-only" | "mocosfl" => Ok(SyncScheme::OnlineOnly),
            "momentum-aligned" | "monacosfl" => Ok(SyncScheme::MomentumAligned),
            _ => Err(Error::Config(format!(
                "unknown scheme `{s}` (expected online-only or momentum-aligned)"
            ))),
        }
    }
}

/// Broadcast result of a synchronization.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub online: ParamSet,
    /// Present only for [`SyncScheme::MomentumAligned`].
    pub momentum: Option<ParamSet>,
}

fn record_pair(ledger: &mut TrafficLedger, epoch: usize, id: usize, up: MessageKind, down: MessageKind, dim: usize) {
    let bytes = dim as u64 * BYTES_PER_ELEMENT;
    ledger.record_bytes(epoch, id, up, bytes);
    ledger.record_bytes(epoch, id, down, bytes);
}

fn sync_impl<'a>(
    clients: impl IntoIterator<Item = &'a mut ClientState>,
    ledger: &mut TrafficLedger,
    epoch: usize,
    reset_velocity: bool,
    align_momentum: bool,
) -> Result<Consensus> {
    let mut clients: Vec<&mut ClientState> = clients.into_iter().collect();
    if clients.is_empty() {
        return Err(Error::Argument("synchronization needs at least one client".into()));
    }
    clients.sort_by_key(|c| c.id);
    let online_sets: Vec<ParamSet> = clients.iter().map(|c| c.pair.online.param_set()).collect();
    let online = ParamSet::mean(&online_sets.iter().collect::<Vec<_>>())?;
    let momentum = if align_momentum {
        let sets: Vec<ParamSet> = clients.iter().map(|c| c.pair.momentum.param_set()).collect();
        Some(ParamSet::mean(&sets.iter().collect::<Vec<_>>())?)
    } else {
        None
    };
    let dim = online.dim();
    for c in clients.iter_mut() {
        record_pair(ledger, epoch, c.id, MessageKind::ParamUpload, MessageKind::ParamBroadcast, dim);
        c.pair.online.load_param_set(&online)?;
        if let Some(m) = &momentum {
            record_pair(ledger, epoch, c.id, MessageKind::EmaUpload, MessageKind::EmaBroadcast, dim);
            c.pair.momentum.load_param_set(m)?;
        }
        if reset_velocity {
            c.optimizer.reset();
        }
    }
    Ok(Consensus { online, momentum })
}

/// Overwrites every client's online layers with their uniform average.
pub fn sync_online<'a>(
    clients: impl IntoIterator<Item = &'a mut ClientState>,
    ledger: &mut TrafficLedger,
    epoch: usize,
    reset_velocity: bool,
) -> Result<Consensus> {
    sync_impl(clients, ledger, epoch, reset_velocity, false)
}

/// [`sync_online`] plus the same averaging for the momentum layers.
pub fn sync_momentum_aligned<'a>(
    clients: impl IntoIterator<Item = &'a mut ClientState>,
    ledger: &mut TrafficLedger,
    epoch: usize,
    reset_velocity: bool,
) -> Result<Consensus> {
    sync_impl(clients, ledger, epoch, reset_velocity, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::misalignment;
    use crate::nn::{Dense, Layer, SgdConfig, Stack};
    use crate::tensor::Tensor;

    fn client(id: usize, w: f32, b: f32, ema: f32) -> ClientState {
        let stack = Stack::new(vec![Layer::Dense(Dense::from_parts(
            Tensor::new(vec![1, 1], vec![w]).unwrap(),
            Tensor::vector(vec![b]),
        ))]);
        let mut c = ClientState::new(id, stack, SgdConfig::default(), vec![0], 0).unwrap();
        for p in c.pair.momentum.params_mut() {
            p.data_mut().fill(ema);
        }
        c
    }

    fn flat(c: &ClientState) -> (Vec<f32>, Vec<f32>) {
        (c.pair.online.param_set().flatten(), c.pair.momentum.param_set().flatten())
    }

    #[test]
    fn online_mean_of_two() {
        let mut cs = vec![client(0, 1.0, 3.0, 0.0), client(1, 3.0, 5.0, 0.0)];
        let mut ledger = TrafficLedger::new();
        let c = sync_online(&mut cs, &mut ledger, 1, false).unwrap();
        assert_eq!(c.online.flatten(), vec![2.0, 4.0]);
        assert!(c.momentum.is_none());
        for cl in &cs {
            assert_eq!(flat(cl).0, vec![2.0, 4.0]);
        }
        // two elements, upload + broadcast, two clients
        assert_eq!(ledger.total(), 2 * 2 * 2 * 4);
    }

    #[test]
    fn single_client_is_identity_but_costs_bytes() {
        let mut cs = vec![client(0, 0.1, -0.7, 0.3)];
        let before = flat(&cs[0]);
        let mut ledger = TrafficLedger::new();
        sync_momentum_aligned(&mut cs, &mut ledger, 1, false).unwrap();
        assert_eq!(flat(&cs[0]), before);
        assert_eq!(ledger.total_for_kind(MessageKind::ParamUpload), 8);
        assert_eq!(ledger.total_for_kind(MessageKind::EmaBroadcast), 8);
    }

    #[test]
    fn worked_misalignment_example() {
        let fresh = || vec![client(0, 2.0, 2.0, 2.0), client(1, 0.0, 0.0, 0.0)];
        let mut ledger = TrafficLedger::new();

        let mut cs = fresh();
        assert_eq!(misalignment(cs.iter().map(|c| &c.pair)).unwrap(), 0.0);
        sync_momentum_aligned(&mut cs, &mut ledger, 1, false).unwrap();
        for c in &cs {
            assert_eq!(flat(c), (vec![1.0, 1.0], vec![1.0, 1.0]));
        }
        assert_eq!(misalignment(cs.iter().map(|c| &c.pair)).unwrap(), 0.0);
        let aligned_bytes = ledger.total();

        let mut cs = fresh();
        let mut ledger = TrafficLedger::new();
        sync_online(&mut cs, &mut ledger, 1, false).unwrap();
        assert_eq!(flat(&cs[0]), (vec![1.0, 1.0], vec![2.0, 2.0]));
        assert_eq!(flat(&cs[1]), (vec![1.0, 1.0], vec![0.0, 0.0]));
        assert_eq!(misalignment(cs.iter().map(|c| &c.pair)).unwrap(), 1.0);
        assert_eq!(aligned_bytes, 2 * ledger.total());
    }

    #[test]
    fn velocity_preserved_unless_reset() {
        let mut cs = vec![client(0, 1.0, 1.0, 1.0), client(1, 2.0, 2.0, 2.0)];
        let grads = [Tensor::filled(&[1, 1], 1.0), Tensor::vector(vec![1.0])];
        for c in cs.iter_mut() {
            c.optimizer.step(c.pair.online.params_mut(), &grads, 0.1).unwrap();
        }
        let mut ledger = TrafficLedger::new();
        sync_online(&mut cs, &mut ledger, 1, false).unwrap();
        assert!(cs[0].optimizer.velocity().iter().any(|v| v.data().iter().any(|&x| x != 0.0)));
        sync_online(&mut cs, &mut ledger, 1, true).unwrap();
        assert!(cs[0].optimizer.velocity().iter().all(|v| v.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in SyncScheme::ALL {
            assert_eq!(s.as_str().parse::<SyncScheme>().unwrap(), s);
        }
        assert_eq!("monacosfl".parse::<SyncScheme>().unwrap(), SyncScheme::MomentumAligned);
        assert!("fedavg".parse::<SyncScheme>().is_err());
    }
}
