use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::Error;
use crate::tensor::Tensor;

/// Every payload element is an IEEE-754 single.
pub const BYTES_PER_ELEMENT: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    ActivationOnline,
    ActivationMomentum,
    BoundaryGradient,
    ParamUpload,
    ParamBroadcast,
    EmaUpload,
    EmaBroadcast,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    ClientToServer,
    ServerToClient,
}

impl MessageKind {
    pub const ALL: [MessageKind; 7] = [
        MessageKind::ActivationOnline,
        MessageKind::ActivationMomentum,
        MessageKind::BoundaryGradient,
        MessageKind::ParamUpload,
        MessageKind::ParamBroadcast,
        MessageKind::EmaUpload,
        MessageKind::EmaBroadcast,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MessageKind::ActivationOnline => "activation_online",
            MessageKind::ActivationMomentum => "activation_momentum",
            MessageKind::BoundaryGradient => "boundary_gradient",
            MessageKind::ParamUpload => "param_upload",
            MessageKind::ParamBroadcast => "param_broadcast",
            MessageKind::EmaUpload => "ema_upload",
            MessageKind::EmaBroadcast => "ema_broadcast",
        }
    }

    pub fn direction(self) -> Direction {
        match self {
            MessageKind::ActivationOnline
            | MessageKind::ActivationMomentum
            | MessageKind::ParamUpload
            | MessageKind::EmaUpload => Direction::ClientToServer,
            _ => Direction::ServerToClient,
        }
    }

    /// Optimization-phase traffic (activations and their gradients).
    pub fn is_activation_traffic(self) -> bool {
        matches!(
            self,
            MessageKind::ActivationOnline | MessageKind::ActivationMomentum | MessageKind::BoundaryGradient
        )
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MessageKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Argument(format!("unknown message kind `{s}`")))
    }
}

/// One simulated transfer between a client and the server.
#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub kind: MessageKind,
    pub client_id: usize,
    pub payload: Tensor,
}

impl Message {
    pub fn new(kind: MessageKind, client_id: usize, payload: Tensor) -> Self {
        Self {
            kind,
            client_id,
            payload,
        }
    }

    pub fn byte_size(&self) -> u64 {
        self.payload.len() as u64 * BYTES_PER_ELEMENT
    }
}

/// Cumulative bytes keyed by (epoch, client, kind).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrafficLedger {
    entries: BTreeMap<(usize, usize, MessageKind), u64>,
    total: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LedgerRow {
    pub epoch: usize,
    pub client_id: usize,
    pub kind: MessageKind,
    pub bytes: u64,
}

impl TrafficLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, epoch: usize, message: &Message) {
        self.record_bytes(epoch, message.client_id, message.kind, message.byte_size());
    }

    pub fn record_bytes(&mut self, epoch: usize, client_id: usize, kind: MessageKind, bytes: u64) {
        *self.entries.entry((epoch, client_id, kind)).or_insert(0) += bytes;
        self.total += bytes;
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Rows sorted by epoch, client, kind.
    pub fn rows(&self) -> impl Iterator<Item = LedgerRow> + '_ {
        self.entries.iter().map(|(&(epoch, client_id, kind), &bytes)| LedgerRow {
            epoch,
            client_id,
            kind,
            bytes,
        })
    }

    pub fn total_where(&self, pred: impl Fn(&LedgerRow) -> bool) -> u64 {
        self.rows().filter(|r| pred(r)).map(|r| r.bytes).sum()
    }

    pub fn total_for_kind(&self, kind: MessageKind) -> u64 {
        self.total_where(|r| r.kind == kind)
    }

    pub fn total_for_client(&self, client_id: usize) -> u64 {
        self.total_where(|r| r.client_id == client_id)
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_size_counts_four_per_element() {
        let m = Message::new(MessageKind::ActivationOnline, 0, Tensor::zeros(&[2, 8, 8, 8]));
        assert_eq!(m.byte_size(), 4096);
    }

    #[test]
    fn ledger_totals_match_rows() {
        let mut l = TrafficLedger::new();
        l.record_bytes(0, 1, MessageKind::ParamUpload, 10);
        l.record_bytes(0, 1, MessageKind::ParamUpload, 5);
        l.record_bytes(1, 0, MessageKind::EmaBroadcast, 7);
        assert_eq!(l.total(), 22);
        assert_eq!(l.rows().map(|r| r.bytes).sum::<u64>(), 22);
        assert_eq!(l.total_for_client(1), 15);
        assert_eq!(l.rows().count(), 2);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in MessageKind::ALL {
            assert_eq!(k.as_str().parse::<MessageKind>().unwrap(), k);
        }
        assert_eq!(MessageKind::BoundaryGradient.direction(), Direction::ServerToClient);
        assert_eq!(MessageKind::EmaUpload.direction(), Direction::ClientToServer);
    }
}
