use crate::arch::ArchitectureSpec;
use crate::error::Result;
use crate::protocol::message::BYTES_PER_ELEMENT;
use crate::protocol::sync::SyncScheme;

/// Analytical traffic of one client over one epoch at a given cut.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct OverheadRow {
    pub cut_layer: usize,
    /// Two activation uploads and one gradient download per image.
    pub activation_bytes: u64,
    /// Uploads plus broadcasts of the synced client parameter sets.
    pub sync_bytes: u64,
}

impl OverheadRow {
    pub fn total(&self) -> u64 {
        self.activation_bytes + self.sync_bytes
    }
}

/// Per-cut traffic for every valid cut, shallowest first.
pub fn overhead_curve(
    spec: &ArchitectureSpec,
    images_per_epoch: u64,
    syncs_per_epoch: u64,
    scheme: SyncScheme,
) -> Result<Vec<OverheadRow>> {
    (1..=spec.depth())
        .map(|cut| {
            let act = spec.activation_size(cut, 1)? as u64;
            let params = spec.client_param_count(cut)? as u64;
            Ok(OverheadRow {
                cut_layer: cut,
                activation_bytes: images_per_epoch * 3 * act * BYTES_PER_ELEMENT,
                sync_bytes: syncs_per_epoch * 2 * scheme.synced_sets() * params * BYTES_PER_ELEMENT,
            })
        })
        .collect()
}

/// Cut with the smallest total; ties go to the shallower cut.
pub fn argmin_cut(rows: &[OverheadRow]) -> Option<usize> {
    rows.iter().min_by_key(|r| (r.total(), r.cut_layer)).map(|r| r.cut_layer)
}
