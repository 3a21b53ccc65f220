//! Gradient clipping for embedding gradients.
//!
//! Five granularities are supported: one threshold for the whole embedding
//! gradient, one per field, one per column, an adaptive per-field threshold
//! tied to the field's weight norm, and the adaptive column-wise rule
//! ([`cowclip`]) whose threshold for an id column is
//! `cnt · max(r·‖w_col‖, ζ)` with `cnt` the number of batch samples holding
//! the id.
//!
//! Clipping acts on the averaged data gradient, before any L2 term is added
//! by the optimizer. Dense-network and wide (LR) gradients are never clipped.

use serde::{Deserialize, Serialize};

use crate::embedding::{EmbeddingTable, SparseGradient};
use crate::linalg::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ClipConfig {
    None,
    Global { value: f64 },
    Fieldwise { value: f64 },
    Columnwise { value: f64 },
    AdaptiveFieldwise { r: f64, zeta: f64 },
    /// Adaptive column-wise clipping. `occurrence_count = false` drops the
    /// `cnt` factor from the threshold.
    CowClip { r: f64, zeta: f64, occurrence_count: bool },
}

impl ClipConfig {
    pub const DEFAULT_R: f64 = 1.0;
    pub const DEFAULT_ZETA: f64 = 1e-4;
    pub const DEFAULT_GLOBAL_VALUE: f64 = 25.0;

    pub fn cowclip(r: f64, zeta: f64) -> Self {
        ClipConfig::CowClip {
            r,
            zeta,
            occurrence_count: true,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ClipConfig::None => "none",
            ClipConfig::Global { .. } => "global",
            ClipConfig::Fieldwise { .. } => "fieldwise",
            ClipConfig::Columnwise { .. } => "columnwise",
            ClipConfig::AdaptiveFieldwise { .. } => "adaptive_fieldwise",
            ClipConfig::CowClip { .. } => "cowclip",
        }
    }

    /// Same variant with its constant threshold multiplied by `factor`;
    /// adaptive variants are returned unchanged.
    pub fn with_value_scaled(self, factor: f64) -> Self {
        match self {
            ClipConfig::Global { value } => ClipConfig::Global { value: value * factor },
            ClipConfig::Fieldwise { value } => ClipConfig::Fieldwise { value: value * factor },
            ClipConfig::Columnwise { value } => ClipConfig::Columnwise { value: value * factor },
            other => other,
        }
    }
}

/// `g ← min(1, t/‖g‖)·g`. A zero vector is left as is. Returns the factor applied.
pub fn clip_by_threshold(g: &mut [f64], threshold: f64) -> f64 {
    let norm = l2_norm(g);
    scale_to(g, norm, threshold)
}

fn scale_to(g: &mut [f64], norm: f64, threshold: f64) -> f64 {
    if norm <= threshold {
        return 1.0;
    }
    let factor = threshold / norm;
    g.iter_mut().for_each(|x| *x *= factor);
    factor
}

/// Threshold [`cowclip`] uses for a column with weight norm `w_norm` seen `cnt` times.
pub fn cowclip_threshold(cnt: u32, w_norm: f64, r: f64, zeta: f64) -> f64 {
    cnt as f64 * (r * w_norm).max(zeta)
}

/// Adaptive column-wise clipping of every touched column.
pub fn cowclip(table: &EmbeddingTable, grad: &mut SparseGradient, r: f64, zeta: f64) {
    cowclip_with(table, grad, r, zeta, true)
}

fn cowclip_with(table: &EmbeddingTable, grad: &mut SparseGradient, r: f64, zeta: f64, occurrence_count: bool) {
    for j in 0..grad.n_fields() {
        for k in 0..grad.field(j).len() {
            let id = grad.field(j).ids[k] as usize;
            let cnt = if occurrence_count { grad.field(j).counts[k] } else { 1 };
            let t = cowclip_threshold(cnt, l2_norm(table.column(j, id)), r, zeta);
            clip_by_threshold(grad.column_mut(j, k), t);
        }
    }
}

/// One threshold over the concatenation of all embedding gradients.
pub fn clip_global(grad: &mut SparseGradient, value: f64) {
    let norm = grad.squared_norm().sqrt();
    if norm > value {
        grad.scale(value / norm);
    }
}

/// One threshold per field block.
pub fn clip_fieldwise(grad: &mut SparseGradient, value: f64) {
    for j in 0..grad.n_fields() {
        let g = &mut grad.field_mut(j).grads;
        clip_by_threshold(g, value);
    }
}

/// One constant threshold per column.
pub fn clip_columnwise(grad: &mut SparseGradient, value: f64) {
    for j in 0..grad.n_fields() {
        for k in 0..grad.field(j).len() {
            clip_by_threshold(grad.column_mut(j, k), value);
        }
    }
}

/// Per-field threshold `max(r·‖W_field‖, ζ)` with `‖W_field‖` the Frobenius
/// norm of the field's whole table.
pub fn clip_adaptive_fieldwise(table: &EmbeddingTable, grad: &mut SparseGradient, r: f64, zeta: f64) {
    for j in 0..grad.n_fields() {
        let t = (r * table.field_norm(j)).max(zeta);
        clip_by_threshold(&mut grad.field_mut(j).grads, t);
    }
}

pub fn apply(config: &ClipConfig, table: &EmbeddingTable, grad: &mut SparseGradient) {
    match *config {
        ClipConfig::None => {}
        ClipConfig::Global { value } => clip_global(grad, value),
        ClipConfig::Fieldwise { value } => clip_fieldwise(grad, value),
        ClipConfig::Columnwise { value } => clip_columnwise(grad, value),
        ClipConfig::AdaptiveFieldwise { r, zeta } => clip_adaptive_fieldwise(table, grad, r, zeta),
        ClipConfig::CowClip {
            r,
            zeta,
            occurrence_count,
        } => cowclip_with(table, grad, r, zeta, occurrence_count),
    }
}


#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;
    use crate::embedding::FieldGradient;
    use crate::linalg::l2_norm;

    fn column() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        (1usize..8).prop_flat_map(|d| (prop::collection::vec(-10.0..10.0f64, d), prop::collection::vec(-100.0..100.0f64, d)))
    }

    proptest! {
        #[test]
        fn clip_by_threshold_bounds_and_keeps_direction((g, _) in column(), t in 1e-6..50.0f64) {
            let mut out = g.clone();
            clip_by_threshold(&mut out, t);
            prop_assert!(l2_norm(&out) <= t * (1.0 + 1e-12));
            if l2_norm(&g) <= t {
                prop_assert_eq!(&out, &g);
            }
            for (a, b) in out.iter().zip(&g) {
                prop_assert!(a * b >= 0.0);
            }
        }

        #[test]
        fn cowclip_is_idempotent((w, g) in column(), cnt in 1u32..100, r in 0.1..10.0f64, zeta in 1e-6..1e-2f64) {
            let d = w.len();
            let mut table = EmbeddingTable::zeros(&[1], d);
            table.column_mut(0, 0).copy_from_slice(&w);
            let mut grad = SparseGradient::new(d, vec![FieldGradient { ids: vec![0], counts: vec![cnt], grads: g }]);
            cowclip(&table, &mut grad, r, zeta);
            let once = grad.column(0, 0).to_vec();
            prop_assert!(l2_norm(&once) <= cowclip_threshold(cnt, l2_norm(&w), r, zeta) * (1.0 + 1e-12));
            cowclip(&table, &mut grad, r, zeta);
            let twice = grad.column(0, 0);
            prop_assert!((l2_norm(twice) - l2_norm(&once)).abs() <= 1e-14 * l2_norm(&once).max(1e-300));
        }

        #[test]
        fn threshold_is_monotone(cnt in 1u32..100, n in 0.0..10.0f64, r in 0.1..10.0f64, zeta in 1e-6..1.0f64) {
            let t = cowclip_threshold(cnt, n, r, zeta);
            prop_assert!(t >= cnt as f64 * zeta);
            prop_assert!(cowclip_threshold(cnt + 1, n, r, zeta) >= t);
            prop_assert!(cowclip_threshold(cnt, n * 2.0, r, zeta) >= t);
        }
    }
}
