//! Causal, bidirectional and scheduled soft attention masks.
//!
//! The soft mask keeps the lower triangle (and diagonal) at 1 and lifts the
//! strictly-upper entry `(i, j)` to `min(α(t)·l/i, 1)` with 1-based row `i`.
//! At `α = 0` it is the causal mask, at `α = 1` (with `l ≥ n`) every entry is 1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// `α = t/τ`
    Linear,
    /// `α = (t/τ)²`
    Accelerating,
    /// `α = 1 − (1 − t/τ)²`
    Decelerating,
}

impl ScheduleKind {
    pub const ALL: [ScheduleKind; 3] = [
        ScheduleKind::Linear,
        ScheduleKind::Accelerating,
        ScheduleKind::Decelerating,
    ];
}

impl fmt::Display for ScheduleKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScheduleKind::Linear => "linear",
            ScheduleKind::Accelerating => "accelerating",
            ScheduleKind::Decelerating => "decelerating",
        })
    }
}

impl FromStr for ScheduleKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(ScheduleKind::Linear),
            "accelerating" => Ok(ScheduleKind::Accelerating),
            "decelerating" => Ok(ScheduleKind::Decelerating),
            other => Err(Error::invalid(format!(
                "unknown schedule '{other}' (expected linear, accelerating or decelerating)"
            ))),
        }
    }
}

/// Position `t` of a schedule running for `tau_steps` steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleState {
    kind: ScheduleKind,
    t: u64,
    tau_steps: u64,
}

impl ScheduleState {
    pub fn new(kind: ScheduleKind, t: u64, tau_steps: u64) -> Result<Self> {
        if tau_steps == 0 {
            return Err(Error::invalid("schedule needs tau_steps > 0"));
        }
        if t > tau_steps {
            return Err(Error::invalid(format!(
                "schedule step {t} exceeds tau_steps {tau_steps}"
            )));
        }
        Ok(ScheduleState {
            kind,
            t,
            tau_steps,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    pub fn t(&self) -> u64 {
        self.t
    }

    pub fn tau_steps(&self) -> u64 {
        self.tau_steps
    }

    pub fn alpha(&self) -> f64 {
        schedule_alpha(self)
    }
}

pub fn schedule_alpha(state: &ScheduleState) -> f64 {
    let x = state.t as f64 / state.tau_steps as f64;
    let a = match state.kind {
        ScheduleKind::Linear => x,
        ScheduleKind::Accelerating => x * x,
        ScheduleKind::Decelerating => 1.0 - (1.0 - x) * (1.0 - x),
    };
    a.clamp(0.0, 1.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum MaskProvenance {
    Causal,
    Bidirectional,
    Soft(ScheduleState),
}

/// `n×n` attention weights, row = query position, column = key position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMask {
    n: usize,
    l: usize,
    entries: Vec<f64>,
    provenance: MaskProvenance,
}

impl AttentionMask {
    pub fn causal(n: usize) -> Result<Self> {
        check_len(n, n)?;
        let entries = (0..n * n)
            .map(|k| if k / n >= k % n { 1.0 } else { 0.0 })
            .collect();
        Ok(AttentionMask {
            n,
            l: n,
            entries,
            provenance: MaskProvenance::Causal,
        })
    }

    pub fn bidirectional(n: usize) -> Result<Self> {
        check_len(n, n)?;
        Ok(AttentionMask {
            n,
            l: n,
            entries: vec![1.0; n * n],
            provenance: MaskProvenance::Bidirectional,
        })
    }

    /// Build from raw entries; used for externally supplied masks.
    pub fn from_entries(n: usize, entries: Vec<f64>) -> Result<Self> {
        check_len(n, n)?;
        if entries.len() != n * n {
            return Err(Error::invalid(format!(
                "mask of size {n} needs {} entries, got {}",
                n * n,
                entries.len()
            )));
        }
        Ok(AttentionMask {
            n,
            l: n,
            entries,
            provenance: MaskProvenance::Bidirectional,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn l(&self) -> usize {
        self.l
    }

    pub fn provenance(&self) -> MaskProvenance {
        self.provenance
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn into_entries(self) -> Vec<f64> {
        self.entries
    }

    /// Entry at 0-based `(row, col)`.
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.n + col]
    }

    pub fn is_causal(&self) -> bool {
        (0..self.n * self.n).all(|k| {
            let expect = if k / self.n >= k % self.n { 1.0 } else { 0.0 };
            self.entries[k] == expect
        })
    }

    pub fn is_all_ones(&self) -> bool {
        self.entries.iter().all(|&v| v == 1.0)
    }
}

fn check_len(n: usize, l: usize) -> Result<()> {
    if n == 0 || l == 0 {
        return Err(Error::invalid(format!(
            "mask needs n ≥ 1 and l ≥ 1, got n={n}, l={l}"
        )));
    }
    Ok(())
}

pub fn build_soft_mask(state: &ScheduleState, n: usize, l: usize) -> Result<AttentionMask> {
    check_len(n, l)?;
    let alpha = schedule_alpha(state);
    let mut entries = vec![1.0; n * n];
    for row in 0..n {
        // 1-based row index
        let i = (row + 1) as f64;
        let upper = (alpha * l as f64 / i).min(1.0);
        for col in row + 1..n {
            entries[row * n + col] = upper;
        }
    }
    Ok(AttentionMask {
        n,
        l,
        entries,
        provenance: MaskProvenance::Soft(*state),
    })
}

/// Singular values of a square row-major matrix, sorted in descending order.
pub fn singular_values(n: usize, entries: &[f64]) -> Vec<f64> {
    let m = nalgebra::DMatrix::from_row_slice(n, n, entries);
    let mut sv: Vec<f64> = m.singular_values().iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}

/// Number of singular values above `eps` times the largest one.
pub fn mask_numerical_rank(mask: &AttentionMask, eps: f64) -> Result<usize> {
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("rank tolerance must be positive, got {eps}")));
    }
    if let Some(k) = mask.entries.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "mask entry ({}, {})",
            k / mask.n,
            k % mask.n
        )));
    }
    let sv = singular_values(mask.n, &mask.entries);
    let top = sv[0];
    if top == 0.0 {
        return Ok(0);
    }
    Ok(sv.iter().filter(|&&s| s > eps * top).count())
}

/// One sample of a rank trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankSample {
    pub t: u64,
    pub alpha: f64,
    pub rank: usize,
}

/// Ranks of the soft mask at `samples + 1` evenly spaced steps of a schedule
/// with `tau_steps` total steps (`t = k·τ/samples`).
pub fn rank_trajectory(
    kind: ScheduleKind,
    n: usize,
    l: usize,
    tau_steps: u64,
    samples: u64,
    eps: f64,
) -> Result<Vec<RankSample>> {
    if samples == 0 || !tau_steps.is_multiple_of(samples) {
        return Err(Error::invalid(format!(
            "tau_steps {tau_steps} must be a positive multiple of samples {samples}"
        )));
    }
    (0..=samples)
        .map(|k| {
            let t = k * tau_steps / samples;
            let state = ScheduleState::new(kind, t, tau_steps)?;
            let mask = build_soft_mask(&state, n, l)?;
            Ok(RankSample {
                t,
                alpha: state.alpha(),
                rank: mask_numerical_rank(&mask, eps)?,
            })
        })
        .collect()
}
