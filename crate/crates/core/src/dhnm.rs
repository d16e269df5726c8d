//! Dynamic hard negative mining.
//!
//! Every explicit negative occupies a slot `(query, slot_index)`. Each training
//! step caches the cosine the loss already computed for that negative. The
//! first cached score of a negative is its initial score `s0`. A slot is
//! flagged when
//!
//! * at its first step, `s0 < 0.4`, or
//! * later, `1.2·s_cur < s0` and `s_cur < 0.7`,
//!
//! and flagged slots receive the next pool candidate at the following step
//! boundary. In [`ThresholdMode::Absolute`] the `0.4` and `0.7` thresholds are
//! compared against `|s|`.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INITIAL_THRESHOLD: f64 = 0.4;
pub const DECAY_RATIO: f64 = 1.2;
pub const CURRENT_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Decision {
    Keep,
    Replace,
}

impl fmt::Display for Decision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Decision::Keep => "keep",
            Decision::Replace => "replace",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Thresholds compare the signed score.
    Literal,
    /// Thresholds compare the score's absolute value.
    #[default]
    Absolute,
}

/// Cosine of two unit vectors.
pub fn score(q: &[f64], p: &[f64]) -> f64 {
    let d: f64 = q.iter().zip(p).map(|(a, b)| a * b).sum();
    d.clamp(-1.0, 1.0)
}

/// The replacement rule on raw scores.
pub fn decide_scores(s0: f64, s_cur: f64, is_initial: bool, mode: ThresholdMode) -> Decision {
    let mag = |s: f64| match mode {
        ThresholdMode::Literal => s,
        ThresholdMode::Absolute => s.abs(),
    };
    let too_easy_at_start = is_initial && mag(s0) < INITIAL_THRESHOLD;
    let got_easier = DECAY_RATIO * s_cur < s0 && mag(s_cur) < CURRENT_THRESHOLD;
    if too_easy_at_start || got_easier {
        Decision::Replace
    } else {
        Decision::Keep
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NegativeSlotState {
    pub query_id: usize,
    pub slot_index: usize,
    pub negative_id: usize,
    /// Score at the negative's first cached step.
    pub s0: Option<f64>,
    pub s_cur: Option<f64>,
    pub flagged: bool,
    pub first_step_seen: Option<u64>,
    last_cached_step: Option<u64>,
}

impl NegativeSlotState {
    pub fn new(query_id: usize, slot_index: usize, negative_id: usize) -> Self {
        NegativeSlotState {
            query_id,
            slot_index,
            negative_id,
            s0: None,
            s_cur: None,
            flagged: false,
            first_step_seen: None,
            last_cached_step: None,
        }
    }
}

/// Evaluate the rule for a slot that has been scored at least once.
pub fn decide(slot: &NegativeSlotState, is_initial: bool, mode: ThresholdMode) -> Decision {
    match (slot.s0, slot.s_cur) {
        (Some(s0), Some(cur)) => decide_scores(s0, cur, is_initial, mode),
        _ => Decision::Keep,
    }
}

/// Ordered replacement candidates for one query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct NegativePool {
    candidates: Vec<usize>,
    cursor: usize,
    pub exhausted_events: u64,
}

impl NegativePool {
    pub fn new(candidates: Vec<usize>) -> Self {
        NegativePool {
            candidates,
            cursor: 0,
            exhausted_events: 0,
        }
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    fn next(&mut self) -> Option<usize> {
        let c = self.candidates.get(self.cursor).copied();
        if c.is_some() {
            self.cursor += 1;
        }
        c
    }
}

/// One cached score, as written to the mining log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub step: u64,
    pub query_id: usize,
    pub slot: usize,
    pub negative_id: usize,
    pub s0: f64,
    pub s_cur: f64,
    pub decision: Decision,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ReplacementReport {
    /// `(query, slot, old negative, new negative)`
    pub replaced: Vec<(usize, usize, usize, usize)>,
    /// `(query, slot)` whose pool had nothing left.
    pub exhausted: Vec<(usize, usize)>,
}

/// Split candidates ranked by seed-encoder score into `k` initial negatives and
/// the replacement pool. Ranking is by descending score, ties by ascending id.
pub fn rank_candidates(mut scored: Vec<(usize, f64)>, k: usize) -> (Vec<usize>, Vec<usize>) {
    // Adding 0.0 maps -0.0 to 0.0 so the two tie.
    scored.sort_by(|a, b| (b.1 + 0.0).total_cmp(&(a.1 + 0.0)).then(a.0.cmp(&b.0)));
    let ids: Vec<usize> = scored.into_iter().map(|(id, _)| id).collect();
    let k = k.min(ids.len());
    (ids[..k].to_vec(), ids[k..].to_vec())
}

/// All mining state owned by the training loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningState {
    mode: ThresholdMode,
    /// Slots per query, in slot order.
    slots: BTreeMap<usize, Vec<NegativeSlotState>>,
    pools: BTreeMap<usize, NegativePool>,
}

impl MiningState {
    pub fn new(mode: ThresholdMode) -> Self {
        MiningState {
            mode,
            slots: BTreeMap::new(),
            pools: BTreeMap::new(),
        }
    }

    pub fn mode(&self) -> ThresholdMode {
        self.mode
    }

    /// Register a query's initial negatives (one slot each) and its pool.
    pub fn add_query(&mut self, query_id: usize, initial: &[usize], pool: Vec<usize>) {
        let slots = initial
            .iter()
            .enumerate()
            .map(|(slot, &neg)| NegativeSlotState::new(query_id, slot, neg))
            .collect();
        self.slots.insert(query_id, slots);
        self.pools.insert(query_id, NegativePool::new(pool));
    }

    pub fn slot(&self, query_id: usize, slot: usize) -> Option<&NegativeSlotState> {
        self.slots.get(&query_id).and_then(|v| v.get(slot))
    }

    pub fn pool(&self, query_id: usize) -> Option<&NegativePool> {
        self.pools.get(&query_id)
    }

    /// Current negatives of a query, in slot order.
    pub fn negatives(&self, query_id: usize) -> Vec<usize> {
        self.slots
            .get(&query_id)
            .map(|v| v.iter().map(|s| s.negative_id).collect())
            .unwrap_or_default()
    }

    pub fn total_exhausted(&self) -> u64 {
        self.pools.values().map(|p| p.exhausted_events).sum()
    }

    /// Record this step's scores `(query, slot, cosine)` and flag slots whose
    /// negative is no longer hard. Nothing is swapped here.
    pub fn cache_scores(
        &mut self,
        step: u64,
        scores: &[(usize, usize, f64)],
    ) -> Result<Vec<MiningRecord>> {
        let mut records = Vec::with_capacity(scores.len());
        for &(query_id, slot_index, s) in scores {
            if !s.is_finite() {
                return Err(Error::NonFinite(format!(
                    "score for query {query_id} slot {slot_index}"
                )));
            }
            let s = s.clamp(-1.0, 1.0);
            let slot = self
                .slots
                .get_mut(&query_id)
                .and_then(|v| v.get_mut(slot_index))
                .ok_or_else(|| {
                Error::invalid(format!("no mining slot ({query_id}, {slot_index})"))
            })?;
            if slot.last_cached_step == Some(step) {
                return Err(Error::invalid(format!(
                    "slot ({query_id}, {slot_index}) already cached at step {step}"
                )));
            }
            slot.last_cached_step = Some(step);
            if slot.s0.is_none() {
                slot.s0 = Some(s);
                slot.first_step_seen = Some(step);
            }
            slot.s_cur = Some(s);
            let is_initial = slot.first_step_seen == Some(step);
            let decision = decide(slot, is_initial, self.mode);
            if decision == Decision::Replace {
                slot.flagged = true;
            }
            records.push(MiningRecord {
                step,
                query_id,
                slot: slot_index,
                negative_id: slot.negative_id,
                s0: slot.s0.unwrap_or(s),
                s_cur: s,
                decision,
            });
        }
        Ok(records)
    }

    /// Swap every flagged slot's negative for its pool's next candidate.
    pub fn replace_flagged(&mut self) -> ReplacementReport {
        let mut report = ReplacementReport::default();
        for slot in self.slots.values_mut().flatten().filter(|s| s.flagged) {
            slot.flagged = false;
            let pool = self.pools.entry(slot.query_id).or_default();
            match pool.next() {
                Some(new) => {
                    report
                        .replaced
                        .push((slot.query_id, slot.slot_index, slot.negative_id, new));
                    slot.negative_id = new;
                    slot.s0 = None;
                    slot.s_cur = None;
                    slot.first_step_seen = None;
                }
                None => {
                    pool.exhausted_events += 1;
                    report.exhausted.push((slot.query_id, slot.slot_index));
                }
            }
        }
        report
    }
}
