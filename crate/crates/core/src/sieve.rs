//! Geometric estimation ladders for the sieve, with a shared shifted base.
//!
//! Every subscription keeps the thresholds `b·(1+ε)^i` lying in the
//! half-open interval `(m, 2km]`, where `m` is the largest single-user
//! influence related to it. Multiplying the base `b` by a decay factor moves
//! the whole ladder at once; renormalizing `b` by a power of `(1+ε)` only
//! re-indexes the thresholds.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::influence::NEGLIGIBLE_WEIGHT;
use crate::prefix_tree::NodeId;
use crate::types::QueryId;

/// Tolerance, in ladder steps, for deciding that a threshold coincides with
/// an interval endpoint. Keeps ladder membership stable across different
/// rebase histories of the same stream.
pub const LADDER_SNAP: f64 = 1e-9;

/// `m < e ≤ 2km` for `e = b(1+ε)^i`: the inclusive exponent range, or `None`
/// when the ladder is empty.
pub fn exponent_range(ln_base: f64, m: f64, k: usize, epsilon: f64) -> Option<(i64, i64)> {
    if !(m > 0.0 && m.is_finite()) {
        return None;
    }
    let ln_step = epsilon.ln_1p();
    let lo_pos = (m.ln() - ln_base) / ln_step;
    let hi_pos = ((2.0 * k as f64 * m).ln() - ln_base) / ln_step;
    let lo = (lo_pos + LADDER_SNAP).floor() as i64 + 1;
    let hi = (hi_pos + LADDER_SNAP).floor() as i64;
    (lo <= hi).then_some((lo, hi))
}

pub fn threshold_value(ln_base: f64, exponent: i64, epsilon: f64) -> f64 {
    match i32::try_from(exponent) {
        Ok(i) => ln_base.exp() * (1.0 + epsilon).powi(i),
        Err(_) => (ln_base + exponent as f64 * epsilon.ln_1p()).exp(),
    }
}

/// All thresholds `b(1+ε)^i` in `(m, 2km]`, ascending.
pub fn ladder_range(b: f64, m: f64, k: usize, epsilon: f64) -> Vec<f64> {
    let ln_base = b.ln();
    match exponent_range(ln_base, m, k, epsilon) {
        Some((lo, hi)) => (lo..=hi).map(|i| threshold_value(ln_base, i, epsilon)).collect(),
        None => Vec::new(),
    }
}

/// Sieve condition `Δ ≥ (e/2 − f(S)) / (k − |S|)`.
pub fn sieve_accept(delta: f64, threshold: f64, set_influence: f64, set_size: usize, k: usize) -> Result<bool> {
    if set_size >= k {
        return Err(Error::contract(format!(
            "sieve consulted for a full candidate set ({set_size} >= {k})"
        )));
    }
    Ok(delta >= sieve_bar(threshold, set_influence, set_size, k))
}

/// Right-hand side of the sieve condition.
pub fn sieve_bar(threshold: f64, set_influence: f64, set_size: usize, k: usize) -> f64 {
    (threshold / 2.0 - set_influence) / (k - set_size) as f64
}

/// Integer `j` putting `b(1+ε)^j` closest to 1 in log scale; exact ties go
/// to the smaller `|j|`.
pub fn choose_shift_exponent(b: f64, epsilon: f64) -> Result<i64> {
    if !(b > 0.0) {
        return Err(Error::contract(format!("shift base must be positive, got {b}")));
    }
    Ok(shift_exponent_ln(b.ln(), epsilon))
}

pub(crate) fn shift_exponent_ln(ln_base: f64, epsilon: f64) -> i64 {
    let x = -ln_base / epsilon.ln_1p();
    let magnitude = x.abs();
    let floor = magnitude.floor();
    let rounded = if magnitude - floor == 0.5 { floor } else { magnitude.round() };
    (rounded as i64) * if x < 0.0 { -1 } else { 1 }
}

/// `(1/2λ)·ln(2km/τ_d)`: how far ahead a naive scheme would have to
/// pre-compute decayed thresholds. Diagnostic only.
pub fn horizon_bound(m: f64, k: usize, lambda: f64, tau_d: f64) -> f64 {
    (2.0 * k as f64 * m / tau_d).ln() / (2.0 * lambda)
}

/// Global estimation base `b`, kept in log form so a long decay never
/// underflows it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftState {
    ln_base: f64,
}

impl ShiftState {
    pub fn new(b: f64) -> Result<Self> {
        if !(b > 0.0 && b.is_finite()) {
            return Err(Error::config("base", format!("must be positive and finite, got {b}")));
        }
        Ok(ShiftState { ln_base: b.ln() })
    }

    pub fn base(&self) -> f64 {
        self.ln_base.exp()
    }

    pub fn ln_base(&self) -> f64 {
        self.ln_base
    }

    /// `b ← b·d`, then `b ← b(1+ε)^j` with `j` from [`choose_shift_exponent`].
    /// Returns `j`; thresholds re-index as `i ← i − j`.
    pub fn decay(&mut self, ln_d: f64, epsilon: f64) -> i64 {
        let decayed = self.ln_base + ln_d;
        let j = shift_exponent_ln(decayed, epsilon);
        self.ln_base = decayed + j as f64 * epsilon.ln_1p();
        j
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EstimationId(u32);

impl EstimationId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Estimation {
    pub owner: QueryId,
    pub exponent: i64,
    /// `b(1+ε)^exponent` in raw units.
    pub value: f64,
    /// Path currently holding this estimation's candidate set.
    pub path: NodeId,
}

/// Slot arena of live estimations.
#[derive(Debug, Clone, Default)]
pub struct Estimations {
    slots: Vec<Option<Estimation>>,
    free: Vec<u32>,
    live: usize,
}

impl Estimations {
    pub fn get(&self, id: EstimationId) -> &Estimation {
        self.slots[id.index()].as_ref().expect("dangling estimation id")
    }

    pub fn get_mut(&mut self, id: EstimationId) -> &mut Estimation {
        self.slots[id.index()].as_mut().expect("dangling estimation id")
    }

    pub fn len(&self) -> usize {
        self.live
    }

    pub fn is_empty(&self) -> bool {
        self.live == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (EstimationId, &Estimation)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, slot)| slot.as_ref().map(|e| (EstimationId(i as u32), e)))
    }

    fn insert(&mut self, estimation: Estimation) -> EstimationId {
        self.live += 1;
        match self.free.pop() {
            Some(i) => {
                self.slots[i as usize] = Some(estimation);
                EstimationId(i)
            }
            None => {
                self.slots.push(Some(estimation));
                EstimationId(self.slots.len() as u32 - 1)
            }
        }
    }

    fn remove(&mut self, id: EstimationId) -> Estimation {
        let estimation = self.slots[id.index()].take().expect("dangling estimation id");
        self.free.push(id.0);
        self.live -= 1;
        estimation
    }
}

#[derive(Debug, Clone)]
pub struct Ladder {
    pub owner: QueryId,
    /// Largest related single-user influence, raw units.
    pub m: f64,
    by_exponent: BTreeMap<i64, EstimationId>,
}

impl Ladder {
    pub fn new(owner: QueryId) -> Self {
        Ladder {
            owner,
            m: 0.0,
            by_exponent: BTreeMap::new(),
        }
    }

    pub fn estimations(&self) -> impl Iterator<Item = EstimationId> + '_ {
        self.by_exponent.values().copied()
    }

    pub fn exponents(&self) -> impl Iterator<Item = i64> + '_ {
        self.by_exponent.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.by_exponent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_exponent.is_empty()
    }
}

/// Estimations created and expired by one ladder adjustment. Created ones
/// are linked to `start` (the empty path); expired ones carry the path they
/// have to be unlinked from.
#[derive(Debug, Default)]
pub struct LadderChange {
    pub created: Vec<EstimationId>,
    pub expired: Vec<(EstimationId, Estimation)>,
}

impl LadderChange {
    pub fn is_empty(&self) -> bool {
        self.created.is_empty() && self.expired.is_empty()
    }

    fn absorb(&mut self, other: LadderChange) {
        self.created.extend(other.created);
        self.expired.extend(other.expired);
    }
}

/// All ladders of an engine plus the estimation arena and shared base.
#[derive(Debug, Clone)]
pub struct SieveState {
    pub epsilon: f64,
    pub k: usize,
    pub shift: ShiftState,
    ladders: Vec<Ladder>,
    estimations: Estimations,
}

impl SieveState {
    pub fn new(query_count: usize, k: usize, epsilon: f64, base: f64) -> Result<Self> {
        Ok(SieveState {
            epsilon,
            k,
            shift: ShiftState::new(base)?,
            ladders: (0..query_count).map(|q| Ladder::new(QueryId(q as u32))).collect(),
            estimations: Estimations::default(),
        })
    }

    pub fn ladder(&self, q: QueryId) -> &Ladder {
        &self.ladders[q.index()]
    }

    pub fn ladders(&self) -> &[Ladder] {
        &self.ladders
    }

    pub fn estimations(&self) -> &Estimations {
        &self.estimations
    }

    pub fn estimation(&self, id: EstimationId) -> &Estimation {
        self.estimations.get(id)
    }

    pub fn set_path(&mut self, id: EstimationId, path: NodeId) {
        self.estimations.get_mut(id).path = path;
    }

    /// Raises `m` to `new_m` and re-tiles the ladder over `(new_m, 2k·new_m]`.
    pub fn refresh_ladder(&mut self, q: QueryId, new_m: f64, start: NodeId) -> Result<LadderChange> {
        let m = self.ladders[q.index()].m;
        if new_m < m {
            return Err(Error::contract(format!(
                "ladder maximum may only grow between rebases ({new_m} < {m})"
            )));
        }
        if new_m == m {
            return Ok(LadderChange::default());
        }
        self.ladders[q.index()].m = new_m;
        Ok(self.retile(q, start))
    }

    /// Expires thresholds outside `(m, 2km]` and creates the missing ones.
    fn retile(&mut self, q: QueryId, start: NodeId) -> LadderChange {
        let mut change = LadderChange::default();
        let ln_base = self.shift.ln_base();
        let (epsilon, k) = (self.epsilon, self.k);
        let ladder = &mut self.ladders[q.index()];
        if ladder.m < NEGLIGIBLE_WEIGHT {
            ladder.m = 0.0;
        }
        let range = exponent_range(ln_base, ladder.m, k, epsilon);
        let stale: Vec<i64> = ladder
            .by_exponent
            .keys()
            .copied()
            .filter(|i| !range.is_some_and(|(lo, hi)| (lo..=hi).contains(i)))
            .collect();
        for i in stale {
            let id = ladder.by_exponent.remove(&i).expect("stale exponent present");
            change.expired.push((id, self.estimations.remove(id)));
        }
        if let Some((lo, hi)) = range {
            for i in lo..=hi {
                if ladder.by_exponent.contains_key(&i) {
                    continue;
                }
                let id = self.estimations.insert(Estimation {
                    owner: q,
                    exponent: i,
                    value: threshold_value(ln_base, i, epsilon),
                    path: start,
                });
                ladder.by_exponent.insert(i, id);
                change.created.push(id);
            }
        }
        change
    }

    /// Ladder half of a rebase: shifts the base by `ln_d`, re-indexes and
    /// revalues every threshold, decays every `m` by `exp(ln_d)` and re-tiles.
    pub fn time_decay(&mut self, ln_d: f64, start: NodeId) -> LadderChange {
        let j = self.shift.decay(ln_d, self.epsilon);
        let ln_base = self.shift.ln_base();
        let epsilon = self.epsilon;
        let d = ln_d.exp();
        for ladder in &mut self.ladders {
            ladder.m *= d;
            if j != 0 {
                ladder.by_exponent = std::mem::take(&mut ladder.by_exponent)
                    .into_iter()
                    .map(|(i, id)| (i - j, id))
                    .collect();
            }
            for (&i, &id) in &ladder.by_exponent {
                let estimation = self.estimations.get_mut(id);
                estimation.exponent = i;
                estimation.value = threshold_value(ln_base, i, epsilon);
            }
        }
        let mut change = LadderChange::default();
        for q in 0..self.ladders.len() {
            let retiled = self.retile(QueryId(q as u32), start);
            change.absorb(retiled);
        }
        change
    }

    /// Ladder tiling check: every ladder holds exactly the thresholds of
    /// `(m, 2km]` and each estimation's value matches its exponent.
    pub fn audit(&self) -> std::result::Result<(), String> {
        let ln_base = self.shift.ln_base();
        let mut seen = 0;
        for ladder in &self.ladders {
            let expected: Vec<i64> = match exponent_range(ln_base, ladder.m, self.k, self.epsilon) {
                Some((lo, hi)) => (lo..=hi).collect(),
                None => Vec::new(),
            };
            let actual: Vec<i64> = ladder.exponents().collect();
            if expected != actual {
                return Err(format!(
                    "ladder {:?} holds exponents {actual:?}, expected {expected:?} for m={}",
                    ladder.owner, ladder.m
                ));
            }
            for (&i, &id) in &ladder.by_exponent {
                let e = self.estimations.get(id);
                if e.owner != ladder.owner || e.exponent != i {
                    return Err(format!("estimation {id:?} disagrees with its ladder slot"));
                }
                let want = threshold_value(ln_base, i, self.epsilon);
                if (e.value - want).abs() > 1e-12 * want {
                    return Err(format!("estimation {id:?} value {} != {want}", e.value));
                }
                seen += 1;
            }
        }
        if seen != self.estimations.len() {
            return Err(format!(
                "{} live estimations but {seen} reachable from ladders",
                self.estimations.len()
            ));
        }
        Ok(())
    }
}
