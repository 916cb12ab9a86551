//! Time-decaying influence model.
//!
//! Weights are stored in a lazy base-time representation: an action
//! contributes `exp(λ·(t_e + t_r − 2·t0))`, which is its true decayed weight
//! at any time `t` multiplied by `exp(2λ·(t − t0))`. The common factor is
//! applied only when results leave the engine ([`current_decay_factor`]) or
//! when the origin `t0` is moved forward ([`EdgeStore::rebase_all`]).
//!
//! The coverage objective of a user set `S` is
//! `f(S) = Σ_v max_{u ∈ S} f(u → v)`, monotone and submodular.

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::types::{Action, Timestamp, UserId};

/// Largest exponent accepted by [`raw_weight`]. Leaves room for summing a
/// very large number of weights without reaching `f64::MAX` (≈ e^709.78).
pub const MAX_RAW_EXPONENT: f64 = 690.0;

/// Weights that decay below this value during a rebase are dropped from the
/// edge store. They are hundreds of orders of magnitude below any detection
/// floor and only cost memory and rebase time.
pub const NEGLIGIBLE_WEIGHT: f64 = 1e-250;

pub const DEFAULT_TAU_F: f64 = 1e18;
pub const DEFAULT_TAU_D: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayParams {
    /// Decay constant per time unit. Zero disables decay.
    pub lambda: f64,
    /// Base timestamp of the lazy representation.
    pub t0: Timestamp,
    /// Rebase trigger: a rebase runs when some raw user influence reaches it.
    pub tau_f: f64,
    /// Detection floor for decayed influences.
    pub tau_d: f64,
    pub epsilon: f64,
    pub k: usize,
}

impl DecayParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("lambda", format!("must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 0.5) {
            return Err(Error::config("epsilon", format!("must lie in (0, 0.5), got {}", self.epsilon)));
        }
        if !(self.tau_d > 0.0 && self.tau_d < 1.0) {
            return Err(Error::config("tau_d", format!("must lie in (0, 1), got {}", self.tau_d)));
        }
        if !(self.tau_f > 1.0 && self.tau_f.is_finite()) {
            return Err(Error::config("tau_f", format!("must be finite and > 1, got {}", self.tau_f)));
        }
        if self.k == 0 {
            return Err(Error::config("k", "must be at least 1"));
        }
        if self.t0 < 0 {
            return Err(Error::config("t0", "must be non-negative"));
        }
        Ok(())
    }
}

/// Exponent `λ·(t_e + t_r − 2·t0)` of an action's raw weight.
pub fn raw_exponent(action: &Action, lambda: f64, t0: Timestamp) -> f64 {
    let offset = (action.t_e - t0) + (action.t_r - t0);
    lambda * offset as f64
}

/// Raw (base-time) weight of an action. Fails with [`Error::RebaseRequired`]
/// when the value would leave the safe numeric range.
pub fn raw_weight(action: &Action, params: &DecayParams) -> Result<f64> {
    let exponent = raw_exponent(action, params.lambda, params.t0);
    if exponent > MAX_RAW_EXPONENT {
        return Err(Error::RebaseRequired { exponent });
    }
    Ok(exponent.exp())
}

/// `exp(−2λ·(t_cur − t0))`: multiplying a raw weight by it yields the true
/// decayed weight at `t_cur`.
pub fn current_decay_factor(t_cur: Timestamp, params: &DecayParams) -> Result<f64> {
    if t_cur < params.t0 {
        return Err(Error::contract(format!(
            "current time {t_cur} precedes the base time {}",
            params.t0
        )));
    }
    Ok(decay_exponent(t_cur, params).exp())
}

/// Natural log of [`current_decay_factor`]; stays finite where the factor
/// itself underflows.
pub fn decay_exponent(t_cur: Timestamp, params: &DecayParams) -> f64 {
    -2.0 * params.lambda * (t_cur - params.t0) as f64
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeUpdate {
    /// Stored weight before the update (0 for a new edge).
    pub previous: f64,
    /// Stored weight after the update.
    pub weight: f64,
    pub increased: bool,
}

#[derive(Debug, Clone, Default)]
pub struct InfluenceSet {
    total: f64,
    out: FxHashMap<UserId, f64>,
}

impl InfluenceSet {
    pub fn total(&self) -> f64 {
        self.total
    }

    pub fn weight(&self, v: UserId) -> f64 {
        self.out.get(&v).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (UserId, f64)> + '_ {
        self.out.iter().map(|(&v, &w)| (v, w))
    }

    pub fn len(&self) -> usize {
        self.out.len()
    }

    pub fn is_empty(&self) -> bool {
        self.out.is_empty()
    }
}

/// Per-influencer max-merged edge weights plus cached per-user totals.
#[derive(Debug, Clone, Default)]
pub struct EdgeStore {
    users: FxHashMap<UserId, InfluenceSet>,
    max_total: f64,
}

impl EdgeStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn weight(&self, u: UserId, v: UserId) -> f64 {
        self.users.get(&u).map_or(0.0, |set| set.weight(v))
    }

    /// Total influence `f(u)`; zero for users never seen as influencers.
    pub fn influence(&self, u: UserId) -> f64 {
        self.users.get(&u).map_or(0.0, |set| set.total)
    }

    pub fn influence_set(&self, u: UserId) -> Option<&InfluenceSet> {
        self.users.get(&u)
    }

    /// Largest raw user influence currently stored.
    pub fn max_influence(&self) -> f64 {
        self.max_total
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn edge_count(&self) -> usize {
        self.users.values().map(InfluenceSet::len).sum()
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.users.keys().copied()
    }

    /// Max-merges `w` into the edge `u_r → u_e`.
    pub fn update_edge(&mut self, u_r: UserId, u_e: UserId, w: f64) -> Result<EdgeUpdate> {
        if u_r == u_e {
            return Err(Error::SelfAction(u_r.0));
        }
        if !(w > 0.0 && w.is_finite()) {
            return Err(Error::contract(format!("edge weight must be positive and finite, got {w}")));
        }
        let set = self.users.entry(u_r).or_default();
        let slot = set.out.entry(u_e).or_insert(0.0);
        let previous = *slot;
        if w > previous {
            *slot = w;
            set.total += w - previous;
            self.max_total = self.max_total.max(set.total);
            Ok(EdgeUpdate {
                previous,
                weight: w,
                increased: true,
            })
        } else {
            Ok(EdgeUpdate {
                previous,
                weight: previous,
                increased: false,
            })
        }
    }

    /// `f(S→v) = max_{u∈S} f(u→v)`.
    pub fn coverage_of(&self, set: &[UserId], v: UserId) -> f64 {
        set.iter().map(|&u| self.weight(u, v)).fold(0.0, f64::max)
    }

    /// Coverage objective `f(S)`, recomputed from the stored edges.
    pub fn set_influence(&self, set: &[UserId]) -> f64 {
        if let [u] = set {
            return self.influence(*u);
        }
        let mut cover: FxHashMap<UserId, f64> = FxHashMap::default();
        for &u in set {
            if let Some(influence) = self.users.get(&u) {
                for (v, w) in influence.iter() {
                    let slot = cover.entry(v).or_insert(0.0);
                    if w > *slot {
                        *slot = w;
                    }
                }
            }
        }
        cover.values().sum()
    }

    /// `Δ(u|S) = f(S ∪ {u}) − f(S)`, evaluated slot by slot.
    pub fn marginal_gain(&self, u: UserId, set: &[UserId]) -> f64 {
        if set.contains(&u) {
            return 0.0;
        }
        let Some(influence) = self.users.get(&u) else {
            return 0.0;
        };
        if set.is_empty() {
            return influence.total;
        }
        influence
            .iter()
            .map(|(v, w)| (w - self.coverage_of(set, v)).max(0.0))
            .sum()
    }

    /// Multiplies every stored weight and total by `d`, dropping weights that
    /// become negligible.
    pub fn rebase_all(&mut self, d: f64) -> Result<()> {
        if !(d > 0.0 && d <= 1.0) {
            if d == 0.0 {
                self.users.clear();
                self.max_total = 0.0;
                return Ok(());
            }
            return Err(Error::contract(format!("rebase factor must lie in (0, 1], got {d}")));
        }
        if d == 1.0 {
            return Ok(());
        }
        let mut max_total = 0.0_f64;
        self.users.retain(|_, set| {
            let mut dropped = 0.0;
            set.out.retain(|_, w| {
                *w *= d;
                if *w < NEGLIGIBLE_WEIGHT {
                    dropped += *w;
                    false
                } else {
                    true
                }
            });
            set.total = (set.total * d - dropped).max(0.0);
            max_total = max_total.max(set.total);
            !set.out.is_empty()
        });
        self.max_total = max_total;
        Ok(())
    }

    /// Total of `u` recomputed from its edges (audit helper).
    pub fn recompute_total(&self, u: UserId) -> f64 {
        self.users.get(&u).map_or(0.0, |set| set.out.values().sum())
    }
}

/// Relative comparison with an absolute floor for values that are both
/// indistinguishable from zero.
pub fn approx_eq(a: f64, b: f64, rel: f64, floor: f64) -> bool {
    if a.abs() <= floor && b.abs() <= floor {
        return true;
    }
    (a - b).abs() <= rel * a.abs().max(b.abs())
}
