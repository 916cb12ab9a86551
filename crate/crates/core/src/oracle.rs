//! Reference implementations for tests and golden files.
//!
//! Nothing here touches the prefix tree or the ladder code of the main
//! engine. Only the raw weight formula is shared.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use crate::engine::{Assignments, EngineStats, ResultRecord, StreamEngine, UserProfile};
use crate::error::{Error, Result};
use crate::influence::{raw_exponent, MAX_RAW_EXPONENT};
use crate::types::{Action, SubscriptionId, Timestamp, UserId};

/// Largest universe accepted by [`exhaustive_opt`].
pub const EXHAUSTIVE_LIMIT: usize = 20;

const SNAP: f64 = 1e-9;
const DROP_BELOW: f64 = 1e-250;

/// Max-merged true edge weights at one point in time.
#[derive(Debug, Clone, Default)]
pub struct Coverage {
    edges: BTreeMap<UserId, BTreeMap<UserId, f64>>,
}

impl Coverage {
    /// Replays `actions` with the true weights seen at `t_cur`.
    pub fn decayed(actions: &[Action], lambda: f64, t_cur: Timestamp) -> Self {
        let mut coverage = Coverage::default();
        for a in actions {
            let w = (-lambda * ((t_cur - a.t_e) + (t_cur - a.t_r)) as f64).exp();
            coverage.merge(a.influencer, a.influencee, w);
        }
        coverage
    }

    pub fn merge(&mut self, u: UserId, v: UserId, w: f64) {
        let slot = self.edges.entry(u).or_default().entry(v).or_insert(0.0);
        if w > *slot {
            *slot = w;
        }
    }

    pub fn weight(&self, u: UserId, v: UserId) -> f64 {
        self.edges.get(&u).and_then(|m| m.get(&v)).copied().unwrap_or(0.0)
    }

    pub fn value(&self, set: &[UserId]) -> f64 {
        let mut best: BTreeMap<UserId, f64> = BTreeMap::new();
        for u in set {
            for (&v, &w) in self.edges.get(u).into_iter().flatten() {
                let slot = best.entry(v).or_insert(0.0);
                *slot = slot.max(w);
            }
        }
        best.values().sum()
    }

    pub fn gain(&self, u: UserId, set: &[UserId]) -> f64 {
        if set.contains(&u) {
            return 0.0;
        }
        self.edges
            .get(&u)
            .into_iter()
            .flatten()
            .map(|(&v, &w)| {
                let covered = set.iter().map(|&s| self.weight(s, v)).fold(0.0, f64::max);
                (w - covered).max(0.0)
            })
            .sum()
    }
}

fn better(candidate: (f64, &[UserId]), incumbent: (f64, &[UserId])) -> bool {
    let (cf, cs) = candidate;
    let (bf, bs) = incumbent;
    let tol = 1e-9 * cf.abs().max(bf.abs());
    if cf > bf + tol {
        return true;
    }
    if cf < bf - tol {
        return false;
    }
    (cs.len(), cs) < (bs.len(), bs)
}

/// Best subset of at most `k` of `users` under `coverage`, with the engine's
/// tie-break (smaller, then lexicographically smaller sets).
pub fn exhaustive_opt(users: &[UserId], k: usize, coverage: &Coverage) -> Result<(Vec<UserId>, f64)> {
    if users.len() > EXHAUSTIVE_LIMIT {
        return Err(Error::contract(format!(
            "exhaustive search over {} users exceeds the limit of {EXHAUSTIVE_LIMIT}",
            users.len()
        )));
    }
    let mut pool: Vec<UserId> = users.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut best: (Vec<UserId>, f64) = (Vec::new(), 0.0);
    for mask in 1u32..(1u32 << pool.len()) {
        if mask.count_ones() as usize > k {
            continue;
        }
        let set: Vec<UserId> = (0..pool.len()).filter(|i| mask >> i & 1 == 1).map(|i| pool[i]).collect();
        let value = coverage.value(&set);
        if better((value, &set), (best.1, &best.0)) {
            best = (set, value);
        }
    }
    Ok(best)
}

/// Plain greedy: repeatedly add the largest marginal gain, ties to the
/// smallest id.
pub fn greedy(users: &[UserId], k: usize, coverage: &Coverage) -> (Vec<UserId>, f64) {
    let mut pool: Vec<UserId> = users.to_vec();
    pool.sort_unstable();
    pool.dedup();
    let mut chosen: Vec<UserId> = Vec::new();
    while chosen.len() < k {
        let mut pick: Option<(UserId, f64)> = None;
        for &u in pool.iter().filter(|u| !chosen.contains(u)) {
            let g = coverage.gain(u, &chosen);
            if pick.map_or(true, |(_, best)| g > best) {
                pick = Some((u, g));
            }
        }
        match pick {
            Some((u, g)) if g > 0.0 => chosen.push(u),
            _ => break,
        }
    }
    chosen.sort_unstable();
    let value = coverage.value(&chosen);
    (chosen, value)
}

/// Users related to a keyword set: their profile contains every keyword.
pub fn related_users(profiles: &[UserProfile], keywords: &BTreeSet<String>) -> Vec<UserId> {
    let mut users: Vec<UserId> = profiles
        .iter()
        .filter(|p| keywords.iter().all(|k| p.keywords.contains(k)))
        .map(|p| p.user)
        .collect();
    users.sort_unstable();
    users.dedup();
    users
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Rebase on the `τ_f` trigger before emissions, or to avoid overflow.
    Lazy,
    /// Rebase whenever the clock advances.
    Eager,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleConfig {
    pub k: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau_f: f64,
    pub base: f64,
    pub t0: Option<Timestamp>,
    pub mode: OracleMode,
}

#[derive(Debug, Clone)]
struct Candidate {
    exponent: i64,
    set: Vec<UserId>,
}

#[derive(Debug, Clone)]
struct SingleSieve {
    id: SubscriptionId,
    related: BTreeSet<UserId>,
    m: f64,
    candidates: Vec<Candidate>,
}

/// Independent SieveStreaming per subscription with full recomputation.
#[derive(Debug, Clone)]
pub struct NaiveMultiSieve {
    config: OracleConfig,
    ln_step: f64,
    /// `ln b` in the current raw frame.
    ln_base: f64,
    t0: Timestamp,
    clock: Option<Timestamp>,
    weights: HashMap<UserId, HashMap<UserId, f64>>,
    sieves: Vec<SingleSieve>,
    stats: EngineStats,
}

impl NaiveMultiSieve {
    pub fn new(
        config: OracleConfig,
        profiles: &[UserProfile],
        subscriptions: &[(SubscriptionId, BTreeSet<String>)],
    ) -> Self {
        let mut by_id: BTreeMap<SubscriptionId, &BTreeSet<String>> = BTreeMap::new();
        for (id, kw) in subscriptions {
            by_id.insert(*id, kw);
        }
        let sieves = by_id
            .into_iter()
            .map(|(id, kw)| SingleSieve {
                id,
                related: related_users(profiles, kw).into_iter().collect(),
                m: 0.0,
                candidates: Vec::new(),
            })
            .collect();
        NaiveMultiSieve {
            ln_step: (1.0 + config.epsilon).ln(),
            ln_base: config.base.ln(),
            t0: config.t0.unwrap_or(0),
            clock: None,
            weights: HashMap::new(),
            sieves,
            stats: EngineStats::default(),
            config,
        }
    }

    fn total(&self, u: UserId) -> f64 {
        self.weights.get(&u).map_or(0.0, |m| m.values().sum())
    }

    fn weight(&self, u: UserId, v: UserId) -> f64 {
        self.weights.get(&u).and_then(|m| m.get(&v)).copied().unwrap_or(0.0)
    }

    fn set_value(&self, set: &[UserId]) -> f64 {
        let mut best: HashMap<UserId, f64> = HashMap::new();
        for &u in set {
            for (&v, &w) in self.weights.get(&u).into_iter().flatten() {
                let slot = best.entry(v).or_insert(0.0);
                *slot = slot.max(w);
            }
        }
        best.values().sum()
    }

    fn gain(&self, u: UserId, set: &[UserId]) -> f64 {
        self.weights
            .get(&u)
            .into_iter()
            .flatten()
            .map(|(&v, &w)| {
                let covered = set.iter().map(|&s| self.weight(s, v)).fold(0.0, f64::max);
                (w - covered).max(0.0)
            })
            .sum()
    }

    fn threshold(&self, exponent: i64) -> f64 {
        (self.ln_base + exponent as f64 * self.ln_step).exp()
    }

    /// Exponents `i` with `m < b(1+ε)^i ≤ 2km`.
    fn window(&self, m: f64) -> Vec<i64> {
        if !(m >= DROP_BELOW) {
            return Vec::new();
        }
        let lo = (m.ln() - self.ln_base) / self.ln_step;
        let hi = ((2.0 * self.config.k as f64 * m).ln() - self.ln_base) / self.ln_step;
        let start = lo.floor() as i64 - 1;
        let end = hi.ceil() as i64 + 1;
        (start..=end)
            .filter(|&i| (i as f64) > lo + SNAP && (i as f64) <= hi + SNAP)
            .collect()
    }

    fn retile(&mut self, s: usize) {
        let window = self.window(self.sieves[s].m);
        let sieve = &mut self.sieves[s];
        if window.is_empty() {
            sieve.m = if sieve.m >= DROP_BELOW { sieve.m } else { 0.0 };
        }
        sieve.candidates.retain(|c| window.contains(&c.exponent));
        for i in window {
            if !sieve.candidates.iter().any(|c| c.exponent == i) {
                sieve.candidates.push(Candidate {
                    exponent: i,
                    set: Vec::new(),
                });
            }
        }
        sieve.candidates.sort_by_key(|c| c.exponent);
    }

    pub fn rebase(&mut self, t_cur: Timestamp) {
        let ln_d = -2.0 * self.config.lambda * (t_cur - self.t0) as f64;
        let d = ln_d.exp();
        for out in self.weights.values_mut() {
            out.retain(|_, w| {
                *w *= d;
                *w >= DROP_BELOW
            });
        }
        self.weights.retain(|_, out| !out.is_empty());
        self.ln_base += ln_d;
        let shift = (-self.ln_base / self.ln_step).floor() as i64;
        self.ln_base += shift as f64 * self.ln_step;
        for s in 0..self.sieves.len() {
            for c in &mut self.sieves[s].candidates {
                c.exponent -= shift;
            }
            self.sieves[s].m *= d;
            self.retile(s);
        }
        self.t0 = t_cur;
        self.stats.rebases += 1;
    }

    fn decay_factor(&self, t_cur: Timestamp) -> f64 {
        (-2.0 * self.config.lambda * (t_cur - self.t0) as f64).exp()
    }
}

impl StreamEngine for NaiveMultiSieve {
    fn process_action(&mut self, action: &Action) -> Result<()> {
        action.validate()?;
        let latest = action.latest();
        let t_cur = match self.clock {
            None => {
                self.t0 = self.config.t0.unwrap_or(latest);
                latest.max(self.t0)
            }
            Some(c) => c.max(latest),
        };
        let advanced = self.clock.is_some_and(|c| t_cur > c);
        self.clock = Some(t_cur);
        self.stats.actions += 1;
        if advanced && self.config.mode == OracleMode::Eager {
            self.rebase(t_cur);
        }
        let mut exponent = raw_exponent(action, self.config.lambda, self.t0);
        if exponent > MAX_RAW_EXPONENT {
            self.rebase(t_cur);
            exponent = raw_exponent(action, self.config.lambda, self.t0);
        }
        let w = exponent.exp();
        if w == 0.0 {
            self.stats.negligible_actions += 1;
            return Ok(());
        }
        let (u, v) = (action.influencer, action.influencee);
        let slot = self.weights.entry(u).or_default().entry(v).or_insert(0.0);
        if w <= *slot {
            return Ok(());
        }
        *slot = w;
        self.stats.edge_increases += 1;
        let f_u = self.total(u);
        let k = self.config.k;
        for s in 0..self.sieves.len() {
            if !self.sieves[s].related.contains(&u) {
                continue;
            }
            if f_u > self.sieves[s].m {
                self.sieves[s].m = f_u;
                self.retile(s);
            }
            let mut accepted = Vec::new();
            for (c, candidate) in self.sieves[s].candidates.iter().enumerate() {
                if candidate.set.len() >= k || candidate.set.contains(&u) {
                    continue;
                }
                let delta = self.gain(u, &candidate.set);
                self.stats.marginal_evaluations += 1;
                let value = self.set_value(&candidate.set);
                let bar = (self.threshold(candidate.exponent) / 2.0 - value) / (k - candidate.set.len()) as f64;
                if delta >= bar {
                    accepted.push(c);
                }
            }
            for c in accepted {
                let set = &mut self.sieves[s].candidates[c].set;
                set.push(u);
                set.sort_unstable();
            }
        }
        Ok(())
    }

    fn clock(&self) -> Option<Timestamp> {
        self.clock
    }

    fn emit(&mut self) -> Result<Vec<ResultRecord>> {
        let Some(t_cur) = self.clock else {
            return Ok(Vec::new());
        };
        let max_total = self.weights.keys().map(|&u| self.total(u)).fold(0.0, f64::max);
        if self.config.mode == OracleMode::Eager && t_cur > self.t0 {
            self.rebase(t_cur);
        } else if self.config.mode == OracleMode::Lazy && max_total >= self.config.tau_f {
            self.rebase(t_cur);
        }
        let d = self.decay_factor(t_cur);
        self.stats.emissions += 1;
        Ok(self
            .sieves
            .iter()
            .map(|sieve| {
                let mut best: Option<(f64, &[UserId])> = None;
                for c in &sieve.candidates {
                    let value = self.set_value(&c.set);
                    if best.map_or(true, |b| better((value, &c.set), b)) {
                        best = Some((value, &c.set));
                    }
                }
                let (value, set) = best.unwrap_or((0.0, &[]));
                ResultRecord {
                    subscription: sieve.id,
                    timestamp: t_cur,
                    k: self.config.k,
                    users: set.to_vec(),
                    influence: value * d,
                }
            })
            .collect())
    }

    fn stats(&self) -> EngineStats {
        self.stats
    }

    fn assignments(&self) -> Assignments {
        let d = self.clock.map_or(1.0, |t| self.decay_factor(t));
        self.sieves
            .iter()
            .map(|sieve| {
                let mut list: Vec<(f64, Vec<UserId>)> = sieve
                    .candidates
                    .iter()
                    .map(|c| (self.threshold(c.exponent) * d, c.set.clone()))
                    .collect();
                list.sort_by(|a, b| a.0.total_cmp(&b.0));
                (sieve.id, list)
            })
            .collect()
    }
}
