//! Subscription catalog, the per-action pipeline and result emission.

use std::collections::{BTreeMap, BTreeSet};

use rustc_hash::FxHashMap;

use crate::error::{Error, Result};
use crate::influence::{
    approx_eq, current_decay_factor, decay_exponent, raw_weight, DecayParams, EdgeStore, DEFAULT_TAU_D,
    DEFAULT_TAU_F,
};
use crate::prefix_tree::{MarginalQuery, NodeId, PrefixTree, PruneCounts, Pruning, RelatedLookup};
use crate::sieve::{sieve_accept, LadderChange, SieveState};
use crate::types::{intersect_sorted, Action, QueryId, SubscriptionId, Timestamp, UserId};

/// Relative tolerance within which two candidate influences count as tied.
pub const TIE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserProfile {
    pub user: UserId,
    pub keywords: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub id: SubscriptionId,
    pub keywords: BTreeSet<String>,
    /// Internal query shared by all subscriptions with this keyword set.
    pub query: QueryId,
}

/// Profiles, subscriptions and the memoized user → related-query relation.
#[derive(Debug, Clone, Default)]
pub struct Catalog {
    subscriptions: Vec<Subscription>,
    queries: Vec<BTreeSet<String>>,
    members: Vec<Vec<SubscriptionId>>,
    by_first_keyword: FxHashMap<String, Vec<QueryId>>,
    profiles: FxHashMap<UserId, BTreeSet<String>>,
    related: FxHashMap<UserId, Vec<QueryId>>,
}

impl Catalog {
    /// Later duplicates of a user or subscription id replace earlier ones.
    pub fn new(
        profiles: impl IntoIterator<Item = UserProfile>,
        subscriptions: impl IntoIterator<Item = (SubscriptionId, BTreeSet<String>)>,
    ) -> Result<Self> {
        let mut by_id = BTreeMap::new();
        for (id, keywords) in subscriptions {
            if keywords.is_empty() {
                return Err(Error::contract(format!("subscription {id} has no keywords")));
            }
            by_id.insert(id, keywords);
        }
        let mut catalog = Catalog::default();
        let mut query_of: BTreeMap<BTreeSet<String>, QueryId> = BTreeMap::new();
        for (id, keywords) in by_id {
            let query = *query_of.entry(keywords.clone()).or_insert_with(|| {
                let q = QueryId(catalog.queries.len() as u32);
                let first = keywords.iter().next().expect("nonempty").clone();
                catalog.by_first_keyword.entry(first).or_default().push(q);
                catalog.queries.push(keywords.clone());
                catalog.members.push(Vec::new());
                q
            });
            catalog.members[query.index()].push(id);
            catalog.subscriptions.push(Subscription { id, keywords, query });
        }
        for profile in profiles {
            catalog.profiles.insert(profile.user, profile.keywords);
        }
        Ok(catalog)
    }

    /// Subscriptions ordered by id.
    pub fn subscriptions(&self) -> &[Subscription] {
        &self.subscriptions
    }

    pub fn query_count(&self) -> usize {
        self.queries.len()
    }

    pub fn all_queries(&self) -> Vec<QueryId> {
        (0..self.queries.len() as u32).map(QueryId).collect()
    }

    pub fn query_keywords(&self, q: QueryId) -> &BTreeSet<String> {
        &self.queries[q.index()]
    }

    /// External subscriptions mapped to `q`, ascending.
    pub fn members(&self, q: QueryId) -> &[SubscriptionId] {
        &self.members[q.index()]
    }

    pub fn profile(&self, u: UserId) -> Option<&BTreeSet<String>> {
        self.profiles.get(&u)
    }

    /// `Q_u = {q : keywords(q) ⊆ P_u}`, ascending; memoized.
    pub fn related_subscriptions(&mut self, u: UserId) -> &[QueryId] {
        if !self.related.contains_key(&u) {
            let related = self.compute_related(u);
            self.related.insert(u, related);
        }
        &self.related[&u]
    }

    fn compute_related(&self, u: UserId) -> Vec<QueryId> {
        let Some(profile) = self.profiles.get(&u) else {
            return Vec::new();
        };
        let mut out: Vec<QueryId> = profile
            .iter()
            .filter_map(|kw| self.by_first_keyword.get(kw))
            .flatten()
            .copied()
            .filter(|q| self.queries[q.index()].is_subset(profile))
            .collect();
        out.sort_unstable();
        out
    }
}

impl RelatedLookup for Catalog {
    fn related(&self, user: UserId) -> &[QueryId] {
        self.related.get(&user).map_or(&[], Vec::as_slice)
    }
}

/// When the engine moves its time origin forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RebaseSchedule {
    /// Before an emission, once some raw user influence reaches `τ_f`.
    #[default]
    OnThreshold,
    /// Whenever the stream clock advances.
    EveryTimestamp,
    /// Only when a raw weight would overflow.
    Never,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EngineConfig {
    pub k: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau_f: f64,
    pub tau_d: f64,
    /// Initial time origin; the first action's latest timestamp if unset.
    pub t0: Option<Timestamp>,
    /// Initial estimation base `b`.
    pub base: f64,
    pub pruning: Pruning,
    pub schedule: RebaseSchedule,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            k: 50,
            lambda: 0.1,
            epsilon: 0.1,
            tau_f: DEFAULT_TAU_F,
            tau_d: DEFAULT_TAU_D,
            t0: None,
            base: 1.0,
            pruning: Pruning::default(),
            schedule: RebaseSchedule::default(),
        }
    }
}

impl EngineConfig {
    pub fn params(&self, t0: Timestamp) -> DecayParams {
        DecayParams {
            lambda: self.lambda,
            t0,
            tau_f: self.tau_f,
            tau_d: self.tau_d,
            epsilon: self.epsilon,
            k: self.k,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.params(self.t0.unwrap_or(0)).validate()?;
        if !(self.base > 0.0 && self.base.is_finite()) {
            return Err(Error::config("base", format!("must be positive and finite, got {}", self.base)));
        }
        Ok(())
    }
}

/// One emitted result row.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultRecord {
    pub subscription: SubscriptionId,
    pub timestamp: Timestamp,
    pub k: usize,
    pub users: Vec<UserId>,
    /// True decayed influence at `timestamp`.
    pub influence: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EngineStats {
    pub actions: u64,
    /// Late actions whose weight underflows to zero.
    pub negligible_actions: u64,
    pub edge_increases: u64,
    pub marginal_evaluations: u64,
    pub rebases: u64,
    pub prunes: PruneCounts,
    pub emissions: u64,
}

/// Per subscription, every estimation's true threshold and candidate set,
/// ordered by threshold.
pub type Assignments = BTreeMap<SubscriptionId, Vec<(f64, Vec<UserId>)>>;

/// Common surface of the prefix engine and the reference engines.
pub trait StreamEngine {
    fn process_action(&mut self, action: &Action) -> Result<()>;
    /// Stream clock: the largest timestamp seen so far.
    fn clock(&self) -> Option<Timestamp>;
    /// Results at the current clock, one record per subscription.
    fn emit(&mut self) -> Result<Vec<ResultRecord>>;
    fn stats(&self) -> EngineStats;
    fn assignments(&self) -> Assignments;
}

#[derive(Debug, Clone)]
pub struct Engine {
    config: EngineConfig,
    params: DecayParams,
    catalog: Catalog,
    edges: EdgeStore,
    sieve: SieveState,
    tree: PrefixTree,
    clock: Option<Timestamp>,
    seq: u64,
    stats: EngineStats,
}

impl Engine {
    pub fn new(config: EngineConfig, catalog: Catalog) -> Result<Self> {
        config.validate()?;
        let sieve = SieveState::new(catalog.query_count(), config.k, config.epsilon, config.base)?;
        let tree = PrefixTree::new(catalog.all_queries());
        Ok(Engine {
            params: config.params(config.t0.unwrap_or(0)),
            config,
            catalog,
            edges: EdgeStore::new(),
            sieve,
            tree,
            clock: None,
            seq: 0,
            stats: EngineStats::default(),
        })
    }

    pub fn config(&self) -> &EngineConfig {
        &self.config
    }

    pub fn params(&self) -> &DecayParams {
        &self.params
    }

    pub fn catalog(&self) -> &Catalog {
        &self.catalog
    }

    pub fn edges(&self) -> &EdgeStore {
        &self.edges
    }

    pub fn sieve(&self) -> &SieveState {
        &self.sieve
    }

    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    /// The four-step update for one action.
    pub fn process_action(&mut self, action: &Action) -> Result<()> {
        action.validate()?;
        let latest = action.latest();
        let t_cur = match self.clock {
            None => {
                self.params.t0 = self.config.t0.unwrap_or(latest);
                latest.max(self.params.t0)
            }
            Some(c) => c.max(latest),
        };
        let advanced = self.clock.is_some_and(|c| t_cur > c);
        self.clock = Some(t_cur);
        self.stats.actions += 1;
        if advanced && self.config.schedule == RebaseSchedule::EveryTimestamp {
            self.time_decay(t_cur)?;
        }

        let w = match raw_weight(action, &self.params) {
            Err(Error::RebaseRequired { .. }) => {
                self.time_decay(t_cur)?;
                raw_weight(action, &self.params)?
            }
            other => other?,
        };
        if w == 0.0 {
            self.stats.negligible_actions += 1;
            return Ok(());
        }
        let (u_r, u_e) = (action.influencer, action.influencee);
        let update = self.edges.update_edge(u_r, u_e, w)?;
        if !update.increased {
            return Ok(());
        }
        self.stats.edge_increases += 1;
        self.seq += 1;
        self.tree
            .apply_edge_increase(u_r, u_e, update.previous, update.weight, &self.edges);

        let related = self.catalog.related_subscriptions(u_r).to_vec();
        if related.is_empty() {
            return Ok(());
        }
        let f_ur = self.edges.influence(u_r);
        for &q in &related {
            let new_m = self.sieve.ladder(q).m.max(f_ur);
            let change = self.sieve.refresh_ladder(q, new_m, NodeId::ROOT)?;
            self.apply_ladder_change(change);
        }
        self.tree.repair_e_min(self.sieve.estimations());

        let query = MarginalQuery {
            target: u_r,
            related: &related,
            k: self.config.k,
            seq: self.seq,
            pruning: self.config.pruning,
        };
        let (visits, prunes) = self
            .tree
            .dfs_marginals(query, &self.edges, self.sieve.estimations(), &self.catalog);
        self.stats.marginal_evaluations += visits.len() as u64;
        self.stats.prunes.first += prunes.first;
        self.stats.prunes.second += prunes.second;
        self.stats.prunes.third += prunes.third;

        let mut moves = Vec::new();
        for visit in &visits {
            let payload = self.tree.payload(visit.node).expect("visited paths carry payloads");
            let size = self.tree.depth(visit.node);
            for &e in &payload.estimations {
                let estimation = self.sieve.estimation(e);
                if related.binary_search(&estimation.owner).is_err() {
                    continue;
                }
                if sieve_accept(visit.gain, estimation.value, payload.influence, size, self.config.k)? {
                    moves.push((visit.node, e, visit.gain));
                }
            }
        }

        let mut memo: FxHashMap<NodeId, NodeId> = FxHashMap::default();
        for (source, e, gain) in moves {
            let target = match memo.get(&source) {
                Some(&target) => target,
                None => {
                    let mut users = self.tree.path_of(source);
                    let pos = users.partition_point(|&u| u < u_r);
                    users.insert(pos, u_r);
                    let payload = self.tree.payload(source).expect("source carries a payload");
                    let influence = payload.influence + gain;
                    let q_s = intersect_sorted(&payload.related, &related);
                    let target = self.tree.find_path(NodeId::ROOT, &users);
                    self.tree.ensure_payload(target, influence, q_s);
                    memo.insert(source, target);
                    target
                }
            };
            self.tree.unlink_estimation(source, e);
            self.tree.link_estimation(target, e);
            self.sieve.set_path(e, target);
        }

        let visited: Vec<NodeId> = visits.iter().map(|v| v.node).collect();
        self.tree.clear(&visited);
        self.tree.repair_e_min(self.sieve.estimations());
        Ok(())
    }

    /// Links created estimations to the empty path and releases the paths
    /// of expired ones.
    fn apply_ladder_change(&mut self, change: LadderChange) {
        for &e in &change.created {
            self.tree.link_estimation(NodeId::ROOT, e);
        }
        let mut released = Vec::with_capacity(change.expired.len());
        for (e, estimation) in change.expired {
            self.tree.unlink_estimation(estimation.path, e);
            released.push(estimation.path);
        }
        self.tree.clear(&released);
    }

    /// Moves the time origin to `t_cur`, multiplying every stored quantity
    /// by `d = exp(−2λ(t_cur − t0))`.
    pub fn time_decay(&mut self, t_cur: Timestamp) -> Result<()> {
        current_decay_factor(t_cur, &self.params)?;
        let ln_d = decay_exponent(t_cur, &self.params);
        let d = ln_d.exp();
        self.edges.rebase_all(d)?;
        self.tree.scale_influences(d);
        let change = self.sieve.time_decay(ln_d, NodeId::ROOT);
        self.apply_ladder_change(change);
        self.tree.recompute_all_e_min(self.sieve.estimations());
        self.params.t0 = t_cur;
        self.stats.rebases += 1;
        Ok(())
    }

    /// Rebases per the configured schedule; called right before emission.
    pub fn maybe_time_decay(&mut self, t_cur: Timestamp) -> Result<bool> {
        let due = match self.config.schedule {
            RebaseSchedule::OnThreshold => self.edges.max_influence() >= self.config.tau_f,
            RebaseSchedule::EveryTimestamp => t_cur > self.params.t0,
            RebaseSchedule::Never => false,
        };
        if due {
            self.time_decay(t_cur)?;
        }
        Ok(due)
    }

    /// Best candidate set of every subscription, valued at `t_cur`.
    pub fn push_results(&mut self, t_cur: Timestamp) -> Result<Vec<ResultRecord>> {
        let d = current_decay_factor(t_cur, &self.params)?;
        let mut candidates: Vec<Vec<NodeId>> = vec![Vec::new(); self.catalog.query_count()];
        for (_, estimation) in self.sieve.estimations().iter() {
            candidates[estimation.owner.index()].push(estimation.path);
        }
        let mut best: Vec<(Vec<UserId>, f64)> = Vec::with_capacity(candidates.len());
        for mut nodes in candidates {
            nodes.sort_unstable();
            nodes.dedup();
            let scored: Vec<(f64, Vec<UserId>)> = nodes
                .into_iter()
                .map(|n| {
                    let f = self.tree.payload(n).expect("estimations link to payloads").influence;
                    (f, self.tree.path_of(n))
                })
                .collect();
            best.push(select_best(scored));
        }
        self.stats.emissions += 1;
        Ok(self
            .catalog
            .subscriptions()
            .iter()
            .map(|s| {
                let (users, f) = &best[s.query.index()];
                ResultRecord {
                    subscription: s.id,
                    timestamp: t_cur,
                    k: self.config.k,
                    users: users.clone(),
                    influence: f * d,
                }
            })
            .collect())
    }

    fn query_names(&self, q: QueryId) -> Vec<String> {
        self.catalog.members(q).iter().map(SubscriptionId::to_string).collect()
    }

    /// Debug dump of every payload in raw units.
    pub fn dump(&self) -> String {
        self.tree
            .dump(self.sieve.estimations(), 1.0, |q| self.query_names(q))
    }

    /// Full consistency check of tree, ladders and cached influences.
    pub fn audit(&self) -> std::result::Result<(), String> {
        self.tree.audit(self.sieve.estimations(), &self.catalog)?;
        self.sieve.audit()?;
        for node in self.tree.payload_nodes() {
            let path = self.tree.path_of(node);
            let stored = self.tree.payload(node).expect("payload node").influence;
            let want = if path.is_empty() { 0.0 } else { self.edges.set_influence(&path) };
            if !approx_eq(stored, want, 1e-9, 1e-200) {
                return Err(format!("f{path:?} = {stored}, recomputed {want}"));
            }
        }
        let mut maxima = vec![0.0_f64; self.catalog.query_count()];
        for u in self.edges.users() {
            for q in self.catalog.related(u) {
                let slot = &mut maxima[q.index()];
                *slot = slot.max(self.edges.influence(u));
            }
        }
        for (ladder, want) in self.sieve.ladders().iter().zip(maxima) {
            if !approx_eq(ladder.m, want, 1e-9, 1e-200) {
                return Err(format!("ladder {:?} m = {}, recomputed {want}", ladder.owner, ladder.m));
            }
        }
        if self.stats.marginal_evaluations != self.tree.marginal_evaluations() {
            return Err("marginal counters disagree".into());
        }
        Ok(())
    }
}

/// Largest influence; among candidates tied within [`TIE_TOLERANCE`] the
/// smallest set, then the lexicographically smallest. `(∅, 0)` if none.
pub fn select_best(mut scored: Vec<(f64, Vec<UserId>)>) -> (Vec<UserId>, f64) {
    let max = scored.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
    if scored.is_empty() {
        return (Vec::new(), 0.0);
    }
    scored.retain(|c| c.0 >= max - TIE_TOLERANCE * max.abs());
    scored
        .into_iter()
        .min_by(|a, b| a.1.len().cmp(&b.1.len()).then_with(|| a.1.cmp(&b.1)))
        .map(|(f, s)| (s, f))
        .expect("nonempty")
}

impl StreamEngine for Engine {
    fn process_action(&mut self, action: &Action) -> Result<()> {
        Engine::process_action(self, action)
    }

    fn clock(&self) -> Option<Timestamp> {
        self.clock
    }

    fn emit(&mut self) -> Result<Vec<ResultRecord>> {
        let Some(t_cur) = self.clock else {
            return Ok(Vec::new());
        };
        self.maybe_time_decay(t_cur)?;
        self.push_results(t_cur)
    }

    fn stats(&self) -> EngineStats {
        self.stats
    }

    fn assignments(&self) -> Assignments {
        let scale = self
            .clock
            .map_or(1.0, |t| decay_exponent(t, &self.params).exp());
        let mut by_query: Vec<Vec<(f64, Vec<UserId>)>> = vec![Vec::new(); self.catalog.query_count()];
        for (_, e) in self.sieve.estimations().iter() {
            by_query[e.owner.index()].push((e.value * scale, self.tree.path_of(e.path)));
        }
        for list in &mut by_query {
            list.sort_by(|a, b| a.0.total_cmp(&b.0));
        }
        self.catalog
            .subscriptions()
            .iter()
            .map(|s| (s.id, by_query[s.query.index()].clone()))
            .collect()
    }
}

/// When results are emitted while a stream is driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Cadence {
    /// Emit after every this many actions.
    pub every: Option<u64>,
    /// Emit for the old timestamp before an action advances the clock.
    pub on_timestamp_change: bool,
}

impl Default for Cadence {
    fn default() -> Self {
        Cadence {
            every: Some(1000),
            on_timestamp_change: false,
        }
    }
}

/// Feeds `actions` through `engine`, handing each emission to `sink`. The
/// stream end always emits unless the last action already did. Returns the
/// number of actions processed.
pub fn drive<E, I, F>(engine: &mut E, actions: I, cadence: Cadence, mut sink: F) -> Result<u64>
where
    E: StreamEngine + ?Sized,
    I: IntoIterator<Item = Action>,
    F: FnMut(Vec<ResultRecord>) -> Result<()>,
{
    let mut count = 0u64;
    let mut pending = false;
    for action in actions {
        if cadence.on_timestamp_change && pending && engine.clock().is_some_and(|c| action.latest() > c) {
            sink(engine.emit()?)?;
        }
        engine.process_action(&action)?;
        count += 1;
        pending = true;
        if cadence.every.is_some_and(|n| n > 0 && count % n == 0) {
            sink(engine.emit()?)?;
            pending = false;
        }
    }
    if pending {
        sink(engine.emit()?)?;
    }
    Ok(count)
}
