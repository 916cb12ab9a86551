#![allow(dead_code)]

use std::collections::BTreeSet;

use psim::engine::{Assignments, ResultRecord};
use psim::oracle::{NaiveMultiSieve, OracleConfig, OracleMode};
use psim::{Action, Cadence, Catalog, Engine, EngineConfig, Pruning, RebaseSchedule, StreamEngine, SubscriptionId, Timestamp, UserId, UserProfile};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub use rand::SeedableRng;
pub type TestRng = ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Instance {
    pub profiles: Vec<UserProfile>,
    pub subscriptions: Vec<(SubscriptionId, BTreeSet<String>)>,
    pub actions: Vec<Action>,
}

#[derive(Debug, Clone, Copy)]
pub struct Shape {
    /// Users with a profile; influencers are drawn from them.
    pub users: u64,
    /// Extra users that only ever appear as influencees.
    pub audience: u64,
    pub vocabulary: usize,
    pub keyword_prob: f64,
    pub subscriptions: usize,
    pub actions: usize,
    pub start: Timestamp,
    /// Chance that the clock moves before an action.
    pub advance_prob: f64,
    pub max_step: i64,
    /// Largest lag of `t_r` behind `t_e` (and of `t_e` behind the clock).
    pub max_lag: i64,
}

impl Default for Shape {
    fn default() -> Self {
        Shape {
            users: 12,
            audience: 12,
            vocabulary: 4,
            keyword_prob: 0.6,
            subscriptions: 1,
            actions: 60,
            start: 100,
            advance_prob: 0.3,
            max_step: 3,
            max_lag: 2,
        }
    }
}

fn word(i: usize) -> String {
    format!("w{i}")
}

pub fn random_instance(rng: &mut TestRng, shape: Shape) -> Instance {
    let profiles: Vec<UserProfile> = (1..=shape.users)
        .map(|u| UserProfile {
            user: UserId(u),
            keywords: (0..shape.vocabulary)
                .filter(|_| rng.gen_bool(shape.keyword_prob))
                .map(word)
                .collect(),
        })
        .collect();
    let subscriptions = (0..shape.subscriptions)
        .map(|i| {
            let size = rng.gen_range(1..=2.min(shape.vocabulary));
            let mut words: Vec<usize> = (0..shape.vocabulary).collect();
            words.shuffle(rng);
            (
                SubscriptionId(i as u64 + 1),
                words[..size].iter().map(|&w| word(w)).collect(),
            )
        })
        .collect();
    let mut clock = shape.start;
    let mut actions = Vec::with_capacity(shape.actions);
    while actions.len() < shape.actions {
        if rng.gen_bool(shape.advance_prob) {
            clock += rng.gen_range(1..=shape.max_step.max(1));
        }
        let ur = rng.gen_range(1..=shape.users);
        let ue = rng.gen_range(1..=shape.users + shape.audience);
        if ur == ue {
            continue;
        }
        let t_e = clock - rng.gen_range(0..=shape.max_lag);
        let t_r = t_e - rng.gen_range(0..=shape.max_lag);
        actions.push(Action::new(UserId(ur), UserId(ue), t_r.max(0), t_e.max(0)).unwrap());
    }
    Instance {
        profiles,
        subscriptions,
        actions,
    }
}

pub fn engine_config(k: usize, lambda: f64, epsilon: f64) -> EngineConfig {
    EngineConfig {
        k,
        lambda,
        epsilon,
        ..EngineConfig::default()
    }
}

pub fn prefix_engine(instance: &Instance, config: EngineConfig) -> Engine {
    let catalog = Catalog::new(instance.profiles.clone(), instance.subscriptions.clone()).unwrap();
    Engine::new(config, catalog).unwrap()
}

pub fn oracle_engine(instance: &Instance, config: &EngineConfig, mode: OracleMode) -> NaiveMultiSieve {
    let oracle = OracleConfig {
        k: config.k,
        lambda: config.lambda,
        epsilon: config.epsilon,
        tau_f: config.tau_f,
        base: config.base,
        t0: config.t0,
        mode,
    };
    NaiveMultiSieve::new(oracle, &instance.profiles, &instance.subscriptions)
}

pub fn with_pruning(mut config: EngineConfig, pruning: Pruning) -> EngineConfig {
    config.pruning = pruning;
    config
}

pub fn with_schedule(mut config: EngineConfig, schedule: RebaseSchedule) -> EngineConfig {
    config.schedule = schedule;
    config
}

/// Every emission of a driven run.
pub fn emissions(engine: &mut dyn StreamEngine, actions: &[Action], cadence: Cadence) -> Vec<Vec<ResultRecord>> {
    let mut out = Vec::new();
    psim::drive(engine, actions.iter().copied(), cadence, |rows| {
        out.push(rows);
        Ok(())
    })
    .unwrap();
    out
}

pub fn every(n: u64) -> Cadence {
    Cadence {
        every: Some(n),
        on_timestamp_change: false,
    }
}

pub fn rel_close(a: f64, b: f64, rel: f64) -> bool {
    a == b || (a - b).abs() <= rel * a.abs().max(b.abs())
}

/// First difference between two result tables, if any.
pub fn compare_results(a: &[Vec<ResultRecord>], b: &[Vec<ResultRecord>], rel: f64, floor: f64, sets: bool) -> Option<String> {
    if a.len() != b.len() {
        return Some(format!("{} vs {} emissions", a.len(), b.len()));
    }
    for (i, (ra, rb)) in a.iter().zip(b).enumerate() {
        if ra.len() != rb.len() {
            return Some(format!("emission {i}: {} vs {} rows", ra.len(), rb.len()));
        }
        for (x, y) in ra.iter().zip(rb) {
            let negligible = x.influence.abs() <= floor && y.influence.abs() <= floor;
            if x.subscription != y.subscription || x.timestamp != y.timestamp {
                return Some(format!("emission {i}: row mismatch {x:?} vs {y:?}"));
            }
            if negligible {
                continue;
            }
            if !rel_close(x.influence, y.influence, rel) || (sets && x.users != y.users) {
                return Some(format!("emission {i}: {x:?} vs {y:?}"));
            }
        }
    }
    None
}

/// First difference between two estimation → candidate-set assignments.
pub fn compare_assignments(a: &Assignments, b: &Assignments, rel: f64) -> Option<String> {
    if a.keys().ne(b.keys()) {
        return Some("different subscriptions".into());
    }
    for (q, la) in a {
        let lb = &b[q];
        if la.len() != lb.len() {
            return Some(format!("subscription {q}: {} vs {} estimations", la.len(), lb.len()));
        }
        for ((ea, sa), (eb, sb)) in la.iter().zip(lb) {
            if !rel_close(*ea, *eb, rel) || sa != sb {
                return Some(format!("subscription {q}: ({ea}, {sa:?}) vs ({eb}, {sb:?})"));
            }
        }
    }
    None
}

/// Users related to the subscription `id`.
pub fn related(instance: &Instance, id: SubscriptionId) -> Vec<UserId> {
    let keywords = &instance
        .subscriptions
        .iter()
        .rev()
        .find(|s| s.0 == id)
        .expect("known subscription")
        .1;
    psim::oracle::related_users(&instance.profiles, keywords)
}
