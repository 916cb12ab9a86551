//! Line-delimited JSON ingestion, CSV result output and the run driver.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::thread;
use std::time::Instant;

use log::warn;
use rustc_hash::FxHashMap;
use serde::{Deserialize, Serialize};

use crate::engine::{drive, Cadence, Catalog, Engine, EngineConfig, EngineStats, ResultRecord, StreamEngine, UserProfile};
use crate::error::{Error, Result};
use crate::influence::{DEFAULT_TAU_D, DEFAULT_TAU_F};
use crate::oracle::{NaiveMultiSieve, OracleConfig, OracleMode};
use crate::prefix_tree::Pruning;
use crate::types::{Action, SubscriptionId, Timestamp, UserId};

const BATCH: usize = 4096;
const QUEUE_DEPTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub ue: u64,
    pub te: Timestamp,
    pub ur: u64,
    pub tr: Timestamp,
}

impl From<Action> for ActionRecord {
    fn from(a: Action) -> Self {
        ActionRecord {
            ue: a.influencee.0,
            te: a.t_e,
            ur: a.influencer.0,
            tr: a.t_r,
        }
    }
}

impl TryFrom<ActionRecord> for Action {
    type Error = Error;

    fn try_from(r: ActionRecord) -> Result<Action> {
        Action::new(UserId(r.ur), UserId(r.ue), r.tr, r.te)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub user: u64,
    pub kw: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubscriptionRecord {
    pub q: u64,
    pub kw: Vec<String>,
}

/// Counts of lines that did not become records.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub records: u64,
    pub malformed: u64,
    pub duplicates: u64,
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn read_lines(path: &Path, reader: impl BufRead, mut each: impl FnMut(usize, &str)) -> Result<()> {
    for (n, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let line = line.trim();
        if !line.is_empty() {
            each(n + 1, line);
        }
    }
    Ok(())
}

/// Parses one action line; self-actions and bad fields are errors.
pub fn parse_action(line: &str) -> Result<Action> {
    let record: ActionRecord = serde_json::from_str(line)?;
    Action::try_from(record)
}

/// All actions of `reader`, in order, skipping malformed lines.
pub fn read_actions(path: &Path, reader: impl BufRead) -> Result<(Vec<Action>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut actions = Vec::new();
    read_lines(path, reader, |n, line| match parse_action(line) {
        Ok(a) => {
            report.records += 1;
            actions.push(a);
        }
        Err(e) => {
            report.malformed += 1;
            warn!("{}:{n}: skipping action: {e}", path.display());
        }
    })?;
    Ok((actions, report))
}

pub fn load_actions(path: &Path) -> Result<(Vec<Action>, LoadReport)> {
    read_actions(path, open(path)?)
}

/// Parses actions on a separate thread, handing batches over a bounded
/// queue. Iterating the receiver yields actions in file order; `join` on
/// the handle gives the load report.
pub fn spawn_action_reader(path: &Path) -> Result<(ActionStream, thread::JoinHandle<Result<LoadReport>>)> {
    let reader = open(path)?;
    let path = path.to_path_buf();
    let (tx, rx) = mpsc::sync_channel::<Vec<Action>>(QUEUE_DEPTH);
    let handle = thread::spawn(move || {
        let mut report = LoadReport::default();
        let mut batch = Vec::with_capacity(BATCH);
        let mut closed = false;
        read_lines(&path, reader, |n, line| {
            if closed {
                return;
            }
            match parse_action(line) {
                Ok(a) => {
                    report.records += 1;
                    batch.push(a);
                    if batch.len() == BATCH {
                        closed = tx.send(std::mem::replace(&mut batch, Vec::with_capacity(BATCH))).is_err();
                    }
                }
                Err(e) => {
                    report.malformed += 1;
                    warn!("{}:{n}: skipping action: {e}", path.display());
                }
            }
        })?;
        if !batch.is_empty() && !closed {
            let _ = tx.send(batch);
        }
        Ok(report)
    });
    Ok((
        ActionStream {
            rx,
            current: Vec::new().into_iter(),
        },
        handle,
    ))
}

pub struct ActionStream {
    rx: mpsc::Receiver<Vec<Action>>,
    current: std::vec::IntoIter<Action>,
}

impl Iterator for ActionStream {
    type Item = Action;

    fn next(&mut self) -> Option<Action> {
        loop {
            if let Some(a) = self.current.next() {
                return Some(a);
            }
            self.current = self.rx.recv().ok()?.into_iter();
        }
    }
}

pub fn read_profiles(path: &Path, reader: impl BufRead) -> Result<(Vec<UserProfile>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut by_user: FxHashMap<u64, (usize, BTreeSet<String>)> = FxHashMap::default();
    read_lines(path, reader, |n, line| match serde_json::from_str::<ProfileRecord>(line) {
        Ok(r) => {
            report.records += 1;
            if by_user.insert(r.user, (n, r.kw.into_iter().collect())).is_some() {
                report.duplicates += 1;
                warn!("{}:{n}: user {} redefined; using the later profile", path.display(), r.user);
            }
        }
        Err(e) => {
            report.malformed += 1;
            warn!("{}:{n}: skipping profile: {e}", path.display());
        }
    })?;
    let mut profiles: Vec<(u64, usize, BTreeSet<String>)> =
        by_user.into_iter().map(|(u, (n, kw))| (u, n, kw)).collect();
    profiles.sort_by_key(|p| p.0);
    Ok((
        profiles
            .into_iter()
            .map(|(u, _, keywords)| UserProfile {
                user: UserId(u),
                keywords,
            })
            .collect(),
        report,
    ))
}

pub fn load_profiles(path: &Path) -> Result<(Vec<UserProfile>, LoadReport)> {
    read_profiles(path, open(path)?)
}

pub fn read_subscriptions(
    path: &Path,
    reader: impl BufRead,
) -> Result<(Vec<(SubscriptionId, BTreeSet<String>)>, LoadReport)> {
    let mut report = LoadReport::default();
    let mut by_id: std::collections::BTreeMap<u64, BTreeSet<String>> = Default::default();
    read_lines(path, reader, |n, line| match serde_json::from_str::<SubscriptionRecord>(line) {
        Ok(r) if r.kw.is_empty() => {
            report.malformed += 1;
            warn!("{}:{n}: subscription {} has no keywords; rejected", path.display(), r.q);
        }
        Ok(r) => {
            report.records += 1;
            if by_id.insert(r.q, r.kw.into_iter().collect()).is_some() {
                report.duplicates += 1;
                warn!("{}:{n}: subscription {} redefined; using the later one", path.display(), r.q);
            }
        }
        Err(e) => {
            report.malformed += 1;
            warn!("{}:{n}: skipping subscription: {e}", path.display());
        }
    })?;
    Ok((by_id.into_iter().map(|(q, kw)| (SubscriptionId(q), kw)).collect(), report))
}

pub fn load_subscriptions(path: &Path) -> Result<(Vec<(SubscriptionId, BTreeSet<String>)>, LoadReport)> {
    read_subscriptions(path, open(path)?)
}

/// `%.9g`: nine significant digits, trailing zeros dropped, exponent form
/// outside `[1e-4, 1e9)`.
pub fn format_sig9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        trim(&format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim(mantissa), exp.abs())
    }
}

pub const CSV_HEADER: [&str; 5] = ["subscription", "timestamp", "k", "users", "influence"];

pub struct ResultWriter<W: Write> {
    inner: csv::Writer<W>,
}

impl<W: Write> ResultWriter<W> {
    pub fn new(out: W) -> Result<Self> {
        let mut inner = csv::Writer::from_writer(out);
        inner.write_record(CSV_HEADER)?;
        Ok(ResultWriter { inner })
    }

    pub fn write(&mut self, record: &ResultRecord) -> Result<()> {
        let users: Vec<String> = record.users.iter().map(UserId::to_string).collect();
        self.inner.write_record([
            record.subscription.to_string(),
            record.timestamp.to_string(),
            record.k.to_string(),
            users.join(";"),
            format_sig9(record.influence),
        ])?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        self.inner.flush().map_err(|source| Error::Io {
            path: PathBuf::from("<output>"),
            source,
        })?;
        self.inner
            .into_inner()
            .map_err(|e| Error::contract(format!("flushing results failed: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EngineKind {
    #[default]
    Prefix,
    Naive,
    Eager,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub k: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub tau_f: f64,
    pub tau_d: f64,
    pub emit_every: u64,
    pub emit_on_timestamp_change: bool,
    pub pruning3: bool,
    pub engine: EngineKind,
    pub actions: PathBuf,
    pub profiles: Option<PathBuf>,
    pub subscriptions: Option<PathBuf>,
    pub output: Option<PathBuf>,
}

impl RunConfig {
    pub fn new(actions: PathBuf) -> Self {
        let defaults = EngineConfig::default();
        RunConfig {
            k: defaults.k,
            lambda: defaults.lambda,
            epsilon: defaults.epsilon,
            tau_f: DEFAULT_TAU_F,
            tau_d: DEFAULT_TAU_D,
            emit_every: 1000,
            emit_on_timestamp_change: false,
            pruning3: defaults.pruning.third,
            engine: EngineKind::Prefix,
            actions,
            profiles: None,
            subscriptions: None,
            output: None,
        }
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            k: self.k,
            lambda: self.lambda,
            epsilon: self.epsilon,
            tau_f: self.tau_f,
            tau_d: self.tau_d,
            pruning: Pruning {
                third: self.pruning3,
                ..Pruning::default()
            },
            ..EngineConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.engine_config().validate()?;
        if self.emit_every == 0 {
            return Err(Error::config("emit_every", "must be at least 1"));
        }
        Ok(())
    }

    pub fn cadence(&self) -> Cadence {
        Cadence {
            every: Some(self.emit_every),
            on_timestamp_change: self.emit_on_timestamp_change,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PruneStats {
    pub first: u64,
    pub second: u64,
    pub third: u64,
}

/// Contents of the stats sidecar.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunStats {
    pub actions_processed: u64,
    pub actions_malformed: u64,
    pub actions_negligible: u64,
    pub edge_increases: u64,
    pub marginal_evaluations: u64,
    pub rebases: u64,
    pub prunes: PruneStats,
    pub emissions: u64,
    pub result_rows: u64,
    pub elapsed_secs: f64,
    pub throughput_actions_per_sec: f64,
}

impl RunStats {
    fn new(engine: EngineStats, malformed: u64, rows: u64, elapsed: f64) -> Self {
        RunStats {
            actions_processed: engine.actions,
            actions_malformed: malformed,
            actions_negligible: engine.negligible_actions,
            edge_increases: engine.edge_increases,
            marginal_evaluations: engine.marginal_evaluations,
            rebases: engine.rebases,
            prunes: PruneStats {
                first: engine.prunes.first,
                second: engine.prunes.second,
                third: engine.prunes.third,
            },
            emissions: engine.emissions,
            result_rows: rows,
            elapsed_secs: elapsed,
            throughput_actions_per_sec: if elapsed > 0.0 { engine.actions as f64 / elapsed } else { 0.0 },
        }
    }
}

/// Sidecar path next to the result file.
pub fn stats_path(output: &Path) -> PathBuf {
    let mut name = output.as_os_str().to_os_string();
    name.push(".stats.json");
    PathBuf::from(name)
}

/// Builds the configured engine over the loaded catalog.
pub fn build_engine(
    config: &RunConfig,
    profiles: Vec<UserProfile>,
    subscriptions: Vec<(SubscriptionId, BTreeSet<String>)>,
) -> Result<Box<dyn StreamEngine>> {
    let oracle = |mode| OracleConfig {
        k: config.k,
        lambda: config.lambda,
        epsilon: config.epsilon,
        tau_f: config.tau_f,
        base: 1.0,
        t0: None,
        mode,
    };
    Ok(match config.engine {
        EngineKind::Prefix => Box::new(Engine::new(config.engine_config(), Catalog::new(profiles, subscriptions)?)?),
        EngineKind::Naive => Box::new(NaiveMultiSieve::new(oracle(OracleMode::Lazy), &profiles, &subscriptions)),
        EngineKind::Eager => Box::new(NaiveMultiSieve::new(oracle(OracleMode::Eager), &profiles, &subscriptions)),
    })
}

/// Runs a whole stream: results go to `config.output` (stdout if unset), the
/// stats sidecar next to it (stderr if unset).
pub fn run(config: &RunConfig) -> Result<RunStats> {
    config.validate()?;
    let (profiles, _) = match &config.profiles {
        Some(p) => load_profiles(p)?,
        None => (Vec::new(), LoadReport::default()),
    };
    let (subscriptions, _) = match &config.subscriptions {
        Some(p) => load_subscriptions(p)?,
        None => (Vec::new(), LoadReport::default()),
    };
    let mut engine = build_engine(config, profiles, subscriptions)?;
    let out: Box<dyn Write> = match &config.output {
        Some(p) => Box::new(std::io::BufWriter::new(File::create(p).map_err(|source| Error::Io {
            path: p.clone(),
            source,
        })?)),
        None => Box::new(std::io::BufWriter::new(std::io::stdout().lock())),
    };
    let mut writer = ResultWriter::new(out)?;
    let started = Instant::now();
    let (stream, reader) = spawn_action_reader(&config.actions)?;
    let mut rows = 0u64;
    let driven = drive(engine.as_mut(), stream, config.cadence(), |records| {
        for r in &records {
            writer.write(r)?;
        }
        rows += records.len() as u64;
        Ok(())
    });
    let report = reader
        .join()
        .map_err(|_| Error::contract("action reader thread panicked"))??;
    driven?;
    writer.finish()?;
    let stats = RunStats::new(engine.stats(), report.malformed, rows, started.elapsed().as_secs_f64());
    let json = serde_json::to_string_pretty(&stats)?;
    match &config.output {
        Some(p) => {
            let path = stats_path(p);
            std::fs::write(&path, json + "\n").map_err(|source| Error::Io { path, source })?;
        }
        None => eprintln!("{json}"),
    }
    Ok(stats)
}
