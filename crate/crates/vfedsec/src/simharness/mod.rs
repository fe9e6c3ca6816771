//! Experiment driver: seeded dropout injection, pad-versus-discard round
//! scheduling, periodic evaluation, deterministic per-round reporting, and
//! the overhead ledger summary.

pub mod ledger;

pub use ledger::{Direction, OverheadLedger, OverheadTag, Party, RunPhase, OVERHEAD_TAGS};

use crate::config::{DatasetCfg, PartitionCfg, RunConfig};
use crate::datahub::{self, GroupSpec, PartitionSpec, ShardRule};
use crate::neuralnet::{ModelDims, Task};
use crate::protocol::{Engine, EngineParams, RoundMode, RoundOutcome};
use crate::secure_layer::ParticipantId;
use crate::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::collections::BTreeSet;

/// Round-level dropout process: with probability `p_round` at least one
/// client drops, and then a `f_clients` share of the passive pool (at least
/// one client) goes away for the whole round.
#[derive(Debug, Clone, Copy)]
pub struct DropoutModel {
    pub p_round: f64,
    pub f_clients: f64,
}

fn round_half_up(x: f64) -> u64 {
    (x + 0.5).floor() as u64
}

impl DropoutModel {
    /// Deterministic per-round draw from the master seed; pad and discard
    /// runs over the same seed see identical dropout patterns.
    pub fn draw(
        &self,
        master_seed: u64,
        round: u64,
        passive: &[ParticipantId],
    ) -> BTreeSet<ParticipantId> {
        if passive.is_empty() || self.p_round <= 0.0 {
            return BTreeSet::new();
        }
        let mut h = Sha256::new();
        h.update(b"vfedsec-dropout");
        h.update(master_seed.to_le_bytes());
        h.update(round.to_le_bytes());
        let seed: [u8; 32] = h.finalize().into();
        let mut rng = ChaCha20Rng::from_seed(seed);
        if rng.gen::<f64>() >= self.p_round {
            return BTreeSet::new();
        }
        let k = round_half_up(self.f_clients * passive.len() as f64).max(1) as usize;
        let k = k.min(passive.len());
        let mut pool = passive.to_vec();
        pool.shuffle(&mut rng);
        pool.truncate(k);
        pool.into_iter().collect()
    }
}

/// Pad or discard policy for rounds that suffer a dropout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DropPolicy {
    Pad,
    Discard,
}

/// One scheduled round under the chosen policy. Discarded rounds perform no
/// computation beyond detection and leave every parameter untouched.
pub fn run_round(
    engine: &mut Engine,
    round: u64,
    policy: DropPolicy,
    dropped: &BTreeSet<ParticipantId>,
    ledger: &mut OverheadLedger,
) -> Result<RoundOutcome> {
    let dropped_clients: Vec<u32> = dropped.iter().map(|p| p.0).collect();
    if policy == DropPolicy::Discard && !dropped.is_empty() {
        return Ok(RoundOutcome {
            round,
            mode: RoundMode::Discard,
            dropped_clients,
            dropped_groups: engine
                .topology()
                .dropped_groups(dropped)
                .iter()
                .enumerate()
                .filter(|(_, &d)| d)
                .map(|(g, _)| g)
                .collect(),
            loss: None,
            metric: None,
            served: false,
        });
    }
    match engine.train_round(round, dropped, ledger) {
        Ok(trace) => Ok(RoundOutcome {
            round,
            mode: if dropped.is_empty() { RoundMode::Clean } else { RoundMode::Pad },
            dropped_clients,
            dropped_groups: trace.dropped_groups,
            loss: Some(trace.loss),
            metric: None,
            served: true,
        }),
        // Losing every segment degenerates to a discarded round.
        Err(Error::NoSurvivingSegments) => Ok(RoundOutcome {
            round,
            mode: RoundMode::Discard,
            dropped_clients,
            dropped_groups: (0..engine.topology().groups.len()).collect(),
            loss: None,
            metric: None,
            served: false,
        }),
        Err(e) => Err(e),
    }
}

/// Full training report; everything serialized here is deterministic under
/// a fixed fingerprint (wall times live only in the ledger).
#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct TrainReport {
    pub fingerprint: String,
    pub policy: DropPolicy,
    pub secure: bool,
    pub init_metric: f64,
    pub rounds: Vec<RoundOutcome>,
    pub final_metric: f64,
    /// (party, phase, tag, bytes) totals.
    pub byte_ledger: Vec<(String, String, String, u64)>,
}

impl TrainReport {
    /// Newline-delimited records: a header, one record per round, a footer.
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        let header = serde_json::json!({
            "record": "header",
            "fingerprint": self.fingerprint,
            "policy": self.policy,
            "secure": self.secure,
            "init_metric": self.init_metric,
        });
        out.push_str(&header.to_string());
        out.push('\n');
        for r in &self.rounds {
            let mut v = serde_json::to_value(r).expect("round outcome serializes");
            v["record"] = "round".into();
            out.push_str(&v.to_string());
            out.push('\n');
        }
        let footer = serde_json::json!({
            "record": "final",
            "final_metric": self.final_metric,
            "rounds": self.rounds.len(),
            "byte_ledger": self.byte_ledger,
        });
        out.push_str(&footer.to_string());
        out.push('\n');
        out
    }

    /// Comma-separated per-round summary.
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("round,mode,served,dropped_clients,loss,metric\n");
        for r in &self.rounds {
            out.push_str(&format!(
                "{},{:?},{},{},{},{}\n",
                r.round,
                r.mode,
                r.served,
                r.dropped_clients.len(),
                r.loss.map_or(String::from(""), |l| format!("{:.6}", l)),
                r.metric.map_or(String::from(""), |m| format!("{:.6}", m)),
            ));
        }
        out
    }

    /// Metric at a given round (the most recent evaluation at or before it).
    pub fn metric_at_round(&self, round: u64) -> Option<f64> {
        let mut last = None;
        for r in &self.rounds {
            if r.round > round {
                break;
            }
            if let Some(m) = r.metric {
                last = Some(m);
            }
        }
        last.or(Some(self.init_metric))
    }
}

/// Dataset plus partitioning exactly as a run will see them, all derived
/// from the config's seed.
pub fn build_dataset(
    cfg: &RunConfig,
) -> Result<(datahub::Table, PartitionSpec, datahub::Partitioned, Vec<usize>)> {
    let mut data_rng = seeded_stream(cfg.seed, b"data");
    let table = match &cfg.dataset {
        DatasetCfg::Synthetic { rows, features, class_sep } => {
            datahub::synthesize(*rows, *features, *class_sep, cfg.test_fraction, &mut data_rng)?
        }
        DatasetCfg::Csv { path, schema } => {
            let schema = datahub::Schema::from_file(schema)?;
            datahub::load_csv(path, &schema, cfg.test_fraction, &mut data_rng)?
        }
    };

    let shard_rule = if cfg.shard_random { ShardRule::Random } else { ShardRule::RoundRobin };
    let (spec, seg_widths) = match &cfg.partition {
        PartitionCfg::Named { active, groups } => {
            let spec = PartitionSpec {
                active_features: active.clone(),
                groups: groups
                    .iter()
                    .map(|g| GroupSpec { features: g.features.clone(), clients: g.clients })
                    .collect(),
                shard_rule,
                test_fraction: cfg.test_fraction,
            };
            let widths: Vec<usize> = groups.iter().map(|g| g.width).collect();
            (spec, widths)
        }
        PartitionCfg::Random { parts, group_width } => {
            let mut part_rng = seeded_stream(cfg.seed, b"partition");
            let mut spec = datahub::random_feature_partition(&table, *parts, &mut part_rng)?;
            spec.shard_rule = shard_rule;
            spec.test_fraction = cfg.test_fraction;
            let widths = vec![*group_width; spec.groups.len()];
            (spec, widths)
        }
    };

    let mut shard_rng = seeded_stream(cfg.seed, b"shard");
    let parted = datahub::partition(&table, &spec, &mut shard_rng)?;
    Ok((table, spec, parted, seg_widths))
}

/// Reproducibility manifest for the run's feature and shard assignments.
pub fn partition_manifest(cfg: &RunConfig) -> Result<String> {
    let (table, spec, parted, _) = build_dataset(cfg)?;
    Ok(datahub::partition_manifest(&table, &spec, &parted))
}

/// Builds the dataset, partition, and engine described by a config. The
/// `secure` flag lets a caller spin up the unsecured comparator for the
/// same config and seed.
pub fn build_engine(cfg: &RunConfig, secure: bool) -> Result<Engine> {
    let (table, _, parted, seg_widths) = build_dataset(cfg)?;

    let task = if table.n_classes <= 2 { Task::Binary } else { Task::Multiclass(table.n_classes) };
    let dims = ModelDims {
        active_in: parted.active_cols.len(),
        active_hidden: cfg.active_hidden.clone(),
        group_ins: parted.groups.iter().map(|g| g.cols.len()).collect(),
        group_hidden: cfg.group_hidden.clone(),
        seg_widths,
        top_hidden: cfg.top_hidden.clone(),
        out_dim: match task {
            Task::Binary => 1,
            Task::Multiclass(n) => n,
        },
    };
    let params = EngineParams {
        batch: cfg.batch,
        lr: cfg.lr,
        rotate_every: cfg.rotate_every,
        q_embed: cfg.q_embed,
        q_update: cfg.q_update,
        secure,
        master_seed: cfg.seed,
        task,
        trace_embeddings: false,
    };
    Engine::new(table, &parted, &dims, params)
}

fn seeded_stream(seed: u64, label: &[u8]) -> ChaCha20Rng {
    let mut h = Sha256::new();
    h.update(b"vfedsec-harness");
    h.update(seed.to_le_bytes());
    h.update(label);
    let s: [u8; 32] = h.finalize().into();
    ChaCha20Rng::from_seed(s)
}

/// Runs `rounds` training rounds with key rotation, seeded dropout draws,
/// and periodic evaluation, returning the deterministic report.
pub fn run_training(
    engine: &mut Engine,
    cfg: &RunConfig,
    policy: DropPolicy,
    ledger: &mut OverheadLedger,
) -> Result<TrainReport> {
    engine.setup(ledger)?;
    let passive = engine.topology().passive_clients();
    let dropout = DropoutModel { p_round: cfg.p_round, f_clients: cfg.f_clients };

    let init_metric = engine.evaluate(ledger)?;
    let mut rounds = Vec::with_capacity(cfg.rounds as usize);
    let mut last_metric = init_metric;
    for round in 0..cfg.rounds {
        let dropped = dropout.draw(cfg.seed, round, &passive);
        let mut outcome = run_round(engine, round, policy, &dropped, ledger)?;
        if cfg.eval_every > 0 && (round + 1) % cfg.eval_every == 0 {
            let m = engine.evaluate(ledger)?;
            outcome.metric = Some(m);
            last_metric = m;
        }
        ledger.snapshot_round(round);
        rounds.push(outcome);
    }
    if cfg.eval_every == 0 || cfg.rounds == 0 || cfg.rounds % cfg.eval_every.max(1) != 0 {
        last_metric = engine.evaluate(ledger)?;
    }

    Ok(TrainReport {
        fingerprint: cfg.fingerprint(),
        policy,
        secure: engine.params.secure,
        init_metric,
        rounds,
        final_metric: last_metric,
        byte_ledger: ledger.byte_summary(),
    })
}

/// Per-party Total and Overhead columns, bytes and seconds, for training and
/// testing phases. Passive clients are averaged into one row the way the
/// cost tables report them.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub party: String,
    pub phase: String,
    pub total_bytes: u64,
    pub overhead_bytes: u64,
    pub total_secs: f64,
    pub overhead_secs: f64,
    pub baseline_total_bytes: Option<u64>,
}

/// Builds the overhead table from a secure-run ledger, optionally paired
/// with an unsecured comparator ledger from an equal-length run.
pub fn ledger_summary(
    secure: &OverheadLedger,
    baseline: Option<&OverheadLedger>,
    n_clients: u32,
) -> Result<Vec<SummaryRow>> {
    if let Some(b) = baseline {
        if b.snapshots().len() != secure.snapshots().len() {
            return Err(Error::Protocol(format!(
                "ledger round counts differ: {} vs {}",
                secure.snapshots().len(),
                b.snapshots().len()
            )));
        }
    }
    let mut rows = Vec::new();
    for phase in [RunPhase::Train, RunPhase::Test] {
        for party_kind in ["active", "passive", "server"] {
            let (total_bytes, overhead_bytes, total_ns, overhead_ns, baseline_bytes) =
                match party_kind {
                    "active" => (
                        secure.total_bytes(Party::Active, phase),
                        secure.overhead_bytes(Party::Active, phase),
                        secure.total_time_ns(Party::Active, phase),
                        secure.overhead_time_ns(Party::Active, phase),
                        baseline.map(|b| b.total_bytes(Party::Active, phase)),
                    ),
                    "server" => (
                        secure.total_bytes(Party::Server, phase),
                        secure.overhead_bytes(Party::Server, phase),
                        secure.total_time_ns(Party::Server, phase),
                        secure.overhead_time_ns(Party::Server, phase),
                        baseline.map(|b| b.total_bytes(Party::Server, phase)),
                    ),
                    _ => {
                        let n = n_clients.max(1) as u64;
                        let sum = |l: &OverheadLedger, f: &dyn Fn(&OverheadLedger, Party) -> u64| {
                            (1..=n_clients).map(|i| f(l, Party::Client(i))).sum::<u64>()
                        };
                        (
                            sum(secure, &|l, p| l.total_bytes(p, phase)) / n,
                            sum(secure, &|l, p| l.overhead_bytes(p, phase)) / n,
                            sum(secure, &|l, p| l.total_time_ns(p, phase)) / n,
                            sum(secure, &|l, p| l.overhead_time_ns(p, phase)) / n,
                            baseline.map(|b| sum(b, &|l, p| l.total_bytes(p, phase)) / n),
                        )
                    }
                };
            rows.push(SummaryRow {
                party: party_kind.to_string(),
                phase: format!("{:?}", phase),
                total_bytes,
                overhead_bytes,
                total_secs: total_ns as f64 / 1e9,
                overhead_secs: overhead_ns as f64 / 1e9,
                baseline_total_bytes: baseline_bytes,
            });
        }
    }
    Ok(rows)
}

pub fn summary_table_csv(rows: &[SummaryRow]) -> String {
    let mut out =
        String::from("party,phase,total_bytes,overhead_bytes,total_secs,overhead_secs,baseline_total_bytes\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.6},{:.6},{}\n",
            r.party,
            r.phase,
            r.total_bytes,
            r.overhead_bytes,
            r.total_secs,
            r.overhead_secs,
            r.baseline_total_bytes.map_or(String::from(""), |b| b.to_string()),
        ));
    }
    out
}
