//! Command-line front end: `train`, `eval`, and `bench-mask`.
//!
//! Exit codes: 0 on success, 2 on configuration or validation errors, 3 on
//! runtime protocol errors.

use crate::config::{RunConfig, RunMode};
use crate::neuralnet::SplitModel;
use crate::qcode::{dequantize_sum, quantize_matrix, QConfig, RealMatrix};
use crate::secure_layer::{
    gen_keypair, keypair_rng, mask_tensor, self_noise, unmask_aggregate, KeyPair, NoiseTag,
    PairPool, ParticipantId, Phase, ACTIVE_ID,
};
use crate::simharness::{
    build_engine, ledger_summary, run_training, summary_table_csv, DropPolicy, OverheadLedger,
};
use crate::Error;
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

#[derive(Parser)]
#[command(name = "vfedsec", version, about = "Dropout-tolerant vertical federated learning simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a training experiment from a config file.
    Train(TrainArgs),
    /// Evaluate a saved checkpoint on the config's test split.
    Eval(EvalArgs),
    /// Compare the quantize+mask+unmask+dequantize path against a plain
    /// matrix multiplication of the same shape.
    BenchMask(BenchArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// Config file with dotted keys (see configs/ for examples).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run on a built-in synthetic dataset without a config file.
    #[arg(long)]
    synthetic: bool,
    /// Dropout policy override: pad, discard, or both.
    #[arg(long)]
    mode: Option<String>,
    /// Master seed override (also honors VFEDSEC_SEED).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory override.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Round count override.
    #[arg(long)]
    rounds: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    config: PathBuf,
    /// Model checkpoint produced by `train`.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct BenchArgs {
    /// Batch dimension of the input tensor.
    #[arg(long, default_value_t = 256)]
    batch: usize,
    /// Width of the input tensor and the square weight.
    #[arg(long, default_value_t = 8)]
    width: usize,
    #[arg(long, default_value_t = 10)]
    trials: usize,
}

fn exit_code_for(e: &Error) -> i32 {
    match e {
        Error::Config { .. } | Error::Data(_) | Error::Csv(_) => 2,
        _ => 3,
    }
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::BenchMask(args) => cmd_bench_mask(args),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", e);
            exit_code_for(&e)
        }
    }
}

fn load_config(args: &TrainArgs) -> crate::Result<RunConfig> {
    let mut overrides: BTreeMap<String, String> = BTreeMap::new();
    if let Ok(env_seed) = std::env::var("VFEDSEC_SEED") {
        overrides.insert("run.seed".into(), env_seed);
    }
    if let Some(seed) = args.seed {
        overrides.insert("run.seed".into(), seed.to_string());
    }
    if let Some(mode) = &args.mode {
        overrides.insert("run.mode".into(), mode.clone());
    }
    if let Some(out) = &args.out {
        overrides.insert("run.out".into(), out.display().to_string());
    }
    if let Some(rounds) = args.rounds {
        overrides.insert("train.rounds".into(), rounds.to_string());
    }
    match (&args.config, args.synthetic) {
        (Some(path), _) => RunConfig::from_file(path, &overrides),
        (None, true) => {
            let mut map = RunConfig::synthetic_defaults();
            map.extend(overrides);
            RunConfig::from_map(map)
        }
        (None, false) => Err(Error::config("--config", "provide a config file or --synthetic")),
    }
}

fn cmd_train(args: TrainArgs) -> crate::Result<()> {
    let cfg = load_config(&args)?;
    std::fs::create_dir_all(&cfg.out)?;
    let policies: Vec<DropPolicy> = match cfg.mode {
        RunMode::Pad => vec![DropPolicy::Pad],
        RunMode::Discard => vec![DropPolicy::Discard],
        RunMode::Both => vec![DropPolicy::Pad, DropPolicy::Discard],
    };
    println!("fingerprint: {}", cfg.fingerprint());
    std::fs::write(cfg.out.join("partition.txt"), crate::simharness::partition_manifest(&cfg)?)?;

    for policy in policies {
        let label = match policy {
            DropPolicy::Pad => "pad",
            DropPolicy::Discard => "discard",
        };
        let mut engine = build_engine(&cfg, cfg.secure)?;
        let mut ledger = OverheadLedger::new();
        let report = run_training(&mut engine, &cfg, policy, &mut ledger)?;

        let report_path = cfg.out.join(format!("report_{}.ndjson", label));
        std::fs::write(&report_path, report.to_ndjson())?;
        let csv_path = cfg.out.join(format!("rounds_{}.csv", label));
        std::fs::write(&csv_path, report.summary_csv())?;
        let ckpt_path = cfg.out.join(format!("model_{}.ckpt", label));
        std::fs::write(&ckpt_path, engine.checkpoint())?;

        let n_clients = engine.topology().passive_clients().len() as u32;
        let baseline_ledger = if cfg.baseline_compare {
            let mut base_engine = build_engine(&cfg, false)?;
            let mut base_ledger = OverheadLedger::new();
            run_training(&mut base_engine, &cfg, policy, &mut base_ledger)?;
            Some(base_ledger)
        } else {
            None
        };
        let rows = ledger_summary(&ledger, baseline_ledger.as_ref(), n_clients)?;
        let overhead_path = cfg.out.join(format!("overhead_{}.csv", label));
        std::fs::write(&overhead_path, summary_table_csv(&rows))?;

        println!(
            "{}: init_metric={:.4} final_metric={:.4} rounds={} report={}",
            label,
            report.init_metric,
            report.final_metric,
            report.rounds.len(),
            report_path.display()
        );
    }
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> crate::Result<()> {
    let mut overrides = BTreeMap::new();
    if let Ok(env_seed) = std::env::var("VFEDSEC_SEED") {
        overrides.insert("run.seed".to_string(), env_seed);
    }
    if let Some(seed) = args.seed {
        overrides.insert("run.seed".to_string(), seed.to_string());
    }
    let cfg = RunConfig::from_file(&args.config, &overrides)?;
    let mut engine = build_engine(&cfg, cfg.secure)?;
    let bytes = std::fs::read(&args.checkpoint)?;
    // Width mismatches are configuration errors.
    let model = SplitModel::decode(&bytes)
        .map_err(|e| Error::config("checkpoint", e.to_string()))?;
    if model.seg_widths != engine.model().seg_widths {
        return Err(Error::config(
            "checkpoint",
            "segment widths do not match the config's topology",
        ));
    }
    engine.restore(&bytes).map_err(|e| Error::config("checkpoint", e.to_string()))?;
    let mut ledger = OverheadLedger::new();
    engine.setup(&mut ledger)?;
    let metric = engine.evaluate(&mut ledger)?;
    println!("metric: {:.6}", metric);
    Ok(())
}

fn cmd_bench_mask(args: BenchArgs) -> crate::Result<()> {
    if args.trials == 0 {
        return Err(Error::config("--trials", "need at least one trial"));
    }
    let b = args.batch;
    let w = args.width;
    let cfg = QConfig::default();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    let x = RealMatrix::from_fn(b, w, |_, _| rng.gen_range(-2.0..2.0));
    let weight = RealMatrix::from_fn(w, w, |_, _| rng.gen_range(-1.0..1.0));

    // Two-member pool: the active party and one client.
    let keypairs: std::collections::BTreeMap<ParticipantId, KeyPair> = [0u32, 1]
        .into_iter()
        .map(|i| {
            let p = ParticipantId(i);
            (p, gen_keypair(&mut keypair_rng(1, p, 0)))
        })
        .collect();
    let pool = PairPool::from_keypairs(0, &keypairs, 0)?;
    let client = ParticipantId(1);

    let mut plain_times = Vec::with_capacity(args.trials);
    let mut masked_times = Vec::with_capacity(args.trials);
    for trial in 0..args.trials {
        let start = Instant::now();
        let y = x.matmul(&weight);
        std::hint::black_box(&y);
        plain_times.push(start.elapsed().as_secs_f64());

        let start = Instant::now();
        let tag = NoiseTag::new(0, trial as u64, Phase::ForwardEmbedding, b, w);
        let q = quantize_matrix(&x, &cfg, &mut rng)?;
        let zeros = quantize_matrix(&RealMatrix::zeros(b, w), &cfg, &mut rng)?;
        let masked_client = mask_tensor(&q, &self_noise(client, &pool, &tag)?)?;
        let masked_active = mask_tensor(&zeros, &self_noise(ACTIVE_ID, &pool, &tag)?)?;
        let summed = unmask_aggregate(&[masked_client, masked_active], true)?;
        let decoded = dequantize_sum(&summed, 2, &cfg)?;
        std::hint::black_box(&decoded);
        masked_times.push(start.elapsed().as_secs_f64());
    }

    let stats = |v: &[f64]| {
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / v.len() as f64;
        (mean, var.sqrt())
    };
    let (pm, ps) = stats(&plain_times);
    let (mm, ms) = stats(&masked_times);
    println!("shape: ({}, {}) x ({}, {}), {} trials", b, w, w, w, args.trials);
    println!("plain matmul:        mean {:.3} ms, std {:.3} ms", pm * 1e3, ps * 1e3);
    println!("quantize+mask+unmask+dequantize: mean {:.3} ms, std {:.3} ms", mm * 1e3, ms * 1e3);
    println!("masked/plain ratio:  {:.2}x", mm / pm);
    println!("homomorphic-encryption comparison: out of scope (no HE backend)");
    Ok(())
}
