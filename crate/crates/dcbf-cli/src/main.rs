//! Benchmark harness: reproduces the library's cost-scaling and exactness
//! experiments and emits machine-readable CSV results.
//!
//! Every experiment writes `<out>_trace.csv` (per-iteration rows, schema
//! `iter,theta_1[,theta_2],outcome,leaf_outputs,leaf_loops,merge_loops,time_ns`)
//! and `<out>_summary.csv` (one row per configuration, schema
//! `n,ell,omega_hat,phi_hat,acf1,acf4,acf16,ess,mean_time_ns`). The time
//! columns report deterministic work units (loop events, coin flips, path
//! evaluations) rather than wall-clock nanoseconds, so reruns with the same
//! seed are byte-identical.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, ValueEnum};

use dcbf::cox::{simulate_lscp, CoxConfig, CoxDataset, CoxSamplerKind};
use dcbf::diffusion::{regular_grid, simulate_tanh_path, DiffusionConfig, DiffusionDataset};
use dcbf::factories::{flip_dcbf, DcbfLeaf, FactorPair, FactoryOpts, PortkeyConfig};
use dcbf::ledger::CostLedger;
use dcbf::mcmc::{write_summary_csv, ChainConfig, ChainTrace, Summary, TraceRow};
use dcbf::partition::PartitionTree;
use dcbf::rng::RandomStream;
use dcbf::{Error, FlipOutcome, WeightedCoin};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Experiment {
    /// 2-coin grid: empirical heads rates and loop counts over nine
    /// weight/probability settings.
    FactoryCheck,
    /// Merge overhead of the balanced factory at a fixed depth.
    OverheadBalanced,
    /// Merge overhead across data sizes with randomized assignment.
    OverheadScaling,
    /// Expected loop count of the monolithic 2-coin as factors accumulate.
    VanillaBlowup,
    /// tanh-drift diffusion pipeline.
    Diffusion,
    /// Level-set Cox process pipeline.
    Cox,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SamplerArg {
    Cgs,
    Ags,
}

#[derive(Debug, Parser)]
#[command(
    name = "dcbf",
    version,
    about = "Divide-and-conquer Bernoulli factory benchmark harness"
)]
struct Cli {
    /// Experiment to run.
    #[arg(value_enum)]
    experiment: Experiment,

    /// Data size (factors, observation segments, or lattice area).
    #[arg(long)]
    n: Option<u64>,

    /// Partition tree depth; defaults to floor(log4 n) where applicable.
    #[arg(long)]
    ell: Option<u32>,

    /// Proposal scale; the samplers use a halfwidth of delta / sqrt(n).
    #[arg(long)]
    delta: Option<f64>,

    /// Portkey parameter: continue-probability at the leaves for the
    /// diffusion factory, initial escape probability for the Cox factory.
    #[arg(long)]
    portkey: Option<f64>,

    /// Recorded iterations (flips or sweeps past burn-in).
    #[arg(long)]
    iters: Option<u64>,

    #[arg(long, default_value_t = 1)]
    seed: u64,

    /// Output path prefix; defaults to the experiment name.
    #[arg(long)]
    out: Option<String>,

    /// Fork-join parallelism inside the factory and the bridge refreshes.
    #[arg(long, default_value_t = false)]
    parallel: bool,

    /// Cox sampler flavour.
    #[arg(long, value_enum, default_value_t = SamplerArg::Cgs)]
    sampler: SamplerArg,

    /// Read the dataset from a file instead of simulating it from the seed
    /// (`t,x` CSV for diffusion; `sx,sy` CSV plus `<stem>.geom` sidecar for
    /// cox).
    #[arg(long)]
    data: Option<PathBuf>,

    /// Flat key=value config file whose entries override the flags.
    #[arg(long)]
    config: Option<PathBuf>,
}

fn apply_config(cli: &mut Cli, path: &PathBuf) -> Result<(), Error> {
    let text = std::fs::read_to_string(path)?;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(Error::Parse {
                what: "config file",
                detail: format!("line {}: expected key=value, got {raw}", lineno + 1),
            });
        };
        let (key, value) = (key.trim(), value.trim());
        let bad = |detail: String| Error::Parse {
            what: "config file",
            detail,
        };
        match key {
            "n" => cli.n = Some(value.parse().map_err(|e| bad(format!("n: {e}")))?),
            "ell" => cli.ell = Some(value.parse().map_err(|e| bad(format!("ell: {e}")))?),
            "delta" => cli.delta = Some(value.parse().map_err(|e| bad(format!("delta: {e}")))?),
            "portkey" => {
                cli.portkey = Some(value.parse().map_err(|e| bad(format!("portkey: {e}")))?)
            }
            "iters" => cli.iters = Some(value.parse().map_err(|e| bad(format!("iters: {e}")))?),
            "seed" => cli.seed = value.parse().map_err(|e| bad(format!("seed: {e}")))?,
            "out" => cli.out = Some(value.to_string()),
            "parallel" => {
                cli.parallel = value.parse().map_err(|e| bad(format!("parallel: {e}")))?
            }
            "sampler" => {
                cli.sampler = match value {
                    "cgs" => SamplerArg::Cgs,
                    "ags" => SamplerArg::Ags,
                    other => return Err(bad(format!("unknown sampler {other}"))),
                }
            }
            "data" => cli.data = Some(PathBuf::from(value)),
            other => return Err(bad(format!("unknown key {other}"))),
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let mut cli = Cli::parse();
    if let Some(path) = cli.config.clone() {
        if let Err(e) = apply_config(&mut cli, &path) {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(
            e @ (Error::BoundViolation { .. }
            | Error::LoopCapExceeded { .. }
            | Error::RejectionCapExceeded { .. }),
        ) => {
            eprintln!("abort: {e}");
            ExitCode::from(3)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn out_prefix(cli: &Cli) -> String {
    cli.out.clone().unwrap_or_else(|| {
        match cli.experiment {
            Experiment::FactoryCheck => "factory-check",
            Experiment::OverheadBalanced => "overhead-balanced",
            Experiment::OverheadScaling => "overhead-scaling",
            Experiment::VanillaBlowup => "vanilla-blowup",
            Experiment::Diffusion => "diffusion",
            Experiment::Cox => "cox",
        }
        .to_string()
    })
}

fn write_trace(path: &str, trace: &ChainTrace) -> Result<(), Error> {
    let mut out = BufWriter::new(File::create(path)?);
    trace.write_csv(&mut out)?;
    out.flush()?;
    Ok(())
}

fn write_summaries(path: &str, rows: &[Summary]) -> Result<(), Error> {
    let mut out = BufWriter::new(File::create(path)?);
    write_summary_csv(&mut out, rows)?;
    out.flush()?;
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    let prefix = out_prefix(cli);
    match cli.experiment {
        Experiment::FactoryCheck => factory_check(cli, &prefix),
        Experiment::OverheadBalanced => overhead_balanced(cli, &prefix),
        Experiment::OverheadScaling => overhead_scaling(cli, &prefix),
        Experiment::VanillaBlowup => vanilla_blowup(cli, &prefix),
        Experiment::Diffusion => diffusion(cli, &prefix),
        Experiment::Cox => cox(cli, &prefix),
    }
}

/// Records one factory flip as a trace row; `theta_1` is the heads
/// indicator.
fn push_flip_row(
    trace: &mut ChainTrace,
    iter: u64,
    outcome: FlipOutcome,
    ledger: &CostLedger,
    before: (u64, u64, u64),
) {
    trace.rows.push(TraceRow {
        iter,
        params: vec![if outcome.is_heads() { 1.0 } else { 0.0 }],
        outcome,
        leaf_outputs: ledger.leaf_output_total() - before.0,
        leaf_loops: ledger.leaf_loop_total() - before.1,
        merge_loops: ledger.merge_loop_total() - before.2,
        time_ns: ledger.work_units(),
    });
}

fn ledger_marks(ledger: &CostLedger) -> (u64, u64, u64) {
    (
        ledger.leaf_output_total(),
        ledger.leaf_loop_total(),
        ledger.merge_loop_total(),
    )
}

fn factory_check(cli: &Cli, prefix: &str) -> Result<(), Error> {
    let iters = cli.iters.unwrap_or(100_000);
    let settings = [
        (1.0, 1.0, 1.0, 1.0),
        (2.0, 0.5, 1.0, 1.0),
        (0.5, 0.3, 0.5, 0.3),
        (0.5, 0.7, 2.0, 0.3),
        (2.0, 0.3, 0.5, 0.7),
        (1.0, 0.9, 1.0, 0.1),
        (3.0, 0.2, 0.7, 0.8),
        (0.1, 1.0, 1.0, 0.05),
        (1.5, 0.6, 1.5, 0.4),
    ];
    let keep = cli.portkey.unwrap_or(1.0);
    let mut stream = RandomStream::new(cli.seed, 0);
    let mut trace = ChainTrace::new(1);
    let mut summaries = Vec::new();
    let mut iter = 0u64;
    for (idx, &(c1, p1, c2, p2)) in settings.iter().enumerate() {
        let mut ledger = CostLedger::new();
        let mut point_trace = ChainTrace::new(1);
        for _ in 0..iters {
            iter += 1;
            let before = ledger_marks(&ledger);
            let mut pair = FactorPair::tractable(c1, p1, c2, p2)?;
            let out = dcbf::factories::flip_two_coin(&mut pair, keep, &mut stream, &mut ledger)?;
            push_flip_row(&mut point_trace, iter, out, &ledger, before);
        }
        summaries.push(Summary::from_trace(&point_trace, (idx + 1) as u64, 0, 1, 0)?);
        trace.rows.extend(point_trace.rows);
    }
    write_trace(&format!("{prefix}_trace.csv"), &trace)?;
    write_summaries(&format!("{prefix}_summary.csv"), &summaries)?;
    Ok(())
}

fn overhead_balanced(cli: &Cli, prefix: &str) -> Result<(), Error> {
    let depth = cli.ell.unwrap_or(3);
    let iters = cli.iters.unwrap_or(100_000);
    let keep = cli.portkey.unwrap_or(1.0);
    let portkey = PortkeyConfig::with_leaf(keep)?;
    let opts = FactoryOpts {
        parallel: cli.parallel,
        ..FactoryOpts::default()
    };
    let mut stream = RandomStream::new(cli.seed, 0);
    let mut ledger = CostLedger::new();
    let mut trace = ChainTrace::new(1);
    for iter in 1..=iters {
        let before = ledger_marks(&ledger);
        let mut leaves: Vec<DcbfLeaf> = (0..1usize << depth)
            .map(|_| Ok(DcbfLeaf::direct(FactorPair::tractable(1.0, 1.0, 1.0, 1.0)?)))
            .collect::<Result<_, Error>>()?;
        let out = flip_dcbf(&mut leaves, &portkey, &opts, &mut stream, &mut ledger)?;
        push_flip_row(&mut trace, iter, out, &ledger, before);
    }
    let summary = Summary::from_trace(&trace, 1 << depth, depth, 1, 0)?;
    write_trace(&format!("{prefix}_trace.csv"), &trace)?;
    write_summaries(&format!("{prefix}_summary.csv"), &[summary])?;
    Ok(())
}

fn overhead_scaling(cli: &Cli, prefix: &str) -> Result<(), Error> {
    let iters = cli.iters.unwrap_or(20_000);
    let delta = cli.delta.unwrap_or(1.0);
    let max_n = cli.n.unwrap_or(256).max(4);
    let opts = FactoryOpts {
        parallel: cli.parallel,
        ..FactoryOpts::default()
    };
    let mut summaries = Vec::new();
    let mut n = 4u64;
    while n <= max_n {
        let depth = cli
            .ell
            .unwrap_or_else(|| PartitionTree::default_depth(n as usize));
        let mut gen = RandomStream::new(cli.seed, 100 + n);
        // Synthetic factor odds mimicking a sqrt(n)-scaled proposal: the
        // current side is flat, the proposed side wiggles on the log scale.
        let f_prop: Vec<f64> = (0..n)
            .map(|_| {
                use rand_distr::Distribution;
                let g: f64 = rand_distr::StandardNormal.sample(&mut gen);
                (delta * g / (n as f64).sqrt()).exp()
            })
            .collect();
        let tree = PartitionTree::build(n as usize, depth)?;
        let mut stream = RandomStream::new(cli.seed, 200 + n);
        let mut shuffle_stream = RandomStream::new(cli.seed, 300 + n);
        let mut ledger = CostLedger::new();
        let mut trace = ChainTrace::new(1);
        for iter in 1..=iters {
            let before = ledger_marks(&ledger);
            let shuffled = tree.shuffled(&mut shuffle_stream);
            let mut leaves = shuffled
                .batches()
                .into_iter()
                .map(|batch| {
                    let prop: f64 = batch.iter().map(|&i| f_prop[i]).product();
                    Ok(DcbfLeaf::direct(FactorPair::new(
                        WeightedCoin::certain(prop)?,
                        WeightedCoin::certain(1.0)?,
                    )?))
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let out = flip_dcbf(
                &mut leaves,
                &PortkeyConfig::off(),
                &opts,
                &mut stream,
                &mut ledger,
            )?;
            push_flip_row(&mut trace, iter, out, &ledger, before);
        }
        summaries.push(Summary::from_trace(&trace, n, depth, 1, 0)?);
        write_trace(&format!("{prefix}_trace_n{n}.csv"), &trace)?;
        n *= 4;
    }
    write_summaries(&format!("{prefix}_summary.csv"), &summaries)?;
    Ok(())
}

fn vanilla_blowup(cli: &Cli, prefix: &str) -> Result<(), Error> {
    let max_n = cli.n.unwrap_or(30);
    let iters = cli.iters.unwrap_or(20_000);
    let p = 0.9;
    let mut summaries = Vec::new();
    let mut stream = RandomStream::new(cli.seed, 0);
    for n in (5..=max_n).step_by(5) {
        let mut ledger = CostLedger::new();
        let mut trace = ChainTrace::new(1);
        for iter in 1..=iters {
            let before = ledger_marks(&ledger);
            let side = || -> Result<WeightedCoin, Error> {
                WeightedCoin::product(
                    (0..n)
                        .map(|_| WeightedCoin::tractable(1.0, p))
                        .collect::<Result<Vec<_>, Error>>()?,
                )
            };
            let mut leaves = vec![DcbfLeaf::direct(FactorPair::new(side()?, side()?)?)];
            let out = flip_dcbf(
                &mut leaves,
                &PortkeyConfig::off(),
                &FactoryOpts::default(),
                &mut stream,
                &mut ledger,
            )?;
            push_flip_row(&mut trace, iter, out, &ledger, before);
        }
        summaries.push(Summary::from_trace(&trace, n, 0, 1, 0)?);
        write_trace(&format!("{prefix}_trace_n{n}.csv"), &trace)?;
    }
    write_summaries(&format!("{prefix}_summary.csv"), &summaries)?;
    Ok(())
}

fn diffusion(cli: &Cli, prefix: &str) -> Result<(), Error> {
    let n = cli.n.unwrap_or(16) as usize;
    let iters = cli.iters.unwrap_or(10_000);
    let dataset = match &cli.data {
        Some(path) => DiffusionDataset::read_csv(BufReader::new(File::open(path)?))?,
        None => {
            let mut gen = RandomStream::new(cli.seed, 100);
            simulate_tanh_path(0.0, &regular_grid(n, 0.25), &mut gen)?
        }
    };
    let n = dataset.segment_count();
    let mut cfg = DiffusionConfig::for_data_size(n)?;
    if let Some(delta) = cli.delta {
        cfg.delta = delta;
    }
    if let Some(depth) = cli.ell {
        cfg.depth = depth;
    }
    if let Some(keep) = cli.portkey {
        cfg.portkey = PortkeyConfig::with_leaf(keep)?;
    }
    cfg.opts.parallel = cli.parallel;
    let depth = cfg.depth;
    let chain = ChainConfig {
        iterations: iters + iters / 10,
        burn_in: iters / 10,
        delta: cfg.delta,
        seed: cli.seed,
        ..ChainConfig::default()
    };
    let trace = dcbf::diffusion::run_diffusion_chain(&dataset, cfg, &chain)?;
    let summary = Summary::from_trace(&trace, n as u64, depth, 1, 0)?;
    let mut data_out = BufWriter::new(File::create(format!("{prefix}_data.csv"))?);
    dataset.write_csv(&mut data_out)?;
    data_out.flush()?;
    write_trace(&format!("{prefix}_trace.csv"), &trace)?;
    write_summaries(&format!("{prefix}_summary.csv"), &[summary])?;
    Ok(())
}

fn cox(cli: &Cli, prefix: &str) -> Result<(), Error> {
    let n = cli.n.unwrap_or(256) as usize;
    let side = (n as f64).sqrt().round() as usize;
    if side * side != n || side % 2 != 0 {
        return Err(Error::InvalidInput(format!(
            "cox data size must be an even perfect square, got {n}"
        )));
    }
    let iters = cli.iters.unwrap_or(10_000);
    let dataset = match &cli.data {
        Some(path) => {
            let geom = path.with_extension("geom");
            let side = CoxDataset::read_geometry(BufReader::new(File::open(&geom)?))?;
            CoxDataset::read_csv(BufReader::new(File::open(path)?), side)?
        }
        None => {
            let mut gen = RandomStream::new(cli.seed, 100);
            simulate_lscp(1.0 / 3.0, 5.0 / 3.0, side, &mut gen)?.0
        }
    };
    let kind = match cli.sampler {
        SamplerArg::Cgs => CoxSamplerKind::Cgs,
        SamplerArg::Ags => CoxSamplerKind::Ags,
    };
    let mut cfg = CoxConfig::new(kind);
    if let Some(delta) = cli.delta {
        cfg.delta = delta;
    }
    cfg.depth = cli.ell;
    if let Some(escape) = cli.portkey {
        cfg.portkey_escape = escape;
    }
    cfg.opts.parallel = cli.parallel;
    let chain = ChainConfig {
        iterations: iters + iters / 10,
        burn_in: iters / 10,
        delta: cfg.delta,
        seed: cli.seed,
        ..ChainConfig::default()
    };
    let levels = cfg.model.levels() as u64;
    let depth = cli
        .ell
        .unwrap_or_else(|| PartitionTree::default_depth(dataset.side * dataset.side));
    let run = dcbf::cox::run_cox_chain(&dataset, cfg, &chain)?;
    // Diagnostics on the last intensity column, matching the reported
    // series of the scaling study.
    let summary = Summary::from_trace(
        &run.trace,
        (dataset.side * dataset.side) as u64,
        depth,
        levels,
        levels as usize - 1,
    )?;
    let mut data_out = BufWriter::new(File::create(format!("{prefix}_data.csv"))?);
    dataset.write_csv(&mut data_out)?;
    data_out.flush()?;
    let mut geom_out = BufWriter::new(File::create(format!("{prefix}_data.geom"))?);
    dataset.write_geometry(&mut geom_out)?;
    geom_out.flush()?;
    let mut field_out = BufWriter::new(File::create(format!("{prefix}_field.csv"))?);
    run.sampler.state.field.write_csv(&mut field_out)?;
    field_out.flush()?;
    write_trace(&format!("{prefix}_trace.csv"), &run.trace)?;
    write_summaries(&format!("{prefix}_summary.csv"), &[summary])?;
    Ok(())
}
