use std::path::PathBuf;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::Parser;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hamsi::harness::{self, Delimiter, IdOrder, RatingsFile};
use hamsi::optimizer::{self, default_subsets, CorrectionPair, GradientScale, SnapshotScope, UpdateMode};
use hamsi::{build_cover, Algorithm, RunConfig, ScheduleMode, Scheme};

/// Factorize a ratings matrix with HAMSI or mini-batch gradient descent.
#[derive(Debug, Parser)]
#[command(name = "hamsi", version)]
struct Args {
    /// Ratings file.
    #[arg(long)]
    input: PathBuf,
    /// tab | double-colon | comma
    #[arg(long, default_value = "tab")]
    format: Delimiter,
    /// Skip the first line of the input.
    #[arg(long)]
    header: bool,
    /// Dense index order: first-seen | sorted
    #[arg(long, default_value = "first-seen")]
    id_order: IdOrder,
    #[arg(long, default_value_t = 50)]
    rank: usize,
    /// hamsi | mbgd
    #[arg(long, default_value = "hamsi")]
    algorithm: Algorithm,
    /// hogwild | color | color-b | strata | strata-b
    #[arg(long, default_value = "strata-b")]
    scheme: Scheme,
    /// Number of subsets K (default: 20, or the thread count for strata schemes).
    #[arg(long)]
    subsets: Option<usize>,
    #[arg(long, default_value_t = 1)]
    threads: usize,
    /// Default: 0.06 for hamsi, 0.001 for mbgd.
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long, default_value_t = 0.51)]
    gamma: f64,
    /// L-BFGS memory size.
    #[arg(long, default_value_t = 8)]
    memory: usize,
    /// det | stoc
    #[arg(long, default_value = "det")]
    schedule: ScheduleMode,
    /// Default: 100 when no time budget is given.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    max_seconds: Option<f64>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Initial factor entries are uniform in [0, init-scale/sqrt(rank)).
    #[arg(long, default_value_t = 1.0)]
    init_scale: f64,
    /// Store a correction pair only if s'y > c |s| |y| (0: s'y > 0).
    #[arg(long, default_value_t = 0.0)]
    min_curvature_cosine: f64,
    /// at-gradient | after-step
    #[arg(long, default_value = "at-gradient")]
    pair: CorrectionPair,
    /// full | touched
    #[arg(long, default_value = "full")]
    snapshot: SnapshotScope,
    /// Write the trace CSV here instead of standard output.
    #[arg(long)]
    trace: Option<PathBuf>,
    /// Per-block restricted updates instead of one full-vector step.
    #[arg(long)]
    strict_blocks: bool,
    /// Divide gradients by the number of ratings (mean) or not (sum).
    #[arg(long, default_value = "mean", value_parser = parse_scale)]
    gradient_scale: GradientScale,
    /// Count RMSE evaluation time against --max-seconds.
    #[arg(long)]
    count_eval_time: bool,
    /// Print per-subset block sizes and parWork to standard error.
    #[arg(long)]
    cover_summary: bool,
    /// Write X1 and X2 to <prefix>.x1.bin and <prefix>.x2.bin.
    #[arg(long)]
    dump_factors: Option<PathBuf>,
    /// Append `scheme,threads,gradient_seconds` to this CSV.
    #[arg(long)]
    timings: Option<PathBuf>,
}

fn parse_scale(s: &str) -> Result<GradientScale, String> {
    match s {
        "mean" => Ok(GradientScale::Mean),
        "sum" => Ok(GradientScale::Sum),
        _ => Err(format!("unknown gradient scale `{s}`")),
    }
}

fn main() -> Result<()> {
    let args = Args::parse();

    let file = RatingsFile::new(&args.input, args.format).with_header(args.header);
    let loaded =
        harness::load_ratings(&file, args.id_order).with_context(|| format!("loading {}", args.input.display()))?;
    let obs = loaded.obs;
    eprintln!(
        "loaded {} ratings, {} rows, {} columns",
        obs.len(),
        obs.num_rows(),
        obs.num_cols()
    );

    let k = args
        .subsets
        .unwrap_or_else(|| default_subsets(args.scheme, args.threads));
    if k == 0 {
        bail!("--subsets must be at least 1");
    }
    if args.scheme.is_stratified() && k > obs.num_rows().min(obs.num_cols()) {
        bail!(
            "--subsets {k} exceeds min(rows, cols) = {} for {}",
            obs.num_rows().min(obs.num_cols()),
            args.scheme
        );
    }
    if !args.scheme.is_stratified() && k > obs.len() {
        bail!("--subsets {k} exceeds the number of ratings");
    }

    let base = match args.algorithm {
        Algorithm::Hamsi => RunConfig::hamsi(),
        Algorithm::MbGd => RunConfig::mbgd(),
    };
    let config = RunConfig {
        rank: args.rank,
        eta: args.eta.unwrap_or(base.eta),
        gamma: args.gamma,
        memory: args.memory,
        schedule: args.schedule,
        threads: args.threads,
        max_epochs: match (args.max_epochs, args.max_seconds) {
            (None, None) => Some(100),
            (e, _) => e,
        },
        max_seconds: args.max_seconds,
        seed: args.seed,
        init_scale: args.init_scale,
        min_curvature_cosine: args.min_curvature_cosine,
        pair: args.pair,
        snapshot: args.snapshot,
        update: if args.strict_blocks {
            UpdateMode::StrictBlocks
        } else {
            UpdateMode::Lazy
        },
        gradient_scale: args.gradient_scale,
        count_eval_time: args.count_eval_time,
        ..base
    };
    config.validate()?;

    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let cover = build_cover(&obs, args.scheme, k, &mut rng)?;
    eprintln!(
        "built {} cover with {} subsets in {:.3}s",
        args.scheme,
        cover.num_subsets(),
        started.elapsed().as_secs_f64()
    );
    if args.cover_summary {
        eprint!("{}", cover.summary(args.threads)?);
    }

    let outcome = optimizer::run(&config, &obs, &cover)?;

    match &args.trace {
        Some(path) => harness::write_trace(&outcome.trace, path)?,
        None => harness::write_trace_to(std::io::stdout().lock(), &outcome.trace)?,
    }
    if let Some(prefix) = &args.dump_factors {
        let (p1, p2) = harness::dump_factors(&outcome.model, prefix)?;
        eprintln!("wrote {} and {}", p1.display(), p2.display());
    }
    if let Some(path) = &args.timings {
        harness::append_timing(
            path,
            args.scheme.name(),
            args.threads,
            outcome.stats.totals.gradient_seconds,
        )?;
    }
    let final_rmse = match outcome.trace.last() {
        Some(r) => r.rmse,
        None => hamsi::model::rmse(&outcome.model, obs.entries())?,
    };
    println!("final rmse {final_rmse}");
    Ok(())
}
