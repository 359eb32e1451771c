mod config;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;

use deepgraph::archive::{read_archive, read_header, ArchiveHeader, ArchiveWriter};
use deepgraph::baselines::{
    default_lambda_grid, default_ridge, graphical_lasso_cv, graphical_lasso_with, ledoit_wolf, threshold_partial_corr,
    GlassoOptions,
};
use deepgraph::dnet::{receptive_field, DNetModel};
use deepgraph::eval::{
    edge_selection_likelihood_curve, run_benchmark, write_curve_csv, write_report_csv, CurveOptions, Method,
    MethodContext, MetricRecord,
};
use deepgraph::graph_sim::{sample_data, sample_precision, DatasetStream};
use deepgraph::infer::{covariance_of, predict_covariance, predict_ensemble, write_edge_csv, Aggregator, EdgeScoreMatrix, PermutationSpec};
use deepgraph::linalg::{standardize, Matrix, SpdMatrix, SymmetricMatrix};
use deepgraph::seed::{derive_rng, derive_seed};
use deepgraph::train::{fine_tune, finetune_mixture, train_loop};

use config::FileConfig;

/// Environment variable that overrides the output directory.
const OUT_DIR_ENV: &str = "DEEPGRAPH_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "deepgraph", version, about = "Learned structure discovery for sparse Gaussian graphical models")]
struct Cli {
    /// TOML experiment configuration.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Root seed; every component derives its own stream from it.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (also settable through DEEPGRAPH_OUT_DIR).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Upper bound on worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// More log output (repeatable).
    #[arg(long, short, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a dataset archive of (covariance, graph) training examples.
    Gen {
        /// Number of examples; defaults to the dataset section.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Train a network on freshly streamed examples.
    Train,
    /// One epoch of small-world plus uniform-sparse updates on a trained network.
    Finetune {
        /// Pretrained model file.
        #[arg(long)]
        model: PathBuf,
    },
    /// Edge probabilities for a data or covariance matrix.
    Predict {
        /// Trained model file.
        #[arg(long)]
        model: PathBuf,
        /// Matrix text file: data rows, or a covariance with --covariance.
        #[arg(long)]
        input: PathBuf,
        /// Treat the input as a covariance matrix.
        #[arg(long)]
        covariance: bool,
        /// Average over this many random variable orderings.
        #[arg(long)]
        permutations: Option<usize>,
    },
    /// Classical estimators on a data or covariance matrix.
    Baseline {
        #[arg(long, value_enum)]
        method: BaselineMethod,
        /// Matrix text file: data rows, or a covariance with --covariance.
        #[arg(long)]
        input: PathBuf,
        /// Treat the input as a covariance matrix.
        #[arg(long)]
        covariance: bool,
        /// Penalty for `glasso`.
        #[arg(long)]
        lambda: Option<f64>,
        /// Cross-validation folds for `glasso-cv`.
        #[arg(long, default_value_t = 5)]
        folds: usize,
    },
    /// Repeated-trial comparison over the configured scenarios.
    Benchmark {
        /// Trained model; required by the deepgraph methods.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Held-out likelihood against the number of selected edges.
    #[command(alias = "plot-data")]
    Curve {
        /// Data matrix; synthetic data from the generator section otherwise.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Trained model whose edge ranking is added to the curve.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Summarize a model file or dataset archive.
    Inspect {
        /// A `.dgnn` model or `.sgld` dataset archive.
        path: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BaselineMethod {
    GlassoCv,
    Glasso,
    Pcorr,
    LedoitWolf,
}

struct Ctx {
    cfg: FileConfig,
    seed: u64,
    out: PathBuf,
    threads: usize,
}

impl Ctx {
    fn output(&self, name: &str) -> Result<PathBuf> {
        fs::create_dir_all(&self.out).with_context(|| format!("creating {}", self.out.display()))?;
        Ok(self.out.join(name))
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn read_matrix(path: &Path) -> Result<Matrix> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    Matrix::read_text(BufReader::new(f)).with_context(|| format!("parsing {}", path.display()))
}

fn load_model(path: &Path) -> Result<DNetModel<f32>> {
    DNetModel::load(path).with_context(|| format!("loading model {}", path.display()))
}

fn input_covariance(path: &Path, is_covariance: bool) -> Result<SymmetricMatrix> {
    let m = read_matrix(path)?;
    if is_covariance {
        Ok(SymmetricMatrix::new(m).context("covariance input must be square and symmetric")?)
    } else {
        Ok(covariance_of(&m)?)
    }
}

fn write_scores(ctx: &Ctx, scores: &EdgeScoreMatrix) -> Result<()> {
    let txt = ctx.output("scores.txt")?;
    scores.as_symmetric().as_matrix().write_text(create(&txt)?)?;
    let csv = ctx.output("edges.csv")?;
    write_edge_csv(scores, create(&csv)?)?;
    println!("wrote {} and {}", txt.display(), csv.display());
    Ok(())
}

fn cmd_gen(ctx: &Ctx, count: Option<usize>) -> Result<()> {
    let gen = ctx.cfg.generator.build(derive_seed(ctx.seed, "gen", 0))?;
    let count = count.unwrap_or(ctx.cfg.dataset.count);
    let path = ctx.output("dataset.sgld")?;
    let header = ArchiveHeader { p: gen.p, n: gen.n, family: gen.family, seed: gen.seed };
    let mut w = ArchiveWriter::new(create(&path)?, &header)?;
    let mut stream = DatasetStream::new(gen.clone())?;
    let (mut sparsity, mut blocks) = (0.0, 0usize);
    for k in 0..count {
        if k % gen.draws_per_theta == 0 {
            sparsity += stream.precision_at((k / gen.draws_per_theta) as u64).graph.sparsity();
            blocks += 1;
        }
        w.write(&stream.next().expect("stream is unbounded")?)?;
    }
    w.finish()?.flush()?;
    println!(
        "family {} p {} n {} examples {} mean sparsity {:.4} -> {}",
        gen.family,
        gen.p,
        gen.n,
        count,
        if blocks > 0 { sparsity / blocks as f64 } else { f64::NAN },
        path.display()
    );
    Ok(())
}

fn cmd_train(ctx: &Ctx) -> Result<()> {
    let gen = ctx.cfg.generator.build(derive_seed(ctx.seed, "gen", 0))?;
    let net = ctx.cfg.net.build(gen.p)?;
    net.validate().context("network rejected before training")?;
    let mut tc = ctx.cfg.train.clone();
    tc.seed = derive_seed(ctx.seed, "train", 0);
    let model = DNetModel::<f32>::init(net.clone(), &mut derive_rng(ctx.seed, "init", 0))?;
    info!("training {:?} ({} parameters, receptive field {})", net, model.num_params(), receptive_field(&net));
    let mut stream = DatasetStream::new(gen)?;
    let (model, history) = train_loop(model, &mut stream, &tc)?;
    let model_path = ctx.output("model.dgnn")?;
    model.save(&model_path)?;
    let hist_path = ctx.output("history.csv")?;
    history.write_csv(create(&hist_path)?)?;
    let best = history.best().context("training produced no validation pass")?;
    println!(
        "best val loss {:.5} auc {:.4} at step {} ({} examples seen, stop {:?}) -> {}",
        best.val_loss,
        best.val_auc,
        best.step,
        history.rows.last().map_or(0, |r| r.examples_seen),
        history.stop,
        model_path.display()
    );
    Ok(())
}

fn cmd_finetune(ctx: &Ctx, model: &Path) -> Result<()> {
    let base = load_model(model)?;
    let gen = ctx.cfg.generator.build(derive_seed(ctx.seed, "gen", 0))?;
    if gen.p != base.p_train() {
        bail!("generator p = {} but the model expects {}", gen.p, base.p_train());
    }
    let mut ft = ctx.cfg.finetune.clone();
    ft.seed = derive_seed(ctx.seed, "finetune", 0);
    let mixture = finetune_mixture(&gen, &ft)?;
    let (tuned, consumed) = fine_tune(base, &mixture, &ft, ctx.cfg.train.label_mode)?;
    let path = ctx.output("finetuned.dgnn")?;
    tuned.save(&path)?;
    println!("fine-tuned on {consumed} examples -> {}", path.display());
    Ok(())
}

fn cmd_predict(ctx: &Ctx, model: &Path, input: &Path, is_cov: bool, perms: Option<usize>) -> Result<()> {
    let model = load_model(model)?;
    let sigma = input_covariance(input, is_cov)?;
    let count = perms.unwrap_or(ctx.cfg.predict.permutations);
    let aggregator = match ctx.cfg.predict.aggregator.as_str() {
        "mean" => Aggregator::Mean,
        "median" => Aggregator::Median,
        other => bail!("predict.aggregator: expected mean or median, got {other:?}"),
    };
    let scores = if count <= 1 {
        predict_covariance(&model, &sigma)?
    } else {
        let spec = PermutationSpec { count, include_identity: true, seed: derive_seed(ctx.seed, "eval", 0) };
        predict_ensemble(&model, &sigma, &spec, aggregator)?
    };
    write_scores(ctx, &scores)
}

fn cmd_baseline(ctx: &Ctx, method: BaselineMethod, input: &Path, is_cov: bool, lambda: Option<f64>, folds: usize) -> Result<()> {
    let raw = read_matrix(input)?;
    let needs_data = matches!(method, BaselineMethod::GlassoCv | BaselineMethod::LedoitWolf);
    if needs_data && is_cov {
        bail!("{method:?} needs a data matrix, not a covariance");
    }
    let sigma = if is_cov { SymmetricMatrix::new(raw.clone())? } else { covariance_of(&raw)? };
    let opts = GlassoOptions::default();
    let (theta, scores): (SpdMatrix, EdgeScoreMatrix) = match method {
        BaselineMethod::GlassoCv => {
            let grid = default_lambda_grid(&sigma, 20, 0.01, 1.0);
            let cv = graphical_lasso_cv(&raw, folds, &grid, &opts)?;
            println!("cross-validated lambda {:.6}", cv.result.lambda);
            let s = cv.result.edge_scores();
            (cv.result.theta, s)
        }
        BaselineMethod::Glasso => {
            let lambda = lambda.context("--lambda is required for glasso")?;
            let r = graphical_lasso_with(&sigma, lambda, &opts, None)?;
            if !r.converged {
                log::warn!("glasso did not converge in {} sweeps", r.iterations);
            }
            let s = r.edge_scores();
            (r.theta, s)
        }
        BaselineMethod::Pcorr => {
            let ridge = default_ridge(&sigma);
            let s = threshold_partial_corr(&sigma, ridge);
            let ridged = Matrix::from_fn(sigma.dim(), sigma.dim(), |i, j| sigma.get(i, j) + if i == j { ridge } else { 0.0 });
            (SpdMatrix::from_matrix(ridged)?.inverse(), s)
        }
        BaselineMethod::LedoitWolf => {
            let lw = ledoit_wolf(&standardize(&raw)?)?;
            println!("shrinkage {:.6}", lw.shrinkage);
            let s = lw.edge_scores();
            (SpdMatrix::new(lw.covariance)?.inverse(), s)
        }
    };
    let path = ctx.output("theta.txt")?;
    theta.as_symmetric().as_matrix().write_text(create(&path)?)?;
    let csv = ctx.output("edges.csv")?;
    write_edge_csv(&scores, create(&csv)?)?;
    println!("wrote {} and {}", path.display(), csv.display());
    Ok(())
}

fn parse_methods(names: &[String]) -> Result<Vec<Method>> {
    names.iter().map(|s| s.parse::<Method>().map_err(anyhow::Error::from)).collect()
}

fn cmd_benchmark(ctx: &Ctx, model_flag: Option<&Path>) -> Result<()> {
    let b = &ctx.cfg.benchmark;
    if b.scenarios.is_empty() {
        bail!("benchmark: no [[benchmark.scenario]] entries in the config");
    }
    let methods = parse_methods(&b.methods)?;
    let model_path = model_flag.map(Path::to_path_buf).or_else(|| b.model.clone());
    let model = match (&model_path, methods.iter().any(|m| m.needs_model())) {
        (Some(p), true) => Some(load_model(p)?),
        (None, true) => bail!("benchmark: network methods requested but no model file given"),
        _ => None,
    };
    let mut mctx = MethodContext::new(model.as_ref());
    mctx.permutations = PermutationSpec { count: b.permutations, include_identity: true, seed: derive_seed(ctx.seed, "eval", 0) };
    mctx.cv_folds = b.folds;
    mctx.lambda_grid_size = b.lambda_grid;
    let mut records: Vec<MetricRecord> = Vec::new();
    for (k, section) in b.scenarios.iter().enumerate() {
        let scenario = section.build(&ctx.cfg.generator, ctx.seed, k)?;
        info!("scenario {} ({} trials)", scenario.name, scenario.trials);
        records.extend(run_benchmark(&mctx, &scenario, &methods, ctx.threads)?);
    }
    let csv = ctx.output("report.csv")?;
    write_report_csv(&records, create(&csv)?)?;
    let json = ctx.output("report.json")?;
    serde_json::to_writer_pretty(create(&json)?, &records)?;
    for r in &records {
        let prec: Vec<String> = r.prec_at_k.iter().map(|p| format!("prec@{} {:.3}±{:.3}", p.fraction, p.mean, p.stderr)).collect();
        println!(
            "{:<16} {:<28} auc {:.3}±{:.3} {} ce {:.3} median {:.4}s trials {}",
            r.method,
            r.scenario,
            r.auc,
            r.auc_stderr,
            prec.join(" "),
            r.calibration_error,
            r.wall_seconds,
            r.trials
        );
    }
    println!("wrote {} and {}", csv.display(), json.display());
    let failed: usize = records.iter().map(|r| r.failures.len()).sum();
    if failed > 0 {
        bail!("{failed} method-trial evaluations failed; see the failures field of {}", json.display());
    }
    Ok(())
}

fn cmd_curve(ctx: &Ctx, input: Option<&Path>, model_flag: Option<&Path>) -> Result<()> {
    let c = &ctx.cfg.curve;
    let methods = parse_methods(&c.methods)?;
    let model_path = model_flag.map(Path::to_path_buf).or_else(|| c.model.clone());
    let model = match model_path {
        Some(p) => Some(load_model(&p)?),
        None => None,
    };
    let (data, truth) = match input {
        Some(path) => (read_matrix(path)?, None),
        None => {
            let gen = ctx.cfg.generator.build(derive_seed(ctx.seed, "gen", 0))?;
            let mut rng = derive_rng(ctx.seed, "eval", 0);
            let ps = sample_precision(&gen, &mut rng);
            let x = sample_data(&ps.theta, c.samples, gen.distribution(), &mut rng);
            (x, Some(ps))
        }
    };
    let mctx = MethodContext::new(model.as_ref());
    let opts = CurveOptions {
        k_list: c.k_list.clone(),
        splits: c.splits,
        selection_size: c.selection_size,
        seed: derive_seed(ctx.seed, "eval", 1),
        ..CurveOptions::default()
    };
    let series = edge_selection_likelihood_curve(&mctx, &data, truth.as_ref(), &methods, &opts)?;
    let path = ctx.output("curve.csv")?;
    write_curve_csv(&series, create(&path)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_inspect(path: &Path) -> Result<()> {
    let mut magic = [0u8; 4];
    File::open(path).with_context(|| format!("opening {}", path.display()))?.read_exact(&mut magic)?;
    match &magic {
        b"DGNN" => {
            let m = load_model(path)?;
            let cfg = m.config();
            println!("model {}", path.display());
            println!("  p {} depth {} feature maps {} schedule {:?}", cfg.p, cfg.depth, cfg.feature_maps, cfg.dilation_schedule);
            println!("  dilations {:?} receptive field {}", cfg.dilations(), receptive_field(cfg));
            println!("  parameters {}", m.num_params());
        }
        b"SGLD" => {
            let mut r = BufReader::new(File::open(path)?);
            let h = read_header(&mut r)?;
            let (_, examples) = read_archive(BufReader::new(File::open(path)?))?;
            let edges: usize = examples.iter().map(|e| e.y_binary.iter().filter(|&&v| v).count()).sum();
            let cells: usize = examples.iter().map(|e| e.y_binary.len()).sum();
            println!("archive {}", path.display());
            println!("  family {} p {} n {} seed {}", h.family, h.p, h.n, h.seed);
            println!("  examples {} mean sparsity {:.4}", examples.len(), 1.0 - edges as f64 / cells.max(1) as f64);
        }
        _ => bail!("{} is neither a model file nor a dataset archive", path.display()),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => FileConfig::load(p)?,
        None => FileConfig::default(),
    };
    let out = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).map(PathBuf::from))
        .or_else(|| cfg.out_dir.clone())
        .unwrap_or_else(|| PathBuf::from("out"));
    let seed = cli.seed.or(cfg.seed).unwrap_or(0);
    let threads = cli.threads.or(cfg.threads).unwrap_or(1).max(1);
    let ctx = Ctx { cfg, seed, out, threads };
    match &cli.command {
        Command::Gen { count } => cmd_gen(&ctx, *count),
        Command::Train => cmd_train(&ctx),
        Command::Finetune { model } => cmd_finetune(&ctx, model),
        Command::Predict { model, input, covariance, permutations } => {
            cmd_predict(&ctx, model, input, *covariance, *permutations)
        }
        Command::Baseline { method, input, covariance, lambda, folds } => {
            cmd_baseline(&ctx, *method, input, *covariance, *lambda, *folds)
        }
        Command::Benchmark { model } => cmd_benchmark(&ctx, model.as_deref()),
        Command::Curve { input, model } => cmd_curve(&ctx, input.as_deref(), model.as_deref()),
        Command::Inspect { path } => cmd_inspect(path),
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    run(cli)
}
