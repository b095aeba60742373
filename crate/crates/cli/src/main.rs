//! `nsf`: simulate, fit, evaluate and postprocess spatial factor models.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use ndarray::{Array1, Array2, Axis};
use nsf_core::archive::{load_model, save_model};
use nsf_core::kernels::KernelKind;
use nsf_core::likelihoods::LikelihoodFamily;
use nsf_core::model::{build_model, factor_point_estimates, ModelKind, ModelSpec, Observations, PredictOptions, Query};
use nsf_core::optimizer::{fit, FitConfig};
use nsf_core::pipeline::{
    evaluate, load_dataset, select_features, split_indices, Evaluation, LoadOptions, RunMetrics, RunReport,
    DEFAULT_MIN_TOTAL,
};
use nsf_core::postprocess::{simplex_normalize, spatial_scores, top_features, NormalizationStyle};
use nsf_core::simulate::{simulate, SimConfig, SimDataset, SimKind};
use nsf_core::{Dataset, NsfError, NsfModel};
use serde::{Deserialize, Serialize};
use serde_json::json;

const ARCHIVE_NAME: &str = "model.nsf";

#[derive(Parser)]
#[command(name = "nsf", version, about = "Nonnegative spatial factorization for spatial count data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset with known patterns.
    Simulate(SimulateArgs),
    /// Fit a model and write its archive and run report.
    Fit(FitArgs),
    /// Score an archived model on the validation rows of a dataset.
    Eval(EvalArgs),
    /// Normalize factors and loadings and write plot-ready tables.
    Postprocess(PostprocessArgs),
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, value_parser = parse_with::<SimKind>)]
    kind: SimKind,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of features (defaults to 500).
    #[arg(long)]
    features: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize, Deserialize, Clone)]
struct FitArgs {
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    coords: PathBuf,
    #[arg(long, value_parser = parse_with::<ModelKind>)]
    model: ModelKind,
    /// Number of components.
    #[arg(short = 'L', long = "components", value_parser = clap::value_parser!(u64).range(1..))]
    components: u64,
    /// Spatial components (hybrid model only).
    #[arg(short = 'T', long = "spatial")]
    spatial: Option<usize>,
    #[arg(long, value_parser = parse_with::<LikelihoodFamily>)]
    lik: Option<LikelihoodFamily>,
    #[arg(long, default_value = "matern32", value_parser = parse_with::<KernelKind>)]
    kernel: KernelKind,
    /// Inducing points per spatial component (defaults to all observations).
    #[arg(short = 'M', long = "inducing", value_parser = clap::value_parser!(u64).range(1..))]
    inducing: Option<u64>,
    /// Monte Carlo samples per ELBO evaluation.
    #[arg(short = 'S', long = "samples", default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    samples: u64,
    #[arg(long, default_value_t = 0.01)]
    lr: f64,
    #[arg(long, default_value_t = 1000)]
    max_steps: usize,
    /// Rows per optimization step; 0 uses every training row.
    #[arg(long, default_value_t = 0)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only the most informative features.
    #[arg(long)]
    n_top: Option<usize>,
    /// Fraction of observations held out for validation (0 disables).
    #[arg(long, default_value_t = 0.05)]
    val_frac: f64,
    /// Seed of the train/validation split (defaults to --seed).
    #[arg(long)]
    split_seed: Option<u64>,
    /// Drop observations with a smaller total count.
    #[arg(long, default_value_t = DEFAULT_MIN_TOTAL)]
    min_total: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model_archive: PathBuf,
    #[arg(long)]
    counts: PathBuf,
    #[arg(long)]
    coords: PathBuf,
    /// Defaults to the split recorded at fit time.
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PostprocessArgs {
    #[arg(long)]
    model_archive: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(1..))]
    top_k: u64,
    #[arg(long)]
    out: PathBuf,
}

/// What `fit` stores next to the parameters so `eval` can rebuild its data.
#[derive(Serialize, Deserialize)]
struct ArchiveExtra {
    config: FitArgs,
    feature_names: Vec<String>,
    split_seed: u64,
    train_rows: Vec<usize>,
}

fn parse_with<T: std::str::FromStr<Err = NsfError>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: NsfError| e.to_string())
}

/// A failure the user can fix by changing arguments or inputs.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<NsfError>() {
        Some(
            NsfError::Argument(_)
            | NsfError::Shape(_)
            | NsfError::Parse(_)
            | NsfError::Archive(_)
            | NsfError::UnsupportedModel(_)
            | NsfError::Io(_),
        ) => 2,
        _ => 1,
    }
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("NSF_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| usage(format!("NSF_THREADS must be a positive integer, got '{v}'")))?;
        if n == 0 {
            return Err(usage("NSF_THREADS must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global().context("configuring the thread pool")?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Simulate(a) => cmd_simulate(a),
        Command::Fit(a) => cmd_fit(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Postprocess(a) => cmd_postprocess(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn write_csv(path: &Path, header: &[String], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        s.push_str(&r.join(","));
        s.push('\n');
    }
    fs::write(path, s).with_context(|| format!("writing {}", path.display()))
}

fn matrix_rows(m: &Array2<f64>) -> impl Iterator<Item = Vec<String>> + '_ {
    m.rows().into_iter().map(|r| r.iter().map(|v| v.to_string()).collect())
}

fn numbered(prefix: &str, n: usize) -> Vec<String> {
    (1..=n).map(|k| format!("{prefix}{k}")).collect()
}

fn create_dir(out: &Path) -> Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))
}

fn cmd_simulate(a: SimulateArgs) -> Result<()> {
    let mut cfg = SimConfig::for_kind(a.kind);
    if let Some(j) = a.features {
        cfg.num_features = j;
    }
    let d: SimDataset = simulate(a.kind, &cfg, a.seed)?;
    create_dir(&a.out)?;
    let names = numbered("feature_", cfg.num_features);
    write_csv(&a.out.join("counts.csv"), &names, matrix_rows(&d.y))?;
    write_csv(&a.out.join("coords.csv"), &["x".into(), "y".into()], matrix_rows(&d.x))?;
    write_csv(&a.out.join("truth_spatial.csv"), &numbered("pattern_", 4), matrix_rows(&d.spatial_patterns))?;
    write_csv(
        &a.out.join("truth_nonspatial.csv"),
        &numbered("pattern_", d.nonspatial_patterns.ncols()),
        matrix_rows(&d.nonspatial_patterns),
    )?;
    write_csv(
        &a.out.join("assignments.csv"),
        &["feature".into(), "spatial_pattern".into(), "nonspatial_pattern".into()],
        (0..cfg.num_features).map(|j| {
            vec![names[j].clone(), (d.spatial_assignment[j] + 1).to_string(), (d.nonspatial_assignment[j] + 1).to_string()]
        }),
    )?;
    Ok(())
}

fn build_spec(a: &FitArgs) -> Result<ModelSpec> {
    let mut spec = ModelSpec::new(a.model, a.components as usize);
    if let Some(t) = a.spatial {
        if a.model != ModelKind::Nsfh {
            return Err(usage("-T only applies to the nsfh model"));
        }
        spec.num_spatial = t;
    }
    if let Some(l) = a.lik {
        spec.likelihood = l;
    }
    spec.kernel = a.kernel;
    spec.num_inducing = a.inducing.map(|m| m as usize);
    spec.samples = a.samples as usize;
    spec.validate()?;
    if spec.kind() != a.model {
        return Err(usage(format!("T={} turns {} into {}", spec.num_spatial, a.model, spec.kind())));
    }
    Ok(spec)
}

/// Model inputs: counts for count likelihoods, log-normalized values otherwise.
fn model_inputs(data: &Dataset, family: LikelihoodFamily) -> (Array2<f64>, Array1<f64>) {
    if family.is_count() {
        (data.y.clone(), data.nu.clone())
    } else {
        (data.normalized().values.clone(), Array1::ones(data.num_observations()))
    }
}

fn evaluate_rows(model: &NsfModel, data: &Dataset, rows: &[usize], in_sample: bool) -> Result<Evaluation> {
    let family = model.likelihood.family;
    let transform = (!family.is_count()).then(|| data.normalized().transform.select_rows(rows));
    let y = data.y.select(Axis(0), rows);
    let x = data.x.select(Axis(0), rows);
    let nu = model_inputs(data, family).1.select(Axis(0), rows);
    let query = if in_sample { Query::Training } else { Query::Coordinates { x: x.view(), nu: nu.view() } };
    Ok(evaluate(model, y.view(), query, transform.as_ref())?)
}

fn fit_config(a: &FitArgs) -> Result<FitConfig> {
    if !(0.0..1.0).contains(&a.val_frac) {
        return Err(usage(format!("--val-frac must lie in [0, 1), got {}", a.val_frac)));
    }
    let cfg = FitConfig {
        learning_rate: a.lr,
        max_steps: a.max_steps,
        batch_size: a.batch_size,
        seed: a.seed,
        ..FitConfig::default()
    };
    cfg.validate()?;
    Ok(cfg)
}

fn load(counts: &Path, coords: &Path, min_total: f64) -> Result<Dataset> {
    let opts = LoadOptions { min_total, rescale: true };
    load_dataset(counts, coords, None, opts).map_err(|e| match e {
        NsfError::Io(io) => usage(format!("reading input: {io}")),
        other => other.into(),
    })
}

fn cmd_fit(a: FitArgs) -> Result<()> {
    let spec = build_spec(&a)?;
    let cfg = fit_config(&a)?;
    let mut data = load(&a.counts, &a.coords, a.min_total)?;
    if let Some(k) = a.n_top {
        data = select_features(&data, k)?;
    }
    let n = data.num_observations();
    let split_seed = a.split_seed.unwrap_or(a.seed);
    let (train, val) = if a.val_frac > 0.0 {
        split_indices(n, 1.0 - a.val_frac, split_seed)?
    } else {
        ((0..n).collect(), Vec::new())
    };
    let (values, nu) = model_inputs(&data, spec.likelihood);
    let tr_values = values.select(Axis(0), &train);
    let tr_x = data.x.select(Axis(0), &train);
    let tr_nu = nu.select(Axis(0), &train);
    let model = build_model(&spec, tr_values.view(), tr_x.view(), tr_nu.view(), a.seed)?;
    let obs = Observations::new(tr_values, spec.likelihood)?;
    let (model, trace) = fit(model, &obs, &cfg)?;

    let train_eval = evaluate_rows(&model, &data, &train, true)?;
    let val_eval = if val.is_empty() { None } else { Some(evaluate_rows(&model, &data, &val, false)?) };
    let report = RunReport {
        config: json!({ "fit": &a, "spec": &spec, "optimizer": &cfg }),
        seed: a.seed,
        metrics: RunMetrics {
            elbo_trace: trace.elbo.clone(),
            steps: trace.steps,
            converged: trace.converged,
            train: train_eval,
            validation: val_eval,
        },
        wall_time_secs: trace.wall_time_secs,
    };
    create_dir(&a.out)?;
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    let source_rows: Vec<usize> = train.iter().map(|&i| data.source_rows[i]).collect();
    let extra = ArchiveExtra { config: a.clone(), feature_names: data.feature_names.clone(), split_seed, train_rows: source_rows };
    save_model(&model, &serde_json::to_value(&extra)?, &a.out.join(ARCHIVE_NAME))?;
    write_factor_table(&a.out.join("factors.csv"), &model, &extra.train_rows, &factor_point_estimates(&model, Query::Training, PredictOptions::default())?)?;
    write_loadings(&a.out.join("loadings.csv"), &extra.feature_names, &model.loadings(), None)?;
    Ok(())
}

fn write_factor_table(path: &Path, model: &NsfModel, rows: &[usize], f: &Array2<f64>) -> Result<()> {
    let d = model.x_train.ncols();
    let mut header = vec!["observation".to_string()];
    header.extend(numbered("coord_", d));
    header.extend(numbered("component_", f.ncols()));
    write_csv(
        path,
        &header,
        f.rows().into_iter().enumerate().map(|(i, r)| {
            let mut row = vec![rows[i].to_string()];
            row.extend(model.x_train.row(i).iter().map(|v| v.to_string()));
            row.extend(r.iter().map(|v| v.to_string()));
            row
        }),
    )
}

fn write_loadings(path: &Path, names: &[String], w: &Array2<f64>, scale: Option<&Array1<f64>>) -> Result<()> {
    let mut header = vec!["feature".to_string()];
    header.extend(numbered("component_", w.ncols()));
    if scale.is_some() {
        header.push("scale".into());
    }
    write_csv(
        path,
        &header,
        w.rows().into_iter().enumerate().map(|(j, r)| {
            let mut row = vec![names[j].clone()];
            row.extend(r.iter().map(|v| v.to_string()));
            if let Some(s) = scale {
                row.push(s[j].to_string());
            }
            row
        }),
    )
}

fn read_archive(path: &Path) -> Result<(NsfModel, ArchiveExtra)> {
    let (model, extra) = load_model(path).map_err(|e| match e {
        NsfError::Io(io) => usage(format!("reading {}: {io}", path.display())),
        other => other.into(),
    })?;
    let extra: ArchiveExtra = serde_json::from_value(extra)
        .map_err(|e| usage(format!("{} was not written by `nsf fit`: {e}", path.display())))?;
    Ok((model, extra))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let (model, extra) = read_archive(&a.model_archive)?;
    let data = load(&a.counts, &a.coords, extra.config.min_total)?;
    let data = data.select_features_named(&extra.feature_names).map_err(|e| usage(e.to_string()))?;
    let n = data.num_observations();
    let split_seed = a.split_seed.unwrap_or(extra.split_seed);
    let rows = if extra.config.val_frac > 0.0 {
        split_indices(n, 1.0 - extra.config.val_frac, split_seed)?.1
    } else {
        (0..n).collect()
    };
    if rows.is_empty() {
        return Err(usage("the split leaves no validation observations"));
    }
    let ev = evaluate_rows(&model, &data, &rows, false)?;
    create_dir(&a.out)?;
    let report = json!({
        "config": { "model_archive": a.model_archive, "counts": a.counts, "coords": a.coords, "split_seed": split_seed },
        "metrics": { "validation": ev, "num_observations": rows.len() },
    });
    fs::write(a.out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(())
}

fn cmd_postprocess(a: PostprocessArgs) -> Result<()> {
    let (model, extra) = read_archive(&a.model_archive)?;
    if !model.spec.nonnegative {
        return Err(NsfError::UnsupportedModel(format!("postprocessing needs a nonnegative model, got {}", model.kind())).into());
    }
    let t = model.spec.num_spatial;
    let f = factor_point_estimates(&model, Query::Training, PredictOptions::default())?;
    let w = model.loadings();
    let live: Vec<usize> = (0..w.ncols())
        .filter(|&c| f.column(c).iter().any(|&v| v > 0.0) && w.column(c).iter().any(|&v| v > 0.0))
        .collect();
    if live.len() < w.ncols() {
        log::warn!("dropping {} all-zero components", w.ncols() - live.len());
    }
    let (fl, wl) = (f.select(Axis(1), &live), w.select(Axis(1), &live));
    let p = simplex_normalize(fl.view(), wl.view(), NormalizationStyle::Spde)?;
    let k = (a.top_k as usize).min(model.num_features());
    create_dir(&a.out)?;
    write_factor_table(&a.out.join("factors.csv"), &model, &extra.train_rows, &p.factors)?;
    write_loadings(&a.out.join("loadings.csv"), &extra.feature_names, &p.loadings, Some(&p.scale))?;

    let sp = |m: &Array2<f64>| m.slice(ndarray::s![.., ..t]).to_owned();
    let ns = |m: &Array2<f64>| m.slice(ndarray::s![.., t..]).to_owned();
    let scores = spatial_scores(sp(&w).view(), ns(&w).view(), sp(&f).view(), ns(&f).view())?;
    write_csv(
        &a.out.join("scores_features.csv"),
        &["feature".into(), "gamma".into()],
        extra.feature_names.iter().zip(scores.gamma.iter()).map(|(n, g)| vec![n.clone(), g.to_string()]),
    )?;
    write_csv(
        &a.out.join("scores_observations.csv"),
        &["observation".into(), "rho".into()],
        extra.train_rows.iter().zip(scores.rho.iter()).map(|(i, r)| vec![i.to_string(), r.to_string()]),
    )?;

    let mut top = Vec::new();
    for (c, &orig) in live.iter().enumerate() {
        for (rank, j) in top_features(p.loadings.view(), c, k)?.into_iter().enumerate() {
            let kind = if orig < t { "spatial" } else { "nonspatial" };
            top.push(vec![
                (orig + 1).to_string(),
                kind.to_string(),
                (rank + 1).to_string(),
                extra.feature_names[j].clone(),
                p.loadings[[j, c]].to_string(),
            ]);
        }
    }
    write_csv(
        &a.out.join("top_features.csv"),
        &["component".into(), "type".into(), "rank".into(), "feature".into(), "weight".into()],
        top,
    )?;

    let x = &model.x_train;
    let mut maps = String::from("x,y,component,value\n");
    for (c, &orig) in live.iter().enumerate() {
        for i in 0..x.nrows() {
            let y = if x.ncols() > 1 { x[[i, 1]].to_string() } else { String::new() };
            writeln!(maps, "{},{},{},{}", x[[i, 0]], y, orig + 1, p.factors[[i, c]])?;
        }
    }
    fs::write(a.out.join("factor_maps.csv"), maps)?;
    Ok(())
}
