use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use dipl_core::io::{
    load_matrix, load_rankings, save_matrix, save_rankings, write_json, Dataset, SeenTest,
};
use dipl_core::metrics::{
    cross_validate, generalized_metrics, multiway_accuracy, topk_accuracy, GridPoint,
};
use dipl_core::solver::{fit, rank_all};
use dipl_core::superclass::{fit_with_superclasses, CandidateStats};
use dipl_core::synth::{generate, hold_out, SynthSpec};
use dipl_core::{
    Dims, FitTrace, Hyperparams, LossMode, MetricMode, MetricsReport, Projection, Termination,
    UnseenPool,
};
use serde::Serialize;

use crate::{
    Cli, Command, CvCmd, DataArgs, EvalArgs, EvalCmd, FitArgs, FitCmd, MetricArg, ModeArg,
    PipelineCmd, PredictCmd, SynthArgs,
};

#[derive(Debug, Serialize)]
struct Timings {
    load_seconds: f64,
    fit_seconds: f64,
    total_seconds: f64,
}

#[derive(Debug, Serialize)]
struct SuperclassInfo {
    r: usize,
    top_m: usize,
    class_to_cluster: Vec<usize>,
    candidate_stats: CandidateStats,
    super_iterations: usize,
    super_termination: Termination,
}

/// Everything needed to rerun a fit exactly.
#[derive(Debug, Serialize)]
struct RunMetadata<'a> {
    command: &'a str,
    argv: &'a [String],
    version: &'static str,
    manifest: &'a Path,
    normalize: bool,
    generalized: bool,
    threads: usize,
    seed: u64,
    mode: LossMode,
    hyperparams: &'a Hyperparams,
    dims: Dims,
    iterations: usize,
    termination: Termination,
    final_objective: Option<f64>,
    timings: Timings,
    #[serde(skip_serializing_if = "Option::is_none")]
    superclasses: Option<&'a SuperclassInfo>,
}

struct Loaded {
    dataset: Dataset,
    /// Test pool: the unseen pool, or the mixed pool in generalized mode.
    pool: UnseenPool,
    seen_mask: Option<Vec<bool>>,
    out: PathBuf,
    load_seconds: f64,
}

fn load(args: &DataArgs) -> Result<Loaded> {
    let start = Instant::now();
    let dataset = Dataset::load(&args.manifest, args.normalize)
        .with_context(|| format!("loading {}", args.manifest.display()))?;
    let (pool, seen_mask) = if args.generalized {
        let (pool, mask) = dataset.generalized_pool()?;
        (pool, Some(mask))
    } else {
        (dataset.unseen.clone(), None)
    };
    let out = match &args.out {
        Some(dir) => dir.clone(),
        None => args
            .manifest
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from(".")),
    };
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    Ok(Loaded {
        dataset,
        pool,
        seen_mask,
        out,
        load_seconds: start.elapsed().as_secs_f64(),
    })
}

pub(crate) fn run(cli: &Cli, argv: &[String]) -> Result<()> {
    match &cli.command {
        Command::Synth(args) => synth(args),
        Command::Fit(cmd) => fit_cmd(cli, argv, cmd),
        Command::Predict(cmd) => predict_cmd(cmd),
        Command::Eval(cmd) => eval_cmd(cmd),
        Command::Cv(cmd) => cv_cmd(cmd),
        Command::Pipeline(cmd) => pipeline_cmd(cli, argv, cmd),
    }
}

fn synth(args: &SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        d: args.d,
        k: args.k,
        p: args.p,
        q: args.q,
        samples_per_class: args.samples_per_class,
        noise_sigma: args.noise,
        prototype_separation: args.separation,
        domain_shift: args.shift,
        grouped: args.groups,
        seed: args.seed,
    };
    let data = generate(&spec)?;
    let (seen, seen_test) = match args.holdout {
        Some(frac) => {
            let (train, features, labels) = hold_out(&data.seen, frac, args.seed)?;
            (train, Some(SeenTest { features, labels }))
        }
        None => (data.seen, None),
    };
    let dataset = Dataset::new(seen, data.unseen, seen_test)?;
    let mut manifest = dataset.save(&args.out, &[("w_true.csv", &data.w_true)])?;
    manifest
        .metadata
        .insert("synth".into(), serde_json::to_value(&spec)?);
    if let Some(frac) = args.holdout {
        manifest.metadata.insert("holdout".into(), frac.into());
    }
    if let Some(groups) = &data.class_groups {
        manifest
            .metadata
            .insert("class_groups".into(), serde_json::to_value(groups)?);
    }
    write_json(&args.out.join("manifest.json"), &manifest)?;
    println!("wrote {}", args.out.join("manifest.json").display());
    Ok(())
}

struct Fitted {
    w: Projection,
    trace: FitTrace,
    superclasses: Option<SuperclassInfo>,
    hp: Hyperparams,
    dims: Dims,
    fit_seconds: f64,
}

fn run_fit(loaded: &Loaded, args: &FitArgs, metric: MetricArg) -> Result<Fitted> {
    let hp = args.hyperparams(metric);
    let seen = &loaded.dataset.seen;
    let dims = dipl_core::model::validate(seen, &loaded.pool)?;
    let start = Instant::now();
    let (w, trace, superclasses) = match hp.superclass_r {
        Some(r) => {
            let sc = fit_with_superclasses(seen, loaded.pool.view(), &hp)?;
            let info = SuperclassInfo {
                r,
                top_m: hp.candidate_top_m,
                class_to_cluster: sc.model.class_to_cluster.clone(),
                candidate_stats: sc.candidates.stats(),
                super_iterations: sc.super_trace.iterations(),
                super_termination: sc.super_trace.termination,
            };
            (sc.projection, sc.trace, Some(info))
        }
        None => {
            let (w, trace) = fit(seen, loaded.pool.view(), &hp, None)?;
            (w, trace, None)
        }
    };
    Ok(Fitted {
        w,
        trace,
        superclasses,
        hp,
        dims,
        fit_seconds: start.elapsed().as_secs_f64(),
    })
}

fn write_fit(
    cli: &Cli,
    argv: &[String],
    command: &str,
    data: &DataArgs,
    loaded: &Loaded,
    fitted: &Fitted,
    started: Instant,
) -> Result<()> {
    save_matrix(&loaded.out.join("w.csv"), fitted.w.matrix())?;
    write_json(&loaded.out.join("trace.json"), &fitted.trace)?;
    let meta = RunMetadata {
        command,
        argv,
        version: env!("CARGO_PKG_VERSION"),
        manifest: &data.manifest,
        normalize: data.normalize,
        generalized: data.generalized,
        threads: cli.threads as usize,
        seed: fitted.hp.seed,
        mode: fitted.hp.loss_mode,
        hyperparams: &fitted.hp,
        dims: fitted.dims,
        iterations: fitted.trace.iterations(),
        termination: fitted.trace.termination,
        final_objective: fitted.trace.final_objective(),
        timings: Timings {
            load_seconds: loaded.load_seconds,
            fit_seconds: fitted.fit_seconds,
            total_seconds: started.elapsed().as_secs_f64(),
        },
        superclasses: fitted.superclasses.as_ref(),
    };
    write_json(&loaded.out.join("metadata.json"), &meta)?;
    println!(
        "wrote {} ({} iterations, {})",
        loaded.out.join("w.csv").display(),
        meta.iterations,
        meta.termination
    );
    Ok(())
}

fn fit_cmd(cli: &Cli, argv: &[String], cmd: &FitCmd) -> Result<()> {
    let started = Instant::now();
    let loaded = load(&cmd.data)?;
    let fitted = run_fit(&loaded, &cmd.fit, MetricArg::PerSample)?;
    write_fit(cli, argv, "fit", &cmd.data, &loaded, &fitted, started)
}

/// Mode recorded in the metadata.json next to `w_path`, if any.
fn recorded_mode(w_path: &Path) -> Option<LossMode> {
    let meta = w_path.parent()?.join("metadata.json");
    let text = fs::read_to_string(meta).ok()?;
    let value: serde_json::Value = serde_json::from_str(&text).ok()?;
    serde_json::from_value(value.get("mode")?.clone()).ok()
}

fn load_projection(
    loaded: &Loaded,
    w: &Option<PathBuf>,
    mode: Option<ModeArg>,
) -> Result<(Projection, LossMode)> {
    let path = w.clone().unwrap_or_else(|| loaded.out.join("w.csv"));
    let m = load_matrix(&path).with_context(|| format!("loading projection {}", path.display()))?;
    let dims = &loaded.dataset.dims;
    if m.nrows() != dims.d || m.ncols() != dims.k {
        bail!(
            "projection {} is {}x{}, dataset needs {}x{}",
            path.display(),
            m.nrows(),
            m.ncols(),
            dims.d,
            dims.k
        );
    }
    let mode = mode
        .map(LossMode::from)
        .or_else(|| recorded_mode(&path))
        .unwrap_or_default();
    Ok((Projection::new(m)?, mode))
}

fn rankings(loaded: &Loaded, w: &Projection, mode: LossMode) -> Result<Vec<Vec<usize>>> {
    Ok(rank_all(
        w,
        &loaded.pool.features,
        &loaded.pool.prototypes,
        mode,
    )?)
}

fn predict_cmd(cmd: &PredictCmd) -> Result<()> {
    let loaded = load(&cmd.data)?;
    let (w, mode) = load_projection(&loaded, &cmd.w, cmd.mode)?;
    let ranked = rankings(&loaded, &w, mode)?;
    let path = loaded.out.join("predictions.csv");
    save_rankings(&path, &ranked)?;
    println!("wrote {} ({} samples)", path.display(), ranked.len());
    Ok(())
}

fn metrics(loaded: &Loaded, ranked: &[Vec<usize>], args: &EvalArgs) -> Result<MetricsReport> {
    let truth = loaded
        .pool
        .truth_labels
        .as_ref()
        .context("evaluation needs unseen_labels in the manifest")?;
    if ranked.len() != truth.len() {
        bail!(
            "{} predictions for {} labelled samples",
            ranked.len(),
            truth.len()
        );
    }
    let preds = ranked
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.first()
                .copied()
                .with_context(|| format!("empty ranking for sample {i}"))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = MetricsReport::default();
    if matches!(args.metric, MetricArg::PerSample | MetricArg::Both) {
        report.acc = Some(multiway_accuracy(&preds, truth, MetricMode::PerSample)?);
    }
    if matches!(args.metric, MetricArg::PerClass | MetricArg::Both) {
        report.acc_per_class = Some(multiway_accuracy(&preds, truth, MetricMode::PerClass)?);
    }
    if let Some(k) = args.hit_k {
        report.hit_at_k = Some(topk_accuracy(ranked, truth, k as usize)?);
    }
    if let Some(mask) = &loaded.seen_mask {
        let g = generalized_metrics(&preds, truth, mask)?;
        report.acc_s = g.acc_s;
        report.acc_u = g.acc_u;
        report.hm = Some(g.hm);
    }
    Ok(report)
}

fn write_metrics(loaded: &Loaded, report: &MetricsReport) -> Result<()> {
    let path = loaded.out.join("metrics.json");
    write_json(&path, report)?;
    println!("{}", serde_json::to_string(report)?);
    Ok(())
}

fn eval_cmd(cmd: &EvalCmd) -> Result<()> {
    let loaded = load(&cmd.data)?;
    let ranked = match &cmd.predictions {
        Some(path) => load_rankings(path)?,
        None => {
            let (w, mode) = load_projection(&loaded, &cmd.w, cmd.mode)?;
            rankings(&loaded, &w, mode)?
        }
    };
    let report = metrics(&loaded, &ranked, &cmd.eval)?;
    write_metrics(&loaded, &report)
}

fn cv_cmd(cmd: &CvCmd) -> Result<()> {
    let loaded = load(&cmd.data)?;
    let base = cmd.fit.hyperparams(cmd.metric);
    let mut grid = Vec::new();
    for &alpha in &cmd.alphas {
        if !(0.0..1.0).contains(&alpha) {
            bail!("grid alpha {alpha} is not in [0, 1)");
        }
        grid.push(GridPoint {
            alpha,
            superclass_r: None,
        });
        for &r in &cmd.superclass_grid {
            grid.push(GridPoint {
                alpha,
                superclass_r: Some(r),
            });
        }
    }
    let result = cross_validate(&loaded.dataset.seen, &grid, &base, cmd.folds, base.seed)?;
    let path = loaded.out.join("cv.json");
    write_json(&path, &result)?;
    println!(
        "best alpha {} superclasses {}; wrote {}",
        result.best.alpha,
        result
            .best
            .superclass_r
            .map_or("off".to_string(), |r| r.to_string()),
        path.display()
    );
    Ok(())
}

fn pipeline_cmd(cli: &Cli, argv: &[String], cmd: &PipelineCmd) -> Result<()> {
    let started = Instant::now();
    let loaded = load(&cmd.data)?;
    let fitted = run_fit(&loaded, &cmd.fit, cmd.eval.metric)?;
    write_fit(cli, argv, "pipeline", &cmd.data, &loaded, &fitted, started)?;
    let ranked = rankings(&loaded, &fitted.w, fitted.hp.loss_mode)?;
    save_rankings(&loaded.out.join("predictions.csv"), &ranked)?;
    if loaded.pool.truth_labels.is_some() {
        let report = metrics(&loaded, &ranked, &cmd.eval)?;
        write_metrics(&loaded, &report)?;
    }
    Ok(())
}
