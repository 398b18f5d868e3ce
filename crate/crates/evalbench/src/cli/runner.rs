use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::Serialize;
use sha2::{Digest, Sha256};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use super::config::{DataSource, ExperimentKind, LearnerKind, MethodName, ResolvedConfig};
use super::record::{write_records, ExperimentRecord};
use crate::active::{
    active_learning_run, active_testing_run, bias_decomposition_run, bias_probe, Learner,
};
use crate::bnn::Head;
use crate::continual::{
    consecutive_pairs, make_permuted_stream, make_split_stream, run_continual, StreamKind,
};
use crate::data::{blobs, load_idx, toy_regression, two_moons, Dataset};
use crate::error::{Error, Result};
use crate::geometry::{analytic_cov_recursive, mc_cov, LayerStack};
use crate::numcore::RngStream;
use crate::posteriors::Noise;
use crate::stats;

const DATA_STREAM: u64 = 0xda7a;

/// One independent unit of work: a seed and, for continual runs, a method
/// and protocol, or for the probes, one configuration entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Cell {
    seed: u64,
    a: usize,
    b: usize,
}

/// Outcome of [`run`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub csv: PathBuf,
    pub manifest: PathBuf,
    pub rows: usize,
    /// Failed cells; rows of the others are still written.
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
struct InputHash {
    path: String,
    sha256: String,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    evalbench_version: &'static str,
    kind: &'static str,
    status: &'static str,
    errors: &'a [String],
    seeds: &'a [u64],
    jobs: usize,
    config_path: String,
    config_text: &'a str,
    config: &'a ResolvedConfig,
    inputs: Vec<InputHash>,
    input_hash: String,
    csv: String,
    rows: usize,
    started_unix: u64,
    wall_clock_seconds: f64,
}

/// `sha256("blob <len>\0" ++ bytes)`, hex encoded.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()));
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Shared inputs loaded once per run.
struct Inputs {
    idx: Option<(Dataset, Dataset)>,
}

fn load_inputs(rc: &ResolvedConfig) -> Result<Inputs> {
    if rc.source != Some(DataSource::Idx) {
        return Ok(Inputs { idx: None });
    }
    let f = &rc.idx_files;
    let ds = &rc.config.dataset;
    let cap = |d: Dataset, n: usize| {
        if d.len() > n {
            d.subset(&(0..n).collect::<Vec<_>>())
        } else {
            d
        }
    };
    let train = cap(load_idx(&f[0], &f[1], ds.normalize)?, ds.train_size);
    let test = cap(load_idx(&f[2], &f[3], ds.normalize)?, ds.test_size);
    Ok(Inputs {
        idx: Some((train, test)),
    })
}

fn datasets(rc: &ResolvedConfig, inputs: &Inputs, seed: u64) -> Result<(Dataset, Dataset)> {
    let ds = &rc.config.dataset;
    let mut rng = RngStream::new(seed, DATA_STREAM);
    match rc.source {
        Some(DataSource::Blobs) => Ok((
            blobs(
                ds.train_size / ds.classes,
                ds.classes,
                ds.dim,
                ds.separation,
                &mut rng,
            )?,
            blobs(
                ds.test_size / ds.classes,
                ds.classes,
                ds.dim,
                ds.separation,
                &mut rng,
            )?,
        )),
        Some(DataSource::TwoMoons) => Ok((
            two_moons(ds.train_size, ds.noise, &mut rng)?,
            two_moons(ds.test_size, ds.noise, &mut rng)?,
        )),
        Some(DataSource::ToyRegression) => Ok((
            toy_regression(ds.train_clusters, &mut rng)?,
            toy_regression(ds.test_clusters, &mut rng)?,
        )),
        Some(DataSource::Idx) => Ok(inputs.idx.clone().expect("IDX inputs are loaded")),
        None => Err(Error::Config(format!("{} takes no dataset", rc.kind))),
    }
}

fn cells(rc: &ResolvedConfig) -> Vec<Cell> {
    let c = &rc.config;
    let (na, nb) = match rc.kind {
        ExperimentKind::Continual => (c.continual.methods.len(), c.continual.protocols.len()),
        ExperimentKind::GeometryProbe => (c.geometry.stacks.len(), 1),
        ExperimentKind::SoapbubbleProbe => (c.soapbubble.dims.len(), 1),
        _ => (1, 1),
    };
    rc.seeds
        .iter()
        .flat_map(|&seed| (0..na).flat_map(move |a| (0..nb).map(move |b| Cell { seed, a, b })))
        .collect()
}

fn run_cell(rc: &ResolvedConfig, inputs: &Inputs, cell: Cell) -> Result<Vec<ExperimentRecord>> {
    match rc.kind {
        ExperimentKind::Continual => continual_cell(rc, inputs, cell),
        ExperimentKind::GeometryProbe => geometry_cell(rc, cell),
        ExperimentKind::SoapbubbleProbe => soapbubble_cell(rc, cell),
        _ => {
            let (train, test) = datasets(rc, inputs, cell.seed)?;
            match rc.learner {
                Some(LearnerKind::Linear) => active_cell(
                    rc,
                    &rc.config.model.linear_learner(),
                    &train,
                    &test,
                    cell.seed,
                ),
                _ => {
                    let learner = match test.n_classes() {
                        Some(k) => rc.config.model.bnn_learner(test.dim(), k, Head::Softmax),
                        None => rc.config.model.bnn_learner(
                            test.dim(),
                            1,
                            Head::Gaussian { sigma_obs: 0.0 },
                        ),
                    };
                    active_cell(rc, &learner, &train, &test, cell.seed)
                }
            }
        }
    }
}

fn continual_cell(
    rc: &ResolvedConfig,
    inputs: &Inputs,
    cell: Cell,
) -> Result<Vec<ExperimentRecord>> {
    let spec = &rc.config.continual;
    let (train, test) = datasets(rc, inputs, cell.seed)?;
    let stream = match spec.stream {
        StreamKind::Split => make_split_stream(&train, &test, &consecutive_pairs(spec.tasks))?,
        StreamKind::Permuted => make_permuted_stream(
            &train,
            &test,
            spec.tasks,
            &mut RngStream::new(cell.seed, DATA_STREAM).derive(1),
        )?,
    };
    let name: MethodName = spec.methods[cell.a];
    let method = spec.method(name);
    let protocol = spec.protocols[cell.b];
    let cfg = rc.config.model.continual_config(spec);
    let matrix = run_continual(&stream, method, protocol, &cfg, cell.seed)?;
    let protocol_name = serde_plain(&protocol);
    let mut out = Vec::new();
    for (t, row) in matrix.rows.iter().enumerate() {
        for (j, acc) in row.iter().enumerate().take(t + 1) {
            out.push(ExperimentRecord::new(
                rc.kind.name(),
                method.name(),
                &protocol_name,
                t + 1,
                &format!("acc_task_{}", j + 1),
                *acc,
                cell.seed,
            )?);
        }
    }
    Ok(out)
}

/// Kebab-case name of a unit enum variant.
fn serde_plain<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|j| j.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn active_cell<L: Learner>(
    rc: &ResolvedConfig,
    learner: &L,
    train: &Dataset,
    test: &Dataset,
    seed: u64,
) -> Result<Vec<ExperimentRecord>> {
    let spec = &rc.config.active;
    let kind = rc.kind.name();
    let method = spec.proposal_name();
    let proposal = spec.proposal_kind();
    let mut out = Vec::new();
    match rc.kind {
        ExperimentKind::ActiveLearn => {
            let curve = active_learning_run(learner, train, test, &spec.learning_config(), seed)?;
            for p in curve {
                let est = p.estimator.name();
                out.push(ExperimentRecord::new(
                    kind,
                    method,
                    est,
                    p.m,
                    "test_loss",
                    p.test_loss,
                    seed,
                )?);
                if let Some(a) = p.test_accuracy {
                    out.push(ExperimentRecord::new(
                        kind,
                        method,
                        est,
                        p.m,
                        "test_accuracy",
                        a,
                        seed,
                    )?);
                }
                out.push(ExperimentRecord::new(
                    kind,
                    method,
                    est,
                    p.m,
                    "negative_weights",
                    p.negative_weights as f64,
                    seed,
                )?);
            }
        }
        ExperimentKind::OfbProbe => {
            let cfg = spec.learning_config();
            for &objective in &spec.estimators {
                let b = bias_decomposition_run(learner, train, test, &cfg, objective, seed)?;
                let m = cfg.start_points + cfg.m_max;
                for (metric, v) in [
                    ("r", b.r),
                    ("r_tilde", b.r_tilde),
                    ("r_lure", b.r_lure),
                    ("alb", b.alb),
                    ("ofb", b.ofb),
                ] {
                    out.push(ExperimentRecord::new(
                        kind,
                        method,
                        objective.name(),
                        m,
                        metric,
                        v,
                        seed,
                    )?);
                }
            }
        }
        ExperimentKind::ActiveTest | ExperimentKind::BiasProbe => {
            // a fixed model fit on the training split; the test split is the pool
            let fit_seed = RngStream::new(seed, 0xf1).next_u64();
            let model = learner.fit(train, None, fit_seed)?;
            let losses = learner.losses(&model, test, fit_seed)?;
            let scores = if proposal.needs_scores() {
                Some(learner.scores(&model, test, fit_seed)?)
            } else {
                None
            };
            let n = test.len();
            if rc.kind == ExperimentKind::ActiveTest {
                let checkpoints = if spec.checkpoints.is_empty() {
                    (1..=10).map(|k| (n * k).div_ceil(10)).collect::<Vec<_>>()
                } else {
                    spec.checkpoints.clone()
                };
                if let Some(&m) = checkpoints.iter().find(|&&m| m > n) {
                    return Err(Error::Config(format!(
                        "checkpoint {m} exceeds the pool of {n}"
                    )));
                }
                let rows = active_testing_run(
                    &losses,
                    test.x(),
                    &proposal,
                    scores.as_deref(),
                    &checkpoints,
                    spec.trajectories,
                    seed,
                )?;
                for r in rows {
                    out.push(ExperimentRecord::new(
                        kind, method, "lure", r.m, "mse", r.mse, seed,
                    )?);
                    out.push(ExperimentRecord::new(
                        kind,
                        method,
                        "lure",
                        r.m,
                        "median_sq_error",
                        r.median_sq_error,
                        seed,
                    )?);
                }
            } else {
                let m_max = spec.learning_config().m_max.min(n);
                let rows = bias_probe(
                    &losses,
                    test.x(),
                    &proposal,
                    scores.as_deref(),
                    m_max,
                    spec.trajectories,
                    seed,
                )?;
                for r in rows
                    .into_iter()
                    .filter(|r| spec.estimators.contains(&r.estimator))
                {
                    let est = r.estimator.name();
                    out.push(ExperimentRecord::new(
                        kind, method, est, r.m, "bias", r.bias, seed,
                    )?);
                    if spec.trajectories > 1 {
                        out.push(ExperimentRecord::new(
                            kind,
                            method,
                            est,
                            r.m,
                            "bias_se",
                            r.std_error,
                            seed,
                        )?);
                    }
                }
            }
        }
        _ => unreachable!("not an active-learning kind"),
    }
    Ok(out)
}

fn geometry_cell(rc: &ResolvedConfig, cell: Cell) -> Result<Vec<ExperimentRecord>> {
    let g = &rc.config.geometry;
    let dims = &g.stacks[cell.a];
    let mut rng = RngStream::new(cell.seed, 0x9e0).derive(cell.a as u64);
    let stack = LayerStack::random(dims, (g.std_min, g.std_max), &mut rng)?;
    let exact = analytic_cov_recursive(&stack)?;
    let mc = mc_cov(&stack, g.samples, &mut rng)?;
    let mut max_z: f64 = 0.0;
    let mut min_cov = f64::INFINITY;
    for (i, (a, m)) in exact.data().iter().zip(mc.table.data()).enumerate() {
        let se = mc.std_error.data()[i];
        if se > 0.0 {
            max_z = max_z.max((a - m).abs() / se);
        }
        min_cov = min_cov.min(*a);
    }
    let method = "product-matrix";
    let shape = dims
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x");
    let kind = rc.kind.name();
    let depth = stack.depth();
    Ok(vec![
        ExperimentRecord::new(
            kind,
            method,
            &shape,
            depth,
            "max_abs_diff",
            exact.max_abs_diff(&mc.table),
            cell.seed,
        )?,
        ExperimentRecord::new(kind, method, &shape, depth, "max_z", max_z, cell.seed)?,
        ExperimentRecord::new(kind, method, &shape, depth, "min_cov", min_cov, cell.seed)?,
    ])
}

fn soapbubble_cell(rc: &ResolvedConfig, cell: Cell) -> Result<Vec<ExperimentRecord>> {
    let s = &rc.config.soapbubble;
    let d = s.dims[cell.a];
    let mut rng = RngStream::new(cell.seed, 0x50a9).derive(d as u64);
    let norm = |v: &[f64]| s.sigma * v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let gauss: Vec<f64> = (0..s.samples)
        .map(|_| norm(&Noise::gaussian(&mut rng, d).scaled))
        .collect();
    let radial: Vec<f64> = (0..s.samples)
        .map(|_| norm(&Noise::radial(&mut rng, d).scaled))
        .collect();
    let chi = ChiSquared::new(d as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let sigma = s.sigma;
    let (_, p_gauss) = stats::ks_one_sample(&gauss, |r| chi.cdf((r / sigma).powi(2)));
    let (_, p_radial) = stats::ks_one_sample(&radial, |r| {
        statrs::function::erf::erf(r / (sigma * 2f64.sqrt()))
    });
    let rel_iqr =
        |v: &[f64]| (stats::quantile(v, 0.75) - stats::quantile(v, 0.25)) / stats::median(v);
    let kind = rc.kind.name();
    let mut out = Vec::new();
    for (method, v, p) in [("gaussian", &gauss, p_gauss), ("radial", &radial, p_radial)] {
        out.push(ExperimentRecord::new(
            kind,
            method,
            "norm",
            d,
            "mean",
            stats::mean(v),
            cell.seed,
        )?);
        out.push(ExperimentRecord::new(
            kind,
            method,
            "norm",
            d,
            "rel_iqr",
            rel_iqr(v),
            cell.seed,
        )?);
        out.push(ExperimentRecord::new(
            kind, method, "norm", d, "ks_p", p, cell.seed,
        )?);
    }
    Ok(out)
}

/// All records of a run in cell order, with the messages of failed cells.
pub fn collect_records(
    rc: &ResolvedConfig,
    jobs: usize,
) -> Result<(Vec<ExperimentRecord>, Vec<String>)> {
    let inputs = load_inputs(rc)?;
    let work = cells(rc);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let results: Vec<Result<Vec<ExperimentRecord>>> =
        pool.install(|| work.par_iter().map(|&c| run_cell(rc, &inputs, c)).collect());
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (c, r) in work.iter().zip(results) {
        match r {
            Ok(rows) => records.extend(rows),
            Err(e) => errors.push(format!("seed {} cell ({}, {}): {e}", c.seed, c.a, c.b)),
        }
    }
    Ok((records, errors))
}

/// Runs every cell and writes `<kind>.csv` and `<kind>.manifest.json` into
/// the output directory. Returns an error after writing if any cell failed.
pub fn run(
    rc: &ResolvedConfig,
    config_path: &Path,
    config_text: &str,
    jobs: usize,
) -> Result<RunReport> {
    let started = Instant::now();
    let started_unix = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    std::fs::create_dir_all(&rc.out)?;
    let csv = rc.out.join(format!("{}.csv", rc.kind.name()));
    let manifest = rc.out.join(format!("{}.manifest.json", rc.kind.name()));

    let (records, errors) = match collect_records(rc, jobs) {
        Ok(v) => v,
        Err(e) => (Vec::new(), vec![e.to_string()]),
    };
    let mut buf = Vec::new();
    write_records(&records, &mut buf)?;
    std::fs::write(&csv, &buf)?;

    let mut inputs = vec![InputHash {
        path: config_path.display().to_string(),
        sha256: content_hash(config_text.as_bytes()),
    }];
    for p in &rc.idx_files {
        inputs.push(InputHash {
            path: p.display().to_string(),
            sha256: content_hash(&std::fs::read(p)?),
        });
    }
    let joined: String = inputs.iter().map(|i| format!("{}\n", i.sha256)).collect();
    let m = Manifest {
        evalbench_version: env!("CARGO_PKG_VERSION"),
        kind: rc.kind.name(),
        status: if errors.is_empty() {
            "complete"
        } else {
            "partial"
        },
        errors: &errors,
        seeds: &rc.seeds,
        jobs,
        config_path: config_path.display().to_string(),
        config_text,
        config: rc,
        input_hash: content_hash(joined.as_bytes()),
        inputs,
        csv: csv.display().to_string(),
        rows: records.len(),
        started_unix,
        wall_clock_seconds: started.elapsed().as_secs_f64(),
    };
    std::fs::write(&manifest, serde_json::to_string_pretty(&m)?)?;
    let report = RunReport {
        csv,
        manifest,
        rows: records.len(),
        errors,
    };
    if let Some(first) = report.errors.first() {
        return Err(Error::Incomplete(format!(
            "{} of the run failed; partial results in {}: {first}",
            if report.errors.len() == 1 {
                "one cell".to_string()
            } else {
                format!("{} cells", report.errors.len())
            },
            report.csv.display()
        )));
    }
    Ok(report)
}
