//! Twin experiments: truth generation, synthetic measurements, filter runs
//! and result emission.

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use faer::{Col, Mat};
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, FilterKind, InitialSpace, PriorKind};
use crate::error::{Error, Result};
use crate::fem::{assemble_operators, build_mesh, ObservationVector};
use crate::filters::{
    enkf_analysis, enkf_predict, hierarchical_analysis, telescopic_predict, AnalysisOptions, EnsembleSet, Observation,
    PredictConfig, Retraining, UpdateKind,
};
use crate::linalg::column_mean;
use crate::pod::{pod, ReducedSpace, Space};
use crate::priors::{build_laplacian_eigenbasis, sample_invariant_prior, sample_smooth_prior, InvariantArchive, LaplacianEigenbasis};
use crate::qge::QgeModel;
use crate::rng::{normal_col, StreamFamily};
use crate::store;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable naming the truth cache directory.
pub const CACHE_DIR_ENV: &str = "ARBENKF_CACHE_DIR";

/// Truth states at the assimilation times plus the archive run after them.
#[derive(Debug, Clone)]
pub struct Truth {
    /// Times measured from the stationary start.
    pub times: Vec<f64>,
    /// One column per assimilation time.
    pub states: Mat<f64>,
    pub archive: InvariantArchive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementRecord {
    pub k: usize,
    pub data: Vec<f64>,
    pub truth_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub k: usize,
    pub err_pre: f64,
    pub err_post: f64,
    pub rom_dim: usize,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateRecord {
    pub replicate: usize,
    pub seed: u64,
    pub config_hash: String,
    pub steps: Vec<StepRecord>,
    /// Reason the replicate stopped early, if it did.
    pub aborted: Option<String>,
}

impl ReplicateRecord {
    /// Mean posterior error over the last quarter of the windows.
    pub fn final_quarter_error(&self, windows: usize) -> Option<f64> {
        if self.aborted.is_some() {
            return None;
        }
        let start = windows - windows.div_ceil(4);
        let tail: Vec<f64> = self.steps.iter().filter(|s| s.k >= start).map(|s| s.err_post).collect();
        (!tail.is_empty()).then(|| tail.iter().sum::<f64>() / tail.len() as f64)
    }
}

/// Model, measurement operator and prior basis shared by all replicates.
pub struct Experiment {
    pub config: ExperimentConfig,
    pub model: Arc<QgeModel>,
    pub obs: Observation,
    basis: std::sync::OnceLock<LaplacianEigenbasis>,
}

impl Experiment {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mesh = build_mesh(config.mesh, config.mesh)?;
        let ops = Arc::new(assemble_operators(&mesh));
        let obs = ops.observation_operator()?;
        let model = Arc::new(QgeModel::new(ops, config.qge)?);
        Ok(Self { config, model, obs, basis: std::sync::OnceLock::new() })
    }

    /// Same model, different filter settings.
    pub fn with_config(&self, config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        if config.truth_hash() != self.config.truth_hash() {
            return Err(Error::Config("model settings differ from the shared experiment".into()));
        }
        let basis = std::sync::OnceLock::new();
        if let Some(b) = self.basis.get() {
            if config.prior_modes == self.config.prior_modes {
                let _ = basis.set(b.clone());
            }
        }
        Ok(Self { config, model: self.model.clone(), obs: self.obs.clone(), basis })
    }

    pub fn mesh_hash(&self) -> String {
        format!("{:016x}", self.model.ops().mesh.digest())
    }

    pub fn eigenbasis(&self) -> Result<&LaplacianEigenbasis> {
        if let Some(b) = self.basis.get() {
            return Ok(b);
        }
        let n = self.model.n_dofs();
        let b = build_laplacian_eigenbasis(self.model.ops(), self.config.prior_modes.min(n))?;
        Ok(self.basis.get_or_init(|| b))
    }

    fn l2_norm(&self, x: faer::ColRef<'_, f64>) -> f64 {
        self.model.ops().v_norm(x)
    }

    /// `||mean - truth||_{L2} / ||truth||_{L2}`.
    pub fn relative_error(&self, mean: &Col<f64>, truth: faer::ColRef<'_, f64>) -> f64 {
        let diff = Col::from_fn(mean.nrows(), |i| mean[i] - truth[i]);
        self.l2_norm(diff.as_ref()) / self.l2_norm(truth)
    }
}

/// Stationary start, spin-up, the assimilation times and the archive run.
pub fn generate_truth(exp: &Experiment) -> Result<Truth> {
    let cfg = &exp.config;
    let model = &exp.model;
    let (mut omega, _) = model.solve_stationary()?;
    if cfg.spin_up > 0.0 {
        omega = model.flow(omega.as_ref(), cfg.spin_up)?.last().to_owned();
    }
    let n = model.n_dofs();
    let mut states = Mat::zeros(n, cfg.windows);
    let mut times = Vec::with_capacity(cfg.windows);
    for k in 0..cfg.windows {
        states.col_mut(k).copy_from(&omega);
        times.push(cfg.spin_up + k as f64 * cfg.window);
        omega = model.flow(omega.as_ref(), cfg.window)?.last().to_owned();
    }
    let t_start = cfg.spin_up + cfg.windows as f64 * cfg.window;
    let archive = if cfg.archive_horizon > 0.0 {
        let traj = model.flow(omega.as_ref(), cfg.archive_horizon)?;
        InvariantArchive::new(traj.intermediate().to_owned(), t_start, t_start + cfg.archive_horizon)?
    } else {
        InvariantArchive::new(omega.as_mat().to_owned(), t_start, t_start)?
    };
    Ok(Truth { times, states, archive })
}

/// Truth from the cache directory when present, generated and stored
/// otherwise. The key is the hash of the model settings.
pub fn load_or_generate_truth(exp: &Experiment, cache_dir: Option<&Path>) -> Result<Truth> {
    let Some(dir) = cache_dir else {
        return generate_truth(exp);
    };
    let key = exp.config.truth_hash();
    let (ts, ars) = (dir.join(format!("truth-{key}")), dir.join(format!("archive-{key}")));
    if store::exists(&ts) && store::exists(&ars) {
        let (states, tm) = store::read_snapshots(&ts)?;
        let (snaps, am) = store::read_snapshots(&ars)?;
        if tm.mesh_hash == exp.mesh_hash() && states.nrows() == exp.model.n_dofs() {
            let t_end = am.times.last().copied().unwrap_or(0.0);
            let archive = InvariantArchive::new(snaps, t_end - exp.config.archive_horizon, t_end)?;
            return Ok(Truth { times: tm.times, states, archive });
        }
        log::warn!("stale truth cache for {key}; regenerating");
    }
    let truth = generate_truth(exp)?;
    let mh = exp.mesh_hash();
    store::write_snapshots(&ts, truth.states.as_ref(), &truth.times, &mh, "truth")?;
    let a = &truth.archive;
    let dt = exp.config.qge.dt;
    let at: Vec<f64> = (0..a.len()).map(|i| a.t_end - (a.len() - 1 - i) as f64 * dt).collect();
    store::write_snapshots(&ars, a.snapshots(), &at, &mh, "archive")?;
    Ok(truth)
}

/// `d_k = L w*(t_k) + eta_k`, noise from a stream owned by the replicate.
pub fn generate_measurements(exp: &Experiment, truth: &Truth, replicate: usize) -> Result<Vec<MeasurementRecord>> {
    let family = StreamFamily::new(exp.config.seed, replicate as u64, "measurements");
    let sigma = exp.config.sigma;
    (0..truth.states.ncols())
        .map(|k| {
            let t = truth.states.col(k);
            let exact: ObservationVector = exp.model.ops().observe(t)?;
            let z = normal_col(&mut family.member(k as u64), exact.nrows());
            let data = (0..exact.nrows()).map(|i| exact[i] + sigma * z[i]).collect();
            Ok(MeasurementRecord { k, data, truth_norm: exp.l2_norm(t) })
        })
        .collect()
}

fn initial_ensemble(exp: &Experiment, truth: &Truth, family: &StreamFamily, count: usize) -> Result<Mat<f64>> {
    match exp.config.prior {
        PriorKind::Smooth => Ok(sample_smooth_prior(exp.eigenbasis()?, family, count)),
        PriorKind::Invariant => {
            let jitter = if exp.config.jitter > 0.0 { Some((exp.eigenbasis()?, exp.config.jitter)) } else { None };
            sample_invariant_prior(&truth.archive, jitter, family, count)
        }
    }
}

fn initial_space(exp: &Experiment, truth: &Truth) -> Result<Space> {
    let n = exp.model.n_dofs();
    Ok(match exp.config.initial_space {
        InitialSpace::Empty => Space::empty(n),
        InitialSpace::Full => Space::Full,
        InitialSpace::ArchivePod => {
            let snaps = truth.archive.snapshots();
            let energy: f64 = (0..snaps.ncols()).map(|j| exp.l2_norm(snaps.col(j)).powi(2)).sum::<f64>() / snaps.ncols() as f64;
            let r = pod(&exp.model.ops().mass, snaps, exp.config.eps_r * energy)?;
            Space::Reduced(Arc::new(ReducedSpace::new(&exp.model, r.basis)))
        }
    })
}

/// Runs one replicate. Errors inside the assimilation loop end the
/// replicate and are recorded in [`ReplicateRecord::aborted`].
pub fn run_filter(exp: &Experiment, truth: &Truth, measurements: &[MeasurementRecord], replicate: usize) -> Result<ReplicateRecord> {
    let cfg = &exp.config;
    if measurements.len() != truth.states.ncols() || truth.states.ncols() != cfg.windows {
        return Err(Error::DimensionMismatch { expected: cfg.windows, found: measurements.len() });
    }
    let rep = replicate as u64;
    let prior = StreamFamily::new(cfg.seed, rep, "prior");
    let analysis = StreamFamily::new(cfg.seed, rep, "analysis");
    let mut record = ReplicateRecord { replicate, seed: cfg.seed, config_hash: cfg.config_hash(), steps: Vec::new(), aborted: None };
    let sizes = cfg.hierarchy_sizes();
    let l = sizes.len() - 1;

    if cfg.filter == FilterKind::Enkf {
        let mut ens = initial_ensemble(exp, truth, &prior.child(format!("P{l}")), cfg.n_p)?;
        for k in 0..cfg.windows {
            let t0 = Instant::now();
            let step = (|| -> Result<StepRecord> {
                let tk = truth.states.col(k);
                let err_pre = exp.relative_error(&column_mean(ens.as_ref()), tk);
                let data = Col::from_fn(measurements[k].data.len(), |i| measurements[k].data[i]);
                ens = enkf_analysis(&ens, &exp.obs, &data, cfg.sigma, &analysis.child(k))?;
                let err_post = exp.relative_error(&column_mean(ens.as_ref()), tk);
                if k + 1 < cfg.windows {
                    ens = enkf_predict(&exp.model, &ens, cfg.window)?;
                }
                Ok(StepRecord { k, err_pre, err_post, rom_dim: 0, wall_seconds: t0.elapsed().as_secs_f64() })
            })();
            match step {
                Ok(s) => record.steps.push(s),
                Err(e) => {
                    record.aborted = Some(format!("window {k}: {e}"));
                    break;
                }
            }
        }
        return Ok(record);
    }

    let (kind, retraining) = match cfg.filter {
        FilterKind::Ml => (UpdateKind::Ml, Retraining::InflationDeflation),
        FilterKind::Mf => (UpdateKind::Mf, Retraining::InflationDeflation),
        FilterKind::ReferenceMl => (UpdateKind::Ml, Retraining::Frozen),
        FilterKind::ReferenceMf => (UpdateKind::Mf, Retraining::Frozen),
        FilterKind::MemorylessMl => (UpdateKind::Ml, Retraining::Memoryless),
        FilterKind::MemorylessMf => (UpdateKind::Mf, Retraining::Memoryless),
        FilterKind::Enkf => unreachable!(),
    };
    let principal: Vec<Mat<f64>> =
        sizes.iter().enumerate().map(|(s, &m)| initial_ensemble(exp, truth, &prior.child(format!("P{s}")), m)).collect::<Result<_>>()?;
    let w0 = if retraining == Retraining::Frozen { Space::Full } else { initial_space(exp, truth)? };
    let mut es = EnsembleSet::initial(principal, vec![w0; l])?;
    let pcfg = PredictConfig {
        kind,
        retraining,
        eps_r: cfg.hierarchy_eps_r(),
        inflate_ratio: cfg.inflate_ratio,
        deflate_ratio: cfg.deflate_ratio,
        t_window: cfg.window,
    };
    let opts = AnalysisOptions { sigma: cfg.sigma, psd_for_mf: cfg.psd_for_mf };
    let n = exp.model.n_dofs();
    let mass = &exp.model.ops().mass;
    for k in 0..cfg.windows {
        let t0 = Instant::now();
        let step = (|| -> Result<StepRecord> {
            let tk = truth.states.col(k);
            let err_pre = exp.relative_error(&es.principal_mean(), tk);
            let data = Col::from_fn(measurements[k].data.len(), |i| measurements[k].data[i]);
            es = hierarchical_analysis(mass, &es, &exp.obs, &data, kind, opts, &analysis.child(k))?;
            let err_post = exp.relative_error(&es.principal_mean(), tk);
            let mut rom_dim = es.inflated[l - 1].dim(n);
            if k + 1 < cfg.windows {
                let (next, report) = telescopic_predict(&exp.model, &es, &pcfg)?;
                rom_dim = report.inflated_dims[l - 1];
                log::debug!("window {k}: tolerances {:?} inflated {:?} deflated {:?}", report.tolerances, report.inflated_dims, report.deflated_dims);
                es = next;
            }
            Ok(StepRecord { k, err_pre, err_post, rom_dim, wall_seconds: t0.elapsed().as_secs_f64() })
        })();
        match step {
            Ok(s) => record.steps.push(s),
            Err(e) => {
                record.aborted = Some(format!("window {k}: {e}"));
                break;
            }
        }
    }
    Ok(record)
}

/// All replicates of one configuration on a shared truth.
pub fn run_replicates(exp: &Experiment, truth: &Truth) -> Result<Vec<ReplicateRecord>> {
    use rayon::prelude::*;
    (0..exp.config.replicates)
        .into_par_iter()
        .map(|r| {
            let m = generate_measurements(exp, truth, r)?;
            run_filter(exp, truth, &m, r)
        })
        .collect()
}

pub const CSV_HEADER: &str = "k,err_pre,err_post,rom_dim,wall_seconds";

pub fn steps_to_csv(steps: &[StepRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in steps {
        // `{:?}` prints the shortest representation that parses back exactly.
        s.push_str(&format!("{},{:?},{:?},{},{:?}\n", r.k, r.err_pre, r.err_post, r.rom_dim, r.wall_seconds));
    }
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<StepRecord>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(CSV_HEADER) {
        return Err(Error::Config("unexpected CSV header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            let bad = || Error::Config(format!("malformed CSV row `{l}`"));
            if f.len() != 5 {
                return Err(bad());
            }
            Ok(StepRecord {
                k: f[0].parse().map_err(|_| bad())?,
                err_pre: f[1].parse().map_err(|_| bad())?,
                err_post: f[2].parse().map_err(|_| bad())?,
                rom_dim: f[3].parse().map_err(|_| bad())?,
                wall_seconds: f[4].parse().map_err(|_| bad())?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quantiles {
    pub min: f64,
    pub q25: f64,
    pub median: f64,
    pub q75: f64,
    pub max: f64,
}

/// Linear-interpolation quantiles; `None` on empty input.
pub fn quantiles(values: &[f64]) -> Option<Quantiles> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let q = |p: f64| {
        let x = p * (v.len() - 1) as f64;
        let (lo, hi) = (x.floor() as usize, x.ceil() as usize);
        v[lo] + (x - lo as f64) * (v[hi] - v[lo])
    };
    Some(Quantiles { min: v[0], q25: q(0.25), median: q(0.5), q75: q(0.75), max: v[v.len() - 1] })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateSummary {
    pub replicate: usize,
    pub seed: u64,
    pub config_hash: String,
    pub aborted: Option<String>,
    pub final_quarter_error: Option<f64>,
    pub median_rom_dim: Option<f64>,
    pub csv: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub schema_version: u32,
    pub config: std::collections::BTreeMap<String, String>,
    pub config_hash: String,
    pub count: usize,
    pub final_quarter_error: Option<Quantiles>,
    pub median_rom_dim: Option<Quantiles>,
    pub mean_wall_seconds: Option<f64>,
    pub replicates: Vec<ReplicateSummary>,
}

pub fn median_rom_dim(steps: &[StepRecord]) -> Option<f64> {
    let dims: Vec<f64> = steps.iter().map(|s| s.rom_dim as f64).collect();
    quantiles(&dims).map(|q| q.median)
}

pub fn summarize(config: &ExperimentConfig, records: &[ReplicateRecord]) -> Summary {
    let reps: Vec<ReplicateSummary> = records
        .iter()
        .map(|r| ReplicateSummary {
            replicate: r.replicate,
            seed: r.seed,
            config_hash: r.config_hash.clone(),
            aborted: r.aborted.clone(),
            final_quarter_error: r.final_quarter_error(config.windows),
            median_rom_dim: median_rom_dim(&r.steps),
            csv: format!("replicate_{:03}.csv", r.replicate),
        })
        .collect();
    let fq: Vec<f64> = reps.iter().filter_map(|r| r.final_quarter_error).collect();
    let dims: Vec<f64> = reps.iter().filter_map(|r| r.median_rom_dim).collect();
    let walls: Vec<f64> = records.iter().flat_map(|r| r.steps.iter().map(|s| s.wall_seconds)).collect();
    Summary {
        schema_version: SCHEMA_VERSION,
        config: config.to_map().into_iter().map(|(k, v)| (k.to_string(), v)).collect(),
        config_hash: config.config_hash(),
        count: records.len(),
        final_quarter_error: quantiles(&fq),
        median_rom_dim: quantiles(&dims),
        mean_wall_seconds: (!walls.is_empty()).then(|| walls.iter().sum::<f64>() / walls.len() as f64),
        replicates: reps,
    }
}

/// Writes one CSV per replicate, `steps.csv`-style, and `summary.json`.
/// Without records a header-only `replicate_none.csv` marks the run.
pub fn emit_results(config: &ExperimentConfig, records: &[ReplicateRecord], out_dir: &Path) -> Result<Summary> {
    fs::create_dir_all(out_dir)?;
    for r in records {
        fs::write(out_dir.join(format!("replicate_{:03}.csv", r.replicate)), steps_to_csv(&r.steps))?;
    }
    if records.is_empty() {
        fs::write(out_dir.join("replicate_none.csv"), steps_to_csv(&[]))?;
    }
    let summary = summarize(config, records);
    fs::write(out_dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Reads `summary.json` and recomputes the aggregate statistics from the
/// replicate CSVs it lists.
pub fn load_results(out_dir: &Path) -> Result<(Summary, Vec<ReplicateRecord>)> {
    let summary: Summary = serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json"))?)?;
    let records = summary
        .replicates
        .iter()
        .map(|r| {
            Ok(ReplicateRecord {
                replicate: r.replicate,
                seed: r.seed,
                config_hash: r.config_hash.clone(),
                steps: parse_csv(&fs::read_to_string(out_dir.join(&r.csv))?)?,
                aborted: r.aborted.clone(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((summary, records))
}

/// Plain-text report of a results directory.
pub fn report(out_dir: &Path) -> Result<String> {
    let (summary, records) = load_results(out_dir)?;
    let mut cfg = ExperimentConfig::default();
    for (k, v) in &summary.config {
        cfg.set(k, v)?;
    }
    let fresh = summarize(&cfg, &records);
    let mut s = format!(
        "filter {} | {} replicates | config {}\n",
        summary.config.get("filter").map_or("?", String::as_str),
        fresh.count,
        &summary.config_hash[..12.min(summary.config_hash.len())]
    );
    for r in &fresh.replicates {
        s.push_str(&format!(
            "  replicate {:>3}: final-quarter error {} | median ROM dim {}{}\n",
            r.replicate,
            r.final_quarter_error.map_or("-".into(), |e| format!("{e:.3e}")),
            r.median_rom_dim.map_or("-".into(), |d| format!("{d}")),
            r.aborted.as_ref().map_or(String::new(), |a| format!(" | aborted: {a}")),
        ));
    }
    if let Some(q) = fresh.final_quarter_error {
        s.push_str(&format!("  median final-quarter error {:.3e} (q25 {:.3e}, q75 {:.3e})\n", q.median, q.q25, q.q75));
    }
    Ok(s)
}
