//! The experiments behind each CLI command.
//!
//! Every method at a sweep point sees the same test realizations: sample `i`
//! is drawn from the test substream `i` of the spec seed, so results are
//! paired across methods and independent of the worker count.

use std::collections::BTreeMap;
use std::f64::consts::{FRAC_PI_2, PI};
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use irs_core::gnn::{observation_from_features, InputMode};
use irs_core::hash::Fnv64;
use irs_core::lmmse::{fit_statistics, statistics_fingerprint, ChannelStatistics, LmmseEstimator};
use irs_core::optim::{bcd_optimize, maxmin_optimize, random_phase_baseline, BcdConfig, MaxMinConfig};
use irs_core::pilot::{make_pilot_matrix, PilotPlan, ReceivedPilots};
use irs_core::rate::{user_rates, utility};
use irs_core::rng::{substream, Purpose};
use irs_core::scenario::{angles_between, array_response_bs, array_response_irs, CascadedChannels};
use irs_core::train::{
    batch_utilities, train_estimator, train_policy, Batch, Checkpoint, DataPipeline, Estimator, Evaluation, ModelKind,
    Policy, UserPlacement,
};
use irs_core::{CMatrix, Solution, SystemConfig, Utility};
use log::info;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Result, SimError};
use crate::formats::{
    load_checkpoint, load_statistics, save_checkpoint, save_pilots, save_statistics, PilotsHeader, SavedModel,
};
use crate::records::{num, Table, BS_RESPONSE, CDF, IRS_RESPONSE, SAMPLES, SWEEP, TRACES, TRAINING_LOG};
use crate::spec::{ExperimentSpec, Method, SweepAxis};

/// Where a command writes and how it schedules work.
pub struct Run {
    pub spec: ExperimentSpec,
    /// Output directory of this command.
    pub dir: PathBuf,
    /// Shared directory for LMMSE statistics.
    pub cache: PathBuf,
    pub pool: rayon::ThreadPool,
}

/// Digest of a file's bytes, used when a checkpoint feeds a command.
pub fn file_digest(path: &Path) -> Result<u64> {
    let bytes = fs::read(path).map_err(|e| SimError::io(path, e))?;
    Ok(Fnv64::new().bytes(&bytes).finish())
}

/// Content-addressed output directory `<base>/<command>-<experiment>-<digest>`.
/// An existing non-empty directory is only reused with `force`.
pub fn prepare_output(base: &Path, command: &str, spec: &ExperimentSpec, extra: u64, force: bool) -> Result<PathBuf> {
    let digest = spec.digest(command) ^ extra.rotate_left(17);
    let dir = base.join(format!("{command}-{}-{digest:016x}", spec.experiment));
    if dir.exists() {
        let occupied = fs::read_dir(&dir).map_err(|e| SimError::io(&dir, e))?.next().is_some();
        if occupied && !force {
            return Err(SimError::config(format!(
                "{} already holds results for this configuration; pass --force to overwrite",
                dir.display()
            )));
        }
    }
    fs::create_dir_all(&dir).map_err(|e| SimError::io(&dir, e))?;
    let spec_path = dir.join("spec.toml");
    fs::write(&spec_path, spec.to_toml()).map_err(|e| SimError::io(&spec_path, e))?;
    Ok(dir)
}

impl Run {
    pub fn new(spec: ExperimentSpec, dir: PathBuf, cache: PathBuf, workers: usize) -> Result<Self> {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| SimError::config(format!("worker pool: {e}")))?;
        fs::create_dir_all(&cache).map_err(|e| SimError::io(&cache, e))?;
        Ok(Run { spec, dir, cache, pool })
    }

    fn subdir(&self, name: &str) -> Result<PathBuf> {
        let d = self.dir.join(name);
        fs::create_dir_all(&d).map_err(|e| SimError::io(&d, e))?;
        Ok(d)
    }
}

/// Pilot plan for `spec`, reusing the IRS training matrix of `model` when
/// the shapes agree so a trained network keeps seeing the pilots it was
/// trained on.
fn plan_for(spec: &ExperimentSpec, system: &SystemConfig, model: Option<&SavedModel>) -> Result<PilotPlan> {
    if let Some(m) = model {
        let q = &m.plan.irs_training;
        if q.nrows() == system.num_irs_elements + 1 && q.ncols() * system.num_users == spec.pilots.length {
            let pilots = make_pilot_matrix(system.num_users, system.uplink_power);
            return Ok(PilotPlan::from_parts(pilots, q.clone(), system.uplink_power)?);
        }
    }
    spec.pilot_plan(system)
}

fn pipeline_for(spec: &ExperimentSpec, mode: InputMode, model: Option<&SavedModel>) -> Result<DataPipeline> {
    let system = spec.system_config()?;
    let plan = plan_for(spec, &system, model)?;
    let placement = spec.placement(&system)?;
    Ok(DataPipeline::new(system, plan, placement, mode)?)
}

/// Train a network for `spec` in `dir`: `best.ckpt`, `latest.ckpt` and the
/// training log, all rewritten after every epoch.
pub fn train_model(spec: &ExperimentSpec, kind: ModelKind, mode: InputMode, dir: &Path) -> Result<SavedModel> {
    let pipeline = pipeline_for(spec, mode, None)?;
    let gnn = spec.gnn_config(mode);
    let start = Instant::now();
    let mut log = Table::new(TRAINING_LOG);
    let log_path = dir.join("training_log.csv");
    let mut failure: Option<SimError> = None;
    let mut observer = |report: &irs_core::train::EpochReport, ck: &Checkpoint, improved: bool| {
        if failure.is_some() {
            return;
        }
        info!(
            "{} epoch {} validation {:.5} ({:.0} s)",
            kind.name(),
            report.epoch,
            report.validation,
            start.elapsed().as_secs_f64()
        );
        log.push(vec![
            report.epoch.to_string(),
            report.iteration.to_string(),
            num(report.lr),
            report.train_loss.map(num).unwrap_or_default(),
            num(report.validation),
            format!("{:.3}", start.elapsed().as_secs_f64()),
        ]);
        let model = SavedModel {
            checkpoint: ck.clone(),
            spec: spec.clone(),
            plan: pipeline.plan.clone(),
        };
        let result = save_checkpoint(&dir.join("latest.ckpt"), &model)
            .and_then(|_| {
                if improved {
                    save_checkpoint(&dir.join("best.ckpt"), &model)
                } else {
                    Ok(())
                }
            })
            .and_then(|_| log.save(&log_path));
        if let Err(e) = result {
            failure = Some(e);
        }
    };
    let outcome = match kind {
        ModelKind::Policy => train_policy(&pipeline, gnn, &spec.training_config()?, &mut observer),
        ModelKind::Estimator => train_estimator(&pipeline, gnn, &spec.estimator_training_config()?, &mut observer),
    }?;
    if let Some(e) = failure {
        return Err(e);
    }
    Ok(SavedModel {
        checkpoint: outcome.best,
        spec: spec.clone(),
        plan: pipeline.plan,
    })
}

/// `train`: fit the policy network of the spec.
pub fn cmd_train(run: &Run) -> Result<PathBuf> {
    let model = train_model(&run.spec, ModelKind::Policy, run.spec.input_mode()?, &run.dir)?;
    info!(
        "best validation {:.5} at epoch {}",
        model.checkpoint.validation, model.checkpoint.epoch
    );
    Ok(run.dir.join("best.ckpt"))
}

/// One row of a results table.
#[derive(Debug, Clone, PartialEq)]
pub struct MethodResult {
    pub method: Method,
    pub evaluation: Evaluation,
}

fn observations(batch: &Batch, antennas: usize, subframes: usize) -> Result<Vec<CMatrix>> {
    batch
        .features
        .rows()
        .into_iter()
        .map(|row| Ok(observation_from_features(row, antennas, subframes)?))
        .collect()
}

/// Optimizer used for the model-based methods under `kind`.
fn optimize(links: &CascadedChannels, system: &SystemConfig, kind: Utility) -> Result<Solution> {
    Ok(match kind {
        Utility::Sum => {
            bcd_optimize(
                links,
                system.downlink_power,
                system.downlink_noise,
                &BcdConfig::default(),
            )?
            .solution
        }
        Utility::Min => {
            maxmin_optimize(
                links,
                system.downlink_power,
                system.downlink_noise,
                &MaxMinConfig::default(),
            )?
            .solution
        }
    })
}

fn true_utility(links: &CascadedChannels, sol: &Solution, system: &SystemConfig, kind: Utility) -> Result<f64> {
    Ok(utility(&user_rates(links, sol, system.downlink_noise), kind)?)
}

/// Optimize on estimated channels, score on the true ones.
fn estimated_then_optimized(
    run: &Run,
    batch: &Batch,
    estimates: &[CMatrix],
    system: &SystemConfig,
    kind: Utility,
) -> Result<Vec<f64>> {
    let k = batch.users;
    run.pool.install(|| {
        (0..batch.len())
            .into_par_iter()
            .map(|i| {
                let est = CascadedChannels::from_combined(&estimates[i * k..(i + 1) * k])?;
                let sol = optimize(&est, system, kind)?;
                true_utility(&batch.links[i], &sol, system, kind)
            })
            .collect()
    })
}

/// LMMSE statistics for `pipeline`, from the cache when available.
pub fn lmmse_statistics(run: &Run, spec: &ExperimentSpec, pipeline: &DataPipeline) -> Result<Vec<ChannelStatistics>> {
    if pipeline.placement != UserPlacement::Uniform {
        return Err(SimError::config(
            "LMMSE statistics are fitted for uniformly placed users only",
        ));
    }
    let fp = statistics_fingerprint(&pipeline.system, &pipeline.plan);
    let n = spec.evaluation.lmmse_samples;
    let path = run.cache.join(format!("lmmse-{fp:016x}-{n}-{}.bin", spec.seed));
    if path.exists() {
        return load_statistics(&path, fp);
    }
    info!("fitting LMMSE statistics from {n} realizations");
    let stats = fit_statistics(&pipeline.system, &pipeline.plan, n, spec.seed)?;
    save_statistics(&path, &stats)?;
    Ok(stats)
}

/// Learned models already available to a sweep point.
#[derive(Default)]
pub struct Models {
    pub policy: Option<SavedModel>,
    pub policy_locations: Option<SavedModel>,
    pub estimator: Option<SavedModel>,
}

/// Evaluate `methods` at the point `spec`. Networks missing from `models`
/// are trained into `dir`.
pub fn evaluate_point(
    run: &Run,
    spec: &ExperimentSpec,
    methods: &[Method],
    models: &mut Models,
    dir: &Path,
) -> Result<Vec<MethodResult>> {
    let kind = spec.utility_kind()?;
    let n = spec.evaluation.realizations;
    let mut out = Vec::new();
    for &method in methods {
        info!("evaluating {method}");
        let samples = match method {
            Method::Gnn | Method::GnnLocations => {
                let (slot, mode, sub) = match method {
                    Method::Gnn => (&mut models.policy, InputMode::Pilots, "gnn"),
                    _ => (
                        &mut models.policy_locations,
                        InputMode::PilotsAndLocations,
                        "gnn-locations",
                    ),
                };
                if slot.is_none() {
                    let d = dir.join(sub);
                    fs::create_dir_all(&d).map_err(|e| SimError::io(&d, e))?;
                    *slot = Some(train_model(spec, ModelKind::Policy, mode, &d)?);
                }
                let model = slot.as_ref().expect("trained above");
                let pipeline = pipeline_for(spec, mode, Some(model))?;
                model.checkpoint.check_dimensions(&pipeline)?;
                if model.checkpoint.training.utility != kind {
                    return Err(SimError::config("checkpoint was trained for a different utility"));
                }
                let policy = Policy::from_checkpoint(&model.checkpoint)?;
                let batch = pipeline.batch(spec.seed, Purpose::Test, 0, n)?;
                batch_utilities(&policy, &batch, &pipeline.system, kind)?
            }
            Method::EstGnnBcd => {
                if models.estimator.is_none() {
                    let d = dir.join("estgnn");
                    fs::create_dir_all(&d).map_err(|e| SimError::io(&d, e))?;
                    models.estimator = Some(train_model(spec, ModelKind::Estimator, InputMode::Pilots, &d)?);
                }
                let model = models.estimator.as_ref().expect("trained above");
                let pipeline = pipeline_for(spec, InputMode::Pilots, Some(model))?;
                model.checkpoint.check_dimensions(&pipeline)?;
                let estimator = Estimator::from_checkpoint(&model.checkpoint)?;
                let batch = pipeline.batch(spec.seed, Purpose::Test, 0, n)?;
                let estimates = estimator.estimate(&batch)?;
                estimated_then_optimized(run, &batch, &estimates, &pipeline.system, kind)?
            }
            Method::LmmseBcd => {
                let pipeline = pipeline_for(spec, InputMode::Pilots, models.policy.as_ref())?;
                let stats = lmmse_statistics(run, spec, &pipeline)?;
                let estimators = stats
                    .iter()
                    .map(LmmseEstimator::new)
                    .collect::<irs_core::Result<Vec<_>>>()?;
                let batch = pipeline.batch(spec.seed, Purpose::Test, 0, n)?;
                let ys = observations(&batch, pipeline.system.num_bs_antennas, pipeline.plan.subframes)?;
                let k = batch.users;
                let estimates = ys
                    .iter()
                    .enumerate()
                    .map(|(row, y)| estimators[row % k].estimate(y))
                    .collect::<irs_core::Result<Vec<_>>>()?;
                estimated_then_optimized(run, &batch, &estimates, &pipeline.system, kind)?
            }
            Method::PerfectCsiBcd => {
                let pipeline = pipeline_for(spec, InputMode::Pilots, None)?;
                let batch = pipeline.batch(spec.seed, Purpose::Test, 0, n)?;
                let system = &pipeline.system;
                run.pool.install(|| {
                    batch
                        .links
                        .par_iter()
                        .map(|links| true_utility(links, &optimize(links, system, kind)?, system, kind))
                        .collect::<Result<Vec<_>>>()
                })?
            }
            Method::RandomPhase => {
                let pipeline = pipeline_for(spec, InputMode::Pilots, None)?;
                let batch = pipeline.batch(spec.seed, Purpose::Test, 0, n)?;
                let system = &pipeline.system;
                run.pool.install(|| {
                    batch
                        .links
                        .par_iter()
                        .enumerate()
                        .map(|(i, links)| {
                            let mut rng = substream(spec.seed, Purpose::Baseline, i as u64);
                            let sol =
                                random_phase_baseline(links, system.downlink_power, system.downlink_noise, &mut rng);
                            true_utility(links, &sol, system, kind)
                        })
                        .collect::<Result<Vec<_>>>()
                })?
            }
        };
        let evaluation = Evaluation::from_samples(samples);
        info!("{method}: mean {:.4} (se {:.4})", evaluation.mean, evaluation.std_error);
        out.push(MethodResult { method, evaluation });
    }
    Ok(out)
}

fn summary_rows(table: &mut Table, axis: &str, value: f64, results: &[MethodResult]) {
    for r in results {
        table.push(vec![
            axis.to_string(),
            num(value),
            r.method.to_string(),
            num(r.evaluation.mean),
            num(r.evaluation.std_error),
            r.evaluation.samples.len().to_string(),
        ]);
    }
}

fn sample_rows(table: &mut Table, results: &[MethodResult]) {
    for r in results {
        for (i, u) in r.evaluation.samples.iter().enumerate() {
            table.push(vec![r.method.to_string(), i.to_string(), num(*u)]);
        }
    }
}

fn load_models(checkpoint: Option<&Path>) -> Result<Models> {
    let mut models = Models::default();
    if let Some(path) = checkpoint {
        let model = load_checkpoint(path)?;
        match (model.checkpoint.kind, model.checkpoint.gnn.input_mode) {
            (ModelKind::Policy, InputMode::Pilots) => models.policy = Some(model),
            (ModelKind::Policy, InputMode::PilotsAndLocations) => models.policy_locations = Some(model),
            (ModelKind::Estimator, _) => models.estimator = Some(model),
        }
    }
    Ok(models)
}

/// Received pilots of test realizations `0..n`, recovered from the batch.
fn test_pilots(batch: &Batch, pipeline: &DataPipeline) -> Result<Vec<ReceivedPilots>> {
    let ys = observations(batch, pipeline.system.num_bs_antennas, pipeline.plan.subframes)?;
    let noise = pipeline.system.uplink_noise / (pipeline.plan.subframe_length as f64 * pipeline.plan.uplink_power);
    Ok(ys
        .chunks(batch.users)
        .map(|c| ReceivedPilots {
            per_user: c.to_vec(),
            effective_noise_variance: noise,
        })
        .collect())
}

fn write_test_pilots(path: &Path, spec: &ExperimentSpec, pipeline: &DataPipeline, batch: &Batch) -> Result<()> {
    let pilots = test_pilots(batch, pipeline)?;
    let header = PilotsHeader {
        antennas: pipeline.system.num_bs_antennas as u32,
        elements: pipeline.system.num_irs_elements as u32,
        users: pipeline.system.num_users as u32,
        subframes: pipeline.plan.subframes as u32,
        count: pilots.len() as u64,
        seed: spec.seed,
        config_hash: pipeline.fingerprint(),
        noise_variance: pilots.first().map(|p| p.effective_noise_variance).unwrap_or(0.0),
    };
    save_pilots(path, &header, &pilots)
}

/// `eval`: every configured method at the spec's own point, plus the test pilots.
pub fn cmd_eval(run: &Run, checkpoint: Option<&Path>) -> Result<Vec<MethodResult>> {
    let spec = &run.spec;
    let mut models = load_models(checkpoint)?;
    if let Some(m) = &models.policy {
        let pipeline = pipeline_for(spec, InputMode::Pilots, Some(m))?;
        m.checkpoint.check_pipeline(&pipeline)?;
    }
    let results = evaluate_point(run, spec, &spec.methods()?, &mut models, &run.dir)?;
    let mut summary = Table::new(SWEEP);
    summary_rows(
        &mut summary,
        SweepAxis::PilotLength.name(),
        spec.pilots.length as f64,
        &results,
    );
    summary.save(&run.dir.join("summary.csv"))?;
    let mut samples = Table::new(SAMPLES);
    sample_rows(&mut samples, &results);
    samples.save(&run.dir.join("samples.csv"))?;

    let pipeline = pipeline_for(spec, InputMode::Pilots, models.policy.as_ref())?;
    let batch = pipeline.batch(spec.seed, Purpose::Test, 0, spec.evaluation.realizations)?;
    write_test_pilots(&run.dir.join("test_pilots.bin"), spec, &pipeline, &batch)?;
    Ok(results)
}

/// `sweep`: all methods along the sweep axis. With `reuse_checkpoint`, the
/// networks are trained once at the spec's own point (or loaded) and only
/// evaluated along the axis.
pub fn cmd_sweep(run: &Run, checkpoint: Option<&Path>) -> Result<Table> {
    let spec = &run.spec;
    let axis = spec.sweep_axis()?;
    let methods = spec.methods()?;
    let reuse = spec.sweep.reuse_checkpoint;
    if checkpoint.is_some() && !reuse {
        return Err(SimError::config(
            "a checkpoint is only used when sweep.reuse_checkpoint is true",
        ));
    }
    let mut shared = load_models(checkpoint)?;
    if reuse {
        let base = run.subdir("base")?;
        for &m in &methods {
            let missing = match m {
                Method::Gnn => shared.policy.is_none(),
                Method::GnnLocations => shared.policy_locations.is_none(),
                Method::EstGnnBcd => shared.estimator.is_none(),
                _ => false,
            };
            if m.is_learned() && missing {
                evaluate_point_models_only(spec, m, &mut shared, &base)?;
            }
        }
    }
    let mut table = Table::new(SWEEP);
    for (i, &value) in spec.sweep.values.iter().enumerate() {
        let point = spec.at_point(axis, value)?;
        info!("sweep point {} = {value}", axis.name());
        let dir = run.subdir(&format!("point-{i:02}"))?;
        let mut models = if reuse {
            Models {
                policy: shared.policy.clone(),
                policy_locations: shared.policy_locations.clone(),
                estimator: shared.estimator.clone(),
            }
        } else {
            Models::default()
        };
        let results = evaluate_point(run, &point, &methods, &mut models, &dir)?;
        summary_rows(&mut table, axis.name(), value, &results);
        table.save(&run.dir.join("sweep.csv"))?;
    }
    Ok(table)
}

fn evaluate_point_models_only(spec: &ExperimentSpec, method: Method, models: &mut Models, dir: &Path) -> Result<()> {
    let d = dir.join(method.name().replace('+', "-"));
    fs::create_dir_all(&d).map_err(|e| SimError::io(&d, e))?;
    match method {
        Method::Gnn => models.policy = Some(train_model(spec, ModelKind::Policy, InputMode::Pilots, &d)?),
        Method::GnnLocations => {
            models.policy_locations = Some(train_model(spec, ModelKind::Policy, InputMode::PilotsAndLocations, &d)?)
        }
        Method::EstGnnBcd => models.estimator = Some(train_model(spec, ModelKind::Estimator, InputMode::Pilots, &d)?),
        _ => {}
    }
    Ok(())
}

/// Sorted samples with empirical CDF values `rank / n`.
pub fn empirical_cdf(samples: &[f64]) -> Vec<(f64, f64)> {
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    sorted
        .into_iter()
        .enumerate()
        .map(|(i, x)| (x, (i + 1) as f64 / n))
        .collect()
}

/// `cdf`: distribution of the minimum user rate for every configured method.
pub fn cmd_cdf(run: &Run, checkpoint: Option<&Path>) -> Result<Table> {
    let spec = &run.spec;
    if spec.utility_kind()? != Utility::Min {
        return Err(SimError::config("the cdf command needs utility = \"min\""));
    }
    let mut models = load_models(checkpoint)?;
    let results = evaluate_point(run, spec, &spec.methods()?, &mut models, &run.dir)?;
    let mut table = Table::new(CDF);
    for r in &results {
        for (rank, (x, p)) in empirical_cdf(&r.evaluation.samples).into_iter().enumerate() {
            table.push(vec![r.method.to_string(), (rank + 1).to_string(), num(x), num(p)]);
        }
    }
    table.save(&run.dir.join("cdf.csv"))?;
    Ok(table)
}

/// Grid of `points` values evenly covering `[lo, hi]`.
pub fn grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    (0..points)
        .map(|i| lo + (hi - lo) * i as f64 / (points - 1) as f64)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArrayResponseSummary {
    /// Direction from the IRS towards the BS, held fixed on the IRS surface.
    pub bs_direction_at_irs: (f64, f64),
    /// Direction from the BS towards the IRS.
    pub irs_direction_at_bs: (f64, f64),
    /// Direction from the IRS towards each fixed user.
    pub user_directions: Vec<(f64, f64)>,
    pub irs_argmax: (f64, f64),
    pub irs_peak: f64,
    pub azimuth_step: f64,
    pub elevation_step: f64,
    pub bs_argmax: f64,
    pub bs_peak: f64,
}

/// IRS response over the `(azimuth, elevation)` grid of `spec` and BS
/// response of user 0's beamformer over azimuths in `[-pi, pi]`.
pub fn array_response_surfaces(
    spec: &ExperimentSpec,
    system: &SystemConfig,
    solution: &Solution,
) -> Result<(Table, Table, ArrayResponseSummary)> {
    let a = &spec.array_response;
    let (az_bs, el_bs) = angles_between(&system.irs_location, &system.bs_location)?;
    let (az_irs, el_irs) = angles_between(&system.bs_location, &system.irs_location)?;
    let azimuths = grid(-FRAC_PI_2, FRAC_PI_2, a.azimuth_points);
    let elevations = grid(-FRAC_PI_2, FRAC_PI_2, a.elevation_points);
    let mut irs = Table::new(IRS_RESPONSE);
    let mut best = (0.0, 0.0, f64::NEG_INFINITY);
    for &az in &azimuths {
        for &el in &elevations {
            let r = array_response_irs(
                &solution.reflection,
                az_bs,
                el_bs,
                az,
                el,
                system.irs_rows,
                system.irs_cols,
            )?;
            if r > best.2 {
                best = (az, el, r);
            }
            irs.push(vec![num(az), num(el), num(r)]);
        }
    }
    let w0 = solution.beamformers.column(0).to_owned();
    let mut bs = Table::new(BS_RESPONSE);
    let mut bs_best = (0.0, f64::NEG_INFINITY);
    for az in grid(-PI, PI, a.bs_points) {
        let r = array_response_bs(&w0, az, el_irs);
        if r > bs_best.1 {
            bs_best = (az, r);
        }
        bs.push(vec![num(az), num(r)]);
    }
    let user_directions = match &spec.system.fixed_users {
        Some(users) => users
            .iter()
            .map(|u| angles_between(&system.irs_location, u))
            .collect::<irs_core::Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let summary = ArrayResponseSummary {
        bs_direction_at_irs: (az_bs, el_bs),
        irs_direction_at_bs: (az_irs, el_irs),
        user_directions,
        irs_argmax: (best.0, best.1),
        irs_peak: best.2,
        azimuth_step: PI / (a.azimuth_points - 1) as f64,
        elevation_step: PI / (a.elevation_points - 1) as f64,
        bs_argmax: bs_best.0,
        bs_peak: bs_best.1,
    };
    Ok((irs, bs, summary))
}

/// `array-response`: feed one test realization's pilots through the policy
/// and tabulate the array responses of its output.
pub fn cmd_array_response(run: &Run, checkpoint: Option<&Path>) -> Result<ArrayResponseSummary> {
    let spec = &run.spec;
    let model = match checkpoint {
        Some(p) => load_checkpoint(p)?,
        None => train_model(spec, ModelKind::Policy, spec.input_mode()?, &run.subdir("gnn")?)?,
    };
    let pipeline = pipeline_for(spec, model.checkpoint.gnn.input_mode, Some(&model))?;
    model.checkpoint.check_pipeline(&pipeline)?;
    let policy = Policy::from_checkpoint(&model.checkpoint)?;
    let batch = pipeline.batch(spec.seed, Purpose::Test, 0, 1)?;
    write_test_pilots(&run.dir.join("pilots.bin"), spec, &pipeline, &batch)?;
    let solution = policy.solve(&batch, pipeline.system.downlink_power)?.remove(0);
    let (irs, bs, summary) = array_response_surfaces(spec, &pipeline.system, &solution)?;
    irs.save(&run.dir.join("irs_response.csv"))?;
    bs.save(&run.dir.join("bs_response.csv"))?;
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    let path = run.dir.join("summary.json");
    fs::write(&path, json + "\n").map_err(|e| SimError::io(&path, e))?;
    info!(
        "IRS response peaks at ({:.3}, {:.3}); BS response peaks at {:.3}",
        summary.irs_argmax.0, summary.irs_argmax.1, summary.bs_argmax
    );
    Ok(summary)
}

/// `fit-lmmse`: fit and store the LMMSE statistics of the spec.
pub fn cmd_fit_lmmse(run: &Run) -> Result<PathBuf> {
    let pipeline = pipeline_for(&run.spec, InputMode::Pilots, None)?;
    let stats = lmmse_statistics(run, &run.spec, &pipeline)?;
    let path = run.dir.join("lmmse_statistics.bin");
    save_statistics(&path, &stats)?;
    Ok(path)
}

/// `baseline`: perfect-CSI optimization and random phases, with the BCD
/// objective traces for sum-rate runs.
pub fn cmd_baseline(run: &Run) -> Result<Vec<MethodResult>> {
    let spec = &run.spec;
    let kind = spec.utility_kind()?;
    let methods = [Method::PerfectCsiBcd, Method::RandomPhase];
    let results = evaluate_point(run, spec, &methods, &mut Models::default(), &run.dir)?;
    let mut summary = Table::new(SWEEP);
    summary_rows(
        &mut summary,
        SweepAxis::PilotLength.name(),
        spec.pilots.length as f64,
        &results,
    );
    summary.save(&run.dir.join("summary.csv"))?;
    let mut samples = Table::new(SAMPLES);
    sample_rows(&mut samples, &results);
    samples.save(&run.dir.join("samples.csv"))?;

    if kind == Utility::Sum {
        let pipeline = pipeline_for(spec, InputMode::Pilots, None)?;
        let batch = pipeline.batch(spec.seed, Purpose::Test, 0, spec.evaluation.realizations)?;
        let system = &pipeline.system;
        let traces: Vec<Vec<f64>> = run.pool.install(|| {
            batch
                .links
                .par_iter()
                .map(|l| {
                    Ok(bcd_optimize(l, system.downlink_power, system.downlink_noise, &BcdConfig::default())?.trace)
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let mut t = Table::new(TRACES);
        for (i, trace) in traces.iter().enumerate() {
            for (it, v) in trace.iter().enumerate() {
                t.push(vec![i.to_string(), it.to_string(), num(*v)]);
            }
        }
        t.save(&run.dir.join("bcd_traces.csv"))?;
    }
    Ok(results)
}

/// Mean of each method, keyed by name.
pub fn means(results: &[MethodResult]) -> BTreeMap<&'static str, f64> {
    results.iter().map(|r| (r.method.name(), r.evaluation.mean)).collect()
}
