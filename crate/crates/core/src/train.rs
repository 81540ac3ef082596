//! Data generation, Adam training with early stopping, and evaluation.
//!
//! Every sample is drawn from its own random substream
//! `(seed, purpose, index)`, so batches are reproducible and can be
//! generated in any order or on any number of workers. Training,
//! validation, calibration and test data use different purposes and
//! therefore never overlap.

use ndarray::Array2;

use crate::gnn::{build_features, Dimensions, EstimationNet, FeatureScaling, Gnn, GnnConfig, GnnParameters, InputMode};
use crate::hash::Fnv64;
use crate::pilot::{observe, PilotPlan};
use crate::prelude::*;
use crate::rate::{rates_for_effective, utility, Solution, Utility};
use crate::rng::{substream, Purpose};
use crate::scenario::{sample_channels, CascadedChannels, Placement, SystemConfig};
use crate::{CMatrix, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainingConfig {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    /// Iterations between two learning-rate decays.
    pub lr_decay_every: u64,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub validation_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub utility: Utility,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            initial_lr: 1e-3,
            lr_decay_factor: 0.98,
            lr_decay_every: 300,
            iterations_per_epoch: 100,
            batch_size: 1024,
            early_stop_patience: 10,
            validation_size: 1024,
            max_epochs: 100,
            seed: 0,
            utility: Utility::Sum,
        }
    }
}

impl TrainingConfig {
    /// 20 epochs of 100 x 256 samples.
    pub fn desk() -> Self {
        TrainingConfig {
            batch_size: 256,
            max_epochs: 20,
            validation_size: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.initial_lr > 0.0) || !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(Error::config(
                "learning rate and decay factor must be positive (decay <= 1)",
            ));
        }
        if self.lr_decay_every == 0
            || self.iterations_per_epoch == 0
            || self.batch_size == 0
            || self.validation_size == 0
            || self.max_epochs == 0
        {
            return Err(Error::config("training counts must be positive"));
        }
        if self.early_stop_patience == 0 {
            return Err(Error::config("early_stop_patience must be at least 1"));
        }
        Ok(())
    }

    /// Learning rate used at 0-based `iteration`.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        let decays = (iteration / self.lr_decay_every) as i32;
        self.initial_lr * self.lr_decay_factor.powi(decays)
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    first: Vec<f64>,
    second: Vec<f64>,
    steps: i32,
}

impl Adam {
    pub fn new(len: usize) -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            first: vec![0.0; len],
            second: vec![0.0; len],
            steps: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.steps += 1;
        let c1 = 1.0 - self.beta1.powi(self.steps);
        let c2 = 1.0 - self.beta2.powi(self.steps);
        for i in 0..params.len() {
            self.first[i] = self.beta1 * self.first[i] + (1.0 - self.beta1) * grad[i];
            self.second[i] = self.beta2 * self.second[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m = self.first[i] / c1;
            let v = self.second[i] / c2;
            params[i] -= lr * m / (v.sqrt() + self.epsilon);
        }
    }
}

/// Where users are placed in each realization.
#[derive(Debug, Clone, PartialEq)]
pub enum UserPlacement {
    /// Uniform in the configured region.
    Uniform,
    /// Same locations in every realization.
    Fixed(Placement),
}

/// System, pilots and input mode: everything that defines a sample.
#[derive(Debug, Clone)]
pub struct DataPipeline {
    pub system: SystemConfig,
    pub plan: PilotPlan,
    pub placement: UserPlacement,
    pub input_mode: InputMode,
}

/// Samples stacked for the network: user `k` of sample `b` is row `b K + k`.
#[derive(Debug, Clone)]
pub struct Batch {
    pub users: usize,
    /// Unscaled features.
    pub features: Array2<f64>,
    pub links: Vec<CascadedChannels>,
    /// Combined matrices `F_k`, row-aligned with `features`.
    pub combined: Vec<CMatrix>,
    pub placements: Vec<Placement>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }
}

impl DataPipeline {
    pub fn new(system: SystemConfig, plan: PilotPlan, placement: UserPlacement, input_mode: InputMode) -> Result<Self> {
        system.validate()?;
        if plan.num_users() != system.num_users || plan.num_elements() != system.num_irs_elements {
            return Err(Error::config("pilot plan does not match the system configuration"));
        }
        if let UserPlacement::Fixed(p) = &placement {
            if p.user_locations.len() != system.num_users {
                return Err(Error::config("fixed placement has the wrong number of users"));
            }
        }
        Ok(DataPipeline {
            system,
            plan,
            placement,
            input_mode,
        })
    }

    pub fn dims(&self) -> Dimensions {
        Dimensions {
            antennas: self.system.num_bs_antennas,
            elements: self.system.num_irs_elements,
            subframes: self.plan.subframes,
        }
    }

    /// Digest of the system, the pilots and the placement rule.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.bytes(b"DataPipeline/v1");
        h.u64(self.system.fingerprint()).u64(self.plan.fingerprint());
        match &self.placement {
            UserPlacement::Uniform => {
                h.u64(0);
            }
            UserPlacement::Fixed(p) => {
                h.u64(1);
                for loc in &p.user_locations {
                    for c in loc {
                        h.f64(*c);
                    }
                }
            }
        }
        h.bytes(self.input_mode.name().as_bytes());
        h.finish()
    }

    /// Realizations `start..start + count` of stream `(seed, purpose)`.
    pub fn batch(&self, seed: u64, purpose: Purpose, start: u64, count: usize) -> Result<Batch> {
        let k = self.system.num_users;
        let width = self.dims().feature_dim(self.input_mode);
        let mut features = Array2::zeros((count * k, width));
        let mut links = Vec::with_capacity(count);
        let mut combined = Vec::with_capacity(count * k);
        let mut placements = Vec::with_capacity(count);
        for i in 0..count {
            let mut rng = substream(seed, purpose, start + i as u64);
            let placement = match &self.placement {
                UserPlacement::Uniform => Placement::uniform(&self.system, &mut rng),
                UserPlacement::Fixed(p) => p.clone(),
            };
            let channels = sample_channels(&self.system, &placement, &mut rng)?;
            let rx = observe(&channels, &self.plan, self.system.uplink_noise, &mut rng)?;
            for u in 0..k {
                let loc = match self.input_mode {
                    InputMode::Pilots => None,
                    InputMode::PilotsAndLocations => Some(&placement.user_locations[u]),
                };
                features
                    .row_mut(i * k + u)
                    .assign(&build_features(&rx.per_user[u], loc));
            }
            combined.extend(channels.combined.iter().cloned());
            links.push(channels.links);
            placements.push(placement);
        }
        Ok(Batch {
            users: k,
            features,
            links,
            combined,
            placements,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Policy,
    Estimator,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Policy => "policy",
            ModelKind::Estimator => "estimator",
        }
    }
}

/// Trained parameters with everything needed to reuse them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub gnn: GnnConfig,
    pub dims: Dimensions,
    pub training: TrainingConfig,
    pub system_fingerprint: u64,
    pub plan_fingerprint: u64,
    pub pipeline_fingerprint: u64,
    pub scaling: FeatureScaling,
    /// Multiplies estimator outputs; 1 for policies.
    pub output_scale: f64,
    pub params: GnnParameters,
    /// Mean validation utility (policy) or MSE (estimator).
    pub validation: f64,
    pub epoch: usize,
}

impl Checkpoint {
    /// Configuration error unless the checkpoint was trained on `pipeline`.
    pub fn check_pipeline(&self, pipeline: &DataPipeline) -> Result<()> {
        if self.pipeline_fingerprint != pipeline.fingerprint() {
            return Err(Error::config(format!(
                "checkpoint was trained for pipeline {:016x}, evaluation uses {:016x}",
                self.pipeline_fingerprint,
                pipeline.fingerprint()
            )));
        }
        Ok(())
    }

    /// Configuration error unless the network accepts `pipeline`'s inputs.
    pub fn check_dimensions(&self, pipeline: &DataPipeline) -> Result<()> {
        if self.dims != pipeline.dims() || self.gnn.input_mode != pipeline.input_mode {
            return Err(Error::config(
                "checkpoint dimensions do not match the evaluation pipeline",
            ));
        }
        Ok(())
    }
}

/// Trained policy ready for inference.
#[derive(Debug, Clone)]
pub struct Policy {
    pub net: Gnn,
    pub params: GnnParameters,
    pub scaling: FeatureScaling,
}

impl Policy {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Policy {
            return Err(Error::config("checkpoint does not hold a policy network"));
        }
        let net = Gnn::new(ck.gnn, ck.dims)?;
        net.check_parameters(&ck.params)?;
        Ok(Policy {
            net,
            params: ck.params.clone(),
            scaling: ck.scaling,
        })
    }

    pub fn scaled(&self, features: &Array2<f64>) -> Array2<f64> {
        let mut x = features.clone();
        self.scaling.apply(&mut x, self.net.dims.pilot_dim());
        x
    }

    pub fn solve(&self, batch: &Batch, max_power: f64) -> Result<Vec<Solution>> {
        let mut out = Vec::with_capacity(batch.len());
        let chunk = 256 * batch.users;
        let mut start = 0;
        while start < batch.features.nrows() {
            let end = (start + chunk).min(batch.features.nrows());
            let x = self.scaled(&batch.features.slice(ndarray::s![start..end, ..]).to_owned());
            out.extend(self.net.forward(&self.params.values, &x, batch.users, max_power)?);
            start = end;
        }
        Ok(out)
    }
}

/// Trained channel estimator ready for inference.
#[derive(Debug, Clone)]
pub struct Estimator {
    pub net: EstimationNet,
    pub params: GnnParameters,
    pub scaling: FeatureScaling,
    pub output_scale: f64,
}

impl Estimator {
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.kind != ModelKind::Estimator {
            return Err(Error::config("checkpoint does not hold an estimation network"));
        }
        let net = EstimationNet::new(ck.gnn, ck.dims)?;
        if ck.params.layout != *net.layout() {
            return Err(Error::config("parameter layout does not match the network"));
        }
        Ok(Estimator {
            net,
            params: ck.params.clone(),
            scaling: ck.scaling,
            output_scale: ck.output_scale,
        })
    }

    /// Estimated `F_k`, row-aligned with the batch features.
    pub fn estimate(&self, batch: &Batch) -> Result<Vec<CMatrix>> {
        let mut x = batch.features.clone();
        self.scaling.apply(&mut x, self.net.dims.pilot_dim());
        self.net.estimate(&self.params, &x, batch.users, self.output_scale)
    }
}

/// Progress after one epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    /// 1-based; epoch 0 is the untrained network.
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub iteration: u64,
    /// Learning rate of the last step.
    pub lr: f64,
    /// Mean training loss of the epoch; `None` before training.
    pub train_loss: Option<f64>,
    pub validation: f64,
    pub improved: bool,
}

#[derive(Debug, Clone)]
pub struct TrainingOutcome {
    /// Best-validation checkpoint.
    pub best: Checkpoint,
    pub history: Vec<EpochReport>,
    pub stopped_early: bool,
}

/// Called after every epoch with the report, the latest checkpoint and
/// whether it is the new best.
pub type EpochObserver<'a> = dyn FnMut(&EpochReport, &Checkpoint, bool) + 'a;

fn fit_scaling(pipeline: &DataPipeline, cfg: &TrainingConfig) -> Result<(FeatureScaling, Batch)> {
    let calib = pipeline.batch(cfg.seed, Purpose::Calibration, 0, cfg.validation_size)?;
    let scaling = FeatureScaling::fit(&calib.features, pipeline.dims().pilot_dim())?;
    Ok((scaling, calib))
}

struct Loop<'a> {
    cfg: &'a TrainingConfig,
    template: Checkpoint,
    /// Higher validation is better when true.
    maximize: bool,
}

/// One optimizer step at an iteration: returns the loss and the gradient.
type StepFn<'a> = dyn FnMut(&GnnParameters, u64) -> Result<(f64, Vec<f64>)> + 'a;

impl Loop<'_> {
    fn run(
        self,
        mut params: GnnParameters,
        step: &mut StepFn<'_>,
        validate: &mut dyn FnMut(&GnnParameters) -> Result<f64>,
        observer: &mut EpochObserver<'_>,
    ) -> Result<TrainingOutcome> {
        let cfg = self.cfg;
        let better = |a: f64, b: f64| if self.maximize { a > b } else { a < b };
        let initial = validate(&params)?;
        let mut best = Checkpoint {
            params: params.clone(),
            validation: initial,
            epoch: 0,
            ..self.template.clone()
        };
        let mut history = vec![EpochReport {
            epoch: 0,
            iteration: 0,
            lr: cfg.initial_lr,
            train_loss: None,
            validation: initial,
            improved: true,
        }];
        observer(&history[0], &best, true);
        let mut adam = Adam::new(params.len());
        let mut iteration = 0u64;
        let mut stale = 0;
        let mut stopped_early = false;
        for epoch in 1..=cfg.max_epochs {
            let mut total = 0.0;
            let mut lr = cfg.initial_lr;
            for _ in 0..cfg.iterations_per_epoch {
                let (loss, grad) = step(&params, iteration)?;
                if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                    return Err(Error::Diverged { iteration, loss });
                }
                lr = cfg.learning_rate(iteration);
                adam.step(&mut params.values, &grad, lr);
                total += loss;
                iteration += 1;
            }
            let validation = validate(&params)?;
            let improved = better(validation, best.validation);
            let latest = Checkpoint {
                params: params.clone(),
                validation,
                epoch,
                ..self.template.clone()
            };
            let report = EpochReport {
                epoch,
                iteration,
                lr,
                train_loss: Some(total / cfg.iterations_per_epoch as f64),
                validation,
                improved,
            };
            observer(&report, &latest, improved);
            history.push(report);
            if improved {
                best = latest;
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.early_stop_patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        Ok(TrainingOutcome {
            best,
            history,
            stopped_early,
        })
    }
}

/// Mean utility of `policy` on `batch`.
pub fn batch_utilities(policy: &Policy, batch: &Batch, system: &SystemConfig, kind: Utility) -> Result<Vec<f64>> {
    let solutions = policy.solve(batch, system.downlink_power)?;
    solutions
        .iter()
        .zip(&batch.links)
        .map(|(s, l)| {
            let rates = rates_for_effective(&l.effective_all(&s.reflection), &s.beamformers, system.downlink_noise);
            utility(&rates, kind)
        })
        .collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

/// Train the policy network by maximizing the mean utility.
pub fn train_policy(
    pipeline: &DataPipeline,
    gnn: GnnConfig,
    cfg: &TrainingConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let dims = pipeline.dims();
    let net = Gnn::new(gnn, dims)?;
    let (scaling, _) = fit_scaling(pipeline, cfg)?;
    let params = net.init_parameters(&mut substream(cfg.seed, Purpose::Init, 0));
    let validation = pipeline.batch(cfg.seed, Purpose::Validation, 0, cfg.validation_size)?;
    let system = pipeline.system.clone();
    let template = Checkpoint {
        kind: ModelKind::Policy,
        gnn,
        dims,
        training: *cfg,
        system_fingerprint: system.fingerprint(),
        plan_fingerprint: pipeline.plan.fingerprint(),
        pipeline_fingerprint: pipeline.fingerprint(),
        scaling,
        output_scale: 1.0,
        params: params.clone(),
        validation: f64::NAN,
        epoch: 0,
    };
    let pilot_dim = dims.pilot_dim();
    let mut step = |p: &GnnParameters, iteration: u64| -> Result<(f64, Vec<f64>)> {
        let mut batch = pipeline.batch(
            cfg.seed,
            Purpose::Training,
            iteration * cfg.batch_size as u64,
            cfg.batch_size,
        )?;
        scaling.apply(&mut batch.features, pilot_dim);
        let lg = crate::gnn::loss_and_gradient(
            &net,
            p,
            &batch.features,
            &batch.links,
            cfg.utility,
            system.downlink_power,
            system.downlink_noise,
        )?;
        Ok((lg.loss, lg.gradient))
    };
    let mut validate = |p: &GnnParameters| -> Result<f64> {
        let policy = Policy {
            net: net.clone(),
            params: p.clone(),
            scaling,
        };
        Ok(mean(&batch_utilities(&policy, &validation, &system, cfg.utility)?))
    };
    Loop {
        cfg,
        template,
        maximize: true,
    }
    .run(params, &mut step, &mut validate, observer)
}

/// Train the channel-estimation network on the mean squared error.
pub fn train_estimator(
    pipeline: &DataPipeline,
    gnn: GnnConfig,
    cfg: &TrainingConfig,
    observer: &mut EpochObserver<'_>,
) -> Result<TrainingOutcome> {
    cfg.validate()?;
    let dims = pipeline.dims();
    let net = EstimationNet::new(gnn, dims)?;
    let (scaling, calib) = fit_scaling(pipeline, cfg)?;
    let energy: f64 = calib.combined.iter().flat_map(|f| f.iter()).map(|z| z.norm_sqr()).sum();
    let count: usize = calib.combined.iter().map(|f| f.len()).sum();
    let output_scale = (energy / count as f64).sqrt();
    if !(output_scale > 0.0 && output_scale.is_finite()) {
        return Err(Error::numerical("channel scale is zero or not finite"));
    }
    let params = net.init_parameters(&mut substream(cfg.seed, Purpose::Init, 1));
    let mut validation = pipeline.batch(cfg.seed, Purpose::Validation, 0, cfg.validation_size)?;
    let pilot_dim = dims.pilot_dim();
    scaling.apply(&mut validation.features, pilot_dim);
    let template = Checkpoint {
        kind: ModelKind::Estimator,
        gnn,
        dims,
        training: *cfg,
        system_fingerprint: pipeline.system.fingerprint(),
        plan_fingerprint: pipeline.plan.fingerprint(),
        pipeline_fingerprint: pipeline.fingerprint(),
        scaling,
        output_scale,
        params: params.clone(),
        validation: f64::NAN,
        epoch: 0,
    };
    let mut step = |p: &GnnParameters, iteration: u64| -> Result<(f64, Vec<f64>)> {
        let mut batch = pipeline.batch(
            cfg.seed,
            Purpose::Training,
            iteration * cfg.batch_size as u64,
            cfg.batch_size,
        )?;
        scaling.apply(&mut batch.features, pilot_dim);
        let out = net.loss_and_gradient(p, &batch.features, batch.users, &batch.combined, output_scale)?;
        Ok((out.loss / (output_scale * output_scale), out.gradient))
    };
    let mut validate = |p: &GnnParameters| -> Result<f64> {
        Ok(net
            .loss_and_gradient(
                p,
                &validation.features,
                validation.users,
                &validation.combined,
                output_scale,
            )?
            .loss)
    };
    Loop {
        cfg,
        template,
        maximize: false,
    }
    .run(params, &mut step, &mut validate, observer)
}

/// Mean utility with its standard error and every per-sample value.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub mean: f64,
    pub std_error: f64,
    pub samples: Vec<f64>,
}

impl Evaluation {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len() as f64;
        let m = mean(&samples);
        let var = if samples.len() > 1 {
            samples.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Evaluation {
            mean: m,
            std_error: (var / n).sqrt(),
            samples,
        }
    }
}

/// Utility of a policy on `n` test realizations of the pipeline it was trained on.
pub fn evaluate(ck: &Checkpoint, pipeline: &DataPipeline, n: usize, seed: u64, kind: Utility) -> Result<Evaluation> {
    ck.check_pipeline(pipeline)?;
    evaluate_transfer(ck, pipeline, n, seed, kind)
}

/// Like [`evaluate`] but only requires matching input dimensions, for
/// testing a policy under a different power, noise or user count.
pub fn evaluate_transfer(
    ck: &Checkpoint,
    pipeline: &DataPipeline,
    n: usize,
    seed: u64,
    kind: Utility,
) -> Result<Evaluation> {
    ck.check_dimensions(pipeline)?;
    if n == 0 {
        return Err(Error::config("evaluation needs at least one realization"));
    }
    let policy = Policy::from_checkpoint(ck)?;
    let batch = pipeline.batch(seed, Purpose::Test, 0, n)?;
    Ok(Evaluation::from_samples(batch_utilities(
        &policy,
        &batch,
        &pipeline.system,
        kind,
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_pipeline(mode: InputMode) -> DataPipeline {
        let system = SystemConfig {
            num_bs_antennas: 2,
            num_irs_elements: 4,
            irs_rows: 2,
            irs_cols: 2,
            num_users: 2,
            ..SystemConfig::desk()
        };
        let plan = PilotPlan::with_subframes(&system, 3, &mut substream(1, Purpose::Init, 9)).unwrap();
        DataPipeline::new(system, plan, UserPlacement::Uniform, mode).unwrap()
    }

    fn tiny_gnn() -> GnnConfig {
        GnnConfig {
            depth: 1,
            embed_hidden: 16,
            width: 12,
            layer_hidden: 12,
            input_mode: InputMode::Pilots,
        }
    }

    fn tiny_training() -> TrainingConfig {
        TrainingConfig {
            batch_size: 16,
            iterations_per_epoch: 5,
            validation_size: 32,
            max_epochs: 3,
            seed: 5,
            ..TrainingConfig::default()
        }
    }

    #[test]
    fn schedule_decays_every_interval() {
        let cfg = TrainingConfig::default();
        assert_eq!(cfg.learning_rate(0), 1e-3);
        assert_eq!(cfg.learning_rate(299), 1e-3);
        assert!((cfg.learning_rate(300) - 9.8e-4).abs() < 1e-15);
        assert!((cfg.learning_rate(601) - 9.604e-4).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        assert!(TrainingConfig::default().validate().is_ok());
        assert!(TrainingConfig {
            early_stop_patience: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            batch_size: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TrainingConfig {
            initial_lr: -1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }

    #[test]
    fn adam_first_step_moves_by_the_learning_rate() {
        let mut adam = Adam::new(2);
        let mut p = vec![1.0, -1.0];
        adam.step(&mut p, &[0.5, -2.0], 0.1);
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 0.9).abs() < 1e-6);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut adam = Adam::new(1);
        let mut p = vec![3.0];
        for _ in 0..2000 {
            let g = vec![2.0 * (p[0] - 1.0)];
            adam.step(&mut p, &g, 0.05);
        }
        assert!((p[0] - 1.0).abs() < 1e-3);
    }

    #[test]
    fn batches_are_reproducible_and_streams_disjoint() {
        let pipe = tiny_pipeline(InputMode::Pilots);
        let a = pipe.batch(3, Purpose::Training, 0, 8).unwrap();
        let b = pipe.batch(3, Purpose::Training, 0, 8).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.links, b.links);
        // an offset batch reproduces the tail of a longer one
        let c = pipe.batch(3, Purpose::Training, 4, 4).unwrap();
        assert_eq!(c.features, a.features.slice(ndarray::s![8.., ..]).to_owned());
        let v = pipe.batch(3, Purpose::Validation, 0, 8).unwrap();
        assert_ne!(v.features, a.features);
        assert_eq!(a.len(), 8);
        assert_eq!(a.features.nrows(), 16);
        assert_eq!(a.combined.len(), 16);
    }

    #[test]
    fn locations_are_appended_to_features() {
        let pipe = tiny_pipeline(InputMode::PilotsAndLocations);
        let b = pipe.batch(4, Purpose::Test, 0, 2).unwrap();
        assert_eq!(b.features.ncols(), 2 * 2 * 3 + 3);
        let loc = b.placements[1].user_locations[0];
        assert_eq!(b.features[[2, 12]], loc[0]);
        assert_eq!(b.features[[2, 14]], loc[2]);
    }

    #[test]
    fn fixed_placement_is_used() {
        let mut pipe = tiny_pipeline(InputMode::Pilots);
        let p = Placement::new(&pipe.system, vec![[10.0, 0.0, -20.0], [20.0, 5.0, -20.0]]).unwrap();
        pipe.placement = UserPlacement::Fixed(p.clone());
        let b = pipe.batch(0, Purpose::Test, 0, 3).unwrap();
        assert!(b.placements.iter().all(|q| *q == p));
        let wrong = Placement {
            user_locations: vec![[10.0, 0.0, -20.0]],
        };
        assert!(DataPipeline::new(
            pipe.system.clone(),
            pipe.plan.clone(),
            UserPlacement::Fixed(wrong),
            InputMode::Pilots
        )
        .is_err());
    }

    #[test]
    fn training_is_deterministic_and_keeps_the_best() {
        let pipe = tiny_pipeline(InputMode::Pilots);
        let cfg = tiny_training();
        let mut seen = Vec::new();
        let a = train_policy(&pipe, tiny_gnn(), &cfg, &mut |r, _, _| seen.push(r.clone())).unwrap();
        let b = train_policy(&pipe, tiny_gnn(), &cfg, &mut |_, _, _| {}).unwrap();
        assert_eq!(a.best.params, b.best.params);
        assert_eq!(a.history, b.history);
        assert_eq!(seen.len(), a.history.len());
        let best = a.history.iter().map(|r| r.validation).fold(f64::NEG_INFINITY, f64::max);
        assert_eq!(a.best.validation, best);
        assert_eq!(a.history.last().unwrap().iteration, 15);
        let e1 = evaluate(&a.best, &pipe, 20, 1, Utility::Sum).unwrap();
        let e2 = evaluate(&a.best, &pipe, 20, 1, Utility::Sum).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.samples.len(), 20);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let pipe = tiny_pipeline(InputMode::Pilots);
        let net = Gnn::new(tiny_gnn(), pipe.dims()).unwrap();
        let params = net.init_parameters(&mut substream(0, Purpose::Init, 0));
        let cfg = TrainingConfig {
            early_stop_patience: 2,
            max_epochs: 10,
            ..tiny_training()
        };
        let template = Checkpoint {
            kind: ModelKind::Policy,
            gnn: tiny_gnn(),
            dims: pipe.dims(),
            training: cfg,
            system_fingerprint: 0,
            plan_fingerprint: 0,
            pipeline_fingerprint: 0,
            scaling: FeatureScaling::default(),
            output_scale: 1.0,
            params: params.clone(),
            validation: 0.0,
            epoch: 0,
        };
        let scores = [1.0, 2.0, 3.0, 2.5, 2.9, 4.0];
        let mut calls = 0;
        let mut validate = |_: &GnnParameters| -> Result<f64> {
            calls += 1;
            Ok(scores[calls - 1])
        };
        let n = params.len();
        let mut step = |_: &GnnParameters, _: u64| -> Result<(f64, Vec<f64>)> { Ok((0.0, vec![0.0; n])) };
        let out = Loop {
            cfg: &cfg,
            template,
            maximize: true,
        }
        .run(params, &mut step, &mut validate, &mut |_, _, _| {})
        .unwrap();
        assert!(out.stopped_early);
        assert_eq!(out.history.len(), 5);
        assert_eq!(out.best.epoch, 2);
        assert_eq!(out.best.validation, 3.0);
    }

    #[test]
    fn divergence_is_reported() {
        let pipe = tiny_pipeline(InputMode::Pilots);
        let cfg = TrainingConfig {
            initial_lr: f64::INFINITY,
            ..tiny_training()
        };
        // the config check rejects a non-finite rate only through the step
        let err = train_policy(&pipe, tiny_gnn(), &cfg, &mut |_, _, _| {}).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }), "{err:?}");
    }

    #[test]
    fn evaluation_rejects_a_foreign_pipeline() {
        let pipe = tiny_pipeline(InputMode::Pilots);
        let out = train_policy(
            &pipe,
            tiny_gnn(),
            &TrainingConfig {
                max_epochs: 1,
                ..tiny_training()
            },
            &mut |_, _, _| {},
        )
        .unwrap();
        let mut other = pipe.clone();
        other.system.downlink_power *= 2.0;
        assert!(matches!(
            evaluate(&out.best, &other, 5, 0, Utility::Sum),
            Err(Error::Config(_))
        ));
        assert!(evaluate_transfer(&out.best, &other, 5, 0, Utility::Sum).is_ok());
    }

    #[test]
    fn estimator_beats_the_zero_predictor() {
        let pipe = tiny_pipeline(InputMode::Pilots);
        let cfg = TrainingConfig {
            initial_lr: 1e-3,
            max_epochs: 4,
            iterations_per_epoch: 20,
            batch_size: 32,
            ..tiny_training()
        };
        let out = train_estimator(&pipe, tiny_gnn(), &cfg, &mut |_, _, _| {}).unwrap();
        let est = Estimator::from_checkpoint(&out.best).unwrap();
        let test = pipe.batch(9, Purpose::Test, 0, 100).unwrap();
        let f_hat = est.estimate(&test).unwrap();
        let mse: f64 = f_hat
            .iter()
            .zip(&test.combined)
            .map(|(a, b)| (a - b).iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        let zero: f64 = test
            .combined
            .iter()
            .map(|b| b.iter().map(|z| z.norm_sqr()).sum::<f64>())
            .sum();
        assert!(mse < zero, "{mse} vs {zero}");
        assert!(Policy::from_checkpoint(&out.best).is_err());
    }
}
