//! Experiment spec files.
//!
//! A spec is a TOML document layered over a named profile: every key left out
//! of the file keeps the profile's value. Powers are given in dBm here and
//! converted to milliwatts when the core configuration is built.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use irs_core::gnn::InputMode;
use irs_core::hash::Fnv64;
use irs_core::pilot::PilotPlan;
use irs_core::rng::{substream, Purpose};
use irs_core::scenario::{dbm_to_mw, Point3, Region};
use irs_core::train::{DataPipeline, TrainingConfig, UserPlacement};
use irs_core::{GnnConfig, Placement, SystemConfig, Utility};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

const DESK: &str = include_str!("../profiles/desk.toml");
const FULL: &str = include_str!("../profiles/full.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Profile {
    Desk,
    Full,
}

impl Profile {
    fn source(self) -> &'static str {
        match self {
            Profile::Desk => DESK,
            Profile::Full => FULL,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSection {
    pub antennas: usize,
    pub irs_rows: usize,
    pub irs_cols: usize,
    pub users: usize,
    pub downlink_power_dbm: f64,
    pub uplink_power_dbm: f64,
    pub downlink_noise_dbm: f64,
    pub uplink_noise_dbm: f64,
    pub rician_factor: f64,
    pub bs_location: Point3,
    pub irs_location: Point3,
    pub region_min: Point3,
    pub region_max: Point3,
    /// Pins every realization to these user locations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_users: Option<Vec<Point3>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PilotSection {
    /// Total pilot length `L`; a multiple of the user count.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GnnSection {
    pub depth: usize,
    pub embed_hidden: usize,
    pub width: usize,
    pub layer_hidden: usize,
    pub input_mode: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    pub initial_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: u64,
    pub iterations_per_epoch: usize,
    pub batch_size: usize,
    pub early_stop_patience: usize,
    pub validation_size: usize,
    pub max_epochs: usize,
}

/// Overrides for the channel-estimation network; the rest follows `[training]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EstimatorSection {
    pub initial_lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub realizations: usize,
    pub lmmse_samples: usize,
    pub methods: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSection {
    pub axis: String,
    pub values: Vec<f64>,
    /// Train once on the spec's own point and evaluate that network along the axis.
    pub reuse_checkpoint: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArrayResponseSection {
    pub azimuth_points: usize,
    pub elevation_points: usize,
    pub bs_points: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub experiment: String,
    pub seed: u64,
    pub utility: String,
    pub system: SystemSection,
    pub pilots: PilotSection,
    pub gnn: GnnSection,
    pub training: TrainingSection,
    pub estimator: EstimatorSection,
    pub evaluation: EvaluationSection,
    pub sweep: SweepSection,
    pub array_response: ArrayResponseSection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    Gnn,
    GnnLocations,
    LmmseBcd,
    EstGnnBcd,
    PerfectCsiBcd,
    RandomPhase,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Gnn,
        Method::GnnLocations,
        Method::LmmseBcd,
        Method::EstGnnBcd,
        Method::PerfectCsiBcd,
        Method::RandomPhase,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Gnn => "gnn",
            Method::GnnLocations => "gnn+locations",
            Method::LmmseBcd => "lmmse+bcd",
            Method::EstGnnBcd => "estgnn+bcd",
            Method::PerfectCsiBcd => "perfect-csi-bcd",
            Method::RandomPhase => "random-phase",
        }
    }

    /// Whether the method needs a trained network.
    pub fn is_learned(self) -> bool {
        matches!(self, Method::Gnn | Method::GnnLocations | Method::EstGnnBcd)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| SimError::config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    PilotLength,
    DownlinkPowerDbm,
    UplinkPowerDbm,
    Users,
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::PilotLength => "pilot_length",
            SweepAxis::DownlinkPowerDbm => "downlink_power_dbm",
            SweepAxis::UplinkPowerDbm => "uplink_power_dbm",
            SweepAxis::Users => "users",
        }
    }

    fn is_count(self) -> bool {
        matches!(self, SweepAxis::PilotLength | SweepAxis::Users)
    }
}

impl FromStr for SweepAxis {
    type Err = SimError;

    fn from_str(s: &str) -> Result<Self> {
        [
            SweepAxis::PilotLength,
            SweepAxis::DownlinkPowerDbm,
            SweepAxis::UplinkPowerDbm,
            SweepAxis::Users,
        ]
        .into_iter()
        .find(|a| a.name() == s)
        .ok_or_else(|| SimError::config(format!("unknown sweep axis '{s}'")))
    }
}

/// Recursively overlay `top` on `base`.
fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, value) => {
                base.insert(key, value);
            }
        }
    }
}

fn parse_table(text: &str, origin: &str) -> Result<toml::Table> {
    text.parse::<toml::Table>()
        .map_err(|e| SimError::config(format!("{origin}: {e}")))
}

impl ExperimentSpec {
    pub fn profile(profile: Profile) -> Self {
        Self::layered(profile, "").expect("built-in profiles are valid")
    }

    /// Parse `text` on top of `profile` and validate the result.
    pub fn layered(profile: Profile, text: &str) -> Result<Self> {
        let mut table = parse_table(profile.source(), "profile")?;
        merge(&mut table, parse_table(text, "spec")?);
        let spec: ExperimentSpec = toml::Value::Table(table)
            .try_into()
            .map_err(|e| SimError::config(format!("spec: {e}")))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(profile: Profile, path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
        Self::layered(profile, &text).map_err(|e| match e {
            SimError::Config(msg) => SimError::config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("spec serializes")
    }

    /// Digest of the resolved spec, used to name output directories.
    pub fn digest(&self, command: &str) -> u64 {
        let mut h = Fnv64::new();
        h.bytes(command.as_bytes()).bytes(&[0]);
        h.bytes(serde_json::to_string(self).expect("spec serializes").as_bytes());
        h.finish()
    }

    pub fn utility_kind(&self) -> Result<Utility> {
        Ok(self.utility.parse::<Utility>()?)
    }

    pub fn input_mode(&self) -> Result<InputMode> {
        Ok(self.gnn.input_mode.parse::<InputMode>()?)
    }

    pub fn methods(&self) -> Result<Vec<Method>> {
        let mut out = Vec::new();
        for name in &self.evaluation.methods {
            let m: Method = name.parse()?;
            if out.contains(&m) {
                return Err(SimError::config(format!("method '{name}' listed twice")));
            }
            out.push(m);
        }
        Ok(out)
    }

    pub fn sweep_axis(&self) -> Result<SweepAxis> {
        self.sweep.axis.parse()
    }

    pub fn system_config(&self) -> Result<SystemConfig> {
        let s = &self.system;
        let config = SystemConfig {
            num_bs_antennas: s.antennas,
            num_irs_elements: s.irs_rows * s.irs_cols,
            irs_rows: s.irs_rows,
            irs_cols: s.irs_cols,
            num_users: s.users,
            downlink_power: dbm_to_mw(s.downlink_power_dbm),
            uplink_power: dbm_to_mw(s.uplink_power_dbm),
            downlink_noise: dbm_to_mw(s.downlink_noise_dbm),
            uplink_noise: dbm_to_mw(s.uplink_noise_dbm),
            rician_factor: s.rician_factor,
            bs_location: s.bs_location,
            irs_location: s.irs_location,
            user_region: Region::new(s.region_min, s.region_max),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn placement(&self, system: &SystemConfig) -> Result<UserPlacement> {
        match &self.system.fixed_users {
            None => Ok(UserPlacement::Uniform),
            Some(users) => Ok(UserPlacement::Fixed(Placement::new(system, users.clone())?)),
        }
    }

    /// IRS training patterns are drawn from the experiment seed, so every
    /// command run with the same spec sees the same pilots.
    pub fn pilot_plan(&self, system: &SystemConfig) -> Result<PilotPlan> {
        let mut rng = substream(self.seed, Purpose::IrsTraining, 0);
        Ok(PilotPlan::new(system, self.pilots.length, &mut rng)?)
    }

    pub fn pipeline(&self, mode: InputMode) -> Result<DataPipeline> {
        let system = self.system_config()?;
        let plan = self.pilot_plan(&system)?;
        let placement = self.placement(&system)?;
        Ok(DataPipeline::new(system, plan, placement, mode)?)
    }

    pub fn gnn_config(&self, mode: InputMode) -> GnnConfig {
        GnnConfig {
            depth: self.gnn.depth,
            embed_hidden: self.gnn.embed_hidden,
            width: self.gnn.width,
            layer_hidden: self.gnn.layer_hidden,
            input_mode: mode,
        }
    }

    pub fn training_config(&self) -> Result<TrainingConfig> {
        let t = &self.training;
        let cfg = TrainingConfig {
            initial_lr: t.initial_lr,
            lr_decay_factor: t.lr_decay_factor,
            lr_decay_every: t.lr_decay_every,
            iterations_per_epoch: t.iterations_per_epoch,
            batch_size: t.batch_size,
            early_stop_patience: t.early_stop_patience,
            validation_size: t.validation_size,
            max_epochs: t.max_epochs,
            seed: self.seed,
            utility: self.utility_kind()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn estimator_training_config(&self) -> Result<TrainingConfig> {
        let cfg = TrainingConfig {
            initial_lr: self.estimator.initial_lr,
            ..self.training_config()?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// The spec with the sweep axis set to `value`.
    pub fn at_point(&self, axis: SweepAxis, value: f64) -> Result<Self> {
        let mut spec = self.clone();
        let count = || -> Result<usize> {
            if value >= 1.0 && value.fract() == 0.0 {
                Ok(value as usize)
            } else {
                Err(SimError::config(format!(
                    "{} must be a positive integer, got {value}",
                    axis.name()
                )))
            }
        };
        match axis {
            SweepAxis::PilotLength => spec.pilots.length = count()?,
            SweepAxis::DownlinkPowerDbm => spec.system.downlink_power_dbm = value,
            SweepAxis::UplinkPowerDbm => spec.system.uplink_power_dbm = value,
            SweepAxis::Users => {
                // Keep the number of sub-frames, so networks transfer across K.
                let subframes = self.pilots.length / self.system.users;
                spec.system.users = count()?;
                spec.pilots.length = subframes * spec.system.users;
                if let Some(fixed) = &spec.system.fixed_users {
                    if fixed.len() != spec.system.users {
                        return Err(SimError::config("a user-count sweep cannot use fixed user locations"));
                    }
                }
            }
        }
        Ok(spec)
    }

    /// Every check that does not need any simulation.
    pub fn validate(&self) -> Result<()> {
        if self.experiment.is_empty() {
            return Err(SimError::config("experiment id must not be empty"));
        }
        self.utility_kind()?;
        self.input_mode()?;
        self.methods()?;
        let system = self.system_config()?;
        self.check_pilot_length(self.pilots.length, system.num_users)?;
        self.placement(&system)?;
        self.gnn_config(InputMode::Pilots).validate()?;
        self.training_config()?;
        self.estimator_training_config()?;
        if self.evaluation.realizations == 0 {
            return Err(SimError::config("evaluation.realizations must be positive"));
        }
        if self.evaluation.lmmse_samples < 2 {
            return Err(SimError::config("evaluation.lmmse_samples must be at least 2"));
        }
        let a = &self.array_response;
        if a.azimuth_points < 2 || a.elevation_points < 2 || a.bs_points < 2 {
            return Err(SimError::config(
                "array-response grids need at least two points per axis",
            ));
        }
        let axis = self.sweep_axis()?;
        if self.sweep.values.is_empty() {
            return Err(SimError::config("sweep.values must not be empty"));
        }
        for &v in &self.sweep.values {
            if !v.is_finite() || (axis.is_count() && v <= 0.0) {
                return Err(SimError::config(format!(
                    "sweep value {v} is not allowed on {}",
                    axis.name()
                )));
            }
            let point = self.at_point(axis, v)?;
            point.system_config()?;
            self.check_pilot_length(point.pilots.length, point.system.users)?;
        }
        Ok(())
    }

    fn check_pilot_length(&self, length: usize, users: usize) -> Result<()> {
        if length == 0 || length % users != 0 {
            return Err(SimError::config(format!(
                "pilot length {length} is not a positive multiple of the user count {users}"
            )));
        }
        Ok(())
    }
}
