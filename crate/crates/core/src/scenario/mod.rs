//! System configuration, geometry and random channel synthesis.

mod channel;
mod geometry;

pub use channel::{sample_channels, CascadedChannels, ChannelSet};
pub use geometry::{
    angles_between, array_response_bs, array_response_irs, db_to_amplitude, direction_from_angles, distance,
    irs_pair_steering, pathloss_direct_db, pathloss_irs_db, steering_bs, steering_irs,
};

use rand::Rng;

use crate::hash::Fnv64;
use crate::prelude::*;
use crate::{Error, Result};

/// Cartesian coordinates in meters.
pub type Point3 = [f64; 3];

pub fn dbm_to_mw(dbm: f64) -> f64 {
    10f64.powf(dbm / 10.0)
}

pub fn mw_to_dbm(mw: f64) -> f64 {
    10.0 * mw.log10()
}

/// Axis-aligned box; a degenerate extent pins that coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Region {
    pub min: Point3,
    pub max: Point3,
}

impl Region {
    pub fn new(min: Point3, max: Point3) -> Self {
        Region { min, max }
    }

    pub fn contains(&self, p: &Point3) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Point3 {
        core::array::from_fn(|i| {
            let u: f64 = rng.random();
            self.min[i] + u * (self.max[i] - self.min[i])
        })
    }
}

/// Dimensions, powers and geometry of one IRS-assisted downlink.
///
/// Powers are linear milliwatts; dBm only appears at the file level.
#[derive(Debug, Clone, PartialEq)]
pub struct SystemConfig {
    /// `M`
    pub num_bs_antennas: usize,
    /// `N = irs_rows * irs_cols`
    pub num_irs_elements: usize,
    pub irs_rows: usize,
    pub irs_cols: usize,
    /// `K`
    pub num_users: usize,
    pub downlink_power: f64,
    pub uplink_power: f64,
    pub downlink_noise: f64,
    pub uplink_noise: f64,
    /// Ratio of line-of-sight to scattered power on the IRS links. May be infinite.
    pub rician_factor: f64,
    pub bs_location: Point3,
    pub irs_location: Point3,
    pub user_region: Region,
}

impl SystemConfig {
    /// Sum-rate layout: `M = 8`, `N = 100` as 10x10, `K = 3`.
    pub fn sum_rate_reference() -> Self {
        SystemConfig {
            num_bs_antennas: 8,
            num_irs_elements: 100,
            irs_rows: 10,
            irs_cols: 10,
            num_users: 3,
            downlink_power: dbm_to_mw(20.0),
            uplink_power: dbm_to_mw(15.0),
            downlink_noise: dbm_to_mw(-85.0),
            uplink_noise: dbm_to_mw(-100.0),
            rician_factor: 10.0,
            bs_location: [100.0, 100.0, 0.0],
            irs_location: [0.0, 0.0, 0.0],
            user_region: Region::new([5.0, -35.0, -20.0], [35.0, 35.0, -20.0]),
        }
    }

    /// Max-min layout: `M = 4`, `N = 20` as 2x10, `K = 3`, users in `[5,15] x [-15,15]`.
    pub fn max_min_reference() -> Self {
        SystemConfig {
            num_bs_antennas: 4,
            num_irs_elements: 20,
            irs_rows: 2,
            irs_cols: 10,
            user_region: Region::new([5.0, -15.0, -20.0], [15.0, 15.0, -20.0]),
            ..Self::sum_rate_reference()
        }
    }

    /// Small profile used by the acceptance suite: `M = 4`, `N = 16` as 4x4, `K = 2`.
    pub fn desk() -> Self {
        SystemConfig {
            num_bs_antennas: 4,
            num_irs_elements: 16,
            irs_rows: 4,
            irs_cols: 4,
            num_users: 2,
            ..Self::sum_rate_reference()
        }
    }

    /// Layout used to visualize learned array responses; the BS sits at `(100, -100, 0)`.
    pub fn array_response_reference() -> Self {
        SystemConfig {
            num_users: 1,
            bs_location: [100.0, -100.0, 0.0],
            ..Self::sum_rate_reference()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::config(format!("{name} must be positive")))
            } else {
                Ok(())
            }
        };
        positive("num_bs_antennas", self.num_bs_antennas)?;
        positive("num_irs_elements", self.num_irs_elements)?;
        positive("irs_rows", self.irs_rows)?;
        positive("irs_cols", self.irs_cols)?;
        positive("num_users", self.num_users)?;
        if self.irs_rows * self.irs_cols != self.num_irs_elements {
            return Err(Error::config(format!(
                "irs_rows * irs_cols = {} but num_irs_elements = {}",
                self.irs_rows * self.irs_cols,
                self.num_irs_elements
            )));
        }
        for (name, p) in [
            ("downlink_power", self.downlink_power),
            ("uplink_power", self.uplink_power),
            ("downlink_noise", self.downlink_noise),
            ("uplink_noise", self.uplink_noise),
        ] {
            if !(p > 0.0 && p.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {p}")));
            }
        }
        if !(self.rician_factor >= 0.0) {
            return Err(Error::config(format!(
                "rician_factor must be non-negative, got {}",
                self.rician_factor
            )));
        }
        let r = &self.user_region;
        if (0..3).any(|i| !(r.min[i] <= r.max[i])) {
            return Err(Error::config("user_region min exceeds max"));
        }
        if distance(&self.bs_location, &self.irs_location) == 0.0 {
            return Err(Error::config("BS and IRS locations coincide"));
        }
        Ok(())
    }

    /// Stable 64-bit digest of every field.
    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.bytes(b"SystemConfig/v1");
        for n in [
            self.num_bs_antennas,
            self.num_irs_elements,
            self.irs_rows,
            self.irs_cols,
            self.num_users,
        ] {
            h.u64(n as u64);
        }
        for x in [
            self.downlink_power,
            self.uplink_power,
            self.downlink_noise,
            self.uplink_noise,
            self.rician_factor,
        ] {
            h.f64(x);
        }
        for p in [
            &self.bs_location,
            &self.irs_location,
            &self.user_region.min,
            &self.user_region.max,
        ] {
            for &c in p {
                h.f64(c);
            }
        }
        h.finish()
    }

    /// Same system with a different user count; the user count is not part of
    /// the learned parameters, so generalization experiments swap it freely.
    pub fn with_users(&self, num_users: usize) -> Self {
        SystemConfig {
            num_users,
            ..self.clone()
        }
    }
}

/// User positions for one realization.
#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub user_locations: Vec<Point3>,
}

impl Placement {
    /// Fixed placement; every location must lie inside the configured region.
    pub fn new(config: &SystemConfig, user_locations: Vec<Point3>) -> Result<Self> {
        if user_locations.len() != config.num_users {
            return Err(Error::config(format!(
                "{} user locations for {} users",
                user_locations.len(),
                config.num_users
            )));
        }
        if let Some(p) = user_locations.iter().find(|p| !config.user_region.contains(p)) {
            return Err(Error::config(format!("user location {p:?} outside user_region")));
        }
        Ok(Placement { user_locations })
    }

    /// Users dropped uniformly and independently in the user region.
    pub fn uniform<R: Rng + ?Sized>(config: &SystemConfig, rng: &mut R) -> Self {
        let user_locations = (0..config.num_users).map(|_| config.user_region.sample(rng)).collect();
        Placement { user_locations }
    }
}
