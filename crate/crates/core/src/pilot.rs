//! Uplink pilot protocol.
//!
//! The pilot phase of `L` symbols is split into `tau` sub-frames of `L0 = K`
//! symbols. Users send mutually orthogonal sequences in every sub-frame while
//! the IRS holds one training pattern per sub-frame. Matched filtering each
//! sub-frame against a user's sequence isolates `F_k q(t)` plus noise.

use core::f64::consts::PI;

use ndarray::{s, Array2};
use rand::Rng;

use crate::hash::Fnv64;
use crate::prelude::*;
use crate::rng::{complex_gaussian, random_phase};
use crate::scenario::{ChannelSet, SystemConfig};
use crate::{CMatrix, CVector, Error, Result, C64};

/// Pilot sequences and IRS training patterns for one experiment.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotPlan {
    /// `L = tau * L0`
    pub total_length: usize,
    /// `tau`
    pub subframes: usize,
    /// `L0`, always the number of users.
    pub subframe_length: usize,
    /// `K x L0`; row `k` holds the symbols user `k` sends in each sub-frame.
    pub pilot_matrix: CMatrix,
    /// `(N + 1) x tau`; column `t` is `[1; v(t)]`.
    pub irs_training: CMatrix,
    pub uplink_power: f64,
}

/// Scaled DFT rows: `X X^H = K * P_u * I`.
pub fn make_pilot_matrix(num_users: usize, uplink_power: f64) -> CMatrix {
    let amp = uplink_power.sqrt();
    let k = num_users as f64;
    Array2::from_shape_fn((num_users, num_users), |(i, l)| {
        C64::from_polar(amp, -2.0 * PI * (i * l) as f64 / k)
    })
}

/// IRS training matrix `Q` with an all-ones first row and unit-modulus entries.
///
/// With `tau >= N + 1` the first `N + 1` rows of a `tau x tau` DFT are used;
/// shorter training draws independent uniform phases.
pub fn make_irs_training<R: Rng + ?Sized>(num_elements: usize, subframes: usize, rng: &mut R) -> CMatrix {
    let rows = num_elements + 1;
    if subframes >= rows {
        let d = subframes as f64;
        Array2::from_shape_fn((rows, subframes), |(i, t)| {
            C64::from_polar(1.0, -2.0 * PI * (i * t) as f64 / d)
        })
    } else {
        let mut q = Array2::from_elem((rows, subframes), C64::new(1.0, 0.0));
        for t in 0..subframes {
            for i in 1..rows {
                q[[i, t]] = random_phase(rng);
            }
        }
        q
    }
}

impl PilotPlan {
    /// Plan with `total_length` pilot symbols; must be a multiple of `K`.
    pub fn new<R: Rng + ?Sized>(config: &SystemConfig, total_length: usize, rng: &mut R) -> Result<Self> {
        let k = config.num_users;
        if total_length == 0 || total_length % k != 0 {
            return Err(Error::config(format!(
                "pilot length {total_length} is not a positive multiple of K = {k}"
            )));
        }
        Self::with_subframes(config, total_length / k, rng)
    }

    pub fn with_subframes<R: Rng + ?Sized>(config: &SystemConfig, subframes: usize, rng: &mut R) -> Result<Self> {
        if subframes == 0 {
            return Err(Error::config("at least one sub-frame is required"));
        }
        let pilot_matrix = make_pilot_matrix(config.num_users, config.uplink_power);
        let irs_training = make_irs_training(config.num_irs_elements, subframes, rng);
        Self::from_parts(pilot_matrix, irs_training, config.uplink_power)
    }

    /// Assemble a plan from explicit matrices, checking the protocol invariants.
    pub fn from_parts(pilot_matrix: CMatrix, irs_training: CMatrix, uplink_power: f64) -> Result<Self> {
        let (k, l0) = pilot_matrix.dim();
        if k != l0 {
            return Err(Error::config(format!(
                "sub-frame length {l0} must equal the number of users {k}"
            )));
        }
        let gram = pilot_matrix.dot(&pilot_matrix.t().mapv(|z| z.conj()));
        let target = l0 as f64 * uplink_power;
        for i in 0..k {
            for j in 0..k {
                let expect = if i == j { target } else { 0.0 };
                if (gram[[i, j]] - expect).norm() > 1e-9 * target {
                    return Err(Error::config("pilot sequences are not orthogonal with power L0*P_u"));
                }
            }
        }
        if irs_training
            .row(0)
            .iter()
            .any(|z| (z - C64::new(1.0, 0.0)).norm() > 1e-12)
        {
            return Err(Error::config("first row of the IRS training matrix must be all ones"));
        }
        if irs_training.iter().any(|z| (z.norm() - 1.0).abs() > 1e-9) {
            return Err(Error::config("IRS training entries must have unit modulus"));
        }
        let subframes = irs_training.ncols();
        Ok(PilotPlan {
            total_length: subframes * l0,
            subframes,
            subframe_length: l0,
            pilot_matrix,
            irs_training,
            uplink_power,
        })
    }

    pub fn num_users(&self) -> usize {
        self.pilot_matrix.nrows()
    }

    pub fn num_elements(&self) -> usize {
        self.irs_training.nrows() - 1
    }

    /// IRS reflection vector held during sub-frame `t`.
    pub fn training_vector(&self, t: usize) -> CVector {
        self.irs_training.slice(s![1.., t]).to_owned()
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = Fnv64::new();
        h.bytes(b"PilotPlan/v1");
        h.u64(self.subframes as u64).u64(self.subframe_length as u64);
        h.f64(self.uplink_power);
        for z in self.pilot_matrix.iter().chain(self.irs_training.iter()) {
            h.f64(z.re).f64(z.im);
        }
        h.finish()
    }
}

/// Decorrelated per-user observations `Y~_k = F_k Q + N~`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReceivedPilots {
    /// `M x tau` per user.
    pub per_user: Vec<CMatrix>,
    /// Per-entry variance of `N~`.
    pub effective_noise_variance: f64,
}

/// Received pilots `Y` (`M x L`) at the BS for one channel realization.
pub fn simulate_uplink<R: Rng + ?Sized>(
    channels: &ChannelSet,
    plan: &PilotPlan,
    noise_variance: f64,
    rng: &mut R,
) -> Result<CMatrix> {
    let k = plan.num_users();
    if channels.num_users() != k {
        return Err(Error::shape(format!(
            "{} users in channels, {k} in pilot plan",
            channels.num_users()
        )));
    }
    let (m, cols) = channels.combined[0].dim();
    if cols != plan.irs_training.nrows() {
        return Err(Error::shape("IRS size differs between channels and pilot plan"));
    }
    let l0 = plan.subframe_length;
    let noise_std = noise_variance.sqrt();
    let mut raw = Array2::zeros((m, plan.total_length));
    for t in 0..plan.subframes {
        let q = plan.irs_training.column(t);
        let received: Vec<CVector> = channels.combined.iter().map(|f| f.dot(&q)).collect();
        for l in 0..l0 {
            let mut col = raw.column_mut(t * l0 + l);
            for (user, r) in received.iter().enumerate() {
                let x = plan.pilot_matrix[[user, l]];
                col.scaled_add(x, r);
            }
            if noise_std > 0.0 {
                col.mapv_inplace(|z| z + complex_gaussian(rng) * noise_std);
            }
        }
    }
    Ok(raw)
}

/// Matched-filter the raw pilots of every sub-frame against each user's sequence.
pub fn decorrelate(raw: &CMatrix, plan: &PilotPlan, noise_variance: f64) -> Result<ReceivedPilots> {
    if raw.ncols() != plan.total_length {
        return Err(Error::shape(format!(
            "{} received symbols for a pilot plan of length {}",
            raw.ncols(),
            plan.total_length
        )));
    }
    let m = raw.nrows();
    let l0 = plan.subframe_length;
    let scale = 1.0 / (l0 as f64 * plan.uplink_power);
    let per_user = (0..plan.num_users())
        .map(|k| {
            // x_k is the conjugate of row k
            let xk: CVector = plan.pilot_matrix.row(k).mapv(|z| z.conj());
            let mut y = Array2::zeros((m, plan.subframes));
            for t in 0..plan.subframes {
                let block = raw.slice(s![.., t * l0..(t + 1) * l0]);
                y.column_mut(t).assign(&(block.dot(&xk) * scale));
            }
            y
        })
        .collect();
    Ok(ReceivedPilots {
        per_user,
        effective_noise_variance: noise_variance * scale,
    })
}

/// Simulate and decorrelate in one step.
pub fn observe<R: Rng + ?Sized>(
    channels: &ChannelSet,
    plan: &PilotPlan,
    noise_variance: f64,
    rng: &mut R,
) -> Result<ReceivedPilots> {
    let raw = simulate_uplink(channels, plan, noise_variance, rng)?;
    decorrelate(&raw, plan, noise_variance)
}
