//! Explicit channel-estimation baseline.
//!
//! Empirical first and second moments of `(Y~_k, F_k)` are collected from
//! simulated realizations and plugged into the linear MMSE estimator in its
//! matrix form, which treats the rows of `F_k` and of the noise as i.i.d.:
//!
//! `F^ = (Y - E[Y]) (E[(Y - E[Y])^H (Y - E[Y])])^-1 E[(Y - E[Y])^H (F - E[F])] + E[F]`.

use ndarray::{Array2, ArrayView2};

use crate::hash::Fnv64;
use crate::linalg::{adjoint, solve_hpd};
use crate::pilot::{observe, PilotPlan};
use crate::prelude::*;
use crate::rng::{substream, Purpose};
use crate::scenario::{sample_channels, Placement, SystemConfig};
use crate::{CMatrix, Error, Result, C64};

/// Relative ridge added to the observation autocovariance.
pub const RIDGE: f64 = 1e-10;

/// Moments of one user's observations and combined channel.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelStatistics {
    /// `E[Y~]`, `M x tau`.
    pub mean_observation: CMatrix,
    /// `E[(Y~ - E[Y~])^H (Y~ - E[Y~])]`, `tau x tau`.
    pub observation_covariance: CMatrix,
    /// `E[(Y~ - E[Y~])^H (F - E[F])]`, `tau x (N + 1)`.
    pub cross_covariance: CMatrix,
    /// `E[F]`, `M x (N + 1)`.
    pub mean_channel: CMatrix,
    pub sample_count: usize,
    /// Digest of the system configuration and pilot plan the moments belong to.
    pub fingerprint: u64,
}

/// Digest binding statistics to a `(SystemConfig, PilotPlan)` pair.
pub fn statistics_fingerprint(config: &SystemConfig, plan: &PilotPlan) -> u64 {
    let mut h = Fnv64::new();
    h.bytes(b"ChannelStatistics/v1");
    h.u64(config.fingerprint()).u64(plan.fingerprint());
    h.finish()
}

/// Streaming (Welford-style) accumulator of the moments.
#[derive(Debug, Clone)]
pub struct MomentAccumulator {
    count: usize,
    mean_y: CMatrix,
    mean_f: CMatrix,
    comoment_yy: CMatrix,
    comoment_yf: CMatrix,
}

impl MomentAccumulator {
    pub fn new(antennas: usize, subframes: usize, channel_cols: usize) -> Self {
        MomentAccumulator {
            count: 0,
            mean_y: Array2::zeros((antennas, subframes)),
            mean_f: Array2::zeros((antennas, channel_cols)),
            comoment_yy: Array2::zeros((subframes, subframes)),
            comoment_yf: Array2::zeros((subframes, channel_cols)),
        }
    }

    pub fn push(&mut self, y: &ArrayView2<'_, C64>, f: &ArrayView2<'_, C64>) -> Result<()> {
        if y.dim() != self.mean_y.dim() || f.dim() != self.mean_f.dim() {
            return Err(Error::shape("sample does not match accumulator dimensions"));
        }
        self.count += 1;
        let inv = 1.0 / self.count as f64;
        let dy_old = y - &self.mean_y;
        self.mean_y.scaled_add(C64::new(inv, 0.0), &dy_old);
        let df_old = f - &self.mean_f;
        self.mean_f.scaled_add(C64::new(inv, 0.0), &df_old);
        let dy_new = y - &self.mean_y;
        let df_new = f - &self.mean_f;
        let dy_old_h = adjoint(&dy_old.view());
        self.comoment_yy += &dy_old_h.dot(&dy_new);
        self.comoment_yf += &dy_old_h.dot(&df_new);
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn finish(self, fingerprint: u64) -> Result<ChannelStatistics> {
        if self.count < 2 {
            return Err(Error::config(format!(
                "at least two samples are needed, got {}",
                self.count
            )));
        }
        let n = C64::new(self.count as f64, 0.0);
        let mut cov = self.comoment_yy / n;
        // exact Hermitian symmetry
        let sym = (&cov + &adjoint(&cov.view())) * C64::new(0.5, 0.0);
        cov = sym;
        Ok(ChannelStatistics {
            mean_observation: self.mean_y,
            observation_covariance: cov,
            cross_covariance: self.comoment_yf / n,
            mean_channel: self.mean_f,
            sample_count: self.count,
            fingerprint,
        })
    }
}

/// Fit statistics from an explicit stream of `(Y~_k, F_k)` pairs.
pub fn fit_from_samples<'a, I>(samples: I, fingerprint: u64) -> Result<ChannelStatistics>
where
    I: IntoIterator<Item = (ArrayView2<'a, C64>, ArrayView2<'a, C64>)>,
{
    let mut it = samples.into_iter().peekable();
    let (y0, f0) = it.peek().ok_or_else(|| Error::config("no samples to fit statistics"))?;
    let mut acc = MomentAccumulator::new(y0.nrows(), y0.ncols(), f0.ncols());
    for (y, f) in it {
        acc.push(&y, &f)?;
    }
    acc.finish(fingerprint)
}

/// Per-user statistics from `n_samples` simulated realizations.
///
/// Users are drawn from the configured placement distribution, so every user
/// index shares the same statistics in expectation; they are still fitted
/// separately.
pub fn fit_statistics(
    config: &SystemConfig,
    plan: &PilotPlan,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<ChannelStatistics>> {
    config.validate()?;
    if n_samples < 2 {
        return Err(Error::config("n_samples must be at least 2"));
    }
    let m = config.num_bs_antennas;
    let cols = config.num_irs_elements + 1;
    let mut accs: Vec<MomentAccumulator> = (0..config.num_users)
        .map(|_| MomentAccumulator::new(m, plan.subframes, cols))
        .collect();
    for i in 0..n_samples {
        let mut rng = substream(seed, Purpose::LmmseFit, i as u64);
        let placement = Placement::uniform(config, &mut rng);
        let channels = sample_channels(config, &placement, &mut rng)?;
        let rx = observe(&channels, plan, config.uplink_noise, &mut rng)?;
        for (k, acc) in accs.iter_mut().enumerate() {
            acc.push(&rx.per_user[k].view(), &channels.combined[k].view())?;
        }
    }
    let fp = statistics_fingerprint(config, plan);
    accs.into_iter().map(|a| a.finish(fp)).collect()
}

impl ChannelStatistics {
    /// Exact moments when the rows of `F` are i.i.d. with mean `mean_row`-wise
    /// `mean_channel` and row covariance `row_covariance`, observed through
    /// `Y = F Q + N` with per-entry noise variance `noise_variance`.
    pub fn from_gaussian_prior(
        mean_channel: CMatrix,
        row_covariance: &CMatrix,
        irs_training: &CMatrix,
        noise_variance: f64,
        fingerprint: u64,
    ) -> Self {
        let m = C64::new(mean_channel.nrows() as f64, 0.0);
        let tau = irs_training.ncols();
        let qh = adjoint(&irs_training.view());
        let cross = qh.dot(row_covariance) * m;
        let mut cov = cross.dot(irs_training);
        for t in 0..tau {
            cov[[t, t]] += m * noise_variance;
        }
        ChannelStatistics {
            mean_observation: mean_channel.dot(irs_training),
            observation_covariance: cov,
            cross_covariance: cross,
            mean_channel,
            sample_count: usize::MAX,
            fingerprint,
        }
    }

    pub fn check_fingerprint(&self, expected: u64) -> Result<()> {
        if self.fingerprint != expected {
            return Err(Error::config(format!(
                "statistics fingerprint {:016x} does not match pipeline {:016x}",
                self.fingerprint, expected
            )));
        }
        Ok(())
    }
}

/// Precomputed LMMSE estimator for one user.
#[derive(Debug, Clone)]
pub struct LmmseEstimator {
    gain: CMatrix,
    mean_observation: CMatrix,
    mean_channel: CMatrix,
}

impl LmmseEstimator {
    pub fn new(stats: &ChannelStatistics) -> Result<Self> {
        let tau = stats.observation_covariance.nrows();
        let trace: f64 = (0..tau).map(|t| stats.observation_covariance[[t, t]].re).sum();
        let mut cov = stats.observation_covariance.clone();
        let ridge = RIDGE * trace / tau as f64;
        for t in 0..tau {
            cov[[t, t]] += ridge;
        }
        let gain = solve_hpd(&cov.view(), &stats.cross_covariance.view())?;
        Ok(LmmseEstimator {
            gain,
            mean_observation: stats.mean_observation.clone(),
            mean_channel: stats.mean_channel.clone(),
        })
    }

    pub fn estimate(&self, observation: &CMatrix) -> Result<CMatrix> {
        if observation.dim() != self.mean_observation.dim() {
            return Err(Error::shape(format!(
                "observation {:?}, statistics expect {:?}",
                observation.dim(),
                self.mean_observation.dim()
            )));
        }
        Ok((observation - &self.mean_observation).dot(&self.gain) + &self.mean_channel)
    }
}

/// One-shot LMMSE estimate of `F_k` from `Y~_k`.
pub fn estimate(observation: &CMatrix, stats: &ChannelStatistics) -> Result<CMatrix> {
    LmmseEstimator::new(stats)?.estimate(observation)
}

/// Least-squares estimate `Y Q^H (Q Q^H)^-1`; needs `Q` of full row rank.
pub fn ls_estimate(observation: &CMatrix, irs_training: &CMatrix) -> Result<CMatrix> {
    if observation.ncols() != irs_training.ncols() {
        return Err(Error::shape("observation and training lengths differ"));
    }
    let qh = adjoint(&irs_training.view());
    let gram = irs_training.dot(&qh);
    // X = Y Q^H (Q Q^H)^-1  <=>  (Q Q^H) X^H = Q Y^H
    let rhs = irs_training.dot(&adjoint(&observation.view()));
    let xh =
        solve_hpd(&gram.view(), &rhs.view()).map_err(|_| Error::numerical("IRS training matrix is rank deficient"))?;
    Ok(adjoint(&xh.view()))
}
