use ndarray::{s, Array1, Array2, Axis};
use rand::Rng;

use crate::prelude::*;
use crate::rng::complex_gaussian;
use crate::scenario::geometry::{
    angles_between, db_to_amplitude, distance, pathloss_direct_db, pathloss_irs_db, steering_bs, steering_irs,
};
use crate::scenario::{Placement, SystemConfig};
use crate::{CMatrix, CVector, Error, Result};

/// Per-user direct channels `h_d` and cascaded channels `A = G diag(h_r)`.
///
/// This is everything the downlink rate depends on, and is what the
/// optimizers consume whether the channels are true or estimated.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadedChannels {
    pub direct: Vec<CVector>,
    pub cascaded: Vec<CMatrix>,
}

impl CascadedChannels {
    pub fn new(direct: Vec<CVector>, cascaded: Vec<CMatrix>) -> Result<Self> {
        if direct.is_empty() || direct.len() != cascaded.len() {
            return Err(Error::shape(format!(
                "{} direct and {} cascaded channels",
                direct.len(),
                cascaded.len()
            )));
        }
        let m = direct[0].len();
        let n = cascaded[0].ncols();
        if direct.iter().any(|h| h.len() != m) || cascaded.iter().any(|a| a.dim() != (m, n)) {
            return Err(Error::shape("inconsistent per-user channel dimensions"));
        }
        Ok(CascadedChannels { direct, cascaded })
    }

    /// Split combined matrices `F_k = [h_d_k | A_k]`.
    pub fn from_combined(combined: &[CMatrix]) -> Result<Self> {
        let direct = combined.iter().map(|f| f.column(0).to_owned()).collect();
        let cascaded = combined.iter().map(|f| f.slice(s![.., 1..]).to_owned()).collect();
        Self::new(direct, cascaded)
    }

    pub fn num_users(&self) -> usize {
        self.direct.len()
    }

    pub fn num_antennas(&self) -> usize {
        self.direct[0].len()
    }

    pub fn num_elements(&self) -> usize {
        self.cascaded[0].ncols()
    }

    /// `h_d_k + A_k v`.
    pub fn effective(&self, k: usize, v: &CVector) -> CVector {
        effective_channel(&self.direct[k], &self.cascaded[k], v)
    }

    /// Effective channels of every user for reflection vector `v`.
    pub fn effective_all(&self, v: &CVector) -> Vec<CVector> {
        (0..self.num_users()).map(|k| self.effective(k, v)).collect()
    }

    /// Users reordered so that new user `i` is old user `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        CascadedChannels {
            direct: perm.iter().map(|&i| self.direct[i].clone()).collect(),
            cascaded: perm.iter().map(|&i| self.cascaded[i].clone()).collect(),
        }
    }

    /// Subset of users, in the given order.
    pub fn select(&self, users: &[usize]) -> Self {
        self.permuted(users)
    }
}

pub(crate) fn effective_channel(direct: &CVector, cascaded: &CMatrix, v: &CVector) -> CVector {
    direct + &cascaded.dot(v)
}

/// One channel realization.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSet {
    /// IRS-to-BS channel `G`, `M x N`.
    pub g: CMatrix,
    /// User-to-IRS channels `h_r_k`, length `N`.
    pub h_r: Vec<CVector>,
    /// Direct channels and cascades `A_k = G diag(h_r_k)`.
    pub links: CascadedChannels,
    /// Combined matrices `F_k = [h_d_k | A_k]`, `M x (N + 1)`.
    pub combined: Vec<CMatrix>,
}

impl ChannelSet {
    /// Derive cascades and combined matrices from the physical channels.
    pub fn from_parts(g: CMatrix, h_d: Vec<CVector>, h_r: Vec<CVector>) -> Result<Self> {
        let (m, n) = g.dim();
        if h_d.len() != h_r.len() || h_d.is_empty() {
            return Err(Error::shape("h_d and h_r must have one entry per user"));
        }
        if h_d.iter().any(|h| h.len() != m) || h_r.iter().any(|h| h.len() != n) {
            return Err(Error::shape(format!("channels inconsistent with G of shape {m}x{n}")));
        }
        let cascaded: Vec<CMatrix> = h_r
            .iter()
            .map(|hr| {
                let mut a = g.clone();
                for (mut col, &c) in a.axis_iter_mut(Axis(1)).zip(hr.iter()) {
                    col.mapv_inplace(|z| z * c);
                }
                a
            })
            .collect();
        let combined = h_d
            .iter()
            .zip(&cascaded)
            .map(|(hd, a)| {
                let mut f = Array2::zeros((m, n + 1));
                f.column_mut(0).assign(hd);
                f.slice_mut(s![.., 1..]).assign(a);
                f
            })
            .collect();
        Ok(ChannelSet {
            g,
            h_r,
            links: CascadedChannels { direct: h_d, cascaded },
            combined,
        })
    }

    pub fn num_users(&self) -> usize {
        self.h_r.len()
    }

    pub fn h_d(&self, k: usize) -> &CVector {
        &self.links.direct[k]
    }

    pub fn a(&self, k: usize) -> &CMatrix {
        &self.links.cascaded[k]
    }

    pub fn f(&self, k: usize) -> &CMatrix {
        &self.combined[k]
    }

    /// Users reordered so that new user `i` is old user `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        ChannelSet {
            g: self.g.clone(),
            h_r: perm.iter().map(|&i| self.h_r[i].clone()).collect(),
            links: self.links.permuted(perm),
            combined: perm.iter().map(|&i| self.combined[i].clone()).collect(),
        }
    }
}

fn rician_weights(rician_factor: f64) -> (f64, f64) {
    if rician_factor.is_infinite() {
        (1.0, 0.0)
    } else {
        (
            (rician_factor / (1.0 + rician_factor)).sqrt(),
            (1.0 / (1.0 + rician_factor)).sqrt(),
        )
    }
}

/// Draw one realization: Rayleigh direct links and Rician IRS links whose
/// line-of-sight parts follow the geometry.
pub fn sample_channels<R: Rng + ?Sized>(
    config: &SystemConfig,
    placement: &Placement,
    rng: &mut R,
) -> Result<ChannelSet> {
    let m = config.num_bs_antennas;
    let n = config.num_irs_elements;
    if placement.user_locations.len() != config.num_users {
        return Err(Error::config(format!(
            "placement has {} users, config expects {}",
            placement.user_locations.len(),
            config.num_users
        )));
    }
    let (los_w, nlos_w) = rician_weights(config.rician_factor);

    let bs = &config.bs_location;
    let irs = &config.irs_location;
    let beta_bi = db_to_amplitude(pathloss_irs_db(distance(bs, irs))?);
    let (az_bs, el_bs) = angles_between(bs, irs)?;
    let (az_irs, el_irs) = angles_between(irs, bs)?;
    let a_bs = steering_bs(az_bs, el_bs, m);
    let a_irs = steering_irs(az_irs, el_irs, config.irs_rows, config.irs_cols);
    let g = Array2::from_shape_fn((m, n), |(i, j)| {
        let los = a_bs[i] * a_irs[j].conj();
        beta_bi * (los * los_w + complex_gaussian(rng) * nlos_w)
    });

    let mut h_d = Vec::with_capacity(config.num_users);
    let mut h_r = Vec::with_capacity(config.num_users);
    for user in &placement.user_locations {
        let beta_direct = db_to_amplitude(pathloss_direct_db(distance(bs, user))?);
        h_d.push(Array1::from_shape_fn(m, |_| complex_gaussian(rng) * beta_direct));

        let beta_iu = db_to_amplitude(pathloss_irs_db(distance(irs, user))?);
        let (az, el) = angles_between(irs, user)?;
        let los = steering_irs(az, el, config.irs_rows, config.irs_cols);
        h_r.push(los.mapv(|z| beta_iu * (z * los_w + complex_gaussian(rng) * nlos_w)));
    }
    ChannelSet::from_parts(g, h_d, h_r)
}
