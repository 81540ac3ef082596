//! Downlink rates, network utilities and their gradients.
//!
//! User `k` receives `(h_d_k + A_k v)^T w_j` from stream `j`; interference
//! is treated as noise and rates are in bits/s/Hz.

use core::f64::consts::LN_2;

use ndarray::{Array1, Array2};

use crate::prelude::*;
use crate::scenario::CascadedChannels;
use crate::{CMatrix, CVector, Error, Result, C64};

/// Beamforming matrix `W` (`M x K`) and IRS reflection vector `v` (length `N`).
#[derive(Debug, Clone, PartialEq)]
pub struct Solution {
    pub beamformers: CMatrix,
    pub reflection: CVector,
}

impl Solution {
    pub fn new(beamformers: CMatrix, reflection: CVector) -> Self {
        Solution {
            beamformers,
            reflection,
        }
    }

    /// `sum_k ||w_k||^2`
    pub fn total_power(&self) -> f64 {
        self.beamformers.iter().map(|z| z.norm_sqr()).sum()
    }

    /// Largest `| |v_i| - 1 |`.
    pub fn modulus_violation(&self) -> f64 {
        self.reflection
            .iter()
            .map(|z| (z.norm() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Power within `P (1 + tol)` and unit modulus within `tol`.
    pub fn is_feasible(&self, max_power: f64, tol: f64) -> bool {
        self.total_power() <= max_power * (1.0 + tol) && self.modulus_violation() <= tol
    }

    pub fn num_users(&self) -> usize {
        self.beamformers.ncols()
    }
}

/// Network utility of the per-user rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Utility {
    Sum,
    Min,
}

impl Utility {
    pub fn name(self) -> &'static str {
        match self {
            Utility::Sum => "sum",
            Utility::Min => "min",
        }
    }
}

impl core::str::FromStr for Utility {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" | "sum-rate" => Ok(Utility::Sum),
            "min" | "min-rate" | "max-min" => Ok(Utility::Min),
            other => Err(Error::config(format!("unknown utility '{other}'"))),
        }
    }
}

pub fn utility(rates: &[f64], kind: Utility) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::shape("utility of an empty rate vector"));
    }
    Ok(match kind {
        Utility::Sum => rates.iter().sum(),
        Utility::Min => rates.iter().copied().fold(f64::INFINITY, f64::min),
    })
}

/// Per-user weights `dU/dR_k`; for the minimum this is the subgradient of
/// the first user attaining it.
pub fn utility_weights(rates: &[f64], kind: Utility) -> Vec<f64> {
    match kind {
        Utility::Sum => vec![1.0; rates.len()],
        Utility::Min => {
            let mut arg = 0;
            for (k, &r) in rates.iter().enumerate() {
                if r < rates[arg] {
                    arg = k;
                }
            }
            let mut w = vec![0.0; rates.len()];
            w[arg] = 1.0;
            w
        }
    }
}

/// `h_d + A v`
pub fn effective_channel(direct: &CVector, cascaded: &CMatrix, v: &CVector) -> CVector {
    direct + &cascaded.dot(v)
}

/// Matrix of received amplitudes `a[k][j] = g_k^T w_j`.
fn amplitudes(effective: &[CVector], w: &CMatrix) -> Array2<C64> {
    let k = effective.len();
    Array2::from_shape_fn((k, w.ncols()), |(i, j)| {
        effective[i].iter().zip(w.column(j).iter()).map(|(g, x)| g * x).sum()
    })
}

fn rates_from_amplitudes(a: &Array2<C64>, noise: f64) -> Vec<f64> {
    (0..a.nrows())
        .map(|k| {
            let total: f64 = a.row(k).iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
            let signal = a[[k, k]].norm_sqr();
            let interference = total - signal;
            (1.0 + signal / interference).log2()
        })
        .collect()
}

/// Rates of all users given effective channels `g_k`.
pub fn rates_for_effective(effective: &[CVector], w: &CMatrix, noise: f64) -> Vec<f64> {
    rates_from_amplitudes(&amplitudes(effective, w), noise)
}

/// Rates of all users.
pub fn user_rates(links: &CascadedChannels, sol: &Solution, noise: f64) -> Vec<f64> {
    rates_for_effective(&links.effective_all(&sol.reflection), &sol.beamformers, noise)
}

/// Rate of user `k` in bits/s/Hz.
pub fn user_rate(links: &CascadedChannels, sol: &Solution, noise: f64, k: usize) -> f64 {
    let g = links.effective(k, &sol.reflection);
    let mut total = noise;
    let mut signal = 0.0;
    for j in 0..sol.beamformers.ncols() {
        let a: C64 = g.iter().zip(sol.beamformers.column(j).iter()).map(|(g, w)| g * w).sum();
        total += a.norm_sqr();
        if j == k {
            signal = a.norm_sqr();
        }
    }
    (1.0 + signal / (total - signal)).log2()
}

/// Channels split into real and imaginary parts.
#[derive(Debug, Clone)]
pub struct RealLinks {
    pub direct_re: Vec<Array1<f64>>,
    pub direct_im: Vec<Array1<f64>>,
    pub cascaded_re: Vec<Array2<f64>>,
    pub cascaded_im: Vec<Array2<f64>>,
}

impl RealLinks {
    pub fn from_complex(links: &CascadedChannels) -> Self {
        RealLinks {
            direct_re: links.direct.iter().map(|h| h.mapv(|z| z.re)).collect(),
            direct_im: links.direct.iter().map(|h| h.mapv(|z| z.im)).collect(),
            cascaded_re: links.cascaded.iter().map(|a| a.mapv(|z| z.re)).collect(),
            cascaded_im: links.cascaded.iter().map(|a| a.mapv(|z| z.im)).collect(),
        }
    }
}

/// Solution split into real and imaginary parts.
#[derive(Debug, Clone)]
pub struct RealSolution {
    pub w_re: Array2<f64>,
    pub w_im: Array2<f64>,
    pub v_re: Array1<f64>,
    pub v_im: Array1<f64>,
}

impl RealSolution {
    pub fn from_complex(sol: &Solution) -> Self {
        RealSolution {
            w_re: sol.beamformers.mapv(|z| z.re),
            w_im: sol.beamformers.mapv(|z| z.im),
            v_re: sol.reflection.mapv(|z| z.re),
            v_im: sol.reflection.mapv(|z| z.im),
        }
    }
}

/// `gamma_i`: the 2-vector `[Re; Im]` of `g_k^T w_i`, built from the real
/// block embedding of complex multiplication.
pub fn gamma(links: &RealLinks, sol: &RealSolution, k: usize, i: usize) -> [f64; 2] {
    let m = links.direct_re[k].len();
    let n = sol.v_re.len();
    // [Re g; Im g] = [Re h; Im h] + [[Re A, -Im A], [Im A, Re A]] [Re v; Im v]
    let mut g = vec![0.0; 2 * m];
    for r in 0..m {
        let mut re = links.direct_re[k][r];
        let mut im = links.direct_im[k][r];
        for c in 0..n {
            let (ar, ai) = (links.cascaded_re[k][[r, c]], links.cascaded_im[k][[r, c]]);
            re += ar * sol.v_re[c] - ai * sol.v_im[c];
            im += ai * sol.v_re[c] + ar * sol.v_im[c];
        }
        g[r] = re;
        g[m + r] = im;
    }
    // [[Re w^T, -Im w^T], [Im w^T, Re w^T]] [Re g; Im g]
    let mut out = [0.0; 2];
    for r in 0..m {
        let (wr, wi) = (sol.w_re[[r, i]], sol.w_im[[r, i]]);
        out[0] += wr * g[r] - wi * g[m + r];
        out[1] += wi * g[r] + wr * g[m + r];
    }
    out
}

/// Rate of user `k` evaluated entirely in real arithmetic.
pub fn user_rate_real(links: &RealLinks, sol: &RealSolution, noise: f64, k: usize) -> f64 {
    let mut signal = 0.0;
    let mut interference = noise;
    for i in 0..sol.w_re.ncols() {
        let g = gamma(links, sol, k, i);
        let p = g[0] * g[0] + g[1] * g[1];
        if i == k {
            signal = p;
        } else {
            interference += p;
        }
    }
    (1.0 + signal / interference).log2()
}

/// Rates and the gradient of `sum_k c_k R_k`.
///
/// Gradients are returned as `df/dRe + j df/dIm` for every complex entry of
/// `W` and `v`.
#[derive(Debug, Clone)]
pub struct RateGradient {
    pub rates: Vec<f64>,
    pub beamformers: CMatrix,
    pub reflection: CVector,
}

pub fn weighted_rate_gradient(
    links: &CascadedChannels,
    w: &CMatrix,
    v: &CVector,
    noise: f64,
    weights: &[f64],
) -> RateGradient {
    let effective = links.effective_all(v);
    let a = amplitudes(&effective, w);
    let rates = rates_from_amplitudes(&a, noise);
    let (m, kk) = w.dim();
    let mut grad_w = Array2::<C64>::zeros((m, kk));
    let mut grad_v = Array1::<C64>::zeros(v.len());
    for k in 0..effective.len() {
        if weights[k] == 0.0 {
            continue;
        }
        let total: f64 = a.row(k).iter().map(|z| z.norm_sqr()).sum::<f64>() + noise;
        let interference = total - a[[k, k]].norm_sqr();
        // d(c_k R_k) / d conj(a_kj), doubled
        let mut d_g = Array1::<C64>::zeros(m);
        for j in 0..kk {
            let mut coef = a[[k, j]] / total;
            if j != k {
                coef -= a[[k, j]] / interference;
            }
            coef *= 2.0 * weights[k] / LN_2;
            for r in 0..m {
                grad_w[[r, j]] += coef * effective[k][r].conj();
                d_g[r] += coef * w[[r, j]].conj();
            }
        }
        // g_k = h_d + A_k v is holomorphic in v
        let cascaded = &links.cascaded[k];
        for (n, gv) in grad_v.iter_mut().enumerate() {
            let mut s = C64::new(0.0, 0.0);
            for r in 0..m {
                s += cascaded[[r, n]].conj() * d_g[r];
            }
            *gv += s;
        }
    }
    RateGradient {
        rates,
        beamformers: grad_w,
        reflection: grad_v,
    }
}
