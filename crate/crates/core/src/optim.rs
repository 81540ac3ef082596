//! Model-based beamforming with known (true or estimated) channels.
//!
//! * [`wmmse_beamforming`]: weighted-MMSE beamformers for fixed effective channels.
//! * [`bcd_optimize`]: alternates WMMSE and element-wise phase updates.
//! * [`random_phase_baseline`]: random reflection, WMMSE beamformers.
//! * [`maxmin_optimize`]: projected gradient ascent on a soft-min of the rates.

use core::f64::consts::PI;

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::linalg::solve_hpd;
use crate::prelude::*;
use crate::rate::{rates_for_effective, user_rates, utility, weighted_rate_gradient, Solution, Utility};
use crate::rng::random_phase;
use crate::scenario::CascadedChannels;
use crate::{CMatrix, CVector, Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WmmseConfig {
    pub max_iterations: usize,
    /// Stop once the relative change of the weighted sum rate falls below this.
    pub tolerance: f64,
}

impl Default for WmmseConfig {
    fn default() -> Self {
        WmmseConfig {
            max_iterations: 200,
            tolerance: 1e-5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct WmmseOutcome {
    pub beamformers: CMatrix,
    /// Weighted sum rate of the starting point followed by one entry per iteration.
    pub trace: Vec<f64>,
}

fn weighted_sum(rates: &[f64], weights: &[f64]) -> f64 {
    rates.iter().zip(weights).map(|(r, c)| r * c).sum()
}

fn scale_to_power(w: &mut CMatrix, max_power: f64) {
    let p: f64 = w.iter().map(|z| z.norm_sqr()).sum();
    if p > 0.0 {
        *w *= C64::new((max_power / p).sqrt(), 0.0);
    }
}

/// Maximum-ratio beamformers sharing the power equally.
pub fn matched_filters(effective: &[CVector], max_power: f64) -> CMatrix {
    let k = effective.len();
    let m = effective.first().map_or(0, |g| g.len());
    let mut w = Array2::zeros((m, k));
    let share = (max_power / k as f64).sqrt();
    for (j, g) in effective.iter().enumerate() {
        let norm = g.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if norm > 0.0 {
            for r in 0..m {
                w[[r, j]] = g[r].conj() * (share / norm);
            }
        }
    }
    w
}

/// Sum-rate WMMSE beamformers under `sum_k ||w_k||^2 <= max_power`.
pub fn wmmse_beamforming(effective: &[CVector], max_power: f64, noise: f64) -> CMatrix {
    let weights = vec![1.0; effective.len()];
    let init = matched_filters(effective, max_power);
    wmmse_weighted(effective, &weights, max_power, noise, &init, &WmmseConfig::default()).beamformers
}

/// Weighted-sum-rate WMMSE started from `init`.
///
/// Every iterate is rescaled to full power, which raises all SINRs. An
/// iteration that would lower the objective ends the loop and the previous
/// iterate is kept, so the trace is non-decreasing.
pub fn wmmse_weighted(
    effective: &[CVector],
    weights: &[f64],
    max_power: f64,
    noise: f64,
    init: &CMatrix,
    cfg: &WmmseConfig,
) -> WmmseOutcome {
    let k = effective.len();
    let m = init.nrows();
    if effective.iter().all(|g| g.iter().all(|z| *z == C64::new(0.0, 0.0))) {
        return WmmseOutcome {
            beamformers: Array2::zeros((m, k)),
            trace: vec![0.0],
        };
    }
    let mut w = init.clone();
    scale_to_power(&mut w, max_power);
    let mut best = weighted_sum(&rates_for_effective(effective, &w, noise), weights);
    let mut trace = vec![best];
    // receiver-side channels h_k = conj(g_k), so that g_k^T w = h_k^H w
    let h: Vec<CVector> = effective.iter().map(|g| g.mapv(|z| z.conj())).collect();
    for _ in 0..cfg.max_iterations {
        let mut cov = Array2::<C64>::zeros((m, m));
        let mut rhs = Array2::<C64>::zeros((m, k));
        for i in 0..k {
            let amps: Vec<C64> = (0..k)
                .map(|j| (0..m).map(|r| effective[i][r] * w[[r, j]]).sum())
                .collect();
            let total: f64 = amps.iter().map(|a| a.norm_sqr()).sum::<f64>() + noise;
            let u = amps[i] / total;
            let mse = 1.0 - amps[i].norm_sqr() / total;
            let omega = weights[i] / mse.max(1e-300);
            let coeff = omega * u.norm_sqr();
            for r in 0..m {
                for c in 0..m {
                    cov[[r, c]] += h[i][r] * h[i][c].conj() * coeff;
                }
                rhs[[r, i]] = h[i][r] * u * omega;
            }
        }
        let next = match solve_power_constrained(&cov, &rhs, max_power) {
            Some(mut next) => {
                scale_to_power(&mut next, max_power);
                next
            }
            None => break,
        };
        let value = weighted_sum(&rates_for_effective(effective, &next, noise), weights);
        if !value.is_finite() || value < best {
            break;
        }
        let change = (value - best) / best.abs().max(1e-300);
        w = next;
        best = value;
        trace.push(value);
        if change < cfg.tolerance {
            break;
        }
    }
    WmmseOutcome { beamformers: w, trace }
}

/// `(B + mu I)^-1 R` with the smallest `mu >= 0` meeting the power budget.
fn solve_power_constrained(cov: &CMatrix, rhs: &CMatrix, max_power: f64) -> Option<CMatrix> {
    let m = cov.nrows();
    let trace: f64 = (0..m).map(|i| cov[[i, i]].re).sum();
    let power_at = |mu: f64| -> Option<(CMatrix, f64)> {
        let mut a = cov.clone();
        for i in 0..m {
            a[[i, i]] += mu;
        }
        let x = solve_hpd(&a.view(), &rhs.view()).ok()?;
        let p = x.iter().map(|z| z.norm_sqr()).sum();
        Some((x, p))
    };
    let mu_floor = 1e-12 * trace / m as f64 + f64::MIN_POSITIVE;
    if let Some((x, p)) = power_at(mu_floor) {
        if p <= max_power {
            return Some(x);
        }
    }
    let rhs_norm = rhs.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    let (mut lo, mut hi) = (mu_floor, rhs_norm / max_power.sqrt());
    if !(hi > lo) {
        hi = lo * 2.0;
    }
    let mut feasible = power_at(hi)?;
    for _ in 0..60 {
        let mid = (lo * hi).sqrt();
        match power_at(mid) {
            Some((x, p)) if p <= max_power => {
                hi = mid;
                feasible = (x, p);
            }
            _ => lo = mid,
        }
        if hi / lo < 1.0 + 1e-9 {
            break;
        }
    }
    Some(feasible.0)
}

/// How the BCD phase block is updated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseScheme {
    /// One cyclic sweep over the elements per outer iteration; each element
    /// is set by a phase grid of this size refined with golden-section search.
    CoordinateAscent { grid: usize },
}

impl Default for PhaseScheme {
    fn default() -> Self {
        PhaseScheme::CoordinateAscent { grid: 720 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BcdConfig {
    /// Stop once an outer iteration gains less than this (bits/s/Hz).
    pub stop_threshold: f64,
    pub max_iterations: usize,
    pub phase_scheme: PhaseScheme,
    pub wmmse: WmmseConfig,
}

impl Default for BcdConfig {
    fn default() -> Self {
        BcdConfig {
            stop_threshold: 1e-3,
            max_iterations: 200,
            phase_scheme: PhaseScheme::default(),
            wmmse: WmmseConfig::default(),
        }
    }
}

impl BcdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stop_threshold > 0.0) {
            return Err(Error::config("stop_threshold must be positive"));
        }
        if self.max_iterations == 0 {
            return Err(Error::config("max_iterations must be positive"));
        }
        let PhaseScheme::CoordinateAscent { grid } = self.phase_scheme;
        if grid < 4 {
            return Err(Error::config("phase grid needs at least 4 points"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct BcdOutcome {
    pub solution: Solution,
    /// Sum rate after initialization and after every outer iteration.
    pub trace: Vec<f64>,
    /// False when the iteration cap was hit before the stopping rule.
    pub converged: bool,
}

/// Received amplitudes as functions of one phase: `a_kj(x) = fixed_kj + moving_kj x`.
struct ElementProblem {
    fixed: Array2<C64>,
    moving: Array2<C64>,
    weights: Vec<f64>,
    noise: f64,
}

impl ElementProblem {
    fn new(links: &CascadedChannels, w: &CMatrix, v: &CVector, i: usize, weights: &[f64], noise: f64) -> Self {
        let k = links.num_users();
        let mut fixed = Array2::zeros((k, w.ncols()));
        let mut moving = Array2::zeros((k, w.ncols()));
        for u in 0..k {
            let col = links.cascaded[u].column(i);
            let g = links.effective(u, v);
            for j in 0..w.ncols() {
                let mut a = C64::new(0.0, 0.0);
                let mut b = C64::new(0.0, 0.0);
                for r in 0..w.nrows() {
                    a += (g[r] - col[r] * v[i]) * w[[r, j]];
                    b += col[r] * w[[r, j]];
                }
                fixed[[u, j]] = a;
                moving[[u, j]] = b;
            }
        }
        ElementProblem {
            fixed,
            moving,
            weights: weights.to_vec(),
            noise,
        }
    }

    fn value(&self, phase: f64) -> f64 {
        let x = C64::from_polar(1.0, phase);
        let mut total = 0.0;
        for u in 0..self.fixed.nrows() {
            if self.weights[u] == 0.0 {
                continue;
            }
            let mut all = self.noise;
            let mut signal = 0.0;
            for j in 0..self.fixed.ncols() {
                let p = (self.fixed[[u, j]] + self.moving[[u, j]] * x).norm_sqr();
                all += p;
                if j == u {
                    signal = p;
                }
            }
            total += self.weights[u] * (1.0 + signal / (all - signal)).log2();
        }
        total
    }
}

fn golden_section<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64, iterations: usize) -> (f64, f64) {
    let ratio = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = b - ratio * (b - a);
    let mut d = a + ratio * (b - a);
    let (mut fc, mut fd) = (f(c), f(d));
    for _ in 0..iterations {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - ratio * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + ratio * (b - a);
            fd = f(d);
        }
    }
    if fc >= fd {
        (c, fc)
    } else {
        (d, fd)
    }
}

/// Best unit-modulus value of `v_i` for the weighted sum rate, all else fixed.
///
/// Returns the current `v_i` when no candidate improves on it.
pub fn phase_update_element(
    links: &CascadedChannels,
    w: &CMatrix,
    v: &CVector,
    i: usize,
    noise: f64,
    weights: &[f64],
    grid: usize,
) -> C64 {
    let problem = ElementProblem::new(links, w, v, i, weights, noise);
    let current_phase = v[i].arg();
    let current = problem.value(current_phase);
    let mut candidates = Vec::with_capacity(2);
    if links.num_users() == 1 {
        // single stream: co-phase the reflected and fixed parts
        let (a, b) = (problem.fixed[[0, 0]], problem.moving[[0, 0]]);
        if b.norm() > 0.0 {
            candidates.push(a.arg() - b.arg());
        }
    }
    let step = 2.0 * PI / grid as f64;
    let (mut best_phase, mut best_value) = (current_phase, current);
    let mut grid_best = (0.0, f64::NEG_INFINITY);
    for g in 0..grid {
        let phase = -PI + g as f64 * step;
        let val = problem.value(phase);
        if val > grid_best.1 {
            grid_best = (phase, val);
        }
    }
    let refined = golden_section(|p| problem.value(p), grid_best.0 - step, grid_best.0 + step, 80);
    candidates.push(refined.0);
    candidates.push(grid_best.0);
    for p in candidates {
        let val = problem.value(p);
        if val > best_value {
            best_value = val;
            best_phase = p;
        }
    }
    if best_value > current {
        C64::from_polar(1.0, best_phase)
    } else {
        v[i]
    }
}

/// Sum-rate BCD from the all-ones reflection and equal-power matched filters.
pub fn bcd_optimize(links: &CascadedChannels, max_power: f64, noise: f64, cfg: &BcdConfig) -> Result<BcdOutcome> {
    let v = Array1::from_elem(links.num_elements(), C64::new(1.0, 0.0));
    bcd_from(links, v, max_power, noise, cfg)
}

/// Sum-rate BCD from a given reflection vector.
pub fn bcd_from(
    links: &CascadedChannels,
    mut v: CVector,
    max_power: f64,
    noise: f64,
    cfg: &BcdConfig,
) -> Result<BcdOutcome> {
    cfg.validate()?;
    if v.len() != links.num_elements() {
        return Err(Error::shape("reflection length differs from the IRS size"));
    }
    let weights = vec![1.0; links.num_users()];
    let PhaseScheme::CoordinateAscent { grid } = cfg.phase_scheme;
    let effective = links.effective_all(&v);
    let init = matched_filters(&effective, max_power);
    let mut w = wmmse_weighted(&effective, &weights, max_power, noise, &init, &cfg.wmmse).beamformers;
    let sum_rate =
        |w: &CMatrix, v: &CVector| -> f64 { rates_for_effective(&links.effective_all(v), w, noise).iter().sum() };
    let mut trace = vec![sum_rate(&w, &v)];
    let mut converged = false;
    for _ in 0..cfg.max_iterations {
        for i in 0..v.len() {
            v[i] = phase_update_element(links, &w, &v, i, noise, &weights, grid);
        }
        let effective = links.effective_all(&v);
        w = wmmse_weighted(&effective, &weights, max_power, noise, &w, &cfg.wmmse).beamformers;
        let value = sum_rate(&w, &v);
        let previous = *trace.last().unwrap();
        trace.push(value.max(previous));
        if value - previous < cfg.stop_threshold {
            converged = true;
            break;
        }
    }
    Ok(BcdOutcome {
        solution: Solution::new(w, v),
        trace,
        converged,
    })
}

/// Uniformly random reflection with WMMSE beamformers.
pub fn random_phase_baseline<R: Rng + ?Sized>(
    links: &CascadedChannels,
    max_power: f64,
    noise: f64,
    rng: &mut R,
) -> Solution {
    let v: CVector = Array1::from_shape_fn(links.num_elements(), |_| random_phase(rng));
    let w = wmmse_beamforming(&links.effective_all(&v), max_power, noise);
    Solution::new(w, v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaxMinConfig {
    /// Soft-min temperatures, visited in order.
    pub temperatures: Vec<f64>,
    /// Gradient steps per temperature.
    pub steps_per_temperature: usize,
    /// Sum-rate BCD used as the starting point.
    pub warm_start: BcdConfig,
}

impl Default for MaxMinConfig {
    fn default() -> Self {
        MaxMinConfig {
            temperatures: vec![5.0, 10.0, 20.0, 50.0, 100.0],
            steps_per_temperature: 150,
            warm_start: BcdConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct MaxMinOutcome {
    /// Iterate with the largest exact minimum rate.
    pub solution: Solution,
    pub min_rate: f64,
    /// Surrogate value after every accepted step, one vector per temperature.
    pub surrogate_traces: Vec<Vec<f64>>,
}

/// `-(1/t) ln sum_k exp(-t R_k)` and its weights `dS/dR_k`.
pub fn soft_min(rates: &[f64], temperature: f64) -> (f64, Vec<f64>) {
    let lowest = rates.iter().copied().fold(f64::INFINITY, f64::min);
    let exps: Vec<f64> = rates.iter().map(|r| (-temperature * (r - lowest)).exp()).collect();
    let total: f64 = exps.iter().sum();
    (
        lowest - total.ln() / temperature,
        exps.iter().map(|e| e / total).collect(),
    )
}

/// Max-min rate by annealed soft-min ascent, starting from sum-rate BCD.
///
/// Each step moves `W` along its normalized gradient (then back to full
/// power) and the phases along theirs, halving the step until the
/// surrogate does not decrease.
pub fn maxmin_optimize(
    links: &CascadedChannels,
    max_power: f64,
    noise: f64,
    cfg: &MaxMinConfig,
) -> Result<MaxMinOutcome> {
    if cfg.temperatures.is_empty() || cfg.temperatures.iter().any(|t| !(*t > 0.0)) {
        return Err(Error::config("temperatures must be positive and non-empty"));
    }
    let start = bcd_optimize(links, max_power, noise, &cfg.warm_start)?.solution;
    let mut w = start.beamformers;
    let mut theta: Vec<f64> = start.reflection.iter().map(|z| z.arg()).collect();
    let to_v = |theta: &[f64]| -> CVector { theta.iter().map(|&p| C64::from_polar(1.0, p)).collect() };
    let min_rate = |w: &CMatrix, theta: &[f64]| -> f64 {
        let rates = user_rates(links, &Solution::new(w.clone(), to_v(theta)), noise);
        utility(&rates, Utility::Min).unwrap_or(0.0)
    };
    let mut best = (Solution::new(w.clone(), to_v(&theta)), min_rate(&w, &theta));
    let mut traces = Vec::with_capacity(cfg.temperatures.len());
    for &t in &cfg.temperatures {
        let surrogate = |w: &CMatrix, theta: &[f64]| -> f64 {
            soft_min(&user_rates(links, &Solution::new(w.clone(), to_v(theta)), noise), t).0
        };
        let mut current = surrogate(&w, &theta);
        let mut trace = vec![current];
        let (mut eta_w, mut eta_v) = (0.1, 0.3);
        for _ in 0..cfg.steps_per_temperature {
            let v = to_v(&theta);
            let rates = user_rates(links, &Solution::new(w.clone(), v.clone()), noise);
            let (_, weights) = soft_min(&rates, t);
            let grad = weighted_rate_gradient(links, &w, &v, noise, &weights);
            let mut moved = false;

            let gw_norm = grad.beamformers.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let w_norm = w.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            if gw_norm > 0.0 && gw_norm.is_finite() {
                for _ in 0..30 {
                    let mut cand = &w + &(&grad.beamformers * C64::new(eta_w * w_norm / gw_norm, 0.0));
                    scale_to_power(&mut cand, max_power);
                    let val = surrogate(&cand, &theta);
                    if val >= current {
                        w = cand;
                        current = val;
                        eta_w = (eta_w * 1.5).min(1.0);
                        moved = true;
                        break;
                    }
                    eta_w *= 0.5;
                }
            }

            let dtheta: Vec<f64> = grad
                .reflection
                .iter()
                .zip(v.iter())
                .map(|(g, x)| (g.conj() * C64::new(0.0, 1.0) * x).re)
                .collect();
            let largest = dtheta.iter().fold(0.0f64, |m, d| m.max(d.abs()));
            if largest > 0.0 && largest.is_finite() {
                for _ in 0..30 {
                    let cand: Vec<f64> = theta
                        .iter()
                        .zip(&dtheta)
                        .map(|(p, d)| p + eta_v * d / largest)
                        .collect();
                    let val = surrogate(&w, &cand);
                    if val >= current {
                        theta = cand;
                        current = val;
                        eta_v = (eta_v * 1.5).min(PI);
                        moved = true;
                        break;
                    }
                    eta_v *= 0.5;
                }
            }
            trace.push(current);
            let exact = min_rate(&w, &theta);
            if exact > best.1 {
                best = (Solution::new(w.clone(), to_v(&theta)), exact);
            }
            if !moved {
                break;
            }
        }
        traces.push(trace);
    }
    Ok(MaxMinOutcome {
        solution: best.0,
        min_rate: best.1,
        surrogate_traces: traces,
    })
}
