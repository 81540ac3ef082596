//! Policy network: pilots to beamformers and reflection coefficients.
//!
//! Node vectors of a batch are stored row-wise: user `k` of sample `b` is
//! row `b * K + k` of the user matrix, the IRS node of sample `b` is row `b`
//! of the IRS matrix.

use ndarray::{concatenate, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use super::features::InputMode;
use super::mlp::{Mlp, MlpCache};
use super::params::{GnnParameters, Layout};
use crate::prelude::*;
use crate::rate::{rates_for_effective, utility, utility_weights, weighted_rate_gradient, Solution, Utility};
use crate::scenario::CascadedChannels;
use crate::{CMatrix, CVector, Error, Result, C64};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GnnConfig {
    /// Number of update layers after the initial embedding.
    pub depth: usize,
    /// Hidden width of the two embedding blocks.
    pub embed_hidden: usize,
    /// Width of every node representation.
    pub width: usize,
    /// Hidden width of the update-layer blocks.
    pub layer_hidden: usize,
    pub input_mode: InputMode,
}

impl Default for GnnConfig {
    fn default() -> Self {
        GnnConfig {
            depth: 2,
            embed_hidden: 1024,
            width: 512,
            layer_hidden: 512,
            input_mode: InputMode::Pilots,
        }
    }
}

impl GnnConfig {
    /// Narrower network for single-core runs.
    pub fn desk() -> Self {
        GnnConfig {
            embed_hidden: 512,
            width: 256,
            layer_hidden: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 || self.embed_hidden == 0 || self.width == 0 || self.layer_hidden == 0 {
            return Err(Error::config("GNN depth and widths must be positive"));
        }
        Ok(())
    }
}

/// Problem dimensions a network is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Dimensions {
    pub antennas: usize,
    pub elements: usize,
    pub subframes: usize,
}

impl Dimensions {
    pub fn feature_dim(&self, mode: InputMode) -> usize {
        mode.feature_dim(self.antennas, self.subframes)
    }

    pub fn pilot_dim(&self) -> usize {
        2 * self.antennas * self.subframes
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct UpdateLayer {
    irs_self: Mlp,
    user_to_irs: Mlp,
    irs_combine: Mlp,
    user_message: Mlp,
    user_combine: Mlp,
}

/// Architecture of the policy network; parameters live in [`GnnParameters`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Gnn {
    pub config: GnnConfig,
    pub dims: Dimensions,
    layout: Layout,
    user_embed: Mlp,
    irs_embed: Mlp,
    layers: Vec<UpdateLayer>,
    reflection_head: Mlp,
    beamformer_head: Mlp,
}

struct LayerCache {
    irs_self: MlpCache,
    user_to_irs: MlpCache,
    irs_combine: MlpCache,
    user_message: MlpCache,
    user_combine: MlpCache,
    max_source: Vec<u32>,
}

/// Everything the backward pass needs from one forward pass.
pub struct ForwardCache {
    batch: usize,
    users: usize,
    user_embed: MlpCache,
    irs_embed: MlpCache,
    layers: Vec<LayerCache>,
    reflection_head: MlpCache,
    beamformer_head: MlpCache,
    /// Pre-normalization outputs.
    raw_reflection: Array2<f64>,
    raw_beamformers: Array2<f64>,
    max_power: f64,
}

impl ForwardCache {
    /// Active ReLU units and max-pooling sources. The network is smooth in
    /// its parameters wherever this pattern does not change.
    pub fn branch_pattern(&self) -> Vec<u32> {
        let mut out = Vec::new();
        self.user_embed.push_pattern(&mut out);
        self.irs_embed.push_pattern(&mut out);
        for l in &self.layers {
            for c in [
                &l.irs_self,
                &l.user_to_irs,
                &l.irs_combine,
                &l.user_message,
                &l.user_combine,
            ] {
                c.push_pattern(&mut out);
            }
            out.extend_from_slice(&l.max_source);
        }
        self.reflection_head.push_pattern(&mut out);
        self.beamformer_head.push_pattern(&mut out);
        out
    }
}

/// Mean over the users of each sample.
pub(crate) fn mean_users(x: &Array2<f64>, users: usize) -> Array2<f64> {
    let batch = x.nrows() / users;
    let mut out = Array2::zeros((batch, x.ncols()));
    for b in 0..batch {
        let mut row = out.row_mut(b);
        for k in 0..users {
            row += &x.row(b * users + k);
        }
        row /= users as f64;
    }
    out
}

/// Repeats each sample row once per user.
pub(crate) fn broadcast_users(x: &Array2<f64>, users: usize) -> Array2<f64> {
    let mut out = Array2::zeros((x.nrows() * users, x.ncols()));
    for b in 0..x.nrows() {
        for k in 0..users {
            out.row_mut(b * users + k).assign(&x.row(b));
        }
    }
    out
}

/// Sum of each sample's user rows.
pub(crate) fn sum_users(x: &Array2<f64>, users: usize) -> Array2<f64> {
    let mut out = mean_users(x, users);
    out *= users as f64;
    out
}

/// Element-wise maximum over the other users of the same sample; zero when
/// a sample has a single user. Also returns the source row of every entry.
pub(crate) fn max_over_others(x: &Array2<f64>, users: usize) -> (Array2<f64>, Vec<u32>) {
    let (rows, cols) = x.dim();
    let mut out = Array2::zeros((rows, cols));
    let mut source = vec![u32::MAX; rows * cols];
    if users < 2 {
        return (out, source);
    }
    for b in 0..rows / users {
        let base = b * users;
        for c in 0..cols {
            // top two entries
            let (mut i1, mut i2) = (0usize, 1usize);
            if x[[base + 1, c]] > x[[base, c]] {
                i1 = 1;
                i2 = 0;
            }
            for k in 2..users {
                let v = x[[base + k, c]];
                if v > x[[base + i1, c]] {
                    i2 = i1;
                    i1 = k;
                } else if v > x[[base + i2, c]] {
                    i2 = k;
                }
            }
            for k in 0..users {
                let j = if k == i1 { i2 } else { i1 };
                out[[base + k, c]] = x[[base + j, c]];
                source[(base + k) * cols + c] = (base + j) as u32;
            }
        }
    }
    (out, source)
}

fn scatter_max(upstream: &Array2<f64>, source: &[u32]) -> Array2<f64> {
    let (rows, cols) = upstream.dim();
    let mut out = Array2::zeros((rows, cols));
    for r in 0..rows {
        for c in 0..cols {
            let s = source[r * cols + c];
            if s != u32::MAX {
                out[[s as usize, c]] += upstream[[r, c]];
            }
        }
    }
    out
}

/// `(a + jb) / |a + jb|` for every row `[a_1..a_N, b_1..b_N]`; an exact zero maps to 1.
pub fn normalize_reflection(raw: ArrayView2<'_, f64>) -> Vec<CVector> {
    let n = raw.ncols() / 2;
    raw.rows()
        .into_iter()
        .map(|row| {
            Array1::from_shape_fn(n, |i| {
                let (a, b) = (row[i], row[n + i]);
                let r2 = a * a + b * b;
                if r2 > 0.0 {
                    let r = r2.sqrt();
                    C64::new(a / r, b / r)
                } else {
                    C64::new(1.0, 0.0)
                }
            })
        })
        .collect()
}

/// Scales each sample's `K` rows `[Re w_k, Im w_k]` to total power `max_power`.
pub fn normalize_beamformers(raw: ArrayView2<'_, f64>, users: usize, max_power: f64) -> Vec<CMatrix> {
    let m = raw.ncols() / 2;
    (0..raw.nrows() / users)
        .map(|b| {
            let block = raw.slice(s![b * users..(b + 1) * users, ..]);
            let norm = block.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let scale = max_power.sqrt() / norm;
            CMatrix::from_shape_fn((m, users), |(r, k)| C64::new(block[[k, r]], block[[k, m + r]]) * scale)
        })
        .collect()
}

impl Gnn {
    pub fn new(config: GnnConfig, dims: Dimensions) -> Result<Self> {
        config.validate()?;
        if dims.antennas == 0 || dims.elements == 0 || dims.subframes == 0 {
            return Err(Error::config("network dimensions must be positive"));
        }
        let mut layout = Layout::new();
        let (w, h, eh) = (config.width, config.layer_hidden, config.embed_hidden);
        let user_embed = Mlp::new(&mut layout, "user_embed", &[dims.feature_dim(config.input_mode), eh, w]);
        let irs_embed = Mlp::new(&mut layout, "irs_embed", &[w, eh, w]);
        let layers = (1..=config.depth)
            .map(|d| UpdateLayer {
                irs_self: Mlp::new(&mut layout, &format!("layer{d}.irs_self"), &[w, h, w]),
                user_to_irs: Mlp::new(&mut layout, &format!("layer{d}.user_to_irs"), &[w, h, w]),
                irs_combine: Mlp::new(&mut layout, &format!("layer{d}.irs_combine"), &[2 * w, h, w]),
                user_message: Mlp::new(&mut layout, &format!("layer{d}.user_message"), &[w, h, w]),
                user_combine: Mlp::new(&mut layout, &format!("layer{d}.user_combine"), &[3 * w, h, w]),
            })
            .collect();
        let reflection_head = Mlp::new(&mut layout, "reflection_head", &[w, 2 * dims.elements]);
        let beamformer_head = Mlp::new(&mut layout, "beamformer_head", &[w, 2 * dims.antennas]);
        Ok(Gnn {
            config,
            dims,
            layout,
            user_embed,
            irs_embed,
            layers,
            reflection_head,
            beamformer_head,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn feature_dim(&self) -> usize {
        self.dims.feature_dim(self.config.input_mode)
    }

    fn mlps(&self) -> Vec<&Mlp> {
        let mut all = vec![&self.user_embed, &self.irs_embed];
        for l in &self.layers {
            all.extend([
                &l.irs_self,
                &l.user_to_irs,
                &l.irs_combine,
                &l.user_message,
                &l.user_combine,
            ]);
        }
        all.push(&self.reflection_head);
        all.push(&self.beamformer_head);
        all
    }

    pub fn init_parameters<R: Rng + ?Sized>(&self, rng: &mut R) -> GnnParameters {
        let mut gains = vec![0.0; self.layout.blocks().len()];
        for mlp in self.mlps() {
            mlp.gains(&mut gains);
        }
        GnnParameters::initialize(self.layout.clone(), &gains, rng)
    }

    pub fn check_parameters(&self, params: &GnnParameters) -> Result<()> {
        if params.layout != self.layout {
            return Err(Error::config("parameter layout does not match the network"));
        }
        Ok(())
    }

    fn check_features(&self, features: &Array2<f64>, users: usize) -> Result<()> {
        if users == 0 || features.nrows() == 0 || features.nrows() % users != 0 {
            return Err(Error::shape(format!(
                "{} feature rows for {users} users",
                features.nrows()
            )));
        }
        if features.ncols() != self.feature_dim() {
            return Err(Error::shape(format!(
                "feature width {} but the network expects {}",
                features.ncols(),
                self.feature_dim()
            )));
        }
        Ok(())
    }

    /// Forward pass on scaled features (`B K` rows) keeping the activations.
    pub fn forward_cached(
        &self,
        params: &[f64],
        features: &Array2<f64>,
        users: usize,
        max_power: f64,
    ) -> Result<(Vec<Solution>, ForwardCache)> {
        self.check_features(features, users)?;
        let lay = &self.layout;
        let batch = features.nrows() / users;
        let (mut zu, user_embed) = self.user_embed.forward(lay, params, features.clone());
        let (mut z0, irs_embed) = self.irs_embed.forward(lay, params, mean_users(&zu, users));
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let (a, irs_self) = l.irs_self.forward(lay, params, z0);
            let (b1, user_to_irs) = l.user_to_irs.forward(lay, params, zu.clone());
            let irs_in = concatenate(Axis(1), &[a.view(), mean_users(&b1, users).view()]).unwrap();
            let (z0_next, irs_combine) = l.irs_combine.forward(lay, params, irs_in);
            let (c3, user_message) = l.user_message.forward(lay, params, zu.clone());
            let (mx, max_source) = max_over_others(&c3, users);
            let user_in = concatenate(Axis(1), &[broadcast_users(&a, users).view(), zu.view(), mx.view()]).unwrap();
            let (zu_next, user_combine) = l.user_combine.forward(lay, params, user_in);
            layers.push(LayerCache {
                irs_self,
                user_to_irs,
                irs_combine,
                user_message,
                user_combine,
                max_source,
            });
            z0 = z0_next;
            zu = zu_next;
        }
        let (raw_reflection, reflection_head) = self.reflection_head.forward(lay, params, z0);
        let (raw_beamformers, beamformer_head) = self.beamformer_head.forward(lay, params, zu);
        let vs = normalize_reflection(raw_reflection.view());
        let ws = normalize_beamformers(raw_beamformers.view(), users, max_power);
        let solutions = ws.into_iter().zip(vs).map(|(w, v)| Solution::new(w, v)).collect();
        Ok((
            solutions,
            ForwardCache {
                batch,
                users,
                user_embed,
                irs_embed,
                layers,
                reflection_head,
                beamformer_head,
                raw_reflection,
                raw_beamformers,
                max_power,
            },
        ))
    }

    pub fn forward(
        &self,
        params: &[f64],
        features: &Array2<f64>,
        users: usize,
        max_power: f64,
    ) -> Result<Vec<Solution>> {
        Ok(self.forward_cached(params, features, users, max_power)?.0)
    }

    /// Backpropagates `df/dRe + j df/dIm` of every output into `grad`.
    pub fn backward(
        &self,
        params: &[f64],
        cache: &ForwardCache,
        d_beamformers: &[CMatrix],
        d_reflection: &[CVector],
        grad: &mut [f64],
    ) -> Result<()> {
        let (batch, users) = (cache.batch, cache.users);
        if d_beamformers.len() != batch || d_reflection.len() != batch || grad.len() != self.layout.len() {
            return Err(Error::shape("gradient buffers do not match the forward pass"));
        }
        let lay = &self.layout;
        let (m, n) = (self.dims.antennas, self.dims.elements);

        let mut dzv = Array2::zeros((batch, 2 * n));
        for b in 0..batch {
            for i in 0..n {
                let (a, bb) = (cache.raw_reflection[[b, i]], cache.raw_reflection[[b, n + i]]);
                let r2 = a * a + bb * bb;
                if r2 == 0.0 {
                    continue;
                }
                let r = r2.sqrt();
                let r3 = r2 * r;
                let g = d_reflection[b][i];
                dzv[[b, i]] = g.re * (1.0 / r - a * a / r3) - g.im * a * bb / r3;
                dzv[[b, n + i]] = -g.re * a * bb / r3 + g.im * (1.0 / r - bb * bb / r3);
            }
        }
        let mut dzw = Array2::zeros((batch * users, 2 * m));
        let s = cache.max_power.sqrt();
        for b in 0..batch {
            let block = cache.raw_beamformers.slice(s![b * users..(b + 1) * users, ..]);
            let norm2 = block.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
            let norm = norm2.sqrt();
            let g = &d_beamformers[b];
            let mut inner = 0.0;
            for k in 0..users {
                for r in 0..m {
                    inner += g[[r, k]].re * block[[k, r]] + g[[r, k]].im * block[[k, m + r]];
                }
            }
            for k in 0..users {
                for r in 0..m {
                    dzw[[b * users + k, r]] = s / norm * (g[[r, k]].re - inner / norm2 * block[[k, r]]);
                    dzw[[b * users + k, m + r]] = s / norm * (g[[r, k]].im - inner / norm2 * block[[k, m + r]]);
                }
            }
        }

        let mut dz0 = self
            .reflection_head
            .backward(lay, params, &cache.reflection_head, grad, dzv);
        let mut dzu = self
            .beamformer_head
            .backward(lay, params, &cache.beamformer_head, grad, dzw);
        let w = self.config.width;
        for (l, c) in self.layers.iter().zip(&cache.layers).rev() {
            let d_user_in = l.user_combine.backward(lay, params, &c.user_combine, grad, dzu);
            let mut da = sum_users(&d_user_in.slice(s![.., 0..w]).to_owned(), users);
            let mut dzu_prev = d_user_in.slice(s![.., w..2 * w]).to_owned();
            let dc3 = scatter_max(&d_user_in.slice(s![.., 2 * w..3 * w]).to_owned(), &c.max_source);
            dzu_prev += &l.user_message.backward(lay, params, &c.user_message, grad, dc3);
            let d_irs_in = l.irs_combine.backward(lay, params, &c.irs_combine, grad, dz0);
            da += &d_irs_in.slice(s![.., 0..w]);
            let mut db1 = broadcast_users(&d_irs_in.slice(s![.., w..2 * w]).to_owned(), users);
            db1 /= users as f64;
            dzu_prev += &l.user_to_irs.backward(lay, params, &c.user_to_irs, grad, db1);
            dz0 = l.irs_self.backward(lay, params, &c.irs_self, grad, da);
            dzu = dzu_prev;
        }
        let dmu = self.irs_embed.backward(lay, params, &cache.irs_embed, grad, dz0);
        let mut du = broadcast_users(&dmu, users);
        du /= users as f64;
        du += &dzu;
        self.user_embed.backward(lay, params, &cache.user_embed, grad, du);
        Ok(())
    }
}

/// Negative mean utility and its parameter gradient.
#[derive(Debug, Clone)]
pub struct LossGradient {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Utility of every sample.
    pub utilities: Vec<f64>,
}

/// Evaluate `-mean_b U(R(W_b, v_b))` and its gradient for a batch whose
/// sample `b` has channels `links[b]`.
pub fn loss_and_gradient(
    net: &Gnn,
    params: &GnnParameters,
    features: &Array2<f64>,
    links: &[CascadedChannels],
    kind: Utility,
    max_power: f64,
    noise: f64,
) -> Result<LossGradient> {
    net.check_parameters(params)?;
    let users = links.first().map_or(0, |l| l.num_users());
    let (solutions, cache) = net.forward_cached(&params.values, features, users, max_power)?;
    if solutions.len() != links.len() {
        return Err(Error::shape("one channel set per sample is required"));
    }
    let scale = -1.0 / links.len() as f64;
    let mut d_w = Vec::with_capacity(links.len());
    let mut d_v = Vec::with_capacity(links.len());
    let mut utilities = Vec::with_capacity(links.len());
    for (sol, ch) in solutions.iter().zip(links) {
        if ch.num_users() != users {
            return Err(Error::shape("all samples in a batch need the same user count"));
        }
        let rates = rates_for_effective(&ch.effective_all(&sol.reflection), &sol.beamformers, noise);
        let weights = utility_weights(&rates, kind);
        let g = weighted_rate_gradient(ch, &sol.beamformers, &sol.reflection, noise, &weights);
        utilities.push(utility(&rates, kind)?);
        d_w.push(g.beamformers * C64::new(scale, 0.0));
        d_v.push(g.reflection * C64::new(scale, 0.0));
    }
    let mut gradient = vec![0.0; params.len()];
    net.backward(&params.values, &cache, &d_w, &d_v, &mut gradient)?;
    let loss = -utilities.iter().sum::<f64>() / utilities.len() as f64;
    Ok(LossGradient {
        loss,
        gradient,
        utilities,
    })
}

/// Loss only, with rates computed through the real-valued formulation.
pub fn loss(
    net: &Gnn,
    params: &GnnParameters,
    features: &Array2<f64>,
    links: &[CascadedChannels],
    kind: Utility,
    max_power: f64,
    noise: f64,
) -> Result<f64> {
    use crate::rate::{user_rate_real, RealLinks, RealSolution};
    let users = links.first().map_or(0, |l| l.num_users());
    let solutions = net.forward(&params.values, features, users, max_power)?;
    let mut total = 0.0;
    for (sol, ch) in solutions.iter().zip(links) {
        let rl = RealLinks::from_complex(ch);
        let rs = RealSolution::from_complex(sol);
        let rates: Vec<f64> = (0..users).map(|k| user_rate_real(&rl, &rs, noise, k)).collect();
        total += utility(&rates, kind)?;
    }
    Ok(-total / links.len() as f64)
}
