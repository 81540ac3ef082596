//! Channel-estimation network: the user trunk without the IRS node and a
//! linear head producing `F_k` (`M x (N + 1)`) per user.

use ndarray::{concatenate, s, Array2, Axis};
use rand::Rng;

use super::mlp::{Mlp, MlpCache};
use super::network::{max_over_others, Dimensions, GnnConfig};
use super::params::{GnnParameters, Layout};
use crate::prelude::*;
use crate::{CMatrix, Error, Result, C64};

#[derive(Debug, Clone, PartialEq, Eq)]
struct TrunkLayer {
    user_message: Mlp,
    user_combine: Mlp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EstimationNet {
    pub config: GnnConfig,
    pub dims: Dimensions,
    layout: Layout,
    user_embed: Mlp,
    layers: Vec<TrunkLayer>,
    head: Mlp,
}

#[derive(Debug, Clone)]
pub struct EstimationLoss {
    /// `(1/K) sum_k mean_b ||F^_k - F_k||_F^2` in channel units.
    pub loss: f64,
    /// Gradient of the same loss divided by `output_scale^2`.
    pub gradient: Vec<f64>,
}

/// Trunk output, per-block caches and max-pooling sources.
type TrunkPass = (Array2<f64>, Vec<MlpCache>, Vec<Vec<u32>>);

impl EstimationNet {
    pub fn new(config: GnnConfig, dims: Dimensions) -> Result<Self> {
        config.validate()?;
        let mut layout = Layout::new();
        let (w, h) = (config.width, config.layer_hidden);
        let user_embed = Mlp::new(
            &mut layout,
            "user_embed",
            &[dims.feature_dim(config.input_mode), config.embed_hidden, w],
        );
        let layers = (1..=config.depth)
            .map(|d| TrunkLayer {
                user_message: Mlp::new(&mut layout, &format!("layer{d}.user_message"), &[w, h, w]),
                user_combine: Mlp::new(&mut layout, &format!("layer{d}.user_combine"), &[2 * w, h, w]),
            })
            .collect();
        let head = Mlp::new(
            &mut layout,
            "estimation_head",
            &[w, 2 * dims.antennas * (dims.elements + 1)],
        );
        Ok(EstimationNet {
            config,
            dims,
            layout,
            user_embed,
            layers,
            head,
        })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn init_parameters<R: Rng + ?Sized>(&self, rng: &mut R) -> GnnParameters {
        let mut gains = vec![0.0; self.layout.blocks().len()];
        self.user_embed.gains(&mut gains);
        for l in &self.layers {
            l.user_message.gains(&mut gains);
            l.user_combine.gains(&mut gains);
        }
        self.head.gains(&mut gains);
        GnnParameters::initialize(self.layout.clone(), &gains, rng)
    }

    fn trunk(&self, params: &[f64], features: &Array2<f64>, users: usize) -> Result<TrunkPass> {
        if users == 0 || features.nrows() % users != 0 || features.ncols() != self.user_embed.input_dim() {
            return Err(Error::shape("feature matrix does not match the estimation network"));
        }
        let lay = &self.layout;
        let mut caches = Vec::new();
        let mut sources = Vec::new();
        let (mut zu, c) = self.user_embed.forward(lay, params, features.clone());
        caches.push(c);
        for l in &self.layers {
            let (c3, cm) = l.user_message.forward(lay, params, zu.clone());
            let (mx, src) = max_over_others(&c3, users);
            let input = concatenate(Axis(1), &[zu.view(), mx.view()]).unwrap();
            let (next, cc) = l.user_combine.forward(lay, params, input);
            caches.push(cm);
            caches.push(cc);
            sources.push(src);
            zu = next;
        }
        Ok((zu, caches, sources))
    }

    fn to_matrix(&self, row: ndarray::ArrayView1<'_, f64>, scale: f64) -> CMatrix {
        let (m, cols) = (self.dims.antennas, self.dims.elements + 1);
        let half = m * cols;
        CMatrix::from_shape_fn((m, cols), |(r, c)| {
            C64::new(row[c * m + r], row[half + c * m + r]) * scale
        })
    }

    /// Estimated `F_k` for every feature row, in row order.
    pub fn estimate(
        &self,
        params: &GnnParameters,
        features: &Array2<f64>,
        users: usize,
        output_scale: f64,
    ) -> Result<Vec<CMatrix>> {
        let (zu, _, _) = self.trunk(&params.values, features, users)?;
        let out = self.head.infer(&self.layout, &params.values, zu.view());
        Ok(out
            .rows()
            .into_iter()
            .map(|r| self.to_matrix(r, output_scale))
            .collect())
    }

    /// Mean squared error against `targets` (one `F_k` per feature row) and
    /// its gradient.
    pub fn loss_and_gradient(
        &self,
        params: &GnnParameters,
        features: &Array2<f64>,
        users: usize,
        targets: &[CMatrix],
        output_scale: f64,
    ) -> Result<EstimationLoss> {
        if targets.len() != features.nrows() {
            return Err(Error::shape("one target per feature row is required"));
        }
        let lay = &self.layout;
        let p = &params.values;
        let (zu, caches, sources) = self.trunk(p, features, users)?;
        let (out, head_cache) = self.head.forward(lay, p, zu);
        let (m, cols) = (self.dims.antennas, self.dims.elements + 1);
        let half = m * cols;
        let rows = features.nrows();
        let mut d_out = Array2::zeros(out.dim());
        let mut total = 0.0;
        for (i, f) in targets.iter().enumerate() {
            for c in 0..cols {
                for r in 0..m {
                    let re = out[[i, c * m + r]] - f[[r, c]].re / output_scale;
                    let im = out[[i, half + c * m + r]] - f[[r, c]].im / output_scale;
                    total += re * re + im * im;
                    d_out[[i, c * m + r]] = 2.0 * re / rows as f64;
                    d_out[[i, half + c * m + r]] = 2.0 * im / rows as f64;
                }
            }
        }
        let mut gradient = vec![0.0; params.len()];
        let mut dz = self.head.backward(lay, p, &head_cache, &mut gradient, d_out);
        let w = self.config.width;
        for (li, l) in self.layers.iter().enumerate().rev() {
            let d_in = l.user_combine.backward(lay, p, &caches[2 + 2 * li], &mut gradient, dz);
            let mut prev = d_in.slice(s![.., 0..w]).to_owned();
            let d_mx = d_in.slice(s![.., w..2 * w]).to_owned();
            let mut dc3 = Array2::zeros(d_mx.dim());
            let src = &sources[li];
            for r in 0..d_mx.nrows() {
                for c in 0..w {
                    let s = src[r * w + c];
                    if s != u32::MAX {
                        dc3[[s as usize, c]] += d_mx[[r, c]];
                    }
                }
            }
            prev += &l.user_message.backward(lay, p, &caches[1 + 2 * li], &mut gradient, dc3);
            dz = prev;
        }
        self.user_embed.backward(lay, p, &caches[0], &mut gradient, dz);
        Ok(EstimationLoss {
            loss: total / rows as f64 * output_scale * output_scale,
            gradient,
        })
    }
}
