//! Fully connected blocks with rectified-linear hidden layers.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, Axis};

use super::params::{matrix_view, matrix_view_mut, vector_view_mut, Layout};
use crate::prelude::*;

/// Dense layers `in -> h_1 -> ... -> out`; ReLU after every layer but the last.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    /// (weight block, bias block) per layer.
    layers: Vec<(usize, usize)>,
    dims: Vec<usize>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of every layer; entry 0 is the block input.
    inputs: Vec<Array2<f64>>,
}

impl Mlp {
    pub fn new(layout: &mut Layout, name: &str, dims: &[usize]) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output widths");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                let w = layout.push(format!("{name}.{i}.weight"), d[0], d[1]);
                let b = layout.push(format!("{name}.{i}.bias"), 1, d[1]);
                (w, b)
            })
            .collect();
        Mlp {
            layers,
            dims: dims.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// Initialization gain per block: sqrt(2) ahead of a ReLU, 1 otherwise.
    pub fn gains(&self, out: &mut [f64]) {
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            out[w] = if i < last { core::f64::consts::SQRT_2 } else { 1.0 };
            out[b] = 0.0;
        }
    }

    pub fn forward(&self, layout: &Layout, params: &[f64], x: Array2<f64>) -> (Array2<f64>, MlpCache) {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut y = h.dot(&matrix_view(layout, params, w));
            let bias = matrix_view(layout, params, b);
            y += &bias.row(0);
            if i < last {
                y.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(h);
            h = y;
        }
        (h, MlpCache { inputs })
    }

    pub fn infer(&self, layout: &Layout, params: &[f64], x: ArrayView2<'_, f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut h = x.to_owned();
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let mut y = h.dot(&matrix_view(layout, params, w));
            y += &matrix_view(layout, params, b).row(0);
            if i < last {
                y.mapv_inplace(|v| v.max(0.0));
            }
            h = y;
        }
        h
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    pub fn backward(
        &self,
        layout: &Layout,
        params: &[f64],
        cache: &MlpCache,
        grad: &mut [f64],
        upstream: Array2<f64>,
    ) -> Array2<f64> {
        let mut d = upstream;
        for (i, &(w, b)) in self.layers.iter().enumerate().rev() {
            let input = &cache.inputs[i];
            {
                let mut gw = matrix_view_mut(layout, grad, w);
                general_mat_mul(1.0, &input.t(), &d, 1.0, &mut gw);
            }
            {
                let mut gb = vector_view_mut(layout, grad, b);
                gb += &d.sum_axis(Axis(0));
            }
            let mut dx = d.dot(&matrix_view(layout, params, w).t());
            if i > 0 {
                // input of layer i is the ReLU output of layer i - 1
                dx.zip_mut_with(input, |g, &a| {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                });
            }
            d = dx;
        }
        d
    }
}

impl MlpCache {
    /// Appends which hidden units were active.
    pub(crate) fn push_pattern(&self, out: &mut Vec<u32>) {
        for h in &self.inputs[1..] {
            out.extend(h.iter().map(|&a| u32::from(a > 0.0)));
        }
    }
}
