//! Flat parameter storage with a named layout.

use core::ops::Range;

use ndarray::{ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::prelude::*;
use crate::{Error, Result};

/// One weight matrix (`rows x cols`, row-major) or bias vector (`rows == 1`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamBlock {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered list of parameter blocks packed back to back.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Layout {
    blocks: Vec<ParamBlock>,
    total: usize,
}

impl Layout {
    pub fn new() -> Self {
        Self::default()
    }

    /// Appends a block and returns its index.
    pub fn push(&mut self, name: String, rows: usize, cols: usize) -> usize {
        self.blocks.push(ParamBlock {
            name,
            rows,
            cols,
            offset: self.total,
        });
        self.total += rows * cols;
        self.blocks.len() - 1
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn block(&self, index: usize) -> &ParamBlock {
        &self.blocks[index]
    }

    pub fn find(&self, name: &str) -> Option<&ParamBlock> {
        self.blocks.iter().find(|b| b.name == name)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Parameter values laid out by a [`Layout`].
#[derive(Debug, Clone, PartialEq)]
pub struct GnnParameters {
    pub layout: Layout,
    pub values: Vec<f64>,
}

impl GnnParameters {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.len()];
        GnnParameters { layout, values }
    }

    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::shape(format!(
                "{} parameter values for a layout of {}",
                values.len(),
                layout.len()
            )));
        }
        Ok(GnnParameters { layout, values })
    }

    /// Fan-in scaled Gaussian weights and zero biases. `gains[i]` multiplies
    /// the standard deviation `1 / sqrt(fan_in)` of block `i`.
    pub fn initialize<R: Rng + ?Sized>(layout: Layout, gains: &[f64], rng: &mut R) -> Self {
        let mut values = vec![0.0; layout.len()];
        for (block, &gain) in layout.blocks().iter().zip(gains) {
            if block.rows == 1 {
                continue;
            }
            let std = gain / (block.rows as f64).sqrt();
            for x in &mut values[block.range()] {
                let z: f64 = StandardNormal.sample(rng);
                *x = z * std;
            }
        }
        GnnParameters { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn matrix(&self, index: usize) -> ArrayView2<'_, f64> {
        matrix_view(&self.layout, &self.values, index)
    }

    pub fn vector(&self, index: usize) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.values[self.layout.block(index).range()])
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|x| x.is_finite())
    }
}

pub(crate) fn matrix_view<'a>(layout: &Layout, values: &'a [f64], index: usize) -> ArrayView2<'a, f64> {
    let b = layout.block(index);
    ArrayView2::from_shape((b.rows, b.cols), &values[b.range()]).expect("layout block shape")
}

pub(crate) fn matrix_view_mut<'a>(layout: &Layout, values: &'a mut [f64], index: usize) -> ArrayViewMut2<'a, f64> {
    let b = layout.block(index);
    ArrayViewMut2::from_shape((b.rows, b.cols), &mut values[b.range()]).expect("layout block shape")
}

pub(crate) fn vector_view_mut<'a>(layout: &Layout, values: &'a mut [f64], index: usize) -> ArrayViewMut1<'a, f64> {
    ArrayViewMut1::from(&mut values[layout.block(index).range()])
}
