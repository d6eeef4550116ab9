//! Dual-branch beamforming network.
//!
//! Communication channels and the sensing channel each pass through their
//! own fully-connected ReLU layer; the two hidden vectors are concatenated,
//! fused by a third ReLU layer, and mapped by a linear output layer to an
//! `(n_t, k_max, 2)` real tensor that is read as a complex `n_t x k_max`
//! beamformer. Columns beyond the cell's user count are dropped and the
//! result is scaled onto the transmit power budget.
//!
//! Gradients are derived by hand: the rate objective is differentiated with
//! respect to the complex beamformer, pushed back through the power
//! projection, then through the network with batched matrix products.

mod adam;
mod io;
mod mlp;
mod objective;

pub(crate) use objective::batch_objective;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::channel::RngStream;
use crate::error::{Error, Result};

pub use adam::{adam_step, AdamState};
pub use io::{read_adam, read_params, write_adam, write_params};
pub use mlp::{forward_raw, Activations};
pub use objective::{
    beamformers_for, forward, forward_features, loss_and_grad, loss_and_grad_local, project_power,
    project_power_backward, utility_and_grad, POWER_TOLERANCE, Interference, LocalSample, LossGrad, Objective,
};

/// Dimensions of the beamforming network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetConfig {
    pub n_t: usize,
    /// Largest user count over all cells; inputs are zero-padded to it.
    pub k_max: usize,
    pub hidden: usize,
}

impl NetConfig {
    pub fn new(n_t: usize, k_max: usize, hidden: usize) -> Result<Self> {
        if n_t == 0 || k_max == 0 || hidden == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        Ok(Self { n_t, k_max, hidden })
    }

    pub fn comm_in_dim(&self) -> usize {
        self.n_t * self.k_max * 2
    }

    pub fn sens_in_dim(&self) -> usize {
        self.n_t * 2
    }

    pub fn out_dim(&self) -> usize {
        self.n_t * self.k_max * 2
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&[
            ("comm", self.comm_in_dim(), self.hidden),
            ("sens", self.sens_in_dim(), self.hidden),
            ("fusion", 2 * self.hidden, self.hidden),
            ("output", self.hidden, self.out_dim()),
        ])
    }
}

/// One fully-connected layer: a row-major `outputs x inputs` weight block
/// followed by `outputs` biases.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerShape {
    pub name: String,
    pub inputs: usize,
    pub outputs: usize,
    pub offset: usize,
}

impl LayerShape {
    pub fn weights(&self) -> Range<usize> {
        self.offset..self.offset + self.inputs * self.outputs
    }

    pub fn biases(&self) -> Range<usize> {
        let start = self.offset + self.inputs * self.outputs;
        start..start + self.outputs
    }

    /// Weights and biases together.
    pub fn span(&self) -> Range<usize> {
        self.offset..self.biases().end
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Layout {
    pub layers: Vec<LayerShape>,
}

impl Layout {
    fn new(spec: &[(&str, usize, usize)]) -> Self {
        let mut offset = 0;
        let layers = spec
            .iter()
            .map(|&(name, inputs, outputs)| {
                let layer = LayerShape {
                    name: name.to_string(),
                    inputs,
                    outputs,
                    offset,
                };
                offset += inputs * outputs + outputs;
                layer
            })
            .collect();
        Self { layers }
    }

    pub fn total(&self) -> usize {
        self.layers.last().map_or(0, |l| l.span().end)
    }

    /// Parameter range covered by the last `n` layers.
    pub fn trailing_span(&self, n: usize) -> Range<usize> {
        let n = n.min(self.layers.len());
        let start = if n == 0 {
            self.total()
        } else {
            self.layers[self.layers.len() - n].offset
        };
        start..self.total()
    }
}

/// Flat parameter vector of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    layout: Layout,
    values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(layout: Layout) -> Self {
        let values = vec![0.0; layout.total()];
        Self { layout, values }
    }

    pub fn from_vec(layout: Layout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.total() {
            return Err(Error::dim(format!(
                "{} values for a layout of {}",
                values.len(),
                layout.total()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite model parameter".into()));
        }
        Ok(Self { layout, values })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn check_same_layout(&self, other: &ModelParams) -> Result<()> {
        if self.layout != other.layout {
            return Err(Error::dim("model layouts differ"));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Squared Euclidean distance to `other`.
    pub fn distance_sq(&self, other: &ModelParams) -> Result<f64> {
        self.check_same_layout(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(cfg: &NetConfig, rng: &mut RngStream) -> ModelParams {
    let mut params = ModelParams::zeros(cfg.layout());
    for layer in cfg.layout().layers {
        let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
        for v in &mut params.values[layer.weights()] {
            *v = rng.symmetric_uniform(bound);
        }
    }
    params
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_sizes() {
        let cfg = NetConfig::new(8, 4, 256).unwrap();
        assert_eq!(cfg.comm_in_dim(), 64);
        assert_eq!(cfg.sens_in_dim(), 16);
        assert_eq!(cfg.out_dim(), 64);
        let layout = cfg.layout();
        assert_eq!(layout.layers.len(), 4);
        let expect = 64 * 256 + 256 + 16 * 256 + 256 + 512 * 256 + 256 + 256 * 64 + 64;
        assert_eq!(layout.total(), expect);
        assert_eq!(layout.trailing_span(0), expect..expect);
        assert_eq!(layout.trailing_span(1).start, layout.layers[3].offset);
        assert_eq!(layout.trailing_span(9), 0..expect);
        assert!(NetConfig::new(0, 1, 1).is_err());
    }

    #[test]
    fn init_is_bounded_deterministic_with_zero_biases() {
        let cfg = NetConfig::new(3, 2, 5).unwrap();
        let a = init_params(&cfg, &mut RngStream::new(7, 0));
        let b = init_params(&cfg, &mut RngStream::new(7, 0));
        assert_eq!(a, b);
        for layer in &a.layout().layers {
            assert!(a.values()[layer.biases()].iter().all(|&v| v == 0.0));
            let bound = (6.0 / (layer.inputs + layer.outputs) as f64).sqrt();
            let max = a.values()[layer.weights()].iter().fold(0.0f64, |m, v| m.max(v.abs()));
            assert!(max <= bound && max > 0.0);
        }
        let c = init_params(&cfg, &mut RngStream::new(8, 0));
        assert_ne!(a, c);
    }

    #[test]
    fn from_vec_checks_length_and_finiteness() {
        let layout = NetConfig::new(1, 1, 1).unwrap().layout();
        let n = layout.total();
        assert!(ModelParams::from_vec(layout.clone(), vec![0.0; n + 1]).is_err());
        let mut bad = vec![0.0; n];
        bad[0] = f64::INFINITY;
        assert!(ModelParams::from_vec(layout.clone(), bad).is_err());
        assert!(ModelParams::from_vec(layout, vec![0.5; n]).is_ok());
    }
}
