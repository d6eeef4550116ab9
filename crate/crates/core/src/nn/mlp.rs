//! Batched forward and backward passes of the dual-branch network.

use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};

use super::{LayerShape, ModelParams, NetConfig};
use crate::error::{Error, Result};

const COMM: usize = 0;
const SENS: usize = 1;
const FUSION: usize = 2;
const OUTPUT: usize = 3;

/// Intermediate values kept for the backward pass. Hidden activations are
/// stored after the ReLU.
#[derive(Debug, Clone)]
pub struct Activations {
    pub comm_in: Array2<f64>,
    pub sens_in: Array2<f64>,
    /// `[comm_hidden | sens_hidden]`, the input of the fusion layer.
    pub joint: Array2<f64>,
    pub fused: Array2<f64>,
    /// Raw output, one row per sample.
    pub out: Array2<f64>,
}

fn weights<'a>(params: &'a ModelParams, layer: &LayerShape) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((layer.outputs, layer.inputs), &params.values()[layer.weights()])
        .expect("layout matches parameter length")
}

fn biases<'a>(params: &'a ModelParams, layer: &LayerShape) -> ArrayView1<'a, f64> {
    ArrayView1::from(&params.values()[layer.biases()])
}

fn dense(x: ArrayView2<f64>, params: &ModelParams, layer: &LayerShape, mut y: ArrayViewMut2<f64>, relu: bool) {
    general_mat_mul(1.0, &x, &weights(params, layer).t(), 0.0, &mut y);
    y += &biases(params, layer);
    if relu {
        y.mapv_inplace(|v| v.max(0.0));
    }
}

/// Runs the network on a batch. `comm_in` is `B x comm_in_dim`, `sens_in` is
/// `B x sens_in_dim`.
pub fn forward_raw(
    params: &ModelParams,
    cfg: &NetConfig,
    comm_in: Array2<f64>,
    sens_in: Array2<f64>,
) -> Result<Activations> {
    if params.layout() != &cfg.layout() {
        return Err(Error::dim("parameters do not match the network configuration"));
    }
    let batch = comm_in.nrows();
    if comm_in.ncols() != cfg.comm_in_dim() || sens_in.ncols() != cfg.sens_in_dim() || sens_in.nrows() != batch {
        return Err(Error::dim(format!(
            "inputs {:?} / {:?} do not fit the network",
            comm_in.dim(),
            sens_in.dim()
        )));
    }
    let layers = &params.layout().layers;
    let h = cfg.hidden;
    let mut joint = Array2::zeros((batch, 2 * h));
    dense(comm_in.view(), params, &layers[COMM], joint.slice_mut(s![.., ..h]), true);
    dense(sens_in.view(), params, &layers[SENS], joint.slice_mut(s![.., h..]), true);
    let mut fused = Array2::zeros((batch, h));
    dense(joint.view(), params, &layers[FUSION], fused.view_mut(), true);
    let mut out = Array2::zeros((batch, cfg.out_dim()));
    dense(fused.view(), params, &layers[OUTPUT], out.view_mut(), false);
    Ok(Activations {
        comm_in,
        sens_in,
        joint,
        fused,
        out,
    })
}

fn accumulate_layer(
    grad: &mut [f64],
    layer: &LayerShape,
    d_pre: ArrayView2<f64>,
    input: ArrayView2<f64>,
) {
    let (w_part, rest) = grad[layer.span()].split_at_mut(layer.inputs * layer.outputs);
    let mut dw = ArrayViewMut2::from_shape((layer.outputs, layer.inputs), w_part).expect("layer shape");
    general_mat_mul(1.0, &d_pre.t(), &input, 0.0, &mut dw);
    let mut db = ArrayViewMut1::from(rest);
    db.assign(&d_pre.sum_axis(Axis(0)));
}

fn relu_mask(mut d: Array2<f64>, act: ArrayView2<f64>) -> Array2<f64> {
    d.zip_mut_with(&act, |g, &a| {
        if a <= 0.0 {
            *g = 0.0;
        }
    });
    d
}

/// Gradient of a scalar loss with respect to every parameter, given the
/// loss gradient `d_out` with respect to the raw output rows.
pub(crate) fn backward(params: &ModelParams, cfg: &NetConfig, acts: &Activations, d_out: ArrayView2<f64>) -> Vec<f64> {
    let layers = &params.layout().layers;
    let h = cfg.hidden;
    let mut grad = vec![0.0; params.len()];

    accumulate_layer(&mut grad, &layers[OUTPUT], d_out, acts.fused.view());
    let d_fused = relu_mask(d_out.dot(&weights(params, &layers[OUTPUT])), acts.fused.view());

    accumulate_layer(&mut grad, &layers[FUSION], d_fused.view(), acts.joint.view());
    let d_joint = relu_mask(d_fused.dot(&weights(params, &layers[FUSION])), acts.joint.view());

    accumulate_layer(&mut grad, &layers[COMM], d_joint.slice(s![.., ..h]), acts.comm_in.view());
    accumulate_layer(&mut grad, &layers[SENS], d_joint.slice(s![.., h..]), acts.sens_in.view());
    grad
}
