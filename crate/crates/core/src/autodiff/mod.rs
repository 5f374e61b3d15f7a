//! Network evaluation, exact input derivatives and parameter gradients.

mod dual2;
mod jets;
mod network;

use ndarray::{Array2, Array3, ArrayView2};

pub use dual2::{Dual2, Real, MAX_DIM};
pub use jets::{
    backward, forward_jets, tanh_derivatives, Approximator, DerivOrder, JetLayout, JetTape, Jets,
};
pub use network::{glorot_bound, Activation, Network};

use crate::error::{Error, Result};

/// Derivatives of the model output at a single point.
#[derive(Debug, Clone, PartialEq)]
pub struct InputDerivatives {
    pub value: Vec<f64>,
    /// `m × d`
    pub jacobian: Array2<f64>,
    /// `m × d × d`, present for order 2
    pub hessian: Option<Array3<f64>>,
    /// `∂³u_k/∂x_a³` for the requested axis
    pub third_axis: Option<Vec<f64>>,
}

/// Exact derivatives of `model` at `x` up to `order` (1 or 2), plus the pure
/// third derivative along `third_axis` when requested.
pub fn input_derivatives<A: Approximator + ?Sized>(
    model: &A,
    x: &[f64],
    order: DerivOrder,
    third_axis: Option<usize>,
) -> Result<InputDerivatives> {
    let d = model.input_dim();
    if x.len() != d {
        return Err(Error::Shape(format!(
            "point has {} entries, model expects {d}",
            x.len()
        )));
    }
    let order = order.max(DerivOrder::First);
    let mut layout = JetLayout::new(d, order);
    if let Some(axis) = third_axis {
        layout = layout.with_third_axis(axis)?;
    }
    let pts = ArrayView2::from_shape((1, d), x).expect("1 x d view");
    let jets = model.jets(pts, &layout)?;
    let m = model.output_dim();
    let value = (0..m).map(|k| jets.value(0, k)).collect();
    let jacobian = Array2::from_shape_fn((m, d), |(k, i)| jets.jac(0, k, i));
    let hessian = (layout.order() >= DerivOrder::Second && order >= DerivOrder::Second)
        .then(|| Array3::from_shape_fn((m, d, d), |(k, i, j)| jets.hess(0, k, i, j)));
    let third_axis = third_axis.map(|_| (0..m).map(|k| jets.third(0, k, 0)).collect());
    Ok(InputDerivatives {
        value,
        jacobian,
        hessian,
        third_axis,
    })
}

/// Scalar loss over one batch of output jets.
///
/// Implementors return the loss and accumulate `∂loss/∂jets` into `adjoint`.
pub trait JetLoss {
    fn evaluate(&self, jets: &Jets, adjoint: &mut Jets) -> Result<f64>;
}

impl<F> JetLoss for F
where
    F: Fn(&Jets, &mut Jets) -> Result<f64>,
{
    fn evaluate(&self, jets: &Jets, adjoint: &mut Jets) -> Result<f64> {
        self(jets, adjoint)
    }
}

/// Loss value on a batch and its gradient with respect to every weight and
/// bias, differentiating through the input-derivative jets the loss reads.
pub fn loss_gradient<L: JetLoss + ?Sized>(
    net: &Network,
    points: ArrayView2<f64>,
    layout: &JetLayout,
    loss: &L,
) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; net.num_params()];
    let value = accumulate_loss_gradient(net, points, layout, loss, &mut grad)?;
    Ok((value, grad))
}

/// As [`loss_gradient`] but adds into an existing gradient buffer.
pub fn accumulate_loss_gradient<L: JetLoss + ?Sized>(
    net: &Network,
    points: ArrayView2<f64>,
    layout: &JetLayout,
    loss: &L,
    grad: &mut [f64],
) -> Result<f64> {
    if points.nrows() == 0 {
        return Err(Error::EmptyBatch);
    }
    let (jets, tape) = forward_jets(net, points, layout, true)?;
    let mut adjoint = Jets::zeros_like(&jets);
    let value = loss.evaluate(&jets, &mut adjoint)?;
    if !value.is_finite() {
        return Err(Error::numerical("loss", adjoint.first_non_finite().or(Some(0))));
    }
    if let Some(p) = adjoint.first_non_finite() {
        return Err(Error::numerical("loss adjoint", Some(p)));
    }
    backward(net, tape.as_ref().expect("tape recorded"), &adjoint, grad)?;
    Ok(value)
}
