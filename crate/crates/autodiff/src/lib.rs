//! Dense `f64` tensors with a tape for reverse-mode differentiation.
//!
//! Operations are recorded on a [`Graph`] in creation order; [`Graph::backward`]
//! replays them in reverse and returns gradients for every leaf created with
//! [`Graph::input`]. Leaves created with [`Graph::constant`] are skipped, so
//! e.g. an attack that only needs the input gradient never pays for weight
//! gradients.
//!
//! Broadcasting is limited to two explicit forms: [`Var::add_bias`] repeats a
//! trailing block over leading batch axes and [`Var::mul_rows`] /
//! [`Var::div_rows`] scale each last-axis row by one entry.

mod error;
mod fd;
mod graph;
mod kernels;
mod tensor;

pub use error::{Result, TapeError};
pub use fd::{finite_diff_grad, max_relative_error};
pub use graph::{Gradients, Graph, Padding, Var, LAYER_NORM_EPS};
pub use tensor::Tensor;

/// Builds `f` on a fresh graph over differentiable copies of `inputs` and
/// returns the scalar value with one gradient per input.
pub fn value_and_grad<F>(inputs: &[Tensor], f: F) -> Result<(f64, Vec<Tensor>)>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.input(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let out = f(&g, &vars)?;
    let value = out.item()?;
    let mut grads = g.backward(out)?;
    let grads = vars
        .iter()
        .map(|&v| grads.take(v).expect("leaf gradient"))
        .collect();
    Ok((value, grads))
}

/// Forward value of `f` on constant copies of `inputs`.
pub fn evaluate<F>(inputs: &[Tensor], f: F) -> Result<Tensor>
where
    F: for<'g> Fn(&'g Graph, &[Var<'g>]) -> Result<Var<'g>>,
{
    let g = Graph::new();
    let vars = inputs
        .iter()
        .map(|t| g.constant(t.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(f(&g, &vars)?.value())
}
