//! Dense reverse-mode differentiation with forward-mode tangents.
//!
//! ```
//! use flowmap::autodiff::{jvp, Tensor};
//!
//! let (y, dy) = jvp(|x| x.square(), &Tensor::scalar(3.0), &Tensor::scalar(1.0)).unwrap();
//! assert_eq!((y.item(), dy.item()), (9.0, 6.0));
//! ```

mod params;
mod tape;
mod tensor;

pub use params::{ParamVars, ParamVector, Segment};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Loss value and its gradient with respect to every segment of `theta`.
pub fn value_and_grad<F>(theta: &ParamVector, loss_fn: F) -> Result<(f64, ParamVector)>
where
    F: for<'t> FnOnce(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    let tape = Tape::new();
    let vars = ParamVars::leaves(&tape, theta);
    let loss = loss_fn(&tape, &vars);
    let grads = tape.gradients(loss)?;
    let value = loss.value().item();
    Ok((value, vars.collect(&grads, theta)))
}

pub fn grad<F>(theta: &ParamVector, loss_fn: F) -> Result<ParamVector>
where
    F: for<'t> FnOnce(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    value_and_grad(theta, loss_fn).map(|(_, g)| g)
}

/// Gradient of a loss whose expression contains directional derivatives.
///
/// The closure seeds tangents with [`Tape::seed`] and reads them back with
/// [`Var::tangent`]; because tangents live on the same tape, one reverse
/// sweep differentiates through them.
pub fn grad_through_jvp<F>(theta: &ParamVector, loss_fn: F) -> Result<ParamVector>
where
    F: for<'t> FnOnce(&'t Tape, &ParamVars<'t>) -> Var<'t>,
{
    grad(theta, loss_fn)
}

/// `(f(x), J_f(x) · dir)`.
pub fn jvp<F>(f: F, x: &Tensor, dir: &Tensor) -> Result<(Tensor, Tensor)>
where
    F: for<'t> FnOnce(Var<'t>) -> Var<'t>,
{
    if x.shape() != dir.shape() {
        return Err(Error::Shape(format!(
            "jvp direction {:?} does not match input {:?}",
            dir.shape(),
            x.shape()
        )));
    }
    let tape = Tape::new();
    let xs = tape.seed(tape.constant(x.clone()), tape.constant(dir.clone()));
    let y = f(xs);
    tape.check()?;
    Ok((y.value(), y.tangent_value()))
}
