//! Finite-difference validation of module gradients.
//!
//! A module exposes its learnable tensors by name; a loss closure registers
//! the same names on a tape. The analytic gradients from one backward pass
//! are compared element-wise against central differences of the loss value,
//! probing one parameter tensor at a time.

use crate::error::Result;
use crate::tape::{finite_diff_grad, max_relative_error, Tape, Val};
use crate::tensor::Tensor;

/// Modules whose parameters can be enumerated and overwritten by name.
pub trait GradCheckable: Clone {
    fn param_list(&self) -> Vec<(String, Tensor)>;
    fn set_param(&mut self, name: &str, value: &Tensor);
}

/// Worst relative gradient error across all parameters of `model` for the
/// given scalar loss. The loss closure must register the model's parameters
/// on the tape under the same names `param_list` reports.
pub fn max_param_grad_error<M, F>(model: &M, loss: F, h: f64) -> Result<f64>
where
    M: GradCheckable,
    F: Fn(&M, &mut Tape) -> Result<Val>,
{
    let mut tape = Tape::new();
    let l = loss(model, &mut tape)?;
    tape.backward(l)?;

    let mut worst: f64 = 0.0;
    for (name, tensor) in model.param_list() {
        let analytic = tape
            .param_grad(&name)
            .unwrap_or_else(|| panic!("parameter {name} not registered by the loss"))
            .to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut m = model.clone();
                m.set_param(&name, probe);
                let mut t = Tape::new();
                let l = loss(&m, &mut t)?;
                Ok(t.scalar_value(l))
            },
            &tensor,
            h,
        )?;
        worst = worst.max(max_relative_error(&analytic, numeric.data()));
    }
    Ok(worst)
}

/// Blanket plumbing for modules that already provide visit/visit_mut pairs.
#[macro_export]
macro_rules! impl_grad_checkable {
    ($ty:ty, $prefix:expr) => {
        impl $crate::gradcheck::GradCheckable for $ty {
            fn param_list(&self) -> Vec<(String, $crate::tensor::Tensor)> {
                let mut out = Vec::new();
                self.visit($prefix, &mut |name, t| out.push((name, t.clone())));
                out
            }

            fn set_param(&mut self, name: &str, value: &$crate::tensor::Tensor) {
                let mut found = false;
                self.visit_mut($prefix, &mut |n, t| {
                    if n == name {
                        *t = value.clone();
                        found = true;
                    }
                });
                assert!(found, "unknown parameter {name}");
            }
        }
    };
}
