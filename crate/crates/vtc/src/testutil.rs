//! Shared helpers for unit tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tape::{finite_diff_grad, max_relative_error, Tape, Val};
use crate::tensor::Tensor;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(dims: &[usize], rng: &mut impl Rng) -> Tensor {
    Tensor::uniform(dims, 1.0, rng)
}

/// Assert that the tape gradient of `loss` with respect to its input matches
/// central differences within `tol` relative error.
pub fn check_grad_wrt_input<F>(loss: F, x0: &Tensor, tol: f64)
where
    F: Fn(&mut Tape, Val) -> Result<Val>,
{
    let mut tape = Tape::new();
    let tracked = x0.clone().with_grad();
    let x = tape.leaf(&tracked);
    let l = loss(&mut tape, x).expect("forward failed");
    tape.backward(l).expect("backward failed");
    let analytic = tape.grad(x).to_vec();

    let numeric = finite_diff_grad(
        |probe| {
            let mut t = Tape::new();
            let v = t.leaf(probe);
            let l = loss(&mut t, v)?;
            Ok(t.scalar_value(l))
        },
        x0,
        1e-4,
    )
    .expect("finite differences failed");

    let err = max_relative_error(&analytic, numeric.data());
    assert!(
        err <= tol,
        "gradient mismatch: max relative error {err:.3e} exceeds {tol:.0e}"
    );
}
