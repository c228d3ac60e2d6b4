use crate::autodiff::{Tape, Var};
use crate::error::Result;

/// Mean squared difference over every element.
pub fn mse_loss(tape: &Tape, estimate: &Var, target: &Var) -> Result<Var> {
    let d = tape.sub(estimate, target)?;
    Ok(tape.mean(&tape.mul(&d, &d)?))
}
