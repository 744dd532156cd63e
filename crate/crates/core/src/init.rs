use rand::Rng;

use crate::tensor::{Element, Tensor, TensorError};

/// Fan-in of a kernel shaped `[f.., c_in, c_out]`: spatial taps times `c_in`.
pub fn fan_in(shape: &[usize]) -> usize {
    if shape.len() < 2 {
        return 0;
    }
    shape[..shape.len() - 1].iter().product()
}

/// He-uniform bound `sqrt(6 / fan_in)`.
pub fn he_uniform_limit(shape: &[usize]) -> Result<f64, TensorError> {
    let fan = fan_in(shape);
    if fan == 0 {
        return Err(TensorError::InvalidArgument(format!(
            "kernel shape {shape:?} has zero fan-in"
        )));
    }
    Ok((6.0 / fan as f64).sqrt())
}

/// I.i.d. uniform samples on `[-L, L]` with `L = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Element, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Result<Tensor<T>, TensorError> {
    let limit = he_uniform_limit(shape)?;
    crate::tensor::check_shape(shape)?;
    Ok(Tensor::from_fn(shape, |_| T::of(rng.random_range(-limit..=limit))))
}
