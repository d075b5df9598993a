//! Central-difference gradient checking.

use super::{Element, ParamStore, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// `max_i |a_i - n_i| / max(|a_i|, |n_i|, 1e-8)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

fn check_step(step: f64) -> Result<()> {
    if !(1e-4..=1e-2).contains(&step) {
        return Err(Error::contract(
            "grad_check",
            format!("step {step} outside [1e-4, 1e-2]"),
        ));
    }
    Ok(())
}

fn scalar_of<T: Element>(tape: &Tape<T>, v: Var) -> Result<f64> {
    let value = tape.value(v);
    if value.numel() != 1 {
        return Err(Error::contract(
            "grad_check",
            format!("function must be scalar, got {:?}", value.shape()),
        ));
    }
    Ok(value.data()[0].as_f64())
}

/// Compares the tape gradient of a scalar function at `point` with central
/// differences and returns the maximum relative error over coordinates.
pub fn grad_check<T, F>(f: F, point: &Tensor<T>, step: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, Var) -> Result<Var>,
{
    check_step(step)?;
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone().with_grad());
    let y = f(&mut tape, x)?;
    scalar_of(&tape, y)?;
    tape.backward(y)?;
    let analytic: Vec<f64> = match tape.grad(x) {
        Some(g) => g.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; point.numel()],
    };

    let eval = |values: Vec<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::new(point.shape().to_vec(), values)?);
        let y = f(&mut tape, x)?;
        scalar_of(&tape, y)
    };
    let h = T::from_f64_lossy(step);
    let mut numeric = Vec::with_capacity(point.numel());
    for i in 0..point.numel() {
        let mut plus = point.data().to_vec();
        plus[i] = plus[i] + h;
        let mut minus = point.data().to_vec();
        minus[i] = minus[i] - h;
        let width = (plus[i] - minus[i]).as_f64();
        numeric.push((eval(plus)? - eval(minus)?) / width);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

/// Gradient check over every scalar of a parameter store.
pub fn grad_check_params<T, F>(f: F, params: &ParamStore<T>, step: f64) -> Result<f64>
where
    T: Element,
    F: Fn(&mut Tape<T>, &ParamStore<T>) -> Result<Var>,
{
    check_step(step)?;
    let mut store = params.clone();
    store.zero_grads();
    let mut tape = Tape::new();
    let y = f(&mut tape, &store)?;
    scalar_of(&tape, y)?;
    tape.backward_into(y, &mut store)?;
    let analytic: Vec<f64> = store.flatten_grads().iter().map(|v| v.as_f64()).collect();

    let base = params.flatten();
    let h = T::from_f64_lossy(step);
    let mut probe = params.clone();
    let mut eval = |values: &[T]| -> Result<f64> {
        probe.assign_flat(values);
        let mut tape = Tape::new();
        let y = f(&mut tape, &probe)?;
        scalar_of(&tape, y)
    };
    let mut numeric = Vec::with_capacity(base.len());
    let mut work = base.clone();
    for i in 0..base.len() {
        work[i] = base[i] + h;
        let up = eval(&work)?;
        let hi = work[i];
        work[i] = base[i] - h;
        let down = eval(&work)?;
        let width = (hi - work[i]).as_f64();
        work[i] = base[i];
        numeric.push((up - down) / width);
    }
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn linear_map_is_exact() {
        let err = grad_check(|t, x| Ok(t.sum(x)), &random(&[3, 4], 1), 1e-3).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        assert!(grad_check(|t, x| Ok(t.sum(x)), &random(&[2], 1), 0.5).is_err());
    }

    #[test]
    fn relative_error_formula() {
        assert_eq!(max_relative_error(&[1.0, 0.0], &[1.0, 0.0]), 0.0);
        assert!((max_relative_error(&[2.0], &[1.0]) - 0.5).abs() < 1e-15);
        // both tiny: denominator floors at 1e-8
        assert!((max_relative_error(&[1e-9], &[0.0]) - 0.1).abs() < 1e-12);
    }
}
