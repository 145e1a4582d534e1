use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function, element by element.
///
/// Used as an independent oracle for [`super::Graph::backward`].
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(step > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut grad = Tensor::zeros(point.shape());
    let mut probe = point.clone();
    for i in 0..point.len() {
        let x0 = point.data()[i];
        probe.data_mut()[i] = x0 + step;
        let up = f(&probe)?;
        probe.data_mut()[i] = x0 - step;
        let down = f(&probe)?;
        probe.data_mut()[i] = x0;
        grad.data_mut()[i] = (up - down) / (2.0 * step);
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_gradient(|t| Ok(t.item() * t.item()), &Tensor::scalar(3.0), 1e-5)
            .unwrap();
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn sum_is_all_ones() {
        let p = Tensor::vector(vec![0.3, -2.0, 7.5]);
        let g = finite_difference_gradient(|t| Ok(t.sum()), &p, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(finite_difference_gradient(|t| Ok(t.sum()), &Tensor::scalar(1.0), 0.0).is_err());
    }
}
