//! End-point error.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn check(pred: &[usize], gt: &[usize]) -> Result<()> {
    if pred != gt {
        return Err(Error::Shape(format!("prediction {pred:?} vs ground truth {gt:?}")));
    }
    Ok(())
}

/// Mean over pixels of `sqrt(Δu² + Δv²)` for `(2, H, W)` fields.
pub fn aepe<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    check(pred.shape(), gt.shape())?;
    if pred.rank() != 3 || pred.shape()[0] != 2 {
        return Err(Error::Shape(format!("flow must be (2, H, W), got {:?}", pred.shape())));
    }
    let p = pred.shape()[1] * pred.shape()[2];
    let (pu, pv) = pred.data().split_at(p);
    let (gu, gv) = gt.data().split_at(p);
    let mut total = 0.0f64;
    for q in 0..p {
        let du = pu[q].as_f64() - gu[q].as_f64();
        let dv = pv[q].as_f64() - gv[q].as_f64();
        total += (du * du + dv * dv).sqrt();
    }
    Ok(total / p as f64)
}

/// Mean end-point error over a batch `(N, 2, H, W)`.
pub fn aepe_batch<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    Ok(epe_loss(pred, gt)?.0)
}

/// Mean end-point error over `(N, 2, H, W)` and its gradient with respect to
/// `pred`. The gradient at a pixel with zero error is zero.
pub fn epe_loss<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    check(pred.shape(), gt.shape())?;
    let (n, c, h, w) = pred.dims4()?;
    if c != 2 {
        return Err(Error::Shape(format!("flow batch must have 2 channels, got {c}")));
    }
    let p = h * w;
    let count = (n * p) as f64;
    let mut grad = Tensor::zeros_like(pred);
    let mut total = 0.0f64;
    for b in 0..n {
        let base = b * 2 * p;
        for q in 0..p {
            let (iu, iv) = (base + q, base + p + q);
            let du = pred.data()[iu].as_f64() - gt.data()[iu].as_f64();
            let dv = pred.data()[iv].as_f64() - gt.data()[iv].as_f64();
            let norm = (du * du + dv * dv).sqrt();
            total += norm;
            if norm > 0.0 {
                grad.data_mut()[iu] = T::of(du / norm / count);
                grad.data_mut()[iv] = T::of(dv / norm / count);
            }
        }
    }
    Ok((total / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_fields_give_zero() {
        let f = crate::rng::gaussian_fill::<f32>(&[2, 4, 5], 1, 0.0, 2.0).unwrap();
        assert_eq!(aepe(&f, &f).unwrap(), 0.0);
        let (l, g) = epe_loss(&f.clone().reshape(&[1, 2, 4, 5]).unwrap(), &f.reshape(&[1, 2, 4, 5]).unwrap()).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn three_four_five() {
        let gt = crate::rng::gaussian_fill::<f32>(&[2, 3, 3], 2, 0.0, 1.0).unwrap();
        let mut pred = Tensor::<f32>::zeros(&[2, 3, 3]).unwrap();
        for (i, v) in pred.data_mut().iter_mut().enumerate() {
            *v = if i < 9 { 3.0 } else { 4.0 };
        }
        assert_eq!(aepe(&pred, &Tensor::zeros(&[2, 3, 3]).unwrap()).unwrap(), 5.0);
        let shifted = gt.add(&pred).unwrap();
        assert!((aepe(&shifted, &gt).unwrap() - 5.0).abs() < 1e-6);
    }

    #[test]
    fn shape_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 3, 3]).unwrap();
        let b = Tensor::<f32>::zeros(&[2, 3, 4]).unwrap();
        assert!(aepe(&a, &b).is_err());
    }
}
