//! Linear centered kernel alignment between layer activations.

use crate::error::{Error, Result};
use crate::nn::{Network, Tensor};

/// Column-centred copy of an `n x p` row-major matrix.
fn centred(data: &[f64], n: usize, p: usize) -> Vec<f64> {
    let mut out = data.to_vec();
    for j in 0..p {
        let mean = (0..n).map(|i| data[i * p + j]).sum::<f64>() / n as f64;
        for i in 0..n {
            out[i * p + j] -= mean;
        }
    }
    out
}

/// Squared Frobenius norm of `Aᵀ B` for `n x p` A and `n x q` B.
fn cross_norm_sq(a: &[f64], p: usize, b: &[f64], q: usize, n: usize) -> f64 {
    let mut m = vec![0.0; p * q];
    for i in 0..n {
        let ra = &a[i * p..(i + 1) * p];
        let rb = &b[i * q..(i + 1) * q];
        for (j, &x) in ra.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let row = &mut m[j * q..(j + 1) * q];
            for (acc, &y) in row.iter_mut().zip(rb) {
                *acc += x * y;
            }
        }
    }
    m.iter().map(|v| v * v).sum()
}

/// `‖YcᵀXc‖²_F / (‖XcᵀXc‖_F ‖YcᵀYc‖_F)` with rows as samples; higher-rank
/// activations are flattened per sample.
pub fn cka_linear(x: &Tensor, y: &Tensor) -> Result<f64> {
    let n = x.rows();
    if n != y.rows() {
        return Err(Error::Contract(format!("CKA inputs have {n} and {} rows", y.rows())));
    }
    if n < 2 {
        return Err(Error::Contract("CKA needs at least 2 samples".into()));
    }
    let (p, q) = (x.row_len(), y.row_len());
    let xc = centred(x.data(), n, p);
    let yc = centred(y.data(), n, q);
    let xx = cross_norm_sq(&xc, p, &xc, p, n).sqrt();
    let yy = cross_norm_sq(&yc, q, &yc, q, n).sqrt();
    if xx == 0.0 || yy == 0.0 {
        return Err(Error::UndefinedCka("an input has zero variance".into()));
    }
    Ok((cross_norm_sq(&yc, q, &xc, p, n) / (xx * yy)).clamp(0.0, 1.0))
}

/// CKA between the two models' activations at each listed layer.
pub fn cka_trace(model: &Network, reference: &Network, probe: &Tensor, layers: &[usize]) -> Result<Vec<f64>> {
    let same: Vec<_> = model.layers().iter().map(|l| l.kind).collect();
    let other: Vec<_> = reference.layers().iter().map(|l| l.kind).collect();
    for &l in layers {
        if l >= same.len() || l >= other.len() || same[l] != other[l] {
            return Err(Error::Config(format!("layer {l} is not shared by the two models")));
        }
    }
    let a = model.forward(probe)?;
    let b = reference.forward(probe)?;
    layers.iter().map(|&l| cka_linear(&a[l], &b[l])).collect()
}

/// First round (1-based) from which every later value stays within `tol` of the final one.
pub fn stabilization_round(series: &[f64], tol: f64) -> Option<usize> {
    let last = *series.last()?;
    let mut round = series.len();
    for (i, v) in series.iter().enumerate().rev() {
        if (v - last).abs() > tol {
            break;
        }
        round = i + 1;
    }
    Some(round)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(n: usize, p: usize, f: impl Fn(usize, usize) -> f64) -> Tensor {
        Tensor::new(vec![n, p], (0..n * p).map(|k| f(k / p, k % p)).collect()).unwrap()
    }

    fn sample() -> Tensor {
        mat(6, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 + 0.1 * (i * j) as f64)
    }

    #[test]
    fn self_and_scale_invariance() {
        let x = sample();
        assert!((cka_linear(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = Tensor::new(vec![6, 3], x.data().iter().map(|v| 3.0 * v).collect()).unwrap();
        assert!((cka_linear(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn orthogonal_invariance() {
        let x = sample();
        let (c, s) = (0.6_f64, 0.8_f64);
        // Rotation in the first two coordinates.
        let y = mat(6, 3, |i, j| {
            let r = &x.data()[i * 3..i * 3 + 3];
            match j {
                0 => c * r[0] - s * r[1],
                1 => s * r[0] + c * r[1],
                _ => r[2],
            }
        });
        assert!((cka_linear(&x, &y).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn constant_input_is_undefined() {
        let x = mat(4, 2, |_, _| 1.0);
        assert!(matches!(cka_linear(&x, &sample().slice_rows(0, 4)), Err(Error::UndefinedCka(_))));
    }

    #[test]
    fn stabilization() {
        assert_eq!(stabilization_round(&[0.1, 0.5, 0.9, 0.91, 0.9], 0.02), Some(3));
        assert_eq!(stabilization_round(&[0.5], 0.01), Some(1));
        assert_eq!(stabilization_round(&[0.9, 0.1, 0.9], 0.01), Some(3));
        assert_eq!(stabilization_round(&[], 0.01), None);
    }
}
