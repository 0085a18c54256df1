use super::{Field, Matrix};
use crate::error::{shape, Result};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU, `0.5 x (1 + tanh(√(2/π)(x + 0.044715 x³)))`.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

/// Exact derivative of [`gelu_scalar`].
#[inline]
pub fn gelu_derivative(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

pub fn gelu(f: &Field) -> Field {
    let mut out = f.clone();
    out.data_mut().iter_mut().for_each(|v| *v = gelu_scalar(*v));
    out
}

/// Per-pixel affine map across channels: `out_i = Σ_j m_ij f_j + b_i`.
pub fn channel_mix(f: &Field, m: &Matrix, b: &[f64]) -> Result<Field> {
    let (c, h, w) = f.dims();
    if m.cols() != c || m.rows() != b.len() {
        return Err(shape(format!(
            "channel mix {}x{} with bias {} applied to {c} channels",
            m.rows(),
            m.cols(),
            b.len()
        )));
    }
    let mut out = Field::zeros(m.rows(), h, w);
    for i in 0..m.rows() {
        let dst = out.plane_mut(i);
        dst.fill(b[i]);
        for j in 0..c {
            let coef = m.get(i, j);
            if coef == 0.0 {
                continue;
            }
            for (d, s) in dst.iter_mut().zip(f.plane(j)) {
                *d += coef * s;
            }
        }
    }
    Ok(out)
}

/// Gradients of [`channel_mix`] given the output gradient `g`:
/// `(d input, d matrix, d bias)`.
pub fn channel_mix_grads(f: &Field, m: &Matrix, g: &Field) -> (Field, Matrix, Vec<f64>) {
    let (c, h, w) = f.dims();
    let mut df = Field::zeros(c, h, w);
    let mut dm = Matrix::zeros(m.rows(), m.cols());
    let mut db = vec![0.0; m.rows()];
    for i in 0..m.rows() {
        let gi = g.plane(i);
        db[i] = gi.iter().sum();
        for j in 0..c {
            dm.set(i, j, gi.iter().zip(f.plane(j)).map(|(a, b)| a * b).sum());
            let coef = m.get(i, j);
            for (d, s) in df.plane_mut(j).iter_mut().zip(gi) {
                *d += coef * s;
            }
        }
    }
    (df, dm, db)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-6);
        assert!(gelu_scalar(-10.0).abs() < 1e-6);
        assert!((gelu_derivative(0.0) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn gelu_monotone_on_positive_range() {
        let xs: Vec<f64> = (0..400).map(|i| -0.7 + i as f64 * 0.025).collect();
        for pair in xs.windows(2) {
            assert!(gelu_scalar(pair[1]) > gelu_scalar(pair[0]));
        }
    }

    #[test]
    fn gelu_derivative_matches_differences() {
        for &x in &[-3.0, -1.2, -0.3, 0.0, 0.4, 1.7, 4.0] {
            let step = 1e-5;
            let fd = (gelu_scalar(x + step) - gelu_scalar(x - step)) / (2.0 * step);
            assert!((fd - gelu_derivative(x)).abs() < 1e-9, "x={x}");
        }
    }

    #[test]
    fn mix_identity_and_bias() {
        let f = Field::from_fn(2, 3, 3, |c, y, x| (c * 9 + y * 3 + x) as f64);
        assert_eq!(channel_mix(&f, &Matrix::identity(2), &[0.0, 0.0]).unwrap(), f);
        let one = Field::from_fn(1, 2, 2, |_, y, x| (y + x) as f64);
        let out = channel_mix(&one, &Matrix::zeros(1, 1), &[3.0]).unwrap();
        assert_eq!(out, Field::filled(1, 2, 2, 3.0));
    }

    #[test]
    fn mix_swaps_channels() {
        let f = Field::new(2, 2, 2, vec![0.3, -1.2, 2.5, 0.7, 9.0, -4.0, 0.1, 5.5]).unwrap();
        let swap = Matrix::new(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let out = channel_mix(&f, &swap, &[0.0, 0.0]).unwrap();
        assert_eq!(out.plane(0), f.plane(1));
        assert_eq!(out.plane(1), f.plane(0));
    }

    #[test]
    fn mix_dimension_mismatch() {
        let f = Field::zeros(3, 2, 2);
        assert!(channel_mix(&f, &Matrix::identity(2), &[0.0, 0.0]).is_err());
        assert!(channel_mix(&f, &Matrix::identity(3), &[0.0]).is_err());
    }
}
