use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::Field;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "l2")]
    RelL2,
    /// Relative H¹; the mesh size comes from the data.
    #[default]
    #[serde(rename = "h1")]
    RelH1,
}

/// `‖e‖² + ‖D_x e‖² + ‖D_y e‖²` with forward differences over `h`; the last
/// column (row) has no forward neighbour and is dropped from `D_x` (`D_y`).
pub fn h1_norm_sq(e: &Field, h: f64) -> f64 {
    let (c, ny, nx) = e.dims();
    let inv = 1.0 / (h * h);
    let mut grad = 0.0;
    for ch in 0..c {
        let p = e.plane(ch);
        for y in 0..ny {
            for x in 0..nx {
                let v = p[y * nx + x];
                if x + 1 < nx {
                    let d = p[y * nx + x + 1] - v;
                    grad += d * d;
                }
                if y + 1 < ny {
                    let d = p[(y + 1) * nx + x] - v;
                    grad += d * d;
                }
            }
        }
    }
    e.norm_sq() + grad * inv
}

/// Gradient of [`h1_norm_sq`] with respect to `e`.
pub fn h1_norm_sq_grad(e: &Field, h: f64) -> Field {
    let (c, ny, nx) = e.dims();
    let s = 2.0 / (h * h);
    let mut g = e.scale(2.0);
    for ch in 0..c {
        let p = e.plane(ch).to_vec();
        let out = g.plane_mut(ch);
        for y in 0..ny {
            for x in 0..nx {
                let i = y * nx + x;
                if x + 1 < nx {
                    let d = s * (p[i + 1] - p[i]);
                    out[i + 1] += d;
                    out[i] -= d;
                }
                if y + 1 < ny {
                    let d = s * (p[i + nx] - p[i]);
                    out[i + nx] += d;
                    out[i] -= d;
                }
            }
        }
    }
    g
}

fn nonzero(denom_sq: f64) -> Result<f64> {
    if denom_sq > 0.0 {
        Ok(denom_sq)
    } else {
        Err(invalid("relative error undefined for a zero target"))
    }
}

/// `‖pred − target‖² / ‖target‖²`.
pub fn rel_l2_sq(pred: &Field, target: &Field) -> Result<f64> {
    let e = pred.sub(target)?;
    Ok(e.norm_sq() / nonzero(target.norm_sq())?)
}

pub fn rel_l2(pred: &Field, target: &Field) -> Result<f64> {
    rel_l2_sq(pred, target).map(f64::sqrt)
}

pub fn rel_h1_sq(pred: &Field, target: &Field, h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(invalid(format!("mesh size must be positive, got {h}")));
    }
    let e = pred.sub(target)?;
    Ok(h1_norm_sq(&e, h) / nonzero(h1_norm_sq(target, h))?)
}

pub fn rel_h1(pred: &Field, target: &Field, h: f64) -> Result<f64> {
    rel_h1_sq(pred, target, h).map(f64::sqrt)
}

impl LossKind {
    /// The squared relative error minimized during training.
    pub fn value_sq(self, pred: &Field, target: &Field, h: f64) -> Result<f64> {
        match self {
            LossKind::RelL2 => rel_l2_sq(pred, target),
            LossKind::RelH1 => rel_h1_sq(pred, target, h),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> Field {
        Field::from_fn(1, h, w, |_, y, x| 1.0 + (y * w + x) as f64 * 0.37 - (x as f64).sin())
    }

    #[test]
    fn rel_l2_reference_values() {
        let t = ramp(4, 4);
        assert_eq!(rel_l2(&t, &t).unwrap(), 0.0);
        assert!((rel_l2(&Field::zeros(1, 4, 4), &t).unwrap() - 1.0).abs() < 1e-15);
        assert!((rel_l2(&t.scale(1.1), &t).unwrap() - 0.1).abs() < 1e-14);
        assert!(rel_l2(&t, &Field::zeros(1, 4, 4)).is_err());
    }

    #[test]
    fn rel_h1_constant_error_has_no_gradient_term() {
        let e = Field::filled(1, 3, 3, 0.5);
        assert!((h1_norm_sq(&e, 0.25).sqrt() - (0.25f64 * 9.0).sqrt()).abs() < 1e-15);
        let t = ramp(3, 3);
        assert_eq!(rel_h1(&t, &t, 0.1).unwrap(), 0.0);
    }

    #[test]
    fn checkerboard_costs_more_than_constant() {
        let t = ramp(8, 8);
        let eps = 1e-2;
        let checker = Field::from_fn(1, 8, 8, |_, y, x| if (x + y) % 2 == 0 { eps } else { -eps });
        let flat = Field::filled(1, 8, 8, eps);
        let h = 1.0 / 9.0;
        let rough = rel_h1(&t.add(&checker).unwrap(), &t, h).unwrap();
        let smooth = rel_h1(&t.add(&flat).unwrap(), &t, h).unwrap();
        assert!(rough > smooth);
        assert!(
            (rel_l2(&t.add(&checker).unwrap(), &t).unwrap() - rel_l2(&t.add(&flat).unwrap(), &t).unwrap()).abs()
                < 1e-15
        );
    }

    #[test]
    fn homogeneity() {
        let t = ramp(5, 5);
        let p = Field::from_fn(1, 5, 5, |_, y, x| (y as f64 - x as f64).cos());
        for alpha in [2.0, -0.5, 8.0] {
            assert_eq!(rel_l2(&p.scale(alpha), &t.scale(alpha)).unwrap(), rel_l2(&p, &t).unwrap());
            assert_eq!(rel_h1(&p.scale(alpha), &t.scale(alpha), 0.2).unwrap(), rel_h1(&p, &t, 0.2).unwrap());
        }
    }

    #[test]
    fn h1_gradient_matches_differences() {
        let e = Field::from_fn(2, 4, 5, |c, y, x| ((c + 1) as f64 * 0.3 + y as f64 * 0.7 - x as f64 * 0.2).sin());
        let h = 0.3;
        let g = h1_norm_sq_grad(&e, h);
        for i in 0..e.data().len() {
            let mut p = e.clone();
            p.data_mut()[i] += 1e-6;
            let mut m = e.clone();
            m.data_mut()[i] -= 1e-6;
            let fd = (h1_norm_sq(&p, h) - h1_norm_sq(&m, h)) / 2e-6;
            assert!((fd - g.data()[i]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }
}
