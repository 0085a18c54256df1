use super::{BoundaryMode, Field};
use crate::error::{invalid, Result};

/// Source index of padded position `p` (which is `p - 1` in field
/// coordinates) along an axis of length `n`, or `None` for a zero cell.
#[inline]
fn source(mode: BoundaryMode, p: usize, n: usize) -> Option<usize> {
    if p >= 1 && p <= n {
        return Some(p - 1);
    }
    match mode {
        BoundaryMode::DirichletZero | BoundaryMode::NoPad => None,
        BoundaryMode::NeumannReflect => Some(if p == 0 { 1 } else { n - 2 }),
        BoundaryMode::PeriodicCircular => Some(if p == 0 { n - 1 } else { 0 }),
    }
}

fn check(dims: (usize, usize), mode: BoundaryMode) -> Result<()> {
    match mode {
        BoundaryMode::NoPad => Err(invalid("pad called with NoPad")),
        BoundaryMode::NeumannReflect if dims.0 < 2 || dims.1 < 2 => {
            Err(invalid("reflect padding needs at least 2 samples per axis"))
        }
        _ => Ok(()),
    }
}

/// Adds a ring of width 1 around every channel, filled per `mode`.
pub fn pad(f: &Field, mode: BoundaryMode) -> Result<Field> {
    let (c, h, w) = f.dims();
    check((h, w), mode)?;
    let (ph, pw) = (h + 2, w + 2);
    let mut out = Field::zeros(c, ph, pw);
    let rows: Vec<Option<usize>> = (0..ph).map(|p| source(mode, p, h)).collect();
    let cols: Vec<Option<usize>> = (0..pw).map(|p| source(mode, p, w)).collect();
    for ch in 0..c {
        let src = f.plane(ch);
        let dst = out.plane_mut(ch);
        for (py, sy) in rows.iter().enumerate() {
            let Some(sy) = *sy else { continue };
            let srow = &src[sy * w..(sy + 1) * w];
            let drow = &mut dst[py * pw..(py + 1) * pw];
            drow[1..=w].copy_from_slice(srow);
            if let Some(sx) = cols[0] {
                drow[0] = srow[sx];
            }
            if let Some(sx) = cols[pw - 1] {
                drow[pw - 1] = srow[sx];
            }
        }
    }
    Ok(out)
}

/// Transpose of [`pad`]: folds a padded field back onto the interior by
/// scatter-adding every ring cell into the sample it was copied from.
pub fn pad_adjoint(g: &Field, mode: BoundaryMode) -> Result<Field> {
    let (c, ph, pw) = g.dims();
    if ph < 3 || pw < 3 {
        return Err(invalid("padded field too small"));
    }
    let (h, w) = (ph - 2, pw - 2);
    check((h, w), mode)?;
    let mut out = Field::zeros(c, h, w);
    let rows: Vec<Option<usize>> = (0..ph).map(|p| source(mode, p, h)).collect();
    let cols: Vec<Option<usize>> = (0..pw).map(|p| source(mode, p, w)).collect();
    for ch in 0..c {
        let src = g.plane(ch);
        let dst = out.plane_mut(ch);
        for (py, sy) in rows.iter().enumerate() {
            let Some(sy) = *sy else { continue };
            let grow = &src[py * pw..(py + 1) * pw];
            let drow = &mut dst[sy * w..(sy + 1) * w];
            for (d, s) in drow.iter_mut().zip(&grow[1..=w]) {
                *d += s;
            }
            if let Some(sx) = cols[0] {
                drow[sx] += grow[0];
            }
            if let Some(sx) = cols[pw - 1] {
                drow[sx] += grow[pw - 1];
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(f: &Field, y: usize) -> Vec<f64> {
        (0..f.width()).map(|x| f.get(0, y, x)).collect()
    }

    #[test]
    fn dirichlet_single_sample() {
        let f = Field::new(1, 1, 1, vec![5.0]).unwrap();
        let p = pad(&f, BoundaryMode::DirichletZero).unwrap();
        assert_eq!(p.dims(), (1, 3, 3));
        assert_eq!(p.data(), &[0.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn periodic_row() {
        let f = Field::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let p = pad(&f, BoundaryMode::PeriodicCircular).unwrap();
        // a single row wraps onto itself vertically as well
        for y in 0..3 {
            assert_eq!(row(&p, y), vec![3.0, 1.0, 2.0, 3.0, 1.0]);
        }
    }

    #[test]
    fn reflect_row() {
        let f = Field::new(1, 2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let p = pad(&f, BoundaryMode::NeumannReflect).unwrap();
        assert_eq!(row(&p, 1), vec![2.0, 1.0, 2.0, 3.0, 2.0]);
        // top ring mirrors row 1, bottom ring mirrors row 0
        assert_eq!(row(&p, 0), vec![5.0, 4.0, 5.0, 6.0, 5.0]);
        assert_eq!(row(&p, 3), vec![2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn reflect_needs_two_samples() {
        let f = Field::new(1, 1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        assert!(pad(&f, BoundaryMode::NeumannReflect).is_err());
    }

    #[test]
    fn nopad_is_rejected() {
        let f = Field::zeros(1, 2, 2);
        assert!(matches!(pad(&f, BoundaryMode::NoPad), Err(crate::Error::InvalidArgument(_))));
    }

    #[test]
    fn pad_then_crop_is_identity() {
        let f = Field::from_fn(2, 4, 5, |c, y, x| (c * 100 + y * 10 + x) as f64);
        for mode in BoundaryMode::PADDED {
            assert_eq!(pad(&f, mode).unwrap().crop_interior().unwrap(), f);
        }
    }

    #[test]
    fn adjoint_identity() {
        let f = Field::from_fn(2, 4, 3, |c, y, x| ((c + 1) * (y + 2) * (x + 3)) as f64 * 0.1 - 1.0);
        let g = Field::from_fn(2, 6, 5, |c, y, x| ((c + y * x) % 7) as f64 - 3.0);
        for mode in BoundaryMode::PADDED {
            let lhs = pad(&f, mode).unwrap().dot(&g);
            let rhs = f.dot(&pad_adjoint(&g, mode).unwrap());
            assert!((lhs - rhs).abs() < 1e-12, "{mode:?}");
        }
    }
}
