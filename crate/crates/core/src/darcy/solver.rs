//! Five-point flux-form discretization of `−∇·(a∇u) = f` with zero
//! Dirichlet data, and a Jacobi-preconditioned conjugate-gradient solver.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::tensor::Field;

/// Iteration cap per unit of grid side.
pub const MAX_ITERS_PER_SIDE: usize = 50;

/// Face coefficients: the arithmetic mean of the two cells. Faces against
/// the boundary take the interior cell's value.
struct Faces {
    d_h: usize,
    d_w: usize,
    /// `east[y*w + x]` couples `(y,x)` and `(y,x+1)`; the last column is the boundary face.
    east: Vec<f64>,
    west_edge: Vec<f64>,
    /// `south[y*w + x]` couples `(y,x)` and `(y+1,x)`; the last row is the boundary face.
    south: Vec<f64>,
    north_edge: Vec<f64>,
    inv_h2: f64,
}

impl Faces {
    fn new(a: &Field, h: f64) -> Result<Self> {
        if a.channels() != 1 {
            return Err(shape(format!("coefficient must have 1 channel, got {}", a.channels())));
        }
        if !(h > 0.0 && h.is_finite()) {
            return Err(invalid(format!("mesh width must be positive, got {h}")));
        }
        if let Some(i) = a.data().iter().position(|v| !(*v > 0.0 && v.is_finite())) {
            let w = a.width();
            return Err(invalid(format!(
                "coefficient must be positive, got {} at ({}, {})",
                a.data()[i],
                i / w,
                i % w
            )));
        }
        let (d_h, d_w) = (a.height(), a.width());
        let v = a.data();
        let mut east = vec![0.0; d_h * d_w];
        let mut south = vec![0.0; d_h * d_w];
        for y in 0..d_h {
            for x in 0..d_w {
                let i = y * d_w + x;
                east[i] = if x + 1 < d_w { 0.5 * (v[i] + v[i + 1]) } else { v[i] };
                south[i] = if y + 1 < d_h { 0.5 * (v[i] + v[i + d_w]) } else { v[i] };
            }
        }
        let west_edge = (0..d_h).map(|y| v[y * d_w]).collect();
        let north_edge = v[..d_w].to_vec();
        Ok(Self { d_h, d_w, east, west_edge, south, north_edge, inv_h2: 1.0 / (h * h) })
    }

    fn diagonal(&self) -> Vec<f64> {
        let w = self.d_w;
        (0..self.d_h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let west = if x > 0 { self.east[i - 1] } else { self.west_edge[y] };
                let north = if y > 0 { self.south[i - w] } else { self.north_edge[x] };
                (self.east[i] + west + self.south[i] + north) * self.inv_h2
            })
            .collect()
    }

    fn apply(&self, u: &[f64], out: &mut [f64]) {
        let w = self.d_w;
        for y in 0..self.d_h {
            for x in 0..w {
                let i = y * w + x;
                let c = u[i];
                let mut s = self.east[i] * (c - if x + 1 < w { u[i + 1] } else { 0.0 });
                s += self.south[i] * (c - if y + 1 < self.d_h { u[i + w] } else { 0.0 });
                s += if x > 0 { self.east[i - 1] * (c - u[i - 1]) } else { self.west_edge[y] * c };
                s += if y > 0 { self.south[i - w] * (c - u[i - w]) } else { self.north_edge[x] * c };
                out[i] = s * self.inv_h2;
            }
        }
    }
}

/// `A(a) u` on a `d_h × d_w` interior grid of spacing `h`.
pub fn assemble_apply(a: &Field, u: &Field, h: f64) -> Result<Field> {
    if u.dims() != a.dims() {
        return Err(shape(format!("operand {:?} does not match coefficient {:?}", u.dims(), a.dims())));
    }
    let faces = Faces::new(a, h)?;
    let mut out = Field::zeros_like(u);
    faces.apply(u.data(), out.data_mut());
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveStats {
    pub iterations: usize,
    /// `‖f − A u‖ / ‖f‖`, recomputed from the returned solution.
    pub relative_residual: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Solves `A(a) u = f` to relative residual `tol` by preconditioned CG,
/// capped at `50·max(d_h, d_w)` iterations.
pub fn solve_reference(a: &Field, f: &Field, h: f64, tol: f64) -> Result<(Field, SolveStats)> {
    if f.dims() != a.dims() {
        return Err(shape(format!("right-hand side {:?} does not match coefficient {:?}", f.dims(), a.dims())));
    }
    if !(tol > 0.0) {
        return Err(invalid(format!("tolerance must be positive, got {tol}")));
    }
    let faces = Faces::new(a, h)?;
    let inv_diag: Vec<f64> = faces.diagonal().iter().map(|d| 1.0 / d).collect();
    let n = f.data().len();
    let b = f.data();
    let b_norm = dot(b, b).sqrt();
    let mut u = vec![0.0; n];
    if b_norm == 0.0 {
        return Ok((Field::zeros_like(f), SolveStats { iterations: 0, relative_residual: 0.0 }));
    }
    let cap = MAX_ITERS_PER_SIDE * a.height().max(a.width());
    let mut r = b.to_vec();
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
    let mut p = z.clone();
    let mut q = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut iterations = 0;
    loop {
        if dot(&r, &r).sqrt() <= tol * b_norm {
            // The recursive residual drifts; confirm with the true one and
            // restart from it if needed.
            faces.apply(&u, &mut q);
            for i in 0..n {
                r[i] = b[i] - q[i];
            }
            let true_res = dot(&r, &r).sqrt() / b_norm;
            if true_res <= tol {
                let stats = SolveStats { iterations, relative_residual: true_res };
                return Ok((Field::new(1, a.height(), a.width(), u)?, stats));
            }
            for i in 0..n {
                z[i] = r[i] * inv_diag[i];
            }
            p.copy_from_slice(&z);
            rz = dot(&r, &z);
        }
        if iterations >= cap || rz <= 0.0 || !rz.is_finite() {
            faces.apply(&u, &mut q);
            let res: f64 = b.iter().zip(&q).map(|(b, q)| (b - q) * (b - q)).sum::<f64>().sqrt() / b_norm;
            return Err(Error::NonConvergence { iterations, residual: res });
        }
        faces.apply(&p, &mut q);
        let alpha = rz / dot(&p, &q);
        for i in 0..n {
            u[i] += alpha * p[i];
            r[i] -= alpha * q[i];
            z[i] = r[i] * inv_diag[i];
        }
        let rz_new = dot(&r, &z);
        let beta = rz_new / rz;
        rz = rz_new;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
        iterations += 1;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::darcy::coefficient::{gen_multiscale_trig, gen_two_phase_approx};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_field(d: usize, seed: u64) -> Field {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Field::from_fn(1, d, d, |_, _, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn constant_one_is_poisson_stencil() {
        let d = 7;
        let h = 1.0 / (d + 1) as f64;
        let u = random_field(d, 1);
        let got = assemble_apply(&Field::filled(1, d, d, 1.0), &u, h).unwrap();
        for y in 0..d {
            for x in 0..d {
                let at = |yy: isize, xx: isize| {
                    if yy < 0 || xx < 0 || yy >= d as isize || xx >= d as isize {
                        0.0
                    } else {
                        u.get(0, yy as usize, xx as usize)
                    }
                };
                let (yi, xi) = (y as isize, x as isize);
                let want =
                    (4.0 * at(yi, xi) - at(yi - 1, xi) - at(yi + 1, xi) - at(yi, xi - 1) - at(yi, xi + 1)) / (h * h);
                assert!((got.get(0, y, x) - want).abs() < 1e-9 * want.abs().max(1.0));
            }
        }
    }

    #[test]
    fn operator_is_symmetric_positive() {
        let a = gen_multiscale_trig(12, 4).unwrap();
        let h = 1.0 / 13.0;
        let (u, v) = (random_field(12, 2), random_field(12, 3));
        let au = assemble_apply(&a, &u, h).unwrap();
        let av = assemble_apply(&a, &v, h).unwrap();
        assert!((au.dot(&v) - u.dot(&av)).abs() < 1e-10 * au.norm() * v.norm());
        assert!(u.dot(&au) > 0.0);
    }

    #[test]
    fn rejects_non_positive_coefficient() {
        let mut a = Field::filled(1, 4, 4, 1.0);
        a.set(0, 2, 1, 0.0);
        let err = assemble_apply(&a, &Field::zeros(1, 4, 4), 0.2).unwrap_err();
        assert!(err.to_string().contains("(2, 1)"));
        assert!(solve_reference(&a, &Field::filled(1, 4, 4, 1.0), 0.2, 1e-10).is_err());
    }

    #[test]
    fn manufactured_solution_recovered() {
        let d = 24;
        let h = 1.0 / (d + 1) as f64;
        let a = gen_two_phase_approx(d, 5, 1.0, 10.0, 2).unwrap();
        let truth = random_field(d, 6);
        let f = assemble_apply(&a, &truth, h).unwrap();
        let (u, stats) = solve_reference(&a, &f, h, 1e-12).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        assert!(u.sub(&truth).unwrap().max_abs() < 1e-8);
    }

    #[test]
    fn residual_is_reported_truthfully() {
        let d = 32;
        let h = 1.0 / 33.0;
        let a = gen_multiscale_trig(d, 11).unwrap();
        let f = Field::filled(1, d, d, 1.0);
        let (u, stats) = solve_reference(&a, &f, h, 1e-10).unwrap();
        let r = f.sub(&assemble_apply(&a, &u, h).unwrap()).unwrap();
        let res = r.norm() / f.norm();
        assert!(res <= 1e-10);
        assert!((res - stats.relative_residual).abs() <= 1e-14);
        assert!(stats.iterations <= MAX_ITERS_PER_SIDE * d);
    }

    #[test]
    fn sine_mode_recovered() {
        let d = 15;
        let h = 1.0 / 16.0;
        let pi = std::f64::consts::PI;
        let (p, q) = (2.0, 3.0);
        let mode = Field::from_fn(1, d, d, |_, y, x| {
            (p * pi * (x + 1) as f64 * h).sin() * (q * pi * (y + 1) as f64 * h).sin()
        });
        let lambda = 4.0 / (h * h) * ((p * pi * h / 2.0).sin().powi(2) + (q * pi * h / 2.0).sin().powi(2));
        let (u, stats) = solve_reference(&Field::filled(1, d, d, 1.0), &mode.scale(lambda), h, 1e-12).unwrap();
        assert!(stats.relative_residual <= 1e-12);
        assert!(u.sub(&mode).unwrap().max_abs() < 1e-10);
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let a = gen_multiscale_trig(8, 0).unwrap();
        let (u, stats) = solve_reference(&a, &Field::zeros(1, 8, 8), 0.1, 1e-10).unwrap();
        assert_eq!(u, Field::zeros(1, 8, 8));
        assert_eq!(stats.iterations, 0);
        assert_eq!(assemble_apply(&a, &Field::zeros(1, 8, 8), 0.1).unwrap(), Field::zeros(1, 8, 8));
    }

    #[test]
    fn smallest_eigenvalue_positive() {
        // Power iteration on σI − L gives σ − λ_min.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Field::from_fn(1, 8, 8, |_, _, _| rng.gen_range(0.1..10.0));
        let h = 1.0 / 9.0;
        let sigma = 8.0 * 10.0 / (h * h);
        let mut v = random_field(8, 13);
        let mut mu = 0.0;
        for _ in 0..5000 {
            let w = v.scale(sigma).sub(&assemble_apply(&a, &v, h).unwrap()).unwrap();
            mu = w.dot(&v) / v.norm_sq();
            v = w.scale(1.0 / w.norm());
        }
        let lambda_min = sigma - mu;
        assert!(lambda_min > 0.0, "{lambda_min}");
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let d = 4;
        let a = gen_two_phase_approx(d, 1, 1.0, 1e6, 1).unwrap();
        let err = solve_reference(&a, &Field::filled(1, d, d, 1.0), 0.2, 1e-300).unwrap_err();
        assert!(matches!(err, Error::NonConvergence { iterations, .. } if iterations <= 200));
    }
}
