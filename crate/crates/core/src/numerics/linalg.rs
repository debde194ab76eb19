//! Ridge least squares through the normal equations, solved in `f64`.

use super::tensor::{Real, Tensor};
use crate::error::{dim_mismatch, Error, Result};

/// Relative pivot size below which a system counts as singular.
const PIVOT_TOL: f64 = 1e-12;

/// Minimizes `‖A X − B‖² + ridge·‖X‖²` for `A: m×d`, `B: m×k`, returning `X: d×k`.
pub fn solve_least_squares<T: Real>(a: &Tensor<T>, b: &Tensor<T>, ridge: f64) -> Result<Tensor<T>> {
    let (m, d) = (a.rows(), a.row_len());
    let k = b.row_len();
    if m == 0 {
        return Err(Error::InvalidArgument(
            "least squares needs at least one row".into(),
        ));
    }
    if b.rows() != m {
        return Err(dim_mismatch("least squares row count", m, b.rows()));
    }
    if !(ridge >= 0.0) || !ridge.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "ridge must be finite and >= 0, got {ridge}"
        )));
    }

    let ad: Vec<f64> = a.data().iter().map(|x| x.to_f64()).collect();
    let bd: Vec<f64> = b.data().iter().map(|x| x.to_f64()).collect();

    // Gram matrix AᵀA + λI and right-hand side AᵀB.
    let mut gram = vec![0.0f64; d * d];
    let mut rhs = vec![0.0f64; d * k];
    for r in 0..m {
        let ar = &ad[r * d..(r + 1) * d];
        let br = &bd[r * k..(r + 1) * k];
        for i in 0..d {
            let ai = ar[i];
            if ai == 0.0 {
                continue;
            }
            for j in 0..=i {
                gram[i * d + j] += ai * ar[j];
            }
            for c in 0..k {
                rhs[i * k + c] += ai * br[c];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[j * d + i] = gram[i * d + j];
        }
        gram[i * d + i] += ridge;
    }

    let l = cholesky(&mut gram, d)?;
    let x = cholesky_solve(&l, d, &rhs, k);
    Tensor::new(vec![d, k], x.into_iter().map(T::from_f64).collect())
}

/// Relative residual `‖Y − Ŷ‖ / ‖Y − Ȳ‖` of the best affine fit of `y` from `x`.
/// Zero means `y` is an affine function of `x`.
pub fn affine_residual<T: Real>(x: &Tensor<T>, y: &Tensor<T>) -> Result<f64> {
    let (m, d, k) = (x.rows(), x.row_len(), y.row_len());
    if y.rows() != m {
        return Err(dim_mismatch("affine fit row count", m, y.rows()));
    }
    if m == 0 {
        return Err(Error::InvalidArgument(
            "affine fit needs at least one row".into(),
        ));
    }
    let xm = column_means(x);
    let ym = column_means(y);
    let xc = Tensor::<f64>::from_fn(&[m, d], |i| x.data()[i].to_f64() - xm[i % d]);
    let yc = Tensor::<f64>::from_fn(&[m, k], |i| y.data()[i].to_f64() - ym[i % k]);
    let w = solve_least_squares(&xc, &yc, 0.0)?;
    let fit = super::tensor::matmul_nn(&xc, &w)?;
    let res: f64 = yc
        .data()
        .iter()
        .zip(fit.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let tot: f64 = yc.data().iter().map(|a| a * a).sum();
    if tot == 0.0 {
        return Ok(0.0);
    }
    Ok((res / tot).sqrt())
}

fn column_means<T: Real>(t: &Tensor<T>) -> Vec<f64> {
    let (m, w) = (t.rows(), t.row_len());
    let mut out = vec![0.0; w];
    for i in 0..m {
        for (o, v) in out.iter_mut().zip(t.row(i)) {
            *o += v.to_f64();
        }
    }
    out.iter_mut().for_each(|o| *o /= m as f64);
    out
}

/// In-place lower Cholesky factor of a symmetric positive definite `n×n` matrix.
fn cholesky(g: &mut [f64], n: usize) -> Result<&[f64]> {
    let scale = (0..n)
        .map(|i| g[i * n + i].abs())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    for j in 0..n {
        let mut diag = g[j * n + j];
        for p in 0..j {
            diag -= g[j * n + p] * g[j * n + p];
        }
        if !(diag > PIVOT_TOL * scale) {
            return Err(Error::Singular {
                column: j,
                pivot: diag,
            });
        }
        let ljj = diag.sqrt();
        g[j * n + j] = ljj;
        for i in (j + 1)..n {
            let mut s = g[i * n + j];
            for p in 0..j {
                s -= g[i * n + p] * g[j * n + p];
            }
            g[i * n + j] = s / ljj;
        }
        for i in 0..j {
            g[i * n + j] = 0.0;
        }
    }
    Ok(g)
}

fn cholesky_solve(l: &[f64], n: usize, rhs: &[f64], k: usize) -> Vec<f64> {
    let mut x = rhs.to_vec();
    for c in 0..k {
        // L y = b
        for i in 0..n {
            let mut s = x[i * k + c];
            for p in 0..i {
                s -= l[i * n + p] * x[p * k + c];
            }
            x[i * k + c] = s / l[i * n + i];
        }
        // Lᵀ x = y
        for i in (0..n).rev() {
            let mut s = x[i * k + c];
            for p in (i + 1)..n {
                s -= l[p * n + i] * x[p * k + c];
            }
            x[i * k + c] = s / l[i * n + i];
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::{rng_normal, RngState};
    use crate::numerics::tensor::matmul_nn;

    #[test]
    fn square_full_rank_self_solve_is_identity() {
        let a: Tensor = rng_normal(&mut RngState::new(1), &[12, 12]);
        let x = solve_least_squares(&a, &a, 0.0).unwrap();
        let id = Tensor::<f32>::identity(12);
        for (u, v) in x.data().iter().zip(id.data()) {
            assert!((u - v).abs() < 1e-4);
        }
    }

    #[test]
    fn huge_ridge_shrinks_solution() {
        let mut rng = RngState::new(2);
        let a: Tensor = rng_normal(&mut rng, &[40, 6]);
        let b: Tensor = rng_normal(&mut rng, &[40, 3]);
        let x = solve_least_squares(&a, &b, 1e9).unwrap();
        assert!(x.frobenius_norm() < 1e-3);
    }

    #[test]
    fn planted_solution_recovered() {
        let mut rng = RngState::new(3);
        let a: Tensor<f64> = rng_normal(&mut rng, &[500, 16]);
        let x_star: Tensor<f64> = rng_normal(&mut rng, &[16, 5]);
        let noise: Tensor<f64> = rng_normal(&mut rng, &[500, 5]);
        let mut b = matmul_nn(&a, &x_star).unwrap();
        for (v, e) in b.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.01 * e;
        }
        let x = solve_least_squares(&a, &b, 1e-6).unwrap();
        let err: f64 = x
            .data()
            .iter()
            .zip(x_star.data())
            .map(|(u, v)| (u - v) * (u - v))
            .sum::<f64>()
            .sqrt();
        assert!(err / x_star.frobenius_norm() < 0.05);
    }

    #[test]
    fn rank_deficient_without_ridge_is_singular() {
        // Duplicate column.
        let a = Tensor::<f64>::from_fn(&[10, 2], |i| ((i / 2) as f64).sin());
        let b = Tensor::<f64>::from_fn(&[10, 1], |i| i as f64);
        assert!(matches!(
            solve_least_squares(&a, &b, 0.0),
            Err(Error::Singular { .. })
        ));
        assert!(solve_least_squares(&a, &b, 1e-3).is_ok());
    }

    #[test]
    fn rejects_bad_inputs() {
        let a = Tensor::<f64>::zeros(&[3, 2]);
        assert!(solve_least_squares(&a, &Tensor::zeros(&[4, 1]), 0.1).is_err());
        assert!(solve_least_squares(&a, &Tensor::zeros(&[3, 1]), -1.0).is_err());
        assert!(
            solve_least_squares(&Tensor::<f64>::zeros(&[0, 2]), &Tensor::zeros(&[0, 1]), 0.1)
                .is_err()
        );
    }
}
