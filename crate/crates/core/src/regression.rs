//! Least-squares regression on a total-degree polynomial basis, used for
//! conditional expectations in the backward sweeps.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Standardized polynomial basis over a subset of features. Features that are
/// constant, or linearly dependent on earlier ones, are dropped.
#[derive(Clone, Debug)]
pub struct Basis {
    mean: Vec<f64>,
    sd: Vec<f64>,
    kept: Vec<usize>,
    monomials: Vec<Vec<u32>>,
}

impl Basis {
    /// `features` is `[sample][feature]` with `nf` features per sample.
    pub fn fit(features: &[f64], nf: usize, degree: usize) -> Self {
        let m = features.len() / nf.max(1);
        let mut mean = vec![0.0; nf];
        let mut sd = vec![0.0; nf];
        if m > 0 {
            for j in 0..nf {
                mean[j] = (0..m).map(|i| features[i * nf + j]).sum::<f64>() / m as f64;
                let var = (0..m).map(|i| (features[i * nf + j] - mean[j]).powi(2)).sum::<f64>() / m as f64;
                sd[j] = var.sqrt();
            }
        }
        // Gram-Schmidt over standardized columns to drop collinear features.
        let mut ortho: Vec<Vec<f64>> = Vec::new();
        let mut kept = Vec::new();
        for j in 0..nf {
            if !(sd[j] > 1e-12 * (1.0 + mean[j].abs())) {
                continue;
            }
            let mut col: Vec<f64> = (0..m).map(|i| (features[i * nf + j] - mean[j]) / sd[j]).collect();
            for q in &ortho {
                let c = dot(&col, q);
                for (a, b) in col.iter_mut().zip(q) {
                    *a -= c * b;
                }
            }
            let nrm = dot(&col, &col).sqrt();
            if nrm * nrm > 1e-8 * m as f64 {
                for a in col.iter_mut() {
                    *a /= nrm;
                }
                ortho.push(col);
                kept.push(j);
            }
        }
        let monomials = exponents(kept.len(), degree);
        Basis {
            mean,
            sd,
            kept,
            monomials,
        }
    }

    pub fn size(&self) -> usize {
        self.monomials.len()
    }

    pub fn eval(&self, f: &[f64], out: &mut [f64]) {
        let z: Vec<f64> = self.kept.iter().map(|&j| (f[j] - self.mean[j]) / self.sd[j]).collect();
        for (o, e) in out.iter_mut().zip(&self.monomials) {
            let mut v = 1.0;
            for (zi, p) in z.iter().zip(e) {
                if *p > 0 {
                    v *= zi.powi(*p as i32);
                }
            }
            *o = v;
        }
    }

    pub fn design(&self, features: &[f64], nf: usize) -> DMatrix<f64> {
        let m = features.len() / nf.max(1);
        let nb = self.size();
        let mut phi = DMatrix::<f64>::zeros(m, nb);
        let mut row = vec![0.0; nb];
        for i in 0..m {
            self.eval(&features[i * nf..(i + 1) * nf], &mut row);
            for j in 0..nb {
                phi[(i, j)] = row[j];
            }
        }
        phi
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Exponent vectors of total degree `<= degree`, constant first.
fn exponents(vars: usize, degree: usize) -> Vec<Vec<u32>> {
    let mut out = vec![vec![0; vars]];
    for d in 1..=degree {
        let mut cur = vec![0u32; vars];
        gen(vars, d as u32, 0, &mut cur, &mut out);
    }
    out
}

fn gen(vars: usize, left: u32, start: usize, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if left == 0 {
        out.push(cur.clone());
        return;
    }
    for i in start..vars {
        cur[i] += 1;
        gen(vars, left - 1, i, cur, out);
        cur[i] -= 1;
    }
}

/// Ridge least squares of `y` (`[sample][d]`) on the design matrix.
#[derive(Clone, Debug)]
pub struct Fit {
    /// `[basis][d]`.
    pub coef: Vec<f64>,
    /// `[sample][d]`.
    pub fitted: Vec<f64>,
    /// Pooled standard error of a fitted value, `sqrt(resid_var * nb / M)`.
    pub sigma: f64,
    pub condition: f64,
}

pub fn fit(phi: &DMatrix<f64>, y: &[f64], d: usize, ridge: f64, max_condition: f64, step: usize) -> Result<Fit> {
    let (m, nb) = phi.shape();
    let mf = m as f64;
    let mut gram = phi.tr_mul(phi) / mf;
    for i in 0..nb {
        gram[(i, i)] += ridge;
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let lo = eig.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = eig.iter().cloned().fold(0.0, f64::max);
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition <= max_condition) {
        return Err(Error::RegressionIllConditioned { step, condition });
    }
    let ym = DMatrix::from_row_slice(m, d, y);
    let rhs = phi.tr_mul(&ym) / mf;
    let chol = gram
        .cholesky()
        .ok_or(Error::RegressionIllConditioned { step, condition })?;
    let coef = chol.solve(&rhs);
    let fitted = phi * &coef;
    let mut resid = 0.0;
    let mut out_fit = vec![0.0; m * d];
    for i in 0..m {
        for j in 0..d {
            out_fit[i * d + j] = fitted[(i, j)];
            resid += (y[i * d + j] - fitted[(i, j)]).powi(2);
        }
    }
    let var = resid / (mf * d as f64).max(1.0);
    let mut c = vec![0.0; nb * d];
    for b in 0..nb {
        for j in 0..d {
            c[b * d + j] = coef[(b, j)];
        }
    }
    Ok(Fit {
        coef: c,
        fitted: out_fit,
        sigma: (var * nb as f64 / mf).sqrt(),
        condition,
    })
}

/// Evaluates fitted coefficients at one basis row.
pub fn predict(coef: &[f64], row: &[f64], d: usize, out: &mut [f64]) {
    for j in 0..d {
        out[j] = 0.0;
    }
    for (b, r) in row.iter().enumerate() {
        for j in 0..d {
            out[j] += coef[b * d + j] * r;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_sizes() {
        assert_eq!(exponents(2, 2).len(), 6);
        assert_eq!(exponents(3, 2).len(), 10);
        assert_eq!(exponents(0, 2).len(), 1);
    }

    #[test]
    fn collinear_features_dropped() {
        let f: Vec<f64> = (0..50).flat_map(|i| [i as f64, 2.0 * i as f64 + 1.0, 3.0]).collect();
        let b = Basis::fit(&f, 3, 2);
        assert_eq!(b.kept, vec![0]);
        assert_eq!(b.size(), 3);
    }

    #[test]
    fn quadratic_is_recovered() {
        let f: Vec<f64> = (0..200).map(|i| i as f64 / 50.0 - 2.0).collect();
        let y: Vec<f64> = f.iter().map(|x| 1.0 + x - 0.5 * x * x).collect();
        let b = Basis::fit(&f, 1, 2);
        let phi = b.design(&f, 1);
        let fit = fit(&phi, &y, 1, 1e-12, 1e10, 0).unwrap();
        for (a, c) in fit.fitted.iter().zip(&y) {
            assert!((a - c).abs() < 1e-8);
        }
    }
}
