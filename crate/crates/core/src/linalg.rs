//! Small dense helpers: nonnegative least squares, LP wrappers and null spaces.

use minilp::{ComparisonOp, OptimizationDirection, Problem};
use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn norm1(a: &[f64]) -> f64 {
    a.iter().map(|x| x.abs()).sum()
}

pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `out = A v` with `A` row-major `rows x cols`.
pub fn matvec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for i in 0..rows {
        out[i] = dot(&a[i * cols..(i + 1) * cols], v);
    }
}

/// `out = A^T v` with `A` row-major `rows x cols`.
pub fn matvec_t(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for j in 0..cols {
        out[j] = 0.0;
    }
    for i in 0..rows {
        for j in 0..cols {
            out[j] += a[i * cols + j] * v[i];
        }
    }
}

/// `<A v, w>` with `A` row-major `rows x cols`, `v` of length `cols`, `w` of length `rows`.
pub fn bilinear(a: &[f64], rows: usize, cols: usize, v: &[f64], w: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..rows {
        s += w[i] * dot(&a[i * cols..(i + 1) * cols], v);
    }
    s
}

/// Row-major product `A (r x k) * B (k x c)`.
pub fn matmul(a: &[f64], b: &[f64], r: usize, k: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for l in 0..k {
            let ail = a[i * k + l];
            if ail == 0.0 {
                continue;
            }
            for j in 0..c {
                out[i * c + j] += ail * b[l * c + j];
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

pub fn symmetrize(a: &mut [f64], n: usize) {
    for i in 0..n {
        for j in (i + 1)..n {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Ratio of extreme singular values; infinite for a singular matrix.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let sv = m.clone().singular_values();
    let max = sv.iter().cloned().fold(0.0, f64::max);
    let min = sv.iter().cloned().fold(f64::INFINITY, f64::min);
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Orthonormal basis (as columns) of the null space of `rows` (each a vector in R^dim).
pub fn null_space(rows: &[Vec<f64>], dim: usize, tol: f64) -> Vec<Vec<f64>> {
    if rows.is_empty() {
        return (0..dim)
            .map(|i| {
                let mut e = vec![0.0; dim];
                e[i] = 1.0;
                e
            })
            .collect();
    }
    // Pad to a square system so the SVD exposes a full right basis.
    let r = rows.len().max(dim);
    let mut a = DMatrix::<f64>::zeros(r, dim);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..dim {
            a[(i, j)] = row[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t.expect("requested V^T");
    let scale = svd.singular_values.iter().cloned().fold(1.0, f64::max);
    let mut basis = Vec::new();
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s <= tol * scale {
            basis.push((0..dim).map(|j| vt[(i, j)]).collect());
        }
    }
    basis
}

/// Numerical rank of a stack of row vectors.
pub fn rank(rows: &[Vec<f64>], dim: usize, tol: f64) -> usize {
    if rows.is_empty() {
        return 0;
    }
    let mut a = DMatrix::<f64>::zeros(rows.len(), dim);
    for (i, row) in rows.iter().enumerate() {
        for j in 0..dim {
            a[(i, j)] = row[j];
        }
    }
    a.rank(tol)
}

/// Lawson-Hanson nonnegative least squares: minimize |A x - b| subject to x >= 0.
pub fn nnls(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let (m, n) = a.shape();
    let mut x = DVector::<f64>::zeros(n);
    if n == 0 {
        return x;
    }
    let mut passive = vec![false; n];
    let tol = 1e-12 * (1.0 + a.abs().max()) * (m.max(n) as f64);
    let mut outer = 0;
    loop {
        outer += 1;
        let w = a.transpose() * (b - a * &x);
        let mut best = None;
        for j in 0..n {
            if !passive[j] && w[j] > tol && best.map_or(true, |(_, wb)| w[j] > wb) {
                best = Some((j, w[j]));
            }
        }
        let Some((j, _)) = best else { break };
        if outer > 3 * n + 10 {
            break;
        }
        passive[j] = true;
        loop {
            let idx: Vec<usize> = (0..n).filter(|&i| passive[i]).collect();
            let sub = a.select_columns(idx.iter());
            let z_sub = least_squares(&sub, b);
            let mut z = DVector::<f64>::zeros(n);
            for (k, &i) in idx.iter().enumerate() {
                z[i] = z_sub[k];
            }
            if idx.iter().all(|&i| z[i] > 0.0) {
                x = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &i in &idx {
                if z[i] <= 0.0 {
                    let denom = x[i] - z[i];
                    if denom > 0.0 {
                        alpha = alpha.min(x[i] / denom);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            x = &x + (z - &x) * alpha;
            for &i in &idx {
                if x[i] <= 1e-15 {
                    x[i] = 0.0;
                    passive[i] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    x
}

/// Minimum-norm least squares via SVD.
pub fn least_squares(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    svd.solve(b, 1e-13 * (1.0 + a.abs().max()))
        .unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Linear constraints `A_eq v = b_eq`, `A_in v <= b_in` with per-variable bounds.
#[derive(Clone, Debug, Default)]
pub struct LinearSystem {
    pub eq: Vec<(Vec<f64>, f64)>,
    pub ineq: Vec<(Vec<f64>, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Unbounded,
    Infeasible,
}

/// Maximize `<c, x>` subject to the system and `lo <= x <= hi`.
///
/// minilp can report a bounded problem as unbounded when a free variable has zero
/// cost, so idle variables are pinned and an unbounded answer is confirmed on
/// two nested boxes.
pub fn lp_maximize(
    c: &[f64],
    sys: &LinearSystem,
    lo: &[f64],
    hi: &[f64],
) -> Result<LpOutcome> {
    let n = c.len();
    let used = |i: usize| c[i] != 0.0 || sys.eq.iter().chain(&sys.ineq).any(|(row, _)| row[i] != 0.0);
    let (mut lo, mut hi) = (lo.to_vec(), hi.to_vec());
    for i in (0..n).filter(|&i| !used(i)) {
        let pin = 0.0f64.clamp(lo[i], hi[i]);
        (lo[i], hi[i]) = (pin, pin);
    }
    let first = lp_solve(c, sys, &lo, &hi)?;
    if first != LpOutcome::Unbounded {
        return Ok(first);
    }
    let boxed = |r: f64| {
        let l: Vec<f64> = lo.iter().map(|x| x.max(-r)).collect();
        let h: Vec<f64> = hi.iter().map(|x| x.min(r)).collect();
        lp_solve(c, sys, &l, &h)
    };
    match (boxed(1e6)?, boxed(1e9)?) {
        (LpOutcome::Optimal { x, value }, LpOutcome::Optimal { value: far, .. })
            if far <= value + 1e-9 * (1.0 + value.abs()) =>
        {
            Ok(LpOutcome::Optimal { x, value })
        }
        _ => Ok(LpOutcome::Unbounded),
    }
}

fn lp_solve(c: &[f64], sys: &LinearSystem, lo: &[f64], hi: &[f64]) -> Result<LpOutcome> {
    let n = c.len();
    let mut p = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..n).map(|i| p.add_var(c[i], (lo[i], hi[i]))).collect();
    let add = |p: &mut Problem, row: &[f64], op: ComparisonOp, rhs: f64| -> Result<()> {
        let terms: Vec<_> = row
            .iter()
            .enumerate()
            .filter(|(_, a)| **a != 0.0)
            .map(|(i, a)| (vars[i], *a))
            .collect();
        if terms.is_empty() {
            let ok = match op {
                ComparisonOp::Eq => rhs.abs() <= 1e-12,
                ComparisonOp::Le => rhs >= -1e-12,
                ComparisonOp::Ge => rhs <= 1e-12,
            };
            if !ok {
                return Err(Error::LpFailure("trivially infeasible row".into()));
            }
            return Ok(());
        }
        p.add_constraint(terms, op, rhs);
        Ok(())
    };
    for (row, rhs) in &sys.eq {
        if add(&mut p, row, ComparisonOp::Eq, *rhs).is_err() {
            return Ok(LpOutcome::Infeasible);
        }
    }
    for (row, rhs) in &sys.ineq {
        if add(&mut p, row, ComparisonOp::Le, *rhs).is_err() {
            return Ok(LpOutcome::Infeasible);
        }
    }
    match p.solve() {
        Ok(sol) => {
            let x: Vec<f64> = vars.iter().map(|v| sol[*v]).collect();
            Ok(LpOutcome::Optimal {
                value: sol.objective(),
                x,
            })
        }
        Err(minilp::Error::Unbounded) => Ok(LpOutcome::Unbounded),
        Err(minilp::Error::Infeasible) => Ok(LpOutcome::Infeasible),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idle_free_variable_is_not_unbounded() {
        let sys = LinearSystem {
            eq: vec![],
            ineq: vec![(vec![2.0, 0.0], -1.0)],
        };
        let inf = f64::INFINITY;
        let out = lp_maximize(&[1.0, 0.0], &sys, &[-inf, -inf], &[inf, inf]).unwrap();
        assert_eq!(out, LpOutcome::Optimal { x: vec![-0.5, 0.0], value: -0.5 });
        let out = lp_maximize(&[1.0, 1.0], &sys, &[-inf, -inf], &[inf, inf]).unwrap();
        assert_eq!(out, LpOutcome::Unbounded);
    }

    #[test]
    fn nnls_recovers_nonnegative_combination() {
        let a = DMatrix::from_row_slice(2, 3, &[1.0, 0.0, 1.0, 0.0, 1.0, 1.0]);
        let b = DVector::from_vec(vec![2.0, 3.0]);
        let x = nnls(&a, &b);
        let r = &a * &x - &b;
        assert!(r.norm() < 1e-10);
        assert!(x.iter().all(|v| *v >= 0.0));
    }

    #[test]
    fn nnls_clamps_negative_direction() {
        let a = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let b = DVector::from_vec(vec![-1.0, 0.0]);
        let x = nnls(&a, &b);
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn lp_box() {
        let sys = LinearSystem {
            eq: vec![],
            ineq: vec![(vec![1.0, 1.0], 1.0)],
        };
        let out = lp_maximize(&[1.0, 2.0], &sys, &[-1.0, -1.0], &[1.0, 1.0]).unwrap();
        match out {
            LpOutcome::Optimal { value, .. } => assert!((value - 2.0).abs() < 1e-9),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lp_unbounded_and_infeasible() {
        let sys = LinearSystem::default();
        let inf = f64::INFINITY;
        let out = lp_maximize(&[1.0], &sys, &[-inf], &[inf]).unwrap();
        assert_eq!(out, LpOutcome::Unbounded);
        let sys = LinearSystem {
            eq: vec![(vec![1.0], 2.0)],
            ineq: vec![],
        };
        let out = lp_maximize(&[1.0], &sys, &[-1.0], &[1.0]).unwrap();
        assert_eq!(out, LpOutcome::Infeasible);
    }

    #[test]
    fn null_space_of_line() {
        let ns = null_space(&[vec![1.0, 0.0]], 2, 1e-12);
        assert_eq!(ns.len(), 1);
        assert!(ns[0][0].abs() < 1e-12);
        assert!((ns[0][1].abs() - 1.0).abs() < 1e-12);
    }
}
