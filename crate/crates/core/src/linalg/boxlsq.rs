use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};

/// `argmin ‖U x − v‖₂` subject to `lo ≤ x ≤ hi` elementwise.
///
/// Accelerated projected gradient on the normal equations identifies the
/// active set; the free coordinates are then solved exactly and the result is
/// kept only if it is feasible and no worse.
pub fn bounded_least_squares(
    u: &DMatrix<f64>,
    v: &DVector<f64>,
    lo: f64,
    hi: f64,
) -> Result<DVector<f64>> {
    if u.nrows() != v.len() {
        return Err(Error::DimensionMismatch(format!(
            "{}x{} system with a right-hand side of length {}",
            u.nrows(),
            u.ncols(),
            v.len()
        )));
    }
    if !(lo <= hi) {
        return Err(Error::InvalidArgument(format!("empty box [{lo}, {hi}]")));
    }
    let m = u.ncols();
    let g = u.tr_mul(u);
    let b = u.tr_mul(v);
    let q = |x: &DVector<f64>| 0.5 * x.dot(&(&g * x)) - b.dot(x);
    let project = |x: &mut DVector<f64>| x.apply(|t| *t = t.clamp(lo, hi));

    // Gershgorin bound on the largest eigenvalue of G
    let lip = (0..m)
        .map(|r| g.row(r).iter().map(|x| x.abs()).sum::<f64>())
        .fold(0.0, f64::max);
    let mut x = DVector::zeros(m);
    project(&mut x);
    if lip == 0.0 {
        return Ok(x);
    }

    let step = 1.0 / lip;
    let scale = b.amax().max(lip) * (1.0 + hi.abs().max(lo.abs()));
    let mut y = x.clone();
    let mut t = 1.0f64;
    let mut prev_q = q(&x);
    for _ in 0..50_000 {
        let grad = &g * &y - &b;
        let mut next = &y - grad * step;
        project(&mut next);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        let next_q = q(&next);
        if next_q > prev_q {
            // restart momentum
            y = x.clone();
            t = 1.0;
            continue;
        }
        y = &next + (&next - &x) * ((t - 1.0) / t_next);
        let moved = (&next - &x).amax();
        x = next;
        prev_q = next_q;
        t = t_next;
        if moved <= 1e-15 * (1.0 + x.amax()) {
            break;
        }
    }

    if let Some(polished) = polish(&g, &b, &x, lo, hi, scale) {
        // KKT-certified, so only reject it if it is clearly worse
        if q(&polished) <= q(&x) + 1e-12 * (1.0 + q(&x).abs()) {
            x = polished;
        }
    }
    Ok(x)
}

fn polish(
    g: &DMatrix<f64>,
    b: &DVector<f64>,
    x: &DVector<f64>,
    lo: f64,
    hi: f64,
    scale: f64,
) -> Option<DVector<f64>> {
    let m = x.len();
    let width = hi - lo;
    let tol = 1e-9 * width.max(f64::MIN_POSITIVE);
    let mut fixed = x.clone();
    let free: Vec<usize> = (0..m)
        .filter(|&k| {
            if x[k] - lo <= tol {
                fixed[k] = lo;
                false
            } else if hi - x[k] <= tol {
                fixed[k] = hi;
                false
            } else {
                true
            }
        })
        .collect();
    if !free.is_empty() {
        let nf = free.len();
        let mut gff = DMatrix::zeros(nf, nf);
        let mut rhs = DVector::zeros(nf);
        for (a, &ka) in free.iter().enumerate() {
            rhs[a] = b[ka];
            for k in 0..m {
                if !free.contains(&k) {
                    rhs[a] -= g[(ka, k)] * fixed[k];
                }
            }
            for (c, &kc) in free.iter().enumerate() {
                gff[(a, c)] = g[(ka, kc)];
            }
        }
        let sol = Cholesky::new(gff)?.solve(&rhs);
        for (a, &k) in free.iter().enumerate() {
            if !(lo..=hi).contains(&sol[a]) {
                return None;
            }
            fixed[k] = sol[a];
        }
    }
    // KKT signs on the bound coordinates
    let grad = g * &fixed - b;
    let kkt_tol = 1e-10 * scale;
    let ok = (0..m).all(|k| {
        if free.contains(&k) {
            true
        } else if fixed[k] == lo && lo < hi {
            grad[k] >= -kkt_tol
        } else if fixed[k] == hi && lo < hi {
            grad[k] <= kkt_tol
        } else {
            true
        }
    });
    ok.then_some(fixed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn interior_solution_is_plain_least_squares() {
        let u = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let v = DVector::from_vec(vec![0.3, 0.4, 0.7]);
        let x = bounded_least_squares(&u, &v, 0.0, 1.0).unwrap();
        assert!((x - DVector::from_vec(vec![0.3, 0.4])).amax() < 1e-12);
    }

    #[test]
    fn one_dimensional_clamps() {
        let u = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let x = bounded_least_squares(&u, &DVector::from_vec(vec![3.0, 5.0]), 0.0, 1.0).unwrap();
        assert_eq!(x[0], 1.0);
        let x = bounded_least_squares(&u, &DVector::from_vec(vec![-3.0, -5.0]), 0.0, 1.0).unwrap();
        assert_eq!(x[0], 0.0);
    }

    #[test]
    fn correlated_columns_beat_naive_clamp() {
        // unconstrained optimum (2, -1) clamps to (1, 0); the true box optimum differs
        let u = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 0.9]);
        let target = &u * DVector::from_vec(vec![2.0, -1.0]);
        let x = bounded_least_squares(&u, &target, 0.0, 1.0).unwrap();
        let clamp = DVector::from_vec(vec![1.0, 0.0]);
        assert!((&u * &x - &target).norm() <= (&u * clamp - &target).norm() + 1e-12);
    }
}
