//! Randomized SVD (Gaussian range finder + power iterations) and an exact
//! small-matrix SVD via one-sided Jacobi. The two share no algorithmic path:
//! the exact routine is the oracle the randomized one is tested against.

use crate::error::NumKitError;
use crate::mat::{dot, norm2, Mat};
use crate::rng::Rng;

const COMPLETION_TOL: f64 = 1e-12;

/// Orthonormalize the columns of `a` by modified Gram-Schmidt with
/// re-orthogonalization. Degenerate columns are replaced deterministically by
/// standard-basis completion, so the result always has full column rank.
pub fn orthonormal_columns(a: &Mat) -> Mat {
    let d = a.rows();
    let n = a.cols();
    assert!(n <= d, "cannot orthonormalize {n} columns in dimension {d}");
    let mut q: Vec<Vec<f64>> = Vec::with_capacity(n);
    for j in 0..n {
        let mut v = a.col_to_vec(j);
        let scale = norm2(&v);
        // Two MGS passes keep orthogonality near machine precision.
        for _ in 0..2 {
            for qi in &q {
                let c = dot(qi, &v);
                for (vk, qk) in v.iter_mut().zip(qi) {
                    *vk -= c * qk;
                }
            }
        }
        let n2 = norm2(&v);
        if n2 > COMPLETION_TOL * scale.max(1.0) && n2 > 0.0 {
            for vk in v.iter_mut() {
                *vk /= n2;
            }
            q.push(v);
        } else {
            q.push(complete_column(d, &q));
        }
    }
    Mat::from_columns(&q).expect("orthonormal columns")
}

/// Deterministic completion: pick the standard basis vector with the largest
/// residual after projecting out the accepted columns.
fn complete_column(d: usize, q: &[Vec<f64>]) -> Vec<f64> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for i in 0..d {
        let mut v = vec![0.0; d];
        v[i] = 1.0;
        for qi in q {
            let c = dot(qi, &v);
            for (vk, qk) in v.iter_mut().zip(qi) {
                *vk -= c * qk;
            }
        }
        let n2 = norm2(&v);
        if best.as_ref().map_or(true, |(bn, _)| n2 > *bn) {
            best = Some((n2, v));
        }
    }
    let (n2, mut v) = best.expect("dimension exhausted");
    assert!(n2 > 0.0, "no completion direction left");
    for vk in v.iter_mut() {
        *vk /= n2;
    }
    v
}

/// Make the first entry of each column with magnitude above tolerance
/// positive. Returns which columns were flipped so callers can keep paired
/// factors consistent.
fn sign_fix_columns(u: &mut Mat) -> Vec<bool> {
    let mut flipped = vec![false; u.cols()];
    for j in 0..u.cols() {
        let mut lead = 0.0;
        for i in 0..u.rows() {
            let x = u.get(i, j);
            if x.abs() > 1e-12 {
                lead = x;
                break;
            }
        }
        if lead < 0.0 {
            flipped[j] = true;
            for i in 0..u.rows() {
                let x = u.get(i, j);
                u.set(i, j, -x);
            }
        }
    }
    flipped
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
/// Returns eigenvalues in non-increasing order with matching eigenvector
/// columns.
pub fn sym_eigen(a: &Mat) -> (Vec<f64>, Mat) {
    let n = a.rows();
    assert_eq!(n, a.cols(), "sym_eigen: square matrix required");
    let mut m = a.clone();
    let mut v = Mat::identity(n);
    let scale = m.frob_norm().max(1.0);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in (p + 1)..n {
                off += m.get(p, q).powi(2);
            }
        }
        if off.sqrt() <= 1e-14 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                // Rotate rows/columns p and q of m.
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    let evals: Vec<f64> = (0..n).map(|i| m.get(i, i)).collect();
    order.sort_by(|&i, &j| evals[j].partial_cmp(&evals[i]).expect("finite eigenvalues"));
    let sorted_vals: Vec<f64> = order.iter().map(|&i| evals[i]).collect();
    let sorted_vecs = Mat::from_fn(n, n, |i, j| v.get(i, order[j]));
    (sorted_vals, sorted_vecs)
}

/// Truncated randomized SVD of `g` (d x k): returns the top-`rank` left
/// singular vectors and singular values via a Gaussian sketch, power
/// iterations, and a symmetric eigendecomposition of the projected Gram
/// matrix.
pub fn randomized_svd(
    g: &Mat,
    rank: usize,
    oversample: usize,
    power_iters: usize,
    rng: &mut Rng,
) -> Result<(Mat, Vec<f64>), NumKitError> {
    let d = g.rows();
    let k = g.cols();
    if rank == 0 || rank > d.min(k) {
        return Err(NumKitError::Dimension(format!(
            "rank {rank} exceeds matrix dimensions {d}x{k}"
        )));
    }
    if oversample < 2 {
        return Err(NumKitError::InvalidArg(format!(
            "oversample {oversample} < 2"
        )));
    }
    if !g.is_finite() {
        return Err(NumKitError::NonFinite("randomized_svd input".into()));
    }
    let l = (rank + oversample).min(d).min(k);
    let omega = Mat::from_fn(k, l, |_, _| rng.normal());
    let mut q = orthonormal_columns(&g.mul(&omega));
    for _ in 0..power_iters {
        let z = orthonormal_columns(&g.transpose().mul(&q));
        q = orthonormal_columns(&g.mul(&z));
    }
    let b = q.transpose().mul(g); // l x k
    let gram = b.mul(&b.transpose()); // l x l, symmetric PSD
    let (evals, evecs) = sym_eigen(&gram);
    let sigma: Vec<f64> = evals.iter().take(rank).map(|&e| e.max(0.0).sqrt()).collect();
    let mut u = q.mul(&evecs.truncate_cols(rank));
    sign_fix_columns(&mut u);
    Ok((u, sigma))
}

/// Exact thin SVD for small matrices (min dimension <= 64) by one-sided
/// Jacobi. Returns (U, sigma, V) with `g = U * diag(sigma) * V^T`, sigma
/// non-increasing, U and V orthonormal.
pub fn exact_svd_small(g: &Mat) -> Result<(Mat, Vec<f64>, Mat), NumKitError> {
    const LIMIT: usize = 64;
    let d = g.rows();
    let k = g.cols();
    if d.min(k) > LIMIT {
        return Err(NumKitError::TooLarge(d.min(k), LIMIT));
    }
    if !g.is_finite() {
        return Err(NumKitError::NonFinite("exact_svd_small input".into()));
    }
    // One-sided Jacobi wants cols <= rows; transpose and swap factors if not.
    let transposed = k > d;
    let mut a = if transposed { g.transpose() } else { g.clone() };
    let m = a.cols();
    let mut v = Mat::identity(m);
    let scale = a.frob_norm().max(1.0);
    for _sweep in 0..100 {
        let mut converged = true;
        for p in 0..m {
            for q in (p + 1)..m {
                let cp = a.col_to_vec(p);
                let cq = a.col_to_vec(q);
                let app = dot(&cp, &cp);
                let aqq = dot(&cq, &cq);
                let apq = dot(&cp, &cq);
                if apq.abs() <= 1e-15 * (app * aqq).sqrt().max(1e-300 * scale) {
                    continue;
                }
                converged = false;
                let tau = (aqq - app) / (2.0 * apq);
                let t = tau.signum() / (tau.abs() + (1.0 + tau * tau).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..a.rows() {
                    let aip = a.get(i, p);
                    let aiq = a.get(i, q);
                    a.set(i, p, c * aip - s * aiq);
                    a.set(i, q, s * aip + c * aiq);
                }
                for i in 0..m {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, c * vip - s * viq);
                    v.set(i, q, s * vip + c * viq);
                }
            }
        }
        if converged {
            break;
        }
    }
    // Singular values are column norms; sort non-increasing.
    let mut sigma: Vec<f64> = (0..m).map(|j| norm2(&a.col_to_vec(j))).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| sigma[j].partial_cmp(&sigma[i]).expect("finite sigma"));
    let a_sorted = Mat::from_fn(a.rows(), m, |i, j| a.get(i, order[j]));
    let v_sorted = Mat::from_fn(m, m, |i, j| v.get(i, order[j]));
    sigma = order.iter().map(|&j| sigma[j]).collect();

    let mut u_cols: Vec<Vec<f64>> = Vec::with_capacity(m);
    for j in 0..m {
        if sigma[j] > COMPLETION_TOL * scale {
            let col = a_sorted.col_to_vec(j);
            u_cols.push(col.iter().map(|x| x / sigma[j]).collect());
        } else {
            u_cols.push(complete_column(a_sorted.rows(), &u_cols));
        }
    }
    let mut u = Mat::from_columns(&u_cols).expect("u columns");
    let mut v = v_sorted;
    let flipped = sign_fix_columns(&mut u);
    for (j, f) in flipped.iter().enumerate() {
        if *f {
            for i in 0..v.rows() {
                let x = v.get(i, j);
                v.set(i, j, -x);
            }
        }
    }
    if transposed {
        Ok((v, sigma, u))
    } else {
        Ok((u, sigma, v))
    }
}

/// Fraction of the energy of `g` lying in the column span of `u`:
/// `||U^T g||^2 / ||g||^2`, clamped to [0, 1]. Returns `None` for a zero
/// gradient (the undefined flag; overlap trackers skip such samples).
pub fn subspace_energy(g: &[f64], u: &Mat) -> Option<f64> {
    assert_eq!(g.len(), u.rows(), "subspace_energy: dimension mismatch");
    let total = dot(g, g);
    if total == 0.0 {
        return None;
    }
    let proj = u.tr_mul_vec(g);
    let inside = dot(&proj, &proj);
    Some((inside / total).clamp(0.0, 1.0))
}
