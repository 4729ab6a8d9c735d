//! Matrix functions on small dense square matrices.
//!
//! * [`expm`] — matrix exponential by scaling-and-squaring with a degree-13
//!   Padé approximant; the input is pre-scaled so its induced 1-norm is at
//!   most 0.5 before the approximant is applied.
//! * [`expm_frechet`] — the Fréchet (directional) derivative of `expm`,
//!   computed through the block identity
//!   `exp([[A, E], [0, A]]) = [[exp(A), L(A, E)], [0, exp(A)]]`.
//! * [`solve_lu`] — LU factorization with partial pivoting, used for the
//!   Padé denominator solve.
//! * [`sym_eig`] — cyclic Jacobi eigendecomposition of a symmetric matrix,
//!   used by the 2-D PCA projection in the chart metrics.
//!
//! Matrices here are tiny (latent dimension squared, typically 16x16), so
//! plain O(n^3) kernels with good memory order are the right tool.

use crate::error::NumericsError;
use crate::tensor::Tensor;

/// Degree-13 Padé coefficients for the matrix exponential, `b[0]..b[13]`.
/// Integers up to ~6.5e16 are stored exactly enough in f64 (relative error
/// below 1e-16), matching standard practice.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn check_square(a: &Tensor, context: &str) -> Result<usize, NumericsError> {
    let (r, c) = a.dims2();
    if r != c {
        return Err(NumericsError::NotSquare { rows: r, cols: c });
    }
    if !a.all_finite() {
        return Err(NumericsError::NonFinite { context: context.to_string() });
    }
    Ok(r)
}

/// Matrix exponential `exp(A)` of a square matrix.
///
/// Scaling-and-squaring: pick the smallest `s >= 0` with `||A / 2^s||_1 <= 0.5`,
/// apply the degree-13 Padé approximant at the scaled matrix, then square the
/// result `s` times. For the norms produced by the latent-dynamics generator
/// (zero-initialized, softly regularized) `s` is almost always 0 or 1.
pub fn expm(a: &Tensor) -> Result<Tensor, NumericsError> {
    let n = check_square(a, "expm input")?;
    if n == 0 {
        return Ok(Tensor::zeros(&[0, 0]));
    }
    let norm = a.one_norm();
    let s = if norm <= 0.5 { 0 } else { (norm / 0.5).log2().ceil() as u32 };
    let scaled = a.scale(0.5_f64.powi(s as i32));

    let mut r = pade13(&scaled)?;
    for _ in 0..s {
        r = r.matmul(&r);
    }
    if !r.all_finite() {
        return Err(NumericsError::NonFinite { context: "expm result".to_string() });
    }
    Ok(r)
}

/// Degree-13 Padé approximant of `exp` at a matrix with 1-norm <= 0.5.
fn pade13(a: &Tensor) -> Result<Tensor, NumericsError> {
    let n = a.dims2().0;
    let b = &PADE13;
    let id = Tensor::eye(n);
    let a2 = a.matmul(a);
    let a4 = a2.matmul(&a2);
    let a6 = a2.matmul(&a4);

    // U = A (A6 (b13 A6 + b11 A4 + b9 A2) + b7 A6 + b5 A4 + b3 A2 + b1 I)
    let mut inner = a6.scale(b[13]);
    inner.axpy(b[11], &a4);
    inner.axpy(b[9], &a2);
    let mut u = a6.matmul(&inner);
    u.axpy(b[7], &a6);
    u.axpy(b[5], &a4);
    u.axpy(b[3], &a2);
    u.axpy(b[1], &id);
    let u = a.matmul(&u);

    // V = A6 (b12 A6 + b10 A4 + b8 A2) + b6 A6 + b4 A4 + b2 A2 + b0 I
    let mut inner = a6.scale(b[12]);
    inner.axpy(b[10], &a4);
    inner.axpy(b[8], &a2);
    let mut v = a6.matmul(&inner);
    v.axpy(b[6], &a6);
    v.axpy(b[4], &a4);
    v.axpy(b[2], &a2);
    v.axpy(b[0], &id);

    // exp(A) ~= (V - U)^{-1} (V + U)
    let denom = v.sub(&u);
    let numer = v.add(&u);
    solve_lu(&denom, &numer)
}

/// Fréchet derivative `L(A, E)` of the matrix exponential at `A` in
/// direction `E`: the derivative of `t -> exp(A + t E)` at `t = 0`.
///
/// Computed via `expm` of the block matrix `[[A, E], [0, A]]`, whose
/// exponential carries `L(A, E)` in its top-right block. The direction is
/// normalized first (L is linear in E) so the block's norm — and therefore
/// the scaling parameter — is governed by `A` alone even for large-magnitude
/// directions such as loss gradients.
pub fn expm_frechet(a: &Tensor, e: &Tensor) -> Result<Tensor, NumericsError> {
    let n = check_square(a, "expm_frechet A")?;
    let (er, ec) = e.dims2();
    if er != n || ec != n {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("{n}x{n}"),
            got: format!("{er}x{ec}"),
        });
    }
    if !e.all_finite() {
        return Err(NumericsError::NonFinite { context: "expm_frechet direction".to_string() });
    }
    let e_norm = e.one_norm();
    if e_norm == 0.0 {
        return Ok(Tensor::zeros(&[n, n]));
    }
    let e_unit = e.scale(1.0 / e_norm);

    let mut block = Tensor::zeros(&[2 * n, 2 * n]);
    for i in 0..n {
        for j in 0..n {
            let aij = a.at2(i, j);
            block.set2(i, j, aij);
            block.set2(n + i, n + j, aij);
            block.set2(i, n + j, e_unit.at2(i, j));
        }
    }
    let big = expm(&block)?;
    let mut l = Tensor::zeros(&[n, n]);
    for i in 0..n {
        for j in 0..n {
            l.set2(i, j, big.at2(i, n + j) * e_norm);
        }
    }
    Ok(l)
}

/// Solve `A X = B` by LU factorization with partial pivoting.
///
/// `B` may have any number of columns. Fails if a pivot collapses to zero
/// (singular to working precision).
pub fn solve_lu(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let n = check_square(a, "solve_lu A")?;
    let (br, bc) = b.dims2();
    if br != n {
        return Err(NumericsError::ShapeMismatch {
            expected: format!("{n} rows"),
            got: format!("{br} rows"),
        });
    }

    let mut lu = a.data().to_vec();
    let mut x = b.data().to_vec();
    for col in 0..n {
        // Pivot: largest |entry| on or below the diagonal.
        let mut p = col;
        let mut best = lu[col * n + col].abs();
        for row in col + 1..n {
            let v = lu[row * n + col].abs();
            if v > best {
                best = v;
                p = row;
            }
        }
        if best < 1e-300 {
            return Err(NumericsError::Singular { pivot: best });
        }
        if p != col {
            for j in 0..n {
                lu.swap(col * n + j, p * n + j);
            }
            for j in 0..bc {
                x.swap(col * bc + j, p * bc + j);
            }
        }
        let pivot = lu[col * n + col];
        for row in col + 1..n {
            let factor = lu[row * n + col] / pivot;
            lu[row * n + col] = factor;
            if factor != 0.0 {
                for j in col + 1..n {
                    lu[row * n + j] -= factor * lu[col * n + j];
                }
                for j in 0..bc {
                    x[row * bc + j] -= factor * x[col * bc + j];
                }
            }
        }
    }
    // Back substitution on the upper triangle.
    for col in (0..n).rev() {
        let pivot = lu[col * n + col];
        for j in 0..bc {
            x[col * bc + j] /= pivot;
        }
        for row in 0..col {
            let factor = lu[row * n + col];
            if factor != 0.0 {
                for j in 0..bc {
                    x[row * bc + j] -= factor * x[col * bc + j];
                }
            }
        }
    }
    Ok(Tensor::from_vec(&[n, bc], x))
}

/// Eigendecomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in descending order and the matching orthonormal
/// eigenvectors as the *columns* of the returned matrix. Sweeps run until the
/// off-diagonal Frobenius norm drops below `1e-12 * max(1, ||S||_F)` (the
/// relative guard keeps badly scaled inputs from spinning forever; for the
/// O(1)-norm covariance matrices this is the literal 1e-12 threshold).
pub fn sym_eig(s: &Tensor) -> Result<(Vec<f64>, Tensor), NumericsError> {
    let n = check_square(s, "sym_eig input")?;
    let scale = s.max_abs().max(1.0);
    let mut max_asym = 0.0_f64;
    for i in 0..n {
        for j in i + 1..n {
            max_asym = max_asym.max((s.at2(i, j) - s.at2(j, i)).abs());
        }
    }
    if max_asym > 1e-9 * scale {
        return Err(NumericsError::NotSymmetric { max_asym });
    }

    let mut a = s.data().to_vec();
    let mut v = Tensor::eye(n).into_data();
    let fro = s.l2_norm().max(1.0);
    let tol = 1e-12 * fro;

    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in i + 1..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        if off.sqrt() <= tol {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                let tau = (aqq - app) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let sn = t * c;
                // Rotate rows/columns p and q of A.
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - sn * akq;
                    a[k * n + q] = sn * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - sn * aqk;
                    a[q * n + k] = sn * apk + c * aqk;
                }
                // Accumulate the rotation into the eigenvector columns.
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - sn * vkq;
                    v[k * n + q] = sn * vkp + c * vkq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    let eigvals: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    order.sort_by(|&i, &j| eigvals[j].partial_cmp(&eigvals[i]).unwrap());
    let sorted_vals: Vec<f64> = order.iter().map(|&i| eigvals[i]).collect();
    let mut sorted_vecs = Tensor::zeros(&[n, n]);
    for (new_col, &old_col) in order.iter().enumerate() {
        for row in 0..n {
            sorted_vecs.set2(row, new_col, v[row * n + old_col]);
        }
    }
    Ok((sorted_vals, sorted_vecs))
}

/// Determinant via LU with partial pivoting (sign tracked through row swaps).
/// Only used by tests and diagnostics; returns 0 for singular inputs.
pub fn det(a: &Tensor) -> Result<f64, NumericsError> {
    let n = check_square(a, "det input")?;
    let mut lu = a.data().to_vec();
    let mut sign = 1.0_f64;
    let mut d = 1.0_f64;
    for col in 0..n {
        let mut p = col;
        let mut best = lu[col * n + col].abs();
        for row in col + 1..n {
            let v = lu[row * n + col].abs();
            if v > best {
                best = v;
                p = row;
            }
        }
        if best == 0.0 {
            return Ok(0.0);
        }
        if p != col {
            sign = -sign;
            for j in 0..n {
                lu.swap(col * n + j, p * n + j);
            }
        }
        let pivot = lu[col * n + col];
        d *= pivot;
        for row in col + 1..n {
            let factor = lu[row * n + col] / pivot;
            for j in col + 1..n {
                lu[row * n + j] -= factor * lu[col * n + j];
            }
        }
    }
    Ok(sign * d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Independent oracle: truncated Taylor series, accurate to far below
    /// 1e-12 for ||A||_1 <= 1 (first omitted term is ||A||^41 / 41!).
    fn taylor_expm(a: &Tensor, terms: usize) -> Tensor {
        let n = a.dims2().0;
        let mut sum = Tensor::eye(n);
        let mut power = Tensor::eye(n);
        for k in 1..=terms {
            power = power.matmul(a).scale(1.0 / k as f64);
            sum = sum.add(&power);
        }
        sum
    }

    fn random_square(n: usize, scale: f64, seed: u64) -> Tensor {
        let mut t = Tensor::zeros(&[n, n]);
        t.fill_normal(&mut ChaCha8Rng::seed_from_u64(seed), scale);
        t
    }

    #[test]
    fn expm_of_zero_is_identity() {
        let e = expm(&Tensor::zeros(&[4, 4])).unwrap();
        assert_eq!(e, Tensor::eye(4), "exp(0) must be exactly the identity");
    }

    #[test]
    fn expm_of_diagonal_exponentiates_the_diagonal() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, -1.0]);
        let e = expm(&a).unwrap();
        assert!((e.at2(0, 0) - 1.0_f64.exp()).abs() < 1e-12);
        assert!((e.at2(1, 1) - (-1.0_f64).exp()).abs() < 1e-12);
        assert!(e.at2(0, 1).abs() < 1e-14 && e.at2(1, 0).abs() < 1e-14);
    }

    #[test]
    fn expm_of_quarter_turn_generator_is_rotation() {
        // A = [[0, -pi/2], [pi/2, 0]] generates a 90-degree rotation.
        let p = std::f64::consts::FRAC_PI_2;
        let a = Tensor::from_vec(&[2, 2], vec![0.0, -p, p, 0.0]);
        let e = expm(&a).unwrap();
        let want = Tensor::from_vec(&[2, 2], vec![0.0, -1.0, 1.0, 0.0]);
        assert!(
            e.max_abs_diff(&want) < 1e-12,
            "90-degree rotation off by {}",
            e.max_abs_diff(&want)
        );
    }

    #[test]
    fn expm_matches_taylor_oracle_on_moderate_norms() {
        for seed in 0..20 {
            let a = random_square(5, 0.2, seed); // ||A||_1 typically ~1
            let got = expm(&a).unwrap();
            let want = taylor_expm(&a, 40);
            let rel = got.max_abs_diff(&want) / want.max_abs().max(1.0);
            assert!(rel < 1e-10, "seed {seed}: relative error {rel:e} vs Taylor oracle");
        }
    }

    #[test]
    fn expm_rejects_non_square_and_non_finite() {
        assert!(matches!(
            expm(&Tensor::zeros(&[2, 3])),
            Err(NumericsError::NotSquare { rows: 2, cols: 3 })
        ));
        let mut bad = Tensor::zeros(&[2, 2]);
        bad.data_mut()[1] = f64::NAN;
        assert!(matches!(expm(&bad), Err(NumericsError::NonFinite { .. })));
    }

    #[test]
    fn expm_determinant_equals_exp_of_trace() {
        for seed in 0..10 {
            let a = random_square(4, 0.4, 100 + seed);
            let trace: f64 = (0..4).map(|i| a.at2(i, i)).sum();
            let d = det(&expm(&a).unwrap()).unwrap();
            let rel = (d - trace.exp()).abs() / trace.exp().abs();
            assert!(rel < 1e-8, "seed {seed}: det(exp(A)) = {d}, exp(tr A) = {}", trace.exp());
        }
    }

    #[test]
    fn expm_of_commuting_matrices_multiplies() {
        // B = 0.3 A + 0.1 A^2 commutes with A, so exp(A+B) = exp(A) exp(B).
        let a = random_square(4, 0.3, 55);
        let b = a.scale(0.3).add(&a.matmul(&a).scale(0.1));
        let lhs = expm(&a.add(&b)).unwrap();
        let rhs = expm(&a).unwrap().matmul(&expm(&b).unwrap());
        assert!(lhs.max_abs_diff(&rhs) < 1e-10, "commuting product law violated");
    }

    #[test]
    fn frechet_at_zero_base_is_the_direction() {
        let e = random_square(3, 1.0, 9);
        let l = expm_frechet(&Tensor::zeros(&[3, 3]), &e).unwrap();
        assert!(l.max_abs_diff(&e) < 1e-12, "L(0, E) must equal E");
    }

    #[test]
    fn frechet_commuting_case_is_expm_times_direction() {
        // Diagonal A and diagonal E commute: L(A, E) = exp(A) E.
        let a = Tensor::from_vec(&[2, 2], vec![0.3, 0.0, 0.0, -0.7]);
        let e = Tensor::from_vec(&[2, 2], vec![2.0, 0.0, 0.0, 5.0]);
        let l = expm_frechet(&a, &e).unwrap();
        let want = expm(&a).unwrap().matmul(&e);
        assert!(l.max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn frechet_matches_central_differences() {
        let h = 1e-6;
        for seed in 0..10 {
            let a = random_square(4, 0.3, 200 + seed);
            let e = random_square(4, 1.0, 300 + seed);
            let l = expm_frechet(&a, &e).unwrap();
            let plus = expm(&a.add(&e.scale(h))).unwrap();
            let minus = expm(&a.sub(&e.scale(h))).unwrap();
            let fd = plus.sub(&minus).scale(1.0 / (2.0 * h));
            let rel = l.max_abs_diff(&fd) / fd.max_abs().max(1.0);
            assert!(rel < 1e-5, "seed {seed}: Frechet vs central differences rel err {rel:e}");
        }
    }

    #[test]
    fn frechet_is_linear_in_the_direction() {
        let a = random_square(4, 0.3, 77);
        let e = random_square(4, 1.0, 78);
        let l1 = expm_frechet(&a, &e).unwrap();
        let l2 = expm_frechet(&a, &e.scale(1000.0)).unwrap();
        assert!(
            l2.scale(1e-3).max_abs_diff(&l1) < 1e-9 * l1.max_abs().max(1.0),
            "direction normalization must preserve linearity"
        );
    }

    #[test]
    fn frechet_rejects_shape_mismatch() {
        let a = Tensor::zeros(&[3, 3]);
        let e = Tensor::zeros(&[2, 2]);
        assert!(matches!(expm_frechet(&a, &e), Err(NumericsError::ShapeMismatch { .. })));
    }

    #[test]
    fn solve_lu_reconstructs_solution() {
        let a = random_square(6, 1.0, 5);
        let x_true = random_square(6, 1.0, 6).slice_rows(0, 6).reshaped(&[6, 6]);
        let b = a.matmul(&x_true);
        let x = solve_lu(&a, &b).unwrap();
        assert!(x.max_abs_diff(&x_true) < 1e-9, "LU solve error {}", x.max_abs_diff(&x_true));
    }

    #[test]
    fn solve_lu_rejects_singular() {
        let a = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]);
        let b = Tensor::eye(2);
        assert!(matches!(solve_lu(&a, &b), Err(NumericsError::Singular { .. })));
    }

    #[test]
    fn sym_eig_identity_has_unit_eigenvalues() {
        let (vals, _) = sym_eig(&Tensor::eye(3)).unwrap();
        for v in vals {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn sym_eig_two_by_two_matches_characteristic_polynomial() {
        // Oracle: eigenvalues of [[a, b], [b, c]] are
        // (a+c)/2 +- sqrt(((a-c)/2)^2 + b^2).
        let (a, b, c) = (2.0, 1.0, 2.0);
        let s = Tensor::from_vec(&[2, 2], vec![a, b, b, c]);
        let mid = (a + c) / 2.0;
        let rad = (((a - c) / 2.0) * ((a - c) / 2.0) + b * b).sqrt();
        let (vals, vecs) = sym_eig(&s).unwrap();
        assert!((vals[0] - (mid + rad)).abs() < 1e-12, "largest eigenvalue");
        assert!((vals[1] - (mid - rad)).abs() < 1e-12, "smallest eigenvalue");
        // Eigenvector for eigenvalue 3 is (1, 1)/sqrt(2) up to sign.
        let ratio = vecs.at2(0, 0) / vecs.at2(1, 0);
        assert!((ratio - 1.0).abs() < 1e-9, "leading eigenvector direction");
    }

    #[test]
    fn sym_eig_sorts_descending() {
        let s = Tensor::from_vec(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 3.0]);
        let (vals, _) = sym_eig(&s).unwrap();
        assert_eq!(vals, vec![5.0, 3.0, 1.0]);
    }

    #[test]
    fn sym_eig_rejects_asymmetric_input() {
        let s = Tensor::from_vec(&[2, 2], vec![1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(sym_eig(&s), Err(NumericsError::NotSymmetric { .. })));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn expm_is_invertible_with_exp_of_negation(seed in 0u64..500) {
            let mut a = random_square(4, 0.5, seed);
            // Clamp to the contract's norm bound ||A||_1 <= 2.
            let norm = a.one_norm();
            if norm > 2.0 {
                a = a.scale(2.0 / norm);
            }
            let prod = expm(&a).unwrap().matmul(&expm(&a.scale(-1.0)).unwrap());
            prop_assert!(
                prod.max_abs_diff(&Tensor::eye(4)) < 1e-8,
                "exp(A) exp(-A) != I, error {}",
                prod.max_abs_diff(&Tensor::eye(4))
            );
        }

        #[test]
        fn sym_eig_reconstructs_and_is_orthonormal(seed in 0u64..500, n in 2usize..8) {
            let g = random_square(n, 1.0, seed);
            let s = g.add(&g.transpose2()).scale(0.5);
            let (vals, v) = sym_eig(&s).unwrap();
            // V diag(vals) V^T == S
            let mut lam = Tensor::zeros(&[n, n]);
            for i in 0..n { lam.set2(i, i, vals[i]); }
            let recon = v.matmul(&lam).matmul(&v.transpose2());
            prop_assert!(recon.max_abs_diff(&s) < 1e-9, "reconstruction error {}", recon.max_abs_diff(&s));
            let vtv = v.transpose2().matmul(&v);
            prop_assert!(vtv.max_abs_diff(&Tensor::eye(n)) < 1e-9, "columns not orthonormal");
        }
    }
}
