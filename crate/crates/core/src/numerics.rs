//! Dense complex linear-algebra kernels shared by the whole pipeline.
//!
//! Matrices are `nalgebra::DMatrix<Complex64>`. Block indices are 0-based:
//! `block(x, n, i, l)` is the `(n, i)` L×L submatrix of an LN×LN matrix, i.e.
//! rows `n*l..(n+1)*l` and columns `i*l..(i+1)*l`.

use nalgebra::{Cholesky, DMatrix, SymmetricEigen};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;

/// Relative ridge added to statistically assembled Hermitian systems.
pub const RIDGE: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest are clamped to zero.
pub const EIG_CLAMP: f64 = 1e-12;
/// Asymmetry tolerated before a matrix is rejected as non-Hermitian.
pub const HERMITIAN_TOL: f64 = 1e-9;
const REFINE_STEPS: usize = 3;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn zeros(rows: usize, cols: usize) -> CMat {
    CMat::zeros(rows, cols)
}

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

pub fn scaled_identity(n: usize, s: f64) -> CMat {
    CMat::from_diagonal_element(n, n, c(s, 0.0))
}

/// Builds a complex matrix from real diagonal entries.
pub fn diag_real(d: &[f64]) -> CMat {
    let mut m = zeros(d.len(), d.len());
    for (i, &v) in d.iter().enumerate() {
        m[(i, i)] = c(v, 0.0);
    }
    m
}

pub fn frobenius(a: &CMat) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn trace(a: &CMat) -> C64 {
    a.diagonal().iter().sum()
}

/// `tr(a b)` without forming the product.
pub fn trace_of_product(a: &CMat, b: &CMat) -> C64 {
    debug_assert_eq!(a.ncols(), b.nrows());
    debug_assert_eq!(a.nrows(), b.ncols());
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `(a + aᴴ) / 2`.
pub fn hermitian_part(a: &CMat) -> CMat {
    (a + a.adjoint()) * c(0.5, 0.0)
}

/// Relative Frobenius asymmetry `‖a − aᴴ‖ / ‖a‖` (zero for the zero matrix).
pub fn asymmetry(a: &CMat) -> f64 {
    let norm = frobenius(a);
    if norm == 0.0 {
        return 0.0;
    }
    frobenius(&(a - a.adjoint())) / norm
}

fn check_square(a: &CMat, what: &str) -> Result<()> {
    if a.nrows() != a.ncols() || a.nrows() == 0 {
        return Err(Error::Dimension(format!(
            "{what}: expected a non-empty square matrix, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    Ok(())
}

pub fn check_hermitian(a: &CMat) -> Result<()> {
    check_square(a, "hermitian check")?;
    let r = asymmetry(a);
    if r > HERMITIAN_TOL {
        return Err(Error::NotHermitian(r));
    }
    Ok(())
}

/// Eigendecomposition of the Hermitian part of `a`. Eigenvalues are returned
/// in ascending order together with the matching unitary eigenvector matrix.
pub fn hermitian_eig(a: &CMat) -> Result<(Vec<f64>, CMat)> {
    check_square(a, "hermitian_eig")?;
    let h = hermitian_part(a);
    let eig = SymmetricEigen::try_new(h, f64::EPSILON, 0)
        .ok_or_else(|| Error::Indefinite("eigendecomposition did not converge".into()))?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = CMat::from_fn(a.nrows(), a.ncols(), |r, col| eig.eigenvectors[(r, order[col])]);
    Ok((values, vectors))
}

/// `u · diag(d) · uᴴ`.
pub fn reassemble(u: &CMat, d: &[f64]) -> CMat {
    let mut scaled = u.clone();
    for (j, &v) in d.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v);
    }
    &scaled * u.adjoint()
}

/// Principal square root of a Hermitian PSD matrix. Eigenvalues below
/// `EIG_CLAMP · λ_max` (including small negative ones) are set to zero.
pub fn hermitian_sqrt(a: &CMat) -> Result<CMat> {
    check_hermitian(a)?;
    let (vals, vecs) = hermitian_eig(a)?;
    let max = vals.iter().cloned().fold(0.0_f64, f64::max);
    let floor = EIG_CLAMP * max;
    let roots: Vec<f64> = vals
        .iter()
        .map(|&v| if v > floor { v.sqrt() } else { 0.0 })
        .collect();
    Ok(hermitian_part(&reassemble(&vecs, &roots)))
}

/// Projects a Hermitian matrix onto the PSD cone by clamping eigenvalues
/// below `EIG_CLAMP · λ_max` to zero.
pub fn clamp_psd(a: &CMat) -> Result<CMat> {
    let (vals, vecs) = hermitian_eig(a)?;
    let max = vals.iter().cloned().fold(0.0_f64, f64::max);
    let floor = EIG_CLAMP * max;
    let clamped: Vec<f64> = vals.iter().map(|&v| if v > floor { v } else { 0.0 }).collect();
    Ok(hermitian_part(&reassemble(&vecs, &clamped)))
}

/// Diagonal equilibration factors `1/√a_ii` (1 where the diagonal vanishes).
fn equilibration(a: &CMat) -> Vec<f64> {
    (0..a.nrows())
        .map(|i| {
            let d = a[(i, i)].re;
            if d > 0.0 && d.is_finite() {
                1.0 / d.sqrt()
            } else {
                1.0
            }
        })
        .collect()
}

/// Cholesky factor of the equilibrated, ridge-regularised Hermitian part of
/// `a`. The ridge is `ridge · tr/dim` of the equilibrated matrix.
fn regularised_cholesky(a: &CMat, ridge: f64) -> Result<(Cholesky<C64, nalgebra::Dyn>, Vec<f64>)> {
    check_square(a, "solve_hpd")?;
    if a.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err(Error::Indefinite("non-finite entries".into()));
    }
    let d = equilibration(a);
    let n = a.nrows();
    let mut scaled = CMat::from_fn(n, n, |i, j| (a[(i, j)] + a[(j, i)].conj()) * (0.5 * d[i] * d[j]));
    let tr: f64 = (0..n).map(|i| scaled[(i, i)].re).sum();
    let shift = ridge * tr.max(0.0) / n as f64;
    for i in 0..n {
        scaled[(i, i)] += c(shift, 0.0);
    }
    let chol = Cholesky::new(scaled)
        .ok_or_else(|| Error::Indefinite(format!("{n}x{n} system failed Cholesky factorisation")))?;
    // The complex square root never fails, so a negative pivot shows up as a
    // non-real diagonal entry of the factor.
    let l = chol.l_dirty();
    for i in 0..n {
        let p = l[(i, i)];
        if !(p.re > 0.0) || p.im.abs() > 1e-12 * p.re {
            return Err(Error::Indefinite(format!("{n}x{n} system has a non-positive pivot at {i}")));
        }
    }
    Ok((chol, d))
}

/// Solves `a · x = b` for Hermitian positive (semi)definite `a` with the
/// standard relative ridge.
pub fn solve_hpd(a: &CMat, b: &CMat) -> Result<CMat> {
    if a.nrows() != b.nrows() {
        return Err(Error::Dimension(format!(
            "solve_hpd: system is {}x{}, right-hand side has {} rows",
            a.nrows(),
            a.ncols(),
            b.nrows()
        )));
    }
    let (chol, d) = regularised_cholesky(a, RIDGE)?;
    let mut rhs = b.clone();
    for (i, &s) in d.iter().enumerate() {
        rhs.row_mut(i).scale_mut(s);
    }
    let solve_scaled = |rhs: &CMat| {
        let mut r = rhs.clone();
        for (i, &s) in d.iter().enumerate() {
            r.row_mut(i).scale_mut(s);
        }
        let mut x = chol.solve(&r);
        for (i, &s) in d.iter().enumerate() {
            x.row_mut(i).scale_mut(s);
        }
        x
    };
    let mut x = solve_scaled(b);
    // A few refinement steps against the unregularised matrix remove the
    // ridge bias when `a` is safely definite; stop as soon as they stop
    // helping (the semidefinite case).
    let mut residual = b - a * &x;
    let mut res_norm = frobenius(&residual);
    for _ in 0..REFINE_STEPS {
        if res_norm == 0.0 {
            break;
        }
        let candidate = &x + solve_scaled(&residual);
        let next = b - a * &candidate;
        let next_norm = frobenius(&next);
        if next_norm >= 0.5 * res_norm {
            break;
        }
        x = candidate;
        residual = next;
        res_norm = next_norm;
    }
    Ok(x)
}

pub fn inverse_hpd(a: &CMat) -> Result<CMat> {
    solve_hpd(a, &identity(a.nrows()))
}

/// `log₂ det a` for Hermitian positive definite `a` (no ridge).
pub fn log2_det_hpd(a: &CMat) -> Result<f64> {
    let (chol, d) = regularised_cholesky(a, 0.0)?;
    let l = chol.l_dirty();
    let mut acc = 0.0;
    for i in 0..a.nrows() {
        acc += 2.0 * l[(i, i)].re.ln() - 2.0 * d[i].ln();
    }
    Ok(acc / std::f64::consts::LN_2)
}

/// Column-stacking `vec(x)`.
pub fn vec(x: &CMat) -> CMat {
    CMat::from_column_slice(x.len(), 1, x.as_slice())
}

/// Inverse of `vec` for a `rows × cols` target.
pub fn unvec(v: &CMat, rows: usize, cols: usize) -> Result<CMat> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "unvec: {} entries cannot form {rows}x{cols}",
            v.len()
        )));
    }
    Ok(CMat::from_column_slice(rows, cols, v.as_slice()))
}

pub fn kron(a: &CMat, b: &CMat) -> CMat {
    a.kronecker(b)
}

/// `(a ⊗ b) · vec(x)` returned in matrix form, computed as `b · x · aᵀ`.
pub fn kron_vec(a: &CMat, b: &CMat, x: &CMat) -> Result<CMat> {
    if b.ncols() != x.nrows() || x.ncols() != a.ncols() {
        return Err(Error::Dimension(format!(
            "kron_vec: a is {}x{}, b is {}x{}, x is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols(),
            x.nrows(),
            x.ncols()
        )));
    }
    Ok(b * x * a.transpose())
}

/// `(n, i)` L×L submatrix of an LN×LN matrix.
pub fn block(x: &CMat, n: usize, i: usize, l: usize) -> Result<CMat> {
    if l == 0 || !x.nrows().is_multiple_of(l) || !x.ncols().is_multiple_of(l) {
        return Err(Error::Dimension(format!(
            "block: {}x{} is not tiled by {l}x{l} blocks",
            x.nrows(),
            x.ncols()
        )));
    }
    let (nr, nc) = (x.nrows() / l, x.ncols() / l);
    if n >= nr || i >= nc {
        return Err(Error::Index(format!("block ({n}, {i}) outside {nr}x{nc} grid")));
    }
    Ok(x.view((n * l, i * l), (l, l)).into_owned())
}

/// Trace of the `(n, i)` L×L block, without copying.
#[inline]
pub fn block_trace(x: &CMat, n: usize, i: usize, l: usize) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for j in 0..l {
        acc += x[(n * l + j, i * l + j)];
    }
    acc
}

/// N×N matrix whose `(a, b)` entry is `tr(X^{ba})`, the trace of the `(b, a)`
/// L×L block of an LN×LN matrix `x`.
pub fn transposed_block_traces(x: &CMat, l: usize) -> CMat {
    let n = x.nrows() / l;
    CMat::from_fn(n, n, |a, b| block_trace(x, b, a, l))
}

/// `tr(X^{ab} Y^{cd})` for L×L blocks of two LN×LN matrices.
#[inline]
pub fn block_product_trace(x: &CMat, (a, b): (usize, usize), y: &CMat, (cc, d): (usize, usize), l: usize) -> C64 {
    let mut acc = C64::new(0.0, 0.0);
    for r in 0..l {
        for s in 0..l {
            acc += x[(a * l + r, b * l + s)] * y[(cc * l + s, d * l + r)];
        }
    }
    acc
}

/// Block-diagonal matrix from square blocks.
pub fn block_diag(blocks: &[CMat]) -> CMat {
    let dim: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = zeros(dim, dim);
    let mut off = 0;
    for b in blocks {
        out.view_mut((off, off), (b.nrows(), b.ncols())).copy_from(b);
        off += b.nrows();
    }
    out
}

/// Stacks equally wide matrices vertically.
pub fn vstack(parts: &[CMat]) -> CMat {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows: usize = parts.iter().map(|p| p.nrows()).sum();
    let mut out = zeros(rows, cols);
    let mut off = 0;
    for p in parts {
        out.view_mut((off, 0), (p.nrows(), cols)).copy_from(p);
        off += p.nrows();
    }
    out
}

/// `acc += y · yᴴ`, written out on the raw column-major storage. This is the
/// Monte-Carlo hot loop for Gram accumulation.
pub fn accumulate_outer(acc: &mut CMat, y: &CMat) {
    let n = acc.nrows();
    debug_assert_eq!(n, y.nrows());
    let k = y.ncols();
    let ys = y.as_slice();
    let a = acc.as_mut_slice();
    for col in 0..n {
        for j in 0..k {
            let w = ys[j * n + col].conj();
            if w.re == 0.0 && w.im == 0.0 {
                continue;
            }
            let src = &ys[j * n..(j + 1) * n];
            let dst = &mut a[col * n..(col + 1) * n];
            for (d, s) in dst.iter_mut().zip(src) {
                *d += *s * w;
            }
        }
    }
}
