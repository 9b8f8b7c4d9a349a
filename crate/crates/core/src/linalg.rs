//! Dense linear-algebra kernels: LU with partial pivoting, banded LU for
//! collocation systems, Hessenberg + Francis double-shift QR for general real
//! spectra, and Householder tridiagonalization + implicit QL for symmetric
//! eigenproblems.
//!
//! Everything works on `ndarray` storage. The eigen routines follow the
//! EISPACK `orthes`/`hqr` and `tred2`/`tql2` procedures.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use num_complex::Complex64;
use thiserror::Error;

pub type Matrix = Array2<f64>;
pub type Vector = Array1<f64>;

/// Relative deflation tolerance used by the QR iteration.
const DEFLATION_TOL: f64 = 1e-14;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("matrix is singular to working precision (pivot {pivot} at column {column})")]
    Singular { column: usize, pivot: f64 },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("QR iteration failed to converge after {iterations} sweeps")]
    NoConvergence { iterations: usize },
    #[error("non-finite entry in input")]
    NonFinite,
}

fn ensure_square(a: &ArrayView2<f64>) -> Result<usize, LinalgError> {
    let (r, c) = a.dim();
    if r != c {
        return Err(LinalgError::NotSquare { rows: r, cols: c });
    }
    Ok(r)
}

fn ensure_finite(a: &ArrayView2<f64>) -> Result<(), LinalgError> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LinalgError::NonFinite)
    }
}

/// LU factorization `PA = LU` with partial pivoting.
#[derive(Debug, Clone)]
pub struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub fn factor(a: ArrayView2<f64>) -> Result<Self, LinalgError> {
        let n = ensure_square(&a)?;
        ensure_finite(&a)?;
        let mut lu = a.to_owned();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        for k in 0..n {
            let mut p = k;
            let mut best = lu[[k, k]].abs();
            for i in (k + 1)..n {
                let v = lu[[i, k]].abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= scale * f64::EPSILON * n as f64 * 1e-3 || best == 0.0 {
                return Err(LinalgError::Singular { column: k, pivot: best });
            }
            if p != k {
                for j in 0..n {
                    lu.swap([k, j], [p, j]);
                }
                perm.swap(k, p);
            }
            let pivot = lu[[k, k]];
            for i in (k + 1)..n {
                let l = lu[[i, k]] / pivot;
                lu[[i, k]] = l;
                if l != 0.0 {
                    for j in (k + 1)..n {
                        lu[[i, j]] -= l * lu[[k, j]];
                    }
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: ArrayView1<f64>) -> Result<Vector, LinalgError> {
        let n = self.dim();
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
        }
        let mut x: Vector = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in (i + 1)..n {
                s -= self.lu[[i, j]] * x[j];
            }
            x[i] = s / self.lu[[i, i]];
        }
        Ok(x)
    }

    /// Solves `AX = B` column by column.
    pub fn solve_matrix(&self, b: ArrayView2<f64>) -> Result<Matrix, LinalgError> {
        let mut out = Matrix::zeros(b.dim());
        for (j, col) in b.axis_iter(Axis(1)).enumerate() {
            out.column_mut(j).assign(&self.solve(col)?);
        }
        Ok(out)
    }
}

pub fn lu_solve(a: ArrayView2<f64>, b: ArrayView1<f64>) -> Result<Vector, LinalgError> {
    Lu::factor(a)?.solve(b)
}

pub fn inverse(a: ArrayView2<f64>) -> Result<Matrix, LinalgError> {
    let n = ensure_square(&a)?;
    Lu::factor(a)?.solve_matrix(Matrix::eye(n).view())
}

/// Square banded matrix with `kl` sub- and `ku` super-diagonals, factored in
/// place with partial pivoting (row interchanges stay within `kl` rows, so the
/// upper band grows to `kl + ku`).
#[derive(Debug, Clone)]
pub struct BandedMatrix {
    n: usize,
    kl: usize,
    ku: usize,
    width: usize,
    data: Vec<f64>,
}

impl BandedMatrix {
    pub fn zeros(n: usize, kl: usize, ku: usize) -> Self {
        let width = 2 * kl + ku + 1;
        Self { n, kl, ku, width, data: vec![0.0; n * width] }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j + self.kl >= i && j <= i + self.kl + self.ku);
        i * self.width + (j + self.kl - i)
    }

    pub fn in_band(&self, i: usize, j: usize) -> bool {
        i < self.n && j < self.n && j + self.kl >= i && j <= i + self.ku
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if j + self.kl < i || j > i + self.kl + self.ku {
            0.0
        } else {
            self.data[self.idx(i, j)]
        }
    }

    /// Adds `v` to entry `(i, j)`; panics if the entry lies outside the band.
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        assert!(self.in_band(i, j), "entry ({i}, {j}) outside band");
        let k = self.idx(i, j);
        self.data[k] += v;
    }

    pub fn mul_vec(&self, x: ArrayView1<f64>) -> Vector {
        let mut y = Vector::zeros(self.n);
        for i in 0..self.n {
            let lo = i.saturating_sub(self.kl);
            let hi = (i + self.ku).min(self.n - 1);
            let mut s = 0.0;
            for j in lo..=hi {
                s += self.data[self.idx(i, j)] * x[j];
            }
            y[i] = s;
        }
        y
    }

    /// Factors and solves `Ax = b`, consuming the matrix.
    pub fn solve(mut self, b: ArrayView1<f64>) -> Result<Vector, LinalgError> {
        let n = self.n;
        if b.len() != n {
            return Err(LinalgError::DimensionMismatch { expected: n, got: b.len() });
        }
        let (kl, ku) = (self.kl, self.ku);
        let scale = self.data.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(f64::MIN_POSITIVE);
        if !scale.is_finite() {
            return Err(LinalgError::NonFinite);
        }
        let mut piv = vec![0usize; n];
        for k in 0..n {
            let last_row = (k + kl).min(n - 1);
            let mut p = k;
            let mut best = self.get(k, k).abs();
            for i in (k + 1)..=last_row {
                let v = self.get(i, k).abs();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best <= scale * f64::EPSILON * 1e-3 || best == 0.0 {
                return Err(LinalgError::Singular { column: k, pivot: best });
            }
            piv[k] = p;
            let last_col = (k + kl + ku).min(n - 1);
            if p != k {
                for j in k..=last_col {
                    let a = self.idx(k, j);
                    let c = self.idx(p, j);
                    self.data.swap(a, c);
                }
            }
            let pivot = self.data[self.idx(k, k)];
            for i in (k + 1)..=last_row {
                let ik = self.idx(i, k);
                let l = self.data[ik] / pivot;
                self.data[ik] = l;
                if l != 0.0 {
                    let kbase = self.idx(k, k);
                    let ibase = self.idx(i, k);
                    for off in 1..=(last_col - k) {
                        self.data[ibase + off] -= l * self.data[kbase + off];
                    }
                }
            }
        }
        let mut x = b.to_owned();
        for k in 0..n {
            let p = piv[k];
            if p != k {
                x.swap(k, p);
            }
            let last_row = (k + kl).min(n - 1);
            let xk = x[k];
            if xk != 0.0 {
                for i in (k + 1)..=last_row {
                    x[i] -= self.data[self.idx(i, k)] * xk;
                }
            }
        }
        for i in (0..n).rev() {
            let last_col = (i + kl + ku).min(n - 1);
            let mut s = x[i];
            for j in (i + 1)..=last_col {
                s -= self.data[self.idx(i, j)] * x[j];
            }
            x[i] = s / self.data[self.idx(i, i)];
        }
        Ok(x)
    }
}

/// Eigenvalues of a real matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Spectrum {
    pub eigenvalues: Vec<Complex64>,
    pub max_real_part: f64,
}

impl Spectrum {
    fn from_parts(re: &[f64], im: &[f64]) -> Self {
        let eigenvalues: Vec<Complex64> = re.iter().zip(im).map(|(&r, &i)| Complex64::new(r, i)).collect();
        let max_real_part = re.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Self { eigenvalues, max_real_part }
    }

    pub fn is_hurwitz(&self) -> bool {
        self.max_real_part < 0.0
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// Eigenvalues sorted by decreasing real part, ties broken by imaginary part.
    pub fn sorted(&self) -> Vec<Complex64> {
        let mut v = self.eigenvalues.clone();
        v.sort_by(|a, b| b.re.total_cmp(&a.re).then(a.im.total_cmp(&b.im)));
        v
    }
}

/// Eigenvalues of a general real square matrix via Householder reduction to
/// Hessenberg form followed by the shifted double-step QR iteration.
pub fn eig_general(a: ArrayView2<f64>) -> Result<Spectrum, LinalgError> {
    let n = ensure_square(&a)?;
    ensure_finite(&a)?;
    if n == 0 {
        return Ok(Spectrum { eigenvalues: vec![], max_real_part: f64::NEG_INFINITY });
    }
    let mut h = a.to_owned();
    hessenberg_reduce(&mut h);
    let (re, im) = hqr(&mut h)?;
    Ok(Spectrum::from_parts(&re, &im))
}

/// Householder reduction to upper Hessenberg form (EISPACK `orthes`).
fn hessenberg_reduce(h: &mut Matrix) {
    let n = h.nrows();
    if n < 3 {
        return;
    }
    let mut ort = vec![0.0; n];
    let high = n - 1;
    for m in 1..high {
        let mut scale = 0.0;
        for i in m..=high {
            scale += h[[i, m - 1]].abs();
        }
        if scale == 0.0 {
            continue;
        }
        let mut hh = 0.0;
        for i in (m..=high).rev() {
            ort[i] = h[[i, m - 1]] / scale;
            hh += ort[i] * ort[i];
        }
        let mut g = hh.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        hh -= ort[m] * g;
        ort[m] -= g;
        for j in m..n {
            let mut f = 0.0;
            for i in (m..=high).rev() {
                f += ort[i] * h[[i, j]];
            }
            f /= hh;
            for i in m..=high {
                h[[i, j]] -= f * ort[i];
            }
        }
        for i in 0..=high {
            let mut f = 0.0;
            for j in (m..=high).rev() {
                f += ort[j] * h[[i, j]];
            }
            f /= hh;
            for j in m..=high {
                h[[i, j]] -= f * ort[j];
            }
        }
        ort[m] *= scale;
        h[[m, m - 1]] = scale * g;
    }
}

/// Eigenvalues of an upper Hessenberg matrix (EISPACK `hqr`, no vectors).
fn hqr(h: &mut Matrix) -> Result<(Vec<f64>, Vec<f64>), LinalgError> {
    let nn = h.nrows();
    let mut wr = vec![0.0; nn];
    let mut wi = vec![0.0; nn];
    let mut norm = 0.0;
    for i in 0..nn {
        for j in i.saturating_sub(1)..nn {
            norm += h[[i, j]].abs();
        }
    }
    let max_sweeps = 100 * nn.max(1);
    let mut total_sweeps = 0usize;
    let mut exshift = 0.0;
    let mut n = nn as isize - 1;
    let mut iter = 0usize;
    let (mut p, mut q, mut r): (f64, f64, f64);
    let (mut x, mut y, mut z, mut w, mut s);
    while n >= 0 {
        let nu = n as usize;
        // look for a single small subdiagonal element
        let mut l = nu;
        while l > 0 {
            s = h[[l - 1, l - 1]].abs() + h[[l, l]].abs();
            if s == 0.0 {
                s = norm;
            }
            if h[[l, l - 1]].abs() < DEFLATION_TOL * s {
                h[[l, l - 1]] = 0.0;
                break;
            }
            l -= 1;
        }
        if l == nu {
            wr[nu] = h[[nu, nu]] + exshift;
            wi[nu] = 0.0;
            n -= 1;
            iter = 0;
        } else if l + 1 == nu {
            w = h[[nu, nu - 1]] * h[[nu - 1, nu]];
            p = (h[[nu - 1, nu - 1]] - h[[nu, nu]]) / 2.0;
            q = p * p + w;
            z = q.abs().sqrt();
            x = h[[nu, nu]] + exshift;
            if q >= 0.0 {
                z = if p >= 0.0 { p + z } else { p - z };
                wr[nu - 1] = x + z;
                wr[nu] = if z != 0.0 { x - w / z } else { x + z };
                wi[nu - 1] = 0.0;
                wi[nu] = 0.0;
            } else {
                wr[nu - 1] = x + p;
                wr[nu] = x + p;
                wi[nu - 1] = z;
                wi[nu] = -z;
            }
            n -= 2;
            iter = 0;
        } else {
            x = h[[nu, nu]];
            y = h[[nu - 1, nu - 1]];
            w = h[[nu, nu - 1]] * h[[nu - 1, nu]];
            if iter == 10 {
                exshift += x;
                for i in 0..=nu {
                    h[[i, i]] -= x;
                }
                s = h[[nu, nu - 1]].abs() + h[[nu - 1, nu - 2]].abs();
                x = 0.75 * s;
                y = x;
                w = -0.4375 * s * s;
            }
            if iter == 30 {
                s = (y - x) / 2.0;
                s = s * s + w;
                if s > 0.0 {
                    s = s.sqrt();
                    if y < x {
                        s = -s;
                    }
                    s = x - w / ((y - x) / 2.0 + s);
                    for i in 0..=nu {
                        h[[i, i]] -= s;
                    }
                    exshift += s;
                    x = 0.964;
                    y = x;
                    w = x;
                }
            }
            iter += 1;
            total_sweeps += 1;
            if total_sweeps > max_sweeps {
                return Err(LinalgError::NoConvergence { iterations: total_sweeps });
            }
            // look for two consecutive small subdiagonal elements
            let mut m = nu - 2;
            loop {
                z = h[[m, m]];
                r = x - z;
                s = y - z;
                p = (r * s - w) / h[[m + 1, m]] + h[[m, m + 1]];
                q = h[[m + 1, m + 1]] - z - r - s;
                r = h[[m + 2, m + 1]];
                s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                if h[[m, m - 1]].abs() * (q.abs() + r.abs())
                    < DEFLATION_TOL * (p.abs() * (h[[m - 1, m - 1]].abs() + z.abs() + h[[m + 1, m + 1]].abs()))
                {
                    break;
                }
                m -= 1;
            }
            for i in (m + 2)..=nu {
                h[[i, i - 2]] = 0.0;
                if i > m + 2 {
                    h[[i, i - 3]] = 0.0;
                }
            }
            // double QR step on rows l..=n, columns m..=n
            let mut k = m;
            while k < nu {
                let notlast = k != nu - 1;
                if k != m {
                    p = h[[k, k - 1]];
                    q = h[[k + 1, k - 1]];
                    r = if notlast { h[[k + 2, k - 1]] } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x == 0.0 {
                        k += 1;
                        continue;
                    }
                    p /= x;
                    q /= x;
                    r /= x;
                }
                s = (p * p + q * q + r * r).sqrt();
                if p < 0.0 {
                    s = -s;
                }
                if s != 0.0 {
                    if k != m {
                        h[[k, k - 1]] = -s * x;
                    } else if l != m {
                        h[[k, k - 1]] = -h[[k, k - 1]];
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..nn {
                        p = h[[k, j]] + q * h[[k + 1, j]];
                        if notlast {
                            p += r * h[[k + 2, j]];
                            h[[k + 2, j]] -= p * z;
                        }
                        h[[k, j]] -= p * x;
                        h[[k + 1, j]] -= p * y;
                    }
                    for i in 0..=nu.min(k + 3) {
                        p = x * h[[i, k]] + y * h[[i, k + 1]];
                        if notlast {
                            p += z * h[[i, k + 2]];
                            h[[i, k + 2]] -= p * r;
                        }
                        h[[i, k]] -= p;
                        h[[i, k + 1]] -= p * q;
                    }
                }
                k += 1;
            }
        }
    }
    Ok((wr, wi))
}

/// Eigenvector for an eigenvalue of `a` by complex inverse iteration.
/// Returns a unit-norm vector `v` with `‖Av − λv‖` small.
pub fn eigenvector(a: ArrayView2<f64>, lambda: Complex64) -> Result<Vec<Complex64>, LinalgError> {
    let n = ensure_square(&a)?;
    let anorm = frobenius_norm(a).max(1.0);
    // perturb the shift so the shifted matrix is numerically invertible
    let shift = lambda + Complex64::new(anorm * 1e-10, anorm * 1e-10);
    let mut m: Vec<Complex64> = a.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    for i in 0..n {
        m[i * n + i] -= shift;
    }
    let mut perm: Vec<usize> = (0..n).collect();
    for k in 0..n {
        let mut p = k;
        let mut best = m[k * n + k].norm();
        for i in (k + 1)..n {
            let v = m[i * n + k].norm();
            if v > best {
                best = v;
                p = i;
            }
        }
        if best == 0.0 {
            m[k * n + k] = Complex64::new(anorm * f64::EPSILON, 0.0);
        } else if p != k {
            for j in 0..n {
                m.swap(k * n + j, p * n + j);
            }
            perm.swap(k, p);
        }
        let pivot = m[k * n + k];
        for i in (k + 1)..n {
            let l = m[i * n + k] / pivot;
            m[i * n + k] = l;
            for j in (k + 1)..n {
                let t = m[k * n + j];
                m[i * n + j] -= l * t;
            }
        }
    }
    let solve = |b: &[Complex64]| -> Vec<Complex64> {
        let mut x: Vec<Complex64> = perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                let t = m[i * n + j] * x[j];
                x[i] -= t;
            }
        }
        for i in (0..n).rev() {
            for j in (i + 1)..n {
                let t = m[i * n + j] * x[j];
                x[i] -= t;
            }
            x[i] /= m[i * n + i];
        }
        x
    };
    let mut v: Vec<Complex64> = (0..n).map(|i| Complex64::new(1.0 + 0.1 * i as f64, 0.0)).collect();
    for _ in 0..4 {
        v = solve(&v);
        let nrm = v.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt();
        if !nrm.is_finite() || nrm == 0.0 {
            return Err(LinalgError::NoConvergence { iterations: 0 });
        }
        for c in v.iter_mut() {
            *c /= nrm;
        }
    }
    Ok(v)
}

/// Residual `‖Av − λv‖₂` for a complex eigenpair of a real matrix.
pub fn eigenpair_residual(a: ArrayView2<f64>, lambda: Complex64, v: &[Complex64]) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        let mut acc = -lambda * v[i];
        for j in 0..n {
            acc += v[j] * a[[i, j]];
        }
        s += acc.norm_sqr();
    }
    s.sqrt()
}

/// Symmetric eigendecomposition: eigenvalues ascending and orthonormal
/// eigenvectors stored column-wise.
pub fn eig_symmetric(a: ArrayView2<f64>) -> Result<(Vector, Matrix), LinalgError> {
    let n = ensure_square(&a)?;
    ensure_finite(&a)?;
    let scale = max_abs(a).max(1.0);
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            asym = asym.max((a[[i, j]] - a[[j, i]]).abs());
        }
    }
    if asym > 1e-12 * scale {
        return Err(LinalgError::NotSymmetric { asymmetry: asym });
    }
    if n == 0 {
        return Ok((Vector::zeros(0), Matrix::zeros((0, 0))));
    }
    let mut v = a.to_owned();
    let mut d = vec![0.0; n];
    let mut e = vec![0.0; n];
    tred2(&mut v, &mut d, &mut e);
    tql2(&mut v, &mut d, &mut e)?;
    Ok((Array1::from(d), v))
}

/// Householder tridiagonalization (EISPACK `tred2`).
fn tred2(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) {
    let n = d.len();
    for j in 0..n {
        d[j] = v[[n - 1, j]];
    }
    for i in (1..n).rev() {
        let mut scale = 0.0;
        let mut h = 0.0;
        for k in 0..i {
            scale += d[k].abs();
        }
        if scale == 0.0 {
            e[i] = d[i - 1];
            for j in 0..i {
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
                v[[j, i]] = 0.0;
            }
        } else {
            for k in 0..i {
                d[k] /= scale;
                h += d[k] * d[k];
            }
            let mut f = d[i - 1];
            let mut g = h.sqrt();
            if f > 0.0 {
                g = -g;
            }
            e[i] = scale * g;
            h -= f * g;
            d[i - 1] = f - g;
            for ej in e.iter_mut().take(i) {
                *ej = 0.0;
            }
            for j in 0..i {
                f = d[j];
                v[[j, i]] = f;
                g = e[j] + v[[j, j]] * f;
                for k in (j + 1)..i {
                    g += v[[k, j]] * d[k];
                    e[k] += v[[k, j]] * f;
                }
                e[j] = g;
            }
            f = 0.0;
            for j in 0..i {
                e[j] /= h;
                f += e[j] * d[j];
            }
            let hh = f / (h + h);
            for j in 0..i {
                e[j] -= hh * d[j];
            }
            for j in 0..i {
                f = d[j];
                g = e[j];
                for k in j..i {
                    v[[k, j]] -= f * e[k] + g * d[k];
                }
                d[j] = v[[i - 1, j]];
                v[[i, j]] = 0.0;
            }
        }
        d[i] = h;
    }
    for i in 0..n.saturating_sub(1) {
        v[[n - 1, i]] = v[[i, i]];
        v[[i, i]] = 1.0;
        let h = d[i + 1];
        if h != 0.0 {
            for k in 0..=i {
                d[k] = v[[k, i + 1]] / h;
            }
            for j in 0..=i {
                let mut g = 0.0;
                for k in 0..=i {
                    g += v[[k, i + 1]] * v[[k, j]];
                }
                for k in 0..=i {
                    v[[k, j]] -= g * d[k];
                }
            }
        }
        for k in 0..=i {
            v[[k, i + 1]] = 0.0;
        }
    }
    for j in 0..n {
        d[j] = v[[n - 1, j]];
        v[[n - 1, j]] = 0.0;
    }
    v[[n - 1, n - 1]] = 1.0;
    e[0] = 0.0;
}

/// Implicit QL on a symmetric tridiagonal matrix (EISPACK `tql2`).
fn tql2(v: &mut Matrix, d: &mut [f64], e: &mut [f64]) -> Result<(), LinalgError> {
    let n = d.len();
    for i in 1..n {
        e[i - 1] = e[i];
    }
    e[n - 1] = 0.0;
    let mut f = 0.0;
    let mut tst1 = 0.0f64;
    let eps = f64::EPSILON;
    for l in 0..n {
        tst1 = tst1.max(d[l].abs() + e[l].abs());
        let mut m = l;
        while m < n {
            if e[m].abs() <= eps * tst1 {
                break;
            }
            m += 1;
        }
        if m == n {
            m = n - 1;
        }
        if m > l {
            let mut iter = 0;
            loop {
                iter += 1;
                if iter > 100 * n {
                    return Err(LinalgError::NoConvergence { iterations: iter });
                }
                let mut g = d[l];
                let mut p = (d[l + 1] - g) / (2.0 * e[l]);
                let mut r = p.hypot(1.0);
                if p < 0.0 {
                    r = -r;
                }
                d[l] = e[l] / (p + r);
                d[l + 1] = e[l] * (p + r);
                let dl1 = d[l + 1];
                let mut h = g - d[l];
                for di in d.iter_mut().skip(l + 2) {
                    *di -= h;
                }
                f += h;
                p = d[m];
                let mut c = 1.0;
                let mut c2 = c;
                let mut c3 = c;
                let el1 = e[l + 1];
                let mut s = 0.0;
                let mut s2 = 0.0;
                for i in (l..m).rev() {
                    c3 = c2;
                    c2 = c;
                    s2 = s;
                    g = c * e[i];
                    h = c * p;
                    r = p.hypot(e[i]);
                    e[i + 1] = s * r;
                    s = e[i] / r;
                    c = p / r;
                    p = c * d[i] - s * g;
                    d[i + 1] = h + s * (c * g + s * d[i]);
                    for k in 0..n {
                        h = v[[k, i + 1]];
                        v[[k, i + 1]] = s * v[[k, i]] + c * h;
                        v[[k, i]] = c * v[[k, i]] - s * h;
                    }
                }
                p = -s * s2 * c3 * el1 * e[l] / dl1;
                e[l] = s * p;
                d[l] = c * p;
                if e[l].abs() <= eps * tst1 {
                    break;
                }
            }
        }
        d[l] += f;
        e[l] = 0.0;
    }
    // selection sort, ascending
    for i in 0..n.saturating_sub(1) {
        let mut k = i;
        let mut p = d[i];
        for (j, &dj) in d.iter().enumerate().skip(i + 1) {
            if dj < p {
                k = j;
                p = dj;
            }
        }
        if k != i {
            d[k] = d[i];
            d[i] = p;
            for j in 0..n {
                v.swap([j, i], [j, k]);
            }
        }
    }
    Ok(())
}

pub fn frobenius_norm(a: ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

pub fn max_abs(a: ArrayView2<f64>) -> f64 {
    a.iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

/// Induced infinity norm (max absolute row sum).
pub fn inf_norm(a: ArrayView2<f64>) -> f64 {
    a.rows().into_iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Largest singular value, from the spectrum of `AᵀA`.
pub fn spectral_norm(a: ArrayView2<f64>) -> Result<f64, LinalgError> {
    let ata = a.t().dot(&a);
    let ata = symmetrize(ata.view());
    let (vals, _) = eig_symmetric(ata.view())?;
    Ok(vals.iter().cloned().fold(0.0, f64::max).max(0.0).sqrt())
}

pub fn symmetrize(a: ArrayView2<f64>) -> Matrix {
    let mut s = a.to_owned();
    let n = s.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[[i, j]] + a[[j, i]]);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    s
}

pub fn vec_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn vec_inf_norm(v: ArrayView1<f64>) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

pub fn diag(values: &[f64]) -> Matrix {
    let n = values.len();
    let mut m = Matrix::zeros((n, n));
    for (i, &v) in values.iter().enumerate() {
        m[[i, i]] = v;
    }
    m
}

pub fn is_diagonal(a: ArrayView2<f64>) -> bool {
    a.indexed_iter().all(|((i, j), &v)| i == j || v == 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(n: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn lu_identity_and_diagonal() {
        let b = array![3.0, -1.0, 2.0];
        let x = lu_solve(Matrix::eye(3).view(), b.view()).unwrap();
        assert_eq!(x, b);
        let x = lu_solve(array![[2.0, 0.0], [0.0, 4.0]].view(), array![2.0, 8.0].view()).unwrap();
        assert_eq!(x, array![1.0, 2.0]);
    }

    #[test]
    fn lu_random_construct_then_solve() {
        let a = random_matrix(50, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0: Vector = (0..50).map(|_| rng.random_range(-1.0..1.0)).collect();
        let b = a.dot(&x0);
        let x = lu_solve(a.view(), b.view()).unwrap();
        let err = (&x - &x0).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-8, "err {err}");
        let res = (&a.dot(&x) - &b).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(res <= 1e-10 * (1.0 + vec_inf_norm(b.view())));
    }

    #[test]
    fn lu_rejects_singular() {
        let a = array![[1.0, 2.0], [2.0, 4.0]];
        assert!(matches!(Lu::factor(a.view()), Err(LinalgError::Singular { .. })));
    }

    #[test]
    fn banded_matches_dense() {
        let n = 40;
        let (kl, ku) = (3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut band = BandedMatrix::zeros(n, kl, ku);
        let mut dense = Matrix::zeros((n, n));
        for i in 0..n {
            for j in 0..n {
                if band.in_band(i, j) {
                    // weak diagonal so that pivoting actually happens
                    let v: f64 = rng.random_range(-1.0..1.0) + if i == j { 0.05 } else { 0.0 };
                    band.add(i, j, v);
                    dense[[i, j]] = v;
                }
            }
        }
        let b: Vector = (0..n).map(|i| (i as f64).sin()).collect();
        let y = band.mul_vec(b.view());
        assert!((&y - &dense.dot(&b)).iter().all(|v| v.abs() < 1e-14));
        let xb = band.solve(b.view()).unwrap();
        let xd = lu_solve(dense.view(), b.view()).unwrap();
        let err = (&xb - &xd).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9, "err {err}");
    }

    fn sorted_re(s: &Spectrum) -> Vec<f64> {
        let mut v: Vec<f64> = s.eigenvalues.iter().map(|c| c.re).collect();
        v.sort_by(f64::total_cmp);
        v
    }

    #[test]
    fn eig_general_examples() {
        let s = eig_general(diag(&[1.0, -2.0, 3.0]).view()).unwrap();
        assert_eq!(sorted_re(&s), vec![-2.0, 1.0, 3.0]);
        assert_eq!(s.max_real_part, 3.0);

        let s = eig_general(array![[0.0, 1.0], [-1.0, 0.0]].view()).unwrap();
        assert!(s.max_real_part.abs() < 1e-15);
        let mut ims: Vec<f64> = s.eigenvalues.iter().map(|c| c.im).collect();
        ims.sort_by(f64::total_cmp);
        assert!((ims[0] + 1.0).abs() < 1e-14 && (ims[1] - 1.0).abs() < 1e-14);

        // companion matrix of z^2 - 3z + 2
        let s = eig_general(array![[3.0, -2.0], [1.0, 0.0]].view()).unwrap();
        let re = sorted_re(&s);
        assert!((re[0] - 1.0).abs() < 1e-13 && (re[1] - 2.0).abs() < 1e-13);
    }

    #[test]
    fn eig_general_trace_and_eigenpairs() {
        for seed in 0..10 {
            let n = 5 + seed as usize * 3;
            let a = random_matrix(n, 100 + seed);
            let s = eig_general(a.view()).unwrap();
            assert_eq!(s.len(), n);
            let tr: f64 = a.diag().sum();
            let sum: Complex64 = s.eigenvalues.iter().sum();
            let anorm = frobenius_norm(a.view());
            assert!((sum.re - tr).abs() <= 1e-8 * anorm, "trace mismatch");
            assert!(sum.im.abs() <= 1e-8 * anorm);
            for &lam in &s.eigenvalues {
                let v = eigenvector(a.view(), lam).unwrap();
                assert!(eigenpair_residual(a.view(), lam, &v) <= 1e-8 * anorm);
            }
        }
    }

    #[test]
    fn eig_general_on_gram_matches_symmetric() {
        let a = random_matrix(12, 5);
        let ata = symmetrize(a.t().dot(&a).view());
        let s = eig_general(ata.view()).unwrap();
        let (sym, _) = eig_symmetric(ata.view()).unwrap();
        let re = sorted_re(&s);
        let scale = frobenius_norm(ata.view());
        for (x, y) in re.iter().zip(sym.iter()) {
            assert!(*x >= -1e-12 * scale);
            assert!((x - y).abs() <= 1e-8 * scale);
        }
    }

    #[test]
    fn eig_symmetric_examples() {
        let (vals, _) = eig_symmetric(Matrix::eye(4).view()).unwrap();
        assert!(vals.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        let (vals, vecs) = eig_symmetric(array![[2.0, 1.0], [1.0, 2.0]].view()).unwrap();
        assert!((vals[0] - 1.0).abs() < 1e-14 && (vals[1] - 3.0).abs() < 1e-14);
        let vtv = vecs.t().dot(&vecs);
        assert!((&vtv - &Matrix::eye(2)).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn eig_symmetric_reconstruction() {
        let a = random_matrix(30, 11);
        let s = symmetrize((&a + &a.t()).view());
        let (vals, v) = eig_symmetric(s.view()).unwrap();
        assert!(vals.windows(2).into_iter().all(|w| w[0] <= w[1]));
        let vtv = v.t().dot(&v);
        assert!((&vtv - &Matrix::eye(30)).iter().all(|x| x.abs() < 1e-10));
        let rec = v.dot(&diag(vals.as_slice().unwrap())).dot(&v.t());
        let err = frobenius_norm((&rec - &s).view());
        assert!(err < 1e-9 * frobenius_norm(s.view()), "err {err}");
    }

    #[test]
    fn eig_symmetric_rejects_asymmetric() {
        let a = array![[1.0, 2.0], [2.1, 1.0]];
        assert!(matches!(eig_symmetric(a.view()), Err(LinalgError::NotSymmetric { .. })));
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let a = array![[3.0, 0.0], [0.0, -4.0], [0.0, 0.0]];
        assert!((spectral_norm(a.view()).unwrap() - 4.0).abs() < 1e-12);
    }
}
