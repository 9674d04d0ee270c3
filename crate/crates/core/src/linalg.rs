//! Dense complex linear algebra used by the subspace baselines and the bound.
//!
//! Matrices are `ndarray::Array2<Complex<T>>`. Nothing here is tuned for
//! large sizes; array apertures stay below a few hundred elements.

use ndarray::{Array1, Array2};
use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{Error, Result};
use crate::scalar::Real;

pub type C<T> = Complex<T>;

pub fn conj_transpose<T: Real>(a: &Array2<C<T>>) -> Array2<C<T>> {
    a.t().mapv(|z| z.conj())
}

pub fn identity<T: Real>(n: usize) -> Array2<C<T>> {
    Array2::from_shape_fn((n, n), |(i, j)| if i == j { C::one() } else { C::zero() })
}

pub fn frobenius_norm<T: Real>(a: &Array2<C<T>>) -> T {
    a.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
}

fn ensure_square<T>(a: &Array2<T>) -> Result<usize> {
    let (r, c) = a.dim();
    if r != c {
        return Err(Error::Dimension { expected: r, got: c });
    }
    Ok(r)
}

/// Eigen-decomposition of a Hermitian matrix by cyclic complex Jacobi sweeps.
///
/// Returns eigenvalues in ascending order and the matching unit-norm
/// eigenvectors as columns. Only the Hermitian part of `a` is used.
pub fn hermitian_eigh<T: Real>(a: &Array2<C<T>>) -> Result<(Array1<T>, Array2<C<T>>)> {
    let n = ensure_square(a)?;
    let mut a = (a + &conj_transpose(a)).mapv(|z| z * T::of(0.5));
    let mut v = identity::<T>(n);
    let eps = T::epsilon();

    for _sweep in 0..100 {
        let mut off = T::zero();
        let mut total = T::zero();
        for i in 0..n {
            for j in 0..n {
                let m = a[[i, j]].norm_sqr();
                total += m;
                if i != j {
                    off += m;
                }
            }
        }
        if off <= eps * eps * total || off == T::zero() {
            break;
        }
        for p in 0..n.saturating_sub(1) {
            for q in p + 1..n {
                let apq = a[[p, q]];
                let mag = apq.norm();
                if mag == T::zero() {
                    continue;
                }
                let app = a[[p, p]].re;
                let aqq = a[[q, q]].re;
                if mag <= eps * eps * (app.abs() + aqq.abs()) {
                    a[[p, q]] = C::zero();
                    a[[q, p]] = C::zero();
                    continue;
                }
                let phase_conj = (apq / mag).conj();
                let theta = (aqq - app) / (mag + mag);
                let sign = if theta < T::zero() { -T::one() } else { T::one() };
                let t = sign / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                let u_pp = C::new(c, T::zero());
                let u_pq = C::new(s, T::zero());
                let u_qp = phase_conj * (-s);
                let u_qq = phase_conj * c;

                for r in 0..n {
                    let x = a[[r, p]];
                    let y = a[[r, q]];
                    a[[r, p]] = x * u_pp + y * u_qp;
                    a[[r, q]] = x * u_pq + y * u_qq;
                }
                for r in 0..n {
                    let x = a[[p, r]];
                    let y = a[[q, r]];
                    a[[p, r]] = u_pp.conj() * x + u_qp.conj() * y;
                    a[[q, r]] = u_pq.conj() * x + u_qq.conj() * y;
                }
                a[[p, q]] = C::zero();
                a[[q, p]] = C::zero();
                a[[p, p]].im = T::zero();
                a[[q, q]].im = T::zero();
                for r in 0..n {
                    let x = v[[r, p]];
                    let y = v[[r, q]];
                    v[[r, p]] = x * u_pp + y * u_qp;
                    v[[r, q]] = x * u_pq + y * u_qq;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[[i, i]].re.partial_cmp(&a[[j, j]].re).unwrap_or(std::cmp::Ordering::Equal));
    let values = Array1::from_iter(order.iter().map(|&i| a[[i, i]].re));
    let mut vectors = Array2::zeros((n, n));
    for (dst, &src) in order.iter().enumerate() {
        vectors.column_mut(dst).assign(&v.column(src));
    }
    Ok((values, vectors))
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse<T: Real>(a: &Array2<C<T>>) -> Result<Array2<C<T>>> {
    let n = ensure_square(a)?;
    let mut m = a.clone();
    let mut inv = identity::<T>(n);
    let scale = a.iter().map(|z| z.norm()).fold(T::zero(), T::max);
    let tiny = scale * T::epsilon() * T::of_usize(n.max(1));
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[[i, col]].norm().partial_cmp(&m[[j, col]].norm()).unwrap_or(std::cmp::Ordering::Equal))
            .expect("non-empty range");
        if m[[pivot, col]].norm() <= tiny {
            return Err(Error::Numerical(format!("singular matrix (pivot column {col})")));
        }
        if pivot != col {
            for k in 0..n {
                m.swap([pivot, k], [col, k]);
                inv.swap([pivot, k], [col, k]);
            }
        }
        let p: C<T> = m[[col, col]].inv();
        for k in 0..n {
            m[[col, k]] = m[[col, k]] * p;
            inv[[col, k]] = inv[[col, k]] * p;
        }
        for r in 0..n {
            if r == col {
                continue;
            }
            let f = m[[r, col]];
            if f.is_zero() {
                continue;
            }
            for k in 0..n {
                let mk = m[[col, k]];
                let ik = inv[[col, k]];
                m[[r, k]] = m[[r, k]] - f * mk;
                inv[[r, k]] = inv[[r, k]] - f * ik;
            }
        }
    }
    Ok(inv)
}

/// Roots of `c[0] + c[1] z + ... + c[n] z^n` as eigenvalues of the balanced
/// companion matrix.
pub fn poly_roots<T: Real>(coeffs: &[C<T>]) -> Result<Vec<C<T>>> {
    let mut hi = coeffs.len();
    while hi > 0 && coeffs[hi - 1].is_zero() {
        hi -= 1;
    }
    if hi == 0 {
        return Err(Error::Numerical("zero polynomial".into()));
    }
    let coeffs = &coeffs[..hi];
    let degree = coeffs.len() - 1;
    if degree == 0 {
        return Ok(Vec::new());
    }
    let lead = coeffs[degree];
    let mut h = Array2::<C<T>>::zeros((degree, degree));
    for j in 0..degree {
        h[[0, j]] = -coeffs[degree - 1 - j] / lead;
    }
    for i in 1..degree {
        h[[i, i - 1]] = C::one();
    }
    balance(&mut h);
    hessenberg_eigenvalues(h)
}

fn norm1<T: Real>(z: C<T>) -> T {
    z.re.abs() + z.im.abs()
}

/// Parlett-Reinsch balancing by powers of two; preserves Hessenberg form.
fn balance<T: Real>(h: &mut Array2<C<T>>) {
    let n = h.nrows();
    let radix = T::of(2.0);
    let sqrdx = radix * radix;
    let mut done = false;
    while !done {
        done = true;
        for i in 0..n {
            let mut r = T::zero();
            let mut c = T::zero();
            for j in 0..n {
                if j != i {
                    c += norm1(h[[j, i]]);
                    r += norm1(h[[i, j]]);
                }
            }
            if c != T::zero() && r != T::zero() {
                let mut g = r / radix;
                let mut f = T::one();
                let s = c + r;
                while c < g {
                    f *= radix;
                    c *= sqrdx;
                }
                g = r * radix;
                while c > g {
                    f /= radix;
                    c /= sqrdx;
                }
                if (c + r) / f < T::of(0.95) * s {
                    done = false;
                    let g = T::one() / f;
                    for j in 0..n {
                        h[[i, j]] = h[[i, j]] * g;
                    }
                    for j in 0..n {
                        h[[j, i]] = h[[j, i]] * f;
                    }
                }
            }
        }
    }
}

/// Eigenvalues of an upper-Hessenberg complex matrix by single-shift QR with
/// Wilkinson shifts and Givens rotations.
pub fn hessenberg_eigenvalues<T: Real>(mut h: Array2<C<T>>) -> Result<Vec<C<T>>> {
    let n = ensure_square(&h)?;
    let mut eig = vec![C::zero(); n];
    if n == 0 {
        return Ok(eig);
    }
    let eps = T::epsilon();
    let max_iter = 60 * n.max(1);
    let mut hi = n - 1;
    let mut iter = 0usize;
    let mut total_iter = 0usize;
    let mut rot: Vec<(C<T>, C<T>)> = Vec::with_capacity(n);

    loop {
        if hi == 0 {
            eig[0] = h[[0, 0]];
            break;
        }
        let mut lo = hi;
        while lo > 0 {
            let s = norm1(h[[lo - 1, lo - 1]]) + norm1(h[[lo, lo]]);
            if norm1(h[[lo, lo - 1]]) <= eps * s {
                h[[lo, lo - 1]] = C::zero();
                break;
            }
            lo -= 1;
        }
        if lo == hi {
            eig[hi] = h[[hi, hi]];
            hi -= 1;
            iter = 0;
            continue;
        }
        iter += 1;
        total_iter += 1;
        if total_iter > max_iter * n {
            return Err(Error::Numerical("QR iteration did not converge".into()));
        }

        let a = h[[hi - 1, hi - 1]];
        let b = h[[hi - 1, hi]];
        let c = h[[hi, hi - 1]];
        let d = h[[hi, hi]];
        let mu = if iter % 11 == 0 {
            // exceptional shift
            d + C::new(norm1(c) * T::of(1.5), norm1(c) * T::of(0.5))
        } else {
            let half = (a - d) * T::of(0.5);
            let disc = (half * half + b * c).sqrt();
            let m1 = (a + d) * T::of(0.5) + disc;
            let m2 = (a + d) * T::of(0.5) - disc;
            if (m1 - d).norm() <= (m2 - d).norm() {
                m1
            } else {
                m2
            }
        };

        for k in lo..=hi {
            h[[k, k]] = h[[k, k]] - mu;
        }
        rot.clear();
        for k in lo..hi {
            let x = h[[k, k]];
            let y = h[[k + 1, k]];
            let r = (x.norm_sqr() + y.norm_sqr()).sqrt();
            let (cs, sn) = if r == T::zero() {
                (C::one(), C::zero())
            } else {
                (x / r, y / r)
            };
            for j in k..=hi {
                let u = h[[k, j]];
                let w = h[[k + 1, j]];
                h[[k, j]] = cs.conj() * u + sn.conj() * w;
                h[[k + 1, j]] = -sn * u + cs * w;
            }
            rot.push((cs, sn));
        }
        for (idx, &(cs, sn)) in rot.iter().enumerate() {
            let k = lo + idx;
            let top = (k + 2).min(hi);
            for i in lo..=top {
                let u = h[[i, k]];
                let w = h[[i, k + 1]];
                h[[i, k]] = u * cs + w * sn;
                h[[i, k + 1]] = -(u * sn.conj()) + w * cs.conj();
            }
        }
        for k in lo..=hi {
            h[[k, k]] = h[[k, k]] + mu;
        }
    }
    Ok(eig)
}
