use ndarray::Array2;
use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// In-place reduction to upper Hessenberg form by Householder similarity.
pub(crate) fn hessenberg<T: Scalar>(a: &mut Array2<T>) {
    let n = a.nrows();
    if n < 3 {
        return;
    }
    let mut v = vec![T::zero(); n];
    for k in 0..n - 2 {
        let norm = (k + 1..n).map(|i| a[[i, k]] * a[[i, k]]).sum::<T>().sqrt();
        if norm == T::zero() {
            continue;
        }
        let x0 = a[[k + 1, k]];
        let alpha = if x0 >= T::zero() { -norm } else { norm };
        for i in k + 1..n {
            v[i] = a[[i, k]];
        }
        v[k + 1] -= alpha;
        let vnorm = (k + 1..n).map(|i| v[i] * v[i]).sum::<T>().sqrt();
        if vnorm == T::zero() {
            continue;
        }
        for vi in v.iter_mut().skip(k + 1) {
            *vi /= vnorm;
        }
        let two = T::of(2.0);
        // A <- H A
        for j in k..n {
            let dot: T = (k + 1..n).map(|i| v[i] * a[[i, j]]).sum();
            for i in k + 1..n {
                a[[i, j]] -= two * v[i] * dot;
            }
        }
        // A <- A H
        for i in 0..n {
            let dot: T = (k + 1..n).map(|j| a[[i, j]] * v[j]).sum();
            for j in k + 1..n {
                a[[i, j]] -= two * dot * v[j];
            }
        }
        a[[k + 1, k]] = alpha;
        for i in k + 2..n {
            a[[i, k]] = T::zero();
        }
    }
}

fn sign<T: Scalar>(a: T, b: T) -> T {
    if b >= T::zero() {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Eigenvalues of an upper Hessenberg matrix by the Francis double-shift QR
/// iteration with deflation (real arithmetic; complex pairs from 2x2 blocks).
pub(crate) fn hessenberg_qr<T: Scalar>(mut a: Array2<T>, tol: T) -> Result<Vec<Complex<T>>> {
    let n = a.nrows();
    let mut wr = vec![T::zero(); n];
    let mut wi = vec![T::zero(); n];
    if n == 0 {
        return Ok(Vec::new());
    }

    let mut anorm = T::zero();
    for i in 0..n {
        for j in i.saturating_sub(1)..n {
            anorm += a[[i, j]].abs();
        }
    }

    let max_iter = 100 * n;
    let mut total_iter = 0usize;
    let half = T::of(0.5);
    let mut shift_acc = T::zero();
    let mut nn = n as isize - 1;
    let (mut p, mut q, mut r): (T, T, T);
    let (mut x, mut y, mut z, mut w);

    while nn >= 0 {
        let mut its = 0;
        loop {
            let nu = nn as usize;
            // Find a small subdiagonal element.
            let mut l = nu;
            while l >= 1 {
                let mut s = a[[l - 1, l - 1]].abs() + a[[l, l]].abs();
                if s == T::zero() {
                    s = anorm;
                }
                let sub = a[[l, l - 1]].abs();
                if sub <= tol * s || sub <= T::epsilon() * anorm {
                    a[[l, l - 1]] = T::zero();
                    break;
                }
                l -= 1;
            }
            x = a[[nu, nu]];
            if l == nu {
                wr[nu] = x + shift_acc;
                wi[nu] = T::zero();
                nn -= 1;
                break;
            }
            y = a[[nu - 1, nu - 1]];
            w = a[[nu, nu - 1]] * a[[nu - 1, nu]];
            if l == nu - 1 {
                p = half * (y - x);
                q = p * p + w;
                z = q.abs().sqrt();
                x += shift_acc;
                if q >= T::zero() {
                    z = p + sign(z, p);
                    wr[nu - 1] = x + z;
                    wr[nu] = x + z;
                    if z != T::zero() {
                        wr[nu] = x - w / z;
                    }
                    wi[nu - 1] = T::zero();
                    wi[nu] = T::zero();
                } else {
                    wr[nu - 1] = x + p;
                    wr[nu] = x + p;
                    wi[nu - 1] = -z;
                    wi[nu] = z;
                }
                nn -= 2;
                break;
            }

            if total_iter >= max_iter {
                let residual = (1..=nu).map(|i| a[[i, i - 1]].abs()).sum::<T>();
                return Err(Error::NonConvergence {
                    residual: residual.to_f64_lossy(),
                });
            }
            if its == 10 || its == 20 {
                // exceptional shift
                shift_acc += x;
                for i in 0..=nu {
                    a[[i, i]] -= x;
                }
                let s = a[[nu, nu - 1]].abs() + a[[nu - 1, nu - 2]].abs();
                x = T::of(0.75) * s;
                y = x;
                w = T::of(-0.4375) * s * s;
            }
            its += 1;
            total_iter += 1;

            // Look for two consecutive small subdiagonal elements.
            let mut m = nu - 2;
            loop {
                z = a[[m, m]];
                let rr = x - z;
                let ss = y - z;
                p = (rr * ss - w) / a[[m + 1, m]] + a[[m, m + 1]];
                q = a[[m + 1, m + 1]] - z - rr - ss;
                r = a[[m + 2, m + 1]];
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = a[[m, m - 1]].abs() * (q.abs() + r.abs());
                let v = p.abs() * (a[[m - 1, m - 1]].abs() + z.abs() + a[[m + 1, m + 1]].abs());
                if u <= T::epsilon() * v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nu {
                a[[i, i - 2]] = T::zero();
                if i != m + 2 {
                    a[[i, i - 3]] = T::zero();
                }
            }

            // Double QR step on rows l..=nu, columns m..=nu.
            let mut k = m;
            while k < nu {
                if k != m {
                    p = a[[k, k - 1]];
                    q = a[[k + 1, k - 1]];
                    r = if k != nu - 1 { a[[k + 2, k - 1]] } else { T::zero() };
                    x = p.abs() + q.abs() + r.abs();
                    if x != T::zero() {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != T::zero() {
                    if k == m {
                        if l != m {
                            a[[k, k - 1]] = -a[[k, k - 1]];
                        }
                    } else {
                        a[[k, k - 1]] = -s * x;
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nu {
                        let mut pp = a[[k, j]] + q * a[[k + 1, j]];
                        if k != nu - 1 {
                            pp += r * a[[k + 2, j]];
                            a[[k + 2, j]] -= pp * z;
                        }
                        a[[k + 1, j]] -= pp * y;
                        a[[k, j]] -= pp * x;
                    }
                    let mmin = if nu < k + 3 { nu } else { k + 3 };
                    for i in l..=mmin {
                        let mut pp = x * a[[i, k]] + y * a[[i, k + 1]];
                        if k != nu - 1 {
                            pp += z * a[[i, k + 2]];
                            a[[i, k + 2]] -= pp * r;
                        }
                        a[[i, k + 1]] -= pp * q;
                        a[[i, k]] -= pp;
                    }
                }
                k += 1;
            }
        }
    }
    Ok(wr.into_iter().zip(wi).map(|(re, im)| Complex::new(re, im)).collect())
}
