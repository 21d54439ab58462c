//! Eigenvalues of a general real matrix: balancing, Householder reduction
//! to upper Hessenberg form, then Francis double-shift QR.

use rustfft::num_complex::Complex64;

use super::mat::Mat;
use crate::error::{Error, Result};

/// Eigenvalues of an `m x m` real matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenSet {
    pub values: Vec<Complex64>,
    pub source_dim: usize,
}

impl EigenSet {
    pub fn max_real(&self) -> f64 {
        self.values.iter().map(|z| z.re).fold(f64::NEG_INFINITY, f64::max)
    }
}

const RADIX: f64 = 2.0;

/// 1-based square work array, so the classic loop bounds port directly.
struct Work {
    n: usize,
    a: Vec<f64>,
}

impl Work {
    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.a[i * (self.n + 1) + j]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * (self.n + 1) + j] = v;
    }

    #[inline]
    fn sub(&mut self, i: usize, j: usize, v: f64) {
        self.a[i * (self.n + 1) + j] -= v;
    }
}

fn balance(w: &mut Work) {
    let n = w.n;
    let sqrdx = RADIX * RADIX;
    let mut done = false;
    while !done {
        done = true;
        for i in 1..=n {
            let mut r = 0.0;
            let mut c = 0.0;
            for j in 1..=n {
                if j != i {
                    c += w.get(j, i).abs();
                    r += w.get(i, j).abs();
                }
            }
            if c != 0.0 && r != 0.0 {
                let mut g = r / RADIX;
                let mut f = 1.0;
                let s = c + r;
                while c < g {
                    f *= RADIX;
                    c *= sqrdx;
                }
                g = r * RADIX;
                while c > g {
                    f /= RADIX;
                    c /= sqrdx;
                }
                if (c + r) / f < 0.95 * s {
                    done = false;
                    let g = 1.0 / f;
                    for j in 1..=n {
                        let v = w.get(i, j) * g;
                        w.set(i, j, v);
                    }
                    for j in 1..=n {
                        let v = w.get(j, i) * f;
                        w.set(j, i, v);
                    }
                }
            }
        }
    }
}

fn hessenberg(w: &mut Work) {
    let n = w.n;
    let mut ort = vec![0.0; n + 1];
    for m in 2..n {
        let scale: f64 = (m..=n).map(|i| w.get(i, m - 1).abs()).sum();
        if scale == 0.0 {
            continue;
        }
        let mut h = 0.0;
        for i in (m..=n).rev() {
            ort[i] = w.get(i, m - 1) / scale;
            h += ort[i] * ort[i];
        }
        let mut g = h.sqrt();
        if ort[m] > 0.0 {
            g = -g;
        }
        h -= ort[m] * g;
        ort[m] -= g;
        for j in m..=n {
            let f: f64 = (m..=n).rev().map(|i| ort[i] * w.get(i, j)).sum::<f64>() / h;
            for i in m..=n {
                w.sub(i, j, f * ort[i]);
            }
        }
        for i in 1..=n {
            let f: f64 = (m..=n).rev().map(|j| ort[j] * w.get(i, j)).sum::<f64>() / h;
            for j in m..=n {
                w.sub(i, j, f * ort[j]);
            }
        }
        w.set(m, m - 1, scale * g);
        for i in m + 1..=n {
            w.set(i, m - 1, 0.0);
        }
    }
}

#[inline]
fn sign(a: f64, b: f64) -> f64 {
    if b >= 0.0 {
        a.abs()
    } else {
        -a.abs()
    }
}

/// Deflation test: a subdiagonal entry is negligible relative to its
/// diagonal neighbours at unit roundoff.
#[inline]
fn negligible(sub: f64, scale: f64) -> bool {
    sub.abs() <= f64::EPSILON * scale
}

fn francis_qr(w: &mut Work, max_iterations: usize) -> Result<Vec<Complex64>> {
    let n = w.n;
    let mut wr = vec![0.0; n + 1];
    let mut wi = vec![0.0; n + 1];
    let mut anorm = 0.0;
    for i in 1..=n {
        for j in (i.saturating_sub(1)).max(1)..=n {
            anorm += w.get(i, j).abs();
        }
    }
    let mut total = 0usize;
    let mut nn = n;
    let mut shift = 0.0;
    while nn >= 1 {
        let mut its = 0;
        loop {
            let mut l = nn;
            while l >= 2 {
                let mut s = w.get(l - 1, l - 1).abs() + w.get(l, l).abs();
                if s == 0.0 {
                    s = anorm;
                }
                if negligible(w.get(l, l - 1), s) {
                    w.set(l, l - 1, 0.0);
                    break;
                }
                l -= 1;
            }
            let mut x = w.get(nn, nn);
            if l == nn {
                wr[nn] = x + shift;
                wi[nn] = 0.0;
                nn -= 1;
                break;
            }
            let mut y = w.get(nn - 1, nn - 1);
            let mut ww = w.get(nn, nn - 1) * w.get(nn - 1, nn);
            if l == nn - 1 {
                let p = 0.5 * (y - x);
                let q = p * p + ww;
                let mut z = q.abs().sqrt();
                x += shift;
                if q >= 0.0 {
                    z = p + sign(z, p);
                    wr[nn - 1] = x + z;
                    wr[nn] = x + z;
                    if z != 0.0 {
                        wr[nn] = x - ww / z;
                    }
                    wi[nn - 1] = 0.0;
                    wi[nn] = 0.0;
                } else {
                    wr[nn - 1] = x + p;
                    wr[nn] = x + p;
                    wi[nn - 1] = -z;
                    wi[nn] = z;
                }
                nn -= 2;
                break;
            }

            if total >= max_iterations {
                return Err(Error::NoConvergence { iterations: total });
            }
            if its == 10 || its == 20 {
                // exceptional shift
                shift += x;
                for i in 1..=nn {
                    w.sub(i, i, x);
                }
                let s = w.get(nn, nn - 1).abs() + w.get(nn - 1, nn - 2).abs();
                x = 0.75 * s;
                y = x;
                ww = -0.4375 * s * s;
            }
            its += 1;
            total += 1;

            let (mut p, mut q, mut r);
            let mut m = nn - 2;
            loop {
                let z = w.get(m, m);
                let rr = x - z;
                let s = y - z;
                p = (rr * s - ww) / w.get(m + 1, m) + w.get(m, m + 1);
                q = w.get(m + 1, m + 1) - z - rr - s;
                r = w.get(m + 2, m + 1);
                let s = p.abs() + q.abs() + r.abs();
                p /= s;
                q /= s;
                r /= s;
                if m == l {
                    break;
                }
                let u = w.get(m, m - 1).abs() * (q.abs() + r.abs());
                let v = p.abs() * (w.get(m - 1, m - 1).abs() + z.abs() + w.get(m + 1, m + 1).abs());
                if u <= f64::EPSILON * v {
                    break;
                }
                m -= 1;
            }
            for i in m + 2..=nn {
                w.set(i, i - 2, 0.0);
                if i != m + 2 {
                    w.set(i, i - 3, 0.0);
                }
            }
            let mut k = m;
            while k < nn {
                if k != m {
                    p = w.get(k, k - 1);
                    q = w.get(k + 1, k - 1);
                    r = if k != nn - 1 { w.get(k + 2, k - 1) } else { 0.0 };
                    x = p.abs() + q.abs() + r.abs();
                    if x != 0.0 {
                        p /= x;
                        q /= x;
                        r /= x;
                    }
                }
                let s = sign((p * p + q * q + r * r).sqrt(), p);
                if s != 0.0 {
                    if k == m {
                        if l != m {
                            let v = -w.get(k, k - 1);
                            w.set(k, k - 1, v);
                        }
                    } else {
                        w.set(k, k - 1, -s * x);
                    }
                    p += s;
                    x = p / s;
                    y = q / s;
                    let z = r / s;
                    q /= p;
                    r /= p;
                    for j in k..=nn {
                        let mut pp = w.get(k, j) + q * w.get(k + 1, j);
                        if k != nn - 1 {
                            pp += r * w.get(k + 2, j);
                            w.sub(k + 2, j, pp * z);
                        }
                        w.sub(k + 1, j, pp * y);
                        w.sub(k, j, pp * x);
                    }
                    let mmin = nn.min(k + 3);
                    for i in l..=mmin {
                        let mut pp = x * w.get(i, k) + y * w.get(i, k + 1);
                        if k != nn - 1 {
                            pp += z * w.get(i, k + 2);
                            w.sub(i, k + 2, pp * r);
                        }
                        w.sub(i, k + 1, pp * q);
                        w.sub(i, k, pp);
                    }
                }
                k += 1;
            }
        }
    }
    Ok((1..=n).map(|i| Complex64::new(wr[i], wi[i])).collect())
}

pub fn eig(a: &Mat) -> Result<EigenSet> {
    if !a.is_square() {
        return Err(Error::Shape(format!(
            "eig needs a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    if n == 0 {
        return Ok(EigenSet {
            values: vec![],
            source_dim: 0,
        });
    }
    let mut w = Work {
        n,
        a: vec![0.0; (n + 1) * (n + 1)],
    };
    for i in 0..n {
        for j in 0..n {
            w.set(i + 1, j + 1, a[(i, j)]);
        }
    }
    balance(&mut w);
    hessenberg(&mut w);
    let values = francis_qr(&mut w, 100 * n)?;
    Ok(EigenSet {
        values,
        source_dim: n,
    })
}
