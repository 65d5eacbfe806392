//! Slice-level numeric kernels shared by eager tensor ops and the autodiff
//! graph. All reductions run in ascending index order.

use super::Scalar;

/// `c[m,n] = a[m,k] · b[k,n]`. Each output is accumulated over `k` in
/// ascending order starting from zero, matching a naive triple loop exactly.
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in row.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
    c
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`.
pub fn matmul_nt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s = s + x * y;
            }
            c[i * n + j] = c[i * n + j] + s;
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv = *cv + av * bv;
            }
        }
    }
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Softmax along the middle axis of an `[outer, len, inner]` view.
pub fn softmax_strided<T: Scalar>(x: &[T], outer: usize, len: usize, inner: usize) -> Vec<T> {
    let mut y = vec![T::zero(); x.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |j: usize| o * len * inner + j * inner + i;
            let mut max = T::neg_infinity();
            for j in 0..len {
                max = max.max(x[at(j)]);
            }
            let mut sum = T::zero();
            for j in 0..len {
                let e = (x[at(j)] - max).exp();
                y[at(j)] = e;
                sum = sum + e;
            }
            for j in 0..len {
                y[at(j)] = y[at(j)] / sum;
            }
        }
    }
    y
}

/// Row-wise softmax over `[rows, cols]` where `allowed[r*cols + c] == false`
/// positions are excluded and receive exactly zero. Returns the index of the
/// first fully masked row as an error.
pub fn masked_softmax_rows<T: Scalar>(
    x: &[T],
    allowed: Option<&[bool]>,
    rows: usize,
    cols: usize,
) -> Result<Vec<T>, usize> {
    let mut y = vec![T::zero(); x.len()];
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let ok = |c: usize| allowed.is_none_or(|m| m[r * cols + c]);
        let mut max = T::neg_infinity();
        let mut any = false;
        for (c, &v) in xr.iter().enumerate() {
            if ok(c) {
                any = true;
                max = max.max(v);
            }
        }
        if !any {
            return Err(r);
        }
        let yr = &mut y[r * cols..(r + 1) * cols];
        let mut sum = T::zero();
        for c in 0..cols {
            if ok(c) {
                let e = (xr[c] - max).exp();
                yr[c] = e;
                sum = sum + e;
            }
        }
        for v in yr.iter_mut() {
            *v = *v / sum;
        }
    }
    Ok(y)
}

/// Per-row layer-norm statistics: returns (normalized values, inverse std per row).
/// A constant row normalizes to exactly zero.
pub fn layer_norm_rows<T: Scalar>(x: &[T], rows: usize, cols: usize, eps: f64) -> (Vec<T>, Vec<T>) {
    let mut xhat = vec![T::zero(); x.len()];
    let mut rstd = vec![T::zero(); rows];
    let n = T::of(cols as f64);
    for r in 0..rows {
        let xr = &x[r * cols..(r + 1) * cols];
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = (var + T::of(eps)).sqrt().recip();
        rstd[r] = inv;
        let constant = xr.iter().all(|&v| v == xr[0]);
        if !constant {
            for (o, &v) in xhat[r * cols..(r + 1) * cols].iter_mut().zip(xr) {
                *o = (v - mean) * inv;
            }
        }
    }
    (xhat, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let du = c * (T::one() + T::of(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_and_tn_match_plain_matmul() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // [2,3]
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // [3,4]
        let c = matmul(&a, &b, 2, 3, 4);
        let bt = transpose(&b, 3, 4);
        let mut c2 = vec![0.0; 8];
        matmul_nt_acc(&a, &bt, &mut c2, 2, 3, 4);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
        let at = transpose(&a, 2, 3);
        let mut c3 = vec![0.0; 8];
        matmul_tn_acc(&at, &b, &mut c3, 3, 2, 4);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.5, 0.0, 0.7, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn fully_masked_row_is_reported() {
        let x = [0.0f32; 4];
        let m = [true, true, false, false];
        assert_eq!(masked_softmax_rows(&x, Some(&m), 2, 2), Err(1));
    }
}
