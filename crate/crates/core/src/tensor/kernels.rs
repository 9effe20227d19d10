// Raw loops shared by the graph ops. Every loop has a fixed accumulation
// order, so results depend only on the inputs.

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,k] += a[m,n] · b[k,n]ᵀ`
pub(crate) fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            c[i * k + p] += dot(a_row, b_row);
        }
    }
}

/// `c[k,n] += a[m,k]ᵀ · b[m,n]`
pub(crate) fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four partial sums let the compiler vectorise while keeping a fixed order.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let j = i * 4;
        acc[0] += a[j] * b[j];
        acc[1] += a[j + 1] * b[j + 1];
        acc[2] += a[j + 2] * b[j + 2];
        acc[3] += a[j + 3] * b[j + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for j in chunks * 4..a.len() {
        s += a[j] * b[j];
    }
    s
}

/// Range of output positions `t` for which `t + shift` indexes into `0..len`.
fn tap_range(shift: isize, len: usize) -> (usize, usize) {
    let lo = (-shift).max(0) as usize;
    let hi = (len as isize - shift).clamp(0, len as isize) as usize;
    (lo.min(hi), hi)
}

/// Same-padded cross-correlation. `x: [cin, len]`, `w: [cout, cin, k]`.
pub(crate) fn conv1d_forward(
    x: &[f64],
    w: &[f64],
    b: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    len: usize,
) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * len];
    for o in 0..cout {
        let out_row = &mut out[o * len..(o + 1) * len];
        out_row.fill(b[o]);
        for c in 0..cin {
            let x_row = &x[c * len..(c + 1) * len];
            for j in 0..k {
                let wv = w[(o * cin + c) * k + j];
                if wv == 0.0 {
                    continue;
                }
                let shift = j as isize - pad;
                let (lo, hi) = tap_range(shift, len);
                let src = &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                for (ov, xv) in out_row[lo..hi].iter_mut().zip(src) {
                    *ov += wv * xv;
                }
            }
        }
    }
    out
}

/// Accumulates input, weight and bias gradients of [`conv1d_forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv1d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    cin: usize,
    cout: usize,
    k: usize,
    len: usize,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let pad = (k / 2) as isize;
    if let Some(db) = db {
        for o in 0..cout {
            db[o] += dy[o * len..(o + 1) * len].iter().sum::<f64>();
        }
    }
    if let Some(dw) = dw {
        for o in 0..cout {
            let dy_row = &dy[o * len..(o + 1) * len];
            for c in 0..cin {
                let x_row = &x[c * len..(c + 1) * len];
                for j in 0..k {
                    let shift = j as isize - pad;
                    let (lo, hi) = tap_range(shift, len);
                    let src = &x_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    dw[(o * cin + c) * k + j] += dot(&dy_row[lo..hi], src);
                }
            }
        }
    }
    if let Some(dx) = dx {
        for o in 0..cout {
            let dy_row = &dy[o * len..(o + 1) * len];
            for c in 0..cin {
                let dx_row = &mut dx[c * len..(c + 1) * len];
                for j in 0..k {
                    let wv = w[(o * cin + c) * k + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let shift = j as isize - pad;
                    let (lo, hi) = tap_range(shift, len);
                    let dst = &mut dx_row[(lo as isize + shift) as usize..(hi as isize + shift) as usize];
                    for (dv, gv) in dst.iter_mut().zip(&dy_row[lo..hi]) {
                        *dv += wv * gv;
                    }
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Splits `shape` around `axis` into (outer, axis_len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
