//! Loop kernels behind the tape ops. All buffers are row-major slices; the
//! tape validates shapes before calling in here.

use crate::tensor::Element;

/// `out = floor((l_in + 2*padding - k) / stride) + 1`, or `None` when empty.
pub fn conv1d_out_len(l_in: usize, k: usize, stride: usize, padding: usize) -> Option<usize> {
    let span = l_in + 2 * padding;
    if span < k {
        return None;
    }
    Some((span - k) / stride + 1)
}

/// Cross-correlation (no kernel flip): for each output channel `o`,
/// `out[o,t] = bias[o] + sum_{i,j} w[o,i,j] * x[base(o)+i, t*stride + j - padding]`
/// with zero padding outside `[0, l_in)`.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_forward<T: Element>(
    x: &[T],
    c_in: usize,
    l_in: usize,
    w: &[T],
    c_out: usize,
    k: usize,
    bias: Option<&[T]>,
    stride: usize,
    padding: usize,
    groups: usize,
    out: &mut [T],
    l_out: usize,
) {
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    for o in 0..c_out {
        let row = &mut out[o * l_out..(o + 1) * l_out];
        let b = bias.map_or(T::zero(), |b| b[o]);
        for v in row.iter_mut() {
            *v = b;
        }
        let base = (o / cout_g) * cin_g;
        for ig in 0..cin_g {
            let xrow = &x[(base + ig) * l_in..(base + ig + 1) * l_in];
            for j in 0..k {
                let wv = w[(o * cin_g + ig) * k + j];
                if wv == T::zero() {
                    continue;
                }
                if stride == 1 {
                    // x index = t + j - padding; restrict t to the valid range
                    // and run a contiguous accumulate.
                    let t0 = padding.saturating_sub(j);
                    let t1 = (l_in + padding - j).min(l_out);
                    if t0 >= t1 {
                        continue;
                    }
                    let x0 = t0 + j - padding;
                    for (rv, xv) in row[t0..t1].iter_mut().zip(&xrow[x0..x0 + (t1 - t0)]) {
                        *rv = *rv + wv * *xv;
                    }
                } else {
                    for (t, rv) in row.iter_mut().enumerate() {
                        let u = t * stride + j;
                        if u >= padding && u - padding < l_in {
                            *rv = *rv + wv * xrow[u - padding];
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates conv1d input/weight/bias gradients given the output gradient.
#[allow(clippy::too_many_arguments)]
pub fn conv1d_backward<T: Element>(
    x: &[T],
    c_in: usize,
    l_in: usize,
    w: &[T],
    c_out: usize,
    k: usize,
    stride: usize,
    padding: usize,
    groups: usize,
    grad_out: &[T],
    l_out: usize,
    grad_x: Option<&mut [T]>,
    grad_w: Option<&mut [T]>,
    grad_b: Option<&mut [T]>,
) {
    let cin_g = c_in / groups;
    let cout_g = c_out / groups;
    if let Some(gb) = grad_b {
        for o in 0..c_out {
            let mut s = T::zero();
            for &g in &grad_out[o * l_out..(o + 1) * l_out] {
                s = s + g;
            }
            gb[o] = gb[o] + s;
        }
    }
    if let Some(gw) = grad_w {
        for o in 0..c_out {
            let gr = &grad_out[o * l_out..(o + 1) * l_out];
            let base = (o / cout_g) * cin_g;
            for ig in 0..cin_g {
                let xrow = &x[(base + ig) * l_in..(base + ig + 1) * l_in];
                for j in 0..k {
                    let mut s = T::zero();
                    if stride == 1 {
                        let t0 = padding.saturating_sub(j);
                        let t1 = (l_in + padding - j).min(l_out);
                        if t0 < t1 {
                            let x0 = t0 + j - padding;
                            for (gv, xv) in gr[t0..t1].iter().zip(&xrow[x0..x0 + (t1 - t0)]) {
                                s = s + *gv * *xv;
                            }
                        }
                    } else {
                        for (t, gv) in gr.iter().enumerate() {
                            let u = t * stride + j;
                            if u >= padding && u - padding < l_in {
                                s = s + *gv * xrow[u - padding];
                            }
                        }
                    }
                    let wi = (o * cin_g + ig) * k + j;
                    gw[wi] = gw[wi] + s;
                }
            }
        }
    }
    if let Some(gx) = grad_x {
        for o in 0..c_out {
            let gr = &grad_out[o * l_out..(o + 1) * l_out];
            let base = (o / cout_g) * cin_g;
            for ig in 0..cin_g {
                let xg = &mut gx[(base + ig) * l_in..(base + ig + 1) * l_in];
                for j in 0..k {
                    let wv = w[(o * cin_g + ig) * k + j];
                    if wv == T::zero() {
                        continue;
                    }
                    if stride == 1 {
                        let t0 = padding.saturating_sub(j);
                        let t1 = (l_in + padding - j).min(l_out);
                        if t0 >= t1 {
                            continue;
                        }
                        let x0 = t0 + j - padding;
                        for (xv, gv) in xg[x0..x0 + (t1 - t0)].iter_mut().zip(&gr[t0..t1]) {
                            *xv = *xv + wv * *gv;
                        }
                    } else {
                        for (t, gv) in gr.iter().enumerate() {
                            let u = t * stride + j;
                            if u >= padding && u - padding < l_in {
                                xg[u - padding] = xg[u - padding] + wv * *gv;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `c[m,n] = sum_k a[m,k] * b[k,n]`, accumulating into `out` (caller zeroes).
pub fn matmul_acc<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (ov, bv) in orow.iter_mut().zip(brow) {
                *ov = *ov + av * *bv;
            }
        }
    }
}

pub fn transpose<T: Element>(a: &[T], rows: usize, cols: usize, out: &mut [T]) {
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
}

/// Row softmax with max-subtraction. Entries equal to `T::SENTINEL` are
/// treated as masked-out and map to exactly zero. A row that is entirely
/// sentinel is reported through the return value.
pub fn softmax_rows<T: Element>(x: &[T], rows: usize, cols: usize, out: &mut [T]) -> Result<(), usize> {
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        let oi = &mut out[r * cols..(r + 1) * cols];
        let mut max = T::SENTINEL;
        let mut any = false;
        for &v in xi.iter() {
            if v != T::SENTINEL {
                any = true;
                if v > max {
                    max = v;
                }
            }
        }
        if !any {
            return Err(r);
        }
        let mut sum = T::zero();
        for (o, &v) in oi.iter_mut().zip(xi) {
            if v == T::SENTINEL {
                *o = T::zero();
            } else {
                let e = (v - max).exp();
                *o = e;
                sum = sum + e;
            }
        }
        for o in oi.iter_mut() {
            *o = *o / sum;
        }
    }
    Ok(())
}

/// Softmax Jacobian-vector product per row: `dx_j = s_j * (g_j - sum_k g_k s_k)`.
pub fn softmax_rows_backward<T: Element>(s: &[T], grad_out: &[T], rows: usize, cols: usize, grad_in: &mut [T]) {
    for r in 0..rows {
        let si = &s[r * cols..(r + 1) * cols];
        let gi = &grad_out[r * cols..(r + 1) * cols];
        let mut dot = T::zero();
        for (sv, gv) in si.iter().zip(gi) {
            dot = dot + *sv * *gv;
        }
        let out = &mut grad_in[r * cols..(r + 1) * cols];
        for ((o, sv), gv) in out.iter_mut().zip(si).zip(gi) {
            *o = *o + *sv * (*gv - dot);
        }
    }
}

/// Per-row top-k selection. Returns the keep mask; ties keep the lower column
/// index (stable sort on descending value).
pub fn row_topk_mask<T: Element>(x: &[T], rows: usize, cols: usize, k: usize) -> Vec<bool> {
    let mut keep = vec![false; rows * cols];
    let mut order: Vec<usize> = Vec::with_capacity(cols);
    for r in 0..rows {
        let xi = &x[r * cols..(r + 1) * cols];
        order.clear();
        order.extend(0..cols);
        order.sort_by(|&a, &b| xi[b].partial_cmp(&xi[a]).unwrap_or(std::cmp::Ordering::Equal));
        for &c in order.iter().take(k.min(cols)) {
            keep[r * cols + c] = true;
        }
    }
    keep
}

pub fn gelu<T: Element>(x: T) -> T {
    // tanh approximation: 0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<T: Element>(x: T) -> T {
    let c = T::from_f64(0.797_884_560_802_865_4);
    let a = T::from_f64(0.044715);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    let dinner = c * (T::one() + three * a * x * x);
    half * (T::one() + t) + half * x * sech2 * dinner
}

pub fn sigmoid<T: Element>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}
