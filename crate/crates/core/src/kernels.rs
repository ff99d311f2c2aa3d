//! Raw numeric kernels shared by the tape operations and the tape-free
//! inference path, so both produce bit-identical values.

use crate::tensor::Scalar;

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let out = &mut c[i * n..(i + 1) * n];
        for (p, &av) in row.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                out[j] += av * brow[j];
            }
        }
    }
    c
}

/// y[m] = A[m,k] @ x[k]
pub fn matvec<T: Scalar>(a: &[T], x: &[T], m: usize, k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); m];
    for i in 0..m {
        let row = &a[i * k..(i + 1) * k];
        let mut acc = T::zero();
        for (av, xv) in row.iter().zip(x.iter()) {
            acc += *av * *xv;
        }
        y[i] = acc;
    }
    y
}

/// 2-D convolution, stride 1, zero padding.
///
/// input  [ci, h, w], weight [co, ci, kh, kw], bias [co] (optional),
/// output [co, h + 2p - kh + 1, w + 2p - kw + 1].
#[allow(clippy::too_many_arguments)]
pub fn conv2d<T: Scalar>(
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    kh: usize,
    kw: usize,
    bias: Option<&[T]>,
    pad: usize,
) -> Vec<T> {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut out = vec![T::zero(); co * oh * ow];
    for oc in 0..co {
        let b = bias.map_or(T::zero(), |bs| bs[oc]);
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = b;
                for ic in 0..ci {
                    let plane = &input[ic * h * w..(ic + 1) * h * w];
                    let kern = &weight[(oc * ci + ic) * kh * kw..(oc * ci + ic + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let irow = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let krow = &kern[ky * kw..(ky + 1) * kw];
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            acc += irow[ix as usize] * krow[kx];
                        }
                    }
                }
                out[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    out
}

/// Gradients of [`conv2d`] w.r.t. input, weight and bias.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g_out: &[T],
    input: &[T],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[T],
    co: usize,
    kh: usize,
    kw: usize,
    pad: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let oh = h + 2 * pad + 1 - kh;
    let ow = w + 2 * pad + 1 - kw;
    let mut g_in = vec![T::zero(); ci * h * w];
    let mut g_w = vec![T::zero(); co * ci * kh * kw];
    let mut g_b = vec![T::zero(); co];
    for oc in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = g_out[(oc * oh + oy) * ow + ox];
                g_b[oc] += g;
                for ic in 0..ci {
                    let plane_off = ic * h * w;
                    let kern_off = (oc * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let iy = (oy + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let ii = plane_off + iy as usize * w + ix as usize;
                            let ki = kern_off + ky * kw + kx;
                            g_in[ii] += weight[ki] * g;
                            g_w[ki] += input[ii] * g;
                        }
                    }
                }
            }
        }
    }
    (g_in, g_w, g_b)
}

/// 2x2 average pooling on [c, h, w] (h and w even) -> [c, h/2, w/2].
pub fn avg_pool2x2<T: Scalar>(input: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let oh = h / 2;
    let ow = w / 2;
    let quarter = T::from_f64(0.25);
    let mut out = vec![T::zero(); c * oh * ow];
    for ch in 0..c {
        let plane = &input[ch * h * w..(ch + 1) * h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let y = oy * 2;
                let x = ox * 2;
                let s = plane[y * w + x]
                    + plane[y * w + x + 1]
                    + plane[(y + 1) * w + x]
                    + plane[(y + 1) * w + x + 1];
                out[(ch * oh + oy) * ow + ox] = s * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2x2_backward<T: Scalar>(g_out: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let oh = h / 2;
    let ow = w / 2;
    let quarter = T::from_f64(0.25);
    let mut g_in = vec![T::zero(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = g_out[(ch * oh + oy) * ow + ox] * quarter;
                let y = oy * 2;
                let x = ox * 2;
                let plane = &mut g_in[ch * h * w..(ch + 1) * h * w];
                plane[y * w + x] += g;
                plane[y * w + x + 1] += g;
                plane[(y + 1) * w + x] += g;
                plane[(y + 1) * w + x + 1] += g;
            }
        }
    }
    g_in
}

/// Numerically stable softmax over the last axis; `cols` is the axis length.
pub fn softmax_rows<T: Scalar>(input: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        let row = &input[r * cols..(r + 1) * cols];
        let mut max = row[0];
        for &v in row.iter().skip(1) {
            if v > max {
                max = v;
            }
        }
        let mut sum = T::zero();
        let orow = &mut out[r * cols..(r + 1) * cols];
        for (o, &v) in orow.iter_mut().zip(row.iter()) {
            let e = (v - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o = *o / sum;
        }
    }
    out
}
