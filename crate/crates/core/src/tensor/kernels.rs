//! Raw slice kernels shared by the forward and backward passes.

use crate::error::{Error, Result};

/// `c (m×n) (+)= op(a) (m×k) · op(b) (k×n)`, all buffers row-major.
///
/// With `ta` set, `a` is stored as `k×m` and used transposed; likewise `tb`
/// for `b` stored as `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above bound every index the kernel touches by the
    // slice lengths for the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// How the right operand of a broadcasting binary op maps onto the left.
pub(crate) enum Broadcast {
    Same,
    Scalar,
    /// Right operand repeats with this period (it matches the trailing dims).
    Cyclic(usize),
    /// Explicit right-hand offset per left-hand element.
    Map(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn plan(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Self> {
        if lhs == rhs {
            return Ok(Broadcast::Same);
        }
        let err = || Error::shape(op, format!("cannot broadcast {rhs:?} onto {lhs:?}"));
        if rhs.len() > lhs.len() {
            return Err(err());
        }
        let lead = lhs.len() - rhs.len();
        for (i, &d) in rhs.iter().enumerate() {
            if d != 1 && d != lhs[lead + i] {
                return Err(err());
            }
        }
        let rnum: usize = rhs.iter().product();
        if rnum == 1 {
            return Ok(Broadcast::Scalar);
        }
        // Strip leading unit dims; if the rest matches lhs's trailing dims
        // the right operand is simply cyclic.
        let first = rhs.iter().position(|&d| d != 1).unwrap_or(rhs.len());
        let core = &rhs[first..];
        if lhs.ends_with(core) {
            return Ok(Broadcast::Cyclic(rnum));
        }
        let mut strides = vec![0usize; lhs.len()];
        let mut s = 1;
        for i in (0..rhs.len()).rev() {
            if rhs[i] != 1 {
                strides[lead + i] = s;
            }
            s *= rhs[i];
        }
        let total: usize = lhs.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; lhs.len()];
        let mut off = 0usize;
        for _ in 0..total {
            map.push(off);
            for ax in (0..lhs.len()).rev() {
                idx[ax] += 1;
                off += strides[ax];
                if idx[ax] < lhs[ax] {
                    break;
                }
                off -= strides[ax] * lhs[ax];
                idx[ax] = 0;
            }
        }
        Ok(Broadcast::Map(map))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Scalar => 0,
            Broadcast::Cyclic(p) => i % p,
            Broadcast::Map(m) => m[i],
        }
    }
}

/// Geometry of a 2-D convolution or pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Window {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Window {
    pub(crate) fn out_dims(&self, op: &'static str, h: usize, w: usize) -> Result<(usize, usize)> {
        if self.stride == 0 || h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            return Err(Error::shape(
                op,
                format!(
                    "window {}x{} stride {} pad {} does not fit input {h}x{w}",
                    self.kh, self.kw, self.stride, self.pad
                ),
            ));
        }
        Ok((
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        ))
    }
}

/// Unfold one image `[cin, h, w]` into `[cin*kh*kw, ho*wo]`.
pub(crate) fn im2col(
    x: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    col: &mut [f64],
) {
    let cols = ho * wo;
    for ci in 0..cin {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    let line = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &x[(ci * h + iy as usize) * w..(ci * h + iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulate columns back into an image.
pub(crate) fn col2im(
    col: &[f64],
    cin: usize,
    h: usize,
    w: usize,
    win: Window,
    ho: usize,
    wo: usize,
    x: &mut [f64],
) {
    let cols = ho * wo;
    for ci in 0..cin {
        for ky in 0..win.kh {
            for kx in 0..win.kw {
                let row = (ci * win.kh + ky) * win.kw + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..ho {
                    let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = (ci * h + iy as usize) * w;
                    for ox in 0..wo {
                        let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            x[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Number of in-bounds taps per output cell of an average pool.
pub(crate) fn pool_counts(h: usize, w: usize, win: Window, ho: usize, wo: usize) -> Vec<f64> {
    let mut counts = vec![0.0; ho * wo];
    for oy in 0..ho {
        for ox in 0..wo {
            let mut c = 0usize;
            for ky in 0..win.kh {
                let iy = (oy * win.stride + ky) as isize - win.pad as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..win.kw {
                    let ix = (ox * win.stride + kx) as isize - win.pad as isize;
                    if ix >= 0 && (ix as usize) < w {
                        c += 1;
                    }
                }
            }
            counts[oy * wo + ox] = c as f64;
        }
    }
    counts
}

/// Row-major strides of a shape.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copy `x` (with `shape`) into axis order `perm`.
pub(crate) fn permute(x: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<f64>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let total = x.len();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; out_shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(x[off]);
        for ax in (0..out_shape.len()).rev() {
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}
