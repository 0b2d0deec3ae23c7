//! Raw loops behind the differentiable primitives. Everything is row-major.

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[inline]
fn dot(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| a * b).sum()
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub(crate) fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `da[m,k] += g[m,n] * b[k,n]^T`
pub(crate) fn matmul_grad_a(g: &[f64], b: &[f64], da: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            da[i * k + p] += dot(g_row, &b[p * n..(p + 1) * n]);
        }
    }
}

/// `db[k,n] += a[m,k]^T * g[m,n]`
pub(crate) fn matmul_grad_b(a: &[f64], g: &[f64], db: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av != 0.0 {
                axpy(av, g_row, &mut db[p * n..(p + 1) * n]);
            }
        }
    }
}

/// Geometry of a 2-D convolution over NCHW input with OIHW weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Output column range `[lo, hi)` whose input column `ow*stride + kj - pad_left`
    /// lands inside the image.
    #[inline]
    fn col_range(&self, kj: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = kj as isize - self.pad_left as isize;
        // need 0 <= ow*s + off <= w-1
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi_num = self.w as isize - 1 - off;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num / s + 1).min(self.ow as isize);
        (lo as usize, hi.max(lo) as usize)
    }

    #[inline]
    fn input_row(&self, oh: usize, ki: usize) -> Option<usize> {
        let ih = (oh * self.stride + ki) as isize - self.pad_top as isize;
        (ih >= 0 && (ih as usize) < self.h).then_some(ih as usize)
    }

    #[inline]
    fn input_col(&self, ow: usize, kj: usize) -> usize {
        ow * self.stride + kj - self.pad_left
    }
}

/// Unfolds one image `[C, H, W]` into `[C*KH*KW, OH*OW]`, zero outside.
fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let x_plane = &x[c * plane_in..(c + 1) * plane_in];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &mut cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                row.fill(0.0);
                let (lo, hi) = g.col_range(kj);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.oh {
                    let Some(ih) = g.input_row(oh, ki) else { continue };
                    let x_row = &x_plane[ih * g.w..(ih + 1) * g.w];
                    let out = &mut row[oh * g.ow..(oh + 1) * g.ow];
                    if g.stride == 1 {
                        let start = g.input_col(lo, kj);
                        out[lo..hi].copy_from_slice(&x_row[start..start + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            out[ow] = x_row[g.input_col(ow, kj)];
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto the image.
fn col2im_add(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let plane_in = g.h * g.w;
    let p = g.oh * g.ow;
    for c in 0..g.c {
        let dx_plane = &mut dx[c * plane_in..(c + 1) * plane_in];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = &cols[((c * g.kh + ki) * g.kw + kj) * p..][..p];
                let (lo, hi) = g.col_range(kj);
                if lo >= hi {
                    continue;
                }
                for oh in 0..g.oh {
                    let Some(ih) = g.input_row(oh, ki) else { continue };
                    let dx_row = &mut dx_plane[ih * g.w..(ih + 1) * g.w];
                    let src = &row[oh * g.ow..(oh + 1) * g.ow];
                    if g.stride == 1 {
                        let start = g.input_col(lo, kj);
                        axpy(1.0, &src[lo..hi], &mut dx_row[start..start + (hi - lo)]);
                    } else {
                        for ow in lo..hi {
                            dx_row[g.input_col(ow, kj)] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &ConvGeom) -> Vec<f64> {
    let p = g.oh * g.ow;
    let ckk = g.c * g.kh * g.kw;
    let plane_in = g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * p];
    let mut cols = vec![0.0; ckk * p];
    for n in 0..g.n {
        im2col(&x[n * g.c * plane_in..(n + 1) * g.c * plane_in], g, &mut cols);
        let out_n = &mut out[n * g.o * p..(n + 1) * g.o * p];
        if let Some(b) = bias {
            for (o, plane) in out_n.chunks_mut(p).enumerate() {
                plane.fill(b[o]);
            }
        }
        matmul_acc(wt, &cols, out_n, g.o, ckk, p);
    }
    out
}

/// Accumulates the gradients of a convolution into the provided buffers.
pub(crate) fn conv2d_backward(
    grad_out: &[f64],
    x: &[f64],
    wt: &[f64],
    g: &ConvGeom,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
    mut db: Option<&mut [f64]>,
) {
    let p = g.oh * g.ow;
    let ckk = g.c * g.kh * g.kw;
    let plane_in = g.h * g.w;
    let mut cols = vec![0.0; ckk * p];
    let mut dcols = vec![0.0; ckk * p];
    for n in 0..g.n {
        let g_n = &grad_out[n * g.o * p..(n + 1) * g.o * p];
        if let Some(db) = db.as_deref_mut() {
            for (o, plane) in g_n.chunks(p).enumerate() {
                db[o] += plane.iter().sum::<f64>();
            }
        }
        if let Some(dw) = dw.as_deref_mut() {
            im2col(&x[n * g.c * plane_in..(n + 1) * g.c * plane_in], g, &mut cols);
            matmul_grad_a(g_n, &cols, dw, g.o, ckk, p);
        }
        if let Some(dx) = dx.as_deref_mut() {
            dcols.fill(0.0);
            matmul_grad_b(wt, g_n, &mut dcols, g.o, ckk, p);
            col2im_add(&dcols, g, &mut dx[n * g.c * plane_in..(n + 1) * g.c * plane_in]);
        }
    }
}

pub(crate) fn avg_pool_forward(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; planes * oh * ow];
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let mut acc = 0.0;
                for di in 0..k {
                    let row = p * h * w + (i * k + di) * w + j * k;
                    acc += x[row..row + k].iter().sum::<f64>();
                }
                out[(p * oh + i) * ow + j] = acc * scale;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &[f64], dx: &mut [f64], planes: usize, h: usize, w: usize, k: usize) {
    let (oh, ow) = (h / k, w / k);
    let scale = 1.0 / (k * k) as f64;
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let gv = g[(p * oh + i) * ow + j] * scale;
                for di in 0..k {
                    let row = p * h * w + (i * k + di) * w + j * k;
                    dx[row..row + k].iter_mut().for_each(|v| *v += gv);
                }
            }
        }
    }
}

/// Flat index of the maximum of each pooling window; the first maximum wins ties.
pub(crate) fn max_pool_argmax(x: &[f64], planes: usize, h: usize, w: usize, k: usize) -> Vec<usize> {
    let (oh, ow) = (h / k, w / k);
    let mut idx = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        for i in 0..oh {
            for j in 0..ow {
                let mut best = p * h * w + i * k * w + j * k;
                for di in 0..k {
                    for dj in 0..k {
                        let at = p * h * w + (i * k + di) * w + j * k + dj;
                        if x[at] > x[best] {
                            best = at;
                        }
                    }
                }
                idx.push(best);
            }
        }
    }
    idx
}
