use super::Real;

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-(o log s(z) + (1-o) log(1-s(z)))` without forming `s(z)`.
pub(crate) fn bce_with_logits<T: Real>(z: T, o: T) -> T {
    z.max(T::zero()) - z * o + (-z.abs()).exp().ln_1p()
}

/// Flat indices of the two components of 2-vector `i` in a
/// `(groups, 2, inner)` layout.
pub(crate) fn pair_index(i: usize, inner: usize) -> (usize, usize) {
    let (g, s) = (i / inner, i % inner);
    let a = g * 2 * inner + s;
    (a, a + inner)
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new(c: usize, h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        Self {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            ho,
            wo,
        }
    }

    pub fn ckk(&self) -> usize {
        self.c * self.kh * self.kw
    }

    /// Input pixel read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn src(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky) as isize - self.pad as isize;
        let x = (ox * self.stride + kx) as isize - self.pad as isize;
        (y >= 0 && x >= 0 && (y as usize) < self.h && (x as usize) < self.w).then_some((y as usize, x as usize))
    }
}

/// Column matrix of shape `(C*kh*kw, Ho*Wo)`.
pub(crate) fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let hw = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.ckk() * hw];
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            cols[row + oy * g.wo + ox] = x[(c * g.h + y) * g.w + xx];
                        }
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im_add<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let hw = g.ho * g.wo;
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * hw;
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some((y, xx)) = g.src(oy, ox, ky, kx) {
                            let t = &mut dx[(c * g.h + y) * g.w + xx];
                            *t = *t + cols[row + oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn chw_to_hwc<T: Real>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ch in 0..c {
        for p in 0..h * w {
            out[p * c + ch] = x[ch * h * w + p];
        }
    }
    out
}

/// Integer corner and fractional part of one continuous coordinate.
#[inline]
fn split<T: Real>(v: T) -> (isize, T) {
    let f = v.floor();
    (f.as_f64() as isize, v - f)
}

#[inline]
fn inside(r: isize, c: isize, h: usize, w: usize) -> Option<usize> {
    (r >= 0 && c >= 0 && (r as usize) < h && (c as usize) < w).then(|| r as usize * w + c as usize)
}

/// The four `(pixel, weight)` corners of a sample; out-of-map corners are `None`.
#[inline]
fn corners<T: Real>(cx: T, cy: T, h: usize, w: usize) -> [(Option<usize>, T); 4] {
    let (x0, fx) = split(cx);
    let (y0, fy) = split(cy);
    let one = T::one();
    [
        (inside(y0, x0, h, w), (one - fx) * (one - fy)),
        (inside(y0, x0 + 1, h, w), fx * (one - fy)),
        (inside(y0 + 1, x0, h, w), (one - fx) * fy),
        (inside(y0 + 1, x0 + 1, h, w), fx * fy),
    ]
}

pub(crate) fn bilinear_forward<T: Real>(hwc: &[T], c: usize, h: usize, w: usize, coords: &[T]) -> Vec<T> {
    let n = coords.len() / 2;
    let mut out = vec![T::zero(); n * c];
    for (i, o) in out.chunks_exact_mut(c.max(1)).take(n).enumerate() {
        for (p, wt) in corners(coords[2 * i], coords[2 * i + 1], h, w) {
            if let Some(p) = p {
                for (ov, fv) in o.iter_mut().zip(&hwc[p * c..(p + 1) * c]) {
                    *ov = *ov + wt * *fv;
                }
            }
        }
    }
    out
}

pub(crate) fn bilinear_backward_fmap<T: Real>(c: usize, h: usize, w: usize, coords: &[T], gout: &[T], dfmap: &mut [T]) {
    let n = coords.len() / 2;
    let hw = h * w;
    for i in 0..n {
        let go = &gout[i * c..(i + 1) * c];
        for (p, wt) in corners(coords[2 * i], coords[2 * i + 1], h, w) {
            if let Some(p) = p {
                for (ch, g) in go.iter().enumerate() {
                    dfmap[ch * hw + p] = dfmap[ch * hw + p] + wt * *g;
                }
            }
        }
    }
}

pub(crate) fn bilinear_backward_coords<T: Real>(
    hwc: &[T],
    c: usize,
    h: usize,
    w: usize,
    coords: &[T],
    gout: &[T],
    dcoords: &mut [T],
) {
    let n = coords.len() / 2;
    let zero = vec![T::zero(); c];
    let one = T::one();
    for i in 0..n {
        let (x0, fx) = split(coords[2 * i]);
        let (y0, fy) = split(coords[2 * i + 1]);
        let at = |r: isize, col: isize| match inside(r, col, h, w) {
            Some(p) => &hwc[p * c..(p + 1) * c],
            None => &zero[..],
        };
        let (f00, f01, f10, f11) = (at(y0, x0), at(y0, x0 + 1), at(y0 + 1, x0), at(y0 + 1, x0 + 1));
        let go = &gout[i * c..(i + 1) * c];
        let (mut gx, mut gy) = (T::zero(), T::zero());
        for ch in 0..c {
            let dx = (one - fy) * (f01[ch] - f00[ch]) + fy * (f11[ch] - f10[ch]);
            let dy = (one - fx) * (f10[ch] - f00[ch]) + fx * (f11[ch] - f01[ch]);
            gx = gx + go[ch] * dx;
            gy = gy + go[ch] * dy;
        }
        dcoords[2 * i] = dcoords[2 * i] + gx;
        dcoords[2 * i + 1] = dcoords[2 * i + 1] + gy;
    }
}
