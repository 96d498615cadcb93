use crate::error::{Error, Result};
use crate::numerics::tape::Var;
use crate::numerics::tensor::{gemm, MatRef, Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Default for Conv2dSpec {
    fn default() -> Self {
        Conv2dSpec { stride: 1, padding: 0 }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<S: Scalar>(x: &[S], g: &Geometry, col: &mut [S]) {
    let plane = g.oh * g.ow;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        drow.iter_mut().for_each(|v| *v = S::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize { S::zero() } else { src[ix as usize] };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im<S: Scalar>(col: &[S], g: &Geometry, dx: &mut [S]) {
    let plane = g.oh * g.ow;
    let mut row = 0;
    for c in 0..g.c {
        let xc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    /// 2-D cross-correlation: `x [B, Ci, H, W]`, `w [Co, Ci, kh, kw]`,
    /// optional `bias [Co]`.
    pub fn conv2d(self, w: Var<'t, S>, bias: Option<Var<'t, S>>, spec: Conv2dSpec) -> Result<Var<'t, S>> {
        let (xv, wv) = (self.value(), w.value());
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        if spec.stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let (b, ci, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if h + 2 * spec.padding < kh || wd + 2 * spec.padding < kw {
            return Err(Error::shape("conv2d", &xs, &ws));
        }
        let oh = (h + 2 * spec.padding - kh) / spec.stride + 1;
        let ow = (wd + 2 * spec.padding - kw) / spec.stride + 1;
        let g = Geometry { c: ci, h, w: wd, kh, kw, stride: spec.stride, pad: spec.padding, oh, ow };
        let bv = match bias {
            Some(bvar) => {
                let v = bvar.value();
                if v.shape() != [co] {
                    return Err(Error::shape("conv2d bias", v.shape(), &[co]));
                }
                Some(v)
            }
            None => None,
        };
        let krows = ci * kh * kw;
        let plane = oh * ow;
        let in_plane = ci * h * wd;
        let mut out = Tensor::zeros(&[b, co, oh, ow]);
        let mut col = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); krows * plane] };
        for n in 0..b {
            let xn = &xv.data()[n * in_plane..(n + 1) * in_plane];
            let cols: &[S] = if g.is_pointwise() {
                xn
            } else {
                im2col(xn, &g, &mut col);
                &col
            };
            let on = &mut out.data_mut()[n * co * plane..(n + 1) * co * plane];
            gemm(MatRef::new(wv.data(), co, krows), MatRef::new(cols, krows, plane), on, false);
            if let Some(bv) = &bv {
                for (c, chunk) in on.chunks_mut(plane).enumerate() {
                    let bc = bv.data()[c];
                    chunk.iter_mut().for_each(|v| *v += bc);
                }
            }
        }
        let has_bias = bv.is_some();
        let mut parents = vec![self, w];
        if let Some(bvar) = bias {
            parents.push(bvar);
        }
        self.tape().record("conv2d", out, &parents, move |gout| {
            let gd = gout.data();
            let mut dx = Tensor::zeros(&xs);
            let mut dw = Tensor::zeros(&ws);
            let mut col = if g.is_pointwise() { Vec::new() } else { vec![S::zero(); krows * plane] };
            let mut dcol = vec![S::zero(); krows * plane];
            for n in 0..b {
                let xn = &xv.data()[n * in_plane..(n + 1) * in_plane];
                let gn = &gd[n * co * plane..(n + 1) * co * plane];
                let cols: &[S] = if g.is_pointwise() {
                    xn
                } else {
                    im2col(xn, &g, &mut col);
                    &col
                };
                gemm(MatRef::new(gn, co, plane), MatRef::new(cols, krows, plane).t(), dw.data_mut(), n > 0);
                let dxn = &mut dx.data_mut()[n * in_plane..(n + 1) * in_plane];
                if g.is_pointwise() {
                    gemm(MatRef::new(wv.data(), co, krows).t(), MatRef::new(gn, co, plane), dxn, false);
                } else {
                    gemm(MatRef::new(wv.data(), co, krows).t(), MatRef::new(gn, co, plane), &mut dcol, false);
                    col2im(&dcol, &g, dxn);
                }
            }
            let mut grads = vec![Some(dx), Some(dw)];
            if has_bias {
                let mut db = Tensor::zeros(&[co]);
                for n in 0..b {
                    for c in 0..co {
                        let s: S = gd[(n * co + c) * plane..(n * co + c + 1) * plane].iter().copied().sum();
                        db.data_mut()[c] += s;
                    }
                }
                grads.push(Some(db));
            }
            grads
        })
    }

    /// Nearest-neighbour 2x upsampling of `[B, C, H, W]`.
    pub fn upsample_nearest2x(self) -> Result<Var<'t, S>> {
        let xv = self.value();
        let xs = xv.shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::shape("upsample_nearest2x", &xs, &[0, 0, 0, 0]));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let mut out = Tensor::zeros(&[xs[0], xs[1], 2 * h, 2 * w]);
        {
            let (src, dst) = (xv.data(), out.data_mut());
            for p in 0..bc {
                for y in 0..2 * h {
                    let srow = &src[(p * h + y / 2) * w..(p * h + y / 2 + 1) * w];
                    let drow = &mut dst[(p * 2 * h + y) * 2 * w..(p * 2 * h + y + 1) * 2 * w];
                    for (x, d) in drow.iter_mut().enumerate() {
                        *d = srow[x / 2];
                    }
                }
            }
        }
        self.tape().record("upsample_nearest2x", out, &[self], move |g| {
            let mut dx = Tensor::zeros(&xs);
            let (gd, dd) = (g.data(), dx.data_mut());
            for p in 0..bc {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        dd[(p * h + y / 2) * w + x / 2] += gd[(p * 2 * h + y) * 2 * w + x];
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// 2x2 average pooling with stride 2; H and W must be even.
    pub fn avgpool2x(self) -> Result<Var<'t, S>> {
        let xv = self.value();
        let xs = xv.shape().to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::invalid(format!("avgpool2x needs [B, C, even H, even W], got {xs:?}")));
        }
        let (bc, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let quarter = S::from_f64(0.25);
        let mut out = Tensor::zeros(&[xs[0], xs[1], oh, ow]);
        {
            let (src, dst) = (xv.data(), out.data_mut());
            for p in 0..bc {
                for y in 0..oh {
                    for x in 0..ow {
                        let i = (p * h + 2 * y) * w + 2 * x;
                        dst[(p * oh + y) * ow + x] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                    }
                }
            }
        }
        self.tape().record("avgpool2x", out, &[self], move |g| {
            let mut dx = Tensor::zeros(&xs);
            let (gd, dd) = (g.data(), dx.data_mut());
            for p in 0..bc {
                for y in 0..oh {
                    for x in 0..ow {
                        let v = gd[(p * oh + y) * ow + x] * quarter;
                        let i = (p * h + 2 * y) * w + 2 * x;
                        dd[i] += v;
                        dd[i + 1] += v;
                        dd[i + w] += v;
                        dd[i + w + 1] += v;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}
