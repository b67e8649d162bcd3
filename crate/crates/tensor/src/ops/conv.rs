use crate::element::{gemm, Float};
use crate::error::{dim_err, shape_err, Result};
use crate::graph::Var;
use crate::tensor::Tensor;

/// Stride, zero padding and channel grouping of a 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl Conv2dSpec {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            groups: 1,
        }
    }

    pub fn depthwise(stride: usize, padding: usize, channels: usize) -> Self {
        Self {
            stride,
            padding,
            groups: channels,
        }
    }
}

#[derive(Clone, Copy)]
struct Geometry {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
    groups: usize,
}

impl Geometry {
    fn cin_g(&self) -> usize {
        self.cin / self.groups
    }
    fn cout_g(&self) -> usize {
        self.cout / self.groups
    }

    /// Input pixel read by output `(oy, ox)` at kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ky).checked_sub(self.pad)?;
        let x = (ox * self.stride + kx).checked_sub(self.pad)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

fn im2col<T: Float>(geo: &Geometry, x: &[T], b: usize, group: usize, cols: &mut [T]) {
    let (cin_g, hw, howo) = (geo.cin_g(), geo.h * geo.w, geo.ho * geo.wo);
    for ci in 0..cin_g {
        let plane = &x[(b * geo.cin + group * cin_g + ci) * hw..][..hw];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &mut cols[((ci * geo.kh + ky) * geo.kw + kx) * howo..][..howo];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        row[oy * geo.wo + ox] = match geo.source(oy, ox, ky, kx) {
                            Some((y, xx)) => plane[y * geo.w + xx],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Float>(geo: &Geometry, cols: &[T], b: usize, group: usize, dx: &mut [T]) {
    let (cin_g, hw, howo) = (geo.cin_g(), geo.h * geo.w, geo.ho * geo.wo);
    for ci in 0..cin_g {
        let plane = &mut dx[(b * geo.cin + group * cin_g + ci) * hw..][..hw];
        for ky in 0..geo.kh {
            for kx in 0..geo.kw {
                let row = &cols[((ci * geo.kh + ky) * geo.kw + kx) * howo..][..howo];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                            plane[y * geo.w + xx] += row[oy * geo.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Float>(geo: &Geometry, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let howo = geo.ho * geo.wo;
    let mut out = vec![T::zero(); geo.batch * geo.cout * howo];
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let ksz = geo.kh * geo.kw;
    if cin_g == 1 {
        // depthwise (optionally with a channel multiplier)
        for b in 0..geo.batch {
            for o in 0..geo.cout {
                let c = o / cout_g;
                let plane = &x[(b * geo.cin + c) * geo.h * geo.w..][..geo.h * geo.w];
                let kernel = &w[o * ksz..][..ksz];
                let dst = &mut out[(b * geo.cout + o) * howo..][..howo];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let mut acc = T::zero();
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                    acc += kernel[ky * geo.kw + kx] * plane[y * geo.w + xx];
                                }
                            }
                        }
                        dst[oy * geo.wo + ox] = acc;
                    }
                }
            }
        }
    } else {
        let krows = cin_g * ksz;
        let mut cols = vec![T::zero(); krows * howo];
        for b in 0..geo.batch {
            for gi in 0..geo.groups {
                im2col(geo, x, b, gi, &mut cols);
                let wg = &w[gi * cout_g * krows..][..cout_g * krows];
                let dst = &mut out[(b * geo.cout + gi * cout_g) * howo..][..cout_g * howo];
                gemm(cout_g, krows, howo, wg, false, &cols, false, T::zero(), dst);
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..geo.batch {
            for o in 0..geo.cout {
                let bo = bias[o];
                for v in &mut out[(b * geo.cout + o) * howo..][..howo] {
                    *v += bo;
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, dbias)`.
fn conv_backward<T: Float>(geo: &Geometry, x: &[T], w: &[T], g: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let howo = geo.ho * geo.wo;
    let (cin_g, cout_g) = (geo.cin_g(), geo.cout_g());
    let ksz = geo.kh * geo.kw;
    let mut dx = vec![T::zero(); x.len()];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); geo.cout];
    for b in 0..geo.batch {
        for o in 0..geo.cout {
            db[o] += g[(b * geo.cout + o) * howo..][..howo].iter().copied().sum::<T>();
        }
    }
    if cin_g == 1 {
        for b in 0..geo.batch {
            for o in 0..geo.cout {
                let c = o / cout_g;
                let base = (b * geo.cin + c) * geo.h * geo.w;
                let gp = &g[(b * geo.cout + o) * howo..][..howo];
                for oy in 0..geo.ho {
                    for ox in 0..geo.wo {
                        let gv = gp[oy * geo.wo + ox];
                        for ky in 0..geo.kh {
                            for kx in 0..geo.kw {
                                if let Some((y, xx)) = geo.source(oy, ox, ky, kx) {
                                    let k = o * ksz + ky * geo.kw + kx;
                                    let xi = base + y * geo.w + xx;
                                    dw[k] += gv * x[xi];
                                    dx[xi] += gv * w[k];
                                }
                            }
                        }
                    }
                }
            }
        }
    } else {
        let krows = cin_g * ksz;
        let mut cols = vec![T::zero(); krows * howo];
        let mut dcols = vec![T::zero(); krows * howo];
        for b in 0..geo.batch {
            for gi in 0..geo.groups {
                im2col(geo, x, b, gi, &mut cols);
                let wg = &w[gi * cout_g * krows..][..cout_g * krows];
                let gg = &g[(b * geo.cout + gi * cout_g) * howo..][..cout_g * howo];
                // dW_g += G cols^T
                gemm(cout_g, howo, krows, gg, false, &cols, true, T::one(), &mut dw[gi * cout_g * krows..][..cout_g * krows]);
                // dcols = W_g^T G
                gemm(krows, cout_g, howo, wg, true, gg, false, T::zero(), &mut dcols);
                col2im(geo, &dcols, b, gi, &mut dx);
            }
        }
    }
    (dx, dw, db)
}

impl<'g, T: Float> Var<'g, T> {
    /// 2-D cross-correlation of `[B, C, H, W]` input with `[O, C/groups, kh, kw]`
    /// weights. Output spatial size is `(in + 2 pad - k) / stride + 1`.
    pub fn conv2d(self, weight: Var<'g, T>, bias: Option<Var<'g, T>>, spec: Conv2dSpec) -> Result<Var<'g, T>> {
        let xv = self.value();
        let wv = weight.value();
        let (xs, ws) = (xv.shape().to_vec(), wv.shape().to_vec());
        if xs.len() != 4 || ws.len() != 4 {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        let Conv2dSpec { stride, padding, groups } = spec;
        if stride == 0 || groups == 0 {
            return Err(dim_err("conv2d", "stride and groups must be positive"));
        }
        let (batch, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, cin_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if cin % groups != 0 || cout % groups != 0 || cin_g != cin / groups {
            return Err(shape_err("conv2d", &xs, &ws));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(dim_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * padding, w + 2 * padding),
            ));
        }
        let geo = Geometry {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            pad: padding,
            groups,
        };
        let bv = match bias {
            Some(b) => {
                let v = b.value();
                if v.shape() != [cout] {
                    return Err(shape_err("conv2d bias", v.shape(), &[cout]));
                }
                Some(v)
            }
            None => None,
        };
        let out = conv_forward(&geo, xv.data(), wv.data(), bv.as_ref().map(|b| b.data()));
        let value = Tensor::new(&[batch, cout, geo.ho, geo.wo], out)?;
        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.graph().record(value, &parents, move |g| {
            let (dx, dw, db) = conv_backward(&geo, xv.data(), wv.data(), g.data());
            let mut grads = vec![
                Some(Tensor::new(xv.shape(), dx).expect("input shape")),
                Some(Tensor::new(wv.shape(), dw).expect("weight shape")),
            ];
            if has_bias {
                grads.push(Some(Tensor::new(&[geo.cout], db).expect("bias shape")));
            }
            grads
        }))
    }

    /// Sub-pixel rearrangement `[..., C r^2, H, W] -> [..., C, H r, W r]`.
    pub fn pixel_shuffle(self, r: usize) -> Result<Var<'g, T>> {
        let value = pixel_shuffle_tensor(&self.value(), r)?;
        Ok(self.graph().record(value, &[self], move |g| {
            vec![Some(pixel_unshuffle_tensor(g, r).expect("inverse of a valid shuffle"))]
        }))
    }

    /// Inverse of [`Var::pixel_shuffle`].
    pub fn pixel_unshuffle(self, r: usize) -> Result<Var<'g, T>> {
        let value = pixel_unshuffle_tensor(&self.value(), r)?;
        Ok(self.graph().record(value, &[self], move |g| {
            vec![Some(pixel_shuffle_tensor(g, r).expect("inverse of a valid unshuffle"))]
        }))
    }
}

fn split_chw(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize)> {
    if shape.len() < 3 {
        return Err(dim_err(op, format!("need rank >= 3, got {shape:?}")));
    }
    let n = shape.len();
    let lead: usize = shape[..n - 3].iter().product();
    Ok((lead, shape[n - 3], shape[n - 2], shape[n - 1]))
}

pub fn pixel_shuffle_tensor<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (lead, cin, h, w) = split_chw("pixel_shuffle", x.shape())?;
    if r == 0 || cin % (r * r) != 0 {
        return Err(dim_err(
            "pixel_shuffle",
            format!("{cin} channels not divisible by r^2 = {}", r * r),
        ));
    }
    let c = cin / (r * r);
    let (ho, wo) = (h * r, w * r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for l in 0..lead {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &src[((l * cin) + ch * r * r + i * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            out[((l * c + ch) * ho + y * r + i) * wo + xx * r + j] = plane[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 3] = c;
    shape[n - 2] = ho;
    shape[n - 1] = wo;
    Tensor::new(&shape, out)
}

pub fn pixel_unshuffle_tensor<T: Float>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    let (lead, c, ho, wo) = split_chw("pixel_unshuffle", x.shape())?;
    if r == 0 || ho % r != 0 || wo % r != 0 {
        return Err(dim_err(
            "pixel_unshuffle",
            format!("spatial size {ho}x{wo} not divisible by {r}"),
        ));
    }
    let (h, w, cout) = (ho / r, wo / r, c * r * r);
    let src = x.data();
    let mut out = vec![T::zero(); src.len()];
    for l in 0..lead {
        for ch in 0..c {
            for i in 0..r {
                for j in 0..r {
                    let plane = &mut out[((l * cout) + ch * r * r + i * r + j) * h * w..][..h * w];
                    for y in 0..h {
                        for xx in 0..w {
                            plane[y * w + xx] = src[((l * c + ch) * ho + y * r + i) * wo + xx * r + j];
                        }
                    }
                }
            }
        }
    }
    let mut shape = x.shape().to_vec();
    let n = shape.len();
    shape[n - 3] = cout;
    shape[n - 2] = h;
    shape[n - 1] = w;
    Tensor::new(&shape, out)
}
