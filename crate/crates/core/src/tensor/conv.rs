use super::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Weights and geometry of a zero-padded 2-D convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvParams<T = f32> {
    /// `(out_ch, in_ch / groups, kh, kw)`.
    pub weight: Tensor4<T>,
    pub bias: Option<Vec<T>>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl<T: Scalar> ConvParams<T> {
    pub fn new(
        weight: Tensor4<T>,
        bias: Option<Vec<T>>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArgument(
                "convolution stride and groups must be positive".into(),
            ));
        }
        if !weight.n().is_multiple_of(groups) {
            return Err(Error::shape(format!(
                "out_ch {} is not divisible by groups {groups}",
                weight.n()
            )));
        }
        if weight.h() != weight.w() || !(1..=4).contains(&weight.h()) {
            return Err(Error::shape(format!(
                "kernel must be square with side 1..=4, got {}x{}",
                weight.h(),
                weight.w()
            )));
        }
        if let Some(b) = &bias {
            if b.len() != weight.n() {
                return Err(Error::shape(format!(
                    "bias length {} does not match out_ch {}",
                    b.len(),
                    weight.n()
                )));
            }
        }
        Ok(Self {
            weight,
            bias,
            stride,
            padding,
            groups,
        })
    }

    /// Dense `1x1` convolution from `in_ch` to `out_ch` channels.
    pub fn pointwise(weight: Tensor4<T>, bias: Option<Vec<T>>) -> Result<Self> {
        Self::new(weight, bias, 1, 0, 1)
    }

    pub fn out_ch(&self) -> usize {
        self.weight.n()
    }

    pub fn in_ch(&self) -> usize {
        self.weight.c() * self.groups
    }

    pub fn kernel(&self) -> usize {
        self.weight.h()
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let k = self.kernel();
        let (ph, pw) = (h + 2 * self.padding, w + 2 * self.padding);
        if ph < k {
            return Err(Error::shape(format!(
                "height {h} with padding {} is smaller than kernel {k}",
                self.padding
            )));
        }
        if pw < k {
            return Err(Error::shape(format!(
                "width {w} with padding {} is smaller than kernel {k}",
                self.padding
            )));
        }
        Ok(((ph - k) / self.stride + 1, (pw - k) / self.stride + 1))
    }

    pub fn is_pointwise(&self) -> bool {
        self.kernel() == 1 && self.stride == 1 && self.padding == 0
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1 && self.weight.c() == 1 && self.out_ch() == self.groups
    }

    pub fn cast<U: Scalar>(&self) -> ConvParams<U> {
        ConvParams {
            weight: self.weight.cast(),
            bias: self
                .bias
                .as_ref()
                .map(|b| b.iter().map(|&v| U::from(v).unwrap()).collect()),
            stride: self.stride,
            padding: self.padding,
            groups: self.groups,
        }
    }
}

/// Zero-padded grouped 2-D convolution.
pub fn conv2d<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>) -> Result<Tensor4<T>> {
    if x.c() != p.in_ch() {
        return Err(Error::shape(format!(
            "input channel dimension c = {} does not match convolution in_ch = {}",
            x.c(),
            p.in_ch()
        )));
    }
    let (oh, ow) = p.output_hw(x.h(), x.w())?;
    let mut out = Tensor4::zeros(x.n(), p.out_ch(), oh, ow);
    if p.is_depthwise() {
        depthwise(x, p, &mut out);
    } else {
        grouped_gemm(x, p, &mut out);
    }
    if let Some(bias) = &p.bias {
        let plane = oh * ow;
        for n in 0..x.n() {
            let sample = out.sample_mut(n);
            for (co, &b) in bias.iter().enumerate() {
                for v in &mut sample[co * plane..(co + 1) * plane] {
                    *v += b;
                }
            }
        }
    }
    Ok(out)
}

fn grouped_gemm<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, out: &mut Tensor4<T>) {
    let (h, w) = (x.h(), x.w());
    let (oh, ow) = (out.h(), out.w());
    let k = p.kernel();
    let cin_g = p.weight.c();
    let cout_g = p.out_ch() / p.groups;
    let rows = cin_g * k * k;
    let cols = oh * ow;
    let mut buf = if p.is_pointwise() {
        Vec::new()
    } else {
        vec![T::zero(); rows * cols]
    };
    let weight = p.weight.data();
    for n in 0..x.n() {
        let xs = x.sample(n);
        let os = out.sample_mut(n);
        for g in 0..p.groups {
            let xg = &xs[g * cin_g * h * w..(g + 1) * cin_g * h * w];
            let b: &[T] = if p.is_pointwise() {
                xg
            } else {
                im2col(xg, cin_g, h, w, k, p.stride, p.padding, oh, ow, &mut buf);
                &buf
            };
            let wg = &weight[g * cout_g * rows..(g + 1) * cout_g * rows];
            let og = &mut os[g * cout_g * cols..(g + 1) * cout_g * cols];
            super::gemm(cout_g, cols, rows, wg, rows, b, cols, og, cols, false);
        }
    }
}

fn depthwise<T: Scalar>(x: &Tensor4<T>, p: &ConvParams<T>, out: &mut Tensor4<T>) {
    let (h, w) = (x.h() as isize, x.w() as isize);
    let (oh, ow) = (out.h(), out.w());
    let k = p.kernel();
    let pad = p.padding as isize;
    let s = p.stride as isize;
    let c = x.c();
    for n in 0..x.n() {
        for ch in 0..c {
            let kern = &p.weight.data()[ch * k * k..(ch + 1) * k * k];
            let plane = &x.sample(n)[ch * x.spatial()..(ch + 1) * x.spatial()];
            let base = out.index(n, ch, 0, 0);
            let dst = &mut out.data_mut()[base..base + oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..k {
                        let iy = oy as isize * s + ky as isize - pad;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = ox as isize * s + kx as isize - pad;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            acc += kern[ky * k + kx] * plane[(iy * w + ix) as usize];
                        }
                    }
                    dst[oy * ow + ox] = acc;
                }
            }
        }
    }
}

/// Unfolds a `c x h x w` image into a `(c*k*k) x (oh*ow)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let cols = oh * ow;
    for ch in 0..c {
        let plane = &x[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters columns back onto a `c x h x w` image,
/// accumulating overlapping windows.
#[allow(clippy::too_many_arguments)]
pub fn col2im<T: Scalar>(
    cols_buf: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [T],
) {
    let cols = oh * ow;
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols_buf[row * cols..(row + 1) * cols];
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        out[(ch * h + iy as usize) * w + ix as usize] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
}
