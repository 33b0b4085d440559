//! CPU kernels registered as candle custom ops.
//!
//! candle's own convolution backward is too slow on CPU for fine-tuning, and
//! it has no backward for overlapping max pooling. Convolution here is
//! `im2col` followed by a batched matmul, so the heavy lifting in both passes
//! is GEMM; only the gather/scatter lives in these loops.

use std::ops::AddAssign;

use candle_core::{bail, CpuStorage, CustomOp1, Layout, Result, Shape, Tensor, WithDType};

trait Elem: WithDType + AddAssign + PartialOrd + Default {}
impl Elem for f32 {}
impl Elem for f64 {}

fn contiguous<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> Result<&'a [T]> {
    let data = s.as_slice::<T>()?;
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => bail!("custom op expects a contiguous input"),
    }
}

/// Unfold `k×k` patches of a `B×C×H×W` input into `(C·kh·kw)×(B·Ho·Wo)`,
/// so one plain GEMM covers the whole batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Im2Col {
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Im2Col {
    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.kh || w + 2 * self.pad < self.kw {
            bail!("input {h}x{w} smaller than kernel {}x{}", self.kh, self.kw);
        }
        Ok((
            (h + 2 * self.pad - self.kh) / self.stride + 1,
            (w + 2 * self.pad - self.kw) / self.stride + 1,
        ))
    }

    fn fwd<T: Elem>(&self, x: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Result<Vec<T>> {
        let (ho, wo) = self.out_hw(h, w)?;
        let k = c * self.kh * self.kw;
        let n = ho * wo;
        let mut out = vec![T::default(); b * k * n];
        let cols = b * n;
        for bi in 0..b {
            for ci in 0..c {
                let plane = &x[(bi * c + ci) * h * w..][..h * w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (ci * self.kh + ky) * self.kw + kx;
                        let dst = &mut out[row * cols + bi * n..][..n];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let src = &plane[iy as usize * w..][..w];
                            let drow = &mut dst[oy * wo..][..wo];
                            for (ox, d) in drow.iter_mut().enumerate() {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    *d = src[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn bwd_impl<T: Elem>(&self, g: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Result<Vec<T>> {
        let (ho, wo) = self.out_hw(h, w)?;
        let n = ho * wo;
        let mut dx = vec![T::default(); b * c * h * w];
        let cols = b * n;
        for bi in 0..b {
            for ci in 0..c {
                let plane = &mut dx[(bi * c + ci) * h * w..][..h * w];
                for ky in 0..self.kh {
                    for kx in 0..self.kw {
                        let row = (ci * self.kh + ky) * self.kw + kx;
                        let src = &g[row * cols + bi * n..][..n];
                        for oy in 0..ho {
                            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let drow = &mut plane[iy as usize * w..][..w];
                            for ox in 0..wo {
                                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                                if ix >= 0 && ix < w as isize {
                                    drow[ix as usize] += src[oy * wo + ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(dx)
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w)?;
        let shape = Shape::from((c * self.kh * self.kw, b * ho * wo));
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.fwd(contiguous::<f32>(s, l)?, dims)?),
            CpuStorage::F64(_) => CpuStorage::F64(self.fwd(contiguous::<f64>(s, l)?, dims)?),
            _ => bail!("im2col supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let g = grad.contiguous()?.flatten_all()?;
        let dx = match arg.dtype() {
            candle_core::DType::F32 => {
                let v = self.bwd_impl(&g.to_vec1::<f32>()?, dims)?;
                Tensor::from_vec(v, dims, arg.device())?
            }
            candle_core::DType::F64 => {
                let v = self.bwd_impl(&g.to_vec1::<f64>()?, dims)?;
                Tensor::from_vec(v, dims, arg.device())?
            }
            dt => bail!("im2col backward unsupported for {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// 2-D max pooling with arbitrary (possibly overlapping) windows.
///
/// Padding positions never win; with `ceil_mode` the last window may hang off
/// the edge as long as it starts inside the padded input. Ties go to the first
/// element in row-major window order, in both passes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub ceil_mode: bool,
}

impl MaxPool2d {
    pub const fn new(kernel: usize, stride: usize) -> Self {
        Self {
            kernel,
            stride,
            pad: 0,
            ceil_mode: false,
        }
    }

    fn out_len(&self, n: usize) -> usize {
        let span = n + 2 * self.pad - self.kernel;
        let mut out = if self.ceil_mode {
            span.div_ceil(self.stride) + 1
        } else {
            span / self.stride + 1
        };
        // a window must start inside the input or left padding
        if self.ceil_mode && (out - 1) * self.stride >= n + self.pad {
            out -= 1;
        }
        out
    }

    pub fn out_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        if h + 2 * self.pad < self.kernel || w + 2 * self.pad < self.kernel {
            bail!("input {h}x{w} smaller than pooling window {}", self.kernel);
        }
        Ok((self.out_len(h), self.out_len(w)))
    }

    fn argmax<T: Elem>(&self, plane: &[T], h: usize, w: usize, oy: usize, ox: usize) -> usize {
        let mut best = usize::MAX;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride + ky) as isize - self.pad as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let idx = iy as usize * w + ix as usize;
                if best == usize::MAX || plane[idx] > plane[best] {
                    best = idx;
                }
            }
        }
        best
    }

    fn fwd<T: Elem>(&self, x: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Result<Vec<T>> {
        let (ho, wo) = self.out_hw(h, w)?;
        let mut out = Vec::with_capacity(b * c * ho * wo);
        for p in 0..b * c {
            let plane = &x[p * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    out.push(plane[self.argmax(plane, h, w, oy, ox)]);
                }
            }
        }
        Ok(out)
    }

    fn bwd_impl<T: Elem>(&self, x: &[T], g: &[T], (b, c, h, w): (usize, usize, usize, usize)) -> Result<Vec<T>> {
        let (ho, wo) = self.out_hw(h, w)?;
        let mut dx = vec![T::default(); b * c * h * w];
        for p in 0..b * c {
            let plane = &x[p * h * w..][..h * w];
            for oy in 0..ho {
                for ox in 0..wo {
                    let i = self.argmax(plane, h, w, oy, ox);
                    dx[p * h * w + i] += g[(p * ho + oy) * wo + ox];
                }
            }
        }
        Ok(dx)
    }
}

impl CustomOp1 for MaxPool2d {
    fn name(&self) -> &'static str {
        "max-pool2d"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> Result<(CpuStorage, Shape)> {
        let dims = l.shape().dims4()?;
        let (b, c, h, w) = dims;
        let (ho, wo) = self.out_hw(h, w)?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(self.fwd(contiguous::<f32>(s, l)?, dims)?),
            CpuStorage::F64(_) => CpuStorage::F64(self.fwd(contiguous::<f64>(s, l)?, dims)?),
            _ => bail!("max-pool2d supports f32 and f64 only"),
        };
        Ok((out, Shape::from((b, c, ho, wo))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<Option<Tensor>> {
        let dims = arg.dims4()?;
        let x = arg.contiguous()?.flatten_all()?;
        let g = grad.contiguous()?.flatten_all()?;
        let dx = match arg.dtype() {
            candle_core::DType::F32 => {
                let v = self.bwd_impl(&x.to_vec1::<f32>()?, &g.to_vec1::<f32>()?, dims)?;
                Tensor::from_vec(v, dims, arg.device())?
            }
            candle_core::DType::F64 => {
                let v = self.bwd_impl(&x.to_vec1::<f64>()?, &g.to_vec1::<f64>()?, dims)?;
                Tensor::from_vec(v, dims, arg.device())?
            }
            dt => bail!("max-pool2d backward unsupported for {dt:?}"),
        };
        Ok(Some(dx))
    }
}

/// `x ⊛ weight + bias` for `x: B×C×H×W`, `weight: O×C×kh×kw`.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, stride: usize, pad: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    let (o, wc, kh, kw) = weight.dims4()?;
    if wc != c {
        bail!("conv2d: input has {c} channels, kernel expects {wc}");
    }
    let op = Im2Col { kh, kw, stride, pad };
    let (ho, wo) = op.out_hw(h, w)?;
    let cols = if kh == 1 && kw == 1 && stride == 1 && pad == 0 {
        // pointwise: a transpose is all the unfolding needed
        x.transpose(0, 1)?.reshape((c, b * h * w))?
    } else {
        x.contiguous()?.apply_op1(op)?
    };
    let y = weight.reshape((o, c * kh * kw))?.matmul(&cols)?;
    let y = y.reshape((o, b, ho, wo))?.transpose(0, 1)?.contiguous()?;
    match bias {
        Some(bias) => y.broadcast_add(&bias.reshape((1, o, 1, 1))?),
        None => Ok(y),
    }
}

pub fn max_pool2d(x: &Tensor, pool: MaxPool2d) -> Result<Tensor> {
    x.contiguous()?.apply_op1(pool)
}
