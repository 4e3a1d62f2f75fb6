//! Square-kernel 2D convolution as im2col + GEMM, with its own backward pass.
//!
//! The stock CPU convolution in candle is several times slower than its
//! matmul, and the transposed convolution used for its gradient is slower
//! still. Every conv in the encoder, decoder and feature extractor goes
//! through this op instead.

use candle_core::{CpuStorage, CustomOp2, Layout, Result, Shape, Tensor, WithDType};

trait Gemm: WithDType + Copy + Default + std::ops::AddAssign {
    /// c (m×n) = alpha * a (m×k) · b (k×n) + beta * c, all with explicit strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                // SAFETY: the callers size every buffer from the same (m, k, n)
                // and strides; the asserts below pin the extents.
                assert!(m == 0 || k == 0 || a.len() as isize > (m as isize - 1) * rsa + (k as isize - 1) * csa);
                assert!(k == 0 || n == 0 || b.len() as isize > (k as isize - 1) * rsb + (n as isize - 1) * csb);
                unsafe {
                    $f(
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
                    )
                }
            }
        }
    };
}
impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

#[derive(Debug, Clone, Copy)]
struct Geometry {
    channels: usize,
    height: usize,
    width: usize,
    kernel: usize,
    stride: usize,
    pad: usize,
}

impl Geometry {
    fn out_hw(&self) -> (usize, usize) {
        (
            (self.height + 2 * self.pad - self.kernel) / self.stride + 1,
            (self.width + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is in bounds.
    fn valid_cols(&self, kx: usize, wo: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = if self.width + self.pad > kx { (self.width + self.pad - kx - 1) / s + 1 } else { 0 };
        (lo.min(wo), hi.min(wo).max(lo.min(wo)))
    }

    fn im2col<T: Copy + Default>(&self, x: &[T], col: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let n = ho * wo;
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &x[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx, wo);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let line = &mut dst[oy * wo..(oy + 1) * wo];
                        if iy < 0 || iy >= self.height as isize {
                            line.fill(T::default());
                            continue;
                        }
                        let src = &plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        line[..lo].fill(T::default());
                        line[hi..].fill(T::default());
                        let start = lo * self.stride + kx - self.pad;
                        if self.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, v) in line[lo..hi].iter_mut().enumerate() {
                                *v = src[start + j * self.stride];
                            }
                        }
                    }
                }
            }
        }
    }

    fn col2im<T: Copy + std::ops::AddAssign>(&self, col: &[T], dx: &mut [T]) {
        let (ho, wo) = self.out_hw();
        let n = ho * wo;
        let k = self.kernel;
        for c in 0..self.channels {
            let plane = &mut dx[c * self.height * self.width..(c + 1) * self.height * self.width];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &col[row * n..(row + 1) * n];
                    let (lo, hi) = self.valid_cols(kx, wo);
                    for oy in 0..ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.width..(iy as usize + 1) * self.width];
                        let start = lo * self.stride + kx - self.pad;
                        let line = &src[oy * wo + lo..oy * wo + hi];
                        if self.stride == 1 {
                            for (d, &v) in dst[start..start + hi - lo].iter_mut().zip(line) {
                                *d += v;
                            }
                        } else {
                            for (j, &v) in line.iter().enumerate() {
                                dst[start + j * self.stride] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn contiguous<'a, T>(s: &'a [T], l: &Layout) -> Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("fast-conv2d: operand must be contiguous"),
    }
}

macro_rules! dispatch2 {
    ($s1:expr, $s2:expr, $f:ident, $($arg:expr),*) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                let v = $f::<f32>(a, b, $($arg),*)?;
                CpuStorage::F32(v)
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                let v = $f::<f64>(a, b, $($arg),*)?;
                CpuStorage::F64(v)
            }
            _ => candle_core::bail!("fast-conv2d: only f32/f64 operands of equal dtype are supported"),
        }
    };
}

struct Forward {
    stride: usize,
    pad: usize,
}

fn forward_impl<T: Gemm>(x: &[T], w: &[T], lx: &Layout, lw: &Layout, g: Geometry, batch: usize, out_ch: usize) -> Result<Vec<T>> {
    let x = contiguous(x, lx)?;
    let w = contiguous(w, lw)?;
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kk = g.col_rows();
    let in_plane = g.channels * g.height * g.width;
    let mut out = vec![T::default(); batch * out_ch * n];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::default(); kk * n] };
    for b in 0..batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut col);
            &col
        };
        let ob = &mut out[b * out_ch * n..(b + 1) * out_ch * n];
        T::gemm(out_ch, kk, n, w, kk as isize, 1, cols, n as isize, 1, T::zero(), ob);
    }
    Ok(out)
}

impl CustomOp2 for Forward {
    fn name(&self) -> &'static str {
        "fast-conv2d"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let (batch, channels, height, width) = l1.shape().dims4()?;
        let (out_ch, in_ch, kh, kw) = l2.shape().dims4()?;
        if in_ch != channels || kh != kw {
            candle_core::bail!("fast-conv2d: kernel {:?} incompatible with input {:?}", l2.shape(), l1.shape())
        }
        let g = Geometry { channels, height, width, kernel: kh, stride: self.stride, pad: self.pad };
        let (ho, wo) = g.out_hw();
        let st = dispatch2!(s1, s2, forward_impl, l1, l2, g, batch, out_ch);
        Ok((st, Shape::from((batch, out_ch, ho, wo))))
    }

    fn bwd(&self, x: &Tensor, w: &Tensor, _res: &Tensor, grad: &Tensor) -> Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, channels, height, width) = x.dims4()?;
        let kernel = w.dim(2)?;
        let g = Geometry { channels, height, width, kernel, stride: self.stride, pad: self.pad };
        let dx = w.apply_op2_no_bwd(&grad, &BackInput(g))?;
        let dw = x.apply_op2_no_bwd(&grad, &BackKernel(g))?;
        Ok((Some(dx), Some(dw)))
    }
}

struct BackInput(Geometry);

fn back_input_impl<T: Gemm>(w: &[T], dy: &[T], lw: &Layout, ly: &Layout, g: Geometry, batch: usize, out_ch: usize) -> Result<Vec<T>> {
    let w = contiguous(w, lw)?;
    let dy = contiguous(dy, ly)?;
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kk = g.col_rows();
    let in_plane = g.channels * g.height * g.width;
    let mut dx = vec![T::default(); batch * in_plane];
    let mut dcol = if g.is_pointwise() { Vec::new() } else { vec![T::default(); kk * n] };
    for b in 0..batch {
        let dyb = &dy[b * out_ch * n..(b + 1) * out_ch * n];
        let dxb = &mut dx[b * in_plane..(b + 1) * in_plane];
        if g.is_pointwise() {
            // dx (C×N) = Wᵀ (C×O) · dy (O×N)
            T::gemm(kk, out_ch, n, w, 1, kk as isize, dyb, n as isize, 1, T::zero(), dxb);
        } else {
            T::gemm(kk, out_ch, n, w, 1, kk as isize, dyb, n as isize, 1, T::zero(), &mut dcol);
            g.col2im(&dcol, dxb);
        }
    }
    Ok(dx)
}

impl CustomOp2 for BackInput {
    fn name(&self) -> &'static str {
        "fast-conv2d-dx"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (out_ch, _, _, _) = l1.shape().dims4()?;
        let (batch, _, _, _) = l2.shape().dims4()?;
        let st = dispatch2!(s1, s2, back_input_impl, l1, l2, g, batch, out_ch);
        Ok((st, Shape::from((batch, g.channels, g.height, g.width))))
    }
}

struct BackKernel(Geometry);

fn back_kernel_impl<T: Gemm>(x: &[T], dy: &[T], lx: &Layout, ly: &Layout, g: Geometry, batch: usize, out_ch: usize) -> Result<Vec<T>> {
    let x = contiguous(x, lx)?;
    let dy = contiguous(dy, ly)?;
    let (ho, wo) = g.out_hw();
    let n = ho * wo;
    let kk = g.col_rows();
    let in_plane = g.channels * g.height * g.width;
    let mut dw = vec![T::default(); out_ch * kk];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::default(); kk * n] };
    for b in 0..batch {
        let xb = &x[b * in_plane..(b + 1) * in_plane];
        let cols: &[T] = if g.is_pointwise() {
            xb
        } else {
            g.im2col(xb, &mut col);
            &col
        };
        let dyb = &dy[b * out_ch * n..(b + 1) * out_ch * n];
        // dW (O×K) += dy (O×N) · colᵀ (N×K)
        T::gemm(out_ch, n, kk, dyb, n as isize, 1, cols, 1, n as isize, T::one(), &mut dw);
    }
    Ok(dw)
}

impl CustomOp2 for BackKernel {
    fn name(&self) -> &'static str {
        "fast-conv2d-dw"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> Result<(CpuStorage, Shape)> {
        let g = self.0;
        let (batch, _, _, _) = l1.shape().dims4()?;
        let (_, out_ch, _, _) = l2.shape().dims4()?;
        let st = dispatch2!(s1, s2, back_kernel_impl, l1, l2, g, batch, out_ch);
        Ok((st, Shape::from((out_ch, g.channels, g.kernel, g.kernel))))
    }
}

/// Convolve `x` (B, C, H, W) with `kernel` (O, C, k, k) using zero padding.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    x.apply_op2(&kernel, Forward { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn lcg(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn matches_candle_reference_forward_and_backward() -> Result<()> {
        let dev = Device::Cpu;
        for &(k, stride, pad) in &[(3usize, 1usize, 1usize), (3, 2, 1), (1, 1, 0), (4, 4, 0)] {
            let x = Var::from_vec(lcg(2 * 3 * 8 * 8, 1), (2, 3, 8, 8), &dev)?;
            let w = Var::from_vec(lcg(5 * 3 * k * k, 2), (5, 3, k, k), &dev)?;
            let probe = Tensor::from_vec(lcg(2 * 5 * 64, 3), 2 * 5 * 64, &dev)?;

            let ours = conv2d(x.as_tensor(), w.as_tensor(), stride, pad)?;
            let reference = x.as_tensor().conv2d(w.as_tensor(), pad, stride, 1, 1)?;
            assert_eq!(ours.dims(), reference.dims());
            let diff = (&ours - &reference)?.abs()?.max_all()?.to_scalar::<f64>()?;
            assert!(diff < 1e-12, "forward k={k} s={stride}: {diff}");

            let n = ours.elem_count();
            let p = probe.narrow(0, 0, n)?.reshape(ours.shape())?;
            let g1 = (ours * &p)?.sum_all()?.backward()?;
            let g2 = (reference * &p)?.sum_all()?.backward()?;
            for v in [&x, &w] {
                let a = g1.get(v).unwrap();
                let b = g2.get(v).unwrap();
                let d = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
                assert!(d < 1e-12, "grad k={k} s={stride}: {d}");
            }
        }
        Ok(())
    }

    #[test]
    fn f32_path_agrees_with_f64() -> Result<()> {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(lcg(3 * 4 * 6 * 6, 7), (3, 4, 6, 6), &dev)?;
        let w = Tensor::from_vec(lcg(2 * 4 * 9, 8), (2, 4, 3, 3), &dev)?;
        let a = conv2d(&x, &w, 1, 1)?;
        let b = conv2d(&x.to_dtype(DType::F32)?, &w.to_dtype(DType::F32)?, 1, 1)?.to_dtype(DType::F64)?;
        let d = (a - b)?.abs()?.max_all()?.to_scalar::<f64>()?;
        assert!(d < 1e-5);
        Ok(())
    }
}
