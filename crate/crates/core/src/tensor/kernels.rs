//! Forward and backward kernels for the spatial and affine operators.
//!
//! These are plain functions over [`Tensor`] values; [`Graph`](super::Graph)
//! records which ones ran and replays the matching backward kernel.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kin: usize,
    pub kout: usize,
    pub kh: usize,
    pub kw: usize,
    pub h: usize,
    pub w: usize,
    pub stride: usize,
    pub padding: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Self> {
        let (_, kin, h, w) = x.dims4()?;
        let (kout, wkin, kh, kw) = weight.dims4()?;
        if wkin != kin {
            return Err(Error::shape("conv2d", format!("input has {kin} channels, weight expects {wkin}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d stride must be positive".into()));
        }
        if h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {h}x{w} (+{padding})"),
            ));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (w + 2 * padding - kw) / stride + 1;
        Ok(ConvGeometry { kin, kout, kh, kw, h, w, stride, padding, oh, ow })
    }

    fn rows(&self) -> usize {
        self.kin * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.padding == 0
    }
}

fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], col: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.kin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let dst = &mut col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *d = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Scalar>(g: &ConvGeometry, col: &[T], dx: &mut [T]) {
    let p = g.cols();
    for ci in 0..g.kin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * p;
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &col[row + oy * g.ow..row + (oy + 1) * g.ow];
                    let base = iy as usize * g.w;
                    for (ox, &v) in src.iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[base + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Zero-padded cross-correlation.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeometry::new(x, weight, stride, padding)?;
    if bias.numel() != g.kout {
        return Err(Error::shape("conv2d", format!("bias has {} entries, expected {}", bias.numel(), g.kout)));
    }
    let n = x.shape()[0];
    let (r, p) = (g.rows(), g.cols());
    let mut out = vec![T::zero(); n * g.kout * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); r * p] };
    for s in 0..n {
        let xs = x.outer(s);
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        let os = &mut out[s * g.kout * p..(s + 1) * g.kout * p];
        for (co, row) in os.chunks_mut(p).enumerate() {
            row.fill(bias.data()[co]);
        }
        T::gemm(g.kout, r, p, weight.data(), (r as isize, 1), cols, (p as isize, 1), os, (p as isize, 1), true);
    }
    Tensor::new([n, g.kout, g.oh, g.ow], out)
}

pub struct ConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<ConvGrads<T>> {
    let g = ConvGeometry::new(x, weight, stride, padding)?;
    let n = x.shape()[0];
    let (r, p) = (g.rows(), g.cols());
    let mut dx = Tensor::zeros_like(x);
    let mut dw = Tensor::zeros_like(weight);
    let mut db = Tensor::zeros([g.kout]);
    let mut col = vec![T::zero(); r * p];
    let mut dcol = vec![T::zero(); r * p];
    let sample_len = g.kin * g.h * g.w;
    for s in 0..n {
        let go = grad_out.outer(s);
        for (co, row) in go.chunks(p).enumerate() {
            db.data_mut()[co] += row.iter().fold(T::zero(), |a, &v| a + v);
        }
        let xs = x.outer(s);
        let cols: &[T] = if g.is_pointwise() {
            xs
        } else {
            im2col(&g, xs, &mut col);
            &col
        };
        // dW[kout, r] += dOut[kout, p] · col[r, p]^T
        T::gemm(g.kout, p, r, go, (p as isize, 1), cols, (1, p as isize), dw.data_mut(), (r as isize, 1), true);
        let dxs = &mut dx.data_mut()[s * sample_len..(s + 1) * sample_len];
        if g.is_pointwise() {
            T::gemm(r, g.kout, p, weight.data(), (1, r as isize), go, (p as isize, 1), dxs, (p as isize, 1), true);
        } else {
            // dCol[r, p] = W[kout, r]^T · dOut[kout, p]
            T::gemm(r, g.kout, p, weight.data(), (1, r as isize), go, (p as isize, 1), &mut dcol, (p as isize, 1), false);
            col2im(&g, &dcol, dxs);
        }
    }
    Ok(ConvGrads { x: dx, weight: dw, bias: db })
}

/// Window max pooling without padding. Returns the pooled tensor and, per
/// output element, the flat input index it was taken from (first maximum in
/// row-major window order).
pub fn maxpool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 || k > h || k > w {
        return Err(Error::shape("maxpool2d", format!("window {k} stride {stride} on {h}x{w}")));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if xd[i] > xd[best] {
                            best = i;
                        }
                    }
                }
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new([n, c, oh, ow], out)?, arg))
}

/// Smallest gap between the winning value and any other value of its window.
pub fn maxpool2d_tie_gap<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, argmax: &[usize]) -> f64 {
    let (n, c, h, w) = match x.dims4() {
        Ok(d) => d,
        Err(_) => return f64::INFINITY,
    };
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let xd = x.data();
    let mut gap = f64::INFINITY;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let best = argmax[(plane * oh + oy) * ow + ox];
                for dy in 0..k {
                    for dx in 0..k {
                        let i = base + (oy * stride + dy) * w + ox * stride + dx;
                        if i != best {
                            gap = gap.min((xd[best] - xd[i]).as_f64());
                        }
                    }
                }
            }
        }
    }
    gap
}

/// Routes `grad_out` back to the recorded argmax positions.
pub fn scatter_argmax<T: Scalar>(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(input_shape.to_vec());
    let d = dx.data_mut();
    for (&i, &g) in argmax.iter().zip(grad_out.data()) {
        d[i] += g;
    }
    dx
}

/// Per-channel mean over `H × W`.
pub fn global_avg_pool<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::one() / T::lit((h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) * inv)
        .collect();
    Tensor::new([n, c, 1, 1], data)
}

pub fn global_avg_pool_backward<T: Scalar>(input_shape: &[usize], grad_out: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::one() / T::lit(hw as f64);
    let mut data = Vec::with_capacity(hw * grad_out.numel());
    for &g in grad_out.data() {
        data.extend(std::iter::repeat(g * inv).take(hw));
    }
    Tensor { shape: input_shape.to_vec(), data }
}

/// Per-channel max over `H × W`, with the first-scanned argmax per channel.
pub fn global_max_pool<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let hw = h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut arg = Vec::with_capacity(n * c);
    for (p, plane) in x.data().chunks(hw).enumerate() {
        let mut best = 0;
        for (i, &v) in plane.iter().enumerate() {
            if v > plane[best] {
                best = i;
            }
        }
        out.push(plane[best]);
        arg.push(p * hw + best);
    }
    Ok((Tensor::new([n, c, 1, 1], out)?, arg))
}

pub fn global_max_pool_tie_gap<T: Scalar>(x: &Tensor<T>, argmax: &[usize]) -> f64 {
    let hw = x.shape()[2] * x.shape()[3];
    let mut gap = f64::INFINITY;
    for (p, plane) in x.data().chunks(hw).enumerate() {
        let best = argmax[p] - p * hw;
        for (i, &v) in plane.iter().enumerate() {
            if i != best {
                gap = gap.min((plane[best] - v).as_f64());
            }
        }
    }
    gap
}

/// `x[N,K] · weight[K,M] + bias[M]`.
pub fn fully_connected<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, k, m) = fc_dims(x, weight, bias)?;
    let mut out = Vec::with_capacity(n * m);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, k, m, x.data(), (k as isize, 1), weight.data(), (m as isize, 1), &mut out, (m as isize, 1), true);
    Tensor::new([n, m], out)
}

fn fc_dims<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (n, k) = match *x.shape() {
        [n, k] => (n, k),
        _ => return Err(Error::shape("fully_connected", format!("input must be rank 2, got {:?}", x.shape()))),
    };
    let m = match *weight.shape() {
        [wk, m] if wk == k => m,
        _ => {
            return Err(Error::shape(
                "fully_connected",
                format!("input {:?} incompatible with weight {:?}", x.shape(), weight.shape()),
            ))
        }
    };
    if bias.numel() != m {
        return Err(Error::shape("fully_connected", format!("bias has {} entries, expected {m}", bias.numel())));
    }
    Ok((n, k, m))
}

pub struct FcGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn fully_connected_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<FcGrads<T>> {
    let (n, k) = (x.shape()[0], x.shape()[1]);
    let m = weight.shape()[1];
    let mut dx = Tensor::zeros([n, k]);
    let mut dw = Tensor::zeros([k, m]);
    let go = grad_out.data();
    T::gemm(n, m, k, go, (m as isize, 1), weight.data(), (1, m as isize), dx.data_mut(), (k as isize, 1), false);
    T::gemm(k, n, m, x.data(), (1, k as isize), go, (m as isize, 1), dw.data_mut(), (m as isize, 1), false);
    let mut db = Tensor::zeros([m]);
    for row in go.chunks(m) {
        for (b, &g) in db.data_mut().iter_mut().zip(row) {
            *b += g;
        }
    }
    Ok(FcGrads { x: dx, weight: dw, bias: db })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_sum_of_ones() {
        let x = Tensor::<f32>::ones([1, 1, 3, 3]);
        let w = Tensor::<f32>::ones([1, 1, 3, 3]);
        let b = Tensor::<f32>::zeros([1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn conv_identity_kernel() {
        let x = Tensor::<f32>::from_fn([1, 1, 4, 5], |i| i as f32 - 7.0);
        let w = Tensor::<f32>::ones([1, 1, 1, 1]);
        let b = Tensor::<f32>::zeros([1]);
        assert_eq!(conv2d(&x, &w, &b, 1, 0).unwrap(), x);
    }

    #[test]
    fn conv_rejects_bad_geometry() {
        let x = Tensor::<f32>::ones([1, 2, 3, 3]);
        let b = Tensor::<f32>::zeros([1]);
        assert!(conv2d(&x, &Tensor::ones([1, 3, 3, 3]), &b, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones([1, 2, 5, 5]), &b, 1, 0).is_err());
        assert!(conv2d(&x, &Tensor::ones([1, 2, 5, 5]), &b, 1, 1).is_ok());
    }

    #[test]
    fn maxpool_forced_and_ties() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let (y, arg) = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![3]);

        let c = Tensor::<f32>::full([1, 1, 4, 4], 2.0);
        let (y, arg) = maxpool2d(&c, 2, 2).unwrap();
        assert!(y.data().iter().all(|&v| v == 2.0));
        assert_eq!(arg, vec![0, 2, 8, 10]);
        let dx = scatter_argmax(c.shape(), &arg, &Tensor::<f32>::ones([1, 1, 2, 2]));
        assert_eq!(dx.data().iter().filter(|&&v| v == 1.0).count(), 4);
        assert_eq!(dx.data()[0], 1.0);
        assert!(maxpool2d(&c, 5, 1).is_err());
    }

    #[test]
    fn global_pools() {
        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]).unwrap();
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[4.0]);
        let g = global_avg_pool_backward(x.shape(), &Tensor::<f32>::ones([1, 1, 1, 1]));
        assert_eq!(g.data(), &[0.25; 4]);

        let x = Tensor::<f32>::new([1, 1, 2, 2], vec![1.0, 3.0, 5.0, 2.0]).unwrap();
        let (m, arg) = global_max_pool(&x).unwrap();
        assert_eq!(m.data(), &[5.0]);
        assert_eq!(arg, vec![2]);

        let flat = Tensor::<f32>::full([1, 1, 3, 3], -1.5);
        let (m, arg) = global_max_pool(&flat).unwrap();
        assert_eq!(m.data(), &[-1.5]);
        assert_eq!(arg, vec![0]);
        assert_eq!(global_max_pool_tie_gap(&flat, &arg), 0.0);
    }

    #[test]
    fn fc_forced_values() {
        let x = Tensor::<f32>::new([1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f32>::new([2, 1], vec![1.0, 1.0]).unwrap();
        let b = Tensor::<f32>::zeros([1]);
        assert_eq!(fully_connected(&x, &w, &b).unwrap().data(), &[3.0]);

        let eye = Tensor::<f32>::from_fn([2, 2], |i| if i % 3 == 0 { 1.0 } else { 0.0 });
        assert_eq!(fully_connected(&x, &eye, &Tensor::zeros([2])).unwrap().data(), x.data());
        assert!(fully_connected(&x, &Tensor::ones([3, 1]), &b).is_err());
    }
}
