//! Dense and depthwise convolutions with zero "same" padding.
//!
//! Dense convolution lowers each image to a column matrix and runs one GEMM
//! per image; 1×1 stride-1 convolutions use the input plane directly.
//! Output spatial size is `ceil(input / stride)` for both kernels.

use super::scalar::{gemm, MatRef};
use super::tape::{Op, Tape, Var};
use super::{NnError, Scalar, Tensor};

pub(crate) fn out_len(len: usize, stride: usize) -> usize {
    len.div_ceil(stride)
}

/// Output indices `o` in `lo..hi` for which `o·stride + offset` lands in
/// `0..in_len`.
#[inline]
fn valid_range(offset: isize, stride: usize, in_len: usize, out: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 {
        0
    } else {
        ((-offset + s - 1) / s) as usize
    };
    let last = in_len as isize - 1 - offset;
    let hi = if last < 0 {
        0
    } else {
        ((last / s) as usize + 1).min(out)
    };
    (lo.min(hi), hi)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    plane: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    cols: &mut [T],
) {
    let pad = (k / 2) as isize;
    let p = oh * ow;
    for ch in 0..c {
        let src = &plane[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ky as isize - pad, stride, h, oh);
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * p;
                let dst = &mut cols[row..row + p];
                let koff = kx as isize - pad;
                let (xlo, xhi) = valid_range(koff, stride, w, ow);
                for oy in 0..oh {
                    let drow = &mut dst[oy * ow..(oy + 1) * ow];
                    if oy < ylo || oy >= yhi {
                        drow.fill(T::zero());
                        continue;
                    }
                    let iy = (oy * stride + ky) as isize - pad;
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    drow[..xlo].fill(T::zero());
                    drow[xhi..].fill(T::zero());
                    if stride == 1 {
                        let start = (xlo as isize + koff) as usize;
                        drow[xlo..xhi].copy_from_slice(&srow[start..start + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = srow[((ox * stride) as isize + koff) as usize];
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Scalar>(
    cols: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    oh: usize,
    ow: usize,
    plane: &mut [T],
) {
    let pad = (k / 2) as isize;
    let p = oh * ow;
    for ch in 0..c {
        let dst = &mut plane[ch * h * w..(ch + 1) * h * w];
        for ky in 0..k {
            let (ylo, yhi) = valid_range(ky as isize - pad, stride, h, oh);
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * p;
                let src = &cols[row..row + p];
                let koff = kx as isize - pad;
                let (xlo, xhi) = valid_range(koff, stride, w, ow);
                for oy in ylo..yhi {
                    let iy = ((oy * stride + ky) as isize - pad) as usize;
                    let drow = &mut dst[iy * w..(iy + 1) * w];
                    let srow = &src[oy * ow..(oy + 1) * ow];
                    for ox in xlo..xhi {
                        drow[((ox * stride) as isize + koff) as usize] += srow[ox];
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, k2) = wt.dims4()?;
    if ci != c || k != k2 || !(k == 1 || k == 3) {
        return Err(NnError::Shape(format!(
            "conv2d weight {:?} incompatible with input {:?}",
            wt.shape(),
            x.shape()
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(NnError::Shape(format!("unsupported stride {stride}")));
    }
    if h < k || w < k {
        return Err(NnError::Shape(format!(
            "spatial size {h}x{w} smaller than kernel {k}"
        )));
    }
    let (oh, ow) = (out_len(h, stride), out_len(w, stride));
    let p = oh * ow;
    let kk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let direct = k == 1 && stride == 1;
    let mut cols = if direct {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    let xin = x.data();
    let od = out.data_mut();
    for img in 0..n {
        let plane = &xin[img * c * h * w..(img + 1) * c * h * w];
        let b = if direct {
            plane
        } else {
            im2col(plane, c, h, w, k, stride, oh, ow, &mut cols);
            &cols
        };
        gemm(
            o,
            kk,
            p,
            MatRef::new(wt.data(), kk),
            MatRef::new(b, p),
            T::zero(),
            &mut od[img * o * p..(img + 1) * o * p],
            p,
        );
    }
    Ok(out)
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
    g: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (n, c, h, w) = x.dims4().expect("rank 4");
    let (o, _, k, _) = wt.dims4().expect("rank 4");
    let (oh, ow) = (out_len(h, stride), out_len(w, stride));
    let p = oh * ow;
    let kk = c * k * k;
    let direct = k == 1 && stride == 1;
    let mut cols = if direct {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    let mut dcols = if direct || gx.is_none() {
        Vec::new()
    } else {
        vec![T::zero(); kk * p]
    };
    let xin = x.data();
    for img in 0..n {
        let plane = &xin[img * c * h * w..(img + 1) * c * h * w];
        let gy = &g[img * o * p..(img + 1) * o * p];
        if let Some(gw) = gw.as_deref_mut() {
            let b = if direct {
                plane
            } else {
                im2col(plane, c, h, w, k, stride, oh, ow, &mut cols);
                &cols
            };
            // gw (o×kk) += gy (o×p) · bᵀ (p×kk)
            gemm(
                o,
                p,
                kk,
                MatRef::new(gy, p),
                MatRef::new(b, p).t(),
                T::one(),
                gw,
                kk,
            );
        }
        if let Some(gx) = gx.as_deref_mut() {
            let gplane = &mut gx[img * c * h * w..(img + 1) * c * h * w];
            let wt_t = MatRef::new(wt.data(), kk).t();
            if direct {
                gemm(kk, o, p, wt_t, MatRef::new(gy, p), T::one(), gplane, p);
            } else {
                gemm(kk, o, p, wt_t, MatRef::new(gy, p), T::zero(), &mut dcols, p);
                col2im_add(&dcols, c, h, w, k, stride, oh, ow, gplane);
            }
        }
    }
}

pub(crate) fn depthwise_forward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = x.dims4()?;
    if wt.shape() != [c, 1, 3, 3] {
        return Err(NnError::Shape(format!(
            "depthwise weight {:?} incompatible with {c} channels",
            wt.shape()
        )));
    }
    if !(stride == 1 || stride == 2) {
        return Err(NnError::Shape(format!("unsupported stride {stride}")));
    }
    if h < 3 || w < 3 {
        return Err(NnError::Shape(format!(
            "spatial size {h}x{w} smaller than kernel 3"
        )));
    }
    let (oh, ow) = (out_len(h, stride), out_len(w, stride));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let xin = x.data();
    let od = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            let src = &xin[plane..plane + h * w];
            let dst = &mut od[(img * c + ch) * oh * ow..(img * c + ch + 1) * oh * ow];
            let kern = &wt.data()[ch * 9..ch * 9 + 9];
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky as isize - 1, stride, h, oh);
                for kx in 0..3 {
                    let wv = kern[ky * 3 + kx];
                    let koff = kx as isize - 1;
                    let (xlo, xhi) = valid_range(koff, stride, w, ow);
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let srow = &src[iy * w..(iy + 1) * w];
                        let drow = &mut dst[oy * ow..(oy + 1) * ow];
                        if stride == 1 {
                            let start = (xlo as isize + koff) as usize;
                            for (d, &s) in drow[xlo..xhi]
                                .iter_mut()
                                .zip(&srow[start..start + (xhi - xlo)])
                            {
                                *d += wv * s;
                            }
                        } else {
                            for ox in xlo..xhi {
                                drow[ox] += wv * srow[((ox * stride) as isize + koff) as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

pub(crate) fn depthwise_backward<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
    g: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (n, c, h, w) = x.dims4().expect("rank 4");
    let (oh, ow) = (out_len(h, stride), out_len(w, stride));
    let xin = x.data();
    for img in 0..n {
        for ch in 0..c {
            let plane = (img * c + ch) * h * w;
            let src = &xin[plane..plane + h * w];
            let gy = &g[(img * c + ch) * oh * ow..(img * c + ch + 1) * oh * ow];
            let kern = &wt.data()[ch * 9..ch * 9 + 9];
            for ky in 0..3 {
                let (ylo, yhi) = valid_range(ky as isize - 1, stride, h, oh);
                for kx in 0..3 {
                    let koff = kx as isize - 1;
                    let (xlo, xhi) = valid_range(koff, stride, w, ow);
                    let wv = kern[ky * 3 + kx];
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = oy * stride + ky - 1;
                        let grow = &gy[oy * ow..(oy + 1) * ow];
                        let srow = &src[iy * w..(iy + 1) * w];
                        for ox in xlo..xhi {
                            acc += grow[ox] * srow[((ox * stride) as isize + koff) as usize];
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            let drow = &mut gx[plane + iy * w..plane + (iy + 1) * w];
                            for ox in xlo..xhi {
                                drow[((ox * stride) as isize + koff) as usize] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(gw) = gw.as_deref_mut() {
                        gw[ch * 9 + ky * 3 + kx] += acc;
                    }
                }
            }
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Dense convolution, `input` NCHW and `weight` O×C×k×k with k ∈ {1, 3}.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NnError> {
        let out = conv2d_forward(self.value(x), self.value(w), stride)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Conv2d { x, w, stride }, rg))
    }

    /// Per-channel 3×3 convolution, `weight` C×1×3×3.
    pub fn depthwise_conv3x3(&mut self, x: Var, w: Var, stride: usize) -> Result<Var, NnError> {
        let out = depthwise_forward(self.value(x), self.value(w), stride)?;
        let rg = self.needs(x) || self.needs(w);
        Ok(self.push(out, Op::Depthwise { x, w, stride }, rg))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::reference;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn identity_1x1_returns_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[2, 3, 5, 4]);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv2d_forward(&x, &w, 1).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn ones_kernel_counts_interior_neighbours() {
        let x = Tensor::<f64>::full(&[1, 1, 5, 5], 1.0);
        let w = Tensor::full(&[1, 1, 3, 3], 1.0);
        let y = conv2d_forward(&x, &w, 1).unwrap();
        for r in 1..4 {
            for c in 1..4 {
                assert_eq!(y.data()[r * 5 + c], 9.0);
            }
        }
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[2], 6.0);
    }

    #[test]
    fn stride_two_output_is_ceil_half() {
        for size in [5usize, 6, 7, 8] {
            let x = Tensor::<f64>::zeros(&[1, 2, size, size]);
            let w = Tensor::zeros(&[4, 2, 3, 3]);
            let y = conv2d_forward(&x, &w, 2).unwrap();
            assert_eq!(y.shape(), &[1, 4, size.div_ceil(2), size.div_ceil(2)]);
            let dw = Tensor::zeros(&[2, 1, 3, 3]);
            let yd = depthwise_forward(&x, &dw, 2).unwrap();
            assert_eq!(yd.shape(), &[1, 2, size.div_ceil(2), size.div_ceil(2)]);
        }
    }

    #[test]
    fn conv_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for case in 0..24 {
            let k = if case % 3 == 0 { 1 } else { 3 };
            let stride = 1 + case % 2;
            let (n, c, o) = (rng.random_range(1..3), rng.random_range(1..5), rng.random_range(1..5));
            let (h, w) = (rng.random_range(3..9), rng.random_range(3..9));
            let x = rand_tensor(&mut rng, &[n, c, h, w]);
            let wt = rand_tensor(&mut rng, &[o, c, k, k]);
            let fast = conv2d_forward(&x, &wt, stride).unwrap();
            let slow = reference::conv2d_naive(&x, &wt, stride).unwrap();
            assert_eq!(fast.shape(), slow.shape());
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[2, 3, 6, 5]);
        let w = Tensor::from_fn(&[3, 1, 3, 3], |i| if i % 9 == 4 { 1.0 } else { 0.0 });
        assert_eq!(depthwise_forward(&x, &w, 1).unwrap(), x);
    }

    #[test]
    fn depthwise_single_channel_equals_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = rand_tensor(&mut rng, &[2, 1, 7, 6]);
        let w = rand_tensor(&mut rng, &[1, 1, 3, 3]);
        for stride in [1, 2] {
            let a = depthwise_forward(&x, &w, stride).unwrap();
            let b = conv2d_forward(&x, &w, stride).unwrap();
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn depthwise_matches_naive_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for case in 0..20 {
            let stride = 1 + case % 2;
            let (n, c) = (rng.random_range(1..3), rng.random_range(1..6));
            let (h, w) = (rng.random_range(3..10), rng.random_range(3..10));
            let x = rand_tensor(&mut rng, &[n, c, h, w]);
            let wt = rand_tensor(&mut rng, &[c, 1, 3, 3]);
            let fast = depthwise_forward(&x, &wt, stride).unwrap();
            let slow = reference::depthwise_naive(&x, &wt, stride).unwrap();
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn shape_errors() {
        let x = Tensor::<f64>::zeros(&[1, 3, 5, 5]);
        assert!(conv2d_forward(&x, &Tensor::zeros(&[2, 4, 3, 3]), 1).is_err());
        assert!(conv2d_forward(&x, &Tensor::zeros(&[2, 3, 5, 5]), 1).is_err());
        assert!(depthwise_forward(&x, &Tensor::zeros(&[2, 1, 3, 3]), 1).is_err());
        let tiny = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        assert!(conv2d_forward(&tiny, &Tensor::zeros(&[2, 3, 3, 3]), 1).is_err());
    }
}
