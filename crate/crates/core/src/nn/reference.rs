//! Direct nested-loop convolutions used to cross-check the optimized
//! kernels. Slow; for tests and verification runs only.

use super::conv::out_len;
use super::{NnError, Scalar, Tensor};

pub fn conv2d_naive<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = x.dims4()?;
    let (o, ci, k, _) = wt.dims4()?;
    if ci != c {
        return Err(NnError::Shape("channel mismatch".into()));
    }
    let pad = (k / 2) as isize;
    let (oh, ow) = (out_len(h, stride), out_len(w, stride));
    let mut out = Tensor::zeros(&[n, o, oh, ow]);
    let xd = x.data();
    let wd = wt.data();
    for img in 0..n {
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ic in 0..c {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad;
                                let ix = (ox * stride + kx) as isize - pad;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                let xv = xd[((img * c + ic) * h + iy as usize) * w + ix as usize];
                                acc += wd[((oc * c + ic) * k + ky) * k + kx] * xv;
                            }
                        }
                    }
                    out.data_mut()[((img * o + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_naive<T: Scalar>(
    x: &Tensor<T>,
    wt: &Tensor<T>,
    stride: usize,
) -> Result<Tensor<T>, NnError> {
    let (n, c, h, w) = x.dims4()?;
    if wt.shape() != [c, 1, 3, 3] {
        return Err(NnError::Shape("channel mismatch".into()));
    }
    let (oh, ow) = (out_len(h, stride), out_len(w, stride));
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = T::zero();
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (oy * stride + ky) as isize - 1;
                            let ix = (ox * stride + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += wt.data()[ch * 9 + ky * 3 + kx]
                                * x.data()[((img * c + ch) * h + iy as usize) * w + ix as usize];
                        }
                    }
                    out.data_mut()[((img * c + ch) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}
