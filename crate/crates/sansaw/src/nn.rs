//! Convolution, activation, and cross-entropy primitives with hand-derived
//! gradients.
//!
//! Convolutions are cross-correlations with stride 1 and zero padding that
//! preserves H x W; only 1x1 and 3x3 kernels are supported since that is all
//! the network and the refinement block use. The implementation accumulates
//! shifted rows so the inner loops stay contiguous.

use crate::error::{Error, Result};
use crate::labels::LabelMap;
use crate::rng::SeededRng;
use crate::tensor::{Scalar, Tensor};

/// A 2-D convolution layer (weights `(Cout, Cin, k, k)`, bias `(Cout)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub kernel: usize,
}

impl<T: Scalar> Conv2d<T> {
    pub fn new(cin: usize, cout: usize, kernel: usize, weight_scale: f64, rng: &mut SeededRng) -> Result<Self> {
        if kernel != 1 && kernel != 3 {
            return Err(Error::Config(format!("unsupported kernel size {kernel}")));
        }
        Ok(Conv2d {
            weight: Tensor::uniform(&[cout, cin, kernel, kernel], -weight_scale, weight_scale, rng)?,
            bias: Tensor::zeros(&[cout])?,
            kernel,
        })
    }

    /// Uniform init with the scale `sqrt(6 / fan_in)`.
    pub fn new_he(cin: usize, cout: usize, kernel: usize, rng: &mut SeededRng) -> Result<Self> {
        let fan_in = (cin * kernel * kernel) as f64;
        Self::new(cin, cout, kernel, (6.0 / fan_in).sqrt(), rng)
    }

    pub fn zeroed(cin: usize, cout: usize, kernel: usize) -> Result<Self> {
        Ok(Conv2d {
            weight: Tensor::zeros(&[cout, cin, kernel, kernel])?,
            bias: Tensor::zeros(&[cout])?,
            kernel,
        })
    }

    pub fn cin(&self) -> usize {
        self.weight.dims()[1]
    }

    pub fn cout(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (n, cin, h, w) = x.dim4()?;
        if cin != self.cin() {
            return Err(Error::ShapeMismatch(format!(
                "conv expects {} input channels, got {cin}",
                self.cin()
            )));
        }
        let cout = self.cout();
        let mut out = Tensor::zeros(&[n, cout, h, w])?;
        let khalf = (self.kernel / 2) as isize;
        for ni in 0..n {
            for co in 0..cout {
                {
                    let b = self.bias.data()[co];
                    for o in out.channel_mut(ni, co) {
                        *o = b;
                    }
                }
                for ci in 0..cin {
                    let xc = x.channel(ni, ci);
                    let wbase = ((co * cin) + ci) * self.kernel * self.kernel;
                    for dh in 0..self.kernel {
                        for dw in 0..self.kernel {
                            let wv = self.weight.data()[wbase + dh * self.kernel + dw];
                            if wv == T::zero() {
                                continue;
                            }
                            let oh = dh as isize - khalf;
                            let ow = dw as isize - khalf;
                            accumulate_shifted(out.channel_mut(ni, co), xc, h, w, oh, ow, wv);
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Gradients of a downstream scalar w.r.t. input, weights, and bias.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let (n, cin, h, w) = x.dim4()?;
        let cout = self.cout();
        let (gn, gc, gh, gw) = grad_out.dim4()?;
        if (gn, gc, gh, gw) != (n, cout, h, w) {
            return Err(Error::ShapeMismatch("conv backward shapes".into()));
        }
        let khalf = (self.kernel / 2) as isize;
        let mut dx = Tensor::zeros(x.dims())?;
        let mut dw_acc = vec![0f64; self.weight.len()];
        let mut db_acc = vec![0f64; cout];
        for ni in 0..n {
            for co in 0..cout {
                let g = grad_out.channel(ni, co);
                db_acc[co] += g.iter().map(|v| v.into_f64()).sum::<f64>();
                for ci in 0..cin {
                    let xc = x.channel(ni, ci);
                    let wbase = ((co * cin) + ci) * self.kernel * self.kernel;
                    for dh in 0..self.kernel {
                        for dwi in 0..self.kernel {
                            let oh = dh as isize - khalf;
                            let ow = dwi as isize - khalf;
                            // dL/dw = <grad_out, x shifted by (oh, ow)>
                            dw_acc[wbase + dh * self.kernel + dwi] +=
                                dot_shifted(g, xc, h, w, oh, ow);
                            // dL/dx accumulates grad_out shifted the other way
                            let wv = self.weight.data()[wbase + dh * self.kernel + dwi];
                            if wv != T::zero() {
                                accumulate_shifted(dx.channel_mut(ni, ci), g, h, w, -oh, -ow, wv);
                            }
                        }
                    }
                }
            }
        }
        let dw = Tensor::from_vec(
            self.weight.dims(),
            dw_acc.into_iter().map(T::from_f64s).collect(),
        )?;
        let db = Tensor::from_vec(&[cout], db_acc.into_iter().map(T::from_f64s).collect())?;
        Ok((dx, dw, db))
    }
}

/// `dst[h][w] += scale * src[h + oh][w + ow]` over the valid range.
#[inline]
fn accumulate_shifted<T: Scalar>(
    dst: &mut [T],
    src: &[T],
    h: usize,
    w: usize,
    oh: isize,
    ow: isize,
    scale: T,
) {
    let (h, w) = (h as isize, w as isize);
    let h_lo = 0.max(-oh);
    let h_hi = h.min(h - oh);
    let w_lo = 0.max(-ow);
    let w_hi = w.min(w - ow);
    if w_lo >= w_hi {
        return;
    }
    for hh in h_lo..h_hi {
        let drow = (hh * w + w_lo) as usize;
        let srow = ((hh + oh) * w + (w_lo + ow)) as usize;
        let len = (w_hi - w_lo) as usize;
        let d = &mut dst[drow..drow + len];
        let s = &src[srow..srow + len];
        for i in 0..len {
            d[i] = d[i] + scale * s[i];
        }
    }
}

/// `sum_h,w a[h][w] * b[h + oh][w + ow]` over the valid range. Row partials
/// accumulate in the element type (vectorizable); rows combine in f64.
#[inline]
fn dot_shifted<T: Scalar>(a: &[T], b: &[T], h: usize, w: usize, oh: isize, ow: isize) -> f64 {
    let (h, w) = (h as isize, w as isize);
    let h_lo = 0.max(-oh);
    let h_hi = h.min(h - oh);
    let w_lo = 0.max(-ow);
    let w_hi = w.min(w - ow);
    if w_lo >= w_hi {
        return 0.0;
    }
    let mut acc = 0.0f64;
    for hh in h_lo..h_hi {
        let arow = (hh * w + w_lo) as usize;
        let brow = ((hh + oh) * w + (w_lo + ow)) as usize;
        let len = (w_hi - w_lo) as usize;
        let av = &a[arow..arow + len];
        let bv = &b[brow..brow + len];
        let mut local = T::zero();
        for i in 0..len {
            local = local + av[i] * bv[i];
        }
        acc += local.into_f64();
    }
    acc
}

pub fn relu_forward<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.relu()
}

pub fn relu_backward<T: Scalar>(pre: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if pre.dims() != grad_out.dims() {
        return Err(Error::ShapeMismatch("relu backward shapes".into()));
    }
    let data = pre
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&p, &g)| if p > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(pre.dims(), data)
}

/// Per-pixel softmax over the channel axis of a `(N, C, H, W)` tensor.
/// Works in contiguous plane passes: channel max, exponentials, normalize.
pub fn softmax_channels<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = logits.dim4()?;
    let plane = h * w;
    let mut out = Tensor::zeros(logits.dims())?;
    let mut maxv = vec![T::zero(); plane];
    let mut denom = vec![T::zero(); plane];
    for ni in 0..n {
        maxv.copy_from_slice(logits.channel(ni, 0));
        for ci in 1..c {
            for (m, &v) in maxv.iter_mut().zip(logits.channel(ni, ci)) {
                if v > *m {
                    *m = v;
                }
            }
        }
        denom.iter_mut().for_each(|d| *d = T::zero());
        for ci in 0..c {
            let src = logits.channel(ni, ci);
            let dst = out.channel_mut(ni, ci);
            for p in 0..plane {
                let e = (src[p] - maxv[p]).exp();
                dst[p] = e;
                denom[p] = denom[p] + e;
            }
        }
        for ci in 0..c {
            let dst = out.channel_mut(ni, ci);
            for p in 0..plane {
                dst[p] = dst[p] / denom[p];
            }
        }
    }
    Ok(out)
}

/// Backward of [`softmax_channels`]: `dlogits = p * (dprobs - sum(dprobs * p))`.
pub fn softmax_backward<T: Scalar>(probs: &Tensor<T>, dprobs: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = probs.dim4()?;
    if probs.dims() != dprobs.dims() {
        return Err(Error::ShapeMismatch("softmax backward shapes".into()));
    }
    let plane = h * w;
    let mut out = Tensor::zeros(probs.dims())?;
    let mut inner = vec![T::zero(); plane];
    for ni in 0..n {
        inner.iter_mut().for_each(|v| *v = T::zero());
        for ci in 0..c {
            let pv = probs.channel(ni, ci);
            let gv = dprobs.channel(ni, ci);
            for p in 0..plane {
                inner[p] = inner[p] + pv[p] * gv[p];
            }
        }
        for ci in 0..c {
            let pv = probs.channel(ni, ci);
            let gv = dprobs.channel(ni, ci);
            let dst = out.channel_mut(ni, ci);
            for p in 0..plane {
                dst[p] = pv[p] * (gv[p] - inner[p]);
            }
        }
    }
    Ok(out)
}

/// Pixel-mean cross-entropy of `(N, C, H, W)` logits against integer labels.
/// Returns the loss and its gradient w.r.t. the logits.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &LabelMap,
) -> Result<(f64, Tensor<T>)> {
    let (n, c, h, w) = logits.dim4()?;
    let (ln, lh, lw) = labels.dims();
    if (ln, lh, lw) != (n, h, w) {
        return Err(Error::ShapeMismatch(format!(
            "labels ({ln},{lh},{lw}) vs logits ({n},{c},{h},{w})"
        )));
    }
    let plane = h * w;
    let count = (n * plane) as f64;
    if let Some(&bad) = labels.data().iter().find(|&&v| v as usize >= c) {
        return Err(Error::ShapeMismatch(format!(
            "label id {bad} out of range for {c} classes"
        )));
    }
    let inv_count = T::from_f64s(1.0 / count);
    let mut loss = 0.0;
    let mut grad = softmax_channels(logits)?;
    for ni in 0..n {
        let lab = labels.sample(ni);
        // loss needs log-probabilities; recompute the stable normalizer
        let mut maxv = vec![f64::NEG_INFINITY; plane];
        for ci in 0..c {
            for (m, &v) in maxv.iter_mut().zip(logits.channel(ni, ci)) {
                let v = v.into_f64();
                if v > *m {
                    *m = v;
                }
            }
        }
        let mut denom = vec![0f64; plane];
        for ci in 0..c {
            for (d, (&v, &m)) in denom
                .iter_mut()
                .zip(logits.channel(ni, ci).iter().zip(&maxv))
            {
                *d += (v.into_f64() - m).exp();
            }
        }
        for p in 0..plane {
            let y = lab[p] as usize;
            loss += maxv[p] + denom[p].ln() - logits.channel(ni, y)[p].into_f64();
        }
        // gradient: (softmax - onehot) / count
        for ci in 0..c {
            let dst = grad.channel_mut(ni, ci);
            for p in 0..plane {
                dst[p] = dst[p] * inv_count;
            }
        }
        for p in 0..plane {
            let y = lab[p] as usize;
            let dst = grad.channel_mut(ni, y);
            dst[p] = dst[p] - inv_count;
        }
    }
    Ok((loss / count, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    /// Direct quintuple-loop convolution, kept independent of the shifted
    /// implementation above.
    fn conv_oracle(x: &Tensor<f64>, conv: &Conv2d<f64>) -> Tensor<f64> {
        let (n, cin, h, w) = x.dim4().unwrap();
        let cout = conv.cout();
        let k = conv.kernel as isize;
        let half = k / 2;
        let mut out = Tensor::zeros(&[n, cout, h, w]).unwrap();
        for ni in 0..n {
            for co in 0..cout {
                for hh in 0..h as isize {
                    for ww in 0..w as isize {
                        let mut acc = conv.bias.data()[co];
                        for ci in 0..cin {
                            for dh in 0..k {
                                for dw in 0..k {
                                    let sh = hh + dh - half;
                                    let sw = ww + dw - half;
                                    if sh < 0 || sw < 0 || sh >= h as isize || sw >= w as isize {
                                        continue;
                                    }
                                    let wv = conv.weight.data()[(((co * cin) + ci) as usize
                                        * (k * k) as usize)
                                        + (dh * k + dw) as usize];
                                    acc += wv * x.channel(ni, ci)[(sh * w as isize + sw) as usize];
                                }
                            }
                        }
                        out.channel_mut(ni, co)[(hh * w as isize + ww) as usize] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_counts_neighbors() {
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3]).unwrap();
        let conv = Conv2d {
            weight: Tensor::ones(&[1, 1, 3, 3]).unwrap(),
            bias: Tensor::zeros(&[1]).unwrap(),
            kernel: 3,
        };
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.channel(0, 0)[4], 9.0); // center
        assert_eq!(y.channel(0, 0)[0], 4.0); // corner
        assert_eq!(y.channel(0, 0)[1], 6.0); // edge
    }

    #[test]
    fn identity_1x1_kernel() {
        let mut rng = SeededRng::new(2);
        let x = Tensor::<f64>::uniform(&[1, 2, 3, 3], -1.0, 1.0, &mut rng).unwrap();
        let conv = Conv2d {
            weight: Tensor::from_vec(&[2, 2, 1, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            bias: Tensor::zeros(&[2]).unwrap(),
            kernel: 1,
        };
        let y = conv.forward(&x).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn forward_matches_direct_summation_oracle() {
        let mut rng = SeededRng::new(3);
        for kernel in [1usize, 3] {
            let x = Tensor::<f64>::uniform(&[2, 3, 5, 4], -1.0, 1.0, &mut rng).unwrap();
            let conv = Conv2d::<f64>::new(3, 2, kernel, 0.5, &mut rng).unwrap();
            let got = conv.forward(&x).unwrap();
            let want = conv_oracle(&x, &conv);
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = SeededRng::new(4);
        let x0 = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let conv0 = Conv2d::<f64>::new(2, 2, 3, 0.5, &mut rng).unwrap();
        // random linear functional on the output makes the loss scalar
        let probe = Tensor::<f64>::uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut rng).unwrap();
        let loss_of = |x: &Tensor<f64>, conv: &Conv2d<f64>| {
            conv.forward(x)
                .unwrap()
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let (dx, dw, db) = conv0.backward(&x0, &probe).unwrap();

        let fx = |v: &[f64]| {
            let x = Tensor::from_vec(x0.dims(), v.to_vec()).unwrap();
            loss_of(&x, &conv0)
        };
        let err = gradcheck::check(fx, x0.data(), dx.data(), gradcheck::DEFAULT_STEP);
        assert!(err < 1e-6, "input grad err {err}");

        let fw = |v: &[f64]| {
            let mut c = conv0.clone();
            c.weight = Tensor::from_vec(conv0.weight.dims(), v.to_vec()).unwrap();
            loss_of(&x0, &c)
        };
        let err = gradcheck::check(fw, conv0.weight.data(), dw.data(), gradcheck::DEFAULT_STEP);
        assert!(err < 1e-6, "weight grad err {err}");

        let fb = |v: &[f64]| {
            let mut c = conv0.clone();
            c.bias = Tensor::from_vec(&[2], v.to_vec()).unwrap();
            loss_of(&x0, &c)
        };
        let err = gradcheck::check(fb, conv0.bias.data(), db.data(), gradcheck::DEFAULT_STEP);
        assert!(err < 1e-6, "bias grad err {err}");
    }

    #[test]
    fn softmax_sums_to_one_and_saturates() {
        let mut rng = SeededRng::new(5);
        let logits = Tensor::<f64>::uniform(&[1, 4, 3, 3], -2.0, 2.0, &mut rng).unwrap();
        let p = softmax_channels(&logits).unwrap();
        for px in 0..9 {
            let s: f64 = (0..4).map(|c| p.channel(0, c)[px]).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let mut sat = Tensor::<f64>::zeros(&[1, 3, 1, 1]).unwrap();
        sat.channel_mut(0, 1)[0] = 50.0;
        let p = softmax_channels(&sat).unwrap();
        assert!(p.channel(0, 1)[0] > 1.0 - 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let logits = Tensor::<f64>::zeros(&[1, 2, 2, 2]).unwrap();
        let labels = LabelMap::zeros(1, 2, 2);
        let (loss, _) = cross_entropy(&logits, &labels).unwrap();
        assert!((loss - (2f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_checks() {
        let mut rng = SeededRng::new(6);
        let logits0 = Tensor::<f64>::uniform(&[1, 3, 2, 3], -1.0, 1.0, &mut rng).unwrap();
        let labels = LabelMap::new(1, 2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
        let (_, grad) = cross_entropy(&logits0, &labels).unwrap();
        let f = |v: &[f64]| {
            let l = Tensor::from_vec(logits0.dims(), v.to_vec()).unwrap();
            cross_entropy(&l, &labels).unwrap().0
        };
        let err = gradcheck::check(f, logits0.data(), grad.data(), gradcheck::DEFAULT_STEP);
        assert!(err < 1e-6, "ce grad err {err}");
    }
}
