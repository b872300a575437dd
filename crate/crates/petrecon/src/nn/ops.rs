//! Differentiable layer primitives: 2D convolution with replicate padding,
//! its exact adjoints, batch normalization and ReLU.
//!
//! Convolutions pad with edge replication so a k x k kernel keeps (or, with
//! stride 2, halves) the spatial size. The input-gradient routine first
//! scatters into the padded frame and then folds the frame back onto the
//! borders, which makes it the exact linear adjoint of the forward pass;
//! the transposed convolution used for upsampling is defined as that
//! adjoint, so the two need no separate kernels.
//!
//! All parallel loops write disjoint output chunks and reduce in a fixed
//! order, keeping results independent of the thread count.

use rayon::prelude::*;

use super::tensor::Tensor;

/// Shape of a convolution weight block, laid out `w[co][ci][ky][kx]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvShape {
    pub c_out: usize,
    pub c_in: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn len(&self) -> usize {
        self.c_out * self.c_in * self.k * self.k
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn at(&self, co: usize, ci: usize, ky: usize, kx: usize) -> usize {
        ((co * self.c_in + ci) * self.k + ky) * self.k + kx
    }
}

/// Replicate-pad each plane by `pad` on all sides.
pub fn pad_replicate(x: &Tensor, pad: usize) -> Tensor {
    let (ph, pw) = (x.h + 2 * pad, x.w + 2 * pad);
    let mut out = Tensor::zeros(x.n, x.c, ph, pw);
    for n in 0..x.n {
        for c in 0..x.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for py in 0..ph {
                let sy = py.saturating_sub(pad).min(x.h - 1);
                let drow = &mut dst[py * pw..(py + 1) * pw];
                let srow = &src[sy * x.w..(sy + 1) * x.w];
                for (px, d) in drow.iter_mut().enumerate() {
                    let sx = px.saturating_sub(pad).min(x.w - 1);
                    *d = srow[sx];
                }
            }
        }
    }
    out
}

/// Fold a padded-frame gradient back onto the unpadded image: the adjoint
/// of [`pad_replicate`]. Border pixels collect every padded position that
/// replicated them.
pub fn fold_replicate_adjoint(gpad: &Tensor, pad: usize) -> Tensor {
    let h = gpad.h - 2 * pad;
    let w = gpad.w - 2 * pad;
    let mut out = Tensor::zeros(gpad.n, gpad.c, h, w);
    for n in 0..gpad.n {
        for c in 0..gpad.c {
            let src = gpad.plane(n, c);
            let dst = out.plane_mut(n, c);
            for py in 0..gpad.h {
                let sy = py.saturating_sub(pad).min(h - 1);
                let srow = &src[py * gpad.w..(py + 1) * gpad.w];
                let drow = &mut dst[sy * w..(sy + 1) * w];
                for (px, s) in srow.iter().enumerate() {
                    let sx = px.saturating_sub(pad).min(w - 1);
                    drow[sx] += s;
                }
            }
        }
    }
    out
}

/// Output spatial size of a padded convolution.
pub fn conv_out_size(h: usize, w: usize, k: usize, stride: usize) -> (usize, usize) {
    let pad = k / 2;
    ((h + 2 * pad - k) / stride + 1, (w + 2 * pad - k) / stride + 1)
}

/// Convolution with replicate padding. `bias`, if given, has `c_out` entries.
pub fn conv2d(x: &Tensor, w: &[f64], shape: ConvShape, stride: usize, bias: Option<&[f64]>) -> Tensor {
    assert_eq!(x.c, shape.c_in, "conv input channels mismatch");
    assert_eq!(w.len(), shape.len(), "conv weight length mismatch");
    let pad = shape.k / 2;
    let xp = pad_replicate(x, pad);
    let (oh, ow) = conv_out_size(x.h, x.w, shape.k, stride);
    let mut out = Tensor::zeros(x.n, shape.c_out, oh, ow);
    let plane = oh * ow;
    let xp_plane = xp.plane_len();
    out.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(q, out_c)| {
            let n = q / shape.c_out;
            let co = q % shape.c_out;
            if let Some(b) = bias {
                out_c.fill(b[co]);
            }
            for ci in 0..shape.c_in {
                let xplane = &xp.data[(n * xp.c + ci) * xp_plane..(n * xp.c + ci + 1) * xp_plane];
                for ky in 0..shape.k {
                    for kx in 0..shape.k {
                        let wv = w[shape.at(co, ci, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let xrow = &xplane[(oy * stride + ky) * xp.w..];
                            let orow = &mut out_c[oy * ow..(oy + 1) * ow];
                            if stride == 1 {
                                let xrow = &xrow[kx..kx + ow];
                                for (o, xv) in orow.iter_mut().zip(xrow) {
                                    *o += wv * xv;
                                }
                            } else {
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    *o += wv * xrow[ox * stride + kx];
                                }
                            }
                        }
                    }
                }
            }
        });
    out
}

/// Gradient of [`conv2d`] with respect to its input: the exact adjoint of
/// the forward map (including the replicate-padding fold). `in_h`/`in_w`
/// are the spatial dims of the original input.
pub fn conv2d_input_grad(
    gy: &Tensor,
    w: &[f64],
    shape: ConvShape,
    stride: usize,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    assert_eq!(gy.c, shape.c_out, "conv output channels mismatch");
    let pad = shape.k / 2;
    let (oh, ow) = conv_out_size(in_h, in_w, shape.k, stride);
    assert_eq!((gy.h, gy.w), (oh, ow), "conv output size mismatch");
    let (ph, pw) = (in_h + 2 * pad, in_w + 2 * pad);
    let mut gpad = Tensor::zeros(gy.n, shape.c_in, ph, pw);
    let plane = ph * pw;
    gpad.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(q, gx_c)| {
            let n = q / shape.c_in;
            let ci = q % shape.c_in;
            for co in 0..shape.c_out {
                let gplane = gy.plane(n, co);
                for ky in 0..shape.k {
                    for kx in 0..shape.k {
                        let wv = w[shape.at(co, ci, ky, kx)];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..oh {
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &mut gx_c[(oy * stride + ky) * pw..];
                            if stride == 1 {
                                let xrow = &mut xrow[kx..kx + ow];
                                for (xv, g) in xrow.iter_mut().zip(grow) {
                                    *xv += wv * g;
                                }
                            } else {
                                for (ox, g) in grow.iter().enumerate() {
                                    xrow[ox * stride + kx] += wv * g;
                                }
                            }
                        }
                    }
                }
            }
        });
    fold_replicate_adjoint(&gpad, pad)
}

/// Gradients of [`conv2d`] with respect to weights and bias.
pub fn conv2d_param_grad(x: &Tensor, gy: &Tensor, shape: ConvShape, stride: usize) -> (Vec<f64>, Vec<f64>) {
    assert_eq!(x.c, shape.c_in);
    assert_eq!(gy.c, shape.c_out);
    let pad = shape.k / 2;
    let xp = pad_replicate(x, pad);
    let (oh, ow) = (gy.h, gy.w);
    let per_co = shape.c_in * shape.k * shape.k;
    let mut gw = vec![0.0; shape.len()];
    gw.par_chunks_mut(per_co).enumerate().for_each(|(co, gw_c)| {
        for ci in 0..shape.c_in {
            for ky in 0..shape.k {
                for kx in 0..shape.k {
                    let mut acc = 0.0;
                    for n in 0..x.n {
                        let gplane = gy.plane(n, co);
                        let xplane = xp.plane(n, ci);
                        for oy in 0..oh {
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            let xrow = &xplane[(oy * stride + ky) * xp.w..];
                            if stride == 1 {
                                let xrow = &xrow[kx..kx + ow];
                                for (g, xv) in grow.iter().zip(xrow) {
                                    acc += g * xv;
                                }
                            } else {
                                for (ox, g) in grow.iter().enumerate() {
                                    acc += g * xrow[ox * stride + kx];
                                }
                            }
                        }
                    }
                    gw_c[(ci * shape.k + ky) * shape.k + kx] = acc;
                }
            }
        }
    });
    let gb: Vec<f64> = (0..shape.c_out)
        .map(|co| {
            let mut acc = 0.0;
            for n in 0..gy.n {
                acc += gy.plane(n, co).iter().sum::<f64>();
            }
            acc
        })
        .collect();
    (gw, gb)
}

pub const BN_EPS: f64 = 1e-5;

/// Per-channel batch normalization parameters and running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNorm {
    pub fn identity(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }
}

/// Saved forward state needed by the training-mode backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    /// Normalized activations (before scale and shift).
    pub xhat: Tensor,
    /// Per-channel `1 / sqrt(var + eps)` of the batch.
    pub inv_std: Vec<f64>,
}

/// Training-mode forward: normalize by biased batch statistics over
/// (n, h, w) and update the running statistics with EMA momentum
/// `running = momentum * running + (1 - momentum) * batch`.
pub fn bn_forward_train(x: &Tensor, bn: &mut BatchNorm, momentum: f64) -> (Tensor, BnCache) {
    assert_eq!(x.c, bn.channels());
    let m = (x.n * x.h * x.w) as f64;
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut xhat = Tensor::zeros(x.n, x.c, x.h, x.w);
    let mut inv_std = vec![0.0; x.c];
    for c in 0..x.c {
        let mut sum = 0.0;
        for n in 0..x.n {
            sum += x.plane(n, c).iter().sum::<f64>();
        }
        let mean = sum / m;
        let mut var_sum = 0.0;
        for n in 0..x.n {
            for &v in x.plane(n, c) {
                let d = v - mean;
                var_sum += d * d;
            }
        }
        let var = var_sum / m;
        let istd = 1.0 / (var + BN_EPS).sqrt();
        inv_std[c] = istd;
        let (g, b) = (bn.gamma[c], bn.beta[c]);
        for n in 0..x.n {
            let xin = x.plane(n, c);
            // Split borrows: xhat and y planes are disjoint buffers.
            let xh = xhat.plane_mut(n, c);
            for (i, &v) in xin.iter().enumerate() {
                xh[i] = (v - mean) * istd;
            }
            let yp = y.plane_mut(n, c);
            let xh = xhat.plane(n, c);
            for (yo, &h) in yp.iter_mut().zip(xh) {
                *yo = g * h + b;
            }
        }
        bn.running_mean[c] = momentum * bn.running_mean[c] + (1.0 - momentum) * mean;
        bn.running_var[c] = momentum * bn.running_var[c] + (1.0 - momentum) * var;
    }
    (y, BnCache { xhat, inv_std })
}

/// Inference-mode forward using running statistics.
pub fn bn_forward_eval(x: &Tensor, bn: &BatchNorm) -> Tensor {
    assert_eq!(x.c, bn.channels());
    let mut y = Tensor::zeros(x.n, x.c, x.h, x.w);
    for c in 0..x.c {
        let istd = 1.0 / (bn.running_var[c] + BN_EPS).sqrt();
        let scale = bn.gamma[c] * istd;
        let shift = bn.beta[c] - bn.running_mean[c] * scale;
        for n in 0..x.n {
            let xin = x.plane(n, c);
            let yp = y.plane_mut(n, c);
            for (yo, &v) in yp.iter_mut().zip(xin) {
                *yo = scale * v + shift;
            }
        }
    }
    y
}

/// Training-mode backward: input gradient plus (dgamma, dbeta).
pub fn bn_backward(gy: &Tensor, cache: &BnCache, bn: &BatchNorm) -> (Tensor, Vec<f64>, Vec<f64>) {
    let m = (gy.n * gy.h * gy.w) as f64;
    let mut gx = Tensor::zeros(gy.n, gy.c, gy.h, gy.w);
    let mut dgamma = vec![0.0; gy.c];
    let mut dbeta = vec![0.0; gy.c];
    for c in 0..gy.c {
        let mut sum_gy = 0.0;
        let mut sum_gy_xhat = 0.0;
        for n in 0..gy.n {
            let g = gy.plane(n, c);
            let xh = cache.xhat.plane(n, c);
            for (gv, hv) in g.iter().zip(xh) {
                sum_gy += gv;
                sum_gy_xhat += gv * hv;
            }
        }
        dgamma[c] = sum_gy_xhat;
        dbeta[c] = sum_gy;
        let coeff = bn.gamma[c] * cache.inv_std[c];
        let mean_gy = sum_gy / m;
        let mean_gy_xhat = sum_gy_xhat / m;
        for n in 0..gy.n {
            let g = gy.plane(n, c);
            let xh = cache.xhat.plane(n, c);
            let out = gx.plane_mut(n, c);
            for i in 0..g.len() {
                out[i] = coeff * (g[i] - mean_gy - xh[i] * mean_gy_xhat);
            }
        }
    }
    (gx, dgamma, dbeta)
}

/// Inference-mode input gradient: running stats are constants, so the map
/// is a per-channel scale.
pub fn bn_input_grad_eval(gy: &Tensor, bn: &BatchNorm) -> Tensor {
    let mut gx = Tensor::zeros(gy.n, gy.c, gy.h, gy.w);
    for c in 0..gy.c {
        let scale = bn.gamma[c] / (bn.running_var[c] + BN_EPS).sqrt();
        for n in 0..gy.n {
            let g = gy.plane(n, c);
            let out = gx.plane_mut(n, c);
            for (o, &v) in out.iter_mut().zip(g) {
                *o = scale * v;
            }
        }
    }
    gx
}

/// ReLU forward.
pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        n: x.n,
        c: x.c,
        h: x.h,
        w: x.w,
        data: x.data.iter().map(|&v| v.max(0.0)).collect(),
    }
}

/// ReLU backward given the forward *output* (gradient passes where y > 0).
pub fn relu_backward(gy: &Tensor, y: &Tensor) -> Tensor {
    assert!(gy.same_shape(y));
    Tensor {
        n: gy.n,
        c: gy.c,
        h: gy.h,
        w: gy.w,
        data: gy
            .data
            .iter()
            .zip(&y.data)
            .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
            .collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(n: usize, c: usize, h: usize, w: usize, seed: u64, label: &str) -> Tensor {
        let mut rng = crate::rng::derive_rng(seed, label);
        let data = (0..n * c * h * w).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_data(n, c, h, w, data)
    }

    fn rand_vec(len: usize, seed: u64, label: &str) -> Vec<f64> {
        let mut rng = crate::rng::derive_rng(seed, label);
        (0..len).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()
    }

    /// Naive direct convolution with replicate padding: the oracle.
    fn conv_naive(x: &Tensor, w: &[f64], s: ConvShape, stride: usize, bias: Option<&[f64]>) -> Tensor {
        let pad = s.k as isize / 2;
        let (oh, ow) = conv_out_size(x.h, x.w, s.k, stride);
        let mut out = Tensor::zeros(x.n, s.c_out, oh, ow);
        for n in 0..x.n {
            for co in 0..s.c_out {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = bias.map_or(0.0, |b| b[co]);
                        for ci in 0..s.c_in {
                            for ky in 0..s.k {
                                for kx in 0..s.k {
                                    let iy = (oy * stride + ky) as isize - pad;
                                    let ix = (ox * stride + kx) as isize - pad;
                                    let iy = iy.clamp(0, x.h as isize - 1) as usize;
                                    let ix = ix.clamp(0, x.w as isize - 1) as usize;
                                    acc += w[((co * s.c_in + ci) * s.k + ky) * s.k + kx]
                                        * x.plane(n, ci)[iy * x.w + ix];
                                }
                            }
                        }
                        out.plane_mut(n, co)[oy * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for &(stride, h, w) in &[(1usize, 7usize, 9usize), (2, 8, 10), (1, 1, 1), (2, 4, 4)] {
            let s = ConvShape { c_out: 4, c_in: 3, k: 3 };
            let x = rand_tensor(2, 3, h, w, 1, "conv-x");
            let wts = rand_vec(s.len(), 2, "conv-w");
            let b = rand_vec(4, 3, "conv-b");
            let fast = conv2d(&x, &wts, s, stride, Some(&b));
            let slow = conv_naive(&x, &wts, s, stride, Some(&b));
            assert!(fast.same_shape(&slow));
            for (a, bb) in fast.data.iter().zip(&slow.data) {
                assert!((a - bb).abs() < 1e-12, "stride {stride}: {a} vs {bb}");
            }
        }
    }

    #[test]
    fn conv_5x5_kernel_matches_naive() {
        let s = ConvShape { c_out: 2, c_in: 2, k: 5 };
        let x = rand_tensor(1, 2, 9, 9, 4, "conv5-x");
        let wts = rand_vec(s.len(), 5, "conv5-w");
        let fast = conv2d(&x, &wts, s, 1, None);
        let slow = conv_naive(&x, &wts, s, 1, None);
        for (a, b) in fast.data.iter().zip(&slow.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn pad_then_fold_is_adjoint() {
        // <pad(x), y> == <x, fold(y)> for random x, y.
        let x = rand_tensor(1, 2, 5, 6, 7, "pad-x");
        let y = rand_tensor(1, 2, 7, 8, 8, "pad-y");
        let px = pad_replicate(&x, 1);
        let fy = fold_replicate_adjoint(&y, 1);
        let lhs: f64 = px.data.iter().zip(&y.data).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(&fy.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn conv_input_grad_is_exact_adjoint() {
        // <conv(x), u> == <x, conv_input_grad(u)> for random vectors, for
        // both strides. This is the property the transposed convolution
        // and the network VJP rely on.
        for &stride in &[1usize, 2] {
            let s = ConvShape { c_out: 3, c_in: 2, k: 3 };
            let (h, w) = (6, 8);
            let x = rand_tensor(2, 2, h, w, 11, "adj-x");
            let wts = rand_vec(s.len(), 12, "adj-w");
            let y = conv2d(&x, &wts, s, stride, None);
            let u = rand_tensor(y.n, y.c, y.h, y.w, 13, "adj-u");
            let gx = conv2d_input_grad(&u, &wts, s, stride, h, w);
            let lhs: f64 = y.data.iter().zip(&u.data).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.data.iter().zip(&gx.data).map(|(a, b)| a * b).sum();
            assert!(
                (lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0),
                "stride {stride}: {lhs} vs {rhs}"
            );
        }
    }

    #[test]
    fn conv_param_grad_matches_finite_differences() {
        let s = ConvShape { c_out: 2, c_in: 2, k: 3 };
        let x = rand_tensor(2, 2, 5, 5, 21, "pg-x");
        let mut wts = rand_vec(s.len(), 22, "pg-w");
        let b = rand_vec(2, 23, "pg-b");
        let gy = rand_tensor(2, 2, 5, 5, 24, "pg-gy");
        // Loss = <conv(x; w, b), gy>; dLoss/dw must match FD.
        let (gw, gb) = conv2d_param_grad(&x, &gy, s, 1);
        let eps = 1e-6;
        for i in (0..s.len()).step_by(7) {
            let orig = wts[i];
            wts[i] = orig + eps;
            let lp: f64 = conv2d(&x, &wts, s, 1, Some(&b)).data.iter().zip(&gy.data).map(|(a, g)| a * g).sum();
            wts[i] = orig - eps;
            let lm: f64 = conv2d(&x, &wts, s, 1, Some(&b)).data.iter().zip(&gy.data).map(|(a, g)| a * g).sum();
            wts[i] = orig;
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (gw[i] - fd).abs() < 1e-6 * fd.abs().max(1.0),
                "weight {i}: {p} vs fd {fd}",
                p = gw[i]
            );
        }
        // Bias gradient is the plain sum of gy per channel.
        for co in 0..2 {
            let want: f64 = (0..2).map(|n| gy.plane(n, co).iter().sum::<f64>()).sum();
            assert!((gb[co] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_train_normalizes_and_tracks_running_stats() {
        let x = rand_tensor(3, 2, 4, 4, 31, "bn-x");
        let mut bn = BatchNorm::identity(2);
        let (y, cache) = bn_forward_train(&x, &mut bn, 0.9);
        let m = (3 * 4 * 4) as f64;
        for c in 0..2 {
            let mut mean = 0.0;
            let mut var = 0.0;
            for n in 0..3 {
                mean += y.plane(n, c).iter().sum::<f64>();
            }
            mean /= m;
            for n in 0..3 {
                for &v in y.plane(n, c) {
                    var += (v - mean) * (v - mean);
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-12, "normalized mean {mean}");
            // Variance is var/(var+eps) of 1, slightly below one.
            assert!((var - 1.0).abs() < 1e-3, "normalized var {var}");
            // Running stats moved 10% of the way from identity defaults.
            assert!(bn.running_mean[c].abs() > 0.0);
            assert!((bn.running_var[c] - 1.0).abs() > 0.0);
        }
        assert_eq!(cache.xhat.data.len(), x.data.len());
    }

    #[test]
    fn bn_eval_is_affine_per_channel() {
        let x = rand_tensor(1, 1, 3, 3, 41, "bne-x");
        let bn = BatchNorm {
            gamma: vec![2.0],
            beta: vec![0.5],
            running_mean: vec![1.0],
            running_var: vec![4.0],
        };
        let y = bn_forward_eval(&x, &bn);
        for (yo, xi) in y.data.iter().zip(&x.data) {
            let want = 2.0 * (xi - 1.0) / (4.0f64 + BN_EPS).sqrt() + 0.5;
            assert!((yo - want).abs() < 1e-12);
        }
    }

    #[test]
    fn bn_backward_matches_finite_differences() {
        let x = rand_tensor(2, 2, 3, 3, 51, "bnb-x");
        let gy = rand_tensor(2, 2, 3, 3, 52, "bnb-gy");
        let loss = |xx: &Tensor, g: &mut BatchNorm| -> f64 {
            let (y, _) = bn_forward_train(xx, g, 0.9);
            y.data.iter().zip(&gy.data).map(|(a, b)| a * b).sum()
        };
        let bn = BatchNorm {
            gamma: vec![1.3, 0.7],
            beta: vec![0.1, -0.2],
            running_mean: vec![0.0; 2],
            running_var: vec![1.0; 2],
        };
        let (_, cache) = bn_forward_train(&x, &mut bn.clone(), 0.9);
        let (gx, dgamma, dbeta) = bn_backward(&gy, &cache, &bn);
        let eps = 1e-6;
        for i in (0..x.data.len()).step_by(5) {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (loss(&xp, &mut bn.clone()) - loss(&xm, &mut bn.clone())) / (2.0 * eps);
            assert!(
                (gx.data[i] - fd).abs() < 2e-5 * fd.abs().max(1.0),
                "gx[{i}] {g} vs fd {fd}",
                g = gx.data[i]
            );
        }
        for c in 0..2 {
            let mut bp = bn.clone();
            bp.gamma[c] += eps;
            let mut bm = bn.clone();
            bm.gamma[c] -= eps;
            let fd = (loss(&x, &mut bp) - loss(&x, &mut bm)) / (2.0 * eps);
            assert!((dgamma[c] - fd).abs() < 1e-5 * fd.abs().max(1.0));
            let mut bp = bn.clone();
            bp.beta[c] += eps;
            let mut bm = bn.clone();
            bm.beta[c] -= eps;
            let fd = (loss(&x, &mut bp) - loss(&x, &mut bm)) / (2.0 * eps);
            assert!((dbeta[c] - fd).abs() < 1e-5 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn relu_and_backward() {
        let x = Tensor::from_data(1, 1, 1, 4, vec![-1.0, 0.0, 2.0, -0.5]);
        let y = relu(&x);
        assert_eq!(y.data, vec![0.0, 0.0, 2.0, 0.0]);
        let gy = Tensor::from_data(1, 1, 1, 4, vec![1.0, 1.0, 1.0, 1.0]);
        let gx = relu_backward(&gy, &y);
        assert_eq!(gx.data, vec![0.0, 0.0, 1.0, 0.0]);
    }
}
