//! The denoising network: a compact U-net over multi-slice windows.
//!
//! Input is a stack of adjacent slices (the centre slice plus neighbours,
//! replicated at the volume ends); output is the processed centre slice.
//! The encoder downsamples with stride-2 convolutions, the decoder
//! upsamples with stride-2 transposed convolutions, skip connections are
//! additive, and the centre input channel is added to the output (residual
//! learning). Every convolution is followed by batch normalization and
//! ReLU except the final 1-channel projection.
//!
//! With all parameters zero the convolution stack outputs zero and the
//! residual makes the network an exact identity on the centre slice; this
//! degenerate configuration is used by tests and as a sanity anchor for
//! the constrained reconstruction.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{
    bn_backward, bn_forward_eval, bn_forward_train, bn_input_grad_eval, conv2d, conv2d_input_grad,
    conv2d_param_grad, relu, relu_backward, BatchNorm, BnCache, ConvShape,
};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::ActivityVolume;

/// Architecture description; part of the run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    /// Number of input slices per window; must be odd.
    pub in_channels: usize,
    /// Feature channels per scale, shallow to deep.
    pub channels: Vec<usize>,
    /// Square kernel size; must be odd.
    pub kernel: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            in_channels: 5,
            channels: vec![16, 32, 64],
            kernel: 3,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.in_channels % 2 == 0 {
            return Err(Error::Config(format!(
                "network.in_channels must be odd and positive: got {}",
                self.in_channels
            )));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("network.channels must not be empty".into()));
        }
        if self.channels.iter().any(|&c| c == 0) {
            return Err(Error::Config(
                "network.channels entries must be positive".into(),
            ));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "network.kernel must be odd and positive: got {}",
                self.kernel
            )));
        }
        Ok(())
    }

    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    /// Spatial sizes must be divisible by this for the up path to mirror
    /// the down path exactly.
    pub fn size_divisor(&self) -> usize {
        1 << (self.scales() - 1)
    }
}

/// How a block transforms its input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BlockKind {
    Conv { stride: usize },
    /// Stride-2 transposed convolution: the exact adjoint of a stride-2
    /// replicate-padded convolution, plus bias.
    TConv,
}

/// One convolutional block: conv (or transposed conv), bias, optional
/// batch norm, optional ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock {
    pub name: String,
    pub kind: BlockKind,
    /// Weight shape in *convolution orientation*: for `TConv` the
    /// underlying convolution maps block-output channels to block-input
    /// channels.
    pub shape: ConvShape,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub bn: Option<BatchNorm>,
    pub relu: bool,
}

impl ConvBlock {
    pub fn in_channels(&self) -> usize {
        match self.kind {
            BlockKind::Conv { .. } => self.shape.c_in,
            BlockKind::TConv => self.shape.c_out,
        }
    }

    pub fn out_channels(&self) -> usize {
        match self.kind {
            BlockKind::Conv { .. } => self.shape.c_out,
            BlockKind::TConv => self.shape.c_in,
        }
    }
}

/// Per-block state saved by a cached forward pass. Caches are indexed like
/// `NetworkWeights::blocks` (execution order equals storage order).
#[derive(Debug, Clone)]
pub struct BlockCache {
    /// Block input; only kept in training mode (weight gradients need it).
    x: Option<Tensor>,
    /// Batch-norm cache; only in training mode.
    bn: Option<BnCache>,
    /// Post-activation output (ReLU mask and next block's input).
    y: Tensor,
}

/// Gradients for one block, shapes matching [`ConvBlock`].
#[derive(Debug, Clone)]
pub struct BlockGrad {
    pub gw: Vec<f64>,
    pub gb: Vec<f64>,
    pub ggamma: Vec<f64>,
    pub gbeta: Vec<f64>,
}

/// All trainable parameter gradients, aligned with `NetworkWeights::blocks`.
#[derive(Debug, Clone)]
pub struct NetworkGrads {
    pub blocks: Vec<BlockGrad>,
}

impl NetworkGrads {
    pub fn zeros_like(net: &NetworkWeights) -> NetworkGrads {
        NetworkGrads {
            blocks: net
                .blocks
                .iter()
                .map(|b| BlockGrad {
                    gw: vec![0.0; b.w.len()],
                    gb: vec![0.0; b.b.len()],
                    ggamma: vec![0.0; b.bn.as_ref().map_or(0, |bn| bn.channels())],
                    gbeta: vec![0.0; b.bn.as_ref().map_or(0, |bn| bn.channels())],
                })
                .collect(),
        }
    }

    /// Gradient buffers in the canonical parameter order (per block:
    /// weights, bias, then gamma and beta when batch norm is present).
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(4 * self.blocks.len());
        for b in &self.blocks {
            out.push(b.gw.as_slice());
            out.push(b.gb.as_slice());
            if !b.ggamma.is_empty() {
                out.push(b.ggamma.as_slice());
                out.push(b.gbeta.as_slice());
            }
        }
        out
    }

    /// Visit gradient buffers in the canonical parameter order.
    pub fn visit(&self, f: &mut impl FnMut(&[f64])) {
        for g in self.flat() {
            f(g);
        }
    }
}

/// The full network: configuration plus parameter blocks in canonical
/// order (head, downs/mids shallow to deep, ups/decs deep to shallow, out).
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights {
    pub config: NetworkConfig,
    pub blocks: Vec<ConvBlock>,
}

impl NetworkWeights {
    /// Build the block list for `config` with all parameters zero (batch
    /// norm at identity): the exact identity network.
    pub fn zeros(config: &NetworkConfig) -> Result<NetworkWeights> {
        config.validate()?;
        let ch = &config.channels;
        let s = config.scales();
        let k = config.kernel;
        let conv = |name: String, c_in: usize, c_out: usize, stride: usize, bn: bool, act: bool| ConvBlock {
            name,
            kind: BlockKind::Conv { stride },
            shape: ConvShape { c_out, c_in, k },
            w: vec![0.0; c_out * c_in * k * k],
            b: vec![0.0; c_out],
            bn: bn.then(|| BatchNorm::identity(c_out)),
            relu: act,
        };
        let mut blocks = Vec::with_capacity(4 * s - 2);
        blocks.push(conv("head".into(), config.in_channels, ch[0], 1, true, true));
        for i in 0..s - 1 {
            blocks.push(conv(format!("down{i}"), ch[i], ch[i + 1], 2, true, true));
            blocks.push(conv(format!("mid{i}"), ch[i + 1], ch[i + 1], 1, true, true));
        }
        for i in (0..s - 1).rev() {
            blocks.push(ConvBlock {
                name: format!("up{i}"),
                kind: BlockKind::TConv,
                shape: ConvShape {
                    c_out: ch[i + 1],
                    c_in: ch[i],
                    k,
                },
                w: vec![0.0; ch[i + 1] * ch[i] * k * k],
                b: vec![0.0; ch[i]],
                bn: Some(BatchNorm::identity(ch[i])),
                relu: true,
            });
            blocks.push(conv(format!("dec{i}"), ch[i], ch[i], 1, true, true));
        }
        blocks.push(conv("out".into(), ch[0], 1, 1, false, false));
        Ok(NetworkWeights {
            config: config.clone(),
            blocks,
        })
    }

    /// He-normal initialization of all convolution weights; biases and
    /// batch-norm offsets start at zero, scales at one.
    pub fn init_he(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<NetworkWeights> {
        use rand_distr::{Distribution, StandardNormal};
        let mut net = NetworkWeights::zeros(config)?;
        for block in &mut net.blocks {
            let fan_in = (block.in_channels() * block.shape.k * block.shape.k) as f64;
            let std = (2.0 / fan_in).sqrt();
            for w in &mut block.w {
                let z: f64 = StandardNormal.sample(rng);
                *w = std * z;
            }
        }
        Ok(net)
    }

    /// He initialization with the output head left at zero, so the whole
    /// network starts as the exact identity and training learns a
    /// correction on top of it. A He-scale head would start the correction
    /// orders of magnitude above typical image intensities and most of the
    /// optimization budget would go into shrinking it.
    pub fn init_residual(config: &NetworkConfig, rng: &mut ChaCha8Rng) -> Result<NetworkWeights> {
        let mut net = NetworkWeights::init_he(config, rng)?;
        let oi = net.idx_out();
        net.blocks[oi].w.fill(0.0);
        Ok(net)
    }

    pub fn n_params(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.w.len() + b.b.len() + b.bn.as_ref().map_or(0, |bn| 2 * bn.channels()))
            .sum()
    }

    /// Visit trainable parameters mutably in the canonical order matching
    /// [`NetworkGrads::visit`].
    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&mut Vec<f64>)) {
        for b in &mut self.blocks {
            f(&mut b.w);
            f(&mut b.b);
            if let Some(bn) = &mut b.bn {
                f(&mut bn.gamma);
                f(&mut bn.beta);
            }
        }
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.c != self.config.in_channels {
            return Err(Error::Dimension(format!(
                "network expects {} input channels, got {}",
                self.config.in_channels, x.c
            )));
        }
        let d = self.config.size_divisor();
        if x.h % d != 0 || x.w % d != 0 {
            return Err(Error::Dimension(format!(
                "input {}x{} not divisible by {d} as required by {} scales",
                x.h,
                x.w,
                self.config.scales()
            )));
        }
        Ok(())
    }

    /// Training-mode forward; updates batch-norm running statistics and
    /// returns caches for [`NetworkWeights::backward`].
    pub fn forward_train(&mut self, x: &Tensor, bn_momentum: f64) -> Result<(Tensor, Vec<BlockCache>)> {
        self.check_input(x)?;
        let s = self.config.scales();
        let mut caches = Vec::with_capacity(self.blocks.len());
        let mut skips: Vec<Tensor> = Vec::with_capacity(s - 1);

        let ih = self.idx_head();
        let (mut a, c) = block_forward_train(&mut self.blocks[ih], x, bn_momentum);
        caches.push(c);
        for i in 0..s - 1 {
            skips.push(a.clone());
            let di = self.idx_down(i);
            let (d, c) = block_forward_train(&mut self.blocks[di], &a, bn_momentum);
            caches.push(c);
            let mi = self.idx_mid(i);
            let (m, c) = block_forward_train(&mut self.blocks[mi], &d, bn_momentum);
            caches.push(c);
            a = m;
        }
        for i in (0..s - 1).rev() {
            let ui = self.idx_up(i);
            let (mut u, c) = block_forward_train(&mut self.blocks[ui], &a, bn_momentum);
            caches.push(c);
            u.add_assign(&skips[i]);
            let di = self.idx_dec(i);
            let (d, c) = block_forward_train(&mut self.blocks[di], &u, bn_momentum);
            caches.push(c);
            a = d;
        }
        let oi = self.idx_out();
        let (mut y, c) = block_forward_train(&mut self.blocks[oi], &a, bn_momentum);
        caches.push(c);
        add_residual(&mut y, x, self.config.in_channels / 2);
        Ok((y, caches))
    }

    /// Inference-mode forward.
    pub fn forward_eval(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_eval_impl(x, false)?.0)
    }

    /// Inference-mode forward that keeps the caches needed for an input
    /// gradient (VJP) afterwards.
    pub fn forward_eval_cached(&self, x: &Tensor) -> Result<(Tensor, Vec<BlockCache>)> {
        let (y, caches) = self.forward_eval_impl(x, true)?;
        Ok((y, caches))
    }

    fn forward_eval_impl(&self, x: &Tensor, keep: bool) -> Result<(Tensor, Vec<BlockCache>)> {
        self.check_input(x)?;
        let s = self.config.scales();
        let mut caches = Vec::with_capacity(if keep { self.blocks.len() } else { 0 });
        let mut skips: Vec<Tensor> = Vec::with_capacity(s - 1);
        let push = |c: Option<BlockCache>, caches: &mut Vec<BlockCache>| {
            if let Some(c) = c {
                caches.push(c);
            }
        };

        let (mut a, c) = block_forward_eval(&self.blocks[self.idx_head()], x, keep);
        push(c, &mut caches);
        for i in 0..s - 1 {
            skips.push(a.clone());
            let (d, c) = block_forward_eval(&self.blocks[self.idx_down(i)], &a, keep);
            push(c, &mut caches);
            let (m, c) = block_forward_eval(&self.blocks[self.idx_mid(i)], &d, keep);
            push(c, &mut caches);
            a = m;
        }
        for i in (0..s - 1).rev() {
            let (mut u, c) = block_forward_eval(&self.blocks[self.idx_up(i)], &a, keep);
            push(c, &mut caches);
            u.add_assign(&skips[i]);
            let (d, c) = block_forward_eval(&self.blocks[self.idx_dec(i)], &u, keep);
            push(c, &mut caches);
            a = d;
        }
        let (mut y, c) = block_forward_eval(&self.blocks[self.idx_out()], &a, keep);
        push(c, &mut caches);
        add_residual(&mut y, x, self.config.in_channels / 2);
        Ok((y, caches))
    }

    /// Full backward pass (training-mode caches): parameter gradients and
    /// input gradient, given the cotangent of the output.
    pub fn backward(&self, caches: &[BlockCache], gy: &Tensor) -> (NetworkGrads, Tensor) {
        self.backward_impl(caches, gy, true)
    }

    /// Input gradient only, for caches produced in eval mode.
    pub fn backward_input_eval(&self, caches: &[BlockCache], gy: &Tensor) -> Tensor {
        self.backward_impl(caches, gy, false).1
    }

    fn backward_impl(&self, caches: &[BlockCache], gy: &Tensor, with_params: bool) -> (NetworkGrads, Tensor) {
        assert_eq!(caches.len(), self.blocks.len(), "cache/block count mismatch");
        let s = self.config.scales();
        let mut grads = NetworkGrads::zeros_like(self);

        let back = |idx: usize, g: &Tensor, grads: &mut NetworkGrads| -> Tensor {
            let block = &self.blocks[idx];
            let cache = &caches[idx];
            // Reconstruct the block's input spatial size from its output.
            let (ih, iw) = match block.kind {
                BlockKind::Conv { stride } => (cache.y.h * stride, cache.y.w * stride),
                BlockKind::TConv => (cache.y.h / 2, cache.y.w / 2),
            };
            let grad = with_params.then(|| &mut grads.blocks[idx]);
            block_backward(block, cache, g, grad, ih, iw)
        };

        let mut g = back(self.idx_out(), gy, &mut grads);
        let mut skip_grads: Vec<Option<Tensor>> = vec![None; s - 1];
        for i in 0..s - 1 {
            g = back(self.idx_dec(i), &g, &mut grads);
            skip_grads[i] = Some(g.clone());
            g = back(self.idx_up(i), &g, &mut grads);
        }
        for i in (0..s - 1).rev() {
            g = back(self.idx_mid(i), &g, &mut grads);
            g = back(self.idx_down(i), &g, &mut grads);
            g.add_assign(skip_grads[i].as_ref().expect("skip gradient recorded"));
        }
        let mut gx = back(self.idx_head(), &g, &mut grads);

        // Residual: output gradient also reaches the centre input channel.
        let centre = self.config.in_channels / 2;
        for n in 0..gx.n {
            let add = gy.plane(n, 0).to_vec();
            let dst = gx.plane_mut(n, centre);
            for (d, a) in dst.iter_mut().zip(&add) {
                *d += a;
            }
        }
        (grads, gx)
    }

    // Canonical block indices (execution order equals storage order).
    fn idx_head(&self) -> usize {
        0
    }
    fn idx_down(&self, i: usize) -> usize {
        1 + 2 * i
    }
    fn idx_mid(&self, i: usize) -> usize {
        2 + 2 * i
    }
    fn idx_up(&self, i: usize) -> usize {
        let s = self.config.scales();
        2 * (s - 1) + 1 + 2 * (s - 2 - i)
    }
    fn idx_dec(&self, i: usize) -> usize {
        self.idx_up(i) + 1
    }
    fn idx_out(&self) -> usize {
        self.blocks.len() - 1
    }
}

fn add_residual(y: &mut Tensor, x: &Tensor, centre: usize) {
    for n in 0..y.n {
        let src = x.plane(n, centre).to_vec();
        let dst = y.plane_mut(n, 0);
        for (d, s) in dst.iter_mut().zip(&src) {
            *d += s;
        }
    }
}

/// Linear part of a block's forward pass (conv or transposed conv + bias).
fn block_linear(block: &ConvBlock, x: &Tensor) -> Tensor {
    match block.kind {
        BlockKind::Conv { stride } => conv2d(x, &block.w, block.shape, stride, Some(&block.b)),
        BlockKind::TConv => {
            let mut y = conv2d_input_grad(x, &block.w, block.shape, 2, x.h * 2, x.w * 2);
            for c in 0..y.c {
                let bias = block.b[c];
                for n in 0..y.n {
                    for v in y.plane_mut(n, c) {
                        *v += bias;
                    }
                }
            }
            y
        }
    }
}

fn block_forward_train(block: &mut ConvBlock, x: &Tensor, momentum: f64) -> (Tensor, BlockCache) {
    let pre = block_linear(block, x);
    let (normed, bn_cache) = match &mut block.bn {
        Some(bn) => {
            let (y, cache) = bn_forward_train(&pre, bn, momentum);
            (y, Some(cache))
        }
        None => (pre, None),
    };
    let y = if block.relu { relu(&normed) } else { normed };
    let cache = BlockCache {
        x: Some(x.clone()),
        bn: bn_cache,
        y: y.clone(),
    };
    (y, cache)
}

fn block_forward_eval(block: &ConvBlock, x: &Tensor, keep: bool) -> (Tensor, Option<BlockCache>) {
    let pre = block_linear(block, x);
    let normed = match &block.bn {
        Some(bn) => bn_forward_eval(&pre, bn),
        None => pre,
    };
    let y = if block.relu { relu(&normed) } else { normed };
    let cache = keep.then(|| BlockCache {
        x: None,
        bn: None,
        y: y.clone(),
    });
    (y, cache)
}

/// Backward through one block. Returns the input gradient; fills `grad`
/// with parameter gradients when given (training mode).
fn block_backward(
    block: &ConvBlock,
    cache: &BlockCache,
    gy: &Tensor,
    grad: Option<&mut BlockGrad>,
    in_h: usize,
    in_w: usize,
) -> Tensor {
    let g_act = if block.relu {
        relu_backward(gy, &cache.y)
    } else {
        gy.clone()
    };
    let (g_pre, bn_grads) = match (&block.bn, &cache.bn) {
        (Some(bn), Some(bn_cache)) => {
            let (gx, dgamma, dbeta) = bn_backward(&g_act, bn_cache, bn);
            (gx, Some((dgamma, dbeta)))
        }
        (Some(bn), None) => (bn_input_grad_eval(&g_act, bn), None),
        (None, _) => (g_act, None),
    };
    let gx = match block.kind {
        BlockKind::Conv { stride } => {
            conv2d_input_grad(&g_pre, &block.w, block.shape, stride, in_h, in_w)
        }
        // Adjoint of the adjoint: the forward convolution.
        BlockKind::TConv => conv2d(&g_pre, &block.w, block.shape, 2, None),
    };
    if let Some(grad) = grad {
        let x = cache.x.as_ref().expect("training cache keeps block input");
        match block.kind {
            BlockKind::Conv { stride } => {
                let (gw, gb) = conv2d_param_grad(x, &g_pre, block.shape, stride);
                grad.gw = gw;
                grad.gb = gb;
            }
            BlockKind::TConv => {
                // y = A' x for the stride-2 conv A: the weight gradient is
                // the usual bilinear form with the roles of input and
                // output swapped.
                let (gw, _) = conv2d_param_grad(&g_pre, x, block.shape, 2);
                grad.gw = gw;
                grad.gb = (0..block.b.len())
                    .map(|c| {
                        let mut acc = 0.0;
                        for n in 0..g_pre.n {
                            acc += g_pre.plane(n, c).iter().sum::<f64>();
                        }
                        acc
                    })
                    .collect();
            }
        }
        if let Some((dgamma, dbeta)) = bn_grads {
            grad.ggamma = dgamma;
            grad.gbeta = dbeta;
        }
    }
    gx
}

/// Stack the `in_channels`-slice window centred on each slice of a volume
/// into one NCHW batch (batch index = slice index); volume ends replicate.
pub fn volume_to_windows(vol: &ActivityVolume, in_channels: usize) -> Tensor {
    let g = vol.grid;
    let half = in_channels / 2;
    let mut t = Tensor::zeros(g.nz, in_channels, g.ny, g.nx);
    for k in 0..g.nz {
        for c in 0..in_channels {
            let src = (k as isize + c as isize - half as isize).clamp(0, g.nz as isize - 1) as usize;
            t.plane_mut(k, c).copy_from_slice(vol.slice(src));
        }
    }
    t
}

/// Adjoint of [`volume_to_windows`]: scatter window-stack gradients back
/// onto volume slices (edge replication folds onto the end slices).
pub fn windows_to_volume_adjoint(gx: &Tensor, grid: &crate::volume::ImageGrid) -> ActivityVolume {
    let half = gx.c / 2;
    let mut out = ActivityVolume::zeros(*grid);
    for k in 0..grid.nz {
        for c in 0..gx.c {
            let dst = (k as isize + c as isize - half as isize).clamp(0, grid.nz as isize - 1) as usize;
            let plane = gx.plane(k, c);
            let slice = out.slice_mut(dst);
            for (s, v) in slice.iter_mut().zip(plane) {
                *s += v;
            }
        }
    }
    out
}

/// One cached whole-volume forward evaluation (inference mode).
pub struct VolumeForward {
    /// Raw network output per slice (may be negative).
    pub output: ActivityVolume,
    caches: Vec<BlockCache>,
    input_shape: (usize, usize, usize, usize),
}

/// Run the network over every slice window of `vol` (inference mode),
/// keeping what is needed for a later input gradient.
pub fn volume_forward_cached(net: &NetworkWeights, vol: &ActivityVolume) -> Result<VolumeForward> {
    let x = volume_to_windows(vol, net.config.in_channels);
    let shape = (x.n, x.c, x.h, x.w);
    let (y, caches) = net.forward_eval_cached(&x)?;
    let mut out = ActivityVolume::zeros(vol.grid);
    for k in 0..vol.grid.nz {
        out.slice_mut(k).copy_from_slice(y.plane(k, 0));
    }
    Ok(VolumeForward {
        output: out,
        caches,
        input_shape: shape,
    })
}

/// Plain whole-volume forward (inference mode), raw output.
pub fn volume_forward(net: &NetworkWeights, vol: &ActivityVolume) -> Result<ActivityVolume> {
    let x = volume_to_windows(vol, net.config.in_channels);
    let y = net.forward_eval(&x)?;
    let mut out = ActivityVolume::zeros(vol.grid);
    for k in 0..vol.grid.nz {
        out.slice_mut(k).copy_from_slice(y.plane(k, 0));
    }
    Ok(out)
}

/// Vector-Jacobian product of the whole-volume map at the point captured
/// by `fwd`: returns `J' * cotangent` including the window adjoint.
pub fn volume_vjp_input(
    net: &NetworkWeights,
    fwd: &VolumeForward,
    cotangent: &ActivityVolume,
) -> Result<ActivityVolume> {
    let g = fwd.output.grid;
    if cotangent.grid != g {
        return Err(Error::Dimension("cotangent grid mismatch".into()));
    }
    let mut gy = Tensor::zeros(g.nz, 1, g.ny, g.nx);
    for k in 0..g.nz {
        gy.plane_mut(k, 0).copy_from_slice(cotangent.slice(k));
    }
    let gx = net.backward_input_eval(&fwd.caches, &gy);
    debug_assert_eq!((gx.n, gx.c, gx.h, gx.w), fwd.input_shape);
    Ok(windows_to_volume_adjoint(&gx, &g))
}

/// Apply the network as a denoiser: forward every slice window and clamp
/// the result to non-negative activities.
pub fn denoise_volume(net: &NetworkWeights, vol: &ActivityVolume) -> Result<ActivityVolume> {
    let mut out = volume_forward(net, vol)?;
    out.clamp_non_negative();
    Ok(out)
}
