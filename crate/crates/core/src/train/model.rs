//! Forward/backward engine over a [`NetworkDescription`].
//!
//! Each conv/dense layer with its activation and trailing max-pools forms a
//! block. Inside a block pooling is applied to the pre-activation popcounts
//! and the activation afterwards; for monotone activations this equals
//! activate-then-pool, and routes the gradient to the winning position.

use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{gemm, Mat};
use crate::device::sigmoid_ideal;
use crate::error::{config_err, Result};
use crate::network::{lower_conv_to_matmul, ActivationKind, ConvLowering, Layer, NetworkDescription};
use crate::quant::{act_binary, act_ternary, Precision, TernaryThreshold, Trit};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum BlockAct {
    Binary,
    /// Dead band in popcount units.
    Ternary(TernaryThreshold),
    Output,
}

#[derive(Debug, Clone)]
pub(crate) struct Block {
    pub layer: usize,
    pub conv: Option<ConvLowering>,
    pub n_in: usize,
    pub fan_in: usize,
    pub out: usize,
    pub positions: usize,
    /// `(window, input shape)` of each pooling stage.
    pub pools: Vec<(usize, [usize; 3])>,
    pub act: BlockAct,
    pub sqrt_fan: f64,
}

impl Block {
    pub fn weight_len(&self) -> usize {
        self.out * self.fan_in
    }
}

/// How weights and hidden activations are realised in the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Mode {
    /// Quantized weights and activations, as deployed.
    Quantized,
    /// Clipped identity in place of every quantizer; its exact gradient is
    /// the straight-through estimate.
    #[cfg_attr(not(test), allow(dead_code))]
    Surrogate,
}

#[derive(Debug, Clone)]
pub(crate) struct Model {
    pub blocks: Vec<Block>,
    pub input_len: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    input: Vec<f64>,
    cols: Vec<f64>,
    /// Popcounts after pooling; the activation input.
    pooled: Vec<f64>,
    pool_idx: Vec<Vec<u32>>,
}

#[derive(Debug, Clone, Default)]
pub(crate) struct Cache {
    blocks: Vec<BlockCache>,
    pub logits: Vec<f64>,
}

fn pool_with_index(x: &[f64], shape: [usize; 3], size: usize) -> (Vec<f64>, Vec<u32>) {
    let [c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut idx = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ci * h * w + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let i = ci * h * w + (oy * size + dy) * w + ox * size + dx;
                        if x[i] > x[best] {
                            best = i;
                        }
                    }
                }
                out.push(x[best]);
                idx.push(best as u32);
            }
        }
    }
    (out, idx)
}

#[inline]
fn log_sigmoid(u: f64) -> f64 {
    // -softplus(-u)
    let t = -u;
    -(t.max(0.0) + libm::log1p(libm::exp(-t.abs())))
}

/// Cross-entropy over sigmoid outputs normalised by their sum:
/// `L = -ln(s_t / sum_k s_k)` with `s = sigmoid(logit)`.
pub(crate) fn loss_and_grad(u: &[f64], target: usize, grad: &mut [f64]) -> f64 {
    let s: Vec<f64> = u.iter().map(|&v| sigmoid_ideal(v)).collect();
    let total: f64 = s.iter().sum();
    for (j, (g, &sj)) in grad.iter_mut().zip(&s).enumerate() {
        *g = sj * (1.0 - sj) / total;
        if j == target {
            *g -= 1.0 - sj;
        }
    }
    -log_sigmoid(u[target]) + libm::log(total)
}

impl Model {
    /// Blocks for `net`; `act_threshold` is the ternary dead band in units of
    /// `popcount / sqrt(fan_in)`.
    pub fn build(net: &NetworkDescription, act_threshold: f64) -> Result<Self> {
        net.validate(false)?;
        let shapes = net.shapes()?;
        let mut blocks: Vec<Block> = Vec::new();
        for (i, layer) in net.layers.iter().enumerate() {
            match layer {
                Layer::Conv2d { .. } | Layer::Dense { .. } => {
                    let in_shape = shapes[i];
                    let n_in: usize = in_shape.iter().product();
                    let (conv, fan_in, out, positions) = match *layer {
                        Layer::Conv2d {
                            out_channels,
                            kernel,
                            stride,
                            ..
                        } => {
                            let l = lower_conv_to_matmul(out_channels, kernel, stride, in_shape)?;
                            (Some(l), l.patch_len(), out_channels, l.positions())
                        }
                        Layer::Dense { out_units, .. } => (None, n_in, out_units, 1),
                        _ => unreachable!(),
                    };
                    let sqrt_fan = libm::sqrt(fan_in as f64);
                    let act = match net.layers[i + 1] {
                        Layer::Activation(ActivationKind::Binary) => BlockAct::Binary,
                        Layer::Activation(ActivationKind::Ternary(_)) => {
                            BlockAct::Ternary(TernaryThreshold::new(act_threshold * sqrt_fan)?)
                        }
                        Layer::Activation(ActivationKind::Sigmoid { .. }) => BlockAct::Output,
                        _ => unreachable!("validated"),
                    };
                    blocks.push(Block {
                        layer: i,
                        conv,
                        n_in,
                        fan_in,
                        out,
                        positions,
                        pools: Vec::new(),
                        act,
                        sqrt_fan,
                    });
                }
                Layer::MaxPool { size } => match blocks.last_mut() {
                    Some(b) if b.act != BlockAct::Output => b.pools.push((*size, shapes[i])),
                    _ => {
                        return Err(config_err!(
                            "layer {}: training supports max-pooling only between hidden layers",
                            i
                        ))
                    }
                },
                Layer::Activation(_) => {}
            }
        }
        Ok(Model {
            blocks,
            input_len: net.input_shape.iter().product(),
            classes: net.num_classes,
        })
    }

    pub fn new_cache(&self) -> Cache {
        Cache {
            blocks: vec![BlockCache::default(); self.blocks.len()],
            logits: Vec::new(),
        }
    }

    /// Output-layer popcounts (before the output scale) for input `x`.
    pub fn forward(&self, weights: &[Vec<f64>], x: &[f64], mode: Mode, cache: &mut Cache) -> Result<()> {
        debug_assert_eq!(x.len(), self.input_len);
        let mut cur = x.to_vec();
        for (b, blk) in self.blocks.iter().enumerate() {
            let bc = &mut cache.blocks[b];
            bc.input = cur;
            let w = Mat::row_major(&weights[b], blk.out, blk.fan_in);
            let mut pre = vec![0.0; blk.out * blk.positions];
            match blk.conv {
                Some(l) => {
                    bc.cols = l.im2col(&bc.input);
                    gemm(w, Mat::row_major(&bc.cols, blk.positions, blk.fan_in).t(), 0.0, &mut pre);
                }
                None => gemm(w, Mat::row_major(&bc.input, blk.fan_in, 1), 0.0, &mut pre),
            }
            bc.pool_idx.clear();
            for &(size, shape) in &blk.pools {
                let (p, idx) = pool_with_index(&pre, shape, size);
                pre = p;
                bc.pool_idx.push(idx);
            }
            bc.pooled = pre;
            cur = match (blk.act, mode) {
                (BlockAct::Output, _) => {
                    cache.logits = bc.pooled.clone();
                    return Ok(());
                }
                (_, Mode::Surrogate) => bc
                    .pooled
                    .iter()
                    .map(|&p| (p / blk.sqrt_fan).clamp(-1.0, 1.0))
                    .collect(),
                (BlockAct::Binary, Mode::Quantized) => bc
                    .pooled
                    .iter()
                    .map(|&p| act_binary(p).map(|t| f64::from(t.value())))
                    .collect::<Result<_>>()?,
                (BlockAct::Ternary(r), Mode::Quantized) => bc
                    .pooled
                    .iter()
                    .map(|&p| act_ternary(p, r).map(|t| f64::from(t.value())))
                    .collect::<Result<_>>()?,
            };
        }
        Err(config_err!("network has no output block"))
    }

    /// Accumulate parameter gradients for the cached forward pass, given
    /// `dL/dlogit` where `logit = scale * popcount`.
    pub fn backward(
        &self,
        weights: &[Vec<f64>],
        scale: f64,
        cache: &Cache,
        grad_logits: &[f64],
        grads: &mut [Vec<f64>],
        grad_scale: &mut f64,
    ) {
        *grad_scale += grad_logits.iter().zip(&cache.logits).map(|(g, p)| g * p).sum::<f64>();
        let mut g: Vec<f64> = grad_logits.iter().map(|d| d * scale).collect();
        for (b, blk) in self.blocks.iter().enumerate().rev() {
            let bc = &cache.blocks[b];
            if blk.act != BlockAct::Output {
                // straight-through: identity on |popcount / sqrt(fan_in)| <= 1
                for (gi, &p) in g.iter_mut().zip(&bc.pooled) {
                    *gi = if p.abs() <= blk.sqrt_fan { *gi / blk.sqrt_fan } else { 0.0 };
                }
            }
            for (k, &(_, shape)) in blk.pools.iter().enumerate().rev() {
                let n: usize = shape.iter().product();
                let mut up = vec![0.0; n];
                for (gi, &i) in g.iter().zip(&bc.pool_idx[k]) {
                    up[i as usize] += gi;
                }
                g = up;
            }
            let g_pre = Mat::row_major(&g, blk.out, blk.positions);
            let cols = match blk.conv {
                Some(_) => Mat::row_major(&bc.cols, blk.positions, blk.fan_in),
                None => Mat::row_major(&bc.input, 1, blk.fan_in),
            };
            gemm(g_pre, cols, 1.0, &mut grads[b]);
            if b == 0 {
                break;
            }
            let mut dcols = vec![0.0; blk.positions * blk.fan_in];
            gemm(g_pre.t(), Mat::row_major(&weights[b], blk.out, blk.fan_in), 0.0, &mut dcols);
            g = match blk.conv {
                Some(l) => {
                    let mut gi = vec![0.0; blk.n_in];
                    for (pos, patch) in dcols.chunks_exact(blk.fan_in).enumerate() {
                        l.accumulate_patch(patch, pos, &mut gi);
                    }
                    gi
                }
                None => dcols,
            };
        }
    }
}

/// Deployed weights from latent values.
pub(crate) fn effective_weights(latent: &[f64], precision: Precision, r: TernaryThreshold, mode: Mode) -> Result<Vec<f64>> {
    match mode {
        Mode::Surrogate => Ok(latent.iter().map(|w| w.clamp(-1.0, 1.0)).collect()),
        Mode::Quantized => latent
            .iter()
            .map(|&w| quantize_one(w, precision, r).map(|t| f64::from(t.value())))
            .collect(),
    }
}

pub(crate) fn quantize_one(w: f64, precision: Precision, r: TernaryThreshold) -> Result<Trit> {
    match precision {
        Precision::Binary => act_binary(w),
        Precision::Ternary => act_ternary(w, r),
    }
}
