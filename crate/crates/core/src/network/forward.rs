use alloc::vec;
use alloc::vec::Vec;

use super::lowering::lower_conv_to_matmul;
use super::mapping::{MappedLayer, MappedNetwork};
use super::{ActivationKind, Layer, NetworkDescription};
use crate::crossbar::ReadStream;
use crate::device::sigmoid_ideal;
use crate::error::{config_err, domain_err, shape_err, Result};
use crate::quant::{act_binary, act_ternary, PackedTrits, Precision, TernaryTensor, Trit};

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if !(s > b) => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Max-pool a `[c][h][w]` map with a `size x size` window and equal stride.
pub(crate) fn max_pool<T: PartialOrd + Copy>(x: &[T], shape: [usize; 3], size: usize) -> Vec<T> {
    let [c, h, w] = shape;
    let (oh, ow) = (h / size, w / size);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ci in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut m = x[ci * h * w + oy * size * w + ox * size];
                for dy in 0..size {
                    for dx in 0..size {
                        let v = x[ci * h * w + (oy * size + dy) * w + ox * size + dx];
                        if v > m {
                            m = v;
                        }
                    }
                }
                out.push(m);
            }
        }
    }
    out
}

fn check_input(net: &NetworkDescription, input: &TernaryTensor) -> Result<()> {
    if input.shape() != net.input_shape.as_slice() {
        return Err(shape_err!(
            "input shape {:?} does not match the network input {:?}",
            input.shape(),
            net.input_shape
        ));
    }
    if let Some(v) = input.data().iter().find(|v| !net.precision.admits(**v)) {
        return Err(domain_err!("input value {} is not a {} activation", v, net.precision.name()));
    }
    Ok(())
}

fn activate(pre: &[f64], kind: ActivationKind, precision: Precision) -> Result<Vec<i8>> {
    let out = pre
        .iter()
        .map(|&p| {
            match kind {
                ActivationKind::Binary => act_binary(p),
                ActivationKind::Ternary(r) => act_ternary(p, r),
                ActivationKind::Sigmoid { .. } => unreachable!("output activation handled by caller"),
            }
            .map(Trit::value)
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(v) = out.iter().find(|v| !precision.admits(**v)) {
        return Err(domain_err!("activation {} escapes {} precision", v, precision.name()));
    }
    Ok(out)
}

/// Output-layer popcounts of the digital reference network.
pub fn ideal_logits(net: &NetworkDescription, input: &TernaryTensor) -> Result<Vec<i64>> {
    run_ideal(net, input).map(|(p, _)| p)
}

fn run_ideal(net: &NetworkDescription, input: &TernaryTensor) -> Result<(Vec<i64>, f64)> {
    net.validate(true)?;
    check_input(net, input)?;
    let mut shape = net.input_shape;
    let mut x: Vec<i8> = input.data().to_vec();
    let mut pre: Vec<i64> = Vec::new();
    for layer in &net.layers {
        let next_shape = layer.output_shape(shape)?;
        match layer {
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                weights,
            } => {
                let l = lower_conv_to_matmul(*out_channels, *kernel, *stride, shape)?;
                let w = weights.as_ref().unwrap().data();
                let pl = l.patch_len();
                let filters: Vec<PackedTrits> = w.chunks_exact(pl).map(PackedTrits::pack).collect();
                let positions = l.positions();
                let mut patch = vec![0i8; pl];
                pre = vec![0; out_channels * positions];
                for pos in 0..positions {
                    l.extract_patch(&x, pos, &mut patch);
                    let packed = PackedTrits::pack(&patch);
                    for (o, f) in filters.iter().enumerate() {
                        pre[o * positions + pos] = f.dot_unchecked(&packed);
                    }
                }
            }
            Layer::Dense { weights, .. } => {
                let w = weights.as_ref().unwrap().data();
                let packed = PackedTrits::pack(&x);
                pre = w
                    .chunks_exact(x.len())
                    .map(|row| PackedTrits::pack(row).dot_unchecked(&packed))
                    .collect();
            }
            Layer::MaxPool { size } => x = max_pool(&x, shape, *size),
            Layer::Activation(ActivationKind::Sigmoid { scale }) => return Ok((pre, *scale)),
            Layer::Activation(kind) => {
                let p: Vec<f64> = pre.iter().map(|&v| v as f64).collect();
                x = activate(&p, *kind, net.precision)?;
            }
        }
        shape = next_shape;
    }
    unreachable!("validated: the network ends in a sigmoid activation")
}

/// Digital reference forward pass: exact popcounts, ideal activations and
/// `sigmoid(scale * popcount)` class scores.
pub fn forward_ideal(net: &NetworkDescription, input: &TernaryTensor) -> Result<Vec<f64>> {
    let (logits, scale) = run_ideal(net, input)?;
    Ok(logits.iter().map(|&p| sigmoid_ideal(scale * p as f64)).collect())
}

/// Hidden layers yield activations, the output layer neuron volts.
enum LayerOut {
    Trits(Vec<i8>),
    Volts(Vec<f64>),
}

fn run_mapped_layer(
    ml: &MappedLayer,
    x: &[i8],
    precision: Precision,
    reads: &mut ReadStream,
) -> Result<LayerOut> {
    let plan = &ml.plan;
    let positions = ml.conv.map_or(1, |l| l.positions());
    let mut patch = vec![0i8; plan.rows];
    let mut gate_pos = vec![false; plan.rows];
    let mut gate_neg = vec![false; plan.rows];
    let n_out = plan.cols * positions;
    let mut trits = Vec::new();
    let mut volts = Vec::new();
    match ml.activation {
        ActivationKind::Sigmoid { .. } => volts = vec![0.0; n_out],
        _ => trits = vec![0i8; n_out],
    }
    let chain = &ml.chain;
    for pos in 0..positions {
        let input: &[i8] = match ml.conv {
            Some(l) => {
                l.extract_patch(x, pos, &mut patch);
                &patch
            }
            None => x,
        };
        if input.len() != plan.rows {
            return Err(shape_err!("layer input has {} lines, tiles expect {}", input.len(), plan.rows));
        }
        let (mut n_pos, mut n_neg) = (0u32, 0u32);
        for ((&v, p), n) in input.iter().zip(&mut gate_pos).zip(&mut gate_neg) {
            *p = v == 1;
            *n = v == -1;
            n_pos += u32::from(*p);
            n_neg += u32::from(*n);
        }
        for (cb, &(clo, chi)) in plan.col_blocks.iter().enumerate() {
            let width = chi - clo;
            let mut i_pos = vec![0.0; width];
            let mut i_neg = vec![0.0; width];
            for (rb, &(lo, hi)) in plan.row_blocks.iter().enumerate() {
                let tile = &ml.tiles[plan.tile_index(rb, cb)];
                tile.accumulate_gates(&gate_pos[lo..hi], &gate_neg[lo..hi], reads, &mut i_pos, &mut i_neg);
            }
            for c in 0..width {
                let delta = chain.delta(i_pos[c], i_neg[c]);
                let out = (clo + c) * positions + pos;
                match ml.activation {
                    ActivationKind::Binary => {
                        trits[out] = chain.decide_binary(delta, n_pos, n_neg)?.value();
                    }
                    ActivationKind::Ternary(r) => {
                        trits[out] = chain.decide_ternary(delta, n_pos, n_neg, r)?.value();
                    }
                    ActivationKind::Sigmoid { .. } => {
                        volts[out] = chain.neuron_voltage(chain.normalized(delta, n_pos, n_neg));
                    }
                }
            }
        }
    }
    match ml.activation {
        ActivationKind::Sigmoid { .. } => Ok(LayerOut::Volts(volts)),
        _ => {
            if let Some(v) = trits.iter().find(|v| !precision.admits(**v)) {
                return Err(domain_err!("activation {} escapes {} precision", v, precision.name()));
            }
            Ok(LayerOut::Trits(trits))
        }
    }
}

/// Crossbar forward pass: two-phase READs on the mapped tiles, digital
/// partial sums across row blocks, comparator-driven activations and
/// neuron voltages (V) as class scores. Pooling runs digitally.
pub fn forward_hardware(
    net: &NetworkDescription,
    mapped: &MappedNetwork,
    input: &TernaryTensor,
    reads: &mut ReadStream,
) -> Result<Vec<f64>> {
    check_input(net, input)?;
    let mut shape = net.input_shape;
    let mut x: Vec<i8> = input.data().to_vec();
    let mut mapped_layers = mapped.layers.iter();
    let mut i = 0;
    while i < net.layers.len() {
        let layer = &net.layers[i];
        match layer {
            Layer::MaxPool { size } => {
                x = max_pool(&x, shape, *size);
                shape = layer.output_shape(shape)?;
                i += 1;
            }
            Layer::Conv2d { .. } | Layer::Dense { .. } => {
                let ml = mapped_layers
                    .next()
                    .filter(|ml| ml.layer_index == i)
                    .ok_or_else(|| config_err!("layer {} has no mapped tiles", i))?;
                let out_shape = layer.output_shape(shape)?;
                match run_mapped_layer(ml, &x, net.precision, reads)? {
                    LayerOut::Trits(t) => x = t,
                    LayerOut::Volts(v) => return Ok(v),
                }
                shape = out_shape;
                // the activation is fused into the layer above
                i += 2;
            }
            Layer::Activation(_) => {
                return Err(config_err!("layer {}: activation without a preceding parametric layer", i))
            }
        }
    }
    Err(config_err!("network has no output layer"))
}
