//! Frozen ideal logits of the shipped networks, cross-checked against a
//! naive loop-nest forward pass written independently of the engine.

use std::path::Path;

use oxqnn::idx::bundled_test_slice;
use oxqnn::qnn;
use oxqnn_core::network::{ideal_logits, ActivationKind, InputPipeline, Layer, NetworkDescription};

const GOLDEN_BNN: [[i64; 10]; 3] = [
    [-26, -38, -8, -34, -14, -44, 4, -32, 6, -36],
    [-32, -52, -26, -32, -20, -30, -30, -26, 8, -30],
    [-20, -24, -34, 20, -20, -30, -22, -34, -36, -38],
];
const GOLDEN_TNN: [[i64; 10]; 3] = [
    [-12, -18, -6, -15, -10, -24, -1, -24, 1, -19],
    [-22, -28, -20, -23, -17, -26, -20, -24, 3, -30],
    [-15, -22, -14, 6, -15, -26, -14, -22, -16, -28],
];

/// Pixels (28x28) to the 8x32x32 +-1 thermometric input.
fn naive_input(pixels: &[u8]) -> Vec<i64> {
    let mut x = vec![-1i64; 8 * 32 * 32];
    for c in 0..8 {
        let t = 32 * (c as u16 + 1);
        for r in 0..28 {
            for q in 0..28 {
                if u16::from(pixels[r * 28 + q]) >= t {
                    x[c * 1024 + (r + 2) * 32 + q + 2] = 1;
                }
            }
        }
    }
    x
}

fn naive_logits(net: &NetworkDescription, pixels: &[u8]) -> Vec<i64> {
    let [mut c, mut h, mut w] = net.input_shape;
    let mut x = naive_input(pixels);
    let mut pre = Vec::new();
    for layer in &net.layers {
        match layer {
            Layer::Conv2d {
                out_channels,
                kernel: k,
                stride: s,
                weights,
            } => {
                let wt = weights.as_ref().unwrap().data();
                let (oh, ow) = ((h - k) / s + 1, (w - k) / s + 1);
                pre = vec![0; out_channels * oh * ow];
                for o in 0..*out_channels {
                    for y in 0..oh {
                        for z in 0..ow {
                            let mut acc = 0;
                            for i in 0..c {
                                for dy in 0..*k {
                                    for dz in 0..*k {
                                        let wv = i64::from(wt[((o * c + i) * k + dy) * k + dz]);
                                        acc += wv * x[(i * h + y * s + dy) * w + z * s + dz];
                                    }
                                }
                            }
                            pre[(o * oh + y) * ow + z] = acc;
                        }
                    }
                }
                (c, h, w) = (*out_channels, oh, ow);
            }
            Layer::Dense { out_units, weights } => {
                let wt = weights.as_ref().unwrap().data();
                let n = x.len();
                pre = (0..*out_units)
                    .map(|o| (0..n).map(|i| i64::from(wt[o * n + i]) * x[i]).sum())
                    .collect();
                (c, h, w) = (*out_units, 1, 1);
            }
            Layer::MaxPool { size } => {
                let (oh, ow) = (h / size, w / size);
                let mut out = vec![i64::MIN; c * oh * ow];
                for i in 0..c {
                    for y in 0..h - h % size {
                        for z in 0..w - w % size {
                            let slot = &mut out[(i * oh + y / size) * ow + z / size];
                            *slot = (*slot).max(x[(i * h + y) * w + z]);
                        }
                    }
                }
                x = out;
                (h, w) = (oh, ow);
            }
            Layer::Activation(ActivationKind::Binary) => x = pre.iter().map(|&p| if p >= 0 { 1 } else { -1 }).collect(),
            Layer::Activation(ActivationKind::Ternary(r)) => {
                x = pre.iter().map(|&p| (p as f64 > r.get()) as i64 - ((p as f64) < -r.get()) as i64).collect()
            }
            Layer::Activation(ActivationKind::Sigmoid { .. }) => return pre,
        }
    }
    unreachable!("network ends in a sigmoid")
}

fn check(file: &str, golden: &[[i64; 10]; 3]) {
    let net = qnn::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("testdata").join(file)).unwrap();
    let set = bundled_test_slice().unwrap();
    let view = set.view().unwrap();
    for (i, want) in golden.iter().enumerate() {
        let x = InputPipeline::default().prepare(&view.image(i)).unwrap();
        assert_eq!(ideal_logits(&net, &x).unwrap(), want, "{file} image {i}");
        assert_eq!(naive_logits(&net, view.pixels(i)), want, "{file} image {i} (naive)");
    }
}

#[test]
fn shipped_binary_network_logits() {
    check("lenet_bnn.qnn", &GOLDEN_BNN);
}

#[test]
fn shipped_ternary_network_logits() {
    check("lenet_tnn.qnn", &GOLDEN_TNN);
}
