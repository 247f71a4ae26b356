//! Straight-through-estimator training of binary/ternary networks.
//!
//! Latent weights are real and clipped to `[-1, 1]`; the forward pass uses
//! their quantized values and the same activation functions as inference.
//! Hidden popcounts are scaled by `1/sqrt(fan_in)` for the gradient window
//! and the ternary dead band, so a trained threshold `t` is exported as
//! `t * sqrt(fan_in)` popcount units.

mod gemm;
mod model;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, Error, Result};
use crate::network::{ActivationKind, InputPipeline, LabeledImages, Layer, NetworkDescription};
use crate::quant::{Precision, TernaryTensor, TernaryThreshold};
use crate::rng::CounterRng;
use model::{effective_weights, loss_and_grad, BlockAct, Mode, Model};

const INIT_STREAM: u64 = 0x1000;
const SHUFFLE_STREAM: u64 = 0x2000;

/// Quantize latent weights: Binary is the sign with `0 -> +1`, Ternary zeroes
/// `|w| <= r`.
pub fn quantize_weights(
    latent: &[f64],
    shape: Vec<usize>,
    precision: Precision,
    r: TernaryThreshold,
) -> Result<TernaryTensor> {
    let data = latent
        .iter()
        .map(|&w| model::quantize_one(w, precision, r).map(|t| t.value()))
        .collect::<Result<Vec<_>>>()?;
    TernaryTensor::new(shape, data, precision)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Ternary weight dead band on the latent scale.
    pub weight_threshold: f64,
    /// Ternary activation dead band in units of `popcount / sqrt(fan_in)`.
    pub activation_threshold: f64,
    /// Latent weights start uniform in `[-init_range, init_range]`.
    pub init_range: f64,
    pub seed: u64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            weight_threshold: 0.5,
            activation_threshold: 0.5,
            init_range: 1.0,
            seed: 1,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(config_err!("epochs and batch size must be >= 1"));
        }
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;
        if !finite_nonneg(self.learning_rate) {
            return Err(config_err!("learning rate must be finite and >= 0"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(config_err!("Adam betas must lie in [0, 1)"));
        }
        if !(self.epsilon > 0.0 && self.init_range > 0.0 && self.init_range <= 1.0) {
            return Err(config_err!("epsilon must be > 0 and init range in (0, 1]"));
        }
        TernaryThreshold::new(self.weight_threshold)?;
        TernaryThreshold::new(self.activation_threshold)?;
        Ok(())
    }
}

/// Latent weights plus Adam state.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowWeights {
    /// Per parametric layer, `[out][fan_in]` row-major.
    pub latent: Vec<Vec<f64>>,
    /// Output sigmoid scale (logit per popcount unit).
    pub output_scale: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    m_scale: f64,
    v_scale: f64,
    pub step: u64,
    pub epoch: usize,
}

const MIN_OUTPUT_SCALE: f64 = 1e-4;

impl ShadowWeights {
    fn init(model: &Model, hp: &Hyperparams) -> Self {
        let latent: Vec<Vec<f64>> = model
            .blocks
            .iter()
            .enumerate()
            .map(|(b, blk)| {
                let mut rng = CounterRng::new(hp.seed, INIT_STREAM + b as u64);
                (0..blk.weight_len())
                    .map(|_| (2.0 * rng.next_f64() - 1.0) * hp.init_range)
                    .collect()
            })
            .collect();
        let zeros: Vec<Vec<f64>> = latent.iter().map(|w| vec![0.0; w.len()]).collect();
        let fan_out = model.blocks.last().map_or(1, |b| b.fan_in);
        ShadowWeights {
            m: zeros.clone(),
            v: zeros,
            latent,
            output_scale: 1.0 / libm::sqrt(fan_out as f64),
            m_scale: 0.0,
            v_scale: 0.0,
            step: 0,
            epoch: 0,
        }
    }

    fn adam(&mut self, grads: &[Vec<f64>], grad_scale: f64, hp: &Hyperparams) {
        self.step += 1;
        let t = self.step as f64;
        let c1 = 1.0 - libm::pow(hp.beta1, t);
        let c2 = 1.0 - libm::pow(hp.beta2, t);
        let update = |w: &mut f64, m: &mut f64, v: &mut f64, g: f64| {
            *m = hp.beta1 * *m + (1.0 - hp.beta1) * g;
            *v = hp.beta2 * *v + (1.0 - hp.beta2) * g * g;
            *w -= hp.learning_rate * (*m / c1) / (libm::sqrt(*v / c2) + hp.epsilon);
        };
        for (b, g) in grads.iter().enumerate() {
            for i in 0..g.len() {
                update(&mut self.latent[b][i], &mut self.m[b][i], &mut self.v[b][i], g[i]);
                self.latent[b][i] = self.latent[b][i].clamp(-1.0, 1.0);
            }
        }
        update(&mut self.output_scale, &mut self.m_scale, &mut self.v_scale, grad_scale);
        self.output_scale = self.output_scale.max(MIN_OUTPUT_SCALE);
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochReport {
    /// 0 for the untrained network.
    pub epoch: usize,
    /// Mean minibatch loss during the epoch; full-set loss for epoch 0.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: NetworkDescription,
    pub curve: Vec<EpochReport>,
    pub shadow: ShadowWeights,
}

/// Stateful trainer; [`train`] drives it for a fixed number of epochs.
pub struct Trainer {
    spec: NetworkDescription,
    model: Model,
    hp: Hyperparams,
    pipeline: InputPipeline,
    shadow: ShadowWeights,
}

impl Trainer {
    pub fn new(spec: &NetworkDescription, pipeline: InputPipeline, hp: Hyperparams) -> Result<Self> {
        hp.validate()?;
        if pipeline.input_shape() != spec.input_shape {
            return Err(config_err!(
                "input pipeline yields {:?} but the network expects {:?}",
                pipeline.input_shape(),
                spec.input_shape
            ));
        }
        let model = Model::build(spec, hp.activation_threshold)?;
        let shadow = ShadowWeights::init(&model, &hp);
        Ok(Trainer {
            spec: spec.clone(),
            model,
            hp,
            pipeline,
            shadow,
        })
    }

    pub fn shadow(&self) -> &ShadowWeights {
        &self.shadow
    }

    fn weight_threshold(&self) -> TernaryThreshold {
        TernaryThreshold::new(self.hp.weight_threshold).expect("validated")
    }

    fn weights(&self, mode: Mode) -> Result<Vec<Vec<f64>>> {
        let r = self.weight_threshold();
        self.shadow
            .latent
            .iter()
            .map(|w| effective_weights(w, self.spec.precision, r, mode))
            .collect()
    }

    fn input(&self, set: &LabeledImages<'_>, i: usize) -> Result<Vec<f64>> {
        let t = self.pipeline.prepare(&set.image(i))?;
        Ok(t.data().iter().map(|&v| f64::from(v)).collect())
    }

    /// Mean loss and accuracy of the quantized network on `set`.
    pub fn evaluate(&self, set: &LabeledImages<'_>) -> Result<(f64, f64)> {
        set.check_labels(self.model.classes)?;
        if set.is_empty() {
            return Ok((0.0, 0.0));
        }
        let weights = self.weights(Mode::Quantized)?;
        let mut cache = self.model.new_cache();
        let mut grad = vec![0.0; self.model.classes];
        let (mut loss, mut correct) = (0.0, 0usize);
        for i in 0..set.len() {
            self.model.forward(&weights, &self.input(set, i)?, Mode::Quantized, &mut cache)?;
            let u: Vec<f64> = cache.logits.iter().map(|p| p * self.shadow.output_scale).collect();
            loss += loss_and_grad(&u, usize::from(set.label(i)), &mut grad);
            correct += usize::from(crate::network::argmax(&u) == Some(usize::from(set.label(i))));
        }
        let n = set.len() as f64;
        Ok((loss / n, correct as f64 / n))
    }

    /// One pass over `set` in a seed-determined order; returns the mean
    /// minibatch loss.
    pub fn run_epoch(&mut self, set: &LabeledImages<'_>) -> Result<f64> {
        set.check_labels(self.model.classes)?;
        if set.is_empty() {
            return Err(config_err!("training set is empty"));
        }
        let epoch = self.shadow.epoch + 1;
        let mut order: Vec<usize> = (0..set.len()).collect();
        CounterRng::new(self.hp.seed, SHUFFLE_STREAM + epoch as u64).shuffle(&mut order);
        let mut cache = self.model.new_cache();
        let mut grad_u = vec![0.0; self.model.classes];
        let mut total = 0.0;
        for (batch_index, batch) in order.chunks(self.hp.batch_size).enumerate() {
            let weights = self.weights(Mode::Quantized)?;
            let mut grads: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
            let mut grad_scale = 0.0;
            let mut batch_loss = 0.0;
            for &i in batch {
                self.model.forward(&weights, &self.input(set, i)?, Mode::Quantized, &mut cache)?;
                let u: Vec<f64> = cache.logits.iter().map(|p| p * self.shadow.output_scale).collect();
                batch_loss += loss_and_grad(&u, usize::from(set.label(i)), &mut grad_u);
                self.model.backward(
                    &weights,
                    self.shadow.output_scale,
                    &cache,
                    &grad_u,
                    &mut grads,
                    &mut grad_scale,
                );
            }
            if !batch_loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_index,
                    loss: batch_loss,
                });
            }
            let inv = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|g| *g *= inv);
            self.shadow.adam(&grads, grad_scale * inv, &self.hp);
            total += batch_loss;
        }
        self.shadow.epoch = epoch;
        Ok(total / set.len() as f64)
    }

    /// The current network with quantized weights and exported thresholds.
    pub fn export(&self) -> Result<NetworkDescription> {
        let mut net = self.spec.clone();
        let r = self.weight_threshold();
        for (b, blk) in self.model.blocks.iter().enumerate() {
            let shape = net.layers[blk.layer]
                .weight_shape(net.shapes()?[blk.layer])
                .expect("parametric layer");
            let q = quantize_weights(&self.shadow.latent[b], shape, self.spec.precision, r)?;
            match &mut net.layers[blk.layer] {
                Layer::Conv2d { weights, .. } | Layer::Dense { weights, .. } => *weights = Some(q),
                _ => unreachable!(),
            }
            net.layers[blk.layer + 1] = Layer::Activation(match blk.act {
                BlockAct::Binary => ActivationKind::Binary,
                BlockAct::Ternary(t) => ActivationKind::Ternary(t),
                BlockAct::Output => ActivationKind::Sigmoid {
                    scale: self.shadow.output_scale,
                },
            });
        }
        net.validate(true)?;
        Ok(net)
    }
}

/// Train `spec` for `hp.epochs` epochs, reporting after the initial
/// evaluation and after every epoch.
pub fn train(
    spec: &NetworkDescription,
    train_set: &LabeledImages<'_>,
    val_set: &LabeledImages<'_>,
    pipeline: InputPipeline,
    hp: Hyperparams,
    on_epoch: &mut dyn FnMut(&EpochReport, &NetworkDescription),
) -> Result<TrainOutcome> {
    let epochs = hp.epochs;
    let mut trainer = Trainer::new(spec, pipeline, hp)?;
    let mut curve = Vec::with_capacity(epochs + 1);
    let (train_loss, _) = trainer.evaluate(train_set)?;
    let (val_loss, val_accuracy) = trainer.evaluate(val_set)?;
    let report = EpochReport {
        epoch: 0,
        train_loss,
        val_loss,
        val_accuracy,
    };
    on_epoch(&report, &trainer.export()?);
    curve.push(report);
    for epoch in 1..=epochs {
        let train_loss = trainer.run_epoch(train_set)?;
        let (val_loss, val_accuracy) = trainer.evaluate(val_set)?;
        let report = EpochReport {
            epoch,
            train_loss,
            val_loss,
            val_accuracy,
        };
        log::info!(
            "epoch {}: train loss {:.5}, val loss {:.5}, val accuracy {:.4}",
            epoch,
            train_loss,
            val_loss,
            val_accuracy
        );
        on_epoch(&report, &trainer.export()?);
        curve.push(report);
    }
    Ok(TrainOutcome {
        network: trainer.export()?,
        curve,
        shadow: trainer.shadow,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{forward_ideal, ideal_logits, ThermometricEncoder};

    fn th(r: f64) -> TernaryThreshold {
        TernaryThreshold::new(r).unwrap()
    }

    #[test]
    fn quantize_examples() {
        let q = |w: f64, p| quantize_weights(&[w], vec![1], p, th(0.5)).unwrap().data()[0];
        assert_eq!(q(0.8, Precision::Binary), 1);
        assert_eq!(q(0.0, Precision::Binary), 1);
        assert_eq!(q(-0.1, Precision::Binary), -1);
        assert_eq!(q(0.3, Precision::Ternary), 0);
        assert_eq!(q(-0.7, Precision::Ternary), -1);
        assert_eq!(q(0.5, Precision::Ternary), 0);
        assert!(quantize_weights(&[f64::NAN], vec![1], Precision::Binary, th(0.5)).is_err());
    }

    /// A two-layer toy: conv(3, 3x3) + pool 2 + dense(3) over [2, 6, 6].
    fn toy(precision: Precision) -> NetworkDescription {
        let hidden = match precision {
            Precision::Binary => ActivationKind::Binary,
            Precision::Ternary => ActivationKind::Ternary(TernaryThreshold::DEFAULT),
        };
        NetworkDescription {
            input_shape: [2, 6, 6],
            precision,
            num_classes: 3,
            layers: vec![
                Layer::Conv2d {
                    out_channels: 3,
                    kernel: 3,
                    stride: 1,
                    weights: None,
                },
                Layer::Activation(hidden),
                Layer::MaxPool { size: 2 },
                Layer::Dense {
                    out_units: 3,
                    weights: None,
                },
                Layer::Activation(ActivationKind::Sigmoid { scale: 1.0 }),
            ],
        }
    }

    fn surrogate_loss(model: &Model, latent: &[Vec<f64>], scale: f64, x: &[f64], target: usize) -> f64 {
        let mut cache = model.new_cache();
        model.forward(latent, x, Mode::Surrogate, &mut cache).unwrap();
        let u: Vec<f64> = cache.logits.iter().map(|p| p * scale).collect();
        loss_and_grad(&u, target, &mut vec![0.0; u.len()])
    }

    #[test]
    fn straight_through_gradients_match_finite_differences() {
        let net = toy(Precision::Ternary);
        let model = Model::build(&net, 0.5).unwrap();
        let mut rng = CounterRng::new(99, 0);
        let latent: Vec<Vec<f64>> = model
            .blocks
            .iter()
            .map(|b| (0..b.weight_len()).map(|_| 1.8 * rng.next_f64() - 0.9).collect())
            .collect();
        let scale = 0.7;
        for sample in 0..3 {
            let x: Vec<f64> = (0..72).map(|_| f64::from(rng.trit(false))).collect();
            let target = sample % 3;
            let mut cache = model.new_cache();
            model.forward(&latent, &x, Mode::Surrogate, &mut cache).unwrap();
            let u: Vec<f64> = cache.logits.iter().map(|p| p * scale).collect();
            let mut gu = vec![0.0; 3];
            loss_and_grad(&u, target, &mut gu);
            let mut grads: Vec<Vec<f64>> = latent.iter().map(|w| vec![0.0; w.len()]).collect();
            let mut gs = 0.0;
            model.backward(&latent, scale, &cache, &gu, &mut grads, &mut gs);

            let h = 1e-6;
            let mut checked = 0;
            for b in 0..latent.len() {
                for i in 0..latent[b].len() {
                    let mut lp = latent.clone();
                    lp[b][i] += h;
                    let mut lm = latent.clone();
                    lm[b][i] -= h;
                    let fd = (surrogate_loss(&model, &lp, scale, &x, target)
                        - surrogate_loss(&model, &lm, scale, &x, target))
                        / (2.0 * h);
                    let an = grads[b][i];
                    let tol = 1e-4 * fd.abs().max(an.abs()) + 1e-9;
                    assert!((fd - an).abs() <= tol, "block {b} weight {i}: fd {fd} vs analytic {an}");
                    checked += usize::from(an != 0.0);
                }
            }
            assert!(checked > 20);
            let fd_s = (surrogate_loss(&model, &latent, scale + h, &x, target)
                - surrogate_loss(&model, &latent, scale - h, &x, target))
                / (2.0 * h);
            assert!((fd_s - gs).abs() <= 1e-4 * fd_s.abs().max(gs.abs()) + 1e-9);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let u = [0.3, -1.2, 2.5, 0.0];
        let mut g = [0.0; 4];
        let l = loss_and_grad(&u, 2, &mut g);
        assert!(l > 0.0);
        for j in 0..4 {
            let mut up = u;
            up[j] += 1e-6;
            let mut dn = u;
            dn[j] -= 1e-6;
            let fd = (loss_and_grad(&up, 2, &mut [0.0; 4]) - loss_and_grad(&dn, 2, &mut [0.0; 4])) / 2e-6;
            assert!((fd - g[j]).abs() < 1e-8);
        }
    }

    /// Images whose class is the quadrant holding a bright square.
    fn synthetic(n: usize, seed: u64) -> (Vec<u8>, Vec<u8>) {
        let mut rng = CounterRng::new(seed, 1);
        let mut px = vec![0u8; n * 36];
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let class = rng.below(3) as usize;
            let (y0, x0) = [(0, 0), (0, 3), (3, 0)][class];
            for y in 0..3 {
                for x in 0..3 {
                    px[i * 36 + (y0 + y) * 6 + x0 + x] = 128 + rng.below(128) as u8;
                }
            }
            labels.push(class as u8);
        }
        (px, labels)
    }

    fn toy_pipeline() -> InputPipeline {
        InputPipeline {
            encoder: ThermometricEncoder::new(vec![64, 192]).unwrap(),
            size: 6,
        }
    }

    #[test]
    fn training_reduces_loss_and_exports_consistent_network() {
        for precision in [Precision::Binary, Precision::Ternary] {
            let (px, labels) = synthetic(600, 3);
            let set = LabeledImages::new(&px, &labels, 6, 6).unwrap();
            let (train_set, val_set) = (set.slice(0, 500), set.slice(500, 600));
            let hp = Hyperparams {
                epochs: 3,
                batch_size: 16,
                learning_rate: 0.01,
                ..Hyperparams::default()
            };
            let mut seen = Vec::new();
            let out = train(&toy(precision), &train_set, &val_set, toy_pipeline(), hp, &mut |r, _| {
                seen.push(r.epoch)
            })
            .unwrap();
            assert_eq!(seen, [0, 1, 2, 3]);
            let first = out.curve[0].val_loss;
            let last = out.curve.last().unwrap().val_loss;
            assert!(last < first, "{precision:?}: {first} -> {last}");
            assert!(out.curve.last().unwrap().val_accuracy > 0.9);

            // trainer forward and the inference engine agree image by image
            let net = &out.network;
            let counts = net.layers[0].weights().unwrap().histogram();
            match precision {
                Precision::Binary => assert_eq!(counts[1], 0),
                Precision::Ternary => assert!(counts.iter().all(|&c| c > 0)),
            }
            let trainer_acc = out.curve.last().unwrap().val_accuracy;
            let mut correct = 0;
            for i in 0..val_set.len() {
                let x = toy_pipeline().prepare(&val_set.image(i)).unwrap();
                let s = forward_ideal(net, &x).unwrap();
                let l = ideal_logits(net, &x).unwrap();
                assert_eq!(s.len(), 3);
                assert!(l.iter().all(|v| v.unsigned_abs() <= 27));
                correct += usize::from(crate::network::argmax(&s) == Some(usize::from(val_set.label(i))));
            }
            assert!((correct as f64 / val_set.len() as f64 - trainer_acc).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_learning_rate_leaves_weights_alone() {
        let (px, labels) = synthetic(64, 4);
        let set = LabeledImages::new(&px, &labels, 6, 6).unwrap();
        let hp = Hyperparams {
            epochs: 2,
            batch_size: 8,
            learning_rate: 0.0,
            ..Hyperparams::default()
        };
        let mut trainer = Trainer::new(&toy(Precision::Ternary), toy_pipeline(), hp.clone()).unwrap();
        let before = trainer.shadow().latent.clone();
        let net_before = trainer.export().unwrap();
        let (l0, _) = trainer.evaluate(&set).unwrap();
        for _ in 0..2 {
            let l = trainer.run_epoch(&set).unwrap();
            assert!((l - l0).abs() <= 1e-12 * l0);
        }
        assert_eq!(trainer.shadow().latent, before);
        assert_eq!(trainer.export().unwrap(), net_before);
        let out = train(&toy(Precision::Ternary), &set, &set, toy_pipeline(), hp, &mut |_, _| {}).unwrap();
        assert!(out.curve.windows(2).all(|w| w[0].val_loss == w[1].val_loss));
    }

    #[test]
    fn bad_configuration_is_rejected() {
        let hp = Hyperparams {
            epochs: 0,
            ..Hyperparams::default()
        };
        assert!(Trainer::new(&toy(Precision::Binary), toy_pipeline(), hp).is_err());
        assert!(Trainer::new(&toy(Precision::Binary), InputPipeline::default(), Hyperparams::default()).is_err());
        let (px, labels) = synthetic(8, 4);
        let mut bad = labels.clone();
        bad[0] = 7;
        let set = LabeledImages::new(&px, &bad, 6, 6).unwrap();
        let mut t = Trainer::new(&toy(Precision::Binary), toy_pipeline(), Hyperparams::default()).unwrap();
        assert!(matches!(t.run_epoch(&set), Err(Error::Domain(_))));
    }

    #[test]
    fn divergence_is_reported() {
        let (px, labels) = synthetic(16, 4);
        let set = LabeledImages::new(&px, &labels, 6, 6).unwrap();
        let mut t = Trainer::new(&toy(Precision::Binary), toy_pipeline(), Hyperparams::default()).unwrap();
        t.shadow.output_scale = f64::NAN;
        assert!(matches!(t.run_epoch(&set), Err(Error::Diverged { epoch: 1, batch: 0, .. })));
    }
}
