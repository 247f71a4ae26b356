//! Parallel Monte-Carlo accuracy runs.
//!
//! Images are evaluated in parallel but predictions are collected in image
//! order, and hardware noise is keyed by `(seed, image index)`, so results do
//! not depend on the worker count.

use std::path::PathBuf;

use oxqnn_core::analysis::{classify, mean_std, ConfusionMatrix, EvalMode};
use oxqnn_core::crossbar::TileLimits;
use oxqnn_core::device::DeviceConfig;
use oxqnn_core::network::{map_network_to_tiles, InputPipeline, LabeledImages, NetworkDescription};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::idx::ImageSet;
use crate::{devcfg, qnn};

/// What to evaluate and how often.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub network: PathBuf,
    /// Config file path or built-in name.
    pub config: String,
    pub mode: EvalMode,
    pub trials: usize,
    /// One per trial; each seeds device sampling and read noise.
    pub seeds: Vec<u64>,
    /// Test images `lo..hi`.
    pub slice: (usize, usize),
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Invalid("trials must be at least 1".into()));
        }
        if self.seeds.len() != self.trials {
            return Err(Error::Invalid(format!(
                "{} trials need {} seeds, got {}",
                self.trials,
                self.trials,
                self.seeds.len()
            )));
        }
        let mut sorted = self.seeds.clone();
        sorted.sort_unstable();
        if sorted.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Invalid("seeds must be distinct".into()));
        }
        if self.slice.0 >= self.slice.1 {
            return Err(Error::Invalid(format!("empty test slice {}..{}", self.slice.0, self.slice.1)));
        }
        Ok(())
    }
}

/// Accuracy of one trial.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResult {
    pub seed: u64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyReport {
    pub mode: EvalMode,
    pub trials: Vec<TrialResult>,
    pub mean: f64,
    /// Sample standard deviation across trials.
    pub std: f64,
    /// Confusion matrix of the first trial.
    pub confusion: ConfusionMatrix,
    pub images: usize,
}

/// Confusion matrix of `net` on `images` for one seed.
pub fn evaluate(
    net: &NetworkDescription,
    config: &DeviceConfig,
    images: &LabeledImages<'_>,
    mode: EvalMode,
    seed: u64,
) -> Result<ConfusionMatrix> {
    net.validate(true)?;
    images.check_labels(net.num_classes)?;
    let pipeline = InputPipeline::default();
    let mapped = match mode {
        EvalMode::Ideal => None,
        EvalMode::Hardware => Some(map_network_to_tiles(net, config, TileLimits::default(), seed)?),
    };
    let preds: Vec<usize> = (0..images.len())
        .into_par_iter()
        .map(|i| {
            let x = pipeline.prepare(&images.image(i))?;
            classify(net, mapped.as_ref(), &x, i as u64)
        })
        .collect::<oxqnn_core::Result<_>>()?;
    let mut cm = ConfusionMatrix::new(net.num_classes);
    for (i, p) in preds.into_iter().enumerate() {
        cm.record(usize::from(images.label(i)), p)?;
    }
    Ok(cm)
}

/// Evaluate every seed of an in-memory experiment.
pub fn run_trials(
    net: &NetworkDescription,
    config: &DeviceConfig,
    images: &LabeledImages<'_>,
    mode: EvalMode,
    seeds: &[u64],
) -> Result<AccuracyReport> {
    let mut matrices = seeds
        .iter()
        .map(|&s| evaluate(net, config, images, mode, s))
        .collect::<Result<Vec<_>>>()?;
    let trials: Vec<TrialResult> = seeds
        .iter()
        .zip(&matrices)
        .map(|(&seed, cm)| TrialResult {
            seed,
            accuracy: cm.accuracy(),
        })
        .collect();
    let (mean, std) = mean_std(&trials.iter().map(|t| t.accuracy).collect::<Vec<_>>());
    Ok(AccuracyReport {
        mode,
        trials,
        mean,
        std,
        confusion: matrices.swap_remove(0),
        images: images.len(),
    })
}

/// Load the network and config named by `spec` and evaluate its slice of `test`.
pub fn run_accuracy(spec: &ExperimentSpec, test: &ImageSet) -> Result<AccuracyReport> {
    spec.validate()?;
    let net = qnn::load(&spec.network)?;
    let config = devcfg::load(&spec.config)?;
    let (lo, hi) = spec.slice;
    if hi > test.len() {
        return Err(Error::Invalid(format!("test slice {lo}..{hi} exceeds {} images", test.len())));
    }
    run_trials(&net, &config, &test.view()?.slice(lo, hi), spec.mode, &spec.seeds)
}
