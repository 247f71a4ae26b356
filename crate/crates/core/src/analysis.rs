//! Accuracy bookkeeping, sense-output sweeps and conductance histograms.

use alloc::collections::BTreeMap;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::crossbar::{vmm_two_phase, CrossbarTile, ReadStream, SenseChain, TileLimits};
use crate::device::DeviceConfig;
use crate::error::{domain_err, shape_err, Result};
use crate::network::{argmax, forward_hardware, forward_ideal, MappedNetwork, NetworkDescription};
use crate::quant::{dot_reference, Precision, TernaryTensor, Trit};
use crate::rng::{CounterRng, StreamKey};

/// Square table of `(true, predicted)` counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn record(&mut self, truth: usize, predicted: usize) -> Result<()> {
        if truth >= self.classes || predicted >= self.classes {
            return Err(domain_err!(
                "class pair ({}, {}) outside 0..{}",
                truth,
                predicted,
                self.classes
            ));
        }
        self.counts[truth * self.classes + predicted] += 1;
        Ok(())
    }

    pub fn count(&self, truth: usize, predicted: usize) -> u64 {
        self.counts[truth * self.classes + predicted]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.count(c, c)).sum()
    }

    /// Samples per true class.
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.chunks(self.classes.max(1)).map(|r| r.iter().sum()).collect()
    }

    /// Fraction correct; 0 when empty.
    pub fn accuracy(&self) -> f64 {
        match self.total() {
            0 => 0.0,
            n => self.trace() as f64 / n as f64,
        }
    }

    /// Recall per true class; `None` for classes without samples.
    pub fn per_class_accuracy(&self) -> Vec<Option<f64>> {
        self.row_sums()
            .iter()
            .enumerate()
            .map(|(c, &n)| (n > 0).then(|| self.count(c, c) as f64 / n as f64))
            .collect()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(shape_err!("cannot merge {} and {} class matrices", other.classes, self.classes));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }
}

/// Mean and sample standard deviation (0 for fewer than two values).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    if values.iter().all(|&v| v == values[0]) {
        return (values[0], 0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, libm::sqrt(var))
}

/// Standard error of a proportion `p` estimated from `n` samples.
pub fn binomial_sigma(p: f64, n: usize) -> f64 {
    if n == 0 {
        return 0.0;
    }
    libm::sqrt(p * (1.0 - p) / n as f64)
}

/// How class scores are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EvalMode {
    Ideal,
    Hardware,
}

impl EvalMode {
    pub fn name(self) -> &'static str {
        match self {
            EvalMode::Ideal => "ideal",
            EvalMode::Hardware => "hardware",
        }
    }
}

/// Predicted class of one encoded input. Hardware reads draw
/// column-aggregated C2C noise from the stream of `(seed, item)`, so the
/// result does not depend on which other images are evaluated or in what
/// order.
pub fn classify(
    net: &NetworkDescription,
    mapped: Option<&MappedNetwork>,
    input: &TernaryTensor,
    item: u64,
) -> Result<usize> {
    let scores = match mapped {
        None => forward_ideal(net, input)?,
        Some(m) => {
            let mut reads = ReadStream::per_column(StreamKey::reads(m.seed, item));
            forward_hardware(net, m, input, &mut reads)?
        }
    };
    argmax(&scores).ok_or_else(|| shape_err!("network produced no scores"))
}

/// One column of one random VMM.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenseSample {
    pub popcount: i64,
    pub n_pos: u32,
    pub n_neg: u32,
    /// Raw comparator output (uA).
    pub delta_ua: f64,
    /// Neuron voltage for the balanced, normalized comparator output (V).
    pub v_neuron: f64,
}

/// Largest tile the sense sweep accepts.
pub const SWEEP_MAX_DIM: usize = 8;

/// Random `rows x cols` weight/input pairs programmed on fresh tiles; one
/// sample per column with the exact popcount next to the simulated output.
pub fn sweep_sense_distribution(
    rows: usize,
    cols: usize,
    precision: Precision,
    config: &DeviceConfig,
    samples: usize,
    seed: u64,
) -> Result<Vec<SenseSample>> {
    if rows == 0 || cols == 0 || rows > SWEEP_MAX_DIM || cols > SWEEP_MAX_DIM {
        return Err(shape_err!(
            "sense sweep tiles must be between 1x1 and {}x{}, got {}x{}",
            SWEEP_MAX_DIM,
            SWEEP_MAX_DIM,
            rows,
            cols
        ));
    }
    config.validate(precision)?;
    let cfg = Arc::new(config.clone());
    let chain = SenseChain::calibrated(&cfg)?;
    let device_key = StreamKey::device(seed);
    let mut rng = CounterRng::new(seed, 0x5e45e);
    let binary = precision == Precision::Binary;
    let mut out = Vec::with_capacity(samples * cols);
    for s in 0..samples {
        let w: Vec<i8> = (0..rows * cols).map(|_| rng.trit(binary)).collect();
        let x: Vec<i8> = (0..rows).map(|_| rng.trit(binary)).collect();
        let tile = CrossbarTile::program(
            &w,
            rows,
            cols,
            cfg.clone(),
            s as u32,
            &device_key,
            TileLimits {
                max_rows: rows,
                max_cols: cols,
            },
        )?;
        let mut reads = ReadStream::new(StreamKey::reads(seed, s as u64));
        let r = vmm_two_phase(&tile, &TernaryTensor::vector(x.clone(), precision)?, &chain, &mut reads)?;
        for c in 0..cols {
            let col: Vec<i8> = (0..rows).map(|i| w[i * cols + c]).collect();
            out.push(SenseSample {
                popcount: dot_reference(&x, &col)?,
                n_pos: r.n_pos,
                n_neg: r.n_neg,
                delta_ua: r.delta[c],
                v_neuron: r.v_neuron[c],
            });
        }
    }
    Ok(out)
}

/// Raw comparator outputs grouped by popcount.
pub fn group_by_popcount(samples: &[SenseSample]) -> BTreeMap<i64, Vec<f64>> {
    let mut groups: BTreeMap<i64, Vec<f64>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.popcount).or_default().push(s.delta_ua);
    }
    groups
}

/// Median of a non-empty slice (mean of the middle pair for even lengths).
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

/// Histogram of one programmed state's conductances.
#[derive(Debug, Clone, PartialEq)]
pub struct StateHistogram {
    pub trit: Trit,
    /// Bin edges in siemens; bin `i` is `[edges[i], edges[i+1])`, the last
    /// bin closed.
    pub edges: Vec<f64>,
    pub counts: Vec<u64>,
    pub cells: u64,
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConductanceHistogram {
    /// States present in the mapped weights, in trit order.
    pub states: Vec<StateHistogram>,
    /// Smallest adjacent `|mean gap| / sqrt((s1^2 + s2^2) / 2)` over the
    /// sampled conductances; infinite without spread or with one state.
    pub separability: f64,
}

/// Histogram the D2D-sampled conductance of every mapped cell by its trit,
/// over `bins` shared equal-width bins.
pub fn weight_conductance_histogram(mapped: &MappedNetwork, bins: usize) -> Result<ConductanceHistogram> {
    if bins == 0 {
        return Err(domain_err!("histogram needs at least one bin"));
    }
    let mut values: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for tile in mapped.tiles() {
        for (&t, &g) in tile.cell_state().iter().zip(tile.cell_g()) {
            values[(t + 1) as usize].push(g);
        }
    }
    let all = values.iter().flatten();
    let lo = all.clone().copied().fold(f64::INFINITY, f64::min);
    let hi = all.copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let width = (hi - lo) / bins as f64;
    let edges: Vec<f64> = (0..=bins).map(|i| if i == bins { hi } else { lo + width * i as f64 }).collect();
    let mut states = Vec::new();
    for (k, v) in values.iter().enumerate() {
        if v.is_empty() {
            continue;
        }
        let mut counts = vec![0u64; bins];
        for &g in v {
            let b = if width > 0.0 { ((g - lo) / width) as usize } else { 0 };
            counts[b.min(bins - 1)] += 1;
        }
        let (mean, std) = mean_std(v);
        states.push(StateHistogram {
            trit: Trit::ALL[k],
            edges: edges.clone(),
            counts,
            cells: v.len() as u64,
            mean,
            std,
        });
    }
    let mut separability = f64::INFINITY;
    for pair in states.windows(2) {
        let pooled = libm::sqrt((pair[0].std * pair[0].std + pair[1].std * pair[1].std) / 2.0);
        if pooled > 0.0 {
            separability = separability.min((pair[1].mean - pair[0].mean).abs() / pooled);
        }
    }
    Ok(ConductanceHistogram { states, separability })
}
