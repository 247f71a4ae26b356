//! Time-multiplexed two-phase READ vector-matrix multiplication on a 1T-1R tile.
//!
//! Weights live in the tile as one MLC conductance per cell. An input vector
//! is split into a positive and a negative component that gate the row
//! selectors in two consecutive READs (`t0`, `t1`). Each READ integrates
//! current along the columns; a sample-and-hold pair keeps both results and a
//! comparator forms their difference, which feeds the activation stage.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::device::{
    sample_device_conductance, sample_read_conductance, CellCoord, DeviceConfig, MlcStateModel,
    SigmoidNeuronModel,
};
use crate::error::{config_err, shape_err, Result};
use crate::quant::{act_binary, act_ternary, Precision, TernaryTensor, TernaryThreshold, Trit};
use crate::rng::StreamKey;

/// Amps to microamps.
const UA: f64 = 1e6;

/// Largest tile the mapper may allocate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TileLimits {
    pub max_rows: usize,
    pub max_cols: usize,
}

impl Default for TileLimits {
    fn default() -> Self {
        TileLimits {
            max_rows: 64,
            max_cols: 64,
        }
    }
}

/// A programmed crossbar tile. Immutable once programmed.
#[derive(Debug, Clone)]
pub struct CrossbarTile {
    rows: usize,
    cols: usize,
    array_id: u32,
    cell_state: Vec<i8>,
    cell_g: Vec<f64>,
    config: Arc<DeviceConfig>,
    clamped_cells: usize,
}

impl CrossbarTile {
    /// Program `weights` (row-major `rows x cols`) into a fresh tile, drawing
    /// one D2D sample per cell from `device_key`.
    pub fn program(
        weights: &[i8],
        rows: usize,
        cols: usize,
        config: Arc<DeviceConfig>,
        array_id: u32,
        device_key: &StreamKey,
        limits: TileLimits,
    ) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(shape_err!("tile must have at least one row and column"));
        }
        if rows > limits.max_rows || cols > limits.max_cols {
            return Err(shape_err!(
                "tile {}x{} exceeds the {}x{} limit",
                rows,
                cols,
                limits.max_rows,
                limits.max_cols
            ));
        }
        if weights.len() != rows * cols {
            return Err(shape_err!(
                "{} weights supplied for a {}x{} tile",
                weights.len(),
                rows,
                cols
            ));
        }
        let states = state_table(&config)?;
        let mut cell_g = Vec::with_capacity(weights.len());
        let mut clamped_cells = 0;
        for (i, &w) in weights.iter().enumerate() {
            let t = Trit::from_i8(w)
                .ok_or_else(|| config_err!("weight {} at cell {} is not a trit", w, i))?;
            let state = states[t.index()]
                .ok_or_else(|| config_err!("no conductance state for weight {}", w))?;
            let coord = CellCoord {
                array: array_id,
                row: (i / cols) as u32,
                col: (i % cols) as u32,
            };
            let g = sample_device_conductance(state, device_key, coord);
            clamped_cells += usize::from(g.clamped);
            cell_g.push(g.value);
        }
        if clamped_cells > 0 {
            log::warn!(
                "tile {}: {} of {} cells hit the conductance floor (variability overflow)",
                array_id,
                clamped_cells,
                weights.len()
            );
        }
        Ok(CrossbarTile {
            rows,
            cols,
            array_id,
            cell_state: weights.to_vec(),
            cell_g,
            config,
            clamped_cells,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn array_id(&self) -> u32 {
        self.array_id
    }

    pub fn config(&self) -> &DeviceConfig {
        &self.config
    }

    /// Programmed trits, row-major.
    pub fn cell_state(&self) -> &[i8] {
        &self.cell_state
    }

    /// D2D-sampled conductances in siemens, row-major.
    pub fn cell_g(&self) -> &[f64] {
        &self.cell_g
    }

    pub fn clamped_cells(&self) -> usize {
        self.clamped_cells
    }

    /// One READ: column currents in microamps for the rows whose gate is on.
    pub fn read_phase(&self, gates: &[bool], reads: &mut ReadStream) -> Result<Vec<f64>> {
        if gates.len() != self.rows {
            return Err(shape_err!(
                "{} gate signals for a tile with {} rows",
                gates.len(),
                self.rows
            ));
        }
        let mut out = vec![0.0; self.cols];
        self.read_phase_into(gates, reads, &mut out);
        Ok(out)
    }

    /// Adds this READ's column currents (uA) into `out`.
    pub(crate) fn read_phase_into(&self, gates: &[bool], reads: &mut ReadStream, out: &mut [f64]) {
        debug_assert_eq!(gates.len(), self.rows);
        debug_assert_eq!(out.len(), self.cols);
        let read_index = reads.next_index();
        let scale = self.config.v_read * UA;
        let noisy = reads.noisy && self.config.has_read_noise();
        let mut acc = vec![0.0f64; self.cols];
        // states were validated when the tile was programmed
        let states: [Option<&MlcStateModel>; 3] = core::array::from_fn(|i| self.config.states[i].as_ref());
        if !noisy {
            for (r, _) in gates.iter().enumerate().filter(|(_, g)| **g) {
                let row = &self.cell_g[r * self.cols..(r + 1) * self.cols];
                for (a, g) in acc.iter_mut().zip(row) {
                    *a += g;
                }
            }
        } else if reads.per_column {
            let mut var = vec![0.0f64; self.cols];
            let mut floor = vec![0.0f64; self.cols];
            for (r, _) in gates.iter().enumerate().filter(|(_, g)| **g) {
                let base = r * self.cols;
                for c in 0..self.cols {
                    let i = base + c;
                    let state = states[(self.cell_state[i] + 1) as usize].unwrap();
                    acc[c] += self.cell_g[i];
                    var[c] += state.c2c_sigma * state.c2c_sigma;
                    floor[c] += state.floor();
                }
            }
            let mut clamped = 0u64;
            for c in 0..self.cols {
                if var[c] > 0.0 {
                    let coord = CellCoord {
                        array: self.array_id,
                        row: COLUMN_ROW,
                        col: c as u32,
                    };
                    let z = reads.key.normal([coord.array, coord.row, coord.col, read_index]);
                    let v = acc[c] + libm::sqrt(var[c]) * z;
                    if v > floor[c] {
                        acc[c] = v;
                    } else {
                        acc[c] = floor[c];
                        clamped += 1;
                    }
                }
            }
            reads.clamped += clamped;
        } else {
            let mut clamped = 0u64;
            for (r, _) in gates.iter().enumerate().filter(|(_, g)| **g) {
                for c in 0..self.cols {
                    let i = r * self.cols + c;
                    let state = states[(self.cell_state[i] + 1) as usize].unwrap();
                    let coord = CellCoord {
                        array: self.array_id,
                        row: r as u32,
                        col: c as u32,
                    };
                    let g = sample_read_conductance(self.cell_g[i], state, &reads.key, coord, read_index);
                    clamped += u64::from(g.clamped);
                    acc[c] += g.value;
                }
            }
            reads.clamped += clamped;
        }
        for (o, a) in out.iter_mut().zip(&acc) {
            *o += a * scale;
        }
    }

    /// Both READ phases for input `x`; currents are not yet compared.
    pub fn phase_currents(&self, x: &[i8], reads: &mut ReadStream) -> Result<PhaseCurrents> {
        if x.len() != self.rows {
            return Err(shape_err!(
                "input of length {} for a tile with {} rows",
                x.len(),
                self.rows
            ));
        }
        let plan = PhasePlan::from_trits(x)?;
        let mut pc = PhaseCurrents::zeros(self.cols);
        self.accumulate_phases(&plan, reads, &mut pc);
        Ok(pc)
    }

    pub(crate) fn accumulate_phases(&self, plan: &PhasePlan, reads: &mut ReadStream, into: &mut PhaseCurrents) {
        self.accumulate_gates(&plan.gate_pos, &plan.gate_neg, reads, &mut into.i_pos, &mut into.i_neg);
        into.n_pos += plan.n_pos();
        into.n_neg += plan.n_neg();
    }

    /// Both READs into caller-owned column buffers; gate counts are not tracked.
    pub(crate) fn accumulate_gates(
        &self,
        gate_pos: &[bool],
        gate_neg: &[bool],
        reads: &mut ReadStream,
        i_pos: &mut [f64],
        i_neg: &mut [f64],
    ) {
        self.read_phase_into(gate_pos, reads, i_pos);
        self.read_phase_into(gate_neg, reads, i_neg);
    }
}

fn state_table(config: &DeviceConfig) -> Result<[Option<&MlcStateModel>; 3]> {
    config.validate(Precision::Binary)?;
    Ok(core::array::from_fn(|i| config.states[i].as_ref()))
}

/// Row coordinate of column-aggregated read-noise draws.
const COLUMN_ROW: u32 = u32::MAX;

/// Source of READ indices and C2C noise for one inference.
///
/// Each READ on a tile consumes the next index, so the noise of every read
/// event is keyed by `(key, array, row, col, index)`.
///
/// In column-aggregated mode a READ draws one deviate per column,
/// `sqrt(sum c2c_sigma^2)` over the gated cells, instead of one per cell.
/// The column current is the same Gaussian either way; only the clamping
/// floor moves from each cell to the column sum of cell floors.
#[derive(Debug, Clone)]
pub struct ReadStream {
    key: StreamKey,
    next: u32,
    noisy: bool,
    per_column: bool,
    clamped: u64,
}

impl ReadStream {
    pub fn new(key: StreamKey) -> Self {
        ReadStream {
            key,
            next: 0,
            noisy: true,
            per_column: false,
            clamped: 0,
        }
    }

    /// Column-aggregated C2C noise keyed by `(key, array, col, index)`.
    pub fn per_column(key: StreamKey) -> Self {
        ReadStream {
            per_column: true,
            ..Self::new(key)
        }
    }

    /// Stream that ignores C2C noise regardless of the device config.
    pub fn noiseless() -> Self {
        ReadStream {
            key: StreamKey::new(0, 0),
            next: 0,
            noisy: false,
            per_column: false,
            clamped: 0,
        }
    }

    #[inline]
    fn next_index(&mut self) -> u32 {
        let i = self.next;
        self.next = self.next.wrapping_add(1);
        i
    }

    pub fn reads_issued(&self) -> u32 {
        self.next
    }

    /// READ samples that hit the conductance floor so far.
    pub fn clamped_reads(&self) -> u64 {
        self.clamped
    }
}

/// Row-gate schedule for the two READ phases.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PhasePlan {
    /// Gates driven at `t0` (inputs equal to `+1`).
    pub gate_pos: Vec<bool>,
    /// Gates driven at `t1` (inputs equal to `-1`).
    pub gate_neg: Vec<bool>,
}

impl PhasePlan {
    pub fn from_trits(x: &[i8]) -> Result<Self> {
        let mut gate_pos = Vec::with_capacity(x.len());
        let mut gate_neg = Vec::with_capacity(x.len());
        for (i, &v) in x.iter().enumerate() {
            match v {
                1 => {
                    gate_pos.push(true);
                    gate_neg.push(false);
                }
                -1 => {
                    gate_pos.push(false);
                    gate_neg.push(true);
                }
                0 => {
                    gate_pos.push(false);
                    gate_neg.push(false);
                }
                _ => return Err(crate::error::domain_err!("input {} = {} is not a trit", i, v)),
            }
        }
        Ok(PhasePlan { gate_pos, gate_neg })
    }

    pub fn len(&self) -> usize {
        self.gate_pos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gate_pos.is_empty()
    }

    pub fn n_pos(&self) -> u32 {
        self.gate_pos.iter().filter(|g| **g).count() as u32
    }

    pub fn n_neg(&self) -> u32 {
        self.gate_neg.iter().filter(|g| **g).count() as u32
    }

    /// Restrict to rows `lo..hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> PhasePlan {
        PhasePlan {
            gate_pos: self.gate_pos[lo..hi].to_vec(),
            gate_neg: self.gate_neg[lo..hi].to_vec(),
        }
    }
}

/// Split a 1-D input into its two gate vectors.
pub fn encode_input_phases(x: &TernaryTensor) -> Result<PhasePlan> {
    if x.shape().len() != 1 {
        return Err(shape_err!("phase encoding expects a 1-D input, got {:?}", x.shape()));
    }
    PhasePlan::from_trits(x.data())
}

/// Column currents held by the two S/H stages, before comparison.
///
/// Partial results from tiles that share columns but cover different rows
/// add up component-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseCurrents {
    pub i_pos: Vec<f64>,
    pub i_neg: Vec<f64>,
    pub n_pos: u32,
    pub n_neg: u32,
}

impl PhaseCurrents {
    pub fn zeros(cols: usize) -> Self {
        PhaseCurrents {
            i_pos: vec![0.0; cols],
            i_neg: vec![0.0; cols],
            n_pos: 0,
            n_neg: 0,
        }
    }

    pub fn accumulate(&mut self, other: &PhaseCurrents) -> Result<()> {
        if other.i_pos.len() != self.i_pos.len() {
            return Err(shape_err!(
                "cannot add {} columns into {}",
                other.i_pos.len(),
                self.i_pos.len()
            ));
        }
        for (a, b) in self.i_pos.iter_mut().zip(&other.i_pos) {
            *a += b;
        }
        for (a, b) in self.i_neg.iter_mut().zip(&other.i_neg) {
            *a += b;
        }
        self.n_pos += other.n_pos;
        self.n_neg += other.n_neg;
        Ok(())
    }
}

/// Comparator and neuron stage shared by all columns of a layer.
///
/// The comparator output is `i_pos - i_neg + comparator_offset_ua`. For the
/// activation stage it is optionally balanced by removing
/// `balance_ua * (n_pos - n_neg)`, the input-dependent term a single-device
/// synapse adds because every weight maps to a positive conductance, and
/// then divided by `gain_ua` to give popcount units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SenseChain {
    pub comparator_offset_ua: f64,
    /// Microamps per popcount unit.
    pub gain_ua: f64,
    /// Microamps removed per unit of `n_pos - n_neg`; zero disables balancing.
    pub balance_ua: f64,
    pub neuron: SigmoidNeuronModel,
    /// Popcount units to neuron microamps, about the neuron midpoint.
    pub output_scale: f64,
}

impl SenseChain {
    /// Gain `v_read * slope` and balance `v_read * intercept` from the state
    /// means of `config`, so a noise-free tile reports exact popcounts.
    pub fn calibrated(config: &DeviceConfig) -> Result<Self> {
        let line = config.line()?;
        Ok(SenseChain {
            comparator_offset_ua: 0.0,
            gain_ua: config.v_read * line.slope * UA,
            balance_ua: config.v_read * line.intercept * UA,
            neuron: SigmoidNeuronModel::measured(),
            output_scale: 1.0,
        })
    }

    /// Calibrated gain with no input balancing: the raw comparator output
    /// drives the activations.
    pub fn unbalanced(config: &DeviceConfig) -> Result<Self> {
        Ok(SenseChain {
            balance_ua: 0.0,
            ..Self::calibrated(config)?
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gain_ua.is_finite() && self.gain_ua > 0.0) {
            return Err(config_err!("sense gain must be > 0, got {}", self.gain_ua));
        }
        if !(self.balance_ua.is_finite() && self.comparator_offset_ua.is_finite()) {
            return Err(config_err!("sense balance and offset must be finite"));
        }
        if !self.output_scale.is_finite() {
            return Err(config_err!("output scale must be finite"));
        }
        self.neuron.validate()
    }

    /// Comparator output for one column.
    #[inline]
    pub fn delta(&self, i_pos: f64, i_neg: f64) -> f64 {
        i_pos - i_neg + self.comparator_offset_ua
    }

    /// Balanced comparator output in microamps.
    #[inline]
    pub fn balanced(&self, delta: f64, n_pos: u32, n_neg: u32) -> f64 {
        delta - self.balance_ua * (f64::from(n_pos) - f64::from(n_neg))
    }

    /// Balanced comparator output in popcount units.
    #[inline]
    pub fn normalized(&self, delta: f64, n_pos: u32, n_neg: u32) -> f64 {
        self.balanced(delta, n_pos, n_neg) / self.gain_ua
    }

    /// Binary activation from the comparator. The decision level sits half
    /// a popcount unit below zero, so a zero popcount reads as `+1` however
    /// the analog sum rounds.
    pub fn decide_binary(&self, delta: f64, n_pos: u32, n_neg: u32) -> Result<Trit> {
        act_binary(self.normalized(delta, n_pos, n_neg) + 0.5)
    }

    /// Ternary activation from the comparator with dead band `thr`. Decision
    /// levels sit half a popcount unit beyond the largest integer inside the
    /// band, so integer popcounts decide exactly as `act_ternary` does.
    pub fn decide_ternary(&self, delta: f64, n_pos: u32, n_neg: u32, thr: TernaryThreshold) -> Result<Trit> {
        let level = TernaryThreshold::new(libm::floor(thr.get()) + 0.5)?;
        act_ternary(self.normalized(delta, n_pos, n_neg), level)
    }

    /// Neuron voltage for a normalized comparator output.
    #[inline]
    pub fn neuron_voltage(&self, normalized: f64) -> f64 {
        self.neuron
            .voltage(self.neuron.midpoint_ua + self.output_scale * normalized)
    }

    /// Compare the held currents and evaluate the neuron on every column.
    pub fn sense(&self, pc: &PhaseCurrents) -> SenseResult {
        let delta: Vec<f64> = pc
            .i_pos
            .iter()
            .zip(&pc.i_neg)
            .map(|(&p, &n)| self.delta(p, n))
            .collect();
        let v_neuron = delta
            .iter()
            .map(|&d| self.neuron_voltage(self.normalized(d, pc.n_pos, pc.n_neg)))
            .collect();
        SenseResult {
            i_pos: pc.i_pos.clone(),
            i_neg: pc.i_neg.clone(),
            delta,
            v_neuron,
            n_pos: pc.n_pos,
            n_neg: pc.n_neg,
        }
    }
}

/// Per-column outcome of a two-phase VMM.
#[derive(Debug, Clone, PartialEq)]
pub struct SenseResult {
    /// Column currents at `t0` (uA).
    pub i_pos: Vec<f64>,
    /// Column currents at `t1` (uA).
    pub i_neg: Vec<f64>,
    /// Comparator output (uA).
    pub delta: Vec<f64>,
    /// Neuron output (V).
    pub v_neuron: Vec<f64>,
    pub n_pos: u32,
    pub n_neg: u32,
}

/// Two consecutive READs with S/H and comparison.
pub fn vmm_two_phase(
    tile: &CrossbarTile,
    x: &TernaryTensor,
    chain: &SenseChain,
    reads: &mut ReadStream,
) -> Result<SenseResult> {
    if x.shape().len() != 1 {
        return Err(shape_err!("VMM expects a 1-D input, got {:?}", x.shape()));
    }
    let pc = tile.phase_currents(x.data(), reads)?;
    Ok(chain.sense(&pc))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SenseMode {
    HiddenBinary,
    HiddenTernary,
    OutputSigmoid,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SenseOutput {
    Trits(TernaryTensor),
    Volts(Vec<f64>),
}

/// Activation stage fed by the comparator.
pub fn sense_to_activation(
    result: &SenseResult,
    mode: SenseMode,
    thr: TernaryThreshold,
    chain: &SenseChain,
) -> Result<SenseOutput> {
    chain.validate()?;
    let (n_pos, n_neg) = (result.n_pos, result.n_neg);
    match mode {
        SenseMode::HiddenBinary => {
            let trits = result
                .delta
                .iter()
                .map(|&d| chain.decide_binary(d, n_pos, n_neg).map(Trit::value))
                .collect::<Result<Vec<_>>>()?;
            Ok(SenseOutput::Trits(TernaryTensor::vector(trits, Precision::Binary)?))
        }
        SenseMode::HiddenTernary => {
            let trits = result
                .delta
                .iter()
                .map(|&d| chain.decide_ternary(d, n_pos, n_neg, thr).map(Trit::value))
                .collect::<Result<Vec<_>>>()?;
            Ok(SenseOutput::Trits(TernaryTensor::vector(trits, Precision::Ternary)?))
        }
        SenseMode::OutputSigmoid => Ok(SenseOutput::Volts(
            result
                .delta
                .iter()
                .map(|&d| chain.neuron_voltage(chain.normalized(d, n_pos, n_neg)))
                .collect(),
        )),
    }
}
