//! Behavioral models of multi-level OxRAM states and the CMOS sigmoid neuron.
//!
//! Conductances are in siemens, voltages in volts, neuron input currents in
//! microamps. Device-to-device (D2D) offsets are drawn once per cell of a
//! mapped array; cycle-to-cycle (C2C) noise is drawn fresh for every READ.

use alloc::string::{String, ToString};

use crate::error::{config_err, Result};
use crate::quant::{Precision, Trit};
use crate::rng::StreamKey;

/// Resistance region the three MLC states are selected from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Region {
    Hrs,
    Lrs,
}

impl Region {
    pub fn name(self) -> &'static str {
        match self {
            Region::Hrs => "HRS",
            Region::Lrs => "LRS",
        }
    }
}

/// One programmable conductance level with its variability.
#[derive(Debug, Clone, PartialEq)]
pub struct MlcStateModel {
    pub label: String,
    /// Mean conductance (S).
    pub mean: f64,
    /// Device-to-device standard deviation (S).
    pub d2d_sigma: f64,
    /// Cycle-to-cycle standard deviation (S).
    pub c2c_sigma: f64,
}

impl MlcStateModel {
    pub fn new(label: &str, mean: f64, d2d_sigma: f64, c2c_sigma: f64) -> Result<Self> {
        let s = MlcStateModel {
            label: label.to_string(),
            mean,
            d2d_sigma,
            c2c_sigma,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mean.is_finite() && self.mean > 0.0) {
            return Err(config_err!("state {}: mean conductance must be > 0", self.label));
        }
        for (name, v) in [("d2d_sigma", self.d2d_sigma), ("c2c_sigma", self.c2c_sigma)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(config_err!("state {}: {} must be >= 0", self.label, name));
            }
        }
        Ok(())
    }

    /// Lowest conductance a sample may take; draws below it are clamped.
    #[inline]
    pub fn floor(&self) -> f64 {
        self.mean / 100.0
    }
}

/// A sampled conductance and whether it hit the clamping floor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sampled {
    pub value: f64,
    pub clamped: bool,
}

#[inline]
fn clamp_to_floor(value: f64, floor: f64) -> Sampled {
    if value > floor {
        Sampled {
            value,
            clamped: false,
        }
    } else {
        Sampled {
            value: floor,
            clamped: true,
        }
    }
}

/// Position of a cell in the RNG counter space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct CellCoord {
    pub array: u32,
    pub row: u32,
    pub col: u32,
}

/// Per-cell programmed conductance: `mean + N(0, d2d_sigma)`, clamped above `mean/100`.
///
/// The draw is a pure function of `(key, coord)`, so re-querying a cell
/// returns the same value.
pub fn sample_device_conductance(state: &MlcStateModel, key: &StreamKey, coord: CellCoord) -> Sampled {
    if state.d2d_sigma == 0.0 {
        return Sampled {
            value: state.mean,
            clamped: false,
        };
    }
    let z = key.normal([coord.array, coord.row, coord.col, 0]);
    clamp_to_floor(state.mean + state.d2d_sigma * z, state.floor())
}

/// Conductance seen by one READ event: `device_g + N(0, c2c_sigma)`, clamped.
pub fn sample_read_conductance(
    device_g: f64,
    state: &MlcStateModel,
    key: &StreamKey,
    coord: CellCoord,
    read_index: u32,
) -> Sampled {
    if state.c2c_sigma == 0.0 {
        return Sampled {
            value: device_g,
            clamped: false,
        };
    }
    let z = key.normal([coord.array, coord.row, coord.col, read_index]);
    clamp_to_floor(device_g + state.c2c_sigma * z, state.floor())
}

/// `G(w) = slope * w + intercept` through the `-1` and `+1` state means.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConductanceLine {
    pub slope: f64,
    pub intercept: f64,
}

/// Array-level device configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceConfig {
    pub region: Region,
    /// Indexed by [`Trit::index`]; the `0` state is only required for ternary nets.
    pub states: [Option<MlcStateModel>; 3],
    pub v_read: f64,
    pub v_gate_on: f64,
    pub v_gate_off: f64,
    pub rng_seed: u64,
}

impl DeviceConfig {
    pub const V_READ: f64 = 0.2;
    pub const V_GATE_ON: f64 = 1.2;
    pub const V_GATE_OFF: f64 = 0.0;

    /// Three HRS-region states, adjacent means separated by more than 3 sigma (D2D).
    pub fn hrs_default() -> Self {
        DeviceConfig {
            region: Region::Hrs,
            states: [
                Some(state("HRS_-1", 5.0e-6, 0.5e-6, 0.25e-6)),
                Some(state("HRS_0", 10.0e-6, 0.5e-6, 0.25e-6)),
                Some(state("HRS_+1", 15.0e-6, 0.5e-6, 0.25e-6)),
            ],
            v_read: Self::V_READ,
            v_gate_on: Self::V_GATE_ON,
            v_gate_off: Self::V_GATE_OFF,
            rng_seed: 1,
        }
    }

    /// Three LRS-region states, separated by more than 2 sigma but not 3.
    pub fn lrs_default() -> Self {
        DeviceConfig {
            region: Region::Lrs,
            states: [
                Some(state("LRS_-1", 60.0e-6, 6.0e-6, 3.0e-6)),
                Some(state("LRS_0", 90.0e-6, 6.0e-6, 3.0e-6)),
                Some(state("LRS_+1", 120.0e-6, 6.0e-6, 3.0e-6)),
            ],
            v_read: Self::V_READ,
            v_gate_on: Self::V_GATE_ON,
            v_gate_off: Self::V_GATE_OFF,
            rng_seed: 1,
        }
    }

    /// Look up the named default (`hrs_default` or `lrs_default`).
    pub fn named_default(name: &str) -> Option<Self> {
        match name {
            "hrs_default" => Some(Self::hrs_default()),
            "lrs_default" => Some(Self::lrs_default()),
            _ => None,
        }
    }

    pub fn state(&self, t: Trit) -> Result<&MlcStateModel> {
        self.states[t.index()]
            .as_ref()
            .ok_or_else(|| config_err!("no conductance state configured for weight {}", t.value()))
    }

    /// Check structural invariants and that the states needed by `precision` exist.
    pub fn validate(&self, precision: Precision) -> Result<()> {
        if !(self.v_read.is_finite() && self.v_read > 0.0) {
            return Err(config_err!("v_read must be > 0"));
        }
        if !(self.v_gate_on.is_finite() && self.v_gate_off.is_finite())
            || self.v_gate_on <= self.v_gate_off
        {
            return Err(config_err!("v_gate_on must exceed v_gate_off"));
        }
        self.state(Trit::Neg)?;
        self.state(Trit::Pos)?;
        if precision == Precision::Ternary {
            self.state(Trit::Zero)?;
        }
        let mut prev: Option<&MlcStateModel> = None;
        for s in self.states.iter().flatten() {
            s.validate()?;
            if let Some(p) = prev {
                if p.mean >= s.mean {
                    return Err(config_err!(
                        "state means must increase with weight: {} ({}) >= {} ({})",
                        p.label,
                        p.mean,
                        s.label,
                        s.mean
                    ));
                }
            }
            prev = Some(s);
        }
        Ok(())
    }

    /// Line through the `-1` and `+1` means. `slope * v_read` is one popcount
    /// unit of differential current.
    pub fn line(&self) -> Result<ConductanceLine> {
        let lo = self.state(Trit::Neg)?.mean;
        let hi = self.state(Trit::Pos)?.mean;
        Ok(ConductanceLine {
            slope: (hi - lo) / 2.0,
            intercept: (hi + lo) / 2.0,
        })
    }

    /// Smallest `|mean(s1) - mean(s2)| / (d2d(s1) + d2d(s2))` over adjacent
    /// states used by `precision`. Infinite when there is no D2D spread.
    pub fn adjacent_separation(&self, precision: Precision) -> Result<f64> {
        let used: &[Trit] = match precision {
            Precision::Binary => &[Trit::Neg, Trit::Pos],
            Precision::Ternary => &[Trit::Neg, Trit::Zero, Trit::Pos],
        };
        let mut worst = f64::INFINITY;
        for pair in used.windows(2) {
            let a = self.state(pair[0])?;
            let b = self.state(pair[1])?;
            let spread = a.d2d_sigma + b.d2d_sigma;
            let gap = (b.mean - a.mean).abs();
            let ratio = if spread == 0.0 { f64::INFINITY } else { gap / spread };
            worst = worst.min(ratio);
        }
        Ok(worst)
    }

    /// Same config with D2D and C2C sigmas multiplied by the given factors.
    pub fn scaled_variability(&self, d2d: f64, c2c: f64) -> Self {
        let mut cfg = self.clone();
        for s in cfg.states.iter_mut().flatten() {
            s.d2d_sigma *= d2d;
            s.c2c_sigma *= c2c;
        }
        cfg
    }

    /// Same config with all variability removed.
    pub fn ideal(&self) -> Self {
        self.scaled_variability(0.0, 0.0)
    }

    pub fn has_read_noise(&self) -> bool {
        self.states.iter().flatten().any(|s| s.c2c_sigma > 0.0)
    }
}

fn state(label: &str, mean: f64, d2d: f64, c2c: f64) -> MlcStateModel {
    MlcStateModel {
        label: label.to_string(),
        mean,
        d2d_sigma: d2d,
        c2c_sigma: c2c,
    }
}

/// `1 / (1 + e^-x)`.
pub fn sigmoid_ideal(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum NeuronMode {
    Ideal,
    Measured,
}

/// Current-to-voltage transfer of the sigmoid neuron:
/// `offset + amplitude / (1 + e^-(i - midpoint))` with `i` in microamps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SigmoidNeuronModel {
    pub amplitude: f64,
    pub midpoint_ua: f64,
    pub offset: f64,
    pub mode: NeuronMode,
}

impl SigmoidNeuronModel {
    /// Fit of the fabricated 130 nm 6T neuron.
    pub fn measured() -> Self {
        SigmoidNeuronModel {
            amplitude: 1.5156,
            midpoint_ua: 1.56,
            offset: 0.1,
            mode: NeuronMode::Measured,
        }
    }

    /// Unit logistic.
    pub fn ideal() -> Self {
        SigmoidNeuronModel {
            amplitude: 1.0,
            midpoint_ua: 0.0,
            offset: 0.0,
            mode: NeuronMode::Ideal,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.amplitude.is_finite() && self.amplitude > 0.0) {
            return Err(config_err!("neuron amplitude must be > 0"));
        }
        if !(self.midpoint_ua.is_finite() && self.offset.is_finite()) {
            return Err(config_err!("neuron midpoint and offset must be finite"));
        }
        Ok(())
    }

    #[inline]
    pub fn voltage(&self, i_input_ua: f64) -> f64 {
        sigmoid_neuron_voltage(i_input_ua, self)
    }
}

impl Default for SigmoidNeuronModel {
    fn default() -> Self {
        Self::measured()
    }
}

pub fn sigmoid_neuron_voltage(i_input_ua: f64, model: &SigmoidNeuronModel) -> f64 {
    model.offset + model.amplitude * sigmoid_ideal(i_input_ua - model.midpoint_ua)
}

/// `dV/di` in volts per microamp.
pub fn sigmoid_neuron_slope(i_input_ua: f64, model: &SigmoidNeuronModel) -> f64 {
    let s = sigmoid_ideal(i_input_ua - model.midpoint_ua);
    model.amplitude * s * (1.0 - s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_values() {
        assert_eq!(sigmoid_ideal(0.0), 0.5);
        // 40-digit reference: 0.7310585786300048792511592418218362743651
        assert!((sigmoid_ideal(1.0) - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert_eq!(sigmoid_ideal(800.0), 1.0);
        assert!(sigmoid_ideal(-800.0) >= 0.0);
        assert!(sigmoid_ideal(-30.0) > 0.0 && sigmoid_ideal(30.0) < 1.0);
    }

    #[test]
    fn measured_neuron_values() {
        let m = SigmoidNeuronModel::measured();
        assert!((m.voltage(1.56) - 0.8578).abs() < 1e-12);
        // 40-digit reference: 0.3631788582220040284289324851806341403871
        assert!((m.voltage(0.0) - 0.363_178_858_222_004).abs() < 1e-12);
        assert!((m.voltage(1e6) - 1.6156).abs() < 1e-12);
        assert!((m.voltage(-1e6) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn ideal_neuron_is_logistic() {
        let m = SigmoidNeuronModel::ideal();
        for i in -200..=200 {
            let x = f64::from(i) * 0.05;
            assert!((m.voltage(x) - sigmoid_ideal(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn neuron_is_monotone_with_quarter_amplitude_slope() {
        let m = SigmoidNeuronModel::measured();
        let mut prev = f64::NEG_INFINITY;
        for i in -400..=400 {
            let v = m.voltage(f64::from(i) * 0.05);
            assert!(v > prev);
            prev = v;
        }
        let h = 1e-5;
        let fd = (m.voltage(1.56 + h) - m.voltage(1.56 - h)) / (2.0 * h);
        let expect = m.amplitude / 4.0;
        assert!(((fd - expect) / expect).abs() < 1e-6, "{fd} vs {expect}");
        assert_eq!(sigmoid_neuron_slope(1.56, &m), expect);
        for i in -40..=40 {
            let x = f64::from(i) * 0.25;
            let fd = (m.voltage(x + h) - m.voltage(x - h)) / (2.0 * h);
            let an = sigmoid_neuron_slope(x, &m);
            assert!(((fd - an) / an).abs() < 1e-6, "at {x}: {fd} vs {an}");
        }
    }

    #[test]
    fn zero_sigma_is_degenerate() {
        let s = MlcStateModel::new("x", 1e-4, 0.0, 0.0).unwrap();
        let key = StreamKey::device(3);
        let c = CellCoord { array: 0, row: 1, col: 2 };
        assert_eq!(sample_device_conductance(&s, &key, c).value, 1e-4);
        assert_eq!(sample_read_conductance(7e-5, &s, &key, c, 9).value, 7e-5);
    }

    #[test]
    fn device_draw_is_fixed_per_cell() {
        let s = MlcStateModel::new("x", 1e-4, 5e-6, 0.0).unwrap();
        let key = StreamKey::device(11);
        let c = CellCoord { array: 2, row: 3, col: 4 };
        let a = sample_device_conductance(&s, &key, c);
        let b = sample_device_conductance(&s, &key, c);
        assert_eq!(a, b);
        let other = sample_device_conductance(&s, &key, CellCoord { col: 5, ..c });
        assert_ne!(a.value, other.value);
    }

    #[test]
    fn device_draw_moments() {
        // 100 uS mean, 5 uS sigma, 1e5 cells.
        let s = MlcStateModel::new("x", 100e-6, 5e-6, 0.0).unwrap();
        let key = StreamKey::device(2024);
        let n = 100_000u32;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for i in 0..n {
            let g = sample_device_conductance(&s, &key, CellCoord { array: 0, row: i / 317, col: i % 317 });
            assert!(g.value > 0.0 && !g.clamped);
            sum += g.value;
            sum2 += g.value * g.value;
        }
        let mean = sum / f64::from(n);
        let sd = libm::sqrt(sum2 / f64::from(n) - mean * mean);
        assert!((mean - 100e-6).abs() < 0.1e-6, "mean {mean}");
        assert!((sd - 5e-6).abs() < 0.2e-6, "sd {sd}");
    }

    #[test]
    fn read_draw_moments_and_freshness() {
        let s = MlcStateModel::new("x", 50e-6, 0.0, 2e-6).unwrap();
        let key = StreamKey::reads(5, 0);
        let c = CellCoord { array: 1, row: 0, col: 0 };
        let first = sample_read_conductance(50e-6, &s, &key, c, 0).value;
        let second = sample_read_conductance(50e-6, &s, &key, c, 1).value;
        assert_ne!(first, second);
        let n = 100_000u32;
        let (mut sum, mut sum2) = (0.0, 0.0);
        for r in 0..n {
            let g = sample_read_conductance(50e-6, &s, &key, c, r).value;
            sum += g;
            sum2 += g * g;
        }
        let mean = sum / f64::from(n);
        let var = sum2 / f64::from(n) - mean * mean;
        let expect = 2e-6f64 * 2e-6;
        assert!(((var - expect) / expect).abs() < 0.05, "var {var}");
    }

    #[test]
    fn clamping_floor_applies() {
        let s = MlcStateModel::new("x", 1e-6, 10e-6, 0.0).unwrap();
        let key = StreamKey::device(1);
        let mut clamped = 0;
        for col in 0..1000 {
            let g = sample_device_conductance(&s, &key, CellCoord { array: 0, row: 0, col });
            assert!(g.value >= 1e-8);
            if g.clamped {
                clamped += 1;
                assert_eq!(g.value, s.floor());
            }
        }
        assert!(clamped > 300);
    }

    #[test]
    fn default_configs_validate_and_order_separability() {
        let hrs = DeviceConfig::hrs_default();
        let lrs = DeviceConfig::lrs_default();
        for cfg in [&hrs, &lrs] {
            cfg.validate(Precision::Ternary).unwrap();
            cfg.validate(Precision::Binary).unwrap();
            assert_eq!(cfg.v_read, 0.2);
            assert_eq!(cfg.v_gate_on, 1.2);
        }
        let h = hrs.adjacent_separation(Precision::Ternary).unwrap();
        let l = lrs.adjacent_separation(Precision::Ternary).unwrap();
        assert!(h > 3.0, "hrs {h}");
        assert!(l > 2.0 && l <= 3.0, "lrs {l}");
        assert!(h > l);
        assert_eq!(hrs.ideal().adjacent_separation(Precision::Ternary).unwrap(), f64::INFINITY);
    }

    #[test]
    fn config_validation_errors() {
        let mut cfg = DeviceConfig::hrs_default();
        cfg.states[1] = None;
        assert!(cfg.validate(Precision::Binary).is_ok());
        assert!(cfg.validate(Precision::Ternary).is_err());

        let mut cfg = DeviceConfig::hrs_default();
        cfg.states[0].as_mut().unwrap().mean = 20e-6;
        assert!(cfg.validate(Precision::Ternary).is_err());

        let mut cfg = DeviceConfig::hrs_default();
        cfg.v_read = 0.0;
        assert!(cfg.validate(Precision::Binary).is_err());

        assert!(MlcStateModel::new("bad", -1.0, 0.0, 0.0).is_err());
        assert!(MlcStateModel::new("bad", 1.0, -1.0, 0.0).is_err());
    }

    #[test]
    fn line_through_outer_states() {
        let l = DeviceConfig::hrs_default().line().unwrap();
        assert!((l.slope - 5e-6).abs() < 1e-18);
        assert!((l.intercept - 10e-6).abs() < 1e-18);
    }
}
