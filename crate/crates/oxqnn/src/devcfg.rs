//! Flat `key = value` device-config files.
//!
//! ```text
//! # HRS triple
//! region = HRS
//! v_read = 2e-1
//! v_gate_on = 1.2e0
//! v_gate_off = 0e0
//! seed = 1
//! state.-1.mean = 5e-6
//! state.-1.d2d_sigma = 5e-7
//! state.-1.c2c_sigma = 2.5e-7
//! state.0.mean = 1e-5
//! ...
//! ```
//!
//! Parsing rules:
//! - `#` starts a comment line; blank lines are skipped; whitespace around
//!   keys and values is trimmed.
//! - Every key appears at most once. Unknown keys are rejected.
//! - `region` is `HRS` or `LRS`. `seed` is a decimal `u64`.
//! - Reals use Rust's `f64` grammar and are rounded to nearest, so a value
//!   written by [`to_text`] parses back to the identical bits.
//! - States `-1` and `+1` need `mean`, `d2d_sigma` and `c2c_sigma` (siemens);
//!   state `0` is optional but all-or-nothing. `label` is optional and
//!   defaults to `<region>_<trit>`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use oxqnn_core::device::{DeviceConfig, MlcStateModel, Region};
use oxqnn_core::quant::{Precision, Trit};

use crate::error::{Error, Result};

const STATE_FIELDS: [&str; 4] = ["mean", "d2d_sigma", "c2c_sigma", "label"];
const TOP_KEYS: [&str; 5] = ["region", "v_read", "v_gate_on", "v_gate_off", "seed"];

fn trit_tag(t: Trit) -> &'static str {
    match t {
        Trit::Neg => "-1",
        Trit::Zero => "0",
        Trit::Pos => "+1",
    }
}

fn err(line: usize, msg: impl Into<String>) -> Error {
    Error::Text {
        path: Default::default(),
        line,
        msg: msg.into(),
    }
}

fn known(key: &str) -> bool {
    TOP_KEYS.contains(&key)
        || key.strip_prefix("state.").is_some_and(|rest| {
            Trit::ALL.iter().any(|&t| {
                rest.strip_prefix(trit_tag(t))
                    .and_then(|f| f.strip_prefix('.'))
                    .is_some_and(|f| STATE_FIELDS.contains(&f))
            })
        })
}

pub fn from_text(text: &str) -> Result<DeviceConfig> {
    let mut kv: BTreeMap<String, (usize, String)> = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.trim();
        if t.is_empty() || t.starts_with('#') {
            continue;
        }
        let (k, v) = t
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key = value, found {t:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        if !known(k) {
            return Err(err(line, format!("unknown key {k:?}")));
        }
        if let Some((first, _)) = kv.get(k) {
            return Err(err(line, format!("duplicate key {k:?} (first set on line {first})")));
        }
        kv.insert(k.to_string(), (line, v.to_string()));
    }
    let last = text.lines().count().max(1);
    let get = |k: &str| kv.get(k).ok_or_else(|| err(last, format!("missing key {k:?}")));
    let real = |k: &str| -> Result<f64> {
        let (line, v) = get(k)?;
        match v.parse::<f64>() {
            Ok(x) if x.is_finite() => Ok(x),
            _ => Err(err(*line, format!("{k}: {v:?} is not a finite real"))),
        }
    };
    let (line, region) = get("region")?;
    let region = match region.as_str() {
        "HRS" => Region::Hrs,
        "LRS" => Region::Lrs,
        r => return Err(err(*line, format!("region must be HRS or LRS, found {r:?}"))),
    };
    let (line, seed) = get("seed")?;
    let rng_seed = seed
        .parse()
        .map_err(|_| err(*line, format!("seed: {seed:?} is not an unsigned integer")))?;
    let mut states: [Option<MlcStateModel>; 3] = Default::default();
    for t in Trit::ALL {
        let key = |f: &str| format!("state.{}.{f}", trit_tag(t));
        let present = STATE_FIELDS.iter().any(|f| kv.contains_key(&key(f)));
        if !present && t == Trit::Zero {
            continue;
        }
        let label = kv
            .get(&key("label"))
            .map(|(_, v)| v.clone())
            .unwrap_or_else(|| format!("{}_{}", region.name(), trit_tag(t)));
        let s = MlcStateModel::new(&label, real(&key("mean"))?, real(&key("d2d_sigma"))?, real(&key("c2c_sigma"))?)
            .map_err(|e| err(kv[&key("mean")].0, e.to_string()))?;
        states[t.index()] = Some(s);
    }
    let cfg = DeviceConfig {
        region,
        states,
        v_read: real("v_read")?,
        v_gate_on: real("v_gate_on")?,
        v_gate_off: real("v_gate_off")?,
        rng_seed,
    };
    cfg.validate(Precision::Binary).map_err(|e| err(last, e.to_string()))?;
    Ok(cfg)
}

/// Canonical text; parses back to an identical config.
pub fn to_text(cfg: &DeviceConfig) -> String {
    let mut s = String::new();
    writeln!(s, "region = {}", cfg.region.name()).unwrap();
    writeln!(s, "v_read = {:e}", cfg.v_read).unwrap();
    writeln!(s, "v_gate_on = {:e}", cfg.v_gate_on).unwrap();
    writeln!(s, "v_gate_off = {:e}", cfg.v_gate_off).unwrap();
    writeln!(s, "seed = {}", cfg.rng_seed).unwrap();
    for t in Trit::ALL {
        if let Some(st) = &cfg.states[t.index()] {
            let tag = trit_tag(t);
            writeln!(s, "state.{tag}.label = {}", st.label).unwrap();
            writeln!(s, "state.{tag}.mean = {:e}", st.mean).unwrap();
            writeln!(s, "state.{tag}.d2d_sigma = {:e}", st.d2d_sigma).unwrap();
            writeln!(s, "state.{tag}.c2c_sigma = {:e}", st.c2c_sigma).unwrap();
        }
    }
    s
}

/// A config file, or one of the built-in names `hrs_default` / `lrs_default`
/// when no such file exists.
pub fn load(spec: &str) -> Result<DeviceConfig> {
    let path = Path::new(spec);
    if !path.exists() {
        if let Some(cfg) = DeviceConfig::named_default(spec) {
            return Ok(cfg);
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|e| e.at(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        for cfg in [DeviceConfig::hrs_default(), DeviceConfig::lrs_default()] {
            let text = to_text(&cfg);
            assert_eq!(from_text(&text).unwrap(), cfg);
        }
    }

    fn line_of(r: Result<DeviceConfig>) -> usize {
        match r.unwrap_err() {
            Error::Text { line, .. } => line,
            e => panic!("{e}"),
        }
    }

    #[test]
    fn rejects_unknown_duplicate_and_malformed_keys() {
        let base = to_text(&DeviceConfig::hrs_default());
        assert_eq!(line_of(from_text(&format!("{base}colour = red\n"))), 18);
        assert_eq!(line_of(from_text(&format!("{base}v_read = 0.3\n"))), 18);
        assert_eq!(line_of(from_text(&format!("{base}state.2.mean = 1\n"))), 18);
        assert_eq!(line_of(from_text(&base.replace("region = HRS", "region = MRS"))), 1);
        assert_eq!(line_of(from_text(&base.replace("seed = 1", "seed = -1"))), 5);
        assert_eq!(line_of(from_text(&base.replace("v_read = 2e-1", "v_read"))), 2);
        assert!(from_text(&base.replace("v_read = 2e-1", "v_read = inf")).is_err());
        assert!(from_text(&base.replace("state.+1.mean = 1.5e-5", "state.+1.mean = 1e-6")).is_err());
        let no_zero: String = base.lines().filter(|l| !l.starts_with("state.0.")).map(|l| format!("{l}\n")).collect();
        let cfg = from_text(&no_zero).unwrap();
        assert!(cfg.states[1].is_none());
        let half_zero: String = base.lines().filter(|l| !l.starts_with("state.0.mean")).map(|l| format!("{l}\n")).collect();
        assert!(from_text(&half_zero).is_err());
    }

    #[test]
    fn comments_whitespace_and_default_labels() {
        let text = "# lab array\n region=LRS \nv_read= 0.2\nv_gate_on =1.2\nv_gate_off = 0\nseed = 9\n\n\
                    state.-1.mean = 6e-5\nstate.-1.d2d_sigma = 0\nstate.-1.c2c_sigma = 0\n\
                    state.+1.mean = 1.2e-4\nstate.+1.d2d_sigma = 0\nstate.+1.c2c_sigma = 0\n";
        let cfg = from_text(text).unwrap();
        assert_eq!(cfg.region, Region::Lrs);
        assert_eq!(cfg.rng_seed, 9);
        assert_eq!(cfg.states[2].as_ref().unwrap().label, "LRS_+1");
        assert_eq!(cfg.v_read.to_bits(), 0.2f64.to_bits());
    }

    #[test]
    fn named_defaults_resolve_without_files() {
        assert_eq!(load("hrs_default").unwrap(), DeviceConfig::hrs_default());
        assert!(load("/nonexistent/device.cfg").is_err());
    }

    proptest! {
        #[test]
        fn reals_round_trip_bit_exactly(mean in 1e-9f64..1e-3, sd in 0f64..1e-6, v in 1e-3f64..5.0) {
            let mut cfg = DeviceConfig::lrs_default();
            cfg.v_read = v;
            let s = cfg.states[2].as_mut().unwrap();
            s.mean = mean + 1e-3;
            s.c2c_sigma = sd;
            let back = from_text(&to_text(&cfg)).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
