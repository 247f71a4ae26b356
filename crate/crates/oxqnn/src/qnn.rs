//! Portable text format for quantized networks.
//!
//! ```text
//! qnn 1
//! precision ternary
//! input 8 32 32
//! classes 10
//! layer conv out=6 kernel=5 stride=1
//! weights 6,8,5,5 rle 3*+-0+2*-...
//! layer act ternary r=12.5
//! layer pool size=2
//! layer dense out=10
//! weights 10,400 pack AAAB...
//! layer act sigmoid scale=0.05
//! end
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. A `weights` line
//! belongs to the layer record before it; architectures without trained
//! weights simply omit it. Reals are written in Rust's shortest round-trip
//! form, so save -> load -> save is byte-identical.
//!
//! Weight encodings over the row-major tensor:
//! - `rle`: runs over `{-,0,+}`, each a symbol optionally preceded by
//!   `<count>*` with a decimal count of at least 2, e.g. `3*+0-12*0`.
//! - `pack`: base64 (standard alphabet, padded) of the packed trits. Binary
//!   tensors use one bit per weight, most significant bit first, `1` for
//!   `+1`. Ternary tensors store five weights per byte as
//!   `sum (w_i + 1) * 3^i`. Unused trailing bits or digits are zero.
//!
//! The writer picks whichever encoding is shorter, preferring `rle` on ties.

use std::fmt::Write as _;
use std::path::Path;

use base64::engine::general_purpose::STANDARD;
use base64::Engine;
use oxqnn_core::network::{ActivationKind, Layer, NetworkDescription};
use oxqnn_core::quant::{Precision, TernaryTensor, TernaryThreshold};

use crate::error::{Error, Result};
use crate::output::write_atomic;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Rle,
    Pack,
}

fn symbol(v: i8) -> char {
    match v {
        -1 => '-',
        0 => '0',
        _ => '+',
    }
}

pub fn encode_rle(data: &[i8]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < data.len() {
        let mut j = i + 1;
        while j < data.len() && data[j] == data[i] {
            j += 1;
        }
        if j - i > 1 {
            write!(out, "{}*", j - i).unwrap();
        }
        out.push(symbol(data[i]));
        i = j;
    }
    out
}

pub fn decode_rle(s: &str, len: usize) -> std::result::Result<Vec<i8>, String> {
    let mut out = Vec::with_capacity(len);
    let mut count = String::new();
    let mut counted = false;
    for c in s.chars() {
        if c == '*' {
            if count.is_empty() || counted {
                return Err("'*' must follow a run length".into());
            }
            counted = true;
            continue;
        }
        // `0` is a digit only inside an unterminated run length
        if c.is_ascii_digit() && !counted && (c != '0' || !count.is_empty()) {
            count.push(c);
            continue;
        }
        let v = match c {
            '-' => -1,
            '0' => 0,
            '+' => 1,
            _ => return Err(format!("unexpected character {c:?} in run-length data")),
        };
        if !count.is_empty() && !counted {
            return Err(format!("run length {count} is not followed by '*'"));
        }
        let n = if counted {
            let n: usize = count.parse().map_err(|_| format!("bad run length {count}"))?;
            if n < 2 {
                return Err(format!("run length {n} must be omitted or at least 2"));
            }
            n
        } else {
            1
        };
        count.clear();
        counted = false;
        if out.len() + n > len {
            return Err(format!("run-length data holds more than {len} weights"));
        }
        out.extend(std::iter::repeat_n(v, n));
    }
    if !count.is_empty() {
        return Err("run length without a symbol".into());
    }
    if out.len() != len {
        return Err(format!("run-length data holds {} weights, expected {len}", out.len()));
    }
    Ok(out)
}

pub fn encode_pack(data: &[i8], precision: Precision) -> String {
    let bytes: Vec<u8> = match precision {
        Precision::Binary => data
            .chunks(8)
            .map(|c| c.iter().enumerate().fold(0u8, |b, (i, &v)| b | (u8::from(v > 0) << (7 - i))))
            .collect(),
        Precision::Ternary => data
            .chunks(5)
            .map(|c| c.iter().rev().fold(0u8, |b, &v| b * 3 + (v + 1) as u8))
            .collect(),
    };
    STANDARD.encode(bytes)
}

pub fn decode_pack(s: &str, len: usize, precision: Precision) -> std::result::Result<Vec<i8>, String> {
    let bytes = STANDARD.decode(s).map_err(|e| format!("bad base64: {e}"))?;
    let per = match precision {
        Precision::Binary => 8,
        Precision::Ternary => 5,
    };
    if bytes.len() != len.div_ceil(per) {
        return Err(format!("{} packed bytes cannot hold exactly {len} weights", bytes.len()));
    }
    let mut out = Vec::with_capacity(len);
    for (k, &b) in bytes.iter().enumerate() {
        let used = per.min(len - k * per);
        match precision {
            Precision::Binary => {
                for i in 0..8 {
                    let bit = b >> (7 - i) & 1;
                    if i < used {
                        out.push(if bit == 1 { 1 } else { -1 });
                    } else if bit != 0 {
                        return Err(format!("nonzero padding bit in packed byte {k}"));
                    }
                }
            }
            Precision::Ternary => {
                if b >= 243 {
                    return Err(format!("packed byte {k} = {b} exceeds five trits"));
                }
                let mut rest = b;
                for i in 0..5 {
                    let d = rest % 3;
                    rest /= 3;
                    if i < used {
                        out.push(d as i8 - 1);
                    } else if d != 0 {
                        return Err(format!("nonzero padding digit in packed byte {k}"));
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Shorter of the two encodings, `rle` on ties.
pub fn encode_weights(t: &TernaryTensor) -> (Encoding, String) {
    let rle = encode_rle(t.data());
    let pack = encode_pack(t.data(), t.precision());
    if pack.len() < rle.len() {
        (Encoding::Pack, pack)
    } else {
        (Encoding::Rle, rle)
    }
}

pub fn to_text(net: &NetworkDescription) -> String {
    let mut s = String::new();
    let [c, h, w] = net.input_shape;
    writeln!(s, "qnn {FORMAT_VERSION}").unwrap();
    writeln!(s, "precision {}", net.precision.name()).unwrap();
    writeln!(s, "input {c} {h} {w}").unwrap();
    writeln!(s, "classes {}", net.num_classes).unwrap();
    for layer in &net.layers {
        match layer {
            Layer::Conv2d {
                out_channels,
                kernel,
                stride,
                ..
            } => writeln!(s, "layer conv out={out_channels} kernel={kernel} stride={stride}").unwrap(),
            Layer::Dense { out_units, .. } => writeln!(s, "layer dense out={out_units}").unwrap(),
            Layer::MaxPool { size } => writeln!(s, "layer pool size={size}").unwrap(),
            Layer::Activation(ActivationKind::Binary) => writeln!(s, "layer act binary").unwrap(),
            Layer::Activation(ActivationKind::Ternary(r)) => writeln!(s, "layer act ternary r={}", r.get()).unwrap(),
            Layer::Activation(ActivationKind::Sigmoid { scale }) => {
                writeln!(s, "layer act sigmoid scale={scale}").unwrap()
            }
        }
        if let Some(t) = layer.weights() {
            let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
            let (enc, body) = encode_weights(t);
            let tag = match enc {
                Encoding::Rle => "rle",
                Encoding::Pack => "pack",
            };
            writeln!(s, "weights {} {tag} {body}", shape.join(",")).unwrap();
        }
    }
    s.push_str("end\n");
    s
}

struct Fields<'a> {
    line: usize,
    words: Vec<&'a str>,
}

impl<'a> Fields<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Text {
            path: Default::default(),
            line: self.line,
            msg: msg.into(),
        }
    }

    fn count(&self, n: usize) -> Result<()> {
        if self.words.len() != n {
            return Err(self.err(format!("expected {} fields, found {}", n, self.words.len())));
        }
        Ok(())
    }

    fn num<T: std::str::FromStr>(&self, word: &str) -> Result<T> {
        word.parse().map_err(|_| self.err(format!("bad number {word:?}")))
    }

    /// Value of `key=...` at position `i`.
    fn kv<T: std::str::FromStr>(&self, i: usize, key: &str) -> Result<T> {
        let word = self.words.get(i).copied().unwrap_or("");
        match word.split_once('=') {
            Some((k, v)) if k == key => self.num(v),
            _ => Err(self.err(format!("expected {key}=<value>, found {word:?}"))),
        }
    }
}

pub fn from_text(text: &str) -> Result<NetworkDescription> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| Fields {
            line: i + 1,
            words: l.split_whitespace().collect(),
        })
        .filter(|f| !f.words.is_empty() && !f.words[0].starts_with('#'));
    let eof = |what: &str| Error::Text {
        path: Default::default(),
        line: text.lines().count(),
        msg: format!("unexpected end of file, expected {what}"),
    };
    let mut next = |what: &str, key: &str| -> Result<Fields> {
        let f = lines.next().ok_or_else(|| eof(what))?;
        if f.words[0] != key {
            return Err(f.err(format!("expected {what}, found {:?}", f.words[0])));
        }
        Ok(f)
    };
    let f = next("the qnn header", "qnn")?;
    f.count(2)?;
    let version: u32 = f.num(f.words[1])?;
    if version != FORMAT_VERSION {
        return Err(f.err(format!("unsupported format version {version}")));
    }
    let f = next("precision", "precision")?;
    f.count(2)?;
    let precision = match f.words[1] {
        "binary" => Precision::Binary,
        "ternary" => Precision::Ternary,
        p => return Err(f.err(format!("unknown precision {p:?}"))),
    };
    let f = next("input", "input")?;
    f.count(4)?;
    let input_shape = [f.num(f.words[1])?, f.num(f.words[2])?, f.num(f.words[3])?];
    let f = next("classes", "classes")?;
    f.count(2)?;
    let num_classes = f.num(f.words[1])?;
    let mut net = NetworkDescription {
        input_shape,
        precision,
        num_classes,
        layers: Vec::new(),
    };
    let mut ended = false;
    for f in lines.by_ref() {
        match f.words[0] {
            "end" => {
                f.count(1)?;
                ended = true;
                break;
            }
            "layer" => net.layers.push(parse_layer(&f)?),
            "weights" => {
                f.count(4)?;
                let shape: Vec<usize> = f.words[1].split(',').map(|d| f.num(d)).collect::<Result<_>>()?;
                let len: usize = shape.iter().product();
                let data = match f.words[2] {
                    "rle" => decode_rle(f.words[3], len),
                    "pack" => decode_pack(f.words[3], len, precision),
                    e => return Err(f.err(format!("unknown weight encoding {e:?}"))),
                }
                .map_err(|m| f.err(m))?;
                let t = TernaryTensor::new(shape, data, precision).map_err(|e| f.err(e.to_string()))?;
                match net.layers.last_mut() {
                    Some(Layer::Conv2d { weights, .. } | Layer::Dense { weights, .. }) if weights.is_none() => {
                        *weights = Some(t)
                    }
                    _ => return Err(f.err("weights must directly follow a conv or dense layer")),
                }
            }
            w => return Err(f.err(format!("unknown record {w:?}"))),
        }
    }
    if !ended {
        return Err(eof("end"));
    }
    if let Some(f) = lines.next() {
        return Err(f.err("content after end"));
    }
    net.validate(false)?;
    Ok(net)
}

fn parse_layer(f: &Fields) -> Result<Layer> {
    let kind = f.words.get(1).copied().unwrap_or("");
    Ok(match kind {
        "conv" => {
            f.count(5)?;
            Layer::Conv2d {
                out_channels: f.kv(2, "out")?,
                kernel: f.kv(3, "kernel")?,
                stride: f.kv(4, "stride")?,
                weights: None,
            }
        }
        "dense" => {
            f.count(3)?;
            Layer::Dense {
                out_units: f.kv(2, "out")?,
                weights: None,
            }
        }
        "pool" => {
            f.count(3)?;
            Layer::MaxPool { size: f.kv(2, "size")? }
        }
        "act" => match f.words.get(2).copied() {
            Some("binary") => {
                f.count(3)?;
                Layer::Activation(ActivationKind::Binary)
            }
            Some("ternary") => {
                f.count(4)?;
                let r = TernaryThreshold::new(f.kv(3, "r")?).map_err(|e| f.err(e.to_string()))?;
                Layer::Activation(ActivationKind::Ternary(r))
            }
            Some("sigmoid") => {
                f.count(4)?;
                Layer::Activation(ActivationKind::Sigmoid { scale: f.kv(3, "scale")? })
            }
            other => return Err(f.err(format!("unknown activation {other:?}"))),
        },
        other => return Err(f.err(format!("unknown layer kind {other:?}"))),
    })
}

pub fn load(path: &Path) -> Result<NetworkDescription> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    from_text(&text).map_err(|e| match e {
        Error::Core(c) => Error::Invalid(format!("{}: {c}", path.display())),
        e => e.at(path),
    })
}

pub fn save(net: &NetworkDescription, path: &Path) -> Result<()> {
    net.validate(false)?;
    write_atomic(path, to_text(net).as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;
    use oxqnn_core::rng::CounterRng;
    use proptest::prelude::*;

    fn trained(precision: Precision, seed: u64) -> NetworkDescription {
        let mut net = NetworkDescription::lenet(precision);
        let shapes = net.shapes().unwrap();
        let mut rng = CounterRng::new(seed, 9);
        for (i, layer) in net.layers.iter_mut().enumerate() {
            if let Some(shape) = layer.weight_shape(shapes[i]) {
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.trit(precision == Precision::Binary)).collect();
                let t = TernaryTensor::new(shape, data, precision).unwrap();
                if let Layer::Conv2d { weights, .. } | Layer::Dense { weights, .. } = layer {
                    *weights = Some(t);
                }
            }
        }
        net
    }

    #[test]
    fn rle_examples() {
        assert_eq!(encode_rle(&[1, 1, 1, 0, -1, -1]), "3*+02*-");
        assert_eq!(decode_rle("3*+02*-", 6).unwrap(), [1, 1, 1, 0, -1, -1]);
        assert_eq!(decode_rle("10*-", 10).unwrap(), vec![-1; 10]);
        assert_eq!(decode_rle("2*0", 2).unwrap(), [0, 0]);
        assert_eq!(decode_rle("+0", 2).unwrap(), [1, 0]);
        assert_eq!(encode_rle(&[0; 12]), "12*0");
        assert_eq!(decode_rle("2*+20*0", 22).unwrap().iter().filter(|v| **v == 0).count(), 20);
        assert!(decode_rle("1*+", 1).is_err());
        assert!(decode_rle("3*", 3).is_err());
        assert!(decode_rle("3+", 3).is_err());
        assert!(decode_rle("*+", 1).is_err());
        assert!(decode_rle("2**+", 2).is_err());
        assert!(decode_rle("2*+", 3).is_err());
        assert!(decode_rle("3*+", 2).is_err());
        assert!(decode_rle("x", 1).is_err());
    }

    #[test]
    fn pack_examples() {
        assert_eq!(STANDARD.decode(encode_pack(&[1, -1, -1, -1, -1, -1, -1, 1, 1], Precision::Binary)).unwrap(), [0x81, 0x80]);
        // (0+1) + (1+1)*3 + (-1+1)*9 = 7
        assert_eq!(STANDARD.decode(encode_pack(&[0, 1, -1], Precision::Ternary)).unwrap(), [7]);
        assert_eq!(decode_pack(&STANDARD.encode([7]), 3, Precision::Ternary).unwrap(), [0, 1, -1]);
        assert!(decode_pack(&STANDARD.encode([7 + 27]), 3, Precision::Ternary).is_err());
        assert!(decode_pack(&STANDARD.encode([243]), 5, Precision::Ternary).is_err());
        assert!(decode_pack(&STANDARD.encode([0x81, 0xC0]), 9, Precision::Binary).is_err());
        assert!(decode_pack(&STANDARD.encode([0x81]), 9, Precision::Binary).is_err());
        assert!(decode_pack("!!", 1, Precision::Binary).is_err());
    }

    #[test]
    fn architecture_without_weights_round_trips() {
        let net = NetworkDescription::lenet(Precision::Ternary);
        let text = to_text(&net);
        assert!(!text.contains("weights"));
        assert_eq!(from_text(&text).unwrap(), net);
    }

    #[test]
    fn trained_lenet_round_trips_byte_identically() {
        for p in [Precision::Binary, Precision::Ternary] {
            let net = trained(p, 4);
            let text = to_text(&net);
            let back = from_text(&text).unwrap();
            assert_eq!(back, net);
            assert_eq!(to_text(&back), text);
            // random trits have short runs, so packing wins
            assert!(text.lines().filter(|l| l.starts_with("weights")).all(|l| l.contains(" pack ")));
        }
    }

    #[test]
    fn comments_and_errors_carry_line_numbers() {
        let good = "# made by hand\nqnn 1\nprecision binary\n\ninput 1 2 2\nclasses 1\nlayer dense out=1\nweights 1,4 rle 2*+2*-\nlayer act sigmoid scale=0.25\nend\n";
        let net = from_text(good).unwrap();
        assert_eq!(net.layers[0].weights().unwrap().data(), [1, 1, -1, -1]);
        let line = |t: &str| match from_text(t).unwrap_err() {
            Error::Text { line, .. } => line,
            e => panic!("{e}"),
        };
        assert_eq!(line(&good.replace("qnn 1", "qnn 2")), 2);
        assert_eq!(line(&good.replace("2*+2*-", "2*+3*-")), 8);
        assert_eq!(line(&good.replace("dense", "lstm")), 7);
        assert_eq!(line(&good.replace("scale=0.25", "scale=abc")), 9);
        assert_eq!(line(&good.replace("end\n", "")), 9);
        assert_eq!(line(&format!("{good}layer act binary\n")), 11);
        // structural problems surface from validation
        assert!(matches!(from_text(&good.replace("1,4", "1,3").replace("2*+2*-", "2*+-")), Err(Error::Core(_))));
        assert!(from_text(&good.replace("scale=0.25", "scale=0")).is_err());
    }

    proptest! {
        #[test]
        fn encodings_round_trip(data in proptest::collection::vec(-1i8..=1, 0..200), binary in any::<bool>()) {
            let (p, data) = if binary {
                (Precision::Binary, data.into_iter().map(|v| if v >= 0 { 1 } else { -1 }).collect::<Vec<_>>())
            } else {
                (Precision::Ternary, data)
            };
            prop_assert_eq!(decode_rle(&encode_rle(&data), data.len()).unwrap(), data.clone());
            prop_assert_eq!(decode_pack(&encode_pack(&data, p), data.len(), p).unwrap(), data);
        }

        #[test]
        fn scales_and_thresholds_round_trip_bit_exactly(scale in 1e-9f64..1e3, r in 1e-6f64..1e3) {
            let mut net = trained(Precision::Ternary, 1);
            let n = net.layers.len();
            net.layers[n - 1] = Layer::Activation(ActivationKind::Sigmoid { scale });
            net.layers[1] = Layer::Activation(ActivationKind::Ternary(TernaryThreshold::new(r).unwrap()));
            prop_assert_eq!(from_text(&to_text(&net)).unwrap(), net);
        }
    }
}
