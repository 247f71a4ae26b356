//! Digital-domain binary/ternary arithmetic.
//!
//! Everything the analog crossbar computes is checked against the exact
//! integer results produced here. Trits are stored as `i8` in `{-1, 0, +1}`;
//! [`PackedTrits`] is the bit-plane kernel used on the hot path and must agree
//! bit-exactly with the byte-slice reference [`dot_reference`].

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{domain_err, shape_err, Result};

/// A single balanced-ternary digit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(i8)]
pub enum Trit {
    Neg = -1,
    Zero = 0,
    Pos = 1,
}

impl Trit {
    pub const ALL: [Trit; 3] = [Trit::Neg, Trit::Zero, Trit::Pos];

    #[inline]
    pub fn value(self) -> i8 {
        self as i8
    }

    pub fn from_i8(v: i8) -> Option<Trit> {
        match v {
            -1 => Some(Trit::Neg),
            0 => Some(Trit::Zero),
            1 => Some(Trit::Pos),
            _ => None,
        }
    }

    /// Index into three-element per-state tables (`-1 -> 0`, `0 -> 1`, `+1 -> 2`).
    #[inline]
    pub fn index(self) -> usize {
        (self as i8 + 1) as usize
    }
}

/// Weight/activation precision of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Binary,
    Ternary,
}

impl Precision {
    /// Whether `v` is a legal element for this precision.
    #[inline]
    pub fn admits(self, v: i8) -> bool {
        match self {
            Precision::Binary => v == 1 || v == -1,
            Precision::Ternary => (-1..=1).contains(&v),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Precision::Binary => "binary",
            Precision::Ternary => "ternary",
        }
    }
}

/// Dense row-major tensor of trits.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TernaryTensor {
    shape: Vec<usize>,
    data: Vec<i8>,
    precision: Precision,
}

impl TernaryTensor {
    pub fn new(shape: Vec<usize>, data: Vec<i8>, precision: Precision) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(shape_err!(
                "shape {:?} holds {} elements but {} were supplied",
                shape,
                len,
                data.len()
            ));
        }
        if let Some((i, v)) = data.iter().enumerate().find(|(_, v)| !precision.admits(**v)) {
            return Err(domain_err!(
                "element {} = {} is not a valid {} trit",
                i,
                v,
                precision.name()
            ));
        }
        Ok(TernaryTensor {
            shape,
            data,
            precision,
        })
    }

    /// One-dimensional tensor.
    pub fn vector(data: Vec<i8>, precision: Precision) -> Result<Self> {
        let n = data.len();
        Self::new(vec![n], data, precision)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data, self.precision)
    }

    /// Count of `(-1, 0, +1)` elements.
    pub fn histogram(&self) -> [usize; 3] {
        let mut h = [0usize; 3];
        for &v in &self.data {
            h[(v + 1) as usize] += 1;
        }
        h
    }
}

/// Half-width `r` of the ternary dead band; strictly positive.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct TernaryThreshold(f64);

impl TernaryThreshold {
    /// Used when a network description omits `r`.
    pub const DEFAULT: TernaryThreshold = TernaryThreshold(0.5);

    pub fn new(r: f64) -> Result<Self> {
        if r.is_finite() && r > 0.0 {
            Ok(TernaryThreshold(r))
        } else {
            Err(domain_err!("ternary threshold must be finite and > 0, got {}", r))
        }
    }

    #[inline]
    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for TernaryThreshold {
    fn default() -> Self {
        Self::DEFAULT
    }
}

/// Sign activation: `+1` for `x >= 0`, `-1` otherwise.
pub fn act_binary(x: f64) -> Result<Trit> {
    if !x.is_finite() {
        return Err(domain_err!("binary activation of non-finite value {}", x));
    }
    Ok(if x >= 0.0 { Trit::Pos } else { Trit::Neg })
}

/// Dead-band activation: `+1` above `r`, `-1` below `-r`, `0` for `|x| <= r`.
pub fn act_ternary(x: f64, thr: TernaryThreshold) -> Result<Trit> {
    if !x.is_finite() {
        return Err(domain_err!("ternary activation of non-finite value {}", x));
    }
    let r = thr.get();
    Ok(if x > r {
        Trit::Pos
    } else if x < -r {
        Trit::Neg
    } else {
        Trit::Zero
    })
}

/// Trit product. Zero whenever either operand is zero, XNOR polarity otherwise.
#[inline]
pub fn gated_xnor(x: Trit, w: Trit) -> Trit {
    match (x, w) {
        (Trit::Zero, _) | (_, Trit::Zero) => Trit::Zero,
        (a, b) if a == b => Trit::Pos,
        _ => Trit::Neg,
    }
}

/// Exact signed dot product of two 1-D trit tensors.
pub fn popcount_oracle(x: &TernaryTensor, w: &TernaryTensor) -> Result<i64> {
    if x.shape().len() != 1 || w.shape().len() != 1 {
        return Err(shape_err!(
            "popcount expects 1-D operands, got {:?} and {:?}",
            x.shape(),
            w.shape()
        ));
    }
    dot_reference(x.data(), w.data())
}

/// Byte-slice reference for the trit dot product.
pub fn dot_reference(x: &[i8], w: &[i8]) -> Result<i64> {
    if x.len() != w.len() {
        return Err(shape_err!("length mismatch: {} vs {}", x.len(), w.len()));
    }
    Ok(x.iter().zip(w).map(|(&a, &b)| i64::from(a) * i64::from(b)).sum())
}

/// Two-bit-per-trit packed vector: a nonzero plane and a sign plane.
///
/// A trit `t` sets bit `i` of `nonzero` iff `t != 0`, and bit `i` of
/// `negative` iff `t == -1`. Unused tail bits are zero in both planes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedTrits {
    len: usize,
    nonzero: Vec<u64>,
    negative: Vec<u64>,
}

impl PackedTrits {
    pub fn pack(trits: &[i8]) -> Self {
        let words = trits.len().div_ceil(64);
        let mut nonzero = vec![0u64; words];
        let mut negative = vec![0u64; words];
        for (i, &t) in trits.iter().enumerate() {
            debug_assert!((-1..=1).contains(&t));
            let bit = 1u64 << (i % 64);
            if t != 0 {
                nonzero[i / 64] |= bit;
            }
            if t < 0 {
                negative[i / 64] |= bit;
            }
        }
        PackedTrits {
            len: trits.len(),
            nonzero,
            negative,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn unpack(&self) -> Vec<i8> {
        (0..self.len)
            .map(|i| {
                let bit = 1u64 << (i % 64);
                if self.nonzero[i / 64] & bit == 0 {
                    0
                } else if self.negative[i / 64] & bit != 0 {
                    -1
                } else {
                    1
                }
            })
            .collect()
    }

    /// Signed dot product: matching pairs count `+1`, opposing pairs `-1`.
    pub fn dot(&self, other: &PackedTrits) -> Result<i64> {
        if self.len != other.len {
            return Err(shape_err!("length mismatch: {} vs {}", self.len, other.len));
        }
        Ok(self.dot_unchecked(other))
    }

    #[inline]
    pub(crate) fn dot_unchecked(&self, other: &PackedTrits) -> i64 {
        let mut both = 0i64;
        let mut opposed = 0i64;
        for i in 0..self.nonzero.len() {
            let nz = self.nonzero[i] & other.nonzero[i];
            both += i64::from(nz.count_ones());
            opposed += i64::from(((self.negative[i] ^ other.negative[i]) & nz).count_ones());
        }
        both - 2 * opposed
    }
}
