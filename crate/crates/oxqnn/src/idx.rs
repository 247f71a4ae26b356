//! IDX tensors (the MNIST distribution format), optionally gzip-compressed.
//!
//! Layout: two zero bytes, a type code, the rank, `rank` big-endian `u32`
//! dimensions, then the row-major payload. Only unsigned bytes (type `0x08`)
//! are supported, which covers every image and label file of the dataset.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use oxqnn_core::network::LabeledImages;

use crate::error::{Error, Result};

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;
const UBYTE: u8 = 0x08;
const GZIP_MAGIC: [u8; 2] = [0x1f, 0x8b];

/// Decoded unsigned-byte IDX tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn magic(&self) -> u32 {
        u32::from(UBYTE) << 8 | self.dims.len() as u32
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }
}

fn bad(offset: usize, msg: impl Into<String>) -> Error {
    Error::Binary {
        path: PathBuf::new(),
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Decode an uncompressed IDX byte stream.
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(bad(bytes.len(), "truncated header"));
    }
    if bytes[0] != 0 || bytes[1] != 0 || bytes[2] != UBYTE || bytes[3] == 0 {
        let magic = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        return Err(bad(0, format!("bad magic 0x{magic:08X}")));
    }
    let rank = usize::from(bytes[3]);
    let mut dims = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for k in 0..rank {
        let at = 4 + 4 * k;
        let raw: [u8; 4] = bytes
            .get(at..at + 4)
            .and_then(|s| s.try_into().ok())
            .ok_or_else(|| bad(bytes.len(), format!("truncated dimension {k}")))?;
        let d = u32::from_be_bytes(raw) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| bad(at, "dimension product overflows"))?;
        dims.push(d);
    }
    let start = 4 + 4 * rank;
    let have = bytes.len() - start;
    if have < total {
        return Err(bad(bytes.len(), format!("truncated payload: {have} of {total} bytes")));
    }
    if have > total {
        return Err(bad(start + total, format!("{} trailing bytes", have - total)));
    }
    Ok(IdxArray {
        dims,
        data: bytes[start..].to_vec(),
    })
}

/// Read an IDX file, decompressing it first if it starts with the gzip magic.
pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let raw = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_idx(&raw).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        e => e.at(path),
    })
}

/// [`parse_idx`] after gunzipping when the bytes carry the gzip magic.
pub fn decode_idx(raw: &[u8]) -> Result<IdxArray> {
    if !raw.starts_with(&GZIP_MAGIC) {
        return parse_idx(raw);
    }
    let mut out = Vec::new();
    MultiGzDecoder::new(raw)
        .read_to_end(&mut out)
        .map_err(|e| Error::io(Path::new("<gzip>"), e))?;
    parse_idx(&out)
}

/// The first 2000 test images and labels, compiled into the crate.
pub fn bundled_test_slice() -> Result<ImageSet> {
    const IMAGES: &[u8] = include_bytes!("../testdata/t10k-2000-images-idx3-ubyte.gz");
    const LABELS: &[u8] = include_bytes!("../testdata/t10k-2000-labels-idx1-ubyte.gz");
    let path = Path::new("<bundled test slice>");
    ImageSet::from_arrays(decode_idx(IMAGES)?, decode_idx(LABELS)?, path, path, 10)
}

fn expect_magic(arr: &IdxArray, magic: u32, path: &Path) -> Result<()> {
    if arr.magic() != magic {
        return Err(bad(0, format!("expected magic 0x{magic:08X}, found 0x{:08X}", arr.magic())).at(path));
    }
    Ok(())
}

/// Images and labels of one split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSet {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
    pub labels: Vec<u8>,
}

impl ImageSet {
    pub fn load(images: &Path, labels: &Path, classes: usize) -> Result<Self> {
        Self::from_arrays(load_idx(images)?, load_idx(labels)?, images, labels, classes)
    }

    fn from_arrays(img: IdxArray, lab: IdxArray, images: &Path, labels: &Path, classes: usize) -> Result<Self> {
        expect_magic(&img, IMAGES_MAGIC, images)?;
        expect_magic(&lab, LABELS_MAGIC, labels)?;
        if img.dims[0] != lab.dims[0] {
            return Err(Error::Invalid(format!(
                "{} holds {} images but {} holds {} labels",
                images.display(),
                img.dims[0],
                labels.display(),
                lab.dims[0]
            )));
        }
        let set = ImageSet {
            rows: img.dims[1],
            cols: img.dims[2],
            pixels: img.data,
            labels: lab.data,
        };
        set.view()?.check_labels(classes).map_err(|e| match e {
            oxqnn_core::Error::Domain(m) => Error::Invalid(format!("{}: {m}", labels.display())),
            e => e.into(),
        })?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn view(&self) -> Result<LabeledImages<'_>> {
        Ok(LabeledImages::new(&self.pixels, &self.labels, self.rows, self.cols)?)
    }

    /// `(images, labels)` IDX tensors for images `lo..hi`.
    pub fn to_idx(&self, lo: usize, hi: usize) -> (IdxArray, IdxArray) {
        let n = self.rows * self.cols;
        (
            IdxArray {
                dims: vec![hi - lo, self.rows, self.cols],
                data: self.pixels[lo * n..hi * n].to_vec(),
            },
            IdxArray {
                dims: vec![hi - lo],
                data: self.labels[lo..hi].to_vec(),
            },
        )
    }
}

/// A dataset directory with the standard file names, each either raw or
/// with a `.gz` suffix.
#[derive(Debug, Clone)]
pub struct DatasetStore {
    pub dir: PathBuf,
}

impl DatasetStore {
    pub const TRAIN: (&'static str, &'static str) = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte");
    pub const TEST: (&'static str, &'static str) = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte");

    pub fn new(dir: impl Into<PathBuf>) -> Self {
        DatasetStore { dir: dir.into() }
    }

    fn resolve(&self, stem: &str) -> PathBuf {
        let plain = self.dir.join(stem);
        if plain.exists() {
            return plain;
        }
        self.dir.join(format!("{stem}.gz"))
    }

    pub fn train(&self) -> Result<ImageSet> {
        ImageSet::load(&self.resolve(Self::TRAIN.0), &self.resolve(Self::TRAIN.1), 10)
    }

    pub fn test(&self) -> Result<ImageSet> {
        ImageSet::load(&self.resolve(Self::TEST.0), &self.resolve(Self::TEST.1), 10)
    }
}
