use alloc::vec;
use alloc::vec::Vec;

use crate::error::{config_err, domain_err, shape_err, Result};
use crate::quant::{Precision, TernaryTensor};

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(rows: usize, cols: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != rows * cols {
            return Err(shape_err!(
                "{} pixels for a {}x{} image",
                pixels.len(),
                rows,
                cols
            ));
        }
        Ok(GrayImage { rows, cols, pixels })
    }

    /// Build from wider integers, rejecting anything outside `0..=255`.
    pub fn from_values(rows: usize, cols: usize, values: &[i32]) -> Result<Self> {
        let pixels = values
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                u8::try_from(v).map_err(|_| domain_err!("pixel {} = {} is outside 0..=255", i, v))
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(rows, cols, pixels)
    }
}

/// Zero-pad (background) an image to `size x size`, centered.
pub fn pad_image(img: &GrayImage, size: usize) -> Result<GrayImage> {
    if img.rows > size || img.cols > size {
        return Err(shape_err!(
            "cannot pad a {}x{} image to {}x{}",
            img.rows,
            img.cols,
            size,
            size
        ));
    }
    let top = (size - img.rows) / 2;
    let left = (size - img.cols) / 2;
    let mut out = vec![0u8; size * size];
    for r in 0..img.rows {
        let dst = (top + r) * size + left;
        out[dst..dst + img.cols].copy_from_slice(&img.pixels[r * img.cols..(r + 1) * img.cols]);
    }
    GrayImage::new(size, size, out)
}

/// Unary (thermometer) encoding of pixel intensity into binary channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThermometricEncoder {
    thresholds: Vec<u16>,
}

impl Default for ThermometricEncoder {
    /// Eight channels at `32, 64, ..., 256`.
    fn default() -> Self {
        ThermometricEncoder {
            thresholds: (1..=8).map(|k| k * 32).collect(),
        }
    }
}

impl ThermometricEncoder {
    pub fn new(thresholds: Vec<u16>) -> Result<Self> {
        if thresholds.is_empty() {
            return Err(config_err!("thermometric encoder needs at least one channel"));
        }
        if thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(config_err!("thermometric thresholds must be strictly increasing"));
        }
        if thresholds.iter().any(|&t| t > 256) {
            return Err(config_err!("thermometric thresholds must be <= 256"));
        }
        Ok(ThermometricEncoder { thresholds })
    }

    pub fn channels(&self) -> usize {
        self.thresholds.len()
    }

    pub fn thresholds(&self) -> &[u16] {
        &self.thresholds
    }

    /// `[channel][row][col]` bits: `1` iff `pixel >= thresholds[channel]`.
    pub fn encode(&self, img: &GrayImage) -> Vec<u8> {
        let plane = img.rows * img.cols;
        let mut out = vec![0u8; self.channels() * plane];
        for (c, &t) in self.thresholds.iter().enumerate() {
            for (o, &p) in out[c * plane..(c + 1) * plane].iter_mut().zip(&img.pixels) {
                *o = u8::from(u16::from(p) >= t);
            }
        }
        out
    }

    /// Encoding mapped to `+1` (set) / `-1` (clear) activations,
    /// shaped `[channels, rows, cols]`.
    pub fn encode_activations(&self, img: &GrayImage) -> TernaryTensor {
        let data = self.encode(img).into_iter().map(|b| if b == 1 { 1 } else { -1 }).collect();
        TernaryTensor::new(vec![self.channels(), img.rows, img.cols], data, Precision::Binary)
            .expect("encoder output is a valid binary tensor")
    }
}

/// Dataset image to network input: zero-pad to `size x size`, then encode.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InputPipeline {
    pub encoder: ThermometricEncoder,
    pub size: usize,
}

impl Default for InputPipeline {
    fn default() -> Self {
        InputPipeline {
            encoder: ThermometricEncoder::default(),
            size: 32,
        }
    }
}

impl InputPipeline {
    pub fn input_shape(&self) -> [usize; 3] {
        [self.encoder.channels(), self.size, self.size]
    }

    pub fn prepare(&self, img: &GrayImage) -> Result<TernaryTensor> {
        Ok(self.encoder.encode_activations(&pad_image(img, self.size)?))
    }
}

/// Borrowed view of equally sized labelled grayscale images.
#[derive(Debug, Clone, Copy)]
pub struct LabeledImages<'a> {
    pixels: &'a [u8],
    labels: &'a [u8],
    rows: usize,
    cols: usize,
}

impl<'a> LabeledImages<'a> {
    pub fn new(pixels: &'a [u8], labels: &'a [u8], rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 || pixels.len() != labels.len() * rows * cols {
            return Err(shape_err!(
                "{} pixel bytes do not hold {} images of {}x{}",
                pixels.len(),
                labels.len(),
                rows,
                cols
            ));
        }
        Ok(LabeledImages {
            pixels,
            labels,
            rows,
            cols,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &'a [u8] {
        self.labels
    }

    pub fn pixels(&self, i: usize) -> &'a [u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }

    pub fn image(&self, i: usize) -> GrayImage {
        GrayImage {
            rows: self.rows,
            cols: self.cols,
            pixels: self.pixels(i).to_vec(),
        }
    }

    /// Images `lo..hi`.
    pub fn slice(&self, lo: usize, hi: usize) -> Self {
        let n = self.rows * self.cols;
        LabeledImages {
            pixels: &self.pixels[lo * n..hi * n],
            labels: &self.labels[lo..hi],
            rows: self.rows,
            cols: self.cols,
        }
    }

    /// Fails if any label is `>= classes`.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        match self.labels.iter().position(|&l| usize::from(l) >= classes) {
            Some(i) => Err(domain_err!("label {} of image {} is not below {}", self.labels[i], i, classes)),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(p: u8) -> GrayImage {
        GrayImage::new(1, 1, vec![p]).unwrap()
    }

    #[test]
    fn saturated_and_blank_pixels() {
        let enc = ThermometricEncoder::default();
        // 256 is unreachable for 8-bit pixels, so the top channel never fires
        assert_eq!(enc.encode(&one(255)), [1, 1, 1, 1, 1, 1, 1, 0]);
        assert_eq!(enc.encode(&one(0)), [0; 8]);
        let all = ThermometricEncoder::new(vec![1, 2, 4, 8, 16, 32, 64, 128]).unwrap();
        assert_eq!(all.encode(&one(255)), [1; 8]);
    }

    #[test]
    fn mid_gray_sets_four_channels() {
        let enc = ThermometricEncoder::default();
        assert_eq!(enc.encode(&one(128)), [1, 1, 1, 1, 0, 0, 0, 0]);
        assert_eq!(enc.encode(&one(127)), [1, 1, 1, 0, 0, 0, 0, 0]);
    }

    #[test]
    fn code_is_a_thermometer() {
        let enc = ThermometricEncoder::default();
        for p in 0..=255u8 {
            let bits = enc.encode(&one(p));
            assert!(bits.windows(2).all(|w| w[0] >= w[1]), "pixel {p}");
            let count = bits.iter().filter(|b| **b == 1).count();
            assert_eq!(count, enc.thresholds().iter().filter(|&&t| u16::from(p) >= t).count());
        }
    }

    #[test]
    fn activations_and_layout() {
        let enc = ThermometricEncoder::default();
        let img = GrayImage::new(1, 2, vec![40, 200]).unwrap();
        let t = enc.encode_activations(&img);
        assert_eq!(t.shape(), &[8, 1, 2]);
        assert_eq!(&t.data()[..4], &[1, 1, -1, 1]);
    }

    #[test]
    fn bad_inputs() {
        assert!(GrayImage::from_values(1, 2, &[0, 256]).is_err());
        assert!(GrayImage::from_values(1, 1, &[-1]).is_err());
        assert!(GrayImage::from_values(1, 1, &[255]).is_ok());
        assert!(ThermometricEncoder::new(vec![32, 32]).is_err());
        assert!(ThermometricEncoder::new(vec![]).is_err());
        assert!(GrayImage::new(2, 2, vec![0; 3]).is_err());
    }

    #[test]
    fn padding_centers_image() {
        let img = GrayImage::new(28, 28, (0..784).map(|i| (i % 251) as u8 + 1).collect()).unwrap();
        let p = pad_image(&img, 32).unwrap();
        assert_eq!(p.rows, 32);
        assert_eq!(p.pixels[0], 0);
        assert_eq!(p.pixels[2 * 32 + 2], img.pixels[0]);
        assert_eq!(p.pixels[29 * 32 + 29], img.pixels[783]);
        assert_eq!(p.pixels.iter().filter(|&&v| v == 0).count(), 32 * 32 - 784);
        assert!(pad_image(&p, 28).is_err());
    }

    #[test]
    fn pipeline_and_views() {
        let px: Vec<u8> = (0..2 * 784).map(|i| (i % 256) as u8).collect();
        let labels = [3u8, 12];
        let set = LabeledImages::new(&px, &labels, 28, 28).unwrap();
        assert_eq!(set.len(), 2);
        assert!(set.check_labels(10).is_err());
        assert!(set.slice(0, 1).check_labels(10).is_ok());
        assert_eq!(set.pixels(1)[0], (784 % 256) as u8);
        let t = InputPipeline::default().prepare(&set.image(0)).unwrap();
        assert_eq!(t.shape(), &[8, 32, 32]);
        assert!(t.data().iter().all(|v| *v == 1 || *v == -1));
        assert!(LabeledImages::new(&px[1..], &labels, 28, 28).is_err());
    }
}
