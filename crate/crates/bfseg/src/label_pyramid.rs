//! Ground-truth downsampling and purity masks.
//!
//! Deep supervision compares coarse predictions against a downsampled label.
//! Downsampling a binary building mask produces fractional values wherever a
//! coarse cell covers both building and background pixels; those hybrid cells
//! have no well-defined class at that scale. This module downsamples labels by
//! exact block averaging and marks every cell as pure (all covered source
//! pixels agree) or hybrid, so the loss layer can ignore hybrid cells.
//!
//! Arithmetic is exact: block sums are integers and the divisor `f*f` is a
//! power of two, so every soft value is a dyadic rational represented exactly
//! in f64 and the purity test `value == 0 || value == 1` needs no tolerance.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Strides at which the decoder emits auxiliary predictions.
pub const DECODER_STRIDES: [usize; 4] = [4, 8, 16, 32];

/// Binary ground-truth grid; 1 = building, 0 = background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRaster {
    values: Array2<u8>,
}

impl LabelRaster {
    /// Validates that every value is exactly 0 or 1.
    pub fn new(values: Array2<u8>) -> Result<Self> {
        if let Some(bad) = values.iter().find(|&&v| v > 1) {
            return Err(Error::Domain(format!(
                "label values must be 0 or 1, found {bad}"
            )));
        }
        Ok(Self { values })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            values: Array2::zeros((height, width)),
        }
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    pub fn building_pixels(&self) -> u64 {
        self.values.iter().map(|&v| u64::from(v)).sum()
    }

    /// Label as f64 grid (exact 0.0 / 1.0), the form the loss layer consumes.
    pub fn to_f64(&self) -> Array2<f64> {
        self.values.mapv(f64::from)
    }
}

/// Block-averaged label at a reduced resolution; values lie in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct SoftLabel {
    values: Array2<f64>,
    factor: usize,
}

impl SoftLabel {
    /// Builds from precomputed values, validating range and the power-of-two factor.
    pub fn from_values(values: Array2<f64>, factor: usize) -> Result<Self> {
        if !factor.is_power_of_two() {
            return Err(Error::Domain(format!(
                "downsample factor must be a power of two, got {factor}"
            )));
        }
        if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Domain(format!(
                "soft label values must lie in [0, 1], found {bad}"
            )));
        }
        Ok(Self { values, factor })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn factor(&self) -> usize {
        self.factor
    }

    pub fn height(&self) -> usize {
        self.values.nrows()
    }

    pub fn width(&self) -> usize {
        self.values.ncols()
    }

    /// Further downsamples by block averaging; the combined factor multiplies.
    pub fn downsample(&self, factor: usize) -> Result<SoftLabel> {
        let values = block_average(&self.values, factor)?;
        SoftLabel::from_values(values, self.factor * factor)
    }
}

/// Per-cell purity indicator matching a [`SoftLabel`]'s shape; 1 = pure, 0 = hybrid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PurityMask {
    values: Array2<u8>,
}

impl PurityMask {
    pub fn values(&self) -> &Array2<u8> {
        &self.values
    }

    /// Number of pure cells.
    pub fn pure_count(&self) -> u64 {
        self.values.iter().map(|&v| u64::from(v)).sum()
    }

    pub fn total(&self) -> u64 {
        self.values.len() as u64
    }
}

/// One pyramid level: the soft label and its purity mask at a given stride.
#[derive(Debug, Clone)]
pub struct MaskLevel {
    pub stride: usize,
    pub soft: SoftLabel,
    pub mask: PurityMask,
}

/// Soft labels and purity masks at every decoder stride.
#[derive(Debug, Clone)]
pub struct MaskPyramid {
    levels: Vec<MaskLevel>,
}

impl MaskPyramid {
    pub fn levels(&self) -> &[MaskLevel] {
        &self.levels
    }

    pub fn level_for_stride(&self, stride: usize) -> Option<&MaskLevel> {
        self.levels.iter().find(|l| l.stride == stride)
    }
}

/// Exact block averaging of an arbitrary real grid; the shared downsampler
/// for labels and for the distillation teacher.
pub fn block_average(values: &Array2<f64>, factor: usize) -> Result<Array2<f64>> {
    if factor == 0 {
        return Err(Error::Domain("downsample factor must be positive".into()));
    }
    let (h, w) = values.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "grid {h}x{w} is not divisible by factor {factor}"
        )));
    }
    let inv = 1.0 / (factor * factor) as f64;
    let mut out = Array2::zeros((h / factor, w / factor));
    for oy in 0..h / factor {
        for ox in 0..w / factor {
            let mut sum = 0.0;
            for dy in 0..factor {
                for dx in 0..factor {
                    sum += values[(oy * factor + dy, ox * factor + dx)];
                }
            }
            out[(oy, ox)] = sum * inv;
        }
    }
    Ok(out)
}

/// Downsamples a binary label by averaging each `f x f` block.
///
/// The result at (i, j) is the exact fraction of building pixels in the
/// covered block, computed as an integer count divided by `f*f`.
pub fn downsample_label(label: &LabelRaster, factor: usize) -> Result<SoftLabel> {
    if factor == 0 || !factor.is_power_of_two() {
        return Err(Error::Domain(format!(
            "downsample factor must be a positive power of two, got {factor}"
        )));
    }
    let (h, w) = label.values.dim();
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Dimension(format!(
            "label {h}x{w} is not divisible by factor {factor}"
        )));
    }
    let denom = (factor * factor) as f64;
    let mut out = Array2::zeros((h / factor, w / factor));
    for oy in 0..h / factor {
        for ox in 0..w / factor {
            let mut count: u32 = 0;
            for dy in 0..factor {
                for dx in 0..factor {
                    count += u32::from(label.values[(oy * factor + dy, ox * factor + dx)]);
                }
            }
            out[(oy, ox)] = f64::from(count) / denom;
        }
    }
    SoftLabel::from_values(out, factor)
}

/// Marks each downsampled cell pure (exactly 0 or 1) or hybrid.
pub fn purity_mask(y_down: &SoftLabel) -> PurityMask {
    // SoftLabel construction already validated the range.
    purity_mask_from_values(y_down.values()).expect("soft label values are in range")
}

/// Purity mask over raw values, validating the [0, 1] domain.
pub fn purity_mask_from_values(values: &Array2<f64>) -> Result<PurityMask> {
    if let Some(bad) = values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!(
            "soft label values must lie in [0, 1], found {bad}"
        )));
    }
    let mask = values.mapv(|v| u8::from(v.floor() == v.ceil()));
    Ok(PurityMask { values: mask })
}

/// Builds the (soft label, purity mask) pair at every decoder stride.
pub fn build_mask_pyramid(label: &LabelRaster) -> Result<MaskPyramid> {
    let (h, w) = label.values.dim();
    let max = *DECODER_STRIDES.last().expect("strides are fixed");
    if h % max != 0 || w % max != 0 {
        return Err(Error::Dimension(format!(
            "label {h}x{w} must be divisible by {max}"
        )));
    }
    let mut levels = Vec::with_capacity(DECODER_STRIDES.len());
    for stride in DECODER_STRIDES {
        let soft = downsample_label(label, stride)?;
        let mask = purity_mask(&soft);
        levels.push(MaskLevel { stride, soft, mask });
    }
    Ok(MaskPyramid { levels })
}
