//! CT slices, infection masks, boundary labels and dataset handling.
//!
//! Decoding image files happens in the `bcsnet` crate; this module starts
//! from raw 8-bit pixel buffers.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{bail, Result};
use crate::kernels::{nearest_index, ResizePlan};
use crate::math;
use crate::tensor::{Shape, Tensor};

/// Grayscale CT slice replicated over three identical channels, values in
/// `[0, 1]`, stored channel-major (`3×H×W`).
#[derive(Clone, Debug, PartialEq)]
pub struct CtSlice {
    height: usize,
    width: usize,
    pixels: Vec<f64>,
    pub source_id: String,
}

impl CtSlice {
    /// Build from a single grayscale plane with values in `[0, 1]`.
    pub fn from_plane(height: usize, width: usize, plane: &[f64], source_id: impl Into<String>) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Validation, "zero-sized slice {height}x{width}");
        }
        if plane.len() != height * width {
            bail!(Shape, "plane has {} pixels, expected {}", plane.len(), height * width);
        }
        if let Some(v) = plane.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            bail!(Validation, "slice value {v} outside [0, 1]");
        }
        let mut pixels = Vec::with_capacity(3 * plane.len());
        for _ in 0..3 {
            pixels.extend_from_slice(plane);
        }
        Ok(CtSlice {
            height,
            width,
            pixels,
            source_id: source_id.into(),
        })
    }

    /// 8-bit grayscale, `raw / 255`.
    pub fn from_gray8(height: usize, width: usize, raw: &[u8], source_id: impl Into<String>) -> Result<Self> {
        let plane: Vec<f64> = raw.iter().map(|&v| v as f64 / 255.0).collect();
        Self::from_plane(height, width, &plane, source_id)
    }

    /// Interleaved 8-bit RGB, converted to luma (0.299, 0.587, 0.114).
    pub fn from_rgb8(height: usize, width: usize, raw: &[u8], source_id: impl Into<String>) -> Result<Self> {
        if raw.len() != 3 * height * width {
            bail!(Shape, "rgb buffer has {} bytes, expected {}", raw.len(), 3 * height * width);
        }
        let plane: Vec<f64> = raw
            .chunks_exact(3)
            .map(|p| {
                let y = 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64;
                (y / 255.0).clamp(0.0, 1.0)
            })
            .collect();
        Self::from_plane(height, width, &plane, source_id)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Channel `c` (0..3) as a row-major plane.
    pub fn channel(&self, c: usize) -> &[f64] {
        let p = self.height * self.width;
        &self.pixels[c * p..(c + 1) * p]
    }

    /// All three channels, `3×H×W`.
    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(Shape::new(1, 3, self.height, self.width), self.pixels.clone())
            .expect("slice buffer matches its shape")
    }
}

/// Binary `H×W` map with values exactly 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMap {
    height: usize,
    width: usize,
    pixels: Vec<u8>,
}

impl BinaryMap {
    pub fn new(height: usize, width: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != height * width {
            bail!(Shape, "map has {} pixels, expected {}", pixels.len(), height * width);
        }
        if pixels.iter().any(|&v| v > 1) {
            bail!(Validation, "binary map contains values other than 0 and 1");
        }
        Ok(BinaryMap { height, width, pixels })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        BinaryMap {
            height,
            width,
            pixels: vec![0; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut pixels = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(y, x) as u8);
            }
        }
        BinaryMap { height, width, pixels }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.pixels[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.pixels.iter().map(|&v| v as usize).sum()
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.pixels.iter().map(|&v| v as f64).collect()
    }

    /// Erosion with the 3×3 cross; pixels outside the image count as
    /// background.
    pub fn erode_cross(&self) -> BinaryMap {
        let (h, w) = (self.height, self.width);
        BinaryMap::from_fn(h, w, |y, x| {
            self.get(y, x)
                && y > 0
                && x > 0
                && y + 1 < h
                && x + 1 < w
                && self.get(y - 1, x)
                && self.get(y + 1, x)
                && self.get(y, x - 1)
                && self.get(y, x + 1)
        })
    }

    /// Nearest-neighbour resampling with half-pixel centres.
    pub fn resize_nearest(&self, height: usize, width: usize) -> BinaryMap {
        BinaryMap::from_fn(height, width, |y, x| {
            let sy = nearest_index(y, self.height, height);
            let sx = nearest_index(x, self.width, width);
            self.get(sy, sx)
        })
    }
}

/// Infection ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMask(pub BinaryMap);

/// One-pixel-wide inner contour of a [`SegMask`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoundaryMask(pub BinaryMap);

impl SegMask {
    /// Threshold an 8-bit buffer: `raw > 127` is foreground.
    pub fn from_gray8(height: usize, width: usize, raw: &[u8]) -> Result<Self> {
        if height == 0 || width == 0 {
            bail!(Validation, "zero-sized mask {height}x{width}");
        }
        let pixels = raw.iter().map(|&v| (v > 127) as u8).collect();
        Ok(SegMask(BinaryMap::new(height, width, pixels)?))
    }

    pub fn map(&self) -> &BinaryMap {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height
    }

    pub fn width(&self) -> usize {
        self.0.width
    }
}

impl BoundaryMask {
    pub fn map(&self) -> &BinaryMap {
        &self.0
    }
}

/// Boundary label: `mask XOR erode(mask)` with a 3×3 cross.
pub fn derive_boundary(mask: &SegMask) -> BoundaryMask {
    let m = &mask.0;
    let eroded = m.erode_cross();
    let pixels = m
        .pixels
        .iter()
        .zip(&eroded.pixels)
        .map(|(&a, &b)| a ^ b)
        .collect();
    BoundaryMask(BinaryMap {
        height: m.height,
        width: m.width,
        pixels,
    })
}

/// A slice with its mask and derived boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetRecord {
    pub id: String,
    pub slice: CtSlice,
    pub mask: SegMask,
    pub boundary: BoundaryMask,
}

impl DatasetRecord {
    /// Assemble a record, deriving the boundary from the mask.
    pub fn new(id: impl Into<String>, slice: CtSlice, mask: SegMask) -> Result<Self> {
        let id = id.into();
        if slice.height != mask.height() || slice.width != mask.width() {
            bail!(
                Validation,
                "record `{id}`: slice is {}x{} but mask is {}x{}",
                slice.height,
                slice.width,
                mask.height(),
                mask.width()
            );
        }
        let boundary = derive_boundary(&mask);
        Ok(DatasetRecord {
            id,
            slice,
            mask,
            boundary,
        })
    }

    pub fn height(&self) -> usize {
        self.slice.height
    }

    pub fn width(&self) -> usize {
        self.slice.width
    }
}

pub fn check_model_size(height: usize, width: usize) -> Result<()> {
    if height == 0 || width == 0 || height % 16 != 0 || width % 16 != 0 {
        bail!(
            Validation,
            "image size {height}x{width} must be a positive multiple of 16"
        );
    }
    Ok(())
}

/// Resize a record: bilinear for the slice, nearest for the mask, then
/// re-derive the boundary from the resized mask.
pub fn resize_record(record: &DatasetRecord, height: usize, width: usize) -> Result<DatasetRecord> {
    check_model_size(height, width)?;
    if height == record.height() && width == record.width() {
        return Ok(record.clone());
    }
    let plan = ResizePlan::new(record.height(), record.width(), height, width);
    let mut plane = vec![0.0; height * width];
    plan.apply(record.slice.channel(0), &mut plane);
    // bilinear weights are convex, but keep rounding noise inside [0, 1]
    plane.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let slice = CtSlice::from_plane(height, width, &plane, record.slice.source_id.clone())?;
    let mask = SegMask(record.mask.0.resize_nearest(height, width));
    DatasetRecord::new(record.id.clone(), slice, mask)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<DatasetRecord>,
    pub test: Vec<DatasetRecord>,
    pub seed: u64,
}

/// Number of test records: `round_half_up(fraction · n)`, kept inside
/// `1..n` so neither side is empty.
pub fn test_count(n: usize, test_fraction: f64) -> usize {
    let k = math::round_half_up(test_fraction * n as f64) as usize;
    k.clamp(1, n - 1)
}

/// Seeded shuffle followed by a cut into train and test parts.
pub fn split_dataset(records: &[DatasetRecord], test_fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if records.len() < 2 {
        bail!(Validation, "need at least 2 records to split, got {}", records.len());
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        bail!(Validation, "test fraction {test_fraction} must lie in (0, 1)");
    }
    let mut order: Vec<usize> = (0..records.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let k = test_count(records.len(), test_fraction);
    let test = order[..k].iter().map(|&i| records[i].clone()).collect();
    let train = order[k..].iter().map(|&i| records[i].clone()).collect();
    Ok(DatasetSplit { train, test, seed })
}

/// Stack records into network inputs: images `N×3×H×W`, masks and
/// boundaries `N×1×H×W`.
pub fn batch_tensors(records: &[&DatasetRecord]) -> Result<(Tensor, Tensor, Tensor)> {
    let Some(first) = records.first() else {
        bail!(Validation, "empty batch");
    };
    let (h, w) = (first.height(), first.width());
    let mut img = Vec::with_capacity(records.len() * 3 * h * w);
    let mut msk = Vec::with_capacity(records.len() * h * w);
    let mut bnd = Vec::with_capacity(records.len() * h * w);
    for r in records {
        if r.height() != h || r.width() != w {
            bail!(Validation, "record `{}` is {}x{}, batch is {h}x{w}", r.id, r.height(), r.width());
        }
        img.extend_from_slice(r.slice.pixels());
        msk.extend(r.mask.0.pixels.iter().map(|&v| v as f64));
        bnd.extend(r.boundary.0.pixels.iter().map(|&v| v as f64));
    }
    let n = records.len();
    Ok((
        Tensor::from_vec(Shape::new(n, 3, h, w), img)?,
        Tensor::from_vec(Shape::new(n, 1, h, w), msk)?,
        Tensor::from_vec(Shape::new(n, 1, h, w), bnd)?,
    ))
}
