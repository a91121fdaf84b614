//! Pixel-level image types and the `I = R × S` image formation model.
//!
//! All images are linear RGB stored channel-major (`C × H × W`) as `f32`, which is
//! also the on-disk precision. Shading is usually single channel and broadcasts
//! over the colour channels of the reflectance.

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Invalid(format!(
                "image dims must be positive, got {channels}x{height}x{width}"
            )));
        }
        if data.len() != channels * height * width {
            return Err(Error::shape(&[data.len()], &[channels, height, width]));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        assert!(channels > 0 && height > 0 && width > 0, "image dims must be positive");
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// One colour plane as a contiguous `H × W` slice.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Replicates a single-channel image to `channels` planes.
    pub fn broadcast(&self, channels: usize) -> Result<Image> {
        if self.channels == channels {
            return Ok(self.clone());
        }
        if self.channels != 1 {
            return Err(Error::Invalid(format!(
                "cannot broadcast {} channels to {channels}",
                self.channels
            )));
        }
        let mut data = Vec::with_capacity(channels * self.data.len());
        for _ in 0..channels {
            data.extend_from_slice(&self.data);
        }
        Image::new(channels, self.height, self.width, data)
    }
}

/// Per-pixel class ids in `0..num_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    num_classes: usize,
    data: Vec<u8>,
}

impl LabelMap {
    /// Builds a label map, rejecting ids `>= num_classes`.
    pub fn new(height: usize, width: usize, num_classes: usize, data: Vec<u8>) -> Result<Self> {
        let map = Self::new_unchecked(height, width, num_classes, data)?;
        if let Some(&bad) = map.data.iter().find(|&&l| l as usize >= num_classes) {
            return Err(Error::LabelRange {
                label: bad as usize,
                num_classes,
            });
        }
        Ok(map)
    }

    /// Builds a label map without range-checking the ids (dims are still checked).
    ///
    /// Used when reading untrusted data that is validated afterwards.
    pub fn new_unchecked(
        height: usize,
        width: usize,
        num_classes: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if height == 0 || width == 0 || num_classes == 0 {
            return Err(Error::Invalid(format!(
                "label map dims must be positive, got {height}x{width} with {num_classes} classes"
            )));
        }
        if num_classes > 256 {
            return Err(Error::Invalid(format!(
                "at most 256 classes fit in u8 labels, got {num_classes}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::shape(&[data.len()], &[height, width]));
        }
        Ok(Self {
            height,
            width,
            num_classes,
            data,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct SampleMeta {
    pub scene_id: u32,
    pub rig_id: u32,
    pub camera_id: u32,
}

/// One dataset element: an RGB image with its reflectance, shading and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub reflectance: Image,
    pub shading: Image,
    pub labels: LabelMap,
    pub meta: SampleMeta,
}

/// `I = R × S`, with single-channel shading broadcast over the reflectance channels.
pub fn compose(reflectance: &Image, shading: &Image) -> Result<Image> {
    if reflectance.height != shading.height
        || reflectance.width != shading.width
        || !(shading.channels == 1 || shading.channels == reflectance.channels)
    {
        return Err(Error::shape(&reflectance.shape(), &shading.shape()));
    }
    let plane = reflectance.height * reflectance.width;
    let mut out = Vec::with_capacity(reflectance.data.len());
    for c in 0..reflectance.channels {
        let r = reflectance.plane(c);
        let s = if shading.channels == 1 {
            shading.plane(0)
        } else {
            shading.plane(c)
        };
        out.extend(r.iter().zip(s).map(|(&r, &s)| r * s));
    }
    debug_assert_eq!(out.len(), reflectance.channels * plane);
    Image::new(reflectance.channels, reflectance.height, reflectance.width, out)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    /// Two fields of the sample disagree on their dimensions.
    DimMismatch {
        field: &'static str,
        expected: [usize; 3],
        found: [usize; 3],
    },
    NonFinite {
        field: &'static str,
        y: usize,
        x: usize,
    },
    Negative {
        field: &'static str,
        y: usize,
        x: usize,
    },
    /// `|I - R×S|` exceeds the tolerance at this pixel (max over channels).
    Residual { y: usize, x: usize, residual: f64 },
    LabelOutOfRange { y: usize, x: usize, label: u8 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::DimMismatch {
                field,
                expected,
                found,
            } => write!(f, "{field}: dims {found:?} do not match {expected:?}"),
            Violation::NonFinite { field, y, x } => {
                write!(f, "{field}: non-finite value at pixel ({y}, {x})")
            }
            Violation::Negative { field, y, x } => {
                write!(f, "{field}: negative value at pixel ({y}, {x})")
            }
            Violation::Residual { y, x, residual } => {
                write!(f, "image: |I - R*S| = {residual:e} at pixel ({y}, {x})")
            }
            Violation::LabelOutOfRange { y, x, label } => {
                write!(f, "labels: label out of range ({label}) at pixel ({y}, {x})")
            }
        }
    }
}

/// Checks every sample invariant; an empty list means the sample is consistent.
pub fn validate_sample(sample: &Sample, tol: f64) -> Vec<Violation> {
    let mut out = Vec::new();
    let img = &sample.image;
    let (h, w) = (img.height, img.width);
    let expected = img.shape();

    let refl = &sample.reflectance;
    if refl.shape() != expected {
        out.push(Violation::DimMismatch {
            field: "reflectance",
            expected,
            found: refl.shape(),
        });
    }
    let shad = &sample.shading;
    if shad.height != h || shad.width != w || !(shad.channels == 1 || shad.channels == img.channels)
    {
        out.push(Violation::DimMismatch {
            field: "shading",
            expected: [1, h, w],
            found: shad.shape(),
        });
    }
    let lab = &sample.labels;
    if lab.height != h || lab.width != w {
        out.push(Violation::DimMismatch {
            field: "labels",
            expected: [1, h, w],
            found: [1, lab.height, lab.width],
        });
    }
    if !out.is_empty() {
        return out;
    }

    for (field, im) in [("image", img), ("reflectance", refl), ("shading", shad)] {
        for y in 0..h {
            for x in 0..w {
                let vals = (0..im.channels).map(|c| im.get(c, y, x));
                let mut non_finite = false;
                let mut negative = false;
                for v in vals {
                    non_finite |= !v.is_finite();
                    negative |= v < 0.0;
                }
                if non_finite {
                    out.push(Violation::NonFinite { field, y, x });
                } else if negative {
                    out.push(Violation::Negative { field, y, x });
                }
            }
        }
    }

    for y in 0..h {
        for x in 0..w {
            let mut worst = 0.0f64;
            for c in 0..img.channels {
                let s = if shad.channels == 1 {
                    shad.get(0, y, x)
                } else {
                    shad.get(c, y, x)
                };
                let r = (img.get(c, y, x) as f64 - refl.get(c, y, x) as f64 * s as f64).abs();
                if r.is_nan() || r > worst {
                    worst = r;
                }
            }
            if worst.is_nan() || worst > tol {
                out.push(Violation::Residual {
                    y,
                    x,
                    residual: worst,
                });
            }
            let label = lab.get(y, x);
            if label as usize >= lab.num_classes {
                out.push(Violation::LabelOutOfRange { y, x, label });
            }
        }
    }
    out
}
