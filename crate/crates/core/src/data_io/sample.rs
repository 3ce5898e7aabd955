use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// One image with optional ground truth. Pixels are `H x W x C` in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    pub pixels: Array3<f32>,
    /// `true` marks a pathological pixel.
    pub mask: Option<Array2<bool>>,
    /// `true` marks a pathological image.
    pub label: Option<bool>,
}

impl ImageSample {
    pub fn new(
        id: impl Into<String>,
        pixels: Array3<f32>,
        mask: Option<Array2<bool>>,
        label: Option<bool>,
    ) -> Result<Self> {
        let s = ImageSample {
            id: id.into(),
            pixels,
            mask,
            label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .pixels
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::NonFinite(format!(
                "pixels of {} (must be finite and in [0,1])",
                self.id
            )));
        }
        if let Some(m) = &self.mask {
            if m.dim() != self.hw() {
                return Err(Error::DimMismatch {
                    context: "mask height x width",
                    expected: self.hw().0 * self.hw().1,
                    actual: m.len(),
                });
            }
            if m.iter().any(|&b| b) && self.label == Some(false) {
                return Err(Error::Config(format!(
                    "sample {} has a nonempty mask but a normal label",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn hw(&self) -> (usize, usize) {
        let (h, w, _) = self.pixels.dim();
        (h, w)
    }

    pub fn channels(&self) -> usize {
        self.pixels.dim().2
    }

    /// Ground truth for pixel metrics: the mask when present, all-normal for
    /// images labelled normal, `None` otherwise.
    pub fn pixel_truth(&self) -> Option<Array2<bool>> {
        match (&self.mask, self.label) {
            (Some(m), _) => Some(m.clone()),
            (None, Some(false)) => Some(Array2::from_elem(self.hw(), false)),
            _ => None,
        }
    }
}
