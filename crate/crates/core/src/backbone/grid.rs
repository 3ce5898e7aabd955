use ndarray::{Array2, Array3, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    /// Straight out of the frozen extractor.
    Raw,
    /// After the trainable adapter.
    Adapted,
}

/// An `L_H x L_W` grid of `D`-dimensional feature vectors.
///
/// Values are stored in standard (row-major) layout so the grid can be
/// viewed as an `(L_H * L_W) x D` matrix of cells without copying.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrid {
    values: Array3<f64>,
    stride: usize,
    space: Space,
}

impl EmbeddingGrid {
    pub fn new(values: Array3<f64>, stride: usize, space: Space) -> Result<Self> {
        let (h, w, d) = values.dim();
        if h == 0 || w == 0 || d == 0 {
            return Err(Error::Config("embedding grid dimensions must be positive".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding grid".into()));
        }
        let values = if values.is_standard_layout() {
            values
        } else {
            values.as_standard_layout().into_owned()
        };
        Ok(EmbeddingGrid {
            values,
            stride: stride.max(1),
            space,
        })
    }

    /// Build from a `cells x D` matrix laid out row-major over `(h, w)`.
    pub fn from_cells(cells: Array2<f64>, h: usize, w: usize, stride: usize, space: Space) -> Result<Self> {
        let d = cells.ncols();
        if cells.nrows() != h * w {
            return Err(Error::DimMismatch {
                context: "grid cells",
                expected: h * w,
                actual: cells.nrows(),
            });
        }
        let cells = cells.as_standard_layout().into_owned();
        let values = cells
            .into_shape_with_order((h, w, d))
            .expect("standard layout reshape");
        Self::new(values, stride, space)
    }

    pub fn height(&self) -> usize {
        self.values.dim().0
    }

    pub fn width(&self) -> usize {
        self.values.dim().1
    }

    pub fn dim(&self) -> usize {
        self.values.dim().2
    }

    pub fn n_cells(&self) -> usize {
        self.height() * self.width()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn space(&self) -> Space {
        self.space
    }

    pub fn values(&self) -> &Array3<f64> {
        &self.values
    }

    pub fn cells(&self) -> ArrayView2<'_, f64> {
        let (h, w, d) = self.values.dim();
        self.values
            .view()
            .into_shape_with_order((h * w, d))
            .expect("grid is standard layout")
    }

    pub fn into_cells(self) -> Array2<f64> {
        let (h, w, d) = self.values.dim();
        self.values
            .into_shape_with_order((h * w, d))
            .expect("grid is standard layout")
    }

    /// Same geometry, different values.
    pub fn with_cells(&self, cells: Array2<f64>, space: Space) -> Result<Self> {
        Self::from_cells(cells, self.height(), self.width(), self.stride, space)
    }
}
