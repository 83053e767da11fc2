//! Normalized field-strength images shared by the solver, dataset and model.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum FieldError {
    #[error("image of {height}x{width} needs {expected} values, got {got}")]
    Shape {
        height: usize,
        width: usize,
        expected: usize,
        got: usize,
    },
    #[error("pixel {index} = {value} lies outside [0, 1]")]
    OutOfRange { index: usize, value: f64 },
}

/// Row-major image of normalized |E| in [0, 1]. Rows run across the tunnel
/// height, columns along the range axis.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldImage {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl FieldImage {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self, FieldError> {
        if values.len() != height * width || height == 0 || width == 0 {
            return Err(FieldError::Shape {
                height,
                width,
                expected: height * width,
                got: values.len(),
            });
        }
        if let Some((index, &value)) = values
            .iter()
            .enumerate()
            .find(|(_, v)| !(v.is_finite() && (0.0..=1.0).contains(*v)))
        {
            return Err(FieldError::OutOfRange { index, value });
        }
        Ok(Self {
            height,
            width,
            values,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            values: vec![0.0; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.values[row * self.width..(row + 1) * self.width]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Rounds every pixel to the nearest `f32`, the precision of the on-disk
    /// dataset container.
    pub fn quantized_f32(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            values: self.values.iter().map(|&v| v as f32 as f64).collect(),
        }
    }
}
