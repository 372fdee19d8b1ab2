//! Dense channel-major value grids.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{HdmError, Result};

/// Shape of a [`Grid`]: channels × height × width.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    /// Number of spatial positions.
    pub const fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// A channel-major (`c, y, x`) grid of `f64` values.
///
/// Used for images in `[0, 1]`, diffusion latents, noise draws, feature stacks
/// and score maps alike. Vectors are grids of shape `n × 1 × 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    shape: Shape,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(shape: Shape) -> Self {
        Grid {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn full(shape: Shape, value: f64) -> Self {
        Grid {
            shape,
            data: vec![value; shape.len()],
        }
    }

    pub fn from_vec(shape: Shape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(HdmError::contract(format!(
                "grid of shape {shape} needs {} values, got {}",
                shape.len(),
                data.len()
            )));
        }
        Ok(Grid { shape, data })
    }

    /// A single-channel grid from row-major values.
    pub fn from_rows(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        Grid::from_vec(Shape::new(1, height, width), data)
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Grid {
            shape: Shape::new(data.len(), 1, 1),
            data,
        }
    }

    pub fn scalar(v: f64) -> Self {
        Grid::vector(vec![v])
    }

    /// Standard-normal draw of the given shape.
    pub fn randn<R: Rng + ?Sized>(shape: Shape, rng: &mut R) -> Self {
        let data = (0..shape.len()).map(|_| rng.sample(StandardNormal)).collect();
        Grid { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = (c * self.shape.height + y) * self.shape.width + x;
        self.data[i] = v;
    }

    /// Values of one channel, row-major.
    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.shape.pixels();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.shape.pixels();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &Grid, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(HdmError::contract(format!(
                "{what}: shape {} does not match {}",
                self.shape, other.shape
            )));
        }
        Ok(())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Grid {
        Grid {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two equally shaped grids.
    pub fn zip_with(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Grid> {
        self.ensure_same_shape(other, "zip_with")?;
        Ok(Grid {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stack grids of equal spatial size along the channel axis.
    pub fn concat_channels(parts: &[&Grid]) -> Result<Grid> {
        let first = parts
            .first()
            .ok_or_else(|| HdmError::contract("concat of zero grids"))?;
        let (h, w) = (first.height(), first.width());
        let mut data = Vec::new();
        let mut channels = 0;
        for p in parts {
            if p.height() != h || p.width() != w {
                return Err(HdmError::contract(format!(
                    "concat: spatial size {}x{} does not match {h}x{w}",
                    p.height(),
                    p.width()
                )));
            }
            channels += p.channels();
            data.extend_from_slice(&p.data);
        }
        Ok(Grid {
            shape: Shape::new(channels, h, w),
            data,
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Grid {
        if factor == 1 {
            return self.clone();
        }
        let Shape {
            channels,
            height,
            width,
        } = self.shape;
        let out_shape = Shape::new(channels, height * factor, width * factor);
        let mut out = Grid::zeros(out_shape);
        for c in 0..channels {
            for y in 0..out_shape.height {
                for x in 0..out_shape.width {
                    out.set(c, y, x, self.get(c, y / factor, x / factor));
                }
            }
        }
        out
    }

    /// Mean over all channels at each pixel, as a single-channel grid.
    pub fn channel_mean(&self) -> Grid {
        let n = self.shape.pixels();
        let mut out = vec![0.0; n];
        for c in 0..self.channels() {
            for (o, v) in out.iter_mut().zip(self.channel(c)) {
                *o += v;
            }
        }
        let k = self.channels() as f64;
        out.iter_mut().for_each(|v| *v /= k);
        Grid {
            shape: Shape::new(1, self.height(), self.width()),
            data: out,
        }
    }
}
