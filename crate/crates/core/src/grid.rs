//! Dense row-major 2-D grids and the small numeric helpers shared by every module.
//!
//! Pixel centers sit at integer coordinates with `(0, 0)` the top-left pixel center;
//! `x` runs along a row (width) and `y` down the columns (height).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A `width x height` grid stored row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Clone> Grid<T> {
    pub fn filled(width: usize, height: usize, value: T) -> Self {
        Grid {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::InvalidArgument(format!(
                "grid data has {} elements, expected {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Grid {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Grid {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    /// `(width, height)`.
    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y * self.width + x
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> &T {
        &self.data[y * self.width + x]
    }

    #[inline]
    pub fn get_mut(&mut self, x: usize, y: usize) -> &mut T {
        &mut self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, value: T) {
        self.data[y * self.width + x] = value;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, T> {
        self.data.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    pub fn same_dims<U>(&self, other: &Grid<U>) -> bool {
        self.dims() == other.dims()
    }

    /// Errors with a shape mismatch unless `other` has the same dimensions.
    pub fn check_dims<U>(&self, other: &Grid<U>, what: &'static str) -> Result<()> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(Error::shape(what, self.dims(), other.dims()))
        }
    }
}

impl<T: Clone> Grid<T> {
    /// Copies the sub-grid covered by `window`.
    pub fn crop(&self, window: &CropWindow) -> Result<Grid<T>> {
        window.check_inside(self.width, self.height)?;
        Ok(Grid::from_fn(window.width, window.height, |x, y| {
            self.get(x + window.x0, y + window.y0).clone()
        }))
    }
}

/// An RGB image with channel values in `[0, 1]`.
pub type Image = Grid<[f64; 3]>;

/// A `{0, 1}` mask.
pub type BinaryMask = Grid<bool>;

/// Clamps every channel to `[0, 1]`, replacing non-finite values with 0.
pub fn clamp_image(image: &mut Image) {
    for px in image.as_mut_slice() {
        for c in px.iter_mut() {
            *c = if c.is_finite() {
                c.clamp(0.0, 1.0)
            } else {
                0.0
            };
        }
    }
}

/// A rectangular crop of a larger (full) image.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CropWindow {
    pub x0: usize,
    pub y0: usize,
    pub width: usize,
    pub height: usize,
}

impl CropWindow {
    pub fn new(x0: usize, y0: usize, width: usize, height: usize) -> Self {
        CropWindow {
            x0,
            y0,
            width,
            height,
        }
    }

    /// Removes `fraction` of the full size from every side, e.g. 0.1 turns 800x240 into
    /// the 640x192 window at (80, 24).
    pub fn centered_margin(full_width: usize, full_height: usize, fraction: f64) -> Self {
        let x0 = (full_width as f64 * fraction).round() as usize;
        let y0 = (full_height as f64 * fraction).round() as usize;
        CropWindow {
            x0,
            y0,
            width: full_width - 2 * x0,
            height: full_height - 2 * y0,
        }
    }

    pub fn check_inside(&self, full_width: usize, full_height: usize) -> Result<()> {
        if self.width == 0
            || self.height == 0
            || self.x0 + self.width > full_width
            || self.y0 + self.height > full_height
        {
            return Err(Error::InvalidArgument(format!(
                "crop window {:?} does not fit inside {}x{}",
                self, full_width, full_height
            )));
        }
        Ok(())
    }
}

/// Values that can be bilinearly interpolated.
pub trait Sample: Copy + Send + Sync {
    fn zero() -> Self;
    /// `self * (1 - t) + other * t`.
    fn lerp(self, other: Self, t: f64) -> Self;
}

impl Sample for f64 {
    #[inline]
    fn zero() -> Self {
        0.0
    }
    #[inline]
    fn lerp(self, other: Self, t: f64) -> Self {
        self + (other - self) * t
    }
}

impl<const N: usize> Sample for [f64; N] {
    #[inline]
    fn zero() -> Self {
        [0.0; N]
    }
    #[inline]
    fn lerp(self, other: Self, t: f64) -> Self {
        let mut out = self;
        for (o, b) in out.iter_mut().zip(other) {
            *o += (b - *o) * t;
        }
        out
    }
}

/// Neumaier-compensated running sum; order-stable to well below 1e-12 for our grid sizes.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    compensation: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, value: f64) {
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.compensation
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = CompensatedSum::new();
        for v in iter {
            s.add(v);
        }
        s
    }
}

/// Compensated sum of an iterator.
pub fn stable_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}
