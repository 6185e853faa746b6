//! Dense row-major 2-D grids used for images, maps, masks and label images.

use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid<T> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

/// RGB image with channel values in `[0, 1]`.
pub type RgbImage = Grid<[f32; 3]>;
pub type FloatMap = Grid<f32>;
pub type BinaryMask = Grid<bool>;

impl<T: Clone> Grid<T> {
    pub fn filled(height: usize, width: usize, value: T) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }
}

impl<T> Grid<T> {
    pub fn from_vec(height: usize, width: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Input(format!(
                "grid of {height}x{width} needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn same_shape<U>(&self, other: &Grid<U>) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Grid<U> {
        Grid {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(f).collect(),
        }
    }

    /// Row-major iterator over `(row, col, value)`.
    pub fn indexed(&self) -> impl Iterator<Item = (usize, usize, &T)> {
        let w = self.width;
        self.data.iter().enumerate().map(move |(i, v)| (i / w, i % w, v))
    }
}

impl<T> Index<(usize, usize)> for Grid<T> {
    type Output = T;

    fn index(&self, (r, c): (usize, usize)) -> &T {
        debug_assert!(r < self.height && c < self.width);
        &self.data[r * self.width + c]
    }
}

impl<T> IndexMut<(usize, usize)> for Grid<T> {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut T {
        debug_assert!(r < self.height && c < self.width);
        &mut self.data[r * self.width + c]
    }
}

impl RgbImage {
    /// Builds an RGB image from interleaved channel data, rejecting anything
    /// that is not exactly three channels.
    pub fn from_interleaved(
        height: usize,
        width: usize,
        channels: usize,
        values: &[f32],
    ) -> Result<Self> {
        if channels != 3 {
            return Err(Error::Input(format!(
                "expected an RGB image with 3 channels, got {channels}"
            )));
        }
        if values.len() != height * width * 3 {
            return Err(Error::Input(format!(
                "interleaved buffer has {} values, expected {}",
                values.len(),
                height * width * 3
            )));
        }
        let data = values.chunks_exact(3).map(|p| [p[0], p[1], p[2]]).collect();
        Grid::from_vec(height, width, data)
    }

    /// Copies the `height`x`width` window whose top-left corner is `(top, left)`.
    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Self> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Input(format!(
                "crop {height}x{width} at ({top}, {left}) exceeds image {}x{}",
                self.height, self.width
            )));
        }
        Ok(Grid::from_fn(height, width, |r, c| self[(top + r, left + c)]))
    }
}
