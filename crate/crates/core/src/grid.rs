//! Dense row-major 2D grids of `f64`, used for images, patches and fields.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Grid {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Dimension(format!(
                "{} values for a {height}x{width} grid",
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
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
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Value at integer coordinates with edge clamping.
    #[inline]
    pub fn get_clamped(&self, y: isize, x: isize) -> f64 {
        let yy = y.clamp(0, self.height as isize - 1) as usize;
        let xx = x.clamp(0, self.width as isize - 1) as usize;
        self.data[yy * self.width + xx]
    }

    /// Bilinear sample at real coordinates, clamping to the border.
    #[inline]
    pub fn sample(&self, y: f64, x: f64) -> f64 {
        let max_y = (self.height - 1) as f64;
        let max_x = (self.width - 1) as f64;
        let y = y.clamp(0.0, max_y);
        let x = x.clamp(0.0, max_x);
        let y0 = y.floor();
        let x0 = x.floor();
        let fy = y - y0;
        let fx = x - x0;
        let y0 = y0 as usize;
        let x0 = x0 as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let w = self.width;
        let a = self.data[y0 * w + x0];
        let b = self.data[y0 * w + x1];
        let c = self.data[y1 * w + x0];
        let d = self.data[y1 * w + x1];
        let top = a + (b - a) * fx;
        let bottom = c + (d - c) * fx;
        top + (bottom - top) * fy
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Grid, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same(other)?;
        Ok(Self {
            height: self.height,
            width: self.width,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn check_same(&self, other: &Grid) -> Result<()> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    pub fn mean(&self) -> f64 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Crops a `h x w` window with top-left corner at `(y0, x0)`, clamping reads.
    pub fn crop(&self, y0: isize, x0: isize, h: usize, w: usize) -> Self {
        Self::from_fn(h, w, |y, x| {
            self.get_clamped(y0 + y as isize, x0 + x as isize)
        })
    }

    /// Bilinear resampling to a new size, aligning pixel centres.
    pub fn resample(&self, height: usize, width: usize) -> Self {
        if (height, width) == self.dims() {
            return self.clone();
        }
        let sy = self.height as f64 / height as f64;
        let sx = self.width as f64 / width as f64;
        Self::from_fn(height, width, |y, x| {
            self.sample((y as f64 + 0.5) * sy - 0.5, (x as f64 + 0.5) * sx - 0.5)
        })
    }

    /// 2x decimation by 2x2 box averaging (odd trailing row/column folded in).
    pub fn downsample(&self) -> Self {
        let h = self.height.div_ceil(2);
        let w = self.width.div_ceil(2);
        Self::from_fn(h, w, |y, x| {
            let mut sum = 0.0;
            let mut n = 0.0;
            for dy in 0..2 {
                for dx in 0..2 {
                    let yy = 2 * y + dy;
                    let xx = 2 * x + dx;
                    if yy < self.height && xx < self.width {
                        sum += self.get(yy, xx);
                        n += 1.0;
                    }
                }
            }
            sum / n
        })
    }

    /// Separable 3-tap binomial smoothing `[1 2 1] / 4` with clamped borders.
    pub fn smooth3(&self) -> Self {
        let (h, w) = self.dims();
        let mut tmp = Grid::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let l = self.get(y, x.saturating_sub(1));
                let r = self.get(y, (x + 1).min(w - 1));
                tmp.set(y, x, 0.25 * l + 0.5 * self.get(y, x) + 0.25 * r);
            }
        }
        let mut out = Grid::zeros(h, w);
        for y in 0..h {
            let up = y.saturating_sub(1);
            let down = (y + 1).min(h - 1);
            for x in 0..w {
                out.set(
                    y,
                    x,
                    0.25 * tmp.get(up, x) + 0.5 * tmp.get(y, x) + 0.25 * tmp.get(down, x),
                );
            }
        }
        out
    }
}
