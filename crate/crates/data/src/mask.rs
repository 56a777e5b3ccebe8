use crate::DataError;

/// Binary H×W mask, row-major, values 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    h: usize,
    w: usize,
    bits: Vec<u8>,
}

impl Mask {
    pub fn new(h: usize, w: usize) -> Self {
        Self { h, w, bits: vec![0; h * w] }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<u8>) -> Result<Self, DataError> {
        if bits.len() != h * w {
            return Err(DataError::Shape(format!("mask of {h}x{w} given {} values", bits.len())));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(DataError::Shape("mask values must be 0 or 1".into()));
        }
        Ok(Self { h, w, bits })
    }

    pub fn from_fn(h: usize, w: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.bits[y * w + x] = f(y, x) as u8;
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x] != 0
    }

    pub fn set(&mut self, y: usize, x: usize, on: bool) {
        self.bits[y * self.w + x] = on as u8;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().map(|&b| b as usize).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.iter().all(|&b| b == 0)
    }

    pub fn area_fraction(&self) -> f64 {
        self.count() as f64 / (self.h * self.w) as f64
    }

    pub fn same_shape(&self, other: &Mask) -> bool {
        self.h == other.h && self.w == other.w
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert!(self.same_shape(other));
        let bits = self.bits.iter().zip(&other.bits).map(|(a, b)| a | b).collect();
        Mask { h: self.h, w: self.w, bits }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        assert!(self.same_shape(other));
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a & **b == 1).count()
    }

    /// Foreground pixels with at least one 8-neighbour that is background or
    /// lies outside the image.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) && !self.is_interior(y, x) {
                    out.push((y, x));
                }
            }
        }
        out
    }

    fn is_interior(&self, y: usize, x: usize) -> bool {
        for dy in -1isize..=1 {
            for dx in -1isize..=1 {
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny < 0 || nx < 0 || ny >= self.h as isize || nx >= self.w as isize {
                    return false;
                }
                if !self.get(ny as usize, nx as usize) {
                    return false;
                }
            }
        }
        true
    }

    /// Square (Chebyshev) dilation by `radius` pixels.
    pub fn dilate(&self, radius: usize) -> Mask {
        let r = radius as isize;
        let (h, w) = (self.h as isize, self.w as isize);
        // Separable max filter: rows, then columns.
        let mut rows = vec![0u8; self.bits.len()];
        for y in 0..h {
            for x in 0..w {
                let lo = (x - r).max(0);
                let hi = (x + r).min(w - 1);
                rows[(y * w + x) as usize] = (lo..=hi).any(|xx| self.bits[(y * w + xx) as usize] == 1) as u8;
            }
        }
        let mut bits = vec![0u8; self.bits.len()];
        for y in 0..h {
            let lo = (y - r).max(0);
            let hi = (y + r).min(h - 1);
            for x in 0..w {
                bits[(y * w + x) as usize] = (lo..=hi).any(|yy| rows[(yy * w + x) as usize] == 1) as u8;
            }
        }
        Mask { h: self.h, w: self.w, bits }
    }

    /// Tight bounding box `(y0, x0, y1, x1)`, inclusive; `None` when empty.
    pub fn bbox(&self) -> Option<(usize, usize, usize, usize)> {
        let mut bb: Option<(usize, usize, usize, usize)> = None;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    bb = Some(match bb {
                        None => (y, x, y, x),
                        Some((y0, x0, y1, x1)) => (y0.min(y), x0.min(x), y1.max(y), x1.max(x)),
                    });
                }
            }
        }
        bb
    }

    /// Mean foreground coordinate `(y, x)` in pixel-centre units.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let n = self.count();
        if n == 0 {
            return None;
        }
        let (mut sy, mut sx) = (0.0, 0.0);
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    sy += y as f64 + 0.5;
                    sx += x as f64 + 0.5;
                }
            }
        }
        Some((sy / n as f64, sx / n as f64))
    }

    /// Foreground coordinates in row-major order.
    pub fn foreground(&self) -> Vec<(usize, usize)> {
        (0..self.bits.len()).filter(|&i| self.bits[i] == 1).map(|i| (i / self.w, i % self.w)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_of_filled_square() {
        let m = Mask::from_fn(6, 6, |y, x| (1..5).contains(&y) && (1..5).contains(&x));
        let b = m.boundary();
        assert_eq!(b.len(), 12);
        assert!(!b.contains(&(2, 2)));
    }

    #[test]
    fn image_edge_counts_as_outside() {
        let m = Mask::from_fn(3, 3, |_, _| true);
        assert_eq!(m.boundary().len(), 8);
    }

    #[test]
    fn dilation_is_square() {
        let m = Mask::from_fn(7, 7, |y, x| y == 3 && x == 3);
        let d = m.dilate(2);
        assert_eq!(d.count(), 25);
        assert!(d.get(1, 1) && d.get(5, 5) && !d.get(0, 3));
    }

    #[test]
    fn rejects_non_binary_bits() {
        assert!(Mask::from_bits(1, 2, vec![0, 2]).is_err());
        assert!(Mask::from_bits(1, 2, vec![0]).is_err());
    }
}
