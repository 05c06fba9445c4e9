//! Grayscale grids, binary masks and PGM I/O.

use std::io::{self, Read, Write};
use std::path::Path;

/// Row-major grayscale image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    /// Binary P5 encoding with maxval 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(
            self.data
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
        out
    }

    pub fn from_pgm(bytes: &[u8]) -> io::Result<Self> {
        let bad = |m: &str| io::Error::new(io::ErrorKind::InvalidData, format!("pgm: {m}"));
        let mut fields = Vec::new();
        let mut pos = 0;
        while fields.len() < 4 {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            let start = pos;
            while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if start == pos {
                return Err(bad("truncated header"));
            }
            fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header"))?);
        }
        if fields[0] != "P5" {
            return Err(bad("not a binary graymap"));
        }
        let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
        let (w, h, maxval) = (parse(fields[1])?, parse(fields[2])?, parse(fields[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(bad("unsupported maxval"));
        }
        pos += 1;
        let body = bytes
            .get(pos..pos + w * h)
            .ok_or_else(|| bad("truncated body"))?;
        Ok(Self {
            width: w,
            height: h,
            data: body.iter().map(|&b| b as f64 / maxval as f64).collect(),
        })
    }

    pub fn write_pgm(&self, path: &Path) -> io::Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_pgm())
    }

    pub fn read_pgm(path: &Path) -> io::Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_pgm(&buf)
    }
}

/// Rounds to the nearest multiple of 1/255 so rasters survive PGM storage.
pub fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Row-major binary raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Intersection over union; two empty masks count as identical.
    pub fn iou(&self, other: &Mask) -> f64 {
        assert_eq!(
            (self.width, self.height),
            (other.width, other.height),
            "iou of differently sized masks"
        );
        let (mut inter, mut union) = (0usize, 0usize);
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    }

    /// Pixel centroid `(x, y)`; `None` for an empty mask.
    pub fn centroid(&self) -> Option<(f64, f64)> {
        let (mut sx, mut sy, mut n) = (0.0, 0.0, 0usize);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    sx += x as f64;
                    sy += y as f64;
                    n += 1;
                }
            }
        }
        (n > 0).then(|| (sx / n as f64, sy / n as f64))
    }

    /// `sqrt(1 - l_min / l_max)` of the pixel second-moment matrix.
    pub fn eccentricity(&self) -> f64 {
        let Some((cx, cy)) = self.centroid() else {
            return 0.0;
        };
        let (mut sxx, mut syy, mut sxy, mut n) = (0.0, 0.0, 0.0, 0.0);
        for y in 0..self.height {
            for x in 0..self.width {
                if self.get(x, y) {
                    let (dx, dy) = (x as f64 - cx, y as f64 - cy);
                    sxx += dx * dx;
                    syy += dy * dy;
                    sxy += dx * dy;
                    n += 1.0;
                }
            }
        }
        let (a, b, c) = (sxx / n, syy / n, sxy / n);
        let tr = a + b;
        let disc = ((a - b) * (a - b) / 4.0 + c * c).sqrt();
        let (l1, l2) = (tr / 2.0 + disc, tr / 2.0 - disc);
        if l1 <= 0.0 {
            return 0.0;
        }
        (1.0 - (l2 / l1).max(0.0)).max(0.0).sqrt()
    }

    pub fn mean_of(&self, grid: &Grid) -> f64 {
        let (mut s, mut n) = (0.0, 0usize);
        for (i, &b) in self.bits.iter().enumerate() {
            if b {
                s += grid.data[i];
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            s / n as f64
        }
    }

    /// Run lengths over the row-major raster, beginning with a run of zeros
    /// (possibly empty). Runs longer than `u16::MAX` are split with
    /// zero-length runs of the opposite value.
    pub fn to_runs(&self) -> Vec<u16> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len: u32 = 0;
        for &b in &self.bits {
            if b != current {
                runs.push(len as u16);
                current = b;
                len = 0;
            }
            if len == u16::MAX as u32 {
                runs.push(u16::MAX);
                runs.push(0);
                len = 0;
            }
            len += 1;
        }
        runs.push(len as u16);
        runs
    }

    pub fn from_runs(width: usize, height: usize, runs: &[u16]) -> Option<Self> {
        let mut bits = Vec::with_capacity(width * height);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        (bits.len() == width * height).then_some(Self {
            width,
            height,
            bits,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pgm_round_trip_is_exact_for_quantized_values() {
        let g = Grid::from_fn(5, 3, |x, y| quantize((x * 7 + y * 13) as f64 / 40.0));
        let back = Grid::from_pgm(&g.to_pgm()).unwrap();
        assert_eq!(back, g);
    }

    #[test]
    fn iou_properties() {
        let a = Mask::from_fn(8, 8, |x, y| x < 4 && y < 4);
        let b = Mask::from_fn(8, 8, |x, y| (2..6).contains(&x) && y < 4);
        let c = Mask::from_fn(8, 8, |x, _| x >= 6);
        assert_eq!(a.iou(&a), 1.0);
        assert_eq!(a.iou(&b), b.iou(&a));
        assert!((a.iou(&b) - 8.0 / 24.0).abs() < 1e-15);
        assert_eq!(a.iou(&c), 0.0);
    }

    #[test]
    fn runs_round_trip() {
        let m = Mask::from_fn(7, 5, |x, y| (x + y) % 3 == 0 || x == 6);
        let runs = m.to_runs();
        assert_eq!(Mask::from_runs(7, 5, &runs).unwrap(), m);
        let full = Mask::from_fn(4, 4, |_, _| true);
        assert_eq!(full.to_runs(), vec![0, 16]);
        assert!(Mask::from_runs(4, 4, &[1, 2]).is_none());
    }

    #[test]
    fn eccentricity_of_disc_and_bar() {
        let disc = Mask::from_fn(21, 21, |x, y| {
            let (dx, dy) = (x as f64 - 10.0, y as f64 - 10.0);
            dx * dx + dy * dy <= 64.0
        });
        assert!(disc.eccentricity() < 0.05);
        let bar = Mask::from_fn(21, 21, |x, y| (5..16).contains(&x) && y == 10);
        assert!(bar.eccentricity() > 0.99);
    }
}
