//! Grayscale raster storage, bilinear sampling/warping, and the raw raster
//! file format (magic "LDR1", u32 height, u32 width, little-endian f32
//! row-major).

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{mirror_px_x, GeometricTransform, Point2};

pub const RASTER_MAGIC: &[u8; 4] = b"LDR1";

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::DimMismatch(format!(
                "raster buffer {} != {}x{}",
                data.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    #[inline]
    pub fn add(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] += v;
    }

    pub fn clamp_values(&mut self, lo: f64, hi: f64) {
        for v in &mut self.data {
            *v = v.clamp(lo, hi);
        }
    }

    /// Bilinear sample at a continuous pixel coordinate; zero outside.
    pub fn sample(&self, p: Point2) -> f64 {
        let x0 = p.x.floor();
        let y0 = p.y.floor();
        let fx = p.x - x0;
        let fy = p.y - y0;
        let mut acc = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let xi = x0 as i64 + dx;
                let yi = y0 as i64 + dy;
                if xi >= 0 && yi >= 0 && (xi as usize) < self.width && (yi as usize) < self.height
                {
                    acc += wy * wx * self.get(xi as usize, yi as usize);
                }
            }
        }
        acc
    }

    /// Backward-warps the raster: out(u) = in(g⁻¹(u)).
    pub fn warp(&self, g: &GeometricTransform) -> Result<Raster> {
        g.validate()?;
        let mut out = Raster::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let src = g.invert_px(Point2::new(x as f64, y as f64), self.width, self.height)?;
                out.set(x, y, self.sample(src));
            }
        }
        Ok(out)
    }

    /// Exact horizontal mirror (no interpolation).
    pub fn mirrored(&self) -> Raster {
        let mut out = Raster::zeros(self.width, self.height);
        for y in 0..self.height {
            for x in 0..self.width {
                let mx = mirror_px_x(x as f64, self.width) as usize;
                out.set(x, y, self.get(mx, y));
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf =
            Vec::with_capacity(4 + 8 + self.data.len() * std::mem::size_of::<f32>());
        buf.extend_from_slice(RASTER_MAGIC);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for &v in &self.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        f.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Raster> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        if bytes.len() < 12 || &bytes[0..4] != RASTER_MAGIC {
            return Err(Error::Checkpoint(format!(
                "{}: bad raster magic",
                path.display()
            )));
        }
        let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
        let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let expect = 12 + w * h * 4;
        if bytes.len() != expect {
            return Err(Error::Checkpoint(format!(
                "{}: raster payload {} != expected {}",
                path.display(),
                bytes.len(),
                expect
            )));
        }
        let mut data = Vec::with_capacity(w * h);
        for i in 0..w * h {
            let off = 12 + i * 4;
            data.push(f32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as f64);
        }
        Raster::from_vec(w, h, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_at_integer_coords_returns_cell_value() {
        let mut r = Raster::zeros(4, 4);
        r.set(2, 1, 0.75);
        assert_eq!(r.sample(Point2::new(2.0, 1.0)), 0.75);
    }

    #[test]
    fn sample_midpoint_interpolates() {
        let mut r = Raster::zeros(4, 4);
        r.set(0, 0, 1.0);
        r.set(1, 0, 0.0);
        assert!((r.sample(Point2::new(0.5, 0.0)) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn mirror_twice_is_identity_bit_exact() {
        let mut r = Raster::zeros(6, 3);
        for y in 0..3 {
            for x in 0..6 {
                r.set(x, y, (x * 7 + y * 13) as f64 / 40.0);
            }
        }
        assert_eq!(r.mirrored().mirrored(), r);
    }

    #[test]
    fn identity_warp_preserves_raster() {
        let mut r = Raster::zeros(8, 8);
        for i in 0..64 {
            r.data[i] = (i as f64) / 64.0;
        }
        let w = r.warp(&GeometricTransform::identity()).unwrap();
        for (a, b) in w.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn raster_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.ldr");
        let mut r = Raster::zeros(5, 7);
        for (i, v) in r.data.iter_mut().enumerate() {
            *v = (i as f64 * 0.01) % 1.0;
        }
        r.save(&path).unwrap();
        let back = Raster::load(&path).unwrap();
        assert_eq!(back.width(), 5);
        assert_eq!(back.height(), 7);
        for (a, b) in back.data().iter().zip(r.data()) {
            assert!((a - b).abs() < 1e-6); // f32 storage
        }
    }
}
