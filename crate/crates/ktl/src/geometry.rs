//! 2D points, affine/piecewise geometric transforms, and the coordinate
//! conventions shared by every module.
//!
//! Conventions:
//! - Normalized coordinates u ∈ [0,1]² with pixel centers at (i + 0.5)/W.
//! - Raster pixel coordinates place the center of cell i at x = i.
//! - Output-grid coordinates relate to raster coordinates through the
//!   backbone stride: grid = (raster − (stride−1)/2) / stride, so that
//!   mirroring commutes exactly between the two frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(&self, other: &Point2) -> f64 {
        ((self.x - other.x).powi(2) + (self.y - other.y).powi(2)).sqrt()
    }

    pub fn dist_sq(&self, other: &Point2) -> f64 {
        (self.x - other.x).powi(2) + (self.y - other.y).powi(2)
    }
}

/// 2×3 affine map `p ↦ m·p + t` on normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine2 {
    pub m: [[f64; 2]; 2],
    pub t: [f64; 2],
}

impl Affine2 {
    pub fn identity() -> Self {
        Self {
            m: [[1.0, 0.0], [0.0, 1.0]],
            t: [0.0, 0.0],
        }
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        Point2::new(
            self.m[0][0] * p.x + self.m[0][1] * p.y + self.t[0],
            self.m[1][0] * p.x + self.m[1][1] * p.y + self.t[1],
        )
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    pub fn inverse(&self) -> Result<Affine2> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return Err(Error::NonInvertible(format!("affine determinant {d}")));
        }
        let inv = [
            [self.m[1][1] / d, -self.m[0][1] / d],
            [-self.m[1][0] / d, self.m[0][0] / d],
        ];
        Ok(Affine2 {
            m: inv,
            t: [
                -(inv[0][0] * self.t[0] + inv[0][1] * self.t[1]),
                -(inv[1][0] * self.t[0] + inv[1][1] * self.t[1]),
            ],
        })
    }

    /// Composition `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Affine2) -> Affine2 {
        let mut m = [[0.0; 2]; 2];
        for r in 0..2 {
            for c in 0..2 {
                m[r][c] = self.m[r][0] * other.m[0][c] + self.m[r][1] * other.m[1][c];
            }
        }
        Affine2 {
            m,
            t: [
                self.m[0][0] * other.t[0] + self.m[0][1] * other.t[1] + self.t[0],
                self.m[1][0] * other.t[0] + self.m[1][1] * other.t[1] + self.t[1],
            ],
        }
    }
}

/// Smooth non-affine component of a piecewise warp. The sinusoidal
/// displacement field stays a diffeomorphism while 2π·freq·amplitude < 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiecewiseWarp {
    pub amplitude: f64,
    pub freq: f64,
    pub phase_x: f64,
    pub phase_y: f64,
}

impl PiecewiseWarp {
    fn displacement(&self, p: Point2) -> (f64, f64) {
        let two_pi = std::f64::consts::TAU;
        (
            self.amplitude * (two_pi * (self.freq * p.y + self.phase_x)).sin(),
            self.amplitude * (two_pi * (self.freq * p.x + self.phase_y)).sin(),
        )
    }

    fn apply(&self, p: Point2) -> Point2 {
        let (dx, dy) = self.displacement(p);
        Point2::new(p.x + dx, p.y + dy)
    }

    /// Fixed-point inversion; the field is a strong contraction at the
    /// amplitudes in use, so a few iterations reach machine precision.
    fn invert(&self, q: Point2) -> Point2 {
        let mut p = q;
        for _ in 0..18 {
            let (dx, dy) = self.displacement(p);
            p = Point2::new(q.x - dx, q.y - dy);
        }
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpKind {
    Affine,
    Piecewise(PiecewiseWarp),
}

/// Invertible geometric transform on normalized image coordinates.
///
/// Order of application: optional horizontal flip about x = 0.5, then the
/// centered rotation/shear/scale, then translation, then (for the piecewise
/// kind) the smooth displacement field.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeometricTransform {
    pub rotation: f64,
    pub scale: (f64, f64),
    pub translation: (f64, f64),
    pub shear: f64,
    pub flip: bool,
    pub kind: WarpKind,
}

impl GeometricTransform {
    pub fn identity() -> Self {
        Self {
            rotation: 0.0,
            scale: (1.0, 1.0),
            translation: (0.0, 0.0),
            shear: 0.0,
            flip: false,
            kind: WarpKind::Affine,
        }
    }

    pub fn flip_only() -> Self {
        Self {
            flip: true,
            ..Self::identity()
        }
    }

    /// The affine part as a matrix on normalized coordinates.
    pub fn affine(&self) -> Affine2 {
        let (sx, sy) = self.scale;
        let (c, s) = (self.rotation.cos(), self.rotation.sin());
        // rotation · shear · scale, pivoted about the image center
        let rs = Affine2 {
            m: [[c, -s], [s, c]],
            t: [0.0, 0.0],
        };
        let sh = Affine2 {
            m: [[1.0, self.shear], [0.0, 1.0]],
            t: [0.0, 0.0],
        };
        let sc = Affine2 {
            m: [[sx, 0.0], [0.0, sy]],
            t: [0.0, 0.0],
        };
        let lin = rs.compose(&sh).compose(&sc);
        let center = 0.5;
        let mut a = Affine2 {
            m: lin.m,
            t: [
                center - lin.m[0][0] * center - lin.m[0][1] * center + self.translation.0,
                center - lin.m[1][0] * center - lin.m[1][1] * center + self.translation.1,
            ],
        };
        if self.flip {
            let f = Affine2 {
                m: [[-1.0, 0.0], [0.0, 1.0]],
                t: [1.0, 0.0],
            };
            a = a.compose(&f);
        }
        a
    }

    pub fn validate(&self) -> Result<()> {
        let a = self.affine();
        if a.det().abs() < 1e-9 {
            return Err(Error::NonInvertible(format!(
                "degenerate affine part, determinant {}",
                a.det()
            )));
        }
        if let WarpKind::Piecewise(w) = self.kind {
            if std::f64::consts::TAU * w.freq.abs() * w.amplitude.abs() >= 0.95 {
                return Err(Error::NonInvertible(format!(
                    "piecewise warp too strong: 2π·freq·amplitude = {}",
                    std::f64::consts::TAU * w.freq.abs() * w.amplitude.abs()
                )));
            }
        }
        Ok(())
    }

    /// Forward map on normalized coordinates.
    pub fn apply_norm(&self, p: Point2) -> Point2 {
        let q = self.affine().apply(p);
        match self.kind {
            WarpKind::Affine => q,
            WarpKind::Piecewise(w) => w.apply(q),
        }
    }

    /// Inverse map on normalized coordinates.
    pub fn invert_norm(&self, q: Point2) -> Result<Point2> {
        let ainv = self.affine().inverse()?;
        Ok(match self.kind {
            WarpKind::Affine => ainv.apply(q),
            WarpKind::Piecewise(w) => ainv.apply(w.invert(q)),
        })
    }

    /// Forward map on raster pixel coordinates of a w×h image.
    pub fn apply_px(&self, p: Point2, w: usize, h: usize) -> Point2 {
        norm_to_px(self.apply_norm(px_to_norm(p, w, h)), w, h)
    }

    /// Inverse map on raster pixel coordinates.
    pub fn invert_px(&self, p: Point2, w: usize, h: usize) -> Result<Point2> {
        Ok(norm_to_px(self.invert_norm(px_to_norm(p, w, h))?, w, h))
    }
}

pub fn px_to_norm(p: Point2, w: usize, h: usize) -> Point2 {
    Point2::new((p.x + 0.5) / w as f64, (p.y + 0.5) / h as f64)
}

pub fn norm_to_px(p: Point2, w: usize, h: usize) -> Point2 {
    Point2::new(p.x * w as f64 - 0.5, p.y * h as f64 - 0.5)
}

/// Raster pixel coordinate to output-grid coordinate for an integral stride.
pub fn raster_to_grid(p: Point2, stride: usize) -> Point2 {
    let off = (stride as f64 - 1.0) / 2.0;
    Point2::new((p.x - off) / stride as f64, (p.y - off) / stride as f64)
}

pub fn grid_to_raster(p: Point2, stride: usize) -> Point2 {
    let off = (stride as f64 - 1.0) / 2.0;
    Point2::new(p.x * stride as f64 + off, p.y * stride as f64 + off)
}

/// Mirror a raster pixel x-coordinate for a width-w image.
pub fn mirror_px_x(x: f64, w: usize) -> f64 {
    (w as f64 - 1.0) - x
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: Point2, b: Point2, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol
    }

    #[test]
    fn identity_is_noop() {
        let g = GeometricTransform::identity();
        let p = Point2::new(0.3, 0.7);
        assert_eq!(g.apply_norm(p), p);
    }

    #[test]
    fn pure_translation_shifts_exactly() {
        let g = GeometricTransform {
            translation: (0.1, -0.05),
            ..GeometricTransform::identity()
        };
        let p = Point2::new(0.4, 0.4);
        let q = g.apply_norm(p);
        assert!((q.x - 0.5).abs() < 1e-15);
        assert!((q.y - 0.35).abs() < 1e-15);
    }

    #[test]
    fn forward_then_inverse_roundtrips_affine() {
        let g = GeometricTransform {
            rotation: 0.6,
            scale: (1.2, 0.8),
            translation: (0.07, -0.03),
            shear: 0.15,
            flip: true,
            kind: WarpKind::Affine,
        };
        g.validate().unwrap();
        let p = Point2::new(0.35, 0.62);
        let back = g.invert_norm(g.apply_norm(p)).unwrap();
        assert!(close(back, p, 1e-6));
    }

    #[test]
    fn forward_then_inverse_roundtrips_piecewise() {
        let g = GeometricTransform {
            rotation: -0.3,
            scale: (0.9, 1.1),
            translation: (0.02, 0.04),
            shear: -0.1,
            flip: false,
            kind: WarpKind::Piecewise(PiecewiseWarp {
                amplitude: 0.02,
                freq: 1.5,
                phase_x: 0.3,
                phase_y: 0.8,
            }),
        };
        g.validate().unwrap();
        let p = Point2::new(0.55, 0.25);
        let back = g.invert_norm(g.apply_norm(p)).unwrap();
        assert!(close(back, p, 1e-9));
    }

    #[test]
    fn rotation_pi_then_minus_pi_is_identity() {
        let fwd = GeometricTransform {
            rotation: std::f64::consts::PI,
            ..GeometricTransform::identity()
        };
        let bwd = GeometricTransform {
            rotation: -std::f64::consts::PI,
            ..GeometricTransform::identity()
        };
        let p = Point2::new(0.2, 0.8);
        let q = bwd.apply_norm(fwd.apply_norm(p));
        assert!(close(q, p, 1e-9));
    }

    #[test]
    fn matrix_composition_matches_sequential_application() {
        let g1 = GeometricTransform {
            rotation: 0.4,
            scale: (1.1, 0.95),
            translation: (0.03, 0.01),
            shear: 0.05,
            flip: false,
            kind: WarpKind::Affine,
        };
        let g2 = GeometricTransform {
            rotation: -0.7,
            scale: (0.85, 1.2),
            translation: (-0.02, 0.06),
            shear: -0.12,
            flip: true,
            kind: WarpKind::Affine,
        };
        let composed = g2.affine().compose(&g1.affine());
        for &(x, y) in &[(0.1, 0.2), (0.9, 0.4), (0.5, 0.5), (0.33, 0.77)] {
            let p = Point2::new(x, y);
            let seq = g2.apply_norm(g1.apply_norm(p));
            let one = composed.apply(p);
            assert!(close(seq, one, 1e-9));
        }
    }

    #[test]
    fn degenerate_scale_rejected() {
        let g = GeometricTransform {
            scale: (0.0, 1.0),
            ..GeometricTransform::identity()
        };
        assert!(g.validate().is_err());
    }

    #[test]
    fn grid_mirror_commutes_with_raster_mirror() {
        // Mirroring in raster space then converting to grid space must equal
        // converting first and mirroring in grid space.
        let w = 64;
        let stride = 2;
        let wo = w / stride;
        for &x in &[0.0, 3.25, 17.5, 62.0] {
            let mirrored_raster = mirror_px_x(x, w);
            let a = raster_to_grid(Point2::new(mirrored_raster, 0.0), stride).x;
            let g = raster_to_grid(Point2::new(x, 0.0), stride).x;
            let b = (wo as f64 - 1.0) - g;
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }
}
