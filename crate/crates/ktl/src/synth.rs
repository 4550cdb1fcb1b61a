//! Synthetic deformable-object corpus with known landmarks, known left/right
//! symmetry, and locally distinctive appearance.
//!
//! Each template landmark is rendered as an oriented Gabor-like motif whose
//! parameters are fixed per landmark index, so the same landmark looks alike
//! across images (up to the sample's geometric transform) while different
//! landmarks stay separable. Mirrored landmark pairs carry mirrored motifs,
//! which is what makes flip experiments meaningful. Backgrounds are
//! low-frequency noise plus a fraction of distractor motifs that are drawn
//! fresh per sample and therefore never form stable clusters.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    mirror_px_x, norm_to_px, GeometricTransform, PiecewiseWarp, Point2, WarpKind,
};
use crate::raster::Raster;
use crate::rng::rng_for;

/// Deformable object category: canonical landmark layout plus appearance.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ObjectTemplate {
    pub template_id: usize,
    /// K_true points in normalized [0,1]² coordinates.
    pub canonical_landmarks: Vec<Point2>,
    /// Involution pairing mirrored landmarks; fixed points allowed.
    pub symmetry_map: Vec<usize>,
    pub appearance_seed: u64,
}

impl ObjectTemplate {
    pub fn num_landmarks(&self) -> usize {
        self.canonical_landmarks.len()
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.canonical_landmarks.len();
        if self.symmetry_map.len() != k {
            return Err(Error::Config("symmetry_map length != landmark count".into()));
        }
        for (i, &j) in self.symmetry_map.iter().enumerate() {
            if j >= k || self.symmetry_map[j] != i {
                return Err(Error::Config(format!(
                    "symmetry_map is not an involution at index {i}"
                )));
            }
        }
        for a in 0..k {
            for b in (a + 1)..k {
                if self.canonical_landmarks[a].dist(&self.canonical_landmarks[b]) < 0.02 {
                    return Err(Error::Config(format!(
                        "landmarks {a} and {b} closer than 0.02 normalized units"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One rendered corpus image with hidden ground truth.
#[derive(Debug, Clone)]
pub struct ImageSample {
    pub sample_id: usize,
    pub raster: Raster,
    /// Ground-truth landmark positions in raster pixel coordinates. Hidden
    /// from training; evaluation and synthetic initialization only.
    pub gt_landmarks: Vec<Point2>,
    /// False for landmarks warped out of the raster bounds.
    pub gt_visible: Vec<bool>,
    /// Transform relative to the parent (template for generated samples,
    /// input sample for `apply_transform` outputs).
    pub applied_transform: GeometricTransform,
    pub template_id: usize,
}

/// Full corpus generation parameters. `generate_corpus` is the simple entry
/// point; this struct exposes the remaining knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub n_images: usize,
    pub template_pool: usize,
    pub image_size: usize,
    pub deform_strength: f64,
    pub seed: u64,
    pub landmarks_per_template: usize,
    /// Distractor motif count as a fraction of landmark count.
    pub distractor_fraction: f64,
    pub symmetric_templates: bool,
    /// Whether sample transforms may mirror the object (probability
    /// 0.5·deform_strength when allowed). Corpora for pipelines without flip
    /// augmentation should disable this.
    pub allow_flips: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            n_images: 1000,
            template_pool: 1,
            image_size: 64,
            deform_strength: 0.5,
            seed: 0,
            landmarks_per_template: 15,
            distractor_fraction: 0.2,
            symmetric_templates: true,
            allow_flips: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub spec: CorpusSpec,
    pub templates: Vec<ObjectTemplate>,
    pub samples: Vec<ImageSample>,
}

/// Generates a corpus with default template settings (15 symmetric landmarks
/// per template, 20% distractors).
pub fn generate_corpus(
    n_images: usize,
    template_pool: usize,
    image_size: usize,
    deform_strength: f64,
    seed: u64,
) -> Result<Corpus> {
    CorpusSpec {
        n_images,
        template_pool,
        image_size,
        deform_strength,
        seed,
        ..CorpusSpec::default()
    }
    .generate()
}

impl CorpusSpec {
    pub fn generate(&self) -> Result<Corpus> {
        if self.n_images < 1 {
            return Err(Error::Config("n_images must be >= 1".into()));
        }
        if self.image_size < 32 {
            return Err(Error::Config(
                "image_size must be >= 32 (landmark motifs unresolvable below)".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.deform_strength) {
            return Err(Error::Config("deform_strength must be in [0,1]".into()));
        }
        if self.template_pool < 1 {
            return Err(Error::Config("template_pool must be >= 1".into()));
        }

        let templates: Vec<ObjectTemplate> = (0..self.template_pool)
            .map(|t| {
                make_template(
                    t,
                    self.landmarks_per_template,
                    self.symmetric_templates,
                    self.seed,
                )
            })
            .collect::<Result<_>>()?;

        let samples = (0..self.n_images)
            .map(|i| {
                let mut rng = rng_for(self.seed, "sample", i as u64);
                let template = &templates[rng.gen_range(0..templates.len())];
                let mut g = sample_transform(self.deform_strength, &mut rng);
                if !self.allow_flips {
                    g.flip = false;
                }
                render_sample(i, template, &g, self.image_size, self.distractor_fraction, &mut rng)
            })
            .collect::<Result<_>>()?;

        Ok(Corpus {
            spec: self.clone(),
            templates,
            samples,
        })
    }
}

/// Draws a transform whose parameter ranges scale with `strength`:
/// rotation ±strength·2π/3, per-axis scale ±25%·strength, shear ±0.25·strength,
/// translation ±0.12·strength, flip with probability 0.5·strength, piecewise
/// displacement with probability 0.5·strength.
pub fn sample_transform(strength: f64, rng: &mut impl Rng) -> GeometricTransform {
    let rotation =
        rng.gen_range(-1.0..1.0f64) * strength * (2.0 * std::f64::consts::PI / 3.0);
    let scale = (
        1.0 + rng.gen_range(-1.0..1.0f64) * 0.25 * strength,
        1.0 + rng.gen_range(-1.0..1.0f64) * 0.25 * strength,
    );
    let shear = rng.gen_range(-1.0..1.0f64) * 0.25 * strength;
    let translation = (
        rng.gen_range(-1.0..1.0f64) * 0.12 * strength,
        rng.gen_range(-1.0..1.0f64) * 0.12 * strength,
    );
    let flip = rng.gen_range(0.0..1.0) < 0.5 * strength;
    let kind = if rng.gen_range(0.0..1.0) < 0.5 * strength {
        WarpKind::Piecewise(PiecewiseWarp {
            amplitude: rng.gen_range(0.3..1.0) * strength * 0.02,
            freq: 1.5,
            phase_x: rng.gen_range(0.0..1.0),
            phase_y: rng.gen_range(0.0..1.0),
        })
    } else {
        WarpKind::Affine
    };
    GeometricTransform {
        rotation,
        scale,
        translation,
        shear,
        flip,
        kind,
    }
}

fn make_template(
    template_id: usize,
    k_true: usize,
    symmetric: bool,
    seed: u64,
) -> Result<ObjectTemplate> {
    let mut rng = rng_for(seed, "template", template_id as u64);
    let appearance_seed = rng.gen();
    let mut landmarks: Vec<Point2> = Vec::with_capacity(k_true);
    let mut symmetry = Vec::with_capacity(k_true);

    let mut min_sep = 0.10;
    if symmetric {
        let pairs = k_true / 2;
        let midline = k_true % 2;
        // Mirror pairs live off-center; x <= 0.44 keeps each pair >= 0.12 apart.
        for _ in 0..pairs {
            let p = place_point(&mut rng, &landmarks, 0.18..0.44, 0.18..0.82, &mut min_sep);
            let q = Point2::new(1.0 - p.x, p.y);
            let a = landmarks.len();
            landmarks.push(p);
            landmarks.push(q);
            symmetry.push(a + 1);
            symmetry.push(a);
        }
        for _ in 0..midline {
            let mut p = place_point(&mut rng, &landmarks, 0.47..0.53, 0.18..0.82, &mut min_sep);
            p.x = 0.5;
            symmetry.push(landmarks.len());
            landmarks.push(p);
        }
    } else {
        for i in 0..k_true {
            let p = place_point(&mut rng, &landmarks, 0.18..0.82, 0.18..0.82, &mut min_sep);
            landmarks.push(p);
            symmetry.push(i);
        }
    }

    let tpl = ObjectTemplate {
        template_id,
        canonical_landmarks: landmarks,
        symmetry_map: symmetry,
        appearance_seed,
    };
    tpl.validate()?;
    Ok(tpl)
}

fn place_point(
    rng: &mut impl Rng,
    existing: &[Point2],
    xr: std::ops::Range<f64>,
    yr: std::ops::Range<f64>,
    min_sep: &mut f64,
) -> Point2 {
    loop {
        for _ in 0..2000 {
            let p = Point2::new(rng.gen_range(xr.clone()), rng.gen_range(yr.clone()));
            let mirrored = Point2::new(1.0 - p.x, p.y);
            let ok = existing
                .iter()
                .all(|q| q.dist(&p) >= *min_sep && q.dist(&mirrored) >= *min_sep);
            if ok {
                return p;
            }
        }
        *min_sep *= 0.9;
    }
}

/// Per-landmark motif: a Gaussian envelope carrying two oriented cosine
/// gratings. Two distinct orientations make the pattern chiral — no rotation
/// reproduces its mirror image — so mirrored landmark pairs stay separable
/// under rotation-invariant descriptors while remaining exact mirror twins
/// of each other.
#[derive(Debug, Clone, Copy)]
struct Motif {
    sigma_px: f64,
    freq1: f64,
    freq2: f64,
    theta1: f64,
    theta2: f64,
    amp: f64,
}

impl Motif {
    /// Value at canonical-frame pixel displacement d from the motif center.
    fn eval(&self, dx: f64, dy: f64) -> f64 {
        let r2 = dx * dx + dy * dy;
        let env = (-r2 / (2.0 * self.sigma_px * self.sigma_px)).exp();
        let tau = std::f64::consts::TAU;
        let p1 = self.theta1.cos() * dx + self.theta1.sin() * dy;
        let p2 = self.theta2.cos() * dx + self.theta2.sin() * dy;
        self.amp * env * 0.5 * ((tau * self.freq1 * p1).cos() + (tau * self.freq2 * p2).cos())
    }

    fn mirrored(&self) -> Motif {
        Motif {
            theta1: std::f64::consts::PI - self.theta1,
            theta2: std::f64::consts::PI - self.theta2,
            ..*self
        }
    }
}

/// Deterministic motif set for one template: mirrored landmark pairs get
/// mirrored motifs, midline fixed points get mirror-symmetric ones.
fn template_motifs(tpl: &ObjectTemplate, image_size: usize) -> Vec<Motif> {
    let mut rng = rng_for(tpl.appearance_seed, "motifs", 0);
    let px = image_size as f64 / 64.0;
    // Identity is carried on rotation-invariant axes — carrier frequency,
    // band ratio, and polarity — so landmarks stay separable under in-plane
    // rotation. Frequencies put 1.5+ cycles inside the envelope; orientations
    // sit mid-quadrant so a motif and its mirror differ by 2θ ≈ 85°..130°.
    let freqs = [0.18, 0.225, 0.27, 0.315];
    let ratios = [1.35, 1.8];
    let thetas = [0.75, 0.95, 1.15, 0.85];
    let mut motifs: Vec<Option<Motif>> = vec![None; tpl.num_landmarks()];
    let mut combo = 0usize;
    for i in 0..tpl.num_landmarks() {
        if motifs[i].is_some() {
            continue;
        }
        let j = tpl.symmetry_map[i];
        let freq1 = freqs[combo % freqs.len()] / px;
        let ratio = ratios[(combo / freqs.len()) % ratios.len()];
        let theta1 = thetas[combo % thetas.len()];
        let sigma_px = (2.6 + rng.gen_range(0.0..0.8)) * px;
        let amp = if (combo / (freqs.len() * ratios.len())) % 2 == 0 {
            0.45
        } else {
            -0.45
        };
        let base = if i == j {
            // Midline point: symmetric under mirroring (vertical gratings).
            Motif {
                sigma_px,
                freq1,
                freq2: freq1 * ratio,
                theta1: std::f64::consts::FRAC_PI_2,
                theta2: std::f64::consts::FRAC_PI_2,
                amp,
            }
        } else {
            Motif {
                sigma_px,
                freq1,
                freq2: freq1 * ratio,
                theta1,
                // Offset distinct from 0 and ±π/2 keeps the pattern chiral.
                theta2: theta1 + 0.7,
                amp,
            }
        };
        combo += 1;
        motifs[i] = Some(base);
        if j != i {
            motifs[j] = Some(base.mirrored());
        }
    }
    motifs.into_iter().map(|m| m.unwrap()).collect()
}

fn render_sample(
    sample_id: usize,
    tpl: &ObjectTemplate,
    g: &GeometricTransform,
    size: usize,
    distractor_fraction: f64,
    rng: &mut impl Rng,
) -> Result<ImageSample> {
    g.validate()?;
    let mut raster = Raster::zeros(size, size);

    // Low-frequency background.
    let n_waves = 3;
    let waves: Vec<(f64, f64, f64, f64)> = (0..n_waves)
        .map(|_| {
            (
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.5..2.5),
                rng.gen_range(0.0..std::f64::consts::TAU),
                rng.gen_range(0.03..0.08),
            )
        })
        .collect();
    for y in 0..size {
        for x in 0..size {
            let u = (x as f64 + 0.5) / size as f64;
            let v = (y as f64 + 0.5) / size as f64;
            let mut val = 0.45;
            for &(fx, fy, ph, a) in &waves {
                val += a * (std::f64::consts::TAU * (fx * u + fy * v) + ph).cos();
            }
            raster.set(x, y, val);
        }
    }

    // Landmark motifs, warped through the transform's linear part so the
    // pattern deforms with the object.
    let motifs = template_motifs(tpl, size);
    let lin = g.affine();
    let lin_inv = lin.inverse()?;
    let gt_landmarks: Vec<Point2> = tpl
        .canonical_landmarks
        .iter()
        .map(|&p| norm_to_px(g.apply_norm(p), size, size))
        .collect();
    let stretch = {
        let m = lin.m;
        let c0 = (m[0][0].powi(2) + m[1][0].powi(2)).sqrt();
        let c1 = (m[0][1].powi(2) + m[1][1].powi(2)).sqrt();
        c0.max(c1)
    };
    for (idx, &center) in gt_landmarks.iter().enumerate() {
        let radius = (3.5 * motifs[idx].sigma_px * stretch.max(1.0)).ceil() as i64;
        stamp_motif(&mut raster, center, &motifs[idx], &lin_inv.m, radius);
    }

    // Distractors: fresh params each sample, so they never cluster.
    let n_distract = (distractor_fraction * tpl.num_landmarks() as f64).ceil() as usize;
    let px = size as f64 / 64.0;
    for _ in 0..n_distract {
        let center = Point2::new(
            rng.gen_range(0.1..0.9) * size as f64,
            rng.gen_range(0.1..0.9) * size as f64,
        );
        let f1 = rng.gen_range(0.08..0.24) / px;
        let t1 = rng.gen_range(0.0..std::f64::consts::PI);
        let m = Motif {
            sigma_px: rng.gen_range(1.8..3.4) * px,
            freq1: f1,
            freq2: f1 * rng.gen_range(1.3..2.0),
            theta1: t1,
            theta2: t1 + rng.gen_range(-1.2..1.2),
            amp: if rng.gen_range(0.0..1.0f64) < 0.5 { 0.36 } else { -0.36 },
        };
        let radius = (3.5 * m.sigma_px).ceil() as i64;
        stamp_motif(&mut raster, center, &m, &[[1.0, 0.0], [0.0, 1.0]], radius);
    }

    raster.clamp_values(0.0, 1.0);

    let gt_visible = gt_landmarks
        .iter()
        .map(|p| inside_raster(p, size))
        .collect();
    Ok(ImageSample {
        sample_id,
        raster,
        gt_landmarks,
        gt_visible,
        applied_transform: *g,
        template_id: tpl.template_id,
    })
}

fn inside_raster(p: &Point2, size: usize) -> bool {
    p.x >= 0.0 && p.y >= 0.0 && p.x <= size as f64 - 1.0 && p.y <= size as f64 - 1.0
}

fn stamp_motif(
    raster: &mut Raster,
    center: Point2,
    motif: &Motif,
    lin_inv: &[[f64; 2]; 2],
    radius: i64,
) {
    let cx = center.x.round() as i64;
    let cy = center.y.round() as i64;
    let (w, h) = (raster.width() as i64, raster.height() as i64);
    for y in (cy - radius).max(0)..=(cy + radius).min(h - 1) {
        for x in (cx - radius).max(0)..=(cx + radius).min(w - 1) {
            let dx = x as f64 - center.x;
            let dy = y as f64 - center.y;
            // Back to the canonical motif frame.
            let cx0 = lin_inv[0][0] * dx + lin_inv[0][1] * dy;
            let cy0 = lin_inv[1][0] * dx + lin_inv[1][1] * dy;
            let v = motif.eval(cx0, cy0);
            if v.abs() > 1e-4 {
                raster.add(x as usize, y as usize, v);
            }
        }
    }
}

/// Applies an additional transform to a sample: warps the raster, maps the
/// ground-truth points analytically, and marks points leaving the raster as
/// invisible. A pure flip takes the exact mirror path (bit-exact involution).
pub fn apply_transform(sample: &ImageSample, g: &GeometricTransform) -> Result<ImageSample> {
    g.validate()?;
    let size = sample.raster.width();
    let pure_flip = *g == GeometricTransform::flip_only();
    let raster = if pure_flip {
        sample.raster.mirrored()
    } else {
        sample.raster.warp(g)?
    };
    let gt_landmarks: Vec<Point2> = if pure_flip {
        sample
            .gt_landmarks
            .iter()
            .map(|p| Point2::new(mirror_px_x(p.x, size), p.y))
            .collect()
    } else {
        transform_points(&sample.gt_landmarks, g, size, sample.raster.height())
    };
    let gt_visible = gt_landmarks
        .iter()
        .zip(&sample.gt_visible)
        .map(|(p, &was)| was && inside_raster(p, size))
        .collect();
    Ok(ImageSample {
        sample_id: sample.sample_id,
        raster,
        gt_landmarks,
        gt_visible,
        applied_transform: *g,
        template_id: sample.template_id,
    })
}

/// Exact analytic point mapping in raster pixel coordinates.
pub fn transform_points(
    points: &[Point2],
    g: &GeometricTransform,
    w: usize,
    h: usize,
) -> Vec<Point2> {
    points.iter().map(|&p| g.apply_px(p, w, h)).collect()
}

// ---------------------------------------------------------------------------
// Corpus persistence: corpus.json manifest plus one LDR1 raster per sample.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    sample_id: usize,
    template_id: usize,
    transform: GeometricTransform,
    gt_landmarks: Vec<Point2>,
    gt_visible: Vec<bool>,
    raster_file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    spec: CorpusSpec,
    templates: Vec<ObjectTemplate>,
    samples: Vec<SampleRecord>,
}

impl Corpus {
    pub fn image_size(&self) -> usize {
        self.spec.image_size
    }

    pub fn template_of(&self, sample: &ImageSample) -> &ObjectTemplate {
        &self.templates[sample.template_id]
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        let mut records = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let name = format!("raster_{:06}.ldr", s.sample_id);
            s.raster.save(&dir.join(&name))?;
            records.push(SampleRecord {
                sample_id: s.sample_id,
                template_id: s.template_id,
                transform: s.applied_transform,
                gt_landmarks: s.gt_landmarks.clone(),
                gt_visible: s.gt_visible.clone(),
                raster_file: name,
            });
        }
        let manifest = Manifest {
            spec: self.spec.clone(),
            templates: self.templates.clone(),
            samples: records,
        };
        let path = dir.join("corpus.json");
        let json = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Corpus> {
        let path = dir.join("corpus.json");
        let text =
            std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let manifest: Manifest =
            serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
        let samples = manifest
            .samples
            .into_iter()
            .map(|r| {
                let raster = Raster::load(&dir.join(&r.raster_file))?;
                Ok(ImageSample {
                    sample_id: r.sample_id,
                    raster,
                    gt_landmarks: r.gt_landmarks,
                    gt_visible: r.gt_visible,
                    applied_transform: r.transform,
                    template_id: r.template_id,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Corpus {
            spec: manifest.spec,
            templates: manifest.templates,
            samples,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_strength_gives_identical_landmarks() {
        let corpus = generate_corpus(4, 1, 64, 0.0, 7).unwrap();
        let first = &corpus.samples[0].gt_landmarks;
        for s in &corpus.samples[1..] {
            for (a, b) in s.gt_landmarks.iter().zip(first) {
                assert!((a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let a = generate_corpus(20, 3, 64, 0.5, 1).unwrap();
        let b = generate_corpus(20, 3, 64, 0.5, 1).unwrap();
        for (sa, sb) in a.samples.iter().zip(&b.samples) {
            assert_eq!(sa.raster, sb.raster);
            assert_eq!(sa.gt_landmarks, sb.gt_landmarks);
        }
    }

    #[test]
    fn different_seeds_give_different_landmarks() {
        let a = generate_corpus(100, 3, 64, 0.5, 1).unwrap();
        let b = generate_corpus(100, 3, 64, 0.5, 2).unwrap();
        let differing = a
            .samples
            .iter()
            .zip(&b.samples)
            .filter(|(sa, sb)| {
                sa.gt_landmarks
                    .iter()
                    .zip(&sb.gt_landmarks)
                    .any(|(p, q)| p.dist(q) > 1e-9)
            })
            .count();
        assert!(differing >= 95, "only {differing} of 100 samples differ");
    }

    #[test]
    fn rejects_small_images() {
        assert!(generate_corpus(1, 1, 31, 0.0, 0).is_err());
    }

    #[test]
    fn raster_values_in_unit_range() {
        let corpus = generate_corpus(3, 1, 64, 0.8, 3).unwrap();
        for s in &corpus.samples {
            assert!(s.raster.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn identity_transform_returns_equal_sample() {
        let corpus = generate_corpus(1, 1, 64, 0.3, 11).unwrap();
        let out = apply_transform(&corpus.samples[0], &GeometricTransform::identity()).unwrap();
        for (a, b) in out.gt_landmarks.iter().zip(&corpus.samples[0].gt_landmarks) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn flip_sends_landmark_to_mirror_of_its_partner() {
        let corpus = generate_corpus(1, 1, 64, 0.0, 5).unwrap();
        let sample = &corpus.samples[0];
        let tpl = corpus.template_of(sample);
        let flipped = apply_transform(sample, &GeometricTransform::flip_only()).unwrap();
        let size = corpus.image_size();
        for (i, p) in flipped.gt_landmarks.iter().enumerate() {
            let expect = Point2::new(
                mirror_px_x(sample.gt_landmarks[i].x, size),
                sample.gt_landmarks[i].y,
            );
            assert!(p.dist(&expect) < 1e-9);
            // On a zero-deformation symmetric template the mirror of i is
            // where σ(i) sits.
            let j = tpl.symmetry_map[i];
            if j != i {
                assert!(p.dist(&sample.gt_landmarks[j]) < 1e-6);
            }
        }
    }

    #[test]
    fn flip_twice_is_bit_exact() {
        let corpus = generate_corpus(1, 1, 64, 0.4, 9).unwrap();
        let s = &corpus.samples[0];
        let once = apply_transform(s, &GeometricTransform::flip_only()).unwrap();
        let twice = apply_transform(&once, &GeometricTransform::flip_only()).unwrap();
        assert_eq!(twice.raster, s.raster);
        for (a, b) in twice.gt_landmarks.iter().zip(&s.gt_landmarks) {
            assert!(a.dist(b) < 1e-9);
        }
    }

    #[test]
    fn rotation_there_and_back_recovers_landmarks() {
        let corpus = generate_corpus(1, 1, 64, 0.0, 2).unwrap();
        let s = &corpus.samples[0];
        let fwd = GeometricTransform {
            rotation: std::f64::consts::PI,
            ..GeometricTransform::identity()
        };
        let bwd = GeometricTransform {
            rotation: -std::f64::consts::PI,
            ..GeometricTransform::identity()
        };
        let rotated = apply_transform(s, &fwd).unwrap();
        let back = apply_transform(&rotated, &bwd).unwrap();
        for (a, b) in back.gt_landmarks.iter().zip(&s.gt_landmarks) {
            assert!(a.dist(b) < 1e-6);
        }
    }

    #[test]
    fn equivariance_oracle_points_match_apply_transform() {
        let corpus = generate_corpus(2, 1, 64, 0.5, 13).unwrap();
        let g = GeometricTransform {
            rotation: 0.5,
            scale: (1.1, 0.9),
            translation: (0.05, -0.02),
            shear: 0.1,
            flip: true,
            kind: WarpKind::Affine,
        };
        for s in &corpus.samples {
            let warped = apply_transform(s, &g).unwrap();
            let mapped = transform_points(&s.gt_landmarks, &g, 64, 64);
            for (i, (a, b)) in warped.gt_landmarks.iter().zip(&mapped).enumerate() {
                if warped.gt_visible[i] {
                    assert!(a.dist(b) < 1e-6);
                }
            }
        }
    }

    #[test]
    fn pure_translation_shifts_points_exactly() {
        let pts = vec![Point2::new(10.0, 20.0), Point2::new(30.5, 14.25)];
        let g = GeometricTransform {
            translation: (0.125, -0.0625),
            ..GeometricTransform::identity()
        };
        let out = transform_points(&pts, &g, 64, 64);
        for (a, b) in out.iter().zip(&pts) {
            assert!((a.x - (b.x + 8.0)).abs() < 1e-9);
            assert!((a.y - (b.y - 4.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn corpus_save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = generate_corpus(3, 2, 64, 0.5, 21).unwrap();
        corpus.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 3);
        assert_eq!(back.templates.len(), 2);
        for (a, b) in back.samples.iter().zip(&corpus.samples) {
            assert_eq!(a.gt_landmarks, b.gt_landmarks);
            // raster stored as f32
            for (x, y) in a.raster.data().iter().zip(b.raster.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn templates_are_valid_involutions() {
        let corpus = generate_corpus(1, 4, 64, 0.5, 33).unwrap();
        for t in &corpus.templates {
            t.validate().unwrap();
        }
    }
}
