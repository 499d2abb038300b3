//! Synthetic forgery-artifact dataset: smooth-shaded ellipse "faces" on
//! gradient backgrounds, with fakes carrying a blending-boundary seam, a
//! high-frequency texture patch, or both. Generation is a pure function
//! of the spec; every sample has its own RNG stream.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArtifactMode {
    Boundary,
    Texture,
    Both,
}

impl std::str::FromStr for ArtifactMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "boundary" => Ok(Self::Boundary),
            "texture" => Ok(Self::Texture),
            "both" => Ok(Self::Both),
            other => Err(Error::Config(format!(
                "unknown artifact mode {:?} (expected boundary, texture or both)",
                other
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Total samples; labels are balanced, so this must be even.
    pub count: usize,
    pub image_size: usize,
    pub artifact_mode: ArtifactMode,
    /// Width (pixels) of the Gaussian-soft blending mask.
    pub blend_sigma: f64,
    /// Side of the square texture-noise patch.
    pub texture_patch_size: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 || self.count % 2 != 0 {
            return Err(Error::Config(format!(
                "sample count must be positive and even, got {}",
                self.count
            )));
        }
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} too small", self.image_size)));
        }
        if self.texture_patch_size >= self.image_size {
            return Err(Error::Config(format!(
                "texture patch {} does not fit in image {}",
                self.texture_patch_size, self.image_size
            )));
        }
        if self.blend_sigma <= 0.0 {
            return Err(Error::Config("blend_sigma must be positive".into()));
        }
        Ok(())
    }
}

/// In-memory labeled image set, [N, 3, S, S] row-major, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    /// 0 = real, 1 = fake.
    pub labels: Vec<u8>,
    pub image_size: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn pixels_per_image(&self) -> usize {
        3 * self.image_size * self.image_size
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let p = self.pixels_per_image();
        &self.images[i * p..(i + 1) * p]
    }

    /// Stack the given samples into a [B, 3, S, S] batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let p = self.pixels_per_image();
        let mut data = Vec::with_capacity(indices.len() * p);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        Tensor::new(&[indices.len(), 3, self.image_size, self.image_size], data)
            .expect("batch assembly is shape-consistent")
    }

    pub fn label_usize(&self, i: usize) -> usize {
        self.labels[i] as usize
    }
}

/// One generated sample plus the pieces tests need: the artifact-free base
/// and the support mask of the applied artifacts.
pub struct RenderedSample {
    pub image: Vec<f32>,
    pub label: u8,
    pub base: Vec<f32>,
    /// True where the artifact was allowed to change pixels.
    pub artifact_mask: Vec<bool>,
}

struct EllipseGeometry {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos_t: f64,
    sin_t: f64,
}

impl EllipseGeometry {
    /// Normalized squared elliptical radius: <= 1 inside.
    fn r2(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.cx;
        let dy = y - self.cy;
        let u = dx * self.cos_t + dy * self.sin_t;
        let v = -dx * self.sin_t + dy * self.cos_t;
        (u / self.a) * (u / self.a) + (v / self.b) * (v / self.b)
    }
}

fn rand_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9), rng.gen_range(0.1..0.9)]
}

fn draw_base(
    size: usize,
    geo: &EllipseGeometry,
    bg0: [f64; 3],
    bg1: [f64; 3],
    face: [f64; 3],
    angle: f64,
) -> Vec<f32> {
    let s = size as f64;
    let (dx, dy) = (angle.cos(), angle.sin());
    let mut img = vec![0.0f32; 3 * size * size];
    for y in 0..size {
        for x in 0..size {
            let (xf, yf) = (x as f64, y as f64);
            let t = (((xf * dx + yf * dy) / s) + 1.0) / 2.0;
            let t = t.clamp(0.0, 1.0);
            let r2 = geo.r2(xf, yf);
            // Anti-aliased edge over roughly 1.5 px, smooth interior shade.
            let r = r2.sqrt();
            let edge = 1.5 / geo.a.min(geo.b);
            let alpha = ((1.0 - r) / edge).clamp(0.0, 1.0);
            let shade = 0.55 + 0.45 * (1.0 - r2.min(1.0));
            for c in 0..3 {
                let bg = bg0[c] * (1.0 - t) + bg1[c] * t;
                let fg = (face[c] * shade).clamp(0.0, 1.0);
                let v = bg * (1.0 - alpha) + fg * alpha;
                img[c * size * size + y * size + x] = v as f32;
            }
        }
    }
    img
}

/// Deterministically render sample `index` of the spec.
pub fn render_sample(spec: &SyntheticSpec, index: usize) -> Result<RenderedSample> {
    spec.validate()?;
    let size = spec.image_size;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index as u64 + 1);

    let s = size as f64;
    let geo = EllipseGeometry {
        cx: s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0),
        cy: s / 2.0 + rng.gen_range(-s / 8.0..s / 8.0),
        a: rng.gen_range(s / 4.0..s / 3.0),
        b: rng.gen_range(s / 4.0..s / 3.0),
        cos_t: 0.0,
        sin_t: 0.0,
    };
    let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
    let geo = EllipseGeometry { cos_t: theta.cos(), sin_t: theta.sin(), ..geo };
    let bg0 = rand_color(&mut rng);
    let bg1 = rand_color(&mut rng);
    let face = rand_color(&mut rng);
    let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let base = draw_base(size, &geo, bg0, bg1, face, angle);

    let label = (index % 2 == 1) as u8;
    if label == 0 {
        return Ok(RenderedSample {
            image: base.clone(),
            label,
            base,
            artifact_mask: vec![false; size * size],
        });
    }

    let mut image = base.clone();
    let mut mask = vec![false; size * size];
    let apply_boundary = matches!(spec.artifact_mode, ArtifactMode::Boundary | ArtifactMode::Both);
    let apply_texture = matches!(spec.artifact_mode, ArtifactMode::Texture | ArtifactMode::Both);

    if apply_boundary {
        // Donor face with the same geometry but different colors: the swap
        // leaves a soft seam and a color inconsistency inside the ellipse.
        let donor_face = rand_color(&mut rng);
        let donor_bg = rand_color(&mut rng);
        let donor = draw_base(size, &geo, donor_bg, donor_bg, donor_face, angle);

        // Hard inner-region mask, then a truncated Gaussian soft edge.
        let inner_scale = 0.62;
        let radius = (3.0 * spec.blend_sigma).ceil() as isize;
        let hard: Vec<bool> = (0..size * size)
            .map(|i| {
                let (y, x) = (i / size, i % size);
                geo.r2(x as f64, y as f64) < inner_scale * inner_scale
            })
            .collect();
        // Separable blur of the indicator, truncated at 3 sigma: alpha is
        // exactly zero outside the dilated support.
        let kernel: Vec<f64> = (-radius..=radius)
            .map(|k| (-((k * k) as f64) / (2.0 * spec.blend_sigma * spec.blend_sigma)).exp())
            .collect();
        let ksum: f64 = kernel.iter().sum();
        let mut tmp = vec![0.0f64; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = x as isize + ki as isize - radius;
                    if sx >= 0 && (sx as usize) < size && hard[y * size + sx as usize] {
                        acc += k;
                    }
                }
                tmp[y * size + x] = acc / ksum;
            }
        }
        let mut alpha = vec![0.0f64; size * size];
        for y in 0..size {
            for x in 0..size {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = y as isize + ki as isize - radius;
                    if sy >= 0 && (sy as usize) < size {
                        acc += k * tmp[sy as usize * size + x];
                    }
                }
                alpha[y * size + x] = acc / ksum;
            }
        }
        for i in 0..size * size {
            if alpha[i] > 0.0 {
                mask[i] = true;
                for c in 0..3 {
                    let a = image[c * size * size + i] as f64;
                    let d = donor[c * size * size + i] as f64;
                    image[c * size * size + i] = (a * (1.0 - alpha[i]) + d * alpha[i]) as f32;
                }
            }
        }
    }

    if apply_texture {
        // High-frequency noise patch composited inside the ellipse.
        let tps = spec.texture_patch_size;
        let (px, py) = loop {
            let px = rng.gen_range(0..size - tps);
            let py = rng.gen_range(0..size - tps);
            let (cx, cy) = ((px + tps / 2) as f64, (py + tps / 2) as f64);
            if geo.r2(cx, cy) < 0.5 * 0.5 {
                break (px, py);
            }
        };
        let amp = 0.3;
        for y in py..py + tps {
            for x in px..px + tps {
                mask[y * size + x] = true;
                for c in 0..3 {
                    let idx = c * size * size + y * size + x;
                    let n: f64 = rng.gen_range(-amp..amp);
                    image[idx] = ((image[idx] as f64) + n).clamp(0.0, 1.0) as f32;
                }
            }
        }
    }

    Ok(RenderedSample { image, label, base, artifact_mask: mask })
}

/// Generate the full labeled set (alternating real/fake, so any
/// even-length contiguous split stays balanced).
pub fn synth_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let p = 3 * spec.image_size * spec.image_size;
    let mut images = Vec::with_capacity(spec.count * p);
    let mut labels = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let s = render_sample(spec, i)?;
        images.extend_from_slice(&s.image);
        labels.push(s.label);
    }
    Ok(Dataset { images, labels, image_size: spec.image_size })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(mode: ArtifactMode) -> SyntheticSpec {
        SyntheticSpec {
            count: 100,
            image_size: 64,
            artifact_mode: mode,
            blend_sigma: 2.0,
            texture_patch_size: 12,
            seed: 99,
        }
    }

    #[test]
    fn count_and_balance() {
        let d = synth_dataset(&spec(ArtifactMode::Both)).unwrap();
        assert_eq!(d.len(), 100);
        let fakes: usize = d.labels.iter().map(|&l| l as usize).sum();
        assert_eq!(fakes, 50);
    }

    #[test]
    fn deterministic_per_seed() {
        let a = synth_dataset(&spec(ArtifactMode::Both)).unwrap();
        let b = synth_dataset(&spec(ArtifactMode::Both)).unwrap();
        assert_eq!(a, b);
        let mut other = spec(ArtifactMode::Both);
        other.seed = 100;
        let c = synth_dataset(&other).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn artifacts_stay_inside_their_support() {
        for mode in [ArtifactMode::Boundary, ArtifactMode::Texture, ArtifactMode::Both] {
            let sp = spec(mode);
            for idx in [1usize, 3, 11] {
                let s = render_sample(&sp, idx).unwrap();
                assert_eq!(s.label, 1);
                let size = sp.image_size;
                let mut changed_outside = 0;
                let mut changed_inside = 0;
                for i in 0..size * size {
                    let differs =
                        (0..3).any(|c| s.image[c * size * size + i] != s.base[c * size * size + i]);
                    if differs && !s.artifact_mask[i] {
                        changed_outside += 1;
                    }
                    if differs && s.artifact_mask[i] {
                        changed_inside += 1;
                    }
                }
                assert_eq!(changed_outside, 0, "mode {:?} sample {}", mode, idx);
                assert!(changed_inside > 0, "artifact must actually change pixels");
            }
        }
    }

    #[test]
    fn real_samples_are_artifact_free() {
        let s = render_sample(&spec(ArtifactMode::Both), 4).unwrap();
        assert_eq!(s.label, 0);
        assert_eq!(s.image, s.base);
    }

    #[test]
    fn rejects_oversized_patch_and_odd_count() {
        let mut sp = spec(ArtifactMode::Texture);
        sp.texture_patch_size = 64;
        assert!(synth_dataset(&sp).is_err());
        let mut sp = spec(ArtifactMode::Texture);
        sp.count = 99;
        assert!(synth_dataset(&sp).is_err());
    }

    #[test]
    fn values_in_unit_range() {
        let d = synth_dataset(&spec(ArtifactMode::Both)).unwrap();
        assert!(d.images.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
