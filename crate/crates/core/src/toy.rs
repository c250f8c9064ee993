//! Synthetic desk-scale corpus: a stand-in for the real patch datasets that
//! makes loaders, samplers and end-to-end training testable without any
//! download.
//!
//! Each 3D point is a smooth random texture; its patches are views of that
//! texture under small random rotation, translation and brightness changes,
//! so within-point patches look alike and between-point patches do not.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Corpus, PatchRecord, PATCH_SIZE};
use crate::error::{Error, Result};

const CANVAS: usize = 96;

/// Generation parameters. Jitters are half-ranges: patches are perturbed
/// uniformly in ±translate_px, ±rotate_deg and ±brightness.
#[derive(Clone, Copy, Debug)]
pub struct ToyCorpusSpec {
    pub num_points: usize,
    pub patches_per_point: usize,
    pub translate_px: f64,
    pub rotate_deg: f64,
    pub brightness: f64,
    pub seed: u64,
}

impl ToyCorpusSpec {
    /// Default jitter: enough variation that matching is non-trivial, small
    /// enough that the task stays learnable at desk scale.
    pub fn new(num_points: usize, patches_per_point: usize, seed: u64) -> Self {
        ToyCorpusSpec {
            num_points,
            patches_per_point,
            translate_px: 4.0,
            rotate_deg: 20.0,
            brightness: 0.3,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.num_points < 2 {
            return Err(Error::invalid("toy corpus", "num_points must be >= 2"));
        }
        if self.patches_per_point < 2 {
            return Err(Error::invalid(
                "toy corpus",
                "patches_per_point must be >= 2",
            ));
        }
        for (name, v) in [
            ("translate_px", self.translate_px),
            ("rotate_deg", self.rotate_deg),
            ("brightness", self.brightness),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(
                    "toy corpus",
                    format!("{name} must be finite and >= 0, got {v}"),
                ));
            }
        }
        Ok(())
    }
}

/// Two-octave value noise over the canvas, mapped into [0, 1].
fn smooth_texture(rng: &mut ChaCha8Rng) -> Vec<f64> {
    fn octave(rng: &mut ChaCha8Rng, spacing: usize) -> Vec<f64> {
        let knots = CANVAS / spacing + 2;
        let grid: Vec<f64> = (0..knots * knots).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut out = vec![0.0; CANVAS * CANVAS];
        for y in 0..CANVAS {
            for x in 0..CANVAS {
                let gx = x as f64 / spacing as f64;
                let gy = y as f64 / spacing as f64;
                let (ix, iy) = (gx as usize, gy as usize);
                let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
                let (fx, fy) = (smooth(gx - ix as f64), smooth(gy - iy as f64));
                let v00 = grid[iy * knots + ix];
                let v01 = grid[iy * knots + ix + 1];
                let v10 = grid[(iy + 1) * knots + ix];
                let v11 = grid[(iy + 1) * knots + ix + 1];
                let top = v00 + (v01 - v00) * fx;
                let bottom = v10 + (v11 - v10) * fx;
                out[y * CANVAS + x] = top + (bottom - top) * fy;
            }
        }
        out
    }
    let coarse = octave(rng, 16);
    let fine = octave(rng, 6);
    coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| (0.5 + 0.45 * (0.65 * c + 0.35 * f)).clamp(0.0, 1.0))
        .collect()
}

/// Clamp-to-edge bilinear sample of the canvas.
fn sample(canvas: &[f64], x: f64, y: f64) -> f64 {
    let max = (CANVAS - 1) as f64;
    let x = x.clamp(0.0, max);
    let y = y.clamp(0.0, max);
    let (ix, iy) = (x as usize, y as usize);
    let ix1 = (ix + 1).min(CANVAS - 1);
    let iy1 = (iy + 1).min(CANVAS - 1);
    let (fx, fy) = (x - ix as f64, y - iy as f64);
    let v00 = canvas[iy * CANVAS + ix];
    let v01 = canvas[iy * CANVAS + ix1];
    let v10 = canvas[iy1 * CANVAS + ix];
    let v11 = canvas[iy1 * CANVAS + ix1];
    let top = v00 + (v01 - v00) * fx;
    let bottom = v10 + (v11 - v10) * fx;
    top + (bottom - top) * fy
}

fn render_patch(
    canvas: &[f64],
    theta: f64,
    dx: f64,
    dy: f64,
    brightness: f64,
) -> Vec<u8> {
    let center = (CANVAS - 1) as f64 / 2.0;
    let half = (PATCH_SIZE - 1) as f64 / 2.0;
    let (sin, cos) = theta.sin_cos();
    let mut pixels = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
    for r in 0..PATCH_SIZE {
        for c in 0..PATCH_SIZE {
            let u = c as f64 - half;
            let v = r as f64 - half;
            let x = center + u * cos - v * sin + dx;
            let y = center + u * sin + v * cos + dy;
            let val = (sample(canvas, x, y) + brightness).clamp(0.0, 1.0);
            pixels.push((val * 255.0).round() as u8);
        }
    }
    pixels
}

/// Generates the corpus: deterministic per seed; pixel values land on the
/// same 8-bit grid the sheet files use, so a disk round-trip is exact.
pub fn make_toy_corpus(spec: &ToyCorpusSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut records = Vec::with_capacity(spec.num_points * spec.patches_per_point);
    let jitter = |rng: &mut ChaCha8Rng, half_range: f64| -> f64 {
        if half_range > 0.0 {
            rng.gen_range(-half_range..half_range)
        } else {
            0.0
        }
    };
    for point in 0..spec.num_points {
        let canvas = smooth_texture(&mut rng);
        for _ in 0..spec.patches_per_point {
            let theta = jitter(&mut rng, spec.rotate_deg).to_radians();
            let dx = jitter(&mut rng, spec.translate_px);
            let dy = jitter(&mut rng, spec.translate_px);
            let brightness = jitter(&mut rng, spec.brightness);
            let pixels = render_patch(&canvas, theta, dx, dy, brightness);
            records.push(PatchRecord::new(records.len(), point as u32, pixels)?);
        }
    }
    Ok(Corpus::from_records(records))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = ToyCorpusSpec::new(3, 2, 42);
        let a = make_toy_corpus(&spec).unwrap();
        let b = make_toy_corpus(&spec).unwrap();
        for (ra, rb) in a.records().iter().zip(b.records()) {
            assert_eq!(ra.raw_pixels(), rb.raw_pixels());
        }
        let c = make_toy_corpus(&ToyCorpusSpec::new(3, 2, 43)).unwrap();
        assert_ne!(a.record(0).raw_pixels(), c.record(0).raw_pixels());
    }

    #[test]
    fn zero_jitter_makes_identical_patches_within_a_point() {
        let spec = ToyCorpusSpec {
            translate_px: 0.0,
            rotate_deg: 0.0,
            brightness: 0.0,
            ..ToyCorpusSpec::new(2, 3, 7)
        };
        let corpus = make_toy_corpus(&spec).unwrap();
        for point in 0..2u32 {
            let group = corpus.group(point);
            let first = corpus.record(group[0]).raw_pixels();
            for &i in &group[1..] {
                assert_eq!(corpus.record(i).raw_pixels(), first);
            }
        }
        assert_ne!(
            corpus.record(corpus.group(0)[0]).raw_pixels(),
            corpus.record(corpus.group(1)[0]).raw_pixels()
        );
    }

    #[test]
    fn within_point_distance_below_between_point_distance() {
        let corpus = make_toy_corpus(&ToyCorpusSpec::new(8, 4, 11)).unwrap();
        let dist = |a: usize, b: usize| -> f64 {
            corpus
                .record(a)
                .raw_pixels()
                .iter()
                .zip(corpus.record(b).raw_pixels())
                .map(|(&x, &y)| {
                    let d = x as f64 / 255.0 - y as f64 / 255.0;
                    d * d
                })
                .sum::<f64>()
                .sqrt()
        };
        let mut within = Vec::new();
        let mut between = Vec::new();
        for a in 0..corpus.len() {
            for b in (a + 1)..corpus.len() {
                let d = dist(a, b);
                if corpus.record(a).point_id == corpus.record(b).point_id {
                    within.push(d);
                } else {
                    between.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&within) < mean(&between),
            "within {} !< between {}",
            mean(&within),
            mean(&between)
        );
    }

    #[test]
    fn invalid_specs_are_rejected() {
        assert!(make_toy_corpus(&ToyCorpusSpec::new(1, 4, 0)).is_err());
        assert!(make_toy_corpus(&ToyCorpusSpec::new(4, 1, 0)).is_err());
        let bad = ToyCorpusSpec {
            rotate_deg: -1.0,
            ..ToyCorpusSpec::new(4, 4, 0)
        };
        assert!(make_toy_corpus(&bad).is_err());
    }
}
