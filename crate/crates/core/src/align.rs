//! Similarity alignment of faces to a landmark template.

use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::LandmarkSet;

/// `p ↦ scale · R(angle) · p + translation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimilarityTransform {
    pub angle: f64,
    pub scale: f64,
    pub translation: [f64; 2],
}

impl SimilarityTransform {
    pub const IDENTITY: Self = Self {
        angle: 0.0,
        scale: 1.0,
        translation: [0.0, 0.0],
    };

    pub fn apply(&self, p: [f64; 2]) -> [f64; 2] {
        let (s, c) = self.angle.sin_cos();
        [
            self.scale * (c * p[0] - s * p[1]) + self.translation[0],
            self.scale * (s * p[0] + c * p[1]) + self.translation[1],
        ]
    }

    pub fn inverse(&self) -> Self {
        let inv = Self {
            angle: -self.angle,
            scale: 1.0 / self.scale,
            translation: [0.0, 0.0],
        };
        let t = inv.apply(self.translation);
        Self {
            translation: [-t[0], -t[1]],
            ..inv
        }
    }

    pub fn apply_landmarks(&self, landmarks: &LandmarkSet) -> LandmarkSet {
        LandmarkSet {
            scheme: landmarks.scheme,
            points: landmarks.points.iter().map(|&p| self.apply(p)).collect(),
        }
    }
}

/// Least-squares similarity mapping `landmarks` onto `template`.
pub fn fit_similarity(landmarks: &LandmarkSet, template: &LandmarkSet) -> Result<SimilarityTransform> {
    if landmarks.scheme != template.scheme {
        return Err(Error::Geometry(format!(
            "cannot align {}-point landmarks to a {}-point template",
            landmarks.scheme.name(),
            template.scheme.name()
        )));
    }
    let n = landmarks.len() as f64;
    if landmarks.len() < 2 {
        return Err(Error::Geometry("alignment needs at least two points".into()));
    }
    let mean = |pts: &[[f64; 2]]| {
        let s = pts.iter().fold([0.0, 0.0], |a, p| [a[0] + p[0], a[1] + p[1]]);
        [s[0] / n, s[1] / n]
    };
    let (ms, md) = (mean(&landmarks.points), mean(&template.points));
    let (mut a, mut b, mut var) = (0.0, 0.0, 0.0);
    for (p, q) in landmarks.points.iter().zip(&template.points) {
        let (x, y) = (p[0] - ms[0], p[1] - ms[1]);
        let (u, v) = (q[0] - md[0], q[1] - md[1]);
        a += x * u + y * v;
        b += x * v - y * u;
        var += x * x + y * y;
    }
    if var <= 1e-12 * (1.0 + ms[0].abs() + ms[1].abs()).powi(2) {
        return Err(Error::Geometry("landmarks are degenerate (all points coincide)".into()));
    }
    let angle = b.atan2(a);
    let scale = a.hypot(b) / var;
    if !(scale > 0.0) || !scale.is_finite() {
        return Err(Error::Geometry("template is degenerate".into()));
    }
    let partial = SimilarityTransform {
        angle,
        scale,
        translation: [0.0, 0.0],
    };
    let r = partial.apply(ms);
    Ok(SimilarityTransform {
        translation: [md[0] - r[0], md[1] - r[1]],
        ..partial
    })
}

/// Resamples `image` into an `out_size` square frame under `t`.
pub fn apply_transform(
    image: &Image,
    landmarks: &LandmarkSet,
    t: &SimilarityTransform,
    out_size: usize,
) -> Result<(Image, LandmarkSet)> {
    if out_size == 0 {
        return Err(Error::Geometry("output size must be positive".into()));
    }
    let inv = t.inverse();
    let mut out = Image::new(out_size, out_size);
    for y in 0..out_size {
        for x in 0..out_size {
            let [sx, sy] = inv.apply([x as f64, y as f64]);
            for c in 0..3 {
                out.set(c, y, x, image.sample(c, sx, sy));
            }
        }
    }
    Ok((out, t.apply_landmarks(landmarks)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::landmarks::Scheme;
    use rand::{Rng, SeedableRng};

    fn close(a: [f64; 2], b: [f64; 2], tol: f64) -> bool {
        (a[0] - b[0]).abs() < tol && (a[1] - b[1]).abs() < tol
    }

    #[test]
    fn template_onto_itself_is_identity() {
        let t = LandmarkSet::template(Scheme::P49, 200.0);
        let fit = fit_similarity(&t, &t).unwrap();
        assert!(fit.angle.abs() < 1e-12);
        assert!((fit.scale - 1.0).abs() < 1e-12);
        assert!(close(fit.translation, [0.0, 0.0], 1e-9));
    }

    #[test]
    fn doubled_template_gives_scale_two() {
        let t = LandmarkSet::template(Scheme::P68, 200.0);
        let big = LandmarkSet {
            scheme: t.scheme,
            points: t.points.iter().map(|p| [2.0 * p[0], 2.0 * p[1]]).collect(),
        };
        let fit = fit_similarity(&t, &big).unwrap();
        assert!((fit.scale - 2.0).abs() < 1e-12);
        assert!(fit.angle.abs() < 1e-12);
    }

    #[test]
    fn random_transforms_are_recovered() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let t = LandmarkSet::template(Scheme::P49, 200.0);
        for _ in 0..50 {
            let truth = SimilarityTransform {
                angle: rng.random_range(-1.0..1.0),
                scale: rng.random_range(0.3..3.0),
                translation: [rng.random_range(-50.0..50.0), rng.random_range(-50.0..50.0)],
            };
            let moved = truth.inverse().apply_landmarks(&t);
            let fit = fit_similarity(&moved, &t).unwrap();
            assert!((fit.angle - truth.angle).abs() < 1e-6);
            assert!((fit.scale - truth.scale).abs() < 1e-6);
            assert!(close(fit.translation, truth.translation, 1e-6));
            let (l, r) = fit.apply_landmarks(&moved).eye_centers();
            assert!((l[1] - r[1]).abs() < 1e-6);
        }
    }

    #[test]
    fn coincident_points_are_degenerate() {
        let t = LandmarkSet::template(Scheme::P49, 200.0);
        let flat = LandmarkSet {
            scheme: t.scheme,
            points: vec![[3.0, 4.0]; 49],
        };
        assert!(matches!(fit_similarity(&flat, &t), Err(Error::Geometry(_))));
    }

    #[test]
    fn identity_warp_keeps_image() {
        let mut img = Image::new(6, 6);
        for (i, v) in img.data.iter_mut().enumerate() {
            *v = (i % 11) as f32 / 10.0;
        }
        let lm = LandmarkSet::template(Scheme::P49, 6.0);
        let (out, lm2) = apply_transform(&img, &lm, &SimilarityTransform::IDENTITY, 6).unwrap();
        assert_eq!(out, img);
        assert_eq!(lm2, lm);
    }

    #[test]
    fn translation_shifts_landmarks() {
        let img = Image::new(8, 8);
        let lm = LandmarkSet::template(Scheme::P49, 8.0);
        let t = SimilarityTransform {
            translation: [5.0, 0.0],
            ..SimilarityTransform::IDENTITY
        };
        let (_, moved) = apply_transform(&img, &lm, &t, 8).unwrap();
        for (a, b) in lm.points.iter().zip(&moved.points) {
            assert!((b[0] - a[0] - 5.0).abs() < 1e-12);
            assert_eq!(a[1], b[1]);
        }
    }

    #[test]
    fn inverse_round_trip() {
        let t = SimilarityTransform {
            angle: 0.4,
            scale: 1.7,
            translation: [3.0, -9.0],
        };
        let lm = LandmarkSet::template(Scheme::P66, 200.0);
        let back = t.inverse().apply_landmarks(&t.apply_landmarks(&lm));
        for (a, b) in lm.points.iter().zip(&back.points) {
            assert!(close(*a, *b, 1e-6));
        }
    }
}
