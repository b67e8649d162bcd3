use std::path::PathBuf;

use ac2d::align::{apply_transform, fit_similarity, SimilarityTransform};
use ac2d::image::Image;
use ac2d::landmarks::{LandmarkSet, Scheme};
use ac2d::prior::{gaussian_prior, generate_priors, image_to_grid, PriorAttentionMap};
use ac2d::rules::RuleSet;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

fn template_priors() -> Vec<PriorAttentionMap> {
    let rules = RuleSet::default();
    let face = LandmarkSet::template(Scheme::P49, 176.0);
    let aus = rules.aus(Scheme::P49).unwrap();
    generate_priors(&rules, &face, &aus, 176, 3.0).unwrap()
}

#[test]
fn template_priors_match_golden_bytes() {
    let priors = template_priors();
    assert!(!priors.is_empty());
    for p in &priors {
        let path = golden_dir().join(format!("AU{}.agt", p.au));
        let expected = std::fs::read(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let mut got = Vec::new();
        p.write_to(&mut got).unwrap();
        assert_eq!(got, expected, "AU{} differs from golden grid", p.au);
    }
}

/// Recomputes every cell from the rules text and the template landmarks,
/// without going through the prior module.
#[test]
fn template_priors_match_per_cell_oracle() {
    let rules = RuleSet::default();
    let face = LandmarkSet::template(Scheme::P49, 176.0);
    let scheme = rules.scheme(Scheme::P49).unwrap();
    let (a, b) = (scheme.inner_eye_corners[0], scheme.inner_eye_corners[1]);
    let scale = ((face.points[a][0] - face.points[b][0]).powi(2) + (face.points[a][1] - face.points[b][1]).powi(2)).sqrt();
    let side = 22;
    for (p, rule) in template_priors().iter().zip(&scheme.rules) {
        assert_eq!(p.au, rule.au);
        let l = face.points[rule.left];
        let r = face.points[rule.right];
        let cl = [l[0] + rule.offset[0] * scale, l[1] + rule.offset[1] * scale];
        let cr = [r[0] - rule.offset[0] * scale, r[1] + rule.offset[1] * scale];
        let g = |c: [f64; 2]| [((c[0] + 0.5) / 8.0 - 0.5).clamp(0.0, 21.0), ((c[1] + 0.5) / 8.0 - 0.5).clamp(0.0, 21.0)];
        let (gl, gr) = (g(cl), g(cr));
        let mut cells = vec![0.0; side * side];
        for row in 0..side {
            for col in 0..side {
                let e = |c: [f64; 2]| (-((col as f64 - c[0]).powi(2) + (row as f64 - c[1]).powi(2)) / 18.0).exp();
                cells[row * side + col] = e(gl).max(e(gr));
            }
        }
        let total: f64 = cells.iter().sum();
        for (i, (got, raw)) in p.values.iter().zip(&cells).enumerate() {
            assert!((got - raw / total).abs() < 1e-14, "AU{} cell {i}: {got} vs {}", p.au, raw / total);
        }
    }
}

#[test]
fn analytic_values() {
    let g = gaussian_prior([7.0, 9.0], 3.0, 22).unwrap();
    assert_eq!(g[9 * 22 + 7], 1.0);
    assert_eq!(g[12 * 22 + 10], (-1.0f64).exp());
    assert!((g[12 * 22 + 10] - 0.36788).abs() < 5e-6);
}

#[test]
fn distant_subcenters_match_brute_force() {
    let side = 5;
    let (c1, c2) = ([0.0, 0.0], [4.0, 4.0]);
    let m1 = gaussian_prior(c1, 1.0, side).unwrap();
    let m2 = gaussian_prior(c2, 1.0, side).unwrap();
    let p = PriorAttentionMap::combine_and_normalize(4, side, &m1, &m2).unwrap();
    let mut raw = Vec::new();
    for row in 0..side {
        for col in 0..side {
            let d1 = (col as f64).powi(2) + (row as f64).powi(2);
            let d2 = (col as f64 - 4.0).powi(2) + (row as f64 - 4.0).powi(2);
            raw.push((-d1 / 2.0).exp().max((-d2 / 2.0).exp()));
        }
    }
    let total: f64 = raw.iter().sum();
    for (a, b) in p.values.iter().zip(&raw) {
        assert!((a - b / total).abs() < 1e-15);
    }
}

#[test]
fn mirror_commutes_with_generation() {
    let rules = RuleSet::default();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for scheme in [Scheme::P49, Scheme::P66, Scheme::P68] {
        let aus = rules.aus(scheme).unwrap();
        for _ in 0..20 {
            let face = LandmarkSet::template(scheme, 48.0);
            let jittered = LandmarkSet::new(
                face.points
                    .iter()
                    .map(|p| [p[0] + rng.random_range(-2.0..2.0), p[1] + rng.random_range(-2.0..2.0)])
                    .collect(),
            )
            .unwrap();
            let direct = generate_priors(&rules, &jittered, &aus, 48, 1.0).unwrap();
            let mirrored = generate_priors(&rules, &rules.mirror_landmarks(&jittered, 48.0).unwrap(), &aus, 48, 1.0).unwrap();
            for (a, b) in direct.iter().zip(&mirrored) {
                let am = a.mirror();
                for (x, y) in am.values.iter().zip(&b.values) {
                    assert!((x - y).abs() < 1e-6, "AU{}: {x} vs {y}", a.au);
                }
            }
        }
    }
}

#[test]
fn mirrored_landmarks_swap_subcenters() {
    let rules = RuleSet::default();
    let face = LandmarkSet::template(Scheme::P68, 200.0);
    let aus = rules.aus(Scheme::P68).unwrap();
    let a = rules.compute_subcenters(&face, &aus).unwrap();
    let b = rules.compute_subcenters(&rules.mirror_landmarks(&face, 200.0).unwrap(), &aus).unwrap();
    for (x, y) in a.iter().zip(&b) {
        assert!((x.left[0] - (199.0 - y.right[0])).abs() < 1e-6);
        assert!((x.left[1] - y.right[1]).abs() < 1e-6);
        assert!((x.right[0] - (199.0 - y.left[0])).abs() < 1e-6);
    }
}

#[test]
fn double_mirror_is_identity() {
    for p in template_priors() {
        assert_eq!(p.mirror().mirror(), p);
    }
}

#[test]
fn half_scale_rule_arithmetic() {
    let rules = RuleSet::parse(
        r#"
[schemes.49]
inner_eye_corners = [22, 25]
mirror = [9, 8, 7, 6, 5, 4, 3, 2, 1, 0, 10, 11, 12, 13, 18, 17, 16, 15, 14, 28, 27, 26, 25, 30, 29, 22, 21, 20, 19, 24, 23, 37, 36, 35, 34, 33, 32, 31, 42, 41, 40, 39, 38, 45, 44, 43, 48, 47, 46]
rules = [
    { au = 1, left = 4, right = 5, offset = [0.0, -0.5] },
    { au = 7, left = 24, right = 29, offset = [0.0, 0.0] },
]
"#,
    )
    .unwrap();
    let mut points = vec![[0.0, 0.0]; 49];
    points[22] = [80.0, 90.0];
    points[25] = [120.0, 90.0];
    points[4] = [85.0, 70.0];
    points[5] = [115.0, 70.0];
    points[24] = [70.0, 95.0];
    let face = LandmarkSet::new(points).unwrap();
    let sc = rules.compute_subcenters(&face, &[1, 7]).unwrap();
    assert_eq!(sc[0].left, [85.0, 50.0]);
    assert_eq!(sc[0].right, [115.0, 50.0]);
    assert_eq!(sc[1].left, [70.0, 95.0]);
    assert!(rules.compute_subcenters(&face, &[2]).is_err());
}

#[test]
fn random_similarity_recovered() {
    let template = LandmarkSet::template(Scheme::P68, 200.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let t = SimilarityTransform {
            angle: rng.random_range(-1.0..1.0),
            scale: rng.random_range(0.5..2.0),
            translation: [rng.random_range(-30.0..30.0), rng.random_range(-30.0..30.0)],
        };
        let moved = t.inverse().apply_landmarks(&template);
        let fit = fit_similarity(&moved, &template).unwrap();
        assert!((fit.angle - t.angle).abs() < 1e-6);
        assert!((fit.scale - t.scale).abs() < 1e-6);
        let back = fit.apply_landmarks(&moved);
        for (a, b) in back.points.iter().zip(&template.points) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
        let round = fit.inverse().apply_landmarks(&back);
        for (a, b) in round.points.iter().zip(&moved.points) {
            assert!((a[0] - b[0]).abs() < 1e-6 && (a[1] - b[1]).abs() < 1e-6);
        }
    }
}

#[test]
fn degenerate_landmarks_rejected() {
    let template = LandmarkSet::template(Scheme::P49, 200.0);
    let flat = LandmarkSet::new(vec![[3.0, 4.0]; 49]).unwrap();
    assert!(fit_similarity(&flat, &template).is_err());
}

#[test]
fn translation_shifts_landmarks() {
    let face = LandmarkSet::template(Scheme::P49, 40.0);
    let img = Image::new(40, 40);
    let t = SimilarityTransform {
        translation: [5.0, 0.0],
        ..SimilarityTransform::IDENTITY
    };
    let (_, lm) = apply_transform(&img, &face, &t, 40).unwrap();
    for (a, b) in lm.points.iter().zip(&face.points) {
        assert!((a[0] - b[0] - 5.0).abs() < 1e-12);
        assert_eq!(a[1], b[1]);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn combined_map_is_distribution(
        x1 in 0.0f64..1.0, y1 in 0.0f64..1.0,
        x2 in 0.0f64..1.0, y2 in 0.0f64..1.0,
        delta in 0.3f64..5.0, side in 1usize..24,
    ) {
        // centers are clamped onto the grid before the Gaussians are drawn
        let at = |u: f64| u * (side - 1) as f64;
        let m1 = gaussian_prior([at(x1), at(y1)], delta, side).unwrap();
        let m2 = gaussian_prior([at(x2), at(y2)], delta, side).unwrap();
        let p = PriorAttentionMap::combine_and_normalize(1, side, &m1, &m2).unwrap();
        let total: f64 = p.values.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-6);
        prop_assert!(p.values.iter().all(|&v| v >= 0.0));
        let combined: Vec<f64> = m1.iter().zip(&m2).map(|(a, b)| a.max(*b)).collect();
        for i in 0..combined.len() {
            prop_assert!(combined[i] >= m1[i] && combined[i] >= m2[i]);
        }
    }

    #[test]
    fn single_center_decays_with_distance(cx in 0.0f64..10.0, cy in 0.0f64..10.0, delta in 0.5f64..4.0) {
        let side = 11;
        let g = gaussian_prior([cx, cy], delta, side).unwrap();
        let mut cells: Vec<(f64, f64)> = (0..side * side)
            .map(|i| {
                let (r, c) = ((i / side) as f64, (i % side) as f64);
                ((c - cx).powi(2) + (r - cy).powi(2), g[i])
            })
            .collect();
        cells.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
        for w in cells.windows(2) {
            if w[1].0 > w[0].0 + 1e-9 {
                prop_assert!(w[1].1 < w[0].1 || w[1].1 == 0.0);
            }
        }
    }

    #[test]
    fn grid_mapping_is_affine(v in -100.0f64..300.0) {
        prop_assert!((image_to_grid(v) - ((v + 0.5) / 8.0 - 0.5)).abs() < 1e-12);
    }
}
