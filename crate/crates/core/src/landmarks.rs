//! Facial landmark sets in the 49-, 66- and 68-point conventions.
//!
//! Every scheme is a subset of the 68-point layout: 66 drops the two inner
//! mouth corners, 49 additionally drops the 17 jaw points. Index tables and
//! the mirror permutation are derived from the 68-point definitions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Scheme {
    #[serde(rename = "49")]
    P49,
    #[serde(rename = "66")]
    P66,
    #[serde(rename = "68")]
    P68,
}

const INNER_MOUTH_CORNERS_68: [usize; 2] = [60, 64];

/// Left-right counterpart of every 68-point landmark.
const MIRROR_68: [usize; 68] = [
    16, 15, 14, 13, 12, 11, 10, 9, 8, 7, 6, 5, 4, 3, 2, 1, 0, 26, 25, 24, 23, 22, 21, 20, 19, 18,
    17, 27, 28, 29, 30, 35, 34, 33, 32, 31, 45, 44, 43, 42, 47, 46, 39, 38, 37, 36, 41, 40, 54, 53,
    52, 51, 50, 49, 48, 59, 58, 57, 56, 55, 64, 63, 62, 61, 60, 67, 66, 65,
];

/// Left-right symmetric mean face in unit coordinates (y grows downwards).
const MEAN_SHAPE_68: [(f64, f64); 68] = [
    (0.054023, 0.330671), (0.056171, 0.449357),
    (0.067837, 0.568943), (0.091373, 0.686734),
    (0.136948, 0.796418), (0.207673, 0.892678),
    (0.293778, 0.974669), (0.390511, 1.041555),
    (0.500000, 1.060804), (0.609489, 1.041555),
    (0.706222, 0.974669), (0.792327, 0.892678),
    (0.863052, 0.796418), (0.908627, 0.686734),
    (0.932163, 0.568943), (0.943829, 0.449357),
    (0.945977, 0.330671), (0.146545, 0.242223),
    (0.202284, 0.198542), (0.276916, 0.187364),
    (0.353654, 0.199753), (0.426424, 0.230639),
    (0.573576, 0.230639), (0.646346, 0.199753),
    (0.723084, 0.187364), (0.797716, 0.198542),
    (0.853455, 0.242223), (0.500000, 0.318635),
    (0.500000, 0.396200), (0.500000, 0.473798),
    (0.500000, 0.553158), (0.413324, 0.602816),
    (0.454814, 0.619780), (0.500000, 0.634268),
    (0.545186, 0.619780), (0.586676, 0.602816),
    (0.234777, 0.326179), (0.281345, 0.298684),
    (0.338338, 0.299737), (0.386196, 0.336407),
    (0.333754, 0.346861), (0.278240, 0.346164),
    (0.613804, 0.336407), (0.661662, 0.299737),
    (0.718655, 0.298684), (0.765223, 0.326179),
    (0.721760, 0.346164), (0.666246, 0.346861),
    (0.326826, 0.742804), (0.389696, 0.717355),
    (0.453923, 0.706125), (0.500000, 0.717092),
    (0.546077, 0.706125), (0.610304, 0.717355),
    (0.673174, 0.742804), (0.612826, 0.807641),
    (0.549998, 0.836471), (0.500000, 0.841706),
    (0.450002, 0.836471), (0.387174, 0.807641),
    (0.353838, 0.747078), (0.453449, 0.744231),
    (0.500000, 0.748924), (0.546551, 0.744231),
    (0.646162, 0.747078), (0.547489, 0.777543),
    (0.500000, 0.783371), (0.452511, 0.777543),
];

impl Scheme {
    pub fn count(self) -> usize {
        match self {
            Scheme::P49 => 49,
            Scheme::P66 => 66,
            Scheme::P68 => 68,
        }
    }

    pub fn from_count(n: usize) -> Result<Self> {
        match n {
            49 => Ok(Scheme::P49),
            66 => Ok(Scheme::P66),
            68 => Ok(Scheme::P68),
            _ => Err(Error::Geometry(format!("no landmark scheme has {n} points"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Scheme::P49 => "49",
            Scheme::P66 => "66",
            Scheme::P68 => "68",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::from_count(s.trim().parse().map_err(|_| Error::Geometry(format!("bad landmark scheme {s:?}")))?)
    }

    fn contains_68(self, i: usize) -> bool {
        match self {
            Scheme::P68 => i < 68,
            Scheme::P66 => i < 68 && !INNER_MOUTH_CORNERS_68.contains(&i),
            Scheme::P49 => (17..68).contains(&i) && !INNER_MOUTH_CORNERS_68.contains(&i),
        }
    }

    /// The 68-point indices of this scheme, in scheme order.
    pub fn canonical_indices(self) -> Vec<usize> {
        (0..68).filter(|&i| self.contains_68(i)).collect()
    }

    /// Index in this scheme of a 68-point landmark, if the scheme keeps it.
    pub fn from_68(self, i: usize) -> Option<usize> {
        self.canonical_indices().iter().position(|&c| c == i)
    }

    /// `perm[i]` is the landmark that lands on slot `i` after a horizontal flip.
    pub fn mirror_permutation(self) -> Vec<usize> {
        self.canonical_indices()
            .iter()
            .map(|&c| self.from_68(MIRROR_68[c]).expect("schemes are mirror-closed"))
            .collect()
    }

    /// Indices of the two inner eye corners (image-left first).
    pub fn inner_eye_corners(self) -> (usize, usize) {
        (self.from_68(39).expect("eyes kept"), self.from_68(42).expect("eyes kept"))
    }

    /// Indices of the image-left and image-right eye contours.
    pub fn eyes(self) -> ([usize; 6], [usize; 6]) {
        let map = |start: usize| std::array::from_fn(|k| self.from_68(start + k).expect("eyes kept"));
        (map(36), map(42))
    }
}

/// A face's landmark coordinates in pixels, pixel centers at integers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    pub scheme: Scheme,
    pub points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        let scheme = Scheme::from_count(points.len())?;
        if points.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Geometry("non-finite landmark coordinate".into()));
        }
        Ok(Self { scheme, points })
    }

    pub fn from_flat(coords: &[f64]) -> Result<Self> {
        if coords.len() % 2 != 0 {
            return Err(Error::Geometry(format!("odd coordinate count {}", coords.len())));
        }
        Self::new(coords.chunks(2).map(|p| [p[0], p[1]]).collect())
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flatten().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Mean face of `scheme` placed in a `side` x `side` image: the inner
    /// (jaw-free) face spans 70% of the width, centered, eye line horizontal.
    pub fn template(scheme: Scheme, side: f64) -> Self {
        let inner = Scheme::P49.canonical_indices();
        let (mut lo, mut hi) = ([f64::MAX; 2], [f64::MIN; 2]);
        for &i in &inner {
            let (x, y) = MEAN_SHAPE_68[i];
            lo = [lo[0].min(x), lo[1].min(y)];
            hi = [hi[0].max(x), hi[1].max(y)];
        }
        let scale = 0.7 * side / (hi[0] - lo[0]);
        let center = [(lo[0] + hi[0]) / 2.0, (lo[1] + hi[1]) / 2.0];
        let mid = (side - 1.0) / 2.0;
        let points = scheme
            .canonical_indices()
            .into_iter()
            .map(|i| {
                let (x, y) = MEAN_SHAPE_68[i];
                [(x - center[0]) * scale + mid, (y - center[1]) * scale + mid]
            })
            .collect();
        Self { scheme, points }
    }

    /// Horizontal flip inside an image of the given width, with slots
    /// re-indexed so that each index keeps its anatomical meaning.
    pub fn mirrored(&self, width: f64) -> Self {
        let perm = self.scheme.mirror_permutation();
        let points = perm
            .iter()
            .map(|&src| {
                let [x, y] = self.points[src];
                [width - 1.0 - x, y]
            })
            .collect();
        Self {
            scheme: self.scheme,
            points,
        }
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            scheme: self.scheme,
            points: self.points.iter().map(|&[x, y]| [x + dx, y + dy]).collect(),
        }
    }

    /// Distance between the two inner eye corners.
    pub fn scale(&self) -> f64 {
        let (a, b) = self.scheme.inner_eye_corners();
        let (p, q) = (self.points[a], self.points[b]);
        (p[0] - q[0]).hypot(p[1] - q[1])
    }

    pub fn eye_centers(&self) -> ([f64; 2], [f64; 2]) {
        let (l, r) = self.scheme.eyes();
        let centroid = |idx: [usize; 6]| {
            let (sx, sy) = idx.iter().fold((0.0, 0.0), |(sx, sy), &i| {
                (sx + self.points[i][0], sy + self.points[i][1])
            });
            [sx / 6.0, sy / 6.0]
        };
        (centroid(l), centroid(r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scheme_subsets_have_declared_sizes() {
        for s in [Scheme::P49, Scheme::P66, Scheme::P68] {
            assert_eq!(s.canonical_indices().len(), s.count());
            let perm = s.mirror_permutation();
            for (i, &j) in perm.iter().enumerate() {
                assert_eq!(perm[j], i, "{s:?} mirror must be an involution");
            }
        }
        assert_eq!(Scheme::P49.inner_eye_corners(), (22, 25));
    }

    #[test]
    fn template_is_mirror_symmetric_with_level_eyes() {
        for s in [Scheme::P49, Scheme::P66, Scheme::P68] {
            let t = LandmarkSet::template(s, 200.0);
            let m = t.mirrored(200.0);
            for (a, b) in t.points.iter().zip(&m.points) {
                assert!((a[0] - b[0]).abs() < 1e-9 && (a[1] - b[1]).abs() < 1e-9);
            }
            let (l, r) = t.eye_centers();
            assert!((l[1] - r[1]).abs() < 1e-9);
        }
    }

    #[test]
    fn wrong_point_count_is_rejected() {
        assert!(LandmarkSet::new(vec![[0.0, 0.0]; 50]).is_err());
        assert!(LandmarkSet::new(vec![[f64::NAN, 0.0]; 49]).is_err());
    }
}
