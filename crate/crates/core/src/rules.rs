//! Sub-center rules, loaded from a TOML rules file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::landmarks::{LandmarkSet, Scheme};

/// Rules shipped with the crate.
pub const DEFAULT_RULES: &str = include_str!("../rules/default.toml");

/// Two anchors of one AU. `offset` is in scale units and applies to the left
/// anchor; the right sub-center uses `[-offset[0], offset[1]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubCenterRule {
    pub au: u32,
    pub left: usize,
    pub right: usize,
    pub offset: [f64; 2],
}

impl SubCenterRule {
    pub fn right_offset(&self) -> [f64; 2] {
        [-self.offset[0], self.offset[1]]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeRules {
    pub inner_eye_corners: [usize; 2],
    pub mirror: Vec<usize>,
    pub rules: Vec<SubCenterRule>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    schemes: BTreeMap<String, SchemeRules>,
}

/// The two sub-centers of one AU, in the landmarks' pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubCenters {
    pub au: u32,
    pub left: [f64; 2],
    pub right: [f64; 2],
}

impl Default for RuleSet {
    fn default() -> Self {
        Self::parse(DEFAULT_RULES).expect("bundled rules are valid")
    }
}

impl RuleSet {
    pub fn parse(text: &str) -> Result<Self> {
        let set: RuleSet = toml::from_str(text).map_err(|e| Error::Config(format!("rules file: {e}")))?;
        set.validate()?;
        Ok(set)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("rules serialize")
    }

    fn validate(&self) -> Result<()> {
        for (name, sr) in &self.schemes {
            let scheme = Scheme::parse(name)?;
            let n = scheme.count();
            if sr.mirror.len() != n {
                return Err(Error::Config(format!(
                    "scheme {name}: mirror permutation has {} entries, expected {n}",
                    sr.mirror.len()
                )));
            }
            for (i, &j) in sr.mirror.iter().enumerate() {
                if j >= n || sr.mirror[j] != i {
                    return Err(Error::Config(format!(
                        "scheme {name}: mirror permutation is not an involution at {i}"
                    )));
                }
            }
            let [a, b] = sr.inner_eye_corners;
            if a >= n || b >= n || sr.mirror[a] != b {
                return Err(Error::Config(format!("scheme {name}: bad inner eye corners {a}, {b}")));
            }
            for rule in &sr.rules {
                if rule.left >= n || rule.right >= n {
                    return Err(Error::Config(format!(
                        "scheme {name}: AU{} anchor out of range",
                        rule.au
                    )));
                }
                if sr.mirror[rule.left] != rule.right {
                    return Err(Error::Config(format!(
                        "scheme {name}: AU{} anchors {} and {} are not mirror images",
                        rule.au, rule.left, rule.right
                    )));
                }
                if rule.offset.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Config(format!("scheme {name}: AU{} offset not finite", rule.au)));
                }
            }
        }
        Ok(())
    }

    pub fn scheme(&self, scheme: Scheme) -> Result<&SchemeRules> {
        self.schemes
            .get(scheme.name())
            .ok_or_else(|| Error::Config(format!("rules file has no scheme {}", scheme.name())))
    }

    /// AU ids with a rule for `scheme`, in file order.
    pub fn aus(&self, scheme: Scheme) -> Result<Vec<u32>> {
        Ok(self.scheme(scheme)?.rules.iter().map(|r| r.au).collect())
    }

    pub fn rule(&self, scheme: Scheme, au: u32) -> Result<&SubCenterRule> {
        self.scheme(scheme)?
            .rules
            .iter()
            .find(|r| r.au == au)
            .ok_or_else(|| Error::Config(format!("no sub-center rule for AU{au} in scheme {}", scheme.name())))
    }

    /// Horizontal flip with the rules file's permutation.
    pub fn mirror_landmarks(&self, landmarks: &LandmarkSet, width: f64) -> Result<LandmarkSet> {
        let perm = &self.scheme(landmarks.scheme)?.mirror;
        let points = perm
            .iter()
            .map(|&src| {
                let [x, y] = landmarks.points[src];
                [width - 1.0 - x, y]
            })
            .collect();
        Ok(LandmarkSet {
            scheme: landmarks.scheme,
            points,
        })
    }

    /// Sub-centers of the requested AUs on an aligned face (eye line horizontal).
    pub fn compute_subcenters(&self, landmarks: &LandmarkSet, aus: &[u32]) -> Result<Vec<SubCenters>> {
        let sr = self.scheme(landmarks.scheme)?;
        let [a, b] = sr.inner_eye_corners;
        let (p, q) = (landmarks.points[a], landmarks.points[b]);
        let scale = (p[0] - q[0]).hypot(p[1] - q[1]);
        aus.iter()
            .map(|&au| {
                let rule = self.rule(landmarks.scheme, au)?;
                let place = |anchor: usize, off: [f64; 2]| {
                    let [x, y] = landmarks.points[anchor];
                    [x + off[0] * scale, y + off[1] * scale]
                };
                Ok(SubCenters {
                    au,
                    left: place(rule.left, rule.offset),
                    right: place(rule.right, rule.right_offset()),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_rules(offset: [f64; 2]) -> RuleSet {
        let mirror: Vec<usize> = Scheme::P49.mirror_permutation();
        let text = format!(
            "[schemes.49]\ninner_eye_corners = [22, 25]\nmirror = {mirror:?}\nrules = [{{ au = 1, left = 4, right = 5, offset = [{:?}, {:?}] }}]\n",
            offset[0], offset[1]
        );
        RuleSet::parse(&text).unwrap()
    }

    fn face_with_scale(scale: f64) -> LandmarkSet {
        let mut t = LandmarkSet::template(Scheme::P49, 200.0);
        let s = t.scale();
        let c = [100.0, 100.0];
        for p in &mut t.points {
            *p = [c[0] + (p[0] - c[0]) * scale / s, c[1] + (p[1] - c[1]) * scale / s];
        }
        t
    }

    #[test]
    fn bundled_rules_cover_every_scheme() {
        let rules = RuleSet::default();
        for s in [Scheme::P49, Scheme::P66, Scheme::P68] {
            let sr = rules.scheme(s).unwrap();
            assert_eq!(sr.mirror, s.mirror_permutation());
            let (a, b) = s.inner_eye_corners();
            assert_eq!(sr.inner_eye_corners, [a, b]);
            assert_eq!(rules.aus(s).unwrap().len(), 13);
        }
    }

    #[test]
    fn zero_offset_lands_on_anchor() {
        let rules = unit_rules([0.0, 0.0]);
        let face = face_with_scale(40.0);
        let sc = rules.compute_subcenters(&face, &[1]).unwrap()[0];
        assert_eq!(sc.left, face.points[4]);
        assert_eq!(sc.right, face.points[5]);
    }

    #[test]
    fn half_scale_above_anchor() {
        let rules = unit_rules([0.0, -0.5]);
        let face = face_with_scale(40.0);
        assert!((face.scale() - 40.0).abs() < 1e-9);
        let sc = rules.compute_subcenters(&face, &[1]).unwrap()[0];
        assert!((sc.left[1] - (face.points[4][1] - 20.0)).abs() < 1e-9);
        assert!((sc.left[0] - face.points[4][0]).abs() < 1e-12);
    }

    #[test]
    fn missing_au_is_a_configuration_error() {
        let rules = unit_rules([0.0, 0.0]);
        let face = face_with_scale(40.0);
        assert!(matches!(rules.compute_subcenters(&face, &[99]), Err(Error::Config(_))));
    }

    #[test]
    fn asymmetric_anchor_pair_is_rejected() {
        let mirror: Vec<usize> = Scheme::P49.mirror_permutation();
        let text = format!(
            "[schemes.49]\ninner_eye_corners = [22, 25]\nmirror = {mirror:?}\nrules = [{{ au = 1, left = 4, right = 6, offset = [0.0, 0.0] }}]\n"
        );
        assert!(RuleSet::parse(&text).is_err());
    }

    #[test]
    fn mirrored_face_swaps_subcenters() {
        let rules = RuleSet::default();
        let mut face = LandmarkSet::template(Scheme::P49, 200.0);
        // break the template's symmetry
        for (i, p) in face.points.iter_mut().enumerate() {
            p[0] += (i as f64 * 0.37).sin() * 2.0;
            p[1] += (i as f64 * 0.91).cos() * 2.0;
        }
        let aus = rules.aus(Scheme::P49).unwrap();
        let direct = rules.compute_subcenters(&face, &aus).unwrap();
        let flipped = rules
            .compute_subcenters(&rules.mirror_landmarks(&face, 200.0).unwrap(), &aus)
            .unwrap();
        for (d, f) in direct.iter().zip(&flipped) {
            assert!((f.left[0] - (199.0 - d.right[0])).abs() < 1e-6);
            assert!((f.left[1] - d.right[1]).abs() < 1e-6);
            assert!((f.right[0] - (199.0 - d.left[0])).abs() < 1e-6);
            assert!((f.right[1] - d.left[1]).abs() < 1e-6);
        }
    }
}
