//! Synthetic AU datasets: blobs at landmark-derived sub-centers, optional
//! label-correlated confounders.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, DatasetMeta, Sample};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::{LandmarkSet, Scheme};
use crate::rules::{RuleSet, SubCenters};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoRuleKind {
    /// `a` present implies `b` present.
    Requires,
    /// `a` and `b` never both present.
    Excludes,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CoRule {
    pub a: u32,
    pub b: u32,
    pub kind: CoRuleKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfounderMode {
    None,
    /// Global color cast.
    Tint,
    /// Bright square at a fixed location away from every sub-center.
    Patch,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Confounder {
    pub mode: ConfounderMode,
    /// The AU whose label the confounder follows.
    pub au: u32,
    /// Probability of the confounder when the AU is present.
    pub p_present: f64,
    /// Probability of the confounder when the AU is absent.
    pub p_absent: f64,
    pub strength: f64,
}

impl Confounder {
    pub const NONE: Self = Self {
        mode: ConfounderMode::None,
        au: 0,
        p_present: 0.0,
        p_absent: 0.0,
        strength: 0.0,
    };
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub image_side: usize,
    pub scheme: Scheme,
    pub aus: Vec<u32>,
    pub occurrence: Vec<f64>,
    /// Gaussian blob standard deviation in pixels.
    pub blob_radius: f64,
    pub blob_amplitude: f64,
    pub background: f64,
    /// Contrast of the faint landmark dots that give positional cues.
    pub face_contrast: f64,
    pub noise: f64,
    pub co_rules: Vec<CoRule>,
    pub confounder: Confounder,
}

impl SynthSpec {
    pub fn desk(aus: Vec<u32>) -> Self {
        let m = aus.len();
        Self {
            image_side: 56,
            scheme: Scheme::P49,
            aus,
            occurrence: vec![0.4; m],
            blob_radius: 3.5,
            blob_amplitude: 0.5,
            background: 0.3,
            face_contrast: 0.1,
            noise: 0.05,
            co_rules: Vec::new(),
            confounder: Confounder::NONE,
        }
    }

    pub fn template(&self) -> LandmarkSet {
        LandmarkSet::template(self.scheme, self.image_side as f64)
    }

    pub fn subcenters(&self, rules: &RuleSet) -> Result<Vec<SubCenters>> {
        rules.compute_subcenters(&self.template(), &self.aus)
    }

    fn index(&self, au: u32) -> Result<usize> {
        self.aus
            .iter()
            .position(|&a| a == au)
            .ok_or_else(|| Error::Spec(format!("rule refers to AU{au}, which is not generated")))
    }

    pub fn validate(&self, rules: &RuleSet) -> Result<()> {
        if self.occurrence.len() != self.aus.len() {
            return Err(Error::Spec(format!(
                "{} occurrence probabilities for {} AUs",
                self.occurrence.len(),
                self.aus.len()
            )));
        }
        let prob_ok = |p: f64| (0.0..=1.0).contains(&p);
        if !self.occurrence.iter().all(|&p| prob_ok(p)) {
            return Err(Error::Spec("occurrence probabilities must lie in [0, 1]".into()));
        }
        let side = self.image_side as f64;
        for sc in self.subcenters(rules)? {
            for p in [sc.left, sc.right] {
                if !(0.0..side).contains(&p[0]) || !(0.0..side).contains(&p[1]) {
                    return Err(Error::Spec(format!("AU{} sub-center {p:?} lies outside the image", sc.au)));
                }
            }
        }
        if self.confounder.mode != ConfounderMode::None {
            self.index(self.confounder.au)?;
            if !prob_ok(self.confounder.p_present) || !prob_ok(self.confounder.p_absent) {
                return Err(Error::Spec("confounder probabilities must lie in [0, 1]".into()));
            }
        }
        self.closures().map(|_| ())
    }

    /// Transitive `requires` closure per AU, rejecting contradictions.
    fn closures(&self) -> Result<Vec<Vec<bool>>> {
        let m = self.aus.len();
        let mut req = vec![vec![false; m]; m];
        let mut excl = vec![vec![false; m]; m];
        for r in &self.co_rules {
            let (a, b) = (self.index(r.a)?, self.index(r.b)?);
            if a == b {
                return Err(Error::Spec(format!("AU{} has a rule with itself", r.a)));
            }
            match r.kind {
                CoRuleKind::Requires => req[a][b] = true,
                CoRuleKind::Excludes => {
                    excl[a][b] = true;
                    excl[b][a] = true;
                }
            }
        }
        let mut clo = req;
        for i in 0..m {
            clo[i][i] = true;
        }
        for k in 0..m {
            for i in 0..m {
                if clo[i][k] {
                    for j in 0..m {
                        if clo[k][j] {
                            clo[i][j] = true;
                        }
                    }
                }
            }
        }
        for i in 0..m {
            for x in 0..m {
                for y in 0..m {
                    if clo[i][x] && clo[i][y] && excl[x][y] {
                        return Err(Error::Spec(format!(
                            "AU{} requires both AU{} and AU{}, which exclude each other",
                            self.aus[i], self.aus[x], self.aus[y]
                        )));
                    }
                }
            }
        }
        Ok(clo)
    }

    /// Top-left corner and side of the confounder patch.
    pub fn patch_box(&self) -> (usize, usize, usize) {
        let s = self.image_side;
        let side = (s / 10).max(2);
        (s * 3 / 10, s * 45 / 100, side)
    }
}

fn draw_labels(spec: &SynthSpec, clo: &[Vec<bool>], rng: &mut ChaCha8Rng) -> Vec<u8> {
    let m = spec.aus.len();
    let mut on: Vec<bool> = spec.occurrence.iter().map(|&p| rng.random_bool(p)).collect();
    for i in 0..m {
        if on[i] {
            for j in 0..m {
                if clo[i][j] {
                    on[j] = true;
                }
            }
        }
    }
    for r in spec.co_rules.iter().filter(|r| r.kind == CoRuleKind::Excludes) {
        let (a, b) = (spec.index(r.a).unwrap(), spec.index(r.b).unwrap());
        if on[a] && on[b] {
            // drop b and everything that needs it
            for i in 0..m {
                if clo[i][b] {
                    on[i] = false;
                }
            }
        }
    }
    on.into_iter().map(u8::from).collect()
}

fn add_blob(img: &mut Image, center: [f64; 2], radius: f64, amp: f64) {
    let reach = (3.0 * radius).ceil() as i64;
    let (cx, cy) = (center[0].round() as i64, center[1].round() as i64);
    for y in (cy - reach).max(0)..=(cy + reach).min(img.height as i64 - 1) {
        for x in (cx - reach).max(0)..=(cx + reach).min(img.width as i64 - 1) {
            let d2 = (x as f64 - center[0]).powi(2) + (y as f64 - center[1]).powi(2);
            let v = (amp * (-d2 / (2.0 * radius * radius)).exp()) as f32;
            for c in 0..3 {
                let i = img.idx(c, y as usize, x as usize);
                img.data[i] += v;
            }
        }
    }
}

/// Generates `n` samples. Identical `(spec, n, seed)` give identical datasets.
pub fn synth_generate(spec: &SynthSpec, rules: &RuleSet, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::Usage("sample count must be positive".into()));
    }
    spec.validate(rules)?;
    let clo = spec.closures()?;
    let centers = spec.subcenters(rules)?;
    let template = spec.template();
    let side = spec.image_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).map_err(|e| Error::Spec(e.to_string()))?;
    let conf_idx = spec.index(spec.confounder.au).ok();

    let mut base = Image::new(side, side);
    base.data.fill(spec.background as f32);
    if spec.face_contrast > 0.0 {
        for p in &template.points {
            add_blob(&mut base, *p, 0.8, -spec.face_contrast);
        }
    }

    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let labels = draw_labels(spec, &clo, &mut rng);
        let mut img = base.clone();
        for (j, sc) in centers.iter().enumerate() {
            if labels[j] == 1 {
                add_blob(&mut img, sc.left, spec.blob_radius, spec.blob_amplitude);
                add_blob(&mut img, sc.right, spec.blob_radius, spec.blob_amplitude);
            }
        }
        let cf = &spec.confounder;
        if let (Some(j), true) = (conf_idx, cf.mode != ConfounderMode::None) {
            let p = if labels[j] == 1 { cf.p_present } else { cf.p_absent };
            if rng.random_bool(p) {
                match cf.mode {
                    ConfounderMode::Tint => {
                        let plane = side * side;
                        for v in &mut img.data[..plane] {
                            *v += cf.strength as f32;
                        }
                        for v in &mut img.data[2 * plane..] {
                            *v -= cf.strength as f32;
                        }
                    }
                    ConfounderMode::Patch => {
                        let (x0, y0, s) = spec.patch_box();
                        for c in 0..3 {
                            for y in y0..y0 + s {
                                for x in x0..x0 + s {
                                    let k = img.idx(c, y, x);
                                    img.data[k] += cf.strength as f32;
                                }
                            }
                        }
                    }
                    ConfounderMode::None => {}
                }
            }
        }
        if spec.noise > 0.0 {
            for v in &mut img.data {
                *v += noise.sample(&mut rng) as f32;
            }
        }
        for v in &mut img.data {
            *v = v.clamp(0.0, 1.0);
        }
        samples.push(Sample {
            id: format!("{i:06}"),
            image: img,
            landmarks: template.clone(),
            labels,
        });
    }
    Ok(Dataset {
        meta: DatasetMeta {
            scheme: spec.scheme,
            aus: spec.aus.clone(),
            image_side: side,
        },
        samples,
    })
}

/// Predicts each AU by the mean brightness excess around its sub-centers.
pub fn pixel_oracle(spec: &SynthSpec, rules: &RuleSet, data: &Dataset) -> Result<Vec<Vec<f64>>> {
    let centers = spec.subcenters(rules)?;
    let r = spec.blob_radius;
    let mean_at = |img: &Image, c: [f64; 2]| -> f64 {
        let mut acc = 0.0;
        let mut n = 0.0;
        let reach = r.ceil() as i64;
        for dy in -reach..=reach {
            for dx in -reach..=reach {
                let (x, y) = (c[0].round() as i64 + dx, c[1].round() as i64 + dy);
                if (dx * dx + dy * dy) as f64 > r * r || x < 0 || y < 0 || x >= img.width as i64 || y >= img.height as i64 {
                    continue;
                }
                for ch in 0..3 {
                    acc += img.get(ch, y as usize, x as usize) as f64;
                    n += 1.0;
                }
            }
        }
        acc / n
    };
    // brightness a present blob adds at a mean disk pixel, roughly
    let half = 0.5 * spec.blob_amplitude * 0.6;
    Ok(data
        .samples
        .iter()
        .map(|s| {
            centers
                .iter()
                .map(|sc| {
                    let excess = 0.5 * (mean_at(&s.image, sc.left) + mean_at(&s.image, sc.right)) - spec.background;
                    if excess > half {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect())
}
