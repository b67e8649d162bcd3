//! On-disk dataset layout: `meta.toml`, `images/*.png`, `landmarks.csv`, `labels.csv`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::landmarks::{LandmarkSet, Scheme};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scheme: Scheme,
    pub aus: Vec<u32>,
    pub image_side: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: Image,
    pub landmarks: LandmarkSet,
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub meta: DatasetMeta,
    pub samples: Vec<Sample>,
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::Data(format!("{}: {e}", path.display()))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<Vec<u8>> {
        self.samples.iter().map(|s| s.labels.clone()).collect()
    }

    pub fn load(root: &Path) -> Result<Self> {
        let meta_path = root.join("meta.toml");
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta: DatasetMeta =
            toml::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", meta_path.display())))?;
        let m = meta.aus.len();
        let n_pts = meta.scheme.count();

        let lm_path = root.join("landmarks.csv");
        let mut landmarks = Vec::new();
        let mut reader = csv::Reader::from_path(&lm_path).map_err(|e| csv_err(&lm_path, e))?;
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_err(&lm_path, e))?;
            if rec.len() != 1 + 2 * n_pts {
                return Err(Error::Data(format!(
                    "{}: row has {} fields, expected {}",
                    lm_path.display(),
                    rec.len(),
                    1 + 2 * n_pts
                )));
            }
            let coords: Vec<f64> = rec
                .iter()
                .skip(1)
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Data(format!("{}: {e}", lm_path.display())))?;
            landmarks.push((rec[0].to_string(), LandmarkSet::from_flat(&coords)?));
        }

        let lab_path = root.join("labels.csv");
        let mut labels = Vec::new();
        let mut reader = csv::Reader::from_path(&lab_path).map_err(|e| csv_err(&lab_path, e))?;
        for rec in reader.records() {
            let rec = rec.map_err(|e| csv_err(&lab_path, e))?;
            if rec.len() != 1 + m {
                return Err(Error::Data(format!(
                    "{}: row has {} label columns, meta declares {m} AUs",
                    lab_path.display(),
                    rec.len() - 1
                )));
            }
            let row: Vec<u8> = rec
                .iter()
                .skip(1)
                .map(|v| match v.trim() {
                    "0" => Ok(0),
                    "1" => Ok(1),
                    other => Err(Error::Data(format!("{}: label {other:?} is not 0 or 1", lab_path.display()))),
                })
                .collect::<Result<_>>()?;
            labels.push((rec[0].to_string(), row));
        }
        if landmarks.len() != labels.len() {
            return Err(Error::Data(format!(
                "{} landmark rows but {} label rows",
                landmarks.len(),
                labels.len()
            )));
        }

        let mut samples = Vec::with_capacity(labels.len());
        for ((id, lm), (lid, lab)) in landmarks.into_iter().zip(labels) {
            if id != lid {
                return Err(Error::Data(format!("sample order differs: {id} vs {lid}")));
            }
            if lm.scheme != meta.scheme {
                return Err(Error::Data(format!("sample {id} has {} landmarks", lm.len())));
            }
            let image = Image::load(&image_path(root, &id))?;
            if image.width != meta.image_side || image.height != meta.image_side {
                return Err(Error::Data(format!(
                    "sample {id} is {}x{}, meta declares {}",
                    image.width, image.height, meta.image_side
                )));
            }
            samples.push(Sample {
                id,
                image,
                landmarks: lm,
                labels: lab,
            });
        }
        Ok(Self { meta, samples })
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let images = root.join("images");
        fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
        let meta_path = root.join("meta.toml");
        let meta = toml::to_string(&self.meta).map_err(|e| Error::Data(e.to_string()))?;
        fs::write(&meta_path, meta).map_err(|e| Error::io(&meta_path, e))?;

        let lm_path = root.join("landmarks.csv");
        let mut w = csv::Writer::from_path(&lm_path).map_err(|e| csv_err(&lm_path, e))?;
        let mut header = vec!["sample_id".to_string()];
        for i in 1..=self.meta.scheme.count() {
            header.push(format!("x{i}"));
            header.push(format!("y{i}"));
        }
        w.write_record(&header).map_err(|e| csv_err(&lm_path, e))?;
        for s in &self.samples {
            let mut row = vec![s.id.clone()];
            row.extend(s.landmarks.to_flat().iter().map(|v| format!("{v}")));
            w.write_record(&row).map_err(|e| csv_err(&lm_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&lm_path, e))?;

        let lab_path = root.join("labels.csv");
        let mut w = csv::Writer::from_path(&lab_path).map_err(|e| csv_err(&lab_path, e))?;
        let mut header = vec!["sample_id".to_string()];
        header.extend(self.meta.aus.iter().map(|a| format!("AU{a}")));
        w.write_record(&header).map_err(|e| csv_err(&lab_path, e))?;
        for s in &self.samples {
            let mut row = vec![s.id.clone()];
            row.extend(s.labels.iter().map(|l| l.to_string()));
            w.write_record(&row).map_err(|e| csv_err(&lab_path, e))?;
            s.image.save(&image_path(root, &s.id))?;
        }
        w.flush().map_err(|e| Error::io(&lab_path, e))
    }
}

fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}
