use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::ModelError;

/// Labelled feature vectors. All vectors share one width.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// Parameters of the bundled synthetic blob generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobSpec {
    pub samples: usize,
    pub classes: usize,
    pub dims: usize,
    /// Per-coordinate standard deviation around each class center.
    pub spread: f64,
    /// Class centers are drawn uniformly from `[-center_box, center_box]^dims`.
    pub center_box: f64,
    pub seed: u64,
}

impl Default for BlobSpec {
    fn default() -> Self {
        BlobSpec {
            samples: 200,
            classes: 2,
            dims: 2,
            spread: 1.0,
            center_box: 4.0,
            seed: 42,
        }
    }
}

impl Dataset {
    pub fn new(
        features: Vec<Vec<f64>>,
        labels: Vec<usize>,
        num_classes: usize,
    ) -> Result<Self, ModelError> {
        let ds = Dataset {
            features,
            labels,
            num_classes,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.features.len() != self.labels.len() {
            return Err(ModelError::Structure(format!(
                "{} feature rows but {} labels",
                self.features.len(),
                self.labels.len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&l| l >= self.num_classes) {
            return Err(ModelError::Structure(format!(
                "label {bad} outside [0, {})",
                self.num_classes
            )));
        }
        if let Some(first) = self.features.first() {
            if self.features.iter().any(|f| f.len() != first.len()) {
                return Err(ModelError::Structure("ragged feature rows".into()));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dims(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    /// Isotropic Gaussian blobs, one per class, labels assigned round-robin.
    pub fn gaussian_blobs(spec: BlobSpec) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let centers: Vec<Vec<f64>> = (0..spec.classes)
            .map(|_| {
                (0..spec.dims)
                    .map(|_| rng.gen_range(-spec.center_box..=spec.center_box))
                    .collect()
            })
            .collect();
        let noise = Normal::new(0.0, spec.spread).expect("finite spread");
        let mut features = Vec::with_capacity(spec.samples);
        let mut labels = Vec::with_capacity(spec.samples);
        for i in 0..spec.samples {
            let class = i % spec.classes;
            features.push(
                centers[class]
                    .iter()
                    .map(|c| c + noise.sample(&mut rng))
                    .collect(),
            );
            labels.push(class);
        }
        Dataset {
            features,
            labels,
            num_classes: spec.classes,
        }
    }

    /// Deterministic shuffled split; `train_ratio` must lie in (0, 1).
    pub fn split(&self, train_ratio: f64, seed: u64) -> Result<(Dataset, Dataset), ModelError> {
        if !(train_ratio > 0.0 && train_ratio < 1.0) {
            return Err(ModelError::Structure(format!(
                "split ratio {train_ratio} outside (0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let cut = ((self.len() as f64) * train_ratio).round() as usize;
        let cut = cut.clamp(usize::from(self.len() > 1), self.len().saturating_sub(1));
        Ok((self.subset(&order[..cut]), self.subset(&order[cut..])))
    }

    /// Deals examples round-robin after a seeded shuffle, giving `parts` IID shards.
    pub fn shard(&self, parts: usize, seed: u64) -> Vec<Dataset> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        (0..parts)
            .map(|p| {
                let idx: Vec<usize> = order.iter().copied().skip(p).step_by(parts).collect();
                self.subset(&idx)
            })
            .collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            features: idx.iter().map(|&i| self.features[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Reads CSV with header `label,f0,f1,...`.
    pub fn from_csv_reader<R: std::io::Read>(
        reader: R,
        num_classes: Option<usize>,
    ) -> Result<Self, ModelError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers().map_err(csv_err)?.clone();
        if headers.get(0) != Some("label") {
            return Err(ModelError::Format(
                "dataset header must start with `label`".into(),
            ));
        }
        for (i, h) in headers.iter().skip(1).enumerate() {
            if h != format!("f{i}") {
                return Err(ModelError::Format(format!(
                    "expected column `f{i}`, found `{h}`"
                )));
            }
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record.map_err(csv_err)?;
            let parse_err = |col: usize| {
                ModelError::Format(format!("row {}: cannot parse column {col}", line + 2))
            };
            let label: usize = record[0].trim().parse().map_err(|_| parse_err(0))?;
            let row = record
                .iter()
                .skip(1)
                .enumerate()
                .map(|(c, v)| v.trim().parse::<f64>().map_err(|_| parse_err(c + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            labels.push(label);
            features.push(row);
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Dataset::new(features, labels, classes)
    }

    pub fn load_csv(path: &Path, num_classes: Option<usize>) -> Result<Self, ModelError> {
        Self::from_csv_reader(std::fs::File::open(path)?, num_classes)
    }

    pub fn to_csv_writer<W: std::io::Write>(&self, writer: W) -> Result<(), ModelError> {
        let mut wtr = csv::Writer::from_writer(writer);
        let mut header = vec!["label".to_string()];
        header.extend((0..self.dims()).map(|i| format!("f{i}")));
        wtr.write_record(&header).map_err(csv_err)?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut row = vec![y.to_string()];
            row.extend(x.iter().map(|v| format!("{v:?}")));
            wtr.write_record(&row).map_err(csv_err)?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<(), ModelError> {
        self.to_csv_writer(std::fs::File::create(path)?)
    }
}

fn csv_err(e: csv::Error) -> ModelError {
    ModelError::Format(e.to_string())
}
