use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

/// Rows of `(features, label)` with uniform feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledDataset {
    features: Vec<Vec<f64>>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabelledDataset {
    pub fn new(features: Vec<Vec<f64>>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::InvalidDataset(format!(
                "{} feature rows but {} labels",
                features.len(),
                labels.len()
            )));
        }
        if let Some(first) = features.first() {
            let d = first.len();
            if let Some(i) = features.iter().position(|r| r.len() != d) {
                return Err(Error::InvalidDataset(format!(
                    "row {i} has a different feature count"
                )));
            }
            if features.iter().flatten().any(|x| !x.is_finite()) {
                return Err(Error::InvalidDataset("non-finite feature value".into()));
            }
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::InvalidDataset(format!(
                "row {i} has label {y}, outside 0..{num_classes}"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
        })
    }

    /// Reads CSV with a header row: feature columns then an integer label.
    pub fn from_csv_reader<R: Read>(reader: R, num_classes: Option<usize>) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let header_len = rdr.headers()?.len();
        if header_len < 2 {
            return Err(Error::InvalidDataset(
                "need at least one feature column and a label column".into(),
            ));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (i, record) in rdr.records().enumerate() {
            let record = record?;
            let parse = |s: &str| {
                s.parse::<f64>().map_err(|_| {
                    Error::InvalidDataset(format!("row {i}: cannot parse '{s}' as a number"))
                })
            };
            let row = record
                .iter()
                .take(header_len - 1)
                .map(parse)
                .collect::<Result<Vec<_>>>()?;
            let label_text = &record[header_len - 1];
            let label = label_text.parse::<usize>().map_err(|_| {
                Error::InvalidDataset(format!(
                    "row {i}: label '{label_text}' is not a class index"
                ))
            })?;
            features.push(row);
            labels.push(label);
        }
        let classes = num_classes.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        Self::new(features, labels, classes)
    }

    pub fn from_csv_path(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, num_classes)
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut wtr = csv::Writer::from_writer(Vec::new());
        let mut header: Vec<String> = (0..self.feature_dim()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        wtr.write_record(&header)?;
        for (x, y) in self.features.iter().zip(&self.labels) {
            let mut rec: Vec<String> = x.iter().map(|v| format!("{v:?}")).collect();
            rec.push(y.to_string());
            wtr.write_record(&rec)?;
        }
        let bytes = wtr.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.first().map_or(0, Vec::len)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn row(&self, i: usize) -> (&[f64], usize) {
        (&self.features[i], self.labels[i])
    }

    pub fn rows(&self) -> impl Iterator<Item = (&[f64], usize)> {
        self.features
            .iter()
            .map(Vec::as_slice)
            .zip(self.labels.iter().copied())
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            features: indices.iter().map(|&i| self.features[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Contiguous chunks of at most `size` rows, in order.
    pub fn batches(&self, size: usize) -> Vec<Self> {
        let size = size.max(1);
        (0..self.len())
            .step_by(size)
            .map(|start| {
                let idx: Vec<usize> = (start..(start + size).min(self.len())).collect();
                self.subset(&idx)
            })
            .collect()
    }
}

/// Seeded split into `(prior_indices, bound_indices)`; the prior part holds
/// `floor(fraction * len)` rows.
pub fn split_indices(len: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "split fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let cut = (fraction * len as f64).floor() as usize;
    let mut prior = idx[..cut].to_vec();
    let mut bound = idx[cut..].to_vec();
    prior.sort_unstable();
    bound.sort_unstable();
    if bound.is_empty() || prior.is_empty() {
        return Err(Error::InvalidArgument("split leaves an empty part".into()));
    }
    Ok((prior, bound))
}

/// Isotropic Gaussian blobs, `per_class` rows around each centre, rows
/// interleaved by class.
pub fn gaussian_blobs(
    centres: &[Vec<f64>],
    std_dev: f64,
    per_class: usize,
    seed: u64,
) -> Result<LabelledDataset> {
    let noise = Normal::new(0.0, std_dev)
        .map_err(|e| Error::InvalidArgument(format!("bad blob spread: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(per_class * centres.len());
    let mut labels = Vec::with_capacity(per_class * centres.len());
    for _ in 0..per_class {
        for (class, centre) in centres.iter().enumerate() {
            features.push(centre.iter().map(|c| c + noise.sample(&mut rng)).collect());
            labels.push(class);
        }
    }
    LabelledDataset::new(features, labels, centres.len())
}
