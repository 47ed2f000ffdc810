//! Exposure-space datasets, counterfactual ground truth, and their I/O.

mod csv_io;
mod split;
mod synthetic;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub use csv_io::{
    ingest_csv, read_ground_truth_csv, write_dataset_csv, write_ground_truth_csv, CsvSchema, IngestReport,
    ViolationPolicy, DATASET_HEADER, GROUND_TRUTH_HEADER,
};
pub use split::{batches, split_train_test, Batcher, SampleSpace, Split};
pub use synthetic::{generate_synthetic, SyntheticConfig};

pub const FIELD_COUNT: usize = 3;
pub const FIELD_NAMES: [&str; FIELD_COUNT] = ["user", "item", "comb"];

/// Number of distinct ids per feature field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Vocab {
    pub user: usize,
    pub item: usize,
    pub comb: usize,
}

impl Vocab {
    pub fn sizes(&self) -> [usize; FIELD_COUNT] {
        [self.user, self.item, self.comb]
    }

    pub fn total(&self) -> usize {
        self.user + self.item + self.comb
    }

    /// Row offset of each field inside a single concatenated table.
    pub fn offsets(&self) -> [usize; FIELD_COUNT] {
        [0, self.user, self.user + self.item]
    }

    fn from_sizes(s: [usize; FIELD_COUNT]) -> Self {
        Vocab { user: s[0], item: s[1], comb: s[2] }
    }
}

/// One exposure: categorical features, click indicator and observed conversion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionRecord {
    pub group_key: u64,
    pub click: bool,
    pub conversion: bool,
    pub user_feats: Vec<u32>,
    pub item_feats: Vec<u32>,
    pub comb_feats: Vec<u32>,
}

impl InteractionRecord {
    pub fn fields(&self) -> [&[u32]; FIELD_COUNT] {
        [&self.user_feats, &self.item_feats, &self.comb_feats]
    }

    pub fn check_vocab(&self, vocab: &Vocab) -> Result<()> {
        for ((ids, &size), field) in self.fields().iter().zip(&vocab.sizes()).zip(FIELD_NAMES) {
            if let Some(&id) = ids.iter().find(|&&id| id as usize >= size) {
                return Err(Error::OutOfVocabulary { field, id, size });
            }
        }
        Ok(())
    }
}

/// The exposure space: every shown pair, with clicks marking the click space.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExposureDataset {
    records: Vec<InteractionRecord>,
    vocab: Vocab,
}

impl ExposureDataset {
    /// Rejects out-of-vocabulary ids and conversions without a click.
    pub fn new(records: Vec<InteractionRecord>, vocab: Vocab) -> Result<Self> {
        for (i, r) in records.iter().enumerate() {
            r.check_vocab(&vocab)?;
            if r.conversion && !r.click {
                return Err(Error::Input(format!("record {i}: conversion without click")));
            }
        }
        Ok(ExposureDataset { records, vocab })
    }

    pub fn records(&self) -> &[InteractionRecord] {
        &self.records
    }

    pub fn vocab(&self) -> Vocab {
        self.vocab
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// |O|
    pub fn num_clicks(&self) -> usize {
        self.records.iter().filter(|r| r.click).count()
    }

    pub fn num_conversions(&self) -> usize {
        self.records.iter().filter(|r| r.conversion).count()
    }

    pub fn click_indices(&self) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].click).collect()
    }

    /// |O| / |D|, or 0 for an empty dataset.
    pub fn click_rate(&self) -> f64 {
        if self.records.is_empty() {
            0.0
        } else {
            self.num_clicks() as f64 / self.len() as f64
        }
    }

    pub fn subset(&self, indices: &[usize]) -> ExposureDataset {
        ExposureDataset { records: indices.iter().map(|&i| self.records[i].clone()).collect(), vocab: self.vocab }
    }

    pub fn gather<'a>(&'a self, indices: &[usize]) -> Vec<&'a InteractionRecord> {
        indices.iter().map(|&i| &self.records[i]).collect()
    }
}

/// Counterfactual truth for a synthetic dataset: what every exposure would have
/// done had it been clicked.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub propensity: Vec<f64>,
    pub true_conversion: Vec<bool>,
    pub confounder: Vec<f64>,
}

impl GroundTruth {
    pub fn new(propensity: Vec<f64>, true_conversion: Vec<bool>, confounder: Vec<f64>) -> Result<Self> {
        if propensity.len() != true_conversion.len() || propensity.len() != confounder.len() {
            return Err(Error::Input(format!(
                "ground truth columns differ in length: {}, {}, {}",
                propensity.len(),
                true_conversion.len(),
                confounder.len()
            )));
        }
        if let Some((i, p)) = propensity.iter().enumerate().find(|(_, &p)| !(p > 0.0 && p <= 1.0)) {
            return Err(Error::Input(format!("propensity {p} at row {i} is outside (0, 1]")));
        }
        Ok(GroundTruth { propensity, true_conversion, confounder })
    }

    pub fn len(&self) -> usize {
        self.propensity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.propensity.is_empty()
    }

    /// Row alignment, and agreement with observed labels on clicked rows.
    pub fn check_against(&self, dataset: &ExposureDataset) -> Result<()> {
        if self.len() != dataset.len() {
            return Err(Error::Input(format!("ground truth has {} rows, dataset has {}", self.len(), dataset.len())));
        }
        for (i, r) in dataset.records().iter().enumerate() {
            if r.click && r.conversion != self.true_conversion[i] {
                return Err(Error::Input(format!("row {i}: clicked conversion disagrees with ground truth")));
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> GroundTruth {
        GroundTruth {
            propensity: indices.iter().map(|&i| self.propensity[i]).collect(),
            true_conversion: indices.iter().map(|&i| self.true_conversion[i]).collect(),
            confounder: indices.iter().map(|&i| self.confounder[i]).collect(),
        }
    }

    pub fn mean_propensity(&self) -> f64 {
        self.propensity.iter().sum::<f64>() / self.len().max(1) as f64
    }
}
