//! AUC, exposure-weighted group AUC, and the evaluation report.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{ExposureDataset, GroundTruth};
use crate::model::MultiTaskNet;
use crate::{Error, Result};

/// Tie-aware AUC: `(wins + ties / 2) / (positives · negatives)`.
///
/// Counts are exact integers, so the result equals the pairwise definition
/// bit for bit.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::dim("auc", format!("{} scores vs {} labels", scores.len(), labels.len())));
    }
    if let Some(s) = scores.iter().find(|s| s.is_nan()) {
        return Err(Error::Input(format!("score {s} is not comparable")));
    }
    let pos = labels.iter().filter(|&&l| l).count() as u128;
    let neg = labels.len() as u128 - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!("auc needs both classes ({pos} positive, {neg} negative)")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let (mut wins, mut ties, mut neg_below) = (0u128, 0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        let (mut gp, mut gn) = (0u128, 0u128);
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            if labels[order[j]] {
                gp += 1;
            } else {
                gn += 1;
            }
            j += 1;
        }
        wins += gp * neg_below;
        ties += gp * gn;
        neg_below += gn;
        i = j;
    }
    Ok((2 * wins + ties) as f64 / (2 * pos * neg) as f64)
}

/// Scores and labels with a grouping key per record.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredLabelSet {
    pub scores: Vec<f64>,
    pub labels: Vec<bool>,
    pub groups: Vec<u64>,
}

impl ScoredLabelSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>, groups: Vec<u64>) -> Result<Self> {
        if scores.len() != labels.len() || groups.len() != labels.len() {
            return Err(Error::dim(
                "scored label set",
                format!("{} scores, {} labels, {} groups", scores.len(), labels.len(), groups.len()),
            ));
        }
        Ok(ScoredLabelSet { scores, labels, groups })
    }

    fn grouped(&self) -> BTreeMap<u64, Vec<usize>> {
        let mut map: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
        for (i, &g) in self.groups.iter().enumerate() {
            map.entry(g).or_default().push(i);
        }
        map
    }

    /// Group AUC weighted by each group's exposure count.
    pub fn gauc(&self) -> Result<f64> {
        self.gauc_weighted(None)
    }

    /// Group AUC with optional explicit weights (groups missing from the map
    /// fall back to their exposure count). Single-class groups are skipped.
    pub fn gauc_weighted(&self, weights: Option<&BTreeMap<u64, f64>>) -> Result<f64> {
        let groups: Vec<(u64, Vec<usize>)> = self.grouped().into_iter().collect();
        let per_group: Vec<Option<(f64, f64)>> = groups
            .par_iter()
            .map(|(key, idx)| {
                let s: Vec<f64> = idx.iter().map(|&i| self.scores[i]).collect();
                let l: Vec<bool> = idx.iter().map(|&i| self.labels[i]).collect();
                let w = weights.and_then(|m| m.get(key).copied()).unwrap_or(idx.len() as f64);
                auc(&s, &l).ok().map(|a| (w, a))
            })
            .collect();
        let (mut num, mut den) = (0.0, 0.0);
        for (w, a) in per_group.into_iter().flatten() {
            if !(w > 0.0 && w.is_finite()) {
                return Err(Error::Input(format!("group weight {w} must be positive")));
            }
            num += w * a;
            den += w;
        }
        if den == 0.0 {
            return Err(Error::UndefinedMetric("no group contains both classes".into()));
        }
        Ok(num / den)
    }
}

/// Evaluation of one trained net on a test split; unavailable metrics are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// CVR-AUC over every exposure against counterfactual labels.
    pub cvr_auc_do: Option<f64>,
    /// CVR-AUC over clicked records against observed labels.
    pub cvr_auc_clicked: Option<f64>,
    /// AUC of `p̂ · r̂` against click-and-convert labels over all exposures.
    pub ctcvr_auc: Option<f64>,
    pub ctcvr_gauc: Option<f64>,
    pub seed: u64,
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}

fn defined(name: &str, r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(msg)) => {
            log::warn!("{name} undefined: {msg}");
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Scores `test` with `net`. Without ground truth the counterfactual metric
/// is reported as `None`.
pub fn evaluate(
    net: &MultiTaskNet,
    test: &ExposureDataset,
    truth: Option<&GroundTruth>,
    seed: u64,
    with_gauc: bool,
) -> Result<MetricReport> {
    let records = test.gather(&(0..test.len()).collect::<Vec<_>>());
    let cvr = net.predict_cvr(&records)?;
    let ctr = net.predict_ctr(&records)?;

    let cvr_auc_do = match truth {
        Some(t) => {
            t.check_against(test)?;
            defined("cvr_auc_do", auc(&cvr, &t.true_conversion))?
        }
        None => {
            log::warn!("no ground truth: counterfactual CVR-AUC skipped");
            None
        }
    };
    let clicked = test.click_indices();
    let clicked_scores: Vec<f64> = clicked.iter().map(|&i| cvr[i]).collect();
    let clicked_labels: Vec<bool> = clicked.iter().map(|&i| records[i].conversion).collect();
    let cvr_auc_clicked = defined("cvr_auc_clicked", auc(&clicked_scores, &clicked_labels))?;

    let ctcvr: Vec<f64> = ctr.iter().zip(&cvr).map(|(p, r)| p * r).collect();
    let labels: Vec<bool> = records.iter().map(|r| r.click && r.conversion).collect();
    let ctcvr_auc = defined("ctcvr_auc", auc(&ctcvr, &labels))?;
    let ctcvr_gauc = if with_gauc {
        let groups = records.iter().map(|r| r.group_key).collect();
        defined("ctcvr_gauc", ScoredLabelSet::new(ctcvr, labels, groups)?.gauc())?
    } else {
        None
    };
    Ok(MetricReport { cvr_auc_do, cvr_auc_clicked, ctcvr_auc, ctcvr_gauc, seed })
}
