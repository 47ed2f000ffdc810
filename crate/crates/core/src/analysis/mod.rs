//! Bias of estimator values over the click distribution.
//!
//! Predictions are frozen; only the observation vector `o ~ Bernoulli(p)`
//! varies. Expectations are computed exactly (closed form when the value is
//! linear in `o`, full enumeration otherwise) or by Monte Carlo.

mod theorems;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{ExposureDataset, GroundTruth};
use crate::diff::binary_cross_entropy;
use crate::estimators::{resolve_tau, EstimatorKind, HyperParams};
use crate::model::MultiTaskNet;
use crate::{seed, Error, Result};

pub use theorems::{
    confounded_instance, naive_vs_ipw, product_form_bias, random_instance, verify_theorems, write_theorem_csv,
    TheoremCheck, THEOREM_HEADER,
};

/// Largest `|D|` for which `2^|D|` enumeration is attempted.
pub const ENUMERATION_CAP: usize = 20;

/// Frozen predictions plus the counterfactual truth for every pair in `D`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrozenInstance {
    /// True propensities.
    pub p: Vec<f64>,
    /// True conversion labels.
    pub r: Vec<bool>,
    pub r_hat: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub e_hat: Vec<f64>,
}

impl FrozenInstance {
    pub fn new(p: Vec<f64>, r: Vec<bool>, r_hat: Vec<f64>, p_hat: Vec<f64>, e_hat: Vec<f64>) -> Result<Self> {
        let n = p.len();
        for (name, len) in [("r", r.len()), ("r_hat", r_hat.len()), ("p_hat", p_hat.len()), ("e_hat", e_hat.len())] {
            if len != n {
                return Err(Error::dim("frozen instance", format!("{name} has {len} entries, p has {n}")));
            }
        }
        if let Some(x) = p.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Input(format!("propensity {x} outside (0, 1]")));
        }
        if let Some(x) = p_hat.iter().find(|&&x| !(x > 0.0 && x <= 1.0)) {
            return Err(Error::Input(format!("estimated propensity {x} outside (0, 1]")));
        }
        if let Some(x) = r_hat.iter().find(|&&x| !(0.0..=1.0).contains(&x)) {
            return Err(Error::Input(format!("prediction {x} outside [0, 1]")));
        }
        Ok(FrozenInstance { p, r, r_hat, p_hat, e_hat })
    }

    /// Predictions of a trained net on `dataset`, paired with its ground truth.
    ///
    /// Nets without an imputation tower get `ê = 0`.
    pub fn from_net(net: &MultiTaskNet, dataset: &ExposureDataset, truth: Option<&GroundTruth>) -> Result<Self> {
        let truth = truth.ok_or_else(|| Error::MissingGroundTruth("bias analysis needs true propensities".into()))?;
        truth.check_against(dataset)?;
        let records = dataset.gather(&(0..dataset.len()).collect::<Vec<_>>());
        let p_hat = net.predict_ctr(&records)?;
        let r_hat = net.predict_cvr(&records)?;
        let e_hat = if net.has_task(crate::model::Task::Imp) {
            net.predict_imputed_error(&records)?
        } else {
            vec![0.0; records.len()]
        };
        let p_hat = p_hat.into_iter().map(|x| x.max(crate::diff::PROB_EPS)).collect();
        FrozenInstance::new(truth.propensity.clone(), truth.true_conversion.clone(), r_hat, p_hat, e_hat)
    }

    pub fn len(&self) -> usize {
        self.p.len()
    }

    pub fn is_empty(&self) -> bool {
        self.p.is_empty()
    }

    /// `e(r, r̂)` per pair.
    pub fn errors(&self) -> Vec<f64> {
        self.r
            .iter()
            .zip(&self.r_hat)
            .map(|(&r, &q)| binary_cross_entropy(f64::from(u8::from(r)), q).expect("validated"))
            .collect()
    }
}

/// Mean cross-entropy over all of `D` against the counterfactual labels.
pub fn prediction_inaccuracy(true_conversion: &[bool], r_hat: &[f64]) -> Result<f64> {
    if true_conversion.len() != r_hat.len() {
        return Err(Error::dim(
            "prediction inaccuracy",
            format!("{} labels vs {} predictions", true_conversion.len(), r_hat.len()),
        ));
    }
    if r_hat.is_empty() {
        return Err(Error::Input("prediction inaccuracy of an empty set".into()));
    }
    let mut s = 0.0;
    for (&r, &q) in true_conversion.iter().zip(r_hat) {
        s += binary_cross_entropy(f64::from(u8::from(r)), q)?;
    }
    Ok(s / r_hat.len() as f64)
}

/// An estimator's value as a function of the observation vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "formula", rename_all = "snake_case")]
pub enum Formula {
    /// Mean error over clicked pairs; 0 when nothing is clicked.
    Naive,
    /// Clicked mean with converted pairs weighted by `k`.
    Oversampling { k: f64 },
    /// Unclicked pairs scored against label 0, mean over `D`.
    NaiveImputation,
    /// Unclicked pairs scored against soft label `eta`, mean over `D`.
    HeuristicDr { eta: f64 },
    /// `(1/|D|) Σ o·e / max(p̂, tau)`.
    Ipw { tau: f64 },
    /// `(1/|D|) Σ (ê + o·(e − ê) / max(p̂, tau))`.
    Dr { tau: f64 },
    /// Click plus CTCVR cross-entropy, mean over `D`.
    Esmm,
}

impl Formula {
    /// The formula matching an estimator's objective; floors are resolved
    /// against the instance's `p̂`.
    pub fn for_estimator(kind: EstimatorKind, hyper: &HyperParams, instance: &FrozenInstance) -> Formula {
        use EstimatorKind::*;
        let tau = resolve_tau(hyper, &instance.p_hat);
        match kind {
            Base => Formula::Naive,
            Oversampling => Formula::Oversampling { k: hyper.k_or_default() },
            Esmm | EsmmNs => Formula::Esmm,
            NaiveImputation => Formula::NaiveImputation,
            HeuristicDr => Formula::HeuristicDr { eta: hyper.eta_or_default() },
            NaiveIpw | MultiIpw => Formula::Ipw { tau },
            JointLearningDr | MultiDr => Formula::Dr { tau },
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Formula::Naive => "naive",
            Formula::Oversampling { .. } => "oversampling",
            Formula::NaiveImputation => "naive_imputation",
            Formula::HeuristicDr { .. } => "heuristic_dr",
            Formula::Ipw { .. } => "ipw",
            Formula::Dr { .. } => "dr",
            Formula::Esmm => "esmm",
        }
    }

    /// Estimator value for one realised observation vector.
    pub fn value(&self, inst: &FrozenInstance, e: &[f64], o: &[bool]) -> f64 {
        let n = inst.len() as f64;
        match *self {
            Formula::Naive | Formula::Oversampling { .. } => {
                let k = if let Formula::Oversampling { k } = *self { k } else { 1.0 };
                let (mut num, mut den) = (0.0, 0.0);
                for i in 0..inst.len() {
                    if o[i] {
                        let w = if inst.r[i] { k } else { 1.0 };
                        num += w * e[i];
                        den += w;
                    }
                }
                if den == 0.0 {
                    0.0
                } else {
                    num / den
                }
            }
            Formula::NaiveImputation | Formula::HeuristicDr { .. } => {
                let eta = if let Formula::HeuristicDr { eta } = *self { eta } else { 0.0 };
                let mut s = 0.0;
                for i in 0..inst.len() {
                    let q = inst.r_hat[i];
                    s += if o[i] { e[i] } else { binary_cross_entropy(eta, q).expect("validated") };
                }
                s / n
            }
            Formula::Ipw { tau } => {
                (0..inst.len()).filter(|&i| o[i]).map(|i| e[i] / inst.p_hat[i].max(tau)).sum::<f64>() / n
            }
            Formula::Dr { tau } => {
                let mut s = 0.0;
                for i in 0..inst.len() {
                    s += inst.e_hat[i];
                    if o[i] {
                        s += (e[i] - inst.e_hat[i]) / inst.p_hat[i].max(tau);
                    }
                }
                s / n
            }
            Formula::Esmm => {
                let mut s = 0.0;
                for (i, &oi) in o.iter().enumerate() {
                    let (p, q) = (inst.p_hat[i], inst.r_hat[i]);
                    let click = f64::from(u8::from(oi));
                    let both = f64::from(u8::from(oi && inst.r[i]));
                    s += binary_cross_entropy(click, p).expect("validated")
                        + binary_cross_entropy(both, p * q).expect("validated");
                }
                s / n
            }
        }
    }

    /// `(a, b)` with value `= (1/|D|) Σ (a_i + o_i b_i)`, when such a form exists.
    pub fn linear_terms(&self, inst: &FrozenInstance, e: &[f64]) -> Option<(Vec<f64>, Vec<f64>)> {
        let n = inst.len();
        let ce = |y: f64, q: f64| binary_cross_entropy(y, q).expect("validated");
        match *self {
            Formula::Naive | Formula::Oversampling { .. } => None,
            Formula::NaiveImputation | Formula::HeuristicDr { .. } => {
                let eta = if let Formula::HeuristicDr { eta } = *self { eta } else { 0.0 };
                let a: Vec<f64> = inst.r_hat.iter().map(|&q| ce(eta, q)).collect();
                let b = (0..n).map(|i| e[i] - a[i]).collect();
                Some((a, b))
            }
            Formula::Ipw { tau } => {
                let b = (0..n).map(|i| e[i] / inst.p_hat[i].max(tau)).collect();
                Some((vec![0.0; n], b))
            }
            Formula::Dr { tau } => {
                let b = (0..n).map(|i| (e[i] - inst.e_hat[i]) / inst.p_hat[i].max(tau)).collect();
                Some((inst.e_hat.clone(), b))
            }
            Formula::Esmm => {
                let mut a = Vec::with_capacity(n);
                let mut b = Vec::with_capacity(n);
                for i in 0..n {
                    let (p, q) = (inst.p_hat[i], inst.r_hat[i]);
                    let unclicked = ce(0.0, p) + ce(0.0, p * q);
                    let clicked = ce(1.0, p) + ce(f64::from(u8::from(inst.r[i])), p * q);
                    a.push(unclicked);
                    b.push(clicked - unclicked);
                }
                Some((a, b))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "exact-linear")]
    ExactLinear,
    #[serde(rename = "exact-enumeration")]
    ExactEnumeration,
    #[serde(rename = "monte-carlo")]
    MonteCarlo,
}

/// Expected estimator value against the true prediction inaccuracy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasReport {
    pub estimator: String,
    pub prediction_inaccuracy: f64,
    pub expected_value: f64,
    pub bias: f64,
    pub method: Method,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mc_samples: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub standard_error: Option<f64>,
}

/// Probability of one observation vector under independent Bernoulli clicks.
fn mask_probability(p: &[f64], mask: u64) -> f64 {
    p.iter().enumerate().map(|(i, &pi)| if mask >> i & 1 == 1 { pi } else { 1.0 - pi }).product()
}

/// `E_O[value]` by summing over all `2^|D|` observation vectors.
pub fn enumerate_expected_value(formula: &Formula, inst: &FrozenInstance) -> Result<f64> {
    let n = inst.len();
    if n > ENUMERATION_CAP {
        return Err(Error::Input(format!(
            "enumeration over {n} pairs exceeds the cap of {ENUMERATION_CAP}; use Monte Carlo"
        )));
    }
    let e = inst.errors();
    let mut o = vec![false; n];
    let mut total = 0.0;
    for mask in 0..(1u64 << n) {
        for (i, slot) in o.iter_mut().enumerate() {
            *slot = mask >> i & 1 == 1;
        }
        let w = mask_probability(&inst.p, mask);
        if w != 0.0 {
            total += w * formula.value(inst, &e, &o);
        }
    }
    Ok(total)
}

/// Exact `E_O[value]`: closed form for formulas linear in `o`, enumeration
/// otherwise.
pub fn exact_expected_value(formula: &Formula, inst: &FrozenInstance) -> Result<(f64, Method)> {
    if inst.is_empty() {
        return Err(Error::Input("empty instance".into()));
    }
    let e = inst.errors();
    match formula.linear_terms(inst, &e) {
        Some((a, b)) => {
            let s: f64 = (0..inst.len()).map(|i| a[i] + inst.p[i] * b[i]).sum();
            Ok((s / inst.len() as f64, Method::ExactLinear))
        }
        None => Ok((enumerate_expected_value(formula, inst)?, Method::ExactEnumeration)),
    }
}

/// Exact bias report.
pub fn exact_bias(formula: &Formula, inst: &FrozenInstance) -> Result<BiasReport> {
    let p_val = prediction_inaccuracy(&inst.r, &inst.r_hat)?;
    let (expected, method) = exact_expected_value(formula, inst)?;
    Ok(BiasReport {
        estimator: formula.name().to_string(),
        prediction_inaccuracy: p_val,
        expected_value: expected,
        bias: (expected - p_val).abs(),
        method,
        mc_samples: None,
        standard_error: None,
    })
}

/// Redraws `o ~ Bernoulli(p)` `draws` times and averages the estimator value.
pub fn monte_carlo_bias(formula: &Formula, inst: &FrozenInstance, draws: usize, seed: u64) -> Result<BiasReport> {
    if draws == 0 {
        return Err(Error::Config("Monte Carlo needs at least one draw".into()));
    }
    if inst.is_empty() {
        return Err(Error::Input("empty instance".into()));
    }
    let p_val = prediction_inaccuracy(&inst.r, &inst.r_hat)?;
    let e = inst.errors();
    let mut rng = seed::rng(seed, "monte-carlo");
    let mut o = vec![false; inst.len()];
    let (mut sum, mut sum_sq) = (0.0, 0.0);
    for _ in 0..draws {
        for (slot, &p) in o.iter_mut().zip(&inst.p) {
            *slot = rng.random::<f64>() < p;
        }
        let v = formula.value(inst, &e, &o);
        sum += v;
        sum_sq += v * v;
    }
    let n = draws as f64;
    let mean = sum / n;
    let var = if draws > 1 { ((sum_sq - n * mean * mean) / (n - 1.0)).max(0.0) } else { 0.0 };
    Ok(BiasReport {
        estimator: formula.name().to_string(),
        prediction_inaccuracy: p_val,
        expected_value: mean,
        bias: (mean - p_val).abs(),
        method: Method::MonteCarlo,
        mc_samples: Some(draws),
        standard_error: Some((var / n).sqrt()),
    })
}

/// Exact report when affordable, Monte Carlo otherwise.
pub fn bias_report(formula: &Formula, inst: &FrozenInstance, draws: usize, seed: u64) -> Result<BiasReport> {
    let e = inst.errors();
    if formula.linear_terms(inst, &e).is_some() || inst.len() <= ENUMERATION_CAP {
        exact_bias(formula, inst)
    } else {
        monte_carlo_bias(formula, inst, draws, seed)
    }
}

/// `(1/|D|)·|Σ (e_ctr + e_ctcvr − e_cvr)|`, treating the CTR and CTCVR
/// losses as fixed over `D`.
pub fn esmm_bias(e_ctr: &[f64], e_ctcvr: &[f64], e_cvr: &[f64]) -> Result<f64> {
    if e_ctr.len() != e_cvr.len() || e_ctcvr.len() != e_cvr.len() {
        return Err(Error::dim("esmm bias", format!("lengths {}, {}, {}", e_ctr.len(), e_ctcvr.len(), e_cvr.len())));
    }
    if e_cvr.is_empty() {
        return Err(Error::Input("esmm bias of an empty set".into()));
    }
    let s: f64 = (0..e_cvr.len()).map(|i| e_ctr[i] + e_ctcvr[i] - e_cvr[i]).sum();
    Ok(s.abs() / e_cvr.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const LN2: f64 = std::f64::consts::LN_2;

    fn inst(p: &[f64], r: &[bool], r_hat: &[f64]) -> FrozenInstance {
        FrozenInstance::new(p.to_vec(), r.to_vec(), r_hat.to_vec(), p.to_vec(), vec![0.0; p.len()]).unwrap()
    }

    #[test]
    fn inaccuracy_examples() {
        assert!((prediction_inaccuracy(&[true, false], &[0.5, 0.5]).unwrap() - LN2).abs() < 1e-15);
        assert!(prediction_inaccuracy(&[true, false], &[1.0, 0.0]).unwrap() < 1e-6);
        assert!(prediction_inaccuracy(&[true], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn ipw_with_true_propensity_is_unbiased_on_two_pairs() {
        let i = inst(&[0.3, 0.8], &[true, false], &[0.6, 0.2]);
        let full = enumerate_expected_value(&Formula::Ipw { tau: 1e-7 }, &i).unwrap();
        let p_val = prediction_inaccuracy(&i.r, &i.r_hat).unwrap();
        assert!((full - p_val).abs() < 1e-15);
    }

    #[test]
    fn naive_is_biased_when_confounded() {
        let r_hat = [0.9, 0.5, 0.1];
        let i = inst(&[0.9, 0.5, 0.1], &[true, true, true], &r_hat);
        let report = exact_bias(&Formula::Naive, &i).unwrap();
        assert_eq!(report.method, Method::ExactEnumeration);
        assert!(report.bias > 0.1, "{report:?}");
    }

    #[test]
    fn unit_propensity_gives_full_d_values() {
        let i = inst(&[1.0; 4], &[true, false, true, false], &[0.3, 0.4, 0.8, 0.1]);
        let p_val = prediction_inaccuracy(&i.r, &i.r_hat).unwrap();
        for f in
            [Formula::Naive, Formula::Oversampling { k: 1.0 }, Formula::Ipw { tau: 1e-7 }, Formula::Dr { tau: 1e-7 }]
        {
            let (v, _) = exact_expected_value(&f, &i).unwrap();
            assert!((v - p_val).abs() < 1e-15, "{f:?}");
        }
    }

    #[test]
    fn linear_fast_path_matches_enumeration() {
        let i = FrozenInstance::new(
            vec![0.2, 0.7, 0.45, 0.9, 0.05],
            vec![true, false, false, true, true],
            vec![0.3, 0.6, 0.1, 0.8, 0.5],
            vec![0.25, 0.5, 0.5, 0.7, 0.1],
            vec![0.4, 1.2, 0.3, 0.2, 0.9],
        )
        .unwrap();
        for f in [
            Formula::NaiveImputation,
            Formula::HeuristicDr { eta: 0.01 },
            Formula::Ipw { tau: 0.3 },
            Formula::Dr { tau: 1e-7 },
            Formula::Esmm,
        ] {
            let (fast, m) = exact_expected_value(&f, &i).unwrap();
            assert_eq!(m, Method::ExactLinear);
            let slow = enumerate_expected_value(&f, &i).unwrap();
            assert!((fast - slow).abs() < 1e-13, "{f:?}: {fast} vs {slow}");
        }
    }

    #[test]
    fn enumeration_cap() {
        let n = ENUMERATION_CAP + 1;
        let i = inst(&vec![0.5; n], &vec![true; n], &vec![0.5; n]);
        assert!(exact_expected_value(&Formula::Naive, &i).is_err());
        assert!(exact_expected_value(&Formula::Ipw { tau: 0.1 }, &i).is_ok());
        let r = bias_report(&Formula::Naive, &i, 50, 1).unwrap();
        assert_eq!(r.method, Method::MonteCarlo);
    }

    #[test]
    fn single_draw_is_one_estimate() {
        let i = inst(&[0.5, 0.5, 0.5], &[true, false, true], &[0.2, 0.3, 0.9]);
        let r = monte_carlo_bias(&Formula::Ipw { tau: 1e-7 }, &i, 1, 3).unwrap();
        assert_eq!(r.standard_error, Some(0.0));
        let e = i.errors();
        let candidates: Vec<f64> = (0..8u64)
            .map(|m| {
                let o: Vec<bool> = (0..3).map(|k| m >> k & 1 == 1).collect();
                Formula::Ipw { tau: 1e-7 }.value(&i, &e, &o)
            })
            .collect();
        assert!(candidates.contains(&r.expected_value));
    }

    #[test]
    fn esmm_bias_examples() {
        assert!((esmm_bias(&[0.1], &[0.2], &[0.05]).unwrap() - 0.25).abs() < 1e-15);
        assert!(esmm_bias(&[0.1, 0.2], &[0.3, 0.1], &[0.4, 0.3]).unwrap() < 1e-15);
        assert!(esmm_bias(&[0.1], &[0.2], &[]).is_err());
    }

    #[test]
    fn report_json_shape() {
        let i = inst(&[0.5, 0.5], &[true, false], &[0.5, 0.5]);
        let r = exact_bias(&Formula::Ipw { tau: 1e-7 }, &i).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        assert_eq!(v["method"], "exact-linear");
        assert!(v.get("standard_error").is_none());
    }
}
