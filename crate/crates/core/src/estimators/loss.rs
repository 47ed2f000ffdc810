use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{EstimatorKind, HyperParams};
use crate::data::InteractionRecord;
use crate::diff::{binary_cross_entropy, ParameterStore, Tape, Tensor, Var, PROB_EPS};
use crate::model::{BatchForward, MultiTaskNet, Task};
use crate::{seed, Error, Result};

/// Which parameter group a step updates, for estimators that alternate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Everything in one objective.
    Joint,
    /// Standalone propensity (click) model.
    Propensity,
    /// Prediction model with the other models frozen.
    Prediction,
    /// Imputation model with the other models frozen.
    Imputation,
}

/// A recorded loss and the values of its components.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub total: Var,
    pub ctr: f64,
    pub cvr: f64,
    pub imp: f64,
}

/// Settings that are not hyperparameters but change the recorded graph.
#[derive(Debug, Clone, Copy)]
pub struct LossContext<'a> {
    pub block_propensity_gradient: bool,
    /// Seeds the unclicked subsample of the imputation term.
    pub sample_seed: u64,
    /// Propensities to use wherever `p̂` is a constant (blocked weights and
    /// the floor); `None` reads them off the recorded `p̂`.
    pub pinned_propensity: Option<&'a [f64]>,
}

impl Default for LossContext<'_> {
    fn default() -> Self {
        LossContext { block_propensity_gradient: true, sample_seed: 0, pinned_propensity: None }
    }
}

/// Constant view of `p̂`: the pinned values if given, else the recorded ones.
fn constant_propensity(tape: &Tape, p_hat: Var, ctx: &LossContext<'_>) -> Vec<f64> {
    match ctx.pinned_propensity {
        Some(p) => p.to_vec(),
        None => tape.value(p_hat).data().to_vec(),
    }
}

/// Propensity floor for one batch: explicit `tau`, or `tau_pct` of the way from
/// the batch minimum to the batch mean of `p̂`; never below `PROB_EPS`.
pub fn resolve_tau(hyper: &HyperParams, batch_propensities: &[f64]) -> f64 {
    let tau = match (hyper.tau, hyper.tau_pct) {
        (Some(t), _) => t,
        (None, Some(pct)) if !batch_propensities.is_empty() => {
            let min = batch_propensities.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = batch_propensities.iter().sum::<f64>() / batch_propensities.len() as f64;
            min + pct * (mean - min)
        }
        _ => PROB_EPS,
    };
    tau.max(PROB_EPS)
}

fn clicked_rows(records: &[&InteractionRecord]) -> (Vec<usize>, Vec<usize>) {
    (0..records.len()).partition(|&i| records[i].click)
}

fn conv_labels(records: &[&InteractionRecord], rows: &[usize]) -> Vec<f64> {
    rows.iter().map(|&i| f64::from(u8::from(records[i].conversion))).collect()
}

fn sum_all(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(acc)
}

fn mean(tape: &mut Tape, x: Var, denom: f64) -> Var {
    let s = tape.sum(x);
    tape.scale(s, 1.0 / denom)
}

/// Mean click cross-entropy over the batch plus the `p̂` node.
fn ctr_term(tape: &mut Tape, fwd: &mut BatchForward<'_>, records: &[&InteractionRecord]) -> Result<(Var, Var)> {
    let p_hat = fwd.head(tape, Task::Ctr, None)?;
    let labels = records.iter().map(|r| f64::from(u8::from(r.click))).collect();
    let e = tape.bce(p_hat, labels)?;
    Ok((mean(tape, e, records.len() as f64), p_hat))
}

/// Elementwise `e(r, r̂)` on the listed rows.
fn cvr_errors(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    rows: &[usize],
) -> Result<Var> {
    let r_hat = fwd.head(tape, Task::Cvr, Some(rows))?;
    tape.bce(r_hat, conv_labels(records, rows))
}

/// `x_i / max(p̂_i, tau)` over `rows`; with `block` the divisor is the
/// constant `p_const`.
fn inverse_weighted(
    tape: &mut Tape,
    x: Var,
    p_hat: Var,
    p_const: &[f64],
    rows: &[usize],
    tau: f64,
    block: bool,
) -> Result<Var> {
    if block {
        let w = rows.iter().map(|&r| 1.0 / p_const[r].max(tau)).collect();
        tape.mul_const(x, w)
    } else {
        let p = tape.gather_rows(p_hat, rows.to_vec())?;
        let p = tape.clamp_min(p, tau);
        tape.div(x, p)
    }
}

/// Output of a frozen model, always evaluated at `net`'s own parameters so
/// that a perturbed store moves only what the objective differentiates.
fn constant_head(net: &MultiTaskNet, records: &[&InteractionRecord], task: Task) -> Result<Vec<f64>> {
    let mut scratch = Tape::new();
    let mut fwd = BatchForward::new(net, net.store(), records)?;
    let v = fwd.head(&mut scratch, task, None)?;
    Ok(scratch.value(v).data().to_vec())
}

fn l2_penalty(tape: &mut Tape, net: &MultiTaskNet, store: &ParameterStore, task: Task, v: f64) -> Result<Option<Var>> {
    if v == 0.0 {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for id in net.tower_params(task) {
        let p = tape.param(store, id);
        terms.push(tape.sum_squares(p));
    }
    let total = sum_all(tape, &terms)?;
    Ok(Some(tape.scale(total, v)))
}

/// Mean cross-entropy over a click-space batch.
pub fn loss_naive(tape: &mut Tape, fwd: &mut BatchForward<'_>, records: &[&InteractionRecord]) -> Result<Var> {
    if let Some(i) = records.iter().position(|r| !r.click) {
        return Err(Error::Contract(format!("naive loss given unclicked record at batch row {i}")));
    }
    let rows: Vec<usize> = (0..records.len()).collect();
    let e = cvr_errors(tape, fwd, records, &rows)?;
    Ok(mean(tape, e, records.len() as f64))
}

/// Click-space loss with converted records weighted by `k`.
pub fn loss_oversampling(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    k: f64,
) -> Result<Var> {
    if records.iter().any(|r| !r.click) {
        return Err(Error::Contract("oversampling loss given an unclicked record".into()));
    }
    let rows: Vec<usize> = (0..records.len()).collect();
    weighted_click_mean(tape, fwd, records, &rows, k)
}

fn weighted_click_mean(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    rows: &[usize],
    k: f64,
) -> Result<Var> {
    let e = cvr_errors(tape, fwd, records, rows)?;
    let w: Vec<f64> = rows.iter().map(|&i| if records[i].conversion { k } else { 1.0 }).collect();
    let total_w: f64 = w.iter().sum();
    let we = tape.mul_const(e, w)?;
    Ok(mean(tape, we, total_w))
}

/// Click BCE plus the inverse-propensity weighted CVR loss, over an exposure batch.
pub fn loss_multi_ipw(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    hyper: &HyperParams,
    ctx: LossContext<'_>,
) -> Result<LossParts> {
    let (ctr, p_hat) = ctr_term(tape, fwd, records)?;
    let p_const = constant_propensity(tape, p_hat, &ctx);
    let tau = resolve_tau(hyper, &p_const);
    let (clicked, _) = clicked_rows(records);
    let ctr_value = tape.scalar(ctr);
    if clicked.is_empty() {
        return Ok(LossParts { total: ctr, ctr: ctr_value, cvr: 0.0, imp: 0.0 });
    }
    let e = cvr_errors(tape, fwd, records, &clicked)?;
    let weighted = inverse_weighted(tape, e, p_hat, &p_const, &clicked, tau, ctx.block_propensity_gradient)?;
    let ipw = mean(tape, weighted, records.len() as f64);
    let cvr = tape.scalar(ipw);
    Ok(LossParts { total: tape.add(ctr, ipw)?, ctr: ctr_value, cvr, imp: 0.0 })
}

/// Inverse-propensity weighted CVR term for a click-space batch.
///
/// The batch stands in for `len / click_ratio` exposures, where `click_ratio`
/// is the dataset-wide `|O| / |D|`. The click term has no unclicked labels
/// here and must come from exposure batches.
pub fn loss_multi_ipw_click_batch(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    hyper: &HyperParams,
    ctx: LossContext<'_>,
    click_ratio: f64,
) -> Result<Var> {
    if records.iter().any(|r| !r.click) {
        return Err(Error::Contract("click-space batch contains an unclicked record".into()));
    }
    if !(click_ratio > 0.0 && click_ratio <= 1.0) {
        return Err(Error::Input(format!("click ratio {click_ratio} outside (0, 1]")));
    }
    let p_hat = fwd.head(tape, Task::Ctr, None)?;
    let p_const = constant_propensity(tape, p_hat, &ctx);
    let tau = resolve_tau(hyper, &p_const);
    let rows: Vec<usize> = (0..records.len()).collect();
    let e = cvr_errors(tape, fwd, records, &rows)?;
    let weighted = inverse_weighted(tape, e, p_hat, &p_const, &rows, tau, ctx.block_propensity_gradient)?;
    Ok(mean(tape, weighted, records.len() as f64 / click_ratio))
}

/// Click BCE plus the doubly robust term plus the imputation L2 penalty.
///
/// The imputation sum runs over every clicked record and over unclicked
/// records subsampled to `lambda × clicks` (all of them when `lambda` is
/// unset). Sums are divided by the batch size; `reweight_unclicked` scales
/// the subsample up to stand for every unclicked record of the batch.
pub fn loss_multi_dr(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    net: &MultiTaskNet,
    store: &ParameterStore,
    hyper: &HyperParams,
    ctx: LossContext<'_>,
) -> Result<LossParts> {
    let (ctr, p_hat) = ctr_term(tape, fwd, records)?;
    let ctr_value = tape.scalar(ctr);
    let p_const = constant_propensity(tape, p_hat, &ctx);
    let tau = resolve_tau(hyper, &p_const);
    let (clicked, unclicked) = clicked_rows(records);

    let sampled: Vec<usize> = match hyper.lambda {
        None => unclicked.clone(),
        Some(lambda) => {
            let want = (lambda * clicked.len() as f64).round() as usize;
            if want > unclicked.len() {
                log::warn!("lambda asks for {want} unclicked records, batch has {}; using all", unclicked.len());
                unclicked.clone()
            } else {
                let mut rng = seed::rng(ctx.sample_seed, "undersample");
                let mut pick: Vec<usize> =
                    sample(&mut rng, unclicked.len(), want).into_iter().map(|j| unclicked[j]).collect();
                pick.sort_unstable();
                pick
            }
        }
    };
    let included: Vec<usize> = clicked.iter().chain(&sampled).copied().collect();
    let mut terms = vec![ctr];
    let (mut cvr_value, mut imp_value) = (0.0, 0.0);
    if !included.is_empty() {
        let reweight = hyper.reweight_unclicked && hyper.lambda.is_some() && !sampled.is_empty();
        let denom = records.len() as f64;
        let e_hat = fwd.head(tape, Task::Imp, Some(&included))?;
        let e_hat_sum = if reweight {
            let scale = unclicked.len() as f64 / sampled.len() as f64;
            let w = (0..included.len()).map(|j| if j < clicked.len() { 1.0 } else { scale }).collect();
            let weighted = tape.mul_const(e_hat, w)?;
            mean(tape, weighted, denom)
        } else {
            mean(tape, e_hat, denom)
        };
        imp_value += tape.scalar(e_hat_sum);
        terms.push(e_hat_sum);
        if !clicked.is_empty() {
            let e = cvr_errors(tape, fwd, records, &clicked)?;
            let e_hat_clicked = tape.gather_rows(e_hat, (0..clicked.len()).collect())?;
            let delta = tape.sub(e, e_hat_clicked)?;
            let weighted =
                inverse_weighted(tape, delta, p_hat, &p_const, &clicked, tau, ctx.block_propensity_gradient)?;
            let dr = mean(tape, weighted, denom);
            cvr_value = tape.scalar(dr);
            terms.push(dr);
        }
    }
    if let Some(pen) = l2_penalty(tape, net, store, Task::Imp, hyper.v_or_default())? {
        imp_value += tape.scalar(pen);
        terms.push(pen);
    }
    Ok(LossParts { total: sum_all(tape, &terms)?, ctr: ctr_value, cvr: cvr_value, imp: imp_value })
}

/// Click BCE plus CTCVR BCE with score `p̂ · r̂`, equally weighted.
pub fn loss_esmm(tape: &mut Tape, fwd: &mut BatchForward<'_>, records: &[&InteractionRecord]) -> Result<LossParts> {
    let (ctr, p_hat) = ctr_term(tape, fwd, records)?;
    let r_hat = fwd.head(tape, Task::Cvr, None)?;
    let score = tape.mul(p_hat, r_hat)?;
    let labels = records.iter().map(|r| f64::from(u8::from(r.click && r.conversion))).collect();
    let e = tape.bce(score, labels)?;
    let ctcvr = mean(tape, e, records.len() as f64);
    let (c, v) = (tape.scalar(ctr), tape.scalar(ctcvr));
    Ok(LossParts { total: tape.add(ctr, ctcvr)?, ctr: c, cvr: v, imp: 0.0 })
}

/// CVR BCE over the exposure batch with unclicked records labelled `eta`
/// (clicked records keep their observed label).
pub fn loss_heuristic_dr(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    eta: f64,
) -> Result<Var> {
    let r_hat = fwd.head(tape, Task::Cvr, None)?;
    let labels = records.iter().map(|r| if r.click { f64::from(u8::from(r.conversion)) } else { eta }).collect();
    let e = tape.bce(r_hat, labels)?;
    Ok(mean(tape, e, records.len() as f64))
}

/// CVR BCE over the exposure batch with every unclicked record labelled 0.
pub fn loss_naive_imputation(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
) -> Result<Var> {
    loss_heuristic_dr(tape, fwd, records, 0.0)
}

/// Inverse-propensity weighted CVR loss with propensities supplied from
/// outside the graph (a separately trained click model).
pub fn loss_naive_ipw(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    propensities: &[f64],
    hyper: &HyperParams,
) -> Result<Var> {
    if propensities.len() != records.len() {
        return Err(Error::dim(
            "naive ipw",
            format!("{} propensities for {} records", propensities.len(), records.len()),
        ));
    }
    let tau = resolve_tau(hyper, propensities);
    let (clicked, _) = clicked_rows(records);
    if clicked.is_empty() {
        let zero = tape.constant(Tensor::scalar(0.0));
        return Ok(zero);
    }
    let e = cvr_errors(tape, fwd, records, &clicked)?;
    let w = clicked.iter().map(|&r| 1.0 / propensities[r].max(tau)).collect();
    let weighted = tape.mul_const(e, w)?;
    Ok(mean(tape, weighted, records.len() as f64))
}

fn aux_ctr_plus(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    cvr: Option<Var>,
) -> Result<LossParts> {
    let (ctr, _) = ctr_term(tape, fwd, records)?;
    let c = tape.scalar(ctr);
    match cvr {
        Some(v) => {
            let cv = tape.scalar(v);
            Ok(LossParts { total: tape.add(ctr, v)?, ctr: c, cvr: cv, imp: 0.0 })
        }
        None => Ok(LossParts { total: ctr, ctr: c, cvr: 0.0, imp: 0.0 }),
    }
}

/// The training objective of `kind` for one exposure batch, recorded on `tape`.
///
/// `store` is normally `net.store()`; gradient checks pass perturbed copies.
#[allow(clippy::too_many_arguments)]
pub fn estimator_loss(
    kind: EstimatorKind,
    phase: Phase,
    net: &MultiTaskNet,
    store: &ParameterStore,
    tape: &mut Tape,
    records: &[&InteractionRecord],
    hyper: &HyperParams,
    ctx: LossContext<'_>,
) -> Result<LossParts> {
    use EstimatorKind::*;
    if !kind.phases().contains(&phase) {
        return Err(Error::Contract(format!("{kind} has no {phase:?} phase")));
    }
    let mut fwd = BatchForward::new(net, store, records)?;
    let pinned = match (kind, phase) {
        (MultiIpw | MultiDr, _) | (JointLearningDr, Phase::Prediction)
            if ctx.pinned_propensity.is_none() && !std::ptr::eq(store, net.store()) =>
        {
            Some(constant_head(net, records, Task::Ctr)?)
        }
        _ => None,
    };
    let ctx = LossContext { pinned_propensity: ctx.pinned_propensity.or(pinned.as_deref()), ..ctx };
    let (clicked, _) = clicked_rows(records);
    match (kind, phase) {
        (Base | Oversampling, _) => {
            let cvr = if clicked.is_empty() {
                None
            } else {
                let k = if kind == Oversampling { hyper.k_or_default() } else { 1.0 };
                Some(weighted_click_mean(tape, &mut fwd, records, &clicked, k)?)
            };
            aux_ctr_plus(tape, &mut fwd, records, cvr)
        }
        (NaiveImputation, _) => {
            let cvr = loss_naive_imputation(tape, &mut fwd, records)?;
            aux_ctr_plus(tape, &mut fwd, records, Some(cvr))
        }
        (HeuristicDr, _) => {
            let cvr = loss_heuristic_dr(tape, &mut fwd, records, hyper.eta_or_default())?;
            aux_ctr_plus(tape, &mut fwd, records, Some(cvr))
        }
        (Esmm | EsmmNs, _) => loss_esmm(tape, &mut fwd, records),
        (MultiIpw, _) => loss_multi_ipw(tape, &mut fwd, records, hyper, ctx),
        (MultiDr, _) => loss_multi_dr(tape, &mut fwd, records, net, store, hyper, ctx),
        (NaiveIpw | JointLearningDr, Phase::Propensity) => aux_ctr_plus(tape, &mut fwd, records, None),
        (NaiveIpw, _) => {
            let p = constant_head(net, records, Task::Ctr)?;
            let cvr = loss_naive_ipw(tape, &mut fwd, records, &p, hyper)?;
            let v = tape.scalar(cvr);
            Ok(LossParts { total: cvr, ctr: 0.0, cvr: v, imp: 0.0 })
        }
        (JointLearningDr, Phase::Imputation) => joint_learning_imputation(tape, &mut fwd, records, net, store, hyper),
        (JointLearningDr, _) => joint_learning_prediction(tape, &mut fwd, records, net, hyper, ctx),
    }
}

/// Click BCE plus the doubly robust loss with the imputation model frozen.
fn joint_learning_prediction(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    net: &MultiTaskNet,
    hyper: &HyperParams,
    ctx: LossContext<'_>,
) -> Result<LossParts> {
    let (ctr, p_hat) = ctr_term(tape, fwd, records)?;
    let ctr_value = tape.scalar(ctr);
    let p_const = constant_propensity(tape, p_hat, &ctx);
    let tau = resolve_tau(hyper, &p_const);
    let e_hat = constant_head(net, records, Task::Imp)?;
    let n = records.len() as f64;
    let (clicked, _) = clicked_rows(records);
    let e_hat_mean = e_hat.iter().sum::<f64>() / n;
    if clicked.is_empty() {
        return Ok(LossParts { total: ctr, ctr: ctr_value, cvr: e_hat_mean, imp: 0.0 });
    }
    let e = cvr_errors(tape, fwd, records, &clicked)?;
    let weighted = inverse_weighted(tape, e, p_hat, &p_const, &clicked, tau, true)?;
    let correction: f64 = clicked.iter().map(|&r| e_hat[r] / p_const[r].max(tau)).sum();
    let ipw = mean(tape, weighted, n);
    let offset = tape.constant(Tensor::scalar(e_hat_mean - correction / n));
    let dr = tape.add(ipw, offset)?;
    let dr_value = tape.scalar(dr);
    Ok(LossParts { total: tape.add(ctr, dr)?, ctr: ctr_value, cvr: dr_value, imp: 0.0 })
}

/// Propensity-weighted squared error of the imputation model against the
/// frozen prediction model's errors on clicked records, plus L2.
fn joint_learning_imputation(
    tape: &mut Tape,
    fwd: &mut BatchForward<'_>,
    records: &[&InteractionRecord],
    net: &MultiTaskNet,
    store: &ParameterStore,
    hyper: &HyperParams,
) -> Result<LossParts> {
    let (clicked, _) = clicked_rows(records);
    let mut terms = Vec::new();
    let mut imp = 0.0;
    if !clicked.is_empty() {
        let p = constant_head(net, records, Task::Ctr)?;
        let tau = resolve_tau(hyper, &p);
        let clicked_records: Vec<&InteractionRecord> = clicked.iter().map(|&i| records[i]).collect();
        let r_hat = constant_head(net, &clicked_records, Task::Cvr)?;
        let e: Vec<f64> = r_hat
            .iter()
            .zip(&clicked_records)
            .map(|(&q, r)| binary_cross_entropy(f64::from(u8::from(r.conversion)), q))
            .collect::<Result<_>>()?;
        let e_hat = fwd.head(tape, Task::Imp, Some(&clicked))?;
        let target = tape.constant(Tensor::column(e));
        let delta = tape.sub(target, e_hat)?;
        let sq = tape.mul(delta, delta)?;
        let w = clicked.iter().map(|&r| 1.0 / p[r].max(tau)).collect();
        let weighted = tape.mul_const(sq, w)?;
        let m = mean(tape, weighted, records.len() as f64);
        imp += tape.scalar(m);
        terms.push(m);
    }
    if let Some(pen) = l2_penalty(tape, net, store, Task::Imp, hyper.v_or_default())? {
        imp += tape.scalar(pen);
        terms.push(pen);
    }
    if terms.is_empty() {
        terms.push(tape.constant(Tensor::scalar(0.0)));
    }
    Ok(LossParts { total: sum_all(tape, &terms)?, ctr: 0.0, cvr: 0.0, imp })
}

/// `1 / max(p̂, tau)` per propensity.
pub fn inverse_weights(propensities: &[f64], tau: f64) -> Vec<f64> {
    propensities.iter().map(|&p| 1.0 / p.max(tau)).collect()
}

/// Population variance of [`inverse_weights`]; zero for an empty batch.
pub fn inverse_weight_variance(propensities: &[f64], tau: f64) -> f64 {
    let w = inverse_weights(propensities, tau);
    if w.is_empty() {
        return 0.0;
    }
    let n = w.len() as f64;
    let mean = w.iter().sum::<f64>() / n;
    w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n
}
