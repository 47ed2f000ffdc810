use std::io::Write;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{enumerate_expected_value, prediction_inaccuracy, Formula, FrozenInstance};
use crate::diff::PROB_EPS;
use crate::{seed, Result};

pub const THEOREM_HEADER: &str = "theorem,instances,max_bias,pass";

/// One row of the verification suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremCheck {
    pub theorem: String,
    pub instances: usize,
    /// Largest bias seen; for `product_form` the largest gap between the
    /// enumerated bias and `|Σ Δ·δ| / |D|`.
    pub max_bias: f64,
    pub pass: bool,
}

/// Random instance with `p̂ = p` and `ê = e`.
pub fn random_instance<R: Rng>(rng: &mut R, n: usize) -> FrozenInstance {
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let r: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let r_hat: Vec<f64> = (0..n).map(|_| rng.random_range(0.02..0.98)).collect();
    let mut inst = FrozenInstance::new(p.clone(), r, r_hat, p, vec![0.0; n]).expect("valid by construction");
    inst.e_hat = inst.errors();
    inst
}

fn perturb_propensity<R: Rng>(rng: &mut R, inst: &mut FrozenInstance) {
    for (ph, &p) in inst.p_hat.iter_mut().zip(&inst.p) {
        let factor: f64 = rng.random_range(-1.0..1.0f64).exp();
        *ph = (p * factor).clamp(0.01, 1.0);
    }
}

fn perturb_errors<R: Rng>(rng: &mut R, inst: &mut FrozenInstance) {
    let e = inst.errors();
    for (eh, &ei) in inst.e_hat.iter_mut().zip(&e) {
        *eh = ei * rng.random_range(0.0..2.0) + rng.random_range(0.0..0.3);
    }
}

/// Propensities anticorrelated with prediction errors: pairs that are likely
/// to be clicked are the ones the model already predicts well.
pub fn confounded_instance<R: Rng>(rng: &mut R, n: usize) -> FrozenInstance {
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.95)).collect();
    let r: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    let r_hat = p
        .iter()
        .zip(&r)
        .map(|(&pi, &ri)| {
            let e = 0.05 + 2.5 * (1.0 - pi) + rng.random_range(0.0..0.1);
            if ri {
                (-e).exp()
            } else {
                1.0 - (-e).exp()
            }
        })
        .collect();
    FrozenInstance::new(p.clone(), r, r_hat, p, vec![0.0; n]).expect("valid by construction")
}

fn enumerated_bias(formula: &Formula, inst: &FrozenInstance) -> Result<f64> {
    let expected = enumerate_expected_value(formula, inst)?;
    Ok((expected - prediction_inaccuracy(&inst.r, &inst.r_hat)?).abs())
}

/// `|Σ Δ·δ| / |D|` with `Δ = (p − p̂)/p̂` and `δ = e − ê`.
pub fn product_form_bias(inst: &FrozenInstance) -> f64 {
    let e = inst.errors();
    let s: f64 = (0..inst.len()).map(|i| (inst.p[i] - inst.p_hat[i]) / inst.p_hat[i] * (e[i] - inst.e_hat[i])).sum();
    s.abs() / inst.len() as f64
}

/// Randomised check of the unbiasedness results by full enumeration over
/// instances with `1..=max_size` pairs.
pub fn verify_theorems(instances: usize, max_size: usize, tolerance: f64, seed: u64) -> Result<Vec<TheoremCheck>> {
    let mut rng = seed::rng(seed, "theorems");
    let ipw = Formula::Ipw { tau: PROB_EPS };
    let dr = Formula::Dr { tau: PROB_EPS };
    let mut worst = [0.0f64; 5];
    let mut least_negative = f64::INFINITY;
    for _ in 0..instances {
        let n = rng.random_range(1..=max_size.max(1));
        let base = random_instance(&mut rng, n);
        worst[0] = worst[0].max(enumerated_bias(&ipw, &base)?);

        let mut arm_a = base.clone();
        perturb_propensity(&mut rng, &mut arm_a);
        worst[1] = worst[1].max(enumerated_bias(&dr, &arm_a)?);

        let mut arm_b = base.clone();
        perturb_errors(&mut rng, &mut arm_b);
        worst[2] = worst[2].max(enumerated_bias(&dr, &arm_b)?);

        let mut both = base.clone();
        perturb_propensity(&mut rng, &mut both);
        perturb_errors(&mut rng, &mut both);
        let b = enumerated_bias(&dr, &both)?;
        worst[3] = worst[3].max((b - product_form_bias(&both)).abs());
        worst[4] = worst[4].max(b);
        least_negative = least_negative.min(b);
    }
    let row = |name: &str, max_bias: f64, pass: bool| TheoremCheck { theorem: name.into(), instances, max_bias, pass };
    Ok(vec![
        row("ipw_true_propensity", worst[0], worst[0] < tolerance),
        row("dr_exact_errors", worst[1], worst[1] < tolerance),
        row("dr_true_propensity", worst[2], worst[2] < tolerance),
        row("dr_product_form", worst[3], worst[3] < tolerance),
        row("dr_both_wrong_is_biased", worst[4], least_negative > tolerance),
    ])
}

/// Enumerated `(naive bias, IPW-with-true-p bias)` on confounded instances.
pub fn naive_vs_ipw(instances: usize, size: usize, seed: u64) -> Result<Vec<(f64, f64)>> {
    let mut rng = seed::rng(seed, "naive-vs-ipw");
    (0..instances)
        .map(|_| {
            let inst = confounded_instance(&mut rng, size);
            Ok((enumerated_bias(&Formula::Naive, &inst)?, enumerated_bias(&Formula::Ipw { tau: PROB_EPS }, &inst)?))
        })
        .collect()
}

pub fn write_theorem_csv(path: &Path, rows: &[TheoremCheck]) -> Result<()> {
    let mut out = format!("{THEOREM_HEADER}\n");
    for r in rows {
        out.push_str(&format!("{},{},{:e},{}\n", r.theorem, r.instances, r.max_bias, r.pass));
    }
    std::fs::File::create(path)?.write_all(out.as_bytes())?;
    Ok(())
}
