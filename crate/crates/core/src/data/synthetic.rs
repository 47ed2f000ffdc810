//! Confounded click/conversion simulator.
//!
//! Each exposure draws a latent confounder `z ~ N(0, 1)` that enters both
//! structural equations:
//!
//! ```text
//! p = σ(w_p · φ(x) + α z + b_p)      click      ~ Bernoulli(p)
//! q = σ(w_r · φ(x) + β z + b_r)      conversion ~ Bernoulli(q)   (counterfactual)
//! ```
//!
//! `φ(x)` is a fixed random embedding of the user, item and combination ids
//! that the learner never sees. `b_p` and `b_r` are set by bisection so that the
//! expected click rate and the expected conversion rate among clicks hit their
//! targets on the drawn population.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ExposureDataset, GroundTruth, InteractionRecord, Vocab};
use crate::diff::{sigmoid, Tensor};
use crate::seed;
use crate::{Error, Result};

const CALIBRATION_ITERS: usize = 200;
const CALIBRATION_BRACKET: f64 = 60.0;
const CALIBRATION_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub num_records: usize,
    pub num_users: usize,
    pub num_items: usize,
    pub num_combos: usize,
    /// Dimension of the hidden feature map φ.
    pub latent_dim: usize,
    pub click_weight_seed: u64,
    pub conversion_weight_seed: u64,
    /// Standard deviation of `w_p · φ(x)`.
    pub click_signal: f64,
    /// Standard deviation of `w_r · φ(x)`.
    pub conversion_signal: f64,
    /// Confounder strength on the click side.
    pub alpha: f64,
    /// Confounder strength on the conversion side.
    pub beta: f64,
    pub target_ctr: f64,
    /// Expected conversion rate among clicked exposures.
    pub target_cvr: f64,
    pub seed: u64,
    pub shards: usize,
}

impl Default for SyntheticConfig {
    /// Ali-CCP-like rates: 4% CTR and 0.53% post-click CVR.
    fn default() -> Self {
        SyntheticConfig {
            num_records: 100_000,
            num_users: 2_000,
            num_items: 1_000,
            num_combos: 500,
            latent_dim: 4,
            click_weight_seed: 1,
            conversion_weight_seed: 2,
            click_signal: 1.0,
            conversion_signal: 1.0,
            alpha: 1.0,
            beta: 1.0,
            target_ctr: 0.04,
            target_cvr: 0.0053,
            seed: 0,
            shards: 8,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_records", self.num_records),
            ("num_users", self.num_users),
            ("num_items", self.num_items),
            ("num_combos", self.num_combos),
            ("latent_dim", self.latent_dim),
            ("shards", self.shards),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("synthetic.{name} must be positive")));
        }
        for (name, v) in [("target_ctr", self.target_ctr), ("target_cvr", self.target_cvr)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::Config(format!("synthetic.{name} must lie in (0, 1), got {v}")));
            }
        }
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("click_signal", self.click_signal),
            ("conversion_signal", self.conversion_signal),
        ] {
            if !v.is_finite() {
                return Err(Error::Config(format!("synthetic.{name} must be finite")));
            }
        }
        Ok(())
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { user: self.num_users, item: self.num_items, comb: self.num_combos }
    }

    /// Hashed cross of the (user, item) pair.
    pub fn combo_id(&self, user: u32, item: u32) -> u32 {
        let h = (u64::from(user) * 7_919 + u64::from(item) * 104_729) % self.num_combos as u64;
        h as u32
    }
}

struct Draw {
    user: u32,
    item: u32,
    z: f64,
    click_pre: f64,
    conv_pre: f64,
    u_click: f64,
    u_conv: f64,
}

fn normal_matrix(rows: usize, cols: usize, scale: f64, seed: u64, purpose: &str) -> Tensor {
    let mut rng = seed::rng(seed, purpose);
    let data =
        (0..rows * cols).map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng)).collect::<Vec<f64>>();
    Tensor::matrix(rows, cols, data).expect("positive sizes")
}

/// Smallest `b` in the bracket with `f(b) >= target` for increasing `f`.
fn bisect(f: impl Fn(f64) -> f64, target: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (-CALIBRATION_BRACKET, CALIBRATION_BRACKET);
    for _ in 0..CALIBRATION_ITERS {
        if hi - lo < 1e-12 {
            break;
        }
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let b = 0.5 * (lo + hi);
    (b, f(b))
}

/// Draws an exposure dataset and its counterfactual truth.
///
/// Shards use independent RNG streams keyed by `(seed, shard)` and are
/// concatenated in shard order, so the result does not depend on scheduling.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<(ExposureDataset, GroundTruth)> {
    config.validate()?;
    let k = config.latent_dim;
    let scale = (1.0 / (3.0 * k as f64)).sqrt();
    let users = normal_matrix(config.num_users, k, 1.0, config.seed, "phi.user");
    let items = normal_matrix(config.num_items, k, 1.0, config.seed, "phi.item");
    let combos = normal_matrix(config.num_combos, k, 1.0, config.seed, "phi.comb");
    let w_click = normal_matrix(1, k, config.click_signal * scale, config.click_weight_seed, "w.click");
    let w_conv = normal_matrix(1, k, config.conversion_signal * scale, config.conversion_weight_seed, "w.conv");

    let phi_dot = |w: &Tensor, user: u32, item: u32, combo: u32| -> f64 {
        let (u, i, c) = (user as usize, item as usize, combo as usize);
        (0..k)
            .map(|j| w.data()[j] * (users.data()[u * k + j] + items.data()[i * k + j] + combos.data()[c * k + j]))
            .sum()
    };

    let n = config.num_records;
    let shards = config.shards.min(n);
    let draws: Vec<Draw> = (0..shards)
        .into_par_iter()
        .map(|s| {
            let (start, end) = (s * n / shards, (s + 1) * n / shards);
            let mut rng = seed::rng_indexed(config.seed, "records", s as u64);
            (start..end)
                .map(|_| {
                    let user = rng.random_range(0..config.num_users as u32);
                    let item = rng.random_range(0..config.num_items as u32);
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let combo = config.combo_id(user, item);
                    Draw {
                        user,
                        item,
                        z,
                        click_pre: phi_dot(&w_click, user, item, combo) + config.alpha * z,
                        conv_pre: phi_dot(&w_conv, user, item, combo) + config.beta * z,
                        u_click: rng.random(),
                        u_conv: rng.random(),
                    }
                })
                .collect::<Vec<_>>()
        })
        .flatten()
        .collect();

    let mean_ctr = |b: f64| draws.iter().map(|d| sigmoid(d.click_pre + b)).sum::<f64>() / n as f64;
    let (b_click, achieved_ctr) = bisect(mean_ctr, config.target_ctr);
    let props: Vec<f64> = draws.iter().map(|d| sigmoid(d.click_pre + b_click)).collect();
    let prop_sum: f64 = props.iter().sum();
    let post_click_cvr =
        |b: f64| draws.iter().zip(&props).map(|(d, p)| p * sigmoid(d.conv_pre + b)).sum::<f64>() / prop_sum;
    let (b_conv, achieved_cvr) = bisect(post_click_cvr, config.target_cvr);

    let off = |a: f64, t: f64| (a - t).abs() > CALIBRATION_RTOL * t;
    if off(achieved_ctr, config.target_ctr) || off(achieved_cvr, config.target_cvr) {
        return Err(Error::Calibration {
            iterations: CALIBRATION_ITERS,
            target_ctr: config.target_ctr,
            target_cvr: config.target_cvr,
            achieved_ctr,
            achieved_cvr,
        });
    }

    let mut records = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(n);
    let mut confounder = Vec::with_capacity(n);
    let mut propensity = Vec::with_capacity(n);
    for (d, &p) in draws.iter().zip(&props) {
        let click = d.u_click < p;
        let true_conv = d.u_conv < sigmoid(d.conv_pre + b_conv);
        records.push(InteractionRecord {
            group_key: u64::from(d.user),
            click,
            conversion: click && true_conv,
            user_feats: vec![d.user],
            item_feats: vec![d.item],
            comb_feats: vec![config.combo_id(d.user, d.item)],
        });
        truth.push(true_conv);
        confounder.push(d.z);
        propensity.push(p);
    }
    let dataset = ExposureDataset::new(records, config.vocab())?;
    let gt = GroundTruth::new(propensity, truth, confounder)?;
    Ok((dataset, gt))
}
