use super::loss::{estimator_loss, LossContext, Phase};
use super::{EpochLoss, EstimatorKind, EstimatorSpec};
use crate::data::{Batcher, ExposureDataset, SampleSpace};
use crate::diff::{adam_step, AdamState, Tape};
use crate::model::{Architecture, MultiTaskNet};
use crate::{seed, Error, Result};

/// A trained net and its per-epoch loss trace.
#[derive(Debug, Clone)]
pub struct Trained {
    pub net: MultiTaskNet,
    pub trace: Vec<EpochLoss>,
}

/// Phases run in each trace row. A standalone propensity model is fitted
/// to completion before the prediction model starts; the joint-learning
/// estimator alternates one sweep of each model per epoch.
fn schedule(kind: EstimatorKind, epochs: usize) -> Vec<Vec<Phase>> {
    match kind {
        EstimatorKind::NaiveIpw => {
            let mut s = vec![vec![Phase::Propensity]; epochs];
            s.extend(vec![vec![Phase::Prediction]; epochs]);
            s
        }
        _ => vec![kind.phases().to_vec(); epochs],
    }
}

/// Builds a fresh net for `spec.kind` and trains it on `data`.
pub fn train(spec: &EstimatorSpec, arch: &Architecture, data: &ExposureDataset) -> Result<Trained> {
    spec.validate()?;
    let mut net = MultiTaskNet::new(arch, data.vocab(), &spec.kind.layout(), seed::derive_seed(spec.seed, "init"))?;
    let trace = train_net(spec, &mut net, data)?;
    Ok(Trained { net, trace })
}

/// Runs the fixed-epoch loop over exposure batches, updating `net` in place.
pub fn train_net(spec: &EstimatorSpec, net: &mut MultiTaskNet, data: &ExposureDataset) -> Result<Vec<EpochLoss>> {
    spec.validate()?;
    if net.layout() != &spec.kind.layout() {
        return Err(Error::Contract(format!("net layout does not match {}", spec.kind)));
    }
    let mut trace = Vec::new();
    if spec.epochs == 0 {
        return Ok(trace);
    }
    let batcher = Batcher::new(data, spec.batch_size, seed::derive_seed(spec.seed, "batches"), SampleSpace::Exposure)?;
    let mut adam = AdamState::new(spec.learning_rate);
    let mut sweep = 0usize;
    let mut global_step = 0u64;
    for (epoch, phases) in schedule(spec.kind, spec.epochs).into_iter().enumerate() {
        let mut row = EpochLoss { epoch, loss_total: 0.0, loss_ctr: 0.0, loss_cvr: 0.0, loss_imp: 0.0 };
        for phase in phases {
            let batches = batcher.epoch(sweep);
            sweep += 1;
            let mut sums = [0.0; 4];
            for (step, idx) in batches.iter().enumerate() {
                let records = data.gather(idx);
                let ctx = LossContext {
                    block_propensity_gradient: spec.block_propensity_gradient,
                    sample_seed: seed::derive_indexed(spec.seed, "undersample", global_step),
                    pinned_propensity: None,
                };
                global_step += 1;
                let mut tape = Tape::new();
                let parts = estimator_loss(spec.kind, phase, net, net.store(), &mut tape, &records, &spec.hyper, ctx)?;
                let total = tape.scalar(parts.total);
                if !total.is_finite() {
                    return Err(Error::Divergence { epoch, step, trace });
                }
                tape.backward(parts.total, net.store_mut())?;
                adam_step(net.store_mut(), &mut adam);
                for (s, v) in sums.iter_mut().zip([total, parts.ctr, parts.cvr, parts.imp]) {
                    *s += v;
                }
            }
            let n = batches.len() as f64;
            row.loss_total += sums[0] / n;
            row.loss_ctr += sums[1] / n;
            row.loss_cvr += sums[2] / n;
            row.loss_imp += sums[3] / n;
        }
        log::debug!("{} epoch {epoch}: loss {:.6}", spec.kind, row.loss_total);
        trace.push(row);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticConfig};

    fn data() -> ExposureDataset {
        let cfg = SyntheticConfig {
            num_records: 3000,
            num_users: 40,
            num_items: 30,
            num_combos: 20,
            target_ctr: 0.2,
            target_cvr: 0.3,
            seed: 4,
            ..Default::default()
        };
        generate_synthetic(&cfg).unwrap().0
    }

    fn arch() -> Architecture {
        Architecture { embedding_dim: 4, hidden: vec![8] }
    }

    #[test]
    fn zero_epochs_leave_parameters() {
        let d = data();
        let spec = EstimatorSpec::new(EstimatorKind::MultiDr, 0, 128, 0.01, 1);
        let fresh = MultiTaskNet::new(&arch(), d.vocab(), &spec.kind.layout(), seed::derive_seed(1, "init")).unwrap();
        let trained = train(&spec, &arch(), &d).unwrap();
        assert!(trained.trace.is_empty());
        assert_eq!(trained.net, fresh);
    }

    #[test]
    fn every_estimator_trains_deterministically() {
        let d = data();
        for kind in EstimatorKind::ALL {
            let spec = EstimatorSpec::new(kind, 2, 256, 0.01, 9);
            let a = train(&spec, &arch(), &d).unwrap();
            let b = train(&spec, &arch(), &d).unwrap();
            assert_eq!(a.trace, b.trace, "{kind}");
            assert_eq!(a.net, b.net, "{kind}");
            let rows = if kind == EstimatorKind::NaiveIpw { 4 } else { 2 };
            assert_eq!(a.trace.len(), rows, "{kind}");
            assert!(a.trace.iter().all(|e| e.loss_total.is_finite()), "{kind}");
        }
    }

    #[test]
    fn naive_loss_decreases() {
        let d = data();
        let spec = EstimatorSpec::new(EstimatorKind::Base, 6, 128, 0.02, 2);
        let t = train(&spec, &arch(), &d).unwrap();
        assert!(t.trace.last().unwrap().loss_cvr < t.trace[0].loss_cvr, "{:?}", t.trace);
    }

    #[test]
    fn bad_spec_is_rejected_before_training() {
        let d = data();
        let mut spec = EstimatorSpec::new(EstimatorKind::MultiIpw, 1, 0, 0.01, 1);
        assert!(matches!(train(&spec, &arch(), &d), Err(Error::Config(_))));
        spec.batch_size = 8;
        spec.hyper.eta = Some(0.1);
        assert!(matches!(train(&spec, &arch(), &d), Err(Error::UnknownKeys(_))));
    }

    #[test]
    fn divergence_reports_trace() {
        let d = data();
        let mut spec = EstimatorSpec::new(EstimatorKind::Base, 3, 256, f64::MAX, 1);
        spec.learning_rate = 1e300;
        match train(&spec, &arch(), &d) {
            Err(Error::Divergence { epoch, .. }) => assert!(epoch < 3),
            Ok(t) => panic!("expected divergence, got {:?}", t.trace),
            Err(e) => panic!("{e}"),
        }
    }
}
