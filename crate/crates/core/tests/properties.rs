use mtcvr_core::data::{
    generate_synthetic, ingest_csv, read_ground_truth_csv, write_dataset_csv, write_ground_truth_csv,
};
use mtcvr_core::data::{CsvSchema, SyntheticConfig};
use mtcvr_core::metrics::auc;
use mtcvr_core::model::{Architecture, Layout, MultiTaskNet};
use mtcvr_core::{InteractionRecord, ParameterStore, Tape, Task};
use proptest::prelude::*;

fn small_synthetic(seed: u64, n: usize) -> SyntheticConfig {
    SyntheticConfig {
        num_records: n,
        num_users: 120,
        num_items: 80,
        num_combos: 40,
        target_ctr: 0.2,
        target_cvr: 0.2,
        seed,
        ..SyntheticConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_ignores_monotone_transforms(
        pairs in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..200),
        shift in -3.0f64..3.0,
        scale in 0.1f64..10.0,
    ) {
        let (scores, labels): (Vec<f64>, Vec<bool>) = pairs.into_iter().unzip();
        prop_assume!(labels.iter().any(|&l| l) && labels.iter().any(|&l| !l));
        let base = auc(&scores, &labels).unwrap();
        let moved: Vec<f64> = scores.iter().map(|s| (s * scale + shift).exp()).collect();
        prop_assert_eq!(auc(&moved, &labels).unwrap(), base);
        let flipped: Vec<f64> = scores.iter().map(|s| -s).collect();
        prop_assert!((auc(&flipped, &labels).unwrap() - (1.0 - base)).abs() < 1e-12);
    }

    #[test]
    fn generated_conversions_imply_clicks(seed in 0u64..1000) {
        let (data, gt) = generate_synthetic(&small_synthetic(seed, 2000)).unwrap();
        for (i, r) in data.records().iter().enumerate() {
            prop_assert!(!r.conversion || r.click);
            prop_assert_eq!(r.conversion, r.click && gt.true_conversion[i]);
            prop_assert!(gt.propensity[i] > 0.0 && gt.propensity[i] < 1.0);
        }
    }
}

#[test]
fn predictions_do_not_depend_on_batch_composition() {
    let (data, _) = generate_synthetic(&small_synthetic(3, 500)).unwrap();
    let arch = Architecture { embedding_dim: 4, hidden: vec![8] };
    let net = MultiTaskNet::new(&arch, data.vocab(), &Layout::shared(&Task::ALL), 11).unwrap();
    let all = data.gather(&(0..data.len()).collect::<Vec<_>>());
    let reversed: Vec<&InteractionRecord> = all.iter().rev().copied().collect();
    for task in Task::ALL {
        let forward = net.predict(&all, task).unwrap();
        let mut backward = net.predict(&reversed, task).unwrap();
        backward.reverse();
        assert_eq!(forward, backward, "{task:?}");
        let odd: Vec<usize> = (0..data.len()).filter(|i| i % 2 == 1).collect();
        let sub = net.predict(&data.gather(&odd), task).unwrap();
        for (k, &i) in odd.iter().enumerate() {
            assert_eq!(sub[k], forward[i]);
        }
    }
}

#[test]
fn csv_round_trip_is_exact() {
    let (data, gt) = generate_synthetic(&small_synthetic(5, 10_000)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (dp, gp) = (dir.path().join("d.csv"), dir.path().join("g.csv"));
    write_dataset_csv(&dp, &data).unwrap();
    write_ground_truth_csv(&gp, &gt).unwrap();
    let schema = CsvSchema { vocab: Some(data.vocab()), ..CsvSchema::default() };
    let back = ingest_csv(&dp, &schema).unwrap();
    assert_eq!(back.dropped, 0);
    assert_eq!(back.dataset, data);
    assert_eq!(read_ground_truth_csv(&gp).unwrap(), gt);
}

/// Gradient of the summed per-head BCE against click labels, in a fresh store copy.
fn head_grad(net: &MultiTaskNet, records: &[&InteractionRecord], tasks: &[Task]) -> ParameterStore {
    let mut store = net.store().clone();
    store.zero_grad();
    let mut tape = Tape::new();
    let mut fwd = net.batch(records).unwrap();
    let mut total = None;
    for &task in tasks {
        let head = fwd.head(&mut tape, task, None).unwrap();
        let labels = records.iter().map(|r| f64::from(u8::from(r.click))).collect();
        let per_row = tape.bce(head, labels).unwrap();
        let loss = tape.sum(per_row);
        total = Some(match total {
            None => loss,
            Some(t) => tape.add(t, loss).unwrap(),
        });
    }
    tape.backward(total.unwrap(), &mut store).unwrap();
    store
}

#[test]
fn shared_embedding_receives_gradient_from_both_towers() {
    let (data, _) = generate_synthetic(&small_synthetic(9, 300)).unwrap();
    let records = data.gather(&(0..64).collect::<Vec<_>>());
    let arch = Architecture { embedding_dim: 4, hidden: vec![8] };
    let tasks = [Task::Ctr, Task::Cvr];

    let shared = MultiTaskNet::new(&arch, data.vocab(), &Layout::shared(&tasks), 1).unwrap();
    let table = shared.embedding_table(Task::Ctr).unwrap();
    assert_eq!(Some(table), shared.embedding_table(Task::Cvr));
    let (g_ctr, g_cvr, g_both) = (
        head_grad(&shared, &records, &[Task::Ctr]),
        head_grad(&shared, &records, &[Task::Cvr]),
        head_grad(&shared, &records, &tasks),
    );
    assert!(g_cvr.grad(table).squared_norm() > 0.0);
    for ((a, b), c) in g_ctr.grad(table).data().iter().zip(g_cvr.grad(table).data()).zip(g_both.grad(table).data()) {
        assert!((a + b - c).abs() <= 1e-12 * (1.0 + c.abs()));
    }

    let separate = MultiTaskNet::new(&arch, data.vocab(), &Layout::separate(&tasks), 1).unwrap();
    let g = head_grad(&separate, &records, &[Task::Cvr]);
    for id in separate.task_params(Task::Ctr) {
        assert_eq!(g.grad(id).squared_norm(), 0.0, "CTR parameter moved by a CVR loss");
    }
}
