use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ParamId, ParameterStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Probabilities are clipped into `[PROB_EPS, 1 − PROB_EPS]` before any log.
pub const PROB_EPS: f64 = 1e-7;

pub fn clip_probability(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Cross-entropy of a single prediction; the label may be soft.
pub fn binary_cross_entropy(label: f64, prediction: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&prediction) {
        return Err(Error::Input(format!("prediction {prediction} is not a probability")));
    }
    if !(0.0..=1.0).contains(&label) {
        return Err(Error::Input(format!("label {label} outside [0, 1]")));
    }
    let p = clip_probability(prediction);
    Ok(-label * p.ln() - (1.0 - label) * (1.0 - p).ln())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Softplus,
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Identity => x,
            Activation::Relu => tape.relu(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Softplus => tape.softplus(x),
        }
    }
}

/// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-limit..=limit)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("fan sizes are positive")
}

/// Stack of affine layers: ReLU between layers, `output` after the last one.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<(ParamId, ParamId)>,
    pub output: Activation,
}

impl Mlp {
    /// Registers `prefix.l{i}.w` / `prefix.l{i}.b` with Glorot weights and zero biases.
    pub fn init<R: Rng>(
        store: &mut ParameterStore,
        prefix: &str,
        widths: &[usize],
        output: Activation,
        rng: &mut R,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config(format!("`{prefix}` needs at least input and output widths")));
        }
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for (i, pair) in widths.windows(2).enumerate() {
            let w = store.add(format!("{prefix}.l{i}.w"), glorot_uniform(rng, pair[0], pair[1]))?;
            let b = store.add(format!("{prefix}.l{i}.b"), Tensor::zeros(&[pair[1]]))?;
            layers.push((w, b));
        }
        Ok(Mlp { layers, output })
    }

    pub fn in_dim(&self, store: &ParameterStore) -> usize {
        store.value(self.layers[0].0).shape()[0]
    }

    pub fn params(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers.iter().flat_map(|&(w, b)| [w, b])
    }

    /// Records the forward pass; `input` is `[batch, in_dim]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, input: Var) -> Result<Var> {
        let mut h = input;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let width = tape.value(h).cols();
            let expected = store.value(w).shape()[0];
            if width != expected {
                return Err(Error::dim(
                    format!("layer {} ({})", i, store.name(w)),
                    format!("input width {width}, layer expects {expected}"),
                ));
            }
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            let z = tape.affine(h, wv, Some(bv))?;
            h = if i == last { self.output.apply(tape, z) } else { tape.relu(z) };
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bce_values() {
        assert!((binary_cross_entropy(1.0, 0.5).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((binary_cross_entropy(0.0, 0.9).unwrap() - std::f64::consts::LN_10).abs() < 1e-12);
        let clipped = binary_cross_entropy(1.0, 1.0).unwrap();
        assert!((clipped - 1e-7).abs() < 1e-12, "{clipped}");
        assert!(binary_cross_entropy(1.0, 1.2).is_err());
        assert!(binary_cross_entropy(0.0, -0.1).is_err());
    }

    #[test]
    fn bce_nonnegative_and_zero_at_perfect() {
        for i in 0..=100 {
            let p = i as f64 / 100.0;
            for y in [0.0, 1.0] {
                assert!(binary_cross_entropy(y, p).unwrap() >= 0.0);
            }
        }
        assert!(binary_cross_entropy(0.0, 0.0).unwrap() < 1.1e-7);
    }

    fn set(store: &mut ParameterStore, id: ParamId, vals: &[f64]) {
        store.value_mut(id).data_mut().copy_from_slice(vals);
    }

    #[test]
    fn zero_net_sigmoid_is_half() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "h", &[3, 4, 1], Activation::Sigmoid, &mut rng).unwrap();
        for id in mlp.params().collect::<Vec<_>>() {
            store.value_mut(id).fill(0.0);
        }
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.5, 0.5]).unwrap());
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "id", &[2, 2], Activation::Identity, &mut rng).unwrap();
        set(&mut store, mlp.layers[0].0, &[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![0.25, -4.0]).unwrap());
        let y = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -4.0]);
    }

    #[test]
    fn two_layer_hand_computation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "m", &[2, 2, 1], Activation::Sigmoid, &mut rng).unwrap();
        set(&mut store, mlp.layers[0].0, &[0.5, -1.0, 2.0, 0.25]);
        set(&mut store, mlp.layers[0].1, &[0.1, -0.2]);
        set(&mut store, mlp.layers[1].0, &[1.5, -0.75]);
        set(&mut store, mlp.layers[1].1, &[0.05]);
        let x = [0.3, -0.6];
        // hidden pre-activations
        let h0 = (0.3 * 0.5 + -0.6 * 2.0 + 0.1_f64).max(0.0); // -0.95 -> 0
        let h1 = (-0.3 + -0.6 * 0.25 - 0.2_f64).max(0.0); // -0.65 -> 0
        let z = 1.5 * h0 - 0.75 * h1 + 0.05;
        let expected = 1.0 / (1.0 + (-z).exp());
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let y = mlp.forward(&mut tape, &store, xv).unwrap();
        assert!((tape.value(y).item() - expected).abs() < 1e-12);

        // and a case with both hidden units active
        let x2 = [1.0, 0.2];
        let a0 = 1.0 * 0.5 + 0.2 * 2.0 + 0.1; // 1.0
        let a1 = (-1.0 + 0.2 * 0.25 - 0.2_f64).max(0.0); // 0
        let z2 = 1.5 * a0 - 0.75 * a1 + 0.05;
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::matrix(1, 2, x2.to_vec()).unwrap());
        let y = mlp.forward(&mut tape, &store, xv).unwrap();
        assert!((tape.value(y).item() - 1.0 / (1.0 + (-z2).exp())).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let mut store = ParameterStore::new();
        let mlp = Mlp::init(&mut store, "tower", &[3, 2, 1], Activation::Sigmoid, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap());
        let err = mlp.forward(&mut tape, &store, x).unwrap_err();
        assert!(err.to_string().contains("tower.l0.w"), "{err}");
    }
}
