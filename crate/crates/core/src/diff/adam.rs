use super::{ParamId, ParameterStore, Tensor};

#[derive(Debug, Clone)]
struct Moments {
    m: Tensor,
    v: Tensor,
    t: u64,
}

/// Adam with bias correction. Moments are kept per parameter and created on
/// the parameter's first update.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    step: u64,
    moments: Vec<Option<Moments>>,
}

impl AdamState {
    pub fn new(learning_rate: f64) -> Self {
        AdamState { learning_rate, beta1: 0.9, beta2: 0.999, epsilon: 1e-8, step: 0, moments: Vec::new() }
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.moments.get(id.index())?.as_ref().map(|m| &m.m)
    }

    pub fn second_moment(&self, id: ParamId) -> Option<&Tensor> {
        self.moments.get(id.index())?.as_ref().map(|m| &m.v)
    }
}

/// Applies one update to every parameter touched by the last backward pass,
/// then zeroes all gradients.
pub fn adam_step(store: &mut ParameterStore, state: &mut AdamState) {
    if state.moments.len() < store.len() {
        state.moments.resize(store.len(), None);
    }
    let (b1, b2, eps, lr) = (state.beta1, state.beta2, state.epsilon, state.learning_rate);
    let ids: Vec<ParamId> = store.ids().filter(|&id| store.is_touched(id)).collect();
    for id in ids {
        let grad = store.grad(id).clone();
        let slot = state.moments[id.index()].get_or_insert_with(|| Moments {
            m: Tensor::zeros(grad.shape()),
            v: Tensor::zeros(grad.shape()),
            t: 0,
        });
        slot.t += 1;
        let c1 = 1.0 - b1.powi(slot.t as i32);
        let c2 = 1.0 - b2.powi(slot.t as i32);
        let value = store.value_mut(id);
        for (((p, g), m), v) in
            value.data_mut().iter_mut().zip(grad.data()).zip(slot.m.data_mut()).zip(slot.v.data_mut())
        {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    state.step += 1;
    store.zero_grad();
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(v: f64) -> (ParameterStore, ParamId) {
        let mut s = ParameterStore::new();
        let id = s.add("x", Tensor::scalar(v)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let (mut s, id) = scalar_store(1.25);
        let mut st = AdamState::new(0.1);
        s.accumulate(id, &Tensor::scalar(0.0));
        adam_step(&mut s, &mut st);
        assert_eq!(s.value(id).item(), 1.25);
        assert_eq!(st.step(), 1);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.002, 150.0] {
            let (mut s, id) = scalar_store(0.0);
            let mut st = AdamState::new(0.01);
            s.accumulate(id, &Tensor::scalar(g));
            adam_step(&mut s, &mut st);
            let moved = s.value(id).item();
            assert!((moved + 0.01 * f64::signum(g)).abs() < 1e-6, "g={g} moved={moved}");
            assert_eq!(s.grad(id).item(), 0.0);
        }
    }

    #[test]
    fn matches_scalar_reference_on_quadratic() {
        // f(x) = 0.5 * a * (x - c)^2
        let (a, c, lr) = (3.0, 1.5, 0.05);
        let (b1, b2, eps) = (0.9_f64, 0.999_f64, 1e-8);
        let mut x_ref = -2.0_f64;
        let (mut m, mut v) = (0.0_f64, 0.0_f64);
        let mut trace = Vec::new();
        for t in 1..=5 {
            let g = a * (x_ref - c);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t));
            let vh = v / (1.0 - b2.powi(t));
            x_ref -= lr * mh / (vh.sqrt() + eps);
            trace.push(x_ref);
        }

        let (mut s, id) = scalar_store(-2.0);
        let mut st = AdamState::new(lr);
        for expected in trace {
            let x = s.value(id).item();
            s.accumulate(id, &Tensor::scalar(a * (x - c)));
            adam_step(&mut s, &mut st);
            assert!((s.value(id).item() - expected).abs() < 1e-12);
        }
        assert_eq!(st.step(), 5);
        assert_eq!(st.first_moment(id).unwrap().shape(), s.value(id).shape());
    }

    #[test]
    fn untouched_parameters_are_skipped() {
        let mut s = ParameterStore::new();
        let a = s.add("a", Tensor::scalar(1.0)).unwrap();
        let b = s.add("b", Tensor::scalar(1.0)).unwrap();
        let mut st = AdamState::new(0.1);
        s.accumulate(a, &Tensor::scalar(1.0));
        adam_step(&mut s, &mut st);
        s.accumulate(a, &Tensor::scalar(1.0));
        adam_step(&mut s, &mut st);
        assert_eq!(s.value(b).item(), 1.0);
        assert!(st.first_moment(b).is_none());
    }
}
