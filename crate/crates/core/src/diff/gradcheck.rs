use super::{ParameterStore, Tape, Tensor, Var};
use crate::{Error, Result};

/// Gradient magnitudes below this are compared on an absolute scale.
const MAGNITUDE_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub step: f64,
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error < self.tolerance)
    }

    pub fn failures(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(move |p| p.max_rel_error >= self.tolerance)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR);
    (analytic - numeric).abs() / scale
}

fn eval<F>(store: &ParameterStore, loss_fn: &mut F) -> Result<f64>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    Ok(tape.scalar(loss))
}

/// Computes analytic gradients with one backward pass and compares them
/// against central differences.
///
/// `max_per_param` caps the elements probed per parameter (evenly strided);
/// `None` checks every element.
pub fn finite_difference_check<F>(
    store: &mut ParameterStore,
    mut loss_fn: F,
    step: f64,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = loss_fn(store, &mut tape)?;
    tape.backward(loss, store)?;
    let analytic: Vec<Tensor> = store.grads().to_vec();
    store.zero_grad();
    check_gradients(store, loss_fn, &analytic, step, tolerance, max_per_param)
}

/// Compares caller-provided gradients against central differences.
pub fn check_gradients<F>(
    store: &mut ParameterStore,
    mut loss_fn: F,
    analytic: &[Tensor],
    step: f64,
    tolerance: f64,
    max_per_param: Option<usize>,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParameterStore, &mut Tape) -> Result<Var>,
{
    if analytic.len() != store.len() {
        return Err(Error::Contract(format!("{} analytic gradients for {} parameters", analytic.len(), store.len())));
    }
    let first = eval(store, &mut loss_fn)?;
    let second = eval(store, &mut loss_fn)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::Contract(format!("loss is not deterministic: {first} then {second}")));
    }

    let mut params = Vec::with_capacity(store.len());
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let n = store.value(id).len();
        let stride = match max_per_param {
            Some(cap) if cap > 0 && n > cap => n.div_ceil(cap),
            _ => 1,
        };
        let mut worst = (0.0_f64, 0usize);
        let mut checked = 0;
        for i in (0..n).step_by(stride) {
            let orig = store.value(id).data()[i];
            store.value_mut(id).data_mut()[i] = orig + step;
            let plus = eval(store, &mut loss_fn);
            store.value_mut(id).data_mut()[i] = orig - step;
            let minus = eval(store, &mut loss_fn);
            store.value_mut(id).data_mut()[i] = orig;
            let numeric = (plus? - minus?) / (2.0 * step);
            let err = relative_error(analytic[id.index()].data()[i], numeric);
            if err > worst.0 || err.is_nan() {
                worst = (if err.is_nan() { f64::INFINITY } else { err }, i);
            }
            checked += 1;
        }
        params.push(ParamCheck {
            name: store.name(id).to_string(),
            checked,
            max_rel_error: worst.0,
            worst_index: worst.1,
        });
    }
    Ok(GradCheckReport { step, tolerance, params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::ParamId;

    fn linear_setup() -> (ParameterStore, ParamId, ParamId) {
        let mut s = ParameterStore::new();
        let w = s.add("w", Tensor::matrix(3, 2, vec![0.1, -0.4, 0.7, 1.2, -0.3, 0.05]).unwrap()).unwrap();
        let b = s.add("b", Tensor::new(vec![2], vec![0.2, -0.1]).unwrap()).unwrap();
        (s, w, b)
    }

    fn linear_loss(w: ParamId, b: ParamId) -> impl FnMut(&ParameterStore, &mut Tape) -> Result<Var> {
        move |s, tape| {
            let x = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, -1.0, 0.5, -0.5, 3.0]).unwrap());
            let wv = tape.param(s, w);
            let bv = tape.param(s, b);
            let y = tape.affine(x, wv, Some(bv))?;
            let y = tape.mul_const(y, vec![1.0, -2.0, 0.5, 3.0])?;
            Ok(tape.sum(y))
        }
    }

    #[test]
    fn linear_model_is_exact() {
        let (mut s, w, b) = linear_setup();
        let report = finite_difference_check(&mut s, linear_loss(w, b), 1e-5, 1e-8, None).unwrap();
        assert!(report.passed(), "{report:?}");
        assert!(report.max_rel_error() < 1e-8);
        assert_eq!(report.params.iter().map(|p| p.checked).sum::<usize>(), 8);
    }

    #[test]
    fn corrupted_gradient_fails() {
        let (mut s, w, b) = linear_setup();
        let mut tape = Tape::new();
        let mut f = linear_loss(w, b);
        let loss = f(&s, &mut tape).unwrap();
        tape.backward(loss, &mut s).unwrap();
        let mut analytic = s.grads().to_vec();
        s.zero_grad();
        analytic[w.index()].data_mut()[3] *= 1.01;
        let report = check_gradients(&mut s, f, &analytic, 1e-5, 1e-4, None).unwrap();
        assert!(!report.passed());
        assert_eq!(report.failures().next().unwrap().name, "w");
    }

    #[test]
    fn nondeterministic_loss_is_rejected() {
        let (mut s, w, _) = linear_setup();
        let mut calls = 0.0;
        let result = finite_difference_check(
            &mut s,
            |s, tape| {
                calls += 1.0;
                let wv = tape.param(s, w);
                let y = tape.scale(wv, calls);
                Ok(tape.sum(y))
            },
            1e-5,
            1e-4,
            None,
        );
        assert!(matches!(result, Err(Error::Contract(_))));
    }
}
