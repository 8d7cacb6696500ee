//! Central-difference gradient checking.
//!
//! The numeric side only ever evaluates the function forward on a no-grad tape,
//! so it shares no code path with the backward rules it verifies.

use crate::{Real, Result, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(1, |numeric|)` over all checked elements.
    pub max_rel_error: f64,
    pub checked: usize,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
}

/// Compares the tape's gradients of scalar `f` against central differences with step `h`.
///
/// `f` receives fresh leaf variables for `inputs`, in order. When `max_per_input`
/// is set, only that many elements of each input are probed (evenly strided).
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, max_per_input: Option<usize>, f: F) -> Result<GradCheckReport>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let eval = |probe: &[Tensor<T>]| -> Result<f64> {
        let mut tape = Tape::no_grad();
        let vars: Vec<Var> = probe.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).data()[0].f64())
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut probe: Vec<Tensor<T>> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let n = input.numel();
        let stride = match max_per_input {
            Some(limit) if limit > 0 && n > limit => n.div_ceil(limit),
            _ => 1,
        };
        let analytic = grads.get(vars[i]).map(|g| g.to_f64()).unwrap_or_else(|| vec![0.0; n]);
        for e in (0..n).step_by(stride) {
            let orig = input.data()[e];
            probe[i].data_mut()[e] = T::of(orig.f64() + h);
            let plus = eval(&probe)?;
            probe[i].data_mut()[e] = T::of(orig.f64() - h);
            let minus = eval(&probe)?;
            probe[i].data_mut()[e] = orig;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (analytic[e] - numeric).abs() / numeric.abs().max(1.0);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = (i, e);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}
