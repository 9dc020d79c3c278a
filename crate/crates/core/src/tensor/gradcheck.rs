//! Finite-difference verification of tape gradients.

use super::dense::Tensor;
use super::scalar::Scalar;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    /// Central-difference half step.
    pub epsilon: f64,
    /// Denominator floor for the relative error, so that elements whose true
    /// gradient is zero are judged on absolute error instead.
    pub floor: f64,
    /// Check at most this many evenly spaced elements of each input.
    pub max_elements_per_input: Option<usize>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            floor: 1e-2,
            max_elements_per_input: None,
        }
    }
}

/// Worst element of one checked input.
#[derive(Clone, Debug, PartialEq)]
pub struct InputCheck {
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
    pub absolute_error: f64,
    pub checked: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub inputs: Vec<InputCheck>,
}

impl GradCheckReport {
    pub fn max_relative_error(&self) -> f64 {
        self.worst().map_or(0.0, |c| c.relative_error)
    }

    /// Worst input by relative error, ties broken by absolute error.
    pub fn worst(&self) -> Option<&InputCheck> {
        self.inputs.iter().max_by(|a, b| rank(a).partial_cmp(&rank(b)).unwrap())
    }
}

fn rank(c: &InputCheck) -> (f64, f64) {
    (c.relative_error, c.absolute_error)
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<T, F>(f: &F, inputs: &[Tensor<T>], requires_grad: bool) -> Result<(Tape<T>, Vec<Var>, Var)>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::default();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), requires_grad)).collect();
    let out = f(&mut tape, &vars)?;
    let numel = tape.value(out).numel();
    if numel != 1 {
        return Err(Error::shape("gradient_check", "output element count", 1, numel));
    }
    Ok((tape, vars, out))
}

/// Compares the tape gradient of the scalar function `f` with respect to each
/// of `inputs` against central differences. Run it on `f64` tapes for
/// tolerances much below `1e-3`.
pub fn gradient_check<T, F>(f: F, inputs: &[Tensor<T>], options: GradCheckOptions) -> Result<GradCheckReport>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    if !(options.epsilon > 0.0 && options.epsilon <= 1e-2) {
        return Err(Error::invalid("gradient_check", "epsilon must lie in (0, 1e-2]"));
    }
    let (mut tape, vars, out) = evaluate(&f, inputs, true)?;
    tape.backward(out)?;
    let analytic: Vec<Tensor<T>> = vars.iter().map(|&v| tape.grad(v).expect("leaf requires grad")).collect();
    drop(tape);

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, grad) in analytic.iter().enumerate() {
        let numel = inputs[i].numel();
        let picks: Vec<usize> = match options.max_elements_per_input {
            Some(max) if max < numel => (0..max).map(|k| k * numel / max).collect(),
            _ => (0..numel).collect(),
        };
        let mut worst: Option<InputCheck> = None;
        for &j in &picks {
            let original = inputs[i].data()[j];
            let plus = original + T::of(options.epsilon);
            let minus = original - T::of(options.epsilon);
            work[i].data_mut()[j] = plus;
            let f_plus = evaluate(&f, &work, false).map(|(t, _, o)| t.value(o).data()[0])?;
            work[i].data_mut()[j] = minus;
            let f_minus = evaluate(&f, &work, false).map(|(t, _, o)| t.value(o).data()[0])?;
            work[i].data_mut()[j] = original;

            // divide by the step actually taken after rounding
            let numeric = (f_plus.as_f64() - f_minus.as_f64()) / (plus.as_f64() - minus.as_f64());
            let a = grad.data()[j].as_f64();
            let check = InputCheck {
                element: j,
                analytic: a,
                numeric,
                relative_error: relative_error(a, numeric, options.floor),
                absolute_error: (a - numeric).abs(),
                checked: picks.len(),
            };
            if worst.as_ref().is_none_or(|w| rank(&check) > rank(w)) {
                worst = Some(check);
            }
        }
        report.push(worst.unwrap_or(InputCheck {
            element: 0,
            analytic: 0.0,
            numeric: 0.0,
            relative_error: 0.0,
            absolute_error: 0.0,
            checked: 0,
        }));
    }
    Ok(GradCheckReport { inputs: report })
}
