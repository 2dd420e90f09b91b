use crate::error::{Result, TensorError};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Worst-case disagreement for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradError {
    /// Position of the tensor in the slice handed to [`grad_check`].
    pub param: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub worst_element: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub entries: Vec<ParamGradError>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries
            .iter()
            .map(|e| e.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

// Relative errors are measured against max(|analytic|, |numeric|, FLOOR) so
// entries whose true gradient is ~0 are judged on absolute error instead.
const FLOOR: f64 = 1e-5;

fn eval<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.scalar(out)
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences `(f(x+εe) - f(x-εe)) / 2ε`, element by element.
///
/// Only tensors with `requires_grad` set are checked; the rest are treated
/// as constants and left out of the report.
pub fn grad_check<F>(f: F, params: &mut [Tensor], step: f64, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let first = eval(&f, params)?;
    let second = eval(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(TensorError::NondeterministicFunction { first, second });
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p)).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Option<Vec<f64>>> = vars.iter().map(|&v| tape.grad(v).map(<[f64]>::to_vec)).collect();

    let mut entries = Vec::new();
    for (pi, grads) in analytic.into_iter().enumerate() {
        if !params[pi].requires_grad() {
            continue;
        }
        let grads = grads.unwrap_or_else(|| vec![0.0; params[pi].numel()]);
        let mut worst = ParamGradError {
            param: pi,
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            worst_element: 0,
        };
        for (e, &a) in grads.iter().enumerate() {
            let orig = params[pi].data()[e];
            params[pi].data_mut()[e] = orig + step;
            let up = eval(&f, params)?;
            params[pi].data_mut()[e] = orig - step;
            let down = eval(&f, params)?;
            params[pi].data_mut()[e] = orig;
            let numeric = (up - down) / (2.0 * step);
            let abs = (a - numeric).abs();
            let rel = abs / a.abs().max(numeric.abs()).max(FLOOR);
            worst.max_abs_error = worst.max_abs_error.max(abs);
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst_element = e;
            }
        }
        entries.push(worst);
    }
    Ok(GradCheckReport { entries, tolerance })
}
