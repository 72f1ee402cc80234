//! Central finite-difference gradient checking at 64-bit precision.
//!
//! The numerical side only ever reads forward values, so it stays independent
//! of every backward rule it is used to check.

use crate::error::Result;
use crate::params::ParamTree;
use crate::tape::{Tape, Var};

/// Per-parameter outcome of [`check_gradients`].
#[derive(Debug, Clone)]
pub struct GradCheck {
    pub path: String,
    /// `|analytic - numeric|_2 / max(|analytic|_2, |numeric|_2)`, or the
    /// absolute difference norm when both gradients vanish.
    pub rel_error: f64,
    pub abs_error: f64,
    /// Larger of the analytic and numeric gradient norms.
    pub scale: f64,
}

impl GradCheck {
    /// Relative error below `rel`, or both gradients below `floor` and their
    /// difference below `abs`.
    pub fn passes(&self, rel: f64, floor: f64, abs: f64) -> bool {
        self.rel_error < rel || (self.scale < floor && self.abs_error < abs)
    }
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub entries: Vec<GradCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(|e| e.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradCheck> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }
}

fn compare(path: &str, analytic: &[f64], numeric: &[f64]) -> GradCheck {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, n)| a - n).collect();
    let scale = norm(analytic).max(norm(numeric));
    let abs_error = norm(&diff);
    GradCheck {
        path: path.to_string(),
        rel_error: if scale < 1e-10 { abs_error } else { abs_error / scale },
        abs_error,
        scale,
    }
}

/// Compares the tape gradient of `f` with central differences of step `eps`
/// for every scalar of every tensor in `params`.
///
/// `f` must bind parameters through [`Tape::bind`] and return a one-element
/// loss. It is evaluated `1 + 2 * params.num_scalars()` times.
pub fn check_gradients<F>(params: &ParamTree<f64>, eps: f64, f: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamTree<f64>) -> Result<Var>,
{
    let mut tape = Tape::new();
    let loss = f(&mut tape, params)?;
    let analytic = tape.backward(loss)?;

    let eval = |tree: &ParamTree<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, tree)?;
        tape.value(loss)?.item()
    };

    let mut report = GradCheckReport::default();
    let mut probe = params.clone();
    for (path, tensor) in params.iter() {
        let mut numeric = Vec::with_capacity(tensor.numel());
        for i in 0..tensor.numel() {
            let base = tensor.data()[i];
            probe.get_mut(path)?.data_mut()[i] = base + eps;
            let plus = eval(&probe)?;
            probe.get_mut(path)?.data_mut()[i] = base - eps;
            let minus = eval(&probe)?;
            probe.get_mut(path)?.data_mut()[i] = base;
            numeric.push((plus - minus) / (2.0 * eps));
        }
        let grad = match analytic.get(path) {
            Ok(g) => g.data().to_vec(),
            Err(_) => vec![0.0; tensor.numel()],
        };
        report.entries.push(compare(path, &grad, &numeric));
    }
    Ok(report)
}
