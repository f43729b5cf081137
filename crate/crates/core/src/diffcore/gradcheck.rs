//! Central finite-difference gradient checking.

use super::matrix::Matrix;
use super::tape::{NodeId, Tape, TapeError};

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// `max |analytic − numeric| / max(1, |numeric|)` over every parameter entry.
    pub max_rel_error: f64,
    /// Closest approach to a kink (relu input, `min` gap, or a noted decision
    /// boundary) over all evaluations. A margin below `10·ε` means a
    /// perturbation may have crossed the kink and the comparison is unreliable.
    pub kink_margin: f64,
    pub entries: usize,
}

impl GradCheckReport {
    pub fn kink_safe(&self, epsilon: f64) -> bool {
        self.kink_margin >= 10.0 * epsilon
    }
}

/// Compares the tape's analytic gradients with central differences.
///
/// `build` receives one parameter node per matrix in `point` and returns a
/// scalar root. Stop-gradient nodes are frozen at their base-point values
/// during the perturbed evaluations, so the numeric side differentiates the
/// surrogate in which stopped quantities are constants.
pub fn gradient_check<F>(build: F, point: &[Matrix], epsilon: f64) -> Result<f64, TapeError>
where
    F: Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId, TapeError>,
{
    gradient_check_report(build, point, epsilon).map(|r| r.max_rel_error)
}

pub fn gradient_check_report<F>(build: F, point: &[Matrix], epsilon: f64) -> Result<GradCheckReport, TapeError>
where
    F: Fn(&mut Tape<'_>, &[NodeId]) -> Result<NodeId, TapeError>,
{
    let mut tape = Tape::new();
    let ids: Vec<NodeId> = point.iter().map(|m| tape.parameter(m.clone())).collect();
    let root = build(&mut tape, &ids)?;
    let grads = tape.backward(root)?;
    let analytic: Vec<Matrix> = ids.iter().map(|&id| grads.wrt(id)).collect();
    let frozen = tape.stop_values();
    let mut margin = tape.kink_margin();

    let mut eval = |params: &[Matrix]| -> Result<f64, TapeError> {
        let mut t = Tape::with_frozen_stops(frozen.clone());
        let ids: Vec<NodeId> = params.iter().map(|m| t.parameter(m.clone())).collect();
        let root = build(&mut t, &ids)?;
        margin = margin.min(t.kink_margin());
        Ok(t.value(root).item())
    };

    let mut worst = 0.0_f64;
    let mut entries = 0;
    let mut work: Vec<Matrix> = point.to_vec();
    for (p, grad) in analytic.iter().enumerate() {
        for e in 0..point[p].len() {
            let base = point[p].data()[e];
            work[p].data_mut()[e] = base + epsilon;
            let plus = eval(&work)?;
            work[p].data_mut()[e] = base - epsilon;
            let minus = eval(&work)?;
            work[p].data_mut()[e] = base;
            let numeric = (plus - minus) / (2.0 * epsilon);
            let err = (grad.data()[e] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
            entries += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        kink_margin: margin,
        entries,
    })
}
