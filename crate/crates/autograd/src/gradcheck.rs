//! Central finite-difference checks of tape gradients.

use crate::tape::{Mat, Tape, Var};

/// Outcome of comparing analytic and numeric gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_err: f64,
    /// Number of scalar partials compared.
    pub checked: usize,
    /// `(input index, flat element index)` of the worst partial.
    pub worst: Option<(usize, usize)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol
    }
}

/// Denominator floor of the relative error, so partials that are
/// numerically zero are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-3;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares the gradient of the scalar built by `f` with respect to every
/// element of every input against central differences with step `step`.
pub fn check_gradients<F>(inputs: &[Mat], step: f64, f: F) -> GradCheckReport
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let eval = |values: &[Mat]| -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|m| tape.constant(m.clone())).collect();
        let out = f(&mut tape, &vars);
        tape.scalar(out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf(m.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out);

    let mut report = GradCheckReport { max_rel_err: 0.0, checked: 0, worst: None };
    let mut probe: Vec<Mat> = inputs.to_vec();
    for (i, input) in inputs.iter().enumerate() {
        let zeros = Mat::zeros(input.dim());
        let analytic = grads.get(vars[i]).unwrap_or(&zeros);
        let ncols = input.ncols();
        for j in 0..input.len() {
            let idx = [j / ncols, j % ncols];
            let orig = input[idx];
            probe[i][idx] = orig + step;
            let plus = eval(&probe);
            probe[i][idx] = orig - step;
            let minus = eval(&probe);
            probe[i][idx] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let err = relative_error(analytic[idx], numeric);
            report.checked += 1;
            if err > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(err);
                if err >= report.max_rel_err {
                    report.worst = Some((i, j));
                }
            }
        }
    }
    report
}
