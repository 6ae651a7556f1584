//! Central finite-difference check of the training gradients.

use ndarray::Array2;

use super::trainer::{minibatch, SegmentSet};
use crate::model::{BatchNoise, SeqVae};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Tensor name and flat index of the worst entry.
    pub worst: (String, usize),
    pub worst_values: (f64, f64),
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_err(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares analytic gradients of the mean minibatch objective with central
/// differences for every model weight and every s-vector entry.
pub fn check_gradients(
    model: &mut SeqVae,
    svecs: &mut Array2<f64>,
    set: &SegmentSet,
    idx: &[usize],
    noise: &BatchNoise,
    h: f64,
    floor: f64,
) -> GradCheckReport {
    let r = minibatch(model, svecs, set, idx, noise, true, true);
    let mg = r.model_grad.expect("gradients requested");
    let tg = r.table_grad.expect("gradients requested");
    let mut report = GradCheckReport { checked: 0, max_rel_err: 0.0, worst: (String::new(), 0), worst_values: (0.0, 0.0) };
    let mut note = |name: &str, k: usize, a: f64, n: f64| {
        let e = rel_err(a, n, floor);
        report.checked += 1;
        if e > report.max_rel_err || report.checked == 1 {
            report.max_rel_err = e;
            report.worst = (name.to_string(), k);
            report.worst_values = (a, n);
        }
    };

    let eval = |m: &SeqVae, s: &Array2<f64>| minibatch(m, s, set, idx, noise, true, false).objective;
    let names: Vec<(String, Vec<f64>)> = mg.named_tensors().into_iter().map(|(n, d, _)| (n, d.to_vec())).collect();
    for (slot, (name, grad)) in names.iter().enumerate() {
        for (k, &a) in grad.iter().enumerate() {
            let orig = model.slices_mut()[slot][k];
            model.slices_mut()[slot][k] = orig + h;
            let fp = eval(model, svecs);
            model.slices_mut()[slot][k] = orig - h;
            let fm = eval(model, svecs);
            model.slices_mut()[slot][k] = orig;
            note(name, k, a, (fp - fm) / (2.0 * h));
        }
    }
    for k in 0..svecs.len() {
        let (i, j) = (k / svecs.ncols(), k % svecs.ncols());
        let orig = svecs[[i, j]];
        svecs[[i, j]] = orig + h;
        let fp = eval(model, svecs);
        svecs[[i, j]] = orig - h;
        let fm = eval(model, svecs);
        svecs[[i, j]] = orig;
        note("svector", k, tg[[i, j]], (fp - fm) / (2.0 * h));
    }
    report
}
