//! Finite-difference check of reverse-mode gradients.
//!
//! Uses the five-point central stencil
//! `(8(f(x+h) - f(x-h)) - (f(x+2h) - f(x-2h))) / 12h`, whose O(h⁴)
//! truncation error stays well below the tolerance even where a gradient
//! is tiny relative to the curvature around it.

use super::{DiffError, ParamStore, Tape, Var};

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose ±h perturbation changed a branch decision.
    pub skipped: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl GradCheckReport {
    pub fn skipped_fraction(&self) -> f64 {
        let total = self.checked + self.skipped;
        if total == 0 {
            0.0
        } else {
            self.skipped as f64 / total as f64
        }
    }
}

/// `|a - f| / max(|a|, |f|, 1e-6)`
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares analytic gradients of `build` against finite differences on
/// every `stride`-th scalar of every parameter.
pub fn check<F>(store: &mut ParamStore, h: f64, stride: usize, build: F) -> Result<GradCheckReport, DiffError>
where
    F: Fn(&mut Tape) -> Result<Var, DiffError>,
{
    let run = |s: &ParamStore| -> Result<(f64, u64), DiffError> {
        let mut t = Tape::new(s);
        t.set_track_kinks(true);
        let out = build(&mut t)?;
        Ok((t.scalar(out), t.kink_signature()))
    };
    let (grads, base_sig) = {
        let mut t = Tape::new(store);
        t.set_track_kinks(true);
        let out = build(&mut t)?;
        (t.backward(out)?, t.kink_signature())
    };
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.iter().map(|(id, _, _)| id).collect();
    for id in ids {
        let n = store.value(id).len();
        let analytic = grads.get(id).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; n]);
        for i in (0..n).step_by(stride.max(1)) {
            let orig = store.value(id).data()[i];
            let mut f = [0.0; 4];
            let mut same = true;
            for (slot, k) in f.iter_mut().zip([2.0, 1.0, -1.0, -2.0]) {
                store.value_mut(id).data_mut()[i] = orig + k * h;
                let (v, sig) = run(store)?;
                *slot = v;
                same &= sig == base_sig;
            }
            store.value_mut(id).data_mut()[i] = orig;
            if !same {
                report.skipped += 1;
                continue;
            }
            let numeric = (8.0 * (f[1] - f[2]) - (f[0] - f[3])) / (12.0 * h);
            let e = rel_err(analytic[i], numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}
