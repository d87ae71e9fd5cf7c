use super::{NumericsError, ParamStore};

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Floor on the relative-error denominator.
const REL_FLOOR: f64 = 1e-8;

/// Largest mismatch found by [`grad_check`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst: Option<GradMismatch>,
    pub coordinates: usize,
    /// `(analytic, numeric)` for every coordinate, in store order.
    pub pairs: Vec<(f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_error <= tol
    }

    /// Folds another report in, keeping the worst coordinate.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.coordinates += other.coordinates;
        self.pairs.extend_from_slice(&other.pairs);
        if other.max_rel_error > self.max_rel_error || self.worst.is_none() {
            self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
            if other.worst.is_some() {
                self.worst = other.worst;
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares the gradients accumulated in `store` against central differences of `f`.
///
/// `f` only ever sees parameter values; it never reads gradients. Every coordinate of
/// every parameter is perturbed by `±step`. `f` is evaluated twice at the unperturbed
/// point first and must agree with itself bit for bit.
pub fn grad_check<F>(store: &ParamStore, step: f64, mut f: F) -> Result<GradCheckReport, NumericsError>
where
    F: FnMut(&ParamStore) -> Result<f64, NumericsError>,
{
    if !(step > 0.0 && step.is_finite()) {
        return Err(NumericsError::InvalidArgument(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    let first = f(store)?;
    let second = f(store)?;
    if first.to_bits() != second.to_bits() {
        return Err(NumericsError::NonDeterministic { first, second });
    }

    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
        pairs: Vec::new(),
    };
    for id in store.ids() {
        let analytic = store.grad_or_zeros(id);
        for (i, &a) in analytic.iter().enumerate() {
            let orig = store.get(id).data()[i];
            probe.get_mut(id).data_mut()[i] = orig + step;
            let up = f(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig - step;
            let down = f(&probe)?;
            probe.get_mut(id).data_mut()[i] = orig;

            let numeric = (up - down) / (2.0 * step);
            let rel = relative_error(a, numeric);
            report.coordinates += 1;
            report.pairs.push((a, numeric));
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(GradMismatch {
                    param: store.name(id).to_string(),
                    index: i,
                    analytic: a,
                    numeric,
                    rel_error: rel,
                });
            }
        }
    }
    Ok(report)
}
