//! Central finite-difference checking of analytic gradients.
//!
//! Hinge losses are only piecewise smooth. A loss closure reports, next to
//! its value, a *regime* signature (which hinge terms are active and which
//! sample was chosen as hardest contrast). A coordinate whose ±step probes
//! land in a different regime than the base point straddles a kink; it is
//! flagged unstable and excluded from the error maximum.

/// Value of a loss at a point plus its piecewise regime.
#[derive(Debug, Clone, PartialEq)]
pub struct Probe {
    pub value: f64,
    pub regime: Vec<u64>,
}

impl Probe {
    pub fn smooth(value: f64) -> Self {
        Self {
            value,
            regime: Vec::new(),
        }
    }
}

/// Denominator floor of [`relative_error`]; keeps coordinates with a
/// vanishing gradient from reporting round-off as relative error.
pub const RELATIVE_FLOOR: f64 = 1e-3;

/// `|a − n| / max(|a|, |n|, RELATIVE_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(RELATIVE_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

/// `(f(x + h·e_i) − f(x − h·e_i)) / 2h` for every coordinate.
pub fn central_differences<F: Fn(&[f64]) -> f64>(f: F, point: &[f64], step: f64) -> Vec<f64> {
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateError {
    pub coordinate: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_relative_error: f64,
    pub tolerance: f64,
    /// Up to five worst stable coordinates, worst first.
    pub worst: Vec<CoordinateError>,
    /// Coordinates excluded because a kink lies within ±step.
    pub unstable: Vec<usize>,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < self.tolerance
    }

    /// Fold another report into this one (e.g. across random trials).
    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_relative_error = self.max_relative_error.max(other.max_relative_error);
        self.checked += other.checked;
        self.unstable.extend(other.unstable);
        self.worst.extend(other.worst);
        self.worst.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
        self.worst.truncate(5);
    }

    pub fn empty(tolerance: f64) -> Self {
        Self {
            max_relative_error: 0.0,
            tolerance,
            worst: Vec::new(),
            unstable: Vec::new(),
            checked: 0,
        }
    }
}

/// Compare `analytic` against central differences of `loss` at `point`.
pub fn grad_check<F: Fn(&[f64]) -> Probe>(
    loss: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
    tolerance: f64,
) -> GradCheckReport {
    assert!(step > 0.0, "finite-difference step must be positive");
    assert_eq!(point.len(), analytic.len());
    let base = loss(point).regime;
    let mut x = point.to_vec();
    let mut errors = Vec::with_capacity(point.len());
    let mut unstable = Vec::new();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let plus = loss(&x);
        x[i] = point[i] - step;
        let minus = loss(&x);
        x[i] = point[i];
        if plus.regime != base || minus.regime != base {
            unstable.push(i);
            continue;
        }
        let numeric = (plus.value - minus.value) / (2.0 * step);
        errors.push(CoordinateError {
            coordinate: i,
            analytic: analytic[i],
            numeric,
            relative_error: relative_error(analytic[i], numeric),
        });
    }
    errors.sort_by(|a, b| b.relative_error.total_cmp(&a.relative_error));
    let max_relative_error = errors.first().map_or(0.0, |e| e.relative_error);
    let checked = errors.len();
    errors.truncate(5);
    GradCheckReport {
        max_relative_error,
        tolerance,
        worst: errors,
        unstable,
        checked,
    }
}
