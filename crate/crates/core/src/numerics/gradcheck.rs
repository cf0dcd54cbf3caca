use super::array::Array;
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    /// Max over compared coordinates of `|ad - fd| / max(1e-8, |fd| + |ad|)`.
    pub max_rel_err: f64,
    /// Coordinate holding the maximum.
    pub worst_index: Option<usize>,
    /// Coordinates skipped because one-sided slopes disagree (a kink).
    pub non_smooth: Vec<usize>,
    /// Coordinates skipped because `f` was non-finite nearby.
    pub non_finite: Vec<usize>,
    pub compared: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.non_finite.is_empty() && self.max_rel_err <= tol
    }
}

fn eval<F>(f: &F, x: &Array) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let mut tape = Tape::new();
    let v = tape.leaf(x.clone());
    let out = f(&mut tape, v)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Shape {
            op: "check_gradients",
            lhs: value.shape().to_vec(),
            rhs: vec![],
        });
    }
    Ok(value.item())
}

/// Compares the tape gradient of scalar `f` at `point` with central
/// differences of step `step`.
///
/// A coordinate is treated as a kink and excluded when its forward and
/// backward one-sided slopes differ by more than `100 * step * max(1, |central|)`,
/// which no twice-differentiable `f` with moderate curvature triggers.
pub fn check_gradients<F>(f: F, point: &Array, step: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    if step <= 0.0 || !step.is_finite() {
        return Err(Error::invalid(format!("finite-difference step must be > 0, got {step}")));
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone());
    let out = f(&mut tape, x)?;
    let f0 = tape.value(out).item();
    let analytic = tape.backward(out).wrt(x);

    let mut report = GradCheck::default();
    if !f0.is_finite() {
        report.non_finite = (0..point.len()).collect();
        return Ok(report);
    }
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + step;
        let fp = eval(&f, &probe)?;
        probe.data_mut()[i] = orig - step;
        let fm = eval(&f, &probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            report.non_finite.push(i);
            continue;
        }
        let central = (fp - fm) / (2.0 * step);
        let forward = (fp - f0) / step;
        let backward = (f0 - fm) / step;
        if (forward - backward).abs() > 100.0 * step * central.abs().max(1.0) {
            report.non_smooth.push(i);
            continue;
        }
        let ad = analytic.data()[i];
        let rel = (ad - central).abs() / (central.abs() + ad.abs()).max(1e-8);
        report.compared += 1;
        if report.worst_index.is_none() || rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = Some(i);
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = check_gradients(|t, x| t.mul(x, x), &Array::scalar(3.0), 1e-4).unwrap();
        assert!(r.max_rel_err <= 1e-8, "{r:?}");
        assert_eq!(r.compared, 1);
    }

    #[test]
    fn abs_at_zero_is_reported_as_kink() {
        let r = check_gradients(|t, x| Ok(t.abs(x)), &Array::scalar(0.0), 1e-4).unwrap();
        assert_eq!(r.non_smooth, vec![0]);
        assert_eq!(r.compared, 0);
    }

    #[test]
    fn square_at_zero_is_smooth() {
        let r = check_gradients(|t, x| t.mul(x, x), &Array::scalar(0.0), 1e-4).unwrap();
        assert!(r.non_smooth.is_empty());
        assert_eq!(r.compared, 1);
    }

    #[test]
    fn non_finite_is_reported_not_compared() {
        let r = check_gradients(|t, x| Ok(t.log(x)), &Array::scalar(-1.0), 1e-4).unwrap();
        assert!(!r.non_finite.is_empty());
        assert!(!r.passes(1.0));
    }

    #[test]
    fn rejects_non_positive_step() {
        assert!(check_gradients(|t, x| Ok(t.sum(x)), &Array::scalar(1.0), 0.0).is_err());
    }
}
