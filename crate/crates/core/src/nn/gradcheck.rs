//! Central finite-difference verification of analytic gradients.

use serde::Serialize;

use super::params::{Graph, ParamStore};
use super::tape::{Tape, Var};
use super::tensor::{Result, Tensor, TensorError};

/// Outcome of a gradient check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Coordinate (flattened, in check order) with the largest relative error.
    pub worst: Option<String>,
    pub checked: usize,
    pub pass: bool,
}

/// `|a − n| / max(|a|, |n|, 1e-8)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn scalar_value(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        return Err(TensorError::NonScalarRoot(t.shape().to_vec()));
    }
    let y = t.item();
    if !y.is_finite() {
        return Err(TensorError::NonFinite(format!("objective evaluated to {y}")));
    }
    Ok(y)
}

struct Tracker {
    max: f64,
    worst: Option<String>,
    checked: usize,
}

impl Tracker {
    fn new() -> Self {
        Self {
            max: 0.0,
            worst: None,
            checked: 0,
        }
    }

    fn observe(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64) {
        let e = relative_error(analytic, numeric);
        self.checked += 1;
        if e > self.max || self.worst.is_none() {
            self.max = self.max.max(e);
            self.worst = Some(format!("{} (analytic {analytic:.4e}, numeric {numeric:.4e})", label()));
        }
    }

    fn finish(self, tol: f64) -> GradCheckReport {
        GradCheckReport {
            max_rel_err: self.max,
            worst: self.worst,
            checked: self.checked,
            pass: self.max < tol,
        }
    }
}

/// Compares the tape gradient of scalar `f` at `x` with central differences
/// `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h` over every coordinate.
pub fn finite_diff_grad_check<F>(f: F, x: &Tensor, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    let eval = |point: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.constant(point.clone());
        let y = f(&mut tape, v)?;
        scalar_value(&tape, y)
    };

    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let y = f(&mut tape, xv)?;
    scalar_value(&tape, y)?;
    let grads = tape.backward(y)?;
    let analytic = grads
        .get(xv)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut tracker = Tracker::new();
    let mut point = x.clone();
    for i in 0..x.numel() {
        let orig = point.data()[i];
        point.data_mut()[i] = orig + h;
        let up = eval(&point)?;
        point.data_mut()[i] = orig - h;
        let down = eval(&point)?;
        point.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        tracker.observe(|| format!("x[{i}]"), analytic.data()[i], numeric);
    }
    Ok(tracker.finish(tol))
}

/// Gradient check over the parameters of a model. `f` builds the scalar
/// objective on a graph bound to the given store. When `only` is set, just
/// the parameters whose names pass the filter are checked.
pub fn check_param_grads<F>(
    store: &ParamStore,
    f: F,
    h: f64,
    tol: f64,
    only: Option<&dyn Fn(&str) -> bool>,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let eval = |s: &ParamStore| -> Result<f64> {
        let mut g = Graph::new(s, false);
        let y = f(&mut g)?;
        scalar_value(&g.tape, y)
    };

    let mut g = Graph::new(store, true);
    let y = f(&mut g)?;
    scalar_value(&g.tape, y)?;
    let analytic = g.param_grads(y)?;

    let mut work = store.clone();
    let names: Vec<String> = store
        .names()
        .filter(|n| only.map_or(true, |keep| keep(n)))
        .map(str::to_string)
        .collect();
    let mut tracker = Tracker::new();
    for name in names {
        let n = store.get(&name).map_or(0, Tensor::numel);
        let zeros = Tensor::zeros(store.get(&name).map_or(&[][..], Tensor::shape));
        let a = analytic.get(&name).unwrap_or(&zeros);
        for i in 0..n {
            let orig = work.get(&name).expect("present").data()[i];
            work.get_mut(&name).expect("present").data_mut()[i] = orig + h;
            let up = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig - h;
            let down = eval(&work)?;
            work.get_mut(&name).expect("present").data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * h);
            tracker.observe(|| format!("{name}[{i}]"), a.data()[i], numeric);
        }
    }
    Ok(tracker.finish(tol))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_function_is_exact() {
        let x = Tensor::vector(vec![0.3, -1.2, 2.5]);
        let r = finite_diff_grad_check(
            |tape, x| {
                let y = tape.scale(x, 3.0);
                Ok(tape.sum(y))
            },
            &x,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(r.pass, "{r:?}");
        assert!(r.max_rel_err < 1e-9);
        assert_eq!(r.checked, 3);
    }

    #[test]
    fn constant_function_passes_with_zero_gradients() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let r = finite_diff_grad_check(
            |tape, _x| Ok(tape.constant(Tensor::scalar(4.0))),
            &x,
            1e-5,
            1e-9,
        )
        .unwrap();
        assert!(r.pass);
        assert_eq!(r.max_rel_err, 0.0);
    }

    #[test]
    fn non_finite_objective_is_an_error() {
        let x = Tensor::vector(vec![-1.0]);
        let r = finite_diff_grad_check(
            |tape, x| {
                let l = tape.ln(x);
                Ok(tape.sum(l))
            },
            &x,
            1e-5,
            1e-6,
        );
        assert!(matches!(r, Err(TensorError::NonFinite(_))));
    }

    #[test]
    fn wrong_gradient_is_detected() {
        // exp is recorded correctly; compare against a deliberately different point
        let x = Tensor::vector(vec![0.5]);
        let r = finite_diff_grad_check(
            |tape, x| {
                let c = tape.constant(Tensor::vector(vec![0.0]));
                let y = tape.mul(x, c)?; // gradient zero
                let y = tape.sum(y);
                let kick = tape.value(x).data()[0].powi(2);
                Ok(tape.add_scalar(y, kick))
            },
            &x,
            1e-5,
            1e-6,
        )
        .unwrap();
        assert!(!r.pass);
    }
}
