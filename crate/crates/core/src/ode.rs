//! Fixed-step explicit integrators built from tape primitives, so gradients
//! flow through whole trajectories (discretize-then-optimize).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tape, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OdeError {
    #[error("non-finite state after solver step {step} (t = {time})")]
    NonFinite { step: usize, time: f64 },
    #[error("query times must be strictly ascending; got {prev} then {next}")]
    NonAscending { prev: f64, next: f64 },
    #[error("vector field returned shape {got:?} for state shape {want:?}")]
    FieldShape { want: Vec<usize>, got: Vec<usize> },
    #[error("invalid solver configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, OdeError>;

/// Right-hand side `dy/dt = f(t, y, ctx)`. Must return a tensor shaped like `state`.
pub trait VectorField {
    fn eval(&self, tape: &mut Tape, t: f64, state: Var, ctx: Option<Var>) -> Result<Var>;
}

impl<F> VectorField for F
where
    F: Fn(&mut Tape, f64, Var, Option<Var>) -> Result<Var>,
{
    fn eval(&self, tape: &mut Tape, t: f64, state: Var, ctx: Option<Var>) -> Result<Var> {
        self(tape, t, state, ctx)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub method: Method,
    pub steps_per_unit: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            steps_per_unit: 10,
        }
    }
}

impl SolverConfig {
    pub fn new(method: Method, steps_per_unit: usize) -> Result<Self> {
        let cfg = Self {
            method,
            steps_per_unit,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps_per_unit == 0 {
            return Err(OdeError::Config("steps_per_unit must be at least 1".into()));
        }
        Ok(())
    }

    /// Number of equal steps used to cover `span` time units (at least one).
    pub fn steps_for(&self, span: f64) -> usize {
        ((span.abs() * self.steps_per_unit as f64) - 1e-9).ceil().max(1.0) as usize
    }
}

fn axpy(tape: &mut Tape, y: Var, h: f64, k: Var) -> Result<Var> {
    let hk = tape.scale(k, h);
    Ok(tape.add(y, hk)?)
}

fn checked_eval(
    f: &dyn VectorField,
    tape: &mut Tape,
    t: f64,
    y: Var,
    ctx: Option<Var>,
) -> Result<Var> {
    let k = f.eval(tape, t, y, ctx)?;
    if tape.shape(k) != tape.shape(y) {
        return Err(OdeError::FieldShape {
            want: tape.shape(y).to_vec(),
            got: tape.shape(k).to_vec(),
        });
    }
    Ok(k)
}

/// Integrates from `t0` to `t1` (either direction) and returns `y(t1)`.
pub fn integrate(
    f: &dyn VectorField,
    tape: &mut Tape,
    y0: Var,
    t0: f64,
    t1: f64,
    ctx: Option<Var>,
    cfg: &SolverConfig,
) -> Result<Var> {
    cfg.validate()?;
    if t0 == t1 {
        return Ok(y0);
    }
    let n = cfg.steps_for(t1 - t0);
    let h = (t1 - t0) / n as f64;
    let mut y = y0;
    for step in 0..n {
        let t = t0 + step as f64 * h;
        y = match cfg.method {
            Method::Euler => {
                let k = checked_eval(f, tape, t, y, ctx)?;
                axpy(tape, y, h, k)?
            }
            Method::Rk4 => {
                let k1 = checked_eval(f, tape, t, y, ctx)?;
                let y2 = axpy(tape, y, 0.5 * h, k1)?;
                let k2 = checked_eval(f, tape, t + 0.5 * h, y2, ctx)?;
                let y3 = axpy(tape, y, 0.5 * h, k2)?;
                let k3 = checked_eval(f, tape, t + 0.5 * h, y3, ctx)?;
                let y4 = axpy(tape, y, h, k3)?;
                let k4 = checked_eval(f, tape, t + h, y4, ctx)?;
                let k23 = tape.add(k2, k3)?;
                let k23 = tape.scale(k23, 2.0);
                let s = tape.add(k1, k23)?;
                let s = tape.add(s, k4)?;
                axpy(tape, y, h / 6.0, s)?
            }
        };
        if !tape.value(y).is_finite() {
            return Err(OdeError::NonFinite {
                step,
                time: t + h,
            });
        }
    }
    Ok(y)
}

/// States at each of `times`; `times[0]` is the time of `y0`.
pub fn integrate_path(
    f: &dyn VectorField,
    tape: &mut Tape,
    y0: Var,
    times: &[f64],
    ctx: Option<Var>,
    cfg: &SolverConfig,
) -> Result<Vec<Var>> {
    for w in times.windows(2) {
        if !(w[1] > w[0]) {
            return Err(OdeError::NonAscending {
                prev: w[0],
                next: w[1],
            });
        }
    }
    let mut states = Vec::with_capacity(times.len());
    if times.is_empty() {
        return Ok(states);
    }
    states.push(y0);
    for w in times.windows(2) {
        let prev = *states.last().unwrap();
        states.push(integrate(f, tape, prev, w[0], w[1], ctx, cfg)?);
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn identity_field(_: &mut Tape, _: f64, y: Var, _: Option<Var>) -> Result<Var> {
        Ok(y)
    }

    fn run_scalar(f: &dyn VectorField, y0: f64, t0: f64, t1: f64, cfg: SolverConfig) -> f64 {
        let mut tape = Tape::new();
        let y = tape.constant(Tensor::vector(vec![y0]));
        let out = integrate(f, &mut tape, y, t0, t1, None, &cfg).unwrap();
        tape.value(out).item()
    }

    #[test]
    fn zero_field_keeps_state() {
        let zero = |tape: &mut Tape, _: f64, y: Var, _: Option<Var>| -> Result<Var> { Ok(tape.scale(y, 0.0)) };
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![1.5, -2.0]));
        let y = integrate(&zero, &mut tape, y0, 0.0, 3.0, None, &SolverConfig::default()).unwrap();
        assert_eq!(tape.value(y).data(), &[1.5, -2.0]);
    }

    #[test]
    fn exponential_growth_rk4() {
        let cfg = SolverConfig::new(Method::Rk4, 100).unwrap();
        let e = run_scalar(&identity_field, 1.0, 0.0, 1.0, cfg);
        assert!((e - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn backward_in_time() {
        let one = |tape: &mut Tape, _: f64, y: Var, _: Option<Var>| -> Result<Var> {
            let z = tape.scale(y, 0.0);
            Ok(tape.add_scalar(z, 1.0))
        };
        let y = run_scalar(&one, 5.0, 1.0, 0.0, SolverConfig::default());
        assert!((y - 4.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_segment_skips_field() {
        let never = |_: &mut Tape, _: f64, _: Var, _: Option<Var>| -> Result<Var> {
            panic!("field must not be evaluated")
        };
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![2.0]));
        let y = integrate(&never, &mut tape, y0, 0.7, 0.7, None, &SolverConfig::default()).unwrap();
        assert_eq!(y, y0);
    }

    #[test]
    fn path_of_linear_time_field() {
        // dy/dt = 2t, y(0) = 0  =>  y = t^2
        let field = |tape: &mut Tape, t: f64, y: Var, _: Option<Var>| -> Result<Var> {
            let z = tape.scale(y, 0.0);
            Ok(tape.add_scalar(z, 2.0 * t))
        };
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![0.0]));
        let cfg = SolverConfig::new(Method::Rk4, 100).unwrap();
        let states = integrate_path(&field, &mut tape, y0, &[0.0, 1.0, 2.0], None, &cfg).unwrap();
        let vals: Vec<f64> = states.iter().map(|&s| tape.value(s).item()).collect();
        for (v, want) in vals.iter().zip([0.0, 1.0, 4.0]) {
            assert!((v - want).abs() < 1e-6);
        }
        assert_eq!(states[0], y0);

        let single = integrate_path(&field, &mut tape, y0, &[0.0], None, &cfg).unwrap();
        assert_eq!(single, vec![y0]);
    }

    #[test]
    fn path_concatenation_matches_single_span() {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![0.3, -1.2]));
        let cfg = SolverConfig::default();
        let field = |tape: &mut Tape, t: f64, y: Var, _: Option<Var>| -> Result<Var> {
            let s = tape.tanh(y);
            Ok(tape.add_scalar(s, t.sin()))
        };
        let path = integrate_path(&field, &mut tape, y0, &[0.0, 1.0, 2.0], None, &cfg).unwrap();
        let direct = integrate(&field, &mut tape, y0, 0.0, 2.0, None, &cfg).unwrap();
        for (a, b) in tape.value(path[2]).data().iter().zip(tape.value(direct).data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn non_ascending_rejected() {
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![0.0]));
        let err = integrate_path(&identity_field, &mut tape, y0, &[0.0, 2.0, 1.0], None, &SolverConfig::default());
        assert!(matches!(err, Err(OdeError::NonAscending { .. })));
    }

    #[test]
    fn blow_up_reports_step() {
        let cube = |tape: &mut Tape, _: f64, y: Var, _: Option<Var>| -> Result<Var> {
            let sq = tape.square(y);
            let sq = tape.square(sq);
            Ok(tape.mul(sq, y)?)
        };
        let mut tape = Tape::new();
        let y0 = tape.constant(Tensor::vector(vec![10.0]));
        let cfg = SolverConfig::new(Method::Euler, 1).unwrap();
        let err = integrate(&cube, &mut tape, y0, 0.0, 5.0, None, &cfg).unwrap_err();
        assert!(matches!(err, OdeError::NonFinite { .. }));
    }

    fn endpoint_error(method: Method, n: usize) -> f64 {
        let cfg = SolverConfig::new(method, n).unwrap();
        (run_scalar(&identity_field, 1.0, 0.0, 1.0, cfg) - std::f64::consts::E).abs()
    }

    #[test]
    fn convergence_ratios() {
        let r = endpoint_error(Method::Rk4, 10) / endpoint_error(Method::Rk4, 20);
        assert!((12.0..=20.0).contains(&r), "rk4 ratio {r}");
        let r = endpoint_error(Method::Euler, 100) / endpoint_error(Method::Euler, 200);
        assert!((1.8..=2.2).contains(&r), "euler ratio {r}");
    }

    #[test]
    fn gradient_through_solver_matches_fd() {
        // dy/dt = tanh(w * y), gradient of y(1) wrt y0 and w
        let run = |y0: f64, w: f64, grad: bool| -> (f64, f64, f64) {
            let mut tape = Tape::new();
            let y = tape.input(Tensor::vector(vec![y0]));
            let wv = tape.input(Tensor::vector(vec![w]));
            let field = move |tape: &mut Tape, _: f64, s: Var, c: Option<Var>| -> Result<Var> {
                let p = tape.mul(s, c.unwrap())?;
                Ok(tape.tanh(p))
            };
            let out = integrate(&field, &mut tape, y, 0.0, 1.0, Some(wv), &SolverConfig::default()).unwrap();
            let loss = tape.sum(out);
            let v = tape.value(loss).item();
            if !grad {
                return (v, 0.0, 0.0);
            }
            let g = tape.backward(loss).unwrap();
            (v, g.wrt(&tape, y).unwrap().item(), g.wrt(&tape, wv).unwrap().item())
        };
        let (_, gy, gw) = run(0.4, 1.3, true);
        let h = 1e-5;
        let fdy = (run(0.4 + h, 1.3, false).0 - run(0.4 - h, 1.3, false).0) / (2.0 * h);
        let fdw = (run(0.4, 1.3 + h, false).0 - run(0.4, 1.3 - h, false).0) / (2.0 * h);
        assert!(((gy - fdy) / fdy).abs() < 1e-3);
        assert!(((gw - fdw) / fdw).abs() < 1e-3);
    }
}
