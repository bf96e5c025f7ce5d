//! Central finite-difference check of tape gradients.

use super::{OpKind, Tape, Tensor, Var};
use crate::error::Result;

/// Max relative error between the tape gradient of `f` at `x` and central
/// differences `(f(x+εeᵢ) − f(x−εeᵢ)) / 2ε`, in double precision.
///
/// The relative error of element `i` is
/// `|analytic − numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, x: &Tensor<f64>, epsilon: f64) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    grad_check_with_fault(f, x, epsilon, None)
}

pub fn grad_check_with_fault<F>(f: F, x: &Tensor<f64>, epsilon: f64, fault: Option<OpKind>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let mut input = x.clone();
    input.set_requires_grad(true);
    let mut tape = Tape::new();
    tape.inject_backward_fault(fault);
    let xv = tape.leaf(&input);
    let loss = f(&mut tape, xv)?;
    tape.backward(loss)?;
    let analytic = tape
        .grad(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.numel()]);

    let eval = |probe: &Tensor<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let v = tape.leaf(probe);
        let out = f(&mut tape, v)?;
        Ok(tape.scalar(out))
    };

    let mut worst = 0.0f64;
    let mut probe = x.clone();
    probe.set_requires_grad(false);
    for (i, &a) in analytic.iter().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + epsilon;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - epsilon;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * epsilon);
        let denom = a.abs().max(numeric.abs()).max(1e-8);
        worst = worst.max((a - numeric).abs() / denom);
    }
    Ok(worst)
}

/// One named entry of a gradient-check run.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

type Case = Box<dyn Fn(Option<OpKind>) -> Result<f64>>;

/// A list of named gradient checks run together.
#[derive(Default)]
pub struct GradCheckSuite {
    cases: Vec<(String, f64, Case)>,
}

impl GradCheckSuite {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers `f` checked at `x` with step `epsilon`; passes below `tolerance`.
    pub fn add<F>(&mut self, name: &str, x: Tensor<f64>, epsilon: f64, tolerance: f64, f: F)
    where
        F: Fn(&mut Tape<f64>, Var) -> Result<Var> + 'static,
    {
        let case: Case = Box::new(move |fault| grad_check_with_fault(&f, &x, epsilon, fault));
        self.cases.push((name.to_string(), tolerance, case));
    }

    pub fn len(&self) -> usize {
        self.cases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cases.is_empty()
    }

    pub fn run(&self, fault: Option<OpKind>) -> Result<Vec<GradCheckOutcome>> {
        self.cases
            .iter()
            .map(|(name, tol, case)| {
                Ok(GradCheckOutcome {
                    name: name.clone(),
                    max_rel_error: case(fault)?,
                    tolerance: *tol,
                })
            })
            .collect()
    }
}
