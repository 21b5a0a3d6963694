//! Central finite-difference checks of the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{OpKind, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Gradients smaller than this are compared in absolute rather than relative terms.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    /// Input tensor and flat element index of the worst coordinate.
    pub worst_tensor: usize,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Relative error with a floor on the denominator, see [`GRAD_FLOOR`].
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR)
}

pub fn gradient_check<F>(f: F, at: &Tensor<f64>, h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    gradient_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(at), h, tol)
}

/// Compares the tape gradient of a scalar function of several tensors
/// against central differences `(f(x + h) - f(x - h)) / 2h`, coordinate by
/// coordinate.
pub fn gradient_check_many<F>(f: F, at: &[Tensor<f64>], h: f64, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!("finite-difference step must be positive, got {h}")));
    }
    let eval = |inputs: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out)?;
        if !v.is_scalar() {
            return Err(Error::Tape(format!("gradient check needs a scalar function, got {:?}", v.shape())));
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = at.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| Ok(tape.grad(v)?.map(|g| g.data().to_vec()).unwrap_or_default()))
        .collect::<Result<_>>()?;

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_tensor: 0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
        tol,
        passed: true,
    };
    let mut probe: Vec<Tensor<f64>> = at.to_vec();
    for (ti, grads) in analytic.iter().enumerate() {
        for (i, &a) in grads.iter().enumerate() {
            let orig = probe[ti].data()[i];
            probe[ti].data_mut()[i] = orig + h;
            let fp = eval(&probe)?;
            probe[ti].data_mut()[i] = orig - h;
            let fm = eval(&probe)?;
            probe[ti].data_mut()[i] = orig;
            let n = (fp - fm) / (2.0 * h);
            let r = rel_err(a, n);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max((a - n).abs());
            if r > report.max_rel_err || report.checked == 1 {
                report.max_rel_err = r;
                report.worst_tensor = ti;
                report.worst_index = i;
                report.analytic = a;
                report.numeric = n;
            }
        }
    }
    report.passed = report.max_rel_err <= tol;
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    pub report: GradCheckReport,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("non-empty shape")
}

/// `sum(x * r)` with a fixed random `r`, so every output element carries a distinct weight.
fn weighted_sum(tape: &mut Tape<f64>, x: Var, seed: u64) -> Result<Var> {
    let shape = tape.shape(x)?.to_vec();
    let r = rand_tensor(&mut ChaCha8Rng::seed_from_u64(seed), &shape);
    let r = tape.constant(r);
    let p = tape.mul(x, r)?;
    tape.sum(p)
}

/// Checks every differentiable op on random shapes (at most 16 elements per
/// axis). `fault` corrupts one op's backward rule on every tape built here.
pub fn check_registered_ops(seed: u64, h: f64, tol: f64, fault: Option<OpKind>) -> Result<Vec<OpCheck>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut checks = Vec::new();
    for kind in OpKind::DIFFERENTIABLE {
        let ws = rng.gen::<u64>();
        let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
        let shapes: Vec<Vec<usize>> = match kind {
            OpKind::Add | OpKind::Sub | OpKind::Mul | OpKind::Mse => {
                let s = vec![dim(1, 4), dim(1, 6)];
                vec![s.clone(), s]
            }
            OpKind::Scale | OpKind::Silu | OpKind::Mean | OpKind::Sum => vec![vec![dim(2, 16)]],
            OpKind::MatMul => {
                let (m, k, n) = (dim(1, 5), dim(1, 6), dim(1, 5));
                vec![vec![m, k], vec![k, n]]
            }
            OpKind::AddRowBias => {
                let d = dim(1, 6);
                vec![vec![dim(1, 4), d], vec![d]]
            }
            OpKind::Conv2d => {
                let (cin, cout) = (dim(1, 3), dim(1, 3));
                let (h, w) = (dim(3, 7), dim(3, 7));
                vec![vec![2, cin, h, w], vec![cout, cin, 3, 3], vec![cout]]
            }
            OpKind::Upsample2x => vec![vec![dim(1, 2), dim(1, 3), dim(1, 5), dim(1, 5)]],
            OpKind::ChannelAffine => {
                let (n, c) = (dim(1, 3), dim(1, 4));
                vec![vec![n, c, dim(1, 4), dim(1, 4)], vec![n, c], vec![n, c]]
            }
            OpKind::SpatialMean => vec![vec![dim(1, 3), dim(1, 4), dim(1, 5), dim(1, 5)]],
            OpKind::ConcatChannels => {
                let (n, h, w) = (dim(1, 3), dim(1, 4), dim(1, 4));
                vec![vec![n, dim(1, 3), h, w], vec![n, dim(1, 3), h, w]]
            }
            OpKind::SliceCols => vec![vec![dim(1, 4), 7]],
            OpKind::Gather => vec![vec![5, dim(1, 4)]],
            OpKind::Leaf => unreachable!(),
        };
        let inputs: Vec<Tensor<f64>> = shapes.iter().map(|s| rand_tensor(&mut rng, s)).collect();
        let f = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            tape.inject_fault(fault);
            let y = match kind {
                OpKind::Add => tape.add(v[0], v[1])?,
                OpKind::Sub => tape.sub(v[0], v[1])?,
                OpKind::Mul => tape.mul(v[0], v[1])?,
                OpKind::Mse => return tape.mse(v[0], v[1]),
                OpKind::Scale => tape.scale(v[0], -1.7)?,
                OpKind::Silu => tape.silu(v[0])?,
                OpKind::Mean => return tape.mean(v[0]),
                OpKind::Sum => return tape.sum(v[0]),
                OpKind::MatMul => tape.matmul(v[0], v[1])?,
                OpKind::AddRowBias => tape.add_row_bias(v[0], v[1])?,
                OpKind::Conv2d => {
                    let a = tape.conv2d(v[0], v[1], v[2], 1)?;
                    let b = tape.conv2d(v[0], v[1], v[2], 2)?;
                    let la = weighted_sum(tape, a, ws)?;
                    let lb = weighted_sum(tape, b, ws ^ 1)?;
                    return tape.add(la, lb);
                }
                OpKind::Upsample2x => tape.upsample2x(v[0])?,
                OpKind::ChannelAffine => tape.channel_affine(v[0], v[1], v[2])?,
                OpKind::SpatialMean => tape.spatial_mean(v[0])?,
                OpKind::ConcatChannels => tape.concat_channels(v[0], v[1])?,
                OpKind::SliceCols => tape.slice_cols(v[0], 2, 3)?,
                OpKind::Gather => tape.gather(v[0], &[0, 2, 2, 4])?,
                OpKind::Leaf => unreachable!(),
            };
            weighted_sum(tape, y, ws)
        };
        let report = gradient_check_many(f, &inputs, h, tol)?;
        checks.push(OpCheck {
            op: kind.name(),
            report,
        });
    }
    Ok(checks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_to_1e10() {
        let at = Tensor::from_f64(&[6], &[0.3, -1.2, 2.5, 0.0, 7.0, -0.125]).unwrap();
        let r = gradient_check(|t, x| t.sum(x), &at, 1e-3, 1e-10).unwrap();
        assert!(r.passed && r.max_rel_err <= 1e-10, "{r:?}");
    }

    #[test]
    fn every_op_passes() {
        for c in check_registered_ops(7, 1e-5, 1e-4, None).unwrap() {
            assert!(c.report.passed, "{}: {:?}", c.op, c.report);
        }
    }

    #[test]
    fn corrupted_backward_is_flagged() {
        for kind in [OpKind::Silu, OpKind::Conv2d, OpKind::ChannelAffine] {
            let checks = check_registered_ops(3, 1e-5, 1e-4, Some(kind)).unwrap();
            let c = checks.iter().find(|c| c.op == kind.name()).unwrap();
            assert!(!c.report.passed, "{} should fail", c.op);
            for other in checks.iter().filter(|c| c.op != kind.name()) {
                assert!(other.report.passed, "{} unexpectedly failed", other.op);
            }
        }
    }

    #[test]
    fn rejects_non_positive_step() {
        let at = Tensor::from_f64(&[1], &[1.0]).unwrap();
        assert!(gradient_check(|t, x| t.sum(x), &at, 0.0, 1e-4).is_err());
    }
}
