//! Central finite-difference oracle for the tape's analytic gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// A scalar function of a parameter list that can be recorded at either
/// precision.
pub trait Differentiable {
    fn build<T: Scalar>(&self, graph: &mut Graph<T>, params: &[NodeId]) -> NodeId;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step, applied in the 64-bit path.
    pub h: f64,
    /// Precision of the analytic gradient under test.
    pub precision: Precision,
    /// Coordinates probed per tensor; `None` probes all of them.
    pub probes_per_tensor: Option<usize>,
    pub seed: u64,
    /// Floor on the relative-error denominator, so entries whose true
    /// gradient is near zero are judged on absolute error at this scale.
    pub denom_floor: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            precision: Precision::F64,
            probes_per_tensor: None,
            seed: 0,
            denom_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// (tensor index, flat coordinate) of the worst entry.
    pub worst: (usize, usize),
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn eval64<F: Differentiable>(f: &F, params: &[Tensor<f64>]) -> f64 {
    let mut g = Graph::<f64>::new();
    let ids: Vec<_> = params.iter().map(|p| g.input(p.clone())).collect();
    let out = f.build(&mut g, &ids);
    g.value(out).item()
}

fn analytic<F: Differentiable, T: Scalar>(f: &F, params: &[Tensor<f64>]) -> Result<Vec<Tensor<f64>>> {
    let mut g = Graph::<T>::new();
    let ids: Vec<_> = params.iter().map(|p| g.param(p.cast())).collect();
    let out = f.build(&mut g, &ids);
    let (_, grads) = g.forward_backward(out)?;
    Ok(grads.iter().map(Tensor::cast).collect())
}

/// Max over probed coordinates of |analytic − numeric| / max(|analytic|, |numeric|, floor).
pub fn grad_check<F: Differentiable>(
    f: &F,
    params: &[Tensor<f64>],
    opts: GradCheckOptions,
) -> Result<GradCheckReport> {
    let base = eval64(f, params);
    let again = eval64(f, params);
    if base.to_bits() != again.to_bits() {
        return Err(Error::Nondeterministic(base, again));
    }
    if !base.is_finite() {
        return Err(Error::NonFinite {
            node: 0,
            op: "grad_check base value",
        });
    }
    let grads = match opts.precision {
        Precision::F32 => analytic::<F, f32>(f, params)?,
        Precision::F64 => analytic::<F, f64>(f, params)?,
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut work: Vec<Tensor<f64>> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: (0, 0),
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for t in 0..params.len() {
        let len = params[t].len();
        let coords: Vec<usize> = match opts.probes_per_tensor {
            Some(n) if n < len => sample(&mut rng, len, n).into_vec(),
            _ => (0..len).collect(),
        };
        for c in coords {
            let orig = params[t].data()[c];
            work[t].data_mut()[c] = orig + opts.h;
            let plus = eval64(f, &work);
            work[t].data_mut()[c] = orig - opts.h;
            let minus = eval64(f, &work);
            work[t].data_mut()[c] = orig;
            let numeric = (plus - minus) / (2.0 * opts.h);
            let a = grads[t].data()[c];
            let err = relative_error(a, numeric, opts.denom_floor);
            report.checked += 1;
            if err > report.max_rel_error || report.checked == 1 {
                report.max_rel_error = err;
                report.worst = (t, c);
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
