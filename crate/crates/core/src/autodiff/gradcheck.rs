//! Central finite-difference gradient checking.
//!
//! The numerical side only ever evaluates forward values on constant
//! leaves, so it never touches the backward code it is checking.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::Result;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;
/// Pass threshold for single operations.
pub const OP_TOLERANCE: f64 = 1e-4;
/// Pass threshold for whole-model losses.
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Denominator floor for the relative error, so gradients that are
/// numerically zero compare on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tolerance
    }

    /// Folds several reports for the same operation into the worst case.
    pub fn merge(name: &str, tolerance: f64, reports: &[GradCheckReport]) -> Self {
        Self {
            name: name.to_string(),
            max_rel_error: reports.iter().map(|r| r.max_rel_error).fold(0.0, f64::max),
            coordinates: reports.iter().map(|r| r.coordinates).sum(),
            tolerance,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Compares `analytic` against central differences of `value` at `x` on the
/// selected coordinates (all when `coords` is `None`).
pub fn check_scalar_fn(
    name: &str,
    x: &[f64],
    analytic: &[f64],
    mut value: impl FnMut(&[f64]) -> f64,
    coords: Option<&[usize]>,
    tolerance: f64,
) -> GradCheckReport {
    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..x.len()).collect();
            &all
        }
    };
    let mut probe = x.to_vec();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let orig = probe[i];
        probe[i] = orig + FD_EPS;
        let plus = value(&probe);
        probe[i] = orig - FD_EPS;
        let minus = value(&probe);
        probe[i] = orig;
        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let err = relative_error(analytic[i], numeric);
        worst = if err.is_nan() { f64::NAN } else { worst.max(err) };
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_error: worst,
        coordinates: coords.len(),
        tolerance,
    }
}

/// Gradient-checks a graph-building closure with respect to every entry of
/// every input tensor. `build` must return a scalar.
pub fn check_graph_fn<F>(name: &str, inputs: &[Tensor], build: F, tolerance: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone().with_requires_grad(true)))
        .collect();
    let root = build(&mut g, &vars)?;
    g.backward(root)?;

    let sizes: Vec<usize> = inputs.iter().map(Tensor::numel).collect();
    let mut flat = Vec::new();
    let mut analytic = Vec::new();
    for (t, v) in inputs.iter().zip(&vars) {
        flat.extend_from_slice(t.data());
        match g.grad(*v) {
            Some(gr) => analytic.extend_from_slice(gr),
            None => analytic.extend(std::iter::repeat(0.0).take(t.numel())),
        }
    }

    let mut failure = None;
    let report = check_scalar_fn(
        name,
        &flat,
        &analytic,
        |x| {
            let mut g = Graph::new();
            let mut off = 0;
            let vars: Vec<Var> = inputs
                .iter()
                .zip(&sizes)
                .map(|(t, &n)| {
                    let v = Tensor::new(t.shape(), x[off..off + n].to_vec()).expect("same shape");
                    off += n;
                    g.constant(v)
                })
                .collect();
            match build(&mut g, &vars) {
                Ok(r) => g.value(r).item(),
                Err(e) => {
                    failure = Some(e);
                    f64::NAN
                }
            }
        },
        None,
        tolerance,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

/// Random tensor with entries uniform in `[-2, 2]`.
pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    Tensor::new(shape, data).expect("valid shape")
}

/// Reduces a tensor to a scalar through a fixed random linear functional,
/// so every output coordinate contributes to the checked gradient.
pub fn project(g: &mut Graph, y: Var, weights: &Tensor) -> Result<Var> {
    let w = g.constant(weights.clone());
    let prod = g.mul(y, w)?;
    Ok(g.sum(prod))
}

/// Picks `count` distinct coordinates out of `len` (all when `len <= count`).
pub fn sample_coords(rng: &mut ChaCha8Rng, len: usize, count: usize) -> Vec<usize> {
    if len <= count {
        return (0..len).collect();
    }
    let mut c = sample(rng, len, count).into_vec();
    c.sort_unstable();
    c
}
