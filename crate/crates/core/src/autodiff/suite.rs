//! Randomised finite-difference suite over every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{check_graph_fn, project, random_tensor, GradCheckReport, OP_TOLERANCE};
use crate::autodiff::{Graph, Tensor, Var, LAYERNORM_EPS};
use crate::error::Result;

type Case = (Vec<Tensor>, Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>);

/// Operation names in suite order.
pub const OPS: &[&str] = &[
    "matmul",
    "add",
    "mul",
    "scale",
    "offset",
    "add_row",
    "transpose",
    "reshape",
    "concat_rows",
    "concat_cols",
    "slice_rows",
    "slice_cols",
    "sum",
    "mean",
    "softmax",
    "layernorm",
    "gelu",
    "cross_entropy_logits",
    "cosine_similarity",
];

fn dim(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(1..=5)
}

/// Builds one random instance of `op`; non-scalar outputs are reduced with a
/// random projection.
fn case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let (m, k, n) = (dim(rng), dim(rng), dim(rng));
    let proj = |rng: &mut ChaCha8Rng, shape: &[usize]| random_tensor(rng, shape);
    macro_rules! unary {
        ($shape:expr, $f:expr) => {{
            let x = random_tensor(rng, &$shape);
            let w = proj(rng, &$shape);
            let f = $f;
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = f(g, v[0])?;
                    project(g, y, &w)
                }) as Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
            )
        }};
    }
    macro_rules! binary {
        ($sa:expr, $sb:expr, $out:expr, $f:expr) => {{
            let a = random_tensor(rng, &$sa);
            let b = random_tensor(rng, &$sb);
            let w = proj(rng, &$out);
            let f = $f;
            (
                vec![a, b],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = f(g, v[0], v[1])?;
                    project(g, y, &w)
                }) as Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>,
            )
        }};
    }
    match op {
        "matmul" => binary!([m, k], [k, n], [m, n], |g: &mut Graph, a, b| g.matmul(a, b)),
        "add" => binary!([m, n], [m, n], [m, n], |g: &mut Graph, a, b| g.add(a, b)),
        "mul" => binary!([m, n], [m, n], [m, n], |g: &mut Graph, a, b| g.mul(a, b)),
        "scale" => {
            let s = rng.gen_range(-2.0..2.0);
            unary!([m, n], move |g: &mut Graph, x| Ok(g.scale(x, s)))
        }
        "offset" => {
            let c = rng.gen_range(-2.0..2.0);
            unary!([m, n], move |g: &mut Graph, x| Ok(g.offset(x, c)))
        }
        "add_row" => binary!([m, n], [n], [m, n], |g: &mut Graph, a, b| g.add_row(a, b)),
        "transpose" => {
            let x = random_tensor(rng, &[m, n]);
            let w = proj(rng, &[n, m]);
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.transpose(v[0])?;
                    project(g, y, &w)
                }),
            )
        }
        "reshape" => {
            let x = random_tensor(rng, &[m, n]);
            let w = proj(rng, &[n, m]);
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.reshape(v[0], &[n, m])?;
                    project(g, y, &w)
                }),
            )
        }
        "concat_rows" => binary!([m, n], [k, n], [m + k, n], |g: &mut Graph, a, b| g.concat_rows(&[a, b])),
        "concat_cols" => binary!([m, n], [m, k], [m, n + k], |g: &mut Graph, a, b| g.concat_cols(&[a, b])),
        "slice_rows" => {
            let rows = m + 2;
            let start = rng.gen_range(0..rows - 1);
            let end = rng.gen_range(start + 1..=rows);
            let x = random_tensor(rng, &[rows, n]);
            let w = proj(rng, &[end - start, n]);
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.slice_rows(v[0], start, end)?;
                    project(g, y, &w)
                }),
            )
        }
        "slice_cols" => {
            let cols = n + 2;
            let start = rng.gen_range(0..cols - 1);
            let end = rng.gen_range(start + 1..=cols);
            let x = random_tensor(rng, &[m, cols]);
            let w = proj(rng, &[m, end - start]);
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.slice_cols(v[0], start, end)?;
                    project(g, y, &w)
                }),
            )
        }
        "sum" => {
            let x = random_tensor(rng, &[m, n]);
            (vec![x], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.sum(v[0]))))
        }
        "mean" => {
            let x = random_tensor(rng, &[m, n]);
            (vec![x], Box::new(|g: &mut Graph, v: &[Var]| Ok(g.mean(v[0]))))
        }
        "softmax" => unary!([m, n], |g: &mut Graph, x| Ok(g.softmax(x))),
        "layernorm" => {
            let d = n + 1;
            let x = random_tensor(rng, &[m, d]);
            let gamma = random_tensor(rng, &[d]);
            let beta = random_tensor(rng, &[d]);
            let w = proj(rng, &[m, d]);
            (
                vec![x, gamma, beta],
                Box::new(move |g: &mut Graph, v: &[Var]| {
                    let y = g.layernorm(v[0], v[1], v[2], LAYERNORM_EPS)?;
                    project(g, y, &w)
                }),
            )
        }
        "gelu" => unary!([m, n], |g: &mut Graph, x| Ok(g.gelu(x))),
        "cross_entropy_logits" => {
            let c = n + 1;
            let x = random_tensor(rng, &[m, c]);
            let labels: Vec<usize> = (0..m).map(|_| rng.gen_range(0..c)).collect();
            (
                vec![x],
                Box::new(move |g: &mut Graph, v: &[Var]| g.cross_entropy_logits(v[0], &labels)),
            )
        }
        "cosine_similarity" => {
            let a = random_tensor(rng, &[n + 1]);
            let b = random_tensor(rng, &[n + 1]);
            (
                vec![a, b],
                Box::new(|g: &mut Graph, v: &[Var]| g.cosine_similarity(v[0], v[1])),
            )
        }
        other => panic!("unknown op {other}"),
    }
}

/// Runs `trials` random instances of every operation; one merged report per op.
pub fn run_op_suite(seed: u64, trials: usize) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(OPS.len());
    for op in OPS {
        let mut reports = Vec::with_capacity(trials);
        for _ in 0..trials {
            let (inputs, build) = case(op, &mut rng);
            reports.push(check_graph_fn(op, &inputs, build, OP_TOLERANCE)?);
        }
        out.push(GradCheckReport::merge(op, OP_TOLERANCE, &reports));
    }
    Ok(out)
}
