//! Central finite-difference gradient checking.
//!
//! The checker only ever evaluates forward values; it never looks at the
//! backward rules it is checking.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Tape, Tensor, Var};

/// Finite-difference step used by the acceptance checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest tolerated error between analytic and numeric gradients.
pub const FD_TOLERANCE: f64 = 1e-4;

/// Builds a scalar loss from leaves holding the given inputs.
pub type GraphFn<'a> = dyn Fn(&mut Tape, &[Var]) -> Result<Var, AutodiffError> + Sync + 'a;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub name: String,
    /// Largest `|analytic − numeric| / max(|analytic|, |numeric|, 1)` over all input entries.
    pub max_rel_error: f64,
    pub entries: usize,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < FD_TOLERANCE
    }
}

fn forward_value(inputs: &[Tensor], build: &GraphFn) -> Result<f64, AutodiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    Ok(tape.value(out).item())
}

/// Compares the tape's gradient of `build` against central differences with step `h`.
pub fn check(name: &str, inputs: &[Tensor], build: &GraphFn, h: f64) -> Result<GradCheck, AutodiffError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = build(&mut tape, &vars)?;
    tape.backward(out)?;

    let mut max_rel_error: f64 = 0.0;
    let mut entries = 0;
    for (k, input) in inputs.iter().enumerate() {
        let zeros = vec![0.0; input.numel()];
        let analytic = tape.grad(vars[k]).unwrap_or(&zeros).to_vec();
        for j in 0..input.numel() {
            let mut shifted: Vec<Tensor> = inputs.to_vec();
            shifted[k].data_mut()[j] = input.data()[j] + h;
            let up = forward_value(&shifted, build)?;
            shifted[k].data_mut()[j] = input.data()[j] - h;
            let down = forward_value(&shifted, build)?;
            let numeric = (up - down) / (2.0 * h);
            let denom = analytic[j].abs().max(numeric.abs()).max(1.0);
            max_rel_error = max_rel_error.max((analytic[j] - numeric).abs() / denom);
            entries += 1;
        }
    }
    Ok(GradCheck { name: name.to_string(), max_rel_error, entries })
}

/// A named loss graph over freshly sampled inputs.
pub struct GradCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Box<GraphFn<'static>>,
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduces any tensor to a scalar through fixed pseudo-random weights so that
/// every output entry receives a distinct upstream gradient.
pub fn weighted_sum(tape: &mut Tape, v: Var) -> Result<Var, AutodiffError> {
    let n = tape.value(v).numel();
    let shape = tape.value(v).shape().to_vec();
    let w: Vec<f64> = (0..n).map(|i| 0.3 + 0.7 * ((i * 7919 % 13) as f64 / 13.0) - 0.5).collect();
    let w = tape.constant(Tensor::new(shape, w)?);
    let p = tape.mul(v, w)?;
    Ok(tape.sum(p))
}

/// One case per tape primitive, with inputs drawn from `seed`.
pub fn primitive_cases(seed: u64) -> Vec<GradCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (m, k, n) = (rng.random_range(1..=4), rng.random_range(2..=4), rng.random_range(1..=4));
    let mut cases: Vec<GradCase> = Vec::new();
    let mut push = |name, inputs, build: Box<GraphFn<'static>>| cases.push(GradCase { name, inputs, build });

    push(
        "matmul",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k, n])],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "matmul_t",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[n, k])],
        Box::new(|t, v| {
            let y = t.matmul_t(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "transpose",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.transpose(v[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "add_broadcast",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k])],
        Box::new(|t, v| {
            let y = t.add(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "sub",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.sub(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "mul_broadcast",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k])],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "mul_self",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.mul(v[0], v[0])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "scale",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y)
        }),
    );
    push(
        "add_scalar",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.add_scalar(v[0], 0.25);
            weighted_sum(t, y)
        }),
    );
    push(
        "gelu",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.gelu(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "relu",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.relu(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "tanh",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.tanh(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "softplus",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.softplus(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "softmax",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.softmax(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "log_softmax",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.log_softmax(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "layer_norm",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[k]), randn(&mut rng, &[k])],
        Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], super::LAYER_NORM_EPS)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "sum",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let s = t.sum(v[0]);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }),
    );
    push(
        "mean",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let s = t.mean(v[0]);
            let sq = t.mul(s, s)?;
            Ok(t.sum(sq))
        }),
    );
    let ids: Vec<usize> = (0..m + 1).map(|_| rng.random_range(0..k)).collect();
    push(
        "gather_rows",
        vec![randn(&mut rng, &[k, n])],
        Box::new(move |t, v| {
            let y = t.gather_rows(v[0], &ids)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "slice_cols",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.slice_cols(v[0], 1, 2)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "concat_cols",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[m, n])],
        Box::new(|t, v| {
            let y = t.concat_cols(&[v[0], v[1], v[0]])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "stack_rows",
        vec![randn(&mut rng, &[k]), randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.stack_rows(&[v[1], v[0], v[1], v[0]])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "row",
        vec![randn(&mut rng, &[m, k])],
        Box::new(move |t, v| {
            let y = t.row(v[0], m - 1)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "col",
        vec![randn(&mut rng, &[m, k])],
        Box::new(move |t, v| {
            let y = t.col(v[0], k - 1)?;
            weighted_sum(t, y)
        }),
    );
    let picks: Vec<usize> = (0..m).map(|_| rng.random_range(0..k)).collect();
    push(
        "pick_per_row",
        vec![randn(&mut rng, &[m, k])],
        Box::new(move |t, v| {
            let y = t.pick_per_row(v[0], &picks)?;
            weighted_sum(t, y)
        }),
    );
    push(
        "row_norm",
        vec![randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.row_norm(v[0]);
            weighted_sum(t, y)
        }),
    );
    push(
        "row_dot",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[m, k])],
        Box::new(|t, v| {
            let y = t.row_dot(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    push(
        "row_scale",
        vec![randn(&mut rng, &[m, k]), randn(&mut rng, &[m])],
        Box::new(|t, v| {
            let y = t.row_scale(v[0], v[1])?;
            weighted_sum(t, y)
        }),
    );
    cases
}

#[derive(Clone, Copy, Debug)]
enum RandomOp {
    Add,
    Sub,
    Mul,
    Scale(f64),
    Gelu,
    Tanh,
    Softplus,
    Softmax,
    LogSoftmax,
    LayerNorm,
    MatMulSquare,
}

/// A random composition of at most `max_ops` shape-preserving primitives on
/// tensors of at most 64 entries.
pub fn random_graph_case(seed: u64, max_ops: usize) -> GradCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let rows = rng.random_range(1..=8);
    let cols = rng.random_range(2..=8);
    let n_ops = rng.random_range(1..=max_ops);
    let mut plan = Vec::with_capacity(n_ops);
    for _ in 0..n_ops {
        let op = match rng.random_range(0..11) {
            0 => RandomOp::Add,
            1 => RandomOp::Sub,
            2 => RandomOp::Mul,
            3 => RandomOp::Scale(rng.random_range(-2.0..2.0)),
            4 => RandomOp::Gelu,
            5 => RandomOp::Tanh,
            6 => RandomOp::Softplus,
            7 => RandomOp::Softmax,
            8 => RandomOp::LogSoftmax,
            9 => RandomOp::LayerNorm,
            _ => RandomOp::MatMulSquare,
        };
        // Operand picks are indices into the growing pool of intermediate values.
        plan.push((op, rng.random::<u64>(), rng.random::<u64>()));
    }
    let inputs = vec![
        randn(&mut rng, &[rows, cols]),
        randn(&mut rng, &[rows, cols]),
        randn(&mut rng, &[cols, cols]),
        randn(&mut rng, &[cols]),
        randn(&mut rng, &[cols]),
    ];
    let build = move |t: &mut Tape, v: &[Var]| -> Result<Var, AutodiffError> {
        let mut pool = vec![v[0], v[1]];
        for &(op, p, q) in &plan {
            let x = pool[(p % pool.len() as u64) as usize];
            let y = pool[(q % pool.len() as u64) as usize];
            let out = match op {
                RandomOp::Add => t.add(x, y)?,
                RandomOp::Sub => t.sub(x, y)?,
                RandomOp::Mul => t.mul(x, y)?,
                RandomOp::Scale(s) => t.scale(x, s),
                RandomOp::Gelu => t.gelu(x),
                RandomOp::Tanh => t.tanh(x),
                RandomOp::Softplus => t.softplus(x),
                RandomOp::Softmax => t.softmax(x),
                RandomOp::LogSoftmax => t.log_softmax(x),
                RandomOp::LayerNorm => t.layer_norm(x, v[3], v[4], super::LAYER_NORM_EPS)?,
                RandomOp::MatMulSquare => t.matmul(x, v[2])?,
            };
            pool.push(out);
        }
        let last = *pool.last().expect("pool is never empty");
        weighted_sum(t, last)
    };
    GradCase { name: "random_graph", inputs, build: Box::new(build) }
}

impl GradCase {
    pub fn run(&self, h: f64) -> Result<GradCheck, AutodiffError> {
        check(self.name, &self.inputs, self.build.as_ref(), h)
    }
}
