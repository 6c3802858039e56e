//! Finite-difference checks of the autodiff engine: every op of the catalog
//! at random points, and the critic-parameter gradient of the gradient
//! penalty (a second-order derivative).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Array, AutodiffError, Bindings, Graph, NodeRef, Shape};
use crate::gan_train::{self, GanError, MlpCritic};
use crate::nets::{Activation, Layer, MlpParams};

/// Central-difference step, scaled by `max(1, |w|)` per component.
pub const FD_STEP: f64 = 1e-4;
/// Smallest pre-activation magnitude accepted for second-order points.
pub const KINK_MARGIN: f64 = 1e-2;

/// Worst relative error of one op over all sampled points.
#[derive(Clone, Debug, PartialEq)]
pub struct OpCheck {
    pub name: &'static str,
    pub points: usize,
    pub max_error: f64,
}

pub const CATALOG: [&str; 20] = [
    "constant",
    "input",
    "add",
    "subtract",
    "scalar-multiply",
    "elementwise-multiply",
    "matrix-multiply",
    "concatenate",
    "leaky-relu",
    "relu",
    "sigmoid",
    "log",
    "exp",
    "sum",
    "mean",
    "square",
    "sqrt",
    "row-l2-norm",
    "log-sum-exp-rows",
    "gather-rows",
];

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Array {
    Array::from_shape_simple_fn((rows, cols), || rng.random_range(lo..hi))
}

/// Entries with magnitude in `[0.05, 2)` and random sign, away from kinks.
fn signed(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array {
    Array::from_shape_simple_fn((rows, cols), || {
        let m = rng.random_range(0.05..2.0);
        if rng.random::<bool>() {
            m
        } else {
            -m
        }
    })
}

/// Builds `sum(R ⊙ op(inputs))` for a random weighting `R`; returns the
/// scalar and the input nodes with their values.
fn build_case(
    g: &mut Graph,
    name: &str,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeRef, Vec<(NodeRef, Array)>), AutodiffError> {
    let (r, c) = (rng.random_range(1..5), rng.random_range(1..5));
    let mut inputs = Vec::new();
    let mut input = |g: &mut Graph, v: Array| {
        let n = g.input(Shape::new(v.nrows(), v.ncols()));
        inputs.push((n, v));
        n
    };
    let out = match name {
        "constant" => {
            let x = input(g, signed(rng, r, c));
            let k = g.constant(signed(rng, r, c));
            g.mul(x, k)?
        }
        "input" => input(g, signed(rng, r, c)),
        "add" => {
            let a = input(g, signed(rng, r, c));
            let b = input(g, signed(rng, 1, c));
            g.add(a, b)?
        }
        "subtract" => {
            let a = input(g, signed(rng, r, c));
            let b = input(g, signed(rng, r, c));
            g.sub(a, b)?
        }
        "scalar-multiply" => {
            let a = input(g, signed(rng, r, c));
            g.scale(a, rng.random_range(-3.0..3.0))?
        }
        "elementwise-multiply" => {
            let a = input(g, signed(rng, r, c));
            let b = input(g, signed(rng, r, c));
            g.mul(a, b)?
        }
        "matrix-multiply" => {
            let k = rng.random_range(1..5);
            let a = input(g, signed(rng, r, k));
            let b = input(g, signed(rng, k, c));
            g.matmul(a, b)?
        }
        "concatenate" => {
            let a = input(g, signed(rng, r, c));
            let extra = rng.random_range(1..4);
            let b = input(g, signed(rng, r, extra));
            g.concat(a, b)?
        }
        "leaky-relu" => {
            let a = input(g, signed(rng, r, c));
            g.leaky_relu(a, 0.2)?
        }
        "relu" => {
            let a = input(g, signed(rng, r, c));
            g.relu(a)?
        }
        "sigmoid" => {
            let a = input(g, uniform(rng, r, c, -4.0, 4.0));
            g.sigmoid(a)?
        }
        "log" => {
            let a = input(g, uniform(rng, r, c, 0.1, 5.0));
            g.log(a)?
        }
        "exp" => {
            let a = input(g, uniform(rng, r, c, -3.0, 3.0));
            g.exp(a)?
        }
        "sum" => {
            let a = input(g, signed(rng, r, c));
            let s = g.sum(a)?;
            g.square(s)?
        }
        "mean" => {
            let a = input(g, signed(rng, r, c));
            let s = g.mean(a)?;
            g.square(s)?
        }
        "square" => {
            let a = input(g, signed(rng, r, c));
            g.square(a)?
        }
        "sqrt" => {
            let a = input(g, uniform(rng, r, c, 0.1, 5.0));
            g.sqrt(a)?
        }
        "row-l2-norm" => {
            let a = input(g, signed(rng, r, c));
            g.row_norm(a)?
        }
        "log-sum-exp-rows" => {
            let a = input(g, uniform(rng, r, c, -5.0, 5.0));
            g.logsumexp_rows(a)?
        }
        "gather-rows" => {
            let a = input(g, signed(rng, r, c));
            let idx: Vec<usize> = (0..rng.random_range(1..7))
                .map(|_| rng.random_range(0..r))
                .collect();
            g.gather_rows(a, &idx)?
        }
        other => unreachable!("op {other} is not in the catalog"),
    };
    let shape = out.shape();
    let weights = g.constant(signed(rng, shape.rows, shape.cols));
    let weighted = g.mul(out, weights)?;
    Ok((g.sum(weighted)?, inputs))
}

/// Worst relative error of each catalog op over `points` random points.
pub fn op_suite(points: usize, seed: u64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    CATALOG
        .iter()
        .map(|&name| {
            let mut worst = 0.0f64;
            for _ in 0..points {
                let mut g = Graph::new();
                let (out, inputs) = build_case(&mut g, name, &mut rng)?;
                let mut b = Bindings::new();
                for (n, v) in &inputs {
                    b.bind(*n, v);
                }
                for (n, _) in &inputs {
                    worst = worst.max(g.check_gradient(out, *n, &b, FD_STEP)?);
                }
            }
            Ok(OpCheck {
                name,
                points,
                max_error: worst,
            })
        })
        .collect()
}

/// Random 2-layer LeakyReLU critic `[x;c] → hidden → 1`.
fn random_critic(rng: &mut ChaCha8Rng, d_in: usize, hidden: usize) -> MlpParams {
    let layer = |rng: &mut ChaCha8Rng, i, o| Layer {
        weight: uniform(rng, i, o, -1.0, 1.0),
        bias: uniform(rng, 1, o, -0.5, 0.5),
    };
    let layers = vec![layer(rng, d_in, hidden), layer(rng, hidden, 1)];
    MlpParams::new(layers, vec![Activation::LeakyRelu(0.2), Activation::Identity])
        .expect("dims chain")
}

fn min_abs_preactivation(critic: &MlpParams, inputs: &[&Array]) -> f64 {
    inputs
        .iter()
        .map(|x| {
            let l = &critic.layers()[0];
            (x.dot(&l.weight) + &l.bias)
                .iter()
                .fold(f64::INFINITY, |m, v| m.min(v.abs()))
        })
        .fold(f64::INFINITY, f64::min)
}

/// Worst relative error of the gradient-penalty gradient with respect to
/// the critic's parameters, over `points` random points whose hidden
/// pre-activations all satisfy `|a| > KINK_MARGIN`.
pub fn penalty_second_order(points: usize, seed: u64) -> Result<f64, GanError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (batch, d_x, d_c, hidden) = (3, 4, 2, 5);
    let mut worst = 0.0f64;
    let mut accepted = 0;
    while accepted < points {
        let x = uniform(&mut rng, batch, d_x, -1.0, 1.0);
        let fake = uniform(&mut rng, batch, d_x, -1.0, 1.0);
        let c = uniform(&mut rng, batch, d_c, 0.0, 1.0);
        let critic = random_critic(&mut rng, d_x + d_c, hidden);
        let mut alpha_rng = ChaCha8Rng::seed_from_u64(rng.random());

        let mut g = Graph::new();
        let mut b = Bindings::new();
        let nodes = critic.attach(&mut g, &mut b);
        let (xn, fn_, cn) = (
            g.input(Shape::new(batch, d_x)),
            g.input(Shape::new(batch, d_x)),
            g.input(Shape::new(batch, d_c)),
        );
        b.bind(xn, &x).bind(fn_, &fake).bind(cn, &c);
        let p = gan_train::gradient_penalty(&mut g, &MlpCritic(&nodes), xn, fn_, cn, &mut alpha_rng)?;

        let hat = g.forward(&b)?.to_owned(p.interpolates);
        let joined = ndarray::concatenate(ndarray::Axis(1), &[hat.view(), c.view()])
            .expect("same rows");
        if min_abs_preactivation(&critic, &[&joined]) <= KINK_MARGIN {
            continue;
        }
        for param in nodes.params() {
            worst = worst.max(g.check_gradient(p.value, param, &b, FD_STEP)?);
        }
        accepted += 1;
    }
    Ok(worst)
}
