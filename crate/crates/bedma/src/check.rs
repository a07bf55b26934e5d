//! Finite-difference verification of every gradient path.
//!
//! Each case rebuilds its graph from plain input tensors, so the same
//! closure serves both the analytic backward pass and the central
//! finite differences `(f(x + h) - f(x - h)) / 2h`. Stochastic cases
//! reseed their noise on every rebuild, which keeps the drawn epsilons
//! fixed while the inputs move.

use crate::attention::{additive_attention, AdditiveAttentionVars};
use crate::autodiff::{Tape, Tensor, Var};
use crate::model::{build_model, ModelConfig, Variant};
use crate::recurrent::{gru_step, GruWeightVars};
use crate::variational::{
    kl_sample_term, sample_weight, BoundGaussian, GaussianVariational, KlSink, NoiseSource,
    PriorSpec,
};

/// Largest tolerated relative error between analytic and numeric
/// gradients.
pub const TOLERANCE: f64 = 1e-4;

const STEP: f64 = 1e-5;

/// Deliberate corruption for probing the harness itself.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Scales the analytic gradient of the tanh case, which must make
    /// the run fail while naming tanh.
    TanhDerivative,
}

/// Outcome of one component's checks.
#[derive(Debug, Clone)]
pub struct ComponentReport {
    pub name: &'static str,
    /// Scalar derivatives compared.
    pub checks: usize,
    pub worst_rel_err: f64,
    /// `case[input][element]` label of the worst comparison.
    pub worst_case: String,
    pub passed: bool,
}

/// Outcome of the whole suite.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub components: Vec<ComponentReport>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }

    pub fn total_checks(&self) -> usize {
        self.components.iter().map(|c| c.checks).sum()
    }

    /// First failing component, if any.
    pub fn first_failure(&self) -> Option<&ComponentReport> {
        self.components.iter().find(|c| !c.passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>7} {:>14} {:<32} {}\n",
            "component", "checks", "worst rel err", "worst case", "status"
        ));
        for c in &self.components {
            out.push_str(&format!(
                "{:<14} {:>7} {:>14.3e} {:<32} {}\n",
                c.name,
                c.checks,
                c.worst_rel_err,
                c.worst_case,
                if c.passed { "pass" } else { "FAIL" }
            ));
        }
        out
    }
}

struct CaseResult {
    checks: usize,
    worst_rel_err: f64,
    worst_label: String,
}

/// Compares analytic and central-difference gradients of a scalar
/// function of `inputs`. `build` must construct a fresh graph from the
/// given tensors each call; `grad_scale` corrupts the analytic side for
/// fault-injection probes.
fn run_case<F>(name: &str, inputs: &[Tensor], grad_scale: f64, build: F) -> CaseResult
where
    F: Fn(&[Tensor]) -> (Tape, Var, Vec<Var>),
{
    let (tape, loss, leaves) = build(inputs);
    debug_assert_eq!(leaves.len(), inputs.len());
    let grads = tape.backward(loss).expect("scalar loss");
    let analytic: Vec<Tensor> = leaves.iter().map(|&v| grads.get(v).clone()).collect();

    let mut worst = 0.0f64;
    let mut worst_label = format!("{name}[0][0]");
    let mut checks = 0usize;
    for k in 0..inputs.len() {
        for j in 0..inputs[k].len() {
            let x = inputs[k].data()[j];
            let h = STEP * x.abs().max(1.0);
            let eval = |value: f64| {
                let mut moved: Vec<Tensor> = inputs.to_vec();
                moved[k].data_mut()[j] = value;
                let (tape, loss, _) = build(&moved);
                tape.value(loss).item()
            };
            let numeric = (eval(x + h) - eval(x - h)) / (2.0 * h);
            let a = analytic[k].data()[j] * grad_scale;
            let rel = (a - numeric).abs() / a.abs().max(1.0);
            checks += 1;
            if rel > worst {
                worst = rel;
                worst_label = format!("{name}[{k}][{j}]");
            }
        }
    }
    CaseResult {
        checks,
        worst_rel_err: worst,
        worst_label,
    }
}

fn component(name: &'static str, results: Vec<CaseResult>) -> ComponentReport {
    let mut checks = 0;
    let mut worst = 0.0f64;
    let mut worst_case = String::from("none");
    for r in results {
        checks += r.checks;
        if r.worst_rel_err >= worst {
            worst = r.worst_rel_err;
            worst_case = r.worst_label;
        }
    }
    ComponentReport {
        name,
        checks,
        worst_rel_err: worst,
        worst_case,
        passed: worst < TOLERANCE,
    }
}

/// Weighted reduction to a scalar so that every element of `v`
/// influences the loss with a distinct coefficient.
fn spread(tape: &mut Tape, v: Var, label: u64) -> Var {
    let t = tape.value(v).clone();
    let weights: Vec<f64> = (0..t.len())
        .map(|i| 0.3 + 0.17 * ((i as f64 + label as f64) * 0.7).sin())
        .collect();
    let w = tape.leaf(Tensor::new(t.shape().to_vec(), weights).expect("weight shape"));
    let prod = tape.mul(v, w).expect("same shape");
    tape.sum(prod)
}

fn rand_tensor(noise: &mut NoiseSource, label: &str, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let len: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), noise.uniform(label, len, lo, hi)).expect("shape")
}

type UnaryOp = fn(&mut Tape, Var) -> Var;

fn check_autodiff_ops(fault: Fault) -> ComponentReport {
    let mut noise = NoiseSource::seeded(4242);
    let mut results = Vec::new();

    // Elementwise unary ops, each on a vector and a matrix. Inputs stay
    // clear of the relu/abs kinks and inside log/sqrt domains.
    let unary: Vec<(&str, UnaryOp, f64, f64)> = vec![
        ("sigmoid", |t, v| t.sigmoid(v), -2.0, 2.0),
        ("tanh", |t, v| t.tanh(v), -2.0, 2.0),
        ("relu", |t, v| t.relu(v), 0.1, 2.0),
        ("relu-neg", |t, v| t.relu(v), -2.0, -0.1),
        ("exp", |t, v| t.exp(v), -1.0, 1.0),
        ("square", |t, v| t.square(v), -2.0, 2.0),
        ("softplus", |t, v| t.softplus(v), -3.0, 3.0),
        ("neg", |t, v| t.neg(v), -2.0, 2.0),
        ("abs", |t, v| t.abs(v), 0.2, 2.0),
        ("abs-neg", |t, v| t.abs(v), -2.0, -0.2),
        ("log", |t, v| t.log(v).expect("positive input"), 0.4, 3.0),
        ("sqrt", |t, v| t.sqrt(v).expect("positive input"), 0.4, 3.0),
    ];
    for (name, op, lo, hi) in unary {
        for shape in [vec![5], vec![2, 3]] {
            let x = rand_tensor(&mut noise, &format!("{name}{shape:?}"), &shape, lo, hi);
            let scale = if name == "tanh" && fault == Fault::TanhDerivative {
                1.01
            } else {
                1.0
            };
            results.push(run_case(name, &[x], scale, |inputs| {
                let mut tape = Tape::new();
                let a = tape.leaf(inputs[0].clone());
                let y = op(&mut tape, a);
                let loss = spread(&mut tape, y, 1);
                (tape, loss, vec![a])
            }));
        }
    }

    // Binary elementwise ops.
    for (name, which, lo, hi) in [
        ("add", 0, -2.0, 2.0),
        ("sub", 1, -2.0, 2.0),
        ("mul", 2, -2.0, 2.0),
        ("div", 3, 0.5, 2.0),
    ] {
        for shape in [vec![4], vec![3, 2]] {
            let a = rand_tensor(&mut noise, &format!("{name}a{shape:?}"), &shape, lo, hi);
            let b = rand_tensor(&mut noise, &format!("{name}b{shape:?}"), &shape, lo, hi);
            results.push(run_case(name, &[a, b], 1.0, move |inputs| {
                let mut tape = Tape::new();
                let a = tape.leaf(inputs[0].clone());
                let b = tape.leaf(inputs[1].clone());
                let y = match which {
                    0 => tape.add(a, b),
                    1 => tape.sub(a, b),
                    2 => tape.mul(a, b),
                    _ => tape.div(a, b),
                }
                .expect("same shape");
                let loss = spread(&mut tape, y, 2);
                (tape, loss, vec![a, b])
            }));
        }
    }

    // Structural and linear-algebra ops.
    for (rows, inner, cols) in [(2, 3, 2), (1, 4, 1), (3, 3, 3)] {
        let a = rand_tensor(&mut noise, &format!("mm{rows}{inner}"), &[rows, inner], -1.0, 1.0);
        let b = rand_tensor(&mut noise, &format!("mm{inner}{cols}"), &[inner, cols], -1.0, 1.0);
        results.push(run_case(
            &format!("matmul-{rows}x{inner}x{cols}"),
            &[a, b],
            1.0,
            |inputs| {
                let mut tape = Tape::new();
                let a = tape.leaf(inputs[0].clone());
                let b = tape.leaf(inputs[1].clone());
                let y = tape.matmul(a, b).expect("inner dims");
                let loss = spread(&mut tape, y, 3);
                (tape, loss, vec![a, b])
            },
        ));
    }
    {
        let m = rand_tensor(&mut noise, "mv-m", &[3, 4], -1.0, 1.0);
        let v = rand_tensor(&mut noise, "mv-v", &[4], -1.0, 1.0);
        results.push(run_case("matvec", &[m, v], 1.0, |inputs| {
            let mut tape = Tape::new();
            let m = tape.leaf(inputs[0].clone());
            let v = tape.leaf(inputs[1].clone());
            let y = tape.matvec(m, v).expect("inner dims");
            let loss = spread(&mut tape, y, 4);
            (tape, loss, vec![m, v])
        }));
    }
    {
        let x = rand_tensor(&mut noise, "transpose", &[2, 4], -1.0, 1.0);
        results.push(run_case("transpose", &[x], 1.0, |inputs| {
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let y = tape.transpose(a).expect("rank 2");
            let loss = spread(&mut tape, y, 5);
            (tape, loss, vec![a])
        }));
    }
    {
        let x = rand_tensor(&mut noise, "softmax", &[3, 4], -2.0, 2.0);
        results.push(run_case("softmax_rows", &[x], 1.0, |inputs| {
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let y = tape.softmax_rows(a).expect("rank 2");
            let loss = spread(&mut tape, y, 6);
            (tape, loss, vec![a])
        }));
    }
    {
        let a = rand_tensor(&mut noise, "cat-a", &[3], -1.0, 1.0);
        let b = rand_tensor(&mut noise, "cat-b", &[2], -1.0, 1.0);
        let c = rand_tensor(&mut noise, "cat-c", &[4], -1.0, 1.0);
        results.push(run_case("concat", &[a, b, c], 1.0, |inputs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = tape.concat(&vars).expect("rank 1 parts");
            let loss = spread(&mut tape, y, 7);
            (tape, loss, vars)
        }));
    }
    {
        let a = rand_tensor(&mut noise, "stack-a", &[3], -1.0, 1.0);
        let b = rand_tensor(&mut noise, "stack-b", &[3], -1.0, 1.0);
        results.push(run_case("stack_rows", &[a, b], 1.0, |inputs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = tape.stack_rows(&vars).expect("equal lengths");
            let loss = spread(&mut tape, y, 8);
            (tape, loss, vars)
        }));
    }
    {
        let a = rand_tensor(&mut noise, "rows-a", &[2, 3], -1.0, 1.0);
        let b = rand_tensor(&mut noise, "rows-b", &[1, 3], -1.0, 1.0);
        results.push(run_case("concat_rows", &[a, b], 1.0, |inputs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = tape.concat_rows(&vars).expect("equal cols");
            let loss = spread(&mut tape, y, 9);
            (tape, loss, vars)
        }));
    }
    {
        let a = rand_tensor(&mut noise, "cols-a", &[2, 2], -1.0, 1.0);
        let b = rand_tensor(&mut noise, "cols-b", &[2, 3], -1.0, 1.0);
        results.push(run_case("concat_cols", &[a, b], 1.0, |inputs| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let y = tape.concat_cols(&vars).expect("equal rows");
            let loss = spread(&mut tape, y, 10);
            (tape, loss, vars)
        }));
    }
    {
        let x = rand_tensor(&mut noise, "slice", &[4, 2], -1.0, 1.0);
        results.push(run_case("slice_rows", &[x], 1.0, |inputs| {
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let y = tape.slice_rows(a, 1, 3).expect("in bounds");
            let loss = spread(&mut tape, y, 11);
            (tape, loss, vec![a])
        }));
    }
    {
        let x = rand_tensor(&mut noise, "row", &[3, 3], -1.0, 1.0);
        results.push(run_case("row", &[x], 1.0, |inputs| {
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let y = tape.row(a, 2).expect("in bounds");
            let loss = spread(&mut tape, y, 12);
            (tape, loss, vec![a])
        }));
    }
    for (name, mean) in [("sum", false), ("mean", true)] {
        let x = rand_tensor(&mut noise, name, &[2, 3], -1.0, 1.0);
        results.push(run_case(name, &[x], 1.0, move |inputs| {
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let sq = tape.square(a);
            let loss = if mean {
                tape.mean(sq).expect("nonempty")
            } else {
                tape.sum(sq)
            };
            (tape, loss, vec![a])
        }));
    }
    {
        let x = rand_tensor(&mut noise, "affine", &[4], -1.0, 1.0);
        results.push(run_case("scale-add_const", &[x], 1.0, |inputs| {
            let mut tape = Tape::new();
            let a = tape.leaf(inputs[0].clone());
            let scaled = tape.scale(a, -1.7);
            let shifted = tape.add_const(scaled, 0.9);
            let loss = spread(&mut tape, shifted, 13);
            (tape, loss, vec![a])
        }));
    }

    component("autodiff-ops", results)
}

fn bind_gaussian(tape: &mut Tape, name: &str, mu: &Tensor, rho: &Tensor) -> BoundGaussian {
    GaussianVariational::new(name, mu.clone(), rho.clone())
        .expect("matching shapes")
        .bind(tape)
        .expect("bindable")
}

fn check_variational() -> ComponentReport {
    let mut noise = NoiseSource::seeded(777);
    let mut results = Vec::new();

    // KL of one sampled weight tensor against a non-standard prior,
    // differentiated through mu and rho.
    {
        let mu = rand_tensor(&mut noise, "kl-mu", &[6], -1.0, 1.0);
        let rho = rand_tensor(&mut noise, "kl-rho", &[6], -2.0, 0.5);
        results.push(run_case("kl_sample_term", &[mu, rho], 1.0, |inputs| {
            let mut tape = Tape::new();
            let bound = bind_gaussian(&mut tape, "w", &inputs[0], &inputs[1]);
            let mut rng = NoiseSource::seeded(5);
            let sample = sample_weight(&mut tape, &bound, &mut rng).expect("sampled");
            let prior = PriorSpec::new(0.2, 1.5).expect("valid prior");
            let kl = kl_sample_term(&mut tape, &sample, &bound, &prior).expect("kl");
            (tape, kl, vec![bound.mu, bound.rho])
        }));
    }

    // The sampled weight itself feeding a downstream loss.
    {
        let mu = rand_tensor(&mut noise, "sw-mu", &[2, 3], -1.0, 1.0);
        let rho = rand_tensor(&mut noise, "sw-rho", &[2, 3], -2.0, 0.5);
        results.push(run_case("sample_weight", &[mu, rho], 1.0, |inputs| {
            let mut tape = Tape::new();
            let bound = bind_gaussian(&mut tape, "w", &inputs[0], &inputs[1]);
            let mut rng = NoiseSource::seeded(6);
            let sample = sample_weight(&mut tape, &bound, &mut rng).expect("sampled");
            let sq = tape.square(sample.w);
            let loss = spread(&mut tape, sq, 20);
            (tape, loss, vec![bound.mu, bound.rho])
        }));
    }

    // A sum of several KL terms, as a forward pass accrues them.
    {
        let mu_a = rand_tensor(&mut noise, "sink-mua", &[3], -1.0, 1.0);
        let rho_a = rand_tensor(&mut noise, "sink-rhoa", &[3], -2.0, 0.0);
        let mu_b = rand_tensor(&mut noise, "sink-mub", &[4], -1.0, 1.0);
        let rho_b = rand_tensor(&mut noise, "sink-rhob", &[4], -2.0, 0.0);
        results.push(run_case(
            "kl_sink",
            &[mu_a, rho_a, mu_b, rho_b],
            1.0,
            |inputs| {
                let mut tape = Tape::new();
                let a = bind_gaussian(&mut tape, "a", &inputs[0], &inputs[1]);
                let b = bind_gaussian(&mut tape, "b", &inputs[2], &inputs[3]);
                let mut rng = NoiseSource::seeded(7);
                let prior = PriorSpec::default();
                let mut sink = KlSink::new();
                for bound in [&a, &b] {
                    let s = sample_weight(&mut tape, bound, &mut rng).expect("sampled");
                    let kl = kl_sample_term(&mut tape, &s, bound, &prior).expect("kl");
                    sink.push(kl);
                }
                let total = sink.total(&mut tape).expect("nonempty tape");
                (tape, total, vec![a.mu, a.rho, b.mu, b.rho])
            },
        ));
    }

    component("variational", results)
}

fn gate_inputs(noise: &mut NoiseSource, prefix: &str, m: usize, n: usize) -> Vec<Tensor> {
    let mut out = Vec::new();
    for gate in ["w_z", "b_z", "w_r", "b_r", "w_h", "b_h"] {
        let shape: &[usize] = if gate.starts_with('w') {
            &[m, m + n]
        } else {
            &[m]
        };
        out.push(rand_tensor(
            noise,
            &format!("{prefix}.{gate}"),
            shape,
            -0.8,
            0.8,
        ));
    }
    out
}

/// Unrolls `gru_step` over the rows of `x` from a zero initial state and
/// returns the final hidden state.
fn unroll(tape: &mut Tape, weights: &GruWeightVars, x: Var, m: usize) -> Var {
    let steps = tape.value(x).rows();
    let mut h = tape.leaf(Tensor::zeros(&[m]));
    for t in 0..steps {
        let x_t = tape.row(x, t).expect("in bounds");
        let (next, _trace) = gru_step(tape, weights, x_t, h).expect("step shapes");
        h = next;
    }
    h
}

fn check_recurrent() -> ComponentReport {
    let mut noise = NoiseSource::seeded(31);
    let (m, n, steps) = (3, 2, 4);
    let x = rand_tensor(&mut noise, "rnn-x", &[steps, n], -1.0, 1.0);
    let mut results = Vec::new();

    // Point GRU unrolled over four steps.
    {
        let mut inputs = gate_inputs(&mut noise, "gru", m, n);
        inputs.push(x.clone());
        results.push(run_case("gru-4step", &inputs, 1.0, |inputs| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let weights = GruWeightVars {
                w_z: leaves[0],
                b_z: leaves[1],
                w_r: leaves[2],
                b_r: leaves[3],
                w_h: leaves[4],
                b_h: leaves[5],
            };
            let h = unroll(&mut tape, &weights, leaves[6], m);
            let loss = spread(&mut tape, h, 30);
            (tape, loss, leaves)
        }));
    }

    // Variational GRU unrolled over four steps, differentiated through
    // every posterior mean and spread.
    {
        let mut inputs = Vec::new();
        for gate in ["w_z", "b_z", "w_r", "b_r", "w_h", "b_h"] {
            let shape: &[usize] = if gate.starts_with('w') {
                &[m, m + n]
            } else {
                &[m]
            };
            inputs.push(rand_tensor(&mut noise, &format!("bg.{gate}.mu"), shape, -0.8, 0.8));
            inputs.push(rand_tensor(
                &mut noise,
                &format!("bg.{gate}.rho"),
                shape,
                -2.0,
                0.0,
            ));
        }
        inputs.push(x.clone());
        results.push(run_case("bgru-4step", &inputs, 1.0, |inputs| {
            let mut tape = Tape::new();
            let mut leaves = Vec::new();
            let mut bounds = Vec::new();
            for (i, gate) in ["w_z", "b_z", "w_r", "b_r", "w_h", "b_h"].iter().enumerate() {
                let bound =
                    bind_gaussian(&mut tape, gate, &inputs[2 * i], &inputs[2 * i + 1]);
                leaves.push(bound.mu);
                leaves.push(bound.rho);
                bounds.push(bound);
            }
            let x = tape.leaf(inputs[12].clone());
            leaves.push(x);
            let mut rng = NoiseSource::seeded(8);
            let mut sink = KlSink::new();
            let prior = PriorSpec::default();
            let mut sampled = Vec::new();
            for bound in &bounds {
                let s = sample_weight(&mut tape, bound, &mut rng).expect("sampled");
                let kl = kl_sample_term(&mut tape, &s, bound, &prior).expect("kl");
                sink.push(kl);
                sampled.push(s.w);
            }
            let weights = GruWeightVars {
                w_z: sampled[0],
                b_z: sampled[1],
                w_r: sampled[2],
                b_r: sampled[3],
                w_h: sampled[4],
                b_h: sampled[5],
            };
            let h = unroll(&mut tape, &weights, x, 3);
            let fit = spread(&mut tape, h, 31);
            let kl = sink.total(&mut tape).expect("nonempty tape");
            let kl_scaled = tape.scale(kl, 0.05);
            let loss = tape.add(fit, kl_scaled).expect("scalars");
            (tape, loss, leaves)
        }));
    }

    component("recurrent", results)
}

fn check_attention() -> ComponentReport {
    let mut noise = NoiseSource::seeded(63);
    let (t, m, heads) = (3, 4, 2);
    let d = m / heads;
    let h_rows = rand_tensor(&mut noise, "att-h", &[t, m], -1.0, 1.0);
    let mut results = Vec::new();

    // Variational multi-head attention over a fixed state matrix.
    {
        let mut inputs = Vec::new();
        for i in 0..heads {
            for proj in ["w_q", "w_k", "w_v"] {
                inputs.push(rand_tensor(
                    &mut noise,
                    &format!("h{i}.{proj}.mu"),
                    &[d, m],
                    -0.8,
                    0.8,
                ));
                inputs.push(rand_tensor(
                    &mut noise,
                    &format!("h{i}.{proj}.rho"),
                    &[d, m],
                    -2.0,
                    0.0,
                ));
            }
        }
        inputs.push(rand_tensor(&mut noise, "w_c.mu", &[m, m], -0.8, 0.8));
        inputs.push(rand_tensor(&mut noise, "w_c.rho", &[m, m], -2.0, 0.0));
        inputs.push(h_rows.clone());
        results.push(run_case("multihead", &inputs, 1.0, move |inputs| {
            let mut tape = Tape::new();
            let mut leaves = Vec::new();
            let mut gaussians = Vec::new();
            for pair in 0..(heads * 3 + 1) {
                let name = format!("p{pair}");
                let bound =
                    bind_gaussian(&mut tape, &name, &inputs[2 * pair], &inputs[2 * pair + 1]);
                leaves.push(bound.mu);
                leaves.push(bound.rho);
                gaussians.push(bound);
            }
            let h = tape.leaf(inputs[2 * (heads * 3 + 1)].clone());
            leaves.push(h);

            let mut rng = NoiseSource::seeded(9);
            let mut sink = KlSink::new();
            let prior = PriorSpec::default();
            let mut draw = |tape: &mut Tape, sink: &mut KlSink, g: &BoundGaussian| {
                let s = sample_weight(tape, g, &mut rng).expect("sampled");
                let kl = kl_sample_term(tape, &s, g, &prior).expect("kl");
                sink.push(kl);
                s.w
            };
            let mut head_vars = Vec::new();
            for i in 0..heads {
                let w_q = draw(&mut tape, &mut sink, &gaussians[3 * i]);
                let w_k = draw(&mut tape, &mut sink, &gaussians[3 * i + 1]);
                let w_v = draw(&mut tape, &mut sink, &gaussians[3 * i + 2]);
                head_vars.push(crate::attention::HeadVars { w_q, w_k, w_v });
            }
            let w_c = draw(&mut tape, &mut sink, &gaussians[heads * 3]);
            let ctx = crate::attention::multihead_from_vars(&mut tape, h, &head_vars, w_c)
                .expect("shapes agree");
            let fit = spread(&mut tape, ctx.c, 40);
            let kl = sink.total(&mut tape).expect("nonempty tape");
            let kl_scaled = tape.scale(kl, 0.05);
            let loss = tape.add(fit, kl_scaled).expect("scalars");
            (tape, loss, leaves)
        }));
    }

    // Additive attention scoring a state against a sequence.
    {
        let att = 3;
        let s_prev = rand_tensor(&mut noise, "add-s", &[m], -1.0, 1.0);
        let v_e = rand_tensor(&mut noise, "add-v", &[att], -1.0, 1.0);
        let w_e = rand_tensor(&mut noise, "add-w", &[att, m], -1.0, 1.0);
        let u_e = rand_tensor(&mut noise, "add-u", &[att, m], -1.0, 1.0);
        let inputs = vec![s_prev, v_e, w_e, u_e, h_rows];
        results.push(run_case("additive", &inputs, 1.0, |inputs| {
            let mut tape = Tape::new();
            let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
            let vars = AdditiveAttentionVars {
                v_e: leaves[1],
                w_e: leaves[2],
                u_e: leaves[3],
            };
            let (context, _alpha) =
                additive_attention(&mut tape, leaves[0], leaves[4], &vars).expect("shapes");
            let loss = spread(&mut tape, context, 41);
            (tape, loss, leaves)
        }));
    }

    component("attention", results)
}

fn check_composite() -> ComponentReport {
    // A whole forecaster, differentiated through every parameter.
    let cfg = ModelConfig {
        variant: Variant::Bedma,
        layers: 1,
        hidden: 2,
        heads: 2,
        window: 3,
        horizon: 2,
        input_width: 1,
        prior: PriorSpec::default(),
        sigma_init: 0.1,
    };
    let template = build_model(&cfg, 2024).expect("valid config");
    let window = Tensor::new(vec![3, 1], vec![0.25, 0.6, 0.45]).expect("window");
    let target = Tensor::vector(vec![0.5, 0.4]);

    let inputs: Vec<Tensor> = template
        .param_entries()
        .iter()
        .map(|(_, t)| (*t).clone())
        .collect();

    let result = run_case("bedma-forward", &inputs, 1.0, |inputs| {
        let mut model = template.clone();
        for ((_, slot), tensor) in model.param_entries_mut().into_iter().zip(inputs) {
            *slot = tensor.clone();
        }
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape).expect("bindable");
        let mut rng = NoiseSource::seeded(11);
        let fwd = bound
            .forward(&mut tape, &window, &mut rng)
            .expect("forward");
        let y = tape.leaf(target.clone());
        let diff = tape.sub(fwd.y_hat, y).expect("same length");
        let sq = tape.square(diff);
        let fit = tape.mean(sq).expect("nonempty");
        let kl_scaled = tape.scale(fwd.kl, 0.01);
        let loss = tape.add(fit, kl_scaled).expect("scalars");
        let leaves: Vec<Var> = bound.params().iter().map(|(_, v)| *v).collect();
        (tape, loss, leaves)
    });

    component("composite", vec![result])
}

/// Runs every component's checks.
pub fn run_gradcheck(fault: Fault) -> CheckReport {
    CheckReport {
        components: vec![
            check_autodiff_ops(fault),
            check_variational(),
            check_recurrent(),
            check_attention(),
            check_composite(),
        ],
    }
}
