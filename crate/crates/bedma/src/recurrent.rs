//! Gated recurrent cells in point-weight and variational flavours.
//!
//! Both flavours share one step function, so the Bayesian cell is exactly
//! the deterministic cell evaluated at sampled weights. Sampling happens
//! once per sequence: a cell's weights are drawn before the time loop and
//! reused at every step, which is what makes the per-sequence KL term
//! well defined.
//!
//! Gate convention for hidden width `m` and input width `n`:
//!
//! * update gate `z_t = sigmoid(W_z [h_{t-1}, x_t] + b_z)`
//! * reset gate `r_t = sigmoid(W_r [h_{t-1}, x_t] + b_r)`
//! * candidate `h~_t = tanh(W_h [r_t (*) h_{t-1}, x_t] + b_h)`
//! * state `h_t = (1 - z_t) (*) h~_t + z_t (*) h_{t-1}`
//!
//! so `z_t -> 1` preserves the previous state. Each `W_*` is `[m, m + n]`
//! with the recurrent block first, and each `b_*` is `[m]`.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::variational::{
    sample_weight, BoundGaussian, GaussianVariational, KlSink, NoiseSource, PriorSpec,
    VariationalError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RecurrentError {
    #[error("{name}: {detail}")]
    BadCellShapes { name: String, detail: String },
    #[error("cell stack is empty")]
    EmptyStack,
    #[error("input width {got} does not match the first cell's width {expected}")]
    InputWidthMismatch { expected: usize, got: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
}

const GATE_NAMES: [&str; 6] = ["w_z", "b_z", "w_r", "b_r", "w_h", "b_h"];

/// Point-valued GRU cell parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GruCellParams {
    pub name: String,
    pub w_z: Tensor,
    pub b_z: Tensor,
    pub w_r: Tensor,
    pub b_r: Tensor,
    pub w_h: Tensor,
    pub b_h: Tensor,
}

impl GruCellParams {
    pub fn new(
        name: impl Into<String>,
        w_z: Tensor,
        b_z: Tensor,
        w_r: Tensor,
        b_r: Tensor,
        w_h: Tensor,
        b_h: Tensor,
    ) -> Result<Self, RecurrentError> {
        let cell = GruCellParams {
            name: name.into(),
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
        };
        cell.validate()?;
        Ok(cell)
    }

    fn validate(&self) -> Result<(), RecurrentError> {
        validate_gate_shapes(
            &self.name,
            [
                (&self.w_z, &self.b_z),
                (&self.w_r, &self.b_r),
                (&self.w_h, &self.b_h),
            ],
        )
    }

    /// Hidden state width `m`.
    pub fn hidden_width(&self) -> usize {
        self.b_z.len()
    }

    /// Per-step input width `n`.
    pub fn input_width(&self) -> usize {
        self.w_z.cols() - self.hidden_width()
    }

    fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_z, &self.b_z, &self.w_r, &self.b_r, &self.w_h, &self.b_h]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.b_h,
        ]
    }
}

/// GRU cell parameters with a Gaussian posterior per weight tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct BgruCellParams {
    pub name: String,
    pub w_z: GaussianVariational,
    pub b_z: GaussianVariational,
    pub w_r: GaussianVariational,
    pub b_r: GaussianVariational,
    pub w_h: GaussianVariational,
    pub b_h: GaussianVariational,
}

impl BgruCellParams {
    pub fn new(
        name: impl Into<String>,
        w_z: GaussianVariational,
        b_z: GaussianVariational,
        w_r: GaussianVariational,
        b_r: GaussianVariational,
        w_h: GaussianVariational,
        b_h: GaussianVariational,
    ) -> Result<Self, RecurrentError> {
        let cell = BgruCellParams {
            name: name.into(),
            w_z,
            b_z,
            w_r,
            b_r,
            w_h,
            b_h,
        };
        validate_gate_shapes(
            &cell.name,
            [
                (&cell.w_z.mu, &cell.b_z.mu),
                (&cell.w_r.mu, &cell.b_r.mu),
                (&cell.w_h.mu, &cell.b_h.mu),
            ],
        )?;
        Ok(cell)
    }

    pub fn hidden_width(&self) -> usize {
        self.b_z.mu.len()
    }

    pub fn input_width(&self) -> usize {
        self.w_z.mu.cols() - self.hidden_width()
    }

    /// Collapses the posterior to its mean, producing a point cell.
    pub fn to_point(&self) -> GruCellParams {
        GruCellParams {
            name: self.name.clone(),
            w_z: self.w_z.mu.clone(),
            b_z: self.b_z.mu.clone(),
            w_r: self.w_r.mu.clone(),
            b_r: self.b_r.mu.clone(),
            w_h: self.w_h.mu.clone(),
            b_h: self.b_h.mu.clone(),
        }
    }

    fn gaussians(&self) -> [&GaussianVariational; 6] {
        [&self.w_z, &self.b_z, &self.w_r, &self.b_r, &self.w_h, &self.b_h]
    }

    fn gaussians_mut(&mut self) -> [&mut GaussianVariational; 6] {
        [
            &mut self.w_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.b_h,
        ]
    }
}

fn validate_gate_shapes(
    name: &str,
    pairs: [(&Tensor, &Tensor); 3],
) -> Result<(), RecurrentError> {
    let m = pairs[0].1.len();
    let cols = pairs[0].0.cols();
    if cols <= m {
        return Err(RecurrentError::BadCellShapes {
            name: name.to_string(),
            detail: format!("weight cols {cols} must exceed hidden width {m}"),
        });
    }
    for (i, (w, b)) in pairs.iter().enumerate() {
        let gate = GATE_NAMES[i * 2];
        if w.rank() != 2 || b.rank() != 1 {
            return Err(RecurrentError::BadCellShapes {
                name: name.to_string(),
                detail: format!("{gate} must be rank 2 with a rank-1 bias"),
            });
        }
        if w.rows() != m || w.cols() != cols || b.len() != m {
            return Err(RecurrentError::BadCellShapes {
                name: name.to_string(),
                detail: format!(
                    "{gate} is {:?} with bias {:?}, expected [{m}, {cols}] and [{m}]",
                    w.shape(),
                    b.shape()
                ),
            });
        }
    }
    Ok(())
}

/// A cell in either flavour; stacks mix freely.
#[derive(Debug, Clone, PartialEq)]
pub enum CellParams {
    Point(GruCellParams),
    Variational(BgruCellParams),
}

impl CellParams {
    pub fn name(&self) -> &str {
        match self {
            CellParams::Point(c) => &c.name,
            CellParams::Variational(c) => &c.name,
        }
    }

    pub fn hidden_width(&self) -> usize {
        match self {
            CellParams::Point(c) => c.hidden_width(),
            CellParams::Variational(c) => c.hidden_width(),
        }
    }

    pub fn input_width(&self) -> usize {
        match self {
            CellParams::Point(c) => c.input_width(),
            CellParams::Variational(c) => c.input_width(),
        }
    }

    /// Collapses a variational cell to its posterior mean; point cells
    /// are returned unchanged.
    pub fn to_point(&self) -> CellParams {
        match self {
            CellParams::Point(c) => CellParams::Point(c.clone()),
            CellParams::Variational(c) => CellParams::Point(c.to_point()),
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, CellParams::Variational(_))
    }

    /// Named parameter tensors in a fixed order, for optimizers and
    /// checkpoints. Variational tensors appear as `.mu` / `.rho` pairs.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        match self {
            CellParams::Point(c) => GATE_NAMES
                .iter()
                .zip(c.tensors())
                .map(|(gate, t)| (format!("{}.{gate}", c.name), t))
                .collect(),
            CellParams::Variational(c) => {
                let mut out = Vec::with_capacity(12);
                for (gate, gv) in GATE_NAMES.iter().zip(c.gaussians()) {
                    out.push((format!("{}.{gate}.mu", c.name), &gv.mu));
                    out.push((format!("{}.{gate}.rho", c.name), &gv.rho));
                }
                out
            }
        }
    }

    /// Mutable variant of [`CellParams::param_entries`], same order.
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        match self {
            CellParams::Point(c) => {
                let name = c.name.clone();
                GATE_NAMES
                    .iter()
                    .zip(c.tensors_mut())
                    .map(|(gate, t)| (format!("{name}.{gate}"), t))
                    .collect()
            }
            CellParams::Variational(c) => {
                let name = c.name.clone();
                let mut out = Vec::with_capacity(12);
                for (gate, gv) in GATE_NAMES.iter().zip(c.gaussians_mut()) {
                    out.push((format!("{name}.{gate}.mu"), &mut gv.mu));
                    out.push((format!("{name}.{gate}.rho"), &mut gv.rho));
                }
                out
            }
        }
    }

    /// Registers this cell's parameters on a tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundCell, RecurrentError> {
        match self {
            CellParams::Point(c) => Ok(BoundCell::Point(GruWeightVars {
                w_z: tape.leaf(c.w_z.clone()),
                b_z: tape.leaf(c.b_z.clone()),
                w_r: tape.leaf(c.w_r.clone()),
                b_r: tape.leaf(c.b_r.clone()),
                w_h: tape.leaf(c.w_h.clone()),
                b_h: tape.leaf(c.b_h.clone()),
            })),
            CellParams::Variational(c) => Ok(BoundCell::Variational(Box::new(BoundBgru {
                w_z: c.w_z.bind(tape)?,
                b_z: c.b_z.bind(tape)?,
                w_r: c.w_r.bind(tape)?,
                b_r: c.b_r.bind(tape)?,
                w_h: c.w_h.bind(tape)?,
                b_h: c.b_h.bind(tape)?,
            }))),
        }
    }
}

/// Weight nodes driving one step function call.
#[derive(Debug, Clone, Copy)]
pub struct GruWeightVars {
    pub w_z: Var,
    pub b_z: Var,
    pub w_r: Var,
    pub b_r: Var,
    pub w_h: Var,
    pub b_h: Var,
}

/// A variational cell bound to a tape, ready to be sampled.
pub struct BoundBgru {
    pub w_z: BoundGaussian,
    pub b_z: BoundGaussian,
    pub w_r: BoundGaussian,
    pub b_r: BoundGaussian,
    pub w_h: BoundGaussian,
    pub b_h: BoundGaussian,
}

/// A cell bound to a tape in either flavour.
pub enum BoundCell {
    Point(GruWeightVars),
    Variational(Box<BoundBgru>),
}

impl BoundCell {
    /// Produces the weight nodes for one sequence.
    ///
    /// Point cells hand back their leaves; variational cells draw one
    /// fresh sample per call and push six KL terms into `kl`.
    pub fn realize(
        &self,
        tape: &mut Tape,
        noise: &mut NoiseSource,
        kl: &mut KlSink,
        prior: &PriorSpec,
    ) -> Result<GruWeightVars, RecurrentError> {
        match self {
            BoundCell::Point(vars) => Ok(*vars),
            BoundCell::Variational(b) => {
                let draw = |tape: &mut Tape,
                                kl: &mut KlSink,
                                noise: &mut NoiseSource,
                                bound: &BoundGaussian|
                 -> Result<Var, RecurrentError> {
                    let sample = sample_weight(tape, bound, noise)?;
                    let term = crate::variational::kl_sample_term(tape, &sample, bound, prior)?;
                    kl.push(term);
                    Ok(sample.w)
                };
                Ok(GruWeightVars {
                    w_z: draw(tape, kl, noise, &b.w_z)?,
                    b_z: draw(tape, kl, noise, &b.b_z)?,
                    w_r: draw(tape, kl, noise, &b.w_r)?,
                    b_r: draw(tape, kl, noise, &b.b_r)?,
                    w_h: draw(tape, kl, noise, &b.w_h)?,
                    b_h: draw(tape, kl, noise, &b.b_h)?,
                })
            }
        }
    }
}

/// Gate activations captured at one step, for inspection and tests.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub z: Tensor,
    pub r: Tensor,
    pub h_tilde: Tensor,
    pub h: Tensor,
}

/// One GRU step. `x_t` is the step input, `h_prev` the previous state.
pub fn gru_step(
    tape: &mut Tape,
    w: &GruWeightVars,
    x_t: Var,
    h_prev: Var,
) -> Result<(Var, GateTrace), RecurrentError> {
    let cat = tape.concat(&[h_prev, x_t])?;
    let z_lin = tape.matvec(w.w_z, cat)?;
    let z_aff = tape.add(z_lin, w.b_z)?;
    let z = tape.sigmoid(z_aff);

    let r_lin = tape.matvec(w.w_r, cat)?;
    let r_aff = tape.add(r_lin, w.b_r)?;
    let r = tape.sigmoid(r_aff);

    let gated = tape.mul(r, h_prev)?;
    let cat_h = tape.concat(&[gated, x_t])?;
    let h_lin = tape.matvec(w.w_h, cat_h)?;
    let h_aff = tape.add(h_lin, w.b_h)?;
    let h_tilde = tape.tanh(h_aff);

    // h = (1 - z) * h~ + z * h_prev, with (1 - z) built as 1 + (-z).
    let neg_z = tape.neg(z);
    let one_minus_z = tape.add_const(neg_z, 1.0);
    let new_part = tape.mul(one_minus_z, h_tilde)?;
    let kept_part = tape.mul(z, h_prev)?;
    let h = tape.add(new_part, kept_part)?;

    let trace = GateTrace {
        z: tape.value(z).clone(),
        r: tape.value(r).clone(),
        h_tilde: tape.value(h_tilde).clone(),
        h: tape.value(h).clone(),
    };
    Ok((h, trace))
}

/// One step of a point cell, binding its parameters on the fly.
pub fn gru_cell_forward(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    cell: &GruCellParams,
) -> Result<(Var, GateTrace), RecurrentError> {
    let bound = CellParams::Point(cell.clone()).bind(tape)?;
    let mut kl = KlSink::new();
    let mut noise = NoiseSource::zero();
    let w = bound.realize(tape, &mut noise, &mut kl, &PriorSpec::default())?;
    gru_step(tape, &w, x_t, h_prev)
}

/// One step of a variational cell with freshly sampled weights.
///
/// Step-level helper for tests; sequence runners sample once per sequence
/// instead of once per step.
pub fn bgru_cell_forward(
    tape: &mut Tape,
    x_t: Var,
    h_prev: Var,
    cell: &BgruCellParams,
    noise: &mut NoiseSource,
    kl: &mut KlSink,
    prior: &PriorSpec,
) -> Result<(Var, GateTrace), RecurrentError> {
    let bound = CellParams::Variational(cell.clone()).bind(tape)?;
    let w = bound.realize(tape, noise, kl, prior)?;
    gru_step(tape, &w, x_t, h_prev)
}

/// Hidden states of the top cell at every step, as rows of one matrix.
#[derive(Debug)]
pub struct EncoderOutput {
    /// `[steps, hidden]` matrix of top-layer states.
    pub h: Var,
    /// Gate activations, indexed `traces[layer][step]`.
    pub traces: Vec<Vec<GateTrace>>,
    pub steps: usize,
    pub hidden: usize,
}

/// Final state of the top cell after consuming the whole sequence.
#[derive(Debug)]
pub struct DecoderOutput {
    pub h_last: Var,
    pub traces: Vec<Vec<GateTrace>>,
}

fn check_stack(
    weights_len: usize,
    input_cols: usize,
    first_input_width: usize,
) -> Result<(), RecurrentError> {
    if weights_len == 0 {
        return Err(RecurrentError::EmptyStack);
    }
    if input_cols != first_input_width {
        return Err(RecurrentError::InputWidthMismatch {
            expected: first_input_width,
            got: input_cols,
        });
    }
    Ok(())
}

/// Runs a realized cell stack over the rows of `x`, collecting every
/// top-layer state. Zero initial states throughout.
pub(crate) fn run_stack_collect(
    tape: &mut Tape,
    x: Var,
    weights: &[GruWeightVars],
    widths: &[(usize, usize)],
) -> Result<EncoderOutput, RecurrentError> {
    let steps = tape.value(x).rows();
    check_stack(weights.len(), tape.value(x).cols(), widths[0].1)?;
    let mut states: Vec<Var> = widths
        .iter()
        .map(|&(m, _)| tape.leaf(Tensor::zeros(&[m])))
        .collect();
    let mut traces: Vec<Vec<GateTrace>> = vec![Vec::with_capacity(steps); weights.len()];
    let mut tops = Vec::with_capacity(steps);
    for step in 0..steps {
        let mut input = tape.row(x, step)?;
        for (layer, w) in weights.iter().enumerate() {
            let (h, trace) = gru_step(tape, w, input, states[layer])?;
            states[layer] = h;
            traces[layer].push(trace);
            input = h;
        }
        tops.push(input);
    }
    let h = tape.stack_rows(&tops)?;
    let hidden = widths.last().expect("non-empty stack").0;
    Ok(EncoderOutput {
        h,
        traces,
        steps,
        hidden,
    })
}

/// Like [`run_stack_collect`] but keeps only the final top-layer state.
pub(crate) fn run_stack_last(
    tape: &mut Tape,
    x: Var,
    weights: &[GruWeightVars],
    widths: &[(usize, usize)],
) -> Result<DecoderOutput, RecurrentError> {
    let out = run_stack_collect(tape, x, weights, widths)?;
    let h_last = tape.row(out.h, out.steps - 1)?;
    Ok(DecoderOutput {
        h_last,
        traces: out.traces,
    })
}

fn bind_and_realize(
    tape: &mut Tape,
    cells: &[CellParams],
    noise: &mut NoiseSource,
    kl: &mut KlSink,
    prior: &PriorSpec,
) -> Result<(Vec<GruWeightVars>, Vec<(usize, usize)>), RecurrentError> {
    let mut weights = Vec::with_capacity(cells.len());
    let mut widths = Vec::with_capacity(cells.len());
    for cell in cells {
        let bound = cell.bind(tape)?;
        weights.push(bound.realize(tape, noise, kl, prior)?);
        widths.push((cell.hidden_width(), cell.input_width()));
    }
    Ok((weights, widths))
}

/// Encodes the rows of `x` through a cell stack.
///
/// Variational cells are sampled exactly once for the whole sequence;
/// their KL terms land in `kl`.
pub fn encode(
    tape: &mut Tape,
    x: Var,
    cells: &[CellParams],
    noise: &mut NoiseSource,
    kl: &mut KlSink,
    prior: &PriorSpec,
) -> Result<EncoderOutput, RecurrentError> {
    let (weights, widths) = bind_and_realize(tape, cells, noise, kl, prior)?;
    run_stack_collect(tape, x, &weights, &widths)
}

/// Runs a cell stack over the rows of `context` and returns the last state.
pub fn decode(
    tape: &mut Tape,
    context: Var,
    cells: &[CellParams],
    noise: &mut NoiseSource,
    kl: &mut KlSink,
    prior: &PriorSpec,
) -> Result<DecoderOutput, RecurrentError> {
    let (weights, widths) = bind_and_realize(tape, cells, noise, kl, prior)?;
    run_stack_last(tape, context, &weights, &widths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::variational::softplus_inv;

    fn point_cell(name: &str, m: usize, n: usize, fill: f64) -> GruCellParams {
        GruCellParams::new(
            name,
            Tensor::filled(&[m, m + n], fill),
            Tensor::filled(&[m], 0.0),
            Tensor::filled(&[m, m + n], fill),
            Tensor::filled(&[m], 0.0),
            Tensor::filled(&[m, m + n], fill),
            Tensor::filled(&[m], 0.0),
        )
        .unwrap()
    }

    fn variational_cell(name: &str, point: &GruCellParams, sigma: f64) -> BgruCellParams {
        let rho = softplus_inv(sigma);
        let gv = |suffix: &str, t: &Tensor| {
            GaussianVariational::new(
                format!("{name}.{suffix}"),
                t.clone(),
                Tensor::filled(t.shape(), rho),
            )
            .unwrap()
        };
        BgruCellParams::new(
            name,
            gv("w_z", &point.w_z),
            gv("b_z", &point.b_z),
            gv("w_r", &point.w_r),
            gv("b_r", &point.b_r),
            gv("w_h", &point.w_h),
            gv("b_h", &point.b_h),
        )
        .unwrap()
    }

    #[test]
    fn hand_computed_single_unit_step() {
        // m = 1, n = 1, h_prev = 0.5, x = 1.0, all weights 0.1, biases 0.
        // cat = [0.5, 1.0]; z = r = sigmoid(0.15);
        // h~ = tanh(0.1 * (r * 0.5) + 0.1 * 1.0); h = (1 - z) h~ + z * 0.5.
        let cell = point_cell("c", 1, 1, 0.1);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0]));
        let h_prev = tape.leaf(Tensor::vector(vec![0.5]));
        let (h, trace) = gru_cell_forward(&mut tape, x, h_prev, &cell).unwrap();

        let z = 1.0 / (1.0 + (-0.15f64).exp());
        let h_tilde = (0.1 * (z * 0.5) + 0.1).tanh();
        let expected = (1.0 - z) * h_tilde + z * 0.5;
        assert!((tape.value(h).data()[0] - expected).abs() < 1e-14);
        assert!((trace.z.data()[0] - z).abs() < 1e-14);
    }

    #[test]
    fn zero_weights_and_input_keep_state_at_zero() {
        let cell = point_cell("c", 3, 2, 0.0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[2]));
        let h_prev = tape.leaf(Tensor::zeros(&[3]));
        let (h, _) = gru_cell_forward(&mut tape, x, h_prev, &cell).unwrap();
        assert_eq!(tape.value(h).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn saturated_update_gate_preserves_state() {
        let mut cell = point_cell("c", 2, 1, 0.3);
        cell.b_z = Tensor::filled(&[2], 20.0);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![0.8]));
        let h_prev = tape.leaf(Tensor::vector(vec![0.5, -0.3]));
        let (h, trace) = gru_cell_forward(&mut tape, x, h_prev, &cell).unwrap();
        let drift = tape
            .value(h)
            .max_abs_diff(tape.value(h_prev));
        assert!(drift < 1e-8, "state drifted by {drift}");
        assert!(trace.z.data().iter().all(|&z| z > 0.999_999_99));
    }

    #[test]
    fn gate_outputs_stay_in_unit_interval() {
        let cell = point_cell("c", 4, 2, 1.7);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![-3.0, 5.0]));
        let h_prev = tape.leaf(Tensor::vector(vec![0.9, -0.9, 0.2, 0.0]));
        let (_, trace) = gru_cell_forward(&mut tape, x, h_prev, &cell).unwrap();
        for gate in [&trace.z, &trace.r] {
            assert!(gate.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
        assert!(trace.h_tilde.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
    }

    #[test]
    fn variational_cell_with_zero_noise_matches_point_cell() {
        let point = point_cell("c", 3, 2, 0.2);
        let var = variational_cell("c", &point, 0.9);
        let x_vals = Tensor::vector(vec![0.4, -0.6]);
        let h_vals = Tensor::vector(vec![0.1, 0.2, -0.3]);

        let mut t1 = Tape::new();
        let x1 = t1.leaf(x_vals.clone());
        let h1 = t1.leaf(h_vals.clone());
        let (out1, _) = gru_cell_forward(&mut t1, x1, h1, &point).unwrap();

        let mut t2 = Tape::new();
        let x2 = t2.leaf(x_vals);
        let h2 = t2.leaf(h_vals);
        let mut noise = NoiseSource::zero();
        let mut kl = KlSink::new();
        let (out2, _) =
            bgru_cell_forward(&mut t2, x2, h2, &var, &mut noise, &mut kl, &PriorSpec::default())
                .unwrap();

        assert!(t1.value(out1).max_abs_diff(t2.value(out2)) < 1e-15);
    }

    #[test]
    fn encode_stacks_one_state_row_per_step() {
        let cells = vec![
            CellParams::Point(point_cell("l0", 4, 1, 0.1)),
            CellParams::Point(point_cell("l1", 4, 4, 0.1)),
        ];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(5, 1, vec![0.1, 0.2, 0.3, 0.4, 0.5]).unwrap());
        let mut noise = NoiseSource::zero();
        let mut kl = KlSink::new();
        let out = encode(&mut tape, x, &cells, &mut noise, &mut kl, &PriorSpec::default())
            .unwrap();
        assert_eq!(tape.value(out.h).shape(), &[5, 4]);
        assert_eq!(out.traces.len(), 2);
        assert_eq!(out.traces[0].len(), 5);
        assert!(kl.is_empty());
    }

    #[test]
    fn variational_stack_samples_once_per_sequence() {
        let point = point_cell("l0", 3, 1, 0.2);
        let cells = vec![CellParams::Variational(variational_cell("l0", &point, 0.4))];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(6, 1, vec![0.0; 6]).unwrap());
        let mut noise = NoiseSource::seeded(9);
        let mut kl = KlSink::new();
        let out = encode(&mut tape, x, &cells, &mut noise, &mut kl, &PriorSpec::default())
            .unwrap();
        // Six weight tensors sampled once each, regardless of six steps.
        assert_eq!(kl.len(), 6);
        assert_eq!(out.steps, 6);
    }

    #[test]
    fn decoder_returns_last_top_state() {
        let cells = vec![CellParams::Point(point_cell("d0", 2, 2, 0.3))];
        let mut tape = Tape::new();
        let c = tape.leaf(Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
        let mut noise = NoiseSource::zero();
        let mut kl = KlSink::new();
        let out = decode(&mut tape, c, &cells, &mut noise, &mut kl, &PriorSpec::default())
            .unwrap();
        assert_eq!(tape.value(out.h_last).shape(), &[2]);
        // Must equal the state reached by stepping manually.
        let enc = {
            let mut t2 = Tape::new();
            let c2 =
                t2.leaf(Tensor::matrix(4, 2, (0..8).map(|i| i as f64 * 0.1).collect()).unwrap());
            let mut n2 = NoiseSource::zero();
            let mut k2 = KlSink::new();
            let e = encode(&mut t2, c2, &cells, &mut n2, &mut k2, &PriorSpec::default()).unwrap();
            t2.value(e.h).row_slice(3).to_vec()
        };
        assert_eq!(tape.value(out.h_last).data(), &enc[..]);
    }

    #[test]
    fn gradients_flow_back_to_variational_means() {
        let point = point_cell("l0", 2, 1, 0.15);
        let var = variational_cell("l0", &point, 0.3);
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(3, 1, vec![0.5, -0.5, 1.0]).unwrap());
        let bound = CellParams::Variational(var).bind(&mut tape).unwrap();
        let mut noise = NoiseSource::seeded(2);
        let mut kl = KlSink::new();
        let w = bound
            .realize(&mut tape, &mut noise, &mut kl, &PriorSpec::default())
            .unwrap();
        let out = run_stack_collect(&mut tape, x, &[w], &[(2, 1)]).unwrap();
        let loss = tape.sum(out.h);
        let grads = tape.backward(loss).unwrap();
        if let BoundCell::Variational(b) = &bound {
            let g = grads.get(b.w_h.mu);
            assert!(g.data().iter().any(|&v| v != 0.0));
        } else {
            unreachable!();
        }
    }

    #[test]
    fn mismatched_input_width_is_rejected() {
        let cells = vec![CellParams::Point(point_cell("l0", 2, 3, 0.1))];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(2, 2, vec![0.0; 4]).unwrap());
        let mut noise = NoiseSource::zero();
        let mut kl = KlSink::new();
        let err = encode(&mut tape, x, &cells, &mut noise, &mut kl, &PriorSpec::default())
            .unwrap_err();
        assert!(matches!(err, RecurrentError::InputWidthMismatch { .. }));
    }

    #[test]
    fn bad_gate_shapes_are_rejected() {
        let err = GruCellParams::new(
            "c",
            Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
            Tensor::matrix(2, 4, vec![0.0; 8]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
            Tensor::matrix(2, 3, vec![0.0; 6]).unwrap(),
            Tensor::vector(vec![0.0, 0.0]),
        )
        .unwrap_err();
        assert!(matches!(err, RecurrentError::BadCellShapes { .. }));
    }
}
