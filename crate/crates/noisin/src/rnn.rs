//! Deterministic recurrent cells: the simple squashed-affine cell, the
//! four-gate LSTM, layer stacking, and the gate-level dropout LSTM with its
//! eight Bernoulli masks.
//!
//! Every step function exists twice with identical kernel call order: a
//! plain-tensor version for evaluation and Monte Carlo diagnostics, and a
//! `_traced` version that records on a [`Tape`] for training. The pair is
//! bit-identical on equal inputs.

use crate::rng::Pcg32;
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum CellKind {
    ErnnSigmoid,
    ErnnTanh,
    Lstm,
}

impl CellKind {
    pub fn is_lstm(&self) -> bool {
        matches!(self, CellKind::Lstm)
    }

    pub fn gate_count(&self) -> usize {
        if self.is_lstm() {
            4
        } else {
            1
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CellKind::ErnnSigmoid => "ernn-sigmoid",
            CellKind::ErnnTanh => "ernn-tanh",
            CellKind::Lstm => "lstm",
        }
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ernn-sigmoid" | "ernn_sigmoid" | "ernn" => Ok(CellKind::ErnnSigmoid),
            "ernn-tanh" | "ernn_tanh" => Ok(CellKind::ErnnTanh),
            "lstm" => Ok(CellKind::Lstm),
            other => Err(Error::Config(format!("unknown cell kind '{other}'"))),
        }
    }
}

/// One gate's parameters: input matrix, recurrent matrix, bias row.
#[derive(Clone, Debug)]
pub struct GateParams {
    pub w_x: Tensor,
    pub w_h: Tensor,
    pub b: Tensor,
}

/// Parameters of one recurrent layer. LSTM layers hold exactly four gate
/// sets in the order forget, input, output, candidate; the simple cells
/// hold one.
#[derive(Clone, Debug)]
pub struct CellParams {
    pub kind: CellKind,
    pub gates: Vec<GateParams>,
}

pub const LSTM_FORGET: usize = 0;
pub const LSTM_INPUT: usize = 1;
pub const LSTM_OUTPUT: usize = 2;
pub const LSTM_CANDIDATE: usize = 3;
pub const LSTM_GATE_NAMES: [&str; 4] = ["forget", "input", "output", "candidate"];

impl CellParams {
    /// Uniform initialization in [-1/sqrt(H), 1/sqrt(H)], biases zero.
    /// Draw order per gate: w_x row-major, then w_h row-major.
    pub fn init(kind: CellKind, input_dim: usize, hidden: usize, rng: &mut Pcg32) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let gates = (0..kind.gate_count())
            .map(|_| GateParams {
                w_x: Tensor::from_fn(&[input_dim, hidden], |_| rng.uniform_range(-bound, bound)),
                w_h: Tensor::from_fn(&[hidden, hidden], |_| rng.uniform_range(-bound, bound)),
                b: Tensor::zeros(&[1, hidden]),
            })
            .collect();
        CellParams { kind, gates }
    }

    pub fn zeros(kind: CellKind, input_dim: usize, hidden: usize) -> Self {
        let gates = (0..kind.gate_count())
            .map(|_| GateParams {
                w_x: Tensor::zeros(&[input_dim, hidden]),
                w_h: Tensor::zeros(&[hidden, hidden]),
                b: Tensor::zeros(&[1, hidden]),
            })
            .collect();
        CellParams { kind, gates }
    }

    pub fn input_dim(&self) -> usize {
        self.gates[0].w_x.dims2().map(|(i, _)| i).unwrap_or(0)
    }

    pub fn hidden_dim(&self) -> usize {
        self.gates[0].w_h.dims2().map(|(h, _)| h).unwrap_or(0)
    }

    pub fn param_count(&self) -> usize {
        self.gates
            .iter()
            .map(|g| g.w_x.numel() + g.w_h.numel() + g.b.numel())
            .sum()
    }

    /// Registers every gate tensor as a tape leaf.
    pub fn to_tape(&self, tape: &mut Tape) -> CellNodes {
        CellNodes {
            kind: self.kind,
            gates: self
                .gates
                .iter()
                .map(|g| GateNodes {
                    w_x: tape.leaf(g.w_x.clone()),
                    w_h: tape.leaf(g.w_h.clone()),
                    b: tape.leaf(g.b.clone()),
                })
                .collect(),
        }
    }
}

/// Hidden state of one layer; `c` is present for LSTM cells only.
#[derive(Clone, Debug, PartialEq)]
pub struct RnnState {
    pub h: Tensor,
    pub c: Option<Tensor>,
}

impl RnnState {
    pub fn zeros(kind: CellKind, batch: usize, hidden: usize) -> Self {
        RnnState {
            h: Tensor::zeros(&[batch, hidden]),
            c: kind.is_lstm().then(|| Tensor::zeros(&[batch, hidden])),
        }
    }
}

pub struct GateNodes {
    pub w_x: NodeId,
    pub w_h: NodeId,
    pub b: NodeId,
}

pub struct CellNodes {
    pub kind: CellKind,
    pub gates: Vec<GateNodes>,
}

pub struct StateNodes {
    pub h: NodeId,
    pub c: Option<NodeId>,
}

fn gate_preactivation(g: &GateParams, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    let xa = tensor::matmul(x, &g.w_x)?;
    let ha = tensor::matmul(h, &g.w_h)?;
    let pre = tensor::add(&xa, &ha)?;
    tensor::add_row_broadcast(&pre, &g.b)
}

fn gate_preactivation_traced(
    tape: &mut Tape,
    g: &GateNodes,
    x: NodeId,
    h: NodeId,
) -> Result<NodeId> {
    let xa = tape.matmul(x, g.w_x)?;
    let ha = tape.matmul(h, g.w_h)?;
    let pre = tape.add(xa, ha)?;
    tape.add_row(pre, g.b)
}

/// One step of the simple cell: squash(x W_x + h W_h + b).
pub fn ernn_step(params: &CellParams, x: &Tensor, h_prev: &Tensor) -> Result<Tensor> {
    if params.kind.is_lstm() {
        return Err(Error::InvalidParameter("ernn_step on an LSTM cell".into()));
    }
    let pre = gate_preactivation(&params.gates[0], x, h_prev)?;
    Ok(match params.kind {
        CellKind::ErnnSigmoid => tensor::sigmoid(&pre),
        _ => tensor::tanh(&pre),
    })
}

pub fn ernn_step_traced(
    tape: &mut Tape,
    cell: &CellNodes,
    x: NodeId,
    h_prev: NodeId,
) -> Result<NodeId> {
    let pre = gate_preactivation_traced(tape, &cell.gates[0], x, h_prev)?;
    Ok(match cell.kind {
        CellKind::ErnnSigmoid => tape.sigmoid(pre),
        _ => tape.tanh(pre),
    })
}

/// One LSTM step: sigmoid forget/input/output gates, tanh candidate,
/// c' = f.c + i.g, h' = o.tanh(c').
pub fn lstm_step(params: &CellParams, x: &Tensor, state: &RnnState) -> Result<RnnState> {
    let c_prev = state
        .c
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("lstm_step without cell state".into()))?;
    let f = tensor::sigmoid(&gate_preactivation(&params.gates[LSTM_FORGET], x, &state.h)?);
    let i = tensor::sigmoid(&gate_preactivation(&params.gates[LSTM_INPUT], x, &state.h)?);
    let o = tensor::sigmoid(&gate_preactivation(&params.gates[LSTM_OUTPUT], x, &state.h)?);
    let g = tensor::tanh(&gate_preactivation(&params.gates[LSTM_CANDIDATE], x, &state.h)?);
    let c = tensor::add(&tensor::mul(&f, c_prev)?, &tensor::mul(&i, &g)?)?;
    let h = tensor::mul(&o, &tensor::tanh(&c))?;
    Ok(RnnState { h, c: Some(c) })
}

pub fn lstm_step_traced(
    tape: &mut Tape,
    cell: &CellNodes,
    x: NodeId,
    state: &StateNodes,
) -> Result<StateNodes> {
    let c_prev = state
        .c
        .ok_or_else(|| Error::InvalidParameter("lstm_step without cell state".into()))?;
    let fp = gate_preactivation_traced(tape, &cell.gates[LSTM_FORGET], x, state.h)?;
    let f = tape.sigmoid(fp);
    let ip = gate_preactivation_traced(tape, &cell.gates[LSTM_INPUT], x, state.h)?;
    let i = tape.sigmoid(ip);
    let op = gate_preactivation_traced(tape, &cell.gates[LSTM_OUTPUT], x, state.h)?;
    let o = tape.sigmoid(op);
    let gp = gate_preactivation_traced(tape, &cell.gates[LSTM_CANDIDATE], x, state.h)?;
    let g = tape.tanh(gp);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(StateNodes { h, c: Some(c) })
}

/// Dispatches on the cell kind.
pub fn cell_step(params: &CellParams, x: &Tensor, state: &RnnState) -> Result<RnnState> {
    if params.kind.is_lstm() {
        lstm_step(params, x, state)
    } else {
        Ok(RnnState { h: ernn_step(params, x, &state.h)?, c: None })
    }
}

pub fn cell_step_traced(
    tape: &mut Tape,
    cell: &CellNodes,
    x: NodeId,
    state: &StateNodes,
) -> Result<StateNodes> {
    if cell.kind.is_lstm() {
        lstm_step_traced(tape, cell, x, state)
    } else {
        Ok(StateNodes { h: ernn_step_traced(tape, cell, x, state.h)?, c: None })
    }
}

/// The eight gate-level dropout masks. Each mask multiplies one of the
/// matrix products before its gate nonlinearity; with inverted scaling the
/// kept entries carry 1/keep so the masked product is unbiased.
#[derive(Clone, Debug)]
pub struct DropoutMasks {
    pub xf: Tensor,
    pub xi: Tensor,
    pub xo: Tensor,
    pub xc: Tensor,
    pub hf: Tensor,
    pub hi: Tensor,
    pub ho: Tensor,
    pub hc: Tensor,
}

impl DropoutMasks {
    /// Neutral masks: the dropout step reduces to the plain LSTM bit for bit.
    pub fn ones(batch: usize, hidden: usize) -> Self {
        let one = || Tensor::full(&[batch, hidden], 1.0);
        DropoutMasks {
            xf: one(),
            xi: one(),
            xo: one(),
            xc: one(),
            hf: one(),
            hi: one(),
            ho: one(),
            hc: one(),
        }
    }

    /// Samples the four input-side masks at `keep_x` and the four
    /// hidden-side masks at `keep_h`. Draw order: xf, xi, xo, xc, hf, hi,
    /// ho, hc, each row-major. Keep probability 1 yields exact ones and
    /// consumes no randomness for that mask.
    pub fn sample(
        rng: &mut Pcg32,
        batch: usize,
        hidden: usize,
        keep_x: f64,
        keep_h: f64,
        inverted: bool,
    ) -> Result<Self> {
        let mut draw = |keep: f64| -> Result<Tensor> {
            if !(0.0 < keep && keep <= 1.0) {
                return Err(Error::InvalidParameter(format!(
                    "keep probability must be in (0, 1], got {keep}"
                )));
            }
            if keep == 1.0 {
                return Ok(Tensor::full(&[batch, hidden], 1.0));
            }
            let on = if inverted { 1.0 / keep } else { 1.0 };
            Ok(Tensor::from_fn(&[batch, hidden], |_| {
                if rng.uniform() < keep {
                    on
                } else {
                    0.0
                }
            }))
        };
        Ok(DropoutMasks {
            xf: draw(keep_x)?,
            xi: draw(keep_x)?,
            xo: draw(keep_x)?,
            xc: draw(keep_x)?,
            hf: draw(keep_h)?,
            hi: draw(keep_h)?,
            ho: draw(keep_h)?,
            hc: draw(keep_h)?,
        })
    }

    pub fn to_tape(&self, tape: &mut Tape) -> DropoutMaskNodes {
        DropoutMaskNodes {
            xf: tape.constant(self.xf.clone()),
            xi: tape.constant(self.xi.clone()),
            xo: tape.constant(self.xo.clone()),
            xc: tape.constant(self.xc.clone()),
            hf: tape.constant(self.hf.clone()),
            hi: tape.constant(self.hi.clone()),
            ho: tape.constant(self.ho.clone()),
            hc: tape.constant(self.hc.clone()),
        }
    }
}

pub struct DropoutMaskNodes {
    pub xf: NodeId,
    pub xi: NodeId,
    pub xo: NodeId,
    pub xc: NodeId,
    pub hf: NodeId,
    pub hi: NodeId,
    pub ho: NodeId,
    pub hc: NodeId,
}

fn masked_preactivation(
    g: &GateParams,
    x: &Tensor,
    h: &Tensor,
    mx: &Tensor,
    mh: &Tensor,
) -> Result<Tensor> {
    let xa = tensor::mul(&tensor::matmul(x, &g.w_x)?, mx)?;
    let ha = tensor::mul(&tensor::matmul(h, &g.w_h)?, mh)?;
    let pre = tensor::add(&xa, &ha)?;
    tensor::add_row_broadcast(&pre, &g.b)
}

fn masked_preactivation_traced(
    tape: &mut Tape,
    g: &GateNodes,
    x: NodeId,
    h: NodeId,
    mx: NodeId,
    mh: NodeId,
) -> Result<NodeId> {
    let xa = tape.matmul(x, g.w_x)?;
    let xa = tape.mul(xa, mx)?;
    let ha = tape.matmul(h, g.w_h)?;
    let ha = tape.mul(ha, mh)?;
    let pre = tape.add(xa, ha)?;
    tape.add_row(pre, g.b)
}

/// LSTM step with every matrix product gated by its dropout mask, exactly
/// the eight-mask general form.
pub fn dropout_lstm_step(
    params: &CellParams,
    masks: &DropoutMasks,
    x: &Tensor,
    state: &RnnState,
) -> Result<RnnState> {
    if !params.kind.is_lstm() {
        return Err(Error::InvalidParameter("dropout_lstm_step on a non-LSTM cell".into()));
    }
    let c_prev = state
        .c
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter("dropout_lstm_step without cell state".into()))?;
    let f = tensor::sigmoid(&masked_preactivation(
        &params.gates[LSTM_FORGET],
        x,
        &state.h,
        &masks.xf,
        &masks.hf,
    )?);
    let i = tensor::sigmoid(&masked_preactivation(
        &params.gates[LSTM_INPUT],
        x,
        &state.h,
        &masks.xi,
        &masks.hi,
    )?);
    let o = tensor::sigmoid(&masked_preactivation(
        &params.gates[LSTM_OUTPUT],
        x,
        &state.h,
        &masks.xo,
        &masks.ho,
    )?);
    let g = tensor::tanh(&masked_preactivation(
        &params.gates[LSTM_CANDIDATE],
        x,
        &state.h,
        &masks.xc,
        &masks.hc,
    )?);
    let c = tensor::add(&tensor::mul(&f, c_prev)?, &tensor::mul(&i, &g)?)?;
    let h = tensor::mul(&o, &tensor::tanh(&c))?;
    Ok(RnnState { h, c: Some(c) })
}

pub fn dropout_lstm_step_traced(
    tape: &mut Tape,
    cell: &CellNodes,
    masks: &DropoutMaskNodes,
    x: NodeId,
    state: &StateNodes,
) -> Result<StateNodes> {
    let c_prev = state
        .c
        .ok_or_else(|| Error::InvalidParameter("dropout_lstm_step without cell state".into()))?;
    let fp =
        masked_preactivation_traced(tape, &cell.gates[LSTM_FORGET], x, state.h, masks.xf, masks.hf)?;
    let f = tape.sigmoid(fp);
    let ip =
        masked_preactivation_traced(tape, &cell.gates[LSTM_INPUT], x, state.h, masks.xi, masks.hi)?;
    let i = tape.sigmoid(ip);
    let op =
        masked_preactivation_traced(tape, &cell.gates[LSTM_OUTPUT], x, state.h, masks.xo, masks.ho)?;
    let o = tape.sigmoid(op);
    let gp = masked_preactivation_traced(
        tape,
        &cell.gates[LSTM_CANDIDATE],
        x,
        state.h,
        masks.xc,
        masks.hc,
    )?;
    let g = tape.tanh(gp);
    let fc = tape.mul(f, c_prev)?;
    let ig = tape.mul(i, g)?;
    let c = tape.add(fc, ig)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok(StateNodes { h, c: Some(c) })
}

/// Uniform [-0.1, 0.1] embedding initialization, row-major draw order.
pub fn init_embedding(vocab: usize, dim: usize, rng: &mut Pcg32) -> Tensor {
    Tensor::from_fn(&[vocab, dim], |_| rng.uniform_range(-0.1, 0.1))
}

/// Runs a deterministic stack over a token window.
///
/// `inputs` is step-major: `inputs[t * batch + b]` is the token consumed at
/// step t by batch row b. Layer l+1 consumes layer l's output at the same
/// step; layer 1 consumes the embedded token. Returns the final layer's
/// hidden state per step plus every layer's carried state.
pub fn forward_sequence(
    cells: &[CellParams],
    embedding: &Tensor,
    inputs: &[usize],
    batch: usize,
    init: &[RnnState],
) -> Result<(Vec<Tensor>, Vec<RnnState>)> {
    if inputs.is_empty() || batch == 0 || inputs.len() % batch != 0 {
        return Err(Error::InvalidParameter(format!(
            "forward_sequence: {} tokens do not form whole steps of batch {batch}",
            inputs.len()
        )));
    }
    if init.len() != cells.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} init states for {} layers",
            init.len(),
            cells.len()
        )));
    }
    let steps = inputs.len() / batch;
    let mut states: Vec<RnnState> = init.to_vec();
    let mut outputs = Vec::with_capacity(steps);
    for t in 0..steps {
        let toks = &inputs[t * batch..(t + 1) * batch];
        let mut x = tensor::gather_rows(embedding, toks)?;
        for (cell, state) in cells.iter().zip(states.iter_mut()) {
            let next = cell_step(cell, &x, state)?;
            x = next.h.clone();
            *state = next;
        }
        outputs.push(x);
    }
    Ok((outputs, states))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Unbatched scalar-loop reference for one simple-cell step.
    fn ernn_scalar_oracle(params: &CellParams, x: &[f64], h: &[f64]) -> Vec<f64> {
        let g = &params.gates[0];
        let hidden = params.hidden_dim();
        let mut out = vec![0.0; hidden];
        for j in 0..hidden {
            let mut acc = g.b.data()[j];
            for (k, xv) in x.iter().enumerate() {
                acc += xv * g.w_x.get2(k, j);
            }
            for (k, hv) in h.iter().enumerate() {
                acc += hv * g.w_h.get2(k, j);
            }
            out[j] = match params.kind {
                CellKind::ErnnSigmoid => tensor::sigmoid_scalar(acc),
                _ => acc.tanh(),
            };
        }
        out
    }

    fn lstm_scalar_oracle(
        params: &CellParams,
        x: &[f64],
        h: &[f64],
        c: &[f64],
    ) -> (Vec<f64>, Vec<f64>) {
        let hidden = params.hidden_dim();
        let pre = |gi: usize, j: usize| {
            let g = &params.gates[gi];
            let mut acc = g.b.data()[j];
            for (k, xv) in x.iter().enumerate() {
                acc += xv * g.w_x.get2(k, j);
            }
            for (k, hv) in h.iter().enumerate() {
                acc += hv * g.w_h.get2(k, j);
            }
            acc
        };
        let mut hc = (vec![0.0; hidden], vec![0.0; hidden]);
        for j in 0..hidden {
            let f = tensor::sigmoid_scalar(pre(LSTM_FORGET, j));
            let i = tensor::sigmoid_scalar(pre(LSTM_INPUT, j));
            let o = tensor::sigmoid_scalar(pre(LSTM_OUTPUT, j));
            let g = pre(LSTM_CANDIDATE, j).tanh();
            let cj = f * c[j] + i * g;
            hc.1[j] = cj;
            hc.0[j] = o * cj.tanh();
        }
        hc
    }

    fn random_cell(kind: CellKind, input: usize, hidden: usize, seed: u64) -> CellParams {
        let mut rng = Pcg32::seeded(seed);
        let mut p = CellParams::init(kind, input, hidden, &mut rng);
        // Nonzero biases so oracles cover the intercept path too.
        for g in &mut p.gates {
            g.b = Tensor::from_fn(&[1, hidden], |_| rng.uniform_range(-0.5, 0.5));
        }
        p
    }

    #[test]
    fn ernn_zero_weights_fixed_points() {
        let sig = CellParams::zeros(CellKind::ErnnSigmoid, 3, 4);
        let h = ernn_step(&sig, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.5));

        let th = CellParams::zeros(CellKind::ErnnTanh, 3, 4);
        let h = ernn_step(&th, &Tensor::zeros(&[2, 3]), &Tensor::zeros(&[2, 4])).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ernn_matches_scalar_oracle() {
        let p = random_cell(CellKind::ErnnSigmoid, 3, 5, 11);
        let mut rng = Pcg32::seeded(12);
        let x: Vec<f64> = (0..3).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let h: Vec<f64> = (0..5).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let out = ernn_step(
            &p,
            &Tensor::new(&[1, 3], x.clone()).unwrap(),
            &Tensor::new(&[1, 5], h.clone()).unwrap(),
        )
        .unwrap();
        let oracle = ernn_scalar_oracle(&p, &x, &h);
        for (a, b) in out.data().iter().zip(&oracle) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstm_zero_weights_forced_values() {
        let p = CellParams::zeros(CellKind::Lstm, 2, 3);
        let s0 = RnnState::zeros(CellKind::Lstm, 1, 3);
        let s1 = lstm_step(&p, &Tensor::zeros(&[1, 2]), &s0).unwrap();
        // gates 0.5, candidate 0 -> c = 0, h = 0
        assert!(s1.c.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
        assert!(s1.h.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_saturated_gates_carry_memory() {
        let mut p = CellParams::zeros(CellKind::Lstm, 2, 3);
        p.gates[LSTM_FORGET].b = Tensor::full(&[1, 3], 50.0);
        p.gates[LSTM_INPUT].b = Tensor::full(&[1, 3], -50.0);
        let c0 = Tensor::new(&[1, 3], vec![0.3, -0.7, 0.95]).unwrap();
        let s0 = RnnState { h: Tensor::zeros(&[1, 3]), c: Some(c0.clone()) };
        let s1 = lstm_step(&p, &Tensor::zeros(&[1, 2]), &s0).unwrap();
        for (a, b) in s1.c.unwrap().data().iter().zip(c0.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstm_matches_scalar_oracle() {
        let p = random_cell(CellKind::Lstm, 2, 2, 21);
        let mut rng = Pcg32::seeded(22);
        let x: Vec<f64> = (0..2).map(|_| rng.uniform_range(-1.0, 1.0)).collect();
        let h: Vec<f64> = (0..2).map(|_| rng.uniform_range(-0.9, 0.9)).collect();
        let c: Vec<f64> = (0..2).map(|_| rng.uniform_range(-0.9, 0.9)).collect();
        let state = RnnState {
            h: Tensor::new(&[1, 2], h.clone()).unwrap(),
            c: Some(Tensor::new(&[1, 2], c.clone()).unwrap()),
        };
        let next = lstm_step(&p, &Tensor::new(&[1, 2], x.clone()).unwrap(), &state).unwrap();
        let (oh, oc) = lstm_scalar_oracle(&p, &x, &h, &c);
        for (a, b) in next.h.data().iter().zip(&oh) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in next.c.unwrap().data().iter().zip(&oc) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn lstm_param_count_formula() {
        let (input, hidden) = (7, 5);
        let p = CellParams::zeros(CellKind::Lstm, input, hidden);
        assert_eq!(p.param_count(), 4 * (input * hidden + hidden * hidden + hidden));
    }

    #[test]
    fn hidden_states_stay_bounded() {
        let p = random_cell(CellKind::Lstm, 3, 4, 31);
        let mut rng = Pcg32::seeded(32);
        let mut state = RnnState::zeros(CellKind::Lstm, 2, 4);
        for _ in 0..50 {
            let x = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(-5.0, 5.0));
            state = lstm_step(&p, &x, &state).unwrap();
            assert!(state.h.data().iter().all(|&v| v.abs() < 1.0));
        }
        let e = random_cell(CellKind::ErnnSigmoid, 3, 4, 33);
        let mut h = Tensor::zeros(&[2, 4]);
        for _ in 0..50 {
            let x = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(-5.0, 5.0));
            h = ernn_step(&e, &x, &h).unwrap();
            assert!(h.data().iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn forward_sequence_single_step_equals_cell_step() {
        let cell = random_cell(CellKind::Lstm, 4, 4, 41);
        let mut rng = Pcg32::seeded(42);
        let emb = init_embedding(6, 4, &mut rng);
        let init = vec![RnnState::zeros(CellKind::Lstm, 2, 4)];
        let (outs, states) =
            forward_sequence(std::slice::from_ref(&cell), &emb, &[3, 1], 2, &init).unwrap();
        assert_eq!(outs.len(), 1);
        let x = tensor::gather_rows(&emb, &[3, 1]).unwrap();
        let direct = lstm_step(&cell, &x, &init[0]).unwrap();
        assert_eq!(outs[0], direct.h);
        assert_eq!(states[0], direct);
    }

    #[test]
    fn zero_second_layer_output_is_data_independent() {
        let l1 = random_cell(CellKind::ErnnSigmoid, 4, 4, 51);
        let l2 = CellParams::zeros(CellKind::ErnnSigmoid, 4, 4);
        let mut rng = Pcg32::seeded(52);
        let emb = init_embedding(6, 4, &mut rng);
        let init = vec![
            RnnState::zeros(CellKind::ErnnSigmoid, 1, 4),
            RnnState::zeros(CellKind::ErnnSigmoid, 1, 4),
        ];
        let (outs, _) =
            forward_sequence(&[l1, l2], &emb, &[0, 3, 5, 2], 1, &init).unwrap();
        for o in outs {
            assert!(o.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn forward_sequence_matches_hand_unrolled_steps() {
        let cell = random_cell(CellKind::Lstm, 3, 3, 61);
        let mut rng = Pcg32::seeded(62);
        let emb = init_embedding(5, 3, &mut rng);
        let toks = [4usize, 0, 2];
        let init = vec![RnnState::zeros(CellKind::Lstm, 1, 3)];
        let (outs, finals) =
            forward_sequence(std::slice::from_ref(&cell), &emb, &toks, 1, &init).unwrap();

        let mut state = init[0].clone();
        for (t, &tok) in toks.iter().enumerate() {
            let x = tensor::gather_rows(&emb, &[tok]).unwrap();
            state = lstm_step(&cell, &x, &state).unwrap();
            assert_eq!(outs[t], state.h, "step {t}");
        }
        assert_eq!(finals[0], state);
    }

    #[test]
    fn dropout_with_unit_masks_is_bit_identical_to_lstm() {
        let p = random_cell(CellKind::Lstm, 3, 4, 71);
        let mut rng = Pcg32::seeded(72);
        let x = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(-1.0, 1.0));
        let state = RnnState {
            h: Tensor::from_fn(&[2, 4], |_| rng.uniform_range(-0.9, 0.9)),
            c: Some(Tensor::from_fn(&[2, 4], |_| rng.uniform_range(-0.9, 0.9))),
        };
        let masks = DropoutMasks::ones(2, 4);
        let plain = lstm_step(&p, &x, &state).unwrap();
        let dropped = dropout_lstm_step(&p, &masks, &x, &state).unwrap();
        assert_eq!(plain.h.data(), dropped.h.data());
        assert_eq!(plain.c.unwrap().data(), dropped.c.unwrap().data());
    }

    #[test]
    fn zero_input_masks_equal_zeroed_input_weights() {
        let p = random_cell(CellKind::Lstm, 3, 4, 81);
        let mut zeroed = p.clone();
        for g in &mut zeroed.gates {
            g.w_x = Tensor::zeros(&[3, 4]);
        }
        let mut rng = Pcg32::seeded(82);
        let x = Tensor::from_fn(&[1, 3], |_| rng.uniform_range(-1.0, 1.0));
        let state = RnnState {
            h: Tensor::from_fn(&[1, 4], |_| rng.uniform_range(-0.9, 0.9)),
            c: Some(Tensor::from_fn(&[1, 4], |_| rng.uniform_range(-0.9, 0.9))),
        };
        let mut masks = DropoutMasks::ones(1, 4);
        masks.xf = Tensor::zeros(&[1, 4]);
        masks.xi = Tensor::zeros(&[1, 4]);
        masks.xo = Tensor::zeros(&[1, 4]);
        masks.xc = Tensor::zeros(&[1, 4]);
        let via_masks = dropout_lstm_step(&p, &masks, &x, &state).unwrap();
        let via_weights = lstm_step(&zeroed, &x, &state).unwrap();
        for (a, b) in via_masks.h.data().iter().zip(via_weights.h.data()) {
            assert!((a - b).abs() <= 1e-15);
        }
    }

    #[test]
    fn traced_steps_are_bit_identical_to_plain() {
        let p = random_cell(CellKind::Lstm, 3, 4, 91);
        let mut rng = Pcg32::seeded(92);
        let x = Tensor::from_fn(&[2, 3], |_| rng.uniform_range(-1.0, 1.0));
        let state = RnnState {
            h: Tensor::from_fn(&[2, 4], |_| rng.uniform_range(-0.9, 0.9)),
            c: Some(Tensor::from_fn(&[2, 4], |_| rng.uniform_range(-0.9, 0.9))),
        };
        let plain = lstm_step(&p, &x, &state).unwrap();

        let mut tape = Tape::new();
        let cell = p.to_tape(&mut tape);
        let xn = tape.constant(x.clone());
        let sn = StateNodes {
            h: tape.constant(state.h.clone()),
            c: Some(tape.constant(state.c.clone().unwrap())),
        };
        let next = lstm_step_traced(&mut tape, &cell, xn, &sn).unwrap();
        assert_eq!(tape.value(next.h).data(), plain.h.data());
        assert_eq!(tape.value(next.c.unwrap()).data(), plain.c.unwrap().data());

        // Same check for the simple cell.
        let e = random_cell(CellKind::ErnnTanh, 3, 4, 93);
        let h_prev = Tensor::from_fn(&[2, 4], |_| rng.uniform_range(-0.9, 0.9));
        let plain_h = ernn_step(&e, &x, &h_prev).unwrap();
        let mut tape = Tape::new();
        let cell = e.to_tape(&mut tape);
        let xn = tape.constant(x);
        let hn = tape.constant(h_prev);
        let out = ernn_step_traced(&mut tape, &cell, xn, hn).unwrap();
        assert_eq!(tape.value(out).data(), plain_h.data());
    }

    #[test]
    fn mask_sampling_respects_keep_probabilities() {
        let mut rng = Pcg32::seeded(101);
        let masks = DropoutMasks::sample(&mut rng, 50, 40, 0.5, 1.0, true).unwrap();
        // Hidden-side masks at keep 1 are exactly ones (the input/output-only
        // dropout variant).
        assert!(masks.hf.data().iter().all(|&v| v == 1.0));
        assert!(masks.hc.data().iter().all(|&v| v == 1.0));
        // Input-side masks are {0, 2} with roughly half surviving.
        let kept = masks.xf.data().iter().filter(|&&v| v != 0.0).count();
        assert!(masks.xf.data().iter().all(|&v| v == 0.0 || v == 2.0));
        let n = masks.xf.numel() as f64;
        assert!((kept as f64 - 0.5 * n).abs() < 4.0 * (0.25 * n).sqrt());
    }
}
