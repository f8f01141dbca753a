//! The noise-injected recurrent model and its training machinery.
//!
//! A [`NoisinModel`] bundles an embedding, a cell stack, an
//! exponential-family head and a noise source. Training maximizes the
//! expected log-likelihood under the injected noise, estimated with K Monte
//! Carlo rollouts (K = 1 by default); the noisy state feeds the next step,
//! and gradients treat the noise draws as constants.
//!
//! Pure and taped rollouts are written with the same kernel call order, so
//! loss values agree bit for bit between evaluation and training paths, and
//! an off-mode rollout is bit-identical to the deterministic network.
//!
//! Randomness layout, for reproducibility: each of the K rollouts runs on
//! its own `split()` child of the caller's noise RNG (and of the dropout RNG
//! when gate masks are active). Within a rollout, step t samples, in order:
//! per-layer gate masks (layer order), then after each injected layer's cell
//! step its injection tensor, then the output-dropout mask.

use crate::data::WindowView;
use crate::expfam::{self, LikelihoodHead};
use crate::noise::{self, InjectionMode, NoiseSpec};
use crate::rng::Pcg32;
use crate::rnn::{
    self, CellKind, CellNodes, CellParams, DropoutMasks, RnnState, StateNodes,
};
use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Where noise enters the stack. Injecting only at the final layer is the
/// strong-unbiasedness construction; injecting at every layer's output is
/// the stacked weak form.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum LayerInjection {
    EveryLayer,
    FinalLayerOnly,
}

impl LayerInjection {
    pub fn name(&self) -> &'static str {
        match self {
            LayerInjection::EveryLayer => "every-layer",
            LayerInjection::FinalLayerOnly => "final-layer",
        }
    }
}

impl std::str::FromStr for LayerInjection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "every-layer" | "every" | "all" => Ok(LayerInjection::EveryLayer),
            "final-layer" | "final" | "last" => Ok(LayerInjection::FinalLayerOnly),
            other => Err(Error::Config(format!("unknown injection placement '{other}'"))),
        }
    }
}

/// Gate-level dropout configuration. Rates are drop probabilities: the
/// input rate feeds the four x-side masks (which for layers above the first
/// gate the between-layer connections), the recurrent rate the four h-side
/// masks, and the output rate a mask on the final hidden state before the
/// prediction matrix. Masks use inverted scaling and are resampled every
/// step unless `per_sequence` is set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropoutConfig {
    pub input_rate: f64,
    pub recurrent_rate: f64,
    pub output_rate: f64,
    pub per_sequence: bool,
}

impl DropoutConfig {
    pub fn new(input_rate: f64, recurrent_rate: f64, output_rate: f64) -> Result<Self> {
        for (name, r) in
            [("input", input_rate), ("recurrent", recurrent_rate), ("output", output_rate)]
        {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::InvalidParameter(format!(
                    "{name} dropout rate must be in [0, 1), got {r}"
                )));
            }
        }
        Ok(DropoutConfig { input_rate, recurrent_rate, output_rate, per_sequence: false })
    }

    pub fn is_active(&self) -> bool {
        self.input_rate > 0.0 || self.recurrent_rate > 0.0 || self.output_rate > 0.0
    }

    fn gates_active(&self) -> bool {
        self.input_rate > 0.0 || self.recurrent_rate > 0.0
    }
}

/// Per-token objective value of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveValue {
    /// Per-token mean negative log-likelihood (base measure dropped).
    pub loss: f64,
    /// Sum over all steps and batch rows.
    pub total_nll: f64,
    /// Per-step batch-mean negative log-likelihood.
    pub per_step: Vec<f64>,
    pub tokens: usize,
}

impl ObjectiveValue {
    pub fn perplexity(&self) -> f64 {
        self.loss.exp()
    }

    fn from_step_sums(step_sums: Vec<f64>, batch: usize) -> Self {
        let total = tensor::pairwise_sum(&step_sums);
        let tokens = step_sums.len() * batch;
        // Reciprocal multiply, matching the tape's scale op bit for bit.
        ObjectiveValue {
            loss: total * (1.0 / tokens as f64),
            total_nll: total,
            per_step: step_sums.iter().map(|s| s / batch as f64).collect(),
            tokens,
        }
    }

    /// Pairwise mean across K rollouts.
    fn average(values: &[ObjectiveValue]) -> Self {
        let k = values.len() as f64;
        let steps = values[0].per_step.len();
        let per_step = (0..steps)
            .map(|t| {
                let col: Vec<f64> = values.iter().map(|v| v.per_step[t]).collect();
                tensor::pairwise_sum(&col) / k
            })
            .collect();
        let totals: Vec<f64> = values.iter().map(|v| v.total_nll).collect();
        let losses: Vec<f64> = values.iter().map(|v| v.loss).collect();
        ObjectiveValue {
            loss: tensor::pairwise_sum(&losses) * (1.0 / k),
            total_nll: tensor::pairwise_sum(&totals) * (1.0 / k),
            per_step,
            tokens: values[0].tokens,
        }
    }
}

/// Applies noise to a transition output: additive adds, multiplicative
/// gates, off passes through untouched.
pub fn inject(spec: &NoiseSpec, f_out: &Tensor, eps_inj: &Tensor) -> Result<Tensor> {
    match spec.mode {
        InjectionMode::Off => Ok(f_out.clone()),
        InjectionMode::Additive => tensor::add(f_out, eps_inj),
        InjectionMode::Multiplicative => tensor::mul(f_out, eps_inj),
    }
}

pub struct ModelNodes {
    pub embedding: NodeId,
    pub cells: Vec<CellNodes>,
    pub head_v: NodeId,
    pub head_b: NodeId,
}

impl ModelNodes {
    /// Leaf ids in `named_params` order.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut ids = vec![self.embedding];
        for cell in &self.cells {
            for g in &cell.gates {
                ids.extend([g.w_x, g.w_h, g.b]);
            }
        }
        ids.extend([self.head_v, self.head_b]);
        ids
    }
}

#[derive(Clone, Debug)]
pub struct NoisinModel {
    /// vocab x embedding-dim lookup table.
    pub embedding: Tensor,
    pub cells: Vec<CellParams>,
    pub head: LikelihoodHead,
    pub noise: NoiseSpec,
    pub k_samples: usize,
    pub injection: LayerInjection,
    pub dropout: Option<DropoutConfig>,
}

impl NoisinModel {
    pub fn new(
        embedding: Tensor,
        cells: Vec<CellParams>,
        head: LikelihoodHead,
        noise: NoiseSpec,
        k_samples: usize,
        injection: LayerInjection,
        dropout: Option<DropoutConfig>,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidParameter("model needs at least one layer".into()));
        }
        if k_samples == 0 {
            return Err(Error::InvalidParameter("k_samples must be >= 1".into()));
        }
        noise.validate()?;
        let (_, emb_dim) = embedding.dims2()?;
        let mut in_dim = emb_dim;
        for (l, c) in cells.iter().enumerate() {
            if c.input_dim() != in_dim {
                return Err(Error::ShapeMismatch(format!(
                    "layer {l} expects input dim {}, gets {in_dim}",
                    c.input_dim()
                )));
            }
            in_dim = c.hidden_dim();
        }
        if head.hidden_dim() != in_dim {
            return Err(Error::ShapeMismatch(format!(
                "head expects hidden dim {}, stack produces {in_dim}",
                head.hidden_dim()
            )));
        }
        if let Some(d) = dropout {
            if d.gates_active() && !cells[0].kind.is_lstm() {
                return Err(Error::InvalidParameter(
                    "gate-level dropout is defined for LSTM cells".into(),
                ));
            }
        }
        Ok(NoisinModel { embedding, cells, head, noise, k_samples, injection, dropout })
    }

    /// Fresh model with the standard initialization: embeddings uniform in
    /// [-0.1, 0.1], weights uniform in [-1/sqrt(H), 1/sqrt(H)], biases zero.
    /// Draw order: embedding, then each layer's gates, then the head matrix.
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        kind: CellKind,
        layers: usize,
        hidden: usize,
        emb_dim: usize,
        vocab: usize,
        family: expfam::Family,
        sigma2: f64,
        noise: NoiseSpec,
        k_samples: usize,
        injection: LayerInjection,
        dropout: Option<DropoutConfig>,
        rng: &mut Pcg32,
    ) -> Result<Self> {
        if layers == 0 {
            return Err(Error::InvalidParameter("layers must be >= 1".into()));
        }
        let embedding = rnn::init_embedding(vocab, emb_dim, rng);
        let mut cells = Vec::with_capacity(layers);
        for l in 0..layers {
            let input = if l == 0 { emb_dim } else { hidden };
            cells.push(CellParams::init(kind, input, hidden, rng));
        }
        let bound = 1.0 / (hidden as f64).sqrt();
        let v = Tensor::from_fn(&[hidden, vocab], |_| rng.uniform_range(-bound, bound));
        let head = LikelihoodHead::new(family, v, Tensor::zeros(&[1, vocab]), sigma2)?;
        NoisinModel::new(embedding, cells, head, noise, k_samples, injection, dropout)
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.dims2().map(|(v, _)| v).unwrap_or(0)
    }

    pub fn hidden_dim(&self) -> usize {
        self.cells.last().map(|c| c.hidden_dim()).unwrap_or(0)
    }

    pub fn num_layers(&self) -> usize {
        self.cells.len()
    }

    pub fn initial_states(&self, batch: usize) -> Vec<RnnState> {
        self.cells
            .iter()
            .map(|c| RnnState::zeros(c.kind, batch, c.hidden_dim()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("embedding".to_string(), &self.embedding)];
        for (l, cell) in self.cells.iter().enumerate() {
            let names: &[&str] = if cell.kind.is_lstm() {
                &rnn::LSTM_GATE_NAMES
            } else {
                &["gate"]
            };
            for (g, gate) in cell.gates.iter().enumerate() {
                out.push((format!("layer{l}.{}.w_x", names[g]), &gate.w_x));
                out.push((format!("layer{l}.{}.w_h", names[g]), &gate.w_h));
                out.push((format!("layer{l}.{}.b", names[g]), &gate.b));
            }
        }
        out.push(("head.v".to_string(), &self.head.v));
        out.push(("head.b".to_string(), &self.head.bias));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> =
            vec![("embedding".to_string(), &mut self.embedding)];
        for (l, cell) in self.cells.iter_mut().enumerate() {
            let names: &[&str] = if cell.kind.is_lstm() {
                &rnn::LSTM_GATE_NAMES
            } else {
                &["gate"]
            };
            for (g, gate) in cell.gates.iter_mut().enumerate() {
                out.push((format!("layer{l}.{}.w_x", names[g]), &mut gate.w_x));
                out.push((format!("layer{l}.{}.w_h", names[g]), &mut gate.w_h));
                out.push((format!("layer{l}.{}.b", names[g]), &mut gate.b));
            }
        }
        out.push(("head.v".to_string(), &mut self.head.v));
        out.push(("head.b".to_string(), &mut self.head.bias));
        out
    }

    pub fn to_tape(&self, tape: &mut Tape) -> ModelNodes {
        ModelNodes {
            embedding: tape.leaf(self.embedding.clone()),
            cells: self.cells.iter().map(|c| c.to_tape(tape)).collect(),
            head_v: tape.leaf(self.head.v.clone()),
            head_b: tape.leaf(self.head.bias.clone()),
        }
    }

    fn injects_layer(&self, layer: usize) -> bool {
        if self.noise.is_off() {
            return false;
        }
        match self.injection {
            LayerInjection::EveryLayer => true,
            LayerInjection::FinalLayerOnly => layer + 1 == self.cells.len(),
        }
    }

    /// One deterministic stack transition: embeds the tokens, runs every
    /// layer, returns the final layer's output and the advanced states.
    pub fn deterministic_step(
        &self,
        tokens: &[usize],
        states: &[RnnState],
    ) -> Result<(Tensor, Vec<RnnState>)> {
        let mut x = tensor::gather_rows(&self.embedding, tokens)?;
        let mut next = Vec::with_capacity(states.len());
        for (cell, state) in self.cells.iter().zip(states) {
            let s = rnn::cell_step(cell, &x, state)?;
            x = s.h.clone();
            next.push(s);
        }
        Ok((x, next))
    }

    /// One noisy stack transition (no dropout): injection per configuration.
    pub fn noisy_step(
        &self,
        tokens: &[usize],
        states: &[RnnState],
        rng: &mut Pcg32,
    ) -> Result<(Tensor, Vec<RnnState>)> {
        let batch = tokens.len();
        let mut x = tensor::gather_rows(&self.embedding, tokens)?;
        let mut next = Vec::with_capacity(states.len());
        for (l, (cell, state)) in self.cells.iter().zip(states).enumerate() {
            let mut s = rnn::cell_step(cell, &x, state)?;
            if self.injects_layer(l) {
                let eps =
                    noise::sample_injection(&self.noise, &[batch, cell.hidden_dim()], rng)?;
                s.h = inject(&self.noise, &s.h, &eps)?;
            }
            x = s.h.clone();
            next.push(s);
        }
        Ok((x, next))
    }

    /// Deterministic forward and loss of the underlying network: no noise,
    /// no dropout masks.
    pub fn deterministic_forward(
        &self,
        window: WindowView<'_>,
        init: &[RnnState],
    ) -> Result<(Vec<Tensor>, Vec<RnnState>, ObjectiveValue)> {
        let (zs, finals) = rnn::forward_sequence(
            &self.cells,
            &self.embedding,
            window.inputs,
            window.batch,
            init,
        )?;
        let obj = self.objective_from_states(&zs, window, None)?;
        Ok((zs, finals, obj))
    }

    /// Loss of already-computed final-layer states, with optional per-step
    /// output-dropout masks applied before the head.
    fn objective_from_states(
        &self,
        zs: &[Tensor],
        window: WindowView<'_>,
        out_masks: Option<&[Tensor]>,
    ) -> Result<ObjectiveValue> {
        let mut step_sums = Vec::with_capacity(zs.len());
        for (t, z) in zs.iter().enumerate() {
            let z_head = match out_masks {
                Some(masks) => tensor::mul(z, &masks[t])?,
                None => z.clone(),
            };
            let s = self.head.natural_param(&z_head)?;
            let nll =
                expfam::nll_sum(self.head.family, self.head.sigma2, &s, window.step_targets(t))?;
            step_sums.push(nll);
        }
        Ok(ObjectiveValue::from_step_sums(step_sums, window.batch))
    }

    /// Monte Carlo objective with the model's configured K.
    pub fn noisy_forward(
        &self,
        window: WindowView<'_>,
        init: &[RnnState],
        noise_rng: &mut Pcg32,
        dropout_rng: Option<&mut Pcg32>,
    ) -> Result<(Vec<Tensor>, Vec<RnnState>, ObjectiveValue)> {
        self.noisy_forward_k(window, init, self.k_samples, noise_rng, dropout_rng)
    }

    /// Monte Carlo objective with an explicit K: the mean of K independent
    /// rollouts, each on a split RNG child. Returned states and per-step z
    /// tensors are the (pairwise) mean across rollouts, which for K = 1 is
    /// the rollout itself.
    pub fn noisy_forward_k(
        &self,
        window: WindowView<'_>,
        init: &[RnnState],
        k: usize,
        noise_rng: &mut Pcg32,
        mut dropout_rng: Option<&mut Pcg32>,
    ) -> Result<(Vec<Tensor>, Vec<RnnState>, ObjectiveValue)> {
        if k == 0 {
            return Err(Error::InvalidParameter("k must be >= 1".into()));
        }
        let mut objs = Vec::with_capacity(k);
        let mut all_zs: Vec<Vec<Tensor>> = Vec::with_capacity(k);
        let mut all_finals: Vec<Vec<RnnState>> = Vec::with_capacity(k);
        for _ in 0..k {
            let mut roll_noise = noise_rng.split();
            let mut roll_drop = dropout_rng.as_deref_mut().map(|r| r.split());
            let (zs, finals, obj) =
                self.rollout(window, init, &mut roll_noise, roll_drop.as_mut())?;
            objs.push(obj);
            all_zs.push(zs);
            all_finals.push(finals);
        }
        if k == 1 {
            let obj = objs.pop().unwrap();
            return Ok((all_zs.pop().unwrap(), all_finals.pop().unwrap(), obj));
        }
        let obj = ObjectiveValue::average(&objs);
        let zs = mean_tensor_columns(&all_zs)?;
        let finals = mean_states(&all_finals)?;
        Ok((zs, finals, obj))
    }

    /// One noisy rollout. Gate masks are sampled when both a dropout config
    /// and a dropout RNG are present (training); evaluation passes no
    /// dropout RNG and runs the identity (inverted-dropout eval).
    fn rollout(
        &self,
        window: WindowView<'_>,
        init: &[RnnState],
        noise_rng: &mut Pcg32,
        mut dropout_rng: Option<&mut Pcg32>,
    ) -> Result<(Vec<Tensor>, Vec<RnnState>, ObjectiveValue)> {
        if init.len() != self.cells.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} init states for {} layers",
                init.len(),
                self.cells.len()
            )));
        }
        let batch = window.batch;
        let steps = window.steps();
        let drop_cfg = match (&self.dropout, dropout_rng.as_deref_mut()) {
            (Some(cfg), Some(_)) if cfg.is_active() => Some(*cfg),
            _ => None,
        };
        let mut states: Vec<RnnState> = init.to_vec();
        let mut zs = Vec::with_capacity(steps);
        let mut out_masks: Option<Vec<Tensor>> = None;
        let mut seq_gate_masks: Vec<Option<DropoutMasks>> = vec![None; self.cells.len()];
        let mut seq_out_mask: Option<Tensor> = None;

        for t in 0..steps {
            let toks = window.step_inputs(t);
            let mut x = tensor::gather_rows(&self.embedding, toks)?;
            for l in 0..self.cells.len() {
                let cell = &self.cells[l];
                let hidden = cell.hidden_dim();
                let mut next = match drop_cfg {
                    Some(cfg) if cfg.gates_active() => {
                        let rng = dropout_rng.as_deref_mut().expect("dropout rng present");
                        let masks = if cfg.per_sequence {
                            if seq_gate_masks[l].is_none() {
                                seq_gate_masks[l] = Some(DropoutMasks::sample(
                                    rng,
                                    batch,
                                    hidden,
                                    1.0 - cfg.input_rate,
                                    1.0 - cfg.recurrent_rate,
                                    true,
                                )?);
                            }
                            seq_gate_masks[l].clone().unwrap()
                        } else {
                            DropoutMasks::sample(
                                rng,
                                batch,
                                hidden,
                                1.0 - cfg.input_rate,
                                1.0 - cfg.recurrent_rate,
                                true,
                            )?
                        };
                        rnn::dropout_lstm_step(cell, &masks, &x, &states[l])?
                    }
                    _ => rnn::cell_step(cell, &x, &states[l])?,
                };
                if self.injects_layer(l) {
                    let eps = noise::sample_injection(&self.noise, &[batch, hidden], noise_rng)?;
                    next.h = inject(&self.noise, &next.h, &eps)?;
                }
                x = next.h.clone();
                states[l] = next;
            }
            if let Some(cfg) = drop_cfg {
                if cfg.output_rate > 0.0 {
                    let rng = dropout_rng.as_deref_mut().expect("dropout rng present");
                    let keep = 1.0 - cfg.output_rate;
                    let mask = if cfg.per_sequence {
                        if seq_out_mask.is_none() {
                            seq_out_mask = Some(sample_output_mask(rng, batch, x.shape(), keep)?);
                        }
                        seq_out_mask.clone().unwrap()
                    } else {
                        sample_output_mask(rng, batch, x.shape(), keep)?
                    };
                    out_masks.get_or_insert_with(Vec::new).push(mask);
                }
            }
            zs.push(x);
        }
        let obj = self.objective_from_states(&zs, window, out_masks.as_deref())?;
        if !obj.loss.is_finite() {
            return Err(Error::NonFinite("forward loss".into()));
        }
        Ok((zs, states, obj))
    }

    /// Taped rollout mirroring [`Self::rollout`] op for op; gradients flow
    /// into the model leaves only (noise and masks enter as constants).
    #[allow(clippy::too_many_arguments)]
    fn rollout_traced(
        &self,
        tape: &mut Tape,
        nodes: &ModelNodes,
        window: WindowView<'_>,
        init: &[RnnState],
        noise_rng: &mut Pcg32,
        mut dropout_rng: Option<&mut Pcg32>,
    ) -> Result<(NodeId, Vec<RnnState>, ObjectiveValue)> {
        let batch = window.batch;
        let steps = window.steps();
        let drop_cfg = match (&self.dropout, dropout_rng.as_deref_mut()) {
            (Some(cfg), Some(_)) if cfg.is_active() => Some(*cfg),
            _ => None,
        };
        let mut states: Vec<StateNodes> = init
            .iter()
            .map(|s| StateNodes {
                h: tape.constant(s.h.clone()),
                c: s.c.as_ref().map(|c| tape.constant(c.clone())),
            })
            .collect();
        let mut step_loss_nodes = Vec::with_capacity(steps);
        let mut step_sums = Vec::with_capacity(steps);
        let mut seq_gate_masks: Vec<Option<DropoutMasks>> = vec![None; self.cells.len()];
        let mut seq_out_mask: Option<Tensor> = None;

        for t in 0..steps {
            let toks = window.step_inputs(t);
            let mut x = tape.gather_rows(nodes.embedding, toks)?;
            for l in 0..self.cells.len() {
                let cell = &self.cells[l];
                let hidden = cell.hidden_dim();
                let mut next = match drop_cfg {
                    Some(cfg) if cfg.gates_active() => {
                        let rng = dropout_rng.as_deref_mut().expect("dropout rng present");
                        let masks = if cfg.per_sequence {
                            if seq_gate_masks[l].is_none() {
                                seq_gate_masks[l] = Some(DropoutMasks::sample(
                                    rng,
                                    batch,
                                    hidden,
                                    1.0 - cfg.input_rate,
                                    1.0 - cfg.recurrent_rate,
                                    true,
                                )?);
                            }
                            seq_gate_masks[l].clone().unwrap()
                        } else {
                            DropoutMasks::sample(
                                rng,
                                batch,
                                hidden,
                                1.0 - cfg.input_rate,
                                1.0 - cfg.recurrent_rate,
                                true,
                            )?
                        };
                        let mask_nodes = masks.to_tape(tape);
                        rnn::dropout_lstm_step_traced(
                            tape,
                            &nodes.cells[l],
                            &mask_nodes,
                            x,
                            &states[l],
                        )?
                    }
                    _ => rnn::cell_step_traced(tape, &nodes.cells[l], x, &states[l])?,
                };
                if self.injects_layer(l) {
                    let eps = noise::sample_injection(&self.noise, &[batch, hidden], noise_rng)?;
                    let eps_node = tape.constant(eps);
                    next.h = match self.noise.mode {
                        InjectionMode::Off => next.h,
                        InjectionMode::Additive => tape.add(next.h, eps_node)?,
                        InjectionMode::Multiplicative => tape.mul(next.h, eps_node)?,
                    };
                }
                x = next.h;
                states[l] = next;
            }
            let z_head = if let Some(cfg) = drop_cfg.filter(|c| c.output_rate > 0.0) {
                let rng = dropout_rng.as_deref_mut().expect("dropout rng present");
                let keep = 1.0 - cfg.output_rate;
                let mask = if cfg.per_sequence {
                    if seq_out_mask.is_none() {
                        seq_out_mask =
                            Some(sample_output_mask(rng, batch, tape.value(x).shape(), keep)?);
                    }
                    seq_out_mask.clone().unwrap()
                } else {
                    sample_output_mask(rng, batch, tape.value(x).shape(), keep)?
                };
                let mask_node = tape.constant(mask);
                tape.mul(x, mask_node)?
            } else {
                x
            };
            let s = tape.matmul(z_head, nodes.head_v)?;
            let s = tape.add_row(s, nodes.head_b)?;
            let nll = expfam::nll_sum_traced(
                tape,
                self.head.family,
                self.head.sigma2,
                s,
                window.step_targets(t),
            )?;
            step_sums.push(tape.value(nll).item()?);
            step_loss_nodes.push(nll);
        }
        let total = pairwise_add_nodes(tape, &step_loss_nodes)?;
        let loss = tape.scale(total, 1.0 / (steps * batch) as f64);
        let finals = states
            .iter()
            .map(|s| RnnState {
                h: tape.value(s.h).clone(),
                c: s.c.map(|c| tape.value(c).clone()),
            })
            .collect();
        let obj = ObjectiveValue::from_step_sums(step_sums, batch);
        Ok((loss, finals, obj))
    }

    /// K-sample noisy forward on the tape plus a backward sweep: returns
    /// the objective, the gradient of the loss for every parameter in
    /// `named_params` order, and the detached carried states.
    pub fn loss_and_gradients(
        &self,
        window: WindowView<'_>,
        carry: &[RnnState],
        noise_rng: &mut Pcg32,
        mut dropout_rng: Option<&mut Pcg32>,
    ) -> Result<(ObjectiveValue, Vec<Tensor>, Vec<RnnState>)> {
        let mut tape = Tape::new();
        let nodes = self.to_tape(&mut tape);
        let k = self.k_samples;

        let mut loss_nodes = Vec::with_capacity(k);
        let mut objs = Vec::with_capacity(k);
        let mut finals_per_rollout = Vec::with_capacity(k);
        for _ in 0..k {
            let mut roll_noise = noise_rng.split();
            let mut roll_drop = dropout_rng.as_deref_mut().map(|r| r.split());
            let (loss, finals, obj) = self.rollout_traced(
                &mut tape,
                &nodes,
                window,
                carry,
                &mut roll_noise,
                roll_drop.as_mut(),
            )?;
            loss_nodes.push(loss);
            objs.push(obj);
            finals_per_rollout.push(finals);
        }
        let loss_node = if k == 1 {
            loss_nodes[0]
        } else {
            let sum = pairwise_add_nodes(&mut tape, &loss_nodes)?;
            tape.scale(sum, 1.0 / k as f64)
        };
        let loss_val = tape.value(loss_node).item()?;
        if !loss_val.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {loss_val}")));
        }

        let mut grads = tape.backward(loss_node)?;
        let leaf_ids = nodes.leaf_ids();
        let mut grad_tensors: Vec<Tensor> = Vec::with_capacity(leaf_ids.len());
        for (id, (_, p)) in leaf_ids.iter().zip(self.named_params()) {
            match grads.take(*id) {
                Some(g) => grad_tensors.push(g),
                None => grad_tensors.push(Tensor::zeros(p.shape())),
            }
        }

        let obj =
            if k == 1 { objs.pop().unwrap() } else { ObjectiveValue::average(&objs) };
        let finals = if k == 1 {
            finals_per_rollout.pop().unwrap()
        } else {
            mean_states(&finals_per_rollout)?
        };
        Ok((obj, grad_tensors, finals))
    }

    /// One optimization step: K-sample noisy forward, backward, global
    /// gradient-norm clipping, SGD update. Carried states come back
    /// detached; gradients never cross window boundaries.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        window: WindowView<'_>,
        carry: &[RnnState],
        lr: f64,
        clip_norm: f64,
        noise_rng: &mut Pcg32,
        dropout_rng: Option<&mut Pcg32>,
    ) -> Result<(ObjectiveValue, Vec<RnnState>)> {
        let (obj, grad_tensors, finals) =
            self.loss_and_gradients(window, carry, noise_rng, dropout_rng)?;

        let sq: f64 = grad_tensors.iter().map(|g| g.sq_norm()).sum();
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFinite("gradient norm".into()));
        }
        let coef = if clip_norm > 0.0 && norm > clip_norm { clip_norm / norm } else { 1.0 };
        for ((_, p), g) in self.named_params_mut().into_iter().zip(&grad_tensors) {
            tensor::axpy(p, -lr * coef, g)?;
        }
        Ok((obj, finals))
    }

    /// Gradient-norm of the current model on a window, without updating.
    /// Used by tests that pin the clipping behavior.
    pub fn grad_norm(
        &self,
        window: WindowView<'_>,
        carry: &[RnnState],
        noise_rng: &mut Pcg32,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let nodes = self.to_tape(&mut tape);
        let mut roll = noise_rng.split();
        let (loss, _, _) = self.rollout_traced(&mut tape, &nodes, window, carry, &mut roll, None)?;
        let mut grads = tape.backward(loss)?;
        let sq: f64 = nodes
            .leaf_ids()
            .iter()
            .filter_map(|id| grads.take(*id))
            .map(|g| g.sq_norm())
            .sum();
        Ok(sq.sqrt())
    }
}

fn sample_output_mask(
    rng: &mut Pcg32,
    _batch: usize,
    shape: &[usize],
    keep: f64,
) -> Result<Tensor> {
    if !(0.0 < keep && keep <= 1.0) {
        return Err(Error::InvalidParameter(format!("output keep {keep} out of (0, 1]")));
    }
    if keep == 1.0 {
        return Ok(Tensor::full(shape, 1.0));
    }
    let on = 1.0 / keep;
    Ok(Tensor::from_fn(shape, |_| if rng.uniform() < keep { on } else { 0.0 }))
}

/// Pairwise-balanced add of scalar nodes, shaped exactly like
/// `tensor::pairwise_sum` so taped and plain totals agree bitwise.
fn pairwise_add_nodes(tape: &mut Tape, nodes: &[NodeId]) -> Result<NodeId> {
    match nodes.len() {
        0 => Err(Error::InvalidParameter("no loss nodes".into())),
        1 => Ok(nodes[0]),
        n => {
            let mid = n / 2;
            let left = pairwise_add_nodes(tape, &nodes[..mid])?;
            let right = pairwise_add_nodes(tape, &nodes[mid..])?;
            tape.add(left, right)
        }
    }
}

fn mean_tensor_columns(rollouts: &[Vec<Tensor>]) -> Result<Vec<Tensor>> {
    let k = rollouts.len();
    let steps = rollouts[0].len();
    let mut out = Vec::with_capacity(steps);
    for t in 0..steps {
        let shape = rollouts[0][t].shape().to_vec();
        let n = rollouts[0][t].numel();
        let mut data = vec![0.0; n];
        for (i, slot) in data.iter_mut().enumerate() {
            let col: Vec<f64> = rollouts.iter().map(|r| r[t].data()[i]).collect();
            *slot = tensor::pairwise_sum(&col) / k as f64;
        }
        out.push(Tensor::new(&shape, data)?);
    }
    Ok(out)
}

fn mean_states(rollouts: &[Vec<RnnState>]) -> Result<Vec<RnnState>> {
    let layers = rollouts[0].len();
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let hs: Vec<Vec<Tensor>> = rollouts.iter().map(|r| vec![r[l].h.clone()]).collect();
        let h = mean_tensor_columns(&hs)?.pop().unwrap();
        let c = if rollouts[0][l].c.is_some() {
            let cs: Vec<Vec<Tensor>> =
                rollouts.iter().map(|r| vec![r[l].c.clone().unwrap()]).collect();
            Some(mean_tensor_columns(&cs)?.pop().unwrap())
        } else {
            None
        };
        out.push(RnnState { h, c });
    }
    Ok(out)
}

/// Studentized deviations of the conditional Monte Carlo mean of the noisy
/// state from the deterministic transition output.
#[derive(Clone, Debug)]
pub struct UnbiasednessReport {
    /// Max |z| per step along the conditioning trajectory.
    pub per_step_max_abs_z: Vec<f64>,
    pub max_abs_z: f64,
    /// True when any unit exceeds |z| > 4.
    pub violated: bool,
    pub n_samples: usize,
}

/// Checks the one-step conditional mean condition along a sequence: at each
/// step the conditioning state advances deterministically, `n_samples`
/// fresh noise draws perturb the transition output, and every hidden unit's
/// deviation is studentized. Defined for single-layer models, where the
/// stacked state is the one-layer state.
pub fn check_unbiasedness(
    model: &NoisinModel,
    inputs: &[usize],
    init: &[RnnState],
    n_samples: usize,
    rng: &mut Pcg32,
) -> Result<UnbiasednessReport> {
    if model.num_layers() != 1 {
        return Err(Error::InvalidParameter(
            "unbiasedness check conditions on a single transition; use a 1-layer model".into(),
        ));
    }
    if n_samples < 10_000 {
        return Err(Error::InvalidParameter(format!(
            "need at least 1e4 samples for the z-score contract, got {n_samples}"
        )));
    }
    let cell = &model.cells[0];
    let hidden = cell.hidden_dim();
    let batch = 1usize;
    let mut states = init.to_vec();
    let mut per_step = Vec::with_capacity(inputs.len());
    let mut max_abs_z = 0.0f64;

    for &tok in inputs {
        let x = tensor::gather_rows(&model.embedding, &[tok])?;
        let det = rnn::cell_step(cell, &x, &states[0])?;
        let reference = det.h.clone();

        let step_max = mc_mean_z_scores(n_samples, &reference, rng, |r| {
            let eps = noise::sample_injection(&model.noise, &[batch, hidden], r)?;
            inject(&model.noise, &reference, &eps)
        })?;
        max_abs_z = max_abs_z.max(step_max);
        per_step.push(step_max);
        states[0] = det; // condition the next step on the deterministic path
    }
    Ok(UnbiasednessReport {
        per_step_max_abs_z: per_step,
        max_abs_z,
        violated: max_abs_z > 4.0,
        n_samples,
    })
}

/// Same check for the gate-level dropout LSTM: masks resample per draw and
/// the reference is the mask-free LSTM step. The nonlinearities make this
/// transition biased, which the report flags.
pub fn check_unbiasedness_dropout(
    params: &CellParams,
    embedding: &Tensor,
    drop: &DropoutConfig,
    inputs: &[usize],
    init: &RnnState,
    n_samples: usize,
    rng: &mut Pcg32,
) -> Result<UnbiasednessReport> {
    if !params.kind.is_lstm() {
        return Err(Error::InvalidParameter("dropout check needs an LSTM cell".into()));
    }
    if n_samples < 10_000 {
        return Err(Error::InvalidParameter(format!(
            "need at least 1e4 samples for the z-score contract, got {n_samples}"
        )));
    }
    let hidden = params.hidden_dim();
    let keep_x = 1.0 - drop.input_rate;
    let keep_h = 1.0 - drop.recurrent_rate;
    let mut state = init.clone();
    let mut per_step = Vec::with_capacity(inputs.len());
    let mut max_abs_z = 0.0f64;

    for &tok in inputs {
        let x = tensor::gather_rows(embedding, &[tok])?;
        let det = rnn::lstm_step(params, &x, &state)?;
        let reference = det.h.clone();
        let step_max = mc_mean_z_scores(n_samples, &reference, rng, |r| {
            let masks = DropoutMasks::sample(r, 1, hidden, keep_x, keep_h, true)?;
            Ok(rnn::dropout_lstm_step(params, &masks, &x, &state)?.h)
        })?;
        max_abs_z = max_abs_z.max(step_max);
        per_step.push(step_max);
        state = det;
    }
    Ok(UnbiasednessReport {
        per_step_max_abs_z: per_step,
        max_abs_z,
        violated: max_abs_z > 4.0,
        n_samples,
    })
}

/// Welford accumulation of per-unit mean and variance of `draw` outputs,
/// studentized against `reference`. Returns the max |z| over units.
fn mc_mean_z_scores<F>(
    n_samples: usize,
    reference: &Tensor,
    rng: &mut Pcg32,
    mut draw: F,
) -> Result<f64>
where
    F: FnMut(&mut Pcg32) -> Result<Tensor>,
{
    let n = reference.numel();
    let mut mean = vec![0.0f64; n];
    let mut m2 = vec![0.0f64; n];
    for i in 0..n_samples {
        let z = draw(rng)?;
        let count = (i + 1) as f64;
        for (j, &v) in z.data().iter().enumerate() {
            let d = v - mean[j];
            mean[j] += d / count;
            m2[j] += d * (v - mean[j]);
        }
    }
    let denom = (n_samples - 1) as f64;
    let mut max_abs_z = 0.0f64;
    for j in 0..n {
        let var = m2[j] / denom;
        let stderr = (var / n_samples as f64).sqrt();
        let dev = mean[j] - reference.data()[j];
        let z = if stderr == 0.0 {
            if dev == 0.0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            dev / stderr
        };
        max_abs_z = max_abs_z.max(z.abs());
    }
    Ok(max_abs_z)
}

/// Jensen-bound diagnostics over K rollouts of one sequence.
#[derive(Clone, Copy, Debug)]
pub struct JensenGap {
    /// Mean of per-rollout log-likelihoods (the training objective).
    pub bound: f64,
    /// log of the mean likelihood, computed stably.
    pub log_mean_exp: f64,
    /// `log_mean_exp - bound`; nonnegative up to rounding.
    pub gap: f64,
}

/// Computes the bound and the log-mean-likelihood over the same K rollouts.
/// All rollouts share the window and initial state; each runs on a split
/// RNG child. The log-mean side uses `max + ln(mean exp(l - max))`, so with
/// identical rollouts (injection off) the gap is exactly zero for K a power
/// of two.
pub fn jensen_gap(
    model: &NoisinModel,
    window: WindowView<'_>,
    init: &[RnnState],
    k: usize,
    rng: &mut Pcg32,
) -> Result<JensenGap> {
    if k < 2 {
        return Err(Error::InvalidParameter("jensen gap needs K >= 2".into()));
    }
    let mut loglik = Vec::with_capacity(k);
    for _ in 0..k {
        let mut roll = rng.split();
        let (_, _, obj) = model.noisy_forward_k(window, init, 1, &mut roll, None)?;
        loglik.push(-obj.total_nll);
    }
    let bound = tensor::pairwise_sum(&loglik) / k as f64;
    let m = loglik.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean_exp: f64 = loglik.iter().map(|l| (l - m).exp()).sum::<f64>() / k as f64;
    let log_mean_exp = m + mean_exp.ln();
    Ok(JensenGap { bound, log_mean_exp, gap: log_mean_exp - bound })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expfam::Family;
    use crate::noise::NoiseFamily;

    fn small_model(
        kind: CellKind,
        layers: usize,
        noise: NoiseSpec,
        injection: LayerInjection,
        seed: u64,
    ) -> NoisinModel {
        let mut rng = Pcg32::seeded(seed);
        NoisinModel::init(
            kind,
            layers,
            4,
            4,
            7,
            Family::Categorical,
            1.0,
            noise,
            1,
            injection,
            None,
            &mut rng,
        )
        .unwrap()
    }

    fn toy_window() -> (Vec<usize>, Vec<usize>) {
        let inputs = vec![1, 4, 2, 6, 0];
        let targets = vec![4, 2, 6, 0, 3];
        (inputs, targets)
    }

    #[test]
    fn off_mode_forward_is_bit_identical_to_deterministic() {
        for kind in [CellKind::ErnnSigmoid, CellKind::ErnnTanh, CellKind::Lstm] {
            let model =
                small_model(kind, 2, NoiseSpec::off(), LayerInjection::EveryLayer, 7);
            let (inputs, targets) = toy_window();
            let window = WindowView::from_sequence(&inputs, &targets);
            let init = model.initial_states(1);
            let (dz, dstates, dobj) = model.deterministic_forward(window, &init).unwrap();
            let mut rng = Pcg32::seeded(99);
            let (nz, nstates, nobj) = model.noisy_forward(window, &init, &mut rng, None).unwrap();
            assert_eq!(dobj.loss.to_bits(), nobj.loss.to_bits(), "{}", kind.name());
            assert_eq!(dobj.total_nll.to_bits(), nobj.total_nll.to_bits());
            for (a, b) in dz.iter().zip(&nz) {
                assert_eq!(a.data(), b.data());
            }
            for (a, b) in dstates.iter().zip(&nstates) {
                assert_eq!(a.h.data(), b.h.data());
            }
        }
    }

    #[test]
    fn traced_rollout_is_bit_identical_to_pure_rollout() {
        let noise = NoiseSpec::new(
            NoiseFamily::Gaussian,
            0.7,
            0.0,
            InjectionMode::Multiplicative,
        )
        .unwrap();
        let mut model = small_model(CellKind::Lstm, 2, noise, LayerInjection::EveryLayer, 17);
        model.dropout = Some(DropoutConfig::new(0.3, 0.2, 0.4).unwrap());
        let (inputs, targets) = toy_window();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);

        let mut noise_rng = Pcg32::seeded(1234);
        let mut drop_rng = Pcg32::seeded(4321);
        let (_, pure_states, pure_obj) = model
            .rollout(window, &init, &mut noise_rng, Some(&mut drop_rng))
            .unwrap();

        let mut tape = Tape::new();
        let nodes = model.to_tape(&mut tape);
        let mut noise_rng2 = Pcg32::seeded(1234);
        let mut drop_rng2 = Pcg32::seeded(4321);
        let (loss_node, traced_states, traced_obj) = model
            .rollout_traced(&mut tape, &nodes, window, &init, &mut noise_rng2, Some(&mut drop_rng2))
            .unwrap();

        assert_eq!(pure_obj.total_nll.to_bits(), traced_obj.total_nll.to_bits());
        assert_eq!(
            tape.value(loss_node).item().unwrap().to_bits(),
            pure_obj.loss.to_bits()
        );
        for (a, b) in pure_states.iter().zip(&traced_states) {
            assert_eq!(a.h.data(), b.h.data());
            assert_eq!(
                a.c.as_ref().map(|c| c.data().to_vec()),
                b.c.as_ref().map(|c| c.data().to_vec())
            );
        }
    }

    #[test]
    fn k2_loss_is_mean_of_two_k1_rollouts_with_split_streams() {
        let noise =
            NoiseSpec::new(NoiseFamily::Laplace, 0.5, 0.0, InjectionMode::Additive).unwrap();
        let model = small_model(CellKind::ErnnSigmoid, 1, noise, LayerInjection::EveryLayer, 23);
        let (inputs, targets) = toy_window();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);

        let mut rng = Pcg32::seeded(5);
        let (_, _, obj_k2) = model.noisy_forward_k(window, &init, 2, &mut rng, None).unwrap();

        // Reproduce the two rollouts on the same split children.
        let mut rng2 = Pcg32::seeded(5);
        let mut c1 = rng2.split();
        let mut c2 = rng2.split();
        let (_, _, obj1) = model.rollout(window, &init, &mut c1, None).unwrap();
        let (_, _, obj2) = model.rollout(window, &init, &mut c2, None).unwrap();
        let mean = 0.5 * (obj1.loss + obj2.loss);
        assert_eq!(obj_k2.loss.to_bits(), mean.to_bits());
    }

    #[test]
    fn injection_layers_respect_configuration() {
        let noise = NoiseSpec::new(
            NoiseFamily::Gaussian,
            0.5,
            0.0,
            InjectionMode::Additive,
        )
        .unwrap();
        let model = small_model(CellKind::ErnnTanh, 3, noise, LayerInjection::FinalLayerOnly, 31);
        assert!(!model.injects_layer(0));
        assert!(!model.injects_layer(1));
        assert!(model.injects_layer(2));
        let every = small_model(CellKind::ErnnTanh, 3, noise, LayerInjection::EveryLayer, 31);
        assert!(every.injects_layer(0) && every.injects_layer(2));
    }

    #[test]
    fn inject_neutral_elements() {
        let f = Tensor::new(&[1, 3], vec![0.2, -0.4, 0.9]).unwrap();
        let mult =
            NoiseSpec::new(NoiseFamily::Gaussian, 1.0, 0.0, InjectionMode::Multiplicative)
                .unwrap();
        let ones = Tensor::full(&[1, 3], 1.0);
        assert_eq!(inject(&mult, &f, &ones).unwrap().data(), f.data());
        let add =
            NoiseSpec::new(NoiseFamily::Gaussian, 1.0, 0.0, InjectionMode::Additive).unwrap();
        let zeros = Tensor::zeros(&[1, 3]);
        assert_eq!(inject(&add, &f, &zeros).unwrap().data(), f.data());
    }

    #[test]
    fn multiplicative_lstm_injection_composes_step_then_mul() {
        let noise = NoiseSpec::new(
            NoiseFamily::Gaussian,
            0.6,
            0.0,
            InjectionMode::Multiplicative,
        )
        .unwrap();
        let model = small_model(CellKind::Lstm, 1, noise, LayerInjection::EveryLayer, 37);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(8);
        let (z, _) = model.noisy_step(&[3], &init, &mut rng).unwrap();

        // Composition oracle: deterministic step, then elementwise product
        // with the same injection draw.
        let mut rng2 = Pcg32::seeded(8);
        let x = tensor::gather_rows(&model.embedding, &[3]).unwrap();
        let det = rnn::lstm_step(&model.cells[0], &x, &init[0]).unwrap();
        let eps = noise::sample_injection(&model.noise, &[1, 4], &mut rng2).unwrap();
        let expect = tensor::mul(&det.h, &eps).unwrap();
        assert_eq!(z.data(), expect.data());
    }

    #[test]
    fn zero_lr_leaves_parameters_unchanged() {
        let noise =
            NoiseSpec::new(NoiseFamily::Gaussian, 0.5, 0.0, InjectionMode::Multiplicative)
                .unwrap();
        let mut model = small_model(CellKind::ErnnSigmoid, 1, noise, LayerInjection::EveryLayer, 41);
        let before: Vec<Vec<f64>> =
            model.named_params().iter().map(|(_, t)| t.data().to_vec()).collect();
        let (inputs, targets) = toy_window();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(3);
        let (obj, _) = model.train_step(window, &init, 0.0, 0.25, &mut rng, None).unwrap();
        assert!(obj.loss.is_finite());
        for ((_, t), b) in model.named_params().iter().zip(&before) {
            assert_eq!(t.data(), &b[..]);
        }
    }

    #[test]
    fn clipping_only_engages_above_threshold() {
        let noise = NoiseSpec::off();
        let mut model = small_model(CellKind::ErnnSigmoid, 1, noise, LayerInjection::EveryLayer, 43);
        let (inputs, targets) = toy_window();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(3);
        let norm = model.grad_norm(window, &init, &mut rng).unwrap();

        // Clip threshold above the norm: update identical to no clipping.
        let mut clipped = model.clone();
        let mut unclipped = model;
        let mut rng_a = Pcg32::seeded(3);
        let mut rng_b = Pcg32::seeded(3);
        let big_clip = norm * 10.0;
        clipped.train_step(window, &init, 0.1, big_clip, &mut rng_a, None).unwrap();
        unclipped.train_step(window, &init, 0.1, 0.0, &mut rng_b, None).unwrap();
        for ((_, a), (_, b)) in clipped.named_params().iter().zip(unclipped.named_params().iter())
        {
            assert_eq!(a.data(), b.data());
        }

        // Tight threshold changes the step.
        let mut tight = clipped.clone();
        let mut rng_c = Pcg32::seeded(3);
        let before: Vec<f64> = tight.named_params()[0].1.data().to_vec();
        tight.train_step(window, &init, 0.1, norm * 1e-3, &mut rng_c, None).unwrap();
        let after: Vec<f64> = tight.named_params()[0].1.data().to_vec();
        assert_ne!(before, after);
    }

    #[test]
    fn training_reduces_loss_on_toy_corpus() {
        let noise =
            NoiseSpec::new(NoiseFamily::Gaussian, 0.3, 0.0, InjectionMode::Multiplicative)
                .unwrap();
        let mut model = small_model(CellKind::ErnnSigmoid, 1, noise, LayerInjection::EveryLayer, 47);
        // 100-token toy corpus with strong structure.
        let corpus: Vec<usize> = (0..100).map(|i| [1, 4, 2, 6][i % 4]).collect();
        let inputs = corpus[..corpus.len() - 1].to_vec();
        let targets = corpus[1..].to_vec();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(1111);
        let mut first = f64::NAN;
        let mut last = f64::NAN;
        for step in 0..20 {
            let (obj, _) = model.train_step(window, &init, 0.5, 0.25, &mut rng, None).unwrap();
            if step == 0 {
                first = obj.loss;
            }
            last = obj.loss;
        }
        assert!(last < first, "loss did not decrease: {first} -> {last}");
    }

    #[test]
    fn unbiasedness_holds_for_noisin_and_fails_for_dropout() {
        // Multiplicative Gaussian on a 1-layer LSTM: max |z| <= 4.
        let noise =
            NoiseSpec::new(NoiseFamily::Gaussian, 0.5, 0.0, InjectionMode::Multiplicative)
                .unwrap();
        let model = small_model(CellKind::Lstm, 1, noise, LayerInjection::EveryLayer, 53);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(2);
        let report = check_unbiasedness(&model, &[2, 5], &init, 20_000, &mut rng).unwrap();
        assert!(!report.violated, "max |z| = {}", report.max_abs_z);

        // Gate-level dropout on a generic draw: systematic bias.
        let mut rng = Pcg32::seeded(54);
        let mut params = CellParams::init(CellKind::Lstm, 4, 4, &mut rng);
        for g in &mut params.gates {
            g.w_x = tensor::scale(&g.w_x, 3.0);
            g.w_h = tensor::scale(&g.w_h, 3.0);
        }
        let embedding = rnn::init_embedding(7, 4, &mut rng);
        let drop = DropoutConfig::new(0.5, 0.5, 0.0).unwrap();
        let state = RnnState {
            h: Tensor::from_fn(&[1, 4], |_| rng.uniform_range(-0.8, 0.8)),
            c: Some(Tensor::from_fn(&[1, 4], |_| rng.uniform_range(-0.8, 0.8))),
        };
        let report = check_unbiasedness_dropout(
            &params, &embedding, &drop, &[2, 5], &state, 50_000, &mut rng,
        )
        .unwrap();
        assert!(report.violated, "dropout max |z| = {}", report.max_abs_z);
    }

    #[test]
    fn jensen_gap_zero_in_off_mode_and_nonnegative_otherwise() {
        let model =
            small_model(CellKind::ErnnSigmoid, 1, NoiseSpec::off(), LayerInjection::EveryLayer, 61);
        let (inputs, targets) = toy_window();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(4);
        for k in [2usize, 16, 64] {
            let j = jensen_gap(&model, window, &init, k, &mut rng).unwrap();
            assert_eq!(j.gap, 0.0, "K={k}");
        }

        let noise =
            NoiseSpec::new(NoiseFamily::Gumbel, 1.0, 0.0, InjectionMode::Multiplicative).unwrap();
        let noisy = small_model(CellKind::Lstm, 1, noise, LayerInjection::EveryLayer, 62);
        let init = noisy.initial_states(1);
        for k in [2usize, 16, 64] {
            let j = jensen_gap(&noisy, window, &init, k, &mut rng).unwrap();
            assert!(j.gap >= -1e-12, "K={k}: gap {}", j.gap);
        }
    }

    #[test]
    fn nan_loss_is_reported() {
        let noise = NoiseSpec::off();
        let mut model = small_model(CellKind::ErnnSigmoid, 1, noise, LayerInjection::EveryLayer, 71);
        model.head.v = Tensor::full(&[4, 7], f64::NAN);
        let (inputs, targets) = toy_window();
        let window = WindowView::from_sequence(&inputs, &targets);
        let init = model.initial_states(1);
        let mut rng = Pcg32::seeded(5);
        let res = model.train_step(window, &init, 0.1, 0.25, &mut rng, None);
        assert!(matches!(res, Err(Error::NonFinite(_))));
    }
}
