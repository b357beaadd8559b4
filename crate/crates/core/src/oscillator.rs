//! Recurrent sequence models over spatial profiles: the coupled oscillatory
//! cell (CoRNN), the long expressive memory cell (LEM) and the RNN, LSTM and
//! GRU baselines, with teacher-forced BPTT training and autoregressive
//! rollout.
//!
//! Each cell is written once against [`Ops`], so the same update runs on a
//! tape during training and on plain arrays during rollout. Input
//! projections `V u + b` do not depend on the recurrence and are computed
//! for the whole sequence in one product before stepping.

use crate::error::{Error, Result};
use crate::grid::GridSolution;
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamSet;
use crate::tape::{Eager, Ops, Tape};
use crate::Array;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellKind {
    Rnn,
    Lstm,
    Gru,
    Cornn,
    Lem,
}

impl CellKind {
    pub const ALL: [CellKind; 5] = [
        CellKind::Rnn,
        CellKind::Lstm,
        CellKind::Gru,
        CellKind::Cornn,
        CellKind::Lem,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellKind::Rnn => "rnn",
            CellKind::Lstm => "lstm",
            CellKind::Gru => "gru",
            CellKind::Cornn => "cornn",
            CellKind::Lem => "lem",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::argument(format!("unknown cell kind '{name}'")))
    }

    pub fn default_lr(self) -> f64 {
        match self {
            CellKind::Lem | CellKind::Cornn => 1e-3,
            CellKind::Rnn | CellKind::Lstm | CellKind::Gru => 1e-2,
        }
    }

    /// Gate names; each gate owns an input matrix `V*`, a bias `b*` and a
    /// recurrent matrix `W*`.
    fn gates(self) -> &'static [&'static str] {
        match self {
            CellKind::Rnn => &["h"],
            CellKind::Lstm => &["i", "f", "g", "o"],
            CellKind::Gru => &["r", "u", "n"],
            CellKind::Cornn => &[""],
            CellKind::Lem => &["1", "2", "z", "y"],
        }
    }

    /// Recurrent matrices beyond one per gate.
    fn extra_recurrent(self) -> &'static [&'static str] {
        match self {
            CellKind::Cornn => &["Wz"],
            _ => &[],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OscillatorConfig {
    pub kind: CellKind,
    /// Input and output width, `n_channels · k_x`.
    pub d_in: usize,
    pub hidden: usize,
    pub delta_t: f64,
    pub gamma: f64,
    pub epsilon: f64,
    /// Damp with the previous `z` instead of the updated one (CoRNN only).
    pub explicit_damping: bool,
    pub lr: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl OscillatorConfig {
    pub fn new(kind: CellKind, d_in: usize) -> Self {
        OscillatorConfig {
            kind,
            d_in,
            hidden: 32,
            delta_t: 0.01,
            gamma: 1.0,
            epsilon: 0.01,
            explicit_damping: false,
            lr: kind.default_lr(),
            epochs: 20_000,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t > 0.0 && self.delta_t < 1.0) {
            return Err(Error::argument(format!("delta_t must lie in (0, 1), got {}", self.delta_t)));
        }
        if self.hidden == 0 || self.d_in == 0 {
            return Err(Error::argument("hidden and input sizes must be positive"));
        }
        if !(self.gamma > 0.0 && self.epsilon > 0.0) {
            return Err(Error::argument("gamma and epsilon must be positive"));
        }
        if !(self.lr > 0.0) {
            return Err(Error::argument(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Cell state. `z` is the second oscillator state for CoRNN and LEM, the
/// cell memory for LSTM, and unused (kept at zero) for RNN and GRU.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub y: Array,
    pub z: Array,
}

impl HiddenState {
    pub fn zeros(m: usize) -> Self {
        HiddenState {
            y: Array::zeros(&[1, m]),
            z: Array::zeros(&[1, m]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OscillatorModel {
    pub config: OscillatorConfig,
    pub params: ParamSet,
}

/// Parameter handles in a fixed order: per gate `V`, `b`, `W`; then extra
/// recurrent matrices; then the readout `Q`.
struct CellParams<V> {
    v: Vec<V>,
    b: Vec<V>,
    w: Vec<V>,
    extra: Vec<V>,
    q: V,
}

impl<V: Clone> CellParams<V> {
    fn from_slice(kind: CellKind, all: &[V]) -> Self {
        let g = kind.gates().len();
        let mut it = all.iter().cloned();
        let mut take = |n: usize| (0..n).map(|_| it.next().expect("parameter count")).collect::<Vec<V>>();
        let v = take(g);
        let b = take(g);
        let w = take(g);
        let extra = take(kind.extra_recurrent().len());
        let q = take(1).pop().unwrap();
        CellParams { v, b, w, extra, q }
    }
}

impl OscillatorModel {
    /// Uniform `±1/√m` initialization of every array.
    pub fn new(config: OscillatorConfig) -> Result<Self> {
        config.validate()?;
        let (m, d) = (config.hidden, config.d_in);
        let bound = 1.0 / (m as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamSet::new();
        let gates = config.kind.gates();
        for g in gates {
            params.push(format!("V{g}"), Array::random_uniform(&[m, d], bound, &mut rng));
        }
        for g in gates {
            params.push(format!("b{g}"), Array::random_uniform(&[m], bound, &mut rng));
        }
        for g in gates {
            params.push(format!("W{g}"), Array::random_uniform(&[m, m], bound, &mut rng));
        }
        for name in config.kind.extra_recurrent() {
            params.push(*name, Array::random_uniform(&[m, m], bound, &mut rng));
        }
        params.push("Q", Array::random_uniform(&[d, m], bound, &mut rng));
        Ok(OscillatorModel { config, params })
    }

    /// Same shapes as [`OscillatorModel::new`], every entry zero.
    pub fn zeros(config: OscillatorConfig) -> Result<Self> {
        let mut model = Self::new(config)?;
        for a in model.params.arrays_mut() {
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        Ok(model)
    }

    pub fn kind(&self) -> CellKind {
        self.config.kind
    }

    /// Checks parameter names and shapes against the configuration.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let reference = Self::zeros(self.config)?;
        if reference.params.names() != self.params.names() {
            return Err(Error::Format(format!(
                "parameter names {:?} do not match a {} cell",
                self.params.names(),
                self.config.kind.name()
            )));
        }
        for ((name, a), b) in self.params.iter().zip(reference.params.arrays()) {
            if a.shape() != b.shape() {
                return Err(Error::Dimension(format!(
                    "{name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
            if let Some((i, v)) = a.first_non_finite() {
                return Err(Error::numeric(format!("{name}[{i}]"), v));
            }
        }
        Ok(())
    }

    fn eager_params(&self) -> CellParams<Array> {
        CellParams::from_slice(self.config.kind, self.params.arrays())
    }
}

/// One recurrent update given the input projections `proj[g] = V_g u + b_g`
/// of this step, each `1 × m`.
fn cell_update<O: Ops>(
    ops: &mut O,
    cfg: &OscillatorConfig,
    p: &CellParams<O::V>,
    proj: &[O::V],
    y: &O::V,
    z: &O::V,
) -> (O::V, O::V) {
    let dt = cfg.delta_t;
    match cfg.kind {
        CellKind::Cornn => {
            let wy = ops.matmul_bt(y, &p.w[0]);
            let wz = ops.matmul_bt(z, &p.extra[0]);
            let a = ops.add(&wy, &wz);
            let a = ops.add(&a, &proj[0]);
            let drive = ops.tanh(&a);
            // z + Δt·tanh(·) − Δt·γ·y
            let step = ops.scale(&drive, dt);
            let spring = ops.scale(y, dt * cfg.gamma);
            let zn = ops.add(z, &step);
            let zn = ops.sub(&zn, &spring);
            let zn = if cfg.explicit_damping {
                let damp = ops.scale(z, dt * cfg.epsilon);
                ops.sub(&zn, &damp)
            } else {
                ops.scale(&zn, 1.0 / (1.0 + dt * cfg.epsilon))
            };
            let dy = ops.scale(&zn, dt);
            let yn = ops.add(y, &dy);
            (yn, zn)
        }
        CellKind::Lem => {
            let g1 = lem_gate(ops, p, proj, y, 0, dt);
            let g2 = lem_gate(ops, p, proj, y, 1, dt);
            let wz = ops.matmul_bt(y, &p.w[2]);
            let az = ops.add(&wz, &proj[2]);
            let cz = ops.tanh(&az);
            // z + Δt_n ⊙ (tanh(·) − z)
            let dz = ops.sub(&cz, z);
            let dz = ops.mul(&g1, &dz);
            let zn = ops.add(z, &dz);
            let wy = ops.matmul_bt(&zn, &p.w[3]);
            let ay = ops.add(&wy, &proj[3]);
            let cy = ops.tanh(&ay);
            let dy = ops.sub(&cy, y);
            let dy = ops.mul(&g2, &dy);
            let yn = ops.add(y, &dy);
            (yn, zn)
        }
        CellKind::Rnn => {
            let wh = ops.matmul_bt(y, &p.w[0]);
            let a = ops.add(&wh, &proj[0]);
            (ops.tanh(&a), z.clone())
        }
        CellKind::Lstm => {
            let mut pre = Vec::with_capacity(4);
            for g in 0..4 {
                let wh = ops.matmul_bt(y, &p.w[g]);
                pre.push(ops.add(&wh, &proj[g]));
            }
            let i = ops.sigmoid(&pre[0]);
            let f = ops.sigmoid(&pre[1]);
            let cand = ops.tanh(&pre[2]);
            let o = ops.sigmoid(&pre[3]);
            let keep = ops.mul(&f, z);
            let write = ops.mul(&i, &cand);
            let c = ops.add(&keep, &write);
            let tc = ops.tanh(&c);
            (ops.mul(&o, &tc), c)
        }
        CellKind::Gru => {
            let wr = ops.matmul_bt(y, &p.w[0]);
            let ar = ops.add(&wr, &proj[0]);
            let r = ops.sigmoid(&ar);
            let wu = ops.matmul_bt(y, &p.w[1]);
            let au = ops.add(&wu, &proj[1]);
            let u = ops.sigmoid(&au);
            let wn = ops.matmul_bt(y, &p.w[2]);
            let rn = ops.mul(&r, &wn);
            let an = ops.add(&rn, &proj[2]);
            let n = ops.tanh(&an);
            // h + u ⊙ (n − h): a saturated update gate copies the candidate
            let d = ops.sub(&n, y);
            let d = ops.mul(&u, &d);
            (ops.add(y, &d), z.clone())
        }
    }
}

fn lem_gate<O: Ops>(ops: &mut O, p: &CellParams<O::V>, proj: &[O::V], y: &O::V, g: usize, dt: f64) -> O::V {
    let w = ops.matmul_bt(y, &p.w[g]);
    let a = ops.add(&w, &proj[g]);
    let s = ops.sigmoid(&a);
    ops.scale(&s, dt)
}

fn check_state(state: &HiddenState, step: usize) -> Result<()> {
    for (name, a) in [("y", &state.y), ("z", &state.z)] {
        if let Some((i, v)) = a.first_non_finite() {
            return Err(Error::numeric(format!("hidden state {name}[{i}] at step {step}"), v));
        }
    }
    Ok(())
}

fn as_row(u: &Array, d_in: usize) -> Result<Array> {
    if u.len() != d_in {
        return Err(Error::Dimension(format!("input has {} entries, cell expects {d_in}", u.len())));
    }
    Array::from_vec(vec![1, d_in], u.data().to_vec())
}

/// One eager step of whichever cell `model` holds.
pub fn cell_step(model: &OscillatorModel, state: &HiddenState, u: &Array) -> Result<HiddenState> {
    let cfg = &model.config;
    let u = as_row(u, cfg.d_in)?;
    let p = model.eager_params();
    let mut ops = Eager;
    let proj: Vec<Array> = p.v.iter().zip(&p.b).map(|(v, b)| ops.linear(&u, v, b)).collect();
    let (y, z) = cell_update(&mut ops, cfg, &p, &proj, &state.y, &state.z);
    let next = HiddenState { y, z };
    check_state(&next, 0)?;
    Ok(next)
}

fn expect_kind(model: &OscillatorModel, kinds: &[CellKind]) -> Result<()> {
    if kinds.contains(&model.config.kind) {
        Ok(())
    } else {
        Err(Error::argument(format!(
            "{} cell used where {:?} expected",
            model.config.kind.name(),
            kinds
        )))
    }
}

pub fn cornn_step(model: &OscillatorModel, state: &HiddenState, u: &Array) -> Result<HiddenState> {
    expect_kind(model, &[CellKind::Cornn])?;
    cell_step(model, state, u)
}

pub fn lem_step(model: &OscillatorModel, state: &HiddenState, u: &Array) -> Result<HiddenState> {
    expect_kind(model, &[CellKind::Lem])?;
    cell_step(model, state, u)
}

pub fn baseline_step(model: &OscillatorModel, state: &HiddenState, u: &Array) -> Result<HiddenState> {
    expect_kind(model, &[CellKind::Rnn, CellKind::Lstm, CellKind::Gru])?;
    cell_step(model, state, u)
}

/// The LEM time-step gates `(Δt_n, Δt̄_n)` for one step.
pub fn lem_gates(model: &OscillatorModel, state: &HiddenState, u: &Array) -> Result<(Array, Array)> {
    expect_kind(model, &[CellKind::Lem])?;
    let u = as_row(u, model.config.d_in)?;
    let p = model.eager_params();
    let mut ops = Eager;
    let proj: Vec<Array> = p.v.iter().zip(&p.b).map(|(v, b)| ops.linear(&u, v, b)).collect();
    let g1 = lem_gate(&mut ops, &p, &proj, &state.y, 0, model.config.delta_t);
    let g2 = lem_gate(&mut ops, &p, &proj, &state.y, 1, model.config.delta_t);
    Ok((g1, g2))
}

/// Readout `ω = Q y` as a `1 × d_in` row.
pub fn readout(model: &OscillatorModel, state: &HiddenState) -> Array {
    let q = model.params.get("Q");
    state.y.matmul_bt(q).expect("readout shape")
}

/// Teacher-forced pass over `inputs` (`T × d_in`) from the zero state;
/// returns the `T × d_in` readouts. Generic so that the same code records
/// on a tape or evaluates eagerly.
fn sequence_forward<O: Ops>(ops: &mut O, cfg: &OscillatorConfig, p: &CellParams<O::V>, inputs: &O::V, steps: usize) -> O::V {
    let m = cfg.hidden;
    let proj_all: Vec<O::V> = p.v.iter().zip(&p.b).map(|(v, b)| ops.linear(inputs, v, b)).collect();
    let mut y = ops.constant(Array::zeros(&[1, m]));
    let mut z = ops.constant(Array::zeros(&[1, m]));
    let mut ys = Vec::with_capacity(steps);
    for n in 0..steps {
        let proj: Vec<O::V> = proj_all.iter().map(|a| ops.slice_rows(a, n, 1)).collect();
        let (yn, zn) = cell_update(ops, cfg, p, &proj, &y, &z);
        ys.push(yn.clone());
        y = yn;
        z = zn;
    }
    let stacked = ops.concat_rows(&ys);
    ops.matmul_bt(&stacked, &p.q)
}

/// Input/target pair of a grid: rows `0..k_t−1` map to rows `1..k_t`.
pub fn teacher_pairs(grid: &GridSolution) -> Result<(Array, Array)> {
    let k = grid.k_t();
    if k < 2 {
        return Err(Error::argument(format!("sequence needs at least 2 time levels, got {k}")));
    }
    Ok((grid.values.slice_rows(0, k - 1), grid.values.slice_rows(1, k - 1)))
}

fn check_sequences(cfg: &OscillatorConfig, seqs: &[GridSolution]) -> Result<Vec<(Array, Array)>> {
    if seqs.is_empty() {
        return Err(Error::argument("no training sequences"));
    }
    seqs.iter()
        .map(|g| {
            if g.width() != cfg.d_in {
                return Err(Error::Dimension(format!(
                    "sequence width {} does not match cell input size {}",
                    g.width(),
                    cfg.d_in
                )));
            }
            teacher_pairs(g)
        })
        .collect()
}

/// Mean over sequences of the per-sequence readout MSE, and its gradient.
pub fn sequence_loss_and_grad(model: &OscillatorModel, seqs: &[GridSolution]) -> Result<(f64, Vec<Array>)> {
    let pairs = check_sequences(&model.config, seqs)?;
    loss_and_grad_pairs(model, &pairs)
}

fn loss_and_grad_pairs(model: &OscillatorModel, pairs: &[(Array, Array)]) -> Result<(f64, Vec<Array>)> {
    let mut tape = Tape::new();
    let leaves = model.params.bind(&mut tape);
    let p = CellParams::from_slice(model.config.kind, &leaves);
    let mut terms = Vec::with_capacity(pairs.len());
    for (inputs, targets) in pairs {
        let x = tape.constant(inputs.clone());
        let out = sequence_forward(&mut tape, &model.config, &p, &x, inputs.rows());
        let t = tape.constant(targets.clone());
        let diff = tape.sub(out, t);
        terms.push(tape.mean_square(diff));
    }
    let mut loss = terms[0];
    for &t in &terms[1..] {
        loss = tape.add(loss, t);
    }
    let loss = tape.scale(loss, 1.0 / pairs.len() as f64);
    let value = tape.scalar(loss);
    let grads = tape.gradients(loss)?;
    Ok((value, grads.into_vec()))
}

/// Loss per epoch, recorded before each update.
pub type LossHistory = Vec<f64>;

/// Adam over full-length BPTT on one sequence.
pub fn train_sequence(model: &mut OscillatorModel, grid: &GridSolution) -> Result<LossHistory> {
    train_sequences(model, std::slice::from_ref(grid))
}

/// Trains on several sequences at once, each starting from the zero state;
/// the loss is the mean of the per-sequence losses.
pub fn train_sequences(model: &mut OscillatorModel, seqs: &[GridSolution]) -> Result<LossHistory> {
    let pairs = check_sequences(&model.config, seqs)?;
    let cfg = model.config;
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), model.params.arrays());
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let (loss, grads) = loss_and_grad_pairs(model, &pairs).map_err(|e| match e {
            Error::Numeric { context, value } => Error::Numeric {
                context: format!("{context} at epoch {epoch}"),
                value,
            },
            other => other,
        })?;
        adam.step(model.params.arrays_mut(), &grads)?;
        history.push(loss);
    }
    Ok(history)
}

/// How the hidden state is prepared before extrapolating.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Warmup {
    /// Feed the training inputs first, as during training.
    #[default]
    TrainingSequence,
    /// Start from the zero state.
    Cold,
}

/// Which profile the rollout consumes first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstInput {
    /// The profile at the last training level.
    #[default]
    FinalTraining,
    /// The oscillator's own prediction of the last training level.
    Predicted,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RolloutOptions {
    pub warmup: Warmup,
    pub first_input: FirstInput,
}

/// Autoregressive extrapolation `horizon` levels past the end of `seed`.
/// Output times continue the seed's uniform spacing.
pub fn rollout(model: &OscillatorModel, seed: &GridSolution, horizon: usize, opts: RolloutOptions) -> Result<GridSolution> {
    if horizon == 0 {
        return Err(Error::argument("rollout horizon must be at least 1"));
    }
    let cfg = &model.config;
    if seed.width() != cfg.d_in {
        return Err(Error::Dimension(format!(
            "seed width {} does not match cell input size {}",
            seed.width(),
            cfg.d_in
        )));
    }
    let k = seed.k_t();
    if k < 2 {
        return Err(Error::argument("rollout seed needs at least 2 time levels"));
    }
    let mut state = HiddenState::zeros(cfg.hidden);
    let mut last_output = None;
    if opts.warmup == Warmup::TrainingSequence {
        for n in 0..k - 1 {
            state = cell_step(model, &state, &Array::vector(seed.row(n).to_vec()))?;
            last_output = Some(readout(model, &state));
        }
    }
    let mut input = match (opts.first_input, last_output) {
        (FirstInput::Predicted, Some(w)) => w,
        _ => Array::from_vec(vec![1, cfg.d_in], seed.row(k - 1).to_vec())?,
    };
    let mut values = Array::zeros(&[horizon, cfg.d_in]);
    for step in 0..horizon {
        state = cell_step(model, &state, &input).map_err(|e| match e {
            Error::Numeric { context, value } => Error::Numeric {
                context: format!("{context} (rollout step {step})"),
                value,
            },
            other => other,
        })?;
        let w = readout(model, &state);
        if let Some((i, v)) = w.first_non_finite() {
            return Err(Error::numeric(format!("rollout output {i} at step {step}"), v));
        }
        values.data_mut()[step * cfg.d_in..(step + 1) * cfg.d_in].copy_from_slice(w.data());
        input = w;
    }
    GridSolution::new(continuation_times(seed, horizon), seed.xs.clone(), seed.n_channels, values)
}

/// `t₀ + i·h` for the `horizon` levels after the seed, with `h` the seed's
/// first spacing, so that times match a reference grid `n·h` bit for bit.
fn continuation_times(seed: &GridSolution, horizon: usize) -> Vec<f64> {
    let k = seed.k_t();
    let (t0, h) = (seed.times[0], seed.times[1] - seed.times[0]);
    (k..k + horizon).map(|i| t0 + i as f64 * h).collect()
}

/// Eager teacher-forced readouts for a whole sequence.
pub fn teacher_forced_outputs(model: &OscillatorModel, grid: &GridSolution) -> Result<Array> {
    let (inputs, _) = teacher_pairs(grid)?;
    let p = model.eager_params();
    let mut ops = Eager;
    Ok(sequence_forward(&mut ops, &model.config, &p, &inputs, inputs.rows()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::uniform_points;
    use crate::params::flatten_grads;
    use proptest::prelude::*;
    use rand::Rng;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn scalar_model(kind: CellKind) -> OscillatorModel {
        let mut cfg = OscillatorConfig::new(kind, 1);
        cfg.hidden = 1;
        cfg.delta_t = 0.5;
        OscillatorModel::zeros(cfg).unwrap()
    }

    fn set(model: &mut OscillatorModel, name: &str, v: f64) {
        model.params.get_mut(name).data_mut().iter_mut().for_each(|x| *x = v);
    }

    #[test]
    fn cornn_hand_step() {
        let mut m = scalar_model(CellKind::Cornn);
        set(&mut m, "V", 1.0);
        let s = cornn_step(&m, &HiddenState::zeros(1), &Array::vector(vec![1.0])).unwrap();
        let z = 0.5 * 1f64.tanh() / 1.005;
        assert!((s.z.data()[0] - z).abs() < 1e-15);
        assert!((s.z.data()[0] - 0.37890256515212184).abs() < 1e-12);
        assert!((s.y.data()[0] - 0.18945128257606092).abs() < 1e-12);
    }

    #[test]
    fn lem_hand_step() {
        // y-update uses tanh(z₁ + 1), i.e. W_y = 1
        let mut m = scalar_model(CellKind::Lem);
        set(&mut m, "Vz", 1.0);
        set(&mut m, "Vy", 1.0);
        set(&mut m, "Wy", 1.0);
        let u = Array::vector(vec![1.0]);
        let (g1, g2) = lem_gates(&m, &HiddenState::zeros(1), &u).unwrap();
        assert_eq!((g1.data()[0], g2.data()[0]), (0.25, 0.25));
        let s = lem_step(&m, &HiddenState::zeros(1), &u).unwrap();
        assert!((s.z.data()[0] - 0.19039853898894116).abs() < 1e-12);
        assert!((s.y.data()[0] - 0.2076756075030071).abs() < 1e-12);
    }

    #[test]
    fn zero_cells_keep_zero_state() {
        for kind in CellKind::ALL {
            let m = OscillatorModel::zeros(OscillatorConfig::new(kind, 3)).unwrap();
            let s = cell_step(&m, &HiddenState::zeros(32), &Array::vector(vec![0.4, -1.0, 2.0])).unwrap();
            assert!(s.y.data().iter().chain(s.z.data()).all(|&v| v == 0.0), "{kind:?}");
        }
        let m = OscillatorModel::zeros(OscillatorConfig::new(CellKind::Lem, 2)).unwrap();
        let (g1, g2) = lem_gates(&m, &HiddenState::zeros(32), &Array::vector(vec![1.0, 1.0])).unwrap();
        assert!(g1.data().iter().chain(g2.data()).all(|&g| g == 0.005));
    }

    #[test]
    fn wrong_kind_is_rejected() {
        let m = scalar_model(CellKind::Gru);
        assert!(lem_step(&m, &HiddenState::zeros(1), &Array::vector(vec![0.0])).is_err());
        assert!(baseline_step(&m, &HiddenState::zeros(1), &Array::vector(vec![0.0])).is_ok());
    }

    #[test]
    fn config_validation() {
        let mut c = OscillatorConfig::new(CellKind::Cornn, 4);
        c.delta_t = 1.0;
        assert!(OscillatorModel::new(c).is_err());
        c.delta_t = 0.5;
        c.epsilon = 0.0;
        assert!(c.validate().is_err());
        assert_eq!(CellKind::from_name("lem").unwrap(), CellKind::Lem);
        assert!(CellKind::from_name("transformer").is_err());
    }

    #[test]
    fn parameter_shapes() {
        let m = OscillatorModel::new(OscillatorConfig::new(CellKind::Lem, 256)).unwrap();
        for n in ["W1", "W2", "Wy", "Wz"] {
            assert_eq!(m.params.get(n).shape(), &[32, 32]);
        }
        for n in ["V1", "V2", "Vy", "Vz"] {
            assert_eq!(m.params.get(n).shape(), &[32, 256]);
        }
        assert_eq!(m.params.get("Q").shape(), &[256, 32]);
        let c = OscillatorModel::new(OscillatorConfig::new(CellKind::Cornn, 256)).unwrap();
        assert_eq!(c.params.names(), &["V", "b", "W", "Wz", "Q"]);
        let bound = 1.0 / 32f64.sqrt();
        assert!(c.params.arrays().iter().all(|a| a.max_abs() <= bound));
        c.validate().unwrap();
    }

    #[test]
    fn damped_oscillator_decays() {
        let mut cfg = OscillatorConfig::new(CellKind::Cornn, 1);
        cfg.hidden = 4;
        cfg.delta_t = 0.1;
        cfg.epsilon = 1.0;
        let m = OscillatorModel::zeros(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut s = HiddenState {
            y: Array::random_uniform(&[1, 4], 1.0, &mut rng),
            z: Array::random_uniform(&[1, 4], 1.0, &mut rng),
        };
        let energy = |s: &HiddenState| s.y.data().iter().zip(s.z.data()).map(|(y, z)| y * y + z * z).sum::<f64>();
        let e0 = energy(&s);
        let u = Array::vector(vec![0.0]);
        let mut peaks = Vec::new();
        for n in 0..200 {
            s = cornn_step(&m, &s, &u).unwrap();
            if n % 20 == 19 {
                peaks.push(energy(&s));
            }
        }
        assert!(energy(&s) < 0.5 * e0);
        assert!(peaks.windows(2).all(|w| w[1] <= w[0]), "{peaks:?}");
    }

    /// Index-loop reference of every cell.
    fn brute_step(model: &OscillatorModel, state: &HiddenState, u: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let cfg = &model.config;
        let (m, d) = (cfg.hidden, cfg.d_in);
        let p = |n: &str| model.params.get(n).data().to_vec();
        let y = state.y.data();
        let z = state.z.data();
        let affine = |g: &str, h: &[f64]| -> Vec<f64> {
            let (v, b, w) = (p(&format!("V{g}")), p(&format!("b{g}")), p(&format!("W{g}")));
            (0..m)
                .map(|i| {
                    let mut a = b[i];
                    for j in 0..d {
                        a += v[i * d + j] * u[j];
                    }
                    for j in 0..m {
                        a += w[i * m + j] * h[j];
                    }
                    a
                })
                .collect()
        };
        let dt = cfg.delta_t;
        match cfg.kind {
            CellKind::Cornn => {
                let wz = p("Wz");
                let a = affine("", y);
                let mut zn = vec![0.0; m];
                let mut yn = vec![0.0; m];
                for i in 0..m {
                    let mut ai = a[i];
                    for j in 0..m {
                        ai += wz[i * m + j] * z[j];
                    }
                    zn[i] = if cfg.explicit_damping {
                        z[i] + dt * ai.tanh() - dt * cfg.gamma * y[i] - dt * cfg.epsilon * z[i]
                    } else {
                        (z[i] + dt * ai.tanh() - dt * cfg.gamma * y[i]) / (1.0 + dt * cfg.epsilon)
                    };
                    yn[i] = y[i] + dt * zn[i];
                }
                (yn, zn)
            }
            CellKind::Lem => {
                let a1 = affine("1", y);
                let a2 = affine("2", y);
                let az = affine("z", y);
                let zn: Vec<f64> = (0..m)
                    .map(|i| {
                        let g = dt * sigmoid(a1[i]);
                        (1.0 - g) * z[i] + g * az[i].tanh()
                    })
                    .collect();
                let ay = affine("y", &zn);
                let yn = (0..m)
                    .map(|i| {
                        let g = dt * sigmoid(a2[i]);
                        (1.0 - g) * y[i] + g * ay[i].tanh()
                    })
                    .collect();
                (yn, zn)
            }
            CellKind::Rnn => (affine("h", y).iter().map(|a| a.tanh()).collect(), z.to_vec()),
            CellKind::Lstm => {
                let (i, f, g, o) = (affine("i", y), affine("f", y), affine("g", y), affine("o", y));
                let c: Vec<f64> = (0..m).map(|k| sigmoid(f[k]) * z[k] + sigmoid(i[k]) * g[k].tanh()).collect();
                let h = (0..m).map(|k| sigmoid(o[k]) * c[k].tanh()).collect();
                (h, c)
            }
            CellKind::Gru => {
                let (r, uu) = (affine("r", y), affine("u", y));
                let (vn, bn, wn) = (p("Vn"), p("bn"), p("Wn"));
                let h = (0..m)
                    .map(|i| {
                        let mut xi = bn[i];
                        for j in 0..d {
                            xi += vn[i * d + j] * u[j];
                        }
                        let mut hi = 0.0;
                        for j in 0..m {
                            hi += wn[i * m + j] * y[j];
                        }
                        let n = (xi + sigmoid(r[i]) * hi).tanh();
                        let ug = sigmoid(uu[i]);
                        (1.0 - ug) * y[i] + ug * n
                    })
                    .collect();
                (h, z.to_vec())
            }
        }
    }

    #[test]
    fn vectorized_steps_match_index_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for kind in CellKind::ALL {
            for trial in 0..100 {
                let m = rng.gen_range(1..=2);
                let d = rng.gen_range(1..=2);
                let mut cfg = OscillatorConfig::new(kind, d);
                cfg.hidden = m;
                cfg.delta_t = rng.gen_range(0.05..0.95);
                cfg.gamma = rng.gen_range(0.1..2.0);
                cfg.epsilon = rng.gen_range(0.01..1.0);
                cfg.explicit_damping = trial % 2 == 1;
                cfg.seed = trial;
                let mut model = OscillatorModel::new(cfg).unwrap();
                for a in model.params.arrays_mut() {
                    *a = Array::random_uniform(a.shape(), 1.5, &mut rng);
                }
                let state = HiddenState {
                    y: Array::random_uniform(&[1, m], 1.0, &mut rng),
                    z: Array::random_uniform(&[1, m], 1.0, &mut rng),
                };
                let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let fast = cell_step(&model, &state, &Array::vector(u.clone())).unwrap();
                let (y, z) = brute_step(&model, &state, &u);
                for (a, b) in fast.y.data().iter().zip(&y).chain(fast.z.data().iter().zip(&z)) {
                    assert!((a - b).abs() <= 1e-12, "{kind:?} trial {trial}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn lstm_scalar_step_by_hand() {
        let mut m = scalar_model(CellKind::Lstm);
        for (n, v) in [("Vi", 0.5), ("Vf", -0.3), ("Vg", 0.8), ("Vo", 1.1), ("bi", 0.1), ("Wf", 0.7), ("Wo", -0.2)] {
            set(&mut m, n, v);
        }
        let state = HiddenState {
            y: Array::from_vec(vec![1, 1], vec![0.4]).unwrap(),
            z: Array::from_vec(vec![1, 1], vec![-0.6]).unwrap(),
        };
        let s = baseline_step(&m, &state, &Array::vector(vec![2.0])).unwrap();
        let i = sigmoid(0.5 * 2.0 + 0.1);
        let f = sigmoid(-0.3 * 2.0 + 0.7 * 0.4);
        let g = (0.8f64 * 2.0).tanh();
        let o = sigmoid(1.1 * 2.0 - 0.2 * 0.4);
        let c = f * -0.6 + i * g;
        assert!((s.z.data()[0] - c).abs() < 1e-12);
        assert!((s.y.data()[0] - o * c.tanh()).abs() < 1e-12);
    }

    #[test]
    fn gru_saturated_update_copies_candidate() {
        let mut m = scalar_model(CellKind::Gru);
        set(&mut m, "bu", 1e3);
        set(&mut m, "Vn", 0.9);
        set(&mut m, "Wn", 0.3);
        set(&mut m, "br", 50.0);
        let state = HiddenState {
            y: Array::from_vec(vec![1, 1], vec![0.5]).unwrap(),
            z: Array::zeros(&[1, 1]),
        };
        let s = baseline_step(&m, &state, &Array::vector(vec![1.0])).unwrap();
        assert_eq!(s.y.data()[0], (0.9f64 + 0.3 * 0.5).tanh());
    }

    fn tiny_grid(rows: Vec<Vec<f64>>) -> GridSolution {
        let k = rows.len();
        let w = rows[0].len();
        let values = Array::from_rows(&rows);
        let xs = if w == 1 { vec![0.0] } else { uniform_points(-1.0, 1.0, w) };
        GridSolution::new(uniform_points(0.0, 0.8, k), xs, 1, values).unwrap()
    }

    #[test]
    fn bptt_matches_finite_differences() {
        for kind in CellKind::ALL {
            let mut cfg = OscillatorConfig::new(kind, 1);
            cfg.hidden = 1;
            cfg.delta_t = 0.4;
            cfg.seed = 3;
            let model = OscillatorModel::new(cfg).unwrap();
            let grid = tiny_grid(vec![vec![0.3], vec![-0.5], vec![0.8], vec![0.1]]);
            let (_, grads) = sequence_loss_and_grad(&model, &[grid.clone()]).unwrap();
            let g = flatten_grads(&grads);
            let x0 = model.params.flatten();
            let mut probe = model.clone();
            let mut f = |x: &[f64]| {
                probe.params.assign_flat(x).unwrap();
                sequence_loss_and_grad(&probe, &[grid.clone()]).unwrap().0
            };
            for i in 0..x0.len() {
                let h = 1e-6;
                let (mut xp, mut xm) = (x0.clone(), x0.clone());
                xp[i] += h;
                xm[i] -= h;
                let fd = (f(&xp) - f(&xm)) / (2.0 * h);
                let scale = fd.abs().max(g[i].abs()).max(1e-8);
                assert!((fd - g[i]).abs() / scale <= 1e-6, "{kind:?} param {i}: {} vs {fd}", g[i]);
            }
        }
    }

    #[test]
    fn cornn_step_is_first_order_consistent() {
        // one step of the scheme vs RK4 of y' = z, z' = tanh(Wy + 𝒲z + Vu + b) − γy − εz
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let mut cfg = OscillatorConfig::new(CellKind::Cornn, 2);
            cfg.hidden = 2;
            cfg.delta_t = 0.02;
            cfg.epsilon = rng.gen_range(0.01..1.0);
            cfg.seed = rng.gen();
            let model = OscillatorModel::new(cfg).unwrap();
            let u = Array::vector(vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]);
            let s0 = HiddenState {
                y: Array::random_uniform(&[1, 2], 1.0, &mut rng),
                z: Array::random_uniform(&[1, 2], 1.0, &mut rng),
            };
            let err = |dt: f64| {
                let mut c = cfg;
                c.delta_t = dt;
                let m = OscillatorModel {
                    config: c,
                    params: model.params.clone(),
                };
                let s = cornn_step(&m, &s0, &u).unwrap();
                let exact = rk4_cornn(&m, &s0, &u, dt);
                s.y.data()
                    .iter()
                    .chain(s.z.data())
                    .zip(&exact)
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max)
            };
            let ratio = err(0.02) / err(0.01);
            assert!((3.0..=5.0).contains(&ratio), "ratio {ratio}");
        }
    }

    fn rk4_cornn(m: &OscillatorModel, s: &HiddenState, u: &Array, dt: f64) -> Vec<f64> {
        let cfg = &m.config;
        let p = m.eager_params();
        let mut ops = Eager;
        let proj = ops.linear(&Array::from_vec(vec![1, 2], u.data().to_vec()).unwrap(), &p.v[0], &p.b[0]);
        let rhs = |y: &[f64], z: &[f64]| -> (Vec<f64>, Vec<f64>) {
            let ya = Array::from_vec(vec![1, 2], y.to_vec()).unwrap();
            let za = Array::from_vec(vec![1, 2], z.to_vec()).unwrap();
            let a = ya.matmul_bt(&p.w[0]).unwrap();
            let b = za.matmul_bt(&p.extra[0]).unwrap();
            let dz = (0..2)
                .map(|i| (a.data()[i] + b.data()[i] + proj.data()[i]).tanh() - cfg.gamma * y[i] - cfg.epsilon * z[i])
                .collect();
            (z.to_vec(), dz)
        };
        let n = 200;
        let h = dt / n as f64;
        let mut y = s.y.data().to_vec();
        let mut z = s.z.data().to_vec();
        let add = |a: &[f64], b: &[f64], c: f64| a.iter().zip(b).map(|(x, y)| x + c * y).collect::<Vec<f64>>();
        for _ in 0..n {
            let (k1y, k1z) = rhs(&y, &z);
            let (k2y, k2z) = rhs(&add(&y, &k1y, h / 2.0), &add(&z, &k1z, h / 2.0));
            let (k3y, k3z) = rhs(&add(&y, &k2y, h / 2.0), &add(&z, &k2z, h / 2.0));
            let (k4y, k4z) = rhs(&add(&y, &k3y, h), &add(&z, &k3z, h));
            for i in 0..2 {
                y[i] += h / 6.0 * (k1y[i] + 2.0 * k2y[i] + 2.0 * k3y[i] + k4y[i]);
                z[i] += h / 6.0 * (k1z[i] + 2.0 * k2z[i] + 2.0 * k3z[i] + k4z[i]);
            }
        }
        y.into_iter().chain(z).collect()
    }

    #[test]
    fn lem_state_change_is_order_delta_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut cfg = OscillatorConfig::new(CellKind::Lem, 3);
        cfg.hidden = 4;
        let model = OscillatorModel::new(cfg).unwrap();
        let s0 = HiddenState {
            y: Array::random_uniform(&[1, 4], 1.0, &mut rng),
            z: Array::random_uniform(&[1, 4], 1.0, &mut rng),
        };
        let u = Array::vector(vec![0.2, -0.4, 0.9]);
        let change = |dt: f64| {
            let mut c = cfg;
            c.delta_t = dt;
            let m = OscillatorModel {
                config: c,
                params: model.params.clone(),
            };
            let s = lem_step(&m, &s0, &u).unwrap();
            s.y.data()
                .iter()
                .chain(s.z.data())
                .zip(s0.y.data().iter().chain(s0.z.data()))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let ratio = change(0.002) / change(0.001);
        assert!((ratio - 2.0).abs() <= 0.2, "ratio {ratio}");
    }

    #[test]
    fn long_sequence_gradients_are_finite() {
        let k_t = 160;
        let rows: Vec<Vec<f64>> = (0..k_t)
            .map(|n| (0..16).map(|i| ((n as f64) * 0.05 + i as f64 * 0.3).sin()).collect())
            .collect();
        let grid = tiny_grid(rows);
        for kind in [CellKind::Cornn, CellKind::Lem] {
            let model = OscillatorModel::new(OscillatorConfig::new(kind, 16)).unwrap();
            let (loss, grads) = sequence_loss_and_grad(&model, &[grid.clone()]).unwrap();
            assert!(loss.is_finite());
            assert!(grads.iter().all(Array::all_finite), "{kind:?}");
        }
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut cfg = OscillatorConfig::new(CellKind::Lem, 2);
        cfg.epochs = 0;
        let mut m = OscillatorModel::new(cfg).unwrap();
        let before = m.clone();
        let grid = tiny_grid(vec![vec![1.0, 2.0], vec![1.0, 2.0]]);
        assert!(train_sequence(&mut m, &grid).unwrap().is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn constant_sequence_is_learned_and_rolled_out() {
        let mut cfg = OscillatorConfig::new(CellKind::Lem, 4);
        cfg.hidden = 8;
        cfg.delta_t = 0.5;
        cfg.lr = 1e-2;
        cfg.epochs = 2000;
        let mut m = OscillatorModel::new(cfg).unwrap();
        let c = vec![0.5, -0.25, 0.75, 0.1];
        let grid = tiny_grid(vec![c.clone(); 20]);
        let hist = train_sequence(&mut m, &grid).unwrap();
        assert_eq!(hist.len(), 2000);
        let final_mse = sequence_loss_and_grad(&m, &[grid.clone()]).unwrap().0;
        assert!(final_mse <= 1e-6, "mse {final_mse}");

        let out = rollout(&m, &grid, 5, RolloutOptions::default()).unwrap();
        assert_eq!(out.k_t(), 5);
        for n in 0..5 {
            for (a, b) in out.row(n).iter().zip(&c) {
                assert!((a - b).abs() < 1e-2, "step {n}: {a} vs {b}");
            }
        }
        let again = rollout(&m, &grid, 5, RolloutOptions::default()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn rollout_times_continue_training_spacing() {
        let m = OscillatorModel::new(OscillatorConfig::new(CellKind::Gru, 256)).unwrap();
        let rows: Vec<Vec<f64>> = (0..80).map(|n| vec![n as f64 * 1e-3; 256]).collect();
        let grid = tiny_grid(rows);
        let out = rollout(&m, &grid, 20, RolloutOptions::default()).unwrap();
        assert_eq!((out.k_t(), out.k_x()), (20, 256));
        let h = 0.8 / 79.0;
        assert!((out.times[0] - 80.0 * h).abs() < 1e-15);
        assert!(out.times[0] > 0.8 && out.times[19] <= 1.0 + 2.0 * h);
        assert_eq!(out.xs, grid.xs);
        assert!(rollout(&m, &grid, 0, RolloutOptions::default()).is_err());
    }

    #[test]
    fn readout_is_linear_in_q() {
        let m = OscillatorModel::new(OscillatorConfig::new(CellKind::Cornn, 3)).unwrap();
        let mut doubled = m.clone();
        let q = doubled.params.get_mut("Q");
        *q = q.scaled(2.0);
        let grid = tiny_grid(vec![vec![0.1, 0.2, 0.3], vec![0.3, 0.2, 0.1], vec![0.0, 0.5, 1.0]]);
        let a = teacher_forced_outputs(&m, &grid).unwrap();
        let b = teacher_forced_outputs(&doubled, &grid).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!(2.0 * x, *y);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn lem_gates_stay_inside_delta_t(seed in 0u64..10_000, scale in 0.1f64..20.0, dt in 0.01f64..0.99) {
            let mut cfg = OscillatorConfig::new(CellKind::Lem, 3);
            cfg.hidden = 4;
            cfg.delta_t = dt;
            cfg.seed = seed;
            let m = OscillatorModel::new(cfg).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let u = Array::random_uniform(&[3], scale, &mut rng);
            let s = HiddenState {
                y: Array::random_uniform(&[1, 4], 1.0, &mut rng),
                z: Array::random_uniform(&[1, 4], 1.0, &mut rng),
            };
            let (g1, g2) = lem_gates(&m, &s, &u).unwrap();
            for &g in g1.data().iter().chain(g2.data()) {
                prop_assert!(g > 0.0 && g < dt);
            }
        }
    }
}
