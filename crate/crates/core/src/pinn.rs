//! Tanh MLPs trained on physics-informed losses, and their inference onto
//! uniform space-time grids.

use crate::error::{Error, Result};
use crate::grid::{uniform_points, GridSolution};
use crate::jet::{factorial, DiffScalar, Scalar};
use crate::optim::{Adam, AdamConfig, Lbfgs, LbfgsConfig};
use crate::params::{flatten_grads, ParamSet};
use crate::pde::{BcKind, Benchmark, ChannelDerivs, CollocationSet, DomainSpec, Field, PdeSpec};
use crate::tape::{JetLayout, Tape, Var};
use crate::Array;
use log::{debug, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    /// No nonlinearity; used to check layer plumbing.
    Identity,
}

/// Fully connected network `(x, t) ↦ u ∈ ℝᶜ` with the activation applied
/// after every layer but the last. Layer `i` stores `W{i}` as
/// `[out × in]` and `b{i}` as `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub params: ParamSet,
}

/// Hidden widths used by every benchmark except the Schrödinger default.
pub const DEFAULT_HIDDEN: [usize; 4] = [20; 4];

impl MlpModel {
    /// Glorot-uniform weights and zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            params.push(format!("W{i}"), Array::random_uniform(&[fan_out, fan_in], bound, &mut rng));
            params.push(format!("b{i}"), Array::zeros(&[fan_out]));
        }
        Ok(MlpModel {
            widths: widths.to_vec(),
            activation: Activation::Tanh,
            params,
        })
    }

    pub fn zeros(widths: &[usize]) -> Result<Self> {
        Self::check_widths(widths)?;
        let mut params = ParamSet::new();
        for (i, w) in widths.windows(2).enumerate() {
            params.push(format!("W{i}"), Array::zeros(&[w[1], w[0]]));
            params.push(format!("b{i}"), Array::zeros(&[w[1]]));
        }
        Ok(MlpModel {
            widths: widths.to_vec(),
            activation: Activation::Tanh,
            params,
        })
    }

    /// `[2, hidden..., n_channels]`.
    pub fn architecture(hidden: &[usize], n_channels: usize) -> Vec<usize> {
        let mut w = vec![2];
        w.extend_from_slice(hidden);
        w.push(n_channels);
        w
    }

    fn check_widths(widths: &[usize]) -> Result<()> {
        if widths.len() < 2 || widths[0] != 2 || widths.iter().any(|&w| w == 0) {
            return Err(Error::argument(format!(
                "network widths must start at 2 and be positive, got {widths:?}"
            )));
        }
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn n_channels(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn weight(&self, layer: usize) -> &Array {
        &self.params.arrays()[2 * layer]
    }

    pub fn bias(&self, layer: usize) -> &Array {
        &self.params.arrays()[2 * layer + 1]
    }

    pub fn expected_param_count(widths: &[usize]) -> usize {
        widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Batched jet forward pass on `tape`, `params` being the bound leaves.
    fn tape_forward(&self, tape: &mut Tape, params: &[Var], input: Var, layout: JetLayout) -> Var {
        let mut h = input;
        for l in 0..self.n_layers() {
            let z = tape.linear(h, params[2 * l], params[2 * l + 1], layout.n);
            h = if l + 1 < self.n_layers() && self.activation == Activation::Tanh {
                tape.jet_tanh(z, layout)
            } else {
                z
            };
        }
        h
    }
}

/// Plain evaluation of the network on any scalar type.
pub fn mlp_forward<S: Scalar>(model: &MlpModel, x: S, t: S) -> Vec<S> {
    let mut h = vec![x, t];
    for l in 0..model.n_layers() {
        let w = model.weight(l);
        let b = model.bias(l).data();
        let (rows, cols) = (w.rows(), w.cols());
        let wd = w.data();
        let mut z = Vec::with_capacity(rows);
        for r in 0..rows {
            let mut acc = S::constant(b[r]);
            for c in 0..cols {
                acc = acc + h[c].scale(wd[r * cols + c]);
            }
            z.push(if l + 1 < model.n_layers() && model.activation == Activation::Tanh {
                acc.tanh()
            } else {
                acc
            });
        }
        h = z;
    }
    h
}

impl Field for MlpModel {
    fn n_channels(&self) -> usize {
        MlpModel::n_channels(self)
    }
    fn eval<S: Scalar>(&self, x: S, t: S) -> Vec<S> {
        mlp_forward(self, x, t)
    }
}

/// A model whose output jets can be recorded on a tape for a batch of
/// points: row blocks per [`JetLayout`], one column per channel, holding
/// normalized Taylor coefficients along x and along t.
pub trait JetModel {
    fn n_channels(&self) -> usize;
    fn bind(&self, tape: &mut Tape) -> Vec<Var>;
    fn jet_forward(&self, tape: &mut Tape, params: &[Var], points: &[(f64, f64)], kx: usize, kt: usize) -> Var;
}

fn jet_inputs(points: &[(f64, f64)], layout: JetLayout) -> Array {
    let n = points.len();
    let mut a = Array::zeros(&[layout.rows(), 2]);
    for (i, &(x, t)) in points.iter().enumerate() {
        a.set(i, 0, x);
        a.set(i, 1, t);
        if layout.kx >= 1 {
            a.set(layout.x_block(1) + i, 0, 1.0);
        }
        if layout.kt >= 1 {
            a.set(layout.t_block(1) + i, 1, 1.0);
        }
    }
    debug_assert_eq!(a.rows(), n * layout.blocks());
    a
}

impl JetModel for MlpModel {
    fn n_channels(&self) -> usize {
        MlpModel::n_channels(self)
    }
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.bind(tape)
    }
    fn jet_forward(&self, tape: &mut Tape, params: &[Var], points: &[(f64, f64)], kx: usize, kt: usize) -> Var {
        let layout = JetLayout {
            n: points.len(),
            kx,
            kt,
        };
        let input = tape.constant(jet_inputs(points, layout));
        self.tape_forward(tape, params, input, layout)
    }
}

/// Any [`Field`] as a parameter-free [`JetModel`], differentiated
/// pointwise in Taylor mode.
pub struct FieldModel<F>(pub F);

impl<F: Field> JetModel for FieldModel<F> {
    fn n_channels(&self) -> usize {
        self.0.n_channels()
    }
    fn bind(&self, _tape: &mut Tape) -> Vec<Var> {
        Vec::new()
    }
    fn jet_forward(&self, tape: &mut Tape, _params: &[Var], points: &[(f64, f64)], kx: usize, kt: usize) -> Var {
        let layout = JetLayout {
            n: points.len(),
            kx,
            kt,
        };
        let c = self.0.n_channels();
        let order = kx.max(kt);
        let mut a = Array::zeros(&[layout.rows(), c]);
        for (i, &(x, t)) in points.iter().enumerate() {
            let out = self.0.eval(DiffScalar::var_x(x, order), DiffScalar::var_t(t, order));
            for (ch, v) in out.iter().enumerate() {
                a.set(i, ch, v.value());
                for k in 1..=kx {
                    a.set(layout.x_block(k) + i, ch, v.coeff(k, 0));
                }
                for k in 1..=kt {
                    a.set(layout.t_block(k) + i, ch, v.coeff(0, k));
                }
            }
        }
        tape.constant(a)
    }
}

/// Splits a jet batch into per-channel derivative handles for the point
/// rows `[offset, offset + len)` of each block.
fn channel_derivs(
    tape: &mut Tape,
    out: Var,
    layout: JetLayout,
    n_channels: usize,
    offset: usize,
    len: usize,
) -> Vec<ChannelDerivs<Var>> {
    (0..n_channels)
        .map(|ch| {
            let col = if n_channels == 1 {
                out
            } else {
                tape.slice_cols(out, ch, 1)
            };
            let u = tape.slice_rows(col, offset, len);
            let mut ux = Vec::with_capacity(layout.kx);
            for k in 1..=layout.kx {
                let s = tape.slice_rows(col, layout.x_block(k) + offset, len);
                ux.push(if k == 1 { s } else { tape.scale(s, factorial(k)) });
            }
            let mut ut = Vec::with_capacity(layout.kt);
            for k in 1..=layout.kt {
                let s = tape.slice_rows(col, layout.t_block(k) + offset, len);
                ut.push(if k == 1 { s } else { tape.scale(s, factorial(k)) });
            }
            ChannelDerivs { u, ux, ut }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub residual: f64,
    pub ic: f64,
    pub bc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            residual: 1.0,
            ic: 1.0,
            bc: 1.0,
        }
    }
}

/// Unweighted loss terms and their weighted sum.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnLossReport {
    pub epoch: usize,
    pub total: f64,
    pub residual_term: f64,
    pub ic_term: f64,
    pub bc_term: f64,
}

/// Tape handles of an assembled loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub residual: Var,
    pub ic: Var,
    pub bc: Var,
}

fn sum_vars(tape: &mut Tape, terms: &[Var]) -> Var {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t);
    }
    acc
}

/// Records the physics-informed loss of `model` on `tape`.
pub fn assemble_loss<M: JetModel>(
    tape: &mut Tape,
    params: &[Var],
    model: &M,
    spec: &PdeSpec,
    colloc: &CollocationSet,
    weights: LossWeights,
) -> Result<LossVars> {
    let c = spec.n_channels;
    if model.n_channels() != c {
        return Err(Error::Dimension(format!(
            "model has {} output channels, {} needs {c}",
            model.n_channels(),
            spec.name()
        )));
    }

    // residual
    let (kx, kt) = spec.residual_orders();
    let pts = &colloc.residual_points;
    let out = model.jet_forward(tape, params, pts, kx, kt);
    let layout = JetLayout { n: pts.len(), kx, kt };
    let d = channel_derivs(tape, out, layout, c, 0, pts.len());
    let source = spec.has_source().then(|| {
        let f: Vec<f64> = pts.iter().map(|&(x, t)| spec.source(x, t)).collect();
        tape.constant(Array::from_vec(vec![pts.len(), 1], f).expect("source shape"))
    });
    let r = spec.residual(tape, &d, source.as_ref());
    let r_terms: Vec<Var> = r.iter().map(|&v| tape.mean_square(v)).collect();
    let residual = sum_vars(tape, &r_terms);

    // initial
    let kt0 = spec.initial_order();
    let ic_pts: Vec<(f64, f64)> = colloc.ic_points.iter().map(|&x| (x, 0.0)).collect();
    let out = model.jet_forward(tape, params, &ic_pts, 0, kt0);
    let layout = JetLayout {
        n: ic_pts.len(),
        kx: 0,
        kt: kt0,
    };
    let d = channel_derivs(tape, out, layout, c, 0, ic_pts.len());
    let mut ic_terms = Vec::new();
    for term in &spec.ic_terms {
        let v = if term.t_order == 0 {
            d[term.channel].u
        } else {
            d[term.channel].ut[term.t_order - 1]
        };
        let target: Vec<f64> = colloc.ic_points.iter().map(|&x| (term.target)(x)).collect();
        let target = tape.constant(Array::from_vec(vec![target.len(), 1], target).expect("ic shape"));
        let diff = tape.sub(v, target);
        ic_terms.push(tape.mean_square(diff));
    }
    let ic = sum_vars(tape, &ic_terms);

    // boundary
    let (x0, x1) = colloc.x_bounds;
    let kb = spec.boundary_order();
    let nl = colloc.bc_left.len();
    let bc_pts: Vec<(f64, f64)> = colloc
        .bc_left
        .iter()
        .map(|&t| (x0, t))
        .chain(colloc.bc_right.iter().map(|&t| (x1, t)))
        .collect();
    let out = model.jet_forward(tape, params, &bc_pts, kb, 0);
    let layout = JetLayout {
        n: bc_pts.len(),
        kx: kb,
        kt: 0,
    };
    let mut bc_terms = Vec::new();
    match spec.bc_kind {
        BcKind::Dirichlet => {
            for ch in channel_derivs(tape, out, layout, c, 0, bc_pts.len()) {
                bc_terms.push(tape.mean_square(ch.u));
            }
        }
        BcKind::SimplySupported => {
            for ch in channel_derivs(tape, out, layout, c, 0, bc_pts.len()) {
                bc_terms.push(tape.mean_square(ch.u));
                bc_terms.push(tape.mean_square(ch.ux[1]));
            }
        }
        BcKind::Periodic => {
            if colloc.bc_right.len() != nl {
                return Err(Error::argument("periodic conditions need paired boundary times"));
            }
            let left = channel_derivs(tape, out, layout, c, 0, nl);
            let right = channel_derivs(tape, out, layout, c, nl, nl);
            for (l, r) in left.iter().zip(&right) {
                let gap = tape.sub(l.u, r.u);
                bc_terms.push(tape.mean_square(gap));
                let gap = tape.sub(l.ux[0], r.ux[0]);
                bc_terms.push(tape.mean_square(gap));
            }
        }
    }
    let bc = sum_vars(tape, &bc_terms);

    for (name, v) in [("residual", residual), ("initial", ic), ("boundary", bc)] {
        let value = tape.scalar(v);
        if !value.is_finite() {
            return Err(Error::numeric(format!("{name} loss term"), value));
        }
    }
    let wr = tape.scale(residual, weights.residual);
    let wi = tape.scale(ic, weights.ic);
    let wb = tape.scale(bc, weights.bc);
    let total = sum_vars(tape, &[wr, wi, wb]);
    Ok(LossVars {
        total,
        residual,
        ic,
        bc,
    })
}

fn report(tape: &Tape, vars: &LossVars, epoch: usize) -> PinnLossReport {
    PinnLossReport {
        epoch,
        total: tape.scalar(vars.total),
        residual_term: tape.scalar(vars.residual),
        ic_term: tape.scalar(vars.ic),
        bc_term: tape.scalar(vars.bc),
    }
}

/// Loss of `model` with unit weights.
pub fn pinn_loss<M: JetModel>(model: &M, spec: &PdeSpec, colloc: &CollocationSet) -> Result<PinnLossReport> {
    let mut tape = Tape::new();
    let params = model.bind(&mut tape);
    let vars = assemble_loss(&mut tape, &params, model, spec, colloc, LossWeights::default())?;
    Ok(report(&tape, &vars, 0))
}

/// Loss and its gradient with respect to every parameter array.
pub fn loss_and_grad(
    model: &MlpModel,
    spec: &PdeSpec,
    colloc: &CollocationSet,
    weights: LossWeights,
) -> Result<(PinnLossReport, Vec<Array>)> {
    let mut tape = Tape::new();
    let params = model.params.bind(&mut tape);
    let vars = assemble_loss(&mut tape, &params, model, spec, colloc, weights)?;
    let grads = tape.gradients(vars.total)?;
    Ok((report(&tape, &vars, 0), grads.into_vec()))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerPhase {
    Adam { lr: f64, epochs: usize },
    Lbfgs { epochs: usize },
}

impl OptimizerPhase {
    pub fn epochs(&self) -> usize {
        match *self {
            OptimizerPhase::Adam { epochs, .. } | OptimizerPhase::Lbfgs { epochs } => epochs,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PinnTrainConfig {
    pub phases: Vec<OptimizerPhase>,
    #[serde(default)]
    pub weights: LossWeights,
    /// Stop when the total loss changes by less than 1e-6 (relative) over
    /// 200 epochs.
    #[serde(default)]
    pub plateau_stop: bool,
}

impl PinnTrainConfig {
    pub fn default_for(benchmark: Benchmark) -> Self {
        let phases = match benchmark {
            Benchmark::AllenCahn | Benchmark::Schrodinger => vec![
                OptimizerPhase::Adam {
                    lr: 1e-3,
                    epochs: 15_000,
                },
                OptimizerPhase::Lbfgs { epochs: 2_000 },
            ],
            _ => vec![OptimizerPhase::Lbfgs { epochs: 3_500 }],
        };
        PinnTrainConfig {
            phases,
            weights: LossWeights::default(),
            plateau_stop: false,
        }
    }

    pub fn total_epochs(&self) -> usize {
        self.phases.iter().map(OptimizerPhase::epochs).sum()
    }
}

/// Default hidden widths per benchmark.
pub fn default_hidden(benchmark: Benchmark) -> Vec<usize> {
    match benchmark {
        Benchmark::Schrodinger => vec![100; 4],
        _ => DEFAULT_HIDDEN.to_vec(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PinnTrainOutcome {
    /// One entry per completed epoch.
    pub history: Vec<PinnLossReport>,
    /// L-BFGS iterations that fell back to steepest descent.
    pub fallback_steps: usize,
}

const PLATEAU_WINDOW: usize = 200;
const PLATEAU_REL: f64 = 1e-6;

fn plateaued(history: &[PinnLossReport]) -> bool {
    if history.len() <= PLATEAU_WINDOW {
        return false;
    }
    let now = history[history.len() - 1].total;
    let then = history[history.len() - 1 - PLATEAU_WINDOW].total;
    (then - now).abs() <= PLATEAU_REL * then.abs()
}

/// Runs the configured optimizer phases in order. Adam epochs record the
/// loss at which the gradient was taken; L-BFGS epochs record the loss at
/// the accepted point.
pub fn train_pinn(
    model: &mut MlpModel,
    spec: &PdeSpec,
    colloc: &CollocationSet,
    cfg: &PinnTrainConfig,
) -> Result<PinnTrainOutcome> {
    let mut history = Vec::with_capacity(cfg.total_epochs());
    let mut fallback_steps = 0;
    'phases: for phase in &cfg.phases {
        match *phase {
            OptimizerPhase::Adam { lr, epochs } => {
                let mut adam = Adam::new(AdamConfig::with_lr(lr), model.params.arrays());
                for _ in 0..epochs {
                    let (mut rep, grads) = loss_and_grad(model, spec, colloc, cfg.weights)?;
                    rep.epoch = history.len();
                    adam.step(model.params.arrays_mut(), &grads)?;
                    history.push(rep);
                    if cfg.plateau_stop && plateaued(&history) {
                        break 'phases;
                    }
                }
            }
            OptimizerPhase::Lbfgs { epochs } => {
                let mut opt = Lbfgs::new(LbfgsConfig::default());
                let mut x = model.params.flatten();
                let mut scratch = model.clone();
                let mut evaluated: Vec<PinnLossReport> = Vec::new();
                for _ in 0..epochs {
                    evaluated.clear();
                    let mut obj = |p: &[f64]| -> Result<(f64, Vec<f64>)> {
                        scratch.params.assign_flat(p)?;
                        let (rep, grads) = loss_and_grad(&scratch, spec, colloc, cfg.weights)?;
                        evaluated.push(rep);
                        Ok((rep.total, flatten_grads(&grads)))
                    };
                    let step = opt.step(&mut x, &mut obj)?;
                    if step.fallback {
                        fallback_steps += 1;
                        warn!("L-BFGS line search failed at epoch {}; steepest-descent fallback", history.len());
                    }
                    let mut rep = evaluated
                        .iter()
                        .rev()
                        .find(|r| r.total.to_bits() == step.loss.to_bits())
                        .copied()
                        .unwrap_or_else(|| {
                            history.last().copied().unwrap_or(PinnLossReport {
                                epoch: 0,
                                total: step.loss,
                                residual_term: f64::NAN,
                                ic_term: f64::NAN,
                                bc_term: f64::NAN,
                            })
                        });
                    rep.epoch = history.len();
                    history.push(rep);
                    if cfg.plateau_stop && plateaued(&history) {
                        model.params.assign_flat(&x)?;
                        break 'phases;
                    }
                }
                model.params.assign_flat(&x)?;
            }
        }
        if let Some(last) = history.last() {
            debug!("phase {phase:?} done, loss {:.3e}", last.total);
        }
    }
    Ok(PinnTrainOutcome {
        history,
        fallback_steps,
    })
}

/// Evaluates `field` on `times × xs`.
pub fn infer_at<F: Field>(field: &F, times: &[f64], xs: &[f64]) -> Result<GridSolution> {
    let c = field.n_channels();
    let k_x = xs.len();
    let mut values = Array::zeros(&[times.len(), c * k_x]);
    for (n, &t) in times.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            let out: Vec<f64> = field.eval(x, t);
            for (ch, &v) in out.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::numeric(
                        format!("inference at time level {n}, point {i}, channel {ch}"),
                        v,
                    ));
                }
                values.set(n, ch * k_x + i, v);
            }
        }
    }
    GridSolution::new(times.to_vec(), xs.to_vec(), c, values)
}

/// Uniform `k_t × k_x` grid over `[window.0, window.1] × [x_min, x_max]`,
/// endpoints included.
pub fn infer_grid<F: Field>(
    field: &F,
    domain: &DomainSpec,
    k_t: usize,
    k_x: usize,
    window: (f64, f64),
) -> Result<GridSolution> {
    if k_t < 2 || k_x < 2 {
        return Err(Error::argument(format!("grid needs k_t, k_x ≥ 2, got {k_t} × {k_x}")));
    }
    let times = uniform_points(window.0, window.1, k_t);
    let xs = uniform_points(domain.x_min, domain.x_max, k_x);
    infer_at(field, &times, &xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{benchmark_by_name, sample_collocation, AnalyticField, CollocationCounts};
    use proptest::prelude::*;
    use rand::seq::SliceRandom;

    #[test]
    fn zero_model_outputs_zero() {
        let m = MlpModel::zeros(&[2, 20, 20, 20, 20, 1]).unwrap();
        assert_eq!(mlp_forward(&m, 0.3, -0.7), vec![0.0]);
        assert_eq!(m.params.num_scalars(), MlpModel::expected_param_count(&m.widths));
        assert_eq!(m.params.num_scalars(), 3 * 20 + 3 * 420 + 21);
    }

    #[test]
    fn identity_layer_sums_inputs() {
        let mut m = MlpModel::zeros(&[2, 1]).unwrap();
        m.activation = Activation::Identity;
        m.params.get_mut("W0").data_mut().copy_from_slice(&[1.0, 1.0]);
        assert_eq!(mlp_forward(&m, 0.25, 0.5), vec![0.75]);
    }

    #[test]
    fn input_derivative_matches_finite_difference() {
        let m = MlpModel::new(&[2, 20, 20, 20, 20, 1], 7).unwrap();
        let (x, t, h) = (0.3, 0.4, 1e-5);
        let d = mlp_forward(&m, DiffScalar::var_x(x, 1), DiffScalar::constant_with_order(t, 1))[0].derivative(1, 0);
        let fd = (mlp_forward(&m, x + h, t)[0] - mlp_forward(&m, x - h, t)[0]) / (2.0 * h);
        assert!(((d - fd) / fd).abs() < 1e-5, "{d} vs {fd}");
    }

    #[test]
    fn tape_jets_match_pointwise_jets() {
        let m = MlpModel::new(&[2, 8, 8, 2], 3).unwrap();
        let pts = [(0.1, 0.2), (-0.4, 0.7), (0.9, 0.05)];
        let mut tape = Tape::new();
        let p = JetModel::bind(&m, &mut tape);
        let out = m.jet_forward(&mut tape, &p, &pts, 4, 2);
        let field = FieldModel(m.clone());
        let reference = field.jet_forward(&mut tape, &[], &pts, 4, 2);
        let (a, b) = (tape.value(out), tape.value(reference));
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-12 * (1.0 + v.abs()), "{u} vs {v}");
        }
    }

    #[test]
    fn beam_analytic_field_has_tiny_loss() {
        let (spec, d) = benchmark_by_name("euler_bernoulli").unwrap();
        let colloc = sample_collocation(&spec, &d, CollocationCounts::from_totals(400, 200), 5).unwrap();
        let rep = pinn_loss(&FieldModel(AnalyticField(&spec)), &spec, &colloc).unwrap();
        assert!(rep.total <= 1e-10, "{rep:?}");
    }

    #[test]
    fn zero_model_on_burgers() {
        let (spec, d) = benchmark_by_name("burgers").unwrap();
        let colloc = sample_collocation(&spec, &d, CollocationCounts::from_totals(1000, 600), 2).unwrap();
        let m = MlpModel::zeros(&[2, 20, 20, 20, 20, 1]).unwrap();
        let rep = pinn_loss(&m, &spec, &colloc).unwrap();
        let quad: f64 = colloc
            .ic_points
            .iter()
            .map(|&x| (std::f64::consts::PI * x).sin().powi(2))
            .sum::<f64>()
            / colloc.ic_points.len() as f64;
        assert_eq!(rep.residual_term, 0.0);
        assert_eq!(rep.bc_term, 0.0);
        assert!((rep.ic_term - quad).abs() < 1e-14);
        assert!((rep.ic_term - 0.5).abs() < 0.06);
        assert!((rep.total - (rep.residual_term + rep.ic_term + rep.bc_term)).abs() < 1e-12);
    }

    #[test]
    fn adam_decreases_loss_on_small_set() {
        let (spec, d) = benchmark_by_name("burgers").unwrap();
        let colloc = sample_collocation(&spec, &d, CollocationCounts::from_totals(100, 60), 4).unwrap();
        let mut m = MlpModel::new(&[2, 20, 20, 20, 20, 1], 1).unwrap();
        let cfg = PinnTrainConfig {
            phases: vec![OptimizerPhase::Adam { lr: 1e-3, epochs: 51 }],
            weights: LossWeights::default(),
            plateau_stop: false,
        };
        let out = train_pinn(&mut m, &spec, &colloc, &cfg).unwrap();
        let drops = out.history.windows(2).filter(|w| w[1].total < w[0].total).count();
        assert!(drops >= 45, "{drops} decreasing steps of 50");
    }

    #[test]
    fn training_is_deterministic_and_zero_epochs_is_noop() {
        let (spec, d) = benchmark_by_name("allen_cahn").unwrap();
        let colloc = sample_collocation(&spec, &d, CollocationCounts::from_totals(60, 40), 8).unwrap();
        let cfg = PinnTrainConfig {
            phases: vec![
                OptimizerPhase::Adam { lr: 1e-3, epochs: 3 },
                OptimizerPhase::Lbfgs { epochs: 3 },
            ],
            weights: LossWeights::default(),
            plateau_stop: false,
        };
        let m0 = MlpModel::new(&[2, 10, 10, 1], 9).unwrap();
        let (mut a, mut b) = (m0.clone(), m0.clone());
        let ha = train_pinn(&mut a, &spec, &colloc, &cfg).unwrap();
        let hb = train_pinn(&mut b, &spec, &colloc, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(ha.history.len(), 6);
        assert_eq!(a, b);

        let mut c = m0.clone();
        let none = PinnTrainConfig {
            phases: vec![OptimizerPhase::Lbfgs { epochs: 0 }],
            ..cfg
        };
        assert!(train_pinn(&mut c, &spec, &colloc, &none).unwrap().history.is_empty());
        assert_eq!(c, m0);
    }

    fn fd_check(bench: &str, widths: &[usize]) {
        let (spec, d) = benchmark_by_name(bench).unwrap();
        let colloc = sample_collocation(&spec, &d, CollocationCounts::from_totals(20, 12), 6).unwrap();
        let m = MlpModel::new(widths, 2).unwrap();
        let (_, grads) = loss_and_grad(&m, &spec, &colloc, LossWeights::default()).unwrap();
        let g = flatten_grads(&grads);
        let x0 = m.params.flatten();
        let mut probe = m.clone();
        let mut f = |x: &[f64]| {
            probe.params.assign_flat(x).unwrap();
            pinn_loss(&probe, &spec, &colloc).unwrap().total
        };
        for i in (0..x0.len()).step_by(7) {
            let h = 1e-5 * (1.0 + x0[i].abs());
            let mut xp = x0.clone();
            xp[i] += h;
            let mut xm = x0.clone();
            xm[i] -= h;
            let fd = (f(&xp) - f(&xm)) / (2.0 * h);
            let scale = fd.abs().max(g[i].abs()).max(1e-6);
            assert!((fd - g[i]).abs() / scale < 1e-4, "{bench} param {i}: {} vs {fd}", g[i]);
        }
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        fd_check("burgers", &[2, 6, 6, 1]);
        fd_check("schrodinger", &[2, 6, 6, 2]);
        fd_check("euler_bernoulli", &[2, 6, 6, 1]);
        fd_check("allen_cahn", &[2, 6, 1]);
    }

    #[test]
    fn grid_matches_direct_calls() {
        let (_, d) = benchmark_by_name("burgers").unwrap();
        let m = MlpModel::new(&[2, 20, 20, 20, 20, 1], 4).unwrap();
        let g = infer_grid(&m, &d, 80, 256, (0.0, d.t_train_end)).unwrap();
        assert_eq!((g.k_t(), g.k_x()), (80, 256));
        for &(n, i) in &[(0, 0), (17, 100), (79, 255)] {
            let direct = mlp_forward(&m, g.xs[i], g.times[n])[0];
            assert_eq!(g.value(n, 0, i).to_bits(), direct.to_bits());
        }
        assert_eq!(g.spacing(), d.t_train_end / 79.0);
        let z = infer_grid(&MlpModel::zeros(&[2, 4, 1]).unwrap(), &d, 5, 7, (0.0, 0.8)).unwrap();
        assert!(z.values.data().iter().all(|&v| v == 0.0));
        assert!(infer_grid(&m, &d, 1, 7, (0.0, 0.8)).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]
        #[test]
        fn loss_is_permutation_invariant(seed in 0u64..1000) {
            let (spec, d) = benchmark_by_name("burgers").unwrap();
            let colloc = sample_collocation(&spec, &d, CollocationCounts::from_totals(50, 30), seed).unwrap();
            let m = MlpModel::new(&[2, 8, 8, 1], seed).unwrap();
            let mut shuffled = colloc.clone();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            shuffled.residual_points.shuffle(&mut rng);
            shuffled.ic_points.shuffle(&mut rng);
            shuffled.bc_left.shuffle(&mut rng);
            let a = pinn_loss(&m, &spec, &colloc).unwrap();
            let b = pinn_loss(&m, &spec, &shuffled).unwrap();
            prop_assert!((a.total - b.total).abs() <= 1e-12 * (1.0 + a.total.abs()));
        }

        #[test]
        fn grid_spacing_is_window_over_intervals(k_t in 2usize..200, end in 0.1f64..3.0) {
            let (_, d) = benchmark_by_name("burgers").unwrap();
            let m = MlpModel::zeros(&[2, 1]).unwrap();
            let g = infer_grid(&m, &d, k_t, 3, (0.0, end)).unwrap();
            prop_assert!((g.spacing() - end / (k_t - 1) as f64).abs() <= 1e-15 * end);
        }
    }
}
