//! Benchmark problems: domains, residual operators, initial and boundary
//! conditions, collocation sampling and (where known) closed-form solutions.

use crate::error::{Error, Result};
use crate::jet::{DiffScalar, Scalar};
use crate::tape::Ops;
use crate::Array;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Default Burgers viscosity, `0.01/π`.
pub const BURGERS_NU: f64 = 0.01 / PI;
pub const ALLEN_CAHN_DIFFUSION: f64 = 1e-4;
pub const ALLEN_CAHN_REACTION: f64 = 5.0;

/// Spatial domain plus the training window `[0, t_train_end]` and the
/// extrapolation window `(t_train_end, t_test_end]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub t_train_end: f64,
    pub t_test_end: f64,
}

impl DomainSpec {
    pub fn new(x_min: f64, x_max: f64, t_test_end: f64) -> Result<Self> {
        let d = DomainSpec {
            x_min,
            x_max,
            t_train_end: 0.8 * t_test_end,
            t_test_end,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.x_min < self.x_max) {
            return Err(Error::argument("x_min must be below x_max"));
        }
        if !(0.0 < self.t_train_end && self.t_train_end < self.t_test_end) {
            return Err(Error::argument("need 0 < t_train_end < t_test_end"));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn contains_training(&self, x: f64, t: f64) -> bool {
        x >= self.x_min && x <= self.x_max && (0.0..=self.t_train_end).contains(&t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Benchmark {
    Burgers,
    AllenCahn,
    Schrodinger,
    EulerBernoulli,
    BurgersParametric,
}

impl Benchmark {
    pub const ALL: [Benchmark; 5] = [
        Benchmark::Burgers,
        Benchmark::AllenCahn,
        Benchmark::Schrodinger,
        Benchmark::EulerBernoulli,
        Benchmark::BurgersParametric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Benchmark::Burgers => "burgers",
            Benchmark::AllenCahn => "allen_cahn",
            Benchmark::Schrodinger => "schrodinger",
            Benchmark::EulerBernoulli => "euler_bernoulli",
            Benchmark::BurgersParametric => "burgers_parametric",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|b| b.name() == name)
            .ok_or_else(|| Error::argument(format!("unknown benchmark '{name}'")))
    }

    fn is_burgers(self) -> bool {
        matches!(self, Benchmark::Burgers | Benchmark::BurgersParametric)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BcKind {
    Dirichlet,
    Periodic,
    SimplySupported,
}

/// One initial condition: `∂ᵗ_order u_channel(x, 0) = target(x)`.
#[derive(Clone, Copy, Debug)]
pub struct IcTerm {
    pub channel: usize,
    pub t_order: usize,
    pub target: fn(f64) -> f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkOverrides {
    /// Burgers viscosity.
    pub nu: Option<f64>,
    /// End of the extrapolation window; the training window stays at 80%.
    pub t_test_end: Option<f64>,
}

#[derive(Clone, Debug)]
pub struct PdeSpec {
    pub benchmark: Benchmark,
    pub n_channels: usize,
    pub ic_terms: Vec<IcTerm>,
    pub bc_kind: BcKind,
    /// Viscosity for the Burgers family.
    pub nu: Option<f64>,
}

/// Derivatives of one output channel at a batch of points. `ux[k-1]` holds
/// `∂ᵏu/∂xᵏ`, `ut[k-1]` holds `∂ᵏu/∂tᵏ`.
#[derive(Clone, Debug)]
pub struct ChannelDerivs<V> {
    pub u: V,
    pub ux: Vec<V>,
    pub ut: Vec<V>,
}

fn burgers_ic(x: f64) -> f64 {
    -(PI * x).sin()
}

fn allen_cahn_ic(x: f64) -> f64 {
    x * x * (PI * x).cos() / x.cosh()
}

fn schrodinger_ic(x: f64) -> f64 {
    2.0 / x.cosh()
}

fn zero(_: f64) -> f64 {
    0.0
}

fn sin(x: f64) -> f64 {
    x.sin()
}

/// Returns the fully populated problem and its domain.
pub fn make_benchmark(
    benchmark: Benchmark,
    overrides: &BenchmarkOverrides,
) -> Result<(PdeSpec, DomainSpec)> {
    let (spec, x_min, x_max, t_end) = match benchmark {
        Benchmark::Burgers | Benchmark::BurgersParametric => {
            let nu = overrides.nu.unwrap_or(BURGERS_NU);
            if !(nu > 0.0) {
                return Err(Error::argument(format!("viscosity must be positive, got {nu}")));
            }
            let spec = PdeSpec {
                benchmark,
                n_channels: 1,
                ic_terms: vec![IcTerm {
                    channel: 0,
                    t_order: 0,
                    target: burgers_ic,
                }],
                bc_kind: BcKind::Dirichlet,
                nu: Some(nu),
            };
            (spec, -1.0, 1.0, 1.0)
        }
        Benchmark::AllenCahn => (
            PdeSpec {
                benchmark,
                n_channels: 1,
                ic_terms: vec![IcTerm {
                    channel: 0,
                    t_order: 0,
                    target: allen_cahn_ic,
                }],
                bc_kind: BcKind::Periodic,
                nu: None,
            },
            -1.0,
            1.0,
            1.0,
        ),
        Benchmark::Schrodinger => (
            PdeSpec {
                benchmark,
                n_channels: 2,
                ic_terms: vec![
                    IcTerm {
                        channel: 0,
                        t_order: 0,
                        target: schrodinger_ic,
                    },
                    IcTerm {
                        channel: 1,
                        t_order: 0,
                        target: zero,
                    },
                ],
                bc_kind: BcKind::Periodic,
                nu: None,
            },
            -5.0,
            5.0,
            PI / 2.0,
        ),
        Benchmark::EulerBernoulli => (
            PdeSpec {
                benchmark,
                n_channels: 1,
                ic_terms: vec![
                    IcTerm {
                        channel: 0,
                        t_order: 0,
                        target: sin,
                    },
                    IcTerm {
                        channel: 0,
                        t_order: 1,
                        target: zero,
                    },
                ],
                bc_kind: BcKind::SimplySupported,
                nu: None,
            },
            0.0,
            PI,
            1.0,
        ),
    };
    if overrides.nu.is_some() && !benchmark.is_burgers() {
        return Err(Error::argument(format!(
            "viscosity override does not apply to {}",
            benchmark.name()
        )));
    }
    let domain = DomainSpec::new(x_min, x_max, overrides.t_test_end.unwrap_or(t_end))?;
    Ok((spec, domain))
}

/// Convenience lookup by name with default overrides.
pub fn benchmark_by_name(name: &str) -> Result<(PdeSpec, DomainSpec)> {
    make_benchmark(Benchmark::from_name(name)?, &BenchmarkOverrides::default())
}

impl PdeSpec {
    pub fn name(&self) -> &'static str {
        self.benchmark.name()
    }

    /// Highest x and t derivative orders the residual needs.
    pub fn residual_orders(&self) -> (usize, usize) {
        match self.benchmark {
            Benchmark::EulerBernoulli => (4, 2),
            _ => (2, 1),
        }
    }

    /// x-derivative order the boundary terms need.
    pub fn boundary_order(&self) -> usize {
        match self.bc_kind {
            BcKind::Dirichlet => 0,
            BcKind::Periodic => 1,
            BcKind::SimplySupported => 2,
        }
    }

    /// t-derivative order the initial terms need.
    pub fn initial_order(&self) -> usize {
        self.ic_terms.iter().map(|t| t.t_order).max().unwrap_or(0)
    }

    pub fn source(&self, x: f64, t: f64) -> f64 {
        match self.benchmark {
            Benchmark::EulerBernoulli => (1.0 - 16.0 * PI * PI) * x.sin() * (4.0 * PI * t).cos(),
            _ => 0.0,
        }
    }

    pub fn has_source(&self) -> bool {
        self.benchmark == Benchmark::EulerBernoulli
    }

    pub fn has_analytic(&self) -> bool {
        self.benchmark == Benchmark::EulerBernoulli
    }

    /// Closed-form solution, when one exists.
    pub fn analytic<S: Scalar>(&self, x: S, t: S) -> Option<S> {
        match self.benchmark {
            Benchmark::EulerBernoulli => Some(x.sin() * t.scale(4.0 * PI).cos()),
            _ => None,
        }
    }

    /// Initial value of every channel at `x`.
    pub fn initial_profile(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.n_channels];
        for term in self.ic_terms.iter().filter(|t| t.t_order == 0) {
            out[term.channel] = (term.target)(x);
        }
        out
    }

    /// `𝒩(u) − f` per channel. `source` carries `f` at the same points and
    /// is ignored by benchmarks without a forcing term.
    pub fn residual<O: Ops>(
        &self,
        ops: &mut O,
        d: &[ChannelDerivs<O::V>],
        source: Option<&O::V>,
    ) -> Vec<O::V> {
        match self.benchmark {
            Benchmark::Burgers | Benchmark::BurgersParametric => {
                let nu = self.nu.unwrap_or(BURGERS_NU);
                let c = &d[0];
                let adv = ops.mul(&c.u, &c.ux[0]);
                let diff = ops.scale(&c.ux[1], nu);
                let r = ops.add(&c.ut[0], &adv);
                vec![ops.sub(&r, &diff)]
            }
            Benchmark::AllenCahn => {
                let c = &d[0];
                let diff = ops.scale(&c.ux[1], ALLEN_CAHN_DIFFUSION);
                let u2 = ops.mul(&c.u, &c.u);
                let u3 = ops.mul(&u2, &c.u);
                let cubic = ops.sub(&u3, &c.u);
                let reaction = ops.scale(&cubic, ALLEN_CAHN_REACTION);
                let r = ops.sub(&c.ut[0], &diff);
                vec![ops.add(&r, &reaction)]
            }
            Benchmark::Schrodinger => {
                // u = p + i q with u_t = i (0.5 u_xx + |u|² u)
                let (p, q) = (&d[0], &d[1]);
                let p2 = ops.mul(&p.u, &p.u);
                let q2 = ops.mul(&q.u, &q.u);
                let mag2 = ops.add(&p2, &q2);
                let mq = ops.mul(&mag2, &q.u);
                let mp = ops.mul(&mag2, &p.u);
                let half_qxx = ops.scale(&q.ux[1], 0.5);
                let half_pxx = ops.scale(&p.ux[1], 0.5);
                let re = ops.add(&p.ut[0], &half_qxx);
                let re = ops.add(&re, &mq);
                let im = ops.sub(&q.ut[0], &half_pxx);
                let im = ops.sub(&im, &mp);
                vec![re, im]
            }
            Benchmark::EulerBernoulli => {
                let c = &d[0];
                let r = ops.add(&c.ut[1], &c.ux[3]);
                match source {
                    Some(f) => vec![ops.sub(&r, f)],
                    None => vec![r],
                }
            }
        }
    }
}

/// Something that maps `(x, t)` to one value per channel and can be
/// evaluated on any [`Scalar`].
pub trait Field {
    fn n_channels(&self) -> usize;
    fn eval<S: Scalar>(&self, x: S, t: S) -> Vec<S>;
}

/// The closed-form solution of a spec as a [`Field`].
pub struct AnalyticField<'a>(pub &'a PdeSpec);

impl Field for AnalyticField<'_> {
    fn n_channels(&self) -> usize {
        1
    }
    fn eval<S: Scalar>(&self, x: S, t: S) -> Vec<S> {
        vec![self.0.analytic(x, t).expect("spec has no analytic solution")]
    }
}

/// Residual of `field` at one point, with derivatives taken by Taylor-mode
/// differentiation of the field itself.
pub fn residual_eval<F: Field>(spec: &PdeSpec, field: &F, x: f64, t: f64) -> Result<Vec<f64>> {
    let (kx, kt) = spec.residual_orders();
    let order = kx.max(kt);
    let out = field.eval(DiffScalar::var_x(x, order), DiffScalar::var_t(t, order));
    let mut derivs = Vec::with_capacity(out.len());
    for (ch, v) in out.iter().enumerate() {
        if !v.value().is_finite() {
            return Err(Error::numeric(format!("field channel {ch} at ({x}, {t})"), v.value()));
        }
        derivs.push(ChannelDerivs {
            u: Array::scalar(v.value()),
            ux: (1..=kx).map(|k| Array::scalar(v.derivative(k, 0))).collect(),
            ut: (1..=kt).map(|k| Array::scalar(v.derivative(0, k))).collect(),
        });
    }
    let source = Array::scalar(spec.source(x, t));
    let mut ops = crate::tape::Eager;
    let r = spec.residual(&mut ops, &derivs, Some(&source));
    Ok(r.into_iter().map(|a| a.data()[0]).collect())
}

/// Point counts for one collocation set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CollocationCounts {
    pub residual: usize,
    pub initial: usize,
    /// Points on each of the two spatial boundaries.
    pub boundary_each: usize,
}

impl CollocationCounts {
    /// Splits a combined initial+boundary budget half to the initial line
    /// and a quarter to each boundary.
    pub fn from_totals(residual: usize, initial_and_boundary: usize) -> Self {
        let initial = initial_and_boundary / 2;
        CollocationCounts {
            residual,
            initial,
            boundary_each: (initial_and_boundary - initial) / 2,
        }
    }

    pub fn default_for(benchmark: Benchmark) -> Self {
        match benchmark {
            Benchmark::EulerBernoulli => Self::from_totals(10_000, 6_000),
            Benchmark::AllenCahn | Benchmark::Schrodinger => Self::from_totals(2_000, 600),
            _ => Self::from_totals(1_000, 600),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CollocationSet {
    /// Spatial boundary locations `(x_min, x_max)`.
    pub x_bounds: (f64, f64),
    pub residual_points: Vec<(f64, f64)>,
    pub ic_points: Vec<f64>,
    /// Times on the left boundary `x = x_min`.
    pub bc_left: Vec<f64>,
    /// Times on the right boundary. Equal to `bc_left` for periodic
    /// problems, whose conditions compare the two ends at the same time.
    pub bc_right: Vec<f64>,
}

pub fn sample_collocation(
    spec: &PdeSpec,
    domain: &DomainSpec,
    counts: CollocationCounts,
    seed: u64,
) -> Result<CollocationSet> {
    if counts.residual == 0 || counts.initial == 0 || counts.boundary_each == 0 {
        return Err(Error::argument("collocation counts must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let residual_points = (0..counts.residual)
        .map(|_| {
            (
                rng.gen_range(domain.x_min..=domain.x_max),
                rng.gen_range(0.0..=domain.t_train_end),
            )
        })
        .collect();
    let ic_points = (0..counts.initial)
        .map(|_| rng.gen_range(domain.x_min..=domain.x_max))
        .collect();
    let mut draw_times = |n: usize| -> Vec<f64> {
        (0..n)
            .map(|_| rng.gen_range(0.0..=domain.t_train_end))
            .collect()
    };
    let bc_left = draw_times(counts.boundary_each);
    let bc_right = if spec.bc_kind == BcKind::Periodic {
        bc_left.clone()
    } else {
        draw_times(counts.boundary_each)
    };
    Ok(CollocationSet {
        x_bounds: (domain.x_min, domain.x_max),
        residual_points,
        ic_points,
        bc_left,
        bc_right,
    })
}
