//! First- and quasi-second-order optimizers.

use crate::error::{Error, Result};
use crate::Array;
use std::collections::VecDeque;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moment estimates, one moment pair per
/// parameter array.
#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: Vec<Array>,
    v: Vec<Array>,
}

impl Adam {
    pub fn new(config: AdamConfig, params: &[Array]) -> Self {
        Adam {
            config,
            step: 0,
            m: params.iter().map(|p| Array::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Array::zeros(p.shape())).collect(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [Array], grads: &[Array]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Dimension(format!(
                "adam: {} params, {} grads, {} moments",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if g.shape() != params[i].shape() {
                return Err(Error::Dimension(format!(
                    "adam: gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    params[i].shape()
                )));
            }
            if let Some((j, v)) = g.first_non_finite() {
                return Err(Error::numeric(format!("gradient {i}[{j}]"), v));
            }
        }
        self.step += 1;
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for (((p, &g), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.data_mut())
                .zip(v.data_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mh = *m / bc1;
                let vh = *v / bc2;
                *p -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsConfig {
    pub history: usize,
    pub c1: f64,
    pub c2: f64,
    /// Function evaluations allowed per line search.
    pub max_evals: usize,
    /// Length of the normalized steepest-descent step taken when the line
    /// search fails.
    pub fallback_step: f64,
    pub curvature_eps: f64,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        LbfgsConfig {
            history: 50,
            c1: 1e-4,
            c2: 0.9,
            max_evals: 25,
            fallback_step: 1e-3,
            curvature_eps: 1e-10,
        }
    }
}

/// Outcome of one L-BFGS iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LbfgsStep {
    /// Loss at the accepted point.
    pub loss: f64,
    pub step_length: f64,
    pub evaluations: usize,
    pub fallback: bool,
}

/// Objective returning the loss and its gradient.
pub trait Objective {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl<F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>> Objective for F {
    fn eval(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        self(x)
    }
}

/// Limited-memory BFGS with a strong-Wolfe line search.
#[derive(Clone, Debug)]
pub struct Lbfgs {
    pub config: LbfgsConfig,
    s: VecDeque<Vec<f64>>,
    y: VecDeque<Vec<f64>>,
    rho: VecDeque<f64>,
    current: Option<(Vec<f64>, f64, Vec<f64>)>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(x: &[f64], a: f64, d: &[f64]) -> Vec<f64> {
    x.iter().zip(d).map(|(x, d)| x + a * d).collect()
}

struct Trial {
    a: f64,
    f: f64,
    g: Vec<f64>,
    dphi: f64,
}

/// Minimizer of the cubic interpolating `(a, fa, da)` and `(b, fb, db)`.
fn cubic_min(a: f64, fa: f64, da: f64, b: f64, fb: f64, db: f64) -> Option<f64> {
    let d1 = da + db - 3.0 * (fa - fb) / (a - b);
    let disc = d1 * d1 - da * db;
    if !(disc >= 0.0) {
        return None;
    }
    let d2 = (b - a).signum() * disc.sqrt();
    let m = b - (b - a) * (db + d2 - d1) / (db - da + 2.0 * d2);
    m.is_finite().then_some(m)
}

impl Lbfgs {
    pub fn new(config: LbfgsConfig) -> Self {
        Lbfgs {
            config,
            s: VecDeque::new(),
            y: VecDeque::new(),
            rho: VecDeque::new(),
            current: None,
        }
    }

    pub fn history_len(&self) -> usize {
        self.s.len()
    }

    pub fn reset(&mut self) {
        self.s.clear();
        self.y.clear();
        self.rho.clear();
    }

    fn direction(&self, g: &[f64]) -> Vec<f64> {
        let mut q = g.to_vec();
        let k = self.s.len();
        let mut alpha = vec![0.0; k];
        for i in (0..k).rev() {
            alpha[i] = self.rho[i] * dot(&self.s[i], &q);
            for (q, y) in q.iter_mut().zip(&self.y[i]) {
                *q -= alpha[i] * y;
            }
        }
        if k > 0 {
            let gamma = dot(&self.s[k - 1], &self.y[k - 1]) / dot(&self.y[k - 1], &self.y[k - 1]);
            q.iter_mut().for_each(|v| *v *= gamma);
        }
        for i in 0..k {
            let beta = self.rho[i] * dot(&self.y[i], &q);
            for (q, s) in q.iter_mut().zip(&self.s[i]) {
                *q += (alpha[i] - beta) * s;
            }
        }
        q.iter_mut().for_each(|v| *v = -*v);
        q
    }

    /// One iteration. `x` is updated in place; the loss and gradient at the
    /// accepted point are cached for the next call.
    pub fn step<O: Objective>(&mut self, x: &mut Vec<f64>, obj: &mut O) -> Result<LbfgsStep> {
        let mut evals = 0;
        let (f0, g0) = match self.current.take() {
            Some((cx, f, g)) if cx == *x => (f, g),
            _ => {
                evals += 1;
                let (f, g) = obj.eval(x)?;
                if !f.is_finite() {
                    return Err(Error::numeric("lbfgs initial loss", f));
                }
                (f, g)
            }
        };
        let gnorm = dot(&g0, &g0).sqrt();
        if gnorm == 0.0 {
            self.current = Some((x.clone(), f0, g0));
            return Ok(LbfgsStep {
                loss: f0,
                step_length: 0.0,
                evaluations: evals,
                fallback: false,
            });
        }
        let mut d = self.direction(&g0);
        let mut dphi0 = dot(&g0, &d);
        if !(dphi0 < 0.0) {
            self.reset();
            d = g0.iter().map(|v| -v).collect();
            dphi0 = -gnorm * gnorm;
        }
        let a0 = if self.s.is_empty() {
            (1.0 / gnorm).min(1.0)
        } else {
            1.0
        };

        let search = self.line_search(x, obj, f0, dphi0, &d, a0, &mut evals)?;
        let (trial, fallback) = match search {
            Some(t) => (t, false),
            None => {
                self.reset();
                let a = self.config.fallback_step / gnorm;
                let xn = axpy(x, -a, &g0);
                evals += 1;
                let (f, g) = obj.eval(&xn)?;
                if f.is_finite() && f <= f0 {
                    let t = Trial {
                        a,
                        f,
                        dphi: -dot(&g, &g0),
                        g,
                    };
                    d = g0.iter().map(|v| -v).collect();
                    (t, true)
                } else {
                    // stalled: keep the current point
                    self.current = Some((x.clone(), f0, g0));
                    return Ok(LbfgsStep {
                        loss: f0,
                        step_length: 0.0,
                        evaluations: evals,
                        fallback: true,
                    });
                }
            }
        };

        let xn = axpy(x, trial.a, &d);
        let s: Vec<f64> = xn.iter().zip(x.iter()).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = trial.g.iter().zip(&g0).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > self.config.curvature_eps {
            if self.s.len() == self.config.history {
                self.s.pop_front();
                self.y.pop_front();
                self.rho.pop_front();
            }
            self.s.push_back(s);
            self.y.push_back(y);
            self.rho.push_back(1.0 / sy);
        }
        *x = xn;
        self.current = Some((x.clone(), trial.f, trial.g));
        Ok(LbfgsStep {
            loss: trial.f,
            step_length: trial.a,
            evaluations: evals,
            fallback,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn line_search<O: Objective>(
        &self,
        x: &[f64],
        obj: &mut O,
        f0: f64,
        dphi0: f64,
        d: &[f64],
        a0: f64,
        evals: &mut usize,
    ) -> Result<Option<Trial>> {
        let LbfgsConfig {
            c1, c2, max_evals, ..
        } = self.config;
        let mut used = 0usize;
        let mut best: Option<Trial> = None;
        let mut probe = |a: f64, used: &mut usize| -> Result<Trial> {
            *used += 1;
            *evals += 1;
            let (f, g) = obj.eval(&axpy(x, a, d))?;
            let dphi = dot(&g, d);
            Ok(Trial { a, f, g, dphi })
        };
        let armijo = |t: &Trial| t.f.is_finite() && t.f <= f0 + c1 * t.a * dphi0;
        let curvature = |t: &Trial| t.dphi.abs() <= -c2 * dphi0;
        let keep_best = |best: &mut Option<Trial>, t: &Trial| {
            if armijo(t) && best.as_ref().map_or(true, |b| t.f < b.f) {
                *best = Some(Trial {
                    a: t.a,
                    f: t.f,
                    g: t.g.clone(),
                    dphi: t.dphi,
                });
            }
        };

        let mut prev = Trial {
            a: 0.0,
            f: f0,
            g: Vec::new(),
            dphi: dphi0,
        };
        let mut a = a0;
        let (mut lo, mut hi);
        loop {
            if used >= max_evals {
                return Ok(best);
            }
            let t = probe(a, &mut used)?;
            if !t.f.is_finite() || !t.dphi.is_finite() {
                // overshoot into a non-finite region: shrink toward prev
                a = prev.a + 0.5 * (a - prev.a);
                continue;
            }
            keep_best(&mut best, &t);
            if !armijo(&t) || (prev.a > 0.0 && t.f >= prev.f) {
                lo = prev;
                hi = t;
                break;
            }
            if curvature(&t) {
                return Ok(Some(t));
            }
            if t.dphi >= 0.0 {
                lo = t;
                hi = prev;
                break;
            }
            let next = cubic_min(prev.a, prev.f, prev.dphi, t.a, t.f, t.dphi)
                .filter(|&m| m > t.a * 1.1 && m < t.a * 10.0)
                .unwrap_or(t.a * 2.0);
            prev = t;
            a = next;
        }

        // zoom: lo satisfies Armijo and has the lowest value so far
        loop {
            if used >= max_evals {
                return Ok(best);
            }
            let (l, h) = (lo.a.min(hi.a), lo.a.max(hi.a));
            let width = h - l;
            if width <= 1e-16 * h.max(1e-300) {
                return Ok(best);
            }
            let cand = if hi.f.is_finite() && hi.dphi.is_finite() {
                cubic_min(lo.a, lo.f, lo.dphi, hi.a, hi.f, hi.dphi)
            } else {
                None
            };
            let aj = cand
                .filter(|&m| m > l + 0.1 * width && m < h - 0.1 * width)
                .unwrap_or(0.5 * (lo.a + hi.a));
            let t = probe(aj, &mut used)?;
            if !t.f.is_finite() || !t.dphi.is_finite() {
                hi = t;
                continue;
            }
            keep_best(&mut best, &t);
            if !armijo(&t) || t.f >= lo.f {
                hi = t;
            } else {
                if curvature(&t) {
                    return Ok(Some(t));
                }
                if t.dphi * (hi.a - lo.a) >= 0.0 {
                    hi = lo;
                }
                lo = t;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic<'a>(
        a: &'a [[f64; 5]; 5],
        b: &'a [f64; 5],
    ) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> + 'a {
        move |x: &[f64]| {
            let ax: Vec<f64> = (0..5).map(|i| dot(&a[i], x)).collect();
            let f = 0.5 * dot(x, &ax) - dot(b, x);
            let g = ax.iter().zip(b).map(|(p, q)| p - q).collect();
            Ok((f, g))
        }
    }

    #[test]
    fn lbfgs_solves_spd_quadratic() {
        // A = MᵀM + 5I for a fixed M, condition number ≈ 4.4
        let m = [
            [1.0, 2.0, 0.0, -1.0, 0.5],
            [0.0, 1.0, 3.0, 0.0, 1.0],
            [2.0, 0.0, 1.0, 1.0, 0.0],
            [0.5, -1.0, 0.0, 2.0, 1.0],
            [1.0, 1.0, 1.0, 1.0, 1.0],
        ];
        let mut a = [[0.0; 5]; 5];
        for i in 0..5 {
            for j in 0..5 {
                a[i][j] = (0..5).map(|k| m[k][i] * m[k][j]).sum::<f64>();
            }
            a[i][i] += 5.0;
        }
        let b = [1.0, -2.0, 0.5, 3.0, 0.0];
        let exact = solve5(a, b);
        let mut obj = quadratic(&a, &b);
        let mut x = vec![0.0; 5];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        for _ in 0..10 {
            opt.step(&mut x, &mut obj).unwrap();
        }
        for (p, q) in x.iter().zip(&exact) {
            assert!((p - q).abs() < 1e-8, "{x:?} vs {exact:?}");
        }
    }

    /// Gaussian elimination with partial pivoting.
    fn solve5(mut a: [[f64; 5]; 5], mut b: [f64; 5]) -> [f64; 5] {
        for c in 0..5 {
            let p = (c..5).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..5 {
                let f = a[r][c] / a[c][c];
                for k in c..5 {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = [0.0; 5];
        for r in (0..5).rev() {
            x[r] = (b[r] - (r + 1..5).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
        }
        x
    }

    #[test]
    fn lbfgs_rosenbrock() {
        let mut obj = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
            let (a, b) = (x[0], x[1]);
            let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((f, g))
        };
        let mut x = vec![-1.2, 1.0];
        let mut opt = Lbfgs::new(LbfgsConfig::default());
        let mut f = f64::INFINITY;
        for _ in 0..200 {
            f = opt.step(&mut x, &mut obj).unwrap().loss;
            if f < 1e-6 {
                break;
            }
        }
        assert!(f < 1e-6, "final loss {f}");
    }

    #[test]
    fn lbfgs_zero_gradient_is_noop() {
        let mut obj = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((1.0, vec![0.0, 0.0])) };
        let mut x = vec![0.3, -0.7];
        let step = Lbfgs::new(LbfgsConfig::default()).step(&mut x, &mut obj).unwrap();
        assert_eq!(x, vec![0.3, -0.7]);
        assert_eq!(step.step_length, 0.0);
    }

    #[test]
    fn lbfgs_non_finite_initial_loss() {
        let mut obj = |_: &[f64]| -> Result<(f64, Vec<f64>)> { Ok((f64::NAN, vec![1.0])) };
        let mut x = vec![0.0];
        let r = Lbfgs::new(LbfgsConfig::default()).step(&mut x, &mut obj);
        assert!(matches!(r, Err(Error::Numeric { .. })));
    }

    #[test]
    fn adam_first_step() {
        let mut p = vec![Array::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        adam.step(&mut p, &[Array::scalar(1.0)]).unwrap();
        assert!((p[0].data()[0] + 0.1).abs() < 1e-8);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut p = vec![Array::vector(vec![1.0, 2.0])];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..3 {
            adam.step(&mut p, &[Array::zeros(&[2])]).unwrap();
        }
        assert_eq!(p[0].data(), &[1.0, 2.0]);
    }

    #[test]
    fn adam_converges_on_parabola() {
        let mut p = vec![Array::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        for _ in 0..500 {
            let w = p[0].data()[0];
            adam.step(&mut p, &[Array::scalar(2.0 * (w - 3.0))]).unwrap();
        }
        assert!((p[0].data()[0] - 3.0).abs() < 1e-2);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut p = vec![Array::scalar(0.0)];
        let mut adam = Adam::new(AdamConfig::with_lr(0.1), &p);
        let r = adam.step(&mut p, &[Array::scalar(f64::INFINITY)]);
        assert!(matches!(r, Err(Error::Numeric { .. })));
        assert_eq!(p[0].data()[0], 0.0);
    }
}
