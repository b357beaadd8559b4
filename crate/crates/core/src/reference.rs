//! Reference solutions on the full space-time grid.
//!
//! Burgers, Allen–Cahn and Schrödinger are integrated with Fourier
//! pseudo-spectral methods on a periodic grid whose size is a multiple of
//! `k_x − 1`, so every output point is a collocation point and no spatial
//! interpolation is needed. The beam is evaluated in closed form.

use crate::error::{Error, Result};
use crate::grid::{uniform_points, GridSolution};
use crate::pde::{make_benchmark, Benchmark, BenchmarkOverrides, DomainSpec, ALLEN_CAHN_DIFFUSION, ALLEN_CAHN_REACTION};
use crate::Array;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::fs;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverParams {
    /// Lower bound on the number of Fourier modes; rounded up to a multiple
    /// of `k_x − 1`.
    pub min_modes: usize,
    /// Upper bound on the internal step; the step used divides the output
    /// spacing exactly.
    pub dt_max: f64,
}

impl SolverParams {
    pub fn default_for(benchmark: Benchmark) -> Self {
        match benchmark {
            // the ν = 0.01/π front is a few thousandths wide
            Benchmark::Burgers | Benchmark::BurgersParametric => SolverParams {
                min_modes: 2048,
                dt_max: 1e-4,
            },
            // both initial profiles have a kink across the periodic seam
            Benchmark::AllenCahn => SolverParams {
                min_modes: 4096,
                dt_max: 1e-4,
            },
            Benchmark::Schrodinger => SolverParams {
                min_modes: 2048,
                dt_max: 1e-5,
            },
            Benchmark::EulerBernoulli => SolverParams {
                min_modes: 0,
                dt_max: f64::INFINITY,
            },
        }
    }
}

/// A uniform output grid `t_n = n · spacing`, `n = 0..levels`, over the
/// benchmark's spatial domain. The last level may overrun the nominal end
/// of the extrapolation window by less than one spacing.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRequest {
    pub benchmark: Benchmark,
    pub nu: Option<f64>,
    pub k_x: usize,
    pub levels: usize,
    pub spacing: f64,
    pub solver: SolverParams,
}

impl ReferenceRequest {
    /// Training levels `k_t` over `[0, t_train_end]` plus `horizon` more.
    pub fn for_windows(benchmark: Benchmark, nu: Option<f64>, k_x: usize, k_t: usize, horizon: usize) -> Result<Self> {
        if k_t < 2 {
            return Err(Error::argument(format!("k_t must be at least 2, got {k_t}")));
        }
        let (_, domain) = make_benchmark(benchmark, &BenchmarkOverrides { nu, t_test_end: None })?;
        Ok(ReferenceRequest {
            benchmark,
            nu,
            k_x,
            levels: k_t + horizon,
            spacing: domain.t_train_end / (k_t - 1) as f64,
            solver: SolverParams::default_for(benchmark),
        })
    }

    fn domain(&self) -> Result<DomainSpec> {
        let (_, domain) = make_benchmark(self.benchmark, &BenchmarkOverrides { nu: self.nu, t_test_end: None })?;
        if self.k_x < 2 || self.levels < 1 || !(self.spacing > 0.0) {
            return Err(Error::argument(format!(
                "degenerate grid request: k_x={}, levels={}, spacing={}",
                self.k_x, self.levels, self.spacing
            )));
        }
        let last = (self.levels - 1) as f64 * self.spacing;
        if last >= domain.t_test_end + self.spacing {
            return Err(Error::argument(format!(
                "requested times reach {last}, beyond the domain end {}",
                domain.t_test_end
            )));
        }
        if !(self.solver.dt_max > 0.0) {
            return Err(Error::argument("solver dt_max must be positive"));
        }
        Ok(domain)
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.levels).map(|n| n as f64 * self.spacing).collect()
    }

    /// Number of periodic collocation points actually used.
    pub fn modes(&self) -> usize {
        let base = self.k_x - 1;
        base * self.solver.min_modes.div_ceil(base).max(1)
    }

    /// Internal steps per output level.
    pub fn substeps(&self) -> usize {
        ((self.spacing / self.solver.dt_max) * (1.0 - 1e-12)).ceil().max(1.0) as usize
    }

    /// File-name-safe identifier of everything that changes the output.
    pub fn cache_key(&self) -> String {
        let nu = self.nu.map_or("default".to_string(), |v| format!("{:016x}", v.to_bits()));
        format!(
            "{}_nu{}_kx{}_n{}_h{:016x}_m{}_dt{:016x}",
            self.benchmark.name(),
            nu,
            self.k_x,
            self.levels,
            self.spacing.to_bits(),
            self.solver.min_modes,
            self.solver.dt_max.to_bits()
        )
    }
}

pub fn solve(req: &ReferenceRequest) -> Result<GridSolution> {
    match req.benchmark {
        Benchmark::Burgers | Benchmark::BurgersParametric => solve_burgers(req),
        Benchmark::AllenCahn => solve_allen_cahn(req),
        Benchmark::Schrodinger => solve_schrodinger(req),
        Benchmark::EulerBernoulli => solve_beam(req),
    }
}

/// Loads the grid from `cache_dir` when present, otherwise solves and
/// stores it there.
pub fn solve_cached(req: &ReferenceRequest, cache_dir: Option<&Path>) -> Result<GridSolution> {
    let Some(dir) = cache_dir else {
        return solve(req);
    };
    let path = cache_path(req, dir);
    if path.exists() {
        let grid = GridSolution::read_csv(BufReader::new(fs::File::open(&path)?))?;
        log::debug!("reference cache hit {}", path.display());
        return Ok(grid);
    }
    let grid = solve(req)?;
    fs::create_dir_all(dir)?;
    let tmp = path.with_extension("csv.tmp");
    grid.write_csv(BufWriter::new(fs::File::create(&tmp)?))?;
    fs::rename(&tmp, &path)?;
    Ok(grid)
}

pub fn cache_path(req: &ReferenceRequest, dir: &Path) -> PathBuf {
    dir.join(format!("reference_{}.csv", req.cache_key()))
}

/// Periodic Fourier machinery on `n` points over a period `length`.
struct Spectral {
    n: usize,
    forward: Arc<dyn Fft<f64>>,
    inverse: Arc<dyn Fft<f64>>,
    /// Angular wavenumbers; the unpaired Nyquist mode of an even grid is
    /// kept in `k2` but zeroed in `k`.
    k: Vec<f64>,
    k2: Vec<f64>,
}

impl Spectral {
    fn new(n: usize, length: f64) -> Self {
        let mut planner = FftPlanner::new();
        let mut k = Vec::with_capacity(n);
        let mut k2 = Vec::with_capacity(n);
        for j in 0..n {
            let m = if j <= n / 2 { j as f64 } else { j as f64 - n as f64 };
            let kk = 2.0 * PI * m / length;
            k2.push(kk * kk);
            k.push(if n % 2 == 0 && j == n / 2 { 0.0 } else { kk });
        }
        Spectral {
            n,
            forward: planner.plan_fft_forward(n),
            inverse: planner.plan_fft_inverse(n),
            k,
            k2,
        }
    }

    fn fft(&self, buf: &mut [Complex64]) {
        self.forward.process(buf);
    }

    fn ifft(&self, buf: &mut [Complex64]) {
        self.inverse.process(buf);
        let s = 1.0 / self.n as f64;
        buf.iter_mut().for_each(|v| *v *= s);
    }

    fn to_spectral(&self, u: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = u.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.fft(&mut buf);
        buf
    }

    fn to_physical(&self, v: &[Complex64]) -> Vec<f64> {
        let mut buf = v.to_vec();
        self.ifft(&mut buf);
        buf.into_iter().map(|c| c.re).collect()
    }

    /// `∂ₓu` of a real periodic sample.
    fn derivative(&self, u: &[f64]) -> Vec<f64> {
        let mut v = self.to_spectral(u);
        v.iter_mut().zip(&self.k).for_each(|(c, &k)| *c *= Complex64::new(0.0, k));
        self.to_physical(&v)
    }
}

/// Periodic collocation points `x_min + j·L/n` and the stride that maps
/// output points onto them.
fn collocation(domain: &DomainSpec, req: &ReferenceRequest) -> (Vec<f64>, usize) {
    let n = req.modes();
    let l = domain.length();
    let xs = (0..n).map(|j| domain.x_min + j as f64 * l / n as f64).collect();
    (xs, n / (req.k_x - 1))
}

fn sample_row(u: &[f64], stride: usize, k_x: usize, out: &mut [f64]) {
    let n = u.len();
    for (i, o) in out.iter_mut().take(k_x).enumerate() {
        *o = u[(i * stride) % n];
    }
}

fn grid_xs(domain: &DomainSpec, k_x: usize) -> Vec<f64> {
    uniform_points(domain.x_min, domain.x_max, k_x)
}

/// Viscous Burgers `u_t + u u_x = ν u_xx` by integrating-factor RK4.
///
/// `−sin(πx)` is odd and 2-periodic, and the periodic flow preserves both,
/// so `u(±1, t) = 0` holds without an explicit boundary treatment.
pub fn solve_burgers(req: &ReferenceRequest) -> Result<GridSolution> {
    let domain = req.domain()?;
    let (spec, _) = make_benchmark(req.benchmark, &BenchmarkOverrides { nu: req.nu, t_test_end: None })?;
    let nu = spec.nu.expect("burgers viscosity");
    let (xs, stride) = collocation(&domain, req);
    let sp = Spectral::new(xs.len(), domain.length());
    let u0: Vec<f64> = xs.iter().map(|&x| spec.initial_profile(x)[0]).collect();
    let sub = req.substeps();
    let dt = req.spacing / sub as f64;

    let e: Vec<f64> = sp.k2.iter().map(|k2| (-nu * k2 * dt / 2.0).exp()).collect();
    let e2: Vec<f64> = e.iter().map(|v| v * v).collect();
    let g: Vec<Complex64> = sp.k.iter().map(|&k| Complex64::new(0.0, -0.5 * k * dt)).collect();
    let mut scratch = vec![Complex64::new(0.0, 0.0); sp.n];
    // dt · 𝒩(v) with 𝒩(v) = −(ik/2)·F[(F⁻¹v)²]
    let mut nonlin = |v: &[Complex64], out: &mut Vec<Complex64>| {
        scratch.copy_from_slice(v);
        sp.ifft(&mut scratch);
        scratch.iter_mut().for_each(|c| *c = Complex64::new(c.re * c.re, 0.0));
        sp.fft(&mut scratch);
        out.clear();
        out.extend(scratch.iter().zip(&g).map(|(s, g)| s * g));
    };

    let mut values = Array::zeros(&[req.levels, req.k_x]);
    sample_row(&u0, stride, req.k_x, values.data_mut());
    let mut v = sp.to_spectral(&u0);
    let (mut a, mut b, mut c, mut d) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut tmp = vec![Complex64::new(0.0, 0.0); sp.n];
    for level in 1..req.levels {
        for _ in 0..sub {
            nonlin(&v, &mut a);
            for j in 0..sp.n {
                tmp[j] = e[j] * (v[j] + a[j] / 2.0);
            }
            nonlin(&tmp, &mut b);
            for j in 0..sp.n {
                tmp[j] = e[j] * v[j] + b[j] / 2.0;
            }
            nonlin(&tmp, &mut c);
            for j in 0..sp.n {
                tmp[j] = e2[j] * v[j] + e[j] * c[j];
            }
            nonlin(&tmp, &mut d);
            for j in 0..sp.n {
                v[j] = e2[j] * v[j] + (e2[j] * a[j] + 2.0 * e[j] * (b[j] + c[j]) + d[j]) / 6.0;
            }
        }
        let u = sp.to_physical(&v);
        check_finite(&u, "burgers", level)?;
        sample_row(&u, stride, req.k_x, &mut values.data_mut()[level * req.k_x..]);
    }
    GridSolution::new(req.times(), grid_xs(&domain, req.k_x), 1, values)
}

fn check_finite(u: &[f64], what: &str, level: usize) -> Result<()> {
    match u.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::numeric(format!("{what} reference at level {level}, point {i}"), u[i])),
        None => Ok(()),
    }
}

/// ETDRK4 coefficients `(Q, f1, f2, f3)` for the diagonal linear part `lin`
/// via contour averages, which avoids cancellation for small `dt·L`.
fn etdrk4_coefficients(lin: &[f64], dt: f64) -> [Vec<f64>; 4] {
    const M: usize = 32;
    let roots: Vec<Complex64> = (1..=M)
        .map(|j| Complex64::from_polar(1.0, PI * (j as f64 - 0.5) / M as f64))
        .collect();
    let mut out = [vec![], vec![], vec![], vec![]];
    for &l in lin {
        let mut acc = [Complex64::new(0.0, 0.0); 4];
        for r in &roots {
            let z = l * dt + r;
            let ez = z.exp();
            let z3 = z * z * z;
            acc[0] += ((z / 2.0).exp() - 1.0) / z;
            acc[1] += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
            acc[2] += (2.0 + z + ez * (z - 2.0)) / z3;
            acc[3] += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
        }
        for (o, a) in out.iter_mut().zip(acc) {
            o.push(dt * a.re / M as f64);
        }
    }
    out
}

/// Allen–Cahn `u_t = d u_xx − r(u³ − u)` by Fourier ETDRK4 with the
/// linear part `−d k² + r` treated exactly.
pub fn solve_allen_cahn(req: &ReferenceRequest) -> Result<GridSolution> {
    let domain = req.domain()?;
    let (spec, _) = make_benchmark(req.benchmark, &BenchmarkOverrides::default())?;
    let (xs, stride) = collocation(&domain, req);
    let sp = Spectral::new(xs.len(), domain.length());
    let u0: Vec<f64> = xs.iter().map(|&x| spec.initial_profile(x)[0]).collect();
    let sub = req.substeps();
    let dt = req.spacing / sub as f64;

    let lin: Vec<f64> = sp.k2.iter().map(|k2| -ALLEN_CAHN_DIFFUSION * k2 + ALLEN_CAHN_REACTION).collect();
    let e: Vec<f64> = lin.iter().map(|l| (l * dt).exp()).collect();
    let e2: Vec<f64> = lin.iter().map(|l| (l * dt / 2.0).exp()).collect();
    let [q, f1, f2, f3] = etdrk4_coefficients(&lin, dt);
    let mut scratch = vec![Complex64::new(0.0, 0.0); sp.n];
    let mut nonlin = |v: &[Complex64], out: &mut Vec<Complex64>| {
        scratch.copy_from_slice(v);
        sp.ifft(&mut scratch);
        scratch
            .iter_mut()
            .for_each(|c| *c = Complex64::new(-ALLEN_CAHN_REACTION * c.re * c.re * c.re, 0.0));
        sp.fft(&mut scratch);
        out.clear();
        out.extend_from_slice(&scratch);
    };

    let mut values = Array::zeros(&[req.levels, req.k_x]);
    sample_row(&u0, stride, req.k_x, values.data_mut());
    let mut v = sp.to_spectral(&u0);
    let n = sp.n;
    let (mut nv, mut na, mut nb, mut nc) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut a = vec![Complex64::new(0.0, 0.0); n];
    let mut b = a.clone();
    let mut c = a.clone();
    for level in 1..req.levels {
        for _ in 0..sub {
            nonlin(&v, &mut nv);
            for j in 0..n {
                a[j] = e2[j] * v[j] + q[j] * nv[j];
            }
            nonlin(&a, &mut na);
            for j in 0..n {
                b[j] = e2[j] * v[j] + q[j] * na[j];
            }
            nonlin(&b, &mut nb);
            for j in 0..n {
                c[j] = e2[j] * a[j] + q[j] * (2.0 * nb[j] - nv[j]);
            }
            nonlin(&c, &mut nc);
            for j in 0..n {
                v[j] = e[j] * v[j] + f1[j] * nv[j] + 2.0 * f2[j] * (na[j] + nb[j]) + f3[j] * nc[j];
            }
        }
        let u = sp.to_physical(&v);
        check_finite(&u, "allen-cahn", level)?;
        sample_row(&u, stride, req.k_x, &mut values.data_mut()[level * req.k_x..]);
    }
    GridSolution::new(req.times(), grid_xs(&domain, req.k_x), 1, values)
}

/// Focusing NLS `i u_t + ½u_xx + |u|²u = 0` by Strang split-step Fourier.
/// Channels are `(Re u, Im u)`.
pub fn solve_schrodinger(req: &ReferenceRequest) -> Result<GridSolution> {
    let domain = req.domain()?;
    let (spec, _) = make_benchmark(req.benchmark, &BenchmarkOverrides::default())?;
    let (xs, stride) = collocation(&domain, req);
    let sp = Spectral::new(xs.len(), domain.length());
    let sub = req.substeps();
    let dt = req.spacing / sub as f64;
    let kx = req.k_x;

    let mut u: Vec<Complex64> = xs
        .iter()
        .map(|&x| {
            let p = spec.initial_profile(x);
            Complex64::new(p[0], p[1])
        })
        .collect();
    let linear: Vec<Complex64> = sp.k2.iter().map(|k2| Complex64::from_polar(1.0, -0.5 * k2 * dt)).collect();
    let half_nonlinear = |u: &mut [Complex64]| {
        // |u| is invariant under this sub-flow, so the phase rotation is exact
        u.iter_mut().for_each(|c| *c *= Complex64::from_polar(1.0, c.norm_sqr() * dt / 2.0));
    };
    let store = |u: &[Complex64], row: &mut [f64]| {
        let n = u.len();
        for i in 0..kx {
            let c = u[(i * stride) % n];
            row[i] = c.re;
            row[kx + i] = c.im;
        }
    };

    let mut values = Array::zeros(&[req.levels, 2 * kx]);
    store(&u, values.data_mut());
    for level in 1..req.levels {
        for _ in 0..sub {
            half_nonlinear(&mut u);
            sp.fft(&mut u);
            u.iter_mut().zip(&linear).for_each(|(c, l)| *c *= l);
            sp.ifft(&mut u);
            half_nonlinear(&mut u);
        }
        if let Some(i) = u.iter().position(|c| !(c.re.is_finite() && c.im.is_finite())) {
            return Err(Error::numeric(format!("schrodinger reference at level {level}, point {i}"), u[i].re));
        }
        store(&u, &mut values.data_mut()[level * 2 * kx..]);
    }
    GridSolution::new(req.times(), grid_xs(&domain, kx), 2, values)
}

/// Closed-form beam solution `sin(x) cos(4πt)`.
pub fn solve_beam(req: &ReferenceRequest) -> Result<GridSolution> {
    let domain = req.domain()?;
    let (spec, _) = make_benchmark(Benchmark::EulerBernoulli, &BenchmarkOverrides::default())?;
    let xs = grid_xs(&domain, req.k_x);
    let times = req.times();
    let mut values = Array::zeros(&[req.levels, req.k_x]);
    for (n, &t) in times.iter().enumerate() {
        for (i, &x) in xs.iter().enumerate() {
            values.set(n, i, spec.analytic(x, t).expect("beam is closed form"));
        }
    }
    GridSolution::new(times, xs, 1, values)
}

/// Discrete mass `Σ|u|² Δx` of a two-channel periodic grid row, counting
/// the duplicated right endpoint once.
pub fn discrete_mass(grid: &GridSolution, level: usize) -> f64 {
    let k = grid.k_x();
    let dx = grid.xs[1] - grid.xs[0];
    let row = grid.row(level);
    (0..k - 1).map(|i| row[i] * row[i] + row[k + i] * row[k + i]).sum::<f64>() * dx
}

/// Mass `Σ|u|² Δx` of the full periodic collocation state at every level,
/// recomputed by running the solver again at collocation resolution.
pub fn schrodinger_mass_history(req: &ReferenceRequest) -> Result<Vec<f64>> {
    let mut full = *req;
    let base = req.k_x - 1;
    full.k_x = req.modes() + 1;
    full.solver.min_modes = req.modes();
    debug_assert_eq!(full.modes() % base, 0);
    let grid = solve_schrodinger(&full)?;
    Ok((0..grid.k_t()).map(|n| discrete_mass(&grid, n)).collect())
}

/// Lyapunov energy `∫ [d/2·u_x² + r/4·(u² − 1)²] dx` of a periodic
/// single-channel row, with a spectral `u_x`.
pub fn allen_cahn_energy(row: &[f64], length: f64) -> f64 {
    let n = row.len();
    let sp = Spectral::new(n, length);
    let ux = sp.derivative(row);
    let dx = length / n as f64;
    row.iter()
        .zip(&ux)
        .map(|(u, d)| 0.5 * ALLEN_CAHN_DIFFUSION * d * d + 0.25 * ALLEN_CAHN_REACTION * (u * u - 1.0).powi(2))
        .sum::<f64>()
        * dx
}

/// Energy at every level of an Allen–Cahn solve, evaluated on the full
/// collocation grid.
pub fn allen_cahn_energy_history(req: &ReferenceRequest) -> Result<Vec<f64>> {
    let mut full = *req;
    full.k_x = req.modes() + 1;
    full.solver.min_modes = req.modes();
    let grid = solve_allen_cahn(&full)?;
    let domain = full.domain()?;
    let k = grid.k_x();
    Ok((0..grid.k_t()).map(|n| allen_cahn_energy(&grid.row(n)[..k - 1], domain.length())).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pde::{make_benchmark, residual_eval, AnalyticField};

    fn small(benchmark: Benchmark, k_x: usize, levels: usize, spacing: f64) -> ReferenceRequest {
        ReferenceRequest {
            benchmark,
            nu: None,
            k_x,
            levels,
            spacing,
            solver: SolverParams::default_for(benchmark),
        }
    }

    fn max_diff(a: &GridSolution, b: &GridSolution) -> f64 {
        a.values.data().iter().zip(b.values.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn modes_are_multiples_of_the_output_grid() {
        let r = ReferenceRequest::for_windows(Benchmark::Burgers, None, 256, 80, 20).unwrap();
        assert_eq!(r.modes(), 2295);
        assert_eq!(r.levels, 100);
        assert_eq!(r.substeps(), 102);
        let a = ReferenceRequest::for_windows(Benchmark::AllenCahn, None, 201, 80, 20).unwrap();
        assert_eq!(a.modes(), 4200);
        let s = ReferenceRequest::for_windows(Benchmark::Schrodinger, None, 256, 160, 40).unwrap();
        assert_eq!(s.modes(), 2295);
    }

    #[test]
    fn beam_closed_form() {
        let r = small(Benchmark::EulerBernoulli, 3, 5, 0.25);
        let g = solve_beam(&r).unwrap();
        assert!((g.value(0, 0, 1) - 1.0).abs() < 1e-15);
        for n in 0..5 {
            assert!(g.value(n, 0, 0).abs() < 1e-15);
        }
        let (spec, _) = make_benchmark(Benchmark::EulerBernoulli, &BenchmarkOverrides::default()).unwrap();
        for (n, &t) in g.times.iter().enumerate() {
            for (i, &x) in g.xs.iter().enumerate() {
                let r = residual_eval(&spec, &AnalyticField(&spec), x, t).unwrap();
                assert!(r[0].abs() <= 1e-8, "({x}, {t}): {}", r[0]);
                assert_eq!(g.value(n, 0, i), x.sin() * (4.0 * PI * t).cos());
            }
        }
    }

    #[test]
    fn initial_rows_match_initial_conditions() {
        for b in [Benchmark::Burgers, Benchmark::AllenCahn, Benchmark::Schrodinger] {
            let r = small(b, 65, 2, 1e-3);
            let g = solve(&r).unwrap();
            let (spec, _) = make_benchmark(b, &BenchmarkOverrides::default()).unwrap();
            for (i, &x) in g.xs.iter().enumerate() {
                let want = spec.initial_profile(x);
                for (ch, w) in want.iter().enumerate() {
                    // the right endpoint is the periodic image of the left one
                    let diff = (g.value(0, ch, i) - w).abs();
                    assert!(diff <= 1e-12 || (i == g.k_x() - 1 && (g.value(0, ch, 0) - w).abs() <= 1e-12), "{b:?} x={x}: {diff}");
                }
            }
        }
    }

    #[test]
    fn burgers_keeps_odd_symmetry_and_walls() {
        let r = small(Benchmark::Burgers, 129, 31, 0.01);
        let g = solve_burgers(&r).unwrap();
        for n in 0..g.k_t() {
            assert!(g.value(n, 0, 64).abs() <= 1e-10);
            assert!(g.value(n, 0, 0).abs() <= 1e-10 && g.value(n, 0, 128).abs() <= 1e-10);
            for i in 0..64 {
                assert!((g.value(n, 0, i) + g.value(n, 0, 128 - i)).abs() <= 1e-10);
            }
        }
    }

    #[test]
    fn allen_cahn_is_periodic() {
        let r = small(Benchmark::AllenCahn, 101, 11, 0.05);
        let g = solve_allen_cahn(&r).unwrap();
        for n in 0..g.k_t() {
            assert!((g.value(n, 0, 0) - g.value(n, 0, 100)).abs() <= 1e-10);
        }
    }

    #[test]
    fn schrodinger_initial_mass_and_symmetry() {
        let r = small(Benchmark::Schrodinger, 257, 11, 0.05);
        let g = solve_schrodinger(&r).unwrap();
        let m0 = discrete_mass(&g, 0);
        assert!((m0 - 8.0 * 5f64.tanh()).abs() < 1e-3, "{m0}");
        for n in 0..g.k_t() {
            for i in 1..128 {
                let a = g.value(n, 0, i).hypot(g.value(n, 1, i));
                let b = g.value(n, 0, 256 - i).hypot(g.value(n, 1, 256 - i));
                assert!((a - b).abs() <= 1e-9, "level {n} x index {i}");
            }
        }
    }

    #[test]
    fn schrodinger_mass_is_conserved() {
        let r = small(Benchmark::Schrodinger, 256, 21, 0.05);
        let mass = schrodinger_mass_history(&r).unwrap();
        for m in &mass {
            assert!((m - mass[0]).abs() / mass[0] <= 1e-8);
        }
    }

    #[test]
    fn allen_cahn_energy_decreases() {
        let r = small(Benchmark::AllenCahn, 201, 21, 0.05);
        let e = allen_cahn_energy_history(&r).unwrap();
        for w in e.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "{} -> {}", w[0], w[1]);
        }
        assert!(e[e.len() - 1] < e[0]);
    }

    #[test]
    fn out_of_domain_requests_are_rejected() {
        let mut r = small(Benchmark::Burgers, 65, 200, 0.01);
        assert!(solve(&r).is_err());
        r.levels = 0;
        assert!(solve(&r).is_err());
        r.levels = 3;
        r.k_x = 1;
        assert!(solve(&r).is_err());
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let r = small(Benchmark::AllenCahn, 33, 4, 0.02);
        let fresh = solve_cached(&r, Some(dir.path())).unwrap();
        assert!(cache_path(&r, dir.path()).exists());
        let cached = solve_cached(&r, Some(dir.path())).unwrap();
        assert_eq!(fresh, cached);
        assert_eq!(fresh, solve(&r).unwrap());
        let mut other = r;
        other.solver.dt_max = 5e-5;
        assert_ne!(r.cache_key(), other.cache_key());
    }

    #[test]
    fn time_steps_converge_on_halving() {
        for b in [Benchmark::Burgers, Benchmark::AllenCahn, Benchmark::Schrodinger] {
            let mut r = small(b, 65, 6, 0.02);
            r.solver.dt_max = 1e-3;
            let coarse = solve(&r).unwrap();
            r.solver.dt_max = 5e-4;
            let fine = solve(&r).unwrap();
            assert!(max_diff(&coarse, &fine) < 1e-5, "{b:?}: {}", max_diff(&coarse, &fine));
        }
    }
}
