//! Solution values on a uniform space-time grid, and their CSV form.

use crate::error::{Error, Result};
use crate::Array;
use std::io::{BufRead, Write};

/// `k` uniformly spaced points from `start` to `end` inclusive.
pub fn uniform_points(start: f64, end: f64, k: usize) -> Vec<f64> {
    assert!(k >= 2, "need at least two grid points");
    let h = (end - start) / (k - 1) as f64;
    (0..k).map(|i| start + i as f64 * h).collect()
}

/// Times of the extrapolation levels that continue a uniform training grid
/// of `k_t` levels over `[0, t_train_end]` for `horizon` more steps.
pub fn extrapolation_times(t_train_end: f64, k_t: usize, horizon: usize) -> Vec<f64> {
    let h = t_train_end / (k_t - 1) as f64;
    (k_t..k_t + horizon).map(|i| i as f64 * h).collect()
}

/// Solution values on `times × xs`. Row `n` of `values` holds the full
/// spatial profile at `times[n]`, channel by channel:
/// `[ch0(x0..), ch1(x0..), …]`.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSolution {
    pub times: Vec<f64>,
    pub xs: Vec<f64>,
    pub n_channels: usize,
    pub values: Array,
}

impl GridSolution {
    pub fn new(times: Vec<f64>, xs: Vec<f64>, n_channels: usize, values: Array) -> Result<Self> {
        let g = GridSolution {
            times,
            xs,
            n_channels,
            values,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        let (r, c) = self.values.dims2();
        if r != self.times.len() || c != self.n_channels * self.xs.len() {
            return Err(Error::Dimension(format!(
                "grid values {:?} for {} times, {} channels x {} points",
                self.values.shape(),
                self.times.len(),
                self.n_channels,
                self.xs.len()
            )));
        }
        if self.times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::argument("grid times must be strictly increasing"));
        }
        if let Some((i, v)) = self.values.first_non_finite() {
            return Err(Error::numeric(
                format!("grid value at level {}, column {}", i / c, i % c),
                v,
            ));
        }
        Ok(())
    }

    pub fn k_t(&self) -> usize {
        self.times.len()
    }

    pub fn k_x(&self) -> usize {
        self.xs.len()
    }

    /// Width of one row (`n_channels · k_x`).
    pub fn width(&self) -> usize {
        self.n_channels * self.xs.len()
    }

    pub fn row(&self, n: usize) -> &[f64] {
        self.values.row(n)
    }

    pub fn value(&self, n: usize, channel: usize, i: usize) -> f64 {
        self.values.get(n, channel * self.k_x() + i)
    }

    /// Time spacing, assuming the grid is uniform.
    pub fn spacing(&self) -> f64 {
        (self.times[self.k_t() - 1] - self.times[0]) / (self.k_t() - 1) as f64
    }

    /// Pointwise modulus of a two-channel (real, imaginary) grid.
    pub fn magnitude(&self) -> Result<GridSolution> {
        if self.n_channels != 2 {
            return Err(Error::argument("magnitude needs a two-channel grid"));
        }
        let k = self.k_x();
        let mut out = Array::zeros(&[self.k_t(), k]);
        for n in 0..self.k_t() {
            let row = self.row(n);
            for i in 0..k {
                out.set(n, i, row[i].hypot(row[k + i]));
            }
        }
        GridSolution::new(self.times.clone(), self.xs.clone(), 1, out)
    }

    /// Rows `start..start+len` as a new grid.
    pub fn slice_levels(&self, start: usize, len: usize) -> GridSolution {
        GridSolution {
            times: self.times[start..start + len].to_vec(),
            xs: self.xs.clone(),
            n_channels: self.n_channels,
            values: self.values.slice_rows(start, len),
        }
    }

    /// Writes `t,x,channel,value` rows with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t,x,channel,value")?;
        for (n, &t) in self.times.iter().enumerate() {
            for ch in 0..self.n_channels {
                for (i, &x) in self.xs.iter().enumerate() {
                    writeln!(w, "{t:.16e},{x:.16e},{ch},{:.16e}", self.value(n, ch, i))?;
                }
            }
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<GridSolution> {
        let mut lines = r.lines();
        match lines.next() {
            Some(Ok(h)) if h.trim() == "t,x,channel,value" => {}
            _ => return Err(Error::Format("missing 't,x,channel,value' header".into())),
        }
        let mut times: Vec<f64> = Vec::new();
        let mut xs: Vec<f64> = Vec::new();
        let mut n_channels = 0;
        let mut values = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Format(format!("line {}: expected 4 fields", lineno + 2)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))
            };
            let (t, x, v) = (parse(fields[0])?, parse(fields[1])?, parse(fields[3])?);
            let ch: usize = fields[2]
                .trim()
                .parse()
                .map_err(|e| Error::Format(format!("line {}: {e}", lineno + 2)))?;
            if times.last() != Some(&t) {
                times.push(t);
            }
            if times.len() == 1 && ch == 0 {
                xs.push(x);
            }
            n_channels = n_channels.max(ch + 1);
            values.push(v);
        }
        let width = n_channels * xs.len();
        let arr = Array::from_vec(vec![times.len(), width], values)
            .map_err(|e| Error::Format(format!("ragged grid csv: {e}")))?;
        GridSolution::new(times, xs, n_channels, arr)
    }
}
