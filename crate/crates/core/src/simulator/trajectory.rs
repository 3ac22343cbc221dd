use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use crate::{Error, Result};

/// Named-channel time series with one row per integration node.
///
/// Rows carry explicit times. At a switching instant (fault application or
/// clearing) the trajectory holds two rows with the same time: the state just
/// before and just after the network change. Machine states are equal across
/// the pair, algebraic channels jump.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    /// Nominal sample step.
    pub dt: f64,
    pub t0: f64,
    pub channels: Vec<String>,
    pub times: Vec<f64>,
    /// Row-major `times.len() x channels.len()`.
    pub data: Vec<f64>,
    pub diverged: bool,
}

impl Trajectory {
    pub fn new(dt: f64, t0: f64, channels: Vec<String>) -> Result<Self> {
        let mut seen = HashSet::new();
        if let Some(c) = channels.iter().find(|c| !seen.insert(c.as_str())) {
            return Err(Error::Validation(format!("duplicate channel `{c}`")));
        }
        if !(dt > 0.0) {
            return Err(Error::Validation("dt must be positive".into()));
        }
        Ok(Self {
            dt,
            t0,
            channels,
            times: Vec::new(),
            data: Vec::new(),
            diverged: false,
        })
    }

    pub fn n_rows(&self) -> usize {
        self.times.len()
    }

    pub fn n_channels(&self) -> usize {
        self.channels.len()
    }

    pub fn push_row(&mut self, t: f64, row: &[f64]) {
        debug_assert_eq!(row.len(), self.n_channels());
        self.times.push(t);
        self.data.extend_from_slice(row);
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let n = self.n_channels();
        &self.data[i * n..(i + 1) * n]
    }

    pub fn value(&self, row: usize, channel: usize) -> f64 {
        self.data[row * self.n_channels() + channel]
    }

    pub fn channel_index(&self, name: &str) -> Result<usize> {
        self.channels
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::MissingChannel(name.to_string()))
    }

    pub fn has_channel(&self, name: &str) -> bool {
        self.channels.iter().any(|c| c == name)
    }

    pub fn column(&self, name: &str) -> Result<Vec<f64>> {
        let c = self.channel_index(name)?;
        Ok((0..self.n_rows()).map(|r| self.value(r, c)).collect())
    }

    /// Append channels given column-wise.
    pub fn append_channels(&mut self, names: Vec<String>, columns: &[Vec<f64>]) -> Result<()> {
        if names.len() != columns.len() || columns.iter().any(|c| c.len() != self.n_rows()) {
            return Err(Error::Dimension {
                what: "appended channels",
                expected: self.n_rows(),
                got: columns.first().map_or(0, Vec::len),
            });
        }
        for n in &names {
            if self.has_channel(n) {
                return Err(Error::Validation(format!("duplicate channel `{n}`")));
            }
        }
        let old = self.n_channels();
        let new = old + names.len();
        let mut data = Vec::with_capacity(self.n_rows() * new);
        for r in 0..self.n_rows() {
            data.extend_from_slice(&self.data[r * old..(r + 1) * old]);
            data.extend(columns.iter().map(|c| c[r]));
        }
        self.data = data;
        self.channels.extend(names);
        Ok(())
    }

    /// Keep only the named channels, in the given order.
    pub fn select(&self, names: &[String]) -> Result<Trajectory> {
        let idx: Vec<usize> = names.iter().map(|n| self.channel_index(n)).collect::<Result<_>>()?;
        let mut out = Trajectory::new(self.dt, self.t0, names.to_vec())?;
        out.diverged = self.diverged;
        for r in 0..self.n_rows() {
            let row: Vec<f64> = idx.iter().map(|&c| self.value(r, c)).collect();
            out.push_row(self.times[r], &row);
        }
        Ok(out)
    }

    /// True when row `i` is the pre-switch copy of a duplicated instant.
    pub fn is_pre_switch(&self, i: usize) -> bool {
        i + 1 < self.n_rows() && self.times[i + 1] == self.times[i]
    }

    /// Rows whose time lies in `[t_start, t_end]`, dropping pre-switch copies.
    pub fn rows_in(&self, t_start: f64, t_end: f64) -> Vec<usize> {
        let tol = 1e-9 * self.dt;
        (0..self.n_rows())
            .filter(|&i| self.times[i] >= t_start - tol && self.times[i] <= t_end + tol && !self.is_pre_switch(i))
            .collect()
    }

    /// Rows on the nominal sample grid `t0 + k dt` starting at `t_start`,
    /// taking the post-switch copy where a switch falls on the grid.
    pub fn uniform_rows(&self, t_start: f64) -> Vec<usize> {
        let tol = 1e-6 * self.dt;
        self.rows_in(t_start, f64::INFINITY)
            .into_iter()
            .filter(|&i| {
                let k = ((self.times[i] - self.t0) / self.dt).round();
                (self.t0 + k * self.dt - self.times[i]).abs() <= tol
            })
            .collect()
    }

    /// True when every stored value is finite.
    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["t".to_string()];
        header.extend(self.channels.iter().cloned());
        wr.write_record(&header)?;
        let mut rec: Vec<String> = Vec::with_capacity(self.n_channels() + 1);
        for r in 0..self.n_rows() {
            rec.clear();
            rec.push(format!("{:.16e}", self.times[r]));
            rec.extend(self.row(r).iter().map(|v| format!("{v:.16e}")));
            wr.write_record(&rec)?;
        }
        wr.flush()?;
        Ok(())
    }

    /// Parse a CSV written by [`Self::write_csv`]. The nominal step is the
    /// largest time increment; rows with non-finite values mark the run as
    /// diverged.
    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let header = rd.headers()?.clone();
        if header.get(0) != Some("t") {
            return Err(Error::Validation("trajectory CSV must start with a `t` column".into()));
        }
        let channels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let mut times = Vec::new();
        let mut data = Vec::new();
        for rec in rd.records() {
            let rec = rec?;
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::Validation(format!("bad number `{s}` in trajectory CSV")))
            };
            times.push(parse(&rec[0])?);
            for v in rec.iter().skip(1) {
                data.push(parse(v)?);
            }
        }
        if times.len() < 2 {
            return Err(Error::Validation("trajectory needs at least two rows".into()));
        }
        let dt = times.windows(2).map(|w| w[1] - w[0]).fold(0.0, f64::max);
        let mut t = Trajectory::new(dt, times[0], channels)?;
        t.diverged = data.iter().any(|v: &f64| !v.is_finite());
        t.times = times;
        t.data = data;
        Ok(t)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f))
    }
}
