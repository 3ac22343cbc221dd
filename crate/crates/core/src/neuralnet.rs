//! The multi-layer neural equivalent, its optional recurrent cell, analytic
//! reverse-mode derivatives, and the feature selector that produces the
//! internal-system inputs.
//!
//! Parameters live in one flat vector, layer by layer: the weight matrix of
//! layer `l` (row-major, `out x in`) followed by its bias. Hidden layers use
//! the configured activation, the output layer is linear. Inputs are
//! normalized per channel, `(u - shift) / scale`, and outputs de-normalized,
//! `shift + scale * y`.
//!
//! The recurrent variant adds `R h_prev` to the first hidden layer's
//! pre-activation and reports that layer's activation as the new hidden
//! state. Gradients are never propagated through `h_prev`.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{LinearFeatureMap, Region};
use crate::grid::{GridModel, Partition};
use crate::simulator::Trajectory;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and activation.
    #[inline]
    fn grad(self, pre: f64, act: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - act * act,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "pi")]
    Pi,
    #[serde(rename = "dp")]
    Dp,
    #[serde(rename = "dp-rnn")]
    DpRnn,
    #[serde(rename = "discrete")]
    Discrete,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pi" => Ok(Variant::Pi),
            "dp" => Ok(Variant::Dp),
            "dp-rnn" => Ok(Variant::DpRnn),
            "discrete" => Ok(Variant::Discrete),
            _ => Err(Error::Validation(format!("unknown variant `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub variant: Variant,
    pub partition_hash: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralEquivalence {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub theta: Vec<f64>,
    pub recurrent: Option<Vec<f64>>,
    pub input_norm: Vec<[f64; 2]>,
    pub output_norm: Vec<[f64; 2]>,
    pub feature_spec: Vec<String>,
    pub meta: ModelMeta,
    /// Operating point mapped to a zero derivative. When set, every output
    /// is `N(x_ex, z_in) - N(anchor)`, so that point is an exact
    /// equilibrium of the equivalent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor: Option<Anchor>,
}

/// Neural state and features of a pinned operating point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub x_ex: Vec<f64>,
    pub z_in: Vec<f64>,
}

/// Number of weights and biases of a layer stack.
pub fn theta_len(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(layer_sizes: &[usize], _activation: Activation, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut theta = Vec::with_capacity(theta_len(layer_sizes));
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for _ in 0..fan_in * fan_out {
            theta.push(rng.gen_range(-bound..bound));
        }
        theta.extend(std::iter::repeat(0.0).take(fan_out));
    }
    theta
}

/// Activations kept from a forward pass for the reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Workspace {
    /// `acts[0]` is the normalized input, `acts[l]` the output of layer `l`.
    acts: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    hidden_in: Vec<f64>,
    out: Vec<f64>,
    delta: Vec<f64>,
    delta_next: Vec<f64>,
}

impl Workspace {
    pub fn output(&self) -> &[f64] {
        &self.out
    }

    /// Activation of the first hidden layer (the recurrent state).
    pub fn hidden(&self) -> &[f64] {
        self.acts.get(1).map(Vec::as_slice).unwrap_or(&[])
    }
}

/// Dense Jacobians of one evaluation.
#[derive(Clone, Debug)]
pub struct Jacobians {
    pub d_x_ex: DMatrix<f64>,
    pub d_z_in: DMatrix<f64>,
    /// Columns ordered as `theta` followed by the recurrent block.
    pub d_theta: DMatrix<f64>,
}

impl NeuralEquivalence {
    /// A fresh model with identity normalization.
    pub fn new(layer_sizes: Vec<usize>, activation: Activation, recurrent: bool, seed: u64, meta: ModelMeta) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::Validation(format!("invalid layer sizes {layer_sizes:?}")));
        }
        if recurrent && layer_sizes.len() < 3 {
            return Err(Error::Validation("recurrent cell needs a hidden layer".into()));
        }
        let theta = init_params(&layer_sizes, activation, seed);
        let recurrent = recurrent.then(|| vec![0.0; layer_sizes[1] * layer_sizes[1]]);
        Ok(Self {
            input_norm: vec![[0.0, 1.0]; layer_sizes[0]],
            output_norm: vec![[0.0, 1.0]; *layer_sizes.last().unwrap()],
            feature_spec: Vec::new(),
            layer_sizes,
            activation,
            theta,
            recurrent,
            meta,
            anchor: None,
        })
    }

    pub fn n_out(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_in(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_features(&self) -> usize {
        self.n_in() - self.n_out()
    }

    pub fn hidden_dim(&self) -> usize {
        if self.recurrent.is_some() {
            self.layer_sizes[1]
        } else {
            0
        }
    }

    pub fn n_params(&self) -> usize {
        self.theta.len() + self.recurrent.as_ref().map_or(0, Vec::len)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut p = self.theta.clone();
        if let Some(r) = &self.recurrent {
            p.extend_from_slice(r);
        }
        p
    }

    pub fn set_params(&mut self, p: &[f64]) {
        let n = self.theta.len();
        self.theta.copy_from_slice(&p[..n]);
        if let Some(r) = &mut self.recurrent {
            r.copy_from_slice(&p[n..]);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Validation("need at least input and output layers".into()));
        }
        let want = theta_len(&self.layer_sizes);
        if self.theta.len() != want {
            return Err(Error::Dimension {
                what: "theta",
                expected: want,
                got: self.theta.len(),
            });
        }
        if let Some(r) = &self.recurrent {
            let h = self.layer_sizes.get(1).copied().unwrap_or(0);
            if self.layer_sizes.len() < 3 || r.len() != h * h {
                return Err(Error::Dimension {
                    what: "recurrent block",
                    expected: h * h,
                    got: r.len(),
                });
            }
        }
        if self.input_norm.len() != self.n_in() || self.output_norm.len() != self.n_out() {
            return Err(Error::Validation("normalization length mismatch".into()));
        }
        if self
            .input_norm
            .iter()
            .chain(&self.output_norm)
            .any(|p| !(p[1] > 0.0) || !p[0].is_finite())
        {
            return Err(Error::Validation("normalization scales must be positive".into()));
        }
        if let Some(a) = &self.anchor {
            if self.recurrent.is_some() {
                return Err(Error::Validation("a recurrent model cannot be anchored".into()));
            }
            if a.x_ex.len() != self.n_out() || a.z_in.len() != self.n_features() {
                return Err(Error::Dimension {
                    what: "anchor",
                    expected: self.n_in(),
                    got: a.x_ex.len() + a.z_in.len(),
                });
            }
            if a.x_ex.iter().chain(&a.z_in).any(|v| !v.is_finite()) {
                return Err(Error::Validation("anchor must be finite".into()));
            }
        }
        if !self.feature_spec.is_empty() && self.feature_spec.len() != self.n_features() {
            return Err(Error::Dimension {
                what: "feature spec",
                expected: self.n_features(),
                got: self.feature_spec.len(),
            });
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    fn check_dims(&self, x_ex: &[f64], z_in: &[f64], hidden: Option<&[f64]>) -> Result<()> {
        if x_ex.len() + z_in.len() != self.n_in() || x_ex.len() != self.n_out() {
            return Err(Error::Dimension {
                what: "network input",
                expected: self.n_in(),
                got: x_ex.len() + z_in.len(),
            });
        }
        match (self.recurrent.is_some(), hidden) {
            (true, Some(h)) if h.len() == self.hidden_dim() => Ok(()),
            (true, Some(h)) => Err(Error::Dimension {
                what: "hidden state",
                expected: self.hidden_dim(),
                got: h.len(),
            }),
            (true, None) => Err(Error::Validation("recurrent model needs a hidden state".into())),
            (false, _) => Ok(()),
        }
    }

    /// Evaluate `dx_ex/dt` and the new hidden state.
    pub fn forward(&self, x_ex: &[f64], z_in: &[f64], hidden: Option<&[f64]>) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
        self.check_dims(x_ex, z_in, hidden)?;
        let mut ws = Workspace::default();
        let offset = self.offset(&mut ws);
        self.forward_ws(x_ex, z_in, hidden.unwrap_or(&[]), &mut ws);
        let h = self.recurrent.as_ref().map(|_| ws.hidden().to_vec());
        Ok((ws.out.iter().zip(&offset).map(|(y, o)| y - o).collect(), h))
    }

    /// Raw output at the anchor, zero without one. Subtract it from
    /// [`Self::forward_ws`] to get the model output.
    pub fn offset(&self, ws: &mut Workspace) -> Vec<f64> {
        match &self.anchor {
            Some(a) => {
                self.forward_ws(&a.x_ex, &a.z_in, &[], ws);
                ws.out.clone()
            }
            None => vec![0.0; self.n_out()],
        }
    }

    /// Parameter cotangent of the offset: accumulates `-v^T d offset` into
    /// `g_params`, where `v` is the sum of the output cotangents passed to
    /// [`Self::vjp`] with the same parameters.
    pub fn offset_vjp(&self, ws: &mut Workspace, v: &[f64], g_params: &mut [f64]) {
        if let Some(a) = &self.anchor {
            self.forward_ws(&a.x_ex, &a.z_in, &[], ws);
            let neg: Vec<f64> = v.iter().map(|x| -x).collect();
            let mut gx = vec![0.0; self.n_out()];
            let mut gz = vec![0.0; self.n_features()];
            self.vjp(ws, &neg, &mut gx, &mut gz, Some(g_params));
        }
    }

    /// Unchecked forward pass of the raw network (without the anchor
    /// offset) into a reusable workspace.
    pub fn forward_ws(&self, x_ex: &[f64], z_in: &[f64], hidden: &[f64], ws: &mut Workspace) {
        let nl = self.layer_sizes.len();
        ws.acts.resize(nl, Vec::new());
        ws.pres.resize(nl, Vec::new());
        let a0 = &mut ws.acts[0];
        a0.clear();
        for (i, &u) in x_ex.iter().chain(z_in).enumerate() {
            let [s, c] = self.input_norm[i];
            a0.push((u - s) / c);
        }
        ws.hidden_in.clear();
        ws.hidden_in.extend_from_slice(hidden);
        let mut off = 0;
        for l in 1..nl {
            let (n_in, n_out) = (self.layer_sizes[l - 1], self.layer_sizes[l]);
            let w = &self.theta[off..off + n_in * n_out];
            let b = &self.theta[off + n_in * n_out..off + n_in * n_out + n_out];
            off += n_in * n_out + n_out;
            let (prev, rest) = ws.acts.split_at_mut(l);
            let input = &prev[l - 1];
            let pre = &mut ws.pres[l];
            pre.clear();
            for r in 0..n_out {
                let row = &w[r * n_in..(r + 1) * n_in];
                let mut s = b[r];
                for (wi, ai) in row.iter().zip(input.iter()) {
                    s += wi * ai;
                }
                pre.push(s);
            }
            if l == 1 {
                if let Some(rw) = &self.recurrent {
                    for r in 0..n_out {
                        let row = &rw[r * n_out..(r + 1) * n_out];
                        pre[r] += row.iter().zip(hidden).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
            let act = &mut rest[0];
            act.clear();
            if l + 1 == nl {
                act.extend_from_slice(pre);
            } else {
                act.extend(pre.iter().map(|&p| self.activation.apply(p)));
            }
        }
        ws.out.clear();
        let y = &ws.acts[nl - 1];
        ws.out
            .extend(y.iter().zip(&self.output_norm).map(|(y, [s, c])| s + c * y));
    }

    /// Vector-Jacobian product `v^T dN` after [`Self::forward_ws`]. Input
    /// cotangents are written to `g_x`/`g_z`; parameter cotangents are
    /// accumulated into `g_params` (theta then recurrent block) when given.
    pub fn vjp(&self, ws: &mut Workspace, v: &[f64], g_x: &mut [f64], g_z: &mut [f64], g_params: Option<&mut [f64]>) {
        let nl = self.layer_sizes.len();
        let mut g_params = g_params;
        ws.delta.clear();
        ws.delta
            .extend(v.iter().zip(&self.output_norm).map(|(v, [_, c])| v * c));
        let mut off_end = self.theta.len();
        for l in (1..nl).rev() {
            let (n_in, n_out) = (self.layer_sizes[l - 1], self.layer_sizes[l]);
            let off = off_end - (n_in * n_out + n_out);
            if l + 1 < nl {
                // through the activation
                for r in 0..n_out {
                    ws.delta[r] *= self.activation.grad(ws.pres[l][r], ws.acts[l][r]);
                }
            }
            let w = &self.theta[off..off + n_in * n_out];
            if let Some(g) = g_params.as_deref_mut() {
                let input = &ws.acts[l - 1];
                for r in 0..n_out {
                    let d = ws.delta[r];
                    if d == 0.0 {
                        continue;
                    }
                    let gw = &mut g[off + r * n_in..off + (r + 1) * n_in];
                    for (gi, ai) in gw.iter_mut().zip(input.iter()) {
                        *gi += d * ai;
                    }
                    g[off + n_in * n_out + r] += d;
                }
                if l == 1 && self.recurrent.is_some() {
                    let base = self.theta.len();
                    for r in 0..n_out {
                        let d = ws.delta[r];
                        for c in 0..n_out {
                            g[base + r * n_out + c] += d * ws.hidden_in[c];
                        }
                    }
                }
            }
            ws.delta_next.clear();
            ws.delta_next.resize(n_in, 0.0);
            for r in 0..n_out {
                let d = ws.delta[r];
                if d == 0.0 {
                    continue;
                }
                let row = &w[r * n_in..(r + 1) * n_in];
                for (dn, wi) in ws.delta_next.iter_mut().zip(row) {
                    *dn += d * wi;
                }
            }
            std::mem::swap(&mut ws.delta, &mut ws.delta_next);
            off_end = off;
        }
        let nx = g_x.len();
        for (i, d) in ws.delta.iter().enumerate() {
            let g = d / self.input_norm[i][1];
            if i < nx {
                g_x[i] = g;
            } else {
                g_z[i - nx] = g;
            }
        }
    }

    /// Dense Jacobians with respect to the state, the features and the
    /// parameters, one reverse sweep per output.
    pub fn jacobians(&self, x_ex: &[f64], z_in: &[f64], hidden: Option<&[f64]>) -> Result<Jacobians> {
        self.check_dims(x_ex, z_in, hidden)?;
        let no = self.n_out();
        let np = self.n_params();
        let mut jx = DMatrix::zeros(no, x_ex.len());
        let mut jz = DMatrix::zeros(no, z_in.len());
        let mut jt = DMatrix::zeros(no, np);
        let mut ws = Workspace::default();
        let mut gx = vec![0.0; x_ex.len()];
        let mut gz = vec![0.0; z_in.len()];
        for o in 0..no {
            self.forward_ws(x_ex, z_in, hidden.unwrap_or(&[]), &mut ws);
            let mut v = vec![0.0; no];
            v[o] = 1.0;
            let mut gp = vec![0.0; np];
            self.vjp(&mut ws, &v, &mut gx, &mut gz, Some(&mut gp));
            for (c, g) in gx.iter().enumerate() {
                jx[(o, c)] = *g;
            }
            for (c, g) in gz.iter().enumerate() {
                jz[(o, c)] = *g;
            }
            self.offset_vjp(&mut ws, &v, &mut gp);
            for (c, g) in gp.iter().enumerate() {
                jt[(o, c)] = *g;
            }
        }
        Ok(Jacobians {
            d_x_ex: jx,
            d_z_in: jz,
            d_theta: jt,
        })
    }
}

/// Real or imaginary part of a complex channel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Part {
    Re,
    Im,
}

impl Part {
    fn suffix(self) -> &'static str {
        match self {
            Part::Re => "re",
            Part::Im => "im",
        }
    }
}

/// One selectable internal-system quantity. Indices follow the channel
/// naming: generators and branches are 1-based grid positions, buses are bus
/// ids, ports and ties 1-based positions in the partition.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    MachineDelta(usize),
    MachineOmega(usize),
    BusV(usize, Part),
    LineI(usize, Part),
    PortV(usize, Part),
    TieI(usize, Part),
}

impl Feature {
    pub fn channel(&self) -> String {
        match *self {
            Feature::MachineDelta(k) => format!("gen{k}.delta"),
            Feature::MachineOmega(k) => format!("gen{k}.omega"),
            Feature::BusV(k, p) => format!("bus{k}.v.{}", p.suffix()),
            Feature::LineI(k, p) => format!("line{k}.i.{}", p.suffix()),
            Feature::PortV(k, p) => format!("port{k}.v.{}", p.suffix()),
            Feature::TieI(k, p) => format!("tie{k}.i.{}", p.suffix()),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Validation(format!("unknown feature `{s}`"));
        let parts: Vec<&str> = s.split('.').collect();
        let idx = |prefix: &str| -> Option<usize> { parts[0].strip_prefix(prefix)?.parse().ok() };
        let part = |p: &str| match p {
            "re" => Some(Part::Re),
            "im" => Some(Part::Im),
            _ => None,
        };
        match parts.as_slice() {
            [_, "delta"] => idx("gen").map(Feature::MachineDelta).ok_or_else(bad),
            [_, "omega"] => idx("gen").map(Feature::MachineOmega).ok_or_else(bad),
            [head, q, p] => {
                let p = part(p).ok_or_else(bad)?;
                let ctor: fn(usize, Part) -> Feature = match (*q, head) {
                    ("v", h) if h.starts_with("bus") => |k, p| Feature::BusV(k, p),
                    ("v", h) if h.starts_with("port") => |k, p| Feature::PortV(k, p),
                    ("i", h) if h.starts_with("line") => |k, p| Feature::LineI(k, p),
                    ("i", h) if h.starts_with("tie") => |k, p| Feature::TieI(k, p),
                    _ => return Err(bad()),
                };
                let prefix = head.trim_end_matches(|c: char| c.is_ascii_digit());
                idx(prefix).map(|k| ctor(k, p)).ok_or_else(bad)
            }
            _ => Err(bad()),
        }
    }
}

/// How tie-current features relate to the explicit states of a hybrid run.
#[derive(Clone, Debug)]
pub enum TieSource {
    /// The explicit state is the tie current itself.
    State,
    /// The explicit state is the continuous component; `i_tie = e + D v_p`.
    Norton(DMatrix<crate::C64>),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FeatureSelector {
    pub spec: Vec<Feature>,
}

impl FeatureSelector {
    pub fn new(spec: Vec<Feature>) -> Self {
        Self { spec }
    }

    pub fn parse(names: &[String]) -> Result<Self> {
        names.iter().map(|s| Feature::parse(s)).collect::<Result<_>>().map(Self::new)
    }

    pub fn names(&self) -> Vec<String> {
        self.spec.iter().map(Feature::channel).collect()
    }

    pub fn dim(&self) -> usize {
        self.spec.len()
    }

    /// Port voltages only (the driving-port selection).
    pub fn ports(partition: &Partition) -> Self {
        Self::new(
            (1..=partition.n_ports())
                .flat_map(|k| [Feature::PortV(k, Part::Re), Feature::PortV(k, Part::Im)])
                .collect(),
        )
    }

    /// Port voltages, every internal bus voltage and every internal machine
    /// speed.
    pub fn rich(grid: &GridModel, partition: &Partition) -> Self {
        let mut spec: Vec<Feature> = Self::ports(partition).spec;
        for &b in &partition.internal_buses {
            spec.push(Feature::BusV(b, Part::Re));
            spec.push(Feature::BusV(b, Part::Im));
        }
        for (k, g) in grid.generators.iter().enumerate() {
            if partition.is_internal(g.bus) {
                spec.push(Feature::MachineOmega(k + 1));
            }
        }
        Self::new(spec)
    }

    /// Check every referenced entity exists in the internal system.
    pub fn validate(&self, grid: &GridModel, partition: &Partition) -> Result<()> {
        for f in &self.spec {
            let ok = match *f {
                Feature::MachineDelta(k) | Feature::MachineOmega(k) => {
                    k >= 1 && k <= grid.generators.len() && partition.is_internal(grid.generators[k - 1].bus)
                }
                Feature::BusV(b, _) => partition.is_internal(b),
                Feature::LineI(k, _) => {
                    k >= 1
                        && k <= grid.branches.len()
                        && partition.is_internal(grid.branches[k - 1].from_bus)
                        && partition.is_internal(grid.branches[k - 1].to_bus)
                }
                Feature::PortV(k, _) | Feature::TieI(k, _) => k >= 1 && k <= partition.n_ports(),
            };
            if !ok {
                return Err(Error::Validation(format!("feature `{}` not in the internal system", f.channel())));
            }
        }
        Ok(())
    }

    /// Compile into a linear map of (machine states, explicit states, bus
    /// voltages) of a hybrid run over the internal `region`.
    pub fn compile(&self, grid: &GridModel, partition: &Partition, region: &Region, ties: &TieSource) -> Result<LinearFeatureMap> {
        self.validate(grid, partition)?;
        let nz = self.dim();
        let nx = region.n_state();
        let ne = 2 * partition.n_ports();
        let nv = 2 * region.n_bus();
        let mut fx = DMatrix::zeros(nz, nx);
        let mut fe = DMatrix::zeros(nz, ne);
        let mut fv = DMatrix::zeros(nz, nv);
        let comp = |p: Part| if p == Part::Re { 0 } else { 1 };
        let local = |b: usize| region.local(b).ok_or_else(|| Error::Validation(format!("bus {b} not modeled")));
        for (r, f) in self.spec.iter().enumerate() {
            match *f {
                Feature::MachineDelta(k) | Feature::MachineOmega(k) => {
                    let m = region
                        .machines
                        .iter()
                        .position(|m| m.gen_index == k - 1)
                        .ok_or_else(|| Error::Validation(format!("gen{k} not modeled")))?;
                    let off = if matches!(f, Feature::MachineDelta(_)) { 0 } else { 1 };
                    fx[(r, 2 * m + off)] = 1.0;
                }
                Feature::BusV(b, p) => fv[(r, 2 * local(b)? + comp(p))] = 1.0,
                Feature::PortV(k, p) => fv[(r, 2 * local(partition.ports[k - 1])? + comp(p))] = 1.0,
                Feature::LineI(k, p) => {
                    let br = &grid.branches[k - 1];
                    let y = br.admittance();
                    let (i, j) = (local(br.from_bus)?, local(br.to_bus)?);
                    // i = y (V_i - V_j)
                    let (a, b) = if p == Part::Re { (y.re, -y.im) } else { (y.im, y.re) };
                    fv[(r, 2 * i)] += a;
                    fv[(r, 2 * i + 1)] += b;
                    fv[(r, 2 * j)] -= a;
                    fv[(r, 2 * j + 1)] -= b;
                }
                Feature::TieI(k, p) => {
                    fe[(r, 2 * (k - 1) + comp(p))] = 1.0;
                    if let TieSource::Norton(d) = ties {
                        for (c, &port) in partition.ports.iter().enumerate() {
                            let dk = d[(k - 1, c)];
                            let (a, b) = if p == Part::Re { (dk.re, -dk.im) } else { (dk.im, dk.re) };
                            let l = local(port)?;
                            fv[(r, 2 * l)] += a;
                            fv[(r, 2 * l + 1)] += b;
                        }
                    }
                }
            }
        }
        Ok(LinearFeatureMap { fx, fe, fv })
    }
}

/// Project one trajectory row onto the selector's channels.
pub fn select_features(selector: &FeatureSelector, frame: &Trajectory, row: usize) -> Result<Vec<f64>> {
    selector
        .spec
        .iter()
        .map(|f| {
            let name = f.channel();
            let c = frame.channel_index(&name)?;
            Ok(frame.value(row, c))
        })
        .collect()
}
