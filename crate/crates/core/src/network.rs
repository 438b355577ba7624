//! Deep recurrent networks in three architectures and three readout modes.
//!
//! A network is one or two *stacks* of cells unrolled over time, plus a
//! sum-pooling readout. Pooled vectors come in *slots*:
//!
//! * General: one stack over `x_1..x_T`, one slot `U = Σ_{t≤T} h_t`.
//! * Hybrid: one stack over the extended sequence of length `T + ⌊T/2⌋`,
//!   with parameters `θ1`, `θ1 + θ2`, `θ2` in the three phases. Slot 1 pools
//!   `t = 1..T`, slot 2 pools `t = ⌊T/2⌋+1..T+⌊T/2⌋`.
//! * Bidirectional: a forward stack (bank 1) and a stack over the reversed
//!   sequence (bank 2), one slot each over all `T` steps.
//!
//! Logits are `b_y + Σ W · U` where the readout mode decides which layers
//! are pooled and which matrix each pooled vector meets.

use crate::cells::{cell_backward_acc, cell_forward, CellKind, CellParams, CellState, StepCache};
use crate::error::{Error, Result};
use crate::math::{add_into, Matrix, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    General,
    Hybrid,
    Bidirectional,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::General, Arch::Hybrid, Arch::Bidirectional];

    pub fn as_str(self) -> &'static str {
        match self {
            Arch::General => "general",
            Arch::Hybrid => "hybrid",
            Arch::Bidirectional => "bidirectional",
        }
    }

    /// Cell evaluations per layer for a length-`t` sequence.
    pub fn steps_per_layer(self, t: usize) -> usize {
        match self {
            Arch::General => t,
            Arch::Hybrid => t + t / 2,
            Arch::Bidirectional => 2 * t,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Readout {
    /// Pool only the top layer.
    LastLayerSum,
    /// Sum the pooled states of every layer, one matrix per slot.
    StackedSum,
    /// One matrix per layer and slot.
    PerLayerWeighted,
}

impl Readout {
    pub const ALL: [Readout; 3] = [
        Readout::LastLayerSum,
        Readout::StackedSum,
        Readout::PerLayerWeighted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Readout::LastLayerSum => "last",
            Readout::StackedSum => "stacked",
            Readout::PerLayerWeighted => "per-layer",
        }
    }
}

/// Whether the two pooled slots get their own readout matrices or share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ReadoutMatrices {
    Split,
    Shared,
}

impl ReadoutMatrices {
    pub fn as_str(self) -> &'static str {
        match self {
            ReadoutMatrices::Split => "split",
            ReadoutMatrices::Shared => "shared",
        }
    }
}

macro_rules! parse_enum {
    ($ty:ty, $what:literal, { $($($name:literal)|+ => $val:expr),+ $(,)? }) => {
        impl std::str::FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($($name)|+ => Ok($val),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " `{}`"), other))),
                }
            }
        }
        impl std::fmt::Display for $ty {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}

parse_enum!(Arch, "architecture", {
    "general" => Arch::General,
    "hybrid" => Arch::Hybrid,
    "bidirectional" | "bi" | "bidir" => Arch::Bidirectional,
});
parse_enum!(Readout, "readout", {
    "last" | "last-layer" | "last_layer_sum" => Readout::LastLayerSum,
    "stacked" | "stacked-sum" | "stacked_sum" => Readout::StackedSum,
    "per-layer" | "per_layer" | "weighted" | "per_layer_weighted" => Readout::PerLayerWeighted,
});
parse_enum!(ReadoutMatrices, "readout matrix mode", {
    "split" => ReadoutMatrices::Split,
    "shared" => ReadoutMatrices::Shared,
});

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub cell: CellKind,
    /// Hidden width per layer; the length is the depth `N`.
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub num_classes: usize,
    pub arch: Arch,
    pub readout: Readout,
    /// Feed the raw input to every layer alongside the previous layer's output.
    pub skip_input: bool,
    pub readout_matrices: ReadoutMatrices,
    /// Keep probability for inter-layer dropout during training.
    pub dropout_keep: f64,
}

impl NetworkConfig {
    /// General architecture, top-layer readout, skip connections on, no dropout.
    pub fn new(
        cell: CellKind,
        layers: usize,
        hidden: usize,
        input_dim: usize,
        num_classes: usize,
    ) -> Self {
        NetworkConfig {
            cell,
            hidden: vec![hidden; layers],
            input_dim,
            num_classes,
            arch: Arch::General,
            readout: Readout::LastLayerSum,
            skip_input: true,
            readout_matrices: ReadoutMatrices::Split,
            dropout_keep: 1.0,
        }
    }

    pub fn with_arch(mut self, arch: Arch) -> Self {
        self.arch = arch;
        self
    }

    pub fn with_readout(mut self, readout: Readout) -> Self {
        self.readout = readout;
        self
    }

    pub fn with_readout_matrices(mut self, mode: ReadoutMatrices) -> Self {
        self.readout_matrices = mode;
        self
    }

    pub fn with_dropout_keep(mut self, keep: f64) -> Self {
        self.dropout_keep = keep;
        self
    }

    pub fn with_skip_input(mut self, skip: bool) -> Self {
        self.skip_input = skip;
        self
    }

    pub fn num_layers(&self) -> usize {
        self.hidden.len()
    }

    pub fn top_hidden(&self) -> usize {
        *self.hidden.last().expect("validated config has layers")
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden.is_empty() {
            return Err(Error::Config("network needs at least one layer".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden sizes must be positive".into()));
        }
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::Config(
                "input_dim and num_classes must be positive".into(),
            ));
        }
        if self.readout == Readout::StackedSum && self.hidden.iter().any(|&d| d != self.hidden[0]) {
            return Err(Error::Config(
                "stacked readout needs the same hidden size in every layer".into(),
            ));
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep {} outside (0, 1]",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    /// Width of layer `n`'s input vector.
    pub fn layer_input_dim(&self, n: usize) -> usize {
        if n == 0 {
            self.input_dim
        } else if self.cell == CellKind::MpuC || !self.skip_input {
            self.hidden[n - 1]
        } else {
            self.input_dim + self.hidden[n - 1]
        }
    }

    /// Offset of the previous layer's output inside layer `n`'s input.
    fn lower_offset(&self, n: usize) -> usize {
        debug_assert!(n > 0);
        self.layer_input_dim(n) - self.hidden[n - 1]
    }

    pub fn num_slots(&self) -> usize {
        match self.arch {
            Arch::General => 1,
            _ => 2,
        }
    }

    fn matrix_groups(&self) -> usize {
        match self.readout_matrices {
            ReadoutMatrices::Split => self.num_slots(),
            ReadoutMatrices::Shared => 1,
        }
    }

    /// Number of readout matrices the configuration allocates.
    pub fn readout_matrix_count(&self) -> usize {
        match self.readout {
            Readout::PerLayerWeighted => self.matrix_groups() * self.num_layers(),
            _ => self.matrix_groups(),
        }
    }

    /// Which readout matrix multiplies the pooled state of `layer` in `slot`,
    /// or `None` when that layer is not read out.
    pub fn readout_index(&self, slot: usize, layer: usize) -> Option<usize> {
        let group = match self.readout_matrices {
            ReadoutMatrices::Split => slot,
            ReadoutMatrices::Shared => 0,
        };
        match self.readout {
            Readout::LastLayerSum => (layer + 1 == self.num_layers()).then_some(group),
            Readout::StackedSum => Some(group),
            Readout::PerLayerWeighted => Some(group * self.num_layers() + layer),
        }
    }

    /// Column count of readout matrix `idx`.
    fn readout_cols(&self, idx: usize) -> usize {
        match self.readout {
            Readout::PerLayerWeighted => self.hidden[idx % self.num_layers()],
            _ => self.top_hidden(),
        }
    }

    fn has_bank2(&self) -> bool {
        self.arch != Arch::General
    }
}

/// All trainable values of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    /// `θ1` (or the forward direction), one entry per layer.
    pub bank1: Vec<CellParams>,
    /// `θ2` for hybrid, the backward direction for bidirectional.
    pub bank2: Option<Vec<CellParams>>,
    /// Readout matrices, `K x d`, indexed by [`NetworkConfig::readout_index`].
    pub readout: Vec<Matrix>,
    /// Output bias, `K x 1`.
    pub b_y: Matrix,
}

impl NetworkParams {
    pub fn zeros(cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        let bank = || -> Vec<CellParams> {
            (0..cfg.num_layers())
                .map(|n| CellParams::zeros(cfg.cell, cfg.layer_input_dim(n), cfg.hidden[n]))
                .collect()
        };
        Ok(NetworkParams {
            bank1: bank(),
            bank2: cfg.has_bank2().then(bank),
            readout: (0..cfg.readout_matrix_count())
                .map(|i| Matrix::zeros(cfg.num_classes, cfg.readout_cols(i)))
                .collect(),
            b_y: Matrix::zeros(cfg.num_classes, 1),
        })
    }

    pub fn zeros_like(&self) -> Self {
        NetworkParams {
            bank1: self.bank1.iter().map(CellParams::zeros_like).collect(),
            bank2: self
                .bank2
                .as_ref()
                .map(|b| b.iter().map(CellParams::zeros_like).collect()),
            readout: self.readout.iter().map(Matrix::zeros_like).collect(),
            b_y: self.b_y.zeros_like(),
        }
    }

    /// Named tensors in a fixed order: `bank1.<layer>.<name>`, `bank2...`,
    /// `readout.<i>`, `b_y`.
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        let banks = std::iter::once(("bank1", Some(&self.bank1)))
            .chain(std::iter::once(("bank2", self.bank2.as_ref())));
        for (bank_name, bank) in banks {
            for (n, cell) in bank.into_iter().flatten().enumerate() {
                for (name, m) in cell.tensors() {
                    out.push((format!("{bank_name}.{n}.{name}"), m));
                }
            }
        }
        for (i, m) in self.readout.iter().enumerate() {
            out.push((format!("readout.{i}"), m));
        }
        out.push(("b_y".to_string(), &self.b_y));
        out
    }

    /// Same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for cell in self.bank1.iter_mut() {
            out.extend(cell.tensors_mut());
        }
        if let Some(b2) = self.bank2.as_mut() {
            for cell in b2.iter_mut() {
                out.extend(cell.tensors_mut());
            }
        }
        out.extend(self.readout.iter_mut());
        out.push(&mut self.b_y);
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    pub fn add_assign(&mut self, other: &NetworkParams) {
        for (a, (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for m in self.tensors_mut() {
            m.scale(s);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, m)| m.as_slice())
            .map(|v| v * v)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|(_, m)| m.is_finite())
    }

    /// Errors unless every tensor has the shape `cfg` implies.
    pub fn check_shapes(&self, cfg: &NetworkConfig) -> Result<()> {
        let want = NetworkParams::zeros(cfg)?;
        let mine = self.tensors();
        let theirs = want.tensors();
        if mine.len() != theirs.len() {
            return Err(Error::Config(format!(
                "parameters have {} tensors, configuration needs {}",
                mine.len(),
                theirs.len()
            )));
        }
        for ((na, a), (nb, b)) in mine.iter().zip(&theirs) {
            if na != nb || a.shape() != b.shape() {
                return Err(Error::Config(format!(
                    "tensor {na} {:?} does not match {nb} {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Random initial parameters: weights uniform in `[-s, s]` with
/// `s = 1/sqrt(fan_in)`, biases zero. The hybrid `θ2` starts at zero; the
/// backward direction of a bidirectional network is random like the forward one.
pub fn init_params(cfg: &NetworkConfig, rng: &mut Rng) -> Result<NetworkParams> {
    let mut p = NetworkParams::zeros(cfg)?;
    let random_bank = |rng: &mut Rng| -> Vec<CellParams> {
        (0..cfg.num_layers())
            .map(|n| CellParams::uniform(cfg.cell, cfg.layer_input_dim(n), cfg.hidden[n], rng))
            .collect()
    };
    p.bank1 = random_bank(rng);
    if cfg.arch == Arch::Bidirectional {
        p.bank2 = Some(random_bank(rng));
    }
    for m in &mut p.readout {
        let s = (1.0 / m.cols() as f64).sqrt();
        *m = Matrix::uniform(m.rows(), m.cols(), s, rng);
    }
    Ok(p)
}

/// `x_1..x_T` followed by `x_1..x_⌊T/2⌋`.
pub fn build_extended_sequence(seq: &[Vector]) -> Result<Vec<Vector>> {
    if seq.len() < 2 {
        return Err(Error::Input(format!(
            "extended sequence needs at least 2 dots, got {}",
            seq.len()
        )));
    }
    let half = seq.len() / 2;
    Ok(seq.iter().chain(&seq[..half]).cloned().collect())
}

/// Which parameters the hybrid recurrence uses at a time step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    /// `t ≤ ⌊T/2⌋`: `θ1`.
    First,
    /// `⌊T/2⌋ < t ≤ T`: `θ1 + θ2`.
    Middle,
    /// `T < t ≤ T + ⌊T/2⌋`: `θ2`.
    Last,
}

/// Phase of 1-based step `t` in a length-`T` sample.
pub fn phase_of(t: usize, seq_len: usize) -> Result<Phase> {
    let half = seq_len / 2;
    match t {
        0 => Err(Error::Internal("time steps are 1-based".into())),
        t if t <= half => Ok(Phase::First),
        t if t <= seq_len => Ok(Phase::Middle),
        t if t <= seq_len + half => Ok(Phase::Last),
        t => Err(Error::Internal(format!(
            "time step {t} beyond extended length {}",
            seq_len + half
        ))),
    }
}

/// Effective per-layer parameters at 1-based step `t`.
pub fn phase_params(
    t: usize,
    seq_len: usize,
    bank1: &[CellParams],
    bank2: &[CellParams],
) -> Result<Vec<CellParams>> {
    if bank1.len() != bank2.len() {
        return Err(Error::Internal("parameter banks differ in depth".into()));
    }
    Ok(match phase_of(t, seq_len)? {
        Phase::First => bank1.to_vec(),
        Phase::Middle => bank1.iter().zip(bank2).map(|(a, b)| a.sum(b)).collect(),
        Phase::Last => bank2.to_vec(),
    })
}

/// Inverted-dropout mask: each entry is `1/keep` with probability `keep`, else 0.
pub fn dropout_mask(len: usize, keep: f64, rng: &mut Rng) -> Vector {
    let scale = 1.0 / keep;
    (0..len)
        .map(|_| if rng.next_f64() < keep { scale } else { 0.0 })
        .collect()
}

/// One unrolled stack of layers.
#[derive(Debug, Clone)]
pub struct StackTrace {
    /// `[layer][t]`
    pub caches: Vec<Vec<StepCache>>,
    /// `[layer][t]` hidden outputs.
    pub hs: Vec<Vec<Vector>>,
    /// `[layer][t]` dropout mask applied to this layer's output on its way up.
    pub masks: Vec<Vec<Option<Vector>>>,
}

/// Everything recorded by [`forward`] for [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Original sequence length `T`.
    pub seq_len: usize,
    pub stacks: Vec<StackTrace>,
    /// `[slot][layer]` pooled sums.
    pub pooled: Vec<Vec<Vector>>,
    /// Pooled vector entering each readout matrix.
    pub readout_inputs: Vec<Vector>,
    pub logits: Vector,
    /// Number of cell evaluations performed.
    pub cell_evals: usize,
}

/// Slot -> (stack, first step, one past last step), 0-based.
fn slot_windows(arch: Arch, seq_len: usize) -> Vec<(usize, usize, usize)> {
    let half = seq_len / 2;
    match arch {
        Arch::General => vec![(0, 0, seq_len)],
        Arch::Hybrid => vec![(0, 0, seq_len), (0, half, seq_len + half)],
        Arch::Bidirectional => vec![(0, 0, seq_len), (1, 0, seq_len)],
    }
}

fn check_params(params: &NetworkParams, cfg: &NetworkConfig) -> Result<()> {
    let n = cfg.num_layers();
    if params.bank1.len() != n
        || params.bank2.is_some() != cfg.has_bank2()
        || params.bank2.as_ref().is_some_and(|b| b.len() != n)
        || params.readout.len() != cfg.readout_matrix_count()
        || params.b_y.rows() != cfg.num_classes
    {
        return Err(Error::Config(
            "parameters do not match the network configuration".into(),
        ));
    }
    for (layer, cell) in params
        .bank1
        .iter()
        .chain(params.bank2.iter().flatten())
        .enumerate()
    {
        let layer = layer % n;
        if cell.kind() != cfg.cell
            || cell.input_dim() != cfg.layer_input_dim(layer)
            || cell.hidden() != cfg.hidden[layer]
        {
            return Err(Error::Config(format!(
                "layer {layer} parameters do not match the configuration"
            )));
        }
    }
    Ok(())
}

/// Parameters each stack uses, per step. Hybrid precomputes `θ1 + θ2`.
struct Schedule<'a> {
    first: &'a [CellParams],
    middle: Option<Vec<CellParams>>,
    last: Option<&'a [CellParams]>,
}

impl<'a> Schedule<'a> {
    fn for_stack(params: &'a NetworkParams, cfg: &NetworkConfig, stack: usize) -> Result<Self> {
        let bank2 = || {
            params
                .bank2
                .as_deref()
                .ok_or_else(|| Error::Internal("second parameter bank missing".into()))
        };
        Ok(match (cfg.arch, stack) {
            (Arch::Hybrid, _) => {
                let b2 = bank2()?;
                Schedule {
                    first: &params.bank1,
                    middle: Some(params.bank1.iter().zip(b2).map(|(a, b)| a.sum(b)).collect()),
                    last: Some(b2),
                }
            }
            (Arch::Bidirectional, 1) => Schedule {
                first: bank2()?,
                middle: None,
                last: None,
            },
            _ => Schedule {
                first: &params.bank1,
                middle: None,
                last: None,
            },
        })
    }

    /// Parameters at 0-based step `t` and the phase they belong to.
    fn at(&self, t: usize, seq_len: usize) -> (&[CellParams], Phase) {
        match (&self.middle, self.last) {
            (Some(mid), Some(last)) => {
                let half = seq_len / 2;
                if t < half {
                    (self.first, Phase::First)
                } else if t < seq_len {
                    (mid, Phase::Middle)
                } else {
                    (last, Phase::Last)
                }
            }
            _ => (self.first, Phase::First),
        }
    }
}

fn run_stack(
    inputs: &[Vector],
    seq_len: usize,
    sched: &Schedule<'_>,
    cfg: &NetworkConfig,
    dropout: Option<(&mut Rng, f64)>,
) -> Result<StackTrace> {
    let layers = cfg.num_layers();
    let steps = inputs.len();
    let mut states: Vec<CellState> = cfg.hidden.iter().map(|&d| CellState::zeros(d)).collect();
    let mut trace = StackTrace {
        caches: (0..layers).map(|_| Vec::with_capacity(steps)).collect(),
        hs: (0..layers).map(|_| Vec::with_capacity(steps)).collect(),
        masks: (0..layers).map(|_| Vec::with_capacity(steps)).collect(),
    };
    let mut dropout = dropout;
    for (t, x) in inputs.iter().enumerate() {
        let (bank, _) = sched.at(t, seq_len);
        let mut below: Option<Vector> = None;
        for n in 0..layers {
            let layer_in: Vector = match below.take() {
                None => x.clone(),
                Some(lower) => {
                    if cfg.layer_input_dim(n) == lower.len() {
                        lower
                    } else {
                        let mut v = Vec::with_capacity(x.len() + lower.len());
                        v.extend_from_slice(x);
                        v.extend_from_slice(&lower);
                        v
                    }
                }
            };
            let (state, cache) = cell_forward(&layer_in, &states[n], &bank[n])?;
            if n + 1 < layers {
                let mask = match dropout.as_mut() {
                    Some((rng, keep)) if *keep < 1.0 => {
                        Some(dropout_mask(state.h.len(), *keep, rng))
                    }
                    _ => None,
                };
                below = Some(match &mask {
                    Some(m) => state.h.iter().zip(m).map(|(a, b)| a * b).collect(),
                    None => state.h.clone(),
                });
                trace.masks[n].push(mask);
            } else {
                trace.masks[n].push(None);
            }
            trace.hs[n].push(state.h.clone());
            trace.caches[n].push(cache);
            states[n] = state;
        }
    }
    Ok(trace)
}

/// Runs the network on one preprocessed sequence. With `training` set,
/// inter-layer outputs pass through inverted dropout drawn from `rng`.
pub fn forward(
    seq: &[Vector],
    params: &NetworkParams,
    cfg: &NetworkConfig,
    training: bool,
    rng: &mut Rng,
) -> Result<(Vector, ForwardTrace)> {
    cfg.validate()?;
    check_params(params, cfg)?;
    if seq.is_empty() {
        return Err(Error::Input("empty sequence".into()));
    }
    if let Some(bad) = seq.iter().find(|x| x.len() != cfg.input_dim) {
        return Err(Error::Config(format!(
            "sequence dots have dimension {}, network expects {}",
            bad.len(),
            cfg.input_dim
        )));
    }
    let seq_len = seq.len();
    let keep = if training { cfg.dropout_keep } else { 1.0 };

    let mut stacks = Vec::new();
    match cfg.arch {
        Arch::General => {
            let sched = Schedule::for_stack(params, cfg, 0)?;
            stacks.push(run_stack(
                seq,
                seq_len,
                &sched,
                cfg,
                Some((&mut *rng, keep)),
            )?);
        }
        Arch::Hybrid => {
            let ext = build_extended_sequence(seq)?;
            let sched = Schedule::for_stack(params, cfg, 0)?;
            stacks.push(run_stack(
                &ext,
                seq_len,
                &sched,
                cfg,
                Some((&mut *rng, keep)),
            )?);
        }
        Arch::Bidirectional => {
            let sched = Schedule::for_stack(params, cfg, 0)?;
            stacks.push(run_stack(
                seq,
                seq_len,
                &sched,
                cfg,
                Some((&mut *rng, keep)),
            )?);
            let reversed: Vec<Vector> = seq.iter().rev().cloned().collect();
            let sched = Schedule::for_stack(params, cfg, 1)?;
            stacks.push(run_stack(
                &reversed,
                seq_len,
                &sched,
                cfg,
                Some((&mut *rng, keep)),
            )?);
        }
    }
    let cell_evals = stacks
        .iter()
        .map(|s| s.caches.iter().map(Vec::len).sum::<usize>())
        .sum();

    let windows = slot_windows(cfg.arch, seq_len);
    let pooled: Vec<Vec<Vector>> = windows
        .iter()
        .map(|&(stack, lo, hi)| {
            stacks[stack]
                .hs
                .iter()
                .map(|hs| {
                    let mut acc = vec![0.0; hs[0].len()];
                    for h in &hs[lo..hi] {
                        add_into(&mut acc, h);
                    }
                    acc
                })
                .collect()
        })
        .collect();

    let mut readout_inputs: Vec<Vector> =
        params.readout.iter().map(|m| vec![0.0; m.cols()]).collect();
    for (slot, layers) in pooled.iter().enumerate() {
        for (layer, u) in layers.iter().enumerate() {
            if let Some(idx) = cfg.readout_index(slot, layer) {
                add_into(&mut readout_inputs[idx], u);
            }
        }
    }
    let mut logits = params.b_y.as_slice().to_vec();
    for (w, u) in params.readout.iter().zip(&readout_inputs) {
        w.matvec_acc(u, &mut logits);
    }

    let trace = ForwardTrace {
        seq_len,
        stacks,
        pooled,
        readout_inputs,
        logits: logits.clone(),
        cell_evals,
    };
    Ok((logits, trace))
}

/// Logits without dropout.
pub fn predict(seq: &[Vector], params: &NetworkParams, cfg: &NetworkConfig) -> Result<Vector> {
    let mut rng = Rng::new(0);
    forward(seq, params, cfg, false, &mut rng).map(|(logits, _)| logits)
}

/// Exact backpropagation through time. Returns `dL/dθ` for every tensor given
/// `dL/dlogits`. In the hybrid middle phase the effective parameters are
/// `θ1 + θ2`, so that phase's gradient lands in both banks.
pub fn backward(
    trace: &ForwardTrace,
    dlogits: &[f64],
    params: &NetworkParams,
    cfg: &NetworkConfig,
) -> Result<NetworkParams> {
    check_params(params, cfg)?;
    if dlogits.len() != cfg.num_classes || trace.logits.len() != cfg.num_classes {
        return Err(Error::Internal(
            "upstream gradient length does not match the class count".into(),
        ));
    }
    let expected_stacks = if cfg.arch == Arch::Bidirectional {
        2
    } else {
        1
    };
    if trace.stacks.len() != expected_stacks || trace.readout_inputs.len() != params.readout.len() {
        return Err(Error::Internal(
            "trace was produced by a different configuration".into(),
        ));
    }
    let layers = cfg.num_layers();
    let seq_len = trace.seq_len;
    let mut grad = params.zeros_like();

    add_into(grad.b_y.as_mut_slice(), dlogits);
    let mut d_inputs = Vec::with_capacity(params.readout.len());
    for ((w, gw), u) in params
        .readout
        .iter()
        .zip(grad.readout.iter_mut())
        .zip(&trace.readout_inputs)
    {
        gw.add_outer(dlogits, u);
        let mut du = vec![0.0; w.cols()];
        w.tmatvec_acc(dlogits, &mut du);
        d_inputs.push(du);
    }
    let windows = slot_windows(cfg.arch, seq_len);
    // [slot][layer] gradient reaching every h in the slot's window
    let d_pooled: Vec<Vec<Option<&Vector>>> = (0..windows.len())
        .map(|slot| {
            (0..layers)
                .map(|n| cfg.readout_index(slot, n).map(|i| &d_inputs[i]))
                .collect()
        })
        .collect();

    let mut middle_grad = (cfg.arch == Arch::Hybrid).then(|| {
        params
            .bank1
            .iter()
            .map(CellParams::zeros_like)
            .collect::<Vec<_>>()
    });

    for (s, stack) in trace.stacks.iter().enumerate() {
        let sched = Schedule::for_stack(params, cfg, s)?;
        let steps = stack.caches[0].len();
        let mut dh_next: Vec<Vector> = cfg.hidden.iter().map(|&d| vec![0.0; d]).collect();
        let mut dm_next: Vec<Vector> = dh_next.clone();
        for t in (0..steps).rev() {
            let (bank, phase) = sched.at(t, seq_len);
            let mut from_above: Option<Vector> = None;
            for n in (0..layers).rev() {
                let mut dh = std::mem::take(&mut dh_next[n]);
                if let Some(v) = from_above.take() {
                    add_into(&mut dh, &v);
                }
                for (slot, &(ws, lo, hi)) in windows.iter().enumerate() {
                    if ws == s && (lo..hi).contains(&t) {
                        if let Some(d) = d_pooled[slot][n] {
                            add_into(&mut dh, d);
                        }
                    }
                }
                let target = match (cfg.arch, s, phase) {
                    (Arch::Hybrid, _, Phase::Middle) => {
                        &mut middle_grad.as_mut().expect("hybrid")[n]
                    }
                    (Arch::Hybrid, _, Phase::Last) | (Arch::Bidirectional, 1, _) => {
                        &mut grad.bank2.as_mut().expect("second bank")[n]
                    }
                    _ => &mut grad.bank1[n],
                };
                let g = cell_backward_acc(&stack.caches[n][t], &dh, &dm_next[n], &bank[n], target)?;
                dh_next[n] = g.dh_prev;
                dm_next[n] = g.dm_prev;
                if n > 0 {
                    let off = cfg.lower_offset(n);
                    let mut d_lower = g.dx[off..].to_vec();
                    if let Some(mask) = &stack.masks[n - 1][t] {
                        d_lower.iter_mut().zip(mask).for_each(|(d, m)| *d *= m);
                    }
                    from_above = Some(d_lower);
                }
            }
        }
    }

    if let Some(mid) = middle_grad {
        let bank2 = grad.bank2.as_mut().expect("hybrid has a second bank");
        for ((g1, g2), gm) in grad.bank1.iter_mut().zip(bank2.iter_mut()).zip(&mid) {
            g1.add_assign(gm);
            g2.add_assign(gm);
        }
    }
    Ok(grad)
}

/// Elementwise sum of member logits.
pub fn ensemble_predict(logit_sets: &[Vector]) -> Result<Vector> {
    let first = logit_sets
        .first()
        .ok_or_else(|| Error::Input("ensemble needs at least one member".into()))?;
    let mut out = vec![0.0; first.len()];
    for l in logit_sets {
        if l.len() != out.len() {
            return Err(Error::Input(format!(
                "ensemble member has {} logits, expected {}",
                l.len(),
                out.len()
            )));
        }
        add_into(&mut out, l);
    }
    Ok(out)
}
