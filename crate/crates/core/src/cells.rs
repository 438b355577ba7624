//! One time step of each recurrent cell, forward and reverse mode.
//!
//! Every cell keeps its weights as gate banks. A bank holds an input matrix
//! `W_x` (hidden x input), a recurrent matrix `W_h` (hidden x hidden) and
//! optionally a bias. The bank order is fixed per kind:
//!
//! | kind  | banks                                   | biases         |
//! |-------|-----------------------------------------|----------------|
//! | GRU   | update `z`, reset `r`, candidate `n`    | all three      |
//! | LSTM  | input `i`, forget `f`, cell `g`, output `o` | all four   |
//! | MPU   | input `i`, memory `m`, output `o`       | `i` and `o`    |
//! | MPU&C | as MPU, plus compensation `W_xc`        | `i` and `o`    |
//!
//! GRU step:
//! `z = σ(W_xz x + W_hz h + b_z)`, `r = σ(W_xr x + W_hr h + b_r)`,
//! `n = tanh(W_xn x + W_hn (r ⊙ h) + b_n)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
//!
//! LSTM step (no peepholes):
//! `i, f, o = σ(W_x· x + W_h· h + b_·)`, `g = tanh(W_xg x + W_hg h + b_g)`,
//! `c' = f ⊙ c + i ⊙ g`, `h' = o ⊙ tanh(c')`.
//!
//! MPU step:
//! `i = σ(W_xi x + W_hi h + b_i)`,
//! `m' = tanh(i ⊙ (W_xm x) + W_hm (i ⊙ h)) + (1 - i) ⊙ m`,
//! `o = σ(W_xo x + W_ho h + b_o)`, `h' = o ⊙ m'`.
//! The input gate has the hidden width, so it gates the layer input after
//! projection and the previous hidden state before it. The memory update has
//! no bias. MPU&C replaces the output with `h' = tanh(o ⊙ m' + relu(W_xc x))`.

use crate::error::{Error, Result};
use crate::math::{relu, sigmoid, Matrix, Rng, Vector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CellKind {
    Gru,
    Lstm,
    Mpu,
    MpuC,
}

impl CellKind {
    pub const ALL: [CellKind; 4] = [CellKind::Gru, CellKind::Lstm, CellKind::Mpu, CellKind::MpuC];

    /// Number of gate banks; this is the multiplier in the parameter-count formulas.
    pub fn gate_banks(self) -> usize {
        match self {
            CellKind::Lstm => 4,
            _ => 3,
        }
    }

    /// Whether the cell carries a second state vector (LSTM cell, MPU memory pool).
    pub fn has_memory(self) -> bool {
        !matches!(self, CellKind::Gru)
    }

    fn bank_names(self) -> &'static [&'static str] {
        match self {
            CellKind::Gru => &["z", "r", "n"],
            CellKind::Lstm => &["i", "f", "g", "o"],
            CellKind::Mpu | CellKind::MpuC => &["i", "m", "o"],
        }
    }

    fn bank_has_bias(self, bank: usize) -> bool {
        !(matches!(self, CellKind::Mpu | CellKind::MpuC) && bank == 1)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
            CellKind::Mpu => "mpu",
            CellKind::MpuC => "mpu_c",
        }
    }
}

impl std::fmt::Display for CellKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CellKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(CellKind::Gru),
            "lstm" => Ok(CellKind::Lstm),
            "mpu" => Ok(CellKind::Mpu),
            "mpu_c" | "mpuc" | "mpu&c" | "mpu-c" => Ok(CellKind::MpuC),
            other => Err(Error::Config(format!("unknown cell kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateBank {
    pub wx: Matrix,
    pub wh: Matrix,
    pub b: Option<Matrix>,
}

impl GateBank {
    /// `W_x x + W_h h + b`.
    #[inline]
    fn pre(&self, x: &[f64], h: &[f64]) -> Vector {
        let mut out = match &self.b {
            Some(b) => b.as_slice().to_vec(),
            None => vec![0.0; self.wx.rows()],
        };
        self.wx.matvec_acc(x, &mut out);
        self.wh.matvec_acc(h, &mut out);
        out
    }

    /// Accumulates parameter gradients for `pre = W_x x + W_h h + b` and
    /// propagates `dpre` into `dx` and `dh`.
    #[inline]
    fn backward(
        &self,
        grad: &mut GateBank,
        dpre: &[f64],
        x: &[f64],
        h: &[f64],
        dx: &mut [f64],
        dh: &mut [f64],
    ) {
        grad.wx.add_outer(dpre, x);
        grad.wh.add_outer(dpre, h);
        if let Some(gb) = grad.b.as_mut() {
            for (g, d) in gb.as_mut_slice().iter_mut().zip(dpre) {
                *g += d;
            }
        }
        self.wx.tmatvec_acc(dpre, dx);
        self.wh.tmatvec_acc(dpre, dh);
    }
}

/// Weights of one cell at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct CellParams {
    kind: CellKind,
    input_dim: usize,
    hidden: usize,
    pub banks: Vec<GateBank>,
    /// Compensation matrix `W_xc` (MPU&C only).
    pub wc: Option<Matrix>,
}

impl CellParams {
    pub fn zeros(kind: CellKind, input_dim: usize, hidden: usize) -> Self {
        let banks = (0..kind.gate_banks())
            .map(|b| GateBank {
                wx: Matrix::zeros(hidden, input_dim),
                wh: Matrix::zeros(hidden, hidden),
                b: kind.bank_has_bias(b).then(|| Matrix::zeros(hidden, 1)),
            })
            .collect();
        let wc = (kind == CellKind::MpuC).then(|| Matrix::zeros(hidden, input_dim));
        CellParams {
            kind,
            input_dim,
            hidden,
            banks,
            wc,
        }
    }

    /// Weights uniform in `[-s, s]` with `s = 1/sqrt(fan_in)`; biases zero.
    pub fn uniform(kind: CellKind, input_dim: usize, hidden: usize, rng: &mut Rng) -> Self {
        let mut p = Self::zeros(kind, input_dim, hidden);
        let sx = (1.0 / input_dim as f64).sqrt();
        let sh = (1.0 / hidden as f64).sqrt();
        for bank in &mut p.banks {
            bank.wx = Matrix::uniform(hidden, input_dim, sx, rng);
            bank.wh = Matrix::uniform(hidden, hidden, sh, rng);
        }
        if let Some(wc) = p.wc.as_mut() {
            *wc = Matrix::uniform(hidden, input_dim, sx, rng);
        }
        p
    }

    pub fn kind(&self) -> CellKind {
        self.kind
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.kind, self.input_dim, self.hidden)
    }

    /// Named tensors in a fixed order, e.g. `w_xi`, `w_hi`, `b_i`, ...
    pub fn tensors(&self) -> Vec<(String, &Matrix)> {
        let names = self.kind.bank_names();
        let mut out = Vec::new();
        for (bank, name) in self.banks.iter().zip(names) {
            out.push((format!("w_x{name}"), &bank.wx));
            out.push((format!("w_h{name}"), &bank.wh));
            if let Some(b) = &bank.b {
                out.push((format!("b_{name}"), b));
            }
        }
        if let Some(wc) = &self.wc {
            out.push(("w_xc".to_string(), wc));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for bank in &mut self.banks {
            out.push(&mut bank.wx);
            out.push(&mut bank.wh);
            if let Some(b) = bank.b.as_mut() {
                out.push(b);
            }
        }
        if let Some(wc) = self.wc.as_mut() {
            out.push(wc);
        }
        out
    }

    pub fn num_values(&self) -> usize {
        self.tensors().iter().map(|(_, m)| m.len()).sum()
    }

    /// Elementwise sum, used for the middle phase of the hybrid recurrence.
    pub fn sum(&self, other: &CellParams) -> CellParams {
        let mut out = self.clone();
        out.add_assign(other);
        out
    }

    pub fn add_assign(&mut self, other: &CellParams) {
        assert_eq!(
            (self.kind, self.input_dim, self.hidden),
            (other.kind, other.input_dim, other.hidden),
            "cell parameter shape mismatch"
        );
        for (a, b) in self.tensors_mut().into_iter().zip(other.tensors()) {
            a.add_assign(b.1);
        }
    }
}

/// Recurrent state carried between steps. `m` is the LSTM cell state or the
/// MPU memory pool; a GRU keeps it at zero and never reads it.
#[derive(Debug, Clone, PartialEq)]
pub struct CellState {
    pub h: Vector,
    pub m: Vector,
}

impl CellState {
    pub fn zeros(hidden: usize) -> Self {
        CellState {
            h: vec![0.0; hidden],
            m: vec![0.0; hidden],
        }
    }
}

/// Everything a step's backward pass needs.
#[derive(Debug, Clone, PartialEq)]
pub enum StepCache {
    Gru {
        x: Vector,
        h_prev: Vector,
        z: Vector,
        r: Vector,
        n: Vector,
        rh: Vector,
    },
    Lstm {
        x: Vector,
        h_prev: Vector,
        c_prev: Vector,
        i: Vector,
        f: Vector,
        g: Vector,
        o: Vector,
        tc: Vector,
    },
    Mpu {
        x: Vector,
        h_prev: Vector,
        m_prev: Vector,
        i: Vector,
        /// `W_xm x` before gating.
        px: Vector,
        /// `tanh` of the memory update.
        a: Vector,
        o: Vector,
        m: Vector,
        /// MPU&C: `W_xc x` and the final output.
        comp: Option<(Vector, Vector)>,
    },
}

impl StepCache {
    pub fn kind(&self) -> CellKind {
        match self {
            StepCache::Gru { .. } => CellKind::Gru,
            StepCache::Lstm { .. } => CellKind::Lstm,
            StepCache::Mpu { comp: None, .. } => CellKind::Mpu,
            StepCache::Mpu { comp: Some(_), .. } => CellKind::MpuC,
        }
    }

    pub fn input(&self) -> &[f64] {
        match self {
            StepCache::Gru { x, .. } | StepCache::Lstm { x, .. } | StepCache::Mpu { x, .. } => x,
        }
    }
}

fn check_dims(x: &[f64], prev: &CellState, p: &CellParams, expect: CellKind) -> Result<()> {
    let kind_ok = match expect {
        CellKind::Mpu => matches!(p.kind, CellKind::Mpu | CellKind::MpuC),
        k => p.kind == k,
    };
    if !kind_ok {
        return Err(Error::Config(format!(
            "{} step given {} parameters",
            expect, p.kind
        )));
    }
    if x.len() != p.input_dim {
        return Err(Error::Config(format!(
            "cell input has length {}, parameters expect {}",
            x.len(),
            p.input_dim
        )));
    }
    if prev.h.len() != p.hidden || prev.m.len() != p.hidden {
        return Err(Error::Config(format!(
            "cell state has length {}/{}, parameters expect {}",
            prev.h.len(),
            prev.m.len(),
            p.hidden
        )));
    }
    Ok(())
}

/// One step of whatever cell `p` describes.
pub fn cell_forward(x: &[f64], prev: &CellState, p: &CellParams) -> Result<(CellState, StepCache)> {
    match p.kind {
        CellKind::Gru => gru_forward(x, prev, p),
        CellKind::Lstm => lstm_forward(x, prev, p),
        CellKind::Mpu => mpu_forward(x, prev, p),
        CellKind::MpuC => mpu_c_forward(x, prev, p),
    }
}

pub fn gru_forward(x: &[f64], prev: &CellState, p: &CellParams) -> Result<(CellState, StepCache)> {
    check_dims(x, prev, p, CellKind::Gru)?;
    let h_prev = &prev.h;
    let mut z = p.banks[0].pre(x, h_prev);
    z.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut r = p.banks[1].pre(x, h_prev);
    r.iter_mut().for_each(|v| *v = sigmoid(*v));
    let rh: Vector = r.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let n_bank = &p.banks[2];
    let mut n = n_bank
        .b
        .as_ref()
        .map_or_else(|| vec![0.0; p.hidden], |b| b.as_slice().to_vec());
    n_bank.wx.matvec_acc(x, &mut n);
    n_bank.wh.matvec_acc(&rh, &mut n);
    n.iter_mut().for_each(|v| *v = v.tanh());
    let h: Vector = (0..p.hidden)
        .map(|k| (1.0 - z[k]) * n[k] + z[k] * h_prev[k])
        .collect();
    let state = CellState {
        h,
        m: vec![0.0; p.hidden],
    };
    let cache = StepCache::Gru {
        x: x.to_vec(),
        h_prev: h_prev.clone(),
        z,
        r,
        n,
        rh,
    };
    Ok((state, cache))
}

pub fn lstm_forward(x: &[f64], prev: &CellState, p: &CellParams) -> Result<(CellState, StepCache)> {
    check_dims(x, prev, p, CellKind::Lstm)?;
    let h_prev = &prev.h;
    let mut i = p.banks[0].pre(x, h_prev);
    i.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut f = p.banks[1].pre(x, h_prev);
    f.iter_mut().for_each(|v| *v = sigmoid(*v));
    let mut g = p.banks[2].pre(x, h_prev);
    g.iter_mut().for_each(|v| *v = v.tanh());
    let mut o = p.banks[3].pre(x, h_prev);
    o.iter_mut().for_each(|v| *v = sigmoid(*v));
    let c: Vector = (0..p.hidden)
        .map(|k| f[k] * prev.m[k] + i[k] * g[k])
        .collect();
    let tc: Vector = c.iter().map(|v| v.tanh()).collect();
    let h: Vector = o.iter().zip(&tc).map(|(a, b)| a * b).collect();
    let cache = StepCache::Lstm {
        x: x.to_vec(),
        h_prev: h_prev.clone(),
        c_prev: prev.m.clone(),
        i,
        f,
        g,
        o,
        tc,
    };
    Ok((CellState { h, m: c }, cache))
}

fn mpu_step(
    x: &[f64],
    prev: &CellState,
    p: &CellParams,
    forced_gate: Option<&[f64]>,
) -> Result<(CellState, StepCache)> {
    check_dims(x, prev, p, CellKind::Mpu)?;
    let hidden = p.hidden;
    let h_prev = &prev.h;
    let i = match forced_gate {
        Some(g) => {
            if g.len() != hidden {
                return Err(Error::Config(
                    "forced input gate has the wrong length".into(),
                ));
            }
            g.to_vec()
        }
        None => {
            let mut i = p.banks[0].pre(x, h_prev);
            i.iter_mut().for_each(|v| *v = sigmoid(*v));
            i
        }
    };
    let mem = &p.banks[1];
    let px = {
        let mut px = vec![0.0; hidden];
        mem.wx.matvec_acc(x, &mut px);
        px
    };
    let ih: Vector = i.iter().zip(h_prev).map(|(a, b)| a * b).collect();
    let mut q: Vector = i.iter().zip(&px).map(|(a, b)| a * b).collect();
    mem.wh.matvec_acc(&ih, &mut q);
    let a: Vector = q.iter().map(|v| v.tanh()).collect();
    let m: Vector = (0..hidden)
        .map(|k| a[k] + (1.0 - i[k]) * prev.m[k])
        .collect();
    let mut o = p.banks[2].pre(x, h_prev);
    o.iter_mut().for_each(|v| *v = sigmoid(*v));
    let om: Vector = o.iter().zip(&m).map(|(a, b)| a * b).collect();

    let (h, comp) = match &p.wc {
        Some(wc) if p.kind == CellKind::MpuC => {
            let c = wc.matvec(x)?;
            let h: Vector = om
                .iter()
                .zip(&c)
                .map(|(s, cv)| (s + relu(*cv)).tanh())
                .collect();
            (h.clone(), Some((c, h)))
        }
        _ => (om, None),
    };
    let cache = StepCache::Mpu {
        x: x.to_vec(),
        h_prev: h_prev.clone(),
        m_prev: prev.m.clone(),
        i,
        px,
        a,
        o,
        m: m.clone(),
        comp,
    };
    Ok((CellState { h, m }, cache))
}

pub fn mpu_forward(x: &[f64], prev: &CellState, p: &CellParams) -> Result<(CellState, StepCache)> {
    if p.kind != CellKind::Mpu {
        return Err(Error::Config(format!(
            "mpu step given {} parameters",
            p.kind
        )));
    }
    mpu_step(x, prev, p, None)
}

pub fn mpu_c_forward(
    x: &[f64],
    prev: &CellState,
    p: &CellParams,
) -> Result<(CellState, StepCache)> {
    if p.kind != CellKind::MpuC || p.wc.is_none() {
        return Err(Error::Config(
            "mpu_c step needs MPU&C parameters with W_xc".into(),
        ));
    }
    mpu_step(x, prev, p, None)
}

/// MPU or MPU&C step with the input gate replaced by `gate` instead of the
/// sigmoid. Exists to probe the memory pool's gate limits exactly.
pub fn mpu_forward_with_input_gate(
    x: &[f64],
    prev: &CellState,
    p: &CellParams,
    gate: &[f64],
) -> Result<(CellState, StepCache)> {
    mpu_step(x, prev, p, Some(gate))
}

/// Gradients flowing out of one step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepGradient {
    pub dx: Vector,
    pub dh_prev: Vector,
    pub dm_prev: Vector,
}

/// Gradient of a step, with a fresh parameter-gradient buffer.
pub fn cell_backward(
    cache: &StepCache,
    dh: &[f64],
    dm: &[f64],
    p: &CellParams,
) -> Result<(StepGradient, CellParams)> {
    let mut grad = p.zeros_like();
    let g = cell_backward_acc(cache, dh, dm, p, &mut grad)?;
    Ok((g, grad))
}

/// Reverse-mode step: given `dL/dh_t` and `dL/dm_t` (the latter from later
/// steps only), adds `dL/dθ` into `grad` and returns the gradients for the
/// step's input and previous state.
pub fn cell_backward_acc(
    cache: &StepCache,
    dh: &[f64],
    dm: &[f64],
    p: &CellParams,
    grad: &mut CellParams,
) -> Result<StepGradient> {
    if cache.kind() != p.kind || grad.kind != p.kind {
        return Err(Error::Internal(format!(
            "backward for {} cache with {} parameters",
            cache.kind(),
            p.kind
        )));
    }
    if dh.len() != p.hidden || dm.len() != p.hidden {
        return Err(Error::Internal(
            "upstream gradient has the wrong length".into(),
        ));
    }
    let hidden = p.hidden;
    let mut dx = vec![0.0; p.input_dim];
    let mut dh_prev = vec![0.0; hidden];
    let mut dm_prev = vec![0.0; hidden];

    match cache {
        StepCache::Gru {
            x,
            h_prev,
            z,
            r,
            n,
            rh,
        } => {
            let mut dpz = vec![0.0; hidden];
            let mut dpn = vec![0.0; hidden];
            for k in 0..hidden {
                let dn = dh[k] * (1.0 - z[k]);
                let dz = dh[k] * (h_prev[k] - n[k]);
                dh_prev[k] += dh[k] * z[k];
                dpn[k] = dn * (1.0 - n[k] * n[k]);
                dpz[k] = dz * z[k] * (1.0 - z[k]);
            }
            // candidate bank sees r ⊙ h instead of h
            let nb = &p.banks[2];
            let gn = &mut grad.banks[2];
            gn.wx.add_outer(&dpn, x);
            gn.wh.add_outer(&dpn, rh);
            if let Some(b) = gn.b.as_mut() {
                crate::math::add_into(b.as_mut_slice(), &dpn);
            }
            nb.wx.tmatvec_acc(&dpn, &mut dx);
            let mut drh = vec![0.0; hidden];
            nb.wh.tmatvec_acc(&dpn, &mut drh);
            let mut dpr = vec![0.0; hidden];
            for k in 0..hidden {
                dh_prev[k] += drh[k] * r[k];
                let dr = drh[k] * h_prev[k];
                dpr[k] = dr * r[k] * (1.0 - r[k]);
            }
            p.banks[0].backward(&mut grad.banks[0], &dpz, x, h_prev, &mut dx, &mut dh_prev);
            p.banks[1].backward(&mut grad.banks[1], &dpr, x, h_prev, &mut dx, &mut dh_prev);
        }
        StepCache::Lstm {
            x,
            h_prev,
            c_prev,
            i,
            f,
            g,
            o,
            tc,
        } => {
            let mut dpi = vec![0.0; hidden];
            let mut dpf = vec![0.0; hidden];
            let mut dpg = vec![0.0; hidden];
            let mut dpo = vec![0.0; hidden];
            for k in 0..hidden {
                let do_ = dh[k] * tc[k];
                let dc = dm[k] + dh[k] * o[k] * (1.0 - tc[k] * tc[k]);
                dpi[k] = dc * g[k] * i[k] * (1.0 - i[k]);
                dpf[k] = dc * c_prev[k] * f[k] * (1.0 - f[k]);
                dpg[k] = dc * i[k] * (1.0 - g[k] * g[k]);
                dpo[k] = do_ * o[k] * (1.0 - o[k]);
                dm_prev[k] = dc * f[k];
            }
            for (b, d) in [&dpi, &dpf, &dpg, &dpo].into_iter().enumerate() {
                p.banks[b].backward(&mut grad.banks[b], d, x, h_prev, &mut dx, &mut dh_prev);
            }
        }
        StepCache::Mpu {
            x,
            h_prev,
            m_prev,
            i,
            px,
            a,
            o,
            m,
            comp,
        } => {
            // ds: gradient w.r.t. o ⊙ m
            let ds: Vector = match comp {
                None => dh.to_vec(),
                Some((c, h)) => {
                    let ds: Vector = (0..hidden).map(|k| dh[k] * (1.0 - h[k] * h[k])).collect();
                    let dc: Vector = (0..hidden)
                        .map(|k| if c[k] > 0.0 { ds[k] } else { 0.0 })
                        .collect();
                    let (Some(wc), Some(gwc)) = (p.wc.as_ref(), grad.wc.as_mut()) else {
                        return Err(Error::Internal("MPU&C parameters without W_xc".into()));
                    };
                    gwc.add_outer(&dc, x);
                    wc.tmatvec_acc(&dc, &mut dx);
                    ds
                }
            };
            let mut dpo = vec![0.0; hidden];
            let mut dq = vec![0.0; hidden];
            let mut di = vec![0.0; hidden];
            for k in 0..hidden {
                let dmk = dm[k] + ds[k] * o[k];
                dpo[k] = ds[k] * m[k] * o[k] * (1.0 - o[k]);
                dq[k] = dmk * (1.0 - a[k] * a[k]);
                dm_prev[k] = dmk * (1.0 - i[k]);
                di[k] = -dmk * m_prev[k] + dq[k] * px[k];
            }
            // memory bank: q = i ⊙ (W_xm x) + W_hm (i ⊙ h)
            let mb = &p.banks[1];
            let gm = &mut grad.banks[1];
            let dqi: Vector = dq.iter().zip(i).map(|(d, g)| d * g).collect();
            gm.wx.add_outer(&dqi, x);
            mb.wx.tmatvec_acc(&dqi, &mut dx);
            let ih: Vector = i.iter().zip(h_prev).map(|(a, b)| a * b).collect();
            gm.wh.add_outer(&dq, &ih);
            let mut dih = vec![0.0; hidden];
            mb.wh.tmatvec_acc(&dq, &mut dih);
            let mut dpi = vec![0.0; hidden];
            for k in 0..hidden {
                di[k] += dih[k] * h_prev[k];
                dh_prev[k] += dih[k] * i[k];
                dpi[k] = di[k] * i[k] * (1.0 - i[k]);
            }
            p.banks[0].backward(&mut grad.banks[0], &dpi, x, h_prev, &mut dx, &mut dh_prev);
            p.banks[2].backward(&mut grad.banks[2], &dpo, x, h_prev, &mut dx, &mut dh_prev);
        }
    }
    Ok(StepGradient {
        dx,
        dh_prev,
        dm_prev,
    })
}
