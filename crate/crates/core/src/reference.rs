//! Double-double arithmetic and an extended-precision forward pass.
//!
//! The gradient checker differences the loss in this precision (about 32
//! significant digits), so the finite-difference side is not limited by the
//! last bits of an `f64` loss. The forward pass here is written separately
//! from [`crate::network::forward`] and also serves as a cross-check of it.

use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::cells::{CellKind, CellParams};
use crate::error::{Error, Result};
use crate::math::{Matrix, Vector};
use crate::network::{Arch, NetworkConfig, NetworkParams};

/// Unevaluated sum `hi + lo` with `|lo| <= ulp(hi) / 2`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

const LN_2: Dd = Dd {
    hi: std::f64::consts::LN_2,
    lo: 2.319_046_813_846_299_6e-17,
};

#[inline]
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

#[inline]
fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[inline]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

impl Dd {
    pub const ZERO: Dd = Dd { hi: 0.0, lo: 0.0 };
    pub const ONE: Dd = Dd { hi: 1.0, lo: 0.0 };

    pub fn new(v: f64) -> Self {
        Dd { hi: v, lo: 0.0 }
    }

    pub fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn mul_pow2(self, k: i32) -> Self {
        let s = 2f64.powi(k);
        Dd {
            hi: self.hi * s,
            lo: self.lo * s,
        }
    }

    pub fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::new(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::ZERO;
        }
        let k = (self.hi / std::f64::consts::LN_2).round();
        // |r| <= ln2/2, then scaled by 2^-10 so the series converges fast.
        let r = (self - LN_2 * Dd::new(k)).mul_pow2(-10);
        let mut term = r;
        let mut sum = r;
        for i in 2..=9 {
            term = term * r / Dd::new(i as f64);
            sum = sum + term;
        }
        // expm1(2r) = expm1(r) * (expm1(r) + 2)
        for _ in 0..10 {
            sum = sum * (sum + Dd::new(2.0));
        }
        (sum + Dd::ONE).mul_pow2(k as i32)
    }

    pub fn ln(self) -> Self {
        if self.hi <= 0.0 {
            return Dd::new(f64::NAN);
        }
        let mut y = Dd::new(self.hi.ln());
        for _ in 0..2 {
            y = y + self * (-y).exp() - Dd::ONE;
        }
        y
    }

    pub fn tanh(self) -> Self {
        let a = if self.hi < 0.0 { -self } else { self };
        let e = (Dd::new(-2.0) * a).exp();
        let t = (Dd::ONE - e) / (Dd::ONE + e);
        if self.hi < 0.0 {
            -t
        } else {
            t
        }
    }

    pub fn sigmoid(self) -> Self {
        if self.hi >= 0.0 {
            Dd::ONE / (Dd::ONE + (-self).exp())
        } else {
            let e = self.exp();
            e / (Dd::ONE + e)
        }
    }

    pub fn relu(self) -> Self {
        if self.hi > 0.0 {
            self
        } else {
            Dd::ZERO
        }
    }
}

impl From<f64> for Dd {
    fn from(v: f64) -> Self {
        Dd::new(v)
    }
}

impl Neg for Dd {
    type Output = Dd;
    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Add for Dd {
    type Output = Dd;
    fn add(self, b: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, b.hi);
        let (t, f) = two_sum(self.lo, b.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Sub for Dd {
    type Output = Dd;
    fn sub(self, b: Dd) -> Dd {
        self + (-b)
    }
}

impl Mul for Dd {
    type Output = Dd;
    fn mul(self, b: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, b.hi);
        let e = e + (self.hi * b.lo + self.lo * b.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;
    fn div(self, b: Dd) -> Dd {
        let q1 = self.hi / b.hi;
        let r = self - b * Dd::new(q1);
        let q2 = r.hi / b.hi;
        let r = r - b * Dd::new(q2);
        let q3 = r.hi / b.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::new(q3)
    }
}

#[derive(Debug, Clone)]
struct DdMatrix {
    cols: usize,
    data: Vec<Dd>,
}

impl DdMatrix {
    fn from_matrix(m: &Matrix) -> Self {
        DdMatrix {
            cols: m.cols(),
            data: m.as_slice().iter().map(|&v| Dd::new(v)).collect(),
        }
    }

    fn sum(&self, other: &DdMatrix) -> DdMatrix {
        DdMatrix {
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a + b)
                .collect(),
        }
    }

    fn matvec_acc(&self, x: &[Dd], out: &mut [Dd]) {
        for (r, o) in out.iter_mut().enumerate() {
            let row = &self.data[r * self.cols..(r + 1) * self.cols];
            for (&w, &v) in row.iter().zip(x) {
                *o = *o + w * v;
            }
        }
    }
}

#[derive(Debug, Clone)]
struct DdBank {
    wx: DdMatrix,
    wh: DdMatrix,
    b: Option<DdMatrix>,
}

#[derive(Debug, Clone)]
struct DdCell {
    hidden: usize,
    banks: Vec<DdBank>,
    wc: Option<DdMatrix>,
}

impl DdCell {
    fn sum(&self, other: &DdCell) -> DdCell {
        DdCell {
            hidden: self.hidden,
            banks: self
                .banks
                .iter()
                .zip(&other.banks)
                .map(|(a, b)| DdBank {
                    wx: a.wx.sum(&b.wx),
                    wh: a.wh.sum(&b.wh),
                    b: a.b.as_ref().zip(b.b.as_ref()).map(|(x, y)| x.sum(y)),
                })
                .collect(),
            wc: self
                .wc
                .as_ref()
                .zip(other.wc.as_ref())
                .map(|(x, y)| x.sum(y)),
        }
    }

    fn tensors_mut(&mut self) -> Vec<&mut DdMatrix> {
        let mut out = Vec::new();
        for g in self.banks.iter_mut() {
            out.push(&mut g.wx);
            out.push(&mut g.wh);
            if let Some(b) = g.b.as_mut() {
                out.push(b);
            }
        }
        if let Some(wc) = self.wc.as_mut() {
            out.push(wc);
        }
        out
    }

    fn pre(&self, bank: usize, x: &[Dd], h: &[Dd]) -> Vec<Dd> {
        let g = &self.banks[bank];
        let mut out = match &g.b {
            Some(b) => b.data.clone(),
            None => vec![Dd::ZERO; self.hidden],
        };
        g.wx.matvec_acc(x, &mut out);
        g.wh.matvec_acc(h, &mut out);
        out
    }

    /// One step; returns `(h, m)` where `m` is the LSTM cell or MPU memory.
    fn step(&self, kind: CellKind, x: &[Dd], h: &[Dd], m: &[Dd]) -> (Vec<Dd>, Vec<Dd>) {
        let d = self.hidden;
        match kind {
            CellKind::Gru => {
                let z: Vec<Dd> = self.pre(0, x, h).into_iter().map(Dd::sigmoid).collect();
                let r: Vec<Dd> = self.pre(1, x, h).into_iter().map(Dd::sigmoid).collect();
                let rh: Vec<Dd> = r.iter().zip(h).map(|(&a, &b)| a * b).collect();
                let n: Vec<Dd> = self.pre(2, x, &rh).into_iter().map(Dd::tanh).collect();
                let h_new = (0..d)
                    .map(|k| (Dd::ONE - z[k]) * n[k] + z[k] * h[k])
                    .collect();
                (h_new, Vec::new())
            }
            CellKind::Lstm => {
                let i: Vec<Dd> = self.pre(0, x, h).into_iter().map(Dd::sigmoid).collect();
                let f: Vec<Dd> = self.pre(1, x, h).into_iter().map(Dd::sigmoid).collect();
                let g: Vec<Dd> = self.pre(2, x, h).into_iter().map(Dd::tanh).collect();
                let o: Vec<Dd> = self.pre(3, x, h).into_iter().map(Dd::sigmoid).collect();
                let c: Vec<Dd> = (0..d).map(|k| f[k] * m[k] + i[k] * g[k]).collect();
                let h_new = (0..d).map(|k| o[k] * c[k].tanh()).collect();
                (h_new, c)
            }
            CellKind::Mpu | CellKind::MpuC => {
                let i: Vec<Dd> = self.pre(0, x, h).into_iter().map(Dd::sigmoid).collect();
                let mut px = vec![Dd::ZERO; d];
                self.banks[1].wx.matvec_acc(x, &mut px);
                let ih: Vec<Dd> = i.iter().zip(h).map(|(&a, &b)| a * b).collect();
                let mut q: Vec<Dd> = (0..d).map(|k| i[k] * px[k]).collect();
                self.banks[1].wh.matvec_acc(&ih, &mut q);
                let mem: Vec<Dd> = (0..d)
                    .map(|k| q[k].tanh() + (Dd::ONE - i[k]) * m[k])
                    .collect();
                let o: Vec<Dd> = self.pre(2, x, h).into_iter().map(Dd::sigmoid).collect();
                let mut h_new: Vec<Dd> = (0..d).map(|k| o[k] * mem[k]).collect();
                if let Some(wc) = &self.wc {
                    let mut c = vec![Dd::ZERO; d];
                    wc.matvec_acc(x, &mut c);
                    for (hk, ck) in h_new.iter_mut().zip(c) {
                        *hk = (*hk + ck.relu()).tanh();
                    }
                }
                (h_new, mem)
            }
        }
    }
}

/// Extended-precision copy of [`NetworkParams`] whose entries can be nudged.
#[derive(Debug, Clone)]
pub struct ReferenceNet {
    cfg: NetworkConfig,
    bank1: Vec<DdCell>,
    bank2: Option<Vec<DdCell>>,
    readout: Vec<DdMatrix>,
    b_y: DdMatrix,
}

fn dd_cell(c: &CellParams) -> DdCell {
    DdCell {
        hidden: c.hidden(),
        banks: c
            .banks
            .iter()
            .map(|g| DdBank {
                wx: DdMatrix::from_matrix(&g.wx),
                wh: DdMatrix::from_matrix(&g.wh),
                b: g.b.as_ref().map(DdMatrix::from_matrix),
            })
            .collect(),
        wc: c.wc.as_ref().map(DdMatrix::from_matrix),
    }
}

fn dd_cells(cells: &[CellParams]) -> Vec<DdCell> {
    cells.iter().map(dd_cell).collect()
}

fn nudge_entry(
    tensors: &mut [&mut DdMatrix],
    tensor: usize,
    index: usize,
    delta: f64,
) -> Result<Dd> {
    let m = tensors
        .get_mut(tensor)
        .ok_or_else(|| Error::Internal(format!("no tensor {tensor}")))?;
    let v = m
        .data
        .get_mut(index)
        .ok_or_else(|| Error::Internal(format!("tensor {tensor} has no entry {index}")))?;
    let old = *v;
    *v = old + Dd::new(delta);
    Ok(old)
}

/// Extended-precision copy of one cell's parameters.
#[derive(Debug, Clone)]
pub struct ReferenceCell {
    kind: CellKind,
    cell: DdCell,
}

impl ReferenceCell {
    pub fn new(p: &CellParams) -> Self {
        ReferenceCell {
            kind: p.kind(),
            cell: dd_cell(p),
        }
    }

    /// Adds `delta` to entry `index` of tensor `tensor` (in [`CellParams::tensors`]
    /// order) and returns the old value.
    pub fn nudge(&mut self, tensor: usize, index: usize, delta: f64) -> Result<Dd> {
        nudge_entry(&mut self.cell.tensors_mut(), tensor, index, delta)
    }

    pub fn set(&mut self, tensor: usize, index: usize, value: Dd) -> Result<()> {
        self.nudge(tensor, index, 0.0)?;
        self.cell.tensors_mut()[tensor].data[index] = value;
        Ok(())
    }

    /// One step from `(h, m)`; returns the new `(h, m)`. For GRU `m` is ignored
    /// and returned empty.
    pub fn step(&self, x: &[Dd], h: &[Dd], m: &[Dd]) -> (Vec<Dd>, Vec<Dd>) {
        self.cell.step(self.kind, x, h, m)
    }
}

impl ReferenceNet {
    pub fn new(params: &NetworkParams, cfg: &NetworkConfig) -> Result<Self> {
        cfg.validate()?;
        params.check_shapes(cfg)?;
        Ok(ReferenceNet {
            cfg: cfg.clone(),
            bank1: dd_cells(&params.bank1),
            bank2: params.bank2.as_deref().map(dd_cells),
            readout: params.readout.iter().map(DdMatrix::from_matrix).collect(),
            b_y: DdMatrix::from_matrix(&params.b_y),
        })
    }

    /// Tensors in the order of [`NetworkParams::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut DdMatrix> {
        let mut out = Vec::new();
        let banks = self.bank1.iter_mut().chain(self.bank2.iter_mut().flatten());
        for cell in banks {
            out.extend(cell.tensors_mut());
        }
        out.extend(self.readout.iter_mut());
        out.push(&mut self.b_y);
        out
    }

    /// Adds `delta` to entry `index` of tensor `tensor` and returns the old value.
    pub fn nudge(&mut self, tensor: usize, index: usize, delta: f64) -> Result<Dd> {
        nudge_entry(&mut self.tensors_mut(), tensor, index, delta)
    }

    pub fn set(&mut self, tensor: usize, index: usize, value: Dd) -> Result<()> {
        self.nudge(tensor, index, 0.0)?;
        self.tensors_mut()[tensor].data[index] = value;
        Ok(())
    }

    fn run_stack(&self, inputs: &[Vec<Dd>], seq_len: usize, stack: usize) -> Vec<Vec<Vec<Dd>>> {
        let cfg = &self.cfg;
        let layers = cfg.num_layers();
        let middle: Option<Vec<DdCell>> = match (cfg.arch, &self.bank2) {
            (Arch::Hybrid, Some(b2)) => {
                Some(self.bank1.iter().zip(b2).map(|(a, b)| a.sum(b)).collect())
            }
            _ => None,
        };
        let half = seq_len / 2;
        let mut h: Vec<Vec<Dd>> = cfg.hidden.iter().map(|&d| vec![Dd::ZERO; d]).collect();
        let mut m = h.clone();
        let mut hs = vec![Vec::with_capacity(inputs.len()); layers];
        for (t, x) in inputs.iter().enumerate() {
            let bank: &[DdCell] = match (cfg.arch, stack) {
                (Arch::Hybrid, _) if t >= seq_len => self.bank2.as_deref().unwrap_or(&self.bank1),
                (Arch::Hybrid, _) if t >= half => middle.as_deref().unwrap_or(&self.bank1),
                (Arch::Bidirectional, 1) => self.bank2.as_deref().unwrap_or(&self.bank1),
                _ => &self.bank1,
            };
            for n in 0..layers {
                let input: Vec<Dd> = if n == 0 {
                    x.clone()
                } else if cfg.cell == CellKind::MpuC || !cfg.skip_input {
                    h[n - 1].clone()
                } else {
                    x.iter().chain(&h[n - 1]).copied().collect()
                };
                let (hn, mn) = bank[n].step(cfg.cell, &input, &h[n], &m[n]);
                hs[n].push(hn.clone());
                h[n] = hn;
                if !mn.is_empty() {
                    m[n] = mn;
                }
            }
        }
        hs
    }

    pub fn logits(&self, seq: &[Vector]) -> Result<Vec<Dd>> {
        let cfg = &self.cfg;
        let t_len = seq.len();
        if t_len < 2 && cfg.arch == Arch::Hybrid {
            return Err(Error::Input("hybrid needs at least two dots".into()));
        }
        if seq.is_empty() || seq.iter().any(|x| x.len() != cfg.input_dim) {
            return Err(Error::Input(
                "sequence does not match the input width".into(),
            ));
        }
        let xs: Vec<Vec<Dd>> = seq
            .iter()
            .map(|x| x.iter().map(|&v| Dd::new(v)).collect())
            .collect();
        let half = t_len / 2;
        // (hidden states per layer, first step, one past last step) per slot
        let windows: Vec<(Vec<Vec<Vec<Dd>>>, usize, usize)> = match cfg.arch {
            Arch::General => vec![(self.run_stack(&xs, t_len, 0), 0, t_len)],
            Arch::Hybrid => {
                let ext: Vec<Vec<Dd>> = xs.iter().chain(&xs[..half]).cloned().collect();
                let hs = self.run_stack(&ext, t_len, 0);
                vec![(hs.clone(), 0, t_len), (hs, half, t_len + half)]
            }
            Arch::Bidirectional => {
                let rev: Vec<Vec<Dd>> = xs.iter().rev().cloned().collect();
                vec![
                    (self.run_stack(&xs, t_len, 0), 0, t_len),
                    (self.run_stack(&rev, t_len, 1), 0, t_len),
                ]
            }
        };
        let mut logits = self.b_y.data.clone();
        for (slot, (hs, lo, hi)) in windows.iter().enumerate() {
            for (layer, states) in hs.iter().enumerate() {
                if let Some(idx) = cfg.readout_index(slot, layer) {
                    let mut u = vec![Dd::ZERO; states[0].len()];
                    for h in &states[*lo..*hi] {
                        for (a, &b) in u.iter_mut().zip(h) {
                            *a = *a + b;
                        }
                    }
                    self.readout[idx].matvec_acc(&u, &mut logits);
                }
            }
        }
        Ok(logits)
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, seq: &[Vector], label: usize) -> Result<Dd> {
        let z = self.logits(seq)?;
        if label >= z.len() {
            return Err(Error::Input(format!("label {label} out of range")));
        }
        let max = z.iter().map(|v| v.hi).fold(f64::NEG_INFINITY, f64::max);
        let max = Dd::new(max);
        let sum = z.iter().fold(Dd::ZERO, |acc, &v| acc + (v - max).exp());
        Ok(max + sum.ln() - z[label])
    }
}
