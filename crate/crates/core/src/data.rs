//! Trajectory preprocessing, the dataset text format, and the synthetic
//! generator used in place of the original handwriting corpora.
//!
//! Text format, UTF-8, one sample per line:
//!
//! ```text
//! # comment lines start with '#', blank lines are ignored
//! 3	12.5,40;13,41.25;14,43
//! ```
//!
//! The label is a decimal class index, then one TAB, then dots separated by
//! `;`, each dot being `m,n` or `m,n,p` (`p` is the pen channel). All dots in
//! a file share the same dimension. Writers emit the shortest decimal that
//! round-trips the `f64` exactly.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::{Rng, Vector};
use crate::training::Sample;

/// Upper end of the coordinate range after scaling.
pub const SCALE_MAX: f64 = 64.0;

#[derive(Debug, Clone, PartialEq)]
pub struct RawTrajectory {
    /// `(m, n)` or `(m, n, pen)` per dot.
    pub dots: Vec<Vector>,
    pub label: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<RawTrajectory>,
    pub num_classes: usize,
    /// 2 or 3.
    pub dim: usize,
}

impl Dataset {
    /// Samples per class, indexed by label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// Preprocessed samples ready for the network.
    pub fn to_samples(&self) -> Result<Vec<Sample>> {
        self.samples
            .iter()
            .map(|t| {
                Ok(Sample {
                    seq: preprocess(t)?,
                    label: t.label,
                })
            })
            .collect()
    }
}

fn spatial_axes(dots: &[Vector]) -> usize {
    dots.first().map_or(0, |d| d.len().min(2))
}

/// Maps each spatial axis independently onto `[0, 64]`. A constant axis maps
/// to 32. The pen channel is copied through.
pub fn scale_to_range(dots: &[Vector]) -> Vec<Vector> {
    let mut out = dots.to_vec();
    for axis in 0..spatial_axes(dots) {
        let (lo, hi) = dots
            .iter()
            .map(|d| d[axis])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
                (lo.min(v), hi.max(v))
            });
        let range = hi - lo;
        for (o, d) in out.iter_mut().zip(dots) {
            o[axis] = if range > 0.0 {
                (d[axis] - lo) / range * SCALE_MAX
            } else {
                SCALE_MAX / 2.0
            };
        }
    }
    out
}

/// Subtracts the per-axis mean of the spatial axes.
pub fn center(dots: &[Vector]) -> Vec<Vector> {
    let mut out = dots.to_vec();
    let n = dots.len() as f64;
    for axis in 0..spatial_axes(dots) {
        let mean = dots.iter().map(|d| d[axis]).sum::<f64>() / n;
        for o in &mut out {
            o[axis] -= mean;
        }
    }
    out
}

/// Scale to `[0, 64]`, then zero-mean, per axis.
pub fn preprocess(traj: &RawTrajectory) -> Result<Vec<Vector>> {
    if traj.dots.len() < 2 {
        return Err(Error::Input(format!(
            "trajectory needs at least 2 dots, has {}",
            traj.dots.len()
        )));
    }
    let dim = traj.dots[0].len();
    if !(2..=3).contains(&dim) || traj.dots.iter().any(|d| d.len() != dim) {
        return Err(Error::Input("dots must all be 2-D or all be 3-D".into()));
    }
    if traj.dots.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite coordinate".into()));
    }
    Ok(center(&scale_to_range(&traj.dots)))
}

/// Serializes in the text format described in the module docs.
pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = String::new();
    for s in &ds.samples {
        write!(out, "{}\t", s.label).expect("writing to a String");
        for (i, dot) in s.dots.iter().enumerate() {
            if i > 0 {
                out.push(';');
            }
            for (j, v) in dot.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                write!(out, "{v}").expect("writing to a String");
            }
        }
        out.push('\n');
    }
    out
}

/// Parses the text format. `num_classes` is one more than the largest label.
pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut samples = Vec::new();
    let mut dim: Option<usize> = None;
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |msg: String| Error::Parse { line: line_no, msg };
        let (label, body) = line
            .split_once('\t')
            .ok_or_else(|| parse_err("expected `label<TAB>dots`".into()))?;
        let label: usize = label
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label `{label}`")))?;
        let mut dots = Vec::new();
        for dot in body.split(';') {
            let coords = dot
                .split(',')
                .map(|c| {
                    c.trim()
                        .parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| parse_err(format!("bad coordinate `{c}`")))
                })
                .collect::<Result<Vector>>()?;
            if !(2..=3).contains(&coords.len()) {
                return Err(parse_err(format!(
                    "dot `{dot}` must have 2 or 3 coordinates"
                )));
            }
            match dim {
                None => dim = Some(coords.len()),
                Some(d) if d != coords.len() => {
                    return Err(Error::Format(format!(
                        "line {line_no}: dot of dimension {} in a {d}-D dataset",
                        coords.len()
                    )))
                }
                _ => {}
            }
            dots.push(coords);
        }
        samples.push(RawTrajectory { dots, label });
    }
    let num_classes = samples.iter().map(|s| s.label + 1).max().unwrap_or(0);
    Ok(Dataset {
        samples,
        num_classes,
        dim: dim.unwrap_or(2),
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&text)
}

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_dataset(ds)).map_err(|e| Error::io(path, e))
}

/// Curve parameters of one synthetic class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassCurve {
    pub omega_m: f64,
    pub omega_n: f64,
    pub phase: f64,
}

/// Amplitudes of the synthetic curves, in raw coordinate units.
const AMP_M: f64 = 24.0;
const AMP_N: f64 = 24.0;
pub const DEFAULT_JITTER: f64 = 1.5;
pub const SYNTH_MIN_LEN: usize = 40;
pub const SYNTH_MAX_LEN: usize = 120;

/// Frequencies sit on a 4x4 grid with spacing 0.5 (plus a seeded wobble of at
/// most ±0.1), so the first 16 classes differ in frequency; later classes
/// shift phase by 0.7 rad per block of 16.
pub fn class_curve(class: usize, seed: u64) -> ClassCurve {
    let mut rng = Rng::derive(seed, &[0xC1A5_5000, class as u64]);
    ClassCurve {
        omega_m: 1.0 + 0.5 * (class % 4) as f64 + rng.uniform(-0.1, 0.1),
        omega_n: 1.0 + 0.5 * ((class / 4) % 4) as f64 + rng.uniform(-0.1, 0.1),
        phase: 0.7 * (class / 16) as f64 + rng.uniform(0.0, 0.3),
    }
}

/// Deterministic synthetic trajectories: `per_class` samples for each of
/// `num_classes` classes, each a single smooth stroke
/// `m(u) = 32 + A sin(ω_m u + φ)`, `n(u) = 32 + B cos(ω_n u)` over
/// `u ∈ [0, 2π]` with `T ∈ [40, 120]` dots and Gaussian jitter. With
/// `dim == 3` a pen channel is 1 for the first half of the stroke and 0 after.
pub fn synth_generate(
    num_classes: usize,
    per_class: usize,
    seed: u64,
    dim: usize,
) -> Result<Dataset> {
    synth_generate_with_jitter(num_classes, per_class, seed, dim, DEFAULT_JITTER)
}

pub fn synth_generate_with_jitter(
    num_classes: usize,
    per_class: usize,
    seed: u64,
    dim: usize,
    jitter: f64,
) -> Result<Dataset> {
    if num_classes < 2 || per_class < 1 {
        return Err(Error::Input(
            "need at least 2 classes and 1 sample per class".into(),
        ));
    }
    if !(2..=3).contains(&dim) {
        return Err(Error::Input(format!("dimension must be 2 or 3, got {dim}")));
    }
    let mut samples = Vec::with_capacity(num_classes * per_class);
    for class in 0..num_classes {
        let curve = class_curve(class, seed);
        for i in 0..per_class {
            let mut rng = Rng::derive(seed, &[class as u64, i as u64]);
            let len = rng.range_inclusive(SYNTH_MIN_LEN, SYNTH_MAX_LEN);
            let dots = (0..len)
                .map(|j| {
                    let u = 2.0 * PI * j as f64 / (len - 1) as f64;
                    let m = 32.0
                        + AMP_M * (curve.omega_m * u + curve.phase).sin()
                        + jitter * rng.normal();
                    let n = 32.0 + AMP_N * (curve.omega_n * u).cos() + jitter * rng.normal();
                    let mut dot = vec![m, n];
                    if dim == 3 {
                        dot.push(if j < len / 2 { 1.0 } else { 0.0 });
                    }
                    dot
                })
                .collect();
            samples.push(RawTrajectory { dots, label: class });
        }
    }
    Ok(Dataset {
        samples,
        num_classes,
        dim,
    })
}

/// Stratified split into train/val/test. Each class is shuffled with a
/// seeded generator; `round(n·train_frac)` go to train, `round(n·val_frac)`
/// to validation, the rest to test. A split with a positive share always
/// gets at least one sample per class.
pub fn split_dataset(
    ds: &Dataset,
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<(Dataset, Dataset, Dataset)> {
    if !(train_frac > 0.0 && val_frac >= 0.0 && train_frac + val_frac <= 1.0 + 1e-12) {
        return Err(Error::Input(format!(
            "invalid split fractions {train_frac}/{val_frac}"
        )));
    }
    let test_frac = 1.0 - train_frac - val_frac;
    let wants_val = val_frac > 0.0;
    let wants_test = test_frac > 1e-12;
    let needed = 1 + usize::from(wants_val) + usize::from(wants_test);

    let mut by_class: Vec<Vec<&RawTrajectory>> = vec![Vec::new(); ds.num_classes];
    for s in &ds.samples {
        by_class
            .get_mut(s.label)
            .ok_or_else(|| {
                Error::Input(format!("label {} outside [0, {})", s.label, ds.num_classes))
            })?
            .push(s);
    }
    let empty = || Dataset {
        samples: Vec::new(),
        num_classes: ds.num_classes,
        dim: ds.dim,
    };
    let (mut train, mut val, mut test) = (empty(), empty(), empty());
    for (class, mut members) in by_class.into_iter().enumerate() {
        let n = members.len();
        if n == 0 {
            continue;
        }
        if n < needed {
            return Err(Error::Input(format!(
                "class {class} has {n} samples, fewer than the {needed} splits requested"
            )));
        }
        Rng::derive(seed, &[0x5_9117, class as u64]).shuffle(&mut members);
        let mut n_val = if wants_val {
            ((n as f64 * val_frac).round() as usize).max(1)
        } else {
            0
        };
        let reserve_test = usize::from(wants_test);
        let mut n_train = ((n as f64 * train_frac).round() as usize).max(1);
        if n_train + n_val + reserve_test > n {
            n_train = n - n_val - reserve_test;
        }
        if n_train == 0 {
            n_train = 1;
            n_val -= 1;
        }
        if !wants_test {
            n_val = n - n_train;
        }
        let (a, rest) = members.split_at(n_train);
        let (b, c) = rest.split_at(n_val);
        train.samples.extend(a.iter().map(|s| (*s).clone()));
        val.samples.extend(b.iter().map(|s| (*s).clone()));
        test.samples.extend(c.iter().map(|s| (*s).clone()));
    }
    Ok((train, val, test))
}
