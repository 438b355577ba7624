//! Parameter and step accounting, timing, and finite-difference gradient checks.

use std::fmt::Write as _;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::math::{Rng, Vector};
use crate::network::{backward, forward, init_params, Arch, NetworkConfig, NetworkParams};
use crate::reference::ReferenceNet;
use crate::training::{softmax_cross_entropy, Sample};

/// How parameters are tallied.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Convention {
    /// Gate-bank multiplier times the layer-to-layer and recurrent matrices
    /// (doubled for two banks), plus one `d x K` readout. Input-layer weights,
    /// skip columns and biases are not counted.
    PaperTable,
    /// Every value the library actually allocates.
    FullActual,
}

impl std::str::FromStr for Convention {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "paper-table" | "paper_table" | "table" => Ok(Convention::PaperTable),
            "full-actual" | "full_actual" | "full" => Ok(Convention::FullActual),
            other => Err(Error::Config(format!(
                "unknown counting convention `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Convention {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Convention::PaperTable => "paper-table",
            Convention::FullActual => "full-actual",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamReport {
    pub recurrent_count: u64,
    pub input_weight_count: u64,
    pub readout_count: u64,
    pub bias_count: u64,
    pub total: u64,
    pub convention: Convention,
}

pub fn count_params(cfg: &NetworkConfig, convention: Convention) -> Result<ParamReport> {
    cfg.validate()?;
    let report = match convention {
        Convention::PaperTable => {
            let d: Vec<u64> = cfg.hidden.iter().map(|&v| v as u64).collect();
            let between: u64 = d.windows(2).map(|w| w[0] * w[1]).sum();
            let recurrent: u64 = d.iter().map(|v| v * v).sum();
            let gates = cfg.cell.gate_banks() as u64;
            let banks = if cfg.arch == Arch::General { 1 } else { 2 };
            let recurrent_count = banks * gates * (between + recurrent);
            let readout_count = cfg.top_hidden() as u64 * cfg.num_classes as u64;
            ParamReport {
                recurrent_count,
                input_weight_count: 0,
                readout_count,
                bias_count: 0,
                total: recurrent_count + readout_count,
                convention,
            }
        }
        Convention::FullActual => {
            let p = NetworkParams::zeros(cfg)?;
            let mut r = ParamReport {
                recurrent_count: 0,
                input_weight_count: 0,
                readout_count: 0,
                bias_count: 0,
                total: 0,
                convention,
            };
            for (name, m) in p.tensors() {
                let n = m.len() as u64;
                let leaf = name.rsplit('.').next().unwrap_or(&name);
                if name.starts_with("readout.") {
                    r.readout_count += n;
                } else if leaf.starts_with("b_") {
                    r.bias_count += n;
                } else if leaf.starts_with("w_h") {
                    r.recurrent_count += n;
                } else {
                    r.input_weight_count += n;
                }
                r.total += n;
            }
            r
        }
    };
    Ok(report)
}

impl ParamReport {
    pub const CSV_HEADER: &'static str = "convention,recurrent,input_weights,readout,bias,total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.convention,
            self.recurrent_count,
            self.input_weight_count,
            self.readout_count,
            self.bias_count,
            self.total
        )
    }

    /// Total in millions, two decimals, as printed in parameter tables.
    pub fn millions(&self) -> String {
        format!("{:.2}mil", self.total as f64 / 1e6)
    }
}

/// Thousands separators, e.g. `2,760,960`.
pub fn group_digits(n: u64) -> String {
    let s = n.to_string();
    let mut out = String::new();
    for (i, ch) in s.chars().enumerate() {
        if i > 0 && (s.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

/// A published parameter total, in millions to two decimals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReferenceRow {
    pub label: &'static str,
    pub arch: Arch,
    pub layers: usize,
    pub hidden: usize,
    pub classes: usize,
    pub millions: f64,
}

const fn row(
    label: &'static str,
    arch: Arch,
    layers: usize,
    hidden: usize,
    classes: usize,
    millions: f64,
) -> ReferenceRow {
    ReferenceRow {
        label,
        arch,
        layers,
        hidden,
        classes,
        millions,
    }
}

/// Reference "Paras" totals for GRU-style (three-bank) networks.
#[rustfmt::skip]
pub const REFERENCE_ROWS: &[ReferenceRow] = &[
    row("general d=256 N=2 K=3873", Arch::General, 2, 256, 3873, 1.58),
    row("general d=256 N=3 K=3873", Arch::General, 3, 256, 3873, 1.97),
    row("general d=256 N=4 K=3873", Arch::General, 4, 256, 3873, 2.37),
    row("general d=256 N=5 K=3873", Arch::General, 5, 256, 3873, 2.76),
    row("hybrid d=128 N=2 K=3873", Arch::Hybrid, 2, 128, 3873, 0.79),
    row("hybrid d=128 N=3 K=3873", Arch::Hybrid, 3, 128, 3873, 0.98),
    row("hybrid d=128 N=4 K=3873", Arch::Hybrid, 4, 128, 3873, 1.18),
    row("hybrid d=128 N=5 K=3873", Arch::Hybrid, 5, 128, 3873, 1.38),
    row("general d=256 N=2 K=3755", Arch::General, 2, 256, 3755, 1.55),
    row("general d=256 N=5 K=3755", Arch::General, 5, 256, 3755, 2.74),
    row("hybrid d=128 N=2 K=3755", Arch::Hybrid, 2, 128, 3755, 0.77),
    row("hybrid d=128 N=5 K=3755", Arch::Hybrid, 5, 128, 3755, 1.37),
];

/// Tolerance on [`ReferenceRow::millions`].
pub const REFERENCE_TOLERANCE_MIL: f64 = 0.01;

impl ReferenceRow {
    pub fn config(&self) -> NetworkConfig {
        NetworkConfig::new(
            crate::cells::CellKind::Gru,
            self.layers,
            self.hidden,
            2,
            self.classes,
        )
        .with_arch(self.arch)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StepCount {
    pub per_layer: usize,
    pub total: usize,
}

/// Cell evaluations for one length-`seq_len` sample.
pub fn count_steps(cfg: &NetworkConfig, seq_len: usize) -> Result<StepCount> {
    if seq_len < 2 {
        return Err(Error::Input("step counting needs T >= 2".into()));
    }
    let per_layer = cfg.arch.steps_per_layer(seq_len);
    Ok(StepCount {
        per_layer,
        total: per_layer * cfg.num_layers(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedReport {
    pub arch: Arch,
    pub samples: usize,
    /// Mean cell evaluations per sample.
    pub cell_evals_per_sample: f64,
    /// Median over repetitions of forward+backward wall-clock per sample.
    pub seconds_per_sample: f64,
    pub t_min: usize,
    pub t_mean: f64,
    pub t_max: usize,
}

impl SpeedReport {
    pub const CSV_HEADER: &'static str =
        "arch,samples,cell_evals_per_sample,seconds_per_sample,t_min,t_mean,t_max";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.arch,
            self.samples,
            self.cell_evals_per_sample,
            self.seconds_per_sample,
            self.t_min,
            self.t_mean,
            self.t_max
        )
    }
}

/// Times forward+backward over `samples`, `repetitions` times (at least 10),
/// after one warm-up pass. Parameters come from `init_params` with seed 0.
pub fn bench_speed(
    cfg: &NetworkConfig,
    samples: &[Sample],
    repetitions: usize,
) -> Result<SpeedReport> {
    if repetitions < 10 {
        return Err(Error::Input(
            "benchmark needs at least 10 repetitions".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Input("benchmark needs at least one sample".into()));
    }
    let params = init_params(cfg, &mut Rng::new(0))?;
    let run = || -> Result<usize> {
        let mut evals = 0;
        for s in samples {
            let mut rng = Rng::new(0);
            let (logits, trace) = forward(&s.seq, &params, cfg, false, &mut rng)?;
            let label = s.label.min(logits.len() - 1);
            let (_, dl) = softmax_cross_entropy(std::slice::from_ref(&logits), &[label])?;
            std::hint::black_box(backward(&trace, &dl[0], &params, cfg)?);
            evals += trace.cell_evals;
        }
        Ok(evals)
    };
    let evals = run()?;
    let mut times = Vec::with_capacity(repetitions);
    for _ in 0..repetitions {
        let start = Instant::now();
        run()?;
        times.push(start.elapsed().as_secs_f64() / samples.len() as f64);
    }
    times.sort_by(f64::total_cmp);
    let median = if repetitions % 2 == 1 {
        times[repetitions / 2]
    } else {
        0.5 * (times[repetitions / 2 - 1] + times[repetitions / 2])
    };
    let lens: Vec<usize> = samples.iter().map(|s| s.seq.len()).collect();
    Ok(SpeedReport {
        arch: cfg.arch,
        samples: samples.len(),
        cell_evals_per_sample: evals as f64 / samples.len() as f64,
        seconds_per_sample: median,
        t_min: *lens.iter().min().expect("non-empty"),
        t_mean: lens.iter().sum::<usize>() as f64 / lens.len() as f64,
        t_max: *lens.iter().max().expect("non-empty"),
    })
}

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const DEFAULT_GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// Number of scalar parameters compared.
    pub checked: usize,
}

/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Analytic `dL/dθ` of the single-sample cross-entropy.
pub fn loss_gradient(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    sample: &Sample,
) -> Result<NetworkParams> {
    let (logits, trace) = forward(&sample.seq, params, cfg, false, &mut Rng::new(0))?;
    let (_, dl) = softmax_cross_entropy(&[logits], &[sample.label])?;
    backward(&trace, &dl[0], params, cfg)
}

/// A random problem for gradient checking: `T ∈ [3, 7]` standard-normal
/// dots, a random label, and parameters with every entry (biases and a
/// hybrid `θ2` included) moved away from its initial value.
pub fn grad_check_problem(cfg: &NetworkConfig, seed: u64) -> Result<(NetworkParams, Sample)> {
    let mut rng = Rng::new(seed);
    let mut params = init_params(cfg, &mut rng)?;
    for m in params.tensors_mut() {
        m.as_mut_slice()
            .iter_mut()
            .for_each(|v| *v += rng.uniform(-0.3, 0.3));
    }
    let len = rng.range_inclusive(3, 7);
    let seq: Vec<Vector> = (0..len)
        .map(|_| (0..cfg.input_dim).map(|_| rng.normal()).collect())
        .collect();
    let label = rng.below(cfg.num_classes as u64) as usize;
    Ok((params, Sample { seq, label }))
}

/// Central-difference check of `gradient` against the loss at every parameter.
/// The loss is evaluated in double-double precision.
/// Fails with [`Error::Verification`] naming the worst entry when it exceeds
/// `tolerance`.
pub fn grad_check_with<G>(
    cfg: &NetworkConfig,
    params: &NetworkParams,
    sample: &Sample,
    fd_step: f64,
    tolerance: f64,
    gradient: G,
) -> Result<GradCheckReport>
where
    G: Fn(&NetworkParams, &NetworkConfig, &Sample) -> Result<NetworkParams>,
{
    let analytic = gradient(params, cfg, sample)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    let grads: Vec<Vec<f64>> = analytic
        .tensors()
        .iter()
        .map(|(_, m)| m.as_slice().to_vec())
        .collect();
    if grads.len() != names.len() {
        return Err(Error::Internal(
            "gradient has a different tensor layout".into(),
        ));
    }
    let mut probe = ReferenceNet::new(params, cfg)?;
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for (t, grad) in grads.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let orig = probe.nudge(t, i, fd_step)?;
            let up = probe.loss(&sample.seq, sample.label)?;
            probe.set(t, i, orig)?;
            probe.nudge(t, i, -fd_step)?;
            let down = probe.loss(&sample.seq, sample.label)?;
            probe.set(t, i, orig)?;
            let f = (up - down).to_f64() / (2.0 * fd_step);
            let err = relative_error(a, f);
            report.checked += 1;
            if err > report.max_rel_err || report.worst_tensor.is_empty() {
                report.max_rel_err = err;
                report.worst_tensor = names[t].clone();
                report.worst_index = i;
                report.analytic = a;
                report.numeric = f;
            }
        }
    }
    if !(report.max_rel_err < tolerance) {
        return Err(Error::Verification {
            tensor: report.worst_tensor.clone(),
            index: report.worst_index,
            msg: format!(
                "relative error {:.3e} >= {:.1e} (analytic {:.6e}, numeric {:.6e})",
                report.max_rel_err, tolerance, report.analytic, report.numeric
            ),
        });
    }
    Ok(report)
}

/// Gradient check of the library's backward pass on [`grad_check_problem`].
/// Dropout is switched off for the check.
pub fn grad_check(
    cfg: &NetworkConfig,
    seed: u64,
    fd_step: f64,
    tolerance: f64,
) -> Result<GradCheckReport> {
    let cfg = cfg.clone().with_dropout_keep(1.0);
    let (params, sample) = grad_check_problem(&cfg, seed)?;
    grad_check_with(&cfg, &params, &sample, fd_step, tolerance, loss_gradient)
}

/// Plain-text table of parameter reports in the style `Paras` columns use.
pub fn param_table(rows: &[(String, ParamReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<28} {:>12} {:>12} {:>12} {:>10} {:>12} {:>9}",
        "config", "recurrent", "input_w", "readout", "bias", "total", "Paras"
    );
    for (label, r) in rows {
        let _ = writeln!(
            out,
            "{:<28} {:>12} {:>12} {:>12} {:>10} {:>12} {:>9}",
            label,
            group_digits(r.recurrent_count),
            group_digits(r.input_weight_count),
            group_digits(r.readout_count),
            group_digits(r.bias_count),
            group_digits(r.total),
            r.millions()
        );
    }
    out
}

/// Plain-text table with a `speed Sec/sample` column.
pub fn speed_table(rows: &[SpeedReport]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>8} {:>14} {:>16} {:>12}",
        "arch", "samples", "cell_evals", "speed Sec/sample", "T min/avg/max"
    );
    for r in rows {
        let _ = writeln!(
            out,
            "{:<14} {:>8} {:>14.1} {:>16.6} {:>4}/{:.0}/{}",
            r.arch.as_str(),
            r.samples,
            r.cell_evals_per_sample,
            r.seconds_per_sample,
            r.t_min,
            r.t_mean,
            r.t_max
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;

    fn table_cfg(arch: Arch, layers: usize, hidden: usize, classes: usize) -> NetworkConfig {
        NetworkConfig::new(CellKind::Gru, layers, hidden, 2, classes).with_arch(arch)
    }

    #[test]
    fn table_rows_exact() {
        let r = count_params(
            &table_cfg(Arch::General, 5, 256, 3873),
            Convention::PaperTable,
        )
        .unwrap();
        assert_eq!(r.recurrent_count, 1_769_472);
        assert_eq!(r.readout_count, 991_488);
        assert_eq!(r.total, 2_760_960);
        let r = count_params(
            &table_cfg(Arch::Hybrid, 2, 128, 3873),
            Convention::PaperTable,
        )
        .unwrap();
        assert_eq!(r.total, 790_656);
        let r = count_params(
            &table_cfg(Arch::General, 2, 256, 3755),
            Convention::PaperTable,
        )
        .unwrap();
        assert_eq!(r.total, 1_551_104);
    }

    #[test]
    fn full_actual_is_larger_and_sums() {
        for cell in CellKind::ALL {
            for arch in Arch::ALL {
                let cfg = NetworkConfig::new(cell, 3, 16, 3, 7).with_arch(arch);
                let p = count_params(&cfg, Convention::PaperTable).unwrap();
                let f = count_params(&cfg, Convention::FullActual).unwrap();
                assert!(f.total > p.total, "{cell} {arch}");
                assert_eq!(
                    f.total,
                    f.recurrent_count + f.input_weight_count + f.readout_count + f.bias_count
                );
                assert_eq!(
                    f.total as usize,
                    NetworkParams::zeros(&cfg).unwrap().num_values()
                );
            }
        }
    }

    #[test]
    fn step_counts() {
        let cfg = table_cfg(Arch::Hybrid, 1, 4, 3);
        assert_eq!(count_steps(&cfg, 100).unwrap().per_layer, 150);
        assert_eq!(count_steps(&cfg, 2).unwrap().per_layer, 3);
        let bi = table_cfg(Arch::Bidirectional, 1, 4, 3);
        assert_eq!(count_steps(&bi, 100).unwrap().per_layer, 200);
        assert!(count_steps(&cfg, 1).is_err());
    }

    #[test]
    fn digits() {
        assert_eq!(group_digits(2_760_960), "2,760,960");
        assert_eq!(group_digits(999), "999");
        assert_eq!(group_digits(1000), "1,000");
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1e-12, 0.0) - 1e-4).abs() < 1e-18);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
    }
}
