//! Self-checks run by `mpu-rnn verify`.

use std::fmt::Write as _;
use std::time::Instant;

use crate::analysis::{
    count_params, count_steps, grad_check, Convention, DEFAULT_FD_STEP, DEFAULT_GRAD_TOLERANCE,
    REFERENCE_ROWS, REFERENCE_TOLERANCE_MIL,
};
use crate::cells::{cell_forward, mpu_forward_with_input_gate, CellKind, CellParams, CellState};
use crate::checkpoint::{format_checkpoint, parse_checkpoint};
use crate::data::{preprocess, scale_to_range, RawTrajectory};
use crate::error::{Error, Result};
use crate::math::{Rng, Vector};
use crate::network::{
    build_extended_sequence, dropout_mask, forward, init_params, Arch, NetworkConfig, Readout,
};
use crate::training::softmax_cross_entropy;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    GradCheck,
    ParamCounts,
    StepCounts,
    Invariants,
}

impl Suite {
    pub const ALL: [Suite; 4] = [
        Suite::GradCheck,
        Suite::ParamCounts,
        Suite::StepCounts,
        Suite::Invariants,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::GradCheck => "grad-check",
            Suite::ParamCounts => "param-counts",
            Suite::StepCounts => "step-counts",
            Suite::Invariants => "invariants",
        }
    }
}

impl std::fmt::Display for Suite {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Suite {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown suite `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub suite: Suite,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Default)]
pub struct VerifyReport {
    pub results: Vec<CheckResult>,
    /// Seconds spent per suite, in run order.
    pub timings: Vec<(Suite, f64)>,
}

impl VerifyReport {
    pub fn all_passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.results.iter().filter(|r| !r.passed)
    }

    /// One row per suite: checks run, failures, seconds.
    pub fn summary_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<14} {:>7} {:>7} {:>9}  status",
            "suite", "checks", "failed", "seconds"
        );
        for &(suite, secs) in &self.timings {
            let rows: Vec<&CheckResult> =
                self.results.iter().filter(|r| r.suite == suite).collect();
            let failed = rows.iter().filter(|r| !r.passed).count();
            let _ = writeln!(
                out,
                "{:<14} {:>7} {:>7} {:>9.2}  {}",
                suite.as_str(),
                rows.len(),
                failed,
                secs,
                if failed == 0 { "ok" } else { "FAIL" }
            );
        }
        out
    }
}

fn check(
    suite: Suite,
    name: impl Into<String>,
    passed: bool,
    detail: impl Into<String>,
) -> CheckResult {
    CheckResult {
        suite,
        name: name.into(),
        passed,
        detail: detail.into(),
    }
}

fn from_result(suite: Suite, name: impl Into<String>, r: Result<String>) -> CheckResult {
    match r {
        Ok(detail) => check(suite, name, true, detail),
        Err(e) => check(suite, name, false, e.to_string()),
    }
}

pub fn run(suites: &[Suite], seed: u64) -> VerifyReport {
    let mut report = VerifyReport::default();
    for &suite in suites {
        let start = Instant::now();
        report.results.extend(run_suite(suite, seed));
        report.timings.push((suite, start.elapsed().as_secs_f64()));
    }
    report
}

pub fn run_suite(suite: Suite, seed: u64) -> Vec<CheckResult> {
    match suite {
        Suite::GradCheck => grad_check_suite(seed),
        Suite::ParamCounts => param_count_suite(),
        Suite::StepCounts => step_count_suite(seed),
        Suite::Invariants => invariant_suite(seed),
    }
}

/// Small configurations covering every cell, architecture and readout.
pub fn grad_check_configs() -> Vec<NetworkConfig> {
    let mut out = Vec::new();
    for cell in CellKind::ALL {
        for arch in Arch::ALL {
            for readout in Readout::ALL {
                let mut cfg = NetworkConfig::new(cell, 3, 4, 3, 3)
                    .with_arch(arch)
                    .with_readout(readout);
                if readout != Readout::StackedSum {
                    cfg.hidden = vec![4, 5, 3];
                }
                out.push(cfg);
            }
        }
    }
    out
}

pub const GRAD_CHECK_SEEDS: u64 = 5;

fn grad_check_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    for cfg in grad_check_configs() {
        let name = format!("{} {} {}", cfg.cell, cfg.arch, cfg.readout);
        let mut worst = 0.0f64;
        let mut failure = None;
        for s in 0..GRAD_CHECK_SEEDS {
            match grad_check(
                &cfg,
                seed.wrapping_add(s),
                DEFAULT_FD_STEP,
                DEFAULT_GRAD_TOLERANCE,
            ) {
                Ok(r) => worst = worst.max(r.max_rel_err),
                Err(e) => {
                    failure = Some(format!("seed {}: {e}", seed.wrapping_add(s)));
                    break;
                }
            }
        }
        out.push(match failure {
            Some(msg) => check(Suite::GradCheck, name, false, msg),
            None => check(
                Suite::GradCheck,
                name,
                true,
                format!("max rel err {worst:.2e}"),
            ),
        });
    }
    out
}

fn param_count_suite() -> Vec<CheckResult> {
    REFERENCE_ROWS
        .iter()
        .map(|row| {
            from_result(
                Suite::ParamCounts,
                row.label,
                count_params(&row.config(), Convention::PaperTable).and_then(|r| {
                    let mil = r.total as f64 / 1e6;
                    if (mil - row.millions).abs() <= REFERENCE_TOLERANCE_MIL + 1e-9 {
                        Ok(format!("{} vs {:.2}mil", r.total, row.millions))
                    } else {
                        Err(Error::Verification {
                            tensor: row.label.to_string(),
                            index: 0,
                            msg: format!(
                                "{} is not within 0.01mil of {:.2}mil",
                                r.total, row.millions
                            ),
                        })
                    }
                }),
            )
        })
        .collect()
}

fn random_seq(rng: &mut Rng, len: usize, dim: usize) -> Vec<Vector> {
    (0..len)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

fn step_count_suite(seed: u64) -> Vec<CheckResult> {
    let mut out = Vec::new();
    let mut rng = Rng::derive(seed, &[3]);
    for arch in Arch::ALL {
        let r = (|| -> Result<String> {
            for _ in 0..20 {
                let layers = rng.range_inclusive(1, 4);
                let t = rng.range_inclusive(2, 40);
                let cfg = NetworkConfig::new(CellKind::Gru, layers, 3, 2, 3).with_arch(arch);
                let params = init_params(&cfg, &mut rng)?;
                let (_, trace) =
                    forward(&random_seq(&mut rng, t, 2), &params, &cfg, false, &mut rng)?;
                let expected = count_steps(&cfg, t)?.total;
                if trace.cell_evals != expected {
                    return Err(Error::Verification {
                        tensor: format!("{arch} N={layers} T={t}"),
                        index: 0,
                        msg: format!(
                            "counted {} cell evaluations, closed form {expected}",
                            trace.cell_evals
                        ),
                    });
                }
            }
            Ok("20 random (N, T)".into())
        })();
        out.push(from_result(
            Suite::StepCounts,
            format!("{arch} closed form"),
            r,
        ));
    }
    let ratio = (|| -> Result<String> {
        for t in 2..=200usize {
            let h = count_steps(
                &NetworkConfig::new(CellKind::Gru, 1, 1, 2, 2).with_arch(Arch::Hybrid),
                t,
            )?
            .per_layer;
            let b = count_steps(
                &NetworkConfig::new(CellKind::Gru, 1, 1, 2, 2).with_arch(Arch::Bidirectional),
                t,
            )?
            .per_layer;
            if h * 2 * t != b * (t + t / 2) {
                return Err(Error::Verification {
                    tensor: format!("T={t}"),
                    index: 0,
                    msg: format!("hybrid {h} : bidirectional {b}"),
                });
            }
        }
        Ok("T = 2..200".into())
    })();
    out.push(from_result(
        Suite::StepCounts,
        "hybrid:bidirectional ratio",
        ratio,
    ));
    out
}

fn fail(what: &str, msg: String) -> Error {
    Error::Verification {
        tensor: what.to_string(),
        index: 0,
        msg,
    }
}

fn invariant_suite(seed: u64) -> Vec<CheckResult> {
    let s = Suite::Invariants;
    vec![
        from_result(
            s,
            "mpu closed input gate keeps memory",
            mpu_gate_invariant(seed),
        ),
        from_result(
            s,
            "mpu closed output gate zeroes output",
            mpu_output_invariant(seed),
        ),
        from_result(s, "mpu_c output inside (-1, 1)", mpu_c_bound(seed)),
        from_result(
            s,
            "tied per-layer readout equals stacked",
            readout_equivalence(seed),
        ),
        from_result(s, "extended sequence layout", extended_sequence(seed)),
        from_result(s, "preprocessing range and mean", preprocessing(seed)),
        from_result(s, "loss sanity", loss_sanity()),
        from_result(s, "dropout expectation", dropout_expectation(seed)),
        from_result(s, "checkpoint round trip", checkpoint_round_trip(seed)),
    ]
}

fn random_state(rng: &mut Rng, d: usize) -> CellState {
    CellState {
        h: (0..d).map(|_| rng.uniform(-1.0, 1.0)).collect(),
        m: (0..d).map(|_| rng.uniform(-3.0, 3.0)).collect(),
    }
}

fn mpu_gate_invariant(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[4]);
    for kind in [CellKind::Mpu, CellKind::MpuC] {
        let p = CellParams::uniform(kind, 3, 5, &mut rng);
        for _ in 0..100 {
            let prev = random_state(&mut rng, 5);
            let x: Vector = (0..3).map(|_| rng.normal()).collect();
            let (next, _) = mpu_forward_with_input_gate(&x, &prev, &p, &[0.0; 5])?;
            let diff = next
                .m
                .iter()
                .zip(&prev.m)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if diff > 1e-12 {
                return Err(fail(kind.as_str(), format!("memory moved by {diff:e}")));
            }
        }
    }
    Ok("200 random steps".into())
}

fn mpu_output_invariant(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[5]);
    let mut p = CellParams::uniform(CellKind::Mpu, 3, 5, &mut rng);
    p.banks[2].wx.fill(0.0);
    p.banks[2].wh.fill(0.0);
    if let Some(b) = p.banks[2].b.as_mut() {
        b.fill(-1e3);
    }
    for _ in 0..100 {
        let prev = random_state(&mut rng, 5);
        let x: Vector = (0..3).map(|_| rng.normal()).collect();
        let (next, _) = cell_forward(&x, &prev, &p)?;
        if next.h.iter().any(|v| *v != 0.0) {
            return Err(fail("mpu", format!("h = {:?} with o = 0", next.h)));
        }
    }
    Ok("100 random steps".into())
}

fn mpu_c_bound(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[6]);
    let p = CellParams::uniform(CellKind::MpuC, 3, 6, &mut rng);
    let mut state = CellState::zeros(6);
    let mut widest = 0.0f64;
    for step in 0..10_000 {
        let x: Vector = (0..3).map(|_| rng.normal()).collect();
        state = cell_forward(&x, &state, &p)?.0;
        widest = state.h.iter().fold(widest, |w, v| w.max(v.abs()));
        if widest >= 1.0 {
            return Err(fail(
                "mpu_c",
                format!("|h| reached {widest} at step {step}"),
            ));
        }
    }
    Ok(format!("max |h| {widest:.9}"))
}

fn readout_equivalence(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[7]);
    let mut worst = 0.0f64;
    for i in 0..10 {
        let cell = CellKind::ALL[i % 4];
        let arch = Arch::ALL[i % 3];
        let layers = rng.range_inclusive(1, 3);
        let d = rng.range_inclusive(2, 6);
        let stacked = NetworkConfig::new(cell, layers, d, 2, 4)
            .with_arch(arch)
            .with_readout(Readout::StackedSum);
        let per_layer = stacked.clone().with_readout(Readout::PerLayerWeighted);
        let ps = init_params(&stacked, &mut rng)?;
        let mut pp = init_params(&per_layer, &mut rng)?;
        pp.bank1 = ps.bank1.clone();
        pp.bank2 = ps.bank2.clone();
        pp.b_y = ps.b_y.clone();
        for slot in 0..stacked.num_slots() {
            for layer in 0..layers {
                let src = stacked
                    .readout_index(slot, layer)
                    .expect("stacked reads every layer");
                let dst = per_layer
                    .readout_index(slot, layer)
                    .expect("per-layer reads every layer");
                pp.readout[dst] = ps.readout[src].clone();
            }
        }
        let len = rng.range_inclusive(2, 12);
        let seq = random_seq(&mut rng, len, 2);
        let (a, _) = forward(&seq, &ps, &stacked, false, &mut rng)?;
        let (b, _) = forward(&seq, &pp, &per_layer, false, &mut rng)?;
        worst = a
            .iter()
            .zip(&b)
            .fold(worst, |w, (x, y)| w.max((x - y).abs()));
    }
    if worst > 1e-12 {
        return Err(fail("readout", format!("max logit difference {worst:e}")));
    }
    Ok(format!("max difference {worst:.1e}"))
}

fn extended_sequence(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[8]);
    for _ in 0..100 {
        let t = rng.range_inclusive(2, 200);
        let seq = random_seq(&mut rng, t, 2);
        let ext = build_extended_sequence(&seq)?;
        let half = t / 2;
        if ext.len() != t + half || ext[..half] != ext[t..] || ext[..t] != seq[..] {
            return Err(fail("extended sequence", format!("wrong layout for T={t}")));
        }
    }
    Ok("100 random T in [2, 200]".into())
}

fn preprocessing(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[9]);
    for _ in 0..100 {
        let len = rng.range_inclusive(2, 80);
        let scale = rng.uniform(0.1, 500.0);
        let offset = rng.uniform(-1000.0, 1000.0);
        let dots: Vec<Vector> = (0..len)
            .map(|_| vec![offset + scale * rng.normal(), offset - scale * rng.normal()])
            .collect();
        for d in scale_to_range(&dots) {
            if d.iter().any(|v| !(0.0..=64.0).contains(v)) {
                return Err(fail("scale", format!("value outside [0, 64]: {d:?}")));
            }
        }
        let out = preprocess(&RawTrajectory { dots, label: 0 })?;
        for axis in 0..2 {
            let mean = out.iter().map(|d| d[axis]).sum::<f64>() / len as f64;
            if mean.abs() >= 1e-9 {
                return Err(fail("center", format!("axis {axis} mean {mean:e}")));
            }
        }
    }
    let worked = preprocess(&RawTrajectory {
        dots: vec![vec![0.0, 0.0], vec![4.0, 2.0], vec![8.0, 4.0]],
        label: 0,
    })?;
    if worked != vec![vec![-32.0, -32.0], vec![0.0, 0.0], vec![32.0, 32.0]] {
        return Err(fail("worked example", format!("{worked:?}")));
    }
    Ok("100 random trajectories and the worked example".into())
}

fn loss_sanity() -> Result<String> {
    for k in 2..=10usize {
        let (loss, grad) = softmax_cross_entropy(&[vec![0.7; k]], &[k - 1])?;
        if (loss - (k as f64).ln()).abs() > 1e-10 {
            return Err(fail("uniform logits", format!("K={k}: loss {loss}")));
        }
        let row_sum: f64 = grad[0].iter().sum();
        if row_sum.abs() > 1e-12 {
            return Err(fail("dlogits", format!("row sum {row_sum:e}")));
        }
    }
    let (loss, _) = softmax_cross_entropy(&[vec![10.0, 0.0, 0.0, 0.0]], &[0])?;
    if (loss - 1.3619e-4).abs() > 1e-8 {
        return Err(fail("confident logits", format!("loss {loss}")));
    }
    Ok(format!("confident loss {loss:.4e}"))
}

fn dropout_expectation(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[10]);
    let draws = 100_000;
    let keep = 0.6;
    let mask = dropout_mask(draws, keep, &mut rng);
    let mean = mask.iter().sum::<f64>() / draws as f64;
    if (mean - 1.0).abs() > 0.02 {
        return Err(fail("dropout", format!("mean scale {mean}")));
    }
    Ok(format!("mean scale {mean:.4}"))
}

fn checkpoint_round_trip(seed: u64) -> Result<String> {
    let mut rng = Rng::derive(seed, &[11]);
    for cell in CellKind::ALL {
        for arch in Arch::ALL {
            let cfg = NetworkConfig::new(cell, 2, 3, 2, 3).with_arch(arch);
            let params = init_params(&cfg, &mut rng)?;
            let (cfg2, params2) = parse_checkpoint(&format_checkpoint(&cfg, &params))?;
            if cfg2 != cfg || params2 != params {
                return Err(fail(
                    "checkpoint",
                    format!("{cell} {arch} changed on reload"),
                ));
            }
        }
    }
    Ok("12 configurations".into())
}
