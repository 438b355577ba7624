//! Softmax cross-entropy, rmsprop, and the mini-batch epoch loop.

use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::math::{argmax, log_sum_exp, stable_softmax, Matrix, Rng, Vector};
use crate::network::{backward, forward, predict, NetworkConfig, NetworkParams};

/// A preprocessed sequence with its class.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub seq: Vec<Vector>,
    pub label: usize,
}

/// Mean negative log-likelihood over the batch and `dL/dlogits` per row,
/// i.e. `(softmax - onehot) / m`.
pub fn softmax_cross_entropy(logits: &[Vector], labels: &[usize]) -> Result<(f64, Vec<Vector>)> {
    if logits.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Input(format!(
            "{} logit rows for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let m = logits.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(logits.len());
    for (row, &label) in logits.iter().zip(labels) {
        if label >= row.len() {
            return Err(Error::Input(format!(
                "label {label} outside [0, {})",
                row.len()
            )));
        }
        loss += log_sum_exp(row) - row[label];
        let mut g = stable_softmax(row);
        g[label] -= 1.0;
        g.iter_mut().for_each(|v| *v /= m);
        grads.push(g);
    }
    Ok((loss / m, grads))
}

/// Per-parameter running mean of squared gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct RmspropState {
    pub mean_sq: Vec<Matrix>,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
}

impl RmspropState {
    pub fn new(params: &NetworkParams, learning_rate: f64, decay: f64, epsilon: f64) -> Self {
        RmspropState {
            mean_sq: params
                .tensors()
                .iter()
                .map(|(_, m)| m.zeros_like())
                .collect(),
            learning_rate,
            decay,
            epsilon,
        }
    }
}

/// `v ← ρv + (1-ρ)g²`, `θ ← θ - lr·g/(√v + ε)`.
pub fn rmsprop_step(
    params: &mut NetworkParams,
    grads: &NetworkParams,
    state: &mut RmspropState,
) -> Result<()> {
    let gs = grads.tensors();
    let ps = params.tensors_mut();
    if ps.len() != gs.len() || ps.len() != state.mean_sq.len() {
        return Err(Error::Internal("rmsprop tensors do not line up".into()));
    }
    let (lr, rho, eps) = (state.learning_rate, state.decay, state.epsilon);
    for ((p, (name, g)), v) in ps.into_iter().zip(&gs).zip(state.mean_sq.iter_mut()) {
        if p.shape() != g.shape() || p.shape() != v.shape() {
            return Err(Error::Internal(format!("rmsprop shape mismatch at {name}")));
        }
        for ((pv, &gv), vv) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(v.as_mut_slice())
        {
            *vv = rho * *vv + (1.0 - rho) * gv * gv;
            *pv -= lr * gv / (vv.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut NetworkParams, max_norm: f64) -> f64 {
    let norm = grads.sq_norm().sqrt();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub learning_rate: f64,
    pub decay: f64,
    pub epsilon: f64,
    /// Global-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop after this many epochs without a validation improvement.
    pub patience: Option<usize>,
    /// Stop once validation accuracy reaches this value.
    pub target_val_acc: Option<f64>,
    /// Worker threads for per-sample work. Results do not depend on it.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            epochs: 50,
            seed: 0,
            learning_rate: 1e-3,
            decay: 0.9,
            epsilon: 1e-8,
            clip_norm: Some(5.0),
            patience: None,
            target_val_acc: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    /// NaN when no validation set was given.
    pub val_acc: f64,
    pub seconds: f64,
    /// Cumulative cell evaluations since training started.
    pub cell_evals: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Metrics {
    pub epochs: Vec<EpochMetrics>,
    /// 1-based epoch whose parameters were returned.
    pub best_epoch: usize,
}

impl Metrics {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_acc,val_acc,seconds,cell_evals";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.train_acc, e.val_acc, e.seconds, e.cell_evals
            ));
        }
        out
    }
}

fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    if threads <= 1 {
        return Ok(f());
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}

/// Samples per gradient-accumulation chunk. Fixed so the floating-point
/// summation order never depends on the thread count.
const CHUNK: usize = 16;

struct ChunkResult {
    grad: NetworkParams,
    loss: f64,
    correct: usize,
    cell_evals: u64,
}

fn batch_gradient(
    batch: &[usize],
    data: &[Sample],
    params: &NetworkParams,
    cfg: &NetworkConfig,
    seed: u64,
    epoch: usize,
) -> Result<ChunkResult> {
    let m = batch.len() as f64;
    let chunks: Vec<Result<ChunkResult>> = batch
        .par_chunks(CHUNK)
        .map(|chunk| {
            let mut acc = ChunkResult {
                grad: params.zeros_like(),
                loss: 0.0,
                correct: 0,
                cell_evals: 0,
            };
            for &idx in chunk {
                let sample = &data[idx];
                let mut rng = Rng::derive(seed, &[epoch as u64, idx as u64]);
                let (logits, trace) = forward(&sample.seq, params, cfg, true, &mut rng)?;
                let (loss, mut dl) =
                    softmax_cross_entropy(std::slice::from_ref(&logits), &[sample.label])?;
                dl[0].iter_mut().for_each(|v| *v /= m);
                let g = backward(&trace, &dl[0], params, cfg)?;
                acc.grad.add_assign(&g);
                acc.loss += loss;
                acc.correct += usize::from(argmax(&logits) == sample.label);
                acc.cell_evals += trace.cell_evals as u64;
            }
            Ok(acc)
        })
        .collect();
    let mut chunks = chunks.into_iter();
    let mut total = chunks.next().expect("non-empty batch")?;
    for c in chunks {
        let c = c?;
        total.grad.add_assign(&c.grad);
        total.loss += c.loss;
        total.correct += c.correct;
        total.cell_evals += c.cell_evals;
    }
    Ok(total)
}

/// Mini-batch rmsprop training. Returns the parameters from the epoch with
/// the best validation accuracy (the last epoch when `val` is empty).
pub fn train(
    cfg: &NetworkConfig,
    init: NetworkParams,
    train_set: &[Sample],
    val_set: &[Sample],
    tcfg: &TrainConfig,
) -> Result<(NetworkParams, Metrics)> {
    if train_set.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    if tcfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    cfg.validate()?;
    if let Some(s) = train_set
        .iter()
        .chain(val_set)
        .find(|s| s.label >= cfg.num_classes)
    {
        return Err(Error::Input(format!(
            "label {} outside [0, {})",
            s.label, cfg.num_classes
        )));
    }

    with_threads(tcfg.threads, || {
        let mut params = init;
        let mut state = RmspropState::new(&params, tcfg.learning_rate, tcfg.decay, tcfg.epsilon);
        let mut order_rng = Rng::derive(tcfg.seed, &[u64::MAX]);
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut metrics = Metrics::default();
        let mut best: Option<(f64, NetworkParams)> = None;
        let mut since_best = 0usize;
        let mut cell_evals = 0u64;

        for epoch in 1..=tcfg.epochs {
            let start = Instant::now();
            order_rng.shuffle(&mut order);
            let mut loss_sum = 0.0;
            let mut correct = 0usize;
            for batch in order.chunks(tcfg.batch_size) {
                let mut res = batch_gradient(batch, train_set, &params, cfg, tcfg.seed, epoch)?;
                if !res.loss.is_finite() {
                    return Err(Error::Training {
                        epoch,
                        msg: format!("loss became {}", res.loss),
                    });
                }
                if let Some(max) = tcfg.clip_norm {
                    clip_global_norm(&mut res.grad, max);
                }
                rmsprop_step(&mut params, &res.grad, &mut state)?;
                loss_sum += res.loss;
                correct += res.correct;
                cell_evals += res.cell_evals;
            }
            if !params.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: "parameters became non-finite".into(),
                });
            }
            let val_acc = if val_set.is_empty() {
                f64::NAN
            } else {
                evaluate(&params, cfg, val_set)?
            };
            metrics.epochs.push(EpochMetrics {
                epoch,
                train_loss: loss_sum / train_set.len() as f64,
                train_acc: correct as f64 / train_set.len() as f64,
                val_acc,
                seconds: start.elapsed().as_secs_f64(),
                cell_evals,
            });

            let improved = val_set.is_empty() || best.as_ref().is_none_or(|(b, _)| val_acc > *b);
            if improved {
                best = Some((val_acc, params.clone()));
                metrics.best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
            }
            if tcfg.target_val_acc.is_some_and(|t| val_acc >= t) {
                break;
            }
            if tcfg.patience.is_some_and(|p| since_best >= p) {
                break;
            }
        }
        let params = best.map_or(params, |(_, p)| p);
        Ok((params, metrics))
    })?
}

/// Logits for every sample, dropout off.
pub fn predict_all(
    params: &NetworkParams,
    cfg: &NetworkConfig,
    samples: &[Sample],
) -> Result<Vec<Vector>> {
    samples
        .par_iter()
        .map(|s| predict(&s.seq, params, cfg))
        .collect()
}

/// Fraction of samples whose arg-max logit (ties to the lowest index) is the label.
pub fn evaluate(params: &NetworkParams, cfg: &NetworkConfig, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Input("cannot evaluate on an empty set".into()));
    }
    let logits = predict_all(params, cfg, samples)?;
    Ok(accuracy(&logits, samples))
}

pub fn accuracy(logits: &[Vector], samples: &[Sample]) -> f64 {
    let correct = logits
        .iter()
        .zip(samples)
        .filter(|(l, s)| argmax(l) == s.label)
        .count();
    correct as f64 / samples.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::CellKind;
    use crate::network::init_params;

    #[test]
    fn uniform_logits_give_ln_k() {
        let (loss, g) = softmax_cross_entropy(&[vec![0.0; 4]], &[2]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
        assert!(g[0].iter().sum::<f64>().abs() < 1e-12);
    }

    #[test]
    fn confident_logit_loss() {
        let (loss, _) = softmax_cross_entropy(&[vec![10.0, 0.0, 0.0, 0.0]], &[0]).unwrap();
        let expect = -(10f64.exp() / (10f64.exp() + 3.0)).ln();
        assert!((loss - expect).abs() < 1e-15);
        assert!((loss - 1.3619e-4).abs() < 1e-8);
    }

    #[test]
    fn loss_rejects_bad_labels() {
        assert!(matches!(
            softmax_cross_entropy(&[vec![0.0; 3]], &[3]),
            Err(Error::Input(_))
        ));
        assert!(softmax_cross_entropy(&[], &[]).is_err());
    }

    #[test]
    fn rmsprop_first_step() {
        let cfg = NetworkConfig::new(CellKind::Gru, 1, 2, 2, 2);
        let mut p = NetworkParams::zeros(&cfg).unwrap();
        let mut g = p.zeros_like();
        for m in g.tensors_mut() {
            m.fill(1.0);
        }
        let mut st = RmspropState::new(&p, 0.01, 0.9, 1e-8);
        rmsprop_step(&mut p, &g, &mut st).unwrap();
        let expect = -0.01 / (0.1f64.sqrt() + 1e-8);
        assert!((expect + 0.0316227).abs() < 1e-7);
        for (_, m) in p.tensors() {
            assert!(m.as_slice().iter().all(|&v| (v - expect).abs() < 1e-15));
        }
        // zero gradient: parameters stay, accumulators decay by ρ
        let before = p.clone();
        let v_before = st.mean_sq[0].as_slice()[0];
        rmsprop_step(&mut p, &g.zeros_like(), &mut st).unwrap();
        assert_eq!(p, before);
        assert!((st.mean_sq[0].as_slice()[0] - 0.9 * v_before).abs() < 1e-18);
    }

    #[test]
    fn clipping_caps_norm() {
        let cfg = NetworkConfig::new(CellKind::Gru, 1, 2, 2, 2);
        let mut g = NetworkParams::zeros(&cfg).unwrap();
        for m in g.tensors_mut() {
            m.fill(3.0);
        }
        let before = clip_global_norm(&mut g, 1.0);
        assert!(before > 1.0);
        assert!((g.sq_norm().sqrt() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn evaluate_all_zero_params_picks_class_zero() {
        let cfg = NetworkConfig::new(CellKind::Mpu, 1, 3, 2, 3);
        let p = NetworkParams::zeros(&cfg).unwrap();
        let samples: Vec<Sample> = (0..9)
            .map(|i| Sample {
                seq: vec![vec![i as f64, 1.0]; 3],
                label: i % 3,
            })
            .collect();
        assert!((evaluate(&p, &cfg, &samples).unwrap() - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_keeps_params() {
        let cfg = NetworkConfig::new(CellKind::Gru, 1, 3, 2, 2);
        let init = init_params(&cfg, &mut Rng::new(2)).unwrap();
        let data: Vec<Sample> = (0..8)
            .map(|i| Sample {
                seq: vec![vec![(i % 2) as f64, 0.5]; 4],
                label: i % 2,
            })
            .collect();
        let tcfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 3,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let (p, m) = train(&cfg, init.clone(), &data, &data, &tcfg).unwrap();
        assert_eq!(p, init);
        let l0 = m.epochs[0].train_loss;
        assert!(m.epochs.iter().all(|e| (e.train_loss - l0).abs() < 1e-12));
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let cfg = NetworkConfig::new(CellKind::Gru, 1, 3, 2, 2);
        let init = NetworkParams::zeros(&cfg).unwrap();
        assert!(matches!(
            train(&cfg, init, &[], &[], &TrainConfig::default()),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn metrics_csv_header() {
        let m = Metrics::default();
        assert_eq!(
            m.to_csv(),
            "epoch,train_loss,train_acc,val_acc,seconds,cell_evals\n"
        );
    }
}
