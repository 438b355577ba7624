use mpu_rnn::analysis::{loss_gradient, relative_error};
use mpu_rnn::network::{
    backward, build_extended_sequence, dropout_mask, ensemble_predict, forward, init_params,
    phase_params,
};
use mpu_rnn::reference::{Dd, ReferenceNet};
use mpu_rnn::training::Sample;
use mpu_rnn::{
    Arch, CellKind, Matrix, NetworkConfig, NetworkParams, Readout, ReadoutMatrices, Rng, Vector,
};
use proptest::prelude::*;

fn random_seq(rng: &mut Rng, len: usize, dim: usize) -> Vec<Vector> {
    (0..len)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

fn sig(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

#[test]
fn scalar_gru_matches_hand_trace() {
    // One unit, two input channels, two classes.
    let cfg = NetworkConfig::new(CellKind::Gru, 1, 1, 2, 2);
    let mut p = NetworkParams::zeros(&cfg).unwrap();
    let (wz, uz, bz) = ([0.5, -0.25], 0.3, 0.1);
    let (wr, ur, br) = ([-0.4, 0.2], 0.7, -0.2);
    let (wn, un, bn) = ([0.9, 0.6], -0.5, 0.05);
    let cell = &mut p.bank1[0];
    for (bank, (w, u, b)) in cell
        .banks
        .iter_mut()
        .zip([(wz, uz, bz), (wr, ur, br), (wn, un, bn)])
    {
        bank.wx = Matrix::from_rows(&[&w]).unwrap();
        bank.wh = Matrix::from_rows(&[&[u]]).unwrap();
        bank.b = Some(Matrix::column(vec![b]));
    }
    p.readout[0] = Matrix::column(vec![1.5, -2.0]);
    p.b_y = Matrix::column(vec![0.25, 0.5]);
    let seq = vec![vec![1.0, -1.0], vec![0.5, 2.0]];

    let mut h = 0.0;
    let mut pooled = 0.0;
    for x in &seq {
        let z = sig(wz[0] * x[0] + wz[1] * x[1] + uz * h + bz);
        let r = sig(wr[0] * x[0] + wr[1] * x[1] + ur * h + br);
        let n = (wn[0] * x[0] + wn[1] * x[1] + un * (r * h) + bn).tanh();
        h = (1.0 - z) * n + z * h;
        pooled += h;
    }
    let expected = [0.25 + 1.5 * pooled, 0.5 - 2.0 * pooled];

    let (logits, trace) = forward(&seq, &p, &cfg, false, &mut Rng::new(0)).unwrap();
    assert_eq!(trace.cell_evals, 2);
    for (a, b) in logits.iter().zip(expected) {
        assert!((a - b).abs() <= 1e-14, "{a} vs {b}");
    }
}

#[test]
fn hybrid_first_phase_equals_general_with_theta1() {
    let mut rng = Rng::new(11);
    for cell in CellKind::ALL {
        let hybrid = NetworkConfig::new(cell, 2, 4, 2, 3).with_arch(Arch::Hybrid);
        let general = hybrid.clone().with_arch(Arch::General);
        let mut ph = init_params(&hybrid, &mut rng).unwrap();
        for bank in ph.bank2.as_mut().unwrap() {
            for m in bank.tensors_mut() {
                m.as_mut_slice()
                    .iter_mut()
                    .for_each(|v| *v = rng.uniform(-0.5, 0.5));
            }
        }
        let mut pg = init_params(&general, &mut rng).unwrap();
        pg.bank1 = ph.bank1.clone();
        let t = 9;
        let seq = random_seq(&mut rng, t, 2);
        let (_, th) = forward(&seq, &ph, &hybrid, false, &mut rng).unwrap();
        let (_, tg) = forward(&seq[..t / 2], &pg, &general, false, &mut rng).unwrap();
        for layer in 0..2 {
            for step in 0..t / 2 {
                assert_eq!(
                    th.stacks[0].hs[layer][step], tg.stacks[0].hs[layer][step],
                    "{cell} layer {layer} step {step}"
                );
            }
        }
    }
}

#[test]
fn middle_phase_with_tied_banks_doubles_theta1() {
    let mut rng = Rng::new(3);
    let cfg = NetworkConfig::new(CellKind::Mpu, 2, 3, 2, 3).with_arch(Arch::Hybrid);
    let p = init_params(&cfg, &mut rng).unwrap();
    let eff = phase_params(4, 6, &p.bank1, &p.bank1).unwrap();
    for (a, b) in eff.iter().zip(&p.bank1) {
        for ((_, x), (_, y)) in a.tensors().into_iter().zip(b.tensors()) {
            for (u, v) in x.as_slice().iter().zip(y.as_slice()) {
                assert_eq!(*u, 2.0 * v);
            }
        }
    }
}

#[test]
fn zero_theta2_still_receives_gradient() {
    let h = 1e-5;
    for cell in CellKind::ALL {
        let cfg = NetworkConfig::new(cell, 2, 3, 2, 3).with_arch(Arch::Hybrid);
        let mut rng = Rng::new(21);
        let params = init_params(&cfg, &mut rng).unwrap();
        let sample = Sample {
            seq: random_seq(&mut rng, 6, 2),
            label: 1,
        };
        let grad = loss_gradient(&params, &cfg, &sample).unwrap();
        let mut net = ReferenceNet::new(&params, &cfg).unwrap();
        let mut nonzero = 0;
        // Tensor indices follow NetworkParams::tensors, where bank2 comes after bank1.
        let first: usize = params.bank1.iter().map(|c| c.tensors().len()).sum();
        let bank2: Vec<(String, Matrix)> = grad
            .bank2
            .as_ref()
            .unwrap()
            .iter()
            .flat_map(|c| c.tensors())
            .map(|(n, m)| (n, m.clone()))
            .collect();
        for (k, (name, m)) in bank2.iter().enumerate() {
            // relu(W_xc x) sits on its kink when W_xc is all zero.
            if name == "w_xc" {
                continue;
            }
            let t = first + k;
            for (i, &analytic) in m.as_slice().iter().enumerate() {
                let old = net.nudge(t, i, h).unwrap();
                let up = net.loss(&sample.seq, sample.label).unwrap();
                net.set(t, i, old - Dd::new(h)).unwrap();
                let down = net.loss(&sample.seq, sample.label).unwrap();
                net.set(t, i, old).unwrap();
                let numeric = (up - down).to_f64() / (2.0 * h);
                assert!(
                    relative_error(analytic, numeric) < 1e-4,
                    "{cell} {name}[{i}]"
                );
                if analytic.abs() > 1e-6 {
                    nonzero += 1;
                }
            }
        }
        assert!(nonzero > 0, "{cell}: θ2 gradient is zero");
    }
}

#[test]
fn zero_upstream_gives_zero_gradient() {
    let mut rng = Rng::new(5);
    let cfg = NetworkConfig::new(CellKind::Lstm, 2, 3, 2, 4).with_arch(Arch::Bidirectional);
    let params = init_params(&cfg, &mut rng).unwrap();
    let (_, trace) = forward(&random_seq(&mut rng, 5, 2), &params, &cfg, false, &mut rng).unwrap();
    let grad = backward(&trace, &[0.0; 4], &params, &cfg).unwrap();
    assert_eq!(grad.sq_norm(), 0.0);
}

#[test]
fn init_spread_matches_uniform_moment() {
    let d = 200;
    let cfg = NetworkConfig::new(CellKind::Gru, 1, d, 2, 2);
    let p = init_params(&cfg, &mut Rng::new(9)).unwrap();
    let values: Vec<f64> = p.bank1[0]
        .banks
        .iter()
        .flat_map(|b| b.wh.as_slice().iter().copied())
        .collect();
    assert!(values.len() >= 100_000);
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    let s = (1.0 / d as f64).sqrt();
    let expected = s / 3f64.sqrt();
    assert!((sd / expected - 1.0).abs() < 0.05, "sd {sd} vs {expected}");
    assert!(values.iter().all(|v| v.abs() <= s));
    assert!(p.bank1[0].banks.iter().all(|b| b
        .b
        .as_ref()
        .unwrap()
        .as_slice()
        .iter()
        .all(|v| *v == 0.0)));
}

#[test]
fn same_seed_same_params() {
    for arch in Arch::ALL {
        let cfg = NetworkConfig::new(CellKind::MpuC, 2, 5, 3, 4).with_arch(arch);
        assert_eq!(
            init_params(&cfg, &mut Rng::new(1)).unwrap(),
            init_params(&cfg, &mut Rng::new(1)).unwrap()
        );
    }
}

#[test]
fn ensemble_matches_brute_force_sum() {
    let mut rng = Rng::new(2);
    let members: Vec<Vector> = (0..3)
        .map(|_| (0..6).map(|_| rng.normal()).collect())
        .collect();
    let sum = ensemble_predict(&members).unwrap();
    for k in 0..6 {
        let mut s = 0.0;
        for m in &members {
            s += m[k];
        }
        assert_eq!(sum[k], s);
    }
    assert_eq!(ensemble_predict(&members[..1]).unwrap(), members[0]);
    assert!(ensemble_predict(&[vec![1.0], vec![1.0, 2.0]]).is_err());
}

#[test]
fn dropout_preserves_expectation() {
    let mut rng = Rng::new(4);
    let activation = 0.8;
    let draws = 100_000;
    let mask = dropout_mask(draws, 0.6, &mut rng);
    let mean = mask.iter().map(|m| m * activation).sum::<f64>() / draws as f64;
    assert!((mean / activation - 1.0).abs() < 0.02, "{mean}");
}

#[test]
fn dropout_only_applies_in_training() {
    let mut rng = Rng::new(6);
    let cfg = NetworkConfig::new(CellKind::Gru, 3, 4, 2, 3).with_dropout_keep(0.5);
    let p = init_params(&cfg, &mut rng).unwrap();
    let seq = random_seq(&mut rng, 8, 2);
    let (a, _) = forward(&seq, &p, &cfg, false, &mut Rng::new(1)).unwrap();
    let (b, _) = forward(&seq, &p, &cfg, false, &mut Rng::new(2)).unwrap();
    assert_eq!(a, b);
    let (c, _) = forward(&seq, &p, &cfg, true, &mut Rng::new(1)).unwrap();
    let (d, _) = forward(&seq, &p, &cfg, true, &mut Rng::new(2)).unwrap();
    assert_ne!(c, d);
}

fn tie_readouts(
    stacked: &NetworkConfig,
    per_layer: &NetworkConfig,
    ps: &NetworkParams,
    pp: &mut NetworkParams,
) {
    pp.bank1 = ps.bank1.clone();
    pp.bank2 = ps.bank2.clone();
    pp.b_y = ps.b_y.clone();
    for slot in 0..stacked.num_slots() {
        for layer in 0..stacked.num_layers() {
            let src = stacked.readout_index(slot, layer).unwrap();
            let dst = per_layer.readout_index(slot, layer).unwrap();
            pp.readout[dst] = ps.readout[src].clone();
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tied_per_layer_readout_equals_stacked(
        cell in 0usize..4,
        arch in 0usize..3,
        shared in any::<bool>(),
        layers in 1usize..4,
        d in 1usize..6,
        t in 2usize..12,
        seed in any::<u64>(),
    ) {
        let mode = if shared { ReadoutMatrices::Shared } else { ReadoutMatrices::Split };
        let stacked = NetworkConfig::new(CellKind::ALL[cell], layers, d, 2, 4)
            .with_arch(Arch::ALL[arch])
            .with_readout(Readout::StackedSum)
            .with_readout_matrices(mode);
        let per_layer = stacked.clone().with_readout(Readout::PerLayerWeighted);
        let mut rng = Rng::new(seed);
        let ps = init_params(&stacked, &mut rng).unwrap();
        let mut pp = init_params(&per_layer, &mut rng).unwrap();
        tie_readouts(&stacked, &per_layer, &ps, &mut pp);
        let seq = random_seq(&mut rng, t, 2);
        let (a, _) = forward(&seq, &ps, &stacked, false, &mut rng).unwrap();
        let (b, _) = forward(&seq, &pp, &per_layer, false, &mut rng).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn extended_sequence_layout(t in 2usize..300, seed in any::<u64>()) {
        let seq = random_seq(&mut Rng::new(seed), t, 3);
        let ext = build_extended_sequence(&seq).unwrap();
        let half = t / 2;
        prop_assert_eq!(ext.len(), t + half);
        prop_assert_eq!(&ext[..t], &seq[..]);
        prop_assert_eq!(&ext[t..], &seq[..half]);
    }

    #[test]
    fn cell_evals_follow_closed_form(arch in 0usize..3, layers in 1usize..5, t in 2usize..40, seed in any::<u64>()) {
        let arch = Arch::ALL[arch];
        let cfg = NetworkConfig::new(CellKind::Gru, layers, 2, 2, 2).with_arch(arch);
        let mut rng = Rng::new(seed);
        let p = init_params(&cfg, &mut rng).unwrap();
        let (_, trace) = forward(&random_seq(&mut rng, t, 2), &p, &cfg, false, &mut rng).unwrap();
        let per_layer = match arch {
            Arch::General => t,
            Arch::Hybrid => t + t / 2,
            Arch::Bidirectional => 2 * t,
        };
        prop_assert_eq!(trace.cell_evals, layers * per_layer);
    }
}
