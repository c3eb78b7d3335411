//! Acceptance suite. Runs every criterion in sequence (so timings are not
//! inflated by sibling tests), prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.
//!
//! `ACCEPTANCE_ONLY=3,5` restricts the run to selected criteria.
//! `EARLYHALT_THEIRS` (competitor CSV) and `EARLYHALT_OURS` (glob of eval
//! reports) enable the reference comparison in criterion 10.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use earlyhalt::backbones::{
    BackboneConfig, BackboneKind, Bound, ConvShapeletConfig, EarlyClassifier, LstmConfig, ModelConfig,
};
use earlyhalt::dataio::{synth_pattern_dataset, Dataset, LabeledSeries, SynthConfig};
use earlyhalt::evalreport::{evaluate, final_accuracy};
use earlyhalt::halting::{halting_distribution, sample_stop, StopMode};
use earlyhalt::ndtensor::{check_gradients, segments_from_lengths, BatchNormState, NodeId, Tape, Tensor};
use earlyhalt::objective::{
    evaluation_cost, halting_weighted_loss, uniform_prefix_cross_entropy, DecisionOutcome, TradeOff,
};
use earlyhalt::trainer::{train_phase1, train_phase2, TrainConfig};

type Outcome = Result<String, String>;
type Criterion = Box<dyn FnMut(&mut Option<Vec<E2eRun>>) -> Outcome>;

// Criterion 1
const HALT_SEQUENCES: usize = 10_000;
const HALT_MAX_LEN: usize = 300;
const HALT_MASS_TOL: f64 = 1e-9;
const HALT_BUDGET: Duration = Duration::from_secs(1);
// Criterion 2
const SINGLE_OP_TOL: f64 = 1e-6;
const BACKBONE_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(30);
// Criterion 3
const FLOW_INPUTS: usize = 100;
// Criterion 4
const CAUSAL_TRIALS: usize = 1_000;
const CAUSAL_MAX_LEN: usize = 60;
// Criterion 5
const CHI_SEQUENCES: usize = 20;
const CHI_DRAWS: usize = 100_000;
const CHI_MIN_P: f64 = 0.01;
const CHI_MIN_EXPECTED: f64 = 5.0;
// Criteria 6 and 7
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const MIN_PASSING_SEEDS: usize = 4;
const PHASE1_EPOCHS: usize = 30;
const PHASE2_EPOCHS: usize = 50;
const LEARNING_RATE: f64 = 0.01;
const PHASE1_MIN_ACC: f64 = 0.95;
const EARLINESS_RANGE: (f64, f64) = (0.30, 0.70);
const MAX_ACC_DROP: f64 = 0.05;
const E2E_BUDGET: Duration = Duration::from_secs(300);
// Criterion 8
const COST_TOL: f64 = 1e-12;
// Criterion 10
const PUBLISHED_WINS: u64 = 7;
const PUBLISHED_LOSSES: u64 = 38;

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|o| o.contains(&n));

    let mut e2e: Option<Vec<E2eRun>> = None;
    let criteria: Vec<(usize, &str, Criterion)> = vec![
        (1, "halting normalization", Box::new(|_| halting_normalization())),
        (2, "gradient fidelity", Box::new(|_| gradient_fidelity())),
        (3, "gradient-flow dichotomy", Box::new(|_| gradient_flow())),
        (4, "causality", Box::new(|_| causality())),
        (5, "distributional stopping", Box::new(|_| distributional_stopping())),
        (6, "synthetic end-to-end", Box::new(synthetic_end_to_end)),
        (7, "trade-off monotonicity", Box::new(tradeoff_monotonicity)),
        (8, "cost identities", Box::new(|_| cost_identities())),
        (9, "determinism", Box::new(|_| determinism())),
        (10, "reference comparison", Box::new(|_| reference_comparison())),
    ];
    let mut failed = 0;
    for (n, name, mut run) in criteria {
        if !wanted(n) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| run(&mut e2e)))
            .unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {n:>2} {name}: PASS ({detail}; {secs:.1} s)"),
            Err(detail) => {
                failed += 1;
                println!("criterion {n:>2} {name}: FAIL ({detail}; {secs:.1} s)");
            }
        }
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn halting_normalization() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let seqs: Vec<Vec<f64>> = (0..HALT_SEQUENCES)
        .map(|_| {
            let n = rng.random_range(1..=HALT_MAX_LEN);
            (0..n)
                .map(|_| match rng.random_range(0..20) {
                    0 => 0.0,
                    1 => 1.0,
                    _ => rng.random::<f64>(),
                })
                .collect()
        })
        .collect();
    let start = Instant::now();
    let mut worst = 0.0f64;
    for d in &seqs {
        let tr = halting_distribution(d).map_err(|e| e.to_string())?;
        let mass: f64 = tr.halt_prob.iter().sum();
        worst = worst.max((mass - 1.0).abs());
        ensure(*tr.budget.last().unwrap() == 0.0, || format!("B_T = {:e}", tr.budget.last().unwrap()))?;
    }
    let elapsed = start.elapsed();
    ensure(worst <= HALT_MASS_TOL, || format!("worst |ΣP − 1| = {worst:e}"))?;
    ensure(elapsed < HALT_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!("{HALT_SEQUENCES} sequences, worst |ΣP − 1| = {worst:.1e}, {:.0} ms", elapsed.as_secs_f64() * 1e3))
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::from_vec(dims, (0..n).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
}

/// Distinct, well-separated entries so max-pool checks stay away from ties.
fn tie_free(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n: usize = dims.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| 0.1 * i as f64 - 0.05 * n as f64).collect();
    for i in (1..n).rev() {
        v.swap(i, rng.random_range(0..=i));
    }
    Tensor::from_vec(dims, v).unwrap()
}

/// Random linear functional of a node, giving a scalar root.
fn project(tape: &mut Tape<f64>, x: NodeId) -> earlyhalt::Result<NodeId> {
    let n = tape.value(x).len();
    let mut rng = ChaCha8Rng::seed_from_u64(n as u64);
    let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(x, &w)
}

type Builder = Box<dyn Fn(&mut Tape<f64>, &[NodeId]) -> earlyhalt::Result<NodeId>>;

fn single_op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Builder)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Builder)> = Vec::new();
    let mut r = |dims: &[usize]| rand_tensor(rng, dims);
    cases.push((
        "linear",
        vec![r(&[3, 4]), r(&[4, 2]), r(&[2])],
        Box::new(|t, i| {
            let y = t.linear(i[0], i[1], i[2])?;
            project(t, y)
        }),
    ));
    cases.push((
        "conv1d_causal",
        vec![r(&[7, 2]), r(&[3, 2, 2]), r(&[2])],
        Box::new(|t, i| {
            let y = t.conv1d_causal(i[0], i[1], i[2])?;
            project(t, y)
        }),
    ));
    cases.push((
        "sigmoid",
        vec![r(&[5])],
        Box::new(|t, i| {
            let y = t.sigmoid(i[0]);
            project(t, y)
        }),
    ));
    cases.push((
        "tanh",
        vec![r(&[5])],
        Box::new(|t, i| {
            let y = t.tanh(i[0]);
            project(t, y)
        }),
    ));
    cases.push((
        "softmax_rows",
        vec![r(&[3, 4])],
        Box::new(|t, i| {
            let y = t.softmax_rows(i[0])?;
            project(t, y)
        }),
    ));
    cases.push((
        "log_softmax_rows",
        vec![r(&[3, 4])],
        Box::new(|t, i| {
            let y = t.log_softmax_rows(i[0])?;
            project(t, y)
        }),
    ));
    cases.push((
        "concat_features",
        vec![r(&[2]), r(&[3])],
        Box::new(|t, i| {
            let y = t.concat_features(&[i[0], i[1]])?;
            project(t, y)
        }),
    ));
    cases.push((
        "concat_cols",
        vec![r(&[3, 2]), r(&[3, 1])],
        Box::new(|t, i| {
            let y = t.concat_cols(&[i[0], i[1]])?;
            project(t, y)
        }),
    ));
    cases.push((
        "concat_rows",
        vec![r(&[2, 3]), r(&[1, 3])],
        Box::new(|t, i| {
            let y = t.concat_rows(&[i[0], i[1]])?;
            project(t, y)
        }),
    ));
    cases.push((
        "slice_cols",
        vec![r(&[3, 5])],
        Box::new(|t, i| {
            let y = t.slice_cols(i[0], 1, 3)?;
            project(t, y)
        }),
    ));
    cases.push((
        "gather_rows",
        vec![r(&[4, 2])],
        Box::new(|t, i| {
            let y = t.gather_rows(i[0], &[3, 0, 0, 2])?;
            project(t, y)
        }),
    ));
    cases.push((
        "gather_cols",
        vec![r(&[3, 4])],
        Box::new(|t, i| {
            let y = t.gather_cols(i[0], &[1, 1, 3])?;
            project(t, y)
        }),
    ));
    cases.push((
        "dropout",
        vec![r(&[4, 3])],
        Box::new(|t, i| {
            let mut mask_rng = ChaCha8Rng::seed_from_u64(5);
            let y = t.dropout(i[0], 0.5, true, &mut mask_rng)?;
            project(t, y)
        }),
    ));
    cases.push((
        "batch_norm (training)",
        vec![r(&[5, 3]), r(&[3]), r(&[3])],
        Box::new(|t, i| {
            let mut state = BatchNormState::new(3);
            let y = t.batch_norm(i[0], i[1], i[2], &mut state, true)?;
            project(t, y)
        }),
    ));
    cases.push((
        "batch_norm (inference)",
        vec![r(&[2, 3]), r(&[3]), r(&[3])],
        Box::new(|t, i| {
            let mut state = BatchNormState::new(3);
            state.running_mean = vec![0.2, -0.1, 0.4];
            state.running_var = vec![0.5, 1.5, 0.9];
            let y = t.batch_norm(i[0], i[1], i[2], &mut state, false)?;
            project(t, y)
        }),
    ));
    cases.push((
        "add",
        vec![r(&[2, 3]), r(&[2, 3])],
        Box::new(|t, i| {
            let y = t.add(i[0], i[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "sub",
        vec![r(&[2, 3]), r(&[2, 3])],
        Box::new(|t, i| {
            let y = t.sub(i[0], i[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "mul",
        vec![r(&[2, 3]), r(&[2, 3])],
        Box::new(|t, i| {
            let y = t.mul(i[0], i[1])?;
            project(t, y)
        }),
    ));
    cases.push((
        "affine",
        vec![r(&[4])],
        Box::new(|t, i| {
            let y = t.affine(i[0], -0.7, &[0.1, 0.2, 0.3, 0.4])?;
            project(t, y)
        }),
    ));
    cases.push((
        "scale and add_scalar",
        vec![r(&[3])],
        Box::new(|t, i| {
            let y = t.scale(i[0], 2.5);
            let y = t.add_scalar(y, -1.0);
            project(t, y)
        }),
    ));
    cases.push((
        "sum",
        vec![r(&[2, 2])],
        Box::new(|t, i| {
            let y = t.mul(i[0], i[0])?;
            Ok(t.sum(y))
        }),
    ));
    cases.push((
        "reshape",
        vec![r(&[2, 3])],
        Box::new(|t, i| {
            let y = t.reshape(i[0], &[3, 2])?;
            let y = t.softmax_rows(y)?;
            project(t, y)
        }),
    ));
    let probs: Vec<f64> = (0..7).map(|_| rng.random_range(0.1..0.9)).collect();
    cases.push((
        "halting",
        vec![Tensor::from_vec(&[7], probs).unwrap()],
        Box::new(|t, i| {
            let y = t.halting(i[0], &segments_from_lengths(&[3, 1, 3]))?;
            project(t, y)
        }),
    ));
    cases.push((
        "prefix_max_pool",
        vec![tie_free(rng, &[6, 3])],
        Box::new(|t, i| {
            let y = t.prefix_max_pool(i[0], 4)?;
            project(t, y)
        }),
    ));
    cases.push((
        "running_max",
        vec![tie_free(rng, &[6, 3])],
        Box::new(|t, i| {
            let y = t.running_max(i[0])?;
            project(t, y)
        }),
    ));
    cases
}

fn conv_model(init_seed: u64, num_classes: usize, blocks: usize, kernels: usize, step: usize) -> EarlyClassifier<f64> {
    EarlyClassifier::new(ModelConfig {
        backbone: BackboneConfig::Conv(ConvShapeletConfig {
            num_blocks: blocks,
            kernels_per_block: kernels,
            width_step: step,
            input_dim: 1,
            dropout_rate: 0.5,
        }),
        num_classes,
        init_seed,
    })
    .unwrap()
}

fn lstm_model(init_seed: u64, num_classes: usize, layers: usize, hidden: usize) -> EarlyClassifier<f64> {
    EarlyClassifier::new(ModelConfig {
        backbone: BackboneConfig::Lstm(LstmConfig {
            num_layers: layers,
            hidden_dim: hidden,
            input_dim: 1,
        }),
        num_classes,
        init_seed,
    })
    .unwrap()
}

fn random_series(rng: &mut ChaCha8Rng, n: usize, num_classes: usize) -> LabeledSeries<f64> {
    let v = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
    LabeledSeries::univariate(v, rng.random_range(0..num_classes)).unwrap()
}

/// Halting-weighted loss of the whole model, parameters supplied as leaves.
fn backbone_check(mut model: EarlyClassifier<f64>, batch: &[LabeledSeries<f64>], training: bool) -> earlyhalt::Result<f64> {
    let leaves: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
    let cell = std::cell::RefCell::new(&mut model);
    check_gradients(&leaves, |tape, ids| {
        let refs: Vec<&LabeledSeries<f64>> = batch.iter().collect();
        let p = Bound::from_ids(ids.to_vec());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut m = cell.borrow_mut();
        let fwd = m.forward_batch(tape, &p, &refs, training, &mut rng)?;
        let halt = tape.halting(fwd.delta, &fwd.segments)?;
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        Ok(halting_weighted_loss(tape, fwd.probs, halt, &labels, &fwd.segments, TradeOff::new(0.7)?)?.total)
    })
}

fn gradient_fidelity() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_single = (0.0f64, "");
    for (name, leaves, build) in single_op_cases(&mut rng) {
        let err = check_gradients(&leaves, build).map_err(|e| format!("{name}: {e}"))?;
        ensure(err < SINGLE_OP_TOL, || format!("{name}: relative error {err:e}"))?;
        if err >= worst_single.0 {
            worst_single = (err, name);
        }
    }

    let conv_batch: Vec<_> = (0..2).map(|_| random_series(&mut rng, 8, 3)).collect();
    let mut conv = conv_model(7, 3, 2, 2, 2);
    for p in conv.params_mut().iter_mut() {
        if p.name.ends_with("bias") || p.name.starts_with("bn") {
            p.value.data_mut().iter_mut().for_each(|v| *v += rng.random_range(-0.3..0.3));
        }
    }
    // The dropout mask is reseeded per build, so training mode is a fixed function too.
    let conv_err = backbone_check(conv.clone(), &conv_batch, true)
        .map_err(|e| e.to_string())?
        .max(backbone_check(conv, &conv_batch, false).map_err(|e| e.to_string())?);
    ensure(conv_err < BACKBONE_TOL, || format!("conv backbone: relative error {conv_err:e}"))?;

    let lstm_batch: Vec<_> = (0..2).map(|_| random_series(&mut rng, 3, 3)).collect();
    let lstm_err = backbone_check(lstm_model(11, 3, 2, 3), &lstm_batch, true).map_err(|e| e.to_string())?;
    ensure(lstm_err < BACKBONE_TOL, || format!("3-step LSTM: relative error {lstm_err:e}"))?;
    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_BUDGET, || format!("took {elapsed:?}"))?;
    Ok(format!(
        "worst single-op {:.1e} ({}), conv N=8 {conv_err:.1e}, LSTM {lstm_err:.1e}",
        worst_single.0, worst_single.1
    ))
}

fn gradient_flow() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut nonzero = 0;
    for trial in 0..FLOW_INPUTS {
        let classes = rng.random_range(2..5);
        let mut model = if trial % 2 == 0 {
            conv_model(rng.random(), classes, 2, 3, 2)
        } else {
            lstm_model(rng.random(), classes, 2, 4)
        };
        let (w, b) = model.stop_head();
        for idx in [w, b] {
            let t = &mut model.params_mut().at_mut(idx).value;
            t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        let batch: Vec<_> = (0..3)
            .map(|_| {
                let n = rng.random_range(4..12);
                random_series(&mut rng, n, classes)
            })
            .collect();
        let refs: Vec<&LabeledSeries<f64>> = batch.iter().collect();
        let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
        let stop_grads = |tape: &Tape<f64>, p: &Bound| -> Vec<f64> {
            [w, b]
                .iter()
                .flat_map(|&i| match tape.grad(p.id(i)) {
                    Some(g) => g.data().to_vec(),
                    None => vec![0.0; tape.value(p.id(i)).len()],
                })
                .collect()
        };

        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(trial as u64);
        let fwd = model.forward_batch(&mut tape, &p, &refs, true, &mut drop_rng).map_err(|e| e.to_string())?;
        let loss = uniform_prefix_cross_entropy(&mut tape, fwd.logits, &labels, &fwd.segments)
            .map_err(|e| e.to_string())?;
        tape.backward(loss.total).map_err(|e| e.to_string())?;
        let g1 = stop_grads(&tape, &p);
        ensure(g1.iter().all(|&g| g == 0.0), || format!("input {trial}: phase-1 stop-head gradient {g1:?}"))?;

        let mut tape = Tape::new();
        let p = model.bind(&mut tape, true);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(trial as u64);
        let fwd = model.forward_batch(&mut tape, &p, &refs, true, &mut drop_rng).map_err(|e| e.to_string())?;
        let halt = tape.halting(fwd.delta, &fwd.segments).map_err(|e| e.to_string())?;
        let a = TradeOff::new(rng.random_range(0.05..0.95)).unwrap();
        let loss = halting_weighted_loss(&mut tape, fwd.probs, halt, &labels, &fwd.segments, a)
            .map_err(|e| e.to_string())?;
        tape.backward(loss.total).map_err(|e| e.to_string())?;
        if stop_grads(&tape, &p).iter().any(|&g| g != 0.0) {
            nonzero += 1;
        }
    }
    ensure(nonzero == FLOW_INPUTS, || format!("phase-2 stop-head gradient non-zero on {nonzero}/{FLOW_INPUTS}"))?;
    Ok(format!("phase-1 gradient exactly 0, phase-2 non-zero on {nonzero}/{FLOW_INPUTS}"))
}

/// Inference-mode hidden states, class probabilities and stop probabilities.
fn inference_outputs(model: &EarlyClassifier<f64>, s: &LabeledSeries<f64>) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut m = model.clone();
    let mut tape = Tape::new();
    let p = m.bind(&mut tape, false);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let fwd = m.forward_batch(&mut tape, &p, &[s], false, &mut rng).unwrap();
    (
        tape.value(fwd.hidden).data().to_vec(),
        tape.value(fwd.probs).data().to_vec(),
        tape.value(fwd.delta).data().to_vec(),
    )
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut conv = conv_model(5, 3, 4, 8, 3);
    // non-trivial running statistics
    let warm: Vec<_> = (0..8).map(|_| random_series(&mut rng, 30, 3)).collect();
    let refs: Vec<_> = warm.iter().collect();
    let mut tape = Tape::new();
    let p = conv.bind(&mut tape, false);
    conv.forward_batch(&mut tape, &p, &refs, true, &mut rng).map_err(|e| e.to_string())?;
    let lstm = lstm_model(6, 3, 2, 32);

    for (label, model) in [("conv", &conv), ("lstm", &lstm)] {
        let h = model.config().backbone.hidden_dim();
        let c = model.num_classes();
        for trial in 0..CAUSAL_TRIALS {
            let n = rng.random_range(2..=CAUSAL_MAX_LEN);
            let s = random_series(&mut rng, n, c);
            let cut = rng.random_range(1..n);
            let mut v = s.values().to_vec();
            for x in &mut v[cut..] {
                *x += rng.random_range(-3.0..3.0);
            }
            let moved = LabeledSeries::univariate(v, s.label).unwrap();
            let (ha, pa, da) = inference_outputs(model, &s);
            let (hb, pb, db) = inference_outputs(model, &moved);
            ensure(
                ha[..cut * h] == hb[..cut * h] && pa[..cut * c] == pb[..cut * c] && da[..cut] == db[..cut],
                || format!("{label} trial {trial}: outputs before t={cut} changed"),
            )?;
        }
    }
    Ok(format!("{CAUSAL_TRIALS} perturbations per backbone, prefixes bit-identical"))
}

fn distributional_stopping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst_p = 1.0f64;
    for k in 0..CHI_SEQUENCES {
        let n = rng.random_range(2..=30);
        let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.6)).collect();
        let tr = halting_distribution(&delta).map_err(|e| e.to_string())?;
        let mut counts = vec![0usize; n];
        for _ in 0..CHI_DRAWS {
            counts[sample_stop(&tr, StopMode::Bernoulli, &mut rng)] += 1;
        }
        // Pool adjacent low-expectation bins.
        let mut bins: Vec<(f64, f64)> = Vec::new();
        let mut acc = (0.0, 0.0);
        for (p, &c) in tr.halt_prob.iter().zip(&counts) {
            acc.0 += p * CHI_DRAWS as f64;
            acc.1 += c as f64;
            if acc.0 >= CHI_MIN_EXPECTED {
                bins.push(acc);
                acc = (0.0, 0.0);
            }
        }
        if acc.0 > 0.0 {
            match bins.last_mut() {
                Some(last) => {
                    last.0 += acc.0;
                    last.1 += acc.1;
                }
                None => bins.push(acc),
            }
        }
        if bins.len() < 2 {
            continue;
        }
        let stat: f64 = bins.iter().map(|(e, o)| (o - e).powi(2) / e).sum();
        let dist = ChiSquared::new((bins.len() - 1) as f64).unwrap();
        let p = 1.0 - dist.cdf(stat);
        ensure(p > CHI_MIN_P, || format!("sequence {k}: χ² = {stat:.2}, p = {p:.4}"))?;
        worst_p = worst_p.min(p);
    }
    Ok(format!("{CHI_SEQUENCES} sequences × {CHI_DRAWS} draws, smallest p = {worst_p:.3}"))
}

fn synth_set(seed: u64) -> Dataset<f64> {
    synth_pattern_dataset(&SynthConfig {
        n_train_per_class: 200,
        n_test_per_class: 200,
        length: 100,
        signal_pos: 0.3,
        sigma: 0.5,
        seed,
    })
    .unwrap()
}

struct E2eRun {
    kind: BackboneKind,
    seed: u64,
    data: Dataset<f64>,
    phase1: EarlyClassifier<f64>,
    phase1_acc: f64,
    /// (accuracy, earliness) at α = 0.8
    finetuned: (f64, f64),
}

fn finetune(run: &E2eRun, alpha: f64) -> earlyhalt::Result<(f64, f64)> {
    let a = TradeOff::new(alpha)?;
    let mut model = run.phase1.clone();
    let cfg = TrainConfig::finetune(a, LEARNING_RATE, PHASE2_EPOCHS, run.seed).clipped_for(run.kind);
    train_phase2(&mut model, &run.data.train, None, &cfg, &mut |_| {})?;
    let (rec, _) = evaluate(&model, &run.data.name, &run.data.test, a, StopMode::Expected, run.seed)?;
    Ok((rec.accuracy, rec.earliness))
}

fn synthetic_end_to_end(store: &mut Option<Vec<E2eRun>>) -> Outcome {
    let mut runs = Vec::new();
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for kind in [BackboneKind::Conv, BackboneKind::Lstm] {
        let start = Instant::now();
        let mut passing = 0;
        for seed in SEEDS {
            let data = synth_set(seed);
            let mut model = EarlyClassifier::new(ModelConfig {
                backbone: BackboneConfig::default_for(kind, 1),
                num_classes: data.num_classes,
                init_seed: seed,
            })
            .map_err(|e| e.to_string())?;
            let cfg = TrainConfig::classification(LEARNING_RATE, PHASE1_EPOCHS, seed).clipped_for(kind);
            train_phase1(&mut model, &data.train, None, &cfg, &mut |_| {}).map_err(|e| e.to_string())?;
            let refs: Vec<_> = data.test.iter().collect();
            let phase1_acc = final_accuracy(&model.predict(&refs).map_err(|e| e.to_string())?, &refs);
            let mut run = E2eRun {
                kind,
                seed,
                data,
                phase1: model,
                phase1_acc,
                finetuned: (0.0, 0.0),
            };
            run.finetuned = finetune(&run, 0.8).map_err(|e| e.to_string())?;
            let (acc, earl) = run.finetuned;
            let ok = phase1_acc >= PHASE1_MIN_ACC
                && (EARLINESS_RANGE.0..=EARLINESS_RANGE.1).contains(&earl)
                && (phase1_acc - acc).abs() <= MAX_ACC_DROP;
            println!(
                "    {kind} seed {seed}: phase-1 acc {phase1_acc:.4}, α=0.8 acc {acc:.4} earliness {earl:.4} {}",
                if ok { "ok" } else { "miss" }
            );
            passing += ok as usize;
            runs.push(run);
        }
        let elapsed = start.elapsed();
        summary.push(format!("{kind} {passing}/5 seeds in {:.0} s", elapsed.as_secs_f64()));
        if passing < MIN_PASSING_SEEDS {
            failures.push(format!("{kind}: only {passing}/5 seeds meet the bounds"));
        }
        if elapsed >= E2E_BUDGET {
            failures.push(format!("{kind}: took {:.0} s", elapsed.as_secs_f64()));
        }
    }
    *store = Some(runs);
    if failures.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(format!("{}; {}", failures.join("; "), summary.join(", ")))
    }
}

fn tradeoff_monotonicity(store: &mut Option<Vec<E2eRun>>) -> Outcome {
    if store.is_none() {
        synthetic_end_to_end(store).ok();
    }
    let runs = store.as_ref().ok_or("phase-1 models unavailable")?;
    let mut summary = Vec::new();
    let mut failures = Vec::new();
    for kind in [BackboneKind::Conv, BackboneKind::Lstm] {
        let mut passing = 0;
        for run in runs.iter().filter(|r| r.kind == kind) {
            let (a6, e6) = finetune(run, 0.6).map_err(|e| e.to_string())?;
            let (a9, e9) = finetune(run, 0.9).map_err(|e| e.to_string())?;
            let flag = |acc: f64| if acc < run.phase1_acc - MAX_ACC_DROP { " (accuracy collapsed)" } else { "" };
            println!(
                "    {kind} seed {}: α=0.6 earliness {e6:.4} acc {a6:.4}{}, α=0.9 earliness {e9:.4} acc {a9:.4}{}",
                run.seed,
                flag(a6),
                flag(a9)
            );
            passing += (e9 >= e6) as usize;
        }
        summary.push(format!("{kind} {passing}/5 seeds"));
        if passing < MIN_PASSING_SEEDS {
            failures.push(format!("{kind}: ordering holds on {passing}/5 seeds"));
        }
    }
    if failures.is_empty() {
        Ok(summary.join(", "))
    } else {
        Err(failures.join("; "))
    }
}

fn cost_identities() -> Outcome {
    let a8 = TradeOff::new(0.8).unwrap();
    let table = [
        (DecisionOutcome { predicted: 1, truth: 1, t: 0, last: 100 }, a8, 0.0),
        (DecisionOutcome { predicted: 0, truth: 1, t: 100, last: 100 }, TradeOff::new(0.3).unwrap(), 1.0),
        (DecisionOutcome { predicted: 0, truth: 1, t: 50, last: 100 }, a8, 0.9),
    ];
    for (o, a, want) in table {
        let got = evaluation_cost(&o, a);
        ensure(got == want, || format!("cost of {o:?} at α={} is {got}, expected {want}", a.alpha()))?;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let series: Vec<_> = (0..150)
        .map(|_| {
            let n = rng.random_range(1..40);
            random_series(&mut rng, n, 3)
        })
        .collect();
    let mut worst = 0.0f64;
    let mut records = 0;
    for model in [conv_model(1, 3, 2, 4, 2), lstm_model(2, 3, 1, 6)] {
        for mode in [StopMode::Bernoulli, StopMode::Threshold, StopMode::Expected] {
            for alpha in [0.0, 0.35, 0.8, 1.0] {
                let a = TradeOff::new(alpha).unwrap();
                let (rec, outcomes) = evaluate(&model, "random", &series, a, mode, 9).map_err(|e| e.to_string())?;
                let mut total = 0.0;
                for (o, s) in outcomes.iter().zip(&series) {
                    let miss = if o.predicted == s.label { 0.0 } else { 1.0 };
                    let last = s.len() - 1;
                    let e = if last == 0 { 0.0 } else { o.t_stop as f64 / last as f64 };
                    total += alpha * miss + (1.0 - alpha) * e;
                }
                let recomputed = total / series.len() as f64;
                worst = worst.max((recomputed - rec.mean_cost).abs());
                records += 1;
            }
        }
    }
    ensure(worst <= COST_TOL, || format!("mean_cost differs from recomputation by {worst:e}"))?;
    Ok(format!("unit table exact, {records} records within {worst:.1e}"))
}

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_earlyhalt"))
}

fn run_train(args: &[&str]) -> Result<(), String> {
    let out = bin().arg("train").args(args).output().map_err(|e| e.to_string())?;
    ensure(out.status.success(), || format!("train {args:?} failed: {}", String::from_utf8_lossy(&out.stderr)))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let data = dir.join("synth");
    let out = bin()
        .args(["synth", "--out", data.to_str().unwrap(), "--n-train", "30", "--n-test", "10", "--length", "40"])
        .output()
        .map_err(|e| e.to_string())?;
    ensure(out.status.success(), || "synth failed".into())?;
    let d = data.to_str().unwrap();
    let mut compared = 0;
    for backbone in ["conv", "lstm"] {
        let mut artifacts = Vec::new();
        for rep in 0..2 {
            let p1 = dir.join(format!("{backbone}-{rep}-p1.ckpt"));
            let p2 = dir.join(format!("{backbone}-{rep}-p2.ckpt"));
            let (s1, s2) = (p1.to_str().unwrap(), p2.to_str().unwrap());
            run_train(&["--data", d, "--backbone", backbone, "--phase", "1", "--epochs", "3", "--seed", "13", "--out", s1])?;
            run_train(&[
                "--data", d, "--phase", "2", "--alpha", "0.7", "--epochs", "3", "--seed", "13", "--init", s1, "--out", s2,
            ])?;
            let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
            let mut log1 = p1.clone().into_os_string();
            log1.push(".log.jsonl");
            let mut log2 = p2.clone().into_os_string();
            log2.push(".log.jsonl");
            artifacts.push([read(&p1)?, read(Path::new(&log1))?, read(&p2)?, read(Path::new(&log2))?]);
        }
        for (k, what) in ["phase-1 checkpoint", "phase-1 log", "phase-2 checkpoint", "phase-2 log"].iter().enumerate() {
            ensure(!artifacts[0][k].is_empty(), || format!("{backbone} {what} is empty"))?;
            ensure(artifacts[0][k] == artifacts[1][k], || format!("{backbone} {what} differs between runs"))?;
            compared += 1;
        }
    }
    Ok(format!("{compared} artifact pairs byte-identical"))
}

fn reference_comparison() -> Outcome {
    match (std::env::var("EARLYHALT_THEIRS"), std::env::var("EARLYHALT_OURS")) {
        (Ok(theirs), Ok(ours)) => {
            let out = bin()
                .args(["compare", "--ours", &ours, "--theirs", &theirs, "--alpha", "0.6", "--method", "SR2-CF2"])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.success(), || String::from_utf8_lossy(&out.stderr).into_owned())?;
            let v: serde_json::Value = serde_json::from_slice(&out.stdout).map_err(|e| e.to_string())?;
            let (w, l) = (v[0]["wins"].as_u64(), v[0]["losses"].as_u64());
            ensure(w == Some(PUBLISHED_WINS) && l == Some(PUBLISHED_LOSSES), || {
                format!("got {w:?} wins / {l:?} losses, expected {PUBLISHED_WINS} / {PUBLISHED_LOSSES}")
            })?;
            Ok(format!("{PUBLISHED_WINS} wins / {PUBLISHED_LOSSES} losses reproduced"))
        }
        _ => {
            let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
            let missing = tmp.path().join("supplementary.csv");
            let out = bin()
                .args(["compare", "--ours", "none*.json", "--theirs", missing.to_str().unwrap(), "--alpha", "0.6"])
                .output()
                .map_err(|e| e.to_string())?;
            ensure(out.status.code() == Some(3), || format!("exit status {:?}, expected 3", out.status.code()))?;
            Ok("reference data not supplied; compare exits with status 3".into())
        }
    }
}
