use c2f_core::diagnostics::difficulty_trace;
use c2f_core::encode::BoxRaster;
use c2f_core::nn::{Head, ModelSpec};
use c2f_core::optim::{Sgd, SgdConfig};
use c2f_core::rng::StreamKind;
use c2f_core::schedule::{Schedule, Strategy};
use c2f_core::tasks::{BatchStream, Dataset, Split, TaskConfig, TaskFamily};
use c2f_core::train::{encoding_for, evaluate, train_run, CoarseFinePair, InferOptions, StepTrace, TrainOptions};
use c2f_core::Rng;

fn small_loc() -> TaskConfig {
    TaskConfig {
        height: 16,
        width: 16,
        n_train: 64,
        n_test: 16,
        ..TaskConfig::new(TaskFamily::Localization)
    }
}

fn small_pair(seed: u64) -> CoarseFinePair {
    let spec = ModelSpec::backbone(1, 16, 16, &[4, 4], Head::Box);
    let enc = encoding_for(&spec, BoxRaster::Soft { k: 2.0 }).unwrap();
    CoarseFinePair::new(&spec, enc, seed).unwrap()
}

fn train(strategy: &Strategy, iters: usize, batch: usize) -> Vec<StepTrace> {
    let data = Dataset::generate(&small_loc(), 3, Split::Train).unwrap();
    let mut pair = small_pair(1);
    let mut stream = BatchStream::new(&data, batch, 1).unwrap();
    let mut sgd = Sgd::new(SgdConfig { lr: 0.005, ..SgdConfig::default() });
    let mut rng = Rng::for_kind(1, StreamKind::Sampling, 0);
    train_run(&mut pair, strategy, &mut stream, &mut sgd, iters, &mut rng, &TrainOptions::default()).unwrap()
}

#[test]
fn coarse_fed_fraction_tracks_schedule() {
    let (iters, batch, window) = (2000, 4, 500);
    let s = Schedule::new(0.5, 0, iters / 2, iters).unwrap();
    let traces = train(&Strategy::Progressive(s), iters, batch);
    assert_eq!(traces.len(), iters);
    let rows = difficulty_trace(&traces, window).unwrap();
    let mut prev = 0.0;
    for r in &rows {
        assert!((r.coarse_fraction - r.mean_t).abs() <= 0.07, "{r:?}");
        // Per-window binomial noise, three standard deviations.
        let sigma = (r.mean_t * (1.0 - r.mean_t) / (window * batch) as f64).sqrt();
        assert!(r.coarse_fraction >= prev - 3.0 * sigma, "{r:?}");
        prev = r.coarse_fraction;
    }
    for t in &traces {
        assert_eq!(t.loss_total, t.loss_coarse + t.loss_fine);
        assert!(t.loss_total.is_finite());
    }
}

#[test]
fn joint_always_feeds_coarse() {
    let traces = train(&Strategy::Joint, 20, 2);
    assert!(traces.iter().all(|t| t.chose_coarse == 1.0 && t.t == 1.0));
}

/// A fine model that copies the coarse weights and ignores its extra input
/// channels scores exactly like the coarse model.
#[test]
fn fine_ignoring_prediction_matches_coarse() {
    let mut pair = small_pair(4);
    let coarse: Vec<_> = pair.coarse.params().into_iter().map(|(_, t)| t.clone()).collect();
    for (i, (dst, src)) in pair.fine.params_mut().into_iter().zip(&coarse).enumerate() {
        if i == 0 {
            // (c_out, 2 c_in, kh, kw): image channels first, prediction after.
            let s = dst.shape().to_vec();
            let per_out = s[1] * s[2] * s[3];
            let half = per_out / 2;
            let d = dst.data_mut();
            for o in 0..s[0] {
                d[o * per_out..o * per_out + half].copy_from_slice(&src.data()[o * half..(o + 1) * half]);
                d[o * per_out + half..(o + 1) * per_out].iter_mut().for_each(|v| *v = 0.0);
            }
        } else {
            dst.data_mut().copy_from_slice(src.data());
        }
    }
    let test = Dataset::generate(&small_loc(), 3, Split::Test).unwrap();
    let eval = evaluate(&pair, &Strategy::Joint, &test, &InferOptions::default()).unwrap();
    assert_eq!(eval.fine.as_ref(), Some(&eval.coarse));
}

#[test]
fn evaluation_is_deterministic() {
    let pair = small_pair(2);
    let test = Dataset::generate(&small_loc(), 3, Split::Test).unwrap();
    let strategy = Strategy::Progressive(Schedule::constant(0.5, 10).unwrap());
    let a = evaluate(&pair, &strategy, &test, &InferOptions::default()).unwrap();
    let b = evaluate(&pair, &strategy, &test, &InferOptions::default()).unwrap();
    assert_eq!(a, b);
}
