//! Randomized invariants across modules.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mopq::dcs::{full_loss_oracle, simulate_step, PairBatch, Sampling};
use mopq::grad::{max_relative_error, ParameterSet, Tensor};
use mopq::model::{EncoderConfig, ModelConfig};
use mopq::objectives::CommitmentForm;
use mopq::quantizer::{CodebookSet, SelectionKind};
use mopq::verification::{random_instance, verify_lemma_and_nonmonotone};

fn cluster(seed: u64, devices: usize, n: usize, selection: SelectionKind) -> (ModelConfig, ParameterSet, Vec<PairBatch>) {
    let model = ModelConfig {
        encoder: EncoderConfig {
            input_dim: 3,
            hidden_dim: 4,
            output_dim: 4,
            depth: 2,
        },
        m: 2,
        l: 3,
        selection,
        commitment: CommitmentForm::Straight,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = model.encoder.init(&mut rng);
    let words = (0..model.l * model.d()).map(|_| rng.random_range(-1.0..1.0)).collect();
    model
        .install_codebooks(&mut params, &CodebookSet::new(model.m, model.l, model.d(), words).unwrap())
        .unwrap();
    let mut t = |r| Tensor::new(r, 3, (0..r * 3).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
    let batches = (0..devices)
        .map(|_| PairBatch {
            queries: t(n),
            keys: t(n),
        })
        .collect();
    (model, params, batches)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cross_device_gradients_equal_single_graph(seed in 0u64..10_000, d in 1usize..4, n in 1usize..4, k in 0usize..4) {
        let (model, params, batches) = cluster(seed, d, n, SelectionKind::ALL[k]);
        let step = simulate_step(&model, &params, &batches, Sampling::Differentiable).unwrap();
        let (loss, oracle) = full_loss_oracle(&model, &params, &batches).unwrap();
        prop_assert!(max_relative_error(&step.grads, &oracle).0 < 1e-9);
        prop_assert!((step.loss - loss).abs() < 1e-12);
    }

    #[test]
    fn device_order_does_not_change_the_pooled_loss(seed in 0u64..10_000, d in 2usize..4) {
        let (model, params, mut batches) = cluster(seed, d, 2, SelectionKind::L2);
        let (a, _) = full_loss_oracle(&model, &params, &batches).unwrap();
        batches.reverse();
        let (b, _) = full_loss_oracle(&model, &params, &batches).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn oriented_perturbations_pass(seed in 0u64..100_000) {
        let inst = random_instance(8, 2, 4, 50, 20, seed).unwrap();
        let report = verify_lemma_and_nonmonotone(&inst.books, &inst.keys, &inst.queries, seed).unwrap();
        prop_assert!(report.passed(), "{:?}", report);
    }
}
