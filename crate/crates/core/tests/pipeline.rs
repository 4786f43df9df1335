//! End-to-end runs over synthetic data: generation, training, indexing,
//! file round trips and evaluation.

use mopq::io::{
    gen_synthetic, load_checkpoint, load_dataset, save_checkpoint, save_dataset, Checkpoint, EmbeddingSet, Split,
    SyntheticSpec,
};
use mopq::model::{EncoderConfig, ModelConfig};
use mopq::objectives::CommitmentForm;
use mopq::quantizer::SelectionKind;
use mopq::retrieval::{build_index, encode_set, evaluate, evaluate_exact, load_index, save_index};
use mopq::trainer::{evaluate_split, train, train_mopq, Objective, TrainConfig};

fn split_queries(data: &mopq::io::PairedDataset, split: Split) -> (EmbeddingSet, Vec<String>) {
    let mut queries = EmbeddingSet::new(data.input_dim());
    let mut truths = Vec::new();
    for p in data.split(split) {
        queries.push(data.queries.id(p.query), data.queries.row(p.query)).unwrap();
        truths.push(data.keys.id(p.key).to_string());
    }
    (queries, truths)
}

#[test]
fn clustered_data_is_retrievable_exactly() {
    let data = gen_synthetic(&SyntheticSpec {
        n_pairs: 1000,
        input_dim: 32,
        cluster_count: 100,
        noise_sigma: 0.1,
        seed: 9,
    })
    .unwrap();
    let (queries, truths) = split_queries(&data, Split::Test);
    let rows: Vec<Vec<f64>> = (0..queries.len()).map(|i| queries.row(i).to_vec()).collect();
    let result = evaluate_exact(&data.keys, &rows, &truths, &[10]).unwrap();
    assert!(result.recall(10).unwrap() >= 0.9, "{result:?}");
}

fn small_model() -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            input_dim: 16,
            hidden_dim: 16,
            output_dim: 8,
            depth: 2,
        },
        m: 2,
        l: 8,
        selection: SelectionKind::L2,
        commitment: CommitmentForm::Straight,
    }
}

#[test]
fn saved_artifacts_reproduce_in_memory_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_synthetic(&SyntheticSpec {
        n_pairs: 600,
        input_dim: 16,
        cluster_count: 60,
        noise_sigma: 0.1,
        seed: 4,
    })
    .unwrap();
    save_dataset(dir.path(), &data).unwrap();
    let data = load_dataset(dir.path()).unwrap();
    let model = small_model();
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let trained = train_mopq(&data, &model, &cfg).unwrap();
    assert_eq!(trained.history.len(), 3);

    let ckpt_path = dir.path().join("model.mopqckp");
    save_checkpoint(
        &ckpt_path,
        &Checkpoint {
            model: model.clone(),
            params: trained.params.clone(),
        },
    )
    .unwrap();
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.model, model);
    assert_eq!(ckpt.params, trained.params);

    let index = build_index(&model, &trained.params, &data.keys).unwrap();
    let index_path = dir.path().join("keys.mopqidx");
    save_index(&index_path, &index).unwrap();
    let loaded = load_index(&index_path).unwrap();
    assert_eq!(loaded, index);

    let (queries, truths) = split_queries(&data, Split::Test);
    let encoded = encode_set(&model, &ckpt.params, &queries).unwrap();
    let rows: Vec<Vec<f64>> = (0..encoded.len()).map(|i| encoded.row(i).to_vec()).collect();
    let from_file = evaluate(&loaded, &rows, &truths, &[1, 10]).unwrap();
    let (in_memory, _) = evaluate_split(&model, &trained.params, &data, Split::Test, &[1, 10]).unwrap();
    assert_eq!(from_file, in_memory);
}

#[test]
fn every_objective_trains_on_small_data() {
    let data = gen_synthetic(&SyntheticSpec {
        n_pairs: 400,
        input_dim: 16,
        cluster_count: 40,
        noise_sigma: 0.1,
        seed: 6,
    })
    .unwrap();
    for objective in [
        Objective::MopqInBatch,
        Objective::MopqDcs,
        Objective::MopqNcs,
        Objective::Dqn,
        Objective::KMeansPq,
    ] {
        let devices = if objective.sampling().is_some() && objective != Objective::MopqInBatch { 2 } else { 1 };
        let cfg = TrainConfig {
            objective,
            epochs: 2,
            batch_size: 16,
            devices,
            recon_weight: if objective == Objective::Dqn { 0.1 } else { 0.0 },
            ..TrainConfig::default()
        };
        let out = train(&data, &small_model(), &cfg).unwrap();
        assert_eq!(out.history.len(), 2, "{objective}");
        assert!(out.history.epochs.iter().all(|e| e.loss.is_finite()), "{objective}");
    }
}

#[test]
fn undersized_training_split_is_rejected() {
    let data = gen_synthetic(&SyntheticSpec {
        n_pairs: 50,
        input_dim: 16,
        cluster_count: 5,
        noise_sigma: 0.1,
        seed: 1,
    })
    .unwrap();
    let cfg = TrainConfig {
        batch_size: 64,
        ..TrainConfig::default()
    };
    assert!(train(&data, &small_model(), &cfg).is_err());
}

/// The separable benchmark used by the acceptance suite reaches the
/// validation recall recorded from the pilot runs.
#[test]
fn separable_benchmark_reaches_pilot_recall() {
    let data = gen_synthetic(&SyntheticSpec {
        n_pairs: 10_000,
        input_dim: 64,
        cluster_count: 1000,
        noise_sigma: 0.1,
        seed: 1,
    })
    .unwrap();
    let model = ModelConfig {
        encoder: EncoderConfig {
            input_dim: 64,
            hidden_dim: 64,
            output_dim: 32,
            depth: 2,
        },
        m: 4,
        l: 16,
        selection: SelectionKind::L2,
        commitment: CommitmentForm::Straight,
    };
    let out = train_mopq(&data, &model, &TrainConfig::default()).unwrap();
    let best = out.history.best_epoch.unwrap();
    let recall = out.history.epochs[best - 1].recall_at_10;
    assert!(recall >= 0.8, "validation Recall@10 {recall}");
}
