//! Training regimes: MoPQ under the multinoulli contrastive loss (in-batch,
//! or across simulated devices), DQN-style joint training with a
//! reconstruction penalty, and non-supervised k-means PQ over an encoder
//! trained on the matching loss alone.

pub mod adam;
pub mod kmeans;

pub use adam::{adam_update, Adam, AdamState, ADAM_EPS};
pub use kmeans::{fit_kmeans_pq, kmeans, KMeansFit, PqFit};

use std::fmt;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dcs::{simulate_step, PairBatch, Sampling};
use crate::grad::{GradError, Graph, ParameterSet, Tensor};
use crate::io::{EmbeddingSet, Pair, PairedDataset, Split};
use crate::model::ModelConfig;
use crate::objectives::matching_losses;
use crate::quantizer::{codebook_param, CodebookSet};
use crate::retrieval::{build_index, encode_set, evaluate, EvalResult, QuantizedIndex};
use crate::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Objective {
    MopqInBatch,
    MopqDcs,
    MopqNcs,
    Dqn,
    KMeansPq,
}

impl Objective {
    pub const ALL: [Objective; 5] = [Self::MopqInBatch, Self::MopqDcs, Self::MopqNcs, Self::Dqn, Self::KMeansPq];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MopqInBatch => "mopq-inbatch",
            Self::MopqDcs => "mopq-dcs",
            Self::MopqNcs => "mopq-ncs",
            Self::Dqn => "dqn",
            Self::KMeansPq => "kmeans-pq",
        }
    }

    /// Negative-sampling scheme of the MoPQ objectives; `None` for the baselines.
    pub fn sampling(self) -> Option<Sampling> {
        match self {
            Self::MopqInBatch => Some(Sampling::Local),
            Self::MopqDcs => Some(Sampling::Differentiable),
            Self::MopqNcs => Some(Sampling::NonDifferentiable),
            Self::Dqn | Self::KMeansPq => None,
        }
    }
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Objective {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|o| o.as_str() == s)
            .ok_or_else(|| format!("unknown objective '{s}'"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: Objective,
    /// Weight λ of the reconstruction term (dqn only).
    pub recon_weight: f64,
    pub epochs: usize,
    /// Per-device batch size `N`.
    pub batch_size: usize,
    /// Simulated device count `D`.
    pub devices: usize,
    pub learning_rate: f64,
    pub adam_betas: (f64, f64),
    pub seed: u64,
    /// Lloyd iterations for codebook initialization and k-means PQ.
    pub kmeans_iters: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objective: Objective::MopqInBatch,
            recon_weight: 0.0,
            epochs: 20,
            batch_size: 64,
            devices: 1,
            learning_rate: 1e-3,
            adam_betas: (0.9, 0.999),
            seed: 1,
            kmeans_iters: 25,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.batch_size == 0 || self.devices == 0 {
            return bad("batch_size and devices must be positive".into());
        }
        if !(self.recon_weight >= 0.0 && self.recon_weight.is_finite()) {
            return bad(format!("recon_weight {} must be finite and ≥ 0", self.recon_weight));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate {} must be positive", self.learning_rate));
        }
        let (b1, b2) = self.adam_betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return bad(format!("adam betas ({b1}, {b2}) must lie in [0, 1)"));
        }
        if self.kmeans_iters == 0 {
            return bad("kmeans_iters must be at least 1".into());
        }
        if self.recon_weight != 0.0 && self.objective != Objective::Dqn {
            return bad(format!("recon_weight applies only to dqn, not {}", self.objective));
        }
        if self.devices > 1 && matches!(self.objective, Objective::Dqn | Objective::KMeansPq) {
            return bad(format!("{} runs on a single device", self.objective));
        }
        Ok(())
    }

    pub fn global_batch(&self) -> usize {
        self.batch_size * self.devices
    }
}

/// Metrics of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training loss over the epoch's steps.
    pub loss: f64,
    /// Mean `‖z^k − z̃^k‖₂` over all keys.
    pub reconstruction_loss: f64,
    pub recall_at_1: f64,
    pub recall_at_10: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) of the retained checkpoint.
    pub best_epoch: Option<usize>,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Model parameters (encoder and codebooks) with the training history.
#[derive(Clone, Debug)]
pub struct Trained {
    pub params: ParameterSet,
    pub history: TrainHistory,
}

fn gather(set: &EmbeddingSet, rows: impl Iterator<Item = usize>) -> Result<Tensor, GradError> {
    let mut data = Vec::new();
    let mut count = 0;
    for r in rows {
        data.extend_from_slice(set.row(r));
        count += 1;
    }
    Tensor::new(count, set.dim(), data)
}

/// Codebooks from k-means on `keys` (`n×d`), or Gaussian codewords scaled
/// to the sub-vector norm when there are fewer keys than codewords.
pub fn init_codebooks(model: &ModelConfig, keys: &Tensor, iters: usize, seed: u64) -> Result<CodebookSet, Error> {
    let d = model.d();
    if keys.rows() >= model.l {
        let rows: Vec<&[f64]> = (0..keys.rows()).map(|r| keys.row_slice(r)).collect();
        return Ok(fit_kmeans_pq(&rows, model.m, model.l, iters, seed)?.books);
    }
    let s = model.sub_dim();
    let mean_sq = keys.data().iter().map(|v| v * v).sum::<f64>() / keys.rows().max(1) as f64;
    let scale = (mean_sq / model.m as f64).sqrt() / (s as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = (0..model.l * d)
        .map(|_| {
            let g: f64 = StandardNormal.sample(&mut rng);
            g * scale
        })
        .collect();
    Ok(CodebookSet::new(model.m, model.l, d, words)?)
}

/// Mean reconstruction norm of the quantized keys in `index`.
fn mean_distortion(index: &QuantizedIndex, encoded: &EmbeddingSet) -> f64 {
    let total: f64 = (0..index.len())
        .map(|i| {
            let z = encoded.get(index.key_id(i)).expect("index built from this set");
            let r = index.reconstruct(i);
            z.iter().zip(&r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt()
        })
        .sum();
    total / index.len() as f64
}

/// Index and recall of the current model over `split`, retrieving from
/// every key of the dataset.
pub fn evaluate_split(
    model: &ModelConfig,
    params: &ParameterSet,
    data: &PairedDataset,
    split: Split,
    ns: &[usize],
) -> Result<(EvalResult, f64), Error> {
    let encoded_keys = encode_set(model, params, &data.keys)?;
    let index = build_index(model, params, &data.keys)?;
    let distortion = mean_distortion(&index, &encoded_keys);
    let pairs = data.split(split);
    if pairs.is_empty() {
        return Err(Error::Config(format!("the {split} split is empty")));
    }
    let mut queries = EmbeddingSet::new(data.queries.dim());
    for p in &pairs {
        queries
            .push(data.queries.id(p.query), data.queries.row(p.query))
            .map_err(Error::Config)?;
    }
    let encoded = encode_set(model, params, &queries)?;
    let rows: Vec<Vec<f64>> = (0..encoded.len()).map(|i| encoded.row(i).to_vec()).collect();
    let truths: Vec<&str> = pairs.iter().map(|p| data.keys.id(p.key)).collect();
    Ok((evaluate(&index, &rows, &truths, ns)?, distortion))
}

/// k-means PQ codebooks fit on the encoded training keys.
fn refit_kmeans(model: &ModelConfig, params: &mut ParameterSet, data: &PairedDataset, train: &[Pair], cfg: &TrainConfig) -> Result<(), Error> {
    let x = gather(&data.keys, train.iter().map(|p| p.key))?;
    let z = model.encoder.encode_rows(&x, params)?;
    let rows: Vec<&[f64]> = (0..z.rows()).map(|r| z.row_slice(r)).collect();
    let books = fit_kmeans_pq(&rows, model.m, model.l, cfg.kmeans_iters, cfg.seed)?.books;
    model.install_codebooks(params, &books)?;
    Ok(())
}

/// One DQN-style step: matching loss on non-quantized embeddings plus
/// λ times the mean squared distortion of hard-assigned keys. Codes are
/// recomputed from current values and enter as constants.
fn dqn_step(model: &ModelConfig, params: &ParameterSet, batch: &PairBatch, lambda: f64) -> Result<(f64, ParameterSet), Error> {
    let n = batch.queries.rows();
    let mut g = Graph::new();
    let xq = g.constant(batch.queries.clone());
    let xk = g.constant(batch.keys.clone());
    let q = model.encoder.encode(&mut g, xq, params)?;
    let zk = model.encoder.encode(&mut g, xk, params)?;
    let targets: Vec<usize> = (0..n).collect();
    let matching = matching_losses(&mut g, q, zk, &targets)?;
    let matching = g.sum(matching)?;
    let mut total = g.scale(matching, 1.0 / n as f64)?;
    if lambda > 0.0 {
        let books = model.codebooks(params)?;
        let variant = model.variant(params)?;
        let z_values = g.value(zk).clone();
        let mut parts = Vec::with_capacity(model.m);
        let mut one_hots = vec![vec![0.0; n * model.l]; model.m];
        for r in 0..n {
            let codes = books.assign(z_values.row_slice(r), &variant)?;
            for (i, &c) in codes.codes().iter().enumerate() {
                one_hots[i][r * model.l + c as usize] = 1.0;
            }
        }
        for (i, hot) in one_hots.into_iter().enumerate() {
            let h = g.constant(Tensor::new(n, model.l, hot)?);
            let c = g.parameter(codebook_param(i), params.require(&codebook_param(i))?)?;
            parts.push(g.matmul(h, c)?);
        }
        let recon = if parts.len() == 1 { parts[0] } else { g.concat_cols(&parts)? };
        let residual = g.sub(zk, recon)?;
        let sq = g.row_dot(residual, residual)?;
        let sq = g.sum(sq)?;
        let penalty = g.scale(sq, lambda / n as f64)?;
        total = g.add(total, penalty)?;
    }
    let grads = g.backward(total)?.parameters(&g);
    Ok((g.value(total).data()[0], grads))
}

/// Trains `model` on the training split with `cfg`, evaluating validation
/// Recall@{1,10} after every epoch and keeping the best-Recall@10
/// parameters (earliest on ties).
pub fn train(data: &PairedDataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Trained, Error> {
    model.validate()?;
    cfg.validate()?;
    data.validate().map_err(Error::Config)?;
    if data.input_dim() != model.encoder.input_dim {
        return Err(Error::Config(format!(
            "dataset input_dim {} differs from encoder input_dim {}",
            data.input_dim(),
            model.encoder.input_dim
        )));
    }
    let train_pairs = data.split(Split::Train);
    let global = cfg.global_batch();
    let steps = train_pairs.len() / global;
    if steps == 0 {
        return Err(Error::Config(format!(
            "training split has {} pairs, fewer than one global batch of {global}",
            train_pairs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = model.encoder.init(&mut rng);
    let mut order: Vec<usize> = (0..train_pairs.len()).collect();
    order.shuffle(&mut rng);
    {
        let x = gather(&data.keys, order[..global].iter().map(|&i| train_pairs[i].key))?;
        let z = model.encoder.encode_rows(&x, &params)?;
        let books = init_codebooks(model, &z, cfg.kmeans_iters, cfg.seed)?;
        model.install_codebooks(&mut params, &books)?;
    }
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok(Trained { params, history });
    }
    let mut opt = Adam::new(cfg.learning_rate, cfg.adam_betas);
    let mut best: Option<(f64, ParameterSet)> = None;
    let lambda = if cfg.objective == Objective::Dqn { cfg.recon_weight } else { 0.0 };
    for epoch in 1..=cfg.epochs {
        if epoch > 1 {
            order.shuffle(&mut rng);
        }
        let mut loss_sum = 0.0;
        for step in 0..steps {
            let chunk = &order[step * global..(step + 1) * global];
            let batches = chunk
                .chunks(cfg.batch_size)
                .map(|dev| {
                    Ok(PairBatch {
                        queries: gather(&data.queries, dev.iter().map(|&i| train_pairs[i].query))?,
                        keys: gather(&data.keys, dev.iter().map(|&i| train_pairs[i].key))?,
                    })
                })
                .collect::<Result<Vec<_>, GradError>>()?;
            let (loss, grads) = match cfg.objective.sampling() {
                Some(sampling) => {
                    let out = simulate_step(model, &params, &batches, sampling)?;
                    (out.loss, out.grads)
                }
                None => dqn_step(model, &params, &batches[0], lambda)?,
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step, loss });
            }
            loss_sum += loss;
            opt.step(&mut params, &grads)?;
        }
        if cfg.objective == Objective::KMeansPq {
            refit_kmeans(model, &mut params, data, &train_pairs, cfg)?;
        }
        let (valid, distortion) = evaluate_split(model, &params, data, Split::Valid, &[1, 10])?;
        let record = EpochRecord {
            epoch,
            loss: loss_sum / steps as f64,
            reconstruction_loss: distortion,
            recall_at_1: valid.recall(1).unwrap_or(0.0),
            recall_at_10: valid.recall(10).unwrap_or(0.0),
        };
        debug!("{} epoch {epoch}: {record:?}", cfg.objective);
        if best.as_ref().is_none_or(|(r, _)| record.recall_at_10 > *r) {
            best = Some((record.recall_at_10, params.clone()));
            history.best_epoch = Some(epoch);
        }
        history.epochs.push(record);
    }
    let (recall, params) = best.expect("at least one epoch ran");
    info!(
        "{}: best validation Recall@10 {recall:.4} at epoch {}",
        cfg.objective,
        history.best_epoch.unwrap_or(0)
    );
    Ok(Trained { params, history })
}

/// [`train`] restricted to the MoPQ objectives.
pub fn train_mopq(data: &PairedDataset, model: &ModelConfig, cfg: &TrainConfig) -> Result<Trained, Error> {
    if cfg.objective.sampling().is_none() {
        return Err(Error::Config(format!("{} is not a MoPQ objective", cfg.objective)));
    }
    train(data, model, cfg)
}

/// [`train`] with the DQN-style objective and reconstruction weight `lambda`.
pub fn train_dqn_style(data: &PairedDataset, model: &ModelConfig, cfg: &TrainConfig, lambda: f64) -> Result<Trained, Error> {
    let cfg = TrainConfig {
        objective: Objective::Dqn,
        recon_weight: lambda,
        ..cfg.clone()
    };
    train(data, model, &cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::{gen_synthetic, SyntheticSpec};
    use crate::model::EncoderConfig;
    use crate::objectives::CommitmentForm;
    use crate::quantizer::SelectionKind;

    fn small() -> (PairedDataset, ModelConfig, TrainConfig) {
        let data = gen_synthetic(&SyntheticSpec {
            n_pairs: 200,
            input_dim: 8,
            cluster_count: 20,
            noise_sigma: 0.1,
            seed: 2,
        })
        .unwrap();
        let model = ModelConfig {
            encoder: EncoderConfig {
                input_dim: 8,
                hidden_dim: 8,
                output_dim: 8,
                depth: 2,
            },
            m: 2,
            l: 4,
            selection: SelectionKind::L2,
            commitment: CommitmentForm::Straight,
        };
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 16,
            ..TrainConfig::default()
        };
        (data, model, cfg)
    }

    #[test]
    fn zero_epochs_returns_initial_parameters() {
        let (data, model, cfg) = small();
        let out = train(&data, &model, &TrainConfig { epochs: 0, ..cfg }).unwrap();
        assert!(out.history.is_empty());
        assert!(out.params.contains("codebook.1") && out.params.contains("encoder.w2"));
    }

    #[test]
    fn training_is_deterministic() {
        let (data, model, cfg) = small();
        let a = train(&data, &model, &cfg).unwrap();
        let b = train(&data, &model, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(a.history.len(), 2);
    }

    #[test]
    fn dcs_on_one_device_equals_in_batch() {
        let (data, model, cfg) = small();
        let a = train(&data, &model, &cfg).unwrap();
        let b = train(&data, &model, &TrainConfig { objective: Objective::MopqDcs, ..cfg }).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn dqn_zero_weight_keeps_codebooks() {
        let (data, model, cfg) = small();
        let init = train(&data, &model, &TrainConfig { epochs: 0, ..cfg.clone() }).unwrap();
        let out = train_dqn_style(&data, &model, &cfg, 0.0).unwrap();
        for i in 0..model.m {
            assert_eq!(out.params.get(&codebook_param(i)), init.params.get(&codebook_param(i)));
        }
        let moved = train_dqn_style(&data, &model, &cfg, 1.0).unwrap();
        assert_ne!(moved.params.get("codebook.0"), init.params.get("codebook.0"));
    }

    #[test]
    fn config_validation() {
        let (data, model, cfg) = small();
        let bad = TrainConfig { recon_weight: 0.5, ..cfg.clone() };
        assert!(matches!(train(&data, &model, &bad), Err(Error::Config(_))));
        let bad = TrainConfig {
            objective: Objective::Dqn,
            devices: 2,
            ..cfg.clone()
        };
        assert!(bad.validate().is_err());
        let huge = TrainConfig { batch_size: 1000, ..cfg };
        assert!(train(&data, &model, &huge).is_err());
        assert!(train_mopq(&data, &model, &TrainConfig { objective: Objective::Dqn, ..TrainConfig::default() }).is_err());
    }

    #[test]
    fn kmeans_regime_trains() {
        let (data, model, cfg) = small();
        let out = train(&data, &model, &TrainConfig { objective: Objective::KMeansPq, ..cfg }).unwrap();
        assert!(out.history.last().unwrap().recall_at_10 > 0.0);
    }

    #[test]
    fn gaussian_fallback_for_tiny_batches() {
        let (_, model, _) = small();
        let keys = Tensor::new(2, 8, (0..16).map(|i| i as f64 * 0.1).collect()).unwrap();
        let books = init_codebooks(&model, &keys, 5, 1).unwrap();
        assert_eq!((books.m(), books.l()), (2, 4));
        assert!(books.codewords().iter().any(|&v| v != 0.0));
    }
}
