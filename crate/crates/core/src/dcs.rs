//! Deterministic simulation of data-parallel devices sharing contrastive
//! keys.
//!
//! Every device encodes its own `N` query/key pairs in its own graph. After
//! a broadcast, each device holds detached copies of all other devices'
//! query and key embeddings. Three gradient schemes are available:
//!
//! * local: each device's softmax covers only its own keys;
//! * [`ncs_gradients`]: the softmax covers all `D·N` keys, but gradients
//!   stop at every shared copy;
//! * [`dcs_gradients`]: as NCS, plus an image loss on every host for every
//!   other origin device, which restores the gradient with respect to the
//!   host's keys. The summed gradient equals that of [`full_loss_oracle`].

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::grad::{finite_differences, GradError, Graph, NodeId, ParameterSet, Tensor};
use crate::model::ModelConfig;
use crate::objectives::{commitment_terms, matching_losses, mcl, mcl_linearized};
use crate::quantizer::{quantize_linearized, CodebookNodes, SteOutput};

/// How negatives from other devices take part in a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Sampling {
    /// Each device uses only its own keys.
    Local,
    /// Shared keys in the softmax, no image losses.
    NonDifferentiable,
    /// Shared keys in the softmax plus image losses.
    Differentiable,
}

impl fmt::Display for Sampling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Local => "local",
            Self::NonDifferentiable => "ncs",
            Self::Differentiable => "dcs",
        })
    }
}

impl FromStr for Sampling {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "local" => Ok(Self::Local),
            "ncs" => Ok(Self::NonDifferentiable),
            "dcs" => Ok(Self::Differentiable),
            _ => Err(format!("unknown sampling '{s}'")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClusterConfig {
    /// Device count `D`.
    pub devices: usize,
    /// Per-device batch size `N`.
    pub per_device: usize,
    pub seed: u64,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<(), GradError> {
        if self.devices == 0 || self.per_device == 0 {
            return Err(GradError::Usage(format!(
                "devices ({}) and per-device batch ({}) must be positive",
                self.devices, self.per_device
            )));
        }
        Ok(())
    }

    /// Contrastive keys per query once shared.
    pub fn pool_size(&self) -> usize {
        self.devices * self.per_device
    }
}

/// Raw inputs of one device: `N` query rows and their `N` paired key rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PairBatch {
    pub queries: Tensor,
    pub keys: Tensor,
}

/// One simulated device after local encoding.
#[derive(Debug)]
pub struct DeviceBatch {
    pub device_id: usize,
    graph: Graph,
    /// `N×d` local query embeddings.
    pub local_queries: NodeId,
    /// Straight-through quantization of the local keys.
    pub local_keys: SteOutput,
    /// `N×1` commitment terms of the local keys.
    commitment: NodeId,
    /// Per origin device: detached `(queries, keys)` views; `None` for self.
    shared: Vec<Option<(NodeId, NodeId)>>,
}

impl DeviceBatch {
    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn per_device(&self) -> usize {
        self.graph.value(self.local_queries).rows()
    }

    /// Detached query view of `origin`, if broadcast.
    pub fn shared_queries(&self, origin: usize) -> Option<NodeId> {
        self.shared.get(origin).copied().flatten().map(|(q, _)| q)
    }

    /// Detached key view of `origin`, if broadcast.
    pub fn shared_keys(&self, origin: usize) -> Option<NodeId> {
        self.shared.get(origin).copied().flatten().map(|(_, k)| k)
    }

    fn device_count(&self) -> usize {
        self.shared.len().max(1)
    }

    /// All `D·N` keys in device order, the local block differentiable.
    fn key_pool(&mut self) -> Result<NodeId, GradError> {
        if self.shared.len() <= 1 {
            return Ok(self.local_keys.quantized);
        }
        let parts: Vec<NodeId> = (0..self.shared.len())
            .map(|o| match self.shared[o] {
                Some((_, k)) => k,
                None => self.local_keys.quantized,
            })
            .collect();
        self.graph.concat_rows(&parts)
    }

    fn targets_for(&self, origin: usize) -> Vec<usize> {
        let n = self.per_device();
        let offset = if self.shared.len() <= 1 { 0 } else { origin * n };
        (offset..offset + n).collect()
    }

    /// Local queries against local keys only, plus commitment; summed.
    fn local_loss(&mut self) -> Result<NodeId, GradError> {
        let n = self.per_device();
        let g = &mut self.graph;
        let matching = matching_losses(g, self.local_queries, self.local_keys.quantized, &(0..n).collect::<Vec<_>>())?;
        let per = g.add(matching, self.commitment)?;
        g.sum(per)
    }
}

/// Encodes every device's batch in its own graph.
pub fn encode_devices(
    model: &ModelConfig,
    params: &ParameterSet,
    batches: &[PairBatch],
) -> Result<Vec<DeviceBatch>, GradError> {
    if batches.is_empty() {
        return Err(GradError::Usage("no devices".into()));
    }
    let n = batches[0].queries.rows();
    if batches.iter().any(|b| b.queries.rows() != n || b.keys.rows() != n) {
        return Err(GradError::Usage("every device needs the same number of pairs".into()));
    }
    batches
        .par_iter()
        .enumerate()
        .map(|(device_id, batch)| {
            let mut g = Graph::new();
            let xq = g.constant(batch.queries.clone());
            let xk = g.constant(batch.keys.clone());
            let local_queries = model.encoder.encode(&mut g, xq, params)?;
            let zk = model.encoder.encode(&mut g, xk, params)?;
            let local_keys = model.quantize(&mut g, zk, params)?;
            let commitment = commitment_terms(&mut g, &local_keys, model.commitment)?;
            Ok(DeviceBatch {
                device_id,
                graph: g,
                local_queries,
                local_keys,
                commitment,
                shared: Vec::new(),
            })
        })
        .collect()
}

/// Gives every device detached copies of every other device's local query
/// and quantized key values.
pub fn broadcast(devices: &mut [DeviceBatch]) -> Result<(), GradError> {
    let snapshots: Vec<(Tensor, Tensor)> = devices
        .iter()
        .map(|d| {
            (
                d.graph.value(d.local_queries).clone(),
                d.graph.value(d.local_keys.quantized).clone(),
            )
        })
        .collect();
    let count = devices.len();
    for dev in devices.iter_mut() {
        dev.shared = vec![None; count];
        if count == 1 {
            continue;
        }
        for (origin, (q, k)) in snapshots.iter().enumerate() {
            if origin == dev.device_id {
                continue;
            }
            let qc = dev.graph.constant(q.clone());
            let kc = dev.graph.constant(k.clone());
            let qv = dev.graph.stop_gradient(qc)?;
            let kv = dev.graph.stop_gradient(kc)?;
            dev.shared[origin] = Some((qv, kv));
        }
    }
    Ok(())
}

fn require_broadcast(device: &DeviceBatch) -> Result<(), GradError> {
    if device.shared.is_empty() {
        return Err(GradError::Usage(format!("device {} has not been broadcast to", device.device_id)));
    }
    Ok(())
}

/// Sum over local instances of the matching loss against all `D·N` keys,
/// plus the local keys' commitment terms.
pub fn primary_loss(device: &mut DeviceBatch) -> Result<NodeId, GradError> {
    require_broadcast(device)?;
    let keys = device.key_pool()?;
    let targets = device.targets_for(device.device_id);
    let g = &mut device.graph;
    let matching = matching_losses(g, device.local_queries, keys, &targets)?;
    let per = g.add(matching, device.commitment)?;
    g.sum(per)
}

/// Loss of `origin`'s queries recomputed on `host`: same value as the
/// origin's primary matching term, but only the host's local keys are
/// differentiable. No commitment terms.
pub fn image_loss(host: &mut DeviceBatch, origin: usize) -> Result<NodeId, GradError> {
    require_broadcast(host)?;
    if origin == host.device_id {
        return Err(GradError::Usage("image loss needs a different origin device".into()));
    }
    let queries = host
        .shared_queries(origin)
        .ok_or_else(|| GradError::Usage(format!("no device {origin}")))?;
    let keys = host.key_pool()?;
    let targets = host.targets_for(origin);
    let matching = matching_losses(&mut host.graph, queries, keys, &targets)?;
    host.graph.sum(matching)
}

/// Gradients and displayed loss of one simulated step.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviceStep {
    /// Mean per-instance loss over the `D·N` queries.
    pub loss: f64,
    /// Gradients normalized by `D·N`.
    pub grads: ParameterSet,
}

pub(crate) fn accumulate(into: &mut ParameterSet, other: &ParameterSet) -> Result<(), GradError> {
    for (name, t) in other {
        match into.get_mut(name) {
            Some(acc) => acc.add_assign(t),
            None => into.insert(name.clone(), t.clone())?,
        }
    }
    Ok(())
}

pub(crate) fn scale_all(set: &mut ParameterSet, factor: f64) {
    let names: Vec<String> = set.names().map(str::to_owned).collect();
    for name in names {
        for v in set.get_mut(&name).expect("listed").data_mut() {
            *v *= factor;
        }
    }
}

/// Runs the per-device objectives for `sampling`, backpropagates each
/// device, and reduces gradients in device order.
pub fn device_gradients(devices: &mut [DeviceBatch], sampling: Sampling) -> Result<DeviceStep, GradError> {
    let d = devices.len();
    let per_device: Vec<(f64, ParameterSet)> = devices
        .par_iter_mut()
        .map(|dev| {
            let loss = match sampling {
                Sampling::Local => dev.local_loss()?,
                Sampling::NonDifferentiable => primary_loss(dev)?,
                Sampling::Differentiable => {
                    let mut total = primary_loss(dev)?;
                    let (own, count) = (dev.device_id, dev.device_count());
                    for origin in (0..count).filter(|&o| o != own) {
                        let image = image_loss(dev, origin)?;
                        total = dev.graph.add(total, image)?;
                    }
                    total
                }
            };
            let grads = dev.graph.backward(loss)?.parameters(&dev.graph);
            Ok((dev.graph.value(loss).data()[0], grads))
        })
        .collect::<Result<_, GradError>>()?;
    let instances = (d * devices[0].per_device()) as f64;
    let mut grads = ParameterSet::new();
    let mut total = 0.0;
    for (loss, g) in &per_device {
        total += loss;
        accumulate(&mut grads, g)?;
    }
    scale_all(&mut grads, 1.0 / instances);
    // Image losses repeat every primary matching value on D−1 hosts.
    let duplicates = if sampling == Sampling::Differentiable { d as f64 } else { 1.0 };
    Ok(DeviceStep {
        loss: total / duplicates / instances,
        grads,
    })
}

/// Gradient of all primary plus image losses, normalized by `D·N`.
pub fn dcs_gradients(devices: &mut [DeviceBatch]) -> Result<DeviceStep, GradError> {
    device_gradients(devices, Sampling::Differentiable)
}

/// Gradient of the primary losses only, normalized by `D·N`.
pub fn ncs_gradients(devices: &mut [DeviceBatch]) -> Result<DeviceStep, GradError> {
    device_gradients(devices, Sampling::NonDifferentiable)
}

/// Encodes, broadcasts and differentiates one step in a single call.
pub fn simulate_step(
    model: &ModelConfig,
    params: &ParameterSet,
    batches: &[PairBatch],
    sampling: Sampling,
) -> Result<DeviceStep, GradError> {
    let mut devices = encode_devices(model, params, batches)?;
    broadcast(&mut devices)?;
    device_gradients(&mut devices, sampling)
}

fn stack(batches: &[PairBatch]) -> Result<(Tensor, Tensor), GradError> {
    let rows = |f: fn(&PairBatch) -> &Tensor| -> Result<Tensor, GradError> {
        let cols = f(&batches[0]).cols();
        let data: Vec<f64> = batches.iter().flat_map(|b| f(b).data().iter().copied()).collect();
        Tensor::new(data.len() / cols, cols, data)
    };
    Ok((rows(|b| &b.queries)?, rows(|b| &b.keys)?))
}

/// Single-graph loss over all `D·N` pairs with nothing detached except the
/// straight-through selection: every query is normalized over all keys and
/// each key's commitment term appears once. Returns the mean loss and its
/// gradients.
pub fn full_loss_oracle(
    model: &ModelConfig,
    params: &ParameterSet,
    batches: &[PairBatch],
) -> Result<(f64, ParameterSet), GradError> {
    let (xq, xk) = stack(batches)?;
    let targets: Vec<usize> = (0..xq.rows()).collect();
    let mut g = Graph::new();
    let xq = g.constant(xq);
    let xk = g.constant(xk);
    let q = model.encoder.encode(&mut g, xq, params)?;
    let zk = model.encoder.encode(&mut g, xk, params)?;
    let keys = model.quantize(&mut g, zk, params)?;
    let loss = mcl(&mut g, q, &keys, &targets, model.commitment)?;
    let grads = g.backward(loss.total)?.parameters(&g);
    Ok((g.value(loss.total).data()[0], grads))
}

/// Central differences of the oracle's linearized surrogate at `params`:
/// selections frozen at their current values, so the result is the exact
/// reference for the straight-through gradient of [`full_loss_oracle`].
pub fn oracle_finite_differences(
    model: &ModelConfig,
    params: &ParameterSet,
    batches: &[PairBatch],
    eps: f64,
) -> Result<ParameterSet, GradError> {
    let (xq, xk) = stack(batches)?;
    let targets: Vec<usize> = (0..xq.rows()).collect();
    let anchor = {
        let mut g = Graph::new();
        let xk = g.constant(xk.clone());
        let zk = model.encoder.encode(&mut g, xk, params)?;
        model.quantize(&mut g, zk, params)?.anchor(&g)
    };
    finite_differences(
        |g, p| {
            let xq = g.constant(xq);
            let xk = g.constant(xk);
            let q = model.encoder.encode(g, xq, p)?;
            let zk = model.encoder.encode(g, xk, p)?;
            let books = CodebookNodes::register(g, p, model.m, model.selection)?;
            let lin = quantize_linearized(g, zk, &books, &anchor)?;
            Ok(mcl_linearized(g, q, &lin, &anchor, &targets, model.commitment)?.total)
        },
        params,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::max_relative_error;
    use crate::model::EncoderConfig;
    use crate::objectives::CommitmentForm;
    use crate::quantizer::{CodebookSet, SelectionKind};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny(seed: u64, devices: usize, n: usize) -> (ModelConfig, ParameterSet, Vec<PairBatch>) {
        let model = ModelConfig {
            encoder: EncoderConfig {
                input_dim: 3,
                hidden_dim: 3,
                output_dim: 4,
                depth: 2,
            },
            m: 2,
            l: 3,
            selection: SelectionKind::L2,
            commitment: CommitmentForm::Straight,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = model.encoder.init(&mut rng);
        let words = (0..model.l * model.d()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let books = CodebookSet::new(model.m, model.l, model.d(), words).unwrap();
        model.install_codebooks(&mut params, &books).unwrap();
        let mut rand_t = |r: usize, c: usize| {
            Tensor::new(r, c, (0..r * c).map(|_| rng.random_range(-1.5..1.5)).collect()).unwrap()
        };
        let batches = (0..devices)
            .map(|_| PairBatch {
                queries: rand_t(n, 3),
                keys: rand_t(n, 3),
            })
            .collect();
        (model, params, batches)
    }

    fn encoded(model: &ModelConfig, params: &ParameterSet, batches: &[PairBatch]) -> Vec<DeviceBatch> {
        let mut devs = encode_devices(model, params, batches).unwrap();
        broadcast(&mut devs).unwrap();
        devs
    }

    #[test]
    fn scalar_primary_loss_example() {
        // D=2, N=1, scalar embeddings: Q=(1), local K=(1), shared K̄=(0).
        let model = ModelConfig {
            encoder: EncoderConfig {
                input_dim: 1,
                hidden_dim: 1,
                output_dim: 1,
                depth: 1,
            },
            m: 1,
            l: 2,
            selection: SelectionKind::L2,
            commitment: CommitmentForm::Straight,
        };
        let mut params = ParameterSet::new();
        params.insert("encoder.w1", Tensor::scalar(1.0)).unwrap();
        params.insert("encoder.b1", Tensor::scalar(0.0)).unwrap();
        params.insert("codebook.0", Tensor::new(2, 1, vec![0.0, 1.0]).unwrap()).unwrap();
        let batches = vec![
            PairBatch {
                queries: Tensor::scalar(1.0),
                keys: Tensor::scalar(1.0),
            },
            PairBatch {
                queries: Tensor::scalar(0.0),
                keys: Tensor::scalar(0.0),
            },
        ];
        let mut devs = encoded(&model, &params, &batches);
        let p0 = primary_loss(&mut devs[0]).unwrap();
        let v0 = devs[0].graph().value(p0).data()[0];
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((v0 - expected).abs() < 1e-12);
        assert!((v0 - 0.31326).abs() < 1e-5);

        let p1 = primary_loss(&mut devs[1]).unwrap();
        let v1 = devs[1].graph().value(p1).data()[0];
        let (oracle, _) = full_loss_oracle(&model, &params, &batches).unwrap();
        assert!((oracle * 2.0 - (v0 + v1)).abs() < 1e-12);
    }

    #[test]
    fn broadcast_copies_are_bit_exact_and_detached() {
        let (model, params, batches) = tiny(1, 2, 3);
        let devs = encoded(&model, &params, &batches);
        let k1 = devs[1].graph().value(devs[1].local_keys.quantized);
        let view = devs[0].shared_keys(1).unwrap();
        assert_eq!(devs[0].graph().value(view), k1);
        assert!(devs[0].shared_keys(0).is_none());

        let (model, params, batches) = tiny(1, 1, 3);
        let devs = encoded(&model, &params, &batches);
        assert!(devs[0].shared_keys(0).is_none());
    }

    #[test]
    fn image_loss_matches_primary_value() {
        let (model, params, batches) = tiny(2, 3, 2);
        let mut devs = encoded(&model, &params, &batches);
        let p = primary_loss(&mut devs[0]).unwrap();
        let primary = devs[0].graph().value(p).data()[0];
        for host in 1..3 {
            let c = image_loss(&mut devs[host], 0).unwrap();
            let image = devs[host].graph().value(c).data()[0];
            assert!((primary - image).abs() < 1e-12, "{primary} vs {image}");
        }
        assert!(image_loss(&mut devs[0], 0).is_err());
    }

    #[test]
    fn image_loss_only_reaches_host_keys() {
        let (model, params, batches) = tiny(3, 2, 2);
        let mut devs = encoded(&model, &params, &batches);
        let c = image_loss(&mut devs[1], 0).unwrap();
        let grads = devs[1].graph().backward(c).unwrap();
        // The host's own queries take no part; only its key path contributes.
        let host_q = devs[1].local_queries;
        assert_eq!(grads.node(host_q).map(|t| t.max_abs()).unwrap_or(0.0), 0.0);
        let host_keys = devs[1].local_keys.quantized;
        assert!(grads.node(host_keys).unwrap().max_abs() > 0.0);
    }

    #[test]
    fn dcs_equals_oracle_for_small_clusters() {
        for d in 1..=3 {
            for n in 1..=3 {
                let (model, params, batches) = tiny(10 + (d * 4 + n) as u64, d, n);
                let mut devs = encoded(&model, &params, &batches);
                let step = dcs_gradients(&mut devs).unwrap();
                let (oracle_loss, oracle) = full_loss_oracle(&model, &params, &batches).unwrap();
                let (err, _) = max_relative_error(&step.grads, &oracle);
                assert!(err < 1e-9, "D={d} N={n}: {err}");
                assert!((step.loss - oracle_loss).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn oracle_matches_surrogate_finite_differences() {
        let (model, params, batches) = tiny(4, 2, 2);
        let (_, oracle) = full_loss_oracle(&model, &params, &batches).unwrap();
        let fd = oracle_finite_differences(&model, &params, &batches, 1e-5).unwrap();
        assert!(max_relative_error(&oracle, &fd).0 < 1e-4);
    }

    #[test]
    fn single_device_schemes_coincide() {
        let (model, params, batches) = tiny(5, 1, 4);
        let a = simulate_step(&model, &params, &batches, Sampling::Local).unwrap();
        let b = simulate_step(&model, &params, &batches, Sampling::NonDifferentiable).unwrap();
        let c = simulate_step(&model, &params, &batches, Sampling::Differentiable).unwrap();
        assert_eq!(a, b);
        assert_eq!(b, c);
    }

    #[test]
    fn ncs_loss_matches_dcs_but_gradients_differ() {
        let (model, params, batches) = tiny(6, 2, 2);
        let dcs = simulate_step(&model, &params, &batches, Sampling::Differentiable).unwrap();
        let ncs = simulate_step(&model, &params, &batches, Sampling::NonDifferentiable).unwrap();
        assert!((dcs.loss - ncs.loss).abs() < 1e-12);
        assert!(max_relative_error(&ncs.grads, &dcs.grads).0 > 1e-3);
    }

    #[test]
    fn permuting_devices_keeps_oracle_loss() {
        let (model, params, mut batches) = tiny(7, 3, 2);
        let (a, _) = full_loss_oracle(&model, &params, &batches).unwrap();
        batches.reverse();
        let (b, _) = full_loss_oracle(&model, &params, &batches).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn repeated_steps_are_bit_identical() {
        let (model, params, batches) = tiny(8, 3, 3);
        let a = simulate_step(&model, &params, &batches, Sampling::Differentiable).unwrap();
        let b = simulate_step(&model, &params, &batches, Sampling::Differentiable).unwrap();
        assert_eq!(a, b);
    }
}
