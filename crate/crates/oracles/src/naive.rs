//! A naive single-process re-implementation of the cache-driven training
//! round for tiny scenarios: exact nearest-neighbor relations, explicit
//! maps instead of the knowledge cache, and its own forward/backprop written
//! directly from the objective. Used to check protocol equivalence against
//! the production federation, sharing only domain types and the exact-scan
//! retrieval oracle.

use std::collections::{BTreeMap, BTreeSet};

use fedcache_core::ann::query_exact;
use fedcache_core::cache::SampleIndex;
use fedcache_core::data::ClientShard;
use fedcache_core::encoder::HashVector;
use fedcache_core::models::{ClientModel, ModelSpec};

pub struct TinyScenario {
    pub shards: Vec<ClientShard>,
    /// Models exactly as they stand before the first round.
    pub initial_models: Vec<ClientModel>,
    /// Hash per training sample, matching what the production run uploads.
    pub hashes: BTreeMap<SampleIndex, HashVector>,
    pub r: usize,
    pub beta: f64,
    pub temperature: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub exclude_same_client: bool,
    pub skip_cold_teachers: bool,
}

pub struct NaiveOutcome {
    /// Flat parameter vector per client after every round.
    pub final_params: Vec<Vec<f64>>,
    /// Per round, per server-handled sample in handling order: the teacher
    /// distribution sent down (when any).
    pub teachers: Vec<Vec<(SampleIndex, Option<Vec<f64>>)>>,
}

/// Layer widths `[input, hidden..., classes]` with flat-parameter offsets
/// re-derived from the documented layout (row-major weights, then biases,
/// layer by layer).
struct NetShape {
    widths: Vec<usize>,
}

impl NetShape {
    fn from_spec(spec: &ModelSpec) -> NetShape {
        let mut widths = vec![spec.input_dim];
        widths.extend_from_slice(&spec.hidden_widths);
        widths.push(spec.num_classes);
        NetShape { widths }
    }

    fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layer_offset(&self, layer: usize) -> usize {
        (0..layer)
            .map(|l| self.widths[l] * self.widths[l + 1] + self.widths[l + 1])
            .sum()
    }
}

fn own_softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let exps: Vec<f64> = logits.iter().map(|&z| ((z - max) / temperature).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Forward keeping every pre-activation and activation.
fn own_forward(shape: &NetShape, params: &[f64], x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut pre = Vec::with_capacity(shape.layers());
    let mut post = Vec::with_capacity(shape.layers());
    let mut input = x.to_vec();
    for layer in 0..shape.layers() {
        let (n_in, n_out) = (shape.widths[layer], shape.widths[layer + 1]);
        let base = shape.layer_offset(layer);
        let bias_base = base + n_in * n_out;
        let mut z = vec![0.0; n_out];
        for (o, z_o) in z.iter_mut().enumerate() {
            let mut acc = params[bias_base + o];
            for (i, &inp) in input.iter().enumerate() {
                acc += params[base + o * n_in + i] * inp;
            }
            *z_o = acc;
        }
        let act: Vec<f64> = if layer + 1 < shape.layers() {
            z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
        } else {
            z.clone()
        };
        pre.push(z);
        post.push(act.clone());
        input = act;
    }
    (pre, post)
}

/// Accumulate the gradient of
/// `CE(softmax_T(f(x)), y) + beta·KL(softmax_T(f(x)) || teacher)` for one
/// sample into `grad`.
#[allow(clippy::too_many_arguments)]
fn own_grad_sample(
    shape: &NetShape,
    params: &[f64],
    x: &[f64],
    label: usize,
    teacher: Option<&[f64]>,
    beta: f64,
    temperature: f64,
    grad: &mut [f64],
) {
    let (pre, post) = own_forward(shape, params, x);
    let logits = &pre[shape.layers() - 1];
    let probs = own_softmax(logits, temperature);

    let classes = probs.len();
    let mut delta: Vec<f64> = (0..classes)
        .map(|j| (probs[j] - if j == label { 1.0 } else { 0.0 }) / temperature)
        .collect();
    if beta > 0.0 {
        if let Some(q) = teacher {
            let kl: f64 = probs
                .iter()
                .zip(q)
                .map(|(&p, &qi)| p * (p / qi.max(1e-12)).ln())
                .sum::<f64>()
                .max(0.0);
            for j in 0..classes {
                delta[j] += beta * probs[j] * ((probs[j] / q[j].max(1e-12)).ln() - kl) / temperature;
            }
        }
    }

    for layer in (0..shape.layers()).rev() {
        let (n_in, n_out) = (shape.widths[layer], shape.widths[layer + 1]);
        let base = shape.layer_offset(layer);
        let bias_base = base + n_in * n_out;
        let input: &[f64] = if layer == 0 { x } else { &post[layer - 1] };
        for o in 0..n_out {
            for i in 0..n_in {
                grad[base + o * n_in + i] += delta[o] * input[i];
            }
            grad[bias_base + o] += delta[o];
        }
        if layer > 0 {
            let mut upstream = vec![0.0; n_in];
            for (i, up) in upstream.iter_mut().enumerate() {
                for (o, &d) in delta.iter().enumerate() {
                    *up += params[base + o * n_in + i] * d;
                }
                if pre[layer - 1][i] <= 0.0 {
                    *up = 0.0;
                }
            }
            delta = upstream;
        }
    }
}

/// Execute the full cache-driven protocol for a tiny scenario with explicit
/// maps and exact retrieval: same per-sample fetch-then-update ordering,
/// same round-robin interleaving, one SGD step per batch.
pub fn naive_round_oracle(scenario: &TinyScenario) -> NaiveOutcome {
    let classes = scenario.shards[0].train.num_classes();

    // Labels per sample index, straight from the shards.
    let mut labels: BTreeMap<SampleIndex, u32> = BTreeMap::new();
    for shard in &scenario.shards {
        for (i, sample) in shard.train.samples().iter().enumerate() {
            labels.insert(
                SampleIndex {
                    client: shard.client_id,
                    sample: i as u32,
                },
                sample.label as u32,
            );
        }
    }

    // Exact same-label relations via the full-scan oracle.
    let mut relations: BTreeMap<SampleIndex, Vec<SampleIndex>> = BTreeMap::new();
    for (&id, hash) in &scenario.hashes {
        let own_label = labels[&id];
        let candidates = scenario
            .hashes
            .iter()
            .filter(|(other, _)| labels[*other] == own_label)
            .map(|(other, h)| (*other, h));
        let exclude = scenario.exclude_same_client.then_some(id.client);
        let list = query_exact(candidates, id, hash, scenario.r, exclude, None);
        relations.insert(id, list.ids().collect());
    }

    // Plain map state: logits per index, plus who has ever been updated.
    let mut stored: BTreeMap<SampleIndex, Vec<f64>> = scenario
        .hashes
        .keys()
        .map(|&id| (id, vec![0.0; classes]))
        .collect();
    let mut updated: BTreeSet<SampleIndex> = BTreeSet::new();

    let shapes: Vec<NetShape> = scenario
        .initial_models
        .iter()
        .map(|m| NetShape::from_spec(&m.spec))
        .collect();
    let mut params: Vec<Vec<f64>> = scenario
        .initial_models
        .iter()
        .map(|m| m.params.clone())
        .collect();

    // Round-robin schedule by batch slot, re-derived.
    let batch_counts: Vec<usize> = scenario
        .shards
        .iter()
        .map(|s| s.train.len().div_ceil(scenario.batch_size))
        .collect();
    let max_slots = batch_counts.iter().copied().max().unwrap_or(0);

    let mut teacher_log = Vec::with_capacity(scenario.rounds);
    for _round in 0..scenario.rounds {
        let mut round_teachers = Vec::new();
        for slot in 0..max_slots {
            for (k, shard) in scenario.shards.iter().enumerate() {
                if slot >= batch_counts[k] {
                    continue;
                }
                let start = slot * scenario.batch_size;
                let end = (start + scenario.batch_size).min(shard.train.len());

                // Server pass: per sample, fetch (pre-update state), then
                // store the fresh logits.
                let mut teachers: Vec<Option<Vec<f64>>> = Vec::with_capacity(end - start);
                for idx in start..end {
                    let id = SampleIndex {
                        client: shard.client_id,
                        sample: idx as u32,
                    };
                    let sample = shard.train.sample(idx);
                    let (pre, _) = own_forward(&shapes[k], &params[k], &sample.features);
                    let logits = pre.last().unwrap().clone();

                    let mut fetched: Vec<&Vec<f64>> = Vec::new();
                    for neighbor in &relations[&id] {
                        if scenario.skip_cold_teachers && !updated.contains(neighbor) {
                            continue;
                        }
                        fetched.push(&stored[neighbor]);
                    }
                    let teacher = if fetched.is_empty() {
                        None
                    } else {
                        let mut mean = vec![0.0; classes];
                        for t in &fetched {
                            for (m, z) in mean.iter_mut().zip(t.iter()) {
                                *m += z;
                            }
                        }
                        let scale = 1.0 / fetched.len() as f64;
                        mean.iter_mut().for_each(|m| *m *= scale);
                        Some(own_softmax(&mean, scenario.temperature))
                    };
                    round_teachers.push((id, teacher.clone()));
                    teachers.push(teacher);

                    stored.insert(id, logits);
                    updated.insert(id);
                }

                // Client pass: one SGD step on the batch mean gradient.
                let mut grad = vec![0.0; params[k].len()];
                for (idx, teacher) in (start..end).zip(&teachers) {
                    let sample = shard.train.sample(idx);
                    own_grad_sample(
                        &shapes[k],
                        &params[k],
                        &sample.features,
                        sample.label,
                        teacher.as_deref(),
                        scenario.beta,
                        scenario.temperature,
                        &mut grad,
                    );
                }
                let scale = 1.0 / (end - start) as f64;
                for (p, g) in params[k].iter_mut().zip(&grad) {
                    *p -= scenario.lr * g * scale;
                }
            }
        }
        teacher_log.push(round_teachers);
    }

    NaiveOutcome {
        final_params: params,
        teachers: teacher_log,
    }
}
