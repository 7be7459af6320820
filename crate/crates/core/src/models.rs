//! Per-client heterogeneous MLP predictors: seeded construction, forward
//! pass, analytic backprop for the distillation objective, one-step batch
//! training, and accuracy evaluation.
//!
//! Clients own their models exclusively; parameters never travel through
//! protocol messages.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::numeric::{self, ProbDist};
use crate::{Error, Result};

/// The three desk-scale architectures. Federation assigns them to clients by
/// index modulo 3, giving a heterogeneous population with no two size
/// classes sharing a parameter layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchitectureId {
    MlpSmall,
    MlpMedium,
    MlpLarge,
}

impl ArchitectureId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchitectureId::MlpSmall => "mlp_small",
            ArchitectureId::MlpMedium => "mlp_medium",
            ArchitectureId::MlpLarge => "mlp_large",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mlp_small" => Ok(ArchitectureId::MlpSmall),
            "mlp_medium" => Ok(ArchitectureId::MlpMedium),
            "mlp_large" => Ok(ArchitectureId::MlpLarge),
            other => Err(Error::InvalidArgument(format!(
                "unknown architecture id: {other}"
            ))),
        }
    }

    fn hidden_widths(&self) -> Vec<usize> {
        match self {
            ArchitectureId::MlpSmall => vec![32],
            ArchitectureId::MlpMedium => vec![64],
            ArchitectureId::MlpLarge => vec![128, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub arch: ArchitectureId,
    pub input_dim: usize,
    pub hidden_widths: Vec<usize>,
    pub num_classes: usize,
}

impl ModelSpec {
    pub fn for_arch(arch: ArchitectureId, input_dim: usize, num_classes: usize) -> Self {
        ModelSpec {
            arch,
            input_dim,
            hidden_widths: arch.hidden_widths(),
            num_classes,
        }
    }

    /// Architecture by client index modulo 3: 0 small, 1 medium, 2 large.
    pub fn by_client_index(index: usize, input_dim: usize, num_classes: usize) -> Self {
        let arch = match index % 3 {
            0 => ArchitectureId::MlpSmall,
            1 => ArchitectureId::MlpMedium,
            _ => ArchitectureId::MlpLarge,
        };
        Self::for_arch(arch, input_dim, num_classes)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.num_classes == 0 {
            return Err(Error::invalid_argument(
                "input_dim and num_classes must be positive",
            ));
        }
        if self.hidden_widths.is_empty() || self.hidden_widths.contains(&0) {
            return Err(Error::invalid_argument(
                "hidden_widths must be non-empty and positive",
            ));
        }
        Ok(())
    }

    /// Layer widths including input and output: `[in, h1, ..., C]`.
    fn widths(&self) -> Vec<usize> {
        let mut w = Vec::with_capacity(self.hidden_widths.len() + 2);
        w.push(self.input_dim);
        w.extend_from_slice(&self.hidden_widths);
        w.push(self.num_classes);
        w
    }

    fn layer_shapes(&self) -> Vec<LayerShape> {
        let widths = self.widths();
        let mut shapes = Vec::with_capacity(widths.len() - 1);
        let mut offset = 0;
        for pair in widths.windows(2) {
            let (inputs, outputs) = (pair[0], pair[1]);
            shapes.push(LayerShape {
                inputs,
                outputs,
                weight_offset: offset,
                bias_offset: offset + inputs * outputs,
            });
            offset += inputs * outputs + outputs;
        }
        shapes
    }

    pub fn param_count(&self) -> usize {
        self.widths()
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerShape {
    inputs: usize,
    outputs: usize,
    weight_offset: usize,
    bias_offset: usize,
}

impl LayerShape {
    /// Weight for (output row `o`, input column `i`).
    fn w(&self, o: usize, i: usize) -> usize {
        self.weight_offset + o * self.inputs + i
    }
}

/// How the distillation term of the training objective is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillObjective {
    /// `KL(softmax_T(logits) || teacher)` — cache-driven ensemble distillation.
    KlDivergence,
    /// `CE(softmax_T(logits), teacher)` — soft-target cross-entropy, used by
    /// the class-grained logit baseline.
    SoftCrossEntropy,
}

/// Weighted distillation settings for [`ClientModel::train_batch`].
#[derive(Debug, Clone, Copy)]
pub struct DistillConfig {
    /// Weight on the distillation term; 0 disables it.
    pub weight: f64,
    /// Softmax temperature applied to student logits (and loss scaling).
    pub temperature: f64,
    pub objective: DistillObjective,
}

impl DistillConfig {
    pub fn disabled() -> Self {
        DistillConfig {
            weight: 0.0,
            temperature: 1.0,
            objective: DistillObjective::KlDivergence,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.temperature <= 0.0 || !self.temperature.is_finite() {
            return Err(Error::invalid_argument("temperature must be positive"));
        }
        if self.weight < 0.0 || !self.weight.is_finite() {
            return Err(Error::invalid_argument(
                "distillation weight must be non-negative",
            ));
        }
        Ok(())
    }
}

/// One training example: features, hard label, and an optional constant
/// teacher distribution. No gradient flows into the teacher.
#[derive(Debug, Clone, Copy)]
pub struct TrainExample<'a> {
    pub features: &'a [f64],
    pub label: usize,
    pub teacher: Option<&'a ProbDist>,
}

/// A client's personalized predictor: spec plus a flat parameter vector.
/// Reconstructing with the same `(spec, seed)` yields bitwise-identical
/// parameters until training mutates them.
#[derive(Debug, Clone)]
pub struct ClientModel {
    pub spec: ModelSpec,
    pub params: Vec<f64>,
    pub seed: u64,
}

/// Seeded parameter initialization: each layer drawn from
/// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))` in a fixed order.
pub fn build_model(spec: ModelSpec, seed: u64) -> Result<ClientModel> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shapes = spec.layer_shapes();
    let mut params = vec![0.0; spec.param_count()];
    for shape in &shapes {
        let bound = 1.0 / (shape.inputs as f64).sqrt();
        for o in 0..shape.outputs {
            for i in 0..shape.inputs {
                params[shape.w(o, i)] = rng.gen_range(-bound..bound);
            }
        }
        for o in 0..shape.outputs {
            params[shape.bias_offset + o] = rng.gen_range(-bound..bound);
        }
    }
    Ok(ClientModel { spec, params, seed })
}

impl ClientModel {
    /// Raw logits of length `num_classes`; pure in `(params, x)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.spec.input_dim {
            return Err(Error::InvalidArgument(format!(
                "input length {} does not match input_dim {}",
                x.len(),
                self.spec.input_dim
            )));
        }
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut activation = x.to_vec();
        for (l, shape) in shapes.iter().enumerate() {
            let mut out = vec![0.0; shape.outputs];
            for (o, out_o) in out.iter_mut().enumerate() {
                let mut acc = self.params[shape.bias_offset + o];
                let row = &self.params[shape.w(o, 0)..shape.w(o, shape.inputs)];
                for (w, a) in row.iter().zip(&activation) {
                    acc += w * a;
                }
                *out_o = if l < last { acc.max(0.0) } else { acc };
            }
            activation = out;
        }
        Ok(activation)
    }

    /// Forward pass that keeps pre-activations and post-ReLU activations for
    /// backprop. Returns `(pre_activations, activations)` per layer; the last
    /// layer's pre-activation holds the logits.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut pre = Vec::with_capacity(shapes.len());
        let mut act = Vec::with_capacity(shapes.len());
        let mut current = x.to_vec();
        for (l, shape) in shapes.iter().enumerate() {
            let mut z = vec![0.0; shape.outputs];
            for (o, z_o) in z.iter_mut().enumerate() {
                let mut acc = self.params[shape.bias_offset + o];
                let row = &self.params[shape.w(o, 0)..shape.w(o, shape.inputs)];
                for (w, a) in row.iter().zip(&current) {
                    acc += w * a;
                }
                *z_o = acc;
            }
            let a: Vec<f64> = if l < last {
                z.iter().map(|&v| v.max(0.0)).collect()
            } else {
                z.clone()
            };
            pre.push(z);
            current = a.clone();
            act.push(a);
        }
        (pre, act)
    }

    /// One SGD step on the batch mean of
    /// `CE(softmax_T(logits), y) + weight · D(softmax_T(logits), teacher)`
    /// where `D` is picked by the distillation objective. Samples without a
    /// teacher contribute only the cross-entropy term. Returns the batch
    /// loss.
    pub fn train_batch(
        &mut self,
        batch: &[TrainExample<'_>],
        distill: &DistillConfig,
        lr: f64,
    ) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::invalid_argument("empty training batch"));
        }
        distill.validate()?;
        let temp = distill.temperature;
        let shapes = self.spec.layer_shapes();
        let classes = self.spec.num_classes;
        let mut grad = vec![0.0; self.params.len()];
        let mut total_loss = 0.0;

        for example in batch {
            if example.features.len() != self.spec.input_dim {
                return Err(Error::InvalidArgument(format!(
                    "feature length {} does not match input_dim {}",
                    example.features.len(),
                    self.spec.input_dim
                )));
            }
            if example.label >= classes {
                return Err(Error::InvalidArgument(format!(
                    "label {} out of range for {classes} classes",
                    example.label
                )));
            }
            let (pre, act) = self.forward_trace(example.features);
            let logits = pre.last().expect("at least one layer");
            let probs = numeric::softmax_temp(logits, temp)?;
            let p = probs.as_slice();

            let mut loss = numeric::cross_entropy(&probs, example.label)?;
            let mut dz: Vec<f64> = (0..classes)
                .map(|j| {
                    let onehot = if j == example.label { 1.0 } else { 0.0 };
                    (p[j] - onehot) / temp
                })
                .collect();

            if distill.weight > 0.0 {
                if let Some(teacher) = example.teacher {
                    if teacher.len() != classes {
                        return Err(Error::InvalidArgument(format!(
                            "teacher length {} does not match {classes} classes",
                            teacher.len()
                        )));
                    }
                    let q = teacher.as_slice();
                    match distill.objective {
                        DistillObjective::KlDivergence => {
                            let kl = numeric::kl_div(&probs, teacher)?;
                            loss += distill.weight * kl;
                            for j in 0..classes {
                                let ratio = p[j] / q[j].max(numeric::TEACHER_FLOOR);
                                dz[j] += distill.weight * p[j] * (ratio.ln() - kl) / temp;
                            }
                        }
                        DistillObjective::SoftCrossEntropy => {
                            loss += distill.weight * numeric::cross_entropy_soft(&probs, teacher)?;
                            for j in 0..classes {
                                dz[j] += distill.weight * (p[j] - q[j]) / temp;
                            }
                        }
                    }
                }
            }
            total_loss += loss;

            // Backprop dz through the layers, accumulating into grad.
            let mut delta = dz;
            for (l, shape) in shapes.iter().enumerate().rev() {
                let a_in: &[f64] = if l == 0 {
                    example.features
                } else {
                    &act[l - 1]
                };
                for (o, &d) in delta.iter().enumerate() {
                    let row = &mut grad[shape.w(o, 0)..shape.w(o, shape.inputs)];
                    for (g, a) in row.iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                    grad[shape.bias_offset + o] += d;
                }
                if l > 0 {
                    let mut prev = vec![0.0; shape.inputs];
                    for (o, &d) in delta.iter().enumerate() {
                        let row = &self.params[shape.w(o, 0)..shape.w(o, shape.inputs)];
                        for (p_i, w) in prev.iter_mut().zip(row) {
                            *p_i += w * d;
                        }
                    }
                    for (p_i, z) in prev.iter_mut().zip(&pre[l - 1]) {
                        if *z <= 0.0 {
                            *p_i = 0.0;
                        }
                    }
                    delta = prev;
                }
            }
        }

        let scale = 1.0 / batch.len() as f64;
        for g in &mut grad {
            *g *= scale;
        }
        self.params = numeric::sgd_step(&self.params, &grad, lr)?;
        numeric::check_finite(&self.params, "updated parameters")?;
        Ok(total_loss * scale)
    }

    /// Fraction of samples whose argmax logit equals the label; argmax ties
    /// resolve to the lowest class index.
    pub fn evaluate(&self, dataset: &LabeledDataset) -> Result<f64> {
        if dataset.is_empty() {
            return Err(Error::invalid_argument("evaluation on empty dataset"));
        }
        let mut correct = 0usize;
        for sample in dataset.samples() {
            let logits = self.forward(&sample.features)?;
            let mut best = 0usize;
            for (j, &v) in logits.iter().enumerate() {
                if v > logits[best] {
                    best = j;
                }
            }
            if best == sample.label {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }

    /// Write the checkpoint: one ASCII header line
    /// (`architecture input_dim hidden,widths classes seed count`) followed
    /// by the little-endian f64 parameter block.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
        let hidden = self
            .spec
            .hidden_widths
            .iter()
            .map(|w| w.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(
            file,
            "fedcache-model v1 {} {} {} {} {} {}",
            self.spec.arch.as_str(),
            self.spec.input_dim,
            hidden,
            self.spec.num_classes,
            self.seed,
            self.params.len()
        )?;
        for p in &self.params {
            file.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn load_checkpoint(path: &Path) -> Result<ClientModel> {
        let mut reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let mut header = String::new();
        reader.read_line(&mut header)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let parse_err = |msg: &str| Error::Parse {
            path: path.to_path_buf(),
            location: "header".into(),
            message: msg.into(),
        };
        if fields.len() != 8 || fields[0] != "fedcache-model" || fields[1] != "v1" {
            return Err(parse_err("bad checkpoint header"));
        }
        let arch = ArchitectureId::parse(fields[2])?;
        let input_dim: usize = fields[3].parse().map_err(|_| parse_err("bad input_dim"))?;
        let hidden_widths: Vec<usize> = fields[4]
            .split(',')
            .map(|s| s.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| parse_err("bad hidden widths"))?;
        let num_classes: usize = fields[5].parse().map_err(|_| parse_err("bad classes"))?;
        let seed: u64 = fields[6].parse().map_err(|_| parse_err("bad seed"))?;
        let count: usize = fields[7].parse().map_err(|_| parse_err("bad count"))?;
        let spec = ModelSpec {
            arch,
            input_dim,
            hidden_widths,
            num_classes,
        };
        spec.validate()?;
        if spec.param_count() != count {
            return Err(Error::Format(format!(
                "checkpoint declares {count} parameters but spec implies {}",
                spec.param_count()
            )));
        }
        let mut params = Vec::with_capacity(count);
        let mut buf = [0u8; 8];
        for i in 0..count {
            reader.read_exact(&mut buf).map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                location: format!("parameter {i}"),
                message: "truncated parameter block".into(),
            })?;
            params.push(f64::from_le_bytes(buf));
        }
        numeric::check_finite(&params, "checkpoint parameters")?;
        Ok(ClientModel { spec, params, seed })
    }
}
