//! Desk-scale teacher/student MLPs and synthetic blob data, so every
//! distillation objective can be trained end-to-end in seconds.
//!
//! Training is plain SGD with a fixed learning rate; all randomness flows
//! from one seed through ChaCha8 streams, so a (seed, config) pair always
//! reproduces the same weights and loss trace bit for bit.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kd::{
    feature_mse_on_tape, mse_logit_on_tape, nkd_on_tape, simkd_infer, supervised_ce_on_tape,
    vanilla_kd_on_tape, KdError, KdHyperparams, LinearClassifier, Projector, ProjectorKind,
};
use crate::metrics::PredictionRecord;
use crate::tensor::{matmul_raw, temp_softmax, Tape, Tensor, TensorError, Var};

pub type ToyResult<T> = Result<T, ToyError>;

#[derive(Debug, Clone, PartialEq)]
pub enum ToyError {
    Kd(KdError),
    Tensor(TensorError),
    MissingTeacher { method: &'static str },
    InvalidConfig { reason: String },
    NonFiniteLoss { epoch: usize },
}

impl fmt::Display for ToyError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ToyError::Kd(e) => write!(f, "{e}"),
            ToyError::Tensor(e) => write!(f, "{e}"),
            ToyError::MissingTeacher { method } => {
                write!(f, "method {method} requires a teacher model")
            }
            ToyError::InvalidConfig { reason } => write!(f, "invalid config: {reason}"),
            ToyError::NonFiniteLoss { epoch } => {
                write!(f, "training loss became non-finite at epoch {epoch}")
            }
        }
    }
}

impl std::error::Error for ToyError {}

impl From<KdError> for ToyError {
    fn from(e: KdError) -> Self {
        ToyError::Kd(e)
    }
}

impl From<TensorError> for ToyError {
    fn from(e: TensorError) -> Self {
        ToyError::Tensor(e)
    }
}

/// Stable label-derived sub-seed, so independent random streams (data,
/// init, shuffling) never alias even though they share one root seed.
pub fn subseed(root: u64, label: &str) -> u64 {
    // FNV-1a over the label bytes, folded into the root.
    let mut h: u64 = 0xcbf29ce484222325 ^ root;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn fnv1a_f64(mut h: u64, v: f64) -> u64 {
    for b in v.to_bits().to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// One dense layer: `weight` is `in x out`, `bias` is `out`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Fully-connected network with tanh activations on every hidden layer
/// and a linear head. The smooth nonlinearity keeps finite-difference
/// gradient checks clean through the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layer_dims: Vec<usize>,
    layers: Vec<DenseLayer>,
    seed: u64,
}

/// Plain (no-gradient) forward products.
#[derive(Debug, Clone)]
pub struct PlainActivations {
    pub hidden: Vec<Tensor>,
    pub logits: Tensor,
}

impl PlainActivations {
    pub fn penultimate(&self) -> &Tensor {
        self.hidden.last().expect("MLP always has a hidden layer")
    }
}

/// Tape forward products: hidden activations, logits, and the parameter
/// variables in layer order (weight, bias, weight, bias, ...).
#[derive(Debug, Clone)]
pub struct TapeActivations {
    pub hidden: Vec<Var>,
    pub logits: Var,
    pub params: Vec<Var>,
}

impl Mlp {
    /// `layer_dims = [input, hidden..., classes]`, at least one hidden layer.
    pub fn new(layer_dims: &[usize], seed: u64) -> ToyResult<Self> {
        if layer_dims.len() < 3 || layer_dims.iter().any(|&d| d == 0) {
            return Err(ToyError::InvalidConfig {
                reason: format!("layer dims must be [input, hidden.., classes], got {layer_dims:?}"),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        for w in layer_dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let bound = 1.0 / (fan_in as f64).sqrt();
            let weight = Tensor::new(
                (0..fan_in * fan_out)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
                vec![fan_in, fan_out],
            )?;
            let bias = Tensor::new(
                (0..fan_out).map(|_| rng.gen_range(-bound..bound)).collect(),
                vec![fan_out],
            )?;
            layers.push(DenseLayer { weight, bias });
        }
        Ok(Mlp {
            layer_dims: layer_dims.to_vec(),
            layers,
            seed,
        })
    }

    pub fn from_layers(
        layer_dims: Vec<usize>,
        layers: Vec<DenseLayer>,
        seed: u64,
    ) -> ToyResult<Self> {
        if layer_dims.len() != layers.len() + 1 {
            return Err(ToyError::InvalidConfig {
                reason: "layer count does not match layer dims".to_string(),
            });
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.weight.shape() != [layer_dims[i], layer_dims[i + 1]]
                || layer.bias.shape() != [layer_dims[i + 1]]
            {
                return Err(ToyError::InvalidConfig {
                    reason: format!("layer {i} tensors do not match dims {layer_dims:?}"),
                });
            }
        }
        Ok(Mlp {
            layer_dims,
            layers,
            seed,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn penultimate_dim(&self) -> usize {
        self.layer_dims[self.layer_dims.len() - 2]
    }

    /// Index into the hidden activations for the middle hint layer.
    pub fn hint_hidden_index(&self) -> usize {
        (self.layers.len() - 1) / 2
    }

    pub fn hidden_dim(&self, hidden_index: usize) -> usize {
        self.layer_dims[hidden_index + 1]
    }

    /// The final linear layer as a standalone frozen classifier.
    pub fn head(&self) -> LinearClassifier {
        let last = self.layers.last().unwrap();
        LinearClassifier::new(last.weight.clone(), last.bias.clone())
            .expect("MLP head is a valid classifier")
    }

    /// Forward pass without gradients.
    pub fn forward_plain(&self, inputs: &Tensor) -> ToyResult<PlainActivations> {
        if inputs.shape().len() != 2 || inputs.shape()[1] != self.input_dim() {
            return Err(ToyError::InvalidConfig {
                reason: format!(
                    "inputs must be B x {}, got {:?}",
                    self.input_dim(),
                    inputs.shape()
                ),
            });
        }
        let b = inputs.shape()[0];
        let mut act = inputs.values().to_vec();
        let mut width = self.input_dim();
        let mut hidden = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let out_w = layer.bias.len();
            let mut z = matmul_raw(&act, layer.weight.values(), b, width, out_w);
            for r in 0..b {
                for c in 0..out_w {
                    z[r * out_w + c] += layer.bias.values()[c];
                }
            }
            if l + 1 < self.layers.len() {
                for v in z.iter_mut() {
                    *v = v.tanh();
                }
                hidden.push(Tensor::new(z.clone(), vec![b, out_w])?);
            }
            act = z;
            width = out_w;
        }
        Ok(PlainActivations {
            hidden,
            logits: Tensor::new(act, vec![b, width])?,
        })
    }

    /// Forward pass recorded on a tape. When `trainable`, the layer
    /// parameters become gradient-carrying variables.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        input: Var,
        trainable: bool,
    ) -> ToyResult<TapeActivations> {
        let mut params = Vec::new();
        let mut act = input;
        let mut hidden = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let (w, bias) = if trainable {
                (tape.var_from(&layer.weight), tape.var_from(&layer.bias))
            } else {
                (
                    tape.constant_from(&layer.weight),
                    tape.constant_from(&layer.bias),
                )
            };
            params.push(w);
            params.push(bias);
            let z = tape.matmul(act, w)?;
            let z = tape.add_bias(z, bias)?;
            act = if l + 1 < self.layers.len() {
                let a = tape.tanh(z);
                hidden.push(a);
                a
            } else {
                z
            };
        }
        Ok(TapeActivations {
            hidden,
            logits: act,
            params,
        })
    }

    /// Order-sensitive digest of all weights, for immutability checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for layer in &self.layers {
            for &v in layer.weight.values() {
                h = fnv1a_f64(h, v);
            }
            for &v in layer.bias.values() {
                h = fnv1a_f64(h, v);
            }
        }
        h
    }

    fn apply_sgd(&mut self, tape: &Tape, params: &[Var], lr: f64) {
        let mut it = params.iter();
        for layer in &mut self.layers {
            for tensor in [&mut layer.weight, &mut layer.bias] {
                let var = *it.next().expect("one var per parameter tensor");
                if let Some(grad) = tape.grad(var) {
                    for (w, g) in tensor.values_mut().iter_mut().zip(grad) {
                        *w -= lr * g;
                    }
                }
            }
        }
    }
}

/// Balanced 2-D Gaussian clusters with one class per unit-circle angle.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub seed: u64,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Stack the selected points into a `B x 2` tensor.
    pub fn inputs(&self, idxs: &[usize]) -> Tensor {
        let mut values = Vec::with_capacity(idxs.len() * 2);
        for &i in idxs {
            values.extend_from_slice(&self.points[i]);
        }
        Tensor::new(values, vec![idxs.len(), 2]).expect("point rows are length 2")
    }

    pub fn labels_at(&self, idxs: &[usize]) -> Vec<usize> {
        idxs.iter().map(|&i| self.labels[i]).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn class_centroid(&self, class: usize) -> [f64; 2] {
        let mut c = [0.0, 0.0];
        let mut n = 0usize;
        for (p, &y) in self.points.iter().zip(&self.labels) {
            if y == class {
                c[0] += p[0];
                c[1] += p[1];
                n += 1;
            }
        }
        [c[0] / n as f64, c[1] / n as f64]
    }
}

/// `K` isotropic Gaussian clusters centered on the unit circle at angles
/// `2*pi*k/K`, `n_per_class` points each, standard deviation `spread`.
pub fn gen_gaussian_blobs(
    k: usize,
    n_per_class: usize,
    spread: f64,
    seed: u64,
) -> ToyResult<SyntheticDataset> {
    if k < 2 {
        return Err(ToyError::InvalidConfig {
            reason: format!("need at least 2 classes, got {k}"),
        });
    }
    if n_per_class == 0 {
        return Err(ToyError::InvalidConfig {
            reason: "n_per_class must be >= 1".to_string(),
        });
    }
    if !(spread > 0.0) {
        return Err(ToyError::InvalidConfig {
            reason: format!("spread must be > 0, got {spread}"),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut points = Vec::with_capacity(k * n_per_class);
    let mut labels = Vec::with_capacity(k * n_per_class);
    for class in 0..k {
        let angle = 2.0 * std::f64::consts::PI * class as f64 / k as f64;
        let (cx, cy) = (angle.cos(), angle.sin());
        for _ in 0..n_per_class {
            // Box-Muller from the ChaCha stream keeps this dependency-free
            // and reproducible.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let z0 = r * (2.0 * std::f64::consts::PI * u2).cos();
            let z1 = r * (2.0 * std::f64::consts::PI * u2).sin();
            points.push([cx + spread * z0, cy + spread * z1]);
            labels.push(class);
        }
    }
    Ok(SyntheticDataset {
        points,
        labels,
        num_classes: k,
        seed,
    })
}

/// Training objective selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Ce,
    Vanilla,
    Nkd,
    Mse,
    Fitnet,
    Simkd,
}

impl Method {
    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Ce => "ce",
            Method::Vanilla => "vanilla",
            Method::Nkd => "nkd",
            Method::Mse => "mse",
            Method::Fitnet => "fitnet",
            Method::Simkd => "simkd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "ce" => Some(Method::Ce),
            "vanilla" => Some(Method::Vanilla),
            "nkd" => Some(Method::Nkd),
            "mse" => Some(Method::Mse),
            "fitnet" => Some(Method::Fitnet),
            "simkd" => Some(Method::Simkd),
            _ => None,
        }
    }

    pub fn needs_teacher(&self) -> bool {
        !matches!(self, Method::Ce)
    }

    fn needs_projector(&self) -> bool {
        matches!(self, Method::Fitnet | Method::Simkd)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub hyperparams: KdHyperparams,
    pub projector_kind: ProjectorKind,
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Ce,
            hyperparams: KdHyperparams::default(),
            projector_kind: ProjectorKind::LinearCls,
            learning_rate: 0.1,
            epochs: 30,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Trained model, its per-epoch loss trace, and the trained projector for
/// the feature-based methods (required at inference time for SimKD).
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Mlp,
    pub loss_trace: Vec<f64>,
    pub projector: Option<Projector>,
}

/// Plain SGD over the configured objective. The teacher, when present, is
/// only ever read: its logits and features enter each batch as constants.
pub fn train(
    model: &Mlp,
    data: &SyntheticDataset,
    cfg: &TrainConfig,
    teacher: Option<&Mlp>,
) -> ToyResult<TrainOutcome> {
    if cfg.batch_size == 0 {
        return Err(ToyError::InvalidConfig {
            reason: "batch_size must be >= 1".to_string(),
        });
    }
    if !cfg.learning_rate.is_finite() || cfg.learning_rate < 0.0 {
        return Err(ToyError::InvalidConfig {
            reason: format!("learning rate must be finite and >= 0, got {}", cfg.learning_rate),
        });
    }
    if cfg.method.needs_teacher() && teacher.is_none() {
        return Err(ToyError::MissingTeacher {
            method: cfg.method.as_str(),
        });
    }
    if data.is_empty() {
        return Err(ToyError::InvalidConfig {
            reason: "dataset is empty".to_string(),
        });
    }

    let mut student = model.clone();
    let mut projector = if cfg.method.needs_projector() {
        let teacher = teacher.unwrap();
        let (s_dim, t_dim) = match cfg.method {
            Method::Fitnet => (
                student.hidden_dim(student.hint_hidden_index()),
                teacher.hidden_dim(teacher.hint_hidden_index()),
            ),
            Method::Simkd => (student.penultimate_dim(), teacher.penultimate_dim()),
            _ => unreachable!(),
        };
        Some(Projector::new(
            cfg.projector_kind,
            &[s_dim],
            &[t_dim],
            subseed(cfg.seed, "projector"),
        )?)
    } else {
        None
    };

    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(subseed(cfg.seed, "shuffle"));
    let mut order = data.all_indices();
    let mut loss_trace = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        // Fisher-Yates with the dedicated stream.
        for i in (1..order.len()).rev() {
            let j = shuffle_rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let inputs = data.inputs(chunk);
            let labels = data.labels_at(chunk);
            let batch_loss = train_step(
                &mut student,
                projector.as_mut(),
                teacher,
                cfg,
                &inputs,
                &labels,
            )?;
            epoch_loss += batch_loss * chunk.len() as f64;
        }
        let epoch_loss = epoch_loss / data.len() as f64;
        if !epoch_loss.is_finite() {
            return Err(ToyError::NonFiniteLoss { epoch });
        }
        log::debug!(
            "epoch {epoch}: method={} loss={epoch_loss:.6}",
            cfg.method.as_str()
        );
        loss_trace.push(epoch_loss);
    }

    Ok(TrainOutcome {
        model: student,
        loss_trace,
        projector,
    })
}

fn train_step(
    student: &mut Mlp,
    projector: Option<&mut Projector>,
    teacher: Option<&Mlp>,
    cfg: &TrainConfig,
    inputs: &Tensor,
    labels: &[usize],
) -> ToyResult<f64> {
    let mut tape = Tape::new();
    let x = tape.constant_from(inputs);
    let acts = student.forward_on_tape(&mut tape, x, true)?;

    let mut bound = None;
    let loss = match cfg.method {
        Method::Ce => supervised_ce_on_tape(&mut tape, acts.logits, labels)?,
        Method::Vanilla => {
            let t_logits = teacher.unwrap().forward_plain(inputs)?.logits;
            vanilla_kd_on_tape(&mut tape, acts.logits, &t_logits, labels, &cfg.hyperparams)?
        }
        Method::Nkd => {
            let t_logits = teacher.unwrap().forward_plain(inputs)?.logits;
            nkd_on_tape(&mut tape, acts.logits, &t_logits, labels, &cfg.hyperparams)?
        }
        Method::Mse => {
            let t_logits = teacher.unwrap().forward_plain(inputs)?.logits;
            mse_logit_on_tape(&mut tape, acts.logits, &t_logits)?
        }
        Method::Fitnet => {
            // Joint objective: hard-label CE keeps the head trained while
            // the hint loss aligns the middle features.
            let teacher = teacher.unwrap();
            let t_acts = teacher.forward_plain(inputs)?;
            let t_hint = &t_acts.hidden[teacher.hint_hidden_index()];
            let s_hint = acts.hidden[student.hint_hidden_index()];
            let proj = projector.as_ref().unwrap();
            let b = proj.bind(&mut tape, true);
            let projected = b.apply(&mut tape, s_hint)?;
            let hint = feature_mse_on_tape(&mut tape, projected, t_hint)?;
            let ce = supervised_ce_on_tape(&mut tape, acts.logits, labels)?;
            bound = Some(b);
            tape.add(ce, hint)?
        }
        Method::Simkd => {
            let teacher = teacher.unwrap();
            let t_acts = teacher.forward_plain(inputs)?;
            let proj = projector.as_ref().unwrap();
            let b = proj.bind(&mut tape, true);
            let projected = b.apply(&mut tape, acts.penultimate())?;
            let loss = feature_mse_on_tape(&mut tape, projected, t_acts.penultimate())?;
            bound = Some(b);
            loss
        }
    };

    let value = tape.scalar_value(loss);
    tape.backward(loss)?;
    student.apply_sgd(&tape, &acts.params, cfg.learning_rate);
    if let (Some(proj), Some(bound)) = (projector, bound) {
        for (i, var) in bound.param_vars().iter().enumerate() {
            if let Some(grad) = tape.grad(*var) {
                let grad = grad.to_vec();
                for (w, g) in proj.param_values_mut(i).iter_mut().zip(&grad) {
                    *w -= cfg.learning_rate * g;
                }
            }
        }
    }
    Ok(value)
}

impl TapeActivations {
    pub fn penultimate(&self) -> Var {
        *self.hidden.last().expect("MLP always has a hidden layer")
    }
}

/// How to turn penultimate features or logits into class predictions.
#[derive(Debug, Clone, Copy)]
pub enum Inference<'a> {
    /// The model's own classifier head.
    OwnHead,
    /// The trained projector followed by the frozen teacher head.
    SimkdReuse {
        projector: &'a Projector,
        teacher: &'a Mlp,
    },
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// One prediction record per data point, feeding the metrics module.
pub fn evaluate(
    model: &Mlp,
    data: &SyntheticDataset,
    inference: Inference,
) -> ToyResult<Vec<PredictionRecord>> {
    let idxs = data.all_indices();
    let inputs = data.inputs(&idxs);
    let logits = match inference {
        Inference::OwnHead => model.forward_plain(&inputs)?.logits,
        Inference::SimkdReuse { projector, teacher } => {
            let penult = model.forward_plain(&inputs)?;
            simkd_infer(penult.penultimate(), projector, &teacher.head())?
        }
    };
    let k = logits.shape()[1];
    let mut records = Vec::with_capacity(data.len());
    for (i, &label) in data.labels.iter().enumerate() {
        let probs = temp_softmax(logits.row(i), 1.0)?;
        let pred = argmax(&probs);
        records.push(PredictionRecord {
            confidence: probs[pred],
            correct: pred == label,
            probabilities: Some(probs),
        });
        debug_assert!(label < k);
    }
    Ok(records)
}

/// Predicted classes, used for teacher-student argmax agreement.
pub fn predicted_classes(
    model: &Mlp,
    data: &SyntheticDataset,
    inference: Inference,
) -> ToyResult<Vec<usize>> {
    let idxs = data.all_indices();
    let inputs = data.inputs(&idxs);
    let logits = match inference {
        Inference::OwnHead => model.forward_plain(&inputs)?.logits,
        Inference::SimkdReuse { projector, teacher } => {
            let penult = model.forward_plain(&inputs)?;
            simkd_infer(penult.penultimate(), projector, &teacher.head())?
        }
    };
    Ok((0..data.len()).map(|i| argmax(logits.row(i))).collect())
}

pub fn agreement(a: &[usize], b: &[usize]) -> f64 {
    assert_eq!(a.len(), b.len());
    let same = a.iter().zip(b).filter(|(x, y)| x == y).count();
    same as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics;

    #[test]
    fn blobs_are_balanced_and_deterministic() {
        let a = gen_gaussian_blobs(3, 10, 0.1, 7).unwrap();
        assert_eq!(a.len(), 30);
        for class in 0..3 {
            assert_eq!(a.labels.iter().filter(|&&y| y == class).count(), 10);
        }
        let b = gen_gaussian_blobs(3, 10, 0.1, 7).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn blobs_reject_degenerate_spread() {
        assert!(gen_gaussian_blobs(3, 10, 0.0, 7).is_err());
        assert!(gen_gaussian_blobs(3, 10, -1.0, 7).is_err());
        assert!(gen_gaussian_blobs(1, 10, 0.1, 7).is_err());
        assert!(gen_gaussian_blobs(3, 0, 0.1, 7).is_err());
    }

    #[test]
    fn blobs_nearest_centroid_separates_tight_clusters() {
        // Brute-force nearest-centroid as the classification oracle.
        let data = gen_gaussian_blobs(3, 200, 0.1, 13).unwrap();
        let centroids: Vec<[f64; 2]> = (0..3).map(|c| data.class_centroid(c)).collect();
        let mut hits = 0;
        for (p, &y) in data.points.iter().zip(&data.labels) {
            let pred = (0..3)
                .min_by(|&a, &b| {
                    let da = (p[0] - centroids[a][0]).powi(2) + (p[1] - centroids[a][1]).powi(2);
                    let db = (p[0] - centroids[b][0]).powi(2) + (p[1] - centroids[b][1]).powi(2);
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if pred == y {
                hits += 1;
            }
        }
        assert!(hits as f64 / data.len() as f64 >= 0.99);
    }

    #[test]
    fn zero_learning_rate_leaves_weights_untouched() {
        let data = gen_gaussian_blobs(3, 5, 0.2, 3).unwrap();
        let model = Mlp::new(&[2, 4, 4, 3], 5).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            epochs: 1,
            ..TrainConfig::default()
        };
        let out = train(&model, &data, &cfg, None).unwrap();
        assert_eq!(out.model, model);
    }

    #[test]
    fn kd_methods_require_teacher() {
        let data = gen_gaussian_blobs(3, 5, 0.2, 3).unwrap();
        let model = Mlp::new(&[2, 4, 4, 3], 5).unwrap();
        let cfg = TrainConfig {
            method: Method::Vanilla,
            epochs: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(&model, &data, &cfg, None),
            Err(ToyError::MissingTeacher { .. })
        ));
    }

    #[test]
    fn training_is_deterministic_and_leaves_teacher_untouched() {
        let data = gen_gaussian_blobs(3, 20, 0.15, 9).unwrap();
        let teacher = Mlp::new(&[2, 8, 8, 3], 1).unwrap();
        let teacher_sum = teacher.checksum();
        let student = Mlp::new(&[2, 4, 4, 3], 2).unwrap();
        let cfg = TrainConfig {
            method: Method::Vanilla,
            epochs: 3,
            seed: 11,
            ..TrainConfig::default()
        };
        let a = train(&student, &data, &cfg, Some(&teacher)).unwrap();
        let b = train(&student, &data, &cfg, Some(&teacher)).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
        assert_eq!(teacher.checksum(), teacher_sum);
        assert!(a.loss_trace.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn vanilla_training_descends() {
        let data = gen_gaussian_blobs(3, 30, 0.15, 21).unwrap();
        let teacher = Mlp::new(&[2, 16, 16, 3], 1).unwrap();
        let t_cfg = TrainConfig {
            epochs: 20,
            seed: 1,
            ..TrainConfig::default()
        };
        let teacher = train(&teacher, &data, &t_cfg, None).unwrap().model;
        let student = Mlp::new(&[2, 4, 4, 3], 2).unwrap();
        let cfg = TrainConfig {
            method: Method::Vanilla,
            epochs: 15,
            seed: 3,
            ..TrainConfig::default()
        };
        let out = train(&student, &data, &cfg, Some(&teacher)).unwrap();
        assert!(out.loss_trace.last().unwrap() < out.loss_trace.first().unwrap());
    }

    #[test]
    fn tape_forward_matches_plain_forward() {
        let model = Mlp::new(&[2, 5, 4, 3], 17).unwrap();
        let inputs = Tensor::new(vec![0.1, -0.4, 1.2, 0.8, -1.0, 0.0], vec![3, 2]).unwrap();
        let plain = model.forward_plain(&inputs).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant_from(&inputs);
        let acts = model.forward_on_tape(&mut tape, x, false).unwrap();
        assert_eq!(tape.values(acts.logits), plain.logits.values());
        for (h_var, h_plain) in acts.hidden.iter().zip(&plain.hidden) {
            assert_eq!(tape.values(*h_var), h_plain.values());
        }
    }

    #[test]
    fn evaluate_records_are_well_formed() {
        let data = gen_gaussian_blobs(3, 10, 0.2, 5).unwrap();
        let model = Mlp::new(&[2, 4, 4, 3], 5).unwrap();
        let records = evaluate(&model, &data, Inference::OwnHead).unwrap();
        assert_eq!(records.len(), 30);
        for r in &records {
            assert!(r.confidence > 0.0 && r.confidence <= 1.0);
            let probs = r.probabilities.as_ref().unwrap();
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn own_head_equals_simkd_reuse_in_degenerate_identity_case() {
        // student == teacher with an identity projector: both inference
        // paths apply the same head to the same features.
        let model = Mlp::new(&[2, 6, 6, 3], 23).unwrap();
        let data = gen_gaussian_blobs(3, 8, 0.2, 6).unwrap();
        let proj = Projector::new(ProjectorKind::Identity, &[6], &[6], 0).unwrap();
        let own = evaluate(&model, &data, Inference::OwnHead).unwrap();
        let reuse = evaluate(
            &model,
            &data,
            Inference::SimkdReuse {
                projector: &proj,
                teacher: &model,
            },
        )
        .unwrap();
        for (a, b) in own.iter().zip(&reuse) {
            assert_eq!(a.confidence, b.confidence);
            assert_eq!(a.correct, b.correct);
        }
    }

    #[test]
    fn trained_teacher_beats_random_init() {
        let data = gen_gaussian_blobs(3, 40, 0.15, 31).unwrap();
        let init = Mlp::new(&[2, 16, 16, 3], 1).unwrap();
        let cfg = TrainConfig {
            epochs: 20,
            seed: 2,
            ..TrainConfig::default()
        };
        let trained = train(&init, &data, &cfg, None).unwrap().model;
        let acc_trained =
            metrics::accuracy(&evaluate(&trained, &data, Inference::OwnHead).unwrap()).unwrap();
        let acc_init =
            metrics::accuracy(&evaluate(&init, &data, Inference::OwnHead).unwrap()).unwrap();
        assert!(acc_trained >= acc_init);
    }
}
