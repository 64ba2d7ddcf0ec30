//! Distillation objectives: vanilla KD, logit MSE, normalized KD, FitNet,
//! and SimKD with its projector variants and teacher-classifier-reuse
//! inference.
//!
//! Teacher logits and features enter every loss as plain tensors and are
//! recorded as tape constants, so no gradient ever reaches them. Student
//! inputs are tape variables; each loss is differentiable with respect to
//! the student side (and, for the feature losses, the projector
//! parameters).

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::{temp_softmax, Tape, Tensor, TensorError, Var, PROB_FLOOR};

pub type KdResult<T> = Result<T, KdError>;

#[derive(Debug, Clone, PartialEq)]
pub enum KdError {
    Tensor(TensorError),
    ShapeMismatch {
        context: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    LabelOutOfRange {
        label: usize,
        classes: usize,
    },
    TooFewClasses {
        classes: usize,
    },
    InvalidHyperparam {
        name: &'static str,
        value: f64,
    },
    IncompatibleProjector {
        reason: String,
    },
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
}

impl fmt::Display for KdError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KdError::Tensor(e) => write!(f, "{e}"),
            KdError::ShapeMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected shape {expected:?}, got {got:?}"),
            KdError::LabelOutOfRange { label, classes } => {
                write!(f, "label {label} out of range for {classes} classes")
            }
            KdError::TooFewClasses { classes } => {
                write!(f, "need at least 2 classes, got {classes}")
            }
            KdError::InvalidHyperparam { name, value } => {
                write!(f, "invalid hyperparameter {name} = {value}")
            }
            KdError::IncompatibleProjector { reason } => {
                write!(f, "incompatible projector: {reason}")
            }
            KdError::DimensionMismatch {
                context,
                expected,
                got,
            } => write!(f, "{context}: expected dimension {expected}, got {got}"),
        }
    }
}

impl std::error::Error for KdError {}

impl From<TensorError> for KdError {
    fn from(e: TensorError) -> Self {
        KdError::Tensor(e)
    }
}

/// Paired student/teacher logits (`B x K`) plus hard labels.
#[derive(Debug, Clone)]
pub struct DistillBatch {
    pub student_logits: Tensor,
    pub teacher_logits: Tensor,
    pub labels: Vec<usize>,
}

impl DistillBatch {
    pub fn new(
        student_logits: Tensor,
        teacher_logits: Tensor,
        labels: Vec<usize>,
    ) -> KdResult<Self> {
        if student_logits.shape() != teacher_logits.shape() {
            return Err(KdError::ShapeMismatch {
                context: "distill batch",
                expected: student_logits.shape().to_vec(),
                got: teacher_logits.shape().to_vec(),
            });
        }
        if student_logits.shape().len() != 2 {
            return Err(KdError::ShapeMismatch {
                context: "logits must be B x K",
                expected: vec![labels.len(), 0],
                got: student_logits.shape().to_vec(),
            });
        }
        let (b, k) = (student_logits.shape()[0], student_logits.shape()[1]);
        if labels.len() != b {
            return Err(KdError::DimensionMismatch {
                context: "labels",
                expected: b,
                got: labels.len(),
            });
        }
        for &y in &labels {
            if y >= k {
                return Err(KdError::LabelOutOfRange {
                    label: y,
                    classes: k,
                });
            }
        }
        Ok(DistillBatch {
            student_logits,
            teacher_logits,
            labels,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.student_logits.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.student_logits.shape()[1]
    }
}

/// Loss hyperparameters: CE/KD trade-off `alpha`, temperature `tau`,
/// non-target weight `gamma`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdHyperparams {
    pub alpha: f64,
    pub tau: f64,
    pub gamma: f64,
}

impl KdHyperparams {
    pub fn new(alpha: f64, tau: f64, gamma: f64) -> KdResult<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(KdError::InvalidHyperparam {
                name: "alpha",
                value: alpha,
            });
        }
        if tau < 1.0 {
            return Err(KdError::InvalidHyperparam {
                name: "tau",
                value: tau,
            });
        }
        if gamma < 0.0 {
            return Err(KdError::InvalidHyperparam {
                name: "gamma",
                value: gamma,
            });
        }
        Ok(KdHyperparams { alpha, tau, gamma })
    }
}

impl Default for KdHyperparams {
    // tau=2.5, alpha=0.5 for vanilla; gamma=1.5 pairs with tau=1 for NKD.
    fn default() -> Self {
        KdHyperparams {
            alpha: 0.5,
            tau: 2.5,
            gamma: 1.5,
        }
    }
}

/// Intermediate feature maps from one hint layer of each network.
#[derive(Debug, Clone)]
pub struct FeaturePair {
    pub student_features: Tensor,
    pub teacher_features: Tensor,
    pub hint_layer: usize,
}

impl FeaturePair {
    pub fn new(student_features: Tensor, teacher_features: Tensor, hint_layer: usize) -> KdResult<Self> {
        if student_features.shape().is_empty()
            || teacher_features.shape().is_empty()
            || student_features.shape()[0] != teacher_features.shape()[0]
        {
            return Err(KdError::ShapeMismatch {
                context: "feature pair batch dims",
                expected: student_features.shape().to_vec(),
                got: teacher_features.shape().to_vec(),
            });
        }
        Ok(FeaturePair {
            student_features,
            teacher_features,
            hint_layer,
        })
    }
}

// ---------------------------------------------------------------------------
// Tape-level loss builders
// ---------------------------------------------------------------------------

fn one_hot(labels: &[usize], k: usize) -> Vec<f64> {
    let mut m = vec![0.0; labels.len() * k];
    for (b, &y) in labels.iter().enumerate() {
        m[b * k + y] = 1.0;
    }
    m
}

fn check_logits_2d(tape: &Tape, v: Var) -> KdResult<(usize, usize)> {
    let s = tape.shape(v);
    if s.len() != 2 || s[1] < 1 {
        return Err(KdError::ShapeMismatch {
            context: "logits must be B x K",
            expected: vec![0, 0],
            got: s.to_vec(),
        });
    }
    Ok((s[0], s[1]))
}

/// Batch-mean hard-label cross-entropy of student logits at temperature 1.
pub fn supervised_ce_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    labels: &[usize],
) -> KdResult<Var> {
    let (b, k) = check_logits_2d(tape, student_logits)?;
    if labels.len() != b {
        return Err(KdError::DimensionMismatch {
            context: "labels",
            expected: b,
            got: labels.len(),
        });
    }
    for &y in labels {
        if y >= k {
            return Err(KdError::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
    }
    let ls = tape.log_softmax_rows(student_logits, 1.0)?;
    let mask = tape.constant(one_hot(labels, k), vec![b, k])?;
    let picked = tape.mul(ls, mask)?;
    let total = tape.sum(picked);
    Ok(tape.scale(total, -1.0 / b as f64))
}

/// Vanilla KD: `alpha * CE + (1 - alpha) * tau^2 * KL(teacher || student)`,
/// with the KL taken between temperature-`tau` softmaxes and averaged over
/// the batch. Terms with a zero coefficient are skipped entirely.
pub fn vanilla_kd_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    hp: &KdHyperparams,
) -> KdResult<Var> {
    let (b, k) = check_logits_2d(tape, student_logits)?;
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(KdError::ShapeMismatch {
            context: "vanilla KD teacher logits",
            expected: tape.shape(student_logits).to_vec(),
            got: teacher_logits.shape().to_vec(),
        });
    }
    if hp.alpha == 1.0 {
        // Same code path as the supervised loss, bit for bit.
        return supervised_ce_on_tape(tape, student_logits, labels);
    }

    let tau = hp.tau;
    let mut teacher_p = vec![0.0; b * k];
    let mut teacher_lnp = vec![0.0; b * k];
    for r in 0..b {
        let p = temp_softmax(teacher_logits.row(r), tau)?;
        for c in 0..k {
            teacher_p[r * k + c] = p[c];
            teacher_lnp[r * k + c] = p[c].max(PROB_FLOOR).ln();
        }
    }
    let p_const = tape.constant(teacher_p, vec![b, k])?;
    let lnp_const = tape.constant(teacher_lnp, vec![b, k])?;
    let ls_tau = tape.log_softmax_rows(student_logits, tau)?;
    let diff = tape.sub(lnp_const, ls_tau)?;
    let weighted = tape.mul(p_const, diff)?;
    let kl_total = tape.sum(weighted);
    let kd_term = tape.scale(kl_total, (1.0 - hp.alpha) * tau * tau / b as f64);

    if hp.alpha == 0.0 {
        return Ok(kd_term);
    }
    let ce = supervised_ce_on_tape(tape, student_logits, labels)?;
    let ce_term = tape.scale(ce, hp.alpha);
    Ok(tape.add(ce_term, kd_term)?)
}

/// Direct logit matching: batch mean of the squared L2 distance between
/// student and teacher logit vectors.
pub fn mse_logit_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
) -> KdResult<Var> {
    let (b, _) = check_logits_2d(tape, student_logits)?;
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(KdError::ShapeMismatch {
            context: "logit MSE teacher logits",
            expected: tape.shape(student_logits).to_vec(),
            got: teacher_logits.shape().to_vec(),
        });
    }
    let t_const = tape.constant_from(teacher_logits);
    let diff = tape.sub(student_logits, t_const)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// Normalized KD: a teacher-weighted target CE term plus a non-target term
/// over the temperature-`tau` distributions renormalized on the K-1
/// non-target classes:
/// `mean_b [ -t_c ln(s_c) - gamma tau^2 sum_{k != c} N(t)_k ln(N(s)_k) ]`.
pub fn nkd_on_tape(
    tape: &mut Tape,
    student_logits: Var,
    teacher_logits: &Tensor,
    labels: &[usize],
    hp: &KdHyperparams,
) -> KdResult<Var> {
    let (b, k) = check_logits_2d(tape, student_logits)?;
    if k < 2 {
        return Err(KdError::TooFewClasses { classes: k });
    }
    if teacher_logits.shape() != tape.shape(student_logits) {
        return Err(KdError::ShapeMismatch {
            context: "NKD teacher logits",
            expected: tape.shape(student_logits).to_vec(),
            got: teacher_logits.shape().to_vec(),
        });
    }
    if labels.len() != b {
        return Err(KdError::DimensionMismatch {
            context: "labels",
            expected: b,
            got: labels.len(),
        });
    }
    for &y in labels {
        if y >= k {
            return Err(KdError::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
    }

    // Target term: -mean_b t_c ln(s_c), both sides at temperature 1.
    let mut target_weights = vec![0.0; b * k];
    for (r, &y) in labels.iter().enumerate() {
        let t1 = temp_softmax(teacher_logits.row(r), 1.0)?;
        target_weights[r * k + y] = t1[y];
    }
    let w_const = tape.constant(target_weights, vec![b, k])?;
    let ls1 = tape.log_softmax_rows(student_logits, 1.0)?;
    let picked = tape.mul(w_const, ls1)?;
    let target_total = tape.sum(picked);
    let target_term = tape.scale(target_total, -1.0 / b as f64);

    if hp.gamma == 0.0 {
        return Ok(target_term);
    }

    let tau = hp.tau;
    // Teacher non-target weights, renormalized so each row sums to 1.
    let mut nt_weights = vec![0.0; b * k];
    let mut nt_mask = vec![0.0; b * k];
    for (r, &y) in labels.iter().enumerate() {
        let t_tau = temp_softmax(teacher_logits.row(r), tau)?;
        let denom: f64 = t_tau
            .iter()
            .enumerate()
            .filter(|&(c, _)| c != y)
            .map(|(_, v)| v)
            .sum();
        for c in 0..k {
            if c != y {
                nt_weights[r * k + c] = t_tau[c] / denom.max(PROB_FLOOR);
                nt_mask[r * k + c] = 1.0;
            }
        }
    }

    // Student log of the renormalized non-target distribution:
    // ln N(s)_k = log_softmax(S, tau)_k - ln(sum_{j != c} softmax(S, tau)_j).
    let ls_tau = tape.log_softmax_rows(student_logits, tau)?;
    let s_tau = tape.exp(ls_tau);
    let mask_const = tape.constant(nt_mask, vec![b, k])?;
    let masked = tape.mul(s_tau, mask_const)?;
    let nt_sum = tape.row_sum(masked)?;
    let log_norm = tape.ln_clamped(nt_sum);
    let ln_nt = tape.sub_col(ls_tau, log_norm)?;
    let nt_w_const = tape.constant(nt_weights, vec![b, k])?;
    let weighted = tape.mul(nt_w_const, ln_nt)?;
    let nt_total = tape.sum(weighted);
    let nt_term = tape.scale(nt_total, -hp.gamma * tau * tau / b as f64);

    Ok(tape.add(target_term, nt_term)?)
}

/// Batch-mean MSE between a (projected) student feature map and the
/// teacher's: squared differences summed per sample, averaged over the
/// batch.
pub fn feature_mse_on_tape(
    tape: &mut Tape,
    projected_student: Var,
    teacher_features: &Tensor,
) -> KdResult<Var> {
    if tape.shape(projected_student) != teacher_features.shape() {
        return Err(KdError::ShapeMismatch {
            context: "feature MSE",
            expected: teacher_features.shape().to_vec(),
            got: tape.shape(projected_student).to_vec(),
        });
    }
    let b = teacher_features.shape()[0];
    let t_const = tape.constant_from(teacher_features);
    let diff = tape.sub(projected_student, t_const)?;
    let sq = tape.mul(diff, diff)?;
    let total = tape.sum(sq);
    Ok(tape.scale(total, 1.0 / b as f64))
}

// ---------------------------------------------------------------------------
// Projectors
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProjectorKind {
    /// Shapes already match; zero parameters.
    Identity,
    /// One linear layer on a pooled-token feature vector: `B x D_s -> B x D_t`.
    LinearCls,
    /// Reshape a token sequence to a channel grid and apply a 3x3
    /// convolution: `B x T x D -> B x C x H x W`.
    ConvReshape,
}

impl ProjectorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ProjectorKind::Identity => "identity",
            ProjectorKind::LinearCls => "linear_cls",
            ProjectorKind::ConvReshape => "conv_reshape",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "identity" => Some(ProjectorKind::Identity),
            "linear_cls" | "linear-cls" => Some(ProjectorKind::LinearCls),
            "conv_reshape" | "conv-reshape" => Some(ProjectorKind::ConvReshape),
            _ => None,
        }
    }
}

/// Trainable mapping from student feature shape to teacher feature shape.
///
/// Shapes are per-sample (no batch dimension). Parameters are initialized
/// uniformly in `±1/sqrt(fan_in)` from a seeded ChaCha8 stream, weights
/// before biases, so a (kind, shapes, seed) triple always yields the same
/// projector.
#[derive(Debug, Clone, PartialEq)]
pub struct Projector {
    kind: ProjectorKind,
    seed: u64,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    drop_pooled_token: bool,
    grid: Option<(usize, usize)>,
    params: Vec<(String, Tensor)>,
}

fn uniform_init(rng: &mut ChaCha8Rng, n: usize, fan_in: usize) -> Vec<f64> {
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

fn integer_sqrt(n: usize) -> Option<usize> {
    let r = (n as f64).sqrt().round() as usize;
    if r * r == n {
        Some(r)
    } else {
        None
    }
}

impl Projector {
    /// Build a projector for the given per-sample shapes.
    ///
    /// For `conv_reshape` the token count must form the teacher grid either
    /// directly (`T == H*W`) or after dropping one pooled token
    /// (`T - 1 == H*W`); when the teacher shape carries no grid (`[C]`), a
    /// square grid is inferred the same way.
    pub fn new(
        kind: ProjectorKind,
        student_shape: &[usize],
        teacher_shape: &[usize],
        seed: u64,
    ) -> KdResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match kind {
            ProjectorKind::Identity => {
                if student_shape != teacher_shape {
                    return Err(KdError::IncompatibleProjector {
                        reason: format!(
                            "identity requires equal shapes, got {student_shape:?} vs {teacher_shape:?}"
                        ),
                    });
                }
                Ok(Projector {
                    kind,
                    seed,
                    input_shape: student_shape.to_vec(),
                    output_shape: teacher_shape.to_vec(),
                    drop_pooled_token: false,
                    grid: None,
                    params: Vec::new(),
                })
            }
            ProjectorKind::LinearCls => {
                if student_shape.len() != 1 || teacher_shape.len() != 1 {
                    return Err(KdError::IncompatibleProjector {
                        reason: format!(
                            "linear_cls maps D_s -> D_t vectors, got {student_shape:?} vs {teacher_shape:?}"
                        ),
                    });
                }
                let (d_s, d_t) = (student_shape[0], teacher_shape[0]);
                let weight =
                    Tensor::new(uniform_init(&mut rng, d_s * d_t, d_s), vec![d_s, d_t])?;
                let bias = Tensor::new(uniform_init(&mut rng, d_t, d_s), vec![d_t])?;
                Ok(Projector {
                    kind,
                    seed,
                    input_shape: student_shape.to_vec(),
                    output_shape: teacher_shape.to_vec(),
                    drop_pooled_token: false,
                    grid: None,
                    params: vec![
                        ("weight".to_string(), weight),
                        ("bias".to_string(), bias),
                    ],
                })
            }
            ProjectorKind::ConvReshape => {
                if student_shape.len() != 2 {
                    return Err(KdError::IncompatibleProjector {
                        reason: format!(
                            "conv_reshape expects student tokens T x D, got {student_shape:?}"
                        ),
                    });
                }
                let (t, d) = (student_shape[0], student_shape[1]);
                let (c_out, grid) = match teacher_shape.len() {
                    1 => (teacher_shape[0], None),
                    3 => (teacher_shape[0], Some((teacher_shape[1], teacher_shape[2]))),
                    _ => {
                        return Err(KdError::IncompatibleProjector {
                            reason: format!(
                                "conv_reshape teacher shape must be [C] or [C, H, W], got {teacher_shape:?}"
                            ),
                        })
                    }
                };
                let (drop, h, w) = match grid {
                    Some((h, w)) => {
                        if t == h * w {
                            (false, h, w)
                        } else if t >= 1 && t - 1 == h * w {
                            (true, h, w)
                        } else {
                            return Err(KdError::IncompatibleProjector {
                                reason: format!(
                                    "token count {t} does not match teacher grid {h}x{w} (with or without a pooled token)"
                                ),
                            });
                        }
                    }
                    None => {
                        if let Some(r) = integer_sqrt(t) {
                            (false, r, r)
                        } else if let Some(r) = integer_sqrt(t.saturating_sub(1)) {
                            if t == 0 || r == 0 {
                                return Err(KdError::IncompatibleProjector {
                                    reason: format!("degenerate token count {t}"),
                                });
                            }
                            (true, r, r)
                        } else {
                            return Err(KdError::IncompatibleProjector {
                                reason: format!(
                                    "token count {t} is not square even after dropping a pooled token"
                                ),
                            });
                        }
                    }
                };
                let weight = Tensor::new(
                    uniform_init(&mut rng, c_out * d * 9, d * 9),
                    vec![c_out, d, 3, 3],
                )?;
                let bias = Tensor::new(uniform_init(&mut rng, c_out, d * 9), vec![c_out])?;
                Ok(Projector {
                    kind,
                    seed,
                    input_shape: student_shape.to_vec(),
                    output_shape: vec![c_out, h, w],
                    drop_pooled_token: drop,
                    grid: Some((h, w)),
                    params: vec![
                        ("conv.weight".to_string(), weight),
                        ("conv.bias".to_string(), bias),
                    ],
                })
            }
        }
    }

    pub fn kind(&self) -> ProjectorKind {
        self.kind
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn drops_pooled_token(&self) -> bool {
        self.drop_pooled_token
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn param_values_mut(&mut self, idx: usize) -> &mut [f64] {
        self.params[idx].1.values_mut()
    }

    /// Replace all parameter tensors (used by deserialization and SGD).
    pub fn set_params(&mut self, params: Vec<(String, Tensor)>) -> KdResult<()> {
        if params.len() != self.params.len() {
            return Err(KdError::IncompatibleProjector {
                reason: format!(
                    "expected {} parameter tensors, got {}",
                    self.params.len(),
                    params.len()
                ),
            });
        }
        for ((_, cur), (_, new)) in self.params.iter().zip(&params) {
            if cur.shape() != new.shape() {
                return Err(KdError::IncompatibleProjector {
                    reason: format!(
                        "parameter shape {:?} does not match expected {:?}",
                        new.shape(),
                        cur.shape()
                    ),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Load the parameters onto a tape (as variables when `trainable`) and
    /// return a bound handle for applying the projection.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundProjector {
        let param_vars = self
            .params
            .iter()
            .map(|(_, t)| {
                if trainable {
                    tape.var_from(t)
                } else {
                    tape.constant_from(t)
                }
            })
            .collect();
        BoundProjector {
            kind: self.kind,
            input_shape: self.input_shape.clone(),
            output_shape: self.output_shape.clone(),
            drop_pooled_token: self.drop_pooled_token,
            grid: self.grid,
            param_vars,
        }
    }

    /// Apply without gradients, returning a plain tensor.
    pub fn apply_plain(&self, input: &Tensor) -> KdResult<Tensor> {
        let mut tape = Tape::new();
        let x = tape.constant_from(input);
        let bound = self.bind(&mut tape, false);
        let out = bound.apply(&mut tape, x)?;
        Ok(tape.snapshot(out))
    }
}

/// A projector whose parameters live on a tape.
#[derive(Debug, Clone)]
pub struct BoundProjector {
    kind: ProjectorKind,
    input_shape: Vec<usize>,
    output_shape: Vec<usize>,
    drop_pooled_token: bool,
    grid: Option<(usize, usize)>,
    param_vars: Vec<Var>,
}

impl BoundProjector {
    pub fn param_vars(&self) -> &[Var] {
        &self.param_vars
    }

    pub fn apply(&self, tape: &mut Tape, input: Var) -> KdResult<Var> {
        let in_shape = tape.shape(input).to_vec();
        if in_shape.len() != self.input_shape.len() + 1
            || in_shape[1..] != self.input_shape[..]
        {
            return Err(KdError::ShapeMismatch {
                context: "projector input",
                expected: self.input_shape.clone(),
                got: in_shape,
            });
        }
        match self.kind {
            ProjectorKind::Identity => Ok(input),
            ProjectorKind::LinearCls => {
                let z = tape.matmul(input, self.param_vars[0])?;
                Ok(tape.add_bias(z, self.param_vars[1])?)
            }
            ProjectorKind::ConvReshape => {
                let (h, w) = self.grid.expect("conv_reshape always carries a grid");
                let tokens = if self.drop_pooled_token {
                    tape.drop_first_token(input)?
                } else {
                    input
                };
                let grid = tape.tokens_to_grid(tokens, h, w)?;
                Ok(tape.conv3x3(grid, self.param_vars[0], self.param_vars[1])?)
            }
        }
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }
}

/// Spec'd constructor name for [`Projector::new`].
pub fn make_projector(
    kind: ProjectorKind,
    student_shape: &[usize],
    teacher_shape: &[usize],
    seed: u64,
) -> KdResult<Projector> {
    Projector::new(kind, student_shape, teacher_shape, seed)
}

// ---------------------------------------------------------------------------
// Batch-level losses (fresh tape per call)
// ---------------------------------------------------------------------------

fn eval_logit_loss<F>(batch: &DistillBatch, build: F) -> KdResult<f64>
where
    F: FnOnce(&mut Tape, Var) -> KdResult<Var>,
{
    let mut tape = Tape::new();
    let s = tape.var_from(&batch.student_logits);
    let loss = build(&mut tape, s)?;
    Ok(tape.scalar_value(loss))
}

pub fn vanilla_kd_loss(batch: &DistillBatch, hp: &KdHyperparams) -> KdResult<f64> {
    eval_logit_loss(batch, |tape, s| {
        vanilla_kd_on_tape(tape, s, &batch.teacher_logits, &batch.labels, hp)
    })
}

pub fn mse_logit_loss(batch: &DistillBatch) -> KdResult<f64> {
    eval_logit_loss(batch, |tape, s| {
        mse_logit_on_tape(tape, s, &batch.teacher_logits)
    })
}

pub fn nkd_loss(batch: &DistillBatch, hp: &KdHyperparams) -> KdResult<f64> {
    eval_logit_loss(batch, |tape, s| {
        nkd_on_tape(tape, s, &batch.teacher_logits, &batch.labels, hp)
    })
}

pub fn fitnet_loss(pair: &FeaturePair, projector: &Projector) -> KdResult<f64> {
    let mut tape = Tape::new();
    let s = tape.var_from(&pair.student_features);
    let bound = projector.bind(&mut tape, false);
    let projected = bound.apply(&mut tape, s)?;
    let loss = feature_mse_on_tape(&mut tape, projected, &pair.teacher_features)?;
    Ok(tape.scalar_value(loss))
}

/// SimKD training objective: feature MSE at the penultimate layer, after
/// projection. Identical in form to the FitNet hint loss; the difference
/// is the inference path ([`simkd_infer`]).
pub fn simkd_loss(pair: &FeaturePair, projector: &Projector) -> KdResult<f64> {
    fitnet_loss(pair, projector)
}

/// Frozen linear classifier head (`weight: D x K`, `bias: K`).
#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearClassifier {
    pub fn new(weight: Tensor, bias: Tensor) -> KdResult<Self> {
        if weight.shape().len() != 2 || bias.shape().len() != 1 || bias.shape()[0] != weight.shape()[1]
        {
            return Err(KdError::ShapeMismatch {
                context: "linear classifier",
                expected: weight.shape().to_vec(),
                got: bias.shape().to_vec(),
            });
        }
        Ok(LinearClassifier { weight, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.weight.shape()[1]
    }
}

/// Student inference through the frozen teacher classifier: project the
/// student's penultimate features, flatten if necessary, and apply the
/// teacher's final linear layer. The classifier is never modified.
pub fn simkd_infer(
    student_penultimate: &Tensor,
    projector: &Projector,
    teacher_classifier: &LinearClassifier,
) -> KdResult<Tensor> {
    let projected = projector.apply_plain(student_penultimate)?;
    let b = projected.shape()[0];
    let feat_dim: usize = projected.shape()[1..].iter().product();
    if feat_dim != teacher_classifier.input_dim() {
        return Err(KdError::DimensionMismatch {
            context: "simkd_infer classifier input",
            expected: teacher_classifier.input_dim(),
            got: feat_dim,
        });
    }
    let mut tape = Tape::new();
    let x = tape.constant(projected.values().to_vec(), vec![b, feat_dim])?;
    let w = tape.constant_from(&teacher_classifier.weight);
    let bias = tape.constant_from(&teacher_classifier.bias);
    let z = tape.matmul(x, w)?;
    let logits = tape.add_bias(z, bias)?;
    Ok(tape.snapshot(logits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: f64, b: f64, tol: f64) {
        assert!((a - b).abs() < tol, "{a} vs {b} (tol {tol})");
    }

    fn batch(student: Vec<f64>, teacher: Vec<f64>, shape: Vec<usize>, labels: Vec<usize>) -> DistillBatch {
        DistillBatch::new(
            Tensor::new(student, shape.clone()).unwrap(),
            Tensor::new(teacher, shape).unwrap(),
            labels,
        )
        .unwrap()
    }

    #[test]
    fn vanilla_zero_when_teacher_equals_student_alpha_zero() {
        let b = batch(
            vec![0.3, -1.0, 2.0, 0.1, 0.1, 0.1],
            vec![0.3, -1.0, 2.0, 0.1, 0.1, 0.1],
            vec![2, 3],
            vec![2, 0],
        );
        for tau in [1.0, 2.5, 7.0] {
            let hp = KdHyperparams::new(0.0, tau, 0.0).unwrap();
            assert_close(vanilla_kd_loss(&b, &hp).unwrap(), 0.0, 1e-10);
        }
    }

    #[test]
    fn vanilla_alpha_one_is_supervised_ce_bit_for_bit() {
        let b = batch(
            vec![0.5, -0.2, 1.5, -1.0, 0.0, 0.7],
            vec![9.0, -3.0, 0.0, 1.0, 1.0, 1.0],
            vec![2, 3],
            vec![1, 2],
        );
        let hp = KdHyperparams::new(1.0, 2.5, 0.0).unwrap();
        let kd = vanilla_kd_loss(&b, &hp).unwrap();
        let mut tape = Tape::new();
        let s = tape.var_from(&b.student_logits);
        let ce = supervised_ce_on_tape(&mut tape, s, &b.labels).unwrap();
        assert_eq!(kd, tape.scalar_value(ce));
    }

    #[test]
    fn vanilla_worked_example() {
        // B=1, K=2, student [0,0], teacher [0, ln 3], alpha=0, tau=1:
        // KL([0.25, 0.75] || [0.5, 0.5]).
        let b = batch(
            vec![0.0, 0.0],
            vec![0.0, 3f64.ln()],
            vec![1, 2],
            vec![0],
        );
        let hp = KdHyperparams::new(0.0, 1.0, 0.0).unwrap();
        assert_close(
            vanilla_kd_loss(&b, &hp).unwrap(),
            0.13081203594113697,
            1e-12,
        );
    }

    #[test]
    fn mse_examples() {
        let same = batch(vec![1.0, 2.0], vec![1.0, 2.0], vec![1, 2], vec![0]);
        assert_eq!(mse_logit_loss(&same).unwrap(), 0.0);

        let b = batch(vec![1.0, 2.0], vec![0.0, 0.0], vec![1, 2], vec![0]);
        assert_close(mse_logit_loss(&b).unwrap(), 5.0, 1e-12);
    }

    #[test]
    fn mse_symmetric_in_value() {
        let a = batch(
            vec![1.0, -2.0, 0.3, 0.9],
            vec![0.5, 0.5, -1.0, 2.0],
            vec![2, 2],
            vec![0, 1],
        );
        let swapped = batch(
            a.teacher_logits.values().to_vec(),
            a.student_logits.values().to_vec(),
            vec![2, 2],
            vec![0, 1],
        );
        assert_eq!(mse_logit_loss(&a).unwrap(), mse_logit_loss(&swapped).unwrap());
    }

    #[test]
    fn nkd_gamma_zero_is_teacher_weighted_target_ce() {
        let b = batch(
            vec![0.2, 1.0, -0.4, 0.0, 0.5, 0.1],
            vec![1.0, 0.3, -0.7, 0.2, 0.2, 1.4],
            vec![2, 3],
            vec![1, 0],
        );
        let hp = KdHyperparams::new(0.5, 2.0, 0.0).unwrap();
        let loss = nkd_loss(&b, &hp).unwrap();
        let mut expect = 0.0;
        for (r, &y) in b.labels.iter().enumerate() {
            let t = temp_softmax(b.teacher_logits.row(r), 1.0).unwrap();
            let s = temp_softmax(b.student_logits.row(r), 1.0).unwrap();
            expect += -t[y] * s[y].ln();
        }
        expect /= b.batch_size() as f64;
        assert_close(loss, expect, 1e-10);
    }

    #[test]
    fn nkd_uniform_worked_example() {
        // teacher == student, K=3, uniform logits, gamma=1, tau=1:
        // (1/3) ln 3 + ln 2.
        let b = batch(
            vec![0.0, 0.0, 0.0],
            vec![0.0, 0.0, 0.0],
            vec![1, 3],
            vec![0],
        );
        let hp = KdHyperparams::new(0.5, 1.0, 1.0).unwrap();
        assert_close(nkd_loss(&b, &hp).unwrap(), 1.0593512767826485, 1e-12);
    }

    #[test]
    fn nkd_rejects_binary_free_classes() {
        let b = batch(vec![0.0], vec![0.0], vec![1, 1], vec![0]);
        let hp = KdHyperparams::default();
        assert!(matches!(
            nkd_loss(&b, &hp),
            Err(KdError::TooFewClasses { .. })
        ));
    }

    #[test]
    fn nkd_nontarget_weights_sum_to_one() {
        // The renormalized teacher weights over non-target classes are a
        // probability vector by construction; verify through the loss by
        // checking gamma-linearity: loss(gamma) - loss(0) scales with gamma.
        let b = batch(
            vec![0.2, 1.0, -0.4, 0.8],
            vec![1.0, 0.3, -0.7, 0.5],
            vec![1, 4],
            vec![2],
        );
        let l0 = nkd_loss(&b, &KdHyperparams::new(0.5, 2.0, 0.0).unwrap()).unwrap();
        let l1 = nkd_loss(&b, &KdHyperparams::new(0.5, 2.0, 1.0).unwrap()).unwrap();
        let l2 = nkd_loss(&b, &KdHyperparams::new(0.5, 2.0, 2.0).unwrap()).unwrap();
        assert_close(l2 - l0, 2.0 * (l1 - l0), 1e-10);
    }

    #[test]
    fn projector_param_counts() {
        let id = Projector::new(ProjectorKind::Identity, &[8], &[8], 1).unwrap();
        assert_eq!(id.param_count(), 0);

        let lin = Projector::new(ProjectorKind::LinearCls, &[4], &[6], 1).unwrap();
        assert_eq!(lin.param_count(), 30);

        let err = Projector::new(ProjectorKind::Identity, &[4], &[6], 1);
        assert!(err.is_err());
    }

    #[test]
    fn projector_conv_vit_grid() {
        // 196 tokens at width 192 projecting to 768 channels: a 14x14 grid.
        let p = Projector::new(ProjectorKind::ConvReshape, &[196, 192], &[768], 7).unwrap();
        assert_eq!(p.output_shape(), &[768, 14, 14]);
        assert!(!p.drops_pooled_token());

        // 197 tokens: one pooled token dropped first.
        let p = Projector::new(ProjectorKind::ConvReshape, &[197, 192], &[768], 7).unwrap();
        assert_eq!(p.output_shape(), &[768, 14, 14]);
        assert!(p.drops_pooled_token());

        // Non-square token count.
        assert!(Projector::new(ProjectorKind::ConvReshape, &[7, 192], &[768], 7).is_err());
    }

    #[test]
    fn projector_conv_shape_contract() {
        // B=1, T=5 (one pooled token dropped), D=3 -> B x C x 2 x 2.
        let p = Projector::new(ProjectorKind::ConvReshape, &[5, 3], &[4], 11).unwrap();
        let input = Tensor::new(vec![0.1; 15], vec![1, 5, 3]).unwrap();
        let out = p.apply_plain(&input).unwrap();
        assert_eq!(out.shape(), &[1, 4, 2, 2]);
    }

    #[test]
    fn projector_deterministic_under_seed() {
        let a = Projector::new(ProjectorKind::LinearCls, &[4], &[6], 42).unwrap();
        let b = Projector::new(ProjectorKind::LinearCls, &[4], &[6], 42).unwrap();
        assert_eq!(a, b);
        let c = Projector::new(ProjectorKind::LinearCls, &[4], &[6], 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn fitnet_identity_examples() {
        let feat = Tensor::new(vec![0.5, -1.0, 2.0, 0.0, 1.0, 1.5], vec![2, 3]).unwrap();
        let p = Projector::new(ProjectorKind::Identity, &[3], &[3], 1).unwrap();
        let pair = FeaturePair::new(feat.clone(), feat.clone(), 1).unwrap();
        assert_eq!(fitnet_loss(&pair, &p).unwrap(), 0.0);

        // student = teacher + 1 everywhere: loss = feature dimensionality.
        let shifted =
            Tensor::new(feat.values().iter().map(|v| v + 1.0).collect(), vec![2, 3]).unwrap();
        let pair = FeaturePair::new(shifted, feat, 1).unwrap();
        assert_close(fitnet_loss(&pair, &p).unwrap(), 3.0, 1e-12);
    }

    #[test]
    fn simkd_identity_on_matching_features_is_zero() {
        let feat = Tensor::new(vec![1.0, 2.0, 3.0, 4.0], vec![2, 2]).unwrap();
        let p = Projector::new(ProjectorKind::Identity, &[2], &[2], 1).unwrap();
        let pair = FeaturePair::new(feat.clone(), feat, 2).unwrap();
        assert_close(simkd_loss(&pair, &p).unwrap(), 0.0, 1e-10);
    }

    #[test]
    fn simkd_infer_identity_matches_teacher_logits() {
        let penult = Tensor::new(vec![0.5, -0.5, 1.0, 2.0], vec![2, 2]).unwrap();
        let p = Projector::new(ProjectorKind::Identity, &[2], &[2], 1).unwrap();
        let head = LinearClassifier::new(
            Tensor::new(vec![1.0, 0.0, -1.0, 0.0, 1.0, 1.0], vec![2, 3]).unwrap(),
            Tensor::new(vec![0.1, 0.2, 0.3], vec![3]).unwrap(),
        )
        .unwrap();
        let student = simkd_infer(&penult, &p, &head).unwrap();
        // Teacher applying its own head to the same features.
        let teacher = simkd_infer(&penult, &p, &head).unwrap();
        assert_eq!(student.values(), teacher.values());
        assert_eq!(student.shape(), &[2, 3]);
    }

    #[test]
    fn simkd_infer_zero_features_zero_bias_gives_uniform() {
        let penult = Tensor::new(vec![0.0; 4], vec![1, 4]).unwrap();
        let p = Projector::new(ProjectorKind::Identity, &[4], &[4], 1).unwrap();
        let head = LinearClassifier::new(
            Tensor::new(vec![0.3; 12], vec![4, 3]).unwrap(),
            Tensor::new(vec![0.0; 3], vec![3]).unwrap(),
        )
        .unwrap();
        let logits = simkd_infer(&penult, &p, &head).unwrap();
        assert_eq!(logits.values(), &[0.0, 0.0, 0.0]);
        let probs = temp_softmax(logits.values(), 1.0).unwrap();
        for v in probs {
            assert_close(v, 1.0 / 3.0, 1e-12);
        }
    }

    #[test]
    fn simkd_infer_rejects_dim_mismatch() {
        let penult = Tensor::new(vec![0.0; 4], vec![1, 4]).unwrap();
        let p = Projector::new(ProjectorKind::Identity, &[4], &[4], 1).unwrap();
        let head = LinearClassifier::new(
            Tensor::new(vec![0.3; 9], vec![3, 3]).unwrap(),
            Tensor::new(vec![0.0; 3], vec![3]).unwrap(),
        )
        .unwrap();
        assert!(matches!(
            simkd_infer(&penult, &p, &head),
            Err(KdError::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn teacher_receives_no_gradient() {
        let b = batch(
            vec![0.5, -0.2, 1.5, -1.0, 0.0, 0.7],
            vec![1.0, 2.0, -1.0, 0.3, 0.3, 0.3],
            vec![2, 3],
            vec![1, 2],
        );
        let hp = KdHyperparams::new(0.4, 2.0, 1.0).unwrap();
        let mut tape = Tape::new();
        let s = tape.var_from(&b.student_logits);
        let t_const = tape.constant_from(&b.teacher_logits);
        // teacher participates as a constant even when placed on the tape
        let _ = t_const;
        let loss = vanilla_kd_on_tape(&mut tape, s, &b.teacher_logits, &b.labels, &hp).unwrap();
        tape.backward(loss).unwrap();
        assert!(tape.grad(t_const).is_none());
        assert!(tape.grad(s).is_some());
    }
}
