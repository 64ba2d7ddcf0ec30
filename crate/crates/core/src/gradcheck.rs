//! Randomized gradient verification: every analytic loss gradient is
//! compared against central finite differences on small random instances.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::kd::{
    feature_mse_on_tape, fitnet_loss, mse_logit_on_tape, mse_logit_loss, nkd_loss, nkd_on_tape,
    vanilla_kd_loss, vanilla_kd_on_tape, DistillBatch, KdError, KdHyperparams, KdResult,
    Projector, ProjectorKind,
};
use crate::tensor::{finite_difference_grad, max_relative_error, Tape, Tensor};

/// Finite-difference step used by default.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Acceptance bound on the max guarded relative error.
pub const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossName {
    Vanilla,
    Mse,
    Nkd,
    Fitnet,
    Simkd,
}

impl LossName {
    pub const ALL: [LossName; 5] = [
        LossName::Vanilla,
        LossName::Mse,
        LossName::Nkd,
        LossName::Fitnet,
        LossName::Simkd,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            LossName::Vanilla => "vanilla",
            LossName::Mse => "mse",
            LossName::Nkd => "nkd",
            LossName::Fitnet => "fitnet",
            LossName::Simkd => "simkd",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "vanilla" => Some(LossName::Vanilla),
            "mse" => Some(LossName::Mse),
            "nkd" => Some(LossName::Nkd),
            "fitnet" => Some(LossName::Fitnet),
            "simkd" => Some(LossName::Simkd),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub loss: LossName,
    pub trials: usize,
    pub max_rel_err: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRAD_TOLERANCE
    }
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>, lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new((0..n).map(|_| rng.gen_range(lo..hi)).collect(), shape)
        .expect("shape matches generated length")
}

fn random_batch(rng: &mut ChaCha8Rng) -> DistillBatch {
    let b = rng.gen_range(1..=4usize);
    let k = rng.gen_range(2..=8usize);
    DistillBatch::new(
        random_tensor(rng, vec![b, k], -3.0, 3.0),
        random_tensor(rng, vec![b, k], -3.0, 3.0),
        (0..b).map(|_| rng.gen_range(0..k)).collect(),
    )
    .expect("generated batch is consistent")
}

fn random_hp(rng: &mut ChaCha8Rng) -> KdHyperparams {
    KdHyperparams::new(
        rng.gen_range(0.0..=1.0),
        rng.gen_range(1.0..4.0),
        rng.gen_range(0.0..2.0),
    )
    .expect("generated hyperparameters are in range")
}

/// Analytic gradient of a logit loss with respect to the student logits.
fn logit_loss_grad<F>(batch: &DistillBatch, build: F) -> KdResult<Vec<f64>>
where
    F: FnOnce(&mut Tape, crate::tensor::Var) -> KdResult<crate::tensor::Var>,
{
    let mut tape = Tape::new();
    let s = tape.var_from(&batch.student_logits);
    let loss = build(&mut tape, s)?;
    tape.backward(loss)?;
    Ok(tape
        .grad(s)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; batch.student_logits.len()]))
}

fn with_student(batch: &DistillBatch, values: &[f64]) -> DistillBatch {
    DistillBatch::new(
        Tensor::new(values.to_vec(), batch.student_logits.shape().to_vec()).unwrap(),
        batch.teacher_logits.clone(),
        batch.labels.clone(),
    )
    .unwrap()
}

fn check_logit_loss_trial(
    name: LossName,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> KdResult<f64> {
    let batch = random_batch(rng);
    let hp = random_hp(rng);
    let analytic = match name {
        LossName::Vanilla => logit_loss_grad(&batch, |t, s| {
            vanilla_kd_on_tape(t, s, &batch.teacher_logits, &batch.labels, &hp)
        })?,
        LossName::Mse => {
            logit_loss_grad(&batch, |t, s| mse_logit_on_tape(t, s, &batch.teacher_logits))?
        }
        LossName::Nkd => logit_loss_grad(&batch, |t, s| {
            nkd_on_tape(t, s, &batch.teacher_logits, &batch.labels, &hp)
        })?,
        _ => unreachable!("feature losses take the other path"),
    };
    let f = |x: &[f64]| {
        let probe = with_student(&batch, x);
        match name {
            LossName::Vanilla => vanilla_kd_loss(&probe, &hp).unwrap(),
            LossName::Mse => mse_logit_loss(&probe).unwrap(),
            LossName::Nkd => nkd_loss(&probe, &hp).unwrap(),
            _ => unreachable!(),
        }
    };
    let fd = finite_difference_grad(f, batch.student_logits.values(), eps);
    Ok(max_relative_error(&analytic, &fd))
}

/// Analytic loss value and gradients (student features, then one gradient
/// vector per projector parameter tensor).
fn feature_loss_grads(
    student: &Tensor,
    teacher: &Tensor,
    projector: &Projector,
) -> KdResult<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let s = tape.var_from(student);
    let bound = projector.bind(&mut tape, true);
    let projected = bound.apply(&mut tape, s)?;
    let loss = feature_mse_on_tape(&mut tape, projected, teacher)?;
    tape.backward(loss)?;
    let s_grad = tape
        .grad(s)
        .map(|g| g.to_vec())
        .unwrap_or_else(|| vec![0.0; student.len()]);
    let p_grads = bound
        .param_vars()
        .iter()
        .zip(projector.params())
        .map(|(v, (_, t))| {
            tape.grad(*v)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; t.len()])
        })
        .collect();
    Ok((s_grad, p_grads))
}

fn check_feature_loss_trial(
    name: LossName,
    rng: &mut ChaCha8Rng,
    eps: f64,
) -> KdResult<f64> {
    let b = rng.gen_range(1..=4usize);
    // SimKD alternates between the linear and conv projector variants;
    // FitNet alternates linear and identity.
    let conv = name == LossName::Simkd && rng.gen_bool(0.5);
    let (student, teacher, projector) = if conv {
        let d = rng.gen_range(1..=3usize);
        let c = rng.gen_range(1..=3usize);
        let t = *[4usize, 5, 9, 10].get(rng.gen_range(0..4)).unwrap();
        let projector = Projector::new(ProjectorKind::ConvReshape, &[t, d], &[c], rng.gen())?;
        let out = projector.output_shape().to_vec();
        let teacher_shape = std::iter::once(b).chain(out).collect::<Vec<_>>();
        (
            random_tensor(rng, vec![b, t, d], -1.0, 1.0),
            random_tensor(rng, teacher_shape, -1.0, 1.0),
            projector,
        )
    } else {
        let d_s = rng.gen_range(1..=8usize);
        let identity = name == LossName::Fitnet && rng.gen_bool(0.3);
        let d_t = if identity { d_s } else { rng.gen_range(1..=8usize) };
        let kind = if identity {
            ProjectorKind::Identity
        } else {
            ProjectorKind::LinearCls
        };
        (
            random_tensor(rng, vec![b, d_s], -1.0, 1.0),
            random_tensor(rng, vec![b, d_t], -1.0, 1.0),
            Projector::new(kind, &[d_s], &[d_t], rng.gen())?,
        )
    };

    let (s_grad, p_grads) = feature_loss_grads(&student, &teacher, &projector)?;
    let mut worst: f64 = 0.0;

    // Student-feature block.
    let f_student = |x: &[f64]| {
        let probe = Tensor::new(x.to_vec(), student.shape().to_vec()).unwrap();
        let pair = crate::kd::FeaturePair::new(probe, teacher.clone(), 0).unwrap();
        fitnet_loss(&pair, &projector).unwrap()
    };
    let fd = finite_difference_grad(f_student, student.values(), eps);
    worst = worst.max(max_relative_error(&s_grad, &fd));

    // Each projector parameter block.
    for (idx, (_, param)) in projector.params().iter().enumerate() {
        let f_param = |x: &[f64]| {
            let mut probe = projector.clone();
            probe.param_values_mut(idx).copy_from_slice(x);
            let pair =
                crate::kd::FeaturePair::new(student.clone(), teacher.clone(), 0).unwrap();
            fitnet_loss(&pair, &probe).unwrap()
        };
        let fd = finite_difference_grad(f_param, param.values(), eps);
        worst = worst.max(max_relative_error(&p_grads[idx], &fd));
    }
    Ok(worst)
}

/// Run `trials` random instances of one loss and report the worst guarded
/// relative error between analytic and finite-difference gradients.
pub fn check_loss(name: LossName, trials: usize, eps: f64, seed: u64) -> KdResult<GradcheckReport> {
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(KdError::InvalidHyperparam {
            name: "eps",
            value: eps,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max_rel_err: f64 = 0.0;
    for _ in 0..trials {
        let err = match name {
            LossName::Vanilla | LossName::Mse | LossName::Nkd => {
                check_logit_loss_trial(name, &mut rng, eps)?
            }
            LossName::Fitnet | LossName::Simkd => {
                check_feature_loss_trial(name, &mut rng, eps)?
            }
        };
        max_rel_err = max_rel_err.max(err);
    }
    Ok(GradcheckReport {
        loss: name,
        trials,
        max_rel_err,
    })
}
