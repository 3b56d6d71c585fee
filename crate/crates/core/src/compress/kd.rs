use crate::models::Model;
use crate::pipeline::{fit_with, logits_all, FeatureSet, History, PipelineError, TrainOptions};
use crate::tensor_nn::{log_softmax_rows, softmax_cross_entropy, NnError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillConfig {
    pub temperature: f64,
    /// Weight of the teacher term; `0` is plain cross-entropy.
    pub lambda: f64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            lambda: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KdLoss {
    pub loss: f64,
    pub ce: f64,
    /// Mean `KL(teacher_T || student_T)`, before the `T^2` factor.
    pub kl: f64,
    /// Gradient w.r.t. the student logits.
    pub grad: Tensor,
}

fn scaled(logits: &Tensor, t: f64) -> Result<Tensor> {
    Tensor::new(logits.shape(), logits.data().iter().map(|v| v / t).collect())
}

/// `(1 - λ)·CE(student, labels) + λ·T²·KL(softmax(teacher/T) || softmax(student/T))`,
/// averaged over rows, with its exact gradient w.r.t. the student logits.
pub fn kd_loss(
    student_logits: &Tensor,
    teacher_logits: &Tensor,
    labels: &[usize],
    temperature: f64,
    lambda: f64,
) -> Result<KdLoss> {
    if student_logits.shape() != teacher_logits.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "student {:?} vs teacher {:?}",
            student_logits.shape(),
            teacher_logits.shape()
        )));
    }
    if !(temperature > 0.0) {
        return Err(NnError::ShapeMismatch(format!("temperature {temperature} must be positive")));
    }
    let (n, k) = student_logits.dims2()?;
    let (ce, ce_grad) = softmax_cross_entropy(student_logits, labels)?;
    let log_s = log_softmax_rows(&scaled(student_logits, temperature)?)?;
    let log_t = log_softmax_rows(&scaled(teacher_logits, temperature)?)?;
    let mut kl = 0.0;
    let mut grad = vec![0.0; n * k];
    for i in 0..n * k {
        let pt = log_t.data()[i].exp();
        let ps = log_s.data()[i].exp();
        kl += pt * (log_t.data()[i] - log_s.data()[i]);
        // d(T² KL)/dz = T (p_s - p_t), averaged over rows
        grad[i] = (1.0 - lambda) * ce_grad.data()[i]
            + lambda * temperature * (ps - pt) / n as f64;
    }
    let kl = (kl / n as f64).max(0.0);
    Ok(KdLoss {
        loss: (1.0 - lambda) * ce + lambda * temperature * temperature * kl,
        ce,
        kl,
        grad: Tensor::new(&[n, k], grad)?,
    })
}

/// Trains `student` with Adam on [`kd_loss`] against a frozen teacher whose
/// logits are computed once in eval mode. The teacher is only borrowed.
pub fn distill(
    teacher: &Model,
    mut student: Model,
    train: &FeatureSet,
    eval: Option<&FeatureSet>,
    opts: &TrainOptions,
    cfg: &DistillConfig,
) -> std::result::Result<(Model, History), PipelineError> {
    if train.is_empty() {
        return Err(PipelineError::EmptyDataset);
    }
    if teacher.n_classes() != student.n_classes() {
        return Err(PipelineError::Config(format!(
            "teacher has {} classes, student {}",
            teacher.n_classes(),
            student.n_classes()
        )));
    }
    if opts.epochs == 0 {
        return Ok((student, History::default()));
    }
    let teacher_logits = logits_all(teacher, train)?;
    let k = teacher.n_classes();
    let mut loss = |logits: &Tensor, idx: &[usize]| {
        let mut t = Vec::with_capacity(idx.len() * k);
        for &i in idx {
            t.extend_from_slice(&teacher_logits.data()[i * k..(i + 1) * k]);
        }
        let t = Tensor::new(&[idx.len(), k], t)?;
        let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
        let r = kd_loss(logits, &t, &labels, cfg.temperature, cfg.lambda)?;
        Ok((r.loss, r.grad))
    };
    let history = fit_with(&mut student, train, opts, eval, &mut loss)?;
    Ok((student, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor_nn::{rel_err, softmax_rows};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn logits(n: usize, k: usize, seed: u64, scale: f64) -> Tensor {
        Tensor::uniform(&[n, k], scale, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    /// Direct definition with no shared code: softmax, then sums of logs.
    fn reference(s: &Tensor, t: &Tensor, labels: &[usize], temp: f64, lambda: f64) -> f64 {
        let (n, k) = s.dims2().unwrap();
        let mut ce = 0.0;
        let mut kl = 0.0;
        for i in 0..n {
            let row = &s.data()[i * k..(i + 1) * k];
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            ce -= (row[labels[i]].exp() / z).ln();
            let zs: f64 = row.iter().map(|v| (v / temp).exp()).sum();
            let trow = &t.data()[i * k..(i + 1) * k];
            let zt: f64 = trow.iter().map(|v| (v / temp).exp()).sum();
            for j in 0..k {
                let pt = (trow[j] / temp).exp() / zt;
                let ps = (row[j] / temp).exp() / zs;
                kl += pt * (pt / ps).ln();
            }
        }
        (1.0 - lambda) * ce / n as f64 + lambda * temp * temp * kl / n as f64
    }

    #[test]
    fn identical_logits_zero_the_kl_term() {
        let s = logits(5, 6, 1, 3.0);
        let labels = [0, 1, 2, 3, 4];
        let r = kd_loss(&s, &s, &labels, 2.0, 0.5).unwrap();
        assert_eq!(r.kl, 0.0);
        let (ce, _) = softmax_cross_entropy(&s, &labels).unwrap();
        assert_eq!(r.loss, 0.5 * ce);
    }

    #[test]
    fn lambda_zero_is_cross_entropy() {
        let s = logits(4, 3, 2, 2.0);
        let t = logits(4, 3, 3, 2.0);
        let labels = [2, 0, 1, 1];
        let r = kd_loss(&s, &t, &labels, 2.0, 0.0).unwrap();
        let (ce, g) = softmax_cross_entropy(&s, &labels).unwrap();
        assert_eq!(r.loss, ce);
        assert_eq!(r.grad, g);
        let probs = softmax_rows(&s).unwrap();
        let (ce2, _) = crate::tensor_nn::cross_entropy(&probs, &labels).unwrap();
        assert!((ce - ce2).abs() < 1e-12);
    }

    #[test]
    fn matches_reference_and_finite_differences() {
        let s = logits(6, 6, 4, 2.0);
        let t = logits(6, 6, 5, 2.0);
        let labels = [0, 1, 2, 3, 4, 5];
        let r = kd_loss(&s, &t, &labels, 2.0, 0.5).unwrap();
        assert!((r.loss - reference(&s, &t, &labels, 2.0, 0.5)).abs() < 1e-12);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..s.len() {
            let mut p = s.clone();
            p.data_mut()[i] += h;
            let lp = kd_loss(&p, &t, &labels, 2.0, 0.5).unwrap().loss;
            p.data_mut()[i] -= 2.0 * h;
            let lm = kd_loss(&p, &t, &labels, 2.0, 0.5).unwrap().loss;
            worst = worst.max(rel_err(r.grad.data()[i], (lp - lm) / (2.0 * h)));
        }
        assert!(worst < 1e-3, "{worst}");
    }

    #[test]
    fn huge_temperature_flattens_both_sides() {
        let s = logits(8, 6, 6, 5.0);
        let t = logits(8, 6, 7, 5.0);
        let r = kd_loss(&s, &t, &[0; 8], 1e6, 0.5).unwrap();
        assert!(r.kl <= 1e-6, "{}", r.kl);
    }

    #[test]
    fn shape_errors() {
        let s = logits(2, 3, 1, 1.0);
        let t = logits(2, 4, 1, 1.0);
        assert!(matches!(kd_loss(&s, &t, &[0, 0], 2.0, 0.5), Err(NnError::ShapeMismatch(_))));
        assert!(kd_loss(&s, &s, &[0, 0], 0.0, 0.5).is_err());
    }

    proptest! {
        #[test]
        fn loss_is_non_negative(seed in 0u64..500, temp in 0.5f64..8.0, lambda in 0.0f64..=1.0) {
            let s = logits(4, 6, seed, 4.0);
            let t = logits(4, 6, seed + 1, 4.0);
            let r = kd_loss(&s, &t, &[0, 2, 4, 5], temp, lambda).unwrap();
            prop_assert!(r.loss >= 0.0 && r.kl >= 0.0);
        }
    }
}
