//! Analytic backprop of the full training objective (tempered cross-entropy
//! plus weighted KL against a constant teacher) checked against central
//! finite differences over random model/batch/teacher triples.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fedcache_core::models::{
    build_model, ArchitectureId, ClientModel, DistillConfig, DistillObjective, ModelSpec,
    TrainExample,
};
use fedcache_core::numeric::{self, ProbDist};

fn random_prob(rng: &mut ChaCha8Rng, classes: usize) -> ProbDist {
    let raw: Vec<f64> = (0..classes).map(|_| rng.gen_range(0.05..1.0)).collect();
    let total: f64 = raw.iter().sum();
    ProbDist::new(raw.into_iter().map(|v| v / total).collect()).unwrap()
}

/// Max relative error between the analytic batch gradient (recovered from
/// one SGD step) and central differences of the same loss.
fn max_relative_error(
    model: &ClientModel,
    xs: &[Vec<f64>],
    labels: &[usize],
    teachers: &[Option<ProbDist>],
    distill: &DistillConfig,
) -> f64 {
    let spec = model.spec.clone();
    let loss_at = |params: &[f64]| {
        let probe = ClientModel {
            spec: spec.clone(),
            params: params.to_vec(),
            seed: 0,
        };
        let mut total = 0.0;
        for ((x, &label), teacher) in xs.iter().zip(labels).zip(teachers) {
            let p = numeric::softmax_temp(&probe.forward(x).unwrap(), distill.temperature).unwrap();
            total += numeric::cross_entropy(&p, label).unwrap();
            if let Some(q) = teacher {
                let term = match distill.objective {
                    DistillObjective::KlDivergence => numeric::kl_div(&p, q).unwrap(),
                    DistillObjective::SoftCrossEntropy => {
                        numeric::cross_entropy_soft(&p, q).unwrap()
                    }
                };
                total += distill.weight * term;
            }
        }
        total / xs.len() as f64
    };

    let numeric_grad = numeric::finite_diff_grad(loss_at, &model.params, 1e-5);

    let mut stepped = model.clone();
    let batch: Vec<TrainExample> = xs
        .iter()
        .zip(labels)
        .zip(teachers)
        .map(|((x, &label), teacher)| TrainExample {
            features: x,
            label,
            teacher: teacher.as_ref(),
        })
        .collect();
    let lr = 1.0;
    stepped.train_batch(&batch, distill, lr).unwrap();
    let analytic: Vec<f64> = model
        .params
        .iter()
        .zip(&stepped.params)
        .map(|(before, after)| (before - after) / lr)
        .collect();

    analytic
        .iter()
        .zip(&numeric_grad)
        .map(|(a, n)| (a - n).abs() / a.abs().max(1.0))
        .fold(0.0, f64::max)
}

type Triple = (ClientModel, Vec<Vec<f64>>, Vec<usize>, Vec<Option<ProbDist>>);

fn random_triple(rng: &mut ChaCha8Rng, with_teacher: bool) -> Triple {
    let arch = match rng.gen_range(0..3) {
        0 => ArchitectureId::MlpSmall,
        1 => ArchitectureId::MlpMedium,
        _ => ArchitectureId::MlpLarge,
    };
    let classes = rng.gen_range(3..=5);
    let input_dim = rng.gen_range(4..=8);
    let model = build_model(ModelSpec::for_arch(arch, input_dim, classes), rng.gen()).unwrap();
    let batch_len = rng.gen_range(1..=4);
    let xs: Vec<Vec<f64>> = (0..batch_len)
        .map(|_| (0..input_dim).map(|_| rng.gen_range(-1.5..1.5)).collect())
        .collect();
    let labels: Vec<usize> = (0..batch_len).map(|_| rng.gen_range(0..classes)).collect();
    let teachers: Vec<Option<ProbDist>> = (0..batch_len)
        .map(|_| with_teacher.then(|| random_prob(rng, classes)))
        .collect();
    (model, xs, labels, teachers)
}

#[test]
fn kl_objective_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let distill = DistillConfig {
        weight: 1.5,
        temperature: 1.0,
        objective: DistillObjective::KlDivergence,
    };
    for trial in 0..8 {
        let (model, xs, labels, teachers) = random_triple(&mut rng, true);
        let err = max_relative_error(&model, &xs, &labels, &teachers, &distill);
        assert!(err < 1e-4, "trial {trial}: max relative error {err}");
    }
}

#[test]
fn soft_target_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let distill = DistillConfig {
        weight: 1.0,
        temperature: 1.0,
        objective: DistillObjective::SoftCrossEntropy,
    };
    for trial in 0..5 {
        let (model, xs, labels, teachers) = random_triple(&mut rng, true);
        let err = max_relative_error(&model, &xs, &labels, &teachers, &distill);
        assert!(err < 1e-4, "trial {trial}: max relative error {err}");
    }
}

#[test]
fn mixed_teacher_presence_and_temperatures() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for &temperature in &[0.5, 1.0, 2.0] {
        let distill = DistillConfig {
            weight: 1.5,
            temperature,
            objective: DistillObjective::KlDivergence,
        };
        let (model, xs, labels, mut teachers) = random_triple(&mut rng, true);
        // Drop some teachers so both code paths appear in one batch.
        if teachers.len() > 1 {
            teachers[0] = None;
        }
        let err = max_relative_error(&model, &xs, &labels, &teachers, &distill);
        assert!(err < 1e-4, "T={temperature}: max relative error {err}");
    }
}
