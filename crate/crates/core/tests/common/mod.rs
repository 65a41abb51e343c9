//! Helpers shared by the integration test targets.
#![allow(dead_code)]

use mculora::combo::{Modality, ModalityCombination};
use mculora::losses::{orthogonality_loss_tape, task_loss_tape};
use mculora::model::{BatchInput, Ctx, ForwardOptions, ModalityInput, Model, ModelConfig, ParamId};
use mculora::rng::Rng;
use mculora::synth::{Label, TaskKind};
use mculora::Tensor;

pub fn random(rng: &mut Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.normal()).collect())
}

/// Which objective a gradient check differentiates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    Orthogonality,
    CrossEntropy,
    SquaredError,
    Total { beta_millis: u32 },
}

/// A small model with adapters whose `B` matrices and gate are randomized, so
/// every parameter influences the output.
pub fn gradcheck_model(num_outputs: usize, seed: u64) -> Model {
    let cfg = ModelConfig {
        raw_dim: 5,
        seq_len: 3,
        d_model: 8,
        num_outputs,
        rank: 2,
        alpha: 1.5,
        lora_init_std: 0.3,
    };
    let mut rng = Rng::new(seed);
    let mut model = Model::new(cfg, &mut rng).unwrap();
    model.attach_adapters(2, 1.5, &mut rng).unwrap();
    let names: Vec<String> = model.params.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in names {
        if name.ends_with(".B") || name.starts_with("gate.") {
            let id = model.params.id(&name).unwrap();
            let shape = model.params.get(id).shape().to_vec();
            *model.params.get_mut(id) = random(&mut rng, shape[0], shape[1]).map(|v| 0.5 * v);
        }
    }
    model
}

pub fn gradcheck_batch(model: &Model, combo: ModalityCombination, n: usize, seed: u64) -> BatchInput {
    let mut rng = Rng::new(seed);
    let c = &model.config;
    let mut inputs: [Option<ModalityInput>; 3] = Default::default();
    for m in combo.modalities() {
        inputs[m.index()] = Some(ModalityInput {
            seq: Some(random(&mut rng, n * c.seq_len, c.raw_dim)),
            pooled_raw: random(&mut rng, n, c.raw_dim),
            encoded: None,
        });
    }
    BatchInput { combo, inputs }
}

pub fn labels_for(objective: Objective, n: usize, classes: usize, seed: u64) -> Vec<Label> {
    let mut rng = Rng::new(seed);
    (0..n)
        .map(|_| match objective {
            Objective::SquaredError => Label::Score(rng.normal()),
            _ => Label::Class(rng.below(classes)),
        })
        .collect()
}

fn objective_value(
    model: &Model,
    trainable: &[ParamId],
    batch: &BatchInput,
    labels: &[Label],
    objective: Objective,
) -> (f64, Vec<(ParamId, Tensor)>) {
    let mut ctx = Ctx::new(&model.params, trainable);
    let out = model.forward(&mut ctx, batch, ForwardOptions::default()).unwrap();
    let kind = if objective == Objective::SquaredError {
        TaskKind::Regression
    } else {
        TaskKind::Classification
    };
    let loss = match objective {
        Objective::Orthogonality => orthogonality_loss_tape(&mut ctx, &out.reps).unwrap(),
        Objective::CrossEntropy | Objective::SquaredError => {
            task_loss_tape(&mut ctx, out.y_last, labels, kind).unwrap()
        }
        Objective::Total { beta_millis } => {
            let task = task_loss_tape(&mut ctx, out.y_last, labels, kind).unwrap();
            let ort = orthogonality_loss_tape(&mut ctx, &out.reps).unwrap();
            let w = ctx.tape.scale(ort, beta_millis as f64 / 1000.0);
            ctx.tape.add(task, w).unwrap()
        }
    };
    let value = ctx.value(loss).item();
    if trainable.is_empty() {
        return (value, Vec::new());
    }
    let grads = ctx.tape.backward(loss).unwrap();
    (value, ctx.param_grads(&grads))
}

/// Relative error `|a - n| / max(|a|, |n|, 1e-3)`. Below the floor the
/// bound acts as an absolute one, since central differences at `h = 1e-6`
/// carry roughly `1e-9` of rounding noise.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares analytic and central-difference gradients at `coords` random
/// coordinates of the parameters that `objective` depends on. Returns the
/// worst relative error.
pub fn gradient_check(objective: Objective, coords: usize, seed: u64) -> f64 {
    let outputs = if objective == Objective::SquaredError { 1 } else { 4 };
    let mut model = gradcheck_model(outputs, seed);
    let combo = ModalityCombination::ALL[(seed % 7) as usize];
    let batch = gradcheck_batch(&model, combo, 4, seed + 1);
    let labels = labels_for(objective, 4, outputs, seed + 2);
    let trainable: Vec<ParamId> = match objective {
        Objective::Orthogonality => {
            let mut v = model.adapter_params();
            v.extend(model.encoder_params());
            v
        }
        _ => model.params.ids().collect(),
    };
    let (_, grads) = objective_value(&model, &trainable, &batch, &labels, objective);
    // Only coordinates with a gradient entry (the parameter is reachable).
    let reachable: Vec<(ParamId, usize)> = grads
        .iter()
        .flat_map(|(id, g)| (0..g.len()).map(move |i| (*id, i)))
        .collect();
    assert!(!reachable.is_empty());
    let mut rng = Rng::new(seed ^ 0x9e37);
    let h = 1e-6;
    let mut worst = 0.0f64;
    let mut largest = 0.0f64;
    for _ in 0..coords {
        let (id, i) = reachable[rng.below(reachable.len())];
        let analytic = grads.iter().find(|(g, _)| *g == id).unwrap().1.data()[i];
        let orig = model.params.get(id).data()[i];
        model.params.get_mut(id).data_mut()[i] = orig + h;
        let plus = objective_value(&model, &[], &batch, &labels, objective).0;
        model.params.get_mut(id).data_mut()[i] = orig - h;
        let minus = objective_value(&model, &[], &batch, &labels, objective).0;
        model.params.get_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
        largest = largest.max(analytic.abs());
    }
    assert!(largest > 1e-4, "{objective:?}: all sampled gradients vanish");
    worst
}

pub fn modality_of(i: usize) -> Modality {
    Modality::ALL[i % 3]
}
