//! Two-phase training: pretraining the base on complete data, then adapter
//! fine-tuning on scheduled incomplete batches; plus evaluation.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::combo::ModalityCombination;
use crate::config::KvConfig;
use crate::dpft::{
    prediction_shift_scores, score_delta, separability_scores, CombinationSchedule,
    ScheduleConfig, SeparabilityVector,
};
use crate::error::{Error, Result};
use crate::features::{raw_batch, FeatureTable};
use crate::func::{argmax, cosine_similarity};
use crate::losses::{orthogonality_loss_tape, task_loss_tape, LossReport};
use crate::metrics::{compute_metrics, Metrics, MetricsRecord, Protocol};
use crate::model::{BatchInput, Ctx, ForwardOptions, Model, ModelConfig, Phase};
use crate::optim::Adam;
use crate::rng::Rng;
use crate::synth::{apply_random_missing, Dataset, SynthConfig, TaskKind};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub pretrain_epochs: usize,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub pretrain_lr: f64,
    pub lr: f64,
    pub beta: f64,
    pub rank: usize,
    pub alpha: f64,
    pub lora_init_std: f64,
    pub d_model: usize,
    pub dropout: f64,
    pub mcla: bool,
    pub dpft: bool,
    pub schedule: ScheduleConfig,
    pub probe_size: usize,
    pub train_frac: f64,
    pub val_frac: f64,
    pub mask_prob_lo: f64,
    pub mask_prob_hi: f64,
    pub eval_seed: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            pretrain_epochs: 100,
            finetune_epochs: 100,
            batch_size: 32,
            pretrain_lr: 1e-3,
            lr: 1e-3,
            beta: 0.001,
            rank: 4,
            alpha: 16.0,
            lora_init_std: 0.02,
            d_model: 32,
            dropout: 0.5,
            mcla: true,
            dpft: true,
            schedule: ScheduleConfig::default(),
            probe_size: 256,
            train_frac: 0.6,
            val_frac: 0.15,
            mask_prob_lo: 0.4,
            mask_prob_hi: 0.6,
            eval_seed: 66,
            seed: 66,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 25] = [
        "pretrain_epochs",
        "finetune_epochs",
        "batch_size",
        "pretrain_lr",
        "lr",
        "beta",
        "rank",
        "alpha",
        "lora_init_std",
        "d_model",
        "dropout",
        "mcla",
        "dpft",
        "q_base",
        "lambda",
        "p_min",
        "p_max",
        "invert_rank",
        "probe_size",
        "train_frac",
        "val_frac",
        "mask_prob_lo",
        "mask_prob_hi",
        "eval_seed",
        "seed",
    ];

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("pretrain_epochs", self.pretrain_epochs),
            ("finetune_epochs", self.finetune_epochs),
            ("batch_size", self.batch_size),
            ("rank", self.rank),
            ("d_model", self.d_model),
            ("probe_size", self.probe_size),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        for (name, v) in [("lr", self.lr), ("pretrain_lr", self.pretrain_lr), ("alpha", self.alpha)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(name, format!("must be positive, got {v}")));
            }
        }
        if !(self.beta.is_finite() && self.beta >= 0.0) {
            return Err(Error::config("beta", "must be >= 0"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", "must lie in [0, 1)"));
        }
        if !(self.train_frac > 0.0 && self.val_frac > 0.0 && self.train_frac + self.val_frac < 1.0) {
            return Err(Error::config("train_frac", "train and validation fractions must leave a test split"));
        }
        if !(0.0 <= self.mask_prob_lo && self.mask_prob_lo <= self.mask_prob_hi && self.mask_prob_hi <= 1.0) {
            return Err(Error::config("mask_prob_lo", "need 0 <= lo <= hi <= 1"));
        }
        self.schedule.validate()
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let s = d.schedule;
        let cfg = Self {
            pretrain_epochs: kv.get_or("pretrain_epochs", d.pretrain_epochs)?,
            finetune_epochs: kv.get_or("finetune_epochs", d.finetune_epochs)?,
            batch_size: kv.get_or("batch_size", d.batch_size)?,
            pretrain_lr: kv.get_or("pretrain_lr", d.pretrain_lr)?,
            lr: kv.get_or("lr", d.lr)?,
            beta: kv.get_or("beta", d.beta)?,
            rank: kv.get_or("rank", d.rank)?,
            alpha: kv.get_or("alpha", d.alpha)?,
            lora_init_std: kv.get_or("lora_init_std", d.lora_init_std)?,
            d_model: kv.get_or("d_model", d.d_model)?,
            dropout: kv.get_or("dropout", d.dropout)?,
            mcla: kv.get_bool_or("mcla", d.mcla)?,
            dpft: kv.get_bool_or("dpft", d.dpft)?,
            schedule: ScheduleConfig {
                q_base: kv.get_or("q_base", s.q_base)?,
                lambda: kv.get_or("lambda", s.lambda)?,
                p_min: kv.get_or("p_min", s.p_min)?,
                p_max: kv.get_or("p_max", s.p_max)?,
                invert_rank: kv.get_bool_or("invert_rank", s.invert_rank)?,
            },
            probe_size: kv.get_or("probe_size", d.probe_size)?,
            train_frac: kv.get_or("train_frac", d.train_frac)?,
            val_frac: kv.get_or("val_frac", d.val_frac)?,
            mask_prob_lo: kv.get_or("mask_prob_lo", d.mask_prob_lo)?,
            mask_prob_hi: kv.get_or("mask_prob_hi", d.mask_prob_hi)?,
            eval_seed: kv.get_or("eval_seed", d.eval_seed)?,
            seed: kv.get_or("seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let onoff = |b: bool| if b { "on" } else { "off" };
        let mut kv = KvConfig::new();
        kv.set("pretrain_epochs", self.pretrain_epochs);
        kv.set("finetune_epochs", self.finetune_epochs);
        kv.set("batch_size", self.batch_size);
        kv.set("pretrain_lr", self.pretrain_lr);
        kv.set("lr", self.lr);
        kv.set("beta", self.beta);
        kv.set("rank", self.rank);
        kv.set("alpha", self.alpha);
        kv.set("lora_init_std", self.lora_init_std);
        kv.set("d_model", self.d_model);
        kv.set("dropout", self.dropout);
        kv.set("mcla", onoff(self.mcla));
        kv.set("dpft", onoff(self.dpft));
        kv.set("q_base", self.schedule.q_base);
        kv.set("lambda", self.schedule.lambda);
        kv.set("p_min", self.schedule.p_min);
        kv.set("p_max", self.schedule.p_max);
        kv.set("invert_rank", onoff(self.schedule.invert_rank));
        kv.set("probe_size", self.probe_size);
        kv.set("train_frac", self.train_frac);
        kv.set("val_frac", self.val_frac);
        kv.set("mask_prob_lo", self.mask_prob_lo);
        kv.set("mask_prob_hi", self.mask_prob_hi);
        kv.set("eval_seed", self.eval_seed);
        kv.set("seed", self.seed);
        kv
    }
}

/// Everything needed for one run: data generation plus training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: SynthConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            data: SynthConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let known: Vec<&str> = SynthConfig::KEYS
            .iter()
            .chain(TrainConfig::KEYS.iter())
            .copied()
            .collect();
        kv.reject_unknown(&known)?;
        Ok(Self {
            data: SynthConfig::from_kv(kv)?,
            train: TrainConfig::from_kv(kv)?,
        })
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = self.data.to_kv();
        kv.merge(&self.train.to_kv());
        kv
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            raw_dim: self.data.raw_dim,
            seq_len: self.data.seq_len,
            d_model: self.train.d_model,
            num_outputs: match self.data.task {
                TaskKind::Classification => self.data.num_classes,
                TaskKind::Regression => 1,
            },
            rank: self.train.rank,
            alpha: self.train.alpha,
            lora_init_std: self.train.lora_init_std,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainPhase {
    Pretrain,
    Finetune,
}

impl std::fmt::Display for TrainPhase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TrainPhase::Pretrain => "pretrain",
            TrainPhase::Finetune => "finetune",
        })
    }
}

/// One epoch-log row: batch-averaged losses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: TrainPhase,
    pub loss: LossReport,
    pub wallclock_ms: u64,
}

/// One schedule-log row, written after each fine-tuning epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScheduleRow {
    pub epoch: usize,
    pub scores: [f64; 7],
    pub delta: [f64; 7],
    pub q: [f64; 7],
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FinetuneLog {
    pub epochs: Vec<EpochLog>,
    pub schedule: Vec<ScheduleRow>,
    /// Per-batch losses, in order.
    pub batches: Vec<(ModalityCombination, LossReport)>,
    /// Mean `cos(R_com, R_prt)` over the probe after each epoch.
    pub probe_cosine: Vec<f64>,
}

/// Dataset split into train / validation / test.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

impl Splits {
    pub fn new(ds: &Dataset, cfg: &TrainConfig) -> Self {
        let (train, val, test) = ds.split(cfg.train_frac, cfg.val_frac);
        Self { train, val, test }
    }
}

fn batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut order);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// Trains encoders, fusion and the common head on complete data.
pub fn pretrain(train: &Dataset, cfg: &ExperimentConfig) -> Result<(Model, Vec<EpochLog>)> {
    if !train.is_complete() {
        return Err(Error::contract("pretraining requires complete samples"));
    }
    if train.is_empty() {
        return Err(Error::contract("pretraining on an empty dataset"));
    }
    let tc = &cfg.train;
    let root = Rng::new(tc.seed);
    let mut model = Model::new(cfg.model_config(), &mut root.child("init"))?;
    let trainable = model.base_params();
    let mut adam = Adam::new(tc.pretrain_lr);
    let mut shuffle = root.child("pretrain-shuffle");
    let mut drop_rng = root.child("dropout");
    let task = cfg.data.task;
    let mut logs = Vec::with_capacity(tc.pretrain_epochs);

    for epoch in 1..=tc.pretrain_epochs {
        let start = Instant::now();
        let mut total = 0.0;
        let mut count = 0usize;
        for idx in batches(train.len(), tc.batch_size, &mut shuffle) {
            let samples: Vec<_> = idx.iter().map(|&i| &train.samples[i]).collect();
            let batch = raw_batch(&samples, ModalityCombination::FULL)?;
            let labels: Vec<_> = samples.iter().map(|s| s.label).collect();
            let mut ctx = Ctx::new(&model.params, &trainable);
            let out = model.forward(
                &mut ctx,
                &batch,
                ForwardOptions {
                    dropout: Some((&mut drop_rng, tc.dropout)),
                    ..Default::default()
                },
            )?;
            let loss = task_loss_tape(&mut ctx, out.y_last, &labels, task)?;
            let l = ctx.value(loss).item();
            let grads = ctx.tape.backward(loss)?;
            let grads = ctx.param_grads(&grads);
            drop(ctx);
            adam.step(&mut model.params, &grads);
            total += l * idx.len() as f64;
            count += idx.len();
        }
        let l_task = total / count as f64;
        if !l_task.is_finite() {
            return Err(Error::contract(format!("non-finite pretraining loss at epoch {epoch}")));
        }
        logs.push(EpochLog {
            epoch,
            phase: TrainPhase::Pretrain,
            loss: LossReport::new(l_task, 0.0, 0.0),
            wallclock_ms: start.elapsed().as_millis() as u64,
        });
    }
    model.phase = Phase::Pretrained;
    Ok((model, logs))
}

/// Mean `cos(R_com, R_prt)` over all samples, combinations, and modalities of
/// a complete probe batch.
pub fn mean_private_common_cosine(model: &Model, probe: &BatchInput) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0usize;
    for combo in ModalityCombination::ALL {
        for m in combo.modalities() {
            let x = &probe.inputs[m.index()]
                .as_ref()
                .ok_or_else(|| Error::contract("probe lacks a modality"))?
                .pooled_raw;
            let prt = model.adapt_private(x, m, combo)?;
            let com = model.adapt_common(x, m)?;
            for r in 0..prt.rows() {
                total += cosine_similarity(com.row_slice(r), prt.row_slice(r)).0;
                n += 1;
            }
        }
    }
    Ok(total / n as f64)
}

/// Fine-tunes a pretrained model. The base (encoders and fusion) stays
/// frozen; adapters, both heads and the gate are trained with MCLA on, only
/// the common head with MCLA off.
pub fn finetune(
    pretrained: &Model,
    train: &Dataset,
    val: &Dataset,
    cfg: &ExperimentConfig,
) -> Result<(Model, FinetuneLog)> {
    if pretrained.phase != Phase::Pretrained || pretrained.has_adapters() {
        return Err(Error::contract("fine-tuning requires a pretrained model without adapters"));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("fine-tuning needs nonempty train and validation sets"));
    }
    if !val.is_complete() {
        return Err(Error::contract("the probe split must contain every modality"));
    }
    let tc = &cfg.train;
    let root = Rng::new(tc.seed);
    let mut model = pretrained.clone();
    if tc.mcla {
        model.attach_adapters(tc.rank, tc.alpha, &mut root.child("adapters"))?;
    }
    let trainable = if tc.mcla {
        model.finetune_params()
    } else {
        model.head_com_params()
    };

    let table = FeatureTable::with_encodings(train, &model)?;
    let probe_ds = val.subset(&(0..tc.probe_size.min(val.len())).collect::<Vec<_>>());
    let probe_table = FeatureTable::with_encodings(&probe_ds, &model)?;
    let probe_idx: Vec<usize> = (0..probe_ds.len()).collect();
    let probe = probe_table.batch(&probe_idx, ModalityCombination::FULL)?;

    let mut schedule = CombinationSchedule::uniform(tc.schedule)?;
    let uniform = schedule;
    let mut prev = SeparabilityVector::zero();
    let mut adam = Adam::new(tc.lr);
    let mut shuffle = root.child("finetune-shuffle");
    let mut sampler = root.child("combination-sampling");
    let task = cfg.data.task;
    let mut log = FinetuneLog::default();

    for epoch in 1..=tc.finetune_epochs {
        let start = Instant::now();
        let (mut s_task, mut s_ort, mut count) = (0.0, 0.0, 0usize);
        let active = if tc.dpft { schedule } else { uniform };
        for idx in batches(table.len(), tc.batch_size, &mut shuffle) {
            let combo = active.sample(&mut sampler);
            let batch = table.batch(&idx, combo)?;
            let labels = table.labels_of(&idx);
            let mut ctx = Ctx::new(&model.params, &trainable);
            let out = model.forward(&mut ctx, &batch, ForwardOptions::default())?;
            let l_task = task_loss_tape(&mut ctx, out.y_last, &labels, task)?;
            let (loss, l_ort) = if tc.mcla {
                let ort = orthogonality_loss_tape(&mut ctx, &out.reps)?;
                let weighted = ctx.tape.scale(ort, tc.beta);
                (ctx.tape.add(l_task, weighted)?, Some(ort))
            } else {
                (l_task, None)
            };
            let report = LossReport::new(
                ctx.value(l_task).item(),
                l_ort.map_or(0.0, |v| ctx.value(v).item()),
                tc.beta,
            );
            let grads = ctx.tape.backward(loss)?;
            let grads = ctx.param_grads(&grads);
            drop(ctx);
            adam.step(&mut model.params, &grads);
            let w = idx.len() as f64;
            s_task += report.l_task * w;
            s_ort += report.l_ort * w;
            count += idx.len();
            log.batches.push((combo, report));
        }
        let n = count as f64;
        let loss = LossReport::new(s_task / n, s_ort / n, tc.beta);
        if !loss.l_total.is_finite() {
            return Err(Error::contract(format!("non-finite fine-tuning loss at epoch {epoch}")));
        }
        log.epochs.push(EpochLog {
            epoch,
            phase: TrainPhase::Finetune,
            loss,
            wallclock_ms: start.elapsed().as_millis() as u64,
        });

        let scores = if tc.mcla {
            log.probe_cosine.push(mean_private_common_cosine(&model, &probe)?);
            separability_scores(&model, &probe, epoch)?
        } else {
            prediction_shift_scores(&model, &probe, epoch)?
        };
        let delta: [f64; 7] = score_delta(&prev.scores, &scores.scores)?
            .try_into()
            .expect("seven deltas");
        if tc.dpft {
            schedule = schedule.update(&delta)?.0;
        }
        log.schedule.push(ScheduleRow {
            epoch,
            scores: scores.scores,
            delta,
            q: if tc.dpft { schedule.q } else { uniform.q },
        });
        prev = scores;
    }
    model.phase = Phase::Finetuned;
    Ok((model, log))
}

/// Evaluation parallelism from `MCULORA_THREADS` (default 1).
pub fn eval_threads() -> usize {
    std::env::var("MCULORA_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

/// Raw model outputs (`y_last` rows) for every sample, each evaluated under
/// its own presence set.
pub fn predict_dataset(model: &Model, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    let table = FeatureTable::with_encodings(ds, model)?;
    let mut groups: Vec<(ModalityCombination, Vec<usize>)> = Vec::new();
    for combo in ModalityCombination::ALL {
        let idx: Vec<usize> = (0..ds.len()).filter(|&i| table.presence[i] == combo).collect();
        for chunk in idx.chunks(256) {
            groups.push((combo, chunk.to_vec()));
        }
    }
    let run = |(combo, idx): &(ModalityCombination, Vec<usize>)| -> Result<Vec<(usize, Vec<f64>)>> {
        let batch = table.batch(idx, *combo)?;
        let pred = model.predict_batch(&batch, ForwardOptions::default())?;
        Ok(idx
            .iter()
            .enumerate()
            .map(|(r, &i)| (i, pred.y_last.row_slice(r).to_vec()))
            .collect())
    };

    let threads = eval_threads().min(groups.len()).max(1);
    let mut results: Vec<Vec<(usize, Vec<f64>)>> = Vec::with_capacity(groups.len());
    if threads == 1 {
        for g in &groups {
            results.push(run(g)?);
        }
    } else {
        let per = groups.len().div_ceil(threads);
        let shards: Vec<Result<Vec<Vec<(usize, Vec<f64>)>>>> = std::thread::scope(|s| {
            let handles: Vec<_> = groups
                .chunks(per)
                .map(|shard| s.spawn(move || shard.iter().map(run).collect::<Result<Vec<_>>>()))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("evaluation thread panicked"))
                .collect()
        });
        for shard in shards {
            results.extend(shard?);
        }
    }
    let mut out = vec![Vec::new(); ds.len()];
    for (i, row) in results.into_iter().flatten() {
        out[i] = row;
    }
    Ok(out)
}

/// Class predictions and class labels; regression scores are binarized at 0.
fn decisions(outputs: &[Vec<f64>], ds: &Dataset) -> (Vec<usize>, Vec<usize>) {
    match ds.config.task {
        TaskKind::Classification => (
            outputs.iter().map(|o| argmax(o)).collect(),
            ds.samples.iter().map(|s| s.label.class().unwrap_or(0)).collect(),
        ),
        TaskKind::Regression => (
            outputs.iter().map(|o| usize::from(o[0] > 0.0)).collect(),
            ds.samples.iter().map(|s| usize::from(s.label.value() > 0.0)).collect(),
        ),
    }
}

pub fn dataset_metrics(model: &Model, ds: &Dataset) -> Result<Metrics> {
    let outputs = predict_dataset(model, ds)?;
    let (preds, labels) = decisions(&outputs, ds);
    compute_metrics(&preds, &labels)
}

/// Fixed protocol: all seven conditions on the masked test set. Random
/// protocol: per-sample masks with `cfg.eval_seed` and one overall row.
pub fn evaluate(
    model: &Model,
    test: &Dataset,
    protocol: Protocol,
    cfg: &TrainConfig,
) -> Result<MetricsRecord> {
    match protocol {
        Protocol::Fixed => {
            let mut per = Vec::with_capacity(7);
            for combo in ModalityCombination::ALL {
                let masked = crate::synth::apply_fixed_missing(test, combo)?;
                per.push((combo, dataset_metrics(model, &masked)?));
            }
            Ok(MetricsRecord::fixed(&per))
        }
        Protocol::Random => {
            let masked = apply_random_missing(
                test,
                (cfg.mask_prob_lo, cfg.mask_prob_hi),
                cfg.eval_seed,
            )?;
            Ok(MetricsRecord::random(dataset_metrics(model, &masked)?))
        }
    }
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub pretrained: Model,
    pub pretrain_log: Vec<EpochLog>,
    pub finetuned: Model,
    pub finetune_log: FinetuneLog,
    pub metrics: MetricsRecord,
}

/// Generates data, pretrains, fine-tunes and evaluates under the fixed protocol.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let ds = crate::synth::generate_dataset(&cfg.data)?;
    let splits = Splits::new(&ds, &cfg.train);
    let (pretrained, pretrain_log) = pretrain(&splits.train, cfg)?;
    let (finetuned, finetune_log) = finetune(&pretrained, &splits.train, &splits.val, cfg)?;
    let metrics = evaluate(&finetuned, &splits.test, Protocol::Fixed, &cfg.train)?;
    Ok(RunOutcome {
        pretrained,
        pretrain_log,
        finetuned,
        finetune_log,
        metrics,
    })
}
