//! Synthetic multimodal datasets with controllable signal sources, and the
//! fixed/random missing-modality protocols.
//!
//! Each sample carries a class label and, per modality, a latent vector made
//! of four blocks:
//!
//! * a shared block, identical class evidence visible in every modality;
//! * a private block, class evidence specific to that modality;
//! * two pair blocks, one for each pair the modality belongs to.
//!
//! For a pair `(m1, m2)` the pair latent `z` is observed as `z + n` by `m1` and
//! `z - n` by `m2`, where `n` is a large per-sample nuisance. Either modality
//! alone sees `z` buried under `n`; adding the two cancels `n`. The usable
//! information of a modality therefore depends on which other modalities are
//! present, which is the premise the combination-specific adapters exploit.
//!
//! Latents are projected to `raw_dim` features by a fixed random matrix per
//! modality and repeated over `seq_len` positions with independent noise.

use serde::{Deserialize, Serialize};

use crate::combo::{Modality, ModalityCombination};
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub mod io;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TaskKind {
    Classification,
    Regression,
}

impl std::str::FromStr for TaskKind {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "classification" => Ok(TaskKind::Classification),
            "regression" => Ok(TaskKind::Regression),
            _ => Err(format!("expected classification|regression, got `{s}`")),
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Classification => "classification",
            TaskKind::Regression => "regression",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub seq_len: usize,
    pub raw_dim: usize,
    pub num_classes: usize,
    pub shared_dim: usize,
    pub private_dim: usize,
    pub shared_strength: f64,
    pub private_strength: f64,
    pub pair_interaction_strength: f64,
    /// Standard deviation of the nuisance that cancels only when both
    /// modalities of a pair are present.
    pub pair_nuisance_std: f64,
    pub noise_std: f64,
    pub task: TaskKind,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 2000,
            seq_len: 8,
            raw_dim: 16,
            num_classes: 4,
            shared_dim: 4,
            private_dim: 4,
            shared_strength: 0.5,
            private_strength: 0.5,
            pair_interaction_strength: 2.0,
            pair_nuisance_std: 4.0,
            noise_std: 1.0,
            task: TaskKind::Classification,
            seed: 66,
        }
    }
}

impl SynthConfig {
    pub const KEYS: [&'static str; 13] = [
        "num_samples",
        "seq_len",
        "raw_dim",
        "num_classes",
        "shared_dim",
        "private_dim",
        "shared_strength",
        "private_strength",
        "pair_interaction_strength",
        "pair_nuisance_std",
        "noise_std",
        "task",
        "data_seed",
    ];

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_samples", self.num_samples),
            ("seq_len", self.seq_len),
            ("raw_dim", self.raw_dim),
            ("shared_dim", self.shared_dim),
            ("private_dim", self.private_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::config("num_classes", "must be at least 2"));
        }
        let reals = [
            ("shared_strength", self.shared_strength),
            ("private_strength", self.private_strength),
            ("pair_interaction_strength", self.pair_interaction_strength),
            ("pair_nuisance_std", self.pair_nuisance_std),
            ("noise_std", self.noise_std),
        ];
        for (name, v) in reals {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(name, format!("must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            num_samples: kv.get_or("num_samples", d.num_samples)?,
            seq_len: kv.get_or("seq_len", d.seq_len)?,
            raw_dim: kv.get_or("raw_dim", d.raw_dim)?,
            num_classes: kv.get_or("num_classes", d.num_classes)?,
            shared_dim: kv.get_or("shared_dim", d.shared_dim)?,
            private_dim: kv.get_or("private_dim", d.private_dim)?,
            shared_strength: kv.get_or("shared_strength", d.shared_strength)?,
            private_strength: kv.get_or("private_strength", d.private_strength)?,
            pair_interaction_strength: kv
                .get_or("pair_interaction_strength", d.pair_interaction_strength)?,
            pair_nuisance_std: kv.get_or("pair_nuisance_std", d.pair_nuisance_std)?,
            noise_std: kv.get_or("noise_std", d.noise_std)?,
            task: kv.get_or("task", d.task)?,
            seed: kv.get_or("data_seed", d.seed)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("num_samples", self.num_samples);
        kv.set("seq_len", self.seq_len);
        kv.set("raw_dim", self.raw_dim);
        kv.set("num_classes", self.num_classes);
        kv.set("shared_dim", self.shared_dim);
        kv.set("private_dim", self.private_dim);
        kv.set("shared_strength", self.shared_strength);
        kv.set("private_strength", self.private_strength);
        kv.set("pair_interaction_strength", self.pair_interaction_strength);
        kv.set("pair_nuisance_std", self.pair_nuisance_std);
        kv.set("noise_std", self.noise_std);
        kv.set("task", self.task);
        kv.set("data_seed", self.seed);
        kv
    }

    fn latent_dim(&self) -> usize {
        self.shared_dim + 3 * self.private_dim
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Label {
    Class(usize),
    Score(f64),
}

impl Label {
    pub fn class(self) -> Option<usize> {
        match self {
            Label::Class(c) => Some(c),
            Label::Score(_) => None,
        }
    }

    /// Regression targets as-is, class indices as `f64`.
    pub fn value(self) -> f64 {
        match self {
            Label::Class(c) => c as f64,
            Label::Score(s) => s,
        }
    }
}

/// One sample: per-modality `seq_len x raw_dim` features, a label, and the
/// set of modalities that are present.
#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    features: [Option<Tensor>; 3],
    pub label: Label,
    presence: ModalityCombination,
}

impl Utterance {
    pub fn new(
        features: [Option<Tensor>; 3],
        label: Label,
        presence: ModalityCombination,
    ) -> Result<Self> {
        for m in Modality::ALL {
            if presence.contains(m) != features[m.index()].is_some() {
                return Err(Error::contract(format!(
                    "presence {presence} disagrees with stored features for {m:?}"
                )));
            }
        }
        Ok(Self {
            features,
            label,
            presence,
        })
    }

    pub fn presence(&self) -> ModalityCombination {
        self.presence
    }

    pub fn features(&self, m: Modality) -> Option<&Tensor> {
        self.features[m.index()].as_ref()
    }

    /// Restricts the sample to `combo`; every modality in `combo` must be present.
    pub fn masked(&self, combo: ModalityCombination) -> Result<Utterance> {
        if combo.bits() & !self.presence.bits() != 0 {
            return Err(Error::contract(format!(
                "cannot mask a sample with presence {} to {combo}",
                self.presence
            )));
        }
        let mut features: [Option<Tensor>; 3] = Default::default();
        for m in combo.modalities() {
            features[m.index()] = self.features[m.index()].clone();
        }
        Utterance::new(features, self.label, combo)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SynthConfig,
    pub samples: Vec<Utterance>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn is_complete(&self) -> bool {
        self.samples.iter().all(|s| s.presence().is_full())
    }

    /// Contiguous train/validation/test split by fractions of the sample count.
    pub fn split(&self, train_frac: f64, val_frac: f64) -> (Dataset, Dataset, Dataset) {
        let n = self.samples.len();
        let n_train = ((n as f64) * train_frac).round() as usize;
        let n_val = (((n as f64) * val_frac).round() as usize).min(n - n_train.min(n));
        let n_train = n_train.min(n);
        let part = |range: std::ops::Range<usize>| Dataset {
            config: self.config.clone(),
            samples: self.samples[range].to_vec(),
        };
        (
            part(0..n_train),
            part(n_train..n_train + n_val),
            part(n_train + n_val..n),
        )
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            config: self.config.clone(),
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

struct Prototypes {
    shared: Vec<Vec<f64>>,
    private: Vec<Vec<Vec<f64>>>,
    pair: Vec<Vec<Vec<f64>>>,
    mixing: Vec<Tensor>,
}

/// Pairs in fixed order; the first member sees `z + n`, the second `z - n`.
const PAIRS: [(Modality, Modality); 3] = [
    (Modality::Audio, Modality::Text),
    (Modality::Audio, Modality::Vision),
    (Modality::Text, Modality::Vision),
];

fn gaussian_vec(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.normal()).collect()
}

fn build_prototypes(cfg: &SynthConfig, rng: &mut Rng) -> Prototypes {
    let c = cfg.num_classes;
    let shared = (0..c).map(|_| gaussian_vec(rng, cfg.shared_dim)).collect();
    let private = (0..3)
        .map(|_| (0..c).map(|_| gaussian_vec(rng, cfg.private_dim)).collect())
        .collect();
    let pair = (0..3)
        .map(|_| (0..c).map(|_| gaussian_vec(rng, cfg.private_dim)).collect())
        .collect();
    let k = cfg.latent_dim();
    let scale = 1.0 / (k as f64).sqrt();
    let mixing = (0..3)
        .map(|_| {
            let data = (0..k * cfg.raw_dim).map(|_| rng.normal() * scale).collect();
            Tensor::matrix(k, cfg.raw_dim, data)
        })
        .collect();
    Prototypes {
        shared,
        private,
        pair,
        mixing,
    }
}

/// Generates `cfg.num_samples` complete utterances. Pure in `cfg`.
pub fn generate_dataset(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let protos = build_prototypes(cfg, &mut root.child("prototypes"));

    // Stratified labels: round-robin then shuffled.
    let mut labels: Vec<usize> = (0..cfg.num_samples).map(|i| i % cfg.num_classes).collect();
    root.child("labels").shuffle(&mut labels);

    let mut rng = root.child("samples");
    let noise = cfg.noise_std;
    let mut samples = Vec::with_capacity(cfg.num_samples);
    for &y in &labels {
        let shared: Vec<f64> = protos.shared[y]
            .iter()
            .map(|&p| cfg.shared_strength * p + noise * rng.normal())
            .collect();
        let pair_signal: Vec<Vec<f64>> = (0..3)
            .map(|p| {
                protos.pair[p][y]
                    .iter()
                    .map(|&v| cfg.pair_interaction_strength * v + noise * rng.normal())
                    .collect()
            })
            .collect();
        let nuisance: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                (0..cfg.private_dim)
                    .map(|_| cfg.pair_nuisance_std * rng.normal())
                    .collect()
            })
            .collect();

        let mut features: [Option<Tensor>; 3] = Default::default();
        for m in Modality::ALL {
            let mut latent = shared.clone();
            latent.extend(
                protos.private[m.index()][y]
                    .iter()
                    .map(|&p| cfg.private_strength * p + noise * rng.normal()),
            );
            for (p, &(first, second)) in PAIRS.iter().enumerate() {
                let sign = if m == first {
                    1.0
                } else if m == second {
                    -1.0
                } else {
                    continue;
                };
                latent.extend(
                    pair_signal[p]
                        .iter()
                        .zip(&nuisance[p])
                        .map(|(z, n)| z + sign * n),
                );
            }
            let projected = Tensor::row(&latent).matmul(&protos.mixing[m.index()])?;
            let mut data = Vec::with_capacity(cfg.seq_len * cfg.raw_dim);
            for _ in 0..cfg.seq_len {
                data.extend(projected.data().iter().map(|&v| v + noise * rng.normal()));
            }
            features[m.index()] = Some(Tensor::matrix(cfg.seq_len, cfg.raw_dim, data));
        }

        let label = match cfg.task {
            TaskKind::Classification => Label::Class(y),
            TaskKind::Regression => Label::Score(y as f64 - (cfg.num_classes - 1) as f64 / 2.0),
        };
        samples.push(Utterance::new(features, label, ModalityCombination::FULL)?);
    }
    Ok(Dataset {
        config: cfg.clone(),
        samples,
    })
}

/// Fixed missing protocol: every sample is restricted to `combo`.
pub fn apply_fixed_missing(dataset: &Dataset, combo: ModalityCombination) -> Result<Dataset> {
    let samples = dataset
        .samples
        .iter()
        .map(|s| s.masked(combo))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: dataset.config.clone(),
        samples,
    })
}

/// The random draws behind one sample's random-missing mask.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskDraw {
    /// Per-modality drop decisions before the retention rule.
    pub dropped: [bool; 3],
    /// The modality kept when every present modality was dropped.
    pub retained: Option<Modality>,
    pub presence: ModalityCombination,
}

/// Draws random-missing masks for samples with the given presence sets.
pub fn random_missing_draws(
    presences: &[ModalityCombination],
    range: (f64, f64),
    seed: u64,
) -> Result<Vec<MaskDraw>> {
    let (lo, hi) = range;
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(Error::config(
            "mask_prob_range",
            format!("need 0 <= lo <= hi <= 1, got [{lo}, {hi}]"),
        ));
    }
    let mut rng = Rng::new(seed);
    Ok(presences
        .iter()
        .map(|&orig| {
            let mut dropped = [false; 3];
            let mut keep = 0u8;
            for m in Modality::ALL {
                let p = rng.uniform_range(lo, hi);
                let u = rng.uniform();
                dropped[m.index()] = u < p;
                if orig.contains(m) && !dropped[m.index()] {
                    keep |= 1 << m.index();
                }
            }
            let mut retained = None;
            if keep == 0 {
                let present: Vec<Modality> = orig.modalities().collect();
                let m = present[rng.below(present.len())];
                keep = 1 << m.index();
                retained = Some(m);
            }
            MaskDraw {
                dropped,
                retained,
                presence: ModalityCombination::from_bits(keep).expect("nonempty mask"),
            }
        })
        .collect())
}

/// Random missing protocol: each present modality is dropped independently
/// with a probability drawn from `range`; if all would be dropped, one
/// uniformly chosen modality is kept.
pub fn apply_random_missing(dataset: &Dataset, range: (f64, f64), seed: u64) -> Result<Dataset> {
    let presences: Vec<_> = dataset.samples.iter().map(Utterance::presence).collect();
    let draws = random_missing_draws(&presences, range, seed)?;
    let samples = dataset
        .samples
        .iter()
        .zip(&draws)
        .map(|(s, d)| s.masked(d.presence))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        config: dataset.config.clone(),
        samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SynthConfig {
        SynthConfig {
            num_samples: 40,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn cardinality_and_label_range() {
        let ds = generate_dataset(&SynthConfig {
            num_samples: 1000,
            ..SynthConfig::default()
        })
        .unwrap();
        assert_eq!(ds.len(), 1000);
        assert!(ds
            .samples
            .iter()
            .all(|s| matches!(s.label, Label::Class(c) if c < 4)));
        assert!(ds.is_complete());
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_dataset(&small()).unwrap();
        let b = generate_dataset(&small()).unwrap();
        assert!(a
            .samples
            .iter()
            .zip(&b.samples)
            .all(|(x, y)| Modality::ALL
                .iter()
                .all(|&m| x.features(m).unwrap().bit_eq(y.features(m).unwrap()))));
        assert_eq!(a, b);
    }

    #[test]
    fn invalid_config_names_field() {
        let err = generate_dataset(&SynthConfig {
            num_samples: 0,
            ..SynthConfig::default()
        })
        .unwrap_err()
        .to_string();
        assert!(err.contains("num_samples"), "{err}");
        let err = SynthConfig {
            num_classes: 1,
            ..SynthConfig::default()
        }
        .validate()
        .unwrap_err()
        .to_string();
        assert!(err.contains("num_classes"));
    }

    #[test]
    fn fixed_missing_cases() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!(apply_fixed_missing(&ds, ModalityCombination::FULL).unwrap(), ds);
        let t = apply_fixed_missing(&ds, "t".parse().unwrap()).unwrap();
        for s in &t.samples {
            assert!(s.features(Modality::Text).is_some());
            assert!(s.features(Modality::Audio).is_none() && s.features(Modality::Vision).is_none());
        }
        let av = apply_fixed_missing(&ds, "av".parse().unwrap()).unwrap();
        assert!(av.samples.iter().all(|s| s.features(Modality::Text).is_none()
            && s.features(Modality::Audio).is_some()
            && s.features(Modality::Vision).is_some()));
        // idempotent
        let twice = apply_fixed_missing(&av, "av".parse().unwrap()).unwrap();
        assert_eq!(twice, av);
    }

    #[test]
    fn random_missing_extremes() {
        let ds = generate_dataset(&small()).unwrap();
        assert_eq!(apply_random_missing(&ds, (0.0, 0.0), 66).unwrap(), ds);
        let all = apply_random_missing(&ds, (1.0, 1.0), 66).unwrap();
        assert!(all.samples.iter().all(|s| s.presence().len() == 1));
        assert!(apply_random_missing(&ds, (0.6, 0.4), 66).is_err());
    }

    #[test]
    fn utterance_presence_must_match_features() {
        let f = Some(Tensor::zeros(2, 2));
        assert!(Utterance::new([f.clone(), None, None], Label::Class(0), "at".parse().unwrap())
            .is_err());
        assert!(Utterance::new([f, None, None], Label::Class(0), "a".parse().unwrap()).is_ok());
    }
}
