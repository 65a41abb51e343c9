//! Dynamic combination scheduling driven by decoupling progress.
//!
//! After each fine-tuning epoch the private and shared adapter outputs are
//! compared per combination with a Jensen-Shannon divergence (the separability
//! score). The per-epoch change of those scores ranks the combinations, and
//! the sampling probability of each combination is nudged up or down by its
//! rank.

use serde::{Deserialize, Serialize};

use crate::combo::{Modality, ModalityCombination};
use crate::error::{Error, Result};
use crate::func::{sigmoid, softmax};
use crate::model::{BatchInput, ForwardOptions, Model};
use crate::rng::Rng;

const N: usize = ModalityCombination::COUNT;

/// Added inside logarithms so zero-probability entries stay finite.
pub const JS_EPS: f64 = 1e-12;

fn check_distribution(p: &[f64]) -> Result<()> {
    let total: f64 = p.iter().sum();
    if p.iter().any(|&v| v < 0.0 || !v.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "not a probability distribution (sum {total})"
        )));
    }
    Ok(())
}

/// `KL(p || m) + KL(q || m)` with `m = (p + q) / 2`.
///
/// Note the absence of the conventional factor 1/2: the range is
/// `[0, 2 ln 2]`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::contract(format!(
            "js_divergence length mismatch: {} vs {}",
            p.len(),
            q.len()
        )));
    }
    check_distribution(p)?;
    check_distribution(q)?;
    let mut kl_p = 0.0;
    let mut kl_q = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        kl_p += a * ((a + JS_EPS) / (m + JS_EPS)).ln();
        kl_q += b * ((b + JS_EPS) / (m + JS_EPS)).ln();
    }
    Ok((kl_p + kl_q).max(0.0))
}

/// Per-combination separability scores, indexed like
/// [`ModalityCombination::ALL`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeparabilityVector {
    pub scores: [f64; N],
    pub epoch: usize,
}

impl SeparabilityVector {
    /// The initial scores `S_0 = 0`.
    pub fn zero() -> Self {
        Self {
            scores: [0.0; N],
            epoch: 0,
        }
    }
}

/// Mean over probe samples and over the modalities of each combination of
/// `JS(softmax(R_prt), softmax(R_com))`.
///
/// `probe` must hold every modality (all combinations are evaluated on it).
pub fn separability_scores(
    model: &Model,
    probe: &BatchInput,
    epoch: usize,
) -> Result<SeparabilityVector> {
    if !model.has_adapters() {
        return Err(Error::contract("separability scores need attached adapters"));
    }
    let b = probe.size();
    if b == 0 {
        return Err(Error::contract("empty probe batch"));
    }
    let raw = |m: Modality| -> Result<&crate::tensor::Tensor> {
        probe.inputs[m.index()]
            .as_ref()
            .map(|i| &i.pooled_raw)
            .ok_or_else(|| Error::contract(format!("probe batch lacks {m:?}")))
    };
    let mut common = Vec::with_capacity(3);
    for m in Modality::ALL {
        common.push(model.adapt_common(raw(m)?, m)?);
    }
    let mut scores = [0.0; N];
    for (slot, combo) in scores.iter_mut().zip(ModalityCombination::ALL) {
        let mut total = 0.0;
        for m in combo.modalities() {
            let prt = model.adapt_private(raw(m)?, m, combo)?;
            let com = &common[m.index()];
            for r in 0..b {
                total += js_divergence(&softmax(prt.row_slice(r))?, &softmax(com.row_slice(r))?)?;
            }
        }
        *slot = total / (b * combo.len()) as f64;
    }
    Ok(SeparabilityVector { scores, epoch })
}

/// Fallback score when no adapters exist: mean JS divergence between the
/// class distribution predicted under each combination and under the full
/// set.
pub fn prediction_shift_scores(
    model: &Model,
    probe: &BatchInput,
    epoch: usize,
) -> Result<SeparabilityVector> {
    let b = probe.size();
    if b == 0 {
        return Err(Error::contract("empty probe batch"));
    }
    let predict = |combo: ModalityCombination| -> Result<crate::tensor::Tensor> {
        let mut batch = probe.clone();
        batch.combo = combo;
        for m in Modality::ALL {
            if !combo.contains(m) {
                batch.inputs[m.index()] = None;
            }
        }
        Ok(model.predict_batch(&batch, ForwardOptions::default())?.y_last)
    };
    let full = predict(ModalityCombination::FULL)?;
    let mut scores = [0.0; N];
    for (slot, combo) in scores.iter_mut().zip(ModalityCombination::ALL) {
        let y = predict(combo)?;
        let mut total = 0.0;
        for r in 0..b {
            total += js_divergence(&softmax(y.row_slice(r))?, &softmax(full.row_slice(r))?)?;
        }
        *slot = total / b as f64;
    }
    Ok(SeparabilityVector { scores, epoch })
}

/// Elementwise `next - prev`.
pub fn score_delta(prev: &[f64], next: &[f64]) -> Result<Vec<f64>> {
    if prev.len() != next.len() {
        return Err(Error::contract(format!(
            "score_delta length mismatch: {} vs {}",
            prev.len(),
            next.len()
        )));
    }
    Ok(next.iter().zip(prev).map(|(n, p)| n - p).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub q_base: f64,
    pub lambda: f64,
    pub p_min: f64,
    pub p_max: f64,
    /// Swap which half of the ranking gains probability.
    pub invert_rank: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            q_base: 0.1,
            lambda: 1.0,
            p_min: 0.1,
            p_max: 0.3,
            invert_rank: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_base > 0.0 && self.q_base < 1.0) {
            return Err(Error::config("q_base", "must lie in (0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda", "must be positive"));
        }
        if !(0.0 < self.p_min && self.p_min < self.p_max && self.p_max < 1.0) {
            return Err(Error::config("p_min", "need 0 < p_min < p_max < 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CombinationSchedule {
    pub q: [f64; N],
    pub config: ScheduleConfig,
}

/// Details of one probability update, for logging and verification.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpdateTrace {
    /// 1-based position of each combination when sorted by ascending delta.
    pub idx: [usize; N],
    /// Signed adjustment before clamping.
    pub adjustment: [f64; N],
}

/// The untouched middle position of the 7-way ranking.
pub const MEDIAN_IDX: usize = N / 2 + 1;

impl CombinationSchedule {
    /// Uniform probabilities `1/7`, clamped into bounds.
    pub fn uniform(config: ScheduleConfig) -> Result<Self> {
        config.validate()?;
        let q0 = (1.0 / N as f64).clamp(config.p_min, config.p_max);
        Ok(Self { q: [q0; N], config })
    }

    /// Applies one rank-based update for score deltas `delta`.
    ///
    /// Combinations are positioned by ascending delta (`idx = 1` made the
    /// least decoupling progress). Positions below the median gain
    /// `|q_base * lambda * sigmoid(delta_i)|`, positions above it lose the
    /// same amount, and the median position is unchanged. Results are
    /// clamped to `[p_min, p_max]`.
    pub fn update(&self, delta: &[f64]) -> Result<(CombinationSchedule, UpdateTrace)> {
        if delta.len() != N {
            return Err(Error::contract(format!(
                "expected {N} score deltas, got {}",
                delta.len()
            )));
        }
        let mut order: Vec<usize> = (0..N).collect();
        order.sort_by(|&a, &b| delta[a].total_cmp(&delta[b]).then(a.cmp(&b)));
        let mut idx = [0usize; N];
        for (pos, &c) in order.iter().enumerate() {
            idx[c] = pos + 1;
        }
        let cfg = self.config;
        let mut adjustment = [0.0; N];
        let mut q = self.q;
        for c in 0..N {
            let magnitude = (cfg.q_base * cfg.lambda * sigmoid(delta[c])).abs();
            let mut sign = match idx[c].cmp(&MEDIAN_IDX) {
                std::cmp::Ordering::Less => 1.0,
                std::cmp::Ordering::Greater => -1.0,
                std::cmp::Ordering::Equal => 0.0,
            };
            if cfg.invert_rank {
                sign = -sign;
            }
            adjustment[c] = sign * magnitude;
            q[c] = (q[c] + adjustment[c]).clamp(cfg.p_min, cfg.p_max);
        }
        Ok((
            CombinationSchedule { q, config: cfg },
            UpdateTrace { idx, adjustment },
        ))
    }

    /// Draws a combination with probability proportional to `q`.
    pub fn sample(&self, rng: &mut Rng) -> ModalityCombination {
        let total: f64 = self.q.iter().sum();
        let mut u = rng.uniform() * total;
        for (c, &w) in self.q.iter().enumerate() {
            if u < w {
                return ModalityCombination::ALL[c];
            }
            u -= w;
        }
        ModalityCombination::ALL[N - 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn js_analytic_cases() {
        assert_eq!(js_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        let disjoint = js_divergence(&[1.0, 0.0], &[0.0, 1.0]).unwrap();
        assert!((disjoint - 2.0 * 2f64.ln()).abs() < 1e-9);
        let oracle = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln() + (4.0f64 / 3.0).ln();
        let v = js_divergence(&[0.5, 0.5], &[1.0, 0.0]).unwrap();
        assert!((v - oracle).abs() < 1e-10);
        assert!((v - 0.43152).abs() < 1e-5);
        assert!(js_divergence(&[1.0], &[0.5, 0.5]).is_err());
    }

    #[test]
    fn score_delta_cases() {
        assert_eq!(score_delta(&[0.4, 0.1], &[0.4, 0.1]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(score_delta(&[0.0, 0.0], &[0.2, 0.5]).unwrap(), vec![0.2, 0.5]);
        let d = score_delta(&[0.1, 0.3], &[0.2, 0.1]).unwrap();
        assert!((d[0] - 0.1).abs() < 1e-15 && (d[1] + 0.2).abs() < 1e-15);
        assert!(score_delta(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn tiny_lambda_leaves_q_unchanged() {
        let cfg = ScheduleConfig {
            lambda: 1e-300,
            ..ScheduleConfig::default()
        };
        let s = CombinationSchedule::uniform(cfg).unwrap();
        let (next, _) = s.update(&[0.3, -0.1, 0.0, 0.9, 0.2, -0.5, 0.1]).unwrap();
        for (a, b) in s.q.iter().zip(&next.q) {
            assert!((a - b).abs() < 1e-200);
        }
    }

    #[test]
    fn median_combination_is_unchanged() {
        let s = CombinationSchedule::uniform(ScheduleConfig::default()).unwrap();
        let delta = [0.7, 0.1, 0.2, 0.4, 0.3, 0.5, 0.6];
        let (next, trace) = s.update(&delta).unwrap();
        // 0.4 is the 4th smallest.
        assert_eq!(trace.idx[3], MEDIAN_IDX);
        assert_eq!(next.q[3], s.q[3]);
        assert!(next.q[1] > s.q[1] && next.q[0] < s.q[0]);
    }

    #[test]
    fn invalid_schedule_config() {
        let bad = ScheduleConfig {
            p_min: 0.6,
            ..ScheduleConfig::default()
        };
        assert!(CombinationSchedule::uniform(bad).is_err());
        let bad = ScheduleConfig {
            q_base: 1.0,
            ..ScheduleConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn sampling_is_deterministic() {
        let s = CombinationSchedule::uniform(ScheduleConfig::default()).unwrap();
        let mut a = Rng::new(5);
        let mut b = Rng::new(5);
        let xs: Vec<_> = (0..100).map(|_| s.sample(&mut a)).collect();
        let ys: Vec<_> = (0..100).map(|_| s.sample(&mut b)).collect();
        assert_eq!(xs, ys);
    }
}
