//! Classification metrics and the per-condition metrics table.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::combo::ModalityCombination;
use crate::error::{Error, Result};

/// ACC, macro-F1, WA and UA as fractions in `[0, 1]`.
///
/// WA weights each class recall by its frequency, which equals plain accuracy.
/// UA is the mean per-class recall over classes present in the labels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub acc: f64,
    pub f1: f64,
    pub wa: f64,
    pub ua: f64,
}

impl Metrics {
    pub fn mean(items: &[Metrics]) -> Metrics {
        let n = items.len() as f64;
        let sum = |f: fn(&Metrics) -> f64| items.iter().map(f).sum::<f64>() / n;
        Metrics {
            acc: sum(|m| m.acc),
            f1: sum(|m| m.f1),
            wa: sum(|m| m.wa),
            ua: sum(|m| m.ua),
        }
    }
}

pub fn compute_metrics(preds: &[usize], labels: &[usize]) -> Result<Metrics> {
    if preds.is_empty() || preds.len() != labels.len() {
        return Err(Error::contract(format!(
            "metrics need equal nonzero lengths, got {} preds and {} labels",
            preds.len(),
            labels.len()
        )));
    }
    let n = labels.len() as f64;
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count() as f64;
    let acc = correct / n;

    let label_classes: BTreeSet<usize> = labels.iter().copied().collect();
    let all_classes: BTreeSet<usize> = label_classes.union(&preds.iter().copied().collect()).copied().collect();

    let count = |pred: Option<usize>, label: Option<usize>| {
        preds
            .iter()
            .zip(labels)
            .filter(|(&p, &l)| pred.map_or(true, |c| p == c) && label.map_or(true, |c| l == c))
            .count() as f64
    };

    let mut recall_sum = 0.0;
    let mut wa = 0.0;
    for &c in &label_classes {
        let support = count(None, Some(c));
        let recall = count(Some(c), Some(c)) / support;
        recall_sum += recall;
        wa += support / n * recall;
    }
    let ua = recall_sum / label_classes.len() as f64;

    let mut f1_sum = 0.0;
    for &c in &all_classes {
        let tp = count(Some(c), Some(c));
        let predicted = count(Some(c), None);
        let actual = count(None, Some(c));
        if tp > 0.0 {
            f1_sum += 2.0 * tp / (predicted + actual);
        }
    }
    let f1 = f1_sum / all_classes.len() as f64;

    Ok(Metrics { acc, f1, wa, ua })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Fixed,
    Random,
}

impl std::str::FromStr for Protocol {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fixed" => Ok(Protocol::Fixed),
            "random" => Ok(Protocol::Random),
            _ => Err(Error::config("protocol", format!("expected fixed|random, got `{s}`"))),
        }
    }
}

impl std::fmt::Display for Protocol {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Protocol::Fixed => "fixed",
            Protocol::Random => "random",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionMetrics {
    /// Combination code such as `at`, or `random`.
    pub condition: String,
    pub metrics: Metrics,
}

/// Per-condition results in table order `{a} {t} {v} {a,v} {a,t} {t,v}`,
/// then `{a,t,v}`; `average` covers the six incomplete conditions only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub protocol: Protocol,
    pub conditions: Vec<ConditionMetrics>,
    pub average: Option<Metrics>,
}

impl MetricsRecord {
    pub fn fixed(per_combo: &[(ModalityCombination, Metrics)]) -> Self {
        let conditions: Vec<ConditionMetrics> = per_combo
            .iter()
            .map(|(c, m)| ConditionMetrics {
                condition: c.code(),
                metrics: *m,
            })
            .collect();
        let incomplete: Vec<Metrics> = per_combo
            .iter()
            .filter(|(c, _)| !c.is_full())
            .map(|(_, m)| *m)
            .collect();
        let average = (!incomplete.is_empty()).then(|| Metrics::mean(&incomplete));
        Self {
            protocol: Protocol::Fixed,
            conditions,
            average,
        }
    }

    pub fn random(overall: Metrics) -> Self {
        Self {
            protocol: Protocol::Random,
            conditions: vec![ConditionMetrics {
                condition: "random".into(),
                metrics: overall,
            }],
            average: None,
        }
    }

    pub fn get(&self, condition: &str) -> Option<Metrics> {
        self.conditions
            .iter()
            .find(|c| c.condition == condition)
            .map(|c| c.metrics)
    }

    fn header_label(condition: &str) -> String {
        match condition.parse::<ModalityCombination>() {
            Ok(c) if condition != "random" => c.to_string(),
            _ => condition.to_string(),
        }
    }

    /// Plain-text table, percentages with two decimals; the Average column
    /// sits before `{a,t,v}`.
    pub fn to_table(&self) -> String {
        let mut cols: Vec<(String, Metrics)> = Vec::new();
        let mut full = None;
        for c in &self.conditions {
            if c.condition == "atv" {
                full = Some(c.metrics);
            } else {
                cols.push((Self::header_label(&c.condition), c.metrics));
            }
        }
        if let Some(avg) = self.average {
            cols.push(("Average".into(), avg));
        }
        if let Some(f) = full {
            cols.push(("{a,t,v}".into(), f));
        }
        let mut s = String::new();
        let _ = write!(s, "{:<8}", "metric");
        for (h, _) in &cols {
            let _ = write!(s, " {h:>9}");
        }
        s.push('\n');
        let rows: [(&str, fn(&Metrics) -> f64); 4] = [
            ("ACC", |m| m.acc),
            ("F1", |m| m.f1),
            ("WA", |m| m.wa),
            ("UA", |m| m.ua),
        ];
        for (name, f) in rows {
            let _ = write!(s, "{name:<8}");
            for (_, m) in &cols {
                let _ = write!(s, " {:>9.2}", 100.0 * f(m));
            }
            s.push('\n');
        }
        s
    }
}
