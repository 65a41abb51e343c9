//! Per-sample feature tables and batch assembly.

use crate::combo::{Modality, ModalityCombination};
use crate::error::{Error, Result};
use crate::model::{pool, BatchInput, ModalityInput, Model};
use crate::synth::{Dataset, Label, Utterance};
use crate::tensor::Tensor;

/// Stacks the listed rows of `t`.
pub fn gather_rows(t: &Tensor, idx: &[usize]) -> Tensor {
    let c = t.cols();
    let mut data = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        data.extend_from_slice(t.row_slice(i));
    }
    Tensor::matrix(idx.len(), c, data)
}

/// Pooled raw features and, optionally, pooled frozen-encoder outputs for
/// every sample and modality. Rows of absent modalities are zero and never
/// read.
#[derive(Debug, Clone)]
pub struct FeatureTable {
    pub presence: Vec<ModalityCombination>,
    pub labels: Vec<Label>,
    pub pooled_raw: [Tensor; 3],
    pub encoded: Option<[Tensor; 3]>,
    seq_len: usize,
}

impl FeatureTable {
    pub fn new(ds: &Dataset) -> Self {
        let raw = ds.config.raw_dim;
        let n = ds.len().max(1);
        let pooled_raw = Modality::ALL.map(|m| {
            let mut t = Tensor::zeros(n, raw);
            for (i, s) in ds.samples.iter().enumerate() {
                if let Some(f) = s.features(m) {
                    let p = pool(f);
                    t.data_mut()[i * raw..(i + 1) * raw].copy_from_slice(p.data());
                }
            }
            t
        });
        Self {
            presence: ds.samples.iter().map(Utterance::presence).collect(),
            labels: ds.samples.iter().map(|s| s.label).collect(),
            pooled_raw,
            encoded: None,
            seq_len: ds.config.seq_len,
        }
    }

    /// Builds the table and caches encoder outputs computed by `model`.
    pub fn with_encodings(ds: &Dataset, model: &Model) -> Result<Self> {
        let mut table = Self::new(ds);
        let d = model.config.d_model;
        let n = ds.len().max(1);
        let mut encoded = Vec::with_capacity(3);
        for m in Modality::ALL {
            let mut t = Tensor::zeros(n, d);
            let idx: Vec<usize> = (0..ds.len())
                .filter(|&i| ds.samples[i].presence().contains(m))
                .collect();
            for chunk in idx.chunks(256) {
                let seqs: Vec<&Tensor> = chunk
                    .iter()
                    .map(|&i| ds.samples[i].features(m).expect("present"))
                    .collect();
                let out = model.encode_pooled(&Tensor::vstack(&seqs), m)?;
                for (r, &i) in chunk.iter().enumerate() {
                    t.data_mut()[i * d..(i + 1) * d].copy_from_slice(out.row_slice(r));
                }
            }
            encoded.push(t);
        }
        table.encoded = Some(encoded.try_into().expect("three modalities"));
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// A batch of the given samples restricted to `combo`, using cached
    /// encodings (sequences are not needed).
    pub fn batch(&self, idx: &[usize], combo: ModalityCombination) -> Result<BatchInput> {
        let encoded = self
            .encoded
            .as_ref()
            .ok_or_else(|| Error::contract("feature table has no cached encodings"))?;
        for &i in idx {
            if combo.bits() & !self.presence[i].bits() != 0 {
                return Err(Error::contract(format!(
                    "sample {i} has presence {} but the batch needs {combo}",
                    self.presence[i]
                )));
            }
        }
        let mut inputs: [Option<ModalityInput>; 3] = Default::default();
        for m in combo.modalities() {
            inputs[m.index()] = Some(ModalityInput {
                seq: None,
                pooled_raw: gather_rows(&self.pooled_raw[m.index()], idx),
                encoded: Some(gather_rows(&encoded[m.index()], idx)),
            });
        }
        Ok(BatchInput { combo, inputs })
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<Label> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

/// A batch carrying raw sequences (the encoder runs inside the forward pass).
pub fn raw_batch(samples: &[&Utterance], combo: ModalityCombination) -> Result<BatchInput> {
    if samples.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let mut inputs: [Option<ModalityInput>; 3] = Default::default();
    for m in combo.modalities() {
        let mut seqs = Vec::with_capacity(samples.len());
        let mut pooled = Vec::with_capacity(samples.len());
        for s in samples {
            let f = s.features(m).ok_or_else(|| {
                Error::contract(format!(
                    "sample with presence {} lacks {m:?} needed by {combo}",
                    s.presence()
                ))
            })?;
            pooled.push(pool(f));
            seqs.push(f);
        }
        let pooled_refs: Vec<&Tensor> = pooled.iter().collect();
        inputs[m.index()] = Some(ModalityInput {
            seq: Some(Tensor::vstack(&seqs)),
            pooled_raw: Tensor::vstack(&pooled_refs),
            encoded: None,
        });
    }
    Ok(BatchInput { combo, inputs })
}
