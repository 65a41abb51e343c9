//! Frozen unimodal encoders, combination-aware low-rank adapter banks,
//! cross-attention fusion, and the dual prediction heads.
//!
//! Shapes follow a row-per-sample convention: a batch of `B` pooled vectors
//! is a `B x d` matrix, a batch of sequences is `(B*L) x raw_dim`.
//!
//! During fine-tuning each present modality `m` of combination `i` yields
//! three pooled vectors: the frozen encoder output `R`, the private adapter
//! output `R_prt = alpha * B_i A_i x`, and the shared adapter output
//! `R_com = alpha * B_com A_com x`. The adapters sit in parallel to the
//! encoder: fusion sees `R + R_prt` on the private path and `R + R_com` on the
//! common path.

mod params;

pub use params::{Ctx, ParamId, ParamStore};

use serde::{Deserialize, Serialize};

use crate::combo::{Modality, ModalityCombination};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::Var;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub raw_dim: usize,
    pub seq_len: usize,
    pub d_model: usize,
    /// Number of classes, or 1 for regression.
    pub num_outputs: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Standard deviation of the Gaussian initialization of `A`.
    pub lora_init_std: f64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("raw_dim", self.raw_dim),
            ("seq_len", self.seq_len),
            ("d_model", self.d_model),
            ("num_outputs", self.num_outputs),
            ("rank", self.rank),
        ] {
            if v == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(Error::config("alpha", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Pretrained,
    Finetuned,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Pretrained => "pretrained",
            Phase::Finetuned => "finetuned",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn forward(&self, ctx: &mut Ctx, x: Var) -> Result<Var> {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let h = ctx.tape.matmul(x, w)?;
        ctx.tape.add_row(h, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Encoder {
    hidden: Linear,
    out: Linear,
}

/// A low-rank pair: `A` is `r x d_in`, `B` is `d_out x r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoraPair {
    pub a: ParamId,
    pub b: ParamId,
}

impl LoraPair {
    /// `alpha * x A^T B^T` for row-batched `x`.
    fn forward(&self, ctx: &mut Ctx, x: Var, alpha: f64) -> Result<Var> {
        let (a, b) = (ctx.p(self.a), ctx.p(self.b));
        let at = ctx.tape.transpose(a);
        let bt = ctx.tape.transpose(b);
        let down = ctx.tape.matmul(x, at)?;
        let up = ctx.tape.matmul(down, bt)?;
        Ok(if alpha == 1.0 {
            up
        } else {
            ctx.tape.scale(up, alpha)
        })
    }

    /// The effective weight delta `alpha * B A`, `d_out x d_in`.
    pub fn delta(&self, params: &ParamStore, alpha: f64) -> Tensor {
        params
            .get(self.b)
            .matmul(params.get(self.a))
            .expect("lora shapes")
            .map(|v| alpha * v)
    }
}

/// Per modality: one private pair per combination containing it, plus one
/// shared pair.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterBank {
    private: [[Option<LoraPair>; ModalityCombination::COUNT]; 3],
    common: [LoraPair; 3],
}

impl AdapterBank {
    pub fn private(&self, m: Modality, combo: ModalityCombination) -> Option<LoraPair> {
        self.private[m.index()][combo.index()]
    }

    pub fn common(&self, m: Modality) -> LoraPair {
        self.common[m.index()]
    }

    pub fn pairs(&self) -> impl Iterator<Item = LoraPair> + '_ {
        self.private
            .iter()
            .flatten()
            .flatten()
            .copied()
            .chain(self.common.iter().copied())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Fusion {
    query: ParamId,
    key: [ParamId; 3],
    value: [ParamId; 3],
}

/// Parameters added for fine-tuning.
#[derive(Debug, Clone, PartialEq)]
struct Adaptation {
    bank: AdapterBank,
    head_prt: Linear,
    gate: Linear,
}

/// Encoder-side inputs for one modality of a batch.
#[derive(Debug, Clone)]
pub struct ModalityInput {
    /// `(B*L) x raw_dim` sequences; required unless `encoded` is given.
    pub seq: Option<Tensor>,
    /// `B x raw_dim` sequence-pooled raw features (adapter input).
    pub pooled_raw: Tensor,
    /// `B x d` cached pooled encoder output.
    pub encoded: Option<Tensor>,
}

/// A batch whose samples all share one presence set.
#[derive(Debug, Clone)]
pub struct BatchInput {
    pub combo: ModalityCombination,
    pub inputs: [Option<ModalityInput>; 3],
}

impl BatchInput {
    pub fn size(&self) -> usize {
        self.inputs
            .iter()
            .flatten()
            .next()
            .map_or(0, |i| i.pooled_raw.rows())
    }
}

/// Tape handles for the representations of one modality.
#[derive(Debug, Clone, Copy)]
pub struct ModalityReps {
    pub modality: Modality,
    /// Pooled frozen-encoder output.
    pub base: Var,
    pub private: Option<Var>,
    pub common: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub y_last: Var,
    pub y_hat: Var,
    pub y_com: Var,
    pub weight: Option<Var>,
    pub reps: Vec<ModalityReps>,
}

#[derive(Debug, Default)]
pub struct ForwardOptions<'r> {
    /// Encoder hidden-layer dropout: `(rng, rate)`.
    pub dropout: Option<(&'r mut Rng, f64)>,
    /// Replace the learned gate with a constant weight.
    pub gate_override: Option<f64>,
    /// Ignore attached adapters and run only the base path.
    pub base_only: bool,
}

/// Plain-value prediction for one batch.
#[derive(Debug, Clone)]
pub struct Prediction {
    pub y_last: Tensor,
    pub y_hat: Tensor,
    pub y_com: Tensor,
    pub weight: Option<Tensor>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub phase: Phase,
    encoders: [Encoder; 3],
    fusion: Fusion,
    head_com: Linear,
    adaptation: Option<Adaptation>,
}

fn gaussian(rng: &mut Rng, rows: usize, cols: usize, std: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| std * rng.normal()).collect();
    Tensor::matrix(rows, cols, data)
}

fn add_linear(
    params: &mut ParamStore,
    name: &str,
    rng: &mut Rng,
    d_in: usize,
    d_out: usize,
) -> Linear {
    let std = 1.0 / (d_in as f64).sqrt();
    Linear {
        w: params.insert(format!("{name}.w"), gaussian(rng, d_in, d_out, std)),
        b: params.insert(format!("{name}.b"), Tensor::zeros(1, d_out)),
    }
}

impl Model {
    /// A freshly initialized base model (encoders, fusion, common head).
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParamStore::default();
        let encoders = Modality::ALL.map(|m| Encoder {
            hidden: add_linear(&mut params, &format!("enc.{}.hidden", m.letter()), rng, config.raw_dim, d),
            out: add_linear(&mut params, &format!("enc.{}.out", m.letter()), rng, d, d),
        });
        let std = 1.0 / (d as f64).sqrt();
        let query = params.insert("fusion.query", gaussian(rng, d, 1, std));
        let key = Modality::ALL.map(|m| {
            params.insert(format!("fusion.key.{}", m.letter()), gaussian(rng, d, d, std))
        });
        let value = Modality::ALL.map(|m| {
            params.insert(format!("fusion.value.{}", m.letter()), gaussian(rng, d, d, std))
        });
        let head_com = add_linear(&mut params, "head.com", rng, d, config.num_outputs);
        Ok(Self {
            config,
            params,
            phase: Phase::Pretrained,
            encoders,
            fusion: Fusion { query, key, value },
            head_com,
            adaptation: None,
        })
    }

    /// Adds the adapter bank (`A ~ N(0, std^2)`, `B = 0`), a characteristic
    /// head initialized as a copy of the common head, and a zero gate.
    pub fn attach_adapters(&mut self, rank: usize, alpha: f64, rng: &mut Rng) -> Result<()> {
        if self.adaptation.is_some() {
            return Err(Error::contract("adapters are already attached"));
        }
        if rank == 0 {
            return Err(Error::config("rank", "must be at least 1"));
        }
        self.config.rank = rank;
        self.config.alpha = alpha;
        let (d, raw) = (self.config.d_model, self.config.raw_dim);
        let std = self.config.lora_init_std;
        let params = &mut self.params;
        let mut pair = |name: String, rng: &mut Rng| LoraPair {
            a: params.insert(format!("{name}.A"), gaussian(rng, rank, raw, std)),
            b: params.insert(format!("{name}.B"), Tensor::zeros(d, rank)),
        };
        let mut private = [[None; ModalityCombination::COUNT]; 3];
        for m in Modality::ALL {
            for combo in ModalityCombination::ALL.iter().filter(|c| c.contains(m)) {
                private[m.index()][combo.index()] = Some(pair(
                    format!("lora.{}.prt.{}", m.letter(), combo.code()),
                    rng,
                ));
            }
        }
        let common = Modality::ALL.map(|m| pair(format!("lora.{}.com", m.letter()), rng));

        let head_prt = Linear {
            w: self.params.insert("head.prt.w", self.params.get(self.head_com.w).clone()),
            b: self.params.insert("head.prt.b", self.params.get(self.head_com.b).clone()),
        };
        let gate = Linear {
            w: self.params.insert("gate.w", Tensor::zeros(d, 1)),
            b: self.params.insert("gate.b", Tensor::zeros(1, 1)),
        };
        self.adaptation = Some(Adaptation {
            bank: AdapterBank { private, common },
            head_prt,
            gate,
        });
        Ok(())
    }

    pub fn adapters(&self) -> Option<&AdapterBank> {
        self.adaptation.as_ref().map(|a| &a.bank)
    }

    pub fn has_adapters(&self) -> bool {
        self.adaptation.is_some()
    }

    pub fn encoder_params(&self) -> Vec<ParamId> {
        self.encoders
            .iter()
            .flat_map(|e| [e.hidden.w, e.hidden.b, e.out.w, e.out.b])
            .collect()
    }

    pub fn fusion_params(&self) -> Vec<ParamId> {
        let f = &self.fusion;
        let mut v = vec![f.query];
        v.extend(f.key);
        v.extend(f.value);
        v
    }

    pub fn head_com_params(&self) -> Vec<ParamId> {
        vec![self.head_com.w, self.head_com.b]
    }

    /// Encoders, fusion and the common head.
    pub fn base_params(&self) -> Vec<ParamId> {
        let mut v = self.encoder_params();
        v.extend(self.fusion_params());
        v.extend(self.head_com_params());
        v
    }

    pub fn adapter_params(&self) -> Vec<ParamId> {
        self.adapters()
            .map(|b| b.pairs().flat_map(|p| [p.a, p.b]).collect())
            .unwrap_or_default()
    }

    /// Adapters, both heads and the gate.
    pub fn finetune_params(&self) -> Vec<ParamId> {
        let mut v = self.adapter_params();
        v.extend(self.head_com_params());
        if let Some(a) = &self.adaptation {
            v.extend([a.head_prt.w, a.head_prt.b, a.gate.w, a.gate.b]);
        }
        v
    }

    fn check_raw(&self, x: &Tensor) -> Result<()> {
        if x.shape().len() != 2 || x.cols() != self.config.raw_dim {
            return Err(Error::Shape {
                op: "encode",
                left: x.shape().to_vec(),
                right: vec![self.config.seq_len, self.config.raw_dim],
            });
        }
        Ok(())
    }

    fn encode_var(
        &self,
        ctx: &mut Ctx,
        x: Var,
        m: Modality,
        dropout: Option<(&mut Rng, f64)>,
    ) -> Result<Var> {
        let enc = self.encoders[m.index()];
        let h = enc.hidden.forward(ctx, x)?;
        let mut h = ctx.tape.tanh(h);
        if let Some((rng, rate)) = dropout {
            if rate > 0.0 {
                let shape = ctx.value(h).shape().to_vec();
                let keep = 1.0 / (1.0 - rate);
                let n: usize = shape.iter().product();
                let mask: Vec<f64> = (0..n)
                    .map(|_| if rng.uniform() < rate { 0.0 } else { keep })
                    .collect();
                let mask = ctx.constant(Tensor::new(shape, mask)?);
                h = ctx.tape.mul(h, mask)?;
            }
        }
        enc.out.forward(ctx, h)
    }

    /// Frozen encoder: `L x raw_dim -> L x d`.
    pub fn encode(&self, x: &Tensor, m: Modality) -> Result<Tensor> {
        self.check_raw(x)?;
        let mut ctx = Ctx::inference(&self.params);
        let xv = ctx.constant(x.clone());
        let out = self.encode_var(&mut ctx, xv, m, None)?;
        Ok(ctx.value(out).clone())
    }

    fn lora_apply(&self, x: &Tensor, pair: LoraPair) -> Result<Tensor> {
        self.check_raw(x)?;
        let mut ctx = Ctx::inference(&self.params);
        let xv = ctx.constant(x.clone());
        let out = pair.forward(&mut ctx, xv, self.config.alpha)?;
        Ok(ctx.value(out).clone())
    }

    /// Private adapter of `m` for combination `combo`: `L x raw_dim -> L x d`.
    pub fn adapt_private(
        &self,
        x: &Tensor,
        m: Modality,
        combo: ModalityCombination,
    ) -> Result<Tensor> {
        if !combo.contains(m) {
            return Err(Error::contract(format!(
                "no private adapter: {m:?} is not part of {combo}"
            )));
        }
        let bank = self
            .adapters()
            .ok_or_else(|| Error::contract("adapters are not attached"))?;
        self.lora_apply(x, bank.private(m, combo).expect("bank covers m in combo"))
    }

    /// Shared adapter of `m`: `L x raw_dim -> L x d`.
    pub fn adapt_common(&self, x: &Tensor, m: Modality) -> Result<Tensor> {
        let bank = self
            .adapters()
            .ok_or_else(|| Error::contract("adapters are not attached"))?;
        self.lora_apply(x, bank.common(m))
    }

    fn fuse_vars(&self, ctx: &mut Ctx, reps: &[(Modality, Var)]) -> Result<Var> {
        if reps.is_empty() {
            return Err(Error::contract("fusion needs at least one representation"));
        }
        let scale = 1.0 / (self.config.d_model as f64).sqrt();
        let query = ctx.p(self.fusion.query);
        let mut scores = Vec::with_capacity(reps.len());
        let mut values = Vec::with_capacity(reps.len());
        for &(m, r) in reps {
            let k = ctx.p(self.fusion.key[m.index()]);
            let v = ctx.p(self.fusion.value[m.index()]);
            let key = ctx.tape.matmul(r, k)?;
            let s = ctx.tape.matmul(key, query)?;
            scores.push(ctx.tape.scale(s, scale));
            values.push(ctx.tape.matmul(r, v)?);
        }
        let scores = ctx.tape.concat_cols(&scores)?;
        let attn = ctx.tape.softmax_rows(scores);
        let mut out: Option<Var> = None;
        for (j, v) in values.into_iter().enumerate() {
            let w = ctx.tape.column(attn, j)?;
            let term = ctx.tape.mul_col(v, w)?;
            out = Some(match out {
                None => term,
                Some(acc) => ctx.tape.add(acc, term)?,
            });
        }
        Ok(out.expect("nonempty"))
    }

    /// Cross-attention fusion of pooled `1 x d` (or `B x d`) representations,
    /// keyed by modality.
    pub fn fuse(&self, reps: &[(Modality, Tensor)]) -> Result<Tensor> {
        let mut ctx = Ctx::inference(&self.params);
        let vars: Vec<(Modality, Var)> = reps
            .iter()
            .map(|(m, t)| (*m, ctx.constant(t.clone())))
            .collect();
        let out = self.fuse_vars(&mut ctx, &vars)?;
        Ok(ctx.value(out).clone())
    }

    /// Full forward pass on the tape.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        batch: &BatchInput,
        opts: ForwardOptions<'_>,
    ) -> Result<ForwardOut> {
        let combo = batch.combo;
        let ForwardOptions {
            mut dropout,
            gate_override,
            base_only,
        } = opts;
        let adaptation = if base_only {
            None
        } else {
            self.adaptation.as_ref()
        };

        let mut reps = Vec::with_capacity(combo.len());
        let mut raw_vars = Vec::with_capacity(combo.len());
        for m in combo.modalities() {
            let input = batch.inputs[m.index()]
                .as_ref()
                .ok_or_else(|| Error::contract(format!("batch lacks {m:?} for {combo}")))?;
            let base = match (&input.encoded, &input.seq) {
                (Some(enc), _) => ctx.constant(enc.clone()),
                (None, Some(seq)) => {
                    self.check_raw(seq)?;
                    let x = ctx.constant(seq.clone());
                    let drop = dropout.as_mut().map(|(r, p)| (&mut **r, *p));
                    let h = self.encode_var(ctx, x, m, drop)?;
                    ctx.tape.mean_groups(h, self.config.seq_len)?
                }
                (None, None) => {
                    return Err(Error::contract(format!("no features for {m:?}")));
                }
            };
            reps.push(ModalityReps {
                modality: m,
                base,
                private: None,
                common: None,
            });
            raw_vars.push(input);
        }

        let Some(ad) = adaptation else {
            let pairs: Vec<(Modality, Var)> = reps.iter().map(|r| (r.modality, r.base)).collect();
            let fused = self.fuse_vars(ctx, &pairs)?;
            let y = self.head_com.forward(ctx, fused)?;
            return Ok(ForwardOut {
                y_last: y,
                y_hat: y,
                y_com: y,
                weight: None,
                reps,
            });
        };

        let alpha = self.config.alpha;
        let mut prt_in = Vec::with_capacity(reps.len());
        let mut com_in = Vec::with_capacity(reps.len());
        for (rep, input) in reps.iter_mut().zip(&raw_vars) {
            let m = rep.modality;
            let pair = ad.bank.private(m, combo).ok_or_else(|| {
                Error::contract(format!("no private adapter for {m:?} in {combo}"))
            })?;
            let x = ctx.constant(input.pooled_raw.clone());
            let prt = pair.forward(ctx, x, alpha)?;
            let com = ad.bank.common(m).forward(ctx, x, alpha)?;
            rep.private = Some(prt);
            rep.common = Some(com);
            prt_in.push((m, ctx.tape.add(rep.base, prt)?));
            com_in.push((m, ctx.tape.add(rep.base, com)?));
        }
        let fused_prt = self.fuse_vars(ctx, &prt_in)?;
        let fused_com = self.fuse_vars(ctx, &com_in)?;
        let y_hat = ad.head_prt.forward(ctx, fused_prt)?;
        let y_com = self.head_com.forward(ctx, fused_com)?;
        let weight = match gate_override {
            Some(w) => ctx.constant(Tensor::full(batch.size(), 1, w)),
            None => {
                let g = ad.gate.forward(ctx, fused_prt)?;
                ctx.tape.sigmoid(g)
            }
        };
        let one_minus = ctx.tape.affine(weight, -1.0, 1.0);
        let a = ctx.tape.mul_col(y_com, one_minus)?;
        let b = ctx.tape.mul_col(y_hat, weight)?;
        let y_last = ctx.tape.add(a, b)?;
        Ok(ForwardOut {
            y_last,
            y_hat,
            y_com,
            weight: Some(weight),
            reps,
        })
    }

    /// Inference-only forward returning plain values.
    pub fn predict_batch(&self, batch: &BatchInput, opts: ForwardOptions<'_>) -> Result<Prediction> {
        let mut ctx = Ctx::inference(&self.params);
        let out = self.forward(&mut ctx, batch, opts)?;
        Ok(Prediction {
            y_last: ctx.value(out.y_last).clone(),
            y_hat: ctx.value(out.y_hat).clone(),
            y_com: ctx.value(out.y_com).clone(),
            weight: out.weight.map(|w| ctx.value(w).clone()),
        })
    }

    /// Pooled encoder output per sample for every modality, `B x d` each.
    pub fn encode_pooled(&self, seqs: &Tensor, m: Modality) -> Result<Tensor> {
        self.check_raw(seqs)?;
        let mut ctx = Ctx::inference(&self.params);
        let x = ctx.constant(seqs.clone());
        let h = self.encode_var(&mut ctx, x, m, None)?;
        let p = ctx.tape.mean_groups(h, self.config.seq_len)?;
        Ok(ctx.value(p).clone())
    }
}

/// Mean over sequence positions: `L x d -> 1 x d`.
pub fn pool(r: &Tensor) -> Tensor {
    let (l, d) = (r.rows(), r.cols());
    let mut out = vec![0.0; d];
    for row in r.data().chunks(d) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    Tensor::matrix(1, d, out.into_iter().map(|v| v / l as f64).collect())
}

#[cfg(test)]
mod tests;
