//! Calibration runs and float-vs-candidate fidelity metrics.

use serde::{Deserialize, Serialize};

use super::corpus::Corpus;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::mamba::{forward, ForwardPass, HookSet, MambaModel, NoObserver};
use crate::outlier::CalibrationStats;
use crate::tensor::Tensor;

/// Record every tap over the corpus. Each sequence is reduced separately and
/// the per-sequence statistics are merged in corpus order, so the result does
/// not depend on the execution strategy.
pub fn calibrate(model: &MambaModel, corpus: &Corpus, exec: Execution) -> Result<CalibrationStats> {
    if corpus.is_empty() {
        return Err(Error::invalid("calibration corpus is empty"));
    }
    let hooks = HookSet::record_all(model.config.n_layers);
    let parts = exec.try_map(&corpus.sequences, |seq| {
        let mut stats = CalibrationStats::default();
        forward(model, seq, &hooks, &mut stats)?;
        Ok(stats)
    })?;
    parts
        .iter()
        .try_fold(CalibrationStats::default(), |acc, s| acc.merge(s))
}

/// Float reference outputs for a corpus, computed once and shared by every
/// configuration evaluated against it.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub corpus: Corpus,
    pub passes: Vec<ForwardPass>,
}

impl Baseline {
    pub fn compute(model: &MambaModel, corpus: &Corpus, exec: Execution) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::invalid("evaluation corpus is empty"));
        }
        let passes = exec.try_map(&corpus.sequences, |seq| {
            forward(model, seq, &HookSet::new(), &mut NoObserver)
        })?;
        Ok(Self {
            corpus: corpus.clone(),
            passes,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mse: f64,
    pub cosine: f64,
    pub max_abs: f64,
    pub top1_agreement: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub mse: f64,
    pub cosine: f64,
    pub max_abs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fidelity {
    pub metrics: Metrics,
    pub per_layer: Vec<LayerMetrics>,
}

/// Running sums for MSE, cosine and max deviation between two signals.
#[derive(Debug, Clone, Copy, Default)]
struct Diff {
    n: u64,
    sq: f64,
    dot: f64,
    aa: f64,
    bb: f64,
    max_abs: f64,
}

impl Diff {
    fn of(a: &[f32], b: &[f32]) -> Self {
        let mut d = Diff::default();
        for (&x, &y) in a.iter().zip(b) {
            let (x, y) = (x as f64, y as f64);
            d.n += 1;
            d.sq += (x - y) * (x - y);
            d.dot += x * y;
            d.aa += x * x;
            d.bb += y * y;
            d.max_abs = d.max_abs.max((x - y).abs());
        }
        d
    }

    fn add(self, o: Diff) -> Diff {
        Diff {
            n: self.n + o.n,
            sq: self.sq + o.sq,
            dot: self.dot + o.dot,
            aa: self.aa + o.aa,
            bb: self.bb + o.bb,
            max_abs: self.max_abs.max(o.max_abs),
        }
    }

    fn mse(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.sq / self.n as f64
        }
    }

    fn cosine(&self) -> f64 {
        if self.sq == 0.0 {
            return 1.0;
        }
        if self.aa == 0.0 || self.bb == 0.0 {
            return 0.0;
        }
        (self.dot / (self.aa.sqrt() * self.bb.sqrt())).clamp(-1.0, 1.0)
    }
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn top1_matches(a: &Tensor, b: &Tensor) -> (u64, u64) {
    let (t, v) = a.dims2().expect("rank-2 logits");
    let hits = (0..t)
        .filter(|&i| argmax(&a.f32()[i * v..(i + 1) * v]) == argmax(&b.f32()[i * v..(i + 1) * v]))
        .count();
    (hits as u64, t as u64)
}

struct SeqDiff {
    logits: Diff,
    layers: Vec<Diff>,
    hits: u64,
    positions: u64,
}

/// Compare a candidate (model plus hooks) against the float baseline.
pub fn evaluate_against(
    baseline: &Baseline,
    model_q: &MambaModel,
    hooks: &HookSet,
    exec: Execution,
) -> Result<Fidelity> {
    let idx: Vec<usize> = (0..baseline.passes.len()).collect();
    let parts = exec.try_map(&idx, |&i| {
        let seq = &baseline.corpus.sequences[i];
        let q = forward(model_q, seq, hooks, &mut NoObserver)?;
        if let Some(pos) = q.logits.first_non_finite() {
            return Err(Error::NonFinite {
                what: "candidate logits",
                index: pos,
            });
        }
        let fp = &baseline.passes[i];
        let (hits, positions) = top1_matches(&fp.logits, &q.logits);
        Ok(SeqDiff {
            logits: Diff::of(fp.logits.f32(), q.logits.f32()),
            layers: fp
                .layer_outputs
                .iter()
                .zip(&q.layer_outputs)
                .map(|(a, b)| Diff::of(a.f32(), b.f32()))
                .collect(),
            hits,
            positions,
        })
    })?;
    let n_layers = model_q.config.n_layers;
    let mut logits = Diff::default();
    let mut layers = vec![Diff::default(); n_layers];
    let (mut hits, mut positions) = (0, 0);
    for p in parts {
        logits = logits.add(p.logits);
        for (acc, d) in layers.iter_mut().zip(p.layers) {
            *acc = acc.add(d);
        }
        hits += p.hits;
        positions += p.positions;
    }
    Ok(Fidelity {
        metrics: Metrics {
            mse: logits.mse(),
            cosine: logits.cosine(),
            max_abs: logits.max_abs,
            top1_agreement: if positions == 0 { 1.0 } else { hits as f64 / positions as f64 },
        },
        per_layer: layers
            .iter()
            .enumerate()
            .map(|(layer, d)| LayerMetrics {
                layer,
                mse: d.mse(),
                cosine: d.cosine(),
                max_abs: d.max_abs,
            })
            .collect(),
    })
}

pub fn evaluate_fidelity(
    model_fp: &MambaModel,
    model_q: &MambaModel,
    hooks: &HookSet,
    corpus: &Corpus,
    exec: Execution,
) -> Result<Fidelity> {
    if model_fp.config != model_q.config {
        return Err(Error::invalid(format!(
            "baseline and candidate configs differ: {:?} vs {:?}",
            model_fp.config, model_q.config
        )));
    }
    evaluate_against(&Baseline::compute(model_fp, corpus, exec)?, model_q, hooks, exec)
}
