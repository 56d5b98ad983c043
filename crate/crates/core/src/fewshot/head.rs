use rand::Rng;

use crate::autodiff::{Checkpoint, Tensor};
use crate::error::{Error, Result};

fn check_matrix(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match *t.shape() {
        [m, d] => Ok((m, d)),
        ref s => Err(Error::shape(op, "rank", format!("expected [M, D], got {s:?}"))),
    }
}

/// Per-class means of `embeddings [M, D]`: `-> [n_classes, D]`.
pub fn compute_prototypes(embeddings: &Tensor, labels: &[usize], n_classes: usize) -> Result<Tensor> {
    let (m, d) = check_matrix("compute_prototypes", embeddings)?;
    if labels.len() != m {
        return Err(Error::shape(
            "compute_prototypes",
            "row (0)",
            format!("{m} embeddings but {} labels", labels.len()),
        ));
    }
    let mut sums = vec![0.0f64; n_classes * d];
    let mut counts = vec![0usize; n_classes];
    for (row, &l) in embeddings.data().chunks(d).zip(labels) {
        if l >= n_classes {
            return Err(Error::contract("compute_prototypes", format!("label {l} outside 0..{n_classes}")));
        }
        counts[l] += 1;
        for (s, &v) in sums[l * d..(l + 1) * d].iter_mut().zip(row) {
            *s += v as f64;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::contract("compute_prototypes", format!("class {empty} has no samples")));
    }
    let data = sums
        .chunks(d)
        .zip(&counts)
        .flat_map(|(row, &c)| row.iter().map(move |s| (s / c as f64) as f32))
        .collect();
    Tensor::new(vec![n_classes, d], data)
}

/// Squared Euclidean distances `[Q, N]` accumulated in `f64`.
pub fn sq_distances(queries: &Tensor, protos: &Tensor) -> Result<Vec<f64>> {
    let (_, d) = check_matrix("sq_distances", queries)?;
    let (_, pd) = check_matrix("sq_distances", protos)?;
    if d != pd {
        return Err(Error::shape("sq_distances", "feature (1)", format!("{d} vs {pd}")));
    }
    let mut out = Vec::new();
    for z in queries.data().chunks(d) {
        for c in protos.data().chunks(d) {
            out.push(z.iter().zip(c).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum());
        }
    }
    Ok(out)
}

fn argmax_low(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

fn softmax(row: &[f64]) -> Vec<f32> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| (e / total) as f32).collect()
}

/// Predicted labels and class probabilities, one row per query.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    pub scores: Vec<Vec<f32>>,
}

impl Predictions {
    fn from_logits(logits: &[f64], classes: usize) -> Self {
        let rows: Vec<&[f64]> = logits.chunks(classes).collect();
        Predictions {
            labels: rows.iter().map(|r| argmax_low(r)).collect(),
            scores: rows.iter().map(|r| softmax(r)).collect(),
        }
    }

    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        let hits = self.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len().max(1) as f64
    }
}

/// Nearest prototype under squared Euclidean distance (ties to the lowest
/// class index); scores are a softmax over negated distances.
pub fn classify_prototypes(protos: &Tensor, query_emb: &Tensor) -> Result<Predictions> {
    let n = protos.shape()[0];
    let neg: Vec<f64> = sq_distances(query_emb, protos)?.into_iter().map(|v| -v).collect();
    Ok(Predictions::from_logits(&neg, n))
}

/// Linear classifier `z -> W z + b` over embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl LinearHead {
    /// `W_n = 2 c_n`, `b_n = -|c_n|^2`, so that `argmax(W z + b)` is the
    /// nearest prototype.
    pub fn from_prototypes(protos: &Tensor) -> Result<Self> {
        let (n, d) = check_matrix("init_head", protos)?;
        let weight = protos.data().iter().map(|v| 2.0 * v).collect();
        let bias = protos
            .data()
            .chunks(d)
            .map(|c| -(c.iter().map(|&v| (v as f64).powi(2)).sum::<f64>()) as f32)
            .collect();
        Ok(LinearHead {
            weight: Tensor::new(vec![n, d], weight)?,
            bias: Tensor::new(vec![n], bias)?,
        })
    }

    /// Uniform in `±1/sqrt(D)` for both weights and biases.
    pub fn random<R: Rng + ?Sized>(classes: usize, dim: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (dim as f32).sqrt();
        let mut draw = |len: usize| (0..len).map(|_| rng.random_range(-bound..bound)).collect::<Vec<_>>();
        let weight = draw(classes * dim);
        let bias = draw(classes);
        LinearHead {
            weight: Tensor::new(vec![classes, dim], weight).expect("sized"),
            bias: Tensor::new(vec![classes], bias).expect("sized"),
        }
    }

    pub fn classes(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.weight.shape()[1]
    }

    /// Logits accumulated in `f64`, `[Q, N]` row-major.
    pub fn logits(&self, emb: &Tensor) -> Result<Vec<f64>> {
        let (_, d) = check_matrix("LinearHead::logits", emb)?;
        if d != self.dim() {
            return Err(Error::shape("LinearHead::logits", "feature (1)", format!("{d} vs {}", self.dim())));
        }
        let mut out = Vec::new();
        for z in emb.data().chunks(d) {
            for (w, &b) in self.weight.data().chunks(d).zip(self.bias.data()) {
                out.push(b as f64 + w.iter().zip(z).map(|(&a, &x)| a as f64 * x as f64).sum::<f64>());
            }
        }
        Ok(out)
    }

    pub fn predict(&self, emb: &Tensor) -> Result<Predictions> {
        Ok(Predictions::from_logits(&self.logits(emb)?, self.classes()))
    }

    pub fn write_into(&self, ck: &mut Checkpoint, prefix: &str) {
        ck.insert(format!("{prefix}.weight"), self.weight.clone());
        ck.insert(format!("{prefix}.bias"), self.bias.clone());
    }

    pub fn read_from(ck: &Checkpoint, prefix: &str) -> Result<Self> {
        let weight = ck.require(&format!("{prefix}.weight"))?.clone();
        let bias = ck.require(&format!("{prefix}.bias"))?.clone();
        if weight.rank() != 2 || bias.shape() != [weight.shape()[0]] {
            return Err(Error::Checkpoint(format!("{prefix}: inconsistent head shapes")));
        }
        Ok(LinearHead { weight, bias })
    }
}

pub fn init_head(protos: &Tensor) -> Result<LinearHead> {
    LinearHead::from_prototypes(protos)
}
