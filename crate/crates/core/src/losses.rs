//! Training objectives: denoising MSE, the mapping-network regularizer, the
//! temporal self-attention smoothness loss, the decoupled contrastive loss on
//! bottleneck features, and their weighted sum.
//!
//! The tensor-valued losses are differentiable; the trainer calls
//! `backward` on the tensor returned by [`combine`].

use std::collections::VecDeque;

use candle_core::{DType, Device, Tensor, D};
use serde::{Deserialize, Serialize};

use crate::diffusion::same_shape;
use crate::error::{Error, Result};
use crate::model::AttentionRecord;

pub const DEFAULT_TAU: f64 = 0.1;

/// Mean squared error over every element.
pub fn simple_loss(eps_pred: &Tensor, eps: &Tensor) -> Result<Tensor> {
    same_shape(eps_pred, eps)?;
    Ok((eps_pred - eps)?.sqr()?.mean_all()?)
}

/// `λ_t = 1 - t/T`, the timestep weight of the regularizer.
pub fn reg_weight(t: usize, train_steps: usize) -> f64 {
    1.0 - t as f64 / train_steps as f64
}

/// `λ_t · MSE(eps_full, eps_image)`. Gradients flow through both operands.
pub fn reg_loss(eps_full: &Tensor, eps_image: &Tensor, t: usize, train_steps: usize) -> Result<Tensor> {
    same_shape(eps_full, eps_image)?;
    if t > train_steps {
        return Err(Error::param(format!("timestep {t} exceeds T = {train_steps}")));
    }
    let mse = (eps_full - eps_image)?.sqr()?.mean_all()?;
    Ok((mse * reg_weight(t, train_steps))?)
}

/// Sum over decoder layers `i = 1..N` and frames `j = 2..F` of
/// `(i/N) · mean|A_i^(j) - A_i^(j-1)|`.
pub fn trs_loss(record: &AttentionRecord) -> Result<Tensor> {
    trs_loss_maps(&record.self_attn)
}

/// [`trs_loss`] on bare maps, each `(B, F, ...)`.
pub fn trs_loss_maps(maps: &[Tensor]) -> Result<Tensor> {
    let n = maps.len();
    if n == 0 {
        return Err(Error::State("no decoder self-attention maps were captured".into()));
    }
    let mut total: Option<Tensor> = None;
    for (idx, map) in maps.iter().enumerate() {
        let dims = map.dims();
        if dims.len() < 2 {
            return Err(Error::shape(format!("attention map must be (B, F, ...), got {dims:?}")));
        }
        let frames = dims[1];
        if frames < 2 {
            return Err(Error::param(format!("temporal smoothness needs F >= 2, got {frames}")));
        }
        let weight = (idx + 1) as f64 / n as f64;
        let later = map.narrow(1, 1, frames - 1)?;
        let earlier = map.narrow(1, 0, frames - 1)?;
        let diff = (later - earlier)?.abs()?;
        // Mean over everything except the frame-pair axis, summed over pairs.
        let per_pair = diff.transpose(0, 1)?.contiguous()?.reshape((frames - 1, ()))?.mean(1)?;
        let term = (per_pair.sum_all()? * weight)?;
        total = Some(match total {
            Some(acc) => (acc + term)?,
            None => term,
        });
    }
    Ok(total.expect("at least one layer"))
}

fn l2_normalize(z: &Tensor) -> Result<Tensor> {
    let norm = z.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?;
    let min = norm.flatten_all()?.to_dtype(DType::F64)?.min(0)?.to_scalar::<f64>()?;
    if !(min > 0.0) || !min.is_finite() {
        return Err(Error::Numeric("cannot normalize a zero-norm or non-finite vector".into()));
    }
    Ok(z.broadcast_div(&norm)?)
}

/// Decoupled contrastive loss
/// `-⟨z1,z2⟩/τ + log Σ_q exp(⟨z1,z_q⟩/τ)` on L2-normalized embeddings. The
/// positive pair is not part of the denominator; queue entries are constants.
pub fn dc_loss(z1: &Tensor, z2: &Tensor, queue: &NegativeQueue, tau: f64) -> Result<Tensor> {
    let negatives = queue.as_tensor(z1.dtype())?;
    dc_loss_with(z1, z2, &negatives, tau)
}

/// [`dc_loss`] for a batch of pairs `(P, d)` against negatives `(Q, d)`,
/// averaged over pairs. A single vector `(d)` is treated as one pair.
pub fn dc_loss_with(z1: &Tensor, z2: &Tensor, negatives: &Tensor, tau: f64) -> Result<Tensor> {
    dc_core(z1, z2, negatives, tau, None)
}

/// [`dc_loss`] where pair `p` only contrasts against queue entries from
/// videos other than `video_ids[p]`. Pairs left without negatives are
/// dropped; `None` when no pair has any.
pub fn dc_loss_other_videos(
    z1: &Tensor,
    z2: &Tensor,
    queue: &NegativeQueue,
    video_ids: &[u64],
    tau: f64,
) -> Result<Option<Tensor>> {
    same_shape(z1, z2)?;
    let p = z1.dims2()?.0;
    if video_ids.len() != p {
        return Err(Error::shape(format!("{p} pairs but {} video ids", video_ids.len())));
    }
    let ids: Vec<u64> = queue.entries().map(|(_, id)| id).collect();
    let keep: Vec<u32> = (0..p as u32)
        .filter(|&i| ids.iter().any(|&q| q != video_ids[i as usize]))
        .collect();
    if keep.is_empty() {
        return Ok(None);
    }
    let mask: Vec<f64> = keep
        .iter()
        .flat_map(|&i| ids.iter().map(move |&q| if q == video_ids[i as usize] { MASKED } else { 0.0 }))
        .collect();
    let mask = Tensor::from_vec(mask, (keep.len(), ids.len()), &Device::Cpu)?.to_dtype(z1.dtype())?;
    let rows = Tensor::new(keep.as_slice(), &Device::Cpu)?;
    let negatives = queue.as_tensor(z1.dtype())?;
    let loss = dc_core(&z1.index_select(&rows, 0)?, &z2.index_select(&rows, 0)?, &negatives, tau, Some(&mask))?;
    Ok(Some(loss))
}

/// Additive logit offset that removes an entry from the denominator.
const MASKED: f64 = -1e9;

fn dc_core(z1: &Tensor, z2: &Tensor, negatives: &Tensor, tau: f64, mask: Option<&Tensor>) -> Result<Tensor> {
    same_shape(z1, z2)?;
    if !(tau > 0.0) {
        return Err(Error::param(format!("temperature must be positive, got {tau}")));
    }
    let (z1, z2) = match z1.rank() {
        1 => (z1.unsqueeze(0)?, z2.unsqueeze(0)?),
        2 => (z1.clone(), z2.clone()),
        r => return Err(Error::shape(format!("embeddings must be rank 1 or 2, got rank {r}"))),
    };
    let (q, d) = negatives.dims2()?;
    if q == 0 {
        return Err(Error::State("negative queue is empty".into()));
    }
    if d != z1.dim(1)? {
        return Err(Error::shape(format!(
            "embedding width {} does not match queue width {d}",
            z1.dim(1)?
        )));
    }
    let a = l2_normalize(&z1)?;
    let b = l2_normalize(&z2)?;
    let negatives = negatives.to_dtype(a.dtype())?.detach();
    let positive = ((&a * &b)?.sum(1)? / tau)?;
    let mut logits = (a.matmul(&negatives.t()?)? / tau)?;
    if let Some(mask) = mask {
        logits = (logits + mask)?;
    }
    let m = logits.max_keepdim(1)?.detach();
    let lse = (logits.broadcast_sub(&m)?.exp()?.sum_keepdim(1)?.log()? + &m)?.squeeze(1)?;
    Ok((lse - positive)?.mean_all()?)
}

/// Fixed-capacity FIFO of unit-norm embeddings, each tagged with the video it
/// came from. Oldest entries are evicted first.
#[derive(Debug, Clone, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    entries: VecDeque<(Vec<f64>, u64)>,
}

impl NegativeQueue {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(Error::param("queue capacity must be positive"));
        }
        Ok(Self {
            capacity,
            entries: VecDeque::with_capacity(capacity),
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.entries.front().map(|(v, _)| v.len())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&[f64], u64)> {
        self.entries.iter().map(|(v, id)| (v.as_slice(), *id))
    }

    /// Normalizes and appends each row of `z` (`(P, d)` or `(d)`), evicting the
    /// oldest entries beyond capacity. Nothing is pushed if any row has zero
    /// norm.
    pub fn push(&mut self, z: &Tensor, video_ids: &[u64]) -> Result<()> {
        let z = match z.rank() {
            1 => z.unsqueeze(0)?,
            2 => z.clone(),
            r => return Err(Error::shape(format!("expected rank 1 or 2 embeddings, got {r}"))),
        };
        let rows = z.detach().to_dtype(DType::F64)?.to_vec2::<f64>()?;
        if rows.len() != video_ids.len() {
            return Err(Error::param(format!(
                "{} embeddings but {} video ids",
                rows.len(),
                video_ids.len()
            )));
        }
        let mut normalized = Vec::with_capacity(rows.len());
        for row in rows {
            if let Some(d) = self.dim() {
                if row.len() != d {
                    return Err(Error::shape(format!("embedding width {} != queue width {d}", row.len())));
                }
            }
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if !(norm > 0.0) || !norm.is_finite() {
                return Err(Error::Numeric("cannot enqueue a zero-norm or non-finite vector".into()));
            }
            normalized.push(row.into_iter().map(|v| v / norm).collect::<Vec<_>>());
        }
        for (row, id) in normalized.into_iter().zip(video_ids) {
            if self.entries.len() == self.capacity {
                self.entries.pop_front();
            }
            self.entries.push_back((row, *id));
        }
        Ok(())
    }

    /// Immutable snapshot `(Q, d)`, oldest first.
    pub fn as_tensor(&self, dtype: DType) -> Result<Tensor> {
        let d = self
            .dim()
            .ok_or_else(|| Error::State("negative queue is empty".into()))?;
        let flat: Vec<f64> = self.entries.iter().flat_map(|(v, _)| v.iter().copied()).collect();
        Ok(Tensor::from_vec(flat, (self.entries.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
    }

    /// Rebuilds a queue from stored rows, which must already be unit norm.
    pub fn from_entries(capacity: usize, entries: Vec<(Vec<f64>, u64)>) -> Result<Self> {
        let mut q = Self::new(capacity)?;
        if entries.len() > capacity {
            return Err(Error::State(format!(
                "{} stored entries exceed capacity {capacity}",
                entries.len()
            )));
        }
        for (v, _) in &entries {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-5 {
                return Err(Error::State(format!("stored queue entry has norm {norm}")));
            }
        }
        q.entries = entries.into();
        Ok(q)
    }
}

/// The three auxiliary loss weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub trs: f64,
    pub reg: f64,
    pub dc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            trs: 0.1,
            reg: 0.1,
            dc: 0.1,
        }
    }
}

/// Per-step values of every loss term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub simple: f64,
    pub reg: f64,
    pub trs: f64,
    pub dc: f64,
    pub total: f64,
    pub weights: LossWeights,
}

/// Scalar parts of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LossParts {
    pub simple: f64,
    pub reg: f64,
    pub trs: f64,
    pub dc: f64,
}

/// `simple + λ_TRS·trs + λ_reg·reg + λ_DC·dc`.
pub fn total_loss(parts: LossParts, weights: LossWeights) -> Result<LossBreakdown> {
    let all = [
        parts.simple,
        parts.reg,
        parts.trs,
        parts.dc,
        weights.trs,
        weights.reg,
        weights.dc,
    ];
    if all.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite loss input: {parts:?} {weights:?}")));
    }
    let total = parts.simple + weights.trs * parts.trs + weights.reg * parts.reg + weights.dc * parts.dc;
    Ok(LossBreakdown {
        simple: parts.simple,
        reg: parts.reg,
        trs: parts.trs,
        dc: parts.dc,
        total,
        weights,
    })
}

/// Differentiable counterpart of [`total_loss`]. Missing terms count as zero.
pub fn combine(
    simple: &Tensor,
    reg: Option<&Tensor>,
    trs: Option<&Tensor>,
    dc: Option<&Tensor>,
    weights: LossWeights,
) -> Result<Tensor> {
    let mut total = simple.clone();
    for (term, w) in [(trs, weights.trs), (reg, weights.reg), (dc, weights.dc)] {
        if let Some(t) = term {
            if w != 0.0 {
                total = (total + (t * w)?)?;
            }
        }
    }
    Ok(total)
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    #[test]
    fn simple_loss_cases() {
        let a = t1(&[1.0, 2.0, 3.0]);
        assert_eq!(scalar(&simple_loss(&a, &a).unwrap()).unwrap(), 0.0);
        let b = (&a + 2.0).unwrap();
        assert!((scalar(&simple_loss(&b, &a).unwrap()).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(simple_loss(&a, &t1(&[1.0])), Err(Error::Shape(_))));
    }

    #[test]
    fn reg_loss_cases() {
        let a = t1(&[0.0, 0.0]);
        let b = t1(&[1.0, -1.0]);
        assert_eq!(scalar(&reg_loss(&a, &a, 7, 10).unwrap()).unwrap(), 0.0);
        assert_eq!(scalar(&reg_loss(&a, &b, 10, 10).unwrap()).unwrap(), 0.0);
        assert!((scalar(&reg_loss(&a, &b, 5, 10).unwrap()).unwrap() - 0.5).abs() < 1e-12);
        assert!(reg_loss(&a, &b, 11, 10).is_err());
    }

    #[test]
    fn trs_requires_two_frames_and_maps() {
        assert!(matches!(trs_loss_maps(&[]), Err(Error::State(_))));
        let one_frame = Tensor::zeros((1, 1, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(matches!(trs_loss_maps(&[one_frame]), Err(Error::Parameter(_))));
    }

    #[test]
    fn queue_fifo_and_normalization() {
        let mut q = NegativeQueue::new(2).unwrap();
        let z = Tensor::new(&[[3.0f64, 4.0], [0.0, 2.0], [5.0, 0.0]], &Device::Cpu).unwrap();
        q.push(&z, &[1, 2, 3]).unwrap();
        assert_eq!(q.len(), 2);
        let ids: Vec<u64> = q.entries().map(|(_, id)| id).collect();
        assert_eq!(ids, vec![2, 3]);
        for (v, _) in q.entries() {
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn queue_rejects_zero_vectors_atomically() {
        let mut q = NegativeQueue::new(4).unwrap();
        let z = Tensor::new(&[[1.0f64, 0.0], [0.0, 0.0]], &Device::Cpu).unwrap();
        assert!(matches!(q.push(&z, &[1, 2]), Err(Error::Numeric(_))));
        assert!(q.is_empty());
    }

    #[test]
    fn dc_requires_nonempty_queue() {
        let q = NegativeQueue::new(4).unwrap();
        let z = t1(&[1.0, 0.0]);
        assert!(matches!(dc_loss(&z, &z, &q, 0.1), Err(Error::State(_))));
    }

    #[test]
    fn dc_rejects_zero_norm() {
        let mut q = NegativeQueue::new(4).unwrap();
        q.push(&t1(&[0.0, 1.0]), &[0]).unwrap();
        assert!(matches!(dc_loss(&t1(&[0.0, 0.0]), &t1(&[1.0, 0.0]), &q, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn total_loss_rejects_non_finite() {
        let parts = LossParts {
            simple: f64::NAN,
            ..Default::default()
        };
        assert!(matches!(total_loss(parts, LossWeights::default()), Err(Error::Numeric(_))));
    }

    #[test]
    fn default_weights_are_one_tenth() {
        let w = LossWeights::default();
        assert_eq!((w.trs, w.reg, w.dc), (0.1, 0.1, 0.1));
        assert_eq!(DEFAULT_TAU, 0.1);
    }

    fn maps(v: &[&[f64]], shape: &[usize]) -> Tensor {
        let flat: Vec<f64> = v.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(flat, shape, &Device::Cpu).unwrap()
    }

    #[test]
    fn trs_golden_values() {
        // One layer, two frames of 2x2 maps that differ by 1 everywhere.
        let a = maps(&[&[1.0, 0.0, 0.0, 1.0], &[0.0, 1.0, 1.0, 0.0]], &[1, 2, 1, 2, 2]);
        assert!((scalar(&trs_loss_maps(&[a.clone()]).unwrap()).unwrap() - 1.0).abs() < 1e-12);
        let same = maps(&[&[1.0, 0.0, 0.0, 1.0], &[1.0, 0.0, 0.0, 1.0]], &[1, 2, 1, 2, 2]);
        assert_eq!(scalar(&trs_loss_maps(&[same.clone()]).unwrap()).unwrap(), 0.0);
        // Two layers, only layer 1 differs: weight 1/2.
        let v = scalar(&trs_loss_maps(&[a, same]).unwrap()).unwrap();
        assert!((v - 0.5).abs() < 1e-12);
    }

    #[test]
    fn trs_adjacent_swap_symmetry() {
        let a = maps(&[&[0.2, 0.8], &[0.6, 0.4]], &[1, 2, 1, 2]);
        let b = maps(&[&[0.6, 0.4], &[0.2, 0.8]], &[1, 2, 1, 2]);
        let la = scalar(&trs_loss_maps(&[a]).unwrap()).unwrap();
        let lb = scalar(&trs_loss_maps(&[b]).unwrap()).unwrap();
        assert_eq!(la, lb);
    }

    fn queue_of(rows: &[&[f64]]) -> NegativeQueue {
        let mut q = NegativeQueue::new(8).unwrap();
        for (i, r) in rows.iter().enumerate() {
            q.push(&t1(r), &[i as u64]).unwrap();
        }
        q
    }

    #[test]
    fn dc_golden_values() {
        let z = t1(&[1.0, 0.0]);
        let q = queue_of(&[&[0.0, 1.0]]);
        let v = scalar(&dc_loss(&z, &z, &q, DEFAULT_TAU).unwrap()).unwrap();
        assert!((v + 10.0).abs() < 1e-9, "{v}");
        let q = queue_of(&[&[1.0, 0.0]]);
        let v = scalar(&dc_loss(&z, &t1(&[0.0, 1.0]), &q, DEFAULT_TAU).unwrap()).unwrap();
        assert!((v - 10.0).abs() < 1e-9, "{v}");
    }

    #[test]
    fn dc_matches_scalar_oracle() {
        let z1 = [0.3, -1.2, 0.5];
        let z2 = [0.1, 0.4, 2.0];
        let negs: [&[f64]; 3] = [&[1.0, 1.0, 0.0], &[-0.2, 0.3, 0.9], &[0.0, 0.0, -1.0]];
        let unit = |v: &[f64]| {
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter().map(|x| x / n).collect::<Vec<_>>()
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let (a, b) = (unit(&z1), unit(&z2));
        let tau = 0.25;
        let expected = -dot(&a, &b) / tau + negs.iter().map(|n| (dot(&a, &unit(n)) / tau).exp()).sum::<f64>().ln();
        let got = scalar(&dc_loss(&t1(&z1), &t1(&z2), &queue_of(&negs), tau).unwrap()).unwrap();
        assert!((got - expected).abs() < 1e-10);
    }

    #[test]
    fn dc_other_videos_matches_filtered_oracle() {
        // Queue ids are 0, 1, 2 by position; pair 0 comes from video 1, pair 1
        // from video 7, pair 2 from video 0.
        let negs: [&[f64]; 3] = [&[1.0, 1.0, 0.0], &[-0.2, 0.3, 0.9], &[0.0, 0.0, -1.0]];
        let q = queue_of(&negs);
        let z1 = [[0.3, -1.2, 0.5], [1.0, 0.0, 0.0], [0.2, 0.2, 0.9]];
        let z2 = [[0.1, 0.4, 2.0], [0.5, 0.5, 0.0], [-0.3, 0.1, 0.4]];
        let ids = [1u64, 7, 0];
        let mut expected = 0.0;
        for p in 0..3 {
            let kept: Vec<f64> = (0..3)
                .filter(|&k| k as u64 != ids[p])
                .flat_map(|k| {
                    let n = negs[k].iter().map(|x| x * x).sum::<f64>().sqrt();
                    negs[k].iter().map(move |x| x / n)
                })
                .collect();
            let rows = kept.len() / 3;
            let negatives = Tensor::from_vec(kept, (rows, 3), &Device::Cpu).unwrap();
            expected += scalar(&dc_loss_with(&t1(&z1[p]), &t1(&z2[p]), &negatives, 0.1).unwrap()).unwrap() / 3.0;
        }
        let batch = |v: &[[f64; 3]; 3]| Tensor::new(v.concat(), &Device::Cpu).unwrap().reshape((3, 3)).unwrap();
        let got = dc_loss_other_videos(&batch(&z1), &batch(&z2), &q, &ids, 0.1).unwrap().unwrap();
        assert!((scalar(&got).unwrap() - expected).abs() < 1e-9, "{} vs {expected}", scalar(&got).unwrap());

        let only_self = queue_of(&[&[1.0, 0.0, 0.0]]);
        let none = dc_loss_other_videos(&batch(&z1), &batch(&z2), &only_self, &[0, 0, 0], 0.1).unwrap();
        assert!(none.is_none());
    }

    #[test]
    fn dc_monotone_in_positive_similarity() {
        let q = queue_of(&[&[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0]]);
        let z1 = t1(&[1.0, 0.0, 0.0]);
        let mut last = f64::INFINITY;
        for k in 0..=10 {
            let th = std::f64::consts::PI * (10 - k) as f64 / 10.0;
            let z2 = t1(&[th.cos(), 0.0, th.sin()]);
            let v = scalar(&dc_loss(&z1, &z2, &q, 0.1).unwrap()).unwrap();
            assert!(v < last);
            last = v;
        }
    }

    #[test]
    fn dc_decoupling() {
        let z1 = t1(&[1.0, 0.5]);
        let z2 = t1(&[0.8, 0.7]);
        let mut q = queue_of(&[&[-1.0, 0.2]]);
        let before = scalar(&dc_loss(&z1, &z2, &q, 0.1).unwrap()).unwrap();
        q.push(&z2, &[99]).unwrap();
        let after = scalar(&dc_loss(&z1, &z2, &q, 0.1).unwrap()).unwrap();
        assert!(after > before);
    }

    #[test]
    fn total_golden_values() {
        let w = LossWeights::default();
        assert_eq!(total_loss(LossParts::default(), w).unwrap().total, 0.0);
        let ones = LossParts {
            simple: 1.0,
            reg: 1.0,
            trs: 1.0,
            dc: 1.0,
        };
        let b = total_loss(ones, w).unwrap();
        assert!((b.total - 1.3).abs() < 1e-12);
        let zero = LossWeights {
            trs: 0.0,
            reg: 0.0,
            dc: 0.0,
        };
        assert_eq!(total_loss(ones, zero).unwrap().total, 1.0);
    }

    fn grad_check(f: impl Fn(&Tensor) -> Tensor, x: Vec<f64>, shape: &[usize]) {
        let t = Tensor::from_vec(x.clone(), shape, &Device::Cpu).unwrap();
        let var = candle_core::Var::from_tensor(&t).unwrap();
        let grads = f(var.as_tensor()).backward().unwrap();
        let g = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let eval = |d: f64| {
                let mut v = x.clone();
                v[i] += d;
                scalar(&f(&Tensor::from_vec(v, shape, &Device::Cpu).unwrap())).unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (fd - g[i]).abs();
            assert!(err < 1e-7 || err / fd.abs().max(g[i].abs()) < 1e-3, "element {i}: {fd} vs {}", g[i]);
        }
    }

    fn sample(n: usize, seed: u64) -> Vec<f64> {
        use rand::{RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn gradients_match_finite_differences() {
        let target = Tensor::from_vec(sample(12, 1), (2, 6), &Device::Cpu).unwrap();
        grad_check(|x| simple_loss(x, &target).unwrap(), sample(12, 2), &[2, 6]);
        grad_check(|x| reg_loss(x, &target, 3, 10).unwrap(), sample(12, 3), &[2, 6]);
        grad_check(|x| reg_loss(&target, x, 3, 10).unwrap(), sample(12, 4), &[2, 6]);
        // Maps away from ties so |.| is differentiable at the sample point.
        let m: Vec<f64> = sample(24, 5).iter().enumerate().map(|(i, v)| v + i as f64 * 0.37).collect();
        grad_check(|x| trs_loss_maps(&[x.clone(), (x * 2.0).unwrap()]).unwrap(), m, &[1, 3, 2, 4]);
        let negatives = Tensor::from_vec(sample(12, 6), (3, 4), &Device::Cpu).unwrap();
        let z2 = Tensor::from_vec(sample(4, 7), 4, &Device::Cpu).unwrap();
        grad_check(|x| dc_loss_with(x, &z2, &negatives, 0.1).unwrap(), sample(4, 8), &[4]);
        let z1 = Tensor::from_vec(sample(4, 9), 4, &Device::Cpu).unwrap();
        grad_check(|x| dc_loss_with(&z1, x, &negatives, 0.1).unwrap(), sample(4, 10), &[4]);
    }

    #[test]
    fn queue_fill_and_evict_sweep() {
        let mut q = NegativeQueue::new(512).unwrap();
        for k in 0..300u64 {
            let z = Tensor::from_vec(sample(8, k), (2, 4), &Device::Cpu).unwrap();
            q.push(&z, &[2 * k, 2 * k + 1]).unwrap();
            assert_eq!(q.len(), (2 * (k as usize + 1)).min(512));
        }
        let first = q.entries().next().unwrap().1;
        assert_eq!(first, 600 - 512);
    }

    proptest::proptest! {
        #[test]
        fn non_negative_losses(a in proptest::collection::vec(-5.0f64..5.0, 6), b in proptest::collection::vec(-5.0f64..5.0, 6), t in 0usize..=10) {
            let (a, b) = (t1(&a), t1(&b));
            proptest::prop_assert!(scalar(&simple_loss(&a, &b).unwrap()).unwrap() >= 0.0);
            proptest::prop_assert!(scalar(&reg_loss(&a, &b, t, 10).unwrap()).unwrap() >= 0.0);
            let m = Tensor::cat(&[&a, &b], 0).unwrap().reshape((1, 2, 6)).unwrap();
            proptest::prop_assert!(scalar(&trs_loss_maps(&[m]).unwrap()).unwrap() >= 0.0);
        }

        #[test]
        fn breakdown_total_invariant(p in proptest::array::uniform4(0.0f64..100.0), w in proptest::array::uniform3(0.0f64..1.0)) {
            let parts = LossParts { simple: p[0], reg: p[1], trs: p[2], dc: p[3] };
            let weights = LossWeights { trs: w[0], reg: w[1], dc: w[2] };
            let b = total_loss(parts, weights).unwrap();
            let expected = b.simple + w[0] * b.trs + w[1] * b.reg + w[2] * b.dc;
            proptest::prop_assert!((b.total - expected).abs() < 1e-6);
        }
    }
}
