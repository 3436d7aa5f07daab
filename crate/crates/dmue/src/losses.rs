//! Training objectives: auxiliary cross-entropy, Sharpen, the soft L2
//! regularizer, masked similarity preserving, confidence-weighted
//! cross-entropy, and the epoch ramps that combine them.
//!
//! Loss builders append to a [`Graph`] and return the scalar loss node, so a
//! single `backward` call differentiates any combination.

use thiserror::Error;

use crate::diffcore::{Graph, NodeId, Tensor};
use crate::model::ClassIndexMap;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("sharpen temperature {0} must be > 0")]
    InvalidTemperature(f64),
    #[error("sharpen input has no probability mass")]
    DegenerateDistribution,
    #[error("ramp threshold beta must be >= 1")]
    InvalidBeta,
    #[error("every batch sample is annotated with class {0}; no eligible samples remain")]
    NoEligibleSamples(usize),
}

/// A probability vector over the C-1 classes other than `owner_class`.
/// Position k corresponds to the k-th remaining class in ascending order
/// (see [`ClassIndexMap`]).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentDistribution {
    probs: Vec<f64>,
    owner_class: usize,
}

impl LatentDistribution {
    pub fn new(probs: Vec<f64>, owner_class: usize) -> Self {
        debug_assert!(!probs.is_empty());
        debug_assert!(probs.iter().all(|p| *p >= 0.0));
        debug_assert!((probs.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        LatentDistribution { probs, owner_class }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// The annotated class this distribution excludes.
    pub fn owner_class(&self) -> usize {
        self.owner_class
    }

    pub fn num_classes(&self) -> usize {
        self.probs.len() + 1
    }

    /// The class label (1-based) with the highest latent probability, ties
    /// to the lowest label.
    pub fn argmax_class(&self) -> usize {
        let map = ClassIndexMap::new(self.owner_class, self.num_classes());
        let mut best = 0;
        for (i, p) in self.probs.iter().enumerate().skip(1) {
            if *p > self.probs[best] {
                best = i;
            }
        }
        map.class_at(best)
    }
}

/// Raises each entry to 1/T and renormalizes. T < 1 peaks the distribution,
/// T > 1 flattens it, T = 1 is the identity.
pub fn sharpen_probs(probs: &[f64], temperature: f64) -> Result<Vec<f64>, LossError> {
    if !(temperature > 0.0) {
        return Err(LossError::InvalidTemperature(temperature));
    }
    let exponent = 1.0 / temperature;
    let mut out: Vec<f64> = probs.iter().map(|p| p.powf(exponent)).collect();
    let sum: f64 = out.iter().sum();
    if !(sum > 0.0) {
        return Err(LossError::DegenerateDistribution);
    }
    for v in out.iter_mut() {
        *v /= sum;
    }
    Ok(out)
}

pub fn sharpen(latent: &LatentDistribution, temperature: f64) -> Result<LatentDistribution, LossError> {
    Ok(LatentDistribution {
        probs: sharpen_probs(&latent.probs, temperature)?,
        owner_class: latent.owner_class,
    })
}

/// Epoch ramps balancing auxiliary and target training around threshold
/// `beta` (epochs count from 1).
#[derive(Clone, Copy, Debug)]
pub struct RampSchedule {
    beta: usize,
}

impl RampSchedule {
    pub fn new(beta: usize) -> Result<Self, LossError> {
        if beta < 1 {
            return Err(LossError::InvalidBeta);
        }
        Ok(RampSchedule { beta })
    }

    pub fn beta(&self) -> usize {
        self.beta
    }

    /// exp(-(1 - e/beta)^2) while e <= beta, then 1.
    pub fn up(&self, epoch: usize) -> f64 {
        ramp_up(epoch, self.beta)
    }

    /// 1 while e <= beta, then exp(-(1 - beta/e)^2).
    pub fn down(&self, epoch: usize) -> f64 {
        ramp_down(epoch, self.beta)
    }
}

pub fn ramp_up(epoch: usize, beta: usize) -> f64 {
    assert!(beta >= 1, "ramp threshold beta must be >= 1");
    if epoch > beta {
        1.0
    } else {
        let r = 1.0 - epoch as f64 / beta as f64;
        (-(r * r)).exp()
    }
}

pub fn ramp_down(epoch: usize, beta: usize) -> f64 {
    assert!(beta >= 1, "ramp threshold beta must be >= 1");
    if epoch <= beta {
        1.0
    } else {
        let r = 1.0 - beta as f64 / epoch as f64;
        (-(r * r)).exp()
    }
}

/// Mean auxiliary cross-entropy: each branch j is scored on the batch
/// samples *not* annotated j (its eligible set), against their annotations
/// under the branch's class index map; the per-branch means are averaged
/// over all C branches. A branch whose eligible set is empty contributes 0
/// while the 1/C denominator is kept.
pub fn aux_ce(g: &mut Graph, aux_logits: &[NodeId], annotations: &[usize]) -> NodeId {
    let c = aux_logits.len();
    assert!(c >= 2, "need at least two classes");
    let n = annotations.len();
    let mut acc: Option<NodeId> = None;
    for j in 1..=c {
        let map = ClassIndexMap::new(j, c);
        let width = c - 1;
        debug_assert_eq!(g.shape(aux_logits[j - 1]), (n, width));
        let mut mask = vec![false; n * width];
        let mut eligible = 0usize;
        for (p, &y) in annotations.iter().enumerate() {
            if y == j {
                continue; // a sample is never routed to its own-class branch
            }
            let col = map
                .position_of(y)
                .expect("annotation must map onto the branch's classes");
            mask[p * width + col] = true;
            eligible += 1;
        }
        if eligible == 0 {
            continue;
        }
        let probs = g.row_softmax(aux_logits[j - 1]);
        let picked = g.masked_select(probs, &mask);
        let logs = g.log(picked);
        let total = g.sum(logs);
        let branch_loss = g.scale(total, -1.0 / eligible as f64);
        acc = Some(match acc {
            Some(a) => g.add(a, branch_loss),
            None => branch_loss,
        });
    }
    let acc = acc.unwrap_or_else(|| g.scalar(0.0));
    g.scale(acc, 1.0 / c as f64)
}

/// Squared deviation between the target branch's raw softmax entries at the
/// negative-class positions and the (sharpened) latent distributions,
/// averaged over all N(C-1) compared entries. The latent side enters as a
/// constant: its gradient path was already cut when it was predicted.
///
/// `renormalize` switches to comparing against the target's negative-class
/// mass renormalized to sum 1 (an ablation variant; the default follows the
/// raw-entry formulation).
pub fn soft_l2(
    g: &mut Graph,
    target_probs: NodeId,
    latents: &[LatentDistribution],
    annotations: &[usize],
    renormalize: bool,
) -> NodeId {
    let (n, c) = g.shape(target_probs);
    assert_eq!(latents.len(), n, "one latent distribution per sample");
    assert_eq!(annotations.len(), n);

    let mut latent_full = Tensor::zeros(n, c);
    let mut mask = Tensor::zeros(n, c);
    for (p, (latent, &y)) in latents.iter().zip(annotations.iter()).enumerate() {
        assert_eq!(latent.owner_class(), y, "latent owner must match the annotation");
        assert_eq!(latent.num_classes(), c);
        let map = ClassIndexMap::new(y, c);
        for (pos, prob) in latent.probs().iter().enumerate() {
            latent_full.set(p, map.class_at(pos) - 1, *prob);
            mask.set(p, map.class_at(pos) - 1, 1.0);
        }
    }
    let mask_id = g.constant(&mask);
    let latent_id = g.constant(&latent_full);

    let compared = if renormalize {
        // negative-class entries scaled to sum 1 per row
        let masked_probs = g.mul(target_probs, mask_id);
        let ones = g.constant(&Tensor::filled(c, 1, 1.0));
        let row_mass = g.matmul(masked_probs, ones);
        let log_mass = g.log(row_mass);
        let neg_log = g.scale(log_mass, -1.0);
        let inv_mass = g.exp(neg_log);
        let tiled = g.tile_cols(inv_mass, c);
        g.mul(masked_probs, tiled)
    } else {
        target_probs
    };

    let diff = g.sub(latent_id, compared);
    let masked_diff = g.mul(diff, mask_id);
    let total = g.frobenius_norm_sq(masked_diff);
    g.scale(total, 1.0 / (n * (c - 1)) as f64)
}

/// Pairwise similarity matrix of a feature batch: row j holds the inner
/// products of feature j with every feature, scaled to unit Euclidean norm.
pub fn similarity_matrix(g: &mut Graph, features: NodeId) -> NodeId {
    let ft = g.transpose(features);
    let gram = g.matmul(features, ft);
    g.row_l2_normalize(gram)
}

/// Binary mask zeroing every pair that touches a sample annotated `class`.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMask {
    class: usize,
    mask: Tensor,
}

impl SimilarityMask {
    pub fn class(&self) -> usize {
        self.class
    }

    pub fn tensor(&self) -> &Tensor {
        &self.mask
    }
}

/// m[q][p] = 0 when the p-th or q-th annotation equals `class`, else 1.
pub fn sp_mask(annotations: &[usize], class: usize) -> SimilarityMask {
    let n = annotations.len();
    let mut mask = Tensor::filled(n, n, 1.0);
    for q in 0..n {
        for p in 0..n {
            if annotations[p] == class || annotations[q] == class {
                mask.set(q, p, 0.0);
            }
        }
    }
    SimilarityMask { class, mask }
}

/// Multi-branch similarity preserving loss: for every class i, the masked
/// squared Frobenius gap between the target branch's similarity matrix and
/// auxiliary branch i's, scaled by 1/N_i^2 where N_i counts the batch
/// samples not annotated i, averaged over the C branches.
pub fn msp_loss(
    g: &mut Graph,
    target_similarity: NodeId,
    aux_similarities: &[NodeId],
    annotations: &[usize],
) -> Result<NodeId, LossError> {
    let c = aux_similarities.len();
    let n = annotations.len();
    debug_assert_eq!(g.shape(target_similarity), (n, n));
    let mut acc: Option<NodeId> = None;
    for class in 1..=c {
        let not_annotated = annotations.iter().filter(|y| **y != class).count();
        if not_annotated == 0 {
            return Err(LossError::NoEligibleSamples(class));
        }
        let mask = sp_mask(annotations, class);
        let mask_id = g.constant(mask.tensor());
        let diff = g.sub(target_similarity, aux_similarities[class - 1]);
        let masked = g.mul(diff, mask_id);
        let gap = g.frobenius_norm_sq(masked);
        let term = g.scale(gap, 1.0 / (not_annotated * not_annotated) as f64);
        acc = Some(match acc {
            Some(a) => g.add(a, term),
            None => term,
        });
    }
    let acc = acc.expect("at least one class");
    Ok(g.scale(acc, 1.0 / c as f64))
}

/// Confidence-weighted cross-entropy: each sample's whole logit vector is
/// scaled by its confidence before the softmax, so low-confidence samples
/// see a flatter target posterior and a smaller gradient toward their
/// (possibly wrong) annotation.
pub fn weighted_ce(g: &mut Graph, logits: NodeId, alpha: NodeId, annotations: &[usize]) -> NodeId {
    let (n, c) = g.shape(logits);
    assert_eq!(g.shape(alpha), (n, 1), "alpha must be one score per sample");
    assert_eq!(annotations.len(), n);
    let tiled = g.tile_cols(alpha, c);
    let scaled = g.mul(tiled, logits);
    let probs = g.row_softmax(scaled);
    let mut mask = vec![false; n * c];
    for (p, &y) in annotations.iter().enumerate() {
        mask[p * c + (y - 1)] = true;
    }
    let picked = g.masked_select(probs, &mask);
    let logs = g.log(picked);
    let total = g.sum(logs);
    g.scale(total, -1.0 / n as f64)
}

/// The overall objective:
/// `w_up(e) * (L_wce + omega * L_soft + gamma * L_sp) + w_down(e) * L_aux`.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    l_wce: NodeId,
    l_soft: NodeId,
    l_sp: NodeId,
    l_aux: NodeId,
    epoch: usize,
    schedule: &RampSchedule,
    omega: f64,
    gamma: f64,
) -> NodeId {
    let soft_term = g.scale(l_soft, omega);
    let sp_term = g.scale(l_sp, gamma);
    let partial = g.add(l_wce, soft_term);
    let inner = g.add(partial, sp_term);
    let up = g.scale(inner, schedule.up(epoch));
    let down = g.scale(l_aux, schedule.down(epoch));
    g.add(up, down)
}
