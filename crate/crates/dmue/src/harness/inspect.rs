//! Post-training inspection: mined latent distributions against the
//! generator's ground truth, and per-batch confidence rankings.

use std::fmt::Write as _;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::datagen::{oracle_latent, sample_batch, Dataset};
use crate::losses::LatentDistribution;
use crate::model::{BranchSet, UncertaintyModule};
use crate::trainer::{confidence_scores, mine_latents};

use super::HarnessError;

/// Floor applied to mined probabilities inside the KL logarithm so a zero
/// entry cannot produce an infinite divergence.
pub const KL_EPSILON: f64 = 1e-12;

/// KL(oracle || mined) with the epsilon floor on the mined side.
pub fn kl_divergence(oracle: &[f64], mined: &[f64]) -> f64 {
    debug_assert_eq!(oracle.len(), mined.len());
    oracle
        .iter()
        .zip(mined.iter())
        .filter(|(o, _)| **o > 0.0)
        .map(|(o, m)| o * (o / m.max(KL_EPSILON)).ln())
        .sum()
}

#[derive(Clone, Debug)]
pub struct LatentRecord {
    /// Index into the training split.
    pub index: usize,
    pub annotation: usize,
    pub true_class: usize,
    pub flipped: bool,
    pub mined: LatentDistribution,
    pub oracle: LatentDistribution,
    /// Oracle was undefined (posterior mass entirely on the annotation).
    pub degenerate: bool,
    pub kl: f64,
    /// Mined argmax class equals the oracle argmax class.
    pub argmax_match: bool,
}

#[derive(Clone, Debug)]
pub struct LatentInspection {
    pub records: Vec<LatentRecord>,
    /// Mean KL over non-degenerate samples.
    pub mean_kl: f64,
    pub degenerate_count: usize,
    /// Fraction of flipped samples whose mined argmax equals the hidden
    /// true class. NaN-free: 0 when nothing is flipped.
    pub flipped_recovery: f64,
    pub flipped_count: usize,
}

/// Scores the mined latent distribution of every training sample against
/// the Bayes oracle.
pub fn inspect_latent(model: &BranchSet, dataset: &Dataset) -> LatentInspection {
    let mined = mine_latents(model, &dataset.train);
    let mut records = Vec::with_capacity(mined.len());
    let mut kl_sum = 0.0;
    let mut kl_n = 0usize;
    let mut degenerate_count = 0usize;
    let mut flipped_count = 0usize;
    let mut recovered = 0usize;

    for (index, (latent, sample)) in mined.into_iter().zip(dataset.train.iter()).enumerate() {
        let (oracle, degenerate) = oracle_latent(sample);
        let kl = kl_divergence(oracle.probs(), latent.probs());
        if degenerate {
            degenerate_count += 1;
        } else {
            kl_sum += kl;
            kl_n += 1;
        }
        if sample.flipped {
            flipped_count += 1;
            if latent.argmax_class() == sample.true_class {
                recovered += 1;
            }
        }
        records.push(LatentRecord {
            index,
            annotation: sample.annotation,
            true_class: sample.true_class,
            flipped: sample.flipped,
            argmax_match: latent.argmax_class() == oracle.argmax_class(),
            mined: latent,
            oracle,
            degenerate,
            kl,
        });
    }

    LatentInspection {
        records,
        mean_kl: if kl_n == 0 { 0.0 } else { kl_sum / kl_n as f64 },
        degenerate_count,
        flipped_recovery: if flipped_count == 0 { 0.0 } else { recovered as f64 / flipped_count as f64 },
        flipped_count,
    }
}

pub fn write_latent_report(
    inspection: &LatentInspection,
    header: &str,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(header);
    let _ = writeln!(out, "# mean_kl = {}", inspection.mean_kl);
    let _ = writeln!(out, "# degenerate_count = {}", inspection.degenerate_count);
    let _ = writeln!(out, "# flipped_count = {}", inspection.flipped_count);
    let _ = writeln!(out, "# flipped_recovery = {}", inspection.flipped_recovery);
    out.push_str("index\tannotation\ttrue_class\tflipped\tdegenerate\tkl\targmax_match\tmined\toracle\n");
    for r in &inspection.records {
        let join = |p: &[f64]| p.iter().map(f64::to_string).collect::<Vec<_>>().join(",");
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.index,
            r.annotation,
            r.true_class,
            u8::from(r.flipped),
            u8::from(r.degenerate),
            r.kl,
            u8::from(r.argmax_match),
            join(r.mined.probs()),
            join(r.oracle.probs()),
        );
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct ConfidenceRecord {
    /// Index into the training split.
    pub index: usize,
    pub alpha: f64,
    /// 1..N by descending confidence; ties keep batch order.
    pub rank: usize,
    pub flipped: bool,
}

#[derive(Clone, Debug)]
pub struct ConfidenceReport {
    /// One vector of records per inspected batch.
    pub batches: Vec<Vec<ConfidenceRecord>>,
    pub mean_alpha_flipped: f64,
    pub mean_alpha_clean: f64,
    pub flipped_seen: usize,
    pub clean_seen: usize,
}

/// Ranks per-sample confidence scores inside `num_batches` freshly drawn
/// class-covering batches and aggregates mean confidence for flipped vs
/// clean samples.
pub fn confidence_report(
    model: &BranchSet,
    uncertainty: &UncertaintyModule,
    dataset: &Dataset,
    num_batches: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ConfidenceReport, HarnessError> {
    let mut batches = Vec::with_capacity(num_batches);
    let mut flipped_sum = 0.0;
    let mut flipped_seen = 0usize;
    let mut clean_sum = 0.0;
    let mut clean_seen = 0usize;

    for _ in 0..num_batches {
        let batch = sample_batch(dataset, batch_size, rng)?;
        let samples: Vec<_> = batch.indices.iter().map(|i| dataset.train[*i].clone()).collect();
        let alphas = confidence_scores(model, uncertainty, &samples);

        let mut order: Vec<usize> = (0..alphas.len()).collect();
        order.sort_by(|a, b| alphas[*b].partial_cmp(&alphas[*a]).unwrap().then(a.cmp(b)));
        let mut ranks = vec![0usize; alphas.len()];
        for (rank0, pos) in order.iter().enumerate() {
            ranks[*pos] = rank0 + 1;
        }

        let mut records = Vec::with_capacity(alphas.len());
        for (pos, alpha) in alphas.iter().enumerate() {
            let flipped = samples[pos].flipped;
            if flipped {
                flipped_sum += alpha;
                flipped_seen += 1;
            } else {
                clean_sum += alpha;
                clean_seen += 1;
            }
            records.push(ConfidenceRecord {
                index: batch.indices[pos],
                alpha: *alpha,
                rank: ranks[pos],
                flipped,
            });
        }
        batches.push(records);
    }

    Ok(ConfidenceReport {
        batches,
        mean_alpha_flipped: if flipped_seen == 0 { 0.0 } else { flipped_sum / flipped_seen as f64 },
        mean_alpha_clean: if clean_seen == 0 { 0.0 } else { clean_sum / clean_seen as f64 },
        flipped_seen,
        clean_seen,
    })
}

pub fn write_confidence_report(
    report: &ConfidenceReport,
    header: &str,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(header);
    let _ = writeln!(out, "# mean_alpha_flipped = {}", report.mean_alpha_flipped);
    let _ = writeln!(out, "# mean_alpha_clean = {}", report.mean_alpha_clean);
    let _ = writeln!(out, "# flipped_seen = {}", report.flipped_seen);
    let _ = writeln!(out, "# clean_seen = {}", report.clean_seen);
    out.push_str("batch\tindex\talpha\trank\tflipped\n");
    for (b, records) in report.batches.iter().enumerate() {
        for r in records {
            let _ = writeln!(out, "{}\t{}\t{}\t{}\t{}", b, r.index, r.alpha, r.rank, u8::from(r.flipped));
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate, inject_noise, SyntheticSpec};
    use crate::model::LayerSizes;
    use crate::rng::{self, streams};

    #[test]
    fn kl_of_identical_distributions_is_zero() {
        assert_eq!(kl_divergence(&[0.25, 0.75], &[0.25, 0.75]), 0.0);
    }

    #[test]
    fn kl_closed_form_case() {
        // KL([0.5, 0.5] || [0.9, 0.1]) = 0.5 ln(0.5/0.9) + 0.5 ln(0.5/0.1)
        let kl = kl_divergence(&[0.5, 0.5], &[0.9, 0.1]);
        assert!((kl - 0.510826).abs() < 1e-6, "{kl}");
    }

    #[test]
    fn kl_floor_prevents_infinities() {
        let kl = kl_divergence(&[0.5, 0.5], &[1.0, 0.0]);
        assert!(kl.is_finite());
    }

    #[test]
    fn untrained_recovery_sits_near_chance() {
        // an untrained model's latent argmax is feature-independent noise, so
        // recovery over flipped samples pools to ~1/(C-1) across seeds
        let spec = SyntheticSpec::confusable_pairs(4, 8, 2, 3.0, 1.2, 1.0, 60, 4, 5).unwrap();
        let base = generate(&spec).unwrap();
        let seeds = 24u64;
        let mut hits = 0.0;
        let mut total = 0.0;
        for seed in 0..seeds {
            let noised = inject_noise(base.clone(), 0.3, 1000 + seed).unwrap();
            let mut r = rng::stream(seed, streams::INIT);
            let model = BranchSet::init(4, 8, LayerSizes::default(), &mut r);
            let inspection = inspect_latent(&model, &noised);
            hits += inspection.flipped_recovery * inspection.flipped_count as f64;
            total += inspection.flipped_count as f64;
        }
        let pooled = hits / total;
        let p: f64 = 1.0 / 3.0;
        let sigma = (p * (1.0 - p) / total).sqrt();
        assert!(
            (pooled - p).abs() <= 3.0 * sigma,
            "pooled recovery {pooled} vs chance {p} (3 sigma {})",
            3.0 * sigma
        );
    }

    #[test]
    fn confidence_ranks_are_a_permutation_with_stable_ties() {
        let spec = SyntheticSpec::confusable_pairs(4, 8, 2, 3.0, 1.2, 1.0, 40, 4, 6).unwrap();
        let ds = inject_noise(generate(&spec).unwrap(), 0.2, 7).unwrap();
        let mut r = rng::stream(8, streams::INIT);
        let model = BranchSet::init(4, 8, LayerSizes::default(), &mut r);

        // zeroed module gives every sample alpha 0.5: ranks must follow
        // batch order
        let tied = UncertaintyModule::zeroed(4);
        let mut batch_rng = rng::stream(9, streams::BATCH);
        let report = confidence_report(&model, &tied, &ds, 1, 10, &mut batch_rng).unwrap();
        let ranks: Vec<usize> = report.batches[0].iter().map(|r| r.rank).collect();
        assert_eq!(ranks, (1..=10).collect::<Vec<_>>());

        // trained-or-not, ranks are always a permutation of 1..N
        let um = UncertaintyModule::init(4, &mut r);
        let mut batch_rng = rng::stream(10, streams::BATCH);
        let report = confidence_report(&model, &um, &ds, 3, 16, &mut batch_rng).unwrap();
        for records in &report.batches {
            let mut ranks: Vec<usize> = records.iter().map(|r| r.rank).collect();
            ranks.sort_unstable();
            assert_eq!(ranks, (1..=16).collect::<Vec<_>>());
        }
    }
}
