//! Synthetic ambiguous classification data with known class posteriors.
//!
//! Samples are drawn from an isotropic Gaussian mixture, one component per
//! class, so the exact posterior p(class | x) is available by Bayes' rule.
//! Ambiguity is created structurally: designated "confusable" center pairs
//! sit closer together than the rest, so samples between them carry real
//! probability mass on both classes. Label noise flips a fixed fraction of
//! training annotations to random other classes.
//!
//! Class labels are 1-based (`1..=C`) everywhere, matching the dataset file
//! format.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diffcore::Tensor;
use crate::losses::LatentDistribution;
use crate::rng::{self, streams};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),
    #[error("noise ratio {0} outside [0, 1]")]
    InvalidRatio(f64),
    #[error("batch size {n} is smaller than the number of classes {c}")]
    BatchTooSmall { n: usize, c: usize },
    #[error("no training samples annotated with class {0}")]
    EmptyClass(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("dataset file, line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

/// Parameters of the Gaussian-mixture generator.
#[derive(Clone, Debug)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub feature_dim: usize,
    /// One center per class, each of length `feature_dim`.
    pub class_centers: Vec<Vec<f64>>,
    /// Isotropic standard deviation applied to every class.
    pub spread: f64,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Centers laid out so that `num_pairs` class pairs are mutually
    /// confusable: pair anchors sit on orthogonal axes at `base_separation`
    /// from the origin, and the two members of a pair are only
    /// `pair_separation` apart. Remaining classes (if `C > 2 * num_pairs`)
    /// get their own axes.
    #[allow(clippy::too_many_arguments)]
    pub fn confusable_pairs(
        num_classes: usize,
        feature_dim: usize,
        num_pairs: usize,
        base_separation: f64,
        pair_separation: f64,
        spread: f64,
        samples_per_class: usize,
        test_per_class: usize,
        seed: u64,
    ) -> Result<Self, DataError> {
        if 2 * num_pairs > num_classes {
            return Err(DataError::InvalidSpec(format!(
                "{num_pairs} pairs need {} classes, have {num_classes}",
                2 * num_pairs
            )));
        }
        let singles = num_classes - 2 * num_pairs;
        let axes_needed = 2 * num_pairs + singles;
        if feature_dim < axes_needed.max(2) {
            return Err(DataError::InvalidSpec(format!(
                "feature_dim {feature_dim} too small for {axes_needed} layout axes"
            )));
        }
        let mut centers = Vec::with_capacity(num_classes);
        for q in 0..num_pairs {
            for sign in [1.0, -1.0] {
                let mut c = vec![0.0; feature_dim];
                c[q] = base_separation;
                c[num_pairs + q] = sign * pair_separation / 2.0;
                centers.push(c);
            }
        }
        for s in 0..singles {
            let mut c = vec![0.0; feature_dim];
            c[2 * num_pairs + s] = base_separation;
            centers.push(c);
        }
        let spec = SyntheticSpec {
            num_classes,
            feature_dim,
            class_centers: centers,
            spread,
            samples_per_class,
            test_per_class,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::InvalidSpec("need at least 2 classes".into()));
        }
        if self.feature_dim < 2 {
            return Err(DataError::InvalidSpec("need feature_dim >= 2".into()));
        }
        if !(self.spread > 0.0) {
            return Err(DataError::InvalidSpec(format!("spread {} must be > 0", self.spread)));
        }
        if self.samples_per_class == 0 {
            return Err(DataError::InvalidSpec("samples_per_class must be >= 1".into()));
        }
        if self.class_centers.len() != self.num_classes {
            return Err(DataError::InvalidSpec(format!(
                "{} centers for {} classes",
                self.class_centers.len(),
                self.num_classes
            )));
        }
        for (i, c) in self.class_centers.iter().enumerate() {
            if c.len() != self.feature_dim {
                return Err(DataError::InvalidSpec(format!(
                    "center {} has dimension {}, expected {}",
                    i + 1,
                    c.len(),
                    self.feature_dim
                )));
            }
        }
        for i in 0..self.num_classes {
            for j in i + 1..self.num_classes {
                if self.class_centers[i] == self.class_centers[j] {
                    return Err(DataError::InvalidSpec(format!(
                        "centers {} and {} coincide",
                        i + 1,
                        j + 1
                    )));
                }
            }
        }
        Ok(())
    }
}

/// One labelled point. `true_class` and `true_posterior` come from the
/// generator and are hidden from training; they exist so mined label
/// distributions can be scored against ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    /// Annotated class in `1..=C`; differs from `true_class` iff `flipped`.
    pub annotation: usize,
    pub true_class: usize,
    pub true_posterior: Vec<f64>,
    pub flipped: bool,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub num_classes: usize,
    pub feature_dim: usize,
    pub seed: u64,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Exact Bayes posterior of the equal-prior isotropic mixture at `x`.
fn posterior(spec: &SyntheticSpec, x: &[f64]) -> Vec<f64> {
    let inv_two_var = 1.0 / (2.0 * spec.spread * spec.spread);
    let mut logw: Vec<f64> = spec
        .class_centers
        .iter()
        .map(|c| {
            let d2: f64 = c.iter().zip(x.iter()).map(|(ci, xi)| (xi - ci) * (xi - ci)).sum();
            -d2 * inv_two_var
        })
        .collect();
    let m = logw.iter().fold(f64::NEG_INFINITY, |a, v| a.max(*v));
    let mut sum = 0.0;
    for w in logw.iter_mut() {
        *w = (*w - m).exp();
        sum += *w;
    }
    for w in logw.iter_mut() {
        *w /= sum;
    }
    logw
}

/// Draws the train and test splits. Deterministic for a given spec.
pub fn generate(spec: &SyntheticSpec) -> Result<Dataset, DataError> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, streams::DATA);
    let draw_split = |count: usize, rng: &mut ChaCha8Rng| -> Vec<Sample> {
        let mut out = Vec::with_capacity(count * spec.num_classes);
        for class in 1..=spec.num_classes {
            let center = &spec.class_centers[class - 1];
            for _ in 0..count {
                let features: Vec<f64> = center
                    .iter()
                    .map(|c| c + spec.spread * rng::standard_normal(rng))
                    .collect();
                let true_posterior = posterior(spec, &features);
                out.push(Sample {
                    features,
                    annotation: class,
                    true_class: class,
                    true_posterior,
                    flipped: false,
                });
            }
        }
        out
    };
    let train = draw_split(spec.samples_per_class, &mut rng);
    let test = draw_split(spec.test_per_class, &mut rng);
    Ok(Dataset {
        num_classes: spec.num_classes,
        feature_dim: spec.feature_dim,
        seed: spec.seed,
        train,
        test,
    })
}

/// Flips the annotations of exactly `floor(ratio * train_len)` uniformly
/// chosen training samples to a uniformly chosen *other* class. The test
/// split is untouched. Expects a clean dataset (no prior flips).
pub fn inject_noise(mut dataset: Dataset, ratio: f64, seed: u64) -> Result<Dataset, DataError> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(DataError::InvalidRatio(ratio));
    }
    let n = dataset.train.len();
    let k = (ratio * n as f64).floor() as usize;
    let mut rng = rng::stream(seed, streams::NOISE);
    let mut chosen = rand::seq::index::sample(&mut rng, n, k).into_vec();
    chosen.sort_unstable();
    let c = dataset.num_classes;
    for idx in chosen {
        let s = &mut dataset.train[idx];
        let offset = rng.gen_range(1..c); // uniform over the other C-1 classes
        s.annotation = (s.annotation - 1 + offset) % c + 1;
        s.flipped = true;
    }
    Ok(dataset)
}

/// A class-covering mini-batch over the training split.
#[derive(Clone, Debug)]
pub struct Batch {
    /// Indices into `dataset.train`, in draw order.
    pub indices: Vec<usize>,
    /// Row-per-sample feature matrix.
    pub features: Tensor,
    /// Annotations in `1..=C`, aligned with `indices`.
    pub annotations: Vec<usize>,
    num_classes: usize,
    /// Per class (0-based), the batch positions annotated with it.
    members: Vec<Vec<usize>>,
}

impl Batch {
    fn build(dataset: &Dataset, indices: Vec<usize>) -> Batch {
        let d = dataset.feature_dim;
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut annotations = Vec::with_capacity(indices.len());
        let mut members = vec![Vec::new(); dataset.num_classes];
        for (pos, &idx) in indices.iter().enumerate() {
            let s = &dataset.train[idx];
            data.extend_from_slice(&s.features);
            annotations.push(s.annotation);
            members[s.annotation - 1].push(pos);
        }
        Batch {
            features: Tensor::new(indices.len(), d, data),
            indices,
            annotations,
            num_classes: dataset.num_classes,
            members,
        }
    }

    pub fn len(&self) -> usize {
        self.annotations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.annotations.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    /// Batch positions annotated with `class`.
    pub fn members_of(&self, class: usize) -> &[usize] {
        &self.members[class - 1]
    }

    /// N_j in the annotated sense: how many batch samples carry `class`.
    pub fn count_annotated(&self, class: usize) -> usize {
        self.members[class - 1].len()
    }

    /// How many batch samples do NOT carry `class`.
    pub fn count_not_annotated(&self, class: usize) -> usize {
        self.len() - self.count_annotated(class)
    }
}

/// Stratified draw of `n` training samples: one guaranteed sample per class,
/// the remainder uniform without replacement.
pub fn sample_batch(dataset: &Dataset, n: usize, rng: &mut ChaCha8Rng) -> Result<Batch, DataError> {
    let c = dataset.num_classes;
    if n < c {
        return Err(DataError::BatchTooSmall { n, c });
    }
    let mut pools: Vec<Vec<usize>> = vec![Vec::new(); c];
    for (idx, s) in dataset.train.iter().enumerate() {
        pools[s.annotation - 1].push(idx);
    }
    if let Some(empty) = pools.iter().position(Vec::is_empty) {
        return Err(DataError::EmptyClass(empty + 1));
    }

    let mut taken = vec![false; dataset.train.len()];
    let mut indices = Vec::with_capacity(n);
    for pool in &pools {
        let pick = pool[rng.gen_range(0..pool.len())];
        taken[pick] = true;
        indices.push(pick);
    }
    let remaining: Vec<usize> = (0..dataset.train.len()).filter(|i| !taken[*i]).collect();
    let extra = n - c;
    let mut picks = rand::seq::index::sample(rng, remaining.len(), extra).into_vec();
    picks.sort_unstable();
    indices.extend(picks.into_iter().map(|p| remaining[p]));
    Ok(Batch::build(dataset, indices))
}

/// Seeded convenience wrapper around [`sample_batch`].
pub fn sample_batch_seeded(dataset: &Dataset, n: usize, seed: u64) -> Result<Batch, DataError> {
    let mut rng = rng::stream(seed, streams::BATCH);
    sample_batch(dataset, n, &mut rng)
}

/// The ground-truth latent distribution: the Bayes posterior restricted to
/// the classes other than the annotation, renormalized. When the posterior
/// puts all of its mass on the annotated class the renormalization is
/// undefined; the fallback is uniform and the `degenerate` flag is set.
pub fn oracle_latent(sample: &Sample) -> (LatentDistribution, bool) {
    let c = sample.true_posterior.len();
    let mut probs = Vec::with_capacity(c - 1);
    let mut rest = 0.0;
    for (k, p) in sample.true_posterior.iter().enumerate() {
        if k + 1 != sample.annotation {
            probs.push(*p);
            rest += *p;
        }
    }
    if rest == 0.0 {
        let u = 1.0 / (c - 1) as f64;
        return (LatentDistribution::new(vec![u; c - 1], sample.annotation), true);
    }
    for p in probs.iter_mut() {
        *p /= rest;
    }
    (LatentDistribution::new(probs, sample.annotation), false)
}

// ── Dataset file format ─────────────────────────────────────────────────
//
// Line-oriented text. One header line:
//     dmue-dataset v1 classes=C dim=d train=N test=M seed=S
// then one line per sample (train split first, then test):
//     f_1 .. f_d annotation true_class p_1 .. p_C flipped
// Floats are written in shortest round-trip form, so write/read is
// bit-exact.

pub fn write_dataset<W: Write>(dataset: &Dataset, out: &mut W) -> Result<(), DataError> {
    writeln!(
        out,
        "dmue-dataset v1 classes={} dim={} train={} test={} seed={}",
        dataset.num_classes,
        dataset.feature_dim,
        dataset.train.len(),
        dataset.test.len(),
        dataset.seed
    )?;
    let mut line = String::new();
    for s in dataset.train.iter().chain(dataset.test.iter()) {
        line.clear();
        for f in &s.features {
            let _ = write!(line, "{f} ");
        }
        let _ = write!(line, "{} {}", s.annotation, s.true_class);
        for p in &s.true_posterior {
            let _ = write!(line, " {p}");
        }
        let _ = write!(line, " {}", if s.flipped { 1 } else { 0 });
        writeln!(out, "{line}")?;
    }
    Ok(())
}

pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_dataset(dataset, &mut file)?;
    file.flush()?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset, DataError> {
    let file = std::fs::File::open(path)?;
    let mut lines = BufReader::new(file).lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| DataError::Parse { line: 1, msg: "empty file".into() })?;
    let header = header?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("dmue-dataset") || parts.next() != Some("v1") {
        return Err(DataError::Parse { line: 1, msg: "bad magic or version".into() });
    }
    let mut field = |name: &str| -> Result<u64, DataError> {
        let tok = parts
            .next()
            .ok_or_else(|| DataError::Parse { line: 1, msg: format!("missing {name}") })?;
        let value = tok
            .strip_prefix(&format!("{name}="))
            .ok_or_else(|| DataError::Parse { line: 1, msg: format!("expected {name}=, got {tok}") })?;
        value
            .parse()
            .map_err(|e| DataError::Parse { line: 1, msg: format!("{name}: {e}") })
    };
    let classes = field("classes")? as usize;
    let dim = field("dim")? as usize;
    let n_train = field("train")? as usize;
    let n_test = field("test")? as usize;
    let seed = field("seed")?;

    let mut train = Vec::with_capacity(n_train);
    let mut test = Vec::with_capacity(n_test);
    for (lineno, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let sample = parse_sample(&line, dim, classes, lineno + 1)?;
        if train.len() < n_train {
            train.push(sample);
        } else {
            test.push(sample);
        }
    }
    if train.len() != n_train || test.len() != n_test {
        return Err(DataError::Parse {
            line: 0,
            msg: format!(
                "expected {n_train}+{n_test} samples, found {}+{}",
                train.len(),
                test.len()
            ),
        });
    }
    Ok(Dataset { num_classes: classes, feature_dim: dim, seed, train, test })
}

fn parse_sample(line: &str, dim: usize, classes: usize, lineno: usize) -> Result<Sample, DataError> {
    let err = |msg: String| DataError::Parse { line: lineno, msg };
    let toks: Vec<&str> = line.split_whitespace().collect();
    let expected = dim + 2 + classes + 1;
    if toks.len() != expected {
        return Err(err(format!("expected {expected} fields, got {}", toks.len())));
    }
    let num = |t: &str| -> Result<f64, DataError> {
        t.parse().map_err(|e| err(format!("bad float {t:?}: {e}")))
    };
    let features = toks[..dim].iter().map(|t| num(t)).collect::<Result<Vec<f64>, _>>()?;
    let annotation: usize =
        toks[dim].parse().map_err(|e| err(format!("bad annotation: {e}")))?;
    let true_class: usize =
        toks[dim + 1].parse().map_err(|e| err(format!("bad true class: {e}")))?;
    let true_posterior =
        toks[dim + 2..dim + 2 + classes].iter().map(|t| num(t)).collect::<Result<Vec<f64>, _>>()?;
    let flipped = match toks[expected - 1] {
        "0" => false,
        "1" => true,
        other => return Err(err(format!("bad flipped flag {other:?}"))),
    };
    if !(1..=classes).contains(&annotation) || !(1..=classes).contains(&true_class) {
        return Err(err("class out of range".into()));
    }
    Ok(Sample { features, annotation, true_class, true_posterior, flipped })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_class_spec(spread: f64, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            num_classes: 2,
            feature_dim: 2,
            class_centers: vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            spread,
            samples_per_class: 50,
            test_per_class: 10,
            seed,
        }
    }

    #[test]
    fn midpoint_posterior_is_half_half() {
        let spec = two_class_spec(0.7, 1);
        let p = posterior(&spec, &[0.0, 0.3]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tiny_spread_concentrates_posteriors() {
        let spec = SyntheticSpec { spread: 1e-3, ..two_class_spec(1.0, 2) };
        let ds = generate(&spec).unwrap();
        for s in ds.train.iter().chain(ds.test.iter()) {
            assert!(s.true_posterior[s.true_class - 1] > 0.999);
        }
    }

    #[test]
    fn counts_are_exact() {
        let spec = SyntheticSpec::confusable_pairs(4, 16, 2, 3.0, 1.2, 1.0, 400, 100, 9).unwrap();
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.len(), 1600);
        assert_eq!(ds.test.len(), 400);
        for class in 1..=4 {
            assert_eq!(ds.train.iter().filter(|s| s.annotation == class).count(), 400);
            assert_eq!(ds.test.iter().filter(|s| s.annotation == class).count(), 100);
        }
    }

    #[test]
    fn posteriors_sum_to_one() {
        let spec = SyntheticSpec::confusable_pairs(5, 8, 2, 3.0, 1.0, 1.2, 30, 5, 3).unwrap();
        let ds = generate(&spec).unwrap();
        for s in ds.train.iter().chain(ds.test.iter()) {
            let sum: f64 = s.true_posterior.iter().sum();
            assert!((sum - 1.0).abs() <= 1e-12);
            assert!(s.true_posterior.iter().all(|p| *p >= 0.0));
        }
    }

    #[test]
    fn zero_noise_changes_nothing() {
        let ds = generate(&two_class_spec(1.0, 4)).unwrap();
        let noised = inject_noise(ds.clone(), 0.0, 77).unwrap();
        assert_eq!(ds.train, noised.train);
        assert_eq!(ds.test, noised.test);
    }

    #[test]
    fn noise_flips_exactly_floor_rho_n() {
        let mut ds = generate(&two_class_spec(1.0, 5)).unwrap();
        ds.train.truncate(10);
        let noised = inject_noise(ds, 0.3, 8).unwrap();
        let flipped: Vec<&Sample> = noised.train.iter().filter(|s| s.flipped).collect();
        assert_eq!(flipped.len(), 3);
        for s in &flipped {
            assert_ne!(s.annotation, s.true_class);
        }
        for s in noised.train.iter().filter(|s| !s.flipped) {
            assert_eq!(s.annotation, s.true_class);
        }
    }

    #[test]
    fn noise_preserves_features_bitwise() {
        let ds = generate(&two_class_spec(1.0, 6)).unwrap();
        let noised = inject_noise(ds.clone(), 0.5, 10).unwrap();
        assert_eq!(ds.train.len(), noised.train.len());
        for (a, b) in ds.train.iter().zip(noised.train.iter()) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.true_class, b.true_class);
            assert_eq!(a.true_posterior, b.true_posterior);
        }
        assert_eq!(ds.test, noised.test);
    }

    #[test]
    fn flip_destinations_are_uniform_over_wrong_classes() {
        // Pool the flip destinations over 10 seeds and chi-square test the
        // rank of the destination among each sample's 3 wrong classes.
        let spec = SyntheticSpec::confusable_pairs(4, 16, 2, 3.0, 1.2, 1.0, 400, 0, 20).unwrap();
        let base = generate(&spec).unwrap();
        let mut counts = [0usize; 3];
        for seed in 0..10u64 {
            let noised = inject_noise(base.clone(), 0.3, 100 + seed).unwrap();
            for s in noised.train.iter().filter(|s| s.flipped) {
                let rank = (0..4)
                    .map(|k| k + 1)
                    .filter(|class| *class != s.true_class)
                    .position(|class| class == s.annotation)
                    .expect("flipped sample must land on a wrong class");
                counts[rank] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, 480 * 10);
        let expected = total as f64 / 3.0;
        let chi2: f64 = counts
            .iter()
            .map(|c| {
                let d = *c as f64 - expected;
                d * d / expected
            })
            .sum();
        // 99th percentile of chi-square with 2 dof
        assert!(chi2 < 9.210, "chi2 {chi2}, counts {counts:?}");
    }

    #[test]
    fn batch_of_size_c_has_one_sample_per_class() {
        let spec = SyntheticSpec::confusable_pairs(4, 16, 2, 3.0, 1.2, 1.0, 50, 0, 30).unwrap();
        let ds = generate(&spec).unwrap();
        let batch = sample_batch_seeded(&ds, 4, 1).unwrap();
        for class in 1..=4 {
            assert_eq!(batch.count_annotated(class), 1);
        }
    }

    #[test]
    fn batch_72_over_7_classes_covers_all() {
        let spec = SyntheticSpec {
            num_classes: 7,
            feature_dim: 8,
            class_centers: (0..7)
                .map(|i| {
                    let mut c = vec![0.0; 8];
                    c[i] = 3.0;
                    c
                })
                .collect(),
            spread: 1.0,
            samples_per_class: 40,
            test_per_class: 0,
            seed: 31,
        };
        let ds = generate(&spec).unwrap();
        let batch = sample_batch_seeded(&ds, 72, 2).unwrap();
        assert_eq!(batch.len(), 72);
        let mut total = 0;
        for class in 1..=7 {
            assert!(batch.count_annotated(class) >= 1);
            total += batch.count_annotated(class);
        }
        assert_eq!(total, 72);
    }

    #[test]
    fn batches_are_deterministic_given_seed() {
        let ds = generate(&two_class_spec(1.0, 7)).unwrap();
        let a = sample_batch_seeded(&ds, 10, 5).unwrap();
        let b = sample_batch_seeded(&ds, 10, 5).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn batch_never_repeats_a_sample() {
        let ds = generate(&two_class_spec(1.0, 8)).unwrap();
        for seed in 0..20 {
            let batch = sample_batch_seeded(&ds, 40, seed).unwrap();
            let mut seen = batch.indices.clone();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), batch.len());
        }
    }

    #[test]
    fn batch_smaller_than_class_count_is_rejected() {
        let ds = generate(&two_class_spec(1.0, 9)).unwrap();
        assert!(matches!(
            sample_batch_seeded(&ds, 1, 0),
            Err(DataError::BatchTooSmall { n: 1, c: 2 })
        ));
    }

    #[test]
    fn oracle_latent_renormalizes() {
        let s = Sample {
            features: vec![0.0, 0.0],
            annotation: 1,
            true_class: 1,
            true_posterior: vec![0.5, 0.25, 0.25],
            flipped: false,
        };
        let (latent, degenerate) = oracle_latent(&s);
        assert!(!degenerate);
        assert_eq!(latent.probs(), &[0.5, 0.5]);

        let s2 = Sample { annotation: 2, true_posterior: vec![0.1, 0.6, 0.3], ..s.clone() };
        let (latent2, _) = oracle_latent(&s2);
        assert!((latent2.probs()[0] - 0.25).abs() <= 1e-12);
        assert!((latent2.probs()[1] - 0.75).abs() <= 1e-12);
    }

    #[test]
    fn oracle_latent_degenerate_falls_back_to_uniform() {
        let s = Sample {
            features: vec![0.0, 0.0],
            annotation: 2,
            true_class: 2,
            true_posterior: vec![0.0, 1.0, 0.0],
            flipped: false,
        };
        let (latent, degenerate) = oracle_latent(&s);
        assert!(degenerate);
        assert_eq!(latent.probs(), &[0.5, 0.5]);
    }

    #[test]
    fn dataset_file_round_trip_is_bit_exact() {
        let spec = SyntheticSpec::confusable_pairs(3, 4, 1, 3.0, 1.0, 0.9, 12, 4, 40).unwrap();
        let ds = inject_noise(generate(&spec).unwrap(), 0.25, 4).unwrap();
        let mut buf = Vec::new();
        write_dataset(&ds, &mut buf).unwrap();
        let dir = std::env::temp_dir().join("dmue-datagen-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.txt");
        std::fs::write(&path, &buf).unwrap();
        let loaded = load_dataset(&path).unwrap();
        assert_eq!(ds.num_classes, loaded.num_classes);
        assert_eq!(ds.train, loaded.train);
        assert_eq!(ds.test, loaded.test);
        let mut buf2 = Vec::new();
        write_dataset(&loaded, &mut buf2).unwrap();
        assert_eq!(buf, buf2, "second serialization must be byte-identical");
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut spec = two_class_spec(1.0, 1);
        spec.spread = 0.0;
        assert!(matches!(generate(&spec), Err(DataError::InvalidSpec(_))));
        let mut spec = two_class_spec(1.0, 1);
        spec.class_centers[1] = spec.class_centers[0].clone();
        assert!(matches!(generate(&spec), Err(DataError::InvalidSpec(_))));
        assert!(matches!(
            inject_noise(generate(&two_class_spec(1.0, 1)).unwrap(), 1.5, 0),
            Err(DataError::InvalidRatio(_))
        ));
    }
}
