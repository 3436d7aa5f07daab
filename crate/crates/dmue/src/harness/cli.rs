//! Command-line interface. Every hyperparameter is settable by flag; flags
//! override a `--config` file, which overrides the built-in defaults.
//! Commands that run experiments require explicit seeds.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint;
use crate::datagen::{generate, inject_noise, load_dataset, save_dataset};
use crate::trainer::{evaluate, evaluate_model, train, EvalTarget};
use crate::rng::{self, streams};

use super::config::Settings;
use super::experiments::{run_ablation, run_noise_benchmark, ExperimentSpec};
use super::inspect::{confidence_report, inspect_latent, write_confidence_report, write_latent_report};
use super::mc::{mc_verify_similarity, McSimilaritySpec};
use super::HarnessError;

#[derive(Parser)]
#[command(
    name = "dmue",
    about = "Latent distribution mining and pairwise uncertainty estimation on a synthetic ambiguous-label benchmark",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Hyperparameter overrides shared by every command. Unset flags fall back
/// to the `--config` file and then to the defaults.
#[derive(Args, Debug, Default)]
struct HyperFlags {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    confusable_pairs: Option<usize>,
    #[arg(long)]
    base_separation: Option<f64>,
    #[arg(long)]
    pair_separation: Option<f64>,
    #[arg(long)]
    spread: Option<f64>,
    #[arg(long)]
    samples_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    noise_ratio: Option<f64>,
    #[arg(long)]
    sharpen_t: Option<f64>,
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    beta: Option<usize>,
    #[arg(long)]
    max_epoch: Option<usize>,
    /// 0 = one pass over the training split per epoch.
    #[arg(long)]
    iters_per_epoch: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    lr_decay_epochs: Option<Vec<usize>>,
    #[arg(long)]
    lr_decay_factor: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    decoupled_weight_decay: Option<bool>,
    #[arg(long)]
    weight_decay_on_uncertainty: Option<bool>,
    #[arg(long)]
    trunk_width: Option<usize>,
    #[arg(long)]
    head_hidden: Option<usize>,
    #[arg(long)]
    enable_latent: Option<bool>,
    #[arg(long)]
    enable_sp: Option<bool>,
    #[arg(long)]
    enable_confidence: Option<bool>,
    #[arg(long)]
    detach_confidence: Option<bool>,
    #[arg(long)]
    renormalize_soft: Option<bool>,
    #[arg(long)]
    checked: Option<bool>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
}

impl HyperFlags {
    fn resolve(&self) -> Result<Settings, HarnessError> {
        let mut s = Settings::default();
        if let Some(path) = &self.config {
            s.apply_file(path)?;
        }
        macro_rules! over {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    s.$field = v.clone();
                }
            };
        }
        over!(num_classes);
        over!(feature_dim);
        over!(confusable_pairs);
        over!(base_separation);
        over!(pair_separation);
        over!(spread);
        over!(samples_per_class);
        over!(test_per_class);
        over!(noise_ratio);
        over!(sharpen_t);
        over!(omega);
        over!(gamma);
        over!(beta);
        over!(max_epoch);
        over!(iters_per_epoch);
        over!(batch_size);
        over!(lr);
        over!(lr_decay_epochs);
        over!(lr_decay_factor);
        over!(weight_decay);
        over!(decoupled_weight_decay);
        over!(weight_decay_on_uncertainty);
        over!(trunk_width);
        over!(head_hidden);
        over!(enable_latent);
        over!(enable_sp);
        over!(enable_confidence);
        over!(detach_confidence);
        over!(renormalize_soft);
        over!(checked);
        over!(ratios);
        Ok(s)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (with label noise baked in) and write
    /// it as a text file.
    GenData {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model; optionally save the checkpoint and the metric log.
    Train {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long)]
        seed: u64,
        /// Dataset file from gen-data; omitted = synthesize with this seed.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out_model: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Accuracy of a checkpoint on a dataset split.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// `test` (scored against true classes) or `train` (annotations).
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Baseline-vs-framework benchmark over noise ratios and seeds.
    NoiseBench {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "bench-out")]
        out_dir: PathBuf,
    },
    /// All 8 component-switch combinations on the same noised data.
    Ablate {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablation-out")]
        out_dir: PathBuf,
    },
    /// Mined latent distributions vs the generator's ground truth.
    Inspect {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-batch confidence scores and ranks under a trained model.
    Confidence {
        #[command(flatten)]
        flags: HyperFlags,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        batches: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Monte-Carlo check of the class-similarity expectation.
    McVerify {
        #[arg(long)]
        alpha: f64,
        #[arg(long, default_value_t = 0.5)]
        sigma: f64,
        #[arg(long, default_value_t = 32)]
        dim: usize,
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reduce a full checkpoint to the deployable target branch.
    Strip {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Entry point used by `main`. Returns the process exit code: 0 on
/// success, 2 on argument errors, 1 on execution errors (with a one-line
/// diagnostic on stderr).
pub fn cli<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let parsed = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(parsed.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn header_for(settings: &Settings, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    for line in settings.resolved_lines() {
        out.push_str("# ");
        out.push_str(&line);
        out.push('\n');
    }
    for (k, v) in extra {
        out.push_str(&format!("# {k} = {v}\n"));
    }
    out
}

fn run(command: Command) -> Result<(), HarnessError> {
    match command {
        Command::GenData { flags, seed, out } => {
            let settings = flags.resolve()?;
            let spec = settings.synthetic_spec(seed)?;
            let dataset = inject_noise(generate(&spec)?, settings.noise_ratio, seed)?;
            save_dataset(&dataset, &out)?;
            println!(
                "wrote {} ({} train, {} test, {} classes, noise ratio {})",
                out.display(),
                dataset.train.len(),
                dataset.test.len(),
                dataset.num_classes,
                settings.noise_ratio
            );
            Ok(())
        }
        Command::Train { flags, seed, data, out_model, metrics } => {
            let settings = flags.resolve()?;
            let dataset = match &data {
                Some(path) => load_dataset(path)?,
                None => {
                    let spec = settings.synthetic_spec(seed)?;
                    inject_noise(generate(&spec)?, settings.noise_ratio, seed)?
                }
            };
            let config = settings.train_config(seed);
            let output = train(&dataset, &config)?;
            let train_acc = evaluate_model(&output.model, &dataset.train, EvalTarget::Annotation)?;
            let test_acc = evaluate_model(&output.model, &dataset.test, EvalTarget::TrueClass)?;
            println!("train accuracy (annotations): {train_acc:.4}");
            println!("test accuracy (true classes): {test_acc:.4}");
            if let Some(path) = &metrics {
                let header = header_for(&settings, &[("cell_seed", seed.to_string())]);
                let mut text = header;
                for record in &output.log {
                    text.push_str(&record.log_line());
                    text.push('\n');
                }
                std::fs::write(path, text)?;
                println!("metrics: {}", path.display());
            }
            if let Some(path) = &out_model {
                checkpoint::save_full(&output.model, &output.uncertainty, path)?;
                println!("checkpoint: {}", path.display());
            }
            Ok(())
        }
        Command::Eval { model, data, split } => {
            let deploy = checkpoint::load(&model)?.into_deploy();
            let dataset = load_dataset(&data)?;
            let (samples, target) = match split.as_str() {
                "test" => (&dataset.test, EvalTarget::TrueClass),
                "train" => (&dataset.train, EvalTarget::Annotation),
                other => {
                    return Err(HarnessError::Config(format!(
                        "unknown split `{other}` (expected `train` or `test`)"
                    )))
                }
            };
            let accuracy = evaluate(&deploy, samples, target)?;
            println!("accuracy {accuracy}");
            Ok(())
        }
        Command::NoiseBench { flags, seeds, out_dir } => {
            let mut settings = flags.resolve()?;
            settings.seeds = seeds;
            let spec = ExperimentSpec { settings, out_dir: out_dir.clone() };
            run_noise_benchmark(&spec)?;
            print!("{}", std::fs::read_to_string(out_dir.join("noise_bench.txt"))?);
            println!("reports: {}", out_dir.display());
            Ok(())
        }
        Command::Ablate { flags, seeds, out_dir } => {
            let mut settings = flags.resolve()?;
            settings.seeds = seeds;
            let spec = ExperimentSpec { settings, out_dir: out_dir.clone() };
            run_ablation(&spec)?;
            print!("{}", std::fs::read_to_string(out_dir.join("ablation.txt"))?);
            println!("reports: {}", out_dir.display());
            Ok(())
        }
        Command::Inspect { flags, model, data, out } => {
            let settings = flags.resolve()?;
            let (branch_set, _) = checkpoint::load_full(&model)?;
            let dataset = load_dataset(&data)?;
            let inspection = inspect_latent(&branch_set, &dataset);
            let header = header_for(&settings, &[]);
            write_latent_report(&inspection, &header, &out)?;
            println!(
                "mean KL {:.6}, flipped recovery {:.4} over {} flipped ({} degenerate oracles)",
                inspection.mean_kl,
                inspection.flipped_recovery,
                inspection.flipped_count,
                inspection.degenerate_count
            );
            println!("report: {}", out.display());
            Ok(())
        }
        Command::Confidence { flags, model, data, seed, batches, out } => {
            let settings = flags.resolve()?;
            let (branch_set, uncertainty) = checkpoint::load_full(&model)?;
            let dataset = load_dataset(&data)?;
            let mut rng = rng::stream(seed, streams::BATCH);
            let report = confidence_report(
                &branch_set,
                &uncertainty,
                &dataset,
                batches,
                settings.batch_size,
                &mut rng,
            )?;
            let header = header_for(
                &settings,
                &[("confidence_seed", seed.to_string()), ("batches", batches.to_string())],
            );
            write_confidence_report(&report, &header, &out)?;
            println!(
                "mean alpha: flipped {:.4} ({} seen) vs clean {:.4} ({} seen)",
                report.mean_alpha_flipped,
                report.flipped_seen,
                report.mean_alpha_clean,
                report.clean_seen
            );
            println!("report: {}", out.display());
            Ok(())
        }
        Command::McVerify { alpha, sigma, dim, samples, seed, out } => {
            let spec = McSimilaritySpec { alpha, sigma, dim, samples, seed };
            let result = mc_verify_similarity(&spec)?;
            let text = format!(
                "alpha = {alpha}\nsigma = {sigma}\ndim = {dim}\nsamples = {samples}\nseed = {seed}\nempirical = {}\nmean_cos_theta = {}\npredicted = {}\ngap = {}\n",
                result.empirical, result.mean_cos_theta, result.predicted, result.gap
            );
            print!("{text}");
            if let Some(path) = out {
                std::fs::write(&path, text)?;
                println!("report: {}", path.display());
            }
            Ok(())
        }
        Command::Strip { model, out } => {
            let deploy = checkpoint::load(&model)?.into_deploy();
            checkpoint::save_stripped(&deploy, &out)?;
            let full_len = std::fs::metadata(&model)?.len();
            let lean_len = std::fs::metadata(&out)?.len();
            println!("stripped {} ({full_len} bytes) -> {} ({lean_len} bytes)", model.display(), out.display());
            Ok(())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("dmue-cli-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn run_cli(args: &[&str]) -> i32 {
        cli(std::iter::once("dmue").chain(args.iter().copied()))
    }

    #[test]
    fn gen_train_eval_inspect_strip_pipeline() {
        let dir = tmp("pipeline");
        let data = dir.join("data.txt");
        let model = dir.join("model.ckpt");
        let stripped = dir.join("stripped.ckpt");
        let metrics = dir.join("metrics.log");
        let report = dir.join("inspect.tsv");
        let confidence = dir.join("confidence.tsv");

        let small = [
            "--samples-per-class",
            "20",
            "--test-per-class",
            "8",
            "--max-epoch",
            "2",
            "--batch-size",
            "12",
        ];

        let mut args: Vec<&str> =
            vec!["gen-data", "--seed", "5", "--out", data.to_str().unwrap()];
        args.extend_from_slice(&small);
        assert_eq!(run_cli(&args), 0);
        assert!(data.exists());

        let mut args: Vec<&str> = vec![
            "train",
            "--seed",
            "5",
            "--data",
            data.to_str().unwrap(),
            "--out-model",
            model.to_str().unwrap(),
            "--metrics",
            metrics.to_str().unwrap(),
        ];
        args.extend_from_slice(&small);
        assert_eq!(run_cli(&args), 0);
        assert!(model.exists() && metrics.exists());

        assert_eq!(
            run_cli(&["eval", "--model", model.to_str().unwrap(), "--data", data.to_str().unwrap()]),
            0
        );

        let mut args: Vec<&str> = vec![
            "inspect",
            "--model",
            model.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ];
        args.extend_from_slice(&small);
        assert_eq!(run_cli(&args), 0);
        assert!(report.exists());

        let mut args: Vec<&str> = vec![
            "confidence",
            "--model",
            model.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--seed",
            "3",
            "--out",
            confidence.to_str().unwrap(),
        ];
        args.extend_from_slice(&small);
        assert_eq!(run_cli(&args), 0);
        assert!(confidence.exists());

        assert_eq!(
            run_cli(&["strip", "--model", model.to_str().unwrap(), "--out", stripped.to_str().unwrap()]),
            0
        );
        assert!(stripped.exists());
        assert!(
            std::fs::metadata(&stripped).unwrap().len() < std::fs::metadata(&model).unwrap().len()
        );

        // a stripped checkpoint cannot serve commands that need aux heads
        let mut args: Vec<&str> = vec![
            "inspect",
            "--model",
            stripped.to_str().unwrap(),
            "--data",
            data.to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
        ];
        args.extend_from_slice(&small);
        assert_eq!(run_cli(&args), 1);
    }

    #[test]
    fn config_file_is_overridden_by_flags() {
        let dir = tmp("config");
        let cfg = dir.join("base.cfg");
        std::fs::write(&cfg, "beta = 4\nomega = 0.25\n# comment\n").unwrap();
        let flags = HyperFlags {
            config: Some(cfg),
            omega: Some(0.75),
            ..HyperFlags::default()
        };
        let settings = flags.resolve().unwrap();
        assert_eq!(settings.beta, 4);
        assert_eq!(settings.omega, 0.75);
    }

    #[test]
    fn unknown_flags_and_missing_args_fail() {
        assert_eq!(run_cli(&["train", "--seed", "1", "--frobnicate"]), 2);
        assert_eq!(run_cli(&["train"]), 2, "--seed is required");
        assert_eq!(run_cli(&["noise-bench"]), 2, "--seeds is required");
        assert_eq!(run_cli(&["mc-verify", "--alpha", "0.5"]), 2, "--seed is required");
        assert_eq!(run_cli(&["eval", "--model", "/nonexistent", "--data", "/nonexistent"]), 1);
    }

    #[test]
    fn mc_verify_prints_and_writes() {
        let dir = tmp("mc");
        let out = dir.join("mc.txt");
        assert_eq!(
            run_cli(&[
                "mc-verify",
                "--alpha",
                "1.5708",
                "--sigma",
                "0.5",
                "--dim",
                "32",
                "--samples",
                "2000",
                "--seed",
                "7",
                "--out",
                out.to_str().unwrap()
            ]),
            0
        );
        let text = std::fs::read_to_string(&out).unwrap();
        assert!(text.contains("gap = "));
    }
}
