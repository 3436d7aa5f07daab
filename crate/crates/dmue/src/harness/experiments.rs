//! Experiment drivers: the synthetic-noise benchmark (plain-CE baseline vs
//! the full framework on identically noised data) and the 8-row ablation
//! cube over the {latent distribution, similarity preserving, confidence}
//! switches.
//!
//! Every output file starts with the fully resolved configuration as `#`
//! comment lines, carries no timestamps, and is therefore byte-identical
//! across runs with the same settings and seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::datagen::{generate, inject_noise, Dataset};
use crate::trainer::{train, evaluate_model, AblationSwitches, EvalTarget, MetricRecord};

use super::config::Settings;
use super::HarnessError;

#[derive(Clone, Debug)]
pub struct ExperimentSpec {
    pub settings: Settings,
    pub out_dir: PathBuf,
}

/// One (ratio, variant, seed) training cell. A failed cell carries its
/// error text instead of aborting the other cells.
#[derive(Clone, Debug)]
pub struct Cell {
    pub ratio: f64,
    pub variant: String,
    pub seed: u64,
    pub outcome: Result<f64, String>,
}

#[derive(Clone, Debug)]
pub struct Aggregate {
    pub ratio: f64,
    pub variant: String,
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

#[derive(Clone, Debug)]
pub struct BenchTable {
    pub cells: Vec<Cell>,
    pub aggregates: Vec<Aggregate>,
}

impl BenchTable {
    pub fn aggregate(&self, ratio: f64, variant: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.ratio == ratio && a.variant == variant)
    }
}

fn mean_and_population_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn noised_dataset(settings: &Settings, ratio: f64, seed: u64) -> Result<Dataset, HarnessError> {
    let spec = settings.synthetic_spec(seed)?;
    Ok(inject_noise(generate(&spec)?, ratio, seed)?)
}

/// Trains one cell and returns its clean-test accuracy, writing the metric
/// log when an output directory is given.
fn run_cell(
    settings: &Settings,
    dataset: &Dataset,
    switches: AblationSwitches,
    seed: u64,
    log_path: Option<&Path>,
    header: &str,
) -> Result<f64, HarnessError> {
    let mut config = settings.train_config(seed);
    config.switches = switches;
    let out = train(dataset, &config)?;
    if let Some(path) = log_path {
        write_metric_log(path, header, &out.log)?;
    }
    Ok(evaluate_model(&out.model, &dataset.test, EvalTarget::TrueClass)?)
}

fn write_metric_log(path: &Path, header: &str, log: &[MetricRecord]) -> Result<(), HarnessError> {
    let mut text = String::new();
    text.push_str(header);
    for record in log {
        text.push_str(&record.log_line());
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

fn config_header(settings: &Settings, extra: &[(&str, String)]) -> String {
    let mut out = String::new();
    for line in settings.resolved_lines() {
        let _ = writeln!(out, "# {line}");
    }
    for (k, v) in extra {
        let _ = writeln!(out, "# {k} = {v}");
    }
    out
}

/// For each noise ratio and seed, trains a plain-CE baseline and the full
/// framework on identically noised data and reports mean and population
/// standard deviation of clean-test accuracy over the seeds.
pub fn run_noise_benchmark(spec: &ExperimentSpec) -> Result<BenchTable, HarnessError> {
    std::fs::create_dir_all(&spec.out_dir)?;
    let settings = &spec.settings;
    let mut cells = Vec::new();

    for &ratio in &settings.ratios {
        for &seed in &settings.seeds {
            let dataset = noised_dataset(settings, ratio, seed)?;
            for (variant, switches) in
                [("baseline", AblationSwitches::OFF), ("dmue", AblationSwitches::default())]
            {
                let log_name = format!("metrics_{variant}_rho{ratio}_seed{seed}.log");
                let header = config_header(
                    settings,
                    &[
                        ("cell_ratio", format!("{ratio}")),
                        ("cell_variant", variant.to_string()),
                        ("cell_seed", format!("{seed}")),
                    ],
                );
                let outcome = run_cell(
                    settings,
                    &dataset,
                    switches,
                    seed,
                    Some(&spec.out_dir.join(&log_name)),
                    &header,
                )
                .map_err(|e| e.to_string());
                cells.push(Cell { ratio, variant: variant.to_string(), seed, outcome });
            }
        }
    }

    let mut aggregates = Vec::new();
    for &ratio in &settings.ratios {
        for variant in ["baseline", "dmue"] {
            let accs: Vec<f64> = cells
                .iter()
                .filter(|c| c.ratio == ratio && c.variant == variant)
                .filter_map(|c| c.outcome.as_ref().ok().copied())
                .collect();
            if accs.is_empty() {
                continue;
            }
            let (mean, std) = mean_and_population_std(&accs);
            aggregates.push(Aggregate { ratio, variant: variant.to_string(), mean, std, n: accs.len() });
        }
    }

    let table = BenchTable { cells, aggregates };
    write_bench_files(spec, &table)?;
    Ok(table)
}

fn write_bench_files(spec: &ExperimentSpec, table: &BenchTable) -> Result<(), HarnessError> {
    let header = config_header(&spec.settings, &[]);

    let mut tsv = String::new();
    tsv.push_str(&header);
    tsv.push_str("row\tratio\tvariant\tseed\taccuracy\tstatus\n");
    for c in &table.cells {
        match &c.outcome {
            Ok(acc) => {
                let _ = writeln!(tsv, "cell\t{}\t{}\t{}\t{}\tok", c.ratio, c.variant, c.seed, acc);
            }
            Err(e) => {
                let _ = writeln!(
                    tsv,
                    "cell\t{}\t{}\t{}\tnan\t{}",
                    c.ratio,
                    c.variant,
                    c.seed,
                    e.replace(['\t', '\n'], " ")
                );
            }
        }
    }
    for a in &table.aggregates {
        let _ = writeln!(tsv, "agg\t{}\t{}\t{}\t{}\t{}", a.ratio, a.variant, a.n, a.mean, a.std);
    }
    std::fs::write(spec.out_dir.join("noise_bench.tsv"), tsv)?;

    let mut txt = String::new();
    txt.push_str(&header);
    txt.push_str("\nclean-test accuracy, mean +- population std over seeds\n\n");
    let _ = writeln!(txt, "{:<8} {:<22} {:<22} {:<10}", "ratio", "baseline", "dmue", "delta");
    for &ratio in &spec.settings.ratios {
        let base = table.aggregate(ratio, "baseline");
        let dmue = table.aggregate(ratio, "dmue");
        let fmt = |a: Option<&Aggregate>| match a {
            Some(a) => format!("{:.4} +- {:.4}", a.mean, a.std),
            None => "failed".to_string(),
        };
        let delta = match (base, dmue) {
            (Some(b), Some(d)) => format!("{:+.4}", d.mean - b.mean),
            _ => "-".to_string(),
        };
        let _ = writeln!(txt, "{:<8} {:<22} {:<22} {:<10}", ratio, fmt(base), fmt(dmue), delta);
    }
    std::fs::write(spec.out_dir.join("noise_bench.txt"), txt)?;
    Ok(())
}

/// One ablation row: a switch combination with its per-seed accuracies.
#[derive(Clone, Debug)]
pub struct AblationRow {
    pub switches: AblationSwitches,
    pub cells: Vec<Cell>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

/// The switch cube in report order: baseline first, single components,
/// pairs, then everything on.
pub const ABLATION_ORDER: [(bool, bool, bool); 8] = [
    (false, false, false),
    (true, false, false),
    (false, true, false),
    (false, false, true),
    (true, true, false),
    (false, true, true),
    (true, false, true),
    (true, true, true),
];

/// Trains all 2^3 switch combinations on the same noised datasets (one per
/// seed, at `settings.noise_ratio`).
pub fn run_ablation(spec: &ExperimentSpec) -> Result<AblationTable, HarnessError> {
    std::fs::create_dir_all(&spec.out_dir)?;
    let settings = &spec.settings;
    let ratio = settings.noise_ratio;

    let mut datasets = Vec::new();
    for &seed in &settings.seeds {
        datasets.push((seed, noised_dataset(settings, ratio, seed)?));
    }

    let mut rows = Vec::new();
    for (latent, sp, confidence) in ABLATION_ORDER {
        let switches =
            AblationSwitches { latent_distribution: latent, similarity_preserving: sp, confidence };
        let tag = format!(
            "l{}s{}c{}",
            u8::from(latent),
            u8::from(sp),
            u8::from(confidence)
        );
        let mut cells = Vec::new();
        for (seed, dataset) in &datasets {
            let log_name = format!("metrics_ablate_{tag}_seed{seed}.log");
            let header = config_header(
                settings,
                &[
                    ("cell_ratio", format!("{ratio}")),
                    ("cell_variant", format!("ablate_{tag}")),
                    ("cell_seed", format!("{seed}")),
                ],
            );
            let outcome = run_cell(
                settings,
                dataset,
                switches,
                *seed,
                Some(&spec.out_dir.join(&log_name)),
                &header,
            )
            .map_err(|e| e.to_string());
            cells.push(Cell { ratio, variant: format!("ablate_{tag}"), seed: *seed, outcome });
        }
        let accs: Vec<f64> = cells.iter().filter_map(|c| c.outcome.as_ref().ok().copied()).collect();
        let (mean, std) =
            if accs.is_empty() { (f64::NAN, f64::NAN) } else { mean_and_population_std(&accs) };
        rows.push(AblationRow { switches, cells, mean, std });
    }

    let table = AblationTable { rows };
    write_ablation_files(spec, &table)?;
    Ok(table)
}

fn write_ablation_files(spec: &ExperimentSpec, table: &AblationTable) -> Result<(), HarnessError> {
    let header = config_header(&spec.settings, &[]);
    let mark = |b: bool| if b { "x" } else { "-" };

    let mut tsv = String::new();
    tsv.push_str(&header);
    tsv.push_str("latent\tsp\tconfidence\tseed\taccuracy\tstatus\n");
    for row in &table.rows {
        for c in &row.cells {
            match &c.outcome {
                Ok(acc) => {
                    let _ = writeln!(
                        tsv,
                        "{}\t{}\t{}\t{}\t{}\tok",
                        row.switches.latent_distribution,
                        row.switches.similarity_preserving,
                        row.switches.confidence,
                        c.seed,
                        acc
                    );
                }
                Err(e) => {
                    let _ = writeln!(
                        tsv,
                        "{}\t{}\t{}\t{}\tnan\t{}",
                        row.switches.latent_distribution,
                        row.switches.similarity_preserving,
                        row.switches.confidence,
                        c.seed,
                        e.replace(['\t', '\n'], " ")
                    );
                }
            }
        }
    }
    std::fs::write(spec.out_dir.join("ablation.tsv"), tsv)?;

    let mut txt = String::new();
    txt.push_str(&header);
    txt.push_str("\nclean-test accuracy by component (mean +- population std over seeds)\n\n");
    let _ = writeln!(txt, "{:<8} {:<4} {:<6} {:<20}", "latent", "sp", "conf", "accuracy");
    for row in &table.rows {
        let _ = writeln!(
            txt,
            "{:<8} {:<4} {:<6} {:.4} +- {:.4}",
            mark(row.switches.latent_distribution),
            mark(row.switches.similarity_preserving),
            mark(row.switches.confidence),
            row.mean,
            row.std
        );
    }
    std::fs::write(spec.out_dir.join("ablation.txt"), txt)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_settings() -> Settings {
        Settings {
            samples_per_class: 20,
            test_per_class: 8,
            max_epoch: 2,
            batch_size: 12,
            ratios: vec![0.25],
            seeds: vec![1, 2],
            ..Settings::default()
        }
    }

    fn tmp_out(tag: &str) -> PathBuf {
        let dir = std::env::temp_dir().join(format!("dmue-exp-{tag}-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        dir
    }

    #[test]
    fn noise_benchmark_is_reproducible_byte_for_byte() {
        let settings = tiny_settings();
        let out_a = tmp_out("bench-a");
        let out_b = tmp_out("bench-b");
        run_noise_benchmark(&ExperimentSpec { settings: settings.clone(), out_dir: out_a.clone() })
            .unwrap();
        run_noise_benchmark(&ExperimentSpec { settings, out_dir: out_b.clone() }).unwrap();
        for name in ["noise_bench.tsv", "noise_bench.txt"] {
            let a = std::fs::read(out_a.join(name)).unwrap();
            let b = std::fs::read(out_b.join(name)).unwrap();
            assert_eq!(a, b, "{name} differs between identical runs");
        }
        // metric logs too
        let a = std::fs::read(out_a.join("metrics_dmue_rho0.25_seed1.log")).unwrap();
        let b = std::fs::read(out_b.join("metrics_dmue_rho0.25_seed1.log")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_has_eight_rows_and_matches_the_baseline_bitwise() {
        let mut settings = tiny_settings();
        settings.noise_ratio = 0.25;
        settings.seeds = vec![3];
        let bench_out = tmp_out("bench-c");
        let ablate_out = tmp_out("ablate-c");
        let bench = run_noise_benchmark(&ExperimentSpec {
            settings: settings.clone(),
            out_dir: bench_out,
        })
        .unwrap();
        let ablation =
            run_ablation(&ExperimentSpec { settings, out_dir: ablate_out }).unwrap();

        assert_eq!(ablation.rows.len(), 8);
        let all_off = &ablation.rows[0];
        assert_eq!(all_off.switches, AblationSwitches::OFF);
        let baseline = bench.aggregate(0.25, "baseline").unwrap();
        assert_eq!(
            all_off.mean.to_bits(),
            baseline.mean.to_bits(),
            "all-off ablation row must equal the plain baseline bitwise"
        );
    }
}
