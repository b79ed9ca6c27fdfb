//! `crlab` command line: single runs, the efficiency / open-set / ablation
//! experiments, the gradient verification suite, and dataset export.

mod config;
mod manifest;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use crlab_core::data::{export_csv, generate_dataset, inject_ood};
use crlab_core::error::{Error, Result};
use crlab_core::eval::{
    run_ablation_sweep, run_efficiency_experiment, run_openset_experiment, AblationAxis,
    ExperimentReport, OodPreset,
};
use crlab_core::gradcheck::run_gradcheck;
use crlab_core::trainer::{run, write_run_outputs};

use config::{parse_config, OverrideArgs, Resolved};

#[derive(Parser)]
#[command(
    name = "crlab",
    about = "Semi-supervised learning laboratory: consistency + contrastive regularization on synthetic tasks",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// key=value config file (flags override file values)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; every file this command writes lives under it
    #[arg(long, default_value = "crlab-out")]
    out: PathBuf,
    /// Skip work when a completed manifest with the same config exists
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    overrides: OverrideArgs,
}

#[derive(Args, Clone)]
struct SweepArgs {
    /// Number of seeds (seed i is 101*i)
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    /// Max experiment arms run concurrently
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train once and write metrics, summary, and checkpoints
    Run {
        #[command(flatten)]
        common: CommonArgs,
        /// OOD samples to inject into the unlabeled pool
        #[arg(long = "ood-count", default_value_t = 0)]
        ood_count: usize,
        /// OOD preset: far | near
        #[arg(long = "ood-preset", default_value = "far")]
        ood_preset: String,
    },
    /// Matched cs-only vs cs+cr arms: convergence speed and clustering
    Efficiency {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sweep: SweepArgs,
    },
    /// Accuracy degradation under OOD contamination of the unlabeled pool
    Openset {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        /// OOD preset: far | near
        #[arg(long, default_value = "far")]
        preset: String,
        /// Comma-separated OOD counts (ascending, starting at 0); default
        /// 0, u/2, u, 2u for unlabeled pool size u
        #[arg(long = "ood-counts")]
        ood_counts: Option<String>,
    },
    /// Sweep one hyperparameter axis and tabulate final accuracy
    Ablate {
        #[command(flatten)]
        common: CommonArgs,
        #[command(flatten)]
        sweep: SweepArgs,
        /// Axis: lambda-cr | lambda-cs | mu | delta | delta-prime | views | loss-mode
        #[arg(long)]
        axis: String,
        /// Comma-separated values for the axis
        #[arg(long)]
        values: String,
    },
    /// Verify every analytic gradient against finite differences and every
    /// loss against naive oracles; print one line per check
    Gradcheck {
        /// Random instances per check
        #[arg(long, default_value_t = 100)]
        instances: usize,
        /// Seed for instance generation
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Write the synthetic dataset as CSV
    ExportData {
        #[command(flatten)]
        common: CommonArgs,
        /// OOD samples to inject into the unlabeled pool
        #[arg(long = "ood-count", default_value_t = 0)]
        ood_count: usize,
        /// OOD preset: far | near
        #[arg(long = "ood-preset", default_value = "far")]
        ood_preset: String,
    },
}

fn seeds_list(n: usize) -> Vec<u64> {
    (1..=n as u64).map(|i| 101 * i).collect()
}

fn write_report(dir: &Path, report: &ExperimentReport) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir)?;
    let mut outputs = vec!["report.json".to_string()];
    std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(report)?)?;
    for arm in &report.arms {
        let file = format!("metrics-{}.csv", arm.name);
        std::fs::write(dir.join(&file), arm.metrics.to_csv())?;
        outputs.push(file);
    }
    Ok(outputs)
}

fn resolved_for(common: &CommonArgs) -> Result<Resolved> {
    parse_config(common.config.as_deref(), &common.overrides)
}

fn guard_resume(
    common: &CommonArgs,
    command: &str,
    resolved: &Resolved,
    extra: &[(&str, String)],
) -> Result<Option<String>> {
    let hash = manifest::config_hash(command, &resolved.echo(), extra);
    if common.resume && manifest::is_complete(&common.out, &hash) {
        println!("{command}: complete manifest found in {}; nothing to do", common.out.display());
        return Ok(None);
    }
    Ok(Some(hash))
}

fn cmd_run(common: &CommonArgs, ood_count: usize, ood_preset: &str) -> Result<()> {
    let resolved = resolved_for(common)?;
    let extra = [("ood_count", ood_count.to_string()), ("ood_preset", ood_preset.to_string())];
    let Some(hash) = guard_resume(common, "run", &resolved, &extra)? else {
        return Ok(());
    };
    let spec = resolved.dataset_spec();
    let mut dataset = generate_dataset(&spec)?;
    if ood_count > 0 {
        let preset = OodPreset::parse(ood_preset)?;
        let ood = preset.build(&spec, ood_count, resolved.train.seed ^ 0x00D);
        dataset.unlabeled = inject_ood(&dataset.unlabeled, &ood)?;
    }
    let result = match run(&resolved.train, &dataset) {
        Ok(r) => r,
        Err(Error::NonFiniteLoss { step, diagnostic }) => {
            std::fs::create_dir_all(&common.out)?;
            std::fs::write(
                common.out.join("diagnostic.json"),
                format!("{{\"step\":{step},\"breakdown\":{diagnostic}}}"),
            )?;
            return Err(Error::NonFiniteLoss { step, diagnostic });
        }
        Err(e) => return Err(e),
    };
    let outputs = write_run_outputs(&common.out, &resolved.train, &spec, &result)?;
    manifest::write(&common.out, "run", &hash, &resolved.echo(), &outputs)?;
    let last = result.metrics.last().expect("at least the initial row");
    println!(
        "run complete: {} steps, acc_raw {:.4}, acc_ema {:.4}, outputs in {}",
        resolved.train.steps,
        last.acc_raw,
        last.acc_ema,
        common.out.display()
    );
    Ok(())
}

fn cmd_efficiency(common: &CommonArgs, sweep: &SweepArgs) -> Result<()> {
    let resolved = resolved_for(common)?;
    let seeds = seeds_list(sweep.seeds);
    let extra = [("seeds", format!("{seeds:?}"))];
    let Some(hash) = guard_resume(common, "efficiency", &resolved, &extra)? else {
        return Ok(());
    };
    let report = run_efficiency_experiment(
        &resolved.train,
        &resolved.dataset_spec(),
        &seeds,
        sweep.jobs,
    )?;
    let outputs = write_report(&common.out, &report)?;
    manifest::write(&common.out, "efficiency", &hash, &resolved.echo(), &outputs)?;
    println!(
        "efficiency: {} of {} seeds reach the cs-only final accuracy within half the steps",
        report.findings["seeds_with_crossover_at_half"], sweep.seeds
    );
    Ok(())
}

fn cmd_openset(
    common: &CommonArgs,
    sweep: &SweepArgs,
    preset: &str,
    ood_counts: Option<&str>,
) -> Result<()> {
    let resolved = resolved_for(common)?;
    let counts: Vec<usize> = match ood_counts {
        Some(list) => list
            .split(',')
            .map(|c| {
                c.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad ood count `{c}`")))
            })
            .collect::<Result<_>>()?,
        None => {
            let u = resolved.data.unlabeled;
            vec![0, u / 2, u, 2 * u]
        }
    };
    let seeds = seeds_list(sweep.seeds);
    let extra =
        [("seeds", format!("{seeds:?}")), ("preset", preset.to_string()), ("counts", format!("{counts:?}"))];
    let Some(hash) = guard_resume(common, "openset", &resolved, &extra)? else {
        return Ok(());
    };
    let report = run_openset_experiment(
        &resolved.train,
        &resolved.dataset_spec(),
        OodPreset::parse(preset)?,
        &counts,
        &seeds,
        sweep.jobs,
    )?;
    let outputs = write_report(&common.out, &report)?;
    manifest::write(&common.out, "openset", &hash, &resolved.echo(), &outputs)?;
    println!(
        "openset ({preset}): cs+cr degrades no more than cs-only on {} of {} seeds",
        report.findings["seeds_where_cr_degrades_no_more"], sweep.seeds
    );
    Ok(())
}

fn cmd_ablate(common: &CommonArgs, sweep: &SweepArgs, axis: &str, values: &str) -> Result<()> {
    let resolved = resolved_for(common)?;
    let axis = AblationAxis::parse(axis)?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    let seeds = seeds_list(sweep.seeds);
    let extra = [
        ("seeds", format!("{seeds:?}")),
        ("axis", axis.as_str().to_string()),
        ("values", values.join(",")),
    ];
    let Some(hash) = guard_resume(common, "ablate", &resolved, &extra)? else {
        return Ok(());
    };
    let report =
        run_ablation_sweep(&resolved.train, &resolved.dataset_spec(), axis, &values, &seeds, sweep.jobs)?;
    let outputs = write_report(&common.out, &report)?;
    manifest::write(&common.out, "ablate", &hash, &resolved.echo(), &outputs)?;
    println!("ablation over {} complete: {} arms", axis.as_str(), report.arms.len());
    Ok(())
}

fn cmd_gradcheck(instances: usize, seed: u64) -> Result<()> {
    let started = std::time::Instant::now();
    let report = run_gradcheck(instances, seed)?;
    for check in &report.checks {
        println!(
            "{} {:<55} max error {:9.3e}  (tolerance {:.0e}, {} instances)",
            if check.pass { "PASS" } else { "FAIL" },
            check.name,
            check.max_error,
            check.tolerance,
            check.instances
        );
    }
    println!("gradcheck finished in {:.2}s", started.elapsed().as_secs_f64());
    if report.all_pass() {
        Ok(())
    } else {
        Err(Error::NonFinite("gradcheck found a tolerance violation".into()))
    }
}

fn cmd_export_data(common: &CommonArgs, ood_count: usize, ood_preset: &str) -> Result<()> {
    let resolved = resolved_for(common)?;
    let extra = [("ood_count", ood_count.to_string()), ("ood_preset", ood_preset.to_string())];
    let Some(hash) = guard_resume(common, "export-data", &resolved, &extra)? else {
        return Ok(());
    };
    let spec = resolved.dataset_spec();
    let mut dataset = generate_dataset(&spec)?;
    if ood_count > 0 {
        let preset = OodPreset::parse(ood_preset)?;
        let ood = preset.build(&spec, ood_count, resolved.train.seed ^ 0x00D);
        dataset.unlabeled = inject_ood(&dataset.unlabeled, &ood)?;
    }
    std::fs::create_dir_all(&common.out)?;
    let mut file = std::fs::File::create(common.out.join("dataset.csv"))?;
    export_csv(&dataset, &mut file)?;
    manifest::write(&common.out, "export-data", &hash, &resolved.echo(), &["dataset.csv".to_string()])?;
    println!("dataset written to {}", common.out.join("dataset.csv").display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Run { common, ood_count, ood_preset } => cmd_run(common, *ood_count, ood_preset),
        Command::Efficiency { common, sweep } => cmd_efficiency(common, sweep),
        Command::Openset { common, sweep, preset, ood_counts } => {
            cmd_openset(common, sweep, preset, ood_counts.as_deref())
        }
        Command::Ablate { common, sweep, axis, values } => cmd_ablate(common, sweep, axis, values),
        Command::Gradcheck { instances, seed } => cmd_gradcheck(*instances, *seed),
        Command::ExportData { common, ood_count, ood_preset } => {
            cmd_export_data(common, *ood_count, ood_preset)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
