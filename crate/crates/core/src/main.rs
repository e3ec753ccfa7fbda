use std::fs::File;
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use ham::config::ExperimentConfig;
use ham::error::{HamError, Result};
use ham::experiment::{run_experiment, sweep, SweepConfig};
use ham::io::{load_adapter, save_adapter, AdapterFile};
use ham::merging::{merge_baseline, MergeAlgorithm, MergeParams, MergedDelta};
use ham::tasks::{export_split, generate_stream, Split};

#[derive(Parser)]
#[command(name = "ham", version, about = "Hierarchical adapter merging for continual learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured task stream and write the results.
    Run { config: PathBuf },
    /// Run every point of the `[grid]` table in the config.
    Sweep { config: PathBuf },
    /// Print the header and shape of an adapter file.
    Inspect { file: PathBuf },
    /// Merge adapter files with a baseline algorithm.
    Merge {
        files: Vec<PathBuf>,
        #[arg(long, default_value = "linear")]
        algo: MergeAlgorithm,
        #[arg(long, default_value = "merged.hama")]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write the generated stream as text (`task class x...` per line).
    ExportStream {
        config: PathBuf,
        #[arg(long, default_value = "stream")]
        prefix: String,
    },
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Run { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let r = run_experiment(&cfg)?;
            println!("average_accuracy {:.6}", r.average_accuracy);
            if let Some(fm) = r.forgetting {
                println!("forgetting_measure {fm:.6}");
            }
            println!("output {}", cfg.resolved_output_dir().display());
        }
        Command::Sweep { config } => {
            let cfg = SweepConfig::load(&config)?;
            let report = sweep(&cfg)?;
            print!("{}", report.to_csv());
            let failed = report.failures();
            if failed > 0 {
                return Err(HamError::Training(format!("{failed} grid point(s) failed")));
            }
        }
        Command::Inspect { file } => {
            let f = load_adapter(&file)?;
            println!("kind {}", f.kind);
            println!("id {}", f.id);
            println!("alpha {}", f.alpha);
            println!("members {:?}", f.member_task_ids);
            for (i, l) in f.layers.iter().enumerate() {
                let (d, k) = l.weight_shape();
                println!("layer {i} d={d} k={k} r={} nonzero={}", l.rank(), l.nonzero_count());
            }
        }
        Command::Merge { files, algo, out, seed } => {
            if algo == MergeAlgorithm::Ham {
                return Err(HamError::Config("merge command takes linear, ties or dare_ties".into()));
            }
            if files.is_empty() {
                return Err(HamError::Input("no adapter files given".into()));
            }
            let loaded = files.iter().map(|p| load_adapter(p)).collect::<Result<Vec<_>>>()?;
            let deltas = loaded
                .iter()
                .map(|f| {
                    f.layers
                        .iter()
                        .map(|l| ham::adapters::delta_weight(l).map(|d| d.scale(f.alpha)))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?;
            let ids: Vec<usize> = loaded.iter().map(|f| f.id).collect();
            let params = MergeParams { seed, ..MergeParams::default() };
            let merged: MergedDelta = merge_baseline(algo, &deltas, &ids, &params)?;
            save_adapter(&out, &AdapterFile::from(&merged))?;
            println!("wrote {}", out.display());
        }
        Command::ExportStream { config, prefix } => {
            let cfg = ExperimentConfig::load(&config)?;
            let stream = generate_stream(&cfg.stream_spec())?;
            for (split, name) in [(Split::Train, "train"), (Split::Test, "test")] {
                let path = format!("{prefix}_{name}.txt");
                export_split(&stream, split, BufWriter::new(File::create(&path)?))?;
                println!("wrote {path}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
