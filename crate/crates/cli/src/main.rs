use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use provaudit::audit::{render_report, ReportFormat};
use provaudit::calibration::{DecisionThreshold, ThresholdPolicy};
use provaudit::config::CliConfig;
use provaudit::image::CanonicalSize;
use provaudit::synth::{demo_files, DemoSpec};
use provaudit::workspace::{self, audit_exit_code, SampleMeta, Workspace};

/// Audit generated images for replication of a training corpus.
#[derive(Parser, Debug)]
#[command(name = "provaudit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct WorkspaceArg {
    /// Workspace directory holding the corpus artifacts.
    #[arg(long, short = 'w', default_value = "provaudit-workspace")]
    workspace: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Decode and featurize every image in a corpus directory.
    Ingest {
        corpus_dir: PathBuf,
        #[command(flatten)]
        ws: WorkspaceArg,
        /// Canonical side length: 64, 128 or 256.
        #[arg(long)]
        size: Option<usize>,
        /// Filter bank seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Build the nearest-neighbour graph over the ingested corpus.
    BuildIndex {
        #[command(flatten)]
        ws: WorkspaceArg,
        /// Graph construction seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Choose a decision threshold from labeled pairs (`id_a,id_b,label`).
    Calibrate {
        pairs_csv: PathBuf,
        #[command(flatten)]
        ws: WorkspaceArg,
        /// youden, fpr:<v>, tpr:<v> or fixed:<v>.
        #[arg(long)]
        policy: Option<ThresholdPolicy>,
        /// Fit per-channel weights from the pairs before scoring them.
        #[arg(long)]
        fit_weights: bool,
    },
    /// Audit every image in a directory; exits 3 if any replicates the corpus.
    Audit {
        samples_dir: PathBuf,
        #[command(flatten)]
        ws: WorkspaceArg,
        #[arg(long, default_value = "text")]
        format: ReportFormat,
        /// Write the report here instead of standard output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace the calibrated threshold, as fixed:<v>.
        #[arg(long)]
        policy: Option<ThresholdPolicy>,
        #[arg(long)]
        ef_search: Option<usize>,
        /// Coarse candidates per sample.
        #[arg(long)]
        k: Option<usize>,
        /// Candidates re-scored with the full distance.
        #[arg(long)]
        rerank: Option<usize>,
        #[arg(long, default_value = "unspecified")]
        model_id: String,
        #[arg(long)]
        user_id: Option<String>,
        #[arg(long)]
        labor_note: Option<String>,
    },
    /// Compare exact search with the graph index at several beam widths.
    Bench {
        #[command(flatten)]
        ws: WorkspaceArg,
        #[arg(long, default_value_t = 100)]
        queries: usize,
        /// Query seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_delimiter = ',', default_values_t = [16, 32, 64, 128])]
        ef_search: Vec<usize>,
    },
    /// Write a synthetic corpus, samples and calibration pairs to try the tool on.
    Demo {
        out_dir: PathBuf,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = 200)]
        corpus: usize,
    },
}

fn apply_threads() -> anyhow::Result<()> {
    if let Ok(value) = std::env::var("PROVAUDIT_THREADS") {
        let threads: usize = value
            .parse()
            .with_context(|| format!("PROVAUDIT_THREADS must be a positive integer, got `{value}`"))?;
        if threads == 0 {
            bail!("PROVAUDIT_THREADS must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(threads).build_global()?;
    }
    Ok(())
}

fn write_demo(out_dir: &Path, seed: u64, corpus: usize) -> anyhow::Result<()> {
    let spec = DemoSpec {
        seed,
        corpus,
        ..DemoSpec::default()
    };
    if corpus < spec.copies + spec.shifts + spec.similar_pairs {
        bail!("the demo needs a corpus of at least {} images", spec.copies + spec.shifts + spec.similar_pairs);
    }
    for (rel, bytes) in demo_files(&spec) {
        let path = out_dir.join(rel);
        std::fs::create_dir_all(path.parent().expect("demo files live in folders"))?;
        std::fs::write(&path, bytes).with_context(|| format!("writing {}", path.display()))?;
    }
    println!("wrote demo corpus, samples and calibration pairs to {}", out_dir.display());
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    apply_threads()?;
    match cli.command {
        Command::Ingest { corpus_dir, ws, size, seed } => {
            let ws = Workspace::new(ws.workspace);
            let mut config = ws.load_config()?;
            if let Some(size) = size {
                config.canonical_size = CanonicalSize::new(size)?;
            }
            if let Some(seed) = seed {
                config.filter_seed = seed;
            }
            let outcome = workspace::ingest(&corpus_dir, &ws, &config)?;
            for w in &outcome.warnings {
                eprintln!("warning: skipped {w}");
            }
            let aliases: usize = outcome.manifest.entries.iter().map(|e| e.aliases.len()).sum();
            println!(
                "ingested {} images ({aliases} duplicate files aliased) into {}; corpus id {}",
                outcome.manifest.entries.len(),
                ws.root().display(),
                outcome.manifest.corpus_id
            );
        }
        Command::BuildIndex { ws, seed } => {
            let ws = Workspace::new(ws.workspace);
            let mut config = ws.load_config()?;
            if let Some(seed) = seed {
                config.ann.seed = seed;
            }
            let stats = workspace::build_index(&ws, &config)?;
            println!(
                "index: {} nodes, {} edges, {} levels, built in {:.3} s",
                stats.nodes,
                stats.edges,
                stats.max_level + 1,
                stats.elapsed.as_secs_f64()
            );
        }
        Command::Calibrate { pairs_csv, ws, policy, fit_weights } => {
            let ws = Workspace::new(ws.workspace);
            let config = ws.load_config()?;
            let policy = policy.unwrap_or(config.threshold_policy);
            let outcome = workspace::calibrate(&pairs_csv, &ws, &config, policy, fit_weights)?;
            let t = outcome.threshold;
            print!(
                "{} similar / {} dissimilar pairs, AUC {:.4}; threshold {:.6} ({})",
                outcome.similar, outcome.dissimilar, outcome.auc, t.value, t.policy
            );
            if let Some(a) = t.achieved {
                print!(", tpr {:.4}, fpr {:.4}", a.tpr, a.fpr);
            }
            println!();
        }
        Command::Audit {
            samples_dir,
            ws,
            format,
            out,
            policy,
            ef_search,
            k,
            rerank,
            model_id,
            user_id,
            labor_note,
        } => {
            let ws = Workspace::new(ws.workspace);
            let mut config: CliConfig = ws.load_config()?;
            if let Some(ef) = ef_search {
                config.ann.ef_search = ef;
            }
            if let Some(k) = k {
                config.retrieval.k = k;
            }
            if let Some(r) = rerank {
                config.retrieval.rerank = r;
            }
            let config = config.validate()?;
            let threshold = match policy {
                None => None,
                Some(ThresholdPolicy::Fixed(v)) => Some(DecisionThreshold::fixed(v)?),
                Some(other) => bail!("`--policy {other}` needs a calibration curve; run `provaudit calibrate` instead"),
            };
            let meta = SampleMeta {
                model_id,
                user_id,
                labor_note,
            };
            let report = workspace::audit_dir(&samples_dir, &ws, &config, threshold, &meta)?;
            let rendered = render_report(&report, format);
            match out {
                Some(path) => std::fs::write(&path, rendered).with_context(|| format!("writing {}", path.display()))?,
                None => print!("{rendered}"),
            }
            return Ok(ExitCode::from(audit_exit_code(&report) as u8));
        }
        Command::Bench { ws, queries, seed, ef_search } => {
            let ws = Workspace::new(ws.workspace);
            let report = workspace::bench(&ws, queries, seed, &ef_search)?;
            println!("corpus {} entries, {} queries", report.corpus_size, report.queries);
            println!("{:<10} {:>12} {:>10} {:>10} {:>12}", "search", "queries/s", "recall@1", "recall@10", "visited");
            for row in &report.rows {
                let label = row.ef_search.map_or("exact".to_string(), |ef| format!("ef={ef}"));
                println!(
                    "{label:<10} {:>12.1} {:>10.3} {:>10.3} {:>12.1}",
                    row.queries_per_second, row.recall_at_1, row.recall_at_10, row.mean_visited
                );
            }
        }
        Command::Demo { out_dir, seed, corpus } => write_demo(&out_dir, seed, corpus)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
