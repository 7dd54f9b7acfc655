use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use vpl::io::write_sequence;
use vpl::pipeline::{InStage, PipelineConfig, Stage, StageError, StageStatus, Workspace};
use vpl::synth::{default_scene, generate};
use vpl::voting::Estimator;

/// Multi-view pseudo-labelling of aligned LiDAR sequences.
#[derive(Parser, Debug)]
#[command(name = "vpl", version)]
struct Cli {
    /// Pipeline configuration (TOML).
    #[arg(long, short, global = true, default_value = "vpl.toml")]
    config: PathBuf,
    /// Recompute every stage, ignoring cached artifacts.
    #[arg(long, global = true)]
    force: bool,
    /// Worker threads (overrides run.workers; 0 = one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Replaces every seed in the config.
    #[arg(long, global = true)]
    seed_override: Option<u64>,
    /// Election estimator (overrides voting.estimator).
    #[arg(long, global = true)]
    estimator: Option<Estimator>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write the default synthetic scene as a dataset plus a matching config.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge the scans into one world-frame cloud.
    Align,
    /// Sample virtual poses and render the views.
    Render,
    /// Segment every view and accumulate the votes.
    Segment,
    /// Elect one label per point.
    Vote,
    /// Score the pseudo-labels against ground truth.
    Eval,
    /// Every stage, evaluating when ground truth is configured.
    Run,
}

fn synth(out: &Path, seed: u64) -> Result<(), StageError> {
    let seq = generate(&default_scene(seed)).in_stage(Stage::Synth)?;
    write_sequence(&seq, out).in_stage(Stage::Synth)?;
    let mut cfg = PipelineConfig::default();
    cfg.paths.scans = "scans".into();
    cfg.paths.poses = "poses.txt".into();
    cfg.paths.labels = Some("labels".into());
    cfg.paths.classes = Some("classes.txt".into());
    cfg.paths.work_dir = "work".into();
    cfg.override_seed(seed);
    let path = out.join("vpl.toml");
    std::fs::write(&path, cfg.to_toml())
        .map_err(|e| vpl::Error::Io {
            path: path.clone(),
            source: e,
        })
        .in_stage(Stage::Synth)?;
    let points: usize = seq.scans.iter().map(|s| s.len()).sum();
    println!(
        "wrote {} scans ({points} points) and {}",
        seq.scans.len(),
        path.display()
    );
    Ok(())
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, StageError> {
    let mut cfg = PipelineConfig::load(&cli.config).in_stage(Stage::Config)?;
    if let Some(w) = cli.workers {
        cfg.run.workers = w;
    }
    if let Some(s) = cli.seed_override {
        cfg.override_seed(s);
    }
    if let Some(e) = cli.estimator {
        cfg.voting.estimator = e;
    }
    Ok(cfg)
}

fn execute(cli: &Cli) -> Result<(), StageError> {
    if let Command::Synth { out } = &cli.command {
        return synth(out, cli.seed_override.unwrap_or(0));
    }
    let cfg = load_config(cli)?;
    let estimator = cfg.voting.estimator;
    let mut ws = Workspace::new(cfg, cli.force)?;
    let result = match &cli.command {
        Command::Synth { .. } => unreachable!(),
        Command::Align => ws.align().map(|(cloud, _)| {
            println!("aligned cloud: {} points", cloud.len());
        }),
        Command::Render => ws.render().map(|_| {
            println!("views: {}", ws.views_dir().display());
        }),
        Command::Segment => ws.segment().map(|(table, _)| {
            let voted = table.vote_count.iter().filter(|&&c| c > 0).count();
            println!("vote table: {voted}/{} points voted", table.num_points());
        }),
        Command::Vote => ws.vote(estimator).map(|a| {
            println!("labels: {}", a.labels_path.display());
            println!("coverage: {:.4}", a.summary.coverage);
        }),
        Command::Eval => ws.eval(estimator).map(|r| {
            println!("miou: {:.4}", r.miou);
            println!("coverage: {:.4}", r.coverage);
        }),
        Command::Run => ws.run().map(|(a, report)| {
            println!("labels: {}", a.labels_path.display());
            match report {
                Some(r) => println!("miou: {:.4}\ncoverage: {:.4}", r.miou, r.coverage),
                None => println!("coverage: {:.4}", a.summary.coverage),
            }
        }),
    };
    for (stage, status) in ws.log() {
        let status = match status {
            StageStatus::Cached => "cached",
            StageStatus::Computed => "computed",
        };
        eprintln!("{stage}: {status}");
    }
    result
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {}", e.stage, e.source);
            let mut cause = std::error::Error::source(&e.source);
            while let Some(c) = cause {
                eprintln!("  caused by: {c}");
                cause = c.source();
            }
            ExitCode::FAILURE
        }
    }
}
