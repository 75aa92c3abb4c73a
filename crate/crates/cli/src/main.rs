//! `qroute`: the question-routing pipeline as subcommands.

mod artifacts;
mod config;
mod stages;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use qroute::ingest::write_dump;
use qroute::synth::{planted_corpus, SynthConfig};
use qroute::Exec;

use crate::artifacts::{create, Layout};
use crate::config::{Overrides, PipelineConfig};
use crate::stages::{Ctx, Outcome};

#[derive(Parser)]
#[command(name = "qroute", version, about = "Topic-community temporal expertise question routing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Pipeline configuration (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the file.
    #[arg(short, long)]
    output_dir: Option<PathBuf>,
    /// Master seed; overrides `seed` in the file.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 = all cores, 1 = sequential); overrides `threads`.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the stage summary as JSON on stdout.
    #[arg(long)]
    json: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Parse the dump (or generate the synthetic corpus) into the corpus cache.
    Ingest(Common),
    /// Build the tag co-occurrence graph of every training split.
    Graph(Common),
    /// Detect topic communities on each tag graph.
    Communities(Common),
    /// Accumulate the activity matrices each factorized method needs.
    Activity(Common),
    /// Factorize the activity matrices.
    Train(Common),
    /// Rank the candidates of every routable test question with every method.
    Rank(Common),
    /// Score stored rankings and run the paired significance tests.
    Eval(Common),
    /// Perturbation robustness of the communities, against a rewired null model.
    Robustness(Common),
    /// Run every stage in order.
    RunAll(Common),
    /// Write a synthetic corpus with planted experts as Posts.xml and Tags.xml.
    Synth(SynthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    Default,
    Small,
    ConcentratedTags,
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving Posts.xml and Tags.xml.
    #[arg(short, long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "small")]
    preset: Preset,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn context(c: &Common) -> Result<(Ctx, bool)> {
    let file = PipelineConfig::load(&c.config)?;
    let base = c.config.parent().map(Path::to_path_buf).unwrap_or_default();
    let flags = Overrides {
        seed: c.seed,
        output_dir: c.output_dir.clone(),
        threads: c.threads,
    };
    let cfg = file.resolve(&base, &flags)?;
    let exec = Exec::with_threads(cfg.threads);
    std::fs::create_dir_all(&cfg.output_dir)
        .with_context(|| format!("creating output directory {}", cfg.output_dir.display()))?;
    let layout = Layout::new(cfg.output_dir.clone(), cfg.fingerprint());
    artifacts::write_json(&cfg.output_dir.join("config.resolved.json"), &cfg)?;
    Ok((Ctx { cfg, layout, exec }, c.json))
}

fn emit(outcomes: &[Outcome], json: bool) -> Result<()> {
    if json {
        let value: serde_json::Map<String, serde_json::Value> = outcomes
            .iter()
            .map(|o| (o.stage.name().to_string(), o.summary.clone()))
            .collect();
        println!("{}", serde_json::to_string_pretty(&value)?);
    } else {
        for o in outcomes {
            println!("== {} ==\n{}", o.stage, o.text);
        }
    }
    Ok(())
}

type StageFn = fn(&Ctx) -> Result<Outcome>;

fn run_all(ctx: &Ctx) -> Result<Vec<Outcome>> {
    let mut order: Vec<StageFn> = vec![
        stages::ingest,
        stages::graph,
        stages::communities,
        stages::activity,
        stages::train,
        stages::rank,
        stages::eval,
    ];
    if ctx.cfg.robustness.in_run_all {
        order.push(stages::robustness);
    }
    order.into_iter().map(|f| f(ctx)).collect()
}

fn synth(a: &SynthArgs) -> Result<()> {
    let cfg = match a.preset {
        Preset::Default => SynthConfig { seed: a.seed, ..SynthConfig::default() },
        Preset::Small => SynthConfig::small(a.seed),
        Preset::ConcentratedTags => SynthConfig::concentrated_tags(a.seed),
    };
    let s = planted_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let mut posts = create(&a.out.join("Posts.xml"))?;
    let mut tags = create(&a.out.join("Tags.xml"))?;
    write_dump(&s.corpus, &mut posts, &mut tags)?;
    let spec = cfg.split_spec();
    println!(
        "wrote {} questions and {} answers to {}\nsplit: train {} .. {}, test .. {}",
        s.corpus.num_questions(),
        s.corpus.num_answers(),
        a.out.display(),
        spec.train_start.to_rfc3339(),
        spec.train_end.to_rfc3339(),
        spec.test_end.to_rfc3339()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let (common, stage): (&Common, Option<StageFn>) = match &cli.command {
        Command::Synth(a) => return synth(a),
        Command::RunAll(c) => (c, None),
        Command::Ingest(c) => (c, Some(stages::ingest)),
        Command::Graph(c) => (c, Some(stages::graph)),
        Command::Communities(c) => (c, Some(stages::communities)),
        Command::Activity(c) => (c, Some(stages::activity)),
        Command::Train(c) => (c, Some(stages::train)),
        Command::Rank(c) => (c, Some(stages::rank)),
        Command::Eval(c) => (c, Some(stages::eval)),
        Command::Robustness(c) => (c, Some(stages::robustness)),
    };
    let (ctx, json) = context(common)?;
    let outcomes = match stage {
        Some(f) => vec![f(&ctx)?],
        None => run_all(&ctx)?,
    };
    emit(&outcomes, json)?;
    log::info!("artifacts in {} (fingerprint {})", ctx.layout.root().display(), ctx.layout.fingerprint());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
