//! One function per pipeline stage. Each reads its inputs from the output
//! directory, writes its artifact directory and returns a summary.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use anyhow::{Context, Result};
use qroute::activity::{ActivityMatrix, ActivityStats, TopicMap};
use qroute::communities::{robustness_protocol, Detector, Partition};
use qroute::eval::{
    assemble_report, detect_topics, format_report, method_matrices, model_summary, rank_split, score_rankings,
    train_method, ExperimentReport, ModelSummary, RankSummary, SplitModels,
};
use qroute::factorization::{load_model, save_model};
use qroute::ingest::{cache_read, cache_write, parse_dump, split, Corpus, ParseSummary, Split};
use qroute::routing::{read_rankings_jsonl, write_rankings_jsonl, write_rankings_tsv, Method};
use qroute::seeds::derive_seed;
use qroute::synth::planted_corpus;
use qroute::tag_graph::{build_tag_graph, TagGraph};
use qroute::Exec;
use serde::{Deserialize, Serialize};

use crate::artifacts::{create, open, read_json, write_json, Layout, Stage};
use crate::config::Resolved;

pub struct Ctx {
    pub cfg: Resolved,
    pub layout: Layout,
    pub exec: Exec,
}

/// What a stage reports back: a JSON summary and its text rendering.
pub struct Outcome {
    pub stage: Stage,
    pub summary: serde_json::Value,
    pub text: String,
}

impl Outcome {
    fn new(stage: Stage, summary: &impl Serialize, text: String) -> Result<Self> {
        Ok(Outcome {
            stage,
            summary: serde_json::to_value(summary)?,
            text,
        })
    }
}

const CORPUS: &str = "corpus.qrc";

#[derive(Serialize, Deserialize)]
struct IngestSummary {
    source: String,
    parse: ParseSummary,
}

pub fn ingest(ctx: &Ctx) -> Result<Outcome> {
    let data = &ctx.cfg.data;
    let (corpus, summary) = if let Some(sc) = &data.synth {
        let s = planted_corpus(sc).context("generating synthetic corpus")?;
        let c = s.corpus;
        let parse = ParseSummary {
            questions: c.num_questions(),
            answers: c.num_answers(),
            answerers: c.answerers().len(),
            tags: c.tags().len(),
            first_post: c.time_range().map(|r| r.0),
            last_post: c.time_range().map(|r| r.1),
            ..ParseSummary::default()
        };
        (c, IngestSummary { source: "synth".into(), parse })
    } else {
        let (posts, tags) = (data.posts.as_ref().unwrap(), data.tags.as_ref().unwrap());
        let (c, parse) = parse_dump(open(posts)?, open(tags)?)
            .with_context(|| format!("parsing {} and {}", posts.display(), tags.display()))?;
        (c, IngestSummary { source: "dump".into(), parse })
    };
    let dir = ctx.layout.begin(Stage::Ingest, None)?;
    cache_write(&corpus, dir.join(CORPUS))?;
    ctx.layout.finish(Stage::Ingest, None, &summary)?;
    let text = format!("source                 {}\n{}", summary.source, summary.parse);
    Outcome::new(Stage::Ingest, &summary, text)
}

fn load_corpus(ctx: &Ctx) -> Result<Corpus> {
    ctx.layout.require(Stage::Ingest, None)?;
    Ok(cache_read(ctx.layout.dir(Stage::Ingest, None).join(CORPUS))?)
}

fn splits(ctx: &Ctx, corpus: &Corpus) -> Result<Vec<Split>> {
    ctx.cfg
        .experiment
        .splits
        .iter()
        .map(|spec| split(corpus, spec).with_context(|| format!("split {}", spec.label())))
        .collect()
}

/// Runs `f` for every split and joins the per-split summaries.
fn per_split<T: Serialize>(
    ctx: &Ctx,
    stage: Stage,
    mut f: impl FnMut(usize, &Split) -> Result<(T, String)>,
) -> Result<Outcome> {
    let corpus = load_corpus(ctx)?;
    let mut summaries = Vec::new();
    let mut text = String::new();
    for (i, s) in splits(ctx, &corpus)?.iter().enumerate() {
        let (summary, t) = f(i, s)?;
        let _ = writeln!(text, "[{}]\n{}", s.spec.label(), t.trim_end());
        summaries.push(summary);
    }
    Outcome::new(stage, &summaries, text.trim_end().to_string())
}

const GRAPH: &str = "graph.json";

#[derive(Serialize, Deserialize)]
struct GraphSummary {
    split: String,
    nodes: usize,
    edges: usize,
    total_weight: u64,
}

pub fn graph(ctx: &Ctx) -> Result<Outcome> {
    per_split(ctx, Stage::Graph, |i, s| {
        let g = build_tag_graph(&s.train, ctx.cfg.experiment.n_q, ctx.exec)?;
        let dir = ctx.layout.begin(Stage::Graph, Some(i))?;
        write_json(&dir.join(GRAPH), &g)?;
        let mut w = create(&dir.join("edges.tsv"))?;
        g.write_edge_list(&mut w)?;
        w.flush()?;
        let summary = GraphSummary {
            split: s.spec.label(),
            nodes: g.num_nodes(),
            edges: g.num_edges(),
            total_weight: g.total_weight(),
        };
        ctx.layout.finish(Stage::Graph, Some(i), &summary)?;
        Ok((summary, g.summary()))
    })
}

fn load_graph(ctx: &Ctx, i: usize) -> Result<TagGraph> {
    ctx.layout.require(Stage::Graph, Some(i))?;
    read_json(&ctx.layout.dir(Stage::Graph, Some(i)).join(GRAPH))
}

const PARTITION: &str = "partition.json";

#[derive(Serialize, Deserialize)]
struct CommunitySummary {
    split: String,
    communities: usize,
    modularity: f64,
    largest: usize,
}

pub fn communities(ctx: &Ctx) -> Result<Outcome> {
    let e = &ctx.cfg.experiment;
    per_split(ctx, Stage::Communities, |i, s| {
        let g = load_graph(ctx, i)?;
        let (part, _) = detect_topics(&g, e.algorithm, e.weighted, derive_seed(e.seed, "communities"))?;
        let dir = ctx.layout.begin(Stage::Communities, Some(i))?;
        write_json(&dir.join(PARTITION), &part)?;
        let mut w = create(&dir.join("partition.tsv"))?;
        part.write_tsv(&g, &mut w)?;
        w.flush()?;
        let summary = CommunitySummary {
            split: s.spec.label(),
            communities: part.num_communities(),
            modularity: part.modularity,
            largest: part.sizes().into_iter().max().unwrap_or(0),
        };
        ctx.layout.finish(Stage::Communities, Some(i), &summary)?;
        let text = format!(
            "communities      {}\nmodularity       {:.4}\nlargest          {}",
            summary.communities, summary.modularity, summary.largest
        );
        Ok((summary, text))
    })
}

fn load_partition(ctx: &Ctx, i: usize) -> Result<Partition> {
    ctx.layout.require(Stage::Communities, Some(i))?;
    read_json(&ctx.layout.dir(Stage::Communities, Some(i)).join(PARTITION))
}

fn topic_maps(ctx: &Ctx, i: usize) -> Result<(TagGraph, Partition, TopicMap, TopicMap)> {
    let g = load_graph(ctx, i)?;
    let part = load_partition(ctx, i)?;
    let topics = TopicMap::from_partition(&g, &part)?;
    let tags = TopicMap::singleton(&g);
    Ok((g, part, topics, tags))
}

#[derive(Clone, Serialize, Deserialize)]
struct MatrixSummary {
    users: usize,
    topics: usize,
    nnz: usize,
    density: f64,
    stats: ActivityStats,
}

#[derive(Serialize, Deserialize)]
struct ActivitySummary {
    split: String,
    matrices: BTreeMap<Method, MatrixSummary>,
}

pub fn activity(ctx: &Ctx) -> Result<Outcome> {
    per_split(ctx, Stage::Activity, |i, s| {
        let (_, _, topics, tags) = topic_maps(ctx, i)?;
        let mats = method_matrices(s, &ctx.cfg.experiment, &topics, &tags, ctx.exec);
        let dir = ctx.layout.begin(Stage::Activity, Some(i))?;
        let mut matrices = BTreeMap::new();
        let mut text = String::new();
        for (method, (m, stats)) in &mats {
            write_json(&dir.join(format!("{method}.json")), m)?;
            let mut w = create(&dir.join(format!("{method}.tsv")))?;
            m.write_triplets(&mut w)?;
            w.flush()?;
            let ms = MatrixSummary {
                users: m.num_users(),
                topics: m.num_topics(),
                nnz: m.nnz(),
                density: qroute::activity::density(m),
                stats: *stats,
            };
            let _ = writeln!(
                text,
                "{:<8} {}x{} matrix, {} cells, density {:.4}",
                method.label(),
                ms.users,
                ms.topics,
                ms.nnz,
                ms.density
            );
            matrices.insert(*method, ms);
        }
        let summary = ActivitySummary {
            split: s.spec.label(),
            matrices,
        };
        ctx.layout.finish(Stage::Activity, Some(i), &summary)?;
        Ok((summary, text))
    })
}

#[derive(Serialize, Deserialize)]
struct TrainSummary {
    split: String,
    models: BTreeMap<String, ModelSummary>,
}

pub fn train(ctx: &Ctx) -> Result<Outcome> {
    let e = &ctx.cfg.experiment;
    per_split(ctx, Stage::Train, |i, s| {
        let act: ActivitySummary = ctx.layout.summary(Stage::Activity, Some(i))?;
        let act_dir = ctx.layout.dir(Stage::Activity, Some(i));
        let mut loaded = Vec::new();
        for (method, ms) in &act.matrices {
            let m: ActivityMatrix = read_json(&act_dir.join(format!("{method}.json")))?;
            loaded.push((*method, m, ms.stats));
        }
        let dir = ctx.layout.begin(Stage::Train, Some(i))?;
        let mut models = BTreeMap::new();
        let mut text = String::new();
        for (method, m, stats) in loaded {
            let model = train_method(method, &m, e)?;
            save_model(&model, dir.join(format!("{method}.qrm")))?;
            let sum = model_summary(&m, stats, &model);
            let _ = writeln!(text, "{:<8} rank {}, rmse {:.5}", method.label(), sum.rank, sum.train_rmse);
            models.insert(method.to_string(), sum);
        }
        let summary = TrainSummary {
            split: s.spec.label(),
            models,
        };
        ctx.layout.finish(Stage::Train, Some(i), &summary)?;
        Ok((summary, text))
    })
}

const RANKINGS: &str = "rankings.jsonl";

pub fn rank(ctx: &Ctx) -> Result<Outcome> {
    let e = &ctx.cfg.experiment;
    per_split(ctx, Stage::Rank, |i, s| {
        let (g, part, _, _) = topic_maps(ctx, i)?;
        let trained: TrainSummary = ctx.layout.summary(Stage::Train, Some(i))?;
        let train_dir = ctx.layout.dir(Stage::Train, Some(i));
        let mut models = BTreeMap::new();
        for name in trained.models.keys() {
            let method: Method = name.parse()?;
            models.insert(method, load_model(train_dir.join(format!("{method}.qrm")))?);
        }
        let split_models = SplitModels::assemble(s, e, g, part, models, trained.models)?;
        let (summary, rankings) = rank_split(s, &split_models, e, ctx.exec)?;
        let dir = ctx.layout.begin(Stage::Rank, Some(i))?;
        let mut w = create(&dir.join(RANKINGS))?;
        write_rankings_jsonl(&rankings, &mut w)?;
        let mut w = create(&dir.join("rankings.tsv"))?;
        write_rankings_tsv(&rankings, &mut w)?;
        ctx.layout.finish(Stage::Rank, Some(i), &summary)?;
        let text = format!(
            "candidates       {}\ntest questions   {}\nranked           {}\nunroutable       {}\nunreachable      {}",
            summary.candidates,
            summary.test_questions,
            summary.question_ids.len(),
            summary.unroutable,
            summary.unreachable
        );
        Ok((summary, text))
    })
}

pub fn eval(ctx: &Ctx) -> Result<Outcome> {
    let e = &ctx.cfg.experiment;
    let corpus = load_corpus(ctx)?;
    let mut reports = Vec::new();
    for (i, s) in splits(ctx, &corpus)?.iter().enumerate() {
        let summary: RankSummary = ctx.layout.summary(Stage::Rank, Some(i))?;
        let rankings = read_rankings_jsonl(open(&ctx.layout.dir(Stage::Rank, Some(i)).join(RANKINGS))?)?;
        let truth = s.test_questions().filter_map(|(q, u)| u.map(|u| (q.id, u))).collect();
        reports.push(score_rankings(summary, e, &truth, &rankings).with_context(|| format!("split {}", s.spec.label()))?);
    }
    let report = assemble_report(e, reports)?;
    let dir = ctx.layout.begin(Stage::Eval, None)?;
    write_json(&dir.join("report.json"), &report)?;
    let text = format_report(&report);
    std::fs::write(dir.join("report.txt"), &text)?;
    write_metrics_csv(&report, &mut create(&dir.join("metrics.csv"))?)?;
    let brief: BTreeMap<String, f64> = e
        .methods
        .iter()
        .filter_map(|&m| report.mean_mrr(m).map(|v| (m.to_string(), v)))
        .collect();
    ctx.layout.finish(Stage::Eval, None, &serde_json::json!({ "mean_mrr": brief }))?;
    Outcome::new(Stage::Eval, &report, text.trim_end().to_string())
}

fn write_metrics_csv(r: &ExperimentReport, out: &mut impl Write) -> Result<()> {
    writeln!(out, "split,method,mrr,p_at_5,p_at_10,questions,unreachable,unroutable")?;
    for s in &r.splits {
        for m in &s.methods {
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                s.split, m.method, m.mrr, m.p_at_5, m.p_at_10, m.questions, s.unreachable, s.unroutable
            )?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct RobustnessSummary {
    split: String,
    repeats: usize,
    levels: usize,
    modularity_original: f64,
    modularity_random: f64,
    rewire_swaps: usize,
    rewire_complete: bool,
}

pub fn robustness(ctx: &Ctx) -> Result<Outcome> {
    let e = &ctx.cfg.experiment;
    let rc = &ctx.cfg.robustness;
    let i = rc.split;
    let g = load_graph(ctx, i)?;
    let detector = Detector {
        algorithm: e.algorithm,
        weighted: e.weighted,
        seed: derive_seed(e.seed, "communities"),
    };
    let report = robustness_protocol(&g, &detector, &rc.p_levels, rc.repeats, derive_seed(e.seed, "robustness"), ctx.exec)?;
    let dir = ctx.layout.begin(Stage::Robustness, None)?;
    write_json(&dir.join("report.json"), &report)?;
    let mut w = create(&dir.join("original.csv"))?;
    report.original.write_csv(&mut w)?;
    w.flush()?;
    let mut w = create(&dir.join("random.csv"))?;
    report.random.write_csv(&mut w)?;
    w.flush()?;
    let summary = RobustnessSummary {
        split: e.splits[i].label(),
        repeats: rc.repeats,
        levels: rc.p_levels.len(),
        modularity_original: report.modularity_original,
        modularity_random: report.modularity_random,
        rewire_swaps: report.rewire_swaps,
        rewire_complete: report.rewire_complete,
    };
    ctx.layout.finish(Stage::Robustness, None, &summary)?;
    let mut text = format!(
        "split {}: Q original {:.4}, Q rewired {:.4}\n{:>6}  {:>10}  {:>10}\n",
        summary.split, summary.modularity_original, summary.modularity_random, "p", "VI_org", "VI_random"
    );
    for (k, p) in report.original.p_levels.iter().enumerate() {
        let _ = writeln!(text, "{p:>6.3}  {:>10.4}  {:>10.4}", report.original.vi_mean[k], report.random.vi_mean[k]);
    }
    Outcome::new(Stage::Robustness, &summary, text.trim_end().to_string())
}
