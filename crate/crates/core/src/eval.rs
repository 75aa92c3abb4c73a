//! Ranking metrics, paired significance tests and the experiment pipeline.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::activity::{density, temporal_matrix, ActivityMatrix, ActivityStats, DiscountKernel, KernelKind, TopicMap, Window};
use crate::communities::{greedy_modularity, louvain, Algorithm, Partition};
use crate::error::{Error, Result};
use crate::factorization::{factorize, FactorModel, TrainConfig};
use crate::ingest::{split, Corpus, QuestionId, QuestionPost, Split, SplitSpec, UserId};
use crate::routing::{
    rank_by_model, rank_indegree, rank_random, rank_zscore, AuthorityCounts, Denominator, Method, NewQuestion, Ranking,
};
use crate::seeds::derive_seed;
use crate::tag_graph::{build_tag_graph, TagGraph};
use crate::Exec;

pub const REPORT_SCHEMA_VERSION: u32 = 1;
/// Significance threshold for paired tests.
pub const SIGNIFICANCE: f64 = 0.01;
/// Fewest non-zero differences accepted by [`wilcoxon_paired`].
pub const MIN_PAIRS: usize = 10;
/// Largest sample size tested with the exact null distribution.
pub const EXACT_MAX: usize = 25;

/// 1-based position of the true answerer in each ranking; `None` when the
/// answerer is unknown or not ranked.
pub fn positions(rankings: &[Ranking], truth: &BTreeMap<QuestionId, UserId>) -> Vec<Option<usize>> {
    rankings
        .iter()
        .map(|r| truth.get(&r.question_id).and_then(|&u| r.position(u)))
        .collect()
}

pub fn reciprocal_rank(position: Option<usize>) -> f64 {
    position.map_or(0.0, |p| 1.0 / p as f64)
}

pub fn mrr_from_positions(pos: &[Option<usize>]) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::InvalidInput("no test questions to evaluate".into()));
    }
    Ok(pos.iter().map(|&p| reciprocal_rank(p)).sum::<f64>() / pos.len() as f64)
}

pub fn precision_from_positions(pos: &[Option<usize>], r: usize) -> Result<f64> {
    if pos.is_empty() {
        return Err(Error::InvalidInput("no test questions to evaluate".into()));
    }
    Ok(pos.iter().filter(|p| p.is_some_and(|p| p <= r)).count() as f64 / pos.len() as f64)
}

/// Mean reciprocal rank of the true answerer. Questions whose answerer is
/// missing from `truth` or from the ranking contribute 0.
pub fn mrr(rankings: &[Ranking], truth: &BTreeMap<QuestionId, UserId>) -> Result<f64> {
    mrr_from_positions(&positions(rankings, truth))
}

/// Fraction of questions whose true answerer is within the top `r`.
pub fn precision_at(rankings: &[Ranking], truth: &BTreeMap<QuestionId, UserId>, r: usize) -> Result<f64> {
    precision_from_positions(&positions(rankings, truth), r)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Non-zero differences.
    pub n: usize,
    pub w_plus: f64,
    pub w_minus: f64,
    /// `min(w_plus, w_minus)`.
    pub statistic: f64,
    /// Two-sided.
    pub p_value: f64,
    pub exact: bool,
}

impl WilcoxonResult {
    fn no_difference() -> Self {
        WilcoxonResult {
            n: 0,
            w_plus: 0.0,
            w_minus: 0.0,
            statistic: 0.0,
            p_value: 1.0,
            exact: true,
        }
    }
}

/// Ranks of `|d|` doubled so that tied averages stay integral, plus the
/// tie group sizes.
fn doubled_ranks(d: &[f64]) -> (Vec<u64>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..d.len()).collect();
    idx.sort_by(|&a, &b| d[a].abs().total_cmp(&d[b].abs()));
    let mut ranks = vec![0u64; d.len()];
    let mut ties = Vec::new();
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && d[idx[j + 1]].abs() == d[idx[i]].abs() {
            j += 1;
        }
        // positions i+1 ..= j+1 share the average rank (i+j+2)/2
        for &k in &idx[i..=j] {
            ranks[k] = (i + j + 2) as u64;
        }
        ties.push(j - i + 1);
        i = j + 1;
    }
    (ranks, ties)
}

fn nonzero_differences(x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if x.len() != y.len() {
        return Err(Error::InvalidInput(format!("paired samples differ in length ({} vs {})", x.len(), y.len())));
    }
    let d: Vec<f64> = x.iter().zip(y).map(|(a, b)| a - b).filter(|d| *d != 0.0).collect();
    if d.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("paired samples contain non-finite values".into()));
    }
    Ok(d)
}

/// Exact two-sided signed-rank test on non-zero differences `d`, using the
/// permutation distribution of the (tie-averaged) ranks.
pub fn wilcoxon_exact(d: &[f64]) -> Result<WilcoxonResult> {
    if d.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("differences must be non-zero and finite".into()));
    }
    if d.is_empty() {
        return Ok(WilcoxonResult::no_difference());
    }
    if d.len() > 60 {
        return Err(Error::InvalidInput("exact test supports at most 60 differences".into()));
    }
    let (ranks, _) = doubled_ranks(d);
    let total: u64 = ranks.iter().sum();
    let w2: u64 = ranks.iter().zip(d).filter(|(_, &v)| v > 0.0).map(|(r, _)| r).sum();
    let mut counts = vec![0.0f64; total as usize + 1];
    counts[0] = 1.0;
    let mut reach = 0usize;
    for &r in &ranks {
        let r = r as usize;
        for s in (0..=reach).rev() {
            if counts[s] != 0.0 {
                counts[s + r] += counts[s];
            }
        }
        reach += r;
    }
    let all = 2f64.powi(d.len() as i32);
    let lower: f64 = counts[..=w2 as usize].iter().sum::<f64>() / all;
    let upper: f64 = counts[w2 as usize..].iter().sum::<f64>() / all;
    let w_plus = w2 as f64 / 2.0;
    let w_minus = (total - w2) as f64 / 2.0;
    Ok(WilcoxonResult {
        n: d.len(),
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value: (2.0 * lower.min(upper)).min(1.0),
        exact: true,
    })
}

/// Normal approximation with tie correction and a continuity correction of
/// one half.
pub fn wilcoxon_normal(d: &[f64]) -> Result<WilcoxonResult> {
    if d.iter().any(|&v| v == 0.0 || !v.is_finite()) {
        return Err(Error::InvalidInput("differences must be non-zero and finite".into()));
    }
    if d.is_empty() {
        return Ok(WilcoxonResult::no_difference());
    }
    let n = d.len() as f64;
    let (ranks, ties) = doubled_ranks(d);
    let w_plus = ranks.iter().zip(d).filter(|(_, &v)| v > 0.0).map(|(&r, _)| r as f64).sum::<f64>() / 2.0;
    let w_minus = n * (n + 1.0) / 2.0 - w_plus;
    let mean = n * (n + 1.0) / 4.0;
    let tie_term: f64 = ties.iter().map(|&t| (t * t * t - t) as f64).sum::<f64>() / 48.0;
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term;
    let z = ((w_plus - mean).abs() - 0.5).max(0.0) / var.sqrt();
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(WilcoxonResult {
        n: d.len(),
        w_plus,
        w_minus,
        statistic: w_plus.min(w_minus),
        p_value: (2.0 * std_normal.sf(z)).min(1.0),
        exact: false,
    })
}

/// Two-sided paired Wilcoxon signed-rank test of `x` against `y`. Zero
/// differences are dropped; exact for up to [`EXACT_MAX`] remaining pairs,
/// normal approximation above.
pub fn wilcoxon_paired(x: &[f64], y: &[f64]) -> Result<WilcoxonResult> {
    let d = nonzero_differences(x, y)?;
    if d.is_empty() {
        return Ok(WilcoxonResult::no_difference());
    }
    if d.len() < MIN_PAIRS {
        return Err(Error::InvalidInput(format!(
            "only {} non-zero difference(s); the test needs at least {MIN_PAIRS}",
            d.len()
        )));
    }
    if d.len() <= EXACT_MAX {
        wilcoxon_exact(&d)
    } else {
        wilcoxon_normal(&d)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    /// Reciprocal ranks of the same question.
    PerQuestion,
    /// MRR of the same split.
    PerSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairedTestResult {
    pub a: Method,
    pub b: Method,
    pub pairing: Pairing,
    pub pairs: usize,
    pub mean_a: f64,
    pub mean_b: f64,
    /// `None` when the test could not be run (see `note`).
    pub test: Option<WilcoxonResult>,
    pub threshold: f64,
    pub significant: bool,
    pub note: Option<String>,
}

pub fn paired_test(a: Method, b: Method, pairing: Pairing, x: &[f64], y: &[f64]) -> Result<PairedTestResult> {
    let mean = |v: &[f64]| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
    let (test, note) = match wilcoxon_paired(x, y) {
        Ok(t) => (Some(t), None),
        Err(Error::InvalidInput(msg)) if x.len() == y.len() => (None, Some(msg)),
        Err(e) => return Err(e),
    };
    Ok(PairedTestResult {
        a,
        b,
        pairing,
        pairs: x.len(),
        mean_a: mean(x),
        mean_b: mean(y),
        significant: test.as_ref().is_some_and(|t| t.p_value < SIGNIFICANCE),
        test,
        threshold: SIGNIFICANCE,
        note,
    })
}

/// Everything that determines an experiment's output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub splits: Vec<SplitSpec>,
    pub methods: Vec<Method>,
    /// Minimum co-occurrence count for a tag graph edge.
    pub n_q: u64,
    pub window: Window,
    pub kernel_offset: u32,
    pub algorithm: Algorithm,
    pub weighted: bool,
    pub train: TrainConfig,
    pub seed: u64,
    pub denominator: Denominator,
    /// Drop the asker from the candidates of their own question.
    pub exclude_asker: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            splits: Vec::new(),
            methods: Method::ALL.to_vec(),
            n_q: 5,
            window: Window::Months(1),
            kernel_offset: 0,
            algorithm: Algorithm::Louvain,
            weighted: true,
            train: TrainConfig::default(),
            seed: 0,
            denominator: Denominator::Mappable,
            exclude_asker: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.splits.is_empty() {
            return Err(Error::Config("no splits configured".into()));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.n_q < 1 {
            return Err(Error::Config("n_q must be >= 1".into()));
        }
        for s in &self.splits {
            s.validate()?;
        }
        self.train.validate()
    }

    pub fn kernel(&self, kind: KernelKind) -> DiscountKernel {
        DiscountKernel {
            kind,
            window: self.window,
            offset: self.kernel_offset,
        }
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        fingerprint_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

/// Hex SHA-256 of a JSON value's compact serialization.
pub fn fingerprint_json(v: &serde_json::Value) -> String {
    let bytes = serde_json::to_vec(v).expect("json value serializes");
    format!("{:x}", Sha256::digest(bytes))
}

/// Topic map from community detection on `g`.
pub fn detect_topics(g: &TagGraph, algorithm: Algorithm, weighted: bool, seed: u64) -> Result<(Partition, TopicMap)> {
    let part = match algorithm {
        Algorithm::Louvain => louvain(g, seed, weighted)?,
        Algorithm::GreedyModularity => greedy_modularity(g, weighted)?,
    };
    let topics = TopicMap::from_partition(g, &part)?;
    Ok((part, topics))
}

/// Factorizes `m` with `cfg`, lowering the rank to `min(users, topics)`
/// when the matrix is too small for it.
pub fn train_clamped(m: &ActivityMatrix, cfg: &TrainConfig, seed: u64) -> Result<FactorModel> {
    let rank = cfg.rank.min(m.num_users()).min(m.num_topics());
    if rank < cfg.rank {
        log::warn!("rank lowered from {} to {rank} for a {}x{} matrix", cfg.rank, m.num_users(), m.num_topics());
    }
    factorize(m, &TrainConfig { rank, seed, ..*cfg })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub users: usize,
    pub topics: usize,
    pub nnz: usize,
    pub density: f64,
    pub rank: usize,
    pub train_rmse: f64,
    pub activity: ActivityStats,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SplitDiagnostics {
    pub train_questions: usize,
    pub train_answers: usize,
    pub graph_nodes: usize,
    pub graph_edges: usize,
    pub communities: usize,
    pub modularity: f64,
    pub models: BTreeMap<String, ModelSummary>,
}

/// The trained state needed to rank the test questions of one split.
pub struct SplitModels {
    pub graph: TagGraph,
    pub partition: Partition,
    pub topics: TopicMap,
    pub tag_topics: TopicMap,
    pub candidates: Vec<UserId>,
    pub counts: AuthorityCounts,
    pub models: BTreeMap<Method, FactorModel>,
    pub random_seed: u64,
    pub denominator: Denominator,
    pub exclude_asker: bool,
    pub diagnostics: SplitDiagnostics,
}

fn model_methods(methods: &[Method]) -> BTreeSet<Method> {
    methods
        .iter()
        .copied()
        .filter(|m| matches!(m, Method::Tmf | Method::Tcqr | Method::Tcteqr))
        .collect()
}

/// The activity matrix each factorized method in `cfg` trains on: the
/// discounted user-topic matrix for TCTE-QR, the undiscounted one for TC-QR
/// and the user-tag matrix for T-MF. Rows are restricted to candidates.
pub fn method_matrices(
    s: &Split,
    cfg: &ExperimentConfig,
    topics: &TopicMap,
    tag_topics: &TopicMap,
    exec: Exec,
) -> BTreeMap<Method, (ActivityMatrix, ActivityStats)> {
    model_methods(&cfg.methods)
        .into_iter()
        .map(|method| {
            let (map, kind) = match method {
                Method::Tcteqr => (topics, KernelKind::Hyperbolic),
                Method::Tcqr => (topics, KernelKind::None),
                _ => (tag_topics, KernelKind::None),
            };
            let m = temporal_matrix(&s.train, map, cfg.kernel(kind), s.spec.train_end, Some(&s.candidates), exec);
            (method, m)
        })
        .collect()
}

/// Trains the model of one method with its stage seed.
pub fn train_method(method: Method, m: &ActivityMatrix, cfg: &ExperimentConfig) -> Result<FactorModel> {
    let model = train_clamped(m, &cfg.train, derive_seed(cfg.seed, &format!("train/{method}")))?;
    log::info!(
        "{}: {}x{} matrix, {} cells, rmse {:.4}",
        method.label(),
        m.num_users(),
        m.num_topics(),
        m.nnz(),
        model.meta.train_rmse
    );
    Ok(model)
}

pub fn model_summary(m: &ActivityMatrix, stats: ActivityStats, model: &FactorModel) -> ModelSummary {
    ModelSummary {
        users: m.num_users(),
        topics: m.num_topics(),
        nnz: m.nnz(),
        density: density(m),
        rank: model.rank(),
        train_rmse: model.meta.train_rmse,
        activity: stats,
    }
}

/// Builds the tag graph, topics, activity matrices and factor models that
/// the configured methods need.
pub fn build_models(s: &Split, cfg: &ExperimentConfig, exec: Exec) -> Result<SplitModels> {
    let graph = build_tag_graph(&s.train, cfg.n_q, exec)?;
    let (partition, topics) = detect_topics(&graph, cfg.algorithm, cfg.weighted, derive_seed(cfg.seed, "communities"))?;
    let tag_topics = TopicMap::singleton(&graph);
    let mut models = BTreeMap::new();
    let mut summaries = BTreeMap::new();
    for (method, (m, stats)) in method_matrices(s, cfg, &topics, &tag_topics, exec) {
        let model = train_method(method, &m, cfg)?;
        summaries.insert(method.to_string(), model_summary(&m, stats, &model));
        models.insert(method, model);
    }
    SplitModels::assemble(s, cfg, graph, partition, models, summaries)
}

impl SplitModels {
    /// Collects trained state produced stage by stage.
    pub fn assemble(
        s: &Split,
        cfg: &ExperimentConfig,
        graph: TagGraph,
        partition: Partition,
        models: BTreeMap<Method, FactorModel>,
        summaries: BTreeMap<String, ModelSummary>,
    ) -> Result<Self> {
        let topics = TopicMap::from_partition(&graph, &partition)?;
        let tag_topics = TopicMap::singleton(&graph);
        let diagnostics = SplitDiagnostics {
            train_questions: s.train.num_questions(),
            train_answers: s.train.num_answers(),
            graph_nodes: graph.num_nodes(),
            graph_edges: graph.num_edges(),
            communities: partition.num_communities(),
            modularity: partition.modularity,
            models: summaries,
        };
        Ok(SplitModels {
            graph,
            partition,
            topics,
            tag_topics,
            candidates: s.candidates.iter().copied().collect(),
            counts: AuthorityCounts::from_corpus(&s.train),
            models,
            random_seed: derive_seed(cfg.seed, "random"),
            denominator: cfg.denominator,
            exclude_asker: cfg.exclude_asker,
            diagnostics,
        })
    }

    /// True when at least one tag of `q` is a node of the tag graph.
    pub fn routable(&self, q: &QuestionPost) -> bool {
        q.tags.iter().any(|t| self.topics.topic_of(t).is_some())
    }

    pub fn rank(&self, method: Method, q: &QuestionPost) -> Result<Ranking> {
        let pool: Vec<UserId>;
        let candidates: &[UserId] = match q.asker {
            Some(a) if self.exclude_asker => {
                pool = self.candidates.iter().copied().filter(|&u| u != a).collect();
                &pool
            }
            _ => &self.candidates,
        };
        let nq = NewQuestion::from(q);
        match method {
            Method::Random => rank_random(q.id, candidates, self.random_seed.wrapping_add(q.id as u64)),
            Method::InDegree => rank_indegree(q.id, candidates, &self.counts),
            Method::ZScore => rank_zscore(q.id, candidates, &self.counts),
            Method::Tmf | Method::Tcqr | Method::Tcteqr => {
                let model = self
                    .models
                    .get(&method)
                    .ok_or_else(|| Error::Config(format!("no model was trained for {method}")))?;
                let (topics, denominator) = if method == Method::Tmf {
                    (&self.tag_topics, Denominator::Mappable)
                } else {
                    (&self.topics, self.denominator)
                };
                rank_by_model(&nq, model, topics, candidates, denominator, method)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MethodMetrics {
    pub method: Method,
    pub mrr: f64,
    pub p_at_5: f64,
    pub p_at_10: f64,
    pub questions: usize,
    /// Reciprocal rank per evaluated question, aligned with
    /// [`MetricsReport::question_ids`].
    pub reciprocal_ranks: Vec<f64>,
}

impl MethodMetrics {
    pub fn from_positions(method: Method, pos: &[Option<usize>]) -> Result<Self> {
        Ok(MethodMetrics {
            method,
            mrr: mrr_from_positions(pos)?,
            p_at_5: precision_from_positions(pos, 5)?,
            p_at_10: precision_from_positions(pos, 10)?,
            questions: pos.len(),
            reciprocal_ranks: pos.iter().map(|&p| reciprocal_rank(p)).collect(),
        })
    }
}

/// Metrics of every method on one split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub split: String,
    pub fingerprint: String,
    pub candidates: usize,
    pub test_questions: usize,
    /// Evaluated questions whose true answerer is not a candidate (scored 0).
    pub unreachable: usize,
    /// Test questions with no tag in the graph (not evaluated).
    pub unroutable: usize,
    pub question_ids: Vec<QuestionId>,
    pub methods: Vec<MethodMetrics>,
    pub diagnostics: SplitDiagnostics,
}

impl MetricsReport {
    pub fn method(&self, m: Method) -> Option<&MethodMetrics> {
        self.methods.iter().find(|x| x.method == m)
    }
}

/// Bookkeeping of a ranked split, stored next to its rankings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub split: String,
    pub candidates: usize,
    pub test_questions: usize,
    pub unreachable: usize,
    pub unroutable: usize,
    /// Routable test questions, in evaluation order.
    pub question_ids: Vec<QuestionId>,
    pub diagnostics: SplitDiagnostics,
}

type TestQuestion<'a> = (&'a QuestionPost, Option<UserId>);

fn routable_tests<'a>(s: &'a Split, models: &SplitModels) -> (RankSummary, Vec<TestQuestion<'a>>) {
    let tests: Vec<TestQuestion<'a>> = s.test_questions().collect();
    let total = tests.len();
    let routable: Vec<TestQuestion<'a>> = tests.into_iter().filter(|(q, _)| models.routable(q)).collect();
    let summary = RankSummary {
        split: s.spec.label(),
        candidates: models.candidates.len(),
        test_questions: total,
        unreachable: routable.iter().filter(|(q, _)| s.unreachable.contains(&q.id)).count(),
        unroutable: total - routable.len(),
        question_ids: routable.iter().map(|(q, _)| q.id).collect(),
        diagnostics: models.diagnostics.clone(),
    };
    (summary, routable)
}

fn report_from_positions(
    summary: RankSummary,
    cfg: &ExperimentConfig,
    per_question: &[Vec<Option<usize>>],
) -> Result<MetricsReport> {
    let methods = cfg
        .methods
        .iter()
        .enumerate()
        .map(|(i, &m)| {
            let pos: Vec<Option<usize>> = per_question.iter().map(|row| row[i]).collect();
            MethodMetrics::from_positions(m, &pos)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        split: summary.split,
        fingerprint: cfg.fingerprint(),
        candidates: summary.candidates,
        test_questions: summary.test_questions,
        unreachable: summary.unreachable,
        unroutable: summary.unroutable,
        question_ids: summary.question_ids,
        methods,
        diagnostics: summary.diagnostics,
    })
}

/// Ranks every routable test question with every configured method and
/// scores the rankings without keeping them.
pub fn evaluate_split(s: &Split, models: &SplitModels, cfg: &ExperimentConfig, exec: Exec) -> Result<MetricsReport> {
    let (summary, routable) = routable_tests(s, models);
    let per_question = exec.try_map(&routable, |(q, truth)| -> Result<Vec<Option<usize>>> {
        cfg.methods
            .iter()
            .map(|&m| {
                let r = models.rank(m, q)?;
                Ok(truth.and_then(|u| r.position(u)))
            })
            .collect()
    })?;
    report_from_positions(summary, cfg, &per_question)
}

/// Ranks every routable test question with every configured method.
/// Rankings are question-major, methods in configuration order.
pub fn rank_split(s: &Split, models: &SplitModels, cfg: &ExperimentConfig, exec: Exec) -> Result<(RankSummary, Vec<Ranking>)> {
    let (summary, routable) = routable_tests(s, models);
    let nested = exec.try_map(&routable, |(q, _)| -> Result<Vec<Ranking>> {
        cfg.methods.iter().map(|&m| models.rank(m, q)).collect()
    })?;
    Ok((summary, nested.into_iter().flatten().collect()))
}

/// Scores stored rankings against `truth`. Every question of `summary`
/// needs a ranking from every configured method.
pub fn score_rankings(
    summary: RankSummary,
    cfg: &ExperimentConfig,
    truth: &BTreeMap<QuestionId, UserId>,
    rankings: &[Ranking],
) -> Result<MetricsReport> {
    let index: BTreeMap<(QuestionId, Method), &Ranking> =
        rankings.iter().map(|r| ((r.question_id, r.method), r)).collect();
    let per_question = summary
        .question_ids
        .iter()
        .map(|qid| {
            cfg.methods
                .iter()
                .map(|&m| {
                    let r = index
                        .get(&(*qid, m))
                        .ok_or_else(|| Error::InvalidInput(format!("no {m} ranking for question {qid}")))?;
                    Ok(truth.get(qid).and_then(|&u| r.position(u)))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_positions(summary, cfg, &per_question)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub fingerprint: String,
    pub config: ExperimentConfig,
    pub splits: Vec<MetricsReport>,
    pub per_question_tests: Vec<PairedTestResult>,
    pub per_split_tests: Vec<PairedTestResult>,
}

impl ExperimentReport {
    /// Mean MRR of a method across splits.
    pub fn mean_mrr(&self, m: Method) -> Option<f64> {
        let v: Vec<f64> = self.splits.iter().filter_map(|s| s.method(m)).map(|x| x.mrr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Paired tests between every pair of configured methods (in list order),
/// both per question (pooled over splits) and per split.
pub fn paired_tests(methods: &[Method], splits: &[MetricsReport]) -> Result<(Vec<PairedTestResult>, Vec<PairedTestResult>)> {
    let mut per_q = Vec::new();
    let mut per_s = Vec::new();
    for i in 0..methods.len() {
        for j in i + 1..methods.len() {
            let (a, b) = (methods[i], methods[j]);
            let pooled = |k: usize| -> Vec<f64> {
                splits.iter().flat_map(|s| s.methods[k].reciprocal_ranks.iter().copied()).collect()
            };
            per_q.push(paired_test(a, b, Pairing::PerQuestion, &pooled(i), &pooled(j))?);
            let mrr = |k: usize| -> Vec<f64> { splits.iter().map(|s| s.methods[k].mrr).collect() };
            per_s.push(paired_test(a, b, Pairing::PerSplit, &mrr(i), &mrr(j))?);
        }
    }
    Ok((per_q, per_s))
}

/// Runs every configured split in order. `on_split` sees each report as
/// soon as it is complete, so callers can persist partial results.
pub fn run_experiment(
    corpus: &Corpus,
    cfg: &ExperimentConfig,
    exec: Exec,
    mut on_split: impl FnMut(&MetricsReport) -> Result<()>,
) -> Result<ExperimentReport> {
    cfg.validate()?;
    let mut reports = Vec::with_capacity(cfg.splits.len());
    for spec in &cfg.splits {
        let s = split(corpus, spec)?;
        log::info!(
            "split {}: {} train questions, {} test questions, {} candidates",
            spec.label(),
            s.train.num_questions(),
            s.test.num_questions(),
            s.candidates.len()
        );
        let models = build_models(&s, cfg, exec)?;
        let report = evaluate_split(&s, &models, cfg, exec)?;
        on_split(&report)?;
        reports.push(report);
    }
    assemble_report(cfg, reports)
}

/// Adds the paired tests to per-split reports.
pub fn assemble_report(cfg: &ExperimentConfig, splits: Vec<MetricsReport>) -> Result<ExperimentReport> {
    let (per_question_tests, per_split_tests) = paired_tests(&cfg.methods, &splits)?;
    Ok(ExperimentReport {
        schema_version: REPORT_SCHEMA_VERSION,
        fingerprint: cfg.fingerprint(),
        config: cfg.clone(),
        splits,
        per_question_tests,
        per_split_tests,
    })
}

/// Aligned-column text rendering of a report.
pub fn format_report(r: &ExperimentReport) -> String {
    let mut out = String::new();
    for s in &r.splits {
        let _ = writeln!(
            out,
            "split {}  candidates {}  test questions {}  unreachable {}  unroutable {}",
            s.split, s.candidates, s.test_questions, s.unreachable, s.unroutable
        );
        let _ = writeln!(out, "  {:<10} {:>8} {:>8} {:>8}", "method", "MRR", "P@5", "P@10");
        for m in &s.methods {
            let _ = writeln!(
                out,
                "  {:<10} {:>8.4} {:>8.4} {:>8.4}",
                m.method.label(),
                m.mrr,
                m.p_at_5,
                m.p_at_10
            );
        }
    }
    let _ = writeln!(out, "paired Wilcoxon tests (p < {SIGNIFICANCE})");
    for t in r.per_question_tests.iter().chain(&r.per_split_tests) {
        let level = match t.pairing {
            Pairing::PerQuestion => "question",
            Pairing::PerSplit => "split",
        };
        let detail = match &t.test {
            Some(w) => format!("n={:<6} p={:.3e}{}", w.n, w.p_value, if t.significant { " *" } else { "" }),
            None => format!("not run: {}", t.note.as_deref().unwrap_or("")),
        };
        let _ = writeln!(out, "  {:<8} {:<8} vs {:<8} {}", level, t.a.label(), t.b.label(), detail);
    }
    out
}
