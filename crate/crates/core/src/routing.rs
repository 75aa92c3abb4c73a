//! Ranking candidate answerers for a new question.
//!
//! Model-based methods score a candidate `α` as `Σ_ω w_ω · (U Tᵀ)_{αω}`,
//! where `w_ω` is the share of the question's tags in topic `ω`. Rankings
//! are strictly descending by score; equal scores are ordered by ascending
//! user id.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, Utc};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activity::{topic_fractions, ActivityMatrix, TopicMap};
use crate::error::{Error, Result};
use crate::factorization::FactorModel;
use crate::ingest::{Corpus, QuestionId, QuestionPost, UserId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Random,
    #[serde(rename = "indegree")]
    InDegree,
    #[serde(rename = "zscore")]
    ZScore,
    Tmf,
    Tcqr,
    Tcteqr,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Random,
        Method::InDegree,
        Method::ZScore,
        Method::Tmf,
        Method::Tcqr,
        Method::Tcteqr,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Random => "random",
            Method::InDegree => "indegree",
            Method::ZScore => "zscore",
            Method::Tmf => "tmf",
            Method::Tcqr => "tcqr",
            Method::Tcteqr => "tcteqr",
        }
    }

    /// Display name used in reports.
    pub fn label(self) -> &'static str {
        match self {
            Method::Random => "Random",
            Method::InDegree => "InDegree",
            Method::ZScore => "Z-score",
            Method::Tmf => "T-MF",
            Method::Tcqr => "TC-QR",
            Method::Tcteqr => "TCTE-QR",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s.chars().filter(|c| c.is_ascii_alphanumeric()).collect::<String>().to_lowercase();
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == key)
            .ok_or_else(|| Error::Config(format!("unknown method `{s}`")))
    }
}

/// A question to be routed: its tags and posting time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewQuestion {
    pub id: QuestionId,
    pub tags: Vec<String>,
    pub timestamp: DateTime<Utc>,
}

impl NewQuestion {
    pub fn new(id: QuestionId, tags: Vec<String>, timestamp: DateTime<Utc>) -> Result<Self> {
        if tags.is_empty() {
            return Err(Error::InvalidInput(format!("question {id} has no tags")));
        }
        Ok(NewQuestion { id, tags, timestamp })
    }
}

impl From<&QuestionPost> for NewQuestion {
    fn from(q: &QuestionPost) -> Self {
        NewQuestion {
            id: q.id,
            tags: q.tags.clone(),
            timestamp: q.created_at,
        }
    }
}

/// Which tags count in the denominator of the topic weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Denominator {
    /// Only tags known to the topic map; weights sum to 1.
    #[default]
    Mappable,
    /// Every tag of the question; weights may sum to less than 1.
    AllTags,
}

/// Per-topic weights of a question, sorted by topic.
pub fn topic_weights(q: &NewQuestion, topics: &TopicMap, denominator: Denominator) -> Result<Vec<(usize, f64)>> {
    let mut w = topic_fractions(&q.tags, topics)?;
    if denominator == Denominator::AllTags {
        let mapped = q.tags.iter().filter(|t| topics.topic_of(t).is_some()).count() as f64;
        let scale = mapped / q.tags.len() as f64;
        for (_, x) in &mut w {
            *x *= scale;
        }
    }
    Ok(w)
}

/// Candidates of one question in ranked order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ranking {
    pub question_id: QuestionId,
    pub method: Method,
    entries: Vec<(UserId, f64)>,
}

impl Ranking {
    /// Sorts `scores` descending, ties by ascending user id. Fails on
    /// duplicate users or non-finite scores.
    pub fn from_scores(question_id: QuestionId, method: Method, mut scores: Vec<(UserId, f64)>) -> Result<Self> {
        if let Some(&(u, s)) = scores.iter().find(|(_, s)| !s.is_finite()) {
            return Err(Error::InvalidInput(format!("score {s} of user {u} is not finite")));
        }
        for (_, s) in &mut scores {
            // fold -0.0 into 0.0 so it ties with 0.0
            *s += 0.0;
        }
        scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        if has_duplicates(&scores) {
            return Err(Error::InvalidInput("ranking lists a user twice".into()));
        }
        Ok(Ranking {
            question_id,
            method,
            entries: scores,
        })
    }

    pub fn entries(&self) -> &[(UserId, f64)] {
        &self.entries
    }

    pub fn users(&self) -> impl Iterator<Item = UserId> + '_ {
        self.entries.iter().map(|&(u, _)| u)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// 1-based position of `user`, if ranked.
    pub fn position(&self, user: UserId) -> Option<usize> {
        self.entries.iter().position(|&(u, _)| u == user).map(|i| i + 1)
    }

    pub fn top(&self, k: usize) -> &[(UserId, f64)] {
        &self.entries[..k.min(self.entries.len())]
    }
}

fn has_duplicates(scores: &[(UserId, f64)]) -> bool {
    let mut seen = BTreeSet::new();
    scores.iter().any(|&(u, _)| !seen.insert(u))
}

/// Ranks `candidates` by a factor model over `topics`. Candidates without a
/// model row score 0.
pub fn rank_by_model(
    q: &NewQuestion,
    model: &FactorModel,
    topics: &TopicMap,
    candidates: &[UserId],
    denominator: Denominator,
    method: Method,
) -> Result<Ranking> {
    if model.num_topics() != topics.num_topics() {
        return Err(Error::PartitionMismatch(format!(
            "model has {} topics, topic map has {}",
            model.num_topics(),
            topics.num_topics()
        )));
    }
    let weights = topic_weights(q, topics, denominator)?;
    let scores = candidates
        .iter()
        .map(|&u| {
            let s = match model.user_row(u) {
                Some(row) => weights
                    .iter()
                    .map(|&(topic, w)| w * model.predict(row, topic).expect("topic ids within model"))
                    .sum(),
                None => 0.0,
            };
            (u, s)
        })
        .collect();
    Ranking::from_scores(q.id, method, scores)
}

/// Topic-community temporal expertise ranking.
pub fn rank_tcteqr(
    q: &NewQuestion,
    model: &FactorModel,
    topics: &TopicMap,
    candidates: &[UserId],
    denominator: Denominator,
) -> Result<Ranking> {
    rank_by_model(q, model, topics, candidates, denominator, Method::Tcteqr)
}

/// Same as [`rank_tcteqr`] for a model trained without temporal discount.
pub fn rank_tcqr(
    q: &NewQuestion,
    model: &FactorModel,
    topics: &TopicMap,
    candidates: &[UserId],
    denominator: Denominator,
) -> Result<Ranking> {
    rank_by_model(q, model, topics, candidates, denominator, Method::Tcqr)
}

/// Tag-level factorization ranking; `tags` maps each tag to its own topic.
pub fn rank_tmf(q: &NewQuestion, tag_model: &FactorModel, tags: &TopicMap, candidates: &[UserId]) -> Result<Ranking> {
    rank_by_model(q, tag_model, tags, candidates, Denominator::Mappable, Method::Tmf)
}

/// Per-user counts from the training corpus used by the authority baselines.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuthorityCounts {
    pub positive_answers: BTreeMap<UserId, usize>,
    pub answers: BTreeMap<UserId, usize>,
    pub questions: BTreeMap<UserId, usize>,
}

impl AuthorityCounts {
    pub fn from_corpus(train: &Corpus) -> Self {
        let mut c = AuthorityCounts::default();
        for a in train.answers() {
            let Some(u) = a.answerer else { continue };
            *c.answers.entry(u).or_insert(0) += 1;
            if a.is_positive() {
                *c.positive_answers.entry(u).or_insert(0) += 1;
            }
        }
        for q in train.questions() {
            if let Some(u) = q.asker {
                *c.questions.entry(u).or_insert(0) += 1;
            }
        }
        c
    }

    fn get(map: &BTreeMap<UserId, usize>, u: UserId) -> usize {
        map.get(&u).copied().unwrap_or(0)
    }

    pub fn indegree(&self, u: UserId) -> f64 {
        Self::get(&self.positive_answers, u) as f64
    }

    /// `(a − q) / √(a + q)`; 0 for users with no activity.
    pub fn zscore(&self, u: UserId) -> f64 {
        let a = Self::get(&self.answers, u) as f64;
        let q = Self::get(&self.questions, u) as f64;
        if a + q == 0.0 {
            0.0
        } else {
            (a - q) / (a + q).sqrt()
        }
    }
}

/// Ranks by the number of positively scored training answers.
pub fn rank_indegree(question_id: QuestionId, candidates: &[UserId], counts: &AuthorityCounts) -> Result<Ranking> {
    let scores = candidates.iter().map(|&u| (u, counts.indegree(u))).collect();
    Ranking::from_scores(question_id, Method::InDegree, scores)
}

/// Ranks by answers-versus-questions z-score.
pub fn rank_zscore(question_id: QuestionId, candidates: &[UserId], counts: &AuthorityCounts) -> Result<Ranking> {
    let scores = candidates.iter().map(|&u| (u, counts.zscore(u))).collect();
    Ranking::from_scores(question_id, Method::ZScore, scores)
}

/// A seeded uniform shuffle; the score is the number of users ranked below
/// plus one.
pub fn rank_random(question_id: QuestionId, candidates: &[UserId], seed: u64) -> Result<Ranking> {
    let mut order = candidates.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len();
    let scores = order.into_iter().enumerate().map(|(i, u)| (u, (n - i) as f64)).collect();
    Ranking::from_scores(question_id, Method::Random, scores)
}

/// The user-tag matrix of positively scored answers, built question by
/// question: each tag of a question gets `1/|mappable tags|` per positive
/// answer. Columns follow `tags` (normally a singleton map).
pub fn user_tag_matrix(train: &Corpus, tags: &TopicMap, users: Option<&BTreeSet<UserId>>) -> Result<ActivityMatrix> {
    let mut triplets = Vec::new();
    for q in train.questions() {
        let cols: Vec<usize> = q.tags.iter().filter_map(|t| tags.topic_of(t)).collect();
        if cols.is_empty() {
            continue;
        }
        let share = 1.0 / cols.len() as f64;
        for a in train.answers_to(q.id) {
            let Some(u) = a.answerer else { continue };
            if !a.is_positive() || users.is_some_and(|s| !s.contains(&u)) {
                continue;
            }
            triplets.extend(cols.iter().map(|&c| (u, c, share)));
        }
    }
    ActivityMatrix::from_triplets(triplets, tags.num_topics())
}

/// Writes `question_id<TAB>rank<TAB>user_id<TAB>score` rows.
pub fn write_rankings_tsv<'a, W: Write>(rankings: impl IntoIterator<Item = &'a Ranking>, mut out: W) -> Result<()> {
    for r in rankings {
        for (i, (u, s)) in r.entries.iter().enumerate() {
            writeln!(out, "{}\t{}\t{}\t{}", r.question_id, i + 1, u, s)?;
        }
    }
    out.flush()?;
    Ok(())
}

/// One JSON object per line.
pub fn write_rankings_jsonl<'a, W: Write>(rankings: impl IntoIterator<Item = &'a Ranking>, mut out: W) -> Result<()> {
    for r in rankings {
        serde_json::to_writer(&mut out, r).map_err(|e| Error::InvalidInput(e.to_string()))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_rankings_jsonl<R: BufRead>(input: R) -> Result<Vec<Ranking>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: Ranking = serde_json::from_str(&line)
            .map_err(|e| Error::corrupt("rankings", format!("line {}: {e}", i + 1)))?;
        out.push(Ranking::from_scores(r.question_id, r.method, r.entries)?);
    }
    Ok(out)
}
