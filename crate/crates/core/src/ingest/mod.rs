//! Corpus ingestion: StackExchange dump parsing, validation, train/test
//! splitting and a versioned binary cache.

mod cache;
mod dump;
mod split;

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use cache::{cache_read, cache_write, read_cache_from, write_cache_to, CACHE_VERSION};
pub use dump::{parse_dump, parse_timestamp, write_dump, ParseSummary};
pub use split::{quarter_start, rolling_quarters, split, Split, SplitSpec};

pub type UserId = i64;
pub type QuestionId = i64;
pub type AnswerId = i64;

/// Maximum number of tags StackExchange allows on a question.
pub const MAX_TAGS: usize = 5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuestionPost {
    pub id: QuestionId,
    /// Absent for deleted or anonymous users.
    pub asker: Option<UserId>,
    pub created_at: DateTime<Utc>,
    pub tags: Vec<String>,
    pub accepted_answer: Option<AnswerId>,
    pub score: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AnswerPost {
    pub id: AnswerId,
    pub parent: QuestionId,
    /// Absent for deleted users; such answers still count for question
    /// statistics but are attributed to nobody.
    pub answerer: Option<UserId>,
    pub created_at: DateTime<Utc>,
    pub score: i64,
}

impl AnswerPost {
    /// Answers with a strictly positive score are the only ones that count
    /// as evidence of expertise.
    pub fn is_positive(&self) -> bool {
        self.score >= 1
    }
}

/// Lowercases and trims a tag name.
pub fn normalize_tag(raw: &str) -> String {
    raw.trim().to_lowercase()
}

/// An immutable, validated collection of questions, answers and tags.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Corpus {
    questions: BTreeMap<QuestionId, QuestionPost>,
    answers: BTreeMap<AnswerId, AnswerPost>,
    tags: BTreeMap<String, Option<DateTime<Utc>>>,
    answers_by_question: BTreeMap<QuestionId, Vec<AnswerId>>,
}

impl Corpus {
    /// Builds a corpus, checking every structural invariant.
    ///
    /// Tags used by questions but missing from `tags` are added with no
    /// creation date.
    pub fn new(
        questions: impl IntoIterator<Item = QuestionPost>,
        answers: impl IntoIterator<Item = AnswerPost>,
        tags: impl IntoIterator<Item = (String, Option<DateTime<Utc>>)>,
    ) -> Result<Self> {
        let mut qmap = BTreeMap::new();
        for q in questions {
            validate_question_tags(&q)?;
            let id = q.id;
            if qmap.insert(id, q).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate question id {id}")));
            }
        }
        let mut amap = BTreeMap::new();
        let mut by_q: BTreeMap<QuestionId, Vec<AnswerId>> = BTreeMap::new();
        for a in answers {
            let parent = qmap.get(&a.parent).ok_or_else(|| {
                Error::InvalidCorpus(format!(
                    "answer {} refers to missing question {}",
                    a.id, a.parent
                ))
            })?;
            if a.created_at < parent.created_at {
                return Err(Error::InvalidCorpus(format!(
                    "answer {} predates its question {}",
                    a.id, a.parent
                )));
            }
            by_q.entry(a.parent).or_default().push(a.id);
            let id = a.id;
            if amap.insert(id, a).is_some() {
                return Err(Error::InvalidCorpus(format!("duplicate answer id {id}")));
            }
        }
        for q in qmap.values() {
            if let Some(acc) = q.accepted_answer {
                match amap.get(&acc) {
                    Some(a) if a.parent == q.id => {}
                    _ => {
                        return Err(Error::InvalidCorpus(format!(
                            "question {} accepts answer {acc} which is not one of its answers",
                            q.id
                        )))
                    }
                }
            }
        }
        let mut tagmap: BTreeMap<String, Option<DateTime<Utc>>> = tags.into_iter().collect();
        for q in qmap.values() {
            for t in &q.tags {
                tagmap.entry(t.clone()).or_insert(None);
            }
        }
        Ok(Corpus {
            questions: qmap,
            answers: amap,
            tags: tagmap,
            answers_by_question: by_q,
        })
    }

    pub fn questions(&self) -> impl ExactSizeIterator<Item = &QuestionPost> + Clone {
        self.questions.values()
    }

    pub fn answers(&self) -> impl ExactSizeIterator<Item = &AnswerPost> + Clone {
        self.answers.values()
    }

    pub fn question(&self, id: QuestionId) -> Option<&QuestionPost> {
        self.questions.get(&id)
    }

    pub fn answer(&self, id: AnswerId) -> Option<&AnswerPost> {
        self.answers.get(&id)
    }

    pub fn answers_to(&self, id: QuestionId) -> impl Iterator<Item = &AnswerPost> {
        self.answers_by_question
            .get(&id)
            .into_iter()
            .flatten()
            .map(|aid| &self.answers[aid])
    }

    pub fn tags(&self) -> &BTreeMap<String, Option<DateTime<Utc>>> {
        &self.tags
    }

    pub fn num_questions(&self) -> usize {
        self.questions.len()
    }

    pub fn num_answers(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.questions.is_empty()
    }

    /// Distinct users with at least one attributed answer.
    pub fn answerers(&self) -> BTreeSet<UserId> {
        self.answers.values().filter_map(|a| a.answerer).collect()
    }

    /// Earliest and latest post timestamps, or `None` for an empty corpus.
    pub fn time_range(&self) -> Option<(DateTime<Utc>, DateTime<Utc>)> {
        let times = self
            .questions
            .values()
            .map(|q| q.created_at)
            .chain(self.answers.values().map(|a| a.created_at));
        let mut range: Option<(DateTime<Utc>, DateTime<Utc>)> = None;
        for t in times {
            range = Some(match range {
                None => (t, t),
                Some((lo, hi)) => (lo.min(t), hi.max(t)),
            });
        }
        range
    }

    /// Number of answers per attributed user.
    pub fn answer_counts(&self) -> BTreeMap<UserId, usize> {
        let mut counts = BTreeMap::new();
        for a in self.answers.values() {
            if let Some(u) = a.answerer {
                *counts.entry(u).or_insert(0) += 1;
            }
        }
        counts
    }

    /// The user who wrote the accepted answer of `id`, if known.
    pub fn accepted_answerer(&self, id: QuestionId) -> Option<UserId> {
        let q = self.questions.get(&id)?;
        self.answers.get(&q.accepted_answer?)?.answerer
    }
}

fn validate_question_tags(q: &QuestionPost) -> Result<()> {
    if q.tags.is_empty() || q.tags.len() > MAX_TAGS {
        return Err(Error::InvalidCorpus(format!(
            "question {} has {} tags (allowed 1..={MAX_TAGS})",
            q.id,
            q.tags.len()
        )));
    }
    let distinct: BTreeSet<&String> = q.tags.iter().collect();
    if distinct.len() != q.tags.len() {
        return Err(Error::InvalidCorpus(format!(
            "question {} repeats a tag",
            q.id
        )));
    }
    Ok(())
}
