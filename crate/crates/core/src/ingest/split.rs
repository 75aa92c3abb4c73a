use std::collections::BTreeSet;

use chrono::{DateTime, Datelike, Months, TimeZone, Utc};
use serde::{Deserialize, Serialize};

use super::{AnswerPost, Corpus, QuestionId, QuestionPost, UserId};
use crate::error::{Error, Result};

/// Half-open train and test intervals plus the cold-start filter.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train_start: DateTime<Utc>,
    pub train_end: DateTime<Utc>,
    pub test_start: DateTime<Utc>,
    pub test_end: DateTime<Utc>,
    #[serde(default = "default_min_train_answers")]
    pub min_train_answers: usize,
}

fn default_min_train_answers() -> usize {
    5
}

impl SplitSpec {
    pub fn new(
        train_start: DateTime<Utc>,
        train_end: DateTime<Utc>,
        test_start: DateTime<Utc>,
        test_end: DateTime<Utc>,
    ) -> Self {
        SplitSpec {
            train_start,
            train_end,
            test_start,
            test_end,
            min_train_answers: default_min_train_answers(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train_start >= self.train_end {
            return Err(Error::Config("train interval is empty".into()));
        }
        if self.test_start >= self.test_end {
            return Err(Error::Config("test interval is empty".into()));
        }
        if self.train_end > self.test_start {
            return Err(Error::Config("train interval overlaps the test interval".into()));
        }
        Ok(())
    }

    pub fn in_train(&self, t: DateTime<Utc>) -> bool {
        self.train_start <= t && t < self.train_end
    }

    pub fn in_test(&self, t: DateTime<Utc>) -> bool {
        self.test_start <= t && t < self.test_end
    }

    /// Short label like `2019Q1` derived from the test start.
    pub fn label(&self) -> String {
        let t = self.test_start;
        format!("{}Q{}", t.year(), (t.month0() / 3) + 1)
    }
}

/// First instant of a calendar quarter (`quarter` in 1..=4).
pub fn quarter_start(year: i32, quarter: u32) -> DateTime<Utc> {
    assert!((1..=4).contains(&quarter), "quarter must be 1..=4");
    Utc.with_ymd_and_hms(year, (quarter - 1) * 3 + 1, 1, 0, 0, 0)
        .single()
        .expect("valid quarter start")
}

/// Rolling-quarter protocol: `count` test quarters starting at
/// `(year, quarter)`, advancing `step` quarters each time, each trained on
/// the `train_months` immediately preceding it.
pub fn rolling_quarters(
    year: i32,
    quarter: u32,
    count: usize,
    step: u32,
    train_months: u32,
) -> Vec<SplitSpec> {
    let first = quarter_start(year, quarter);
    (0..count)
        .map(|i| {
            let test_start = first + Months::new(3 * step * i as u32);
            let test_end = test_start + Months::new(3);
            let train_start = test_start - Months::new(train_months);
            SplitSpec::new(train_start, test_start, test_start, test_end)
        })
        .collect()
}

/// A train/test split with its candidate pool.
#[derive(Clone, Debug)]
pub struct Split {
    pub spec: SplitSpec,
    pub train: Corpus,
    /// Test questions (each with an accepted answer) and all their answers.
    pub test: Corpus,
    /// Users with at least `min_train_answers` answers in train.
    pub candidates: BTreeSet<UserId>,
    /// Test questions whose accepted answerer is not a candidate.
    pub unreachable: BTreeSet<QuestionId>,
}

impl Split {
    /// Test questions paired with their ground-truth answerer.
    pub fn test_questions(&self) -> impl Iterator<Item = (&QuestionPost, Option<UserId>)> {
        self.test
            .questions()
            .map(|q| (q, self.test.accepted_answerer(q.id)))
    }
}

/// Splits `corpus` by time.
///
/// Train keeps questions created in the train interval and those of their
/// answers also created in it. Test keeps questions created in the test
/// interval that have an accepted answer.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<Split> {
    spec.validate()?;
    let train_q: Vec<QuestionPost> = corpus
        .questions()
        .filter(|q| spec.in_train(q.created_at))
        .map(|q| {
            let mut q = q.clone();
            // Acceptance of an answer outside the window cannot be referenced.
            if let Some(acc) = q.accepted_answer {
                if !corpus.answer(acc).is_some_and(|a| spec.in_train(a.created_at)) {
                    q.accepted_answer = None;
                }
            }
            q
        })
        .collect();
    let train_ids: BTreeSet<QuestionId> = train_q.iter().map(|q| q.id).collect();
    let train_a: Vec<AnswerPost> = corpus
        .answers()
        .filter(|a| spec.in_train(a.created_at) && train_ids.contains(&a.parent))
        .cloned()
        .collect();
    let train = Corpus::new(train_q, train_a, corpus.tags().clone())?;

    let test_q: Vec<QuestionPost> = corpus
        .questions()
        .filter(|q| spec.in_test(q.created_at) && q.accepted_answer.is_some())
        .cloned()
        .collect();
    let test_ids: BTreeSet<QuestionId> = test_q.iter().map(|q| q.id).collect();
    let test_a: Vec<AnswerPost> = test_ids
        .iter()
        .flat_map(|&id| corpus.answers_to(id).cloned())
        .collect();
    let test = Corpus::new(test_q, test_a, corpus.tags().clone())?;

    let candidates: BTreeSet<UserId> = train
        .answer_counts()
        .into_iter()
        .filter(|&(_, n)| n >= spec.min_train_answers)
        .map(|(u, _)| u)
        .collect();
    if candidates.is_empty() {
        return Err(Error::NoCandidates {
            min_answers: spec.min_train_answers,
        });
    }
    let unreachable = test
        .questions()
        .filter(|q| {
            test.accepted_answerer(q.id)
                .map_or(true, |u| !candidates.contains(&u))
        })
        .map(|q| q.id)
        .collect();
    Ok(Split {
        spec: spec.clone(),
        train,
        test,
        candidates,
        unreachable,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::test_util::*;

    fn spec() -> SplitSpec {
        SplitSpec::new(ts(2018, 1, 1), ts(2019, 1, 1), ts(2019, 1, 1), ts(2019, 4, 1))
    }

    /// Users 1, 2, 3 give 5, 5 and 2 training answers; one test question is
    /// accepted from user 3, one from user 1, and one has no acceptance.
    fn fixture() -> Corpus {
        let mut qs = Vec::new();
        let mut ans = Vec::new();
        let mut next = 1000;
        for (user, n) in [(1, 5), (2, 5), (3, 2)] {
            for _ in 0..n {
                next += 2;
                qs.push(question(next, 99, ts(2018, 3, 1), &["a"]));
                ans.push(answer(next + 1, next, user, ts(2018, 3, 2), 1));
            }
        }
        let mut t1 = question(1, 99, ts(2019, 2, 1), &["a"]);
        t1.accepted_answer = Some(2);
        ans.push(answer(2, 1, 3, ts(2019, 2, 2), 1));
        let mut t2 = question(3, 99, ts(2019, 2, 1), &["a"]);
        t2.accepted_answer = Some(4);
        ans.push(answer(4, 3, 1, ts(2019, 2, 2), 1));
        let t3 = question(5, 99, ts(2019, 2, 1), &["a"]);
        qs.extend([t1, t2, t3]);
        Corpus::new(qs, ans, []).unwrap()
    }

    #[test]
    fn candidates_and_test_filter() {
        let s = split(&fixture(), &spec()).unwrap();
        assert_eq!(s.candidates, BTreeSet::from([1, 2]));
        assert_eq!(s.test.num_questions(), 2);
        assert!(s.test.question(5).is_none());
        assert_eq!(s.unreachable, BTreeSet::from([1]));
        assert_eq!(s.train.num_answers(), 12);
        for (q, truth) in s.test_questions() {
            assert!(q.accepted_answer.is_some());
            assert!(truth.is_some());
        }
    }

    #[test]
    fn four_answers_is_not_enough() {
        let mut sp = spec();
        sp.min_train_answers = 6;
        assert!(matches!(
            split(&fixture(), &sp),
            Err(Error::NoCandidates { min_answers: 6 })
        ));
    }

    #[test]
    fn invalid_specs() {
        let mut sp = spec();
        sp.train_end = ts(2019, 2, 1);
        assert!(split(&fixture(), &sp).is_err());
        let mut sp = spec();
        sp.test_end = sp.test_start;
        assert!(sp.validate().is_err());
    }

    #[test]
    fn rolling_quarter_protocol() {
        let specs = rolling_quarters(2015, 3, 10, 2, 24);
        assert_eq!(specs.len(), 10);
        assert_eq!(specs[0].label(), "2015Q3");
        assert_eq!(specs[9].label(), "2020Q1");
        let q1_2018 = specs.iter().find(|s| s.label() == "2018Q1").unwrap();
        assert_eq!(q1_2018.train_start, quarter_start(2016, 1));
        assert_eq!(q1_2018.train_end, quarter_start(2018, 1));
        assert!(specs.iter().all(|s| s.validate().is_ok()));
    }
}
