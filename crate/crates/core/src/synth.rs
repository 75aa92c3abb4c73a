//! Synthetic corpora and graphs with planted structure, used by tests,
//! benchmarks and the `synth` CLI command.
//!
//! The planted-expert corpus has `topics` disjoint tag groups. Every topic
//! has a set of experts before the drift point and a different set after
//! it; each expert of the early phase becomes an expert of another topic
//! in the late phase. Early experts are more active than late ones, so
//! undiscounted activity favors them while the accepted answers of recent
//! questions come from the late experts. All users also answer a thin
//! spread of questions across topics.

use std::collections::BTreeSet;

use chrono::{DateTime, Duration, Months, TimeZone, Utc};
use rand::distributions::WeightedIndex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::activity::TopicMap;
use crate::error::{Error, Result};
use crate::ingest::{AnswerPost, Corpus, QuestionPost, SplitSpec, UserId, MAX_TAGS};
use crate::tag_graph::TagGraph;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub topics: usize,
    pub tags_per_topic: usize,
    pub users: usize,
    pub questions: usize,
    /// Experts per topic in each phase.
    pub experts_per_topic: usize,
    pub start: DateTime<Utc>,
    pub train_months: u32,
    pub test_months: u32,
    /// Zipf exponent of tag popularity within a topic.
    pub tag_zipf: f64,
    /// Relative frequency of questions with 1..=5 tags.
    pub tag_count_weights: [f64; MAX_TAGS],
    /// Probability that each early expert answers an early question.
    pub early_expert_rate: f64,
    /// Probability that one late expert answers a late question.
    pub late_expert_rate: f64,
    /// Mean number of background answers per question.
    pub background_answers: f64,
    /// Probability that a question carries one tag from another topic.
    pub cross_topic_tag: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            topics: 50,
            tags_per_topic: 30,
            users: 500,
            questions: 20_000,
            experts_per_topic: 2,
            start: Utc.with_ymd_and_hms(2017, 1, 1, 0, 0, 0).unwrap(),
            train_months: 24,
            test_months: 3,
            tag_zipf: 1.0,
            tag_count_weights: [0.3, 0.4, 0.2, 0.07, 0.03],
            early_expert_rate: 0.8,
            late_expert_rate: 0.7,
            background_answers: 1.2,
            cross_topic_tag: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    /// A 1000-question corpus over 10 topics and 100 users.
    pub fn small(seed: u64) -> Self {
        SynthConfig {
            topics: 10,
            tags_per_topic: 8,
            users: 100,
            questions: 1000,
            seed,
            ..Default::default()
        }
    }

    /// Full-size corpus where almost every question carries a single,
    /// highly popular tag of its topic, so each user touches few distinct
    /// tags per topic.
    pub fn concentrated_tags(seed: u64) -> Self {
        SynthConfig {
            tag_zipf: 4.0,
            tag_count_weights: [0.97, 0.02, 0.007, 0.002, 0.001],
            background_answers: 1.0,
            seed,
            ..Default::default()
        }
    }

    pub fn end(&self) -> DateTime<Utc> {
        self.start + Months::new(self.train_months + self.test_months)
    }

    pub fn split_spec(&self) -> SplitSpec {
        let train_end = self.start + Months::new(self.train_months);
        SplitSpec::new(self.start, train_end, train_end, self.end())
    }

    /// Midpoint of the corpus span, where expertise drifts.
    pub fn drift_point(&self) -> DateTime<Utc> {
        self.start + (self.end() - self.start) / 2
    }

    fn validate(&self) -> Result<()> {
        if self.topics < 2 || self.tags_per_topic == 0 || self.questions == 0 {
            return Err(Error::Config("synthetic corpus needs >= 2 topics, tags and questions".into()));
        }
        if self.users < 2 * self.experts_per_topic.max(1) {
            return Err(Error::Config("too few users for the expert roles".into()));
        }
        for p in [self.early_expert_rate, self.late_expert_rate, self.cross_topic_tag] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("probability {p} outside [0, 1]")));
            }
        }
        if self.train_months == 0 || self.test_months == 0 {
            return Err(Error::Config("train and test spans must be positive".into()));
        }
        Ok(())
    }
}

/// A generated corpus and the structure planted in it.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub corpus: Corpus,
    /// Tag → planted topic.
    pub planted: TopicMap,
    /// Experts of each topic before the drift point.
    pub early_experts: Vec<Vec<UserId>>,
    /// Experts of each topic after the drift point.
    pub late_experts: Vec<Vec<UserId>>,
    pub spec: SplitSpec,
}

pub fn tag_name(topic: usize, k: usize) -> String {
    format!("t{topic:02}-{k:02}")
}

/// Generates the planted-expert corpus described in the module docs.
pub fn planted_corpus(cfg: &SynthConfig) -> Result<SynthCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (t, e) = (cfg.topics, cfg.experts_per_topic);

    // Expert roles: early experts of topic k are users k*e..(k+1)*e; late
    // experts of topic k are the early experts of topic (k + shift) mod t.
    let mut users: Vec<UserId> = (1..=cfg.users as i64).collect();
    users.shuffle(&mut rng);
    let expert_users = (t * e).min(cfg.users);
    let early: Vec<Vec<UserId>> = (0..t)
        .map(|k| (0..e).map(|i| users[(k * e + i) % expert_users]).collect())
        .collect();
    let shift = 1 + rng.gen_range(0..t - 1);
    let late: Vec<Vec<UserId>> = (0..t).map(|k| early[(k + shift) % t].clone()).collect();

    let zipf: Vec<f64> = (1..=cfg.tags_per_topic).map(|r| 1.0 / (r as f64).powf(cfg.tag_zipf)).collect();
    let tag_dist = WeightedIndex::new(&zipf).map_err(|e| Error::Config(e.to_string()))?;
    let tag_counts = WeightedIndex::new(cfg.tag_count_weights).map_err(|e| Error::Config(e.to_string()))?;
    let background = Poisson::new(cfg.background_answers.max(1e-9)).map_err(|e| Error::Config(e.to_string()))?;

    let span = (cfg.end() - cfg.start).num_seconds();
    let mut times: Vec<i64> = (0..cfg.questions).map(|_| rng.gen_range(0..span)).collect();
    times.sort_unstable();
    let drift = cfg.drift_point();

    let mut questions = Vec::with_capacity(cfg.questions);
    let mut answers: Vec<AnswerPost> = Vec::new();
    let mut next_answer: i64 = 1_000_000;
    for (i, &offset) in times.iter().enumerate() {
        let qid = i as i64 + 1;
        let created = cfg.start + Duration::seconds(offset);
        let topic = rng.gen_range(0..t);
        let n_tags = (tag_counts.sample(&mut rng) + 1).min(cfg.tags_per_topic);
        let mut tags = BTreeSet::new();
        while tags.len() < n_tags {
            tags.insert(tag_name(topic, tag_dist.sample(&mut rng)));
        }
        if n_tags < MAX_TAGS && rng.gen_bool(cfg.cross_topic_tag) {
            let other = (topic + 1 + rng.gen_range(0..t - 1)) % t;
            tags.insert(tag_name(other, tag_dist.sample(&mut rng)));
        }
        let asker = users[rng.gen_range(0..users.len())];

        let mut expert_answers = Vec::new();
        if created < drift {
            for &u in &early[topic] {
                if rng.gen_bool(cfg.early_expert_rate) {
                    expert_answers.push(u);
                }
            }
        } else if rng.gen_bool(cfg.late_expert_rate) {
            expert_answers.push(late[topic][rng.gen_range(0..e)]);
        }
        let mut answered: BTreeSet<UserId> = BTreeSet::from([asker]);
        let mut post = |user: UserId, score: i64, rng: &mut ChaCha8Rng| {
            let at = created + Duration::minutes(rng.gen_range(1..48 * 60));
            answers.push(AnswerPost {
                id: next_answer,
                parent: qid,
                answerer: Some(user),
                created_at: at,
                score,
            });
            next_answer += 1;
            next_answer - 1
        };
        let mut expert_ids = Vec::new();
        for u in expert_answers {
            if answered.insert(u) {
                let score = if rng.gen_bool(0.95) { 1 + rng.gen_range(0..5) } else { 0 };
                expert_ids.push(post(u, score, &mut rng));
            }
        }
        let mut other_ids = Vec::new();
        for _ in 0..background.sample(&mut rng) as usize {
            let u = users[rng.gen_range(0..users.len())];
            if answered.insert(u) {
                let score = rng.gen_range(-1..3);
                other_ids.push(post(u, score, &mut rng));
            }
        }
        let accepted = if !expert_ids.is_empty() && rng.gen_bool(0.9) {
            Some(expert_ids[rng.gen_range(0..expert_ids.len())])
        } else if !other_ids.is_empty() && rng.gen_bool(0.5) {
            Some(other_ids[rng.gen_range(0..other_ids.len())])
        } else {
            None
        };
        questions.push(QuestionPost {
            id: qid,
            asker: Some(asker),
            created_at: created,
            tags: tags.into_iter().collect(),
            accepted_answer: accepted,
            score: rng.gen_range(0..4),
        });
    }
    let planted = TopicMap::from_pairs(
        (0..t).flat_map(|k| (0..cfg.tags_per_topic).map(move |i| (tag_name(k, i), k))),
    )?;
    let all_tags: Vec<(String, Option<DateTime<Utc>>)> = planted
        .pairs()
        .into_iter()
        .map(|(name, _)| (name.to_string(), Some(cfg.start)))
        .collect();
    let corpus = Corpus::new(questions, answers, all_tags)?;
    Ok(SynthCorpus {
        corpus,
        planted,
        early_experts: early,
        late_experts: late,
        spec: cfg.split_spec(),
    })
}

/// Planted-partition graph: `blocks` groups of `block_size` nodes, edges
/// inside a group with probability `p_in`, across groups with `p_out`.
/// Returns the graph and the planted block of every node.
pub fn planted_partition_graph(
    blocks: usize,
    block_size: usize,
    p_in: f64,
    p_out: f64,
    seed: u64,
) -> Result<(TagGraph, Vec<usize>)> {
    if !(0.0..=1.0).contains(&p_in) || !(0.0..=1.0).contains(&p_out) {
        return Err(Error::Config("edge probabilities must lie in [0, 1]".into()));
    }
    let n = blocks * block_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let block: Vec<usize> = (0..n).map(|i| i / block_size).collect();
    let mut edges = Vec::new();
    for a in 0..n {
        for b in a + 1..n {
            let p = if block[a] == block[b] { p_in } else { p_out };
            if rng.gen_bool(p) {
                edges.push((a, b));
            }
        }
    }
    Ok((TagGraph::from_unweighted(n, edges)?, block))
}

/// Two users with identical answer histories on `git` questions, except
/// that user 2 answered in the month before the test period and user 1
/// eleven months earlier. One test question, accepted answer by user 2.
pub fn recency_fixture() -> (Corpus, SplitSpec) {
    let at = |y: i32, m: u32, d: u32| Utc.with_ymd_and_hms(y, m, d, 12, 0, 0).unwrap();
    let mut questions = Vec::new();
    let mut answers = Vec::new();
    for i in 0..5i64 {
        let d = 2 + 3 * i as u32;
        for (user, month, base) in [(1, 1, 0), (2, 12, 100)] {
            let qid = base + i + 1;
            questions.push(QuestionPost {
                id: qid,
                asker: Some(9),
                created_at: at(2018, month, d),
                tags: vec!["git".into()],
                accepted_answer: None,
                score: 1,
            });
            answers.push(AnswerPost {
                id: 1000 + qid,
                parent: qid,
                answerer: Some(user),
                created_at: at(2018, month, d + 1),
                score: 2,
            });
        }
    }
    questions.push(QuestionPost {
        id: 500,
        asker: Some(9),
        created_at: at(2019, 1, 10),
        tags: vec!["git".into()],
        accepted_answer: Some(1500),
        score: 1,
    });
    answers.push(AnswerPost {
        id: 1500,
        parent: 500,
        answerer: Some(2),
        created_at: at(2019, 1, 11),
        score: 3,
    });
    let corpus = Corpus::new(questions, answers, []).expect("fixture is valid");
    let spec = SplitSpec::new(at(2017, 1, 1), at(2019, 1, 1), at(2019, 1, 1), at(2019, 4, 1));
    (corpus, spec)
}
