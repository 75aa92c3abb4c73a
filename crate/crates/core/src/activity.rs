//! Temporally discounted user-topic activity.
//!
//! Every positively scored answer credits its author with the fraction of
//! the question's tags falling in each topic. Answers are bucketed into
//! windows counted backwards from the reference time `as_of` (the newest
//! window has index 0) and weighted by the kernel `g(j) = 1/(1 + j)`.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, Months, Utc};
use serde::{Deserialize, Serialize};

use crate::communities::Partition;
use crate::error::{Error, Result};
use crate::ingest::{Corpus, UserId};
use crate::tag_graph::TagGraph;
use crate::Exec;

/// Tag → topic lookup. Topics are dense ids `0..num_topics`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopicMap {
    tag_to_topic: HashMap<String, usize>,
    num_topics: usize,
}

impl TopicMap {
    /// Topics are the communities of `part` over the nodes of `g`.
    pub fn from_partition(g: &TagGraph, part: &Partition) -> Result<Self> {
        if part.num_nodes() != g.num_nodes() {
            return Err(Error::PartitionMismatch(format!(
                "partition covers {} nodes, graph has {}",
                part.num_nodes(),
                g.num_nodes()
            )));
        }
        let tag_to_topic = g
            .names()
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), part.community_of(i)))
            .collect();
        Ok(TopicMap {
            tag_to_topic,
            num_topics: part.num_communities(),
        })
    }

    /// One topic per graph node (topic id = node id): the tag-level view.
    pub fn singleton(g: &TagGraph) -> Self {
        TopicMap {
            tag_to_topic: g.names().iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
            num_topics: g.num_nodes(),
        }
    }

    /// Builds a map from explicit `(tag, topic)` pairs; topic ids must be
    /// dense.
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, usize)>) -> Result<Self> {
        let tag_to_topic: HashMap<String, usize> = pairs.into_iter().collect();
        let used: BTreeSet<usize> = tag_to_topic.values().copied().collect();
        let num_topics = used.iter().next_back().map_or(0, |m| m + 1);
        if used.len() != num_topics {
            return Err(Error::InvalidInput("topic ids are not contiguous".into()));
        }
        Ok(TopicMap {
            tag_to_topic,
            num_topics,
        })
    }

    pub fn topic_of(&self, tag: &str) -> Option<usize> {
        self.tag_to_topic.get(tag).copied()
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn num_tags(&self) -> usize {
        self.tag_to_topic.len()
    }

    /// Tags sorted by name with their topics.
    pub fn pairs(&self) -> Vec<(&str, usize)> {
        let mut v: Vec<(&str, usize)> = self.tag_to_topic.iter().map(|(t, &c)| (t.as_str(), c)).collect();
        v.sort_unstable();
        v
    }
}

/// Fraction of the question's mappable tags that fall in each topic, as
/// `(topic, fraction)` sorted by topic. Tags unknown to `topics` are ignored.
pub fn topic_fractions<S: AsRef<str>>(tags: &[S], topics: &TopicMap) -> Result<Vec<(usize, f64)>> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let mut mapped = 0usize;
    for t in tags {
        if let Some(c) = topics.topic_of(t.as_ref()) {
            *counts.entry(c).or_insert(0) += 1;
            mapped += 1;
        }
    }
    if mapped == 0 {
        return Err(Error::Unroutable);
    }
    Ok(counts
        .into_iter()
        .map(|(c, k)| (c, k as f64 / mapped as f64))
        .collect())
}

/// Fraction of a question's mappable tags that belong to `topic`.
pub fn question_topic_fraction<S: AsRef<str>>(tags: &[S], topics: &TopicMap, topic: usize) -> Result<f64> {
    Ok(topic_fractions(tags, topics)?
        .into_iter()
        .find(|&(c, _)| c == topic)
        .map_or(0.0, |(_, f)| f))
}

/// Width of one discount window.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Window {
    /// Calendar months.
    Months(u32),
    Days(u32),
}

impl Default for Window {
    fn default() -> Self {
        Window::Months(1)
    }
}

impl fmt::Display for Window {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Window::Months(n) => write!(f, "{n}mo"),
            Window::Days(n) => write!(f, "{n}d"),
        }
    }
}

impl FromStr for Window {
    type Err = Error;

    /// Accepts `1mo`, `3months`, `30d`, `2w`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let split = s.find(|c: char| !c.is_ascii_digit()).unwrap_or(s.len());
        let (num, unit) = s.split_at(split);
        let n: u32 = num
            .parse()
            .map_err(|_| Error::Config(format!("bad window `{s}`")))?;
        if n == 0 {
            return Err(Error::Config("window must be positive".into()));
        }
        match unit.trim() {
            "mo" | "month" | "months" | "m" => Ok(Window::Months(n)),
            "d" | "day" | "days" => Ok(Window::Days(n)),
            "w" | "week" | "weeks" => Ok(Window::Days(7 * n)),
            other => Err(Error::Config(format!("unknown window unit `{other}`"))),
        }
    }
}

impl Window {
    /// Start of window `j` counted back from `as_of` (window `j` spans
    /// `[boundary(j + 1), boundary(j))`).
    pub fn boundary(&self, as_of: DateTime<Utc>, j: u32) -> DateTime<Utc> {
        match *self {
            Window::Months(k) => as_of
                .checked_sub_months(Months::new(k * j))
                .unwrap_or(DateTime::<Utc>::MIN_UTC),
            Window::Days(k) => as_of - Duration::days(k as i64 * j as i64),
        }
    }

    /// Number of complete windows between `t` and `as_of`; `None` when `t`
    /// is not before `as_of`.
    pub fn index(&self, t: DateTime<Utc>, as_of: DateTime<Utc>) -> Option<u32> {
        if t >= as_of {
            return None;
        }
        match *self {
            Window::Days(k) => {
                let span = Duration::days(k as i64).num_milliseconds();
                let delta = (as_of - t).num_milliseconds();
                // t lies in window j iff j*span < delta <= (j+1)*span.
                Some(((delta - 1) / span) as u32)
            }
            Window::Months(k) => {
                let months = (as_of.year() - t.year()) * 12 + as_of.month() as i32 - t.month() as i32;
                let mut j = (months.max(0) as u32 / k).saturating_sub(1);
                while self.boundary(as_of, j + 1) > t {
                    j += 1;
                }
                while j > 0 && self.boundary(as_of, j) <= t {
                    j -= 1;
                }
                Some(j)
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    /// `g(j) = 1 / (1 + j)`.
    Hyperbolic,
    /// `g(j) = 1`: plain accumulation over all history.
    None,
}

impl FromStr for KernelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" => Ok(KernelKind::Hyperbolic),
            "none" => Ok(KernelKind::None),
            other => Err(Error::Config(format!("unknown kernel `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DiscountKernel {
    pub kind: KernelKind,
    pub window: Window,
    /// Added to the window index before discounting. `0` leaves the newest
    /// window undamped; `1` discounts it by one half.
    #[serde(default)]
    pub offset: u32,
}

impl DiscountKernel {
    pub fn hyperbolic(window: Window) -> Self {
        DiscountKernel {
            kind: KernelKind::Hyperbolic,
            window,
            offset: 0,
        }
    }

    pub fn none(window: Window) -> Self {
        DiscountKernel {
            kind: KernelKind::None,
            window,
            offset: 0,
        }
    }

    pub fn weight(&self, j: u32) -> f64 {
        match self.kind {
            KernelKind::Hyperbolic => 1.0 / (1.0 + j as f64 + self.offset as f64),
            KernelKind::None => 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Entry {
    pub row: u32,
    pub col: u32,
    pub value: f64,
}

/// Sparse user × topic matrix of strictly positive activity scores. Absent
/// cells are unknown, not zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActivityMatrix {
    users: Vec<UserId>,
    num_topics: usize,
    entries: Vec<Entry>,
    pub as_of: Option<DateTime<Utc>>,
    pub kernel: Option<DiscountKernel>,
}

impl ActivityMatrix {
    /// Builds a matrix from `(user, topic, value)` triplets. Row order
    /// follows ascending user id; duplicate cells are summed and
    /// non-positive values rejected.
    pub fn from_triplets(
        triplets: impl IntoIterator<Item = (UserId, usize, f64)>,
        num_topics: usize,
    ) -> Result<Self> {
        let mut cells: BTreeMap<(UserId, usize), f64> = BTreeMap::new();
        for (u, c, v) in triplets {
            if c >= num_topics {
                return Err(Error::OutOfRange(format!("topic {c} >= {num_topics}")));
            }
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidInput(format!("activity value {v} is not positive")));
            }
            *cells.entry((u, c)).or_insert(0.0) += v;
        }
        let users: Vec<UserId> = cells.keys().map(|&(u, _)| u).collect::<BTreeSet<_>>().into_iter().collect();
        let row_of: HashMap<UserId, u32> = users.iter().enumerate().map(|(i, &u)| (u, i as u32)).collect();
        let entries = cells
            .into_iter()
            .map(|((u, c), value)| Entry {
                row: row_of[&u],
                col: c as u32,
                value,
            })
            .collect();
        Ok(ActivityMatrix {
            users,
            num_topics,
            entries,
            as_of: None,
            kernel: None,
        })
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_topics(&self) -> usize {
        self.num_topics
    }

    pub fn nnz(&self) -> usize {
        self.entries.len()
    }

    pub fn users(&self) -> &[UserId] {
        &self.users
    }

    /// Row index of `user`.
    pub fn row_of(&self, user: UserId) -> Option<usize> {
        self.users.binary_search(&user).ok()
    }

    /// Entries sorted by `(row, col)`.
    pub fn entries(&self) -> &[Entry] {
        &self.entries
    }

    pub fn get(&self, user: UserId, topic: usize) -> Option<f64> {
        let row = self.row_of(user)? as u32;
        self.entries
            .binary_search_by(|e| (e.row, e.col).cmp(&(row, topic as u32)))
            .ok()
            .map(|i| self.entries[i].value)
    }

    /// Cells of one user as `(topic, value)`.
    pub fn row(&self, user: UserId) -> impl Iterator<Item = (usize, f64)> + '_ {
        let row = self.row_of(user).map(|r| r as u32);
        let start = row.map_or(self.entries.len(), |r| self.entries.partition_point(|e| e.row < r));
        self.entries[start..]
            .iter()
            .take_while(move |e| Some(e.row) == row)
            .map(|e| (e.col as usize, e.value))
    }

    /// Sum of all stored values.
    pub fn total(&self) -> f64 {
        self.entries.iter().map(|e| e.value).sum()
    }

    /// Writes `user_id<TAB>topic_id<TAB>value` lines.
    pub fn write_triplets<W: Write>(&self, mut out: W) -> Result<()> {
        for e in &self.entries {
            writeln!(out, "{}\t{}\t{}", self.users[e.row as usize], e.col, e.value)?;
        }
        Ok(())
    }

    pub fn read_triplets<R: BufRead>(input: R, num_topics: usize) -> Result<Self> {
        let mut triplets = Vec::new();
        for (i, line) in input.lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || Error::InvalidInput(format!("triplet line {}: `{line}`", i + 1));
            let mut it = line.split('\t');
            let (Some(u), Some(c), Some(v), None) = (it.next(), it.next(), it.next(), it.next()) else {
                return Err(bad());
            };
            triplets.push((
                u.parse().map_err(|_| bad())?,
                c.parse().map_err(|_| bad())?,
                v.parse().map_err(|_| bad())?,
            ));
        }
        Self::from_triplets(triplets, num_topics)
    }
}

/// Fraction of stored cells: `nnz / (M·N)`.
pub fn density(m: &ActivityMatrix) -> f64 {
    let cells = m.num_users() * m.num_topics();
    if cells == 0 {
        0.0
    } else {
        m.nnz() as f64 / cells as f64
    }
}

/// What happened to each training answer while building a matrix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ActivityStats {
    pub used: usize,
    pub not_positive: usize,
    pub unattributed: usize,
    pub unmappable: usize,
    pub not_before_as_of: usize,
    pub filtered_user: usize,
}

/// One credited answer: window index and question topic fractions.
struct Credit {
    window: u32,
    fractions: Vec<(usize, f64)>,
}

fn collect_credits<'a>(
    train: &'a Corpus,
    topics: &TopicMap,
    window: Window,
    as_of: DateTime<Utc>,
    users: Option<&BTreeSet<UserId>>,
) -> (BTreeMap<UserId, Vec<Credit>>, ActivityStats) {
    let mut stats = ActivityStats::default();
    let mut by_user: BTreeMap<UserId, Vec<Credit>> = BTreeMap::new();
    for a in train.answers() {
        let Some(user) = a.answerer else {
            stats.unattributed += 1;
            continue;
        };
        if users.is_some_and(|set| !set.contains(&user)) {
            stats.filtered_user += 1;
            continue;
        }
        if !a.is_positive() {
            stats.not_positive += 1;
            continue;
        }
        let Some(j) = window.index(a.created_at, as_of) else {
            stats.not_before_as_of += 1;
            continue;
        };
        let q = train.question(a.parent).expect("corpus keeps referential integrity");
        let Ok(fractions) = topic_fractions(&q.tags, topics) else {
            stats.unmappable += 1;
            continue;
        };
        stats.used += 1;
        by_user.entry(user).or_default().push(Credit {
            window: j,
            fractions,
        });
    }
    (by_user, stats)
}

fn assemble(
    by_user: &BTreeMap<UserId, Vec<Credit>>,
    num_topics: usize,
    weight: impl Fn(u32) -> Option<f64> + Sync,
    exec: Exec,
) -> ActivityMatrix {
    let users: Vec<(&UserId, &Vec<Credit>)> = by_user.iter().collect();
    // Per-user accumulation in answer-id order keeps sums independent of
    // the execution mode.
    let rows = exec.map(&users, |(_, credits)| {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for c in credits.iter() {
            let Some(g) = weight(c.window) else { continue };
            for &(topic, f) in &c.fractions {
                *acc.entry(topic).or_insert(0.0) += g * f;
            }
        }
        acc
    });
    let mut kept_users = Vec::new();
    let mut entries = Vec::new();
    for ((&user, _), acc) in users.iter().zip(rows) {
        let row = kept_users.len() as u32;
        let mut any = false;
        for (topic, value) in acc {
            if value > 0.0 {
                entries.push(Entry {
                    row,
                    col: topic as u32,
                    value,
                });
                any = true;
            }
        }
        if any {
            kept_users.push(user);
        }
    }
    ActivityMatrix {
        users: kept_users,
        num_topics,
        entries,
        as_of: None,
        kernel: None,
    }
}

/// Undiscounted activity restricted to window `j` before `as_of`.
pub fn windowed_activity(
    train: &Corpus,
    topics: &TopicMap,
    j: u32,
    window: Window,
    as_of: DateTime<Utc>,
    users: Option<&BTreeSet<UserId>>,
) -> ActivityMatrix {
    let (by_user, _) = collect_credits(train, topics, window, as_of, users);
    let mut m = assemble(&by_user, topics.num_topics(), |w| (w == j).then_some(1.0), Exec::Sequential);
    m.as_of = Some(as_of);
    m.kernel = Some(DiscountKernel::none(window));
    m
}

/// The discounted activity matrix `Σ_j g(j)·S_j` at time `as_of`.
///
/// Only positively scored answers created before `as_of` by users in
/// `users` (all users when `None`) count. Cells that sum to zero are not
/// stored.
pub fn temporal_matrix(
    train: &Corpus,
    topics: &TopicMap,
    kernel: DiscountKernel,
    as_of: DateTime<Utc>,
    users: Option<&BTreeSet<UserId>>,
    exec: Exec,
) -> (ActivityMatrix, ActivityStats) {
    let (by_user, stats) = collect_credits(train, topics, kernel.window, as_of, users);
    let mut m = assemble(&by_user, topics.num_topics(), |j| Some(kernel.weight(j)), exec);
    m.as_of = Some(as_of);
    m.kernel = Some(kernel);
    (m, stats)
}

#[cfg(test)]
mod tests {
    use chrono::TimeZone;

    use super::*;
    use crate::ingest::test_util::*;

    fn topics() -> TopicMap {
        TopicMap::from_pairs([("a".into(), 0), ("b".into(), 0), ("c".into(), 1), ("d".into(), 2)]).unwrap()
    }

    #[test]
    fn fractions_follow_tag_counts() {
        let t = topics();
        let f = topic_fractions(&["a", "b", "c"], &t).unwrap();
        assert_eq!(f, vec![(0, 2.0 / 3.0), (1, 1.0 / 3.0)]);
        assert_eq!(question_topic_fraction(&["a", "b"], &t, 0).unwrap(), 1.0);
        assert_eq!(question_topic_fraction(&["a", "zzz"], &t, 0).unwrap(), 1.0);
        assert_eq!(question_topic_fraction(&["a", "c"], &t, 2).unwrap(), 0.0);
        assert!(matches!(topic_fractions(&["zzz"], &t), Err(Error::Unroutable)));
    }

    #[test]
    fn five_topics_split_evenly() {
        let t = TopicMap::from_pairs((0..5).map(|i| (format!("t{i}"), i))).unwrap();
        let f = topic_fractions(&["t0", "t1", "t2", "t3", "t4"], &t).unwrap();
        assert!(f.iter().all(|&(_, x)| x == 0.2));
    }

    #[test]
    fn window_parsing() {
        assert_eq!("1mo".parse::<Window>().unwrap(), Window::Months(1));
        assert_eq!("2w".parse::<Window>().unwrap(), Window::Days(14));
        assert!("0d".parse::<Window>().is_err());
        assert!("5x".parse::<Window>().is_err());
    }

    #[test]
    fn month_windows_count_back_from_as_of() {
        let w = Window::Months(1);
        let as_of = Utc.with_ymd_and_hms(2019, 1, 1, 0, 0, 0).unwrap();
        assert_eq!(w.index(as_of, as_of), None);
        assert_eq!(w.index(ts(2018, 12, 31), as_of), Some(0));
        assert_eq!(w.index(Utc.with_ymd_and_hms(2018, 12, 1, 0, 0, 0).unwrap(), as_of), Some(0));
        assert_eq!(w.index(Utc.with_ymd_and_hms(2018, 11, 30, 23, 59, 59).unwrap(), as_of), Some(1));
        assert_eq!(w.index(ts(2018, 1, 15), as_of), Some(11));
        assert_eq!(w.index(ts(2015, 1, 15), as_of), Some(47));
        let mid = Utc.with_ymd_and_hms(2019, 3, 31, 0, 0, 0).unwrap();
        assert_eq!(w.index(Utc.with_ymd_and_hms(2019, 2, 28, 12, 0, 0).unwrap(), mid), Some(0));
        assert_eq!(w.index(Utc.with_ymd_and_hms(2019, 2, 27, 23, 0, 0).unwrap(), mid), Some(1));
        assert_eq!(w.index(Utc.with_ymd_and_hms(2019, 3, 1, 0, 0, 0).unwrap(), mid), Some(0));
    }

    #[test]
    fn day_windows() {
        let w = Window::Days(7);
        let as_of = ts(2020, 1, 15);
        assert_eq!(w.index(as_of - Duration::days(7), as_of), Some(0));
        assert_eq!(w.index(as_of - Duration::days(7) - Duration::seconds(1), as_of), Some(1));
    }

    #[test]
    fn kernel_weights() {
        let k = DiscountKernel::hyperbolic(Window::Months(1));
        assert_eq!(k.weight(0), 1.0);
        assert_eq!(k.weight(1), 0.5);
        assert_eq!(DiscountKernel { offset: 1, ..k }.weight(0), 0.5);
        assert_eq!(DiscountKernel::none(Window::Months(1)).weight(40), 1.0);
    }

    /// One user answers q(tags a,b,c) positively, q'(tag d) with score 0.
    fn fig_fixture() -> Corpus {
        let q1 = question(1, 50, ts(2018, 12, 2), &["a", "b", "c"]);
        let q2 = question(2, 50, ts(2018, 12, 2), &["d"]);
        Corpus::new(
            [q1, q2],
            [answer(3, 1, 7, ts(2018, 12, 3), 3), answer(4, 2, 7, ts(2018, 12, 3), 0)],
            [],
        )
        .unwrap()
    }

    #[test]
    fn positive_answers_split_across_topics() {
        let as_of = ts(2019, 1, 1);
        let (m, stats) = temporal_matrix(
            &fig_fixture(),
            &topics(),
            DiscountKernel::hyperbolic(Window::Months(1)),
            as_of,
            None,
            Exec::Sequential,
        );
        assert_eq!(m.get(7, 0), Some(2.0 / 3.0));
        assert_eq!(m.get(7, 1), Some(1.0 / 3.0));
        assert_eq!(m.get(7, 2), None);
        assert_eq!(stats.not_positive, 1);
        assert!((density(&m) - 2.0 / 3.0).abs() < 1e-15);
        let s1 = windowed_activity(&fig_fixture(), &topics(), 1, Window::Months(1), as_of, None);
        assert_eq!(s1.nnz(), 0);
        assert_eq!(s1.num_users(), 0);
    }

    #[test]
    fn recency_discount_by_window() {
        let q = question(1, 50, ts(2017, 1, 1), &["a"]);
        let c = Corpus::new(
            [q],
            [answer(2, 1, 1, ts(2018, 12, 15), 1), answer(3, 1, 2, ts(2018, 1, 15), 1)],
            [],
        )
        .unwrap();
        let (m, _) = temporal_matrix(
            &c,
            &topics(),
            DiscountKernel::hyperbolic(Window::Months(1)),
            ts(2019, 1, 1),
            None,
            Exec::Sequential,
        );
        assert_eq!(m.get(1, 0), Some(1.0));
        assert_eq!(m.get(2, 0), Some(1.0 / 12.0));
    }

    #[test]
    fn matrix_construction_and_io() {
        let m = ActivityMatrix::from_triplets([(5, 1, 0.5), (2, 0, 1.0), (5, 1, 0.25)], 5).unwrap();
        assert_eq!(m.users(), &[2, 5]);
        assert_eq!(m.get(5, 1), Some(0.75));
        assert!((density(&m) - 0.2).abs() < 1e-15);
        let mut buf = Vec::new();
        m.write_triplets(&mut buf).unwrap();
        assert_eq!(ActivityMatrix::read_triplets(&buf[..], 5).unwrap(), m);
        assert!(ActivityMatrix::from_triplets([(1, 0, 0.0)], 1).is_err());
        assert!(ActivityMatrix::from_triplets([(1, 3, 1.0)], 1).is_err());
        let full = ActivityMatrix::from_triplets([(1, 0, 1.0), (1, 1, 2.0)], 2).unwrap();
        assert_eq!(density(&full), 1.0);
        assert_eq!(full.row(1).collect::<Vec<_>>(), vec![(0, 1.0), (1, 2.0)]);
        assert_eq!(full.row(9).count(), 0);
    }
}
