//! Reader and writer for the StackExchange data-dump XML layout
//! (`<posts><row .../></posts>` and `<tags><row .../></tags>`).

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use chrono::{DateTime, NaiveDateTime, Utc};
use quick_xml::events::{BytesStart, Event};
use quick_xml::Reader;
use serde::{Deserialize, Serialize};

use super::{normalize_tag, AnswerPost, Corpus, QuestionPost, MAX_TAGS};
use crate::error::{Error, Result};

/// Counters describing what ingestion kept and what it dropped.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParseSummary {
    pub questions: usize,
    pub answers: usize,
    pub answerers: usize,
    pub tags: usize,
    pub first_post: Option<DateTime<Utc>>,
    pub last_post: Option<DateTime<Utc>>,
    /// Rows lacking a required attribute (or with an unparsable one).
    pub missing_attribute: usize,
    /// Rows whose `PostTypeId` is neither question nor answer.
    pub unknown_post_type: usize,
    /// Questions with zero or more than five tags after normalization.
    pub invalid_tags: usize,
    /// Answers whose parent question is absent.
    pub orphan_answers: usize,
    /// Answers timestamped before their question.
    pub answers_before_question: usize,
    /// `AcceptedAnswerId` values not pointing at a kept answer of the question.
    pub dangling_accepted: usize,
    pub duplicate_ids: usize,
    /// Rows of the tags file without a `TagName`.
    pub skipped_tag_rows: usize,
}

impl fmt::Display for ParseSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "questions              {}", self.questions)?;
        writeln!(f, "answers                {}", self.answers)?;
        writeln!(f, "answerers              {}", self.answerers)?;
        writeln!(f, "tags                   {}", self.tags)?;
        let fmt_ts = |t: Option<DateTime<Utc>>| {
            t.map(|t| t.format("%Y-%m-%dT%H:%M:%S").to_string())
                .unwrap_or_else(|| "-".into())
        };
        writeln!(
            f,
            "date range             {} .. {}",
            fmt_ts(self.first_post),
            fmt_ts(self.last_post)
        )?;
        writeln!(f, "skipped: missing attr  {}", self.missing_attribute)?;
        writeln!(f, "skipped: post type     {}", self.unknown_post_type)?;
        writeln!(f, "skipped: invalid tags  {}", self.invalid_tags)?;
        writeln!(f, "skipped: orphan answer {}", self.orphan_answers)?;
        writeln!(f, "skipped: answer < q    {}", self.answers_before_question)?;
        writeln!(f, "skipped: duplicate id  {}", self.duplicate_ids)?;
        writeln!(f, "cleared: accepted id   {}", self.dangling_accepted)?;
        write!(f, "skipped: tag rows      {}", self.skipped_tag_rows)
    }
}

/// Parses a dump timestamp. The dumps use `2019-01-01T10:20:30.123` with no
/// zone designator; values are UTC. A trailing `Z` is accepted. Precision is
/// truncated to milliseconds.
pub fn parse_timestamp(s: &str) -> Option<DateTime<Utc>> {
    let s = s.trim().trim_end_matches('Z');
    let naive = NaiveDateTime::parse_from_str(s, "%Y-%m-%dT%H:%M:%S%.f").ok()?;
    let ms = naive.and_utc().timestamp_millis();
    DateTime::from_timestamp_millis(ms)
}

fn format_timestamp(t: &DateTime<Utc>) -> String {
    t.format("%Y-%m-%dT%H:%M:%S%.3f").to_string()
}

/// Splits a `Tags` attribute. Both the classic `<a><b>` and the newer `|a|b|`
/// encodings are understood.
fn split_tags(raw: &str) -> Vec<String> {
    let raw = raw.trim();
    let parts: Vec<&str> = if raw.starts_with('<') {
        raw.split(['<', '>']).collect()
    } else {
        raw.split('|').collect()
    };
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for p in parts {
        let t = normalize_tag(p);
        if !t.is_empty() && seen.insert(t.clone()) {
            out.push(t);
        }
    }
    out
}

fn xml_error<R>(reader: &Reader<R>, e: impl fmt::Display) -> Error {
    Error::Xml {
        offset: reader.buffer_position(),
        message: e.to_string(),
    }
}

fn row_attributes<R>(reader: &Reader<R>, e: &BytesStart<'_>) -> Result<HashMap<String, String>> {
    let mut out = HashMap::new();
    for attr in e.attributes() {
        let attr = attr.map_err(|err| xml_error(reader, err))?;
        let key = String::from_utf8_lossy(attr.key.as_ref()).into_owned();
        let value = attr
            .unescape_value()
            .map_err(|err| xml_error(reader, err))?
            .into_owned();
        out.insert(key, value);
    }
    Ok(out)
}

/// Streams `<row>` elements from a dump file, calling `on_row` with the
/// decoded attributes. Fails if the document is malformed or has no root.
fn for_each_row<R: BufRead>(
    input: R,
    mut on_row: impl FnMut(HashMap<String, String>),
) -> Result<()> {
    let mut reader = Reader::from_reader(input);
    reader.config_mut().trim_text(true);
    let mut buf = Vec::new();
    let mut depth = 0usize;
    let mut saw_root = false;
    loop {
        match reader.read_event_into(&mut buf) {
            Err(e) => return Err(xml_error(&reader, e)),
            Ok(Event::Eof) => break,
            Ok(Event::Start(e)) => {
                if depth == 0 {
                    saw_root = true;
                } else if e.name().as_ref() == b"row" {
                    on_row(row_attributes(&reader, &e)?);
                }
                depth += 1;
            }
            Ok(Event::End(_)) => depth = depth.saturating_sub(1),
            Ok(Event::Empty(e)) => {
                if depth == 0 {
                    saw_root = true;
                } else if e.name().as_ref() == b"row" {
                    on_row(row_attributes(&reader, &e)?);
                }
            }
            Ok(Event::Text(t)) if depth == 0 => {
                return Err(xml_error(
                    &reader,
                    format!("unexpected text outside root: {:?}", String::from_utf8_lossy(&t)),
                ))
            }
            Ok(_) => {}
        }
        buf.clear();
    }
    if depth != 0 {
        return Err(xml_error(&reader, "unexpected end of document (unclosed element)"));
    }
    if !saw_root {
        return Err(xml_error(&reader, "document has no root element"));
    }
    Ok(())
}

fn int_attr(row: &HashMap<String, String>, key: &str) -> Option<i64> {
    row.get(key).and_then(|v| v.trim().parse().ok())
}

/// Parses `Posts.xml` and `Tags.xml` into a validated [`Corpus`].
///
/// Rows that cannot be used are skipped and counted in the returned
/// [`ParseSummary`]; only malformed XML is fatal.
pub fn parse_dump<P: BufRead, T: BufRead>(posts: P, tags: T) -> Result<(Corpus, ParseSummary)> {
    let mut summary = ParseSummary::default();
    let mut questions: BTreeMap<i64, QuestionPost> = BTreeMap::new();
    let mut answers: BTreeMap<i64, AnswerPost> = BTreeMap::new();

    for_each_row(posts, |row| {
        let (Some(id), Some(kind), Some(created_at), Some(score)) = (
            int_attr(&row, "Id"),
            int_attr(&row, "PostTypeId"),
            row.get("CreationDate").and_then(|s| parse_timestamp(s)),
            int_attr(&row, "Score"),
        ) else {
            summary.missing_attribute += 1;
            return;
        };
        match kind {
            1 => {
                let Some(raw_tags) = row.get("Tags") else {
                    summary.missing_attribute += 1;
                    return;
                };
                let tags = split_tags(raw_tags);
                if tags.is_empty() || tags.len() > MAX_TAGS {
                    summary.invalid_tags += 1;
                    return;
                }
                let q = QuestionPost {
                    id,
                    asker: int_attr(&row, "OwnerUserId"),
                    created_at,
                    tags,
                    accepted_answer: int_attr(&row, "AcceptedAnswerId"),
                    score,
                };
                if questions.insert(id, q).is_some() {
                    summary.duplicate_ids += 1;
                }
            }
            2 => {
                let Some(parent) = int_attr(&row, "ParentId") else {
                    summary.missing_attribute += 1;
                    return;
                };
                let a = AnswerPost {
                    id,
                    parent,
                    answerer: int_attr(&row, "OwnerUserId"),
                    created_at,
                    score,
                };
                if answers.insert(id, a).is_some() {
                    summary.duplicate_ids += 1;
                }
            }
            _ => summary.unknown_post_type += 1,
        }
    })?;

    let mut tag_dates: BTreeMap<String, Option<DateTime<Utc>>> = BTreeMap::new();
    for_each_row(tags, |row| match row.get("TagName").map(|s| normalize_tag(s)) {
        Some(name) if !name.is_empty() => {
            let created = row.get("CreationDate").and_then(|s| parse_timestamp(s));
            tag_dates.insert(name, created);
        }
        _ => summary.skipped_tag_rows += 1,
    })?;

    answers.retain(|_, a| match questions.get(&a.parent) {
        None => {
            summary.orphan_answers += 1;
            false
        }
        Some(q) if a.created_at < q.created_at => {
            summary.answers_before_question += 1;
            false
        }
        Some(_) => true,
    });
    for q in questions.values_mut() {
        if let Some(acc) = q.accepted_answer {
            if answers.get(&acc).map(|a| a.parent) != Some(q.id) {
                q.accepted_answer = None;
                summary.dangling_accepted += 1;
            }
        }
    }

    let corpus = Corpus::new(questions.into_values(), answers.into_values(), tag_dates)?;
    summary.questions = corpus.num_questions();
    summary.answers = corpus.num_answers();
    summary.answerers = corpus.answerers().len();
    summary.tags = corpus.tags().len();
    if let Some((lo, hi)) = corpus.time_range() {
        summary.first_post = Some(lo);
        summary.last_post = Some(hi);
    }
    Ok((corpus, summary))
}

fn escape(s: &str) -> std::borrow::Cow<'_, str> {
    quick_xml::escape::escape(s)
}

/// Writes a corpus back out in dump layout. Parsing the output reproduces
/// the corpus exactly.
pub fn write_dump<P: Write, T: Write>(corpus: &Corpus, mut posts: P, mut tags: T) -> Result<()> {
    writeln!(posts, "<?xml version=\"1.0\" encoding=\"utf-8\"?>")?;
    writeln!(posts, "<posts>")?;
    // Interleave by id so the file reads like a real dump.
    let mut rows: Vec<(i64, String)> = Vec::with_capacity(corpus.num_questions() + corpus.num_answers());
    for q in corpus.questions() {
        let mut row = format!(
            "  <row Id=\"{}\" PostTypeId=\"1\" CreationDate=\"{}\" Score=\"{}\"",
            q.id,
            format_timestamp(&q.created_at),
            q.score
        );
        if let Some(acc) = q.accepted_answer {
            row.push_str(&format!(" AcceptedAnswerId=\"{acc}\""));
        }
        if let Some(u) = q.asker {
            row.push_str(&format!(" OwnerUserId=\"{u}\""));
        }
        let encoded: String = q.tags.iter().map(|t| format!("<{t}>")).collect();
        row.push_str(&format!(" Tags=\"{}\" />", escape(&encoded)));
        rows.push((q.id, row));
    }
    for a in corpus.answers() {
        let mut row = format!(
            "  <row Id=\"{}\" PostTypeId=\"2\" ParentId=\"{}\" CreationDate=\"{}\" Score=\"{}\"",
            a.id,
            a.parent,
            format_timestamp(&a.created_at),
            a.score
        );
        if let Some(u) = a.answerer {
            row.push_str(&format!(" OwnerUserId=\"{u}\""));
        }
        row.push_str(" />");
        rows.push((a.id, row));
    }
    rows.sort_by_key(|(id, _)| *id);
    for (_, row) in rows {
        writeln!(posts, "{row}")?;
    }
    writeln!(posts, "</posts>")?;

    writeln!(tags, "<?xml version=\"1.0\" encoding=\"utf-8\"?>")?;
    writeln!(tags, "<tags>")?;
    for (i, (name, created)) in corpus.tags().iter().enumerate() {
        let mut row = format!("  <row Id=\"{}\" TagName=\"{}\"", i + 1, escape(name));
        if let Some(c) = created {
            row.push_str(&format!(" CreationDate=\"{}\"", format_timestamp(c)));
        }
        writeln!(tags, "{row} />")?;
    }
    writeln!(tags, "</tags>")?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    const EMPTY_TAGS: &[u8] = b"<?xml version=\"1.0\"?><tags></tags>";

    #[test]
    fn parses_question_tags() {
        let posts = br#"<?xml version="1.0" encoding="utf-8"?>
<posts>
  <row Id="1" PostTypeId="1" CreationDate="2019-01-02T03:04:05.678" Score="3" OwnerUserId="7" Tags="&lt;git&gt;&lt;git-pull&gt;" />
</posts>"#;
        let (c, s) = parse_dump(&posts[..], EMPTY_TAGS).unwrap();
        assert_eq!(s.questions, 1);
        let q = c.question(1).unwrap();
        assert_eq!(q.tags, vec!["git", "git-pull"]);
        assert_eq!(q.asker, Some(7));
        assert_eq!(q.created_at.timestamp_subsec_millis(), 678);
    }

    #[test]
    fn pipe_encoded_and_messy_tags_are_normalized() {
        assert_eq!(split_tags("|Git| git-pull |git|"), vec!["git", "git-pull"]);
        assert_eq!(split_tags("<C#><c#><.NET>"), vec!["c#", ".net"]);
    }

    #[test]
    fn empty_posts_file() {
        let (c, s) = parse_dump(&b"<posts></posts>"[..], EMPTY_TAGS).unwrap();
        assert!(c.is_empty());
        assert_eq!(s, ParseSummary::default());
        let (c, _) = parse_dump(&b"<posts/>"[..], EMPTY_TAGS).unwrap();
        assert!(c.is_empty());
    }

    #[test]
    fn malformed_xml_reports_offset() {
        let bad = b"<posts>\n  <row Id=\"1\" PostTypeId=\"1\" </posts>";
        match parse_dump(&bad[..], EMPTY_TAGS) {
            Err(Error::Xml { offset, .. }) => assert!(offset > 0),
            other => panic!("expected XML error, got {other:?}"),
        }
        assert!(matches!(
            parse_dump(&b"<posts><row Id=\"1\"/>"[..], EMPTY_TAGS),
            Err(Error::Xml { .. })
        ));
        assert!(matches!(parse_dump(&b""[..], EMPTY_TAGS), Err(Error::Xml { .. })));
    }

    #[test]
    fn skip_counters() {
        let posts = br#"<posts>
  <row Id="1" PostTypeId="1" CreationDate="2019-01-01T00:00:00.000" Score="1" Tags="&lt;a&gt;" AcceptedAnswerId="99" />
  <row Id="2" PostTypeId="5" CreationDate="2019-01-01T00:00:00.000" Score="1" />
  <row Id="3" PostTypeId="2" CreationDate="2019-01-01T00:00:00.000" Score="1" />
  <row Id="4" PostTypeId="1" CreationDate="2019-01-01T00:00:00.000" Score="1" Tags="" />
  <row Id="5" PostTypeId="2" ParentId="1" CreationDate="2018-12-31T00:00:00.000" Score="1" OwnerUserId="3" />
  <row Id="6" PostTypeId="1" CreationDate="2019-01-01T00:00:00.000" Score="1" Tags="&lt;a&gt;&lt;b&gt;&lt;c&gt;&lt;d&gt;&lt;e&gt;&lt;f&gt;" />
</posts>"#;
        let (c, s) = parse_dump(&posts[..], EMPTY_TAGS).unwrap();
        assert_eq!(c.num_questions(), 1);
        assert_eq!(c.num_answers(), 0);
        assert_eq!(s.unknown_post_type, 1);
        assert_eq!(s.missing_attribute, 1);
        assert_eq!(s.invalid_tags, 2);
        assert_eq!(s.answers_before_question, 1);
        assert_eq!(s.dangling_accepted, 1);
        assert_eq!(c.question(1).unwrap().accepted_answer, None);
    }

    #[test]
    fn tags_file_dates_and_unused_tags() {
        let tags = br#"<tags>
  <row Id="1" TagName="Git" Count="3" />
  <row Id="2" TagName="linux" CreationDate="2010-05-05T00:00:00.000" />
  <row Id="3" Count="1" />
</tags>"#;
        let (c, s) = parse_dump(&b"<posts/>"[..], &tags[..]).unwrap();
        assert_eq!(s.skipped_tag_rows, 1);
        assert_eq!(c.tags().len(), 2);
        assert!(c.tags()["git"].is_none());
        assert!(c.tags()["linux"].is_some());
    }

    #[test]
    fn timestamps() {
        let t = parse_timestamp("2008-07-31T21:42:52.667").unwrap();
        assert_eq!(t.timestamp_millis() % 1000, 667);
        assert_eq!(parse_timestamp("2008-07-31T21:42:52Z").unwrap().timestamp(), t.timestamp());
        assert!(parse_timestamp("yesterday").is_none());
    }
}
