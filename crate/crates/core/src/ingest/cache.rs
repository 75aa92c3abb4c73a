//! Columnar binary corpus cache.
//!
//! Layout (little endian): the 8-byte magic `QRCORPUS`, a `u32` format
//! version, then a sequence of named columns. Each column is
//! `name_len: u8, name, dtype: u8, len: u64, payload`. Optional integers use
//! `i64::MIN` as the absent marker; timestamps are epoch milliseconds.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use chrono::{DateTime, Utc};

use super::{AnswerPost, Corpus, QuestionPost};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"QRCORPUS";
pub const CACHE_VERSION: u32 = 1;
const KIND: &str = "corpus cache";
const NONE: i64 = i64::MIN;

#[repr(u8)]
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Dtype {
    I64 = 0,
    U32 = 1,
    U8 = 2,
    Str = 3,
}

struct ColumnWriter<W: Write>(W);

impl<W: Write> ColumnWriter<W> {
    fn header(&mut self, name: &str, dtype: Dtype, len: usize) -> Result<()> {
        self.0.write_u8(name.len() as u8)?;
        self.0.write_all(name.as_bytes())?;
        self.0.write_u8(dtype as u8)?;
        self.0.write_u64::<LE>(len as u64)?;
        Ok(())
    }

    fn i64s(&mut self, name: &str, values: impl ExactSizeIterator<Item = i64>) -> Result<()> {
        self.header(name, Dtype::I64, values.len())?;
        for v in values {
            self.0.write_i64::<LE>(v)?;
        }
        Ok(())
    }

    fn u32s(&mut self, name: &str, values: &[u32]) -> Result<()> {
        self.header(name, Dtype::U32, values.len())?;
        for &v in values {
            self.0.write_u32::<LE>(v)?;
        }
        Ok(())
    }

    fn u8s(&mut self, name: &str, values: &[u8]) -> Result<()> {
        self.header(name, Dtype::U8, values.len())?;
        self.0.write_all(values)?;
        Ok(())
    }

    fn strs<'a>(&mut self, name: &str, values: impl ExactSizeIterator<Item = &'a str>) -> Result<()> {
        self.header(name, Dtype::Str, values.len())?;
        for s in values {
            self.0.write_u32::<LE>(s.len() as u32)?;
            self.0.write_all(s.as_bytes())?;
        }
        Ok(())
    }
}

struct ColumnReader<R: Read>(R);

impl<R: Read> ColumnReader<R> {
    fn header(&mut self, expected: &str, dtype: Dtype) -> Result<usize> {
        let n = self.0.read_u8()? as usize;
        let mut name = vec![0u8; n];
        self.0.read_exact(&mut name)?;
        if name != expected.as_bytes() {
            return Err(Error::corrupt(
                KIND,
                format!(
                    "expected column `{expected}`, found `{}`",
                    String::from_utf8_lossy(&name)
                ),
            ));
        }
        let code = self.0.read_u8()?;
        if code != dtype as u8 {
            return Err(Error::corrupt(
                KIND,
                format!("column `{expected}` has dtype {code}, expected {:?}", dtype),
            ));
        }
        let len = self.0.read_u64::<LE>()?;
        usize::try_from(len).map_err(|_| Error::corrupt(KIND, "column too long"))
    }

    fn i64s(&mut self, name: &str) -> Result<Vec<i64>> {
        let len = self.header(name, Dtype::I64)?;
        (0..len).map(|_| Ok(self.0.read_i64::<LE>()?)).collect()
    }

    fn u32s(&mut self, name: &str) -> Result<Vec<u32>> {
        let len = self.header(name, Dtype::U32)?;
        (0..len).map(|_| Ok(self.0.read_u32::<LE>()?)).collect()
    }

    fn u8s(&mut self, name: &str) -> Result<Vec<u8>> {
        let len = self.header(name, Dtype::U8)?;
        let mut v = vec![0u8; len];
        self.0.read_exact(&mut v)?;
        Ok(v)
    }

    fn strs(&mut self, name: &str) -> Result<Vec<String>> {
        let len = self.header(name, Dtype::Str)?;
        (0..len)
            .map(|_| {
                let n = self.0.read_u32::<LE>()? as usize;
                let mut b = vec![0u8; n];
                self.0.read_exact(&mut b)?;
                String::from_utf8(b).map_err(|_| Error::corrupt(KIND, "tag name is not UTF-8"))
            })
            .collect()
    }
}

fn opt(v: Option<i64>) -> i64 {
    v.unwrap_or(NONE)
}

fn unopt(v: i64) -> Option<i64> {
    (v != NONE).then_some(v)
}

fn millis(t: &DateTime<Utc>) -> i64 {
    t.timestamp_millis()
}

fn from_millis(ms: i64) -> Result<DateTime<Utc>> {
    DateTime::from_timestamp_millis(ms).ok_or_else(|| Error::corrupt(KIND, "timestamp out of range"))
}

pub fn write_cache_to<W: Write>(corpus: &Corpus, out: W) -> Result<()> {
    let mut w = ColumnWriter(out);
    w.0.write_all(MAGIC)?;
    w.0.write_u32::<LE>(CACHE_VERSION)?;

    let tags = corpus.tags();
    let tag_index: BTreeMap<&str, u32> = tags
        .keys()
        .enumerate()
        .map(|(i, t)| (t.as_str(), i as u32))
        .collect();
    w.strs("tag.name", tags.keys().map(|s| s.as_str()))?;
    w.i64s("tag.created", tags.values().map(|c| opt(c.as_ref().map(millis))))?;

    let qs: Vec<&QuestionPost> = corpus.questions().collect();
    w.i64s("q.id", qs.iter().map(|q| q.id))?;
    w.i64s("q.asker", qs.iter().map(|q| opt(q.asker)))?;
    w.i64s("q.created", qs.iter().map(|q| millis(&q.created_at)))?;
    w.i64s("q.score", qs.iter().map(|q| q.score))?;
    w.i64s("q.accepted", qs.iter().map(|q| opt(q.accepted_answer)))?;
    let counts: Vec<u8> = qs.iter().map(|q| q.tags.len() as u8).collect();
    w.u8s("q.tag_count", &counts)?;
    let refs: Vec<u32> = qs
        .iter()
        .flat_map(|q| q.tags.iter().map(|t| tag_index[t.as_str()]))
        .collect();
    w.u32s("q.tags", &refs)?;

    let ans: Vec<&AnswerPost> = corpus.answers().collect();
    w.i64s("a.id", ans.iter().map(|a| a.id))?;
    w.i64s("a.parent", ans.iter().map(|a| a.parent))?;
    w.i64s("a.answerer", ans.iter().map(|a| opt(a.answerer)))?;
    w.i64s("a.created", ans.iter().map(|a| millis(&a.created_at)))?;
    w.i64s("a.score", ans.iter().map(|a| a.score))?;
    w.0.flush()?;
    Ok(())
}

pub fn read_cache_from<R: Read>(input: R) -> Result<Corpus> {
    let mut r = ColumnReader(input);
    let mut magic = [0u8; 8];
    r.0.read_exact(&mut magic)
        .map_err(|_| Error::corrupt(KIND, "file too short for header"))?;
    if &magic != MAGIC {
        return Err(Error::corrupt(KIND, "bad magic bytes"));
    }
    let version = r.0.read_u32::<LE>()?;
    if version != CACHE_VERSION {
        return Err(Error::VersionMismatch {
            kind: KIND,
            found: version,
            expected: CACHE_VERSION,
        });
    }

    let tag_names = r.strs("tag.name")?;
    let tag_created = r.i64s("tag.created")?;
    if tag_created.len() != tag_names.len() {
        return Err(Error::corrupt(KIND, "tag columns differ in length"));
    }
    let mut tags = Vec::with_capacity(tag_names.len());
    for (name, c) in tag_names.iter().zip(&tag_created) {
        tags.push((name.clone(), unopt(*c).map(from_millis).transpose()?));
    }

    let ids = r.i64s("q.id")?;
    let askers = r.i64s("q.asker")?;
    let created = r.i64s("q.created")?;
    let scores = r.i64s("q.score")?;
    let accepted = r.i64s("q.accepted")?;
    let counts = r.u8s("q.tag_count")?;
    let refs = r.u32s("q.tags")?;
    let n = ids.len();
    if [askers.len(), created.len(), scores.len(), accepted.len(), counts.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::corrupt(KIND, "question columns differ in length"));
    }
    let mut cursor = 0usize;
    let mut questions = Vec::with_capacity(n);
    for i in 0..n {
        let k = counts[i] as usize;
        let slice = refs
            .get(cursor..cursor + k)
            .ok_or_else(|| Error::corrupt(KIND, "tag reference column truncated"))?;
        cursor += k;
        let tags = slice
            .iter()
            .map(|&t| {
                tag_names
                    .get(t as usize)
                    .cloned()
                    .ok_or_else(|| Error::corrupt(KIND, "tag reference out of range"))
            })
            .collect::<Result<Vec<_>>>()?;
        questions.push(QuestionPost {
            id: ids[i],
            asker: unopt(askers[i]),
            created_at: from_millis(created[i])?,
            tags,
            accepted_answer: unopt(accepted[i]),
            score: scores[i],
        });
    }
    if cursor != refs.len() {
        return Err(Error::corrupt(KIND, "unused tag references"));
    }

    let ids = r.i64s("a.id")?;
    let parents = r.i64s("a.parent")?;
    let answerers = r.i64s("a.answerer")?;
    let created = r.i64s("a.created")?;
    let scores = r.i64s("a.score")?;
    let n = ids.len();
    if [parents.len(), answerers.len(), created.len(), scores.len()]
        .iter()
        .any(|&l| l != n)
    {
        return Err(Error::corrupt(KIND, "answer columns differ in length"));
    }
    let mut answers = Vec::with_capacity(n);
    for i in 0..n {
        answers.push(AnswerPost {
            id: ids[i],
            parent: parents[i],
            answerer: unopt(answerers[i]),
            created_at: from_millis(created[i])?,
            score: scores[i],
        });
    }
    Corpus::new(questions, answers, tags)
}

pub fn cache_write(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let f = BufWriter::new(File::create(path)?);
    write_cache_to(corpus, f)
}

pub fn cache_read(path: impl AsRef<Path>) -> Result<Corpus> {
    let f = BufReader::new(File::open(path)?);
    read_cache_from(f)
}
