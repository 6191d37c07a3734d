//! Person records → synthetic-language documents.
//!
//! A document is `[CLS] background [SEP] event₁ [SEP] … eventₙ [SEP] [PAD]…`.
//! Every token of one event shares the event's [`TemporalStamp`]; the
//! background sentence, `[CLS]` and `[PAD]` carry the [`NO_TIME`] sentinel.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::synthgen::{attribute_token, Origin, PersonRecord, Sex};

pub const CLS: u32 = 0;
pub const SEP: u32 = 1;
pub const PAD: u32 = 2;
pub const UNK: u32 = 3;
pub const MASK: u32 = 4;
pub const N_SPECIAL: usize = 5;
pub const SPECIAL_TOKENS: [&str; N_SPECIAL] = ["[CLS]", "[SEP]", "[PAD]", "[UNK]", "[MASK]"];

/// Sentinel for "no age / absolute position".
pub const NO_TIME: i32 = -1;
/// Segment carried by the background sentence.
pub const BACKGROUND_SEGMENT: u8 = 0;

pub fn is_special(id: u32) -> bool {
    (id as usize) < N_SPECIAL
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    frequencies: Vec<u64>,
    index: HashMap<String, u32>,
    min_frequency: u64,
}

#[derive(Serialize, Deserialize)]
struct VocabularyFile {
    schema_version: u32,
    min_frequency: u64,
    tokens: Vec<(String, u64)>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenised documents. Specials take ids 0–4,
    /// then tokens by descending frequency, ties broken lexicographically.
    pub fn build<S: AsRef<str>>(corpus: &[Vec<S>], min_frequency: u64) -> Result<Self> {
        if corpus.iter().all(|d| d.is_empty()) {
            return Err(Error::invalid("cannot build a vocabulary from an empty corpus"));
        }
        let mut counts: HashMap<&str, u64> = HashMap::new();
        for doc in corpus {
            for t in doc {
                let t = t.as_ref();
                if !SPECIAL_TOKENS.contains(&t) {
                    *counts.entry(t).or_default() += 1;
                }
            }
        }
        let mut kept: Vec<(&str, u64)> = counts.into_iter().filter(|&(_, c)| c >= min_frequency).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let entries = SPECIAL_TOKENS
            .iter()
            .map(|s| (s.to_string(), 0))
            .chain(kept.into_iter().map(|(t, c)| (t.to_string(), c)));
        Ok(Self::from_entries(entries, min_frequency))
    }

    fn from_entries(entries: impl Iterator<Item = (String, u64)>, min_frequency: u64) -> Self {
        let (tokens, frequencies): (Vec<String>, Vec<u64>) = entries.unzip();
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, frequencies, index, min_frequency }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn min_frequency(&self) -> u64 {
        self.min_frequency
    }

    /// Id of `token`, or `[UNK]`.
    pub fn id(&self, token: &str) -> u32 {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn frequency(&self, id: u32) -> u64 {
        self.frequencies[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<&str> {
        ids.iter().map(|&i| self.token(i)).collect()
    }

    /// Ids of all tokens starting with `prefix`.
    pub fn ids_with_prefix(&self, prefix: &str) -> Vec<u32> {
        (0..self.len() as u32).filter(|&i| self.tokens[i as usize].starts_with(prefix)).collect()
    }

    /// Hex SHA-256 over the tokens in id order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex(&h.finalize())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabularyFile {
            schema_version: 1,
            min_frequency: self.min_frequency,
            tokens: self.tokens.iter().cloned().zip(self.frequencies.iter().copied()).collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| Error::Json { path: path.into(), source: e })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: VocabularyFile = serde_json::from_str(&text).map_err(|e| Error::Json { path: path.into(), source: e })?;
        let specials_ok = file.tokens.len() >= N_SPECIAL
            && file.tokens.iter().zip(SPECIAL_TOKENS).all(|((t, _), s)| t == s);
        if !specials_ok {
            return Err(Error::corrupt(path, "special tokens must occupy ids 0-4"));
        }
        Ok(Self::from_entries(file.tokens.into_iter(), file.min_frequency))
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// The four background tokens of a person.
pub fn background_tokens(p: &PersonRecord) -> [String; 4] {
    let sex = match p.sex {
        Sex::Female => "SEX_FEMALE",
        Sex::Male => "SEX_MALE",
    };
    let origin = match p.origin {
        Origin::Domestic => "ORIGIN_DOMESTIC",
        Origin::Foreign => "ORIGIN_FOREIGN",
    };
    [sex.to_string(), origin.to_string(), format!("BYEAR_{}", p.birth_year), format!("BMONTH_{}", p.birth_month)]
}

/// Tokens of every event sentence, in chronological order.
pub fn event_tokens(p: &PersonRecord) -> Vec<Vec<String>> {
    p.events
        .iter()
        .map(|e| e.attributes.iter().map(|(&a, &v)| attribute_token(a, v)).collect())
        .collect()
}

/// All concept tokens of a person (background first), for vocabulary building.
pub fn corpus_tokens(p: &PersonRecord) -> Vec<String> {
    let mut out: Vec<String> = background_tokens(p).into();
    out.extend(event_tokens(p).into_iter().flatten());
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TemporalStamp {
    /// Day number counted from the origin date (which is day 1), or [`NO_TIME`].
    pub abs_position: i32,
    /// Completed years of age, or [`NO_TIME`].
    pub age: i32,
    pub segment: u8,
}

impl TemporalStamp {
    pub const BACKGROUND: TemporalStamp = TemporalStamp { abs_position: NO_TIME, age: NO_TIME, segment: BACKGROUND_SEGMENT };
    pub const PADDING: TemporalStamp = TemporalStamp { abs_position: NO_TIME, age: NO_TIME, segment: 0 };
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EventSentence {
    pub tokens: Vec<u32>,
    pub stamp: TemporalStamp,
}

/// Structured form of a life-sequence, before layout and padding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Document {
    pub person_id: u64,
    pub background: Vec<u32>,
    pub events: Vec<EventSentence>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSequence {
    pub person_id: u64,
    pub token_ids: Vec<u32>,
    pub abs_position: Vec<i32>,
    pub age: Vec<i32>,
    pub segment: Vec<u8>,
    /// `true` at `[PAD]` positions.
    pub padding_mask: Vec<bool>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn stamp(&self, i: usize) -> TemporalStamp {
        TemporalStamp { abs_position: self.abs_position[i], age: self.age[i], segment: self.segment[i] }
    }

    pub fn n_real(&self) -> usize {
        self.padding_mask.iter().filter(|&&p| !p).count()
    }

    /// Number of event sentences.
    pub fn n_events(&self) -> usize {
        self.token_ids.iter().filter(|&&t| t == SEP).count().saturating_sub(1)
    }

    /// Splits the sequence back into background and event sentences.
    pub fn to_document(&self) -> Document {
        let n = self.n_real();
        let ids = &self.token_ids[..n];
        let first_sep = ids.iter().position(|&t| t == SEP).unwrap_or(n);
        let background = ids[1.min(n)..first_sep].to_vec();
        let mut events = Vec::new();
        let mut start = first_sep + 1;
        while start < n {
            let end = ids[start..].iter().position(|&t| t == SEP).map_or(n, |p| start + p);
            if end > start {
                events.push(EventSentence { tokens: ids[start..end].to_vec(), stamp: self.stamp(start) });
            }
            start = end + 1;
        }
        Document { person_id: self.person_id, background, events }
    }
}

impl Document {
    /// Length in tokens without padding.
    pub fn token_len(&self) -> usize {
        2 + self.background.len() + self.events.iter().map(|e| e.tokens.len() + 1).sum::<usize>()
    }

    /// Number of leading events dropped to fit `max_len`.
    pub fn events_dropped(&self, max_len: usize) -> Result<usize> {
        let fixed = 2 + self.background.len();
        if fixed > max_len {
            return Err(Error::invalid(format!(
                "max_len {max_len} cannot hold [CLS], a {}-token background sentence and [SEP]",
                self.background.len()
            )));
        }
        let mut budget = max_len - fixed;
        let mut kept = 0;
        for e in self.events.iter().rev() {
            let need = e.tokens.len() + 1;
            if need > budget {
                break;
            }
            budget -= need;
            kept += 1;
        }
        Ok(self.events.len() - kept)
    }

    /// Lays the document out to exactly `max_len` tokens, dropping the
    /// earliest events wholesale when it does not fit.
    pub fn layout(&self, max_len: usize) -> Result<EncodedSequence> {
        let skip = self.events_dropped(max_len)?;
        let mut seq = EncodedSequence {
            person_id: self.person_id,
            token_ids: Vec::with_capacity(max_len),
            abs_position: Vec::with_capacity(max_len),
            age: Vec::with_capacity(max_len),
            segment: Vec::with_capacity(max_len),
            padding_mask: Vec::with_capacity(max_len),
        };
        let push = |seq: &mut EncodedSequence, id: u32, s: TemporalStamp, pad: bool| {
            seq.token_ids.push(id);
            seq.abs_position.push(s.abs_position);
            seq.age.push(s.age);
            seq.segment.push(s.segment);
            seq.padding_mask.push(pad);
        };
        push(&mut seq, CLS, TemporalStamp::BACKGROUND, false);
        for &t in &self.background {
            push(&mut seq, t, TemporalStamp::BACKGROUND, false);
        }
        push(&mut seq, SEP, TemporalStamp::BACKGROUND, false);
        for e in &self.events[skip..] {
            for &t in &e.tokens {
                push(&mut seq, t, e.stamp, false);
            }
            push(&mut seq, SEP, e.stamp, false);
        }
        while seq.token_ids.len() < max_len {
            push(&mut seq, PAD, TemporalStamp::PADDING, true);
        }
        Ok(seq)
    }
}

/// Builds the structured document of a person.
pub fn document(record: &PersonRecord, vocab: &Vocabulary, origin_date: NaiveDate) -> Result<Document> {
    let background = background_tokens(record).iter().map(|t| vocab.id(t)).collect();
    let mut events = Vec::with_capacity(record.events.len());
    for (k, (e, toks)) in record.events.iter().zip(event_tokens(record)).enumerate() {
        if e.date < origin_date {
            return Err(Error::EventBeforeOrigin { event: e.date, origin: origin_date });
        }
        let stamp = TemporalStamp {
            abs_position: (e.date - origin_date).num_days() as i32 + 1,
            age: record.age_at(e.date),
            segment: ((k + 1) % 3) as u8,
        };
        events.push(EventSentence { tokens: toks.iter().map(|t| vocab.id(t)).collect(), stamp });
    }
    Ok(Document { person_id: record.person_id, background, events })
}

/// Encodes one person as a fixed-length sequence.
pub fn encode_person(
    record: &PersonRecord,
    vocab: &Vocabulary,
    max_len: usize,
    origin_date: NaiveDate,
) -> Result<EncodedSequence> {
    document(record, vocab, origin_date)?.layout(max_len)
}

/// Per-token counts over all non-`[PAD]` positions.
pub fn count_vector(seq: &EncodedSequence, vocab: &Vocabulary) -> Vec<u32> {
    let mut counts = vec![0u32; vocab.len()];
    for (&t, &pad) in seq.token_ids.iter().zip(&seq.padding_mask) {
        if !pad {
            counts[t as usize] += 1;
        }
    }
    counts
}

/// Token-frequency table over a set of sequences (non-pad positions).
pub fn token_counts(seqs: &[EncodedSequence]) -> BTreeMap<u32, u64> {
    let mut out = BTreeMap::new();
    for s in seqs {
        for (&t, &pad) in s.token_ids.iter().zip(&s.padding_mask) {
            if !pad {
                *out.entry(t).or_default() += 1;
            }
        }
    }
    out
}

const DATASET_MAGIC: &[u8; 8] = b"LSQDATA\0";
pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub max_len: u32,
    pub vocab_hash: String,
}

/// Writes encoded sequences to a binary record file.
pub fn write_dataset(path: &Path, vocab: &Vocabulary, max_len: usize, seqs: &[EncodedSequence]) -> Result<()> {
    let mut buf = Vec::with_capacity(64 + seqs.len() * (8 + max_len * 14));
    buf.extend_from_slice(DATASET_MAGIC);
    buf.extend_from_slice(&DATASET_SCHEMA_VERSION.to_le_bytes());
    buf.extend_from_slice(&(max_len as u32).to_le_bytes());
    buf.extend_from_slice(vocab.hash().as_bytes());
    buf.extend_from_slice(&(seqs.len() as u64).to_le_bytes());
    for s in seqs {
        if s.len() != max_len {
            return Err(Error::invalid(format!("sequence for person {} has length {} != {max_len}", s.person_id, s.len())));
        }
        buf.extend_from_slice(&s.person_id.to_le_bytes());
        for i in 0..max_len {
            buf.extend_from_slice(&s.token_ids[i].to_le_bytes());
            buf.extend_from_slice(&s.abs_position[i].to_le_bytes());
            buf.extend_from_slice(&s.age[i].to_le_bytes());
            buf.push(s.segment[i]);
            buf.push(u8::from(s.padding_mask[i]));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Reads a binary record file written by [`write_dataset`].
pub fn read_dataset(path: &Path) -> Result<(DatasetHeader, Vec<EncodedSequence>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path).and_then(|mut f| f.read_to_end(&mut bytes)).map_err(|e| Error::io(path, e))?;
    let mut cur = Cursor { bytes: &bytes, pos: 0, path };
    if cur.take(8)? != DATASET_MAGIC {
        return Err(Error::corrupt(path, "bad magic bytes"));
    }
    let schema_version = cur.u32()?;
    if schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::corrupt(path, format!("unsupported schema_version {schema_version}")));
    }
    let max_len = cur.u32()?;
    let vocab_hash = String::from_utf8(cur.take(64)?.to_vec()).map_err(|_| Error::corrupt(path, "bad vocab hash"))?;
    let n = cur.u64()? as usize;
    let mut seqs = Vec::with_capacity(n);
    for _ in 0..n {
        let person_id = cur.u64()?;
        let l = max_len as usize;
        let mut s = EncodedSequence {
            person_id,
            token_ids: Vec::with_capacity(l),
            abs_position: Vec::with_capacity(l),
            age: Vec::with_capacity(l),
            segment: Vec::with_capacity(l),
            padding_mask: Vec::with_capacity(l),
        };
        for _ in 0..l {
            s.token_ids.push(cur.u32()?);
            s.abs_position.push(cur.u32()? as i32);
            s.age.push(cur.u32()? as i32);
            let b = cur.take(2)?;
            s.segment.push(b[0]);
            s.padding_mask.push(b[1] != 0);
        }
        seqs.push(s);
    }
    if cur.pos != bytes.len() {
        return Err(Error::corrupt(path, "trailing bytes"));
    }
    Ok((DatasetHeader { schema_version, max_len, vocab_hash }, seqs))
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
    pub path: &'a Path,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::corrupt(self.path, format!("truncated: needed {n} bytes at offset {}", self.pos)));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{Attribute, EventKind, EventRecord};

    fn person(n_events: usize, tokens_per_event: usize) -> PersonRecord {
        let attrs = [Attribute::Income, Attribute::JobType, Attribute::LaborStatus, Attribute::Industry];
        let events = (0..n_events)
            .map(|k| EventRecord {
                date: NaiveDate::from_ymd_opt(2009, 1, 1).unwrap() + chrono::Duration::days(k as i64 * 10),
                kind: EventKind::Labor,
                attributes: attrs[..tokens_per_event].iter().map(|&a| (a, k as u32)).collect(),
            })
            .collect();
        PersonRecord { person_id: 9, sex: Sex::Male, birth_year: 1970, birth_month: 6, origin: Origin::Domestic, events }
    }

    fn vocab_for(p: &PersonRecord) -> Vocabulary {
        Vocabulary::build(&[corpus_tokens(p)], 0).unwrap()
    }

    fn origin() -> NaiveDate {
        NaiveDate::from_ymd_opt(2008, 1, 1).unwrap()
    }

    #[test]
    fn frequency_threshold_maps_rare_tokens_to_unk() {
        let corpus = vec![vec!["A"; 5], vec!["B"; 2]];
        let v = Vocabulary::build(&corpus, 3).unwrap();
        assert_eq!(v.len(), N_SPECIAL + 1);
        assert_eq!(v.id("A"), 5);
        assert_eq!(v.id("B"), UNK);
        let v = Vocabulary::build(&corpus, 0).unwrap();
        assert_eq!(v.len(), N_SPECIAL + 2);
        assert!(Vocabulary::build::<&str>(&[vec![]], 0).is_err());
    }

    #[test]
    fn ids_follow_frequency_then_lexicographic_order() {
        let corpus = vec![vec!["b", "a", "c", "c"]];
        let v = Vocabulary::build(&corpus, 0).unwrap();
        assert_eq!(&v.tokens()[N_SPECIAL..], &["c", "a", "b"]);
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            assert_eq!(v.id(s), i as u32);
        }
    }

    #[test]
    fn absolute_position_counts_days_from_origin() {
        let mut p = person(1, 3);
        p.events[0].date = NaiveDate::from_ymd_opt(2012, 2, 24).unwrap();
        let v = vocab_for(&p);
        let s = encode_person(&p, &v, 16, origin()).unwrap();
        assert_eq!(s.abs_position[6], 1516);
        assert_eq!(s.age[6], 41);
    }

    #[test]
    fn zero_events_gives_background_then_padding() {
        let p = person(0, 3);
        let v = vocab_for(&p);
        let s = encode_person(&p, &v, 16, origin()).unwrap();
        assert_eq!(s.token_ids[0], CLS);
        assert_eq!(s.token_ids[5], SEP);
        assert!(s.token_ids[6..].iter().all(|&t| t == PAD));
        assert_eq!(s.padding_mask.iter().filter(|&&m| m).count(), 10);
        assert!(s.token_ids[1..5].iter().all(|&t| !is_special(t)));
        assert!((0..6).all(|i| s.age[i] == NO_TIME && s.abs_position[i] == NO_TIME));
    }

    #[test]
    fn event_before_origin_is_rejected() {
        let mut p = person(1, 3);
        p.events[0].date = NaiveDate::from_ymd_opt(2007, 12, 31).unwrap();
        let v = vocab_for(&p);
        assert!(matches!(encode_person(&p, &v, 16, origin()), Err(Error::EventBeforeOrigin { .. })));
    }

    #[test]
    fn truncation_keeps_latest_whole_events() {
        let p = person(30, 3);
        let v = vocab_for(&p);
        let s = encode_person(&p, &v, 32, origin()).unwrap();
        // (32 - 6) / 4 = 6 events fit
        assert_eq!(s.n_events(), 6);
        let doc = s.to_document();
        let full = document(&p, &v, origin()).unwrap();
        assert_eq!(doc.events, full.events[24..]);
        assert_eq!(doc.background, full.background);
        assert_eq!(s.token_ids[s.n_real() - 1], SEP);
        assert_eq!(s.n_real(), 30);
    }

    #[test]
    fn stamps_are_shared_within_events_and_segments_cycle() {
        let p = person(7, 4);
        let v = vocab_for(&p);
        let s = encode_person(&p, &v, 64, origin()).unwrap();
        let doc = s.to_document();
        for w in doc.events.windows(3) {
            let segs = [w[0].stamp.segment, w[1].stamp.segment, w[2].stamp.segment];
            assert!(segs[0] != segs[1] && segs[1] != segs[2] && segs[0] != segs[2]);
        }
        // SEP inherits the stamp of the preceding event
        assert_eq!(s.stamp(6), s.stamp(10));
        assert_eq!(s.token_ids[10], SEP);
    }

    #[test]
    fn count_vector_ignores_padding() {
        let p = person(2, 3);
        let v = vocab_for(&p);
        let s = encode_person(&p, &v, 32, origin()).unwrap();
        let c = count_vector(&s, &v);
        assert_eq!(c[PAD as usize], 0);
        assert_eq!(c.iter().sum::<u32>() as usize, s.n_real());
        assert_eq!(c[SEP as usize], 3);
    }

    #[test]
    fn dataset_file_round_trips_and_detects_truncation() {
        let p = person(5, 3);
        let v = vocab_for(&p);
        let s = encode_person(&p, &v, 32, origin()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.bin");
        write_dataset(&path, &v, 32, &[s.clone(), s.clone()]).unwrap();
        let (h, back) = read_dataset(&path).unwrap();
        assert_eq!(h.max_len, 32);
        assert_eq!(h.vocab_hash, v.hash());
        assert_eq!(back, vec![s.clone(), s]);
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_dataset(&path), Err(Error::Corrupt { .. })));
    }

    #[test]
    fn vocabulary_file_round_trips() {
        let p = person(5, 3);
        let v = vocab_for(&p);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let back = Vocabulary::load(&path).unwrap();
        assert_eq!(back, v);
        assert_eq!(back.hash(), v.hash());
    }
}
