//! Records: the indivisible unit of a sharded dataset.
//!
//! A record is every file that shares a key, where the key is the entry
//! path with everything from the first dot of its final component removed.
//! `train/n01440764_10026.jpg`, `train/n01440764_10026.cls` and
//! `train/n01440764_10026.seg.png` all belong to record
//! `train/n01440764_10026`.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("invalid entry path {0:?}")]
    InvalidPath(String),
    #[error("invalid record key {0:?}")]
    InvalidKey(String),
    #[error("invalid component extension {0:?}")]
    InvalidExtension(String),
    #[error("record {key:?} has more than one {ext:?} component")]
    DuplicateComponent { key: String, ext: String },
    #[error("record {0:?} reappears after other records (entries are not adjacent)")]
    NonAdjacentKey(String),
    #[error("record {0:?} has no components")]
    Empty(String),
}

/// Splits an entry path into `(key, extension)` on the first dot of the
/// final path component. The extension is empty when there is no dot.
pub fn split_entry_name(path: &str) -> Result<(&str, &str), RecordError> {
    let base_start = path.rfind('/').map_or(0, |i| i + 1);
    let base = &path[base_start..];
    let (stem_len, ext) = match base.find('.') {
        Some(dot) => (dot, &base[dot + 1..]),
        None => (base.len(), ""),
    };
    if path.is_empty() || stem_len == 0 {
        return Err(RecordError::InvalidPath(path.to_string()));
    }
    Ok((&path[..base_start + stem_len], ext))
}

/// The record key of an entry path (directory kept, first-dot suffix removed).
pub fn record_key(path: &str) -> Result<&str, RecordError> {
    split_entry_name(path).map(|(key, _)| key)
}

fn validate_key(key: &str) -> Result<(), RecordError> {
    let base = key.rsplit('/').next().unwrap_or(key);
    let bad = key.is_empty()
        || base.is_empty()
        || base.contains('.')
        || key.starts_with('/')
        || key.contains('\0')
        || key.split('/').any(|seg| seg.is_empty() || seg == "..");
    if bad {
        Err(RecordError::InvalidKey(key.to_string()))
    } else {
        Ok(())
    }
}

fn validate_extension(ext: &str) -> Result<(), RecordError> {
    if ext.contains('/') || ext.contains('\0') {
        Err(RecordError::InvalidExtension(ext.to_string()))
    } else {
        Ok(())
    }
}

/// A key plus its extension-tagged components, in caller order.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Record {
    key: String,
    components: Vec<(String, Vec<u8>)>,
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut list = f.debug_map();
        for (ext, data) in &self.components {
            list.entry(ext, &data.len());
        }
        list.finish()?;
        write!(f, " @ {:?}", self.key)
    }
}

impl Record {
    /// An empty record; at least one component must be added before it is
    /// written anywhere.
    pub fn new(key: impl Into<String>) -> Result<Self, RecordError> {
        let key = key.into();
        validate_key(&key)?;
        Ok(Record {
            key,
            components: Vec::new(),
        })
    }

    /// Builder form of [`Record::push`].
    pub fn with(mut self, ext: impl Into<String>, data: impl Into<Vec<u8>>) -> Result<Self, RecordError> {
        self.push(ext, data)?;
        Ok(self)
    }

    pub fn push(&mut self, ext: impl Into<String>, data: impl Into<Vec<u8>>) -> Result<(), RecordError> {
        let ext = ext.into();
        validate_extension(&ext)?;
        if self.components.iter().any(|(e, _)| *e == ext) {
            return Err(RecordError::DuplicateComponent {
                key: self.key.clone(),
                ext,
            });
        }
        self.components.push((ext, data.into()));
        Ok(())
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn components(&self) -> &[(String, Vec<u8>)] {
        &self.components
    }

    pub fn into_components(self) -> Vec<(String, Vec<u8>)> {
        self.components
    }

    pub fn get(&self, ext: &str) -> Option<&[u8]> {
        self.components
            .iter()
            .find(|(e, _)| e == ext)
            .map(|(_, d)| d.as_slice())
    }

    pub fn extensions(&self) -> impl Iterator<Item = &str> {
        self.components.iter().map(|(e, _)| e.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    /// Sum of component lengths.
    pub fn payload_bytes(&self) -> u64 {
        self.components.iter().map(|(_, d)| d.len() as u64).sum()
    }

    /// Entry path for a component: `key.ext`, or just `key` when the
    /// extension is empty.
    pub fn entry_name(&self, ext: &str) -> String {
        entry_name(&self.key, ext)
    }

    /// Same record under a different key.
    pub fn rekeyed(self, key: impl Into<String>) -> Result<Self, RecordError> {
        let key = key.into();
        validate_key(&key)?;
        Ok(Record {
            key,
            components: self.components,
        })
    }
}

pub fn entry_name(key: &str, ext: &str) -> String {
    if ext.is_empty() {
        key.to_string()
    } else {
        let mut s = String::with_capacity(key.len() + 1 + ext.len());
        s.push_str(key);
        s.push('.');
        s.push_str(ext);
        s
    }
}

/// How [`RecordGrouper`] treats a key that comes back after other keys.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Grouping {
    /// Non-adjacent reuse of a key is an error.
    #[default]
    Strict,
    /// Non-adjacent reuse starts a new record with the same key.
    Permissive,
}

/// Incremental grouper: feed entries in archive order, receive each record
/// as soon as the next key starts.
#[derive(Debug, Default)]
pub struct RecordGrouper {
    mode: Grouping,
    current: Option<Record>,
    seen: BTreeSet<String>,
}

impl RecordGrouper {
    pub fn new(mode: Grouping) -> Self {
        RecordGrouper {
            mode,
            current: None,
            seen: BTreeSet::new(),
        }
    }

    /// Adds one entry. Returns the previous record if this entry starts a
    /// new one.
    pub fn push(&mut self, path: &str, data: Vec<u8>) -> Result<Option<Record>, RecordError> {
        let (key, ext) = split_entry_name(path)?;
        if let Some(cur) = self.current.as_mut() {
            if cur.key == key {
                cur.push(ext, data)?;
                return Ok(None);
            }
        }
        if self.mode == Grouping::Strict && self.seen.contains(key) {
            return Err(RecordError::NonAdjacentKey(key.to_string()));
        }
        let mut next = Record::new(key)?;
        next.push(ext, data)?;
        if self.mode == Grouping::Strict {
            self.seen.insert(key.to_string());
        }
        Ok(self.current.replace(next))
    }

    /// Key of the record in progress.
    pub fn current_key(&self) -> Option<&str> {
        self.current.as_ref().map(|r| r.key.as_str())
    }

    /// Flushes the record in progress.
    pub fn finish(&mut self) -> Option<Record> {
        self.current.take()
    }
}

/// Groups `(path, bytes)` pairs into records, preserving order.
pub fn group_into_records<I, P, D>(entries: I, mode: Grouping) -> Groups<I::IntoIter>
where
    I: IntoIterator<Item = (P, D)>,
    P: AsRef<str>,
    D: Into<Vec<u8>>,
{
    Groups {
        inner: entries.into_iter(),
        grouper: RecordGrouper::new(mode),
        done: false,
    }
}

pub struct Groups<I> {
    inner: I,
    grouper: RecordGrouper,
    done: bool,
}

impl<I, P, D> Iterator for Groups<I>
where
    I: Iterator<Item = (P, D)>,
    P: AsRef<str>,
    D: Into<Vec<u8>>,
{
    type Item = Result<Record, RecordError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        for (path, data) in self.inner.by_ref() {
            match self.grouper.push(path.as_ref(), data.into()) {
                Ok(Some(rec)) => return Some(Ok(rec)),
                Ok(None) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        self.done = true;
        self.grouper.finish().map(Ok)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;
    use alloc::format;
    use alloc::vec;

    #[test]
    fn key_examples() {
        assert_eq!(record_key("A.png").unwrap(), "A");
        assert_eq!(record_key("A").unwrap(), "A");
        assert_eq!(record_key("dir/x.seg.png").unwrap(), "dir/x");
        assert_eq!(split_entry_name("dir/x.seg.png").unwrap(), ("dir/x", "seg.png"));
        assert_eq!(record_key("a.b/c.d").unwrap(), "a.b/c");
    }

    #[test]
    fn key_errors() {
        for bad in ["", ".hidden", "dir/", "dir/.png"] {
            assert!(matches!(record_key(bad), Err(RecordError::InvalidPath(_))), "{bad}");
        }
    }

    #[test]
    fn key_is_idempotent() {
        for p in ["A.png", "dir/x.seg.png", "x", "a/b/c.tar.gz"] {
            let k = record_key(p).unwrap();
            assert_eq!(record_key(&format!("{k}.json")).unwrap(), k);
        }
    }

    #[test]
    fn record_invariants() {
        assert!(Record::new("").is_err());
        assert!(Record::new("a.b").is_err());
        assert!(Record::new("/abs").is_err());
        assert!(Record::new("a//b").is_err());
        assert!(Record::new("../x").is_err());
        let r = Record::new("A").unwrap().with("png", vec![1u8]).unwrap();
        assert!(matches!(
            r.clone().with("png", vec![2u8]),
            Err(RecordError::DuplicateComponent { .. })
        ));
        assert_eq!(r.entry_name("png"), "A.png");
        assert_eq!(r.entry_name(""), "A");
    }

    fn two_records() -> Vec<(&'static str, Vec<u8>)> {
        vec![
            ("A.png", vec![1; 3]),
            ("A.cls", vec![2; 1]),
            ("A.json", vec![3; 2]),
            ("B.png", vec![4; 5]),
            ("B.cls", vec![5; 1]),
            ("B.json", vec![6; 2]),
        ]
    }

    #[test]
    fn groups_two_records() {
        let recs: Vec<Record> = group_into_records(two_records(), Grouping::Strict)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0].key(), "A");
        assert_eq!(recs[0].extensions().collect::<Vec<_>>(), ["png", "cls", "json"]);
        assert_eq!(recs[1].key(), "B");
        assert_eq!(recs[1].payload_bytes(), 8);
    }

    #[test]
    fn empty_input() {
        let v: Vec<(&str, Vec<u8>)> = Vec::new();
        assert_eq!(group_into_records(v, Grouping::Strict).count(), 0);
    }

    #[test]
    fn duplicate_extension_is_an_error() {
        let v = vec![("A.png", vec![1u8]), ("A.png", vec![2u8])];
        let out: Vec<_> = group_into_records(v, Grouping::Strict).collect();
        assert!(matches!(out[0], Err(RecordError::DuplicateComponent { .. })));
    }

    #[test]
    fn non_adjacent_reuse() {
        let v = vec![("A.png", vec![1u8]), ("B.png", vec![2u8]), ("A.cls", vec![3u8])];
        let strict: Vec<_> = group_into_records(v.clone(), Grouping::Strict).collect();
        assert!(strict[0].is_ok());
        assert!(matches!(strict[1], Err(RecordError::NonAdjacentKey(ref k)) if k == "A"));
        let loose: Vec<Record> = group_into_records(v, Grouping::Permissive)
            .collect::<Result<_, _>>()
            .unwrap();
        let keys: Vec<_> = loose.iter().map(|r| r.key()).collect();
        assert_eq!(keys, ["A", "B", "A"]);
    }

    /// Brute-force oracle: a BTreeMap group-by over sorted input, written
    /// without the grouper's state machine.
    #[test]
    fn thousand_sorted_files_match_group_by_oracle() {
        let mut rng = crate::Prng::new(11);
        let exts = ["jpg", "cls", "json", "seg.png"];
        let mut files = Vec::new();
        for i in 0..250u32 {
            let key = format!("d{}/k{:08x}", i % 3, rng.next_u64() as u32);
            for e in exts {
                files.push((format!("{key}.{e}"), vec![(i % 251) as u8; (i % 7) as usize]));
            }
        }
        files.sort_by(|a, b| a.0.cmp(&b.0));

        let mut oracle: BTreeMap<String, Vec<(String, Vec<u8>)>> = BTreeMap::new();
        for (path, data) in &files {
            let base_at = path.rfind('/').map_or(0, |i| i + 1);
            let dot = path[base_at..].find('.').map(|d| d + base_at).unwrap_or(path.len());
            let ext = path.get(dot + 1..).unwrap_or("").to_string();
            oracle
                .entry(path[..dot].to_string())
                .or_default()
                .push((ext, data.clone()));
        }

        let got: Vec<Record> = group_into_records(files.iter().map(|(p, d)| (p.as_str(), d.clone())), Grouping::Strict)
            .collect::<Result<_, _>>()
            .unwrap();
        assert_eq!(got.len(), oracle.len());
        for (rec, (key, comps)) in got.iter().zip(oracle.iter()) {
            assert_eq!(rec.key(), key);
            assert_eq!(rec.components(), comps.as_slice());
        }
    }

    proptest::proptest! {
        #[test]
        fn split_then_join_roundtrips(dir in "([a-z]{1,4}/){0,2}", stem in "[a-zA-Z0-9_]{1,8}", ext in "([a-z]{1,3}(\\.[a-z]{1,3})?)?") {
            let path = entry_name(&format!("{dir}{stem}"), &ext);
            let (k, e) = split_entry_name(&path).unwrap();
            proptest::prop_assert_eq!(k, format!("{dir}{stem}"));
            proptest::prop_assert_eq!(e, ext.as_str());
        }
    }
}
