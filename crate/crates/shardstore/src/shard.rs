//! Streaming shard IO: records in, POSIX tar out, and back.
//!
//! Readers never seek and hold at most one record in memory. Writers emit
//! uncompressed ustar; readers also accept gzip-compressed shards through
//! [`decompressing`].

use std::collections::HashSet;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use shardstore_core::record::{Grouping, Record, RecordError, RecordGrouper};
use shardstore_core::tar::{self as codec, EntryKind, PaxOverrides, BLOCK};

#[derive(Debug, thiserror::Error)]
pub enum ShardError {
    #[error("I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt shard at byte {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
    #[error(transparent)]
    Record(#[from] RecordError),
    #[error("cannot write record: {0}")]
    Format(String),
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardStats {
    pub name: String,
    pub record_count: u64,
    pub payload_bytes: u64,
    pub serialized_bytes: u64,
}

/// Metadata of one regular-file entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub path: String,
    pub size: u64,
    /// Offset of the entry's first header block (including any pax or GNU
    /// long-name header that belongs to it).
    pub offset: u64,
    /// Offset one past the entry's padded data.
    pub end: u64,
}

fn corrupt(offset: u64, reason: impl Into<String>) -> ShardError {
    ShardError::Corrupt {
        offset,
        reason: reason.into(),
    }
}

/// Low-level entry iterator over a tar byte stream.
pub struct TarStream<R> {
    src: R,
    pos: u64,
    /// Unconsumed data + padding of the current entry.
    pending: u64,
    done: bool,
    allow_missing_trailer: bool,
}

impl<R: Read> TarStream<R> {
    pub fn new(src: R) -> Self {
        TarStream {
            src,
            pos: 0,
            pending: 0,
            done: false,
            allow_missing_trailer: false,
        }
    }

    /// Accept a stream that ends on an entry boundary without the two zero
    /// blocks, as a byte range cut out of a larger archive does.
    pub fn fragment(src: R) -> Self {
        let mut s = TarStream::new(src);
        s.allow_missing_trailer = true;
        s
    }

    pub fn position(&self) -> u64 {
        self.pos
    }

    /// Fills `buf`; Ok(false) on EOF before the first byte.
    fn read_block(&mut self, buf: &mut [u8; BLOCK]) -> Result<bool, ShardError> {
        let mut filled = 0;
        while filled < BLOCK {
            match self.src.read(&mut buf[filled..]) {
                Ok(0) => break,
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        if filled == 0 {
            return Ok(false);
        }
        if filled < BLOCK {
            return Err(corrupt(self.pos, "stream ends inside a header block"));
        }
        self.pos += BLOCK as u64;
        Ok(true)
    }

    fn read_exact_counted(&mut self, buf: &mut [u8]) -> Result<(), ShardError> {
        let at = self.pos;
        self.src.read_exact(buf).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => corrupt(at, "stream ends inside entry data"),
            _ => ShardError::Io(e),
        })?;
        self.pos += buf.len() as u64;
        Ok(())
    }

    fn skip(&mut self, n: u64) -> Result<(), ShardError> {
        let at = self.pos;
        let copied = io::copy(&mut (&mut self.src).take(n), &mut io::sink())?;
        self.pos += copied;
        if copied < n {
            return Err(corrupt(at + copied, "stream ends inside entry data"));
        }
        Ok(())
    }

    /// Payload plus padding of an entry of `size` bytes.
    fn read_body(&mut self, size: u64) -> Result<Vec<u8>, ShardError> {
        let mut data = vec![0u8; size as usize];
        self.read_exact_counted(&mut data)?;
        self.skip(codec::padding_for(size) as u64)?;
        Ok(data)
    }

    /// Advances to the next regular-file entry, skipping whatever is left
    /// of the previous one. Data is then available through
    /// [`TarStream::read_data`] or is skipped on the next call.
    pub fn next_entry(&mut self) -> Result<Option<EntryMeta>, ShardError> {
        if self.done {
            return Ok(None);
        }
        if self.pending > 0 {
            let n = self.pending;
            self.pending = 0;
            self.skip(n)?;
        }
        let mut overrides = PaxOverrides::default();
        let mut long_name: Option<String> = None;
        let mut entry_start: Option<u64> = None;
        let mut block = [0u8; BLOCK];
        loop {
            let at = self.pos;
            if !self.read_block(&mut block)? {
                if self.allow_missing_trailer && entry_start.is_none() {
                    self.done = true;
                    return Ok(None);
                }
                return Err(corrupt(at, "missing end-of-archive marker"));
            }
            if codec::is_zero_block(&block) {
                if entry_start.is_some() {
                    return Err(corrupt(at, "zero block after an extended header"));
                }
                // Second zero block, or EOF, ends the archive. GNU tar pads
                // to a record boundary afterwards; those bytes are ignored.
                let at2 = self.pos;
                match self.read_block(&mut block) {
                    Ok(false) => {}
                    Ok(true) if codec::is_zero_block(&block) => {}
                    Ok(true) => return Err(corrupt(at2, "expected second end-of-archive block")),
                    Err(ShardError::Corrupt { .. }) => {}
                    Err(e) => return Err(e),
                }
                self.done = true;
                return Ok(None);
            }
            let header = codec::decode_header(&block).map_err(|e| corrupt(at, e.to_string()))?;
            entry_start.get_or_insert(at);
            match header.kind {
                EntryKind::PaxLocal => {
                    let body = self.read_body(header.size)?;
                    overrides = PaxOverrides::parse(&body).map_err(|e| corrupt(at, e.to_string()))?;
                }
                EntryKind::GnuLongName => {
                    let body = self.read_body(header.size)?;
                    long_name = Some(codec::gnu_long_name(&body).map_err(|e| corrupt(at, e.to_string()))?);
                }
                EntryKind::PaxGlobal => {
                    self.skip(codec::padded_len(header.size))?;
                    entry_start = None;
                }
                EntryKind::Regular => {
                    let size = overrides.size.unwrap_or(header.size);
                    let path = overrides.path.take().or(long_name.take()).unwrap_or(header.path);
                    let path = path.trim_start_matches("./").to_string();
                    self.pending = codec::padded_len(size);
                    return Ok(Some(EntryMeta {
                        path,
                        size,
                        offset: entry_start.unwrap_or(at),
                        end: self.pos + codec::padded_len(size),
                    }));
                }
                EntryKind::Directory | EntryKind::Other(_) => {
                    // Directories, links, devices: not part of any record.
                    let size = overrides.size.unwrap_or(header.size);
                    let skip = if matches!(header.kind, EntryKind::Directory) { 0 } else { codec::padded_len(size) };
                    self.skip(skip)?;
                    overrides = PaxOverrides::default();
                    long_name = None;
                    entry_start = None;
                }
            }
        }
    }

    /// Reads the data of the entry just returned by `next_entry`.
    pub fn read_data(&mut self, meta: &EntryMeta) -> Result<Vec<u8>, ShardError> {
        if self.pending != codec::padded_len(meta.size) {
            return Err(ShardError::Format("entry data already consumed".into()));
        }
        self.pending = 0;
        self.read_body(meta.size)
    }

    /// Copies the data of the current entry into `out` without buffering it.
    pub fn copy_data(&mut self, meta: &EntryMeta, out: &mut impl Write) -> Result<u64, ShardError> {
        if self.pending != codec::padded_len(meta.size) {
            return Err(ShardError::Format("entry data already consumed".into()));
        }
        self.pending = 0;
        let at = self.pos;
        let n = io::copy(&mut (&mut self.src).take(meta.size), out)?;
        self.pos += n;
        if n < meta.size {
            return Err(corrupt(at + n, "stream ends inside entry data"));
        }
        self.skip(codec::padding_for(meta.size) as u64)?;
        Ok(n)
    }
}

/// Streaming record reader; yields records in archive order.
pub struct ShardReader<R> {
    tar: TarStream<R>,
    grouper: RecordGrouper,
    stashed: Option<EntryMeta>,
    finished: bool,
}

impl<R: Read> ShardReader<R> {
    pub fn new(src: R) -> Self {
        Self::with_grouping(src, Grouping::Strict)
    }

    pub fn with_grouping(src: R, mode: Grouping) -> Self {
        ShardReader {
            tar: TarStream::new(src),
            grouper: RecordGrouper::new(mode),
            stashed: None,
            finished: false,
        }
    }

    /// Reader over a trailer-less byte range of a shard. The range may hold
    /// non-adjacent records sharing a key, so grouping is permissive.
    pub fn fragment(src: R) -> Self {
        ShardReader {
            tar: TarStream::fragment(src),
            grouper: RecordGrouper::new(Grouping::Permissive),
            stashed: None,
            finished: false,
        }
    }

    fn step(&mut self) -> Result<Option<Record>, ShardError> {
        loop {
            let meta = match self.stashed.take() {
                Some(m) => m,
                None => match self.tar.next_entry()? {
                    Some(m) => m,
                    None => break,
                },
            };
            // Hand out the finished record before touching the next one's
            // data, so a later truncation cannot swallow it.
            let key = shardstore_core::record_key(&meta.path)?;
            if self.grouper.current_key().is_some_and(|k| k != key) {
                self.stashed = Some(meta);
                return Ok(self.grouper.finish());
            }
            let data = self.tar.read_data(&meta)?;
            if let Some(rec) = self.grouper.push(&meta.path, data)? {
                return Ok(Some(rec));
            }
        }
        Ok(self.grouper.finish())
    }
}

impl<R: Read> Iterator for ShardReader<R> {
    type Item = Result<Record, ShardError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.finished {
            return None;
        }
        match self.step() {
            Ok(Some(r)) => Some(Ok(r)),
            Ok(None) => {
                self.finished = true;
                None
            }
            Err(e) => {
                self.finished = true;
                Some(Err(e))
            }
        }
    }
}

/// Reads every record of a shard.
pub fn read_shard(src: impl Read) -> Result<Vec<Record>, ShardError> {
    ShardReader::new(src).collect()
}

/// Streams entry metadata, discarding payloads.
pub fn list_shard<R: Read>(src: R) -> impl Iterator<Item = Result<EntryMeta, ShardError>> {
    let mut tar = TarStream::new(src);
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        match tar.next_entry() {
            Ok(Some(m)) => Some(Ok(m)),
            Ok(None) => {
                done = true;
                None
            }
            Err(e) => {
                done = true;
                Some(Err(e))
            }
        }
    })
}

/// Record writer. Each record is checked before any of its bytes are
/// written, so a rejected record leaves the sink at the previous record
/// boundary.
pub struct ShardWriter<W: Write> {
    sink: W,
    stats: ShardStats,
    seen: HashSet<String>,
    scratch: Vec<u8>,
}

impl<W: Write> ShardWriter<W> {
    pub fn new(sink: W) -> Self {
        ShardWriter {
            sink,
            stats: ShardStats::default(),
            seen: HashSet::new(),
            scratch: Vec::with_capacity(2 * BLOCK),
        }
    }

    pub fn named(mut self, name: impl Into<String>) -> Self {
        self.stats.name = name.into();
        self
    }

    pub fn stats(&self) -> &ShardStats {
        &self.stats
    }

    pub fn write_record(&mut self, rec: &Record) -> Result<(), ShardError> {
        if rec.is_empty() {
            return Err(ShardError::Format(format!("record {:?} has no components", rec.key())));
        }
        if self.seen.contains(rec.key()) {
            return Err(ShardError::Format(format!("record {:?} already written to this shard", rec.key())));
        }
        let mut headers = Vec::with_capacity(rec.components().len());
        for (ext, data) in rec.components() {
            let mut h = Vec::new();
            codec::encode_file_header(&rec.entry_name(ext), data.len() as u64, &mut h)
                .map_err(|e| ShardError::Format(e.to_string()))?;
            headers.push(h);
        }
        for ((_, data), header) in rec.components().iter().zip(headers) {
            self.sink.write_all(&header)?;
            self.sink.write_all(data)?;
            let pad = codec::padding_for(data.len() as u64);
            self.scratch.clear();
            self.scratch.resize(pad, 0);
            self.sink.write_all(&self.scratch)?;
            self.stats.serialized_bytes += (header.len() + data.len() + pad) as u64;
            self.stats.payload_bytes += data.len() as u64;
        }
        self.seen.insert(rec.key().to_string());
        self.stats.record_count += 1;
        Ok(())
    }

    /// Writes the end-of-archive marker and flushes.
    pub fn finish(mut self) -> Result<(ShardStats, W), ShardError> {
        self.sink.write_all(&[0u8; codec::TRAILER_LEN])?;
        self.sink.flush()?;
        self.stats.serialized_bytes += codec::TRAILER_LEN as u64;
        Ok((self.stats, self.sink))
    }
}

pub fn write_shard<'a>(records: impl IntoIterator<Item = &'a Record>, sink: impl Write) -> Result<ShardStats, ShardError> {
    let mut w = ShardWriter::new(sink);
    for r in records {
        w.write_record(r)?;
    }
    Ok(w.finish()?.0)
}

/// Serialized size of `rec` as written by [`ShardWriter`].
pub fn serialized_len(rec: &Record) -> u64 {
    rec.components()
        .iter()
        .map(|(ext, d)| codec::entry_len(&rec.entry_name(ext), d.len() as u64))
        .sum()
}

/// Wraps `src` in a gzip decoder when it starts with the gzip magic.
pub fn decompressing<'a, R: Read + Send + 'a>(src: R) -> io::Result<Box<dyn Read + Send + 'a>> {
    let mut buf = BufReader::with_capacity(256 * 1024, src);
    let head = buf.fill_buf()?;
    if head.len() >= 2 && head[0] == 0x1f && head[1] == 0x8b {
        Ok(Box::new(flate2::bufread::MultiGzDecoder::new(buf)))
    } else {
        Ok(Box::new(buf))
    }
}

/// Opens a shard file, transparently decompressing `.tar.gz`.
pub fn open_shard_file(path: &Path) -> io::Result<Box<dyn Read + Send>> {
    decompressing(File::open(path)?)
}
