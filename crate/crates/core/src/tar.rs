//! POSIX tar header codec.
//!
//! Writing emits ustar headers (`ustar\0` magic, version `00`) with octal
//! numeric fields. Entries whose path exceeds 100 bytes (or whose size does
//! not fit the 11-digit octal field) are preceded by a pax extended header
//! (`typeflag 'x'`) carrying `path` / `size` records. Reading accepts
//! ustar, pax (`x` and `g`), GNU long names (`L`) and old v7 headers, and
//! both octal and base-256 numeric fields.

use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt::Write as _;

pub const BLOCK: usize = 512;
/// Length of the end-of-archive marker (two zero blocks).
pub const TRAILER_LEN: usize = 2 * BLOCK;

const NAME_LEN: usize = 100;
const MAX_OCTAL_SIZE: u64 = 0o77777777777;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TarError {
    #[error("header checksum mismatch (stored {stored}, computed {computed})")]
    Checksum { stored: u64, computed: u64 },
    #[error("malformed numeric field {field}")]
    Numeric { field: &'static str },
    #[error("entry path is not valid UTF-8")]
    PathEncoding,
    #[error("empty entry path")]
    EmptyPath,
    #[error("entry path contains NUL")]
    NulInPath,
    #[error("malformed pax record")]
    Pax,
}

/// Bytes occupied by `size` bytes of entry data once padded to a block.
pub fn padded_len(size: u64) -> u64 {
    size.div_ceil(BLOCK as u64) * BLOCK as u64
}

/// Zero bytes that follow `size` bytes of data.
pub fn padding_for(size: u64) -> usize {
    (padded_len(size) - size) as usize
}

/// Serialized length of one regular-file entry (headers + padded data).
pub fn entry_len(path: &str, size: u64) -> u64 {
    let mut headers = BLOCK as u64;
    if let Some(pax) = pax_body(path, size) {
        headers += BLOCK as u64 + padded_len(pax.len() as u64);
    }
    headers + padded_len(size)
}

/// Entry kinds the reader distinguishes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EntryKind {
    Regular,
    Directory,
    /// Pax extended header for the next entry.
    PaxLocal,
    /// Pax global header.
    PaxGlobal,
    /// GNU long-name entry; its data is the next entry's path.
    GnuLongName,
    Other(u8),
}

impl EntryKind {
    fn from_flag(flag: u8) -> Self {
        match flag {
            b'0' | 0 | b'7' => EntryKind::Regular,
            b'5' => EntryKind::Directory,
            b'x' => EntryKind::PaxLocal,
            b'g' => EntryKind::PaxGlobal,
            b'L' => EntryKind::GnuLongName,
            other => EntryKind::Other(other),
        }
    }
}

/// A decoded header block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Header {
    pub path: String,
    pub size: u64,
    pub kind: EntryKind,
}

pub fn is_zero_block(block: &[u8; BLOCK]) -> bool {
    block.iter().all(|&b| b == 0)
}

fn parse_octal(field: &[u8], name: &'static str) -> Result<u64, TarError> {
    // GNU base-256: high bit of the first byte set.
    if field.first().is_some_and(|b| b & 0x80 != 0) {
        let mut v: u64 = u64::from(field[0] & 0x7f);
        for &b in &field[1..] {
            v = v
                .checked_mul(256)
                .and_then(|x| x.checked_add(u64::from(b)))
                .ok_or(TarError::Numeric { field: name })?;
        }
        return Ok(v);
    }
    let mut v: u64 = 0;
    let mut seen = false;
    for &b in field {
        match b {
            b'0'..=b'7' => {
                seen = true;
                v = v
                    .checked_mul(8)
                    .and_then(|x| x.checked_add(u64::from(b - b'0')))
                    .ok_or(TarError::Numeric { field: name })?;
            }
            b' ' if !seen => {}
            b' ' | 0 => break,
            _ => return Err(TarError::Numeric { field: name }),
        }
    }
    Ok(v)
}

fn cstr(field: &[u8]) -> &[u8] {
    let end = field.iter().position(|&b| b == 0).unwrap_or(field.len());
    &field[..end]
}

fn header_checksums(block: &[u8; BLOCK]) -> (u64, u64) {
    let mut unsigned = 0u64;
    let mut signed = 0i64;
    for (i, &b) in block.iter().enumerate() {
        let b = if (148..156).contains(&i) { b' ' } else { b };
        unsigned += u64::from(b);
        signed += i64::from(b as i8);
    }
    (unsigned, signed as u64)
}

/// Decodes a non-zero header block.
pub fn decode_header(block: &[u8; BLOCK]) -> Result<Header, TarError> {
    let stored = parse_octal(&block[148..156], "chksum")?;
    let (unsigned, signed) = header_checksums(block);
    if stored != unsigned && stored != signed {
        return Err(TarError::Checksum {
            stored,
            computed: unsigned,
        });
    }
    let size = parse_octal(&block[124..136], "size")?;
    let kind = EntryKind::from_flag(block[156]);
    let name = cstr(&block[0..100]);
    let mut path = Vec::with_capacity(256);
    if &block[257..263] == b"ustar\0" || &block[257..263] == b"ustar " {
        let prefix = cstr(&block[345..500]);
        // GNU headers reuse the prefix area for atime/ctime.
        if &block[257..263] == b"ustar\0" && !prefix.is_empty() {
            path.extend_from_slice(prefix);
            path.push(b'/');
        }
    }
    path.extend_from_slice(name);
    let path = String::from_utf8(path).map_err(|_| TarError::PathEncoding)?;
    Ok(Header { path, size, kind })
}

fn put_octal(dst: &mut [u8], value: u64) {
    // width-1 digits, NUL terminated
    let digits = dst.len() - 1;
    let mut s = String::new();
    let _ = write!(s, "{value:0digits$o}");
    dst[..digits].copy_from_slice(&s.as_bytes()[s.len() - digits..]);
    dst[digits] = 0;
}

fn raw_header(name: &[u8], size: u64, flag: u8) -> [u8; BLOCK] {
    let mut h = [0u8; BLOCK];
    h[..name.len()].copy_from_slice(name);
    put_octal(&mut h[100..108], 0o644);
    put_octal(&mut h[108..116], 0);
    put_octal(&mut h[116..124], 0);
    put_octal(&mut h[124..136], size.min(MAX_OCTAL_SIZE));
    put_octal(&mut h[136..148], 0);
    h[156] = flag;
    h[257..263].copy_from_slice(b"ustar\0");
    h[263..265].copy_from_slice(b"00");
    put_octal(&mut h[329..337], 0);
    put_octal(&mut h[337..345], 0);
    let (sum, _) = header_checksums(&h);
    // six octal digits, NUL, space
    let mut s = String::new();
    let _ = write!(s, "{sum:06o}");
    h[148..154].copy_from_slice(s.as_bytes());
    h[154] = 0;
    h[155] = b' ';
    h
}

fn pax_record(out: &mut String, key: &str, value: &str) {
    // "<len> <key>=<value>\n" where <len> counts itself.
    let body = key.len() + value.len() + 3;
    let mut len = body + 1;
    loop {
        let digits = len.to_string().len();
        if body + digits == len {
            break;
        }
        len = body + digits;
    }
    let _ = write!(out, "{len} {key}={value}\n");
}

fn pax_body(path: &str, size: u64) -> Option<String> {
    let long_name = path.len() > NAME_LEN;
    let big = size > MAX_OCTAL_SIZE;
    if !long_name && !big {
        return None;
    }
    let mut body = String::new();
    if long_name {
        pax_record(&mut body, "path", path);
    }
    if big {
        pax_record(&mut body, "size", &size.to_string());
    }
    Some(body)
}

fn truncated_name(path: &str) -> &[u8] {
    let mut end = path.len().min(NAME_LEN);
    while !path.is_char_boundary(end) {
        end -= 1;
    }
    &path.as_bytes()[..end]
}

/// Encodes the header block(s) for a regular file of `size` bytes and
/// appends them to `out`. Data and its padding are the caller's job.
pub fn encode_file_header(path: &str, size: u64, out: &mut Vec<u8>) -> Result<(), TarError> {
    if path.is_empty() {
        return Err(TarError::EmptyPath);
    }
    if path.contains('\0') {
        return Err(TarError::NulInPath);
    }
    if let Some(body) = pax_body(path, size) {
        let mut pax_name = String::from("PaxHeaders.0/");
        let base = path.rsplit('/').next().unwrap_or(path);
        pax_name.push_str(core::str::from_utf8(truncated_name(base)).unwrap_or("entry"));
        out.extend_from_slice(&raw_header(truncated_name(&pax_name), body.len() as u64, b'x'));
        out.extend_from_slice(body.as_bytes());
        out.resize(out.len() + padding_for(body.len() as u64), 0);
    }
    out.extend_from_slice(&raw_header(truncated_name(path), size, b'0'));
    Ok(())
}

/// Overrides parsed from a pax extended header.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PaxOverrides {
    pub path: Option<String>,
    pub size: Option<u64>,
}

impl PaxOverrides {
    pub fn parse(body: &[u8]) -> Result<Self, TarError> {
        let mut out = PaxOverrides::default();
        let mut rest = body;
        while !rest.is_empty() {
            if rest.iter().all(|&b| b == 0) {
                break;
            }
            let sp = rest.iter().position(|&b| b == b' ').ok_or(TarError::Pax)?;
            let len: usize = core::str::from_utf8(&rest[..sp])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(TarError::Pax)?;
            if len <= sp + 1 || len > rest.len() || rest[len - 1] != b'\n' {
                return Err(TarError::Pax);
            }
            let kv = &rest[sp + 1..len - 1];
            let eq = kv.iter().position(|&b| b == b'=').ok_or(TarError::Pax)?;
            let (k, v) = (&kv[..eq], &kv[eq + 1..]);
            match k {
                b"path" => {
                    out.path = Some(String::from_utf8(v.to_vec()).map_err(|_| TarError::PathEncoding)?)
                }
                b"size" => {
                    out.size = Some(
                        core::str::from_utf8(v)
                            .ok()
                            .and_then(|s| s.parse().ok())
                            .ok_or(TarError::Numeric { field: "pax size" })?,
                    )
                }
                _ => {}
            }
            rest = &rest[len..];
        }
        Ok(out)
    }
}

/// Strips the NUL terminator GNU long-name payloads carry.
pub fn gnu_long_name(data: &[u8]) -> Result<String, TarError> {
    String::from_utf8(cstr(data).to_vec()).map_err(|_| TarError::PathEncoding)
}
