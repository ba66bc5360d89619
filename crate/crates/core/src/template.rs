//! Output name templates with a single printf-style integer placeholder:
//! `%d`, `%Nd` or `%0Nd`. `%%` is a literal percent sign.

use alloc::string::{String, ToString};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("name template {0:?} must contain exactly one integer placeholder (%d, %06d, ...)")]
pub struct TemplateError(pub String);

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameTemplate {
    head: String,
    tail: String,
    width: usize,
    zero_pad: bool,
}

impl NameTemplate {
    pub fn parse(template: &str) -> Result<Self, TemplateError> {
        let err = || TemplateError(template.to_string());
        let mut head = String::new();
        let mut tail = String::new();
        let mut spec = None;
        let mut chars = template.char_indices().peekable();
        while let Some((_, c)) = chars.next() {
            let out = if spec.is_some() { &mut tail } else { &mut head };
            if c != '%' {
                out.push(c);
                continue;
            }
            if chars.peek().map(|&(_, c)| c) == Some('%') {
                chars.next();
                out.push('%');
                continue;
            }
            if spec.is_some() {
                return Err(err());
            }
            let mut digits = String::new();
            while let Some(&(_, d)) = chars.peek() {
                if d.is_ascii_digit() {
                    digits.push(d);
                    chars.next();
                } else {
                    break;
                }
            }
            match chars.next() {
                Some((_, 'd')) => {}
                _ => return Err(err()),
            }
            let zero_pad = digits.starts_with('0');
            let width = if digits.is_empty() { 0 } else { digits.parse().map_err(|_| err())? };
            spec = Some((width, zero_pad));
        }
        let (width, zero_pad) = spec.ok_or_else(err)?;
        Ok(NameTemplate {
            head,
            tail,
            width,
            zero_pad,
        })
    }

    pub fn format(&self, n: u64) -> String {
        let digits = n.to_string();
        let mut s = self.head.clone();
        let pad = if self.zero_pad { '0' } else { ' ' };
        for _ in digits.len()..self.width {
            s.push(pad);
        }
        s.push_str(&digits);
        s.push_str(&self.tail);
        s
    }

    /// The literal text before the placeholder; useful as a listing prefix.
    pub fn prefix(&self) -> &str {
        &self.head
    }
}

/// `{prefix}-{n:06}.tar`
pub fn shard_file_name(prefix: &str, n: u64) -> String {
    alloc::format!("{prefix}-{n:06}.tar")
}
