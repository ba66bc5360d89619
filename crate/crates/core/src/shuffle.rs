//! Bounded-buffer record shuffling.
//!
//! The buffer fills to `capacity`, then each pull tops it up by one item
//! from upstream and emits a uniformly chosen buffered item. After upstream
//! ends the remainder drains in random order. The chosen slot is swapped to
//! the front and popped, which makes the emitted sequence identical to
//! [`crate::rng::fisher_yates`] whenever the whole input fits in the buffer.

use alloc::collections::VecDeque;

use crate::rng::Prng;

pub struct Shuffled<I: Iterator> {
    inner: I,
    buf: VecDeque<I::Item>,
    capacity: usize,
    rng: Prng,
    upstream_done: bool,
}

impl<I: Iterator> Shuffled<I> {
    /// `capacity` of 0 is treated as 1 (no shuffling).
    pub fn new(inner: I, capacity: usize, seed: u64) -> Self {
        let capacity = capacity.max(1);
        Shuffled {
            inner,
            buf: VecDeque::with_capacity(capacity.min(1 << 16)),
            capacity,
            rng: Prng::new(seed),
            upstream_done: false,
        }
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }
}

impl<I: Iterator> Iterator for Shuffled<I> {
    type Item = I::Item;

    fn next(&mut self) -> Option<I::Item> {
        while !self.upstream_done && self.buf.len() < self.capacity {
            match self.inner.next() {
                Some(x) => self.buf.push_back(x),
                None => self.upstream_done = true,
            }
        }
        if self.buf.is_empty() {
            return None;
        }
        let j = self.rng.below(self.buf.len() as u64) as usize;
        self.buf.swap(0, j);
        self.buf.pop_front()
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let (lo, hi) = self.inner.size_hint();
        let n = self.buf.len();
        (lo.saturating_add(n), hi.and_then(|h| h.checked_add(n)))
    }
}
