//! Fixed-size batching of a sample stream.

use alloc::vec::Vec;

pub struct Batches<I> {
    inner: I,
    size: usize,
    drop_last: bool,
}

impl<I: Iterator> Batches<I> {
    /// `size` of 0 is treated as 1.
    pub fn new(inner: I, size: usize, drop_last: bool) -> Self {
        Batches {
            inner,
            size: size.max(1),
            drop_last,
        }
    }
}

impl<I: Iterator> Iterator for Batches<I> {
    type Item = Vec<I::Item>;

    fn next(&mut self) -> Option<Self::Item> {
        let batch: Vec<I::Item> = self.inner.by_ref().take(self.size).collect();
        if batch.is_empty() || (self.drop_last && batch.len() < self.size) {
            None
        } else {
            Some(batch)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn lens(n: u32, size: usize, drop_last: bool) -> Vec<usize> {
        Batches::new(0..n, size, drop_last).map(|b| b.len()).collect()
    }

    #[test]
    fn examples() {
        assert_eq!(lens(51_200, 256, false).len(), 200);
        assert!(lens(51_200, 256, false).iter().all(|&l| l == 256));
        assert_eq!(lens(10, 4, false), [4, 4, 2]);
        assert_eq!(lens(10, 4, true), [4, 4]);
        assert_eq!(lens(0, 4, false), Vec::<usize>::new());
    }

    #[test]
    fn keeps_order() {
        let b: Vec<Vec<u32>> = Batches::new(0..5, 2, false).collect();
        assert_eq!(b, [vec![0, 1], vec![2, 3], vec![4]]);
    }
}
