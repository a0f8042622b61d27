use std::collections::VecDeque;

use crate::error::{Error, Result};

/// The most recent `capacity` final hidden states, keyed by position.
#[derive(Clone, Debug)]
pub struct HiddenRing {
    capacity: usize,
    d_model: usize,
    entries: VecDeque<(usize, Vec<f64>)>,
}

impl HiddenRing {
    pub fn new(capacity: usize, d_model: usize) -> Self {
        HiddenRing {
            capacity,
            d_model,
            entries: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Appends the state at `position` and returns the evicted position, if
    /// any. Positions must be strictly increasing.
    pub fn push(&mut self, position: usize, hidden: Vec<f64>) -> Result<Option<usize>> {
        if hidden.len() != self.d_model {
            return Err(Error::ShapeMismatch {
                op: "ring_push",
                left: vec![hidden.len()],
                right: vec![self.d_model],
            });
        }
        if let Some(&(last, _)) = self.entries.back() {
            if position <= last {
                return Err(Error::invalid(format!(
                    "ring positions must increase: {position} after {last}"
                )));
            }
        }
        if self.capacity == 0 {
            return Ok(None);
        }
        self.entries.push_back((position, hidden));
        if self.entries.len() > self.capacity {
            return Ok(self.entries.pop_front().map(|(p, _)| p));
        }
        Ok(None)
    }

    pub fn get(&self, position: usize) -> Option<&[f64]> {
        let first = self.entries.front()?.0;
        let idx = position.checked_sub(first)?;
        // Positions are contiguous once the ring is fed one step at a time,
        // but fall back to a search if a caller skipped some.
        match self.entries.get(idx) {
            Some((p, h)) if *p == position => Some(h),
            _ => self
                .entries
                .iter()
                .find(|(p, _)| *p == position)
                .map(|(_, h)| h.as_slice()),
        }
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|(p, _)| *p).collect()
    }

    /// Bytes reserved for the full capacity at compute precision.
    pub fn bytes(&self) -> usize {
        self.capacity * self.d_model * std::mem::size_of::<f64>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn evicts_oldest_beyond_capacity() {
        let mut r = HiddenRing::new(2, 1);
        assert_eq!(r.push(0, vec![0.0]).unwrap(), None);
        assert_eq!(r.push(1, vec![1.0]).unwrap(), None);
        assert_eq!(r.push(2, vec![2.0]).unwrap(), Some(0));
        assert_eq!(r.positions(), vec![1, 2]);
        assert_eq!(r.get(2).unwrap(), &[2.0]);
        assert!(r.get(0).is_none());
        assert!(r.push(2, vec![3.0]).is_err());
        assert!(r.push(3, vec![3.0, 1.0]).is_err());
        assert_eq!(r.bytes(), 16);
    }

    #[test]
    fn lookup_survives_gaps() {
        let mut r = HiddenRing::new(3, 1);
        r.push(1, vec![1.0]).unwrap();
        r.push(5, vec![5.0]).unwrap();
        assert_eq!(r.get(5).unwrap(), &[5.0]);
        assert!(r.get(2).is_none());
    }
}
