use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A set of line-concept indices stored as a bitmask.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Concepts(pub u32);

impl Concepts {
    pub const CAPACITY: usize = 32;

    pub fn empty() -> Self {
        Concepts(0)
    }

    pub fn from_indices(idx: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut m = 0u32;
        for i in idx {
            if i >= Self::CAPACITY {
                return Err(Error::invalid(format!("concept index {i} out of range")));
            }
            m |= 1 << i;
        }
        Ok(Concepts(m))
    }

    pub fn from_bools(bits: &[bool]) -> Self {
        Concepts(
            bits.iter()
                .enumerate()
                .filter(|(_, &b)| b)
                .fold(0, |m, (i, _)| m | (1 << i)),
        )
    }

    pub fn to_bools(self, n: usize) -> Vec<bool> {
        (0..n).map(|i| self.contains(i)).collect()
    }

    pub fn contains(self, i: usize) -> bool {
        i < Self::CAPACITY && self.0 & (1 << i) != 0
    }

    pub fn insert(&mut self, i: usize) {
        self.0 |= 1 << i;
    }

    pub fn remove(&mut self, i: usize) {
        self.0 &= !(1 << i);
    }

    pub fn toggle(self, i: usize) -> Self {
        Concepts(self.0 ^ (1 << i))
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    pub fn union(self, o: Concepts) -> Concepts {
        Concepts(self.0 | o.0)
    }

    pub fn intersect(self, o: Concepts) -> Concepts {
        Concepts(self.0 & o.0)
    }

    pub fn difference(self, o: Concepts) -> Concepts {
        Concepts(self.0 & !o.0)
    }

    pub fn symmetric_difference(self, o: Concepts) -> Concepts {
        Concepts(self.0 ^ o.0)
    }

    pub fn iter(self) -> impl Iterator<Item = usize> {
        (0..Self::CAPACITY).filter(move |&i| self.contains(i))
    }

    pub fn indices(self) -> Vec<usize> {
        self.iter().collect()
    }
}
