use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

/// Sorted, duplicate-free set of indices.
///
/// Used for token sets (rows of an activation tensor) and dimension sets
/// (columns). Construction always normalizes, so iteration order is
/// ascending.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(from = "Vec<usize>", into = "Vec<usize>")]
pub struct IndexSet(Vec<usize>);

/// Token indices into a flattened latent-frame-major token range.
pub type TokenSet = IndexSet;
/// Feature (hidden) dimension indices.
pub type DimSet = IndexSet;

impl IndexSet {
    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn range(start: usize, end: usize) -> Self {
        Self((start..end).collect())
    }

    pub fn from_unsorted(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        Self(indices)
    }

    /// Caller guarantees `indices` is strictly ascending.
    pub(crate) fn from_sorted_unchecked(indices: Vec<usize>) -> Self {
        debug_assert!(indices.windows(2).all(|w| w[0] < w[1]));
        Self(indices)
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.0.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.0.binary_search(&index).is_ok()
    }

    /// One past the largest index, or 0 for the empty set.
    pub fn upper_bound(&self) -> usize {
        self.0.last().map_or(0, |&m| m + 1)
    }

    pub fn union(&self, other: &Self) -> Self {
        let mut out = Vec::with_capacity(self.len() + other.len());
        let (mut a, mut b) = (self.0.iter().peekable(), other.0.iter().peekable());
        loop {
            match (a.peek(), b.peek()) {
                (Some(&&x), Some(&&y)) => {
                    if x < y {
                        out.push(x);
                        a.next();
                    } else if y < x {
                        out.push(y);
                        b.next();
                    } else {
                        out.push(x);
                        a.next();
                        b.next();
                    }
                }
                (Some(&&x), None) => {
                    out.push(x);
                    a.next();
                }
                (None, Some(&&y)) => {
                    out.push(y);
                    b.next();
                }
                (None, None) => break,
            }
        }
        Self(out)
    }

    pub fn difference(&self, other: &Self) -> Self {
        Self(self.iter().filter(|&i| !other.contains(i)).collect())
    }

    pub fn is_subset(&self, other: &Self) -> bool {
        self.iter().all(|i| other.contains(i))
    }

    /// Membership bitmap over `[0, n)`.
    pub fn mask(&self, n: usize) -> Vec<bool> {
        let mut m = vec![false; n];
        for i in self.iter().filter(|&i| i < n) {
            m[i] = true;
        }
        m
    }
}

impl From<Vec<usize>> for IndexSet {
    fn from(v: Vec<usize>) -> Self {
        Self::from_unsorted(v)
    }
}

impl From<IndexSet> for Vec<usize> {
    fn from(s: IndexSet) -> Self {
        s.0
    }
}

impl FromIterator<usize> for IndexSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let set: BTreeSet<usize> = iter.into_iter().collect();
        Self(set.into_iter().collect())
    }
}

impl<'a> IntoIterator for &'a IndexSet {
    type Item = &'a usize;
    type IntoIter = std::slice::Iter<'a, usize>;

    fn into_iter(self) -> Self::IntoIter {
        self.0.iter()
    }
}
