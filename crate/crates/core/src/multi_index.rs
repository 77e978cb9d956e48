//! Sorted multi-indices for derivative coefficients.
//!
//! A multi-index names an iterated partial derivative: `[1, 1, 2]` stands
//! for `d^3 / (dy^1 dy^1 dy^2)`. Components are 1-based axis labels and are
//! kept sorted, so permutations of the same derivative collapse to one key.

use serde::{Serialize, Serializer};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct MultiIndex(Vec<usize>);

/// Serialized as the comma-joined axis list (`"1,1,2"`), so maps keyed by
/// multi-indices stay valid JSON objects.
impl Serialize for MultiIndex {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        serializer.serialize_str(&parts.join(","))
    }
}

impl MultiIndex {
    /// Build from axis labels in any order; the stored form is sorted.
    pub fn new(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        Self(indices)
    }

    /// Derivative order `|alpha|`.
    pub fn order(&self) -> usize {
        self.0.len()
    }

    /// Sorted 1-based axis labels.
    pub fn axes(&self) -> &[usize] {
        &self.0
    }

    /// Multiplicity of each axis, as `(axis, count)` pairs.
    pub fn axis_counts(&self) -> Vec<(usize, usize)> {
        let mut counts: Vec<(usize, usize)> = Vec::new();
        for &a in &self.0 {
            match counts.last_mut() {
                Some((axis, count)) if *axis == a => *count += 1,
                _ => counts.push((a, 1)),
            }
        }
        counts
    }

    /// Largest axis label, or 0 for the empty index.
    pub fn max_axis(&self) -> usize {
        self.0.last().copied().unwrap_or(0)
    }

    /// All sorted multi-indices over `n` axes with order in `1..=max_order`.
    pub fn all_up_to(n: usize, max_order: usize) -> Vec<MultiIndex> {
        let mut out = Vec::new();
        let mut current = Vec::new();
        fn extend(
            n: usize,
            max_order: usize,
            start: usize,
            current: &mut Vec<usize>,
            out: &mut Vec<MultiIndex>,
        ) {
            if !current.is_empty() {
                out.push(MultiIndex(current.clone()));
            }
            if current.len() == max_order {
                return;
            }
            for axis in start..=n {
                current.push(axis);
                extend(n, max_order, axis, current, out);
                current.pop();
            }
        }
        extend(n, max_order, 1, &mut current, &mut out);
        out.sort_by(|a, b| (a.order(), &a.0).cmp(&(b.order(), &b.0)));
        out
    }
}

impl fmt::Display for MultiIndex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(|a| a.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}
