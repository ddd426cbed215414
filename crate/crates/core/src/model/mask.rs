use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which positions a query may attend to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttentionMode {
    Causal,
    PrefixBidirectional { prefix_len: usize },
    FullBidirectional,
}

impl std::fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            AttentionMode::Causal => write!(f, "causal"),
            AttentionMode::PrefixBidirectional { prefix_len } => {
                write!(f, "prefix_bidirectional({prefix_len})")
            }
            AttentionMode::FullBidirectional => write!(f, "full_bidirectional"),
        }
    }
}

/// Square boolean matrix; `allows(i, j)` is true iff position `i` may attend to `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionMask {
    seq_len: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn build(mode: AttentionMode, seq_len: usize) -> Result<Self> {
        if seq_len == 0 {
            return Err(Error::InvalidMask("seq_len must be >= 1".into()));
        }
        let prefix = match mode {
            AttentionMode::PrefixBidirectional { prefix_len } if prefix_len > seq_len => {
                return Err(Error::InvalidMask(format!(
                    "prefix_len {prefix_len} exceeds seq_len {seq_len}"
                )));
            }
            AttentionMode::PrefixBidirectional { prefix_len } => prefix_len,
            AttentionMode::Causal => 0,
            AttentionMode::FullBidirectional => seq_len,
        };
        let mut allowed = Vec::with_capacity(seq_len * seq_len);
        for i in 0..seq_len {
            for j in 0..seq_len {
                allowed.push(j < prefix || j <= i);
            }
        }
        Ok(AttentionMask { seq_len, allowed })
    }

    /// Arbitrary mask from row-major booleans.
    pub fn from_rows(seq_len: usize, allowed: Vec<bool>) -> Result<Self> {
        if seq_len == 0 || allowed.len() != seq_len * seq_len {
            return Err(Error::InvalidMask(format!(
                "expected {0}x{0} entries, got {1}",
                seq_len,
                allowed.len()
            )));
        }
        Ok(AttentionMask { seq_len, allowed })
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn allows(&self, i: usize, j: usize) -> bool {
        self.allowed[i * self.seq_len + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.allowed[i * self.seq_len..(i + 1) * self.seq_len]
    }

    /// Rows rendered as strings of 0/1, handy in tests and diagnostics.
    pub fn to_strings(&self) -> Vec<String> {
        (0..self.seq_len)
            .map(|i| {
                self.row(i)
                    .iter()
                    .map(|&a| if a { '1' } else { '0' })
                    .collect()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn causal_is_lower_triangular() {
        let m = AttentionMask::build(AttentionMode::Causal, 3).unwrap();
        assert_eq!(m.to_strings(), ["100", "110", "111"]);
    }

    #[test]
    fn full_is_all_ones() {
        let m = AttentionMask::build(AttentionMode::FullBidirectional, 3).unwrap();
        assert_eq!(m.to_strings(), ["111", "111", "111"]);
    }

    #[test]
    fn prefix_unions_prefix_columns_with_lower_triangle() {
        let m =
            AttentionMask::build(AttentionMode::PrefixBidirectional { prefix_len: 2 }, 3).unwrap();
        assert_eq!(m.to_strings(), ["110", "110", "111"]);
    }

    #[test]
    fn prefix_longer_than_sequence_is_rejected() {
        let err = AttentionMask::build(AttentionMode::PrefixBidirectional { prefix_len: 4 }, 3);
        assert!(err.is_err());
        assert!(AttentionMask::build(AttentionMode::Causal, 0).is_err());
    }
}
