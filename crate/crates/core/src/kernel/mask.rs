use crate::error::{Error, Result};

/// Boolean attention mask over `rows` queries and `cols` keys.
///
/// Stored as the list of allowed key indices per query row, in ascending
/// order; attention iterates exactly these keys, so disallowed positions
/// never enter the softmax.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    rows: usize,
    cols: usize,
    allowed: Vec<Vec<usize>>,
}

impl AttentionMask {
    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..rows).map(|i| (0..cols).filter(|&j| f(i, j)).collect()).collect();
        Self { rows, cols, allowed }
    }

    /// `allowed(i, j) <=> j <= i + lookahead`; `None` is unbounded (full attention).
    pub fn lookahead(frames: usize, lookahead: Option<usize>) -> Self {
        match lookahead {
            None => Self::from_fn(frames, frames, |_, _| true),
            Some(l) => Self::from_fn(frames, frames, |i, j| j <= i + l),
        }
    }

    pub fn causal(frames: usize) -> Self {
        Self::lookahead(frames, Some(0))
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_allowed(&self, i: usize, j: usize) -> bool {
        self.allowed[i].binary_search(&j).is_ok()
    }

    pub fn allowed_keys(&self, i: usize) -> &[usize] {
        &self.allowed[i]
    }

    pub fn allowed_count(&self) -> usize {
        self.allowed.iter().map(Vec::len).sum()
    }

    /// Fails if any query row has no allowed key.
    pub fn validate(&self) -> Result<()> {
        match self.allowed.iter().position(Vec::is_empty) {
            Some(i) => Err(Error::Mask(format!("query row {i} has no allowed key"))),
            None => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lookahead_one_on_four_frames() {
        let m = AttentionMask::lookahead(4, Some(1));
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.is_allowed(i, j), j <= i + 1, "({i},{j})");
            }
        }
    }

    #[test]
    fn lookahead_zero_is_lower_triangular() {
        let m = AttentionMask::lookahead(5, Some(0));
        assert_eq!(m.allowed_count(), 15);
        assert!(m.is_allowed(3, 3) && !m.is_allowed(3, 4));
    }

    #[test]
    fn unbounded_is_full() {
        assert_eq!(AttentionMask::lookahead(3, None).allowed_count(), 9);
    }

    #[test]
    fn empty_row_fails_validation() {
        let m = AttentionMask::from_fn(2, 2, |i, _| i == 0);
        assert!(matches!(m.validate(), Err(Error::Mask(_))));
    }
}
