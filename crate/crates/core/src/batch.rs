//! Batches of binary samples: `m` rows of `n` variables each.

use crate::error::DataError;

/// Row-major matrix of binary samples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataBatch {
    n: usize,
    data: Vec<u8>,
}

impl DataBatch {
    pub fn new(n: usize, data: Vec<u8>) -> Result<Self, DataError> {
        if n == 0 || data.is_empty() || data.len() % n != 0 {
            return Err(DataError::Format(format!(
                "batch data length {} is not a positive multiple of n = {n}",
                data.len()
            )));
        }
        for (i, &v) in data.iter().enumerate() {
            if v > 1 {
                return Err(DataError::NonBinary {
                    found: v,
                    row: i / n,
                    col: i % n,
                });
            }
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<u8>]) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::TooFewRows { need: 1, got: 0 });
        }
        let n = rows[0].len();
        for (i, r) in rows.iter().enumerate() {
            if r.len() != n {
                return Err(DataError::Format(format!(
                    "row {i} has {} entries, expected {n}",
                    r.len()
                )));
            }
        }
        Self::new(n, rows.concat())
    }

    /// Number of variables per sample.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Number of samples.
    pub fn len(&self) -> usize {
        self.data.len() / self.n
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.data[i * self.n..(i + 1) * self.n]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.data.chunks_exact(self.n)
    }

    /// New batch holding the given rows of this one, in order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.n);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Self { n: self.n, data }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_non_binary() {
        let err = DataBatch::new(2, vec![0, 1, 2, 0]).unwrap_err();
        assert!(matches!(
            err,
            DataError::NonBinary {
                found: 2,
                row: 1,
                col: 0
            }
        ));
    }

    #[test]
    fn rejects_ragged_rows() {
        assert!(DataBatch::from_rows(&[vec![0, 1], vec![1]]).is_err());
    }

    #[test]
    fn select_preserves_rows() {
        let b = DataBatch::new(2, vec![0, 0, 0, 1, 1, 0, 1, 1]).unwrap();
        let s = b.select(&[3, 1]);
        assert_eq!(s.row(0), &[1, 1]);
        assert_eq!(s.row(1), &[0, 1]);
    }
}
