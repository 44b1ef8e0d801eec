//! Index maps between the stacked 2×C pair-view and its n×m fold.
//!
//! Stacked layout is row-major `[û_r(0..C), x̂_id(0..C)]`. Folded row `2i`
//! holds residual channels `i·m .. (i+1)·m`, row `2i+1` the identity
//! channels of the same block.

use crate::attention::Source;
use crate::error::{Error, Result};

fn check(channels: usize, rows: usize, cols: usize) -> Result<()> {
    if cols == 0 || rows == 0 || rows * cols != 2 * channels {
        return Err(Error::Config(format!(
            "fold shape {rows}×{cols} does not hold 2C = {} entries",
            2 * channels
        )));
    }
    if !channels.is_multiple_of(cols) {
        return Err(Error::Config(format!(
            "fold width {cols} does not divide C = {channels}"
        )));
    }
    Ok(())
}

/// Source and channel of folded entry `(row, col)`.
pub fn source_at(row: usize, col: usize, cols: usize) -> (Source, usize) {
    let channel = (row / 2) * cols + col;
    let source = if row.is_multiple_of(2) {
        Source::Residual
    } else {
        Source::Identity
    };
    (source, channel)
}

/// For every folded position (row-major), the stacked index it reads.
pub fn fold_index(channels: usize, rows: usize, cols: usize) -> Result<Vec<usize>> {
    check(channels, rows, cols)?;
    let mut index = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let (source, channel) = source_at(r, c, cols);
            index.push(match source {
                Source::Residual => channel,
                Source::Identity => channels + channel,
            });
        }
    }
    Ok(index)
}

/// For every stacked position, the folded index it reads.
pub fn unfold_index(channels: usize, rows: usize, cols: usize) -> Result<Vec<usize>> {
    let forward = fold_index(channels, rows, cols)?;
    let mut inverse = vec![0; forward.len()];
    for (folded, &stacked) in forward.iter().enumerate() {
        inverse[stacked] = folded;
    }
    Ok(inverse)
}

pub fn fold_values<T: Copy>(stacked: &[T], rows: usize, cols: usize) -> Result<Vec<T>> {
    let channels = stacked.len() / 2;
    if !stacked.len().is_multiple_of(2) {
        return Err(Error::Config(
            "stacked pair-view must have even length".into(),
        ));
    }
    Ok(fold_index(channels, rows, cols)?
        .into_iter()
        .map(|i| stacked[i])
        .collect())
}

pub fn unfold_values<T: Copy>(folded: &[T], rows: usize, cols: usize) -> Result<Vec<T>> {
    let channels = folded.len() / 2;
    Ok(unfold_index(channels, rows, cols)?
        .into_iter()
        .map(|i| folded[i])
        .collect())
}

/// Every `(n, m)` with `m | C` and `n·m = 2C`.
pub fn valid_fold_shapes(channels: usize) -> Vec<(usize, usize)> {
    (1..=channels)
        .filter(|m| channels.is_multiple_of(*m))
        .map(|m| (2 * channels / m, m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn folds_in_alternating_row_pairs() {
        let stacked = [1, 2, 3, 4, 5, 6, 7, 8];
        assert_eq!(
            fold_values(&stacked, 4, 2).unwrap(),
            vec![1, 2, 5, 6, 3, 4, 7, 8]
        );
    }

    #[test]
    fn full_width_fold_is_the_stacked_layout() {
        let stacked: Vec<u32> = (0..12).collect();
        assert_eq!(fold_values(&stacked, 2, 6).unwrap(), stacked);
    }

    #[test]
    fn rejects_bad_shapes() {
        assert!(fold_index(4, 3, 3).is_err());
        // 8×1 covers 2C = 8 but 1×8 would not give m | C for C = 4
        assert!(fold_index(4, 1, 8).is_err());
    }

    #[test]
    fn source_tags_follow_row_parity() {
        let c = 12;
        for (n, m) in valid_fold_shapes(c) {
            let idx = fold_index(c, n, m).unwrap();
            for r in 0..n {
                for col in 0..m {
                    let (src, ch) = source_at(r, col, m);
                    let s = idx[r * m + col];
                    match src {
                        Source::Residual => assert_eq!(s, ch),
                        Source::Identity => assert_eq!(s, c + ch),
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn unfold_inverts_fold(c in 1usize..48, pick in 0usize..64, seed in any::<u64>()) {
            let shapes = valid_fold_shapes(c);
            let (n, m) = shapes[pick % shapes.len()];
            let v: Vec<u64> = (0..2 * c as u64).map(|i| i.wrapping_mul(seed | 1)).collect();
            let folded = fold_values(&v, n, m).unwrap();
            prop_assert_eq!(unfold_values(&folded, n, m).unwrap(), v);
        }
    }
}
