use crate::data::Dataset;
use crate::error::Result;
use crate::network::Network;
use crate::tensor::Real;

/// Percentage of rows whose label is not among the `k` largest logits.
/// A label ties into the top `k` when fewer than `k` logits are strictly larger.
pub fn topk_error(logits: &[f64], classes: usize, labels: &[usize], k: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let wrong = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| {
            let row = &logits[i * classes..(i + 1) * classes];
            row.iter().filter(|&&v| v > row[y]).count() >= k
        })
        .count();
    100.0 * wrong as f64 / labels.len() as f64
}

/// Eval-mode logits for the whole dataset, batch by batch.
pub fn predict<T: Real>(net: &mut Network<T>, ds: &Dataset, batch_size: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(ds.len() * net.spec().num_classes);
    let idx: Vec<usize> = (0..ds.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = ds.batch(chunk)?;
        let logits = net.forward(&x.cast(), false)?;
        out.extend(logits.data().iter().map(|v| v.as_f64()));
    }
    Ok(out)
}

/// Top-1 error percentage in eval mode.
pub fn evaluate<T: Real>(net: &mut Network<T>, ds: &Dataset, batch_size: usize) -> Result<f64> {
    evaluate_topk(net, ds, batch_size, 1)
}

pub fn evaluate_topk<T: Real>(
    net: &mut Network<T>,
    ds: &Dataset,
    batch_size: usize,
    k: usize,
) -> Result<f64> {
    let logits = predict(net, ds, batch_size)?;
    Ok(topk_error(&logits, net.spec().num_classes, &ds.labels, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_prediction_on_balanced_set() {
        let classes = 10;
        let labels: Vec<usize> = (0..100).map(|i| i % classes).collect();
        let mut logits = vec![0.0; 100 * classes];
        for row in logits.chunks_mut(classes) {
            row[0] = 1.0;
        }
        assert_eq!(topk_error(&logits, classes, &labels, 1), 90.0);
    }

    #[test]
    fn memorized_labels_have_zero_error() {
        let labels = vec![2, 0, 1];
        let mut logits = vec![0.0; 9];
        for (i, &y) in labels.iter().enumerate() {
            logits[i * 3 + y] = 5.0;
        }
        assert_eq!(topk_error(&logits, 3, &labels, 1), 0.0);
    }

    #[test]
    fn top5_of_random_logits_is_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = 10_000;
        let logits: Vec<f64> = (0..n * 10).map(|_| rng.random::<f64>()).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..10)).collect();
        let e = topk_error(&logits, 10, &labels, 5);
        assert!((e - 50.0).abs() < 3.0, "{e}");
    }
}
