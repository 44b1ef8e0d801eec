//! Fixtures shared by the benchmarks.

use cmpese::data::{synth_dataset, Split};
use cmpese::{AttentionMode, Network, NetworkSpec, SynthManifest, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor<f32> {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

/// WRN-10-1 on `size`×`size` inputs with two classes.
pub fn tiny_wrn(mode: AttentionMode, size: usize) -> Network<f32> {
    let spec = NetworkSpec::wrn(10, 1, mode)
        .with_classes(2)
        .with_input_size(size);
    Network::build(&spec, 1).expect("tiny WRN builds")
}

/// A normalized synthetic batch of `n` images.
pub fn synthetic_batch(n: usize, size: usize) -> (Tensor<f32>, Vec<usize>) {
    let m = SynthManifest::new(2, n.div_ceil(2), 3).with_image_size(size);
    let raw = synth_dataset(&m, Split::Train);
    let ds = raw.normalize(&cmpese::data::NormalizationKind::Standardize.fit(&raw));
    let idx: Vec<usize> = (0..n).collect();
    ds.batch(&idx).expect("indices in range")
}
