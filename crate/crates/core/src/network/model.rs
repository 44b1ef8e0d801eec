use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionRecord, AttentionUnit};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::layers::{BatchNorm, Conv2d, Linear};
use crate::network::spec::{
    BlockKind, BlockSpec, NetworkSpec, Shortcut, INPUT_CHANNELS, STEM_CHANNELS,
};
use crate::tensor::checkpoint::WeightFile;
use crate::tensor::params::ParamStore;
use crate::tensor::tape::Var;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
enum Branch {
    Basic {
        conv1: Conv2d,
        bn2: BatchNorm,
        conv2: Conv2d,
    },
    Bottleneck {
        conv1: Conv2d,
        bn2: BatchNorm,
        conv2: Conv2d,
        bn3: BatchNorm,
        conv3: Conv2d,
    },
}

/// Intermediate tensors of one block pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutputs {
    /// Shortcut tensor after any projection; squeezed as the identity signal.
    pub identity: Var,
    /// Residual branch output after its last convolution.
    pub residual: Var,
    pub output: Var,
}

/// Pre-activation residual block with an attention unit on the residual branch.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub spec: BlockSpec,
    bn1: BatchNorm,
    branch: Branch,
    projection: Option<Conv2d>,
    pub attention: AttentionUnit,
}

impl ResidualBlock {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        prefix: &str,
        spec: BlockSpec,
        rng: &mut R,
    ) -> Self {
        let (cin, cout, stride) = (spec.in_channels, spec.out_channels, spec.stride);
        let bn1 = BatchNorm::new(store, &format!("{prefix}.bn1"), cin);
        let branch = match spec.kind {
            BlockKind::Basic => Branch::Basic {
                conv1: Conv2d::new(
                    store,
                    &format!("{prefix}.conv1"),
                    (3, 3),
                    cin,
                    cout,
                    stride,
                    1,
                    rng,
                ),
                bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), cout),
                conv2: Conv2d::new(
                    store,
                    &format!("{prefix}.conv2"),
                    (3, 3),
                    cout,
                    cout,
                    1,
                    1,
                    rng,
                ),
            },
            BlockKind::Bottleneck => {
                let mid = spec.bottleneck_width();
                Branch::Bottleneck {
                    conv1: Conv2d::new(
                        store,
                        &format!("{prefix}.conv1"),
                        (1, 1),
                        cin,
                        mid,
                        1,
                        0,
                        rng,
                    ),
                    bn2: BatchNorm::new(store, &format!("{prefix}.bn2"), mid),
                    conv2: Conv2d::new(
                        store,
                        &format!("{prefix}.conv2"),
                        (3, 3),
                        mid,
                        mid,
                        stride,
                        1,
                        rng,
                    ),
                    bn3: BatchNorm::new(store, &format!("{prefix}.bn3"), mid),
                    conv3: Conv2d::new(
                        store,
                        &format!("{prefix}.conv3"),
                        (1, 1),
                        mid,
                        cout,
                        1,
                        0,
                        rng,
                    ),
                }
            }
        };
        let projection = (spec.shortcut == Shortcut::Projection).then(|| {
            Conv2d::new(
                store,
                &format!("{prefix}.shortcut"),
                (1, 1),
                cin,
                cout,
                stride,
                0,
                rng,
            )
        });
        let attention = AttentionUnit::new(store, &format!("{prefix}.attn"), spec.attention, rng);
        ResidualBlock {
            spec,
            bn1,
            branch,
            projection,
            attention,
        }
    }

    fn bn_relu<T: Real>(g: &mut Graph<'_, T>, bn: &BatchNorm, x: Var) -> Result<Var> {
        let y = bn.forward(g, x)?;
        g.tape.relu(y)
    }

    pub fn forward_parts<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<BlockOutputs> {
        let pre = Self::bn_relu(g, &self.bn1, x)?;
        let identity = match &self.projection {
            Some(p) => p.forward(g, pre)?,
            None => x,
        };
        let residual = match &self.branch {
            Branch::Basic { conv1, bn2, conv2 } => {
                let h = conv1.forward(g, pre)?;
                let h = Self::bn_relu(g, bn2, h)?;
                conv2.forward(g, h)?
            }
            Branch::Bottleneck {
                conv1,
                bn2,
                conv2,
                bn3,
                conv3,
            } => {
                let h = conv1.forward(g, pre)?;
                let h = Self::bn_relu(g, bn2, h)?;
                let h = conv2.forward(g, h)?;
                let h = Self::bn_relu(g, bn3, h)?;
                conv3.forward(g, h)?
            }
        };
        let output = self.attention.apply(g, identity, residual)?;
        Ok(BlockOutputs {
            identity,
            residual,
            output,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_parts(g, x)?.output)
    }

    /// The tensor squeezed as the identity signal: `x` itself for identity
    /// shortcuts, the projected shortcut otherwise.
    pub fn identity_squeeze_source<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        match &self.projection {
            None => Ok(x),
            Some(p) => {
                let pre = Self::bn_relu(g, &self.bn1, x)?;
                p.forward(g, pre)
            }
        }
    }
}

/// Layer structure of a network; parameters live in a separate store.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub stem: Conv2d,
    pub blocks: Vec<ResidualBlock>,
    pub final_norm: BatchNorm,
    pub classifier: Linear,
}

impl Architecture {
    pub fn build<T: Real, R: Rng + ?Sized>(
        spec: &NetworkSpec,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let plan = spec.block_plan()?;
        let stem = Conv2d::new(
            store,
            "stem",
            (3, 3),
            INPUT_CHANNELS,
            STEM_CHANNELS,
            1,
            1,
            rng,
        );
        let blocks = plan
            .into_iter()
            .enumerate()
            .map(|(i, b)| ResidualBlock::new(store, &format!("block{i}"), b, rng))
            .collect();
        let c = spec.final_channels();
        let final_norm = BatchNorm::new(store, "final_bn", c);
        let classifier = Linear::new(store, "fc", c, spec.num_classes, true, rng);
        Ok(Architecture {
            stem,
            blocks,
            final_norm,
            classifier,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let mut h = self.stem.forward(g, x)?;
        for b in &self.blocks {
            h = b.forward(g, h)?;
        }
        let h = self.final_norm.forward(g, h)?;
        let h = g.tape.relu(h)?;
        let h = g.tape.global_avg_pool(h)?;
        self.classifier.forward(g, h)
    }
}

/// A built network: spec, layer structure and parameters.
#[derive(Clone, Debug)]
pub struct Network<T: Real> {
    spec: NetworkSpec,
    arch: Architecture,
    store: ParamStore<T>,
}

impl<T: Real> Network<T> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        Self::build_with_rng(spec, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn build_with_rng<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Architecture::build(spec, &mut store, rng)?;
        Ok(Network {
            spec: spec.clone(),
            arch,
            store,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn arch_mut(&mut self) -> &mut Architecture {
        &mut self.arch
    }

    pub fn blocks(&self) -> &[ResidualBlock] {
        &self.arch.blocks
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    /// Split borrow for building graphs while mutating parameters.
    pub fn parts_mut(&mut self) -> (&Architecture, &mut ParamStore<T>) {
        (&self.arch, &mut self.store)
    }

    pub fn trainable_count(&self) -> usize {
        self.store.trainable_count()
    }

    pub fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = self.spec.input_size;
        let shape = x.shape();
        if shape.len() != 4 {
            return Err(Error::Rank {
                op: "network_forward",
                expected: 4,
                found: shape.len(),
            });
        }
        const AXES: [(&str, usize); 3] = [("height", 1), ("width", 2), ("channels", 3)];
        for (axis, i) in AXES {
            let expected = if i == 3 { INPUT_CHANNELS } else { s };
            if shape[i] != expected {
                return Err(Error::dim("network_forward", axis, expected, shape[i]));
            }
        }
        Ok(())
    }

    /// Logits `[batch, num_classes]`.
    pub fn forward(&mut self, x: &Tensor<T>, training: bool) -> Result<Tensor<T>> {
        Ok(self.forward_recorded(x, training, false)?.0)
    }

    /// Forward pass that also returns one attention record per block when `record` is set.
    pub fn forward_recorded(
        &mut self,
        x: &Tensor<T>,
        training: bool,
        record: bool,
    ) -> Result<(Tensor<T>, Vec<AttentionRecord>)> {
        self.check_input(x)?;
        let mut g = Graph::new(&mut self.store, training);
        if record {
            g = g.with_recording();
        }
        let input = g.input(x.clone());
        let logits = self.arch.forward(&mut g, input)?;
        let out = g.value(logits).clone();
        Ok((out, g.take_records()))
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            spec: self.spec.clone(),
            arch: self.arch.clone(),
            store: self.store.cast(),
        }
    }

    /// All stored tensors (including running statistics) under their names.
    pub fn to_weight_file(&self) -> WeightFile {
        let mut w = WeightFile::new(self.spec.hash());
        for p in self.store.iter() {
            w.push(p.name.clone(), &p.value);
        }
        w
    }

    pub fn load_weight_file(&mut self, file: &WeightFile) -> Result<()> {
        if file.spec_hash != self.spec.hash() {
            return Err(Error::Config(format!(
                "weight file was written for a different network (hash {:016x}, expected {:016x})",
                file.spec_hash,
                self.spec.hash()
            )));
        }
        self.store.load_named(&file.tensors)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::AttentionMode;
    use crate::network::param_count;
    use crate::tensor::params::ParamKind;

    fn tiny(mode: AttentionMode) -> NetworkSpec {
        NetworkSpec::wrn(10, 1, mode)
            .with_input_size(8)
            .with_reduction(4)
    }

    fn input(n: usize, size: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, size, size, 3], 1.0, &mut rng)
    }

    #[test]
    fn logits_have_batch_by_class_shape() {
        for mode in AttentionMode::ALL {
            let mut net = Network::<f32>::build(&tiny(mode), 1).unwrap();
            let y = net.forward(&input(2, 8, 2), false).unwrap();
            assert_eq!(y.shape(), &[2, 10]);
            assert!(y.is_finite());
        }
    }

    #[test]
    fn built_count_matches_analytic_count() {
        for mode in AttentionMode::ALL {
            for spec in [
                tiny(mode),
                NetworkSpec::preact_resnet(29, mode).with_block(BlockKind::Bottleneck),
                NetworkSpec::preact_resnet(20, mode),
                NetworkSpec::wrn(16, 2, mode),
            ] {
                let net = Network::<f32>::build(&spec, 0).unwrap();
                assert_eq!(
                    net.trainable_count(),
                    param_count(&spec).unwrap(),
                    "{mode} {}",
                    spec.name()
                );
            }
        }
    }

    #[test]
    fn zero_input_and_zero_classifier_give_zero_logits() {
        let mut net = Network::<f32>::build(&tiny(AttentionMode::Se), 3).unwrap();
        let fc = net.arch().classifier.clone();
        for id in [Some(fc.weight), fc.bias].into_iter().flatten() {
            net.store_mut().get_mut(id).value.data_mut().fill(0.0);
        }
        let y = net.forward(&Tensor::zeros(&[2, 8, 8, 3]), false).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_and_double_precision_agree() {
        let net32 = Network::<f32>::build(&tiny(AttentionMode::Folded3x3), 4).unwrap();
        let mut net64: Network<f64> = net32.cast();
        let mut net32 = net32;
        let x = input(2, 8, 5);
        let a = net32.forward(&x, false).unwrap();
        let b = net64.forward(&x.cast(), false).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            assert!((*p as f64 - q).abs() < 1e-3, "{p} vs {q}");
        }
    }

    #[test]
    fn one_pixel_changes_the_logits() {
        let mut net = Network::<f64>::build(&tiny(AttentionMode::DoubleFc), 6).unwrap();
        let x = input(1, 8, 7).cast::<f64>();
        let a = net.forward(&x, false).unwrap();
        let mut x2 = x.clone();
        x2.data_mut()[40] += 1.0;
        let b = net.forward(&x2, false).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn wrong_input_extent_names_the_axis() {
        let mut net = Network::<f32>::build(&tiny(AttentionMode::None), 0).unwrap();
        let err = net
            .forward(&Tensor::zeros(&[1, 8, 9, 3]), false)
            .unwrap_err();
        assert!(err.to_string().contains("width"), "{err}");
    }

    #[test]
    fn identity_source_shapes() {
        let spec = NetworkSpec::wrn(16, 8, AttentionMode::None).with_input_size(8);
        let mut net = Network::<f32>::build(&spec, 0).unwrap();
        let (arch, store) = net.parts_mut();
        let mut g = Graph::new(store, false);
        let x = g.input(Tensor::zeros(&[1, 8, 8, 3]));
        let mut h = arch.stem.forward(&mut g, x).unwrap();
        for b in &arch.blocks {
            let src = b.identity_squeeze_source(&mut g, h).unwrap();
            if b.spec.shortcut == Shortcut::Identity {
                assert_eq!(src, h);
            }
            let parts = b.forward_parts(&mut g, h).unwrap();
            assert_eq!(g.value(src).shape(), g.value(parts.residual).shape());
            let in_extent = g.value(h).shape()[1];
            assert_eq!(g.value(src).shape()[1], in_extent / b.spec.stride);
            assert_eq!(g.value(src).shape()[3], b.spec.out_channels);
            h = parts.output;
        }
    }

    #[test]
    fn weight_file_roundtrip_restores_outputs() {
        let spec = tiny(AttentionMode::PairView1x1);
        let mut a = Network::<f32>::build(&spec, 1).unwrap();
        let mut b = Network::<f32>::build(&spec, 2).unwrap();
        b.load_weight_file(&a.to_weight_file()).unwrap();
        let x = input(2, 8, 3);
        assert_eq!(a.forward(&x, false).unwrap(), b.forward(&x, false).unwrap());
        let other = Network::<f32>::build(&tiny(AttentionMode::Se), 1).unwrap();
        assert!(b.load_weight_file(&other.to_weight_file()).is_err());
    }

    #[test]
    fn running_stats_are_not_counted() {
        let net = Network::<f32>::build(&tiny(AttentionMode::Se), 0).unwrap();
        let running: usize = net
            .store()
            .iter()
            .filter(|p| matches!(p.kind, ParamKind::RunningMean | ParamKind::RunningVar))
            .map(|p| p.value.len())
            .sum();
        let total: usize = net.store().iter().map(|p| p.value.len()).sum();
        assert_eq!(net.trainable_count(), total - running);
    }
}
