//! Attention units checked against straight-line re-implementations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{folded_conv_3x3, pairview_conv, squeeze, stack_pair_view};
use super::*;
use crate::graph::Graph;
use crate::tensor::gradcheck::gradcheck_graph;
use crate::tensor::params::{ParamKind, ParamStore};
use crate::tensor::Tensor;

const B: usize = 2;
const HW: usize = 4;

fn shape(mode: AttentionMode, c: usize, t: usize) -> UnitShape {
    AttentionConfig {
        mode,
        reduction: t,
        fold: FoldRecipe::Cols(4),
        kernels: None,
    }
    .resolve(c)
    .unwrap()
}

struct Fixture {
    store: ParamStore<f64>,
    unit: AttentionUnit,
    x: Tensor<f64>,
    u: Tensor<f64>,
}

fn fixture(mode: AttentionMode, c: usize, t: usize, seed: u64) -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let unit = AttentionUnit::new(&mut store, "attn", shape(mode, c, t), &mut rng);
    // random biases and BN affine so the oracle exercises every term
    for p in store.iter_mut() {
        if matches!(p.kind, ParamKind::Bias | ParamKind::NormShift) {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(-0.5..0.5));
        }
        if p.kind == ParamKind::NormScale {
            p.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = rng.random_range(0.5..1.5));
        }
    }
    let x = Tensor::randn(&[B, HW, HW, c], 1.0, &mut rng);
    let u = Tensor::randn(&[B, HW, HW, c], 1.0, &mut rng);
    Fixture { store, unit, x, u }
}

fn value(store: &ParamStore<f64>, name: &str) -> Vec<f64> {
    store.value(store.find(name).unwrap()).data().to_vec()
}

fn oracle_squeeze(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let s = t.shape();
    let (hw, c) = (s[1] * s[2], s[3]);
    (0..s[0])
        .map(|b| {
            (0..c)
                .map(|ch| {
                    (0..hw)
                        .map(|p| t.data()[(b * hw + p) * c + ch])
                        .sum::<f64>()
                        / hw as f64
                })
                .collect()
        })
        .collect()
}

fn oracle_fc(x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let out = b.len();
    let inp = x.len();
    (0..out)
        .map(|o| b[o] + (0..inp).map(|i| w[o * inp + i] * x[i]).sum::<f64>())
        .collect()
}

fn relu(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| x.max(0.0)).collect()
}

fn sigmoid(v: Vec<f64>) -> Vec<f64> {
    v.into_iter().map(|x| 1.0 / (1.0 + (-x).exp())).collect()
}

#[allow(clippy::too_many_arguments)]
/// Direct sliding-window convolution of a single-channel map with `ε`
/// kernels `[kh, kw, 1, ε]`, stride 1, zero padding, averaged over ε.
fn oracle_conv_mean(
    map: &[f64],
    rows: usize,
    cols: usize,
    k: &[f64],
    kh: usize,
    kw: usize,
    eps: usize,
    pad: usize,
) -> (Vec<f64>, usize, usize) {
    let oh = rows + 2 * pad - kh + 1;
    let ow = cols + 2 * pad - kw + 1;
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for e in 0..eps {
                for i in 0..kh {
                    for j in 0..kw {
                        let (rr, cc) = (
                            (r + i) as isize - pad as isize,
                            (c + j) as isize - pad as isize,
                        );
                        if rr < 0 || cc < 0 || rr >= rows as isize || cc >= cols as isize {
                            continue;
                        }
                        acc += map[rr as usize * cols + cc as usize] * k[(i * kw + j) * eps + e];
                    }
                }
            }
            out[r * ow + c] = acc / eps as f64;
        }
    }
    (out, oh, ow)
}

/// Eval-mode excitation computed without the tape.
fn oracle_excitation(f: &Fixture) -> Vec<f64> {
    let st = &f.store;
    let ur = oracle_squeeze(&f.u);
    let xi = oracle_squeeze(&f.x);
    let sh = f.unit.shape;
    let c = sh.channels;
    let mut out = Vec::new();
    for b in 0..B {
        let s = match sh.mode {
            AttentionMode::None => unreachable!(),
            AttentionMode::Se => {
                let h = relu(oracle_fc(
                    &ur[b],
                    &value(st, "attn.fc1.weight"),
                    &value(st, "attn.fc1.bias"),
                ));
                sigmoid(oracle_fc(
                    &h,
                    &value(st, "attn.fc2.weight"),
                    &value(st, "attn.fc2.bias"),
                ))
            }
            AttentionMode::DoubleFc => {
                let hr = relu(oracle_fc(
                    &ur[b],
                    &value(st, "attn.fc1_residual.weight"),
                    &value(st, "attn.fc1_residual.bias"),
                ));
                let hi = relu(oracle_fc(
                    &xi[b],
                    &value(st, "attn.fc1_identity.weight"),
                    &value(st, "attn.fc1_identity.bias"),
                ));
                let joint: Vec<f64> = hr.into_iter().chain(hi).collect();
                sigmoid(oracle_fc(
                    &joint,
                    &value(st, "attn.fc2.weight"),
                    &value(st, "attn.fc2.bias"),
                ))
            }
            mode => {
                let stacked: Vec<f64> = ur[b].iter().chain(&xi[b]).copied().collect();
                let k = value(st, "attn.kernels");
                let (kh, kw) = sh.kernel_extent().unwrap();
                let (v, _, _) = if mode == AttentionMode::Folded3x3 {
                    let (n, m) = sh.fold.unwrap();
                    // fold by explicit alternating row pairs
                    let mut folded = vec![0.0; 2 * c];
                    for r in 0..n {
                        for col in 0..m {
                            let ch = (r / 2) * m + col;
                            folded[r * m + col] = if r % 2 == 0 { ur[b][ch] } else { xi[b][ch] };
                        }
                    }
                    oracle_conv_mean(&folded, n, m, &k, 3, 3, sh.kernels, 1)
                } else {
                    oracle_conv_mean(&stacked, 2, c, &k, kh, kw, sh.kernels, 0)
                };
                let (g, be) = (value(st, "attn.bn.gamma")[0], value(st, "attn.bn.beta")[0]);
                let (rm, rv) = (
                    value(st, "attn.bn.running_mean")[0],
                    value(st, "attn.bn.running_var")[0],
                );
                let v: Vec<f64> = v
                    .iter()
                    .map(|x| (x - rm) / (rv + 1e-5).sqrt() * g + be)
                    .collect();
                let h = relu(oracle_fc(
                    &v,
                    &value(st, "attn.fc1.weight"),
                    &value(st, "attn.fc1.bias"),
                ));
                sigmoid(oracle_fc(
                    &h,
                    &value(st, "attn.fc2.weight"),
                    &value(st, "attn.fc2.bias"),
                ))
            }
        };
        out.extend(s);
    }
    out
}

fn excitation(f: &mut Fixture, training: bool) -> Vec<f64> {
    let mut g = Graph::new(&mut f.store, training);
    let x = g.input(f.x.clone());
    let u = g.input(f.u.clone());
    let s = f.unit.excite(&mut g, x, u).unwrap().unwrap();
    g.value(s.0).data().to_vec()
}

#[test]
fn every_mode_matches_its_oracle() {
    for mode in AttentionMode::ALL
        .into_iter()
        .filter(|&m| m != AttentionMode::None)
    {
        for (c, t) in [(8, 4), (16, 4), (12, 3)] {
            let mut f = fixture(mode, c, t, 11);
            let got = excitation(&mut f, false);
            let want = oracle_excitation(&f);
            assert_eq!(got.len(), B * c);
            for (a, b) in got.iter().zip(&want) {
                assert!(
                    (a - b).abs() <= 1e-12 * b.abs().max(1.0),
                    "{mode} C={c}: {a} vs {b}"
                );
            }
        }
    }
}

#[test]
fn apply_scales_residual_and_adds_identity() {
    let mut f = fixture(AttentionMode::PairView1x1, 8, 4, 3);
    let s = excitation(&mut f, false);
    let mut g = Graph::new(&mut f.store, false);
    let x = g.input(f.x.clone());
    let u = g.input(f.u.clone());
    let y = f.unit.apply(&mut g, x, u).unwrap();
    let y = g.value(y).data();
    let c = 8;
    for (i, v) in y.iter().enumerate() {
        let b = i / (HW * HW * c);
        let want = s[b * c + i % c] * f.u.data()[i] + f.x.data()[i];
        assert!((v - want).abs() < 1e-12);
    }
}

#[test]
fn mode_none_is_a_plain_sum() {
    let mut f = fixture(AttentionMode::None, 8, 4, 3);
    assert!(f.store.is_empty());
    let mut g = Graph::new(&mut f.store, false);
    let x = g.input(f.x.clone());
    let u = g.input(f.u.clone());
    let y = f.unit.apply(&mut g, x, u).unwrap();
    for ((y, a), b) in g.value(y).data().iter().zip(f.x.data()).zip(f.u.data()) {
        assert_eq!(*y, a + b);
    }
}

#[test]
fn apply_rejects_mismatched_maps() {
    let mut f = fixture(AttentionMode::Se, 8, 4, 3);
    let mut g = Graph::new(&mut f.store, false);
    let x = g.input(Tensor::zeros(&[B, 2, 2, 8]));
    let u = g.input(f.u.clone());
    let err = f.unit.apply(&mut g, x, u).unwrap_err();
    assert!(err.to_string().contains("height"), "{err}");
    let x = g.input(Tensor::zeros(&[B, HW, HW, 6]));
    let u = g.input(Tensor::zeros(&[B, HW, HW, 6]));
    assert!(f.unit.apply(&mut g, x, u).is_err());
}

#[test]
fn zero_parameters_excite_at_one_half() {
    for mode in AttentionMode::ALL
        .into_iter()
        .filter(|&m| m != AttentionMode::None)
    {
        let mut f = fixture(mode, 8, 4, 5);
        for p in f.store.iter_mut().filter(|p| p.trainable()) {
            p.value.data_mut().fill(0.0);
        }
        for training in [false, true] {
            assert!(
                excitation(&mut f, training).iter().all(|&s| s == 0.5),
                "{mode}"
            );
        }
    }
}

fn set(store: &mut ParamStore<f64>, name: &str, values: &[f64]) {
    let id = store.find(name).unwrap();
    store.get_mut(id).value.data_mut().copy_from_slice(values);
}

#[test]
fn double_fc_with_silent_identity_branch_is_se() {
    let (c, t) = (16, 4);
    let mut se = fixture(AttentionMode::Se, c, t, 21);
    let mut dfc = fixture(AttentionMode::DoubleFc, c, t, 22);
    dfc.x = se.x.clone();
    dfc.u = se.u.clone();
    let h = c / t;
    set(
        &mut dfc.store,
        "attn.fc1_residual.weight",
        &value(&se.store, "attn.fc1.weight"),
    );
    set(
        &mut dfc.store,
        "attn.fc1_residual.bias",
        &value(&se.store, "attn.fc1.bias"),
    );
    set(
        &mut dfc.store,
        "attn.fc1_identity.weight",
        &vec![0.0; h * c],
    );
    set(&mut dfc.store, "attn.fc1_identity.bias", &vec![0.0; h]);
    let w2 = value(&se.store, "attn.fc2.weight");
    let mut joint = vec![0.0; c * 2 * h];
    for o in 0..c {
        joint[o * 2 * h..o * 2 * h + h].copy_from_slice(&w2[o * h..(o + 1) * h]);
    }
    set(&mut dfc.store, "attn.fc2.weight", &joint);
    set(
        &mut dfc.store,
        "attn.fc2.bias",
        &value(&se.store, "attn.fc2.bias"),
    );
    let a = excitation(&mut se, false);
    let b = excitation(&mut dfc, false);
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn selector_pair_view_is_se() {
    let (c, t) = (16, 4);
    let mut se = fixture(AttentionMode::Se, c, t, 31);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let mut store = ParamStore::new();
    let cfg = AttentionConfig {
        mode: AttentionMode::PairView2x1,
        reduction: t,
        kernels: Some(1),
        ..Default::default()
    };
    let mut unit = AttentionUnit::new(&mut store, "attn", cfg.resolve(c).unwrap(), &mut rng);
    unit.set_bypass_norm(true);
    let mut pv = Fixture {
        store,
        unit,
        x: se.x.clone(),
        u: se.u.clone(),
    };
    set(&mut pv.store, "attn.kernels", &[1.0, 0.0]);
    for name in ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"] {
        let v = value(&se.store, &format!("attn.{name}"));
        set(&mut pv.store, &format!("attn.{name}"), &v);
    }
    for training in [false, true] {
        let a = excitation(&mut se, training);
        let b = excitation(&mut pv, training);
        assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn convolutions_match_sliding_window_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for instance in 0..50 {
        let c = [4, 6, 8, 12, 16][instance % 5];
        let eps = rng.random_range(1..4);
        let batch = rng.random_range(1..3);
        let mut store = ParamStore::<f64>::new();
        let kinds: [(AttentionMode, usize, usize); 3] = [
            (AttentionMode::PairView2x1, 2, 1),
            (AttentionMode::PairView1x1, 1, 1),
            (AttentionMode::Folded3x3, 3, 3),
        ];
        let (mode, kh, kw) = kinds[instance % 3];
        let k = store.add(
            "k",
            ParamKind::Weight,
            Tensor::randn(&[kh, kw, 1, eps], 1.0, &mut rng),
        );
        let shapes = fold::valid_fold_shapes(c);
        let (n, m) = shapes[rng.random_range(0..shapes.len())];
        let u = Tensor::<f64>::randn(&[batch, 3, 3, c], 1.0, &mut rng);
        let x = Tensor::<f64>::randn(&[batch, 3, 3, c], 1.0, &mut rng);
        let kv = store.value(k).data().to_vec();

        let mut g = Graph::new(&mut store, false);
        let (uv, xv) = (g.input(u.clone()), g.input(x.clone()));
        let us = squeeze(&mut g, uv, Source::Residual).unwrap();
        let xs = squeeze(&mut g, xv, Source::Identity).unwrap();
        let stacked = stack_pair_view(&mut g, &us, &xs).unwrap();
        let out = if mode == AttentionMode::Folded3x3 {
            let folded = ops::fold(&mut g, &stacked, n, m).unwrap();
            folded_conv_3x3(&mut g, &folded, k, None).unwrap()
        } else {
            pairview_conv(&mut g, &stacked, k, None).unwrap()
        };
        let got = g.value(out.var).data().to_vec();

        let (ur, xi) = (oracle_squeeze(&u), oracle_squeeze(&x));
        let per = got.len() / batch;
        for b in 0..batch {
            let stacked: Vec<f64> = ur[b].iter().chain(&xi[b]).copied().collect();
            let want = if mode == AttentionMode::Folded3x3 {
                let folded = fold_values(&stacked, n, m).unwrap();
                oracle_conv_mean(&folded, n, m, &kv, 3, 3, eps, 1).0
            } else {
                oracle_conv_mean(&stacked, 2, c, &kv, kh, kw, eps, 0).0
            };
            assert_eq!(want.len(), per);
            for (a, w) in got[b * per..(b + 1) * per].iter().zip(&want) {
                let rel = (a - w).abs() / w.abs().max(1e-12);
                assert!(
                    rel < 1e-6 || (a - w).abs() < 1e-14,
                    "instance {instance}: {a} vs {w}"
                );
            }
        }
    }
}

#[test]
fn gradients_through_each_mode() {
    for mode in AttentionMode::ALL {
        let f = fixture(mode, 8, 4, 41);
        let mut store = f.store;
        let xid = store.add("input.x", ParamKind::Weight, f.x);
        let uid = store.add("input.u", ParamKind::Weight, f.u);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let weights: Vec<f64> = (0..B * HW * HW * 8)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let unit = f.unit;
        let report = gradcheck_graph(&mut store, |g| {
            let x = g.param(xid);
            let u = g.param(uid);
            let y = unit.apply(g, x, u)?;
            g.tape.weighted_sum(y, weights.clone())
        })
        .unwrap();
        assert!(report.passed(1e-4), "{mode}: {report:?}");
    }
}

#[test]
fn recording_captures_pre_conv_maps() {
    let mut f = fixture(AttentionMode::Folded3x3, 16, 4, 7);
    let mut g = Graph::new(&mut f.store, false).with_recording();
    let x = g.input(f.x.clone());
    let u = g.input(f.u.clone());
    f.unit.apply(&mut g, x, u).unwrap();
    let records = g.take_records();
    assert_eq!(records.len(), 1);
    let map = records[0].map.as_ref().unwrap();
    assert_eq!(map.layout, Layout::Folded { rows: 8, cols: 4 });
    assert_eq!(map.values.len(), B * 32);
    assert_eq!(records[0].excitation.len(), B * 16);
    // row 0 of sample 0 holds the first residual channels
    let ur = oracle_squeeze(&f.u);
    assert!((map.values[0] - ur[0][0]).abs() < 1e-12);
}
