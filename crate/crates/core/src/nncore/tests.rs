use super::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Direct six-loop cross-correlation.
fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Tensor<f64> {
    let (cin, h, wd) = (x.shape[0], x.shape[1], x.shape[2]);
    let (cout, k) = (w.shape[0], w.shape[2]);
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b[co];
                for ci in 0..cin {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * stride + ky) as isize - pad as isize;
                            let xx = (ox * stride + kx) as isize - pad as isize;
                            if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < wd {
                                acc += w.data[((co * cin + ci) * k + ky) * k + kx] * x.data[(ci * h + y as usize) * wd + xx as usize];
                            }
                        }
                    }
                }
                out[(co * ho + oy) * wo + ox] = acc;
            }
        }
    }
    Tensor::new(&[cout, ho, wo], out)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn gemm_matches_naive_in_all_transpose_modes() {
    let mut r = rng(1);
    let (m, k, n) = (5, 7, 3);
    let a = rand_tensor(&[m * k], &mut r).data;
    let b = rand_tensor(&[k * n], &mut r).data;
    for ta in [false, true] {
        for tb in [false, true] {
            let mut c = vec![0.0; m * n];
            f64::gemm(m, k, n, &a, ta, &b, tb, 0.0, &mut c);
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k)
                        .map(|p| {
                            let av = if ta { a[p * m + i] } else { a[i * k + p] };
                            let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                            av * bv
                        })
                        .sum();
                    assert!((c[i * n + j] - want).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv_1x1_identity_weight_is_identity() {
    let mut r = rng(2);
    let x = rand_tensor(&[3, 5, 4], &mut r);
    let mut w = Tensor::zeros(&[3, 3, 1, 1]);
    for c in 0..3 {
        w.data[c * 3 + c] = 1.0;
    }
    let mut t = Tape::new();
    let (xv, wv) = (t.constant(x.clone()), t.constant(w));
    let y = t.conv2d(xv, wv, None, 1, 0).unwrap();
    assert_eq!(t.value(y), &x);
}

#[test]
fn conv_all_ones_interior_is_nine() {
    let mut t = Tape::<f32>::new();
    let x = t.constant(Tensor::new(&[1, 5, 5], vec![1.0; 25]));
    let w = t.constant(Tensor::new(&[1, 1, 3, 3], vec![1.0; 9]));
    let y = t.conv2d(x, w, None, 1, 1).unwrap();
    let v = t.value(y);
    assert_eq!(v.shape, vec![1, 5, 5]);
    for r in 1..4 {
        for c in 1..4 {
            assert_eq!(v.data[r * 5 + c], 9.0);
        }
    }
    assert_eq!(v.data[0], 4.0);
    assert_eq!(v.data[2], 6.0);
}

#[test]
fn conv_random_matches_direct_loop() {
    let mut r = rng(3);
    for (stride, pad, k) in [(1, 1, 3), (2, 1, 3), (1, 0, 1), (2, 0, 3)] {
        let x = rand_tensor(&[2, 7, 6], &mut r);
        let w = rand_tensor(&[3, 2, k, k], &mut r);
        let b = rand_tensor(&[3], &mut r);
        let want = naive_conv(&x, &w, &b.data, stride, pad);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x), t.constant(w), t.constant(b));
        let y = t.conv2d(xv, wv, Some(bv), stride, pad).unwrap();
        assert_eq!(t.value(y).shape, want.shape);
        assert!(max_abs_diff(&t.value(y).data, &want.data) < 1e-6);
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut t = Tape::<f64>::new();
    let x = t.constant(Tensor::zeros(&[2, 4, 4]));
    let w = t.constant(Tensor::zeros(&[1, 3, 3, 3]));
    assert!(matches!(t.conv2d(x, w, None, 1, 1), Err(NnError::Shape { .. })));
}

#[test]
fn conv_gradient_matches_finite_differences() {
    let mut r = rng(4);
    let inputs = vec![rand_tensor(&[2, 5, 6], &mut r), rand_tensor(&[3, 2, 3, 3], &mut r), rand_tensor(&[3], &mut r)];
    for stride in [1, 2] {
        let err = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], Some(v[2]), stride, 1).unwrap();
                project_to_scalar(t, y, 9)
            },
            &inputs,
            1e-6,
        );
        assert!(err < 1e-6, "stride {stride}: {err}");
    }
}

fn store_with<F: FnOnce(&mut ParamStore<f64>, &mut ChaCha8Rng) -> R, R>(seed: u64, f: F) -> (ParamStore<f64>, R) {
    let mut store = ParamStore::new();
    let mut r = rng(seed);
    let p = f(&mut store, &mut r);
    (store, p)
}

fn zero_param(store: &mut ParamStore<f64>, id: Option<ParamId>) {
    if let Some(id) = id {
        store.get_mut(id).data.fill(0.0);
    }
}

#[test]
fn resnet_block_zero_branch_is_activation_of_input() {
    for kind in ["conv", "fc"] {
        let (mut store, p) = store_with(5, |s, r| match kind {
            "conv" => ResBlockParams::conv(s, "blk", 3, 3, r),
            _ => ResBlockParams::fc(s, "blk", 6, 6, r),
        });
        match p {
            ResBlockParams::Conv { b, .. } => {
                zero_param(&mut store, Some(b.w));
                zero_param(&mut store, b.b);
            }
            ResBlockParams::Fc { b, .. } => {
                zero_param(&mut store, Some(b.w));
                zero_param(&mut store, b.b);
            }
        }
        let x = match kind {
            "conv" => rand_tensor(&[3, 4, 4], &mut rng(6)),
            _ => rand_tensor(&[5, 6], &mut rng(6)),
        };
        for act in [Activation::Relu, Activation::Identity] {
            let mut t = Tape::new();
            let bp = t.bind(&store);
            let xv = t.constant(x.clone());
            let y = resnet_block(&mut t, &bp, &p, xv, act).unwrap();
            let want: Vec<f64> = match act {
                Activation::Relu => x.data.iter().map(|v| v.max(0.0)).collect(),
                Activation::Identity => x.data.clone(),
            };
            assert_eq!(t.value(y).data, want, "{kind} {act:?}");
        }
    }
}

#[test]
fn resnet_block_gradients() {
    for kind in ["conv", "conv_proj", "fc", "fc_proj"] {
        let (store, p) = store_with(7, |s, r| match kind {
            "conv" => ResBlockParams::conv(s, "blk", 2, 2, r),
            "conv_proj" => ResBlockParams::conv(s, "blk", 2, 3, r),
            "fc" => ResBlockParams::fc(s, "blk", 4, 4, r),
            _ => ResBlockParams::fc(s, "blk", 4, 5, r),
        });
        let x = if kind.starts_with("conv") {
            rand_tensor(&[2, 4, 5], &mut rng(8))
        } else {
            rand_tensor(&[3, 4], &mut rng(8))
        };
        let mut inputs: Vec<_> = store.iter().map(|(_, t, _)| t.clone()).collect();
        inputs.push(x);
        let err = grad_check(
            |t, v| {
                let bp = BoundParams::contiguous(&v[..v.len() - 1]);
                let y = resnet_block(t, &bp, &p, v[v.len() - 1], Activation::Relu).unwrap();
                project_to_scalar(t, y, 10)
            },
            &inputs,
            1e-6,
        );
        assert!(err < 1e-6, "{kind}: {err}");
    }
}

#[test]
fn fpn_zero_coarse_is_smoothed_fine_projection() {
    let (store, p) = store_with(11, |s, r| FpnParams::new(s, "fpn", 4, 3, 5, r));
    let fine = rand_tensor(&[3, 6, 6], &mut rng(12));
    let mut t = Tape::new();
    let bp = t.bind(&store);
    let c = t.constant(Tensor::zeros(&[4, 3, 3]));
    let f = t.constant(fine.clone());
    let y = fpn_merge(&mut t, &bp, &p, c, f).unwrap();
    let f2 = t.constant(fine);
    let proj = conv_layer(&mut t, &bp, &p.lateral_fine, f2).unwrap();
    let want = conv_layer(&mut t, &bp, &p.smooth, proj).unwrap();
    assert_eq!(t.value(y).shape, vec![5, 6, 6]);
    assert!(max_abs_diff(&t.value(y).data, &t.value(want).data) < 1e-12);
}

#[test]
fn fpn_constant_inputs_give_constant_interior() {
    let (store, p) = store_with(13, |s, r| FpnParams::new(s, "fpn", 2, 2, 3, r));
    let mut t = Tape::new();
    let bp = t.bind(&store);
    let c = t.constant(Tensor::new(&[2, 4, 4], vec![0.7; 32]));
    let f = t.constant(Tensor::new(&[2, 8, 8], vec![-0.3; 128]));
    let y = fpn_merge(&mut t, &bp, &p, c, f).unwrap();
    let v = t.value(y);
    for ch in 0..3 {
        let base = v.data[ch * 64 + 9];
        for r in 1..7 {
            for col in 1..7 {
                assert!((v.data[ch * 64 + r * 8 + col] - base).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn fpn_rejects_bad_ratio_and_checks_gradients() {
    let (store, p) = store_with(14, |s, r| FpnParams::new(s, "fpn", 2, 3, 2, r));
    {
        let mut t = Tape::new();
        let bp = t.bind(&store);
        let c = t.constant(Tensor::zeros(&[2, 3, 3]));
        let f = t.constant(Tensor::zeros(&[3, 8, 8]));
        assert!(fpn_merge(&mut t, &bp, &p, c, f).is_err());
    }
    let mut inputs: Vec<_> = store.iter().map(|(_, t, _)| t.clone()).collect();
    let mut r = rng(15);
    inputs.push(rand_tensor(&[2, 2, 3], &mut r));
    inputs.push(rand_tensor(&[3, 4, 6], &mut r));
    let n = inputs.len();
    let err = grad_check(
        |t, v| {
            let bp = BoundParams::contiguous(&v[..n - 2]);
            let y = fpn_merge(t, &bp, &p, v[n - 2], v[n - 1]).unwrap();
            project_to_scalar(t, y, 16)
        },
        &inputs,
        1e-6,
    );
    assert!(err < 1e-6, "{err}");
}

fn bilinear_at(fmap: &Tensor<f64>, xy: [f64; 2]) -> Vec<f64> {
    let mut t = Tape::new();
    let f = t.constant(fmap.clone());
    let q = t.constant(Tensor::new(&[1, 2], xy.to_vec()));
    let y = t.bilinear(f, q).unwrap();
    t.value(y).data.clone()
}

#[test]
fn bilinear_cell_center_and_two_by_two_mean() {
    let mut r = rng(17);
    let fmap = rand_tensor(&[3, 4, 5], &mut r);
    let v = bilinear_at(&fmap, [3.0, 2.0]);
    for (c, &vc) in v.iter().enumerate() {
        assert_eq!(vc, fmap.data[c * 20 + 2 * 5 + 3]);
    }
    let m = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]);
    assert_eq!(bilinear_at(&m, [0.5, 0.5]), vec![1.5]);
}

#[test]
fn bilinear_zero_padding_outside() {
    let m = Tensor::new(&[1, 2, 2], vec![4.0, 4.0, 4.0, 4.0]);
    assert_eq!(bilinear_at(&m, [-1.5, 0.0]), vec![0.0]);
    assert_eq!(bilinear_at(&m, [1.5, 0.0]), vec![2.0]);
    assert_eq!(bilinear_at(&m, [5.0, 5.0]), vec![0.0]);
}

#[test]
fn bilinear_gradients_for_map_and_coordinates() {
    let mut r = rng(18);
    let fmap = rand_tensor(&[3, 5, 4], &mut r);
    let coords = Tensor::new(&[4, 2], vec![0.3, 0.7, 2.41, 3.13, -0.6, 1.2, 3.5, 4.25]);
    let err = grad_check(
        |t, v| {
            let y = t.bilinear(v[0], v[1]).unwrap();
            project_to_scalar(t, y, 19)
        },
        &[fmap, coords],
        1e-6,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn cross_attention_examples() {
    let (store, p) = store_with(20, |s, r| CrossAttentionParams::new(s, "att", 4, 3, r));
    let mut r = rng(21);
    let q = rand_tensor(&[1, 4], &mut r);
    let refs = rand_tensor(&[1, 4], &mut r);

    let mut t = Tape::new();
    let bp = t.bind(&store);
    let (qv, rv) = (t.constant(q.clone()), t.constant(refs.clone()));
    let a = cross_attention(&mut t, &bp, &p, qv, rv).unwrap();
    assert_eq!(t.value(a.weights).data, vec![1.0]);
    let v = linear_layer(&mut t, &bp, &p.wv, rv).unwrap();
    assert_eq!(t.value(a.out).data, t.value(v).data);

    let twin = Tensor::new(&[2, 4], [refs.data.clone(), refs.data.clone()].concat());
    let tv = t.constant(twin);
    let a = cross_attention(&mut t, &bp, &p, qv, tv).unwrap();
    assert_eq!(t.value(a.weights).data, vec![0.5, 0.5]);

    let empty = t.constant(Tensor::zeros(&[0, 4]));
    assert!(matches!(cross_attention(&mut t, &bp, &p, qv, empty), Err(NnError::EmptyRefs(_))));
}

#[test]
fn cross_attention_matches_explicit_oracle() {
    let (store, p) = store_with(22, |s, r| CrossAttentionParams::new(s, "att", 5, 4, r));
    let mut r = rng(23);
    let (n, k, c, d) = (3, 4, 5, 4);
    let q = rand_tensor(&[n, c], &mut r);
    let refs = rand_tensor(&[n * k, c], &mut r);
    let mut t = Tape::new();
    let bp = t.bind(&store);
    let (qv, rv) = (t.constant(q.clone()), t.constant(refs.clone()));
    let a = cross_attention(&mut t, &bp, &p, qv, rv).unwrap();

    let mv = |w: &Tensor<f64>, x: &[f64]| -> Vec<f64> {
        (0..d).map(|i| (0..c).map(|j| w.data[i * c + j] * x[j]).sum()).collect()
    };
    let (wq, wk, wv) = (store.get(p.wq.w), store.get(p.wk.w), store.get(p.wv.w));
    for i in 0..n {
        let qi = mv(wq, &q.data[i * c..(i + 1) * c]);
        let logits: Vec<f64> = (0..k)
            .map(|j| {
                let kj = mv(wk, &refs.data[(i * k + j) * c..(i * k + j + 1) * c]);
                qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / (d as f64).sqrt()
            })
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
        let mut out = vec![0.0; d];
        for (j, &wj) in w.iter().enumerate() {
            let vj = mv(wv, &refs.data[(i * k + j) * c..(i * k + j + 1) * c]);
            for e in 0..d {
                out[e] += wj * vj[e];
            }
        }
        assert!(max_abs_diff(&t.value(a.weights).data[i * k..(i + 1) * k], &w) < 1e-6);
        assert!(max_abs_diff(&t.value(a.out).data[i * d..(i + 1) * d], &out) < 1e-6);
    }

    let mut inputs: Vec<_> = store.iter().map(|(_, t, _)| t.clone()).collect();
    inputs.push(q);
    inputs.push(refs);
    let m = inputs.len();
    let err = grad_check(
        |t, v| {
            let bp = BoundParams::contiguous(&v[..m - 2]);
            let a = cross_attention(t, &bp, &p, v[m - 2], v[m - 1]).unwrap();
            project_to_scalar(t, a.out, 24)
        },
        &inputs,
        1e-6,
    );
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_and_structural_identities() {
    let mut r = rng(25);
    let x = rand_tensor(&[3, 4], &mut r);
    let mut t = Tape::new();
    let xv = t.constant(x.clone());

    let mut eye = Tensor::zeros(&[4, 4]);
    for i in 0..4 {
        eye.data[i * 5] = 1.0;
    }
    let ev = t.constant(eye);
    let y = t.linear(xv, ev, None).unwrap();
    assert_eq!(t.value(y), &x);

    let pos = t.constant(Tensor::new(&[3], vec![0.5, 2.0, 0.0]));
    let y = t.relu(pos);
    assert_eq!(t.value(y).data, vec![0.5, 2.0, 0.0]);
    let neg = t.constant(Tensor::new(&[2], vec![-0.5, -3.0]));
    let y = t.relu(neg);
    assert_eq!(t.value(y).data, vec![0.0, 0.0]);

    let z = t.constant(Tensor::new(&[1], vec![0.0]));
    let y = t.sigmoid(z);
    assert_eq!(t.value(y).data, vec![0.5]);

    let c = t.constant(Tensor::new(&[1, 3], vec![2.0, 2.0, 2.0]));
    let y = t.softmax_rows(c).unwrap();
    for v in &t.value(y).data {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }

    let a = t.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]));
    let b = t.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]));
    let y = t.concat_cols(&[a, b]).unwrap();
    assert_eq!(t.value(y).data, vec![1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    let y = t.concat_rows(&[a, a]).unwrap();
    assert_eq!(t.value(y).shape, vec![4, 1]);
    let y = t.repeat_rows(a, 3).unwrap();
    assert_eq!(t.value(y).data, vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);

    let u = t.constant(Tensor::new(&[1, 1, 2], vec![1.0, 2.0]));
    let y = t.upsample2x(u).unwrap();
    assert_eq!(t.value(y).data, vec![1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
}

#[test]
fn every_op_passes_gradient_check() {
    let mut r = rng(26);
    type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Tape<f64>, &[Var]) -> Var>);
    let ad = rand_tensor(&[3, 4], &mut r);
    let cases: Vec<Case> = vec![
        ("linear", vec![rand_tensor(&[3, 4], &mut r), rand_tensor(&[2, 4], &mut r), rand_tensor(&[2], &mut r)], Box::new(|t, v| {
            let y = t.linear(v[0], v[1], Some(v[2])).unwrap();
            project_to_scalar(t, y, 1)
        })),
        ("relu", vec![rand_tensor(&[10], &mut r)], Box::new(|t, v| {
            let y = t.relu(v[0]);
            project_to_scalar(t, y, 2)
        })),
        ("sigmoid", vec![rand_tensor(&[10], &mut r)], Box::new(|t, v| {
            let y = t.sigmoid(v[0]);
            project_to_scalar(t, y, 3)
        })),
        ("softmax", vec![rand_tensor(&[3, 5], &mut r)], Box::new(|t, v| {
            let y = t.softmax_rows(v[0]).unwrap();
            project_to_scalar(t, y, 4)
        })),
        ("concat", vec![rand_tensor(&[2, 3], &mut r), rand_tensor(&[2, 2], &mut r)], Box::new(|t, v| {
            let a = t.concat_cols(&[v[0], v[1]]).unwrap();
            let b = t.concat_rows(&[v[0], v[0]]).unwrap();
            let a = project_to_scalar(t, a, 5);
            let b = project_to_scalar(t, b, 6);
            t.add(a, b).unwrap()
        })),
        ("add_scale", vec![rand_tensor(&[4], &mut r), rand_tensor(&[4], &mut r)], Box::new(|t, v| {
            let s = t.scale(v[1], -2.5);
            let y = t.add(v[0], s).unwrap();
            project_to_scalar(t, y, 7)
        })),
        ("upsample", vec![rand_tensor(&[2, 2, 3], &mut r)], Box::new(|t, v| {
            let y = t.upsample2x(v[0]).unwrap();
            project_to_scalar(t, y, 8)
        })),
        ("repeat_affine", vec![ad], Box::new(|t, v| {
            let y = t.repeat_rows(v[0], 2).unwrap();
            let y = t.col_affine(y, &[1.0, -2.0, 0.5, 3.0], &[0.1, 0.2, 0.3, 0.4]).unwrap();
            project_to_scalar(t, y, 9)
        })),
        ("group_dot_sum", vec![rand_tensor(&[2, 3], &mut r), rand_tensor(&[6, 3], &mut r)], Box::new(|t, v| {
            let s = t.group_dot(v[0], v[1], 0.7).unwrap();
            let w = t.softmax_rows(s).unwrap();
            let y = t.group_weighted_sum(w, v[1]).unwrap();
            project_to_scalar(t, y, 10)
        })),
        ("bce", vec![rand_tensor(&[7], &mut r)], Box::new(|t, v| {
            t.bce_logits_mean(v[0], &[1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0]).unwrap()
        })),
        ("masked_l2_rows", vec![rand_tensor(&[3, 2], &mut r)], Box::new(|t, v| {
            t.masked_l2(v[0], &[0.1, 0.2, -0.3, 0.4, 0.0, 0.5], &[1.0, 0.0, 1.0], 1, 3.0).unwrap()
        })),
        ("masked_l2_grid", vec![rand_tensor(&[2, 2, 2, 2], &mut r)], Box::new(|t, v| {
            let target: Vec<f64> = (0..16).map(|i| (i as f64 * 0.37).sin()).collect();
            t.masked_l2(v[0], &target, &[1.0, 1.0, 0.0, 1.0, 0.0, 1.0, 1.0, 1.0], 4, 5.0).unwrap()
        })),
    ];
    for (name, inputs, f) in cases {
        let err = grad_check(|t, v| f(t, v), &inputs, 1e-6);
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn grad_check_linear_and_constant() {
    let mut r = rng(27);
    let inputs = vec![rand_tensor(&[4, 3], &mut r), rand_tensor(&[2, 3], &mut r)];
    let err = grad_check(
        |t, v| {
            let y = t.linear(v[0], v[1], None).unwrap();
            project_to_scalar(t, y, 28)
        },
        &inputs,
        1e-5,
    );
    assert!(err < 1e-8, "{err}");

    let c = grad_check(
        |t, _| t.constant(Tensor::scalar(3.0)),
        &[rand_tensor(&[3], &mut r)],
        1e-6,
    );
    assert_eq!(c, 0.0);
}

#[test]
fn bce_is_stable_for_large_logits() {
    let mut t = Tape::<f32>::new();
    let z = t.param(Tensor::new(&[2], vec![80.0, -80.0]));
    let l = t.bce_logits_mean(z, &[1.0, 0.0]).unwrap();
    assert!(t.value(l).item().abs() < 1e-6);
    let g = t.backward(l);
    assert!(g.get(z).unwrap().iter().all(|v| v.is_finite()));
}

#[test]
fn masked_l2_zero_norm_is_zero() {
    let mut t = Tape::<f64>::new();
    let p = t.param(Tensor::new(&[1, 2], vec![1.0, 1.0]));
    let l = t.masked_l2(p, &[0.0, 0.0], &[0.0], 1, 0.0).unwrap();
    assert_eq!(t.value(l).item(), 0.0);
}

#[test]
fn nan_hook_records_first_offender() {
    let mut t = Tape::<f64>::new();
    t.set_nan_check(true);
    let a = t.constant(Tensor::new(&[2], vec![f64::MAX, 1.0]));
    let b = t.scale(a, 10.0);
    let _ = t.add(b, b).unwrap();
    assert_eq!(t.first_nonfinite(), Some((b.0, "scale")));
}

#[test]
fn forward_is_deterministic() {
    let (store, p) = store_with(29, |s, r| ResBlockParams::conv(s, "b", 3, 3, r));
    let x = Tensor::<f32>::from_f32(&[3, 8, 8], &(0..192).map(|i| (i as f32 * 0.1).sin()).collect::<Vec<_>>());
    let store = store.cast::<f32>();
    let run = || {
        let mut t = Tape::new();
        let bp = t.bind(&store);
        let xv = t.constant(x.clone());
        let y = resnet_block(&mut t, &bp, &p, xv, Activation::Relu).unwrap();
        t.value(y).data.clone()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_rows_sum_to_one(vals in prop::collection::vec(-30.0f64..30.0, 1..12), rows in 1usize..4) {
        let k = vals.len();
        let data: Vec<f64> = (0..rows).flat_map(|r| vals.iter().map(move |v| v * (r as f64 + 1.0) * 0.5)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new(&[rows, k], data));
        let y = t.softmax_rows(x).unwrap();
        for row in t.value(y).data.chunks(k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn bilinear_is_convex_combination(
        vals in prop::collection::vec(-5.0f64..5.0, 12),
        x in 0.0f64..3.0,
        y in 0.0f64..2.0,
    ) {
        let m = Tensor::new(&[1, 3, 4], vals.clone());
        let v = bilinear_at(&m, [x, y])[0];
        let (c0, r0) = (x.floor() as usize, y.floor() as usize);
        let (c1, r1) = ((c0 + 1).min(3), (r0 + 1).min(2));
        let corners = [vals[r0 * 4 + c0], vals[r0 * 4 + c1], vals[r1 * 4 + c0], vals[r1 * 4 + c1]];
        let lo = corners.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = corners.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
    }

    #[test]
    fn random_shapes_pass_gradient_check(
        n in 1usize..4, din in 1usize..5, dout in 1usize..4,
        c in 1usize..3, h in 2usize..5, w in 2usize..5, seed in 0u64..1000,
    ) {
        let mut r = rng(seed);
        let inputs = vec![
            rand_tensor(&[n, din], &mut r),
            rand_tensor(&[dout, din], &mut r),
            rand_tensor(&[dout], &mut r),
            rand_tensor(&[c, h, w], &mut r),
            rand_tensor(&[2, c, 3, 3], &mut r),
            Tensor::new(&[n, 2], (0..2 * n).map(|_| r.random_range(-0.7..(w.min(h) as f64 - 0.3))).collect()),
        ];
        let err = grad_check(
            |t, v| {
                let a = t.linear(v[0], v[1], Some(v[2])).unwrap();
                let a = t.sigmoid(a);
                let conv = t.conv2d(v[3], v[4], None, 1, 1).unwrap();
                let conv = t.relu(conv);
                let s = t.bilinear(conv, v[5]).unwrap();
                let both = t.concat_cols(&[a, s]).unwrap();
                let sm = t.softmax_rows(both).unwrap();
                project_to_scalar(t, sm, seed)
            },
            &inputs,
            1e-5,
        );
        // Relative error on gradients near the 1e-6 floor carries roundoff
        // of order 1e-5 at this step.
        prop_assert!(err < 1e-4, "{}", err);
    }
}

