use attackprint::nn::gradcheck::compare_gradient;
use attackprint::nn::{finite_diff_check, LayerSpec, ModelCheckpoint, Network, NetworkSpec};
use attackprint::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec(classes: usize) -> NetworkSpec {
    use LayerSpec::*;
    NetworkSpec {
        input: (8, 8, 2),
        layers: vec![
            Conv2d { out_ch: 4, kernel: 3, stride: 1, pad: 1 },
            Relu,
            MaxPool2d { k: 2 },
            Residual { ch: 4 },
            Conv2d { out_ch: 3, kernel: 2, stride: 2, pad: 0 },
            Relu,
            Flatten,
            Dense { out: classes },
        ],
        classes,
    }
}

fn random_batch(n: usize, shape: (usize, usize, usize), seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let len = n * shape.0 * shape.1 * shape.2;
    Tensor::new(&[n, shape.0, shape.1, shape.2], (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap()
}

/// Straight-line NHWC forward pass for the victim architecture written with
/// explicit loops, independent of the im2col/gemm path.
fn naive_victim_forward(spec: &NetworkSpec, p: &[f32], x: &[f32]) -> Vec<f64> {
    let (h, w, c) = spec.input;
    let conv = |inp: &[f64], h: usize, w: usize, c: usize, oc: usize, wts: &[f32]| {
        let bias = &wts[9 * c * oc..];
        let mut out = vec![0.0; h * w * oc];
        for y in 0..h {
            for xx in 0..w {
                for o in 0..oc {
                    let mut acc = bias[o] as f64;
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = y as isize + ky as isize - 1;
                            let ix = xx as isize + kx as isize - 1;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            for ci in 0..c {
                                let v = inp[(iy as usize * w + ix as usize) * c + ci];
                                acc += v * wts[((ky * 3 + kx) * c + ci) * oc + o] as f64;
                            }
                        }
                    }
                    out[(y * w + xx) * oc + o] = acc.max(0.0);
                }
            }
        }
        out
    };
    let pool = |inp: &[f64], h: usize, w: usize, c: usize| {
        let mut out = vec![0.0; (h / 2) * (w / 2) * c];
        for y in 0..h / 2 {
            for xx in 0..w / 2 {
                for ch in 0..c {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            m = m.max(inp[((2 * y + dy) * w + 2 * xx + dx) * c + ch]);
                        }
                    }
                    out[(y * (w / 2) + xx) * c + ch] = m;
                }
            }
        }
        out
    };
    let x: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    let n1 = 9 * c * 16 + 16;
    let a = pool(&conv(&x, h, w, c, 16, &p[..n1]), h, w, 16);
    let n2 = 9 * 16 * 32 + 32;
    let b = pool(&conv(&a, h / 2, w / 2, 16, 32, &p[n1..n1 + n2]), h / 2, w / 2, 32);
    let dense = &p[n1 + n2..];
    let d = b.len();
    let k = spec.classes;
    (0..k)
        .map(|j| dense[d * k + j] as f64 + (0..d).map(|i| b[i] * dense[i * k + j] as f64).sum::<f64>())
        .collect()
}

#[test]
fn forward_matches_straight_line_oracle() {
    let spec = NetworkSpec::victim(28, 28, 1, 10);
    let ck = ModelCheckpoint::init(spec.clone(), 0).unwrap();
    let net = ck.network::<f32>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x: Vec<f32> = (0..784).map(|_| rng.gen::<f32>()).collect();
    let got = net.forward(&Tensor::new(&[1, 28, 28, 1], x.clone()).unwrap()).unwrap();
    let want = naive_victim_forward(&spec, &ck.params, &x);
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-5, "{g} vs {w}");
    }
}

#[test]
fn forward_is_deterministic_and_batch_invariant() {
    let net = Network::<f32>::init(NetworkSpec::victim(28, 28, 1, 10), 3).unwrap();
    let x = random_batch(5, (28, 28, 1), 1).cast::<f32>();
    let all = net.forward(&x).unwrap();
    let again = net.forward(&x).unwrap();
    assert_eq!(all, again);
    let chunked = net.forward_chunked(&x, 2).unwrap();
    for (a, b) in all.data().iter().zip(chunked.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn param_gradients_match_central_differences() {
    for seed in 0..3 {
        let net = Network::<f64>::init(small_spec(5), seed).unwrap();
        let x = random_batch(3, (8, 8, 2), 100 + seed);
        let labels = [0, 3, 4];
        for h in [1e-3, 1e-4] {
            let err = finite_diff_check(&net, &x, &labels, 100, h, seed).unwrap();
            assert!(err < 1e-4, "seed {seed} h {h}: {err}");
        }
    }
}

#[test]
fn corrupted_gradient_is_detected() {
    let net = Network::<f64>::init(small_spec(5), 9).unwrap();
    let x = random_batch(3, (8, 8, 2), 9);
    let labels = [1, 2, 3];
    let (_, mut g) = net.loss_and_param_gradients(&x, &labels).unwrap();
    // pick the largest-magnitude coordinate so the doubling dominates noise
    let (i, _) = g
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).unwrap())
        .unwrap();
    g[i] *= 2.0;
    let errs = compare_gradient(&net, &x, &labels, &g, &[i], 1e-4).unwrap();
    assert!(errs[0].unwrap() > 0.3);
}

#[test]
fn input_gradient_matches_central_differences() {
    let net = Network::<f64>::init(small_spec(4), 5).unwrap();
    let x = random_batch(1, (8, 8, 2), 5);
    let label = [2];
    let g = net.input_gradient(&x, &label).unwrap();
    assert_eq!(g.shape(), x.shape());
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let base = net.activation_pattern(&x).unwrap();
    let mut checked = 0;
    while checked < 50 {
        let i = rng.gen_range(0..x.len());
        let h = 1e-5;
        let mut plus = x.clone();
        plus.data_mut()[i] += h;
        let mut minus = x.clone();
        minus.data_mut()[i] -= h;
        if net.activation_pattern(&plus).unwrap() != base || net.activation_pattern(&minus).unwrap() != base {
            continue;
        }
        let num = (net.loss(&plus, &label).unwrap() - net.loss(&minus, &label).unwrap()) / (2.0 * h);
        let err = attackprint::nn::relative_error(g.data()[i], num);
        assert!(err < 1e-4, "pixel {i}: {} vs {num}", g.data()[i]);
        checked += 1;
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let run = || {
        let mut ck = ModelCheckpoint::init(small_spec(3), 4).unwrap();
        let x = random_batch(4, (8, 8, 2), 4).cast::<f32>();
        for _ in 0..5 {
            let net = ck.network::<f32>().unwrap();
            let (_, g) = net.loss_and_param_gradients(&x, &[0, 1, 2, 0]).unwrap();
            ck.adam_step(&g, &Default::default()).unwrap();
        }
        ck
    };
    assert_eq!(run(), run());
}
