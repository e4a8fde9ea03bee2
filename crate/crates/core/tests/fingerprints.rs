use attackprint::attacks::{AdversarialRecord, RecordMeta};
use attackprint::data::{synth_dataset, Split};
use attackprint::fingerprints::cs::CsProblem;
use attackprint::fingerprints::dct::{dct2_block, idct2_block};
use attackprint::fingerprints::jpeg::psnr;
use attackprint::fingerprints::*;
use attackprint::Tensor;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn images(n: usize) -> Vec<Tensor<f32>> {
    let d = synth_dataset(n.div_ceil(10), 5, Split::Test).unwrap();
    (0..n).map(|i| d.images.item_tensor(i)).collect()
}

/// Random ±ε sign perturbation, clamped to [0, 1].
fn perturb(x: &Tensor<f32>, eps: f32, seed: u64) -> Tensor<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = x.data().iter().map(|&v| (v + if rng.gen_bool(0.5) { eps } else { -eps }).clamp(0.0, 1.0)).collect();
    Tensor::new(x.shape(), data).unwrap()
}

fn l2(t: &Tensor<f32>) -> f64 {
    t.l2_norm()
}

#[test]
fn jpeg_quality_100_is_nearly_lossless() {
    for x in images(20) {
        let y = jpeg_roundtrip(&x, &JpegConfig { quality: 100 }).unwrap();
        assert!(psnr(&x, &y) > 45.0, "{}", psnr(&x, &y));
    }
}

#[test]
fn jpeg_quality_75_keeps_30_db() {
    for x in images(20) {
        let y = jpeg_roundtrip(&x, &JpegConfig { quality: 75 }).unwrap();
        assert!(psnr(&x, &y) >= 30.0, "{}", psnr(&x, &y));
    }
}

#[test]
fn jpeg_fingerprint_grows_under_attack() {
    let cfg = JpegConfig::default();
    let xs = images(100);
    let larger = xs
        .iter()
        .enumerate()
        .filter(|(i, x)| {
            let benign = l2(&jpeg_fingerprint(x, &cfg).unwrap());
            let attacked = l2(&jpeg_fingerprint(&perturb(x, 0.2, *i as u64), &cfg).unwrap());
            attacked > benign
        })
        .count();
    assert!(larger >= 90, "{larger}/100");
}

#[test]
fn jpeg_fingerprint_identities() {
    let c = Tensor::full(&[28, 28, 1], 0.73f32);
    let d = jpeg_fingerprint(&c, &JpegConfig::default()).unwrap();
    assert!(d.max_abs() <= 1.0 / 255.0 + 1e-6);
    let x = &images(1)[0];
    let recon = jpeg_roundtrip(x, &JpegConfig::default()).unwrap();
    let d = jpeg_fingerprint(x, &JpegConfig::default()).unwrap();
    for ((a, b), r) in x.data().iter().zip(d.data()).zip(recon.data()) {
        assert_eq!(*b, a - r);
    }
}

#[test]
fn cs_identity_and_full_shrinkage_limits() {
    for x in images(5) {
        let full = CsConfig { k_over_n: 1.0, lambda: 1e-6, ..CsConfig::default() };
        let out = cs_reconstruct(&x, &full).unwrap();
        let mse = x.data().iter().zip(out.image.data()).map(|(a, b)| ((a - b) as f64).powi(2)).sum::<f64>() / x.len() as f64;
        assert!(mse < 1e-4, "{mse}");
        assert!(cs_fingerprint(&x, &full).unwrap().max_abs() < 0.02);

        let shrink = CsConfig { lambda: 1e6, ..CsConfig::default() };
        assert!(cs_reconstruct(&x, &shrink).unwrap().image.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn fista_objective_is_monotone_on_random_problems() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for p in 0..20 {
        let (h, w) = (rng.gen_range(4..20), rng.gen_range(4..20));
        let n = h * w;
        let x: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let m = rng.gen_range(1..=n);
        let mask = rand::seq::index::sample(&mut rng, n, m).into_vec();
        let lambda = 10f64.powf(rng.gen_range(-4.0..0.0));
        let prob = CsProblem::new(&x, h, w, mask, lambda, Dictionary::Whole).unwrap();
        let (_, log) = prob.solve(200, 0.0);
        assert!(log.windows(2).all(|v| v[1] <= v[0] + 1e-9), "problem {p}");
        assert!(log.last() <= log.first());
    }
}

#[test]
fn cs_is_seeded() {
    let x = &images(1)[0];
    let a = cs_reconstruct(x, &CsConfig { seed: 4, ..CsConfig::default() }).unwrap();
    let b = cs_reconstruct(x, &CsConfig { seed: 4, ..CsConfig::default() }).unwrap();
    let c = cs_reconstruct(x, &CsConfig { seed: 5, ..CsConfig::default() }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.image, c.image);
}

#[test]
fn cs_fingerprint_grows_under_attack() {
    let cfg = CsConfig::default();
    let xs = images(100);
    let larger = xs
        .iter()
        .enumerate()
        .filter(|(i, x)| {
            let c = CsConfig { seed: *i as u64, ..cfg };
            l2(&cs_fingerprint(&perturb(x, 0.2, *i as u64), &c).unwrap()) > l2(&cs_fingerprint(x, &c).unwrap())
        })
        .count();
    assert!(larger >= 80, "{larger}/100");
}

fn record(x: &Tensor<f32>, i: u64) -> AdversarialRecord {
    let meta = RecordMeta {
        split: Split::Train,
        source_id: i,
        class_index: (i % 3) as usize,
        label_true: 0,
        label_before: 0,
        label_after: 1,
        success: true,
        target: None,
        iterations: 1,
        seed: i,
    };
    let adv = perturb(x, 0.1, i);
    AdversarialRecord::from_candidate(meta, x.clone(), adv.data()).unwrap()
}

#[test]
fn extract_preserves_order_and_copies_exactly() {
    let recs: Vec<AdversarialRecord> = images(12).iter().enumerate().map(|(i, x)| record(x, i as u64)).collect();
    let td = extract(&recs, &Method::TrueDelta).unwrap();
    let raw = extract(&recs, &Method::RawImage).unwrap();
    let cs = extract(&recs, &"cs".parse().unwrap()).unwrap();
    assert_eq!(td.len(), recs.len());
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(td[i].delta_hat, r.delta);
        assert_eq!(raw[i].delta_hat, r.adversarial);
        assert_eq!(td[i].source_id, r.meta.source_id);
        assert_eq!(cs[i].class_index, r.meta.class_index);
        assert_eq!(cs[i].delta_hat, fingerprint(r, &"cs".parse().unwrap()).unwrap().delta_hat);
    }
    assert!(extract(&[], &Method::TrueDelta).is_err());
}

proptest! {
    #[test]
    fn dct_block_round_trip(block in prop::array::uniform32(-255.0f64..255.0), rest in prop::array::uniform32(-255.0f64..255.0)) {
        let b: [f64; 64] = std::array::from_fn(|i| if i < 32 { block[i] } else { rest[i - 32] });
        let back = idct2_block(&dct2_block(&b));
        for (a, z) in b.iter().zip(&back) {
            prop_assert!((a - z).abs() < 1e-5);
        }
    }

    #[test]
    fn soft_threshold_shrinks_toward_zero(v in prop::collection::vec(-10.0f64..10.0, 1..50), t in 0.0f64..5.0) {
        let mut s = v.clone();
        soft_threshold(&mut s, t);
        for (a, b) in v.iter().zip(&s) {
            prop_assert!(b.abs() <= a.abs());
            prop_assert!(b * a >= 0.0);
            prop_assert!((a - b).abs() <= t + 1e-12);
        }
    }

    #[test]
    fn jpeg_output_stays_in_range(seed in any::<u64>(), h in 1usize..20, w in 1usize..20, color in any::<bool>(), q in 1u8..=100) {
        let c = if color { 3 } else { 1 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::new(&[h, w, c], (0..h * w * c).map(|_| rng.gen::<f32>()).collect()).unwrap();
        let y = jpeg_roundtrip(&x, &JpegConfig { quality: q }).unwrap();
        prop_assert_eq!(y.shape(), x.shape());
        prop_assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
