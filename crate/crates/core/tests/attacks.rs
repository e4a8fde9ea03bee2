use std::sync::OnceLock;

use attackprint::attacks::patch::{default_target, patch_objective};
use attackprint::attacks::pool::item_seed;
use attackprint::attacks::*;
use attackprint::data::{synth_dataset, LabeledDataset, Split};
use attackprint::nn::{Network, NetworkSpec};
use attackprint::victim::{predict, train_victim, VictimConfig};
use attackprint::Tensor;

struct Fixture {
    victim: Network<f32>,
    train: LabeledDataset,
    test: LabeledDataset,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let train = synth_dataset(300, 21, Split::Train).unwrap();
        let test = synth_dataset(20, 22, Split::Test).unwrap();
        let cfg = VictimConfig { epochs: 3, seed: 4, ..VictimConfig::default() };
        let (ck, _) = train_victim(&train, None, &cfg).unwrap();
        Fixture { victim: ck.network().unwrap(), train, test }
    })
}

fn correct_subset(f: &Fixture, n: usize) -> LabeledDataset {
    let preds = predict(&f.victim, &f.test.images).unwrap();
    let idx: Vec<usize> = (0..f.test.len()).filter(|&i| preds[i] == f.test.labels[i]).take(n).collect();
    assert_eq!(idx.len(), n, "fixture victim too weak");
    f.test.subset(&idx)
}

fn small_patch(f: &Fixture, iters: usize) -> TrainedPatch {
    let cfg = PatchConfig { iters, ..PatchConfig::default() };
    patch_attack_train(&f.victim, &f.train.images, &f.train.labels, &cfg, 3).unwrap()
}

#[test]
fn square_succeeds_on_half_of_correct_images_at_large_eps() {
    let f = fixture();
    let data = correct_subset(f, 100);
    let mut wins = 0;
    for i in 0..data.len() {
        let x = data.images.item_tensor(i);
        let mut oracle = QueryCounter::new(|img: &Tensor<f32>| {
            Ok(f.victim.forward(&img.clone().reshape(&[1, 28, 28, 1])?)?.into_data())
        });
        let p = SquareParams { eps: 0.2, budget: 2000, p_init: 0.8, seed: i as u64 };
        let out = square_attack(&mut oracle, &x, data.labels[i], &p).unwrap();
        assert!(oracle.queries <= 2000);
        assert_eq!(oracle.queries, out.queries);
        assert!(out.accepted_margins.windows(2).all(|w| w[1] <= w[0]));
        if *out.accepted_margins.last().unwrap() < 0.0 {
            wins += 1;
        }
    }
    assert!(wins >= 50, "square success {wins}/100");
}

#[test]
fn pgd_final_loss_not_below_start() {
    let f = fixture();
    let data = correct_subset(f, 40);
    for norm in [Norm::Linf, Norm::L2] {
        let eps = if norm == Norm::Linf { 0.05 } else { 1.0 };
        let adv = pgd(&f.victim, &data.images, &data.labels, &PgdParams::with_default_step(norm, eps, 20)).unwrap();
        let mut ok = 0;
        for i in 0..data.len() {
            let x0 = data.images.select(&[i]);
            let x1 = adv.select(&[i]);
            let y = [data.labels[i]];
            if f.victim.loss(&x1, &y).unwrap() >= f.victim.loss(&x0, &y).unwrap() {
                ok += 1;
            }
        }
        assert!(ok as f64 >= 0.95 * data.len() as f64, "{norm:?}: {ok}/{}", data.len());
    }
}

#[test]
fn patch_initialisation_is_seeded_and_training_helps() {
    let f = fixture();
    let a = small_patch(f, 0);
    let b = small_patch(f, 0);
    assert_eq!(a.patch, b.patch);
    assert_eq!(a.patch.shape(), &[9, 9, 1]);
    assert!(a.objective_log.is_empty());
    assert_eq!(a.target, default_target(&f.victim, &f.train.images, &f.train.labels).unwrap());

    let trained = small_patch(f, 60);
    assert!(trained.patch.data().iter().all(|v| (0.0..=1.0).contains(v)));
    let eval = f.test.first(100);
    let before = patch_objective(&f.victim, &eval.images, &a.patch, a.target, 9).unwrap();
    let after = patch_objective(&f.victim, &eval.images, &trained.patch, trained.target, 9).unwrap();
    assert!(after > before, "{before} -> {after}");
}

#[test]
fn pool_records_satisfy_invariants_and_are_reproducible() {
    let f = fixture();
    let data = f.test.first(12);
    let cfg = AttackConfig { pgd_steps: 10, square_budget: 100, ..AttackConfig::desk() };
    let tax = Taxonomy::base(&cfg.grids);
    let patch = small_patch(f, 20);
    let pool = generate_pool(&f.victim, &data, &tax, &cfg, Some(&patch), 77).unwrap();
    assert_eq!(pool.summary.counts.iter().sum::<usize>(), pool.records.len());
    assert!(!pool.records.is_empty());
    for r in &pool.records {
        let class = tax.class(r.meta.class_index).unwrap();
        r.check(class).unwrap();
        assert!(r.meta.success);
        assert_eq!(r.meta.seed, item_seed(77, class.class_index, r.meta.source_id));
        if class.algorithm == Algorithm::Square {
            assert!(r.meta.iterations <= 100);
        }
    }
    let again = generate_pool(&f.victim, &data, &tax, &cfg, Some(&patch), 77).unwrap();
    assert_eq!(pool, again);
}

#[test]
fn zero_eps_classes_and_hopeless_victims_yield_nothing() {
    let f = fixture();
    let data = f.test.first(10);
    let mut cfg = AttackConfig { pgd_steps: 5, square_budget: 50, ..AttackConfig::desk() };
    cfg.grids.linf = vec![0.0; 4];
    cfg.grids.l2 = vec![0.0; 4];
    let mut tax = Taxonomy::base(&cfg.grids);
    tax.classes.pop();
    let pool = generate_pool(&f.victim, &data, &tax, &cfg, None, 1).unwrap();
    assert!(pool.records.is_empty());
    assert_eq!(pool.summary.warnings.len(), 16);

    // all-zero parameters predict class 0 for every image; keep only other labels
    let zero = Network::<f32>::init(NetworkSpec::victim(28, 28, 1, 10), 0).unwrap();
    let zero = Network::from_params(zero.spec().clone(), vec![0.0; zero.param_count()]).unwrap();
    let idx: Vec<usize> = (0..data.len()).filter(|&i| data.labels[i] != 0).collect();
    let others = data.subset(&idx);
    let tax = Taxonomy::base(&AttackConfig::desk().grids);
    let pool = generate_pool(&zero, &others, &tax, &AttackConfig::desk(), Some(&small_patch(f, 0)), 1).unwrap();
    assert_eq!(pool.summary.eligible, 0);
    assert!(pool.records.is_empty());
}

#[test]
fn patch_class_requires_a_patch() {
    let f = fixture();
    let tax = Taxonomy::base(&AttackConfig::desk().grids);
    assert!(generate_pool(&f.victim, &f.test.first(2), &tax, &AttackConfig::desk(), None, 0).is_err());
}

#[test]
fn expanded_pool_extends_the_base_pool_class_by_class() {
    let f = fixture();
    let data = f.test.first(6);
    let cfg = AttackConfig { pgd_steps: 5, square_budget: 40, ..AttackConfig::desk() };
    let patch = small_patch(f, 5);
    let base = Taxonomy::base(&cfg.grids);
    let expanded = Taxonomy::expanded(&cfg.grids);
    let extras: Vec<usize> = (base.len()..expanded.len()).collect();
    let full = generate_pool(&f.victim, &data, &expanded, &cfg, Some(&patch), 9).unwrap();
    let mut joined = generate_pool(&f.victim, &data, &base, &cfg, Some(&patch), 9).unwrap().records;
    let more = generate_classes(&f.victim, &data, &expanded, &extras, &cfg, Some(&patch), 9).unwrap();
    assert_eq!(more.summary.counts[..base.len()].iter().sum::<usize>(), 0);
    joined.extend(more.records);
    assert_eq!(joined, full.records);
}
