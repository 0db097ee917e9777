use ndarray::{Array2, Array3, Axis};
use proptest::prelude::{prop_assert, proptest, ProptestConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::autograd::gradcheck::{check_gradients, max_rel_error};
use crate::autograd::normal;
use crate::bank::{BankMethod, Provenance};

fn provenance() -> Provenance {
    Provenance {
        source_cities: vec!["src".into()],
        sample_ratio: 1.0,
        seed: 0,
        silhouette: None,
        method: BankMethod::Kmeans,
    }
}

fn bank(k: usize, d: usize, seed: u64) -> BankBinding {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = normal(k, d, 1.0, &mut rng);
    BankBinding::in_memory(PatternBank::new(m, false, provenance()).unwrap())
}

/// N = 5, K = 4, d = d_q = 8, P = 3, T0 = 3, T' = 2.
fn tiny_cfg(variant: Variant) -> ForecastConfig {
    ForecastConfig {
        variant,
        width: 8,
        query_width: 8,
        patch_len: 3,
        patch_count: 3,
        channels: 1,
        horizon: 2,
        heads: 2,
        aggregator_ffn: 16,
        backend_hidden: 4,
        backend_blocks: 2,
        head_hidden: 16,
        ..ForecastConfig::default()
    }
}

fn tiny_model(variant: Variant, seed: u64) -> ForecastModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = ForecastModel::new(tiny_cfg(variant), Some(bank(4, 8, seed + 100)), &mut rng).unwrap();
    m.attach_target(5).unwrap();
    m
}

fn random_batch(cfg: &ForecastConfig, samples: usize, nodes: usize, seed: u64) -> ForecastBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.patch_count;
    let prior = normal(nodes, nodes, 1.0, &mut rng).mapv(f64::abs);
    ForecastBatch {
        samples,
        nodes,
        patch_count: p,
        history: normal(samples * nodes * p, cfg.token_len(), 1.0, &mut rng),
        hours: (0..samples * p).map(|_| rng.random_range(0..HOURS_PER_WEEK)).collect(),
        target: normal(samples * nodes, cfg.horizon * cfg.channels, 1.0, &mut rng),
        prior: Some(prior),
    }
}

fn gradcheck(variant: Variant) -> f64 {
    let model = tiny_model(variant, 7);
    let batch = random_batch(&model.cfg, 2, 5, 8);
    let mut tape = Tape::new(&model.store);
    let loss = model.loss_var(&mut tape, &batch, Stage::Target).unwrap();
    let grads = tape.backward(loss);
    let checks = check_gradients(&model.store, &grads, 1e-4, |s| {
        let mut t = Tape::new(s);
        let l = model.loss_var(&mut t, &batch, Stage::Target).unwrap();
        t.scalar(l)
    });
    for name in ["key", "query.weight", "backend.lift.weight", "head.out.weight"] {
        if variant == Variant::NoMeta && (name == "key" || name == "query.weight") {
            continue;
        }
        assert!(
            checks.iter().any(|c| c.name == name && c.analytic_norm > 0.0),
            "{name} untested"
        );
    }
    max_rel_error(&checks)
}

#[test]
fn gradients_match_finite_differences() {
    for v in Variant::ALL {
        let err = gradcheck(v);
        assert!(err <= 1e-4, "{v}: relative error {err}");
    }
}

#[test]
fn graph_projections_receive_gradient() {
    let model = tiny_model(Variant::Full, 3);
    let batch = random_batch(&model.cfg, 1, 5, 4);
    let mut tape = Tape::new(&model.store);
    let loss = model.loss_var(&mut tape, &batch, Stage::Target).unwrap();
    let grads = tape.backward(loss);
    let id = model.store.find("graph.query.weight").unwrap();
    assert!(grads.get(id).unwrap().iter().any(|g| *g != 0.0));
}

fn one_window(cfg: &ForecastConfig, seed: u64) -> PatchWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p = cfg.patch_count;
    PatchWindow {
        patches: Array3::from_shape_fn((p, cfg.patch_len, cfg.channels), |_| rng.random_range(-1.0..1.0)),
        mask: vec![false; p],
        hours: (0..p).collect(),
    }
}

#[test]
fn one_hot_scores_retrieve_that_pattern() {
    let mut model = tiny_model(Variant::Full, 1);
    let meta = model.meta.clone().unwrap();
    model.store.get_mut(meta.query.weight).fill(0.0);
    let mut key = Array2::zeros((4, 8));
    for k in 0..4 {
        key[[k, k]] = 1.0;
    }
    model.store.get_mut(meta.key).assign(&key);
    let bias = model.store.get_mut(meta.query.bias);
    bias.fill(0.0);
    bias[[0, 2]] = 50.0;
    let z = model.query_patterns(&one_window(&model.cfg, 2)).unwrap();
    let b2 = model.bank().unwrap().matrix().row(2).to_owned();
    for row in z.rows() {
        for (a, b) in row.iter().zip(&b2) {
            assert!((a - b).abs() < 1e-6);
        }
    }
}

#[test]
fn equal_scores_give_the_bank_mean() {
    let mut model = tiny_model(Variant::Full, 1);
    let key = model.meta.as_ref().unwrap().key;
    model.store.get_mut(key).fill(0.0);
    let z = model.query_patterns(&one_window(&model.cfg, 2)).unwrap();
    let mean = model.bank().unwrap().matrix().mean_axis(Axis(0)).unwrap();
    for row in z.rows() {
        for (a, b) in row.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn default_query_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ForecastConfig::default();
    let model = ForecastModel::new(cfg, Some(bank(5, 128, 1)), &mut rng).unwrap();
    assert_eq!(model.query_patterns(&one_window(&cfg, 3)).unwrap().dim(), (24, 128));
}

#[test]
fn raw_weights_follow_the_literal_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ForecastConfig {
        raw_weights: true,
        ..tiny_cfg(Variant::Full)
    };
    let model = ForecastModel::new(cfg, Some(bank(4, 8, 1)), &mut rng).unwrap();
    let w = one_window(&cfg, 3);
    let meta = model.meta.as_ref().unwrap();
    let q = w.flat().dot(model.store.get(meta.query.weight)) + model.store.get(meta.query.bias);
    let scores = q.dot(&model.store.get(meta.key).t());
    let expect = scores.dot(model.bank().unwrap().matrix());
    let z = model.query_patterns(&w).unwrap();
    assert!((&z - &expect).iter().all(|d| d.abs() < 1e-12));
}

#[test]
fn aggregate_identity_limit() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ForecastConfig {
        patch_count: 1,
        ..tiny_cfg(Variant::Full)
    };
    let mut model = ForecastModel::new(cfg, Some(bank(4, 8, 1)), &mut rng).unwrap();
    let meta = model.meta.clone().unwrap();
    meta.aggregator.zero_residual_branches(&mut model.store);
    model.store.get_mut(meta.positional).fill(0.0);
    let z = normal(3, 8, 1.0, &mut rng);
    let m = model.aggregate_metaknowledge(&z, &[5, 6, 7]).unwrap();
    assert_eq!(m, z);
    assert!(model.aggregate_metaknowledge(&Array2::zeros((0, 8)), &[]).is_err());
}

#[test]
fn aggregate_depends_on_order() {
    let model = tiny_model(Variant::Full, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let z = normal(3, 8, 1.0, &mut rng);
    let hours = [10, 11, 12];
    let mut swapped = z.clone();
    swapped.row_mut(0).assign(&z.row(1));
    swapped.row_mut(1).assign(&z.row(0));
    let a = model.aggregate_metaknowledge(&z, &hours).unwrap();
    let b = model.aggregate_metaknowledge(&swapped, &hours).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    assert_eq!(a, model.aggregate_metaknowledge(&z, &hours).unwrap());
}

#[test]
fn identical_metaknowledge_gives_uniform_graph() {
    let model = tiny_model(Variant::Full, 2);
    let row = normal(1, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
    let m = Array2::from_shape_fn((6, 8), |(_, j)| row[[0, j]]);
    let a = model.reconstruct_graph(&m).unwrap();
    assert!(a.iter().all(|&v| v == 1.0 / 6.0));
}

#[test]
fn sharper_temperature_raises_row_maxima() {
    let mut warm = tiny_model(Variant::Full, 2);
    let m = normal(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
    let a1 = warm.reconstruct_graph(&m).unwrap();
    warm.cfg.epsilon = 0.1;
    let a2 = warm.reconstruct_graph(&m).unwrap();
    for (r1, r2) in a1.rows().into_iter().zip(a2.rows()) {
        let max1 = r1.iter().cloned().fold(f64::MIN, f64::max);
        let max2 = r2.iter().cloned().fold(f64::MIN, f64::max);
        assert!(max2 > max1);
    }
}

#[test]
fn graph_needs_two_nodes() {
    let model = tiny_model(Variant::Full, 2);
    assert!(model.reconstruct_graph(&Array2::zeros((1, 8))).is_err());
    let cfg = ForecastConfig {
        epsilon: 0.0,
        ..tiny_cfg(Variant::Full)
    };
    assert!(matches!(cfg.validate(), Err(TpbError::Config(_))));
}

#[test]
fn default_forecast_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ForecastConfig::default();
    let model = ForecastModel::new(cfg, Some(bank(5, 128, 1)), &mut rng).unwrap();
    let batch = random_batch(&cfg, 1, 4, 2);
    let y = model.predict(&batch, Stage::Target).unwrap();
    assert_eq!(y.dim(), (4, 6));
    let y = y.into_shape_with_order((4, 6, 1)).unwrap();
    assert_eq!(y.dim(), (4, 6, 1));
}

#[test]
fn zero_head_gives_its_bias() {
    let mut model = tiny_model(Variant::Full, 3);
    model.zero_head_weights();
    let out_bias = model.head_out.bias;
    model
        .store
        .get_mut(out_bias)
        .assign(&Array2::from_shape_vec((1, 2), vec![0.5, -1.5]).unwrap());
    let batch = random_batch(&model.cfg, 2, 5, 1);
    let y = model.predict(&batch, Stage::Target).unwrap();
    for row in y.rows() {
        assert_eq!(row.to_vec(), vec![0.5, -1.5]);
    }
}

#[test]
fn graph_changes_the_forecast() {
    let model = tiny_model(Variant::Full, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let recent = normal(5, 3, 1.0, &mut rng);
    let m = normal(5, 8, 1.0, &mut rng);
    let eye = Array2::eye(5);
    let uniform = Array2::from_elem((5, 5), 0.2);
    let a = model.forecast(&recent, &m, &eye).unwrap();
    let b = model.forecast(&recent, &m, &uniform).unwrap();
    assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
}

#[test]
fn forecast_loss_examples() {
    let y = Array2::from_shape_fn((3, 2), |(i, j)| (i * 2 + j) as f64);
    assert_eq!(forecast_loss(&y, &y).unwrap(), 0.0);
    assert!((forecast_loss(&(&y + 1.5), &y).unwrap() - 2.25).abs() < 1e-12);
    let two = Array2::from_elem((1, 1), 2.0);
    let five = Array2::from_elem((1, 1), 5.0);
    assert_eq!(forecast_loss(&five, &two).unwrap(), 9.0);
    assert!(forecast_loss(&y, &two).is_err());
}

#[test]
fn variant_names() {
    for v in Variant::ALL {
        assert_eq!(v.as_str().parse::<Variant>().unwrap(), v);
    }
    assert_eq!("no_clu_bank".parse::<Variant>().unwrap(), Variant::NoClu);
    assert!(matches!("bogus".parse::<Variant>(), Err(TpbError::UnknownVariant(_))));
}

#[test]
fn no_adj_uses_the_normalized_prior() {
    let model = tiny_model(Variant::NoAdj, 3);
    let batch = random_batch(&model.cfg, 2, 5, 1);
    let mut tape = Tape::new(&model.store);
    let a = model.adjacency_var(&mut tape, &batch, None, Stage::Target).unwrap();
    let a = tape.value(a);
    assert_eq!(a.dim(), (10, 5));
    for row in a.rows() {
        assert!((row.sum() - 1.0).abs() < 1e-12);
    }
    let mut no_prior = batch.clone();
    no_prior.prior = None;
    assert!(matches!(
        model.predict(&no_prior, Stage::Target),
        Err(TpbError::Dependency(_))
    ));
}

#[test]
fn no_meta_graph_is_uniform_at_start() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = ForecastModel::new(tiny_cfg(Variant::NoMeta), None, &mut rng).unwrap();
    assert!(model.bank().is_none());
    let batch = random_batch(&model.cfg, 1, 5, 1);
    assert!(model.predict(&batch, Stage::Target).is_err());
    let source = model.predict(&batch, Stage::Source).unwrap();
    model.attach_target(5).unwrap();
    assert_eq!(model.predict(&batch, Stage::Target).unwrap(), source);
    assert!(model.attach_target(6).is_err());
}

#[test]
fn banked_variants_require_a_bank() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert!(matches!(
        ForecastModel::new(tiny_cfg(Variant::Full), None, &mut rng),
        Err(TpbError::Dependency(_))
    ));
    assert!(matches!(
        ForecastModel::new(tiny_cfg(Variant::Full), Some(bank(4, 6, 0)), &mut rng),
        Err(TpbError::Shape(_))
    ));
}

#[test]
fn bank_projection_key_init() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = ForecastConfig {
        key_init: KeyInit::BankProjection,
        ..tiny_cfg(Variant::Full)
    };
    let model = ForecastModel::new(cfg, Some(bank(4, 8, 0)), &mut rng).unwrap();
    let key = model.store.get(model.meta.as_ref().unwrap().key);
    assert_eq!(key.dim(), (4, 8));
    // Rank at most d, rows follow the bank: identical bank rows give identical keys.
    let mut m = normal(4, 8, 1.0, &mut rng);
    let r0 = m.row(0).to_owned();
    m.row_mut(1).assign(&r0);
    let dup = BankBinding::in_memory(PatternBank::new(m, false, provenance()).unwrap());
    let model = ForecastModel::new(cfg, Some(dup), &mut rng).unwrap();
    let key = model.store.get(model.meta.as_ref().unwrap().key);
    assert_eq!(key.row(0), key.row(1));
}

#[test]
fn checkpoint_round_trip_and_hash_check() {
    let dir = tempfile::tempdir().unwrap();
    let bank_path = dir.path().join("b.tpbb");
    bank(4, 8, 3).bank.save(&bank_path).unwrap();
    let binding = BankBinding::from_file(&bank_path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = ForecastModel::new(tiny_cfg(Variant::Full), Some(binding), &mut rng).unwrap();
    let path = dir.path().join("m.tpbm");
    model.save(&path).unwrap();
    let back = ForecastModel::load(&path).unwrap();
    assert!(back.store.bitwise_eq(&model.store));
    assert_eq!(back.bank(), model.bank());

    bank(4, 8, 4).bank.save(&bank_path).unwrap();
    assert!(matches!(ForecastModel::load(&path), Err(TpbError::HashMismatch(_))));
    std::fs::remove_file(&bank_path).unwrap();
    assert!(matches!(ForecastModel::load(&path), Err(TpbError::Dependency(_))));
}

#[test]
fn no_meta_checkpoint_keeps_learned_graph() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut model = ForecastModel::new(tiny_cfg(Variant::NoMeta), None, &mut rng).unwrap();
    model.attach_target(5).unwrap();
    let id = model.store.find("graph.logits").unwrap();
    model.store.get_mut(id)[[0, 1]] = 0.25;
    let path = dir.path().join("m.tpbm");
    model.save(&path).unwrap();
    let back = ForecastModel::load(&path).unwrap();
    assert!(back.store.bitwise_eq(&model.store));
}

#[test]
fn in_memory_bank_cannot_be_saved() {
    let model = tiny_model(Variant::Full, 1);
    let dir = tempfile::tempdir().unwrap();
    assert!(model.save(&dir.path().join("m")).is_err());
}

/// Key with a constant last column turns a shift of `b_q`'s last entry into
/// a uniform shift of every score.
fn shifted_query_outputs(model: &mut ForecastModel, w: &PatchWindow, c: f64) -> (Array2<f64>, Array2<f64>) {
    let meta = model.meta.clone().unwrap();
    model.store.get_mut(meta.key).column_mut(7).fill(1.0);
    let before = model.query_patterns(w).unwrap();
    model.store.get_mut(meta.query.bias)[[0, 7]] += c;
    let after = model.query_patterns(w).unwrap();
    (before, after)
}

/// Key projection with a constant last output shifts every score `r_i·` of
/// a row by the same amount when `b_Q`'s last entry moves.
fn shifted_graphs(model: &mut ForecastModel, m: &Array2<f64>, c: f64) -> (Array2<f64>, Array2<f64>) {
    let GraphParams::Adaptive { query, key } = model.graph.clone() else {
        unreachable!()
    };
    model.store.get_mut(key.weight).column_mut(7).fill(0.0);
    model.store.get_mut(key.bias)[[0, 7]] = 1.0;
    let before = model.reconstruct_graph(m).unwrap();
    model.store.get_mut(query.bias)[[0, 7]] += c;
    (before, model.reconstruct_graph(m).unwrap())
}

#[test]
fn score_shift_invariances() {
    let mut model = tiny_model(Variant::Full, 6);
    let w = one_window(&model.cfg, 1);
    let (a, b) = shifted_query_outputs(&mut model, &w, 3.7);
    assert!((&a - &b).iter().all(|d| d.abs() < 1e-12));
    let m = normal(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let (a, b) = shifted_graphs(&mut model, &m, -2.3);
    assert!((&a - &b).iter().all(|d| d.abs() <= 1e-9));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn adjacency_rows_are_simplices(seed in 0u64..10_000, n in 2usize..9, scale in 0.1f64..20.0) {
        let model = tiny_model(Variant::Full, seed % 7);
        let m = normal(n, 8, scale, &mut ChaCha8Rng::seed_from_u64(seed));
        let a = model.reconstruct_graph(&m).unwrap();
        for row in a.rows() {
            prop_assert!((row.sum() - 1.0).abs() <= 1e-6);
            prop_assert!(row.iter().all(|&v| (0.0..=1.0).contains(&v) && v.is_finite()));
        }
    }

    #[test]
    fn query_softmax_shift_invariance(seed in 0u64..10_000, c in -30.0f64..30.0) {
        let mut model = tiny_model(Variant::Full, seed % 5);
        let w = one_window(&model.cfg, seed);
        let (a, b) = shifted_query_outputs(&mut model, &w, c);
        prop_assert!((&a - &b).iter().all(|d| d.abs() < 1e-9));
    }

    #[test]
    fn graph_row_shift_invariance(seed in 0u64..10_000, c in -30.0f64..30.0) {
        let mut model = tiny_model(Variant::Full, seed % 5);
        let m = normal(5, 8, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let (a, b) = shifted_graphs(&mut model, &m, c);
        prop_assert!((&a - &b).iter().all(|d| d.abs() <= 1e-9));
    }
}
