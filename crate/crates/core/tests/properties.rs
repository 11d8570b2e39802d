use leaklab::attack::{gbdt, kmeans, metrics, GbdtConfig};
use leaklab::datagen::{self, GenConfig, Split};
use leaklab::nn::{ActivationStats, Mlp, ModelSpec};
use leaklab::timing::{self, SkipMode, TimingConfig};
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = ModelSpec> {
    (1usize..=8, 1usize..=3, 1usize..=6, 1usize..=4).prop_map(|(w, d, i, k)| ModelSpec::new(w, d, i, k).unwrap())
}

fn stats_for(spec: ModelSpec) -> impl Strategy<Value = (ModelSpec, ActivationStats)> {
    (
        prop::collection::vec(any::<bool>(), spec.input_dim),
        prop::collection::vec(prop::collection::vec(any::<bool>(), spec.width), spec.depth),
    )
        .prop_map(move |(i, h)| (spec, ActivationStats::from_masks(i, h)))
}

fn timing_strategy() -> impl Strategy<Value = TimingConfig> {
    (0u32..=8, 0u32..=8, 0u32..=4, 1usize..=4).prop_map(|(per, skip, base, tile)| {
        let per = 1.0 + per as f64 / 4.0;
        TimingConfig {
            mode: SkipMode::ZeroSkipTile { tile_rows: tile },
            cycles_per_mac: per,
            cycles_skip_per_mac: per * skip as f64 / 16.0,
            cycles_base_per_layer: base as f64 * 8.0,
            ..TimingConfig::default()
        }
    })
}

fn with_mode(cfg: &TimingConfig, mode: SkipMode) -> TimingConfig {
    TimingConfig { mode, ..*cfg }
}

proptest! {
    #[test]
    fn turning_a_unit_on_never_lowers_cost(
        (spec, stats) in spec_strategy().prop_flat_map(stats_for),
        cfg in timing_strategy(),
        layer in 0usize..3,
        unit in 0usize..8,
    ) {
        let layer = layer % spec.depth;
        let unit = unit % spec.width;
        let mut hidden = stats.hidden_masks().to_vec();
        hidden[layer][unit] = true;
        let more = ActivationStats::from_masks(stats.input_mask().to_vec(), hidden);
        for mode in [SkipMode::ZeroSkipElement, cfg.mode, SkipMode::Dense] {
            let c = with_mode(&cfg, mode);
            prop_assert!(timing::cost(&more, &spec, &c).unwrap() >= timing::cost(&stats, &spec, &c).unwrap());
        }
    }

    #[test]
    fn cost_is_bounded_by_the_worst_case(
        (spec, stats) in spec_strategy().prop_flat_map(stats_for),
        cfg in timing_strategy(),
    ) {
        let worst = timing::worst_case_cycles(&spec, &cfg);
        for mode in [SkipMode::ZeroSkipElement, cfg.mode, SkipMode::Dense] {
            prop_assert!(timing::cost(&stats, &spec, &with_mode(&cfg, mode)).unwrap() <= worst);
        }
        prop_assert_eq!(timing::cost(&stats, &spec, &with_mode(&cfg, SkipMode::Dense)).unwrap(), worst);
    }

    #[test]
    fn single_row_tiles_equal_element_skipping(
        (spec, stats) in spec_strategy().prop_flat_map(stats_for),
        cfg in timing_strategy(),
    ) {
        let tile = with_mode(&cfg, SkipMode::ZeroSkipTile { tile_rows: 1 });
        let elem = with_mode(&cfg, SkipMode::ZeroSkipElement);
        prop_assert_eq!(timing::cost(&stats, &spec, &tile).unwrap(), timing::cost(&stats, &spec, &elem).unwrap());
    }

    #[test]
    fn observed_latency_is_non_negative(cycles in 0.0f64..2000.0, seed in any::<u64>()) {
        let cfg = TimingConfig::default();
        prop_assert!(timing::observe(cycles, &cfg, seed) >= 0.0);
    }

    #[test]
    fn metrics_ignore_row_order(
        pairs in prop::collection::vec((0usize..4, 0usize..4), 1..60),
        rot in 0usize..60,
    ) {
        let pred: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let truth: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let mut shuffled = pairs.clone();
        shuffled.rotate_left(rot % pairs.len());
        shuffled.reverse();
        let p2: Vec<usize> = shuffled.iter().map(|p| p.0).collect();
        let t2: Vec<usize> = shuffled.iter().map(|p| p.1).collect();
        prop_assert_eq!(metrics::accuracy(&pred, &truth).unwrap(), metrics::accuracy(&p2, &t2).unwrap());
        let (f1, f2) = (metrics::weighted_f1(&pred, &truth).unwrap(), metrics::weighted_f1(&p2, &t2).unwrap());
        prop_assert!((f1 - f2).abs() < 1e-12);
        prop_assert_eq!(metrics::per_class(&pred, &truth, 4).unwrap(), metrics::per_class(&p2, &t2, 4).unwrap());
    }

    #[test]
    fn centroids_sorted_and_counted(
        xs in prop::collection::vec(0u32..1000, 3..40),
        k in 1usize..4,
        seed in any::<u64>(),
    ) {
        let xs: Vec<f64> = xs.into_iter().map(f64::from).collect();
        let mut distinct = xs.clone();
        distinct.sort_by(f64::total_cmp);
        distinct.dedup();
        let r = kmeans::cluster(&xs, k, seed, 100);
        if distinct.len() < k {
            prop_assert!(r.is_err());
        } else {
            let m = r.unwrap();
            prop_assert_eq!(m.centroids().len(), k);
            prop_assert!(m.centroids().windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn gbdt_predicts_known_classes(
        rows in prop::collection::vec((0u32..50, 0u32..50, 0usize..3), 2..40),
    ) {
        let x: Vec<Vec<f64>> = rows.iter().map(|r| vec![r.0 as f64, r.1 as f64]).collect();
        let y: Vec<usize> = rows.iter().map(|r| r.2).collect();
        let cfg = GbdtConfig { n_trees: 5, max_depth: 2, learning_rate: 0.3, seed: 0 };
        let m = gbdt::train(&x, &y, 3, &cfg).unwrap();
        for (f, t) in m.splits() {
            prop_assert!(f < 2 && t.is_finite());
        }
        for r in &x {
            let s = m.scores(r).unwrap();
            prop_assert!(s.iter().all(|v| v.is_finite()));
            prop_assert!(m.predict(r).unwrap() < 3);
        }
    }

    #[test]
    fn splits_are_disjoint_and_stratified(k in 2usize..5, per in 4usize..20, seed in any::<u64>()) {
        let cfg = GenConfig {
            k_sensitive: k,
            n_client_features: 3,
            samples_per_class: per,
            separation: 1.0,
            feature_noise: 0.5,
            task_classes: 2,
            seed,
        };
        let d = datagen::split(&datagen::generate(&cfg).unwrap(), [0.5, 0.25, 0.25], seed ^ 1).unwrap();
        let ids = |s: Split| d.rows_in(s).map(|r| r.identifier.clone()).collect::<std::collections::BTreeSet<_>>();
        let (tr, aux, te) = (ids(Split::Train), ids(Split::Aux), ids(Split::Test));
        prop_assert!(tr.is_disjoint(&aux) && tr.is_disjoint(&te) && aux.is_disjoint(&te));
        prop_assert_eq!(tr.len() + aux.len() + te.len(), k * per);
        for a in 0..k {
            let n = d.rows_in(Split::Train).filter(|r| r.attribute == a).count();
            prop_assert_eq!(n, (0.5 * per as f64).round() as usize);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(50))]

    #[test]
    fn analytic_gradients_match_finite_differences(seed in any::<u64>(), x in prop::collection::vec(-1.0f64..1.0, 3)) {
        let spec = ModelSpec::new(5, 2, 3, 3).unwrap();
        let model = Mlp::build(spec, seed).unwrap();
        let err = model.grad_check(&x, (seed % 3) as usize, 1e-6).unwrap();
        prop_assert!(err < 1e-4, "relative error {}", err);
    }
}
