use anomseg::dfg::Fusion;
use anomseg::harness::ablation::{ablate, datasets, run_one, seeded, Variant};
use anomseg::harness::data::gen_synthetic;
use anomseg::harness::eval::evaluate;
use anomseg::harness::train::train;
use anomseg::pipeline::{fusion_of, predict_with};
use anomseg::{build_model, AdapterKind, Exec, FusionMode, RunConfig};

fn small() -> RunConfig {
    let mut c = RunConfig::default();
    c.optim.steps = 8;
    c.data.train_count = 24;
    c.data.test_count = 16;
    c.ablation_seeds = 2;
    c
}

#[test]
fn switches_are_independent() {
    let base = small();
    let kinds: Vec<(AdapterKind, FusionMode)> = Variant::ALL
        .iter()
        .map(|v| {
            let c = v.configure(&base);
            (c.model.vision_adapter, c.model.fusion)
        })
        .collect();
    assert_eq!(
        kinds,
        [
            (AdapterKind::Lora, FusionMode::Static),
            (AdapterKind::ConvLora, FusionMode::Static),
            (AdapterKind::Lora, FusionMode::Dynamic),
            (AdapterKind::ConvLora, FusionMode::Dynamic),
        ]
    );
    for v in Variant::ALL {
        let c = v.configure(&base);
        assert_eq!((c.model_seed, c.data_seed, &c.optim, &c.loss), (base.model_seed, base.data_seed, &base.optim, &base.loss));
    }
}

/// Full model with the gate replaced by one-hot diagonal weights equals the
/// static-fusion model at step 0, bit for bit.
#[test]
fn frozen_one_hot_gate_equals_static_fusion() {
    let config = small();
    let full = build_model(&Variant::Full.configure(&config).model, 3).unwrap();
    let stat = build_model(&Variant::ConvLora.configure(&config).model, 3).unwrap();
    let n = config.model.n_groups;
    let one_hot: Vec<[Vec<f64>; 2]> = (0..n)
        .map(|i| {
            let w: Vec<f64> = (0..n).map(|j| (i == j) as u8 as f64).collect();
            [w.clone(), w]
        })
        .collect();
    for s in gen_synthetic(&config.synthetic("test"), 5).unwrap().iter().take(6) {
        let a = predict_with(&full, &Fusion::Fixed(&one_hot), &s.image).unwrap();
        let b = predict_with(&stat, &fusion_of(&stat), &s.image).unwrap();
        assert_eq!(a.map, b.map);
        assert_eq!(a.p_abnormal.to_bits(), b.p_abnormal.to_bits());
    }
}

#[test]
fn trainable_census_orders_variants() {
    let config = small();
    let counts: Vec<usize> = Variant::ALL
        .iter()
        .map(|v| build_model(&v.configure(&config).model, 0).unwrap().store.trainable_count())
        .collect();
    assert!(counts[0] < counts[1] && counts[0] < counts[2]);
    assert!(counts[1] < counts[3] && counts[2] < counts[3]);
    // The gate is the only difference between the fusion modes.
    let (c, h, n) = (config.model.channels, config.model.gate_hidden, config.model.n_groups);
    assert_eq!(counts[2] - counts[0], 2 * (c * h + h * n));
    assert_eq!(counts[3] - counts[1], 2 * (c * h + h * n));
}

#[test]
fn ablation_rows_match_independent_runs() {
    let config = small();
    let result = ablate(&config, Exec::default(), |_, _, _| {}).unwrap();
    assert_eq!(result.runs.len(), 2);

    // Baseline of seed 1 retrained from scratch through the plain path.
    let mut c = seeded(&config, 1);
    c.model.vision_adapter = AdapterKind::Lora;
    c.model.fusion = FusionMode::Static;
    let (tr, te) = datasets(&c).unwrap();
    let out = train(&c, &tr, Exec::Sequential, |_| {}).unwrap();
    let independent = evaluate(&out.model, &te, Exec::Sequential, &c.to_text()).unwrap();
    assert_eq!(result.runs[1][0], independent);

    let full = run_one(&Variant::Full.configure(&seeded(&config, 0)), Exec::Sequential).unwrap();
    assert_eq!(result.runs[0][3], full);

    // The two single-component rows are genuinely different models.
    assert_ne!(result.means(Variant::ConvLora), result.means(Variant::Dfg));

    let csv = result.to_csv();
    assert_eq!(csv.lines().count(), 5);
    assert_eq!(result.seeds_csv().lines().count(), 1 + 2 * 4);
    assert_eq!(result.directional().unwrap().len(), 4);
}
