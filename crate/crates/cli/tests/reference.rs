use std::path::Path;

use brokenbind::RunConfig;
use brokenbind_core::diffnet::ParameterStore;
use brokenbind_core::eval::{evaluate_flow, TwoDatasetData};
use brokenbind_core::trainer::train;

fn reference() -> RunConfig {
    RunConfig::load(&Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/reference.toml")).unwrap()
}

#[test]
fn reference_training_lowers_the_loss_and_lifts_retrieval() {
    let cfg = reference();
    let flow = cfg.flow().unwrap();
    for seed in 0..5 {
        let exp = cfg.experiment(seed);
        let d = TwoDatasetData::generate(&cfg.data, seed).unwrap();
        let untrained = ParameterStore::init(&exp.encoders, seed).unwrap();
        let before = evaluate_flow(&exp, &untrained, &flow, &d.d1_test).unwrap().map_score;
        let state = train(&exp, &d.d1_train, &d.d2_train).unwrap();
        let after = evaluate_flow(&exp, &state.store, &flow, &d.d1_test).unwrap().map_score;
        let (first, last) = (&state.log[0].loss, &state.log.last().unwrap().loss);
        assert!(last.total < first.total, "seed {seed}: total {} -> {}", first.total, last.total);
        assert!(after > before, "seed {seed}: mAP {before} -> {after}");
    }
}
