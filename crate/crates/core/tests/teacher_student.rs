mod common;

use iaml::data::PairedDataset;
use iaml::losses::LossTag;
use iaml::train::{init_state, train, TrainState};

use common::{synthetic_set, toy_config};

/// Smallest per-channel spatial std over every teacher level, averaged over pairs.
fn teacher_spread(state: &TrainState, set: &PairedDataset) -> f64 {
    let net = state.net().unwrap();
    let mut total = 0.0;
    for p in &set.pairs {
        let (_, pyr) = net
            .forward_value(&state.student_encoder, &state.teacher_decoder, &p.clean)
            .unwrap();
        let mut smallest = f64::INFINITY;
        for level in &pyr.levels {
            let (_, c, h, w) = level.dims4();
            for plane in level.data().chunks(h * w).take(c) {
                let mean = plane.iter().sum::<f64>() / plane.len() as f64;
                let var =
                    plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / plane.len() as f64;
                smallest = smallest.min(var.sqrt());
            }
        }
        total += smallest;
    }
    total / set.len() as f64
}

#[test]
fn teacher_features_do_not_collapse_under_mirror_training() {
    let set = synthetic_set(4, 48, 100);
    let mut cfg = toy_config(120, 2);
    cfg.train.ema_mu = 0.95;
    assert_eq!(cfg.loss.config_tag, LossTag::MseSsimIaml.as_str());
    let mut state = init_state(&cfg).unwrap();
    let start = teacher_spread(&state, &set);
    let records = train(&mut state, &set, None, None).unwrap();
    let end = teacher_spread(&state, &set);
    assert!(records.iter().all(|r| r.loss.is_finite()));
    assert!(
        end > 0.1 * start && end > 1e-3,
        "teacher feature spread fell from {start:.4} to {end:.4}"
    );
    let first = &records[0].loss;
    let last = &records.last().unwrap().loss;
    assert!(
        last.mirror < first.mirror,
        "mirror term {:.4} -> {:.4}",
        first.mirror,
        last.mirror
    );
}

#[test]
fn teacher_tracks_student_only_through_ema() {
    let set = synthetic_set(2, 32, 7);
    let mut cfg = toy_config(3, 4);
    cfg.train.batch_size = 2;
    cfg.train.ema_mu = 0.5;
    let mut state = init_state(&cfg).unwrap();
    assert_eq!(state.teacher_decoder, state.student_decoder);
    let mut expected = state.teacher_decoder.clone();
    for _ in 0..3 {
        let before = state.clone();
        train_one(&mut state, &set);
        iaml::train::ema_update(&mut expected, &state.student_decoder, 0.5).unwrap();
        assert_ne!(state.student_decoder, before.student_decoder);
    }
    assert!(state.teacher_decoder.max_abs_diff(&expected) < 1e-15);
    assert!(state.teacher_decoder.max_abs_diff(&state.student_decoder) > 0.0);
}

fn train_one(state: &mut TrainState, set: &PairedDataset) {
    let target = state.step + 1;
    state.config.train.max_steps = target;
    train(state, set, None, None).unwrap();
    assert_eq!(state.step, target);
}
