use camscope::trainer::{
    eval_metrics, metrics_csv, synth_dataset, train, Confusion, TrainConfig,
};
use camscope::unet::encode_weights;
use camscope::{LabelMap, UNetConfig, UNetModel};
use proptest::prelude::*;

fn tiny(seed: u64) -> UNetModel {
    UNetModel::new(UNetConfig {
        depth: 2,
        channels: vec![6, 4],
        in_channels: 1,
        num_classes: 3,
        seed,
    })
    .unwrap()
}

fn config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs,
        seed,
    }
}

#[test]
fn identical_seeds_give_identical_artifacts() {
    let data = synth_dataset(4, 3, 16, 16, 5).unwrap();
    let (a, log_a) = train(tiny(1), &data, &config(2, 1)).unwrap();
    let (b, log_b) = train(tiny(1), &data, &config(2, 1)).unwrap();
    assert_eq!(encode_weights(&a), encode_weights(&b));
    assert_eq!(metrics_csv(&log_a), metrics_csv(&log_b));
    let (c, _) = train(tiny(1), &data, &config(2, 2)).unwrap();
    assert_ne!(encode_weights(&a), encode_weights(&c));
}

#[test]
fn loss_decreases_on_a_fixed_set() {
    let data = synth_dataset(8, 3, 16, 16, 0).unwrap();
    let (_, log) = train(tiny(0), &data, &config(12, 0)).unwrap();
    assert!(log.last().unwrap().loss < log[0].loss, "{log:?}");
}

#[test]
fn empty_dataset_rejected() {
    assert!(train(tiny(0), &[], &config(1, 0)).is_err());
}

fn label_pair() -> impl Strategy<Value = (LabelMap, LabelMap)> {
    (1..10usize, 1..10usize).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            prop::collection::vec(0..4usize, n),
            prop::collection::vec(0..4usize, n),
        )
            .prop_map(move |(p, t)| (LabelMap::new(h, w, p).unwrap(), LabelMap::new(h, w, t).unwrap()))
    })
}

proptest! {
    #[test]
    fn f1_is_a_function_of_iou((pred, truth) in label_pair()) {
        let m = eval_metrics(&pred, &truth, 4).unwrap();
        for s in m.per_class.iter().flatten() {
            prop_assert!((s.f1 - 2.0 * s.iou / (1.0 + s.iou)).abs() <= 1e-12);
        }
        prop_assert!(m.iou <= m.f1 + 1e-12);
    }

    #[test]
    fn counts_match_pixel_loop((pred, truth) in label_pair()) {
        let mut c = Confusion::new(4);
        c.add(&pred, &truth).unwrap();
        for (class, counts) in c.class_counts().iter().enumerate() {
            let pairs = pred.as_slice().iter().zip(truth.as_slice());
            let tp = pairs.clone().filter(|(&p, &t)| p == class && t == class).count() as u64;
            let fp = pairs.clone().filter(|(&p, &t)| p == class && t != class).count() as u64;
            let fn_ = pairs.filter(|(&p, &t)| p != class && t == class).count() as u64;
            prop_assert_eq!((counts.tp, counts.fp, counts.fn_), (tp, fp, fn_));
        }
    }
}
