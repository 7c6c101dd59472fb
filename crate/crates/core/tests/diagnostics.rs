mod common;

use std::fs;

use common::config;
use proptest::prelude::*;
use quadra::diagnostics::*;
use quadra::tensor::Tensor;
use quadra::trainer::{BackpropMode, Model};
use quadra::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn two_pass(values: &[f64]) -> (f64, f64, f64, f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let max_abs = values.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let norm = values.iter().map(|v| v * v).sum::<f64>().sqrt();
    let zeros = values.iter().filter(|v| v.abs() < 1e-8).count() as f64 / n;
    (mean, var.sqrt(), max_abs, norm, zeros)
}

fn close(a: f64, b: f64, scale: f64) -> bool {
    (a - b).abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE)
}

proptest! {
    #[test]
    fn stats_match_a_two_pass_recomputation(
        values in prop::collection::vec(-1e3f64..1e3, 1..200),
        exp in -12i32..3,
    ) {
        let v: Vec<f64> = values.iter().map(|x| x * 10f64.powi(exp)).collect();
        let s = GradientStats::compute(3, 1, "wa", &v);
        let (mean, std, max_abs, norm, zeros) = two_pass(&v);
        prop_assert_eq!(s.count, v.len());
        prop_assert!(close(s.mean, mean, max_abs));
        prop_assert!(close(s.std, std, max_abs));
        prop_assert_eq!(s.max_abs, max_abs);
        prop_assert!(close(s.l2_norm, norm, norm));
        prop_assert_eq!(s.near_zero_fraction, zeros);
        prop_assert!(s.std >= 0.0 && s.l2_norm >= 0.0 && s.max_abs >= s.mean.abs());
        prop_assert_eq!(GradientStats::compute(3, 1, "wa", &v), s);
    }

    #[test]
    fn pgm_round_trip_is_within_one_level(
        values in prop::collection::vec(0.0f64..=1.0, 1..60),
        width in 1usize..6,
    ) {
        let height = values.len() / width;
        prop_assume!(height > 0);
        let map = AttentionMap { height, width, values: values[..width * height].to_vec(), layer: 0, image: 0 };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(map.file_name());
        emit_pgm(&map, &path).unwrap();
        let pgm = parse_pgm(&fs::read_to_string(&path).unwrap()).unwrap();
        prop_assert_eq!((pgm.width, pgm.height, pgm.maxval), (width, height, 255));
        for (a, b) in pgm.unit_values().iter().zip(&map.values) {
            prop_assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
    }
}

#[test]
fn gradient_stats_cover_every_slot_and_aggregate() {
    let cfg = config("mnist-conv3-proposed");
    let mut model = Model::new(&cfg, BackpropMode::Hybrid).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::from_fn(&[3, 1, 28, 28], |_| rng.random_range(-1.0..1.0));
    let grads = model.step(x, &[1, 4, 7]).unwrap().grads;
    let rows = collect_gradient_stats(&model, &grads, 2);
    assert_eq!(rows, collect_gradient_stats(&model, &grads, 2));
    for i in 0..model.units() {
        let slots = model.unit(i).slots();
        let unit_rows: Vec<_> = rows.iter().filter(|r| r.layer == i).collect();
        assert_eq!(unit_rows.len(), slots.len() + 1);
        let all = unit_rows.iter().find(|r| r.role == ALL_ROLES).unwrap();
        let flat: Vec<f64> = slots
            .iter()
            .zip(&grads[i])
            .filter(|(s, _)| !s.is_batchnorm())
            .flat_map(|(_, g)| g.to_vec())
            .collect();
        let (mean, _, max_abs, norm, _) = two_pass(&flat);
        assert_eq!(all.count, flat.len());
        assert!(close(all.mean, mean, max_abs));
        assert!(close(all.l2_norm, norm, norm));
    }
    assert!(rows.iter().all(|r| r.epoch == 2));
}

#[test]
fn stats_files_follow_the_naming_convention() {
    let rows = vec![
        GradientStats::compute(0, 1, "wa", &[1.0, 2.0]),
        GradientStats::compute(4, 3, ALL_ROLES, &[0.0]),
    ];
    let dir = tempfile::tempdir().unwrap();
    let paths = emit_gradient_stats(&rows, dir.path()).unwrap();
    assert_eq!(paths[0].file_name().unwrap(), "0_1_wa.csv");
    assert_eq!(paths[1].file_name().unwrap(), "4_3_all.csv");
    let text = fs::read_to_string(&paths[0]).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), GradientStats::HEADER.join(","));
    assert!(lines.next().unwrap().starts_with("0,1,wa,2,"));
    assert!(lines.next().is_none());
}

#[test]
fn empty_table_gives_a_header_only_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("empty.csv");
    emit_csv(&GradientStats::HEADER, Vec::<Vec<String>>::new(), &path).unwrap();
    assert_eq!(
        fs::read_to_string(&path).unwrap(),
        GradientStats::HEADER.join(",") + "\n"
    );
}

#[test]
fn csv_fields_are_quoted_when_needed() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("q.csv");
    emit_csv(&["a", "b"], [vec!["x,y", "say \"hi\""]], &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "a,b\n\"x,y\",\"say \"\"hi\"\"\"\n");
}

#[test]
fn csv_io_errors_carry_the_path() {
    let err = emit_csv(
        &["a"],
        Vec::<Vec<String>>::new(),
        std::path::Path::new("/nonexistent/dir/x.csv"),
    )
    .unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/dir/x.csv"));
}

#[test]
fn single_white_pixel() {
    let map = AttentionMap {
        height: 1,
        width: 1,
        values: vec![1.0],
        layer: 2,
        image: 7,
    };
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(map.file_name());
    assert!(path.ends_with("attn_7_2.pgm"));
    emit_pgm(&map, &path).unwrap();
    assert_eq!(fs::read_to_string(&path).unwrap(), "P2\n1 1\n255\n255\n");
}

fn image(seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[1, 28, 28], |_| rng.random_range(-1.0..1.0))
}

#[test]
fn attention_equals_channel_mean_oracle() {
    let model = Model::new(&config("mnist-conv3-proposed"), BackpropMode::Hybrid).unwrap();
    let img = image(2);
    let map = activation_attention(&model, &img, 0, 5).unwrap();
    let act = model.forward_until(&img.reshape(&[1, 1, 28, 28]).unwrap(), 0).unwrap();
    let c = act.shape()[1];
    let mut oracle = vec![0.0; 28 * 28];
    for (p, o) in oracle.iter_mut().enumerate() {
        *o = (0..c).map(|k| act.data()[k * 784 + p].abs()).sum::<f64>() / c as f64;
    }
    let m = oracle.iter().copied().fold(0.0, f64::max);
    assert!(m > 0.0);
    for (a, b) in map.values.iter().zip(&oracle) {
        assert!((a - b / m).abs() < 1e-12);
    }
    assert_eq!((map.height, map.width, map.layer, map.image), (28, 28, 0, 5));
}

#[test]
fn deeper_maps_are_resized_and_normalized() {
    let model = Model::new(&config("mnist-conv3-proposed"), BackpropMode::Hybrid).unwrap();
    for layer in 1..3 {
        let map = activation_attention(&model, &image(3), layer, 0).unwrap();
        assert_eq!(map.values.len(), 28 * 28);
        assert!(map.values.iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(map.max(), 1.0);
        assert_eq!(map.clone().normalized(), map);
    }
}

#[test]
fn bilinear_resize_matches_hand_computed_values() {
    // 2x2 -> 4x4 with half-pixel centers: interior samples sit a quarter
    // of the way between source pixels.
    let out = bilinear_resize(&[0.0, 1.0, 2.0, 3.0], 2, 2, 4, 4);
    let want = [
        0.0, 0.25, 0.75, 1.0, //
        0.5, 0.75, 1.25, 1.5, //
        1.5, 1.75, 2.25, 2.5, //
        2.0, 2.25, 2.75, 3.0,
    ];
    for (a, b) in out.iter().zip(want) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn zero_first_layer_gives_a_zero_map() {
    let mut model = Model::new(&config("mnist-conv3-proposed"), BackpropMode::Hybrid).unwrap();
    let unit = model.unit_mut(0);
    let zeros = unit.values().iter().map(|t| Tensor::zeros(t.shape())).collect();
    unit.set_values(zeros);
    let map = activation_attention(&model, &image(4), 0, 0).unwrap();
    assert!(map.values.iter().all(|&v| v == 0.0));
}

#[test]
fn constant_image_gives_a_constant_interior() {
    let model = Model::new(&config("mnist-conv3-proposed"), BackpropMode::Hybrid).unwrap();
    let map = activation_attention(&model, &Tensor::full(&[1, 28, 28], 0.7), 0, 0).unwrap();
    let v = map.values[28 + 1];
    for y in 1..27 {
        for x in 1..27 {
            assert!((map.values[y * 28 + x] - v).abs() < 1e-6);
        }
    }
}

#[test]
fn attention_rejects_bad_layers_and_images() {
    let model = Model::new(&config("mnist-conv3-proposed"), BackpropMode::Hybrid).unwrap();
    assert!(matches!(
        activation_attention(&model, &image(1), 3, 0),
        Err(Error::Input(_))
    ));
    let batch = Tensor::zeros(&[2, 1, 28, 28]);
    assert!(matches!(
        activation_attention(&model, &batch, 0, 0),
        Err(Error::Input(_))
    ));
    let flat = Model::new(&config("toy-redundant-6"), BackpropMode::Hybrid).unwrap();
    assert!(matches!(
        activation_attention(&flat, &Tensor::zeros(&[2]), 0, 0),
        Err(Error::Input(_))
    ));
}

#[test]
fn malformed_pgm_is_rejected() {
    assert!(parse_pgm("P5\n1 1\n255\n0\n").is_err());
    assert!(parse_pgm("P2\n2 1\n255\n0\n").is_err());
    assert!(parse_pgm("P2\n1 1\n255\n300\n").is_err());
    assert_eq!(parse_pgm("P2 # comment\n1 1\n255\n17\n").unwrap().pixels, vec![17]);
}
