use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::*;

fn spec(shape_id: usize, traj_id: usize, t: usize) -> SynthClassSpec {
    SynthClassSpec {
        shape_id,
        traj_id,
        duration_frames: t,
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

#[test]
fn load_well_formed_file() {
    let dir = tempfile::tempdir().unwrap();
    let seq = synth_generate(&spec(1, 0, 40), 0.01, 5).unwrap();
    let path = dir.path().join("a.skel");
    save_sequence(&seq, &path).unwrap();
    let back = load_sequence(&path).unwrap();
    assert_eq!(back.num_frames(), 40);
    assert_eq!(back.dims(), 2);
    assert_eq!(back.coords().len(), 40 * 26 * 2);
    assert_eq!(back.coords(), seq.coords());
    assert_eq!(back.class_id, None);
}

#[test]
fn wrong_joint_count_is_format_error() {
    let mut text = String::from("SKELSEQ v1 T=2 J=25 D=2 class=3\n");
    for _ in 0..2 {
        text.push_str(&vec!["0.5"; 50].join(" "));
        text.push('\n');
    }
    assert!(matches!(
        SkeletonSequence::from_text(&text),
        Err(Error::Format(_))
    ));
}

#[test]
fn malformed_files_rejected() {
    let good_line = vec!["0.5"; 52].join(" ");
    let cases = [
        "".to_string(),
        "SKELSEQ v2 T=2 J=26 D=2 class=0\n".to_string(),
        format!("SKELSEQ v1 T=2 J=26 D=2 class=0\n{good_line}\n"),
        format!("SKELSEQ v1 T=2 J=26 D=2 class=0\n{good_line}\n{good_line} 1.0\n"),
        format!(
            "SKELSEQ v1 T=2 J=26 D=2 class=0\n{good_line}\n{}\n",
            good_line.replacen("0.5", "NaN", 1)
        ),
        format!("SKELSEQ v1 T=2 J=26 D=4 class=0\n{good_line}\n{good_line}\n"),
    ];
    for text in cases {
        assert!(
            matches!(SkeletonSequence::from_text(&text), Err(Error::Format(_))),
            "{text:?}"
        );
    }
    let missing = load_sequence(std::path::Path::new("/nonexistent/file.skel"));
    assert!(matches!(missing, Err(Error::Io { .. })));
}

#[test]
fn manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.txt");
    write_manifest(&path, &[("s/a.skel".into(), 3), ("b.skel".into(), 0)]).unwrap();
    let entries = load_manifest(&path).unwrap();
    assert_eq!(
        entries,
        vec![
            (dir.path().join("s/a.skel"), 3),
            (dir.path().join("b.skel"), 0)
        ]
    );
}

fn seq_from_fn(t: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> SkeletonSequence {
    let mut coords = Vec::new();
    for ti in 0..t {
        for j in 0..NUM_JOINTS {
            let (x, y) = f(ti, j);
            coords.extend([x, y]);
        }
    }
    SkeletonSequence::new(coords, t, 2, Some(0)).unwrap()
}

#[test]
fn normalize_spans_unit_interval() {
    let seq = seq_from_fn(3, |t, j| ((t * 26 + j) as f64 * 10.0 / 77.0, 4.0));
    let n = normalize_coords(&seq).unwrap();
    let xs: Vec<f64> = n.coords().chunks(2).map(|p| p[0]).collect();
    assert_eq!(xs.iter().copied().fold(f64::INFINITY, f64::min), -1.0);
    assert_eq!(xs.iter().copied().fold(f64::NEG_INFINITY, f64::max), 1.0);
    assert!(n.coords().chunks(2).all(|p| p[1] == 0.0));
}

#[test]
fn normalize_degenerate() {
    let seq = seq_from_fn(3, |_, _| (1.0, 2.0));
    assert!(matches!(
        normalize_coords(&seq),
        Err(Error::DegenerateInput(_))
    ));
}

#[test]
fn identity_augmentation_is_exact() {
    let seq = synth_generate(&spec(2, 3, 25), 0.01, 9).unwrap();
    let out = augment(&seq, &AugmentSpec::identity(123)).unwrap();
    assert_eq!(out, seq);
    let via_new = AugmentSpec::new(0.0, (1.0, 1.0), 0.0, (1.0, 1.0), 5).unwrap();
    assert_eq!(augment(&seq, &via_new).unwrap(), seq);
}

#[test]
fn augment_spec_validation() {
    assert!(AugmentSpec::new(-0.1, (1.0, 1.0), 0.0, (1.0, 1.0), 0).is_err());
    assert!(AugmentSpec::new(0.1, (1.1, 1.2), 0.0, (1.0, 1.0), 0).is_err());
    assert!(AugmentSpec::new(0.1, (0.0, 1.2), 0.0, (1.0, 1.0), 0).is_err());
    assert!(AugmentSpec::new(0.1, (1.0, 1.0), -1.0, (1.0, 1.0), 0).is_err());
    assert!(AugmentSpec::new(0.1, (0.9, 1.1), 0.01, (0.8, 1.2), 0).is_ok());
}

#[test]
fn rotation_preserves_distances() {
    let seq = synth_generate(&spec(4, 0, 12), 0.0, 3).unwrap();
    for seed in 0..5 {
        let aug = AugmentSpec::new(1.5, (1.0, 1.0), 0.0, (1.0, 1.0), seed).unwrap();
        let out = augment(&seq, &aug).unwrap();
        assert_ne!(out, seq);
        for t in 0..seq.num_frames() {
            for a in 0..NUM_JOINTS {
                for b in a + 1..NUM_JOINTS {
                    let before = dist(seq.point(t, a), seq.point(t, b));
                    let after = dist(out.point(t, a), out.point(t, b));
                    assert!((before - after).abs() < 1e-9);
                }
            }
        }
    }
}

#[test]
fn stretch_doubles_length_and_keeps_endpoints() {
    let seq = synth_generate(&spec(0, 1, 30), 0.0, 3).unwrap();
    let out = time_stretch(&seq, 2.0).unwrap();
    assert_eq!(out.num_frames(), 60);
    assert_eq!(out.frame(0), seq.frame(0));
    assert_eq!(out.frame(59), seq.frame(29));
}

#[test]
fn synth_is_deterministic_and_shaped() {
    let s = spec(3, 2, 40);
    let a = synth_generate(&s, 0.02, 77).unwrap();
    let b = synth_generate(&s, 0.02, 77).unwrap();
    assert_eq!(
        a.coords().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
        b.coords().iter().map(|x| x.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(
        (a.num_frames(), a.dims(), a.coords().len()),
        (40, 2, 40 * 26 * 2)
    );
    assert_ne!(a, synth_generate(&s, 0.02, 78).unwrap());
}

#[test]
fn synth_face_is_static_without_noise() {
    let seq = synth_generate(&spec(1, 3, 20), 0.0, 4).unwrap();
    for t in 1..20 {
        for j in FACE_JOINTS {
            assert_eq!(seq.point(t, j), seq.point(0, j));
        }
    }
}

#[test]
fn frame_dropout_counts() {
    let seq = seq_from_fn(20, |t, j| (t as f64, j as f64));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    assert_eq!(drop_frames(&seq, 0.0, &mut rng).unwrap(), seq);
    let d = drop_frames(&seq, 0.15, &mut rng).unwrap();
    assert_eq!(d.num_frames(), 17);
    // surviving frames keep their original order
    let originals: Vec<usize> = (0..17)
        .map(|t| (0..20).find(|&s| seq.frame(s) == d.frame(t)).unwrap())
        .collect();
    assert!(originals.windows(2).all(|w| w[0] < w[1]));

    let short = synth_generate(&spec(0, 0, 3), 0.0, 1).unwrap();
    assert_eq!(drop_frames(&short, 0.5, &mut rng).unwrap().num_frames(), 2);
    assert!(matches!(
        drop_frames(&short, 0.67, &mut rng),
        Err(Error::TooFewFrames { remaining: 1 })
    ));
    assert!(drop_frames(&seq, 1.0, &mut rng).is_err());
}

#[test]
fn sway_moves_everything_together() {
    let seq = synth_generate(&spec(2, 1, 30), 0.0, 8).unwrap();
    let swayed = apply_camera_sway(&seq, 0.2, 3).unwrap();
    for t in 0..30 {
        let shift: Vec<f64> = swayed
            .point(t, 0)
            .iter()
            .zip(seq.point(t, 0))
            .map(|(a, b)| a - b)
            .collect();
        for j in 1..NUM_JOINTS {
            for k in 0..2 {
                let s = swayed.point(t, j)[k] - seq.point(t, j)[k];
                assert!((s - shift[k]).abs() < 1e-12);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generated_sequences_are_valid(seed in any::<u64>(), shape in 0..NUM_SHAPES, traj in 0..NUM_TRAJS, t in 2usize..50, noise in 0.0f64..0.05) {
        let seq = synth_generate(&spec(shape, traj, t), noise, seed).unwrap();
        prop_assert!(seq.validate().is_ok());
        prop_assert_eq!(seq.num_frames(), t);
    }

    #[test]
    fn normalized_coords_in_unit_box(seed in any::<u64>(), t in 2usize..30) {
        let seq = synth_generate(&spec(1, 2, t), 0.03, seed).unwrap();
        let n = normalize_coords(&seq).unwrap();
        prop_assert!(n.coords().iter().all(|x| (-1.0..=1.0).contains(x)));
        let nn = normalize_coords(&n).unwrap();
        for (a, b) in n.coords().iter().zip(nn.coords()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn augmented_sequences_stay_valid(seed in any::<u64>()) {
        let seq = synth_generate(&spec(0, 4, 20), 0.01, seed).unwrap();
        let aug = AugmentSpec::new(0.3, (0.8, 1.2), 0.01, (0.7, 1.4), seed).unwrap();
        let out = augment(&seq, &aug).unwrap();
        prop_assert!(out.validate().is_ok());
        prop_assert!(out.num_frames() >= 14 && out.num_frames() <= 28);
    }

    #[test]
    fn save_load_round_trip(seed in any::<u64>(), class in proptest::option::of(0usize..10)) {
        let mut seq = synth_generate(&spec(5, 0, 4), 0.1, seed).unwrap();
        seq.class_id = class;
        let back = SkeletonSequence::from_text(&seq.to_text()).unwrap();
        prop_assert_eq!(back, seq);
    }
}
