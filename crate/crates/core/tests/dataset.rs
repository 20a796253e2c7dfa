use protores::data::*;
use protores::geometry::{quaternion_to_matrix, Mat3, Quat, Vec3};
use protores::{Error, Pose, SkeletonSpec};
use proptest::prelude::*;

fn small() -> PoseDataset {
    synthetic_dataset(&SkeletonSpec::minimal(), 10, 6, 3).unwrap()
}

#[test]
fn save_load_round_trip_is_bit_exact() {
    let ds = small();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.prsd");
    save_dataset(&ds, &path).unwrap();
    let back = load_dataset(&path, &ds.skeleton).unwrap();
    assert_eq!(back, ds);
    let again = dir.path().join("e.prsd");
    save_dataset(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
    assert_eq!(std::fs::read(sidecar_path(&path)).unwrap(), std::fs::read(sidecar_path(&again)).unwrap());
    assert_eq!(std::fs::metadata(&path).unwrap().len() as usize, 20 + 60 * (12 + 16 * 5));
}

#[test]
fn loader_rejects_bad_headers() {
    let ds = small();
    let mut bytes = encode_dataset(&ds);
    assert!(matches!(decode_dataset(&bytes[..bytes.len() - 1], &ds.skeleton, None), Err(Error::Format(_))));
    bytes[4] = 2;
    assert!(matches!(decode_dataset(&bytes, &ds.skeleton, None), Err(Error::Format(_))));
    bytes[0] = b'Q';
    assert!(matches!(decode_dataset(&bytes, &ds.skeleton, None), Err(Error::Format(_))));
}

fn header(skel: &SkeletonSpec, suffixes: &[&str]) -> String {
    let mut cols = vec!["root_x".to_string(), "root_y".into(), "root_z".into()];
    for j in &skel.joints {
        cols.extend(suffixes.iter().map(|s| format!("{}_{s}", j.name)));
    }
    cols.join(",")
}

#[test]
fn identity_row_imports_as_identity_quaternions() {
    let skel = SkeletonSpec::minimal();
    let mut row = vec!["0.5", "1.0", "0.0"];
    for _ in 0..5 {
        row.extend(["0", "0", "0", "1"]);
    }
    let text = format!("{}\n{}\n", header(&skel, &["qx", "qy", "qz", "qw"]), row.join(","));
    let (ds, report) = import_csv_str(&text, &skel, &CsvSpec::default()).unwrap();
    assert_eq!(report.rows, 1);
    assert_eq!(report.max_fk_deviation, None);
    assert_eq!(ds.frames.len(), 1);
    assert!(ds.clips.is_none());
    for q in &ds.frames[0].rotations {
        assert_eq!([q.i, q.j, q.k, q.w], [0.0, 0.0, 0.0, 1.0]);
    }
}

// Independent Z·Y·X composition written out entry by entry.
fn zyx(a: f64, b: f64, c: f64) -> Mat3 {
    let (sa, ca) = a.sin_cos();
    let (sb, cb) = b.sin_cos();
    let (sc, cc) = c.sin_cos();
    Mat3::new(
        ca * cb,
        ca * sb * sc - sa * cc,
        ca * sb * cc + sa * sc,
        sa * cb,
        sa * sb * sc + ca * cc,
        sa * sb * cc - ca * sc,
        -sb,
        cb * sc,
        cb * cc,
    )
}

#[test]
fn euler_columns_convert_to_matching_rotations() {
    let skel = SkeletonSpec::minimal();
    let angles: Vec<[f64; 3]> = (0..5).map(|k| [0.3 * k as f64 - 0.5, 0.2 - 0.1 * k as f64, 1.1 - 0.4 * k as f64]).collect();
    let mut row = vec!["0".to_string(), "1".into(), "0".into()];
    for a in &angles {
        row.extend(a.iter().map(|v| v.to_degrees().to_string()));
    }
    let text = format!("{}\n{}\n", header(&skel, &["rz", "ry", "rx"]), row.join(","));
    let spec = CsvSpec { rotations: RotationColumns::EulerDegrees, ..CsvSpec::default() };
    let (ds, _) = import_csv_str(&text, &skel, &spec).unwrap();
    for (q, a) in ds.frames[0].rotations.iter().zip(&angles) {
        let got = quaternion_to_matrix(q).unwrap();
        assert!((got - zyx(a[0], a[1], a[2])).norm() < 1e-6);
    }
}

#[test]
fn malformed_number_names_row_and_column() {
    let skel = SkeletonSpec::minimal();
    let mut good = vec!["0", "1", "0"];
    for _ in 0..5 {
        good.extend(["0", "0", "0", "1"]);
    }
    let mut bad = good.clone();
    bad[7] = "1.0.0";
    let text = format!("{}\n{}\n{}\n", header(&skel, &["qx", "qy", "qz", "qw"]), good.join(","), bad.join(","));
    let msg = import_csv_str(&text, &skel, &CsvSpec::default()).unwrap_err().to_string();
    assert!(msg.contains("row 3"), "{msg}");
    assert!(msg.contains("ArmLeft_qx"), "{msg}");
}

#[test]
fn exported_csv_reimports_and_passes_fk_check() {
    let ds = small();
    let text = export_csv(&ds).unwrap();
    let (back, report) = import_csv_str(&text, &ds.skeleton, &CsvSpec::default()).unwrap();
    assert!(report.max_fk_deviation.unwrap() < 1e-6);
    assert_eq!(back.clips, ds.clips);
    assert_eq!(back.frames.len(), ds.frames.len());
}

#[test]
fn fk_mismatch_is_reported_with_the_worst_joint() {
    let ds = small();
    let text = export_csv(&ds).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    let cols: Vec<&str> = lines[0].split(',').collect();
    let target = cols.iter().position(|c| *c == "LegRight_py").unwrap();
    let mut fields: Vec<String> = lines[4].split(',').map(String::from).collect();
    let v: f64 = fields[target].parse().unwrap();
    fields[target] = (v + 0.05).to_string();
    lines[4] = fields.join(",");
    let err = import_csv_str(&lines.join("\n"), &ds.skeleton, &CsvSpec::default()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Data(_)));
    assert!(msg.contains("LegRight") && msg.contains("row 5"), "{msg}");
}

#[test]
fn ten_clips_split_eight_one_one() {
    let ds = small();
    let (train, valid, test) = split_by_clip(&ds, [0.8, 0.1, 0.1], 5).unwrap();
    let count = |d: &PoseDataset| d.clips.as_ref().unwrap().len();
    assert_eq!((count(&train), count(&valid), count(&test)), (8, 1, 1));
    let again = split_by_clip(&ds, [0.8, 0.1, 0.1], 5).unwrap();
    assert_eq!((train.clone(), valid.clone(), test.clone()), again);
    let mut ids: Vec<String> = [&train, &valid, &test]
        .iter()
        .flat_map(|d| d.clips.as_ref().unwrap().iter().map(|c| c.id.clone()))
        .collect();
    ids.sort();
    let mut all: Vec<String> = ds.clips.as_ref().unwrap().iter().map(|c| c.id.clone()).collect();
    all.sort();
    assert_eq!(ids, all);
    assert_eq!(train.len() + valid.len() + test.len(), ds.len());
}

#[test]
fn subsampling() {
    let skel = SkeletonSpec::minimal();
    let ds = synthetic_dataset(&skel, 10, 100, 1).unwrap();
    assert_eq!(subsample_frames(&ds, 1.0, 3).unwrap().frames, ds.frames);
    let sub = subsample_frames(&ds, 0.1, 3).unwrap();
    assert_eq!(sub.len(), 100);
    assert!(sub.clips.is_none());
    assert_eq!(sub, subsample_frames(&ds, 0.1, 3).unwrap());
    assert_ne!(sub, subsample_frames(&ds, 0.1, 4).unwrap());
    // order preserved: every kept frame appears in the source after the previous one
    let mut cursor = 0;
    for f in &sub.frames {
        cursor += ds.frames[cursor..].iter().position(|g| g == f).unwrap() + 1;
    }
    assert!(subsample_frames(&ds, 0.0, 1).is_err());
}

#[test]
fn constant_dataset_has_zero_spread() {
    let skel = SkeletonSpec::minimal();
    let ds = PoseDataset::new(skel.clone(), vec![Pose::rest(5); 4], None).unwrap();
    let stats = dataset_stats(&ds).unwrap();
    assert!(stats.position_std.iter().flatten().all(|v| *v == 0.0));
    assert!(stats.quaternion_std.iter().flatten().all(|v| *v == 0.0));
}

#[test]
fn two_frame_stats_match_closed_form() {
    let skel = SkeletonSpec::minimal();
    let theta: f64 = 0.8;
    let a = Pose::rest(5);
    let mut b = Pose::rest(5);
    b.root_position = Vec3::new(3.0, 0.0, 0.0);
    // root turns about Y, joint 2 about Z
    let (s, c) = (theta / 2.0).sin_cos();
    b.rotations[0] = Quat::new(c, 0.0, s, 0.0);
    b.rotations[2] = Quat::new(c, 0.0, 0.0, s);
    let ds = PoseDataset::new(skel.clone(), vec![a, b], None).unwrap();
    let stats = dataset_stats(&ds).unwrap();

    assert_eq!(stats.position_std[0], [0.0; 3]);
    // Two samples: population std is half the absolute difference.
    let o = Vec3::new(0.3, 0.4, 0.0);
    let turned = Vec3::new(o.x * theta.cos() + o.z * theta.sin(), o.y, -o.x * theta.sin() + o.z * theta.cos());
    let want = (turned - o).abs() / 2.0;
    for k in 0..3 {
        assert!((stats.position_std[1][k] - want[k]).abs() < 1e-12);
    }
    let q = stats.quaternion_std[2];
    assert!(q[0].abs() < 1e-15 && q[1].abs() < 1e-15);
    assert!((q[2] - s / 2.0).abs() < 1e-12);
    assert!((q[3] - (1.0 - c) / 2.0).abs() < 1e-12);
    assert!(stats.to_table().lines().count() == 6);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn stats_ignore_frame_order(seed in 0u64..1000, rot in 1usize..20) {
        let ds = synthetic_dataset(&SkeletonSpec::minimal(), 2, 10, seed).unwrap();
        let mut frames = ds.frames.clone();
        frames.rotate_left(rot);
        frames.reverse();
        let shuffled = PoseDataset::new(ds.skeleton.clone(), frames, None).unwrap();
        let a = dataset_stats(&ds).unwrap();
        let b = dataset_stats(&shuffled).unwrap();
        for (x, y) in a.position_std.iter().flatten().zip(b.position_std.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.quaternion_std.iter().flatten().zip(b.quaternion_std.iter().flatten()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn frame_level_split_partitions_frames(seed in 0u64..1000, n in 1usize..60) {
        let ds = synthetic_dataset(&SkeletonSpec::minimal(), 1, n, 9).unwrap();
        let frames_only = PoseDataset::new(ds.skeleton.clone(), ds.frames.clone(), None).unwrap();
        let (a, b, c) = split_by_clip(&frames_only, [0.8, 0.1, 0.1], seed).unwrap();
        prop_assert_eq!(a.len() + b.len() + c.len(), n);
        prop_assert!(a.clips.is_none());
        let mut seen = vec![false; n];
        for f in a.frames.iter().chain(&b.frames).chain(&c.frames) {
            let i = ds.frames.iter().position(|g| g == f).unwrap();
            prop_assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn loaded_frames_are_valid_poses(seed in 0u64..1000) {
        let ds = synthetic_dataset(&SkeletonSpec::minimal(), 2, 4, seed).unwrap();
        let back = decode_dataset(&encode_dataset(&ds), &ds.skeleton, ds.clips.clone()).unwrap();
        for f in &back.frames {
            prop_assert!(f.validate(&ds.skeleton, 1e-3).is_ok());
        }
    }
}
