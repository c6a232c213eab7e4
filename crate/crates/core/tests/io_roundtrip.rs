use oneshot3d::io::{load_labels, load_scribbles, load_volume, save_labels, save_scribbles, save_volume, sidecar_path};
use oneshot3d::{LabelGrid, ScribbleSet, Volume3};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = [usize; 3]> {
    prop::array::uniform3(1usize..7)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn volumes_round_trip_bit_exactly(shape in dims(), spacing in prop::array::uniform3(0.1f64..5.0), seed in any::<u64>()) {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|i| f32::from_bits((seed as u32).wrapping_add((i as u32).wrapping_mul(2_654_435_761)) & 0x7f7f_ffff)).collect();
        let v = Volume3::new(shape, spacing, data).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.vol3");
        save_volume(&path, &v).unwrap();
        let back = load_volume(&path).unwrap();
        prop_assert_eq!(back.shape(), shape);
        prop_assert_eq!(back.spacing(), spacing);
        prop_assert!(back.data().iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn labels_and_scribbles_round_trip(shape in dims(), labels in prop::collection::vec(0u8..4, 216), picks in prop::collection::vec((0usize..216, 0u8..4), 1..20)) {
        let n: usize = shape.iter().product();
        let grid = LabelGrid::new(shape, [1.0, 2.0, 0.5], labels[..n].to_vec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_labels(&dir.path().join("l.labels"), &grid).unwrap();
        prop_assert_eq!(load_labels(&dir.path().join("l.labels")).unwrap(), grid);

        let mut s = ScribbleSet::new(4);
        for (i, label) in picks {
            s.push(oneshot3d::volume::voxel_of(shape, i % n), label);
        }
        let path = dir.path().join("s.scribble.json");
        save_scribbles(&path, &s).unwrap();
        let back = load_scribbles(&path, shape).unwrap();
        prop_assert_eq!(back.class_count, 4);
        prop_assert_eq!(back.points, s.points);
    }
}

#[test]
fn sidecar_layout_is_documented_json() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.vol3");
    let v = Volume3::new([2, 1, 3], [2.0, 1.0, 1.0], vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
    save_volume(&path, &v).unwrap();
    assert_eq!(std::fs::metadata(&path).unwrap().len(), 24);
    let sidecar: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(sidecar_path(&path)).unwrap()).unwrap();
    assert_eq!(sidecar["shape"], serde_json::json!([2, 1, 3]));
    assert_eq!(sidecar["spacing"], serde_json::json!([2.0, 1.0, 1.0]));
    assert_eq!(sidecar["dtype"], "f32");
    // a label loader must refuse an f32 volume
    assert!(load_labels(&path).is_err());
}
