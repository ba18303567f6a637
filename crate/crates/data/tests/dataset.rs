use htmnet_data::io::{read_f32r, read_pgm, read_ppm, read_u8r1, write_f32r, write_pgm};
use htmnet_data::{generate, list_scenes, load_dataset, write_dataset, DataError, Sample};
use proptest::prelude::*;

fn arb_sample() -> impl Strategy<Value = Sample> {
    (1usize..9, 1usize..9).prop_flat_map(|(h, w)| {
        let n = h * w;
        (
            prop::collection::vec(any::<u8>(), 3 * n),
            prop::collection::vec(any::<f32>(), n),
            prop::collection::vec(any::<f32>(), n),
            prop::collection::vec(0u8..2, n),
        )
            .prop_map(move |(rgb, depth_raw, depth_gt, mask)| Sample {
                height: h,
                width: w,
                rgb,
                depth_raw,
                depth_gt,
                mask,
            })
    })
}

fn bit_eq(a: &Sample, b: &Sample) -> bool {
    let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    a.height == b.height
        && a.width == b.width
        && a.rgb == b.rgb
        && a.mask == b.mask
        && bits(&a.depth_raw) == bits(&b.depth_raw)
        && bits(&a.depth_gt) == bits(&b.depth_gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sample_round_trip_is_bit_exact(s in arb_sample()) {
        let dir = tempfile::tempdir().unwrap();
        s.write(dir.path()).unwrap();
        prop_assert!(bit_eq(&Sample::read(dir.path()).unwrap(), &s));
    }

    #[test]
    fn grayscale_round_trip(h in 1usize..20, w in 1usize..20, seed in any::<u8>()) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("e.pgm");
        let data: Vec<u8> = (0..h * w).map(|i| (i as u8).wrapping_mul(seed)).collect();
        write_pgm(&path, h, w, &data).unwrap();
        let r = read_pgm(&path).unwrap();
        prop_assert_eq!((r.height, r.width, r.data), (h, w, data));
    }
}

#[test]
fn corrupted_files_name_themselves() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("depth.f32r");
    write_f32r(&path, 2, 3, &[1.0; 6]).unwrap();
    let mut bytes = std::fs::read(&path).unwrap();
    bytes.truncate(bytes.len() - 4);
    std::fs::write(&path, &bytes).unwrap();
    match read_f32r(&path) {
        Err(DataError::Truncated { expected: 24, found: 20, .. }) => {}
        other => panic!("{other:?}"),
    }
    bytes[0] = b'G';
    std::fs::write(&path, &bytes).unwrap();
    let err = read_f32r(&path).unwrap_err();
    assert!(err.to_string().contains("depth.f32r"), "{err}");
    assert!(matches!(read_u8r1(&path), Err(DataError::BadMagic { .. })));
    assert!(matches!(read_ppm(&path), Err(DataError::BadMagic { .. })));
    assert!(matches!(read_ppm(&dir.path().join("missing.ppm")), Err(DataError::Io { .. })));
}

#[test]
fn generation_is_deterministic() {
    let a = generate(7, 4, 32).unwrap();
    let b = generate(7, 4, 32).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| bit_eq(x, y)));
    let firsts: Vec<Sample> = (0..8).map(|s| generate(s, 1, 32).unwrap().remove(0)).collect();
    for i in 0..8 {
        for j in i + 1..8 {
            assert!(!bit_eq(&firsts[i], &firsts[j]), "seeds {i} and {j} collide");
        }
    }
}

#[test]
fn written_dataset_loads_back_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let samples = generate(3, 3, 16).unwrap();
    write_dataset(dir.path(), &samples).unwrap();
    std::fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
    let names: Vec<String> = list_scenes(dir.path())
        .unwrap()
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["scene_000000", "scene_000001", "scene_000002"]);
    let loaded = load_dataset(dir.path()).unwrap();
    assert!(loaded.iter().zip(&samples).all(|(a, b)| bit_eq(a, b)));
    assert!(load_dataset(&dir.path().join("scene_000000")).is_err());
}

#[test]
fn generated_scenes_honour_the_corruption_contract() {
    let samples = generate(11, 64, 48).unwrap();
    let (mut dropped, mut behind) = (0, 0);
    for (i, s) in samples.iter().enumerate() {
        s.validate().unwrap_or_else(|e| panic!("scene {i}: {e}"));
        assert!(s.mask.contains(&1), "scene {i} has no transparent pixels");
        for p in 0..s.pixels() {
            if s.mask[p] == 0 {
                assert_eq!(s.depth_raw[p].to_bits(), s.depth_gt[p].to_bits());
            } else if s.depth_raw[p] == 0.0 {
                dropped += 1;
            } else {
                assert!(s.depth_raw[p] >= s.depth_gt[p]);
                behind += 1;
            }
        }
        assert!(s.depth_gt.iter().all(|&d| (0.3..=10.0).contains(&d)));
    }
    assert!(dropped > 0 && behind > 0);
}
