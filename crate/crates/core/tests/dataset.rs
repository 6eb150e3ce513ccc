use islab_core::dataset::{build_manifest, read_image, write_image, Layout, Manifest};
use islab_core::domain::{ImagePlane, Modality, Organelle, CHANNEL_ORDER};
use islab_core::synthgen::{generate_dataset, SynthConfig};
use proptest::prelude::*;

#[test]
fn every_u16_value_survives_a_tiff_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let plane = ImagePlane::from_fn(256, 256, |y, x| (y * 256 + x) as u16);
    let path = dir.path().join("all.tif");
    write_image(&plane, &path).unwrap();
    assert_eq!(read_image(&path).unwrap(), plane);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn arbitrary_planes_round_trip(h in 1usize..40, w in 1usize..40, seed in any::<u64>()) {
        let dir = tempfile::tempdir().unwrap();
        let mut s = seed;
        let plane = ImagePlane::from_fn(h, w, |_, _| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 48) as u16
        });
        let path = dir.path().join("p.tif");
        write_image(&plane, &path).unwrap();
        prop_assert_eq!(read_image(&path).unwrap(), plane);
    }
}

#[test]
fn generation_and_manifest_are_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig::new(12, 32, 9);
    let ma = generate_dataset(&cfg, a.path()).unwrap();
    let mb = generate_dataset(&cfg, b.path()).unwrap();
    assert_eq!(ma.entries, mb.entries);
    assert_eq!(build_manifest(a.path(), &Layout::default()).unwrap().entries, ma.entries);
    for e in &ma.entries {
        let (sa, sb) = (ma.load_sample(e).unwrap(), mb.load_sample(e).unwrap());
        assert_eq!(sa.input, sb.input);
        assert_eq!(sa.targets, sb.targets);
    }
    let text = ma.to_toml().unwrap();
    assert_eq!(Manifest::from_toml(&text).unwrap().entries, ma.entries);
}

#[test]
fn synthetic_label_frequencies_follow_the_expected_ordering() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&SynthConfig::new(100, 32, 2), dir.path()).unwrap();
    assert_eq!(m.entries.len(), 100);
    let count = |o: Organelle| m.entries.iter().filter(|e| e.availability().has(o)).count();
    let [mi, nu, tu, ac] = CHANNEL_ORDER.map(count);
    assert!(nu >= mi && mi > tu && tu >= ac, "M={mi} N={nu} T={tu} A={ac}");
    assert!(m.entries.iter().all(|e| !(e.modality == Modality::DIC && e.availability().has(Organelle::Actin))));
    for mo in Modality::ALL {
        assert!(m.entries.iter().any(|e| e.modality == mo), "no {mo} samples");
    }
}
