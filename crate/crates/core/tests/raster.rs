mod common;

use common::{rng, uniform};
use heightfuse::raster::{
    denormalize, normalize, read_tiff, stack_early_fusion, write_tiff, NormalizationSpec, RasterTile, Samples,
};
use proptest::prelude::*;

fn samples_strategy() -> impl Strategy<Value = (usize, usize, usize, Samples)> {
    (1usize..40, 1usize..40, 1usize..=4, 0u8..3).prop_flat_map(|(w, h, b, kind)| {
        let n = w * h * b;
        let s = match kind {
            0 => prop::collection::vec(any::<u8>(), n).prop_map(Samples::U8).boxed(),
            1 => prop::collection::vec(any::<u16>(), n).prop_map(Samples::U16).boxed(),
            _ => prop::collection::vec(any::<f32>(), n).prop_map(Samples::F32).boxed(),
        };
        (Just(w), Just(h), Just(b), s)
    })
}

fn same_bits(a: &Samples, b: &Samples) -> bool {
    match (a, b) {
        (Samples::U8(x), Samples::U8(y)) => x == y,
        (Samples::U16(x), Samples::U16(y)) => x == y,
        (Samples::F32(x), Samples::F32(y)) => x.iter().zip(y).all(|(p, q)| p.to_bits() == q.to_bits()),
        _ => false,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn tiff_roundtrip_is_bit_exact((w, h, b, samples) in samples_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        let tile = RasterTile::new("t", w, h, b, samples).unwrap();
        let path = dir.path().join("t.tif");
        write_tiff(&tile, &path).unwrap();
        let back = read_tiff(&path).unwrap();
        prop_assert_eq!((back.width(), back.height(), back.bands()), (w, h, b));
        prop_assert!(same_bits(tile.samples(), back.samples()));
    }
}

#[test]
fn full_size_rgb_tile_dimensions() {
    let dir = tempfile::tempdir().unwrap();
    let px: Vec<u8> = (0..512 * 512 * 3).map(|i| (i % 251) as u8).collect();
    let tile = RasterTile::new("tile_0421", 512, 512, 3, Samples::U8(px)).unwrap();
    let path = dir.path().join("tile_0421.tif");
    write_tiff(&tile, &path).unwrap();
    let back = read_tiff(&path).unwrap();
    assert_eq!((back.width(), back.height(), back.bands()), (512, 512, 3));
    assert_eq!(back.name(), "tile_0421");
    assert_eq!(back, tile);
}

#[test]
fn normalize_roundtrip_and_self_statistics() {
    let mut r = rng(4);
    let t = uniform(&[3 * 20 * 10], 0.0, 255.0, &mut r);
    let px: Vec<f32> = t.data().iter().map(|v| *v as f32).collect();
    let tile = RasterTile::new("x", 10, 20, 3, Samples::F32(px)).unwrap();
    let own = NormalizationSpec::from_tiles([&tile]).unwrap();
    let n = normalize(&tile, &own).unwrap();
    for band in n.data().chunks(200) {
        assert!((band.iter().sum::<f64>() / 200.0).abs() < 1e-9);
    }
    let back = denormalize(&n, &own).unwrap();
    assert!(back.data().iter().zip(tile.to_tensor().data()).all(|(a, b)| (a - b).abs() < 1e-9));
}

#[test]
fn early_stack_keeps_sar_as_fourth_channel() {
    let mut r = rng(1);
    let rgb = uniform(&[1, 3, 8, 8], -1.0, 1.0, &mut r);
    let sar = uniform(&[1, 1, 8, 8], -1.0, 1.0, &mut r);
    let s = stack_early_fusion(&rgb, &sar).unwrap();
    assert_eq!(s.shape(), &[1, 4, 8, 8]);
    assert_eq!(&s.data()[3 * 64..], sar.data());
    assert_eq!(&s.data()[..3 * 64], rgb.data());
    assert!(stack_early_fusion(&rgb, &uniform(&[1, 1, 4, 8], 0.0, 1.0, &mut r)).is_err());
}
