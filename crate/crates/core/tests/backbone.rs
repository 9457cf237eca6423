mod common;

use std::path::Path;

use common::*;
use nst_core::archive::Archive;
use nst_core::backbone::{Preprocessing, MIN_INPUT};
use nst_core::{fixtures, load_backbone, Backbone, BackboneConfig, Device, Error, LayerId, Tensor};
use proptest::prelude::*;

fn write(bb: &Backbone, dir: &Path, name: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    bb.save(&p).unwrap();
    p
}

#[test]
fn load_round_trips_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let bb = Backbone::synthetic(3, 7);
    let path = write(&bb, dir.path(), "vgg.safetensors");
    let a = load_backbone(&path, Device::Cpu, None).unwrap();
    let b = load_backbone(&path, Device::Cpu, None).unwrap();
    assert_eq!(a.depth(), 7);
    assert_eq!(a.cast::<f32>().conv(layer("conv3_3")), bb.conv(layer("conv3_3")));
    assert_eq!(a, b);
    assert!(a.provenance.contains("sha256:"));

    let archive = Archive::load(&path).unwrap();
    assert_eq!(archive.get("conv1_1.weight").unwrap().shape, vec![64, 3, 3, 3]);
    assert_eq!(archive.get("conv3_3.weight").unwrap().shape, vec![256, 256, 3, 3]);
}

#[test]
fn missing_file_is_an_io_error_naming_the_path() {
    let err = load_backbone(Path::new("/nonexistent/vgg16.safetensors"), Device::Cpu, None).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("/nonexistent/vgg16.safetensors"));
}

#[test]
fn truncated_tensor_is_a_shape_error_naming_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let mut archive = Backbone::synthetic(0, 2).to_archive();
    let w = archive.tensors.get_mut("conv1_1.weight").unwrap();
    w.shape = vec![32, 3, 3, 3];
    w.data.truncate(32 * 27);
    let path = dir.path().join("bad.safetensors");
    archive.save(&path).unwrap();
    match load_backbone(&path, Device::Cpu, None).unwrap_err() {
        Error::ShapeMismatch { name, expected, found } => {
            assert_eq!(name, "conv1_1.weight");
            assert_eq!(expected, vec![64, 3, 3, 3]);
            assert_eq!(found, vec![32, 3, 3, 3]);
        }
        e => panic!("unexpected {e}"),
    }
}

#[test]
fn archive_defects_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    // A gap in the layer prefix.
    let mut gap = Backbone::synthetic(0, 4).to_archive();
    gap.tensors.remove("conv1_2.weight");
    let p = dir.path().join("gap.safetensors");
    gap.save(&p).unwrap();
    let e = load_backbone(&p, Device::Cpu, None).unwrap_err().to_string();
    assert!(e.contains("conv2_1") && e.contains("conv1_2"), "{e}");

    // No first layer at all.
    let mut empty = Backbone::synthetic(0, 1).to_archive();
    empty.tensors.clear();
    let p = dir.path().join("empty.safetensors");
    empty.save(&p).unwrap();
    assert!(matches!(load_backbone(&p, Device::Cpu, None), Err(Error::MissingTensor(n)) if n == "conv1_1.weight"));

    // Pinned digest mismatch.
    let p = write(&Backbone::synthetic(0, 1), dir.path(), "ok.safetensors");
    let e = load_backbone(&p, Device::Cpu, Some(&"0".repeat(64))).unwrap_err().to_string();
    assert!(e.contains("does not match"), "{e}");

    // Garbage bytes.
    let p = dir.path().join("junk.safetensors");
    std::fs::write(&p, b"not an archive").unwrap();
    assert!(matches!(load_backbone(&p, Device::Cpu, None), Err(Error::Archive { .. })));
}

#[test]
fn pinned_digest_accepts_the_right_file() {
    use sha2::Digest;
    let dir = tempfile::tempdir().unwrap();
    let p = write(&Backbone::synthetic(0, 1), dir.path(), "ok.safetensors");
    let digest = hex::encode(sha2::Sha256::digest(std::fs::read(&p).unwrap()));
    let bb = load_backbone(&p, Device::Cpu, Some(&digest.to_uppercase())).unwrap();
    assert!(bb.provenance.ends_with(&digest));
}

#[test]
fn preprocessing_is_recorded_in_the_archive() {
    let dir = tempfile::tempdir().unwrap();
    let mut bb = Backbone::synthetic(0, 1);
    bb.preprocessing = Preprocessing::TORCHVISION;
    let p = write(&bb, dir.path(), "tv.safetensors");
    assert_eq!(load_backbone(&p, Device::Cpu, None).unwrap().preprocessing, Preprocessing::TORCHVISION);
    assert_eq!(Backbone::synthetic(0, 1).preprocessing, Preprocessing::CAFFE);
}

#[test]
fn feature_dimensions_at_256() {
    let bb = Backbone::synthetic(0, 7);
    let img = fixtures::content_image(1, 256, 256);
    let feats = bb.extract_features(&img, &layers(&["conv1_2", "conv3_3"])).unwrap();
    let keys: Vec<String> = feats.keys().map(|l| l.to_string()).collect();
    assert_eq!(keys, ["conv1_2", "conv3_3"]);
    assert_eq!((feats[&layer("conv3_3")].channels(), feats[&layer("conv3_3")].positions()), (256, 4096));
    assert_eq!((feats[&layer("conv1_2")].channels(), feats[&layer("conv1_2")].positions()), (64, 65536));
    assert!(feats.values().all(|f| f.data().iter().all(|v| v.is_finite() && *v >= 0.0)));
}

#[test]
fn invalid_inputs_are_rejected() {
    let bb = Backbone::synthetic(0, 4);
    let small = Tensor::<f32>::zeros(3, MIN_INPUT - 1, 64);
    assert!(matches!(bb.extract(&small, &[layer("conv1_1")]), Err(Error::ImageTooSmall { min: 32, .. })));
    let ok = Tensor::<f32>::zeros(3, 32, 32);
    match bb.extract(&ok, &[layer("conv1_1"), layer("conv4_3")]) {
        Err(Error::TapTooDeep { layer, available }) => assert_eq!((layer.as_str(), available), ("conv4_3", 4)),
        other => panic!("{other:?}"),
    }
    assert!(bb.extract(&Tensor::<f32>::zeros(1, 32, 32), &[layer("conv1_1")]).is_err());
    assert!("conv2_3".parse::<LayerId>().is_err());
    assert!("gpu".parse::<Device>().unwrap_err().is_config());

    let cfg = BackboneConfig::default();
    assert_eq!(cfg.load(&layers(&["conv1_2", "conv3_3"])).unwrap().depth(), 7);
    let dir = tempfile::tempdir().unwrap();
    let p = write(&Backbone::synthetic(0, 2), dir.path(), "short.safetensors");
    let cfg = BackboneConfig { weights: Some(p), ..BackboneConfig::default() };
    assert!(matches!(cfg.load(&layers(&["conv3_3"])), Err(Error::TapTooDeep { .. })));
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, ..ProptestConfig::default() })]

    #[test]
    fn extraction_is_deterministic_and_tap_consistent(h in 32usize..72, w in 32usize..72, seed in 0u64..100) {
        let bb = Backbone::synthetic(0, 7);
        let img = fixtures::content_image(seed, h, w);
        let all = layers(&["conv1_2", "conv2_2", "conv3_3"]);
        let a = bb.extract_features(&img, &all).unwrap();
        let b = bb.extract_features(&img, &all).unwrap();
        prop_assert_eq!(&a, &b);
        let only = bb.extract_features(&img, &layers(&["conv2_2"])).unwrap();
        prop_assert_eq!(only.len(), 1);
        prop_assert_eq!(&only[&layer("conv2_2")], &a[&layer("conv2_2")]);
        for l in &all {
            let f = &a[l];
            let (fh, fw) = l.spatial(h, w);
            // Each 2×2 pool floors the spatial size.
            let pools = l.block() as u32 - 1;
            prop_assert_eq!((fh, fw), (h / 2usize.pow(pools), w / 2usize.pow(pools)));
            prop_assert_eq!(f.channels(), l.channels());
            prop_assert_eq!(f.positions(), fh * fw);
            prop_assert_eq!((f.tensor.height(), f.tensor.width()), (fh, fw));
        }
    }
}
