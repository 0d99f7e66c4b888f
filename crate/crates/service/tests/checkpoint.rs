use dragnoise_core::tensor::Tensor;
use dragnoise_core::unet::{ArchConfig, UNet};
use dragnoise_service::checkpoint::{
    decode_model, encode_model, load_checkpoint, load_ddim_state, save_checkpoint, save_ddim_state,
    CheckpointError, Container, FORMAT_VERSION, MAGIC,
};

fn small() -> UNet<f32> {
    let cfg = ArchConfig {
        image_size: 16,
        in_channels: 1,
        channel_widths: vec![8, 8, 16],
        time_embed_dim: 16,
        groups: 4,
    };
    UNet::init(cfg, 11).unwrap()
}

#[test]
fn save_then_load_is_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.dnck");
    let net = small();
    save_checkpoint(&net, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back.config, net.config);
    assert!(back.params.bits_eq(&net.params));
    assert!(!dir.path().join("m.partial").exists());
}

#[test]
fn layout_matches_declared_format() {
    let bytes = encode_model(&small());
    assert_eq!(&bytes[..4], MAGIC);
    assert_eq!(
        u32::from_le_bytes(bytes[4..8].try_into().unwrap()),
        FORMAT_VERSION
    );
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let header: serde_json::Value = serde_json::from_slice(&bytes[12..12 + hlen]).unwrap();
    assert_eq!(header["image_size"], 16);
    let count = u32::from_le_bytes(bytes[12 + hlen..16 + hlen].try_into().unwrap()) as usize;
    assert_eq!(count, small().params.len());
}

#[test]
fn every_truncation_is_reported_without_a_model() {
    let bytes = encode_model(&small());
    for cut in [0, 3, 7, 11, 20, 100, bytes.len() / 2, bytes.len() - 1] {
        match decode_model(&bytes[..cut]) {
            Err(CheckpointError::Truncated(_)) => {}
            Err(CheckpointError::BadMagic(_)) if cut < 4 => {}
            other => panic!("cut {cut}: {:?}", other.map(|_| ())),
        }
    }
}

#[test]
fn wrong_magic_and_version_are_distinct_errors() {
    let mut bytes = encode_model(&small());
    bytes[0] = b'X';
    assert!(matches!(
        decode_model(&bytes),
        Err(CheckpointError::BadMagic(_))
    ));
    let mut bytes = encode_model(&small());
    bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
    assert!(matches!(
        decode_model(&bytes),
        Err(CheckpointError::UnsupportedVersion(7))
    ));
}

#[test]
fn corrupt_header_and_trailing_bytes_are_rejected() {
    let c = Container {
        header: "{not json".into(),
        tensors: vec![],
    };
    assert!(matches!(
        decode_model(&c.encode()),
        Err(CheckpointError::Corrupt(_))
    ));
    let mut bytes = encode_model(&small());
    bytes.push(0);
    assert!(matches!(
        decode_model(&bytes),
        Err(CheckpointError::Corrupt(_))
    ));
}

#[test]
fn missing_parameter_is_rejected() {
    let net = small();
    let c = Container {
        header: serde_json::to_string(&net.config).unwrap(),
        tensors: net
            .params
            .iter()
            .skip(1)
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };
    assert!(matches!(
        decode_model(&c.encode()),
        Err(CheckpointError::Corrupt(_))
    ));
}

#[test]
fn container_round_trips_arbitrary_tensors() {
    let c = Container {
        header: "{}".into(),
        tensors: vec![
            ("scalar".into(), Tensor::scalar(f32::MIN_POSITIVE)),
            (
                "neg_zero".into(),
                Tensor::new([2], vec![-0.0, f32::MAX]).unwrap(),
            ),
            (
                "grid".into(),
                Tensor::from_fn([2, 3, 4], |i| i as f32 * 0.1),
            ),
        ],
    };
    let back = Container::decode(&c.encode()).unwrap();
    assert_eq!(back.header, c.header);
    for ((na, a), (nb, b)) in c.tensors.iter().zip(&back.tensors) {
        assert_eq!(na, nb);
        assert!(a.bits_eq(b));
    }
}

#[test]
fn ddim_state_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("z.dnck");
    let z = Tensor::from_fn([1, 1, 4, 4], |i| (i as f32).sin());
    save_ddim_state(&z, 35, &path).unwrap();
    let (back, k) = load_ddim_state(&path).unwrap();
    assert_eq!(k, 35);
    assert!(back.bits_eq(&z));
    // A model file is not a state file.
    let mpath = dir.path().join("m.dnck");
    save_checkpoint(&small(), &mpath).unwrap();
    assert!(load_ddim_state(&mpath).is_err());
}
