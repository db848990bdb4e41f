use std::fs;

use feedkit_core::nn::{build_ntl, build_resnet};
use feedkit_core::{Arch, Network32, NtlStyle};
use feedkit_train::checkpoint::{checkpoint_hash, decode, encode, fnv1a, fnv1a_of_encoding};
use feedkit_train::{
    load_checkpoint, read_checkpoint, save_checkpoint, CheckpointMeta, TrainError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_net(r: &mut ChaCha8Rng) -> Network32 {
    let mut net = match r.gen_range(0..3) {
        0 => build_resnet::<f32>([8, 14, 20][r.gen_range(0..3)], r.gen_range(2..20), r.gen())
            .unwrap(),
        1 => build_ntl::<f32>(r.gen_range(1..12), NtlStyle::BnRelu, r.gen()).unwrap(),
        _ => build_ntl::<f32>(r.gen_range(1..12), NtlStyle::Plain, r.gen()).unwrap(),
    };
    // Perturb the running statistics too so buffers are exercised.
    let names: Vec<String> = net.buffers().keys().cloned().collect();
    for n in names {
        for v in net.state_mut(&n).unwrap().data_mut() {
            *v = r.gen_range(0.1..2.0);
        }
    }
    net
}

fn state_bits(net: &Network32) -> Vec<(String, Vec<usize>, Vec<u32>)> {
    net.state()
        .map(|(k, t)| {
            (
                k.clone(),
                t.shape().to_vec(),
                t.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

#[test]
fn round_trip_is_bitwise_on_random_networks() {
    let dir = tempfile::tempdir().unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(8);
    for i in 0..20 {
        let net = random_net(&mut r);
        let mut meta = CheckpointMeta::new(*net.arch(), i % 4, r.gen());
        meta.extra.insert("note".into(), format!("net{i}"));
        let p1 = dir.path().join(format!("a{i}.ckpt"));
        let p2 = dir.path().join(format!("b{i}.ckpt"));
        let h1 = save_checkpoint(&net, &meta, &p1).unwrap();
        let (back, meta_back) = load_checkpoint::<f32>(&p1).unwrap();
        assert_eq!(meta_back, meta);
        assert_eq!(state_bits(&back), state_bits(&net));
        let h2 = save_checkpoint(&back, &meta_back, &p2).unwrap();
        assert_eq!(h1, h2);
        assert_eq!(fs::read(&p1).unwrap(), fs::read(&p2).unwrap());
        assert_eq!(checkpoint_hash(&p1).unwrap(), h1);
    }
}

#[test]
fn trailing_hash_covers_all_preceding_bytes() {
    let net = build_ntl::<f32>(3, NtlStyle::Plain, 1).unwrap();
    let bytes = encode(&net, &CheckpointMeta::new(*net.arch(), 0, 1)).unwrap();
    assert_eq!(&bytes[..8], b"FEEDCKPT");
    assert_eq!(fnv1a_of_encoding(&bytes), fnv1a(&bytes[..bytes.len() - 8]));
    // FNV-1a 64 reference value for "a"
    assert_eq!(fnv1a(b"a"), 0xaf63dc4c8601ec8c);
}

#[test]
fn flipped_byte_is_reported_as_corruption() {
    let net = build_ntl::<f32>(3, NtlStyle::Plain, 1).unwrap();
    let mut bytes = encode(&net, &CheckpointMeta::new(*net.arch(), 0, 1)).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    assert!(matches!(decode(&bytes), Err(TrainError::Corruption(_))));
}

#[test]
fn truncation_reports_offset() {
    let net = build_ntl::<f32>(3, NtlStyle::Plain, 1).unwrap();
    let bytes = encode(&net, &CheckpointMeta::new(*net.arch(), 0, 1)).unwrap();
    match decode(&bytes[..bytes.len() - 100]) {
        Err(TrainError::Io(msg)) => assert!(msg.contains("offset"), "{msg}"),
        other => panic!("expected a truncation error, got {other:?}"),
    }
    assert!(decode(&bytes[..4]).is_err());
}

#[test]
fn unknown_version_and_arch_are_rejected() {
    let net = build_ntl::<f32>(2, NtlStyle::Plain, 1).unwrap();
    let mut bytes = encode(&net, &CheckpointMeta::new(*net.arch(), 0, 1)).unwrap();
    bytes[8] = 9;
    let n = bytes.len();
    let h = fnv1a(&bytes[..n - 8]).to_le_bytes();
    bytes[n - 8..].copy_from_slice(&h);
    assert!(matches!(decode(&bytes), Err(TrainError::Version(_))));
}

#[test]
fn loading_into_a_mismatched_network_names_the_tensor() {
    let dir = tempfile::tempdir().unwrap();
    let src = build_resnet::<f32>(8, 10, 0).unwrap();
    let p = dir.path().join("r8.ckpt");
    save_checkpoint(&src, &CheckpointMeta::new(*src.arch(), 0, 0), &p).unwrap();
    let ckpt = read_checkpoint(&p).unwrap();
    let mut other = build_resnet::<f32>(8, 5, 0).unwrap();
    let err = ckpt.load_into(&mut other).unwrap_err().to_string();
    assert!(err.contains("fc."), "{err}");
    let mut ntl = build_ntl::<f32>(16, NtlStyle::Plain, 0).unwrap();
    assert!(ckpt.load_into(&mut ntl).is_err());
}

#[test]
fn checkpoint_names_match_network_state() {
    let net = build_resnet::<f32>(14, 10, 2).unwrap();
    let bytes = encode(&net, &CheckpointMeta::new(*net.arch(), 0, 2)).unwrap();
    let ckpt = decode(&bytes).unwrap();
    let mut a: Vec<&str> = ckpt.entries.iter().map(|e| e.name.as_str()).collect();
    let mut b: Vec<&str> = net.state().map(|(k, _)| k.as_str()).collect();
    a.sort_unstable();
    b.sort_unstable();
    assert_eq!(a, b);
}

#[test]
fn f64_networks_round_trip_too() {
    let dir = tempfile::tempdir().unwrap();
    let mut net = build_ntl::<f64>(2, NtlStyle::BnRelu, 3).unwrap();
    net.state_mut("conv1.weight").unwrap().data_mut()[0] = std::f64::consts::PI;
    let p = dir.path().join("f64.ckpt");
    save_checkpoint(&net, &CheckpointMeta::new(*net.arch(), 0, 3), &p).unwrap();
    let (back, _) = load_checkpoint::<f64>(&p).unwrap();
    assert_eq!(
        back.params()["conv1.weight"].data()[0],
        std::f64::consts::PI
    );
}

#[test]
fn meta_arch_must_match_network() {
    let net = build_ntl::<f32>(2, NtlStyle::Plain, 3).unwrap();
    let meta = CheckpointMeta::new(
        Arch::ResNet {
            depth: 20,
            classes: 10,
        },
        0,
        0,
    );
    assert!(encode(&net, &meta).is_err());
}
