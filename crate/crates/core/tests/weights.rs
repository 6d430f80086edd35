use yolo3a::config::{ModelConfig, Variant};
use yolo3a::io::{checksum, decode_weights, encode_weights, load_weights, save_weights, MAGIC};
use yolo3a::layers::{named_tensors, Parameters};
use yolo3a::model::Model;

fn tiny(seed: u64) -> Model {
    let mut cfg = ModelConfig::for_variant(Variant::Tiny);
    cfg.widths = [8, 16, 32];
    cfg.ca_ratio = 8;
    cfg.seed = seed;
    Model::build(&cfg).unwrap()
}

#[test]
fn save_load_round_trip_is_bit_exact_at_single_precision() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.3aw");
    let model = tiny(1);
    save_weights(&model, &path).unwrap();
    let mut other = tiny(2);
    assert_ne!(checksum(&model), checksum(&other));
    load_weights(&mut other, &std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(checksum(&model), checksum(&other));
    for ((na, a), (nb, b)) in named_tensors(&model).iter().zip(&named_tensors(&other)) {
        assert_eq!(na, nb);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert_eq!((*x as f32).to_bits(), (*y as f32).to_bits(), "{na}");
        }
    }
    assert_eq!(encode_weights(&other), std::fs::read(&path).unwrap());
}

#[test]
fn truncated_file_names_the_tensor() {
    let model = tiny(1);
    let buf = encode_weights(&model);
    let names: Vec<String> = decode_weights(&buf)
        .unwrap()
        .into_iter()
        .map(|(n, _)| n)
        .collect();
    let err = decode_weights(&buf[..buf.len() - 2]).unwrap_err();
    assert_eq!(err.kind(), "weights");
    assert!(err.to_string().contains(names.last().unwrap()), "{err}");
    assert!(decode_weights(&buf[..6]).is_err());
}

#[test]
fn bad_magic_and_mismatched_models_are_rejected() {
    let mut buf = encode_weights(&tiny(1));
    assert_eq!(&buf[..4], MAGIC);
    buf[0] = b'X';
    assert!(decode_weights(&buf)
        .unwrap_err()
        .to_string()
        .contains("magic"));

    let mut cfg = ModelConfig::for_variant(Variant::Full);
    cfg.widths = [8, 16, 32];
    cfg.ca_ratio = 8;
    let mut full = Model::build(&cfg).unwrap();
    let err = load_weights(&mut full, &encode_weights(&tiny(1))).unwrap_err();
    assert!(err.to_string().contains("missing tensor"), "{err}");
}

#[test]
fn same_seed_same_checksum() {
    assert_eq!(checksum(&tiny(5)), checksum(&tiny(5)));
    let mut count = 0;
    tiny(5).visit("", &mut |_, _| count += 1);
    assert_eq!(
        decode_weights(&encode_weights(&tiny(5))).unwrap().len(),
        count
    );
}
