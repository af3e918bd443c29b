use maskcap::checkpoint::{Checkpoint, MAGIC};
use maskcap::data::Vocabulary;
use maskcap::model::{Model, ModelConfig, ModelKind};
use maskcap::Error;

fn vocab(n: usize) -> Vocabulary {
    let words = (0..n - 4).map(|i| format!("w{i}"));
    Vocabulary::from_tokens(["<pad>", "<bos>", "<eos>", "<unk>"].map(String::from).into_iter().chain(words).collect())
        .unwrap()
}

fn sample(project: bool) -> Checkpoint {
    let mut cfg = ModelConfig::desk(6, 5, 3, 10);
    if project {
        cfg.hidden1 = 7;
        cfg.project_attended = true;
    }
    Checkpoint::new(ModelKind::Interpret, Model::new(cfg, 42).unwrap(), vocab(10), 42).unwrap()
}

#[test]
fn round_trips_bit_exactly() {
    for project in [false, true] {
        let c = sample(project);
        let bytes = c.to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }
}

#[test]
fn file_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("best.ckpt");
    let c = sample(false);
    c.save(&path).unwrap();
    assert_eq!(Checkpoint::load(&path).unwrap(), c);
    assert!(matches!(Checkpoint::load(&dir.path().join("missing")), Err(Error::Io { .. })));
}

#[test]
fn rejects_damaged_files() {
    let bytes = sample(false).to_bytes().unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    let mut bad_version = bytes.clone();
    bad_version[8] = 9;
    let mut trailing = bytes.clone();
    trailing.push(0);
    let mut nan = bytes.clone();
    let n = nan.len();
    nan[n - 8..].copy_from_slice(&f64::NAN.to_le_bytes());
    for (what, b) in [
        ("magic", bad_magic),
        ("version", bad_version),
        ("truncated", bytes[..bytes.len() - 3].to_vec()),
        ("trailing", trailing),
        ("nan", nan),
        ("short", bytes[..10].to_vec()),
    ] {
        assert!(matches!(Checkpoint::from_bytes(&b), Err(Error::Checkpoint(_))), "{what}");
    }
}

#[test]
fn vocabulary_must_match_model() {
    let m = Model::new(ModelConfig::desk(6, 5, 3, 10), 1).unwrap();
    assert!(matches!(Checkpoint::new(ModelKind::Base, m, vocab(11), 1), Err(Error::Config(_))));
}
