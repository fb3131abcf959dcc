use std::collections::{BTreeMap, BTreeSet};
use std::fs;

use gradbench::dataset::{parse_metadata, render_metadata, split_by_patient, synthetic, LabeledSet, SplitFractions};
use gradbench::imaging::{encode_pgm, parallel_preprocess, PgmDepth, Split};
use gradbench::nn::{checkpoint, MicroResNet, MicroResNetConfig, Mode};
use gradbench::trainer::{train_run, TrainConfig};

fn encoded_fixture(n: usize, side: usize) -> Vec<Vec<u8>> {
    synthetic::generate(n, side, 21)
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let depth = if i % 3 == 0 { PgmDepth::Sixteen } else { PgmDepth::Eight };
            encode_pgm(&s.image, depth)
        })
        .collect()
}

#[test]
fn preprocessing_is_identical_for_every_worker_count() {
    let mut inputs = encoded_fixture(50, 57);
    inputs[7] = b"not an image".to_vec();
    inputs[31].truncate(20);
    let one = parallel_preprocess(&inputs, 32, 1).unwrap();
    for workers in [2, 4, 8] {
        let many = parallel_preprocess(&inputs, 32, workers).unwrap();
        assert_eq!(one.images.len(), many.images.len());
        for ((i, a), (j, b)) in one.images.iter().zip(&many.images) {
            assert_eq!(i, j);
            let bits = |p: &[f64]| p.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.pixels), bits(&b.pixels));
        }
        let idx = |o: &gradbench::imaging::PreprocessOutput| o.errors.iter().map(|e| e.index).collect::<Vec<_>>();
        assert_eq!(idx(&many), vec![7, 31]);
        assert_eq!(idx(&one), idx(&many));
    }
    assert_eq!(one.images.len(), 48);
    assert!(parallel_preprocess(&inputs, 32, 0).is_err());
}

#[test]
fn patients_never_straddle_splits() {
    let dir = tempfile::tempdir().unwrap();
    let records = synthetic::write_fixture(dir.path(), 60, 16, 8).unwrap();
    let text = fs::read(dir.path().join("metadata.csv")).unwrap();
    let parsed = parse_metadata(&text).unwrap();
    assert_eq!(parsed, records);

    let split = split_by_patient(parsed, SplitFractions::default(), 4).unwrap();
    let mut seen: BTreeMap<String, BTreeSet<Split>> = BTreeMap::new();
    for r in &split {
        seen.entry(r.patient_id.clone()).or_default().insert(r.split.unwrap());
    }
    assert!(seen.values().all(|s| s.len() == 1));
    let again = split_by_patient(split.clone(), SplitFractions::default(), 4).unwrap();
    assert_eq!(split, again);
    assert_eq!(parse_metadata(render_metadata(&split).as_bytes()).unwrap(), split);
}

#[test]
fn folder_loading_matches_in_memory_generation() {
    let dir = tempfile::tempdir().unwrap();
    let records = synthetic::write_fixture(dir.path(), 10, 32, 2).unwrap();
    let (set, errors) = LabeledSet::load(&records, dir.path(), 32, 3).unwrap();
    assert!(errors.is_empty());
    assert_eq!(set.len(), 10);
    assert_eq!(set.ids(), records.iter().map(|r| r.image_id.clone()).collect::<Vec<_>>().as_slice());
    fs::remove_file(dir.path().join(&records[4].image_id)).unwrap();
    let (set, errors) = LabeledSet::load(&records, dir.path(), 32, 3).unwrap();
    assert_eq!(set.len(), 9);
    assert_eq!(errors.len(), 1);
    assert_eq!(errors[0].index, 4);
}

#[test]
fn trained_checkpoint_survives_a_round_trip() {
    let data = synthetic::labeled_set(8, 32, 1).unwrap();
    let mut model = MicroResNet::new(MicroResNetConfig::deep(), 5).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        epochs: 1,
        ..TrainConfig::default()
    };
    train_run(&config, &mut model, &data).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("m.gtb1");
    checkpoint::save(&model, &file).unwrap();
    let back = checkpoint::load(&file).unwrap();
    assert_eq!(back, model);
    let images = data.batch(&[0, 1, 2]).unwrap().images;
    let (mut a, mut b) = (model, back);
    a.set_mode(Mode::Eval);
    b.set_mode(Mode::Eval);
    assert_eq!(a.predict(&images).unwrap(), b.predict(&images).unwrap());

    let mut bytes = fs::read(&file).unwrap();
    bytes[0] = b'X';
    assert!(checkpoint::decode(&bytes).is_err());
    assert!(checkpoint::decode(&bytes[..bytes.len() / 2]).is_err());
}
