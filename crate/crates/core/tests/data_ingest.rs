//! Real-file checks against values computed independently with numpy over
//! the same gzipped IDX files.

use std::path::PathBuf;

use dgnam::data::dataset::raw_idx;
use dgnam::data::idx::IdxData;
use dgnam::data::{build_modified_dataset, Dataset, Modification, Permutation};

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

#[test]
fn mnist_subset_matches_reference_parser() {
    let d = Dataset::load(mnist_dir()).unwrap();
    assert_eq!(d.images.shape(), &[10000, 1, 28, 28]);
    assert_eq!(d.class_counts(), vec![1001, 1127, 991, 1032, 980, 863, 1014, 1070, 944, 978]);
    assert_eq!(&d.labels[..10], &[4, 2, 8, 5, 5, 7, 2, 1, 3, 0]);

    let raw = raw_idx(mnist_dir().join("images-idx3-ubyte.gz")).unwrap();
    assert_eq!(raw.dims, vec![10000, 28, 28]);
    let IdxData::U8(bytes) = raw.data else { panic!("expected u8 payload") };
    let first: u64 = bytes[..784].iter().map(|&b| b as u64).sum();
    let total: u64 = bytes.iter().map(|&b| b as u64).sum();
    assert_eq!((first, total), (38581, 262146600));
    for (b, v) in bytes.iter().zip(d.images.data()).step_by(997) {
        assert_eq!(*b as f32 / 255.0, *v);
    }
}

#[test]
fn canonical_form_round_trips_real_and_modified_data() {
    let full = Dataset::load(mnist_dir()).unwrap();
    let small = full.subset(&(0..64).collect::<Vec<_>>(), dgnam::data::Split::Full).unwrap();
    let shuffled = build_modified_dataset(&small, &Modification::QuarterShuffle(Permutation::Random { seed: 3 })).unwrap();
    let dir = tempdir("canon");
    shuffled.save(&dir).unwrap();
    let back = Dataset::load(&dir).unwrap();
    assert!(back.images.bit_eq(&shuffled.images));
    assert_eq!(back.labels, shuffled.labels);
    assert_eq!(back.class_names, shuffled.class_names);
    std::fs::remove_dir_all(dir).unwrap();
}

fn tempdir(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dgnam-{tag}-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    dir
}
