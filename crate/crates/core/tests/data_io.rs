use std::io::Read;
use std::path::PathBuf;

use flate2::read::GzDecoder;
use robustlab::data::{dataset_from_idx, encode_idx_images, encode_idx_labels, load_idx, synth_blobs};

fn mnist_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist10k")
}

fn gunzip(name: &str) -> Vec<u8> {
    let mut out = Vec::new();
    GzDecoder::new(std::fs::File::open(mnist_dir().join(name)).unwrap())
        .read_to_end(&mut out)
        .unwrap();
    out
}

fn be32(b: &[u8], at: usize) -> usize {
    u32::from_be_bytes(b[at..at + 4].try_into().unwrap()) as usize
}

#[test]
fn bundled_mnist_matches_a_direct_byte_reading() {
    let images = gunzip("images-idx3-ubyte.gz");
    let labels = gunzip("labels-idx1-ubyte.gz");
    assert_eq!(be32(&images, 0), 0x0803);
    assert_eq!(be32(&labels, 0), 0x0801);
    let (n, rows, cols) = (be32(&images, 4), be32(&images, 8), be32(&images, 12));
    assert_eq!((n, rows, cols), (10_000, 28, 28));
    assert_eq!(be32(&labels, 4), n);
    let pixels = &images[16..];
    assert_eq!(pixels.len(), n * 784);
    assert_eq!(pixels[..784].iter().map(|&b| b as u64).sum::<u64>(), 10031);

    let ds = load_idx(mnist_dir().join("images-idx3-ubyte.gz"), mnist_dir().join("labels-idx1-ubyte.gz")).unwrap();
    assert_eq!((ds.len(), ds.dim(), ds.classes()), (n, 784, 10));
    for i in [0, 1, 4999, 9999] {
        let want: Vec<f64> = pixels[i * 784..(i + 1) * 784].iter().map(|&b| b as f64 / 255.0).collect();
        assert_eq!(ds.inputs().row(i), want.as_slice());
        assert_eq!(ds.labels()[i], labels[8 + i] as usize);
    }
    let mut counts = [0usize; 10];
    ds.labels().iter().for_each(|&l| counts[l] += 1);
    assert!(counts.iter().all(|&c| c > 800), "{counts:?}");
}

#[test]
fn idx_round_trip_is_byte_exact() {
    let ds = synth_blobs(50, 0.1, 3).unwrap();
    // quantize to bytes first so the round trip is lossless
    let q = ds.inputs().map(|v| (v * 255.0).round() / 255.0);
    let img = encode_idx_images(&q, 1, 2).unwrap();
    let lab = encode_idx_labels(ds.labels()).unwrap();
    let back = dataset_from_idx(&img, &lab, "fixture").unwrap();
    assert_eq!(back.inputs(), &q);
    assert_eq!(back.labels(), ds.labels());
    assert_eq!(encode_idx_images(back.inputs(), 1, 2).unwrap(), img);
    assert_eq!(encode_idx_labels(back.labels()).unwrap(), lab);
}

#[test]
fn split_is_disjoint_and_seeded() {
    let ds = load_idx(mnist_dir().join("images-idx3-ubyte.gz"), mnist_dir().join("labels-idx1-ubyte.gz")).unwrap();
    let (a, b) = ds.split(8000, 2000, 0).unwrap();
    let (a2, _) = ds.split(8000, 2000, 0).unwrap();
    assert_eq!(a.inputs(), a2.inputs());
    assert_eq!((a.len(), b.len()), (8000, 2000));
    assert!(ds.split(9000, 2000, 0).is_err());
}
