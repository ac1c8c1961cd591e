//! Helpers shared by the integration and acceptance targets.
#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use favit_cli::commands::synthetic_image;
use favit_cli::dataset::{
    encode_cifar10_batch, encode_idx_images, encode_idx_labels, load_cifar10, load_fashion_mnist, parse_cifar10_batch,
    parse_idx_images, parse_idx_labels, DatasetSplit, Split,
};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn px(bytes: [u8; 3]) -> [f64; 3] {
    bytes.map(|b| f64::from(b) / 255.0)
}

fn expect<T: PartialEq + std::fmt::Debug>(what: &str, got: T, want: T) -> Result<(), String> {
    if got == want {
        Ok(())
    } else {
        Err(format!("{what}: got {got:?}, expected {want:?}"))
    }
}

/// Decodes every fixture file, compares against values computed when the
/// files were written, and re-encodes each file byte for byte.
pub fn check_fixtures() -> Result<String, String> {
    let root = fixtures();
    let e = |err: favit_cli::CliError| err.to_string();

    let (train, test) = load_cifar10(&root.join("cifar")).map_err(e)?;
    expect("cifar train labels", train.labels.clone(), vec![0, 1, 2, 3, 9])?;
    expect("cifar test labels", test.labels.clone(), vec![3, 8])?;
    expect("cifar test[0] (0,0)", test.images[0].pixel(0, 0), px([11, 61, 111]))?;
    expect("cifar test[0] (17,5)", test.images[0].pixel(17, 5), px([14, 64, 114]))?;
    expect("cifar test[1] (31,31)", test.images[1].pixel(31, 31), px([0, 90, 180]))?;
    expect("cifar train[2] (0,1)", train.images[2].pixel(0, 1), px([3, 33, 63]))?;
    expect("cifar train[2] (2,9)", train.images[2].pixel(2, 9), px([219, 249, 23]))?;

    let (ftrain, ftest) = load_fashion_mnist(&root.join("fashion")).map_err(e)?;
    expect("fashion labels", (ftrain.labels.clone(), ftest.labels.clone()), (vec![9], vec![2]))?;
    expect(
        "fashion extents",
        (ftrain.images[0].height(), ftrain.images[0].width()),
        (28, 28),
    )?;
    expect("fashion train (27,27)", ftrain.images[0].pixel(27, 27), px([45; 3]))?;
    expect("fashion test (10,3)", ftest.images[0].pixel(10, 3), px([228; 3]))?;

    let mut files = 0;
    for entry in fs::read_dir(root.join("cifar")).map_err(|x| x.to_string())? {
        let path = entry.map_err(|x| x.to_string())?.path();
        let bytes = fs::read(&path).map_err(|x| x.to_string())?;
        let split = parse_cifar10_batch(&bytes, Split::Train).map_err(e)?;
        expect(&path.display().to_string(), encode_cifar10_batch(&split).map_err(e)?, bytes)?;
        files += 1;
    }
    for prefix in ["train", "t10k"] {
        let ipath = root.join(format!("fashion/{prefix}-images-idx3-ubyte"));
        let lpath = root.join(format!("fashion/{prefix}-labels-idx1-ubyte"));
        let ibytes = fs::read(&ipath).map_err(|x| x.to_string())?;
        let lbytes = fs::read(&lpath).map_err(|x| x.to_string())?;
        let images = parse_idx_images(&ibytes).map_err(e)?;
        expect(&ipath.display().to_string(), encode_idx_images(&images).map_err(e)?, ibytes)?;
        let labels = parse_idx_labels(&lbytes).map_err(e)?;
        expect(&lpath.display().to_string(), encode_idx_labels(&labels).map_err(e)?, lbytes)?;
        files += 2;
    }
    Ok(format!("{files} fixture files decoded and re-encoded exactly"))
}

/// CIFAR-10 layout with `per_batch` records in each training batch and
/// `test` test records. Labels cycle through `labels`; each class gets its
/// own image family so that the task is learnable.
pub fn write_synthetic_cifar(dir: &Path, per_batch: usize, test: usize, labels: &[usize]) {
    fs::create_dir_all(dir).unwrap();
    let make = |n: usize, offset: u64, split: Split| {
        let ys: Vec<usize> = (0..n).map(|i| labels[i % labels.len()]).collect();
        let images = ys
            .iter()
            .enumerate()
            .map(|(i, &y)| {
                let img = synthetic_image(32, 32, offset + i as u64).unwrap();
                // warm images for the first listed class, cool for the rest
                let tint = if y == labels[0] { [1.0, 0.5, 0.2] } else { [0.2, 0.5, 1.0] };
                favit_core::imaging::ImageRgb::from_fn(32, 32, |r, c| {
                    let p = img.pixel(r, c);
                    [0, 1, 2].map(|k| ((0.5 * p[k] + 0.5 * tint[k]) * 255.0).round() / 255.0)
                })
                .unwrap()
            })
            .collect();
        DatasetSplit::new(images, ys, 10, split).unwrap()
    };
    for b in 1..=5 {
        let split = make(per_batch, 1000 * b as u64, Split::Train);
        fs::write(dir.join(format!("data_batch_{b}.bin")), encode_cifar10_batch(&split).unwrap()).unwrap();
    }
    let split = make(test, 99_000, Split::Test);
    fs::write(dir.join("test_batch.bin"), encode_cifar10_batch(&split).unwrap()).unwrap();
}
