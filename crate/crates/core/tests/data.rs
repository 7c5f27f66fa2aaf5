use std::fs;
use std::path::Path;

use c2f_core::data::*;
use c2f_core::Error;

fn png(path: &Path, rgb: [u8; 3]) {
    let img = image::RgbImage::from_pixel(4, 4, image::Rgb(rgb));
    img.save(path).unwrap();
}

fn tree(root: &Path, per_class: usize) {
    for split in ["train", "test", "valid"] {
        for class in CLASS_DIRS {
            let dir = root.join(split).join(class);
            fs::create_dir_all(&dir).unwrap();
            for i in 0..per_class {
                png(&dir.join(format!("img{i}.png")), [i as u8 * 40, 10, 200]);
            }
        }
    }
}

#[test]
fn manifest_orders_classes_and_files() {
    let tmp = tempfile::tempdir().unwrap();
    tree(tmp.path(), 3);
    let m = load_manifest(tmp.path()).unwrap();
    assert_eq!(m.class_counts(Split::Train), [3, 3]);
    let train = m.samples(Split::Train);
    assert_eq!(train.iter().map(|s| s.label).collect::<Vec<_>>(), [0, 0, 0, 1, 1, 1]);
    let names: Vec<String> = train[..3]
        .iter()
        .map(|s| s.path.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, ["img0.png", "img1.png", "img2.png"]);
}

#[test]
fn class_folder_names_are_normalized() {
    let tmp = tempfile::tempdir().unwrap();
    for split in ["train", "test", "valid"] {
        for class in ["Autistic", "Non-Autistic"] {
            let dir = tmp.path().join(split).join(class);
            fs::create_dir_all(&dir).unwrap();
            png(&dir.join("a.png"), [1, 2, 3]);
        }
    }
    let m = load_manifest(tmp.path()).unwrap();
    assert_eq!(m.class_counts(Split::Valid), [1, 1]);
}

#[test]
fn missing_and_empty_folders_are_reported() {
    let tmp = tempfile::tempdir().unwrap();
    tree(tmp.path(), 1);
    fs::remove_dir_all(tmp.path().join("valid")).unwrap();
    let err = load_manifest(tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Dataset(_)));
    assert!(err.to_string().contains("missing split: valid"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    tree(tmp.path(), 1);
    fs::remove_file(tmp.path().join("test/non_autistic/img0.png")).unwrap();
    let err = load_manifest(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("empty class folder"), "{err}");

    let tmp = tempfile::tempdir().unwrap();
    tree(tmp.path(), 1);
    fs::remove_dir_all(tmp.path().join("train/autistic")).unwrap();
    let err = load_manifest(tmp.path()).unwrap_err().to_string();
    assert!(err.contains("missing class folder"), "{err}");
}

#[test]
fn batches_cover_the_split_once_in_seeded_order() {
    let tmp = tempfile::tempdir().unwrap();
    tree(tmp.path(), 5);
    let m = load_manifest(tmp.path()).unwrap();
    let collect = |seed, epoch| -> Vec<usize> {
        batches(&m, Split::Train, 3, 16, seed, epoch, true)
            .unwrap()
            .flat_map(|b| b.unwrap().indices)
            .collect()
    };
    let a = collect(7, 0);
    let mut sorted = a.clone();
    sorted.sort();
    assert_eq!(sorted, (0..10).collect::<Vec<_>>());
    assert_eq!(a, collect(7, 0));
    assert_ne!(a, collect(7, 1));
    assert_eq!(a, epoch_order(10, 7, 0, true));

    let sizes: Vec<usize> = batches(&m, Split::Train, 4, 16, 0, 0, false)
        .unwrap()
        .map(|b| b.unwrap().labels.len())
        .collect();
    assert_eq!(sizes, [4, 4, 2]);
}

#[test]
fn streaming_and_preloaded_batches_agree() {
    let tmp = tempfile::tempdir().unwrap();
    generate_synthetic(3, 24, 1, tmp.path()).unwrap();
    let m = load_manifest(tmp.path()).unwrap();
    let decoded = DecodedSplit::load(&m, Split::Train, 16).unwrap();
    let streamed: Vec<Batch> = batches(&m, Split::Train, 4, 16, 9, 2, true)
        .unwrap()
        .map(Result::unwrap)
        .collect();
    let preloaded: Vec<Batch> = decoded.batches(4, 9, 2, true).unwrap().map(Result::unwrap).collect();
    assert_eq!(streamed, preloaded);
    let b = &streamed[0];
    assert_eq!(b.images.shape(), &[4, 3, 16, 16]);
    assert!(b.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
}

#[test]
fn synthetic_generation_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_synthetic(4, 32, 11, a.path()).unwrap();
    generate_synthetic(4, 32, 11, b.path()).unwrap();
    let ma = load_manifest(a.path()).unwrap();
    let mb = load_manifest(b.path()).unwrap();
    for split in Split::ALL {
        assert_eq!(ma.class_counts(split), if split == Split::Train { [4, 4] } else { [2, 2] });
        for (x, y) in ma.samples(split).iter().zip(mb.samples(split)) {
            assert_eq!(fs::read(&x.path).unwrap(), fs::read(&y.path).unwrap());
        }
    }
    assert_eq!(synthetic_holdout_size(8), 4);
    assert_eq!(synthetic_holdout_size(1), 2);
}

#[test]
fn decoding_resizes_and_rejects_garbage() {
    let tmp = tempfile::tempdir().unwrap();
    let p = tmp.path().join("x.png");
    png(&p, [255, 0, 0]);
    let t = load_image(&p, 16).unwrap();
    assert_eq!(t.shape(), &[3, 16, 16]);
    assert!(t.data()[..256].iter().all(|&v| v == 1.0));
    assert!(t.data()[256..].iter().all(|&v| v == 0.0));
    let bad = tmp.path().join("bad.png");
    fs::write(&bad, b"nope").unwrap();
    assert!(matches!(load_image(&bad, 16), Err(Error::Decode(_))));
}
