use std::collections::VecDeque;

use image::{ImageBuffer, Luma, Rgb};
use msresnet::data::{
    load_image_dir, preprocess, save_image_dir, synth_dataset, AugmentConfig, Standardize, SYNTH_CLASSES,
};
use msresnet::rng;
use msresnet::Tensor;

/// Sizes of 4-connected components of pixels brighter than `threshold`.
fn bright_components(img: &Tensor<f32>, threshold: f32) -> Vec<usize> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let px = img.data();
    let mut seen = vec![false; h * w];
    let mut sizes = Vec::new();
    for start in 0..h * w {
        if seen[start] || px[start] <= threshold {
            continue;
        }
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut push = |j: usize| {
                if !seen[j] && px[j] > threshold {
                    seen[j] = true;
                    queue.push_back(j);
                }
            };
            if y > 0 {
                push(i - w);
            }
            if y + 1 < h {
                push(i + w);
            }
            if x > 0 {
                push(i - 1);
            }
            if x + 1 < w {
                push(i + 1);
            }
        }
        sizes.push(size);
    }
    sizes
}

#[test]
fn synthetic_set_is_balanced_and_seeded() {
    let a = synth_dataset(8, 64, 5).unwrap();
    assert_eq!(a.len(), 32);
    assert_eq!(a.class_sizes(), vec![8; 4]);
    assert_eq!(a.class_names(), SYNTH_CLASSES);
    assert_eq!(a.channels(), Some(1));
    assert_eq!(a, synth_dataset(8, 64, 5).unwrap());
    assert_ne!(a, synth_dataset(8, 64, 6).unwrap());
    for s in a.items() {
        assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn no_tumor_class_has_no_large_bright_region() {
    for seed in 0..4 {
        let data = synth_dataset(20, 64, seed).unwrap();
        for s in data.items() {
            let limit = s.image.len() / 100;
            let largest = bright_components(&s.image, 0.7).into_iter().max().unwrap_or(0);
            if s.label == 3 {
                assert!(largest <= limit, "seed {seed}: region of {largest} pixels");
            } else if s.label == 0 {
                assert!(largest > limit, "seed {seed}: ellipse region only {largest} pixels");
            }
        }
    }
}

#[test]
fn loads_eight_and_sixteen_bit_png() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    let mut gray = ImageBuffer::<Luma<u8>, Vec<u8>>::new(4, 3);
    gray.put_pixel(1, 2, Luma([51]));
    gray.save(a.join("0.png")).unwrap();
    gray.save(a.join("1.png")).unwrap();
    let mut deep = ImageBuffer::<Luma<u16>, Vec<u16>>::new(4, 3);
    deep.put_pixel(3, 0, Luma([13107]));
    deep.put_pixel(0, 1, Luma([65535]));
    deep.save(b.join("0.png")).unwrap();
    std::fs::write(b.join("broken.png"), b"not an image").unwrap();
    std::fs::write(b.join("notes.txt"), b"ignored").unwrap();

    let data = load_image_dir(dir.path()).unwrap();
    assert_eq!(data.class_names(), ["a", "b"]);
    assert_eq!(data.len(), 3);
    assert_eq!(data.labels(), vec![0, 0, 1]);
    let first = &data.items()[0].image;
    assert_eq!(first.shape(), &[1, 3, 4]);
    assert_eq!(first.data()[2 * 4 + 1], 51.0 / 255.0);
    let sixteen = &data.items()[2].image;
    assert_eq!(sixteen.data()[3], 13107.0 / 65535.0);
    assert_eq!(sixteen.data()[4], 1.0);
}

#[test]
fn mixed_gray_and_color_become_three_channels() {
    let dir = tempfile::tempdir().unwrap();
    for class in ["x", "y"] {
        std::fs::create_dir_all(dir.path().join(class)).unwrap();
    }
    ImageBuffer::<Luma<u8>, Vec<u8>>::from_pixel(2, 2, Luma([255])).save(dir.path().join("x/g.png")).unwrap();
    ImageBuffer::<Rgb<u8>, Vec<u8>>::from_pixel(2, 2, Rgb([0, 255, 0])).save(dir.path().join("y/c.png")).unwrap();
    let data = load_image_dir(dir.path()).unwrap();
    assert_eq!(data.channels(), Some(3));
    assert_eq!(data.items()[0].image.data(), &[1.0; 12]);
    assert_eq!(&data.items()[1].image.data()[4..8], &[1.0; 4]);
    assert_eq!(&data.items()[1].image.data()[..4], &[0.0; 4]);
}

#[test]
fn empty_class_directory_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::create_dir_all(dir.path().join("empty")).unwrap();
    assert!(load_image_dir(dir.path()).is_err());
    assert!(load_image_dir(&dir.path().join("missing")).is_err());
}

#[test]
fn saved_images_load_back_within_quantization() {
    let data = synth_dataset(3, 32, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_image_dir(&data, dir.path()).unwrap();
    let back = load_image_dir(dir.path()).unwrap();
    assert_eq!(back.labels(), data.labels());
    assert_eq!(back.class_names(), data.class_names());
    for (x, y) in data.items().iter().zip(back.items()) {
        assert!(x.image.max_abs_diff(&y.image).unwrap() <= 0.5 / 255.0 + 1e-6);
    }
}

#[test]
fn eval_preprocessing_is_deterministic() {
    let data = synth_dataset(2, 80, 2).unwrap();
    let cfg = AugmentConfig {
        resolution: 64,
        ..AugmentConfig::default()
    };
    let norm = Standardize::fixed(1, 0.5, 0.5);
    let img = &data.items()[0].image;
    let a = preprocess(img, &cfg, &norm, false, &mut rng::stream(1, "t", &[])).unwrap();
    let b = preprocess(img, &cfg, &norm, false, &mut rng::stream(2, "t", &[])).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.shape(), &[1, 64, 64]);
    let t1 = preprocess(img, &cfg, &norm, true, &mut rng::stream(1, "t", &[])).unwrap();
    let t2 = preprocess(img, &cfg, &norm, true, &mut rng::stream(1, "t", &[])).unwrap();
    assert_eq!(t1, t2);
}

#[test]
fn constant_image_standardizes_to_zero() {
    let data = msresnet::data::LabeledDataset::new(
        vec![msresnet::data::Sample {
            image: Tensor::full(&[1, 40, 40], 0.3).unwrap(),
            label: 0,
        }],
        vec!["only".into()],
    )
    .unwrap();
    let norm = Standardize::fit(&data, &[0]).unwrap();
    let out = preprocess(
        &data.items()[0].image,
        &AugmentConfig::identity(32),
        &norm,
        false,
        &mut rng::stream(0, "t", &[]),
    )
    .unwrap();
    assert!(out.data().iter().all(|&v| v.abs() < 1e-4), "{:?}", &out.data()[..4]);
}
