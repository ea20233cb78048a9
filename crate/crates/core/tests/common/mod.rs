#![allow(dead_code)]

use std::path::PathBuf;

use nllc::imageio::{load_dir, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn corpus_dir(split: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/corpus").join(split)
}

pub fn natural(split: &str) -> Vec<(String, Image)> {
    load_dir(corpus_dir(split)).expect("corpus")
}

/// Eight synthetic 48x48 images: ramps, a checkerboard, flat, and noise.
pub fn synthetic() -> Vec<(String, Image)> {
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let noise = Image::from_fn(48, 48, |_, _, _| rng.gen());
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let soft_noise = Image::from_fn(48, 48, |x, _, _| (100 + x as i32 + rng.gen_range(-6..=6)) as u8);
    vec![
        ("ramp_h".into(), Image::from_fn(48, 48, |x, _, c| (x * 5 + c * 20) as u8)),
        ("ramp_diag".into(), Image::from_fn(48, 48, |x, y, c| ((x + y) * 2 + c * 30) as u8)),
        ("ramp_wrap".into(), Image::from_fn(48, 48, |x, y, c| ((x * 5 + y * 3 + c * 50) % 256) as u8)),
        ("checker".into(), Image::from_fn(48, 48, |x, y, _| if (x / 4 + y / 4) % 2 == 0 { 30 } else { 220 })),
        ("flat".into(), Image::filled(48, 48, [90, 120, 200])),
        ("extremes".into(), Image::from_fn(48, 48, |x, y, c| if (x + y + c) % 2 == 0 { 0 } else { 255 })),
        ("noise".into(), noise),
        ("soft_noise".into(), soft_noise),
    ]
}

/// The 12 natural test crops followed by the synthetic set.
pub fn mixed() -> Vec<(String, Image)> {
    let mut all = natural("test");
    all.extend(synthetic());
    all
}

pub fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image::from_fn(w, h, |_, _, _| rng.gen())
}
pub mod reference;
