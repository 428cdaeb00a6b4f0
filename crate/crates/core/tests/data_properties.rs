mod common;

use common::{blob_alpha, rng, trimap_oracle, uniform};
use proptest::prelude::*;
use rand::Rng;
use trimat_core::data::{
    composite, crop_window, generate_trimap, synth_dataset, FloatImage, SynthSpec, EPSILON,
};
use trimat_core::trimap::{BACKGROUND, FOREGROUND, UNKNOWN};
use trimat_core::Trimap;

fn gray(h: usize, w: usize, data: Vec<f64>) -> FloatImage {
    FloatImage::new(1, h, w, data).unwrap()
}

#[test]
fn tt_share_is_exact() {
    let spec = SynthSpec {
        count: 100,
        size: 32,
        seed: 5,
        tt_ratio: 0.3,
    };
    let samples = synth_dataset(&spec).unwrap();
    let tt = samples
        .iter()
        .filter(|s| s.alpha.data.iter().all(|&a| a < 1.0))
        .count();
    assert_eq!(tt, 30);
}

#[test]
fn synthetic_corpus_is_reproducible_and_composited() {
    let spec = SynthSpec {
        count: 6,
        size: 32,
        seed: 9,
        tt_ratio: 0.5,
    };
    let a = synth_dataset(&spec).unwrap();
    assert_eq!(a, synth_dataset(&spec).unwrap());
    for s in &a {
        let (fg, bg) = (s.fg.as_ref().unwrap(), s.bg.as_ref().unwrap());
        for c in 0..3 {
            for i in 0..s.height() * s.width() {
                let al = s.alpha.data[i];
                let want = al * fg.plane(c)[i] + (1.0 - al) * bg.plane(c)[i];
                assert!((s.image.plane(c)[i] - want).abs() <= EPSILON, "{}", s.id);
            }
        }
    }
}

#[test]
fn square_matte_gets_one_pixel_band() {
    let mut alpha = vec![0.0; 64];
    for y in 2..6 {
        for x in 2..6 {
            alpha[y * 8 + x] = 1.0;
        }
    }
    let t = generate_trimap(&gray(8, 8, alpha.clone()), 3).unwrap();
    assert_eq!(t.classes(), &trimap_oracle(&alpha, 8, 8, 3)[..]);
    assert_eq!(t.class_at(3, 3), FOREGROUND);
    assert_eq!(t.class_at(2, 2), UNKNOWN);
    assert_eq!(t.class_at(1, 1), UNKNOWN);
    assert_eq!(t.class_at(0, 0), BACKGROUND);
}

#[test]
fn trimaps_match_window_scan() {
    let mut r = rng(3);
    for _ in 0..30 {
        let (h, w) = (r.random_range(4..24), r.random_range(4..24));
        let alpha = blob_alpha(&mut r, h, w);
        let k = 2 * r.random_range(0..6) + 1;
        let t = generate_trimap(&gray(h, w, alpha.clone()), k).unwrap();
        assert_eq!(t.classes(), &trimap_oracle(&alpha, h, w, k)[..]);
    }
}

#[test]
fn crops_always_hold_unknown_pixels() {
    let mut r = rng(4);
    for _ in 0..1000 {
        let (h, w) = (r.random_range(8..40), r.random_range(8..40));
        let mut classes = vec![BACKGROUND; h * w];
        for _ in 0..r.random_range(1..4) {
            classes[r.random_range(0..h * w)] = UNKNOWN;
        }
        let t = Trimap::new(h, w, classes).unwrap();
        let crop = r.random_range(1..=h.min(w));
        let (y0, x0) = crop_window(&t, crop, &mut r).unwrap();
        assert!(y0 + crop <= h && x0 + crop <= w);
        let hit = (y0..y0 + crop).any(|y| (x0..x0 + crop).any(|x| t.class_at(y, x) == UNKNOWN));
        assert!(hit);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn larger_kernels_never_shrink_unknown(seed in any::<u64>(), k in 0usize..14) {
        let mut r = rng(seed);
        let alpha = blob_alpha(&mut r, 20, 20);
        let img = gray(20, 20, alpha);
        let small = generate_trimap(&img, 2 * k + 1).unwrap();
        let big = generate_trimap(&img, 2 * k + 3).unwrap();
        for (a, b) in small.classes().iter().zip(big.classes()) {
            if *a == UNKNOWN {
                prop_assert_eq!(*b, UNKNOWN);
            }
        }
    }

    #[test]
    fn known_classes_agree_with_alpha(seed in any::<u64>(), k in 0usize..8) {
        let mut r = rng(seed);
        let alpha = blob_alpha(&mut r, 16, 16);
        let t = generate_trimap(&gray(16, 16, alpha.clone()), 2 * k + 1).unwrap();
        for (c, a) in t.classes().iter().zip(&alpha) {
            match *c {
                FOREGROUND => prop_assert!(*a >= 1.0 - EPSILON),
                BACKGROUND => prop_assert!(*a <= EPSILON),
                _ => {}
            }
        }
    }

    #[test]
    fn alpha_is_recoverable_from_composite(seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = 64;
        let fg = FloatImage::new(3, 8, 8, uniform(&mut r, 3 * n, 0.0, 1.0)).unwrap();
        let bg = FloatImage::new(3, 8, 8, uniform(&mut r, 3 * n, 0.0, 1.0)).unwrap();
        let alpha = gray(8, 8, (0..n).map(|_| r.random_range(0..=255) as f64 / 255.0).collect());
        let img = composite(&fg, &bg, &alpha).unwrap().quantized();
        for c in 0..3 {
            for i in 0..n {
                let (f, b) = (fg.plane(c)[i], bg.plane(c)[i]);
                if (f - b).abs() > 0.25 {
                    let est = (img.plane(c)[i] - b) / (f - b);
                    prop_assert!((est - alpha.data[i]).abs() <= 0.5 * EPSILON / (f - b).abs() + 1e-12);
                }
            }
        }
    }
}
