mod common;

use common::{rng, uniform};
use trimat_core::losses::{laplacian_loss, laplacian_pyramid, reconstruct_pyramid};
use trimat_core::Tensor;

const TAPS: [f64; 5] = [1.0, 4.0, 6.0, 4.0, 1.0];

fn blur(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h as i64 {
        for x0 in 0..w as i64 {
            let mut acc = 0.0;
            for (i, a) in TAPS.iter().enumerate() {
                for (j, b) in TAPS.iter().enumerate() {
                    let yy = (y + i as i64 - 2).clamp(0, h as i64 - 1) as usize;
                    let xx = (x0 + j as i64 - 2).clamp(0, w as i64 - 1) as usize;
                    acc += a * b / 256.0 * x[yy * w + xx];
                }
            }
            out[y as usize * w + x0 as usize] = acc;
        }
    }
    out
}

fn down(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let b = blur(x, h, w);
    (0..h / 2 * (w / 2))
        .map(|i| b[(i / (w / 2)) * 2 * w + (i % (w / 2)) * 2])
        .collect()
}

fn up(x: &[f64], h: usize, w: usize) -> Vec<f64> {
    let (h2, w2) = (2 * h, 2 * w);
    let mut z = vec![0.0; h2 * w2];
    for y in 0..h {
        for x0 in 0..w {
            z[2 * y * w2 + 2 * x0] = 4.0 * x[y * w + x0];
        }
    }
    blur(&z, h2, w2)
}

fn loop_laplacian(p: &[f64], g: &[f64], h: usize, w: usize, levels: usize) -> f64 {
    let (mut p, mut g) = (p.to_vec(), g.to_vec());
    let (mut h, mut w) = (h, w);
    let mut total = 0.0;
    for i in 0..levels {
        let (pd, gd) = (down(&p, h, w), down(&g, h, w));
        let (pu, gu) = (up(&pd, h / 2, w / 2), up(&gd, h / 2, w / 2));
        let mut s = 0.0;
        for k in 0..h * w {
            s += ((p[k] - pu[k]) - (g[k] - gu[k])).abs();
        }
        total += (1u64 << i) as f64 * s / (h * w) as f64;
        p = pd;
        g = gd;
        h /= 2;
        w /= 2;
    }
    total
}

#[test]
fn laplacian_loss_matches_loop_oracle() {
    let mut r = rng(1);
    for (h, w, levels) in [(16, 16, 4), (32, 16, 3), (8, 24, 2), (64, 64, 5)] {
        let p = uniform(&mut r, h * w, 0.0, 1.0);
        let g = uniform(&mut r, h * w, 0.0, 1.0);
        let tp = Tensor::new(&[1, 1, h, w], p.clone()).unwrap();
        let tg = Tensor::new(&[1, 1, h, w], g.clone()).unwrap();
        let got = laplacian_loss(&tp, &tg, levels).unwrap().item();
        let want = loop_laplacian(&p, &g, h, w, levels);
        assert!((got - want).abs() < 1e-12, "{h}x{w}: {got} vs {want}");
    }
}

#[test]
fn pyramid_reconstruction_is_lossless() {
    let mut r = rng(2);
    let x = Tensor::new(&[1, 2, 32, 32], uniform(&mut r, 2048, 0.0, 1.0)).unwrap();
    let (bands, low) = laplacian_pyramid(&x, 3).unwrap();
    assert_eq!(bands.len(), 3);
    assert_eq!(low.shape(), &[1, 2, 4, 4]);
    let back = reconstruct_pyramid(&bands, &low).unwrap();
    let err = back
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-12);
}

#[test]
fn indivisible_extent_is_rejected() {
    let x = Tensor::zeros(&[1, 1, 12, 12]);
    assert!(laplacian_loss(&x, &x, 3).is_err());
    assert!(laplacian_loss(&x, &x, 2).is_ok());
}
