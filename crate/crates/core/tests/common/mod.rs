//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(r: &mut impl Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| r.random_range(lo..hi)).collect()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn off_zero(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let m = r.random_range(0.1..1.0);
            if r.random_bool(0.5) {
                m
            } else {
                -m
            }
        })
        .collect()
}

/// Mostly-saturated matte: about a third of pixels at 0, a third at 1.
pub fn binaryish(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| match r.random_range(0..3) {
            0 => 0.0,
            1 => 1.0,
            _ => r.random_range(0.0..1.0),
        })
        .collect()
}

pub fn loop_sad(p: &[f64], g: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] {
                s += (p[i] - g[i]).abs();
            }
        }
    }
    s / 1000.0
}

pub fn loop_mse(p: &[f64], g: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let mut s = 0.0;
    let mut n = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if mask[i] {
                s += (p[i] - g[i]) * (p[i] - g[i]);
                n += 1;
            }
        }
    }
    s / n as f64 * 1000.0
}

/// Full 2-D Gaussian-derivative filtering with explicit kernels and clamped reads.
pub fn grad_oracle(p: &[f64], g: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let sigma: f64 = 1.4;
    let half = (3.0 * sigma).ceil() as i64;
    let size = (2 * half + 1) as usize;
    let gauss = |x: f64| {
        (-x * x / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt())
    };
    let dgauss = |x: f64| -x * gauss(x) / (sigma * sigma);
    // hx[i][j]: rows vary by gauss, columns by the derivative
    let mut hx = vec![vec![0.0; size]; size];
    for i in 0..size {
        for j in 0..size {
            hx[i][j] = gauss(i as f64 - half as f64) * dgauss(j as f64 - half as f64);
        }
    }
    let norm: f64 = hx.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    for row in hx.iter_mut() {
        for v in row.iter_mut() {
            *v /= norm;
        }
    }
    let filter = |img: &[f64], transpose: bool| -> Vec<f64> {
        let mut out = vec![0.0; h * w];
        for y in 0..h as i64 {
            for x in 0..w as i64 {
                let mut acc = 0.0;
                for i in 0..size as i64 {
                    for j in 0..size as i64 {
                        let k = if transpose {
                            hx[j as usize][i as usize]
                        } else {
                            hx[i as usize][j as usize]
                        };
                        let yy = (y + i - half).clamp(0, h as i64 - 1) as usize;
                        let xx = (x + j - half).clamp(0, w as i64 - 1) as usize;
                        acc += k * img[yy * w + xx];
                    }
                }
                out[y as usize * w + x as usize] = acc;
            }
        }
        out
    };
    let amp = |img: &[f64]| -> Vec<f64> {
        let gx = filter(img, false);
        let gy = filter(img, true);
        gx.iter()
            .zip(&gy)
            .map(|(a, b)| (a * a + b * b).sqrt())
            .collect()
    };
    let (ap, ag) = (amp(p), amp(g));
    let mut s = 0.0;
    for i in 0..h * w {
        if mask[i] {
            s += (ap[i] - ag[i]).powi(2);
        }
    }
    s / 1000.0
}

fn find(parent: &mut [usize], mut a: usize) -> usize {
    while parent[a] != a {
        parent[a] = parent[parent[a]];
        a = parent[a];
    }
    a
}

/// Largest 4-connected component by union-find; ties broken by the smallest
/// row-major index in the component.
pub fn largest_component_uf(on: &[bool], h: usize, w: usize) -> Vec<bool> {
    let mut parent: Vec<usize> = (0..h * w).collect();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !on[i] {
                continue;
            }
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)]
                .into_iter()
                .flatten()
            {
                if on[j] {
                    let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                    if a != b {
                        parent[a.max(b)] = a.min(b);
                    }
                }
            }
        }
    }
    let mut size = vec![0usize; h * w];
    let mut first = vec![usize::MAX; h * w];
    for i in 0..h * w {
        if on[i] {
            let r = find(&mut parent, i);
            size[r] += 1;
            first[r] = first[r].min(i);
        }
    }
    let best = (0..h * w)
        .filter(|&r| size[r] > 0)
        .max_by(|&a, &b| size[a].cmp(&size[b]).then(first[b].cmp(&first[a])));
    match best {
        Some(b) => (0..h * w)
            .map(|i| on[i] && find(&mut parent, i) == b)
            .collect(),
        None => vec![false; h * w],
    }
}

/// Transcription of the benchmark connectivity error (step 0.1, cutoff 0.15).
pub fn conn_oracle(p: &[f64], g: &[f64], mask: &[bool], h: usize, w: usize) -> f64 {
    let thresholds: Vec<f64> = (0..=10).map(|i| i as f64 * 0.1).collect();
    let mut l_map = vec![-1.0; h * w];
    for ii in 1..thresholds.len() {
        let on: Vec<bool> = (0..h * w)
            .map(|i| p[i] >= thresholds[ii] && g[i] >= thresholds[ii])
            .collect();
        let omega = largest_component_uf(&on, h, w);
        for i in 0..h * w {
            if l_map[i] == -1.0 && !omega[i] {
                l_map[i] = thresholds[ii - 1];
            }
        }
    }
    for v in l_map.iter_mut() {
        if *v == -1.0 {
            *v = 1.0;
        }
    }
    let mut s = 0.0;
    for i in 0..h * w {
        let pd = p[i] - l_map[i];
        let gd = g[i] - l_map[i];
        let pp = 1.0 - pd * if pd >= 0.15 { 1.0 } else { 0.0 };
        let gp = 1.0 - gd * if gd >= 0.15 { 1.0 } else { 0.0 };
        if mask[i] {
            s += (pp - gp).abs();
        }
    }
    s / 1000.0
}

/// Trimap classes by explicit k×k window scans with clamped coordinates.
pub fn trimap_oracle(alpha: &[f64], h: usize, w: usize, k: usize) -> Vec<u8> {
    let r = (k / 2) as i64;
    let eps = 1.0 / 255.0;
    let mut out = vec![1u8; h * w];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut all_fg = true;
            let mut all_bg = true;
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y + dy).clamp(0, h as i64 - 1) as usize;
                    let xx = (x + dx).clamp(0, w as i64 - 1) as usize;
                    let a = alpha[yy * w + xx];
                    all_fg &= a >= 1.0 - eps;
                    all_bg &= a <= eps;
                }
            }
            out[y as usize * w + x as usize] = if all_fg {
                2
            } else if all_bg {
                0
            } else {
                1
            };
        }
    }
    out
}

/// Random alpha with a saturated core, soft rim and empty border.
pub fn blob_alpha(r: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let cy = r.random_range(0.3..0.7) * h as f64;
    let cx = r.random_range(0.3..0.7) * w as f64;
    let rad = r.random_range(0.15..0.3) * h.min(w) as f64;
    let soft = r.random_range(1.0..6.0);
    (0..h * w)
        .map(|i| {
            let d = ((i / w) as f64 - cy).hypot((i % w) as f64 - cx);
            let a = ((rad + soft - d) / soft).clamp(0.0, 1.0);
            (a * 255.0).round() / 255.0
        })
        .collect()
}

/// Parameters of one attention block of width `c` with random values.
pub fn block_params(
    r: &mut impl Rng,
    prefix: &str,
    c: usize,
    mlp: usize,
) -> Vec<(String, Vec<usize>, Vec<f64>)> {
    let mut out = Vec::new();
    let mut push = |name: &str, shape: Vec<usize>, data: Vec<f64>| {
        out.push((format!("{prefix}.{name}"), shape, data));
    };
    push("ln1.g", vec![c], uniform(r, c, 0.5, 1.5));
    push("ln1.b", vec![c], uniform(r, c, -0.2, 0.2));
    for n in ["q", "k", "v", "proj"] {
        push(&format!("{n}.w"), vec![c, c], uniform(r, c * c, -0.6, 0.6));
        push(&format!("{n}.b"), vec![c], uniform(r, c, -0.2, 0.2));
    }
    push("ln2.g", vec![c], uniform(r, c, 0.5, 1.5));
    push("ln2.b", vec![c], uniform(r, c, -0.2, 0.2));
    push(
        "fc1.w",
        vec![c, c * mlp],
        uniform(r, c * c * mlp, -0.4, 0.4),
    );
    push("fc1.b", vec![c * mlp], uniform(r, c * mlp, -0.2, 0.2));
    push(
        "fc2.w",
        vec![c * mlp, c],
        uniform(r, c * c * mlp, -0.4, 0.4),
    );
    push("fc2.b", vec![c], uniform(r, c, -0.2, 0.2));
    out
}

/// LayerNorm (eps 1e-5) followed by an affine map, row by row.
pub fn ln_linear(
    x: &[f64],
    rows: usize,
    c: usize,
    g: &[f64],
    b: &[f64],
    w: &[f64],
    bias: &[f64],
) -> Vec<f64> {
    let mut out = vec![0.0; rows * c];
    for r in 0..rows {
        let row = &x[r * c..(r + 1) * c];
        let mean = row.iter().sum::<f64>() / c as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
        let n: Vec<f64> = row
            .iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-5).sqrt() * g[i] + b[i])
            .collect();
        for o in 0..c {
            let mut acc = bias[o];
            for i in 0..c {
                acc += n[i] * w[i * c + o];
            }
            out[r * c + o] = acc;
        }
    }
    out
}
