mod common;

use common::*;
use proptest::prelude::*;
use spikeflow::events::GrayImagePair;
use spikeflow::loss::{photometric_loss, smoothness_loss, total_loss, LossConfig};
use spikeflow::tensor::Tensor;
use spikeflow::FlowField;

fn pair(first: Tensor<f64>, second: Tensor<f64>) -> GrayImagePair {
    GrayImagePair::new(first, second, 0, 1).unwrap()
}

fn flow(h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> FlowField {
    FlowField::new(Tensor::from_fn(&[1, 2, h, w], |i| f(i / (h * w), (i / w) % h, i % w))).unwrap()
}

/// Bilinear lookup with border replication, written out directly.
fn lookup(img: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |xx: usize, yy: usize| img[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(x0, y0) + fx * at(x1, y0)) + fy * ((1.0 - fx) * at(x0, y1) + fx * at(x1, y1))
}

fn reference_photometric(f: &FlowField, first: &[f64], second: &[f64], cfg: &LossConfig) -> f64 {
    let (h, w) = (f.height(), f.width());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let warped = lookup(second, h, w, x as f64 + f.u(0, y, x), y as f64 + f.v(0, y, x));
            let d = first[y * w + x] - warped;
            total += (d * d + cfg.eta * cfg.eta).powf(cfg.r);
        }
    }
    total
}

fn reference_smoothness(f: &FlowField) -> f64 {
    let (h, w) = (f.height(), f.width());
    let t = f.tensor();
    let mut total = 0.0;
    for c in 0..2 {
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    total += (t.at4(0, c, y, x) - t.at4(0, c, y, x + 1)).abs();
                }
                if y + 1 < h {
                    total += (t.at4(0, c, y, x) - t.at4(0, c, y + 1, x)).abs();
                }
            }
        }
    }
    total / (h * w) as f64
}

#[test]
fn zero_flow_on_identical_images_is_the_charbonnier_floor() {
    let cfg = LossConfig::default();
    for (h, w) in [(4, 4), (8, 16), (16, 16)] {
        let mut r = rng(h as u64 * 31 + w as u64);
        let img = uniform(&[1, 1, h, w], 0.0, 1.0, &mut r);
        let l = photometric_loss(&FlowField::constant(1, h, w, 0.0, 0.0), &pair(img.clone(), img), &cfg).unwrap();
        let floor = (h * w) as f64 * (cfg.eta * cfg.eta).powf(cfg.r);
        assert!((l - floor).abs() < 1e-12, "{l} vs {floor}");
    }
}

#[test]
fn two_by_two_smoothness_fixture() {
    let t = Tensor::new(vec![1, 2, 2, 2], vec![0.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!((smoothness_loss(&FlowField::new(t).unwrap()).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn true_shift_reaches_the_floor_where_the_warp_stays_inside() {
    let (h, w, dx) = (8, 8, 2usize);
    let texture = |x: f64, y: f64| 0.5 + 0.3 * (0.7 * x).sin() * (0.4 * y + 0.2).cos();
    let first = Tensor::from_fn(&[1, 1, h, w], |i| texture((i % w) as f64, (i / w) as f64));
    // second frame: content moved right by dx
    let second = Tensor::from_fn(&[1, 1, h, w], |i| texture((i % w) as f64 - dx as f64, (i / w) as f64));
    let cfg = LossConfig::default();
    let images = pair(first.clone(), second.clone());
    let moved = FlowField::constant(1, h, w, dx as f64, 0.0);
    let still = FlowField::constant(1, h, w, 0.0, 0.0);
    let at_truth = photometric_loss(&moved, &images, &cfg).unwrap();
    let at_zero = photometric_loss(&still, &images, &cfg).unwrap();
    assert!(at_truth < at_zero);
    let floor = (cfg.eta * cfg.eta).powf(cfg.r);
    let inside = h * (w - dx);
    let mut border = 0.0;
    for y in 0..h {
        for x in w - dx..w {
            let d = first.at4(0, 0, y, x) - second.at4(0, 0, y, w - 1);
            border += (d * d + cfg.eta * cfg.eta).powf(cfg.r);
        }
    }
    assert!((at_truth - (inside as f64 * floor + border)).abs() < 1e-12);
}

#[test]
fn four_by_four_independent_recomputation() {
    let mut r = rng(40);
    let cfg = LossConfig::default();
    let first = uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut r);
    let second = uniform(&[1, 1, 4, 4], 0.0, 1.0, &mut r);
    let f = FlowField::new(uniform(&[1, 2, 4, 4], -1.5, 1.5, &mut r)).unwrap();
    let images = pair(first.clone(), second.clone());
    let p = photometric_loss(&f, &images, &cfg).unwrap();
    let expect_p = reference_photometric(&f, first.data(), second.data(), &cfg);
    assert!((p - expect_p).abs() < 1e-12);
    let s = smoothness_loss(&f).unwrap();
    assert!((s - reference_smoothness(&f)).abs() < 1e-12);
    let total = total_loss(std::slice::from_ref(&f), &images, &cfg).unwrap();
    assert!((total - (expect_p + cfg.lambda * reference_smoothness(&f))).abs() < 1e-12);
}

#[test]
fn multiscale_total_pools_images_to_each_scale() {
    let mut r = rng(41);
    let cfg = LossConfig { lambda: 2.0, ..LossConfig::default() };
    let first = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
    let second = uniform(&[1, 1, 8, 8], 0.0, 1.0, &mut r);
    let coarse = FlowField::new(uniform(&[1, 2, 4, 4], -1.0, 1.0, &mut r)).unwrap();
    let fine = FlowField::new(uniform(&[1, 2, 8, 8], -1.0, 1.0, &mut r)).unwrap();
    let pool = |t: &Tensor<f64>| {
        Tensor::from_fn(&[1, 1, 4, 4], |i| {
            let (y, x) = (2 * (i / 4), 2 * (i % 4));
            0.25 * (t.at4(0, 0, y, x) + t.at4(0, 0, y, x + 1) + t.at4(0, 0, y + 1, x) + t.at4(0, 0, y + 1, x + 1))
        })
    };
    let (p1, p2) = (pool(&first), pool(&second));
    let expect = reference_photometric(&coarse, p1.data(), p2.data(), &cfg)
        + reference_photometric(&fine, first.data(), second.data(), &cfg)
        + cfg.lambda * (reference_smoothness(&coarse) + reference_smoothness(&fine));
    let got = total_loss(&[coarse, fine], &pair(first, second), &cfg).unwrap();
    assert!((got - expect).abs() < 1e-12);
}

#[test]
fn degenerate_flows_are_contract_errors() {
    let f = FlowField::constant(1, 1, 4, 0.0, 0.0);
    assert!(matches!(smoothness_loss(&f), Err(spikeflow::Error::Contract(_))));
}

proptest! {
    #[test]
    fn constant_flow_is_perfectly_smooth(u in -5.0f64..5.0, v in -5.0f64..5.0, h in 2usize..9, w in 2usize..9) {
        prop_assert_eq!(smoothness_loss(&FlowField::constant(1, h, w, u, v)).unwrap(), 0.0);
    }

    #[test]
    fn smoothness_ignores_offsets(seed in 0u64..10_000, du in -3.0f64..3.0, dv in -3.0f64..3.0) {
        let mut r = rng(seed);
        let base = uniform(&[1, 2, 6, 5], -2.0, 2.0, &mut r);
        let shifted = flow(6, 5, |c, y, x| base.at4(0, c, y, x) + if c == 0 { du } else { dv });
        let a = smoothness_loss(&FlowField::new(base).unwrap()).unwrap();
        let b = smoothness_loss(&shifted).unwrap();
        prop_assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn smoothness_is_absolutely_homogeneous(seed in 0u64..10_000, k in -4.0f64..4.0) {
        let mut r = rng(seed);
        let base = uniform(&[1, 2, 5, 7], -2.0, 2.0, &mut r);
        let scaled = FlowField::new(base.scale(k)).unwrap();
        let a = smoothness_loss(&FlowField::new(base).unwrap()).unwrap();
        let b = smoothness_loss(&scaled).unwrap();
        prop_assert!((b - k.abs() * a).abs() < 1e-12 * (1.0 + a.abs() * k.abs()));
    }

    #[test]
    fn photometric_is_at_least_the_floor(seed in 0u64..10_000) {
        let mut r = rng(seed);
        let cfg = LossConfig::default();
        let images = pair(uniform(&[1, 1, 5, 6], 0.0, 1.0, &mut r), uniform(&[1, 1, 5, 6], 0.0, 1.0, &mut r));
        let f = FlowField::new(uniform(&[1, 2, 5, 6], -3.0, 3.0, &mut r)).unwrap();
        let floor = 30.0 * (cfg.eta * cfg.eta).powf(cfg.r);
        prop_assert!(photometric_loss(&f, &images, &cfg).unwrap() >= floor - 1e-15);
    }
}
