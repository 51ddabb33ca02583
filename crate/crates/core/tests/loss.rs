mod common;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::Rng;

use common::*;
use toothseg::geometry::{build_penalty_matrix, CentroidTable, PenaltyMatrix, QuadrantPenalty};
use toothseg::loss::*;
use toothseg::{Volume, NUM_CLASSES};

fn pm() -> PenaltyMatrix {
    build_penalty_matrix(&CentroidTable::bundled_average(), &QuadrantPenalty::default(), 2.0).unwrap()
}

fn onehot(c: usize) -> Vec<f64> {
    let mut v = vec![0.0; NUM_CLASSES];
    v[c] = 1.0;
    v
}

fn stack(dims: [usize; 3], p: &[f64]) -> Volume {
    Volume::prob_stack(dims, [0.4; 3], NUM_CLASSES, p.iter().map(|&x| x as f32).collect()).unwrap()
}

#[test]
fn wasserstein_mass_mixture_example() {
    let m = pm();
    let mut pred = vec![0.0; NUM_CLASSES];
    pred[16] = 0.5;
    pred[2] = 0.5;
    let mut want = 0.0;
    for l in 0..NUM_CLASSES {
        for lp in 0..NUM_CLASSES {
            want += onehot(1)[l] * m.get(l, lp) * pred[lp];
        }
    }
    let got = wasserstein_mass(&pred, &onehot(1), &m).unwrap();
    assert!((got - want).abs() < 1e-15);
    assert!((got - 0.5 * (m.get(1, 16) + m.get(1, 2))).abs() < 1e-15);
    assert_eq!(wasserstein_mass(&onehot(7), &onehot(7), &m).unwrap(), 0.0);
    assert_eq!(wasserstein_mass(&onehot(0), &onehot(12), &m).unwrap(), 1.0);
    assert!(wasserstein_mass(&[0.5; NUM_CLASSES], &onehot(1), &m).is_err());
}

#[test]
fn geo_wdl_closed_cases() {
    let m = pm();
    let labels: Vec<u16> = (0..27).map(|i| (i % 33) as u16).collect();
    let p = one_hot_planar(&labels);
    assert_eq!(geo_wdl_slices(&p, &p, 27, &m).unwrap(), 0.0);
    assert_eq!(geo_wdl_slices(&onehot(0), &onehot(9), 1, &m).unwrap(), 1.0);
    // No tooth mass and no penalty.
    let bg = one_hot_planar(&[0; 8]);
    assert_eq!(geo_wdl_slices(&bg, &bg, 8, &m).unwrap(), 0.0);
    assert!(geo_wdl_slices(&p, &p, 26, &m).is_err());
}

#[test]
fn geo_wdl_matches_scalar_oracle_on_volumes() {
    let m = pm();
    let mut r = rng(21);
    for _ in 0..40 {
        let d = random_dims(&mut r, 4);
        let n = d[0] * d[1] * d[2];
        let labels: Vec<u16> = (0..n).map(|_| r.random_range(0..NUM_CLASSES as u16)).collect();
        let pred = stack(d, &random_probs(&mut r, n));
        let gt = toothseg::volume::one_hot(&Volume::labels(d, [0.4; 3], labels).unwrap()).unwrap();
        let f = |v: &Volume| v.as_prob_stack().unwrap().1.iter().map(|&x| x as f64).collect::<Vec<_>>();
        let want = scalar_geo_wdl(&f(&pred), &f(&gt), n, &m);
        assert!((geo_wdl(&pred, &gt, &m).unwrap() - want).abs() < 1e-9);
    }
}

#[test]
fn wce_cases() {
    let w = LossWeights::default();
    let labels: Vec<u16> = (0..27).map(|i| (i % 33) as u16).collect();
    assert_eq!(wce_slices(&one_hot_planar(&labels), &labels, &w).unwrap(), 0.0);
    let uniform = vec![1.0 / NUM_CLASSES as f64; NUM_CLASSES * 27];
    assert!((wce_slices(&uniform, &labels, &w).unwrap() - (NUM_CLASSES as f64).ln()).abs() < 1e-12);

    let mut r = rng(5);
    for _ in 0..20 {
        let labels: Vec<u16> = (0..27).map(|_| r.random_range(0..NUM_CLASSES as u16)).collect();
        let vol = Volume::labels([3, 3, 3], [0.4; 3], labels.clone()).unwrap();
        let w = LossWeights::with_frequencies_from(&vol).unwrap();
        let p = random_probs(&mut r, 27);
        let mut counts = [0.0f64; NUM_CLASSES];
        for &l in &labels {
            counts[l as usize] += 1.0;
        }
        let inv: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 / c } else { 0.0 }).collect();
        let s: f64 = inv.iter().sum();
        let mut want = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let c = l as usize;
            want += -(inv[c] * NUM_CLASSES as f64 / s) * p[c * 27 + i].max(1e-12).ln();
        }
        want /= 27.0;
        assert!((wce_slices(&p, &labels, &w).unwrap() - want).abs() < 1e-6);
    }
}

#[test]
fn wce_rejects_labels_without_frequency() {
    let mut w = LossWeights::default();
    w.class_frequencies[4] = 0.0;
    assert!(wce_slices(&one_hot_planar(&[4]), &[4], &w).is_err());
    assert!(wce_slices(&one_hot_planar(&[5]), &[5], &w).is_ok());
}

#[test]
fn segmentation_loss_is_sum_of_parts() {
    let m = pm();
    let mut r = rng(8);
    let d = [3, 3, 3];
    let labels: Vec<u16> = (0..27).map(|_| r.random_range(0..NUM_CLASSES as u16)).collect();
    let gt = Volume::labels(d, [0.4; 3], labels.clone()).unwrap();
    let w = LossWeights::with_frequencies_from(&gt).unwrap();
    let perfect = toothseg::volume::one_hot(&gt).unwrap();
    let s = segmentation_loss(&perfect, &gt, &m, &w).unwrap();
    assert_eq!((s.geo_wdl, s.wce, s.seg), (0.0, 0.0, 0.0));

    let p = random_probs(&mut r, 27);
    let pred = stack(d, &p);
    let s = segmentation_loss(&pred, &gt, &m, &w).unwrap();
    assert_eq!(s.seg, s.geo_wdl + s.wce);
    let pf: Vec<f64> = pred.as_prob_stack().unwrap().1.iter().map(|&x| x as f64).collect();
    assert!((s.geo_wdl - scalar_geo_wdl(&pf, &one_hot_planar(&labels), 27, &m)).abs() < 1e-6);
    assert!((s.wce - weighted_cross_entropy(&pred, &gt, &w).unwrap()).abs() < 1e-15);
}

#[test]
fn edt_loss_cases() {
    let gt: Vec<f64> = (0..64).map(|i| (i % 7) as f64).collect();
    assert_eq!(edt_loss_slices(&gt, &gt).unwrap(), 0.0);
    let shifted: Vec<f64> = gt.iter().map(|v| v + 1.0).collect();
    assert_eq!(edt_loss_slices(&shifted, &gt).unwrap(), 1.0);
    let mut r = rng(3);
    let p: Vec<f64> = (0..64).map(|_| r.random_range(0.0..5.0)).collect();
    let mut want = 0.0;
    for i in 0..64 {
        want += (p[i] - gt[i]) * (p[i] - gt[i]);
    }
    assert!((edt_loss_slices(&p, &gt).unwrap() - want / 64.0).abs() < 1e-9);
    let pv = Volume::scalar([4, 4, 4], [0.4; 3], p.iter().map(|&x| x as f32).collect()).unwrap();
    let gv = Volume::scalar([4, 4, 4], [0.4; 3], gt.iter().map(|&x| x as f32).collect()).unwrap();
    assert!((edt_loss(&pv, &gv).unwrap() - want / 64.0).abs() < 1e-5);
}

#[test]
fn direction_loss_cases() {
    let axes = [[1.0, 0.0, 0.0], [0.0, -1.0, 0.0], [0.0, 0.0, 1.0]];
    let gt: Vec<[f64; 3]> = (0..10).map(|i| axes[i % 3]).collect();
    let anti: Vec<[f64; 3]> = gt.iter().map(|v| [-v[0], -v[1], -v[2]]).collect();
    let mask = vec![3u16; 10];
    assert_eq!(direction_loss_slices(&gt, &gt, &mask, false).unwrap(), 0.0);
    let pi2 = std::f64::consts::PI.powi(2);
    assert!((direction_loss_slices(&anti, &gt, &mask, false).unwrap() - 10.0 * pi2).abs() < 1e-9);
    assert!((direction_loss_slices(&anti, &gt, &mask, true).unwrap() - pi2).abs() < 1e-12);

    // Background and zero ground-truth vectors do not count.
    let mut m2 = mask.clone();
    m2[0] = 0;
    let mut g2 = gt.clone();
    g2[1] = [0.0; 3];
    assert!((direction_loss_slices(&anti, &g2, &m2, false).unwrap() - 8.0 * pi2).abs() < 1e-9);

    let mut bad = gt.clone();
    bad[2] = [0.0; 3];
    assert!(direction_loss_slices(&bad, &gt, &mask, false).is_err());
    bad[2] = [2.0, 0.0, 0.0];
    assert!(direction_loss_slices(&bad, &gt, &mask, false).is_err());

    let mut r = rng(12);
    let p: Vec<[f64; 3]> = (0..30).map(|_| random_unit(&mut r)).collect();
    let g: Vec<[f64; 3]> = (0..30).map(|_| random_unit(&mut r)).collect();
    let mk: Vec<u16> = (0..30).map(|_| r.random_range(0..3)).collect();
    let mut want = 0.0;
    for i in 0..30 {
        if mk[i] != 0 {
            let c = p[i][0] * g[i][0] + p[i][1] * g[i][1] + p[i][2] * g[i][2];
            want += c.clamp(-1.0, 1.0).acos().powi(2);
        }
    }
    assert!((direction_loss_slices(&p, &g, &mk, false).unwrap() - want).abs() < 1e-6);
}

#[test]
fn total_loss_composition() {
    let w = LossWeights::default();
    assert_eq!(total_loss(LossParts::default(), &w).unwrap(), 0.0);
    assert!((total_loss(LossParts { edt: 1.0, seg: 1.0, dir: 1.0 }, &w).unwrap() - 10.100001).abs() < 1e-12);
    assert!(total_loss(LossParts { edt: f64::NAN, seg: 0.0, dir: 0.0 }, &w).is_err());
}

fn fd_check(f: impl Fn(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64, skip: impl Fn(usize) -> bool) {
    let mut xp = x.to_vec();
    for k in 0..x.len() {
        if skip(k) {
            continue;
        }
        xp[k] = x[k] + h;
        let fp = f(&xp);
        xp[k] = x[k] - h;
        let fm = f(&xp);
        xp[k] = x[k];
        let fd = (fp - fm) / (2.0 * h);
        assert!(rel_err(fd, grad[k]) < 1e-4, "entry {k}: fd {fd} analytic {}", grad[k]);
    }
}

#[test]
fn geo_wdl_gradient_matches_finite_differences() {
    let m = pm();
    let mut r = rng(31);
    for _ in 0..5 {
        let n = r.random_range(1..=8);
        let p = random_probs(&mut r, n);
        let g = random_probs(&mut r, n);
        let grad = geo_wdl_grad(&p, &g, n, &m).unwrap();
        fd_check(|x| geo_wdl_slices(x, &g, n, &m).unwrap(), &p, &grad, 1e-5, |_| false);
    }
}

#[test]
fn wce_gradient_matches_finite_differences() {
    let mut r = rng(32);
    let labels: Vec<u16> = (0..8).map(|_| r.random_range(0..NUM_CLASSES as u16)).collect();
    let w = LossWeights::with_frequencies_from(&Volume::labels([2, 2, 2], [0.4; 3], labels.clone()).unwrap()).unwrap();
    let p: Vec<f64> = random_probs(&mut r, 8).iter().map(|v| v * 0.9 + 0.1 / NUM_CLASSES as f64).collect();
    let grad = wce_grad(&p, &labels, &w).unwrap();
    fd_check(|x| wce_slices(x, &labels, &w).unwrap(), &p, &grad, 1e-7, |_| false);
}

#[test]
fn edt_gradient_matches_finite_differences() {
    let mut r = rng(33);
    let p: Vec<f64> = (0..27).map(|_| r.random_range(0.0..4.0)).collect();
    let g: Vec<f64> = (0..27).map(|_| r.random_range(0.0..4.0)).collect();
    let grad = edt_loss_grad(&p, &g).unwrap();
    fd_check(|x| edt_loss_slices(x, &g).unwrap(), &p, &grad, 1e-4, |_| false);
}

#[test]
fn direction_gradient_matches_finite_differences() {
    let mut r = rng(34);
    let p: Vec<[f64; 3]> = (0..27).map(|_| random_unit(&mut r)).collect();
    let g: Vec<[f64; 3]> = (0..27).map(|_| random_unit(&mut r)).collect();
    let mask: Vec<u16> = (0..27).map(|i| (i % 4) as u16).collect();
    let grad: Vec<f64> = direction_loss_grad(&p, &g, &mask).unwrap().into_iter().flatten().collect();
    let flat: Vec<f64> = p.iter().flatten().copied().collect();
    let unflat = |x: &[f64]| x.chunks(3).map(|c| [c[0], c[1], c[2]]).collect::<Vec<_>>();
    let near_pole = |k: usize| {
        let i = k / 3;
        let c: f64 = (0..3).map(|a| p[i][a] * g[i][a]).sum();
        c.abs() > 0.999
    };
    fd_check(|x| direction_loss_slices(&unflat(x), &g, &mask, false).unwrap(), &flat, &grad, 1e-6, near_pole);
}

fn random_rotation(r: &mut rand::rngs::StdRng) -> [[f64; 3]; 3] {
    let q: [f64; 4] = std::array::from_fn(|_| r.random_range(-1.0..1.0));
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - z * w), 2.0 * (x * z + y * w)],
        [2.0 * (x * y + z * w), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - x * w)],
        [2.0 * (x * z - y * w), 2.0 * (y * z + x * w), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

fn rotate(m: &[[f64; 3]; 3], v: &[f64; 3]) -> [f64; 3] {
    std::array::from_fn(|i| m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn geo_wdl_is_bounded_and_permutation_invariant(seed in any::<u64>(), n in 1usize..40) {
        let m = pm();
        let mut r = rng(seed);
        let p = random_probs(&mut r, n);
        let g = random_probs(&mut r, n);
        let v = geo_wdl_slices(&p, &g, n, &m).unwrap();
        prop_assert!((0.0..=1.0).contains(&v));
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut r);
        let permute = |x: &[f64]| {
            let mut y = vec![0.0; x.len()];
            for c in 0..NUM_CLASSES {
                for (i, &j) in perm.iter().enumerate() {
                    y[c * n + i] = x[c * n + j];
                }
            }
            y
        };
        prop_assert!((geo_wdl_slices(&permute(&p), &permute(&g), n, &m).unwrap() - v).abs() < 1e-12);
    }

    #[test]
    fn geo_wdl_of_identical_one_hot_is_zero(seed in any::<u64>(), n in 1usize..40) {
        let mut r = rng(seed);
        let labels: Vec<u16> = (0..n).map(|_| r.random_range(0..NUM_CLASSES as u16)).collect();
        let p = one_hot_planar(&labels);
        prop_assert_eq!(geo_wdl_slices(&p, &p, n, &pm()).unwrap(), 0.0);
    }

    #[test]
    fn wasserstein_mass_is_bilinear(seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let m = pm();
        let mut r = rng(seed);
        let (p1, p2, g1, g2) = (random_probs(&mut r, 1), random_probs(&mut r, 1), random_probs(&mut r, 1), random_probs(&mut r, 1));
        let mix = |x: &[f64], y: &[f64], t: f64| x.iter().zip(y).map(|(u, v)| t * u + (1.0 - t) * v).collect::<Vec<_>>();
        let w = |p: &[f64], g: &[f64]| wasserstein_mass(p, g, &m).unwrap();
        let lhs = w(&mix(&p1, &p2, a), &mix(&g1, &g2, b));
        let rhs = a * b * w(&p1, &g1) + a * (1.0 - b) * w(&p1, &g2) + (1.0 - a) * b * w(&p2, &g1) + (1.0 - a) * (1.0 - b) * w(&p2, &g2);
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn direction_loss_is_rotation_invariant(seed in any::<u64>(), n in 1usize..50) {
        let mut r = rng(seed);
        let p: Vec<[f64; 3]> = (0..n).map(|_| random_unit(&mut r)).collect();
        let g: Vec<[f64; 3]> = (0..n).map(|_| random_unit(&mut r)).collect();
        let mask: Vec<u16> = (0..n).map(|_| r.random_range(0..3)).collect();
        let rot = random_rotation(&mut r);
        let rp: Vec<[f64; 3]> = p.iter().map(|v| rotate(&rot, v)).collect();
        let rg: Vec<[f64; 3]> = g.iter().map(|v| rotate(&rot, v)).collect();
        let a = direction_loss_slices(&p, &g, &mask, false).unwrap();
        let b = direction_loss_slices(&rp, &rg, &mask, false).unwrap();
        prop_assert!((a - b).abs() < 1e-5);
    }

    #[test]
    fn total_loss_is_the_weighted_sum(edt in 0.0f64..100.0, seg in 0.0f64..10.0, dir in 0.0f64..1e4) {
        let w = LossWeights::default();
        let t = total_loss(LossParts { edt, seg, dir }, &w).unwrap();
        prop_assert!((t - (10.0 * edt + 0.1 * seg + 1e-6 * dir)).abs() < 1e-12);
    }
}
