mod common;

use proptest::prelude::*;
use rand::Rng;

use common::*;
use toothseg::field::*;
use toothseg::phantom::{generate, PhantomSpec};
use toothseg::{Grid, InstanceMap, Volume};

fn map(d: [usize; 3], ids: Vec<u16>) -> InstanceMap {
    InstanceMap::from_instance_labels(&Volume::labels(d, [0.4; 3], ids).unwrap()).unwrap()
}

fn energy(d: [usize; 3], e: Vec<f32>) -> EnergyField {
    EnergyField::prediction(Volume::scalar(d, [0.4; 3], e).unwrap()).unwrap()
}

#[test]
fn edt_matches_brute_force() {
    let mut r = rng(101);
    for _ in 0..25 {
        let d = random_dims(&mut r, 12);
        let k = r.random_range(1..=4);
        let l = random_blobs(&mut r, d, k);
        let e = instance_edt(&map(d, l.clone()));
        assert_eq!(e.values(), brute_edt(&l, d).as_slice(), "dims {d:?}");
        assert_eq!(e.source, EnergySource::GroundTruthEdt);
    }
}

#[test]
fn cube_in_grid() {
    let d = [7, 7, 7];
    let g = Grid::new(d);
    let mut l = vec![0u16; 343];
    for z in 2..5 {
        for y in 2..5 {
            for x in 2..5 {
                l[g.index(x, y, z)] = 1;
            }
        }
    }
    let e = instance_edt(&map(d, l.clone()));
    assert_eq!(e.values()[g.index(3, 3, 3)], 2.0);
    for face_voxel in [g.index(2, 3, 3), g.index(4, 3, 3), g.index(3, 3, 2)] {
        assert_eq!(e.values()[face_voxel], 1.0);
    }
    assert_eq!(e.values(), brute_edt(&l, d).as_slice());
}

#[test]
fn edt_is_local_to_each_instance() {
    let d = [30, 12, 12];
    let g = Grid::new(d);
    let mut l = vec![0u16; g.len()];
    for z in 2..10 {
        for y in 2..10 {
            for x in 2..10 {
                l[g.index(x, y, z)] = 1;
            }
        }
    }
    let alone = instance_edt(&map(d, l.clone()));
    let max = alone.values().iter().fold(0.0f32, |a, &b| a.max(b));
    let gap = max.ceil() as usize + 1;
    for z in 3..8 {
        for y in 3..8 {
            for x in (9 + gap)..(14 + gap) {
                l[g.index(x, y, z)] = 2;
            }
        }
    }
    let both = instance_edt(&map(d, l.clone()));
    for i in 0..g.len() {
        if l[i] == 1 {
            assert_eq!(alone.values()[i], both.values()[i]);
        }
    }
}

#[test]
fn ramp_and_constant() {
    let d = [6, 5, 7];
    let g = Grid::new(d);
    let ramp: Vec<f64> = (0..g.len()).map(|i| g.coords(i)[0] as f64).collect();
    let s = sobel_raw(&ramp, d);
    for i in 0..g.len() {
        let c = g.coords(i);
        if (0..3).all(|a| c[a] > 0 && c[a] + 1 < d[a]) {
            assert_eq!([s[0][i], s[1][i], s[2][i]], [32.0, 0.0, 0.0]);
        }
    }
    let ef = energy(d, ramp.iter().map(|&v| v as f32).collect());
    let dirs = sobel_gradient(&ef);
    assert_eq!(dirs.directions.as_vector3().unwrap()[g.index(2, 2, 3)], [1.0, 0.0, 0.0]);

    let flat = sobel_gradient(&energy(d, vec![2.5; g.len()]));
    assert!(flat.magnitude.as_scalar().unwrap().iter().all(|&m| m == 0.0));
    assert!(flat.directions.as_vector3().unwrap().iter().all(|u| *u == [0.0; 3]));
}

#[test]
fn bowl_directions_point_outward() {
    let d = [11, 11, 11];
    let g = Grid::new(d);
    let e: Vec<f32> = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            (0..3).map(|a| (c[a] as f32 - 5.0).powi(2)).sum::<f32>().sqrt()
        })
        .collect();
    let dirs = sobel_gradient(&energy(d, e));
    let u = dirs.directions.as_vector3().unwrap();
    for i in 0..g.len() {
        let c = g.coords(i);
        if c == [5, 5, 5] || (0..3).any(|a| c[a] == 0 || c[a] == 10) {
            continue;
        }
        let v: f32 = (0..3).map(|a| u[i][a] * (c[a] as f32 - 5.0)).sum();
        assert!(v > 0.0, "voxel {c:?}");
    }
}

#[test]
fn sphere_peak_has_zero_direction() {
    let d = [15, 15, 15];
    let g = Grid::new(d);
    let l: Vec<u16> = (0..g.len())
        .map(|i| {
            let c = g.coords(i);
            let r2: i64 = (0..3).map(|a| (c[a] as i64 - 7).pow(2)).sum();
            u16::from(r2 <= 25)
        })
        .collect();
    let (e, dirs) = descent_targets(&map(d, l));
    let center = g.index(7, 7, 7);
    let max = e.values().iter().fold(0.0f32, |a, &b| a.max(b));
    assert_eq!(e.values()[center], max);
    assert_eq!(dirs.directions.as_vector3().unwrap()[center], [0.0; 3]);
    assert_eq!(dirs.magnitude.as_scalar().unwrap()[center], 0.0);
}

#[test]
fn descent_targets_compose_the_two_operations() {
    let ph = generate(&PhantomSpec { dims: [64, 56, 48], teeth_per_quadrant: 2, ..Default::default() }).unwrap();
    let (e, dirs) = descent_targets(&ph.gt_instances);
    let e2 = instance_edt(&ph.gt_instances);
    assert_eq!(e, e2);
    let raw = sobel_gradient(&e2);
    assert_eq!(dirs.magnitude, raw.magnitude);
    let ids = ph.gt_instances.ids();
    let (a, b) = (dirs.directions.as_vector3().unwrap(), raw.directions.as_vector3().unwrap());
    for i in 0..ids.len() {
        assert_eq!(a[i], if ids[i] == 0 { [0.0; 3] } else { b[i] });
    }
}

#[test]
fn empty_map_gives_zero_targets() {
    let (e, d) = descent_targets(&map([5, 4, 3], vec![0; 60]));
    assert!(e.values().iter().all(|&v| v == 0.0));
    assert!(d.directions.as_vector3().unwrap().iter().all(|u| *u == [0.0; 3]));
}

fn swap_xz(v: &[f64], d: [usize; 3]) -> Vec<f64> {
    let g = Grid::new(d);
    let gs = Grid::new([d[2], d[1], d[0]]);
    let mut out = vec![0.0; v.len()];
    for i in 0..v.len() {
        let [x, y, z] = g.coords(i);
        out[gs.index(z, y, x)] = v[i];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn sobel_is_linear(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut r = rng(seed);
        let d = random_dims(&mut r, 8);
        let n = d[0] * d[1] * d[2];
        let e1: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let e2: Vec<f64> = (0..n).map(|_| r.random_range(-5.0..5.0)).collect();
        let mix: Vec<f64> = e1.iter().zip(&e2).map(|(x, y)| a * x + b * y).collect();
        let (s1, s2, sm) = (sobel_raw(&e1, d), sobel_raw(&e2, d), sobel_raw(&mix, d));
        for c in 0..3 {
            for i in 0..n {
                prop_assert!((sm[c][i] - (a * s1[c][i] + b * s2[c][i])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sobel_is_axis_equivariant(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = random_dims(&mut r, 7);
        let n = d[0] * d[1] * d[2];
        let e: Vec<f64> = (0..n).map(|_| r.random_range(0..10) as f64).collect();
        let s = sobel_raw(&e, d);
        let sw = sobel_raw(&swap_xz(&e, d), [d[2], d[1], d[0]]);
        prop_assert_eq!(&sw[0], &swap_xz(&s[2], d));
        prop_assert_eq!(&sw[1], &swap_xz(&s[1], d));
        prop_assert_eq!(&sw[2], &swap_xz(&s[0], d));
    }

    #[test]
    fn directions_are_unit_or_zero(seed in any::<u64>()) {
        let mut r = rng(seed);
        let d = random_dims(&mut r, 8);
        let l = random_blobs(&mut r, d, 3);
        let (_, dirs) = descent_targets(&map(d, l));
        for u in dirs.directions.as_vector3().unwrap() {
            let m = (u[0] * u[0] + u[1] * u[1] + u[2] * u[2]).sqrt();
            prop_assert!(m == 0.0 || (m - 1.0).abs() < 1e-6);
        }
    }
}
