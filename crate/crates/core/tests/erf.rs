use lsdfn::erf::{
    build_erf_stack, compute_erf, erf_metrics, erf_to_pgm, model_interval, parse_pgm, sampling_interval, ErfMap, ErfStack,
};
use lsdfn::layer::{FusionMode, KernelMode, LsDfnConfig};
use lsdfn::rng::Rng;
use proptest::prelude::*;

fn conv_stack(depth: usize, k: usize) -> ErfStack {
    ErfStack::Conv { depth, kernel_size: k }
}

fn block(k: usize, s: usize, gamma: usize) -> LsDfnConfig {
    LsDfnConfig::new(3, 3, k, s, gamma)
}

fn bbox_extent(map: &ErfMap) -> (usize, usize) {
    let (y0, y1, x0, x1) = map.nonzero_bbox().expect("nonzero map");
    (y1 - y0 + 1, x1 - x0 + 1)
}

#[test]
fn conv_footprints_are_exact() {
    for (depth, extent) in [(1, 3), (2, 5)] {
        let model = build_erf_stack(&conv_stack(depth, 3), 3, 1).unwrap();
        let map = compute_erf(&model, [3, 15, 15], 8, 2).unwrap();
        let (y0, y1, x0, x1) = map.nonzero_bbox().unwrap();
        let r = extent / 2;
        assert_eq!((y0, y1, x0, x1), (7 - r, 7 + r, 7 - r, 7 + r));
        for y in 0..15 {
            for x in 0..15 {
                let inside = (y0..=y1).contains(&y) && (x0..=x1).contains(&x);
                assert_eq!(map.at(y, x) > 0.0, inside, "({y}, {x})");
            }
        }
    }
}

#[test]
fn block_footprint_matches_dependency_bound() {
    // Sampled centers reach (s-1)γ/2 each side, the kernel window k/2 more,
    // and the feature branch conv bk/2 more.
    let (k, s, gamma, bk) = (3, 3, 2, 3);
    let bound = (s - 1) * gamma + k + (bk - 1);
    let mut config = block(k, s, gamma);
    config.branch_kernel_size = bk;
    let model = build_erf_stack(&ErfStack::Lsdfn(config), 3, 3).unwrap();
    assert_eq!(model_interval(&model).extent(), bound);
    let map = compute_erf(&model, [3, 21, 21], 8, 4).unwrap();
    assert_eq!(bbox_extent(&map), (bound, bound));
}

#[test]
fn sampling_stage_area_law() {
    for k in [1, 3, 5] {
        for s in [1, 3, 5, 7] {
            for gamma in [1, 2, 3] {
                let e = sampling_interval(k, s, gamma).extent();
                assert_eq!(e, (s - 1) * gamma + k);
                assert_eq!(e * e, ((s - 1) * gamma + k).pow(2));
            }
        }
    }
}

#[test]
fn footprint_soundness() {
    let mut rng = Rng::new(77);
    for seed in 0..6u64 {
        let pick = |rng: &mut Rng, xs: &[usize]| xs[rng.below(xs.len() as u64) as usize];
        let mut config = block(pick(&mut rng, &[1, 3, 5]), pick(&mut rng, &[1, 3, 5]), pick(&mut rng, &[1, 2, 3]));
        config.branch_kernel_size = pick(&mut rng, &[1, 3]);
        config.branch_depth = pick(&mut rng, &[1, 2]);
        config.fusion = [FusionMode::Attention, FusionMode::MaxPool, FusionMode::Mean][seed as usize % 3];
        config.kernel_mode = if seed % 2 == 0 { KernelMode::SharedSpatial } else { KernelMode::SharedMixing };
        let model = build_erf_stack(&ErfStack::Lsdfn(config), 3, seed).unwrap();
        let bound = model_interval(&model);
        let map = compute_erf(&model, [3, 31, 31], 4, seed).unwrap();
        let (y0, y1, x0, x1) = map.nonzero_bbox().unwrap();
        let c = 15isize;
        for v in [y0, y1, x0, x1] {
            let off = v as isize - c;
            assert!(off >= bound.lo && off <= bound.hi, "offset {off} outside {bound:?}");
        }
    }
}

#[test]
fn measured_extent_grows_with_samples() {
    let mut last = (0, 0);
    for s in [1, 3, 5] {
        let model = build_erf_stack(&ErfStack::Lsdfn(block(3, s, 2)), 3, 5).unwrap();
        let m = erf_metrics(&compute_erf(&model, [3, 33, 33], 32, 6).unwrap(), 0.01).unwrap();
        assert!(m.extent_y >= last.0 && m.extent_x >= last.1, "s={s}: {m:?}");
        last = (m.extent_y, m.extent_x);
    }
}

#[test]
fn gaussian_profile_radius() {
    let (n, sigma, tau) = (81usize, 6.0f64, 0.05f64);
    let c = (n / 2) as f64;
    let values = (0..n * n)
        .map(|i| {
            let (y, x) = ((i / n) as f64 - c, (i % n) as f64 - c);
            (-(y * y + x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let map = ErfMap::from_values(n, n, values, (n / 2, n / 2)).unwrap();
    let m = erf_metrics(&map, tau).unwrap();
    let analytic = sigma * (2.0 * (1.0 / tau).ln()).sqrt();
    assert!((m.equivalent_radius - analytic).abs() / analytic <= 0.05, "{} vs {analytic}", m.equivalent_radius);
}

#[test]
fn pgm_outputs() {
    let zero = ErfMap::from_values(3, 4, vec![0.0; 12], (1, 2)).unwrap();
    let pgm = parse_pgm(&erf_to_pgm(&zero, true)).unwrap();
    assert_eq!((pgm.width, pgm.height, pgm.maxval), (4, 3, 255));
    assert!(pgm.pixels.iter().all(|&p| p == 0));

    let mut values = vec![0.0; 12];
    values[6] = 0.25;
    let delta = ErfMap::from_values(3, 4, values, (1, 2)).unwrap();
    let pgm = parse_pgm(&erf_to_pgm(&delta, true)).unwrap();
    assert_eq!(pgm.pixels.iter().filter(|&&p| p == 255).count(), 1);
    assert_eq!(pgm.pixels[6], 255);
    assert_eq!(pgm.pixels.iter().map(|&p| p as u32).sum::<u32>(), 255);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn support_shrinks_as_tau_rises(values in proptest::collection::vec(0.0f64..1.0, 30), t1 in 0.001f64..0.999, t2 in 0.001f64..0.999) {
        let map = ErfMap::from_values(5, 6, values, (2, 3)).unwrap();
        let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let a = erf_metrics(&map, lo).unwrap();
        let b = erf_metrics(&map, hi).unwrap();
        prop_assert!(b.support_area <= a.support_area);
        prop_assert!(a.support_area <= a.extent_x * a.extent_y);
        prop_assert_eq!(map.normalized().peak, if map.peak > 0.0 { 1.0 } else { 0.0 });
    }
}
