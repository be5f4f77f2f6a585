use proptest::prelude::*;
use usg_core::phantom::{geometry, organ_mask, section};
use usg_core::{oracle_quality, render, PhantomConfig, ProbeState, Quat};

fn cfg() -> PhantomConfig {
    PhantomConfig::default()
}

fn mean_where(pixels: &[f32], mask: &[bool], want: bool) -> f64 {
    let (s, n) = pixels
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m == want)
        .fold((0.0, 0usize), |(s, n), (&p, _)| (s + p as f64, n + 1));
    s / n as f64
}

#[test]
fn organ_contrast_is_monotone_in_normal_force_up_to_nominal() {
    let c = cfg();
    for seed in [0, 7, 99] {
        let mut last = f64::NEG_INFINITY;
        for i in 0..=24 {
            let fz = c.coupling.f_nominal * i as f64 / 24.0;
            let s = ProbeState::upright(fz);
            let f = render(&s, &c, seed).unwrap();
            let mask = organ_mask(&s, &c);
            let contrast = mean_where(&f.pixels, &mask, true) - mean_where(&f.pixels, &mask, false);
            assert!(contrast >= last - 1e-9, "seed {seed} Fz {fz}: {contrast} < {last}");
            last = contrast;
        }
    }
}

#[test]
fn rasterized_section_matches_closed_form() {
    let c = cfg();
    let poses = [
        Quat::IDENTITY,
        Quat::from_axis_angle([0.0, 1.0, 0.0], 0.2),
        Quat::from_axis_angle([1.0, 0.0, 0.0], -0.15),
        Quat::from_axis_angle([0.3, 1.0, 0.1], -0.25),
    ];
    for pose in poses {
        for fz in [4.0, 6.0, 12.0] {
            let s = ProbeState::new(pose, [0.0, 0.0, fz, 0.0, 0.0, 0.0]).unwrap();
            let sec = section(&s, &c);
            assert!(sec.intersects);
            let mask = organ_mask(&s, &c);
            let w = c.image.width;
            let (mut n, mut sx, mut sy) = (0.0, 0.0, 0.0);
            for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                n += 1.0;
                sx += (i % w) as f64 + 0.5;
                sy += (i / w) as f64 + 0.5;
            }
            let area = n / mask.len() as f64;
            assert!(
                (area - sec.area_fraction).abs() / sec.area_fraction < 0.05,
                "{pose:?} {fz}: area {area} vs {}",
                sec.area_fraction
            );
            assert!((sx / n - sec.centroid_px.0).abs() < 0.5, "{pose:?} {fz}");
            assert!((sy / n - sec.centroid_px.1).abs() < 0.5, "{pose:?} {fz}");
        }
    }
}

#[test]
fn good_state_outscores_every_single_violation() {
    let c = cfg();
    let good = ProbeState::upright(c.coupling.f_nominal);
    let q_good = oracle_quality(&good, &c);
    assert_eq!(q_good.label, 1);
    let violations = [
        good.with_fz(c.coupling.f_max + 1.0),
        good.with_fz(c.coupling.f_min - 0.5),
        good.with_fz(0.0),
        // spins about the depth axis keep the section centred but exceed the tilt window
        good.with_pose(Quat::from_axis_angle([0.0, 0.0, 1.0], 0.6)).unwrap(),
        // steep elevation tilt misses the organ
        good.with_pose(Quat::from_axis_angle([1.0, 0.0, 0.0], 0.45)).unwrap(),
        // in-plane rotation pushes the section sideways
        good.with_pose(Quat::from_axis_angle([0.0, 1.0, 0.0], 0.45)).unwrap(),
    ];
    for v in violations {
        let q = oracle_quality(&v, &c);
        assert_eq!(q.label, 0, "{v:?}");
        assert!(q.score < q_good.score, "{v:?}: {} vs {}", q.score, q_good.score);
    }
}

#[test]
fn oracle_ignores_everything_that_only_affects_pixels() {
    let base = cfg();
    let mut noisy = cfg();
    noisy.speckle.mean = 0.6;
    noisy.speckle.variance = 0.05;
    noisy.noise_floor = 0.4;
    noisy.attenuation_coeff = 0.02;
    noisy.organ_intensity = 0.1;
    for i in 0..50 {
        let t = i as f64 / 50.0;
        let s = ProbeState::new(
            Quat::from_axis_angle([t, 1.0 - t, 0.3], 0.8 * t - 0.3),
            [t, -t, 20.0 * t, 5.0, -3.0, 1.0],
        )
        .unwrap();
        assert_eq!(oracle_quality(&s, &base), oracle_quality(&s, &noisy));
    }
}

fn state() -> impl Strategy<Value = ProbeState> {
    (
        prop::array::uniform3(-1.0f64..1.0),
        0.0f64..1.5,
        0.0f64..30.0,
        prop::array::uniform5(-50.0f64..50.0),
    )
        .prop_map(|(axis, angle, fz, n)| {
            ProbeState::new(Quat::from_axis_angle(axis, angle), [n[0], n[1], fz, n[2], n[3], n[4]]).unwrap()
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn pixels_stay_in_unit_range(s in state(), seed in any::<u64>()) {
        let c = PhantomConfig::with_image(32, 32, 1);
        let f = render(&s, &c, seed).unwrap();
        prop_assert!(f.pixels.iter().all(|p| (0.0..=1.0).contains(p)));
        prop_assert_eq!(f, render(&s, &c, seed).unwrap());
    }

    #[test]
    fn label_one_exactly_when_score_is_one(s in state()) {
        let q = oracle_quality(&s, &cfg());
        prop_assert_eq!(q.label == 1, q.score == 1.0);
        prop_assert!((0.0..=1.0).contains(&q.score));
        let g = geometry(&s, &cfg());
        if q.label == 1 {
            prop_assert!(g.section.intersects && g.fz >= 2.0 && g.fz <= 15.0 && g.tilt_rad <= 0.5);
        }
    }
}
