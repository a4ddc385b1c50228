//! Randomized property suites over the core invariants.

use proptest::prelude::*;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tsurf_core::depthdist::{dip_statistic, kde};
use tsurf_core::eval::{chamfer, KdTree};
use tsurf_core::fusion::TsdfVolume;
use tsurf_core::geom::{Mat3, Vec3};
use tsurf_core::scene::{Camera, Fragment};
use tsurf_core::transmittance::{composite, DepthMap, DEPTH_SENTINEL};

const CASES: u32 = 256;

fn fragment_list_strategy() -> impl Strategy<Value = Vec<Fragment>> {
    // Depths live in roughly [1, 3]: a bounded band keeps the uniform
    // threshold quantization error of the Riemann checks well under the
    // stated relative tolerance.
    prop::collection::vec((0.02f64..0.16, 0.01f64..0.95), 1..12).prop_map(|raw| {
        let mut depth = 1.0;
        raw.into_iter()
            .map(|(gap, opacity)| {
                depth += gap;
                Fragment { depth, opacity, color: [0.5; 3] }
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(CASES))]

    /// Larger transmittance thresholds never cross deeper (sentinel = +inf).
    #[test]
    fn icdf_monotone_in_threshold(
        fragments in fragment_list_strategy(),
        t1 in 0.001f64..1.0,
        t2 in 0.001f64..1.0,
    ) {
        let (t_small, t_big) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
        let profile = composite(&fragments, [0.0; 3]).unwrap();
        let d_small = profile
            .depth_at_transmittance(t_small)
            .unwrap()
            .unwrap_or(f64::INFINITY);
        let d_big = profile
            .depth_at_transmittance(t_big)
            .unwrap()
            .unwrap_or(f64::INFINITY);
        prop_assert!(d_small >= d_big, "d({t_small})={d_small} < d({t_big})={d_big}");
    }

    /// The uniform-threshold sweep agrees with the per-threshold scan and is
    /// non-increasing across the stack.
    #[test]
    fn uniform_sweep_matches_scan(fragments in fragment_list_strategy(), n in 2usize..96) {
        let profile = composite(&fragments, [0.0; 3]).unwrap();
        let sweep = profile.uniform_crossings(n);
        let mut prev = f64::INFINITY;
        for k in 1..=n {
            let want = profile
                .depth_at_transmittance(k as f64 / n as f64)
                .unwrap()
                .map_or(DEPTH_SENTINEL, |d| d as f32);
            prop_assert_eq!(sweep[k - 1], want);
            let v = if sweep[k - 1] == DEPTH_SENTINEL { f64::INFINITY } else { sweep[k - 1] as f64 };
            prop_assert!(v <= prev + 1e-12);
            prev = v;
        }
    }

    /// Riemann sum of the stepwise inverse CDF over uniform thresholds
    /// converges to the expected depth.
    #[test]
    fn expectation_consistent_with_quadrature(fragments in fragment_list_strategy()) {
        // Force near-total opacity so the residual mass is negligible.
        let mut fragments = fragments;
        let t_final: f64 = fragments.iter().map(|f| 1.0 - f.opacity).product();
        if t_final >= 1e-4 {
            let last = fragments.last().unwrap().depth;
            fragments.push(Fragment {
                depth: last + 0.1,
                opacity: (1.0 - 5e-5 / t_final).clamp(1e-6, 1.0 - 1e-9),
                color: [0.5; 3],
            });
        }
        let profile = composite(&fragments, [0.0; 3]).unwrap();
        let n = 4096usize;
        let sum: f64 = profile
            .uniform_crossings(n)
            .iter()
            .map(|d| if *d == DEPTH_SENTINEL { 0.0 } else { *d as f64 })
            .sum();
        let riemann = sum / n as f64;
        let expected = profile.expected_depth().unwrap();
        prop_assert!(
            (riemann - expected).abs() <= 1e-3 * expected.max(1e-9),
            "riemann {riemann} vs expected {expected}"
        );
    }

    /// The continuous transmittance curve crosses each threshold within the
    /// fragment interval whose right edge the step model reports.
    #[test]
    fn continuous_crossing_within_step_interval(
        fragments in fragment_list_strategy(),
        t in 0.001f64..0.999,
    ) {
        let profile = composite(&fragments, [0.0; 3]).unwrap();
        if let Some(step_depth) = profile.depth_at_transmittance(t).unwrap() {
            // Independent root find on the continuous curve by bisection.
            let (mut lo, mut hi) = (0.0, step_depth + 1.0);
            if profile.continuous_transmittance(hi) >= t {
                // Crossing exactly at the last fragment's step.
                prop_assert!(profile.t_final() < t);
            }
            for _ in 0..80 {
                let mid = 0.5 * (lo + hi);
                if profile.continuous_transmittance(mid) < t {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let entries = profile.entries();
            let g = entries.iter().position(|e| e.depth == step_depth).unwrap();
            let span = if g == 0 {
                // First fragment carries a step: crossing at its depth.
                0.0
            } else {
                entries[g].depth - entries[g - 1].depth
            };
            prop_assert!(
                (hi - step_depth).abs() <= span + 1e-6,
                "continuous {hi} vs step {step_depth}, span {span}"
            );
        }
    }

    /// Step-model constraint: the inverse-CDF integral over one fragment's
    /// transmittance drop is exactly the drop times the fragment depth.
    #[test]
    fn step_integral_identity(fragments in fragment_list_strategy()) {
        let profile = composite(&fragments, [0.0; 3]).unwrap();
        for e in profile.entries() {
            // Quadrature of the step inverse over (t_after, t_before].
            let m = 400;
            let mut acc = 0.0;
            for i in 0..m {
                let t = e.t_after + (e.t_before - e.t_after) * (i as f64 + 0.5) / m as f64;
                let d = profile.depth_at_transmittance(t).unwrap().unwrap();
                acc += d * (e.t_before - e.t_after) / m as f64;
            }
            let want = (e.t_before - e.t_after) * e.depth;
            prop_assert!((acc - want).abs() <= 1e-9 * want.max(1e-12));
        }
    }

    /// Integrating the same maps in any order produces a bit-identical volume.
    #[test]
    fn tsdf_view_order_invariant(
        depths in prop::collection::vec(1.2f32..3.4, 4),
        holes in prop::collection::vec(0usize..64, 0..6),
        order in Just(()).prop_perturb(|_, mut rng| {
            let mut idx = vec![0usize, 1, 2, 3];
            for i in (1..4).rev() {
                let j = (rng.next_u32() as usize) % (i + 1);
                idx.swap(i, j);
            }
            idx
        }),
    ) {
        let rot = Mat3::from_cols(
            Vec3::new(1.0, 0.0, 0.0),
            Vec3::new(0.0, -1.0, 0.0),
            Vec3::new(0.0, 0.0, -1.0),
        );
        let cam = Camera::new(0, 16.0, 16.0, 4.0, 4.0, 8, 8, rot, Vec3::new(0.0, 0.0, 4.0)).unwrap();
        let maps: Vec<DepthMap> = depths
            .iter()
            .map(|d| {
                let mut data = vec![*d; 64];
                for h in &holes {
                    data[*h] = DEPTH_SENTINEL;
                }
                DepthMap { camera_id: 0, threshold: 1.0, width: 8, height: 8, data }
            })
            .collect();

        let mut forward = TsdfVolume::new(Vec3::new(-0.5, -0.5, 0.5), 0.08, [12, 12, 30]).unwrap();
        for m in &maps {
            forward.integrate(m, &cam, 0.3).unwrap();
        }
        let mut permuted = TsdfVolume::new(Vec3::new(-0.5, -0.5, 0.5), 0.08, [12, 12, 30]).unwrap();
        for i in order {
            permuted.integrate(&maps[i], &cam, 0.3).unwrap();
        }
        prop_assert_eq!(forward, permuted);
    }

    /// kd-tree Chamfer equals the quadratic brute force.
    #[test]
    fn chamfer_matches_brute_force(
        a in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..90),
        b in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0, -5.0f64..5.0), 1..90),
    ) {
        let a: Vec<Vec3> = a.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
        let b: Vec<Vec3> = b.into_iter().map(|(x, y, z)| Vec3::new(x, y, z)).collect();
        let fast = chamfer(&a, &b).unwrap();
        let dir = |from: &[Vec3], to: &[Vec3]| {
            from.iter()
                .map(|p| to.iter().map(|q| (*p - *q).norm()).fold(f64::INFINITY, f64::min))
                .sum::<f64>()
                / from.len() as f64
        };
        let brute = 0.5 * (dir(&a, &b) + dir(&b, &a));
        prop_assert!((fast - brute).abs() < 1e-9, "fast {fast} brute {brute}");
    }

    /// Dip is invariant under strictly increasing affine maps of the samples.
    #[test]
    fn dip_affine_invariant(
        samples in prop::collection::vec(-10.0f64..10.0, 4..48),
        scale in 0.05f64..20.0,
        offset in -30.0f64..30.0,
    ) {
        let base = dip_statistic(&samples).unwrap();
        let mapped: Vec<f64> = samples.iter().map(|x| scale * x + offset).collect();
        let got = dip_statistic(&mapped).unwrap();
        prop_assert!((base - got).abs() < 1e-9, "base {base} got {got}");
    }

    /// KDE densities integrate to one and their CDF is monotone in [0, 1].
    #[test]
    fn kde_normalized(
        samples in prop::collection::vec(-5.0f64..5.0, 2..160),
        grid in 64usize..512,
    ) {
        let est = kde(&samples, None, grid).unwrap();
        prop_assert!((est.integral() - 1.0).abs() <= 1e-3);
        let cdf = est.cdf();
        prop_assert!(cdf[0] >= 0.0 && cdf[cdf.len() - 1] <= 1.0 + 1e-12);
        prop_assert!((cdf[cdf.len() - 1] - 1.0).abs() < 1e-9);
        for w in cdf.windows(2) {
            prop_assert!(w[1] >= w[0] - 1e-15);
        }
    }
}

/// The kd-tree path must agree with brute force at the full scale the
/// metrics run at.
#[test]
fn chamfer_brute_force_two_thousand_points() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let cloud = |rng: &mut ChaCha8Rng, n: usize| -> Vec<Vec3> {
        (0..n)
            .map(|_| {
                Vec3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect()
    };
    let a = cloud(&mut rng, 2000);
    let b = cloud(&mut rng, 2000);
    let fast = chamfer(&a, &b).unwrap();

    let tree_b = KdTree::build(&b).unwrap();
    let tree_a = KdTree::build(&a).unwrap();
    let mut sum_ab = 0.0;
    for p in &a {
        sum_ab += tree_b.nearest_sq(*p).sqrt();
    }
    let mut sum_ba = 0.0;
    for q in &b {
        sum_ba += tree_a.nearest_sq(*q).sqrt();
    }
    let tree_val = 0.5 * (sum_ab / a.len() as f64 + sum_ba / b.len() as f64);
    assert!((fast - tree_val).abs() < 1e-12);

    let dir = |from: &[Vec3], to: &[Vec3]| {
        from.iter()
            .map(|p| to.iter().map(|q| (*p - *q).norm()).fold(f64::INFINITY, f64::min))
            .sum::<f64>()
            / from.len() as f64
    };
    let brute = 0.5 * (dir(&a, &b) + dir(&b, &a));
    assert!((fast - brute).abs() < 1e-9, "fast {fast} brute {brute}");
}

/// Ground-truth points reproject onto pixels whose rays hit the surface at
/// the point's depth.
#[test]
fn ground_truth_consistent_with_renderer() {
    let scene = tsurf_core::scene::scene_from_json(
        r#"{
            "primitives": [
                {"kind": "sphere", "center": [0,0,0], "radius": 1.0, "opacity": 0.5,
                 "layer": "outer"},
                {"kind": "box", "center": [0,0,0], "half_extents": [0.4,0.4,0.4],
                 "opacity": 1.0, "layer": "inner"}
            ],
            "cameras": {"orbit": {"count": 6, "radius": 3.0, "elevation_deg": [25.0, -25.0]}},
            "image": {"width": 96, "height": 96, "fx": 110.0, "fy": 110.0}
        }"#,
    )
    .unwrap();
    let layers = tsurf_core::scene::ground_truth_layers(&scene, 200, 5).unwrap();
    let mut checked = 0usize;
    for points in layers.values() {
        for p in points {
            for cam in &scene.cameras {
                let Some(proj) = cam.project(*p) else { continue };
                let Some((u, v)) = cam.pixel_of(proj.px, proj.py) else { continue };
                // Within half a pixel of the containing pixel's center.
                assert!((proj.px - (u as f64 + 0.5)).abs() <= 0.5 + 1e-12);
                assert!((proj.py - (v as f64 + 0.5)).abs() <= 0.5 + 1e-12);
                // The exact ray through the projection hits the point.
                let ray = cam.ray_through(proj.px, proj.py).unwrap();
                let frags =
                    tsurf_core::scene::cast_fragments_along(&scene, &ray, 0);
                let hit = frags
                    .iter()
                    .any(|f| (f.depth - proj.ray_distance).abs() <= 1e-6);
                if hit {
                    checked += 1;
                }
                // Occluded points (behind the opaque box from this view) may
                // legitimately be missing; surface points in front must hit.
                let occluded = frags
                    .iter()
                    .any(|f| f.opacity == 1.0 && f.depth < proj.ray_distance - 1e-6);
                assert!(hit || occluded, "visible point missing from fragments");
            }
        }
    }
    assert!(checked > 1000, "too few visible checks: {checked}");
}
