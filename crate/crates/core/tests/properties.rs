//! Property tests of the invariants stated for each module.


use proptest::prelude::*;
use volseg_core::augment::{apply_elastic_all, apply_rigid_all, sample_elastic, RigidParams};
use volseg_core::eval::{default_thresholds, dice_coefficient, froc, optimal_threshold, corner_distance};
use volseg_core::losses::{class_weights, dice_coefficient_soft, wbce_loss, dice_loss, LossBatch};
use volseg_core::nn::{conv3d_forward, Checkpoint, NamedArray, OptimizerMeta};
use volseg_core::patching::{plan_windows, reconstruct, taper_value, AxisTaper, TaperProfile, extract_patch};
use volseg_core::rng::seeded;
use volseg_core::volume_io::{decode_grid, encode_grid, Mask, Volume};

fn volume(dims: [usize; 3], seed: u64) -> Volume {
    use rand::Rng;
    let mut r = seeded(seed);
    let n = dims.iter().product();
    Volume::new(dims, [1.0, 0.7, 0.7], (0..n).map(|_| r.gen_range(-2.0f32..2.0)).collect()).unwrap()
}

fn mask(dims: [usize; 3], seed: u64, p: f64) -> Mask {
    use rand::Rng;
    let mut r = seeded(seed);
    let n = dims.iter().product();
    Mask::new(dims, [1.0, 0.7, 0.7], (0..n).map(|_| r.gen_bool(p) as u8).collect()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn taper_is_bounded_and_continuous(a in 0.0f64..1.0, b in 0.0f64..1.0, m in 2usize..200) {
        let mf = m as f64;
        let (x_l, x_r) = (a.min(b) * mf, a.max(b) * mf);
        let t = AxisTaper::new(x_l, x_r, m).unwrap();
        prop_assert!(t.weights.iter().all(|&w| (0.0..=1.0).contains(&w)));
        let eps = 1e-9;
        if x_l > 0.0 {
            prop_assert!((taper_value(x_l - eps, x_l, x_r, mf) - 1.0).abs() < 1e-6);
        }
        if x_r < mf {
            prop_assert!((taper_value(x_r + eps, x_l, x_r, mf) - 1.0).abs() < 1e-6);
        }
        // voxel-centre weights are strictly positive, so every covered voxel
        // has a non-zero denominator
        prop_assert!(t.weights.iter().all(|&w| w > 0.0));
    }

    #[test]
    fn plan_covers_and_ends_flush(extent in 1usize..400, depth_frac in 0.01f64..1.0, overlap in 0.0f64..0.95) {
        let depth = ((extent as f64 * depth_frac).ceil() as usize).clamp(1, extent);
        let plan = plan_windows(extent, depth, overlap).unwrap();
        prop_assert_eq!(plan.axial_offsets[0], 0);
        prop_assert_eq!(*plan.axial_offsets.last().unwrap(), extent - depth);
        prop_assert!(plan.axial_offsets.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.coverage().iter().all(|&c| c >= 1));
    }

    #[test]
    fn reconstruction_of_consistent_patches_is_exact(extent in 8usize..60, depth in 4usize..24, seed in 0u64..1000, inset in 0.0f64..6.0) {
        let depth = depth.min(extent);
        let v = volume([extent, 3, 4], seed);
        let plan = plan_windows(extent, depth, 0.75).unwrap();
        let outs: Vec<Volume> = (0..plan.len()).map(|i| extract_patch(&v, &plan, i).unwrap()).collect();
        let taper = TaperProfile::from_insets([depth, 3, 4], [inset, 0.5, 1.0]).unwrap();
        let r = reconstruct(&outs, &plan, &taper, v.dims()).unwrap();
        for (a, b) in r.data().iter().zip(v.data()) {
            prop_assert!((a - b).abs() <= 1e-6);
        }
    }

    #[test]
    fn volume_and_mask_round_trip(d in 1usize..6, h in 1usize..6, w in 1usize..6, seed in 0u64..1000, p in 0.0f64..1.0) {
        let v = volume([d, h, w], seed);
        let back: Volume = decode_grid(&encode_grid(&v)).unwrap();
        prop_assert_eq!(back.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                        v.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
        prop_assert_eq!(back.spacing(), v.spacing());
        let m = mask([d, h, w], seed, p);
        let mb: Mask = decode_grid(&encode_grid(&m)).unwrap();
        prop_assert_eq!(mb, m);
    }

    #[test]
    fn checkpoint_round_trip(n in 0usize..40, seed in 0u64..100) {
        use rand::Rng;
        let mut r = seeded(seed);
        let arr = |name: &str, r: &mut volseg_core::rng::Rng| NamedArray {
            name: name.into(),
            shape: vec![1, n],
            data: (0..n).map(|_| f32::from_bits(r.gen::<u32>() & 0x7f7f_ffff)).collect(),
        };
        let c = Checkpoint {
            config: serde_json::json!({"k": seed}),
            meta: serde_json::json!({"epoch": 1}),
            params: vec![arr("a.w", &mut r), arr("a.b", &mut r)],
            optimizer: Some(OptimizerMeta { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8, step: seed }),
            moments: Some((vec![arr("a.w", &mut r), arr("a.b", &mut r)], vec![arr("a.w", &mut r), arr("a.b", &mut r)])),
        };
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes(), bytes);
        prop_assert_eq!(back, c);
    }

    #[test]
    fn same_conv_keeps_shape(kd in 0usize..3, kh in 0usize..3, kw in 0usize..3, d in 1usize..6, h in 1usize..6, w in 1usize..6) {
        let k = [2 * kd + 1, 2 * kh + 1, 2 * kw + 1];
        let x = vec![1.0f32; 2 * d * h * w];
        let wt = vec![0.1f32; 3 * 2 * k[0] * k[1] * k[2]];
        let y = conv3d_forward(&x, [1, 2, d, h, w], &wt, [3, 2, k[0], k[1], k[2]], &[0.0; 3]).unwrap();
        prop_assert_eq!(y.len(), 3 * d * h * w);
    }

    #[test]
    fn froc_is_monotone_and_matches_counting(seed in 0u64..500) {
        let dims = [6, 7, 5];
        let prob = volume(dims, seed);
        let prob = Volume::new(dims, [1.0; 3], prob.data().iter().map(|v| (v + 2.0) / 4.0).collect()).unwrap();
        let mut truth = mask(dims, seed + 1, 0.3);
        truth.data_mut()[0] = 1;
        let mut roi = mask(dims, seed + 2, 0.7);
        roi.data_mut()[0] = 1;
        let ts = default_thresholds();
        let c = froc(&prob, &truth, &roi, &ts).unwrap();
        for w in c.points.windows(2) {
            prop_assert!(w[1].sensitivity <= w[0].sensitivity);
            prop_assert!(w[1].fp <= w[0].fp);
        }
        let t = optimal_threshold(&c).unwrap();
        prop_assert!(c.points.iter().any(|p| p.threshold == t));
        let best = c.points.iter().map(|p| corner_distance(p, c.normalization)).fold(f64::INFINITY, f64::min);
        let at = c.points.iter().find(|p| p.threshold == t).unwrap();
        prop_assert_eq!(corner_distance(at, c.normalization), best);
    }

    #[test]
    fn dice_symmetric_and_equals_soft_dice_on_binary(seed in 0u64..500, p in 0.05f64..0.9) {
        let dims = [4, 5, 6];
        let a = mask(dims, seed, p);
        let b = mask(dims, seed + 7, p);
        let none = Mask::like(&a, 0);
        let ab = dice_coefficient(&a, &b, &none).unwrap();
        prop_assert_eq!(ab, dice_coefficient(&b, &a, &none).unwrap());
        let (pa, gb) = (a.to_volume(), b.to_volume());
        let roi = vec![1.0f32; a.len()];
        let soft = dice_coefficient_soft(&LossBatch::new(pa.data(), gb.data(), &roi, 1e-12).unwrap()).unwrap();
        if a.count() + b.count() > 0 {
            prop_assert!((soft - ab).abs() < 1e-6);
        }
    }

    #[test]
    fn losses_ignore_everything_outside_roi(seed in 0u64..500) {
        use rand::Rng;
        let mut r = seeded(seed);
        let n = 64;
        let p: Vec<f32> = (0..n).map(|_| r.gen_range(0.01f32..0.99)).collect();
        let g: Vec<f32> = (0..n).map(|_| r.gen_bool(0.3) as u8 as f32).collect();
        let mut roi: Vec<f32> = (0..n).map(|_| r.gen_bool(0.5) as u8 as f32).collect();
        roi[0] = 1.0;
        let (mut p2, mut g2) = (p.clone(), g.clone());
        for i in 0..n {
            if roi[i] == 0.0 {
                p2[i] = r.gen_range(0.0f32..1.0);
                g2[i] = 1.0 - g2[i];
            }
        }
        let b1 = LossBatch::new(&p, &g, &roi, 1e-7).unwrap();
        let b2 = LossBatch::new(&p2, &g2, &roi, 1e-7).unwrap();
        for f in [wbce_loss, dice_loss] {
            let (o1, o2) = (f(&b1).unwrap(), f(&b2).unwrap());
            prop_assert_eq!(o1.value.to_bits(), o2.value.to_bits());
            prop_assert_eq!(o1.grad.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                            o2.grad.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
            prop_assert!(o1.grad.iter().zip(&roi).all(|(g, r)| *r != 0.0 || *g == 0.0));
        }
        let w = class_weights(&b1);
        prop_assert_eq!(w.n_airway + w.n_background, roi.iter().filter(|&&r| r != 0.0).count());
    }

    #[test]
    fn augmentation_keeps_dims_and_binary_labels(seed in 0u64..200, fz in any::<bool>(), fy in any::<bool>(), fx in any::<bool>(), az in -10.0f64..10.0, ax in -10.0f64..10.0) {
        let dims = [5, 8, 7];
        let img = volume(dims, seed);
        let m = mask(dims, seed, 0.3);
        let p = RigidParams { flips: [fz, fy, fx], angles_deg: [az, 0.0, ax] };
        let (v2, ms) = apply_rigid_all(&img, &[&m], &p).unwrap();
        prop_assert_eq!(v2.dims(), dims);
        prop_assert!(ms[0].data().iter().all(|&x| x <= 1));
        let f = sample_elastic(&mut seeded(seed), 2.0, [3, 3], [8, 7]).unwrap();
        let (v3, ms3) = apply_elastic_all(&img, &[&m], &f).unwrap();
        prop_assert_eq!(v3.dims(), dims);
        prop_assert!(ms3[0].data().iter().all(|&x| x <= 1));
        let (lo, hi) = img.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
        // out-of-bounds samples read 0, which lies inside [lo, hi] here
        prop_assert!(v3.data().iter().all(|&v| v >= lo.min(0.0) && v <= hi.max(0.0)));
    }

    #[test]
    fn double_flip_is_identity(seed in 0u64..200, axis in 0usize..3) {
        let dims = [4, 6, 5];
        let img = volume(dims, seed);
        let m = mask(dims, seed, 0.4);
        let mut flips = [false; 3];
        flips[axis] = true;
        let p = RigidParams { flips, angles_deg: [0.0; 3] };
        let (a, am) = apply_rigid_all(&img, &[&m], &p).unwrap();
        prop_assert_eq!(am[0].count(), m.count());
        let (b, bm) = apply_rigid_all(&a, &[&am[0]], &p).unwrap();
        prop_assert_eq!(b, img);
        prop_assert_eq!(&bm[0], &m);
    }
}

#[test]
fn conv_is_bit_stable_across_parallel_and_sequential() {
    let x: Vec<f32> = (0..2 * 6 * 7 * 8).map(|i| ((i * 37) % 101) as f32 / 50.0 - 1.0).collect();
    let w: Vec<f32> = (0..4 * 2 * 27).map(|i| ((i * 13) % 17) as f32 / 17.0 - 0.5).collect();
    let run = || conv3d_forward(&x, [1, 2, 6, 7, 8], &w, [4, 2, 3, 3, 3], &[0.1, 0.2, 0.3, 0.4]).unwrap();
    volseg_core::par::set_parallel(true);
    let a = run();
    volseg_core::par::set_parallel(false);
    let b = run();
    volseg_core::par::set_parallel(true);
    assert_eq!(a, run());
    assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}
