use proptest::collection::vec;
use proptest::prelude::*;

use wrapacc::cyclic::{CyclicKind, CyclicSpec, Slope};
use wrapacc::fxp::{exact_dot, quantize_uniform, to_signed, to_unsigned, wrap, wrapped_dot, FixedTensor, QuantScheme};
use wrapacc::kernels::{conv2d, gemm, gemm_raw, AccMode, ConvGeometry};
use wrapacc::packing::{
    add_buffered, add_lane_isolated, carry_count, pack, packed_dot_contaminated, unpack, PackSpec,
};

/// Carry-outs of every single b-bit addition, tracked one at a time. Each
/// carry is queued and added back in as its own operand.
fn brute_force_carries(v: &[i64], bits: u32) -> (u64, u64) {
    let modulus = 1u64 << bits;
    let mut reg = 0u64;
    let mut pending: Vec<u64> = v.iter().map(|&x| to_unsigned(x, bits).unwrap()).collect();
    let mut carries = 0u64;
    while let Some(x) = pending.pop() {
        let s = reg + x;
        if s >= modulus {
            carries += 1;
            pending.push(1);
        }
        reg = s % modulus;
    }
    (carries, reg)
}

fn signed_range(bits: u32) -> std::ops::RangeInclusive<i32> {
    -(1 << (bits - 1))..=(1 << (bits - 1)) - 1
}

fn lanes_wrap_add(xs: &[u64], ys: &[u64], bits: u32) -> Vec<u64> {
    xs.iter().zip(ys).map(|(a, b)| (a + b) & ((1 << bits) - 1)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn wrapped_dot_is_wrap_of_exact(
        b in prop::sample::select(vec![8u32, 12, 16]),
        seed in vec((any::<i32>(), any::<i32>()), 0..1024),
    ) {
        let r = signed_range(b);
        let span = *r.end() as i64 - *r.start() as i64 + 1;
        let fit = |v: i32| (*r.start() as i64 + (v as i64).rem_euclid(span)) as i32;
        let x: Vec<i32> = seed.iter().map(|p| fit(p.0)).collect();
        let w: Vec<i32> = seed.iter().map(|p| fit(p.1)).collect();
        prop_assert_eq!(wrapped_dot(&x, &w, b).unwrap(), wrap(exact_dot(&x, &w).unwrap(), b));
    }

    #[test]
    fn wrap_is_a_ring_homomorphism(a in any::<i64>(), c in any::<i64>(), b in 1u32..=32) {
        prop_assert_eq!(wrap(a.wrapping_add(c), b), wrap(wrap(a, b) + wrap(c, b), b));
        prop_assert_eq!(wrap(a.wrapping_mul(c), b), wrap(wrap(a, b) * wrap(c, b), b));
    }

    #[test]
    fn unsigned_signed_roundtrip(b in 1u32..=32, u in any::<u64>()) {
        let u = u & ((1u64 << b) - 1);
        prop_assert_eq!(to_unsigned(to_signed(u, b).unwrap(), b).unwrap(), u);
    }

    #[test]
    fn quantize_uniform_is_monotone(
        mut xs in vec(-50.0f64..50.0, 2..64),
        step in 0.01f64..3.0,
        bits in 2u32..=8,
        signed in any::<bool>(),
    ) {
        xs.sort_by(f64::total_cmp);
        let s = QuantScheme::uniform(step, bits, signed).unwrap();
        let q = quantize_uniform(&xs, vec![xs.len()], s).unwrap();
        prop_assert!(q.values().windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn cyclic_is_periodic_on_wide_integers(
        b in 2u32..=12,
        k in prop::sample::select(vec![1.0, 2.0, 3.5, 10.0]),
        kind in prop::sample::select(vec![CyclicKind::SmoothModulo, CyclicKind::ReluLike, CyclicKind::Absolute, CyclicKind::PureModulo]),
        t in -1.0f64..1.0,
    ) {
        let c = CyclicSpec::new(b, Slope::Finite(k), kind).unwrap();
        let z = (t * (1i64 << (b + 2)) as f64) as i64;
        prop_assert_eq!(c.apply_int(z), c.apply_int(z + (1 << b)));
        prop_assert_eq!(c.apply(z as f64), c.apply((z + (1 << b)) as f64));
    }

    #[test]
    fn smooth_modulo_is_odd_and_bounded(b in 2u32..=16, k in 1.0f64..50.0, z in -1.0e6f64..1.0e6) {
        let c = CyclicSpec::smooth(b, k).unwrap();
        let zi = z.round() as i64;
        prop_assert_eq!(c.apply_int(-zi), -c.apply_int(zi));
        prop_assert!(c.apply(z).abs() <= c.transition());
        prop_assert!((c.apply(-z) + c.apply(z)).abs() <= 1e-9 * (1.0 + z.abs()));
    }

    #[test]
    fn large_slope_approaches_pure_modulo(b in 2u32..=16, z in -1.0e6f64..1.0e6) {
        let smooth = CyclicSpec::smooth(b, 1e6).unwrap();
        let pure = CyclicSpec::new(b, Slope::Infinite, CyclicKind::PureModulo).unwrap();
        let h = smooth.half_range();
        let m = smooth.fold(z);
        prop_assume!(h - m.abs() > 1e-6 * h);
        prop_assert!((smooth.apply(z) - pure.apply(z)).abs() <= h * 1e-5);
    }

    #[test]
    fn carry_ledger_identity(v in vec(any::<i64>(), 0..200), b in 2u32..=16) {
        let v: Vec<i64> = v.into_iter().map(|x| wrap(x, b)).collect();
        let c = carry_count(&v, b).unwrap();
        let m = 1u64 << b;
        prop_assert_eq!(c.residue, (c.unsigned_sum + c.carries) % m);
        let bound = if c.unsigned_sum <= 1 {
            1
        } else {
            // ceil(log_{2^b}(u)) + 1
            let mut e = 0u32;
            let mut p = 1u128;
            while p < c.unsigned_sum as u128 {
                p <<= b;
                e += 1;
            }
            e + 1
        };
        prop_assert!(c.iterations <= bound, "{} iterations > {}", c.iterations, bound);
    }

    #[test]
    fn per_addition_simulator_agrees(v in vec(any::<i64>(), 0..=64), b in 2u32..=12) {
        let v: Vec<i64> = v.into_iter().map(|x| wrap(x, b)).collect();
        let c = carry_count(&v, b).unwrap();
        prop_assert_eq!(brute_force_carries(&v, b), (c.carries, c.residue));
    }

    #[test]
    fn lane_isolated_add_is_lanewise_wrap(xs in vec(0u64..256, 8), ys in vec(0u64..256, 8)) {
        let s = PackSpec::new(64, 8, false).unwrap();
        let sum = add_lane_isolated(pack(&xs, s).unwrap(), pack(&ys, s).unwrap()).unwrap();
        prop_assert_eq!(unpack(sum), lanes_wrap_add(&xs, &ys, 8));
    }

    #[test]
    fn buffered_add_is_isolated_at_one_bit_less(
        b in 3u32..=16,
        seed in vec((any::<u64>(), any::<u64>()), 64),
    ) {
        let buf = PackSpec::new(64, b, true).unwrap();
        let lanes = buf.lanes();
        let mask = (1u64 << (b - 1)) - 1;
        let xs: Vec<u64> = seed.iter().take(lanes).map(|p| p.0 & mask).collect();
        let ys: Vec<u64> = seed.iter().take(lanes).map(|p| p.1 & mask).collect();
        let sum = add_buffered(pack(&xs, buf).unwrap(), pack(&ys, buf).unwrap()).unwrap();
        prop_assert_eq!(unpack(sum), lanes_wrap_add(&xs, &ys, b - 1));
    }

    #[test]
    fn contaminated_dot_matches_fold_without_drops(
        x in vec(0i32..4, 1..64),
        signs in vec(0i32..=1, 64),
        flip in any::<prop::sample::Index>(),
        w in prop::sample::select(vec![16u32, 32, 64]),
    ) {
        let spec = PackSpec::new(w, 8, false).unwrap();
        let mut signs = signs[..x.len()].to_vec();
        signs[flip.index(x.len())] = -1;
        let signs = &signs[..];
        let d = packed_dot_contaminated(&x, signs, spec).unwrap();
        prop_assume!(d.dropped() == 0);
        let products: Vec<i64> = x.iter().zip(signs).map(|(&a, &s)| (a * s) as i64).collect();
        let c = carry_count(&products, 8).unwrap();
        prop_assert_eq!(d.value, to_signed(c.residue, 8).unwrap());
    }

    #[test]
    fn packed_modes_agree_with_wrapped(
        m in 1usize..=64, k in 1usize..=64, n in 1usize..=64,
        b in prop::sample::select(vec![4u32, 8, 12]),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = signed_range(b);
        let a: Vec<i32> = (0..m * k).map(|_| rng.gen_range(r.clone())).collect();
        let w: Vec<i32> = (0..k * n).map(|_| rng.gen_range(-1..=1)).collect();
        let exact = gemm_raw(&a, &w, m, k, n, AccMode::Exact32).unwrap();
        let wrapped = gemm_raw(&a, &w, m, k, n, AccMode::Wrapped { bits: b }).unwrap();
        prop_assert!(exact.data.iter().zip(&wrapped.data).all(|(&e, &v)| wrap(e, b) == v));
        for width in [32u32, 64] {
            if b > width / 2 {
                continue;
            }
            let iso = gemm_raw(&a, &w, m, k, n, AccMode::PackedIsolated { bits: b, width }).unwrap();
            prop_assert_eq!(&iso, &wrapped);
            let buf = gemm_raw(&a, &w, m, k, n, AccMode::PackedBuffered { bits: b, width }).unwrap();
            prop_assert!(exact.data.iter().zip(&buf.data).all(|(&e, &v)| wrap(e, b - 1) == v));
        }
    }

    #[test]
    fn gemm_is_invariant_to_inner_permutation(
        m in 1usize..=8, k in 1usize..=48, n in 1usize..=8,
        seed in any::<u64>(),
    ) {
        use rand::seq::SliceRandom;
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a: Vec<i32> = (0..m * k).map(|_| rng.gen_range(-128..128)).collect();
        let w: Vec<i32> = (0..k * n).map(|_| rng.gen_range(-1..=1)).collect();
        let mut perm: Vec<usize> = (0..k).collect();
        perm.shuffle(&mut rng);
        let a2: Vec<i32> = (0..m * k).map(|i| a[(i / k) * k + perm[i % k]]).collect();
        let w2: Vec<i32> = (0..k * n).map(|i| w[perm[i / n] * n + i % n]).collect();
        for mode in [AccMode::Exact32, AccMode::Wrapped { bits: 8 }, AccMode::PackedIsolated { bits: 8, width: 64 }] {
            prop_assert_eq!(gemm_raw(&a, &w, m, k, n, mode).unwrap(), gemm_raw(&a2, &w2, m, k, n, mode).unwrap());
        }
    }

    #[test]
    fn conv_matches_nested_loops(
        c in 1usize..=3, h in 1usize..=7, wd in 1usize..=7, cout in 1usize..=4,
        kh in 1usize..=3, kw in 1usize..=3, stride in 1usize..=2, pad in 0usize..=1,
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        prop_assume!(h + 2 * pad >= kh && wd + 2 * pad >= kw);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let xs = QuantScheme::uniform(1.0, 8, true).unwrap();
        let ws = QuantScheme::ternary(1.0).unwrap();
        let xv: Vec<i32> = (0..c * h * wd).map(|_| rng.gen_range(-128..128)).collect();
        let wv: Vec<i32> = (0..cout * c * kh * kw).map(|_| rng.gen_range(-1..=1)).collect();
        let x = FixedTensor::new(vec![c, h, wd], xv.clone(), xs).unwrap();
        let wt = FixedTensor::new(vec![cout, c, kh, kw], wv.clone(), ws).unwrap();
        let geom = ConvGeometry::new(kh, kw, stride, pad).unwrap();
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut direct = vec![0i64; cout * ho * wo];
        for o in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0i64;
                    for ci in 0..c {
                        for dy in 0..kh {
                            for dx in 0..kw {
                                let iy = (oy * stride + dy) as isize - pad as isize;
                                let ix = (ox * stride + dx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xi = xv[ci * h * wd + iy as usize * wd + ix as usize] as i64;
                                s += xi * wv[((o * c + ci) * kh + dy) * kw + dx] as i64;
                            }
                        }
                    }
                    direct[o * ho * wo + oy * wo + ox] = s;
                }
            }
        }
        let exact = conv2d(&x, &wt, geom, AccMode::Exact32).unwrap();
        prop_assert_eq!(&exact.data, &direct);
        for mode in [AccMode::Wrapped { bits: 8 }, AccMode::PackedIsolated { bits: 8, width: 64 }] {
            let got = conv2d(&x, &wt, geom, mode).unwrap();
            prop_assert!(got.data.iter().zip(&direct).all(|(&g, &d)| g == wrap(d, 8)));
        }
    }
}

#[test]
fn cyclic_periodicity_exhaustive_one_period() {
    for b in 2..=12u32 {
        let p = 1i64 << b;
        for slope in [Slope::Finite(1.0), Slope::Finite(2.0), Slope::Finite(10.0), Slope::Infinite] {
            for kind in [CyclicKind::SmoothModulo, CyclicKind::ReluLike, CyclicKind::Absolute, CyclicKind::PureModulo] {
                let c = CyclicSpec::new(b, slope, kind).unwrap();
                for z in -p / 2..p / 2 {
                    let v = c.apply_int(z);
                    for shift in [-4, -2, -1, 1, 2, 3] {
                        assert_eq!(v, c.apply_int(z + shift * p), "b={b} {kind:?} {slope:?} z={z}");
                    }
                }
            }
        }
    }
}

#[test]
fn slope_one_uses_half_the_range() {
    for b in 2..=12u32 {
        let c = CyclicSpec::smooth(b, 1.0).unwrap();
        let h = 1i64 << (b - 1);
        let top = (-h..h).map(|z| c.apply_int(z)).fold(f64::MIN, f64::max);
        let bottom = (-h..h).map(|z| c.apply_int(z)).fold(f64::MAX, f64::min);
        assert_eq!(top, (h / 2) as f64);
        assert_eq!(bottom, -(h / 2) as f64);
    }
}

#[test]
fn all_modes_agree_when_nothing_overflows() {
    let s = QuantScheme::uniform(1.0, 4, false).unwrap();
    let a = FixedTensor::new(vec![2, 3], vec![1, 2, 3, 4, 5, 6], s).unwrap();
    let w = FixedTensor::new(vec![3, 2], vec![1, -1, 0, 1, -1, 1], QuantScheme::ternary(1.0).unwrap()).unwrap();
    let exact = gemm(&a, &w, AccMode::Exact32).unwrap();
    assert_eq!(exact.data, vec![-2, 4, -2, 7]);
    for mode in [
        AccMode::Wrapped { bits: 8 },
        AccMode::PackedIsolated { bits: 8, width: 64 },
        AccMode::PackedBuffered { bits: 8, width: 64 },
    ] {
        assert_eq!(gemm(&a, &w, mode).unwrap(), exact, "{mode}");
    }
}
