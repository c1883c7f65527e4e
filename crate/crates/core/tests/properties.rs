use std::collections::HashSet;

use proptest::prelude::*;
use transpose_core::index::gray_encode;
use transpose_core::metrics::ssim;
use transpose_core::model::transpose_layers;
use transpose_core::stego::{add_param_noise, capacity, embed, extract, StegoMethod};
use transpose_core::*;

fn small_models() -> impl Strategy<Value = (Vec<LayerSpec>, Vec<usize>)> {
    prop_oneof![
        (1usize..12, 1usize..3, 2usize..5).prop_map(|(w, d, c)| (zoo::fc(&[1, 6, 6], w, d, c), vec![1, 6, 6])),
        (1usize..4, 1usize..3, 2usize..5).prop_map(|(ch, b, c)| (zoo::cnn(&[2, 7, 7], ch, b, c), vec![2, 7, 7])),
        (1usize..3, 1usize..3).prop_map(|(heads, blocks)| (zoo::vit(&[1, 8, 8], 4, 4 * heads, heads, blocks, 3), vec![1, 8, 8])),
    ]
}

fn random_vec(len: usize) -> impl Strategy<Value = Vec<f32>> {
    prop::collection::vec(-1.0f32..1.0, len)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gray_neighbours_differ_by_one_step(base in 2usize..=4, len in 1usize..=6, seed in any::<u64>()) {
        let total = base.pow(len as u32);
        let i = (seed as usize) % (total - 1);
        let a = gray_encode(i, base, len).unwrap();
        let b = gray_encode(i + 1, base, len).unwrap();
        let dist2: i32 = a.iter().zip(&b).map(|(x, y)| (*x as i32 - *y as i32).pow(2)).sum();
        prop_assert_eq!(dist2, 1);
    }

    #[test]
    fn gray_is_injective(base in 2usize..=4, len in 1usize..=6, i in any::<u64>(), j in any::<u64>()) {
        let total = base.pow(len as u32);
        let (i, j) = (i as usize % total, j as usize % total);
        prop_assume!(i != j);
        prop_assert_ne!(gray_encode(i, base, len).unwrap(), gray_encode(j, base, len).unwrap());
    }

    #[test]
    fn n_hot_classes_occupy_disjoint_regions(base in 2usize..=4, len in 2usize..=5) {
        let ix = SpatialIndexer::n_hot(base, len).unwrap();
        let per_class = ix.capacity().min(20);
        let entries = ix.enumerate(&vec![per_class; len]).unwrap();
        let keys: HashSet<Vec<u32>> = entries.iter().map(|e| e.vector.iter().map(|v| v.to_bits()).collect()).collect();
        prop_assert_eq!(keys.len(), entries.len());
        for e in &entries {
            prop_assert!(e.vector[e.class] >= base as f32);
        }
    }

    #[test]
    fn transposition_is_an_involution((specs, shape) in small_models(), seed in 0u64..100) {
        let model = Model::build(&specs, &shape, seed).unwrap();
        let layers = model.layers().to_vec();
        prop_assert_eq!(&transpose_layers(&transpose_layers(&layers)), &layers);
        let ptrs: Vec<*const f32> = model.params().ids().map(|id| model.params().get(id).data().as_ptr()).collect();
        let t = model.transpose();
        prop_assert_eq!(t.input_shape(), &layers.last().unwrap().out_shape[..]);
        prop_assert_eq!(t.output_shape(), &shape[..]);
        let back = t.transpose();
        prop_assert_eq!(back.layers(), &layers[..]);
        let again: Vec<*const f32> = back.params().ids().map(|id| back.params().get(id).data().as_ptr()).collect();
        prop_assert_eq!(again, ptrs);
    }

    #[test]
    fn linear_layer_is_its_own_adjoint(n in 1usize..10, m in 1usize..10, seed in 0u64..1000, x in random_vec(10), y in random_vec(10)) {
        let specs = vec![LayerSpec::linear(n, m, Activation::Identity).with_transpose_activation(Activation::Identity)];
        let model = Model::build(&specs, &[n], seed).unwrap();
        let fx = model.infer(&x[..n], Direction::Forward).unwrap();
        let ty = model.infer(&y[..m], Direction::Transposed).unwrap();
        let lhs: f64 = fx.data().iter().zip(&y[..m]).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x[..n].iter().zip(ty.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-5 * (1.0 + lhs.abs()), "{} vs {}", lhs, rhs);
    }

    #[test]
    fn conv_and_deconv_are_adjoint(
        c in 1usize..3, m in 1usize..4, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
        h in 4usize..8, seed in 0u64..1000,
    ) {
        let specs = vec![LayerSpec::conv(c, m, k, stride, pad, Activation::Identity).with_transpose_activation(Activation::Identity)];
        let model = Model::build(&specs, &[c, h, h], seed).unwrap();
        let out_len = model.output_len();
        let mut rng = seed;
        let mut next = || {
            rng = rng.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((rng >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        let x: Vec<f32> = (0..c * h * h).map(|_| next()).collect();
        let y: Vec<f32> = (0..out_len).map(|_| next()).collect();
        let fx = model.infer(&x, Direction::Forward).unwrap();
        let ty = model.infer(&y, Direction::Transposed).unwrap();
        let lhs: f64 = fx.data().iter().zip(&y).map(|(a, b)| *a as f64 * *b as f64).sum();
        let rhs: f64 = x.iter().zip(ty.data()).map(|(a, b)| *a as f64 * *b as f64).sum();
        prop_assert!((lhs - rhs).abs() < 1e-4, "{} vs {}", lhs, rhs);
    }

    #[test]
    fn avg_pool_after_upsample_is_stable(size in 1usize..4, h in 1usize..4, data in random_vec(2 * 81)) {
        let side = size * h;
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![1, 2, side, side], data[..2 * side * side].to_vec()).unwrap());
        let p = g.pool2d(x, size, PoolKind::Avg).unwrap();
        let u = g.upsample_nn(p, size, None).unwrap();
        let pp = g.pool2d(u, size, PoolKind::Avg).unwrap();
        prop_assert_eq!(g.value(pp).data(), g.value(p).data());
    }

    #[test]
    fn stego_round_trips((specs, shape) in small_models(), seed in 0u64..100, method_ix in 0usize..3, bits in 1u32..=23, fill in 0.0f64..1.0, byte_seed in any::<u8>()) {
        let method = [StegoMethod::Lsb, StegoMethod::LastBytes, StegoMethod::DeadKernel][method_ix];
        let model = Model::build(&specs, &shape, seed).unwrap();
        let cap = capacity(&model, method, bits);
        prop_assume!(cap > 0);
        let len = ((cap as f64 * fill) as usize).max(1);
        let payload: Vec<u8> = (0..len).map(|i| (i as u8).wrapping_mul(31).wrapping_add(byte_seed)).collect();
        let (carrier, manifest) = embed(&model, &payload, method, bits).unwrap();
        prop_assert_eq!(extract(&carrier, &manifest).unwrap(), payload);
    }

    #[test]
    fn lsb_relative_change_is_bounded(seed in 0u64..100, bits in 1u32..=16) {
        let model = Model::build(&zoo::fc(&[1, 6, 6], 8, 1, 3), &[1, 6, 6], seed).unwrap();
        let payload: Vec<u8> = (0..capacity(&model, StegoMethod::Lsb, bits)).map(|i| (i * 7 + seed as usize) as u8).collect();
        let (carrier, _) = embed(&model, &payload, StegoMethod::Lsb, bits).unwrap();
        let bound = 2f64.powi(bits as i32 - 23) * 2.0;
        for (a, b) in model.params().flatten().iter().zip(carrier.params().flatten()) {
            if a.abs() >= f32::MIN_POSITIVE {
                prop_assert!(((b - a) as f64 / *a as f64).abs() < bound);
            }
        }
    }

    #[test]
    fn noise_is_reproducible(seed in 0u64..100, sigma in 1e-9f64..1e-1) {
        let model = Model::build(&zoo::fc(&[1, 4, 4], 4, 1, 2), &[1, 4, 4], 0).unwrap();
        let a = add_param_noise(&model, sigma, seed, false).unwrap().params().flatten();
        let b = add_param_noise(&model, sigma, seed, false).unwrap().params().flatten();
        prop_assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn ssim_is_symmetric_and_bounded(side in 4usize..16, a in prop::collection::vec(0.0f32..1.0, 256), b in prop::collection::vec(0.0f32..1.0, 256)) {
        let n = side * side;
        let shape = [1, side, side];
        let ab = ssim(&a[..n], &b[..n], &shape).unwrap();
        let ba = ssim(&b[..n], &a[..n], &shape).unwrap();
        prop_assert!((ab - ba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&ab));
        prop_assert!((ssim(&a[..n], &a[..n], &shape).unwrap() - 1.0).abs() < 1e-6);
    }
}
