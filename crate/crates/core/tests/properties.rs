use pafi_core::accounting::{count, Method, ModelDims};
use pafi_core::adapters::{hiwi_weight_merge, lora_merge, rank_of};
use pafi_core::bench::{build_model, pearson, SyntheticTask, ToyModelConfig};
use pafi_core::checkpoint::{decode, encode, Precision};
use pafi_core::mask::{ablation_mask, fisher_from_gradients, pafi_mask, select_indices};
use pafi_core::trainer::{masked_step, train, verify_frozen, Optimizer, OptimizerState};
use pafi_core::{AdapterPair, MaskPolicy, Nonlinearity, ParamGroup, ParameterStore, Role, Scope, Selector, SparseMask, Tensor, TrainConfig, TrainMode};
use proptest::prelude::*;

fn store_from(groups: Vec<(Role, Vec<f64>)>) -> ParameterStore {
    ParameterStore::from_groups(
        None,
        groups
            .into_iter()
            .enumerate()
            .map(|(i, (role, v))| ParamGroup::new(format!("g{i}"), role, Tensor::vector(v).unwrap()).unwrap()),
    )
    .unwrap()
}

fn vector_roles() -> impl Strategy<Value = Role> {
    prop_oneof![Just(Role::AttnBias), Just(Role::FfnBias), Just(Role::NormWeight), Just(Role::NormBias)]
}

fn groups() -> impl Strategy<Value = Vec<(Role, Vec<f64>)>> {
    prop::collection::vec((vector_roles(), prop::collection::vec(-10.0f64..10.0, 1..40)), 1..6)
}

fn naive(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            out[i * m + j] = (0..k).map(|t| a[i * k + t] * b[t * m + j]).sum();
        }
    }
    out
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    (0..cols * rows).map(|i| a[(i % rows) * cols + i / rows]).collect()
}

fn close(a: &[f64], b: &[f64], rel: f64) -> bool {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= rel * scale)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(g in groups(), extreme in prop::sample::select(vec![f64::MIN_POSITIVE, -0.0, f64::MAX, 1e-310])) {
        let mut g = g;
        g[0].1[0] = extreme;
        let s = store_from(g);
        let back = decode(&encode(&s, Precision::F64)).unwrap();
        for (a, b) in s.iter().zip(back.iter()) {
            prop_assert_eq!(a.name(), b.name());
            prop_assert_eq!(a.role(), b.role());
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            prop_assert_eq!(bits(a.tensor()), bits(b.tensor()));
        }
    }

    #[test]
    fn model_inventory_matches_accounting(v in 3usize..40, n in 2usize..16, half in 1usize..5, l in 1usize..4, classes in 1usize..4) {
        let config = ToyModelConfig { vocab: v, max_len: n, hidden: 2 * half, layers: l, heads: 2, classes, ..ToyModelConfig::default() };
        let (store, _) = build_model(config, 0).unwrap();
        let dims = ModelDims::new(v as u64, n as u64, 2 * half as u64, l as u64);
        let head = (2 * half + 1) * classes;
        prop_assert_eq!(store.total_params() as u64, count(Method::FullFt, &dims).unwrap().tuned + head as u64);
        // every coordinate sits in exactly one group with exactly one role
        let per_role: usize = [Role::Embedding, Role::PositionEmbedding, Role::NormWeight, Role::NormBias, Role::AttnWeight,
            Role::AttnBias, Role::FfnWeight, Role::FfnBias, Role::Classifier]
            .iter()
            .map(|&r| store.count_where(|g| g.role() == r))
            .sum();
        prop_assert_eq!(per_role, store.total_params());
    }

    #[test]
    fn pafi_mask_is_pure_and_respects_the_threshold(g in groups(), sparsity in 0.01f64..1.0) {
        let s = store_from(g);
        let policy = MaskPolicy { tune_norm: false, tune_embed: false };
        let a = pafi_mask(&s, sparsity, Scope::GroupWise, policy).unwrap();
        let b = pafi_mask(&s, sparsity, Scope::GroupWise, policy).unwrap();
        prop_assert_eq!(&a, &b);
        for (grp, m) in s.iter().zip(&a.groups) {
            let sel = m.dense();
            let data = grp.tensor().data();
            let max_in = data.iter().zip(&sel).filter(|(_, &s)| s).map(|(v, _)| v.abs()).fold(f64::NEG_INFINITY, f64::max);
            let min_out = data.iter().zip(&sel).filter(|(_, &s)| !s).map(|(v, _)| v.abs()).fold(f64::INFINITY, f64::min);
            prop_assert!(max_in <= min_out, "{} vs {}", max_in, min_out);
        }
    }

    #[test]
    fn selected_count_is_exact_even_with_ties(values in prop::collection::vec(prop::sample::select(vec![-1.0, 0.0, 0.5, 1.0]), 1..60), k_frac in 0.0f64..1.0) {
        let k = ((values.len() as f64 * k_frac) as usize).max(1);
        let scores: Vec<f64> = values.iter().map(|v: &f64| v.abs()).collect();
        for sel in [Selector::Smallest, Selector::Largest, Selector::Middle, Selector::Random] {
            let idx = select_indices(&scores, k, sel, 3).unwrap();
            prop_assert_eq!(idx.len(), k);
            prop_assert!(idx.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn smallest_and_largest_are_disjoint(values in prop::collection::vec(-5.0f64..5.0, 2..80), k_frac in 0.0f64..0.5) {
        let k = ((values.len() as f64 * k_frac) as usize).max(1);
        prop_assume!(2 * k <= values.len());
        let s = store_from(vec![(Role::FfnBias, values)]);
        let policy = MaskPolicy::default();
        let lo = ablation_mask(&s, k, Selector::Smallest, Scope::GroupWise, policy, 0).unwrap();
        let hi = ablation_mask(&s, k, Selector::Largest, Scope::GroupWise, policy, 0).unwrap();
        prop_assert!(lo.groups[0].indices.iter().all(|i| !hi.groups[0].indices.contains(i)));
    }

    #[test]
    fn fisher_ignores_sample_order(samples in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 4), 1..12), rot in 0usize..12) {
        let stores: Vec<ParameterStore> = samples.iter().map(|v| store_from(vec![(Role::FfnBias, v.clone())])).collect();
        let mut rotated = stores.clone();
        let len = rotated.len();
        rotated.rotate_left(rot % len);
        rotated.reverse();
        let a = fisher_from_gradients(stores).unwrap();
        let b = fisher_from_gradients(rotated).unwrap();
        prop_assert!(close(a.groups()[0].tensor().data(), b.groups()[0].tensor().data(), 1e-12));
    }

    #[test]
    fn masked_steps_never_touch_frozen_coordinates(g in groups(), keep in 0.0f64..1.0, steps in 1usize..6, adam in any::<bool>()) {
        let theta0 = store_from(g);
        let policy = MaskPolicy { tune_norm: false, tune_embed: false };
        let mask = pafi_mask(&theta0, keep.max(0.01), Scope::GroupWise, policy).unwrap();
        let opt = if adam { Optimizer::adam() } else { Optimizer::Sgd };
        let mut state = OptimizerState::new();
        let mut theta = theta0.clone();
        for step in 0..steps {
            let grads = store_from(
                theta
                    .iter()
                    .enumerate()
                    .map(|(i, g)| (g.role(), (0..g.len()).map(|j| ((step * 7 + j * 3 + i) as f64).sin()).collect()))
                    .collect(),
            );
            theta = masked_step(&theta, &grads, &mask, 0.1, opt, &mut state).unwrap();
        }
        prop_assert_eq!(verify_frozen(&theta0, &theta, &mask).unwrap(), 0);
    }

    #[test]
    fn full_mask_equals_dense_adam(p in prop::collection::vec(-2.0f64..2.0, 1..30), seed in 0u64..100) {
        let n = p.len();
        let s = store_from(vec![(Role::FfnBias, p.clone())]);
        let mask = SparseMask::from_groups(&s, |_| true);
        let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8f64, 0.05f64);
        let mut state = OptimizerState::new();
        let mut cur = s.clone();
        let (mut want, mut m, mut v) = (p.clone(), vec![0.0; n], vec![0.0; n]);
        for t in 1..=3 {
            let g: Vec<f64> = (0..n).map(|i| ((i as u64 * 31 + seed + t as u64) as f64).cos()).collect();
            let grads = store_from(vec![(Role::FfnBias, g.clone())]);
            cur = masked_step(&cur, &grads, &mask, lr, Optimizer::Adam { beta1: b1, beta2: b2, eps }, &mut state).unwrap();
            for i in 0..n {
                m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                let mhat = m[i] / (1.0 - b1.powi(t));
                let vhat = v[i] / (1.0 - b2.powi(t));
                want[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        let got: Vec<u64> = cur.groups()[0].tensor().data().iter().map(|x| x.to_bits()).collect();
        let want: Vec<u64> = want.iter().map(|x| x.to_bits()).collect();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn identity_merges_equal_explicit_products(din in 1usize..6, dout in 1usize..6, r in 1usize..4, vals in prop::collection::vec(-1.0f64..1.0, 200)) {
        let mut it = vals.into_iter().cycle();
        let mut take = |n: usize| (0..n).map(|_| it.next().unwrap()).collect::<Vec<f64>>();
        let w = take(din * dout);
        let wt = Tensor::matrix(din, dout, w.clone()).unwrap();
        // lora: W + W_down·W_up with W_down [in, r], W_up [r, out]
        let (ld, lu) = (take(din * r), take(r * dout));
        let pair = AdapterPair::new(Tensor::matrix(din, r, ld.clone()).unwrap(), Tensor::matrix(r, dout, lu.clone()).unwrap()).unwrap();
        let merged = lora_merge(&wt, &pair, 1.0).unwrap();
        let diff: Vec<f64> = merged.data().iter().zip(&w).map(|(a, b)| a - b).collect();
        prop_assert!(close(&diff, &naive(&ld, &lu, din, r, dout), 1e-12));
        // hiwi_weight adapts Wᵀ [out, in]: diff = (Wᵀ·W_down·W_up)ᵀ with W_down [in, r], W_up [r, in]
        let (hd, hu) = (take(din * r), take(r * din));
        let zeros = |n| Tensor::vector(vec![0.0; n]).unwrap();
        let pair = AdapterPair::with_biases(Tensor::matrix(din, r, hd.clone()).unwrap(), zeros(r), Tensor::matrix(r, din, hu.clone()).unwrap(), zeros(din)).unwrap();
        let merged = hiwi_weight_merge(&wt, &pair, Nonlinearity::Identity).unwrap();
        let diff: Vec<f64> = merged.data().iter().zip(&w).map(|(a, b)| a - b).collect();
        let wtt = transpose(&w, din, dout);
        let prod = naive(&naive(&wtt, &hd, dout, din, r), &hu, dout, r, din);
        prop_assert!(close(&diff, &transpose(&prod, dout, din), 1e-12));
    }

    #[test]
    fn rank_bound_respects_rank_of_w(rank_w in 1usize..8, r in 1usize..5, vals in prop::collection::vec(-1.0f64..1.0, 16 * 8 * 2 + 16 * 4 * 2)) {
        let d = 16;
        let (a, rest) = vals.split_at(d * rank_w);
        let (b, rest) = rest.split_at(rank_w * d);
        let (down, rest) = rest.split_at(d * r);
        let up = &rest[..r * d];
        let w = naive(a, b, d, rank_w, d);
        let m = naive(&naive(&w, down, d, d, r), up, d, r, d);
        let rank = rank_of(&Tensor::matrix(d, d, m).unwrap(), 1e-8);
        prop_assert!(rank <= rank_w.min(r), "rank {} with rank W {} and r {}", rank, rank_w, r);
    }

    #[test]
    fn adapter_counts_are_ordered(v in 1u64..1000, n in 1u64..600, d in 2u64..2048, l in 1u64..48, r in 1u64..128) {
        let dims = ModelDims::new(v, n, d, l).with_r(r);
        let t = |m| count(m, &dims).unwrap().tuned;
        // 2dr + r + d < 4dr < 4dr + 2r + 6d whenever d >= 2
        prop_assert!(t(Method::PfeifferAdapter) < t(Method::Lora));
        prop_assert!(t(Method::Lora) < t(Method::Adapter));
    }

    #[test]
    fn pearson_is_affine_invariant(pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..40), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
        let (base, degenerate) = pearson(&x, &y).unwrap();
        prop_assume!(!degenerate);
        let moved: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let (r, _) = pearson(&moved, &y).unwrap();
        prop_assert!((r - base).abs() <= 1e-12 * base.abs().max(1.0), "{} vs {}", r, base);
    }
}

#[test]
fn training_is_deterministic_and_modes_touch_the_right_groups() {
    let config = ToyModelConfig { vocab: 12, max_len: 5, hidden: 4, layers: 1, heads: 2, ..ToyModelConfig::default() };
    let (base, model) = build_model(config, 2).unwrap();
    let data = SyntheticTask { vocab: 12, seq_len: 5, train_size: 48, dev_size: 16, ..SyntheticTask::default() }
        .generate()
        .unwrap();
    let run = |mode| {
        let mut c = TrainConfig::new(mode);
        c.epochs = 2;
        c.batch_size = 8;
        train(&model, &base, &data, &c).unwrap().params
    };
    assert_eq!(encode(&run(TrainMode::FullFt), Precision::F64), encode(&run(TrainMode::FullFt), Precision::F64));
    let changed = |after: &ParameterStore| {
        base.iter()
            .zip(after.iter())
            .filter(|(a, b)| a.tensor() != b.tensor())
            .map(|(a, _)| a.role())
            .collect::<Vec<_>>()
    };
    let bitfit = changed(&run(TrainMode::BitFit));
    let biases = base.iter().filter(|g| g.role().is_bias() || g.role() == Role::Classifier).count();
    assert_eq!(bitfit.len(), biases);
    assert!(bitfit.iter().all(|r| r.is_bias() || *r == Role::Classifier));
    let norm = changed(&run(TrainMode::LinearFtNorm));
    let norms = base.iter().filter(|g| g.role().is_norm() || g.role() == Role::Classifier).count();
    assert_eq!(norm.len(), norms);
    assert!(norm.iter().all(|r| r.is_norm() || *r == Role::Classifier));
}
