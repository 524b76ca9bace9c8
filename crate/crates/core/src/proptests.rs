//! Property tests across modules over randomly drawn small networks and
//! tensors.

use crate::analysis::odd_even_matricize;
use crate::constructions::{rnn_add, shallow_to_rnn};
use crate::grid::{grid, grid_bruteforce, TemplateSet};
use crate::io::{network_from_json, network_to_json};
use crate::networks::index_seq;
use crate::tensor::{tt_decompose, tt_to_full, DenseTensor};
use crate::{FeatureMap, Network, RnnCell, RnnNet, ShallowNet, Xi};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const ALL_XI: [Xi; 5] = [Xi::Product, Xi::RectMax, Xi::LogSumExp, Xi::Sum, Xi::L2];

fn xi_strategy() -> impl Strategy<Value = Xi> {
    prop::sample::select(ALL_XI.to_vec())
}

fn weights(shape: &[usize], integer: bool, rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| if integer { rng.gen_range(-2i32..=2) as f64 } else { rng.gen_range(-1.0..1.0) })
        .unwrap()
}

fn rnn(xi: Xi, m: usize, t: usize, r: usize, integer: bool, seed: u64) -> RnnNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = (0..t)
        .map(|s| RnnCell {
            input: weights(&[m, m], integer, &mut rng),
            core: weights(&[m, if s == 0 { 1 } else { r }, if s + 1 == t { 1 } else { r }], integer, &mut rng),
        })
        .collect();
    RnnNet::new(xi, cells, FeatureMap::identity(m)).unwrap()
}

fn shallow(xi: Xi, m: usize, t: usize, r: usize, seed: u64) -> ShallowNet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lambdas = (0..r).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let factors = (0..t).map(|_| weights(&[m, r], false, &mut rng)).collect();
    ShallowNet::new(xi, lambdas, factors, FeatureMap::identity(m)).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn grid_equals_bruteforce(xi in xi_strategy(), m in 1usize..4, t in 1usize..5, r in 1usize..4, seed: u64) {
        let ts = TemplateSet::identity(m);
        let net: Network = rnn(xi, m, t, r, false, seed).into();
        prop_assert_eq!(grid(&net, &ts).unwrap(), grid_bruteforce(&net, &ts).unwrap());
        let net: Network = shallow(xi, m, t, r, seed).into();
        prop_assert_eq!(grid(&net, &ts).unwrap(), grid_bruteforce(&net, &ts).unwrap());
    }

    #[test]
    fn addition_is_linear_on_grids(
        xi in prop::sample::select(vec![Xi::Product, Xi::RectMax, Xi::Sum]),
        m in 1usize..4,
        t in 1usize..4,
        (ra, rb) in (1usize..3, 1usize..3),
        (a, b) in (-2i32..=2, -2i32..=2),
        seed: u64,
    ) {
        let ts = TemplateSet::identity(m);
        let na = rnn(xi, m, t, ra, true, seed);
        let nb = rnn(xi, m, t, rb, true, seed ^ 1);
        let sum = rnn_add(&na, &nb, a as f64, b as f64).unwrap();
        let (ga, gb) = (grid(&na.into(), &ts).unwrap(), grid(&nb.into(), &ts).unwrap());
        let gs = grid(&sum.into(), &ts).unwrap();
        for ((s, x), y) in gs.data().iter().zip(ga.data()).zip(gb.data()) {
            prop_assert_eq!(*s, a as f64 * x + b as f64 * y);
        }
    }

    #[test]
    fn shallow_to_rnn_keeps_scores(xi in xi_strategy(), m in 1usize..4, t in 1usize..5, r in 1usize..4, seed: u64, idx in prop::collection::vec(0usize..3, 4)) {
        let net = shallow(xi, m, t, r, seed);
        let converted = shallow_to_rnn(&net).unwrap();
        let xs = index_seq(&idx.iter().take(t).map(|i| i % m).collect::<Vec<_>>());
        let (want, got) = (net.score(&xs).unwrap(), converted.score(&xs).unwrap());
        prop_assert!((want - got).abs() <= 1e-12 * want.abs().max(1.0), "{} vs {}", want, got);
    }

    #[test]
    fn json_roundtrip_is_exact(xi in xi_strategy(), m in 1usize..4, t in 1usize..5, r in 1usize..4, seed: u64) {
        for net in [Network::from(rnn(xi, m, t, r, false, seed)), shallow(xi, m, t, r, seed).into()] {
            let text = network_to_json(&net).unwrap();
            let back = network_from_json(&text).unwrap();
            prop_assert_eq!(network_to_json(&back).unwrap(), text);
            prop_assert_eq!(back, net);
        }
    }

    #[test]
    fn odd_even_matricization_permutes_entries(shape in prop::collection::vec(1usize..4, 2..6), seed: u64) {
        let shape: Vec<usize> = if shape.len() % 2 == 1 { shape[1..].to_vec() } else { shape };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = weights(&shape, false, &mut rng);
        let mat = odd_even_matricize(&h).unwrap();
        let rows: usize = shape.iter().step_by(2).product();
        prop_assert_eq!((mat.rows, mat.cols), (rows, h.len() / rows));
        let mut a = h.data().to_vec();
        let mut b = mat.data.clone();
        a.sort_by(f64::total_cmp);
        b.sort_by(f64::total_cmp);
        prop_assert_eq!(a, b);
    }

    #[test]
    fn tt_svd_reconstructs(shape in prop::collection::vec(1usize..5, 1..5), seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = weights(&shape, false, &mut rng);
        let back = tt_to_full(&tt_decompose(&h, 0.0).unwrap()).unwrap();
        let err = back.data().iter().zip(h.data()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let norm = h.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        prop_assert!(err <= 1e-12 * norm.max(1.0), "error {}", err);
    }
}

#[test]
fn low_rank_tensor_compresses() {
    // an outer product of vectors has internal TT ranks 1
    let v = |n: usize, s: f64| (0..n).map(|i| s + i as f64).collect::<Vec<f64>>();
    let (a, b, c) = (v(4, 1.0), v(5, -2.0), v(3, 0.5));
    let h = DenseTensor::from_fn(&[4, 5, 3], |ix| a[ix[0]] * b[ix[1]] * c[ix[2]]).unwrap();
    let tt = tt_decompose(&h, 1e-12).unwrap();
    assert_eq!(tt.ranks(), vec![1, 1]);
    let back = tt_to_full(&tt).unwrap();
    assert!(back.max_abs_diff(&h).unwrap() < 1e-12);
}
