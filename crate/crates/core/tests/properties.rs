use capsule_transformer::attention::MultiHeadProjection;
use capsule_transformer::capsule_san::{
    horizontal_routing, vertical_routing, AcceptanceGate, CapsuleSan, SanOptions,
};
use capsule_transformer::routing::{dynamic_routing, RoutingOptions, VoteSet};
use capsule_transformer::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn tensor(shape: Vec<usize>, lo: f64, hi: f64) -> impl Strategy<Value = Tensor> {
    let n = shape.iter().product::<usize>();
    prop::collection::vec(lo..hi, n).prop_map(move |d| Tensor::new(&shape, d).unwrap())
}

fn vote_set() -> impl Strategy<Value = (Tensor, usize)> {
    (1usize..=5, 1usize..=5, 1usize..=5, 1usize..=4)
        .prop_flat_map(|(m, n, k, t)| (tensor(vec![m, n, k], -3.0, 3.0), Just(t)))
}

fn cube() -> impl Strategy<Value = Tensor> {
    (1usize..=4, 1usize..=5).prop_flat_map(|(h, l)| tensor(vec![h, l, l], -3.0, 3.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn coupling_rows_are_distributions((votes, t) in vote_set()) {
        let r = dynamic_routing(&VoteSet::new(votes, t).unwrap()).unwrap();
        let n = r.coupling.shape()[1];
        for row in r.coupling.data().chunks(n) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn output_norms_follow_squash((votes, t) in vote_set()) {
        let r = dynamic_routing(&VoteSet::new(votes, t).unwrap()).unwrap();
        let k = r.omega.shape()[1];
        for (omega, s) in r.omega.data().chunks(k).zip(r.weighted_sum.data().chunks(k)) {
            let norm = omega.iter().map(|x| x * x).sum::<f64>().sqrt();
            let s2 = s.iter().map(|x| x * x).sum::<f64>();
            prop_assert!(norm < 1.0);
            prop_assert!((norm - s2 / (1.0 + s2)).abs() <= 1e-9);
        }
    }

    #[test]
    fn routing_is_equivariant_to_input_order((votes, t) in vote_set(), rot in 0usize..5) {
        let m = votes.shape()[0];
        let perm: Vec<usize> = (0..m).map(|i| (i + rot) % m).collect();
        let slabs: Vec<Tensor> = perm.iter().map(|&i| votes.index_axis0(i)).collect();
        let permuted = Tensor::stack(&slabs).unwrap();
        let a = dynamic_routing(&VoteSet::new(votes, t).unwrap()).unwrap();
        let b = dynamic_routing(&VoteSet::new(permuted, t).unwrap()).unwrap();
        prop_assert!(a.omega.max_abs_diff(&b.omega) < 1e-12);
        let n = a.coupling.shape()[1];
        for (j, &i) in perm.iter().enumerate() {
            for c in 0..n {
                prop_assert!((a.coupling.get(&[i, c]) - b.coupling.get(&[j, c])).abs() < 1e-12);
                prop_assert!((a.vote_weights.get(&[i, c]) - b.vote_weights.get(&[j, c])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_and_ignore_shifts(x in tensor(vec![4, 6], -30.0, 30.0), c in -50.0f64..50.0) {
        let g = Graph::new();
        let p = g.constant(x.clone()).softmax().value();
        let q = g.constant(x.map(|v| v + c)).softmax().value();
        for row in p.data().chunks(6) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
        prop_assert!(p.max_abs_diff(&q) < 1e-12);
    }

    #[test]
    fn routing_outputs_are_bounded_and_cube_shaped(c in cube(), w in tensor(vec![4, 4], -1.0, 1.0)) {
        let h = c.shape()[0];
        let g = Graph::new();
        let wv = g.constant(w).narrow(0, 0, h).unwrap().narrow(1, 0, h).unwrap();
        let gate = AcceptanceGate::new(wv, g.constant(Tensor::zeros(&[h]))).unwrap();
        let cv = g.constant(c.clone());
        let vertical = vertical_routing(cv, &gate, RoutingOptions::default()).unwrap().omega.value();
        let horizontal = horizontal_routing(cv, RoutingOptions::default()).unwrap().value();
        for out in [&vertical, &horizontal] {
            prop_assert_eq!(out.shape(), c.shape());
            prop_assert!(out.data().iter().all(|x| x.abs() < 1.0));
        }
    }

    #[test]
    fn horizontal_prefix_ignores_later_rows(c in cube(), bump in -5.0f64..5.0) {
        let (h, l) = (c.shape()[0], c.shape()[1]);
        prop_assume!(l >= 2);
        let mut perturbed = c.clone();
        for hh in 0..h {
            for k in 0..l {
                let v = perturbed.get(&[hh, l - 1, k]);
                perturbed.set(&[hh, l - 1, k], v + bump);
            }
        }
        let g = Graph::new();
        let a = horizontal_routing(g.constant(c), RoutingOptions::default()).unwrap().value();
        let b = horizontal_routing(g.constant(perturbed), RoutingOptions::default()).unwrap().value();
        for hh in 0..h {
            for pos in 0..l - 1 {
                for k in 0..l {
                    prop_assert_eq!(a.get(&[hh, pos, k]).to_bits(), b.get(&[hh, pos, k]).to_bits());
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Layer {
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    wo: Tensor,
    gate_w: Tensor,
}

fn layer(d: usize, h: usize) -> impl Strategy<Value = Layer> {
    let dk = d / h;
    let blocks = move || prop::collection::vec(tensor(vec![d, dk], -1.0, 1.0), h);
    (blocks(), blocks(), blocks(), tensor(vec![d, d], -1.0, 1.0), tensor(vec![h, h], -1.0, 1.0))
        .prop_map(|(wq, wk, wv, wo, gate_w)| Layer { wq, wk, wv, wo, gate_w })
}

fn run(layer: &Layer, x: &Tensor, options: SanOptions, causal: bool) -> Tensor {
    let g = Graph::new();
    let c = |t: &Tensor| g.constant(t.clone());
    let p = MultiHeadProjection::new(
        layer.wq.iter().map(c).collect(),
        layer.wk.iter().map(c).collect(),
        layer.wv.iter().map(c).collect(),
        c(&layer.wo),
    )
    .unwrap();
    let h = layer.wq.len();
    let gate = AcceptanceGate::new(c(&layer.gate_w), g.constant(Tensor::zeros(&[h]))).unwrap();
    CapsuleSan::new(p, Some(gate), options).unwrap().forward(c(x), causal).unwrap().value()
}

fn rows(x: &Tensor, order: &[usize]) -> Tensor {
    let d = x.shape()[1];
    let data = order.iter().flat_map(|&i| x.data()[i * d..(i + 1) * d].to_vec()).collect();
    Tensor::new(&[order.len(), d], data).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(30))]

    #[test]
    fn unmasked_attention_is_token_permutation_equivariant(
        layer in layer(8, 2),
        x in tensor(vec![5, 8], -1.0, 1.0),
        rot in 1usize..5,
    ) {
        let order: Vec<usize> = (0..5).map(|i| (i + rot) % 5).collect();
        let routing = RoutingOptions::default();
        // Positional routing is order-aware by design, so only these two qualify.
        for opts in [SanOptions::vanilla(), SanOptions { vertical: true, horizontal: false, routing }] {
            let a = run(&layer, &x, opts, false);
            let b = run(&layer, &rows(&x, &order), opts, false);
            prop_assert!(rows(&a, &order).max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn causal_rows_ignore_future_inputs(
        layer in layer(8, 2),
        x in tensor(vec![5, 8], -1.0, 1.0),
        noise in tensor(vec![5, 8], -3.0, 3.0),
        cut in 0usize..4,
    ) {
        let mut y = x.clone();
        for i in cut + 1..5 {
            for j in 0..8 {
                y.set(&[i, j], noise.get(&[i, j]));
            }
        }
        let routing = RoutingOptions::default();
        for opts in [SanOptions::vanilla(), SanOptions { vertical: false, horizontal: true, routing }] {
            let a = run(&layer, &x, opts, true);
            let b = run(&layer, &y, opts, true);
            for i in 0..=cut {
                for j in 0..8 {
                    prop_assert_eq!(a.get(&[i, j]).to_bits(), b.get(&[i, j]).to_bits());
                }
            }
        }
    }
}
