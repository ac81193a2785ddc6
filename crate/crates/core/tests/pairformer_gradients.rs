//! Finite-difference checks of every pairformer parameter gradient, plus
//! permutation equivariance of the trunk.

use coarsebind::complex::{generate_synthetic_complex, SyntheticGenConfig};
use coarsebind::distogram::{off_diagonal_mask, structure_loss_with_grad, PairTypeWeights, N_BINS};
use coarsebind::nn::Params;
use coarsebind::pairformer::{contract, PairInput, Pairformer, PairformerConfig};
use coarsebind::rng;
use ndarray::{Array2, Array3};

const H: f64 = 1e-5;

fn model(seed: u64, layers: usize) -> Pairformer {
    Pairformer::new(PairformerConfig {
        embedding_dim: 8,
        channels: 4,
        n_layers: layers,
        n_heads: 2,
        transition_factor: 2,
        seed,
    })
    .unwrap()
}

fn input(n_ligand: usize, n_protein: usize, seed: u64) -> PairInput {
    let c = generate_synthetic_complex(&SyntheticGenConfig {
        n_ligand,
        n_protein,
        embedding_dim: 8,
        seed,
        ..Default::default()
    });
    PairInput::from_complex(&c).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na.max(nb);
    if denom == 0.0 {
        0.0
    } else {
        diff / denom
    }
}

/// Compares analytic and central-difference gradients tensor by tensor.
fn check(model: &Pairformer, input: &PairInput, objective: &dyn Fn(&Array3<f64>) -> (f64, Array3<f64>)) {
    let (logits, cache) = model.forward_cached(input).unwrap();
    let (_, dlogits) = objective(&logits);
    let grad = model.backward(input, &cache, &dlogits);
    let analytic: Vec<(String, Vec<f64>)> = grad
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.iter().copied().collect()))
        .collect();

    let mut probe = model.clone();
    let eval = |p: &Pairformer| objective(&p.forward_cached(input).unwrap().0).0;
    let mut worst = (String::new(), 0.0f64);
    for (ti, (name, a)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(a.len());
        for idx in 0..a.len() {
            let orig = probe.tensors_mut()[ti].as_slice().unwrap()[idx];
            probe.tensors_mut()[ti].as_slice_mut().unwrap()[idx] = orig + H;
            let fp = eval(&probe);
            probe.tensors_mut()[ti].as_slice_mut().unwrap()[idx] = orig - H;
            let fm = eval(&probe);
            probe.tensors_mut()[ti].as_slice_mut().unwrap()[idx] = orig;
            numeric.push((fp - fm) / (2.0 * H));
        }
        let e = rel_err(a, &numeric);
        if e > worst.1 {
            worst = (name.clone(), e);
        }
        assert!(e < 1e-5, "{name}: relative error {e:.3e}");
    }
    eprintln!("worst tensor {} at {:.2e}", worst.0, worst.1);
}

#[test]
fn gradients_match_central_differences_on_contraction() {
    let m = model(11, 2);
    let inp = input(1, 2, 5);
    let mut r = rng::seeded(9);
    let w = Array3::from_shape_simple_fn((3, 3, N_BINS), || rng::normal(&mut r));
    check(&m, &inp, &|l| (contract(l.view(), w.view()), w.clone()));
}

#[test]
fn gradients_match_central_differences_on_structure_loss() {
    let m = model(12, 1);
    let inp = input(2, 1, 6);
    let targets = Array2::from_shape_fn((3, 3), |(i, j)| (5 * i + 11 * j) % N_BINS);
    let weights = PairTypeWeights::new(2.0, 5.0, 1.0).unwrap();
    let kinds = inp.kinds.clone();
    check(&m, &inp, &|l| {
        structure_loss_with_grad(l, &targets, &kinds, &weights, &off_diagonal_mask(3)).unwrap()
    });
}

#[test]
fn gradients_match_central_differences_with_pair_mask() {
    let m = model(13, 1);
    let mut inp = input(1, 3, 7);
    let mut mask = Array2::from_elem((4, 4), 1.0);
    mask[[1, 2]] = 0.0;
    mask[[2, 1]] = 0.0;
    mask[[3, 1]] = 0.0;
    inp.mask = Some(mask);
    let mut r = rng::seeded(10);
    let w = Array3::from_shape_simple_fn((4, 4, N_BINS), || rng::normal(&mut r));
    check(&m, &inp, &|l| (contract(l.view(), w.view()), w.clone()));
}

#[test]
fn trunk_is_permutation_equivariant() {
    let m = model(21, 2);
    let inp = input(3, 6, 8);
    let base = m.run(&inp).unwrap().logits;
    for seed in 0..5u64 {
        let mut perm: Vec<usize> = (0..9).collect();
        let mut r = rng::seeded(seed);
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
        let out = m.run(&inp.permuted(&perm)).unwrap().logits;
        for i in 0..9 {
            for j in 0..9 {
                for b in 0..N_BINS {
                    let d = (out[[i, j, b]] - base[[perm[i], perm[j], b]]).abs();
                    assert!(d < 1e-6, "pair ({i}, {j}) bin {b} differs by {d}");
                }
            }
        }
    }
}

#[test]
fn masked_pairs_do_not_influence_other_pairs() {
    let m = model(22, 2);
    let mut inp = input(2, 4, 9);
    let mut mask = Array2::from_elem((6, 6), 1.0);
    mask[[3, 4]] = 0.0;
    mask[[4, 3]] = 0.0;
    inp.mask = Some(mask);
    let base = m.run(&inp).unwrap().pair;
    // Changing the relative position of the masked pair leaves the rest untouched.
    let mut alt = inp.clone();
    alt.relpos[[3, 4]] = 0;
    alt.relpos[[4, 3]] = 0;
    let out = m.run(&alt).unwrap().pair;
    for i in 0..6 {
        for j in 0..6 {
            if (i, j) == (3, 4) || (i, j) == (4, 3) {
                continue;
            }
            for c in 0..4 {
                assert!((out[[i, j, c]] - base[[i, j, c]]).abs() < 1e-12);
            }
        }
    }
}
