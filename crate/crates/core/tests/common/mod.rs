#![allow(dead_code)] // each test binary uses a subset of the oracle

//! Shared finite-difference gradient oracle.
//!
//! The oracle never touches the backward pass: it re-runs the forward build
//! under coordinate perturbations and compares central differences against
//! the tape's reverse-mode gradients.

use epicast_core::tensor::{Graph, Mode, Tensor, Var};
use epicast_core::Rng;
use rand::Rng as _;

pub const FD_STEP: f64 = 1e-5;
pub const REL_TOL: f64 = 1e-4;

/// A differentiable scalar function of several tensor leaves.
pub trait ScalarCase {
    fn build(&self, g: &mut Graph, leaves: &[Var]) -> Var;
    fn leaf_shapes(&self) -> Vec<Vec<usize>>;
    /// Keep sampled magnitudes at least this far from zero (finite
    /// differences are invalid across activation kinks).
    fn kink_margin(&self) -> f64 {
        0.0
    }
}

pub fn sample_leaves(shapes: &[Vec<usize>], margin: f64, rng: &mut Rng) -> Vec<Tensor> {
    shapes
        .iter()
        .map(|shape| {
            let numel: usize = shape.iter().product();
            let data: Vec<f64> = (0..numel)
                .map(|_| {
                    let mut v: f64 = rng.random::<f64>() * 4.0 - 2.0;
                    if v.abs() < margin {
                        v += if v >= 0.0 { margin } else { -margin };
                    }
                    v
                })
                .collect();
            Tensor::new(shape.clone(), data).unwrap()
        })
        .collect()
}

fn eval(case: &dyn ScalarCase, leaves: &[Tensor], mode: Mode) -> f64 {
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), false)).collect();
    let out = case.build(&mut g, &vars);
    g.value(out).data()[0]
}

/// Reverse-mode gradients for every leaf coordinate.
fn ad_grads(case: &dyn ScalarCase, leaves: &[Tensor], mode: Mode) -> Vec<Vec<f64>> {
    let mut g = Graph::new(mode);
    let vars: Vec<Var> = leaves.iter().map(|t| g.leaf(t.clone(), true)).collect();
    let out = case.build(&mut g, &vars);
    g.backward(out).expect("scalar loss");
    vars.iter()
        .enumerate()
        .map(|(i, &v)| {
            g.grad(v)
                .map(|s| s.to_vec())
                .unwrap_or_else(|| vec![0.0; leaves[i].numel()])
        })
        .collect()
}

/// Run one seeded trial; panics with a description on mismatch.
pub fn check_case(name: &str, case: &dyn ScalarCase, mode: Mode, seed: u64) {
    let mut rng = epicast_core::rng_from_seed(seed);
    let leaves = sample_leaves(&case.leaf_shapes(), case.kink_margin(), &mut rng);
    let grads = ad_grads(case, &leaves, mode);

    for (li, leaf) in leaves.iter().enumerate() {
        for ci in 0..leaf.numel() {
            let mut plus = leaves.clone();
            plus[li].data_mut()[ci] += FD_STEP;
            let mut minus = leaves.clone();
            minus[li].data_mut()[ci] -= FD_STEP;
            let fd = (eval(case, &plus, mode) - eval(case, &minus, mode)) / (2.0 * FD_STEP);
            let ad = grads[li][ci];
            let denom = ad.abs().max(fd.abs()).max(1e-3);
            let rel = (ad - fd).abs() / denom;
            assert!(
                rel <= REL_TOL,
                "{name} seed {seed}: leaf {li} coord {ci}: ad={ad:.9e} fd={fd:.9e} rel={rel:.3e}"
            );
        }
    }
}

/// Convenience wrapper for closures + shapes.
pub struct FnCase<F: Fn(&mut Graph, &[Var]) -> Var> {
    pub f: F,
    pub shapes: Vec<Vec<usize>>,
    pub margin: f64,
}

impl<F: Fn(&mut Graph, &[Var]) -> Var> ScalarCase for FnCase<F> {
    fn build(&self, g: &mut Graph, leaves: &[Var]) -> Var {
        (self.f)(g, leaves)
    }
    fn leaf_shapes(&self) -> Vec<Vec<usize>> {
        self.shapes.clone()
    }
    fn kink_margin(&self) -> f64 {
        self.margin
    }
}

/// Collapse any tensor to a scalar through a fixed non-uniform projection,
/// so gradient errors cannot cancel symmetrically.
pub fn project(g: &mut Graph, v: Var) -> Var {
    let n = g.value(v).numel();
    let weights: Vec<f64> = (0..n).map(|i| (0.37 + 0.61 * i as f64).sin()).collect();
    let shape = g.shape(v).to_vec();
    let w = g.constant(Tensor::new(shape, weights).unwrap());
    let prod = g.mul(v, w).unwrap();
    g.sum_all(prod)
}

// ---------------------------------------------------------------------------
// parameter-side oracle: finite differences through a ParamStore
// ---------------------------------------------------------------------------

use epicast_core::params::{ParamStore, TapeBinding};

/// Check reverse-mode parameter gradients of `forward` (a scalar function of
/// the store) against central differences on `coords_per_entry` randomly
/// chosen coordinates of every trainable entry.
pub fn check_store_grads(
    name: &str,
    store: &ParamStore,
    mode: Mode,
    seed: u64,
    coords_per_entry: usize,
    forward: impl Fn(&mut Graph, &mut TapeBinding, &ParamStore) -> Var,
) {
    let eval = |store: &ParamStore| -> f64 {
        let mut g = Graph::new(mode);
        let mut tb = TapeBinding::new(store);
        let out = forward(&mut g, &mut tb, store);
        g.value(out).data()[0]
    };

    let mut g = Graph::new(mode);
    let mut tb = TapeBinding::new(store);
    let out = forward(&mut g, &mut tb, store);
    g.backward(out).expect("scalar loss");
    let grads = tb.collect_grads(&g, store);

    let mut rng = epicast_core::rng_from_seed(seed ^ 0xABCD);
    for (idx, entry) in store.entries().iter().enumerate() {
        if !entry.trainable {
            continue;
        }
        let numel = entry.value.numel();
        for _ in 0..coords_per_entry.min(numel) {
            let ci = (rng.random::<f64>() * numel as f64) as usize % numel;
            let ad = grads[idx].as_ref().map(|v| v[ci]).unwrap_or(0.0);
            let mut plus = store.clone();
            plus.entries_mut()[idx].value.data_mut()[ci] += FD_STEP;
            let mut minus = store.clone();
            minus.entries_mut()[idx].value.data_mut()[ci] -= FD_STEP;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            let denom = ad.abs().max(fd.abs()).max(1e-3);
            let rel = (ad - fd).abs() / denom;
            assert!(
                rel <= REL_TOL,
                "{name} seed {seed}: param `{}` coord {ci}: ad={ad:.9e} fd={fd:.9e} rel={rel:.3e}",
                entry.name
            );
        }
    }
}
