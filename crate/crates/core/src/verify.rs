//! Self-checks behind the `check-loss` command: the vectorized loss against
//! the direct reference evaluation, and its analytic gradient against
//! central finite differences.

use rand::Rng;

use crate::contrast::{batch_loss, reference, FourKeys};
use crate::data::{derive_seed, rng_from_seed};

/// Temperatures exercised by the checks.
pub const CHECK_TAUS: [f64; 4] = [0.05, 0.3, 0.7, 5.0];

/// One random batch: query pairs (one shared, or one per proposal) and the
/// four key sets of each proposal.
#[derive(Debug, Clone)]
pub struct LossInstance {
    pub queries: Vec<(Vec<f64>, Vec<f64>)>,
    pub keys: Vec<[Vec<Vec<f64>>; 4]>,
    pub tau_easy: f64,
    pub tau_hard: f64,
}

/// Random instance with `channels ≤ max_channels` and each key set of size
/// `≤ max_keys` (positive sets nonempty half of the time).
pub fn random_instance<R: Rng + ?Sized>(rng: &mut R, max_channels: usize, max_keys: usize) -> LossInstance {
    let c = rng.gen_range(1..=max_channels);
    let vec = |rng: &mut R| -> Vec<f64> { (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect() };
    let proposals = rng.gen_range(1..=3);
    let shared = rng.gen_bool(0.5);
    let n_queries = if shared { 1 } else { proposals };
    let queries = (0..n_queries).map(|_| (vec(rng), vec(rng))).collect();
    let keys = (0..proposals)
        .map(|_| {
            std::array::from_fn(|_| {
                let n = rng.gen_range(0..=max_keys);
                (0..n).map(|_| vec(rng)).collect()
            })
        })
        .collect();
    LossInstance {
        queries,
        keys,
        tau_easy: CHECK_TAUS[rng.gen_range(0..CHECK_TAUS.len())],
        tau_hard: CHECK_TAUS[rng.gen_range(0..CHECK_TAUS.len())],
    }
}

fn views<T>(keys: &[[Vec<Vec<T>>; 4]]) -> Vec<FourKeys<'_, T>> {
    keys.iter()
        .map(|k| FourKeys {
            fg_easy: &k[0],
            fg_hard: &k[1],
            bg_easy: &k[2],
            bg_hard: &k[3],
        })
        .collect()
}

fn to_f32(keys: &[[Vec<Vec<f64>>; 4]]) -> Vec<[Vec<Vec<f32>>; 4]> {
    keys.iter()
        .map(|k| std::array::from_fn(|s| k[s].iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect()))
        .collect()
}

/// Vectorized loss of an instance in f64.
pub fn vectorized_loss(inst: &LossInstance) -> f64 {
    let q: Vec<(&[f64], &[f64])> = inst
        .queries
        .iter()
        .map(|(a, b)| (a.as_slice(), b.as_slice()))
        .collect();
    batch_loss(&q, &views(&inst.keys), inst.tau_easy, inst.tau_hard, false)
        .expect("valid instance")
        .total
}

/// Maximum absolute difference between the vectorized loss and the
/// reference over `n` random instances.
pub fn oracle_equivalence(n: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut rng = rng_from_seed(derive_seed(seed, 1, i as u64));
        let inst = random_instance(&mut rng, 8, 20);
        let fast = vectorized_loss(&inst);
        let slow = reference::batch_loss(&inst.queries, &inst.keys, inst.tau_easy, inst.tau_hard);
        worst = worst.max((fast - slow).abs());
    }
    worst
}

/// Relative error used by the gradient check. Entries whose analytic and
/// numeric values are both below `floor` in magnitude are compared on the
/// floor scale.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Magnitude below which gradient entries are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-3;
/// Relative finite-difference step.
pub const FD_STEP: f64 = 1e-4;

/// Gradient check of the 32-bit analytic gradient (keys and queries)
/// against central differences of the loss taken at the same f32 inputs.
/// The loss evaluations use f64 so the step `h = 1e-4·max(|x|, 1)` is not
/// swamped by f32 rounding. Returns the largest relative error over `n`
/// random instances.
pub fn gradient_check(n: usize, seed: u64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..n {
        let mut rng = rng_from_seed(derive_seed(seed, 2, i as u64));
        let mut inst = random_instance(&mut rng, 8, 12);
        // round inputs to f32 so both evaluations see identical values
        let round = |v: &mut Vec<f64>| v.iter_mut().for_each(|x| *x = *x as f32 as f64);
        inst.queries.iter_mut().for_each(|(a, b)| {
            round(a);
            round(b)
        });
        inst.keys.iter_mut().flatten().flatten().for_each(round);

        let keys32 = to_f32(&inst.keys);
        let q32: Vec<(Vec<f32>, Vec<f32>)> = inst
            .queries
            .iter()
            .map(|(a, b)| (a.iter().map(|&x| x as f32).collect(), b.iter().map(|&x| x as f32).collect()))
            .collect();
        let qrefs: Vec<(&[f32], &[f32])> = q32.iter().map(|(a, b)| (a.as_slice(), b.as_slice())).collect();
        let out = batch_loss(
            &qrefs,
            &views(&keys32),
            inst.tau_easy as f32,
            inst.tau_hard as f32,
            true,
        )
        .expect("valid instance");
        let grad = out.grad.expect("gradient requested");

        let numeric = |inst: &mut LossInstance, get: &dyn Fn(&mut LossInstance) -> &mut f64| -> f64 {
            let x = *get(inst);
            let h = FD_STEP * x.abs().max(1.0);
            *get(inst) = x + h;
            let lp = vectorized_loss(inst);
            *get(inst) = x - h;
            let lm = vectorized_loss(inst);
            *get(inst) = x;
            (lp - lm) / (2.0 * h)
        };

        for p in 0..inst.keys.len() {
            for s in 0..4 {
                for k in 0..inst.keys[p][s].len() {
                    for c in 0..inst.keys[p][s][k].len() {
                        let fd = numeric(&mut inst, &|i: &mut LossInstance| &mut i.keys[p][s][k][c]);
                        let an = grad.d_keys[p][s][k][c] as f64;
                        worst = worst.max(relative_error(an, fd, GRAD_FLOOR));
                    }
                }
            }
        }
        for qi in 0..inst.queries.len() {
            for c in 0..inst.queries[qi].0.len() {
                let fd = numeric(&mut inst, &|i: &mut LossInstance| &mut i.queries[qi].0[c]);
                worst = worst.max(relative_error(grad.d_queries[qi].0[c] as f64, fd, GRAD_FLOOR));
                let fd = numeric(&mut inst, &|i: &mut LossInstance| &mut i.queries[qi].1[c]);
                worst = worst.max(relative_error(grad.d_queries[qi].1[c] as f64, fd, GRAD_FLOOR));
            }
        }
    }
    worst
}
