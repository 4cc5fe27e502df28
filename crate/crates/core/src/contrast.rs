//! Query-based pixel contrastive loss.
//!
//! For a query `q`, positive keys `K⁺` and negative keys `K⁻` at temperature
//! `τ`, with `s(k) = cos(q, k) / τ`:
//!
//! ```text
//! L = (1/|K⁺|) Σ_{k⁺} [ log(exp s(k⁺) + Σ_{k⁻} exp s(k⁻)) − s(k⁺) ]
//! ```
//!
//! Each summand equals `softplus(LSE_{k⁻} s(k⁻) − s(k⁺))`, which is how the
//! vectorized path evaluates it: one log-sum-exp over the negatives shared by
//! every positive. [`reference`] holds a direct double-loop evaluation used as
//! an oracle.
//!
//! A proposal contributes four such terms: foreground query against the easy
//! and the hard keys, and background query against the easy and the hard
//! keys, with easy and hard terms at separate temperatures.

use std::sync::atomic::{AtomicUsize, Ordering};

use num_traits::Float;

use crate::error::{Error, Result};
use crate::sampling::{KeySets, SharedQueries};

/// Norm below which a vector is treated as zero in cosine similarity.
pub const COSINE_EPS: f64 = 1e-8;

static DEGENERATE_COSINE: AtomicUsize = AtomicUsize::new(0);

/// Number of cosine evaluations that hit the zero-norm guard so far.
pub fn degenerate_cosine_count() -> usize {
    DEGENERATE_COSINE.load(Ordering::Relaxed)
}

#[inline]
fn cast<T: Float>(v: f64) -> T {
    T::from(v).expect("representable constant")
}

fn dot<T: Float>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

fn norm<T: Float>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// Cosine similarity; 0 (and a counter increment) when either norm is below
/// [`COSINE_EPS`].
pub fn cosine_similarity<T: Float>(a: &[T], b: &[T]) -> T {
    let (na, nb) = (norm(a), norm(b));
    let eps = cast::<T>(COSINE_EPS);
    if na < eps || nb < eps {
        DEGENERATE_COSINE.fetch_add(1, Ordering::Relaxed);
        return T::zero();
    }
    let c = dot(a, b) / (na * nb);
    c.max(-T::one()).min(T::one())
}

/// Cosine similarity and its gradients with respect to both arguments.
fn cosine_with_grad<T: Float>(a: &[T], b: &[T]) -> (T, Vec<T>, Vec<T>) {
    let (na, nb) = (norm(a), norm(b));
    let eps = cast::<T>(COSINE_EPS);
    if na < eps || nb < eps {
        DEGENERATE_COSINE.fetch_add(1, Ordering::Relaxed);
        return (T::zero(), vec![T::zero(); a.len()], vec![T::zero(); b.len()]);
    }
    // gradient as the component of the other unit vector orthogonal to
    // this one, which stays exact when the vectors are (anti)parallel
    let ua: Vec<T> = a.iter().map(|&x| x / na).collect();
    let ub: Vec<T> = b.iter().map(|&y| y / nb).collect();
    let c = dot(&ua, &ub).max(-T::one()).min(T::one());
    let da = ua.iter().zip(&ub).map(|(&x, &y)| (y - c * x) / na).collect();
    let db = ua.iter().zip(&ub).map(|(&x, &y)| (x - c * y) / nb).collect();
    (c, da, db)
}

fn check_tau<T: Float>(tau: T) -> Result<()> {
    if tau > T::zero() && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::Config(format!(
            "temperature must be positive, got {}",
            tau.to_f64().unwrap_or(f64::NAN)
        )))
    }
}

fn log_sum_exp<T: Float>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.iter().fold(T::zero(), |acc, &x| acc + (x - m).exp()).ln()
}

/// `log(1 + e^x)` without overflow; `+inf` maps to itself, `-inf` to 0.
fn softplus<T: Float>(x: T) -> T {
    if x == T::neg_infinity() {
        return T::zero();
    }
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// The contrastive term for one query. An empty positive set contributes 0.
pub fn contrastive_term<T: Float, V: AsRef<[T]>>(q: &[T], pos: &[V], neg: &[V], tau: T) -> Result<T> {
    check_tau(tau)?;
    if pos.is_empty() {
        return Ok(T::zero());
    }
    let s_neg: Vec<T> = neg
        .iter()
        .map(|k| cosine_similarity(q, k.as_ref()) / tau)
        .collect();
    let lse_neg = log_sum_exp(&s_neg);
    let sum = pos.iter().fold(T::zero(), |acc, k| {
        let s = cosine_similarity(q, k.as_ref()) / tau;
        acc + softplus(lse_neg - s)
    });
    Ok(sum / cast(pos.len() as f64))
}

/// Value and gradients of [`contrastive_term`].
#[derive(Debug, Clone)]
pub struct TermGrad<T> {
    pub loss: T,
    pub d_query: Vec<T>,
    pub d_pos: Vec<Vec<T>>,
    pub d_neg: Vec<Vec<T>>,
}

pub fn contrastive_term_grad<T: Float, V: AsRef<[T]>>(
    q: &[T],
    pos: &[V],
    neg: &[V],
    tau: T,
) -> Result<TermGrad<T>> {
    check_tau(tau)?;
    let c = q.len();
    let zeros = |n: usize| vec![vec![T::zero(); c]; n];
    if pos.is_empty() {
        return Ok(TermGrad {
            loss: T::zero(),
            d_query: vec![T::zero(); c],
            d_pos: Vec::new(),
            d_neg: zeros(neg.len()),
        });
    }
    let p = cast::<T>(pos.len() as f64);
    let neg_cos: Vec<_> = neg.iter().map(|k| cosine_with_grad(q, k.as_ref())).collect();
    let s_neg: Vec<T> = neg_cos.iter().map(|(cs, _, _)| *cs / tau).collect();
    let lse_neg = log_sum_exp(&s_neg);

    let mut loss = T::zero();
    let mut d_query = vec![T::zero(); c];
    let mut d_pos = Vec::with_capacity(pos.len());
    // Σ_p exp(LSE⁻ − denominator_p); every negative's gradient is this sum
    // times its softmax weight exp(s_j − LSE⁻)
    let mut pos_factor = T::zero();
    for k in pos {
        let (cs, dq, dk) = cosine_with_grad(q, k.as_ref());
        let s = cs / tau;
        // denominator − s = softplus(LSE⁻ − s)
        let sp = softplus(lse_neg - s);
        loss = loss + sp;
        pos_factor = pos_factor + (lse_neg - s - sp).exp();
        // ∂/∂s of softplus(LSE⁻ − s) = exp(−sp) − 1
        let g = (-sp).exp_m1() / (p * tau);
        for (d, &v) in d_query.iter_mut().zip(&dq) {
            *d = *d + g * v;
        }
        d_pos.push(dk.iter().map(|&v| g * v).collect());
    }
    let mut d_neg = Vec::with_capacity(neg.len());
    for ((_, dq, dk), &s) in neg_cos.iter().zip(&s_neg) {
        let g = (s - lse_neg).exp() * pos_factor / (p * tau);
        for (d, &v) in d_query.iter_mut().zip(dq) {
            *d = *d + g * v;
        }
        d_neg.push(dk.iter().map(|&v| g * v).collect());
    }
    Ok(TermGrad {
        loss: loss / p,
        d_query,
        d_pos,
        d_neg,
    })
}

/// Borrowed view of one proposal's four key sets.
#[derive(Debug, Clone, Copy)]
pub struct FourKeys<'a, T> {
    pub fg_easy: &'a [Vec<T>],
    pub fg_hard: &'a [Vec<T>],
    pub bg_easy: &'a [Vec<T>],
    pub bg_hard: &'a [Vec<T>],
}

impl KeySets {
    pub fn view(&self) -> FourKeys<'_, f32> {
        FourKeys {
            fg_easy: &self.fg_easy.vecs,
            fg_hard: &self.fg_hard.vecs,
            bg_easy: &self.bg_easy.vecs,
            bg_hard: &self.bg_hard.vecs,
        }
    }
}

/// Per-term breakdown of the four-term loss, averaged over proposals.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize, serde::Deserialize)]
pub struct LossBreakdown {
    pub term_fg_easy: f64,
    pub term_fg_hard: f64,
    pub term_bg_easy: f64,
    pub term_bg_hard: f64,
    pub total: f64,
    pub n_proposals: usize,
}

/// A query pair: `(q⁺, q⁻)`.
pub type QueryPair<'a, T> = (&'a [T], &'a [T]);

/// Gradients of the batch loss with respect to every key and query.
#[derive(Debug, Clone)]
pub struct BatchGrad<T> {
    /// Per proposal, in key-set order `[fg_easy, fg_hard, bg_easy, bg_hard]`.
    pub d_keys: Vec<[Vec<Vec<T>>; 4]>,
    /// One entry per supplied query pair.
    pub d_queries: Vec<(Vec<T>, Vec<T>)>,
}

/// Result of evaluating the four-term loss over a batch.
#[derive(Debug, Clone)]
pub struct BatchLoss<T> {
    /// Mean over proposals of each term, in key-set order.
    pub terms: [T; 4],
    pub total: T,
    pub n_proposals: usize,
    pub grad: Option<BatchGrad<T>>,
}

impl<T: Float> BatchLoss<T> {
    pub fn breakdown(&self) -> LossBreakdown {
        let f = |v: T| v.to_f64().unwrap_or(f64::NAN);
        LossBreakdown {
            term_fg_easy: f(self.terms[0]),
            term_fg_hard: f(self.terms[1]),
            term_bg_easy: f(self.terms[2]),
            term_bg_hard: f(self.terms[3]),
            total: f(self.total),
            n_proposals: self.n_proposals,
        }
    }
}

/// Four-term loss averaged over proposals.
///
/// `queries` holds either a single pair shared by every proposal or one pair
/// per proposal. With `want_grad`, gradients for all keys and query pairs are
/// returned as well.
pub fn batch_loss<T: Float>(
    queries: &[QueryPair<'_, T>],
    keys: &[FourKeys<'_, T>],
    tau_easy: T,
    tau_hard: T,
    want_grad: bool,
) -> Result<BatchLoss<T>> {
    check_tau(tau_easy)?;
    check_tau(tau_hard)?;
    if keys.is_empty() {
        return Ok(BatchLoss {
            terms: [T::zero(); 4],
            total: T::zero(),
            n_proposals: 0,
            grad: want_grad.then(|| BatchGrad {
                d_keys: Vec::new(),
                d_queries: queries
                    .iter()
                    .map(|(a, b)| (vec![T::zero(); a.len()], vec![T::zero(); b.len()]))
                    .collect(),
            }),
        });
    }
    if queries.len() != 1 && queries.len() != keys.len() {
        return Err(Error::Shape(format!(
            "{} query pairs for {} proposals",
            queries.len(),
            keys.len()
        )));
    }
    let n = cast::<T>(keys.len() as f64);
    let mut terms = [T::zero(); 4];
    let mut d_keys = Vec::new();
    let mut d_queries: Vec<(Vec<T>, Vec<T>)> = queries
        .iter()
        .map(|(a, b)| (vec![T::zero(); a.len()], vec![T::zero(); b.len()]))
        .collect();

    for (idx, k) in keys.iter().enumerate() {
        let qi = if queries.len() == 1 { 0 } else { idx };
        let (q_fg, q_bg) = queries[qi];
        // (query is fg, positives, negatives, tau, positive slot, negative slot)
        let specs = [
            (true, k.fg_easy, k.bg_easy, tau_easy, 0usize, 2usize),
            (true, k.fg_hard, k.bg_hard, tau_hard, 1, 3),
            (false, k.bg_easy, k.fg_easy, tau_easy, 2, 0),
            (false, k.bg_hard, k.fg_hard, tau_hard, 3, 1),
        ];
        if want_grad {
            let mut dk: [Vec<Vec<T>>; 4] = [
                vec![vec![T::zero(); q_fg.len()]; k.fg_easy.len()],
                vec![vec![T::zero(); q_fg.len()]; k.fg_hard.len()],
                vec![vec![T::zero(); q_fg.len()]; k.bg_easy.len()],
                vec![vec![T::zero(); q_fg.len()]; k.bg_hard.len()],
            ];
            for (t, &(is_fg, pos, neg, tau, ps, ns)) in specs.iter().enumerate() {
                let q = if is_fg { q_fg } else { q_bg };
                let g = contrastive_term_grad(q, pos, neg, tau)?;
                terms[t] = terms[t] + g.loss / n;
                let dq = if is_fg {
                    &mut d_queries[qi].0
                } else {
                    &mut d_queries[qi].1
                };
                for (d, v) in dq.iter_mut().zip(&g.d_query) {
                    *d = *d + *v / n;
                }
                for (dst, src) in dk[ps].iter_mut().zip(&g.d_pos) {
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = *d + *v / n;
                    }
                }
                for (dst, src) in dk[ns].iter_mut().zip(&g.d_neg) {
                    for (d, v) in dst.iter_mut().zip(src) {
                        *d = *d + *v / n;
                    }
                }
            }
            d_keys.push(dk);
        } else {
            for (t, &(is_fg, pos, neg, tau, _, _)) in specs.iter().enumerate() {
                let q = if is_fg { q_fg } else { q_bg };
                terms[t] = terms[t] + contrastive_term(q, pos, neg, tau)? / n;
            }
        }
    }
    let total = terms.iter().fold(T::zero(), |a, &b| a + b);
    Ok(BatchLoss {
        terms,
        total,
        n_proposals: keys.len(),
        grad: want_grad.then_some(BatchGrad { d_keys, d_queries }),
    })
}

/// Four-term loss with queries shared by every proposal in the batch.
pub fn query_sharing_loss(
    queries: &SharedQueries,
    keysets: &[KeySets],
    tau_easy: f64,
    tau_hard: f64,
) -> Result<LossBreakdown> {
    let views: Vec<_> = keysets.iter().map(KeySets::view).collect();
    let q = [(queries.q_fg.as_slice(), queries.q_bg.as_slice())];
    batch_loss(&q, &views, tau_easy as f32, tau_hard as f32, false).map(|l| l.breakdown())
}

/// Direct evaluation of the loss exactly as written, one positive/negative
/// pair at a time, in f64. Shares no code with the vectorized path.
pub mod reference {
    fn cos(a: &[f64], b: &[f64]) -> f64 {
        let mut ab = 0.0;
        let mut aa = 0.0;
        let mut bb = 0.0;
        for i in 0..a.len() {
            ab += a[i] * b[i];
            aa += a[i] * a[i];
            bb += b[i] * b[i];
        }
        if aa.sqrt() < super::COSINE_EPS || bb.sqrt() < super::COSINE_EPS {
            return 0.0;
        }
        ab / (aa.sqrt() * bb.sqrt())
    }

    pub fn contrastive_term(q: &[f64], pos: &[Vec<f64>], neg: &[Vec<f64>], tau: f64) -> f64 {
        if pos.is_empty() {
            return 0.0;
        }
        let mut sum = 0.0;
        for kp in pos {
            let sp = cos(q, kp) / tau;
            let mut denom = sp.exp();
            for kn in neg {
                denom += (cos(q, kn) / tau).exp();
            }
            sum += sp - denom.ln();
        }
        -sum / pos.len() as f64
    }

    /// Four terms per proposal, summed, averaged over proposals.
    pub fn batch_loss(
        queries: &[(Vec<f64>, Vec<f64>)],
        keys: &[[Vec<Vec<f64>>; 4]],
        tau_easy: f64,
        tau_hard: f64,
    ) -> f64 {
        if keys.is_empty() {
            return 0.0;
        }
        let mut total = 0.0;
        for (n, k) in keys.iter().enumerate() {
            let (qf, qb) = if queries.len() == 1 {
                &queries[0]
            } else {
                &queries[n]
            };
            total += contrastive_term(qf, &k[0], &k[2], tau_easy);
            total += contrastive_term(qf, &k[1], &k[3], tau_hard);
            total += contrastive_term(qb, &k[2], &k[0], tau_easy);
            total += contrastive_term(qb, &k[3], &k[1], tau_hard);
        }
        total / keys.len() as f64
    }
}
