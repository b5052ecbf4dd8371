use crate::error::{domain, GoatError, Result};
use crate::moe::router::{softmax, RouteResult};

/// Load fractions `f_i = (E / (k·T)) · #{t : i ∈ Ω_k(x_t)}`.
///
/// Each `f_i` equals 1 under perfectly even assignment.
pub fn load_fractions(routes: &[RouteResult], experts: usize, k: usize) -> Result<Vec<f64>> {
    if routes.is_empty() {
        return domain("load fractions need at least one routed token");
    }
    let mut counts = vec![0usize; experts];
    for r in routes {
        if r.experts() != experts {
            return domain(format!(
                "route over {} experts, expected {experts}",
                r.experts()
            ));
        }
        for &i in &r.indices {
            counts[i] += 1;
        }
    }
    let norm = experts as f64 / (k as f64 * routes.len() as f64);
    Ok(counts.into_iter().map(|c| c as f64 * norm).collect())
}

/// Mean full-softmax router probability per expert, `P_i`.
pub fn mean_probabilities(logits: &[Vec<f64>], experts: usize) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return domain("router probabilities need at least one token");
    }
    let mut p = vec![0.0; experts];
    for z in logits {
        if z.len() != experts {
            return domain(format!(
                "logit vector of length {}, expected {experts}",
                z.len()
            ));
        }
        for (acc, v) in p.iter_mut().zip(softmax(z)) {
            *acc += v;
        }
    }
    let t = logits.len() as f64;
    p.iter_mut().for_each(|v| *v /= t);
    Ok(p)
}

/// `L_b = Σ_i f_i · P_i` over a token history.
pub fn balance_loss(
    routes: &[RouteResult],
    logits: &[Vec<f64>],
    experts: usize,
    k: usize,
) -> Result<f64> {
    if routes.len() != logits.len() {
        return Err(GoatError::Contract(format!(
            "{} routes but {} logit vectors",
            routes.len(),
            logits.len()
        )));
    }
    let f = load_fractions(routes, experts, k)?;
    let p = mean_probabilities(logits, experts)?;
    Ok(f.iter().zip(&p).map(|(a, b)| a * b).sum())
}

/// Fixed assignment counts used to differentiate `L_b` through `P_i` only.
#[derive(Clone, Debug, PartialEq)]
pub struct BalanceContext {
    pub fractions: Vec<f64>,
    pub tokens: usize,
}

impl BalanceContext {
    pub fn from_routes(routes: &[RouteResult], experts: usize, k: usize) -> Result<Self> {
        Ok(Self {
            fractions: load_fractions(routes, experts, k)?,
            tokens: routes.len(),
        })
    }

    /// Context of a single token.
    pub fn single(route: &RouteResult, k: usize) -> Self {
        let e = route.experts();
        let mut fractions = vec![0.0; e];
        for &i in &route.indices {
            fractions[i] = e as f64 / k as f64;
        }
        Self {
            fractions,
            tokens: 1,
        }
    }

    /// `∂L_b/∂z_j` for one token's logits:
    /// `(1/T) · p_j · (f_j − Σ_i f_i p_i)`.
    pub fn logit_grad(&self, logits: &[f64]) -> Vec<f64> {
        let p = softmax(logits);
        let mean_f: f64 = self.fractions.iter().zip(&p).map(|(f, q)| f * q).sum();
        let t = self.tokens as f64;
        p.iter()
            .zip(&self.fractions)
            .map(|(q, f)| q * (f - mean_f) / t)
            .collect()
    }

    /// This token's share of `L_b`: `(1/T) Σ_i f_i p_i`.
    pub fn token_loss(&self, logits: &[f64]) -> f64 {
        let p = softmax(logits);
        self.fractions
            .iter()
            .zip(&p)
            .map(|(f, q)| f * q)
            .sum::<f64>()
            / self.tokens as f64
    }
}
