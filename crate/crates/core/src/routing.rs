//! Routing kernels: logits, top-k and sampled masks, masked softmax,
//! effective-module reachability and route-balancing temperatures.
//!
//! Modules are indexed from 0 in code. Module `i` may route from any module
//! `j < i`, so its logit, mask and probability vectors have length `i`;
//! module 0 reads the state representation and has none. Every selected edge
//! therefore points from a lower to a higher index and the routing graph is
//! acyclic by construction.

use std::collections::BTreeSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Bound, Matrix, Mlp, NodeId, ParamStore, Tape, TapeError};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum RoutingError {
    #[error("cannot route over an empty logit vector")]
    EmptyLogits,
    #[error("k must be at least 1")]
    ZeroK,
    #[error("routing temperature must be positive and finite, got {0}")]
    BadTemperature(f64),
    #[error("mask selects no source")]
    EmptyMask,
    #[error("logits have {logits} entries but the mask has {mask}")]
    LengthMismatch { logits: usize, mask: usize },
    #[error("SAC temperature of task {task} must be positive and finite, got {alpha}")]
    BadAlpha { task: usize, alpha: f64 },
    #[error("state representation has {state} entries, task representation {task}")]
    ReprMismatch { state: usize, task: usize },
    #[error("malformed routing mask for module {module}: {detail}")]
    MalformedMask { module: usize, detail: String },
    #[error(transparent)]
    Tape(#[from] TapeError),
}

/// Per-module routing logits `z^i`, `i = 1..n` (entry `i − 1` holds module `i`).
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingLogits {
    pub per_module: Vec<Vec<f64>>,
}

impl RoutingLogits {
    pub fn module(&self, i: usize) -> &[f64] {
        &self.per_module[i - 1]
    }

    pub fn n_modules(&self) -> usize {
        self.per_module.len() + 1
    }
}

/// Per-module binary routing paths `d^i`, laid out like [`RoutingLogits`].
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoutingMask {
    pub per_module: Vec<Vec<bool>>,
}

impl RoutingMask {
    /// The fully connected DAG.
    pub fn full(n: usize) -> Self {
        Self {
            per_module: (1..n).map(|i| vec![true; i]).collect(),
        }
    }

    pub fn module(&self, i: usize) -> &[bool] {
        &self.per_module[i - 1]
    }

    pub fn n_modules(&self) -> usize {
        self.per_module.len() + 1
    }

    /// Checks lengths and, when `k` is given, that module `i` selects exactly
    /// `min(k, i)` sources (otherwise at least one).
    pub fn validate(&self, n: usize, k: Option<usize>) -> Result<(), RoutingError> {
        if self.per_module.len() + 1 != n {
            return Err(RoutingError::MalformedMask {
                module: 0,
                detail: format!("{} module masks for {n} modules", self.per_module.len()),
            });
        }
        for (idx, d) in self.per_module.iter().enumerate() {
            let i = idx + 1;
            if d.len() != i {
                return Err(RoutingError::MalformedMask {
                    module: i,
                    detail: format!("length {} instead of {i}", d.len()),
                });
            }
            let selected = d.iter().filter(|&&b| b).count();
            let ok = match k {
                Some(k) => selected == k.min(i),
                None => selected >= 1,
            };
            if !ok {
                return Err(RoutingError::MalformedMask {
                    module: i,
                    detail: format!("{selected} sources selected"),
                });
            }
        }
        Ok(())
    }
}

/// Per-module routing probabilities `p^i`, laid out like [`RoutingLogits`].
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingProbs {
    pub per_module: Vec<Vec<f64>>,
}

impl RoutingProbs {
    pub fn module(&self, i: usize) -> &[f64] {
        &self.per_module[i - 1]
    }
}

/// Per-task sampling temperature `τ_T > 0`.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct RouteTemperature(f64);

impl RouteTemperature {
    pub fn new(tau: f64) -> Result<Self, RoutingError> {
        if tau > 0.0 && tau.is_finite() {
            Ok(Self(tau))
        } else {
            Err(RoutingError::BadTemperature(tau))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for RouteTemperature {
    fn default() -> Self {
        Self(1.0)
    }
}

/// Selects the `min(k, len)` largest entries; ties go to the lower index.
pub fn topk_mask(z: &[f64], k: usize) -> Result<Vec<bool>, RoutingError> {
    if z.is_empty() {
        return Err(RoutingError::EmptyLogits);
    }
    if k == 0 {
        return Err(RoutingError::ZeroK);
    }
    let mut order: Vec<usize> = (0..z.len()).collect();
    // stable sort keeps ascending index order among equal values
    order.sort_by(|&a, &b| z[b].partial_cmp(&z[a]).unwrap_or(std::cmp::Ordering::Equal));
    let mut mask = vec![false; z.len()];
    for &i in order.iter().take(k.min(z.len())) {
        mask[i] = true;
    }
    Ok(mask)
}

/// Draws `min(k, len)` distinct sources without replacement: each draw is a
/// categorical over `softmax(z/τ)` restricted to the sources not yet drawn.
pub fn sample_k_mask<R: Rng + ?Sized>(
    z: &[f64],
    k: usize,
    tau: RouteTemperature,
    rng: &mut R,
) -> Result<Vec<bool>, RoutingError> {
    if z.is_empty() {
        return Err(RoutingError::EmptyLogits);
    }
    if k == 0 {
        return Err(RoutingError::ZeroK);
    }
    let mut mask = vec![false; z.len()];
    if k >= z.len() {
        mask.iter_mut().for_each(|m| *m = true);
        return Ok(mask);
    }
    let scaled: Vec<f64> = z.iter().map(|x| x / tau.get()).collect();
    let mut weights = vec![0.0; z.len()];
    for _ in 0..k {
        let max = scaled
            .iter()
            .zip(&mask)
            .filter(|(_, &taken)| !taken)
            .fold(f64::NEG_INFINITY, |m, (&x, _)| m.max(x));
        let mut total = 0.0;
        for (j, w) in weights.iter_mut().enumerate() {
            *w = if mask[j] { 0.0 } else { (scaled[j] - max).exp() };
            total += *w;
        }
        let u = rng.random::<f64>() * total;
        let mut pick = None;
        let mut cum = 0.0;
        for (j, &w) in weights.iter().enumerate() {
            if mask[j] {
                continue;
            }
            cum += w;
            pick = Some(j);
            if u < cum {
                break;
            }
        }
        // the fallback is the last available index, reached only through rounding
        mask[pick.expect("an undrawn source remains")] = true;
    }
    Ok(mask)
}

/// Softmax over the entries selected by `d`; unselected entries are exactly 0.
pub fn mask_softmax(z: &[f64], d: &[bool]) -> Result<Vec<f64>, RoutingError> {
    if z.len() != d.len() {
        return Err(RoutingError::LengthMismatch {
            logits: z.len(),
            mask: d.len(),
        });
    }
    if !d.iter().any(|&b| b) {
        return Err(RoutingError::EmptyMask);
    }
    let max = z
        .iter()
        .zip(d)
        .filter(|(_, &m)| m)
        .fold(f64::NEG_INFINITY, |a, (&x, _)| a.max(x));
    let mut p: Vec<f64> = z
        .iter()
        .zip(d)
        .map(|(&x, &m)| if m { (x - max).exp() } else { 0.0 })
        .collect();
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    Ok(p)
}

/// Plain softmax over all entries.
pub fn softmax(z: &[f64]) -> Vec<f64> {
    mask_softmax(z, &vec![true; z.len()]).unwrap_or_default()
}

/// Modules backward-reachable from the output module `n − 1` along selected
/// edges, including the output module itself.
pub fn effective_modules(masks: &RoutingMask, n: usize) -> BTreeSet<usize> {
    let mut reached = vec![false; n];
    if n == 0 {
        return BTreeSet::new();
    }
    reached[n - 1] = true;
    // descending order visits every consumer before its sources
    for i in (1..n).rev() {
        if !reached[i] {
            continue;
        }
        if let Some(d) = masks.per_module.get(i - 1) {
            for (j, &sel) in d.iter().enumerate() {
                if sel {
                    reached[j] = true;
                }
            }
        }
    }
    reached.iter().enumerate().filter(|(_, &r)| r).map(|(i, _)| i).collect()
}

/// `τ_T = (1/α_T) / Σ_j (1/α_j)`, i.e. a softmax over `−log α`.
pub fn route_balance_temperatures(alphas: &[f64]) -> Result<Vec<f64>, RoutingError> {
    for (task, &alpha) in alphas.iter().enumerate() {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(RoutingError::BadAlpha { task, alpha });
        }
    }
    let inv: Vec<f64> = alphas.iter().map(|a| 1.0 / a).collect();
    let total: f64 = inv.iter().sum();
    Ok(inv.iter().map(|x| x / total).collect())
}

/// How routing paths are chosen and turned into probabilities.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RoutingFunction {
    /// Deterministic top-k in every phase.
    Topk,
    /// Sampled without replacement while collecting data, top-k otherwise.
    #[default]
    Samplek,
    /// Single source; the selected probability keeps its unnormalised softmax
    /// value so the router still receives gradient.
    Hard,
    /// Every preceding module is a source.
    Soft,
}

impl RoutingFunction {
    /// Number of sources per module, `None` meaning all.
    pub fn sources(self, k: usize) -> Option<usize> {
        match self {
            RoutingFunction::Topk | RoutingFunction::Samplek => Some(k),
            RoutingFunction::Hard => Some(1),
            RoutingFunction::Soft => None,
        }
    }

    /// Chooses a mask for one module. `explore` selects the data-collection
    /// behaviour (sampling for `Samplek` and `Hard`).
    pub fn select<R: Rng + ?Sized>(
        self,
        z: &[f64],
        k: usize,
        tau: RouteTemperature,
        explore: bool,
        rng: &mut R,
    ) -> Result<Vec<bool>, RoutingError> {
        match self {
            RoutingFunction::Soft => {
                if z.is_empty() {
                    Err(RoutingError::EmptyLogits)
                } else {
                    Ok(vec![true; z.len()])
                }
            }
            RoutingFunction::Topk => topk_mask(z, k),
            RoutingFunction::Samplek | RoutingFunction::Hard => {
                let k = self.sources(k).unwrap_or(k);
                if explore {
                    sample_k_mask(z, k, tau, rng)
                } else {
                    topk_mask(z, k)
                }
            }
        }
    }

    /// Selects a mask for every module.
    pub fn select_all<R: Rng + ?Sized>(
        self,
        logits: &RoutingLogits,
        k: usize,
        tau: RouteTemperature,
        explore: bool,
        rng: &mut R,
    ) -> Result<RoutingMask, RoutingError> {
        let per_module = logits
            .per_module
            .iter()
            .map(|z| self.select(z, k, tau, explore, rng))
            .collect::<Result<_, _>>()?;
        Ok(RoutingMask { per_module })
    }

    /// Routing probabilities for one module under this function.
    pub fn probs(self, z: &[f64], d: &[bool]) -> Result<Vec<f64>, RoutingError> {
        match self {
            RoutingFunction::Hard => {
                if z.len() != d.len() {
                    return Err(RoutingError::LengthMismatch {
                        logits: z.len(),
                        mask: d.len(),
                    });
                }
                if !d.iter().any(|&b| b) {
                    return Err(RoutingError::EmptyMask);
                }
                Ok(softmax(z)
                    .into_iter()
                    .zip(d)
                    .map(|(p, &m)| if m { p } else { 0.0 })
                    .collect())
            }
            _ => mask_softmax(z, d),
        }
    }

    /// Records the probabilities of a batch on a tape. `mask` is row-major
    /// `batch × z.cols`.
    pub fn probs_on_tape(self, tape: &mut Tape<'_>, z: NodeId, mask: Vec<bool>) -> Result<NodeId, TapeError> {
        match self {
            RoutingFunction::Hard => {
                let (r, c) = tape.shape(z);
                let sm = tape.softmax(z)?;
                let keep = tape.constant(Matrix::from_vec(
                    r,
                    c,
                    mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect(),
                ));
                tape.mul(sm, keep)
            }
            _ => tape.mask_softmax(z, mask),
        }
    }
}

/// The routing sub-networks `G^1..G^{n−1}`, one independent MLP per module
/// with preceding sources, each mapping the routing input to `i` logits.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingNetwork {
    pub routers: Vec<Mlp>,
}

impl RoutingNetwork {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        input_dim: usize,
        hidden: &[usize],
        n_modules: usize,
        rng: &mut R,
    ) -> Self {
        let routers = (1..n_modules)
            .map(|i| {
                let mut sizes = vec![input_dim];
                sizes.extend_from_slice(hidden);
                sizes.push(i);
                Mlp::new(store, &format!("router{i}"), &sizes, false, rng)
            })
            .collect();
        Self { routers }
    }

    /// One logit node per module `1..n`, each `batch × i`.
    pub fn logits_on_tape(&self, tape: &mut Tape<'_>, bound: &Bound, input: NodeId) -> Result<Vec<NodeId>, TapeError> {
        self.routers.iter().map(|g| g.forward(tape, bound, input)).collect()
    }
}

/// `z^i = G^i(F(s) ⊙ H(T))` for a single state.
pub fn route_logits(
    state_repr: &[f64],
    task_repr: &[f64],
    network: &RoutingNetwork,
    store: &ParamStore,
) -> Result<RoutingLogits, RoutingError> {
    if state_repr.len() != task_repr.len() {
        return Err(RoutingError::ReprMismatch {
            state: state_repr.len(),
            task: task_repr.len(),
        });
    }
    let input: Vec<f64> = state_repr.iter().zip(task_repr).map(|(a, b)| a * b).collect();
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape, false);
    let x = tape.constant(Matrix::row_vector(&input));
    let nodes = network.logits_on_tape(&mut tape, &bound, x)?;
    Ok(RoutingLogits {
        per_module: nodes.iter().map(|&z| tape.value(z).data().to_vec()).collect(),
    })
}
