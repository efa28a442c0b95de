//! Purchase-intention codebook and reward-based competitive learning.
//!
//! Each query and product picks its nearest intent vector. A pair that
//! picks the same vector is rewarded (both are pulled toward it); a pair
//! that disagrees is penalized (both are pushed away from their picks).
//! The pull/push strength is the "remaining probability" derived from the
//! Bernoulli-style selection probability `p = 2 (1 - sigmoid(distance))`.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::Rng as _;

use crate::diff::{self, Tape, Tensor, Var};
use crate::rng::{self, Rng};
use crate::{Error, ProductId, Result};

/// Mismatch repulsion is switched off beyond this distance (diameter of the unit ball).
pub const REPULSION_CLAMP: f64 = 2.0;

#[derive(Debug, Clone, PartialEq)]
pub struct IntentCodebook {
    vectors: Tensor,
    steps: u64,
}

/// Result of routing a vector to its nearest intent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntentSelection {
    pub index: usize,
    pub distance: f64,
    pub probability: f64,
}

/// `p = 2 (1 - 1 / (1 + e^{-distance}))`, in `(0, 1]` and strictly decreasing.
pub fn selection_probability(distance: f64) -> Result<f64> {
    if !(distance >= 0.0) {
        return Err(Error::Contract(alloc::format!(
            "selection distance must be non-negative, got {distance}"
        )));
    }
    // 2 (1 - σ(d)) = 2 σ(-d), which stays positive for large d
    Ok(2.0 * diff::sigmoid(-distance))
}

/// Reward `r` and the per-side remaining probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardOutcome {
    pub reward: i8,
    pub remaining_x: f64,
    pub remaining_y: f64,
}

impl RewardOutcome {
    pub fn matched(&self) -> bool {
        self.reward > 0
    }
}

pub fn reward_and_remaining(x: &IntentSelection, y: &IntentSelection) -> RewardOutcome {
    if x.index == y.index {
        RewardOutcome {
            reward: 1,
            remaining_x: 1.0 - x.probability,
            remaining_y: 1.0 - y.probability,
        }
    } else {
        RewardOutcome {
            reward: -1,
            remaining_x: -x.probability,
            remaining_y: -y.probability,
        }
    }
}

/// Coefficient multiplying `‖v - s‖` in the loss for one side of a pair.
fn coefficient(outcome: &RewardOutcome, remaining: f64, distance: f64, literal: bool) -> f64 {
    if literal {
        return f64::from(outcome.reward) * remaining;
    }
    if !outcome.matched() && distance >= REPULSION_CLAMP {
        return 0.0;
    }
    remaining
}

impl IntentCodebook {
    /// `k` vectors with components drawn uniformly from `[-1, 1]`, each scaled to unit length.
    pub fn init_uniform(k: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut rng = rng::derive(seed, rng::stream::CODEBOOK);
        let mut vectors = Self::sample_components(k, dim, &mut rng)?;
        for i in 0..k {
            diff::normalize(vectors.row_mut(i));
        }
        Self::from_tensor(vectors)
    }

    pub(crate) fn sample_components(k: usize, dim: usize, rng: &mut Rng) -> Result<Tensor> {
        if k < 2 {
            return Err(Error::Config(alloc::format!("codebook needs at least 2 intents, got {k}")));
        }
        if dim == 0 {
            return Err(Error::Config("codebook dimension must be positive".into()));
        }
        let data = (0..k * dim).map(|_| rng.random_range(-1.0..=1.0)).collect();
        Tensor::new(k, dim, data)
    }

    pub fn from_tensor(vectors: Tensor) -> Result<Self> {
        if vectors.rows() < 2 {
            return Err(Error::Config("codebook needs at least 2 intents".into()));
        }
        Ok(Self { vectors, steps: 0 })
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.steps = steps;
        self
    }

    pub fn k(&self) -> usize {
        self.vectors.rows()
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        self.vectors.row(i)
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    /// Nearest intent by Euclidean distance; ties go to the lowest index.
    pub fn nearest(&self, v: &[f64]) -> Result<IntentSelection> {
        nearest_in(&self.vectors, v)
    }

    /// Partitions the catalog by nearest intent.
    pub fn assign_clusters<'a, I>(&self, catalog: I) -> Result<ClusterMap>
    where
        I: IntoIterator<Item = (ProductId, &'a [f64])>,
    {
        let mut members: Vec<Vec<ProductId>> = (0..self.k()).map(|_| Vec::new()).collect();
        let mut assignment = BTreeMap::new();
        for (id, v) in catalog {
            let sel = self.nearest(v)?;
            if assignment.insert(id, sel.index).is_some() {
                return Err(Error::Data(alloc::format!("duplicate product id {id} in catalog")));
            }
            members[sel.index].push(id);
        }
        members.iter_mut().for_each(|m| m.sort_unstable());
        Ok(ClusterMap { members, assignment })
    }
}

pub(crate) fn nearest_in(vectors: &Tensor, v: &[f64]) -> Result<IntentSelection> {
    if v.len() != vectors.cols() {
        return Err(Error::dim("intent selection", vectors.cols(), v.len()));
    }
    let mut best = (0, f64::INFINITY);
    for (i, s) in vectors.iter_rows().enumerate() {
        let d = diff::l2_distance(v, s);
        if d < best.1 {
            best = (i, d);
        }
    }
    Ok(IntentSelection {
        index: best.0,
        distance: best.1,
        probability: selection_probability(best.1)?,
    })
}

/// Products grouped by nearest intent; a total, disjoint partition.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClusterMap {
    members: Vec<Vec<ProductId>>,
    assignment: BTreeMap<ProductId, usize>,
}

impl ClusterMap {
    pub fn k(&self) -> usize {
        self.members.len()
    }

    pub fn members(&self, intent: usize) -> &[ProductId] {
        &self.members[intent]
    }

    pub fn cluster_of(&self, id: ProductId) -> Option<usize> {
        self.assignment.get(&id).copied()
    }

    pub fn len(&self) -> usize {
        self.assignment.len()
    }

    pub fn is_empty(&self) -> bool {
        self.assignment.is_empty()
    }

    pub fn product_ids(&self) -> impl Iterator<Item = ProductId> + '_ {
        self.assignment.keys().copied()
    }

    /// Non-empty clusters as an `intent → members` map.
    pub fn to_map(&self) -> BTreeMap<usize, Vec<ProductId>> {
        self.members
            .iter()
            .enumerate()
            .filter(|(_, m)| !m.is_empty())
            .map(|(k, m)| (k, m.clone()))
            .collect()
    }
}

/// Per-pair bookkeeping of one competitive-learning evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairRouting {
    pub x: IntentSelection,
    pub y: IntentSelection,
    pub outcome: RewardOutcome,
    pub coeff_x: f64,
    pub coeff_y: f64,
}

#[derive(Debug, Clone)]
pub struct RclOutput {
    /// Batch-mean loss (scalar).
    pub loss: Var,
    pub routing: Vec<PairRouting>,
}

impl RclOutput {
    pub fn matches(&self) -> usize {
        self.routing.iter().filter(|r| r.outcome.matched()).count()
    }
}

/// Competitive-learning loss over a batch.
///
/// `x` and `y` are `B × 2d` (queries, products) and `codebook` is `K × 2d`.
/// For each pair the loss is `0.5 (c_x ‖x - s_kx‖ + c_y ‖y - s_ky‖)` with the
/// routing treated as constant; the result is averaged over the batch.
/// By default `c = rp` (attract on a match, repel on a mismatch); with
/// `literal` the coefficient is `r * rp`.
pub fn rcl_loss(tape: &mut Tape, x: Var, y: Var, codebook: Var, literal: bool) -> Result<RclOutput> {
    let (xs, ys, s) = (tape.value(x), tape.value(y), tape.value(codebook));
    if xs.shape() != ys.shape() {
        return Err(Error::dim("rcl pair batch", xs.rows(), ys.rows()));
    }
    if xs.cols() != s.cols() {
        return Err(Error::dim("rcl codebook width", s.cols(), xs.cols()));
    }
    let b = xs.rows();
    let mut routing = Vec::with_capacity(b);
    for n in 0..b {
        let sx = nearest_in(s, xs.row(n))?;
        let sy = nearest_in(s, ys.row(n))?;
        let outcome = reward_and_remaining(&sx, &sy);
        routing.push(PairRouting {
            x: sx,
            y: sy,
            outcome,
            coeff_x: coefficient(&outcome, outcome.remaining_x, sx.distance, literal),
            coeff_y: coefficient(&outcome, outcome.remaining_y, sy.distance, literal),
        });
    }
    let loss = rcl_loss_routed(tape, x, y, codebook, &routing)?;
    Ok(RclOutput { loss, routing })
}

/// The competitive-learning loss with routing and coefficients held fixed.
///
/// Gradients of [`rcl_loss`] treat the selections and `rp` coefficients as
/// constants; this evaluates the same surrogate for an explicit routing.
pub fn rcl_loss_routed(tape: &mut Tape, x: Var, y: Var, codebook: Var, routing: &[PairRouting]) -> Result<Var> {
    let b = tape.value(x).rows();
    if routing.len() != b || tape.value(y).rows() != b {
        return Err(Error::dim("rcl routing", b, routing.len()));
    }
    let kx: Vec<usize> = routing.iter().map(|r| r.x.index).collect();
    let ky: Vec<usize> = routing.iter().map(|r| r.y.index).collect();
    let cx: Vec<f64> = routing.iter().map(|r| r.coeff_x).collect();
    let cy: Vec<f64> = routing.iter().map(|r| r.coeff_y).collect();

    let sel_x = tape.select_rows(codebook, &kx)?;
    let sel_y = tape.select_rows(codebook, &ky)?;
    let dx = tape.sub(x, sel_x)?;
    let dy = tape.sub(y, sel_y)?;
    let nx = tape.row_norms(dx);
    let ny = tape.row_norms(dy);
    let wx = tape.scale_rows(nx, &cx)?;
    let wy = tape.scale_rows(ny, &cy)?;
    let both = tape.add(wx, wy)?;
    let total = tape.sum(both);
    let loss = tape.scale(total, 0.5 / b as f64);
    Ok(loss)
}
