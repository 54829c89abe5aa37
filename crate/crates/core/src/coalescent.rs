//! Kingman coalescent trees, the look-down construction and the total
//! coalescence time of the infinite coalescent.
//!
//! Every sampler takes an explicit `pair_rate`: the rate at which any given
//! unordered pair of lineages merges.

use std::collections::HashMap;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{require, Error, Result};

/// One merge event. Nodes `0..N` are leaves; merge `k` creates node `N + k`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Merge {
    pub time: f64,
    pub left: usize,
    pub right: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoalescentTree {
    leaf_count: usize,
    merges: Vec<Merge>,
}

#[derive(Serialize, Deserialize)]
struct MergeRecord {
    time: f64,
    block_a_leaves: Vec<usize>,
    block_b_leaves: Vec<usize>,
}

impl CoalescentTree {
    /// Validates node references, strictly increasing times and that a
    /// single block remains.
    pub fn from_merges(leaf_count: usize, merges: Vec<Merge>) -> Result<Self> {
        require(leaf_count >= 1, || "tree needs at least one leaf".into())?;
        require(merges.len() + 1 == leaf_count, || {
            format!("{} leaves need {} merges, got {}", leaf_count, leaf_count - 1, merges.len())
        })?;
        let mut used = vec![false; 2 * leaf_count - 1];
        let mut last = 0.0_f64;
        for (k, m) in merges.iter().enumerate() {
            let created = leaf_count + k;
            for &c in &[m.left, m.right] {
                require(c < created && !used[c], || {
                    format!("merge {k} references unavailable node {c}")
                })?;
                used[c] = true;
            }
            require(m.left != m.right, || format!("merge {k} joins a node with itself"))?;
            require(m.time.is_finite() && m.time > last, || {
                format!("merge times must be positive and strictly increasing (merge {k})")
            })?;
            last = m.time;
        }
        Ok(Self { leaf_count, merges })
    }

    pub fn leaf_count(&self) -> usize {
        self.leaf_count
    }

    pub fn merges(&self) -> &[Merge] {
        &self.merges
    }

    /// Time of the last merge.
    pub fn height(&self) -> f64 {
        self.merges.last().map_or(0.0, |m| m.time)
    }

    pub fn node_count(&self) -> usize {
        self.leaf_count + self.merges.len()
    }

    /// Creation time of a node (0 for leaves).
    pub fn node_time(&self, node: usize) -> f64 {
        if node < self.leaf_count {
            0.0
        } else {
            self.merges[node - self.leaf_count].time
        }
    }

    /// Parent of every node, `None` for the root.
    pub fn parents(&self) -> Vec<Option<usize>> {
        let mut p = vec![None; self.node_count()];
        for (k, m) in self.merges.iter().enumerate() {
            p[m.left] = Some(self.leaf_count + k);
            p[m.right] = Some(self.leaf_count + k);
        }
        p
    }

    /// Number of blocks present at backward time `t`.
    pub fn lineages_at(&self, t: f64) -> usize {
        self.leaf_count - self.merges.iter().take_while(|m| m.time <= t).count()
    }

    /// Leaves below every node.
    pub fn leaf_sets(&self) -> Vec<Vec<usize>> {
        let mut sets: Vec<Vec<usize>> = (0..self.leaf_count).map(|i| vec![i]).collect();
        for m in &self.merges {
            let mut s = sets[m.left].clone();
            s.extend_from_slice(&sets[m.right]);
            s.sort_unstable();
            sets.push(s);
        }
        sets
    }

    /// `T_ij`: time at which leaves `i` and `j` first share a block.
    pub fn pairwise_times(&self) -> DMatrix<f64> {
        let n = self.leaf_count;
        let mut t = DMatrix::zeros(n, n);
        let mut sets: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
        for m in &self.merges {
            for &a in &sets[m.left] {
                for &b in &sets[m.right] {
                    t[(a, b)] = m.time;
                    t[(b, a)] = m.time;
                }
            }
            let mut s = std::mem::take(&mut sets[m.left]);
            s.extend(std::mem::take(&mut sets[m.right]));
            sets.push(s);
        }
        t
    }

    /// `T_ij` for a single pair, without building the matrix.
    pub fn pairwise_time(&self, i: usize, j: usize) -> f64 {
        if i == j {
            return 0.0;
        }
        let (mut a, mut b) = (i, j);
        for (k, m) in self.merges.iter().enumerate() {
            let node = self.leaf_count + k;
            let ha = m.left == a || m.right == a;
            let hb = m.left == b || m.right == b;
            if ha && hb {
                return m.time;
            }
            if ha {
                a = node;
            }
            if hb {
                b = node;
            }
        }
        f64::INFINITY
    }

    /// Genealogy of a subset of leaves, renumbered in the given order.
    pub fn restrict(&self, leaves: &[usize]) -> Result<Self> {
        let mut map: Vec<Option<usize>> = vec![None; self.node_count()];
        for (k, &l) in leaves.iter().enumerate() {
            require(l < self.leaf_count && map[l].is_none(), || {
                format!("bad or repeated leaf {l}")
            })?;
            map[l] = Some(k);
        }
        let m_new = leaves.len();
        let mut merges = Vec::new();
        for (k, m) in self.merges.iter().enumerate() {
            let node = self.leaf_count + k;
            map[node] = match (map[m.left], map[m.right]) {
                (Some(a), Some(b)) => {
                    merges.push(Merge { time: m.time, left: a, right: b });
                    Some(m_new + merges.len() - 1)
                }
                (Some(a), None) | (None, Some(a)) => Some(a),
                (None, None) => None,
            };
        }
        Self::from_merges(m_new, merges)
    }

    /// JSON list of `{time, block_a_leaves, block_b_leaves}` (0-based leaves).
    pub fn to_json(&self) -> Result<String> {
        let sets = self.leaf_sets();
        let recs: Vec<MergeRecord> = self
            .merges
            .iter()
            .map(|m| MergeRecord {
                time: m.time,
                block_a_leaves: sets[m.left].clone(),
                block_b_leaves: sets[m.right].clone(),
            })
            .collect();
        Ok(serde_json::to_string_pretty(&recs)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let recs: Vec<MergeRecord> = serde_json::from_str(s)?;
        let n = recs.len() + 1;
        let mut ids: HashMap<Vec<usize>, usize> = (0..n).map(|i| (vec![i], i)).collect();
        let mut merges = Vec::with_capacity(recs.len());
        for (k, r) in recs.into_iter().enumerate() {
            let mut a = r.block_a_leaves;
            let mut b = r.block_b_leaves;
            a.sort_unstable();
            b.sort_unstable();
            let left = *ids
                .get(&a)
                .ok_or_else(|| Error::Parse(format!("unknown block {a:?} in merge {k}")))?;
            let right = *ids
                .get(&b)
                .ok_or_else(|| Error::Parse(format!("unknown block {b:?} in merge {k}")))?;
            let mut u = a;
            u.extend(b);
            u.sort_unstable();
            ids.insert(u, n + k);
            merges.push(Merge { time: r.time, left, right });
        }
        Self::from_merges(n, merges)
    }
}

fn check_rate(pair_rate: f64) -> Result<()> {
    require(pair_rate > 0.0 && pair_rate.is_finite(), || {
        format!("pair_rate must be positive, got {pair_rate}")
    })
}

/// Exponential-clock construction: with `k` blocks wait
/// `Exp(pair_rate·k(k−1)/2)` and merge a uniform unordered pair.
pub fn sample_kingman<R: Rng + ?Sized>(n: usize, pair_rate: f64, rng: &mut R) -> Result<CoalescentTree> {
    require(n >= 2, || format!("need at least 2 leaves, got {n}"))?;
    check_rate(pair_rate)?;
    Ok(kingman_unchecked(n, pair_rate, rng))
}

pub(crate) fn kingman_unchecked<R: Rng + ?Sized>(n: usize, pair_rate: f64, rng: &mut R) -> CoalescentTree {
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);
    let mut t = 0.0;
    for k in (2..=n).rev() {
        let rate = pair_rate * (k * (k - 1)) as f64 / 2.0;
        t += rng.sample::<f64, _>(Exp1) / rate;
        let i = rng.random_range(0..k);
        let mut j = rng.random_range(0..k - 1);
        if j >= i {
            j += 1;
        }
        let (a, b) = (active[i], active[j]);
        let (hi, lo) = if i > j { (i, j) } else { (j, i) };
        active.swap_remove(hi);
        active.swap_remove(lo);
        merges.push(Merge { time: t, left: a, right: b });
        active.push(n + merges.len() - 1);
    }
    CoalescentTree { leaf_count: n, merges }
}

/// Truncation level used by [`sample_tcoal_infinity`].
pub fn tcoal_truncation(pair_rate: f64, tolerance: f64) -> usize {
    ((2.0 / (pair_rate * tolerance)).ceil() as usize).max(2)
}

/// Total coalescence time of the infinite coalescent: exact exponential
/// stages `k = 2..=K` plus the mean `2/(pair_rate·K)` of the remaining stages.
///
/// The mean is exact; the replaced tail has variance below `4/(3 pair_rate² K³)`.
pub fn sample_tcoal_infinity<R: Rng + ?Sized>(pair_rate: f64, tolerance: f64, rng: &mut R) -> Result<f64> {
    check_rate(pair_rate)?;
    require(tolerance > 0.0, || format!("tolerance must be positive, got {tolerance}"))?;
    let big_k = tcoal_truncation(pair_rate, tolerance);
    let mut t = 2.0 / (pair_rate * big_k as f64);
    for k in 2..=big_k {
        t += rng.sample::<f64, _>(Exp1) / (pair_rate * (k * (k - 1)) as f64 / 2.0);
    }
    Ok(t)
}

/// A look-down arrow: the individual at level `parent` puts a child at
/// level `child > parent`. Levels are 0-based.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Arrow {
    pub time: f64,
    pub parent: usize,
    pub child: usize,
}

/// Poisson arrows between the first `level_count` levels on `[0, horizon]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LookdownTrajectory {
    level_count: usize,
    horizon: f64,
    arrows: Vec<Arrow>,
}

impl LookdownTrajectory {
    pub fn sample<R: Rng + ?Sized>(level_count: usize, gamma: f64, horizon: f64, rng: &mut R) -> Result<Self> {
        require(level_count >= 1, || "need at least one level".into())?;
        check_rate(gamma)?;
        require(horizon > 0.0, || format!("horizon must be positive, got {horizon}"))?;
        let mut traj = Self { level_count, horizon: 0.0, arrows: Vec::new() };
        traj.extend(gamma, horizon, rng);
        Ok(traj)
    }

    /// Adds independent arrows on `(horizon, new_horizon]`.
    pub fn extend<R: Rng + ?Sized>(&mut self, gamma: f64, new_horizon: f64, rng: &mut R) {
        let start = self.horizon;
        let mut fresh = Vec::new();
        for j in 1..self.level_count {
            for i in 0..j {
                let mut t = start;
                loop {
                    t += rng.sample::<f64, _>(Exp1) / gamma;
                    if t > new_horizon {
                        break;
                    }
                    fresh.push(Arrow { time: t, parent: i, child: j });
                }
            }
        }
        fresh.sort_by(|a, b| a.time.total_cmp(&b.time));
        self.arrows.extend(fresh);
        self.horizon = new_horizon;
    }

    pub fn from_arrows(level_count: usize, horizon: f64, mut arrows: Vec<Arrow>) -> Result<Self> {
        for a in &arrows {
            require(a.parent < a.child && a.child < level_count, || {
                format!("arrow {a:?} must satisfy parent < child < {level_count}")
            })?;
            require((0.0..=horizon).contains(&a.time), || {
                format!("arrow time {} outside [0, {horizon}]", a.time)
            })?;
        }
        arrows.sort_by(|a, b| a.time.total_cmp(&b.time));
        Ok(Self { level_count, horizon, arrows })
    }

    pub fn level_count(&self) -> usize {
        self.level_count
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn arrows(&self) -> &[Arrow] {
        &self.arrows
    }

    /// Sorted event times of the pair `(parent, child)`.
    pub fn events(&self, parent: usize, child: usize) -> Vec<f64> {
        self.arrows
            .iter()
            .filter(|a| a.parent == parent && a.child == child)
            .map(|a| a.time)
            .collect()
    }

    /// Genealogy of the levels at time 0, traced backwards through the
    /// arrows. When an arrow from `i` to `j` is met with `j` occupied, the
    /// lineage at `j` joins the one at `i` and lineages above `j` move down
    /// one level. Returns `None` if more than one lineage survives.
    pub fn genealogy(&self) -> Option<CoalescentTree> {
        let n = self.level_count;
        let mut levels: Vec<usize> = (0..n).collect();
        let mut merges = Vec::with_capacity(n.saturating_sub(1));
        for a in &self.arrows {
            if levels.len() == 1 {
                break;
            }
            if a.child < levels.len() {
                merges.push(Merge { time: a.time, left: levels[a.parent], right: levels[a.child] });
                levels[a.parent] = n + merges.len() - 1;
                levels.remove(a.child);
            }
        }
        (levels.len() == 1).then_some(CoalescentTree { leaf_count: n, merges })
    }
}

/// Maximum number of horizon doublings in [`sample_lookdown_genealogy`].
pub const LOOKDOWN_MAX_EXTENSIONS: usize = 30;

/// Look-down genealogy of `n` levels; the arrow horizon is doubled (with
/// fresh arrows on the added interval) until full coalescence.
pub fn sample_lookdown_genealogy<R: Rng + ?Sized>(
    n: usize,
    gamma: f64,
    horizon: f64,
    rng: &mut R,
) -> Result<CoalescentTree> {
    require(n >= 2, || format!("need at least 2 levels, got {n}"))?;
    let mut traj = LookdownTrajectory::sample(n, gamma, horizon, rng)?;
    for _ in 0..=LOOKDOWN_MAX_EXTENSIONS {
        if let Some(tree) = traj.genealogy() {
            return Ok(tree);
        }
        let h = traj.horizon * 2.0;
        traj.extend(gamma, h, rng);
    }
    Err(Error::NoCoalescence(LOOKDOWN_MAX_EXTENSIONS))
}
