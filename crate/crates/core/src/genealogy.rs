//! Exact backward-in-time samplers built on Kingman genealogies with
//! Brownian displacements along the branches.
//!
//! A leaf value is the position of its ancestor at backward time `T` plus
//! the Brownian increments accumulated on the path from that ancestor.
//! Ancestor positions are drawn without replacement from the initial atoms.

use nalgebra::DMatrix;
use rand::seq::index;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::coalescent::{kingman_unchecked, CoalescentTree};
use crate::error::{require, Error, Result};
use crate::measure::{center_atoms, recenter, CenteredMeasure, EmpiricalMeasure};
use crate::stats::{compensated_sum, CompensatedSum};

#[derive(Clone, Debug)]
pub struct GenealogicalSample {
    /// Full genealogy; merges later than `horizon` are not used.
    pub tree: CoalescentTree,
    pub horizon: f64,
    /// Number of ancestral lineages at backward time `horizon`.
    pub lineages: usize,
    pub leaf_values: Vec<f64>,
}

impl GenealogicalSample {
    pub fn coalesced(&self) -> bool {
        self.lineages == 1
    }

    pub fn measure(&self) -> EmpiricalMeasure {
        EmpiricalMeasure::new(self.leaf_values.clone()).expect("finite leaf values")
    }

    pub fn centered(&self) -> CenteredMeasure {
        recenter(&self.measure())
    }
}

/// Brownian displacements on a tree cut at `horizon`.
struct Displacements {
    /// Per node, relative to the ancestor position at `horizon`.
    value: Vec<f64>,
    /// Root (node alive at `horizon`) above each node.
    root: Vec<usize>,
    /// Roots in the order they were visited.
    roots: Vec<usize>,
}

/// Walks the kept part of the tree top-down, one normal draw per node.
fn displace<R: Rng + ?Sized>(tree: &CoalescentTree, horizon: f64, rng: &mut R) -> Displacements {
    let n = tree.leaf_count();
    let kept = tree.merges().iter().take_while(|m| m.time <= horizon).count();
    let nodes = n + kept;
    let mut parent = vec![usize::MAX; nodes];
    for (k, m) in tree.merges()[..kept].iter().enumerate() {
        parent[m.left] = n + k;
        parent[m.right] = n + k;
    }
    let mut value = vec![0.0; nodes];
    let mut root = vec![0; nodes];
    let mut roots = Vec::new();
    for id in (0..nodes).rev() {
        let t = tree.node_time(id);
        let z: f64 = rng.sample(StandardNormal);
        let p = parent[id];
        if p == usize::MAX {
            value[id] = (horizon - t).sqrt() * z;
            root[id] = id;
            roots.push(id);
        } else {
            value[id] = value[p] + (tree.node_time(p) - t).sqrt() * z;
            root[id] = root[p];
        }
    }
    Displacements { value, root, roots }
}

/// Leaf displacements for a fixed tree; every lineage alive at `horizon`
/// starts from 0. With `horizon = height` this is the conditional law
/// `Cov(u_i, u_j) = height − T_ij`.
pub fn leaf_displacements<R: Rng + ?Sized>(tree: &CoalescentTree, horizon: f64, rng: &mut R) -> Vec<f64> {
    let d = displace(tree, horizon, rng);
    d.value[..tree.leaf_count()].to_vec()
}

fn check_horizon(horizon: f64) -> Result<()> {
    require(horizon >= 0.0 && horizon.is_finite(), || {
        format!("horizon must be finite and >= 0, got {horizon}")
    })
}

fn check_rate(pair_rate: f64) -> Result<()> {
    require(pair_rate > 0.0 && pair_rate.is_finite(), || {
        format!("pair_rate must be positive, got {pair_rate}")
    })
}

/// Time-`T` population of the Moran model started from `mu0`, sampled
/// backwards. `pair_rate` is the genealogical rate of the forward model.
pub fn backward_moran_sample<R: Rng + ?Sized>(
    mu0: &EmpiricalMeasure,
    horizon: f64,
    pair_rate: f64,
    rng: &mut R,
) -> Result<GenealogicalSample> {
    let n = mu0.len();
    require(n >= 2, || format!("need at least 2 atoms, got {n}"))?;
    check_horizon(horizon)?;
    check_rate(pair_rate)?;
    let tree = kingman_unchecked(n, pair_rate, rng);
    let d = displace(&tree, horizon, rng);
    let anc = ancestor_positions(mu0, &d, rng);
    let leaf_values = (0..n).map(|i| anc[d.root[i]] + d.value[i]).collect();
    Ok(GenealogicalSample { lineages: d.roots.len(), tree, horizon, leaf_values })
}

/// Ancestor position per node id (only roots are filled).
fn ancestor_positions<R: Rng + ?Sized>(mu0: &EmpiricalMeasure, d: &Displacements, rng: &mut R) -> Vec<f64> {
    let mut pos = vec![0.0; d.value.len()];
    let picks = index::sample(rng, mu0.len(), d.roots.len());
    for (r, a) in d.roots.iter().zip(picks.iter()) {
        pos[*r] = mu0.atoms()[a];
    }
    pos
}

/// Draw from the stationary law of the centered Moran model with
/// genealogical rate `pair_rate`.
pub fn sample_invariant<R: Rng + ?Sized>(n: usize, pair_rate: f64, rng: &mut R) -> Result<CenteredMeasure> {
    Ok(sample_invariant_with_tree(n, pair_rate, rng)?.1)
}

pub fn sample_invariant_with_tree<R: Rng + ?Sized>(
    n: usize,
    pair_rate: f64,
    rng: &mut R,
) -> Result<(CoalescentTree, CenteredMeasure)> {
    require(n >= 2, || format!("need at least 2 leaves, got {n}"))?;
    check_rate(pair_rate)?;
    let tree = kingman_unchecked(n, pair_rate, rng);
    let u = leaf_displacements(&tree, tree.height(), rng);
    let v = CenteredMeasure::from_atoms(center_atoms(&u)).expect("centered by construction");
    Ok((tree, v))
}

/// Covariance of the centered leaf values given pairwise coalescence times:
/// `Σ_ij = (1/N) Σ_k (T_ik + T_jk) − T_ij − (1/N²) Σ_kl T_kl`.
pub fn sigma_from_times(t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = t.nrows();
    require(n >= 1 && t.ncols() == n, || "time matrix must be square".into())?;
    let tol = 1e-12 * (1.0 + t.amax());
    for i in 0..n {
        if t[(i, i)] != 0.0 {
            return Err(Error::InvalidParameter(format!("nonzero diagonal at {i}")));
        }
        for j in 0..i {
            if (t[(i, j)] - t[(j, i)]).abs() > tol {
                return Err(Error::InvalidParameter(format!("asymmetric entry ({i}, {j})")));
            }
        }
    }
    let nf = n as f64;
    let row: Vec<f64> = (0..n).map(|i| compensated_sum(t.row(i).iter().copied()) / nf).collect();
    let total = compensated_sum(row.iter().copied()) / nf;
    Ok(DMatrix::from_fn(n, n, |i, j| row[i] + row[j] - t[(i, j)] - total))
}

#[derive(Clone, Debug)]
pub struct CoupledPair {
    pub first: CenteredMeasure,
    pub second: CenteredMeasure,
    /// A single ancestral lineage remains at backward time `T`.
    pub coalesced: bool,
}

/// Two time-`T` centered samples sharing genealogy and mutations; only the
/// ancestor positions differ. On coalescence the outputs are bitwise equal.
pub fn coupled_pair_sample<R: Rng + ?Sized>(
    mu0: &EmpiricalMeasure,
    nu0: &EmpiricalMeasure,
    horizon: f64,
    pair_rate: f64,
    rng: &mut R,
) -> Result<CoupledPair> {
    let n = mu0.len();
    require(nu0.len() == n, || format!("atom counts differ: {} vs {}", n, nu0.len()))?;
    require(n >= 2, || format!("need at least 2 atoms, got {n}"))?;
    check_horizon(horizon)?;
    check_rate(pair_rate)?;
    let tree = kingman_unchecked(n, pair_rate, rng);
    let d = displace(&tree, horizon, rng);
    let anc_mu = ancestor_positions(mu0, &d, rng);
    let anc_nu = ancestor_positions(nu0, &d, rng);

    let wbar = compensated_sum(d.value[..n].iter().copied()) / n as f64;
    let mut counts = vec![0usize; d.value.len()];
    for i in 0..n {
        counts[d.root[i]] += 1;
    }
    // The ancestral mean is weighted per lineage, so a single lineage
    // contributes exactly 1.0 * x and its offset cancels to zero.
    let centered = |anc: &[f64]| {
        let mut acc = CompensatedSum::new();
        for &r in &d.roots {
            acc.add(counts[r] as f64 / n as f64 * anc[r]);
        }
        let xbar = acc.value();
        let v: Vec<f64> = (0..n)
            .map(|i| (anc[d.root[i]] - xbar) + (d.value[i] - wbar))
            .collect();
        CenteredMeasure::from_atoms(center_atoms(&v)).expect("centered by construction")
    };
    Ok(CoupledPair {
        first: centered(&anc_mu),
        second: centered(&anc_nu),
        coalesced: d.roots.len() == 1,
    })
}
