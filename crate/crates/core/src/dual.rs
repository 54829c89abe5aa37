//! Function-valued dual process and the two sides of the duality identity.
//!
//! The level `M(t)` is a birth–death chain with up rate `γn²` and down rate
//! `γn(n−1)`. The polynomial state evolves under the drifted heat semigroup
//! between jumps; a down jump applies a random insertion `Φ_ij`, an up jump
//! applies a random `K_ij`.

use rand::Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::error::{require, Error, Result};
use crate::measure::{raw_moments, recenter, CenteredMeasure};
use crate::moran::{simulate, InitialCondition, MoranConfig, RatePreset};
use crate::poly::Polynomial;
use crate::seed::{child_master, run_replicas};
use crate::semigroup::{apply_semigroup, SemigroupParams};
use crate::stats::{compensated_sum, effective_sample_size, Estimate};

/// Piecewise-constant level trajectory on `[0, stop_time]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LevelPath {
    pub gamma: f64,
    pub horizon: f64,
    pub start_level: usize,
    pub jump_times: Vec<f64>,
    /// Level after each jump.
    pub levels: Vec<usize>,
    /// Time at which the level first reached the cap, if before `horizon`.
    pub capped_at: Option<f64>,
}

impl LevelPath {
    /// Builds a path from explicit jumps; each jump must move by ±1.
    pub fn from_jumps(
        gamma: f64,
        horizon: f64,
        start_level: usize,
        jumps: Vec<(f64, usize)>,
        capped_at: Option<f64>,
    ) -> Result<Self> {
        require(start_level >= 1, || "start level must be >= 1".into())?;
        let mut prev = (0.0, start_level);
        for &(t, n) in &jumps {
            require(t > prev.0 && t <= horizon, || format!("jump time {t} out of order"))?;
            require(n >= 1 && n.abs_diff(prev.1) == 1, || format!("level {} -> {n} is not a unit step", prev.1))?;
            prev = (t, n);
        }
        let (jump_times, levels) = jumps.into_iter().unzip();
        Ok(Self { gamma, horizon, start_level, jump_times, levels, capped_at })
    }

    /// End of the usable part of the path, `horizon ∧ θ`.
    pub fn stop_time(&self) -> f64 {
        self.capped_at.unwrap_or(self.horizon)
    }

    pub fn jump_count(&self) -> usize {
        self.jump_times.len()
    }

    pub fn level_at(&self, t: f64) -> usize {
        let k = self.jump_times.partition_point(|&s| s <= t);
        if k == 0 {
            self.start_level
        } else {
            self.levels[k - 1]
        }
    }

    /// `∫₀^{t∧θ} M(u)² du`, exact.
    pub fn level_square_integral(&self, t: f64) -> f64 {
        let end = t.min(self.stop_time());
        let mut acc = 0.0;
        let mut s = 0.0;
        let mut n = self.start_level as f64;
        for (&tau, &lvl) in self.jump_times.iter().zip(&self.levels) {
            if tau >= end {
                break;
            }
            acc += n * n * (tau - s);
            s = tau;
            n = lvl as f64;
        }
        acc + n * n * (end - s).max(0.0)
    }
}

/// Samples the level chain until `horizon`, or until it first reaches `cap`.
pub fn sample_level_chain<R: Rng + ?Sized>(
    start_level: usize,
    horizon: f64,
    gamma: f64,
    cap: Option<usize>,
    rng: &mut R,
) -> Result<LevelPath> {
    require(start_level >= 1, || "start level must be >= 1".into())?;
    require(gamma >= 0.0 && gamma.is_finite(), || format!("invalid gamma {gamma}"))?;
    require(horizon >= 0.0 && horizon.is_finite(), || format!("invalid horizon {horizon}"))?;
    let mut path = LevelPath {
        gamma,
        horizon,
        start_level,
        jump_times: Vec::new(),
        levels: Vec::new(),
        capped_at: None,
    };
    if cap.is_some_and(|k| start_level >= k) {
        path.capped_at = Some(0.0);
        return Ok(path);
    }
    let mut t = 0.0;
    let mut n = start_level;
    loop {
        let nf = n as f64;
        let rate = gamma * nf * (2.0 * nf - 1.0);
        if rate == 0.0 {
            break;
        }
        t += rng.sample::<f64, _>(Exp1) / rate;
        if t > horizon {
            break;
        }
        let u: f64 = rng.random();
        n = if u * (2.0 * nf - 1.0) < nf { n + 1 } else { n - 1 };
        path.jump_times.push(t);
        path.levels.push(n);
        if cap.is_some_and(|k| n >= k) {
            path.capped_at = Some(t);
            break;
        }
    }
    Ok(path)
}

/// `exp(γ ∫₀^{t∧θ} M² du)`.
pub fn duality_weight(path: &LevelPath, t: f64) -> f64 {
    (path.gamma * path.level_square_integral(t)).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DualJump {
    Phi(usize, usize),
    K(usize, usize),
}

#[derive(Clone, Debug)]
pub struct DualTrajectory {
    pub jumps: Vec<(f64, DualJump)>,
    /// `(t, ξ_{t∧θ})` for each requested time.
    pub states: Vec<(f64, Polynomial)>,
}

/// Evolves `xi0` along a level path. Operator indices are drawn from `rng`.
pub fn evolve_dual<R: Rng + ?Sized>(
    xi0: &Polynomial,
    path: &LevelPath,
    eval_times: &[f64],
    rng: &mut R,
) -> Result<DualTrajectory> {
    evolve_dual_with(xi0, path, eval_times, rng, |_, _| {})
}

/// Same as [`evolve_dual`], calling `on_jump(τ, ξ_τ)` right after each jump.
pub fn evolve_dual_with<R, F>(
    xi0: &Polynomial,
    path: &LevelPath,
    eval_times: &[f64],
    rng: &mut R,
    mut on_jump: F,
) -> Result<DualTrajectory>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &Polynomial),
{
    if xi0.arity() != path.start_level {
        return Err(Error::ArityMismatch { expected: path.start_level, found: xi0.arity() });
    }
    require(eval_times.windows(2).all(|w| w[0] <= w[1]), || "eval times must be sorted".into())?;
    let stop = path.stop_time();
    let deg0 = xi0.degree();
    let mut xi = xi0.clone();
    let mut s = 0.0;
    let mut next = 0;
    let mut jumps = Vec::new();
    let mut states = Vec::with_capacity(eval_times.len());
    for &t in eval_times {
        require(t >= 0.0 && t <= path.horizon, || format!("eval time {t} outside the path"))?;
        let end = t.min(stop);
        while next < path.jump_count() && path.jump_times[next] <= end {
            let tau = path.jump_times[next];
            let n = xi.arity();
            xi = apply_semigroup(&xi, &SemigroupParams::new(n, path.gamma)?, tau - s)?;
            let jump = if path.levels[next] > n {
                let (i, j) = (rng.random_range(0..n), rng.random_range(0..n));
                xi = xi.k_op(i, j)?;
                DualJump::K(i, j)
            } else {
                let i = rng.random_range(0..n);
                let mut j = rng.random_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                xi = xi.phi_insert(i, j)?;
                DualJump::Phi(i, j)
            };
            debug_assert!(xi.degree() <= deg0);
            on_jump(tau, &xi);
            jumps.push((tau, jump));
            s = tau;
            next += 1;
        }
        let state = apply_semigroup(&xi, &SemigroupParams::new(xi.arity(), path.gamma)?, end - s)?;
        debug_assert_eq!(state.arity(), path.level_at(end));
        states.push((t, state));
    }
    Ok(DualTrajectory { jumps, states })
}

fn pairing(f: &Polynomial, atoms: &[f64]) -> f64 {
    f.integrate_product_measure(atoms)
}

/// Precomputed pieces of the centered generator on `F(μ) = ⟨f, μⁿ⟩`:
/// `⟨Bf, μⁿ⟩ + γ Σ_{i≠j} (⟨Φ_ij f, μⁿ⁻¹⟩ − ⟨f, μⁿ⟩) + γ Σ_{i,j} ⟨K_ij f, μⁿ⁺¹⟩`.
#[derive(Clone, Debug)]
pub struct FvcGenerator {
    pub gamma: f64,
    pub f: Polynomial,
    pub drift: Polynomial,
    /// `Σ_{i≠j} Φ_ij f`, absent for arity < 2.
    pub insert_sum: Option<Polynomial>,
    pub k_sum: Polynomial,
}

impl FvcGenerator {
    pub fn new(f: &Polynomial, gamma: f64) -> Result<Self> {
        let n = f.arity();
        require(n >= 1, || "generator needs arity >= 1".into())?;
        let mut k_sum = Polynomial::zero(n + 1);
        for i in 0..n {
            for j in 0..n {
                k_sum = &k_sum + &f.k_op(i, j)?;
            }
        }
        let insert_sum = if n >= 2 {
            let mut acc = Polynomial::zero(n - 1);
            for i in 0..n {
                for j in (0..n).filter(|&j| j != i) {
                    acc = &acc + &f.phi_insert(i, j)?;
                }
            }
            Some(acc)
        } else {
            None
        };
        Ok(Self { gamma, f: f.clone(), drift: f.generator_b(gamma), insert_sum, k_sum })
    }

    /// Highest raw moment order needed by [`Self::apply_moments`].
    pub fn moment_order(&self) -> usize {
        let ins = self.insert_sum.as_ref().map_or(0, |p| p.max_exponent());
        self.k_sum.max_exponent().max(self.drift.max_exponent()).max(self.f.max_exponent()).max(ins)
    }

    /// Generator value from raw moments of the measure.
    pub fn apply_moments(&self, moments: &[f64]) -> f64 {
        let n = self.f.arity() as f64;
        let mut v = self.drift.integrate_with_moments(moments);
        if let Some(ins) = &self.insert_sum {
            v += self.gamma * (ins.integrate_with_moments(moments) - n * (n - 1.0) * self.f.integrate_with_moments(moments));
        }
        v + self.gamma * self.k_sum.integrate_with_moments(moments)
    }

    pub fn apply(&self, atoms: &[f64]) -> f64 {
        self.apply_moments(&raw_moments(atoms, self.moment_order()))
    }
}

/// `|L F − (L̃ F + γn²⟨f, μⁿ⟩)|` where `L̃` is the dual jump generator,
/// assembled term by term from the individual operators.
pub fn generator_split_check(f: &Polynomial, mu: &CenteredMeasure, gamma: f64) -> Result<f64> {
    let full = FvcGenerator::new(f, gamma)?.apply(mu.atoms());
    let atoms = mu.atoms();
    let n = f.arity();
    let base = pairing(f, atoms);
    let mut terms = vec![pairing(&f.generator_b(gamma), atoms)];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                terms.push(gamma * (pairing(&f.phi_insert(i, j)?, atoms) - base));
            }
            terms.push(gamma * (pairing(&f.k_op(i, j)?, atoms) - base));
        }
    }
    terms.push(gamma * (n * n) as f64 * base);
    Ok((full - compensated_sum(terms)).abs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualityConfig {
    /// Atoms of the centered initial measure.
    pub mu: Vec<f64>,
    /// Initial dual state in the polynomial text format.
    pub xi0: String,
    pub gamma: f64,
    pub t: f64,
    pub level_cap: usize,
    /// Forward population sizes; two sizes enable extrapolation in `1/N`.
    pub forward_sizes: Vec<usize>,
    pub forward_replicas: usize,
    pub dual_replicas: usize,
}

impl DualityConfig {
    pub fn desk_scale() -> Self {
        Self {
            mu: vec![-1.0, 1.0],
            xi0: "# arity 1\n1 * x1^2\n".into(),
            gamma: 1.0,
            t: 0.25,
            level_cap: 10,
            forward_sizes: vec![200, 400],
            forward_replicas: 2000,
            dual_replicas: 40_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForwardEstimate {
    pub n: usize,
    pub mean: f64,
    pub se: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DualityReport {
    /// Forward side; extrapolated to `N = ∞` when two sizes were given.
    pub lhs: f64,
    pub lhs_se: f64,
    pub rhs: f64,
    pub rhs_se: f64,
    pub capped_fraction: f64,
    /// Fraction of dual runs whose pairing with `μ` reached the cap at a jump.
    pub pairing_exceed_fraction: f64,
    pub ess: f64,
    pub forward: Vec<ForwardEstimate>,
    pub reliable: bool,
    pub params: DualityConfig,
}

impl DualityReport {
    pub fn z_score(&self) -> f64 {
        (self.lhs - self.rhs) / self.lhs_se.hypot(self.rhs_se)
    }
}

pub const MIN_ESS: f64 = 100.0;
pub const MAX_CAPPED_FRACTION: f64 = 0.01;

/// Monte Carlo estimates of both sides of
/// `E⟨ξ₀, X_t^{M₀}⟩ = E[⟨ξ_{t∧θ}, μ^{M(t∧θ)}⟩ exp(γ ∫₀^{t∧θ} M²)]`.
///
/// The forward side runs the `Diffusion` Moran preset started from `μ`
/// replicated to each forward size.
pub fn duality_check<R: Rng + ?Sized>(config: &DualityConfig, rng: &mut R) -> Result<DualityReport> {
    let mu = CenteredMeasure::from_atoms(config.mu.clone())?;
    let xi0: Polynomial = config.xi0.parse()?;
    require(xi0.arity() >= 1, || "xi0 must have arity >= 1".into())?;
    require(config.t >= 0.0 && config.t.is_finite(), || format!("invalid t {}", config.t))?;
    require(config.gamma > 0.0 && config.gamma.is_finite(), || format!("invalid gamma {}", config.gamma))?;
    require(config.level_cap > xi0.arity(), || "level cap must exceed the start level".into())?;
    require(
        (1..=2).contains(&config.forward_sizes.len()),
        || "give one or two forward sizes".into(),
    )?;
    require(config.forward_replicas >= 2 && config.dual_replicas >= 2, || "need at least 2 replicas".into())?;
    let m = mu.len();
    for &n in &config.forward_sizes {
        require(n >= 2 && n % m == 0, || format!("forward size {n} must be a multiple of {m}"))?;
    }

    let forward_master = child_master(rng);
    let mut forward = Vec::new();
    for (k, &n) in config.forward_sizes.iter().enumerate() {
        let cfg = MoranConfig {
            n,
            gamma: config.gamma,
            preset: RatePreset::Diffusion,
            horizon: config.t,
            snapshot_times: vec![config.t],
            init: InitialCondition::Atoms(mu.as_measure().replicated(n / m).into_atoms()),
        };
        let samples = run_replicas(forward_master.wrapping_add(k as u64), config.forward_replicas, |_, r| {
            let path = simulate(&cfg, r)?;
            let z = recenter(&path.snapshots[0].1);
            Ok(pairing(&xi0, z.atoms()))
        })
        .into_iter()
        .collect::<Result<Vec<f64>>>()?;
        let e = Estimate::from_samples(&samples);
        forward.push(ForwardEstimate { n, mean: e.mean, se: e.se });
    }
    let (lhs, lhs_se) = extrapolate(&forward);

    let dual_master = child_master(rng);
    let cap = config.level_cap as f64;
    let runs = run_replicas(dual_master, config.dual_replicas, |_, r| -> Result<(f64, f64, bool, bool)> {
        let path = sample_level_chain(xi0.arity(), config.t, config.gamma, Some(config.level_cap), r)?;
        let mut exceeded = false;
        let traj = evolve_dual_with(&xi0, &path, &[config.t], r, |_, xi| {
            exceeded |= pairing(xi, mu.atoms()).abs() >= cap;
        })?;
        let w = duality_weight(&path, config.t);
        Ok((pairing(&traj.states[0].1, mu.atoms()), w, path.capped_at.is_some(), exceeded))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let values: Vec<f64> = runs.iter().map(|(v, w, _, _)| v * w).collect();
    let weights: Vec<f64> = runs.iter().map(|(_, w, _, _)| *w).collect();
    let rhs = Estimate::from_samples(&values);
    let total = runs.len() as f64;
    let capped_fraction = runs.iter().filter(|r| r.2).count() as f64 / total;
    let pairing_exceed_fraction = runs.iter().filter(|r| r.3).count() as f64 / total;
    let ess = effective_sample_size(&weights);
    Ok(DualityReport {
        lhs,
        lhs_se,
        rhs: rhs.mean,
        rhs_se: rhs.se,
        capped_fraction,
        pairing_exceed_fraction,
        ess,
        forward,
        reliable: capped_fraction < MAX_CAPPED_FRACTION && ess >= MIN_ESS,
        params: config.clone(),
    })
}

/// Linear extrapolation in `1/N` from two sizes; a single size is returned as is.
fn extrapolate(f: &[ForwardEstimate]) -> (f64, f64) {
    match f {
        [a] => (a.mean, a.se),
        [a, b] => {
            let (na, nb) = (a.n as f64, b.n as f64);
            let d = nb - na;
            ((nb * b.mean - na * a.mean) / d, (nb * b.se).hypot(na * a.se) / d.abs())
        }
        _ => unreachable!("validated above"),
    }
}

/// Closed-form `E⟨x², X_t⟩` for a centered start with second moment `m2`.
pub fn second_moment_closed_form(gamma: f64, m2: f64, t: f64) -> f64 {
    let s = 1.0 / (2.0 * gamma);
    s + (m2 - s) * (-2.0 * gamma * t).exp()
}
