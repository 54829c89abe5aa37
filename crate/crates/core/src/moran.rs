//! Forward event-driven Moran particle system with Brownian mutation.
//!
//! Each ordered pair `(i, j)`, `i != j`, fires at rate `r`: particle `i`
//! dies and is replaced by a copy of particle `j`. Between events every
//! particle performs an independent standard Brownian motion. Particles are
//! advanced lazily: a particle only receives its Gaussian increment when it
//! is copied or when a snapshot is taken.

use rand::Rng;
use rand_distr::{Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{require, Result};
use crate::measure::{recenter, CenteredMeasure, EmpiricalMeasure};
use crate::seed::{child_master, run_replicas};
use crate::stats::Estimate;

/// Normalization of the resampling rate.
///
/// | preset         | rate per ordered pair | pair coalescence rate | stationary E M₂ |
/// |----------------|-----------------------|-----------------------|-----------------|
/// | `Genealogical` | γ(N−1)/(2N)           | γ(N−1)/N              | 1/γ             |
/// | `Diffusion`    | γ                     | 2γ                    | (N−1)/(2γN)     |
///
/// `Diffusion` matches the measure-valued diffusion with bracket `2γ` and
/// drift `1 − 2γ M₂`; `Genealogical` matches a Kingman coalescent at rate γ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatePreset {
    Genealogical,
    Diffusion,
    /// Explicit rate per ordered pair.
    Custom(f64),
}

impl RatePreset {
    pub fn pair_rate(&self, n: usize, gamma: f64) -> f64 {
        match *self {
            RatePreset::Genealogical => gamma * (n as f64 - 1.0) / (2.0 * n as f64),
            RatePreset::Diffusion => gamma,
            RatePreset::Custom(r) => r,
        }
    }

    /// Rate at which two given lineages coalesce backwards in time.
    pub fn coalescence_rate(&self, n: usize, gamma: f64) -> f64 {
        2.0 * self.pair_rate(n, gamma)
    }

    /// The γ of the limiting diffusion whose drift the finite system follows.
    pub fn effective_gamma(&self, n: usize, gamma: f64) -> f64 {
        self.pair_rate(n, gamma)
    }

    pub fn name(&self) -> String {
        match self {
            RatePreset::Genealogical => "genealogical".into(),
            RatePreset::Diffusion => "diffusion".into(),
            RatePreset::Custom(r) => format!("custom({r})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialCondition {
    Atoms(Vec<f64>),
    /// `n` iid N(0, σ²) draws, then recentered.
    IidNormal { sigma: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoranConfig {
    pub n: usize,
    pub gamma: f64,
    pub preset: RatePreset,
    pub horizon: f64,
    pub snapshot_times: Vec<f64>,
    pub init: InitialCondition,
}

/// Evenly spaced times `0, dt, 2dt, …` up to `horizon` inclusive.
pub fn snapshot_grid(horizon: f64, dt: f64) -> Vec<f64> {
    let steps = (horizon / dt + 1e-9).floor() as usize;
    (0..=steps).map(|k| k as f64 * dt).collect()
}

impl MoranConfig {
    pub fn new(n: usize, gamma: f64, preset: RatePreset, horizon: f64, dt: f64, init: InitialCondition) -> Self {
        Self { n, gamma, preset, horizon, snapshot_times: snapshot_grid(horizon, dt), init }
    }

    pub fn pair_rate(&self) -> f64 {
        self.preset.pair_rate(self.n, self.gamma)
    }

    pub fn validate(&self) -> Result<()> {
        require(self.n >= 2, || format!("need at least 2 particles, got {}", self.n))?;
        require(self.gamma >= 0.0 && self.gamma.is_finite(), || format!("invalid gamma {}", self.gamma))?;
        let r = self.pair_rate();
        require(r >= 0.0 && r.is_finite(), || format!("invalid pair rate {r}"))?;
        require(self.horizon >= 0.0 && self.horizon.is_finite(), || format!("invalid horizon {}", self.horizon))?;
        let mut last = f64::NEG_INFINITY;
        for &s in &self.snapshot_times {
            require(s >= 0.0 && s <= self.horizon, || format!("snapshot {s} outside [0, horizon]"))?;
            require(s >= last, || "snapshot times must be sorted".into())?;
            last = s;
        }
        match &self.init {
            InitialCondition::Atoms(a) => {
                require(a.len() == self.n, || format!("{} initial atoms for n = {}", a.len(), self.n))?;
                require(a.iter().all(|x| x.is_finite()), || "non-finite initial atom".into())?;
            }
            InitialCondition::IidNormal { sigma } => {
                require(*sigma >= 0.0 && sigma.is_finite(), || format!("invalid sigma {sigma}"))?;
            }
        }
        Ok(())
    }

    fn initial_atoms<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match &self.init {
            InitialCondition::Atoms(a) => a.clone(),
            InitialCondition::IidNormal { sigma } => {
                let xs: Vec<f64> = (0..self.n).map(|_| sigma * rng.sample::<f64, _>(StandardNormal)).collect();
                recenter(&EmpiricalMeasure::new(xs).expect("finite")).into_measure().into_atoms()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MoranPath {
    pub snapshots: Vec<(f64, EmpiricalMeasure)>,
    pub event_count: u64,
}

impl MoranPath {
    pub fn times(&self) -> Vec<f64> {
        self.snapshots.iter().map(|(t, _)| *t).collect()
    }
}

pub type CenteredPath = Vec<(f64, CenteredMeasure)>;

struct Particles {
    x: Vec<f64>,
    last: Vec<f64>,
}

impl Particles {
    fn catch_up<R: Rng + ?Sized>(&mut self, i: usize, t: f64, rng: &mut R) {
        let dt = t - self.last[i];
        if dt > 0.0 {
            let z: f64 = rng.sample(StandardNormal);
            self.x[i] += dt.sqrt() * z;
            self.last[i] = t;
        }
    }
}

/// Runs the particle system and records the configured snapshots.
pub fn simulate<R: Rng + ?Sized>(config: &MoranConfig, rng: &mut R) -> Result<MoranPath> {
    let mut snapshots = Vec::with_capacity(config.snapshot_times.len());
    let event_count = simulate_with(config, rng, |t, x| {
        snapshots.push((t, EmpiricalMeasure::new(x.to_vec()).expect("finite positions")));
    })?;
    Ok(MoranPath { snapshots, event_count })
}

/// Runs the particle system, handing each snapshot to `observe` instead of
/// storing it. Returns the number of resampling events.
pub fn simulate_with<R, F>(config: &MoranConfig, rng: &mut R, mut observe: F) -> Result<u64>
where
    R: Rng + ?Sized,
    F: FnMut(f64, &[f64]),
{
    config.validate()?;
    let n = config.n;
    let x = config.initial_atoms(rng);
    let mut p = Particles { x, last: vec![0.0; n] };
    let total = config.pair_rate() * (n * (n - 1)) as f64;
    let wait = |rng: &mut R| -> f64 {
        if total > 0.0 {
            rng.sample::<f64, _>(Exp1) / total
        } else {
            f64::INFINITY
        }
    };
    let mut next = wait(rng);
    let mut events = 0u64;
    for &s in &config.snapshot_times {
        while next <= s {
            let i = rng.random_range(0..n);
            let mut j = rng.random_range(0..n - 1);
            if j >= i {
                j += 1;
            }
            p.catch_up(j, next, rng);
            p.x[i] = p.x[j];
            p.last[i] = next;
            events += 1;
            next += wait(rng);
        }
        for i in 0..n {
            p.catch_up(i, s, rng);
        }
        observe(s, &p.x);
    }
    Ok(events)
}

pub fn centered_path(path: &MoranPath) -> CenteredPath {
    path.snapshots.iter().map(|(t, m)| (*t, recenter(m))).collect()
}

/// Mean second centered moment solving `m' = (1 − 1/N) − 2r m`.
pub fn m2_relaxation(n: usize, pair_rate: f64, m2_start: f64, t: f64) -> f64 {
    let drive = 1.0 - 1.0 / n as f64;
    if pair_rate == 0.0 {
        return m2_start + drive * t;
    }
    let s = drive / (2.0 * pair_rate);
    s + (m2_start - s) * (-2.0 * pair_rate * t).exp()
}

/// Long-run mean of M₂ under a preset.
pub fn stationary_m2(n: usize, pair_rate: f64) -> f64 {
    (n as f64 - 1.0) / (2.0 * pair_rate * n as f64)
}

/// Cross-replica estimate of the time-averaged signed moment `⟨x^k, Z_t⟩`
/// over snapshots at times `>= burn_in`. For even `k` this is `M_k`.
pub fn stationary_moment<R: Rng + ?Sized>(
    config: &MoranConfig,
    k: u32,
    replicas: usize,
    burn_in: f64,
    rng: &mut R,
) -> Result<Estimate> {
    config.validate()?;
    require(burn_in < config.horizon, || format!("burn_in {burn_in} must be below horizon"))?;
    require(
        config.snapshot_times.iter().any(|&t| t >= burn_in),
        || "no snapshots after burn_in".into(),
    )?;
    let master = child_master(rng);
    let per_replica: Vec<Result<f64>> = run_replicas(master, replicas, |_, r| {
        let path = simulate(config, r)?;
        let vals: Vec<f64> = path
            .snapshots
            .iter()
            .filter(|(t, _)| *t >= burn_in)
            .map(|(_, m)| signed_moment(&recenter(m), k))
            .collect();
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    });
    let vals = per_replica.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(Estimate::from_samples(&vals))
}

fn signed_moment(m: &CenteredMeasure, k: u32) -> f64 {
    m.raw_moments(k as usize)[k as usize]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::genealogy::sample_invariant;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn zeros(n: usize) -> InitialCondition {
        InitialCondition::Atoms(vec![0.0; n])
    }

    #[test]
    fn preset_table() {
        assert_eq!(RatePreset::Diffusion.pair_rate(50, 1.5), 1.5);
        assert_eq!(RatePreset::Genealogical.pair_rate(50, 1.0), 0.49);
        assert_eq!(RatePreset::Genealogical.coalescence_rate(50, 1.0), 0.98);
        assert!((stationary_m2(50, RatePreset::Genealogical.pair_rate(50, 2.0)) - 0.5).abs() < 1e-15);
        assert!((stationary_m2(10, RatePreset::Diffusion.pair_rate(10, 1.0)) - 0.45).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = MoranConfig::new(4, 1.0, RatePreset::Diffusion, 1.0, 0.5, zeros(4));
        assert!(simulate(&c, &mut rng(0)).is_ok());
        c.snapshot_times = vec![0.5, 0.2];
        assert!(c.validate().is_err());
        c.snapshot_times = vec![2.0];
        assert!(c.validate().is_err());
        let c = MoranConfig::new(1, 1.0, RatePreset::Diffusion, 1.0, 0.5, zeros(1));
        assert!(c.validate().is_err());
        let c = MoranConfig::new(3, 1.0, RatePreset::Diffusion, 1.0, 0.5, zeros(4));
        assert!(c.validate().is_err());
    }

    #[test]
    fn grid_is_exact_multiples() {
        let g = snapshot_grid(1.0, 0.1);
        assert_eq!(g.len(), 11);
        assert_eq!(g[3], 3.0 * 0.1);
        assert_eq!(*g.last().unwrap(), 1.0);
    }

    #[test]
    fn pure_brownian_variance() {
        let cfg = MoranConfig {
            n: 4,
            gamma: 0.0,
            preset: RatePreset::Diffusion,
            horizon: 2.0,
            snapshot_times: vec![0.5, 2.0],
            init: zeros(4),
        };
        let mut r = rng(1);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..20_000 {
            let p = simulate(&cfg, &mut r).unwrap();
            assert_eq!(p.event_count, 0);
            a.push(p.snapshots[0].1.atoms()[2].powi(2));
            b.push(p.snapshots[1].1.atoms()[0].powi(2));
        }
        assert!(Estimate::from_samples(&a).within(0.5, 4.0));
        assert!(Estimate::from_samples(&b).within(2.0, 4.0));
    }

    #[test]
    fn particle_count_constant_and_centered() {
        let cfg = MoranConfig::new(7, 1.0, RatePreset::Diffusion, 3.0, 0.25, InitialCondition::IidNormal { sigma: 2.0 });
        let path = simulate(&cfg, &mut rng(2)).unwrap();
        assert!(path.event_count > 0);
        assert!(path.snapshots.iter().all(|(_, m)| m.len() == 7));
        for ((_, raw), (_, c)) in path.snapshots.iter().zip(centered_path(&path)) {
            assert!(c.atoms().iter().sum::<f64>().abs() <= 1e-12 * (1.0 + raw.max_abs()));
            let (a, b) = (raw.centered_moment(2), c.centered_moment(2));
            assert!((a - b).abs() <= 1e-12 * (1.0 + a));
        }
    }

    #[test]
    fn translation_invariance_bitwise_on_exact_inputs() {
        // Integer atoms, dyadic shift and N = 8 keep every mean exact.
        let atoms = vec![3.0, -1.0, 0.0, 4.0, 2.0, -5.0, 1.0, 7.0];
        let shifted: Vec<f64> = atoms.iter().map(|x| x + 1024.0).collect();
        let cfg = |a: Vec<f64>| MoranConfig::new(8, 1.0, RatePreset::Diffusion, 0.0, 1.0, InitialCondition::Atoms(a));
        let p = simulate(&cfg(atoms), &mut rng(3)).unwrap();
        let q = simulate(&cfg(shifted), &mut rng(3)).unwrap();
        assert_eq!(centered_path(&p), centered_path(&q));
    }

    #[test]
    fn translation_invariance_general() {
        let atoms = vec![0.3, -1.7, 2.2, 0.05, 1.1];
        let shifted: Vec<f64> = atoms.iter().map(|x| x - 3.7).collect();
        let cfg = |a: Vec<f64>| MoranConfig::new(5, 2.0, RatePreset::Genealogical, 4.0, 0.5, InitialCondition::Atoms(a));
        let p = centered_path(&simulate(&cfg(atoms), &mut rng(4)).unwrap());
        let q = centered_path(&simulate(&cfg(shifted), &mut rng(4)).unwrap());
        for ((_, a), (_, b)) in p.iter().zip(&q) {
            for (x, y) in a.atoms().iter().zip(b.atoms()) {
                assert!((x - y).abs() <= 1e-12 * 10.0);
            }
        }
    }

    #[test]
    fn m2_follows_relaxation() {
        let (n, gamma) = (10, 1.0);
        let cfg = MoranConfig::new(n, gamma, RatePreset::Diffusion, 1.5, 0.5, InitialCondition::Atoms(vec![0.0; n]));
        let r = cfg.pair_rate();
        let mut g = rng(5);
        let paths: Vec<MoranPath> = (0..8_000).map(|_| simulate(&cfg, &mut g).unwrap()).collect();
        for (k, t) in cfg.snapshot_times.iter().enumerate().skip(1) {
            let m2: Vec<f64> = paths.iter().map(|p| p.snapshots[k].1.centered_moment(2)).collect();
            assert!(Estimate::from_samples(&m2).within(m2_relaxation(n, r, 0.0, *t), 4.0));
        }
    }

    #[test]
    fn stationary_moments_by_preset() {
        let n = 12;
        for preset in [RatePreset::Genealogical, RatePreset::Diffusion] {
            let cfg = MoranConfig::new(n, 1.0, preset, 15.0, 0.5, InitialCondition::Atoms(vec![0.0; n]));
            let est = stationary_moment(&cfg, 2, 300, 8.0, &mut rng(6)).unwrap();
            assert!(est.within(stationary_m2(n, cfg.pair_rate()), 4.0), "{preset:?} {est:?}");
            let first = stationary_moment(&cfg, 1, 20, 8.0, &mut rng(6)).unwrap();
            assert!(first.mean.abs() < 1e-12);
        }
    }

    #[test]
    fn forward_matches_backward_invariant() {
        let n = 8;
        let cfg = MoranConfig::new(n, 1.0, RatePreset::Genealogical, 12.0, 0.5, InitialCondition::Atoms(vec![0.0; n]));
        let fwd = stationary_moment(&cfg, 4, 400, 6.0, &mut rng(7)).unwrap();
        let lam = cfg.preset.coalescence_rate(n, cfg.gamma);
        let mut g = rng(8);
        let m4: Vec<f64> = (0..40_000).map(|_| sample_invariant(n, lam, &mut g).unwrap().centered_moment(4)).collect();
        assert!(fwd.agrees_with(&Estimate::from_samples(&m4), 4.0));
    }

    #[test]
    fn exchangeable_coordinates() {
        let cfg = MoranConfig::new(5, 1.0, RatePreset::Diffusion, 1.0, 1.0, InitialCondition::Atoms(vec![0.0, 0.0, 0.0, 0.0, 4.0]));
        let mut g = rng(9);
        let (mut a, mut b) = (Vec::new(), Vec::new());
        for _ in 0..20_000 {
            let p = simulate(&cfg, &mut g).unwrap();
            let z = recenter(&p.snapshots[1].1);
            a.push(z.atoms()[0].powi(2));
            b.push(z.atoms()[1].powi(2));
        }
        assert!(Estimate::from_samples(&a).agrees_with(&Estimate::from_samples(&b), 4.0));
    }
}
