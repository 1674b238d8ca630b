//! Scenario generation, seeded Monte Carlo runs and the preset experiments.
//!
//! Every trial draws its noise from its own ChaCha stream keyed by
//! `(seed, trial)`, so two configurations run with the same seed see the same
//! LOS noise draws, and results do not depend on the worker count.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix6, Vector6};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{crlb_known_ue, crlb_stage1, crlb_stage2, Crlb};
use crate::channel::{assemble_q_physics, assemble_q_synthetic, NoiseModel, PhysicsNoise, SyntheticNoise};
use crate::error::{Error, Result};
use crate::estimation::{
    locate_scatterers_known_ue, stage1_solve, stage2_solve, velocity_direction, Mode, NlosRefinement, Stage2Context,
    Stage2Variant, DEFAULT_ITERATIONS,
};
use crate::geometry::{angles_between, forward_measurements, MeasurementSet, Scatterer, Scenario, Vec3};
use crate::linalg::cholesky_lower;
use crate::scattering::{
    write_rcs_csv, AngleSweep, IncidenceGeometry, PhasePolicy, SizeSweep, SurfaceArray, SurfaceKind,
};
use crate::scenario::tables23;

/// Fraction of failed trials above which a run is flagged.
pub const FAILURE_THRESHOLD: f64 = 0.01;
const MAX_RETRIES: usize = 10_000;

/// UE sampling box: x, y, z ranges in metres.
pub const UE_REGION: [[f64; 2]; 3] = [[200.0, 300.0], [350.0, 650.0], [0.0, 30.0]];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Deployment {
    /// Around the midpoint of the UE and its nearest BS.
    Dense,
    /// Round-robin around all BSs.
    Distributed,
}

impl FromStr for Deployment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dense" => Ok(Deployment::Dense),
            "distributed" | "dist" => Ok(Deployment::Distributed),
            _ => Err(Error::InvalidArgument(format!("unknown deployment '{s}' (dense, distributed)"))),
        }
    }
}

impl fmt::Display for Deployment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Deployment::Dense => "dense",
            Deployment::Distributed => "distributed",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceLayout {
    pub count: usize,
    pub deployment: Deployment,
    pub kind: SurfaceKind,
    pub size: usize,
    /// Element edge, metres.
    pub element: f64,
    /// Placement ball radius, metres.
    pub radius: f64,
}

impl SurfaceLayout {
    pub fn new(count: usize, deployment: Deployment, size: usize) -> Self {
        Self { count, deployment, kind: SurfaceKind::Ris, size, element: 0.4 * 0.011, radius: 30.0 }
    }

    fn template(&self) -> SurfaceArray {
        SurfaceArray::new(self.kind, self.size, self.size, self.element, self.element)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    /// Sample the UE in [`UE_REGION`] instead of using the reference state.
    pub random_ue: bool,
    /// Replace the tabulated scatterers with generated surfaces.
    pub surfaces: Option<SurfaceLayout>,
}

fn uniform_in_ball(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    loop {
        let v = Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r));
        if v.norm() <= r {
            return v;
        }
    }
}

fn random_ue(rng: &mut ChaCha8Rng) -> (Vec3, Vec3) {
    let pos = Vec3::from_fn(|i, _| rng.random_range(UE_REGION[i][0]..UE_REGION[i][1]));
    let vel = loop {
        let v = Vec3::from_fn(|_, _| rng.random_range(-10.0..10.0));
        if v.norm() >= 1.0 {
            break v;
        }
    };
    (pos, vel)
}

fn grazing(a: &Vec3, b: &Vec3) -> Result<bool> {
    Ok(angles_between(a, b)?.elevation.cos().abs() < 0.05)
}

/// One surface near `center` facing BS `bs`, honouring far-field and
/// visibility constraints.
fn place_surface(
    rng: &mut ChaCha8Rng,
    layout: &SurfaceLayout,
    sc: &Scenario,
    center: Vec3,
    bs: usize,
    what: &str,
) -> Result<Scatterer> {
    let tpl = layout.template();
    let lambda = sc.rf.wavelength;
    let b = sc.bs[bs];
    for _ in 0..MAX_RETRIES {
        let pos = center + uniform_in_ball(rng, layout.radius);
        if pos.z < 0.0 {
            continue;
        }
        let Ok(surf) = tpl.clone().placed(pos, &(b - pos)) else { continue };
        let ff = surf.far_field_distance(lambda);
        let Ok(geo) = IncidenceGeometry::from_points(&surf, &b, &sc.ue_pos) else { continue };
        if geo.d_r <= ff || geo.d_t <= ff || geo.to_ue.elevation > 85f64.to_radians() {
            continue;
        }
        if grazing(&b, &pos)? || grazing(&pos, &sc.ue_pos)? {
            continue;
        }
        return Ok(Scatterer { pos, vel: Vec3::zeros(), bs, surface: Some(surf) });
    }
    Err(Error::Unsatisfiable { what: what.to_string(), retries: MAX_RETRIES })
}

pub fn generate_scenario(spec: &ScenarioSpec, seed: u64) -> Result<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut sc = tables23();
    if spec.random_ue {
        let (p, v) = random_ue(&mut rng);
        sc.ue_pos = p;
        sc.ue_vel = v;
    }
    if let Some(layout) = &spec.surfaces {
        let nearest = (0..sc.n_bs())
            .min_by(|&a, &b| (sc.bs[a] - sc.ue_pos).norm().total_cmp(&(sc.bs[b] - sc.ue_pos).norm()))
            .expect("at least one BS");
        let mut out = Vec::with_capacity(layout.count);
        for i in 0..layout.count {
            let (center, bs) = match layout.deployment {
                Deployment::Dense => ((sc.ue_pos + sc.bs[nearest]) * 0.5, nearest),
                Deployment::Distributed => (sc.bs[i % sc.n_bs()], i % sc.n_bs()),
            };
            out.push(place_surface(&mut rng, layout, &sc, center, bs, &format!("surface {i} placement"))?);
        }
        sc.scatterers = out;
    }
    sc.validate()?;
    Ok(sc)
}

/// Swaps every surface's kind, keeping positions and orientation.
pub fn with_surface_kind(sc: &Scenario, kind: SurfaceKind) -> Scenario {
    let mut out = sc.clone();
    for s in &mut out.scatterers {
        if let Some(surf) = &mut s.surface {
            surf.kind = kind;
        }
    }
    out
}

/// Root mean squared Euclidean error.
pub fn rmse(truth: &Vec3, estimates: &[Vec3]) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::InvalidArgument("rmse of an empty estimate list".into()));
    }
    Ok((estimates.iter().map(|e| (e - truth).norm_squared()).sum::<f64>() / estimates.len() as f64).sqrt())
}

fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

fn draw(l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> DVector<f64> {
    let z = DVector::from_fn(l.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
    l * z
}

/// Where the stage-2 path measurements come from.
///
/// `Fresh` draws a second, independent snapshot, which is what the
/// block-diagonal stage-2 weighting assumes. `Reused` feeds back the angles
/// stage 1 already consumed, so the prior and the AOA/AOD rows share noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Snapshot {
    #[default]
    Fresh,
    Reused,
}

impl FromStr for Stage2Snapshot {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fresh" => Ok(Self::Fresh),
            "reused" => Ok(Self::Reused),
            _ => Err(Error::InvalidArgument(format!("unknown stage-2 snapshot `{s}` (fresh, reused)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub trials: usize,
    pub seed: u64,
    pub mode: Mode,
    pub iters: usize,
    /// Only read by the stage-2 runner.
    pub snapshot: Stage2Snapshot,
}

impl McConfig {
    pub fn new(trials: usize, seed: u64) -> Self {
        Self { trials, seed, mode: Mode::Hybrid, iters: DEFAULT_ITERATIONS, snapshot: Stage2Snapshot::Fresh }
    }

    fn check(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::InvalidArgument("at least one trial is required".into()));
        }
        Ok(())
    }
}

/// RMSEs over the successful trials and the matching bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RmseReport {
    pub rmse_u: f64,
    pub rmse_u_dot: Option<f64>,
    /// Per scatterer, measurement path order.
    pub rmse_s: Vec<f64>,
    /// Over all scatterers.
    pub rmse_s_all: f64,
    pub crlb_u: f64,
    pub crlb_u_dot: Option<f64>,
    pub crlb_s: Vec<f64>,
    pub crlb_s_all: f64,
    pub trials: usize,
    pub failures: usize,
    pub seed: u64,
}

impl RmseReport {
    pub fn failure_exceeded(&self) -> bool {
        self.failures as f64 > FAILURE_THRESHOLD * self.trials as f64
    }
}

struct TrialErr {
    u: f64,
    u_dot: f64,
    s: Vec<f64>,
}

/// One noisy realization of `m0` under `noise`, drawn from trial 0 of `seed`.
pub fn noisy_measurements(m0: &MeasurementSet, noise: &NoiseModel, seed: u64) -> Result<MeasurementSet> {
    let l = cholesky_lower(&noise.q())?;
    noisy(m0, &l, &mut trial_rng(seed, 0))
}

fn noisy(m0: &MeasurementSet, l: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> Result<MeasurementSet> {
    let dm = draw(l, rng);
    m0.with_stacked(&(m0.stacked() + dm))
}

fn finish(errs: Vec<Option<TrialErr>>, crlb: &Crlb, cfg: &McConfig, n_paths: usize) -> RmseReport {
    let ok: Vec<&TrialErr> = errs.iter().flatten().collect();
    let n = ok.len().max(1) as f64;
    let mean_sqrt = |f: &dyn Fn(&TrialErr) -> f64| (ok.iter().map(|e| f(e)).sum::<f64>() / n).sqrt();
    let rmse_s: Vec<f64> = (0..n_paths).map(|p| mean_sqrt(&|e: &TrialErr| e.s[p])).collect();
    let rmse_s_all =
        if n_paths == 0 { 0.0 } else { (rmse_s.iter().map(|r| r * r).sum::<f64>() / n_paths as f64).sqrt() };
    RmseReport {
        rmse_u: mean_sqrt(&|e: &TrialErr| e.u),
        rmse_u_dot: (cfg.mode == Mode::Hybrid).then(|| mean_sqrt(&|e: &TrialErr| e.u_dot)),
        rmse_s,
        rmse_s_all,
        crlb_u: crlb.u(),
        crlb_u_dot: crlb.u_dot(),
        crlb_s: (0..n_paths).map(|p| crlb.s(p)).collect(),
        crlb_s_all: crlb.s_mean(),
        trials: cfg.trials,
        failures: errs.iter().filter(|e| e.is_none()).count(),
        seed: cfg.seed,
    }
}

/// Stage-1 Monte Carlo with `Δm ~ N(0, Q)`.
pub fn run_monte_carlo(sc: &Scenario, noise: &NoiseModel, cfg: &McConfig) -> Result<RmseReport> {
    cfg.check()?;
    let q = noise.q();
    let m0 = forward_measurements(sc, false)?.with_cov(q.clone())?;
    let crlb = crlb_stage1(sc, &q, cfg.mode)?;
    let l = cholesky_lower(&q)?;
    let truth: Vec<Vec3> = m0.scatterer_ids.iter().map(|&i| sc.scatterers[i].pos).collect();
    let errs: Vec<Option<TrialErr>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let m = noisy(&m0, &l, &mut rng).ok()?;
            let est = stage1_solve(&m, &sc.bs, cfg.mode, cfg.iters).ok()?;
            Some(TrialErr {
                u: (est.u - sc.ue_pos).norm_squared(),
                u_dot: est.u_dot.map_or(0.0, |v| (v - sc.ue_vel).norm_squared()),
                s: est.s.iter().zip(&truth).map(|(e, t)| (e - t).norm_squared()).collect(),
            })
        })
        .collect();
    Ok(finish(errs, &crlb, cfg, truth.len()))
}

/// Scatterer RMSE with the UE position known, and its bound.
pub fn run_known_ue(sc: &Scenario, noise: &NoiseModel, cfg: &McConfig) -> Result<(f64, f64, usize)> {
    cfg.check()?;
    let q = noise.q();
    let m0 = forward_measurements(sc, false)?.with_cov(q.clone())?;
    let bound = crlb_known_ue(sc, &q)?;
    let n = bound.len().max(1) as f64;
    let crlb = (bound.iter().map(|b| b.trace()).sum::<f64>() / n).sqrt();
    let l = cholesky_lower(&q)?;
    let truth: Vec<Vec3> = m0.scatterer_ids.iter().map(|&i| sc.scatterers[i].pos).collect();
    let errs: Vec<Option<f64>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let m = noisy(&m0, &l, &mut rng).ok()?;
            let out = locate_scatterers_known_ue(&m, &sc.bs, &sc.ue_pos, cfg.iters).ok()?;
            Some(out.iter().zip(&truth).map(|((e, _), t)| (e - t).norm_squared()).sum::<f64>() / n)
        })
        .collect();
    let ok: Vec<f64> = errs.iter().flatten().copied().collect();
    let rmse = (ok.iter().sum::<f64>() / ok.len().max(1) as f64).sqrt();
    Ok((rmse, crlb, errs.len() - ok.len()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantReport {
    pub variant: Stage2Variant,
    pub rmse_s: f64,
    pub rmse_speed: f64,
    pub crlb_s: f64,
    pub crlb_speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Report {
    pub stage1_rmse_s: f64,
    pub stage1_crlb_s: f64,
    pub variants: Vec<VariantReport>,
    pub trials: usize,
    pub failures: usize,
    pub seed: u64,
}

impl Stage2Report {
    pub fn variant(&self, v: Stage2Variant) -> Option<&VariantReport> {
        self.variants.iter().find(|r| r.variant == v)
    }
}

fn stage2_input(
    m: &MeasurementSet,
    ranges: [f64; 2],
    p: usize,
    bs: Vec3,
    prior: Vec3,
    crlb: &Crlb,
    var: &[f64; 6],
) -> NlosRefinement {
    let a = m.nlos_angles(p);
    NlosRefinement {
        m: [ranges[0], ranges[1], a[0], a[1], a[2], a[3]],
        bs,
        prior,
        prior_cov: crlb.s_block(p),
        q: Matrix6::from_diagonal(&Vector6::from_column_slice(var)),
    }
}

/// Stage 1 followed by each stage-2 variant for scenario scatterer `target`.
///
/// The prior covariance is the stage-1 CRLB block; the scatterer's speed is
/// measured along the UE velocity direction. `cfg.snapshot` picks whether the
/// path angles are redrawn for stage 2.
pub fn run_stage2(sc: &Scenario, noise: &NoiseModel, target: usize, cfg: &McConfig) -> Result<Stage2Report> {
    cfg.check()?;
    let q = noise.q();
    let m0 = forward_measurements(sc, true)?.with_cov(q.clone())?;
    let p = m0
        .scatterer_ids
        .iter()
        .position(|&i| i == target)
        .ok_or_else(|| Error::InvalidArgument(format!("scatterer {target} is not in the scenario")))?;
    let crlb = crlb_stage1(sc, &q, Mode::Hybrid)?;
    let l = cholesky_lower(&q)?;
    let var = noise.path_var[p];
    let ranges0 = m0.nlos_ranges.as_ref().expect("requested")[p];
    let scat = &sc.scatterers[target];
    let bs = sc.bs[scat.bs];
    let n_v = velocity_direction(&sc.ue_vel)?;
    let speed = scat.vel.dot(&n_v);

    let truth_nr = stage2_input(&m0, ranges0, p, bs, scat.pos, &crlb, &var);
    let truth_ctx = Stage2Context::from_ue(sc.ue_pos, sc.ue_vel, &sc.bs[0])?;
    let bounds: Vec<(f64, f64)> = Stage2Variant::ALL
        .iter()
        .map(|&v| {
            let c = crlb_stage2(&truth_nr, &truth_ctx, v, &scat.pos, &(n_v * speed))?;
            Ok(((c[(0, 0)] + c[(1, 1)] + c[(2, 2)]).sqrt(), c[(3, 3)].sqrt()))
        })
        .collect::<Result<_>>()?;

    let errs: Vec<Option<(f64, Vec<(f64, f64)>)>> = (0..cfg.trials)
        .into_par_iter()
        .map(|t| {
            let mut rng = trial_rng(cfg.seed, t);
            let m = noisy(&m0, &l, &mut rng).ok()?;
            let ranges = [
                ranges0[0] + var[0].sqrt() * rng.sample::<f64, _>(StandardNormal),
                ranges0[1] + var[1].sqrt() * rng.sample::<f64, _>(StandardNormal),
            ];
            let est = stage1_solve(&m, &sc.bs, Mode::Hybrid, cfg.iters).ok()?;
            let ctx = Stage2Context::from_ue(est.u, est.u_dot?, &sc.bs[0]).ok()?;
            let m2 = match cfg.snapshot {
                Stage2Snapshot::Fresh => noisy(&m0, &l, &mut rng).ok()?,
                Stage2Snapshot::Reused => m.clone(),
            };
            let nr = stage2_input(&m2, ranges, p, bs, est.s[p], &crlb, &var);
            let per: Option<Vec<(f64, f64)>> = Stage2Variant::ALL
                .iter()
                .map(|&v| {
                    let r = stage2_solve(&nr, &ctx, v, cfg.iters).ok()?;
                    Some(((r.s - scat.pos).norm_squared(), (r.speed - speed).powi(2)))
                })
                .collect();
            Some(((est.s[p] - scat.pos).norm_squared(), per?))
        })
        .collect();
    let ok: Vec<&(f64, Vec<(f64, f64)>)> = errs.iter().flatten().collect();
    let n = ok.len().max(1) as f64;
    let variants = Stage2Variant::ALL
        .iter()
        .enumerate()
        .map(|(k, &v)| VariantReport {
            variant: v,
            rmse_s: (ok.iter().map(|e| e.1[k].0).sum::<f64>() / n).sqrt(),
            rmse_speed: (ok.iter().map(|e| e.1[k].1).sum::<f64>() / n).sqrt(),
            crlb_s: bounds[k].0,
            crlb_speed: bounds[k].1,
        })
        .collect();
    Ok(Stage2Report {
        stage1_rmse_s: (ok.iter().map(|e| e.0).sum::<f64>() / n).sqrt(),
        stage1_crlb_s: crlb.s(p),
        variants,
        trials: cfg.trials,
        failures: errs.len() - ok.len(),
        seed: cfg.seed,
    })
}

/// The stage-2 study world: the tabulated scenario plus one scatterer at
/// (240, 600, −19) m served by BS 5, moving at 5 m/s along the UE velocity.
pub fn stage2_scenario() -> Scenario {
    let mut sc = tables23();
    let n_v = sc.ue_vel.normalize();
    sc.scatterers.push(Scatterer { pos: Vec3::new(240.0, 600.0, -19.0), vel: n_v * 5.0, bs: 4, surface: None });
    sc
}

pub const STAGE2_TARGET: usize = 18;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Wls1RhoSweep,
    NlosNoiseSweep,
    Stage2Variants,
    RisCount,
    RisSize,
    RcsAngle,
    RcsSize,
}

impl Preset {
    pub const ALL: [Preset; 7] = [
        Preset::Wls1RhoSweep,
        Preset::NlosNoiseSweep,
        Preset::Stage2Variants,
        Preset::RisCount,
        Preset::RisSize,
        Preset::RcsAngle,
        Preset::RcsSize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Wls1RhoSweep => "wls1_rho_sweep",
            Preset::NlosNoiseSweep => "nlos_noise_sweep",
            Preset::Stage2Variants => "stage2_variants",
            Preset::RisCount => "ris_count",
            Preset::RisSize => "ris_size",
            Preset::RcsAngle => "rcs_angle",
            Preset::RcsSize => "rcs_size",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Preset::ALL.iter().map(|p| p.name()).collect();
            Error::InvalidArgument(format!("unknown preset '{s}' (one of {})", names.join(", ")))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub trials: usize,
    pub seed: u64,
    pub rho: Vec<f64>,
    pub q: Vec<f64>,
    pub sizes: Vec<usize>,
    pub max_surfaces: usize,
    pub surface_size: usize,
    pub deployments: Vec<Deployment>,
    pub policies: Vec<PhasePolicy>,
    /// Independent UE positions; 1 keeps the reference UE state.
    pub ue_draws: usize,
    pub theta_t_deg: Vec<f64>,
    pub snapshot: Stage2Snapshot,
    pub paper_scale: bool,
}

impl ExperimentSpec {
    /// Desk-scale defaults.
    pub fn new(preset: Preset) -> Self {
        Self {
            preset,
            trials: if preset == Preset::Stage2Variants { 500 } else { 200 },
            seed: 0,
            rho: vec![0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0],
            q: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            sizes: vec![10, 20, 30, 40],
            max_surfaces: 18,
            surface_size: 40,
            deployments: vec![Deployment::Dense, Deployment::Distributed],
            policies: vec![PhasePolicy::OptimalContinuous, PhasePolicy::Discrete1Bit],
            ue_draws: 1,
            theta_t_deg: vec![0.0, 45.0],
            snapshot: Stage2Snapshot::Fresh,
            paper_scale: false,
        }
    }

    /// Trial counts and grids of the original study.
    pub fn paper_scale(mut self) -> Self {
        self.paper_scale = true;
        self.trials = if self.preset == Preset::Stage2Variants { 5000 } else { 1000 };
        if self.preset == Preset::Wls1RhoSweep {
            self.ue_draws = 1000;
        }
        self.sizes = vec![10, 20, 30, 40, 50, 60];
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: &str| Err(Error::InvalidArgument(format!("{field}: {reason}")));
        if self.trials == 0 {
            return bad("trials", "must be at least 1");
        }
        if self.ue_draws == 0 {
            return bad("ue_draws", "must be at least 1");
        }
        let grid_empty = match self.preset {
            Preset::Wls1RhoSweep | Preset::Stage2Variants => self.rho.is_empty(),
            Preset::NlosNoiseSweep => self.q.is_empty(),
            Preset::RisCount => self.deployments.is_empty() || self.policies.is_empty(),
            Preset::RisSize => self.sizes.is_empty() || self.deployments.is_empty() || self.policies.is_empty(),
            Preset::RcsAngle => self.theta_t_deg.is_empty(),
            Preset::RcsSize => self.sizes.is_empty(),
        };
        if grid_empty {
            return bad("grid", "sweep grid is empty");
        }
        if self.rho.iter().chain(&self.q).any(|x| !(*x > 0.0)) {
            return bad("grid", "noise factors must be positive");
        }
        Ok(())
    }

    fn mc(&self, mode: Mode) -> McConfig {
        McConfig { mode, snapshot: self.snapshot, ..McConfig::new(self.trials, self.seed) }
    }
}

/// One line of a sweep CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep_var: f64,
    pub series: String,
    pub rmse: f64,
    pub crlb: f64,
    pub trials: usize,
    pub failures: usize,
}

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut w: W) -> Result<()> {
    writeln!(w, "sweep_var,series,rmse,crlb,trials,failures")?;
    for r in rows {
        writeln!(w, "{},{},{},{},{},{}", r.sweep_var, r.series, r.rmse, r.crlb, r.trials, r.failures)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PresetOutcome {
    pub files: Vec<PathBuf>,
    pub rows: Vec<SweepRow>,
    pub failure_exceeded: bool,
}

fn push_report(rows: &mut Vec<SweepRow>, x: f64, tag: &str, r: &RmseReport, with_s: bool) {
    let mut add = |what: &str, rmse: f64, crlb: f64| {
        rows.push(SweepRow {
            sweep_var: x,
            series: format!("{what}_{tag}"),
            rmse,
            crlb,
            trials: r.trials,
            failures: r.failures,
        })
    };
    add("u", r.rmse_u, r.crlb_u);
    if let (Some(a), Some(b)) = (r.rmse_u_dot, r.crlb_u_dot) {
        add("u_dot", a, b);
    }
    if with_s && !r.rmse_s.is_empty() {
        add("s", r.rmse_s_all, r.crlb_s_all);
    }
}

/// Pools reports from several UE draws: root of mean squares.
fn pool(reports: &[RmseReport]) -> RmseReport {
    let k = reports.len() as f64;
    let rms = |f: &dyn Fn(&RmseReport) -> f64| (reports.iter().map(|r| f(r).powi(2)).sum::<f64>() / k).sqrt();
    let opt = |f: &dyn Fn(&RmseReport) -> Option<f64>| {
        reports.iter().map(f).collect::<Option<Vec<f64>>>().map(|v| (v.iter().map(|x| x * x).sum::<f64>() / k).sqrt())
    };
    let first = &reports[0];
    RmseReport {
        rmse_u: rms(&|r| r.rmse_u),
        rmse_u_dot: opt(&|r| r.rmse_u_dot),
        rmse_s: first.rmse_s.clone(),
        rmse_s_all: rms(&|r| r.rmse_s_all),
        crlb_u: rms(&|r| r.crlb_u),
        crlb_u_dot: opt(&|r| r.crlb_u_dot),
        crlb_s: first.crlb_s.clone(),
        crlb_s_all: rms(&|r| r.crlb_s_all),
        trials: reports.iter().map(|r| r.trials).sum(),
        failures: reports.iter().map(|r| r.failures).sum(),
        seed: first.seed,
    }
}

fn synthetic(sc: &Scenario, rho: f64, q: f64) -> Result<NoiseModel> {
    assemble_q_synthetic(sc.n_bs(), sc.n_scatterers(), &SyntheticNoise::from_rho(rho, q))
}

fn rho_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    let worlds: Vec<Scenario> = (0..spec.ue_draws)
        .map(|d| {
            if spec.ue_draws == 1 {
                Ok(tables23())
            } else {
                generate_scenario(&ScenarioSpec { random_ue: true, surfaces: None }, spec.seed.wrapping_add(d as u64))
            }
        })
        .collect::<Result<_>>()?;
    for &rho in &spec.rho {
        for k in [0usize, 6, 12, 18] {
            let ids: Vec<usize> = (0..k).collect();
            let reps: Vec<RmseReport> = worlds
                .iter()
                .map(|w| {
                    let sc = w.with_scatterers(&ids);
                    run_monte_carlo(&sc, &synthetic(&sc, rho, 0.1)?, &spec.mc(Mode::Hybrid))
                })
                .collect::<Result<_>>()?;
            push_report(&mut rows, rho, &format!("sca{k}"), &pool(&reps), true);
        }
        let reps: Vec<RmseReport> = worlds
            .iter()
            .map(|sc| run_monte_carlo(sc, &synthetic(sc, rho, 0.1)?, &spec.mc(Mode::NlosOnly)))
            .collect::<Result<_>>()?;
        push_report(&mut rows, rho, "nlos_only", &pool(&reps), true);
        let mut sq = (0.0, 0.0, 0usize);
        for sc in &worlds {
            let (r, c, f) = run_known_ue(sc, &synthetic(sc, rho, 0.1)?, &spec.mc(Mode::NlosOnly))?;
            sq = (sq.0 + r * r, sq.1 + c * c, sq.2 + f);
        }
        let k = worlds.len() as f64;
        rows.push(SweepRow {
            sweep_var: rho,
            series: "s_floor".into(),
            rmse: (sq.0 / k).sqrt(),
            crlb: (sq.1 / k).sqrt(),
            trials: spec.trials * worlds.len(),
            failures: sq.2,
        });
    }
    Ok(rows)
}

/// The q-sweep configurations: name, scatterer subset and mode.
pub fn nlos_noise_configs() -> Vec<(&'static str, Vec<usize>, Mode)> {
    vec![
        ("los_only", vec![], Mode::Hybrid),
        ("sca18", (0..18).collect(), Mode::Hybrid),
        // three scatterers on BS 1 alone cannot fix the UE without LOS help
        ("sca3_one_bs", vec![0, 6, 12], Mode::Hybrid),
        ("nlos_only", (0..18).collect(), Mode::NlosOnly),
    ]
}

fn q_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let base = tables23();
    let mut rows = Vec::new();
    for &q in &spec.q {
        for (name, ids, mode) in nlos_noise_configs() {
            let sc = base.with_scatterers(&ids);
            let r = run_monte_carlo(&sc, &synthetic(&sc, 1.0, q)?, &spec.mc(mode))?;
            push_report(&mut rows, q, name, &r, true);
        }
    }
    Ok(rows)
}

fn stage2_sweep(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let sc = stage2_scenario();
    let mut rows = Vec::new();
    for &rho in &spec.rho {
        let r = run_stage2(&sc, &synthetic(&sc, rho, 0.1)?, STAGE2_TARGET, &spec.mc(Mode::Hybrid))?;
        let mut add = |series: String, rmse: f64, crlb: f64| {
            rows.push(SweepRow { sweep_var: rho, series, rmse, crlb, trials: r.trials, failures: r.failures })
        };
        add("s_stage1".into(), r.stage1_rmse_s, r.stage1_crlb_s);
        for v in &r.variants {
            add(format!("s_{}", v.variant.name()), v.rmse_s, v.crlb_s);
            add(format!("speed_{}", v.variant.name()), v.rmse_speed, v.crlb_speed);
        }
    }
    Ok(rows)
}

fn physics(sc: &Scenario, policy: PhasePolicy, seed: u64) -> Result<NoiseModel> {
    assemble_q_physics(sc, &PhysicsNoise { policy, seed, ..PhysicsNoise::default() })
}

fn policy_tag(p: PhasePolicy) -> &'static str {
    match p {
        PhasePolicy::Identical => "identical",
        PhasePolicy::OptimalContinuous => "con",
        PhasePolicy::Discrete1Bit => "disc",
        PhasePolicy::Random => "random",
    }
}

/// Surfaces for one deployment, in a seeded random order.
pub fn surface_world(deployment: Deployment, count: usize, size: usize, seed: u64) -> Result<Scenario> {
    let layout = SurfaceLayout::new(count, deployment, size);
    let mut sc = generate_scenario(&ScenarioSpec { random_ue: false, surfaces: Some(layout) }, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    sc.scatterers.shuffle(&mut rng);
    Ok(sc)
}

fn ris_count(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &dep in &spec.deployments {
        let world = surface_world(dep, spec.max_surfaces, spec.surface_size, spec.seed)?;
        for k in 0..=spec.max_surfaces {
            let ids: Vec<usize> = (0..k).collect();
            let ris = world.with_scatterers(&ids);
            for &pol in &spec.policies {
                let r = run_monte_carlo(&ris, &physics(&ris, pol, spec.seed)?, &spec.mc(Mode::Hybrid))?;
                push_report(&mut rows, k as f64, &format!("ris_{}_{dep}", policy_tag(pol)), &r, false);
            }
            let plates = with_surface_kind(&ris, SurfaceKind::PecPlate);
            let r = run_monte_carlo(
                &plates,
                &physics(&plates, PhasePolicy::Identical, spec.seed)?,
                &spec.mc(Mode::Hybrid),
            )?;
            push_report(&mut rows, k as f64, &format!("sca_{dep}"), &r, false);
        }
    }
    Ok(rows)
}

fn resized(sc: &Scenario, size: usize) -> Scenario {
    let mut out = sc.clone();
    for s in &mut out.scatterers {
        if let Some(surf) = &mut s.surface {
            surf.rows = size;
            surf.cols = size;
        }
    }
    out
}

fn ris_size(spec: &ExperimentSpec) -> Result<Vec<SweepRow>> {
    let largest = *spec.sizes.iter().max().expect("validated");
    let mut rows = Vec::new();
    for &dep in &spec.deployments {
        let world = surface_world(dep, spec.max_surfaces, largest, spec.seed)?;
        for &k in &spec.sizes {
            let sc = resized(&world, k);
            for &pol in &spec.policies {
                let r = run_monte_carlo(&sc, &physics(&sc, pol, spec.seed)?, &spec.mc(Mode::Hybrid))?;
                push_report(&mut rows, k as f64, &format!("ris_{}_{dep}", policy_tag(pol)), &r, true);
            }
        }
    }
    Ok(rows)
}

fn write_file(path: &Path, f: impl FnOnce(&mut std::io::BufWriter<std::fs::File>) -> Result<()>) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    f(&mut w)?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    preset: &'a str,
    seed: u64,
    version: &'a str,
    spec: &'a ExperimentSpec,
    files: Vec<String>,
}

/// Runs a preset and writes `<preset>*.csv` plus `<preset>.json` into `out`.
pub fn run_preset(spec: &ExperimentSpec, out: &Path) -> Result<PresetOutcome> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let name = spec.preset.name();
    let mut files = Vec::new();
    let mut rows = Vec::new();
    match spec.preset {
        Preset::RcsAngle => {
            for &t in &spec.theta_t_deg {
                let sweep = AngleSweep { theta_t_deg: t, seed: spec.seed, ..AngleSweep::default() };
                let path = out.join(format!("{name}_t{t}.csv"));
                let data = sweep.run()?;
                write_file(&path, |w| write_rcs_csv(&data, "theta_r_deg", w))?;
                files.push(path);
            }
        }
        Preset::RcsSize => {
            let sweep = SizeSweep { ks: spec.sizes.clone(), ..SizeSweep::default() };
            let path = out.join(format!("{name}.csv"));
            let data = sweep.run()?;
            write_file(&path, |w| write_rcs_csv(&data, "k", w))?;
            files.push(path);
        }
        _ => {
            rows = match spec.preset {
                Preset::Wls1RhoSweep => rho_sweep(spec)?,
                Preset::NlosNoiseSweep => q_sweep(spec)?,
                Preset::Stage2Variants => stage2_sweep(spec)?,
                Preset::RisCount => ris_count(spec)?,
                Preset::RisSize => ris_size(spec)?,
                Preset::RcsAngle | Preset::RcsSize => unreachable!(),
            };
            let path = out.join(format!("{name}.csv"));
            write_file(&path, |w| write_sweep_csv(&rows, w))?;
            files.push(path);
        }
    }
    let failure_exceeded = rows.iter().any(|r| r.failures as f64 > FAILURE_THRESHOLD * r.trials as f64);
    let manifest = Manifest {
        preset: name,
        seed: spec.seed,
        version: env!("CARGO_PKG_VERSION"),
        spec,
        files: files.iter().filter_map(|p| p.file_name()).map(|f| f.to_string_lossy().into_owned()).collect(),
    };
    let path = out.join(format!("{name}.json"));
    write_file(&path, |w| {
        serde_json::to_writer_pretty(&mut *w, &manifest).map_err(|e| Error::Io(e.to_string()))?;
        writeln!(w)?;
        Ok(())
    })?;
    files.push(path);
    Ok(PresetOutcome { files, rows, failure_exceeded })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tables23;

    #[test]
    fn rmse_cases() {
        let t = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rmse(&t, &[t, t]).unwrap(), 0.0);
        assert_eq!(rmse(&t, &[t + Vec3::new(3.0, 4.0, 0.0)]).unwrap(), 5.0);
        assert!(rmse(&t, &[]).is_err());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let est: Vec<Vec3> = (0..10).map(|_| t + Vec3::from_fn(|_, _| rng.random_range(-1.0..1.0))).collect();
        let mut acc = 0.0;
        for e in &est {
            let d = e - t;
            acc += d.x * d.x + d.y * d.y + d.z * d.z;
        }
        assert!((rmse(&t, &est).unwrap() - (acc / 10.0).sqrt()).abs() < 1e-14);
    }

    #[test]
    fn generated_scenarios_are_deterministic_and_valid() {
        for dep in [Deployment::Dense, Deployment::Distributed] {
            let spec = ScenarioSpec { random_ue: true, surfaces: Some(SurfaceLayout::new(18, dep, 40)) };
            let a = generate_scenario(&spec, 11).unwrap();
            let b = generate_scenario(&spec, 11).unwrap();
            assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
            assert_eq!(a.n_scatterers(), 18);
            for (x, lo_hi) in a.ue_pos.iter().zip(UE_REGION) {
                assert!(lo_hi[0] <= *x && *x <= lo_hi[1]);
            }
            assert!(a.ue_vel.norm() >= 1.0);
            if dep == Deployment::Distributed {
                for (i, s) in a.scatterers.iter().enumerate() {
                    assert_eq!(s.bs, i % 6);
                    assert!((s.pos - a.bs[s.bs]).norm() <= 30.0);
                }
            }
            let c = generate_scenario(&spec, 12).unwrap();
            assert_ne!(a.ue_pos, c.ue_pos);
        }
    }

    #[test]
    fn impossible_placement_is_reported() {
        let mut layout = SurfaceLayout::new(1, Deployment::Dense, 400);
        layout.radius = 1.0;
        let spec = ScenarioSpec { random_ue: false, surfaces: Some(layout) };
        assert!(matches!(generate_scenario(&spec, 0), Err(Error::Unsatisfiable { .. })));
    }

    #[test]
    fn zero_noise_gives_zero_rmse() {
        let sc = tables23().with_scatterers(&[0, 1, 2]);
        let noise = synthetic(&sc, 1e-9, 1.0).unwrap();
        let r = run_monte_carlo(&sc, &noise, &McConfig::new(8, 3)).unwrap();
        assert!(r.rmse_u < 1e-6 && r.rmse_s_all < 1e-6);
        assert_eq!(r.failures, 0);
    }

    #[test]
    fn monte_carlo_is_reproducible_and_worker_independent() {
        let sc = tables23().with_scatterers(&[0, 1, 2, 3]);
        let noise = synthetic(&sc, 1.0, 0.1).unwrap();
        let cfg = McConfig::new(16, 5);
        let a = run_monte_carlo(&sc, &noise, &cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| run_monte_carlo(&sc, &noise, &cfg).unwrap());
        assert_eq!(a, b);
    }

    #[test]
    fn stage2_scenario_is_noise_free_exact() {
        let sc = stage2_scenario();
        let noise = synthetic(&sc, 1e-9, 0.1).unwrap();
        let r = run_stage2(&sc, &noise, STAGE2_TARGET, &McConfig::new(4, 0)).unwrap();
        for v in &r.variants {
            assert!(v.rmse_s < 1e-6 && v.rmse_speed < 1e-6, "{v:?}");
        }
    }

    #[test]
    fn preset_names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("fig9".parse::<Preset>().is_err());
        let mut s = ExperimentSpec::new(Preset::NlosNoiseSweep);
        s.q.clear();
        assert!(s.validate().is_err());
    }

    #[test]
    fn csv_layout() {
        let rows =
            vec![SweepRow { sweep_var: 0.5, series: "u_sca6".into(), rmse: 1.25, crlb: 1.0, trials: 10, failures: 0 }];
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "sweep_var,series,rmse,crlb,trials,failures\n0.5,u_sca6,1.25,1,10,0\n"
        );
    }
}
