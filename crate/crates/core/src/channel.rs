//! Path gains, response vectors, channel-parameter Fisher information and
//! the measurement covariance Q.

use std::f64::consts::PI;

use nalgebra::{DMatrix, Matrix6};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angles_between, basis_vectors, Angles, Scenario, Vec3};
use crate::linalg::{spd_inverse, FIM_CONDITION_GUARD};
use crate::scattering::{
    check_grid, farfield_phase, make_phase_profile, radiation_pattern, scatterer_rcs, IncidenceGeometry, PhasePolicy,
    PhaseProfile, SurfaceArray, SurfaceKind,
};

pub const PARAM_NAMES: [&str; 6] = ["phi_r", "theta_r", "phi_t", "theta_t", "tau", "nu"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GainKind {
    Los,
    Scatterer,
    RisExact,
    RisFarfield,
    General,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathGain {
    pub g: Complex64,
    pub kind: GainKind,
    pub near_field: bool,
}

fn positive(x: f64, what: &str) -> Result<()> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{what} must be positive, got {x}")))
    }
}

pub fn los_gain(d: f64, gain: f64, wavelength: f64) -> Result<PathGain> {
    positive(d, "LOS distance")?;
    let g = Complex64::from_polar(wavelength * gain.sqrt() / (4.0 * PI * d), -2.0 * PI * d / wavelength);
    Ok(PathGain { g, kind: GainKind::Los, near_field: false })
}

/// General single-bounce model, valid for any RCS σ.
pub fn scatterer_gain(d_r: f64, d_t: f64, sigma: f64, gain: f64, wavelength: f64) -> Result<PathGain> {
    positive(d_r, "d_r")?;
    positive(d_t, "d_t")?;
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("RCS must be nonnegative, got {sigma}")));
    }
    let mag = wavelength * (gain * sigma).sqrt() / ((4.0 * PI).powf(1.5) * d_r * d_t);
    let g = Complex64::from_polar(mag, -2.0 * PI * (d_r + d_t) / wavelength);
    Ok(PathGain { g, kind: GainKind::Scatterer, near_field: false })
}

/// Scattering gain of a single RIS element, 4π d_x d_y / λ².
pub fn ris_element_gain(surf: &SurfaceArray, wavelength: f64) -> f64 {
    4.0 * PI * surf.dx * surf.dy / (wavelength * wavelength)
}

/// Element-by-element RIS path gain with exact distances and patterns.
pub fn ris_gain_exact(
    surf: &SurfaceArray,
    ph: &PhaseProfile,
    bs: &Vec3,
    ue: &Vec3,
    gain: f64,
    wavelength: f64,
) -> Result<PathGain> {
    check_grid(surf, ph)?;
    let b = surf.to_local(bs);
    let u = surf.to_local(ue);
    let kappa = 2.0 * PI / wavelength;
    let pre = wavelength * (gain * ris_element_gain(surf, wavelength) * surf.dx * surf.dy / (4.0 * PI).powi(3)).sqrt();
    let mut sum = Complex64::new(0.0, 0.0);
    for (p, xi) in surf.elements_local().iter().zip(&ph.xi) {
        let ar = angles_between(p, &b)?;
        let at = angles_between(p, &u)?;
        let dr = (b - p).norm();
        let dt = (u - p).norm();
        let f = (radiation_pattern(ar, surf.pattern_exponent) * radiation_pattern(at, surf.pattern_exponent)).sqrt();
        sum += Complex64::from_polar(f * surf.reflect_coeff / (dr * dt), -xi - kappa * (dr + dt));
    }
    let near_field = b.norm().min(u.norm()) <= surf.far_field_distance(wavelength);
    Ok(PathGain { g: sum * pre, kind: GainKind::RisExact, near_field })
}

/// Far-field RIS path gain: constant patterns and linear phase across the array.
pub fn ris_gain_farfield(
    surf: &SurfaceArray,
    ph: &PhaseProfile,
    geo: &IncidenceGeometry,
    gain: f64,
    wavelength: f64,
) -> Result<PathGain> {
    check_grid(surf, ph)?;
    positive(geo.d_r, "d_r")?;
    positive(geo.d_t, "d_t")?;
    let f = radiation_pattern(geo.to_bs, surf.pattern_exponent) * radiation_pattern(geo.to_ue, surf.pattern_exponent);
    let pre = wavelength * (gain * ris_element_gain(surf, wavelength) * f * surf.dx * surf.dy).sqrt()
        / ((4.0 * PI).powf(1.5) * geo.d_r * geo.d_t);
    let sum: Complex64 = surf
        .elements_local()
        .iter()
        .zip(&ph.xi)
        .map(|(p, xi)| Complex64::from_polar(surf.reflect_coeff, -farfield_phase(p, geo, wavelength) - xi))
        .sum();
    let reference = Complex64::from_polar(1.0, -2.0 * PI * (geo.d_r + geo.d_t) / wavelength);
    let near_field = geo.d_r.min(geo.d_t) <= surf.far_field_distance(wavelength);
    Ok(PathGain { g: sum * pre * reference, kind: GainKind::RisFarfield, near_field })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayConfig {
    pub positions: Vec<Vec3>,
    pub spacing: f64,
}

impl ArrayConfig {
    /// Horizontal uniform planar array centred on the origin.
    pub fn upa(rows: usize, cols: usize, spacing: f64) -> Self {
        let mut positions = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                positions.push(Vec3::new(
                    (c as f64 - (cols as f64 - 1.0) / 2.0) * spacing,
                    (r as f64 - (rows as f64 - 1.0) / 2.0) * spacing,
                    0.0,
                ));
            }
        }
        Self { positions, spacing }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WaveformConfig {
    pub subcarriers: usize,
    pub symbols: usize,
    pub delta_f: f64,
    pub t_sym: f64,
    pub noise_var: f64,
}

impl Default for WaveformConfig {
    fn default() -> Self {
        Self { subcarriers: 256, symbols: 256, delta_f: 120e3, t_sym: 8.3e-6, noise_var: 1.0 }
    }
}

impl WaveformConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subcarriers == 0 || self.symbols == 0 {
            return Err(Error::InvalidArgument("subcarriers and symbols must be >= 1".into()));
        }
        positive(self.delta_f, "delta_f")?;
        positive(self.t_sym, "t_sym")?;
        positive(self.noise_var, "noise_var")
    }
}

pub fn steering_vector(ac: &ArrayConfig, a: Angles, wavelength: f64) -> Vec<Complex64> {
    let kappa = 2.0 * PI / wavelength;
    let d = basis_vectors(a).d;
    ac.positions.iter().map(|p| Complex64::from_polar(1.0, -kappa * p.dot(&d))).collect()
}

/// Entries e^{+j2πΔfτh}, h = 0..H−1.
pub fn delay_vector(tau: f64, wf: &WaveformConfig) -> Vec<Complex64> {
    (0..wf.subcarriers).map(|h| Complex64::from_polar(1.0, 2.0 * PI * wf.delta_f * tau * h as f64)).collect()
}

/// Entries e^{+j2πT_sym νr}, r = 0..R−1.
pub fn doppler_vector(nu: f64, wf: &WaveformConfig) -> Vec<Complex64> {
    (0..wf.symbols).map(|r| Complex64::from_polar(1.0, 2.0 * PI * wf.t_sym * nu * r as f64)).collect()
}

/// Steering vector with its azimuth and elevation derivatives.
fn steering_with_derivatives(ac: &ArrayConfig, a: Angles, wavelength: f64) -> [Vec<Complex64>; 3] {
    let kappa = 2.0 * PI / wavelength;
    let b = basis_vectors(a);
    let st = a.elevation.sin();
    let value = steering_vector(ac, a, wavelength);
    let j = Complex64::i();
    let dphi = value.iter().zip(&ac.positions).map(|(x, p)| x * j * (-kappa * st * p.dot(&b.c))).collect();
    let dtheta = value.iter().zip(&ac.positions).map(|(x, p)| x * j * (kappa * p.dot(&b.v))).collect();
    [value, dphi, dtheta]
}

fn ramp_with_derivative(n: usize, step: f64) -> [Vec<Complex64>; 2] {
    // value at parameter 0 is all-ones; Gram entries are shift invariant.
    let value = vec![Complex64::new(1.0, 0.0); n];
    let deriv = (0..n).map(|i| Complex64::new(0.0, step * i as f64)).collect();
    [value, deriv]
}

fn gram(vs: &[Vec<Complex64>]) -> DMatrix<Complex64> {
    DMatrix::from_fn(vs.len(), vs.len(), |i, j| vs[i].iter().zip(&vs[j]).map(|(a, b)| a.conj() * b).sum())
}

/// Ψ via per-factor Gram matrices of the Kronecker factors of w.
pub fn psi_kronecker(
    ac_r: &ArrayConfig,
    ac_t: &ArrayConfig,
    aoa: Angles,
    aod: Angles,
    wf: &WaveformConfig,
    wavelength: f64,
) -> Matrix6<Complex64> {
    let gr = gram(&steering_with_derivatives(ac_r, aoa, wavelength));
    let gt = gram(&steering_with_derivatives(ac_t, aod, wavelength));
    let gp = gram(&ramp_with_derivative(wf.subcarriers, 2.0 * PI * wf.delta_f));
    let gq = gram(&ramp_with_derivative(wf.symbols, 2.0 * PI * wf.t_sym));
    // Per parameter: which factor it differentiates and the derivative slot.
    let slot = |i: usize| -> [usize; 4] {
        match i {
            0 => [1, 0, 0, 0],
            1 => [2, 0, 0, 0],
            2 => [0, 1, 0, 0],
            3 => [0, 2, 0, 0],
            4 => [0, 0, 1, 0],
            _ => [0, 0, 0, 1],
        }
    };
    Matrix6::from_fn(|i, j| {
        let (a, b) = (slot(i), slot(j));
        gr[(a[0], b[0])] * gt[(a[1], b[1])] * gp[(a[2], b[2])] * gq[(a[3], b[3])]
    })
}

/// Reference Ψ from the fully materialised stacked vector. Only for small sizes.
pub fn psi_bruteforce(
    ac_r: &ArrayConfig,
    ac_t: &ArrayConfig,
    aoa: Angles,
    aod: Angles,
    tau: f64,
    nu: f64,
    wf: &WaveformConfig,
    wavelength: f64,
) -> Matrix6<Complex64> {
    let kappa = 2.0 * PI / wavelength;
    let (br, bt) = (basis_vectors(aoa), basis_vectors(aod));
    let (sr, st) = (aoa.elevation.sin(), aod.elevation.sin());
    let mut psi = Matrix6::<Complex64>::zeros();
    for pr in &ac_r.positions {
        for pt in &ac_t.positions {
            for h in 0..wf.subcarriers {
                for r in 0..wf.symbols {
                    let phase = -kappa * pr.dot(&br.d) - kappa * pt.dot(&bt.d)
                        + 2.0 * PI * wf.delta_f * tau * h as f64
                        + 2.0 * PI * wf.t_sym * nu * r as f64;
                    let w = Complex64::from_polar(1.0, phase);
                    let dphase = [
                        -kappa * sr * pr.dot(&br.c),
                        kappa * pr.dot(&br.v),
                        -kappa * st * pt.dot(&bt.c),
                        kappa * pt.dot(&bt.v),
                        2.0 * PI * wf.delta_f * h as f64,
                        2.0 * PI * wf.t_sym * r as f64,
                    ];
                    let dw: Vec<Complex64> = dphase.iter().map(|d| Complex64::i() * d * w).collect();
                    for i in 0..6 {
                        for j in 0..6 {
                            psi[(i, j)] += dw[i].conj() * dw[j];
                        }
                    }
                }
            }
        }
    }
    psi
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChannelCrlb {
    pub fim: Matrix6<f64>,
    /// Variances of (φ^r, θ^r, φ^t, θ^t, τ, ν).
    pub var: [f64; 6],
}

pub fn channel_fim(
    g_abs: f64,
    wf: &WaveformConfig,
    ac_r: &ArrayConfig,
    ac_t: &ArrayConfig,
    aoa: Angles,
    aod: Angles,
    wavelength: f64,
) -> Result<ChannelCrlb> {
    wf.validate()?;
    if !(g_abs > 0.0) {
        return Err(Error::InvalidArgument("path gain must be nonzero".into()));
    }
    let psi = psi_kronecker(ac_r, ac_t, aoa, aod, wf, wavelength);
    let scale = 2.0 * g_abs * g_abs / wf.noise_var;
    let fim = psi.map(|z| z.re * scale);
    let fim = (fim + fim.transpose()) * 0.5;
    let dyn_fim = DMatrix::from_fn(6, 6, |i, j| fim[(i, j)]);
    let inv = spd_inverse(&dyn_fim, FIM_CONDITION_GUARD, Some(&PARAM_NAMES))?;
    let var = std::array::from_fn(|i| inv[(i, i)]);
    Ok(ChannelCrlb { fim, var })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticNoise {
    /// δ_d, metres
    pub delta_d: f64,
    /// δ_a, radians
    pub delta_a: f64,
    /// NLOS angle noise relative to δ_a.
    pub q: f64,
}

impl SyntheticNoise {
    pub fn from_rho(rho: f64, q: f64) -> Self {
        Self { delta_d: 0.22 * rho, delta_a: 0.0175 * rho, q }
    }

    fn tdoa_fdoa(&self) -> [f64; 2] {
        [self.delta_d.powi(2), (0.1 * self.delta_d).powi(2)]
    }
}

/// Diagonal measurement noise for the stacked vector plus per-path
/// second-stage variances.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    /// Variances of `[los; nlos]`, in measurement order.
    pub diag: Vec<f64>,
    /// Per path (r_{n1,l}, ṙ_{n1,l}, φr, θr, φt, θt) variances.
    pub path_var: Vec<[f64; 6]>,
}

impl NoiseModel {
    pub fn q(&self) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.diag))
    }

    pub fn stage2_q(&self, path: usize) -> DMatrix<f64> {
        DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&self.path_var[path]))
    }

    pub fn scaled(&self, c: f64) -> NoiseModel {
        NoiseModel {
            diag: self.diag.iter().map(|x| x * c).collect(),
            path_var: self.path_var.iter().map(|v| v.map(|x| x * c)).collect(),
        }
    }

    fn check(self) -> Result<Self> {
        for (i, v) in self.diag.iter().enumerate() {
            if !(*v > 0.0 && v.is_finite()) {
                return Err(Error::NonPositiveVariance(format!("Q[{i},{i}] = {v}")));
            }
        }
        Ok(self)
    }
}

pub fn assemble_q_synthetic(n_bs: usize, n_paths: usize, spec: &SyntheticNoise) -> Result<NoiseModel> {
    let mut diag = Vec::with_capacity(4 * n_bs - 2 + 4 * n_paths);
    for _ in 1..n_bs {
        diag.extend_from_slice(&spec.tdoa_fdoa());
    }
    for _ in 0..n_bs {
        diag.extend_from_slice(&[spec.delta_a.powi(2); 2]);
    }
    let nlos_a = (spec.q * spec.delta_a).powi(2);
    for _ in 0..n_paths {
        diag.extend_from_slice(&[nlos_a; 4]);
    }
    let [vd, vr] = spec.tdoa_fdoa();
    let path_var = vec![[vd, vr, nlos_a, nlos_a, nlos_a, nlos_a]; n_paths];
    NoiseModel { diag, path_var }.check()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RisModel {
    Farfield,
    Exact,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhysicsNoise {
    pub waveform: WaveformConfig,
    pub bs_array: (usize, usize),
    pub ue_array: (usize, usize),
    /// Integrated antenna gain G (linear).
    pub antenna_gain: f64,
    /// Average LOS SNR anchor in dB; sets σ_z².
    pub los_snr_db: f64,
    pub policy: PhasePolicy,
    pub ris_model: RisModel,
    pub seed: u64,
}

impl Default for PhysicsNoise {
    fn default() -> Self {
        Self {
            waveform: WaveformConfig::default(),
            bs_array: (15, 15),
            ue_array: (5, 5),
            antenna_gain: 10.96 * 10.96,
            los_snr_db: 28.5,
            policy: PhasePolicy::OptimalContinuous,
            ris_model: RisModel::Farfield,
            seed: 0,
        }
    }
}

/// Complex gain of a scenario path: `None` for LOS of BS `n`, else scatterer index.
pub fn scenario_path_gain(sc: &Scenario, spec: &PhysicsNoise, n: usize, scatterer: Option<usize>) -> Result<PathGain> {
    let lambda = sc.rf.wavelength;
    let Some(i) = scatterer else {
        return los_gain((sc.ue_pos - sc.bs[n]).norm(), spec.antenna_gain, lambda);
    };
    let s = &sc.scatterers[i];
    let surf = s.surface.as_ref().ok_or_else(|| Error::InvalidScenario {
        field: format!("scatterers[{i}].surface"),
        reason: "physics-mode noise needs a surface for every scatterer".into(),
    })?;
    let bs = sc.bs[s.bs];
    let geo = IncidenceGeometry::from_points(surf, &bs, &sc.ue_pos)?;
    match surf.kind {
        SurfaceKind::PecPlate => {
            let sigma = scatterer_rcs(surf, &geo, lambda)?;
            let mut g = scatterer_gain(geo.d_r, geo.d_t, sigma.value, spec.antenna_gain, lambda)?;
            g.near_field = sigma.near_field;
            Ok(g)
        }
        SurfaceKind::Ris => {
            let ph = make_phase_profile(spec.policy, surf, &geo, lambda, spec.seed.wrapping_add(i as u64));
            match spec.ris_model {
                RisModel::Farfield => ris_gain_farfield(surf, &ph, &geo, spec.antenna_gain, lambda),
                RisModel::Exact => ris_gain_exact(surf, &ph, &bs, &sc.ue_pos, spec.antenna_gain, lambda),
            }
        }
    }
}

/// σ_z² giving the configured SNR for a LOS path at the mean BS–UE distance.
pub fn noise_var_from_snr(sc: &Scenario, spec: &PhysicsNoise) -> Result<f64> {
    let mean = sc.bs.iter().map(|b| (sc.ue_pos - b).norm()).sum::<f64>() / sc.n_bs() as f64;
    let g = los_gain(mean, spec.antenna_gain, sc.rf.wavelength)?;
    Ok(g.g.norm_sqr() / 10f64.powf(spec.los_snr_db / 10.0))
}

pub fn assemble_q_physics(sc: &Scenario, spec: &PhysicsNoise) -> Result<NoiseModel> {
    let lambda = sc.rf.wavelength;
    let v = sc.rf.speed;
    let mut wf = spec.waveform;
    wf.noise_var = noise_var_from_snr(sc, spec)?;
    let ac_r = ArrayConfig::upa(spec.bs_array.0, spec.bs_array.1, lambda / 2.0);
    let ac_t = ArrayConfig::upa(spec.ue_array.0, spec.ue_array.1, lambda / 2.0);
    let path_crlb = |n: usize, scatterer: Option<usize>| -> Result<[f64; 6]> {
        let g = scenario_path_gain(sc, spec, n, scatterer)?;
        let (aoa, aod) = match scatterer {
            None => {
                let a = angles_between(&sc.bs[n], &sc.ue_pos)?;
                (a, a)
            }
            Some(i) => {
                let s = &sc.scatterers[i].pos;
                (angles_between(&sc.bs[n], s)?, angles_between(s, &sc.ue_pos)?)
            }
        };
        Ok(channel_fim(g.g.norm(), &wf, &ac_r, &ac_t, aoa, aod, lambda)?.var)
    };
    let los: Vec<[f64; 6]> = (0..sc.n_bs()).map(|n| path_crlb(n, None)).collect::<Result<_>>()?;
    let mut diag = Vec::new();
    for l in los.iter().skip(1) {
        diag.push(v * v * (l[4] + los[0][4]));
        diag.push(lambda * lambda * (l[5] + los[0][5]));
    }
    for l in &los {
        diag.extend_from_slice(&[l[0], l[1]]);
    }
    let mut path_var = Vec::new();
    for i in sc.path_order() {
        let c = path_crlb(sc.scatterers[i].bs, Some(i))?;
        diag.extend_from_slice(&c[..4]);
        path_var.push([v * v * (c[4] + los[0][4]), lambda * lambda * (c[5] + los[0][5]), c[0], c[1], c[2], c[3]]);
    }
    NoiseModel { diag, path_var }.check()
}
