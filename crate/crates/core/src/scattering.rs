//! Radar cross sections of PEC plates and RIS arrays.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::Matrix3;
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{angles_between, basis_vectors, direction, wrap_angle, Angles, Vec3};

/// Scattered directions further than this from the mirror direction are
/// flagged as outside the PO validity region.
pub const OFF_SPECULAR_LIMIT: f64 = 30.0 * PI / 180.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurfaceKind {
    PecPlate,
    Ris,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceArray {
    /// K
    pub rows: usize,
    /// M
    pub cols: usize,
    pub dx: f64,
    pub dy: f64,
    /// A
    pub reflect_coeff: f64,
    /// β
    pub pattern_exponent: f64,
    /// Rotation taking global vectors into the local frame (local +z is the normal).
    pub orientation: Matrix3<f64>,
    pub center: Vec3,
    pub kind: SurfaceKind,
}

/// Rotation whose third row is `normal`; the local x axis is the projection
/// of global +x (or +y when the normal is along x).
pub fn orientation_from_normal(normal: &Vec3) -> Result<Matrix3<f64>> {
    let n = normal.norm();
    if !(n > 1e-12) || !n.is_finite() {
        return Err(Error::InvalidArgument("surface normal must be nonzero".into()));
    }
    let z = normal / n;
    let reference = if z.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
    let x = (reference - z * z.dot(&reference)).normalize();
    let y = z.cross(&x);
    Ok(Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]))
}

impl SurfaceArray {
    pub fn new(kind: SurfaceKind, rows: usize, cols: usize, dx: f64, dy: f64) -> Self {
        Self {
            rows,
            cols,
            dx,
            dy,
            reflect_coeff: 1.0,
            pattern_exponent: 1.0,
            orientation: Matrix3::identity(),
            center: Vec3::zeros(),
            kind,
        }
    }

    pub fn placed(mut self, center: Vec3, normal: &Vec3) -> Result<Self> {
        self.center = center;
        self.orientation = orientation_from_normal(normal)?;
        Ok(self)
    }

    pub fn with_kind(&self, kind: SurfaceKind) -> Self {
        Self { kind, ..self.clone() }
    }

    pub fn normal(&self) -> Vec3 {
        self.orientation.row(2).transpose()
    }

    pub fn n_elements(&self) -> usize {
        self.rows * self.cols
    }

    pub fn sub_area(&self) -> f64 {
        self.dx * self.dy
    }

    pub fn area(&self) -> f64 {
        self.n_elements() as f64 * self.sub_area()
    }

    pub fn diagonal(&self) -> f64 {
        (self.cols as f64 * self.dx).hypot(self.rows as f64 * self.dy)
    }

    /// 2D²/λ
    pub fn far_field_distance(&self, wavelength: f64) -> f64 {
        2.0 * self.diagonal().powi(2) / wavelength
    }

    pub fn validate(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 {
            return Err(Error::InvalidArgument("rows and cols must be positive".into()));
        }
        if !(self.dx > 0.0 && self.dy > 0.0) {
            return Err(Error::InvalidArgument("element size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.reflect_coeff) {
            return Err(Error::InvalidArgument("reflect_coeff must lie in [0, 1]".into()));
        }
        if !(self.pattern_exponent >= 0.0) {
            return Err(Error::InvalidArgument("pattern_exponent must be nonnegative".into()));
        }
        let r = &self.orientation;
        if (r * r.transpose() - Matrix3::identity()).norm() > 1e-9 {
            return Err(Error::InvalidArgument("orientation must be a rotation".into()));
        }
        Ok(())
    }

    /// Local element centre of row `k`, column `m`.
    pub fn element_local(&self, k: usize, m: usize) -> Vec3 {
        Vec3::new(
            (m as f64 - (self.cols as f64 - 1.0) / 2.0) * self.dx,
            (k as f64 - (self.rows as f64 - 1.0) / 2.0) * self.dy,
            0.0,
        )
    }

    /// Element centres in row-major order (k outer, m inner).
    pub fn elements_local(&self) -> Vec<Vec3> {
        (0..self.rows)
            .flat_map(|k| (0..self.cols).map(move |m| (k, m)))
            .map(|(k, m)| self.element_local(k, m))
            .collect()
    }

    pub fn to_local(&self, p: &Vec3) -> Vec3 {
        self.orientation * (p - self.center)
    }

    pub fn to_global(&self, p_local: &Vec3) -> Vec3 {
        self.center + self.orientation.transpose() * p_local
    }
}

/// Directions and distances from a surface to its BS and UE, in the local frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncidenceGeometry {
    pub to_bs: Angles,
    pub d_r: f64,
    pub to_ue: Angles,
    pub d_t: f64,
}

impl IncidenceGeometry {
    /// Pure far-field geometry with unbounded distances.
    pub fn from_angles(to_bs: Angles, to_ue: Angles) -> Self {
        Self { to_bs, d_r: f64::INFINITY, to_ue, d_t: f64::INFINITY }
    }

    pub fn from_points(surf: &SurfaceArray, bs: &Vec3, ue: &Vec3) -> Result<Self> {
        let b = surf.to_local(bs);
        let u = surf.to_local(ue);
        Ok(Self {
            to_bs: angles_between(&Vec3::zeros(), &b)?,
            d_r: b.norm(),
            to_ue: angles_between(&Vec3::zeros(), &u)?,
            d_t: u.norm(),
        })
    }

    /// ϑ'_r: the scattering elevation, negated when the scattered azimuth is
    /// more than 90° from the incident azimuth.
    pub fn signed_theta_r(&self) -> f64 {
        if wrap_angle(self.to_bs.azimuth - self.to_ue.azimuth).abs() > PI / 2.0 {
            -self.to_bs.elevation
        } else {
            self.to_bs.elevation
        }
    }

    /// Angle between the scattered direction and the mirror of the incident one.
    pub fn specular_offset(&self) -> f64 {
        let t = direction(self.to_ue);
        let mirror = Vec3::new(-t.x, -t.y, t.z);
        direction(self.to_bs).dot(&mirror).clamp(-1.0, 1.0).acos()
    }
}

/// F(φ, ϑ) = cos^β ϑ on the front hemisphere, 0 behind.
pub fn radiation_pattern(a: Angles, beta: f64) -> f64 {
    if (0.0..=PI / 2.0).contains(&a.elevation) {
        a.elevation.cos().max(0.0).powf(beta)
    } else {
        0.0
    }
}

fn sa(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        x.sin() / x
    }
}

/// PO subpatch RCS; `theta_r` is the signed scattering elevation ϑ'_r.
pub fn subpatch_rcs(theta_r: f64, theta_t: f64, dx: f64, dy: f64, wavelength: f64) -> f64 {
    let s_sub = dx * dy;
    let kappa = 2.0 * PI / wavelength;
    let arg = kappa * dx / 2.0 * (theta_r.sin() + theta_t.sin());
    4.0 * PI * s_sub * s_sub / (wavelength * wavelength) * theta_t.cos().powi(2) * sa(arg).powi(2)
}

/// α = −κ pᵀ(d_r + d_t)
pub fn farfield_phase(p: &Vec3, geo: &IncidenceGeometry, wavelength: f64) -> f64 {
    let kappa = 2.0 * PI / wavelength;
    -kappa * p.dot(&(direction(geo.to_bs) + direction(geo.to_ue)))
}

/// κ(𝒹r + 𝒹t − d_r − d_t) from exact element distances, elements in local frame.
pub fn exact_phase(p: &Vec3, bs_local: &Vec3, ue_local: &Vec3, wavelength: f64) -> f64 {
    let kappa = 2.0 * PI / wavelength;
    kappa * ((bs_local - p).norm() + (ue_local - p).norm() - bs_local.norm() - ue_local.norm())
}

pub fn subris_rcs(geo: &IncidenceGeometry, surf: &SurfaceArray, wavelength: f64) -> f64 {
    let a = surf.reflect_coeff;
    let s = surf.sub_area();
    4.0 * PI * a * a * s * s / (wavelength * wavelength)
        * radiation_pattern(geo.to_bs, surf.pattern_exponent)
        * radiation_pattern(geo.to_ue, surf.pattern_exponent)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rcs {
    /// m²
    pub value: f64,
    pub near_field: bool,
    /// Informational only: PO is unreliable far from the specular direction.
    pub off_specular: bool,
}

impl Rcs {
    pub fn dbm2(&self) -> f64 {
        to_dbm2(self.value)
    }
}

pub fn to_dbm2(sigma: f64) -> f64 {
    if sigma <= 0.0 {
        f64::NEG_INFINITY
    } else {
        10.0 * sigma.log10()
    }
}

fn flags(surf: &SurfaceArray, geo: &IncidenceGeometry, wavelength: f64, value: f64) -> Rcs {
    let limit = surf.far_field_distance(wavelength);
    Rcs { value, near_field: geo.d_r.min(geo.d_t) <= limit, off_specular: geo.specular_offset() > OFF_SPECULAR_LIMIT }
}

fn coherent_power(amplitude: f64, phases: impl Iterator<Item = f64>) -> f64 {
    let sum: Complex64 = phases.map(|p| Complex64::from_polar(1.0, -p)).sum();
    amplitude * amplitude * sum.norm_sqr()
}

pub fn scatterer_rcs(surf: &SurfaceArray, geo: &IncidenceGeometry, wavelength: f64) -> Result<Rcs> {
    if surf.kind != SurfaceKind::PecPlate {
        return Err(Error::InvalidArgument("scatterer_rcs needs a PEC plate".into()));
    }
    let sub = subpatch_rcs(geo.signed_theta_r(), geo.to_ue.elevation, surf.dx, surf.dy, wavelength);
    let phases = surf.elements_local().into_iter().map(|p| farfield_phase(&p, geo, wavelength));
    Ok(flags(surf, geo, wavelength, coherent_power(sub.sqrt(), phases)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PhasePolicy {
    Identical,
    OptimalContinuous,
    Discrete1Bit,
    Random,
}

impl std::str::FromStr for PhasePolicy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identical" => Ok(Self::Identical),
            "optimal_continuous" | "continuous" | "con" => Ok(Self::OptimalContinuous),
            "discrete_1bit" | "discrete" | "disc" => Ok(Self::Discrete1Bit),
            "random" => Ok(Self::Random),
            other => Err(Error::InvalidArgument(format!("unknown phase policy `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseProfile {
    pub policy: PhasePolicy,
    pub rows: usize,
    pub cols: usize,
    /// ξ_{k,m}, row-major.
    pub xi: Vec<f64>,
}

pub fn make_phase_profile(
    policy: PhasePolicy,
    surf: &SurfaceArray,
    geo: &IncidenceGeometry,
    wavelength: f64,
    seed: u64,
) -> PhaseProfile {
    let elements = surf.elements_local();
    let xi = match policy {
        PhasePolicy::Identical => vec![0.0; elements.len()],
        PhasePolicy::OptimalContinuous => elements.iter().map(|p| -farfield_phase(p, geo, wavelength)).collect(),
        PhasePolicy::Discrete1Bit => elements
            .iter()
            .map(|p| {
                let con = wrap_angle(-farfield_phase(p, geo, wavelength));
                if con.abs() <= PI / 2.0 {
                    0.0
                } else {
                    PI
                }
            })
            .collect(),
        PhasePolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..elements.len()).map(|_| rng.random_range(0.0..2.0 * PI)).collect()
        }
    };
    PhaseProfile { policy, rows: surf.rows, cols: surf.cols, xi }
}

pub(crate) fn check_grid(surf: &SurfaceArray, ph: &PhaseProfile) -> Result<()> {
    if ph.rows != surf.rows || ph.cols != surf.cols || ph.xi.len() != surf.n_elements() {
        return Err(Error::DimensionMismatch(format!(
            "phase grid {}x{} vs surface {}x{}",
            ph.rows, ph.cols, surf.rows, surf.cols
        )));
    }
    Ok(())
}

pub fn ris_rcs(surf: &SurfaceArray, geo: &IncidenceGeometry, ph: &PhaseProfile, wavelength: f64) -> Result<Rcs> {
    if surf.kind != SurfaceKind::Ris {
        return Err(Error::InvalidArgument("ris_rcs needs an RIS".into()));
    }
    check_grid(surf, ph)?;
    let sub = subris_rcs(geo, surf, wavelength);
    let phases =
        surf.elements_local().into_iter().zip(ph.xi.iter()).map(|(p, xi)| farfield_phase(&p, geo, wavelength) + xi);
    Ok(flags(surf, geo, wavelength, coherent_power(sub.sqrt(), phases)))
}

/// RCS of a placed surface as seen by a BS and UE, scatterer or RIS.
pub fn surface_rcs(
    surf: &SurfaceArray,
    bs: &Vec3,
    ue: &Vec3,
    policy: PhasePolicy,
    wavelength: f64,
    seed: u64,
) -> Result<Rcs> {
    let geo = IncidenceGeometry::from_points(surf, bs, ue)?;
    match surf.kind {
        SurfaceKind::PecPlate => scatterer_rcs(surf, &geo, wavelength),
        SurfaceKind::Ris => {
            let ph = make_phase_profile(policy, surf, &geo, wavelength, seed);
            ris_rcs(surf, &geo, &ph, wavelength)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RcsRow {
    pub x: f64,
    pub policy: String,
    pub rcs_dbm2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleSweep {
    pub k: usize,
    pub wavelength: f64,
    /// Element size in wavelengths.
    pub element: f64,
    pub theta_t_deg: f64,
    pub step_deg: f64,
    pub beta: f64,
    pub seed: u64,
}

impl Default for AngleSweep {
    fn default() -> Self {
        Self { k: 40, wavelength: 0.011, element: 0.4, theta_t_deg: 0.0, step_deg: 0.5, beta: 1.0, seed: 0 }
    }
}

pub const ANGLE_SERIES: [&str; 5] = ["scatterer", "identical", "continuous", "discrete", "random"];

impl AngleSweep {
    pub fn surface(&self, kind: SurfaceKind) -> SurfaceArray {
        let d = self.element * self.wavelength;
        let mut s = SurfaceArray::new(kind, self.k, self.k, d, d);
        s.pattern_exponent = self.beta;
        s
    }

    /// Geometry for signed scattering elevation ϑ'_r (radians), incident azimuth 0.
    pub fn geometry(&self, theta_r_signed: f64) -> IncidenceGeometry {
        let phi_r = if theta_r_signed >= 0.0 { 0.0 } else { PI };
        IncidenceGeometry::from_angles(
            Angles::new(phi_r, theta_r_signed.abs()),
            Angles::new(0.0, self.theta_t_deg.to_radians()),
        )
    }

    pub fn grid_deg(&self) -> Vec<f64> {
        let n = (180.0 / self.step_deg).round() as usize;
        (0..=n).map(|i| -90.0 + i as f64 * self.step_deg).collect()
    }

    /// Rows ordered by angle, then by [`ANGLE_SERIES`].
    pub fn run(&self) -> Result<Vec<RcsRow>> {
        let plate = self.surface(SurfaceKind::PecPlate);
        let ris = self.surface(SurfaceKind::Ris);
        let per_angle: Result<Vec<Vec<RcsRow>>> = self
            .grid_deg()
            .par_iter()
            .map(|&deg| {
                let geo = self.geometry(deg.to_radians());
                let mut out = Vec::with_capacity(ANGLE_SERIES.len());
                let sc = scatterer_rcs(&plate, &geo, self.wavelength)?;
                out.push(RcsRow { x: deg, policy: "scatterer".into(), rcs_dbm2: sc.dbm2() });
                for (name, policy) in [
                    ("identical", PhasePolicy::Identical),
                    ("continuous", PhasePolicy::OptimalContinuous),
                    ("discrete", PhasePolicy::Discrete1Bit),
                    ("random", PhasePolicy::Random),
                ] {
                    let ph = make_phase_profile(policy, &ris, &geo, self.wavelength, self.seed);
                    let r = ris_rcs(&ris, &geo, &ph, self.wavelength)?;
                    out.push(RcsRow { x: deg, policy: name.into(), rcs_dbm2: r.dbm2() });
                }
                Ok(out)
            })
            .collect();
        Ok(per_angle?.into_iter().flatten().collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeSweep {
    pub ks: Vec<usize>,
    pub wavelength: f64,
    pub element: f64,
    pub theta_t_deg: f64,
    pub theta_r_deg: f64,
    pub beta: f64,
}

impl Default for SizeSweep {
    fn default() -> Self {
        Self {
            ks: (1..=100).collect(),
            wavelength: 0.011,
            element: 0.4,
            theta_t_deg: 0.0,
            theta_r_deg: 45.0,
            beta: 1.0,
        }
    }
}

pub const SIZE_SERIES: [&str; 5] = ["upper_bound", "continuous", "discrete", "identical", "scatterer"];

impl SizeSweep {
    pub fn run(&self) -> Result<Vec<RcsRow>> {
        let per_k: Result<Vec<Vec<RcsRow>>> = self
            .ks
            .par_iter()
            .map(|&k| {
                let cfg = AngleSweep {
                    k,
                    wavelength: self.wavelength,
                    element: self.element,
                    theta_t_deg: self.theta_t_deg,
                    beta: self.beta,
                    ..AngleSweep::default()
                };
                let plate = cfg.surface(SurfaceKind::PecPlate);
                let ris = cfg.surface(SurfaceKind::Ris);
                let geo = cfg.geometry(self.theta_r_deg.to_radians());
                let top = IncidenceGeometry::from_angles(Angles::new(0.0, 0.0), Angles::new(0.0, 0.0));
                let n = (k * k) as f64;
                let x = k as f64;
                let mut out = vec![RcsRow {
                    x,
                    policy: "upper_bound".into(),
                    rcs_dbm2: to_dbm2(n * n * subris_rcs(&top, &ris, self.wavelength)),
                }];
                for (name, policy) in [
                    ("continuous", PhasePolicy::OptimalContinuous),
                    ("discrete", PhasePolicy::Discrete1Bit),
                    ("identical", PhasePolicy::Identical),
                ] {
                    let ph = make_phase_profile(policy, &ris, &geo, self.wavelength, 0);
                    out.push(RcsRow {
                        x,
                        policy: name.into(),
                        rcs_dbm2: ris_rcs(&ris, &geo, &ph, self.wavelength)?.dbm2(),
                    });
                }
                out.push(RcsRow {
                    x,
                    policy: "scatterer".into(),
                    rcs_dbm2: scatterer_rcs(&plate, &geo, self.wavelength)?.dbm2(),
                });
                Ok(out)
            })
            .collect();
        Ok(per_k?.into_iter().flatten().collect())
    }
}

pub fn write_rcs_csv<W: Write>(rows: &[RcsRow], x_name: &str, mut w: W) -> Result<()> {
    writeln!(w, "{x_name},policy,rcs_dbm2")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.x, r.policy, fmt_db(r.rcs_dbm2))?;
    }
    Ok(())
}

fn fmt_db(x: f64) -> String {
    if x == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{x:.6}")
    }
}

/// Local direction of (φ, ϑ) rotated into global coordinates for a placed surface.
pub fn global_direction(surf: &SurfaceArray, a: Angles) -> Vec3 {
    surf.orientation.transpose() * basis_vectors(a).d
}
