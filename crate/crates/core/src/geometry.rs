//! Coordinate bases, angles, ranges and the noise-free forward map.
//!
//! Elevation is measured from the +z axis and azimuth lies in (−π, π].

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scattering::SurfaceArray;

pub type Vec3 = Vector3<f64>;

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Pairwise distances below this raise a degenerate-geometry error.
pub const MIN_DISTANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Angles {
    pub azimuth: f64,
    pub elevation: f64,
}

impl Angles {
    pub fn new(azimuth: f64, elevation: f64) -> Self {
        Self { azimuth, elevation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Basis {
    pub d: Vec3,
    pub c: Vec3,
    pub v: Vec3,
}

pub fn basis_vectors(a: Angles) -> Basis {
    let (sp, cp) = a.azimuth.sin_cos();
    let (st, ct) = a.elevation.sin_cos();
    Basis { d: Vec3::new(cp * st, sp * st, ct), c: Vec3::new(-sp, cp, 0.0), v: Vec3::new(-cp * ct, -sp * ct, st) }
}

pub fn direction(a: Angles) -> Vec3 {
    basis_vectors(a).d
}

/// Wraps an angle into (−π, π].
pub fn wrap_angle(x: f64) -> f64 {
    let mut y = x.rem_euclid(2.0 * PI);
    if y > PI {
        y -= 2.0 * PI;
    }
    if y <= -PI {
        y += 2.0 * PI;
    }
    y
}

fn checked_norm(delta: &Vec3, what: &str) -> Result<f64> {
    let n = delta.norm();
    if !n.is_finite() || n < MIN_DISTANCE {
        return Err(Error::DegenerateGeometry(format!("{what}: distance {n:.3e} m")));
    }
    Ok(n)
}

pub fn angles_between(from: &Vec3, to: &Vec3) -> Result<Angles> {
    let delta = to - from;
    let n = checked_norm(&delta, "coincident points")?;
    let mut azimuth = delta.y.atan2(delta.x);
    if azimuth <= -PI {
        azimuth = PI;
    }
    let elevation = (delta.z / n).clamp(-1.0, 1.0).acos();
    Ok(Angles { azimuth, elevation })
}

/// Gradients of (azimuth, elevation) of `to - from` with respect to `to`.
pub fn angle_gradients(from: &Vec3, to: &Vec3) -> Result<(Vec3, Vec3)> {
    let a = angles_between(from, to)?;
    let dist = (to - from).norm();
    let st = a.elevation.sin();
    if st.abs() < 1e-12 {
        return Err(Error::DegenerateGeometry("azimuth undefined along the z axis".into()));
    }
    let b = basis_vectors(a);
    Ok((b.c / (dist * st), -b.v / dist))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rf {
    pub frequency: f64,
    pub wavelength: f64,
    pub speed: f64,
}

impl Rf {
    pub fn from_frequency(frequency: f64) -> Self {
        Self { frequency, wavelength: SPEED_OF_LIGHT / frequency, speed: SPEED_OF_LIGHT }
    }

    pub fn wavenumber(&self) -> f64 {
        2.0 * PI / self.wavelength
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scatterer {
    pub pos: Vec3,
    pub vel: Vec3,
    /// Zero-based index of the serving BS.
    pub bs: usize,
    pub surface: Option<SurfaceArray>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub bs: Vec<Vec3>,
    pub ue_pos: Vec3,
    pub ue_vel: Vec3,
    pub scatterers: Vec<Scatterer>,
    pub rf: Rf,
    /// Carried for completeness; it cancels in every range difference and
    /// never enters the computation.
    pub clock_bias: f64,
}

/// Geometry of the LOS path from BS `n` to the UE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LosGeometry {
    pub range: f64,
    pub rate: f64,
    pub aoa: Angles,
}

impl LosGeometry {
    pub fn new(b: &Vec3, u: &Vec3, u_dot: &Vec3) -> Result<Self> {
        let delta = u - b;
        let range = checked_norm(&delta, "UE coincides with a BS")?;
        Ok(Self { range, rate: u_dot.dot(&delta) / range, aoa: angles_between(b, u)? })
    }
}

/// Geometry of a single-bounce path BS → scatterer → UE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NlosGeometry {
    pub d_r: f64,
    pub d_t: f64,
    pub range: f64,
    pub rate: f64,
    pub aoa: Angles,
    pub aod: Angles,
}

impl NlosGeometry {
    pub fn new(b: &Vec3, s: &Vec3, s_dot: &Vec3, u: &Vec3, u_dot: &Vec3) -> Result<Self> {
        let dr = s - b;
        let dt = u - s;
        let d_r = checked_norm(&dr, "scatterer coincides with its BS")?;
        let d_t = checked_norm(&dt, "UE coincides with a scatterer")?;
        let rate = (u_dot - s_dot).dot(&dt) / d_t + s_dot.dot(&dr) / d_r;
        Ok(Self { d_r, d_t, range: d_r + d_t, rate, aoa: angles_between(b, s)?, aod: angles_between(s, u)? })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RangeParams {
    /// r_{n,0} per BS.
    pub los: Vec<f64>,
    /// r_{n,l} per scatterer, in scenario order.
    pub nlos: Vec<f64>,
    pub los_diff: Vec<f64>,
    pub nlos_diff: Vec<f64>,
}

impl Scenario {
    pub fn n_bs(&self) -> usize {
        self.bs.len()
    }

    pub fn n_scatterers(&self) -> usize {
        self.scatterers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, reason: String| Error::InvalidScenario { field: field.into(), reason };
        if self.bs.is_empty() {
            return Err(bad("bs", "at least one BS is required".into()));
        }
        let finite = |v: &Vec3| v.iter().all(|x| x.is_finite());
        for (i, b) in self.bs.iter().enumerate() {
            if !finite(b) {
                return Err(bad(&format!("bs[{i}].pos"), "non-finite component".into()));
            }
        }
        if !finite(&self.ue_pos) {
            return Err(bad("ue.pos", "non-finite component".into()));
        }
        if !finite(&self.ue_vel) {
            return Err(bad("ue.vel", "non-finite component".into()));
        }
        let rf = &self.rf;
        if !(rf.frequency > 0.0 && rf.speed > 0.0 && rf.wavelength > 0.0) {
            return Err(bad("rf", "frequency, speed and wavelength must be positive".into()));
        }
        if ((rf.speed / rf.frequency) - rf.wavelength).abs() > 1e-9 * rf.wavelength {
            return Err(bad("rf.wavelength", "must equal speed / frequency".into()));
        }
        for (i, s) in self.scatterers.iter().enumerate() {
            if s.bs >= self.bs.len() {
                return Err(bad(&format!("scatterers[{i}].bs_index"), format!("must lie in [1, {}]", self.bs.len())));
            }
            if !finite(&s.pos) || !finite(&s.vel) {
                return Err(bad(&format!("scatterers[{i}]"), "non-finite component".into()));
            }
            if let Some(surf) = &s.surface {
                let field = format!("scatterers[{i}].surface");
                surf.validate().map_err(|e| bad(&field, e.to_string()))?;
                if (surf.center - s.pos).norm() > 1e-9 {
                    return Err(bad(&format!("{field}.center"), "must coincide with the scatterer position".into()));
                }
                let limit = surf.far_field_distance(rf.wavelength);
                let dmin = (s.pos - self.bs[s.bs]).norm().min((s.pos - self.ue_pos).norm());
                if dmin <= limit {
                    return Err(bad(
                        &field,
                        format!("far-field violated: distance {dmin:.2} m <= 2D^2/lambda = {limit:.2} m"),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Scatterer indices in measurement order: stable-sorted by serving BS.
    pub fn path_order(&self) -> Vec<usize> {
        let mut ids: Vec<usize> = (0..self.scatterers.len()).collect();
        ids.sort_by_key(|&i| self.scatterers[i].bs);
        ids
    }

    pub fn los_geometry(&self) -> Result<Vec<LosGeometry>> {
        self.bs.iter().map(|b| LosGeometry::new(b, &self.ue_pos, &self.ue_vel)).collect()
    }

    pub fn nlos_geometry(&self) -> Result<Vec<NlosGeometry>> {
        self.scatterers
            .iter()
            .map(|s| NlosGeometry::new(&self.bs[s.bs], &s.pos, &s.vel, &self.ue_pos, &self.ue_vel))
            .collect()
    }

    /// Copy of the scenario keeping only the listed scatterers (in the given order).
    pub fn with_scatterers(&self, ids: &[usize]) -> Scenario {
        let mut sc = self.clone();
        sc.scatterers = ids.iter().map(|&i| self.scatterers[i].clone()).collect();
        sc
    }
}

pub fn range_params(sc: &Scenario) -> Result<RangeParams> {
    let los: Vec<f64> = sc.los_geometry()?.iter().map(|g| g.range).collect();
    let nlos: Vec<f64> = sc.nlos_geometry()?.iter().map(|g| g.range).collect();
    let r10 = los[0];
    Ok(RangeParams {
        los_diff: los.iter().map(|r| r - r10).collect(),
        nlos_diff: nlos.iter().map(|r| r - r10).collect(),
        los,
        nlos,
    })
}

/// Same layout as [`range_params`], holding ṙ values.
pub fn rate_params(sc: &Scenario) -> Result<RangeParams> {
    let los: Vec<f64> = sc.los_geometry()?.iter().map(|g| g.rate).collect();
    let nlos: Vec<f64> = sc.nlos_geometry()?.iter().map(|g| g.rate).collect();
    let r10 = los[0];
    Ok(RangeParams {
        los_diff: los.iter().map(|r| r - r10).collect(),
        nlos_diff: nlos.iter().map(|r| r - r10).collect(),
        los,
        nlos,
    })
}

/// Stacked channel-parameter measurements.
///
/// `los` is `[r21, ṙ21, …, rN1, ṙN1, φ1, θ1, …, φN, θN]` and `nlos` holds
/// `(φr, θr, φt, θt)` per path, paths ordered by serving BS.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub n_bs: usize,
    pub los: Vec<f64>,
    pub nlos: Vec<f64>,
    /// Zero-based serving BS per path.
    pub path_bs: Vec<usize>,
    /// Scenario scatterer index per path.
    pub scatterer_ids: Vec<usize>,
    /// Per-path (r_{n1,l}, ṙ_{n1,l}) for the second stage.
    pub nlos_ranges: Option<Vec<[f64; 2]>>,
    /// Covariance of the stacked `[los; nlos]` vector.
    pub cov: Option<DMatrix<f64>>,
}

impl MeasurementSet {
    pub fn n_paths(&self) -> usize {
        self.path_bs.len()
    }

    pub fn len(&self) -> usize {
        self.los.len() + self.nlos.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn stacked(&self) -> DVector<f64> {
        DVector::from_iterator(self.len(), self.los.iter().chain(self.nlos.iter()).copied())
    }

    /// Replaces the stacked values, keeping the layout.
    pub fn with_stacked(&self, m: &DVector<f64>) -> Result<MeasurementSet> {
        if m.len() != self.len() {
            return Err(Error::DimensionMismatch(format!("expected {} values, got {}", self.len(), m.len())));
        }
        let mut out = self.clone();
        let k = self.los.len();
        out.los.copy_from_slice(&m.as_slice()[..k]);
        out.nlos.copy_from_slice(&m.as_slice()[k..]);
        Ok(out)
    }

    pub fn has_los(&self) -> bool {
        self.los.len() == 4 * self.n_bs - 2
    }

    /// (r_{n1,0}, ṙ_{n1,0}) for zero-based `n >= 1`.
    pub fn tdoa_fdoa(&self, n: usize) -> (f64, f64) {
        (self.los[2 * (n - 1)], self.los[2 * (n - 1) + 1])
    }

    pub fn los_aoa(&self, n: usize) -> (f64, f64) {
        let off = 2 * (self.n_bs - 1) + 2 * n;
        (self.los[off], self.los[off + 1])
    }

    pub fn nlos_angles(&self, p: usize) -> [f64; 4] {
        [self.nlos[4 * p], self.nlos[4 * p + 1], self.nlos[4 * p + 2], self.nlos[4 * p + 3]]
    }

    pub fn with_cov(mut self, q: DMatrix<f64>) -> Result<MeasurementSet> {
        if q.nrows() != self.len() || q.ncols() != self.len() {
            return Err(Error::DimensionMismatch(format!(
                "Q is {}x{}, measurements have {}",
                q.nrows(),
                q.ncols(),
                self.len()
            )));
        }
        self.cov = Some(q);
        Ok(self)
    }
}

pub fn forward_measurements(sc: &Scenario, with_ranges: bool) -> Result<MeasurementSet> {
    let los = sc.los_geometry()?;
    let nlos = sc.nlos_geometry()?;
    let n = sc.n_bs();
    let mut m1 = Vec::with_capacity(4 * n - 2);
    for g in los.iter().skip(1) {
        m1.push(g.range - los[0].range);
        m1.push(g.rate - los[0].rate);
    }
    for g in &los {
        m1.push(g.aoa.azimuth);
        m1.push(g.aoa.elevation);
    }
    let order = sc.path_order();
    let mut m2 = Vec::with_capacity(4 * order.len());
    let mut ranges = Vec::with_capacity(order.len());
    for &i in &order {
        let g = &nlos[i];
        m2.extend_from_slice(&[g.aoa.azimuth, g.aoa.elevation, g.aod.azimuth, g.aod.elevation]);
        ranges.push([g.range - los[0].range, g.rate - los[0].rate]);
    }
    Ok(MeasurementSet {
        n_bs: n,
        los: m1,
        nlos: m2,
        path_bs: order.iter().map(|&i| sc.scatterers[i].bs).collect(),
        scatterer_ids: order,
        nlos_ranges: with_ranges.then_some(ranges),
        cov: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::tables23;
    use proptest::prelude::*;

    fn close(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).norm() < tol
    }

    #[test]
    fn axis_and_zenith_bases() {
        let b = basis_vectors(Angles::new(0.0, PI / 2.0));
        assert!(close(&b.d, &Vec3::x(), 1e-15));
        assert!(close(&b.c, &Vec3::y(), 1e-15));
        assert!(close(&b.v, &Vec3::z(), 1e-15));
        let b = basis_vectors(Angles::new(0.0, 0.0));
        assert!(close(&b.d, &Vec3::z(), 1e-15));
        assert!(close(&b.c, &Vec3::y(), 1e-15));
        assert!(close(&b.v, &-Vec3::x(), 1e-15));
    }

    #[test]
    fn quadrant_cases() {
        let a = angles_between(&Vec3::zeros(), &Vec3::new(1.0, 1.0, 2f64.sqrt())).unwrap();
        assert!((a.azimuth - PI / 4.0).abs() < 1e-15 && (a.elevation - PI / 4.0).abs() < 1e-15);
        let a = angles_between(&Vec3::zeros(), &Vec3::new(-1.0, 0.0, 0.0)).unwrap();
        assert_eq!(a.azimuth, PI);
        assert!((a.elevation - PI / 2.0).abs() < 1e-15);
        let a = angles_between(&Vec3::zeros(), &Vec3::new(-1.0, -0.0, 0.0)).unwrap();
        assert_eq!(a.azimuth, PI);
        assert!(matches!(
            angles_between(&Vec3::new(1.0, 2.0, 3.0), &Vec3::new(1.0, 2.0, 3.0)),
            Err(Error::DegenerateGeometry(_))
        ));
    }

    #[test]
    fn simple_ranges() {
        let mut sc = tables23();
        sc.ue_pos = sc.bs[0] + Vec3::new(3.0, 4.0, 0.0);
        let r = range_params(&sc).unwrap();
        assert!((r.los[0] - 5.0).abs() < 1e-12);
        assert_eq!(r.los_diff[0], 0.0);
    }

    #[test]
    fn table_world_range_matches_direct_norms() {
        let sc = tables23();
        let r = range_params(&sc).unwrap();
        let u = [250.0f64, 450.0, 0.0];
        let s = [247.0f64, 400.0, 6.0];
        let b = [235.504f64, 389.504, 26.0];
        let norm =
            |a: [f64; 3], c: [f64; 3]| ((a[0] - c[0]).powi(2) + (a[1] - c[1]).powi(2) + (a[2] - c[2]).powi(2)).sqrt();
        let expect = norm(u, s) + norm(s, b);
        assert!((r.nlos[0] - expect).abs() < 1e-12);
        assert!((r.nlos_diff[0] - (expect - norm(u, b))).abs() < 1e-12);
    }

    #[test]
    fn static_world_has_zero_rates() {
        let mut sc = tables23();
        sc.ue_vel = Vec3::zeros();
        let r = rate_params(&sc).unwrap();
        assert!(r.los.iter().chain(r.nlos.iter()).all(|&x| x == 0.0));
    }

    #[test]
    fn tangential_motion_has_zero_los_rate() {
        let mut sc = tables23();
        let radial = sc.ue_pos - sc.bs[0];
        sc.ue_vel = radial.cross(&Vec3::z()).normalize() * 7.0;
        let r = rate_params(&sc).unwrap();
        assert!(r.los[0].abs() < 1e-12);
    }

    #[test]
    fn rates_match_numeric_time_derivative() {
        let mut sc = tables23();
        for (i, s) in sc.scatterers.iter_mut().enumerate() {
            s.vel = Vec3::new(0.3 * i as f64 - 2.0, 1.0, -0.5);
        }
        let dt = 1e-6;
        let r0 = range_params(&sc).unwrap();
        let rates = rate_params(&sc).unwrap();
        let mut moved = sc.clone();
        moved.ue_pos += sc.ue_vel * dt;
        for s in moved.scatterers.iter_mut() {
            s.pos += s.vel * dt;
        }
        let r1 = range_params(&moved).unwrap();
        for i in 0..sc.n_bs() {
            assert!(((r1.los[i] - r0.los[i]) / dt - rates.los[i]).abs() < 1e-4);
        }
        for i in 0..sc.n_scatterers() {
            assert!(((r1.nlos[i] - r0.nlos[i]) / dt - rates.nlos[i]).abs() < 1e-4);
        }
    }

    #[test]
    fn forward_layout() {
        let sc = tables23();
        let m = forward_measurements(&sc, false).unwrap();
        assert_eq!(m.len(), 94);
        assert_eq!(m.path_bs, {
            let mut v: Vec<usize> = sc.scatterers.iter().map(|s| s.bs).collect();
            v.sort();
            v
        });

        let mut single = sc.clone();
        single.bs.truncate(1);
        single.scatterers.clear();
        assert_eq!(forward_measurements(&single, false).unwrap().len(), 2);
    }

    #[test]
    fn forward_entries_match_elementwise_recomputation() {
        let sc = tables23();
        let m = forward_measurements(&sc, true).unwrap();
        let u = sc.ue_pos;
        let r10 = (u - sc.bs[0]).norm();
        let rd10 = sc.ue_vel.dot(&(u - sc.bs[0])) / r10;
        for n in 1..sc.n_bs() {
            let r = (u - sc.bs[n]).norm();
            let rd = sc.ue_vel.dot(&(u - sc.bs[n])) / r;
            let (a, b) = m.tdoa_fdoa(n);
            assert!((a - (r - r10)).abs() < 1e-12 && (b - (rd - rd10)).abs() < 1e-12);
        }
        for n in 0..sc.n_bs() {
            let d = u - sc.bs[n];
            let (phi, theta) = m.los_aoa(n);
            assert!((phi - d.y.atan2(d.x)).abs() < 1e-14);
            assert!((theta - (d.z / d.norm()).acos()).abs() < 1e-14);
        }
        for (p, &i) in m.scatterer_ids.iter().enumerate() {
            let s = &sc.scatterers[i];
            let a = m.nlos_angles(p);
            let dr = s.pos - sc.bs[s.bs];
            let dt = u - s.pos;
            assert!((a[0] - dr.y.atan2(dr.x)).abs() < 1e-14);
            assert!((a[1] - (dr.z / dr.norm()).acos()).abs() < 1e-14);
            assert!((a[2] - dt.y.atan2(dt.x)).abs() < 1e-14);
            assert!((a[3] - (dt.z / dt.norm()).acos()).abs() < 1e-14);
            let range = dr.norm() + dt.norm();
            assert!((m.nlos_ranges.as_ref().unwrap()[p][0] - (range - r10)).abs() < 1e-12);
        }
    }

    #[test]
    fn clock_bias_never_changes_output() {
        let sc = tables23();
        let mut biased = sc.clone();
        biased.clock_bias = 1e-3;
        let a = forward_measurements(&sc, true).unwrap();
        let b = forward_measurements(&biased, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn angle_gradients_match_finite_differences() {
        let from = Vec3::new(1.0, -2.0, 0.5);
        let to = Vec3::new(-3.0, 4.0, 7.0);
        let (gphi, gtheta) = angle_gradients(&from, &to).unwrap();
        let h = 1e-6;
        for k in 0..3 {
            let mut e = Vec3::zeros();
            e[k] = h;
            let ap = angles_between(&from, &(to + e)).unwrap();
            let am = angles_between(&from, &(to - e)).unwrap();
            let dphi = wrap_angle(ap.azimuth - am.azimuth) / (2.0 * h);
            let dtheta = (ap.elevation - am.elevation) / (2.0 * h);
            assert!((dphi - gphi[k]).abs() < 1e-8);
            assert!((dtheta - gtheta[k]).abs() < 1e-8);
        }
    }

    proptest! {
        #[test]
        fn basis_is_orthonormal(phi in -PI..PI, theta in 0.0..PI) {
            let b = basis_vectors(Angles::new(phi, theta));
            prop_assert!(b.d.dot(&b.c).abs() < 1e-12);
            prop_assert!(b.d.dot(&b.v).abs() < 1e-12);
            prop_assert!(b.c.dot(&b.v).abs() < 1e-12);
            for x in [b.d, b.c, b.v] {
                prop_assert!((x.norm() - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn angles_round_trip(phi in -3.14..PI, theta in 0.01..3.13, r in 0.01f64..1e4,
                             px in -100.0..100.0f64, py in -100.0..100.0f64, pz in -100.0..100.0f64) {
            let p = Vec3::new(px, py, pz);
            let a = angles_between(&p, &(p + direction(Angles::new(phi, theta)) * r)).unwrap();
            prop_assert!(wrap_angle(a.azimuth - phi).abs() < 1e-10);
            prop_assert!((a.elevation - theta).abs() < 1e-10);
        }

        #[test]
        fn wrap_stays_in_principal_range(x in -100.0..100.0f64) {
            let y = wrap_angle(x);
            prop_assert!(y > -PI && y <= PI);
            prop_assert!(((x - y) / (2.0 * PI) - ((x - y) / (2.0 * PI)).round()).abs() < 1e-9);
        }
    }
}
