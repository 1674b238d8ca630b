//! Closed-form weighted-least-squares estimators.
//!
//! Stage 1 solves the pseudo-linear system `h = G x` for
//! `x = [u; u̇; s_1; …; s_L]` (or `[u; s_1; …]` without LOS paths), reweighting
//! with `W = (B Q Bᵀ)⁻¹` where `B = ∂e/∂m` maps measurement noise into the
//! equation error. Stage 2 refines one scatterer at a time from its
//! TDOA/FDOA, its angles and the stage-1 estimate acting as a prior.

use std::str::FromStr;

use nalgebra::{DMatrix, DVector, Matrix3, Matrix4, Matrix6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{basis_vectors, Angles, LosGeometry, MeasurementSet, NlosGeometry, Scenario, Vec3};
use crate::linalg::{block_diag, weighted_lstsq, LsqSolution, RANK_WARNING_CONDITION};

pub const DEFAULT_ITERATIONS: usize = 2;
/// UE speeds below this leave the scatterer velocity direction undefined.
pub const MIN_SPEED: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// LOS TDOA/FDOA/AOA plus NLOS AOA/AOD; unknowns `[u; u̇; s]`.
    Hybrid,
    /// NLOS AOA/AOD only; unknowns `[u; s]`.
    NlosOnly,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hybrid" => Ok(Mode::Hybrid),
            "nlos_only" | "nlos-only" => Ok(Mode::NlosOnly),
            _ => Err(Error::InvalidArgument(format!("unknown mode '{s}' (hybrid, nlos_only)"))),
        }
    }
}

impl Mode {
    /// Offset of the first scatterer coordinate in the state vector.
    pub fn s_offset(self) -> usize {
        match self {
            Mode::Hybrid => 6,
            Mode::NlosOnly => 3,
        }
    }

    pub fn n_unknowns(self, n_paths: usize) -> usize {
        self.s_offset() + 3 * n_paths
    }
}

/// Point at which `B` is linearized: positions in measurement path order.
#[derive(Debug, Clone, PartialEq)]
pub struct State {
    pub u: Vec3,
    pub u_dot: Vec3,
    pub s: Vec<Vec3>,
}

impl State {
    /// The scenario's true state with scatterers in measurement order.
    pub fn truth(sc: &Scenario) -> State {
        State { u: sc.ue_pos, u_dot: sc.ue_vel, s: sc.path_order().iter().map(|&i| sc.scatterers[i].pos).collect() }
    }

    pub fn to_vector(&self, mode: Mode) -> DVector<f64> {
        let off = mode.s_offset();
        let mut x = DVector::zeros(mode.n_unknowns(self.s.len()));
        x.fixed_rows_mut::<3>(0).copy_from(&self.u);
        if mode == Mode::Hybrid {
            x.fixed_rows_mut::<3>(3).copy_from(&self.u_dot);
        }
        for (p, s) in self.s.iter().enumerate() {
            x.fixed_rows_mut::<3>(off + 3 * p).copy_from(s);
        }
        x
    }

    pub fn from_vector(x: &DVector<f64>, mode: Mode) -> State {
        let off = mode.s_offset();
        let v = |i: usize| Vec3::new(x[i], x[i + 1], x[i + 2]);
        State {
            u: v(0),
            u_dot: if mode == Mode::Hybrid { v(3) } else { Vec3::zeros() },
            s: (0..(x.len() - off) / 3).map(|p| v(off + 3 * p)).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage1System {
    pub h: DVector<f64>,
    pub g: DMatrix<f64>,
    pub mode: Mode,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateEstimate {
    pub mode: Mode,
    pub u: Vec3,
    pub u_dot: Option<Vec3>,
    /// Scatterer positions in measurement path order.
    pub s: Vec<Vec3>,
    pub scatterer_ids: Vec<usize>,
    pub cov: DMatrix<f64>,
    pub iterations_used: usize,
    pub condition_number: f64,
    pub rank_warning: bool,
}

impl StateEstimate {
    pub fn state(&self) -> State {
        State { u: self.u, u_dot: self.u_dot.unwrap_or_else(Vec3::zeros), s: self.s.clone() }
    }

    pub fn scatterer_cov(&self, p: usize) -> Matrix3<f64> {
        let off = self.mode.s_offset() + 3 * p;
        self.cov.fixed_view::<3, 3>(off, off).into_owned()
    }
}

fn check_bs(m: &MeasurementSet, bs: &[Vec3]) -> Result<()> {
    if bs.len() != m.n_bs {
        return Err(Error::DimensionMismatch(format!("{} BS positions for {} BSs", bs.len(), m.n_bs)));
    }
    if let Some(&n) = m.path_bs.iter().find(|&&n| n >= bs.len()) {
        return Err(Error::DimensionMismatch(format!("path linked to BS {n}, only {} BSs", bs.len())));
    }
    Ok(())
}

fn angles(phi: f64, theta: f64) -> Angles {
    Angles::new(phi, theta)
}

pub fn build_stage1(m: &MeasurementSet, bs: &[Vec3], mode: Mode) -> Result<Stage1System> {
    check_bs(m, bs)?;
    let n_bs = m.n_bs;
    let n_paths = m.n_paths();
    let cols = mode.n_unknowns(n_paths);
    let los_rows = match mode {
        Mode::Hybrid => {
            if n_bs < 2 || !m.has_los() {
                return Err(Error::MissingMeasurement(
                    "hybrid mode needs LOS TDOA/FDOA/AOA from at least two BSs".into(),
                ));
            }
            4 * n_bs - 2
        }
        Mode::NlosOnly => 0,
    };
    let rows = los_rows + 4 * n_paths;
    if rows < cols {
        return Err(Error::UnderDetermined { rows, cols });
    }
    let mut g = DMatrix::zeros(rows, cols);
    let mut h = DVector::zeros(rows);

    if mode == Mode::Hybrid {
        let (phi1, theta1) = m.los_aoa(0);
        let d1 = basis_vectors(angles(phi1, theta1)).d;
        let b1 = bs[0];
        for n in 1..n_bs {
            let (r, rdot) = m.tdoa_fdoa(n);
            let bn = bs[n];
            let i = 2 * (n - 1);
            let lever = (b1 - bn) - d1 * r;
            h[i] = r * r - 2.0 * r * d1.dot(&b1) - bn.norm_squared() + b1.norm_squared();
            g.fixed_view_mut::<1, 3>(i, 0).copy_from(&(lever * 2.0).transpose());
            h[i + 1] = r * rdot - rdot * d1.dot(&b1);
            g.fixed_view_mut::<1, 3>(i + 1, 0).copy_from(&(-d1 * rdot).transpose());
            g.fixed_view_mut::<1, 3>(i + 1, 3).copy_from(&lever.transpose());
        }
        for n in 0..n_bs {
            let (phi, theta) = m.los_aoa(n);
            let basis = basis_vectors(angles(phi, theta));
            let i = 2 * (n_bs - 1) + 2 * n;
            h[i] = basis.c.dot(&bs[n]);
            h[i + 1] = basis.v.dot(&bs[n]);
            g.fixed_view_mut::<1, 3>(i, 0).copy_from(&basis.c.transpose());
            g.fixed_view_mut::<1, 3>(i + 1, 0).copy_from(&basis.v.transpose());
        }
    }

    let off = mode.s_offset();
    for p in 0..n_paths {
        let [phr, thr, pht, tht] = m.nlos_angles(p);
        let rx = basis_vectors(angles(phr, thr));
        let tx = basis_vectors(angles(pht, tht));
        let b = bs[m.path_bs[p]];
        let i = los_rows + 4 * p;
        let col = off + 3 * p;
        h[i] = rx.c.dot(&b);
        h[i + 1] = rx.v.dot(&b);
        g.fixed_view_mut::<1, 3>(i, col).copy_from(&rx.c.transpose());
        g.fixed_view_mut::<1, 3>(i + 1, col).copy_from(&rx.v.transpose());
        // AOD rows: the direction u − s is orthogonal to c_t and v_t.
        g.fixed_view_mut::<1, 3>(i + 2, 0).copy_from(&tx.c.transpose());
        g.fixed_view_mut::<1, 3>(i + 3, 0).copy_from(&tx.v.transpose());
        g.fixed_view_mut::<1, 3>(i + 2, col).copy_from(&(-tx.c).transpose());
        g.fixed_view_mut::<1, 3>(i + 3, col).copy_from(&(-tx.v).transpose());
    }
    Ok(Stage1System { h, g, mode })
}

/// `B = ∂(h − G x)/∂m` evaluated at `state`.
pub fn build_b(m: &MeasurementSet, bs: &[Vec3], state: &State, mode: Mode) -> Result<DMatrix<f64>> {
    check_bs(m, bs)?;
    if state.s.len() != m.n_paths() {
        return Err(Error::DimensionMismatch(format!(
            "state has {} scatterers, measurements {}",
            state.s.len(),
            m.n_paths()
        )));
    }
    let n_bs = m.n_bs;
    let los_rows = if mode == Mode::Hybrid { 4 * n_bs - 2 } else { 0 };
    let size = los_rows + 4 * m.n_paths();
    let mut b = DMatrix::zeros(size, size);

    if mode == Mode::Hybrid {
        let los: Vec<LosGeometry> =
            bs.iter().map(|bn| LosGeometry::new(bn, &state.u, &state.u_dot)).collect::<Result<_>>()?;
        let ref_basis = basis_vectors(los[0].aoa);
        let aoa0 = 2 * (n_bs - 1);
        for n in 1..n_bs {
            let i = 2 * (n - 1);
            let rn1 = los[n].range - los[0].range;
            b[(i, i)] = 2.0 * los[n].range;
            b[(i + 1, i)] = los[n].rate;
            b[(i + 1, i + 1)] = los[n].range;
            b[(i + 1, aoa0)] = rn1 * los[0].aoa.elevation.sin() * ref_basis.c.dot(&state.u_dot);
            b[(i + 1, aoa0 + 1)] = -rn1 * ref_basis.v.dot(&state.u_dot);
        }
        for (n, g) in los.iter().enumerate() {
            let i = aoa0 + 2 * n;
            b[(i, i)] = g.range * g.aoa.elevation.sin();
            b[(i + 1, i + 1)] = -g.range;
        }
    }
    for p in 0..m.n_paths() {
        let g = NlosGeometry::new(&bs[m.path_bs[p]], &state.s[p], &Vec3::zeros(), &state.u, &state.u_dot)?;
        let i = los_rows + 4 * p;
        b[(i, i)] = g.d_r * g.aoa.elevation.sin();
        b[(i + 1, i + 1)] = -g.d_r;
        b[(i + 2, i + 2)] = g.d_t * g.aod.elevation.sin();
        b[(i + 3, i + 3)] = -g.d_t;
    }
    Ok(b)
}

/// The covariance block matching the rows used by `mode`.
pub fn mode_cov(m: &MeasurementSet, mode: Mode) -> Result<DMatrix<f64>> {
    let q = m.cov.as_ref().ok_or_else(|| Error::MissingMeasurement("measurement covariance".into()))?;
    match mode {
        Mode::Hybrid => Ok(q.clone()),
        Mode::NlosOnly => {
            let k = m.los.len();
            let n = m.nlos.len();
            Ok(q.view((k, k), (n, n)).into_owned())
        }
    }
}

/// Solves the weighted system, reweighting `iters` times.
fn reweighted<F>(g: &DMatrix<f64>, h: &DVector<f64>, q: &DMatrix<f64>, iters: usize, mut b_at: F) -> Result<LsqSolution>
where
    F: FnMut(&DVector<f64>) -> Result<DMatrix<f64>>,
{
    let mut sol = weighted_lstsq(g, h, q)?;
    for _ in 0..iters {
        let b = b_at(&sol.x)?;
        let c = &b * q * b.transpose();
        sol = weighted_lstsq(g, h, &c)?;
    }
    Ok(sol)
}

pub fn stage1_solve(m: &MeasurementSet, bs: &[Vec3], mode: Mode, iters: usize) -> Result<StateEstimate> {
    let sys = build_stage1(m, bs, mode)?;
    if mode == Mode::NlosOnly {
        let mut linked: Vec<usize> = m.path_bs.clone();
        linked.sort_unstable();
        linked.dedup();
        // Scaling u and every s about a single BS preserves all angles.
        if linked.len() < 2 {
            return Err(Error::RankDeficient { condition: f64::INFINITY });
        }
    }
    let q = mode_cov(m, mode)?;
    let sol = reweighted(&sys.g, &sys.h, &q, iters, |x| build_b(m, bs, &State::from_vector(x, mode), mode))?;
    let st = State::from_vector(&sol.x, mode);
    Ok(StateEstimate {
        mode,
        u: st.u,
        u_dot: (mode == Mode::Hybrid).then_some(st.u_dot),
        s: st.s,
        scatterer_ids: m.scatterer_ids.clone(),
        cov: sol.cov,
        iterations_used: iters,
        condition_number: sol.condition,
        rank_warning: sol.condition > RANK_WARNING_CONDITION,
    })
}

/// Scatterer positions from NLOS angles alone with the UE position known.
///
/// Each path is an independent 4×3 system; returns position and covariance
/// per path.
pub fn locate_scatterers_known_ue(
    m: &MeasurementSet,
    bs: &[Vec3],
    u: &Vec3,
    iters: usize,
) -> Result<Vec<(Vec3, Matrix3<f64>)>> {
    check_bs(m, bs)?;
    let q = mode_cov(m, Mode::NlosOnly)?;
    (0..m.n_paths())
        .map(|p| {
            let [phr, thr, pht, tht] = m.nlos_angles(p);
            let rx = basis_vectors(angles(phr, thr));
            let tx = basis_vectors(angles(pht, tht));
            let b = bs[m.path_bs[p]];
            let g = DMatrix::from_row_slice(
                4,
                3,
                &[rx.c.x, rx.c.y, rx.c.z, rx.v.x, rx.v.y, rx.v.z, tx.c.x, tx.c.y, tx.c.z, tx.v.x, tx.v.y, tx.v.z],
            );
            let h = DVector::from_column_slice(&[rx.c.dot(&b), rx.v.dot(&b), tx.c.dot(u), tx.v.dot(u)]);
            let qp = q.view((4 * p, 4 * p), (4, 4)).into_owned();
            let sol = reweighted(&g, &h, &qp, iters, |x| {
                let s = Vec3::new(x[0], x[1], x[2]);
                let geo = NlosGeometry::new(&b, &s, &Vec3::zeros(), u, &Vec3::zeros())?;
                Ok(DMatrix::from_diagonal(&DVector::from_column_slice(&[
                    geo.d_r * geo.aoa.elevation.sin(),
                    -geo.d_r,
                    geo.d_t * geo.aod.elevation.sin(),
                    -geo.d_t,
                ])))
            })?;
            Ok((Vec3::new(sol.x[0], sol.x[1], sol.x[2]), sol.cov.fixed_view::<3, 3>(0, 0).into_owned()))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Variant {
    /// TDOA/FDOA, AOA/AOD and the stage-1 prior: nine rows.
    Full,
    /// TDOA/FDOA and AOA/AOD only.
    ChannelOnly,
    /// TDOA/FDOA and the prior; the arrival direction comes from the prior.
    RangePrior,
}

impl Stage2Variant {
    pub const ALL: [Stage2Variant; 3] = [Stage2Variant::Full, Stage2Variant::ChannelOnly, Stage2Variant::RangePrior];

    /// Rows of the nine-row system kept by this variant; the same indices
    /// select the matching measurement columns.
    pub fn rows(self) -> &'static [usize] {
        match self {
            Stage2Variant::Full => &[0, 1, 2, 3, 4, 5, 6, 7, 8],
            Stage2Variant::ChannelOnly => &[0, 1, 2, 3, 4, 5],
            Stage2Variant::RangePrior => &[0, 1, 6, 7, 8],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage2Variant::Full => "full",
            Stage2Variant::ChannelOnly => "channel_only",
            Stage2Variant::RangePrior => "range_prior",
        }
    }
}

impl FromStr for Stage2Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage2Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage-2 variant '{s}'")))
    }
}

/// One NLOS path handed to the second stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlosRefinement {
    /// (r_{n1,l}, ṙ_{n1,l}, φr, θr, φt, θt)
    pub m: [f64; 6],
    /// Serving BS position.
    pub bs: Vec3,
    /// Stage-1 position estimate and its covariance.
    pub prior: Vec3,
    pub prior_cov: Matrix3<f64>,
    /// Covariance of `m`.
    pub q: Matrix6<f64>,
}

/// UE-side quantities the second stage takes from stage 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage2Context {
    pub u: Vec3,
    pub u_dot: Vec3,
    /// r_{1,0} and ṙ_{1,0} of the reference LOS path.
    pub ref_range: f64,
    pub ref_rate: f64,
}

impl Stage2Context {
    pub fn from_ue(u: Vec3, u_dot: Vec3, b1: &Vec3) -> Result<Self> {
        let g = LosGeometry::new(b1, &u, &u_dot)?;
        Ok(Self { u, u_dot, ref_range: g.range, ref_rate: g.rate })
    }

    /// Unit vector along the UE velocity.
    pub fn n_v(&self) -> Result<Vec3> {
        velocity_direction(&self.u_dot)
    }
}

pub fn velocity_direction(v: &Vec3) -> Result<Vec3> {
    let speed = v.norm();
    if !(speed > MIN_SPEED) {
        return Err(Error::VelocityDirectionUndefined { speed });
    }
    Ok(v / speed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Stage2System {
    pub h: DVector<f64>,
    /// Columns are `[s; ṡ]`.
    pub g: DMatrix<f64>,
    pub variant: Stage2Variant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage2Estimate {
    pub s: Vec3,
    /// Speed along the UE velocity direction, m/s.
    pub speed: f64,
    pub cov: Matrix4<f64>,
    pub iterations_used: usize,
    pub condition_number: f64,
}

fn arrival_direction(nr: &NlosRefinement, variant: Stage2Variant) -> Result<Vec3> {
    match variant {
        Stage2Variant::RangePrior => {
            let d = nr.prior - nr.bs;
            let n = d.norm();
            if n < crate::geometry::MIN_DISTANCE {
                return Err(Error::DegenerateGeometry("prior coincides with its BS".into()));
            }
            Ok(d / n)
        }
        _ => Ok(basis_vectors(angles(nr.m[2], nr.m[3])).d),
    }
}

pub fn build_stage2(nr: &NlosRefinement, ctx: &Stage2Context, variant: Stage2Variant) -> Result<Stage2System> {
    let r = nr.m[0] + ctx.ref_range;
    let rdot = nr.m[1] + ctx.ref_rate;
    let d_r = arrival_direction(nr, variant)?;
    let rx = basis_vectors(angles(nr.m[2], nr.m[3]));
    let tx = basis_vectors(angles(nr.m[4], nr.m[5]));
    let (b, u, ud) = (nr.bs, ctx.u, ctx.u_dot);

    let mut g = DMatrix::zeros(9, 6);
    let mut h = DVector::zeros(9);
    let lever = b - u + d_r * r;
    h[0] = r * r + 2.0 * r * d_r.dot(&b) - u.norm_squared() + b.norm_squared();
    g.fixed_view_mut::<1, 3>(0, 0).copy_from(&(lever * 2.0).transpose());
    h[1] = r * rdot + rdot * d_r.dot(&b) - ud.dot(&u);
    g.fixed_view_mut::<1, 3>(1, 0).copy_from(&(d_r * rdot - ud).transpose());
    g.fixed_view_mut::<1, 3>(1, 3).copy_from(&lever.transpose());
    h[2] = rx.c.dot(&b);
    h[3] = rx.v.dot(&b);
    g.fixed_view_mut::<1, 3>(2, 0).copy_from(&rx.c.transpose());
    g.fixed_view_mut::<1, 3>(3, 0).copy_from(&rx.v.transpose());
    h[4] = tx.c.dot(&u);
    h[5] = tx.v.dot(&u);
    g.fixed_view_mut::<1, 3>(4, 0).copy_from(&tx.c.transpose());
    g.fixed_view_mut::<1, 3>(5, 0).copy_from(&tx.v.transpose());
    for k in 0..3 {
        h[6 + k] = nr.prior[k];
        g[(6 + k, k)] = 1.0;
    }
    let rows = variant.rows();
    Ok(Stage2System {
        h: DVector::from_iterator(rows.len(), rows.iter().map(|&i| h[i])),
        g: g.select_rows(rows.iter()),
        variant,
    })
}

/// Stage-2 `B` at the scatterer state `(s, ṡ)`.
pub fn build_b2(
    nr: &NlosRefinement,
    ctx: &Stage2Context,
    variant: Stage2Variant,
    s: &Vec3,
    s_dot: &Vec3,
) -> Result<DMatrix<f64>> {
    let geo = NlosGeometry::new(&nr.bs, s, s_dot, &ctx.u, &ctx.u_dot)?;
    let rx = basis_vectors(geo.aoa);
    let (d_r, d_t) = (geo.d_r, geo.d_t);
    let dt_rate = (ctx.u_dot - s_dot).dot(&(ctx.u - s)) / d_t;
    let r = geo.range;

    let mut b = DMatrix::zeros(9, 9);
    b[(0, 0)] = 2.0 * d_t;
    b[(1, 0)] = dt_rate;
    b[(1, 1)] = d_t;
    b[(1, 2)] = -r * geo.aoa.elevation.sin() * rx.c.dot(s_dot);
    b[(1, 3)] = r * rx.v.dot(s_dot);
    b[(2, 2)] = d_r * geo.aoa.elevation.sin();
    b[(3, 3)] = -d_r;
    b[(4, 4)] = -d_t * geo.aod.elevation.sin();
    b[(5, 5)] = d_t;
    for k in 0..3 {
        b[(6 + k, 6 + k)] = 1.0;
    }
    if variant == Stage2Variant::RangePrior {
        // The FDOA row's direction is taken from the prior.
        let dir = rx.d;
        let coupling = -(s_dot - dir * dir.dot(s_dot)) * (r / d_r);
        b.fixed_view_mut::<1, 3>(1, 6).copy_from(&coupling.transpose());
    }
    let rows = variant.rows();
    Ok(b.select_rows(rows.iter()).select_columns(rows.iter()))
}

pub fn stage2_q(nr: &NlosRefinement, variant: Stage2Variant) -> DMatrix<f64> {
    let full = block_diag(&[
        DMatrix::from_iterator(6, 6, nr.q.iter().copied()),
        DMatrix::from_iterator(3, 3, nr.prior_cov.iter().copied()),
    ]);
    let rows = variant.rows();
    full.select_rows(rows.iter()).select_columns(rows.iter())
}

/// `K = blkdiag(I₃, n_v)` applied to `G`.
pub fn reduce_velocity(g: &DMatrix<f64>, n_v: &Vec3) -> DMatrix<f64> {
    let mut k = DMatrix::zeros(6, 4);
    for i in 0..3 {
        k[(i, i)] = 1.0;
        k[(3 + i, 3)] = n_v[i];
    }
    g * k
}

pub fn stage2_solve(
    nr: &NlosRefinement,
    ctx: &Stage2Context,
    variant: Stage2Variant,
    iters: usize,
) -> Result<Stage2Estimate> {
    let n_v = ctx.n_v()?;
    let sys = build_stage2(nr, ctx, variant)?;
    let gk = reduce_velocity(&sys.g, &n_v);
    let q = stage2_q(nr, variant);
    let sol = reweighted(&gk, &sys.h, &q, iters, |x| {
        let s = Vec3::new(x[0], x[1], x[2]);
        build_b2(nr, ctx, variant, &s, &(n_v * x[3]))
    })?;
    Ok(Stage2Estimate {
        s: Vec3::new(sol.x[0], sol.x[1], sol.x[2]),
        speed: sol.x[3],
        cov: Matrix4::from_iterator(sol.cov.iter().copied()),
        iterations_used: iters,
        condition_number: sol.condition,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{assemble_q_synthetic, SyntheticNoise};
    use crate::geometry::{forward_measurements, Scatterer};
    use crate::scenario::tables23;

    fn noisy_ready(sc: &Scenario) -> MeasurementSet {
        let m = forward_measurements(sc, true).unwrap();
        let q = assemble_q_synthetic(sc.n_bs(), m.n_paths(), &SyntheticNoise::from_rho(1.0, 0.1)).unwrap();
        m.with_cov(q.q()).unwrap()
    }

    fn max_abs(v: &DVector<f64>) -> f64 {
        v.iter().fold(0.0f64, |a, x| a.max(x.abs()))
    }

    #[test]
    fn construction_identity_both_modes() {
        let sc = tables23();
        let m = forward_measurements(&sc, false).unwrap();
        let truth = State::truth(&sc);
        for mode in [Mode::Hybrid, Mode::NlosOnly] {
            let sys = build_stage1(&m, &sc.bs, mode).unwrap();
            let x = truth.to_vector(mode);
            let res = &sys.h - &sys.g * &x;
            assert!(max_abs(&res) <= 1e-9 * max_abs(&sys.h).max(1.0), "{mode:?}: {}", max_abs(&res));
        }
    }

    #[test]
    fn layout_and_zero_block() {
        let sc = tables23();
        let m = forward_measurements(&sc, false).unwrap();
        let sys = build_stage1(&m, &sc.bs, Mode::Hybrid).unwrap();
        assert_eq!(sys.g.shape(), (94, 60));
        // LOS rows never touch scatterer columns
        assert!(sys.g.view((0, 6), (22, 54)).iter().all(|&x| x == 0.0));
        let nl = build_stage1(&m, &sc.bs, Mode::NlosOnly).unwrap();
        assert_eq!(nl.g.shape(), (72, 57));
    }

    #[test]
    fn b_linearizes_the_error() {
        let sc = tables23();
        let m = forward_measurements(&sc, false).unwrap();
        let truth = State::truth(&sc);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        for mode in [Mode::Hybrid, Mode::NlosOnly] {
            let x = truth.to_vector(mode);
            let b = build_b(&m, &sc.bs, &truth, mode).unwrap();
            let base = m.stacked();
            let skip = if mode == Mode::Hybrid { 0 } else { m.los.len() };
            let dm = DVector::from_fn(b.nrows(), |_, _| {
                rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * 1e-6f64
            });
            let mut pert = base.clone();
            for i in 0..dm.len() {
                pert[skip + i] += dm[i];
            }
            let mp = m.with_stacked(&pert).unwrap();
            let sys = build_stage1(&mp, &sc.bs, mode).unwrap();
            let e = &sys.h - &sys.g * &x;
            let lin = &b * &dm;
            assert!((&e - &lin).norm() / e.norm() < 1e-3, "{mode:?}");
        }
    }

    #[test]
    fn zero_noise_recovery() {
        let sc = tables23();
        let m = noisy_ready(&sc);
        let est = stage1_solve(&m, &sc.bs, Mode::Hybrid, DEFAULT_ITERATIONS).unwrap();
        assert!((est.u - sc.ue_pos).norm() < 1e-6);
        assert!((est.u_dot.unwrap() - sc.ue_vel).norm() < 1e-6);
        for (p, &id) in est.scatterer_ids.iter().enumerate() {
            assert!((est.s[p] - sc.scatterers[id].pos).norm() < 1e-6);
        }
        assert_eq!(est.iterations_used, 2);
        assert!(!est.rank_warning);
    }

    #[test]
    fn cov_scales_with_q() {
        let sc = tables23();
        let m = noisy_ready(&sc);
        let q = m.cov.clone().unwrap();
        let a = stage1_solve(&m, &sc.bs, Mode::Hybrid, 2).unwrap();
        let b = stage1_solve(&m.clone().with_cov(&q * 7.0).unwrap(), &sc.bs, Mode::Hybrid, 2).unwrap();
        let rel = (&b.cov - &a.cov * 7.0).norm() / (a.cov.norm() * 7.0);
        assert!(rel < 1e-9, "{rel}");
    }

    #[test]
    fn nlos_only_identifiability() {
        let sc = tables23();
        // scatterers 0 and 6 sit on BS 1, scatterer 1 on BS 2
        let two = noisy_ready(&sc.with_scatterers(&[0, 1, 6]));
        let est = stage1_solve(&two, &sc.bs, Mode::NlosOnly, 2).unwrap();
        assert!((est.u - sc.ue_pos).norm() < 1e-6);
        assert!(est.u_dot.is_none());
        let one = noisy_ready(&sc.with_scatterers(&[0, 6, 12]));
        assert!(matches!(stage1_solve(&one, &sc.bs, Mode::NlosOnly, 2), Err(Error::RankDeficient { .. })));
        let few = noisy_ready(&sc.with_scatterers(&[0, 1]));
        assert!(matches!(build_stage1(&few, &sc.bs, Mode::NlosOnly), Err(Error::UnderDetermined { rows: 8, cols: 9 })));
    }

    #[test]
    fn hybrid_needs_two_bs() {
        let mut sc = tables23().with_scatterers(&[0, 6, 12, 1]);
        sc.bs.truncate(1);
        sc.scatterers.retain(|s| s.bs == 0);
        let m = forward_measurements(&sc, false).unwrap();
        assert!(matches!(build_stage1(&m, &sc.bs, Mode::Hybrid), Err(Error::MissingMeasurement(_))));
    }

    #[test]
    fn known_ue_recovers_scatterers() {
        let sc = tables23();
        let m = noisy_ready(&sc);
        let out = locate_scatterers_known_ue(&m, &sc.bs, &sc.ue_pos, 2).unwrap();
        for (p, &id) in m.scatterer_ids.iter().enumerate() {
            assert!((out[p].0 - sc.scatterers[id].pos).norm() < 1e-6);
        }
    }

    fn stage2_world() -> (Scenario, NlosRefinement, Stage2Context) {
        let mut sc = tables23();
        let n_v = sc.ue_vel.normalize();
        sc.scatterers = vec![Scatterer { pos: Vec3::new(240.0, 600.0, -19.0), vel: n_v * 5.0, bs: 4, surface: None }];
        let m = forward_measurements(&sc, true).unwrap();
        let [r, rd] = m.nlos_ranges.as_ref().unwrap()[0];
        let a = m.nlos_angles(0);
        let nr = NlosRefinement {
            m: [r, rd, a[0], a[1], a[2], a[3]],
            bs: sc.bs[4],
            prior: sc.scatterers[0].pos,
            prior_cov: Matrix3::identity() * 0.01,
            q: Matrix6::from_diagonal(&nalgebra::Vector6::new(0.05, 5e-4, 1e-6, 1e-6, 1e-6, 1e-6)),
        };
        let ctx = Stage2Context::from_ue(sc.ue_pos, sc.ue_vel, &sc.bs[0]).unwrap();
        (sc, nr, ctx)
    }

    #[test]
    fn stage2_identity_and_recovery() {
        let (sc, nr, ctx) = stage2_world();
        let s = sc.scatterers[0].pos;
        let sd = sc.scatterers[0].vel;
        let x = DVector::from_column_slice(&[s.x, s.y, s.z, sd.x, sd.y, sd.z]);
        for v in Stage2Variant::ALL {
            let sys = build_stage2(&nr, &ctx, v).unwrap();
            let res = &sys.h - &sys.g * &x;
            assert!(max_abs(&res) < 1e-9 * max_abs(&sys.h), "{v:?}");
            let est = stage2_solve(&nr, &ctx, v, 2).unwrap();
            assert!((est.s - s).norm() < 1e-6, "{v:?}");
            assert!((est.speed - 5.0).abs() < 1e-6, "{v:?}");
        }
    }

    #[test]
    fn stage2_b_linearizes_the_error() {
        let (sc, nr, ctx) = stage2_world();
        let s = sc.scatterers[0].pos;
        let sd = sc.scatterers[0].vel;
        let x = DVector::from_column_slice(&[s.x, s.y, s.z, sd.x, sd.y, sd.z]);
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(9);
        for v in Stage2Variant::ALL {
            let b = build_b2(&nr, &ctx, v, &s, &sd).unwrap();
            let rows = v.rows();
            let dm: Vec<f64> = rows
                .iter()
                .map(|_| rand_distr::Distribution::<f64>::sample(&rand_distr::StandardNormal, &mut rng) * 1e-6)
                .collect();
            let mut p = nr.clone();
            for (k, &i) in rows.iter().enumerate() {
                if i < 6 {
                    p.m[i] += dm[k];
                } else {
                    p.prior[i - 6] += dm[k];
                }
            }
            let sys = build_stage2(&p, &ctx, v).unwrap();
            let e = &sys.h - &sys.g * &x;
            let lin = &b * DVector::from_vec(dm);
            assert!((&e - &lin).norm() / e.norm() < 1e-3, "{v:?}: {}", (&e - &lin).norm() / e.norm());
        }
    }

    #[test]
    fn uninformative_prior_matches_channel_only() {
        let (_, mut nr, ctx) = stage2_world();
        nr.m[2] += 1e-3;
        nr.m[5] -= 2e-3;
        nr.m[0] += 0.1;
        nr.prior_cov *= 1e9;
        let full = stage2_solve(&nr, &ctx, Stage2Variant::Full, 2).unwrap();
        let chan = stage2_solve(&nr, &ctx, Stage2Variant::ChannelOnly, 2).unwrap();
        assert!((full.s - chan.s).norm() < 1e-4, "{}", (full.s - chan.s).norm());
        assert!((full.speed - chan.speed).abs() < 1e-4);
    }

    #[test]
    fn stopped_ue_has_no_velocity_direction() {
        let (_, nr, mut ctx) = stage2_world();
        ctx.u_dot = Vec3::zeros();
        assert!(matches!(
            stage2_solve(&nr, &ctx, Stage2Variant::Full, 2),
            Err(Error::VelocityDirectionUndefined { .. })
        ));
    }

    #[test]
    fn state_vector_round_trip() {
        let st = State::truth(&tables23());
        for mode in [Mode::Hybrid, Mode::NlosOnly] {
            let back = State::from_vector(&st.to_vector(mode), mode);
            assert_eq!(back.u, st.u);
            assert_eq!(back.s, st.s);
        }
        assert_eq!("nlos_only".parse::<Mode>().unwrap(), Mode::NlosOnly);
        assert!("x".parse::<Stage2Variant>().is_err());
    }
}
