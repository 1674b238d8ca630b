//! Cramér-Rao bounds for the stage-1 state and the stage-2 refinement, and
//! the identities tying them to the WLS covariance.

use nalgebra::{DMatrix, Matrix3, Matrix4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::{
    build_b, build_b2, build_stage1, build_stage2, reduce_velocity, stage2_q, Mode, NlosRefinement, Stage2Context,
    Stage2Variant, State,
};
use crate::geometry::{angle_gradients, forward_measurements, wrap_angle, LosGeometry, MeasurementSet, Scenario, Vec3};
use crate::linalg::{spd_inverse, symmetrize, weighted_lstsq, FIM_CONDITION_GUARD};

/// `∂m/∂xᵀ` at the true state.
#[derive(Debug, Clone, PartialEq)]
pub struct JacobianD {
    pub d: DMatrix<f64>,
    pub mode: Mode,
}

fn put(d: &mut DMatrix<f64>, row: usize, col: usize, v: &Vec3) {
    d.fixed_view_mut::<1, 3>(row, col).copy_from(&v.transpose());
}

/// Unit direction and ṙ-gradient `(u̇ − ṙ d)/r` of the LOS path from `b`.
fn los_rate_grad(b: &Vec3, sc: &Scenario) -> Result<(Vec3, Vec3)> {
    let g = LosGeometry::new(b, &sc.ue_pos, &sc.ue_vel)?;
    let dir = (sc.ue_pos - b) / g.range;
    Ok((dir, (sc.ue_vel - dir * g.rate) / g.range))
}

pub fn jacobian_d(sc: &Scenario, mode: Mode) -> Result<JacobianD> {
    let order = sc.path_order();
    let n_bs = sc.n_bs();
    let los_rows = if mode == Mode::Hybrid { 4 * n_bs - 2 } else { 0 };
    let rows = los_rows + 4 * order.len();
    let mut d = DMatrix::zeros(rows, mode.n_unknowns(order.len()));
    let u = sc.ue_pos;

    if mode == Mode::Hybrid {
        let (d1, k1) = los_rate_grad(&sc.bs[0], sc)?;
        for n in 1..n_bs {
            let (dn, kn) = los_rate_grad(&sc.bs[n], sc)?;
            let i = 2 * (n - 1);
            put(&mut d, i, 0, &(dn - d1));
            put(&mut d, i + 1, 0, &(kn - k1));
            put(&mut d, i + 1, 3, &(dn - d1));
        }
        for n in 0..n_bs {
            let (gphi, gtheta) = angle_gradients(&sc.bs[n], &u)?;
            let i = 2 * (n_bs - 1) + 2 * n;
            put(&mut d, i, 0, &gphi);
            put(&mut d, i + 1, 0, &gtheta);
        }
    }
    let off = mode.s_offset();
    for (p, &id) in order.iter().enumerate() {
        let s = sc.scatterers[id].pos;
        let b = sc.bs[sc.scatterers[id].bs];
        let (rphi, rtheta) = angle_gradients(&b, &s)?;
        let (tphi, ttheta) = angle_gradients(&s, &u)?;
        let i = los_rows + 4 * p;
        let col = off + 3 * p;
        put(&mut d, i, col, &rphi);
        put(&mut d, i + 1, col, &rtheta);
        put(&mut d, i + 2, 0, &tphi);
        put(&mut d, i + 3, 0, &ttheta);
        put(&mut d, i + 2, col, &(-tphi));
        put(&mut d, i + 3, col, &(-ttheta));
    }
    Ok(JacobianD { d, mode })
}

fn mode_slice(m: &MeasurementSet, mode: Mode) -> Vec<f64> {
    match mode {
        Mode::Hybrid => m.stacked().iter().copied().collect(),
        Mode::NlosOnly => m.nlos.clone(),
    }
}

fn coord_mut<'a>(sc: &'a mut Scenario, mode: Mode, order: &[usize], j: usize) -> &'a mut f64 {
    let off = mode.s_offset();
    if j < 3 {
        &mut sc.ue_pos[j]
    } else if j < off {
        &mut sc.ue_vel[j - 3]
    } else {
        let p = (j - off) / 3;
        &mut sc.scatterers[order[p]].pos[(j - off) % 3]
    }
}

/// Central-difference `∂m/∂xᵀ`, steps `1e-6·max(1, |x_i|)`.
///
/// Angle rows are differenced on the principal branch.
pub fn fd_jacobian(sc: &Scenario, mode: Mode) -> Result<DMatrix<f64>> {
    let order = sc.path_order();
    let base = forward_measurements(sc, false)?;
    let is_angle: Vec<bool> = {
        let k = if mode == Mode::Hybrid { 2 * (sc.n_bs() - 1) } else { 0 };
        (0..mode_slice(&base, mode).len()).map(|i| i >= k).collect()
    };
    let cols = mode.n_unknowns(order.len());
    let mut d = DMatrix::zeros(is_angle.len(), cols);
    for j in 0..cols {
        let mut plus = sc.clone();
        let mut minus = sc.clone();
        let x0 = *coord_mut(&mut plus, mode, &order, j);
        let step = 1e-6 * x0.abs().max(1.0);
        *coord_mut(&mut plus, mode, &order, j) = x0 + step;
        *coord_mut(&mut minus, mode, &order, j) = x0 - step;
        let mp = mode_slice(&forward_measurements(&plus, false)?, mode);
        let mm = mode_slice(&forward_measurements(&minus, false)?, mode);
        for i in 0..mp.len() {
            let diff = if is_angle[i] { wrap_angle(mp[i] - mm[i]) } else { mp[i] - mm[i] };
            d[(i, j)] = diff / (2.0 * step);
        }
    }
    Ok(d)
}

pub fn param_names(mode: Mode, n_paths: usize) -> Vec<String> {
    let xyz = ["x", "y", "z"];
    let mut names: Vec<String> = xyz.iter().map(|c| format!("u.{c}")).collect();
    if mode == Mode::Hybrid {
        names.extend(xyz.iter().map(|c| format!("u_dot.{c}")));
    }
    for p in 0..n_paths {
        names.extend(xyz.iter().map(|c| format!("s[{p}].{c}")));
    }
    names
}

/// Covariance block for the rows `mode` uses, given Q for the full stack or
/// already reduced.
pub fn reduce_q(q: &DMatrix<f64>, n_bs: usize, n_paths: usize, mode: Mode) -> Result<DMatrix<f64>> {
    let full = 4 * n_bs - 2 + 4 * n_paths;
    let nlos = 4 * n_paths;
    match (mode, q.nrows()) {
        (Mode::Hybrid, r) if r == full => Ok(q.clone()),
        (Mode::NlosOnly, r) if r == full => Ok(q.view((full - nlos, full - nlos), (nlos, nlos)).into_owned()),
        (Mode::NlosOnly, r) if r == nlos => Ok(q.clone()),
        (_, r) => Err(Error::DimensionMismatch(format!("Q has {r} rows, expected {full}"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crlb {
    pub mode: Mode,
    pub cov: DMatrix<f64>,
}

impl Crlb {
    fn block_trace(&self, off: usize) -> f64 {
        (0..3).map(|i| self.cov[(off + i, off + i)]).sum()
    }

    pub fn n_paths(&self) -> usize {
        (self.cov.nrows() - self.mode.s_offset()) / 3
    }

    /// √trace of the UE position block.
    pub fn u(&self) -> f64 {
        self.block_trace(0).sqrt()
    }

    pub fn u_dot(&self) -> Option<f64> {
        (self.mode == Mode::Hybrid).then(|| self.block_trace(3).sqrt())
    }

    pub fn s(&self, p: usize) -> f64 {
        self.block_trace(self.mode.s_offset() + 3 * p).sqrt()
    }

    /// Root of the mean scatterer-block trace.
    pub fn s_mean(&self) -> f64 {
        let n = self.n_paths();
        if n == 0 {
            return 0.0;
        }
        ((0..n).map(|p| self.s(p).powi(2)).sum::<f64>() / n as f64).sqrt()
    }

    pub fn s_block(&self, p: usize) -> Matrix3<f64> {
        let off = self.mode.s_offset() + 3 * p;
        self.cov.fixed_view::<3, 3>(off, off).into_owned()
    }
}

pub fn crlb_stage1(sc: &Scenario, q: &DMatrix<f64>, mode: Mode) -> Result<Crlb> {
    let d = jacobian_d(sc, mode)?.d;
    let n_paths = sc.n_scatterers();
    let q = reduce_q(q, sc.n_bs(), n_paths, mode)?;
    let qi = spd_inverse(&q, f64::INFINITY, None)?;
    let fim = symmetrize(&(d.transpose() * qi * &d));
    let names = param_names(mode, n_paths);
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let cov = spd_inverse(&fim, FIM_CONDITION_GUARD, Some(&names))?;
    Ok(Crlb { mode, cov })
}

/// Scatterer bounds from NLOS angles alone with the UE position known.
pub fn crlb_known_ue(sc: &Scenario, q: &DMatrix<f64>) -> Result<Vec<Matrix3<f64>>> {
    let n_paths = sc.n_scatterers();
    let q = reduce_q(q, sc.n_bs(), n_paths, Mode::NlosOnly)?;
    sc.path_order()
        .iter()
        .enumerate()
        .map(|(p, &id)| {
            let s = sc.scatterers[id].pos;
            let (rphi, rtheta) = angle_gradients(&sc.bs[sc.scatterers[id].bs], &s)?;
            let (tphi, ttheta) = angle_gradients(&s, &sc.ue_pos)?;
            let mut d = DMatrix::zeros(4, 3);
            for (i, g) in [rphi, rtheta, -tphi, -ttheta].iter().enumerate() {
                put(&mut d, i, 0, g);
            }
            let qp = q.view((4 * p, 4 * p), (4, 4)).into_owned();
            let fim = d.transpose() * spd_inverse(&qp, f64::INFINITY, None)? * &d;
            let cov = spd_inverse(&symmetrize(&fim), FIM_CONDITION_GUARD, Some(&["s.x", "s.y", "s.z"]))?;
            Ok(cov.fixed_view::<3, 3>(0, 0).into_owned())
        })
        .collect()
}

/// The stage-2 covariance `(Gᵀ(BQBᵀ)⁻¹G)⁻¹` with `G = G^s K`, evaluated at
/// the true scatterer state (`nr` built from noise-free values).
pub fn crlb_stage2(
    nr: &NlosRefinement,
    ctx: &Stage2Context,
    variant: Stage2Variant,
    s: &Vec3,
    s_dot: &Vec3,
) -> Result<Matrix4<f64>> {
    let n_v = ctx.n_v()?;
    let sys = build_stage2(nr, ctx, variant)?;
    let gk = reduce_velocity(&sys.g, &n_v);
    let b = build_b2(nr, ctx, variant, s, s_dot)?;
    let c = &b * stage2_q(nr, variant) * b.transpose();
    let sol = weighted_lstsq(&gk, &sys.h, &c)?;
    Ok(Matrix4::from_iterator(sol.cov.iter().copied()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    /// max over rows of `max_j |BD − G|_ij / max_j |G_ij|`
    pub max_rel_err: f64,
    /// `|tr(cov) − tr(CRLB)| / tr(CRLB)`
    pub trace_gap: f64,
}

pub fn verify_efficiency(sc: &Scenario, q: &DMatrix<f64>, mode: Mode) -> Result<EfficiencyReport> {
    let m = forward_measurements(sc, false)?;
    let sys = build_stage1(&m, &sc.bs, mode)?;
    let b = build_b(&m, &sc.bs, &State::truth(sc), mode)?;
    let d = jacobian_d(sc, mode)?.d;
    let bd = &b * &d;
    let mut max_rel_err = 0.0f64;
    for i in 0..bd.nrows() {
        let scale = sys.g.row(i).amax();
        if scale > 0.0 {
            max_rel_err = max_rel_err.max((bd.row(i) - sys.g.row(i)).amax() / scale);
        }
    }
    let qm = reduce_q(q, sc.n_bs(), sc.n_scatterers(), mode)?;
    let c = &b * &qm * b.transpose();
    let wls = weighted_lstsq(&sys.g, &sys.h, &c)?.cov;
    let crlb = crlb_stage1(sc, q, mode)?.cov;
    let trace_gap = (wls.trace() - crlb.trace()).abs() / crlb.trace();
    Ok(EfficiencyReport { max_rel_err, trace_gap })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{assemble_q_synthetic, SyntheticNoise};
    use crate::scenario::tables23;
    use proptest::prelude::*;

    fn synth_q(sc: &Scenario, rho: f64) -> DMatrix<f64> {
        assemble_q_synthetic(sc.n_bs(), sc.n_scatterers(), &SyntheticNoise::from_rho(rho, 0.1)).unwrap().q()
    }

    #[test]
    fn zero_structure() {
        let sc = tables23();
        let d = jacobian_d(&sc, Mode::Hybrid).unwrap().d;
        // LOS angle rows: only u columns
        assert!(d.view((10, 3), (12, 57)).iter().all(|&x| x == 0.0));
        // TDOA rows have no u̇ dependence
        for n in 0..5 {
            assert!(d.view((2 * n, 3), (1, 3)).iter().all(|&x| x == 0.0));
        }
        // NLOS rows never touch u̇ and only their own scatterer
        for p in 0..18 {
            let i = 22 + 4 * p;
            assert!(d.view((i, 3), (4, 3)).iter().all(|&x| x == 0.0));
            for k in 0..18 {
                if k != p {
                    assert!(d.view((i, 6 + 3 * k), (4, 3)).iter().all(|&x| x == 0.0));
                }
            }
            // AOA rows do not depend on u
            assert!(d.view((i, 0), (2, 3)).iter().all(|&x| x == 0.0));
            // AOD rows: ∂/∂s = −∂/∂u
            for r in 2..4 {
                for c in 0..3 {
                    assert_eq!(d[(i + r, 6 + 3 * p + c)], -d[(i + r, c)]);
                }
            }
        }
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let sc = tables23();
        for mode in [Mode::Hybrid, Mode::NlosOnly] {
            let a = jacobian_d(&sc, mode).unwrap().d;
            let f = fd_jacobian(&sc, mode).unwrap();
            for (x, y) in a.iter().zip(f.iter()) {
                if *x != 0.0 {
                    assert!((x - y).abs() <= 1e-6 * x.abs().max(1e-3), "{x} vs {y}");
                } else {
                    assert!(y.abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn efficiency_identity_holds() {
        let sc = tables23();
        let q = synth_q(&sc, 1.0);
        for mode in [Mode::Hybrid, Mode::NlosOnly] {
            let rep = verify_efficiency(&sc, &q, mode).unwrap();
            assert!(rep.max_rel_err < 1e-10, "{mode:?} {rep:?}");
            assert!(rep.trace_gap < 1e-9, "{mode:?} {rep:?}");
        }
    }

    #[test]
    fn remark2_cases() {
        let sc = tables23();
        let two = sc.with_scatterers(&[0, 1, 6]);
        let c = crlb_stage1(&two, &synth_q(&two, 1.0), Mode::NlosOnly).unwrap();
        assert!(c.u().is_finite() && c.u() > 0.0);
        let one = sc.with_scatterers(&[0, 6, 12]);
        assert!(matches!(crlb_stage1(&one, &synth_q(&one, 1.0), Mode::NlosOnly), Err(Error::Unidentifiable { .. })));
    }

    #[test]
    fn adding_paths_never_hurts() {
        let sc = tables23();
        let mut prev = f64::INFINITY;
        for k in 0..=18 {
            let ids: Vec<usize> = (0..k).collect();
            let sub = sc.with_scatterers(&ids);
            let c = crlb_stage1(&sub, &synth_q(&sub, 1.0), Mode::Hybrid).unwrap();
            assert!(c.u() <= prev * (1.0 + 1e-12));
            prev = c.u();
        }
    }

    #[test]
    fn known_ue_floor_is_below_joint_bound() {
        let sc = tables23();
        let q = synth_q(&sc, 1.0);
        let joint = crlb_stage1(&sc, &q, Mode::Hybrid).unwrap();
        let floor = crlb_known_ue(&sc, &q).unwrap();
        for (p, f) in floor.iter().enumerate() {
            assert!(f.trace() <= joint.s_block(p).trace() * (1.0 + 1e-9));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn crlb_scales_with_q(c in 1e-3..1e3f64, rho in 0.1..10.0f64) {
            let sc = tables23();
            let q = synth_q(&sc, rho);
            let a = crlb_stage1(&sc, &q, Mode::Hybrid).unwrap().cov;
            let b = crlb_stage1(&sc, &(&q * c), Mode::Hybrid).unwrap().cov;
            prop_assert!((&b - &a * c).norm() <= 1e-8 * (a.norm() * c));
        }

        #[test]
        fn crlb_monotone_in_rho(r1 in 0.1..5.0f64, k in 1.01..2.0f64) {
            let sc = tables23();
            let a = crlb_stage1(&sc, &synth_q(&sc, r1), Mode::Hybrid).unwrap();
            let b = crlb_stage1(&sc, &synth_q(&sc, r1 * k), Mode::Hybrid).unwrap();
            prop_assert!(b.u() > a.u());
        }

        #[test]
        fn extra_rows_shrink_every_diagonal(drop in 0usize..18) {
            let sc = tables23();
            let ids: Vec<usize> = (0..18).filter(|&i| i != drop).collect();
            let sub = sc.with_scatterers(&ids);
            let big = crlb_stage1(&sc, &synth_q(&sc, 1.0), Mode::Hybrid).unwrap();
            let small = crlb_stage1(&sub, &synth_q(&sub, 1.0), Mode::Hybrid).unwrap();
            for i in 0..6 {
                prop_assert!(big.cov[(i, i)] <= small.cov[(i, i)] * (1.0 + 1e-10));
            }
        }
    }
}
