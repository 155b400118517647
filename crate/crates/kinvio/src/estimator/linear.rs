//! Normal-equation assembly, the damped Schur-complement solve, and
//! Schur-complement marginalization with the dense prior.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use super::factors::{eval_factor, EvalContext, Factor, FactorEval};
use super::{StateValue, VarKey, WindowStates};

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("reduced system is not positive definite after damping")]
    NonPsd,
    #[error("missing IMU coverage for frame interval [{0}, {1}]")]
    MissingImu(f64, f64),
    #[error("dataset error: {0}")]
    Data(String),
}

/// Layout of the non-landmark variables in the dense reduced system.
#[derive(Debug, Clone)]
pub struct Layout {
    pub offsets: BTreeMap<VarKey, usize>,
    pub order: Vec<VarKey>,
    pub dim: usize,
}

impl Layout {
    pub fn new(vars: impl IntoIterator<Item = VarKey>) -> Self {
        let set: BTreeSet<VarKey> = vars.into_iter().collect();
        let mut offsets = BTreeMap::new();
        let mut order = Vec::new();
        let mut dim = 0;
        for v in set {
            offsets.insert(v, dim);
            order.push(v);
            dim += v.dim();
        }
        Self {
            offsets,
            order,
            dim,
        }
    }
}

/// Per-landmark accumulators for the Schur complement. `h_lp` is dense in
/// storage but only the `active` column ranges are nonzero.
struct LandmarkBlock {
    h_ll: Matrix3<f64>,
    h_lp: DMatrix<f64>,
    b_l: Vector3<f64>,
    active: BTreeSet<(usize, usize)>,
}

/// Assembled Gauss-Newton system: dense pose/global block plus
/// block-diagonal landmark part.
pub struct Assembled {
    pub h_pp: DMatrix<f64>,
    pub b_p: DVector<f64>,
    lm_blocks: BTreeMap<u64, LandmarkBlock>,
    pub energy: f64,
    pub skipped_factors: usize,
}

impl Assembled {
    /// Infinity norm of the full (negative) gradient.
    pub fn gradient_norm(&self) -> f64 {
        let mut g = self.b_p.amax();
        for blk in self.lm_blocks.values() {
            g = g.max(blk.b_l.amax());
        }
        g
    }
}

/// Dense quadratic prior from marginalization, kept as
/// `E(x) = delta^T H delta + 2 b^T delta + const` with
/// `delta = x (-) lin`.
#[derive(Debug, Clone)]
pub struct MargPrior {
    pub lin: BTreeMap<VarKey, StateValue>,
    pub order: Vec<VarKey>,
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl MargPrior {
    pub fn dim(&self) -> usize {
        self.h.nrows()
    }

    fn offsets(&self) -> BTreeMap<VarKey, usize> {
        let mut m = BTreeMap::new();
        let mut off = 0;
        for v in &self.order {
            m.insert(*v, off);
            off += v.dim();
        }
        m
    }

    /// Stacked chart coordinates of the current states around the stored
    /// linearization points.
    pub fn delta(&self, states: &WindowStates) -> DVector<f64> {
        let mut d = DVector::zeros(self.dim());
        let mut off = 0;
        for v in &self.order {
            let dv = states.local(*v, &self.lin[v]);
            d.rows_mut(off, v.dim()).copy_from(&dv);
            off += v.dim();
        }
        d
    }

    pub fn energy(&self, states: &WindowStates) -> f64 {
        let d = self.delta(states);
        (d.transpose() * &self.h * &d)[(0, 0)] + 2.0 * self.b.dot(&d)
    }

    /// Re-express the prior around new linearization points for the given
    /// variables (first-order shift); used to move local variables to
    /// their current estimates before a marginalization event.
    pub fn shift_to(&mut self, states: &WindowStates, vars: &BTreeSet<VarKey>) {
        let offsets = self.offsets();
        let mut s = DVector::zeros(self.dim());
        for v in &self.order {
            if !vars.contains(v) {
                continue;
            }
            let dv = states.local(*v, &self.lin[v]);
            s.rows_mut(offsets[v], v.dim()).copy_from(&dv);
        }
        self.b += &self.h * s;
        for v in &self.order {
            if vars.contains(v) {
                self.lin.insert(*v, states.get(*v));
            }
        }
    }
}

/// Assemble the full system at the current states. Factors whose
/// evaluation is invalid (landmark behind a camera) are skipped.
pub fn assemble(
    factors: &[Factor],
    prior: Option<&MargPrior>,
    states: &WindowStates,
    ctx: &EvalContext,
    layout: &Layout,
) -> Assembled {
    let n = layout.dim;
    let mut h_pp = DMatrix::zeros(n, n);
    let mut b_p = DVector::zeros(n);
    let mut lm_blocks: BTreeMap<u64, LandmarkBlock> = BTreeMap::new();
    let mut energy = 0.0;
    let mut skipped = 0usize;

    for f in factors {
        // Visual factors dominate the count; accumulate them through a
        // fixed-size path without heap traffic.
        if let Factor::Visual {
            target,
            host,
            landmark,
            cam,
            z,
        } = f
        {
            let Some(t) =
                super::factors::visual_terms(states, ctx, *target, *host, *landmark, *cam, z)
            else {
                skipped += 1;
                continue;
            };
            energy += t.energy;
            let o_t = layout.offsets[&VarKey::FramePose(*target)];
            let o_h = layout.offsets[&VarKey::FramePose(*host)];
            let (j_t, j_h) = if target == host {
                (t.j_target + t.j_host, nalgebra::SMatrix::<f64, 2, 6>::zeros())
            } else {
                (t.j_target, t.j_host)
            };
            let same = target == host;
            // Pose-pose blocks.
            let add_block =
                |h: &mut DMatrix<f64>, oa: usize, ob: usize, ja: &nalgebra::SMatrix<f64, 2, 6>, jb: &nalgebra::SMatrix<f64, 2, 6>| {
                    for i in 0..6 {
                        for jj in 0..6 {
                            h[(oa + i, ob + jj)] +=
                                ja[(0, i)] * jb[(0, jj)] + ja[(1, i)] * jb[(1, jj)];
                        }
                    }
                };
            add_block(&mut h_pp, o_t, o_t, &j_t, &j_t);
            if !same {
                add_block(&mut h_pp, o_h, o_h, &j_h, &j_h);
                add_block(&mut h_pp, o_t, o_h, &j_t, &j_h);
                add_block(&mut h_pp, o_h, o_t, &j_h, &j_t);
            }
            for i in 0..6 {
                b_p[o_t + i] -= j_t[(0, i)] * t.residual.x + j_t[(1, i)] * t.residual.y;
                if !same {
                    b_p[o_h + i] -= j_h[(0, i)] * t.residual.x + j_h[(1, i)] * t.residual.y;
                }
            }
            let block = lm_blocks.entry(*landmark).or_insert_with(|| LandmarkBlock {
                h_ll: Matrix3::zeros(),
                h_lp: DMatrix::zeros(3, n),
                b_l: Vector3::zeros(),
                active: BTreeSet::new(),
            });
            block.active.insert((o_t, 6));
            if !same {
                block.active.insert((o_h, 6));
            }
            for i in 0..3 {
                for jj in 0..3 {
                    block.h_ll[(i, jj)] +=
                        t.j_lm[(0, i)] * t.j_lm[(0, jj)] + t.j_lm[(1, i)] * t.j_lm[(1, jj)];
                }
                for jj in 0..6 {
                    block.h_lp[(i, o_t + jj)] +=
                        t.j_lm[(0, i)] * j_t[(0, jj)] + t.j_lm[(1, i)] * j_t[(1, jj)];
                    if !same {
                        block.h_lp[(i, o_h + jj)] +=
                            t.j_lm[(0, i)] * j_h[(0, jj)] + t.j_lm[(1, i)] * j_h[(1, jj)];
                    }
                }
                block.b_l[i] -= t.j_lm[(0, i)] * t.residual.x + t.j_lm[(1, i)] * t.residual.y;
            }
            continue;
        }

        let Some(FactorEval {
            residual,
            blocks,
            energy: e,
        }) = eval_factor(f, states, ctx)
        else {
            skipped += 1;
            continue;
        };
        energy += e;
        // Split blocks into pose-side and landmark-side.
        let mut lm_part: Option<(u64, &DMatrix<f64>)> = None;
        let mut pose_parts: Vec<(usize, &DMatrix<f64>)> = Vec::new();
        for (var, j) in &blocks {
            match var {
                VarKey::Landmark(id) => lm_part = Some((*id, j)),
                _ => pose_parts.push((layout.offsets[var], j)),
            }
        }
        let rows = residual.len();
        for (oa, ja) in &pose_parts {
            for (ob, jb) in &pose_parts {
                for i in 0..ja.ncols() {
                    for j in 0..jb.ncols() {
                        let mut s = 0.0;
                        for r in 0..rows {
                            s += ja[(r, i)] * jb[(r, j)];
                        }
                        h_pp[(*oa + i, *ob + j)] += s;
                    }
                }
            }
            for i in 0..ja.ncols() {
                let mut s = 0.0;
                for r in 0..rows {
                    s += ja[(r, i)] * residual[r];
                }
                b_p[*oa + i] -= s;
            }
        }
        if let Some((lid, jl)) = lm_part {
            let block = lm_blocks.entry(lid).or_insert_with(|| LandmarkBlock {
                h_ll: Matrix3::zeros(),
                h_lp: DMatrix::zeros(3, n),
                b_l: Vector3::zeros(),
                active: BTreeSet::new(),
            });
            for (oa, ja) in &pose_parts {
                block.active.insert((*oa, ja.ncols()));
            }
            for i in 0..3 {
                for j in 0..3 {
                    let mut s = 0.0;
                    for r in 0..rows {
                        s += jl[(r, i)] * jl[(r, j)];
                    }
                    block.h_ll[(i, j)] += s;
                }
                for (oa, ja) in &pose_parts {
                    for j in 0..ja.ncols() {
                        let mut s = 0.0;
                        for r in 0..rows {
                            s += jl[(r, i)] * ja[(r, j)];
                        }
                        block.h_lp[(i, *oa + j)] += s;
                    }
                }
                let mut s = 0.0;
                for r in 0..rows {
                    s += jl[(r, i)] * residual[r];
                }
                block.b_l[i] -= s;
            }
        }
    }

    if let Some(p) = prior {
        let offsets = p.offsets();
        let d0 = p.delta(states);
        let grad = &p.h * &d0 + &p.b;
        energy += (d0.transpose() * &p.h * &d0)[(0, 0)] + 2.0 * p.b.dot(&d0);
        let mut row_off = 0;
        for va in &p.order {
            let mut col_off = 0;
            let oa = layout.offsets[va];
            for vb in &p.order {
                let ob = layout.offsets[vb];
                h_pp
                    .view_mut((oa, ob), (va.dim(), vb.dim()))
                    .add_assign(&p.h.view((row_off, col_off), (va.dim(), vb.dim())));
                col_off += vb.dim();
            }
            b_p.rows_mut(oa, va.dim())
                .sub_assign(&grad.rows(row_off, va.dim()));
            row_off += va.dim();
        }
        let _ = offsets;
    }

    Assembled {
        h_pp,
        b_p,
        lm_blocks,
        energy,
        skipped_factors: skipped,
    }
}

/// Total robust energy at the current states (no Jacobians).
pub fn total_energy(
    factors: &[Factor],
    prior: Option<&MargPrior>,
    states: &WindowStates,
    ctx: &EvalContext,
) -> f64 {
    let mut e = 0.0;
    for f in factors {
        if let Some(ev) = eval_factor(f, states, ctx) {
            e += ev.energy;
        }
    }
    if let Some(p) = prior {
        e += p.energy(states);
    }
    e
}

/// Solution of one damped step.
pub struct Step {
    pub delta_p: DVector<f64>,
    pub delta_lm: BTreeMap<u64, Vector3<f64>>,
    pub norm: f64,
}

/// Solve the damped system via the landmark Schur complement. Returns
/// `None` when the reduced matrix is not positive definite.
pub fn solve_damped(asm: &Assembled, lambda: f64) -> Option<Step> {
    let n = asm.h_pp.nrows();
    let mut h_red = asm.h_pp.clone();
    let mut b_red = asm.b_p.clone();
    for i in 0..n {
        h_red[(i, i)] += lambda * asm.h_pp[(i, i)].max(1e-8);
    }

    let mut lm_inv: BTreeMap<u64, Matrix3<f64>> = BTreeMap::new();
    for (id, blk) in &asm.lm_blocks {
        let mut h_ll = blk.h_ll;
        for i in 0..3 {
            h_ll[(i, i)] += lambda * blk.h_ll[(i, i)].max(1e-8);
        }
        let inv = h_ll.try_inverse()?;
        // H_red -= H_pl H_ll^-1 H_lp ; b_red -= H_pl H_ll^-1 b_l,
        // touching only the active column ranges.
        let inv_b = inv * blk.b_l;
        for (oa, la) in &blk.active {
            for i in 0..*la {
                let ca = oa + i;
                let col_a = Vector3::new(blk.h_lp[(0, ca)], blk.h_lp[(1, ca)], blk.h_lp[(2, ca)]);
                let inv_col_a = inv * col_a;
                for (ob, lb) in &blk.active {
                    for j in 0..*lb {
                        let cb = ob + j;
                        h_red[(ca, cb)] -= inv_col_a.x * blk.h_lp[(0, cb)]
                            + inv_col_a.y * blk.h_lp[(1, cb)]
                            + inv_col_a.z * blk.h_lp[(2, cb)];
                    }
                }
                b_red[ca] -=
                    blk.h_lp[(0, ca)] * inv_b.x + blk.h_lp[(1, ca)] * inv_b.y + blk.h_lp[(2, ca)] * inv_b.z;
            }
        }
        lm_inv.insert(*id, inv);
    }

    let chol = nalgebra::Cholesky::new(h_red)?;
    let delta_p = chol.solve(&b_red);

    let mut delta_lm = BTreeMap::new();
    let mut norm2 = delta_p.norm_squared();
    for (id, blk) in &asm.lm_blocks {
        let mut hx = Vector3::zeros();
        for (oa, la) in &blk.active {
            for i in 0..*la {
                let c = oa + i;
                let d = delta_p[c];
                hx.x += blk.h_lp[(0, c)] * d;
                hx.y += blk.h_lp[(1, c)] * d;
                hx.z += blk.h_lp[(2, c)] * d;
            }
        }
        let dl = lm_inv[id] * (blk.b_l - hx);
        norm2 += dl.norm_squared();
        delta_lm.insert(*id, dl);
    }
    Some(Step {
        delta_p,
        delta_lm,
        norm: norm2.sqrt(),
    })
}

/// Undamped reduced Hessian over the non-landmark variables (landmarks
/// Schur-eliminated), used by diagnostics.
pub fn reduced_hessian(asm: &Assembled) -> Option<DMatrix<f64>> {
    let mut h_red = asm.h_pp.clone();
    for blk in asm.lm_blocks.values() {
        let inv = pseudo_inverse3(&blk.h_ll);
        for (oa, la) in &blk.active {
            for i in 0..*la {
                let ca = oa + i;
                let col_a = Vector3::new(blk.h_lp[(0, ca)], blk.h_lp[(1, ca)], blk.h_lp[(2, ca)]);
                let inv_col_a = inv * col_a;
                for (ob, lb) in &blk.active {
                    for j in 0..*lb {
                        let cb = ob + j;
                        h_red[(ca, cb)] -= inv_col_a.x * blk.h_lp[(0, cb)]
                            + inv_col_a.y * blk.h_lp[(1, cb)]
                            + inv_col_a.z * blk.h_lp[(2, cb)];
                    }
                }
            }
        }
    }
    Some(h_red)
}

fn pseudo_inverse3(m: &Matrix3<f64>) -> Matrix3<f64> {
    let eig = nalgebra::SymmetricEigen::new(*m);
    let max_ev = eig.eigenvalues.amax().max(1e-300);
    let mut inv_vals = eig.eigenvalues;
    for v in inv_vals.iter_mut() {
        *v = if *v > 1e-12 * max_ev { 1.0 / *v } else { 0.0 };
    }
    eig.eigenvectors * Matrix3::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

fn pseudo_inverse(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let max_ev = eig.eigenvalues.amax().max(1e-300);
    let mut inv_vals = eig.eigenvalues.clone();
    for v in inv_vals.iter_mut() {
        *v = if *v > 1e-12 * max_ev { 1.0 / *v } else { 0.0 };
    }
    &eig.eigenvectors * DMatrix::from_diagonal(&inv_vals) * eig.eigenvectors.transpose()
}

/// Schur-complement marginalization: absorb `absorbed` factors (linearized
/// at the current states, with globals at their frozen points handled by
/// the caller) together with the existing prior, then eliminate the `kill`
/// variables. Returns the new prior over the remaining variables.
pub fn marginalize(
    prior: Option<&MargPrior>,
    absorbed: &[Factor],
    kill: &BTreeSet<VarKey>,
    states: &WindowStates,
    ctx: &EvalContext,
) -> Option<MargPrior> {
    // Variable set: prior vars plus absorbed-factor vars.
    let mut vars: BTreeSet<VarKey> = BTreeSet::new();
    if let Some(p) = prior {
        vars.extend(p.order.iter().copied());
    }
    for f in absorbed {
        vars.extend(f.vars());
    }
    if vars.is_empty() {
        return prior.cloned();
    }

    // Order: kill block first, keep block second (each sorted).
    let kill_vars: Vec<VarKey> = vars.iter().copied().filter(|v| kill.contains(v)).collect();
    let keep_vars: Vec<VarKey> = vars.iter().copied().filter(|v| !kill.contains(v)).collect();
    let mut offsets = BTreeMap::new();
    let mut dim = 0;
    for v in kill_vars.iter().chain(keep_vars.iter()) {
        offsets.insert(*v, dim);
        dim += v.dim();
    }
    let m_dim: usize = kill_vars.iter().map(|v| v.dim()).sum();
    let k_dim = dim - m_dim;

    let mut h = DMatrix::zeros(dim, dim);
    let mut b = DVector::zeros(dim);

    if let Some(p) = prior {
        let mut row_off = 0;
        for va in &p.order {
            let oa = offsets[va];
            let mut col_off = 0;
            for vb in &p.order {
                let ob = offsets[vb];
                h.view_mut((oa, ob), (va.dim(), vb.dim()))
                    .add_assign(&p.h.view((row_off, col_off), (va.dim(), vb.dim())));
                col_off += vb.dim();
            }
            b.rows_mut(oa, va.dim())
                .add_assign(&p.b.rows(row_off, va.dim()));
            row_off += va.dim();
        }
    }

    for f in absorbed {
        let Some(ev) = eval_factor(f, states, ctx) else {
            continue;
        };
        for (va, ja) in &ev.blocks {
            let oa = offsets[va];
            let jat = ja.transpose();
            for (vb, jb) in &ev.blocks {
                let ob = offsets[vb];
                h.view_mut((oa, ob), (ja.ncols(), jb.ncols()))
                    .add_assign(&(&jat * jb));
            }
            b.rows_mut(oa, ja.ncols()).add_assign(&(&jat * &ev.residual));
        }
    }

    if m_dim == 0 {
        // Nothing to eliminate; prior just gains the absorbed information.
        let lin = keep_vars
            .iter()
            .map(|v| {
                let val = prior
                    .and_then(|p| p.lin.get(v).cloned())
                    .unwrap_or_else(|| states.get(*v));
                (*v, val)
            })
            .collect();
        return Some(MargPrior {
            lin,
            order: keep_vars,
            h,
            b,
        });
    }
    if k_dim == 0 {
        return None;
    }

    let h_mm = h.view((0, 0), (m_dim, m_dim)).into_owned();
    let h_mk = h.view((0, m_dim), (m_dim, k_dim)).into_owned();
    let h_kk = h.view((m_dim, m_dim), (k_dim, k_dim)).into_owned();
    let b_m = b.rows(0, m_dim).into_owned();
    let b_k = b.rows(m_dim, k_dim).into_owned();

    let h_mm_inv = pseudo_inverse(&h_mm);
    let h_km_inv = h_mk.transpose() * &h_mm_inv;
    let mut h_new = h_kk - &h_km_inv * &h_mk;
    let mut b_new = b_k - &h_km_inv * b_m;
    // Symmetrize, then project onto the PSD cone: rank-deficient H_mm
    // blocks can leave small negative eigenvalues behind, which would make
    // the prior energy unbounded below. The linear term is restricted to
    // the range of the projected Hessian for the same reason.
    h_new = 0.5 * (&h_new + h_new.transpose());
    let eig = nalgebra::SymmetricEigen::new(h_new);
    let max_ev = eig.eigenvalues.amax().max(1e-300);
    let mut clamped = eig.eigenvalues.clone();
    let mut range_mask = eig.eigenvalues.clone();
    for (v, m) in clamped.iter_mut().zip(range_mask.iter_mut()) {
        if *v > 1e-12 * max_ev {
            *m = 1.0;
        } else {
            *v = 0.0;
            *m = 0.0;
        }
    }
    let h_new = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    b_new = &eig.eigenvectors * DMatrix::from_diagonal(&range_mask) * eig.eigenvectors.transpose() * b_new;

    let lin = keep_vars
        .iter()
        .map(|v| {
            let val = prior
                .and_then(|p| p.lin.get(v).cloned())
                .unwrap_or_else(|| states.get(*v));
            (*v, val)
        })
        .collect();
    Some(MargPrior {
        lin,
        order: keep_vars,
        h: h_new,
        b: b_new,
    })
}

/// Drop variables from the prior by plain removal (used for variables that
/// carry no information, e.g. when a run is aborted); marginalizing them
/// with an empty factor set is equivalent.
pub fn prior_contains(prior: &MargPrior, var: &VarKey) -> bool {
    prior.lin.contains_key(var)
}

use std::ops::{AddAssign, SubAssign};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::FrameState;
    use crate::geometry::Pose3;
    use crate::motion::RbfParams;
    use crate::plane::PlaneParams;
    use crate::preint::ImuBias;
    use nalgebra::Vector6;

    fn empty_states() -> WindowStates {
        WindowStates {
            frames: BTreeMap::new(),
            landmarks: BTreeMap::new(),
            rbf: RbfParams::default(),
            plane: PlaneParams::identity(),
        }
    }

    fn ctx() -> EvalContext {
        EvalContext {
            fx: 300.0,
            fy: 300.0,
            cx: 320.0,
            cy: 240.0,
            baseline: 0.064,
            sigma_px: 1.0,
            huber_px: 1.5,
            gravity: Vector3::new(0.0, 0.0, -9.81),
            noise: Default::default(),
            motion_sigma: Vector3::new(0.02, 0.005, 0.05),
            lateral_strict: false,
            extr_walk_sqrt_info: Vector6::from_element(1.0),
            plane_sqrt_info: Vector3::from_element(1.0),
        }
    }

    fn vel_prior(id: u64, mean: Vector3<f64>, w: f64) -> Factor {
        Factor::Prior {
            var: VarKey::FrameVel(id),
            mean: StateValue::Vec3(mean),
            sqrt_info: DVector::from_element(3, w),
        }
    }

    #[test]
    fn marginalizing_unconnected_state_keeps_prior() {
        // A prior over vel(1) is untouched by killing vel(0) when no factor
        // links them.
        let mut states = empty_states();
        for id in 0..2 {
            states.frames.insert(
                id,
                FrameState {
                    t: id as f64,
                    pose: Pose3::identity(),
                    vel: Vector3::zeros(),
                    bias: ImuBias::zero(),
                    extr: Pose3::identity(),
                },
            );
        }
        let f = vel_prior(1, Vector3::new(0.1, 0.0, 0.0), 2.0);
        let prior = marginalize(
            None,
            &[f],
            &BTreeSet::new(),
            &states,
            &ctx(),
        )
        .unwrap();
        let kill: BTreeSet<VarKey> = [VarKey::FrameVel(0)].into();
        let after = marginalize(Some(&prior), &[], &kill, &states, &ctx()).unwrap();
        assert_eq!(after.order, prior.order);
        assert!((&after.h - &prior.h).norm() < 1e-12);
        assert!((&after.b - &prior.b).norm() < 1e-12);
    }

    #[test]
    fn two_variable_gaussian_matches_closed_form() {
        // E = (x - 1)^2 + 4 (y - x)^2, marginalize x: the Schur complement
        // must reproduce the analytic marginal over y.
        let mut states = empty_states();
        for id in 0..2 {
            states.frames.insert(
                id,
                FrameState {
                    t: id as f64,
                    pose: Pose3::identity(),
                    vel: Vector3::zeros(),
                    bias: ImuBias::zero(),
                    extr: Pose3::identity(),
                },
            );
        }
        // Use only the first velocity component by zero-weighting others.
        let mut w1 = DVector::from_element(3, 0.0);
        w1[0] = 1.0;
        let prior_x = Factor::Prior {
            var: VarKey::FrameVel(0),
            mean: StateValue::Vec3(Vector3::new(1.0, 0.0, 0.0)),
            sqrt_info: w1.clone(),
        };
        // Coupling r = 2 (y - x): implemented as a prior on the pair via a
        // hand-built factor is not available, so emulate with the
        // marginalize() path by constructing the joint quadratic manually.
        // H = [[1 + 4, -4], [-4, 4]], b = [-(1)(1) + 0, 0] around lin = 0:
        // E = (x-1)^2 + 4(y-x)^2 => H = [[5,-4],[-4,4]], b = [-1, 0].
        // After eliminating x: H' = 4 - 16/5 = 0.8, b' = 0 - (-4/5)(-1) = -0.8.
        // Minimum at y = 1 with E'' = 0.8 as expected (marginal of x at 1).
        let mut h = DMatrix::zeros(6, 6);
        let mut b = DVector::zeros(6);
        h[(0, 0)] = 5.0;
        h[(0, 3)] = -4.0;
        h[(3, 0)] = -4.0;
        h[(3, 3)] = 4.0;
        b[0] = -1.0;
        let prior = MargPrior {
            lin: [
                (VarKey::FrameVel(0), StateValue::Vec3(Vector3::zeros())),
                (VarKey::FrameVel(1), StateValue::Vec3(Vector3::zeros())),
            ]
            .into_iter()
            .collect(),
            order: vec![VarKey::FrameVel(0), VarKey::FrameVel(1)],
            h,
            b,
        };
        let kill: BTreeSet<VarKey> = [VarKey::FrameVel(0)].into();
        let out = marginalize(Some(&prior), &[], &kill, &states, &ctx()).unwrap();
        assert_eq!(out.order, vec![VarKey::FrameVel(1)]);
        assert!((out.h[(0, 0)] - 0.8).abs() < 1e-12);
        assert!((out.b[0] - (-0.8)).abs() < 1e-12);
        let _ = prior_x;
    }

    #[test]
    fn marginalization_preserves_minimum_energy() {
        // For a joint quadratic over (m, k), the Schur marginal over k must
        // satisfy E'(k) - E'(k0) = min_m E(m, k) - min_m E(m, k0) for any k.
        let mut states = empty_states();
        for id in 0..2 {
            states.frames.insert(
                id,
                FrameState {
                    t: id as f64,
                    pose: Pose3::identity(),
                    vel: Vector3::zeros(),
                    bias: ImuBias::zero(),
                    extr: Pose3::identity(),
                },
            );
        }
        // Dense random-ish SPD joint quadratic over vel(0) [kill] and
        // vel(1) [keep].
        let a = DMatrix::from_row_slice(
            6,
            6,
            &[
                2.0, 0.3, 0.1, -0.4, 0.2, 0.0, //
                0.3, 1.5, 0.0, 0.1, -0.2, 0.3, //
                0.1, 0.0, 1.2, 0.2, 0.0, -0.1, //
                -0.4, 0.1, 0.2, 1.8, 0.3, 0.1, //
                0.2, -0.2, 0.0, 0.3, 2.2, 0.0, //
                0.0, 0.3, -0.1, 0.1, 0.0, 1.4,
            ],
        );
        let h = &a * a.transpose();
        let b = DVector::from_row_slice(&[0.5, -0.3, 0.2, 0.1, -0.4, 0.25]);
        let joint = MargPrior {
            lin: [
                (VarKey::FrameVel(0), StateValue::Vec3(Vector3::zeros())),
                (VarKey::FrameVel(1), StateValue::Vec3(Vector3::zeros())),
            ]
            .into_iter()
            .collect(),
            order: vec![VarKey::FrameVel(0), VarKey::FrameVel(1)],
            h: h.clone(),
            b: b.clone(),
        };
        let kill: BTreeSet<VarKey> = [VarKey::FrameVel(0)].into();
        let marg = marginalize(Some(&joint), &[], &kill, &states, &ctx()).unwrap();

        let joint_min_over_m = |k: &Vector3<f64>| -> f64 {
            // argmin_m of (m;k)^T H (m;k) + 2 b^T (m;k)
            let hmm = h.view((0, 0), (3, 3)).into_owned();
            let hmk = h.view((0, 3), (3, 3)).into_owned();
            let bm = b.rows(0, 3).into_owned();
            let rhs = -(&hmk * k + bm);
            let m = hmm.try_inverse().unwrap() * rhs;
            let mut x = DVector::zeros(6);
            x.rows_mut(0, 3).copy_from(&m);
            x.rows_mut(3, 3).copy_from(k);
            (x.transpose() * &h * &x)[(0, 0)] + 2.0 * b.dot(&x)
        };
        let marg_energy = |k: &Vector3<f64>| -> f64 {
            let kd = DVector::from_column_slice(k.as_slice());
            (kd.transpose() * &marg.h * &kd)[(0, 0)] + 2.0 * marg.b.dot(&kd)
        };
        let k0 = Vector3::zeros();
        for k in [
            Vector3::new(0.3, -0.2, 0.5),
            Vector3::new(-1.0, 0.4, 0.1),
            Vector3::new(0.05, 0.0, -0.7),
        ] {
            let lhs = marg_energy(&k) - marg_energy(&k0);
            let rhs = joint_min_over_m(&k) - joint_min_over_m(&k0);
            assert!((lhs - rhs).abs() < 1e-9, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn prior_shift_preserves_energy_differences() {
        let mut states = empty_states();
        states.frames.insert(
            0,
            FrameState {
                t: 0.0,
                pose: Pose3::identity(),
                vel: Vector3::new(0.2, -0.1, 0.05),
                bias: ImuBias::zero(),
                extr: Pose3::identity(),
            },
        );
        let f = vel_prior(0, Vector3::new(0.5, 0.0, 0.0), 1.3);
        let prior = marginalize(None, &[f], &BTreeSet::new(), &states, &ctx()).unwrap();
        let mut shifted = prior.clone();
        let all: BTreeSet<VarKey> = prior.order.iter().copied().collect();
        shifted.shift_to(&states, &all);

        let mut other = states.clone();
        other.frames.get_mut(&0).unwrap().vel += Vector3::new(0.03, 0.01, -0.02);
        // Vector-state charts are linear, so the shift is exact: energy
        // differences between any two states are preserved.
        let d_before = prior.energy(&states) - prior.energy(&other);
        let d_after = shifted.energy(&states) - shifted.energy(&other);
        assert!((d_before - d_after).abs() < 1e-10);
    }
}
