//! Ellipsoid and H-polytope arithmetic.
//!
//! Polytopes are kept in halfspace form `{x : H x <= h}` with unit-norm rows.
//! Support functions are evaluated by linear programming through the `qp`
//! solver (with a tiny quadratic regularization so one solver serves both
//! roles). Minkowski sums stack both operands' face normals with
//! support-function offsets, which is exact for matching templates and a sound
//! outer approximation otherwise - conservatism shrinks the computed tubes'
//! complements, never the other way.

use crate::dynamics::DiscreteModel;
use crate::qp::{QProblem, QpSettings, QpSolver, SolveStatus, Tolerances};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SetsError {
    #[error("{0}")]
    Dimension(String),
    #[error("polytope is unbounded along the probed direction")]
    Unbounded,
    #[error("polytope is empty")]
    Empty,
    #[error("direction family does not positively span the space")]
    DegenerateDirections,
    #[error("closed-loop matrix is not contractive (spectral radius {0:.6})")]
    NotContractive(f64),
    #[error("iteration cap reached without convergence")]
    NoConvergence,
    #[error("shape matrix is not symmetric positive definite")]
    NotPositiveDefinite,
    #[error("support solve failed with status {0}")]
    SupportFailed(crate::qp::SolveStatus),
}

const SUPPORT_REG: f64 = 1e-9;

fn support_solver() -> QpSolver {
    QpSolver::new(QpSettings {
        tolerances: Tolerances { primal: 1e-9, dual: 1e-9, comp: 1e-9 },
        ..QpSettings::default()
    })
}

/// Origin-centered ellipsoid `{x : x' Q x <= 1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Ellipsoid {
    shape: DMatrix<f64>,
    chol: DMatrix<f64>, // lower Cholesky factor of Q
}

impl Ellipsoid {
    pub fn new(shape: DMatrix<f64>) -> Result<Self, SetsError> {
        let n = shape.nrows();
        if shape.ncols() != n {
            return Err(SetsError::Dimension("shape matrix must be square".into()));
        }
        for i in 0..n {
            for j in (i + 1)..n {
                if (shape[(i, j)] - shape[(j, i)]).abs() > 1e-12 {
                    return Err(SetsError::NotPositiveDefinite);
                }
            }
        }
        let chol = nalgebra::Cholesky::new(shape.clone())
            .ok_or(SetsError::NotPositiveDefinite)?;
        Ok(Ellipsoid { shape, chol: chol.l() })
    }

    pub fn dim(&self) -> usize {
        self.shape.nrows()
    }

    pub fn shape(&self) -> &DMatrix<f64> {
        &self.shape
    }

    /// Support function `max {d'x : x'Qx <= 1} = sqrt(d' Q^-1 d)`.
    pub fn support(&self, dir: &DVector<f64>) -> f64 {
        // solve L y = d, then d'Q^-1 d = y'y
        let mut y = dir.clone();
        self.chol.solve_lower_triangular_mut(&mut y);
        y.norm()
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (x.transpose() * &self.shape * x)[(0, 0)] <= 1.0 + tol
    }

    /// Outer polytope `{x : d'x <= sqrt(d' Q^-1 d) for all d in dirs}`; always
    /// a superset of the ellipsoid. Errors when the directions do not
    /// positively span (the polytope would be unbounded).
    pub fn outer_polytope(&self, dirs: &[DVector<f64>]) -> Result<HPolytope, SetsError> {
        let n = self.dim();
        let mut h = DMatrix::zeros(dirs.len(), n);
        let mut off = DVector::zeros(dirs.len());
        for (r, d) in dirs.iter().enumerate() {
            if d.len() != n {
                return Err(SetsError::Dimension("direction length mismatch".into()));
            }
            h.row_mut(r).copy_from(&d.transpose());
            off[r] = self.support(d);
        }
        let poly = HPolytope::new(h, off)?;
        for i in 0..n {
            for sign in [1.0, -1.0] {
                let mut probe = DVector::zeros(n);
                probe[i] = sign;
                match poly.support(&probe) {
                    Ok(_) => {}
                    Err(SetsError::Unbounded) => return Err(SetsError::DegenerateDirections),
                    Err(e) => return Err(e),
                }
            }
        }
        Ok(poly)
    }
}

/// Halfspace polytope `{x : H x <= h}` with unit-norm rows. Zero rows encode
/// the whole space.
#[derive(Debug, Clone, PartialEq)]
pub struct HPolytope {
    normals: DMatrix<f64>,
    offsets: DVector<f64>,
}

impl HPolytope {
    pub fn new(normals: DMatrix<f64>, offsets: DVector<f64>) -> Result<Self, SetsError> {
        if normals.nrows() != offsets.len() {
            return Err(SetsError::Dimension("row count mismatch".into()));
        }
        let mut h = normals;
        let mut off = offsets;
        for r in 0..h.nrows() {
            let norm = h.row(r).norm();
            if norm < 1e-14 {
                return Err(SetsError::Dimension(format!("row {r} has zero normal")));
            }
            for c in 0..h.ncols() {
                h[(r, c)] /= norm;
            }
            off[r] /= norm;
        }
        Ok(HPolytope { normals: h, offsets: off })
    }

    /// The whole space (no constraints).
    pub fn universe(dim: usize) -> Self {
        HPolytope { normals: DMatrix::zeros(0, dim), offsets: DVector::zeros(0) }
    }

    /// The singleton `{0}`, represented as the degenerate box `[-0, 0]^n`.
    pub fn origin(dim: usize) -> Self {
        Self::axis_box(&vec![0.0; dim])
    }

    /// Axis-aligned box with the given half-widths.
    pub fn axis_box(half_widths: &[f64]) -> Self {
        let n = half_widths.len();
        let mut h = DMatrix::zeros(2 * n, n);
        let mut off = DVector::zeros(2 * n);
        for i in 0..n {
            h[(2 * i, i)] = 1.0;
            h[(2 * i + 1, i)] = -1.0;
            off[2 * i] = half_widths[i];
            off[2 * i + 1] = half_widths[i];
        }
        HPolytope { normals: h, offsets: off }
    }

    pub fn dim(&self) -> usize {
        self.normals.ncols()
    }

    pub fn num_rows(&self) -> usize {
        self.normals.nrows()
    }

    pub fn is_universe(&self) -> bool {
        self.normals.nrows() == 0
    }

    pub fn normals(&self) -> &DMatrix<f64> {
        &self.normals
    }

    pub fn offsets(&self) -> &DVector<f64> {
        &self.offsets
    }

    pub fn contains(&self, x: &DVector<f64>, tol: f64) -> bool {
        (0..self.num_rows()).all(|r| self.normals.row(r).transpose().dot(x) <= self.offsets[r] + tol)
    }

    /// `max {d'x : x in self}` by LP (tiny quadratic regularization, residual
    /// tolerance 1e-9).
    pub fn support(&self, dir: &DVector<f64>) -> Result<f64, SetsError> {
        if dir.len() != self.dim() {
            return Err(SetsError::Dimension("direction length mismatch".into()));
        }
        if self.is_universe() {
            return Err(SetsError::Unbounded);
        }
        let n = self.dim();
        let prob = QProblem::inequality_constrained(
            DMatrix::identity(n, n) * (2.0 * SUPPORT_REG),
            -dir.clone(),
            self.normals.clone(),
            self.offsets.clone(),
        )
        .expect("support problem dimensions are consistent");
        let sol = support_solver().solve(&prob);
        match sol.status {
            SolveStatus::Optimal => Ok(dir.dot(&sol.primal)),
            SolveStatus::Unbounded => Err(SetsError::Unbounded),
            SolveStatus::Infeasible => Err(SetsError::Empty),
            s => Err(SetsError::SupportFailed(s)),
        }
    }

    /// Feasibility check via a regularized LP.
    pub fn is_empty(&self) -> bool {
        if self.is_universe() {
            return false;
        }
        let n = self.dim();
        let prob = QProblem::inequality_constrained(
            DMatrix::identity(n, n) * (2.0 * SUPPORT_REG),
            DVector::zeros(n),
            self.normals.clone(),
            self.offsets.clone(),
        )
        .expect("feasibility problem dimensions are consistent");
        matches!(support_solver().solve(&prob).status, SolveStatus::Infeasible)
    }

    /// Outer description of the Minkowski sum: every face direction of either
    /// operand, offset by its own bound plus the support of the other operand.
    pub fn minkowski_sum(&self, other: &HPolytope) -> Result<HPolytope, SetsError> {
        if self.dim() != other.dim() {
            return Err(SetsError::Dimension("dimension mismatch".into()));
        }
        if self.is_universe() || other.is_universe() {
            return Ok(HPolytope::universe(self.dim()));
        }
        let n = self.dim();
        let mut rows = Vec::with_capacity(self.num_rows() + other.num_rows());
        for r in 0..self.num_rows() {
            let d = self.normals.row(r).transpose();
            rows.push((d.clone(), self.offsets[r] + other.support(&d)?));
        }
        for r in 0..other.num_rows() {
            let d = other.normals.row(r).transpose();
            rows.push((d.clone(), other.offsets[r] + self.support(&d)?));
        }
        Ok(from_rows_deduped(rows, n))
    }

    /// Pontryagin difference `{x : Hx <= h - s}` with `s_i` the support of the
    /// subtrahend along row i; exact for halfspace forms. The result may be
    /// empty - that is a legitimate over-tightening outcome the caller checks.
    pub fn pontryagin_diff(&self, other: &HPolytope) -> Result<HPolytope, SetsError> {
        if self.dim() != other.dim() {
            return Err(SetsError::Dimension("dimension mismatch".into()));
        }
        let mut off = self.offsets.clone();
        for r in 0..self.num_rows() {
            let d = self.normals.row(r).transpose();
            off[r] -= other.support(&d)?;
        }
        Ok(HPolytope { normals: self.normals.clone(), offsets: off })
    }

    /// Image `{Mx + p : x in self}`. Exact when `M` is square and invertible;
    /// otherwise an axis-template outer approximation via support functions.
    pub fn affine_image(&self, m: &DMatrix<f64>, p: &DVector<f64>) -> Result<HPolytope, SetsError> {
        if m.ncols() != self.dim() {
            return Err(SetsError::Dimension("matrix column mismatch".into()));
        }
        if p.len() != m.nrows() {
            return Err(SetsError::Dimension("offset length mismatch".into()));
        }
        if m.nrows() == m.ncols() {
            if let Some(minv) = m.clone().try_inverse() {
                if self.is_universe() {
                    return Ok(HPolytope::universe(m.nrows()));
                }
                let hh = &self.normals * &minv;
                let off = &self.offsets + &hh * p;
                return HPolytope::new(hh, off);
            }
        }
        // template fallback: bounding box of the image
        let out = m.nrows();
        let mut rows = Vec::with_capacity(2 * out);
        for i in 0..out {
            for sign in [1.0, -1.0] {
                let mut d = DVector::zeros(out);
                d[i] = sign;
                let back = m.transpose() * &d;
                let s = if back.amax() < 1e-300 { 0.0 } else { self.support(&back)? };
                rows.push((d.clone(), s + p.dot(&d)));
            }
        }
        Ok(from_rows_deduped(rows, out))
    }

    /// Intersection: stacked rows.
    pub fn intersect(&self, other: &HPolytope) -> Result<HPolytope, SetsError> {
        if self.dim() != other.dim() {
            return Err(SetsError::Dimension("dimension mismatch".into()));
        }
        let mut rows = Vec::new();
        for r in 0..self.num_rows() {
            rows.push((self.normals.row(r).transpose(), self.offsets[r]));
        }
        for r in 0..other.num_rows() {
            rows.push((other.normals.row(r).transpose(), other.offsets[r]));
        }
        Ok(from_rows_deduped(rows, self.dim()))
    }

    /// Uniform scaling about the origin.
    pub fn scale(&self, factor: f64) -> HPolytope {
        HPolytope { normals: self.normals.clone(), offsets: self.offsets.scale(factor) }
    }

    /// Drop redundant rows (support of the remaining rows already enforces
    /// them). Removal tolerance 1e-9 can only enlarge the set by that much,
    /// which is the conservative direction for tube cross sections.
    pub fn reduce(&self) -> HPolytope {
        let m = self.num_rows();
        if m <= 2 {
            return self.clone();
        }
        let mut keep: Vec<usize> = (0..m).collect();
        let mut i = 0;
        while i < keep.len() && keep.len() > 1 {
            let row = keep[i];
            let rest: Vec<usize> = keep.iter().copied().filter(|&r| r != row).collect();
            let sub = self.select_rows(&rest);
            let d = self.normals.row(row).transpose();
            match sub.support(&d) {
                Ok(s) if s <= self.offsets[row] + 1e-9 => {
                    keep.remove(i);
                }
                _ => i += 1,
            }
        }
        self.select_rows(&keep)
    }

    fn select_rows(&self, rows: &[usize]) -> HPolytope {
        let n = self.dim();
        let mut h = DMatrix::zeros(rows.len(), n);
        let mut off = DVector::zeros(rows.len());
        for (k, &r) in rows.iter().enumerate() {
            h.row_mut(k).copy_from(&self.normals.row(r));
            off[k] = self.offsets[r];
        }
        HPolytope { normals: h, offsets: off }
    }
}

/// Collapse duplicate (parallel) normals keeping the tightest offset.
fn from_rows_deduped(mut rows: Vec<(DVector<f64>, f64)>, dim: usize) -> HPolytope {
    for (d, off) in rows.iter_mut() {
        let n = d.norm();
        if n > 1e-14 {
            *d /= n;
            *off /= n;
        }
    }
    rows.sort_by(|a, b| {
        for i in 0..dim {
            match a.0[i].partial_cmp(&b.0[i]).unwrap() {
                std::cmp::Ordering::Equal => continue,
                o => return o,
            }
        }
        std::cmp::Ordering::Equal
    });
    let mut out: Vec<(DVector<f64>, f64)> = Vec::with_capacity(rows.len());
    for (d, off) in rows {
        if let Some(last) = out.last_mut() {
            if (&last.0 - &d).amax() < 1e-12 {
                last.1 = last.1.min(off);
                continue;
            }
        }
        out.push((d, off));
    }
    let mut h = DMatrix::zeros(out.len(), dim);
    let mut offsets = DVector::zeros(out.len());
    for (r, (d, off)) in out.iter().enumerate() {
        h.row_mut(r).copy_from(&d.transpose());
        offsets[r] = *off;
    }
    HPolytope { normals: h, offsets }
}

/// All sign-pattern directions with up to `max_active` nonzero components,
/// normalized. `max_active = 1` gives the axis template; higher values add
/// edge/corner directions that tighten outer approximations of smooth sets.
pub fn sign_template(dim: usize, max_active: usize) -> Vec<DVector<f64>> {
    let mut dirs = Vec::new();
    for mask in 1u32..(1 << dim) {
        let active: Vec<usize> = (0..dim).filter(|i| mask & (1 << i) != 0).collect();
        if active.is_empty() || active.len() > max_active {
            continue;
        }
        let scale = 1.0 / (active.len() as f64).sqrt();
        for signs in 0u32..(1 << active.len()) {
            let mut d = DVector::zeros(dim);
            for (k, &i) in active.iter().enumerate() {
                d[i] = if signs & (1 << k) != 0 { -scale } else { scale };
            }
            dirs.push(d);
        }
    }
    dirs
}

/// Error-tube stages `E_0 = {0}`, `E_{k+1} = Acl E_k (+) dist` for the
/// pre-stabilized closed loop `Acl = T (Abar + Bbar K)`.
#[derive(Debug, Clone)]
pub struct TubeSchedule {
    pub stages: Vec<HPolytope>,
    pub disturbance: HPolytope,
    pub closed_loop: DMatrix<f64>,
}

pub fn tube_schedule(
    dm: &DiscreteModel,
    gain: &DMatrix<f64>,
    dist: &HPolytope,
    reset_map: &DMatrix<f64>,
    horizon: usize,
) -> Result<TubeSchedule, SetsError> {
    if horizon < 1 {
        return Err(SetsError::Dimension("horizon must be at least 1".into()));
    }
    let n = dm.a.nrows();
    if dist.dim() != n {
        return Err(SetsError::Dimension("disturbance dimension mismatch".into()));
    }
    let acl = reset_map * (&dm.a + &dm.b * gain);
    let zero = DVector::zeros(n);
    let mut stages = vec![HPolytope::origin(n)];
    for _ in 0..horizon {
        let prev = stages.last().expect("nonempty");
        let mapped = prev.affine_image(&acl, &zero)?;
        let mut next = mapped.minkowski_sum(dist)?;
        if next.num_rows() > 240 {
            next = next.reduce();
        }
        stages.push(next);
    }
    Ok(TubeSchedule { stages, disturbance: dist.clone(), closed_loop: acl })
}

/// Outer approximation of the minimal robust positive invariant set of
/// `x+ = Acl x + w`, `w in dist`, by the truncated-sum construction: the
/// recursion `F_{s+1} = Acl F_s (+) dist` is iterated in support-function form
/// (the support of `F_s` along `d` is the exact series
/// `sum_j h_dist((Acl')^j d)`) until the per-step growth drops below `eps`,
/// then scaled by `1/(1 - alpha)` with `alpha` twice the measured contraction
/// ratio. The returned set is verified to satisfy `Acl R (+) dist ⊆ R` by
/// support-function comparison; verification failures refine the template
/// with the violating directions before giving up.
pub fn rpi_outer(acl: &DMatrix<f64>, dist: &HPolytope, eps: f64) -> Result<HPolytope, SetsError> {
    let n = acl.nrows();
    if acl.ncols() != n || dist.dim() != n {
        return Err(SetsError::Dimension("closed-loop/disturbance dimension mismatch".into()));
    }
    let rho = acl
        .complex_eigenvalues()
        .iter()
        .map(|l| l.norm())
        .fold(0.0f64, f64::max);
    if rho >= 1.0 - 1e-12 {
        return Err(SetsError::NotContractive(rho));
    }
    if dist.is_empty() {
        return Err(SetsError::Empty);
    }

    // template: disturbance normals plus the axis directions
    let mut template: Vec<DVector<f64>> = Vec::new();
    for r in 0..dist.num_rows() {
        template.push(dist.normals.row(r).transpose());
    }
    for d in sign_template(n, 1) {
        template.push(d);
    }
    let template_rows = {
        let mut rows: Vec<(DVector<f64>, f64)> = template.into_iter().map(|d| (d, 0.0)).collect();
        from_rows_deduped(std::mem::take(&mut rows), n)
    };
    let mut dirs: Vec<DVector<f64>> = (0..template_rows.num_rows())
        .map(|r| template_rows.normals.row(r).transpose())
        .collect();

    // lockstep series accumulation across all template directions
    let mut totals = vec![0.0f64; dirs.len()];
    let mut fronts: Vec<DVector<f64>> = dirs.clone();
    let mut steps = 0usize;
    let cap = 200usize;
    let at = acl.transpose();
    let mut alpha_meas;
    loop {
        let mut growth: f64 = 0.0;
        alpha_meas = 0.0f64;
        for (i, front) in fronts.iter_mut().enumerate() {
            let term = dist.support(front)?;
            totals[i] += term;
            growth = growth.max(term);
            let base = dist.support(&dirs[i])?;
            if base > 1e-12 {
                alpha_meas = alpha_meas.max(term / base);
            }
            *front = &at * &*front;
        }
        steps += 1;
        if growth <= eps * totals.iter().fold(1e-12f64, |a, &b| a.max(b)) && alpha_meas <= 0.45 {
            break;
        }
        if steps >= cap {
            return Err(SetsError::NoConvergence);
        }
    }
    let alpha = (2.0 * alpha_meas).min(0.9);
    let scale = 1.0 / (1.0 - alpha);
    let series_support = |d: &DVector<f64>| -> Result<f64, SetsError> {
        let mut w = d.clone();
        let mut total = 0.0;
        for _ in 0..steps {
            total += dist.support(&w)?;
            w = &at * &w;
        }
        Ok(total * scale)
    };

    let mut rows: Vec<(DVector<f64>, f64)> =
        dirs.iter().cloned().zip(totals.iter().map(|t| t * scale)).collect();
    let mut poly = from_rows_deduped(rows.clone(), n);

    // verify invariance; refine the template with violating directions
    for _round in 0..12 {
        let mut violations = Vec::new();
        for r in 0..poly.num_rows() {
            let d = poly.normals.row(r).transpose();
            let lhs = poly.support(&(&at * &d))? + dist.support(&d)?;
            if lhs > poly.offsets[r] + 1e-9 {
                violations.push(&at * &d);
            }
        }
        if violations.is_empty() {
            return Ok(poly.reduce());
        }
        for v in violations {
            let norm = v.norm();
            if norm < 1e-14 {
                continue;
            }
            let d = v / norm;
            let off = series_support(&d)?;
            rows.push((d.clone(), off));
            dirs.push(d);
        }
        poly = from_rows_deduped(rows.clone(), n);
    }
    Err(SetsError::NoConvergence)
}
