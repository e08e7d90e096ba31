//! Dense convex quadratic programming:
//!
//! ```text
//!     minimize   1/2 z' P z + q' z
//!     subject to G z <= g
//!                E z  = e
//! ```
//!
//! One solver backs every optimization in the crate: the low-level CLF-CBF
//! policy, the tube MPC, and the support-function LPs of the set algebra.
//! The method is operator splitting (ADMM) with over-relaxation, residual-ratio
//! rho adaptation, an active-set polish step for high-accuracy KKT residuals,
//! and divergence-based infeasibility / unboundedness certificates.
//!
//! Everything is deterministic: fixed iteration order, no randomized pivoting,
//! and the banded LDL^T factorization uses a fixed ordering heuristic.

mod ldl;

use ldl::{factor, BandMatrix, LdlFactor};
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum QpError {
    #[error("{0}")]
    Dimension(String),
    #[error("hessian asymmetry {0:.3e} exceeds 1e-10")]
    AsymmetricHessian(f64),
}

/// Problem data. Immutable once constructed; `new` checks shapes and symmetry.
#[derive(Debug, Clone, PartialEq)]
pub struct QProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub ineq_mat: DMatrix<f64>,
    pub ineq_rhs: DVector<f64>,
    pub eq_mat: DMatrix<f64>,
    pub eq_rhs: DVector<f64>,
}

impl QProblem {
    pub fn new(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        ineq_mat: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
        eq_mat: DMatrix<f64>,
        eq_rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = hessian.nrows();
        if hessian.ncols() != n {
            return Err(QpError::Dimension("hessian must be square".into()));
        }
        if linear.len() != n {
            return Err(QpError::Dimension(format!(
                "linear term has {} entries, expected {n}",
                linear.len()
            )));
        }
        if ineq_mat.ncols() != n && ineq_mat.nrows() > 0 {
            return Err(QpError::Dimension("inequality matrix column mismatch".into()));
        }
        if ineq_rhs.len() != ineq_mat.nrows() {
            return Err(QpError::Dimension("inequality rhs length mismatch".into()));
        }
        if eq_mat.ncols() != n && eq_mat.nrows() > 0 {
            return Err(QpError::Dimension("equality matrix column mismatch".into()));
        }
        if eq_rhs.len() != eq_mat.nrows() {
            return Err(QpError::Dimension("equality rhs length mismatch".into()));
        }
        let mut asym = 0.0f64;
        for i in 0..n {
            for j in (i + 1)..n {
                asym = asym.max((hessian[(i, j)] - hessian[(j, i)]).abs());
            }
        }
        if asym > 1e-10 {
            return Err(QpError::AsymmetricHessian(asym));
        }
        Ok(QProblem { hessian, linear, ineq_mat, ineq_rhs, eq_mat, eq_rhs })
    }

    /// Problem with inequality constraints only.
    pub fn inequality_constrained(
        hessian: DMatrix<f64>,
        linear: DVector<f64>,
        ineq_mat: DMatrix<f64>,
        ineq_rhs: DVector<f64>,
    ) -> Result<Self, QpError> {
        let n = hessian.nrows();
        Self::new(hessian, linear, ineq_mat, ineq_rhs, DMatrix::zeros(0, n), DVector::zeros(0))
    }

    pub fn num_vars(&self) -> usize {
        self.hessian.nrows()
    }

    pub fn num_ineq(&self) -> usize {
        self.ineq_mat.nrows()
    }

    pub fn num_eq(&self) -> usize {
        self.eq_mat.nrows()
    }

    /// 1/2 z'Pz + q'z at the given point.
    pub fn objective(&self, z: &DVector<f64>) -> f64 {
        0.5 * (z.transpose() * &self.hessian * z)[(0, 0)] + self.linear.dot(z)
    }
}

/// Residual tolerances for declaring optimality.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    pub primal: f64,
    pub dual: f64,
    pub comp: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { primal: 1e-8, dual: 1e-8, comp: 1e-8 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Residuals {
    pub primal: f64,
    pub dual: f64,
    pub comp: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    Infeasible,
    /// Dual infeasible: the objective is unbounded below on the feasible set.
    Unbounded,
    MaxIter,
}

impl std::fmt::Display for SolveStatus {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            SolveStatus::Optimal => "optimal",
            SolveStatus::Infeasible => "infeasible",
            SolveStatus::Unbounded => "unbounded",
            SolveStatus::MaxIter => "max_iter",
        };
        f.write_str(s)
    }
}

/// Certified solution: multipliers and KKT residuals are always populated so
/// callers can re-verify optimality claims.
#[derive(Debug, Clone)]
pub struct QSolution {
    pub primal: DVector<f64>,
    /// Inequality multipliers, >= 0 on return.
    pub ineq_multipliers: DVector<f64>,
    pub eq_multipliers: DVector<f64>,
    pub status: SolveStatus,
    pub residuals: Residuals,
    /// Divergence direction backing an `Infeasible` (dual ray) or `Unbounded`
    /// (primal ray) verdict.
    pub certificate: Option<DVector<f64>>,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct QpSettings {
    pub tolerances: Tolerances,
    pub max_iter: usize,
    pub rho: f64,
    pub sigma: f64,
    /// Over-relaxation parameter.
    pub alpha: f64,
    pub check_interval: usize,
    /// Residual-ratio rho update cadence.
    pub adapt_interval: usize,
    pub eps_infeasible: f64,
}

impl Default for QpSettings {
    fn default() -> Self {
        QpSettings {
            tolerances: Tolerances::default(),
            max_iter: 20_000,
            rho: 0.1,
            sigma: 1e-6,
            alpha: 1.6,
            check_interval: 25,
            adapt_interval: 25,
            eps_infeasible: 1e-7,
        }
    }
}

const RHO_EQ_SCALE: f64 = 1e3;
const POLISH_DELTA: f64 = 1e-9;

/// Solve with default-constructed solver state (cold start). Per-call settings
/// mirror the solver defaults except for the supplied tolerances and cap.
pub fn solve_qp(prob: &QProblem, tol: Tolerances, max_iter: usize) -> QSolution {
    let mut solver = QpSolver::new(QpSettings { tolerances: tol, max_iter, ..QpSettings::default() });
    solver.solve(prob)
}

// ---------------------------------------------------------------------------
// KKT machinery
// ---------------------------------------------------------------------------

struct Kkt {
    nv: usize,
    mc: usize,
    /// position of unknown k in the factor ordering
    perm: Vec<usize>,
    /// unknown at position p
    iperm: Vec<usize>,
    factor: LdlFactor,
    /// stacked [G; E]
    a_mat: DMatrix<f64>,
    rho: Vec<f64>,
    sigma: f64,
}

fn build_ordering(p: &DMatrix<f64>, a: &DMatrix<f64>) -> (Vec<usize>, Vec<usize>) {
    let nv = p.nrows();
    let mc = a.nrows();
    let dim = nv + mc;
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(dim);
    for j in 0..nv {
        keys.push((j as f64, j));
    }
    for r in 0..mc {
        let mut sum = 0.0;
        let mut cnt = 0usize;
        for c in 0..nv {
            if a[(r, c)] != 0.0 {
                sum += c as f64;
                cnt += 1;
            }
        }
        let key = if cnt == 0 { 0.0 } else { sum / cnt as f64 };
        keys.push((key + 0.49, nv + r));
    }
    keys.sort_by(|x, y| x.0.partial_cmp(&y.0).unwrap().then(x.1.cmp(&y.1)));
    let mut perm = vec![0usize; dim];
    let mut iperm = vec![0usize; dim];
    for (pos, &(_, k)) in keys.iter().enumerate() {
        perm[k] = pos;
        iperm[pos] = k;
    }
    (perm, iperm)
}

fn assemble_kkt(
    p: &DMatrix<f64>,
    a: &DMatrix<f64>,
    rho: &[f64],
    sigma: f64,
) -> Option<(Vec<usize>, Vec<usize>, LdlFactor)> {
    let nv = p.nrows();
    let mc = a.nrows();
    let dim = nv + mc;
    let (perm, iperm) = build_ordering(p, a);

    let mut bw = 0usize;
    let mut span = |u: usize, v: usize| {
        let (pu, pv) = (perm[u], perm[v]);
        bw = bw.max(pu.abs_diff(pv));
    };
    for i in 0..nv {
        for j in 0..=i {
            if p[(i, j)] != 0.0 || p[(j, i)] != 0.0 {
                span(i, j);
            }
        }
    }
    for r in 0..mc {
        for c in 0..nv {
            if a[(r, c)] != 0.0 {
                span(nv + r, c);
            }
        }
    }

    let mut band = BandMatrix::zeros(dim, bw);
    for i in 0..nv {
        let pi = perm[i];
        for j in 0..=i {
            let v = if i == j { p[(i, i)] + sigma } else { p[(i, j)] };
            if v != 0.0 {
                let pj = perm[j];
                band.add(pi.max(pj), pi.min(pj), v);
            }
        }
    }
    for r in 0..mc {
        let pr = perm[nv + r];
        band.add(pr, pr, -1.0 / rho[r]);
        for c in 0..nv {
            let v = a[(r, c)];
            if v != 0.0 {
                let pc = perm[c];
                band.add(pr.max(pc), pr.min(pc), v);
            }
        }
    }
    factor(&band).map(|f| (perm, iperm, f))
}

impl Kkt {
    fn build(p: &DMatrix<f64>, a: DMatrix<f64>, rho: Vec<f64>, sigma: f64) -> Option<Self> {
        let (perm, iperm, fac) = assemble_kkt(p, &a, &rho, sigma)?;
        Some(Kkt { nv: p.nrows(), mc: a.nrows(), perm, iperm, factor: fac, a_mat: a, rho, sigma })
    }

    fn refactor(&mut self, p: &DMatrix<f64>) -> bool {
        match assemble_kkt(p, &self.a_mat, &self.rho, self.sigma) {
            Some((perm, iperm, fac)) => {
                self.perm = perm;
                self.iperm = iperm;
                self.factor = fac;
                true
            }
            None => false,
        }
    }

    /// Solve the KKT system with one round of iterative refinement.
    fn solve(
        &self,
        p: &DMatrix<f64>,
        rhs_top: &DVector<f64>,
        rhs_bot: &DVector<f64>,
        out_top: &mut DVector<f64>,
        out_bot: &mut DVector<f64>,
    ) {
        let dim = self.nv + self.mc;
        let mut buf = vec![0.0; dim];
        let pack = |top: &DVector<f64>, bot: &DVector<f64>, buf: &mut [f64], perm: &[usize]| {
            for i in 0..self.nv {
                buf[perm[i]] = top[i];
            }
            for r in 0..self.mc {
                buf[perm[self.nv + r]] = bot[r];
            }
        };
        pack(rhs_top, rhs_bot, &mut buf, &self.perm);
        self.factor.solve(&mut buf);
        let mut xt = DVector::zeros(self.nv);
        let mut xb = DVector::zeros(self.mc);
        for pos in 0..dim {
            let k = self.iperm[pos];
            if k < self.nv {
                xt[k] = buf[pos];
            } else {
                xb[k - self.nv] = buf[pos];
            }
        }
        // refinement against the exact KKT operator
        let mut rt = rhs_top - (p * &xt) - xt.scale(self.sigma) - self.a_mat.transpose() * &xb;
        let mut rb = rhs_bot - &self.a_mat * &xt;
        for r in 0..self.mc {
            rb[r] += xb[r] / self.rho[r];
        }
        pack(&rt, &rb, &mut buf, &self.perm);
        self.factor.solve(&mut buf);
        for pos in 0..dim {
            let k = self.iperm[pos];
            if k < self.nv {
                xt[k] += buf[pos];
            } else {
                xb[k - self.nv] += buf[pos];
            }
        }
        rt.fill(0.0);
        rb.fill(0.0);
        *out_top = xt;
        *out_bot = xb;
    }
}

// ---------------------------------------------------------------------------
// Solver
// ---------------------------------------------------------------------------

struct Cache {
    p: DMatrix<f64>,
    g: DMatrix<f64>,
    e: DMatrix<f64>,
    kkt: Kkt,
    warm_x: DVector<f64>,
    warm_z: DVector<f64>,
    warm_y: DVector<f64>,
}

/// Reusable solver workspace. The KKT factorization is cached across calls as
/// long as `P`, `G`, `E` are unchanged (only `q`, `g`, `e` varying), and the
/// previous primal/dual iterates warm-start the next solve. One instance per
/// thread.
pub struct QpSolver {
    pub settings: QpSettings,
    cache: Option<Cache>,
}

impl QpSolver {
    pub fn new(settings: QpSettings) -> Self {
        QpSolver { settings, cache: None }
    }

    pub fn with_defaults() -> Self {
        Self::new(QpSettings::default())
    }

    /// Drop cached factorization and warm-start state.
    pub fn reset(&mut self) {
        self.cache = None;
    }

    pub fn solve(&mut self, prob: &QProblem) -> QSolution {
        let nv = prob.num_vars();
        let mi = prob.num_ineq();
        let me = prob.num_eq();
        let mc = mi + me;
        let s = self.settings;

        // stacked constraint data: rows 0..mi are G z <= g, rows mi.. are E z = e
        let reuse = match &self.cache {
            Some(c) => c.p == prob.hessian && c.g == prob.ineq_mat && c.e == prob.eq_mat,
            None => false,
        };
        if !reuse {
            let mut a = DMatrix::zeros(mc, nv);
            a.view_mut((0, 0), (mi, nv)).copy_from(&prob.ineq_mat);
            a.view_mut((mi, 0), (me, nv)).copy_from(&prob.eq_mat);
            let mut rho = vec![s.rho; mc];
            for r in mi..mc {
                rho[r] = s.rho * RHO_EQ_SCALE;
            }
            let Some(kkt) = Kkt::build(&prob.hessian, a, rho, s.sigma) else {
                return QSolution {
                    primal: DVector::zeros(nv),
                    ineq_multipliers: DVector::zeros(mi),
                    eq_multipliers: DVector::zeros(me),
                    status: SolveStatus::MaxIter,
                    residuals: Residuals { primal: f64::INFINITY, dual: f64::INFINITY, comp: f64::INFINITY },
                    certificate: None,
                    iterations: 0,
                };
            };
            self.cache = Some(Cache {
                p: prob.hessian.clone(),
                g: prob.ineq_mat.clone(),
                e: prob.eq_mat.clone(),
                kkt,
                warm_x: DVector::zeros(nv),
                warm_z: DVector::zeros(mc),
                warm_y: DVector::zeros(mc),
            });
        }
        let cache = self.cache.as_mut().expect("cache populated above");

        let mut lower = DVector::from_element(mc, f64::NEG_INFINITY);
        let mut upper = DVector::zeros(mc);
        for r in 0..mi {
            upper[r] = prob.ineq_rhs[r];
        }
        for r in 0..me {
            lower[mi + r] = prob.eq_rhs[r];
            upper[mi + r] = prob.eq_rhs[r];
        }

        let mut x = cache.warm_x.clone();
        let mut z = cache.warm_z.clone();
        let mut y = cache.warm_y.clone();
        let mut xt = DVector::zeros(nv);
        let mut nu = DVector::zeros(mc);
        let (mut chk_x, mut chk_y) = (x.clone(), y.clone());

        let mut best: Option<(Residuals, DVector<f64>, DVector<f64>)> = None;
        let mut status = SolveStatus::MaxIter;
        let mut certificate = None;
        let mut iterations = s.max_iter;
        let mut last_polish = 0usize;

        let mut iter = 0usize;
        while iter < s.max_iter {
            iter += 1;
            // x-update via KKT solve
            let rhs_top = x.scale(s.sigma) - &prob.linear;
            let mut rhs_bot = z.clone();
            for r in 0..mc {
                rhs_bot[r] -= y[r] / cache.kkt.rho[r];
            }
            cache.kkt.solve(&prob.hessian, &rhs_top, &rhs_bot, &mut xt, &mut nu);
            let mut zt = z.clone();
            for r in 0..mc {
                zt[r] += (nu[r] - y[r]) / cache.kkt.rho[r];
            }
            // over-relaxed updates
            x = xt.scale(s.alpha) + x.scale(1.0 - s.alpha);
            let zr = zt.scale(s.alpha) + z.scale(1.0 - s.alpha);
            let mut znew = DVector::zeros(mc);
            for r in 0..mc {
                let cand = zr[r] + y[r] / cache.kkt.rho[r];
                znew[r] = cand.clamp(lower[r], upper[r]);
                y[r] += cache.kkt.rho[r] * (zr[r] - znew[r]);
            }
            z = znew;

            if iter % s.check_interval != 0 && iter != s.max_iter {
                continue;
            }

            // splitting residual ||Ax - z|| drives rho adaptation; it stays
            // informative even when the iterate is strictly feasible
            let ax = &cache.kkt.a_mat * &x;
            let r_split = if mc == 0 { 0.0 } else { (&ax - &z).amax() };
            let split_scale = ax.amax().max(z.amax()).max(1.0);

            let res = kkt_residuals(prob, &x, &y);
            if better(&best, &res) {
                best = Some((res, x.clone(), y.clone()));
            }
            let tol = s.tolerances;
            let converged = res.primal <= tol.primal && res.dual <= tol.dual && res.comp <= tol.comp;
            let near = res.primal <= (tol.primal * 1e4).max(1e-5)
                && res.dual <= (tol.dual * 1e4).max(1e-5);
            if converged || (near && iter >= last_polish + 4 * s.check_interval) || iter == s.max_iter {
                last_polish = iter;
                if let Some((pres, px, py)) = polish(prob, &x, &y, tol) {
                    let hit = pres.primal <= tol.primal && pres.dual <= tol.dual && pres.comp <= tol.comp;
                    if better(&best, &pres) || hit {
                        best = Some((pres, px, py));
                    }
                    if hit {
                        status = SolveStatus::Optimal;
                        iterations = iter;
                        break;
                    }
                }
                if converged {
                    status = SolveStatus::Optimal;
                    iterations = iter;
                    break;
                }
            }

            // divergence certificates
            let dx = &x - &chk_x;
            let dy = &y - &chk_y;
            if let Some(ray) = primal_infeasibility(prob, &dy, &lower, &upper, s.eps_infeasible, mi) {
                status = SolveStatus::Infeasible;
                certificate = Some(ray);
                iterations = iter;
                break;
            }
            if let Some(ray) = dual_infeasibility(prob, &dx, s.eps_infeasible) {
                status = SolveStatus::Unbounded;
                certificate = Some(ray);
                iterations = iter;
                break;
            }
            chk_x.copy_from(&x);
            chk_y.copy_from(&y);

            // residual-ratio rho adaptation
            if mc > 0 && iter % s.adapt_interval == 0 {
                let dual_scale = (&prob.hessian * &x)
                    .amax()
                    .max(prob.linear.amax())
                    .max(1.0);
                let ratio =
                    ((r_split / split_scale + 1e-16) / (res.dual / dual_scale + 1e-16)).sqrt();
                let new_rho = (cache.kkt.rho[0] * ratio).clamp(1e-6, 1e6);
                let change = new_rho / cache.kkt.rho[0];
                if !(0.2..=5.0).contains(&change) {
                    for r in 0..mc {
                        cache.kkt.rho[r] = if r < mi { new_rho } else { new_rho * RHO_EQ_SCALE };
                    }
                    if !cache.kkt.refactor(&prob.hessian) {
                        break;
                    }
                }
            }
        }

        cache.warm_x.copy_from(&x);
        cache.warm_z.copy_from(&z);
        cache.warm_y.copy_from(&y);

        let (residuals, fx, fy) = match best {
            Some((r, bx, by)) => (r, bx, by),
            None => (kkt_residuals(prob, &x, &y), x, y),
        };
        let mut lam = DVector::zeros(mi);
        for r in 0..mi {
            lam[r] = fy[r].max(0.0);
        }
        let nu_out = fy.rows(mi, me).into_owned();
        QSolution {
            primal: fx,
            ineq_multipliers: lam,
            eq_multipliers: nu_out,
            status,
            residuals,
            certificate,
            iterations,
        }
    }
}

fn better(best: &Option<(Residuals, DVector<f64>, DVector<f64>)>, res: &Residuals) -> bool {
    match best {
        None => true,
        Some((b, _, _)) => {
            res.primal.max(res.dual).max(res.comp) < b.primal.max(b.dual).max(b.comp)
        }
    }
}

/// KKT residuals at (x, y) where y stacks inequality then equality multipliers.
/// Inequality multipliers are clipped at zero for the complementarity measure,
/// matching how they are reported.
fn kkt_residuals(prob: &QProblem, x: &DVector<f64>, y: &DVector<f64>) -> Residuals {
    let mi = prob.num_ineq();
    let me = prob.num_eq();
    let mut primal = 0.0f64;
    let gx = &prob.ineq_mat * x;
    for r in 0..mi {
        primal = primal.max(gx[r] - prob.ineq_rhs[r]);
    }
    let ex = &prob.eq_mat * x;
    for r in 0..me {
        primal = primal.max((ex[r] - prob.eq_rhs[r]).abs());
    }
    let mut grad = &prob.hessian * x + &prob.linear;
    for r in 0..mi {
        let lam = y[r].max(0.0);
        if lam != 0.0 {
            grad += prob.ineq_mat.row(r).transpose().scale(lam);
        }
    }
    for r in 0..me {
        let v = y[mi + r];
        if v != 0.0 {
            grad += prob.eq_mat.row(r).transpose().scale(v);
        }
    }
    let dual = grad.amax();
    let mut comp = 0.0f64;
    for r in 0..mi {
        comp = comp.max((y[r].max(0.0) * (gx[r] - prob.ineq_rhs[r])).abs());
    }
    Residuals { primal: primal.max(0.0), dual, comp }
}

/// Active-set refinement: solve the equality-constrained KKT system on the
/// detected active set with light regularization and iterative refinement.
/// Degenerate optima (optimal faces rather than vertices) make the active set
/// ambiguous, so detection tries progressively looser slack thresholds and the
/// best candidate by exact residuals wins.
fn polish(
    prob: &QProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    tol: Tolerances,
) -> Option<(Residuals, DVector<f64>, DVector<f64>)> {
    let mut out: Option<(Residuals, DVector<f64>, DVector<f64>)> = None;
    for slack_tol in [1e-7, 1e-5, 1e-3] {
        if let Some((px, py)) = polish_with(prob, x, y, slack_tol) {
            let res = kkt_residuals(prob, &px, &py);
            let hit = res.primal <= tol.primal && res.dual <= tol.dual && res.comp <= tol.comp;
            let improves = match &out {
                None => true,
                Some((b, _, _)) => res.primal.max(res.dual).max(res.comp)
                    < b.primal.max(b.dual).max(b.comp),
            };
            if improves {
                out = Some((res, px, py));
            }
            if hit {
                break;
            }
        }
    }
    out
}

fn polish_with(
    prob: &QProblem,
    x: &DVector<f64>,
    y: &DVector<f64>,
    slack_tol: f64,
) -> Option<(DVector<f64>, DVector<f64>)> {
    let nv = prob.num_vars();
    let mi = prob.num_ineq();
    let me = prob.num_eq();
    let gx = &prob.ineq_mat * x;
    let mut active = Vec::new();
    for r in 0..mi {
        if y[r] > 1e-9 || prob.ineq_rhs[r] - gx[r] < slack_tol {
            active.push(r);
        }
    }

    // Mini active-set loop: degenerate optima (optimal faces) leave the true
    // active set invisible in the iterate, so grow it from primal violations
    // of the equality-constrained solve and shed rows with negative
    // multipliers.
    let mut px = DVector::zeros(nv);
    let mut py = DVector::zeros(0);
    for _round in 0..12 {
        let ma = active.len();
        if ma + me > 0 || prob.hessian.amax() > 0.0 {
            let mut a = DMatrix::zeros(ma + me, nv);
            let mut b = DVector::zeros(ma + me);
            for (k, &r) in active.iter().enumerate() {
                a.row_mut(k).copy_from(&prob.ineq_mat.row(r));
                b[k] = prob.ineq_rhs[r];
            }
            for r in 0..me {
                a.row_mut(ma + r).copy_from(&prob.eq_mat.row(r));
                b[ma + r] = prob.eq_rhs[r];
            }
            let rho = vec![1.0 / POLISH_DELTA; ma + me];
            let kkt = Kkt::build(&prob.hessian, a, rho, POLISH_DELTA)?;
            px = DVector::zeros(nv);
            py = DVector::zeros(ma + me);
            let rhs_top = -&prob.linear;
            kkt.solve(&prob.hessian, &rhs_top, &b, &mut px, &mut py);
            // refine against the unregularized KKT system
            for _ in 0..3 {
                let mut px2 = DVector::zeros(nv);
                let mut py2 = DVector::zeros(ma + me);
                let rt = &rhs_top - &prob.hessian * &px - kkt.a_mat.transpose() * &py;
                let rb = &b - &kkt.a_mat * &px;
                kkt.solve(&prob.hessian, &rt, &rb, &mut px2, &mut py2);
                px += px2;
                py += py2;
            }
        }
        // most negative multiplier leaves first
        let mut drop: Option<(usize, f64)> = None;
        for k in 0..active.len() {
            if py[k] < -1e-7 && drop.map(|(_, v)| py[k] < v).unwrap_or(true) {
                drop = Some((k, py[k]));
            }
        }
        if let Some((k, _)) = drop {
            active.remove(k);
            continue;
        }
        // then the worst violated inactive row enters
        let gxp = &prob.ineq_mat * &px;
        let mut enter: Option<(usize, f64)> = None;
        for r in 0..mi {
            if active.contains(&r) {
                continue;
            }
            let v = gxp[r] - prob.ineq_rhs[r];
            if v > 1e-11 && enter.map(|(_, w)| v > w).unwrap_or(true) {
                enter = Some((r, v));
            }
        }
        match enter {
            Some((r, _)) => active.push(r),
            None => break,
        }
    }

    let ma = active.len();
    let mut yfull = DVector::zeros(mi + me);
    for (k, &r) in active.iter().enumerate() {
        yfull[r] = py[k].max(0.0);
    }
    for r in 0..me {
        yfull[mi + r] = py[ma + r];
    }
    Some((px, yfull))
}

/// Primal infeasibility test on the dual divergence direction `dy`.
fn primal_infeasibility(
    prob: &QProblem,
    dy: &DVector<f64>,
    lower: &DVector<f64>,
    upper: &DVector<f64>,
    eps: f64,
    mi: usize,
) -> Option<DVector<f64>> {
    if dy.is_empty() {
        return None;
    }
    let norm = dy.amax();
    if norm <= 1e-14 {
        return None;
    }
    let mc = dy.len();
    let at_dy = prob.ineq_mat.transpose() * dy.rows(0, mi)
        + prob.eq_mat.transpose() * dy.rows(mi, mc - mi);
    if at_dy.amax() > eps * norm {
        return None;
    }
    let mut gap = 0.0;
    for r in 0..mc {
        let pos = dy[r].max(0.0);
        let neg = dy[r].min(0.0);
        if lower[r].is_infinite() {
            if neg < -eps * norm {
                return None;
            }
        } else {
            gap += lower[r] * neg;
        }
        gap += upper[r] * pos;
    }
    if gap < -eps * norm {
        Some(dy.scale(1.0 / norm))
    } else {
        None
    }
}

/// Dual infeasibility (primal unboundedness) test on the primal direction `dx`.
fn dual_infeasibility(prob: &QProblem, dx: &DVector<f64>, eps: f64) -> Option<DVector<f64>> {
    if dx.is_empty() {
        return None;
    }
    let norm = dx.amax();
    if norm <= 1e-14 {
        return None;
    }
    if (&prob.hessian * dx).amax() > eps * norm {
        return None;
    }
    if prob.linear.dot(dx) > -eps * norm {
        return None;
    }
    let gdx = &prob.ineq_mat * dx;
    for r in 0..prob.num_ineq() {
        if gdx[r] > eps * norm {
            return None;
        }
    }
    let edx = &prob.eq_mat * dx;
    if prob.num_eq() > 0 && edx.amax() > eps * norm {
        return None;
    }
    Some(dx.scale(1.0 / norm))
}
