//! Action-matrix machinery for the minimal solvers.
//!
//! The pipeline mirrors the standard template method for polynomial systems:
//! a homogeneous linear system is partially solved into an orthonormal
//! nullspace basis, the scaled-orthogonality conditions become a quadratic
//! system in the basis coefficients, the system is expanded by monomial
//! multiplication and reduced by elimination to a `[C | B]` template, and the
//! multiplication-by-`b` action matrix built from `-C^-1 B` yields the
//! candidate solutions through its eigenvectors.

use nalgebra::{Complex, DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

/// Relative singular-value gap below which a constraint system is treated as
/// not having the expected nullity.
pub const NULLSPACE_GAP: f64 = 1e-10;
/// Relative pivot threshold for the template elimination.
pub const ELIM_TOL: f64 = 1e-10;
/// Condition-number limit on the template block `C`.
pub const COND_LIMIT: f64 = 1e12;
/// Eigenvalue realness threshold: keep eigenvalues with |imag| < eps*(1+|real|).
pub const IMAG_EPS: f64 = 1e-6;
/// Dehomogenization threshold on the trailing (monomial `1`) eigenvector entry.
pub const HOM_EPS: f64 = 1e-8;
/// Tolerance for the internal product-monomial consistency check.
pub const CONS_EPS: f64 = 1e-4;
/// Relative residual certificate for returned solutions.
pub const CERT_TOL: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolyError {
    /// Singular-value gap test failed: the linear system does not have the
    /// expected nullity, which signals a degenerate acquisition set.
    #[error("constraint system does not have the expected nullity")]
    RankDeficient,
    /// Too few fully-reduced rows survived the template elimination.
    #[error("monomial elimination did not produce a full reduced template")]
    EliminationFailure,
    /// The template block C is numerically singular; typically caused by a
    /// degenerate scan-plane choice.
    #[error("template block C is numerically singular")]
    SingularC,
    /// Every eigenpair was rejected by the realness and consistency filters.
    #[error("no real solutions")]
    NoRealSolutions,
}

/// Orthonormal basis of the right nullspace of a constraint matrix, kept as
/// flat vectors; callers reshape them to their own matrix layout.
#[derive(Debug, Clone)]
pub struct NullspaceBasis {
    pub vectors: Vec<DVector<f64>>,
}

/// Computes an orthonormal basis of the right nullspace, expecting the matrix
/// to have rank `ncols - nullity`. Fails with `RankDeficient` when the
/// singular-value gap test `sigma_{p-k}/sigma_1 >= NULLSPACE_GAP` does not
/// hold.
pub fn nullspace(constraints: &DMatrix<f64>, nullity: usize) -> Result<NullspaceBasis, PolyError> {
    let p = constraints.ncols();
    assert!(nullity >= 1 && nullity < p, "nullity must be in 1..ncols");
    // Pad with zero rows so the SVD of a wide system still returns all right
    // singular vectors.
    let rows = constraints.nrows().max(p);
    let mut padded = DMatrix::zeros(rows, p);
    padded
        .view_mut((0, 0), (constraints.nrows(), p))
        .copy_from(constraints);
    let svd = padded.svd(false, true);
    let vt = svd.v_t.expect("v_t requested");
    let sv = &svd.singular_values;
    let smax = sv[0];
    if !(smax > 0.0) || sv[p - nullity - 1] / smax < NULLSPACE_GAP {
        return Err(PolyError::RankDeficient);
    }
    let vectors = (p - nullity..p)
        .map(|i| vt.row(i).transpose())
        .collect();
    Ok(NullspaceBasis { vectors })
}

/// A monomial as an exponent vector over a fixed variable list.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Monomial(pub Vec<u8>);

impl Monomial {
    pub fn constant(nvars: usize) -> Self {
        Monomial(vec![0; nvars])
    }

    pub fn var(nvars: usize, i: usize) -> Self {
        let mut e = vec![0; nvars];
        e[i] = 1;
        Monomial(e)
    }

    pub fn degree(&self) -> u32 {
        self.0.iter().map(|&e| e as u32).sum()
    }

    pub fn mul_var(&self, i: usize) -> Self {
        let mut e = self.0.clone();
        e[i] += 1;
        Monomial(e)
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.0
            .iter()
            .zip(x)
            .map(|(&e, &v)| v.powi(e as i32))
            .product()
    }

    fn without_var(&self, i: usize) -> Self {
        let mut e = self.0.clone();
        e.remove(i);
        Monomial(e)
    }

    /// Graded-lex ordering key: total degree first, then exponents of the
    /// earlier variables weigh more.
    fn grlex_key(&self) -> (u32, Vec<u8>) {
        (self.degree(), self.0.clone())
    }
}

/// A polynomial system stored as a coefficient matrix over an explicit
/// monomial list.
#[derive(Debug, Clone)]
pub struct QuadraticSystem {
    pub coeffs: DMatrix<f64>,
    pub monomials: Vec<Monomial>,
    pub nvars: usize,
}

impl QuadraticSystem {
    /// Evaluates every equation at the given point.
    pub fn residuals(&self, x: &[f64]) -> DVector<f64> {
        assert_eq!(x.len(), self.nvars);
        let values = DVector::from_iterator(
            self.monomials.len(),
            self.monomials.iter().map(|m| m.eval(x)),
        );
        &self.coeffs * values
    }

    /// Largest per-equation residual at `x`, scaled by the equation's
    /// coefficient norm and the magnitude of the monomial vector.
    pub fn relative_residual(&self, x: &[f64]) -> f64 {
        let values = DVector::from_iterator(
            self.monomials.len(),
            self.monomials.iter().map(|m| m.eval(x)),
        );
        let vnorm = values.norm().max(1.0);
        let res = &self.coeffs * &values;
        let mut worst: f64 = 0.0;
        for i in 0..res.len() {
            let row_norm = self.coeffs.row(i).norm();
            if row_norm > 0.0 {
                worst = worst.max(res[i].abs() / (row_norm * vnorm));
            }
        }
        worst
    }

    /// Sets variable `var` to 1, producing a system over the remaining
    /// variables in their original order.
    pub fn dehomogenize(&self, var: usize) -> QuadraticSystem {
        assert!(var < self.nvars);
        let mut mono_index: Vec<(Monomial, usize)> = Vec::new();
        let mut columns: Vec<usize> = Vec::with_capacity(self.monomials.len());
        for m in &self.monomials {
            let reduced = m.without_var(var);
            let idx = match mono_index.iter().position(|(k, _)| *k == reduced) {
                Some(pos) => mono_index[pos].1,
                None => {
                    let idx = mono_index.len();
                    mono_index.push((reduced, idx));
                    idx
                }
            };
            columns.push(idx);
        }
        let mut coeffs = DMatrix::zeros(self.coeffs.nrows(), mono_index.len());
        for r in 0..self.coeffs.nrows() {
            for (c, &target) in columns.iter().enumerate() {
                coeffs[(r, target)] += self.coeffs[(r, c)];
            }
        }
        QuadraticSystem {
            coeffs,
            monomials: mono_index.into_iter().map(|(m, _)| m).collect(),
            nvars: self.nvars - 1,
        }
    }
}

fn quadratic_monomials(nvars: usize) -> Vec<Monomial> {
    let mut monomials = Vec::with_capacity(nvars * (nvars + 1) / 2);
    for k in 0..nvars {
        for l in k..nvars {
            let mut e = vec![0u8; nvars];
            e[k] += 1;
            e[l] += 1;
            monomials.push(Monomial(e));
        }
    }
    monomials
}

/// Fills one equation row from a bilinear form over the basis coefficients:
/// row entry for monomial `u_k u_l` is `B(k,l) + B(l,k)` (or `B(k,k)` on the
/// diagonal).
fn bilinear_row(coeffs: &mut DMatrix<f64>, row: usize, n: usize, form: impl Fn(usize, usize) -> f64) {
    let mut col = 0;
    for k in 0..n {
        for l in k..n {
            coeffs[(row, col)] = if k == l {
                form(k, k)
            } else {
                form(k, l) + form(l, k)
            };
            col += 1;
        }
    }
}

/// The ten scaled-orthogonality equations for a six-element basis of scaled
/// rotation blocks: five on the columns of `S` and five on its rows
/// (equal norms and mutual orthogonality).
pub fn quadratic_constraints_3d(s_blocks: &[Matrix3<f64>]) -> QuadraticSystem {
    let n = s_blocks.len();
    assert_eq!(n, 6, "3D basis must have six elements");
    let monomials = quadratic_monomials(n);
    let mut coeffs = DMatrix::zeros(10, monomials.len());
    // Columns of each basis block, then rows; five equations per family.
    let columns: Vec<[Vector3<f64>; 3]> = s_blocks
        .iter()
        .map(|s| [s.column(0).into(), s.column(1).into(), s.column(2).into()])
        .collect();
    let rows: Vec<[Vector3<f64>; 3]> = s_blocks
        .iter()
        .map(|s| {
            [
                s.row(0).transpose(),
                s.row(1).transpose(),
                s.row(2).transpose(),
            ]
        })
        .collect();
    let mut eq = 0;
    for family in [&columns, &rows] {
        for (i, j) in [(0usize, 1usize), (0, 2)] {
            bilinear_row(&mut coeffs, eq, n, |k, l| {
                family[k][i].dot(&family[l][i]) - family[k][j].dot(&family[l][j])
            });
            eq += 1;
        }
        for (i, j) in [(0usize, 1usize), (0, 2), (1, 2)] {
            bilinear_row(&mut coeffs, eq, n, |k, l| family[k][i].dot(&family[l][j]));
            eq += 1;
        }
    }
    QuadraticSystem {
        coeffs,
        monomials,
        nvars: n,
    }
}

/// The two scaled-orthogonality equations for a three-element basis of
/// reduced blocks `[c1 c2]`: equal column norms and column orthogonality.
pub fn quadratic_constraints_2d(c_pairs: &[(Vector3<f64>, Vector3<f64>)]) -> QuadraticSystem {
    let n = c_pairs.len();
    assert_eq!(n, 3, "2D basis must have three elements");
    let monomials = quadratic_monomials(n);
    let mut coeffs = DMatrix::zeros(2, monomials.len());
    bilinear_row(&mut coeffs, 0, n, |k, l| {
        c_pairs[k].0.dot(&c_pairs[l].0) - c_pairs[k].1.dot(&c_pairs[l].1)
    });
    bilinear_row(&mut coeffs, 1, n, |k, l| c_pairs[k].0.dot(&c_pairs[l].1));
    QuadraticSystem {
        coeffs,
        monomials,
        nvars: n,
    }
}

/// The expanded (pre-elimination) system: product equations followed by the
/// originals, with the template's target monomials in the trailing columns.
#[derive(Debug, Clone)]
pub struct ExpandedSystem {
    pub matrix: DMatrix<f64>,
    /// Column monomials; the last `m_c.len() + m_b.len()` are the targets.
    pub monomials: Vec<Monomial>,
    pub leading: usize,
}

/// Reduced template `[C | B]` whose rows are supported only on the target
/// monomials `[m_C; m_B]`.
#[derive(Debug, Clone)]
pub struct ReducedTemplate {
    pub c: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub m_c: Vec<Monomial>,
    pub m_b: Vec<Monomial>,
}

fn target_monomials_3d() -> (Vec<Monomial>, Vec<Monomial>) {
    // Variables (a, b, c, d, w) where w is the spectator left over after
    // dehomogenization; exponents are [a, b, c, d, w].
    let m = |e: [u8; 5]| Monomial(e.to_vec());
    let m_c = vec![
        m([0, 3, 0, 0, 0]), // b^3
        m([1, 2, 0, 0, 0]), // a b^2
        m([0, 1, 0, 0, 1]), // b w
        m([0, 1, 0, 1, 0]), // b d
        m([0, 1, 1, 0, 0]), // b c
    ];
    let m_b = vec![
        m([0, 2, 0, 0, 0]), // b^2
        m([1, 1, 0, 0, 0]), // a b
        m([0, 0, 0, 0, 1]), // w
        m([0, 0, 0, 1, 0]), // d
        m([0, 0, 1, 0, 0]), // c
        m([0, 1, 0, 0, 0]), // b
        m([1, 0, 0, 0, 0]), // a
        m([0, 0, 0, 0, 0]), // 1
    ];
    (m_c, m_b)
}

fn target_monomials_2d() -> (Vec<Monomial>, Vec<Monomial>) {
    let m = |e: [u8; 2]| Monomial(e.to_vec());
    let m_c = vec![m([1, 2]), m([0, 2])]; // a b^2, b^2
    let m_b = vec![m([1, 1]), m([0, 1]), m([1, 0]), m([0, 0])]; // ab, b, a, 1
    (m_c, m_b)
}

/// Multiplies every equation by each multiplier monomial, appends the
/// originals, and orders columns so the target monomials come last (the rest
/// in descending graded-lex order).
fn expand(sys: &QuadraticSystem, multipliers: &[Monomial], targets: &[Monomial]) -> ExpandedSystem {
    let neq = sys.coeffs.nrows();
    let nrows = neq * (multipliers.len() + 1);

    // Collect every monomial that appears.
    let mut seen: Vec<Monomial> = Vec::new();
    let push_unique = |m: Monomial, seen: &mut Vec<Monomial>| {
        if !seen.contains(&m) {
            seen.push(m);
        }
    };
    for m in &sys.monomials {
        push_unique(m.clone(), &mut seen);
        for mult in multipliers {
            let mut e = m.0.clone();
            for (i, x) in mult.0.iter().enumerate() {
                e[i] += x;
            }
            push_unique(Monomial(e), &mut seen);
        }
    }
    let mut leading: Vec<Monomial> = seen
        .iter()
        .filter(|m| !targets.contains(m))
        .cloned()
        .collect();
    leading.sort_by(|a, b| b.grlex_key().cmp(&a.grlex_key()));
    let nlead = leading.len();
    let mut monomials = leading;
    monomials.extend(targets.iter().cloned());

    let col_of = |m: &Monomial| monomials.iter().position(|k| k == m).expect("known monomial");
    let mut matrix = DMatrix::zeros(nrows, monomials.len());
    let mut row = 0;
    for mult in multipliers {
        for e in 0..neq {
            for (c, m) in sys.monomials.iter().enumerate() {
                let mut exp = m.0.clone();
                for (i, x) in mult.0.iter().enumerate() {
                    exp[i] += x;
                }
                matrix[(row, col_of(&Monomial(exp)))] += sys.coeffs[(e, c)];
            }
            row += 1;
        }
    }
    for e in 0..neq {
        for (c, m) in sys.monomials.iter().enumerate() {
            matrix[(row, col_of(m))] += sys.coeffs[(e, c)];
        }
        row += 1;
    }
    ExpandedSystem {
        matrix,
        monomials,
        leading: nlead,
    }
}

/// Eliminates the leading block with full pivoting and compresses the
/// zero-support rows into `m_c.len()` well-conditioned template rows.
fn reduce(expanded: &ExpandedSystem, m_c: &[Monomial], m_b: &[Monomial]) -> Result<ReducedTemplate, PolyError> {
    let ntarget = m_c.len() + m_b.len();
    let nlead = expanded.leading;
    let nrows = expanded.matrix.nrows();
    let mut m = expanded.matrix.clone();
    // Unit row norms keep the pivot threshold meaningful across instances.
    for r in 0..nrows {
        let norm = m.row(r).norm();
        if norm > 0.0 {
            for c in 0..m.ncols() {
                m[(r, c)] /= norm;
            }
        }
    }

    let mut rank = 0;
    for step in 0..nlead.min(nrows) {
        let mut pivot = (step, step, 0.0f64);
        for i in step..nrows {
            for j in step..nlead {
                let v = m[(i, j)].abs();
                if v > pivot.2 {
                    pivot = (i, j, v);
                }
            }
        }
        if pivot.2 < ELIM_TOL {
            break;
        }
        m.swap_rows(step, pivot.0);
        m.swap_columns(step, pivot.1);
        let diag = m[(step, step)];
        for i in step + 1..nrows {
            let factor = m[(i, step)] / diag;
            if factor != 0.0 {
                for j in step..m.ncols() {
                    let sub = factor * m[(step, j)];
                    m[(i, j)] -= sub;
                }
                m[(i, step)] = 0.0;
            }
        }
        rank = step + 1;
    }

    let free = nrows - rank;
    if free < m_c.len() {
        return Err(PolyError::EliminationFailure);
    }
    let reduced = m.view((rank, nlead), (free, ntarget)).into_owned();
    let svd = reduced.svd(false, true);
    let sv = &svd.singular_values;
    if !(sv[0] > 0.0) || sv[m_c.len() - 1] / sv[0] < ELIM_TOL {
        return Err(PolyError::EliminationFailure);
    }
    let vt = svd.v_t.expect("v_t requested");
    let rows = vt.rows(0, m_c.len());
    Ok(ReducedTemplate {
        c: rows.columns(0, m_c.len()).into_owned(),
        b: rows.columns(m_c.len(), m_b.len()).into_owned(),
        m_c: m_c.to_vec(),
        m_b: m_b.to_vec(),
    })
}

/// Expanded 3D system (for rank diagnostics): the ten dehomogenized equations
/// multiplied by each of the first four variables, plus the originals.
pub fn expand_3d(sys: &QuadraticSystem) -> ExpandedSystem {
    assert_eq!(sys.nvars, 5, "expected a dehomogenized 5-variable system");
    let mult: Vec<Monomial> = (0..4).map(|i| Monomial::var(5, i)).collect();
    let (m_c, m_b) = target_monomials_3d();
    let targets: Vec<Monomial> = m_c.into_iter().chain(m_b).collect();
    expand(sys, &mult, &targets)
}

/// Reduces the dehomogenized 3D system to the 5x13 template `[C | B]` over
/// `m_C = [b^3, ab^2, bw, bd, bc]` and `m_B = [b^2, ab, w, d, c, b, a, 1]`.
pub fn expand_and_reduce_3d(sys: &QuadraticSystem) -> Result<ReducedTemplate, PolyError> {
    let expanded = expand_3d(sys);
    let (m_c, m_b) = target_monomials_3d();
    reduce(&expanded, &m_c, &m_b)
}

/// Reduces a dehomogenized two-conic system (two variables) to the 2x6
/// template over `m_C = [ab^2, b^2]` and `m_B = [ab, b, a, 1]`.
pub fn expand_and_reduce_2d(sys: &QuadraticSystem) -> Result<ReducedTemplate, PolyError> {
    assert_eq!(sys.nvars, 2, "expected a dehomogenized 2-variable system");
    let mult: Vec<Monomial> = (0..2).map(|i| Monomial::var(2, i)).collect();
    let (m_c, m_b) = target_monomials_2d();
    let targets: Vec<Monomial> = m_c.iter().chain(m_b.iter()).cloned().collect();
    let expanded = expand(sys, &mult, &targets);
    reduce(&expanded, &m_c, &m_b)
}

/// Multiplication-by-`b` matrix on the quotient basis `m_B`, together with
/// the extraction layout derived from the basis monomials.
#[derive(Debug, Clone)]
pub struct ActionMatrix {
    pub m: DMatrix<f64>,
    pub basis_monomials: Vec<Monomial>,
    /// Position of the constant monomial in `m_B`.
    one_index: usize,
    /// Position of each variable's linear monomial in `m_B`, in variable order.
    unknown_indices: Vec<usize>,
    /// (entry, factor, factor) triples for degree-2 basis monomials.
    consistency: Vec<(usize, usize, usize)>,
}

/// Builds the action matrix for multiplication by variable `w_var`: rows for
/// basis monomials that leave the basis come from `-C^-1 B`, the rest are
/// unit shift rows.
pub fn action_matrix(tmpl: &ReducedTemplate, w_var: usize) -> Result<ActionMatrix, PolyError> {
    let nc = tmpl.m_c.len();
    let nb = tmpl.m_b.len();
    let svd = tmpl.c.clone().svd(false, false);
    let sv = &svd.singular_values;
    if !(sv[nc - 1] > 0.0) || sv[0] / sv[nc - 1] > COND_LIMIT {
        return Err(PolyError::SingularC);
    }
    let lu = tmpl.c.clone().lu();
    let x = lu.solve(&tmpl.b).ok_or(PolyError::SingularC)?;

    let mut m = DMatrix::zeros(nb, nb);
    for i in 0..nb {
        let shifted = tmpl.m_b[i].mul_var(w_var);
        if let Some(j) = tmpl.m_c.iter().position(|k| *k == shifted) {
            for col in 0..nb {
                m[(i, col)] = -x[(j, col)];
            }
        } else if let Some(j) = tmpl.m_b.iter().position(|k| *k == shifted) {
            m[(i, j)] = 1.0;
        } else {
            unreachable!("action monomial leaves the template span");
        }
    }

    let nvars = tmpl.m_b[0].0.len();
    let one_index = tmpl
        .m_b
        .iter()
        .position(|k| k.degree() == 0)
        .expect("basis contains the constant monomial");
    let unknown_indices = (0..nvars)
        .map(|v| {
            tmpl.m_b
                .iter()
                .position(|k| *k == Monomial::var(nvars, v))
                .expect("basis contains every linear monomial")
        })
        .collect();
    let mut consistency = Vec::new();
    for (i, mono) in tmpl.m_b.iter().enumerate() {
        if mono.degree() == 2 {
            let mut factors = Vec::new();
            for (v, &e) in mono.0.iter().enumerate() {
                for _ in 0..e {
                    factors.push(v);
                }
            }
            let fa = tmpl
                .m_b
                .iter()
                .position(|k| *k == Monomial::var(nvars, factors[0]))
                .expect("linear factor present");
            let fb = tmpl
                .m_b
                .iter()
                .position(|k| *k == Monomial::var(nvars, factors[1]))
                .expect("linear factor present");
            consistency.push((i, fa, fb));
        }
    }
    Ok(ActionMatrix {
        m,
        basis_monomials: tmpl.m_b.clone(),
        one_index,
        unknown_indices,
        consistency,
    })
}

/// Eigen-extraction of the real solutions encoded by an action matrix. Each
/// kept eigenvector is normalized by its constant-monomial entry and checked
/// for internal product consistency; rejected vectors are dropped.
pub fn extract_solutions(am: &ActionMatrix) -> Result<Vec<Vec<f64>>, PolyError> {
    let n = am.m.nrows();
    let schur = nalgebra::linalg::Schur::try_new(am.m.clone(), f64::EPSILON, 10_000)
        .ok_or(PolyError::NoRealSolutions)?;
    let eigenvalues = schur.complex_eigenvalues();

    let mut solutions: Vec<Vec<f64>> = Vec::new();
    for lambda in eigenvalues.iter() {
        let Complex { re, im } = *lambda;
        if im.abs() >= IMAG_EPS * (1.0 + re.abs()) {
            continue;
        }
        // Eigenvector as the least-singular right vector of (M - re*I).
        let mut shifted = am.m.clone();
        for i in 0..n {
            shifted[(i, i)] -= re;
        }
        let svd = shifted.svd(false, true);
        let vt = svd.v_t.expect("v_t requested");
        let v = vt.row(n - 1).transpose();
        if v[am.one_index].abs() < HOM_EPS {
            continue;
        }
        let v = &v / v[am.one_index];
        let unknowns: Vec<f64> = am.unknown_indices.iter().map(|&i| v[i]).collect();
        let consistent = am.consistency.iter().all(|&(entry, fa, fb)| {
            let prod = v[fa] * v[fb];
            (v[entry] - prod).abs() <= CONS_EPS * (1.0 + prod.abs())
        });
        if !consistent {
            continue;
        }
        let duplicate = solutions.iter().any(|s| {
            s.iter()
                .zip(&unknowns)
                .all(|(a, b)| (a - b).abs() <= 1e-8 * (1.0 + a.abs().max(b.abs())))
        });
        if !duplicate {
            solutions.push(unknowns);
        }
    }
    if solutions.is_empty() {
        return Err(PolyError::NoRealSolutions);
    }
    Ok(solutions)
}

// ---------------------------------------------------------------------------
// Two-conic intersection
// ---------------------------------------------------------------------------

fn poly_mul(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; a.len() + b.len() - 1];
    for (i, &x) in a.iter().enumerate() {
        for (j, &y) in b.iter().enumerate() {
            out[i + j] += x * y;
        }
    }
    out
}

fn poly_sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    let n = a.len().max(b.len());
    let mut out = vec![0.0; n];
    for (i, &x) in a.iter().enumerate() {
        out[i] += x;
    }
    for (i, &y) in b.iter().enumerate() {
        out[i] -= y;
    }
    out
}

fn poly_eval(p: &[f64], x: f64) -> f64 {
    p.iter().rev().fold(0.0, |acc, &c| acc * x + c)
}

/// Real roots of a low-degree polynomial (ascending coefficients) via the
/// companion matrix.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let maxc = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if maxc == 0.0 {
        return Vec::new();
    }
    let mut deg = coeffs.len() - 1;
    while deg > 0 && coeffs[deg].abs() < 1e-13 * maxc {
        deg -= 1;
    }
    if deg == 0 {
        return Vec::new();
    }
    if deg == 1 {
        return vec![-coeffs[0] / coeffs[1]];
    }
    let lead = coeffs[deg];
    let mut comp = DMatrix::zeros(deg, deg);
    for i in 0..deg {
        comp[(0, i)] = -coeffs[deg - 1 - i] / lead;
    }
    for i in 1..deg {
        comp[(i, i - 1)] = 1.0;
    }
    let Some(schur) = nalgebra::linalg::Schur::try_new(comp, f64::EPSILON, 10_000) else {
        return Vec::new();
    };
    schur
        .complex_eigenvalues()
        .iter()
        .filter(|l| l.im.abs() < IMAG_EPS * (1.0 + l.re.abs()))
        .map(|l| l.re)
        .collect()
}

/// Coefficients `[a^2, ab, b^2, a, b, 1]` of one dehomogenized conic.
fn conic_coeffs(sys: &QuadraticSystem, row: usize) -> [f64; 6] {
    let d = sys; // two-variable system
    let order = [
        Monomial(vec![2, 0]),
        Monomial(vec![1, 1]),
        Monomial(vec![0, 2]),
        Monomial(vec![1, 0]),
        Monomial(vec![0, 1]),
        Monomial(vec![0, 0]),
    ];
    let mut out = [0.0; 6];
    for (i, m) in order.iter().enumerate() {
        if let Some(c) = d.monomials.iter().position(|k| k == m) {
            out[i] = d.coeffs[(row, c)];
        }
    }
    out
}

/// Intersects two conics through the resultant in one variable: a quartic in
/// `b` solved by companion matrix, back-substituted for `a`.
fn conic_intersections_resultant(q1: [f64; 6], q2: [f64; 6]) -> Vec<(f64, f64)> {
    // q = alpha * a^2 + beta(b) * a + gamma(b)
    let split = |q: [f64; 6]| {
        let alpha = vec![q[0]];
        let beta = vec![q[3], q[1]];
        let gamma = vec![q[5], q[4], q[2]];
        (alpha, beta, gamma)
    };
    let (a1, b1, g1) = split(q1);
    let (a2, b2, g2) = split(q2);
    let r1 = poly_sub(&poly_mul(&a1, &g2), &poly_mul(&a2, &g1));
    let r2 = poly_sub(&poly_mul(&a1, &b2), &poly_mul(&a2, &b1));
    let r3 = poly_sub(&poly_mul(&b1, &g2), &poly_mul(&b2, &g1));
    let res = poly_sub(&poly_mul(&r1, &r1), &poly_mul(&r2, &r3));

    let scale = q1
        .iter()
        .chain(q2.iter())
        .fold(0.0f64, |m, c| m.max(c.abs()))
        .max(1e-300);
    let mut candidates = Vec::new();
    for b in real_roots(&res) {
        let denom = poly_eval(&r2, b);
        if denom.abs() > 1e-11 * scale {
            candidates.push((-poly_eval(&r1, b) / denom, b));
            continue;
        }
        // Degenerate linear combination: fall back to solving each conic as a
        // quadratic in `a` for this value of `b`.
        for q in [&q1, &q2] {
            let qa = q[0];
            let qb = q[1] * b + q[3];
            let qc = q[2] * b * b + q[4] * b + q[5];
            if qa.abs() > 1e-13 * scale {
                let disc = qb * qb - 4.0 * qa * qc;
                if disc >= 0.0 {
                    let sq = disc.sqrt();
                    candidates.push(((-qb + sq) / (2.0 * qa), b));
                    candidates.push(((-qb - sq) / (2.0 * qa), b));
                }
            } else if qb.abs() > 1e-13 * scale {
                candidates.push((-qc / qb, b));
            }
        }
    }
    candidates
}

/// Real intersections of the two homogeneous conics in `(a, b, c)`,
/// dehomogenized at `c = 1`. Every returned triple satisfies both equations
/// to the relative residual certificate; up to four solutions.
pub fn solve_two_conics(sys: &QuadraticSystem) -> Result<Vec<[f64; 3]>, PolyError> {
    assert_eq!(sys.nvars, 3, "expected two conics in three unknowns");
    assert_eq!(sys.coeffs.nrows(), 2);
    let d = sys.dehomogenize(2);

    // Paper-shaped template route first; fall back to the resultant when the
    // quotient basis degenerates (e.g. sparse systems where ab is constant in
    // the quotient).
    let mut raw: Vec<(f64, f64)> = Vec::new();
    if let Ok(tmpl) = expand_and_reduce_2d(&d) {
        if let Ok(am) = action_matrix(&tmpl, 1) {
            if let Ok(sols) = extract_solutions(&am) {
                raw.extend(sols.into_iter().map(|s| (s[0], s[1])));
            }
        }
    }
    let certified = |a: f64, b: f64| sys.relative_residual(&[a, b, 1.0]) < CERT_TOL;
    let mut out: Vec<[f64; 3]> = Vec::new();
    let push = |a: f64, b: f64, out: &mut Vec<[f64; 3]>| {
        if !a.is_finite() || !b.is_finite() || !certified(a, b) {
            return;
        }
        let dup = out.iter().any(|s| {
            (s[0] - a).abs() <= 1e-7 * (1.0 + a.abs()) && (s[1] - b).abs() <= 1e-7 * (1.0 + b.abs())
        });
        if !dup {
            out.push([a, b, 1.0]);
        }
    };
    for (a, b) in raw {
        push(a, b, &mut out);
    }
    if out.is_empty() {
        let q1 = conic_coeffs(&d, 0);
        let q2 = conic_coeffs(&d, 1);
        for (a, b) in conic_intersections_resultant(q1, q2) {
            push(a, b, &mut out);
        }
    }
    if out.is_empty() {
        return Err(PolyError::NoRealSolutions);
    }
    out.truncate(4);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nullspace_of_identity_rows() {
        // First 7 rows of a 13-column identity: nullspace is the span of the
        // last six canonical basis vectors.
        let mut m = DMatrix::zeros(7, 13);
        for i in 0..7 {
            m[(i, i)] = 1.0;
        }
        let ns = nullspace(&m, 6).unwrap();
        assert_eq!(ns.vectors.len(), 6);
        for v in &ns.vectors {
            for i in 0..7 {
                assert!(v[i].abs() < 1e-12);
            }
            assert!((v.norm() - 1.0).abs() < 1e-12);
        }
        // Mutual orthogonality.
        for i in 0..6 {
            for j in i + 1..6 {
                assert!(ns.vectors[i].dot(&ns.vectors[j]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn nullspace_rejects_rank_deficient_input() {
        let mut m = DMatrix::zeros(7, 13);
        for i in 0..6 {
            m[(i, i)] = 1.0;
        }
        m.set_row(6, &m.row(0).into_owned()); // duplicate row -> rank 6
        assert_eq!(nullspace(&m, 6).unwrap_err(), PolyError::RankDeficient);
    }

    #[test]
    fn nullspace_vectors_satisfy_constraints() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let m = DMatrix::from_fn(7, 13, |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let ns = nullspace(&m, 6).unwrap();
            for v in &ns.vectors {
                assert!((&m * v).norm() < 1e-8 * m.norm());
            }
        }
    }

    #[test]
    fn zero_s_blocks_give_zero_system() {
        let blocks = vec![Matrix3::zeros(); 6];
        let sys = quadratic_constraints_3d(&blocks);
        assert_eq!(sys.coeffs.nrows(), 10);
        assert_eq!(sys.monomials.len(), 21);
        assert!(sys.coeffs.norm() == 0.0);
    }

    #[test]
    fn quadratic_residuals_are_degree_two_homogeneous() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let blocks: Vec<Matrix3<f64>> = (0..6)
            .map(|_| Matrix3::from_fn(|_, _| rng.random::<f64>() * 2.0 - 1.0))
            .collect();
        let sys = quadratic_constraints_3d(&blocks);
        let u: Vec<f64> = (0..6).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        let lambda = 1.7;
        let scaled: Vec<f64> = u.iter().map(|x| lambda * x).collect();
        let r1 = sys.residuals(&u);
        let r2 = sys.residuals(&scaled);
        for i in 0..10 {
            assert!((r2[i] - lambda * lambda * r1[i]).abs() < 1e-10 * (1.0 + r1[i].abs()));
        }
    }

    #[test]
    fn constraints_2d_with_equal_columns_zero_first_equation() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let pairs: Vec<(Vector3<f64>, Vector3<f64>)> = (0..3)
            .map(|_| {
                let c = Vector3::from_fn(|_, _| rng.random::<f64>());
                (c, c)
            })
            .collect();
        let sys = quadratic_constraints_2d(&pairs);
        assert!(sys.coeffs.row(0).norm() < 1e-14);
        assert!(sys.coeffs.row(1).norm() > 0.0);
    }

    #[test]
    fn two_conics_hand_case() {
        // a^2 + b^2 = 2, ab = 1 (homogenized with c): solutions (1,1), (-1,-1).
        let monomials = quadratic_monomials(3);
        let mut coeffs = DMatrix::zeros(2, monomials.len());
        let idx = |e: [u8; 3]| monomials.iter().position(|m| m.0 == e.to_vec()).unwrap();
        coeffs[(0, idx([2, 0, 0]))] = 1.0;
        coeffs[(0, idx([0, 2, 0]))] = 1.0;
        coeffs[(0, idx([0, 0, 2]))] = -2.0;
        coeffs[(1, idx([1, 1, 0]))] = 1.0;
        coeffs[(1, idx([0, 0, 2]))] = -1.0;
        let sys = QuadraticSystem {
            coeffs,
            monomials,
            nvars: 3,
        };
        let mut sols = solve_two_conics(&sys).unwrap();
        sols.sort_by(|x, y| x[0].partial_cmp(&y[0]).unwrap());
        assert_eq!(sols.len(), 2);
        assert!((sols[0][0] + 1.0).abs() < 1e-8 && (sols[0][1] + 1.0).abs() < 1e-8);
        assert!((sols[1][0] - 1.0).abs() < 1e-8 && (sols[1][1] - 1.0).abs() < 1e-8);
    }

    #[test]
    fn two_conics_without_real_intersection() {
        // a^2 + b^2 = -c^2 has no real points with c = 1.
        let monomials = quadratic_monomials(3);
        let mut coeffs = DMatrix::zeros(2, monomials.len());
        let idx = |e: [u8; 3]| monomials.iter().position(|m| m.0 == e.to_vec()).unwrap();
        coeffs[(0, idx([2, 0, 0]))] = 1.0;
        coeffs[(0, idx([0, 2, 0]))] = 1.0;
        coeffs[(0, idx([0, 0, 2]))] = 1.0;
        coeffs[(1, idx([1, 0, 1]))] = 1.0;
        coeffs[(1, idx([0, 1, 1]))] = -1.0;
        let sys = QuadraticSystem {
            coeffs,
            monomials,
            nvars: 3,
        };
        assert_eq!(solve_two_conics(&sys).unwrap_err(), PolyError::NoRealSolutions);
    }

    #[test]
    fn generic_two_conics_certified_and_bounded() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut found_any = false;
        for _ in 0..50 {
            let monomials = quadratic_monomials(3);
            let coeffs = DMatrix::from_fn(2, monomials.len(), |_, _| rng.random::<f64>() * 2.0 - 1.0);
            let sys = QuadraticSystem {
                coeffs,
                monomials,
                nvars: 3,
            };
            match solve_two_conics(&sys) {
                Ok(sols) => {
                    found_any = true;
                    assert!(sols.len() <= 4);
                    for s in &sols {
                        assert!(sys.relative_residual(s) < CERT_TOL);
                    }
                }
                Err(PolyError::NoRealSolutions) => {}
                Err(other) => panic!("unexpected error {other:?}"),
            }
        }
        assert!(found_any);
    }

    #[test]
    fn dehomogenize_merges_monomials() {
        // (x + y)^2-like system: x^2 + 2xy + y^2 over (x, y), dehomogenize y.
        let monomials = quadratic_monomials(2);
        let mut coeffs = DMatrix::zeros(1, monomials.len());
        let idx = |e: [u8; 2]| monomials.iter().position(|m| m.0 == e.to_vec()).unwrap();
        coeffs[(0, idx([2, 0]))] = 1.0;
        coeffs[(0, idx([1, 1]))] = 2.0;
        coeffs[(0, idx([0, 2]))] = 1.0;
        let sys = QuadraticSystem {
            coeffs,
            monomials,
            nvars: 2,
        };
        let d = sys.dehomogenize(1);
        assert_eq!(d.nvars, 1);
        // x^2 + 2x + 1 at x = 3 -> 16
        let r = d.residuals(&[3.0]);
        assert!((r[0] - 16.0).abs() < 1e-12);
    }
}
