//! Semidefinite program for KL-soft-constrained covariance steering, written in
//! the sparse SDPA format (`.dat-s`).
//!
//! Variables per step `k < N`: `U_k = K_k Σ_k` (m×n), symmetric `Y_k` (m×m),
//! `v_k`, and an effort slack `w_k ≥ ‖v_k‖²`. Per step `k ≥ 1`: symmetric
//! `Σ_k` and `μ_k`. Terminal terms: `q ≥ (μ_N − μ_f)ᵀ Σ_f⁻¹ (μ_N − μ_f)`,
//! lower-triangular `Z` with `[[Σ_N, Z], [Zᵀ, Diag(Z)]] ⪰ 0`, and `t_i ≤ log Z_ii`.
//!
//! SDPA has no logarithm, so `t_i ≤ log Z_ii` is replaced by tangent cuts
//! `t_i ≤ log z₀ + Z_ii/z₀ − 1` on a geometric grid of `z₀`. This is an outer
//! approximation: the exported optimum is a lower bound on the true optimum.
//!
//! Block layout: N Schur blocks `[[Y_k, U_k], [U_kᵀ, Σ_k]]` of size m+n, N
//! effort blocks `[[I, v_k], [v_kᵀ, w_k]]` of size m+1, one mean block of size
//! n+1, one log-det block of size 2n, and one LP block holding every moment
//! equality as a pair of opposite inequalities plus the tangent cuts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::covsteer::{AffinePolicy, SteeringProblem};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdpEntry {
    /// 0 for the constant matrix `F_0`, otherwise a 1-based variable index.
    pub matrix: usize,
    /// 1-based block index.
    pub block: usize,
    /// 1-based, `row <= col`.
    pub row: usize,
    pub col: usize,
    pub value: f64,
}

/// `min cᵀx  s.t.  Σ_i F_i x_i − F_0 ⪰ 0` plus a constant objective offset.
#[derive(Clone, Debug, PartialEq)]
pub struct SdpProblem {
    pub names: Vec<String>,
    pub objective: Vec<f64>,
    pub objective_constant: f64,
    /// SDPA block structure; negative sizes are diagonal (LP) blocks.
    pub blocks: Vec<i64>,
    pub entries: Vec<SdpEntry>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExportOptions {
    /// Tangent points per factor of two.
    pub cuts_per_octave: usize,
    /// Tangent points span `2^-octaves ..= 2^octaves`.
    pub octaves: usize,
}

impl Default for ExportOptions {
    fn default() -> Self {
        Self {
            cuts_per_octave: 4,
            octaves: 20,
        }
    }
}

impl ExportOptions {
    pub fn tangent_points(&self) -> Vec<f64> {
        let per = self.cuts_per_octave.max(1) as i64;
        let span = self.octaves as i64 * per;
        (-span..=span)
            .map(|j| (j as f64 / per as f64).exp2())
            .collect()
    }
}

/// Sparse affine expression; `None` is the constant term.
type Expr = BTreeMap<Option<usize>, f64>;

fn add_term(e: &mut Expr, var: Option<usize>, coef: f64) {
    if coef != 0.0 {
        *e.entry(var).or_insert(0.0) += coef;
    }
}

fn constant(c: f64) -> Expr {
    let mut e = Expr::new();
    add_term(&mut e, None, c);
    e
}

fn var(v: usize) -> Expr {
    let mut e = Expr::new();
    add_term(&mut e, Some(v), 1.0);
    e
}

/// Matrix of scalars, each either a variable or a constant.
#[derive(Clone)]
enum Cell {
    Var(usize),
    Const(f64),
}

impl Cell {
    fn add_to(&self, e: &mut Expr, coef: f64) {
        match *self {
            Cell::Var(v) => add_term(e, Some(v), coef),
            Cell::Const(c) => add_term(e, None, coef * c),
        }
    }
}

type Grid = Vec<Vec<Cell>>;

fn const_grid(t: &Tensor<f64>) -> Grid {
    (0..t.rows())
        .map(|i| (0..t.cols()).map(|j| Cell::Const(t.get(i, j))).collect())
        .collect()
}

struct Builder {
    names: Vec<String>,
    objective: Vec<f64>,
    blocks: Vec<i64>,
    entries: BTreeMap<(usize, usize, usize, usize), f64>,
    lp_rows: Vec<Expr>,
}

impl Builder {
    fn var(&mut self, name: String) -> usize {
        self.names.push(name);
        self.objective.push(0.0);
        self.names.len()
    }

    fn sym(&mut self, name: &str, n: usize) -> Grid {
        let mut ids = vec![vec![0; n]; n];
        for i in 0..n {
            for j in i..n {
                let id = self.var(format!("{name}[{i},{j}]"));
                ids[i][j] = id;
                ids[j][i] = id;
            }
        }
        ids.into_iter()
            .map(|r| r.into_iter().map(Cell::Var).collect())
            .collect()
    }

    fn full(&mut self, name: &str, rows: usize, cols: usize) -> Grid {
        (0..rows)
            .map(|i| {
                (0..cols)
                    .map(|j| Cell::Var(self.var(format!("{name}[{i},{j}]"))))
                    .collect()
            })
            .collect()
    }

    fn put(&mut self, matrix: usize, block: usize, row: usize, col: usize, value: f64) {
        if value != 0.0 {
            *self.entries.entry((matrix, block, row, col)).or_insert(0.0) += value;
        }
    }

    /// Symmetric LMI block given its upper triangle as expressions.
    fn lmi(&mut self, size: usize, cell: impl Fn(usize, usize) -> Expr) {
        self.blocks.push(size as i64);
        let block = self.blocks.len();
        for i in 0..size {
            for j in i..size {
                for (v, c) in cell(i, j) {
                    match v {
                        Some(v) => self.put(v, block, i + 1, j + 1, c),
                        None => self.put(0, block, i + 1, j + 1, -c),
                    }
                }
            }
        }
    }

    fn equality(&mut self, e: Expr) {
        let neg = e.iter().map(|(&k, &v)| (k, -v)).collect();
        self.lp_rows.push(e);
        self.lp_rows.push(neg);
    }

    fn finish(mut self, objective_constant: f64) -> SdpProblem {
        let rows = std::mem::take(&mut self.lp_rows);
        self.blocks.push(-(rows.len() as i64));
        let block = self.blocks.len();
        for (r, e) in rows.into_iter().enumerate() {
            for (v, c) in e {
                match v {
                    Some(v) => self.put(v, block, r + 1, r + 1, c),
                    None => self.put(0, block, r + 1, r + 1, -c),
                }
            }
        }
        let entries = self
            .entries
            .into_iter()
            .filter(|(_, v)| *v != 0.0)
            .map(|((matrix, block, row, col), value)| SdpEntry {
                matrix,
                block,
                row,
                col,
                value,
            })
            .collect();
        SdpProblem {
            names: self.names,
            objective: self.objective,
            objective_constant,
            blocks: self.blocks,
            entries,
        }
    }
}

/// Builds the conic program for `problem`.
pub fn export_sdp(problem: &SteeringProblem, opts: &ExportOptions) -> Result<SdpProblem> {
    let (n, m, horizon) = (problem.state_dim(), problem.input_dim(), problem.horizon);
    let (a, b) = (&problem.a, &problem.b);
    let half_lambda = 0.5 * problem.lambda;
    let mut bld = Builder {
        names: Vec::new(),
        objective: Vec::new(),
        blocks: Vec::new(),
        entries: BTreeMap::new(),
        lp_rows: Vec::new(),
    };

    let mut sigma = const_grid(problem.source.cov());
    let mut mu: Vec<Cell> = problem.source.mean().iter().map(|&c| Cell::Const(c)).collect();
    for k in 0..horizon {
        let u = bld.full(&format!("U_{k}"), m, n);
        let y = bld.sym(&format!("Y_{k}"), m);
        let v: Vec<usize> = (0..m).map(|i| bld.var(format!("v_{k}[{i}]"))).collect();
        let w = bld.var(format!("w_{k}"));
        for i in 0..m {
            if let Cell::Var(id) = y[i][i] {
                bld.objective[id - 1] += 1.0;
            }
        }
        bld.objective[w - 1] += 1.0;

        // [[Y, U], [Uᵀ, Σ]] ⪰ 0
        let (yc, uc, sc) = (y.clone(), u.clone(), sigma.clone());
        bld.lmi(m + n, move |i, j| {
            let mut e = Expr::new();
            let cell = match (i < m, j < m) {
                (true, true) => &yc[i][j],
                (true, false) => &uc[i][j - m],
                (false, false) => &sc[i - m][j - m],
                (false, true) => unreachable!("upper triangle only"),
            };
            cell.add_to(&mut e, 1.0);
            e
        });
        // [[I, v], [vᵀ, w]] ⪰ 0
        let vc = v.clone();
        bld.lmi(m + 1, move |i, j| match (i < m, j < m) {
            (true, true) => constant(if i == j { 1.0 } else { 0.0 }),
            (true, false) => var(vc[i]),
            _ => var(w),
        });

        let next_sigma = bld.sym(&format!("Sigma_{}", k + 1), n);
        let next_mu: Vec<Cell> = (0..n)
            .map(|i| Cell::Var(bld.var(format!("mu_{}[{i}]", k + 1))))
            .collect();
        for i in 0..n {
            let mut e = Expr::new();
            next_mu[i].add_to(&mut e, 1.0);
            for p in 0..n {
                mu[p].add_to(&mut e, -a.get(i, p));
            }
            for p in 0..m {
                add_term(&mut e, Some(v[p]), -b.get(i, p));
            }
            bld.equality(e);
        }
        // Σ⁺ = AΣAᵀ + BUAᵀ + AUᵀBᵀ + BYBᵀ
        for i in 0..n {
            for j in i..n {
                let mut e = Expr::new();
                next_sigma[i][j].add_to(&mut e, 1.0);
                for p in 0..n {
                    for q in 0..n {
                        sigma[p][q].add_to(&mut e, -a.get(i, p) * a.get(j, q));
                    }
                }
                for p in 0..m {
                    for q in 0..n {
                        let c = b.get(i, p) * a.get(j, q) + a.get(i, q) * b.get(j, p);
                        u[p][q].add_to(&mut e, -c);
                    }
                    for q in 0..m {
                        y[p][q].add_to(&mut e, -b.get(i, p) * b.get(j, q));
                    }
                }
                bld.equality(e);
            }
        }
        sigma = next_sigma;
        mu = next_mu;
    }

    // λ/2 [tr(Σ_f⁻¹ Σ_N) + q − Σ t_i] + λ/2 (log det Σ_f − n)
    let prec = problem.target.cov().inverse()?.symmetrize();
    for i in 0..n {
        for j in 0..n {
            if let Cell::Var(id) = sigma[i][j] {
                bld.objective[id - 1] += half_lambda * prec.get(i, j);
            }
        }
    }
    let q = bld.var("q".into());
    bld.objective[q - 1] += half_lambda;
    let target_cov = problem.target.cov().clone();
    let target_mean = problem.target.mean().to_vec();
    let mu_n = mu.clone();
    bld.lmi(n + 1, move |i, j| {
        if j < n {
            constant(target_cov.get(i, j))
        } else if i < n {
            let mut e = Expr::new();
            mu_n[i].add_to(&mut e, 1.0);
            add_term(&mut e, None, -target_mean[i]);
            e
        } else {
            var(q)
        }
    });

    let mut z = vec![vec![None; n]; n];
    for i in 0..n {
        for j in 0..=i {
            z[i][j] = Some(bld.var(format!("Z[{i},{j}]")));
        }
    }
    let t: Vec<usize> = (0..n).map(|i| bld.var(format!("t[{i}]"))).collect();
    for &ti in &t {
        bld.objective[ti - 1] -= half_lambda;
    }
    let (zc, sc) = (z.clone(), sigma.clone());
    bld.lmi(2 * n, move |i, j| {
        let mut e = Expr::new();
        if j < n {
            sc[i][j].add_to(&mut e, 1.0);
        } else if i < n {
            if let Some(id) = zc[i][j - n] {
                add_term(&mut e, Some(id), 1.0);
            }
        } else if i == j {
            add_term(&mut e, zc[i - n][i - n], 1.0);
        }
        e
    });
    for i in 0..n {
        let zi = z[i][i].expect("diagonal of Z");
        for z0 in opts.tangent_points() {
            let mut e = constant(z0.ln() - 1.0);
            add_term(&mut e, Some(zi), 1.0 / z0);
            add_term(&mut e, Some(t[i]), -1.0);
            bld.lp_rows.push(e);
        }
    }

    let offset = half_lambda * (problem.target.log_det_cov() - n as f64);
    Ok(bld.finish(offset))
}

impl SdpProblem {
    pub fn num_vars(&self) -> usize {
        self.objective.len()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        self.objective_constant + self.objective.iter().zip(x).map(|(c, v)| c * v).sum::<f64>()
    }

    /// `Σ F_i x_i − F_0` for every block, as dense symmetric matrices
    /// (LP blocks as diagonal matrices).
    pub fn slack(&self, x: &[f64]) -> Result<Vec<Tensor<f64>>> {
        if x.len() != self.num_vars() {
            return Err(Error::dim(format!(
                "sdp point has {} entries, expected {}",
                x.len(),
                self.num_vars()
            )));
        }
        let mut out: Vec<Tensor<f64>> = self
            .blocks
            .iter()
            .map(|&s| {
                let s = s.unsigned_abs() as usize;
                Tensor::zeros(s, s)
            })
            .collect();
        for e in &self.entries {
            let coef = if e.matrix == 0 { -1.0 } else { x[e.matrix - 1] };
            let blk = &mut out[e.block - 1];
            let (r, c) = (e.row - 1, e.col - 1);
            blk.set(r, c, blk.get(r, c) + coef * e.value);
            if r != c {
                blk.set(c, r, blk.get(c, r) + coef * e.value);
            }
        }
        Ok(out)
    }

    /// Smallest eigenvalue over all blocks at `x`; non-negative means feasible.
    pub fn min_eigenvalue(&self, x: &[f64]) -> Result<f64> {
        let mut lo = f64::INFINITY;
        for blk in self.slack(x)? {
            let (vals, _) = blk.sym_eigen()?;
            lo = lo.min(vals[0]);
        }
        Ok(lo)
    }

    /// The feasible point induced by an affine policy, with every slack tight.
    pub fn point_from_policy(
        &self,
        problem: &SteeringProblem,
        policy: &AffinePolicy,
    ) -> Result<Vec<f64>> {
        let traj = problem.propagate(policy)?;
        let n = problem.state_dim();
        let lookup: BTreeMap<&str, usize> = self
            .names
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let mut x = vec![0.0; self.num_vars()];
        let mut set = |name: String, value: f64| -> Result<()> {
            let i = lookup
                .get(name.as_str())
                .ok_or_else(|| Error::contract(format!("sdp has no variable {name}")))?;
            x[*i] = value;
            Ok(())
        };
        for k in 0..problem.horizon {
            let sigma = &traj.covs[k];
            let u = policy.gains[k].matmul(sigma);
            let y = u.matmul(&sigma.inverse()?).matmul_t(false, &u, true).symmetrize();
            for i in 0..u.rows() {
                for j in 0..u.cols() {
                    set(format!("U_{k}[{i},{j}]"), u.get(i, j))?;
                }
                for j in i..y.cols() {
                    set(format!("Y_{k}[{i},{j}]"), y.get(i, j))?;
                }
                set(format!("v_{k}[{i}]"), policy.feedforward[k][i])?;
            }
            set(
                format!("w_{k}"),
                policy.feedforward[k].iter().map(|v| v * v).sum(),
            )?;
            for i in 0..n {
                set(format!("mu_{}[{i}]", k + 1), traj.means[k + 1][i])?;
                for j in i..n {
                    set(format!("Sigma_{}[{i},{j}]", k + 1), traj.covs[k + 1].get(i, j))?;
                }
            }
        }
        let terminal = &traj.covs[problem.horizon];
        let d: Vec<f64> = (0..n)
            .map(|i| traj.means[problem.horizon][i] - problem.target.mean()[i])
            .collect();
        let prec = problem.target.cov().inverse()?;
        let mut q = 0.0;
        for i in 0..n {
            for j in 0..n {
                q += d[i] * prec.get(i, j) * d[j];
            }
        }
        set("q".into(), q)?;
        // Z = L·diag(L) makes the log-det block singular and Σ log Z_ii = log det Σ_N.
        let l = terminal.cholesky()?;
        for i in 0..n {
            for j in 0..=i {
                set(format!("Z[{i},{j}]"), l.get(i, j) * l.get(j, j))?;
            }
            set(format!("t[{i}]"), 2.0 * l.get(i, i).ln())?;
        }
        Ok(x)
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        let mut s = String::new();
        writeln!(s, "* KL-soft-constrained covariance steering").ok();
        writeln!(s, "* objective_constant {:e}", self.objective_constant).ok();
        for (i, name) in self.names.iter().enumerate() {
            writeln!(s, "* var {} {}", i + 1, name).ok();
        }
        writeln!(s, "{} = mDIM", self.num_vars()).ok();
        writeln!(s, "{} = nBLOCK", self.blocks.len()).ok();
        let blocks: Vec<String> = self.blocks.iter().map(|b| b.to_string()).collect();
        writeln!(s, "{} = bLOCKsTRUCT", blocks.join(" ")).ok();
        let c: Vec<String> = self.objective.iter().map(|v| format!("{v:e}")).collect();
        writeln!(s, "{}", c.join(" ")).ok();
        for e in &self.entries {
            writeln!(s, "{} {} {} {} {:e}", e.matrix, e.block, e.row, e.col, e.value).ok();
        }
        w.write_all(s.as_bytes())?;
        Ok(())
    }

    pub fn to_sdpa_string(&self) -> String {
        let mut buf = Vec::new();
        self.write(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii output")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Parse(format!("sdpa: {what}"));
        let mut objective_constant = 0.0;
        let mut names = Vec::new();
        let mut body = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('*').or_else(|| line.strip_prefix('"')) {
                let mut parts = rest.split_whitespace();
                match parts.next() {
                    Some("objective_constant") => {
                        objective_constant = parts
                            .next()
                            .and_then(|v| v.parse().ok())
                            .ok_or_else(|| bad("objective_constant"))?;
                    }
                    Some("var") => {
                        parts.next();
                        names.push(parts.collect::<Vec<_>>().join(" "));
                    }
                    _ => {}
                }
                continue;
            }
            body.push(line);
        }
        let mut lines = body.into_iter();
        let first_number = |line: Option<&str>, what: &str| -> Result<usize> {
            line.and_then(|l| l.split_whitespace().next())
                .and_then(|t| t.parse().ok())
                .ok_or_else(|| bad(what))
        };
        let mdim = first_number(lines.next(), "mDIM")?;
        let nblock = first_number(lines.next(), "nBLOCK")?;
        let clean = |l: &str| l.replace(['{', '}', '(', ')', ','], " ");
        let block_line = clean(lines.next().ok_or_else(|| bad("bLOCKsTRUCT"))?);
        let blocks: Vec<i64> = block_line
            .split_whitespace()
            .take(nblock)
            .map(|t| t.parse().map_err(|_| bad("block size")))
            .collect::<Result<_>>()?;
        if blocks.len() != nblock {
            return Err(bad("block count"));
        }
        let mut objective = Vec::with_capacity(mdim);
        while objective.len() < mdim {
            let l = clean(lines.next().ok_or_else(|| bad("objective"))?);
            for t in l.split_whitespace() {
                objective.push(t.parse().map_err(|_| bad("objective value"))?);
            }
        }
        let mut entries = Vec::new();
        for l in lines {
            let t: Vec<&str> = l.split_whitespace().collect();
            if t.len() != 5 {
                return Err(bad(&format!("entry line `{l}`")));
            }
            let idx = |s: &str| s.parse::<usize>().map_err(|_| bad("entry index"));
            entries.push(SdpEntry {
                matrix: idx(t[0])?,
                block: idx(t[1])?,
                row: idx(t[2])?,
                col: idx(t[3])?,
                value: t[4].parse().map_err(|_| bad("entry value"))?,
            });
        }
        if names.len() != mdim {
            names = (1..=mdim).map(|i| format!("x{i}")).collect();
        }
        Ok(Self {
            names,
            objective,
            objective_constant,
            blocks,
            entries,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::covsteer::{optimize_affine, OptimizeOptions};
    use crate::distributions::GaussianSpec;

    fn scalar() -> SteeringProblem {
        SteeringProblem::new(
            Tensor::identity(1),
            Tensor::identity(1),
            GaussianSpec::standard(1),
            GaussianSpec::new(vec![1.0], Tensor::scalar(0.5)).unwrap(),
            2.0,
            1,
        )
        .unwrap()
    }

    #[test]
    fn scalar_census() {
        let opts = ExportOptions {
            cuts_per_octave: 1,
            octaves: 2,
        };
        let sdp = export_sdp(&scalar(), &opts).unwrap();
        // U, Y, v, w, Σ_1, μ_1, q, Z, t
        assert_eq!(sdp.num_vars(), 9);
        // Schur, effort, mean, log-det, then 2 equalities x 2 rows + 5 cuts
        assert_eq!(sdp.blocks, vec![2, 2, 2, 2, -9]);
    }

    #[test]
    fn round_trip() {
        let sdp = export_sdp(&scalar(), &ExportOptions::default()).unwrap();
        let text = sdp.to_sdpa_string();
        assert_eq!(SdpProblem::parse(&text).unwrap(), sdp);
    }

    #[test]
    fn optimal_affine_policy_is_feasible_with_matching_cost() {
        let a = Tensor::from_rows(&[vec![1.0, 0.1], vec![0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![0.0], vec![0.1]]).unwrap();
        let target = GaussianSpec::new(vec![1.0, 0.0], Tensor::diag(&[0.5, 0.3])).unwrap();
        let problem =
            SteeringProblem::new(a, b, GaussianSpec::standard(2), target, 5.0, 4).unwrap();
        let bench = optimize_affine(&problem, &OptimizeOptions::default()).unwrap();
        let sdp = export_sdp(&problem, &ExportOptions::default()).unwrap();
        let x = sdp.point_from_policy(&problem, &bench.policy).unwrap();
        assert!(sdp.min_eigenvalue(&x).unwrap() > -1e-9);
        let value = sdp.value(&x);
        assert!(
            (value - bench.cost.total).abs() < 1e-9 * bench.cost.total.abs().max(1.0),
            "{value} vs {}",
            bench.cost.total
        );
    }
}
