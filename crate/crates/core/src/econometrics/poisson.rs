//! Poisson pseudo-maximum likelihood with fixed effects.
//!
//! One fixed effect can be absorbed: its level intercepts are profiled out in
//! closed form (`exp(a_h) = sum(y) / sum(exp(x b))` within level `h`), and
//! Newton steps are taken on the remaining coefficients with the Hessian of
//! the profiled likelihood. Other fixed effects enter as explicit dummy
//! columns with the lowest level as reference. Without an absorbed effect
//! the profiled intercept is the model intercept.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_ITER: usize = 100;
pub const DEFAULT_TOLERANCE: f64 = 1e-8;

/// Columns of equal length, addressed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    len: usize,
    columns: BTreeMap<String, Vec<f64>>,
}

impl Table {
    pub fn new(len: usize) -> Self {
        Self {
            len,
            columns: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn insert(&mut self, name: impl Into<String>, values: Vec<f64>) -> Result<()> {
        let name = name.into();
        if values.len() != self.len {
            return Err(Error::input(format!("column `{name}` has {} rows, table has {}", values.len(), self.len)));
        }
        self.columns.insert(name, values);
        Ok(())
    }

    pub fn with(mut self, name: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        self.insert(name, values)?;
        Ok(self)
    }

    pub fn column(&self, name: &str) -> Result<&[f64]> {
        self.columns
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::input(format!("unknown column `{name}`")))
    }

    pub fn column_names(&self) -> impl Iterator<Item = &str> {
        self.columns.keys().map(String::as_str)
    }

    /// Rows where `keep` is true.
    pub fn filter(&self, keep: &[bool]) -> Table {
        let columns = self
            .columns
            .iter()
            .map(|(k, v)| (k.clone(), v.iter().zip(keep).filter(|(_, &k)| k).map(|(x, _)| *x).collect()))
            .collect();
        Table {
            len: keep.iter().filter(|&&k| k).count(),
            columns,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionSpec {
    pub outcome: String,
    pub regressors: Vec<String>,
    /// Fixed effect profiled out of the likelihood.
    pub absorb: Option<String>,
    /// Fixed effects entered as dummy columns.
    pub fixed_effects: Vec<String>,
    /// Cluster key for standard errors; each observation is its own cluster if absent.
    pub cluster: Option<String>,
    pub max_iter: usize,
    /// Bound on the relative change in deviance at convergence.
    pub tolerance: f64,
}

impl RegressionSpec {
    pub fn new(outcome: impl Into<String>, regressors: &[&str]) -> Self {
        Self {
            outcome: outcome.into(),
            regressors: regressors.iter().map(|s| s.to_string()).collect(),
            absorb: None,
            fixed_effects: Vec::new(),
            cluster: None,
            max_iter: DEFAULT_MAX_ITER,
            tolerance: DEFAULT_TOLERANCE,
        }
    }

    pub fn absorb(mut self, key: &str) -> Self {
        self.absorb = Some(key.to_string());
        self
    }

    pub fn fixed_effects(mut self, keys: &[&str]) -> Self {
        self.fixed_effects = keys.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn cluster(mut self, key: &str) -> Self {
        self.cluster = Some(key.to_string());
        self
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub z: f64,
    /// Multiplicative effect `exp(estimate) - 1`.
    pub effect: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitResult {
    /// Non-fixed-effect regressors, in specification order.
    pub coefficients: Vec<Coefficient>,
    /// Present when no fixed effect is absorbed.
    pub intercept: Option<f64>,
    pub deviance: f64,
    pub deviance_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub observations: usize,
    pub dropped_observations: usize,
    pub clusters: usize,
    pub dropped_columns: Vec<String>,
    pub warnings: Vec<String>,
}

impl FitResult {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }

    pub fn estimate(&self, name: &str) -> Result<f64> {
        self.coefficient(name)
            .map(|c| c.estimate)
            .ok_or_else(|| Error::input(format!("no coefficient named `{name}`")))
    }
}

fn level_key(x: f64) -> u64 {
    // -0.0 and 0.0 are the same level.
    (x + 0.0).to_bits()
}

/// Sparse design with observations sorted by absorbed level.
struct Design {
    y: Vec<f64>,
    /// Start offset of each absorbed level; `groups.last() == n`.
    groups: Vec<usize>,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<f64>,
    clusters: Vec<usize>,
    n_clusters: usize,
    k: usize,
}

impl Design {
    fn n(&self) -> usize {
        self.y.len()
    }

    fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (cols, vals) = self.row_slices(i);
        cols.iter().copied().zip(vals.iter().copied())
    }

    fn row_slices(&self, i: usize) -> (&[usize], &[f64]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.cols[r.clone()], &self.vals[r])
    }

    fn linear_predictor(&self, b: &[f64]) -> Vec<f64> {
        (0..self.n()).map(|i| self.row(i).map(|(c, v)| v * b[c]).sum()).collect()
    }

    /// Profiled fitted means and the absorbed intercepts.
    fn profile(&self, b: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let eta = self.linear_predictor(b);
        let mut mu = vec![0.0; self.n()];
        let mut alpha = Vec::with_capacity(self.groups.len() - 1);
        for w in self.groups.windows(2) {
            let (s, e) = (w[0], w[1]);
            let top = eta[s..e].iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = eta[s..e].iter().map(|x| (x - top).exp()).sum();
            let sy: f64 = self.y[s..e].iter().sum();
            let a = sy.ln() - top - denom.ln();
            for i in s..e {
                mu[i] = (a + eta[i]).exp();
            }
            alpha.push(a);
        }
        (mu, alpha)
    }

    fn deviance(&self, mu: &[f64]) -> f64 {
        2.0 * self
            .y
            .iter()
            .zip(mu)
            .map(|(&y, &m)| if y > 0.0 { y * (y / m).ln() - (y - m) } else { m })
            .sum::<f64>()
    }

    /// Within-level weighted cross products `sum w x x' - sum_h v_h v_h' / W_h`.
    fn within_gram(&self, w: &[f64]) -> DMatrix<f64> {
        let k = self.k;
        let mut h = DMatrix::zeros(k, k);
        let mut v = vec![0.0; k];
        let mut seen = vec![false; k];
        let mut touched = Vec::with_capacity(k);
        for g in self.groups.windows(2) {
            let mut total = 0.0;
            for i in g[0]..g[1] {
                total += w[i];
                let (cols, vals) = self.row_slices(i);
                for (&a, &xa) in cols.iter().zip(vals) {
                    v[a] += w[i] * xa;
                    if !seen[a] {
                        seen[a] = true;
                        touched.push(a);
                    }
                    for (&c, &xc) in cols.iter().zip(vals) {
                        h[(a, c)] += w[i] * xa * xc;
                    }
                }
            }
            for &a in &touched {
                for &c in &touched {
                    h[(a, c)] -= v[a] * v[c] / total;
                }
            }
            for &a in &touched {
                v[a] = 0.0;
                seen[a] = false;
            }
            touched.clear();
        }
        h
    }

    fn score(&self, mu: &[f64]) -> DVector<f64> {
        let mut g = DVector::zeros(self.k);
        for i in 0..self.n() {
            let r = self.y[i] - mu[i];
            for (c, x) in self.row(i) {
                g[c] += x * r;
            }
        }
        g
    }

    /// Cluster-robust covariance `G/(G-1) H^-1 (sum_c s_c s_c') H^-1`.
    fn sandwich(&self, mu: &[f64], bread: &DMatrix<f64>) -> DMatrix<f64> {
        let k = self.k;
        let mut scores = DMatrix::zeros(self.n_clusters, k);
        let mut xbar = vec![0.0; k];
        for g in self.groups.windows(2) {
            let total: f64 = mu[g[0]..g[1]].iter().sum();
            xbar.iter_mut().for_each(|x| *x = 0.0);
            for i in g[0]..g[1] {
                for (c, x) in self.row(i) {
                    xbar[c] += mu[i] * x / total;
                }
            }
            for i in g[0]..g[1] {
                let r = self.y[i] - mu[i];
                let cl = self.clusters[i];
                for c in 0..k {
                    scores[(cl, c)] -= xbar[c] * r;
                }
                for (c, x) in self.row(i) {
                    scores[(cl, c)] += x * r;
                }
            }
        }
        let meat = scores.transpose() * &scores;
        let g = self.n_clusters as f64;
        let scale = if g > 1.0 { g / (g - 1.0) } else { 1.0 };
        bread * meat * bread * scale
    }
}

fn index_levels(keys: &[u64]) -> (Vec<usize>, usize) {
    let mut map = BTreeMap::new();
    for &k in keys {
        let next = map.len();
        map.entry(k).or_insert(next);
    }
    (keys.iter().map(|k| map[k]).collect(), map.len())
}

/// Drops observations in fixed-effect levels whose outcomes are all zero,
/// repeating until every remaining level has a positive total.
fn drop_separated(y: &[f64], keys: &[(String, Vec<u64>)], keep: &mut [bool], warnings: &mut Vec<String>) {
    loop {
        let mut changed = false;
        for (name, key) in keys {
            let mut totals: BTreeMap<u64, f64> = BTreeMap::new();
            for i in (0..y.len()).filter(|&i| keep[i]) {
                *totals.entry(key[i]).or_default() += y[i];
            }
            let empty: BTreeSet<u64> = totals.iter().filter(|(_, &t)| t <= 0.0).map(|(k, _)| *k).collect();
            if empty.is_empty() {
                continue;
            }
            let mut dropped = 0;
            for i in 0..y.len() {
                if keep[i] && empty.contains(&key[i]) {
                    keep[i] = false;
                    dropped += 1;
                }
            }
            warnings.push(format!(
                "dropped {dropped} observations in {} `{name}` level(s) with all-zero outcomes",
                empty.len()
            ));
            changed = true;
        }
        if !changed {
            return;
        }
    }
}

/// Columns (in `order`) that are linear combinations of earlier ones after
/// removing absorbed level means.
fn collinear_columns(gram: &DMatrix<f64>, raw: &[f64], order: &[usize]) -> Vec<usize> {
    let mut accepted: Vec<usize> = Vec::new();
    let mut chol: Vec<Vec<f64>> = Vec::new(); // rows of the lower factor
    let mut rejected = Vec::new();
    for &j in order {
        let mut l = vec![0.0; accepted.len()];
        for (r, &a) in accepted.iter().enumerate() {
            let mut s = gram[(a, j)];
            for c in 0..r {
                s -= chol[r][c] * l[c];
            }
            l[r] = s / chol[r][r];
        }
        let resid = gram[(j, j)] - l.iter().map(|x| x * x).sum::<f64>();
        if resid <= 1e-9 * raw[j].max(f64::MIN_POSITIVE) {
            rejected.push(j);
        } else {
            l.push(resid.sqrt());
            chol.push(l);
            accepted.push(j);
        }
    }
    rejected
}

/// Fits a Poisson regression of `spec.outcome` on the regressors and fixed
/// effects.
pub fn poisson_fit(table: &Table, spec: &RegressionSpec) -> Result<FitResult> {
    let n = table.len();
    let y_all = table.column(&spec.outcome)?;
    if let Some(bad) = y_all.iter().find(|y| !(y.is_finite() && **y >= 0.0)) {
        return Err(Error::domain(format!("Poisson outcome must be finite and non-negative, found {bad}")));
    }
    let key_column = |name: &str| -> Result<Vec<u64>> { Ok(table.column(name)?.iter().map(|&x| level_key(x)).collect()) };
    let absorb = match &spec.absorb {
        Some(name) => key_column(name)?,
        None => vec![0; n],
    };
    let mut fe_keys = Vec::new();
    for name in &spec.fixed_effects {
        fe_keys.push((name.clone(), key_column(name)?));
    }
    let cluster = match &spec.cluster {
        Some(name) => key_column(name)?,
        None => (0..n as u64).collect(),
    };
    let regressors: Vec<&[f64]> = spec.regressors.iter().map(|r| table.column(r)).collect::<Result<_>>()?;

    let mut warnings = Vec::new();
    let mut keep = vec![true; n];
    let mut sep_keys = fe_keys.clone();
    sep_keys.insert(0, (spec.absorb.clone().unwrap_or_else(|| "(intercept)".into()), absorb.clone()));
    drop_separated(y_all, &sep_keys, &mut keep, &mut warnings);
    let rows: Vec<usize> = (0..n).filter(|&i| keep[i]).collect();
    if rows.is_empty() {
        return Err(Error::input("no observations left after dropping all-zero fixed-effect levels"));
    }

    // Columns: regressors, then one dummy per non-reference fixed-effect level.
    let mut names: Vec<String> = spec.regressors.clone();
    let mut dummy_of: Vec<BTreeMap<u64, usize>> = Vec::new();
    for (name, key) in &fe_keys {
        let levels: BTreeSet<u64> = rows.iter().map(|&i| key[i]).collect();
        let mut map = BTreeMap::new();
        for &lv in levels.iter().skip(1) {
            map.insert(lv, names.len());
            names.push(format!("{name}={}", f64::from_bits(lv)));
        }
        dummy_of.push(map);
    }
    let p = spec.regressors.len();

    let mut sorted = rows.clone();
    sorted.sort_by_key(|&i| absorb[i]);
    let build = |columns: &[usize]| -> Design {
        let position: BTreeMap<usize, usize> = columns.iter().enumerate().map(|(new, &old)| (old, new)).collect();
        let mut d = Design {
            y: Vec::with_capacity(sorted.len()),
            groups: vec![0],
            row_ptr: vec![0],
            cols: Vec::new(),
            vals: Vec::new(),
            clusters: Vec::new(),
            n_clusters: 0,
            k: columns.len(),
        };
        let (cl_idx, n_cl) = index_levels(&sorted.iter().map(|&i| cluster[i]).collect::<Vec<_>>());
        d.clusters = cl_idx;
        d.n_clusters = n_cl;
        for (pos, &i) in sorted.iter().enumerate() {
            if pos > 0 && absorb[i] != absorb[sorted[pos - 1]] {
                d.groups.push(pos);
            }
            d.y.push(y_all[i]);
            for (r, col) in regressors.iter().enumerate() {
                if let Some(&c) = position.get(&r) {
                    if col[i] != 0.0 {
                        d.cols.push(c);
                        d.vals.push(col[i]);
                    }
                }
            }
            for (f, (_, key)) in fe_keys.iter().enumerate() {
                if let Some(&old) = dummy_of[f].get(&key[i]) {
                    if let Some(&c) = position.get(&old) {
                        d.cols.push(c);
                        d.vals.push(1.0);
                    }
                }
            }
            d.row_ptr.push(d.cols.len());
        }
        d.groups.push(sorted.len());
        d
    };

    // Identification: fixed-effect dummies first (collinear ones are dropped),
    // then regressors (collinearity is an error).
    let full = build(&(0..names.len()).collect::<Vec<_>>());
    let ones = vec![1.0; full.n()];
    let gram = full.within_gram(&ones);
    let mut raw = vec![0.0; names.len()];
    for i in 0..full.n() {
        for (c, x) in full.row(i) {
            raw[c] += x * x;
        }
    }
    let order: Vec<usize> = (p..names.len()).chain(0..p).collect();
    let rejected = collinear_columns(&gram, &raw, &order);
    if let Some(&r) = rejected.iter().find(|&&r| r < p) {
        return Err(Error::RankDeficient { column: names[r].clone() });
    }
    let dropped_columns: Vec<String> = rejected.iter().map(|&r| names[r].clone()).collect();
    if !dropped_columns.is_empty() {
        warnings.push(format!("dropped {} collinear fixed-effect column(s)", dropped_columns.len()));
    }
    let columns: Vec<usize> = (0..names.len()).filter(|c| !rejected.contains(c)).collect();
    let design = if rejected.is_empty() { full } else { build(&columns) };

    // Newton iterations on the profiled likelihood.
    let k = design.k;
    let mut b = vec![0.0; k];
    let (mut mu, _) = design.profile(&b);
    let mut dev = design.deviance(&mu);
    let mut trace = vec![dev];
    let mut converged = k == 0;
    let mut iterations = 0;
    while !converged {
        if iterations == spec.max_iter {
            return Err(Error::NonConvergence { iterations, trace });
        }
        iterations += 1;
        let hess = design.within_gram(&mu);
        let grad = design.score(&mu);
        let step = hess
            .cholesky()
            .ok_or_else(|| Error::RankDeficient {
                column: "(weighted design is not positive definite)".into(),
            })?
            .solve(&grad);
        let mut scale = 1.0;
        let (new_b, new_mu, new_dev) = loop {
            let cand: Vec<f64> = b.iter().zip(step.iter()).map(|(x, s)| x + scale * s).collect();
            let (m, _) = design.profile(&cand);
            let d = design.deviance(&m);
            if d.is_finite() && (d <= dev * (1.0 + 1e-12) || scale < 1e-10) {
                break (cand, m, d);
            }
            scale *= 0.5;
        };
        let rel = (dev - new_dev).abs() / (new_dev.abs() + 0.1);
        let max_step = step.iter().map(|s| (scale * s).abs()).fold(0.0, f64::max);
        let size = new_b.iter().map(|x| x.abs()).fold(1.0, f64::max);
        b = new_b;
        mu = new_mu;
        dev = new_dev;
        trace.push(dev);
        converged = rel < spec.tolerance && max_step < spec.tolerance.sqrt() * 1e-3 * size;
    }

    let hess = design.within_gram(&mu);
    let bread = hess.clone().try_inverse().ok_or_else(|| Error::RankDeficient {
        column: "(weighted design is not positive definite)".into(),
    })?;
    let cov = design.sandwich(&mu, &bread);
    let (_, alpha) = design.profile(&b);
    let coefficients = (0..p)
        .map(|r| {
            let c = columns.iter().position(|&x| x == r).expect("regressors are never dropped");
            let se = cov[(c, c)].max(0.0).sqrt();
            Coefficient {
                name: names[r].clone(),
                estimate: b[c],
                se,
                z: b[c] / se,
                effect: b[c].exp_m1(),
            }
        })
        .collect();
    Ok(FitResult {
        coefficients,
        intercept: spec.absorb.is_none().then(|| alpha[0]),
        deviance: dev,
        deviance_trace: trace,
        iterations,
        converged,
        observations: design.n(),
        dropped_observations: n - design.n(),
        clusters: design.n_clusters,
        dropped_columns,
        warnings,
    })
}
