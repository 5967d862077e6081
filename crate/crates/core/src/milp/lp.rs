//! CPLEX-LP export of the placement model and a parser for the same dialect.
//!
//! Variables: `p_m_j` (table `j` on GPU `m`), `x_i_j` (table `j` takes step
//! `i`), `mem_j` (HBM bytes of table `j`), `pct_j` (HBM share of its lookups),
//! `c_m` (cost of GPU `m`) and `C` (the objective). Under
//! [`super::Aggregation::Max`] each table also gets `ct_j`.
//!
//! The per-GPU capacity and cost rows multiply a binary by a continuous
//! variable. [`LpFormat::Bilinear`] writes those products as CPLEX quadratic
//! terms in brackets; [`LpFormat::Linearized`] replaces each product by an
//! auxiliary variable with the usual big-M envelope so any MILP solver can
//! read the file.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use super::{Aggregation, MilpInstance};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LpFormat {
    #[default]
    Bilinear,
    Linearized,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LpSense {
    Le,
    Ge,
    Eq,
}

impl LpSense {
    fn symbol(self) -> &'static str {
        match self {
            LpSense::Le => "<=",
            LpSense::Ge => ">=",
            LpSense::Eq => "=",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpConstraint {
    pub name: String,
    pub linear: Vec<(String, f64)>,
    /// `(a, b, coef)` for a product term `coef a * b`.
    pub quadratic: Vec<(String, String, f64)>,
    pub sense: LpSense,
    pub rhs: f64,
}

/// A minimization model in the subset of CPLEX-LP this crate writes.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LpModel {
    pub objective: Vec<(String, f64)>,
    pub constraints: Vec<LpConstraint>,
    /// `(name, lower, upper)`; variables not listed lie in `[0, inf)`.
    pub bounds: Vec<(String, f64, f64)>,
    pub binaries: Vec<String>,
}

impl LpModel {
    /// Every variable named anywhere in the model.
    pub fn variables(&self) -> BTreeSet<String> {
        let mut v = BTreeSet::new();
        v.extend(self.objective.iter().map(|(n, _)| n.clone()));
        for c in &self.constraints {
            v.extend(c.linear.iter().map(|(n, _)| n.clone()));
            for (a, b, _) in &c.quadratic {
                v.insert(a.clone());
                v.insert(b.clone());
            }
        }
        v.extend(self.bounds.iter().map(|(n, _, _)| n.clone()));
        v.extend(self.binaries.iter().cloned());
        v
    }

    /// Compares two models term by term, each coefficient to `rel_tol`.
    pub fn compare(&self, other: &LpModel, rel_tol: f64) -> std::result::Result<(), String> {
        let close = |a: f64, b: f64| (a - b).abs() <= rel_tol * a.abs().max(b.abs());
        let lin = |terms: &[(String, f64)]| -> BTreeMap<String, f64> {
            let mut m = BTreeMap::new();
            for (n, c) in terms {
                *m.entry(n.clone()).or_insert(0.0) += c;
            }
            m
        };
        let same_map = |what: &str, a: &BTreeMap<String, f64>, b: &BTreeMap<String, f64>| {
            if a.len() != b.len() || a.keys().ne(b.keys()) {
                return Err(format!("{what}: different variables"));
            }
            for (k, va) in a {
                if !close(*va, b[k]) {
                    return Err(format!("{what}: coefficient of {k} is {va} vs {}", b[k]));
                }
            }
            Ok(())
        };
        same_map("objective", &lin(&self.objective), &lin(&other.objective))?;
        if self.constraints.len() != other.constraints.len() {
            return Err(format!(
                "{} constraints vs {}",
                self.constraints.len(),
                other.constraints.len()
            ));
        }
        let theirs: BTreeMap<&str, &LpConstraint> = other
            .constraints
            .iter()
            .map(|c| (c.name.as_str(), c))
            .collect();
        for a in &self.constraints {
            let b = theirs
                .get(a.name.as_str())
                .ok_or_else(|| format!("constraint {} missing", a.name))?;
            same_map(&a.name, &lin(&a.linear), &lin(&b.linear))?;
            let quad = |c: &LpConstraint| -> BTreeMap<String, f64> {
                let mut m = BTreeMap::new();
                for (x, y, k) in &c.quadratic {
                    let key = if x <= y {
                        format!("{x}*{y}")
                    } else {
                        format!("{y}*{x}")
                    };
                    *m.entry(key).or_insert(0.0) += k;
                }
                m
            };
            same_map(&a.name, &quad(a), &quad(b))?;
            if a.sense != b.sense || !close(a.rhs, b.rhs) {
                return Err(format!("{}: sense or right-hand side differs", a.name));
            }
        }
        let bnd = |m: &LpModel| -> BTreeMap<String, (f64, f64)> {
            m.bounds
                .iter()
                .map(|(n, l, u)| (n.clone(), (*l, *u)))
                .collect()
        };
        let (ba, bb) = (bnd(self), bnd(other));
        if ba.keys().ne(bb.keys())
            || ba
                .iter()
                .any(|(k, a)| !(close(a.0, bb[k].0) && close(a.1, bb[k].1)))
        {
            return Err("bounds differ".into());
        }
        let bin = |m: &LpModel| m.binaries.iter().cloned().collect::<BTreeSet<_>>();
        if bin(self) != bin(other) {
            return Err("binary sets differ".into());
        }
        Ok(())
    }
}

struct Builder {
    model: LpModel,
}

impl Builder {
    fn row(&mut self, name: String, linear: Vec<(String, f64)>, sense: LpSense, rhs: f64) {
        self.quad(name, linear, Vec::new(), sense, rhs);
    }

    fn quad(
        &mut self,
        name: String,
        linear: Vec<(String, f64)>,
        quadratic: Vec<(String, String, f64)>,
        sense: LpSense,
        rhs: f64,
    ) {
        self.model.constraints.push(LpConstraint {
            name,
            linear,
            quadratic,
            sense,
            rhs,
        });
    }

    /// Adds `aux = bin * var` for a binary `bin` and `0 <= var <= ub`.
    fn product(&mut self, aux: &str, bin: &str, var: &str, ub: f64) {
        let s = |v: &str| v.to_string();
        self.row(
            format!("{aux}_a"),
            vec![(s(aux), 1.0), (s(var), -1.0)],
            LpSense::Le,
            0.0,
        );
        self.row(
            format!("{aux}_b"),
            vec![(s(aux), 1.0), (s(bin), -ub)],
            LpSense::Le,
            0.0,
        );
        self.row(
            format!("{aux}_c"),
            vec![(s(aux), 1.0), (s(var), -1.0), (s(bin), -ub)],
            LpSense::Ge,
            -ub,
        );
    }
}

/// Builds the model of `instance` in memory.
pub fn build_lp_model(instance: &MilpInstance, format: LpFormat) -> LpModel {
    let sys = instance.system();
    let (m_count, j_count, s_count) = (
        instance.num_gpus(),
        instance.num_tables(),
        instance.step_count(),
    );
    let mut b = Builder {
        model: LpModel {
            objective: vec![("C".into(), 1.0)],
            ..LpModel::default()
        },
    };
    let p = |m: usize, j: usize| format!("p_{m}_{j}");
    let x = |i: u32, j: usize| format!("x_{i}_{j}");

    for j in 0..j_count {
        b.row(
            format!("assign_{j}"),
            (0..m_count).map(|m| (p(m, j), 1.0)).collect(),
            LpSense::Eq,
            1.0,
        );
        b.row(
            format!("onestep_{j}"),
            (0..=s_count).map(|i| (x(i, j), 1.0)).collect(),
            LpSense::Eq,
            1.0,
        );
        let mut mem = vec![(format!("mem_{j}"), 1.0)];
        mem.extend(
            (0..=s_count)
                .filter(|&i| instance.mem_bytes(j, i) > 0)
                .map(|i| (x(i, j), -(instance.mem_bytes(j, i) as f64))),
        );
        b.row(format!("memdef_{j}"), mem, LpSense::Eq, 0.0);
        let mut pct = vec![(format!("pct_{j}"), 1.0)];
        pct.extend((1..=s_count).map(|i| (x(i, j), -instance.pct(i))));
        b.row(format!("pctdef_{j}"), pct, LpSense::Eq, 0.0);
        b.model.bounds.push((format!("pct_{j}"), 0.0, 1.0));
        if instance.aggregation() == Aggregation::Max {
            let a = instance.batch_bytes(j);
            let ct = format!("ct_{j}");
            b.row(
                format!("cthbm_{j}"),
                vec![(ct.clone(), 1.0), (format!("pct_{j}"), -a / sys.bw_hbm)],
                LpSense::Ge,
                0.0,
            );
            b.row(
                format!("ctuvm_{j}"),
                vec![(ct.clone(), 1.0), (format!("pct_{j}"), a / sys.bw_uvm)],
                LpSense::Ge,
                a / sys.bw_uvm,
            );
            b.model.bounds.push((ct, 0.0, a / sys.bw_uvm));
        }
    }

    let linear = format == LpFormat::Linearized;
    for m in 0..m_count {
        let mut hbm_lin = Vec::new();
        let mut hbm_q = Vec::new();
        let mut uvm_lin = Vec::new();
        let mut uvm_q = Vec::new();
        let mut cost_lin = vec![(format!("c_{m}"), 1.0)];
        let mut cost_q = Vec::new();
        for j in 0..j_count {
            let pm = p(m, j);
            let mem = format!("mem_{j}");
            uvm_lin.push((pm.clone(), instance.emb_bytes(j) as f64));
            let cov = instance.coverage(j);
            let a = instance.batch_bytes(j);
            let (cost_var, cost_coef) = match instance.aggregation() {
                Aggregation::Sum => {
                    let k0 = cov * a / sys.bw_uvm;
                    let k1 = cov * a * (1.0 / sys.bw_uvm - 1.0 / sys.bw_hbm);
                    cost_lin.push((pm.clone(), -k0));
                    (format!("pct_{j}"), k1)
                }
                Aggregation::Max => (format!("ct_{j}"), -cov),
            };
            if linear {
                let z = format!("z_{m}_{j}");
                let y = format!("y_{m}_{j}");
                let ub =
                    (instance.icdf(j, instance.step_count()) * instance.spec(j).row_bytes()) as f64;
                b.product(&z, &pm, &mem, ub);
                let cost_ub = match instance.aggregation() {
                    Aggregation::Sum => 1.0,
                    Aggregation::Max => a / sys.bw_uvm,
                };
                b.product(&y, &pm, &cost_var, cost_ub);
                hbm_lin.push((z.clone(), 1.0));
                uvm_lin.push((z, -1.0));
                cost_lin.push((y, cost_coef));
            } else {
                hbm_q.push((pm.clone(), mem.clone(), 1.0));
                uvm_q.push((pm.clone(), mem, -1.0));
                cost_q.push((pm, cost_var, cost_coef));
            }
        }
        b.quad(
            format!("hbm_{m}"),
            hbm_lin,
            hbm_q,
            LpSense::Le,
            sys.cap_hbm_bytes as f64,
        );
        b.quad(
            format!("uvm_{m}"),
            uvm_lin,
            uvm_q,
            LpSense::Le,
            sys.cap_dram_bytes as f64,
        );
        b.quad(format!("cost_{m}"), cost_lin, cost_q, LpSense::Eq, 0.0);
        b.row(
            format!("max_{m}"),
            vec![("C".into(), 1.0), (format!("c_{m}"), -1.0)],
            LpSense::Ge,
            0.0,
        );
    }
    for j in 0..j_count {
        b.model.binaries.extend((0..m_count).map(|m| p(m, j)));
        b.model.binaries.extend((0..=s_count).map(|i| x(i, j)));
    }
    b.model
}

fn num(v: f64) -> String {
    let a = v.abs();
    if a != 0.0 && !(1e-4..1e15).contains(&a) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

const TERMS_PER_LINE: usize = 6;

fn push_terms(out: &mut String, terms: &[(String, f64)], first: bool) {
    for (k, (name, c)) in terms.iter().enumerate() {
        if k > 0 && k % TERMS_PER_LINE == 0 {
            out.push_str("\n   ");
        }
        let sign = if c.is_sign_negative() { '-' } else { '+' };
        if first && k == 0 && sign == '+' {
            let _ = write!(out, " {} {name}", num(c.abs()));
        } else {
            let _ = write!(out, " {sign} {} {name}", num(c.abs()));
        }
    }
}

/// Renders `model` as CPLEX-LP text.
pub fn render_lp(model: &LpModel, header: &[String]) -> String {
    let mut out = String::new();
    for h in header {
        let _ = writeln!(out, "\\ {h}");
    }
    out.push_str("Minimize\n obj:");
    push_terms(&mut out, &model.objective, true);
    out.push_str("\nSubject To\n");
    for c in &model.constraints {
        let _ = write!(out, " {}:", c.name);
        push_terms(&mut out, &c.linear, true);
        if !c.quadratic.is_empty() {
            if c.linear.is_empty() {
                out.push_str(" [");
            } else {
                out.push_str("\n   + [");
            }
            for (k, (a, b, q)) in c.quadratic.iter().enumerate() {
                if k > 0 && k % TERMS_PER_LINE == 0 {
                    out.push_str("\n   ");
                }
                let sign = if q.is_sign_negative() { '-' } else { '+' };
                if k == 0 && sign == '+' {
                    let _ = write!(out, " {} {a} * {b}", num(q.abs()));
                } else {
                    let _ = write!(out, " {sign} {} {a} * {b}", num(q.abs()));
                }
            }
            out.push_str(" ]");
        }
        let _ = writeln!(out, " {} {}", c.sense.symbol(), num(c.rhs));
    }
    out.push_str("Bounds\n");
    for (n, l, u) in &model.bounds {
        let _ = writeln!(out, " {} <= {n} <= {}", num(*l), num(*u));
    }
    out.push_str("Binaries\n");
    for chunk in model.binaries.chunks(8) {
        let _ = writeln!(out, " {}", chunk.join(" "));
    }
    out.push_str("End\n");
    out
}

/// Writes the model of `instance` to `path`.
pub fn export_lp(
    instance: &MilpInstance,
    path: impl AsRef<Path>,
    format: LpFormat,
    header: &[String],
) -> Result<()> {
    let path = path.as_ref();
    let text = render_lp(&build_lp_model(instance, format), header);
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_lp(path: impl AsRef<Path>) -> Result<LpModel> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_lp(&text).map_err(|(line, msg)| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    })
}

#[derive(Clone, Copy, PartialEq)]
enum Section {
    Objective,
    Constraints,
    Bounds,
    Binaries,
    Done,
}

fn section_of(line: &str) -> Option<Section> {
    match line.to_ascii_lowercase().as_str() {
        "minimize" | "minimise" | "min" => Some(Section::Objective),
        "subject to" | "such that" | "st" | "s.t." => Some(Section::Constraints),
        "bounds" | "bound" => Some(Section::Bounds),
        "binaries" | "binary" | "bin" => Some(Section::Binaries),
        "end" => Some(Section::Done),
        _ => None,
    }
}

type ParseResult<T> = std::result::Result<T, (usize, String)>;

/// Parses CPLEX-LP text as written by [`render_lp`]; errors carry a line number.
pub fn parse_lp(text: &str) -> ParseResult<LpModel> {
    let mut model = LpModel::default();
    let mut section = None;
    // Objective and constraints span lines, so collect their tokens first.
    let mut rows: Vec<(usize, Vec<String>)> = Vec::new();
    let mut objective: Vec<(usize, String)> = Vec::new();
    for (k, raw) in text.lines().enumerate() {
        let ln = k + 1;
        let line = raw.split('\\').next().unwrap().trim();
        if line.is_empty() {
            continue;
        }
        if let Some(s) = section_of(line) {
            if s == Section::Objective && section.is_some() {
                return Err((ln, "objective section appears twice".into()));
            }
            section = Some(s);
            continue;
        }
        let spaced = line
            .replace('[', " [ ")
            .replace(']', " ] ")
            .replace('*', " * ")
            .replace(':', ": ");
        let tokens = spaced.split_whitespace().map(str::to_string);
        match section {
            None => return Err((ln, "content before the objective section".into())),
            Some(Section::Objective) => objective.extend(tokens.map(|t| (ln, t))),
            Some(Section::Constraints) => {
                let tokens: Vec<String> = tokens.collect();
                if tokens.first().is_some_and(|t| t.ends_with(':')) || rows.is_empty() {
                    rows.push((ln, tokens));
                } else {
                    rows.last_mut().unwrap().1.extend(tokens);
                }
            }
            Some(Section::Bounds) => model.bounds.push(parse_bound(ln, line)?),
            Some(Section::Binaries) => model.binaries.extend(tokens),
            Some(Section::Done) => return Err((ln, "content after End".into())),
        }
    }
    if section != Some(Section::Done) {
        return Err((text.lines().count(), "missing End".into()));
    }

    let obj_line = objective.first().map_or(1, |t| t.0);
    let mut obj_tokens: Vec<String> = objective.into_iter().map(|t| t.1).collect();
    if obj_tokens.first().is_some_and(|t| t.ends_with(':')) {
        obj_tokens.remove(0);
    }
    let (linear, quad, rest) = parse_terms(obj_line, &obj_tokens)?;
    if !quad.is_empty() || !rest.is_empty() {
        return Err((obj_line, "objective must be linear".into()));
    }
    model.objective = linear;

    for (ln, tokens) in rows {
        let name = tokens
            .first()
            .and_then(|t| t.strip_suffix(':'))
            .ok_or((ln, "constraint needs a `name:` label".to_string()))?
            .to_string();
        let (linear, quadratic, rest) = parse_terms(ln, &tokens[1..])?;
        let [op, rhs] = &rest[..] else {
            return Err((
                ln,
                format!("constraint {name} needs `<op> <rhs>` at the end"),
            ));
        };
        let sense = match op.as_str() {
            "<=" | "=<" | "<" => LpSense::Le,
            ">=" | "=>" | ">" => LpSense::Ge,
            "=" => LpSense::Eq,
            other => return Err((ln, format!("unknown operator `{other}`"))),
        };
        let rhs = rhs
            .parse::<f64>()
            .map_err(|e| (ln, format!("bad right-hand side: {e}")))?;
        model.constraints.push(LpConstraint {
            name,
            linear,
            quadratic,
            sense,
            rhs,
        });
    }
    Ok(model)
}

type Terms = (Vec<(String, f64)>, Vec<(String, String, f64)>, Vec<String>);

/// Reads `[+|-] [coef] var [* var]` terms up to a comparison operator.
fn parse_terms(ln: usize, tokens: &[String]) -> ParseResult<Terms> {
    let mut linear = Vec::new();
    let mut quad = Vec::new();
    let mut in_bracket = false;
    let mut k = 0;
    while k < tokens.len() {
        let t = tokens[k].as_str();
        match t {
            "<=" | ">=" | "=" | "=<" | "=>" | "<" | ">" => break,
            "[" => {
                in_bracket = true;
                k += 1;
                continue;
            }
            "]" => {
                in_bracket = false;
                k += 1;
                continue;
            }
            _ => {}
        }
        let mut sign = 1.0;
        if t == "+" || t == "-" {
            if t == "-" {
                sign = -1.0;
            }
            k += 1;
        }
        let next = tokens.get(k).ok_or((ln, "dangling sign".to_string()))?;
        if next == "[" {
            if sign < 0.0 {
                return Err((ln, "negated bracket groups are not supported".into()));
            }
            continue;
        }
        let mut coef = sign;
        if let Ok(v) = next.parse::<f64>() {
            coef *= v;
            k += 1;
        }
        let var = tokens
            .get(k)
            .ok_or((ln, "missing variable".to_string()))?
            .clone();
        k += 1;
        if tokens.get(k).is_some_and(|t| t == "*") {
            let other = tokens
                .get(k + 1)
                .ok_or((ln, "missing factor after `*`".to_string()))?;
            if !in_bracket {
                return Err((ln, "product term outside brackets".into()));
            }
            quad.push((var, other.clone(), coef));
            k += 2;
        } else if in_bracket {
            return Err((ln, format!("linear term {var} inside brackets")));
        } else {
            linear.push((var, coef));
        }
    }
    Ok((linear, quad, tokens[k..].to_vec()))
}

fn parse_bound(ln: usize, line: &str) -> ParseResult<(String, f64, f64)> {
    let t: Vec<&str> = line.split_whitespace().collect();
    let f = |s: &str| -> ParseResult<f64> {
        match s.to_ascii_lowercase().as_str() {
            "inf" | "+inf" | "infinity" => Ok(f64::INFINITY),
            "-inf" | "-infinity" => Ok(f64::NEG_INFINITY),
            _ => s.parse().map_err(|e| (ln, format!("bad bound `{s}`: {e}"))),
        }
    };
    match t[..] {
        [lo, "<=", var, "<=", hi] => Ok((var.to_string(), f(lo)?, f(hi)?)),
        [var, "<=", hi] => Ok((var.to_string(), 0.0, f(hi)?)),
        [var, ">=", lo] => Ok((var.to_string(), f(lo)?, f64::INFINITY)),
        [var, "free"] => Ok((var.to_string(), f64::NEG_INFINITY, f64::INFINITY)),
        _ => Err((ln, format!("unsupported bound `{line}`"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::milp::{build_instance, Ablation, SystemSpec};
    use crate::profiler::FeatureStats;
    use crate::workload::TableSpec;

    fn instance(agg: Aggregation) -> MilpInstance {
        let specs: Vec<TableSpec> = (0..3)
            .map(|j| TableSpec::new(j, 100, 40 + 10 * j as u64, 8, 4).unwrap())
            .collect();
        let stats: Vec<FeatureStats> = (0..3)
            .map(|j| {
                let counts: Vec<u64> = (0..40 + 10 * j as u64).map(|r| 1000 / (r + 1)).collect();
                FeatureStats::from_counts(j, &counts, 0.3 + 0.2 * j as f64, 1.5 + j as f64).unwrap()
            })
            .collect();
        let sys = SystemSpec {
            num_gpus: 2,
            cap_hbm_bytes: 1000,
            cap_dram_bytes: 4000,
            ..SystemSpec::default()
        };
        build_instance(&stats, &specs, sys, Ablation::FULL, 5)
            .unwrap()
            .with_aggregation(agg)
    }

    #[test]
    fn roundtrip_preserves_matrix() {
        for agg in [Aggregation::Sum, Aggregation::Max] {
            for fmt in [LpFormat::Bilinear, LpFormat::Linearized] {
                let inst = instance(agg);
                let model = build_lp_model(&inst, fmt);
                let text = render_lp(&model, &["test".into()]);
                let back = parse_lp(&text).unwrap();
                model.compare(&back, 1e-12).unwrap();
                assert_eq!(back, model);
            }
        }
    }

    #[test]
    fn bilinear_variable_count_matches_instance() {
        for agg in [Aggregation::Sum, Aggregation::Max] {
            let inst = instance(agg);
            let model =
                parse_lp(&render_lp(&build_lp_model(&inst, LpFormat::Bilinear), &[])).unwrap();
            assert_eq!(model.variables().len(), inst.variable_count());
            assert_eq!(model.binaries.len(), inst.binary_variable_count());
        }
    }

    #[test]
    fn compare_detects_perturbation() {
        let model = build_lp_model(&instance(Aggregation::Sum), LpFormat::Bilinear);
        let mut other = model.clone();
        other.constraints[5].linear[1].1 *= 1.0 + 1e-9;
        assert!(model.compare(&other, 1e-12).is_err());
    }

    #[test]
    fn parse_errors_carry_line() {
        let text = "Minimize\n obj: C\nSubject To\n r: 1 x ?? 3\nEnd\n";
        assert_eq!(parse_lp(text).unwrap_err().0, 4);
    }
}
