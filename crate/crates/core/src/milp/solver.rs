//! Exact branch-and-bound for the placement model.
//!
//! The outer search assigns tables to GPUs. Once a GPU's table set is fixed,
//! choosing steps is a multiple-choice knapsack over HBM bytes (with a floor
//! on HBM bytes coming from the UVM capacity), solved exactly by an inner
//! branch-and-bound. Both searches bound nodes with the LP relaxation of the
//! knapsack, which is solved greedily over lower convex hulls.
//!
//! Among plans of equal objective the one with the smaller total cost
//! `sum_m c_m` wins, then the lexicographically smallest GPU vector (tables in
//! id order, GPUs relabeled by first use), then the smallest step vector
//! when its recovery fits a fixed node budget.

use std::collections::HashMap;
use std::rc::Rc;
use std::time::{Duration, Instant};

use super::plan::{ShardingPlan, TablePlacement};
use super::MilpInstance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveOptions {
    /// Wall-clock budget; results under a finite budget depend on machine speed.
    pub time_limit: Option<Duration>,
    /// Budget of outer search nodes; deterministic.
    pub node_limit: Option<u64>,
}

const REL_TOL: f64 = 1e-12;
/// Node budget of the lexicographic step recovery; past it the first optimal
/// step vector found is kept.
const LEX_BUDGET: u64 = 20_000;
/// Node budget of one exact per-GPU step optimization; past it the best
/// step vector found is used and the GPU solution is marked inexact.
const KNAPSACK_BUDGET: u64 = 200_000;

fn tol(x: f64) -> f64 {
    REL_TOL * x.abs()
}

#[derive(Debug, Clone, Copy)]
struct Opt {
    step: u32,
    h: u64,
    w: f64,
}

/// One lower-hull segment: moving `dh` bytes into HBM saves `gain`.
#[derive(Debug, Clone, Copy)]
struct Seg {
    table: usize,
    dh: f64,
    gain: f64,
}

#[derive(Debug)]
struct GpuSol {
    cost: f64,
    /// False when the step search ran out of budget and `cost` may not be optimal.
    exact: bool,
    /// `(table, step)` in ascending table order.
    steps: Vec<(usize, u32)>,
}

struct Model {
    cap_d: u64,
    cap_h: u64,
    /// Feasible options per table by ascending `h`, one per distinct `h`.
    opts: Vec<Vec<Opt>>,
    /// Hull segments of every table by decreasing efficiency.
    segs: Vec<Seg>,
    emb: Vec<u64>,
}

impl Model {
    fn new(inst: &MilpInstance) -> Self {
        let sys = inst.system();
        let (cap_d, cap_h) = (sys.cap_hbm_bytes, sys.cap_dram_bytes);
        let n = inst.num_tables();
        let mut opts = Vec::with_capacity(n);
        let mut segs = Vec::new();
        for j in 0..n {
            let emb = inst.emb_bytes(j);
            let mut list: Vec<Opt> = Vec::new();
            for i in 0..=inst.step_count() {
                let h = inst.mem_bytes(j, i);
                if h > cap_d || emb - h > cap_h {
                    continue;
                }
                let w = inst.weighted_cost(j, i);
                match list.last_mut() {
                    Some(last) if last.h == h => {
                        if w < last.w {
                            *last = Opt { step: i, h, w };
                        }
                    }
                    _ => list.push(Opt { step: i, h, w }),
                }
            }
            segs.extend(hull_segments(j, &list));
            opts.push(list);
        }
        segs.sort_by(|a, b| {
            let ea = a.gain / a.dh;
            let eb = b.gain / b.dh;
            eb.total_cmp(&ea).then(a.table.cmp(&b.table))
        });
        Model {
            cap_d,
            cap_h,
            opts,
            segs,
            emb: (0..n).map(|j| inst.emb_bytes(j)).collect(),
        }
    }

    fn base_w(&self, j: usize) -> f64 {
        self.opts[j][0].w
    }

    fn base_h(&self, j: usize) -> u64 {
        self.opts[j][0].h
    }

    fn max_h(&self, j: usize) -> u64 {
        self.opts[j].last().unwrap().h
    }

    fn solo(&self, j: usize) -> f64 {
        self.opts[j].last().unwrap().w
    }

    /// LP relaxation over the tables accepted by `include`, starting from
    /// their smallest options; `None` when even those overflow `cap`.
    fn lp(
        &self,
        include: impl Fn(usize) -> bool,
        base_w: f64,
        base_h: u128,
        cap: u128,
    ) -> Option<f64> {
        if base_h > cap {
            return None;
        }
        let mut room = (cap - base_h) as f64;
        let mut cost = base_w;
        for s in &self.segs {
            if !include(s.table) {
                continue;
            }
            if s.dh <= room {
                room -= s.dh;
                cost -= s.gain;
            } else {
                cost -= s.gain * room / s.dh;
                break;
            }
        }
        Some(cost.max(0.0))
    }

    /// Step choice for a fixed table set, exact unless the node budget runs out.
    fn solve_gpu(&self, tables: &[usize]) -> Option<GpuSol> {
        if tables.is_empty() {
            return Some(GpuSol {
                cost: 0.0,
                exact: true,
                steps: Vec::new(),
            });
        }
        let emb: u128 = tables.iter().map(|&t| self.emb[t] as u128).sum();
        let floor = emb.saturating_sub(self.cap_h as u128);

        // Find the optimal cost with the most decisive tables first.
        let mut order = tables.to_vec();
        order.sort_by(|&a, &b| {
            let sa = self.base_w(a) - self.solo(a);
            let sb = self.base_w(b) - self.solo(b);
            sb.total_cmp(&sa).then(a.cmp(&b))
        });
        let mut knap = Knapsack::new(self, &order, floor);
        knap.optimize();
        let exact = knap.dfs_budget > 0;
        let best = knap.best?;
        let mut pairs: Vec<(usize, usize)> = order
            .iter()
            .copied()
            .zip(knap.best_choice.unwrap())
            .collect();
        pairs.sort_unstable();

        // Recover the lexicographically smallest step vector at that cost.
        let mut lex = Knapsack::new(self, tables, floor);
        if let Some(choice) = lex.first_within(best + tol(best)) {
            pairs = tables.iter().copied().zip(choice).collect();
        }
        let steps = pairs
            .iter()
            .map(|&(t, o)| (t, self.opts[t][o].step))
            .collect();
        let cost = pairs.iter().map(|&(t, o)| self.opts[t][o].w).sum();
        Some(GpuSol { cost, exact, steps })
    }
}

fn hull_segments(table: usize, opts: &[Opt]) -> Vec<Seg> {
    let mut hull: Vec<Opt> = Vec::with_capacity(opts.len());
    for &p in opts {
        while hull.len() >= 2 {
            let a = hull[hull.len() - 2];
            let b = hull[hull.len() - 1];
            let cross = (b.h - a.h) as f64 * (p.w - a.w) - (b.w - a.w) * (p.h - a.h) as f64;
            if cross <= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(p);
    }
    hull.windows(2)
        .map(|w| Seg {
            table,
            dh: (w[1].h - w[0].h) as f64,
            gain: w[0].w - w[1].w,
        })
        .take_while(|s| s.gain > 0.0)
        .collect()
}

/// Greedy LP gain of segments sorted by efficiency, as a function of room.
struct Tail {
    cum_dh: Vec<f64>,
    cum_gain: Vec<f64>,
}

impl Tail {
    fn new(segs: impl Iterator<Item = Seg>) -> Self {
        let (mut cum_dh, mut cum_gain) = (vec![0.0], vec![0.0]);
        for s in segs {
            cum_dh.push(cum_dh.last().unwrap() + s.dh);
            cum_gain.push(cum_gain.last().unwrap() + s.gain);
        }
        Tail { cum_dh, cum_gain }
    }

    fn gain(&self, room: f64) -> f64 {
        let k = self.cum_dh.partition_point(|&d| d <= room);
        if k == self.cum_dh.len() {
            return *self.cum_gain.last().unwrap();
        }
        let (d0, g0) = (self.cum_dh[k - 1], self.cum_gain[k - 1]);
        g0 + (self.cum_gain[k] - g0) * (room - d0) / (self.cum_dh[k] - d0)
    }
}

/// Step choices of a fixed table sequence.
struct Knapsack<'m> {
    model: &'m Model,
    order: Vec<usize>,
    /// LP gain curves of the hull segments of positions `k..`, for every `k`.
    tails: Vec<Tail>,
    floor: u128,
    suf_w: Vec<f64>,
    suf_min: Vec<u128>,
    suf_max: Vec<u128>,
    choice: Vec<usize>,
    best: Option<f64>,
    best_choice: Option<Vec<usize>>,
    /// Nodes left for `first_within`.
    lex_budget: u64,
    /// Nodes left for `descend`.
    dfs_budget: u64,
}

impl<'m> Knapsack<'m> {
    fn new(model: &'m Model, order: &[usize], floor: u128) -> Self {
        let n = order.len();
        let mut suf_w = vec![0.0; n + 1];
        let mut suf_min = vec![0u128; n + 1];
        let mut suf_max = vec![0u128; n + 1];
        for k in (0..n).rev() {
            let t = order[k];
            suf_w[k] = suf_w[k + 1] + model.base_w(t);
            suf_min[k] = suf_min[k + 1] + model.base_h(t) as u128;
            suf_max[k] = suf_max[k + 1] + model.max_h(t) as u128;
        }
        let pos: HashMap<usize, usize> = order.iter().enumerate().map(|(k, &t)| (t, k)).collect();
        let segs: Vec<(usize, Seg)> = model
            .segs
            .iter()
            .filter_map(|s| pos.get(&s.table).map(|&p| (p, *s)))
            .collect();
        let tails = (0..=n)
            .map(|k| Tail::new(segs.iter().filter(|(p, _)| *p >= k).map(|(_, s)| *s)))
            .collect();
        Knapsack {
            model,
            order: order.to_vec(),
            tails,
            floor,
            suf_w,
            suf_min,
            suf_max,
            choice: vec![0; n],
            best: None,
            best_choice: None,
            lex_budget: LEX_BUDGET,
            dfs_budget: KNAPSACK_BUDGET,
        }
    }

    /// `cost` plus the LP relaxation of positions `k..` in the remaining room.
    fn bound(&self, k: usize, used: u128, cost: f64) -> Option<f64> {
        let cap = (self.model.cap_d as u128).checked_sub(used)?;
        let room = cap.checked_sub(self.suf_min[k])? as f64;
        Some(cost + (self.suf_w[k] - self.tails[k].gain(room)).max(0.0))
    }

    fn reachable(&self, k: usize, used: u128) -> bool {
        used + self.suf_min[k] <= self.model.cap_d as u128 && used + self.suf_max[k] >= self.floor
    }

    fn optimize(&mut self) {
        self.descend(0, 0, 0.0);
    }

    fn descend(&mut self, k: usize, used: u128, cost: f64) {
        if self.dfs_budget == 0 {
            return;
        }
        self.dfs_budget -= 1;
        if k == self.order.len() {
            if used >= self.floor && self.best.is_none_or(|b| cost < b - tol(b)) {
                self.best = Some(cost);
                self.best_choice = Some(self.choice.clone());
            }
            return;
        }
        let Some(bound) = self.bound(k, used, cost) else {
            return;
        };
        if self.best.is_some_and(|b| bound >= b - tol(b)) {
            return;
        }
        let model = self.model;
        let t = self.order[k];
        for o in (0..model.opts[t].len()).rev() {
            let opt = model.opts[t][o];
            let u = used + opt.h as u128;
            if u + self.suf_min[k + 1] > model.cap_d as u128 {
                continue;
            }
            if u + self.suf_max[k + 1] < self.floor {
                break;
            }
            self.choice[k] = o;
            self.descend(k + 1, u, cost + opt.w);
        }
    }

    /// First choice vector in lexicographic order whose cost stays within
    /// `limit`; `None` when none exists or the node budget runs out.
    fn first_within(&mut self, limit: f64) -> Option<Vec<usize>> {
        if self.lex(0, 0, 0.0, limit) {
            Some(self.choice.clone())
        } else {
            None
        }
    }

    fn lex(&mut self, k: usize, used: u128, cost: f64, limit: f64) -> bool {
        if self.lex_budget == 0 {
            return false;
        }
        self.lex_budget -= 1;
        if k == self.order.len() {
            return used >= self.floor && cost <= limit;
        }
        if !self.reachable(k, used) {
            return false;
        }
        match self.bound(k, used, cost) {
            Some(b) if b <= limit + tol(limit) => {}
            _ => return false,
        }
        let model = self.model;
        let t = self.order[k];
        for o in 0..model.opts[t].len() {
            let opt = model.opts[t][o];
            let u = used + opt.h as u128;
            if u + self.suf_min[k + 1] > model.cap_d as u128 {
                break;
            }
            if u + self.suf_max[k + 1] < self.floor {
                continue;
            }
            self.choice[k] = o;
            if self.lex(k + 1, u, cost + opt.w, limit) {
                return true;
            }
        }
        false
    }
}

#[derive(Clone)]
struct Incumbent {
    c: f64,
    sum: f64,
    /// GPU of every table, by table id.
    gpu_of: Vec<usize>,
    sols: Vec<Rc<GpuSol>>,
}

fn key_better(c: f64, sum: f64, inc: Option<&Incumbent>) -> bool {
    match inc {
        None => true,
        Some(b) => c < b.c - tol(b.c) || (c <= b.c + tol(b.c) && sum < b.sum - tol(b.sum)),
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Mode {
    Improve,
    /// Stop at the first assignment, in lexicographic order, matching the optimum.
    Lex,
}

struct Gpu {
    base_w: f64,
    base_h: u128,
    emb: u128,
    max_h: u128,
    lb: f64,
}

struct Search<'m> {
    model: &'m Model,
    m: usize,
    memo: HashMap<Vec<usize>, Option<Rc<GpuSol>>>,
    order: Vec<usize>,
    suf_solo: Vec<f64>,
    c_floor: f64,
    sum_floor: f64,
    gpu_of: Vec<Option<usize>>,
    gpus: Vec<Gpu>,
    best: Option<Incumbent>,
    nodes: u64,
    node_limit: u64,
    deadline: Option<Instant>,
    aborted: bool,
    open_lb: f64,
    /// Smallest bound of a leaf whose per-GPU solutions were not all exact.
    inexact_lb: f64,
}

impl<'m> Search<'m> {
    fn new(model: &'m Model, m: usize, opts: &SolveOptions) -> Self {
        let n = model.opts.len();
        let pooled_cap = m as u128 * model.cap_d as u128;
        let base_w: f64 = (0..n).map(|t| model.base_w(t)).sum();
        let base_h: u128 = (0..n).map(|t| model.base_h(t) as u128).sum();
        let sum_floor = model
            .lp(|_| true, base_w, base_h, pooled_cap)
            .unwrap_or(0.0);
        let max_solo = (0..n).map(|t| model.solo(t)).fold(0.0, f64::max);
        Search {
            model,
            m,
            memo: HashMap::new(),
            order: (0..n).collect(),
            suf_solo: vec![0.0; n + 1],
            c_floor: (sum_floor / m as f64).max(max_solo),
            sum_floor,
            gpu_of: vec![None; n],
            gpus: (0..m)
                .map(|_| Gpu {
                    base_w: 0.0,
                    base_h: 0,
                    emb: 0,
                    max_h: 0,
                    lb: 0.0,
                })
                .collect(),
            best: None,
            nodes: 0,
            node_limit: opts.node_limit.unwrap_or(u64::MAX),
            deadline: opts.time_limit.map(|d| Instant::now() + d),
            aborted: false,
            open_lb: f64::INFINITY,
            inexact_lb: f64::INFINITY,
        }
    }

    fn set_order(&mut self, order: Vec<usize>) {
        let n = order.len();
        self.suf_solo = vec![0.0; n + 1];
        for k in (0..n).rev() {
            self.suf_solo[k] = self.suf_solo[k + 1] + self.model.solo(order[k]);
        }
        self.order = order;
    }

    fn out_of_budget(&mut self) -> bool {
        if self.aborted {
            return true;
        }
        if self.nodes >= self.node_limit {
            self.aborted = true;
        } else if self.nodes.is_multiple_of(64) {
            if let Some(d) = self.deadline {
                self.aborted = Instant::now() >= d;
            }
        }
        self.aborted
    }

    fn gpu_sol(&mut self, tables: Vec<usize>) -> Option<Rc<GpuSol>> {
        if let Some(s) = self.memo.get(&tables) {
            return s.clone();
        }
        let sol = self.model.solve_gpu(&tables).map(Rc::new);
        self.memo.insert(tables, sol.clone());
        sol
    }

    /// Exact per-GPU solutions for a complete assignment.
    fn evaluate(&mut self, gpu_of: &[usize]) -> Option<Incumbent> {
        let mut sets = vec![Vec::new(); self.m];
        for (t, &g) in gpu_of.iter().enumerate() {
            sets[g].push(t);
        }
        let mut sols = Vec::with_capacity(self.m);
        for set in sets {
            sols.push(self.gpu_sol(set)?);
        }
        let c = sols.iter().map(|s| s.cost).fold(0.0, f64::max);
        let sum = sols.iter().map(|s| s.cost).sum();
        Some(Incumbent {
            c,
            sum,
            gpu_of: gpu_of.to_vec(),
            sols,
        })
    }

    fn child_lb(&self, g: usize, t: usize) -> Option<f64> {
        let model = self.model;
        let gp = &self.gpus[g];
        if gp.emb + model.emb[t] as u128 > gp.max_h + model.max_h(t) as u128 + model.cap_h as u128 {
            return None;
        }
        let gpu_of = &self.gpu_of;
        model.lp(
            |s| s == t || gpu_of[s] == Some(g),
            gp.base_w + model.base_w(t),
            gp.base_h + model.base_h(t) as u128,
            model.cap_d as u128,
        )
    }

    fn assign(&mut self, t: usize, g: usize, lb: f64) -> f64 {
        let model = self.model;
        let gp = &mut self.gpus[g];
        gp.base_w += model.base_w(t);
        gp.base_h += model.base_h(t) as u128;
        gp.emb += model.emb[t] as u128;
        gp.max_h += model.max_h(t) as u128;
        self.gpu_of[t] = Some(g);
        std::mem::replace(&mut gp.lb, lb)
    }

    fn unassign(&mut self, t: usize, g: usize, old_lb: f64) {
        let model = self.model;
        let gp = &mut self.gpus[g];
        gp.base_w -= model.base_w(t);
        gp.base_h -= model.base_h(t) as u128;
        gp.emb -= model.emb[t] as u128;
        gp.max_h -= model.max_h(t) as u128;
        gp.lb = old_lb;
        self.gpu_of[t] = None;
    }

    fn node_bounds(&self, k: usize) -> (f64, f64) {
        let c = self.gpus.iter().map(|g| g.lb).fold(self.c_floor, f64::max);
        let sum = self.gpus.iter().map(|g| g.lb).sum::<f64>() + self.suf_solo[k];
        (c, sum.max(self.sum_floor))
    }

    fn promising(&self, mode: Mode, c_lb: f64, sum_lb: f64) -> bool {
        match (mode, &self.best) {
            (Mode::Improve, _) => key_better(c_lb, sum_lb, self.best.as_ref()),
            (Mode::Lex, Some(b)) => c_lb <= b.c + tol(b.c) && sum_lb <= b.sum + tol(b.sum),
            (Mode::Lex, None) => false,
        }
    }

    /// Returns `true` when a `Lex` search has found its answer.
    fn dfs(&mut self, k: usize, max_used: Option<usize>, mode: Mode) -> bool {
        self.nodes += 1;
        if k == self.order.len() {
            let gpu_of: Vec<usize> = self.gpu_of.iter().map(|g| g.unwrap()).collect();
            let Some(inc) = self.evaluate(&gpu_of) else {
                return false;
            };
            if inc.sols.iter().any(|s| !s.exact) {
                self.inexact_lb = self.inexact_lb.min(self.node_bounds(k).0);
            }
            match mode {
                Mode::Improve => {
                    if key_better(inc.c, inc.sum, self.best.as_ref()) {
                        self.best = Some(inc);
                    }
                    return false;
                }
                Mode::Lex => {
                    if self.promising(Mode::Lex, inc.c, inc.sum) {
                        self.best = Some(inc);
                        return true;
                    }
                    return false;
                }
            }
        }
        let t = self.order[k];
        let top = max_used.map_or(0, |u| (u + 1).min(self.m - 1));
        let mut children: Vec<(usize, f64, f64, f64)> = Vec::with_capacity(top + 1);
        for g in 0..=top {
            let Some(lb) = self.child_lb(g, t) else {
                continue;
            };
            let old = self.assign(t, g, lb);
            let (c_lb, sum_lb) = self.node_bounds(k + 1);
            self.unassign(t, g, old);
            children.push((g, lb, c_lb, sum_lb));
        }
        if mode == Mode::Improve {
            children.sort_by(|a, b| {
                a.2.total_cmp(&b.2)
                    .then(a.3.total_cmp(&b.3))
                    .then(a.0.cmp(&b.0))
            });
        }
        for (idx, &(g, lb, c_lb, sum_lb)) in children.iter().enumerate() {
            if !self.promising(mode, c_lb, sum_lb) {
                continue;
            }
            if self.out_of_budget() {
                let rest = children[idx..]
                    .iter()
                    .filter(|c| self.promising(mode, c.2, c.3))
                    .map(|c| c.2)
                    .fold(f64::INFINITY, f64::min);
                self.open_lb = self.open_lb.min(rest);
                return false;
            }
            let old = self.assign(t, g, lb);
            let next_used = Some(max_used.map_or(g, |u| u.max(g)));
            let done = self.dfs(k + 1, next_used, mode);
            self.unassign(t, g, old);
            if done {
                return true;
            }
        }
        false
    }

    /// Greedy start: each table goes where its relaxed load grows least.
    fn greedy(&mut self) -> Option<Vec<usize>> {
        let order = self.order.clone();
        let mut placed = Vec::new();
        for &t in &order {
            let mut pick: Option<(usize, f64)> = None;
            for g in 0..self.m {
                let Some(lb) = self.child_lb(g, t) else {
                    continue;
                };
                if pick.is_none_or(|(_, best)| lb < best) {
                    pick = Some((g, lb));
                }
            }
            let Some((g, lb)) = pick else {
                for (t, g, old) in placed.into_iter().rev() {
                    self.unassign(t, g, old);
                }
                return None;
            };
            let old = self.assign(t, g, lb);
            placed.push((t, g, old));
        }
        let gpu_of = self.gpu_of.iter().map(|g| g.unwrap()).collect();
        for (t, g, old) in placed.into_iter().rev() {
            self.unassign(t, g, old);
        }
        Some(gpu_of)
    }

    /// Single-table moves and pairwise swaps until neither improves the key.
    fn local_search(&mut self, mut inc: Incumbent) -> Incumbent {
        let n = inc.gpu_of.len();
        let mut improved = true;
        while improved && !self.out_of_budget() {
            improved = false;
            for t in 0..n {
                for g in 0..self.m {
                    if g == inc.gpu_of[t] {
                        continue;
                    }
                    let mut cand = inc.gpu_of.clone();
                    cand[t] = g;
                    if let Some(e) = self.evaluate(&cand) {
                        if key_better(e.c, e.sum, Some(&inc)) {
                            inc = e;
                            improved = true;
                        }
                    }
                }
            }
            for a in 0..n {
                for b in a + 1..n {
                    if inc.gpu_of[a] == inc.gpu_of[b] {
                        continue;
                    }
                    let mut cand = inc.gpu_of.clone();
                    cand.swap(a, b);
                    if let Some(e) = self.evaluate(&cand) {
                        if key_better(e.c, e.sum, Some(&inc)) {
                            inc = e;
                            improved = true;
                        }
                    }
                }
                if self.deadline.is_some_and(|d| Instant::now() >= d) {
                    self.aborted = true;
                    break;
                }
            }
        }
        inc
    }
}

/// Relabels GPUs in order of first use by ascending table id.
fn canonical(gpu_of: &[usize], m: usize) -> Vec<usize> {
    let mut map = vec![usize::MAX; m];
    let mut next = 0;
    gpu_of
        .iter()
        .map(|&g| {
            if map[g] == usize::MAX {
                map[g] = next;
                next += 1;
            }
            map[g]
        })
        .collect()
}

/// Solves `instance`, exactly when the search completes within budget.
pub fn solve(instance: &MilpInstance, opts: &SolveOptions) -> Result<ShardingPlan> {
    instance.check_feasibility()?;
    let model = Model::new(instance);
    let m = instance.num_gpus();
    let n = instance.num_tables();
    let mut search = Search::new(&model, m, opts);

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        model
            .solo(b)
            .total_cmp(&model.solo(a))
            .then(model.base_w(b).total_cmp(&model.base_w(a)))
            .then(a.cmp(&b))
    });
    search.set_order(order);

    if let Some(start) = search.greedy() {
        if let Some(inc) = search.evaluate(&start) {
            let inc = search.local_search(inc);
            search.best = Some(inc);
        }
    }
    search.aborted = false;
    search.nodes = 0;
    search.dfs(0, None, Mode::Improve);
    let proved = !search.aborted && search.inexact_lb.is_infinite();
    let nodes = search.nodes;

    let Some(phase1) = search.best.clone() else {
        return Err(if search.aborted {
            Error::SearchExhausted
        } else {
            Error::Infeasible("no assignment satisfies every GPU's HBM and UVM capacity".into())
        });
    };
    let lower_bound = if proved {
        phase1.c
    } else {
        search
            .open_lb
            .min(search.inexact_lb)
            .max(search.c_floor)
            .min(phase1.c)
    };

    let mut chosen = phase1.clone();
    if proved {
        search.set_order((0..n).collect());
        search.open_lb = f64::INFINITY;
        if search.dfs(0, None, Mode::Lex) {
            chosen = search.best.clone().unwrap();
        } else {
            search.best = Some(phase1);
        }
    }
    log::info!(
        "branch-and-bound: {nodes} nodes, objective {:.6e}, bound {:.6e}, proved optimal: {proved}",
        chosen.c,
        lower_bound
    );

    let labels = canonical(&chosen.gpu_of, m);
    let mut steps = vec![0u32; n];
    for sol in &chosen.sols {
        for &(t, s) in &sol.steps {
            steps[t] = s;
        }
    }
    let placements = (0..n)
        .map(|j| {
            let step = steps[j];
            let hbm_rows = instance.icdf(j, step);
            TablePlacement {
                table_id: j as u32,
                gpu: labels[j] as u32,
                step,
                hbm_rows,
                pct: instance.pct(step),
                mem_bytes: hbm_rows * instance.spec(j).row_bytes(),
            }
        })
        .collect();
    Ok(ShardingPlan::from_placements(
        instance,
        "milp",
        placements,
        Some(lower_bound),
        proved,
    ))
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::milp::{build_instance, validate_plan, Ablation, PlanCheck, SystemSpec};
    use crate::profiler::FeatureStats;
    use crate::workload::TableSpec;

    fn random_instance(rng: &mut ChaCha8Rng) -> MilpInstance {
        let j = rng.random_range(1..=5usize);
        let m = rng.random_range(1..=3u32);
        let steps = if rng.random_bool(0.5) { 4 } else { 10 };
        let mut specs = Vec::new();
        let mut stats = Vec::new();
        for t in 0..j {
            let rows = rng.random_range(3..40u64);
            specs.push(
                TableSpec::new(t as u32, 1000, rows, [4, 8][rng.random_range(0..2)], 4).unwrap(),
            );
            let counts: Vec<u64> = (0..rows)
                .map(|_| {
                    if rng.random_bool(0.8) {
                        rng.random_range(0..30)
                    } else {
                        0
                    }
                })
                .collect();
            let counts = if counts.iter().all(|&c| c == 0) {
                vec![1; rows as usize]
            } else {
                counts
            };
            stats.push(
                FeatureStats::from_counts(
                    t as u32,
                    &counts,
                    rng.random_range(0.05..1.0),
                    rng.random_range(1.0..20.0),
                )
                .unwrap(),
            );
        }
        let total: u64 = specs.iter().map(|s| s.table_bytes()).sum();
        let sys = SystemSpec {
            num_gpus: m,
            batch_size: 512,
            cap_hbm_bytes: (total as f64 * rng.random_range(0.05..0.8) / m as f64).max(1.0) as u64,
            cap_dram_bytes: (total as f64 * rng.random_range(0.7..2.0) / m as f64).max(1.0) as u64,
            ..SystemSpec::default()
        };
        build_instance(&stats, &specs, sys, Ablation::FULL, steps).unwrap()
    }

    /// Minimum over every assignment and every step vector.
    fn brute_force(inst: &MilpInstance) -> Option<f64> {
        let (n, m) = (inst.num_tables(), inst.num_gpus());
        let sys = inst.system();
        let mut best_set = vec![f64::INFINITY; 1 << n];
        for (mask, slot) in best_set.iter_mut().enumerate() {
            let tables: Vec<usize> = (0..n).filter(|t| mask >> t & 1 == 1).collect();
            let mut steps = vec![0u32; tables.len()];
            loop {
                let h: u64 = tables
                    .iter()
                    .zip(&steps)
                    .map(|(&t, &i)| inst.mem_bytes(t, i))
                    .sum();
                let emb: u64 = tables.iter().map(|&t| inst.emb_bytes(t)).sum();
                if h <= sys.cap_hbm_bytes && emb - h <= sys.cap_dram_bytes {
                    let c: f64 = tables
                        .iter()
                        .zip(&steps)
                        .map(|(&t, &i)| inst.weighted_cost(t, i))
                        .sum();
                    *slot = slot.min(c);
                }
                let mut k = 0;
                while k < steps.len() && steps[k] == inst.step_count() {
                    steps[k] = 0;
                    k += 1;
                }
                if k == steps.len() {
                    break;
                }
                steps[k] += 1;
            }
        }
        let mut best = f64::INFINITY;
        let mut gpu_of = vec![0usize; n];
        loop {
            let mut masks = vec![0usize; m];
            for (t, &g) in gpu_of.iter().enumerate() {
                masks[g] |= 1 << t;
            }
            let c = masks.iter().map(|&k| best_set[k]).fold(0.0, f64::max);
            best = best.min(c);
            let mut k = 0;
            while k < n && gpu_of[k] == m - 1 {
                gpu_of[k] = 0;
                k += 1;
            }
            if k == n {
                break;
            }
            gpu_of[k] += 1;
        }
        best.is_finite().then_some(best)
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut solved = 0;
        for _ in 0..60 {
            let inst = random_instance(&mut rng);
            let oracle = brute_force(&inst);
            match solve(&inst, &SolveOptions::default()) {
                Ok(plan) => {
                    let o = oracle.expect("solver found a plan the oracle did not");
                    assert!(
                        (plan.objective - o).abs() <= 1e-9 * o.max(1e-300),
                        "{} vs {o}",
                        plan.objective
                    );
                    assert!(plan.proved_optimal);
                    validate_plan(&inst, &plan, PlanCheck::Stepped).unwrap();
                    solved += 1;
                }
                Err(Error::Infeasible(_)) => assert!(oracle.is_none()),
                Err(e) => panic!("{e}"),
            }
        }
        assert!(solved > 30, "only {solved} feasible instances");
    }

    #[test]
    fn single_table_goes_fully_to_hbm() {
        let specs = [TableSpec::new(0, 100, 50, 8, 4).unwrap()];
        let counts: Vec<u64> = (1..=50).collect();
        let stats = [FeatureStats::from_counts(0, &counts, 0.5, 3.0).unwrap()];
        let sys = SystemSpec {
            num_gpus: 1,
            ..SystemSpec::default()
        };
        let inst = build_instance(&stats, &specs, sys, Ablation::FULL, 100).unwrap();
        let plan = solve(&inst, &SolveOptions::default()).unwrap();
        assert_eq!(plan.placements[0].pct, 1.0);
        let expect = 0.5 * inst.table_cost(0, 1.0);
        assert!((plan.objective - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn uniform_tables_spread_one_per_gpu() {
        let specs: Vec<TableSpec> = (0..4)
            .map(|j| TableSpec::new(j, 100, 20, 8, 4).unwrap())
            .collect();
        let stats: Vec<FeatureStats> = (0..4)
            .map(|j| FeatureStats::from_counts(j, &[3; 20], 0.7, 2.0).unwrap())
            .collect();
        let sys = SystemSpec {
            num_gpus: 4,
            ..SystemSpec::default()
        };
        let inst = build_instance(&stats, &specs, sys, Ablation::FULL, 100).unwrap();
        let plan = solve(&inst, &SolveOptions::default()).unwrap();
        let gpus: Vec<u32> = plan.placements.iter().map(|p| p.gpu).collect();
        assert_eq!(gpus, vec![0, 1, 2, 3]);
        let expect = 0.7 * inst.table_cost(0, 1.0);
        assert!((plan.objective - expect).abs() <= 1e-12 * expect);
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let inst = random_instance(&mut rng);
            let a = solve(&inst, &SolveOptions::default());
            let b = solve(&inst, &SolveOptions::default());
            if let (Ok(a), Ok(b)) = (a, b) {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn node_limit_reports_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let inst = random_instance(&mut rng);
            let opts = SolveOptions {
                node_limit: Some(2),
                ..SolveOptions::default()
            };
            if let Ok(plan) = solve(&inst, &opts) {
                assert!(plan.lower_bound <= plan.objective * (1.0 + 1e-12));
                validate_plan(&inst, &plan, PlanCheck::Stepped).unwrap();
            }
        }
    }
}
