//! Discounted social-cost value iteration on a latency x belief x
//! last-count x arrivals grid, with multilinear interpolation between
//! grid points and exhaustive search over integer splits.

use crate::dynamics::{compositions, outcome_branches};
use crate::error::{Error, Result};
use crate::model::{immediate_costs, Allocation, NetworkConfig, NetworkState, PathBeliefState};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MdpConfig {
    pub rho: f64,
    pub belief_grid: usize,
    pub latency_step: f64,
    pub latency_max: f64,
    pub max_iterations: usize,
    pub tolerance: f64,
}

impl MdpConfig {
    /// 51 beliefs, latency step `l0 / 50` up to `4 l0`; the cap grows to
    /// cover the initial latencies and the step grows to keep at most 401
    /// latency points.
    pub fn defaults(net: &NetworkConfig<f64>) -> Self {
        let ell0 = net.safe_latency.max(1e-9);
        let top = net.paths.iter().map(|p| p.initial_latency).fold(0.0, f64::max);
        let latency_max = (4.0 * ell0).max(1.25 * top);
        let latency_step = (ell0 / 50.0).max(latency_max / 400.0);
        Self {
            rho: net.rho,
            belief_grid: 51,
            latency_step,
            latency_max,
            max_iterations: 5000,
            tolerance: 1e-6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.rho) {
            return Err(Error::config("mdp.rho", "must lie in [0, 1)"));
        }
        if self.belief_grid < 2 {
            return Err(Error::config("mdp.belief_grid", "need at least 2 points"));
        }
        if !(self.latency_step > 0.0 && self.latency_max >= self.latency_step) {
            return Err(Error::config("mdp.latency", "need 0 < step <= max"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::config("mdp.tolerance", "must be positive"));
        }
        Ok(())
    }
}

/// Sorted grid coordinates along one state dimension.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Axis {
    pub points: Vec<f64>,
}

impl Axis {
    pub fn uniform(lo: f64, hi: f64, n: usize) -> Self {
        let n = n.max(2);
        let step = (hi - lo) / (n - 1) as f64;
        Self {
            points: (0..n).map(|i| if i + 1 == n { hi } else { lo + step * i as f64 }).collect(),
        }
    }

    pub fn from_points(mut points: Vec<f64>) -> Self {
        points.sort_by(|a, b| a.partial_cmp(b).unwrap());
        points.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * (1.0 + b.abs()));
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Lower cell index, weight of the upper neighbour, and whether `v`
    /// fell outside the axis.
    pub fn locate(&self, v: f64) -> (usize, f64, bool) {
        let p = &self.points;
        if p.len() == 1 {
            return (0, 0.0, (v - p[0]).abs() > 1e-12);
        }
        if v <= p[0] {
            return (0, 0.0, v < p[0] - 1e-9 * (1.0 + p[0].abs()));
        }
        let last = p.len() - 1;
        if v >= p[last] {
            return (last - 1, 1.0, v > p[last] + 1e-9 * (1.0 + p[last].abs()));
        }
        let hi = p.partition_point(|&x| x <= v).min(last);
        let lo = hi - 1;
        let w = (v - p[lo]) / (p[hi] - p[lo]);
        (lo, w, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ValueFunction {
    pub network: NetworkConfig<f64>,
    pub mdp: MdpConfig,
    pub latency: Axis,
    pub belief: Axis,
    /// Last-slot counts 0..=n_prev_max are indexed exactly.
    pub n_prev_max: u32,
    pub arrivals: Vec<(u32, f64)>,
    pub table: Vec<f64>,
    /// Sup-norm distance between successive iterates.
    pub gaps: Vec<f64>,
    pub iterations: usize,
    /// Successor lookups that fell off the grid during the last sweep.
    pub clamped: u64,
    pub key: String,
}

struct Layout {
    m: usize,
    nl: usize,
    nb: usize,
    np: usize,
    na: usize,
}

impl Layout {
    fn size(&self) -> usize {
        (self.nl * self.nb * self.np).pow(self.m as u32) * self.na
    }

    /// Row-major: latency indices, belief indices, last counts, arrivals.
    fn index(&self, l: &[usize], b: &[usize], p: &[usize], a: usize) -> usize {
        let mut idx = 0;
        for &v in l {
            idx = idx * self.nl + v;
        }
        for &v in b {
            idx = idx * self.nb + v;
        }
        for &v in p {
            idx = idx * self.np + v;
        }
        idx * self.na + a
    }

    fn decode(&self, mut idx: usize) -> (Vec<usize>, Vec<usize>, Vec<usize>, usize) {
        let a = idx % self.na;
        idx /= self.na;
        let mut p = vec![0; self.m];
        for i in (0..self.m).rev() {
            p[i] = idx % self.np;
            idx /= self.np;
        }
        let mut b = vec![0; self.m];
        for i in (0..self.m).rev() {
            b[i] = idx % self.nb;
            idx /= self.nb;
        }
        let mut l = vec![0; self.m];
        for i in (0..self.m).rev() {
            l[i] = idx % self.nl;
            idx /= self.nl;
        }
        (l, b, p, a)
    }
}

/// Above this many grid states the exact solver refuses.
pub const MAX_STATES: usize = 4_000_000;
const CACHE_BUDGET: usize = 24_000_000;

struct Transitions {
    /// Per state: offset into `actions`.
    state_start: Vec<u32>,
    /// Per (state, action): immediate cost and offset into `idx`/`w`.
    imm: Vec<f64>,
    entry_start: Vec<u32>,
    idx: Vec<u32>,
    w: Vec<f64>,
}

fn key_for(net: &NetworkConfig<f64>, mdp: &MdpConfig, lat: &Axis, bel: &Axis) -> String {
    use sha2::{Digest, Sha256};
    let blob = serde_json::to_vec(&(net, mdp, lat, bel)).expect("serializable");
    Sha256::digest(&blob).iter().map(|b| format!("{b:02x}")).collect()
}

/// Strictly better by more than a relative 1e-9, or tied and exploring the
/// highest-belief path more.
pub(crate) fn prefer(q: f64, counts: &[u32], best_q: f64, best: &[u32], beliefs: &[f64]) -> bool {
    let tol = 1e-9 * (1.0 + q.abs().max(best_q.abs()));
    if q < best_q - tol {
        return true;
    }
    if q > best_q + tol {
        return false;
    }
    let mut order: Vec<usize> = (0..beliefs.len()).collect();
    order.sort_by(|&a, &b| beliefs[b].partial_cmp(&beliefs[a]).unwrap().then(a.cmp(&b)));
    for i in order {
        if counts[i + 1] != best[i + 1] {
            return counts[i + 1] > best[i + 1];
        }
    }
    false
}

impl ValueFunction {
    pub fn solve(net: &NetworkConfig<f64>, mdp: &MdpConfig) -> Result<Self> {
        mdp.validate()?;
        let nl = (mdp.latency_max / mdp.latency_step).round() as usize + 1;
        let lat = Axis::uniform(0.0, mdp.latency_step * (nl - 1) as f64, nl);
        let bel = Axis::uniform(0.0, 1.0, mdp.belief_grid);
        Self::solve_on(net, mdp, lat, bel)
    }

    /// Solve on caller-supplied latency and belief axes.
    pub fn solve_on(net: &NetworkConfig<f64>, mdp: &MdpConfig, latency: Axis, belief: Axis) -> Result<Self> {
        net.validate()?;
        mdp.validate()?;
        let arrivals = net.arrivals.pmf();
        let mut vf = ValueFunction {
            network: net.clone(),
            mdp: mdp.clone(),
            key: key_for(net, mdp, &latency, &belief),
            latency,
            belief,
            n_prev_max: net.arrivals.max,
            arrivals,
            table: Vec::new(),
            gaps: Vec::new(),
            iterations: 0,
            clamped: 0,
        };
        let layout = vf.layout();
        if layout.size() > MAX_STATES {
            return Err(Error::InvalidInput(format!(
                "{} grid states exceed the exact solver limit {}",
                layout.size(),
                MAX_STATES
            )));
        }
        vf.iterate(&layout);
        Ok(vf)
    }

    fn layout(&self) -> Layout {
        Layout {
            m: self.network.m(),
            nl: self.latency.len(),
            nb: self.belief.len(),
            np: self.n_prev_max as usize + 1,
            na: self.arrivals.len(),
        }
    }

    fn grid_state(&self, layout: &Layout, s: usize) -> NetworkState<f64> {
        let (l, b, p, a) = layout.decode(s);
        NetworkState {
            safe_latency: self.network.safe_latency,
            paths: (0..layout.m)
                .map(|i| PathBeliefState {
                    expected_latency: self.latency.points[l[i]],
                    belief: self.belief.points[b[i]],
                    last_count: p[i] as f64,
                })
                .collect(),
            arrivals: self.arrivals[a].0,
        }
    }

    /// Interpolation stencil of `C` over the arrivals distribution for a
    /// path-state vector; returns the number of clamped lookups.
    fn stencil(&self, layout: &Layout, paths: &[PathBeliefState<f64>], scale: f64, out: &mut Vec<(u32, f64)>) -> u64 {
        let m = layout.m;
        let mut clamped = 0;
        let mut lo_l = vec![0usize; m];
        let mut w_l = vec![0f64; m];
        let mut lo_b = vec![0usize; m];
        let mut w_b = vec![0f64; m];
        let mut pv = vec![0usize; m];
        for (i, p) in paths.iter().enumerate() {
            let (li, wl, cl) = self.latency.locate(p.expected_latency);
            let (bi, wb, cb) = self.belief.locate(p.belief);
            clamped += cl as u64 + cb as u64;
            lo_l[i] = li;
            w_l[i] = wl;
            lo_b[i] = bi;
            w_b[i] = wb;
            let pc = p.last_count.round().max(0.0) as usize;
            pv[i] = pc.min(layout.np - 1);
        }
        let corners = 1usize << (2 * m);
        let mut l = vec![0usize; m];
        let mut b = vec![0usize; m];
        for c in 0..corners {
            let mut w = scale;
            for i in 0..m {
                let up_l = (c >> (2 * i)) & 1 == 1;
                let up_b = (c >> (2 * i + 1)) & 1 == 1;
                let fl = if up_l { w_l[i] } else { 1.0 - w_l[i] };
                let fb = if up_b { w_b[i] } else { 1.0 - w_b[i] };
                w *= fl * fb;
                l[i] = (lo_l[i] + up_l as usize).min(layout.nl - 1);
                b[i] = (lo_b[i] + up_b as usize).min(layout.nb - 1);
            }
            if w == 0.0 {
                continue;
            }
            for (a, &(_, pa)) in self.arrivals.iter().enumerate() {
                out.push((layout.index(&l, &b, &pv, a) as u32, w * pa));
            }
        }
        clamped
    }

    /// Successor stencil of taking `counts` in `state` (before discounting).
    fn successors(&self, layout: &Layout, state: &NetworkState<f64>, counts: &[u32], out: &mut Vec<(u32, f64)>) -> u64 {
        let mut clamped = 0;
        for (p, next) in outcome_branches(&self.network, state, counts) {
            clamped += self.stencil(layout, &next.paths, p, out);
        }
        clamped
    }

    fn immediate(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64 {
        let alloc = Allocation::integer(counts);
        immediate_costs(state, &alloc, &self.network.variance)
            .expect("dimensions match")
            .1
    }

    fn build_transitions(&self, layout: &Layout, actions: &[Vec<Vec<u32>>]) -> Option<Transitions> {
        let size = layout.size();
        let branch = 1usize << layout.m;
        let corners = 1usize << (2 * layout.m);
        let per_sa = branch * corners * layout.na;
        let sa: usize = (0..size).map(|s| actions[s % layout.na].len()).sum();
        if sa.saturating_mul(per_sa) > CACHE_BUDGET {
            return None;
        }
        let rows: Vec<(Vec<f64>, Vec<Vec<(u32, f64)>>)> = (0..size)
            .into_par_iter()
            .map(|s| {
                let st = self.grid_state(layout, s);
                let mut imms = Vec::new();
                let mut ents = Vec::new();
                for a in &actions[s % layout.na] {
                    let mut out = Vec::with_capacity(per_sa);
                    self.successors(layout, &st, a, &mut out);
                    imms.push(self.immediate(&st, a));
                    ents.push(out);
                }
                (imms, ents)
            })
            .collect();
        let mut t = Transitions {
            state_start: Vec::with_capacity(size + 1),
            imm: Vec::with_capacity(sa),
            entry_start: Vec::with_capacity(sa + 1),
            idx: Vec::new(),
            w: Vec::new(),
        };
        for (imms, ents) in rows {
            t.state_start.push(t.imm.len() as u32);
            for (c, e) in imms.into_iter().zip(ents) {
                t.imm.push(c);
                t.entry_start.push(t.idx.len() as u32);
                for (i, w) in e {
                    t.idx.push(i);
                    t.w.push(w);
                }
            }
        }
        t.state_start.push(t.imm.len() as u32);
        t.entry_start.push(t.idx.len() as u32);
        Some(t)
    }

    fn iterate(&mut self, layout: &Layout) {
        let size = layout.size();
        let rho = self.mdp.rho;
        let actions: Vec<Vec<Vec<u32>>> = self
            .arrivals
            .iter()
            .map(|&(n, _)| compositions(n, layout.m + 1))
            .collect();
        let cache = self.build_transitions(layout, &actions);

        let sweep = |vf: &ValueFunction, prev: Option<&[f64]>| -> (Vec<f64>, u64) {
            let rows: Vec<(f64, u64)> = (0..size)
                .into_par_iter()
                .map(|s| {
                    let mut best = f64::INFINITY;
                    let mut clamped = 0;
                    match (&cache, prev) {
                        (Some(t), _) => {
                            let (a0, a1) = (t.state_start[s] as usize, t.state_start[s + 1] as usize);
                            for k in a0..a1 {
                                let mut q = t.imm[k];
                                if let Some(c) = prev {
                                    let (e0, e1) = (t.entry_start[k] as usize, t.entry_start[k + 1] as usize);
                                    let mut ev = 0.0;
                                    for e in e0..e1 {
                                        ev += t.w[e] * c[t.idx[e] as usize];
                                    }
                                    q += rho * ev;
                                }
                                best = best.min(q);
                            }
                        }
                        (None, _) => {
                            let st = vf.grid_state(layout, s);
                            let mut buf = Vec::new();
                            for a in &actions[s % layout.na] {
                                let mut q = vf.immediate(&st, a);
                                if let Some(c) = prev {
                                    buf.clear();
                                    clamped += vf.successors(layout, &st, a, &mut buf);
                                    q += rho * buf.iter().map(|&(i, w)| w * c[i as usize]).sum::<f64>();
                                }
                                best = best.min(q);
                            }
                        }
                    }
                    (best, clamped)
                })
                .collect();
            let clamped = rows.iter().map(|r| r.1).sum();
            (rows.into_iter().map(|r| r.0).collect(), clamped)
        };

        let (mut cur, _) = sweep(self, None);
        self.gaps.clear();
        let mut q = 0;
        while q < self.mdp.max_iterations {
            let (next, clamped) = sweep(self, Some(&cur));
            let gap = next
                .iter()
                .zip(&cur)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            self.gaps.push(gap);
            self.clamped = clamped;
            cur = next;
            q += 1;
            if gap < self.mdp.tolerance {
                break;
            }
        }
        self.iterations = q;
        self.table = cur;
    }

    /// Interpolated long-term cost at an arbitrary state.
    pub fn value(&self, state: &NetworkState<f64>) -> f64 {
        let layout = self.layout();
        let mut out = Vec::new();
        self.stencil(&layout, &state.paths, 1.0, &mut out);
        // stencil averages over arrivals; pick the slice for the actual count instead
        let a = self
            .arrivals
            .iter()
            .enumerate()
            .min_by_key(|(_, &(n, _))| (n as i64 - state.arrivals as i64).abs())
            .map(|(i, _)| i)
            .unwrap_or(0);
        let na = layout.na;
        out.iter()
            .filter(|(i, _)| *i as usize % na == a)
            .map(|&(i, w)| w / self.arrivals[a].1 * self.table[i as usize])
            .sum()
    }

    /// `E[C(next)]` after taking `counts` in `state`.
    pub fn continuation(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64 {
        let layout = self.layout();
        let mut out = Vec::new();
        self.successors(&layout, state, counts, &mut out);
        out.iter().map(|&(i, w)| w * self.table[i as usize]).sum()
    }

    pub fn q_value(&self, state: &NetworkState<f64>, counts: &[u32]) -> f64 {
        self.immediate(state, counts) + self.mdp.rho * self.continuation(state, counts)
    }

    /// Largest observed ratio of successive sup-norm gaps, after allowing
    /// rounding noise of `1e-12` times the table scale.
    pub fn worst_contraction(&self) -> f64 {
        let scale = self.table.iter().fold(1.0f64, |a, &b| a.max(b.abs()));
        self.gaps
            .windows(2)
            .filter(|w| w[0] > 1e-300)
            .map(|w| (w[1] - 1e-12 * scale).max(0.0) / w[0])
            .fold(0.0, f64::max)
    }

    pub fn file_name(&self) -> String {
        format!("vf-{}.json", &self.key[..16])
    }

    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(self.file_name());
        std::fs::write(&path, serde_json::to_vec(self)?)?;
        Ok(path)
    }

    /// Reuse a persisted table when its key matches, else solve and persist.
    pub fn load_or_solve(dir: &Path, net: &NetworkConfig<f64>, mdp: &MdpConfig) -> Result<Self> {
        let nl = (mdp.latency_max / mdp.latency_step).round() as usize + 1;
        let lat = Axis::uniform(0.0, mdp.latency_step * (nl - 1) as f64, nl);
        let bel = Axis::uniform(0.0, 1.0, mdp.belief_grid);
        let key = key_for(net, mdp, &lat, &bel);
        let path = dir.join(format!("vf-{}.json", &key[..16]));
        if let Ok(bytes) = std::fs::read(&path) {
            if let Ok(vf) = serde_json::from_slice::<ValueFunction>(&bytes) {
                if vf.key == key {
                    return Ok(vf);
                }
            }
        }
        let vf = Self::solve_on(net, mdp, lat, bel)?;
        vf.save(dir)?;
        Ok(vf)
    }
}

/// Exhaustive argmin of immediate cost plus discounted continuation.
pub fn socially_optimal_allocation(state: &NetworkState<f64>, vf: &ValueFunction) -> Allocation<f64> {
    let beliefs: Vec<f64> = state.paths.iter().map(|p| p.belief).collect();
    let mut best: Option<(f64, Vec<u32>)> = None;
    for a in compositions(state.arrivals, state.m() + 1) {
        let q = vf.q_value(state, &a);
        let take = match &best {
            None => true,
            Some((bq, b)) => prefer(q, &a, *bq, b, &beliefs),
        };
        if take {
            best = Some((q, a));
        }
    }
    Allocation::integer(&best.expect("at least one split").1)
}
