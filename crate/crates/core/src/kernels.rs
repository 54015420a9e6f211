//! Goursat kernel systems of the backstepping controller and observer.
//!
//! Both systems are eight coupled first-order PDEs of the form
//! `a_c dF_c/dx + b_c dF_c/dxi = R_c(x, xi, F)` on a triangle. Each
//! component is written as an integral along its own characteristic from the
//! edge that carries its data, and the integral equations are solved by
//! successive approximation on a packed triangular mesh.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LinearCoeffs, Mat2};

/// Number of kernel components in either system.
pub const NC: usize = 8;
pub type Node8 = [f64; NC];

pub const CONTROL_NAMES: [&str; NC] = ["k11", "k12", "k21", "k22", "l11", "l12", "l21", "l22"];
pub const OBSERVER_NAMES: [&str; NC] = ["m11", "m12", "m21", "m22", "n11", "n12", "n21", "n22"];

/// Uniform triangular lattice on `0 <= xi <= x <= L`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriMesh {
    /// Nodes per edge.
    pub n: usize,
    pub length: f64,
}

impl TriMesh {
    pub const MIN_NODES: usize = 16;

    pub fn new(n: usize, length: f64) -> Result<Self> {
        if n < Self::MIN_NODES {
            return Err(Error::invalid(
                "mesh.n",
                format!("need at least {} nodes per edge, got {n}", Self::MIN_NODES),
            ));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(Error::invalid("mesh.length", format!("must be positive, got {length}")));
        }
        Ok(Self { n, length })
    }

    pub fn h(&self) -> f64 {
        self.length / (self.n - 1) as f64
    }

    pub fn len(&self) -> usize {
        self.n * (self.n + 1) / 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Packed index of node `(i, j)`, `j <= i`.
    #[inline]
    pub fn idx(&self, i: usize, j: usize) -> usize {
        debug_assert!(j <= i && i < self.n);
        i * (i + 1) / 2 + j
    }

    #[inline]
    pub fn coord(&self, i: usize) -> f64 {
        if i == self.n - 1 {
            self.length
        } else {
            i as f64 * self.h()
        }
    }

    /// `(i, j)` for every packed index, in index order.
    pub fn nodes(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.n {
            for j in 0..=i {
                out.push((i, j));
            }
        }
        out
    }

    /// Piecewise-linear interpolation on the triangulation obtained by
    /// splitting every square cell along its diagonal.
    pub fn interp(&self, x: f64, xi: f64, get: impl Fn(usize) -> f64) -> f64 {
        let h = self.h();
        let top = (self.n - 2) as f64;
        let u = (x / h).clamp(0.0, (self.n - 1) as f64);
        let v = (xi / h).clamp(0.0, u);
        let i = u.floor().min(top) as usize;
        let j = (v.floor() as usize).min(i);
        let fu = u - i as f64;
        let fv = v - j as f64;
        let f00 = get(self.idx(i, j));
        let f11 = get(self.idx(i + 1, j + 1));
        if fv <= fu || j == i {
            let f10 = get(self.idx(i + 1, j));
            f00 + fu * (f10 - f00) + fv * (f11 - f10)
        } else {
            let f01 = get(self.idx(i, j + 1));
            f00 + fv * (f01 - f00) + fu * (f11 - f01)
        }
    }
}

/// Edges of the lower mesh triangle.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Edge {
    Diagonal,
    Bottom,
    Right,
}

impl Edge {
    const ALL: [Edge; 3] = [Edge::Diagonal, Edge::Bottom, Edge::Right];
}

/// Characteristic of one component in mesh coordinates.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Characteristic {
    pub dir: [f64; 2],
    /// Trace along `+dir` (true) or `-dir` (false) to reach the data.
    pub forward: bool,
    pub data_edges: &'static [Edge],
}

/// Line along which a component carries a discontinuity.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JumpLine {
    pub point: [f64; 2],
    pub dir: [f64; 2],
}

impl JumpLine {
    fn cross(&self, x: f64, xi: f64) -> f64 {
        (x - self.point[0]) * self.dir[1] - (xi - self.point[1]) * self.dir[0]
    }

    fn distance(&self, x: f64, xi: f64) -> f64 {
        self.cross(x, xi).abs() / self.dir[0].hypot(self.dir[1])
    }
}

/// Known discontinuity of one component: across `line`, the component on
/// the diagonal side exceeds the other side by `j0 exp(rate t)`, where `t`
/// is the line parameter measured from `line.point` in units of `line.dir`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Jump {
    comp: usize,
    line: JumpLine,
    j0: f64,
    rate: f64,
    side: f64,
    tiny: f64,
}

impl Jump {
    fn new(comp: usize, line: JumpLine, j0: f64, rate: f64, length: f64) -> Self {
        let side = line.cross(0.5 * length, 0.5 * length).signum();
        let tiny = 1e-12 * length * line.dir[0].hypot(line.dir[1]);
        Self {
            comp,
            line,
            j0,
            rate,
            side,
            tiny,
        }
    }

    /// True on the diagonal side of the line (and on the line itself, where
    /// ties in the exit search also resolve to the diagonal).
    fn active(&self, x: f64, xi: f64) -> bool {
        let c = self.line.cross(x, xi);
        c.abs() <= self.tiny || c.signum() == self.side
    }

    /// Parameter interval of the path `(x, xi) + s d`, `0 <= s <= s_end`,
    /// lying on the active side.
    fn active_span(&self, x: f64, xi: f64, d: [f64; 2], s_end: f64) -> Option<(f64, f64)> {
        let c0 = self.line.cross(x, xi) * self.side;
        let c1 = self.line.cross(x + d[0] * s_end, xi + d[1] * s_end) * self.side;
        let on0 = c0 >= -self.tiny;
        let on1 = c1 >= -self.tiny;
        match (on0, on1) {
            (true, true) => Some((0.0, s_end)),
            (false, false) => None,
            _ => {
                let s = (s_end * c0 / (c0 - c1)).clamp(0.0, s_end);
                if on0 { Some((0.0, s)) } else { Some((s, s_end)) }
            }
        }
    }

    fn magnitude(&self, x: f64, xi: f64) -> f64 {
        let [a, b] = self.line.dir;
        let t = ((x - self.line.point[0]) * a + (xi - self.line.point[1]) * b) / (a * a + b * b);
        self.j0 * (self.rate * t).exp()
    }
}

/// Read-only view of a kernel field during a sweep.
pub(crate) struct FieldView<'a> {
    mesh: &'a TriMesh,
    values: &'a [Node8],
}

impl FieldView<'_> {
    pub fn at(&self, c: usize, x: f64, xi: f64) -> f64 {
        self.mesh.interp(x, xi, |k| self.values[k][c])
    }
}

pub(crate) trait Goursat: Sync {
    fn characteristics(&self) -> [Characteristic; NC];
    fn rhs(&self, x: f64, xi: f64, f: &Node8) -> Node8;
    fn data(&self, c: usize, edge: Edge, x: f64, xi: f64, prev: &FieldView) -> f64;
    fn jumps(&self) -> Vec<Jump>;
}

/// Iteration controls for the kernel solvers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSettings {
    /// Nodes per mesh edge.
    pub n: usize,
    /// Max-norm change between sweeps that ends the iteration.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KernelSettings {
    fn default() -> Self {
        Self {
            n: 129,
            tol: 1e-9,
            max_iter: 200,
        }
    }
}

impl KernelSettings {
    pub fn validate(&self) -> Result<()> {
        if self.n < TriMesh::MIN_NODES {
            return Err(Error::invalid("kernels.n", format!("need at least {}", TriMesh::MIN_NODES)));
        }
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid("kernels.tol", "must be positive"));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("kernels.max_iter", "must be at least 1"));
        }
        Ok(())
    }
}

/// Where a node's characteristic leaves the triangle.
#[derive(Clone, Copy, Debug)]
struct Exit {
    s: f64,
    edge: Edge,
    point: [f64; 2],
}

fn find_exit(mesh: &TriMesh, x: f64, xi: f64, ch: &Characteristic) -> Option<Exit> {
    let sgn = if ch.forward { 1.0 } else { -1.0 };
    let dx = sgn * ch.dir[0];
    let dxi = sgn * ch.dir[1];
    let speed = dx.hypot(dxi);
    let tiny = 1e-12 * speed;
    let len = mesh.length;
    let mut cands: Vec<(f64, Edge)> = Vec::with_capacity(3);
    let rate = dxi - dx;
    if rate > tiny {
        cands.push(((x - xi).max(0.0) / rate, Edge::Diagonal));
    }
    if dxi < -tiny {
        cands.push((xi.max(0.0) / -dxi, Edge::Bottom));
    }
    if dx > tiny {
        cands.push(((len - x).max(0.0) / dx, Edge::Right));
    }
    let s_min = cands.iter().map(|c| c.0).fold(f64::INFINITY, f64::min);
    if !s_min.is_finite() {
        return None;
    }
    let tie = 1e-10 * len / speed;
    let ties = cands.iter().filter(|c| c.0 <= s_min + tie);
    let mut chosen = None;
    for &(s, edge) in ties {
        if ch.data_edges.contains(&edge) {
            chosen = Some((s, edge));
            break;
        }
        chosen.get_or_insert((s, edge));
    }
    let (s, edge) = chosen?;
    let mut point = [x + dx * s, xi + dxi * s];
    match edge {
        Edge::Diagonal => {
            let m = 0.5 * (point[0] + point[1]);
            point = [m, m];
        }
        Edge::Bottom => point[1] = 0.0,
        Edge::Right => point[0] = len,
    }
    point[0] = point[0].clamp(0.0, len);
    point[1] = point[1].clamp(0.0, point[0]);
    Some(Exit { s, edge, point })
}

/// Node-by-component characteristic exits, fixed for a given problem.
struct Plan {
    exits: Vec<[Exit; NC]>,
}

fn plan<P: Goursat>(problem: &P, mesh: &TriMesh) -> Result<Plan> {
    let chars = problem.characteristics();
    let nodes = mesh.nodes();
    let exits = nodes
        .iter()
        .map(|&(i, j)| {
            let (x, xi) = (mesh.coord(i), mesh.coord(j));
            let mut out = [Exit {
                s: 0.0,
                edge: Edge::Diagonal,
                point: [x, xi],
            }; NC];
            for (c, ch) in chars.iter().enumerate() {
                let e = find_exit(mesh, x, xi, ch).ok_or(Error::Characteristic { component: c, i, j })?;
                if !ch.data_edges.contains(&e.edge) {
                    return Err(Error::Characteristic { component: c, i, j });
                }
                out[c] = e;
            }
            Ok(out)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Plan { exits })
}

/// Raw output of the successive-approximation solve.
pub(crate) struct Solution {
    pub values: Vec<Node8>,
    pub sweep_diffs: Vec<f64>,
}

pub(crate) fn solve_goursat<P: Goursat>(problem: &P, mesh: &TriMesh, settings: &KernelSettings) -> Result<Solution> {
    settings.validate()?;
    let chars = problem.characteristics();
    let plan = plan(problem, mesh)?;
    let nodes = mesh.nodes();
    let h = mesh.h();

    let jumps = problem.jumps();
    let coords: Vec<(f64, f64)> = nodes.iter().map(|&(i, j)| (mesh.coord(i), mesh.coord(j))).collect();
    // Each known jump is split off as a singular part: the step in the
    // jumping component plus the ramps it induces in every component that
    // crosses the line (their gradients jump by the right-side jump over the
    // normal speed). What remains is C1 across the line and interpolates
    // well. The right side is linear, so the singular part's contribution is
    // a field of its own, switched on where a path is on the jump side.
    let singular: Vec<Vec<Node8>> = jumps
        .iter()
        .map(|jp| {
            let [a, b] = jp.line.dir;
            let norm = a.hypot(b);
            let nrm = [jp.side * b / norm, -jp.side * a / norm];
            coords
                .iter()
                .map(|&(x, xi)| {
                    let mut step = [0.0; NC];
                    step[jp.comp] = jp.magnitude(x, xi);
                    let dr = problem.rhs(x, xi, &step);
                    let dist = jp.side * jp.line.cross(x, xi) / norm;
                    let mut part = step;
                    for c in 0..NC {
                        let speed = chars[c].dir[0] * nrm[0] + chars[c].dir[1] * nrm[1];
                        if c != jp.comp && speed.abs() > 1e-9 * chars[c].dir[0].hypot(chars[c].dir[1]) {
                            part[c] += dr[c] / speed * dist;
                        }
                    }
                    part
                })
                .collect()
        })
        .collect();
    let jump_rhs: Vec<[Vec<f64>; NC]> = singular
        .iter()
        .map(|parts| {
            let mut out: [Vec<f64>; NC] = std::array::from_fn(|_| Vec::with_capacity(coords.len()));
            for (&(x, xi), part) in coords.iter().zip(parts) {
                let r = problem.rhs(x, xi, part);
                for c in 0..NC {
                    out[c].push(r[c]);
                }
            }
            out
        })
        .collect();
    let jump_uses: Vec<[bool; NC]> = jump_rhs
        .iter()
        .map(|r| std::array::from_fn(|c| r[c].iter().any(|&v| v != 0.0)))
        .collect();
    let jump_active: Vec<Vec<bool>> = jumps
        .iter()
        .map(|jp| coords.iter().map(|&(x, xi)| jp.active(x, xi)).collect())
        .collect();

    let mut values = vec![[0.0; NC]; mesh.len()];
    let mut diffs = Vec::new();
    for _ in 0..settings.max_iter {
        let smooth_rhs: Vec<Node8> = coords
            .par_iter()
            .zip(values.par_iter())
            .enumerate()
            .map(|(k, (&(x, xi), f))| {
                let mut g = *f;
                for (parts, act) in singular.iter().zip(&jump_active) {
                    if act[k] {
                        for c in 0..NC {
                            g[c] -= parts[k][c];
                        }
                    }
                }
                problem.rhs(x, xi, &g)
            })
            .collect();
        let rhs: [Vec<f64>; NC] = std::array::from_fn(|c| smooth_rhs.iter().map(|r| r[c]).collect());
        let prev = FieldView {
            mesh,
            values: &values,
        };
        let next: Vec<Node8> = coords
            .par_iter()
            .zip(plan.exits.par_iter())
            .map(|(&(x, xi), exits)| {
                let mut out = [0.0; NC];
                for c in 0..NC {
                    let e = &exits[c];
                    let data = problem.data(c, e.edge, e.point[0], e.point[1], &prev);
                    out[c] = if e.s > 0.0 {
                        let ch = &chars[c];
                        let sgn = if ch.forward { 1.0 } else { -1.0 };
                        let (dx, dxi) = (sgn * ch.dir[0], sgn * ch.dir[1]);
                        let along = |field: &[f64], a: f64, b: f64| {
                            let m = (((b - a) * dx.hypot(dxi) / h).ceil() as usize).max(1);
                            let ds = (b - a) / m as f64;
                            let mut acc = 0.0;
                            for k in 0..=m {
                                let w = if k == 0 || k == m { 0.5 } else { 1.0 };
                                let s = a + ds * k as f64;
                                let px = (x + dx * s).clamp(0.0, mesh.length);
                                let pxi = (xi + dxi * s).clamp(0.0, px);
                                acc += w * mesh.interp(px, pxi, |q| field[q]);
                            }
                            acc * ds
                        };
                        let mut acc = along(&rhs[c], 0.0, e.s);
                        // Jump contributions are integrated only over the
                        // part of the path on their side of the line, so the
                        // crossing point is resolved exactly.
                        for (q, jp) in jumps.iter().enumerate() {
                            if !jump_uses[q][c] {
                                continue;
                            }
                            if let Some((a, b)) = jp.active_span(x, xi, [dx, dxi], e.s) {
                                if b > a {
                                    acc += along(&jump_rhs[q][c], a, b);
                                }
                            }
                        }
                        data - sgn * acc
                    } else {
                        data
                    };
                }
                out
            })
            .collect();
        let diff = next
            .iter()
            .zip(&values)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).abs()))
            .fold(0.0_f64, f64::max);
        values = next;
        diffs.push(diff);
        if !diff.is_finite() {
            break;
        }
        if diff < settings.tol {
            impose_edges(problem, mesh, &plan, &mut values);
            return Ok(Solution {
                values,
                sweep_diffs: diffs,
            });
        }
    }
    Err(Error::NoConvergence {
        iterations: diffs.len(),
        last_diff: diffs.last().copied().unwrap_or(f64::NAN),
        tol: settings.tol,
    })
}

/// Overwrite every on-edge node with its data evaluated on the final field.
fn impose_edges<P: Goursat>(problem: &P, mesh: &TriMesh, plan: &Plan, values: &mut [Node8]) {
    // Edge data may reference other components' edge values, so two passes
    // settle the one level of dependency present in both systems.
    for _ in 0..2 {
        let snapshot = values.to_vec();
        let view = FieldView {
            mesh,
            values: &snapshot,
        };
        for (k, exits) in plan.exits.iter().enumerate() {
            for (c, e) in exits.iter().enumerate() {
                if e.s == 0.0 {
                    values[k][c] = problem.data(c, e.edge, e.point[0], e.point[1], &view);
                }
            }
        }
    }
}

/// Largest violation of the imposed edge data, skipping corners where two
/// data edges with different values meet.
fn boundary_violation<P: Goursat>(problem: &P, mesh: &TriMesh, values: &[Node8]) -> f64 {
    let chars = problem.characteristics();
    let view = FieldView { mesh, values };
    let len = mesh.length;
    let mut worst = 0.0_f64;
    for (k, &(i, j)) in mesh.nodes().iter().enumerate() {
        let (x, xi) = (mesh.coord(i), mesh.coord(j));
        for (c, ch) in chars.iter().enumerate() {
            let on: Vec<Edge> = Edge::ALL
                .into_iter()
                .filter(|e| ch.data_edges.contains(e))
                .filter(|e| match e {
                    Edge::Diagonal => i == j,
                    Edge::Bottom => j == 0,
                    Edge::Right => i == mesh.n - 1,
                })
                .collect();
            if on.len() != 1 {
                continue;
            }
            // Only nodes whose characteristic actually starts on that edge.
            let Some(exit) = find_exit(mesh, x, xi, ch) else { continue };
            if exit.s > 1e-12 * len || exit.edge != on[0] {
                continue;
            }
            let target = problem.data(c, on[0], x, xi, &view);
            worst = worst.max((values[k][c] - target).abs());
        }
    }
    worst
}

/// Residual norms of one kernel component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentResidual {
    pub name: String,
    pub max: f64,
    pub l2: f64,
    pub mean_abs: f64,
}

/// Finite-difference residual of a solved kernel system.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub components: Vec<ComponentResidual>,
    pub max: f64,
    /// Root mean square over all components and checked nodes.
    pub l2: f64,
    pub mean_abs: f64,
    pub boundary_violation: f64,
    pub interior_nodes: usize,
}

/// Mask half-width around discontinuity lines, in mesh spacings. Kernels
/// carry kinks along these lines that centered differences cannot resolve.
const JUMP_BAND: f64 = 2.5;
/// Floor on the mask half-width as a fraction of the segment length, so that
/// refinement studies compare residuals over the same subdomain.
const JUMP_BAND_FRAC: f64 = 0.08;

/// Pointwise interior residuals `(i, j, per-component |residual|)` on the
/// unmasked nodes.
fn residual_nodes<P: Goursat>(problem: &P, mesh: &TriMesh, values: &[Node8]) -> Vec<(usize, usize, Node8)> {
    let chars = problem.characteristics();
    let h = mesh.h();
    let jumps: Vec<JumpLine> = problem.jumps().iter().map(|j| j.line).collect();
    let band = (JUMP_BAND * h).max(JUMP_BAND_FRAC * mesh.length);
    let mut out = Vec::new();
    for i in 1..mesh.n - 1 {
        for j in 1..i {
            let (x, xi) = (mesh.coord(i), mesh.coord(j));
            if jumps.iter().any(|jl| jl.distance(x, xi) < band) {
                continue;
            }
            let f = &values[mesh.idx(i, j)];
            let r = problem.rhs(x, xi, f);
            let e = &values[mesh.idx(i + 1, j)];
            let w = &values[mesh.idx(i - 1, j)];
            let n = &values[mesh.idx(i, j + 1)];
            let s = &values[mesh.idx(i, j - 1)];
            let mut res = [0.0; NC];
            for c in 0..NC {
                let fx = (e[c] - w[c]) / (2.0 * h);
                let fxi = (n[c] - s[c]) / (2.0 * h);
                res[c] = (chars[c].dir[0] * fx + chars[c].dir[1] * fxi - r[c]).abs();
            }
            out.push((i, j, res));
        }
    }
    out
}

fn residual_report<P: Goursat>(problem: &P, mesh: &TriMesh, values: &[Node8], names: &[&str; NC]) -> ResidualReport {
    let mut sq = [0.0; NC];
    let mut abs = [0.0; NC];
    let mut max = [0.0_f64; NC];
    let nodes = residual_nodes(problem, mesh, values);
    let count = nodes.len();
    for (_, _, res) in &nodes {
        for c in 0..NC {
            sq[c] += res[c] * res[c];
            abs[c] += res[c];
            max[c] = max[c].max(res[c]);
        }
    }
    let denom = count.max(1) as f64;
    let components: Vec<ComponentResidual> = (0..NC)
        .map(|c| ComponentResidual {
            name: names[c].to_string(),
            max: max[c],
            l2: (sq[c] / denom).sqrt(),
            mean_abs: abs[c] / denom,
        })
        .collect();
    ResidualReport {
        max: max.iter().copied().fold(0.0, f64::max),
        l2: (sq.iter().sum::<f64>() / (denom * NC as f64)).sqrt(),
        mean_abs: abs.iter().sum::<f64>() / (denom * NC as f64),
        boundary_violation: boundary_violation(problem, mesh, values),
        interior_nodes: count,
        components,
    }
}

/// Scaled coupling blocks evaluated at one position.
#[derive(Clone, Copy)]
struct Blocks {
    ww: Mat2,
    wv: Mat2,
    vw: Mat2,
    vv: Mat2,
}

impl Blocks {
    fn at(lc: &LinearCoeffs, x: f64) -> Self {
        Self {
            ww: lc.bar_ww(),
            wv: lc.bar_wv(x),
            vw: lc.bar_vw(x),
            vv: lc.bar_vv(x),
        }
    }
}

#[inline]
fn k_at(f: &Node8, i: usize, j: usize) -> f64 {
    f[2 * i + j]
}

#[inline]
fn l_at(f: &Node8, i: usize, j: usize) -> f64 {
    f[4 + 2 * i + j]
}

/// Controller kernels `K`, `L` on `0 <= xi <= x <= L`:
///
/// `(mu_i d/dx - eps_j d/dxi) K_ij = [K S++ + L S-+]_ij(xi)`,
/// `(mu_i d/dx + mu_j d/dxi) L_ij = [K S+- + L S--]_ij(xi)`.
struct ControlProblem<'a> {
    lc: &'a LinearCoeffs,
}

impl Goursat for ControlProblem<'_> {
    fn characteristics(&self) -> [Characteristic; NC] {
        let [e1, e2] = self.lc.eps;
        let [m1, m2] = self.lc.mu;
        const DIAG: &[Edge] = &[Edge::Diagonal];
        let k = |mi: f64, ej: f64| Characteristic {
            dir: [mi, -ej],
            forward: false,
            data_edges: DIAG,
        };
        [
            k(m1, e1),
            k(m1, e2),
            k(m2, e1),
            k(m2, e2),
            Characteristic {
                dir: [m1, m1],
                forward: false,
                data_edges: &[Edge::Bottom],
            },
            Characteristic {
                dir: [m1, m2],
                forward: false,
                data_edges: &[Edge::Diagonal, Edge::Bottom],
            },
            Characteristic {
                dir: [m2, m1],
                forward: true,
                data_edges: &[Edge::Diagonal, Edge::Right],
            },
            Characteristic {
                dir: [m2, m2],
                forward: false,
                data_edges: &[Edge::Bottom],
            },
        ]
    }

    fn rhs(&self, _x: f64, xi: f64, f: &Node8) -> Node8 {
        let b = Blocks::at(self.lc, xi);
        let mut out = [0.0; NC];
        for i in 0..2 {
            for j in 0..2 {
                let mut rk = 0.0;
                let mut rl = 0.0;
                for k in 0..2 {
                    rk += k_at(f, i, k) * b.ww[k][j] + l_at(f, i, k) * b.vw[k][j];
                    rl += k_at(f, i, k) * b.wv[k][j] + l_at(f, i, k) * b.vv[k][j];
                }
                out[2 * i + j] = rk;
                out[4 + 2 * i + j] = rl;
            }
        }
        out
    }

    fn data(&self, c: usize, edge: Edge, x: f64, _xi: f64, prev: &FieldView) -> f64 {
        let lc = self.lc;
        let [e1, e2] = lc.eps;
        let [m1, m2] = lc.mu;
        let [ks, kf] = lc.k;
        match (c, edge) {
            (0..=3, Edge::Diagonal) => {
                let (i, j) = (c / 2, c % 2);
                -lc.bar_vw(x)[i][j] / (lc.eps[j] + lc.mu[i])
            }
            (5, Edge::Diagonal) => -lc.bar_vv(x)[0][1] / (m1 - m2),
            (6, Edge::Diagonal) => -lc.bar_vv(x)[1][0] / (m2 - m1),
            (4, Edge::Bottom) => e1 * ks * prev.at(0, x, 0.0) / m1,
            (5, Edge::Bottom) => e2 * kf * prev.at(1, x, 0.0) / m2,
            (7, Edge::Bottom) => e2 * kf * prev.at(3, x, 0.0) / m2,
            (6, Edge::Right) => 0.0,
            _ => unreachable!("component {c} has no data on {edge:?}"),
        }
    }

    fn jumps(&self) -> Vec<Jump> {
        let lc = self.lc;
        let [_, e2] = lc.eps;
        let [m1, m2] = lc.mu;
        let len = lc.length;
        // Neither L12 nor L21 couples to itself, so both jumps are constant.
        let k12 = -lc.bar_vw(0.0)[0][1] / (e2 + m1);
        let j12 = -lc.bar_vv(0.0)[0][1] / (m1 - m2) - e2 * lc.k[1] * k12 / m2;
        let j21 = -lc.bar_vv(len)[1][0] / (m2 - m1);
        vec![
            Jump::new(
                5,
                JumpLine {
                    point: [0.0, 0.0],
                    dir: [m1, m2],
                },
                j12,
                0.0,
                len,
            ),
            Jump::new(
                6,
                JumpLine {
                    point: [len, len],
                    dir: [m2, m1],
                },
                j21,
                0.0,
                len,
            ),
        ]
    }
}

/// How observer coordinates `(x, xi)` with `x <= xi` map onto the mesh.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObserverFrame {
    /// `(L - x, L - xi)`.
    Reflected,
    /// `(xi, x)`.
    Swapped,
}

impl ObserverFrame {
    /// Mesh point of an observer-domain point.
    pub fn to_mesh(self, len: f64, x: f64, xi: f64) -> (f64, f64) {
        match self {
            ObserverFrame::Reflected => (len - x, len - xi),
            ObserverFrame::Swapped => (xi, x),
        }
    }

    /// Observer-domain point of a mesh point.
    pub fn to_domain(self, len: f64, p: f64, q: f64) -> (f64, f64) {
        match self {
            ObserverFrame::Reflected => (len - p, len - q),
            ObserverFrame::Swapped => (q, p),
        }
    }

    fn map_dir(self, d: [f64; 2]) -> [f64; 2] {
        match self {
            ObserverFrame::Reflected => [-d[0], -d[1]],
            ObserverFrame::Swapped => [d[1], d[0]],
        }
    }

    /// Mesh edge carrying the observer edge `x = 0`.
    fn left(self) -> Edge {
        match self {
            ObserverFrame::Reflected => Edge::Right,
            ObserverFrame::Swapped => Edge::Bottom,
        }
    }

    /// Mesh edge carrying the observer edge `xi = L`.
    fn top(self) -> Edge {
        match self {
            ObserverFrame::Reflected => Edge::Bottom,
            ObserverFrame::Swapped => Edge::Right,
        }
    }
}

/// Observer kernels `M`, `N` on `0 <= x <= xi <= L`, with `D = diag(S++)`:
///
/// `E M_x + M_xi E = S++ M - M D + S+-(x) N`,
/// `U N_x - N_xi E = N D - S-+(x) M - S--(x) N`,
///
/// where `E = diag(eps)` and `U = diag(mu)`.
struct ObserverProblem<'a> {
    lc: &'a LinearCoeffs,
    frame: ObserverFrame,
    edges: ObserverEdges,
}

struct ObserverEdges {
    left: &'static [Edge],
    diag_left: &'static [Edge],
    diag_top: &'static [Edge],
}

impl<'a> ObserverProblem<'a> {
    fn new(lc: &'a LinearCoeffs, frame: ObserverFrame) -> Self {
        let edges = match frame {
            ObserverFrame::Reflected => ObserverEdges {
                left: &[Edge::Right],
                diag_left: &[Edge::Diagonal, Edge::Right],
                diag_top: &[Edge::Diagonal, Edge::Bottom],
            },
            ObserverFrame::Swapped => ObserverEdges {
                left: &[Edge::Bottom],
                diag_left: &[Edge::Diagonal, Edge::Bottom],
                diag_top: &[Edge::Diagonal, Edge::Right],
            },
        };
        Self { lc, frame, edges }
    }

    fn at_domain(&self, prev: &FieldView, c: usize, x: f64, xi: f64) -> f64 {
        let (p, q) = self.frame.to_mesh(self.lc.length, x, xi);
        prev.at(c, p, q.min(p))
    }
}

impl Goursat for ObserverProblem<'_> {
    fn characteristics(&self) -> [Characteristic; NC] {
        let [e1, e2] = self.lc.eps;
        let [m1, m2] = self.lc.mu;
        let f = self.frame;
        const DIAG: &[Edge] = &[Edge::Diagonal];
        let n = |mi: f64, ej: f64| Characteristic {
            dir: f.map_dir([mi, -ej]),
            forward: true,
            data_edges: DIAG,
        };
        [
            Characteristic {
                dir: f.map_dir([e1, e1]),
                forward: false,
                data_edges: self.edges.left,
            },
            Characteristic {
                dir: f.map_dir([e1, e2]),
                forward: false,
                data_edges: self.edges.diag_left,
            },
            Characteristic {
                dir: f.map_dir([e2, e1]),
                forward: true,
                data_edges: self.edges.diag_top,
            },
            Characteristic {
                dir: f.map_dir([e2, e2]),
                forward: false,
                data_edges: self.edges.left,
            },
            n(m1, e1),
            n(m1, e2),
            n(m2, e1),
            n(m2, e2),
        ]
    }

    fn rhs(&self, p: f64, q: f64, f: &Node8) -> Node8 {
        let (x, _) = self.frame.to_domain(self.lc.length, p, q);
        let b = Blocks::at(self.lc, x);
        let d = [b.ww[0][0], b.ww[1][1]];
        let mut out = [0.0; NC];
        for i in 0..2 {
            for j in 0..2 {
                let mut rm = -k_at(f, i, j) * d[j];
                let mut rn = l_at(f, i, j) * d[j];
                for k in 0..2 {
                    rm += b.ww[i][k] * k_at(f, k, j) + b.wv[i][k] * l_at(f, k, j);
                    rn -= b.vw[i][k] * k_at(f, k, j) + b.vv[i][k] * l_at(f, k, j);
                }
                out[2 * i + j] = rm;
                out[4 + 2 * i + j] = rn;
            }
        }
        out
    }

    fn data(&self, c: usize, edge: Edge, p: f64, q: f64, prev: &FieldView) -> f64 {
        let lc = self.lc;
        let (x, xi) = self.frame.to_domain(lc.length, p, q);
        let [e1, e2] = lc.eps;
        let [ks, kf] = lc.k;
        let ww = lc.bar_ww();
        let left = self.frame.left();
        let top = self.frame.top();
        match (c, edge) {
            (4..=7, Edge::Diagonal) => {
                let (i, j) = ((c - 4) / 2, (c - 4) % 2);
                lc.bar_vw(x)[i][j] / (lc.eps[j] + lc.mu[i])
            }
            (1, Edge::Diagonal) => ww[0][1] / (e2 - e1),
            (2, Edge::Diagonal) => -ww[1][0] / (e2 - e1),
            (0, e) if e == left => ks * self.at_domain(prev, 4, 0.0, xi),
            (1, e) if e == left => ks * self.at_domain(prev, 5, 0.0, xi),
            (3, e) if e == left => kf * self.at_domain(prev, 7, 0.0, xi),
            (2, e) if e == top => 0.0,
            _ => unreachable!("component {c} has no data on {edge:?}"),
        }
    }

    fn jumps(&self) -> Vec<Jump> {
        let lc = self.lc;
        let [e1, e2] = lc.eps;
        let [m1, _] = lc.mu;
        let len = lc.length;
        let ww = lc.bar_ww();
        let frame = self.frame;
        let line = |pt: [f64; 2], d: [f64; 2]| {
            let (p, q) = frame.to_mesh(len, pt[0], pt[1]);
            JumpLine {
                point: [p, q],
                dir: frame.map_dir(d),
            }
        };
        // M12 and M21 carry self-coupling S++_ii - S++_jj along their lines.
        let n12 = lc.bar_vw(0.0)[0][1] / (e2 + m1);
        let j12 = ww[0][1] / (e2 - e1) - lc.k[0] * n12;
        let j21 = -ww[1][0] / (e2 - e1);
        let rate = ww[0][0] - ww[1][1];
        vec![
            Jump::new(1, line([0.0, 0.0], [e1, e2]), j12, rate, len),
            Jump::new(2, line([len, len], [e2, e1]), j21, -rate, len),
        ]
    }
}

/// Solved controller kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub mesh: TriMesh,
    /// Per-node `[K11, K12, K21, K22, L11, L12, L21, L22]` in packed order (1/m).
    pub values: Vec<Node8>,
    /// `theta(x_i) = mu_1 L21(x_i, 0) - eps_1 k_s K21(x_i, 0)` (1/s).
    pub theta: Vec<f64>,
    pub sweep_diffs: Vec<f64>,
    pub residual: Option<ResidualReport>,
}

impl KernelSet {
    /// Kernel set with caller-supplied node values; gains are derived from them.
    pub fn from_values(lc: &LinearCoeffs, mesh: TriMesh, values: Vec<Node8>) -> Result<Self> {
        if values.len() != mesh.len() {
            return Err(Error::GridMismatch(format!(
                "{} kernel nodes for a mesh of {}",
                values.len(),
                mesh.len()
            )));
        }
        let theta = (0..mesh.n)
            .map(|i| {
                let f = &values[mesh.idx(i, 0)];
                lc.mu[0] * f[6] - lc.eps[0] * lc.k[0] * f[2]
            })
            .collect();
        Ok(Self {
            mesh,
            values,
            theta,
            sweep_diffs: Vec::new(),
            residual: None,
        })
    }

    pub fn get(&self, c: usize, i: usize, j: usize) -> f64 {
        self.values[self.mesh.idx(i, j)][c]
    }

    pub fn at(&self, c: usize, x: f64, xi: f64) -> f64 {
        self.mesh.interp(x, xi, |k| self.values[k][c])
    }

    /// Component `c` along the outlet edge `x = L`, indexed by `xi_j`.
    pub fn outlet_row(&self, c: usize) -> Vec<f64> {
        let i = self.mesh.n - 1;
        (0..self.mesh.n).map(|j| self.get(c, i, j)).collect()
    }

    pub fn iterations(&self) -> usize {
        self.sweep_diffs.len()
    }
}

/// Solved observer kernels, stored on the mesh of `frame`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObserverKernelSet {
    pub mesh: TriMesh,
    pub frame: ObserverFrame,
    /// Per-node `[M11, M12, M21, M22, N11, N12, N21, N22]` in packed order (1/m).
    pub values: Vec<Node8>,
    /// `lambda(x_k) = M21(0, x_k) - k_f N21(0, x_k)` (1/m).
    pub lambda: Vec<f64>,
    /// `P(x_k) = M(x_k, L) diag(eps)`, row-major 2x2 (1/s).
    pub p_gain: Vec<Mat2>,
    /// `Q(x_k) = N(x_k, L) diag(eps)` (1/s).
    pub q_gain: Vec<Mat2>,
    pub sweep_diffs: Vec<f64>,
    pub residual: Option<ResidualReport>,
}

impl ObserverKernelSet {
    pub fn from_values(lc: &LinearCoeffs, mesh: TriMesh, frame: ObserverFrame, values: Vec<Node8>) -> Result<Self> {
        if values.len() != mesh.len() {
            return Err(Error::GridMismatch(format!(
                "{} kernel nodes for a mesh of {}",
                values.len(),
                mesh.len()
            )));
        }
        let len = mesh.length;
        let mut set = Self {
            mesh,
            frame,
            values,
            lambda: Vec::new(),
            p_gain: Vec::new(),
            q_gain: Vec::new(),
            sweep_diffs: Vec::new(),
            residual: None,
        };
        let [e1, e2] = lc.eps;
        let mut lambda = Vec::with_capacity(mesh.n);
        let mut p_gain = Vec::with_capacity(mesh.n);
        let mut q_gain = Vec::with_capacity(mesh.n);
        for k in 0..mesh.n {
            let x = mesh.coord(k);
            let at = |c: usize, a: f64, b: f64| set.at_domain(c, a, b);
            lambda.push(at(2, 0.0, x) - lc.k[1] * at(6, 0.0, x));
            p_gain.push([
                [at(0, x, len) * e1, at(1, x, len) * e2],
                [at(2, x, len) * e1, at(3, x, len) * e2],
            ]);
            q_gain.push([
                [at(4, x, len) * e1, at(5, x, len) * e2],
                [at(6, x, len) * e1, at(7, x, len) * e2],
            ]);
        }
        set.lambda = lambda;
        set.p_gain = p_gain;
        set.q_gain = q_gain;
        Ok(set)
    }

    /// Component `c` at observer-domain point `(x, xi)`, `x <= xi`.
    pub fn at_domain(&self, c: usize, x: f64, xi: f64) -> f64 {
        let (p, q) = self.frame.to_mesh(self.mesh.length, x, xi);
        self.mesh.interp(p, q.min(p), |k| self.values[k][c])
    }

    /// Component `c` at the mesh node that represents observer node `(a, b)`
    /// with `a <= b` on the uniform lattice.
    pub fn at_domain_node(&self, c: usize, a: usize, b: usize) -> f64 {
        let last = self.mesh.n - 1;
        let (i, j) = match self.frame {
            ObserverFrame::Reflected => (last - a, last - b),
            ObserverFrame::Swapped => (b, a),
        };
        self.values[self.mesh.idx(i, j)][c]
    }

    pub fn iterations(&self) -> usize {
        self.sweep_diffs.len()
    }
}

pub fn solve_control_kernels(lc: &LinearCoeffs, mesh: TriMesh, settings: &KernelSettings) -> Result<KernelSet> {
    check_mesh(lc, &mesh)?;
    let problem = ControlProblem { lc };
    let sol = solve_goursat(&problem, &mesh, &KernelSettings { n: mesh.n, ..*settings })?;
    let residual = residual_report(&problem, &mesh, &sol.values, &CONTROL_NAMES);
    let mut set = KernelSet::from_values(lc, mesh, sol.values)?;
    set.sweep_diffs = sol.sweep_diffs;
    set.residual = Some(residual);
    Ok(set)
}

/// Observer kernels solved in the reflected frame.
pub fn solve_observer_kernels(lc: &LinearCoeffs, mesh: TriMesh, settings: &KernelSettings) -> Result<ObserverKernelSet> {
    solve_observer_kernels_in(lc, mesh, settings, ObserverFrame::Reflected)
}

pub fn solve_observer_kernels_in(
    lc: &LinearCoeffs,
    mesh: TriMesh,
    settings: &KernelSettings,
    frame: ObserverFrame,
) -> Result<ObserverKernelSet> {
    check_mesh(lc, &mesh)?;
    let problem = ObserverProblem::new(lc, frame);
    let sol = solve_goursat(&problem, &mesh, &KernelSettings { n: mesh.n, ..*settings })?;
    let residual = residual_report(&problem, &mesh, &sol.values, &OBSERVER_NAMES);
    let mut set = ObserverKernelSet::from_values(lc, mesh, frame, sol.values)?;
    set.sweep_diffs = sol.sweep_diffs;
    set.residual = Some(residual);
    Ok(set)
}

fn check_mesh(lc: &LinearCoeffs, mesh: &TriMesh) -> Result<()> {
    if (mesh.length - lc.length).abs() > 1e-9 * lc.length {
        return Err(Error::GridMismatch(format!(
            "mesh length {} differs from segment length {}",
            mesh.length, lc.length
        )));
    }
    Ok(())
}

/// Residual report of arbitrary controller kernel values.
pub fn control_kernel_residual(ks: &KernelSet, lc: &LinearCoeffs) -> ResidualReport {
    residual_report(&ControlProblem { lc }, &ks.mesh, &ks.values, &CONTROL_NAMES)
}

/// Pointwise controller-kernel residuals on the checked interior nodes.
pub fn control_residual_field(ks: &KernelSet, lc: &LinearCoeffs) -> Vec<(usize, usize, Node8)> {
    residual_nodes(&ControlProblem { lc }, &ks.mesh, &ks.values)
}

/// Residual report of arbitrary observer kernel values.
pub fn observer_kernel_residual(oks: &ObserverKernelSet, lc: &LinearCoeffs) -> ResidualReport {
    residual_report(&ObserverProblem::new(lc, oks.frame), &oks.mesh, &oks.values, &OBSERVER_NAMES)
}

/// Bumped whenever the discretization changes, so stale cache files miss.
const SOLVER_REVISION: u32 = 2;

/// Stable hash of everything that determines a kernel solve.
pub fn cache_key(kind: &str, lc: &LinearCoeffs, settings: &KernelSettings) -> String {
    let payload = serde_json::to_vec(&(kind, SOLVER_REVISION, lc, settings)).expect("coefficients serialize");
    hex::encode(Sha256::digest(&payload))
}

#[derive(Serialize, Deserialize)]
struct CacheRecord<T> {
    key: String,
    kind: String,
    names: [String; NC],
    kernels: T,
}

fn cache_path(dir: &Path, kind: &str, key: &str) -> PathBuf {
    dir.join(format!("{kind}-{}.json", &key[..16]))
}

fn load_cached<T: for<'de> Deserialize<'de>>(path: &Path, key: &str) -> Option<T> {
    let text = std::fs::read_to_string(path).ok()?;
    let rec: CacheRecord<T> = serde_json::from_str(&text).ok()?;
    (rec.key == key).then_some(rec.kernels)
}

fn store<T: Serialize>(path: &Path, kind: &str, key: &str, names: &[&str; NC], kernels: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let rec = CacheRecord {
        key: key.to_string(),
        kind: kind.to_string(),
        names: names.map(String::from),
        kernels,
    };
    let text = serde_json::to_string(&rec).map_err(|e| Error::Config(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Solve controller kernels, reusing a cached solution under `cache_dir`.
pub fn control_kernels_cached(lc: &LinearCoeffs, settings: &KernelSettings, cache_dir: Option<&Path>) -> Result<KernelSet> {
    let mesh = TriMesh::new(settings.n, lc.length)?;
    let Some(dir) = cache_dir else {
        return solve_control_kernels(lc, mesh, settings);
    };
    let key = cache_key("control", lc, settings);
    let path = cache_path(dir, "control", &key);
    if let Some(ks) = load_cached(&path, &key) {
        return Ok(ks);
    }
    let ks = solve_control_kernels(lc, mesh, settings)?;
    store(&path, "control", &key, &CONTROL_NAMES, &ks)?;
    Ok(ks)
}

/// Solve observer kernels, reusing a cached solution under `cache_dir`.
pub fn observer_kernels_cached(
    lc: &LinearCoeffs,
    settings: &KernelSettings,
    cache_dir: Option<&Path>,
) -> Result<ObserverKernelSet> {
    let mesh = TriMesh::new(settings.n, lc.length)?;
    let Some(dir) = cache_dir else {
        return solve_observer_kernels(lc, mesh, settings);
    };
    let key = cache_key("observer", lc, settings);
    let path = cache_path(dir, "observer", &key);
    if let Some(oks) = load_cached(&path, &key) {
        return Ok(oks);
    }
    let oks = solve_observer_kernels(lc, mesh, settings)?;
    store(&path, "observer", &key, &OBSERVER_NAMES, &oks)?;
    Ok(oks)
}

/// Linear interpolation of a uniformly sampled edge profile on `[0, L]`.
pub fn sample_edge(profile: &[f64], length: f64, x: f64) -> f64 {
    let n = profile.len();
    let u = (x / length * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i = (u.floor() as usize).min(n - 2);
    let f = u - i as f64;
    profile[i] + f * (profile[i + 1] - profile[i])
}
