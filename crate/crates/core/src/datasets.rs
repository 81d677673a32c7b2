//! Toy conditional mixtures and maze trajectories.

use std::path::Path;
use std::sync::{Arc, OnceLock};

use rand::distributions::{Distribution, WeightedIndex};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flows::{GaussianMixture, MixtureComponent, MixtureFlow};
use crate::par::Execution;
use crate::rng;
use crate::schedules::DiffusionSchedule;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Support {
    /// Noise on `x` only; `z` takes the anchor values exactly.
    Discrete,
    /// Independent noise on both `z` and `x`.
    Continuous,
}

/// Equal-weight anchors `(z, x)` blurred by isotropic Gaussian noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySpec {
    pub support: Support,
    pub anchors: Vec<(f64, f64)>,
    pub noise_sigma: f64,
    pub count: usize,
}

impl Default for ToySpec {
    fn default() -> Self {
        ToySpec {
            support: Support::Discrete,
            anchors: vec![(0.0, -1.0), (1.0, 0.0), (1.0, 1.0)],
            noise_sigma: 0.1,
            count: 100_000,
        }
    }
}

impl ToySpec {
    pub fn discrete() -> Self {
        ToySpec::default()
    }

    pub fn continuous() -> Self {
        ToySpec {
            support: Support::Continuous,
            ..ToySpec::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.anchors.is_empty() {
            return Err(Error::InvalidArgument("toy spec needs at least one anchor".into()));
        }
        if self.anchors.iter().any(|(z, x)| !z.is_finite() || !x.is_finite()) {
            return Err(Error::InvalidArgument("toy anchors must be finite".into()));
        }
        // zero noise is allowed: draws then reproduce the anchors exactly
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> (f64, f64) {
        let (z, x) = self.anchors[rng.gen_range(0..self.anchors.len())];
        let x = x + self.noise_sigma * rng::normal(rng);
        match self.support {
            Support::Discrete => (z, x),
            Support::Continuous => (z + self.noise_sigma * rng::normal(rng), x),
        }
    }

    /// Distinct anchor conditions in increasing order.
    pub fn conditions(&self) -> Vec<f64> {
        let mut zs: Vec<f64> = self.anchors.iter().map(|a| a.0).collect();
        zs.sort_by(f64::total_cmp);
        zs.dedup();
        zs
    }

    /// The exact law of `x` given `z`.
    ///
    /// For discrete support `z` must be an anchor condition. For continuous
    /// support the anchors are reweighted by the likelihood of `z`.
    pub fn conditional_mixture(&self, z: f64) -> Result<GaussianMixture> {
        self.validate()?;
        let var = self.noise_sigma * self.noise_sigma;
        if var == 0.0 {
            return Err(Error::InvalidMixture("zero-noise toy data has no density".into()));
        }
        let weights: Vec<f64> = match self.support {
            Support::Discrete => self.anchors.iter().map(|a| f64::from(u8::from(a.0 == z))).collect(),
            Support::Continuous => {
                let logs: Vec<f64> = self.anchors.iter().map(|a| -(z - a.0).powi(2) / (2.0 * var)).collect();
                let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                logs.iter().map(|l| (l - top).exp()).collect()
            }
        };
        let total: f64 = weights.iter().sum();
        if total == 0.0 {
            return Err(Error::InvalidArgument(format!(
                "z = {z} is not an anchor condition of the discrete toy data"
            )));
        }
        let components = self
            .anchors
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w > 0.0)
            .map(|(a, &w)| MixtureComponent {
                weight: w / total,
                mean: vec![a.1],
                variance: var,
            })
            .collect();
        GaussianMixture::new(components)
    }

    /// Ideal flow of the conditional law, indexed by `z`.
    pub fn ideal_flow(&self, schedule: DiffusionSchedule) -> Result<MixtureFlow> {
        self.validate()?;
        let spec = self.clone();
        Ok(MixtureFlow::conditional(1, move |z| spec.conditional_mixture(z[0]), schedule))
    }
}

/// `spec.count` draws; draw `i` uses stream `i` of `seed`.
pub fn sample_toy(spec: &ToySpec, seed: u64, exec: Execution) -> Result<Vec<(f64, f64)>> {
    spec.validate()?;
    Ok(exec.map(spec.count, |i| spec.draw(&mut rng::stream(seed, i as u64))))
}

pub type Cell = (usize, usize);

/// A rectangular maze on a cell lattice.
///
/// Text form: a `(2R+1) x (2C+1)` character grid where cells sit at odd
/// coordinates and the characters between them are passages (`.`) or walls
/// (`#`). Exactly one cell is marked `G`, the goal. Every cell must reach it.
#[derive(Clone, Debug)]
pub struct Maze {
    rows: usize,
    cols: usize,
    // east[r * cols + c]: passage between (r, c) and (r, c + 1)
    east: Vec<bool>,
    south: Vec<bool>,
    goal: Cell,
    paths: Vec<OnceLock<Arc<[MazePath]>>>,
}

const BUILTIN_MAZE: &str = include_str!("../data/maze.txt");

impl Maze {
    /// The 8x8 maze shipped with the crate.
    pub fn builtin() -> Self {
        Maze::from_text(BUILTIN_MAZE).expect("bundled maze is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Maze::from_text(&std::fs::read_to_string(path)?)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let lines: Vec<&[u8]> = text
            .lines()
            .map(str::trim_end)
            .filter(|l| !l.is_empty())
            .map(str::as_bytes)
            .collect();
        let height = lines.len();
        let width = lines.first().map_or(0, |l| l.len());
        if height < 3 || width < 3 || height.is_multiple_of(2) || width.is_multiple_of(2) {
            return Err(Error::InvalidMaze(format!(
                "grid must have odd dimensions of at least 3x3, got {height}x{width}"
            )));
        }
        if let Some(i) = lines.iter().position(|l| l.len() != width) {
            return Err(Error::InvalidMaze(format!("line {} has a different width", i + 1)));
        }
        let (rows, cols) = (height / 2, width / 2);
        let mut goal = None;
        for r in 0..rows {
            for c in 0..cols {
                match lines[2 * r + 1][2 * c + 1] {
                    b'.' => {}
                    b'G' if goal.is_none() => goal = Some((r, c)),
                    b'G' => return Err(Error::InvalidMaze("more than one goal cell".into())),
                    other => {
                        return Err(Error::InvalidMaze(format!(
                            "cell ({r}, {c}) must be `.` or `G`, found `{}`",
                            other as char
                        )))
                    }
                }
            }
        }
        let goal = goal.ok_or_else(|| Error::InvalidMaze("no goal cell `G`".into()))?;
        let open = |y: usize, x: usize| lines[y][x] != b'#';
        let mut east = vec![false; rows * cols];
        let mut south = vec![false; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                east[r * cols + c] = c + 1 < cols && open(2 * r + 1, 2 * c + 2);
                south[r * cols + c] = r + 1 < rows && open(2 * r + 2, 2 * c + 1);
            }
        }
        let maze = Maze {
            rows,
            cols,
            east,
            south,
            goal,
            paths: (0..rows * cols).map(|_| OnceLock::new()).collect(),
        };
        maze.check_connected()?;
        Ok(maze)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn goal(&self) -> Cell {
        self.goal
    }

    pub fn neighbors(&self, (r, c): Cell) -> impl Iterator<Item = Cell> + '_ {
        let i = r * self.cols + c;
        let right = self.east[i].then_some((r, c + 1));
        let down = self.south[i].then_some((r + 1, c));
        let left = (c > 0 && self.east[i - 1]).then(|| (r, c - 1));
        let up = (r > 0 && self.south[i - self.cols]).then(|| (r - 1, c));
        [right, down, left, up].into_iter().flatten()
    }

    /// Cell center in maze coordinates: `(column + 0.5, row + 0.5)`.
    pub fn center(&self, (r, c): Cell) -> [f64; 2] {
        [c as f64 + 0.5, r as f64 + 0.5]
    }

    fn check_connected(&self) -> Result<()> {
        let mut seen = vec![false; self.rows * self.cols];
        let mut stack = vec![self.goal];
        seen[self.goal.0 * self.cols + self.goal.1] = true;
        while let Some(cell) = stack.pop() {
            for n in self.neighbors(cell) {
                let i = n.0 * self.cols + n.1;
                if !seen[i] {
                    seen[i] = true;
                    stack.push(n);
                }
            }
        }
        match seen.iter().position(|&s| !s) {
            Some(i) => Err(Error::Unreachable((i / self.cols, i % self.cols))),
            None => Ok(()),
        }
    }

    fn check_cell(&self, cell: Cell) -> Result<()> {
        if cell.0 >= self.rows || cell.1 >= self.cols {
            return Err(Error::InvalidArgument(format!(
                "cell {cell:?} is outside the {}x{} maze",
                self.rows, self.cols
            )));
        }
        Ok(())
    }

    /// Memoized [`enumerate_maze_paths`].
    pub fn paths_from(&self, start: Cell) -> Result<Arc<[MazePath]>> {
        self.check_cell(start)?;
        let slot = &self.paths[start.0 * self.cols + start.1];
        if let Some(p) = slot.get() {
            return Ok(p.clone());
        }
        let fresh: Arc<[MazePath]> = enumerate_maze_paths(self, start)?.into();
        Ok(slot.get_or_init(|| fresh).clone())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MazePath {
    pub cells: Vec<Cell>,
}

impl MazePath {
    /// Number of moves.
    pub fn len(&self) -> usize {
        self.cells.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.cells.len() == 1
    }
}

/// All simple paths from `start` to the goal, shortest first.
pub fn enumerate_maze_paths(maze: &Maze, start: Cell) -> Result<Vec<MazePath>> {
    fn walk(maze: &Maze, cell: Cell, visited: &mut Vec<bool>, trail: &mut Vec<Cell>, out: &mut Vec<MazePath>) {
        if cell == maze.goal {
            out.push(MazePath { cells: trail.clone() });
            return;
        }
        for n in maze.neighbors(cell) {
            let i = n.0 * maze.cols + n.1;
            if !visited[i] {
                visited[i] = true;
                trail.push(n);
                walk(maze, n, visited, trail, out);
                trail.pop();
                visited[i] = false;
            }
        }
    }

    maze.check_cell(start)?;
    let mut visited = vec![false; maze.rows * maze.cols];
    visited[start.0 * maze.cols + start.1] = true;
    let mut out = Vec::new();
    walk(maze, start, &mut visited, &mut vec![start], &mut out);
    if out.is_empty() {
        return Err(Error::Unreachable(start));
    }
    out.sort_by_key(MazePath::len);
    Ok(out)
}

/// Selection probabilities `exp(-(len - len_min)) / Z`.
pub fn path_probabilities(paths: &[MazePath]) -> Vec<f64> {
    let shortest = paths.iter().map(MazePath::len).min().unwrap_or(0);
    let w: Vec<f64> = paths.iter().map(|p| (-((p.len() - shortest) as f64)).exp()).collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

/// Start-column law `exp(-c/2) + exp(-(C-1-c)/2)`, normalized: starts
/// cluster at the left and right edges.
pub fn column_probabilities(cols: usize) -> Vec<f64> {
    let last = cols.saturating_sub(1) as f64;
    let w: Vec<f64> = (0..cols)
        .map(|c| {
            let c = c as f64;
            (-c / 2.0).exp() + (-(last - c) / 2.0).exp()
        })
        .collect();
    let total: f64 = w.iter().sum();
    w.iter().map(|x| x / total).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct MazeTrajectorySpec {
    pub path_points: usize,
    /// Variance of the Gaussian jitter added to each control point.
    pub bezier_noise: f64,
}

impl Default for MazeTrajectorySpec {
    fn default() -> Self {
        MazeTrajectorySpec {
            path_points: 64,
            bezier_noise: 0.04,
        }
    }
}

/// A maze layout together with the trajectory settings.
#[derive(Clone, Debug)]
pub struct MazeSpec {
    pub maze: Maze,
    pub trajectory: MazeTrajectorySpec,
}

impl MazeSpec {
    pub fn builtin() -> Self {
        MazeSpec {
            maze: Maze::builtin(),
            trajectory: MazeTrajectorySpec::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.trajectory;
        if t.path_points < 2 {
            return Err(Error::InvalidArgument("path_points must be at least 2".into()));
        }
        if !(t.bezier_noise >= 0.0 && t.bezier_noise.is_finite()) {
            return Err(Error::InvalidArgument("bezier_noise must be finite and non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MazeTrajectory {
    /// Center of the start cell (the condition `z`).
    pub start: [f64; 2],
    pub points: Vec<[f64; 2]>,
    pub path_len: usize,
}

pub fn sample_start<R: Rng + ?Sized>(maze: &Maze, rng: &mut R) -> Cell {
    let columns = WeightedIndex::new(column_probabilities(maze.cols)).expect("positive weights");
    let r = rng.gen_range(0..maze.rows);
    (r, columns.sample(rng))
}

pub fn sample_maze_trajectory<R: Rng + ?Sized>(spec: &MazeSpec, rng: &mut R) -> Result<MazeTrajectory> {
    spec.validate()?;
    let start = sample_start(&spec.maze, rng);
    let paths = spec.maze.paths_from(start)?;
    let pick = WeightedIndex::new(path_probabilities(&paths)).expect("positive weights");
    let path = &paths[pick.sample(rng)];
    let sd = spec.trajectory.bezier_noise.sqrt();
    let controls: Vec<[f64; 2]> = path
        .cells
        .iter()
        .map(|&cell| {
            let [x, y] = spec.maze.center(cell);
            [x + sd * rng::normal(rng), y + sd * rng::normal(rng)]
        })
        .collect();
    let n = spec.trajectory.path_points;
    // starting on the goal gives a single control point and no curve
    let points = match controls.as_slice() {
        [only] => vec![*only; n],
        _ => resample_by_arc_length(&catmull_rom_bezier(&controls), n),
    };
    Ok(MazeTrajectory {
        start: spec.maze.center(start),
        points,
        path_len: path.len(),
    })
}

/// `count` trajectories; trajectory `i` uses stream `i` of `seed`.
pub fn sample_maze(spec: &MazeSpec, count: usize, seed: u64, exec: Execution) -> Result<Vec<MazeTrajectory>> {
    spec.validate()?;
    exec.try_map(count, |i| sample_maze_trajectory(spec, &mut rng::stream(seed, i as u64)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CubicBezier(pub [[f64; 2]; 4]);

impl CubicBezier {
    /// de Casteljau evaluation; exact at `t = 0` and `t = 1`.
    pub fn eval(&self, t: f64) -> [f64; 2] {
        let mut p = self.0;
        for level in (1..4).rev() {
            for i in 0..level {
                for k in 0..2 {
                    p[i][k] = (1.0 - t) * p[i][k] + t * p[i + 1][k];
                }
            }
        }
        p[0]
    }
}

/// Piecewise cubic through `points` with Catmull-Rom tangents (C¹ joins).
/// End tangents use the duplicated end point.
pub fn catmull_rom_bezier(points: &[[f64; 2]]) -> Vec<CubicBezier> {
    let n = points.len();
    (0..n.saturating_sub(1))
        .map(|i| {
            let prev = points[i.saturating_sub(1)];
            let next = points[(i + 2).min(n - 1)];
            let (a, b) = (points[i], points[i + 1]);
            let c1 = [a[0] + (b[0] - prev[0]) / 6.0, a[1] + (b[1] - prev[1]) / 6.0];
            let c2 = [b[0] - (next[0] - a[0]) / 6.0, b[1] - (next[1] - a[1]) / 6.0];
            CubicBezier([a, c1, c2, b])
        })
        .collect()
}

/// `n` points evenly spaced in arc length along the composite curve.
///
/// Arc length is tabulated on a fine per-segment parameter grid and inverted
/// by linear interpolation in the parameter; the returned points lie exactly
/// on the curve and the ends are the first and last control points.
pub fn resample_by_arc_length(curve: &[CubicBezier], n: usize) -> Vec<[f64; 2]> {
    const FINE: usize = 64;
    let Some(first) = curve.first() else {
        return Vec::new();
    };
    // (segment, t, cumulative length)
    let mut table = vec![(0usize, 0.0, 0.0)];
    let mut last = first.0[0];
    let mut total = 0.0;
    for (k, seg) in curve.iter().enumerate() {
        for j in 1..=FINE {
            let t = j as f64 / FINE as f64;
            let p = seg.eval(t);
            total += (p[0] - last[0]).hypot(p[1] - last[1]);
            last = p;
            table.push((k, t, total));
        }
    }
    if total == 0.0 {
        return vec![first.0[0]; n];
    }
    let mut out = Vec::with_capacity(n);
    let mut j = 1;
    for i in 0..n {
        let target = total * i as f64 / (n - 1).max(1) as f64;
        while j + 1 < table.len() && table[j].2 < target {
            j += 1;
        }
        let (k1, t1, l1) = table[j];
        let (k0, t0, l0) = table[j - 1];
        let t0 = if k0 == k1 { t0 } else { 0.0 };
        let frac = if l1 > l0 { ((target - l0) / (l1 - l0)).clamp(0.0, 1.0) } else { 1.0 };
        out.push(curve[k1].eval(t0 + frac * (t1 - t0)));
    }
    out[0] = first.0[0];
    out[n - 1] = curve[curve.len() - 1].0[3];
    out
}
