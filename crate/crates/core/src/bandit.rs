//! The 2D multimodal contextual bandit.
//!
//! A state's quadrant (relative to the spec center) selects a pair of mode
//! means; the expert action is drawn from an equal-weight mixture of two
//! axis-aligned Gaussians around them. Opposite quadrants share a pair.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

use crate::error::{config, Error, Result};
use crate::rng::Rng;

pub type Point = [f64; 2];

/// Quadrant of a state relative to the spec center. Boundary points resolve in
/// the table's case order (upper-left, lower-right, lower-left, upper-right):
/// the first case whose closed region contains the state wins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Quadrant {
    /// x ≥ 0, y ≥ 0
    First,
    /// x ≤ 0, y ≥ 0
    Second,
    /// x ≤ 0, y ≤ 0
    Third,
    /// x ≥ 0, y ≤ 0
    Fourth,
}

impl Quadrant {
    pub const ALL: [Quadrant; 4] = [Quadrant::First, Quadrant::Second, Quadrant::Third, Quadrant::Fourth];

    /// Quadrant of `p − center`, resolving ties in the table order
    /// Second, Fourth, Third, First.
    pub fn of(p: Point, center: Point) -> Quadrant {
        let (x, y) = (p[0] - center[0], p[1] - center[1]);
        if x <= 0.0 && y >= 0.0 {
            Quadrant::Second
        } else if x >= 0.0 && y <= 0.0 {
            Quadrant::Fourth
        } else if x <= 0.0 && y <= 0.0 {
            Quadrant::Third
        } else {
            Quadrant::First
        }
    }

    pub fn index(self) -> usize {
        match self {
            Quadrant::First => 0,
            Quadrant::Second => 1,
            Quadrant::Third => 2,
            Quadrant::Fourth => 3,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Quadrant::First => "q1",
            Quadrant::Second => "q2",
            Quadrant::Third => "q3",
            Quadrant::Fourth => "q4",
        }
    }
}

/// Axis-aligned rectangle `[lo.x, hi.x] × [lo.y, hi.y]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub lo: Point,
    pub hi: Point,
}

impl Rect {
    pub fn new(lo: Point, hi: Point) -> Self {
        Self { lo, hi }
    }

    pub fn square(half: f64) -> Self {
        Self { lo: [-half, -half], hi: [half, half] }
    }

    pub fn contains(&self, p: Point) -> bool {
        (0..2).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }

    pub fn is_degenerate(&self) -> bool {
        (0..2).any(|k| !(self.hi[k] > self.lo[k]) || !self.lo[k].is_finite() || !self.hi[k].is_finite())
    }

    pub fn sample(&self, rng: &mut Rng) -> Point {
        [rng.random_range(self.lo[0]..self.hi[0]), rng.random_range(self.lo[1]..self.hi[1])]
    }

    pub fn area(&self) -> f64 {
        (self.hi[0] - self.lo[0]) * (self.hi[1] - self.lo[1])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BoxKind {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditSpec {
    pub name: String,
    pub center: Point,
    /// Mode-mean pairs indexed by [`Quadrant::index`].
    pub mode_table: [(Point, Point); 4],
    pub sigma: Point,
    pub mixture_weight: f64,
    pub train_box: Rect,
    pub test_box: Rect,
    pub action_box: Rect,
}

impl BanditSpec {
    /// Unit bandit: means at (±0.8, ±0.8), σ = 0.05, states tested on [−1, 1]².
    pub fn unit(train_half_width: f64) -> Self {
        let diag = ([-0.8, -0.8], [0.8, 0.8]);
        let anti = ([-0.8, 0.8], [0.8, -0.8]);
        Self {
            name: "unit".into(),
            center: [0.0, 0.0],
            mode_table: [anti, diag, anti, diag],
            sigma: [0.05, 0.05],
            mixture_weight: 0.5,
            train_box: Rect::square(train_half_width),
            test_box: Rect::square(1.0),
            action_box: Rect::square(1.0),
        }
    }

    /// The unit table shifted to the robot workspace.
    pub fn ur10() -> Self {
        let right_upper = [-0.8, 0.35];
        let left_upper = [-1.1, 0.35];
        let left_bottom = [-1.1, -0.15];
        let right_bottom = [-0.8, -0.15];
        let diag = (left_bottom, right_upper);
        let anti = (left_upper, right_bottom);
        let test_box = Rect::new([-1.2, -0.25], [-0.7, 0.45]);
        Self {
            name: "ur10".into(),
            center: [-0.95, 0.1],
            mode_table: [anti, diag, anti, diag],
            sigma: [0.015, 0.015],
            mixture_weight: 0.5,
            train_box: Rect::new([-1.0, 0.03], [-0.9, 0.17]),
            test_box,
            action_box: test_box,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.mixture_weight > 0.0 && self.mixture_weight < 1.0) {
            return config(format!("mixture weight must lie in (0, 1), got {}", self.mixture_weight));
        }
        if self.sigma.iter().any(|s| !(*s > 0.0)) {
            return config("sigma must be positive on both axes");
        }
        for (name, r) in [("train", self.train_box), ("test", self.test_box), ("action", self.action_box)] {
            if r.is_degenerate() {
                return config(format!("degenerate {name} box"));
            }
        }
        Ok(())
    }

    pub fn state_box(&self, kind: BoxKind) -> Rect {
        match kind {
            BoxKind::Train => self.train_box,
            BoxKind::Test => self.test_box,
        }
    }

    pub fn quadrant(&self, state: Point) -> Quadrant {
        Quadrant::of(state, self.center)
    }

    /// Mode-mean pair for a state.
    pub fn gmm_means(&self, state: Point) -> (Point, Point) {
        self.mode_table[self.quadrant(state).index()]
    }

    /// Mixture draw: mode 1 with probability `mixture_weight`, then Gaussian
    /// noise with per-axis `sigma`.
    pub fn sample_action(&self, state: Point, rng: &mut Rng) -> Point {
        let (m1, m2) = self.gmm_means(state);
        let mean = if rng.random::<f64>() < self.mixture_weight { m1 } else { m2 };
        let nx: f64 = rng.sample(StandardNormal);
        let ny: f64 = rng.sample(StandardNormal);
        [mean[0] + self.sigma[0] * nx, mean[1] + self.sigma[1] * ny]
    }

    /// SHA-256 over the canonical parameter text, first 16 hex digits.
    pub fn hash(&self) -> String {
        let mut text = String::new();
        let _ = write!(text, "{}|{:?}|{:?}|{:?}|{}", self.name, self.center, self.mode_table, self.sigma, self.mixture_weight);
        let _ = write!(text, "|{:?}|{:?}|{:?}", self.train_box, self.test_box, self.action_box);
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }
}

/// Reference actions from the true mixture, bucketed by state quadrant.
pub fn ground_truth_set(spec: &BanditSpec, states: &[Point], m_per_state: usize, rng: &mut Rng) -> [Vec<Point>; 4] {
    let mut buckets: [Vec<Point>; 4] = Default::default();
    for &s in states {
        let q = spec.quadrant(s).index();
        for _ in 0..m_per_state {
            buckets[q].push(spec.sample_action(s, rng));
        }
    }
    buckets
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetMeta {
    pub spec_hash: String,
    pub preset: String,
    pub seed: u64,
    pub n: usize,
    pub state_box: Rect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BanditDataset {
    pub states: Vec<Point>,
    pub actions: Vec<Point>,
    pub meta: DatasetMeta,
}

/// `n` states uniform over the chosen box, each with one expert action.
/// Each record draws its state and then its action.
pub fn generate_dataset(spec: &BanditSpec, n: usize, kind: BoxKind, seed: u64, rng: &mut Rng) -> Result<BanditDataset> {
    spec.validate()?;
    if n == 0 {
        return config("dataset size must be at least 1");
    }
    let bx = spec.state_box(kind);
    let mut states = Vec::with_capacity(n);
    let mut actions = Vec::with_capacity(n);
    for _ in 0..n {
        let s = bx.sample(rng);
        actions.push(spec.sample_action(s, rng));
        states.push(s);
    }
    Ok(BanditDataset {
        states,
        actions,
        meta: DatasetMeta { spec_hash: spec.hash(), preset: spec.name.clone(), seed, n, state_box: bx },
    })
}

/// Sidecar path for a dataset CSV.
pub fn meta_path(csv: &Path) -> PathBuf {
    let mut p = csv.as_os_str().to_owned();
    p.push(".meta");
    PathBuf::from(p)
}

pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

impl BanditDataset {
    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Writes `sx,sy,ax,ay` rows plus a `key=value` sidecar.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["sx", "sy", "ax", "ay"])?;
        for (s, a) in self.states.iter().zip(&self.actions) {
            w.write_record([s[0], s[1], a[0], a[1]].map(format_float))?;
        }
        w.flush()?;
        let mut meta = std::fs::File::create(meta_path(path))?;
        writeln!(meta, "spec_hash={}", self.meta.spec_hash)?;
        writeln!(meta, "preset={}", self.meta.preset)?;
        writeln!(meta, "seed={}", self.meta.seed)?;
        writeln!(meta, "n={}", self.meta.n)?;
        let b = self.meta.state_box;
        writeln!(meta, "box={},{},{},{}", format_float(b.lo[0]), format_float(b.lo[1]), format_float(b.hi[0]), format_float(b.hi[1]))?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let headers = r.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["sx", "sy", "ax", "ay"] {
            return Err(Error::Parse(format!("unexpected dataset header {headers:?}")));
        }
        let mut states = Vec::new();
        let mut actions = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            let v: Vec<f64> = rec
                .iter()
                .map(|f| f.parse::<f64>().map_err(|e| Error::Parse(format!("bad float `{f}`: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != 4 {
                return Err(Error::Parse("dataset rows need four columns".into()));
            }
            states.push([v[0], v[1]]);
            actions.push([v[2], v[3]]);
        }
        let mut meta = DatasetMeta {
            spec_hash: String::new(),
            preset: String::new(),
            seed: 0,
            n: states.len(),
            state_box: Rect::square(1.0),
        };
        let file = std::fs::File::open(meta_path(path))?;
        for line in BufReader::new(file).lines() {
            let line = line?;
            let Some((k, v)) = line.split_once('=') else { continue };
            let bad = |e: String| Error::Parse(format!("bad metadata `{line}`: {e}"));
            match k {
                "spec_hash" => meta.spec_hash = v.to_string(),
                "preset" => meta.preset = v.to_string(),
                "seed" => meta.seed = v.parse().map_err(|e| bad(format!("{e}")))?,
                "n" => meta.n = v.parse().map_err(|e| bad(format!("{e}")))?,
                "box" => {
                    let f: Vec<f64> =
                        v.split(',').map(|x| x.parse::<f64>().map_err(|e| bad(format!("{e}")))).collect::<Result<_>>()?;
                    if f.len() != 4 {
                        return Err(bad("box needs four numbers".into()));
                    }
                    meta.state_box = Rect::new([f[0], f[1]], [f[2], f[3]]);
                }
                _ => {}
            }
        }
        if meta.n != states.len() {
            return Err(Error::Parse(format!("metadata says n={} but file has {} rows", meta.n, states.len())));
        }
        Ok(Self { states, actions, meta })
    }
}
