//! Evaluation, learning curves, Mann–Whitney U and trajectory diversity.

use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;
use thiserror::Error;

use crate::env::{env_episode, Outcome, Policy};
use crate::geom::Vec2;
use crate::nn::{Checkpoint, GreedyPolicy, NnError};
use crate::seed;
use crate::sim::{ScenarioKind, ScenarioSpec, SimError, WorldConfig};

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sample {0} is empty")]
    EmptySample(&'static str),
    #[error("non-finite value in sample")]
    NonFinite,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Format(String),
}

/// Results of a block of greedy episodes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalSummary {
    pub episodes: usize,
    pub wins: usize,
    pub losses: usize,
    pub timeouts: usize,
    pub mean_ticks: f64,
}

impl EvalSummary {
    pub fn success_rate(&self) -> f64 {
        if self.episodes == 0 {
            0.0
        } else {
            self.wins as f64 / self.episodes as f64
        }
    }
}

/// Seed of the `index`-th evaluation scenario for a given base seed.
pub fn eval_scenario(kind: ScenarioKind, seed_base: u64, index: usize) -> ScenarioSpec {
    ScenarioSpec::new(kind, seed::derive(seed::derive(seed_base, seed::stream::EVAL_EPISODE), index as u64))
}

/// Runs `n` episodes on the evaluation scenarios of `seed_base`.
pub fn evaluate(
    policy: &mut dyn Policy,
    kind: ScenarioKind,
    world: &WorldConfig,
    n: usize,
    seed_base: u64,
) -> Result<EvalSummary, SimError> {
    let mut s = EvalSummary { episodes: n, ..Default::default() };
    let mut ticks = 0u64;
    for i in 0..n {
        let record = env_episode(policy, &eval_scenario(kind, seed_base, i), world, None)?;
        ticks += u64::from(record.total_ticks);
        match record.outcome {
            Outcome::Win => s.wins += 1,
            Outcome::Loss => s.losses += 1,
            Outcome::Timeout => s.timeouts += 1,
        }
    }
    s.mean_ticks = if n == 0 { 0.0 } else { ticks as f64 / n as f64 };
    Ok(s)
}

/// Fraction of greedy episodes of a checkpoint that end in neutralization.
pub fn success_rate(
    checkpoint: &Checkpoint,
    kind: ScenarioKind,
    world: &WorldConfig,
    n: usize,
    seed_base: u64,
) -> Result<f64, AnalysisError> {
    let mut policy = GreedyPolicy { network: checkpoint.network()? };
    Ok(evaluate(&mut policy, kind, world, n, seed_base)?.success_rate())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub episode: u64,
    pub success_rate: f64,
    pub eval_episode_count: usize,
    pub epsilon: f64,
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct LearningCurve {
    pub points: Vec<CurvePoint>,
}

impl LearningCurve {
    pub fn success_rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.success_rate).collect()
    }

    /// First evaluated episode count at which the success rate reached `level`.
    pub fn episodes_to_reach(&self, level: f64) -> Option<u64> {
        self.points.iter().find(|p| p.success_rate >= level).map(|p| p.episode)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), AnalysisError> {
        let mut w = csv::Writer::from_writer(writer);
        for p in &self.points {
            w.serialize(p)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self, AnalysisError> {
        let mut r = csv::Reader::from_reader(reader);
        let points = r.deserialize().collect::<Result<Vec<CurvePoint>, _>>()?;
        Ok(Self { points })
    }

    pub fn save(&self, path: &Path) -> Result<(), AnalysisError> {
        self.write_csv(std::fs::File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self, AnalysisError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Per-evaluation-point mean and population standard deviation across seeds.
/// Curves are aligned by position and truncated to the shortest.
pub fn aggregate(curves: &[LearningCurve]) -> Vec<(u64, f64, f64)> {
    let len = curves.iter().map(|c| c.points.len()).min().unwrap_or(0);
    (0..len)
        .map(|i| {
            let xs: Vec<f64> = curves.iter().map(|c| c.points[i].success_rate).collect();
            let mean = xs.iter().sum::<f64>() / xs.len() as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64;
            (curves[0].points[i].episode, mean, var.sqrt())
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MwuMethod {
    Exact,
    NormalApprox,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwuResult {
    /// U of the first sample: pairs where it is larger, ties counted half.
    pub u: f64,
    pub p_two_sided: f64,
    /// `1 − 2U/(n₁n₂)`.
    pub effect_rank_biserial: f64,
    pub method: MwuMethod,
    /// One-sided p against the first sample tending smaller: `P(U ≤ u)`.
    pub p_less: f64,
    /// One-sided p against the first sample tending larger: `P(U ≥ u)`.
    pub p_greater: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    Less,
    Greater,
}

impl FromStr for Alternative {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two-sided" => Ok(Self::TwoSided),
            "less" => Ok(Self::Less),
            "greater" => Ok(Self::Greater),
            other => Err(format!("unknown alternative `{other}` (two-sided, less, greater)")),
        }
    }
}

impl MwuResult {
    pub fn p(&self, alternative: Alternative) -> f64 {
        match alternative {
            Alternative::TwoSided => self.p_two_sided,
            Alternative::Less => self.p_less,
            Alternative::Greater => self.p_greater,
        }
    }
}

/// Average ranks (1-based) of `values`, ties sharing the mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

const EXACT_LIMIT: usize = 400;

/// Two-sided Mann–Whitney U test.
///
/// Exact p by counting all `C(n₁+n₂, n₁)` rank assignments when `n₁n₂ ≤ 400`
/// and there are no ties; otherwise the normal approximation with tie and
/// continuity corrections.
pub fn mann_whitney_u(a: &[f64], b: &[f64]) -> Result<MwuResult, AnalysisError> {
    mann_whitney_u_with(a, b, None)
}

/// [`mann_whitney_u`] with the p-value method forced. Forcing `Exact` on
/// tied samples is an error.
pub fn mann_whitney_u_with(a: &[f64], b: &[f64], method: Option<MwuMethod>) -> Result<MwuResult, AnalysisError> {
    if a.is_empty() {
        return Err(AnalysisError::EmptySample("a"));
    }
    if b.is_empty() {
        return Err(AnalysisError::EmptySample("b"));
    }
    if a.iter().chain(b).any(|x| !x.is_finite()) {
        return Err(AnalysisError::NonFinite);
    }
    let (n1, n2) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = average_ranks(&pooled);
    let r1: f64 = ranks[..n1].iter().sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let nn = (n1 * n2) as f64;
    let effect = 1.0 - 2.0 * u / nn;
    let has_ties = {
        let mut s = pooled.clone();
        s.sort_by(f64::total_cmp);
        s.windows(2).any(|w| w[0] == w[1])
    };

    let exact = match method {
        None => n1 * n2 <= EXACT_LIMIT && !has_ties,
        Some(MwuMethod::Exact) if has_ties => {
            return Err(AnalysisError::Format("exact p needs tie-free samples".into()));
        }
        Some(m) => m == MwuMethod::Exact,
    };
    if exact {
        let (p, p_less, p_greater) = exact_p(n1, n2, u);
        return Ok(MwuResult {
            u,
            p_two_sided: p,
            effect_rank_biserial: effect,
            method: MwuMethod::Exact,
            p_less,
            p_greater,
        });
    }

    let n = (n1 + n2) as f64;
    let mean = nn / 2.0;
    let tie_term: f64 = tie_group_sizes(&pooled).iter().map(|&t| (t * t * t - t) as f64).sum();
    let var = nn / 12.0 * ((n + 1.0) - tie_term / (n * (n - 1.0)));
    let (p, p_less, p_greater) = if var <= 0.0 {
        (1.0, 1.0, 1.0)
    } else {
        let sd = var.sqrt();
        let z = ((u - mean).abs() - 0.5).max(0.0) / sd;
        let less = normal_sf(-(u - mean + 0.5) / sd);
        let greater = normal_sf((u - mean - 0.5) / sd);
        ((2.0 * normal_sf(z)).min(1.0), less.min(1.0), greater.min(1.0))
    };
    Ok(MwuResult {
        u,
        p_two_sided: p,
        effect_rank_biserial: effect,
        method: MwuMethod::NormalApprox,
        p_less,
        p_greater,
    })
}

fn tie_group_sizes(values: &[f64]) -> Vec<usize> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    let mut groups = Vec::new();
    let mut i = 0;
    while i < s.len() {
        let mut j = i;
        while j + 1 < s.len() && s[j + 1] == s[i] {
            j += 1;
        }
        groups.push(j - i + 1);
        i = j + 1;
    }
    groups
}

/// Null distribution of U for tie-free samples: `counts[u]` is the number of
/// ways to choose `n1` of `n1+n2` ranks with that U.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // f[i][j][u]: arrangements of i first-sample and j second-sample items.
    let max_u = n1 * n2;
    let mut f = vec![vec![vec![0.0; max_u + 1]; n2 + 1]; n1 + 1];
    for row in f[0].iter_mut() {
        row[0] = 1.0;
    }
    for i in 1..=n1 {
        f[i][0][0] = 1.0;
        for j in 1..=n2 {
            for u in 0..=i * j {
                // Largest item from the first sample beats all j second-sample items.
                let from_first = if u >= j { f[i - 1][j][u - j] } else { 0.0 };
                let from_second = f[i][j - 1][u];
                f[i][j][u] = from_first + from_second;
            }
        }
    }
    f[n1][n2].clone()
}

/// Two-sided, lower-tail and upper-tail exact p-values.
fn exact_p(n1: usize, n2: usize, u: f64) -> (f64, f64, f64) {
    let counts = u_distribution(n1, n2);
    let total: f64 = counts.iter().sum();
    let tail = |keep: &dyn Fn(f64) -> bool| -> f64 {
        counts.iter().enumerate().filter(|(k, _)| keep(*k as f64)).map(|(_, c)| c).sum::<f64>() / total
    };
    let mean = (n1 * n2) as f64 / 2.0;
    let observed = (u - mean).abs();
    let two_sided = tail(&|k| (k - mean).abs() >= observed - 1e-9);
    (two_sided.min(1.0), tail(&|k| k <= u + 1e-9).min(1.0), tail(&|k| k >= u - 1e-9).min(1.0))
}

/// Upper tail of the standard normal.
pub fn normal_sf(z: f64) -> f64 {
    0.5 * erfc(z / std::f64::consts::SQRT_2)
}

/// Complementary error function (Numerical Recipes `erfcc`, |rel err| < 1.2e-7).
fn erfc(x: f64) -> f64 {
    let z = x.abs();
    let t = 1.0 / (1.0 + 0.5 * z);
    let r = t
        * (-z * z - 1.265_512_23
            + t * (1.000_023_68
                + t * (0.374_091_96
                    + t * (0.096_784_18
                        + t * (-0.186_288_06
                            + t * (0.278_868_07
                                + t * (-1.135_203_98
                                    + t * (1.488_515_87 + t * (-0.822_152_23 + t * 0.170_872_77)))))))))
            .exp();
    if x >= 0.0 {
        r
    } else {
        2.0 - r
    }
}

/// Pools every evaluation-block success rate of each variant across seeds
/// and tests the two pools.
pub fn compare_curves(a: &[LearningCurve], b: &[LearningCurve]) -> Result<MwuResult, AnalysisError> {
    let pool = |cs: &[LearningCurve]| cs.iter().flat_map(|c| c.success_rates()).collect::<Vec<_>>();
    mann_whitney_u(&pool(a), &pool(b))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Shannon entropy of the cell-visitation histogram, in nats.
    pub entropy: f64,
    pub unique_cells: usize,
    pub grid_cell_size: f64,
    pub n_points: usize,
}

pub const DEFAULT_CELL_SIZE: f64 = 10.0;

fn cell_of(p: Vec2, cell_size: f64) -> (i64, i64) {
    ((p.x / cell_size).floor() as i64, (p.y / cell_size).floor() as i64)
}

/// Visitation counts per grid cell over all given trajectories.
pub fn cell_counts<'a, I>(trajectories: I, cell_size: f64) -> HashMap<(i64, i64), usize>
where
    I: IntoIterator<Item = &'a [Vec2]>,
{
    let mut counts = HashMap::new();
    for traj in trajectories {
        for &p in traj {
            *counts.entry(cell_of(p, cell_size)).or_insert(0) += 1;
        }
    }
    counts
}

pub fn state_entropy<'a, I>(trajectories: I, cell_size: f64) -> DiversityReport
where
    I: IntoIterator<Item = &'a [Vec2]>,
{
    let counts = cell_counts(trajectories, cell_size);
    let n: usize = counts.values().sum();
    let entropy = if n == 0 {
        0.0
    } else {
        let mut cells: Vec<usize> = counts.values().copied().collect();
        cells.sort_unstable();
        -cells
            .iter()
            .map(|&c| {
                let p = c as f64 / n as f64;
                p * p.ln()
            })
            .sum::<f64>()
    };
    DiversityReport { entropy: entropy.max(0.0), unique_cells: counts.len(), grid_cell_size: cell_size, n_points: n }
}

/// Row-major visitation grid over a square map.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub origin: Vec2,
    pub cell_size: f64,
    pub cols: usize,
    pub rows: usize,
    pub counts: Vec<u64>,
}

impl Heatmap {
    /// Points outside the map are clamped into the border cells.
    pub fn build<'a, I>(trajectories: I, map_side: f64, cell_size: f64) -> Self
    where
        I: IntoIterator<Item = &'a [Vec2]>,
    {
        let cols = (map_side / cell_size).ceil().max(1.0) as usize;
        let rows = cols;
        let mut counts = vec![0u64; rows * cols];
        for traj in trajectories {
            for &p in traj {
                let cx = ((p.x / cell_size).floor().max(0.0) as usize).min(cols - 1);
                let cy = ((p.y / cell_size).floor().max(0.0) as usize).min(rows - 1);
                counts[cy * cols + cx] += 1;
            }
        }
        Self { origin: Vec2::ZERO, cell_size, cols, rows, counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Header line `# origin_x,origin_y,cell_size,cols,rows` then one CSV row per grid row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<(), AnalysisError> {
        writeln!(
            w,
            "# origin_x={},origin_y={},cell_size={},cols={},rows={}",
            self.origin.x, self.origin.y, self.cell_size, self.cols, self.rows
        )?;
        for row in self.counts.chunks(self.cols) {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            writeln!(w, "{}", line.join(","))?;
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(mut r: R) -> Result<Self, AnalysisError> {
        let mut text = String::new();
        r.read_to_string(&mut text)?;
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| AnalysisError::Format("empty heatmap".into()))?;
        let fields: HashMap<&str, &str> =
            header.trim_start_matches('#').trim().split(',').filter_map(|kv| kv.split_once('=')).collect();
        let num = |k: &str| -> Result<f64, AnalysisError> {
            fields
                .get(k)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| AnalysisError::Format(format!("heatmap header missing `{k}`")))
        };
        let (cols, rows) = (num("cols")? as usize, num("rows")? as usize);
        let counts = lines
            .flat_map(|l| l.split(','))
            .map(|v| v.trim().parse::<u64>().map_err(|e| AnalysisError::Format(e.to_string())))
            .collect::<Result<Vec<_>, _>>()?;
        if counts.len() != cols * rows {
            return Err(AnalysisError::Format("heatmap size does not match header".into()));
        }
        Ok(Self {
            origin: Vec2::new(num("origin_x")?, num("origin_y")?),
            cell_size: num("cell_size")?,
            cols,
            rows,
            counts,
        })
    }
}
