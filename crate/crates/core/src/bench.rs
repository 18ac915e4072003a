//! Solver comparison over many problems: result tables, Dolan-Moré
//! performance ratios and profiles, and replica summaries.
//!
//! A table holds one performance index per (problem, replica) row and
//! solver column. Replicas count as separate problems in a profile.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ita::{ita_train, standard_train, ItaConfig, StandardConfig, TrainRun};
use crate::network::{Activation, Loss};
use crate::{Error, Result};

/// Lower clamp for the values entering a performance ratio.
pub const RATIO_EPS: f64 = 1e-15;

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub problem: String,
    pub replica: usize,
    /// One entry per solver; `None` marks a failed cell.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub budget: usize,
    pub solvers: Vec<String>,
    pub rows: Vec<ResultRow>,
}

impl ResultsTable {
    /// Builds a table from a dense matrix, rows named `p0, p1, ...`.
    pub fn from_matrix(budget: usize, solvers: Vec<String>, t: &[Vec<f64>]) -> Result<Self> {
        let rows = t
            .iter()
            .enumerate()
            .map(|(i, row)| ResultRow { problem: format!("p{i}"), replica: 0, values: row.iter().map(|&v| Some(v)).collect() })
            .collect();
        let table = Self { budget, solvers, rows };
        table.validate()?;
        Ok(table)
    }

    pub fn validate(&self) -> Result<()> {
        if self.solvers.is_empty() {
            return Err(Error::Bench("table has no solvers".into()));
        }
        for row in &self.rows {
            if row.values.len() != self.solvers.len() {
                return Err(Error::Bench(format!(
                    "row {}/{} has {} values for {} solvers",
                    row.problem,
                    row.replica,
                    row.values.len(),
                    self.solvers.len()
                )));
            }
            if let Some(v) = row.values.iter().flatten().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::Bench(format!("row {}/{} holds invalid index {v}", row.problem, row.replica)));
            }
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Writes `problem,solver,replica,budget,final_risk`, one line per cell
    /// in row-major order; failed cells hold `failed`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(file));
        let wrap = |e: csv::Error| Error::Bench(format!("{}: {e}", path.display()));
        w.write_record(["problem", "solver", "replica", "budget", "final_risk"]).map_err(wrap)?;
        for row in &self.rows {
            for (solver, value) in self.solvers.iter().zip(&row.values) {
                let v = value.map_or_else(|| "failed".to_string(), |v| v.to_string());
                w.write_record([row.problem.as_str(), solver, &row.replica.to_string(), &self.budget.to_string(), &v])
                    .map_err(wrap)?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    /// Reads a file written by [`ResultsTable::write_csv`]. Rows and solvers
    /// keep their first-seen order; missing cells count as failed.
    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path).map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            other => Error::Bench(format!("{}: {other:?}", path.display())),
        })?;
        let parse_err = |line: u64, message: String| Error::Parse { path: path.to_path_buf(), line, message };
        let headers = reader.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
        let expected = ["problem", "solver", "replica", "budget", "final_risk"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(parse_err(1, format!("expected header {}", expected.join(","))));
        }
        let mut solvers: Vec<String> = Vec::new();
        let mut keys: Vec<(String, usize)> = Vec::new();
        let mut cells: Vec<(usize, usize, Option<f64>)> = Vec::new();
        let mut budget = None;
        for rec in reader.records() {
            let rec = rec.map_err(|e| parse_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if rec.len() != 5 {
                return Err(parse_err(line, format!("expected 5 fields, found {}", rec.len())));
            }
            let replica: usize = rec[2].parse().map_err(|_| parse_err(line, format!("bad replica '{}'", &rec[2])))?;
            let b: usize = rec[3].parse().map_err(|_| parse_err(line, format!("bad budget '{}'", &rec[3])))?;
            if *budget.get_or_insert(b) != b {
                return Err(parse_err(line, "table mixes several budgets".into()));
            }
            let value = match &rec[4] {
                "failed" => None,
                s => Some(s.parse::<f64>().map_err(|_| parse_err(line, format!("bad final_risk '{s}'")))?),
            };
            let s = solvers.iter().position(|x| x == &rec[1]).unwrap_or_else(|| {
                solvers.push(rec[1].to_string());
                solvers.len() - 1
            });
            let key = (rec[0].to_string(), replica);
            let r = keys.iter().position(|k| k == &key).unwrap_or_else(|| {
                keys.push(key);
                keys.len() - 1
            });
            cells.push((r, s, value));
        }
        let mut rows: Vec<ResultRow> = keys
            .into_iter()
            .map(|(problem, replica)| ResultRow { problem, replica, values: vec![None; solvers.len()] })
            .collect();
        for (r, s, v) in cells {
            rows[r].values[s] = v;
        }
        let table = Self { budget: budget.unwrap_or(0), solvers, rows };
        if table.is_empty() {
            return Err(Error::Bench(format!("{}: table is empty", path.display())));
        }
        table.validate()?;
        Ok(table)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatioMatrix {
    pub solvers: Vec<String>,
    /// `ratios[p][s]`; failed cells are `+inf`.
    pub ratios: Vec<Vec<f64>>,
    /// Rows whose best value was below [`RATIO_EPS`].
    pub clamped_rows: Vec<usize>,
}

/// `r_ps = max(t_ps, eps) / max(min_s t_ps, eps)`.
pub fn performance_ratio(table: &ResultsTable) -> Result<RatioMatrix> {
    table.validate()?;
    let mut ratios = Vec::with_capacity(table.rows.len());
    let mut clamped_rows = Vec::new();
    for (p, row) in table.rows.iter().enumerate() {
        let best = row.values.iter().flatten().copied().fold(f64::INFINITY, f64::min);
        if best.is_infinite() {
            return Err(Error::Bench(format!("every solver failed on {}/{}", row.problem, row.replica)));
        }
        if best < RATIO_EPS {
            clamped_rows.push(p);
        }
        let denom = best.max(RATIO_EPS);
        ratios.push(row.values.iter().map(|v| v.map_or(f64::INFINITY, |t| t.max(RATIO_EPS) / denom)).collect());
    }
    Ok(RatioMatrix { solvers: table.solvers.clone(), ratios, clamped_rows })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileCurve {
    pub alphas: Vec<f64>,
    pub solvers: Vec<String>,
    /// `rho[s][i]` is the fraction of problems with ratio `<= alphas[i]`.
    pub rho: Vec<Vec<f64>>,
}

impl ProfileCurve {
    pub fn rho_at(&self, solver: usize, alpha: f64) -> f64 {
        let idx = self.alphas.partition_point(|&a| a <= alpha);
        if idx == 0 {
            0.0
        } else {
            self.rho[solver][idx - 1]
        }
    }

    /// Header `alpha,rho_<solver>...`, one line per grid point.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("alpha");
        for s in &self.solvers {
            out.push_str(",rho_");
            out.push_str(s);
        }
        out.push('\n');
        for (i, a) in self.alphas.iter().enumerate() {
            out.push_str(&a.to_string());
            for r in &self.rho {
                out.push(',');
                out.push_str(&r[i].to_string());
            }
            out.push('\n');
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }
}

/// `1, 1.05, ..., 4` followed by `5, 6, ..., 10`.
pub fn default_alpha_grid() -> Vec<f64> {
    let mut grid: Vec<f64> = (0..=60).map(|i| 1.0 + i as f64 / 20.0).collect();
    grid.extend((5..=10).map(f64::from));
    grid
}

/// `rho_s(alpha) = |{p : r_ps <= alpha}| / n_p` on the given grid.
pub fn performance_profile(r: &RatioMatrix, alphas: &[f64]) -> Result<ProfileCurve> {
    if r.ratios.is_empty() {
        return Err(Error::Bench("ratio matrix is empty".into()));
    }
    if alphas.is_empty() || alphas.iter().any(|a| !(*a >= 1.0)) || alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Bench("alpha grid must be nonempty, increasing and >= 1".into()));
    }
    let n_p = r.ratios.len() as f64;
    let rho = (0..r.solvers.len())
        .map(|s| {
            let mut col: Vec<f64> = r.ratios.iter().map(|row| row[s]).collect();
            col.sort_by(f64::total_cmp);
            alphas.iter().map(|&a| col.partition_point(|&v| v <= a) as f64 / n_p).collect()
        })
        .collect();
    Ok(ProfileCurve { alphas: alphas.to_vec(), solvers: r.solvers.clone(), rho })
}

/// A solver under comparison. Width and budget fields of the templates are
/// kept; the seed and epoch limit are set per cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SolverSpec {
    Standard { name: String, config: StandardConfig },
    Ita { name: String, config: ItaConfig },
}

impl SolverSpec {
    pub fn name(&self) -> &str {
        match self {
            SolverSpec::Standard { name, .. } | SolverSpec::Ita { name, .. } => name,
        }
    }

    pub fn run(&self, data: &Dataset, epochs: usize, seed: u64, loss: &dyn Loss, act: &dyn Activation) -> Result<TrainRun> {
        match self {
            SolverSpec::Standard { config, .. } => {
                let cfg = StandardConfig { maxit: epochs, seed, ..config.clone() };
                standard_train(data, &cfg, loss, act)
            }
            SolverSpec::Ita { config, .. } => {
                let cfg = ItaConfig { epoch_budget: Some(epochs), seed, ..config.clone() };
                ita_train(data, &cfg, loss, act)
            }
        }
    }
}

/// Seed shared by all solvers on one (problem, replica) cell.
pub fn cell_seed(base_seed: u64, problem: usize, replica: usize) -> u64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    mix(base_seed ^ mix(((problem as u64) << 32) ^ replica as u64))
}

#[derive(Clone, Debug)]
pub struct CellRun {
    pub problem: usize,
    pub replica: usize,
    pub solver: usize,
    pub seed: u64,
    pub outcome: std::result::Result<TrainRun, String>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct BenchOutput {
    /// One table per budget, in the order given.
    pub tables: Vec<ResultsTable>,
    /// Every cell in (problem, replica, solver) order.
    pub cells: Vec<CellRun>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub replicas: usize,
    pub budgets: Vec<usize>,
    pub base_seed: u64,
    /// Worker threads; `None` uses the global rayon pool.
    pub jobs: Option<usize>,
}

/// Runs every (problem, replica, solver) cell once at the largest budget;
/// smaller budgets read the same run's loss trace.
pub fn run_benchmark(
    problems: &[Dataset],
    solvers: &[SolverSpec],
    cfg: &BenchConfig,
    loss: &dyn Loss,
    act: &dyn Activation,
) -> Result<BenchOutput> {
    if problems.is_empty() || solvers.is_empty() {
        return Err(Error::Bench("need at least one problem and one solver".into()));
    }
    if cfg.replicas == 0 {
        return Err(Error::Bench("replicas must be >= 1".into()));
    }
    if cfg.budgets.is_empty() {
        return Err(Error::Bench("no epoch budgets given".into()));
    }
    let max_budget = *cfg.budgets.iter().max().expect("nonempty");
    let index: Vec<(usize, usize, usize)> = (0..problems.len())
        .flat_map(|p| (0..cfg.replicas).flat_map(move |r| (0..solvers.len()).map(move |s| (p, r, s))))
        .collect();
    let run_cell = |&(p, r, s): &(usize, usize, usize)| {
        let seed = cell_seed(cfg.base_seed, p, r);
        let start = std::time::Instant::now();
        let outcome = solvers[s].run(&problems[p], max_budget, seed, loss, act).map_err(|e| e.to_string());
        CellRun { problem: p, replica: r, solver: s, seed, outcome, wall_seconds: start.elapsed().as_secs_f64() }
    };
    let cells: Vec<CellRun> = match cfg.jobs {
        Some(jobs) => rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build()
            .map_err(|e| Error::Bench(e.to_string()))?
            .install(|| index.par_iter().map(run_cell).collect()),
        None => index.par_iter().map(run_cell).collect(),
    };

    let names: Vec<String> = solvers.iter().map(|s| s.name().to_string()).collect();
    let tables = cfg
        .budgets
        .iter()
        .map(|&budget| {
            let rows = cells
                .chunks(solvers.len())
                .map(|group| ResultRow {
                    problem: problems[group[0].problem].name.clone(),
                    replica: group[0].replica,
                    values: group.iter().map(|c| c.outcome.as_ref().ok().map(|run| run.risk_at(budget))).collect(),
                })
                .collect();
            ResultsTable { budget, solvers: names.clone(), rows }
        })
        .collect();
    Ok(BenchOutput { tables, cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FiveNumber {
    pub count: usize,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
    pub mean: f64,
}

/// Quantile by linear interpolation between order statistics at position
/// `q * (n - 1)` (Hyndman-Fan type 7).
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Five-number summary plus mean; `None` for an empty slice.
pub fn summary_stats(values: &[f64]) -> Option<FiveNumber> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    Some(FiveNumber {
        count: v.len(),
        min: v[0],
        q1: quantile_sorted(&v, 0.25),
        median: quantile_sorted(&v, 0.5),
        q3: quantile_sorted(&v, 0.75),
        max: v[v.len() - 1],
        mean: v.iter().sum::<f64>() / v.len() as f64,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellSummary {
    pub problem: String,
    pub solver: String,
    pub failed: usize,
    pub stats: Option<FiveNumber>,
}

/// Summary over replicas for every (problem, solver) pair, problems in
/// first-seen order.
pub fn summarize(table: &ResultsTable) -> Vec<CellSummary> {
    let mut problems: Vec<&str> = Vec::new();
    for row in &table.rows {
        if !problems.contains(&row.problem.as_str()) {
            problems.push(&row.problem);
        }
    }
    let mut out = Vec::new();
    for problem in problems {
        for (s, solver) in table.solvers.iter().enumerate() {
            let cells: Vec<Option<f64>> = table.rows.iter().filter(|r| r.problem == problem).map(|r| r.values[s]).collect();
            let finite: Vec<f64> = cells.iter().flatten().copied().collect();
            out.push(CellSummary {
                problem: problem.to_string(),
                solver: solver.clone(),
                failed: cells.len() - finite.len(),
                stats: summary_stats(&finite),
            });
        }
    }
    out
}

/// Writes `problem,solver,count,failed,min,q1,median,q3,max,mean`.
pub fn write_summary_csv(summaries: &[CellSummary], path: &Path) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "problem,solver,count,failed,min,q1,median,q3,max,mean").expect("write to Vec");
    for c in summaries {
        match c.stats {
            Some(s) => writeln!(
                out,
                "{},{},{},{},{},{},{},{},{},{}",
                c.problem, c.solver, s.count, c.failed, s.min, s.q1, s.median, s.q3, s.max, s.mean
            ),
            None => writeln!(out, "{},{},0,{},,,,,,", c.problem, c.solver, c.failed),
        }
        .expect("write to Vec");
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}
