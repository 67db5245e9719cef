//! Batch experiment harnesses and report rendering.
//!
//! Two suites are provided: a selection grid over simulated two-regime
//! linear mixtures (tallying the chosen order per cell across replications)
//! and an MLP-mixture order study for laser-intensity style series files.
//! Both are deterministic functions of their configuration: every cell and
//! replication derives its own seed, so cells can be recomputed in
//! isolation and fan out across threads without affecting results.

use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::em::FitConfig;
use crate::error::{Error, Result};
use crate::model::{Expert, ExpertSpec, LinearExpert, MixtureModel, SeriesData};
use crate::seed::derive_seed;
use crate::selection::{select_order, PenaltyMode};
use crate::simulate::{simulate, GenerativeSpec};

/// Output format for rendered reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Markdown,
}

/// Configuration of the linear-mixture selection grid.
#[derive(Debug, Clone)]
pub struct GridConfig {
    pub pi1_values: Vec<f64>,
    /// Leading-coefficient pairs `(a1, a2)` of the two regimes.
    pub a_pairs: Vec<(f64, f64)>,
    /// Intercepts of the two regimes.
    pub b_pair: (f64, f64),
    /// Common noise scale of both regimes.
    pub sigma: f64,
    pub n_values: Vec<usize>,
    pub replications: usize,
    pub p_max: usize,
    pub master_seed: u64,
}

impl GridConfig {
    /// Desk-scale default: three coefficient pairs, twenty replications.
    pub fn desk_scale(master_seed: u64) -> Self {
        GridConfig {
            pi1_values: vec![0.5, 0.7, 0.9],
            a_pairs: vec![(0.1, 0.1), (0.1, 0.5), (0.1, 0.9)],
            b_pair: (0.5, -0.5),
            sigma: 0.5,
            n_values: vec![200, 500, 1000, 1500, 2000],
            replications: 20,
            p_max: 3,
            master_seed,
        }
    }

    /// Full grid: every coefficient pair in `{0.1, 0.5, 0.9}^2`.
    pub fn full_scale(master_seed: u64) -> Self {
        let levels = [0.1, 0.5, 0.9];
        let mut a_pairs = Vec::with_capacity(9);
        for a1 in levels {
            for a2 in levels {
                a_pairs.push((a1, a2));
            }
        }
        GridConfig {
            a_pairs,
            ..GridConfig::desk_scale(master_seed)
        }
    }
}

/// Tally of chosen orders for one `(pi1, a_pair, n)` grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCell {
    pub pi1: f64,
    pub a_pair: (f64, f64),
    pub n: usize,
    /// `counts[p - 1]` replications chose order `p`.
    pub counts: Vec<usize>,
    /// Replications that failed (counts then sum to `replications - failures`).
    pub failures: usize,
}

/// All cell tallies of one grid run.
#[derive(Debug, Clone, PartialEq)]
pub struct GridReport {
    pub p_max: usize,
    pub replications: usize,
    pub cells: Vec<GridCell>,
}

/// Simulate and select for every cell and replication of the grid.
pub fn run_linear_grid(cfg: &GridConfig) -> GridReport {
    let mut tasks = Vec::new();
    for (pi_idx, &pi1) in cfg.pi1_values.iter().enumerate() {
        for (a_idx, &a_pair) in cfg.a_pairs.iter().enumerate() {
            for (n_idx, &n) in cfg.n_values.iter().enumerate() {
                let cell = tasks.len() / cfg.replications;
                debug_assert_eq!(
                    cell,
                    (pi_idx * cfg.a_pairs.len() + a_idx) * cfg.n_values.len() + n_idx
                );
                for rep in 0..cfg.replications {
                    let seed = derive_seed(
                        cfg.master_seed,
                        &[pi_idx as u64, a_idx as u64, n_idx as u64, rep as u64],
                    );
                    tasks.push((cell, pi1, a_pair, n, seed));
                }
            }
        }
    }
    let outcomes: Vec<(usize, Option<usize>)> = tasks
        .par_iter()
        .map(|&(cell, pi1, a_pair, n, seed)| (cell, grid_replication(cfg, pi1, a_pair, n, seed)))
        .collect();

    let num_cells = cfg.pi1_values.len() * cfg.a_pairs.len() * cfg.n_values.len();
    let mut cells: Vec<GridCell> = Vec::with_capacity(num_cells);
    for &pi1 in &cfg.pi1_values {
        for &a_pair in &cfg.a_pairs {
            for &n in &cfg.n_values {
                cells.push(GridCell {
                    pi1,
                    a_pair,
                    n,
                    counts: vec![0; cfg.p_max],
                    failures: 0,
                });
            }
        }
    }
    for (cell, outcome) in outcomes {
        match outcome {
            Some(chosen) => cells[cell].counts[chosen - 1] += 1,
            None => cells[cell].failures += 1,
        }
    }
    GridReport {
        p_max: cfg.p_max,
        replications: cfg.replications,
        cells,
    }
}

fn grid_replication(
    cfg: &GridConfig,
    pi1: f64,
    a_pair: (f64, f64),
    n: usize,
    seed: u64,
) -> Option<usize> {
    let truth = MixtureModel::new(
        vec![
            Expert::Linear(LinearExpert {
                coeffs: vec![a_pair.0],
                intercept: cfg.b_pair.0,
                sigma: cfg.sigma,
            }),
            Expert::Linear(LinearExpert {
                coeffs: vec![a_pair.1],
                intercept: cfg.b_pair.1,
                sigma: cfg.sigma,
            }),
        ],
        vec![pi1, 1.0 - pi1],
    )
    .ok()?;
    let sim = simulate(&GenerativeSpec::new(truth), n, seed).ok()?;
    let fit_cfg = FitConfig {
        master_seed: derive_seed(seed, &[0xF17]),
        ..FitConfig::default()
    };
    let sel = select_order(
        &sim.series,
        cfg.p_max,
        ExpertSpec::Linear { lags: 1 },
        &fit_cfg,
        PenaltyMode::BicPerParameter,
    )
    .ok()?;
    Some(sel.chosen)
}

impl GridReport {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Csv => self.to_csv(),
            ReportFormat::Markdown => self.to_markdown(),
        }
    }

    fn to_csv(&self) -> String {
        let mut out = String::from("pi1,a1,a2,n");
        for p in 1..=self.p_max {
            out.push_str(&format!(",count_p{p}"));
        }
        out.push('\n');
        for cell in &self.cells {
            out.push_str(&format!(
                "{},{},{},{}",
                csv_field(&cell.pi1.to_string()),
                csv_field(&cell.a_pair.0.to_string()),
                csv_field(&cell.a_pair.1.to_string()),
                cell.n
            ));
            for &c in &cell.counts {
                out.push_str(&format!(",{c}"));
            }
            out.push('\n');
        }
        out
    }

    /// Markdown table with one row per `(a_pair, n)` and one column block
    /// per mixing weight.
    fn to_markdown(&self) -> String {
        let mut pi1s: Vec<f64> = Vec::new();
        let mut row_keys: Vec<((f64, f64), usize)> = Vec::new();
        for cell in &self.cells {
            if !pi1s.contains(&cell.pi1) {
                pi1s.push(cell.pi1);
            }
            if !row_keys.contains(&(cell.a_pair, cell.n)) {
                row_keys.push((cell.a_pair, cell.n));
            }
        }
        let mut out = String::from("| a1 | a2 | n |");
        for &pi1 in &pi1s {
            for p in 1..=self.p_max {
                out.push_str(&format!(" pi1={pi1}: p={p} |"));
            }
        }
        out.push('\n');
        out.push_str("|---|---|---|");
        for _ in 0..pi1s.len() * self.p_max {
            out.push_str("---|");
        }
        out.push('\n');
        for &(a_pair, n) in &row_keys {
            out.push_str(&format!("| {} | {} | {n} |", a_pair.0, a_pair.1));
            for &pi1 in &pi1s {
                let cell = self
                    .cells
                    .iter()
                    .find(|c| c.pi1 == pi1 && c.a_pair == a_pair && c.n == n);
                match cell {
                    Some(c) => {
                        for &count in &c.counts {
                            out.push_str(&format!(" {count} |"));
                        }
                    }
                    None => {
                        for _ in 0..self.p_max {
                            out.push_str(" - |");
                        }
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

/// RFC-4180-style quoting: fields containing commas, quotes or newlines are
/// wrapped in double quotes with inner quotes doubled.
fn csv_field(raw: &str) -> String {
    if raw.contains(',') || raw.contains('"') || raw.contains('\n') {
        format!("\"{}\"", raw.replace('"', "\"\""))
    } else {
        raw.to_string()
    }
}

/// Configuration of the laser-series MLP-mixture study.
#[derive(Debug, Clone)]
pub struct LaserConfig {
    pub data_path: PathBuf,
    pub lags: usize,
    pub hidden_units: usize,
    pub p_max: usize,
    pub restarts: usize,
    /// Subtract the mean and divide by the standard deviation before
    /// fitting. Raw laser intensities are integer counts up to ~255, which
    /// saturate tanh units at reasonable weight scales.
    pub standardize: bool,
    pub master_seed: u64,
}

impl LaserConfig {
    pub fn new(data_path: impl Into<PathBuf>) -> Self {
        LaserConfig {
            data_path: data_path.into(),
            lags: 10,
            hidden_units: 5,
            p_max: 3,
            restarts: 10,
            standardize: true,
            master_seed: 0,
        }
    }

    /// Restart budget used by the original study (100 initializations).
    pub fn paper_scale(mut self) -> Self {
        self.restarts = 100;
        self
    }
}

/// Per-order outcome of the laser study.
#[derive(Debug, Clone)]
pub struct LaserOrderFit {
    pub p: usize,
    pub loglik: f64,
    pub penalty: f64,
    pub criterion: f64,
    /// Fitted mixing weights in canonical (descending) order.
    pub weights: Vec<f64>,
}

/// Result of the laser study: one row per candidate order plus the
/// selected order.
#[derive(Debug, Clone)]
pub struct LaserReport {
    pub n: usize,
    pub standardized: bool,
    pub per_p: Vec<LaserOrderFit>,
    pub chosen: usize,
}

/// Load the series file, optionally standardize, and select the order of an
/// MLP-mixture fit.
pub fn run_laser(cfg: &LaserConfig) -> Result<LaserReport> {
    let raw = read_series_file(&cfg.data_path)?;
    if raw.len() < cfg.lags + 2 {
        return Err(Error::InsufficientData {
            needed: cfg.lags + 2,
            got: raw.len(),
        });
    }
    let series = if cfg.standardize { standardize(&raw)? } else { raw };
    let fit_cfg = FitConfig {
        restarts: cfg.restarts,
        master_seed: cfg.master_seed,
        ..FitConfig::default()
    };
    let sel = select_order(
        &series,
        cfg.p_max,
        ExpertSpec::Mlp {
            lags: cfg.lags,
            hidden_units: cfg.hidden_units,
        },
        &fit_cfg,
        PenaltyMode::BicPerParameter,
    )?;
    let per_p = sel
        .per_p
        .iter()
        .map(|of| LaserOrderFit {
            p: of.p,
            loglik: of.loglik,
            penalty: of.penalty,
            criterion: of.criterion,
            weights: of.fit.model.canonicalized().weights().to_vec(),
        })
        .collect();
    Ok(LaserReport {
        n: series.len(),
        standardized: cfg.standardize,
        per_p,
        chosen: sel.chosen,
    })
}

fn standardize(series: &SeriesData) -> Result<SeriesData> {
    let n = series.len() as f64;
    let mean = series.values().iter().sum::<f64>() / n;
    let var = series.values().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var <= 0.0 {
        return Err(Error::InvalidModel(
            "series is constant; cannot standardize".into(),
        ));
    }
    let sd = var.sqrt();
    SeriesData::new(series.values().iter().map(|v| (v - mean) / sd).collect())
}

impl LaserReport {
    pub fn render(&self, format: ReportFormat) -> String {
        render_order_table(&self.per_p, self.chosen, format)
    }
}

/// Shared per-order table renderer, also used by the CLI `select` report.
pub fn render_order_table(rows: &[LaserOrderFit], chosen: usize, format: ReportFormat) -> String {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("p,loglik,penalty,criterion,chosen,weights\n");
            for row in rows {
                let weights = row
                    .weights
                    .iter()
                    .map(|w| format!("{w:.6}"))
                    .collect::<Vec<_>>()
                    .join(";");
                out.push_str(&format!(
                    "{},{:.6},{:.6},{:.6},{},{}\n",
                    row.p,
                    row.loglik,
                    row.penalty,
                    row.criterion,
                    (row.p == chosen) as u8,
                    csv_field(&weights)
                ));
            }
            out
        }
        ReportFormat::Markdown => {
            let mut out = String::from("| p | loglik | penalty | criterion | chosen | weights |\n");
            out.push_str("|---|---|---|---|---|---|\n");
            for row in rows {
                let weights = row
                    .weights
                    .iter()
                    .map(|w| format!("{w:.4}"))
                    .collect::<Vec<_>>()
                    .join(", ");
                out.push_str(&format!(
                    "| {} | {:.6} | {:.6} | {:.6} | {} | ({weights}) |\n",
                    row.p,
                    row.loglik,
                    row.penalty,
                    row.criterion,
                    if row.p == chosen { "yes" } else { "" },
                ));
            }
            out
        }
    }
}

/// Read a plain-text series: one numeric sample per line, blank lines
/// ignored, leading and trailing whitespace tolerated.
pub fn read_series_file(path: &Path) -> Result<SeriesData> {
    let file = File::open(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut values = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let token = line.trim();
        if token.is_empty() {
            continue;
        }
        let value: f64 = token.parse().map_err(|_| Error::ParseSeries {
            path: path.to_path_buf(),
            line: idx + 1,
            token: token.to_string(),
        })?;
        if !value.is_finite() {
            return Err(Error::ParseSeries {
                path: path.to_path_buf(),
                line: idx + 1,
                token: token.to_string(),
            });
        }
        values.push(value);
    }
    SeriesData::new(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpExpert;
    use std::io::Write;

    #[test]
    fn empty_grid_renders_header_only() {
        let report = GridReport {
            p_max: 3,
            replications: 20,
            cells: vec![],
        };
        assert_eq!(report.render(ReportFormat::Csv), "pi1,a1,a2,n,count_p1,count_p2,count_p3\n");
    }

    #[test]
    fn single_cell_renders_pinned_row() {
        let report = GridReport {
            p_max: 3,
            replications: 20,
            cells: vec![GridCell {
                pi1: 0.5,
                a_pair: (0.1, 0.1),
                n: 200,
                counts: vec![20, 0, 0],
                failures: 0,
            }],
        };
        let csv = report.render(ReportFormat::Csv);
        let mut lines = csv.lines();
        lines.next();
        assert_eq!(lines.next(), Some("0.5,0.1,0.1,200,20,0,0"));
    }

    #[test]
    fn default_grid_renders_one_row_per_cell() {
        let cfg = GridConfig::desk_scale(0);
        let mut cells = Vec::new();
        for &pi1 in &cfg.pi1_values {
            for &a_pair in &cfg.a_pairs {
                for &n in &cfg.n_values {
                    cells.push(GridCell {
                        pi1,
                        a_pair,
                        n,
                        counts: vec![cfg.replications, 0, 0],
                        failures: 0,
                    });
                }
            }
        }
        let report = GridReport {
            p_max: cfg.p_max,
            replications: cfg.replications,
            cells,
        };
        let csv = report.render(ReportFormat::Csv);
        let expected = cfg.pi1_values.len() * cfg.a_pairs.len() * cfg.n_values.len();
        assert_eq!(csv.lines().count(), expected + 1);
        let md = report.render(ReportFormat::Markdown);
        // header + separator + one row per (a_pair, n)
        assert_eq!(md.lines().count(), 2 + cfg.a_pairs.len() * cfg.n_values.len());
    }

    #[test]
    fn tiny_grid_runs_and_is_deterministic() {
        let cfg = GridConfig {
            pi1_values: vec![0.5],
            a_pairs: vec![(0.1, 0.9)],
            n_values: vec![200],
            replications: 1,
            master_seed: 7,
            ..GridConfig::desk_scale(7)
        };
        let a = run_linear_grid(&cfg);
        assert_eq!(a.cells.len(), 1);
        let tally: usize = a.cells[0].counts.iter().sum();
        assert_eq!(tally + a.cells[0].failures, 1);
        let b = run_linear_grid(&cfg);
        assert_eq!(a, b);
    }

    #[test]
    fn csv_field_quotes_when_needed() {
        assert_eq!(csv_field("0.5"), "0.5");
        assert_eq!(csv_field("a,b"), "\"a,b\"");
        assert_eq!(csv_field("say \"hi\""), "\"say \"\"hi\"\"\"");
    }

    fn write_series(values: &[f64]) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        for v in values {
            writeln!(f, "{v}").unwrap();
        }
        f.flush().unwrap();
        f
    }

    #[test]
    fn read_series_handles_blanks_and_whitespace() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "1.5\n\n  2.5  \n-3\n").unwrap();
        f.flush().unwrap();
        let s = read_series_file(f.path()).unwrap();
        assert_eq!(s.values(), &[1.5, 2.5, -3.0]);
    }

    #[test]
    fn read_series_reports_bad_token_line() {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        write!(f, "1.0\nnot-a-number\n2.0\n").unwrap();
        f.flush().unwrap();
        match read_series_file(f.path()) {
            Err(Error::ParseSeries { line, token, .. }) => {
                assert_eq!(line, 2);
                assert_eq!(token, "not-a-number");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn read_series_missing_file_is_io_error() {
        let err = read_series_file(Path::new("/no/such/file.txt")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn laser_rejects_truncated_file() {
        let f = write_series(&[1.0, 2.0, 3.0]);
        let cfg = LaserConfig::new(f.path());
        match run_laser(&cfg) {
            Err(Error::InsufficientData { needed, got }) => {
                assert_eq!(needed, 12);
                assert_eq!(got, 3);
            }
            other => panic!("expected ingestion error, got {other:?}"),
        }
    }

    #[test]
    fn laser_rejects_constant_series() {
        let f = write_series(&[3.0; 40]);
        let cfg = LaserConfig::new(f.path());
        assert!(matches!(run_laser(&cfg), Err(Error::InvalidModel(_))));
    }

    #[test]
    fn laser_pipeline_completes_on_synthetic_mixture() {
        let truth = MixtureModel::new(
            vec![
                Expert::Mlp(MlpExpert {
                    lags: 1,
                    output_bias: 1.5,
                    output_weights: vec![1.0],
                    hidden_biases: vec![0.0],
                    hidden_weights: vec![0.8],
                    sigma: 0.3,
                }),
                Expert::Mlp(MlpExpert {
                    lags: 1,
                    output_bias: -1.5,
                    output_weights: vec![1.0],
                    hidden_biases: vec![0.0],
                    hidden_weights: vec![-0.8],
                    sigma: 0.3,
                }),
            ],
            vec![0.6, 0.4],
        )
        .unwrap();
        let sim = simulate(&GenerativeSpec::new(truth), 150, 31).unwrap();
        let f = write_series(sim.series.values());
        let cfg = LaserConfig {
            restarts: 2,
            ..LaserConfig::new(f.path())
        };
        let report = run_laser(&cfg).unwrap();
        assert!((1..=3).contains(&report.chosen));
        assert_eq!(report.per_p.len(), 3);
        for row in &report.per_p {
            assert_eq!(row.weights.len(), row.p);
            assert!(row.loglik.is_finite());
        }
        let csv = report.render(ReportFormat::Csv);
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with("p,loglik,penalty,criterion,chosen,weights\n"));
    }
}
