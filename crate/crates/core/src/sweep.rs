//! Grid sweeps: one training run per (value, seed) cell, aggregated by
//! per-value medians.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::metrics_report::{emit_run, Summary};
use crate::trainer::config::toml_error;
use crate::trainer::{train, Config};

pub const SWEEP_CSV: &str = "sweep.csv";
pub const FAILURES_TXT: &str = "failures.txt";

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2, 3, 4]
}

/// A sweep file.
///
/// ```toml
/// base_config = "cibl.toml"
/// parameter = "loss.lambda_scl"
/// values = [0.0, 0.01, 0.05, 0.1]
/// seeds = [0, 1, 2, 3, 4]
/// output_dir = "../runs/lambda"
///
/// [overrides]
/// "optim.epochs" = 30
/// ```
///
/// Relative paths resolve against the sweep file's directory.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub base_config: PathBuf,
    /// Dotted config path, e.g. `loss.lambda_scl`.
    pub parameter: String,
    pub values: Vec<toml::Value>,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    /// Fixed dotted-path overrides applied to every cell before the swept
    /// value.
    #[serde(default)]
    pub overrides: toml::Table,
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text =
            fs::read_to_string(path).map_err(|e| Error::io(format!("reading sweep spec {}", path.display()), e))?;
        let mut spec: SweepSpec = toml::from_str(&text).map_err(|e| toml_error(path, &text, &e))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut spec.base_config, &mut spec.output_dir] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::Config("sweep needs at least one value".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("sweep needs at least one seed".into()));
        }
        if self.parameter.split('.').any(str::is_empty) {
            return Err(Error::Config(format!("bad parameter path {:?}", self.parameter)));
        }
        Ok(())
    }
}

/// Sets `table[a][b]…[z] = value` for the path `a.b.….z`, creating
/// missing intermediate tables.
pub fn set_path(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<()> {
    let parts: Vec<&str> = dotted.split('.').collect();
    let (last, parents) = parts.split_last().ok_or_else(|| Error::Config("empty parameter path".into()))?;
    let mut cur = table;
    for p in parents {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{dotted}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// How a value appears in directory names and `sweep.csv`.
pub fn value_label(v: &toml::Value) -> String {
    match v {
        toml::Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn as_number(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

/// Numbers ascending, then everything else by label.
fn value_order(a: &toml::Value, b: &toml::Value) -> std::cmp::Ordering {
    match (as_number(a), as_number(b)) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => value_label(a).cmp(&value_label(b)),
    }
}

/// The config one cell trains with.
pub fn cell_config(base: &toml::Table, base_dir: &Path, spec: &SweepSpec, value: &toml::Value, seed: u64) -> Result<Config> {
    let mut table = base.clone();
    for (k, v) in &spec.overrides {
        set_path(&mut table, k, v.clone())?;
    }
    set_path(&mut table, &spec.parameter, value.clone())?;
    set_path(&mut table, "run.seed", toml::Value::Integer(seed as i64))?;
    let cfg: Config = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(format!("{}: {}", spec.parameter, e.message())))?;
    let cfg = cfg.with_paths_relative_to(base_dir);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellOutcome {
    pub value: String,
    pub seed: u64,
    pub dir: PathBuf,
    pub result: std::result::Result<Summary, String>,
}

/// Per-value medians over the cells that finished.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub value: String,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: Option<f64>,
    pub train_all: Option<f64>,
    pub slope: Option<f64>,
    pub intercept: Option<f64>,
    pub succeeded: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub cells: Vec<CellOutcome>,
}

impl SweepResult {
    pub fn failures(&self) -> impl Iterator<Item = &CellOutcome> {
        self.cells.iter().filter(|c| c.result.is_err())
    }
}

/// Median of the values present; `None` when there are none.
pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

fn aggregate(value: &str, cells: &[&CellOutcome]) -> SweepRow {
    let ok: Vec<&Summary> = cells.iter().filter_map(|c| c.result.as_ref().ok()).collect();
    let med = |f: &dyn Fn(&Summary) -> Option<f64>| median(&ok.iter().filter_map(|s| f(s)).collect::<Vec<_>>());
    SweepRow {
        value: value.to_string(),
        many: med(&|s| s.many),
        medium: med(&|s| s.medium),
        few: med(&|s| s.few),
        all: med(&|s| Some(s.all)),
        train_all: med(&|s| Some(s.train_all)),
        slope: med(&|s| Some(s.slope)),
        intercept: med(&|s| Some(s.intercept)),
        succeeded: ok.len(),
        failed: cells.len() - ok.len(),
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let cell = |v: Option<f64>| v.map(|a| format!("{a:.6}")).unwrap_or_default();
    let mut out = String::from("value,many,medium,few,all,train_acc,slope,intercept,succeeded,failed\n");
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.value,
            cell(r.many),
            cell(r.medium),
            cell(r.few),
            cell(r.all),
            cell(r.train_all),
            cell(r.slope),
            cell(r.intercept),
            r.succeeded,
            r.failed
        )
        .expect("string write");
    }
    out
}

fn run_cell(config: Result<Config>, dir: &Path) -> std::result::Result<Summary, String> {
    let config = config.map_err(|e| e.to_string())?;
    let log = train(&config).map_err(|e| e.to_string())?;
    emit_run(&log, &config, dir).map_err(|e| e.to_string())
}

/// Runs every cell on up to `jobs` threads, each writing its own
/// subdirectory, then writes `sweep.csv` (and `failures.txt` if any cell
/// failed). A failing cell does not stop the sweep.
pub fn run_sweep(spec: &SweepSpec, jobs: usize) -> Result<SweepResult> {
    spec.validate()?;
    let base_text = fs::read_to_string(&spec.base_config)
        .map_err(|e| Error::io(format!("reading base config {}", spec.base_config.display()), e))?;
    let base: toml::Table =
        toml::from_str(&base_text).map_err(|e| toml_error(&spec.base_config, &base_text, &e))?;
    let base_dir = spec.base_config.parent().unwrap_or(Path::new("")).to_path_buf();
    let param_slug = spec.parameter.replace('.', "_");

    let mut tasks = Vec::new();
    for value in &spec.values {
        let label = value_label(value);
        for &seed in &spec.seeds {
            let dir = spec.output_dir.join(format!("{param_slug}={label}")).join(format!("seed{seed}"));
            tasks.push((value.clone(), label.clone(), seed, dir));
        }
    }
    fs::create_dir_all(&spec.output_dir)
        .map_err(|e| Error::io(format!("creating {}", spec.output_dir.display()), e))?;

    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<CellOutcome>>> = Mutex::new(vec![None; tasks.len()]);
    std::thread::scope(|scope| {
        for _ in 0..jobs.clamp(1, tasks.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some((value, label, seed, dir)) = tasks.get(i) else {
                    break;
                };
                let config = cell_config(&base, &base_dir, spec, value, *seed);
                let outcome = CellOutcome {
                    value: label.clone(),
                    seed: *seed,
                    dir: dir.clone(),
                    result: run_cell(config, dir),
                };
                results.lock().expect("no poisoned lock")[i] = Some(outcome);
            });
        }
    });
    let cells: Vec<CellOutcome> = results
        .into_inner()
        .expect("no poisoned lock")
        .into_iter()
        .map(|c| c.expect("every task ran"))
        .collect();

    let mut ordered: Vec<&toml::Value> = spec.values.iter().collect();
    ordered.sort_by(|a, b| value_order(a, b));
    let rows: Vec<SweepRow> = ordered
        .into_iter()
        .map(|v| {
            let label = value_label(v);
            let mine: Vec<&CellOutcome> = cells.iter().filter(|c| c.value == label).collect();
            aggregate(&label, &mine)
        })
        .collect();

    let csv_path = spec.output_dir.join(SWEEP_CSV);
    fs::write(&csv_path, sweep_csv(&rows)).map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
    let failures: Vec<String> = cells
        .iter()
        .filter_map(|c| c.result.as_ref().err().map(|e| format!("{} seed {}: {e}", c.value, c.seed)))
        .collect();
    if !failures.is_empty() {
        let path = spec.output_dir.join(FAILURES_TXT);
        fs::write(&path, failures.join("\n") + "\n").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok(SweepResult { rows, cells })
}
