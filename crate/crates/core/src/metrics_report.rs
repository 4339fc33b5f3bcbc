//! Many/Medium/Few accuracy splits, the train−test overfit-gap line, and
//! the report files a run leaves behind.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::ClassProfile;
use crate::trainer::{Config, TrainingLog};

pub const EPOCHS_CSV: &str = "epochs.csv";
pub const PER_CLASS_CSV: &str = "per_class.csv";
pub const SUMMARY_JSON: &str = "summary.json";
pub const GAP_SVG: &str = "gap.svg";
pub const RUN_JSON: &str = "run.json";

/// Frequency cut-offs: Many is `n > many_above`, Few is `n ≤ few_at_most`,
/// Medium is everything between.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Thresholds {
    pub many_above: usize,
    pub few_at_most: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            many_above: 100,
            few_at_most: 20,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Thresholds {
    pub fn group_of(&self, count: usize) -> Group {
        if count > self.many_above {
            Group::Many
        } else if count > self.few_at_most {
            Group::Medium
        } else {
            Group::Few
        }
    }
}

/// Group means; a group with no member classes is `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
    pub all: f64,
    pub membership: Vec<Group>,
}

impl GroupReport {
    pub fn get(&self, g: Group) -> Option<f64> {
        match g {
            Group::Many => self.many,
            Group::Medium => self.medium,
            Group::Few => self.few,
        }
    }

    pub fn size(&self, g: Group) -> usize {
        self.membership.iter().filter(|&&m| m == g).count()
    }
}

pub fn group_accuracy(per_class_acc: &[f64], profile: &ClassProfile, thresholds: Thresholds) -> Result<GroupReport> {
    if per_class_acc.len() != profile.num_classes() {
        return Err(Error::shape(format!(
            "{} accuracies for {} classes",
            per_class_acc.len(),
            profile.num_classes()
        )));
    }
    let membership: Vec<Group> = profile.counts().iter().map(|&n| thresholds.group_of(n)).collect();
    let mean_of = |g: Group| {
        let vals: Vec<f64> = per_class_acc
            .iter()
            .zip(&membership)
            .filter(|(_, &m)| m == g)
            .map(|(a, _)| *a)
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(GroupReport {
        many: mean_of(Group::Many),
        medium: mean_of(Group::Medium),
        few: mean_of(Group::Few),
        all: per_class_acc.iter().sum::<f64>() / per_class_acc.len() as f64,
        membership,
    })
}

/// Least-squares line of train−test gap against frequency rank.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverfitFit {
    pub slope: f64,
    pub intercept: f64,
}

/// Ordinary least squares via the closed-form normal equations.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Result<OverfitFit> {
    if xs.len() != ys.len() {
        return Err(Error::shape(format!("{} x values for {} y values", xs.len(), ys.len())));
    }
    if xs.len() < 2 {
        return Err(Error::invalid("a line fit needs at least 2 points"));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::invalid("all x values coincide"));
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Ok(OverfitFit {
        slope,
        intercept: my - slope * mx,
    })
}

/// Class indices ordered by decreasing training count (ties by index).
pub fn frequency_order(profile: &ClassProfile) -> Vec<usize> {
    let mut order: Vec<usize> = (0..profile.num_classes()).collect();
    order.sort_by(|&a, &b| profile.counts()[b].cmp(&profile.counts()[a]).then(a.cmp(&b)));
    order
}

/// Final-epoch per-class `train_acc − test_acc`, indexed by class.
pub fn final_gaps(log: &TrainingLog) -> Result<Vec<f64>> {
    let last = log
        .last()
        .ok_or_else(|| Error::invalid("training log has no epochs"))?;
    Ok(last.train_acc.iter().zip(&last.test_acc).map(|(a, b)| a - b).collect())
}

/// Fits gap against rank, rank 0 being the most frequent class.
pub fn overfit_fit(log: &TrainingLog, profile: &ClassProfile) -> Result<OverfitFit> {
    if profile.num_classes() < 2 {
        return Err(Error::invalid("overfit fit needs at least 2 classes"));
    }
    let gaps = final_gaps(log)?;
    if gaps.len() != profile.num_classes() {
        return Err(Error::shape("log and profile disagree on the class count"));
    }
    let order = frequency_order(profile);
    let xs: Vec<f64> = (0..order.len()).map(|r| r as f64).collect();
    let ys: Vec<f64> = order.iter().map(|&c| gaps[c]).collect();
    fit_line(&xs, &ys)
}

/// Contents of `summary.json`: final test groups, final overall train
/// accuracy, the gap fit, and the config flattened to dotted keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub many: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub medium: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub few: Option<f64>,
    pub all: f64,
    pub train_all: f64,
    pub slope: f64,
    pub intercept: f64,
    pub epochs: usize,
    #[serde(flatten)]
    pub config: BTreeMap<String, serde_json::Value>,
}

fn flatten_json(prefix: &str, v: &serde_json::Value, out: &mut BTreeMap<String, serde_json::Value>) {
    match v {
        serde_json::Value::Object(map) => {
            for (k, child) in map {
                flatten_json(&format!("{prefix}.{k}"), child, out);
            }
        }
        other => {
            out.insert(prefix.to_string(), other.clone());
        }
    }
}

/// `config` as `"config.section.key" → value`.
pub fn config_echo(config: &Config) -> BTreeMap<String, serde_json::Value> {
    let mut out = BTreeMap::new();
    let v = serde_json::to_value(config).expect("config serializes");
    flatten_json("config", &v, &mut out);
    out
}

impl Summary {
    pub fn new(log: &TrainingLog, report: &GroupReport, fit: &OverfitFit, config: &Config) -> Self {
        let train_all = log.last().map_or(0.0, |e| mean(&e.train_acc));
        Self {
            many: report.many,
            medium: report.medium,
            few: report.few,
            all: report.all,
            train_all,
            slope: fit.slope,
            intercept: fit.intercept,
            epochs: log.epochs.len(),
            config: config_echo(config),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes") + "\n"
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("summary.json: {e}")))
    }
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

fn opt_cell(v: Option<f64>) -> String {
    v.map(|a| format!("{a:.6}")).unwrap_or_default()
}

pub fn epochs_csv(log: &TrainingLog, thresholds: Thresholds) -> Result<String> {
    let profile = ClassProfile::new(log.train_counts.clone())?;
    let mut out = String::from("epoch,lr,loss,ce_component,scl_component,all,many,medium,few\n");
    for e in &log.epochs {
        let g = group_accuracy(&e.test_acc, &profile, thresholds)?;
        writeln!(
            out,
            "{},{:.8},{:.8},{:.8},{:.8},{:.6},{},{},{}",
            e.epoch,
            e.lr,
            e.loss,
            e.ce_component,
            e.scl_component,
            g.all,
            opt_cell(g.many),
            opt_cell(g.medium),
            opt_cell(g.few)
        )
        .expect("string write");
    }
    Ok(out)
}

pub fn per_class_csv(log: &TrainingLog) -> Result<String> {
    let last = log
        .last()
        .ok_or_else(|| Error::invalid("training log has no epochs"))?;
    let mut out = String::from("class,n_c,train_acc,test_acc,gap\n");
    for (c, n) in log.train_counts.iter().enumerate() {
        let (tr, te) = (last.train_acc[c], last.test_acc[c]);
        writeln!(out, "{c},{n},{tr:.6},{te:.6},{:.6}", tr - te).expect("string write");
    }
    Ok(out)
}

/// Scatter of gap against frequency rank with the fitted line.
pub fn gap_svg(log: &TrainingLog, fit: &OverfitFit) -> Result<String> {
    let profile = ClassProfile::new(log.train_counts.clone())?;
    let gaps = final_gaps(log)?;
    let order = frequency_order(&profile);
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let n = order.len() as f64;
    let px = |r: f64| pad + (w - 2.0 * pad) * r / (n - 1.0).max(1.0);
    // gap ∈ [−1, 1]
    let py = |g: f64| h / 2.0 - (h / 2.0 - pad) * g.clamp(-1.0, 1.0);
    let mut out = String::new();
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .expect("string write");
    writeln!(
        out,
        r##"<line x1="{pad}" y1="{mid}" x2="{x2}" y2="{mid}" stroke="#bbb"/>"##,
        mid = py(0.0),
        x2 = w - pad
    )
    .expect("string write");
    out.push_str("<g fill=\"#1f77b4\">\n");
    for (rank, &c) in order.iter().enumerate() {
        writeln!(out, r#"<circle cx="{:.2}" cy="{:.2}" r="3"/>"#, px(rank as f64), py(gaps[c])).expect("string write");
    }
    out.push_str("</g>\n");
    let last = n - 1.0;
    writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#d62728" stroke-width="2"/>"##,
        px(0.0),
        py(fit.intercept),
        px(last),
        py(fit.intercept + fit.slope * last)
    )
    .expect("string write");
    out.push_str("</svg>\n");
    Ok(out)
}

/// Everything needed to regenerate a report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub config: Config,
    pub log: TrainingLog,
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Writes `epochs.csv`, `per_class.csv`, `summary.json`, `gap.svg` and
/// `run.json` into `output_dir`, creating it if needed.
pub fn emit_report(
    log: &TrainingLog,
    report: &GroupReport,
    fit: &OverfitFit,
    config: &Config,
    output_dir: &Path,
) -> Result<Summary> {
    fs::create_dir_all(output_dir).map_err(|e| Error::io(format!("creating {}", output_dir.display()), e))?;
    let summary = Summary::new(log, report, fit, config);
    write_file(output_dir, EPOCHS_CSV, &epochs_csv(log, config.thresholds())?)?;
    write_file(output_dir, PER_CLASS_CSV, &per_class_csv(log)?)?;
    write_file(output_dir, SUMMARY_JSON, &summary.to_json())?;
    write_file(output_dir, GAP_SVG, &gap_svg(log, fit)?)?;
    let record = RunRecord {
        config: config.clone(),
        log: log.clone(),
    };
    let json = serde_json::to_string(&record).expect("run record serializes");
    write_file(output_dir, RUN_JSON, &json)?;
    Ok(summary)
}

/// Final group report and gap fit for a finished log.
pub fn analyze(log: &TrainingLog, thresholds: Thresholds) -> Result<(GroupReport, OverfitFit)> {
    let profile = ClassProfile::new(log.train_counts.clone())?;
    let last = log
        .last()
        .ok_or_else(|| Error::invalid("training log has no epochs"))?;
    let report = group_accuracy(&last.test_acc, &profile, thresholds)?;
    let fit = overfit_fit(log, &profile)?;
    Ok((report, fit))
}

pub fn emit_run(log: &TrainingLog, config: &Config, output_dir: &Path) -> Result<Summary> {
    let (report, fit) = analyze(log, config.thresholds())?;
    emit_report(log, &report, &fit, config, output_dir)
}

pub fn read_run(dir: &Path) -> Result<RunRecord> {
    let path = dir.join(RUN_JSON);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

/// Many/Medium/Few/All table in percent.
pub fn format_table(rows: &[(String, GroupReport)]) -> String {
    let cell = |v: Option<f64>| v.map_or_else(|| "-".to_string(), |a| format!("{:.1}", 100.0 * a));
    let mut out = format!("{:<16} {:>6} {:>6} {:>6} {:>6}\n", "", "Many", "Medium", "Few", "All");
    for (name, g) in rows {
        writeln!(
            out,
            "{:<16} {:>6} {:>6} {:>6} {:>6}",
            name,
            cell(g.many),
            cell(g.medium),
            cell(g.few),
            cell(Some(g.all))
        )
        .expect("string write");
    }
    out
}
