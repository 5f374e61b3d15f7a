//! Comparison tables over training run directories.

use std::path::{Path, PathBuf};

use derl::eval::MetricsReport;
use derl::losses::Method;
use derl::problems::ProblemName;

use crate::CliError;

#[derive(Debug, Clone, PartialEq)]
pub struct Row {
    pub run: PathBuf,
    pub method: Option<Method>,
    pub seed: Option<u64>,
    pub problem: Option<ProblemName>,
    /// `None` marks a run without readable metrics
    pub metrics: Option<MetricsReport>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Row>,
}

impl Table {
    /// Some runs had no readable metrics.
    pub fn has_missing(&self) -> bool {
        self.rows.iter().any(|r| r.metrics.is_none())
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
        let mut header = vec!["run".to_string(), "problem".into(), "method".into(), "seed".into(), "status".into()];
        header.extend(self.columns.iter().cloned());
        w.write_record(&header).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.run.display().to_string(),
                r.problem.map(|p| p.as_str().to_string()).unwrap_or_default(),
                r.method.map(|m| m.as_str().to_string()).unwrap_or_default(),
                r.seed.map(|s| s.to_string()).unwrap_or_default(),
                r.note.clone(),
            ];
            let scalars = r.metrics.as_ref().map(|m| m.scalars()).unwrap_or_default();
            for c in &self.columns {
                rec.push(
                    scalars
                        .iter()
                        .find(|(n, _)| n == c)
                        .map(|(_, v)| format!("{v:e}"))
                        .unwrap_or_default(),
                );
            }
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
    }
}

fn read_row(dir: &Path) -> Row {
    let mut row = Row {
        run: dir.to_path_buf(),
        method: None,
        seed: None,
        problem: None,
        metrics: None,
        note: "ok".into(),
    };
    if let Ok(text) = std::fs::read_to_string(dir.join("manifest.json")) {
        if let Ok(m) = serde_json::from_str::<serde_json::Value>(&text) {
            row.method = serde_json::from_value(m["method"].clone()).ok();
            row.seed = m["seed"].as_u64();
        }
    }
    match MetricsReport::load(dir.join("metrics.json")) {
        Ok(r) => {
            row.problem = Some(r.problem);
            row.metrics = Some(r);
        }
        Err(e) => row.note = format!("missing metrics: {e}"),
    }
    row
}

fn column_rank(name: &str) -> (usize, usize) {
    const FIXED: [&str; 3] = ["l2_u", "l2_du", "residual"];
    if let Some(i) = FIXED.iter().position(|f| *f == name) {
        return (i, 0);
    }
    if let Some(k) = name.strip_prefix("residual_").and_then(|k| k.parse().ok()) {
        return (3, k);
    }
    const EXTRA: [&str; 3] = ["vorticity_err", "g_residual", "field_err_t0"];
    (4 + EXTRA.iter().position(|f| *f == name).unwrap_or(EXTRA.len()), 0)
}

fn method_rank(m: Option<Method>) -> usize {
    m.and_then(|m| Method::ALL.iter().position(|x| *x == m)).unwrap_or(Method::ALL.len())
}

/// One row per run directory, sorted by the declared method order, then
/// seed, then path. Runs of different problems are rejected.
pub fn build(dirs: &[PathBuf]) -> Result<Table, CliError> {
    let mut rows: Vec<Row> = dirs.iter().map(|d| read_row(d)).collect();
    let mut problems: Vec<ProblemName> = rows.iter().filter_map(|r| r.problem).collect();
    problems.sort_by_key(|p| p.as_str());
    problems.dedup();
    if problems.len() > 1 {
        let names: Vec<&str> = problems.iter().map(|p| p.as_str()).collect();
        return Err(CliError::Rejected(format!(
            "runs mix problems ({}); compare one problem at a time",
            names.join(", ")
        )));
    }
    rows.sort_by(|a, b| {
        (method_rank(a.method), a.seed, &a.run).cmp(&(method_rank(b.method), b.seed, &b.run))
    });
    let mut columns: Vec<String> = Vec::new();
    for r in &rows {
        for (name, _) in r.metrics.as_ref().map(|m| m.scalars()).unwrap_or_default() {
            if !columns.contains(&name) {
                columns.push(name);
            }
        }
    }
    columns.sort_by_key(|c| column_rank(c));
    Ok(Table { columns, rows })
}
