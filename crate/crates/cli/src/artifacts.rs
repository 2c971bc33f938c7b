//! Readers and writers for every file the pipeline emits.
//!
//! All tables are comma-separated with a fixed header. Floats are
//! written in shortest round-trip form and read back with the standard
//! parser, so write-then-read reproduces values bit for bit (NaN and
//! infinity included, spelled `NaN` / `inf` / `-inf`).

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

use cadport_core::dbscan::{ClusterAssignment, ClusterLabel};
use cadport_core::linalg::Matrix;
use cadport_core::market::{DataSplit, Date, IndicatorPanel, INDICATOR_COUNT, INDICATOR_NAMES};

pub fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn parse_f64(raw: &str, what: &str) -> Result<f64> {
    raw.trim().parse::<f64>().map_err(|_| anyhow::anyhow!("{what}: '{raw}' is not a number"))
}

fn split_rows(text: &str, header: &str) -> Result<Vec<String>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == header => {}
        other => bail!("expected header '{header}', got {other:?}"),
    }
    Ok(lines.filter(|l| !l.trim().is_empty()).map(String::from).collect())
}

// -------- manifest --------

pub const MANIFEST_HEADER: &str = "symbol,file";

/// `symbol,file` rows; paths are kept as written (resolved by the
/// caller against the manifest's directory).
pub fn manifest_to_csv(entries: &[(String, String)]) -> String {
    let mut out = String::from(MANIFEST_HEADER);
    out.push('\n');
    for (symbol, file) in entries {
        out.push_str(&format!("{symbol},{file}\n"));
    }
    out
}

pub fn manifest_from_csv(text: &str) -> Result<Vec<(String, String)>> {
    let mut entries = Vec::new();
    for row in split_rows(text, MANIFEST_HEADER)? {
        let (symbol, file) =
            row.split_once(',').with_context(|| format!("bad manifest row '{row}'"))?;
        if symbol.is_empty() || file.is_empty() {
            bail!("bad manifest row '{row}'");
        }
        entries.push((symbol.to_string(), file.to_string()));
    }
    if entries.is_empty() {
        bail!("manifest lists no files");
    }
    Ok(entries)
}

// -------- named-column matrices (ratio matrix) --------

/// Header = column names; one float row per record.
pub fn matrix_to_csv(columns: &[String], m: &Matrix) -> Result<String> {
    if columns.len() != m.cols {
        bail!("{} column names for a {}-column matrix", columns.len(), m.cols);
    }
    let mut out = columns.join(",");
    out.push('\n');
    for r in 0..m.rows {
        for c in 0..m.cols {
            if c > 0 {
                out.push(',');
            }
            out.push_str(&format!("{}", m.get(r, c)));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn matrix_from_csv(text: &str) -> Result<(Vec<String>, Matrix)> {
    let mut lines = text.lines();
    let header = lines.next().context("empty matrix file")?;
    let columns: Vec<String> = header.split(',').map(String::from).collect();
    if columns.iter().any(String::is_empty) {
        bail!("blank column name in header '{header}'");
    }
    let mut data = Vec::new();
    let mut rows = 0;
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            bail!("row {rows} has {} fields, header has {}", fields.len(), columns.len());
        }
        for raw in fields {
            data.push(parse_f64(raw, "matrix cell")?);
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("matrix file has no rows");
    }
    Ok((columns.clone(), Matrix::from_vec(rows, columns.len(), data)))
}

// -------- split --------

pub const SPLIT_HEADER: &str = "section,start,end";

pub fn split_to_csv(split: &DataSplit) -> String {
    format!(
        "{SPLIT_HEADER}\ntrain,{},{}\nvalidation,{},{}\ntest,{},{}\n",
        split.train.start,
        split.train.end,
        split.validation.start,
        split.validation.end,
        split.test.start,
        split.test.end
    )
}

pub fn split_from_csv(text: &str) -> Result<DataSplit> {
    let rows = split_rows(text, SPLIT_HEADER)?;
    let mut ranges = Vec::new();
    for (row, want) in rows.iter().zip(["train", "validation", "test"]) {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 || fields[0] != want {
            bail!("expected a '{want}' row, got '{row}'");
        }
        let start: usize = fields[1].parse().with_context(|| format!("start of '{row}'"))?;
        let end: usize = fields[2].parse().with_context(|| format!("end of '{row}'"))?;
        ranges.push(start..end);
    }
    if ranges.len() != 3 {
        bail!("split file must list train, validation and test");
    }
    Ok(DataSplit {
        train: ranges[0].clone(),
        validation: ranges[1].clone(),
        test: ranges[2].clone(),
    })
}

// -------- indicator panels --------

fn panel_header() -> String {
    let mut h = String::from("date");
    for name in INDICATOR_NAMES {
        h.push(',');
        h.push_str(name);
    }
    h
}

pub fn panel_to_csv(panel: &IndicatorPanel) -> String {
    let mut out = panel_header();
    out.push('\n');
    for r in 0..panel.records() {
        out.push_str(&format!("{}", panel.dates[r]));
        for c in 0..INDICATOR_COUNT {
            out.push_str(&format!(",{}", panel.values.get(r, c)));
        }
        out.push('\n');
    }
    out
}

pub fn panel_from_csv(text: &str, symbol: &str) -> Result<IndicatorPanel> {
    let rows = split_rows(text, &panel_header())?;
    if rows.is_empty() {
        bail!("panel for {symbol} has no records");
    }
    let mut dates = Vec::with_capacity(rows.len());
    let mut values = Matrix::zeros(rows.len(), INDICATOR_COUNT);
    for (r, row) in rows.iter().enumerate() {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 1 + INDICATOR_COUNT {
            bail!("panel row {r} has {} fields", fields.len());
        }
        dates.push(Date::parse(fields[0]).with_context(|| format!("panel row {r}"))?);
        for c in 0..INDICATOR_COUNT {
            values.set(r, c, parse_f64(fields[1 + c], "panel cell")?);
        }
    }
    Ok(IndicatorPanel { symbol: symbol.to_string(), dates, values })
}

// -------- embedding and clusters --------

pub const EMBEDDING_HEADER: &str = "symbol,x,y";

pub fn embedding_to_csv(symbols: &[String], points: &[[f64; 2]]) -> Result<String> {
    if symbols.len() != points.len() {
        bail!("{} symbols for {} points", symbols.len(), points.len());
    }
    let mut out = String::from(EMBEDDING_HEADER);
    out.push('\n');
    for (s, p) in symbols.iter().zip(points) {
        out.push_str(&format!("{s},{},{}\n", p[0], p[1]));
    }
    Ok(out)
}

pub fn embedding_from_csv(text: &str) -> Result<(Vec<String>, Vec<[f64; 2]>)> {
    let mut symbols = Vec::new();
    let mut points = Vec::new();
    for row in split_rows(text, EMBEDDING_HEADER)? {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            bail!("bad embedding row '{row}'");
        }
        symbols.push(fields[0].to_string());
        points.push([parse_f64(fields[1], "x")?, parse_f64(fields[2], "y")?]);
    }
    if symbols.is_empty() {
        bail!("embedding file has no rows");
    }
    Ok((symbols, points))
}

pub const CLUSTERS_HEADER: &str = "symbol,cluster_id";

/// One row per stock in input order; noise is cluster id -1.
pub fn clusters_to_csv(symbols: &[String], assignment: &ClusterAssignment) -> Result<String> {
    if symbols.len() != assignment.labels.len() {
        bail!("{} symbols for {} labels", symbols.len(), assignment.labels.len());
    }
    let mut out = String::from(CLUSTERS_HEADER);
    out.push('\n');
    for (s, label) in symbols.iter().zip(&assignment.labels) {
        out.push_str(&format!("{s},{}\n", label.as_i64()));
    }
    Ok(out)
}

pub fn clusters_from_csv(text: &str) -> Result<(Vec<String>, ClusterAssignment)> {
    let mut symbols = Vec::new();
    let mut labels = Vec::new();
    for row in split_rows(text, CLUSTERS_HEADER)? {
        let (symbol, id) =
            row.split_once(',').with_context(|| format!("bad cluster row '{row}'"))?;
        let id: i64 = id.trim().parse().with_context(|| format!("cluster id in '{row}'"))?;
        symbols.push(symbol.to_string());
        labels.push(match id {
            -1 => ClusterLabel::Noise,
            n if n >= 0 => ClusterLabel::Cluster(n as usize),
            n => bail!("cluster id {n} out of range"),
        });
    }
    if symbols.is_empty() {
        bail!("cluster file has no rows");
    }
    let n_clusters = labels
        .iter()
        .map(|l| match l {
            ClusterLabel::Cluster(c) => c + 1,
            ClusterLabel::Noise => 0,
        })
        .max()
        .unwrap_or(0);
    Ok((symbols, ClusterAssignment { labels, n_clusters }))
}

// -------- training traces --------

pub const A3C_TRACE_HEADER: &str = "epoch,policy_loss,critic_loss,accuracy";

pub fn a3c_trace_to_csv(trace: &[cadport_core::a3c::EpochStats]) -> String {
    let mut out = String::from(A3C_TRACE_HEADER);
    out.push('\n');
    for e in trace {
        out.push_str(&format!("{},{},{},{}\n", e.epoch, e.policy_loss, e.critic_loss, e.accuracy));
    }
    out
}

pub const REWARD_TRACE_HEADER: &str = "step,reward,critic_loss";

pub fn reward_trace_to_csv(trace: &[cadport_core::hedge::HedgeStepTrace]) -> String {
    let mut out = String::from(REWARD_TRACE_HEADER);
    out.push('\n');
    for e in trace {
        out.push_str(&format!("{},{},{}\n", e.step, e.reward, e.critic_loss));
    }
    out
}

pub fn reward_trace_from_csv(text: &str) -> Result<Vec<cadport_core::hedge::HedgeStepTrace>> {
    let mut trace = Vec::new();
    for row in split_rows(text, REWARD_TRACE_HEADER)? {
        let fields: Vec<&str> = row.split(',').collect();
        if fields.len() != 3 {
            bail!("bad trace row '{row}'");
        }
        trace.push(cadport_core::hedge::HedgeStepTrace {
            step: fields[0].parse().with_context(|| format!("step in '{row}'"))?,
            reward: parse_f64(fields[1], "reward")?,
            critic_loss: parse_f64(fields[2], "critic_loss")?,
        });
    }
    Ok(trace)
}

// -------- weight history --------

/// `period,w1,..,wn`; w1 is the cash slot, the rest follow the symbol
/// order of the ratio matrix.
pub fn weights_to_csv(weights: &[Vec<f64>]) -> Result<String> {
    let width = weights.first().map(Vec::len).unwrap_or(0);
    if width == 0 {
        bail!("no weight rows to write");
    }
    let mut out = String::from("period");
    for i in 1..=width {
        out.push_str(&format!(",w{i}"));
    }
    out.push('\n');
    for (t, row) in weights.iter().enumerate() {
        if row.len() != width {
            bail!("weight row {t} has {} entries, expected {width}", row.len());
        }
        out.push_str(&format!("{t}"));
        for v in row {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn weights_from_csv(text: &str) -> Result<Vec<Vec<f64>>> {
    let mut lines = text.lines();
    let header = lines.next().context("empty weights file")?;
    let width = header.split(',').count().saturating_sub(1);
    if !header.starts_with("period,w1") || width == 0 {
        bail!("bad weights header '{header}'");
    }
    let mut weights = Vec::new();
    for line in lines {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != width + 1 {
            bail!("weight row '{line}' has {} fields", fields.len());
        }
        let period: usize = fields[0].parse().with_context(|| format!("period in '{line}'"))?;
        if period != weights.len() {
            bail!("period {period} out of order");
        }
        let row: Result<Vec<f64>> =
            fields[1..].iter().map(|raw| parse_f64(raw, "weight")).collect();
        weights.push(row?);
    }
    if weights.is_empty() {
        bail!("weights file has no rows");
    }
    Ok(weights)
}

// -------- trade ledger --------

pub const LEDGER_HEADER: &str = "stock,side,notional,commission";

pub fn ledger_to_csv(ledger: &cadport_core::trading::TradeLedger) -> String {
    let mut out = String::from(LEDGER_HEADER);
    out.push('\n');
    for e in &ledger.entries {
        out.push_str(&format!("{},{},{},{}\n", e.stock, e.side.as_str(), e.notional, e.commission));
    }
    out
}

// -------- convenience paths --------

pub fn panel_path(dir: &Path, symbol: &str) -> PathBuf {
    dir.join("panels").join(format!("{symbol}.csv"))
}
