//! Grid search over adaptation configurations with a resumable result store,
//! aggregation by corruption kind and level, hyper-parameter selection at
//! three granularities, the per-image oracle, and the entropy-proxy
//! least-squares analysis.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::adapter::{ParamScope, SegmentationModel};
use crate::corruptions::{CorpusIndex, CorruptionKind};
use crate::error::{Error, Result};
use crate::image::{load_image, load_mask};
use crate::metrics::error_reduction;
use crate::scalar::Scalar;
use crate::tta::{adapt_single_image, Auxiliaries, LossKind, Method, TTAConfig};

/// One (image, config) grid cell. `per_iter_miou_i[0]` is the non-adapted
/// value; diverged rows fall back to it at every iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub image_id: String,
    pub kind: CorruptionKind,
    pub level: u8,
    pub method: Method,
    pub loss: LossKind,
    pub scope: ParamScope,
    pub lr: f64,
    pub iterations: usize,
    pub config_key: String,
    pub diverged: bool,
    pub na_entropy: f64,
    pub na_miou_i: f64,
    pub per_iter_miou_i: Vec<f64>,
}

impl ResultRow {
    /// Unique key of the corpus image this row belongs to.
    pub fn image_key(&self) -> String {
        format!("{}__{}__L{}", self.image_id, self.kind, self.level)
    }

    /// Score after `t` iterations; divergence counts as the NA value.
    pub fn value_at(&self, t: usize) -> f64 {
        if self.diverged {
            return self.na_miou_i;
        }
        let idx = t.min(self.per_iter_miou_i.len().saturating_sub(1));
        self.per_iter_miou_i[idx]
    }

    pub fn final_value(&self) -> f64 {
        self.value_at(self.iterations)
    }
}

#[derive(Debug, Clone, Default)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn sort_canonical(&mut self) {
        self.rows.sort_by(|a, b| {
            (a.image_id.as_str(), a.kind.name(), a.level, a.config_key.as_str()).cmp(&(
                b.image_id.as_str(),
                b.kind.name(),
                b.level,
                b.config_key.as_str(),
            ))
        });
    }

    pub fn filter<F: Fn(&ResultRow) -> bool>(&self, keep: F) -> ResultTable {
        ResultTable {
            rows: self.rows.iter().filter(|r| keep(r)).cloned().collect(),
        }
    }

    pub fn config_keys(&self) -> Vec<String> {
        let mut keys: Vec<String> = self.rows.iter().map(|r| r.config_key.clone()).collect();
        keys.sort();
        keys.dedup();
        keys
    }

    /// Canonical CSV rendering; the iteration trace is `|`-joined.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "image_id,kind,level,method,loss,scope,lr,iterations,config_key,diverged,na_entropy,na_miou_i,per_iter_miou_i\n",
        );
        for r in &self.rows {
            let trace = r
                .per_iter_miou_i
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join("|");
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                r.image_id,
                r.kind,
                r.level,
                r.method,
                r.loss,
                r.scope,
                r.lr,
                r.iterations,
                r.config_key,
                r.diverged,
                r.na_entropy,
                r.na_miou_i,
                trace
            ));
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn save_jsonl(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let mut file = std::fs::File::create(path)?;
        for row in &self.rows {
            writeln!(file, "{}", serde_json::to_string(row)?)?;
        }
        Ok(())
    }

    /// Load a JSONL store; unparsable lines (for instance a row cut short by
    /// an interrupt) are dropped with a warning so a resume can proceed.
    pub fn load_jsonl(path: &Path) -> Result<ResultTable> {
        let file = std::fs::File::open(path)?;
        let mut rows = Vec::new();
        for line in std::io::BufReader::new(file).lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str::<ResultRow>(&line) {
                Ok(row) => rows.push(row),
                Err(e) => log::warn!("skipping unparsable result row: {e}"),
            }
        }
        Ok(ResultTable { rows })
    }
}

/// Grid execution options.
#[derive(Debug, Clone, Default)]
pub struct GridOptions {
    /// Worker threads; each owns a model replica. 0 or 1 runs inline.
    pub workers: usize,
    /// Append-only JSONL row store enabling resumption.
    pub store: Option<PathBuf>,
}

/// Number of grid jobs a run would execute.
pub fn grid_job_count(corpus: &CorpusIndex, configs: &[TTAConfig]) -> usize {
    corpus.entries.len() * configs.len()
}

/// Adapt every corpus image under every configuration, recording the full
/// per-iteration metric trace so any smaller iteration budget can be
/// evaluated afterwards without re-running. Completed (image, config) pairs
/// found in the store are skipped; configurations missing their auxiliary
/// network are skipped with a warning.
pub fn grid_search<T: Scalar>(
    corpus: &CorpusIndex,
    model: &dyn SegmentationModel<T>,
    configs: &[TTAConfig],
    aux: &Auxiliaries<T>,
    options: &GridOptions,
) -> Result<ResultTable> {
    for cfg in configs {
        cfg.validate()?;
    }
    let mut runnable: Vec<&TTAConfig> = Vec::new();
    for cfg in configs {
        let missing = match cfg.method {
            Method::Ref => aux.refiner.is_none(),
            Method::Diou => aux.diou.is_none(),
            _ => false,
        };
        if missing {
            log::warn!("skipping config {}: auxiliary network not provided", cfg.key());
        } else {
            runnable.push(cfg);
        }
    }

    let mut existing = match &options.store {
        Some(path) if path.exists() => ResultTable::load_jsonl(path)?,
        _ => ResultTable::default(),
    };
    let done: std::collections::HashSet<(String, String)> = existing
        .rows
        .iter()
        .map(|r| (r.image_key(), r.config_key.clone()))
        .collect();

    struct Job<'a> {
        entry: &'a crate::corruptions::CorpusEntry,
        cfg: &'a TTAConfig,
    }
    let mut jobs = Vec::new();
    for entry in &corpus.entries {
        for cfg in &runnable {
            let key = (
                format!("{}__{}__L{}", entry.id, entry.kind, entry.level),
                cfg.key(),
            );
            if !done.contains(&key) {
                jobs.push(Job { entry, cfg });
            }
        }
    }

    let writer: Option<Mutex<std::fs::File>> = match &options.store {
        Some(path) => {
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir)?;
            }
            Some(Mutex::new(
                std::fs::OpenOptions::new().create(true).append(true).open(path)?,
            ))
        }
        None => None,
    };

    let run_job = |model: &mut dyn SegmentationModel<T>,
                   aux: &mut Auxiliaries<T>,
                   job: &Job|
     -> Result<ResultRow> {
        let image = load_image::<T>(&corpus.image_path(job.entry))?;
        let gt = load_mask(&job.entry.mask_path())?;
        let entry_key = format!("{}__{}__L{}", job.entry.id, job.entry.kind, job.entry.level);
        let record = adapt_single_image(model, &entry_key, &image, Some(&gt), job.cfg, aux)?;
        let na_miou_i = record
            .na_miou_i
            .ok_or_else(|| Error::invalid(format!("{entry_key}: image has no scorable class")))?;
        let per_iter = record
            .miou_i
            .iter()
            .map(|v| v.ok_or_else(|| Error::invalid(format!("{entry_key}: missing metric"))))
            .collect::<Result<Vec<f64>>>()?;
        Ok(ResultRow {
            image_id: job.entry.id.clone(),
            kind: job.entry.kind,
            level: job.entry.level,
            method: job.cfg.method,
            loss: job.cfg.loss,
            scope: job.cfg.scope,
            lr: job.cfg.lr,
            iterations: job.cfg.iterations,
            config_key: job.cfg.key(),
            diverged: record.diverged,
            na_entropy: record.na_entropy,
            na_miou_i,
            per_iter_miou_i: per_iter,
        })
    };

    let workers = options.workers.max(1).min(jobs.len().max(1));
    let results: Mutex<Vec<Option<Result<ResultRow>>>> =
        Mutex::new((0..jobs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let mut replicas: Vec<(Box<dyn SegmentationModel<T>>, Auxiliaries<T>)> = (0..workers)
        .map(|_| (model.clone_model(), aux.clone()))
        .collect();

    std::thread::scope(|scope| {
        for (replica, aux_replica) in replicas.iter_mut() {
            scope.spawn(|| {
                let replica = replica;
                let aux_replica = aux_replica;
                loop {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    if i >= jobs.len() {
                        break;
                    }
                    let outcome = run_job(replica.as_mut(), aux_replica, &jobs[i]);
                    if let (Ok(row), Some(w)) = (&outcome, &writer) {
                        if let Ok(line) = serde_json::to_string(row) {
                            let mut file = w.lock().unwrap();
                            let _ = writeln!(file, "{line}");
                            let _ = file.flush();
                        }
                    }
                    results.lock().unwrap()[i] = Some(outcome);
                }
            });
        }
    });

    let mut table = ResultTable::default();
    table.rows.append(&mut existing.rows);
    for outcome in results.into_inner().unwrap() {
        match outcome {
            Some(Ok(row)) => table.rows.push(row),
            Some(Err(e)) => return Err(e),
            None => return Err(Error::invalid("grid job never ran".to_string())),
        }
    }
    table.sort_canonical();
    Ok(table)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Granularity {
    Overall,
    PerCorruption,
    PerLevel,
}

/// A chosen configuration for one selection cell: the config and the
/// iteration count at which its cell mean peaks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Selection {
    pub cell: String,
    pub config_key: String,
    pub iterations_used: usize,
    pub mean_miou_i: f64,
}

fn config_lr_and_iters(table: &ResultTable, key: &str) -> (f64, usize) {
    table
        .rows
        .iter()
        .find(|r| r.config_key == key)
        .map(|r| (r.lr, r.iterations))
        .unwrap_or((0.0, 0))
}

/// Mean cell score of one config at every iteration count, maximized over
/// the count; the tie order prefers fewer iterations, then lower lr, then
/// the config key.
fn best_config_in<'a>(
    table: &ResultTable,
    rows: &[&'a ResultRow],
    keys: &[String],
) -> Option<Selection> {
    let mut best: Option<(f64, usize, f64, String)> = None; // (mean, iters, lr, key)
    for key in keys {
        let config_rows: Vec<&&ResultRow> = rows.iter().filter(|r| &r.config_key == key).collect();
        if config_rows.is_empty() {
            continue;
        }
        let (lr, max_iters) = config_lr_and_iters(table, key);
        for t in 0..=max_iters {
            let mean = config_rows.iter().map(|r| r.value_at(t)).sum::<f64>()
                / config_rows.len() as f64;
            let candidate = (mean, t, lr, key.clone());
            let better = match &best {
                None => true,
                Some((bm, bt, blr, bkey)) => {
                    if mean != *bm {
                        mean > *bm
                    } else if t != *bt {
                        t < *bt
                    } else if lr != *blr {
                        lr < *blr
                    } else {
                        key < bkey
                    }
                }
            };
            if better {
                best = Some(candidate);
            }
        }
    }
    best.map(|(mean, t, _, key)| Selection {
        cell: String::new(),
        config_key: key,
        iterations_used: t,
        mean_miou_i: mean,
    })
}

/// Pick the best configuration per granularity cell by mean image-centric
/// IoU (at each config's best recorded iteration count).
pub fn select_hparams(table: &ResultTable, granularity: Granularity) -> Result<Vec<Selection>> {
    if table.rows.is_empty() {
        return Err(Error::Empty("result table".into()));
    }
    let keys = table.config_keys();
    let mut cells: BTreeMap<String, Vec<&ResultRow>> = BTreeMap::new();
    for row in &table.rows {
        let cell = match granularity {
            Granularity::Overall => "overall".to_string(),
            Granularity::PerCorruption => row.kind.name().to_string(),
            Granularity::PerLevel => format!("L{}", row.level),
        };
        cells.entry(cell).or_default().push(row);
    }
    let mut selections = Vec::new();
    for (cell, rows) in cells {
        let mut sel = best_config_in(table, &rows, &keys)
            .ok_or_else(|| Error::Empty(format!("selection cell {cell}")))?;
        sel.cell = cell;
        selections.push(sel);
    }
    Ok(selections)
}

/// Mean score a selection set achieves on the table it was selected from:
/// every row is scored under its cell's chosen config and iteration count.
pub fn selection_score(table: &ResultTable, selections: &[Selection], granularity: Granularity) -> Result<f64> {
    let by_cell: BTreeMap<&str, &Selection> =
        selections.iter().map(|s| (s.cell.as_str(), s)).collect();
    let mut per_image: BTreeMap<String, f64> = BTreeMap::new();
    for row in &table.rows {
        let cell = match granularity {
            Granularity::Overall => "overall".to_string(),
            Granularity::PerCorruption => row.kind.name().to_string(),
            Granularity::PerLevel => format!("L{}", row.level),
        };
        let sel = by_cell
            .get(cell.as_str())
            .ok_or_else(|| Error::Empty(format!("no selection for cell {cell}")))?;
        if row.config_key == sel.config_key {
            per_image.insert(row.image_key(), row.value_at(sel.iterations_used));
        }
    }
    if per_image.is_empty() {
        return Err(Error::Empty("no rows matched the selection".into()));
    }
    Ok(per_image.values().sum::<f64>() / per_image.len() as f64)
}

/// Per-image hindsight best method (non-adapted included).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OracleSelection {
    /// (image key, chosen method or "na", achieved value)
    pub assignments: Vec<(String, String, f64)>,
    pub aggregate: f64,
}

/// For each image pick the best final score among the given per-method
/// tables and the non-adapted baseline. All tables must cover the same
/// image set (one row per image).
pub fn oracle_select(tables: &[(String, &ResultTable)]) -> Result<OracleSelection> {
    if tables.is_empty() {
        return Err(Error::Empty("no method tables".into()));
    }
    let mut images: BTreeMap<String, Vec<(String, f64, f64)>> = BTreeMap::new();
    for (name, table) in tables {
        for row in &table.rows {
            images
                .entry(row.image_key())
                .or_default()
                .push((name.clone(), row.final_value(), row.na_miou_i));
        }
    }
    let expected = tables.len();
    let mut assignments = Vec::new();
    let mut total = 0.0;
    for (image, candidates) in &images {
        if candidates.len() != expected {
            return Err(Error::invalid(format!(
                "image {image} covered by {}/{expected} tables",
                candidates.len()
            )));
        }
        let na = candidates[0].2;
        let mut best_name = "na".to_string();
        let mut best_value = na;
        for (name, value, _) in candidates {
            if *value > best_value {
                best_value = *value;
                best_name = name.clone();
            }
        }
        total += best_value;
        assignments.push((image.clone(), best_name, best_value));
    }
    let aggregate = total / assignments.len() as f64;
    Ok(OracleSelection {
        assignments,
        aggregate,
    })
}

/// Ordinary least squares of the adaptation improvement (final - NA) against
/// the non-adapted prediction entropy. Returns `(slope, intercept)`.
pub fn entropy_improvement_fit(table: &ResultTable) -> Result<(f64, f64)> {
    if table.rows.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 rows for a fit, got {}",
            table.rows.len()
        )));
    }
    let points: Vec<(f64, f64)> = table
        .rows
        .iter()
        .map(|r| (r.na_entropy, r.final_value() - r.na_miou_i))
        .collect();
    let n = points.len() as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / n;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.0 - mean_x)).sum();
    if sxx < 1e-15 {
        return Err(Error::invalid(
            "constant NA entropy: least-squares fit undefined".to_string(),
        ));
    }
    let sxy: f64 = points.iter().map(|p| (p.0 - mean_x) * (p.1 - mean_y)).sum();
    let slope = sxy / sxx;
    Ok((slope, mean_y - slope * mean_x))
}

/// One (method, loss, scope) column of the aggregate report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportColumn {
    pub method: Method,
    pub loss: LossKind,
    pub scope: ParamScope,
    pub lr: f64,
    pub iterations: usize,
    pub na: f64,
    pub tta: f64,
    pub delta_abs: f64,
    /// False when no hyper-parameters beat the non-adapted baseline; such
    /// columns render as `-eps`.
    pub positive: bool,
}

impl ReportColumn {
    pub fn key(&self) -> String {
        format!("{}-{}-{}", self.method, self.loss, self.scope)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErrorReductionCell {
    pub kind: CorruptionKind,
    pub level: u8,
    pub column: String,
    pub value: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub columns: Vec<ReportColumn>,
    pub error_reduction: Vec<ErrorReductionCell>,
}

/// Aggregate the table into the per-(method, loss, scope) grid: NA, best TTA
/// with overall-selected (lr, iterations), and the absolute improvement,
/// plus per-corruption-and-level error-reduction values for bar plots.
pub fn aggregate_report(table: &ResultTable) -> Result<AggregateReport> {
    if table.rows.is_empty() {
        return Err(Error::Empty("result table".into()));
    }
    let mut groups: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for row in &table.rows {
        let group = format!("{}-{}-{}", row.method, row.loss, row.scope);
        let keys = groups.entry(group).or_default();
        if !keys.contains(&row.config_key) {
            keys.push(row.config_key.clone());
        }
    }

    let mut columns = Vec::new();
    let mut er_cells = Vec::new();
    for (_group, keys) in groups {
        let group_rows: Vec<&ResultRow> = table
            .rows
            .iter()
            .filter(|r| keys.contains(&r.config_key))
            .collect();
        let sel = best_config_in(table, &group_rows, &keys)
            .ok_or_else(|| Error::Empty("empty report group".into()))?;
        let chosen: Vec<&&ResultRow> = group_rows
            .iter()
            .filter(|r| r.config_key == sel.config_key)
            .collect();
        let na = chosen.iter().map(|r| r.na_miou_i).sum::<f64>() / chosen.len() as f64;
        let tta = sel.mean_miou_i;
        let (lr, _) = config_lr_and_iters(table, &sel.config_key);
        let template = chosen[0];
        let column = ReportColumn {
            method: template.method,
            loss: template.loss,
            scope: template.scope,
            lr,
            iterations: sel.iterations_used,
            na,
            tta,
            delta_abs: tta - na,
            positive: tta > na,
        };

        // per corruption x level error reduction under the column's selection
        let mut cells: BTreeMap<(String, u8), Vec<&&ResultRow>> = BTreeMap::new();
        for row in &chosen {
            cells
                .entry((row.kind.name().to_string(), row.level))
                .or_default()
                .push(row);
        }
        for ((kind_name, level), rows) in cells {
            let cell_na = rows.iter().map(|r| r.na_miou_i).sum::<f64>() / rows.len() as f64;
            let cell_tta = rows
                .iter()
                .map(|r| r.value_at(sel.iterations_used))
                .sum::<f64>()
                / rows.len() as f64;
            if cell_na >= 100.0 {
                log::warn!("cell {kind_name} L{level}: no residual error, skipped");
                continue;
            }
            er_cells.push(ErrorReductionCell {
                kind: kind_name.parse().expect("kind name roundtrip"),
                level,
                column: column.key(),
                value: error_reduction(cell_na, cell_tta)?,
            });
        }
        columns.push(column);
    }
    Ok(AggregateReport {
        columns,
        error_reduction: er_cells,
    })
}

impl AggregateReport {
    /// Tables-shaped CSV: one column per (method, loss, scope), rows NA /
    /// TTA / delta. Columns with no positive hyper-parameters show the NA
    /// value and `-eps`.
    pub fn to_table_csv(&self) -> String {
        let mut header = String::from("row");
        for c in &self.columns {
            header.push(',');
            header.push_str(&c.key());
        }
        let mut na = String::from("na");
        let mut tta = String::from("tta");
        let mut delta = String::from("delta_abs");
        for c in &self.columns {
            na.push_str(&format!(",{}", c.na));
            if c.positive {
                tta.push_str(&format!(",{}", c.tta));
                delta.push_str(&format!(",{}", c.delta_abs));
            } else {
                tta.push_str(&format!(",{}", c.na));
                delta.push_str(",-eps");
            }
        }
        format!("{header}\n{na}\n{tta}\n{delta}\n")
    }

    pub fn error_reduction_csv(&self) -> String {
        let mut out = String::from("kind,level,column,error_reduction\n");
        for cell in &self.error_reduction {
            out.push_str(&format!(
                "{},{},{},{}\n",
                cell.kind, cell.level, cell.column, cell.value
            ));
        }
        out
    }
}
