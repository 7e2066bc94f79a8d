//! CSV formats for datasets, models, cluster states and assignments.
//!
//! Floats are written with Rust's shortest round-trip formatting, so every
//! file reads back bit-for-bit.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{MelaError, Result};
use crate::label_inference::{ClusterState, LabelAssignment, TaskAssignment};
use crate::learners::GlobalClassifier;
use crate::representation::{EmbeddingModel, LinearEmbedding, ResidualAdapter};
use crate::taskgen::{FlatDataset, Record, Sample, Task};

fn parse_err(line: u64, message: impl Into<String>) -> MelaError {
    MelaError::Parse {
        line,
        message: message.into(),
    }
}

fn line_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<T> {
    let raw = rec
        .get(i)
        .ok_or_else(|| parse_err(line_of(rec), format!("missing column `{name}`")))?;
    raw.trim()
        .parse()
        .map_err(|_| parse_err(line_of(rec), format!("bad {name} `{raw}`")))
}

fn optional<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, name: &str) -> Result<Option<T>> {
    match rec.get(i).map(str::trim) {
        None | Some("") => Ok(None),
        Some(_) => field(rec, i, name).map(Some),
    }
}

fn floats(rec: &csv::StringRecord, from: usize, to: usize) -> Result<Vec<f64>> {
    (from..to).map(|i| field(rec, i, "value")).collect()
}

fn reader<R: Read>(input: R, headers: bool) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(headers)
        .flexible(true)
        .from_reader(input)
}

fn writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().flexible(true).from_writer(out)
}

fn fmt_opt(v: Option<usize>) -> String {
    v.map_or(String::new(), |v| v.to_string())
}

fn push_floats(row: &mut Vec<String>, values: impl IntoIterator<Item = f64>) {
    row.extend(values.into_iter().map(|v| v.to_string()));
}

fn create(path: &Path) -> Result<std::fs::File> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    Ok(std::fs::File::create(path)?)
}

// ---- episodic ----

pub fn write_tasks<W: Write>(out: W, tasks: &[Task]) -> Result<()> {
    let dim = tasks.first().and_then(Task::dim).unwrap_or(0);
    let mut w = writer(out);
    let mut header: Vec<String> = ["task_id", "sample_id", "role", "local_label", "global_label"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for task in tasks {
        for (role, records) in [("support", &task.support), ("query", &task.query)] {
            for r in records {
                let mut row = vec![
                    task.task_id.to_string(),
                    r.sample_id.to_string(),
                    role.to_string(),
                    r.local_label.to_string(),
                    fmt_opt(r.global_label),
                ];
                push_floats(&mut row, r.features.iter().copied());
                w.write_record(&row)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads tasks in order of first appearance. A task's `local_to_global` map
/// is filled in when every record carries a consistent global label.
pub fn read_tasks<R: Read>(input: R) -> Result<Vec<Task>> {
    let mut rdr = reader(input, true);
    let mut order: Vec<usize> = Vec::new();
    let mut tasks: BTreeMap<usize, Task> = BTreeMap::new();
    let mut dim = None;
    let mut last_line = 1;
    for rec in rdr.records() {
        let rec = rec?;
        let line = line_of(&rec);
        last_line = line;
        if rec.len() < 6 {
            return Err(parse_err(line, "expected task_id,sample_id,role,local_label,global_label,f..."));
        }
        let d = rec.len() - 5;
        if *dim.get_or_insert(d) != d {
            return Err(parse_err(line, format!("expected {} features, found {d}", dim.unwrap())));
        }
        let task_id: usize = field(&rec, 0, "task_id")?;
        let record = Record {
            sample_id: field(&rec, 1, "sample_id")?,
            local_label: field(&rec, 3, "local_label")?,
            global_label: optional(&rec, 4, "global_label")?,
            features: floats(&rec, 5, rec.len())?,
        };
        let task = tasks.entry(task_id).or_insert_with(|| {
            order.push(task_id);
            Task {
                task_id,
                support: Vec::new(),
                query: Vec::new(),
                local_to_global: None,
            }
        });
        match rec[2].trim() {
            "support" => task.support.push(record),
            "query" => task.query.push(record),
            other => return Err(parse_err(line, format!("unknown role `{other}`"))),
        }
    }
    let mut out = Vec::with_capacity(order.len());
    for id in order {
        let mut task = tasks.remove(&id).expect("task recorded");
        task.validate().map_err(|e| parse_err(last_line, e.to_string()))?;
        if let Some(q) = task.query.iter().find(|r| r.local_label >= task.way()) {
            return Err(parse_err(
                last_line,
                format!("task {id}: query label {} has no support samples", q.local_label),
            ));
        }
        task.local_to_global = global_map(&task);
        out.push(task);
    }
    Ok(out)
}

fn global_map(task: &Task) -> Option<Vec<usize>> {
    let mut map = vec![None; task.way()];
    for r in task.records() {
        let g = r.global_label?;
        match map[r.local_label] {
            None => map[r.local_label] = Some(g),
            Some(prev) if prev != g => return None,
            _ => {}
        }
    }
    map.into_iter().collect()
}

// ---- flat and grid ----

pub fn write_flat<W: Write>(out: W, ds: &FlatDataset) -> Result<()> {
    let mut w = writer(out);
    let dim = ds.dim().unwrap_or(0);
    let mut header = vec!["sample_id".to_string(), "global_label".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header)?;
    for s in &ds.samples {
        let mut row = vec![s.id.to_string(), fmt_opt(s.global_label.map(|l| ds.class_ids[l]))];
        push_floats(&mut row, s.features.iter().copied());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_flat<R: Read>(input: R) -> Result<FlatDataset> {
    let mut samples = Vec::new();
    for rec in reader(input, true).records() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(parse_err(line_of(&rec), "expected sample_id,global_label,f..."));
        }
        samples.push(Sample {
            id: field(&rec, 0, "sample_id")?,
            global_label: optional(&rec, 1, "global_label")?,
            features: floats(&rec, 2, rec.len())?,
            domain_id: None,
            shape: None,
        });
        check_dim(&samples, line_of(&rec))?;
    }
    Ok(FlatDataset::from_samples(samples))
}

fn check_dim(samples: &[Sample], line: u64) -> Result<()> {
    let first = samples[0].features.len();
    let last = samples[samples.len() - 1].features.len();
    if first != last {
        return Err(parse_err(line, format!("expected {first} features, found {last}")));
    }
    Ok(())
}

pub fn write_grid<W: Write>(out: W, ds: &FlatDataset) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["sample_id", "global_label", "h", "w", "g..."])?;
    for s in &ds.samples {
        let (h, wd) = s
            .shape
            .ok_or_else(|| MelaError::Shape(format!("sample {} is not a grid", s.id)))?;
        let mut row = vec![
            s.id.to_string(),
            fmt_opt(s.global_label.map(|l| ds.class_ids[l])),
            h.to_string(),
            wd.to_string(),
        ];
        push_floats(&mut row, s.features.iter().copied());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_grid<R: Read>(input: R) -> Result<FlatDataset> {
    let mut samples = Vec::new();
    for rec in reader(input, true).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let h: usize = field(&rec, 2, "h")?;
        let w: usize = field(&rec, 3, "w")?;
        if h == 0 || w == 0 || rec.len() != 4 + h * w {
            return Err(parse_err(line, format!("a {h}x{w} grid needs {} values, found {}", h * w, rec.len().saturating_sub(4))));
        }
        samples.push(Sample {
            id: field(&rec, 0, "sample_id")?,
            global_label: optional(&rec, 1, "global_label")?,
            features: floats(&rec, 4, rec.len())?,
            domain_id: None,
            shape: Some((h, w)),
        });
    }
    Ok(FlatDataset::from_samples(samples))
}

// ---- global classifier ----

pub fn write_classifier<W: Write>(out: W, g: &GlobalClassifier) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["class_id".to_string()];
    header.extend((0..g.dim()).map(|i| format!("w{i}")));
    header.push("bias".into());
    w.write_record(&header)?;
    for (r, &class) in g.class_ids.iter().enumerate() {
        let mut row = vec![class.to_string()];
        push_floats(&mut row, g.weights.row(r).iter().copied());
        row.push(g.bias.as_ref().map_or(String::new(), |b| b[r].to_string()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_classifier<R: Read>(input: R) -> Result<GlobalClassifier> {
    let mut ids = Vec::new();
    let mut rows: Vec<f64> = Vec::new();
    let mut biases: Vec<Option<f64>> = Vec::new();
    let mut dim = None;
    let mut line = 1;
    for rec in reader(input, true).records() {
        let rec = rec?;
        line = line_of(&rec);
        if rec.len() < 3 {
            return Err(parse_err(line, "expected class_id,w...,bias"));
        }
        let d = rec.len() - 2;
        if *dim.get_or_insert(d) != d {
            return Err(parse_err(line, "ragged weight rows"));
        }
        ids.push(field(&rec, 0, "class_id")?);
        rows.extend(floats(&rec, 1, rec.len() - 1)?);
        biases.push(optional(&rec, rec.len() - 1, "bias")?);
    }
    let dim = dim.ok_or_else(|| parse_err(line, "classifier file has no rows"))?;
    let bias = if biases.iter().all(Option::is_some) {
        Some(DVector::from_iterator(ids.len(), biases.into_iter().flatten()))
    } else if biases.iter().all(Option::is_none) {
        None
    } else {
        return Err(parse_err(line, "bias given for some classes only"));
    };
    GlobalClassifier::new(DMatrix::from_row_slice(ids.len(), dim, &rows), bias, ids)
        .map_err(|e| parse_err(line, e.to_string()))
}

// ---- label inference ----

pub fn write_clusters<W: Write>(out: W, state: &ClusterState) -> Result<()> {
    let mut w = writer(out);
    let mut header = vec!["cluster_id".to_string(), "sample_count".to_string()];
    header.extend((0..state.dim().unwrap_or(0)).map(|i| format!("c{i}")));
    w.write_record(&header)?;
    for (v, c) in state.centroids.iter().enumerate() {
        let mut row = vec![v.to_string(), state.sample_counts[v].to_string()];
        push_floats(&mut row, c.iter().copied());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Cluster ids must be `0..V` in order; match counts start at zero.
pub fn read_clusters<R: Read>(input: R) -> Result<ClusterState> {
    let mut centroids: Vec<Vec<f64>> = Vec::new();
    let mut counts = Vec::new();
    for rec in reader(input, true).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let id: usize = field(&rec, 0, "cluster_id")?;
        if id != centroids.len() {
            return Err(parse_err(line, format!("expected cluster {}, found {id}", centroids.len())));
        }
        counts.push(field(&rec, 1, "sample_count")?);
        let c = floats(&rec, 2, rec.len())?;
        if c.is_empty() || centroids.first().is_some_and(|f| f.len() != c.len()) {
            return Err(parse_err(line, "centroid dimension differs"));
        }
        centroids.push(c);
    }
    if centroids.is_empty() {
        return Err(MelaError::EmptyState);
    }
    let mut state = ClusterState::new(centroids);
    state.sample_counts = counts;
    Ok(state)
}

/// One row per local class; discarded tasks get a single row with an empty
/// local label and cluster `-1`.
pub fn write_assignment<W: Write>(out: W, assignment: &LabelAssignment) -> Result<()> {
    let mut w = writer(out);
    w.write_record(["task_id", "local_label", "cluster_id"])?;
    for t in &assignment.tasks {
        match &t.clusters {
            Some(cs) => {
                for (local, c) in cs.iter().enumerate() {
                    w.write_record([t.task_id.to_string(), local.to_string(), c.to_string()])?;
                }
            }
            None => w.write_record([t.task_id.to_string(), String::new(), "-1".into()])?,
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_assignment<R: Read>(input: R) -> Result<LabelAssignment> {
    let mut tasks: Vec<TaskAssignment> = Vec::new();
    for rec in reader(input, true).records() {
        let rec = rec?;
        let line = line_of(&rec);
        let task_id: usize = field(&rec, 0, "task_id")?;
        let cluster: i64 = field(&rec, 2, "cluster_id")?;
        if cluster < 0 {
            tasks.push(TaskAssignment { task_id, clusters: None });
            continue;
        }
        let local: usize = field(&rec, 1, "local_label")?;
        match tasks.last_mut() {
            Some(TaskAssignment { task_id: id, clusters: Some(cs) }) if *id == task_id => {
                if local != cs.len() {
                    return Err(parse_err(line, format!("task {task_id}: local labels out of order")));
                }
                cs.push(cluster as usize);
            }
            _ => {
                if local != 0 {
                    return Err(parse_err(line, format!("task {task_id}: local labels must start at 0")));
                }
                tasks.push(TaskAssignment {
                    task_id,
                    clusters: Some(vec![cluster as usize]),
                });
            }
        }
    }
    Ok(LabelAssignment { tasks })
}

// ---- embeddings ----

fn write_matrix<W: Write>(w: &mut csv::Writer<W>, name: &str, m: &DMatrix<f64>) -> Result<()> {
    w.write_record(["matrix", name, &m.nrows().to_string(), &m.ncols().to_string()])?;
    for row in m.row_iter() {
        let mut out = Vec::new();
        push_floats(&mut out, row.iter().copied());
        w.write_record(&out)?;
    }
    Ok(())
}

/// Blocks: a `model,<linear|residual>` line, then `matrix,<name>,<rows>,<cols>`
/// headers each followed by their rows. Bias vectors are stored as columns.
pub fn write_embedding<W: Write>(out: W, model: &EmbeddingModel) -> Result<()> {
    let mut w = writer(out);
    match model {
        EmbeddingModel::Linear(e) => {
            w.write_record(["model", "linear"])?;
            write_matrix(&mut w, "theta", &e.theta)?;
        }
        EmbeddingModel::Residual { base, adapter } => {
            w.write_record(["model", "residual"])?;
            write_matrix(&mut w, "theta", &base.theta)?;
            write_matrix(&mut w, "w1", &adapter.w1)?;
            write_matrix(&mut w, "b1", &DMatrix::from_column_slice(adapter.b1.len(), 1, adapter.b1.as_slice()))?;
            write_matrix(&mut w, "w2", &adapter.w2)?;
            write_matrix(&mut w, "b2", &DMatrix::from_column_slice(adapter.b2.len(), 1, adapter.b2.as_slice()))?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_embedding<R: Read>(input: R) -> Result<EmbeddingModel> {
    let mut records = reader(input, false).into_records();
    let head = records
        .next()
        .ok_or_else(|| parse_err(1, "empty embedding file"))??;
    if head.get(0) != Some("model") {
        return Err(parse_err(line_of(&head), "expected `model,<kind>`"));
    }
    let kind = head.get(1).unwrap_or("").to_string();
    let mut mats: BTreeMap<String, DMatrix<f64>> = BTreeMap::new();
    let mut line = line_of(&head);
    while let Some(rec) = records.next() {
        let rec = rec?;
        line = line_of(&rec);
        if rec.get(0) != Some("matrix") {
            return Err(parse_err(line, "expected `matrix,<name>,<rows>,<cols>`"));
        }
        let name = rec.get(1).unwrap_or("").to_string();
        let rows: usize = field(&rec, 2, "rows")?;
        let cols: usize = field(&rec, 3, "cols")?;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let row = records
                .next()
                .ok_or_else(|| parse_err(line, format!("matrix {name} ends early")))??;
            line = line_of(&row);
            if row.len() != cols {
                return Err(parse_err(line, format!("matrix {name}: expected {cols} values, found {}", row.len())));
            }
            data.extend(floats(&row, 0, cols)?);
        }
        mats.insert(name, DMatrix::from_row_slice(rows, cols, &data));
    }
    let mut take = |name: &str| mats.remove(name).ok_or_else(|| parse_err(line, format!("missing matrix {name}")));
    let base = LinearEmbedding::new(take("theta")?);
    match kind.as_str() {
        "linear" => Ok(base.into()),
        "residual" => {
            let adapter = ResidualAdapter {
                w1: take("w1")?,
                b1: DVector::from_column_slice(take("b1")?.as_slice()),
                w2: take("w2")?,
                b2: DVector::from_column_slice(take("b2")?.as_slice()),
            };
            let (width, p) = adapter.w1.shape();
            if p != base.output_dim() || adapter.b1.len() != width || adapter.w2.shape() != (p, width) || adapter.b2.len() != p {
                return Err(parse_err(line, "adapter shapes do not fit the base embedding"));
            }
            Ok(EmbeddingModel::Residual { base, adapter })
        }
        other => Err(parse_err(line_of(&head), format!("unknown model kind `{other}`"))),
    }
}

// ---- path helpers ----

pub fn save<F>(path: &Path, write: F) -> Result<()>
where
    F: FnOnce(std::io::BufWriter<std::fs::File>) -> Result<()>,
{
    write(std::io::BufWriter::new(create(path)?))
}

pub fn load<T, F>(path: &Path, read: F) -> Result<T>
where
    F: FnOnce(std::io::BufReader<std::fs::File>) -> Result<T>,
{
    read(std::io::BufReader::new(std::fs::File::open(path)?))
}
