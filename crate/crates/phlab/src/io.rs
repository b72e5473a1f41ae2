//! File formats: datasets, model checkpoints, system descriptions, and the
//! CSV/JSON emitters used by the experiment drivers.
//!
//! Both structured formats put a single JSON header line in front of a plain
//! payload so files stay greppable and self-describing:
//!
//! * dataset: JSON metadata line, then CSV rows `traj_id,t,x_1,…,x_d` with
//!   floats printed to 17 significant digits (lossless for f64);
//! * checkpoint: JSON line with the model descriptor and the parameter
//!   layout, then the flat parameter vector as little-endian f64 bytes.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use phlab_core::dataset::{DatasetMeta, Trajectory, TrajectoryDataset};
use phlab_core::model::DynModel;
use phlab_core::mpc::ControlTrace;
use phlab_core::system::SystemSpec;
use phlab_core::train::TrainRecord;

/// Format a float with 17 significant digits, enough to reparse bit-exactly.
pub fn format_float(v: f64) -> String {
    format!("{v:.16e}")
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// Write `ds` as a JSON metadata line followed by CSV sample rows.
pub fn write_dataset(path: &Path, ds: &TrajectoryDataset) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("creating dataset file {}", path.display()))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &ds.meta)?;
    out.write_all(b"\n")?;

    let dim = ds.dim();
    let mut csv = csv::Writer::from_writer(out);
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((1..=dim).map(|i| format!("x_{i}")));
    csv.write_record(&header)?;
    let mut record = Vec::with_capacity(dim + 2);
    for (id, traj) in ds.trajectories.iter().enumerate() {
        for (t, x) in traj.times.iter().zip(&traj.states) {
            record.clear();
            record.push(id.to_string());
            record.push(format_float(*t));
            record.extend(x.iter().map(|v| format_float(*v)));
            csv.write_record(&record)?;
        }
    }
    csv.flush()?;
    Ok(())
}

/// Load a dataset written by [`write_dataset`], bit-exactly.
pub fn read_dataset(path: &Path) -> Result<TrajectoryDataset> {
    let file = File::open(path)
        .with_context(|| format!("opening dataset file {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut header = String::new();
    reader.read_line(&mut header)?;
    let meta: DatasetMeta =
        serde_json::from_str(&header).context("parsing dataset metadata header")?;
    let dim = meta.system.dim();

    let mut csv = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
    let mut trajectories: Vec<Trajectory> = Vec::new();
    for row in csv.records() {
        let row = row?;
        if row.len() != dim + 2 {
            bail!("dataset row has {} fields, expected {}", row.len(), dim + 2);
        }
        let id: usize = row[0].parse().context("parsing traj_id")?;
        let t: f64 = row[1].parse().context("parsing sample time")?;
        let x = row
            .iter()
            .skip(2)
            .map(|s| s.parse::<f64>().context("parsing state entry"))
            .collect::<Result<Vec<f64>>>()?;
        if id == trajectories.len() {
            trajectories.push(Trajectory { times: Vec::new(), states: Vec::new() });
        } else if id + 1 != trajectories.len() {
            bail!("trajectory ids must be contiguous; got {id} after {}", trajectories.len());
        }
        let traj = trajectories.last_mut().expect("pushed above");
        traj.times.push(t);
        traj.states.push(x);
    }
    Ok(TrajectoryDataset { meta, trajectories })
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ComponentEntry {
    name: String,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    descriptor: phlab_core::model::ModelDescriptor,
    param_count: usize,
    components: Vec<ComponentEntry>,
}

/// Save a model as a JSON descriptor line plus the raw parameter payload.
pub fn write_checkpoint(path: &Path, model: &DynModel) -> Result<()> {
    let descriptor = model
        .descriptor()
        .map_err(|e| anyhow::anyhow!("model is not serializable: {e}"))?;
    let header = CheckpointHeader {
        descriptor,
        param_count: model.params().len(),
        components: model
            .params()
            .components()
            .iter()
            .map(|c| ComponentEntry {
                name: c.name.clone(),
                offset: c.slice.offset,
                len: c.slice.len,
            })
            .collect(),
    };
    let file = File::create(path)
        .with_context(|| format!("creating checkpoint {}", path.display()))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for v in model.params().values() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Load a checkpoint written by [`write_checkpoint`].
pub fn read_checkpoint(path: &Path) -> Result<DynModel> {
    let file = File::open(path)
        .with_context(|| format!("opening checkpoint {}", path.display()))?;
    let mut reader = BufReader::new(file);
    let mut line = String::new();
    reader.read_line(&mut line)?;
    let header: CheckpointHeader =
        serde_json::from_str(&line).context("parsing checkpoint header")?;

    let mut model = DynModel::from_descriptor(&header.descriptor)
        .map_err(|e| anyhow::anyhow!("invalid model descriptor: {e}"))?;
    if model.params().len() != header.param_count {
        bail!(
            "checkpoint holds {} parameters but the descriptor builds {}",
            header.param_count,
            model.params().len()
        );
    }
    for (actual, stored) in model.params().components().iter().zip(&header.components) {
        if actual.name != stored.name
            || actual.slice.offset != stored.offset
            || actual.slice.len != stored.len
        {
            bail!(
                "checkpoint component `{}` does not match the descriptor layout",
                stored.name
            );
        }
    }
    let mut payload = Vec::new();
    reader.read_to_end(&mut payload)?;
    if payload.len() != 8 * header.param_count {
        bail!(
            "checkpoint payload is {} bytes, expected {}",
            payload.len(),
            8 * header.param_count
        );
    }
    for (i, v) in model.params_mut().values_mut().iter_mut().enumerate() {
        *v = f64::from_le_bytes(payload[8 * i..8 * i + 8].try_into().expect("8-byte chunk"));
    }
    Ok(model)
}

// ---------------------------------------------------------------------------
// System descriptions
// ---------------------------------------------------------------------------

pub fn write_system(path: &Path, system: &SystemSpec) -> Result<()> {
    let file = File::create(path)
        .with_context(|| format!("creating system file {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(file), system)?;
    Ok(())
}

pub fn read_system(path: &Path) -> Result<SystemSpec> {
    let file = File::open(path)
        .with_context(|| format!("opening system file {}", path.display()))?;
    Ok(serde_json::from_reader(BufReader::new(file))
        .context("parsing system description")?)
}

// ---------------------------------------------------------------------------
// CSV / JSON emitters
// ---------------------------------------------------------------------------

/// Write a table of float rows under the given column names.
pub fn write_table(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut csv = csv::Writer::from_writer(BufWriter::new(file));
    csv.write_record(columns)?;
    for row in rows {
        if row.len() != columns.len() {
            bail!("row has {} fields, expected {}", row.len(), columns.len());
        }
        csv.write_record(row.iter().map(|v| format_float(*v)))?;
    }
    csv.flush()?;
    Ok(())
}

/// Per-epoch training metrics as CSV (epoch, λ, losses, damping estimates).
pub fn write_train_records(path: &Path, records: &[TrainRecord]) -> Result<()> {
    let n_damp = records.first().map_or(0, |r| r.damping.len());
    let mut columns = vec!["epoch".to_string(), "lambda".to_string(), "train_loss".to_string()];
    columns.push("val_loss".to_string());
    columns.extend((1..=n_damp).map(|i| format!("r_{i}")));
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut csv = csv::Writer::from_writer(BufWriter::new(file));
    csv.write_record(&columns)?;
    for r in records {
        let mut row = vec![
            r.epoch.to_string(),
            format_float(r.lambda),
            format_float(r.train_loss),
            r.val_loss.map_or_else(String::new, format_float),
        ];
        row.extend(r.damping.iter().map(|v| format_float(*v)));
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Closed-loop control trace as CSV. Each row pairs the plant state at time
/// t with the model's prediction of it made one control step earlier (empty
/// on the first row), plus the control applied at time t (empty on the last).
pub fn write_trace(path: &Path, trace: &ControlTrace) -> Result<()> {
    let dim = trace.plant_states.first().map_or(0, Vec::len);
    let mut columns = vec!["t".to_string(), "u".to_string(), "stage_cost".to_string()];
    columns.extend((1..=dim).map(|i| format!("x_{i}")));
    columns.extend((1..=dim).map(|i| format!("pred_{i}")));
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut csv = csv::Writer::from_writer(BufWriter::new(file));
    csv.write_record(&columns)?;
    for (k, state) in trace.plant_states.iter().enumerate() {
        let mut row = vec![
            format_float(trace.times[k]),
            trace.controls.get(k).copied().map_or_else(String::new, format_float),
            format_float(trace.stage_cost[k]),
        ];
        row.extend(state.iter().map(|v| format_float(*v)));
        match k.checked_sub(1).and_then(|p| trace.predicted_states.get(p)) {
            Some(pred) => row.extend(pred.iter().map(|v| format_float(*v))),
            None => row.extend(std::iter::repeat(String::new()).take(dim)),
        }
        csv.write_record(&row)?;
    }
    csv.flush()?;
    Ok(())
}

/// Pretty-printed JSON for reports and summaries.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file =
        File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut out, value)?;
    out.write_all(b"\n")?;
    out.flush()?;
    Ok(())
}
