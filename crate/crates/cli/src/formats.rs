//! On-disk formats.
//!
//! * `atlas.json`: `{"fibers": [[voxel ids in order], ...]}`
//! * `covariates.csv`: header row; subject id in the first column, an
//!   optional `group` column, every other column numeric.
//! * `directions.csv`: columns `subject, voxel, x, y, z`; subjects refer to
//!   ids in `covariates.csv`, missing rows are unobserved.
//! * `draws.ndjson`: one `{"iteration": t, "state": {...}}` object per line.
//!
//! Row numbers in error messages count the header as row 1.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};
use vmfreg_core::model::{CovariateTable, DirectionField, ModelData, ModelState, StreamlineAtlas};

use crate::error::{input, CliResult};

pub const ATLAS: &str = "atlas.json";
pub const COVARIATES: &str = "covariates.csv";
pub const DIRECTIONS: &str = "directions.csv";
pub const TRUTH: &str = "truth.json";
pub const DRAWS: &str = "draws.ndjson";
pub const FIT_SUMMARY: &str = "fit_summary.json";
pub const DIAGNOSTICS: &str = "diagnostics.json";
pub const CHECKPOINT: &str = "checkpoint.json";

#[derive(Serialize, Deserialize)]
struct AtlasFile {
    fibers: Vec<Vec<usize>>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    let mut w = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let f = File::open(path).map_err(|e| input(format!("cannot open {}: {e}", path.display())))?;
    serde_json::from_reader(BufReader::new(f)).map_err(|e| input(format!("{}: {e}", path.display())))
}

pub fn write_atlas(path: &Path, atlas: &StreamlineAtlas) -> anyhow::Result<()> {
    write_json(path, &AtlasFile { fibers: atlas.fibers().to_vec() })
}

pub fn read_atlas(path: &Path) -> CliResult<StreamlineAtlas> {
    let raw: AtlasFile = read_json(path)?;
    StreamlineAtlas::new(raw.fibers).map_err(|e| input(format!("{}: {e}", path.display())))
}

pub fn write_covariates(path: &Path, table: &CovariateTable) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    let mut header = vec!["subject".to_string()];
    if table.groups.is_some() {
        header.push("group".into());
    }
    header.extend(table.names.iter().cloned());
    w.write_record(&header)?;
    for i in 0..table.n_subjects() {
        let mut rec = vec![table.subject_ids[i].clone()];
        if let Some(g) = &table.groups {
            rec.push(g[i].clone());
        }
        rec.extend(table.values[i].iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_reader(path: &Path) -> CliResult<csv::Reader<File>> {
    csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| input(format!("cannot open {}: {e}", path.display())))
}

fn row_of(rec: &csv::StringRecord) -> u64 {
    rec.position().map_or(0, |p| p.line())
}

fn name_of(path: &Path) -> String {
    path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned())
}

/// Reads a covariate table. With `levels`, group labels must come from that
/// set (the levels of a fitted design); otherwise they are the distinct labels.
pub fn read_covariates(path: &Path, levels: Option<&[String]>) -> CliResult<CovariateTable> {
    let name = name_of(path);
    let mut rdr = csv_reader(path)?;
    let header = rdr.headers().map_err(|e| input(format!("{name}: {e}")))?.clone();
    if header.is_empty() {
        return Err(input(format!("{name}: empty header")));
    }
    let group_col = header.iter().position(|h| h == "group");
    if group_col == Some(0) {
        return Err(input(format!("{name}: the first column must be the subject id")));
    }
    let cov_cols: Vec<usize> = (1..header.len()).filter(|&c| Some(c) != group_col).collect();
    let names: Vec<String> = cov_cols.iter().map(|&c| header[c].to_string()).collect();
    let (mut ids, mut values, mut groups) = (Vec::new(), Vec::new(), Vec::new());
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input(format!("{name}: {e}")))?;
        let row = row_of(&rec);
        let id = rec[0].to_string();
        if ids.contains(&id) {
            return Err(input(format!("{name} row {row}: duplicate subject id {id:?}")));
        }
        let vals = cov_cols
            .iter()
            .map(|&c| {
                rec[c].parse::<f64>().ok().filter(|v| v.is_finite()).ok_or_else(|| {
                    input(format!("{name} row {row}: column {:?} is not a finite number: {:?}", &header[c], &rec[c]))
                })
            })
            .collect::<CliResult<Vec<f64>>>()?;
        if let Some(g) = group_col {
            let label = rec[g].to_string();
            if let Some(l) = levels {
                if !l.contains(&label) {
                    return Err(input(format!("{name} row {row}: unknown group {label:?}")));
                }
            }
            groups.push(label);
        }
        ids.push(id);
        values.push(vals);
    }
    if ids.is_empty() {
        return Err(input(format!("{name}: no subjects")));
    }
    let groups = group_col.map(|_| groups);
    let table = match levels {
        Some(l) => CovariateTable::with_levels(ids, names, values, groups, l.to_vec()),
        None => CovariateTable::new(ids, names, values, groups),
    };
    table.map_err(|e| input(format!("{name}: {e}")))
}

pub fn write_directions(path: &Path, subject_ids: &[String], field: &DirectionField) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(["subject", "voxel", "x", "y", "z"])?;
    for (i, id) in subject_ids.iter().enumerate() {
        for v in 0..field.n_voxels() {
            if let Some(e) = field.get(i, v) {
                w.write_record([id.clone(), v.to_string(), e.x.to_string(), e.y.to_string(), e.z.to_string()])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_directions(path: &Path, table: &CovariateTable, n_voxels: usize) -> CliResult<DirectionField> {
    let name = name_of(path);
    let mut rdr = csv_reader(path)?;
    let header: Vec<String> =
        rdr.headers().map_err(|e| input(format!("{name}: {e}")))?.iter().map(str::to_string).collect();
    if header != ["subject", "voxel", "x", "y", "z"] {
        return Err(input(format!("{name}: header must be subject,voxel,x,y,z, got {}", header.join(","))));
    }
    let mut field = DirectionField::new(table.n_subjects(), n_voxels);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| input(format!("{name}: {e}")))?;
        let row = row_of(&rec);
        let i = table
            .subject_ids
            .iter()
            .position(|s| s == &rec[0])
            .ok_or_else(|| input(format!("{name} row {row}: unknown subject {:?}", &rec[0])))?;
        let v: usize = rec[1]
            .parse()
            .ok()
            .filter(|&v| v < n_voxels)
            .ok_or_else(|| input(format!("{name} row {row}: voxel {:?} is not an id below {n_voxels}", &rec[1])))?;
        let mut xyz = [0.0; 3];
        for (k, slot) in xyz.iter_mut().enumerate() {
            *slot = rec[2 + k].parse::<f64>().ok().filter(|x| x.is_finite()).ok_or_else(|| {
                input(format!("{name} row {row}: column {} is not a finite number: {:?}", header[2 + k], &rec[2 + k]))
            })?;
        }
        if field.get(i, v).is_some() {
            return Err(input(format!("{name} row {row}: duplicate entry for subject {:?}, voxel {v}", &rec[0])));
        }
        field.set(i, v, xyz);
    }
    Ok(field)
}

/// Atlas, covariates and (when `with_directions`) directions of a data directory.
pub struct DataDir {
    pub atlas: StreamlineAtlas,
    pub table: CovariateTable,
    pub directions: Option<DirectionField>,
}

pub fn read_data_dir(dir: &Path, levels: Option<&[String]>, with_directions: bool) -> CliResult<DataDir> {
    let atlas = read_atlas(&dir.join(ATLAS))?;
    let table = read_covariates(&dir.join(COVARIATES), levels)?;
    let dpath = dir.join(DIRECTIONS);
    let directions =
        if with_directions || dpath.exists() { Some(read_directions(&dpath, &table, atlas.n_voxels())?) } else { None };
    Ok(DataDir { atlas, table, directions })
}

pub fn model_data(d: &DataDir, group_specific: bool) -> CliResult<ModelData> {
    let field = d.directions.as_ref().ok_or_else(|| input("directions.csv is required"))?;
    ModelData::new(d.atlas.clone(), d.table.clone(), field, group_specific).map_err(|e| input(e.to_string()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DrawRecord {
    pub iteration: usize,
    pub state: ModelState,
}

pub fn write_draw<W: Write>(w: &mut W, iteration: usize, state: &ModelState) -> anyhow::Result<()> {
    #[derive(Serialize)]
    struct Ref<'a> {
        iteration: usize,
        state: &'a ModelState,
    }
    serde_json::to_writer(&mut *w, &Ref { iteration, state })?;
    w.write_all(b"\n")?;
    Ok(())
}

pub fn read_draws(path: &Path) -> CliResult<Vec<DrawRecord>> {
    let f = File::open(path).map_err(|e| input(format!("cannot open {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (k, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| input(format!("{}: {e}", path.display())))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrawRecord =
            serde_json::from_str(&line).map_err(|e| input(format!("{} line {}: {e}", path.display(), k + 1)))?;
        out.push(rec);
    }
    Ok(out)
}
