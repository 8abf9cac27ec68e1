//! Checkpoint directories: `manifest.json`, `norm.csv` and one CSV per
//! parameter tensor.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::TrainConfig;
use crate::data::NormalizationStats;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::ssm::{ModelSpec, NeuralSsm, StateSpaceModel};

pub const MANIFEST: &str = "manifest.json";
pub const NORM_FILE: &str = "norm.csv";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CheckpointManifest {
    pub spec: ModelSpec,
    pub config: TrainConfig,
    pub params: Vec<ParamEntry>,
    pub dev_open_loop_mse: f64,
    pub best_step: usize,
    pub norm_stats: String,
    /// Dataset the model was trained on, when known.
    #[serde(default)]
    pub data: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint<T> {
    pub model: NeuralSsm<T>,
    pub config: TrainConfig,
    pub stats: NormalizationStats<T>,
    pub dev_open_loop_mse: f64,
    pub best_step: usize,
    pub data: Option<String>,
}

fn file_name(param: &str) -> String {
    format!("{}.csv", param.replace(|c: char| !(c.is_ascii_alphanumeric() || c == '.' || c == '_'), "_"))
}

fn write_matrix<T: Scalar>(path: &Path, m: &Array2<T>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for row in m.rows() {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", cells.join(","))?;
    }
    out.flush()?;
    Ok(())
}

fn read_matrix<T: Scalar>(path: &Path, shape: [usize; 2]) -> Result<Array2<T>> {
    let text = fs::read_to_string(path)?;
    let mut values = Vec::with_capacity(shape[0] * shape[1]);
    for (r, line) in text.lines().enumerate() {
        for (c, cell) in line.split(',').enumerate() {
            let v = cell.trim().parse::<T>().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                column: format!("{}", c + 1),
                message: format!("non-numeric value '{cell}'"),
            })?;
            values.push(v);
        }
    }
    Array2::from_shape_vec((shape[0], shape[1]), values).map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        row: 0,
        column: String::new(),
        message: format!("expected a {}x{} matrix", shape[0], shape[1]),
    })
}

impl<T: Scalar> Checkpoint<T> {
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let mut params = Vec::new();
        for p in self.model.params() {
            let file = file_name(&p.name);
            write_matrix(&dir.join(&file), &p.value)?;
            params.push(ParamEntry {
                name: p.name.clone(),
                shape: [p.value.nrows(), p.value.ncols()],
                file,
            });
        }
        self.stats.write_csv(&dir.join(NORM_FILE))?;
        let manifest = CheckpointManifest {
            spec: self.model.spec,
            config: self.config.clone(),
            params,
            dev_open_loop_mse: self.dev_open_loop_mse,
            best_step: self.best_step,
            norm_stats: NORM_FILE.to_owned(),
            data: self.data.clone(),
        };
        let path = dir.join(MANIFEST);
        let tmp = dir.join(format!("{MANIFEST}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&manifest)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(MANIFEST);
        let text = fs::read_to_string(&manifest_path).map_err(|e| {
            Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", manifest_path.display())))
        })?;
        let manifest: CheckpointManifest = serde_json::from_str(&text)?;
        let mut model = NeuralSsm::<T>::init(manifest.spec, 0)?;
        {
            let mut slots = model.params_mut();
            if slots.len() != manifest.params.len() {
                return Err(Error::Data(format!(
                    "checkpoint lists {} parameters, model has {}",
                    manifest.params.len(),
                    slots.len()
                )));
            }
            for entry in &manifest.params {
                let slot = slots
                    .iter_mut()
                    .find(|p| p.name == entry.name)
                    .ok_or_else(|| Error::Data(format!("unknown parameter '{}' in checkpoint", entry.name)))?;
                if slot.value.dim() != (entry.shape[0], entry.shape[1]) {
                    return Err(Error::shape(
                        "checkpoint parameter",
                        slot.value.dim(),
                        (entry.shape[0], entry.shape[1]),
                    ));
                }
                slot.value = read_matrix(&dir.join(&entry.file), entry.shape)?;
            }
        }
        let stats = NormalizationStats::read_csv(&dir.join(&manifest.norm_stats))?;
        Ok(Self {
            model,
            config: manifest.config,
            stats,
            dev_open_loop_mse: manifest.dev_open_loop_mse,
            best_step: manifest.best_step,
            data: manifest.data,
        })
    }
}
