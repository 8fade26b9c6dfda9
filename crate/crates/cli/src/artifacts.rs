//! On-disk layout shared by the phase commands and `run-all`.
//!
//! A split directory holds `schema.toml` and one CSV per partition. A run
//! directory holds `m_t.ckpt`, `m_p.ckpt`, `m_o.ckpt`, `mask.json`,
//! `training_log.csv`, `continue_log.csv` and, after `run-all`,
//! `report.json`, `config.toml` and the split under `split/`.

use std::fs;
use std::path::Path;
use std::sync::Arc;

use lightfmp_core::checkpoint::{peek_header, Checkpoint, Phase};
use lightfmp_core::data::{load_dataset, Dataset, FieldSchema, SplitSet};
use lightfmp_core::gate::GateParams;
use lightfmp_core::model::BackboneModel;
use lightfmp_core::pipeline::{PretrainOutput, PruneMask, TrainOutput};
use lightfmp_core::real::{DType, Real};
use lightfmp_core::report::{epoch_log_csv, training_log_csv, MaskFile};
use lightfmp_core::{Error, Result};

pub const PARTS: [&str; 4] = ["train", "val", "test", "pretrain"];

pub struct SplitData {
    pub schema: Arc<FieldSchema>,
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub pretrain: Dataset,
}

impl SplitData {
    pub fn part(&self, name: &str) -> &Dataset {
        match name {
            "train" => &self.train,
            "val" => &self.val,
            "pretrain" => &self.pretrain,
            _ => &self.test,
        }
    }
}

pub fn write_split(dir: &Path, data: &Dataset, split: &SplitSet) -> Result<()> {
    fs::create_dir_all(dir)?;
    data.schema().save(dir.join("schema.toml"))?;
    for (name, rows) in PARTS.iter().zip([&split.train, &split.val, &split.test, &split.pretrain]) {
        data.subset(*name, rows).save_csv(dir.join(format!("{name}.csv")))?;
    }
    Ok(())
}

pub fn read_split(dir: &Path) -> Result<SplitData> {
    let schema = Arc::new(FieldSchema::load(dir.join("schema.toml"))?);
    let load = |name: &str| load_dataset(dir.join(format!("{name}.csv")), schema.clone());
    Ok(SplitData {
        train: load("train")?,
        val: load("val")?,
        test: load("test")?,
        pretrain: load("pretrain")?,
        schema,
    })
}

/// Storage precision of a checkpoint file.
pub fn stored_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path).map_err(|e| Error::artifact(path, e.to_string()))?;
    Ok(peek_header(&bytes).map_err(|e| Error::artifact(path, e.to_string()))?.dtype)
}

pub fn write_pretrained<T: Real>(out: &Path, res: &PretrainOutput<T>) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut ckpt = Checkpoint::new(Phase::Pretrained, res.model.clone());
    ckpt.gate = Some(res.gate.clone());
    ckpt.save(out.join("m_t.ckpt"))?;
    fs::write(out.join("training_log.csv"), training_log_csv(&res.log))?;
    Ok(())
}

pub fn write_pruned<T: Real>(
    out: &Path,
    pruned: &BackboneModel<T>,
    gate: &GateParams<T>,
    mask: &PruneMask,
) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut ckpt = Checkpoint::new(Phase::Pruned, pruned.clone());
    ckpt.gate = Some(gate.clone());
    ckpt.mask = Some(mask.clone());
    ckpt.save(out.join("m_p.ckpt"))?;
    MaskFile::new(mask, pruned.schema()).save(out.join("mask.json"))
}

pub fn write_continued<T: Real>(out: &Path, res: &TrainOutput<T>, mask: &PruneMask) -> Result<()> {
    fs::create_dir_all(out)?;
    let mut ckpt = Checkpoint::new(Phase::Final, res.model.clone());
    ckpt.mask = Some(mask.clone());
    ckpt.save(out.join("m_o.ckpt"))?;
    fs::write(out.join("continue_log.csv"), epoch_log_csv(&res.log))?;
    Ok(())
}

/// Loads `mask.json` and checks it against the schema and, when present,
/// the mask stored in the checkpoint.
pub fn read_mask(path: &Path, schema: &FieldSchema, stored: Option<&PruneMask>) -> Result<PruneMask> {
    let file = MaskFile::load(path)?;
    let mask = file
        .check_schema(schema)
        .and_then(|_| file.to_mask())
        .map_err(|e| Error::artifact(path, e.to_string()))?;
    if stored.is_some_and(|s| s != &mask) {
        return Err(Error::artifact(path, "mask disagrees with the checkpoint"));
    }
    Ok(mask)
}
