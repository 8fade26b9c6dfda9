//! Field schema, datasets, stratified splits, batching and the synthetic
//! generator.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Categorical,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub kind: FieldKind,
    /// Number of categories; 1 for continuous fields.
    #[serde(default = "one")]
    pub cardinality: u32,
}

fn one() -> u32 {
    1
}

impl FieldSpec {
    pub fn categorical(name: impl Into<String>, cardinality: u32) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Categorical,
            cardinality,
        }
    }

    pub fn continuous(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            kind: FieldKind::Continuous,
            cardinality: 1,
        }
    }
}

/// Ordered field metadata shared by every phase.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    #[serde(rename = "field")]
    fields: Vec<FieldSpec>,
}

impl FieldSchema {
    pub fn new(fields: Vec<FieldSpec>) -> Result<Self> {
        if fields.len() < 2 {
            return Err(Error::Schema(format!(
                "schema needs at least 2 fields, got {}",
                fields.len()
            )));
        }
        let mut seen = HashSet::new();
        for f in &fields {
            if f.name.is_empty() || f.name == "label" || f.name.contains(',') {
                return Err(Error::Schema(format!("invalid field name {:?}", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::Schema(format!("duplicate field name {:?}", f.name)));
            }
            match f.kind {
                FieldKind::Categorical if f.cardinality < 2 => {
                    return Err(Error::Schema(format!(
                        "categorical field {:?} needs cardinality >= 2",
                        f.name
                    )))
                }
                FieldKind::Continuous if f.cardinality != 1 => {
                    return Err(Error::Schema(format!(
                        "continuous field {:?} must have cardinality 1",
                        f.name
                    )))
                }
                _ => {}
            }
        }
        Ok(Self { fields })
    }

    pub fn len(&self) -> usize {
        self.fields.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fields.is_empty()
    }

    pub fn fields(&self) -> &[FieldSpec] {
        &self.fields
    }

    pub fn field(&self, j: usize) -> &FieldSpec {
        &self.fields[j]
    }

    pub fn names(&self) -> Vec<String> {
        self.fields.iter().map(|f| f.name.clone()).collect()
    }

    /// Stable 64-bit fingerprint of names, kinds and cardinalities.
    pub fn hash(&self) -> u64 {
        let mut h = Sha256::new();
        for f in &self.fields {
            h.update(f.name.as_bytes());
            h.update([0u8]);
            h.update([match f.kind {
                FieldKind::Categorical => b'c',
                FieldKind::Continuous => b'n',
            }]);
            h.update(f.cardinality.to_le_bytes());
        }
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let raw: FieldSchema =
            toml::from_str(s).map_err(|e| Error::Schema(format!("bad schema document: {e}")))?;
        Self::new(raw.fields)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("schema serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::artifact(path, e.to_string()))?;
        Self::from_toml_str(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_toml_string())?;
        Ok(())
    }
}

/// One encoded feature value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Cell {
    Index(u32),
    Value(f64),
}

/// Encoded examples in row-major order, `schema.len()` cells per row.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    schema: Arc<FieldSchema>,
    cells: Vec<Cell>,
    labels: Vec<u8>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        schema: Arc<FieldSchema>,
        cells: Vec<Cell>,
        labels: Vec<u8>,
    ) -> Result<Self> {
        let m = schema.len();
        if cells.len() != labels.len() * m {
            return Err(Error::Shape(format!(
                "{} cells for {} rows of {} fields",
                cells.len(),
                labels.len(),
                m
            )));
        }
        for (i, row) in cells.chunks(m).enumerate() {
            check_row(&schema, row).map_err(|msg| Error::Parse { line: i + 1, msg })?;
        }
        if let Some(i) = labels.iter().position(|&y| y > 1) {
            return Err(Error::Parse {
                line: i + 1,
                msg: "label must be 0 or 1".into(),
            });
        }
        Ok(Self {
            name: name.into(),
            schema,
            cells,
            labels,
        })
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<FieldSchema> {
        self.schema.clone()
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        let m = self.schema.len();
        &self.cells[i * m..(i + 1) * m]
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&y| y == 1).count()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.positives() as f64 / self.len() as f64
        }
    }

    pub fn view(&self) -> DatasetView<'_> {
        DatasetView {
            data: self,
            rows: None,
        }
    }

    pub fn view_rows<'a>(&'a self, rows: &'a [usize]) -> DatasetView<'a> {
        DatasetView {
            data: self,
            rows: Some(rows),
        }
    }

    /// Copies the given rows, in order, into a new dataset.
    pub fn subset(&self, name: impl Into<String>, rows: &[usize]) -> Dataset {
        let mut cells = Vec::with_capacity(rows.len() * self.schema.len());
        let mut labels = Vec::with_capacity(rows.len());
        for &r in rows {
            cells.extend_from_slice(self.row(r));
            labels.push(self.labels[r]);
        }
        Dataset {
            name: name.into(),
            schema: self.schema.clone(),
            cells,
            labels,
        }
    }

    /// Parses the header-bearing CSV format: field columns then `label`.
    pub fn read_csv<R: Read>(
        reader: R,
        schema: Arc<FieldSchema>,
        name: impl Into<String>,
    ) -> Result<Self> {
        let m = schema.len();
        let mut lines = BufReader::new(reader).lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => return Err(Error::Parse { line: 1, msg: "missing header".into() }),
        };
        let expected: Vec<&str> = schema
            .fields()
            .iter()
            .map(|f| f.name.as_str())
            .chain(std::iter::once("label"))
            .collect();
        let got: Vec<&str> = header.trim_end_matches('\r').split(',').map(str::trim).collect();
        if got != expected {
            return Err(Error::Parse {
                line: 1,
                msg: format!("header {:?} does not match schema {:?}", got, expected),
            });
        }

        let mut cells = Vec::new();
        let mut labels = Vec::new();
        for (k, line) in lines.enumerate() {
            let lineno = k + 2;
            let line = line?;
            let line = line.trim_end_matches('\r');
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').collect();
            if cols.len() != m + 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("expected {} columns, got {}", m + 1, cols.len()),
                });
            }
            for (spec, raw) in schema.fields().iter().zip(&cols) {
                let raw = raw.trim();
                let cell = match spec.kind {
                    FieldKind::Categorical => {
                        let idx: u32 = raw.parse().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad categorical index {raw:?} for field {}", spec.name),
                        })?;
                        if idx >= spec.cardinality {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: "index out of range".into(),
                            });
                        }
                        Cell::Index(idx)
                    }
                    FieldKind::Continuous => {
                        let v: f64 = raw.parse().map_err(|_| Error::Parse {
                            line: lineno,
                            msg: format!("bad continuous value {raw:?} for field {}", spec.name),
                        })?;
                        if !v.is_finite() {
                            return Err(Error::Parse {
                                line: lineno,
                                msg: format!("non-finite value for field {}", spec.name),
                            });
                        }
                        Cell::Value(v)
                    }
                };
                cells.push(cell);
            }
            let label = match cols[m].trim() {
                "0" => 0,
                "1" => 1,
                other => {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: format!("non-binary label {other:?}"),
                    })
                }
            };
            labels.push(label);
        }
        Ok(Self {
            name: name.into(),
            schema,
            cells,
            labels,
        })
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = BufWriter::new(writer);
        for f in self.schema.fields() {
            write!(w, "{},", f.name)?;
        }
        writeln!(w, "label")?;
        for i in 0..self.len() {
            for cell in self.row(i) {
                match cell {
                    Cell::Index(k) => write!(w, "{k},")?,
                    Cell::Value(v) => write!(w, "{v},")?,
                }
            }
            writeln!(w, "{}", self.labels[i])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(fs::File::create(path)?)
    }
}

fn check_row(schema: &FieldSchema, row: &[Cell]) -> std::result::Result<(), String> {
    for (spec, cell) in schema.fields().iter().zip(row) {
        match (spec.kind, cell) {
            (FieldKind::Categorical, Cell::Index(k)) if *k < spec.cardinality => {}
            (FieldKind::Categorical, Cell::Index(_)) => return Err("index out of range".into()),
            (FieldKind::Continuous, Cell::Value(v)) if v.is_finite() => {}
            _ => return Err(format!("cell kind mismatch for field {}", spec.name)),
        }
    }
    Ok(())
}

/// Reads a dataset CSV from disk.
pub fn load_dataset(path: impl AsRef<Path>, schema: Arc<FieldSchema>) -> Result<Dataset> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::artifact(path, e.to_string()))?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Dataset::read_csv(file, schema, name)
}

/// A dataset or a subset of its rows.
#[derive(Debug, Clone, Copy)]
pub struct DatasetView<'a> {
    data: &'a Dataset,
    rows: Option<&'a [usize]>,
}

impl<'a> DatasetView<'a> {
    pub fn data(&self) -> &'a Dataset {
        self.data
    }

    pub fn len(&self) -> usize {
        self.rows.map_or(self.data.len(), |r| r.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Source row id of the `k`-th example in the view.
    pub fn source_row(&self, k: usize) -> usize {
        self.rows.map_or(k, |r| r[k])
    }

    pub fn labels(&self) -> Vec<u8> {
        (0..self.len()).map(|k| self.data.label(self.source_row(k))).collect()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let pos = (0..self.len())
            .filter(|&k| self.data.label(self.source_row(k)) == 1)
            .count();
        pos as f64 / self.len() as f64
    }

    pub fn to_dataset(&self, name: impl Into<String>) -> Dataset {
        let rows: Vec<usize> = (0..self.len()).map(|k| self.source_row(k)).collect();
        self.data.subset(name, &rows)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self {
            train: 0.7,
            val: 0.15,
            test: 0.15,
        }
    }
}

/// Row ids of the four disjoint splits. `pretrain` is carved out of the
/// train portion, so `train` holds the remaining training rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitSet {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub pretrain: Vec<usize>,
    pub seed: u64,
}

impl SplitSet {
    /// Full training portion: pretrain followed by the remaining train rows.
    pub fn full_train(&self) -> Vec<usize> {
        self.pretrain.iter().chain(&self.train).copied().collect()
    }
}

/// Stratified split into train/val/test, with a pretraining subset carved
/// from the train portion. Positives and negatives are split independently
/// and each split is then shuffled.
pub fn stratified_split(
    ds: &Dataset,
    ratios: SplitRatios,
    pretrain_size: usize,
    seed: u64,
) -> Result<SplitSet> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r))
        || ((train + val + test) - 1.0).abs() > 1e-9
    {
        return Err(Error::Config(format!(
            "split ratios ({train}, {val}, {test}) must be in [0,1] and sum to 1"
        )));
    }
    if ds.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pos: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == 1).collect();
    let mut neg: Vec<usize> = (0..ds.len()).filter(|&i| ds.label(i) == 0).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Stratification(format!(
            "dataset needs both classes, got {} positives and {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    pos.shuffle(&mut rng);
    neg.shuffle(&mut rng);

    let portion = |n: usize| {
        let n_val = ((n as f64) * val).round() as usize;
        let n_test = (((n as f64) * test).round() as usize).min(n - n_val);
        (n - n_val - n_test, n_val, n_test)
    };
    let (pos_train, pos_val, pos_test) = portion(pos.len());
    let (neg_train, neg_val, neg_test) = portion(neg.len());
    if pretrain_size > pos_train + neg_train {
        return Err(Error::Config(format!(
            "pretrain size {pretrain_size} exceeds train portion of {} rows",
            pos_train + neg_train
        )));
    }
    let rate = pos.len() as f64 / ds.len() as f64;
    let pre_pos = ((pretrain_size as f64 * rate).round() as usize)
        .min(pos_train)
        .max(pretrain_size.saturating_sub(neg_train));
    let pre_neg = pretrain_size - pre_pos;

    let take = |ids: &[usize], from: usize, n: usize| ids[from..from + n].to_vec();
    let mut out = SplitSet {
        pretrain: [take(&pos, 0, pre_pos), take(&neg, 0, pre_neg)].concat(),
        train: [
            take(&pos, pre_pos, pos_train - pre_pos),
            take(&neg, pre_neg, neg_train - pre_neg),
        ]
        .concat(),
        val: [take(&pos, pos_train, pos_val), take(&neg, neg_train, neg_val)].concat(),
        test: [
            take(&pos, pos_train + pos_val, pos_test),
            take(&neg, neg_train + neg_val, neg_test),
        ]
        .concat(),
        seed,
    };
    for split in [&mut out.train, &mut out.val, &mut out.test, &mut out.pretrain] {
        split.shuffle(&mut rng);
    }
    Ok(out)
}

/// Ground-truth logistic generator: only `informative` fields carry signal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub fields: usize,
    pub informative: Vec<usize>,
    pub cardinalities: Vec<u32>,
    pub weight_scale: f64,
    pub noise_std: f64,
    pub rows: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    /// All fields categorical with the same cardinality; weight scale 1.5,
    /// noise 0.1.
    pub fn uniform(
        fields: usize,
        informative: Vec<usize>,
        cardinality: u32,
        rows: usize,
        seed: u64,
    ) -> Self {
        Self {
            fields,
            informative,
            cardinalities: vec![cardinality; fields],
            weight_scale: 1.5,
            noise_std: 0.1,
            rows,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.fields < 2 {
            return Err(Error::Config("synthetic spec needs at least 2 fields".into()));
        }
        if self.cardinalities.len() != self.fields {
            return Err(Error::Config(format!(
                "{} cardinalities for {} fields",
                self.cardinalities.len(),
                self.fields
            )));
        }
        let uniq: HashSet<_> = self.informative.iter().collect();
        if uniq.is_empty()
            || uniq.len() != self.informative.len()
            || uniq.len() >= self.fields
            || self.informative.iter().any(|&j| j >= self.fields)
        {
            return Err(Error::Config(format!(
                "informative fields {:?} must be a nonempty proper subset of 0..{}",
                self.informative, self.fields
            )));
        }
        if !(self.weight_scale >= 0.0 && self.weight_scale.is_finite())
            || !(self.noise_std >= 0.0 && self.noise_std.is_finite())
        {
            return Err(Error::Config("weight_scale and noise_std must be finite and >= 0".into()));
        }
        Ok(())
    }

    pub fn schema(&self) -> Result<FieldSchema> {
        FieldSchema::new(
            self.cardinalities
                .iter()
                .enumerate()
                .map(|(j, &c)| FieldSpec::categorical(format!("f{j}"), c))
                .collect(),
        )
    }
}

/// Samples a dataset with labels `Bernoulli(sigmoid(sum_j w_j[x_j] + eps))`
/// over the informative fields. Deterministic per seed.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let schema = Arc::new(spec.schema()?);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weight_dist = Normal::new(0.0, spec.weight_scale).map_err(|e| Error::Config(e.to_string()))?;
    let noise_dist = Normal::new(0.0, spec.noise_std).map_err(|e| Error::Config(e.to_string()))?;

    let weights: Vec<(usize, Vec<f64>)> = spec
        .informative
        .iter()
        .map(|&j| {
            let w = (0..spec.cardinalities[j])
                .map(|_| weight_dist.sample(&mut rng))
                .collect();
            (j, w)
        })
        .collect();

    let mut cells = Vec::with_capacity(spec.rows * spec.fields);
    let mut labels = Vec::with_capacity(spec.rows);
    let mut row = vec![0u32; spec.fields];
    for _ in 0..spec.rows {
        for (x, &card) in row.iter_mut().zip(&spec.cardinalities) {
            *x = rng.random_range(0..card);
        }
        let mut logit = noise_dist.sample(&mut rng);
        for (j, w) in &weights {
            logit += w[row[*j] as usize];
        }
        let p = 1.0 / (1.0 + (-logit).exp());
        labels.push(u8::from(rng.random::<f64>() < p));
        cells.extend(row.iter().map(|&x| Cell::Index(x)));
    }
    Ok(Dataset {
        name: format!("synthetic-{}", spec.seed),
        schema,
        cells,
        labels,
    })
}

/// A contiguous copy of some examples.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    /// Source row id of each example.
    pub rows: Vec<usize>,
    /// Row-major, one cell per schema field.
    pub cells: Vec<Cell>,
    pub labels: Vec<u8>,
    pub fields: usize,
}

impl Batch {
    pub fn from_view(view: &DatasetView<'_>, positions: &[usize]) -> Self {
        let data = view.data();
        let mut rows = Vec::with_capacity(positions.len());
        let mut cells = Vec::with_capacity(positions.len() * data.schema().len());
        let mut labels = Vec::with_capacity(positions.len());
        for &k in positions {
            let r = view.source_row(k);
            rows.push(r);
            cells.extend_from_slice(data.row(r));
            labels.push(data.label(r));
        }
        Self {
            rows,
            cells,
            labels,
            fields: data.schema().len(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[Cell] {
        &self.cells[i * self.fields..(i + 1) * self.fields]
    }
}

/// One epoch of batches over a view. The final batch may be short.
pub struct Batches<'a> {
    view: DatasetView<'a>,
    order: Vec<usize>,
    batch_size: usize,
    next: usize,
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        if self.next >= self.order.len() {
            return None;
        }
        let end = (self.next + self.batch_size).min(self.order.len());
        let batch = Batch::from_view(&self.view, &self.order[self.next..end]);
        self.next = end;
        Some(batch)
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let left = (self.order.len() - self.next).div_ceil(self.batch_size);
        (left, Some(left))
    }
}

impl ExactSizeIterator for Batches<'_> {}

pub fn batch_iter<'a>(
    view: DatasetView<'a>,
    batch_size: usize,
    shuffle_seed: Option<u64>,
) -> Result<Batches<'a>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be >= 1".into()));
    }
    if view.is_empty() {
        return Err(Error::EmptySplit);
    }
    let mut order: Vec<usize> = (0..view.len()).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(Batches {
        view,
        order,
        batch_size,
        next: 0,
    })
}
