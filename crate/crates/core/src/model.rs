//! Embedding + MLP backbone with hand-derived reverse-mode gradients.
//!
//! Every modelled field owns a `D`-wide slot block in the concatenated
//! embedding. Categorical fields look up a row of their table; continuous
//! fields scale the single row of theirs by the cell value. The optional
//! field mask multiplies each block by its gate value before the MLP.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Batch, Cell, FieldKind, FieldSchema};
use crate::error::{Error, Result};
use crate::real::{sigmoid, Real};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed)
}

/// Affine layer `y = x W^T + b` with `W` stored as `out x in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Array1<T>,
}

impl<T: Real> Linear<T> {
    pub fn in_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.nrows()
    }
}

#[derive(Debug)]
pub struct BackboneModel<T> {
    schema: Arc<FieldSchema>,
    fields: Vec<usize>,
    embed_dim: usize,
    hidden: Vec<usize>,
    embeddings: Vec<Array2<T>>,
    layers: Vec<Linear<T>>,
    id: u64,
    generation: u64,
}

impl<T: Real> Clone for BackboneModel<T> {
    fn clone(&self) -> Self {
        Self {
            schema: self.schema.clone(),
            fields: self.fields.clone(),
            embed_dim: self.embed_dim,
            hidden: self.hidden.clone(),
            embeddings: self.embeddings.clone(),
            layers: self.layers.clone(),
            id: fresh_id(),
            generation: 0,
        }
    }
}

/// Equality of structure and parameters; identity and version are ignored.
impl<T: Real> PartialEq for BackboneModel<T> {
    fn eq(&self, other: &Self) -> bool {
        self.schema == other.schema
            && self.fields == other.fields
            && self.embed_dim == other.embed_dim
            && self.hidden == other.hidden
            && self.embeddings == other.embeddings
            && self.layers == other.layers
    }
}

/// Activations cached by a forward pass, consumed by exactly one backward.
#[derive(Debug)]
pub struct ForwardTape<T> {
    model_id: u64,
    generation: u64,
    /// Per modelled field: (table row, scale) for every example.
    lookups: Vec<Vec<(u32, T)>>,
    embedded: Array2<T>,
    mask: Option<Array1<T>>,
    layer_inputs: Vec<Array2<T>>,
    pre_activations: Vec<Array2<T>>,
}

impl<T: Real> ForwardTape<T> {
    pub fn batch_len(&self) -> usize {
        self.embedded.nrows()
    }

    /// Unmasked concatenated embeddings `e`.
    pub fn embedded(&self) -> &Array2<T> {
        &self.embedded
    }
}

/// Gradient of one embedding table restricted to the rows a batch touched.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingGrad<T> {
    /// Sorted, unique table rows.
    pub rows: Vec<u32>,
    /// `rows.len() x D`.
    pub values: Array2<T>,
}

impl<T: Real> EmbeddingGrad<T> {
    /// Gradient entry for `(row, d)`; zero for untouched rows.
    pub fn get(&self, row: u32, d: usize) -> T {
        match self.rows.binary_search(&row) {
            Ok(k) => self.values[[k, d]],
            Err(_) => T::zero(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub embeddings: Vec<EmbeddingGrad<T>>,
    pub layers: Vec<Linear<T>>,
    /// `dL/dz`, summed over the slots of each field and over the batch.
    pub mask: Option<Vec<T>>,
    /// `dL/de` for the unmasked embeddings.
    pub embedded: Array2<T>,
}

impl<T: Real> BackboneModel<T> {
    /// Fresh model over every field of `schema`.
    ///
    /// Affine weights are uniform in `+-sqrt(6 / (fan_in + fan_out))`, biases
    /// zero, embedding entries `Normal(0, 0.01)`.
    pub fn init(
        schema: Arc<FieldSchema>,
        embed_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        let fields: Vec<usize> = (0..schema.len()).collect();
        Self::init_fields(schema, fields, embed_dim, hidden, seed)
    }

    /// Fresh model over a subset of the schema's fields (ascending order).
    pub fn init_fields(
        schema: Arc<FieldSchema>,
        fields: Vec<usize>,
        embed_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Result<Self> {
        if embed_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("embedding and hidden widths must be positive".into()));
        }
        if fields.is_empty() || fields.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config("model fields must be nonempty and ascending".into()));
        }
        if fields.iter().any(|&f| f >= schema.len()) {
            return Err(Error::Shape("model field outside schema".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).unwrap();
        let embeddings = fields
            .iter()
            .map(|&f| {
                let rows = schema.field(f).cardinality as usize;
                Array2::from_shape_simple_fn((rows, embed_dim), || T::of(normal.sample(&mut rng)))
            })
            .collect();
        let mut widths = vec![fields.len() * embed_dim];
        widths.extend_from_slice(hidden);
        widths.push(1);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Linear {
                    weight: Array2::from_shape_simple_fn((fan_out, fan_in), || {
                        T::of(rng.random_range(-limit..limit))
                    }),
                    bias: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Self {
            schema,
            fields,
            embed_dim,
            hidden: hidden.to_vec(),
            embeddings,
            layers,
            id: fresh_id(),
            generation: 0,
        })
    }

    /// Assembles a model from explicit parameters, checking every shape.
    pub fn from_parts(
        schema: Arc<FieldSchema>,
        fields: Vec<usize>,
        embed_dim: usize,
        embeddings: Vec<Array2<T>>,
        layers: Vec<Linear<T>>,
    ) -> Result<Self> {
        if fields.is_empty() || fields.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Shape("model fields must be nonempty and ascending".into()));
        }
        if fields.iter().any(|&f| f >= schema.len()) || embeddings.len() != fields.len() {
            return Err(Error::Shape("embedding tables do not match model fields".into()));
        }
        for (&f, table) in fields.iter().zip(&embeddings) {
            let rows = schema.field(f).cardinality as usize;
            if table.dim() != (rows, embed_dim) {
                return Err(Error::Shape(format!(
                    "table for field {f} is {:?}, expected {:?}",
                    table.dim(),
                    (rows, embed_dim)
                )));
            }
        }
        if layers.is_empty() {
            return Err(Error::Shape("model needs an output layer".into()));
        }
        let mut width = fields.len() * embed_dim;
        for (l, layer) in layers.iter().enumerate() {
            if layer.in_dim() != width || layer.bias.len() != layer.out_dim() {
                return Err(Error::Shape(format!("layer {l} has inconsistent shape")));
            }
            width = layer.out_dim();
        }
        if width != 1 {
            return Err(Error::Shape("output layer must have width 1".into()));
        }
        let hidden = layers[..layers.len() - 1].iter().map(Linear::out_dim).collect();
        let model = Self {
            schema,
            fields,
            embed_dim,
            hidden,
            embeddings: embeddings.into_iter().map(|t| t.as_standard_layout().into_owned()).collect(),
            layers: layers
                .into_iter()
                .map(|l| Linear {
                    weight: l.weight.as_standard_layout().into_owned(),
                    bias: l.bias,
                })
                .collect(),
            id: fresh_id(),
            generation: 0,
        };
        model.check_finite()?;
        Ok(model)
    }

    pub fn schema(&self) -> &FieldSchema {
        &self.schema
    }

    pub fn schema_arc(&self) -> Arc<FieldSchema> {
        self.schema.clone()
    }

    /// Schema indices of the modelled fields.
    pub fn fields(&self) -> &[usize] {
        &self.fields
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn embeddings(&self) -> &[Array2<T>] {
        &self.embeddings
    }

    pub fn layers(&self) -> &[Linear<T>] {
        &self.layers
    }

    /// Mutable parameters. Invalidates outstanding tapes.
    pub fn params_mut(&mut self) -> (&mut [Array2<T>], &mut [Linear<T>]) {
        self.generation += 1;
        (&mut self.embeddings, &mut self.layers)
    }

    pub fn num_params(&self) -> usize {
        self.embeddings.iter().map(|t| t.len()).sum::<usize>()
            + self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum::<usize>()
    }

    pub fn check_finite(&self) -> Result<()> {
        for (p, t) in self.embeddings.iter().enumerate() {
            if t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite value in embed.{}", self.fields[p])));
            }
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.weight.iter().chain(layer.bias.iter()).any(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!("non-finite value in mlp.{l}")));
            }
        }
        Ok(())
    }

    fn lookups(&self, batch: &Batch) -> Result<Vec<Vec<(u32, T)>>> {
        if batch.fields != self.schema.len() {
            return Err(Error::Shape(format!(
                "batch has {} fields, schema has {}",
                batch.fields,
                self.schema.len()
            )));
        }
        self.fields
            .iter()
            .map(|&f| {
                let spec = self.schema.field(f);
                (0..batch.len())
                    .map(|i| match (spec.kind, batch.row(i)[f]) {
                        (FieldKind::Categorical, Cell::Index(k)) if k < spec.cardinality => {
                            Ok((k, T::one()))
                        }
                        (FieldKind::Continuous, Cell::Value(v)) => Ok((0, T::of(v))),
                        (_, cell) => Err(Error::Lookup(format!(
                            "cell {cell:?} not valid for field {}",
                            spec.name
                        ))),
                    })
                    .collect()
            })
            .collect()
    }

    fn gather(&self, lookups: &[Vec<(u32, T)>], n: usize) -> Array2<T> {
        let dim = self.embed_dim;
        let mut e = Array2::zeros((n, lookups.len() * dim));
        for (p, (table, col)) in self.embeddings.iter().zip(lookups).enumerate() {
            for (i, &(row, scale)) in col.iter().enumerate() {
                let src = table.row(row as usize);
                let mut dst = e.slice_mut(s![i, p * dim..(p + 1) * dim]);
                dst.zip_mut_with(&src, |d, &v| *d = v * scale);
            }
        }
        e
    }

    /// Concatenated field embeddings, `batch x (m' * D)`.
    pub fn embed_forward(&self, batch: &Batch) -> Result<Array2<T>> {
        let lookups = self.lookups(batch)?;
        Ok(self.gather(&lookups, batch.len()))
    }

    /// MLP logits for an already-embedded input.
    pub fn mlp_forward(&self, input: &Array2<T>) -> Result<Array1<T>> {
        Ok(self.mlp_with_cache(input.clone())?.0)
    }

    fn mlp_with_cache(&self, input: Array2<T>) -> Result<(Array1<T>, Vec<Array2<T>>, Vec<Array2<T>>)> {
        if input.ncols() != self.layers[0].in_dim() {
            return Err(Error::Shape(format!(
                "input width {} does not match first layer width {}",
                input.ncols(),
                self.layers[0].in_dim()
            )));
        }
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(last);
        let mut h = input;
        for (l, layer) in self.layers.iter().enumerate() {
            let mut a = h.dot(&layer.weight.t());
            a += &layer.bias;
            inputs.push(h);
            if l == last {
                h = a;
            } else {
                h = a.mapv(|v| v.max(T::zero()));
                pre.push(a);
            }
        }
        Ok((h.column(0).to_owned(), inputs, pre))
    }

    /// Forward pass with an optional per-field mask; the tape feeds
    /// [`BackboneModel::backward`].
    pub fn forward(&self, batch: &Batch, mask: Option<&[T]>) -> Result<(Array1<T>, ForwardTape<T>)> {
        let lookups = self.lookups(batch)?;
        let embedded = self.gather(&lookups, batch.len());
        let (input, mask) = match mask {
            Some(z) => {
                let masked = apply_mask(&embedded, z, self.embed_dim)?;
                (masked, Some(Array1::from(z.to_vec())))
            }
            None => (embedded.clone(), None),
        };
        let (logits, layer_inputs, pre_activations) = self.mlp_with_cache(input)?;
        Ok((
            logits,
            ForwardTape {
                model_id: self.id,
                generation: self.generation,
                lookups,
                embedded,
                mask,
                layer_inputs,
                pre_activations,
            },
        ))
    }

    /// Logits without keeping a tape.
    pub fn logits(&self, batch: &Batch, mask: Option<&[T]>) -> Result<Array1<T>> {
        let embedded = self.embed_forward(batch)?;
        let input = match mask {
            Some(z) => apply_mask(&embedded, z, self.embed_dim)?,
            None => embedded,
        };
        Ok(self.mlp_with_cache(input)?.0)
    }

    /// Click probabilities, no mask.
    pub fn predict(&self, batch: &Batch) -> Result<Vec<T>> {
        Ok(self.logits(batch, None)?.iter().map(|&x| sigmoid(x)).collect())
    }

    /// Exact gradients of a loss whose derivative w.r.t. the logits is
    /// `dlogits`.
    pub fn backward(&self, tape: ForwardTape<T>, dlogits: &[T]) -> Result<Gradients<T>> {
        if tape.model_id != self.id || tape.generation != self.generation {
            return Err(Error::Tape("tape was not produced by this model state".into()));
        }
        let n = tape.batch_len();
        if dlogits.len() != n {
            return Err(Error::Shape(format!("{} logit gradients for batch of {n}", dlogits.len())));
        }
        let mut delta = Array2::from_shape_vec((n, 1), dlogits.to_vec()).unwrap();
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let weight = delta.t().dot(&tape.layer_inputs[l]);
            let bias = delta.sum_axis(Axis(0));
            layer_grads.push(Linear { weight, bias });
            let mut d_in = delta.dot(&layer.weight);
            if l > 0 {
                d_in.zip_mut_with(&tape.pre_activations[l - 1], |g, &a| {
                    if a <= T::zero() {
                        *g = T::zero();
                    }
                });
            }
            delta = d_in;
        }
        layer_grads.reverse();

        let dim = self.embed_dim;
        let (d_embedded, d_mask) = match &tape.mask {
            Some(z) => {
                let mut dz = vec![T::zero(); z.len()];
                for (p, g) in dz.iter_mut().enumerate() {
                    let block = s![.., p * dim..(p + 1) * dim];
                    let mut acc = T::zero();
                    for (&e, &d) in tape.embedded.slice(block).iter().zip(delta.slice(block)) {
                        acc += e * d;
                    }
                    *g = acc;
                }
                let mut de = delta;
                scale_blocks(&mut de, z.as_slice().unwrap(), dim);
                (de, Some(dz))
            }
            None => (delta, None),
        };

        let embeddings = tape
            .lookups
            .iter()
            .enumerate()
            .map(|(p, col)| scatter_rows(col, d_embedded.slice(s![.., p * dim..(p + 1) * dim])))
            .collect();

        Ok(Gradients {
            embeddings,
            layers: layer_grads,
            mask: d_mask,
            embedded: d_embedded,
        })
    }

    /// Structural copy keeping only the given model-field positions:
    /// their tables and the matching first-layer input columns. All kept
    /// values are copied exactly.
    pub fn select_fields(&self, positions: &[usize]) -> Result<Self> {
        if positions.is_empty() {
            return Err(Error::Config("all fields pruned".into()));
        }
        if positions.windows(2).any(|w| w[0] >= w[1]) || positions.iter().any(|&p| p >= self.fields.len()) {
            return Err(Error::Shape("kept positions must be ascending and in range".into()));
        }
        let dim = self.embed_dim;
        let columns: Vec<usize> = positions.iter().flat_map(|&p| p * dim..(p + 1) * dim).collect();
        let first = &self.layers[0];
        let mut layers = self.layers.clone();
        layers[0] = Linear {
            weight: first.weight.select(Axis(1), &columns),
            bias: first.bias.clone(),
        };
        Self::from_parts(
            self.schema.clone(),
            positions.iter().map(|&p| self.fields[p]).collect(),
            dim,
            positions.iter().map(|&p| self.embeddings[p].clone()).collect(),
            layers,
        )
    }
}

/// Multiplies slot block `[jD, (j+1)D)` of every row by `z[j]`.
pub fn apply_mask<T: Real>(e: &Array2<T>, z: &[T], dim: usize) -> Result<Array2<T>> {
    if dim == 0 || e.ncols() != z.len() * dim {
        return Err(Error::Shape(format!(
            "mask of length {} does not fit embedding width {} at D={dim}",
            z.len(),
            e.ncols()
        )));
    }
    let mut out = e.clone();
    scale_blocks(&mut out, z, dim);
    Ok(out)
}

fn scale_blocks<T: Real>(x: &mut Array2<T>, z: &[T], dim: usize) {
    for mut row in x.rows_mut() {
        for (block, &zj) in row.as_slice_mut().unwrap().chunks_mut(dim).zip(z) {
            block.iter_mut().for_each(|v| *v *= zj);
        }
    }
}

fn scatter_rows<T: Real>(col: &[(u32, T)], grad: ArrayView2<'_, T>) -> EmbeddingGrad<T> {
    let mut order: Vec<usize> = (0..col.len()).collect();
    order.sort_by_key(|&i| col[i].0);
    let mut rows: Vec<u32> = order.iter().map(|&i| col[i].0).collect();
    rows.dedup();
    let mut values = Array2::zeros((rows.len(), grad.ncols()));
    let mut k = 0;
    for &i in &order {
        let (row, scale) = col[i];
        while rows[k] != row {
            k += 1;
        }
        values
            .row_mut(k)
            .zip_mut_with(&grad.row(i), |acc, &g| *acc += g * scale);
    }
    EmbeddingGrad { rows, values }
}
