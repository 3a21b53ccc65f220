//! Datasets of labeled CTR samples: schema, TSV ingestion, synthetic
//! generation with skewed id frequencies, frequency statistics and batching.
//!
//! Samples are stored column-major-by-kind (labels, dense block, id block) so
//! a batch is just a list of row indices into the owning [`Dataset`].

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Exp, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};

const CONTAINER_MAGIC: &str = "#cowclip-dataset v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FieldKind {
    Dense,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    pub name: String,
    pub kind: FieldKind,
    /// Number of distinct ids; zero for dense fields.
    pub vocab_size: usize,
}

impl FieldSchema {
    pub fn dense(name: impl Into<String>) -> Self {
        FieldSchema {
            name: name.into(),
            kind: FieldKind::Dense,
            vocab_size: 0,
        }
    }

    pub fn categorical(name: impl Into<String>, vocab_size: usize) -> Self {
        FieldSchema {
            name: name.into(),
            kind: FieldKind::Categorical,
            vocab_size,
        }
    }
}

/// Ordered list of fields. Dense values and categorical ids in a sample follow
/// the relative order of their fields here.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Schema {
    fields: Vec<FieldSchema>,
}

impl Schema {
    pub fn new(fields: Vec<FieldSchema>) -> Result<Self> {
        for f in &fields {
            if f.kind == FieldKind::Categorical && f.vocab_size == 0 {
                return Err(Error::invalid(format!("field {} has vocab_size 0", f.name)));
            }
        }
        Self::new_allow_empty_vocab(fields)
    }

    fn new_allow_empty_vocab(fields: Vec<FieldSchema>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for f in &fields {
            if f.name.is_empty() || f.name.chars().any(char::is_whitespace) {
                return Err(Error::invalid(format!("bad field name {:?}", f.name)));
            }
            if !seen.insert(f.name.as_str()) {
                return Err(Error::invalid(format!("duplicate field name {}", f.name)));
            }
        }
        Ok(Schema { fields })
    }

    /// Schema with `n_dense` dense fields `I1..` followed by categorical fields `C1..`.
    pub fn standard(n_dense: usize, vocab_sizes: &[usize]) -> Result<Self> {
        let mut fields: Vec<FieldSchema> = (1..=n_dense).map(|i| FieldSchema::dense(format!("I{i}"))).collect();
        fields.extend(
            vocab_sizes
                .iter()
                .enumerate()
                .map(|(j, &v)| FieldSchema::categorical(format!("C{}", j + 1), v)),
        );
        Schema::new(fields)
    }

    pub fn fields(&self) -> &[FieldSchema] {
        &self.fields
    }

    pub fn n_dense(&self) -> usize {
        self.fields.iter().filter(|f| f.kind == FieldKind::Dense).count()
    }

    pub fn n_categorical(&self) -> usize {
        self.fields.iter().filter(|f| f.kind == FieldKind::Categorical).count()
    }

    pub fn categorical(&self) -> impl Iterator<Item = &FieldSchema> {
        self.fields.iter().filter(|f| f.kind == FieldKind::Categorical)
    }

    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.categorical().map(|f| f.vocab_size).collect()
    }

    fn with_vocab_sizes(&self, vocab: &[usize]) -> Schema {
        let mut it = vocab.iter();
        let fields = self
            .fields
            .iter()
            .map(|f| match f.kind {
                FieldKind::Dense => f.clone(),
                FieldKind::Categorical => FieldSchema::categorical(f.name.clone(), *it.next().unwrap()),
            })
            .collect();
        Schema { fields }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub label: u8,
    pub dense: Vec<f64>,
    pub ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    schema: Schema,
    labels: Vec<u8>,
    dense: Vec<f64>,
    ids: Vec<u32>,
    seed: Option<u64>,
}

impl Dataset {
    pub fn new(schema: Schema, samples: &[Sample]) -> Result<Self> {
        let mut labels = Vec::with_capacity(samples.len());
        let mut dense = Vec::with_capacity(samples.len() * schema.n_dense());
        let mut ids = Vec::with_capacity(samples.len() * schema.n_categorical());
        for s in samples {
            labels.push(s.label);
            dense.extend_from_slice(&s.dense);
            ids.extend_from_slice(&s.ids);
            if s.dense.len() != schema.n_dense() || s.ids.len() != schema.n_categorical() {
                return Err(Error::invalid("sample width does not match schema"));
            }
        }
        Self::from_parts(schema, labels, dense, ids, None)
    }

    pub fn from_parts(schema: Schema, labels: Vec<u8>, dense: Vec<f64>, ids: Vec<u32>, seed: Option<u64>) -> Result<Self> {
        let n = labels.len();
        if dense.len() != n * schema.n_dense() || ids.len() != n * schema.n_categorical() {
            return Err(Error::invalid("column blocks do not match schema width"));
        }
        if let Some(bad) = labels.iter().find(|&&y| y > 1) {
            return Err(Error::invalid(format!("label {bad} is not 0/1")));
        }
        let vocab = schema.vocab_sizes();
        let nc = vocab.len();
        for (k, &id) in ids.iter().enumerate() {
            if id as usize >= vocab[k % nc] {
                return Err(Error::Index(format!(
                    "id {id} out of range for field {} (vocab {})",
                    k % nc,
                    vocab[k % nc]
                )));
            }
        }
        Ok(Dataset {
            schema,
            labels,
            dense,
            ids,
            seed,
        })
    }

    pub fn schema(&self) -> &Schema {
        &self.schema
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Generator seed, for synthetic datasets.
    pub fn seed(&self) -> Option<u64> {
        self.seed
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> u8 {
        self.labels[i]
    }

    pub fn dense_row(&self, i: usize) -> &[f64] {
        let w = self.schema.n_dense();
        &self.dense[i * w..(i + 1) * w]
    }

    pub fn ids_row(&self, i: usize) -> &[u32] {
        let w = self.schema.n_categorical();
        &self.ids[i * w..(i + 1) * w]
    }

    pub fn sample(&self, i: usize) -> Sample {
        Sample {
            label: self.labels[i],
            dense: self.dense_row(i).to_vec(),
            ids: self.ids_row(i).to_vec(),
        }
    }

    /// Rows `indices` in the given order, same schema.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let mut labels = Vec::with_capacity(indices.len());
        let mut dense = Vec::with_capacity(indices.len() * self.schema.n_dense());
        let mut ids = Vec::with_capacity(indices.len() * self.schema.n_categorical());
        for &i in indices {
            labels.push(self.labels[i]);
            dense.extend_from_slice(self.dense_row(i));
            ids.extend_from_slice(self.ids_row(i));
        }
        Dataset {
            schema: self.schema.clone(),
            labels,
            dense,
            ids,
            seed: self.seed,
        }
    }

    /// Seeded random split; the test part holds `round(test_fraction·N)` rows.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::invalid(format!("test fraction {test_fraction} not in [0,1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut rng::seeded(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let (test, train) = idx.split_at(n_test);
        Ok((self.subset(train), self.subset(test)))
    }

    /// Writes the delimited-text container: a `#` header with schema and
    /// generator seed, then one tab-separated row per sample.
    pub fn write_container<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{CONTAINER_MAGIC}")?;
        match self.seed {
            Some(s) => writeln!(w, "#seed\t{s}")?,
            None => writeln!(w, "#seed\tnone")?,
        }
        for f in &self.schema.fields {
            match f.kind {
                FieldKind::Dense => writeln!(w, "#field\tdense\t{}", f.name)?,
                FieldKind::Categorical => writeln!(w, "#field\tcategorical\t{}\t{}", f.name, f.vocab_size)?,
            }
        }
        writeln!(w, "#rows\t{}", self.len())?;
        let mut line = String::new();
        for i in 0..self.len() {
            use std::fmt::Write as _;
            line.clear();
            write!(line, "{}", self.labels[i]).unwrap();
            for v in self.dense_row(i) {
                write!(line, "\t{v}").unwrap();
            }
            for id in self.ids_row(i) {
                write!(line, "\t{id}").unwrap();
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_container<R: Read>(r: R) -> Result<Dataset> {
        let reader = BufReader::new(r);
        let mut lines = reader.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, Ok(l))) => Ok((i + 1, l)),
                Some((i, Err(e))) => Err(Error::Parse {
                    row: i + 1,
                    message: e.to_string(),
                }),
                None => Err(Error::Parse {
                    row: 0,
                    message: format!("unexpected end of input, expected {what}"),
                }),
            }
        };
        let parse_err = |row: usize, message: String| Error::Parse { row, message };

        let (row, magic) = next("header")?;
        if magic != CONTAINER_MAGIC {
            return Err(parse_err(row, "not a dataset container".into()));
        }
        let (row, seed_line) = next("seed line")?;
        let seed = match seed_line.strip_prefix("#seed\t") {
            Some("none") => None,
            Some(s) => Some(s.parse().map_err(|e| parse_err(row, format!("seed: {e}")))?),
            None => return Err(parse_err(row, "missing #seed".into())),
        };
        let mut fields = Vec::new();
        let n_rows = loop {
            let (row, l) = next("field or rows line")?;
            let parts: Vec<&str> = l.split('\t').collect();
            match parts.as_slice() {
                ["#field", "dense", name] => fields.push(FieldSchema::dense(*name)),
                ["#field", "categorical", name, vocab] => {
                    let v = vocab.parse().map_err(|e| parse_err(row, format!("vocab: {e}")))?;
                    fields.push(FieldSchema::categorical(*name, v));
                }
                ["#rows", n] => break n.parse::<usize>().map_err(|e| parse_err(row, format!("rows: {e}")))?,
                _ => return Err(parse_err(row, format!("unexpected header line {l:?}"))),
            }
        };
        let schema = Schema::new_allow_empty_vocab(fields)?;
        let (nd, nc) = (schema.n_dense(), schema.n_categorical());
        let mut labels = Vec::with_capacity(n_rows);
        let mut dense = Vec::with_capacity(n_rows * nd);
        let mut ids = Vec::with_capacity(n_rows * nc);
        for _ in 0..n_rows {
            let (row, l) = next("sample row")?;
            let cols: Vec<&str> = l.split('\t').collect();
            if cols.len() != 1 + nd + nc {
                return Err(parse_err(row, format!("expected {} columns, got {}", 1 + nd + nc, cols.len())));
            }
            labels.push(parse_label(cols[0], row)?);
            for c in &cols[1..=nd] {
                dense.push(c.parse().map_err(|e| parse_err(row, format!("dense value {c:?}: {e}")))?);
            }
            for c in &cols[1 + nd..] {
                ids.push(c.parse().map_err(|e| parse_err(row, format!("id {c:?}: {e}")))?);
            }
        }
        Dataset::from_parts(schema, labels, dense, ids, seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_container(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Dataset::read_container(f)
    }
}

fn parse_label(s: &str, row: usize) -> Result<u8> {
    match s {
        "0" => Ok(0),
        "1" => Ok(1),
        _ => Err(Error::Parse {
            row,
            message: format!("label {s:?} is not 0 or 1"),
        }),
    }
}

// ---------------------------------------------------------------------------
// TSV ingestion
// ---------------------------------------------------------------------------

/// Transform applied to raw dense values during ingestion. Empty cells are 0
/// before the transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DenseTransform {
    /// `v -> ln(1 + max(v, 0))`
    #[default]
    Log1p,
    Identity,
}

impl DenseTransform {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            DenseTransform::Log1p => v.max(0.0).ln_1p(),
            DenseTransform::Identity => v,
        }
    }
}

/// Column layout of a label-first TSV file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TsvLayout {
    pub n_dense: usize,
    pub n_categorical: usize,
}

impl TsvLayout {
    /// label, 13 integer fields, 26 categorical tokens.
    pub const CRITEO: TsvLayout = TsvLayout {
        n_dense: 13,
        n_categorical: 26,
    };

    /// Categorical-only layout (e.g. 24 fields for Avazu-style logs).
    pub fn categorical_only(n_categorical: usize) -> Self {
        TsvLayout {
            n_dense: 0,
            n_categorical,
        }
    }
}

pub fn load_criteo_tsv(path: &Path, max_rows: Option<usize>) -> Result<Dataset> {
    load_tsv(path, TsvLayout::CRITEO, DenseTransform::Log1p, max_rows)
}

/// Loads a label-first TSV file. Categorical tokens (the empty token
/// included) get per-field ids in first-seen order.
pub fn load_tsv(path: &Path, layout: TsvLayout, transform: DenseTransform, max_rows: Option<usize>) -> Result<Dataset> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_tsv(BufReader::new(f), layout, transform, max_rows)
}

pub fn read_tsv<R: BufRead>(reader: R, layout: TsvLayout, transform: DenseTransform, max_rows: Option<usize>) -> Result<Dataset> {
    let TsvLayout { n_dense, n_categorical } = layout;
    let width = 1 + n_dense + n_categorical;
    let mut dicts: Vec<HashMap<String, u32>> = vec![HashMap::new(); n_categorical];
    let mut labels = Vec::new();
    let mut dense = Vec::new();
    let mut ids = Vec::new();
    let limit = max_rows.unwrap_or(usize::MAX);

    for (i, line) in reader.lines().enumerate() {
        if labels.len() >= limit {
            break;
        }
        let row = i + 1;
        let line = line.map_err(|e| Error::Parse {
            row,
            message: e.to_string(),
        })?;
        let line = line.strip_suffix('\r').unwrap_or(&line);
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != width {
            return Err(Error::Parse {
                row,
                message: format!("expected {width} columns, got {}", cols.len()),
            });
        }
        labels.push(parse_label(cols[0], row)?);
        for c in &cols[1..=n_dense] {
            let raw = if c.is_empty() {
                0.0
            } else {
                c.parse::<f64>().map_err(|e| Error::Parse {
                    row,
                    message: format!("dense value {c:?}: {e}"),
                })?
            };
            dense.push(transform.apply(raw));
        }
        for (j, tok) in cols[1 + n_dense..].iter().enumerate() {
            let dict = &mut dicts[j];
            let next = dict.len() as u32;
            ids.push(*dict.entry((*tok).to_string()).or_insert(next));
        }
    }

    let mut fields: Vec<FieldSchema> = (1..=n_dense).map(|i| FieldSchema::dense(format!("I{i}"))).collect();
    fields.extend(
        dicts
            .iter()
            .enumerate()
            .map(|(j, d)| FieldSchema::categorical(format!("C{}", j + 1), d.len())),
    );
    let schema = Schema::new_allow_empty_vocab(fields)?;
    Dataset::from_parts(schema, labels, dense, ids, None)
}

// ---------------------------------------------------------------------------
// Synthetic generation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum IdDistribution {
    /// P(id k) ∝ (k+1)^-exponent, so id 0 is the most frequent.
    Zipf { exponent: f64 },
    Uniform,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_dense: usize,
    pub vocab_sizes: Vec<usize>,
    pub ids: IdDistribution,
}

/// Ground-truth click model. Each id of field `j` carries a latent effect
/// `θ ~ N(0,1)` and a 2-d latent factor `u ~ N(0, I)` drawn from the
/// generator seed; the click logit is
/// `bias + Σ_j field_weights[j]·θ_j + pair_weight·Σ_{j<l} ⟨u_j, u_l⟩ + Σ_d dense_weights[d]·x_d`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClickModel {
    pub bias: f64,
    pub field_weights: Vec<f64>,
    pub dense_weights: Vec<f64>,
    pub pair_weight: f64,
}

impl ClickModel {
    /// Unit effect on every field, mild dense signal, no pairwise term.
    pub fn simple(n_categorical: usize, n_dense: usize) -> Self {
        ClickModel {
            bias: -1.0,
            field_weights: vec![1.0; n_categorical],
            dense_weights: vec![0.3; n_dense],
            pair_weight: 0.0,
        }
    }
}

const LATENT_DIM: usize = 2;

pub fn generate_synthetic(spec: &SyntheticSpec, n_samples: usize, seed: u64, click: &ClickModel) -> Result<Dataset> {
    if let IdDistribution::Zipf { exponent } = spec.ids {
        if !(exponent > 0.0) || !exponent.is_finite() {
            return Err(Error::invalid(format!("zipf exponent must be > 0, got {exponent}")));
        }
    }
    if n_samples == 0 {
        return Err(Error::invalid("n_samples must be positive"));
    }
    let nc = spec.vocab_sizes.len();
    if click.field_weights.len() != nc || click.dense_weights.len() != spec.n_dense {
        return Err(Error::invalid("click model width does not match spec"));
    }
    let schema = Schema::standard(spec.n_dense, &spec.vocab_sizes)?;

    let mut truth_rng = rng::seeded(rng::derive_seed(seed, 1));
    let effects: Vec<Vec<f64>> = spec
        .vocab_sizes
        .iter()
        .map(|&v| (0..v).map(|_| truth_rng.sample(StandardNormal)).collect())
        .collect();
    let factors: Vec<Vec<f64>> = spec
        .vocab_sizes
        .iter()
        .map(|&v| (0..v * LATENT_DIM).map(|_| truth_rng.sample(StandardNormal)).collect())
        .collect();

    let samplers: Vec<Option<WeightedIndex<f64>>> = spec
        .vocab_sizes
        .iter()
        .map(|&v| match spec.ids {
            IdDistribution::Zipf { exponent } => {
                Some(WeightedIndex::new((1..=v).map(|k| (k as f64).powf(-exponent))).expect("positive weights"))
            }
            IdDistribution::Uniform => None,
        })
        .collect();

    let mut rng = rng::seeded(rng::derive_seed(seed, 2));
    let count_dist = Exp::<f64>::new(0.2).expect("positive rate");
    let mut labels = Vec::with_capacity(n_samples);
    let mut dense = Vec::with_capacity(n_samples * spec.n_dense);
    let mut ids = Vec::with_capacity(n_samples * nc);
    let mut row_ids = vec![0u32; nc];
    for _ in 0..n_samples {
        let mut score = click.bias;
        for d in 0..spec.n_dense {
            let x: f64 = count_dist.sample(&mut rng).floor().ln_1p();
            score += click.dense_weights[d] * x;
            dense.push(x);
        }
        for j in 0..nc {
            let id = match &samplers[j] {
                Some(w) => w.sample(&mut rng),
                None => rng.random_range(0..spec.vocab_sizes[j]),
            };
            row_ids[j] = id as u32;
            score += click.field_weights[j] * effects[j][id];
        }
        if click.pair_weight != 0.0 {
            let mut pair = 0.0;
            for j in 0..nc {
                let uj = &factors[j][row_ids[j] as usize * LATENT_DIM..][..LATENT_DIM];
                for l in j + 1..nc {
                    let ul = &factors[l][row_ids[l] as usize * LATENT_DIM..][..LATENT_DIM];
                    pair += crate::linalg::dot(uj, ul);
                }
            }
            score += click.pair_weight * pair;
        }
        ids.extend_from_slice(&row_ids);
        let p = 1.0 / (1.0 + (-score).exp());
        labels.push(u8::from(rng.random_bool(p)));
    }
    Dataset::from_parts(schema, labels, dense, ids, Some(seed))
}

// ---------------------------------------------------------------------------
// Frequency statistics
// ---------------------------------------------------------------------------

/// Per-(field, id) occurrence counts over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyTable {
    total: usize,
    counts: Vec<Vec<u64>>,
}

impl FrequencyTable {
    pub fn total_samples(&self) -> usize {
        self.total
    }

    pub fn n_fields(&self) -> usize {
        self.counts.len()
    }

    pub fn field_counts(&self, field: usize) -> &[u64] {
        &self.counts[field]
    }

    pub fn count(&self, field: usize, id: usize) -> u64 {
        self.counts[field][id]
    }

    /// `count / N`.
    pub fn probability(&self, field: usize, id: usize) -> f64 {
        self.counts[field][id] as f64 / self.total as f64
    }

    /// Ids of `field` ordered by decreasing count, ties by lower id.
    pub fn ranked_ids(&self, field: usize) -> Vec<usize> {
        let c = &self.counts[field];
        let mut ids: Vec<usize> = (0..c.len()).collect();
        ids.sort_by(|&a, &b| c[b].cmp(&c[a]).then(a.cmp(&b)));
        ids
    }
}

pub fn count_frequencies(dataset: &Dataset) -> Result<FrequencyTable> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot count frequencies of an empty dataset"));
    }
    let vocab = dataset.schema.vocab_sizes();
    let mut counts: Vec<Vec<u64>> = vocab.iter().map(|&v| vec![0; v]).collect();
    for row in dataset.ids.chunks_exact(vocab.len().max(1)) {
        for (j, &id) in row.iter().enumerate() {
            counts[j][id as usize] += 1;
        }
    }
    Ok(FrequencyTable {
        total: dataset.len(),
        counts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PresenceMode {
    /// `1 - (1-p)^b`
    Exact,
    /// `min(1, b·p)`
    Approx,
}

/// Probability that an id with per-sample occurrence probability `p` shows
/// up at least once in a batch of `b` samples drawn with replacement.
pub fn batch_presence_probability(p: f64, batch_size: u64, mode: PresenceMode) -> f64 {
    debug_assert!((0.0..=1.0).contains(&p));
    debug_assert!(batch_size >= 1);
    let b = batch_size as f64;
    match mode {
        PresenceMode::Exact => -(b * (-p).ln_1p()).exp_m1(),
        PresenceMode::Approx => (b * p).min(1.0),
    }
}

/// Keeps the `k` most frequent ids of every categorical field (relabelled
/// `0..k` by decreasing frequency, ties by lower original id) and merges all
/// remaining ids into id `k`. Fields with at most `k+1` ids merge nothing and
/// are left as they are.
pub fn top_k_collapse(dataset: &Dataset, k: usize) -> Result<Dataset> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let vocab = dataset.schema.vocab_sizes();
    let nc = vocab.len();
    let mut maps: Vec<Option<Vec<u32>>> = vec![None; nc];
    let mut new_vocab = vocab.clone();
    if !dataset.is_empty() {
        let freq = count_frequencies(dataset)?;
        for j in 0..nc {
            if vocab[j] <= k + 1 {
                continue;
            }
            let mut map = vec![k as u32; vocab[j]];
            for (rank, &id) in freq.ranked_ids(j).iter().take(k).enumerate() {
                map[id] = rank as u32;
            }
            maps[j] = Some(map);
            new_vocab[j] = k + 1;
        }
    }
    let ids = dataset
        .ids
        .iter()
        .enumerate()
        .map(|(i, &id)| match &maps[i % nc] {
            Some(m) => m[id as usize],
            None => id,
        })
        .collect();
    Dataset::from_parts(
        dataset.schema.with_vocab_sizes(&new_vocab),
        dataset.labels.clone(),
        dataset.dense.clone(),
        ids,
        dataset.seed,
    )
}

// ---------------------------------------------------------------------------
// Batching
// ---------------------------------------------------------------------------

/// A view of `size` rows of a dataset.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    data: &'a Dataset,
    indices: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(data: &'a Dataset, indices: Vec<usize>) -> Self {
        Batch { data, indices }
    }

    /// Every row of `data`, in order.
    pub fn full(data: &'a Dataset) -> Self {
        Batch {
            data,
            indices: (0..data.len()).collect(),
        }
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.data
    }

    pub fn label(&self, i: usize) -> u8 {
        self.data.label(self.indices[i])
    }

    pub fn dense(&self, i: usize) -> &'a [f64] {
        self.data.dense_row(self.indices[i])
    }

    pub fn ids(&self, i: usize) -> &'a [u32] {
        self.data.ids_row(self.indices[i])
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.indices.iter().map(|&i| self.data.sample(i)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BatchMode {
    /// Disjoint batches from a fresh permutation each epoch; the trailing
    /// `N mod b` rows of each permutation are dropped.
    ShuffleEpoch,
    /// Each batch is `b` i.i.d. uniform draws.
    WithReplacement,
}

/// Endless seeded stream of batches.
pub struct Batches<'a> {
    data: &'a Dataset,
    batch_size: usize,
    mode: BatchMode,
    rng: Rng,
    perm: Vec<usize>,
    cursor: usize,
}

pub fn make_batches(data: &Dataset, batch_size: usize, mode: BatchMode, seed: u64) -> Result<Batches<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch size must be positive"));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot batch an empty dataset"));
    }
    if mode == BatchMode::ShuffleEpoch && batch_size > data.len() {
        return Err(Error::invalid(format!(
            "batch size {batch_size} exceeds dataset size {}",
            data.len()
        )));
    }
    let perm = match mode {
        BatchMode::ShuffleEpoch => (0..data.len()).collect(),
        BatchMode::WithReplacement => Vec::new(),
    };
    Ok(Batches {
        data,
        batch_size,
        mode,
        rng: rng::seeded(seed),
        perm,
        cursor: usize::MAX,
    })
}

impl Batches<'_> {
    /// `⌊N/b⌋`
    pub fn steps_per_epoch(&self) -> usize {
        self.data.len() / self.batch_size
    }
}

impl<'a> Iterator for Batches<'a> {
    type Item = Batch<'a>;

    fn next(&mut self) -> Option<Batch<'a>> {
        let b = self.batch_size;
        let indices = match self.mode {
            BatchMode::ShuffleEpoch => {
                if self.cursor == usize::MAX || self.cursor + b > self.perm.len() {
                    self.perm.shuffle(&mut self.rng);
                    self.cursor = 0;
                }
                let out = self.perm[self.cursor..self.cursor + b].to_vec();
                self.cursor += b;
                out
            }
            BatchMode::WithReplacement => (0..b).map(|_| self.rng.random_range(0..self.data.len())).collect(),
        };
        Some(Batch::new(self.data, indices))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_schema() -> Schema {
        Schema::new(vec![
            FieldSchema::dense("d"),
            FieldSchema::categorical("a", 3),
            FieldSchema::categorical("b", 12),
        ])
        .unwrap()
    }

    fn criteo_row(label: &str, dense0: &str, cat0: &str) -> String {
        let mut cols = vec![label.to_string(), dense0.to_string()];
        cols.extend((1..13).map(|i| i.to_string()));
        cols.push(cat0.to_string());
        cols.extend((1..26).map(|j| format!("t{j}")));
        cols.join("\t")
    }

    #[test]
    fn criteo_row_maps_dense_and_ids() {
        let text = format!(
            "{}\n{}\n{}\n",
            criteo_row("1", "3", "ah32x9"),
            criteo_row("0", "", ""),
            criteo_row("0", "-5", "ah32x9")
        );
        let ds = read_tsv(text.as_bytes(), TsvLayout::CRITEO, DenseTransform::Log1p, None).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.label(0), 1);
        assert_eq!(ds.dense_row(0)[0], 4f64.ln());
        assert_eq!(ds.dense_row(1)[0], 0.0);
        assert_eq!(ds.dense_row(2)[0], 0.0);
        assert_eq!(ds.dense_row(0)[1], 2f64.ln());
        // first-seen: "ah32x9" -> 0, "" -> 1
        assert_eq!(ds.ids_row(0)[0], 0);
        assert_eq!(ds.ids_row(1)[0], 1);
        assert_eq!(ds.ids_row(2)[0], 0);
        assert_eq!(ds.schema().vocab_sizes()[0], 2);
        assert_eq!(ds.schema().vocab_sizes()[1], 1);
        assert_eq!(ds.schema().n_dense(), 13);
    }

    #[test]
    fn criteo_errors_carry_row_numbers() {
        let bad_width = format!("{}\n1\t2\t3\n", criteo_row("1", "3", "x"));
        match read_tsv(bad_width.as_bytes(), TsvLayout::CRITEO, DenseTransform::Log1p, None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        let bad_label = criteo_row("2", "3", "x");
        match read_tsv(bad_label.as_bytes(), TsvLayout::CRITEO, DenseTransform::Log1p, None) {
            Err(Error::Parse { row, .. }) => assert_eq!(row, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_input_gives_empty_dataset_with_zero_vocab() {
        let ds = read_tsv("".as_bytes(), TsvLayout::CRITEO, DenseTransform::Log1p, None).unwrap();
        assert!(ds.is_empty());
        assert!(ds.schema().vocab_sizes().iter().all(|&v| v == 0));
        let text = criteo_row("1", "3", "x");
        let ds = read_tsv(text.as_bytes(), TsvLayout::CRITEO, DenseTransform::Log1p, Some(0)).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn categorical_only_layout() {
        let text = "1\ta\tb\n0\tc\tb\n";
        let ds = read_tsv(text.as_bytes(), TsvLayout::categorical_only(2), DenseTransform::Identity, None).unwrap();
        assert_eq!(ds.schema().vocab_sizes(), vec![2, 1]);
        assert_eq!(ds.schema().n_dense(), 0);
    }

    #[test]
    fn schema_rejects_duplicates_and_zero_vocab() {
        assert!(Schema::new(vec![FieldSchema::dense("x"), FieldSchema::dense("x")]).is_err());
        assert!(Schema::new(vec![FieldSchema::categorical("c", 0)]).is_err());
    }

    #[test]
    fn dataset_rejects_out_of_range_ids() {
        let s = Sample {
            label: 1,
            dense: vec![0.0],
            ids: vec![3, 0],
        };
        assert!(matches!(Dataset::new(tiny_schema(), &[s]), Err(Error::Index(_))));
    }

    #[test]
    fn counts_match_definition() {
        let mut samples = Vec::new();
        for i in 0..50 {
            samples.push(Sample {
                label: (i % 2) as u8,
                dense: vec![0.0],
                ids: vec![0, if i < 5 { 7 } else { 1 }],
            });
        }
        let ds = Dataset::new(tiny_schema(), &samples).unwrap();
        let f = count_frequencies(&ds).unwrap();
        assert_eq!(f.count(1, 7), 5);
        assert_eq!(f.probability(1, 7), 0.1);
        assert_eq!(f.probability(0, 0), 1.0);
        assert_eq!(f.ranked_ids(1)[..2], [1, 7]);
    }

    #[test]
    fn vocab_one_field_has_probability_one() {
        let schema = Schema::new(vec![FieldSchema::categorical("only", 1)]).unwrap();
        let samples: Vec<Sample> = (0..4)
            .map(|_| Sample {
                label: 0,
                dense: vec![],
                ids: vec![0],
            })
            .collect();
        let f = count_frequencies(&Dataset::new(schema, &samples).unwrap()).unwrap();
        assert_eq!(f.probability(0, 0), 1.0);
    }

    #[test]
    fn empty_dataset_frequency_is_an_error() {
        let ds = Dataset::new(tiny_schema(), &[]).unwrap();
        assert!(count_frequencies(&ds).is_err());
    }

    #[test]
    fn presence_probability_examples() {
        for b in [1, 7, 4096] {
            assert_eq!(batch_presence_probability(1.0, b, PresenceMode::Exact), 1.0);
            assert_eq!(batch_presence_probability(1.0, b, PresenceMode::Approx), 1.0);
        }
        assert!((batch_presence_probability(0.5, 2, PresenceMode::Exact) - 0.75).abs() < 1e-15);
        let exact = batch_presence_probability(0.001, 100, PresenceMode::Exact);
        // direct evaluation of 1 - 0.999^100
        let direct = 1.0 - 0.999f64.powi(100);
        assert!((exact - direct).abs() < 1e-14);
        assert!((exact - 0.095208).abs() < 1e-6);
        let approx = batch_presence_probability(0.001, 100, PresenceMode::Approx);
        assert!((approx - 0.1).abs() < 1e-15);
        assert!((approx - exact) / exact < 0.051);
    }

    #[test]
    fn top_k_relabels_by_frequency() {
        let ids_b = [9, 9, 9, 9, 2, 2, 2, 5, 5, 11, 0, 1];
        let samples: Vec<Sample> = ids_b
            .iter()
            .map(|&id| Sample {
                label: 0,
                dense: vec![1.0],
                ids: vec![1, id],
            })
            .collect();
        let ds = Dataset::new(tiny_schema(), &samples).unwrap();
        let c = top_k_collapse(&ds, 3).unwrap();
        assert_eq!(c.schema().vocab_sizes(), vec![3, 4]);
        assert_eq!(c.ids_row(0)[1], 0);
        assert_eq!(c.ids_row(4)[1], 1);
        assert_eq!(c.ids_row(7)[1], 2);
        assert_eq!(c.ids_row(9)[1], 3);
        assert_eq!(c.ids_row(10)[1], 3);
        // vocab 3 <= k+1: untouched
        assert_eq!(c.ids_row(0)[0], 1);
        assert_eq!(top_k_collapse(&c, 3).unwrap(), c);
        assert!(top_k_collapse(&ds, 0).is_err());
    }

    #[test]
    fn shuffle_epoch_batches_are_disjoint_and_deterministic() {
        let samples: Vec<Sample> = (0..10)
            .map(|i| Sample {
                label: 0,
                dense: vec![i as f64],
                ids: vec![0, 0],
            })
            .collect();
        let ds = Dataset::new(tiny_schema(), &samples).unwrap();
        let it = make_batches(&ds, 3, BatchMode::ShuffleEpoch, 5).unwrap();
        assert_eq!(it.steps_per_epoch(), 3);
        let first: Vec<Vec<usize>> = it.take(3).map(|b| b.indices().to_vec()).collect();
        let mut all: Vec<usize> = first.iter().flatten().copied().collect();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), 9);
        let again: Vec<Vec<usize>> = make_batches(&ds, 3, BatchMode::ShuffleEpoch, 5)
            .unwrap()
            .take(3)
            .map(|b| b.indices().to_vec())
            .collect();
        assert_eq!(first, again);
        assert!(make_batches(&ds, 0, BatchMode::WithReplacement, 1).is_err());
        assert!(make_batches(&ds, 11, BatchMode::ShuffleEpoch, 1).is_err());
        assert!(make_batches(&ds, 11, BatchMode::WithReplacement, 1).is_ok());
    }

    #[test]
    fn synthetic_rejects_nonpositive_exponent() {
        let spec = SyntheticSpec {
            n_dense: 0,
            vocab_sizes: vec![5],
            ids: IdDistribution::Zipf { exponent: 0.0 },
        };
        assert!(generate_synthetic(&spec, 10, 1, &ClickModel::simple(1, 0)).is_err());
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    fn small(seed: u64, n: usize, vocab: usize, zipf: f64) -> Dataset {
        let spec = SyntheticSpec {
            n_dense: 1,
            vocab_sizes: vec![vocab, vocab / 2 + 1],
            ids: IdDistribution::Zipf { exponent: zipf },
        };
        generate_synthetic(&spec, n, seed, &ClickModel::simple(2, 1)).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn counts_sum_to_rows(seed in 0u64..1000, n in 1usize..400, vocab in 1usize..60, zipf in 0.3..2.0f64) {
            let ds = small(seed, n, vocab, zipf);
            let f = count_frequencies(&ds).unwrap();
            for j in 0..f.n_fields() {
                prop_assert_eq!(f.field_counts(j).iter().sum::<u64>(), n as u64);
            }
        }

        #[test]
        fn top_k_is_idempotent_and_bounded(seed in 0u64..1000, k in 1usize..6, vocab in 1usize..40) {
            let ds = small(seed, 300, vocab, 1.1);
            let once = top_k_collapse(&ds, k).unwrap();
            let twice = top_k_collapse(&once, k).unwrap();
            for i in 0..once.len() {
                prop_assert_eq!(twice.ids_row(i), once.ids_row(i));
            }
            let f = count_frequencies(&once).unwrap();
            for j in 0..f.n_fields() {
                prop_assert!(f.field_counts(j).len() <= k + 1);
            }
            prop_assert_eq!(once.labels(), ds.labels());
        }

        #[test]
        fn shuffled_epoch_visits_rows_once(seed in 0u64..1000, n in 1usize..300, b in 1usize..64) {
            prop_assume!(b <= n);
            let ds = small(seed, n, 10, 1.0);
            let mut batches = make_batches(&ds, b, BatchMode::ShuffleEpoch, seed).unwrap();
            let steps = batches.steps_per_epoch();
            let mut seen: Vec<usize> = (0..steps).flat_map(|_| batches.next().unwrap().indices().to_vec()).collect();
            prop_assert_eq!(seen.len(), steps * b);
            seen.sort_unstable();
            seen.dedup();
            prop_assert_eq!(seen.len(), steps * b);
        }

        #[test]
        fn presence_is_monotone_in_batch(p in 1e-6..1.0f64, b in 1u64..10_000) {
            let a = batch_presence_probability(p, b, PresenceMode::Exact);
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!(batch_presence_probability(p, b + 1, PresenceMode::Exact) >= a);
            prop_assert!(batch_presence_probability(p, b, PresenceMode::Approx) >= a - 1e-15);
        }
    }
}
