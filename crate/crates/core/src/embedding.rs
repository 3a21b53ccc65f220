//! Per-field embedding tables with sparse gradient accumulation.
//!
//! Each categorical field owns a `vocab × dim` row-major matrix; row `k` is
//! the embedding column of id `k`. A backward pass produces a
//! [`SparseGradient`] holding only the ids present in the batch, together
//! with their occurrence counts.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::Normal;

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::linalg::l2_norm;
use crate::rng;

const TABLE_MAGIC: &[u8; 8] = b"CWEMB001";

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    init_sigma: f64,
    seed: u64,
    vocab: Vec<usize>,
    fields: Vec<Vec<f64>>,
}

impl EmbeddingTable {
    /// Entries drawn i.i.d. from `N(0, init_sigma²)`.
    pub fn init(vocab_sizes: &[usize], dim: usize, init_sigma: f64, seed: u64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::invalid("embedding dim must be positive"));
        }
        if !(init_sigma > 0.0) {
            return Err(Error::invalid(format!("init sigma must be positive, got {init_sigma}")));
        }
        let normal = Normal::new(0.0, init_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let mut rng = rng::seeded(seed);
        let fields = vocab_sizes
            .iter()
            .map(|&v| (0..v * dim).map(|_| rng.sample(normal)).collect())
            .collect();
        Ok(EmbeddingTable {
            dim,
            init_sigma,
            seed,
            vocab: vocab_sizes.to_vec(),
            fields,
        })
    }

    pub fn zeros(vocab_sizes: &[usize], dim: usize) -> Self {
        EmbeddingTable {
            dim,
            init_sigma: 0.0,
            seed: 0,
            vocab: vocab_sizes.to_vec(),
            fields: vocab_sizes.iter().map(|&v| vec![0.0; v * dim]).collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    pub fn vocab_sizes(&self) -> &[usize] {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn init_sigma(&self) -> f64 {
        self.init_sigma
    }

    /// Whole `vocab × dim` matrix of a field.
    pub fn field(&self, field: usize) -> &[f64] {
        &self.fields[field]
    }

    pub fn field_mut(&mut self, field: usize) -> &mut [f64] {
        &mut self.fields[field]
    }

    pub fn column(&self, field: usize, id: usize) -> &[f64] {
        &self.fields[field][id * self.dim..(id + 1) * self.dim]
    }

    pub fn column_mut(&mut self, field: usize, id: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.fields[field][id * d..(id + 1) * d]
    }

    /// L2 norm of every column of `field`.
    pub fn column_norms(&self, field: usize) -> Vec<f64> {
        self.fields[field].chunks_exact(self.dim).map(l2_norm).collect()
    }

    /// Frobenius norm of a field's whole matrix.
    pub fn field_norm(&self, field: usize) -> f64 {
        l2_norm(&self.fields[field])
    }

    pub fn squared_norm(&self) -> f64 {
        self.fields.iter().flatten().map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.fields.iter().flatten().all(|x| x.is_finite())
    }

    /// Binary checkpoint: magic, dim (u32), seed (u64), init sigma (f64),
    /// field count (u32), vocab per field (u64), then every entry as f64,
    /// all little-endian.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        w.write_all(TABLE_MAGIC)?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        w.write_all(&self.init_sigma.to_le_bytes())?;
        w.write_all(&(self.fields.len() as u32).to_le_bytes())?;
        for &v in &self.vocab {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        for x in self.fields.iter().flatten() {
            w.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        fn take<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
            let mut buf = [0u8; N];
            r.read_exact(&mut buf).map_err(|_| Error::Parse {
                row: 0,
                message: "embedding checkpoint truncated".into(),
            })?;
            Ok(buf)
        }
        if &take::<8, _>(&mut r)? != TABLE_MAGIC {
            return Err(Error::Parse {
                row: 0,
                message: "embedding checkpoint: bad magic".into(),
            });
        }
        let dim = u32::from_le_bytes(take(&mut r)?) as usize;
        let seed = u64::from_le_bytes(take(&mut r)?);
        let init_sigma = f64::from_le_bytes(take(&mut r)?);
        let n_fields = u32::from_le_bytes(take(&mut r)?) as usize;
        let vocab = (0..n_fields)
            .map(|_| Ok(u64::from_le_bytes(take(&mut r)?) as usize))
            .collect::<Result<Vec<_>>>()?;
        let fields = vocab
            .iter()
            .map(|&v| (0..v * dim).map(|_| Ok(f64::from_le_bytes(take(&mut r)?))).collect())
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Ok(EmbeddingTable {
            dim,
            init_sigma,
            seed,
            vocab,
            fields,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}

/// Which id each batch row selected in each field.
#[derive(Debug, Clone, PartialEq)]
pub struct LookupRecord {
    batch_size: usize,
    n_fields: usize,
    dim: usize,
    ids: Vec<u32>,
}

impl LookupRecord {
    pub fn batch_size(&self) -> usize {
        self.batch_size
    }

    pub fn n_fields(&self) -> usize {
        self.n_fields
    }

    pub fn ids(&self, row: usize) -> &[u32] {
        &self.ids[row * self.n_fields..(row + 1) * self.n_fields]
    }
}

/// Gathers each sample's columns into one row of width `n_fields·dim`.
pub fn lookup_forward(table: &EmbeddingTable, batch: &Batch<'_>) -> Result<(Vec<f64>, LookupRecord)> {
    let mut ids = Vec::with_capacity(batch.size() * table.n_fields());
    for i in 0..batch.size() {
        ids.extend_from_slice(batch.ids(i));
    }
    lookup_ids(table, &ids, batch.size())
}

/// Same as [`lookup_forward`] from a flat `b × n_fields` id block.
pub fn lookup_ids(table: &EmbeddingTable, ids: &[u32], batch_size: usize) -> Result<(Vec<f64>, LookupRecord)> {
    let nf = table.n_fields();
    let d = table.dim;
    if ids.len() != batch_size * nf {
        return Err(Error::invalid("id block does not match batch size × fields"));
    }
    let mut out = vec![0.0; batch_size * nf * d];
    for (i, row) in ids.chunks(nf.max(1)).take(batch_size).enumerate() {
        for (j, &id) in row.iter().enumerate() {
            let id = id as usize;
            if id >= table.vocab[j] {
                return Err(Error::Index(format!("id {id} out of range for field {j} (vocab {})", table.vocab[j])));
            }
            out[(i * nf + j) * d..(i * nf + j + 1) * d].copy_from_slice(table.column(j, id));
        }
    }
    Ok((
        out,
        LookupRecord {
            batch_size,
            n_fields: nf,
            dim: d,
            ids: ids.to_vec(),
        },
    ))
}

/// Gradient entries of one field, sorted by id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct FieldGradient {
    pub ids: Vec<u32>,
    /// Number of batch samples selecting the id.
    pub counts: Vec<u32>,
    /// `ids.len() × dim`
    pub grads: Vec<f64>,
}

impl FieldGradient {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGradient {
    dim: usize,
    fields: Vec<FieldGradient>,
}

impl SparseGradient {
    pub fn new(dim: usize, fields: Vec<FieldGradient>) -> Self {
        SparseGradient { dim, fields }
    }

    pub fn empty(dim: usize, n_fields: usize) -> Self {
        SparseGradient {
            dim,
            fields: vec![FieldGradient::default(); n_fields],
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn fields(&self) -> &[FieldGradient] {
        &self.fields
    }

    pub fn field(&self, j: usize) -> &FieldGradient {
        &self.fields[j]
    }

    pub fn field_mut(&mut self, j: usize) -> &mut FieldGradient {
        &mut self.fields[j]
    }

    pub fn n_fields(&self) -> usize {
        self.fields.len()
    }

    /// Gradient column of the `k`-th entry of field `j`.
    pub fn column(&self, j: usize, k: usize) -> &[f64] {
        &self.fields[j].grads[k * self.dim..(k + 1) * self.dim]
    }

    pub fn column_mut(&mut self, j: usize, k: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.fields[j].grads[k * d..(k + 1) * d]
    }

    /// Gradient for `(field, id)`, if the id was touched.
    pub fn get(&self, j: usize, id: u32) -> Option<(&[f64], u32)> {
        let f = &self.fields[j];
        f.ids.binary_search(&id).ok().map(|k| (self.column(j, k), f.counts[k]))
    }

    pub fn column_norms(&self, j: usize) -> Vec<f64> {
        self.fields[j].grads.chunks_exact(self.dim).map(l2_norm).collect()
    }

    pub fn squared_norm(&self) -> f64 {
        self.fields.iter().flat_map(|f| &f.grads).map(|x| x * x).sum()
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.fields.iter_mut().flat_map(|f| f.grads.iter_mut()) {
            *g *= factor;
        }
    }

    /// Densified `vocab × dim` gradient of field `j` (zeros for untouched ids).
    pub fn to_dense(&self, j: usize, vocab: usize) -> Vec<f64> {
        let mut out = vec![0.0; vocab * self.dim];
        let f = &self.fields[j];
        for (k, &id) in f.ids.iter().enumerate() {
            out[id as usize * self.dim..][..self.dim].copy_from_slice(self.column(j, k));
        }
        out
    }
}

/// Sums per-sample upstream gradient slices into per-id columns and divides
/// by the batch size. Samples are summed in batch order for each id, so the
/// result does not depend on anything but the inputs.
pub fn accumulate_gradients(record: &LookupRecord, upstream: &[f64]) -> Result<SparseGradient> {
    let (b, nf, d) = (record.batch_size, record.n_fields, record.dim);
    if upstream.len() != b * nf * d {
        return Err(Error::invalid(format!(
            "upstream has {} entries, expected {}",
            upstream.len(),
            b * nf * d
        )));
    }
    let inv_b = 1.0 / b as f64;
    let mut pairs: Vec<(u32, u32)> = Vec::with_capacity(b);
    let fields = (0..nf)
        .map(|j| {
            pairs.clear();
            pairs.extend((0..b).map(|i| (record.ids[i * nf + j], i as u32)));
            pairs.sort_unstable();
            let mut fg = FieldGradient::default();
            let mut acc = vec![0.0; d];
            let mut k = 0;
            while k < pairs.len() {
                let id = pairs[k].0;
                acc.iter_mut().for_each(|x| *x = 0.0);
                let mut cnt = 0u32;
                while k < pairs.len() && pairs[k].0 == id {
                    let i = pairs[k].1 as usize;
                    let src = &upstream[(i * nf + j) * d..(i * nf + j + 1) * d];
                    acc.iter_mut().zip(src).for_each(|(a, s)| *a += s);
                    cnt += 1;
                    k += 1;
                }
                fg.ids.push(id);
                fg.counts.push(cnt);
                fg.grads.extend(acc.iter().map(|a| a * inv_b));
            }
            fg
        })
        .collect();
    Ok(SparseGradient { dim: d, fields })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Dataset, FieldSchema, Sample, Schema};

    fn dataset(rows: &[[u32; 2]]) -> Dataset {
        let schema = Schema::new(vec![FieldSchema::categorical("a", 4), FieldSchema::categorical("b", 6)]).unwrap();
        let samples: Vec<Sample> = rows
            .iter()
            .map(|r| Sample {
                label: 0,
                dense: vec![],
                ids: r.to_vec(),
            })
            .collect();
        Dataset::new(schema, &samples).unwrap()
    }

    #[test]
    fn zero_table_gives_zero_rows() {
        let ds = dataset(&[[0, 1], [3, 5]]);
        let t = EmbeddingTable::zeros(&[4, 6], 3);
        let (out, _) = lookup_forward(&t, &Batch::full(&ds)).unwrap();
        assert!(out.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn single_row_is_column_concatenation() {
        let ds = dataset(&[[2, 4]]);
        let t = EmbeddingTable::init(&[4, 6], 3, 1.0, 9).unwrap();
        let (out, rec) = lookup_forward(&t, &Batch::full(&ds)).unwrap();
        let want: Vec<f64> = [t.column(0, 2), t.column(1, 4)].concat();
        assert_eq!(out, want);
        assert_eq!(rec.ids(0), &[2, 4]);
    }

    #[test]
    fn out_of_range_id_is_index_error() {
        let t = EmbeddingTable::zeros(&[4, 6], 2);
        assert!(matches!(lookup_ids(&t, &[0, 6], 1), Err(Error::Index(_))));
    }

    #[test]
    fn counts_and_absent_ids() {
        let ds = dataset(&[[1, 0], [1, 2], [3, 0], [1, 5]]);
        let t = EmbeddingTable::zeros(&[4, 6], 2);
        let (_, rec) = lookup_forward(&t, &Batch::full(&ds)).unwrap();
        let up = vec![1.0; 4 * 2 * 2];
        let g = accumulate_gradients(&rec, &up).unwrap();
        let (col, cnt) = g.get(0, 1).unwrap();
        assert_eq!(cnt, 3);
        assert_eq!(col, &[0.75, 0.75]);
        assert!(g.get(0, 0).is_none());
        assert!(g.get(1, 3).is_none());
        for f in g.fields() {
            assert_eq!(f.counts.iter().sum::<u32>(), 4);
        }
    }

    #[test]
    fn column_norm_basics() {
        let mut t = EmbeddingTable::zeros(&[3], 4);
        t.column_mut(0, 1)[2] = 1.0;
        t.column_mut(0, 2).copy_from_slice(&[3.0, 4.0, 0.0, 0.0]);
        assert_eq!(t.column_norms(0), vec![0.0, 1.0, 5.0]);
    }

    #[test]
    fn checkpoint_round_trip() {
        let t = EmbeddingTable::init(&[3, 5], 4, 0.1, 77).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(buf.len(), 8 + 4 + 8 + 8 + 4 + 2 * 8 + 8 * 8 * 4);
        let back = EmbeddingTable::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, t);
        assert!(EmbeddingTable::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn init_rejects_bad_arguments_and_is_deterministic() {
        assert!(EmbeddingTable::init(&[3], 0, 0.1, 1).is_err());
        assert!(EmbeddingTable::init(&[3], 2, 0.0, 1).is_err());
        let a = EmbeddingTable::init(&[30, 7], 10, 1e-2, 5).unwrap();
        let b = EmbeddingTable::init(&[30, 7], 10, 1e-2, 5).unwrap();
        assert_eq!(a, b);
    }
}

#[cfg(test)]
mod props {
    use proptest::prelude::*;

    use super::*;

    proptest! {
        #[test]
        fn accumulation_counts_and_sums(ids in prop::collection::vec(0u32..5, 1..40), dim in 1usize..4) {
            let table = EmbeddingTable::zeros(&[5], dim);
            let b = ids.len();
            let (_, rec) = lookup_ids(&table, &ids, b).unwrap();
            let upstream: Vec<f64> = (0..b * dim).map(|i| (i % 7) as f64 - 3.0).collect();
            let g = accumulate_gradients(&rec, &upstream).unwrap();
            let f = g.field(0);
            prop_assert_eq!(f.counts.iter().sum::<u32>() as usize, b);
            for (k, &id) in f.ids.iter().enumerate() {
                prop_assert_eq!(f.counts[k] as usize, ids.iter().filter(|&&x| x == id).count());
                for c in 0..dim {
                    let want: f64 = (0..b).filter(|&i| ids[i] == id).map(|i| upstream[i * dim + c]).sum::<f64>() / b as f64;
                    prop_assert!((f.grads[k * dim + c] - want).abs() < 1e-12);
                }
            }
        }
    }
}
