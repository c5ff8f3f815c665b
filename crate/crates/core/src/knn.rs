//! Exact Euclidean k-nearest-neighbour classification of embeddings.
//!
//! Distances are computed in `f64` by a linear scan. Neighbours are ranked by
//! `(distance, class ordinal, source id)`, which makes the result independent
//! of the order rows were stored in. The vote is a plain majority; a tie
//! between classes goes to the smaller summed neighbour distance, and then to
//! the lower class ordinal.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::ClassLabel;
use crate::error::{Error, Result};

/// `N x D` embeddings with aligned labels and record ids.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    vectors: Vec<f32>,
    dim: usize,
    labels: Vec<ClassLabel>,
    source_ids: Vec<String>,
}

const EMBEDDING_MAGIC: &[u8; 8] = b"MCEMBED1";

impl EmbeddingSet {
    pub fn new(vectors: Vec<f32>, dim: usize, labels: Vec<ClassLabel>, source_ids: Vec<String>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Shape("embedding dimension must be >= 1".into()));
        }
        if vectors.len() != dim * labels.len() || labels.len() != source_ids.len() {
            return Err(Error::Shape(format!(
                "{} values for dim {dim}, {} labels, {} ids",
                vectors.len(),
                labels.len(),
                source_ids.len()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Shape("embedding has non-finite entries".into()));
        }
        Ok(Self {
            vectors,
            dim,
            labels,
            source_ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn labels(&self) -> &[ClassLabel] {
        &self.labels
    }

    pub fn source_ids(&self) -> &[String] {
        &self.source_ids
    }

    pub fn vectors(&self) -> &[f32] {
        &self.vectors
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows_f64(&self) -> Vec<Vec<f64>> {
        self.vectors
            .chunks(self.dim)
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect()
    }

    /// Rows of `self` followed by rows of `other`.
    pub fn concat(&self, other: &EmbeddingSet) -> Result<Self> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!("cannot join dims {} and {}", self.dim, other.dim)));
        }
        let mut out = self.clone();
        out.vectors.extend_from_slice(&other.vectors);
        out.labels.extend_from_slice(&other.labels);
        out.source_ids.extend_from_slice(&other.source_ids);
        Ok(out)
    }

    /// Binary container: magic, `N` and `D` as little-endian u64, the
    /// row-major f32 payload, then per row a label byte and a
    /// length-prefixed UTF-8 id.
    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(EMBEDDING_MAGIC)?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        for v in &self.vectors {
            w.write_all(&v.to_le_bytes())?;
        }
        for (label, id) in self.labels.iter().zip(&self.source_ids) {
            w.write_all(&[label.ordinal() as u8])?;
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Shape(format!("embedding file: {m}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != EMBEDDING_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut u64buf = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u64buf).map_err(|_| bad("truncated header"))?;
            Ok(u64::from_le_bytes(u64buf))
        };
        let n = read_u64(&mut r)? as usize;
        let dim = read_u64(&mut r)? as usize;
        let mut payload = vec![0u8; n.checked_mul(dim).and_then(|x| x.checked_mul(4)).ok_or_else(|| bad("size overflow"))?];
        r.read_exact(&mut payload).map_err(|_| bad("truncated payload"))?;
        let vectors = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let mut labels = Vec::with_capacity(n);
        let mut ids = Vec::with_capacity(n);
        for _ in 0..n {
            let mut b = [0u8; 1];
            r.read_exact(&mut b).map_err(|_| bad("truncated label table"))?;
            labels.push(ClassLabel::from_ordinal(b[0] as usize).ok_or_else(|| bad("invalid label"))?);
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(|_| bad("truncated label table"))?;
            let mut id = vec![0u8; u32::from_le_bytes(len) as usize];
            r.read_exact(&mut id).map_err(|_| bad("truncated label table"))?;
            ids.push(String::from_utf8(id).map_err(|_| bad("id is not UTF-8"))?);
        }
        Self::new(vectors, dim, labels, ids)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_binary(&mut buf).map_err(|e| Error::io(path, e))?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::read_binary(bytes.as_slice())
    }

    /// `id,label,e0,...,e{D-1}` with one row per embedding.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Shape(e.to_string());
        let mut header = vec!["id".to_string(), "label".to_string()];
        header.extend((0..self.dim).map(|d| format!("e{d}")));
        w.write_record(&header).map_err(csv_err)?;
        for i in 0..self.len() {
            let mut row = vec![self.source_ids[i].clone(), self.labels[i].as_str().to_string()];
            row.extend(self.row(i).iter().map(|v| v.to_string()));
            w.write_record(&row).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Shape(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Euclidean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct KnnConfig {
    pub k: usize,
    pub metric: Metric,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 5,
            metric: Metric::Euclidean,
        }
    }
}

fn check_rows(rows: &[Vec<f64>], dim: usize, what: &str) -> Result<()> {
    match rows.iter().find(|r| r.len() != dim) {
        Some(r) => Err(Error::Shape(format!("{what} row has dimension {}, expected {dim}", r.len()))),
        None => Ok(()),
    }
}

/// `d[i][j] = ||a_i - b_j||_2`.
pub fn pairwise_distances(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let dim = a.first().or(b.first()).map_or(0, |r| r.len());
    check_rows(a, dim, "left")?;
    check_rows(b, dim, "right")?;
    Ok(a.iter()
        .map(|x| b.iter().map(|y| euclidean(x, y)).collect())
        .collect())
}

fn euclidean(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Neighbor {
    pub id: String,
    pub label: ClassLabel,
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KnnPrediction {
    pub label: ClassLabel,
    /// The k nearest rows, closest first.
    pub neighbors: Vec<Neighbor>,
}

/// Immutable store of the indexed embeddings.
#[derive(Debug, Clone)]
pub struct KnnIndex {
    rows: Vec<Vec<f64>>,
    labels: Vec<ClassLabel>,
    ids: Vec<String>,
    dim: usize,
}

impl KnnIndex {
    pub fn fit(train: &EmbeddingSet) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("k-NN index: no training embeddings"));
        }
        Ok(Self {
            rows: train.rows_f64(),
            labels: train.labels().to_vec(),
            ids: train.source_ids().to_vec(),
            dim: train.dim(),
        })
    }

    /// From raw rows; ids default to the row position.
    pub fn from_rows(rows: Vec<Vec<f64>>, labels: Vec<ClassLabel>) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Empty("k-NN index: no training embeddings"));
        }
        if rows.len() != labels.len() {
            return Err(Error::Shape(format!("{} rows but {} labels", rows.len(), labels.len())));
        }
        let dim = rows[0].len();
        check_rows(&rows, dim, "index")?;
        let ids = (0..rows.len()).map(|i| format!("{i:06}")).collect();
        Ok(Self { rows, labels, ids, dim })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn predict(&self, queries: &[Vec<f64>], config: &KnnConfig) -> Result<Vec<KnnPrediction>> {
        if config.k == 0 {
            return Err(Error::Config("k must be >= 1".into()));
        }
        check_rows(queries, self.dim, "query")?;
        let k = config.k.min(self.len());
        Ok(queries.iter().map(|q| self.predict_one(q, k)).collect())
    }

    pub fn predict_set(&self, queries: &EmbeddingSet, config: &KnnConfig) -> Result<Vec<KnnPrediction>> {
        self.predict(&queries.rows_f64(), config)
    }

    fn predict_one(&self, query: &[f64], k: usize) -> KnnPrediction {
        let mut ranked: Vec<(f64, usize)> = self.rows.iter().map(|r| euclidean(query, r)).zip(0..).collect();
        ranked.sort_by(|a, b| {
            a.0.total_cmp(&b.0)
                .then(self.labels[a.1].cmp(&self.labels[b.1]))
                .then(self.ids[a.1].cmp(&self.ids[b.1]))
        });
        ranked.truncate(k);
        let neighbors: Vec<Neighbor> = ranked
            .iter()
            .map(|&(distance, i)| Neighbor {
                id: self.ids[i].clone(),
                label: self.labels[i],
                distance,
            })
            .collect();
        KnnPrediction {
            label: vote(&neighbors),
            neighbors,
        }
    }
}

/// Majority label; ties by smaller summed distance, then lower ordinal.
pub fn vote(neighbors: &[Neighbor]) -> ClassLabel {
    let mut count = [0usize; ClassLabel::COUNT];
    let mut dist = [0f64; ClassLabel::COUNT];
    for n in neighbors {
        count[n.label.ordinal()] += 1;
        dist[n.label.ordinal()] += n.distance;
    }
    ClassLabel::ALL
        .into_iter()
        .filter(|l| count[l.ordinal()] > 0)
        .min_by(|a, b| {
            count[b.ordinal()]
                .cmp(&count[a.ordinal()])
                .then(dist[a.ordinal()].total_cmp(&dist[b.ordinal()]))
                .then(a.cmp(b))
        })
        .expect("at least one neighbour")
}

#[cfg(test)]
mod tests {
    use super::*;
    use ClassLabel::*;

    fn set(rows: &[(&[f32], ClassLabel)]) -> EmbeddingSet {
        let dim = rows[0].0.len();
        EmbeddingSet::new(
            rows.iter().flat_map(|r| r.0.iter().copied()).collect(),
            dim,
            rows.iter().map(|r| r.1).collect(),
            (0..rows.len()).map(|i| format!("img{i}")).collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_point_index_answers_everything() {
        let idx = KnnIndex::fit(&set(&[(&[1.0, 2.0], Taxol40)])).unwrap();
        let preds = idx.predict(&[vec![100.0, -3.0], vec![0.0, 0.0]], &KnnConfig::default()).unwrap();
        assert!(preds.iter().all(|p| p.label == Taxol40 && p.neighbors.len() == 1));
    }

    #[test]
    fn nearest_of_two() {
        let idx = KnnIndex::fit(&set(&[(&[0.0, 0.0], Control), (&[10.0, 10.0], Taxol20)])).unwrap();
        let p = idx.predict(&[vec![1.0, 1.0]], &KnnConfig { k: 1, ..Default::default() }).unwrap();
        assert_eq!(p[0].label, Control);
    }

    #[test]
    fn two_two_one_tie_goes_to_smaller_summed_distance() {
        // Neighbourhood: Taxol20 at 1.0, 1.1; Taxol40 at 0.5, 2.0; Control at 1.5.
        let idx = KnnIndex::from_rows(
            vec![vec![1.0], vec![1.1], vec![0.5], vec![2.0], vec![1.5], vec![9.0]],
            vec![Taxol20, Taxol20, Taxol40, Taxol40, Control, Taxol100],
        )
        .unwrap();
        let p = idx.predict(&[vec![0.0]], &KnnConfig::default()).unwrap();
        assert_eq!(p[0].neighbors.len(), 5);
        assert_eq!(p[0].label, Taxol20);
    }

    #[test]
    fn equal_sums_fall_back_to_ordinal() {
        let idx = KnnIndex::from_rows(vec![vec![1.0], vec![-1.0]], vec![Taxol100, Taxol20]).unwrap();
        let p = idx.predict(&[vec![0.0]], &KnnConfig { k: 2, ..Default::default() }).unwrap();
        assert_eq!(p[0].label, Taxol20);
    }

    #[test]
    fn self_match_with_k1() {
        let s = set(&[(&[0.0, 1.0], Control), (&[0.3, 0.9], Taxol20), (&[5.0, 5.0], Taxol40), (&[5.1, 4.0], Taxol100)]);
        let idx = KnnIndex::fit(&s).unwrap();
        let preds = idx.predict_set(&s, &KnnConfig { k: 1, ..Default::default() }).unwrap();
        for (p, l) in preds.iter().zip(s.labels()) {
            assert_eq!(p.label, *l);
            assert_eq!(p.neighbors[0].distance, 0.0);
        }
    }

    #[test]
    fn errors() {
        let idx = KnnIndex::fit(&set(&[(&[1.0, 2.0], Control)])).unwrap();
        assert!(matches!(idx.predict(&[vec![1.0]], &KnnConfig::default()), Err(Error::Shape(_))));
        assert!(idx.predict(&[vec![1.0, 1.0]], &KnnConfig { k: 0, ..Default::default() }).is_err());
        let empty = EmbeddingSet::new(vec![], 4, vec![], vec![]).unwrap();
        assert!(matches!(KnnIndex::fit(&empty), Err(Error::Empty(_))));
        assert!(pairwise_distances(&[vec![1.0, 2.0]], &[vec![1.0]]).is_err());
    }

    #[test]
    fn distance_basics() {
        assert_eq!(pairwise_distances(&[vec![0.0]], &[vec![0.0]]).unwrap(), vec![vec![0.0]]);
        assert_eq!(pairwise_distances(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), vec![vec![5.0]]);
    }

    #[test]
    fn binary_and_csv_formats() {
        let s = set(&[(&[0.5, -1.25, 3.0], Taxol100), (&[1.0, 2.0, 3.0], Control)]);
        let mut buf = Vec::new();
        s.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], b"MCEMBED1");
        assert_eq!(u64::from_le_bytes(buf[8..16].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(buf[16..24].try_into().unwrap()), 3);
        assert_eq!(f32::from_le_bytes(buf[24..28].try_into().unwrap()), 0.5);
        assert_eq!(EmbeddingSet::read_binary(buf.as_slice()).unwrap(), s);
        assert!(EmbeddingSet::read_binary(&buf[..30]).is_err());

        let csv = s.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "id,label,e0,e1,e2");
        assert_eq!(lines[1], "img0,taxol100,0.5,-1.25,3");
    }
}
