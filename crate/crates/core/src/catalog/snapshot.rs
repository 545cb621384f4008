//! Binary model snapshot.
//!
//! Layout (little-endian): magic `HSRC`, u32 version, u32 `d`, `k`, `hidden`,
//! u64 `n_text`, `n_items`, `n_item_clusters`, `assignment_len`, u8 precision,
//! softmax mode, clustering kind and encoder flag. Row-major payloads follow in
//! this order: text table, raw item table, projection weight and bias,
//! centroids, cluster assignment (u32 per token), then the optional encoder
//! (`W1`, `b1`, `W2`, `b2`).

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::projection::{project_items, ProjectionHead};
use crate::clustering::{ClusterMap, ClusterMethod};
use crate::error::{Error, Result};
use crate::scalar::{Precision, Real};
use crate::softmax::{OutputTables, SoftmaxMode};
use crate::table::EmbeddingTable;
use crate::token::TokenSpace;
use crate::trainer::EncoderMlp;

pub const SNAPSHOT_MAGIC: [u8; 4] = *b"HSRC";
pub const SNAPSHOT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClusteringKind {
    Kmeans,
    Frequency,
    Random,
    /// Loaded from a user-supplied assignment file.
    External,
}

impl ClusteringKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ClusteringKind::Kmeans => "kmeans",
            ClusteringKind::Frequency => "frequency",
            ClusteringKind::Random => "random",
            ClusteringKind::External => "external",
        }
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(tag: u8) -> Option<Self> {
        [Self::Kmeans, Self::Frequency, Self::Random, Self::External]
            .get(tag as usize)
            .copied()
    }
}

impl From<ClusterMethod> for ClusteringKind {
    fn from(m: ClusterMethod) -> Self {
        match m {
            ClusterMethod::Kmeans => ClusteringKind::Kmeans,
            ClusterMethod::Frequency => ClusteringKind::Frequency,
            ClusterMethod::Random => ClusteringKind::Random,
        }
    }
}

/// A trained (or freshly initialised) model.
#[derive(Debug, Clone, PartialEq)]
pub struct Snapshot<T> {
    /// `|V| × d`
    pub text: EmbeddingTable<T>,
    /// `|I| × k`, before projection.
    pub raw_items: EmbeddingTable<T>,
    pub head: ProjectionHead<T>,
    /// `n_item_clusters × d`
    pub centroids: EmbeddingTable<T>,
    pub cluster_map: ClusterMap,
    pub encoder: Option<EncoderMlp<T>>,
    pub mode: SoftmaxMode,
    pub clustering: ClusteringKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SnapshotHeader {
    pub version: u32,
    pub dim: u32,
    pub item_dim: u32,
    pub hidden: u32,
    pub n_text: u64,
    pub n_items: u64,
    pub n_item_clusters: u64,
    pub assignment_len: u64,
    pub precision: Precision,
    pub mode: SoftmaxMode,
    pub clustering: ClusteringKind,
    pub has_encoder: bool,
}

/// Parameter counts by table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub text_params: u64,
    pub item_params: u64,
    pub projection_params: u64,
    pub centroid_params: u64,
    pub encoder_params: u64,
    pub total_params: u64,
    pub bytes_per_param: u64,
    pub payload_bytes: u64,
}

impl StorageReport {
    /// Counts for a model of the given shape without materialising it.
    pub fn for_shape(
        n_text: u64,
        n_items: u64,
        item_dim: u64,
        dim: u64,
        n_item_clusters: u64,
        hidden: Option<u64>,
        precision: Precision,
    ) -> Self {
        let text_params = n_text * dim;
        let item_params = n_items * item_dim;
        let projection_params = dim * item_dim + dim;
        let centroid_params = n_item_clusters * dim;
        let encoder_params = hidden.map_or(0, |h| 2 * h * dim + h + dim);
        let total_params = text_params + item_params + projection_params + centroid_params + encoder_params;
        let bytes_per_param = precision.width() as u64;
        Self {
            text_params,
            item_params,
            projection_params,
            centroid_params,
            encoder_params,
            total_params,
            bytes_per_param,
            payload_bytes: total_params * bytes_per_param + 4 * (n_text + n_items),
        }
    }
}

impl<T: Real> Snapshot<T> {
    pub fn space(&self) -> TokenSpace {
        self.cluster_map.space()
    }

    pub fn dim(&self) -> usize {
        self.text.dim()
    }

    pub fn item_dim(&self) -> usize {
        self.raw_items.dim()
    }

    /// Checks that every table agrees on counts and dims.
    pub fn validate(&self) -> Result<()> {
        let space = self.space();
        let d = self.dim();
        let checks = [
            (space.n_text, self.text.rows(), "text rows vs cluster map"),
            (space.n_items, self.raw_items.rows(), "item rows vs cluster map"),
            (self.item_dim(), self.head.input_dim(), "projection input vs item dim"),
            (d, self.head.output_dim(), "projection output vs model dim"),
            (self.cluster_map.n_item_clusters(), self.centroids.rows(), "centroid rows"),
            (d, self.centroids.dim(), "centroid dim"),
        ];
        for (expected, actual, context) in checks {
            if expected != actual {
                return Err(Error::DimMismatch {
                    expected,
                    actual,
                    context,
                });
            }
        }
        if let Some(enc) = &self.encoder {
            if enc.dim() != d {
                return Err(Error::DimMismatch {
                    expected: d,
                    actual: enc.dim(),
                    context: "encoder dim",
                });
            }
        }
        Ok(())
    }

    /// Output tables with items projected to the model dimension.
    pub fn output_tables(&self) -> Result<OutputTables<T>> {
        let items = project_items(&self.raw_items, &self.head)?;
        OutputTables::new(self.text.clone(), items, self.centroids.clone())
    }

    pub fn header(&self) -> SnapshotHeader {
        let space = self.space();
        SnapshotHeader {
            version: SNAPSHOT_VERSION,
            dim: self.dim() as u32,
            item_dim: self.item_dim() as u32,
            hidden: self.encoder.as_ref().map_or(0, |e| e.hidden() as u32),
            n_text: space.n_text as u64,
            n_items: space.n_items as u64,
            n_item_clusters: self.cluster_map.n_item_clusters() as u64,
            assignment_len: self.cluster_map.assignment().len() as u64,
            precision: T::PRECISION,
            mode: self.mode,
            clustering: self.clustering,
            has_encoder: self.encoder.is_some(),
        }
    }

    pub fn storage(&self) -> StorageReport {
        let h = self.header();
        StorageReport::for_shape(
            h.n_text,
            h.n_items,
            h.item_dim as u64,
            h.dim as u64,
            h.n_item_clusters,
            self.encoder.as_ref().map(|e| e.hidden() as u64),
            h.precision,
        )
    }

    pub fn all_finite(&self) -> bool {
        self.text.all_finite()
            && self.raw_items.all_finite()
            && self.head.weight.all_finite()
            && self.head.bias.iter().all(|b| b.is_finite())
            && self.centroids.all_finite()
            && self.encoder.as_ref().is_none_or(EncoderMlp::all_finite)
    }

    pub fn cast<U: Real>(&self) -> Snapshot<U> {
        Snapshot {
            text: self.text.cast(),
            raw_items: self.raw_items.cast(),
            head: ProjectionHead {
                weight: self.head.weight.cast(),
                bias: self.head.bias.iter().map(|b| U::from_f64_lossy(b.to_f64_lossless())).collect(),
            },
            centroids: self.centroids.cast(),
            cluster_map: self.cluster_map.clone(),
            encoder: self.encoder.as_ref().map(EncoderMlp::cast),
            mode: self.mode,
            clustering: self.clustering,
        }
    }
}

fn put_values<W: Write, T: Real>(out: &mut W, values: &[T]) -> std::io::Result<()> {
    match T::PRECISION {
        Precision::F32 => {
            for v in values {
                out.write_all(&(v.to_f64_lossless() as f32).to_le_bytes())?;
            }
        }
        Precision::F64 => {
            for v in values {
                out.write_all(&v.to_f64_lossless().to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn write_snapshot<W: Write, T: Real>(mut out: W, snap: &Snapshot<T>) -> Result<()> {
    snap.validate()?;
    let h = snap.header();
    let io = |e| Error::Snapshot(format!("write failed: {e}"));
    let mut buf = Vec::with_capacity(64);
    buf.extend_from_slice(&SNAPSHOT_MAGIC);
    buf.extend_from_slice(&h.version.to_le_bytes());
    for v in [h.dim, h.item_dim, h.hidden] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for v in [h.n_text, h.n_items, h.n_item_clusters, h.assignment_len] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&[h.precision.tag(), h.mode.tag(), h.clustering.tag(), u8::from(h.has_encoder)]);
    out.write_all(&buf).map_err(io)?;
    put_values(&mut out, snap.text.as_slice()).map_err(io)?;
    put_values(&mut out, snap.raw_items.as_slice()).map_err(io)?;
    put_values(&mut out, snap.head.weight.as_slice()).map_err(io)?;
    put_values(&mut out, &snap.head.bias).map_err(io)?;
    put_values(&mut out, snap.centroids.as_slice()).map_err(io)?;
    for c in snap.cluster_map.assignment() {
        out.write_all(&c.to_le_bytes()).map_err(io)?;
    }
    if let Some(enc) = &snap.encoder {
        put_values(&mut out, enc.layer1.weight.as_slice()).map_err(io)?;
        put_values(&mut out, &enc.layer1.bias).map_err(io)?;
        put_values(&mut out, enc.layer2.weight.as_slice()).map_err(io)?;
        put_values(&mut out, &enc.layer2.bias).map_err(io)?;
    }
    out.flush().map_err(io)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.inner
            .read_exact(&mut b)
            .map_err(|_| Error::Snapshot(format!("truncated snapshot while reading {what}")))?;
        Ok(b)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(what)?))
    }

    fn values<T: Real>(&mut self, n: usize, precision: Precision, what: &str) -> Result<Vec<T>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let v = match precision {
                Precision::F32 => f32::from_le_bytes(self.bytes(what)?) as f64,
                Precision::F64 => f64::from_le_bytes(self.bytes(what)?),
            };
            out.push(T::from_f64_lossy(v));
        }
        Ok(out)
    }

    fn table<T: Real>(&mut self, rows: usize, dim: usize, precision: Precision, what: &str) -> Result<EmbeddingTable<T>> {
        let data = self.values(rows * dim, precision, what)?;
        EmbeddingTable::from_vec(rows, dim, data).map_err(|e| Error::Snapshot(format!("{what}: {e}")))
    }
}

fn read_header<R: Read>(r: &mut Reader<R>) -> Result<SnapshotHeader> {
    let magic: [u8; 4] = r.bytes("magic")?;
    if magic != SNAPSHOT_MAGIC {
        return Err(Error::Snapshot(format!("bad magic {magic:?}, expected {SNAPSHOT_MAGIC:?}")));
    }
    let version = r.u32("version")?;
    if version != SNAPSHOT_VERSION {
        return Err(Error::Snapshot(format!(
            "unsupported format version {version} (this build reads version {SNAPSHOT_VERSION})"
        )));
    }
    let (dim, item_dim, hidden) = (r.u32("dim")?, r.u32("item dim")?, r.u32("hidden")?);
    let (n_text, n_items, n_item_clusters, assignment_len) = (r.u64("n_text")?, r.u64("n_items")?, r.u64("n_item_clusters")?, r.u64("assignment length")?);
    let [p, m, c, e] = r.bytes::<4>("flags")?;
    let bad = |what: &str, v: u8| Error::Snapshot(format!("unknown {what} tag {v}"));
    Ok(SnapshotHeader {
        version,
        dim,
        item_dim,
        hidden,
        n_text,
        n_items,
        n_item_clusters,
        assignment_len,
        precision: Precision::from_tag(p).ok_or_else(|| bad("precision", p))?,
        mode: SoftmaxMode::from_tag(m).ok_or_else(|| bad("mode", m))?,
        clustering: ClusteringKind::from_tag(c).ok_or_else(|| bad("clustering", c))?,
        has_encoder: match e {
            0 => false,
            1 => true,
            v => return Err(bad("encoder flag", v)),
        },
    })
}

/// Reads a snapshot, converting the stored precision to `T`.
pub fn read_snapshot<R: Read, T: Real>(input: R) -> Result<Snapshot<T>> {
    let mut r = Reader { inner: input };
    let h = read_header(&mut r)?;
    let (d, k, hid) = (h.dim as usize, h.item_dim as usize, h.hidden as usize);
    let (n_text, n_items) = (h.n_text as usize, h.n_items as usize);
    if h.assignment_len != h.n_text + h.n_items {
        return Err(Error::Snapshot(format!(
            "assignment length {} does not cover {} tokens",
            h.assignment_len,
            h.n_text + h.n_items
        )));
    }
    let p = h.precision;
    let text = r.table(n_text, d, p, "text table")?;
    let raw_items = r.table(n_items, k, p, "item table")?;
    let head = ProjectionHead::new(r.table(d, k, p, "projection weight")?, r.values(d, p, "projection bias")?)?;
    let centroids = r.table(h.n_item_clusters as usize, d, p, "centroids")?;
    let mut assignment = Vec::with_capacity(n_text + n_items);
    for _ in 0..h.assignment_len {
        assignment.push(r.u32("cluster assignment")?);
    }
    let cluster_map = ClusterMap::from_assignment(TokenSpace::new(n_text, n_items), h.n_item_clusters as usize, assignment)
        .map_err(|e| Error::Snapshot(format!("cluster assignment: {e}")))?;
    let encoder = if h.has_encoder {
        let l1 = ProjectionHead::new(r.table(hid, d, p, "encoder W1")?, r.values(hid, p, "encoder b1")?)?;
        let l2 = ProjectionHead::new(r.table(d, hid, p, "encoder W2")?, r.values(d, p, "encoder b2")?)?;
        Some(EncoderMlp::new(l1, l2)?)
    } else {
        None
    };
    let mut trailing = [0u8; 1];
    if r.inner.read(&mut trailing).map_err(|e| Error::Snapshot(e.to_string()))? != 0 {
        return Err(Error::Snapshot("trailing bytes after payload".into()));
    }
    let snap = Snapshot {
        text,
        raw_items,
        head,
        centroids,
        cluster_map,
        encoder,
        mode: h.mode,
        clustering: h.clustering,
    };
    snap.validate()?;
    Ok(snap)
}

pub fn save_snapshot<T: Real>(path: impl AsRef<Path>, snap: &Snapshot<T>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    write_snapshot(BufWriter::new(file), snap)
}

pub fn load_snapshot<T: Real>(path: impl AsRef<Path>) -> Result<Snapshot<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_snapshot(BufReader::new(file))
}

/// Reads only the header.
pub fn read_snapshot_header(path: impl AsRef<Path>) -> Result<SnapshotHeader> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_header(&mut Reader { inner: BufReader::new(file) })
}
