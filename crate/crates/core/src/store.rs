//! Multi-layer activation shards: binary format, streaming read/write, and
//! per-layer normalization.
//!
//! On-disk layout (all little-endian):
//!
//! ```text
//! magic "RSAE" | version u32 | d u32 | L u32 | L x u32 layer ids
//! | n_tokens u64 | flags u32 | tag_len u32 | tag bytes
//! | [L x f32 norm scales, if flags bit 0]
//! | records: [sequence_id u64][position u32][token_id u32 or 0xFFFFFFFF][L*d x f32]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};

pub const SHARD_MAGIC: &[u8; 4] = b"RSAE";
pub const SHARD_VERSION: u32 = 1;

const FLAG_NORM_SCALES: u32 = 1;
const FLAG_TOKEN_IDS: u32 = 2;
const NO_TOKEN_ID: u32 = 0xFFFF_FFFF;

/// Default number of calibration tokens for normalization statistics.
pub const DEFAULT_CALIBRATION_TOKENS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub struct ShardHeader {
    pub d: u32,
    /// Absolute layer indices covered by each record, strictly increasing.
    pub layer_ids: Vec<u32>,
    pub n_tokens: u64,
    pub has_token_ids: bool,
    pub source_tag: String,
    pub norm_scales: Option<Vec<f32>>,
}

impl ShardHeader {
    pub fn new(d: u32, layer_ids: Vec<u32>, source_tag: impl Into<String>) -> Self {
        ShardHeader {
            d,
            layer_ids,
            n_tokens: 0,
            has_token_ids: false,
            source_tag: source_tag.into(),
            norm_scales: None,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_ids.len()
    }

    /// Floats per record.
    pub fn record_width(&self) -> usize {
        self.num_layers() * self.d as usize
    }

    /// Bytes occupied by one record.
    pub fn record_bytes(&self) -> u64 {
        8 + 4 + 4 + 4 * self.record_width() as u64
    }

    /// Bytes occupied by the serialized header.
    pub fn header_bytes(&self) -> u64 {
        let scales = if self.norm_scales.is_some() {
            4 * self.num_layers() as u64
        } else {
            0
        };
        4 + 4 + 4 + 4 + 4 * self.num_layers() as u64 + 8 + 4 + 4 + self.source_tag.len() as u64
            + scales
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_ids.is_empty() {
            return Err(Error::Shape("shard must cover at least one layer".into()));
        }
        if !self.layer_ids.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Shape(format!(
                "layer ids must be strictly increasing, got {:?}",
                self.layer_ids
            )));
        }
        if self.d == 0 {
            return Err(Error::Shape("activation width d must be positive".into()));
        }
        if let Some(scales) = &self.norm_scales {
            if scales.len() != self.num_layers() {
                return Err(Error::Shape(format!(
                    "norm scale count {} != layer count {}",
                    scales.len(),
                    self.num_layers()
                )));
            }
            if scales.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
                return Err(Error::Data("norm scales must be finite and positive".into()));
            }
        }
        Ok(())
    }

    fn write_to<W: Write>(&self, w: &mut W) -> std::io::Result<()> {
        w.write_all(SHARD_MAGIC)?;
        w.write_u32::<LittleEndian>(SHARD_VERSION)?;
        w.write_u32::<LittleEndian>(self.d)?;
        w.write_u32::<LittleEndian>(self.layer_ids.len() as u32)?;
        for id in &self.layer_ids {
            w.write_u32::<LittleEndian>(*id)?;
        }
        w.write_u64::<LittleEndian>(self.n_tokens)?;
        let mut flags = 0u32;
        if self.norm_scales.is_some() {
            flags |= FLAG_NORM_SCALES;
        }
        if self.has_token_ids {
            flags |= FLAG_TOKEN_IDS;
        }
        w.write_u32::<LittleEndian>(flags)?;
        w.write_u32::<LittleEndian>(self.source_tag.len() as u32)?;
        w.write_all(self.source_tag.as_bytes())?;
        if let Some(scales) = &self.norm_scales {
            for s in scales {
                w.write_f32::<LittleEndian>(*s)?;
            }
        }
        Ok(())
    }

    fn read_from<R: Read>(r: &mut R) -> std::io::Result<std::result::Result<Self, String>> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != SHARD_MAGIC {
            return Ok(Err(format!("bad magic {magic:?}, expected {SHARD_MAGIC:?}")));
        }
        let version = r.read_u32::<LittleEndian>()?;
        if version != SHARD_VERSION {
            return Ok(Err(format!(
                "unsupported shard version {version}, this build reads {SHARD_VERSION}"
            )));
        }
        let d = r.read_u32::<LittleEndian>()?;
        let n_layers = r.read_u32::<LittleEndian>()? as usize;
        let mut layer_ids = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            layer_ids.push(r.read_u32::<LittleEndian>()?);
        }
        let n_tokens = r.read_u64::<LittleEndian>()?;
        let flags = r.read_u32::<LittleEndian>()?;
        let tag_len = r.read_u32::<LittleEndian>()? as usize;
        let mut tag = vec![0u8; tag_len];
        r.read_exact(&mut tag)?;
        let source_tag = match String::from_utf8(tag) {
            Ok(t) => t,
            Err(_) => return Ok(Err("source tag is not valid UTF-8".into())),
        };
        let norm_scales = if flags & FLAG_NORM_SCALES != 0 {
            let mut scales = Vec::with_capacity(n_layers);
            for _ in 0..n_layers {
                scales.push(r.read_f32::<LittleEndian>()?);
            }
            Some(scales)
        } else {
            None
        };
        Ok(Ok(ShardHeader {
            d,
            layer_ids,
            n_tokens,
            has_token_ids: flags & FLAG_TOKEN_IDS != 0,
            source_tag,
            norm_scales,
        }))
    }
}

/// One token's multi-layer activation slice. `data` is layer-major with
/// `L * d` floats: layer 0 first.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub sequence_id: u64,
    pub position: u32,
    pub token_id: Option<u32>,
    pub data: Vec<f32>,
}

impl ActivationRecord {
    pub fn new(sequence_id: u64, position: u32, token_id: Option<u32>, data: Vec<f32>) -> Self {
        ActivationRecord {
            sequence_id,
            position,
            token_id,
            data,
        }
    }

    /// Activation vector at routed-layer slot `i` (not the absolute layer id).
    pub fn layer(&self, i: usize, d: usize) -> &[f32] {
        &self.data[i * d..(i + 1) * d]
    }

    pub fn num_layers(&self, d: usize) -> usize {
        self.data.len() / d
    }
}

/// Streaming shard writer. `finish` patches the header's token count, so the
/// caller does not need it upfront.
pub struct ShardWriter {
    file: BufWriter<File>,
    path: PathBuf,
    header: ShardHeader,
    written: u64,
}

impl ShardWriter {
    pub fn create(path: impl AsRef<Path>, header: ShardHeader) -> Result<Self> {
        header.validate()?;
        let path = path.as_ref().to_path_buf();
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        let mut w = BufWriter::new(file);
        header.write_to(&mut w).map_err(|e| Error::io(&path, e))?;
        Ok(ShardWriter {
            file: w,
            path,
            header,
            written: 0,
        })
    }

    pub fn push(&mut self, record: &ActivationRecord) -> Result<()> {
        let want = self.header.record_width();
        if record.data.len() != want {
            return Err(Error::Shape(format!(
                "record {} has {} floats, shard expects L*d = {}",
                self.written,
                record.data.len(),
                want
            )));
        }
        if record.data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "record {} contains non-finite components",
                self.written
            )));
        }
        let w = &mut self.file;
        let io = |e| Error::io(&self.path, e);
        w.write_u64::<LittleEndian>(record.sequence_id).map_err(io)?;
        w.write_u32::<LittleEndian>(record.position).map_err(io)?;
        w.write_u32::<LittleEndian>(record.token_id.unwrap_or(NO_TOKEN_ID))
            .map_err(io)?;
        for v in &record.data {
            w.write_f32::<LittleEndian>(*v).map_err(|e| Error::io(&self.path, e))?;
        }
        self.written += 1;
        Ok(())
    }

    /// Flush, patch `n_tokens`, and return total bytes written.
    pub fn finish(mut self) -> Result<u64> {
        let io = |e| Error::io(&self.path, e);
        self.file.flush().map_err(io)?;
        let mut file = self.file.into_inner().map_err(|e| Error::io(&self.path, e.into_error()))?;
        // n_tokens sits right after magic, version, d, L and the layer id list.
        let offset = 4 + 4 + 4 + 4 + 4 * self.header.layer_ids.len() as u64;
        file.seek(SeekFrom::Start(offset)).map_err(io)?;
        file.write_u64::<LittleEndian>(self.written).map_err(io)?;
        file.sync_all().map_err(io)?;
        Ok(self.header.header_bytes() + self.written * self.header.record_bytes())
    }
}

/// Write a shard whose record count is declared in the header; the count is
/// verified against the stream.
pub fn write_shard<I>(header: &ShardHeader, records: I, path: impl AsRef<Path>) -> Result<u64>
where
    I: IntoIterator<Item = ActivationRecord>,
{
    let mut writer = ShardWriter::create(&path, header.clone())?;
    let mut n = 0u64;
    for record in records {
        writer.push(&record)?;
        n += 1;
    }
    if n != header.n_tokens {
        return Err(Error::Shape(format!(
            "header declares {} records but {} were supplied",
            header.n_tokens, n
        )));
    }
    writer.finish()
}

/// Streaming shard reader; yields records in file order.
pub struct ShardReader {
    file: BufReader<File>,
    path: PathBuf,
    header: ShardHeader,
    next_index: u64,
}

impl ShardReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        let mut r = BufReader::new(file);
        let header = match ShardHeader::read_from(&mut r) {
            Ok(Ok(h)) => h,
            Ok(Err(msg)) => return Err(Error::Format(format!("{}: {msg}", path.display()))),
            Err(e) => return Err(Error::io(&path, e)),
        };
        header.validate()?;
        Ok(ShardReader {
            file: r,
            path,
            header,
            next_index: 0,
        })
    }

    pub fn header(&self) -> &ShardHeader {
        &self.header
    }

    /// Read the next record, or `None` after the declared count.
    pub fn next_record(&mut self) -> Result<Option<ActivationRecord>> {
        if self.next_index >= self.header.n_tokens {
            return Ok(None);
        }
        let offset = self.header.header_bytes() + self.next_index * self.header.record_bytes();
        let truncated = |_| Error::Corrupt {
            path: self.path.clone(),
            offset,
        };
        let r = &mut self.file;
        let sequence_id = r.read_u64::<LittleEndian>().map_err(truncated)?;
        let position = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let raw_token = r.read_u32::<LittleEndian>().map_err(truncated)?;
        let width = self.header.record_width();
        let mut data = vec![0f32; width];
        r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
        self.next_index += 1;
        Ok(Some(ActivationRecord {
            sequence_id,
            position,
            token_id: if raw_token == NO_TOKEN_ID { None } else { Some(raw_token) },
            data,
        }))
    }

    /// Iterate in batches of at most `batch_size` records.
    pub fn batches(self, batch_size: usize) -> ShardBatches {
        assert!(batch_size > 0, "batch_size must be positive");
        ShardBatches {
            reader: self,
            batch_size,
            done: false,
        }
    }

    /// Read every record into memory.
    pub fn read_all(mut self) -> Result<Vec<ActivationRecord>> {
        let mut out = Vec::with_capacity(self.header.n_tokens as usize);
        while let Some(rec) = self.next_record()? {
            out.push(rec);
        }
        Ok(out)
    }
}

pub struct ShardBatches {
    reader: ShardReader,
    batch_size: usize,
    done: bool,
}

impl Iterator for ShardBatches {
    type Item = Result<Vec<ActivationRecord>>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let mut batch = Vec::with_capacity(self.batch_size);
        while batch.len() < self.batch_size {
            match self.reader.next_record() {
                Ok(Some(rec)) => batch.push(rec),
                Ok(None) => {
                    self.done = true;
                    break;
                }
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            }
        }
        if batch.is_empty() {
            None
        } else {
            Some(Ok(batch))
        }
    }
}

/// Per-layer scalar normalization bringing the calibration-mean L2 norm of
/// every layer to sqrt(d).
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizationStats {
    pub layer_ids: Vec<u32>,
    pub per_layer_scale: Vec<f64>,
    pub target_norm: f64,
    pub sample_count: usize,
}

impl NormalizationStats {
    /// Unit scales (identity normalization) for the given layers.
    pub fn identity(layer_ids: Vec<u32>, d: u32) -> Self {
        let l = layer_ids.len();
        NormalizationStats {
            layer_ids,
            per_layer_scale: vec![1.0; l],
            target_norm: (d as f64).sqrt(),
            sample_count: 0,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = String::new();
        out.push_str(&format!("target_norm={:.17e}\n", self.target_norm));
        out.push_str(&format!("sample_count={}\n", self.sample_count));
        for (id, s) in self.layer_ids.iter().zip(&self.per_layer_scale) {
            out.push_str(&format!("scale.{id}={s:.17e}\n"));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut target_norm = None;
        let mut sample_count = None;
        let mut scales: Vec<(u32, f64)> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Format(format!("{}:{}: expected key=value", path.display(), lineno + 1))
            })?;
            let bad = |what: &str| {
                Error::Format(format!("{}:{}: bad {what}", path.display(), lineno + 1))
            };
            match key {
                "target_norm" => target_norm = Some(value.parse().map_err(|_| bad("target_norm"))?),
                "sample_count" => {
                    sample_count = Some(value.parse().map_err(|_| bad("sample_count"))?)
                }
                _ => {
                    let id = key
                        .strip_prefix("scale.")
                        .ok_or_else(|| bad("key"))?
                        .parse()
                        .map_err(|_| bad("layer id"))?;
                    scales.push((id, value.parse().map_err(|_| bad("scale"))?));
                }
            }
        }
        let target_norm = target_norm.ok_or_else(|| Error::Format("missing target_norm".into()))?;
        let sample_count =
            sample_count.ok_or_else(|| Error::Format("missing sample_count".into()))?;
        if scales.is_empty() {
            return Err(Error::Format("no scale entries".into()));
        }
        Ok(NormalizationStats {
            layer_ids: scales.iter().map(|(id, _)| *id).collect(),
            per_layer_scale: scales.iter().map(|(_, s)| *s).collect(),
            target_norm,
            sample_count,
        })
    }
}

/// Compute per-layer scales `s_i = sqrt(d) / mean(||x_i||)` over the first
/// `max_tokens` records of the given shards.
pub fn compute_norm_stats(
    shards: &[impl AsRef<Path>],
    max_tokens: usize,
) -> Result<NormalizationStats> {
    if shards.is_empty() {
        return Err(Error::Data("no shards supplied".into()));
    }
    if max_tokens == 0 {
        return Err(Error::Data("max_tokens must be at least 1".into()));
    }
    let mut reference: Option<(u32, Vec<u32>)> = None;
    let mut norm_sums: Vec<f64> = Vec::new();
    let mut seen = 0usize;
    'outer: for path in shards {
        let mut reader = ShardReader::open(path)?;
        let header = reader.header().clone();
        match &reference {
            None => {
                reference = Some((header.d, header.layer_ids.clone()));
                norm_sums = vec![0.0; header.num_layers()];
            }
            Some((d, ids)) => {
                if header.d != *d || header.layer_ids != *ids {
                    return Err(Error::Shape(format!(
                        "shard {} has (d={}, layers={:?}), expected (d={}, layers={:?})",
                        path.as_ref().display(),
                        header.d,
                        header.layer_ids,
                        d,
                        ids
                    )));
                }
            }
        }
        let d = header.d as usize;
        while let Some(rec) = reader.next_record()? {
            for (i, sum) in norm_sums.iter_mut().enumerate() {
                let norm: f64 = rec.layer(i, d).iter().map(|v| (*v as f64) * (*v as f64)).sum();
                *sum += norm.sqrt();
            }
            seen += 1;
            if seen >= max_tokens {
                break 'outer;
            }
        }
    }
    if seen == 0 {
        return Err(Error::Data("shards contain no records".into()));
    }
    let (d, layer_ids) = reference.expect("at least one shard was opened");
    let target_norm = (d as f64).sqrt();
    let mut per_layer_scale = Vec::with_capacity(norm_sums.len());
    for (i, sum) in norm_sums.iter().enumerate() {
        let mean = sum / seen as f64;
        if mean <= 0.0 {
            return Err(Error::Data(format!(
                "layer {} has zero mean activation norm over the calibration sample",
                layer_ids[i]
            )));
        }
        per_layer_scale.push(target_norm / mean);
    }
    Ok(NormalizationStats {
        layer_ids,
        per_layer_scale,
        target_norm,
        sample_count: seen,
    })
}

/// Scale each layer of `record` by its normalization factor. Metadata is
/// untouched.
pub fn apply_normalization(record: &mut ActivationRecord, stats: &NormalizationStats) -> Result<()> {
    let l = stats.per_layer_scale.len();
    if record.data.len() % l != 0 {
        return Err(Error::Shape(format!(
            "record width {} is not divisible by the {} normalized layers",
            record.data.len(),
            l
        )));
    }
    let d = record.data.len() / l;
    for (i, scale) in stats.per_layer_scale.iter().enumerate() {
        let s = *scale as f32;
        for v in &mut record.data[i * d..(i + 1) * d] {
            *v *= s;
        }
    }
    Ok(())
}
