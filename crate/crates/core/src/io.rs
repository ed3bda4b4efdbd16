//! On-disk formats: dataset and checkpoint containers, and IDX files.
//!
//! Both containers share one layout:
//! `magic[4] | version u32 | header_len u64 | JSON header | f64 body`,
//! every number little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::encoding::Encoding;
use crate::error::{Error, Result};
use crate::grid::{Grid1D, GridFunction};
use crate::model::{param_layout, ModelConfig, TransducerParams};
use crate::pde::{GenerationConfig, MetaDataset, OperatorDataset, Provenance};
use crate::random_fields::AdrCoefficients;
use crate::training::{AdamState, TrainConfig};

pub const DATASET_MAGIC: [u8; 4] = *b"TDXD";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"TDXC";
pub const FORMAT_VERSION: u32 = 1;
const PREAMBLE: usize = 16;

/// Writes through a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("{} is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    let mut f = fs::File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    drop(f);
    if let Err(e) = fs::rename(&tmp, path) {
        let _ = fs::remove_file(&tmp);
        return Err(e.into());
    }
    Ok(())
}

fn pack(magic: [u8; 4], header: &impl Serialize, body: &[f64]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * body.len());
    out.extend_from_slice(&magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for x in body {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

/// Magic, version and JSON header of a container; returns the header value
/// and the offset where the body starts.
fn unpack_header(bytes: &[u8], magic: Option<[u8; 4]>) -> Result<([u8; 4], serde_json::Value, usize)> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(
            bytes.len() as u64,
            format!("truncated preamble: need {PREAMBLE} bytes, file has {}", bytes.len()),
        ));
    }
    let found: [u8; 4] = bytes[..4].try_into().unwrap();
    let known = [DATASET_MAGIC, CHECKPOINT_MAGIC];
    match magic {
        Some(m) if found != m => {
            return Err(Error::format(
                0,
                format!("bad magic: expected {:?}, found {:?}", show(&m), show(&found)),
            ))
        }
        None if !known.contains(&found) => {
            return Err(Error::format(
                0,
                format!("bad magic: expected \"TDXD\" or \"TDXC\", found {:?}", show(&found)),
            ))
        }
        _ => {}
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::format(
            4,
            format!("unsupported format version {version} (this build reads {FORMAT_VERSION})"),
        ));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let end = (PREAMBLE as u64).checked_add(len).filter(|&e| e <= bytes.len() as u64);
    let end = end.ok_or_else(|| {
        Error::format(
            8,
            format!(
                "header length {len} runs past the end of the file ({} bytes)",
                bytes.len()
            ),
        )
    })? as usize;
    let header = serde_json::from_slice(&bytes[PREAMBLE..end])
        .map_err(|e| Error::format(PREAMBLE as u64, format!("header is not valid JSON: {e}")))?;
    Ok((found, header, end))
}

fn show(m: &[u8]) -> String {
    m.iter()
        .map(|&b| if b.is_ascii_graphic() { (b as char).to_string() } else { format!("\\x{b:02x}") })
        .collect()
}

fn body(bytes: &[u8], start: usize, expected: usize) -> Result<Vec<f64>> {
    let have = bytes.len() - start;
    if have != 8 * expected {
        return Err(Error::format(
            start as u64,
            format!("payload is {have} bytes, header implies {} ({expected} f64)", 8 * expected),
        ));
    }
    Ok(bytes[start..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Header of a TDXD file as JSON (for `inspect`).
pub fn read_header(bytes: &[u8]) -> Result<(String, serde_json::Value)> {
    let (magic, header, _) = unpack_header(bytes, None)?;
    Ok((show(&magic), header))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ProvenanceRecord {
    delta: Vec<f64>,
    nu: Vec<f64>,
    k_reaction: f64,
    t: f64,
    seed: u64,
    stream: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct DatasetRecord {
    resampled: usize,
    provenance: Option<ProvenanceRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub grid: usize,
    pub codomain_dim: usize,
    pub pairs_per_dataset: usize,
    pub dataset_count: usize,
    pub generation: Option<GenerationConfig>,
    datasets: Vec<DatasetRecord>,
}

/// Datasets read from a TDXD container.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetFile {
    pub header: DatasetHeader,
    pub datasets: Vec<OperatorDataset>,
}

impl DatasetFile {
    pub fn into_meta(self) -> Result<MetaDataset> {
        let config = match self.header.generation {
            Some(c) => c,
            None => GenerationConfig {
                n_datasets: self.header.dataset_count,
                pairs: self.header.pairs_per_dataset,
                grid: self.header.grid,
                ..GenerationConfig::desk(0)
            },
        };
        MetaDataset::new(self.datasets, config)
    }
}

pub fn encode_meta_dataset(meta: &MetaDataset) -> Result<Vec<u8>> {
    encode_datasets(&meta.datasets, Some(&meta.config))
}

/// Serializes operators that share grid, codomain and pair count.
pub fn encode_datasets(datasets: &[OperatorDataset], generation: Option<&GenerationConfig>) -> Result<Vec<u8>> {
    let first = datasets
        .first()
        .ok_or_else(|| Error::invalid("a dataset container needs at least one operator"))?;
    let pairs = first.len();
    let (v0, u0) = &first.pairs[0];
    let (grid, dim) = (v0.grid().len(), u0.dim());
    let mut records = Vec::with_capacity(datasets.len());
    let mut payload = Vec::with_capacity(datasets.len() * pairs * grid * (v0.dim() + dim));
    for ds in datasets {
        ds.validate()?;
        if ds.len() != pairs || !ds.pairs[0].0.same_shape(v0) || !ds.pairs[0].1.same_shape(u0) {
            return Err(Error::invalid("operators in one container must share pair count, grid and codomain"));
        }
        for (v, u) in &ds.pairs {
            payload.extend_from_slice(v.values());
            payload.extend_from_slice(u.values());
        }
        records.push(DatasetRecord {
            resampled: ds.resampled,
            provenance: ds.provenance.as_ref().map(|p| ProvenanceRecord {
                delta: p.coefficients.delta.values().to_vec(),
                nu: p.coefficients.nu.values().to_vec(),
                k_reaction: p.coefficients.k_reaction,
                t: p.t,
                seed: p.seed,
                stream: p.stream,
            }),
        });
    }
    if v0.dim() != 1 {
        return Err(Error::invalid("dataset inputs must be scalar functions"));
    }
    let header = DatasetHeader {
        grid,
        codomain_dim: dim,
        pairs_per_dataset: pairs,
        dataset_count: datasets.len(),
        generation: generation.cloned(),
        datasets: records,
    };
    pack(DATASET_MAGIC, &header, &payload)
}

pub fn decode_datasets(bytes: &[u8]) -> Result<DatasetFile> {
    let (_, json, start) = unpack_header(bytes, Some(DATASET_MAGIC))?;
    let header: DatasetHeader =
        serde_json::from_value(json).map_err(|e| Error::format(PREAMBLE as u64, format!("bad dataset header: {e}")))?;
    if header.datasets.len() != header.dataset_count {
        return Err(Error::format(
            PREAMBLE as u64,
            format!(
                "header lists {} dataset records for dataset_count {}",
                header.datasets.len(),
                header.dataset_count
            ),
        ));
    }
    let g = Grid1D::new(header.grid).map_err(|e| Error::format(PREAMBLE as u64, e.to_string()))?;
    let per_pair = header.grid * (1 + header.codomain_dim);
    let expected = header
        .dataset_count
        .checked_mul(header.pairs_per_dataset)
        .and_then(|x| x.checked_mul(per_pair))
        .ok_or_else(|| Error::format(PREAMBLE as u64, "header sizes overflow"))?;
    let data = body(bytes, start, expected)?;
    let mut chunks = data.chunks_exact(per_pair);
    let mut datasets = Vec::with_capacity(header.dataset_count);
    for rec in &header.datasets {
        let mut pairs = Vec::with_capacity(header.pairs_per_dataset);
        for _ in 0..header.pairs_per_dataset {
            let c = chunks.next().unwrap();
            let (v, u) = c.split_at(header.grid);
            pairs.push((
                GridFunction::scalar(g, v.to_vec())?,
                GridFunction::new(g, header.codomain_dim, u.to_vec())?,
            ));
        }
        let provenance = match &rec.provenance {
            Some(p) => Some(Provenance {
                coefficients: AdrCoefficients {
                    delta: GridFunction::scalar(g, p.delta.clone())?,
                    nu: GridFunction::scalar(g, p.nu.clone())?,
                    k_reaction: p.k_reaction,
                },
                t: p.t,
                seed: p.seed,
                stream: p.stream,
            }),
            None => None,
        };
        let mut ds = OperatorDataset::new(pairs)?;
        ds.provenance = provenance;
        ds.resampled = rec.resampled;
        datasets.push(ds);
    }
    Ok(DatasetFile { header, datasets })
}

pub fn save_meta_dataset(path: &Path, meta: &MetaDataset) -> Result<()> {
    write_atomic(path, &encode_meta_dataset(meta)?)
}

pub fn load_datasets(path: &Path) -> Result<DatasetFile> {
    decode_datasets(&fs::read(path)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset into the payload, in f64 elements.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingProvenance {
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub train_config: Option<TrainConfig>,
    pub meta_dataset: Option<GenerationConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    input: Encoding,
    output: Encoding,
    params: Vec<ParamEntry>,
    provenance: TrainingProvenance,
    /// Step count of the optimizer when its moments follow the parameters.
    adam_t: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub input: Encoding,
    pub output: Encoding,
    pub params: TransducerParams,
    pub provenance: TrainingProvenance,
    pub adam: Option<AdamState>,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.config.validate()?;
    ck.params.check(&ck.config)?;
    if ck.input.dim() != ck.config.in_dim || ck.output.dim() != ck.config.out_dim {
        return Err(Error::invalid("encodings do not match the model dimensions"));
    }
    let mut entries = Vec::new();
    let mut payload = Vec::with_capacity(ck.params.count() * if ck.adam.is_some() { 3 } else { 1 });
    for ((name, shape), t) in param_layout(&ck.config).into_iter().zip(ck.params.iter()) {
        entries.push(ParamEntry {
            name,
            shape,
            offset: payload.len(),
        });
        payload.extend_from_slice(t.data());
    }
    if let Some(adam) = &ck.adam {
        for t in adam.m.iter().chain(&adam.v) {
            payload.extend_from_slice(t.data());
        }
    }
    let header = CheckpointHeader {
        config: ck.config.clone(),
        input: ck.input,
        output: ck.output,
        params: entries,
        provenance: ck.provenance.clone(),
        adam_t: ck.adam.as_ref().map(|a| a.t),
    };
    pack(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, json, start) = unpack_header(bytes, Some(CHECKPOINT_MAGIC))?;
    let header: CheckpointHeader = serde_json::from_value(json)
        .map_err(|e| Error::format(PREAMBLE as u64, format!("bad checkpoint header: {e}")))?;
    header
        .config
        .validate()
        .map_err(|e| Error::format(PREAMBLE as u64, format!("checkpoint config: {e}")))?;
    let layout = param_layout(&header.config);
    if layout.len() != header.params.len() {
        return Err(Error::format(
            PREAMBLE as u64,
            format!(
                "config implies {} parameters, table lists {}",
                layout.len(),
                header.params.len()
            ),
        ));
    }
    let n: usize = layout.iter().map(|(_, s)| s.iter().product::<usize>()).sum();
    let expected = if header.adam_t.is_some() { 3 * n } else { n };
    let data = body(bytes, start, expected)?;
    let mut next = 0;
    let mut tensors = Vec::with_capacity(layout.len());
    for ((name, shape), e) in layout.iter().zip(&header.params) {
        if &e.name != name || &e.shape != shape || e.offset != next {
            return Err(Error::format(
                start as u64 + 8 * e.offset as u64,
                format!(
                    "parameter table entry {}{:?}@{} does not match expected {name}{shape:?}@{next}",
                    e.name, e.shape, e.offset
                ),
            ));
        }
        let len: usize = shape.iter().product();
        tensors.push(Tensor::new(shape.clone(), data[next..next + len].to_vec())?);
        next += len;
    }
    let params = {
        let mut it = tensors.into_iter();
        TransducerParams::from_slots(&header.config, || it.next())?
    };
    let adam = match header.adam_t {
        Some(t) => {
            let mut take = |shape: &[usize]| {
                let len: usize = shape.iter().product();
                let out = Tensor::new(shape.to_vec(), data[next..next + len].to_vec());
                next += len;
                out
            };
            let m = layout.iter().map(|(_, s)| take(s)).collect::<Result<Vec<_>>>()?;
            let v = layout.iter().map(|(_, s)| take(s)).collect::<Result<Vec<_>>>()?;
            Some(AdamState { m, v, t })
        }
        None => None,
    };
    Ok(Checkpoint {
        config: header.config,
        input: header.input,
        output: header.output,
        params,
        provenance: header.provenance,
        adam,
    })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&fs::read(path)?)
}

pub const IDX_IMAGES: u32 = 0x0000_0803;
pub const IDX_LABELS: u32 = 0x0000_0801;

/// Unsigned-byte IDX tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxFile {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxFile {
    pub fn new(dims: Vec<usize>, data: Vec<u8>) -> Result<Self> {
        if dims.is_empty() || dims.len() > 255 || dims.iter().product::<usize>() != data.len() {
            return Err(Error::invalid(format!(
                "IDX dims {dims:?} do not describe {} bytes",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn magic(&self) -> u32 {
        0x0800 | self.dims.len() as u32
    }

    /// Rows of the flattened trailing dimensions, e.g. `(60000, 784)`.
    pub fn flat_shape(&self) -> (usize, usize) {
        (self.dims[0], self.dims[1..].iter().product())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 4 * self.dims.len() + self.data.len());
        out.extend_from_slice(&self.magic().to_be_bytes());
        for &d in &self.dims {
            out.extend_from_slice(&(d as u32).to_be_bytes());
        }
        out.extend_from_slice(&self.data);
        out
    }

    /// Parses an IDX file, requiring `expected_magic` when given.
    pub fn from_bytes(bytes: &[u8], expected_magic: Option<u32>) -> Result<Self> {
        if bytes.len() < 4 {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated IDX magic: {} of 4 bytes", bytes.len()),
            ));
        }
        let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
        if let Some(m) = expected_magic {
            if magic != m {
                return Err(Error::format(0, format!("bad IDX magic: expected {m:#010x}, found {magic:#010x}")));
            }
        }
        if magic & 0xffff_ff00 != 0x0800 || magic & 0xff == 0 {
            return Err(Error::format(
                0,
                format!("bad IDX magic {magic:#010x}: only unsigned-byte tensors are supported"),
            ));
        }
        let rank = (magic & 0xff) as usize;
        let head = 4 + 4 * rank;
        if bytes.len() < head {
            return Err(Error::format(
                bytes.len() as u64,
                format!("truncated IDX header: need {head} bytes, file has {}", bytes.len()),
            ));
        }
        let dims: Vec<usize> = bytes[4..head]
            .chunks_exact(4)
            .map(|c| u32::from_be_bytes(c.try_into().unwrap()) as usize)
            .collect();
        let n: usize = dims.iter().product();
        if bytes.len() - head != n {
            return Err(Error::format(
                head as u64,
                format!("IDX payload is {} bytes, dims {dims:?} imply {n}", bytes.len() - head),
            ));
        }
        Ok(Self {
            dims,
            data: bytes[head..].to_vec(),
        })
    }

    pub fn read(path: &Path, expected_magic: Option<u32>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected_magic)
    }
}
