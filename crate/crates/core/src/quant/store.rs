//! On-disk weight store and its memory-mapped reader.
//!
//! Layout (little-endian): `"MEBP"`, `u32` version, `u32` tensor count, then
//! one header per tensor (`u16` name length + UTF-8 name, `u8` rank, `u32`
//! dims, `u32` group size, `u64` codes offset, `u64` scales offset), then the
//! payload sections. A group size of 0 marks an unquantized `f32` tensor whose
//! values live in the scales section and whose codes section is empty; it is
//! used to persist trained adapters next to the frozen weights.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::{Duration, Instant};

use memmap2::Mmap;

use super::{dequantize_into, packed_len, quantize, scale_count, QuantizedTensor};
use crate::error::{Error, Result};
use crate::tensor::{Category, Tensor};

pub const MAGIC: [u8; 4] = *b"MEBP";
pub const FORMAT_VERSION: u32 = 1;

/// A tensor to be written: quantized, or raw `f32`.
#[derive(Clone, Debug)]
pub enum StoreTensor {
    Quantized(QuantizedTensor),
    Raw { name: String, tensor: Tensor<f32> },
}

impl StoreTensor {
    fn name(&self) -> &str {
        match self {
            StoreTensor::Quantized(q) => &q.name,
            StoreTensor::Raw { name, .. } => name,
        }
    }

    fn shape(&self) -> &[usize] {
        match self {
            StoreTensor::Quantized(q) => &q.shape,
            StoreTensor::Raw { tensor, .. } => tensor.shape(),
        }
    }

    fn group_size(&self) -> u32 {
        match self {
            StoreTensor::Quantized(q) => q.group_size,
            StoreTensor::Raw { .. } => 0,
        }
    }

    fn codes(&self) -> &[u8] {
        match self {
            StoreTensor::Quantized(q) => &q.codes,
            StoreTensor::Raw { .. } => &[],
        }
    }

    fn scale_values(&self) -> &[f32] {
        match self {
            StoreTensor::Quantized(q) => &q.scales,
            StoreTensor::Raw { tensor, .. } => tensor.data(),
        }
    }
}

/// Manifest row for one stored tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub group_size: u32,
    pub codes_offset: u64,
    pub scales_offset: u64,
}

impl StoreEntry {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_raw(&self) -> bool {
        self.group_size == 0
    }

    pub fn codes_len(&self) -> usize {
        if self.is_raw() {
            0
        } else {
            packed_len(self.len())
        }
    }

    pub fn scales_len(&self) -> usize {
        if self.is_raw() {
            4 * self.len()
        } else {
            4 * scale_count(&self.shape, self.group_size)
        }
    }

    /// Bytes of the decompressed `f32` tensor.
    pub fn decompressed_bytes(&self) -> u64 {
        4 * self.len() as u64
    }
}

fn header_len(tensors: &[StoreTensor]) -> usize {
    12 + tensors
        .iter()
        .map(|t| 2 + t.name().len() + 1 + 4 * t.shape().len() + 4 + 8 + 8)
        .sum::<usize>()
}

/// Write tensors in the given order. Names must be unique.
pub fn write_entries(tensors: &[StoreTensor], path: &Path) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for t in tensors {
        if !seen.insert(t.name()) {
            return Err(Error::Config(format!(
                "duplicate tensor name `{}`",
                t.name()
            )));
        }
        if t.name().len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Config(format!(
                "tensor `{}` header too large",
                t.name()
            )));
        }
    }
    let mut offset = header_len(tensors) as u64;
    let mut offsets = Vec::with_capacity(tensors.len());
    for t in tensors {
        let codes = offset;
        offset += t.codes().len() as u64;
        let scales = offset;
        offset += 4 * t.scale_values().len() as u64;
        offsets.push((codes, scales));
    }

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (t, (codes, scales)) in tensors.iter().zip(&offsets) {
        w.write_all(&(t.name().len() as u16).to_le_bytes())?;
        w.write_all(t.name().as_bytes())?;
        w.write_all(&[t.shape().len() as u8])?;
        for &d in t.shape() {
            let d = u32::try_from(d)
                .map_err(|_| Error::Config(format!("dimension {d} of `{}` too large", t.name())))?;
            w.write_all(&d.to_le_bytes())?;
        }
        w.write_all(&t.group_size().to_le_bytes())?;
        w.write_all(&codes.to_le_bytes())?;
        w.write_all(&scales.to_le_bytes())?;
    }
    for t in tensors {
        w.write_all(t.codes())?;
        for s in t.scale_values() {
            w.write_all(&s.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Quantize every tensor with `group_size` and write them in name order.
pub fn write_store(
    tensors: &BTreeMap<String, Tensor<f32>>,
    group_size: u32,
    path: &Path,
) -> Result<()> {
    let entries = tensors
        .iter()
        .map(|(name, t)| quantize(name, t, group_size).map(StoreTensor::Quantized))
        .collect::<Result<Vec<_>>>()?;
    write_entries(&entries, path)
}

pub fn write_quantized_store(tensors: &[QuantizedTensor], path: &Path) -> Result<()> {
    let entries: Vec<_> = tensors
        .iter()
        .cloned()
        .map(StoreTensor::Quantized)
        .collect();
    write_entries(&entries, path)
}

/// Freshly decompressed tensors for one block, tagged as frozen weights.
#[derive(Debug)]
pub struct BlockWeights {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub decompress_time: Duration,
}

impl BlockWeights {
    pub fn bytes(&self) -> u64 {
        self.tensors.values().map(Tensor::bytes).sum()
    }
}

/// Read-only, memory-mapped view of a store file. Opening parses only the
/// header; payload pages are touched when a tensor is loaded.
#[derive(Debug)]
pub struct QuantizedWeightStore {
    path: PathBuf,
    entries: BTreeMap<String, StoreEntry>,
    order: Vec<String>,
    map: Mmap,
    decompress_nanos: AtomicU64,
    decompress_calls: AtomicU64,
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, tensor: Option<&str>) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Truncated {
                tensor: tensor.map(str::to_owned),
                detail: format!("header ends at byte {}", self.buf.len()),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, t: Option<&str>) -> Result<u8> {
        Ok(self.take(1, t)?[0])
    }

    fn u16(&mut self, t: Option<&str>) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, t)?.try_into().unwrap()))
    }

    fn u32(&mut self, t: Option<&str>) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, t)?.try_into().unwrap()))
    }

    fn u64(&mut self, t: Option<&str>) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, t)?.try_into().unwrap()))
    }
}

impl QuantizedWeightStore {
    pub fn open(path: &Path) -> Result<Self> {
        let file = File::open(path)?;
        // SAFETY: the map is read-only and the store never hands out
        // references that outlive it; concurrent external truncation of the
        // file is outside the supported use.
        let map = unsafe { Mmap::map(&file)? };
        let mut cur = Cursor { buf: &map, pos: 0 };
        let magic: [u8; 4] = cur.take(4, None)?.try_into().unwrap();
        if magic != MAGIC {
            return Err(Error::BadMagic {
                expected: MAGIC,
                found: magic,
            });
        }
        let version = cur.u32(None)?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let count = cur.u32(None)? as usize;
        let mut entries = BTreeMap::new();
        let mut order = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = cur.u16(None)? as usize;
            let name = std::str::from_utf8(cur.take(name_len, None)?)
                .map_err(|_| Error::Config("tensor name is not UTF-8".into()))?
                .to_owned();
            let t = Some(name.as_str());
            let rank = cur.u8(t)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(cur.u32(t)? as usize);
            }
            let entry = StoreEntry {
                group_size: cur.u32(t)?,
                codes_offset: cur.u64(t)?,
                scales_offset: cur.u64(t)?,
                shape,
                name: name.clone(),
            };
            order.push(name.clone());
            if entries.insert(name.clone(), entry).is_some() {
                return Err(Error::Config(format!("duplicate tensor name `{name}`")));
            }
        }
        let file_len = map.len() as u64;
        for name in &order {
            let e = &entries[name];
            let codes_end = e.codes_offset + e.codes_len() as u64;
            let scales_end = e.scales_offset + e.scales_len() as u64;
            if codes_end > file_len || scales_end > file_len {
                return Err(Error::Truncated {
                    tensor: Some(name.clone()),
                    detail: format!(
                        "payload needs {} bytes, file has {file_len}",
                        codes_end.max(scales_end)
                    ),
                });
            }
        }
        Ok(QuantizedWeightStore {
            path: path.to_owned(),
            entries,
            order,
            map,
            decompress_nanos: AtomicU64::new(0),
            decompress_calls: AtomicU64::new(0),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn file_len(&self) -> u64 {
        self.map.len() as u64
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> Result<&StoreEntry> {
        self.entries
            .get(name)
            .ok_or_else(|| Error::UnknownTensor(name.to_owned()))
    }

    /// Manifest rows in file order.
    pub fn entries(&self) -> impl Iterator<Item = &StoreEntry> {
        self.order.iter().map(|n| &self.entries[n])
    }

    fn section(&self, offset: u64, len: usize) -> &[u8] {
        &self.map[offset as usize..offset as usize + len]
    }

    /// The stored form of a quantized tensor, copied out of the map.
    pub fn quantized(&self, name: &str) -> Result<QuantizedTensor> {
        let e = self.entry(name)?;
        if e.is_raw() {
            return Err(Error::Config(format!(
                "tensor `{name}` is stored unquantized"
            )));
        }
        Ok(QuantizedTensor {
            name: name.to_owned(),
            shape: e.shape.clone(),
            group_size: e.group_size,
            codes: self.section(e.codes_offset, e.codes_len()).to_vec(),
            scales: self
                .section(e.scales_offset, e.scales_len())
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        })
    }

    fn decode(&self, e: &StoreEntry) -> Result<Tensor<f32>> {
        let mut out = vec![0.0f32; e.len()];
        let scales = self.section(e.scales_offset, e.scales_len());
        if e.is_raw() {
            for (o, b) in out.iter_mut().zip(scales.chunks_exact(4)) {
                *o = f32::from_le_bytes(b.try_into().unwrap());
            }
        } else {
            let codes = self.section(e.codes_offset, e.codes_len());
            dequantize_into(&e.name, &e.shape, e.group_size, codes, scales, &mut out)?;
        }
        Ok(Tensor::from_vec(&e.shape, out)?.with_category(Category::FrozenWeight))
    }

    /// Decompress one tensor; time is added to the store's running total.
    pub fn load_tensor(&self, name: &str) -> Result<Tensor<f32>> {
        let e = self.entry(name)?;
        let start = Instant::now();
        let t = self.decode(e);
        self.record(start.elapsed());
        t
    }

    /// Decompress exactly the named tensors. Nothing is cached.
    pub fn load_tensors<S: AsRef<str>>(&self, names: &[S]) -> Result<BlockWeights> {
        let start = Instant::now();
        let mut tensors = BTreeMap::new();
        for n in names {
            let e = self.entry(n.as_ref())?;
            tensors.insert(e.name.clone(), self.decode(e)?);
        }
        let decompress_time = start.elapsed();
        self.record(decompress_time);
        Ok(BlockWeights {
            tensors,
            decompress_time,
        })
    }

    /// Decompress the frozen tensors of block `block_id` (1-based).
    pub fn load_block_weights(
        &self,
        graph: &crate::graph::BlockGraph,
        block_id: usize,
    ) -> Result<BlockWeights> {
        self.load_tensors(&graph.block(block_id)?.frozen)
    }

    fn record(&self, d: Duration) {
        self.decompress_nanos
            .fetch_add(d.as_nanos() as u64, Ordering::Relaxed);
        self.decompress_calls.fetch_add(1, Ordering::Relaxed);
    }

    /// Total decompression time since open or the last reset.
    pub fn decompress_time(&self) -> Duration {
        Duration::from_nanos(self.decompress_nanos.load(Ordering::Relaxed))
    }

    pub fn decompress_calls(&self) -> u64 {
        self.decompress_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decompress_time(&self) {
        self.decompress_nanos.store(0, Ordering::Relaxed);
        self.decompress_calls.store(0, Ordering::Relaxed);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::dequantize;
    use crate::tensor::{tracker, Rng};

    fn rand_t(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut rng = Rng::new(seed, 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn sample() -> BTreeMap<String, Tensor<f32>> {
        let mut m = BTreeMap::new();
        m.insert("a".to_owned(), rand_t(&[8, 12], 1));
        m.insert("b.gain".to_owned(), rand_t(&[12], 2));
        m.insert("c".to_owned(), rand_t(&[3, 5], 3));
        m
    }

    #[test]
    fn roundtrip_manifest_and_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.mebp");
        let tensors = sample();
        write_store(&tensors, 4, &path).unwrap();
        let store = QuantizedWeightStore::open(&path).unwrap();
        assert_eq!(store.len(), 3);
        for (name, t) in &tensors {
            let e = store.entry(name).unwrap();
            assert_eq!(e.shape, t.shape());
            assert_eq!(e.group_size, 4);
            let expected = dequantize(&quantize(name, t, 4).unwrap()).unwrap();
            let got = store.load_tensor(name).unwrap();
            assert!(got.bitwise_eq(&expected));
            assert_eq!(got.category(), Category::FrozenWeight);
            assert_eq!(
                store.quantized(name).unwrap(),
                quantize(name, t, 4).unwrap()
            );
        }
    }

    #[test]
    fn empty_store() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.mebp");
        write_store(&BTreeMap::new(), 32, &path).unwrap();
        let store = QuantizedWeightStore::open(&path).unwrap();
        assert!(store.is_empty());
        assert_eq!(store.file_len(), 12);
    }

    #[test]
    fn byte_identical_across_writes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("1"), dir.path().join("2"));
        write_store(&sample(), 4, &p1).unwrap();
        write_store(&sample(), 4, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn header_bytes_are_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w");
        let q = quantize(
            "w",
            &Tensor::from_vec(&[4], vec![0.7, -0.3, 0.0, 0.1]).unwrap(),
            4,
        )
        .unwrap();
        write_quantized_store(&[q], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = 12 + 2 + 1 + 1 + 4 + 4 + 8 + 8;
        let mut expected = Vec::new();
        expected.extend_from_slice(b"MEBP");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(b'w');
        expected.push(1);
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(&4u32.to_le_bytes());
        expected.extend_from_slice(&(header as u64).to_le_bytes());
        expected.extend_from_slice(&(header as u64 + 2).to_le_bytes());
        // codes 7, -3, 0, 1: low nibble first
        expected.extend_from_slice(&[0xd7, 0x10]);
        expected.extend_from_slice(&(0.7f32 / 7.0).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    #[test]
    fn format_errors_are_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w");
        write_store(&sample(), 4, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad = good.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            QuantizedWeightStore::open(&path),
            Err(Error::BadMagic { .. })
        ));

        let mut bad = good.clone();
        bad[4] = 2;
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(
            QuantizedWeightStore::open(&path),
            Err(Error::VersionMismatch { found: 2, .. })
        ));

        std::fs::write(&path, &good[..good.len() - 3]).unwrap();
        match QuantizedWeightStore::open(&path) {
            Err(Error::Truncated {
                tensor: Some(t), ..
            }) => assert_eq!(t, "c"),
            other => panic!("expected truncation naming `c`, got {other:?}"),
        }

        std::fs::write(&path, &good[..20]).unwrap();
        assert!(matches!(
            QuantizedWeightStore::open(&path),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn raw_tensors_roundtrip_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("raw");
        let t = rand_t(&[3, 7], 9);
        write_entries(
            &[StoreTensor::Raw {
                name: "lora.a".into(),
                tensor: t.clone(),
            }],
            &path,
        )
        .unwrap();
        let store = QuantizedWeightStore::open(&path).unwrap();
        assert!(store.entry("lora.a").unwrap().is_raw());
        assert!(store.load_tensor("lora.a").unwrap().bitwise_eq(&t));
    }

    #[test]
    fn duplicate_names_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let q = quantize("x", &rand_t(&[4], 1), 4).unwrap();
        assert!(write_quantized_store(&[q.clone(), q], &dir.path().join("d")).is_err());
    }

    #[test]
    fn loads_are_stateless_and_uncached() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w");
        let mut m = BTreeMap::new();
        m.insert("w".to_owned(), rand_t(&[64, 64], 5));
        write_store(&m, 32, &path).unwrap();
        let store = QuantizedWeightStore::open(&path).unwrap();
        let before = tracker::live_bytes();
        let a = store.load_tensors(&["w"]).unwrap();
        assert_eq!(a.bytes(), 16384);
        let b = store.load_tensors(&["w"]).unwrap();
        assert!(a.tensors["w"].bitwise_eq(&b.tensors["w"]));
        drop((a, b));
        assert_eq!(tracker::live_bytes(), before);
        assert_eq!(store.decompress_calls(), 2);
        assert!(matches!(
            store.load_tensors(&["nope"]),
            Err(Error::UnknownTensor(_))
        ));
    }
}
