//! Readers and writers for the `fvecs` / `bvecs` / `ivecs` corpus formats.
//!
//! Every record is `[i32 dim][dim elements]`, little-endian, with no file
//! header. `fvecs` elements are `f32`, `bvecs` elements are `u8` (widened to
//! `f32` on load) and `ivecs` elements are `i32`.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, ErrorKind, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{format_err, invalid, Result};

/// A dense row-major set of `count` vectors of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    data: Vec<f32>,
}

impl Dataset {
    pub fn new(dim: usize, data: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            if !data.is_empty() {
                return invalid("zero-dimensional dataset with data");
            }
        } else if data.len() % dim != 0 {
            return invalid(format!(
                "data length {} is not a multiple of dim {}",
                data.len(),
                dim
            ));
        }
        Ok(Self { dim, data })
    }

    /// An empty dataset. `dim` is 0 when unknown (e.g. read from an empty file).
    pub fn empty(dim: usize) -> Self {
        Self { dim, data: Vec::new() }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        if self.dim == 0 {
            0
        } else {
            self.data.len() / self.dim
        }
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.dim.max(1))
    }

    /// First `n` vectors (or all of them if there are fewer).
    pub fn truncated(&self, n: usize) -> Dataset {
        let n = n.min(self.count());
        Self {
            dim: self.dim,
            data: self.data[..n * self.dim].to_vec(),
        }
    }

    pub fn push(&mut self, v: &[f32]) -> Result<()> {
        if self.dim == 0 && self.data.is_empty() {
            self.dim = v.len();
        }
        if v.len() != self.dim {
            return invalid(format!("vector of dim {} pushed into dim {}", v.len(), self.dim));
        }
        self.data.extend_from_slice(v);
        Ok(())
    }
}

/// Nearest-neighbor ids per query, `depth` per row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundTruth {
    depth: usize,
    ids: Vec<u32>,
}

impl GroundTruth {
    pub fn new(depth: usize, ids: Vec<u32>) -> Result<Self> {
        if depth == 0 && !ids.is_empty() || depth != 0 && ids.len() % depth != 0 {
            return invalid(format!("{} ids do not split into rows of {}", ids.len(), depth));
        }
        Ok(Self { depth, ids })
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    pub fn count(&self) -> usize {
        if self.depth == 0 {
            0
        } else {
            self.ids.len() / self.depth
        }
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    pub fn row(&self, q: usize) -> &[u32] {
        &self.ids[q * self.depth..(q + 1) * self.depth]
    }

    pub fn truncated(&self, n: usize) -> GroundTruth {
        let n = n.min(self.count());
        Self {
            depth: self.depth,
            ids: self.ids[..n * self.depth].to_vec(),
        }
    }

    /// Checks every id against the base set size.
    pub fn validate(&self, base_count: usize) -> Result<()> {
        match self.ids.iter().find(|&&id| id as usize >= base_count) {
            Some(id) => invalid(format!("ground-truth id {} out of range [0, {})", id, base_count)),
            None => Ok(()),
        }
    }
}

/// Reads the `u32` dimension prefix of the next record. `Ok(None)` on a clean
/// end of file; a partial prefix is a format error.
fn read_prefix<R: Read>(r: &mut R) -> Result<Option<usize>> {
    let mut buf = [0u8; 4];
    let mut filled = 0;
    while filled < 4 {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == ErrorKind::Interrupted => continue,
            Err(e) => return Err(e.into()),
        }
    }
    match filled {
        0 => Ok(None),
        4 => {
            let d = i32::from_le_bytes(buf);
            if d <= 0 {
                return format_err(format!("non-positive record dimension {}", d));
            }
            Ok(Some(d as usize))
        }
        _ => format_err("truncated record header"),
    }
}

fn truncated(e: io::Error) -> crate::Error {
    if e.kind() == ErrorKind::UnexpectedEof {
        crate::Error::Format("truncated record body".into())
    } else {
        e.into()
    }
}

/// Walks `[dim][payload]` records, calling `body` to consume each payload.
fn read_records<R, F>(mut r: R, limit: Option<usize>, mut body: F) -> Result<usize>
where
    R: Read,
    F: FnMut(&mut R, usize) -> io::Result<()>,
{
    let limit = limit.unwrap_or(usize::MAX);
    let mut dim = None;
    let mut n = 0;
    while n < limit {
        let Some(d) = read_prefix(&mut r)? else { break };
        match dim {
            None => dim = Some(d),
            Some(prev) if prev != d => {
                return format_err(format!(
                    "record {} has dimension {}, expected {}",
                    n, d, prev
                ))
            }
            _ => {}
        }
        body(&mut r, d).map_err(truncated)?;
        n += 1;
    }
    Ok(dim.unwrap_or(0))
}

pub fn read_fvecs_from<R: Read>(r: R, limit: Option<usize>) -> Result<Dataset> {
    let mut data = Vec::new();
    let dim = read_records(r, limit, |r, d| {
        let start = data.len();
        data.resize(start + d, 0.0);
        r.read_f32_into::<LittleEndian>(&mut data[start..])
    })?;
    Dataset::new(dim, data)
}

pub fn read_bvecs_from<R: Read>(r: R, limit: Option<usize>) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut buf = Vec::new();
    let dim = read_records(r, limit, |r, d| {
        buf.resize(d, 0u8);
        r.read_exact(&mut buf)?;
        data.extend(buf.iter().map(|&b| b as f32));
        Ok(())
    })?;
    Dataset::new(dim, data)
}

pub fn read_ivecs_from<R: Read>(r: R, limit: Option<usize>) -> Result<GroundTruth> {
    let mut ids: Vec<u32> = Vec::new();
    let depth = read_records(r, limit, |r, d| {
        let start = ids.len();
        ids.resize(start + d, 0);
        r.read_u32_into::<LittleEndian>(&mut ids[start..])
    })?;
    GroundTruth::new(depth, ids)
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::with_capacity(1 << 20, File::open(path)?))
}

/// Reads the first `limit` vectors (all if `None`) of an `fvecs` file.
pub fn read_fvecs(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    read_fvecs_from(open(path.as_ref())?, limit)
}

/// Reads a `bvecs` file, widening each byte to `f32`.
pub fn read_bvecs(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    read_bvecs_from(open(path.as_ref())?, limit)
}

pub fn read_ivecs(path: impl AsRef<Path>) -> Result<GroundTruth> {
    read_ivecs_from(open(path.as_ref())?, None)
}

/// Dispatches on the file extension (`.fvecs` or `.bvecs`).
pub fn read_vectors(path: impl AsRef<Path>, limit: Option<usize>) -> Result<Dataset> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("bvecs") => read_bvecs(path, limit),
        Some("fvecs") => read_fvecs(path, limit),
        _ => invalid(format!("unknown vector file extension: {}", path.display())),
    }
}

pub fn write_fvecs_to<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    for row in ds.rows().take(ds.count()) {
        w.write_i32::<LittleEndian>(ds.dim() as i32)?;
        for &x in row {
            w.write_f32::<LittleEndian>(x)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_fvecs(path: impl AsRef<Path>, ds: &Dataset) -> Result<()> {
    write_fvecs_to(BufWriter::new(File::create(path)?), ds)
}

pub fn write_ivecs_to<W: Write>(mut w: W, gt: &GroundTruth) -> Result<()> {
    for q in 0..gt.count() {
        w.write_i32::<LittleEndian>(gt.depth() as i32)?;
        for &id in gt.row(q) {
            w.write_u32::<LittleEndian>(id)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_ivecs(path: impl AsRef<Path>, gt: &GroundTruth) -> Result<()> {
    write_ivecs_to(BufWriter::new(File::create(path)?), gt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::*;

    fn record_f32(dim: i32, xs: &[f32]) -> Vec<u8> {
        let mut out = dim.to_le_bytes().to_vec();
        for x in xs {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out
    }

    #[test]
    fn single_fvecs_record() {
        let bytes = record_f32(2, &[1.0, 2.0]);
        let ds = read_fvecs_from(&bytes[..], None).unwrap();
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.count(), 1);
        assert_eq!(ds.data(), &[1.0, 2.0]);
    }

    #[test]
    fn fvecs_rewrite_is_byte_identical() {
        let mut bytes = record_f32(3, &[1.5, -0.0, f32::MIN_POSITIVE]);
        bytes.extend(record_f32(3, &[f32::NAN, 7.0, 1e30]));
        let ds = read_fvecs_from(&bytes[..], None).unwrap();
        let mut out = Vec::new();
        write_fvecs_to(&mut out, &ds).unwrap();
        assert_eq!(out, bytes);
        assert_eq!(out.len(), ds.count() * (4 + 4 * ds.dim()));
    }

    #[test]
    fn bvecs_widening() {
        let bytes = [3i32.to_le_bytes().as_slice(), &[0u8, 127, 255]].concat();
        let ds = read_bvecs_from(&bytes[..], None).unwrap();
        assert_eq!(ds.data(), &[0.0, 127.0, 255.0]);
    }

    #[test]
    fn bvecs_empty_and_limit() {
        let ds = read_bvecs_from(&[][..], None).unwrap();
        assert_eq!(ds.count(), 0);

        let mut bytes = Vec::new();
        for i in 0..10u8 {
            bytes.extend_from_slice(&2i32.to_le_bytes());
            bytes.extend_from_slice(&[i, i]);
        }
        let ds = read_bvecs_from(&bytes[..], Some(5)).unwrap();
        assert_eq!(ds.count(), 5);
        assert_eq!(ds.row(4), &[4.0, 4.0]);
    }

    #[test]
    fn ivecs_records() {
        let bytes = [2i32, 7, 9]
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect::<Vec<_>>();
        let gt = read_ivecs_from(&bytes[..], None).unwrap();
        assert_eq!(gt.count(), 1);
        assert_eq!(gt.depth(), 2);
        assert_eq!(gt.ids(), &[7, 9]);

        let empty = read_ivecs_from(&[][..], None).unwrap();
        assert_eq!(empty.count(), 0);
    }

    #[test]
    fn inconsistent_dimension_is_rejected() {
        let mut bytes = record_f32(2, &[1.0, 2.0]);
        bytes.extend(record_f32(3, &[1.0, 2.0, 3.0]));
        assert!(matches!(read_fvecs_from(&bytes[..], None), Err(Error::Format(_))));

        let ivecs = [1i32, 5, 2, 1, 2]
            .iter()
            .flat_map(|x| x.to_le_bytes())
            .collect::<Vec<_>>();
        assert!(matches!(read_ivecs_from(&ivecs[..], None), Err(Error::Format(_))));
    }

    #[test]
    fn truncated_records_are_rejected() {
        let bytes = record_f32(2, &[1.0, 2.0]);
        for cut in [2, 6, bytes.len() - 1] {
            let r = read_fvecs_from(&bytes[..cut], None);
            assert!(matches!(r, Err(Error::Format(_))), "cut at {}", cut);
        }
    }

    #[test]
    fn ground_truth_range_check() {
        let gt = GroundTruth::new(2, vec![0, 3, 1, 2]).unwrap();
        assert!(gt.validate(4).is_ok());
        assert!(gt.validate(3).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.fvecs");
        let ds = Dataset::new(4, (0..40).map(|i| i as f32 * 0.25).collect()).unwrap();
        write_fvecs(&path, &ds).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), 10 * (4 + 16));
        assert_eq!(read_vectors(&path, None).unwrap(), ds);
        assert_eq!(read_fvecs(&path, Some(3)).unwrap(), ds.truncated(3));
    }

    /// The published siftsmall files, when `QADC_SIFTSMALL_DIR` points at them.
    #[test]
    fn siftsmall_headers() {
        let Ok(dir) = std::env::var("QADC_SIFTSMALL_DIR") else {
            eprintln!("QADC_SIFTSMALL_DIR not set; skipping");
            return;
        };
        let dir = std::path::Path::new(&dir);
        let base = read_fvecs(dir.join("siftsmall_base.fvecs"), None).unwrap();
        assert_eq!((base.dim(), base.count()), (128, 10_000));
        let gt = read_ivecs(dir.join("siftsmall_groundtruth.ivecs")).unwrap();
        assert_eq!(gt.depth(), 100);
        gt.validate(base.count()).unwrap();
    }

    proptest! {
        #[test]
        fn fvecs_round_trip_bit_exact(
            dim in 1usize..9,
            bits in proptest::collection::vec(any::<u32>(), 0..64),
        ) {
            let n = bits.len() / dim;
            let data: Vec<f32> = bits[..n * dim].iter().map(|&b| f32::from_bits(b)).collect();
            let ds = Dataset::new(dim, data).unwrap();
            let mut buf = Vec::new();
            write_fvecs_to(&mut buf, &ds).unwrap();
            prop_assert_eq!(buf.len(), n * (4 + 4 * dim));
            let back = read_fvecs_from(&buf[..], None).unwrap();
            prop_assert_eq!(back.count(), n);
            let same = back.data().iter().zip(ds.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
