//! On-disk sample store.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic        8 bytes   "GRSTORE\0"
//! version      u32
//! model        u8        0 = symmetric, 1 = conventional
//! dim          u32
//! dims         dim x u64
//! spacing      dim x f64
//! origin       dim x f64
//! n_subjects   u32
//! n_weights    u32       kernel weights per record (0 for symmetric)
//! seed         u64
//! config_hash  32 bytes  SHA-256 of the canonical run configuration
//! n_records    u64
//! records      n_records x (u64 payload length, payload)
//! ```
//!
//! A symmetric payload is `iteration: u64` followed by f64 values: the
//! template (V), every forward transform and then every reverse transform as
//! row-major homogeneous matrices ((d+1)² each), β (N), σ² (N), α and ρ.
//! A conventional payload is `iteration: u64`, the template on the lattice
//! (V), the kernel weights (P), the transforms and σ² (N).

use std::fs;
use std::path::Path;

use crate::baseline::BaselineSample;
use crate::error::{Error, Result};
use crate::map::Lattice;
use crate::sampler::Sample;
use crate::transforms::AffineTransform;

pub const MAGIC: &[u8; 8] = b"GRSTORE\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Symmetric,
    Conventional,
}

impl ModelKind {
    fn tag(self) -> u8 {
        match self {
            ModelKind::Symmetric => 0,
            ModelKind::Conventional => 1,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Symmetric => "symmetric",
            ModelKind::Conventional => "conventional",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" => Ok(ModelKind::Symmetric),
            "conventional" => Ok(ModelKind::Conventional),
            other => Err(Error::Validation(format!(
                "unknown model '{other}' (expected symmetric or conventional)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoreHeader {
    pub model: ModelKind,
    pub lattice: Lattice,
    pub n_subjects: usize,
    pub n_weights: usize,
    pub seed: u64,
    pub config_hash: [u8; 32],
}

#[derive(Clone, Debug, PartialEq)]
pub enum Records {
    Symmetric(Vec<Sample>),
    Conventional(Vec<BaselineSample>),
}

impl Records {
    pub fn len(&self) -> usize {
        match self {
            Records::Symmetric(s) => s.len(),
            Records::Conventional(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleStore {
    pub header: StoreHeader,
    pub records: Records,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        for x in v {
            self.0.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn transforms(&mut self, ts: &[AffineTransform]) {
        for t in ts {
            self.f64s(&t.row_major());
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Format {
            path: self.source.to_string(),
            msg: format!("{} (at byte {})", msg.into(), self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }

    fn transforms(&mut self, n: usize, dim: usize) -> Result<Vec<AffineTransform>> {
        (0..n)
            .map(|_| {
                let e = self.f64s((dim + 1) * (dim + 1))?;
                AffineTransform::from_row_major(dim, &e).map_err(|e| self.err(format!("bad transform: {e}")))
            })
            .collect()
    }
}

impl SampleStore {
    pub fn symmetric(lattice: Lattice, seed: u64, config_hash: [u8; 32], samples: Vec<Sample>) -> Self {
        let n_subjects = samples.first().map_or(0, |s| s.t.len());
        Self {
            header: StoreHeader {
                model: ModelKind::Symmetric,
                lattice,
                n_subjects,
                n_weights: 0,
                seed,
                config_hash,
            },
            records: Records::Symmetric(samples),
        }
    }

    pub fn conventional(lattice: Lattice, seed: u64, config_hash: [u8; 32], samples: Vec<BaselineSample>) -> Self {
        let n_subjects = samples.first().map_or(0, |s| s.t.len());
        let n_weights = samples.first().map_or(0, |s| s.w.len());
        Self {
            header: StoreHeader {
                model: ModelKind::Conventional,
                lattice,
                n_subjects,
                n_weights,
                seed,
                config_hash,
            },
            records: Records::Conventional(samples),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let h = &self.header;
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        w.u8(h.model.tag());
        w.u32(h.lattice.dim());
        for &n in h.lattice.dims() {
            w.u64(n as u64);
        }
        w.f64s(h.lattice.spacing());
        w.f64s(h.lattice.origin());
        w.u32(h.n_subjects);
        w.u32(h.n_weights);
        w.u64(h.seed);
        w.0.extend_from_slice(&h.config_hash);
        w.u64(self.records.len() as u64);
        let mut rec = Writer(Vec::new());
        let frame = |rec: &mut Writer, w: &mut Writer| {
            w.u64(rec.0.len() as u64);
            w.0.append(&mut rec.0);
        };
        match &self.records {
            Records::Symmetric(samples) => {
                for s in samples {
                    rec.u64(s.iteration);
                    rec.f64s(&s.x);
                    rec.transforms(&s.t);
                    rec.transforms(&s.t_r);
                    rec.f64s(&s.beta);
                    rec.f64s(&s.sigma2);
                    rec.f64s(&[s.alpha, s.rho]);
                    frame(&mut rec, &mut w);
                }
            }
            Records::Conventional(samples) => {
                for s in samples {
                    rec.u64(s.iteration);
                    rec.f64s(&s.x);
                    rec.f64s(&s.w);
                    rec.transforms(&s.t);
                    rec.f64s(&s.sigma2);
                    frame(&mut rec, &mut w);
                }
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8], source: &str) -> Result<Self> {
        let mut r = Reader { buf, pos: 0, source };
        if r.take(8)? != MAGIC {
            return Err(r.err("not a sample store"));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let model = match r.u8()? {
            0 => ModelKind::Symmetric,
            1 => ModelKind::Conventional,
            t => return Err(r.err(format!("unknown model tag {t}"))),
        };
        let dim = r.u32()?;
        if dim == 0 || dim > 2 {
            return Err(r.err(format!("unsupported dimension {dim}")));
        }
        let dims = (0..dim).map(|_| r.u64().map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
        let spacing = r.f64s(dim)?;
        let origin = r.f64s(dim)?;
        let lattice = Lattice::new(dims, spacing, origin).map_err(|e| r.err(format!("bad lattice: {e}")))?;
        let n = r.u32()?;
        let p = r.u32()?;
        let seed = r.u64()?;
        let config_hash: [u8; 32] = r.take(32)?.try_into().unwrap();
        let count = r.u64()? as usize;
        let v = lattice.len();
        let header = StoreHeader {
            model,
            lattice,
            n_subjects: n,
            n_weights: p,
            seed,
            config_hash,
        };
        let per_t = (dim + 1) * (dim + 1);
        let records = match model {
            ModelKind::Symmetric => {
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let len = r.u64()? as usize;
                    if len != 8 * (1 + v + 2 * n * per_t + 2 * n + 2) {
                        return Err(r.err(format!("record length {len} does not match the header")));
                    }
                    let iteration = r.u64()?;
                    let x = r.f64s(v)?;
                    let t = r.transforms(n, dim)?;
                    let t_r = r.transforms(n, dim)?;
                    let beta = r.f64s(n)?;
                    let sigma2 = r.f64s(n)?;
                    let alpha = r.f64()?;
                    let rho = r.f64()?;
                    out.push(Sample {
                        iteration,
                        x,
                        t,
                        t_r,
                        beta,
                        sigma2,
                        alpha,
                        rho,
                    });
                }
                Records::Symmetric(out)
            }
            ModelKind::Conventional => {
                let mut out = Vec::with_capacity(count);
                for _ in 0..count {
                    let len = r.u64()? as usize;
                    if len != 8 * (1 + v + p + n * per_t + n) {
                        return Err(r.err(format!("record length {len} does not match the header")));
                    }
                    let iteration = r.u64()?;
                    let x = r.f64s(v)?;
                    let w = r.f64s(p)?;
                    let t = r.transforms(n, dim)?;
                    let sigma2 = r.f64s(n)?;
                    out.push(BaselineSample {
                        iteration,
                        x,
                        w,
                        t,
                        sigma2,
                    });
                }
                Records::Conventional(out)
            }
        };
        if r.pos != buf.len() {
            return Err(r.err("trailing bytes after the last record"));
        }
        Ok(Self { header, records })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        Self::from_bytes(&buf, &path.display().to_string())
    }

    /// One row per record. Floats are written in shortest round-trip form.
    pub fn to_csv(&self) -> String {
        let h = &self.header;
        let v = h.lattice.len();
        let n = h.n_subjects;
        let per_t = (h.lattice.dim() + 1) * (h.lattice.dim() + 1);
        let mut cols = vec!["iteration".to_string()];
        cols.extend((0..v).map(|l| format!("x{l}")));
        let transform_cols = |cols: &mut Vec<String>, prefix: &str| {
            for i in 0..n {
                cols.extend((0..per_t).map(|k| format!("{prefix}{i}_{k}")));
            }
        };
        let mut out = String::new();
        let push_row = |out: &mut String, it: u64, vals: &mut dyn Iterator<Item = f64>| {
            out.push_str(&it.to_string());
            for x in vals {
                out.push(',');
                out.push_str(&format!("{x:?}"));
            }
            out.push('\n');
        };
        match &self.records {
            Records::Symmetric(samples) => {
                transform_cols(&mut cols, "t");
                transform_cols(&mut cols, "tr");
                cols.extend((0..n).map(|i| format!("beta{i}")));
                cols.extend((0..n).map(|i| format!("sigma2_{i}")));
                cols.push("alpha".into());
                cols.push("rho".into());
                out.push_str(&cols.join(","));
                out.push('\n');
                for s in samples {
                    let mut vals = s
                        .x
                        .iter()
                        .copied()
                        .chain(s.t.iter().flat_map(|t| t.row_major()))
                        .chain(s.t_r.iter().flat_map(|t| t.row_major()))
                        .chain(s.beta.iter().copied())
                        .chain(s.sigma2.iter().copied())
                        .chain([s.alpha, s.rho]);
                    push_row(&mut out, s.iteration, &mut vals);
                }
            }
            Records::Conventional(samples) => {
                cols.extend((0..h.n_weights).map(|p| format!("w{p}")));
                transform_cols(&mut cols, "t");
                cols.extend((0..n).map(|i| format!("sigma2_{i}")));
                out.push_str(&cols.join(","));
                out.push('\n');
                for s in samples {
                    let mut vals = s
                        .x
                        .iter()
                        .copied()
                        .chain(s.w.iter().copied())
                        .chain(s.t.iter().flat_map(|t| t.row_major()))
                        .chain(s.sigma2.iter().copied());
                    push_row(&mut out, s.iteration, &mut vals);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sym_sample(k: u64) -> Sample {
        Sample {
            iteration: k,
            x: vec![0.1 * k as f64, -1.5, 2.0],
            t: vec![AffineTransform::affine_1d(1.1, 0.2).unwrap(); 2],
            t_r: vec![AffineTransform::affine_1d(0.9, -0.2).unwrap(); 2],
            beta: vec![1.0, 0.7],
            sigma2: vec![0.3, 0.25],
            alpha: 0.4,
            rho: 1.0 / 3.0,
        }
    }

    #[test]
    fn symmetric_roundtrip() {
        let lat = Lattice::line(3, 0.5, -0.5).unwrap();
        let s = SampleStore::symmetric(lat, 42, [7; 32], vec![sym_sample(1), sym_sample(2)]);
        let back = SampleStore::from_bytes(&s.to_bytes(), "mem").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn conventional_roundtrip() {
        let lat = Lattice::grid(2, 2).unwrap();
        let rec = BaselineSample {
            iteration: 9,
            x: vec![1.0, 2.0, 3.0, 4.0],
            w: vec![0.5],
            t: vec![AffineTransform::rotation(0.1)],
            sigma2: vec![0.01],
        };
        let s = SampleStore::conventional(lat, 1, [0; 32], vec![rec]);
        let back = SampleStore::from_bytes(&s.to_bytes(), "mem").unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_stores_rejected() {
        let lat = Lattice::line(3, 0.5, -0.5).unwrap();
        let bytes = SampleStore::symmetric(lat, 42, [7; 32], vec![sym_sample(1)]).to_bytes();
        assert!(SampleStore::from_bytes(&bytes[..bytes.len() - 1], "mem").is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(SampleStore::from_bytes(&bad, "mem").is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(SampleStore::from_bytes(&extra, "mem").is_err());
    }

    #[test]
    fn csv_values_parse_back_exactly() {
        let lat = Lattice::line(3, 0.5, -0.5).unwrap();
        let s = SampleStore::symmetric(lat, 42, [7; 32], vec![sym_sample(3)]);
        let csv = s.to_csv();
        let mut lines = csv.lines();
        let header: Vec<&str> = lines.next().unwrap().split(',').collect();
        let row: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(header.len(), row.len());
        let rho_col = header.iter().position(|&c| c == "rho").unwrap();
        assert_eq!(row[rho_col].parse::<f64>().unwrap(), 1.0 / 3.0);
        assert_eq!(row[1].parse::<f64>().unwrap(), 0.1 * 3.0);
    }
}
