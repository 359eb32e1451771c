//! Binary dataset archive.
//!
//! Layout (little-endian throughout):
//!
//! ```text
//! "SGLD" | version: u16 | p: u32 | n: u32 | family: u8 | seed: u64
//! record*: sigma_hat upper triangle incl. diagonal, p(p+1)/2 × f64
//!          y_binary bitset, ceil(N_e / 8) bytes, LSB first
//!          y_soft, N_e × f64
//! ```
//!
//! Records run to end of file; a trailing partial record is an error.

use std::io::{self, Read, Write};

use thiserror::Error;

use crate::graph_sim::{GraphFamily, TrainingExample};
use crate::linalg::SymmetricMatrix;

pub const MAGIC: &[u8; 4] = b"SGLD";
pub const VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("example has p = {got}, archive header says {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ArchiveHeader {
    pub p: usize,
    pub n: usize,
    pub family: GraphFamily,
    pub seed: u64,
}

pub struct ArchiveWriter<W: Write> {
    inner: W,
    p: usize,
}

impl<W: Write> ArchiveWriter<W> {
    pub fn new(mut inner: W, header: &ArchiveHeader) -> Result<Self, ArchiveError> {
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&(header.p as u32).to_le_bytes())?;
        inner.write_all(&(header.n as u32).to_le_bytes())?;
        inner.write_all(&[header.family.tag()])?;
        inner.write_all(&header.seed.to_le_bytes())?;
        Ok(Self { inner, p: header.p })
    }

    pub fn write(&mut self, ex: &TrainingExample) -> Result<(), ArchiveError> {
        if ex.p() != self.p {
            return Err(ArchiveError::DimensionMismatch { expected: self.p, got: ex.p() });
        }
        for v in ex.sigma_hat.packed_upper() {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        let mut bits = vec![0u8; ex.y_binary.len().div_ceil(8)];
        for (k, &b) in ex.y_binary.iter().enumerate() {
            if b {
                bits[k / 8] |= 1 << (k % 8);
            }
        }
        self.inner.write_all(&bits)?;
        for v in &ex.y_soft {
            self.inner.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn finish(mut self) -> Result<W, ArchiveError> {
        self.inner.flush()?;
        Ok(self.inner)
    }
}

fn read_exact_or_eof<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<bool> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(k) => filled += k,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
            Err(e) => return Err(e),
        }
    }
    if filled == 0 {
        Ok(false)
    } else if filled < buf.len() {
        Err(io::Error::new(io::ErrorKind::UnexpectedEof, "partial record"))
    } else {
        Ok(true)
    }
}

pub fn read_header<R: Read>(r: &mut R) -> Result<ArchiveHeader, ArchiveError> {
    let mut buf = [0u8; 4 + 2 + 4 + 4 + 1 + 8];
    r.read_exact(&mut buf).map_err(|_| ArchiveError::Corrupt("truncated header".into()))?;
    if &buf[0..4] != MAGIC {
        return Err(ArchiveError::Corrupt("bad magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != VERSION {
        return Err(ArchiveError::Corrupt(format!("unsupported version {version}")));
    }
    let p = u32::from_le_bytes(buf[6..10].try_into().expect("4 bytes")) as usize;
    let n = u32::from_le_bytes(buf[10..14].try_into().expect("4 bytes")) as usize;
    let family = GraphFamily::from_tag(buf[14]).ok_or_else(|| ArchiveError::Corrupt(format!("family tag {}", buf[14])))?;
    let seed = u64::from_le_bytes(buf[15..23].try_into().expect("8 bytes"));
    if p < 2 {
        return Err(ArchiveError::Corrupt(format!("p = {p}")));
    }
    Ok(ArchiveHeader { p, n, family, seed })
}

/// Reads a full archive.
pub fn read_archive<R: Read>(mut r: R) -> Result<(ArchiveHeader, Vec<TrainingExample>), ArchiveError> {
    let header = read_header(&mut r)?;
    let p = header.p;
    let ne = p * (p - 1) / 2;
    let packed = p * (p + 1) / 2;
    let rec_len = packed * 8 + ne.div_ceil(8) + ne * 8;
    let mut buf = vec![0u8; rec_len];
    let mut out = Vec::new();
    loop {
        match read_exact_or_eof(&mut r, &mut buf) {
            Ok(false) => break,
            Ok(true) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => {
                return Err(ArchiveError::Corrupt(format!("truncated record {}", out.len())))
            }
            Err(e) => return Err(e.into()),
        }
        let f64_at = |off: usize| f64::from_le_bytes(buf[off..off + 8].try_into().expect("8 bytes"));
        let sigma: Vec<f64> = (0..packed).map(|k| f64_at(8 * k)).collect();
        let bits = &buf[packed * 8..packed * 8 + ne.div_ceil(8)];
        let y_binary = (0..ne).map(|k| bits[k / 8] >> (k % 8) & 1 == 1).collect();
        let soft_off = packed * 8 + ne.div_ceil(8);
        let y_soft = (0..ne).map(|k| f64_at(soft_off + 8 * k)).collect();
        let sigma_hat =
            SymmetricMatrix::from_packed_upper(p, &sigma).map_err(|e| ArchiveError::Corrupt(e.to_string()))?;
        out.push(TrainingExample { sigma_hat, y_binary, y_soft });
    }
    Ok((header, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph_sim::{DatasetStream, GeneratorConfig};

    fn sample() -> (ArchiveHeader, Vec<TrainingExample>) {
        let cfg = GeneratorConfig::uniform_sparse(9, 12, 0.8, 3);
        let ex = DatasetStream::new(cfg.clone()).unwrap().take_examples(7).unwrap();
        (ArchiveHeader { p: 9, n: 12, family: cfg.family, seed: 3 }, ex)
    }

    fn encode(h: &ArchiveHeader, ex: &[TrainingExample]) -> Vec<u8> {
        let mut w = ArchiveWriter::new(Vec::new(), h).unwrap();
        for e in ex {
            w.write(e).unwrap();
        }
        w.finish().unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let (h, ex) = sample();
        let bytes = encode(&h, &ex);
        let (h2, ex2) = read_archive(&bytes[..]).unwrap();
        assert_eq!(h, h2);
        assert_eq!(ex, ex2);
        assert_eq!(encode(&h2, &ex2), bytes);
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let (h, ex) = sample();
        let bytes = encode(&h, &ex);
        assert!(matches!(read_archive(&bytes[..bytes.len() - 3]), Err(ArchiveError::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(read_archive(&bad[..]), Err(ArchiveError::Corrupt(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(read_archive(&bad[..]), Err(ArchiveError::Corrupt(m)) if m.contains("version")));

        let mut w = ArchiveWriter::new(Vec::new(), &ArchiveHeader { p: 4, ..h }).unwrap();
        assert!(matches!(w.write(&ex[0]), Err(ArchiveError::DimensionMismatch { .. })));
    }
}
