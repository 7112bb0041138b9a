//! Turnstile stream files.
//!
//! Text form: a header line `n d`, then one `i j v` update per line. Lines
//! starting with `#` and blank lines are skipped.
//!
//! Binary form: magic `LPTU1`, `u32 n`, `u32 d`, then records of
//! `u32 i, u32 j, f64 v`, all little-endian.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const BINARY_MAGIC: &[u8; 5] = b"LPTU1";

/// One additive update `A[row, col] += value`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnstileUpdate {
    pub row: u64,
    pub col: usize,
    pub value: f64,
}

impl TurnstileUpdate {
    pub fn new(row: u64, col: usize, value: f64) -> Self {
        Self { row, col, value }
    }

    pub fn check(&self, header: &StreamHeader) -> Result<()> {
        if self.row >= header.n || self.col >= header.d {
            return Err(Error::IndexOutOfRange {
                row: self.row,
                col: self.col,
                n: header.n,
                d: header.d,
            });
        }
        if !self.value.is_finite() {
            return Err(Error::NonFinite("update value"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StreamHeader {
    pub n: u64,
    pub d: usize,
}

impl StreamHeader {
    pub fn new(n: u64, d: usize) -> Result<Self> {
        if n == 0 || d == 0 {
            return Err(Error::InvalidConfig(format!("stream dimensions {n} x {d} must be positive")));
        }
        Ok(Self { n, d })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StreamFormat {
    Text,
    Binary,
}

/// Validating reader over either stream format.
pub struct StreamReader<R> {
    header: StreamHeader,
    inner: R,
    format: StreamFormat,
    line: usize,
    buf: String,
}

impl<R: BufRead> StreamReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let peek = inner.fill_buf()?;
        if peek.starts_with(BINARY_MAGIC) {
            let mut head = [0u8; 13];
            inner.read_exact(&mut head)?;
            let n = u32::from_le_bytes(head[5..9].try_into().unwrap());
            let d = u32::from_le_bytes(head[9..13].try_into().unwrap());
            let header = StreamHeader::new(u64::from(n), d as usize)?;
            return Ok(Self {
                header,
                inner,
                format: StreamFormat::Binary,
                line: 0,
                buf: String::new(),
            });
        }
        let mut reader = Self {
            header: StreamHeader { n: 1, d: 1 },
            inner,
            format: StreamFormat::Text,
            line: 0,
            buf: String::new(),
        };
        let first = reader
            .next_content_line()?
            .ok_or(Error::Parse { line: 1, msg: "missing header line `n d`".into() })?;
        let mut it = first.split_whitespace();
        let line = reader.line;
        let n = parse_field::<u64>(it.next(), line, "n")?;
        let d = parse_field::<usize>(it.next(), line, "d")?;
        if it.next().is_some() {
            return Err(Error::Parse { line, msg: "header must be `n d`".into() });
        }
        reader.header = StreamHeader::new(n, d).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        Ok(reader)
    }

    pub fn header(&self) -> StreamHeader {
        self.header
    }

    pub fn format(&self) -> StreamFormat {
        self.format
    }

    fn next_content_line(&mut self) -> Result<Option<String>> {
        loop {
            self.buf.clear();
            if self.inner.read_line(&mut self.buf)? == 0 {
                return Ok(None);
            }
            self.line += 1;
            let t = self.buf.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Ok(Some(t.to_string()));
        }
    }

    fn next_text(&mut self) -> Result<Option<TurnstileUpdate>> {
        let Some(l) = self.next_content_line()? else {
            return Ok(None);
        };
        let line = self.line;
        let mut it = l.split_whitespace();
        let row = parse_field::<u64>(it.next(), line, "i")?;
        let col = parse_field::<usize>(it.next(), line, "j")?;
        let value = parse_field::<f64>(it.next(), line, "v")?;
        if it.next().is_some() {
            return Err(Error::Parse { line, msg: "expected exactly three fields `i j v`".into() });
        }
        let u = TurnstileUpdate { row, col, value };
        u.check(&self.header).map_err(|e| Error::Parse { line, msg: e.to_string() })?;
        Ok(Some(u))
    }

    fn next_binary(&mut self) -> Result<Option<TurnstileUpdate>> {
        let mut rec = [0u8; 16];
        let mut got = 0;
        while got < rec.len() {
            let k = self.inner.read(&mut rec[got..])?;
            if k == 0 {
                break;
            }
            got += k;
        }
        if got == 0 {
            return Ok(None);
        }
        self.line += 1;
        if got < rec.len() {
            return Err(Error::Parse { line: self.line, msg: "truncated binary record".into() });
        }
        let u = TurnstileUpdate {
            row: u64::from(u32::from_le_bytes(rec[0..4].try_into().unwrap())),
            col: u32::from_le_bytes(rec[4..8].try_into().unwrap()) as usize,
            value: f64::from_le_bytes(rec[8..16].try_into().unwrap()),
        };
        u.check(&self.header)
            .map_err(|e| Error::Parse { line: self.line, msg: e.to_string() })?;
        Ok(Some(u))
    }
}

impl<R: BufRead> Iterator for StreamReader<R> {
    type Item = Result<TurnstileUpdate>;

    fn next(&mut self) -> Option<Self::Item> {
        let r = match self.format {
            StreamFormat::Text => self.next_text(),
            StreamFormat::Binary => self.next_binary(),
        };
        r.transpose()
    }
}

fn parse_field<T: std::str::FromStr>(tok: Option<&str>, line: usize, name: &str) -> Result<T> {
    let tok = tok.ok_or_else(|| Error::Parse { line, msg: format!("missing field `{name}`") })?;
    tok.parse::<T>()
        .map_err(|_| Error::Parse { line, msg: format!("cannot parse `{tok}` as `{name}`") })
}

pub fn open_stream(path: &Path) -> Result<StreamReader<BufReader<File>>> {
    StreamReader::new(BufReader::new(File::open(path)?))
}

/// Reads a whole stream file into memory.
pub fn read_stream(path: &Path) -> Result<(StreamHeader, Vec<TurnstileUpdate>)> {
    let reader = open_stream(path)?;
    let header = reader.header();
    let updates = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, updates))
}

pub fn parse_stream_str(text: &str) -> Result<(StreamHeader, Vec<TurnstileUpdate>)> {
    let reader = StreamReader::new(text.as_bytes())?;
    let header = reader.header();
    let updates = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, updates))
}

pub fn write_text<W: Write>(mut w: W, header: &StreamHeader, updates: &[TurnstileUpdate]) -> Result<()> {
    writeln!(w, "{} {}", header.n, header.d)?;
    for u in updates {
        writeln!(w, "{} {} {}", u.row, u.col, u.value)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_binary<W: Write>(mut w: W, header: &StreamHeader, updates: &[TurnstileUpdate]) -> Result<()> {
    let n = u32::try_from(header.n).map_err(|_| Error::Format("binary streams need n < 2^32".into()))?;
    let d = u32::try_from(header.d).map_err(|_| Error::Format("binary streams need d < 2^32".into()))?;
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&n.to_le_bytes())?;
    w.write_all(&d.to_le_bytes())?;
    for u in updates {
        w.write_all(&(u.row as u32).to_le_bytes())?;
        w.write_all(&(u.col as u32).to_le_bytes())?;
        w.write_all(&u.value.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stream(path: &Path, header: &StreamHeader, updates: &[TurnstileUpdate], format: StreamFormat) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    match format {
        StreamFormat::Text => write_text(w, header, updates),
        StreamFormat::Binary => write_binary(w, header, updates),
    }
}

/// Dense accumulation of a stream.
pub fn replay_dense(header: &StreamHeader, updates: &[TurnstileUpdate]) -> DMatrix<f64> {
    let mut a = DMatrix::zeros(header.n as usize, header.d);
    for u in updates {
        a[(u.row as usize, u.col)] += u.value;
    }
    a
}

/// One update per nonzero entry, row-major.
pub fn matrix_to_updates(a: &DMatrix<f64>) -> Vec<TurnstileUpdate> {
    let mut out = Vec::new();
    for i in 0..a.nrows() {
        for j in 0..a.ncols() {
            let v = a[(i, j)];
            if v != 0.0 {
                out.push(TurnstileUpdate::new(i as u64, j, v));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_single_update() {
        let (h, u) = parse_stream_str("2 2\n0 0 1.5\n").unwrap();
        assert_eq!(h, StreamHeader { n: 2, d: 2 });
        assert_eq!(u, vec![TurnstileUpdate::new(0, 0, 1.5)]);
    }

    #[test]
    fn cancelling_updates() {
        let (h, u) = parse_stream_str("1 1\n0 0 1\n0 0 -1\n").unwrap();
        assert_eq!(u.len(), 2);
        assert_eq!(replay_dense(&h, &u)[(0, 0)], 0.0);
    }

    #[test]
    fn comments_are_skipped() {
        let (_, u) = parse_stream_str("# hi\n3 1\n\n# x\n2 0 4\n").unwrap();
        assert_eq!(u, vec![TurnstileUpdate::new(2, 0, 4.0)]);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_stream_str("2 2\n0 0 1\n0 x 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        let err = parse_stream_str("2 2\n0 2 1\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_stream_str("2 2\n0 0 NaN\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn text_binary_text_round_trip() {
        let h = StreamHeader { n: 10, d: 3 };
        let ups = vec![
            TurnstileUpdate::new(0, 0, 0.1),
            TurnstileUpdate::new(9, 2, -1e-300),
            TurnstileUpdate::new(4, 1, 1.0 / 3.0),
            TurnstileUpdate::new(4, 1, f64::MAX),
        ];
        let mut bin = Vec::new();
        write_binary(&mut bin, &h, &ups).unwrap();
        let r = StreamReader::new(&bin[..]).unwrap();
        assert_eq!(r.format(), StreamFormat::Binary);
        let back: Vec<_> = r.collect::<Result<_>>().unwrap();
        let mut txt = Vec::new();
        write_text(&mut txt, &h, &back).unwrap();
        let (h2, again) = parse_stream_str(std::str::from_utf8(&txt).unwrap()).unwrap();
        assert_eq!(h2, h);
        assert_eq!(again.len(), ups.len());
        for (a, b) in again.iter().zip(&ups) {
            assert_eq!(a.row, b.row);
            assert_eq!(a.col, b.col);
            assert_eq!(a.value.to_bits(), b.value.to_bits());
        }
    }
}
