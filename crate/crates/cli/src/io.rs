//! Artifact formats.
//!
//! CSV: leading `# key=value` metadata lines, one header row, then data rows with `.`
//! decimals and `\n` endings. Floats use the shortest representation that parses
//! back to the same bits.
//!
//! Binary: `DNCE`, a little-endian `u32` format version, a four-byte kind tag, a
//! UTF-8 metadata block (length-prefixed `key=value` lines) and named sections. Each
//! section is a length-prefixed name, a `u32` rank, `u64` dimensions and the
//! little-endian `f64` payload in row-major order.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{CliError, CliResult};

pub const MAGIC: &[u8; 4] = b"DNCE";
pub const FORMAT_VERSION: u32 = 1;

/// Exact, locale-free float text.
pub fn fmt_f64(v: f64) -> String {
    if v != 0.0 && v.is_finite() && (v.abs() < 1e-4 || v.abs() >= 1e15) {
        format!("{v:e}")
    } else {
        format!("{v}")
    }
}

pub struct CsvWriter {
    path: PathBuf,
    inner: csv::Writer<BufWriter<File>>,
    width: usize,
}

impl CsvWriter {
    pub fn create(path: &Path, meta: &[(String, String)], header: &[&str]) -> CliResult<Self> {
        let file = File::create(path).map_err(|e| io_err(path, e))?;
        let mut buf = BufWriter::new(file);
        for (k, v) in meta {
            writeln!(buf, "# {k}={v}").map_err(|e| io_err(path, e))?;
        }
        let mut inner = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(buf);
        inner.write_record(header).map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            inner,
            width: header.len(),
        })
    }

    pub fn row(&mut self, fields: &[String]) -> CliResult<()> {
        debug_assert_eq!(fields.len(), self.width);
        self.inner.write_record(fields).map_err(|e| csv_err(&self.path, e))
    }

    pub fn flush(&mut self) -> CliResult<()> {
        self.inner.flush().map_err(|e| io_err(&self.path, e))
    }

    pub fn finish(mut self) -> CliResult<PathBuf> {
        self.flush()?;
        Ok(self.path)
    }
}

/// A parsed CSV artifact.
#[derive(Debug, Clone)]
pub struct CsvTable {
    pub path: PathBuf,
    pub meta: BTreeMap<String, String>,
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl CsvTable {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let mut meta = BTreeMap::new();
        let mut body_start = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else { break };
            body_start += line.len();
            if let Some((k, v)) = rest.trim().split_once('=') {
                meta.insert(k.trim().to_string(), v.trim().to_string());
            }
        }
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_reader(&text.as_bytes()[body_start..]);
        let header = reader
            .headers()
            .map_err(|e| csv_err(path, e))?
            .iter()
            .map(str::to_string)
            .collect();
        let rows = reader
            .records()
            .map(|r| r.map(|rec| rec.iter().map(str::to_string).collect()))
            .collect::<Result<Vec<Vec<String>>, _>>()
            .map_err(|e| csv_err(path, e))?;
        Ok(Self {
            path: path.to_path_buf(),
            meta,
            header,
            rows,
        })
    }

    pub fn column(&self, name: &str) -> CliResult<usize> {
        self.header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| CliError::format(&self.path, format!("missing column {name:?}")))
    }

    /// Fails unless the header starts with `expected`.
    pub fn expect_header(&self, expected: &[&str]) -> CliResult<()> {
        if self.header.len() < expected.len() || self.header.iter().zip(expected).any(|(h, e)| h != e) {
            return Err(CliError::format(
                &self.path,
                format!("header {:?} does not start with {:?}", self.header, expected),
            ));
        }
        Ok(())
    }

    pub fn meta(&self, key: &str) -> CliResult<&str> {
        self.meta
            .get(key)
            .map(String::as_str)
            .ok_or_else(|| CliError::format(&self.path, format!("missing metadata {key:?}")))
    }

    pub fn f64_at(&self, row: usize, col: usize) -> CliResult<f64> {
        let s = &self.rows[row][col];
        s.parse()
            .map_err(|_| CliError::format(&self.path, format!("row {}: {s:?} is not a number", row + 1)))
    }

    pub fn usize_at(&self, row: usize, col: usize) -> CliResult<usize> {
        let s = &self.rows[row][col];
        s.parse()
            .map_err(|_| CliError::format(&self.path, format!("row {}: {s:?} is not an index", row + 1)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

/// In-memory form of a binary artifact.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryFile {
    pub kind: [u8; 4],
    pub meta: BTreeMap<String, String>,
    pub sections: Vec<Section>,
}

impl BinaryFile {
    pub fn new(kind: &[u8; 4]) -> Self {
        Self {
            kind: *kind,
            meta: BTreeMap::new(),
            sections: Vec::new(),
        }
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn push(&mut self, name: &str, dims: &[usize], data: Vec<f64>) {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len(), "section {name}");
        self.sections.push(Section {
            name: name.to_string(),
            dims: dims.to_vec(),
            data,
        });
    }

    pub fn write(&self, path: &Path) -> CliResult<()> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&self.kind);
        let meta: String = self.meta.iter().map(|(k, v)| format!("{k}={v}\n")).collect();
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
            out.extend_from_slice(s.name.as_bytes());
            out.extend_from_slice(&(s.dims.len() as u32).to_le_bytes());
            for &d in &s.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in &s.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        std::fs::write(path, out).map_err(|e| io_err(path, e))
    }

    pub fn read(path: &Path, kind: &[u8; 4]) -> CliResult<Self> {
        let mut bytes = Vec::new();
        File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| io_err(path, e))?;
        let mut cur = Cursor {
            bytes: &bytes,
            pos: 0,
            path,
        };
        if cur.take(4)? != MAGIC {
            return Err(CliError::format(path, "missing DNCE magic"));
        }
        let version = cur.u32()?;
        if version != FORMAT_VERSION {
            return Err(CliError::format(path, format!("unsupported format version {version}")));
        }
        let found: [u8; 4] = cur.take(4)?.try_into().unwrap();
        if &found != kind {
            return Err(CliError::format(
                path,
                format!(
                    "expected kind {:?}, found {:?}",
                    String::from_utf8_lossy(kind),
                    String::from_utf8_lossy(&found)
                ),
            ));
        }
        let meta_len = cur.u32()? as usize;
        let meta_text =
            std::str::from_utf8(cur.take(meta_len)?).map_err(|_| CliError::format(path, "metadata is not UTF-8"))?;
        let meta = meta_text
            .lines()
            .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
            .collect();
        let n_sections = cur.u32()? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name_len = cur.u32()? as usize;
            let name = String::from_utf8(cur.take(name_len)?.to_vec())
                .map_err(|_| CliError::format(path, "section name is not UTF-8"))?;
            let rank = cur.u32()? as usize;
            let dims = (0..rank)
                .map(|_| cur.u64().map(|d| d as usize))
                .collect::<CliResult<Vec<_>>>()?;
            let len: usize = dims.iter().product();
            let raw = cur.take(
                len.checked_mul(8)
                    .ok_or_else(|| CliError::format(path, "section too large"))?,
            )?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            sections.push(Section { name, dims, data });
        }
        if cur.pos != bytes.len() {
            return Err(CliError::format(path, "trailing bytes after last section"));
        }
        Ok(Self {
            kind: found,
            meta,
            sections,
        })
    }

    pub fn section(&self, name: &str) -> CliResult<&Section> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CliError::Format {
                path: String::from_utf8_lossy(&self.kind).into_owned(),
                message: format!("missing section {name:?}"),
            })
    }

    pub fn meta(&self, key: &str) -> CliResult<&str> {
        self.meta.get(key).map(String::as_str).ok_or_else(|| CliError::Format {
            path: String::from_utf8_lossy(&self.kind).into_owned(),
            message: format!("missing metadata {key:?}"),
        })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> CliResult<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(CliError::format(self.path, "truncated file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> CliResult<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> CliResult<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

fn csv_err(path: &Path, e: csv::Error) -> CliError {
    match e.kind() {
        csv::ErrorKind::Io(_) => io_err(path, e),
        _ => CliError::format(path, e.to_string()),
    }
}
