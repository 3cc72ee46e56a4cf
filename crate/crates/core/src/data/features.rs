//! Binary feature tables.
//!
//! Layout (little-endian): magic `CMFT1`, kind byte, `N` and `F` as u64,
//! `N` ids each prefixed by a u32 byte length, then `N x F` f32 values
//! row-major.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::ndmath::Matrix;

const MAGIC: &[u8; 5] = b"CMFT1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum EntityKind {
    Music,
    Visual,
    Textual,
}

impl EntityKind {
    fn to_byte(self) -> u8 {
        match self {
            EntityKind::Music => 0,
            EntityKind::Visual => 1,
            EntityKind::Textual => 2,
        }
    }

    fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(EntityKind::Music),
            1 => Some(EntityKind::Visual),
            2 => Some(EntityKind::Textual),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EntityKind::Music => "music",
            EntityKind::Visual => "visual",
            EntityKind::Textual => "textual",
        }
    }
}

/// Per-entity feature vectors keyed by id.
///
/// Values are held as `f64` but always lie on the `f32` grid, so what is in
/// memory is exactly what a save/load cycle reproduces.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    kind: EntityKind,
    ids: Vec<String>,
    matrix: Matrix,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(kind: EntityKind, ids: Vec<String>, matrix: Matrix) -> Result<Self> {
        if ids.len() != matrix.rows() {
            return Err(Error::dim("FeatureTable::new", format!("{} ids", ids.len()), format!("{} rows", matrix.rows())));
        }
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate {} id {id:?}", kind.name())));
            }
        }
        let mut matrix = matrix;
        let cols = matrix.cols().max(1);
        for (i, v) in matrix.data_mut().iter_mut().enumerate() {
            let rounded = *v as f32;
            if !rounded.is_finite() {
                return Err(Error::Data(format!(
                    "non-finite {} feature in row {} ({})",
                    kind.name(),
                    i / cols,
                    ids[i / cols]
                )));
            }
            *v = rounded as f64;
        }
        Ok(FeatureTable { kind, ids, matrix, index })
    }

    pub fn kind(&self) -> EntityKind {
        self.kind
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn row_of(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.matrix.row(i))
    }

    /// Row index for `id`, or a data error naming the id.
    pub fn require(&self, id: &str) -> Result<usize> {
        self.index_of(id)
            .ok_or_else(|| Error::Data(format!("{} id {id:?} not found in feature table", self.kind.name())))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(22 + self.matrix.len() * 4 + self.ids.len() * 12);
        out.extend_from_slice(MAGIC);
        out.push(self.kind.to_byte());
        out.extend_from_slice(&(self.matrix.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(self.matrix.cols() as u64).to_le_bytes());
        for id in &self.ids {
            out.extend_from_slice(&(id.len() as u32).to_le_bytes());
            out.extend_from_slice(id.as_bytes());
        }
        for v in self.matrix.data() {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0, path };
        if cur.take(MAGIC.len())? != MAGIC {
            return Err(Error::BadMagic {
                path: path.to_path_buf(),
                expected: "CMFT1".into(),
            });
        }
        let kind_byte = cur.take(1)?[0];
        let kind = EntityKind::from_byte(kind_byte)
            .ok_or_else(|| Error::Data(format!("{}: unknown entity kind byte {kind_byte}", path.display())))?;
        let n = cur.u64()? as usize;
        let f = cur.u64()? as usize;
        let mut ids = Vec::with_capacity(n.min(1 << 24));
        for _ in 0..n {
            let len = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
            let raw = cur.take(len)?;
            let id = std::str::from_utf8(raw)
                .map_err(|_| Error::Data(format!("{}: id {} is not UTF-8", path.display(), ids.len())))?;
            ids.push(id.to_owned());
        }
        let body = n
            .checked_mul(f)
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| Error::Data(format!("{}: header size {n}x{f} overflows", path.display())))?;
        let raw = cur.take(body)?;
        if cur.pos != bytes.len() {
            return Err(Error::Data(format!(
                "{}: {} trailing bytes after feature matrix",
                path.display(),
                bytes.len() - cur.pos
            )));
        }
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        FeatureTable::new(kind, ids, Matrix::new(n, f, data)?)
            .map_err(|e| match e {
                Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
                other => other,
            })
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated {
                path: self.path.to_path_buf(),
                expected: (self.pos as u64).saturating_add(n as u64),
                actual: self.bytes.len() as u64,
            }),
        }
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
