//! Host column store and its file formats.
//!
//! Binary layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "PIMCOL01"
//! name     u32 length + UTF-8 bytes
//! columns  u32
//! per column: u32 name length, name bytes, u8 lane, u64 rows
//! payload  per column in order: rows × i64
//! ```

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};

const MAGIC: &[u8; 8] = b"PIMCOL01";

/// Value lane of a column. Every lane is held in 64 bits on the host and on
/// the DPUs; the lane records how to read the integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lane {
    Int32,
    Int64,
    /// Fixed point with two decimal digits: 12.34 is stored as 1234.
    Decimal,
    /// Days since 1970-01-01.
    Date,
}

impl Lane {
    fn code(self) -> u8 {
        match self {
            Lane::Int32 => 0,
            Lane::Int64 => 1,
            Lane::Decimal => 2,
            Lane::Date => 3,
        }
    }

    fn from_code(c: u8) -> Result<Self> {
        Ok(match c {
            0 => Lane::Int32,
            1 => Lane::Int64,
            2 => Lane::Decimal,
            3 => Lane::Date,
            _ => return Err(SimError::Format(format!("unknown lane code {c}"))),
        })
    }

    /// Text form used in CSV output.
    pub fn render(self, v: i64) -> String {
        match self {
            Lane::Int32 | Lane::Int64 => v.to_string(),
            Lane::Decimal => {
                let sign = if v < 0 { "-" } else { "" };
                format!("{sign}{}.{:02}", v.unsigned_abs() / 100, v.unsigned_abs() % 100)
            }
            Lane::Date => {
                let epoch = chrono::NaiveDate::from_ymd_opt(1970, 1, 1).expect("valid epoch");
                match epoch.checked_add_signed(chrono::Duration::days(v)) {
                    Some(d) => d.format("%Y-%m-%d").to_string(),
                    None => v.to_string(),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub lane: Lane,
    pub data: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnTable {
    pub name: String,
    pub columns: Vec<Column>,
}

impl ColumnTable {
    pub fn new(name: &str) -> Self {
        ColumnTable { name: name.to_string(), columns: Vec::new() }
    }

    /// Appends a column. Fails if its length differs from the others.
    pub fn push(&mut self, name: &str, lane: Lane, data: Vec<i64>) -> Result<()> {
        if let Some(c) = self.columns.first() {
            if c.data.len() != data.len() {
                return Err(SimError::InvalidSize(format!(
                    "column {name} has {} rows, table {} has {}",
                    data.len(),
                    self.name,
                    c.data.len()
                )));
            }
        }
        self.columns.push(Column { name: name.to_string(), lane, data });
        Ok(())
    }

    pub fn with(mut self, name: &str, lane: Lane, data: Vec<i64>) -> Result<Self> {
        self.push(name, lane, data)?;
        Ok(self)
    }

    pub fn row_count(&self) -> usize {
        self.columns.first().map_or(0, |c| c.data.len())
    }

    pub fn col(&self, name: &str) -> Result<&[i64]> {
        self.columns
            .iter()
            .find(|c| c.name == name)
            .map(|c| c.data.as_slice())
            .ok_or_else(|| SimError::Config(format!("table {} has no column {name}", self.name)))
    }

    /// The named columns, cloned, in the given order.
    pub fn cols(&self, names: &[&str]) -> Result<Vec<Vec<i64>>> {
        names.iter().map(|n| self.col(n).map(<[i64]>::to_vec)).collect()
    }

    pub fn row(&self, i: usize) -> Vec<i64> {
        self.columns.iter().map(|c| c.data[i]).collect()
    }

    pub fn rows(&self) -> Vec<Vec<i64>> {
        (0..self.row_count()).map(|i| self.row(i)).collect()
    }

    /// Builds a table from rows; `schema` gives each column's name and lane.
    pub fn from_rows(name: &str, schema: &[(&str, Lane)], rows: &[Vec<i64>]) -> Result<Self> {
        let mut t = ColumnTable::new(name);
        for (c, &(n, lane)) in schema.iter().enumerate() {
            t.push(n, lane, rows.iter().map(|r| r[c]).collect())?;
        }
        Ok(t)
    }

    pub fn write_binary(&self, mut w: impl Write) -> Result<()> {
        let io = |e: std::io::Error| SimError::Io(e.to_string());
        let mut buf = Vec::new();
        buf.extend_from_slice(MAGIC);
        put_str(&mut buf, &self.name);
        buf.extend_from_slice(&(self.columns.len() as u32).to_le_bytes());
        for c in &self.columns {
            put_str(&mut buf, &c.name);
            buf.push(c.lane.code());
            buf.extend_from_slice(&(c.data.len() as u64).to_le_bytes());
        }
        for c in &self.columns {
            for v in &c.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.write_all(&buf).map_err(io)
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| SimError::Io(e.to_string()))?;
        let mut cur = Cursor { b: &bytes, at: 0 };
        if cur.take(8)? != MAGIC {
            return Err(SimError::Format("bad magic".into()));
        }
        let name = cur.string()?;
        let n = cur.u32()? as usize;
        let mut heads = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            let cname = cur.string()?;
            let lane = Lane::from_code(cur.take(1)?[0])?;
            let rows = cur.u64()? as usize;
            heads.push((cname, lane, rows));
        }
        let mut t = ColumnTable::new(&name);
        for (cname, lane, rows) in heads {
            let raw = cur.take(rows.checked_mul(8).ok_or_else(|| SimError::Format("row count overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            t.push(&cname, lane, data)?;
        }
        if cur.at != bytes.len() {
            return Err(SimError::Format(format!("{} trailing bytes", bytes.len() - cur.at)));
        }
        Ok(t)
    }

    /// CSV with a header row; decimals and dates rendered as text.
    pub fn write_csv(&self, w: impl Write) -> Result<()> {
        let err = |e: csv::Error| SimError::Io(e.to_string());
        let mut out = csv::Writer::from_writer(w);
        out.write_record(self.columns.iter().map(|c| c.name.as_str())).map_err(err)?;
        for i in 0..self.row_count() {
            out.write_record(self.columns.iter().map(|c| c.lane.render(c.data[i]))).map_err(err)?;
        }
        out.flush().map_err(|e| SimError::Io(e.to_string()))
    }
}

fn put_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
    buf.extend_from_slice(s.as_bytes());
}

struct Cursor<'a> {
    b: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.b.len() - self.at < n {
            return Err(SimError::Format(format!("truncated at byte {}", self.at)));
        }
        self.at += n;
        Ok(&self.b[self.at - n..self.at])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| SimError::Format(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ColumnTable {
        ColumnTable::new("t")
            .with("id", Lane::Int32, vec![1, 2, 3])
            .unwrap()
            .with("price", Lane::Decimal, vec![1234, -5, 0])
            .unwrap()
            .with("day", Lane::Date, vec![0, 9131, 10_000])
            .unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let t = sample();
        let mut buf = Vec::new();
        t.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], MAGIC);
        assert_eq!(ColumnTable::read_binary(&buf[..]).unwrap(), t);
        assert!(ColumnTable::read_binary(&buf[..buf.len() - 1]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(ColumnTable::read_binary(&bad[..]).is_err());
    }

    #[test]
    fn csv_renders_lanes() {
        let mut buf = Vec::new();
        sample().write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().next(), Some("id,price,day"));
        assert_eq!(text.lines().nth(1), Some("1,12.34,1970-01-01"));
        assert_eq!(text.lines().nth(2), Some("2,-0.05,1995-01-01"));
    }

    #[test]
    fn unequal_columns_rejected() {
        assert!(ColumnTable::new("t").with("a", Lane::Int64, vec![1]).unwrap().with("b", Lane::Int64, vec![]).is_err());
    }
}
