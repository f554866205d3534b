//! Text and binary serialization of reports, trajectories and traces.
//!
//! Floating-point values are always printed with 17 significant digits so
//! that every written number round-trips exactly.

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub fn fmt_f64(v: f64) -> String {
    if v == 0.0 {
        // normalize -0
        return "0.0000000000000000e0".to_string();
    }
    format!("{v:.16e}")
}

/// A single report entry.
#[derive(Clone, Debug, PartialEq)]
pub enum Field {
    F64(f64),
    Int(i64),
    Bool(bool),
    Str(String),
}

impl From<f64> for Field {
    fn from(v: f64) -> Self {
        Field::F64(v)
    }
}
impl From<bool> for Field {
    fn from(v: bool) -> Self {
        Field::Bool(v)
    }
}
impl From<usize> for Field {
    fn from(v: usize) -> Self {
        Field::Int(v as i64)
    }
}
impl From<&str> for Field {
    fn from(v: &str) -> Self {
        Field::Str(v.to_string())
    }
}
impl From<String> for Field {
    fn from(v: String) -> Self {
        Field::Str(v)
    }
}

impl std::fmt::Display for Field {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Field::F64(v) => f.write_str(&fmt_f64(*v)),
            Field::Int(v) => write!(f, "{v}"),
            Field::Bool(v) => write!(f, "{v}"),
            Field::Str(s) => f.write_str(s),
        }
    }
}

/// Flat reports serializable as `key=value` lines or as a CSV row.
pub trait Report {
    fn fields(&self) -> Vec<(&'static str, Field)>;

    fn to_kv(&self) -> String {
        self.fields().iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn csv_header(&self) -> String {
        self.fields().iter().map(|(k, _)| *k).collect::<Vec<_>>().join(",")
    }

    fn csv_row(&self) -> String {
        self.fields().iter().map(|(_, v)| v.to_string()).collect::<Vec<_>>().join(",")
    }
}

/// Parses `key=value` lines back into pairs (comments `#` ignored).
pub fn parse_kv(text: &str) -> Vec<(String, String)> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.trim().to_string(), v.trim().to_string())))
        .collect()
}

/// Minimal CSV table builder with fixed column order.
#[derive(Clone, Debug, Default)]
pub struct Csv {
    header: Vec<String>,
    rows: Vec<Vec<String>>,
}

impl Csv {
    pub fn new(header: &[&str]) -> Self {
        Self { header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn row(&mut self, cells: Vec<Field>) {
        debug_assert_eq!(cells.len(), self.header.len());
        self.rows.push(cells.iter().map(|c| c.to_string()).collect());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn render(&self) -> String {
        let mut s = self.header.join(",");
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.join(","));
            s.push('\n');
        }
        s
    }
}

/// Parses a numeric CSV (header plus rows of numbers).
pub fn read_numeric_csv(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines.next().ok_or_else(|| Error::Format("empty CSV".into()))?.split(',').map(|s| s.trim().to_string()).collect();
    let mut rows = Vec::new();
    for (i, l) in lines.enumerate() {
        let r: std::result::Result<Vec<f64>, _> = l.split(',').map(|c| c.trim().parse::<f64>()).collect();
        let r = r.map_err(|e| Error::Format(format!("row {}: {e}", i + 2)))?;
        if r.len() != header.len() {
            return Err(Error::Format(format!("row {} has {} cells, expected {}", i + 2, r.len(), header.len())));
        }
        rows.push(r);
    }
    Ok((header, rows))
}

pub const TRAJ_MAGIC: &[u8; 8] = b"OBSWAVE1";
pub const TRAJ_VERSION: u32 = 1;

/// Flat binary time series of nodal fields.
///
/// Layout (little endian): magic `OBSWAVE1`, `u32` version, `u32` dim,
/// `dim` x `u32` nodes per axis, `u64` number of steps `nt`, `f64` dt,
/// `u32` fields per level, then for each of the `nt + 1` levels the fields
/// one after another, each a row-major block of doubles.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarySeries {
    pub dim: usize,
    pub nx: Vec<usize>,
    pub nt: usize,
    pub dt: f64,
    pub fields_per_level: usize,
    /// `levels[k][f]` is field `f` at level `k`.
    pub levels: Vec<Vec<Vec<f64>>>,
}

impl BinarySeries {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TRAJ_MAGIC)?;
        w.write_all(&TRAJ_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        for &n in &self.nx {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        w.write_all(&(self.nt as u64).to_le_bytes())?;
        w.write_all(&self.dt.to_le_bytes())?;
        w.write_all(&(self.fields_per_level as u32).to_le_bytes())?;
        let npts: usize = self.nx.iter().product();
        for level in &self.levels {
            for f in level {
                if f.len() != npts {
                    return Err(Error::Format(format!("field has {} values, expected {npts}", f.len())));
                }
                for v in f {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        self.write_to(&mut buf)?;
        Ok(buf)
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != TRAJ_MAGIC {
            return Err(Error::Format("bad magic".into()));
        }
        let version = read_u32(r)?;
        if version != TRAJ_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let dim = read_u32(r)? as usize;
        if !(dim == 1 || dim == 2) {
            return Err(Error::Format(format!("bad dimension {dim}")));
        }
        let nx: Vec<usize> = (0..dim).map(|_| read_u32(r).map(|v| v as usize)).collect::<Result<_>>()?;
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let nt = u64::from_le_bytes(b8) as usize;
        r.read_exact(&mut b8)?;
        let dt = f64::from_le_bytes(b8);
        let fields_per_level = read_u32(r)? as usize;
        let npts: usize = nx.iter().product();
        let mut levels = Vec::with_capacity(nt + 1);
        for _ in 0..=nt {
            let mut level = Vec::with_capacity(fields_per_level);
            for _ in 0..fields_per_level {
                let mut f = vec![0.0; npts];
                for v in f.iter_mut() {
                    r.read_exact(&mut b8)?;
                    *v = f64::from_le_bytes(b8);
                }
                level.push(f);
            }
            levels.push(level);
        }
        Ok(Self { dim, nx, nt, dt, fields_per_level, levels })
    }

    pub fn matches_grid(&self, grid: &Grid) -> bool {
        self.dim == grid.dim && self.nx == grid.nx[..grid.dim].to_vec()
    }
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    struct R;
    impl Report for R {
        fn fields(&self) -> Vec<(&'static str, Field)> {
            vec![("a", 0.1.into()), ("ok", true.into()), ("n", 3usize.into())]
        }
    }

    #[test]
    fn kv_and_csv() {
        let r = R;
        assert_eq!(r.to_kv(), "a=1.0000000000000001e-1\nok=true\nn=3\n");
        assert_eq!(r.csv_header(), "a,ok,n");
        let kv = parse_kv(&r.to_kv());
        assert_eq!(kv[0].1.parse::<f64>().unwrap(), 0.1);
    }

    proptest! {
        #[test]
        fn floats_round_trip(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            prop_assert_eq!(fmt_f64(v).parse::<f64>().unwrap(), if v == 0.0 { 0.0 } else { v });
        }

        #[test]
        fn binary_round_trip(vals in proptest::collection::vec(-1e6f64..1e6, 12), dt in 1e-4f64..1.0) {
            let s = BinarySeries {
                dim: 1, nx: vec![3], nt: 1, dt, fields_per_level: 2,
                levels: vec![vec![vals[0..3].to_vec(), vals[3..6].to_vec()], vec![vals[6..9].to_vec(), vals[9..12].to_vec()]],
            };
            let bytes = s.to_bytes().unwrap();
            let back = BinarySeries::read_from(&mut bytes.as_slice()).unwrap();
            prop_assert_eq!(back, s);
        }
    }

    #[test]
    fn rejects_garbage() {
        assert!(BinarySeries::read_from(&mut &b"NOTMAGIC...."[..]).is_err());
    }
}
