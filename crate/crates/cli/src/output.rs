//! CSV, report and manifest writers.

use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};

/// Shortest decimal that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    if x == 0.0 {
        // Fold -0 into 0 so signs of exact zeros never differ between runs.
        return "0".into();
    }
    let s = format!("{x:?}");
    s.strip_suffix(".0").map(str::to_owned).unwrap_or(s)
}

/// `x` in percent: the decimal point of `num(x)` moved two places, so the
/// column shows the same digits as the fraction without rounding noise.
pub fn pct(x: f64) -> String {
    let s = num(x);
    if !x.is_finite() || x == 0.0 {
        return s;
    }
    let (mantissa, exp) = match s.split_once('e') {
        Some((m, e)) => (m.to_string(), e.parse::<i32>().expect("exponent") + 2),
        None => (s.clone(), 2),
    };
    let (sign, digits) = mantissa.strip_prefix('-').map_or(("", mantissa.as_str()), |d| ("-", d));
    let (int, frac) = digits.split_once('.').unwrap_or((digits, ""));
    // All significant digits and the position of the decimal point in them.
    let all = format!("{int}{frac}");
    let point = int.len() as i32 + exp;
    let trimmed = all.trim_start_matches('0');
    let point = point - (all.len() - trimmed.len()) as i32;
    let body = trimmed.trim_end_matches('0');
    if body.is_empty() {
        return "0".into();
    }
    let len = body.len() as i32;
    let out = if point <= 0 {
        if point < -20 {
            return format!("{sign}{}e{}", insert_point(body, 1), point - 1);
        }
        format!("0.{}{body}", "0".repeat((-point) as usize))
    } else if point >= len {
        if point > 21 {
            return format!("{sign}{}e{}", insert_point(body, 1), point - 1);
        }
        format!("{body}{}", "0".repeat((point - len) as usize))
    } else {
        insert_point(body, point as usize)
    };
    format!("{sign}{out}")
}

fn insert_point(digits: &str, at: usize) -> String {
    if at >= digits.len() {
        digits.to_string()
    } else {
        format!("{}.{}", &digits[..at], &digits[at..])
    }
}

/// Values joined with `;` for list-valued cells.
pub fn list(xs: &[f64]) -> String {
    xs.iter().map(|&x| num(x)).collect::<Vec<_>>().join(";")
}

/// Rows with a fixed header; written in one go.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(header: &[&'static str]) -> Self {
        Table { header: header.to_vec(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width must match header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> Result<Vec<u8>, csv::Error> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        w.write_record(&self.header)?;
        for r in &self.rows {
            w.write_record(r)?;
        }
        w.into_inner().map_err(|e| csv::Error::from(io::Error::other(e.to_string())))
    }

    pub fn write(&self, path: &Path) -> io::Result<()> {
        let bytes = self.to_csv().map_err(io::Error::other)?;
        fs::write(path, bytes)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// key=value lines in the given order.
pub fn manifest(entries: &[(&str, String)]) -> String {
    entries.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, 1.0 / 3.0, 1e-7, 123456.789, -2.5, 1e300, f64::MIN_POSITIVE] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(num(1.0), "1");
        assert_eq!(num(-0.0), "0");
        assert_eq!(num(0.25), "0.25");
        assert_eq!(pct(0.5), "50");
        assert_eq!(pct(0.232), "23.2");
        assert_eq!(pct(0.016), "1.6");
        assert_eq!(pct(-0.0025), "-0.25");
        assert_eq!(pct(1.0), "100");
        assert_eq!(pct(1e-7), "0.00001");
        assert_eq!(pct(12.5), "1250");
        assert_eq!(pct(1e-30), "1e-28");
        assert_eq!(pct(1e300), "1e302");
    }

    #[test]
    fn csv_layout() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec![num(1.5), "x,y".into()]);
        assert_eq!(String::from_utf8(t.to_csv().unwrap()).unwrap(), "a,b\n1.5,\"x,y\"\n");
    }
}
