//! Matrix files: CSV (optional single header row) and the `zdp-binary`
//! layout `"ZDP1" | rows: u64 LE | cols: u64 LE | rows*cols f64 LE, row-major`.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;

use crate::error::{Result, ZdpError};

pub const MAGIC: &[u8; 4] = b"ZDP1";
const HEADER_LEN: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MatrixFormat {
    Csv,
    ZdpBinary,
}

impl MatrixFormat {
    /// `.zdp` and `.bin` are binary, `.csv` is CSV; anything else is sniffed
    /// from the magic bytes when reading and written as CSV.
    pub fn from_path(path: &Path) -> Option<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("zdp") | Some("bin") => Some(Self::ZdpBinary),
            Some("csv") => Some(Self::Csv),
            _ => None,
        }
    }
}

pub fn read_matrix(path: &Path) -> Result<DMatrix<f64>> {
    let bytes = fs::read(path).map_err(|e| ZdpError::Format(format!("{}: {e}", path.display())))?;
    let format = MatrixFormat::from_path(path).unwrap_or(if bytes.starts_with(MAGIC) {
        MatrixFormat::ZdpBinary
    } else {
        MatrixFormat::Csv
    });
    let parsed = match format {
        MatrixFormat::ZdpBinary => decode_binary(&bytes),
        MatrixFormat::Csv => decode_csv(&bytes),
    };
    parsed.map_err(|e| match e {
        ZdpError::Format(msg) => ZdpError::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_matrix(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let bytes = match MatrixFormat::from_path(path).unwrap_or(MatrixFormat::Csv) {
        MatrixFormat::ZdpBinary => encode_binary(m),
        MatrixFormat::Csv => encode_csv(m)?,
    };
    fs::write(path, bytes)?;
    Ok(())
}

pub fn encode_binary(m: &DMatrix<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * m.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(m.nrows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.ncols() as u64).to_le_bytes());
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.extend_from_slice(&m[(i, j)].to_le_bytes());
        }
    }
    out
}

fn read_u64(bytes: &[u8], offset: usize, what: &str) -> Result<u64> {
    let slice = bytes.get(offset..offset + 8).ok_or_else(|| {
        ZdpError::Format(format!(
            "truncated header at byte {offset}: need 8 bytes for {what}, file has {} bytes",
            bytes.len()
        ))
    })?;
    Ok(u64::from_le_bytes(slice.try_into().expect("8 bytes")))
}

pub fn decode_binary(bytes: &[u8]) -> Result<DMatrix<f64>> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(ZdpError::Format(
            "bad magic at byte 0: expected \"ZDP1\"".into(),
        ));
    }
    let rows = read_u64(bytes, 4, "row count")?;
    let cols = read_u64(bytes, 12, "column count")?;
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(8))
        .ok_or_else(|| ZdpError::Format(format!("dimensions {rows}x{cols} at byte 4 overflow")))?;
    let payload = (bytes.len() - HEADER_LEN) as u64;
    if payload != expected {
        return Err(ZdpError::Format(format!(
            "payload starting at byte {HEADER_LEN} has {payload} bytes, header declares {rows}x{cols} = {expected} bytes"
        )));
    }
    let (rows, cols) = (rows as usize, cols as usize);
    let mut m = DMatrix::zeros(rows, cols);
    for i in 0..rows {
        for j in 0..cols {
            let offset = HEADER_LEN + 8 * (i * cols + j);
            let v = f64::from_le_bytes(bytes[offset..offset + 8].try_into().expect("8 bytes"));
            if !v.is_finite() {
                return Err(ZdpError::Format(format!(
                    "non-finite value at byte {offset} (row {i}, col {j})"
                )));
            }
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

pub fn encode_csv(m: &DMatrix<f64>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(Vec::new());
    for i in 0..m.nrows() {
        w.write_record((0..m.ncols()).map(|j| format!("{:e}", m[(i, j)])))
            .map_err(|e| ZdpError::Format(e.to_string()))?;
    }
    w.into_inner().map_err(|e| ZdpError::Format(e.to_string()))
}

pub fn decode_csv(bytes: &[u8]) -> Result<DMatrix<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .trim(csv::Trim::All)
        .from_reader(bytes);
    let mut values = Vec::new();
    let mut cols = None;
    let mut rows = 0;
    for (idx, record) in reader.records().enumerate() {
        let record = record.map_err(|e| {
            let at = e
                .position()
                .map(|p| format!(" at byte {}", p.byte()))
                .unwrap_or_default();
            ZdpError::Format(format!("malformed CSV{at}: {e}"))
        })?;
        let byte = record.position().map(|p| p.byte()).unwrap_or(0);
        let line = record
            .position()
            .map(|p| p.line())
            .unwrap_or(idx as u64 + 1);
        let parsed: std::result::Result<Vec<f64>, usize> = record
            .iter()
            .enumerate()
            .map(|(j, f)| f.parse::<f64>().map_err(|_| j))
            .collect();
        let row = match parsed {
            Ok(row) => row,
            Err(_) if idx == 0 => continue,
            Err(j) => {
                return Err(ZdpError::Format(format!(
                    "line {line} (byte {byte}), column {j}: cannot parse {:?} as a number",
                    &record[j]
                )))
            }
        };
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(ZdpError::Format(format!(
                "line {line} (byte {byte}), column {j}: non-finite value"
            )));
        }
        match cols {
            None => cols = Some(row.len()),
            Some(c) if c != row.len() => {
                return Err(ZdpError::Format(format!(
                    "line {line} (byte {byte}) has {} fields, expected {c}",
                    row.len()
                )))
            }
            _ => {}
        }
        values.extend(row);
        rows += 1;
    }
    let cols = cols.ok_or_else(|| ZdpError::Format("CSV holds no numeric rows".into()))?;
    Ok(DMatrix::from_row_slice(rows, cols, &values))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn binary_layout_is_exact() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -0.5]);
        let bytes = encode_binary(&m);
        assert_eq!(&bytes[..4], b"ZDP1");
        assert_eq!(u64::from_le_bytes(bytes[4..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 3);
        assert_eq!(f64::from_le_bytes(bytes[20..28].try_into().unwrap()), 1.0);
        assert_eq!(f64::from_le_bytes(bytes[28..36].try_into().unwrap()), 2.0);
        assert_eq!(bytes.len(), 20 + 48);
        assert_eq!(decode_binary(&bytes).unwrap(), m);
    }

    #[test]
    fn binary_errors_name_offsets() {
        let err = decode_binary(b"ZDP2\0\0").unwrap_err().to_string();
        assert!(err.contains("byte 0"), "{err}");
        let err = decode_binary(b"ZDP1\x02\0\0").unwrap_err().to_string();
        assert!(err.contains("byte 4"), "{err}");
        let mut bytes = encode_binary(&DMatrix::from_element(2, 2, 1.0));
        bytes.pop();
        let err = decode_binary(&bytes).unwrap_err().to_string();
        assert!(err.contains("byte 20"), "{err}");
        let mut bytes = encode_binary(&DMatrix::from_element(2, 2, 1.0));
        bytes[28..36].copy_from_slice(&f64::NAN.to_le_bytes());
        let err = decode_binary(&bytes).unwrap_err().to_string();
        assert!(err.contains("byte 28"), "{err}");
    }

    #[test]
    fn csv_header_and_errors() {
        let m = decode_csv(b"a,b\n1,2\n3.5,-4e-3\n").unwrap();
        assert_eq!(m, DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.5, -4e-3]));
        assert!(decode_csv(b"1,2\nx,3\n")
            .unwrap_err()
            .to_string()
            .contains("line 2"));
        assert!(decode_csv(b"1,2\n3\n").is_err());
        assert!(decode_csv(b"1,NaN\n").is_err());
        assert!(decode_csv(b"a,b\n").is_err());
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let m = DMatrix::from_row_slice(2, 2, &[0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23]);
        assert_eq!(decode_csv(&encode_csv(&m).unwrap()).unwrap(), m);
    }
}
