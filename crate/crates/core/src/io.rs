//! File formats: CSV time series and coefficient tables, JSON helpers.

use std::io::{Read, Write};

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::sim::TimeSeries;

/// Serde adapter writing a matrix as nested row arrays.
pub mod serde_mat {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
        (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
    }

    pub fn from_rows(rows: &[Vec<f64>], ncols_hint: usize) -> Result<DMatrix<f64>, String> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(ncols_hint, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err("ragged matrix rows".into());
        }
        Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        to_rows(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        from_rows(&rows, 0).map_err(serde::de::Error::custom)
    }

    /// Lag-major sequence of matrices.
    pub mod seq {
        use super::*;

        pub fn serialize<S: Serializer>(ms: &[DMatrix<f64>], s: S) -> Result<S::Ok, S::Error> {
            ms.iter().map(to_rows).collect::<Vec<_>>().serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<DMatrix<f64>>, D::Error> {
            let all = Vec::<Vec<Vec<f64>>>::deserialize(d)?;
            all.iter()
                .map(|rows| from_rows(rows, 0).map_err(serde::de::Error::custom))
                .collect()
        }
    }

    /// Column-major flat array plus explicit shape.
    pub mod col_major {
        use super::*;

        #[derive(Serialize, Deserialize)]
        struct Flat {
            rows: usize,
            cols: usize,
            data: Vec<f64>,
        }

        pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
            Flat { rows: m.nrows(), cols: m.ncols(), data: m.as_slice().to_vec() }.serialize(s)
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
            let f = Flat::deserialize(d)?;
            if f.data.len() != f.rows * f.cols {
                return Err(serde::de::Error::custom("matrix data length does not match shape"));
            }
            Ok(DMatrix::from_column_slice(f.rows, f.cols, &f.data))
        }
    }
}

/// Writes `t,y1,...,ym` with one-based `t`.
pub fn write_time_series<W: Write>(ts: &TimeSeries, w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    let mut header = vec!["t".to_string()];
    header.extend((1..=ts.m()).map(|i| format!("y{i}")));
    wtr.write_record(&header)?;
    for t in 0..ts.len() {
        let mut rec = vec![(t + 1).to_string()];
        rec.extend(ts.values.row(t).iter().map(|v| format_f64(*v)));
        wtr.write_record(&rec)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Reads the format of [`write_time_series`]; lines starting with `#` are skipped.
pub fn read_time_series<R: Read>(r: R) -> Result<TimeSeries> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(r);
    let header = rdr.headers()?.clone();
    if header.get(0) != Some("t") || header.len() < 2 {
        return Err(Error::InvalidArgument("time series CSV must start with header t,y1,...".into()));
    }
    let m = header.len() - 1;
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec?;
        if rec.len() != m + 1 {
            return Err(Error::DimensionMismatch { expected: m + 1, got: rec.len() });
        }
        for field in rec.iter().skip(1) {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad number {field:?}")))?;
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 {
        return Err(Error::InsufficientData("time series CSV has no rows".into()));
    }
    TimeSeries::new(DMatrix::from_row_slice(rows, m, &data), None)
}

/// Lag-major coefficient table: `lag,i,j,value` (one-based indices).
pub fn write_coefficients<W: Write>(coeffs: &[DMatrix<f64>], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["lag", "i", "j", "value"])?;
    for (lag, g) in coeffs.iter().enumerate() {
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                wtr.write_record(&[
                    (lag + 1).to_string(),
                    (i + 1).to_string(),
                    (j + 1).to_string(),
                    format_f64(g[(i, j)]),
                ])?;
            }
        }
    }
    wtr.flush()?;
    Ok(())
}

/// Dense matrix as headerless CSV.
pub fn write_matrix_csv<W: Write>(m: &DMatrix<f64>, w: W) -> Result<()> {
    let mut wtr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
    for i in 0..m.nrows() {
        wtr.write_record(m.row(i).iter().map(|v| format_f64(*v)))?;
    }
    wtr.flush()?;
    Ok(())
}

/// Shortest representation that parses back to the same bits.
pub fn format_f64(v: f64) -> String {
    format!("{v:?}")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_series_csv_round_trip() {
        let ts = TimeSeries::new(DMatrix::from_row_slice(2, 2, &[0.1, -2.5, 1e-300, 3.0]), None).unwrap();
        let mut buf = Vec::new();
        write_time_series(&ts, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,y1,y2\n1,"));
        let back = read_time_series(buf.as_slice()).unwrap();
        assert_eq!(back.values, ts.values);
    }

    #[test]
    fn comment_lines_skipped() {
        let back = read_time_series("# config_hash=ab12 seed=3\nt,y1\n1,0.5\n2,-1.0\n".as_bytes()).unwrap();
        assert_eq!(back.values.as_slice(), &[0.5, -1.0]);
        assert!(read_time_series("t,y1\n".as_bytes()).is_err());
    }

    #[test]
    fn bad_header_rejected() {
        assert!(read_time_series("a,b\n1,2\n".as_bytes()).is_err());
    }

    #[test]
    fn coefficient_table_layout() {
        let g = vec![DMatrix::from_row_slice(1, 2, &[1.0, 2.0])];
        let mut buf = Vec::new();
        write_coefficients(&g, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "lag,i,j,value\n1,1,1,1.0\n1,1,2,2.0\n");
    }
}
