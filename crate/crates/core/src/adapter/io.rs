//! Text serialization of adapters.
//!
//! ```text
//! format dtgen-adapter/1
//! target <name>
//! d <rows of B>
//! k <cols of A>
//! r <rank>
//! scale <value>
//! A
//! <r lines of k whitespace-separated values>
//! B
//! <d lines of r whitespace-separated values>
//! ```
//!
//! Lines starting with `#` and blank lines are ignored. Values use the
//! scalar's `Display`/`FromStr` forms, so `f64` round-trips exactly and
//! rationals are written as `p/q`.

use std::fmt::Display;
use std::io::{BufRead, Write};
use std::str::FromStr;

use num_traits::Num;

use super::{AdapterError, LowRankAdapter, Matrix};

pub const ADAPTER_FORMAT: &str = "dtgen-adapter/1";

pub fn write_adapter<T: Num + Clone + Display, W: Write>(
    adapter: &LowRankAdapter<T>,
    mut w: W,
) -> Result<(), AdapterError> {
    let (d, k) = adapter.weight_shape();
    writeln!(w, "format {ADAPTER_FORMAT}")?;
    writeln!(w, "target {}", adapter.target_name())?;
    writeln!(w, "d {d}")?;
    writeln!(w, "k {k}")?;
    writeln!(w, "r {}", adapter.rank())?;
    writeln!(w, "scale {}", adapter.scale())?;
    for (label, mat) in [("A", adapter.a()), ("B", adapter.b())] {
        writeln!(w, "{label}")?;
        for i in 0..mat.rows() {
            let row: Vec<String> = mat.row(i).iter().map(ToString::to_string).collect();
            writeln!(w, "{}", row.join(" "))?;
        }
    }
    Ok(())
}

pub fn read_adapter<T, R>(r: R) -> Result<LowRankAdapter<T>, AdapterError>
where
    T: Num + Clone + FromStr,
    <T as FromStr>::Err: Display,
    R: BufRead,
{
    let mut lines = Lines::new(r);

    let format = lines.header("format")?;
    if format != ADAPTER_FORMAT {
        return Err(lines.err(format!("unsupported format `{format}`")));
    }
    let target = lines.header("target")?;
    let d: usize = lines.header_num("d")?;
    let k: usize = lines.header_num("k")?;
    let rank: usize = lines.header_num("r")?;
    let scale_raw = lines.header("scale")?;
    let scale = T::from_str(&scale_raw).map_err(|e| lines.err(format!("bad scale: {e}")))?;

    let a = lines.block::<T>("A", rank, k)?;
    let b = lines.block::<T>("B", d, rank)?;
    if let Some(extra) = lines.next_content()? {
        return Err(lines.err(format!("trailing content `{extra}`")));
    }
    Ok(LowRankAdapter::new(a, b, target)?.with_scale(scale))
}

struct Lines<R> {
    inner: std::io::Lines<R>,
    line_no: usize,
}

impl<R: BufRead> Lines<R> {
    fn new(r: R) -> Self {
        Lines {
            inner: r.lines(),
            line_no: 0,
        }
    }

    fn err(&self, reason: String) -> AdapterError {
        AdapterError::Parse {
            line: self.line_no,
            reason,
        }
    }

    fn next_content(&mut self) -> Result<Option<String>, AdapterError> {
        for line in self.inner.by_ref() {
            self.line_no += 1;
            let line = line?;
            let t = line.trim();
            if t.is_empty() || t.starts_with('#') {
                continue;
            }
            return Ok(Some(t.to_owned()));
        }
        Ok(None)
    }

    fn expect_content(&mut self, what: &str) -> Result<String, AdapterError> {
        self.next_content()?
            .ok_or_else(|| self.err(format!("unexpected end of file, expected {what}")))
    }

    fn header(&mut self, key: &str) -> Result<String, AdapterError> {
        let line = self.expect_content(key)?;
        match line.split_once(char::is_whitespace) {
            Some((k, v)) if k == key => Ok(v.trim().to_owned()),
            _ => Err(self.err(format!("expected `{key} <value>`, found `{line}`"))),
        }
    }

    fn header_num(&mut self, key: &str) -> Result<usize, AdapterError> {
        let v = self.header(key)?;
        v.parse()
            .map_err(|_| self.err(format!("`{key}` must be a non-negative integer, found `{v}`")))
    }

    fn block<T>(&mut self, label: &str, rows: usize, cols: usize) -> Result<Matrix<T>, AdapterError>
    where
        T: FromStr,
        <T as FromStr>::Err: Display,
    {
        let head = self.expect_content(label)?;
        if head != label {
            return Err(self.err(format!("expected block `{label}`, found `{head}`")));
        }
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows {
            let line = self.expect_content(&format!("a row of {label}"))?;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(T::from_str(tok).map_err(|e| self.err(format!("bad value `{tok}`: {e}")))?);
            }
            if data.len() - before != cols {
                return Err(self.err(format!(
                    "row of {label} has {} values, expected {cols}",
                    data.len() - before
                )));
            }
        }
        Matrix::from_row_major(rows, cols, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_rational::Ratio;

    fn sample() -> LowRankAdapter<f64> {
        let a = Matrix::from_rows(vec![vec![0.1, -2.5, 1e-17]]).unwrap();
        let b = Matrix::from_rows(vec![vec![3.0], vec![f64::MIN_POSITIVE], vec![-0.0]]).unwrap();
        LowRankAdapter::new(a, b, "up_blocks.0.attn2.to_k")
            .unwrap()
            .with_scale(0.75)
    }

    #[test]
    fn f64_roundtrip_is_exact() {
        let ad = sample();
        let mut buf = Vec::new();
        write_adapter(&ad, &mut buf).unwrap();
        let back: LowRankAdapter<f64> = read_adapter(buf.as_slice()).unwrap();
        assert_eq!(back, ad);
    }

    #[test]
    fn rational_roundtrip() {
        let a = Matrix::from_rows(vec![vec![Ratio::new(1i64, 3), Ratio::new(-2, 7)]]).unwrap();
        let b = Matrix::from_rows(vec![vec![Ratio::from_integer(5)], vec![Ratio::new(1, 2)]]).unwrap();
        let ad = LowRankAdapter::new(a, b, "to_out").unwrap();
        let mut buf = Vec::new();
        write_adapter(&ad, &mut buf).unwrap();
        assert!(String::from_utf8(buf.clone()).unwrap().contains("1/3 -2/7"));
        assert_eq!(read_adapter::<Ratio<i64>, _>(buf.as_slice()).unwrap(), ad);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let text = "format dtgen-adapter/1\ntarget q\nd 2\nk 2\nr 1\nscale 1\nA\n1 2\nB\n1\n";
        match read_adapter::<f64, _>(text.as_bytes()) {
            Err(AdapterError::Parse { line, .. }) => assert_eq!(line, 10),
            other => panic!("unexpected {other:?}"),
        }
        let bad = "format other/9\n";
        assert!(matches!(
            read_adapter::<f64, _>(bad.as_bytes()),
            Err(AdapterError::Parse { line: 1, .. })
        ));
        let ragged = "format dtgen-adapter/1\ntarget q\nd 1\nk 2\nr 1\nscale 1\nA\n1 2 3\nB\n1\n";
        assert!(read_adapter::<f64, _>(ragged.as_bytes()).is_err());
    }
}
