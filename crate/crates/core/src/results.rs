//! Result tables: `#`-prefixed header block, one column line, numeric rows.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// `%.17g`: 17 significant digits, trailing zeros trimmed. Round-trips every
/// finite `f64`.
pub fn format_g17(x: f64) -> String {
    if x.is_nan() {
        return "nan".into();
    }
    if x.is_infinite() {
        return if x > 0.0 { "inf".into() } else { "-inf".into() };
    }
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    let sci = format!("{x:.16e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent form");
    let exp: i32 = exp.parse().expect("integer exponent");
    if (-5..17).contains(&exp) {
        let decimals = (16 - exp) as usize;
        trim_zeros(format!("{x:.decimals$}"))
    } else {
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{}e{sign}{:02}", trim_zeros(mantissa.to_string()), exp.abs())
    }
}

fn trim_zeros(s: String) -> String {
    if !s.contains('.') {
        return s;
    }
    s.trim_end_matches('0').trim_end_matches('.').to_string()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResultTable {
    /// Header lines without the leading `# `.
    pub header: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl ResultTable {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            header: Vec::new(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push_row(&mut self, row: Vec<f64>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match the schema");
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.rows.iter().map(|r| r[j]).collect())
    }

    pub fn header_line(&mut self, line: impl Into<String>) {
        self.header.push(line.into());
    }

    /// Everything below the header block.
    pub fn data_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for row in &self.rows {
            w.write_record(row.iter().map(|&v| format_g17(v)))
                .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for h in &self.header {
            for line in h.lines() {
                let _ = writeln!(out, "# {line}");
            }
            if h.is_empty() {
                out.push_str("#\n");
            }
        }
        out.push_str(&self.data_csv());
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut header = Vec::new();
        let mut offset = 0;
        let mut skipped = 0;
        for line in text.split_inclusive('\n') {
            let Some(rest) = line.strip_prefix('#') else { break };
            let rest = rest.trim_end_matches(['\n', '\r']);
            header.push(rest.strip_prefix(' ').unwrap_or(rest).to_string());
            offset += line.len();
            skipped += 1;
        }
        let body = &text[offset..];
        let at = |line: u64, msg: String| Error::ResultFormat {
            line: skipped + line as usize,
            msg,
        };
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .trim(csv::Trim::All)
            .from_reader(body.as_bytes());
        let mut columns: Option<Vec<String>> = None;
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| {
                let line = e.position().map(|p| p.line()).unwrap_or(1);
                at(line, e.to_string())
            })?;
            let line = record.position().map(|p| p.line()).unwrap_or(1);
            if record.iter().all(|c| c.is_empty()) {
                continue;
            }
            if record.get(0).is_some_and(|c| c.starts_with('#')) {
                return Err(at(line, "comment line inside the data block".into()));
            }
            match &columns {
                None => {
                    if record.iter().any(|c| c.is_empty()) {
                        return Err(at(line, "empty column name".into()));
                    }
                    columns = Some(record.iter().map(str::to_string).collect());
                }
                Some(names) => {
                    if record.len() != names.len() {
                        return Err(at(line, format!("{} cells, expected {}", record.len(), names.len())));
                    }
                    let row = record
                        .iter()
                        .map(|cell| {
                            cell.parse::<f64>()
                                .map_err(|_| at(line, format!("not a number: {cell:?}")))
                        })
                        .collect::<Result<Vec<f64>>>()?;
                    rows.push(row);
                }
            }
        }
        let columns = columns.ok_or(Error::ResultFormat {
            line: text.lines().count(),
            msg: "no column line".into(),
        })?;
        Ok(Self { header, columns, rows })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn g17_examples() {
        assert_eq!(format_g17(1.0), "1");
        assert_eq!(format_g17(0.1), "0.10000000000000001");
        assert_eq!(format_g17(-2.5), "-2.5");
        assert_eq!(format_g17(1e-7), "9.9999999999999995e-08");
        assert_eq!(format_g17(1e20), "1e+20");
        assert_eq!(format_g17(123456.0), "123456");
        assert_eq!(format_g17(0.0), "0");
    }

    #[test]
    fn table_round_trip() {
        let mut t = ResultTable::new(&["a", "b"]);
        t.header_line("tool 0.1");
        t.header_line("config:\nn = 5\np = 10");
        t.push_row(vec![0.1, 1.0 / 3.0]);
        t.push_row(vec![-0.0, 1e300]);
        let text = t.to_csv();
        assert!(text.starts_with("# tool 0.1\n# config:\n# n = 5\n"));
        let back = ResultTable::parse(&text).unwrap();
        assert_eq!(back.columns, t.columns);
        assert_eq!(back.rows, t.rows);
        assert_eq!(back.column("b").unwrap()[0], 1.0 / 3.0);
    }

    #[test]
    fn parse_errors_carry_lines() {
        let e = ResultTable::parse("# h\na,b\n1,2\n3\n").unwrap_err();
        assert!(matches!(e, Error::ResultFormat { line: 4, .. }), "{e:?}");
        let e = ResultTable::parse("a,b\n1,x\n").unwrap_err();
        assert!(matches!(e, Error::ResultFormat { line: 2, .. }));
        assert!(ResultTable::parse("# only header\n").is_err());
        assert!(ResultTable::parse("a,b\n1,2\n# late\n").is_err());
    }

    proptest! {
        #[test]
        fn g17_round_trips(bits in any::<u64>()) {
            let x = f64::from_bits(bits);
            prop_assume!(x.is_finite());
            let back: f64 = format_g17(x).parse().unwrap();
            prop_assert_eq!(back.to_bits(), x.to_bits());
        }
    }
}
