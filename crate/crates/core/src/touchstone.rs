//! Touchstone v1 two-port (`.s2p`) files, real/imaginary format, Hz units.

use std::path::Path;

use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::network::TwoPortResponse;
use crate::util::{fmt17, write_atomic};

pub fn to_string(resp: &TwoPortResponse) -> Result<String> {
    if resp.is_empty() {
        return Err(Error::Domain("cannot export an empty response".into()));
    }
    let mut out = String::with_capacity(resp.len() * 200);
    out.push_str("! two-port S-parameters, columns: f S11 S21 S12 S22 (re im)\n");
    out.push_str(&format!("# Hz S RI R {}\n", resp.ref_impedance));
    for i in 0..resp.len() {
        out.push_str(&fmt17(resp.freqs[i]));
        for s in [resp.s11[i], resp.s21[i], resp.s12[i], resp.s22[i]] {
            out.push(' ');
            out.push_str(&fmt17(s.re));
            out.push(' ');
            out.push_str(&fmt17(s.im));
        }
        out.push('\n');
    }
    Ok(out)
}

/// Writes `resp` atomically to `path`. Nothing is created on error.
pub fn export_touchstone(resp: &TwoPortResponse, path: &Path) -> Result<()> {
    let text = to_string(resp)?;
    write_atomic(path, text.as_bytes())
}

/// Reads a two-port Touchstone v1 file in RI, MA or DB format.
pub fn read_touchstone(path: &Path) -> Result<TwoPortResponse> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|m| Error::parse(path, m))
}

fn parse(text: &str) -> std::result::Result<TwoPortResponse, String> {
    let mut unit = 1.0;
    let mut format = "MA".to_string();
    let mut z0 = 50.0;
    let mut values: Vec<f64> = Vec::new();
    for line in text.lines() {
        let line = line.split('!').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        if let Some(opts) = line.strip_prefix('#') {
            let toks: Vec<String> = opts.split_whitespace().map(str::to_uppercase).collect();
            let mut i = 0;
            while i < toks.len() {
                match toks[i].as_str() {
                    "HZ" => unit = 1.0,
                    "KHZ" => unit = 1e3,
                    "MHZ" => unit = 1e6,
                    "GHZ" => unit = 1e9,
                    "S" => {}
                    "RI" | "MA" | "DB" => format = toks[i].clone(),
                    "R" => {
                        i += 1;
                        z0 = toks
                            .get(i)
                            .and_then(|t| t.parse().ok())
                            .ok_or("missing reference impedance")?;
                    }
                    other => return Err(format!("unsupported option `{other}`")),
                }
                i += 1;
            }
            continue;
        }
        for tok in line.split_whitespace() {
            values.push(tok.parse().map_err(|_| format!("bad number `{tok}`"))?);
        }
    }
    if values.is_empty() || values.len() % 9 != 0 {
        return Err(format!("expected rows of 9 values, got {} numbers", values.len()));
    }
    let pair = |a: f64, b: f64| match format.as_str() {
        "RI" => Complex64::new(a, b),
        "MA" => Complex64::from_polar(a, b.to_radians()),
        _ => Complex64::from_polar(10f64.powf(a / 20.0), b.to_radians()),
    };
    let n = values.len() / 9;
    let mut resp = TwoPortResponse {
        freqs: Vec::with_capacity(n),
        s11: Vec::with_capacity(n),
        s12: Vec::with_capacity(n),
        s21: Vec::with_capacity(n),
        s22: Vec::with_capacity(n),
        ref_impedance: z0,
    };
    for row in values.chunks_exact(9) {
        resp.freqs.push(row[0] * unit);
        resp.s11.push(pair(row[1], row[2]));
        resp.s21.push(pair(row[3], row[4]));
        resp.s12.push(pair(row[5], row[6]));
        resp.s22.push(pair(row[7], row[8]));
    }
    Ok(resp)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn identity(n: usize) -> TwoPortResponse {
        let one = Complex64::new(1.0, 0.0);
        let zero = Complex64::new(0.0, 0.0);
        TwoPortResponse {
            freqs: (0..n).map(|i| i as f64 * 1e8).collect(),
            s11: vec![zero; n],
            s12: vec![one; n],
            s21: vec![one; n],
            s22: vec![zero; n],
            ref_impedance: 50.0,
        }
    }

    #[test]
    fn header_and_identity_rows() {
        let text = to_string(&identity(3)).unwrap();
        let mut lines = text.lines().filter(|l| !l.starts_with('!'));
        assert_eq!(lines.next().unwrap(), "# Hz S RI R 50");
        for line in lines {
            let cols: Vec<f64> = line.split_whitespace().map(|t| t.parse().unwrap()).collect();
            assert_eq!(cols.len(), 9);
            assert_eq!((cols[3], cols[4]), (1.0, 0.0));
        }
    }

    #[test]
    fn empty_response_writes_nothing() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.s2p");
        assert!(export_touchstone(&identity(0), &path).is_err());
        assert!(!path.exists());
    }

    #[test]
    fn reads_magnitude_angle_in_ghz() {
        let text = "# GHz S MA R 50\n1.0 0.5 90 1 0 1 0 0.5 -90\n";
        let r = parse(text).unwrap();
        assert_eq!(r.freqs, vec![1e9]);
        assert!((r.s11[0] - Complex64::new(0.0, 0.5)).norm() < 1e-15);
    }
}
