use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

/// Formats a float with 17 significant digits, enough to round-trip any f64.
pub(crate) fn fmt17(x: f64) -> String {
    if x.is_finite() {
        format!("{x:.16e}")
    } else if x.is_nan() {
        "NaN".to_string()
    } else if x > 0.0 {
        "inf".to_string()
    } else {
        "-inf".to_string()
    }
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// followed by a rename, so readers never observe a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Trapezoidal mean of samples `y` over `x` between `lo` and `hi`, with linear
/// interpolation at band edges that fall between samples. `x` must be
/// ascending and cover `[lo, hi]`.
pub(crate) fn trapezoid_mean<T>(x: &[f64], y: &[T], lo: f64, hi: f64) -> T
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Sub<Output = T>,
{
    debug_assert!(hi > lo);
    let at = |f: f64| -> T { interp(x, y, f).expect("band inside grid") };
    let first = x.partition_point(|&v| v <= lo);
    let last = x.partition_point(|&v| v < hi);
    let mut pts: Vec<(f64, T)> = Vec::with_capacity(last.saturating_sub(first) + 2);
    pts.push((lo, at(lo)));
    for i in first..last {
        pts.push((x[i], y[i]));
    }
    pts.push((hi, at(hi)));
    let mut acc = (pts[1].1 + pts[0].1) * (0.5 * (pts[1].0 - pts[0].0));
    for w in pts.windows(2).skip(1) {
        acc = acc + (w[1].1 + w[0].1) * (0.5 * (w[1].0 - w[0].0));
    }
    acc * (1.0 / (hi - lo))
}

/// Linear interpolation of `y(x)` at `f`; `None` outside `[x0, xn]`.
pub(crate) fn interp<T>(x: &[f64], y: &[T], f: f64) -> Option<T>
where
    T: Copy + std::ops::Add<Output = T> + std::ops::Mul<f64, Output = T> + std::ops::Sub<Output = T>,
{
    let n = x.len();
    if n == 0 || f < x[0] || f > x[n - 1] {
        return None;
    }
    let i = x.partition_point(|&v| v < f);
    if i < n && x[i] == f {
        return Some(y[i]);
    }
    let (i0, i1) = (i - 1, i);
    let t = (f - x[i0]) / (x[i1] - x[i0]);
    Some(y[i0] + (y[i1] - y[i0]) * t)
}
