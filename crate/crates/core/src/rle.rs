//! Run-length encoding of binary masks in the competition submission format.
//!
//! Pixels are numbered from 1 in column-major order: top to bottom within
//! a column, columns left to right. A run `(start, length)` covers
//! positions `start..start + length`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct Rle {
    runs: Vec<(u64, u64)>,
}

impl Rle {
    /// Wraps runs without checking them against any mask size.
    pub fn from_runs(runs: Vec<(u64, u64)>) -> Self {
        Rle { runs }
    }

    pub fn runs(&self) -> &[(u64, u64)] {
        &self.runs
    }

    pub fn is_empty(&self) -> bool {
        self.runs.is_empty()
    }

    /// Number of pixels covered, counting overlaps twice.
    pub fn pixel_count(&self) -> u64 {
        self.runs.iter().map(|&(_, l)| l).sum()
    }

    /// Canonical: sorted, non-overlapping, non-adjacent, positive lengths.
    pub fn is_canonical(&self) -> bool {
        self.runs.iter().all(|&(s, l)| s >= 1 && l >= 1) && self.runs.windows(2).all(|w| w[1].0 > w[0].0 + w[0].1)
    }
}

impl fmt::Display for Rle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, (s, l)) in self.runs.iter().enumerate() {
            if i > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{s} {l}")?;
        }
        Ok(())
    }
}

impl FromStr for Rle {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        parse_rle(s)
    }
}

pub fn rle_text(rle: &Rle) -> String {
    rle.to_string()
}

/// Parses `"s1 l1 s2 l2 ..."`. Errors carry the 0-based token index.
pub fn parse_rle(text: &str) -> Result<Rle> {
    let mut values = Vec::new();
    for (i, token) in text.split_whitespace().enumerate() {
        let v: u64 = token
            .parse()
            .map_err(|_| Error::parse(format!("token {i}"), format!("`{token}` is not a positive integer")))?;
        if v == 0 {
            return Err(Error::parse(
                format!("token {i}"),
                "starts and lengths must be positive",
            ));
        }
        values.push(v);
    }
    if values.len() % 2 != 0 {
        return Err(Error::parse(
            format!("token {}", values.len() - 1),
            format!("odd number of tokens ({})", values.len()),
        ));
    }
    Ok(Rle {
        runs: values.chunks_exact(2).map(|p| (p[0], p[1])).collect(),
    })
}

/// Sets exactly the pixels covered by `rle`. Runs may arrive in any order
/// and may touch, but must not overlap or leave the mask.
pub fn rle_decode(rle: &Rle, height: usize, width: usize) -> Result<BinaryMask> {
    let total = (height * width) as u64;
    let mut mask = BinaryMask::empty(height, width);
    for (k, &(start, len)) in rle.runs.iter().enumerate() {
        if start == 0 || len == 0 {
            return Err(Error::Rle(format!("run {k} ({start}, {len}) has a zero field")));
        }
        let end = start - 1 + len;
        if end > total {
            return Err(Error::Rle(format!(
                "run {k} ({start}, {len}) ends at pixel {end}, beyond the {height}x{width} mask ({total} pixels)"
            )));
        }
        for p in (start - 1)..end {
            let p = p as usize;
            let (y, x) = (p % height, p / height);
            if mask.get(y, x) {
                return Err(Error::Rle(format!(
                    "run {k} ({start}, {len}) overlaps an earlier run at pixel {}",
                    p + 1
                )));
            }
            mask.set(y, x, true);
        }
    }
    Ok(mask)
}

/// Maximal runs in column-major order.
pub fn rle_encode(mask: &BinaryMask) -> Rle {
    let (h, w) = mask.dims();
    let mut runs = Vec::new();
    let mut current: Option<(u64, u64)> = None;
    for x in 0..w {
        for y in 0..h {
            let pos = (x * h + y) as u64 + 1;
            if mask.get(y, x) {
                current = match current {
                    Some((s, l)) => Some((s, l + 1)),
                    None => Some((pos, 1)),
                };
            } else if let Some(run) = current.take() {
                runs.push(run);
            }
        }
    }
    runs.extend(current);
    Rle { runs }
}

/// Integer downsampling factor: only `0.25` (factor 4) is used by the
/// submission format, but any reciprocal integer works.
fn downsample_step(factor: f64) -> Result<usize> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::precondition(format!("scale factor {factor} must be in (0, 1]")));
    }
    let step = (1.0 / factor).round();
    if ((1.0 / factor) - step).abs() > 1e-9 {
        return Err(Error::precondition(format!(
            "scale factor {factor} is not the reciprocal of an integer"
        )));
    }
    Ok(step as usize)
}

/// Nearest-neighbor downsampling by `factor` per side. Output pixel `(r, c)`
/// copies source pixel `(k·r + k/2, k·c + k/2)` where `k = 1/factor`.
pub fn scale_mask(mask: &BinaryMask, factor: f64) -> Result<BinaryMask> {
    let k = downsample_step(factor)?;
    let (h, w) = mask.dims();
    if h % k != 0 || w % k != 0 {
        return Err(Error::precondition(format!(
            "mask {h}x{w} is not divisible by {k} for scale factor {factor}"
        )));
    }
    let off = k / 2;
    Ok(BinaryMask::from_fn(h / k, w / k, |r, c| {
        mask.get(k * r + off, k * c + off)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_three_pixels_go_down_the_first_column() {
        let m = rle_decode(&parse_rle("1 3").unwrap(), 4, 4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(m.get(y, x), x == 0 && y < 3, "({y},{x})");
            }
        }
    }

    #[test]
    fn empty_and_full() {
        assert!(rle_decode(&Rle::default(), 4, 4).unwrap().is_empty());
        let full = rle_decode(&parse_rle("1 16").unwrap(), 4, 4).unwrap();
        assert_eq!(full.count(), 16);
        assert!(rle_encode(&BinaryMask::empty(3, 5)).is_empty());
    }

    #[test]
    fn single_pixel() {
        let mut m = BinaryMask::empty(5, 7);
        m.set(2, 3, true);
        assert_eq!(rle_encode(&m).runs(), &[(3 * 5 + 2 + 1, 1)]);
    }

    #[test]
    fn runs_wrap_across_columns() {
        let mut m = BinaryMask::empty(3, 3);
        m.set(2, 0, true);
        m.set(0, 1, true);
        assert_eq!(rle_encode(&m).runs(), &[(3, 2)]);
    }

    #[test]
    fn decode_errors() {
        let err = rle_decode(&parse_rle("1 3 10 8").unwrap(), 4, 4).unwrap_err();
        assert!(err.to_string().contains("run 1"), "{err}");
        let err = rle_decode(&parse_rle("5 3 1 5").unwrap(), 4, 4).unwrap_err();
        assert!(err.to_string().contains("overlaps"), "{err}");
        // adjacency and arbitrary order are accepted on input
        let m = rle_decode(&parse_rle("5 2 1 4").unwrap(), 4, 4).unwrap();
        assert_eq!(rle_encode(&m).runs(), &[(1, 6)]);
    }

    #[test]
    fn text_format() {
        let rle = Rle::from_runs(vec![(1, 3), (10, 5)]);
        assert_eq!(rle_text(&rle), "1 3 10 5");
        assert_eq!(parse_rle("").unwrap(), Rle::default());
        assert_eq!(rle_text(&Rle::default()), "");
        assert_eq!(parse_rle(" 1  3\t10 5\n").unwrap(), rle);
    }

    #[test]
    fn parse_errors_name_the_token() {
        let err = parse_rle("1 3 x 5").unwrap_err().to_string();
        assert!(err.contains("token 2"), "{err}");
        let err = parse_rle("1 3 10").unwrap_err().to_string();
        assert!(err.contains("odd"), "{err}");
        let err = parse_rle("1 0").unwrap_err().to_string();
        assert!(err.contains("token 1"), "{err}");
        assert!(parse_rle("1 -3").is_err());
    }

    #[test]
    fn quarter_scale_dims_and_constants() {
        let full = BinaryMask::filled(1400, 2100, true);
        let s = scale_mask(&full, 0.25).unwrap();
        assert_eq!(s.dims(), (350, 525));
        assert_eq!(s.count(), 350 * 525);
        let empty = scale_mask(&BinaryMask::empty(8, 12), 0.25).unwrap();
        assert!(empty.is_empty());
        assert!(scale_mask(&BinaryMask::empty(10, 12), 0.25).is_err());
    }

    #[test]
    fn pixel_checkerboard_samples_one_parity() {
        // sampled pixels (4r+2, 4c+2) all have even coordinate sum
        let m = BinaryMask::from_fn(16, 16, |y, x| (y + x) % 2 == 0);
        let s = scale_mask(&m, 0.25).unwrap();
        assert_eq!(s.count(), 16);
        let m = BinaryMask::from_fn(16, 16, |y, x| (y + x) % 2 == 1);
        assert!(scale_mask(&m, 0.25).unwrap().is_empty());
    }

    #[test]
    fn cell_checkerboard_becomes_pixel_checkerboard() {
        let m = BinaryMask::from_fn(16, 24, |y, x| (y / 4 + x / 4) % 2 == 0);
        let s = scale_mask(&m, 0.25).unwrap();
        assert_eq!(s, BinaryMask::from_fn(4, 6, |r, c| (r + c) % 2 == 0));
    }
}
