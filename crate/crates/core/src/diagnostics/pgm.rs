//! Plain ("P2") grayscale PGM.

use std::fs;
use std::path::Path;

use super::AttentionMap;
use crate::error::{Error, Result};

/// Writes `round(value·255)` per pixel, one image row per line.
pub fn emit_pgm(map: &AttentionMap, path: &Path) -> Result<()> {
    let mut s = format!("P2\n{} {}\n255\n", map.width, map.height);
    for row in map.values.chunks(map.width.max(1)) {
        let line: Vec<String> = row
            .iter()
            .map(|v| ((v.clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
            .collect();
        s.push_str(&line.join(" "));
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// A parsed plain PGM.
#[derive(Debug, Clone, PartialEq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub maxval: u32,
    pub pixels: Vec<u32>,
}

impl Pgm {
    /// Pixels scaled by `maxval` into `[0, 1]`.
    pub fn unit_values(&self) -> Vec<f64> {
        self.pixels
            .iter()
            .map(|&p| f64::from(p) / f64::from(self.maxval))
            .collect()
    }
}

/// Parses a "P2" file; `#` comments are skipped.
pub fn parse_pgm(text: &str) -> Result<Pgm> {
    let mut tokens = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .flat_map(str::split_whitespace);
    let bad = |msg: String| Error::Input(format!("pgm: {msg}"));
    match tokens.next() {
        Some("P2") => {}
        other => return Err(bad(format!("expected magic P2, found {other:?}"))),
    }
    let mut num = |what: &str| -> Result<u32> {
        let t = tokens.next().ok_or_else(|| bad(format!("missing {what}")))?;
        t.parse().map_err(|_| bad(format!("{what} {t:?} is not a number")))
    };
    let width = num("width")? as usize;
    let height = num("height")? as usize;
    let maxval = num("maxval")?;
    if maxval == 0 || maxval > 65535 {
        return Err(bad(format!("maxval {maxval} out of range")));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for i in 0..width * height {
        let p = num(&format!("pixel {i}"))?;
        if p > maxval {
            return Err(bad(format!("pixel {i} = {p} exceeds maxval {maxval}")));
        }
        pixels.push(p);
    }
    Ok(Pgm {
        width,
        height,
        maxval,
        pixels,
    })
}
