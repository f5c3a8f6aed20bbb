//! Otsu tissue detection and grid tiling with a JSON-lines manifest.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const DEFAULT_TILE_SIZE: usize = 256;
pub const DEFAULT_MIN_TISSUE_FRACTION: f64 = 0.5;
pub const MIN_TILE_SIZE: usize = 16;

/// One retained tile.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TileRecord {
    pub source_id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub tissue_fraction: f64,
    pub label: Option<u32>,
}

/// Header line of a persisted manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ManifestHeader {
    tile_size: usize,
    threshold_used: Option<u8>,
    min_tissue_fraction: f64,
    #[serde(default)]
    source_thresholds: BTreeMap<String, u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TileManifest {
    pub records: Vec<TileRecord>,
    pub tile_size: usize,
    /// Otsu level; `None` when merged sources disagree (see `source_thresholds`).
    pub threshold_used: Option<u8>,
    pub min_tissue_fraction: f64,
    pub source_thresholds: BTreeMap<String, u8>,
}

impl TileManifest {
    pub fn empty(tile_size: usize, min_tissue_fraction: f64) -> Self {
        TileManifest {
            records: Vec::new(),
            tile_size,
            threshold_used: None,
            min_tissue_fraction,
            source_thresholds: BTreeMap::new(),
        }
    }

    /// Concatenates per-source manifests into one, ordered by `(source_id, y, x)`.
    pub fn merge(parts: Vec<TileManifest>, tile_size: usize, min_tissue_fraction: f64) -> Result<Self> {
        let mut out = TileManifest::empty(tile_size, min_tissue_fraction);
        for part in parts {
            if part.tile_size != tile_size {
                return Err(Error::Parameter(format!(
                    "cannot merge manifests with tile sizes {} and {tile_size}",
                    part.tile_size
                )));
            }
            out.records.extend(part.records);
            out.source_thresholds.extend(part.source_thresholds);
        }
        out.records
            .sort_by(|a, b| (&a.source_id, a.y, a.x).cmp(&(&b.source_id, b.y, b.x)));
        let mut seen = HashSet::new();
        for r in &out.records {
            if !seen.insert((&r.source_id, r.x, r.y)) {
                return Err(Error::Parameter(format!(
                    "duplicate tile ({}, {}, {})",
                    r.source_id, r.x, r.y
                )));
            }
        }
        let mut levels = out.source_thresholds.values();
        out.threshold_used = match levels.next() {
            Some(&first) if levels.all(|&t| t == first) => Some(first),
            _ => None,
        };
        Ok(out)
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let header = ManifestHeader {
            tile_size: self.tile_size,
            threshold_used: self.threshold_used,
            min_tissue_fraction: self.min_tissue_fraction,
            source_thresholds: self.source_thresholds.clone(),
        };
        let mut s = serde_json::to_string(&header)?;
        s.push('\n');
        for r in &self.records {
            s.push_str(&serde_json::to_string(r)?);
            s.push('\n');
        }
        Ok(s)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let mut lines = BufReader::new(f).lines();
        let header_line = lines
            .next()
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                detail: "missing header line".into(),
            })?
            .map_err(|e| Error::io(path, e))?;
        let header: ManifestHeader = serde_json::from_str(&header_line)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            records.push(serde_json::from_str(&line)?);
        }
        Ok(TileManifest {
            records,
            tile_size: header.tile_size,
            threshold_used: header.threshold_used,
            min_tissue_fraction: header.min_tissue_fraction,
            source_thresholds: header.source_thresholds,
        })
    }
}

/// Otsu's threshold on a 256-bin histogram.
///
/// Class 0 holds levels `0..=t`, class 1 holds `t+1..=255`; the returned `t`
/// maximises `ω0·ω1·(μ0 − μ1)²`, smallest `t` on ties.
pub fn otsu_threshold(hist: &[u64; 256]) -> Result<u8> {
    let nonzero = hist.iter().filter(|&&c| c > 0).count();
    if nonzero < 2 {
        return Err(Error::Degenerate(
            "histogram has fewer than two occupied levels".into(),
        ));
    }
    let total: u64 = hist.iter().sum();
    let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
    let n = total as f64;
    let mut count0 = 0u64;
    let mut sum0 = 0u64;
    let mut best_t = 0u8;
    let mut best = f64::NEG_INFINITY;
    for t in 0..255usize {
        count0 += hist[t];
        sum0 += t as u64 * hist[t];
        let count1 = total - count0;
        if count0 == 0 || count1 == 0 {
            continue;
        }
        let w0 = count0 as f64 / n;
        let w1 = count1 as f64 / n;
        let mu0 = sum0 as f64 / count0 as f64;
        let mu1 = (total_sum - sum0) as f64 / count1 as f64;
        let between = w0 * w1 * (mu0 - mu1) * (mu0 - mu1);
        if between > best {
            best = between;
            best_t = t as u8;
        }
    }
    Ok(best_t)
}

/// BT.601 luma, rounded to the nearest level.
#[inline]
pub fn luma(rgb: [u8; 3]) -> u8 {
    (0.299 * rgb[0] as f64 + 0.587 * rgb[1] as f64 + 0.114 * rgb[2] as f64).round() as u8
}

pub fn gray_histogram(r: &Raster) -> [u64; 256] {
    let mut hist = [0u64; 256];
    for p in r.pixels().chunks_exact(3) {
        hist[luma([p[0], p[1], p[2]]) as usize] += 1;
    }
    hist
}

/// Binary tissue mask plus the Otsu level that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct TissueMask {
    pub width: usize,
    pub height: usize,
    pub threshold: u8,
    pub tissue: Vec<bool>,
}

impl TissueMask {
    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.tissue[y * self.width + x]
    }

    pub fn fraction(&self) -> f64 {
        if self.tissue.is_empty() {
            return 0.0;
        }
        self.tissue.iter().filter(|&&t| t).count() as f64 / self.tissue.len() as f64
    }

    /// Tissue fraction inside a `size×size` window at `(x0, y0)`.
    pub fn window_fraction(&self, x0: usize, y0: usize, size: usize) -> f64 {
        let mut count = 0usize;
        for y in y0..y0 + size {
            let row = &self.tissue[y * self.width + x0..y * self.width + x0 + size];
            count += row.iter().filter(|&&t| t).count();
        }
        count as f64 / (size * size) as f64
    }
}

/// Tissue is the dark Otsu class (luma ≤ threshold) unless `invert` is set.
pub fn tissue_mask(r: &Raster, invert: bool) -> Result<TissueMask> {
    let hist = gray_histogram(r);
    let threshold = otsu_threshold(&hist)
        .map_err(|_| Error::Degenerate("no tissue: image has a single gray level".into()))?;
    let tissue = r
        .pixels()
        .chunks_exact(3)
        .map(|p| (luma([p[0], p[1], p[2]]) <= threshold) != invert)
        .collect();
    Ok(TissueMask {
        width: r.width(),
        height: r.height(),
        threshold,
        tissue,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TileOptions {
    pub tile_size: usize,
    pub min_tissue_fraction: f64,
    pub invert: bool,
}

impl Default for TileOptions {
    fn default() -> Self {
        TileOptions {
            tile_size: DEFAULT_TILE_SIZE,
            min_tissue_fraction: DEFAULT_MIN_TISSUE_FRACTION,
            invert: false,
        }
    }
}

/// Grid-aligned, non-overlapping tiles whose tissue fraction meets the floor.
/// Partial tiles at the right and bottom edges are dropped.
pub fn extract_tiles(r: &Raster, source_id: &str, opts: &TileOptions) -> Result<TileManifest> {
    let TileOptions {
        tile_size,
        min_tissue_fraction,
        invert,
    } = *opts;
    if tile_size < MIN_TILE_SIZE {
        return Err(Error::Parameter(format!(
            "tile_size must be >= {MIN_TILE_SIZE}, got {tile_size}"
        )));
    }
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(Error::Parameter(format!(
            "min_tissue_fraction must lie in [0, 1], got {min_tissue_fraction}"
        )));
    }
    let mut manifest = TileManifest::empty(tile_size, min_tissue_fraction);
    if r.width() < tile_size || r.height() < tile_size {
        return Ok(manifest);
    }
    let mask = tissue_mask(r, invert)?;
    manifest.threshold_used = Some(mask.threshold);
    manifest
        .source_thresholds
        .insert(source_id.to_string(), mask.threshold);
    for ty in 0..r.height() / tile_size {
        for tx in 0..r.width() / tile_size {
            let (x, y) = (tx * tile_size, ty * tile_size);
            let fraction = mask.window_fraction(x, y, tile_size);
            if fraction >= min_tissue_fraction {
                manifest.records.push(TileRecord {
                    source_id: source_id.to_string(),
                    x,
                    y,
                    size: tile_size,
                    tissue_fraction: fraction,
                    label: None,
                });
            }
        }
    }
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkernel::RngStream;

    /// Exhaustive argmax with class statistics recomputed from scratch per level.
    fn otsu_oracle(hist: &[u64; 256]) -> u8 {
        let total: u64 = hist.iter().sum();
        let total_sum: u64 = hist.iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
        let mut best = (f64::NEG_INFINITY, 0u8);
        for t in 0..=255usize {
            let c0: u64 = hist[..=t].iter().sum();
            let s0: u64 = hist[..=t].iter().enumerate().map(|(i, &c)| i as u64 * c).sum();
            let c1 = total - c0;
            if c0 == 0 || c1 == 0 {
                continue;
            }
            let n = total as f64;
            let m0 = s0 as f64 / c0 as f64;
            let m1 = (total_sum - s0) as f64 / c1 as f64;
            let v = (c0 as f64 / n) * (c1 as f64 / n) * (m0 - m1) * (m0 - m1);
            if v > best.0 {
                best = (v, t as u8);
            }
        }
        best.1
    }

    #[test]
    fn two_point_histogram_picks_smallest_tie() {
        let mut h = [0u64; 256];
        h[0] = 500;
        h[255] = 500;
        assert_eq!(otsu_threshold(&h).unwrap(), 0);
    }

    #[test]
    fn bimodal_and_uniform_match_oracle() {
        let mut h = [0u64; 256];
        for v in 10..=20 {
            h[v] = 30 + v as u64;
        }
        for v in 200..=210 {
            h[v] = 50;
        }
        assert_eq!(otsu_threshold(&h).unwrap(), otsu_oracle(&h));
        let t = otsu_threshold(&h).unwrap();
        assert!((20..200).contains(&t));
        let uniform = [7u64; 256];
        assert_eq!(otsu_threshold(&uniform).unwrap(), otsu_oracle(&uniform));
    }

    #[test]
    fn single_level_is_degenerate() {
        let mut h = [0u64; 256];
        h[128] = 10;
        assert!(matches!(otsu_threshold(&h), Err(Error::Degenerate(_))));
        assert!(otsu_threshold(&[0u64; 256]).is_err());
    }

    #[test]
    fn random_histograms_match_oracle() {
        let mut rng = RngStream::new(31, 0);
        for _ in 0..200 {
            let mut h = [0u64; 256];
            let occupied = 2 + rng.below(60) as usize;
            for _ in 0..occupied {
                h[rng.below(256) as usize] += 1 + rng.below(5000);
            }
            if h.iter().filter(|&&c| c > 0).count() < 2 {
                continue;
            }
            assert_eq!(otsu_threshold(&h).unwrap(), otsu_oracle(&h));
        }
    }

    #[test]
    fn dark_square_mask() {
        let r = Raster::from_fn(40, 40, |x, y| {
            if (10..30).contains(&x) && (5..25).contains(&y) {
                [120, 40, 110]
            } else {
                [250, 250, 250]
            }
        });
        let m = tissue_mask(&r, false).unwrap();
        for y in 0..40 {
            for x in 0..40 {
                let inside = (10..30).contains(&x) && (5..25).contains(&y);
                assert_eq!(m.at(x, y), inside, "({x},{y})");
            }
        }
        let inv = tissue_mask(&r, true).unwrap();
        assert_eq!(inv.at(0, 0), true);
    }

    #[test]
    fn blank_image_has_no_tissue() {
        let r = Raster::filled(32, 32, [255, 255, 255]);
        let err = tissue_mask(&r, false).unwrap_err();
        assert!(err.to_string().contains("no tissue"));
    }

    #[test]
    fn tissue_fraction_matches_pixel_count() {
        let mut rng = RngStream::new(8, 8);
        let r = Raster::from_fn(64, 48, |x, y| {
            let base = if (x / 8 + y / 8) % 3 == 0 { 90.0 } else { 215.0 };
            let v = (base + rng.normal(0.0, 18.0)).clamp(0.0, 255.0) as u8;
            [v, v.saturating_sub(20), v]
        });
        let m = tissue_mask(&r, false).unwrap();
        let count = r
            .pixels()
            .chunks_exact(3)
            .filter(|p| luma([p[0], p[1], p[2]]) <= m.threshold)
            .count();
        assert_eq!(m.fraction(), count as f64 / (64.0 * 48.0));
    }

    fn textured(width: usize, height: usize) -> Raster {
        Raster::from_fn(width, height, |x, y| {
            let v = if (x + y) % 2 == 0 { 60 } else { 230 };
            [v, v, v]
        })
    }

    #[test]
    fn grid_arithmetic() {
        let opts = TileOptions {
            tile_size: 256,
            min_tissue_fraction: 0.0,
            invert: false,
        };
        assert_eq!(extract_tiles(&textured(512, 512), "a", &opts).unwrap().records.len(), 4);
        let m = extract_tiles(&textured(600, 600), "a", &opts).unwrap();
        assert_eq!(m.records.len(), 4);
        assert!(m.records.iter().all(|r| r.x % 256 == 0 && r.y % 256 == 0));
        assert!(extract_tiles(&textured(100, 300), "a", &opts).unwrap().records.is_empty());
    }

    #[test]
    fn invalid_options() {
        let r = textured(64, 64);
        let bad_size = TileOptions { tile_size: 8, ..Default::default() };
        assert!(extract_tiles(&r, "a", &bad_size).is_err());
        let bad_frac = TileOptions { tile_size: 16, min_tissue_fraction: 1.5, invert: false };
        assert!(extract_tiles(&r, "a", &bad_frac).is_err());
    }

    #[test]
    fn quadrant_tissue_matches_brute_force() {
        let mut rng = RngStream::new(12, 0);
        let r = Raster::from_fn(128, 128, |x, y| {
            let tissue = x < 64 && y >= 64 && !(x > 50 && y > 110);
            let base = if tissue { 100.0 } else { 235.0 };
            let v = (base + rng.normal(0.0, 10.0)).clamp(0.0, 255.0) as u8;
            [v, v, v]
        });
        let opts = TileOptions { tile_size: 32, min_tissue_fraction: 0.5, invert: false };
        let manifest = extract_tiles(&r, "q", &opts).unwrap();
        let mask = tissue_mask(&r, false).unwrap();
        let mut expected = Vec::new();
        for ty in 0..4 {
            for tx in 0..4 {
                let mut count = 0;
                for y in ty * 32..ty * 32 + 32 {
                    for x in tx * 32..tx * 32 + 32 {
                        if mask.at(x, y) {
                            count += 1;
                        }
                    }
                }
                if count as f64 / 1024.0 >= 0.5 {
                    expected.push((tx * 32, ty * 32));
                }
            }
        }
        let got: Vec<_> = manifest.records.iter().map(|r| (r.x, r.y)).collect();
        assert_eq!(got, expected);
        assert_eq!(got.len(), 4);
    }

    #[test]
    fn manifest_round_trip_and_merge() {
        let opts = TileOptions { tile_size: 16, min_tissue_fraction: 0.0, invert: false };
        let a = extract_tiles(&textured(32, 32), "b", &opts).unwrap();
        let b = extract_tiles(&textured(32, 16), "a", &opts).unwrap();
        let merged = TileManifest::merge(vec![a.clone(), b], 16, 0.0).unwrap();
        assert_eq!(merged.records[0].source_id, "a");
        assert_eq!(merged.records.len(), 6);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.jsonl");
        merged.write(&path).unwrap();
        assert_eq!(TileManifest::read(&path).unwrap(), merged);
        assert!(TileManifest::merge(vec![a.clone(), a], 16, 0.0).is_err());
    }

    #[test]
    fn record_field_names_are_fixed() {
        let rec = TileRecord {
            source_id: "s".into(),
            x: 0,
            y: 256,
            size: 256,
            tissue_fraction: 0.75,
            label: None,
        };
        assert_eq!(
            serde_json::to_string(&rec).unwrap(),
            r#"{"source_id":"s","x":0,"y":256,"size":256,"tissue_fraction":0.75,"label":null}"#
        );
    }
}
