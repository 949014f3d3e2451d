//! Comparison grids across directories of aligned images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use vstain::error::{Error, Result};
use vstain::image::RgbImage;
use vstain::render::{annotate_rows, text_width, tile_grid};
use vstain::training::PairedSample;

/// Relative paths of every `.png` below `dir`.
pub fn png_files(dir: &Path) -> Result<BTreeSet<PathBuf>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeSet<PathBuf>) -> Result<()> {
        for e in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
            let p = e.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(root, &p, out)?;
            } else if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")) {
                out.insert(p.strip_prefix(root).expect("below root").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = BTreeSet::new();
    walk(dir, dir, &mut out)?;
    Ok(out)
}

/// The common file set, or a data error naming what each directory lacks.
pub fn aligned_files(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let sets = dirs.iter().map(|d| png_files(d)).collect::<Result<Vec<_>>>()?;
    let union: BTreeSet<PathBuf> = sets.iter().flatten().cloned().collect();
    let mut problems = Vec::new();
    for (d, s) in dirs.iter().zip(&sets) {
        let missing: Vec<String> = union.difference(s).map(|p| p.display().to_string()).collect();
        if !missing.is_empty() {
            problems.push(format!("{} lacks [{}]", d.display(), missing.join(", ")));
        }
    }
    if !problems.is_empty() {
        return Err(Error::Data(format!("file sets differ: {}", problems.join("; "))));
    }
    if union.is_empty() {
        return Err(Error::Data("no png files in the given directories".into()));
    }
    Ok(union.into_iter().collect())
}

/// Strips a trailing `_c<k>` crop suffix from a file stem.
fn source_id(file: &Path) -> String {
    let stem = file.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.rsplit_once("_c") {
        Some((id, k)) if !k.is_empty() && k.chars().all(|c| c.is_ascii_digit()) => id.to_string(),
        _ => stem,
    }
}

/// Rows in manifest order (files of unknown samples last, by path) with each row's
/// stain, when known.
pub fn order_rows(files: Vec<PathBuf>, manifest: Option<&[PairedSample]>) -> Vec<(PathBuf, Option<String>)> {
    let Some(samples) = manifest else {
        return files.into_iter().map(|f| (f, None)).collect();
    };
    let rank: BTreeMap<&str, (usize, &str)> = samples.iter().enumerate().map(|(i, s)| (s.source_id.as_str(), (i, s.stain.as_str()))).collect();
    let mut rows: Vec<(usize, PathBuf, Option<String>)> = files
        .into_iter()
        .map(|f| match rank.get(source_id(&f).as_str()) {
            Some(&(i, stain)) => (i, f, Some(stain.to_string())),
            None => (usize::MAX, f, None),
        })
        .collect();
    rows.sort_by(|a, b| (a.0, &a.1).cmp(&(b.0, &b.1)));
    rows.into_iter().map(|(_, f, s)| (f, s)).collect()
}

/// Writes `grid_XXX.png` pages of at most `rows_per_page` rows; a stain label
/// strip marks the first row of each stain block when stains are known.
pub fn export_grids(dirs: &[PathBuf], rows: &[(PathBuf, Option<String>)], tile: usize, rows_per_page: usize, out: &Path) -> Result<Vec<PathBuf>> {
    if tile == 0 || rows_per_page == 0 {
        return Err(Error::Config("tile and rows must be positive".into()));
    }
    let labelled = rows.iter().any(|r| r.1.is_some());
    let strip = rows.iter().filter_map(|r| r.1.as_deref()).map(|s| text_width(s, 1) + 4).max().unwrap_or(0);
    let mut written = Vec::new();
    for (page, chunk) in rows.chunks(rows_per_page).enumerate() {
        let tiles = chunk
            .iter()
            .map(|(f, _)| dirs.iter().map(|d| RgbImage::load(&d.join(f))).collect::<Result<Vec<_>>>())
            .collect::<Result<Vec<_>>>()?;
        let mut grid = tile_grid(&tiles, tile)?;
        if labelled {
            let mut prev: Option<&str> = None;
            let labels: Vec<String> = chunk
                .iter()
                .map(|(_, s)| {
                    let s = s.as_deref();
                    let l = if s != prev { s.unwrap_or("").to_string() } else { String::new() };
                    prev = s;
                    l
                })
                .collect();
            grid = annotate_rows(&grid, tile, &labels, 1, strip)?;
        }
        let p = out.join(format!("grid_{page:03}.png"));
        grid.save(&p)?;
        written.push(p);
    }
    Ok(written)
}
