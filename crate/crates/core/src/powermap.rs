//! Turning a loss map into a per-cell power-loss table.
//!
//! The map head emits one value per feature-map pixel; at a cell-aligned
//! input resolution each pixel covers exactly one cell, so integrating the
//! map over a cell block and scaling by nominal power yields that cell's
//! loss in watt-peak. The sum over all cells accounts for the whole
//! predicted deficit: nothing is lost or invented by the tabulation.
//!
//! Rank agreement between predicted and true per-cell losses is measured
//! with Spearman correlation, ties receiving averaged ranks.

use crate::error::{Error, Result};
use crate::imgio::save_png16;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellGrid {
    pub rows: usize,
    pub cols: usize,
}

impl CellGrid {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid("cell grid", "rows and cols must be positive"));
        }
        Ok(CellGrid { rows, cols })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }

    /// Spreadsheet-style row letters: A, B, ..., Z, AA, AB, ...
    pub fn row_label(row: usize) -> String {
        let mut n = row + 1;
        let mut s = Vec::new();
        while n > 0 {
            n -= 1;
            s.push(b'A' + (n % 26) as u8);
            n /= 26;
        }
        s.reverse();
        String::from_utf8(s).expect("ascii letters")
    }
}

/// Sums the map over each cell block, row-major within each block and over
/// the grid. `(mh, mw)` must tile evenly into the grid. When one map pixel
/// covers one cell the result is the map itself.
pub fn integrate_cells(map: &[f64], mh: usize, mw: usize, grid: CellGrid) -> Result<Vec<f64>> {
    if map.len() != mh * mw {
        return Err(Error::shape(
            "integrate_cells",
            format!("{} values for a {mh}x{mw} map", map.len()),
        ));
    }
    if mh % grid.rows != 0 || mw % grid.cols != 0 {
        return Err(Error::shape(
            "integrate_cells",
            format!("map {mh}x{mw} does not tile a {}x{} grid", grid.rows, grid.cols),
        ));
    }
    let (bh, bw) = (mh / grid.rows, mw / grid.cols);
    let mut out = Vec::with_capacity(grid.cells());
    for r in 0..grid.rows {
        for c in 0..grid.cols {
            let mut s = 0.0;
            for y in 0..bh {
                for x in 0..bw {
                    s += map[(r * bh + y) * mw + c * bw + x];
                }
            }
            out.push(s);
        }
    }
    Ok(out)
}

/// Total predicted relative loss; equals `1 - y_hat` for the map head.
pub fn total_relative_loss(map: &[f64]) -> f64 {
    -map.iter().sum::<f64>()
}

/// One row of the cell loss table.
#[derive(Debug, Clone, PartialEq)]
pub struct CellLoss {
    pub row: usize,
    pub col: usize,
    pub row_label: String,
    pub col_label: String,
    /// Positive numbers are losses; the diagnostic unconstrained head can
    /// produce negative entries (apparent gains).
    pub loss_wp: f64,
}

/// Integrates the map and converts each cell to watt-peak.
pub fn cell_loss_table(
    map: &[f64],
    mh: usize,
    mw: usize,
    grid: CellGrid,
    p_nom_wp: f64,
) -> Result<Vec<CellLoss>> {
    let sums = integrate_cells(map, mh, mw, grid)?;
    Ok(sums
        .iter()
        .enumerate()
        .map(|(i, &s)| {
            let (row, col) = (i / grid.cols, i % grid.cols);
            CellLoss {
                row,
                col,
                row_label: CellGrid::row_label(row),
                col_label: (col + 1).to_string(),
                loss_wp: -s * p_nom_wp,
            }
        })
        .collect())
}

/// Writes the map three ways: `map.csv` (raw values, full precision),
/// `map.png` (losses rendered bright, upsampled by `scale` with nearest
/// neighbor), and `cells.csv` (the per-cell loss table).
pub fn export_map(
    dir: &Path,
    map: &[f64],
    mh: usize,
    mw: usize,
    grid: CellGrid,
    p_nom_wp: f64,
    scale: usize,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let csv_path = dir.join("map.csv");
    let mut w = csv::Writer::from_path(&csv_path)
        .map_err(|source| Error::Csv { path: csv_path.clone(), source })?;
    for r in 0..mh {
        let rec: Vec<String> = map[r * mw..(r + 1) * mw].iter().map(|v| v.to_string()).collect();
        w.write_record(&rec)
            .map_err(|source| Error::Csv { path: csv_path.clone(), source })?;
    }
    w.flush().map_err(|e| Error::io(&csv_path, e))?;

    let peak = map.iter().fold(0.0f64, |a, &v| a.max(-v));
    let scale = scale.max(1);
    let (ih, iw) = (mh * scale, mw * scale);
    let mut img = vec![0u16; ih * iw];
    if peak > 0.0 {
        for y in 0..ih {
            for x in 0..iw {
                let v = -map[(y / scale) * mw + x / scale];
                img[y * iw + x] = ((v / peak).clamp(0.0, 1.0) * 65535.0).round() as u16;
            }
        }
    }
    save_png16(&dir.join("map.png"), ih, iw, &img)?;

    let cells_path = dir.join("cells.csv");
    let mut w = csv::Writer::from_path(&cells_path)
        .map_err(|source| Error::Csv { path: cells_path.clone(), source })?;
    let wrap = |source| Error::Csv { path: cells_path.clone(), source };
    w.write_record(["row_label", "col_label", "loss_wp"]).map_err(wrap)?;
    for cl in cell_loss_table(map, mh, mw, grid, p_nom_wp)? {
        w.write_record([cl.row_label, cl.col_label, cl.loss_wp.to_string()])
            .map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::io(&cells_path, e))
}

fn average_ranks(vals: &[f64]) -> Vec<f64> {
    let n = vals.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && vals[order[j + 1]] == vals[order[i]] {
            j += 1;
        }
        // Tied run [i, j] shares the mean of its 1-based positions.
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with averaged tie ranks. Fails when either
/// side ranks every element equally, since agreement is then undefined.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::invalid(
            "spearman",
            format!("need two equal-length series, got {} and {}", a.len(), b.len()),
        ));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Numeric(
            "spearman: constant series has no ranking".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn one_pixel_per_cell_integration_is_the_identity() {
        let grid = CellGrid::new(6, 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let map: Vec<f64> = (0..60).map(|_| -rng.gen::<f64>() * 0.02).collect();
        let cells = integrate_cells(&map, 6, 10, grid).unwrap();
        assert_eq!(cells, map);
        // Conservation is bit-exact here: same values, same order.
        let direct: f64 = map.iter().sum();
        let integrated: f64 = cells.iter().sum();
        assert_eq!(direct.to_bits(), integrated.to_bits());
    }

    #[test]
    fn block_integration_sums_each_cell() {
        let grid = CellGrid::new(1, 2).unwrap();
        // 2x4 map, two 2x2 cells.
        let map = [1.0, 2.0, 10.0, 20.0, 3.0, 4.0, 30.0, 40.0];
        let cells = integrate_cells(&map, 2, 4, grid).unwrap();
        assert_eq!(cells, vec![10.0, 100.0]);
        let total: f64 = cells.iter().sum();
        assert!((total - map.iter().sum::<f64>()).abs() < 1e-12);
    }

    #[test]
    fn misaligned_grids_are_rejected() {
        let grid = CellGrid::new(6, 10).unwrap();
        assert!(integrate_cells(&vec![0.0; 63], 7, 9, grid).is_err());
        assert!(integrate_cells(&vec![0.0; 60], 5, 12, grid).is_err());
        assert!(CellGrid::new(0, 4).is_err());
    }

    #[test]
    fn loss_table_flips_sign_and_labels_cells() {
        let grid = CellGrid::new(2, 2).unwrap();
        let map = [-0.01, -0.02, 0.0, -0.04];
        let table = cell_loss_table(&map, 2, 2, grid, 200.0).unwrap();
        assert_eq!(table[0].row_label, "A");
        assert_eq!(table[3].row_label, "B");
        assert_eq!(table[3].col_label, "2");
        assert!((table[1].loss_wp - 4.0).abs() < 1e-12);
        assert_eq!(table[2].loss_wp, 0.0);
        assert!((total_relative_loss(&map) - 0.07).abs() < 1e-12);
    }

    #[test]
    fn row_labels_extend_past_z() {
        assert_eq!(CellGrid::row_label(0), "A");
        assert_eq!(CellGrid::row_label(25), "Z");
        assert_eq!(CellGrid::row_label(26), "AA");
        assert_eq!(CellGrid::row_label(27), "AB");
    }

    #[test]
    fn spearman_matches_hand_cases() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert!((spearman(&a, &[10.0, 20.0, 30.0, 40.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!((spearman(&a, &[4.0, 3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        // Monotone nonlinear mapping keeps rank correlation at one.
        assert!((spearman(&a, &[1.0, 8.0, 27.0, 64.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(spearman(&a, &[5.0, 5.0, 5.0, 5.0]).is_err());
        assert!(spearman(&a, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spearman_averages_tied_ranks() {
        // b has a tie on the middle two; hand computation gives 0.9487...
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [1.0, 2.0, 2.0, 3.0];
        let rho = spearman(&a, &b).unwrap();
        let expect = 3.0 / (10.0f64.sqrt());
        assert!((rho - expect).abs() < 1e-12, "{rho} vs {expect}");
    }

    #[test]
    fn export_writes_three_files() {
        let dir = tempfile::tempdir().unwrap();
        let grid = CellGrid::new(2, 3).unwrap();
        let map = [-0.01, 0.0, -0.03, -0.02, 0.0, 0.0];
        export_map(dir.path(), &map, 2, 3, grid, 230.0, 4).unwrap();
        let (h, w, img) = crate::imgio::load_gray16(&dir.path().join("map.png")).unwrap();
        assert_eq!((h, w), (8, 12));
        // Peak loss renders at full scale, zero loss at black.
        assert_eq!(img.iter().copied().max().unwrap(), 65535);
        assert_eq!(img[0 * 12 + 4], 0);
        let cells = std::fs::read_to_string(dir.path().join("cells.csv")).unwrap();
        assert!(cells.lines().count() == 7);
        assert!(cells.contains("B,1"));
        let rows = std::fs::read_to_string(dir.path().join("map.csv")).unwrap();
        assert_eq!(rows.lines().count(), 2);
    }
}
