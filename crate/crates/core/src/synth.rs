//! Synthetic luminescence dataset with exact power ground truth.
//!
//! Real module captures come with measured power but no per-cell labels.
//! The generator inverts that: it plants defects with known pixel-exact
//! inactive areas, renders a plausible luminescence image on top, and
//! derives both the module target and per-cell losses from the planted
//! masks, never from rendered intensities. That gives downstream tests an
//! oracle: a model's map can be scored against the true per-cell loss.
//!
//! Power model: a module of `N` equal cells delivers `p_nom / N` per cell,
//! scaled by the cell's active area. The relative power is therefore
//! `y = 1 - mean(inactive fractions)`.
//!
//! Rendering deliberately includes confounders: busbars and cell borders
//! are dark but lossless, and a configurable share of defects renders
//! *bright* instead of dark, so image brightness alone does not determine
//! power.

use crate::data::{write_manifest, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::imgio::save_png16;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::path::Path;

/// Sensor full scale for rendered images.
pub const FULL_SCALE: u16 = 28_000;

/// Cell grid and nameplate power of one module model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModuleType {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub p_nom_wp: f64,
}

impl ModuleType {
    /// Built-in module models `A` through `F`.
    pub fn preset(name: &str) -> Result<Self> {
        let (rows, cols, p_nom_wp) = match name {
            "A" => (6, 10, 230.0),
            "B" => (6, 10, 240.0),
            "C" => (6, 12, 345.0),
            "D" => (6, 10, 240.0),
            "E" => (6, 10, 235.0),
            "F" => (6, 10, 245.0),
            other => {
                return Err(Error::Config(format!(
                    "unknown module type {other:?}, expected A..F"
                )))
            }
        };
        Ok(ModuleType { name: name.into(), rows, cols, p_nom_wp })
    }

    pub fn cells(&self) -> usize {
        self.rows * self.cols
    }
}

/// Geometry of one planted defect inside a cell of `P x P` pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DefectKind {
    /// Dead rectangle at `(x, y)` of size `w x h`.
    Rect { x: usize, y: usize, w: usize, h: usize },
    /// A crack isolating one side of the cell: everything before (or from)
    /// pixel `at` along the cut axis is dead.
    Split { vertical: bool, at: usize, low_side: bool },
}

impl DefectKind {
    /// Dead area as a fraction of the cell, exact by construction.
    pub fn inactive_fraction(&self, cell_px: usize) -> f64 {
        let p = cell_px as f64;
        match *self {
            DefectKind::Rect { w, h, .. } => (w * h) as f64 / (p * p),
            DefectKind::Split { at, low_side, .. } => {
                let span = if low_side { at } else { cell_px - at };
                span as f64 / p
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellDefect {
    pub row: usize,
    pub col: usize,
    pub kind: DefectKind,
    /// Luminance multiplier of the dead region; below one renders dark,
    /// above one renders bright (the ambiguous case).
    pub level: f64,
}

/// Everything known about one generated sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTruth {
    pub index: usize,
    pub module: ModuleType,
    pub defects: Vec<CellDefect>,
    /// Inactive fraction per cell, row-major, zero where intact.
    pub cell_fractions: Vec<f64>,
    pub y: f64,
    pub p_mpp_wp: f64,
}

impl SampleTruth {
    /// True power loss of one cell in watt-peak.
    pub fn cell_loss_wp(&self, row: usize, col: usize) -> f64 {
        self.cell_fractions[row * self.module.cols + col] * self.module.p_nom_wp
            / self.module.cells() as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub count: usize,
    /// Samples cycle through these types in order.
    pub module_types: Vec<ModuleType>,
    /// Rendered cell size in pixels per side.
    pub cell_px: usize,
    /// Upper bound of the per-sample defect rate; each sample draws its own
    /// severity uniformly from `[0, defect_density]`.
    pub defect_density: f64,
    /// Probability that a defect renders bright instead of dark.
    pub intensity_ambiguity: f64,
    /// Additive Gaussian noise, as a fraction of full scale.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn new(count: usize, seed: u64) -> Self {
        SynthConfig {
            count,
            module_types: vec![ModuleType::preset("A").expect("preset A exists")],
            cell_px: 32,
            defect_density: 0.5,
            intensity_ambiguity: 0.3,
            noise_sigma: 0.01,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::Config("sample count must be positive".into()));
        }
        if self.module_types.is_empty() {
            return Err(Error::Config("need at least one module type".into()));
        }
        if self.cell_px < 8 {
            return Err(Error::Config(format!(
                "cell size {} px is too small to render structure",
                self.cell_px
            )));
        }
        for (what, v) in [
            ("defect_density", self.defect_density),
            ("intensity_ambiguity", self.intensity_ambiguity),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{what} {v} outside [0, 1]")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma {} must be non-negative",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Draws the defect set for one sample. One defect per cell at most; a cell
/// is hit with probability `severity`.
pub fn sample_defects(
    ty: &ModuleType,
    cell_px: usize,
    severity: f64,
    ambiguity: f64,
    rng: &mut impl Rng,
) -> Vec<CellDefect> {
    let p = cell_px;
    let min_side = p.div_ceil(4);
    let mut defects = Vec::new();
    for row in 0..ty.rows {
        for col in 0..ty.cols {
            if severity <= 0.0 || !rng.gen_bool(severity.min(1.0)) {
                continue;
            }
            let kind = if rng.gen_bool(0.3) {
                DefectKind::Split {
                    vertical: rng.gen_bool(0.5),
                    at: rng.gen_range(min_side..=3 * p / 4),
                    low_side: rng.gen_bool(0.5),
                }
            } else {
                let w = rng.gen_range(min_side..=p);
                let h = rng.gen_range(min_side..=p);
                DefectKind::Rect {
                    x: rng.gen_range(0..=p - w),
                    y: rng.gen_range(0..=p - h),
                    w,
                    h,
                }
            };
            let level = if ambiguity > 0.0 && rng.gen_bool(ambiguity.min(1.0)) {
                rng.gen_range(1.15..1.45)
            } else {
                rng.gen_range(0.05..0.35)
            };
            defects.push(CellDefect { row, col, kind, level });
        }
    }
    defects
}

/// Renders a module image: per-cell base luminance, dark busbars and cell
/// borders, defect regions scaled by their level, then sensor noise.
pub fn render_module(
    ty: &ModuleType,
    cell_px: usize,
    defects: &[CellDefect],
    noise_sigma: f64,
    rng: &mut impl Rng,
) -> Vec<u16> {
    let p = cell_px;
    let (h, w) = (ty.rows * p, ty.cols * p);
    let mut img = vec![0.0f64; h * w];

    for row in 0..ty.rows {
        for col in 0..ty.cols {
            let base = rng.gen_range(0.55..0.95) * FULL_SCALE as f64;
            let (oy, ox) = (row * p, col * p);
            for y in 0..p {
                for x in 0..p {
                    img[(oy + y) * w + ox + x] = base;
                }
            }
            // Three busbars, evenly spaced, lossless but dark.
            let bb_w = (p / 16).max(1);
            for b in 1..=3 {
                let cx = b * p / 4;
                for y in 0..p {
                    for x in cx.saturating_sub(bb_w / 2)..(cx + bb_w.div_ceil(2)).min(p) {
                        img[(oy + y) * w + ox + x] *= 0.45;
                    }
                }
            }
            // One-pixel inter-cell gap.
            for y in 0..p {
                for x in 0..p {
                    if y == 0 || y == p - 1 || x == 0 || x == p - 1 {
                        img[(oy + y) * w + ox + x] *= 0.25;
                    }
                }
            }
        }
    }

    for d in defects {
        let (oy, ox) = (d.row * p, d.col * p);
        let (x0, x1, y0, y1) = match d.kind {
            DefectKind::Rect { x, y, w, h } => (x, x + w, y, y + h),
            DefectKind::Split { vertical: true, at, low_side } => {
                if low_side {
                    (0, at, 0, p)
                } else {
                    (at, p, 0, p)
                }
            }
            DefectKind::Split { vertical: false, at, low_side } => {
                if low_side {
                    (0, p, 0, at)
                } else {
                    (0, p, at, p)
                }
            }
        };
        for y in y0..y1 {
            for x in x0..x1 {
                img[(oy + y) * w + ox + x] *= d.level;
            }
        }
    }

    let noise = Normal::new(0.0, (noise_sigma * FULL_SCALE as f64).max(f64::MIN_POSITIVE))
        .expect("sigma is finite");
    img.iter()
        .map(|&v| {
            let n = if noise_sigma > 0.0 { noise.sample(rng) } else { 0.0 };
            (v + n).round().clamp(0.0, FULL_SCALE as f64) as u16
        })
        .collect()
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15))
}

/// Generates the truth and image for sample `index` of the configured
/// stream. Fully determined by `(cfg.seed, index)`.
pub fn draw_sample(cfg: &SynthConfig, index: usize) -> Result<(SampleTruth, Vec<u16>)> {
    cfg.validate()?;
    let ty = cfg.module_types[index % cfg.module_types.len()].clone();
    let mut rng = sample_rng(cfg.seed, index);
    let severity = if cfg.defect_density > 0.0 {
        rng.gen_range(0.0..cfg.defect_density)
    } else {
        0.0
    };
    let defects = sample_defects(&ty, cfg.cell_px, severity, cfg.intensity_ambiguity, &mut rng);
    let img = render_module(&ty, cfg.cell_px, &defects, cfg.noise_sigma, &mut rng);

    let mut fractions = vec![0.0; ty.cells()];
    for d in &defects {
        fractions[d.row * ty.cols + d.col] = d.kind.inactive_fraction(cfg.cell_px);
    }
    let y = 1.0 - fractions.iter().sum::<f64>() / ty.cells() as f64;
    let truth = SampleTruth {
        index,
        p_mpp_wp: y * ty.p_nom_wp,
        module: ty,
        defects,
        cell_fractions: fractions,
        y,
    };
    Ok((truth, img))
}

/// Per-cell ground truth row as stored in `cells.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTruthRow {
    pub sample: usize,
    pub row: usize,
    pub col: usize,
    pub inactive_fraction: f64,
    pub loss_wp: f64,
}

/// Writes a complete dataset under `out_dir`: `images/`, `manifest.csv`
/// and `cells.csv` with the per-cell truth.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<Manifest> {
    cfg.validate()?;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;

    let cells_path = out_dir.join("cells.csv");
    let mut cells = csv::Writer::from_path(&cells_path)
        .map_err(|source| Error::Csv { path: cells_path.clone(), source })?;
    let wrap = |source| Error::Csv { path: cells_path.clone(), source };
    cells
        .write_record(["sample", "row", "col", "inactive_fraction", "loss_wp"])
        .map_err(wrap)?;

    let mut entries = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let (truth, img) = draw_sample(cfg, index)?;
        let rel = format!("images/sample_{index:05}.png");
        let (h, w) = (truth.module.rows * cfg.cell_px, truth.module.cols * cfg.cell_px);
        save_png16(&out_dir.join(&rel), h, w, &img)?;
        for row in 0..truth.module.rows {
            for col in 0..truth.module.cols {
                cells
                    .write_record([
                        index.to_string(),
                        row.to_string(),
                        col.to_string(),
                        truth.cell_fractions[row * truth.module.cols + col].to_string(),
                        truth.cell_loss_wp(row, col).to_string(),
                    ])
                    .map_err(wrap)?;
            }
        }
        entries.push(ManifestEntry {
            path: rel,
            y: truth.y,
            p_nom_wp: truth.module.p_nom_wp,
            p_mpp_wp: truth.p_mpp_wp,
            module_type: truth.module.name.clone(),
            rows: truth.module.rows,
            cols: truth.module.cols,
        });
    }
    cells.flush().map_err(|e| Error::io(&cells_path, e))?;
    let manifest_path = out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &entries)?;
    Ok(Manifest { dir: out_dir.to_path_buf(), entries })
}

/// Reads `cells.csv` back, grouped per sample as row-major loss grids.
pub fn load_cell_truth(path: &Path) -> Result<Vec<CellTruthRow>> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    let mut rows = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|source| Error::Csv { path: path.into(), source })?;
        let ctx = |what: &str| Error::Data(format!("{}: row {}: {what}", path.display(), i + 2));
        if rec.len() != 5 {
            return Err(ctx("expected 5 fields"));
        }
        let get = |j: usize| rec.get(j).unwrap_or("");
        rows.push(CellTruthRow {
            sample: get(0).parse().map_err(|_| ctx("bad sample index"))?,
            row: get(1).parse().map_err(|_| ctx("bad row"))?,
            col: get(2).parse().map_err(|_| ctx("bad col"))?,
            inactive_fraction: get(3).parse().map_err(|_| ctx("bad fraction"))?,
            loss_wp: get(4).parse().map_err(|_| ctx("bad loss"))?,
        });
    }
    Ok(rows)
}
