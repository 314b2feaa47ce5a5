//! Dataset manifest and image preprocessing.
//!
//! A dataset is a directory with a `manifest.csv` describing every sample
//! and the image files it points to. The preprocessing chain mirrors what
//! the model expects: crop to the module content box, resize to a
//! cell-aligned resolution, then shift and scale by dataset-level intensity
//! statistics so the whole corpus sits at zero mean and unit variance.
//! Absolute brightness carries signal here, so the statistics are fitted
//! once (per training portion by default) rather than per image.
//!
//! Fold assignment for cross-validation is stratified on the target value
//! so each fold sees the full damage range.

use crate::error::{Error, Result};
use crate::imgio;
use crate::model::MAP_STRIDE;
use rand::Rng;
use std::path::{Path, PathBuf};

pub const MANIFEST_HEADER: [&str; 7] =
    ["path", "y", "p_nom_wp", "p_mpp_wp", "module_type", "rows", "cols"];

/// One labelled sample: an image path plus module identity and power truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    /// Image location, relative to the manifest's directory.
    pub path: String,
    /// Relative power at the maximum power point, `p_mpp / p_nom`.
    pub y: f64,
    pub p_nom_wp: f64,
    pub p_mpp_wp: f64,
    pub module_type: String,
    pub rows: usize,
    pub cols: usize,
}

impl ManifestEntry {
    /// Input resolution at which one head-map pixel covers exactly one cell.
    pub fn cell_aligned_hw(&self) -> (usize, usize) {
        (self.rows * MAP_STRIDE, self.cols * MAP_STRIDE)
    }
}

/// A loaded manifest, remembering its directory so entry paths resolve.
#[derive(Debug, Clone)]
pub struct Manifest {
    pub dir: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn image_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.dir.join(&entry.path)
    }
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    let wrap = |source| Error::Csv { path: path.into(), source };
    w.write_record(MANIFEST_HEADER).map_err(wrap)?;
    for e in entries {
        w.write_record([
            e.path.as_str(),
            &e.y.to_string(),
            &e.p_nom_wp.to_string(),
            &e.p_mpp_wp.to_string(),
            e.module_type.as_str(),
            &e.rows.to_string(),
            &e.cols.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|source| Error::io(path, source))
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let mut rdr = csv::Reader::from_path(path)
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    let head = rdr
        .headers()
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    if head != MANIFEST_HEADER.as_slice() {
        return Err(Error::Data(format!(
            "{}: expected header {:?}, got {:?}",
            path.display(),
            MANIFEST_HEADER.join(","),
            head
        )));
    }
    let mut entries = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 2; // 1-based, after the header line
        let rec = rec.map_err(|source| Error::Csv { path: path.into(), source })?;
        let ctx = |what: &str| {
            Error::Data(format!("{}: row {row}: {what}", path.display()))
        };
        if rec.len() != MANIFEST_HEADER.len() {
            return Err(ctx(&format!("expected {} fields, got {}", MANIFEST_HEADER.len(), rec.len())));
        }
        let field = |idx: usize| rec.get(idx).unwrap_or("");
        let num = |idx: usize| -> Result<f64> {
            field(idx)
                .parse::<f64>()
                .map_err(|_| ctx(&format!("bad number {:?} in {}", field(idx), MANIFEST_HEADER[idx])))
        };
        let int = |idx: usize| -> Result<usize> {
            field(idx)
                .parse::<usize>()
                .map_err(|_| ctx(&format!("bad count {:?} in {}", field(idx), MANIFEST_HEADER[idx])))
        };
        let e = ManifestEntry {
            path: field(0).to_string(),
            y: num(1)?,
            p_nom_wp: num(2)?,
            p_mpp_wp: num(3)?,
            module_type: field(4).to_string(),
            rows: int(5)?,
            cols: int(6)?,
        };
        if e.path.is_empty() {
            return Err(ctx("empty image path"));
        }
        if !(0.0..=1.0).contains(&e.y) {
            return Err(ctx(&format!("relative power {} outside [0, 1]", e.y)));
        }
        if !(e.p_nom_wp > 0.0) {
            return Err(ctx(&format!("nominal power {} must be positive", e.p_nom_wp)));
        }
        if e.rows == 0 || e.cols == 0 {
            return Err(ctx("zero cell grid"));
        }
        if (e.y * e.p_nom_wp - e.p_mpp_wp).abs() > 1e-6 * e.p_nom_wp {
            return Err(ctx(&format!(
                "inconsistent power: y * p_nom = {} but p_mpp = {}",
                e.y * e.p_nom_wp,
                e.p_mpp_wp
            )));
        }
        entries.push(e);
    }
    let dir = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    Ok(Manifest { dir, entries })
}

/// Tight bounds of the module against a dark background: all rows and
/// columns holding at least one pixel above 2% of the image maximum.
/// Returns `(r0, r1, c0, c1)`, half open.
pub fn content_box(img: &[u16], h: usize, w: usize) -> Result<(usize, usize, usize, usize)> {
    debug_assert_eq!(img.len(), h * w);
    let max = img.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Data("content box: image is entirely black".into()));
    }
    let thr = (0.02 * max as f64) as u16;
    let lit = |v: u16| v > thr;
    let r0 = (0..h).find(|&r| img[r * w..(r + 1) * w].iter().any(|&v| lit(v)));
    let r1 = (0..h).rfind(|&r| img[r * w..(r + 1) * w].iter().any(|&v| lit(v)));
    let c0 = (0..w).find(|&c| (0..h).any(|r| lit(img[r * w + c])));
    let c1 = (0..w).rfind(|&c| (0..h).any(|r| lit(img[r * w + c])));
    match (r0, r1, c0, c1) {
        (Some(r0), Some(r1), Some(c0), Some(c1)) => Ok((r0, r1 + 1, c0, c1 + 1)),
        _ => Err(Error::Data("content box: no pixel above threshold".into())),
    }
}

pub fn crop(img: &[u16], w: usize, bx: (usize, usize, usize, usize)) -> (Vec<u16>, usize, usize) {
    let (r0, r1, c0, c1) = bx;
    let (ch, cw) = (r1 - r0, c1 - c0);
    let mut out = Vec::with_capacity(ch * cw);
    for r in r0..r1 {
        out.extend_from_slice(&img[r * w + c0..r * w + c1]);
    }
    (out, ch, cw)
}

/// Bilinear resize with the pixel-center convention; resizing to the same
/// size reproduces the input exactly.
pub fn resize_bilinear(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    debug_assert_eq!(src.len(), h * w);
    let mut out = vec![0.0; oh * ow];
    let sy = h as f64 / oh as f64;
    let sx = w as f64 / ow as f64;
    for dy in 0..oh {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for dx in 0..ow {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - wx) + src[y0 * w + x1] * wx;
            let bot = src[y1 * w + x0] * (1.0 - wx) + src[y1 * w + x1] * wx;
            out[dy * ow + dx] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// Intensity statistics fitted on a set of images, applied as
/// `(x - mu) / sigma` to every pixel fed to the model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mu: f64,
    pub sigma: f64,
}

impl NormStats {
    /// Pass-through stats, useful for tests exercising raw values.
    pub const IDENTITY: NormStats = NormStats { mu: 0.0, sigma: 1.0 };

    #[inline]
    pub fn apply(&self, v: f64) -> f64 {
        (v - self.mu) / self.sigma
    }
}

/// Mean and population standard deviation of every pixel across `images`.
/// A constant set has no contrast to learn from and is rejected.
pub fn fit_normalization(images: &[&[f64]]) -> Result<NormStats> {
    let n: usize = images.iter().map(|img| img.len()).sum();
    if n == 0 {
        return Err(Error::Data("fit_normalization: no pixels".into()));
    }
    let inv_n = 1.0 / n as f64;
    let mu = images.iter().flat_map(|img| img.iter()).sum::<f64>() * inv_n;
    let var = images
        .iter()
        .flat_map(|img| img.iter())
        .map(|&v| (v - mu) * (v - mu))
        .sum::<f64>()
        * inv_n;
    if var <= 0.0 || !var.is_finite() {
        return Err(Error::Data(format!(
            "fit_normalization: degenerate intensity distribution (variance {var})"
        )));
    }
    Ok(NormStats { mu, sigma: var.sqrt() })
}

/// Applies `stats` to an image in place.
pub fn normalize(img: &mut [f64], stats: NormStats) {
    for v in img.iter_mut() {
        *v = stats.apply(*v);
    }
}

/// Inference-side geometry pipeline: load, crop to content, resize to
/// `out_hw`. Intensity normalization is a separate step because its
/// statistics come from the training run, not from the image itself.
pub fn preprocess_image(path: &Path, out_hw: (usize, usize)) -> Result<Vec<f64>> {
    let (h, w, raw) = imgio::load_gray16(path)?;
    let bx = content_box(&raw, h, w)?;
    let (cropped, ch, cw) = crop(&raw, w, bx);
    let as_f64: Vec<f64> = cropped.iter().map(|&v| v as f64 / u16::MAX as f64).collect();
    if (ch, cw) == out_hw {
        Ok(as_f64)
    } else {
        Ok(resize_bilinear(&as_f64, ch, cw, out_hw.0, out_hw.1))
    }
}

/// Pastes `img` centered on a `(th, tw)` canvas of zeros (the dataset mean
/// after normalization). Used when one batch mixes module geometries.
pub fn letterbox(img: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Result<Vec<f64>> {
    if th < h || tw < w {
        return Err(Error::invalid(
            "letterbox",
            format!("target {th}x{tw} smaller than image {h}x{w}"),
        ));
    }
    let (dy, dx) = ((th - h) / 2, (tw - w) / 2);
    let mut out = vec![0.0; th * tw];
    for r in 0..h {
        out[(r + dy) * tw + dx..(r + dy) * tw + dx + w].copy_from_slice(&img[r * w..(r + 1) * w]);
    }
    Ok(out)
}

/// Training-time geometric jitter: optional flips plus a small rotation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub angle_deg: f64,
}

impl AugmentDraw {
    pub const IDENTITY: AugmentDraw = AugmentDraw {
        flip_h: false,
        flip_v: false,
        angle_deg: 0.0,
    };
}

pub fn sample_augment_draw(rng: &mut impl Rng, max_angle_deg: f64) -> AugmentDraw {
    AugmentDraw {
        flip_h: rng.gen_bool(0.5),
        flip_v: rng.gen_bool(0.5),
        angle_deg: if max_angle_deg > 0.0 {
            rng.gen_range(-max_angle_deg..max_angle_deg)
        } else {
            0.0
        },
    }
}

/// Applies `draw` to a normalized image: flips first, then rotation about
/// the center with border replication.
pub fn apply_augment(img: &[f64], h: usize, w: usize, draw: &AugmentDraw) -> Vec<f64> {
    debug_assert_eq!(img.len(), h * w);
    if *draw == AugmentDraw::IDENTITY {
        return img.to_vec();
    }
    let mut cur = img.to_vec();
    if draw.flip_h {
        for r in 0..h {
            cur[r * w..(r + 1) * w].reverse();
        }
    }
    if draw.flip_v {
        for r in 0..h / 2 {
            let (a, b) = cur.split_at_mut((h - 1 - r) * w);
            a[r * w..r * w + w].swap_with_slice(&mut b[..w]);
        }
    }
    if draw.angle_deg == 0.0 {
        return cur;
    }
    let th = draw.angle_deg.to_radians();
    let (cos, sin) = (th.cos(), th.sin());
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = vec![0.0; h * w];
    for dy in 0..h {
        for dx in 0..w {
            // Inverse-rotate the destination pixel into source space.
            let ry = dy as f64 - cy;
            let rx = dx as f64 - cx;
            let sy = (cos * ry + sin * rx + cy).clamp(0.0, (h - 1) as f64);
            let sx = (-sin * ry + cos * rx + cx).clamp(0.0, (w - 1) as f64);
            let y0 = sy.floor() as usize;
            let x0 = sx.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let x1 = (x0 + 1).min(w - 1);
            let (wy, wx) = (sy - y0 as f64, sx - x0 as f64);
            let top = cur[y0 * w + x0] * (1.0 - wx) + cur[y0 * w + x1] * wx;
            let bot = cur[y1 * w + x0] * (1.0 - wx) + cur[y1 * w + x1] * wx;
            out[dy * w + dx] = top * (1.0 - wy) + bot * wy;
        }
    }
    out
}

/// A dataset preprocessed into memory: every image cropped and resized to
/// its cell-aligned resolution, ready to normalize and batch. Pixel values
/// stay raw so normalization statistics can be fitted on any subset.
#[derive(Debug, Clone)]
pub struct LoadedDataset {
    pub entries: Vec<ManifestEntry>,
    pub images: Vec<Vec<f64>>,
    pub hws: Vec<(usize, usize)>,
}

impl LoadedDataset {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Smallest input size that fits every listed sample; this is what a
    /// model trained on `idx` must use. Returns an error on an empty set.
    pub fn required_hw(&self, idx: &[usize]) -> Result<(usize, usize)> {
        idx.iter()
            .map(|&i| self.hws[i])
            .reduce(|a, b| (a.0.max(b.0), a.1.max(b.1)))
            .ok_or_else(|| Error::Data("no samples selected".into()))
    }

    /// Intensity statistics over the samples listed in `idx`.
    pub fn fit_normalization(&self, idx: &[usize]) -> Result<NormStats> {
        let imgs: Vec<&[f64]> = idx.iter().map(|&i| self.images[i].as_slice()).collect();
        fit_normalization(&imgs)
    }
}

/// Loads and preprocesses every manifest entry.
pub fn load_dataset(manifest: &Manifest) -> Result<LoadedDataset> {
    let mut images = Vec::with_capacity(manifest.entries.len());
    let mut hws = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let hw = e.cell_aligned_hw();
        images.push(preprocess_image(&manifest.image_path(e), hw)?);
        hws.push(hw);
    }
    Ok(LoadedDataset { entries: manifest.entries.clone(), images, hws })
}

/// Assigns each sample to one of three folds, stratified on `ys`: samples
/// are ranked by target (manifest order breaking ties) and each consecutive
/// rank-triple is dealt across the folds, rotating which fold receives the
/// low member so no fold systematically skews low or high.
pub fn stratified_three_fold(ys: &[f64]) -> Result<Vec<usize>> {
    let n = ys.len();
    if n < 3 {
        return Err(Error::Data(format!(
            "cross-validation needs at least 3 samples, got {n}"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| ys[a].total_cmp(&ys[b]).then(a.cmp(&b)));
    let mut folds = vec![0usize; n];
    let mut counts = [0usize; 3];
    for (k, triple) in order.chunks(3).enumerate() {
        if triple.len() == 3 {
            for (j, &idx) in triple.iter().enumerate() {
                let fold = (k + j) % 3;
                folds[idx] = fold;
                counts[fold] += 1;
            }
        } else {
            // Remainder keeps fold sizes within one of each other.
            for &idx in triple {
                let fold = (0..3).min_by_key(|&f| (counts[f], f)).unwrap();
                folds[idx] = fold;
                counts[fold] += 1;
            }
        }
    }
    Ok(folds)
}

/// A complete cross-validation split: fold membership plus the intensity
/// statistics each fold's model trains and predicts with.
#[derive(Debug, Clone)]
pub struct FoldSplit {
    /// Fold index (0..3) per sample.
    pub fold_of: Vec<usize>,
    /// `stats[f]` is fitted on the samples outside fold `f`, i.e. on what
    /// the fold-`f` model trains on. With `stats_over_all` every entry is
    /// fitted on the whole dataset instead.
    pub stats: [NormStats; 3],
}

impl FoldSplit {
    /// Stratifies `data` and fits per-fold normalization. `stats_over_all`
    /// trades strict train/test separation for a single corpus-wide fit.
    pub fn new(data: &LoadedDataset, stats_over_all: bool) -> Result<FoldSplit> {
        let ys: Vec<f64> = data.entries.iter().map(|e| e.y).collect();
        let fold_of = stratified_three_fold(&ys)?;
        let all: Vec<usize> = (0..data.len()).collect();
        let mut stats = [NormStats::IDENTITY; 3];
        for (f, slot) in stats.iter_mut().enumerate() {
            let idx: Vec<usize> = if stats_over_all {
                all.clone()
            } else {
                all.iter().copied().filter(|&i| fold_of[i] != f).collect()
            };
            *slot = data.fit_normalization(&idx)?;
        }
        Ok(FoldSplit { fold_of, stats })
    }
}

pub fn write_folds(path: &Path, folds: &[usize]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    let wrap = |source| Error::Csv { path: path.into(), source };
    w.write_record(["index", "fold"]).map_err(wrap)?;
    for (i, f) in folds.iter().enumerate() {
        w.write_record([i.to_string(), f.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|source| Error::io(path, source))
}
