//! Cross-validation and evaluation metrics.
//!
//! Three stratified folds; each fold's model trains on the other two and
//! predicts its own samples, so every sample receives exactly one held-out
//! prediction and the joined set is scored as a whole. Final predictions run
//! per sample at the sample's native cell-aligned resolution, which the
//! fully convolutional trunk supports regardless of the training input
//! size.
//!
//! The mean predictor (always answer the training-set average) is the
//! reference every variant is compared against: any model worth running has
//! to beat it by a wide margin.

use crate::data::{FoldSplit, LoadedDataset, NormStats};
use crate::error::{Error, Result};
use crate::model::{HeadKind, ModelSpec, ParamSet};
use crate::tensor::{Element, Tape};
use crate::train::{mix, predict, train_model, TrainConfig, TrainReport};
use std::path::Path;

/// One held-out prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct PredRow {
    pub index: usize,
    pub fold: usize,
    pub y_true: f64,
    pub y_pred: f64,
    pub p_nom_wp: f64,
    pub module_type: String,
}

impl PredRow {
    pub fn err_rel(&self) -> f64 {
        (self.y_pred - self.y_true).abs()
    }

    pub fn err_wp(&self) -> f64 {
        self.err_rel() * self.p_nom_wp
    }
}

/// Everything a cross-validation run produces.
#[derive(Debug, Clone)]
pub struct CvOutcome {
    /// Joined held-out predictions, in dataset order.
    pub rows: Vec<PredRow>,
    /// Per-dataset-index loss map `(values, (mh, mw))` from the fold that
    /// held the sample out; present only for the map head.
    pub maps: Vec<Option<(Vec<f64>, (usize, usize))>>,
    /// Mean-predictor predictions on the identical splits.
    pub baseline: Vec<PredRow>,
    pub fold_reports: Vec<TrainReport>,
    pub split: FoldSplit,
}

pub fn mae(errs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in errs {
        sum += e.abs();
        n += 1;
    }
    sum / n.max(1) as f64
}

pub fn rmse(errs: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0;
    let mut n = 0usize;
    for e in errs {
        sum += e * e;
        n += 1;
    }
    (sum / n.max(1) as f64).sqrt()
}

/// Predicts one sample at its own cell-aligned resolution, returning the
/// estimate and, for the map head, the loss map.
pub fn predict_native<T: Element>(
    spec: &ModelSpec,
    set: &ParamSet<T>,
    data: &LoadedDataset,
    index: usize,
    norm: NormStats,
) -> Result<(f64, Option<(Vec<f64>, (usize, usize))>)> {
    let mut native = spec.clone();
    native.in_hw = data.hws[index];
    let mut tape = Tape::new();
    tape.set_grad_enabled(false);
    let ids = set.bind(&mut tape)?;
    let img: Vec<T> = data.images[index].iter().map(|&v| T::from_f64(norm.apply(v))).collect();
    let x = tape.leaf(img, &[1, 1, native.in_hw.0, native.in_hw.1], false)?;
    let mut buffers = set.buffers.clone();
    let out = native.forward(&mut tape, &ids, &mut buffers, x, false)?;
    let y = tape.data(out.y_hat)[0].to_f64();
    let map = out.map.map(|m| {
        let s = tape.shape(m);
        let hw = (s[2], s[3]);
        (tape.data(m).iter().map(|v| v.to_f64()).collect(), hw)
    });
    Ok((y, map))
}

/// Runs stratified three-fold cross-validation from scratch: fold split,
/// per-fold normalization, three trainings, native held-out predictions,
/// and the mean-predictor baseline on the same splits.
pub fn run_cross_validation<T: Element>(
    spec: &ModelSpec,
    data: &LoadedDataset,
    cfg: &TrainConfig,
    stats_over_all: bool,
) -> Result<CvOutcome> {
    let split = FoldSplit::new(data, stats_over_all)?;
    let mut rows: Vec<Option<PredRow>> = vec![None; data.len()];
    let mut maps: Vec<Option<(Vec<f64>, (usize, usize))>> = vec![None; data.len()];
    let mut fold_reports = Vec::with_capacity(3);

    for fold in 0..3 {
        let train_idx: Vec<usize> =
            (0..data.len()).filter(|&i| split.fold_of[i] != fold).collect();
        let val_idx: Vec<usize> =
            (0..data.len()).filter(|&i| split.fold_of[i] == fold).collect();
        let norm = split.stats[fold];
        let mut set: ParamSet<T> = spec.init_params(mix(cfg.seed, 101, fold as u64));
        let report = train_model(spec, &mut set, data, &train_idx, &val_idx, cfg, norm)?;
        fold_reports.push(report);
        for &i in &val_idx {
            let (y_pred, map) = predict_native(spec, &set, data, i, norm)?;
            let e = &data.entries[i];
            rows[i] = Some(PredRow {
                index: i,
                fold,
                y_true: e.y,
                y_pred,
                p_nom_wp: e.p_nom_wp,
                module_type: e.module_type.clone(),
            });
            maps[i] = map;
        }
    }

    let rows = rows
        .into_iter()
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| Error::Data("a sample was never held out".into()))?;
    let baseline = mean_predictor_rows(data, &split.fold_of);
    Ok(CvOutcome { rows, maps, baseline, fold_reports, split })
}

/// Holds the model to the same protocol, minus the model: each fold's
/// prediction is the mean target of the other two folds.
pub fn mean_predictor_rows(data: &LoadedDataset, folds: &[usize]) -> Vec<PredRow> {
    let mut rows = Vec::with_capacity(data.len());
    for fold in 0..3 {
        let train_mean = {
            let ys: Vec<f64> = (0..data.len())
                .filter(|&i| folds[i] != fold)
                .map(|i| data.entries[i].y)
                .collect();
            ys.iter().sum::<f64>() / ys.len().max(1) as f64
        };
        for i in (0..data.len()).filter(|&i| folds[i] == fold) {
            let e = &data.entries[i];
            rows.push(PredRow {
                index: i,
                fold,
                y_true: e.y,
                y_pred: train_mean,
                p_nom_wp: e.p_nom_wp,
                module_type: e.module_type.clone(),
            });
        }
    }
    rows.sort_by_key(|r| r.index);
    rows
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantSummary {
    pub variant: String,
    pub mae_pct: f64,
    pub mae_std_pct: f64,
    pub mae_wp: f64,
    pub mae_std_wp: f64,
    pub rmse_pct: f64,
    pub rmse_wp: f64,
}

/// Joined metrics plus the spread of the per-fold means (sample standard
/// deviation across the three folds).
pub fn summarize(variant: &str, rows: &[PredRow]) -> VariantSummary {
    let fold_maes = |f: &dyn Fn(&PredRow) -> f64| -> Vec<f64> {
        (0..3)
            .map(|fold| mae(rows.iter().filter(|r| r.fold == fold).map(|r| f(r))))
            .collect()
    };
    let std = |vals: &[f64]| -> f64 {
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
    };
    let rel = fold_maes(&|r: &PredRow| r.err_rel());
    let wp = fold_maes(&|r: &PredRow| r.err_wp());
    VariantSummary {
        variant: variant.to_string(),
        mae_pct: mae(rows.iter().map(|r| r.err_rel())) * 100.0,
        mae_std_pct: std(&rel) * 100.0,
        mae_wp: mae(rows.iter().map(|r| r.err_wp())),
        mae_std_wp: std(&wp),
        rmse_pct: rmse(rows.iter().map(|r| r.err_rel())) * 100.0,
        rmse_wp: rmse(rows.iter().map(|r| r.err_wp())),
    }
}

pub fn write_summary(path: &Path, summaries: &[VariantSummary]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    let wrap = |source| Error::Csv { path: path.into(), source };
    w.write_record(["variant", "mae_pct", "mae_std_pct", "mae_wp", "mae_std_wp", "rmse_pct", "rmse_wp"])
        .map_err(wrap)?;
    for s in summaries {
        w.write_record([
            s.variant.clone(),
            s.mae_pct.to_string(),
            s.mae_std_pct.to_string(),
            s.mae_wp.to_string(),
            s.mae_std_wp.to_string(),
            s.rmse_pct.to_string(),
            s.rmse_wp.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|source| Error::io(path, source))
}

/// Per-sample scatter data in watt-peak, with a flag for points outside the
/// +-15 Wp band.
pub fn write_scatter(path: &Path, rows: &[PredRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|source| Error::Csv { path: path.into(), source })?;
    let wrap = |source| Error::Csv { path: path.into(), source };
    w.write_record(["p_mpp_true_wp", "p_mpp_pred_wp", "module_type", "fold", "outside_15wp"])
        .map_err(wrap)?;
    for r in rows {
        let t = r.y_true * r.p_nom_wp;
        let p = r.y_pred * r.p_nom_wp;
        w.write_record([
            t.to_string(),
            p.to_string(),
            r.module_type.clone(),
            r.fold.to_string(),
            if (p - t).abs() > 15.0 { "1" } else { "0" }.to_string(),
        ])
        .map_err(wrap)?;
    }
    w.flush().map_err(|source| Error::io(path, source))
}

/// Head variant names used in reports.
pub fn variant_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::EmbeddingLinear => "embedding_linear",
        HeadKind::RegressionMap => "regression_map",
    }
}

/// Joined MAE of a trained model on `idx`, at the common model input size.
pub fn quick_mae<T: Element>(
    spec: &ModelSpec,
    set: &ParamSet<T>,
    data: &LoadedDataset,
    idx: &[usize],
    norm: NormStats,
) -> Result<f64> {
    let preds = predict(spec, set, data, idx, 8, norm)?;
    Ok(mae(idx.iter().zip(&preds).map(|(&i, &p)| p - data.entries[i].y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ManifestEntry;

    fn rows_from(errs: &[(usize, f64, f64, f64)]) -> Vec<PredRow> {
        errs.iter()
            .map(|&(fold, y_true, y_pred, p_nom)| PredRow {
                index: 0,
                fold,
                y_true,
                y_pred,
                p_nom_wp: p_nom,
                module_type: "A".into(),
            })
            .collect()
    }

    #[test]
    fn metrics_match_hand_values() {
        assert!((mae([1.0, -3.0]) - 2.0).abs() < 1e-12);
        assert!((rmse([3.0, 4.0]) - (12.5f64).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn summary_converts_units_and_spreads_folds() {
        let rows = rows_from(&[
            (0, 0.9, 0.92, 200.0),
            (1, 0.8, 0.77, 200.0),
            (2, 0.7, 0.71, 200.0),
        ]);
        let s = summarize("t", &rows);
        assert!((s.mae_pct - 2.0).abs() < 1e-9); // mean(0.02, 0.03, 0.01) * 100
        assert!((s.mae_wp - 4.0).abs() < 1e-9);
        let fold_maes = [0.02, 0.03, 0.01];
        let m: f64 = fold_maes.iter().sum::<f64>() / 3.0;
        let sd = (fold_maes.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / 2.0).sqrt();
        assert!((s.mae_std_pct - sd * 100.0).abs() < 1e-9);
    }

    #[test]
    fn mean_predictor_uses_other_folds_only() {
        let entries: Vec<ManifestEntry> = [0.2, 0.4, 0.9]
            .iter()
            .map(|&y| ManifestEntry {
                path: String::new(),
                y,
                p_nom_wp: 100.0,
                p_mpp_wp: y * 100.0,
                module_type: "A".into(),
                rows: 6,
                cols: 10,
            })
            .collect();
        let data = LoadedDataset {
            entries,
            images: vec![vec![]; 3],
            hws: vec![(192, 320); 3],
        };
        let rows = mean_predictor_rows(&data, &[0, 1, 2]);
        assert!((rows[0].y_pred - 0.65).abs() < 1e-12); // mean of 0.4, 0.9
        assert!((rows[1].y_pred - 0.55).abs() < 1e-12);
        assert!((rows[2].y_pred - 0.30).abs() < 1e-12);
    }
}
