use lumipower_core::data::{load_dataset, stratified_three_fold};
use lumipower_core::eval::{mean_predictor_rows, mae};
use lumipower_core::model::{HeadKind, ModelSpec, ParamSet};
use lumipower_core::synth::{generate_dataset, ModuleType, SynthConfig};
use lumipower_core::train::{train_model, TrainConfig};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let epochs: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(10);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.01);
    let count: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(60);
    let head = match args.get(4).map(|s| s.as_str()) {
        Some("emb") => HeadKind::EmbeddingLinear,
        _ => HeadKind::RegressionMap,
    };
    let wd: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-4);
    let negation = match args.get(6).map(|s| s.as_str()) {
        Some("abs") => lumipower_core::model::MapNegation::Abs,
        Some("none") => lumipower_core::model::MapNegation::Identity,
        _ => lumipower_core::model::MapNegation::Relu,
    };
    let ambiguity: f64 = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(0.5);
    let augment: bool = args.get(8).map(|s| s != "0").unwrap_or(true);
    let schedule = match args.get(9).map(|s| s.as_str()) {
        Some("cos") => lumipower_core::train::LrSchedule::Cosine,
        _ => lumipower_core::train::LrSchedule::Constant,
    };

    let dir = tempfile::tempdir().unwrap();
    let mut synth = SynthConfig::new(count, 777);
    synth.module_types = ["A", "B", "D", "E", "F"].iter().map(|t| ModuleType::preset(t).unwrap()).collect();
    synth.defect_density = 0.7;
    synth.intensity_ambiguity = ambiguity;
    let t0 = Instant::now();
    let manifest = generate_dataset(&synth, dir.path()).unwrap();
    let data = load_dataset(&manifest).unwrap();
    println!("gen+load {count} samples: {:.1}s", t0.elapsed().as_secs_f64());

    let ys: Vec<f64> = data.entries.iter().map(|e| e.y).collect();
    let folds = stratified_three_fold(&ys, 1).unwrap();
    let base_rows = mean_predictor_rows(&data, &folds);
    let fold0: Vec<usize> = (0..data.len()).filter(|&i| folds[i] == 0).collect();
    let train_idx: Vec<usize> = (0..data.len()).filter(|&i| folds[i] != 0).collect();
    let baseline = mae(base_rows.iter().filter(|r| r.fold == 0).map(|r| r.err_rel()));
    println!("fold0: {} train, {} val, baseline MAE {:.5}", train_idx.len(), fold0.len(), baseline);

    let mut spec = ModelSpec::mini((192, 320), head).unwrap();
    spec.map_negation = negation;
    let mut set: ParamSet<f32> = spec.init_params(42);
    let cfg = TrainConfig {
        epochs,
        lr,
        weight_decay: wd,
        augment,
        lr_schedule: schedule,
        seed: 3,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    let report = train_model(&spec, &mut set, &data, &train_idx, &fold0, &cfg).unwrap();
    for e in &report.epochs {
        println!("epoch {:2}  loss {:.6}  val_mae {:.5}", e.epoch, e.train_loss, e.val_mae.unwrap());
    }
    let train_eval_mae = mae(train_idx.iter().map(|&i| {
        let (p, _) = lumipower_core::eval::predict_native(&spec, &set, &data, i).unwrap();
        (p - data.entries[i].y).abs()
    }));
    println!("train: {:.1}s  ratio vs baseline: {:.3}  train-eval MAE {:.5}",
             t0.elapsed().as_secs_f64(), report.final_val_mae().unwrap() / baseline, train_eval_mae);

    for &i in fold0.iter().take(6) {
        let (y_pred, map) = lumipower_core::eval::predict_native(&spec, &set, &data, i).unwrap();
        let y_true = data.entries[i].y;
        if let Some((vals, _)) = map {
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let nz = vals.iter().filter(|v| **v != 0.0).count();
            println!("val {i:3}  y {y_true:.4}  pred {y_pred:.4}  map[{lo:.5},{hi:.5}] nz {nz}/{}", vals.len());
        } else {
            println!("val {i:3}  y {y_true:.4}  pred {y_pred:.4}");
        }
    }

    if head == HeadKind::RegressionMap {
        use lumipower_core::powermap::{integrate_cells, spearman, CellGrid};
        use lumipower_core::synth::load_cell_truth;
        let truth = load_cell_truth(&dir.path().join("cells.csv")).unwrap();
        let mut rhos = Vec::new();
        for &i in &fold0 {
            let e = &data.entries[i];
            let grid = CellGrid::new(e.rows, e.cols).unwrap();
            let frac: Vec<f64> = truth
                .iter()
                .filter(|r| r.sample == i)
                .map(|r| r.inactive_fraction)
                .collect();
            assert_eq!(frac.len(), grid.cells());
            if frac.iter().filter(|f| **f > 0.0).count() < 3 {
                continue;
            }
            let (_, Some((vals, (mh, mw)))) =
                lumipower_core::eval::predict_native(&spec, &set, &data, i).unwrap()
            else {
                continue;
            };
            let cells = integrate_cells(&vals, mh, mw, grid).unwrap();
            let pred_loss: Vec<f64> = cells.iter().map(|s| -s).collect();
            if let Ok(r) = spearman(&pred_loss, &frac) {
                rhos.push(r);
            } else {
                rhos.push(0.0);
            }
        }
        rhos.sort_by(f64::total_cmp);
        if !rhos.is_empty() {
            println!(
                "spearman over {} modules: median {:.3}  min {:.3}  max {:.3}",
                rhos.len(),
                rhos[rhos.len() / 2],
                rhos[0],
                rhos[rhos.len() - 1]
            );
        }
    }
}
