//! End-to-end checks of the generated dataset: files on disk, manifest
//! validation, per-cell truth bookkeeping, and the preprocessing chain
//! running on real generated images.

use lumipower_core::data::{load_manifest, preprocess_image};
use lumipower_core::imgio::load_gray16;
use lumipower_core::synth::{generate_dataset, load_cell_truth, ModuleType, SynthConfig};

fn small_config() -> SynthConfig {
    let mut cfg = SynthConfig::new(10, 424_242);
    cfg.module_types = vec![
        ModuleType::preset("A").unwrap(),
        ModuleType::preset("C").unwrap(),
    ];
    cfg.cell_px = 16;
    cfg.defect_density = 0.8;
    cfg
}

#[test]
fn generated_dataset_loads_back_consistently() {
    let dir = tempfile::tempdir().unwrap();
    let out = generate_dataset(&small_config(), dir.path()).unwrap();
    assert_eq!(out.entries.len(), 10);

    // The manifest on disk passes every loader validation, including the
    // y * p_nom == p_mpp consistency check.
    let m = load_manifest(&dir.path().join("manifest.csv")).unwrap();
    assert_eq!(m.entries, out.entries);

    // Types alternate A, C, A, C, ... and images have the advertised size.
    for (i, e) in m.entries.iter().enumerate() {
        assert_eq!(e.module_type, if i % 2 == 0 { "A" } else { "C" });
        let (h, w, _) = load_gray16(&m.image_path(e)).unwrap();
        assert_eq!((h, w), (e.rows * 16, e.cols * 16));
    }

    // Per-cell truth sums back to the module-level truth.
    let cells = load_cell_truth(&dir.path().join("cells.csv")).unwrap();
    assert_eq!(
        cells.len(),
        m.entries.iter().map(|e| e.rows * e.cols).sum::<usize>()
    );
    for (i, e) in m.entries.iter().enumerate() {
        let loss: f64 = cells
            .iter()
            .filter(|c| c.sample == i)
            .map(|c| c.loss_wp)
            .sum();
        assert!(
            (e.p_nom_wp - loss - e.p_mpp_wp).abs() < 1e-9,
            "sample {i}: nominal {} - loss {loss} != mpp {}",
            e.p_nom_wp,
            e.p_mpp_wp
        );
    }
}

#[test]
fn generation_is_reproducible_across_runs() {
    let d1 = tempfile::tempdir().unwrap();
    let d2 = tempfile::tempdir().unwrap();
    let m1 = generate_dataset(&small_config(), d1.path()).unwrap();
    let m2 = generate_dataset(&small_config(), d2.path()).unwrap();
    assert_eq!(m1.entries, m2.entries);
    for (a, b) in m1.entries.iter().zip(&m2.entries) {
        let ia = std::fs::read(m1.dir.join(&a.path)).unwrap();
        let ib = std::fs::read(m2.dir.join(&b.path)).unwrap();
        assert_eq!(ia, ib, "{}", a.path);
    }
    assert_eq!(
        std::fs::read(d1.path().join("cells.csv")).unwrap(),
        std::fs::read(d2.path().join("cells.csv")).unwrap()
    );
}

#[test]
fn targets_cover_a_range_of_damage() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.count = 24;
    let m = generate_dataset(&cfg, dir.path()).unwrap();
    let ys: Vec<f64> = m.entries.iter().map(|e| e.y).collect();
    let lo = ys.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = ys.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(lo < 0.92, "least damaged of the batch too healthy: {lo}");
    assert!(hi > 0.95, "most healthy sample still damaged: {hi}");
    assert!(hi <= 1.0);
    assert!(hi - lo > 0.03, "targets too concentrated: [{lo}, {hi}]");
}

#[test]
fn preprocessing_runs_on_generated_images() {
    let dir = tempfile::tempdir().unwrap();
    let m = generate_dataset(&small_config(), dir.path()).unwrap();
    let e = &m.entries[0];
    let target = e.cell_aligned_hw();
    assert_eq!(target, (192, 320));
    let img = preprocess_image(&m.image_path(e), target).unwrap();
    assert_eq!(img.len(), 192 * 320);
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|&v| v * v).sum::<f64>() / n - mean * mean;
    assert!(mean.abs() < 1e-9);
    assert!((var - 1.0).abs() < 1e-9);
}
