use agbmap_core::calibration::{load_samples, write_samples, LabeledSample, RhAgbModel};
use agbmap_core::ingest::{
    load_footprints, load_plots, load_raster, save_plots, write_footprints, write_raster, ColumnMap, GridSpec,
};
use agbmap_core::learners::{self, ForestModel, LearnerKind, Matrix, TrainConfig};
use agbmap_core::stack::{load_stack, save_stack, FeatureStack, NODATA};
use agbmap_core::synth::{make_synthetic_world, true_model, WorldSpec};
use agbmap_core::RasterGrid;

fn grid() -> GridSpec {
    GridSpec {
        origin_x: 400_000.0,
        origin_y: 5_000_000.0,
        pixel_size: 25.0,
        n_rows: 9,
        n_cols: 7,
        crs_id: "EPSG:32651".into(),
    }
}

#[test]
fn footprints_survive_write_and_load() {
    let w = make_synthetic_world(&WorldSpec::tiny(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("fp.csv");
    write_footprints(&p, &w.footprints).unwrap();
    let back = load_footprints(&p, &ColumnMap::default()).unwrap();
    assert!(back.rejects.is_empty());
    assert_eq!(back.records, w.footprints);
}

#[test]
fn plots_survive_write_and_load() {
    let w = make_synthetic_world(&WorldSpec::tiny(), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (p, t) = (dir.path().join("p.csv"), dir.path().join("t.csv"));
    save_plots(&w.plots, &p, &t).unwrap();
    let back = load_plots(&p, &t).unwrap();
    assert_eq!(back.plots, w.plots);
}

#[test]
fn raster_bits_survive_tiff() {
    let g = grid();
    let values: Vec<f32> = (0..g.len())
        .map(|i| if i % 11 == 0 { NODATA } else { i as f32 * 0.37 - 3.0 })
        .collect();
    let r = RasterGrid::new(g, NODATA, values, "test").unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.tif");
    write_raster(&r, &p).unwrap();
    let back = load_raster(&p).unwrap();
    assert!(back.bit_eq(&r));
    assert_eq!(back.grid, r.grid);
}

#[test]
fn stack_survives_save_and_load() {
    let g = grid();
    let layers = (0..3)
        .map(|k| {
            let v = (0..g.len()).map(|i| (i * (k + 1)) as f32).collect();
            (format!("L{k}"), RasterGrid::new(g.clone(), NODATA, v, "x").unwrap())
        })
        .collect();
    let stack = FeatureStack::custom(layers).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let manifest = save_stack(&stack, dir.path()).unwrap();
    let back = load_stack(manifest).unwrap();
    assert_eq!(back.layer_names, stack.layer_names);
    for name in &stack.layer_names {
        assert!(back.layer(name).unwrap().bit_eq(stack.layer(name).unwrap()));
    }
}

#[test]
fn samples_and_models_survive_disk() {
    let dir = tempfile::tempdir().unwrap();
    let names = vec!["a".to_string(), "b".to_string()];
    let samples: Vec<LabeledSample> = (0..60)
        .map(|i| LabeledSample {
            shot_id: format!("s{i}"),
            lat: 45.0 + i as f64 * 1e-4,
            lon: 121.7,
            agb_mg_ha: (i % 13) as f64 * 7.5,
            features: vec![i as f64, ((i * 7) % 5) as f64],
            slope_deg: if i % 2 == 0 { Some(i as f64 * 0.5) } else { None },
        })
        .collect();
    let p = dir.path().join("s.csv");
    write_samples(&p, &samples, &names).unwrap();
    let (back, back_names) = load_samples(&p).unwrap();
    assert_eq!(back, samples);
    assert_eq!(back_names, names);

    let rows: Vec<Vec<f64>> = samples.iter().map(|s| s.features.clone()).collect();
    let y: Vec<f64> = samples.iter().map(|s| s.agb_mg_ha).collect();
    let x = Matrix::from_rows(&rows).unwrap();
    for kind in [LearnerKind::RandomForest, LearnerKind::Gbdt] {
        let cfg = TrainConfig { n_trees: 15, ..TrainConfig::default() };
        let m = learners::train(kind, &x, &y, &names, &cfg).unwrap();
        let mp = dir.path().join(format!("{kind}.json"));
        m.save(&mp).unwrap();
        let back = ForestModel::load(&mp).unwrap();
        assert_eq!(back.to_json().unwrap(), m.to_json().unwrap());
        for r in &rows {
            assert_eq!(back.predict_row(r).to_bits(), m.predict_row(r).to_bits());
        }
    }

    let model = true_model();
    let mp = dir.path().join("rh.json");
    model.save(&mp).unwrap();
    assert_eq!(RhAgbModel::load(&mp).unwrap(), model);
}
