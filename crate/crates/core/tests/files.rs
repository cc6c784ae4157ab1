use quantlab_core::desk::{desk_dataset, desk_model, DeskImages};
use quantlab_core::nn::format::{load_qds, load_qmod, save_qds, save_qmod, sha256_hex};
use quantlab_core::nn::{evaluate, QuantizedModel};
use quantlab_core::schemes::{calibrate, CalibrationRecord, ProbConfig, Scheme, SchemeKind};
use quantlab_core::Granularity;

#[test]
fn saved_model_record_and_data_reproduce_the_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let model = desk_model().unwrap();
    let data = desk_dataset(24, 3, &DeskImages::default()).unwrap();
    save_qmod(&model, dir.path().join("m.qmod")).unwrap();
    save_qds(&data, dir.path().join("d.qds")).unwrap();

    let loaded = load_qmod(dir.path().join("m.qmod")).unwrap();
    assert_eq!(loaded.hash(), model.hash());
    assert_eq!(loaded.hash(), sha256_hex(&std::fs::read(dir.path().join("m.qmod")).unwrap()));
    let loaded_data = load_qds(dir.path().join("d.qds")).unwrap();

    let kind = SchemeKind::default_for(Scheme::Probabilistic, Granularity::PerChannel);
    let record = calibrate(&model, &data.take(16), &kind, Some(&ProbConfig::default())).unwrap();
    record.save(dir.path().join("c.json")).unwrap();
    let reloaded = CalibrationRecord::load(dir.path().join("c.json")).unwrap();
    assert_eq!(reloaded, record);

    let a = evaluate(&QuantizedModel::new(&model, kind, Some(&record), false).unwrap(), &data).unwrap();
    let b = evaluate(&QuantizedModel::new(&loaded, kind, Some(&reloaded), false).unwrap(), &loaded_data).unwrap();
    assert_eq!(a, b);
}
