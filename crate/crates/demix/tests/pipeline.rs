//! Whole-pipeline smoke at miniature scale: generate to disk, reload, train,
//! checkpoint round-trip, tiled prediction, evaluation.

use demix::datagen::{load_dataset, save_dataset, CritterParams};
use demix::metrics::evaluate;
use demix::model::{checkpoint, Mode, Model, ModelConfig, Variant};
use demix::tiling::{plan_tiles, predict_tiled, Padding};
use demix::train::{train, validate, TrainConfig};

#[test]
fn generate_train_predict_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let params = CritterParams {
        canvas_size: 64,
        n_join: 9,
        strokes_per_channel: 3,
        stroke_len: 48,
        stroke_width: 2,
        seed: 6,
        ..CritterParams::default()
    };
    save_dataset(dir.path(), &params, 12).unwrap();
    let (data, manifest) = load_dataset(&dir.path().join("manifest.json")).unwrap();
    assert_eq!(data.len(), 12);
    assert_eq!(manifest.split.train_ids.len(), 10);

    let cfg = ModelConfig {
        mode: Mode::Hvae,
        variant: Variant::Lc,
        n_levels: 2,
        n_lc: 1,
        patch_size: 16,
        base_channels: 5,
        res_blocks_per_block: 1,
        z_channels: 3,
        seed: 2,
        deep_bu_scale: true,
    };
    let tcfg = TrainConfig {
        batch_size: 4,
        patch_size: 16,
        max_epochs: 2,
        steps_per_epoch: Some(3),
        seed: 3,
        ..TrainConfig::default()
    };
    let mut model = Model::build(cfg).unwrap();
    let outcome = train(&mut model, &data, &manifest.split, &tcfg, &mut |_| {}).unwrap();
    assert_eq!(outcome.history.len(), 2);

    // checkpoint round-trip reproduces the validation loss bit-exactly
    let ckpt = dir.path().join("model.ckpt");
    checkpoint::save(&ckpt, &model).unwrap();
    let restored = checkpoint::load(&ckpt).unwrap();
    let v1 = validate(&model, &data, &manifest.split.val_ids, &tcfg).unwrap();
    let v2 = validate(&restored, &data, &manifest.split.val_ids, &tcfg).unwrap();
    assert_eq!(v1.to_bits(), v2.to_bits());

    // tiled prediction covers the full image once per strategy
    let item = &data.items[manifest.split.test_ids[0]];
    for (strategy, pad) in [(Padding::Inner, 4), (Padding::Outer, 8), (Padding::None, 0)] {
        let plan = plan_tiles(item.x.dim(), strategy, 16, pad).unwrap();
        let out = predict_tiled(&item.x, &restored, &plan).unwrap();
        assert_eq!(out.mu1.dim(), item.x.dim());
        assert!(out.mu1.iter().all(|v| v.is_finite()));
    }

    let report = evaluate(
        &restored,
        &data,
        &manifest.split.test_ids,
        Padding::Inner,
        4,
    )
    .unwrap();
    assert_eq!(report.rows.len(), manifest.split.test_ids.len());
    assert!(report.mean_psnr().is_finite());
}
