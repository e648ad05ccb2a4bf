use super::*;
use crate::attention::AttentionMode;
use crate::net::macs::{model_macs, TokenCounts};
use crate::tensor::gradcheck::{central_diff_at, max_rel_err};
use crate::tensor::ops::PoolFusion;
use crate::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn grid_map(h: usize, w: usize, bh: usize, bw: usize) -> RegionMap {
    let bx = w.div_ceil(bw);
    let raw: Vec<u32> =
        (0..h * w).map(|p| ((p / w / bh) * bx + (p % w) / bw) as u32).collect();
    RegionMap::from_raw(&raw, w, h).unwrap()
}

fn stage_grid_maps(cfg: &ModelConfig, h: usize, w: usize, block: usize) -> Vec<RegionMap> {
    cfg.stage_dims(h, w)
        .unwrap()
        .iter()
        .map(|&(sh, sw)| grid_map(sh, sw, block.min(sh).max(1), block.min(sw).max(1)))
        .collect()
}

fn micro_config() -> ModelConfig {
    ModelConfig {
        map_blocks: [1, 1, 1, 1],
        opt_blocks: [1, 1, 1, 1],
        map_channels: [2, 4, 6, 8],
        opt_channels: [4, 8, 12, 16],
        patch_strides: [4, 2, 2, 2],
        encoder_heads: [1, 2, 3, 8],
        decoder_heads: [8, 3, 2, 1],
        mlp_ratio: 2,
        n_classes_lcm: 3,
    }
}

fn rand_raster(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Vec<f64> {
    (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()
}

#[test]
fn paper_stage_dims() {
    let cfg = ModelConfig::paper(7);
    let dims = cfg.stage_dims(512, 512).unwrap();
    assert_eq!(dims, [(128, 128), (64, 64), (32, 32), (16, 16)]);
}

#[test]
fn tiny_stage_dims() {
    let cfg = ModelConfig::tiny(7);
    let dims = cfg.stage_dims(64, 64).unwrap();
    assert_eq!(dims, [(16, 16), (8, 8), (4, 4), (2, 2)]);
}

#[test]
fn indivisible_input_is_rejected() {
    let cfg = ModelConfig::tiny(7);
    assert!(cfg.stage_dims(48, 64).is_err());
}

#[test]
fn presets_validate() {
    ModelConfig::paper(7).validate().unwrap();
    ModelConfig::tiny(7).validate().unwrap();
    micro_config().validate().unwrap();
    let mut bad = ModelConfig::paper(7);
    bad.encoder_heads = [3, 2, 5, 8];
    assert!(bad.validate().is_err());
}

#[test]
fn forward_bcd_shape_and_finiteness() {
    let cfg = micro_config();
    let model = ObjFormer::<f64>::new(cfg.clone(), Task::Bcd, 1).unwrap();
    let (h, w) = (32, 32);
    let inst = stage_grid_maps(&cfg, h, w, 4);
    let obj = stage_grid_maps(&cfg, h, w, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut tape = Tape::new();
    let xo = tape.constant(rand_raster(&mut rng, h, w), &[3, h, w]).unwrap();
    let xp = tape.constant(rand_raster(&mut rng, h, w), &[3, h, w]).unwrap();
    let bound = model.bind(&mut tape);
    let logits =
        model.forward_bcd(&mut tape, &bound, xo, xp, &inst, &obj, PoolFusion::Mean).unwrap();
    assert_eq!(tape.shape(logits), &[2, h, w]);
    assert!(tape.data(logits).iter().all(|v| v.is_finite()));
}

#[test]
fn forward_accepts_variable_input_sizes() {
    let cfg = micro_config();
    let model = ObjFormer::<f32>::new(cfg.clone(), Task::Bcd, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for size in [32usize, 64] {
        let inst = stage_grid_maps(&cfg, size, size, 4);
        let obj = stage_grid_maps(&cfg, size, size, 2);
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..3 * size * size).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xo = tape.constant(data.clone(), &[3, size, size]).unwrap();
        let xp = tape.constant(data, &[3, size, size]).unwrap();
        let bound = model.bind(&mut tape);
        let logits =
            model.forward_bcd(&mut tape, &bound, xo, xp, &inst, &obj, PoolFusion::Mean).unwrap();
        assert_eq!(tape.shape(logits), &[2, size, size]);
    }
}

#[test]
fn forward_is_deterministic() {
    let cfg = micro_config();
    let model = ObjFormer::<f32>::new(cfg.clone(), Task::Bcd, 9).unwrap();
    let (h, w) = (32, 32);
    let inst = stage_grid_maps(&cfg, h, w, 4);
    let obj = stage_grid_maps(&cfg, h, w, 2);
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::new();
        let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
        let xo = tape.constant(data.clone(), &[3, h, w]).unwrap();
        let xp = tape.constant(data, &[3, h, w]).unwrap();
        let bound = model.bind(&mut tape);
        let id =
            model.forward_bcd(&mut tape, &bound, xo, xp, &inst, &obj, PoolFusion::Mean).unwrap();
        tape.data(id).to_vec()
    };
    assert_eq!(run(), run());
}

#[test]
fn zeroed_output_projections_keep_forward_finite() {
    let cfg = micro_config();
    let mut model = ObjFormer::<f32>::new(cfg.clone(), Task::Bcd, 5).unwrap();
    let names: Vec<String> = model
        .weights()
        .iter()
        .filter(|(n, _)| n.ends_with(".attn.wo") || n.contains(".cross.wom") || n.contains(".cross.woo"))
        .map(|(n, _)| n.to_string())
        .collect();
    assert!(!names.is_empty());
    for n in names {
        let idx = model.weights().index_of(&n).unwrap();
        model.weights_mut().tensor_mut(idx).data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let (h, w) = (32, 32);
    let inst = stage_grid_maps(&cfg, h, w, 4);
    let obj = stage_grid_maps(&cfg, h, w, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut tape = Tape::new();
    let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let xo = tape.constant(data.clone(), &[3, h, w]).unwrap();
    let xp = tape.constant(data, &[3, h, w]).unwrap();
    let bound = model.bind(&mut tape);
    let logits =
        model.forward_bcd(&mut tape, &bound, xo, xp, &inst, &obj, PoolFusion::Mean).unwrap();
    assert!(tape.data(logits).iter().all(|v| v.is_finite()));
}

#[test]
fn scd_outputs_have_input_resolution() {
    let cfg = micro_config();
    let model = ObjFormer::<f32>::new(cfg.clone(), Task::Scd, 7).unwrap();
    let (h, w) = (32, 32);
    let inst = stage_grid_maps(&cfg, h, w, 4);
    let obj = stage_grid_maps(&cfg, h, w, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut tape = Tape::new();
    let data: Vec<f32> = (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect();
    let xo = tape.constant(data.clone(), &[3, h, w]).unwrap();
    let xp = tape.constant(data, &[3, h, w]).unwrap();
    let bound = model.bind(&mut tape);
    let out =
        model.forward_scd(&mut tape, &bound, xo, xp, &inst, &obj, PoolFusion::Mean).unwrap();
    assert_eq!(tape.shape(out.bcd), &[2, h, w]);
    assert_eq!(tape.shape(out.lcm_osm), &[cfg.n_classes_lcm + 1, h, w]);
    assert_eq!(tape.shape(out.lcm_opt), &[cfg.n_classes_lcm + 1, h, w]);
}

#[test]
fn scd_trunk_shares_bcd_weights() {
    let bcd = ObjFormer::<f32>::new(ModelConfig::tiny(7), Task::Bcd, 11).unwrap();
    let scd = ObjFormer::<f32>::new(ModelConfig::tiny(7), Task::Scd, 11).unwrap();
    // every BCD parameter exists in the SCD variant under the same name
    for (name, t) in bcd.weights().iter() {
        let other = scd.weights().get(name).expect("missing trunk parameter");
        assert_eq!(other.shape(), t.shape());
    }
}

#[test]
fn optical_branch_outweighs_map_branch() {
    let model = ObjFormer::<f32>::new(ModelConfig::paper(7), Task::Bcd, 13).unwrap();
    let sum_prefix = |p: &str| -> usize {
        model.weights().iter().filter(|(n, _)| n.starts_with(p)).map(|(_, t)| t.numel()).sum()
    };
    assert!(sum_prefix("enc.opt") > sum_prefix("enc.map"));
}

#[test]
fn paper_parameter_anchors() {
    let bcd = ObjFormer::<f32>::new(ModelConfig::paper(7), Task::Bcd, 0).unwrap();
    let scd = ObjFormer::<f32>::new(ModelConfig::paper(7), Task::Scd, 0).unwrap();
    let p_bcd = bcd.param_count() as f64;
    let p_scd = scd.param_count() as f64;
    assert!(
        (p_bcd - 28.37e6).abs() <= 0.2 * 28.37e6,
        "paper BCD params {:.2}M outside 28.37M +/- 20%",
        p_bcd / 1e6
    );
    assert!(
        p_scd <= 1.15 * p_bcd,
        "SCD adds {:.1}% parameters",
        100.0 * (p_scd / p_bcd - 1.0)
    );
}

#[test]
fn tiny_preset_is_small() {
    let model = ObjFormer::<f32>::new(ModelConfig::tiny(7), Task::Scd, 0).unwrap();
    assert!(model.param_count() < 1_000_000, "tiny preset has {} params", model.param_count());
}

#[test]
fn doubling_input_does_not_change_params() {
    let model = ObjFormer::<f32>::new(ModelConfig::tiny(7), Task::Bcd, 0).unwrap();
    // parameters are convolutional/attention only; the count is a function of
    // the config, and both input sizes must pass shape validation
    let before = model.param_count();
    model.config().stage_dims(64, 64).unwrap();
    model.config().stage_dims(128, 128).unwrap();
    assert_eq!(model.param_count(), before);
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.objf");
    let model = ObjFormer::<f32>::new(micro_config(), Task::Scd, 21).unwrap();
    model.save(&path, serde_json::json!({"note": 1})).unwrap();
    let (loaded, extra) = ObjFormer::<f32>::load(&path).unwrap();
    assert_eq!(extra["note"], 1);
    assert_eq!(loaded.param_count(), model.param_count());
    for (name, t) in model.weights().iter() {
        let o = loaded.weights().get(name).unwrap();
        assert_eq!(o.data(), t.data(), "mismatch in '{name}'");
    }
}

#[test]
fn checkpoint_rejects_truncation() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.objf");
    let model = ObjFormer::<f32>::new(micro_config(), Task::Bcd, 22).unwrap();
    model.save(&path, serde_json::Value::Null).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let cut = path.with_extension("cut");
    std::fs::write(&cut, &bytes[..bytes.len() / 2]).unwrap();
    match ObjFormer::<f32>::load(&cut) {
        Err(crate::Error::Parse { .. }) | Err(crate::Error::Checkpoint(_)) => {}
        other => panic!("expected parse failure, got {:?}", other.map(|_| ())),
    }
}

#[test]
fn end_to_end_input_gradcheck() {
    // finite differences through the whole BCD forward at f64 on a micro
    // model; checks a seeded subset of input coordinates
    let cfg = micro_config();
    let model = ObjFormer::<f64>::new(cfg.clone(), Task::Bcd, 31).unwrap();
    let (h, w) = (32, 32);
    let inst = stage_grid_maps(&cfg, h, w, 4);
    let obj = stage_grid_maps(&cfg, h, w, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let x_osm = rand_raster(&mut rng, h, w);
    let x_opt = rand_raster(&mut rng, h, w);

    let loss_of = |xo_data: &[f64], xp_data: &[f64]| -> (f64, Option<(Tape<f64>, crate::tensor::TensorId, crate::tensor::TensorId, crate::tensor::TensorId)>) {
        let mut tape = Tape::new();
        let xo = tape.constant(xo_data.to_vec(), &[3, h, w]).unwrap();
        let xp = tape.constant(xp_data.to_vec(), &[3, h, w]).unwrap();
        // promote to leaves so gradients flow to the inputs
        let xo = tape.leaf(tape.data(xo).to_vec(), &[3, h, w]).unwrap();
        let xp = tape.leaf(tape.data(xp).to_vec(), &[3, h, w]).unwrap();
        let bound = model.bind(&mut tape);
        let logits =
            model.forward_bcd(&mut tape, &bound, xo, xp, &inst, &obj, PoolFusion::Mean).unwrap();
        let n = tape.numel(logits);
        let wvec: Vec<f64> = (0..n).map(|i| (0.31 * i as f64).sin() + 1.1).collect();
        let wid = tape.constant(wvec, &[2, h, w]).unwrap();
        let m = tape.mul(logits, wid).unwrap();
        let loss = tape.sum_all(m).unwrap();
        let v = tape.scalar_value(loss);
        (v, Some((tape, loss, xo, xp)))
    };

    let (_, ctx) = loss_of(&x_osm, &x_opt);
    let (tape, loss, xo_id, xp_id) = ctx.unwrap();
    let grads = tape.backward(loss).unwrap();
    let g_osm = grads.get(xo_id).unwrap().to_vec();
    let g_opt = grads.get(xp_id).unwrap().to_vec();

    let coords: Vec<usize> = (0..12).map(|_| rng.gen_range(0..3 * h * w)).collect();
    let fd_osm = central_diff_at(|x| loss_of(x, &x_opt).0, &x_osm, &coords, 1e-5);
    let fd_opt = central_diff_at(|x| loss_of(&x_osm, x).0, &x_opt, &coords, 1e-5);
    let a_osm: Vec<f64> = coords.iter().map(|&i| g_osm[i]).collect();
    let a_opt: Vec<f64> = coords.iter().map(|&i| g_opt[i]).collect();
    let err = max_rel_err(&a_osm, &fd_osm, 1e-2).max(max_rel_err(&a_opt, &fd_opt, 1e-2));
    assert!(err <= 1e-3, "end-to-end input grad rel err {err}");
}

#[test]
fn mac_counter_tracks_table_regime() {
    let cfg = ModelConfig::paper(7);
    let tokens = TokenCounts { objects: 1500, instances: 150 };
    let vanilla = model_macs(&cfg, Task::Bcd, 512, 512, AttentionMode::Vanilla, tokens);
    let object = model_macs(&cfg, Task::Bcd, 512, 512, AttentionMode::ObjectGuided, tokens);
    let ratio = vanilla.total() as f64 / object.total() as f64;
    assert!(ratio > 5.0 && ratio < 12.0, "vanilla/object ratio {ratio}");
    // paper-reported magnitudes, within a factor of two for counting conventions
    let v = vanilla.total() as f64 / 1e9;
    let o = object.total() as f64 / 1e9;
    assert!(v > 223.13 / 2.0 && v < 223.13 * 2.0, "vanilla {v} GMAC");
    assert!(o > 27.12 / 2.0 && o < 27.12 * 2.0, "object {o} GMAC");
}

#[test]
fn mac_counts_scale_linearly_in_area() {
    // batch scaling is area scaling for a fully convolutional model
    let cfg = ModelConfig::tiny(7);
    let tokens = TokenCounts { objects: 64, instances: 16 };
    let one = model_macs(&cfg, Task::Bcd, 64, 64, AttentionMode::SpatialReduction(4), tokens);
    let two = model_macs(&cfg, Task::Bcd, 64, 128, AttentionMode::SpatialReduction(4), tokens);
    assert_eq!(two.patch_embeds, 2 * one.patch_embeds);
    assert_eq!(two.encoder_ffn, 2 * one.encoder_ffn);
}
