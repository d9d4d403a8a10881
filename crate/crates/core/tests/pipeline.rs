use std::fs::File;
use std::io::{BufReader, BufWriter};

use moc_core::bench::{bench_attention, trend_check, BenchOptions, BenchPoint, Method};
use moc_core::checkpoint::{load_checkpoint, quantize, save_checkpoint};
use moc_core::eval::{evaluate, evaluate_threaded, sample_latents, sample_seeds};
use moc_core::flow::SamplerConfig;
use moc_core::model::ModelConfig;
use moc_core::run::RunConfig;
use moc_core::synth::{read_dataset, write_dataset};
use moc_core::train::{condition_of, train_with, SceneData};

fn tiny() -> RunConfig {
    let model = ModelConfig { d_model: 16, heads: 2, block_pairs: 1, vecset_len: 8, latent_dim: 4, ..Default::default() };
    let mut cfg = RunConfig { model, ..Default::default() };
    cfg.data.scene.dim = 2;
    cfg.data.train_scenes = 8;
    cfg.data.eval_scenes = 2;
    cfg.train.batch = 1;
    cfg.eval.steps = 4;
    cfg
}

#[test]
fn dataset_file_round_trip() {
    let cfg = tiny();
    let data = SceneData::for_run(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("train.scenes");
    write_dataset(BufWriter::new(File::create(&path).unwrap()), &data.train).unwrap();
    let back = read_dataset(BufReader::new(File::open(&path).unwrap())).unwrap();
    let expect: Vec<_> = data.train.iter().map(|s| s.quantized()).collect();
    assert_eq!(back, expect);
}

#[test]
fn checkpointed_model_samples_like_the_trained_one() {
    let cfg = tiny();
    let data = SceneData::for_run(&cfg).unwrap();
    let out = train_with(&cfg, &data, 3, |_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(dir.path(), &cfg.model, &out.params).unwrap();
    let (stored, params) = load_checkpoint(dir.path(), Some(&cfg.model)).unwrap();
    assert_eq!(stored, cfg.model);
    let q = quantize(&out.params);
    assert_eq!(params, q);

    let scene = &data.eval[0];
    let seed = &sample_seeds(&cfg.model, scene.n(), 1, 5).unwrap()[0];
    let sampler = SamplerConfig { steps: 4, cfg_scale: 2.0 };
    let a = sample_latents(&params, &cfg.model, seed, &condition_of(scene), &sampler).unwrap();
    let b = sample_latents(&q, &cfg.model, seed, &condition_of(scene), &sampler).unwrap();
    assert_eq!(a, b);
    assert_eq!(data.decode(&a).unwrap().len(), scene.n());

    let mut other = cfg.model.clone();
    other.ffn_mult = 2;
    assert!(load_checkpoint(dir.path(), Some(&other)).is_err());
}

#[test]
fn evaluation_is_thread_count_independent() {
    let cfg = tiny();
    let data = SceneData::for_run(&cfg).unwrap();
    let out = train_with(&cfg, &data, 2, |_| {}).unwrap();
    let one = evaluate(&out.params, &cfg, &data, &data.eval).unwrap();
    let two = evaluate_threaded(&out.params, &cfg, &data, &data.eval, 2).unwrap();
    assert_eq!(one, two);
    assert_eq!(one.scenes, 2);
    assert_eq!(one.ground_truth_self_iou, 0.0);
}

#[test]
fn small_bench_reports_both_methods() {
    let grid = [BenchPoint { n: 4, l: 16, k: 1, sigma: 4, d: 16, heads: 2 }, BenchPoint { n: 8, l: 16, k: 2, sigma: 4, d: 16, heads: 2 }];
    let report = bench_attention(&grid, &BenchOptions { repeats: 5, warmup: 2, seed: 1 }, |_| {}).unwrap();
    assert_eq!(report.rows.len(), 4);
    for r in &report.rows {
        match r.method {
            Method::Moc => assert_eq!(r.kv_length, 16 + r.k * 16 + (r.n - r.k - 1) * 4),
            Method::Dense => {
                assert_eq!(r.kv_length, r.n * 16);
                assert_eq!(r.wall_ms_routing, 0.0);
            }
        }
        assert!(r.wall_ms_global > 0.0 && r.wall_ms_total > 0.0);
    }
    assert_eq!(trend_check(&report).unwrap().points.len(), 2);
}
