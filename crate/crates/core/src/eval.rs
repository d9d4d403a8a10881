//! Sampling scenes, scoring them against held-out ground truth, and the
//! ablation sweep over the attention design axes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::flow::{sample_from, DitVelocity, SamplerConfig, VelocityModel};
use crate::model::{Condition, ModelConfig};
use crate::numerics::{GainTarget, ParamStore, Tensor};
use crate::router::Activation;
use crate::run::RunConfig;
use crate::synth::{chamfer, fscore, merge, self_iou, SceneRecord};
use crate::tokens::assign_id_embeddings;
use crate::train::{condition_of, smoothed_loss, train_with, SceneData};

/// Mixed into the run seed for the evaluation noise.
const EVAL_STREAM: u64 = 0xE7A1;

/// Velocity field that is zero everywhere: samples stay at the initial noise.
pub struct ZeroVelocity;

impl VelocityModel for ZeroVelocity {
    type Plan = ();

    fn velocity(&self, z: &Tensor, _t: f64, _cond: &Condition, _plan: Option<&()>) -> Result<(Tensor, ())> {
        Ok((Tensor::zeros(z.shape()), ()))
    }
}

/// Initial noise and ID assignment of one sampled scene.
pub struct SampleSeed {
    pub noise: Tensor,
    pub ids: Vec<usize>,
}

/// Noise and IDs for `count` scenes of `n` components, from `seed`.
pub fn sample_seeds(cfg: &ModelConfig, n: usize, count: usize, seed: u64) -> Result<Vec<SampleSeed>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let ids = assign_id_embeddings(n, cfg.codebook_size, &mut rng)?;
            let noise = Tensor::randn(&[n, cfg.vecset_len, cfg.latent_dim], 1.0, &mut rng);
            Ok(SampleSeed { noise, ids })
        })
        .collect()
}

/// Latents sampled by the model with deterministic routing.
pub fn sample_latents(params: &ParamStore, cfg: &ModelConfig, seed: &SampleSeed, cond: &Condition, sampler: &SamplerConfig) -> Result<Tensor> {
    let model = DitVelocity { params, cfg, ids: seed.ids.clone() };
    sample_from(&model, &seed.noise, cond, sampler)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub chamfer: f64,
    pub fscore_010: f64,
    pub fscore_005: f64,
    pub self_iou: f64,
}

impl Metrics {
    /// Scores generated components against ground-truth components.
    pub fn of(generated: &[Tensor], truth: &[Tensor], resolution: usize) -> Result<Self> {
        let g = merge(generated)?;
        let t = merge(truth)?;
        Ok(Self {
            chamfer: chamfer(&g, &t)?,
            fscore_010: fscore(&g, &t, 0.1)?,
            fscore_005: fscore(&g, &t, 0.05)?,
            self_iou: self_iou(generated, resolution)?,
        })
    }

    fn mean(all: &[Metrics]) -> Self {
        let k = all.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| all.iter().map(f).sum::<f64>() / k;
        Self {
            chamfer: avg(|m| m.chamfer),
            fscore_010: avg(|m| m.fscore_010),
            fscore_005: avg(|m| m.fscore_005),
            self_iou: avg(|m| m.self_iou),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scenes: usize,
    pub trained: Metrics,
    /// Samples of the zero-velocity model, i.e. the decoded initial noise.
    pub zero_velocity: Metrics,
    pub ground_truth_self_iou: f64,
}

/// Samples one scene per held-out record and averages the metrics. Trained
/// and zero-velocity samples start from the same noise.
pub fn evaluate(params: &ParamStore, cfg: &RunConfig, data: &SceneData, scenes: &[SceneRecord]) -> Result<EvalReport> {
    evaluate_threaded(params, cfg, data, scenes, 1)
}

/// `evaluate` with scenes split across `threads` workers; the result does
/// not depend on the thread count.
pub fn evaluate_threaded(
    params: &ParamStore,
    cfg: &RunConfig,
    data: &SceneData,
    scenes: &[SceneRecord],
    threads: usize,
) -> Result<EvalReport> {
    let n = cfg.data.components;
    let res = cfg.eval.resolution(cfg.data.scene.dim);
    let seeds = sample_seeds(&cfg.model, n, scenes.len(), cfg.seed ^ EVAL_STREAM)?;
    let sampler = cfg.eval.sampler();
    let score = |scene: &SceneRecord, seed: &SampleSeed| -> Result<(Metrics, Metrics, f64)> {
        let cond = condition_of(scene);
        let z = sample_latents(params, &cfg.model, seed, &cond, &sampler)?;
        let trained = Metrics::of(&data.decode(&z)?, &scene.components, res)?;
        let z0 = sample_from(&ZeroVelocity, &seed.noise, &cond, &sampler)?;
        let zero = Metrics::of(&data.decode(&z0)?, &scene.components, res)?;
        Ok((trained, zero, self_iou(&scene.components, res)?))
    };
    let jobs: Vec<(&SceneRecord, &SampleSeed)> = scenes.iter().zip(&seeds).collect();
    let chunk = jobs.len().div_ceil(threads.max(1)).max(1);
    let results: Vec<(Metrics, Metrics, f64)> = std::thread::scope(|s| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(|(sc, sd)| score(sc, sd)).collect::<Result<Vec<_>>>()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect::<Result<Vec<_>>>()
    })?
    .into_iter()
    .flatten()
    .collect();
    let trained: Vec<Metrics> = results.iter().map(|r| r.0.clone()).collect();
    let zero: Vec<Metrics> = results.iter().map(|r| r.1.clone()).collect();
    let gt_iou: f64 = results.iter().map(|r| r.2).sum();
    Ok(EvalReport {
        scenes: scenes.len(),
        trained: Metrics::mean(&trained),
        zero_velocity: Metrics::mean(&zero),
        ground_truth_self_iou: gt_iou / scenes.len().max(1) as f64,
    })
}

/// One configuration of the ablation sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetting {
    pub label: char,
    pub routing: bool,
    pub compressed_context: bool,
    pub gate_target: GainTarget,
    pub activation: Activation,
    pub load_balance: bool,
    pub multi_head: bool,
}

impl AblationSetting {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        cfg.model.moc.use_routing = self.routing;
        cfg.model.moc.use_compressed_context = self.compressed_context;
        cfg.model.moc.gate_target = self.gate_target;
        cfg.model.router.activation = self.activation;
        cfg.model.router.load_balance = self.load_balance;
        cfg.model.router.multi_head = self.multi_head;
        cfg
    }
}

/// Settings A..G: each of A..F switches off or replaces one design choice of
/// the full model G.
pub fn ablation_settings() -> Vec<AblationSetting> {
    let full = AblationSetting {
        label: 'G',
        routing: true,
        compressed_context: true,
        gate_target: GainTarget::Key,
        activation: Activation::Sigmoid,
        load_balance: true,
        multi_head: true,
    };
    vec![
        AblationSetting { label: 'A', routing: false, ..full.clone() },
        AblationSetting { label: 'B', compressed_context: false, ..full.clone() },
        AblationSetting { label: 'C', gate_target: GainTarget::Value, ..full.clone() },
        AblationSetting { label: 'D', activation: Activation::Softmax, ..full.clone() },
        AblationSetting { label: 'E', load_balance: false, ..full.clone() },
        AblationSetting { label: 'F', multi_head: false, ..full.clone() },
        full,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: AblationSetting,
    pub steps: usize,
    pub final_loss: f64,
    pub metrics: Metrics,
}

/// Trains and evaluates every setting for `base.ablate_steps` steps.
pub fn run_ablation(base: &RunConfig, mut on_row: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let data = SceneData::for_run(base)?;
    let steps = base.ablate_steps;
    let mut rows = Vec::new();
    for setting in ablation_settings() {
        let cfg = setting.apply(base);
        let out = train_with(&cfg, &data, steps, |_| {})?;
        let final_loss = smoothed_loss(&out.losses(), steps, cfg.train.smoothing).unwrap_or(f64::NAN);
        let report = evaluate(&out.params, &cfg, &data, &data.eval)?;
        let row = AblationRow { setting, steps, final_loss, metrics: report.trained };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}

fn mark(b: bool) -> &'static str {
    if b {
        "yes"
    } else {
        "no"
    }
}

/// Plain-text table of ablation rows.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let mut out = String::from("cfg routing compressed gate  activation load_balance multi_head   loss       CD      F@0.1   F@0.05  self_iou\n");
    for r in rows {
        let s = &r.setting;
        let gate = match s.gate_target {
            GainTarget::Key => "key",
            GainTarget::Value => "value",
        };
        let act = match s.activation {
            Activation::Sigmoid => "sigmoid",
            Activation::Softmax => "softmax",
        };
        out.push_str(&format!(
            "{:<3} {:<7} {:<10} {:<5} {:<10} {:<12} {:<10} {:>8.4} {:>8.4} {:>8.4} {:>8.4} {:>9.4}\n",
            s.label,
            mark(s.routing),
            mark(s.compressed_context),
            gate,
            act,
            mark(s.load_balance),
            mark(s.multi_head),
            r.final_loss,
            r.metrics.chamfer,
            r.metrics.fscore_010,
            r.metrics.fscore_005,
            r.metrics.self_iou,
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;

    fn tiny() -> RunConfig {
        let model = ModelConfig { d_model: 16, heads: 2, block_pairs: 1, vecset_len: 8, latent_dim: 4, grid: 8, ..Default::default() };
        let mut cfg = RunConfig { model, ablate_steps: 3, ..Default::default() };
        cfg.data.scene.dim = 2;
        cfg.data.train_scenes = 8;
        cfg.data.eval_scenes = 2;
        cfg.train.batch = 1;
        cfg.eval.steps = 3;
        cfg
    }

    #[test]
    fn ground_truth_scores_perfectly() {
        let cfg = tiny();
        let data = SceneData::for_run(&cfg).unwrap();
        let s = &data.eval[0];
        let m = Metrics::of(&s.components, &s.components, 256).unwrap();
        assert_eq!(m, Metrics { chamfer: 0.0, fscore_010: 1.0, fscore_005: 1.0, self_iou: 0.0 });
    }

    #[test]
    fn untrained_model_equals_zero_velocity() {
        let cfg = tiny();
        let data = SceneData::for_run(&cfg).unwrap();
        let params = init_model(&cfg.model, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let r = evaluate(&params, &cfg, &data, &data.eval).unwrap();
        assert_eq!(r.trained, r.zero_velocity);
        assert_eq!(r.ground_truth_self_iou, 0.0);
        assert!(r.zero_velocity.chamfer > 0.1);
        let again = evaluate_threaded(&params, &cfg, &data, &data.eval, 2).unwrap();
        assert_eq!(r, again);
    }

    #[test]
    fn settings_cover_each_axis_once() {
        let s = ablation_settings();
        let labels: String = s.iter().map(|x| x.label).collect();
        assert_eq!(labels, "ABCDEFG");
        let full = &s[6];
        for a in &s[..6] {
            let diffs = [
                a.routing != full.routing,
                a.compressed_context != full.compressed_context,
                a.gate_target != full.gate_target,
                a.activation != full.activation,
                a.load_balance != full.load_balance,
                a.multi_head != full.multi_head,
            ];
            assert_eq!(diffs.iter().filter(|&&d| d).count(), 1, "{a:?}");
        }
    }

    #[test]
    fn ablation_produces_seven_rows() {
        let rows = run_ablation(&tiny(), |_| {}).unwrap();
        assert_eq!(rows.len(), 7);
        assert!(rows.iter().all(|r| r.final_loss.is_finite() && r.metrics.chamfer.is_finite()));
        let table = format_ablation_table(&rows);
        assert_eq!(table.lines().count(), 8);
        assert!(table.lines().nth(1).unwrap().starts_with('A'));
    }
}
