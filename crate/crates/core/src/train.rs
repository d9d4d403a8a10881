//! Training on synthetic scenes: scenes are regenerated from seeds, encoded
//! with the fixed codec (fresh tags every draw) and fed to the flow loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{fm_loss_on_graph, make_flow_batch};
use crate::model::{forward_on_graph, init_model, Condition, Routing};
use crate::numerics::{Graph, ParamStore, Tensor};
use crate::optim::AdamW;
use crate::run::{DataConfig, RunConfig};
use crate::synth::{scene_seed, Codec, SceneRecord};
use crate::tokens::assign_id_embeddings;

/// Scenes and codec of one run.
pub struct SceneData {
    pub codec: Codec,
    pub train: Vec<SceneRecord>,
    pub eval: Vec<SceneRecord>,
}

impl SceneData {
    pub fn build(data: &DataConfig, vecset_len: usize, latent_dim: usize) -> Result<Self> {
        let codec = Codec::new(data.scene.dim, latent_dim, data.tag_scale, data.codec_seed)?;
        let gen = |i: usize| SceneRecord::generate(scene_seed(data.seed, i as u64), data.components, vecset_len, &data.scene);
        let train = (0..data.train_scenes).map(gen).collect::<Result<_>>()?;
        let eval = (data.train_scenes..data.train_scenes + data.eval_scenes).map(gen).collect::<Result<_>>()?;
        Ok(Self { codec, train, eval })
    }

    pub fn for_run(cfg: &RunConfig) -> Result<Self> {
        Self::build(&cfg.data, cfg.model.vecset_len, cfg.model.latent_dim)
    }

    /// `[n, L, latent_dim]` latents of a scene with tags drawn from `rng`.
    pub fn encode<R: Rng + ?Sized>(&self, scene: &SceneRecord, rng: &mut R) -> Result<Tensor> {
        let parts = scene.components.iter().map(|c| self.codec.encode(c, rng)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = parts.iter().collect();
        let (n, l) = (scene.n(), scene.l());
        Tensor::concat_rows(&refs)?.reshape(&[n, l, self.codec.latent_dim])
    }

    /// Point sets of each component of `[n, L, latent_dim]` latents.
    pub fn decode(&self, latents: &Tensor) -> Result<Vec<Tensor>> {
        let shape = latents.shape();
        if shape.len() != 3 {
            return Err(Error::Shape(format!("latents {shape:?} are not [n, L, width]")));
        }
        let flat = latents.clone().reshape(&[shape[0] * shape[1], shape[2]])?;
        (0..shape[0]).map(|i| self.codec.decode(&flat.slice_rows(i * shape[1]..(i + 1) * shape[1]))).collect()
    }
}

pub fn condition_of(scene: &SceneRecord) -> Condition {
    Condition::layout(scene.layout.clone())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    /// One-based step index.
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
}

/// Trailing mean of `losses[..step]` over `window` entries (`step` is one-based).
pub fn smoothed_loss(losses: &[f64], step: usize, window: usize) -> Option<f64> {
    if step == 0 || step > losses.len() || window == 0 {
        return None;
    }
    let lo = step.saturating_sub(window);
    let w = &losses[lo..step];
    Some(w.iter().sum::<f64>() / w.len() as f64)
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<StepLog>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|s| s.loss).collect()
    }
}

/// One optimizer step over `batch` random training scenes. Returns the mean
/// loss and the gradient norm before clipping.
pub fn train_step(
    params: &mut ParamStore,
    opt: &mut AdamW,
    cfg: &RunConfig,
    data: &SceneData,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64)> {
    params.zero_grads();
    let batch = cfg.train.batch;
    let mut total = 0.0;
    for _ in 0..batch {
        let scene = &data.train[rng.random_range(0..data.train.len())];
        let z0 = data.encode(scene, rng)?;
        let ids = assign_id_embeddings(scene.n(), cfg.model.codebook_size, rng)?;
        let fb = make_flow_batch(&z0, &condition_of(scene), cfg.train.cond_drop, rng)?;
        let mut g = Graph::new();
        let out = forward_on_graph(&mut g, params, &cfg.model, &fb.z_t, fb.t, &fb.cond, &ids, Routing::Stochastic(rng))?;
        let loss = fm_loss_on_graph(&mut g, out.velocity, &fb.target)?;
        let value = g.value(loss).data()[0];
        if !value.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        let grads = g.backward(loss);
        g.accumulate_param_grads(&grads, params, 1.0 / batch as f64)?;
        total += value;
    }
    let norm = opt.step(params)?;
    Ok((total / batch as f64, norm))
}

/// Trains from a fresh initialization for `steps` steps, calling `on_step`
/// after each one.
pub fn train_with(cfg: &RunConfig, data: &SceneData, steps: usize, mut on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init_model(&cfg.model, &mut rng)?;
    let mut opt = AdamW::new(cfg.train.optim.clone())?;
    let mut log = Vec::with_capacity(steps);
    for step in 1..=steps {
        let (loss, grad_norm) = train_step(&mut params, &mut opt, cfg, data, &mut rng)?;
        let entry = StepLog { step, loss, grad_norm };
        on_step(&entry);
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

pub fn train(cfg: &RunConfig, on_step: impl FnMut(&StepLog)) -> Result<TrainOutcome> {
    let data = SceneData::for_run(cfg)?;
    train_with(cfg, &data, cfg.train.steps, on_step)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny() -> RunConfig {
        let model = ModelConfig { d_model: 16, heads: 2, block_pairs: 1, vecset_len: 8, latent_dim: 4, grid: 8, ..Default::default() };
        let mut cfg = RunConfig { model, ..Default::default() };
        cfg.data.scene.dim = 2;
        cfg.data.train_scenes = 16;
        cfg.data.eval_scenes = 2;
        cfg.train.batch = 2;
        cfg
    }

    #[test]
    fn smoothing_window() {
        let l = [4.0, 2.0, 3.0, 1.0];
        assert_eq!(smoothed_loss(&l, 1, 3), Some(4.0));
        assert_eq!(smoothed_loss(&l, 4, 2), Some(2.0));
        assert_eq!(smoothed_loss(&l, 4, 10), Some(2.5));
        assert_eq!(smoothed_loss(&l, 5, 2), None);
        assert_eq!(smoothed_loss(&l, 0, 2), None);
    }

    #[test]
    fn encode_decode_scenes() {
        let cfg = tiny();
        let data = SceneData::for_run(&cfg).unwrap();
        assert_eq!(data.train.len(), 16);
        assert_eq!(data.eval.len(), 2);
        assert!(data.eval.iter().all(|e| data.train.iter().all(|t| t.seed != e.seed)));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = data.encode(&data.train[0], &mut rng).unwrap();
        assert_eq!(z.shape(), &[4, 8, 4]);
        let back = data.decode(&z).unwrap();
        for (a, b) in back.iter().zip(&data.train[0].components) {
            assert!(a.max_abs_diff(b) < 1e-10);
        }
    }

    #[test]
    fn training_is_deterministic_and_logs_every_step() {
        let cfg = tiny();
        let data = SceneData::for_run(&cfg).unwrap();
        let mut seen = Vec::new();
        let a = train_with(&cfg, &data, 5, |s| seen.push(s.step)).unwrap();
        let b = train_with(&cfg, &data, 5, |_| {}).unwrap();
        assert_eq!(seen, vec![1, 2, 3, 4, 5]);
        assert_eq!(a.log, b.log);
        assert_eq!(a.params, b.params);
        assert!(a.log.iter().all(|s| s.loss.is_finite() && s.loss > 0.0));
    }

    #[test]
    fn loss_decreases_over_two_hundred_steps() {
        let cfg = tiny();
        let data = SceneData::for_run(&cfg).unwrap();
        let out = train_with(&cfg, &data, 200, |_| {}).unwrap();
        let losses = out.losses();
        let w = cfg.train.smoothing;
        let early = smoothed_loss(&losses, 10, w).unwrap();
        let late = smoothed_loss(&losses, 200, w).unwrap();
        assert!(late < early, "smoothed loss {late} at 200 vs {early} at 10");
    }
}
