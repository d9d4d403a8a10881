//! Rectified flow matching: linear noising path, velocity regression loss
//! and an Euler sampler with classifier-free guidance.

use rand::Rng;

use crate::error::{Error, Result};
use crate::model::{cfg_dropout, predict, Condition, ModelConfig, Routing};
use crate::numerics::{Graph, ParamStore, Tensor, Var};
use crate::router::RoutingDecision;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowBatch {
    pub z0: Tensor,
    pub noise: Tensor,
    /// Shared by every component of the sample.
    pub t: f64,
    pub z_t: Tensor,
    pub target: Tensor,
    pub cond: Condition,
    pub dropped: bool,
}

/// `Z_t = (1 - t) Z_0 + t eps`, target `eps - Z_0`.
pub fn flow_batch_at(z0: &Tensor, noise: &Tensor, t: f64, cond: Condition) -> Result<FlowBatch> {
    if z0.shape() != noise.shape() {
        return Err(Error::Shape(format!("clean {:?} vs noise {:?}", z0.shape(), noise.shape())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::InvalidArgument(format!("t = {t} outside [0, 1]")));
    }
    if !z0.is_finite() || !noise.is_finite() {
        return Err(Error::NonFinite("flow batch input".into()));
    }
    let z_t = z0.zip_map(noise, |a, e| (1.0 - t) * a + t * e)?;
    let target = noise.zip_map(z0, |e, a| e - a)?;
    let dropped = cond.is_null();
    Ok(FlowBatch { z0: z0.clone(), noise: noise.clone(), t, z_t, target, cond, dropped })
}

/// Draws unit Gaussian noise, one `t ~ U(0, 1)` for the whole sample, and
/// drops the condition with probability `p_drop`.
pub fn make_flow_batch<R: Rng + ?Sized>(z0: &Tensor, cond: &Condition, p_drop: f64, rng: &mut R) -> Result<FlowBatch> {
    let noise = Tensor::randn(z0.shape(), 1.0, rng);
    let t = rng.random::<f64>();
    let cond = cfg_dropout(cond, p_drop, rng)?;
    flow_batch_at(z0, &noise, t, cond)
}

/// Mean squared error over every element.
pub fn fm_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.len() != target.len() || pred.cols() != target.cols() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    let sum: f64 = pred.data().iter().zip(target.data()).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

pub fn fm_loss_on_graph(g: &mut Graph, pred: Var, target: &Tensor) -> Result<Var> {
    let p = g.value(pred);
    if p.len() != target.len() || p.cols() != target.cols() {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", p.shape(), target.shape())));
    }
    let rows = p.rows();
    let t = g.constant(target.clone().reshape(&[rows, target.cols()])?);
    Ok(g.mse(pred, t))
}

/// A velocity field usable by the sampler. `plan` carries decisions made by
/// the conditional branch (such as routing) so the unconditional branch can
/// reuse them.
pub trait VelocityModel {
    type Plan;

    fn velocity(&self, z: &Tensor, t: f64, cond: &Condition, plan: Option<&Self::Plan>) -> Result<(Tensor, Self::Plan)>;
}

/// The transformer with fixed ID assignment and deterministic routing.
pub struct DitVelocity<'a> {
    pub params: &'a ParamStore,
    pub cfg: &'a ModelConfig,
    pub ids: Vec<usize>,
}

impl VelocityModel for DitVelocity<'_> {
    type Plan = Vec<RoutingDecision>;

    fn velocity(&self, z: &Tensor, t: f64, cond: &Condition, plan: Option<&Self::Plan>) -> Result<(Tensor, Self::Plan)> {
        let routing = match plan {
            Some(p) => Routing::Fixed(p),
            None => Routing::Deterministic,
        };
        let (v, decisions) = predict(self.params, self.cfg, z, t, cond, &self.ids, routing)?;
        Ok((v.reshape(z.shape())?, decisions))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { steps: 50, cfg_scale: 4.0 }
    }
}

/// Guided velocity `v_u + s (v_c - v_u)`; the unconditional branch reuses
/// the conditional branch's plan. Scale 1 or a null condition evaluates the
/// conditional branch only.
pub fn guided_velocity<M: VelocityModel>(model: &M, z: &Tensor, t: f64, cond: &Condition, cfg_scale: f64) -> Result<Tensor> {
    let (vc, plan) = model.velocity(z, t, cond, None)?;
    if cfg_scale == 1.0 || cond.is_null() {
        return Ok(vc);
    }
    let (vu, _) = model.velocity(z, t, &Condition::null(), Some(&plan))?;
    vu.zip_map(&vc, |u, c| u + cfg_scale * (c - u))
}

/// Euler integration from `t = 1` (the given noise) to `t = 0`.
pub fn sample_from<M: VelocityModel>(model: &M, noise: &Tensor, cond: &Condition, sampler: &SamplerConfig) -> Result<Tensor> {
    if sampler.steps == 0 {
        return Err(Error::InvalidArgument("sampler needs at least one step".into()));
    }
    if !sampler.cfg_scale.is_finite() {
        return Err(Error::InvalidArgument(format!("cfg scale {}", sampler.cfg_scale)));
    }
    let dt = 1.0 / sampler.steps as f64;
    let mut z = noise.clone();
    for step in 0..sampler.steps {
        let t = 1.0 - step as f64 * dt;
        let v = guided_velocity(model, &z, t, cond, sampler.cfg_scale)?;
        z = z.zip_map(&v, |a, b| a - dt * b)?;
        if !z.is_finite() {
            return Err(Error::SamplerDiverged { step });
        }
    }
    Ok(z)
}

/// Samples `shape`-shaped latents starting from fresh unit Gaussian noise.
pub fn sample<M: VelocityModel, R: Rng + ?Sized>(
    model: &M,
    shape: &[usize],
    cond: &Condition,
    sampler: &SamplerConfig,
    rng: &mut R,
) -> Result<Tensor> {
    let noise = Tensor::randn(shape, 1.0, rng);
    sample_from(model, &noise, cond, sampler)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use crate::model::init_model;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::cell::Cell;

    #[test]
    fn endpoints_and_midpoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z0 = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let eps = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        assert_eq!(flow_batch_at(&z0, &eps, 0.0, Condition::null()).unwrap().z_t, z0);
        assert_eq!(flow_batch_at(&z0, &eps, 1.0, Condition::null()).unwrap().z_t, eps);
        let b = flow_batch_at(&Tensor::zeros(&[2, 2]), &Tensor::full(&[2, 2], 1.0), 0.25, Condition::null()).unwrap();
        assert!(b.z_t.data().iter().all(|&x| x == 0.25));
        assert!(b.target.data().iter().all(|&x| x == 1.0));
        assert!(flow_batch_at(&z0, &Tensor::zeros(&[3]), 0.5, Condition::null()).is_err());
    }

    #[test]
    fn random_batches_share_one_time() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z0 = Tensor::randn(&[3, 4, 2], 1.0, &mut rng);
        let cond = Condition::layout(vec![1.0; 4]);
        let mut drops = 0;
        for _ in 0..200 {
            let b = make_flow_batch(&z0, &cond, 0.1, &mut rng).unwrap();
            assert!((0.0..1.0).contains(&b.t));
            let rebuilt = flow_batch_at(&z0, &b.noise, b.t, b.cond.clone()).unwrap();
            assert_eq!(rebuilt, b);
            drops += usize::from(b.dropped);
        }
        assert!(drops > 0 && drops < 60);
    }

    #[test]
    fn loss_values_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t = Tensor::randn(&[4, 3], 1.0, &mut rng);
        assert_eq!(fm_loss(&t, &t).unwrap(), 0.0);
        assert!((fm_loss(&t.map(|x| x + 1.0), &t).unwrap() - 1.0).abs() < 1e-12);
        assert!(fm_loss(&t, &Tensor::zeros(&[5, 3])).is_err());

        let mut p = ParamStore::new();
        p.insert("pred", Tensor::randn(&[4, 3], 1.0, &mut rng)).unwrap();
        let f = |g: &mut Graph, p: &ParamStore| {
            let x = g.param(p, "pred")?;
            fm_loss_on_graph(g, x, &t)
        };
        let mut g = Graph::new();
        let loss = f(&mut g, &p).unwrap();
        assert!((g.value(loss).data()[0] - fm_loss(p.get("pred").unwrap(), &t).unwrap()).abs() < 1e-15);
        let grads = g.backward(loss);
        let dx = grads.get(g.param_vars()[0].1).unwrap();
        let expect = p.get("pred").unwrap().zip_map(&t, |a, b| 2.0 * (a - b) / 12.0).unwrap();
        assert!(dx.max_abs_diff(&expect) < 1e-15);
        assert!(grad_check(f, &p, 1e-5).unwrap() < 1e-8);
    }

    /// Returns `eps - target` regardless of input; counts calls.
    struct ConstantField {
        field: Tensor,
        calls: Cell<usize>,
    }

    impl VelocityModel for ConstantField {
        type Plan = ();

        fn velocity(&self, _z: &Tensor, _t: f64, _cond: &Condition, _plan: Option<&()>) -> Result<(Tensor, ())> {
            self.calls.set(self.calls.get() + 1);
            Ok((self.field.clone(), ()))
        }
    }

    #[test]
    fn euler_recovers_target_on_a_constant_field() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let target = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let eps = Tensor::randn(&[3, 5, 2], 1.0, &mut rng);
        let m = ConstantField { field: eps.zip_map(&target, |e, a| e - a).unwrap(), calls: Cell::new(0) };
        for steps in [1, 7, 50] {
            let out = sample_from(&m, &eps, &Condition::null(), &SamplerConfig { steps, cfg_scale: 4.0 }).unwrap();
            assert!(out.max_abs_diff(&target) < 1e-12, "steps {steps}");
        }
        assert_eq!(m.calls.get(), 58);
    }

    /// Velocity depending on state, time, condition and plan.
    struct Toy;

    impl VelocityModel for Toy {
        type Plan = f64;

        fn velocity(&self, z: &Tensor, t: f64, cond: &Condition, plan: Option<&f64>) -> Result<(Tensor, f64)> {
            let c = cond.layout.as_ref().map_or(0.0, |l| l[0]);
            let p = plan.copied().unwrap_or(1.0 + c);
            Ok((z.map(|x| p * x * t + c), p))
        }
    }

    #[test]
    fn guidance_scale_one_is_conditional_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let cond = Condition::layout(vec![0.7]);
        let a = sample_from(&Toy, &eps, &cond, &SamplerConfig { steps: 9, cfg_scale: 1.0 }).unwrap();
        // conditional-only Euler by hand
        let dt = 1.0 / 9.0;
        let mut z = eps.clone();
        for s in 0..9 {
            let t = 1.0 - s as f64 * dt;
            let (v, _) = Toy.velocity(&z, t, &cond, None).unwrap();
            z = z.zip_map(&v, |a, b| a - dt * b).unwrap();
        }
        assert_eq!(a, z);
    }

    #[test]
    fn single_step_is_noise_minus_guided_velocity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let eps = Tensor::randn(&[2, 3], 1.0, &mut rng);
        let cond = Condition::layout(vec![0.5]);
        let out = sample_from(&Toy, &eps, &cond, &SamplerConfig { steps: 1, cfg_scale: 3.0 }).unwrap();
        // plan from the conditional branch is 1.5 for both branches
        let vc = eps.map(|x| 1.5 * x + 0.5);
        let vu = eps.map(|x| 1.5 * x);
        let expect = eps.zip_map(&vu.zip_map(&vc, |u, c| u + 3.0 * (c - u)).unwrap(), |e, v| e - v).unwrap();
        assert!(out.max_abs_diff(&expect) < 1e-15);
    }

    struct Exploding;

    impl VelocityModel for Exploding {
        type Plan = ();

        fn velocity(&self, z: &Tensor, _t: f64, _c: &Condition, _p: Option<&()>) -> Result<(Tensor, ())> {
            Ok((z.map(|x| -1e200 * x), ()))
        }
    }

    #[test]
    fn divergence_reports_the_step() {
        let eps = Tensor::full(&[1, 1], 1e200);
        let err = sample_from(&Exploding, &eps, &Condition::null(), &SamplerConfig { steps: 5, cfg_scale: 1.0 }).unwrap_err();
        assert!(matches!(err, Error::SamplerDiverged { step: 0 }));
        assert!(sample_from(&Toy, &eps, &Condition::null(), &SamplerConfig { steps: 0, cfg_scale: 1.0 }).is_err());
    }

    #[test]
    fn model_sampling_is_deterministic() {
        let cfg = ModelConfig { d_model: 16, heads: 2, block_pairs: 1, vecset_len: 8, latent_dim: 4, grid: 4, ..Default::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = init_model(&cfg, &mut rng).unwrap();
        for (_, t, _) in p.params_and_grads_mut() {
            *t = Tensor::randn(t.shape(), 0.2, &mut rng);
        }
        let m = DitVelocity { params: &p, cfg: &cfg, ids: vec![3, 1, 4] };
        let cond = Condition::layout(vec![1.0; 16]);
        let sc = SamplerConfig { steps: 4, cfg_scale: 2.0 };
        let a = sample(&m, &[3, 8, 4], &cond, &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample(&m, &[3, 8, 4], &cond, &sc, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 8, 4]);
    }
}
