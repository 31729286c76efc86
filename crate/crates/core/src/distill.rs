//! Fitting a [`PolicyArtifact`] by imitation. The teacher is a state-only
//! TVLQR law, so the student network can represent it; DAgger rounds add the
//! states the student itself visits, labelled by the teacher.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelParams, State, MOTOR_TORQUE_LIMIT};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::rl_env::{Activation, BrachiationEnv, EnvConfig, Layer, PolicyArtifact, RewardConfig};
use crate::sim::repetition_rng;
use crate::trajectory::Trajectory;
use crate::trajopt::WorldGeometry;
use crate::tvlqr::{feedback, GainSchedule};

/// TVLQR evaluated at the nominal state nearest in the cost-to-go metric.
/// Unlike the tracker it has no memory, which is what a feed-forward policy
/// can imitate. Plain Euclidean distance picks the wrong pass on this
/// nominal, whose angle and rate scales differ a lot.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub gain: &'a GainSchedule,
    pub nominal: &'a Trajectory,
}

impl Teacher<'_> {
    pub fn torque(&self, x: &State) -> f64 {
        let xv = x.to_vector();
        let horizon = self.nominal.duration();
        let mut best = (f64::INFINITY, 0.0);
        for (&t, s) in self.gain.times().iter().zip(self.gain.cost_to_go()).filter(|(t, _)| **t <= horizon) {
            let e = self.nominal.state_at(t).to_vector() - xv;
            let d = (e.transpose() * s * e)[0];
            if d < best.0 {
                best = (d, t);
            }
        }
        feedback(self.gain, self.nominal, x, best.1)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DistillConfig {
    pub hidden: Vec<usize>,
    pub rounds: usize,
    pub episodes_per_round: usize,
    pub epochs: usize,
    pub batch: usize,
    pub learning_rate: f64,
    /// Probability of executing the teacher's action in round `k` is `teacher_mix^k`.
    pub teacher_mix: f64,
    /// Extra copies of each visited state with observation-noise inputs.
    pub noisy_copies: usize,
    pub seed: u64,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            hidden: vec![32, 32],
            rounds: 6,
            episodes_per_round: 24,
            epochs: 30,
            batch: 64,
            learning_rate: 2e-3,
            teacher_mix: 0.5,
            noisy_copies: 1,
            seed: 0,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = !self.hidden.is_empty()
            && self.hidden.iter().all(|h| *h > 0)
            && self.rounds > 0
            && self.episodes_per_round > 0
            && self.batch > 0
            && self.learning_rate > 0.0
            && (0.0..=1.0).contains(&self.teacher_mix);
        if !ok {
            return Err(Error::Config(format!("invalid distillation config: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: usize,
    pub samples: usize,
    /// Mean squared torque error over the aggregated data set, N²·m².
    pub loss: f64,
    /// Episodes in this round's collection that reached the target.
    pub successes: usize,
}

/// Trainable copy of the network in matrix form.
struct Net {
    w: Vec<DMatrix<f64>>,
    b: Vec<DVector<f64>>,
    acts: Vec<Activation>,
}

struct Adam {
    m: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
    mb: Vec<DVector<f64>>,
    vb: Vec<DVector<f64>>,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

impl Net {
    fn init(sizes: &[usize], rng: &mut ChaCha8Rng) -> Self {
        let mut w = Vec::new();
        let mut b = Vec::new();
        let mut acts = Vec::new();
        for k in 0..sizes.len() - 1 {
            let (n_in, n_out) = (sizes[k], sizes[k + 1]);
            let sd = (1.0 / n_in as f64).sqrt();
            let n = Normal::new(0.0, sd).expect("positive sd");
            w.push(DMatrix::from_fn(n_out, n_in, |_, _| n.sample(rng)));
            b.push(DVector::zeros(n_out));
            // A tanh on the output keeps the torque inside the motor limit.
            acts.push(Activation::Tanh);
        }
        Self { w, b, acts }
    }

    fn act(a: Activation, z: &DVector<f64>) -> DVector<f64> {
        match a {
            Activation::Tanh => z.map(f64::tanh),
            Activation::Relu => z.map(|v| v.max(0.0)),
            Activation::Identity => z.clone(),
        }
    }

    fn act_grad(a: Activation, out: &DVector<f64>) -> DVector<f64> {
        match a {
            Activation::Tanh => out.map(|y| 1.0 - y * y),
            Activation::Relu => out.map(|y| if y > 0.0 { 1.0 } else { 0.0 }),
            Activation::Identity => out.map(|_| 1.0),
        }
    }

    /// Layer outputs, input first.
    fn forward(&self, x: DVector<f64>) -> Vec<DVector<f64>> {
        let mut outs = vec![x];
        for ((w, b), a) in self.w.iter().zip(&self.b).zip(&self.acts) {
            let z = w * outs.last().unwrap() + b;
            outs.push(Self::act(*a, &z));
        }
        outs
    }

    /// Squared-error gradient summed over a batch.
    fn gradient(&self, xs: &[DVector<f64>], ys: &[f64]) -> (Vec<DMatrix<f64>>, Vec<DVector<f64>>, f64) {
        let mut gw: Vec<DMatrix<f64>> = self.w.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect();
        let mut gb: Vec<DVector<f64>> = self.b.iter().map(|b| DVector::zeros(b.len())).collect();
        let mut loss = 0.0;
        for (x, y) in xs.iter().zip(ys) {
            let outs = self.forward(x.clone());
            let e = outs.last().unwrap()[0] - y;
            loss += e * e;
            let mut delta = DVector::from_element(1, 2.0 * e);
            for k in (0..self.w.len()).rev() {
                let dz = delta.component_mul(&Self::act_grad(self.acts[k], &outs[k + 1]));
                gw[k] += &dz * outs[k].transpose();
                gb[k] += &dz;
                delta = self.w[k].transpose() * dz;
            }
        }
        (gw, gb, loss)
    }

    fn adam(&self) -> Adam {
        Adam {
            m: self.w.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            v: self.w.iter().map(|w| DMatrix::zeros(w.nrows(), w.ncols())).collect(),
            mb: self.b.iter().map(|b| DVector::zeros(b.len())).collect(),
            vb: self.b.iter().map(|b| DVector::zeros(b.len())).collect(),
            t: 0,
        }
    }

    fn apply(&mut self, opt: &mut Adam, gw: &[DMatrix<f64>], gb: &[DVector<f64>], lr: f64) {
        opt.t += 1;
        let c1 = 1.0 - BETA1.powi(opt.t);
        let c2 = 1.0 - BETA2.powi(opt.t);
        for k in 0..self.w.len() {
            opt.m[k] = &opt.m[k] * BETA1 + &gw[k] * (1.0 - BETA1);
            opt.v[k] = &opt.v[k] * BETA2 + gw[k].map(|g| g * g) * (1.0 - BETA2);
            self.w[k] -= opt.m[k].zip_map(&opt.v[k], |m, v| lr * (m / c1) / ((v / c2).sqrt() + EPS));
            opt.mb[k] = &opt.mb[k] * BETA1 + &gb[k] * (1.0 - BETA1);
            opt.vb[k] = &opt.vb[k] * BETA2 + gb[k].map(|g| g * g) * (1.0 - BETA2);
            self.b[k] -= opt.mb[k].zip_map(&opt.vb[k], |m, v| lr * (m / c1) / ((v / c2).sqrt() + EPS));
        }
    }

    fn artifact(&self, sizes: &[usize], mean: &[f64; 4], scale: &[f64; 4]) -> PolicyArtifact {
        PolicyArtifact {
            sizes: sizes.to_vec(),
            input_mean: mean.to_vec(),
            input_scale: scale.to_vec(),
            layers: self
                .w
                .iter()
                .zip(&self.b)
                .zip(&self.acts)
                .map(|((w, b), a)| Layer {
                    weights: (0..w.nrows()).map(|i| w.row(i).iter().copied().collect()).collect(),
                    bias: b.iter().copied().collect(),
                    activation: *a,
                })
                .collect(),
            output_scale: MOTOR_TORQUE_LIMIT,
            opposite_arm: false,
        }
    }
}

/// Observations and teacher labels from one episode.
fn collect(
    teacher: &Teacher,
    student: Option<&PolicyArtifact>,
    mix: f64,
    env: &mut BrachiationEnv,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<([f64; 4], f64)>, bool)> {
    let mut obs = env.reset();
    let mut data = Vec::new();
    loop {
        let x = env.state();
        let label = teacher.torque(&x);
        data.push((x.to_array(), label));
        let u = match student {
            Some(s) if rng.random::<f64>() >= mix => s.act(&obs),
            _ => label,
        };
        let r = env.step(u)?;
        obs = r.observation;
        if r.terminated {
            return Ok((data, r.info.success));
        }
    }
}

/// Trains a policy imitating `teacher` on the environment's episodes.
pub fn distill(
    params: &ModelParams,
    teacher: &Teacher,
    env: &EnvConfig,
    reward: &RewardConfig,
    world: &WorldGeometry,
    cfg: &DistillConfig,
    exec: Execution,
) -> Result<(PolicyArtifact, Vec<RoundReport>)> {
    cfg.validate()?;
    env.validate()?;
    let mut sizes = vec![4];
    sizes.extend(&cfg.hidden);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, env.obs_noise_sigma.max(1e-12)).expect("positive sigma");

    let mut states: Vec<[f64; 4]> = Vec::new();
    let mut labels: Vec<f64> = Vec::new();
    let mut net: Option<Net> = None;
    let mut norm = ([0.0; 4], [1.0; 4]);
    let mut student: Option<PolicyArtifact> = None;
    let mut reports = Vec::new();

    for round in 0..cfg.rounds {
        let mix = cfg.teacher_mix.powi(round as i32);
        let base = cfg.seed.wrapping_mul(1_000_003).wrapping_add(round as u64 * 10_000);
        let batches = par::map_indices(exec, cfg.episodes_per_round, |ep| {
            let mut e = BrachiationEnv::new(params, env.clone(), reward.clone(), *world, repetition_rng(base, ep))?;
            let mut r = repetition_rng(base ^ 0x5eed, ep);
            collect(teacher, student.as_ref(), mix, &mut e, &mut r)
        });
        let mut successes = 0;
        for b in batches {
            let (data, ok) = b?;
            successes += usize::from(ok);
            for (x, u) in data {
                states.push(x);
                labels.push(u);
                for _ in 0..cfg.noisy_copies {
                    states.push(x.map(|v| v + noise.sample(&mut rng)));
                    labels.push(u);
                }
            }
        }

        if net.is_none() {
            norm = normalization(&states);
            net = Some(Net::init(&sizes, &mut rng));
        }
        let n = net.as_mut().unwrap();
        let inputs: Vec<DVector<f64>> =
            states.iter().map(|s| DVector::from_iterator(4, (0..4).map(|i| (s[i] - norm.0[i]) / norm.1[i]))).collect();
        let targets: Vec<f64> = labels.iter().map(|u| u / MOTOR_TORQUE_LIMIT).collect();
        let mut opt = n.adam();
        let mut order: Vec<usize> = (0..inputs.len()).collect();
        let mut loss = 0.0;
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            loss = 0.0;
            for chunk in order.chunks(cfg.batch) {
                let xs: Vec<DVector<f64>> = chunk.iter().map(|&i| inputs[i].clone()).collect();
                let ys: Vec<f64> = chunk.iter().map(|&i| targets[i]).collect();
                let (mut gw, mut gb, l) = n.gradient(&xs, &ys);
                loss += l;
                let s = 1.0 / chunk.len() as f64;
                gw.iter_mut().for_each(|g| *g *= s);
                gb.iter_mut().for_each(|g| *g *= s);
                n.apply(&mut opt, &gw, &gb, cfg.learning_rate);
            }
        }
        let mse = loss / inputs.len() as f64 * MOTOR_TORQUE_LIMIT * MOTOR_TORQUE_LIMIT;
        student = Some(n.artifact(&sizes, &norm.0, &norm.1));
        reports.push(RoundReport { round, samples: inputs.len(), loss: mse, successes });
    }
    let policy = student.expect("at least one round");
    policy.validate()?;
    Ok((policy, reports))
}

fn normalization(states: &[[f64; 4]]) -> ([f64; 4], [f64; 4]) {
    let n = states.len() as f64;
    let mut mean = [0.0; 4];
    let mut scale = [0.0; 4];
    for s in states {
        for i in 0..4 {
            mean[i] += s[i] / n;
        }
    }
    for s in states {
        for i in 0..4 {
            scale[i] += (s[i] - mean[i]).powi(2) / n;
        }
    }
    (mean, scale.map(|v| v.sqrt().max(1e-6)))
}
