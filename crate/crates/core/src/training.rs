//! Mentor/student training with adaptive knowledge distillation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bra::{BraParams, PatchGeometry, SemanticRepresentation};
use crate::channel::{symbol_count, ChannelRealization, Fading};
use crate::codec::{ForwardOptions, ModelPair, SemanticCodec};
use crate::error::{Error, Result};
use crate::frames::Frame;
use crate::kan::CrClass;
use crate::tape::{Graph, ParamGrads, Parameterized};

/// Floor applied to the mentor loss before it divides the KL term.
pub const MENTOR_LOSS_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Per-forward SNR is drawn uniformly from this range (dB). Equal ends
    /// fix it; `+inf` disables noise.
    pub snr_min_db: f64,
    pub snr_max_db: f64,
    pub fading: Fading,
    pub tau: f64,
    pub seed: u64,
    pub kd_enabled: bool,
    /// Also train a student copy without distillation, from the same init.
    pub control_no_kd: bool,
    /// Optional global gradient-norm clip, per model and step.
    pub clip_norm: Option<f64>,
    /// Where to write a checkpoint if training diverges.
    pub diagnostic_path: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 8,
            lr: 1e-2,
            momentum: 0.9,
            snr_min_db: 0.0,
            snr_max_db: 25.0,
            fading: Fading::Awgn,
            tau: 1.0,
            seed: 0,
            kd_enabled: true,
            control_no_kd: false,
            clip_norm: None,
            diagnostic_path: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.epochs < 1 {
            return bad("epochs must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return bad("tau must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.snr_min_db.is_nan() || self.snr_max_db.is_nan() || self.snr_min_db > self.snr_max_db {
            return bad("snr range must satisfy min <= max");
        }
        if self.snr_min_db != self.snr_max_db && !(self.snr_min_db.is_finite() && self.snr_max_db.is_finite()) {
            return bad("a varying snr range must be finite");
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0) {
                return bad("clip_norm must be positive");
            }
        }
        Ok(())
    }

    pub fn sample_snr<R: Rng>(&self, rng: &mut R) -> f64 {
        if self.snr_min_db == self.snr_max_db {
            self.snr_min_db
        } else {
            rng.gen_range(self.snr_min_db..=self.snr_max_db)
        }
    }
}

/// Mean squared error between two frames.
pub fn task_loss(x: &Frame, x_hat: &Frame) -> Result<f64> {
    crate::metrics::mse(x, x_hat)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KdLoss {
    pub value: f64,
    /// The mentor loss was below the floor and was clamped.
    pub floored: bool,
}

fn log_softmax(row: &[f64], tau: f64) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / tau));
    let lse = row.iter().map(|v| (v / tau - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|v| v / tau - lse).collect()
}

/// Tokenwise `KL(softmax(ŝ_s/τ) ‖ softmax(ŝ_m/τ))`, averaged over tokens and
/// divided by the mentor's task loss.
pub fn kd_loss(
    student: &SemanticRepresentation,
    mentor: &SemanticRepresentation,
    mentor_loss: f64,
    tau: f64,
) -> Result<KdLoss> {
    if student.tokens != mentor.tokens || student.dim != mentor.dim {
        return Err(Error::shape(
            "kd token grid",
            format!("{}x{}", mentor.tokens, mentor.dim),
            format!("{}x{}", student.tokens, student.dim),
        ));
    }
    if !(tau > 0.0) {
        return Err(Error::InvalidInput("tau must be positive".into()));
    }
    let d = student.dim;
    let mut kl = 0.0;
    for t in 0..student.tokens {
        let lp = log_softmax(&student.data[t * d..(t + 1) * d], tau);
        let lq = log_softmax(&mentor.data[t * d..(t + 1) * d], tau);
        kl += lp.iter().zip(&lq).map(|(p, q)| p.exp() * (p - q)).sum::<f64>().max(0.0);
    }
    kl /= student.tokens as f64;
    let (denom, floored) = floor_mentor_loss(mentor_loss);
    Ok(KdLoss {
        value: kl / denom,
        floored,
    })
}

fn floor_mentor_loss(l: f64) -> (f64, bool) {
    if l > MENTOR_LOSS_FLOOR {
        (l, false)
    } else {
        (MENTOR_LOSS_FLOOR, true)
    }
}

/// Result of one training-mode pass.
#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub x_hat: Frame,
    pub s_hat: SemanticRepresentation,
    pub task_loss: f64,
    pub snr_db: f64,
}

fn draw_channel<R: Rng>(cfg: &TrainConfig, len: usize, rng: &mut R) -> Result<(f64, ChannelRealization)> {
    let snr = cfg.sample_snr(rng);
    let n_c = symbol_count(len);
    let real = if snr == f64::INFINITY && cfg.fading == Fading::Awgn {
        ChannelRealization::ideal(n_c)
    } else {
        ChannelRealization::draw(n_c, cfg.fading, snr, rng)?
    };
    Ok((snr, real))
}

/// Runs the codec for `cr` on one frame with a sampled channel.
pub fn forward_pass<R: Rng>(
    frame: &Frame,
    pair: &ModelPair,
    cr: CrClass,
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<ForwardResult> {
    let geom = pair.config.geometry()?;
    let codec = pair.codec(cr);
    let (snr_db, real) = draw_channel(cfg, codec.length(), rng)?;
    let mut g = Graph::new();
    let out = codec.forward_graph(
        &mut g,
        frame,
        &geom,
        &real,
        ForwardOptions {
            shared: pair.shared_extractor(cr),
            routing: None,
        },
    )?;
    let x_hat = Frame::from_f64(
        frame.height,
        frame.width,
        frame.channels,
        frame.index,
        g.value(out.x_hat),
    )?;
    let s_hat = SemanticRepresentation {
        tokens: geom.layout.n_tokens(),
        dim: pair.config.dim,
        data: g.value(out.s_hat).to_vec(),
        frame_index: frame.index,
    };
    let task_loss = task_loss(frame, &x_hat)?;
    Ok(ForwardResult {
        x_hat,
        s_hat,
        task_loss,
        snr_db,
    })
}

/// SGD with classical momentum.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: BTreeMap<String, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: BTreeMap::new(),
        }
    }

    /// Applies `grads` to matching parameters; others are left untouched.
    pub fn step<M: Parameterized>(&mut self, model: &mut M, grads: &ParamGrads) {
        for p in model.params_mut() {
            let Some(g) = grads.get(&p.name) else { continue };
            let v = self
                .velocity
                .entry(p.name.clone())
                .or_insert_with(|| vec![0.0; p.len()]);
            for ((w, vi), gi) in p.data.iter_mut().zip(v.iter_mut()).zip(g) {
                *vi = self.momentum * *vi + gi;
                *w -= self.lr * *vi;
            }
        }
    }
}

fn grad_norm(grads: &ParamGrads) -> f64 {
    grads.values().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

fn clip(grads: &mut ParamGrads, max: f64) {
    let n = grad_norm(grads);
    if n > max {
        let k = max / n;
        grads.values_mut().flatten().for_each(|g| *g *= k);
    }
}

fn accumulate(into: &mut ParamGrads, from: ParamGrads, weight: f64) {
    for (name, g) in from {
        let acc = into.entry(name).or_insert_with(|| vec![0.0; g.len()]);
        for (a, b) in acc.iter_mut().zip(g) {
            *a += weight * b;
        }
    }
}

/// Mean losses over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLosses {
    pub epoch: usize,
    pub mentor_task: f64,
    pub student_task: f64,
    /// Mean distillation term (0 when distillation is off).
    pub student_kd: f64,
    pub control_task: Option<f64>,
    pub val_mentor: Option<f64>,
    pub val_student: Option<f64>,
    pub val_control: Option<f64>,
    /// Samples whose mentor loss hit the floor.
    pub kd_floor_hits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossHistory {
    pub epochs: Vec<EpochLosses>,
}

impl LossHistory {
    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn last(&self) -> Option<&EpochLosses> {
        self.epochs.last()
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut s = String::from(
            "epoch,mentor_task,student_task,student_kd,control_task,val_mentor,val_student,val_control,kd_floor_hits\n",
        );
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{}",
                e.epoch,
                e.mentor_task,
                e.student_task,
                e.student_kd,
                opt(e.control_task),
                opt(e.val_mentor),
                opt(e.val_student),
                opt(e.val_control),
                e.kd_floor_hits
            );
        }
        s
    }
}

const ROLE_MENTOR: u64 = 1;
const ROLE_STUDENT: u64 = 2;
const ROLE_SHUFFLE: u64 = 3;
const ROLE_VAL: u64 = 4;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream per (role, epoch, sample), so no role's draws depend on another's.
fn derive_seed(seed: u64, role: u64, epoch: usize, sample: usize) -> u64 {
    splitmix(splitmix(splitmix(seed ^ role.wrapping_mul(0xA24B_AED4_963E_E407)) ^ epoch as u64) ^ sample as u64)
}

struct SampleOut {
    task: f64,
    kd: f64,
    floored: bool,
    s_hat: Vec<f64>,
    grads: ParamGrads,
}

/// One forward/backward of `codec` on `frame`; `kd` carries the mentor's ŝ and loss.
fn sample_step(
    codec: &SemanticCodec,
    shared: Option<&BraParams>,
    frame: &Frame,
    geom: &PatchGeometry,
    real: &ChannelRealization,
    kd: Option<(&[f64], f64)>,
    tau: f64,
) -> Result<SampleOut> {
    let mut g = Graph::new();
    let out = codec.forward_graph(&mut g, frame, geom, real, ForwardOptions { shared, routing: None })?;
    let x = g.constant(1, geom.pixels(), frame.to_f64());
    let task_v = g.mse(out.x_hat, x);
    let task = g.scalar(task_v);
    let (loss, kd_value, floored) = match kd {
        Some((target, mentor_loss)) => {
            let kl = g.kl_softmax(out.s_hat, target, tau);
            let (denom, floored) = floor_mentor_loss(mentor_loss);
            let scaled = g.scale(kl, 1.0 / denom);
            let v = g.scalar(scaled);
            (g.add(task_v, scaled), v, floored)
        }
        None => (task_v, 0.0, false),
    };
    let grads = g.backward(loss);
    Ok(SampleOut {
        task,
        kd: kd_value,
        floored,
        s_hat: g.value(out.s_hat).to_vec(),
        grads: g.param_grads(&grads),
    })
}

/// Validation MSE of `codec`, with channel draws that depend only on the seed and sample.
fn validate_codec(
    codec: &SemanticCodec,
    shared: Option<&BraParams>,
    frames: &[Frame],
    geom: &PatchGeometry,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for (i, f) in frames.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ROLE_VAL, 0, i));
        let (_, real) = draw_channel(cfg, codec.length(), &mut rng)?;
        let mut g = Graph::new();
        let out = codec.forward_graph(&mut g, f, geom, &real, ForwardOptions { shared, routing: None })?;
        let x = g.constant(1, geom.pixels(), f.to_f64());
        let l = g.mse(out.x_hat, x);
        total += g.scalar(l);
    }
    Ok(total / frames.len() as f64)
}

/// Output of [`train`].
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub pair: ModelPair,
    pub history: LossHistory,
}

fn check_finite(grads: &ParamGrads, loss: f64, what: &str) -> std::result::Result<(), String> {
    if !loss.is_finite() {
        return Err(format!("{what} loss is {loss}"));
    }
    if let Some((name, _)) = grads.iter().find(|(_, g)| g.iter().any(|v| !v.is_finite())) {
        return Err(format!("{what} gradient of {name} is not finite"));
    }
    Ok(())
}

/// Trains mentor and student jointly. The mentor minimizes its task loss; the
/// student minimizes its task loss plus the distillation term. With
/// `control_no_kd`, a student copy from the same init is trained on the task
/// loss alone under identical data order and channel draws.
pub fn train(dataset: &[Frame], mut pair: ModelPair, cfg: &TrainConfig, val: Option<&[Frame]>) -> Result<TrainOutcome> {
    cfg.validate()?;
    pair.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training set is empty".into()));
    }
    let geom = pair.config.geometry()?;
    for f in dataset.iter().chain(val.unwrap_or(&[])) {
        geom.check_frame(f)?;
    }
    if cfg.control_no_kd && pair.student_no_kd.is_none() {
        pair.student_no_kd = Some(pair.student.clone());
    }
    let mut opt_m = Sgd::new(cfg.lr, cfg.momentum);
    let mut opt_s = Sgd::new(cfg.lr, cfg.momentum);
    let mut opt_c = Sgd::new(cfg.lr, cfg.momentum);
    let mut history = LossHistory::default();
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
            cfg.seed,
            ROLE_SHUFFLE,
            epoch,
            0,
        )));
        let (mut sum_m, mut sum_s, mut sum_kd, mut sum_c) = (0.0, 0.0, 0.0, 0.0);
        let mut floor_hits = 0;

        for batch in order.chunks(cfg.batch_size) {
            let w = 1.0 / batch.len() as f64;
            let (mut gm, mut gs, mut gc) = (ParamGrads::new(), ParamGrads::new(), ParamGrads::new());
            let shared = pair.shared_extractor(CrClass::StaticHighCr);
            let mut failure = None;
            for &i in batch {
                let frame = &dataset[i];
                let mut rng_m = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ROLE_MENTOR, epoch, i));
                let (_, real_m) = draw_channel(cfg, pair.mentor.length(), &mut rng_m)?;
                let m = sample_step(&pair.mentor, None, frame, &geom, &real_m, None, cfg.tau)?;

                let mut rng_s = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, ROLE_STUDENT, epoch, i));
                let (_, real_s) = draw_channel(cfg, pair.student.length(), &mut rng_s)?;
                let kd = cfg.kd_enabled.then_some((m.s_hat.as_slice(), m.task));
                let s = sample_step(&pair.student, shared, frame, &geom, &real_s, kd, cfg.tau)?;

                let c = match &pair.student_no_kd {
                    Some(control) => Some(sample_step(control, shared, frame, &geom, &real_s, None, cfg.tau)?),
                    None => None,
                };

                let checks = [
                    check_finite(&m.grads, m.task, "mentor"),
                    check_finite(&s.grads, s.task + s.kd, "student"),
                    c.as_ref().map_or(Ok(()), |c| check_finite(&c.grads, c.task, "control")),
                ];
                if let Some(Err(reason)) = checks.into_iter().find(|r| r.is_err()) {
                    failure = Some(reason);
                    break;
                }

                sum_m += m.task;
                sum_s += s.task;
                sum_kd += s.kd;
                floor_hits += s.floored as usize;
                accumulate(&mut gm, m.grads, w);
                accumulate(&mut gs, s.grads, w);
                if let Some(c) = c {
                    sum_c += c.task;
                    accumulate(&mut gc, c.grads, w);
                }
            }
            if let Some(reason) = failure {
                return Err(diverged(&pair, cfg, epoch, step, reason));
            }
            if let Some(max) = cfg.clip_norm {
                clip(&mut gm, max);
                clip(&mut gs, max);
                clip(&mut gc, max);
            }
            opt_m.step(&mut pair.mentor, &gm);
            opt_s.step(&mut pair.student, &gs);
            if let Some(control) = pair.student_no_kd.as_mut() {
                opt_c.step(control, &gc);
            }
            step += 1;
        }

        let n = dataset.len() as f64;
        let (val_mentor, val_student, val_control) = match val.filter(|v| !v.is_empty()) {
            Some(v) => {
                let shared = pair.shared_extractor(CrClass::StaticHighCr);
                let vm = validate_codec(&pair.mentor, None, v, &geom, cfg)?;
                let vs = validate_codec(&pair.student, shared, v, &geom, cfg)?;
                let vc = match &pair.student_no_kd {
                    Some(c) => Some(validate_codec(c, shared, v, &geom, cfg)?),
                    None => None,
                };
                (Some(vm), Some(vs), vc)
            }
            None => (None, None, None),
        };
        let e = EpochLosses {
            epoch: epoch + 1,
            mentor_task: sum_m / n,
            student_task: sum_s / n,
            student_kd: sum_kd / n,
            control_task: pair.student_no_kd.as_ref().map(|_| sum_c / n),
            val_mentor,
            val_student,
            val_control,
            kd_floor_hits: floor_hits,
        };
        log::info!(
            "epoch {}: mentor {:.5} student {:.5} kd {:.5}{}",
            e.epoch,
            e.mentor_task,
            e.student_task,
            e.student_kd,
            e.val_student
                .map(|v| format!(" val_student {v:.5}"))
                .unwrap_or_default()
        );
        if floor_hits > 0 {
            log::warn!("epoch {}: mentor loss floored for {floor_hits} samples", e.epoch);
        }
        history.epochs.push(e);
    }
    Ok(TrainOutcome { pair, history })
}

fn diverged(pair: &ModelPair, cfg: &TrainConfig, epoch: usize, step: usize, reason: String) -> Error {
    let checkpoint =
        cfg.diagnostic_path
            .as_ref()
            .and_then(|path| match crate::checkpoint::save_checkpoint(pair, cfg.seed, path) {
                Ok(()) => Some(path.clone()),
                Err(e) => {
                    log::error!("could not write diagnostic checkpoint: {e}");
                    None
                }
            });
    Error::Diverged {
        epoch: epoch + 1,
        step,
        reason,
        checkpoint,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::ModelConfig;
    use crate::kan::{CrLengths, SplineBasis};

    fn micro() -> ModelConfig {
        ModelConfig {
            height: 8,
            width: 8,
            channels: 1,
            patch: 2,
            regions_per_side: 2,
            dim: 4,
            top_k: 2,
            heads: 1,
            lce: true,
            encoder_hidden: vec![],
            expander_hidden: vec![],
            decoder_depth: 1,
            decoder_mlp: 8,
            spline: SplineBasis::default(),
            lengths: CrLengths {
                static_high: 2,
                dynamic_low: 8,
            },
            shared_extractor: false,
        }
    }

    fn frames(n: usize) -> Vec<Frame> {
        (0..n)
            .map(|i| {
                let px = (0..64).map(|j| ((i * 7 + j * 3) % 11) as f32 / 10.0).collect();
                Frame::new(8, 8, 1, i + 1, px).unwrap()
            })
            .collect()
    }

    fn pair(seed: u64) -> ModelPair {
        ModelPair::new(micro(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn rep(data: Vec<f64>, tokens: usize, dim: usize) -> SemanticRepresentation {
        SemanticRepresentation {
            tokens,
            dim,
            data,
            frame_index: 1,
        }
    }

    #[test]
    fn task_loss_examples() {
        let a = Frame::new(1, 2, 1, 1, vec![0.0, 1.0]).unwrap();
        let b = Frame::new(1, 2, 1, 1, vec![1.0, 1.0]).unwrap();
        assert_eq!(task_loss(&a, &a).unwrap(), 0.0);
        assert!((task_loss(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_hand_case() {
        let s = rep(vec![1.0, 2.0, 3.0], 1, 3);
        let m = rep(vec![0.5, 0.5, 2.0], 1, 3);
        let sm = |v: &[f64]| {
            let z: f64 = v.iter().map(|x| x.exp()).sum();
            v.iter().map(|x| x.exp() / z).collect::<Vec<_>>()
        };
        let (p, q) = (sm(&s.data), sm(&m.data));
        let kl: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        let k = kd_loss(&s, &m, 0.25, 1.0).unwrap();
        assert!((k.value - kl / 0.25).abs() < 1e-12);
        let k2 = kd_loss(&s, &m, 0.5, 1.0).unwrap();
        assert!((k2.value - k.value / 2.0).abs() < 1e-12);
        assert_eq!(kd_loss(&s, &s, 0.3, 1.0).unwrap().value, 0.0);
        let f = kd_loss(&s, &m, 0.0, 1.0).unwrap();
        assert!(f.floored && f.value.is_finite());
    }

    #[test]
    fn forward_pass_deterministic_without_noise() {
        let p = pair(1);
        let cfg = TrainConfig {
            snr_min_db: f64::INFINITY,
            snr_max_db: f64::INFINITY,
            ..TrainConfig::default()
        };
        let f = &frames(1)[0];
        let a = forward_pass(f, &p, CrClass::StaticHighCr, &cfg, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = forward_pass(f, &p, CrClass::StaticHighCr, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.x_hat, b.x_hat);
        assert!(a.task_loss >= 0.0);
    }

    #[test]
    fn single_step_descends() {
        let data = frames(1);
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 1,
            lr: 1e-3,
            momentum: 0.0,
            snr_min_db: f64::INFINITY,
            snr_max_db: f64::INFINITY,
            kd_enabled: false,
            ..TrainConfig::default()
        };
        let p = pair(3);
        let before = forward_pass(
            &data[0],
            &p,
            CrClass::StaticHighCr,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
        .task_loss;
        let out = train(&data, p, &cfg, None).unwrap();
        let after = forward_pass(
            &data[0],
            &out.pair,
            CrClass::StaticHighCr,
            &cfg,
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap()
        .task_loss;
        assert!(after <= before, "{after} > {before}");
    }

    #[test]
    fn no_kd_student_matches_control() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            kd_enabled: false,
            control_no_kd: true,
            ..TrainConfig::default()
        };
        let out = train(&frames(5), pair(4), &cfg, Some(&frames(2))).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(Some(&out.pair.student), out.pair.student_no_kd.as_ref());
        let last = out.history.last().unwrap();
        assert_eq!(Some(last.student_task), last.control_task);
    }

    #[test]
    fn mentor_ignores_student() {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 3,
            ..TrainConfig::default()
        };
        let a = train(&frames(4), pair(5), &cfg, None).unwrap();
        let mut zeroed = pair(5);
        zeroed.student.params_mut().into_iter().for_each(|p| p.data.fill(0.0));
        let b = train(&frames(4), zeroed, &cfg, None).unwrap();
        assert_eq!(a.pair.mentor, b.pair.mentor);
    }

    #[test]
    fn divergence_reports_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut p = pair(6);
        p.mentor.decoder.head_b.data.fill(f64::NAN);
        let cfg = TrainConfig {
            epochs: 1,
            diagnostic_path: Some(dir.path().join("diag.ckpt")),
            ..TrainConfig::default()
        };
        match train(&frames(2), p, &cfg, None) {
            Err(Error::Diverged { checkpoint, .. }) => assert!(checkpoint.unwrap().exists()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            tau: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }
}
