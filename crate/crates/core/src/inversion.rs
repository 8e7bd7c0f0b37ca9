//! Latent code recovery: gradient descent on `Σ |x − G(z)|` with the
//! generator frozen.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::optim::{AdamConfig, AdamState};

#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode(Vec<f32>);

impl LatentCode {
    pub fn new(values: Vec<f32>) -> Self {
        Self(values)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn values(&self) -> &[f32] {
        &self.0
    }

    /// `[1, latent_dim]` row tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[1, self.0.len()], self.0.clone()).expect("row shape matches length")
    }
}

/// A differentiable map from a `[1, latent_dim]` code to an image-like tensor.
pub trait LatentGenerator {
    fn latent_dim(&self) -> usize;

    /// Shape of the tensor produced for a single code.
    fn output_shape(&self) -> Vec<usize>;

    /// Record the frozen generator on `tape`.
    fn forward<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var>;
}

impl LatentGenerator for GanModel {
    fn latent_dim(&self) -> usize {
        self.arch().latent_dim
    }

    fn output_shape(&self) -> Vec<usize> {
        self.arch().image_shape(1).to_vec()
    }

    fn forward<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        self.generator_on(tape, z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LatentOptimizer {
    PlainGradient,
    Adam,
}

impl std::str::FromStr for LatentOptimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "plain" | "plain-gradient" | "sgd" => Ok(Self::PlainGradient),
            other => Err(Error::contract(format!("unknown latent optimizer `{other}`"))),
        }
    }
}

/// Step size as a function of progress through the budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LrSchedule {
    Constant,
    /// Half cosine from `lr` down to zero at the last step.
    Cosine,
}

impl LrSchedule {
    pub fn at(self, lr: f32, step: usize, steps: usize) -> f32 {
        match self {
            Self::Constant => lr,
            Self::Cosine => {
                let t = step as f64 / steps as f64;
                (lr as f64 * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())) as f32
            }
        }
    }
}

impl std::str::FromStr for LrSchedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::contract(format!("unknown lr schedule `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionConfig {
    pub steps: usize,
    pub lr: f32,
    pub optimizer: LatentOptimizer,
    pub restarts: usize,
    pub seed: u64,
    /// Clamp `z` to `[-1, 1]` after every update.
    pub clip: bool,
    pub schedule: LrSchedule,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 0.01,
            optimizer: LatentOptimizer::Adam,
            restarts: 1,
            seed: 0,
            clip: false,
            schedule: LrSchedule::Cosine,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::contract("inversion steps must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::contract(format!("inversion lr must be > 0, got {}", self.lr)));
        }
        if self.restarts == 0 {
            return Err(Error::contract("inversion restarts must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult {
    pub best_z: LatentCode,
    /// `G(best_z)`.
    pub background: Tensor,
    pub best_loss: f32,
    /// Loss of every evaluated iterate. Each restart contributes `steps + 1`
    /// entries: its starting point and the iterate after every update.
    pub trajectory: Vec<f32>,
}

impl InversionResult {
    /// Running minimum of the trajectory.
    pub fn best_so_far(&self) -> Vec<f32> {
        self.trajectory
            .iter()
            .scan(f32::INFINITY, |best, &l| {
                *best = best.min(l);
                Some(*best)
            })
            .collect()
    }

    /// `step,loss` CSV of the trajectory.
    pub fn trajectory_csv(&self) -> String {
        let mut out = String::from("step,loss\n");
        for (i, l) in self.trajectory.iter().enumerate() {
            let _ = writeln!(out, "{i},{l}");
        }
        out
    }
}

/// `Σ |x − gz|` over all elements, accumulated in f64.
pub fn residual_loss(x: &Tensor, gz: &Tensor) -> Result<f32> {
    if x.shape() != gz.shape() {
        return Err(Error::dim(format!(
            "residual_loss: shapes {:?} and {:?} differ",
            x.shape(),
            gz.shape()
        )));
    }
    Ok(x.data()
        .iter()
        .zip(gz.data())
        .map(|(&a, &b)| (a - b).abs() as f64)
        .sum::<f64>() as f32)
}

/// Invert `x` from `cfg.restarts` uniform starting codes drawn from `cfg.seed`.
pub fn invert<G: LatentGenerator + ?Sized>(
    generator: &G,
    x: &Tensor,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    check_target(generator, x)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<InversionResult> = None;
    for _ in 0..cfg.restarts {
        let z0: Vec<f32> = (0..generator.latent_dim())
            .map(|_| rng.random_range(-1.0f32..=1.0))
            .collect();
        let prefix = best.as_ref().map_or(0, |b| b.trajectory.len());
        let run = descend(generator, x, LatentCode::new(z0), cfg, prefix)?;
        best = Some(match best {
            None => run,
            Some(mut b) => {
                let improved = run.best_loss < b.best_loss;
                b.trajectory.extend_from_slice(&run.trajectory);
                if improved {
                    b.best_z = run.best_z;
                    b.background = run.background;
                    b.best_loss = run.best_loss;
                }
                b
            }
        });
    }
    Ok(best.expect("restarts >= 1"))
}

/// Invert `x` starting from a given code; `cfg.restarts` and `cfg.seed` are ignored.
pub fn invert_from<G: LatentGenerator + ?Sized>(
    generator: &G,
    x: &Tensor,
    z0: &LatentCode,
    cfg: &InversionConfig,
) -> Result<InversionResult> {
    cfg.validate()?;
    check_target(generator, x)?;
    if z0.len() != generator.latent_dim() {
        return Err(Error::dim(format!(
            "starting code has {} entries, generator expects {}",
            z0.len(),
            generator.latent_dim()
        )));
    }
    descend(generator, x, z0.clone(), cfg, 0)
}

fn check_target<G: LatentGenerator + ?Sized>(generator: &G, x: &Tensor) -> Result<()> {
    let want = generator.output_shape();
    if x.shape() != want.as_slice() {
        return Err(Error::dim(format!(
            "inversion target {:?} does not match generator output {:?}",
            x.shape(),
            want
        )));
    }
    Ok(())
}

/// Loss and gradient at `z`, plus the generated image.
fn evaluate<G: LatentGenerator + ?Sized>(generator: &G, x: &Tensor, z: &[f32]) -> Result<(f32, Vec<f32>, Tensor)> {
    let mut tape = Tape::new();
    let zv = tape.leaf(Tensor::new(&[1, z.len()], z.to_vec())?, true);
    let xv = tape.borrowed(x, false);
    let gz = generator.forward(&mut tape, zv)?;
    let loss = tape.l1_sum(xv, gz)?;
    let value = tape.value(loss)?.item()?;
    let image = tape.value(gz)?.clone();
    tape.backward(loss)?;
    let grad = tape
        .take_grad(zv)
        .map(Tensor::into_data)
        .unwrap_or_else(|| vec![0.0; z.len()]);
    Ok((value, grad, image))
}

fn descend<G: LatentGenerator + ?Sized>(
    generator: &G,
    x: &Tensor,
    z0: LatentCode,
    cfg: &InversionConfig,
    step_offset: usize,
) -> Result<InversionResult> {
    let mut z = z0.0;
    let mut state = AdamState::new([z.len()]);
    let mut trajectory = Vec::with_capacity(cfg.steps + 1);
    let mut best: Option<(f32, Vec<f32>, Tensor)> = None;
    for step in 0..=cfg.steps {
        let (loss, grad, image) = evaluate(generator, x, &z)?;
        if !loss.is_finite() {
            return Err(Error::Numeric {
                step: step_offset + step,
                value: loss,
            });
        }
        trajectory.push(loss);
        if best.as_ref().is_none_or(|(b, _, _)| loss < *b) {
            best = Some((loss, z.clone(), image));
        }
        if step == cfg.steps || loss == 0.0 {
            if step < cfg.steps {
                // An exact reconstruction has a zero subgradient; the
                // remaining iterates would repeat it.
                trajectory.resize(cfg.steps + 1, 0.0);
            }
            break;
        }
        let lr = cfg.schedule.at(cfg.lr, step, cfg.steps);
        match cfg.optimizer {
            LatentOptimizer::PlainGradient => {
                for (zi, gi) in z.iter_mut().zip(&grad) {
                    *zi -= lr * gi;
                }
            }
            LatentOptimizer::Adam => {
                let adam = AdamConfig::new(lr, 0.9, 0.999);
                state.update(&adam, [(z.as_mut_slice(), grad.as_slice())])?
            }
        }
        if cfg.clip {
            for zi in &mut z {
                *zi = zi.clamp(-1.0, 1.0);
            }
        }
    }
    let (best_loss, best_z, background) = best.expect("at least one evaluation");
    Ok(InversionResult {
        best_z: LatentCode(best_z),
        background,
        best_loss,
        trajectory,
    })
}
