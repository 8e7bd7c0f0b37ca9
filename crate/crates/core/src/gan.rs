//! DCGAN-style generator/discriminator pair and adversarial training.
//!
//! The generator projects a latent vector to a `4×4` feature map and doubles
//! the resolution with stride-2 transposed convolutions until it reaches the
//! image size; the discriminator mirrors it with stride-2 convolutions and a
//! sigmoid head. Generator feature maps are channel-normalized with batch
//! statistics during training and with stored population statistics at
//! inference, so `generate` is a fixed function of `z`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::dataio::Frame;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::inversion::LatentCode;
use crate::optim::{AdamConfig, AdamState};

pub const LEAKY_SLOPE: f32 = 0.2;
pub const NORM_EPS: f32 = 1e-5;
const NORM_MOMENTUM: f32 = 0.1;
const KERNEL: usize = 4;

/// Shape metadata shared by the generator and discriminator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Architecture {
    pub latent_dim: usize,
    /// Pixels per side; a power of two, at least 8.
    pub image_size: usize,
    pub channels: usize,
    /// Channels of the generator's `4×4` projection; halved at every upsampling stage.
    pub gen_width: usize,
    /// Channels of the discriminator's last `4×4` feature map.
    pub disc_width: usize,
}

impl Architecture {
    pub fn new(latent_dim: usize, image_size: usize, channels: usize) -> Self {
        Self {
            latent_dim,
            image_size,
            channels,
            gen_width: 128,
            disc_width: 128,
        }
    }

    /// Number of stride-2 stages between `4×4` and the image size.
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.channels == 0 {
            return Err(Error::contract("latent_dim and channels must be >= 1"));
        }
        if self.image_size < 8 || !self.image_size.is_power_of_two() {
            return Err(Error::contract(format!(
                "image_size must be a power of two >= 8, got {}",
                self.image_size
            )));
        }
        let shrink = 1usize << (self.stages() - 1);
        for (what, w) in [("gen_width", self.gen_width), ("disc_width", self.disc_width)] {
            if w == 0 || w % shrink != 0 {
                return Err(Error::contract(format!(
                    "{what} {w} must be a positive multiple of {shrink} for {}px images",
                    self.image_size
                )));
            }
        }
        Ok(())
    }

    pub fn image_shape(&self, n: usize) -> [usize; 4] {
        [n, self.channels, self.image_size, self.image_size]
    }

    fn gen_channels(&self, stage: usize) -> usize {
        if stage == self.stages() {
            self.channels
        } else {
            self.gen_width >> stage
        }
    }

    fn disc_channels(&self, layer: usize) -> usize {
        if layer == 0 {
            self.channels
        } else {
            self.disc_width >> (self.stages() - layer)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub tensor: Tensor,
}

/// Ordered set of named parameter tensors.
///
/// Entries named `*.mean` / `*.var` are normalization statistics: they are
/// persisted with the model but never receive gradients.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamSet {
    entries: Vec<NamedTensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.push(NamedTensor {
            name: name.into(),
            tensor,
        });
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.entries.iter()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.position(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.position(name).map(|i| &mut self.entries[i].tensor)
    }

    fn position(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    fn index_of(&self, name: &str) -> usize {
        self.position(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from a validated set"))
    }

    pub fn is_trainable(name: &str) -> bool {
        !(name.ends_with(".mean") || name.ends_with(".var"))
    }

    fn trainable_sizes(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|e| Self::is_trainable(&e.name))
            .map(|e| e.tensor.len())
            .collect()
    }

    fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.tensor.shape() == b.tensor.shape())
    }

    /// Put every entry on the tape; trainable ones require gradients when `train` is set.
    fn vars<'a>(&'a self, tape: &mut Tape<'a>, train: bool) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| tape.borrowed(&e.tensor, train && Self::is_trainable(&e.name)))
            .collect()
    }

    /// Adam step over the trainable entries using gradients left on `tape`.
    fn apply_gradients(&mut self, grads: Vec<Option<Tensor>>, state: &mut AdamState, adam: &AdamConfig) -> Result<()> {
        let mut slots = Vec::new();
        let mut owned = Vec::new();
        for (e, g) in self.entries.iter().zip(grads) {
            if Self::is_trainable(&e.name) {
                owned.push(g.unwrap_or_else(|| Tensor::zeros(e.tensor.shape())));
            }
        }
        let mut it = owned.iter();
        for e in self.entries.iter_mut() {
            if Self::is_trainable(&e.name) {
                let g = it.next().expect("one gradient per trainable entry");
                slots.push((e.tensor.data_mut(), g.data()));
            }
        }
        state.update(adam, slots)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormMode {
    /// Statistics of the current batch (training).
    Batch,
    /// Stored population statistics (inference).
    Stored,
}

/// Generator and discriminator parameters with their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct GanModel {
    arch: Architecture,
    gen: ParamSet,
    disc: ParamSet,
}

struct GenGraph {
    out: Var,
    vars: Vec<Var>,
    /// `(stage, norm node)` pairs, in stage order.
    norms: Vec<(usize, Var)>,
}

impl GanModel {
    /// Freshly initialized model: conv/dense weights `N(0, 0.02)`, norm scales
    /// `N(1, 0.02)`, biases and shifts zero, stored statistics `(0, 1)`.
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let weight = Normal::new(0.0f32, 0.02).expect("valid normal");
        let scale = Normal::new(1.0f32, 0.02).expect("valid normal");
        let (gen_t, disc_t) = Self::template(&arch);
        let init = |set: ParamSet, rng: &mut dyn rand::RngCore| -> ParamSet {
            let mut out = ParamSet::new();
            for e in set.entries {
                let shape = e.tensor.shape().to_vec();
                let t = if e.name.ends_with(".gamma") {
                    Tensor::from_fn(&shape, |_| scale.sample(rng))
                } else if e.name.ends_with(".w") || e.name.ends_with(".k") {
                    Tensor::from_fn(&shape, |_| weight.sample(rng))
                } else if e.name.ends_with(".var") {
                    Tensor::full(&shape, 1.0)
                } else {
                    Tensor::zeros(&shape)
                };
                out.push(e.name, t);
            }
            out
        };
        let gen = init(gen_t, rng);
        let disc = init(disc_t, rng);
        Ok(Self { arch, gen, disc })
    }

    /// Assemble a model from stored parameter sets, checking names and shapes.
    pub fn from_parts(arch: Architecture, gen: ParamSet, disc: ParamSet) -> Result<Self> {
        arch.validate()?;
        let (gen_t, disc_t) = Self::template(&arch);
        if !gen.same_layout(&gen_t) || !disc.same_layout(&disc_t) {
            return Err(Error::Format(
                "parameter table does not match the declared architecture".into(),
            ));
        }
        Ok(Self { arch, gen, disc })
    }

    /// Expected parameter names and shapes (zero-filled).
    pub fn template(arch: &Architecture) -> (ParamSet, ParamSet) {
        let s = arch.stages();
        let mut gen = ParamSet::new();
        let w0 = arch.gen_channels(0);
        gen.push("gen.proj.w", Tensor::zeros(&[arch.latent_dim, 16 * w0]));
        gen.push("gen.proj.b", Tensor::zeros(&[16 * w0]));
        for stage in 0..s {
            if stage > 0 {
                gen.push(
                    format!("gen.up{stage}.k"),
                    Tensor::zeros(&[arch.gen_channels(stage - 1), arch.gen_channels(stage), KERNEL, KERNEL]),
                );
            }
            let c = arch.gen_channels(stage);
            for p in ["gamma", "beta", "mean", "var"] {
                gen.push(format!("gen.norm{stage}.{p}"), Tensor::zeros(&[c]));
            }
        }
        gen.push(
            format!("gen.up{s}.k"),
            Tensor::zeros(&[arch.gen_channels(s - 1), arch.channels, KERNEL, KERNEL]),
        );
        gen.push("gen.out.b", Tensor::zeros(&[arch.channels]));

        let mut disc = ParamSet::new();
        for layer in 1..=s {
            let (cin, cout) = (arch.disc_channels(layer - 1), arch.disc_channels(layer));
            disc.push(
                format!("disc.conv{layer}.k"),
                Tensor::zeros(&[cout, cin, KERNEL, KERNEL]),
            );
            disc.push(format!("disc.conv{layer}.b"), Tensor::zeros(&[cout]));
        }
        disc.push("disc.head.w", Tensor::zeros(&[16 * arch.disc_width, 1]));
        disc.push("disc.head.b", Tensor::zeros(&[1]));
        (gen, disc)
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim
    }

    pub fn image_size(&self) -> usize {
        self.arch.image_size
    }

    pub fn channels(&self) -> usize {
        self.arch.channels
    }

    pub fn gen_params(&self) -> &ParamSet {
        &self.gen
    }

    pub fn disc_params(&self) -> &ParamSet {
        &self.disc
    }

    /// Decode one latent code into a `[1, C, S, S]` image in `[-1, 1]`.
    pub fn generate(&self, z: &LatentCode) -> Result<Tensor> {
        self.check_latent(z.len())?;
        self.generate_batch(&Tensor::new(&[1, z.len()], z.values().to_vec())?)
    }

    /// Decode a `[N, latent_dim]` batch with stored normalization statistics.
    pub fn generate_batch(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = self.generator_on(&mut tape, zv)?;
        Ok(tape.value(out)?.clone())
    }

    /// Record the inference-mode generator on `tape` with frozen parameters.
    pub fn generator_on<'a>(&'a self, tape: &mut Tape<'a>, z: Var) -> Result<Var> {
        Ok(gen_graph(tape, &self.gen, &self.arch, z, NormMode::Stored, false)?.out)
    }

    /// Probability that `x` (`[1, C, S, S]`) is a real frame, strictly in (0, 1).
    pub fn discriminate(&self, x: &Tensor) -> Result<f32> {
        let want = self.arch.image_shape(1);
        if x.shape() != want {
            return Err(Error::dim(format!(
                "discriminate: expected {:?}, got {:?}",
                want,
                x.shape()
            )));
        }
        Ok(self.discriminate_batch(x)?[0])
    }

    pub fn discriminate_batch(&self, x: &Tensor) -> Result<Vec<f32>> {
        let [_, c, h, w] = x.dims4()?;
        if c != self.arch.channels || h != self.arch.image_size || w != self.arch.image_size {
            return Err(Error::dim(format!(
                "discriminate: images {:?} do not match model {:?}",
                x.shape(),
                self.arch.image_shape(1)
            )));
        }
        let mut tape = Tape::new();
        let vars = self.disc.vars(&mut tape, false);
        let xv = tape.constant(x.clone());
        let p = disc_graph(&mut tape, &self.disc, &vars, &self.arch, xv)?;
        Ok(tape.value(p)?.data().to_vec())
    }

    fn check_latent(&self, len: usize) -> Result<()> {
        if len != self.arch.latent_dim {
            return Err(Error::dim(format!(
                "latent code has {len} entries, model expects {}",
                self.arch.latent_dim
            )));
        }
        Ok(())
    }

    /// One discriminator update on `real` vs `fake` batches. Only the
    /// discriminator parameters change. Returns the loss before the update.
    pub fn discriminator_step(
        &mut self,
        real: &Tensor,
        fake: &Tensor,
        state: &mut AdamState,
        adam: &AdamConfig,
    ) -> Result<f32> {
        disc_update(&mut self.disc, &self.arch, real, fake, state, adam)
    }

    /// One generator update (non-saturating loss) on latent batch `z`
    /// (`[N, latent_dim]`). Only generator parameters and statistics change.
    /// Returns the loss before the update.
    pub fn generator_step(&mut self, z: &Tensor, state: &mut AdamState, adam: &AdamConfig) -> Result<f32> {
        let mut gtape = Tape::new();
        let zv = gtape.constant(z.clone());
        let graph = gen_graph(&mut gtape, &self.gen, &self.arch, zv, NormMode::Batch, true)?;
        let fake = gtape.value(graph.out)?.clone();
        let (g_loss, seed) = disc_feedback(&self.disc, &self.arch, &fake)?;
        gtape.backward_from(graph.out, seed)?;
        let grads: Vec<Option<Tensor>> = graph.vars.iter().map(|&v| gtape.take_grad(v)).collect();
        let stats = collect_stats(&gtape, &graph);
        drop(gtape);
        self.gen.apply_gradients(grads, state, adam)?;
        update_running_stats(&mut self.gen, &stats, NORM_MOMENTUM);
        Ok(g_loss)
    }

    /// Recompute stored generator statistics as the average batch statistics
    /// over `batches` random latent batches of `batch_size`.
    pub fn recalibrate(&mut self, rng: &mut impl Rng, batches: usize, batch_size: usize) -> Result<()> {
        if batches == 0 || batch_size == 0 {
            return Ok(());
        }
        let mut sums: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
        for _ in 0..batches {
            let z = sample_latent_batch(rng, batch_size, self.arch.latent_dim);
            let mut tape = Tape::new();
            let zv = tape.constant(z);
            let graph = gen_graph(&mut tape, &self.gen, &self.arch, zv, NormMode::Batch, false)?;
            let stats = collect_stats(&tape, &graph);
            if sums.is_empty() {
                sums = stats
                    .iter()
                    .map(|(_, m, v)| (vec![0.0; m.len()], vec![0.0; v.len()]))
                    .collect();
            }
            for ((sm, sv), (_, m, v)) in sums.iter_mut().zip(&stats) {
                for (a, b) in sm.iter_mut().zip(m) {
                    *a += *b as f64;
                }
                for (a, b) in sv.iter_mut().zip(v) {
                    *a += *b as f64;
                }
            }
        }
        for (stage, (sm, sv)) in sums.into_iter().enumerate() {
            let mean: Vec<f32> = sm.iter().map(|v| (v / batches as f64) as f32).collect();
            let var: Vec<f32> = sv.iter().map(|v| (v / batches as f64) as f32).collect();
            self.gen
                .get_mut(&format!("gen.norm{stage}.mean"))
                .expect("validated layout")
                .data_mut()
                .copy_from_slice(&mean);
            self.gen
                .get_mut(&format!("gen.norm{stage}.var"))
                .expect("validated layout")
                .data_mut()
                .copy_from_slice(&var);
        }
        Ok(())
    }

    /// Fresh Adam states for the discriminator and generator.
    pub fn optimizer_states(&self) -> (AdamState, AdamState) {
        (
            AdamState::new(self.disc.trainable_sizes()),
            AdamState::new(self.gen.trainable_sizes()),
        )
    }
}

fn gen_graph<'a>(
    tape: &mut Tape<'a>,
    params: &'a ParamSet,
    arch: &Architecture,
    z: Var,
    mode: NormMode,
    train: bool,
) -> Result<GenGraph> {
    let zshape = tape.value(z)?.shape().to_vec();
    let n = match zshape.as_slice() {
        &[n, l] if l == arch.latent_dim => n,
        s => {
            return Err(Error::dim(format!(
                "generator input {s:?}, expected [N, {}]",
                arch.latent_dim
            )))
        }
    };
    let vars = params.vars(tape, train);
    let p = |name: &str| vars[params.index_of(name)];
    let mut norms = Vec::new();
    let mut norm = |tape: &mut Tape<'a>, x: Var, stage: usize| -> Result<Var> {
        let g = p(&format!("gen.norm{stage}.gamma"));
        let b = p(&format!("gen.norm{stage}.beta"));
        let y = match mode {
            NormMode::Batch => tape.channel_norm(x, g, b, NORM_EPS)?,
            NormMode::Stored => {
                let mean = params.get(&format!("gen.norm{stage}.mean")).expect("layout");
                let var = params.get(&format!("gen.norm{stage}.var")).expect("layout");
                tape.channel_norm_with_stats(x, g, b, mean.data(), var.data(), NORM_EPS)?
            }
        };
        norms.push((stage, y));
        Ok(y)
    };
    let s = arch.stages();
    let h = tape.dense(z, p("gen.proj.w"), p("gen.proj.b"))?;
    let h = tape.reshape(h, &[n, arch.gen_channels(0), 4, 4])?;
    let h = norm(tape, h, 0)?;
    let mut h = tape.relu(h)?;
    for stage in 1..s {
        let up = tape.conv_transpose2d(h, p(&format!("gen.up{stage}.k")), 2, 1)?;
        let normed = norm(tape, up, stage)?;
        h = tape.relu(normed)?;
    }
    let up = tape.conv_transpose2d(h, p(&format!("gen.up{s}.k")), 2, 1)?;
    let biased = tape.add_channel_bias(up, p("gen.out.b"))?;
    let out = tape.tanh(biased)?;
    Ok(GenGraph { out, vars, norms })
}

fn disc_graph(tape: &mut Tape<'_>, params: &ParamSet, vars: &[Var], arch: &Architecture, x: Var) -> Result<Var> {
    let p = |name: &str| vars[params.index_of(name)];
    let n = tape.value(x)?.shape()[0];
    let mut h = x;
    for layer in 1..=arch.stages() {
        let c = tape.conv2d(h, p(&format!("disc.conv{layer}.k")), 2, 1)?;
        let c = tape.add_channel_bias(c, p(&format!("disc.conv{layer}.b")))?;
        h = tape.leaky_relu(c, LEAKY_SLOPE)?;
    }
    let flat = tape.reshape(h, &[n, 16 * arch.disc_width])?;
    let logit = tape.dense(flat, p("disc.head.w"), p("disc.head.b"))?;
    let prob = tape.sigmoid(logit)?;
    tape.reshape(prob, &[n])
}

fn disc_update(
    disc: &mut ParamSet,
    arch: &Architecture,
    real: &Tensor,
    fake: &Tensor,
    state: &mut AdamState,
    adam: &AdamConfig,
) -> Result<f32> {
    let (loss, grads) = {
        let mut tape = Tape::new();
        let vars = disc.vars(&mut tape, true);
        let rv = tape.constant(real.clone());
        let fv = tape.constant(fake.clone());
        let pr = disc_graph(&mut tape, disc, &vars, arch, rv)?;
        let pf = disc_graph(&mut tape, disc, &vars, arch, fv)?;
        let lr = tape.bce(pr, 1.0)?;
        let lf = tape.bce(pf, 0.0)?;
        let loss = tape.add(lr, lf)?;
        let value = tape.value(loss)?.item()?;
        tape.backward(loss)?;
        let grads: Vec<Option<Tensor>> = vars.iter().map(|&v| tape.take_grad(v)).collect();
        (value, grads)
    };
    disc.apply_gradients(grads, state, adam)?;
    Ok(loss)
}

/// Non-saturating generator loss `bce(D(fake), 1)` with the discriminator
/// frozen, and its gradient with respect to `fake`.
fn disc_feedback(disc: &ParamSet, arch: &Architecture, fake: &Tensor) -> Result<(f32, Tensor)> {
    let mut tape = Tape::new();
    let vars = disc.vars(&mut tape, false);
    let fv = tape.leaf(fake.clone(), true);
    let pf = disc_graph(&mut tape, disc, &vars, arch, fv)?;
    let loss = tape.bce(pf, 1.0)?;
    let value = tape.value(loss)?.item()?;
    tape.backward(loss)?;
    let grad = tape
        .take_grad(fv)
        .ok_or_else(|| Error::contract("generator image received no gradient"))?;
    Ok((value, grad))
}

type StageStats = (usize, Vec<f32>, Vec<f32>);

fn collect_stats(tape: &Tape<'_>, graph: &GenGraph) -> Vec<StageStats> {
    graph
        .norms
        .iter()
        .filter_map(|&(stage, v)| tape.norm_stats(v).map(|(m, s)| (stage, m.to_vec(), s.to_vec())))
        .collect()
}

fn update_running_stats(gen: &mut ParamSet, stats: &[StageStats], momentum: f32) {
    for (stage, mean, var) in stats {
        for (suffix, batch) in [("mean", mean), ("var", var)] {
            let t = gen
                .get_mut(&format!("gen.norm{stage}.{suffix}"))
                .expect("validated layout");
            for (r, b) in t.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - momentum) * *r + momentum * b;
            }
        }
    }
}

/// `latent_dim` independent draws from uniform `[-1, 1]`.
pub fn sample_latent(rng: &mut impl Rng, latent_dim: usize) -> LatentCode {
    LatentCode::new((0..latent_dim).map(|_| rng.random_range(-1.0f32..=1.0)).collect())
}

/// `[n, latent_dim]` batch of uniform latent codes.
pub fn sample_latent_batch(rng: &mut impl Rng, n: usize, latent_dim: usize) -> Tensor {
    Tensor::from_fn(&[n, latent_dim], |_| rng.random_range(-1.0f32..=1.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub latent_dim: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f32,
    pub adam_beta1: f32,
    pub adam_beta2: f32,
    pub seed: u64,
    pub gen_width: usize,
    pub disc_width: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            latent_dim: 100,
            batch_size: 32,
            steps: 3000,
            lr: 2e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            seed: 0,
            gen_width: 128,
            disc_width: 128,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::contract(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::contract("adam betas must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig::new(self.lr, self.adam_beta1, self.adam_beta2)
    }
}

/// Losses of one adversarial step, each measured before its own update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepLosses {
    pub d_loss: f32,
    pub g_loss: f32,
}

/// One discriminator update followed by one generator update.
///
/// `batch` is `[N, C, S, S]` real frames in `[-1, 1]`; a matching batch of
/// latent codes is drawn from `rng`.
pub fn train_step(
    model: &mut GanModel,
    batch: &Tensor,
    dstate: &mut AdamState,
    gstate: &mut AdamState,
    adam: &AdamConfig,
    rng: &mut impl Rng,
) -> Result<StepLosses> {
    let [n, c, h, w] = batch.dims4()?;
    if n == 0 {
        return Err(Error::contract("train_step: empty batch"));
    }
    let want = model.arch.image_shape(n);
    if [n, c, h, w] != want {
        return Err(Error::dim(format!(
            "train_step: batch {:?} does not match model images {:?}",
            batch.shape(),
            want
        )));
    }
    let z = sample_latent_batch(rng, n, model.arch.latent_dim);
    let GanModel { arch, gen, disc } = model;

    // The generator graph is recorded once: its output feeds the
    // discriminator update as a constant, then receives the generator loss
    // gradient from the updated discriminator.
    let mut gtape = Tape::new();
    let zv = gtape.constant(z);
    let graph = gen_graph(&mut gtape, gen, arch, zv, NormMode::Batch, true)?;
    let fake = gtape.value(graph.out)?.clone();
    let d_loss = disc_update(disc, arch, batch, &fake, dstate, adam)?;
    let (g_loss, seed) = disc_feedback(disc, arch, &fake)?;
    gtape.backward_from(graph.out, seed)?;
    let grads: Vec<Option<Tensor>> = graph.vars.iter().map(|&v| gtape.take_grad(v)).collect();
    let stats = collect_stats(&gtape, &graph);
    drop(gtape);
    gen.apply_gradients(grads, gstate, adam)?;
    update_running_stats(gen, &stats, NORM_MOMENTUM);
    if !d_loss.is_finite() || !g_loss.is_finite() {
        return Err(Error::Numeric {
            step: dstate.step() as usize,
            value: if d_loss.is_finite() { g_loss } else { d_loss },
        });
    }
    Ok(StepLosses { d_loss, g_loss })
}

/// Stack frames into an `[N, C, S, S]` tensor.
pub fn stack_frames(frames: &[&Frame]) -> Result<Tensor> {
    let first = frames
        .first()
        .ok_or_else(|| Error::contract("cannot stack an empty frame list"))?;
    let mut data = Vec::with_capacity(frames.len() * first.pixels().len());
    for f in frames {
        if (f.width(), f.height(), f.channels()) != (first.width(), first.height(), first.channels()) {
            return Err(Error::dim("frames in a batch must share dimensions"));
        }
        data.extend_from_slice(f.pixels());
    }
    Tensor::new(&[frames.len(), first.channels(), first.height(), first.width()], data)
}

/// Batches drawn for generator statistics recalibration after training.
const RECALIBRATION_BATCHES: usize = 8;

/// Train a fresh model on background-only frames.
///
/// Deterministic for a fixed `cfg.seed`. Returns the model and the per-step
/// loss history.
pub fn train(frames: &[Frame], cfg: &TrainConfig) -> Result<(GanModel, Vec<StepLosses>)> {
    train_with_progress(frames, cfg, |_, _| {})
}

pub fn train_with_progress(
    frames: &[Frame],
    cfg: &TrainConfig,
    mut progress: impl FnMut(usize, &StepLosses),
) -> Result<(GanModel, Vec<StepLosses>)> {
    cfg.validate()?;
    let first = frames.first().ok_or_else(|| Error::contract("training set is empty"))?;
    if first.width() != first.height() {
        return Err(Error::contract(format!(
            "training frames must be square, got {}x{}",
            first.width(),
            first.height()
        )));
    }
    let arch = Architecture {
        latent_dim: cfg.latent_dim,
        image_size: first.width(),
        channels: first.channels(),
        gen_width: cfg.gen_width,
        disc_width: cfg.disc_width,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = GanModel::new(arch, &mut rng)?;
    for f in frames {
        if (f.width(), f.height(), f.channels()) != (first.width(), first.height(), first.channels()) {
            return Err(Error::contract("training frames must share dimensions"));
        }
    }
    let (mut dstate, mut gstate) = model.optimizer_states();
    let adam = cfg.adam();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let picks: Vec<&Frame> = (0..cfg.batch_size)
            .map(|_| &frames[rng.random_range(0..frames.len())])
            .collect();
        let batch = stack_frames(&picks)?;
        let losses =
            train_step(&mut model, &batch, &mut dstate, &mut gstate, &adam, &mut rng).map_err(|e| match e {
                Error::Numeric { value, .. } => Error::Numeric { step, value },
                other => other,
            })?;
        progress(step, &losses);
        history.push(losses);
    }
    if cfg.steps > 0 {
        model.recalibrate(&mut rng, RECALIBRATION_BATCHES, cfg.batch_size.max(16))?;
    }
    Ok((model, history))
}

/// Fraction of correct real/fake decisions at the 0.5 threshold over
/// `real` frames and an equal number of generated samples.
pub fn discriminator_accuracy(model: &GanModel, real: &[Frame], rng: &mut impl Rng) -> Result<f32> {
    if real.is_empty() {
        return Err(Error::contract("discriminator_accuracy: no real frames"));
    }
    let mut correct = 0usize;
    for chunk in real.chunks(32) {
        let refs: Vec<&Frame> = chunk.iter().collect();
        let batch = stack_frames(&refs)?;
        correct += model.discriminate_batch(&batch)?.iter().filter(|&&p| p > 0.5).count();
        let z = sample_latent_batch(rng, chunk.len(), model.latent_dim());
        let fake = model.generate_batch(&z)?;
        correct += model.discriminate_batch(&fake)?.iter().filter(|&&p| p < 0.5).count();
    }
    Ok(correct as f32 / (2 * real.len()) as f32)
}
