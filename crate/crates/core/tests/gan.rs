mod common;

use common::{random_tensor, rng};
use foregan::dataio::Frame;
use foregan::diffcore::{grad_check, Tape, Tensor};
use foregan::gan::{
    discriminator_accuracy, sample_latent, sample_latent_batch, stack_frames, train, train_step, Architecture,
    GanModel, ParamSet, TrainConfig,
};
use foregan::optim::AdamConfig;
use foregan::Error;

fn arch() -> Architecture {
    Architecture {
        latent_dim: 8,
        image_size: 16,
        channels: 1,
        gen_width: 16,
        disc_width: 16,
    }
}

fn adam() -> AdamConfig {
    AdamConfig::new(2e-4, 0.5, 0.999)
}

fn constant_frame(size: usize, v: f32) -> Frame {
    Frame::new(size, size, 1, vec![v; size * size]).unwrap()
}

#[test]
fn default_training_hyperparameters() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.latent_dim, 100);
    assert_eq!(cfg.batch_size, 32);
    assert_eq!(cfg.lr, 2e-4);
    assert_eq!(cfg.adam_beta1, 0.5);
}

#[test]
fn generated_images_have_the_right_shape_and_range() {
    let model = GanModel::new(arch(), &mut rng(1)).unwrap();
    let img = model.generate(&sample_latent(&mut rng(2), 8)).unwrap();
    assert_eq!(img.shape(), &[1, 1, 16, 16]);
    assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    let batch = model.generate_batch(&sample_latent_batch(&mut rng(3), 5, 8)).unwrap();
    assert_eq!(batch.shape(), &[5, 1, 16, 16]);
}

#[test]
fn generation_is_a_function_of_z() {
    let model = GanModel::new(arch(), &mut rng(4)).unwrap();
    let zs = sample_latent_batch(&mut rng(5), 4, 8);
    let batch = model.generate_batch(&zs).unwrap();
    let one = model
        .generate(&foregan::inversion::LatentCode::new(zs.data()[8..16].to_vec()))
        .unwrap();
    assert_eq!(&batch.data()[256..512], one.data());
}

#[test]
fn discriminator_outputs_probabilities() {
    let model = GanModel::new(arch(), &mut rng(6)).unwrap();
    let x = random_tensor(&mut rng(7), &[3, 1, 16, 16]);
    let p = model.discriminate_batch(&x).unwrap();
    assert_eq!(p.len(), 3);
    assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    assert!(matches!(
        model.discriminate(&Tensor::zeros(&[1, 1, 8, 8])),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn untrained_discriminator_is_undecided() {
    let model = GanModel::new(arch(), &mut rng(21)).unwrap();
    let x = random_tensor(&mut rng(22), &[1, 1, 16, 16]);
    assert!((model.discriminate(&x).unwrap() - 0.5).abs() < 0.05);
}

#[test]
fn wrong_latent_length_is_a_dimension_error() {
    let model = GanModel::new(arch(), &mut rng(23)).unwrap();
    assert!(matches!(
        model.generate(&sample_latent(&mut rng(24), 7)),
        Err(Error::Dimension(_))
    ));
}

#[test]
fn latent_samples_are_uniform_in_unit_box() {
    let z = sample_latent(&mut rng(8), 10_000);
    assert!(z.values().iter().all(|v| (-1.0..=1.0).contains(v)));
    let mean = z.values().iter().map(|&v| v as f64).sum::<f64>() / 10_000.0;
    assert!(mean.abs() < 0.02);
    assert_eq!(sample_latent(&mut rng(8), 100), sample_latent(&mut rng(8), 100));
    assert!(z.values().iter().any(|&v| v < -0.9) && z.values().iter().any(|&v| v > 0.9));
}

#[test]
fn discriminator_step_leaves_the_generator_alone() {
    let mut model = GanModel::new(arch(), &mut rng(9)).unwrap();
    let gen_before = model.gen_params().clone();
    let disc_before = model.disc_params().clone();
    let (mut dstate, _) = model.optimizer_states();
    let real = random_tensor(&mut rng(10), &[4, 1, 16, 16]);
    let fake = random_tensor(&mut rng(11), &[4, 1, 16, 16]);
    let loss = model.discriminator_step(&real, &fake, &mut dstate, &adam()).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(model.gen_params(), &gen_before);
    assert_ne!(model.disc_params(), &disc_before);
}

#[test]
fn generator_step_leaves_the_discriminator_alone() {
    let mut model = GanModel::new(arch(), &mut rng(12)).unwrap();
    let disc_before = model.disc_params().clone();
    let (_, mut gstate) = model.optimizer_states();
    let z = sample_latent_batch(&mut rng(13), 4, 8);
    model.generator_step(&z, &mut gstate, &adam()).unwrap();
    assert_eq!(model.disc_params(), &disc_before);
}

#[test]
fn train_step_validates_the_batch() {
    let mut model = GanModel::new(arch(), &mut rng(14)).unwrap();
    let (mut d, mut g) = model.optimizer_states();
    let bad = Tensor::zeros(&[2, 1, 8, 8]);
    assert!(matches!(
        train_step(&mut model, &bad, &mut d, &mut g, &adam(), &mut rng(15)),
        Err(Error::Dimension(_))
    ));
    let good = Tensor::zeros(&[2, 1, 16, 16]);
    let losses = train_step(&mut model, &good, &mut d, &mut g, &adam(), &mut rng(15)).unwrap();
    assert!(losses.d_loss.is_finite() && losses.g_loss.is_finite());
    assert_eq!((d.step(), g.step()), (1, 1));
}

#[test]
fn latent_gradient_through_the_generator_matches_finite_differences() {
    let model: &'static GanModel = Box::leak(Box::new(GanModel::new(arch(), &mut rng(16)).unwrap()));
    let z = sample_latent(&mut rng(17), 8).to_tensor();
    let base = model.generate_batch(&z).unwrap();
    let offsets = random_tensor(&mut rng(18), &[1, 1, 16, 16]);
    let target = Tensor::new(
        base.shape(),
        base.data()
            .iter()
            .zip(offsets.data())
            .map(|(b, o)| b + if *o >= 0.0 { 0.5 } else { -0.5 })
            .collect(),
    )
    .unwrap();
    let target: &'static Tensor = Box::leak(Box::new(target));
    let err = grad_check(
        |tape: &mut Tape<'_>, zv| {
            let gz = model.generator_on(tape, zv)?;
            let t = tape.borrowed(target, false);
            let l = tape.l1_sum(t, gz)?;
            tape.scale(l, 0.01)
        },
        &z,
        1e-3,
    )
    .unwrap();
    assert!(err < 1e-3, "relative error {err}");
}

#[test]
fn training_is_deterministic_for_a_seed() {
    let frames: Vec<Frame> = (0..6).map(|i| constant_frame(16, -0.5 + 0.1 * i as f32)).collect();
    let cfg = TrainConfig {
        latent_dim: 8,
        batch_size: 4,
        steps: 4,
        gen_width: 16,
        disc_width: 16,
        ..TrainConfig::default()
    };
    let (a, ha) = train(&frames, &cfg).unwrap();
    let (b, hb) = train(&frames, &cfg).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha, hb);
    assert_eq!(ha.len(), 4);
    let (c, _) = train(&frames, &TrainConfig { seed: 1, ..cfg.clone() }).unwrap();
    assert_ne!(a, c);
}

#[test]
fn zero_steps_returns_the_initialized_model() {
    let frames = vec![constant_frame(16, 0.0)];
    let cfg = TrainConfig {
        latent_dim: 8,
        steps: 0,
        gen_width: 16,
        disc_width: 16,
        ..TrainConfig::default()
    };
    let (model, history) = train(&frames, &cfg).unwrap();
    assert!(history.is_empty());
    let arch = *model.arch();
    let fresh = GanModel::new(
        arch,
        &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
    )
    .unwrap();
    assert_eq!(model, fresh);
}

#[test]
fn training_rejects_bad_inputs() {
    let cfg = TrainConfig::default();
    assert!(matches!(train(&[], &cfg), Err(Error::Contract(_))));
    let frames = vec![Frame::new(16, 8, 1, vec![0.0; 128]).unwrap()];
    assert!(train(&frames, &cfg).is_err());
    let frames = vec![constant_frame(16, 0.0)];
    assert!(train(&frames, &TrainConfig { lr: -1.0, ..cfg }).is_err());
}

#[test]
fn stacking_frames() {
    let frames = [constant_frame(8, 0.1), constant_frame(8, 0.2)];
    let t = stack_frames(&frames.iter().collect::<Vec<_>>()).unwrap();
    assert_eq!(t.shape(), &[2, 1, 8, 8]);
    assert_eq!(t.data()[64], 0.2);
    assert!(stack_frames(&[]).is_err());
}

#[test]
fn discriminator_accuracy_is_a_fraction() {
    let model = GanModel::new(arch(), &mut rng(19)).unwrap();
    let frames: Vec<Frame> = (0..5).map(|_| constant_frame(16, 0.3)).collect();
    let acc = discriminator_accuracy(&model, &frames, &mut rng(20)).unwrap();
    assert!((0.0..=1.0).contains(&acc));
}

#[test]
fn statistics_entries_are_not_trainable() {
    assert!(!ParamSet::is_trainable("gen.norm0.mean"));
    assert!(!ParamSet::is_trainable("gen.norm2.var"));
    assert!(ParamSet::is_trainable("gen.norm0.gamma"));
}
