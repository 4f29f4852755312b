//! Finite-difference checks of the full model losses in f64.

use neurodistill::bind::Binder;
use neurodistill::config::EncoderConfig;
use neurodistill::data::Matrix;
use neurodistill::model::{make_mask_plan, Model, ModelConfig};
use neurodistill::tokenizer::{Modality, SeqInput, TokenizerSpec, ValueEmbed};
use numkit::{GradCheck, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small(modality: Modality, embed: ValueEmbed, s: usize) -> ModelConfig {
    ModelConfig {
        tokenizer: TokenizerSpec {
            modality,
            embed,
            patch_size: s,
            d: 8,
            k_max: 3,
            conv_kernel: 2,
            conv_dilations: vec![1, 2],
            space_init_std: 0.3,
        },
        encoder: EncoderConfig {
            depth: 1,
            d: 8,
            heads: 2,
            predictor_depth: 1,
            predictor_d: 8,
            down_proj_d: 4,
            init_std: 0.3,
            ..EncoderConfig::default()
        },
    }
}

fn check() -> GradCheck {
    GradCheck {
        max_per_param: 6,
        ..GradCheck::default()
    }
}

fn counts(t: usize, n: usize, rng: &mut ChaCha8Rng) -> Matrix<u8> {
    Matrix::new(t, n, (0..t * n).map(|_| rng.random_range(0..4u8)).collect()).unwrap()
}

fn values(t: usize, n: usize, rng: &mut ChaCha8Rng) -> Matrix<f32> {
    Matrix::new(t, n, (0..t * n).map(|_| rng.random_range(-1.5f32..1.5)).collect()).unwrap()
}

#[test]
fn spike_mae_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut m = Model::<f64>::new(small(Modality::Spike, ValueEmbed::Table, 4), &mut rng).unwrap();
    m.register_session("a", 6, 0, &mut rng).unwrap();
    let input = SeqInput::Counts(counts(4, 6, &mut rng));
    let plan = make_mask_plan(8, 0.6, &mut rng);
    let report = check()
        .run(&m.params, |tape, p| {
            Ok(m.mae_loss(tape, &Binder::new(p), "a", &input, &plan).unwrap())
        })
        .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn lfp_distillation_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut m = Model::<f64>::new(small(Modality::Lfp, ValueEmbed::DilatedConv, 4), &mut rng).unwrap();
    m.register_session("a", 7, 0, &mut rng).unwrap();
    m.ensure_recon_head(&mut rng);
    m.ensure_behavior_head(2, &mut rng);
    let input = SeqInput::Values(values(5, 7, &mut rng));
    let behavior = values(5, 2, &mut rng);
    let teacher = Tensor::<f64>::randn([5, 8], 1.0, &mut rng);
    let report = check()
        .run(&m.params, |tape, p| {
            let b = Binder::new(p);
            let (pooled, enc) = m.pooled(tape, &b, "a", &input).unwrap();
            let recon = m.recon_loss(tape, &b, "a", &input, &enc).unwrap();
            let target = tape.constant(teacher.clone());
            let align = tape.cosine_alignment(pooled, target).unwrap();
            let beh = m.behavior_loss(tape, &b, pooled, &behavior).unwrap();
            let a5 = tape.scale(align, 5.0);
            let l = tape.add(recon, a5).unwrap();
            Ok(tape.add(l, beh).unwrap())
        })
        .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}

#[test]
fn lfp_linear_mae_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut m = Model::<f64>::new(small(Modality::Lfp, ValueEmbed::Linear, 4), &mut rng).unwrap();
    m.register_session("b", 5, 0, &mut rng).unwrap();
    let input = SeqInput::Values(values(4, 5, &mut rng));
    let plan = make_mask_plan(8, 0.6, &mut rng);
    let report = check()
        .run(&m.params, |tape, p| {
            Ok(m.mae_loss(tape, &Binder::new(p), "b", &input, &plan).unwrap())
        })
        .unwrap();
    assert!(report.max_rel_err < 1e-4, "{report:?}");
}
