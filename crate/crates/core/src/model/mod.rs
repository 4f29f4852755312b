//! Tokenizer + rotary transformer encoder, the MAE predictor and the task
//! heads, generic over the scalar type.

pub mod transformer;

use numkit::{ParamStore, Scalar, Tape, Tensor, Var};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bind::Binder;
use crate::config::{auto_heads, EncoderConfig};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::tokenizer::{space_name, Modality, SeqInput, Tokenizer, TokenizerSpec, Tokens};
use transformer::{init_stack, linear, stack, StackShape};

pub const MASK_TOKEN: &str = "mask_token";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub tokenizer: TokenizerSpec,
    pub encoder: EncoderConfig,
}

/// Positions of one sequence dropped for masked autoencoding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    pub n_tokens: usize,
    pub masked: Vec<usize>,
    pub kept: Vec<usize>,
}

/// Drops exactly `round(mask_prob * n)` tokens chosen uniformly without
/// replacement.
pub fn make_mask_plan<R: Rng + ?Sized>(n_tokens: usize, mask_prob: f64, rng: &mut R) -> MaskPlan {
    let n_mask = ((n_tokens as f64) * mask_prob).round() as usize;
    let n_mask = n_mask.min(n_tokens);
    let mut is_masked = vec![false; n_tokens];
    for i in sample(rng, n_tokens, n_mask) {
        is_masked[i] = true;
    }
    let (masked, kept): (Vec<usize>, Vec<usize>) = (0..n_tokens).partition(|&i| is_masked[i]);
    MaskPlan {
        n_tokens,
        masked,
        kept,
    }
}

/// Encoder outputs for the tokens that were fed in.
pub struct Encoded {
    pub out: Var,
    pub tokens: Tokens,
    pub rows: Vec<usize>,
}

/// Individual loss terms of one objective evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossTerms {
    pub mae: f64,
    pub behavior: f64,
    pub recon: f64,
    pub align: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn add_scaled(&mut self, o: &LossTerms, w: f64) {
        self.mae += w * o.mae;
        self.behavior += w * o.behavior;
        self.recon += w * o.recon;
        self.align += w * o.align;
        self.total += w * o.total;
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore<F>,
}

impl<F: Scalar> Model<F> {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        let s = config.tokenizer.patch_size;
        config.encoder.validate(&[])?;
        if config.tokenizer.d != config.encoder.d {
            return Err(Error::Config("tokenizer and encoder widths differ".into()));
        }
        let tokenizer = Tokenizer::new(config.tokenizer.clone())?;
        let mut params = ParamStore::new();
        tokenizer.init_params(&mut params, rng);
        let e = &config.encoder;
        let std = e.init_std;
        init_stack(&mut params, "enc", &encoder_shape(e), std, rng);
        params.insert(MASK_TOKEN, Tensor::randn([1, e.d], std, rng));
        params.insert("pred.in.w", Tensor::randn([e.d, e.predictor_d], std, rng));
        params.insert("pred.in.b", Tensor::zeros([e.predictor_d]));
        init_stack(&mut params, "pred", &predictor_shape(e), std, rng);
        params.insert("pred.down.w", Tensor::randn([e.predictor_d, e.down_proj_d], std, rng));
        params.insert("pred.down.b", Tensor::zeros([e.down_proj_d]));
        params.insert("head.w", Tensor::randn([e.down_proj_d, s], std, rng));
        params.insert("head.b", Tensor::zeros([s]));
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    pub fn modality(&self) -> Modality {
        self.config.tokenizer.modality
    }

    pub fn d(&self) -> usize {
        self.config.encoder.d
    }

    pub fn patch_size(&self) -> usize {
        self.config.tokenizer.patch_size
    }

    pub fn register_session<R: Rng + ?Sized>(
        &mut self,
        session: &str,
        n_signals: usize,
        spike_dims: usize,
        rng: &mut R,
    ) -> Result<()> {
        self.tokenizer
            .register_session(&mut self.params, session, n_signals, spike_dims, rng)?;
        Ok(())
    }

    pub fn has_session(&self, session: &str) -> bool {
        self.tokenizer.sessions.contains_key(session)
    }

    /// Removes a session's space embeddings.
    pub fn drop_session(&mut self, session: &str) {
        self.tokenizer.sessions.remove(session);
        self.params.remove(&space_name(session));
    }

    /// Adds a linear behavior head `d -> n_z` if missing.
    pub fn ensure_behavior_head<R: Rng + ?Sized>(&mut self, n_z: usize, rng: &mut R) {
        if !self.params.contains("behavior.w") {
            let d = self.d();
            self.params
                .insert("behavior.w", Tensor::randn([d, n_z], 1.0 / (d as f64).sqrt(), rng));
            self.params.insert("behavior.b", Tensor::zeros([n_z]));
        }
    }

    /// Adds the per-token linear reconstruction readout `d -> S` if missing.
    pub fn ensure_recon_head<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        if !self.params.contains("recon.w") {
            let (d, s) = (self.d(), self.patch_size());
            self.params
                .insert("recon.w", Tensor::randn([d, s], 1.0 / (d as f64).sqrt(), rng));
            self.params.insert("recon.b", Tensor::zeros([s]));
        }
    }

    pub fn tokenize(&self, tape: &mut Tape<F>, b: &Binder<F>, session: &str, input: &SeqInput) -> Result<Tokens> {
        self.tokenizer.tokenize(tape, b, session, input)
    }

    /// Runs the encoder over the tokens at `keep` (all tokens when `None`).
    pub fn encode(
        &self,
        tape: &mut Tape<F>,
        b: &Binder<F>,
        session: &str,
        input: &SeqInput,
        keep: Option<&[usize]>,
    ) -> Result<Encoded> {
        let tokens = self.tokenize(tape, b, session, input)?;
        let rows: Vec<usize> = match keep {
            Some(k) => k.to_vec(),
            None => (0..tokens.len()).collect(),
        };
        if rows.is_empty() {
            return Err(Error::Data("encoder received no tokens".into()));
        }
        if rows.len() > self.config.encoder.max_tokens {
            return Err(Error::Data(format!(
                "sequence of {} tokens exceeds the configured maximum {}",
                rows.len(),
                self.config.encoder.max_tokens
            )));
        }
        let x = match keep {
            Some(k) => tape.gather_rows(tokens.x, k)?,
            None => tokens.x,
        };
        let positions: Vec<f64> = rows.iter().map(|&i| tokens.time_of(i) as f64).collect();
        let out = stack(tape, b, "enc", x, &positions, &encoder_shape(&self.config.encoder))?;
        Ok(Encoded { out, tokens, rows })
    }

    /// Per-timestep representation `[T x d]`: the mean over patches.
    pub fn pooled(&self, tape: &mut Tape<F>, b: &Binder<F>, session: &str, input: &SeqInput) -> Result<(Var, Encoded)> {
        let enc = self.encode(tape, b, session, input, None)?;
        let pooled = tape.group_mean_rows(enc.out, enc.tokens.n_patches)?;
        Ok((pooled, enc))
    }

    /// Zero-spike inference of a multimodal model: spike dims set to 0.
    pub fn pooled_zero_spikes(
        &self,
        tape: &mut Tape<F>,
        b: &Binder<F>,
        session: &str,
        input: &SeqInput,
    ) -> Result<Var> {
        if self.modality() != Modality::Multimodal {
            return Err(Error::Usage("zero-spike inference needs a multimodal model".into()));
        }
        let spike_dims = self.tokenizer.session(session)?.spike_dims;
        let SeqInput::Values(m) = input else {
            return Err(Error::Data("multimodal input must be continuous".into()));
        };
        let mut z = m.clone();
        for r in 0..z.rows {
            for c in 0..spike_dims {
                z.data[r * z.cols + c] = 0.0;
            }
        }
        Ok(self.pooled(tape, b, session, &SeqInput::Values(z))?.0)
    }

    /// Predictor reconstructions `[n_masked x S]` for a mask plan.
    pub fn mae_predict(
        &self,
        tape: &mut Tape<F>,
        b: &Binder<F>,
        session: &str,
        input: &SeqInput,
        plan: &MaskPlan,
    ) -> Result<Var> {
        if plan.masked.is_empty() {
            return Err(Error::Numerical("mask plan drops no tokens; reconstruction loss is empty".into()));
        }
        let enc = self.encode(tape, b, session, input, Some(&plan.kept))?;
        let tokens = &enc.tokens;
        let n_kept = plan.kept.len();
        let mask = b.get(tape, MASK_TOKEN)?;
        let mask_rows = tape.gather_rows(mask, &vec![0; plan.masked.len()])?;
        let space = b.get(tape, &space_name(session))?;
        let patches: Vec<usize> = plan.masked.iter().map(|&i| tokens.patch_of(i)).collect();
        let space_rows = tape.gather_rows(space, &patches)?;
        let mask_rows = tape.add(mask_rows, space_rows)?;
        let seq = tape.concat_rows(&[enc.out, mask_rows])?;
        let h = linear(tape, b, "pred.in", seq)?;
        let positions: Vec<f64> = plan
            .kept
            .iter()
            .chain(&plan.masked)
            .map(|&i| tokens.time_of(i) as f64)
            .collect();
        let h = stack(tape, b, "pred", h, &positions, &predictor_shape(&self.config.encoder))?;
        let masked_rows: Vec<usize> = (n_kept..n_kept + plan.masked.len()).collect();
        let h = tape.gather_rows(h, &masked_rows)?;
        let h = linear(tape, b, "pred.down", h)?;
        linear(tape, b, "head", h)
    }

    /// Reconstruction targets and pad mask for the given token rows.
    pub fn targets(&self, session: &str, input: &SeqInput, rows: &[usize]) -> Result<(Tensor<F>, Tensor<F>)> {
        let lay = self.tokenizer.session(session)?.layout;
        let (vals, mask) = self.tokenizer.patch_values::<F>(&lay, input);
        Ok((vals.select_rows(rows)?, mask.select_rows(rows)?))
    }

    /// Masked-autoencoding loss: Poisson NLL on spike log-rates, MSE otherwise.
    pub fn mae_loss(
        &self,
        tape: &mut Tape<F>,
        b: &Binder<F>,
        session: &str,
        input: &SeqInput,
        plan: &MaskPlan,
    ) -> Result<Var> {
        let pred = self.mae_predict(tape, b, session, input, plan)?;
        let (target, mask) = self.targets(session, input, &plan.masked)?;
        Ok(match self.modality() {
            Modality::Spike => tape.poisson_nll(pred, &target, &mask)?,
            Modality::Lfp | Modality::Multimodal => tape.mse(pred, &target, &mask)?,
        })
    }

    /// Linear behavior readout of pooled `[T x d]` latents.
    pub fn behavior_predict(&self, tape: &mut Tape<F>, b: &Binder<F>, pooled: Var) -> Result<Var> {
        linear(tape, b, "behavior", pooled)
    }

    pub fn behavior_loss(&self, tape: &mut Tape<F>, b: &Binder<F>, pooled: Var, behavior: &Matrix<f32>) -> Result<Var> {
        let pred = self.behavior_predict(tape, b, pooled)?;
        let target = matrix_tensor::<F>(behavior);
        let ones = Tensor::ones(target.shape().to_vec());
        Ok(tape.mse(pred, &target, &ones)?)
    }

    /// Full-sequence reconstruction through the linear readout.
    pub fn recon_loss(&self, tape: &mut Tape<F>, b: &Binder<F>, session: &str, input: &SeqInput, enc: &Encoded) -> Result<Var> {
        let pred = linear(tape, b, "recon", enc.out)?;
        let (target, mask) = self.targets(session, input, &enc.rows)?;
        Ok(tape.mse(pred, &target, &mask)?)
    }

    /// Cast copy of the model, e.g. to `f64` for gradient checks.
    pub fn cast<G: Scalar>(&self) -> Model<G> {
        Model {
            config: self.config.clone(),
            tokenizer: self.tokenizer.clone(),
            params: self.params.cast(),
        }
    }
}

pub fn matrix_tensor<F: Scalar>(m: &Matrix<f32>) -> Tensor<F> {
    Tensor::new([m.rows, m.cols], m.data.iter().map(|&v| F::from_f64_lossy(v as f64)).collect()).expect("matrix shape")
}

pub fn encoder_shape(e: &EncoderConfig) -> StackShape {
    StackShape {
        depth: e.depth,
        width: e.d,
        heads: e.heads(),
        mlp_ratio: e.mlp_ratio,
        rotary_base: e.rotary_base,
    }
}

pub fn predictor_shape(e: &EncoderConfig) -> StackShape {
    StackShape {
        depth: e.predictor_depth,
        width: e.predictor_d,
        heads: auto_heads(e.predictor_d),
        mlp_ratio: e.mlp_ratio,
        rotary_base: e.rotary_base,
    }
}

