//! DINO self-distillation at desk scale: a student encoder chases an EMA
//! teacher on two noisy crops per utterance, with sharpening (low teacher
//! temperature) and centering (running mean subtracted from teacher
//! logits) as independently switchable collapse controls.
//!
//! Collapse is tracked as the entropy of the mean teacher softmax over the
//! step's batch: a healthy run keeps it near `ln K`, a collapsed run
//! drives it toward zero because every crop lands on the same prototype.

use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{
    make_toy_encoder, pool_segments, pool_segments_backward, EncoderConfig, ForwardCache,
    Nonlinearity, ToyEncoder, ToyLabError, WeightStyle,
};
use crate::math;
use crate::rng::seeded_stream;

/// Linear projection from pooled encoder output to prototype logits.
#[derive(Debug, Clone, PartialEq)]
pub struct DinoHead {
    /// `D_enc x K`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

/// Encoder plus prototype head; student and teacher are two of these with
/// identical shapes.
#[derive(Debug, Clone, PartialEq)]
pub struct DinoModel {
    pub encoder: ToyEncoder,
    pub head: DinoHead,
}

impl DinoModel {
    pub fn prototypes(&self) -> usize {
        self.head.weight.ncols()
    }

    /// Forward over equal-length segments stacked row-wise: encoder, mean
    /// pool per segment, head. Returns the encoder cache (for
    /// backpropagation), pooled embeddings, and logits.
    fn forward_segments(
        &self,
        stacked: ArrayView2<f64>,
        frames: usize,
    ) -> Result<(ForwardCache, Array2<f64>, Array2<f64>), ToyLabError> {
        let cache = self.encoder.forward_cached(stacked)?;
        let pooled = pool_segments(
            cache.post.last().expect("encoder has layers").view(),
            frames,
        );
        let logits = pooled.dot(&self.head.weight) + &self.head.bias;
        Ok((cache, pooled, logits))
    }
}

/// Full distillation state: both models, the center, and the control
/// constants the loss reads.
#[derive(Debug, Clone, PartialEq)]
pub struct DinoState {
    pub student: DinoModel,
    pub teacher: DinoModel,
    /// Running center subtracted from teacher logits; length K.
    pub center: Array1<f64>,
    pub student_temp: f64,
    /// Effective teacher temperature: the sharpening temperature when
    /// sharpening is on, 1.0 when it is off.
    pub teacher_temp: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    /// Entropy of the mean teacher softmax, one entry per training step.
    pub collapse_trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DinoTrainConfig {
    pub encoder: EncoderConfig,
    /// Prototype count K.
    pub prototypes: usize,
    pub corpus_utterances: usize,
    pub corpus_frames: usize,
    pub crop_frames: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub student_temp: f64,
    pub teacher_temp: f64,
    pub ema_momentum: f64,
    pub center_momentum: f64,
    pub centering: bool,
    pub sharpening: bool,
    /// Standard deviation of the additive-noise augmentation.
    pub noise_std: f64,
    /// Scale of the per-utterance mean in the synthetic corpus; relative to
    /// `frame_jitter` and `noise_std` it sets how distinguishable
    /// utterances are, which in turn sets how hard collapse has to fight.
    pub utterance_spread: f64,
    /// Within-utterance frame jitter of the synthetic corpus.
    pub frame_jitter: f64,
}

impl Default for DinoTrainConfig {
    /// Defaults are calibrated so the collapse dichotomy is reproducible:
    /// with centering the final mean-distribution entropy stays above
    /// half of `ln K`, without it the run collapses below a fifth of
    /// `ln K`, across seeds. Augmentation noise deliberately dominates the
    /// utterance spread; strongly separated utterances would let a
    /// no-centering run settle into a stable multi-prototype equilibrium
    /// instead of collapsing.
    fn default() -> Self {
        Self {
            encoder: EncoderConfig {
                input_dim: 6,
                layer_dims: vec![8, 8],
                nonlinearity: Nonlinearity::Tanh,
                weight_style: WeightStyle::Random,
                bottleneck: None,
            },
            prototypes: 8,
            corpus_utterances: 12,
            corpus_frames: 24,
            crop_frames: 8,
            steps: 1500,
            learning_rate: 1.5,
            student_temp: 0.1,
            teacher_temp: 0.04,
            ema_momentum: 0.99,
            center_momentum: 0.9,
            centering: true,
            sharpening: true,
            noise_std: 0.7,
            utterance_spread: 0.3,
            frame_jitter: 0.3,
        }
    }
}

fn check_temp(got: f64) -> Result<(), ToyLabError> {
    if !(got.is_finite() && got > 0.0) {
        return Err(ToyLabError::BadTemperature { got });
    }
    Ok(())
}

fn check_momentum(name: &'static str, got: f64) -> Result<(), ToyLabError> {
    if !(got.is_finite() && (0.0..=1.0).contains(&got)) {
        return Err(ToyLabError::BadMomentum { name, got });
    }
    Ok(())
}

/// Cross-entropy between the centered-and-sharpened teacher distribution
/// and the student distribution, averaged over the batch:
/// `mean_b H(softmax((t_b - c) / tau_t), softmax(s_b / tau_s))`.
pub fn dino_loss(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    state: &DinoState,
) -> Result<f64, ToyLabError> {
    check_temp(state.student_temp)?;
    check_temp(state.teacher_temp)?;
    if student_logits.dim() != teacher_logits.dim() {
        return Err(ToyLabError::LogitShapeMismatch {
            a_rows: student_logits.nrows(),
            a_cols: student_logits.ncols(),
            b_rows: teacher_logits.nrows(),
            b_cols: teacher_logits.ncols(),
        });
    }
    if student_logits.nrows() == 0 {
        return Err(ToyLabError::EmptyBatch);
    }
    if state.center.len() != teacher_logits.ncols() {
        return Err(ToyLabError::CenterLength {
            expected: teacher_logits.ncols(),
            got: state.center.len(),
        });
    }
    let p_t = teacher_distribution(teacher_logits, &state.center, state.teacher_temp);
    let log_p_s = math::log_softmax_rows((&student_logits / state.student_temp).view());
    let total: f64 = (&p_t * &log_p_s).sum();
    Ok(-total / student_logits.nrows() as f64)
}

/// Row-wise `softmax((t - c) / tau_t)`.
fn teacher_distribution(
    teacher_logits: ArrayView2<f64>,
    center: &Array1<f64>,
    teacher_temp: f64,
) -> Array2<f64> {
    let centered = (&teacher_logits - center) / teacher_temp;
    math::softmax_rows(centered.view())
}

/// `c <- m c + (1 - m) batch_mean(teacher_logits)`. Returns the new center
/// without mutating the state.
pub fn update_center(
    state: &DinoState,
    teacher_logits: ArrayView2<f64>,
) -> Result<Array1<f64>, ToyLabError> {
    check_momentum("center", state.center_momentum)?;
    if teacher_logits.nrows() == 0 {
        return Err(ToyLabError::EmptyBatch);
    }
    if state.center.len() != teacher_logits.ncols() {
        return Err(ToyLabError::CenterLength {
            expected: teacher_logits.ncols(),
            got: state.center.len(),
        });
    }
    let mean = teacher_logits.mean_axis(Axis(0)).expect("nonempty batch");
    let m = state.center_momentum;
    Ok(&state.center * m + &(mean * (1.0 - m)))
}

/// Elementwise `theta_t <- lambda theta_t + (1 - lambda) theta_s` over all
/// teacher parameters.
pub fn ema_update(state: &mut DinoState) -> Result<(), ToyLabError> {
    check_momentum("EMA", state.ema_momentum)?;
    let lambda = state.ema_momentum;
    let depth = state.student.encoder.depth();
    if state.teacher.encoder.depth() != depth {
        return Err(ToyLabError::TeacherShapeMismatch { layer: 0 });
    }
    for l in 0..depth {
        if state.teacher.encoder.layers[l].weight.dim()
            != state.student.encoder.layers[l].weight.dim()
        {
            return Err(ToyLabError::TeacherShapeMismatch { layer: l });
        }
    }
    if state.teacher.head.weight.dim() != state.student.head.weight.dim()
        || state.teacher.head.bias.len() != state.student.head.bias.len()
    {
        return Err(ToyLabError::TeacherShapeMismatch { layer: depth });
    }
    for l in 0..depth {
        state.teacher.encoder.layers[l].weight.zip_mut_with(
            &state.student.encoder.layers[l].weight,
            |t, &s| *t = lambda * *t + (1.0 - lambda) * s,
        );
    }
    state
        .teacher
        .head
        .weight
        .zip_mut_with(&state.student.head.weight, |t, &s| {
            *t = lambda * *t + (1.0 - lambda) * s
        });
    state
        .teacher
        .head
        .bias
        .zip_mut_with(&state.student.head.bias, |t, &s| {
            *t = lambda * *t + (1.0 - lambda) * s
        });
    Ok(())
}

/// Entropy (nats) of the mean softmax distribution of a logit batch, at
/// temperature 1 and without centering: the collapse metric.
pub fn mean_distribution_entropy(logits: ArrayView2<f64>) -> Result<f64, ToyLabError> {
    if logits.nrows() == 0 {
        return Err(ToyLabError::EmptyBatch);
    }
    let mean = math::softmax_rows(logits)
        .mean_axis(Axis(0))
        .expect("nonempty batch");
    Ok(math::entropy(mean.view()))
}

fn validate_train_config(cfg: &DinoTrainConfig) -> Result<(), ToyLabError> {
    check_temp(cfg.student_temp)?;
    check_temp(cfg.teacher_temp)?;
    check_momentum("EMA", cfg.ema_momentum)?;
    check_momentum("center", cfg.center_momentum)?;
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate >= 0.0) {
        return Err(ToyLabError::BadLearningRate {
            got: cfg.learning_rate,
        });
    }
    if cfg.prototypes < 2 {
        return Err(ToyLabError::TooFewPrototypes {
            got: cfg.prototypes,
        });
    }
    if cfg.corpus_utterances == 0 {
        return Err(ToyLabError::EmptyCorpus);
    }
    if cfg.crop_frames == 0 {
        return Err(ToyLabError::ZeroCrop);
    }
    if cfg.crop_frames > cfg.corpus_frames {
        return Err(ToyLabError::CropTooLong {
            crop: cfg.crop_frames,
            frames: cfg.corpus_frames,
        });
    }
    for (name, got) in [
        ("noise std", cfg.noise_std),
        ("utterance spread", cfg.utterance_spread),
        ("frame jitter", cfg.frame_jitter),
    ] {
        if !(got.is_finite() && got >= 0.0) {
            return Err(ToyLabError::BadSpread { name, got });
        }
    }
    Ok(())
}

/// Runs toy DINO training from scratch and returns the final state with
/// its per-step collapse trace.
///
/// Each step samples two random crops per corpus utterance, perturbs each
/// with seeded additive Gaussian noise, evaluates the symmetric loss
/// `(dino_loss(s1, t2) + dino_loss(s2, t1)) / 2`, descends the student,
/// EMA-updates the teacher, and (when centering is on) updates the center
/// from the step's teacher logits. With sharpening off the teacher
/// temperature is 1; with centering off the center stays at zero.
pub fn train_dino_toy(cfg: &DinoTrainConfig, seed: u64) -> Result<DinoState, ToyLabError> {
    validate_train_config(cfg)?;

    let student_encoder = make_toy_encoder(&cfg.encoder, seed)?;
    let d_enc = student_encoder.output_dim();
    let mut init_rng = seeded_stream(seed, 2);
    let head_scale = 1.0 / (d_enc as f64).sqrt();
    let head = DinoHead {
        weight: Array2::from_shape_fn((d_enc, cfg.prototypes), |_| {
            let v: f64 = StandardNormal.sample(&mut init_rng);
            v * head_scale
        }),
        bias: Array1::zeros(cfg.prototypes),
    };
    let student = DinoModel {
        encoder: student_encoder,
        head,
    };
    let mut state = DinoState {
        teacher: student.clone(),
        student,
        center: Array1::zeros(cfg.prototypes),
        student_temp: cfg.student_temp,
        teacher_temp: if cfg.sharpening { cfg.teacher_temp } else { 1.0 },
        ema_momentum: cfg.ema_momentum,
        center_momentum: cfg.center_momentum,
        collapse_trace: Vec::with_capacity(cfg.steps),
    };

    let mut data_rng = seeded_stream(seed, 1);
    let corpus: Vec<Array2<f64>> = (0..cfg.corpus_utterances)
        .map(|_| {
            let mean: Array1<f64> = Array1::from_shape_fn(cfg.encoder.input_dim, |_| {
                let v: f64 = StandardNormal.sample(&mut data_rng);
                v * cfg.utterance_spread
            });
            let mut rows = Array2::from_shape_fn((cfg.corpus_frames, cfg.encoder.input_dim), |_| {
                let v: f64 = StandardNormal.sample(&mut data_rng);
                v * cfg.frame_jitter
            });
            rows += &mean;
            rows
        })
        .collect();

    let mut train_rng = seeded_stream(seed, 3);
    let utts = cfg.corpus_utterances;
    let crop = cfg.crop_frames;
    let d_in = cfg.encoder.input_dim;
    for step in 0..cfg.steps {
        let mut views = [
            Array2::zeros((utts * crop, d_in)),
            Array2::zeros((utts * crop, d_in)),
        ];
        for (u, seq) in corpus.iter().enumerate() {
            for view in views.iter_mut() {
                let start = train_rng.random_range(0..=cfg.corpus_frames - crop);
                let mut slot = view.slice_mut(ndarray::s![u * crop..(u + 1) * crop, ..]);
                slot.assign(&seq.slice(ndarray::s![start..start + crop, ..]));
                slot.mapv_inplace(|v| {
                    let n: f64 = StandardNormal.sample(&mut train_rng);
                    v + cfg.noise_std * n
                });
            }
        }

        let (cache1, pooled1, s1) = state.student.forward_segments(views[0].view(), crop)?;
        let (cache2, pooled2, s2) = state.student.forward_segments(views[1].view(), crop)?;
        let (_, _, t1) = state.teacher.forward_segments(views[0].view(), crop)?;
        let (_, _, t2) = state.teacher.forward_segments(views[1].view(), crop)?;

        let loss =
            0.5 * (dino_loss(s1.view(), t2.view(), &state)? + dino_loss(s2.view(), t1.view(), &state)?);
        if !loss.is_finite() {
            return Err(ToyLabError::Diverged { step });
        }

        // d loss / d s_v = (softmax(s_v / tau_s) - p_t(other view)) /
        // (2 B tau_s); the halving comes from the symmetric average.
        let batch = utts as f64;
        let grad_scale = 1.0 / (2.0 * batch * state.student_temp);
        let p_t2 = teacher_distribution(t2.view(), &state.center, state.teacher_temp);
        let p_t1 = teacher_distribution(t1.view(), &state.center, state.teacher_temp);
        let dlogits1 =
            (math::softmax_rows((&s1 / state.student_temp).view()) - p_t2) * grad_scale;
        let dlogits2 =
            (math::softmax_rows((&s2 / state.student_temp).view()) - p_t1) * grad_scale;

        let dhead_w = pooled1.t().dot(&dlogits1) + pooled2.t().dot(&dlogits2);
        let dhead_b = dlogits1.sum_axis(Axis(0)) + dlogits2.sum_axis(Axis(0));
        let w_t = state.student.head.weight.t().to_owned();
        let dstacked1 = pool_segments_backward(dlogits1.dot(&w_t).view(), crop);
        let dstacked2 = pool_segments_backward(dlogits2.dot(&w_t).view(), crop);
        let grads1 = state.student.encoder.backward(&cache1, dstacked1.view());
        let grads2 = state.student.encoder.backward(&cache2, dstacked2.view());

        let lr = cfg.learning_rate;
        for (l, (g1, g2)) in grads1.iter().zip(&grads2).enumerate() {
            let layer = &mut state.student.encoder.layers[l];
            layer.weight.scaled_add(-lr, g1);
            layer.weight.scaled_add(-lr, g2);
        }
        state.student.head.weight.scaled_add(-lr, &dhead_w);
        state.student.head.bias.scaled_add(-lr, &dhead_b);

        ema_update(&mut state)?;
        let teacher_batch = concatenate(Axis(0), &[t1.view(), t2.view()])
            .expect("teacher logit batches share width");
        if cfg.centering {
            state.center = update_center(&state, teacher_batch.view())?;
        }
        state
            .collapse_trace
            .push(mean_distribution_entropy(teacher_batch.view())?);
    }
    Ok(state)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use ndarray::array;

    /// Minimal state for exercising the loss and update ops directly.
    fn make_state(prototypes: usize, teacher_temp: f64, student_temp: f64) -> DinoState {
        let encoder = ToyEncoder {
            layers: vec![EncoderLayer {
                weight: Array2::eye(2),
                nonlinearity: Nonlinearity::Identity,
            }],
            seed: 0,
        };
        let model = DinoModel {
            encoder,
            head: DinoHead {
                weight: Array2::zeros((2, prototypes)),
                bias: Array1::zeros(prototypes),
            },
        };
        DinoState {
            student: model.clone(),
            teacher: model,
            center: Array1::zeros(prototypes),
            student_temp,
            teacher_temp,
            ema_momentum: 0.99,
            center_momentum: 0.9,
            collapse_trace: Vec::new(),
        }
    }

    use super::super::EncoderLayer;

    #[test]
    fn loss_is_small_when_both_agree_confidently() {
        let state = make_state(4, 0.04, 0.1);
        let logits = array![[20.0, 0.0, 0.0, 0.0]];
        let loss = dino_loss(logits.view(), logits.view(), &state).unwrap();
        assert!(loss < 0.01, "loss {loss}");
    }

    #[test]
    fn fully_centered_single_example_gives_uniform_teacher() {
        let teacher = array![[3.0, -1.0, 0.5]];
        let student = array![[0.2, 1.4, -0.7]];
        let mut state = make_state(3, 0.04, 0.1);
        state.center = teacher.row(0).to_owned();
        let loss = dino_loss(student.view(), teacher.view(), &state).unwrap();
        let log_p_s = math::log_softmax_rows((&student.view() / 0.1).view());
        let expected = -log_p_s.sum() / 3.0;
        assert!((loss - expected).abs() < 1e-12, "{loss} vs {expected}");
    }

    #[test]
    fn lower_teacher_temperature_sharpens_the_distribution() {
        let logits = array![[1.0, 0.3, -0.8, 0.1]];
        let center = Array1::zeros(4);
        let sharp = teacher_distribution(logits.view(), &center, 0.01);
        let soft = teacher_distribution(logits.view(), &center, 1.0);
        let h_sharp = math::entropy(sharp.row(0));
        let h_soft = math::entropy(soft.row(0));
        assert!(h_sharp < h_soft, "{h_sharp} vs {h_soft}");
    }

    #[test]
    fn loss_rejects_invalid_inputs() {
        let state = make_state(3, 0.04, 0.1);
        let a = array![[1.0, 2.0, 3.0]];
        let b = array![[1.0, 2.0]];
        assert!(matches!(
            dino_loss(a.view(), b.view(), &state),
            Err(ToyLabError::LogitShapeMismatch { .. })
        ));
        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            dino_loss(empty.view(), empty.view(), &state),
            Err(ToyLabError::EmptyBatch)
        ));
        let mut bad_temp = make_state(3, 0.04, 0.1);
        bad_temp.teacher_temp = 0.0;
        assert!(matches!(
            dino_loss(a.view(), a.view(), &bad_temp),
            Err(ToyLabError::BadTemperature { .. })
        ));
        let mut bad_center = make_state(3, 0.04, 0.1);
        bad_center.center = Array1::zeros(2);
        assert!(matches!(
            dino_loss(a.view(), a.view(), &bad_center),
            Err(ToyLabError::CenterLength { expected: 3, got: 2 })
        ));
    }

    #[test]
    fn loss_is_invariant_to_teacher_shift_absorbed_by_center() {
        let mut rng = seeded_rng(3);
        let student = Array2::from_shape_fn((5, 4), |_| StandardNormal.sample(&mut rng));
        let teacher = Array2::from_shape_fn((5, 4), |_| StandardNormal.sample(&mut rng));
        let state = make_state(4, 0.04, 0.1);
        let base = dino_loss(student.view(), teacher.view(), &state).unwrap();
        let mut shifted_state = state.clone();
        shifted_state.center = &state.center + 2.7;
        let shifted_teacher = &teacher + 2.7;
        let shifted = dino_loss(student.view(), shifted_teacher.view(), &shifted_state).unwrap();
        assert!((base - shifted).abs() < 1e-9, "{base} vs {shifted}");
    }

    #[test]
    fn center_update_follows_the_momentum_recurrence() {
        let mut rng = seeded_rng(4);
        let batch = Array2::from_shape_fn((6, 3), |_| StandardNormal.sample(&mut rng));
        let mean = batch.mean_axis(Axis(0)).unwrap();

        let mut state = make_state(3, 0.04, 0.1);
        state.center_momentum = 0.0;
        let c = update_center(&state, batch.view()).unwrap();
        for (a, b) in c.iter().zip(mean.iter()) {
            assert!((a - b).abs() < 1e-15);
        }

        state.center_momentum = 1.0;
        state.center = array![0.5, -0.25, 1.5];
        let c = update_center(&state, batch.view()).unwrap();
        assert_eq!(c, state.center);

        state.center_momentum = 0.9;
        state.center = Array1::zeros(3);
        let mut prev_gap: Option<Array1<f64>> = None;
        for _ in 0..8 {
            let next = update_center(&state, batch.view()).unwrap();
            let gap = &next - &mean;
            if let Some(prev) = prev_gap {
                for (g, p) in gap.iter().zip(prev.iter()) {
                    assert!((g - 0.9 * p).abs() < 1e-12, "geometric ratio violated");
                }
            }
            prev_gap = Some(gap.to_owned());
            state.center = next;
        }

        let empty = Array2::<f64>::zeros((0, 3));
        assert!(matches!(
            update_center(&state, empty.view()),
            Err(ToyLabError::EmptyBatch)
        ));
    }

    fn param_gap(state: &DinoState) -> f64 {
        let mut total = 0.0;
        for (t, s) in state
            .teacher
            .encoder
            .layers
            .iter()
            .zip(&state.student.encoder.layers)
        {
            total += (&t.weight - &s.weight).mapv(|v| v * v).sum();
        }
        total += (&state.teacher.head.weight - &state.student.head.weight)
            .mapv(|v| v * v)
            .sum();
        total += (&state.teacher.head.bias - &state.student.head.bias)
            .mapv(|v| v * v)
            .sum();
        total.sqrt()
    }

    #[test]
    fn ema_update_is_a_contraction_toward_the_student() {
        let mut rng = seeded_rng(5);
        let mut state = make_state(3, 0.04, 0.1);
        state.student.head.weight =
            Array2::from_shape_fn((2, 3), |_| StandardNormal.sample(&mut rng));
        state.student.encoder.layers[0].weight =
            Array2::from_shape_fn((2, 2), |_| StandardNormal.sample(&mut rng));

        state.ema_momentum = 1.0;
        let before = state.teacher.clone();
        ema_update(&mut state).unwrap();
        assert_eq!(state.teacher, before);

        state.ema_momentum = 0.0;
        ema_update(&mut state).unwrap();
        assert_eq!(state.teacher, state.student);

        state.teacher.head.weight += 1.0;
        state.teacher.encoder.layers[0].weight -= 0.5;
        state.ema_momentum = 0.9;
        let mut gap = param_gap(&state);
        for _ in 0..6 {
            ema_update(&mut state).unwrap();
            let next = param_gap(&state);
            assert!((next - 0.9 * gap).abs() < 1e-12 * (1.0 + gap));
            gap = next;
        }
    }

    #[test]
    fn ema_update_rejects_shape_mismatch() {
        let mut state = make_state(3, 0.04, 0.1);
        state.teacher.head.bias = Array1::zeros(4);
        assert!(matches!(
            ema_update(&mut state),
            Err(ToyLabError::TeacherShapeMismatch { .. })
        ));
    }

    #[test]
    fn mean_distribution_entropy_detects_concentration() {
        let uniform_logits = Array2::<f64>::zeros((4, 5));
        let h = mean_distribution_entropy(uniform_logits.view()).unwrap();
        assert!((h - (5.0f64).ln()).abs() < 1e-12);

        let mut concentrated = Array2::<f64>::zeros((4, 5));
        concentrated.column_mut(2).fill(50.0);
        let h = mean_distribution_entropy(concentrated.view()).unwrap();
        assert!(h < 1e-6, "entropy {h}");
    }

    #[test]
    fn training_is_deterministic_per_seed() {
        let cfg = DinoTrainConfig {
            steps: 12,
            ..DinoTrainConfig::default()
        };
        let a = train_dino_toy(&cfg, 7).unwrap();
        let b = train_dino_toy(&cfg, 7).unwrap();
        assert_eq!(a.collapse_trace, b.collapse_trace);
        assert_eq!(a.student, b.student);
        assert_eq!(a.teacher, b.teacher);
        let c = train_dino_toy(&cfg, 8).unwrap();
        assert_ne!(a.collapse_trace, c.collapse_trace);
    }

    #[test]
    fn config_validation_catches_bad_settings() {
        let mut cfg = DinoTrainConfig::default();
        cfg.crop_frames = cfg.corpus_frames + 1;
        assert!(matches!(
            train_dino_toy(&cfg, 0),
            Err(ToyLabError::CropTooLong { .. })
        ));
        let cfg = DinoTrainConfig {
            crop_frames: 0,
            ..DinoTrainConfig::default()
        };
        assert!(matches!(train_dino_toy(&cfg, 0), Err(ToyLabError::ZeroCrop)));
        let cfg = DinoTrainConfig {
            student_temp: -1.0,
            ..DinoTrainConfig::default()
        };
        assert!(matches!(
            train_dino_toy(&cfg, 0),
            Err(ToyLabError::BadTemperature { .. })
        ));
        let cfg = DinoTrainConfig {
            prototypes: 1,
            ..DinoTrainConfig::default()
        };
        assert!(matches!(
            train_dino_toy(&cfg, 0),
            Err(ToyLabError::TooFewPrototypes { got: 1 })
        ));
    }

    #[test]
    fn collapse_dichotomy_on_one_seed() {
        let healthy_cfg = DinoTrainConfig::default();
        let k = healthy_cfg.prototypes as f64;
        let healthy = train_dino_toy(&healthy_cfg, 0).unwrap();
        let healthy_final = *healthy.collapse_trace.last().unwrap();
        assert!(
            healthy_final > 0.5 * k.ln(),
            "healthy run should stay spread, entropy {healthy_final}"
        );

        let collapsed_cfg = DinoTrainConfig {
            centering: false,
            ..DinoTrainConfig::default()
        };
        let collapsed = train_dino_toy(&collapsed_cfg, 0).unwrap();
        let collapsed_final = *collapsed.collapse_trace.last().unwrap();
        assert!(
            collapsed_final < 0.2 * k.ln(),
            "uncentered run should collapse, entropy {collapsed_final}"
        );
    }
}
