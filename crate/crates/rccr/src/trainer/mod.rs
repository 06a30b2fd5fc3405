//! The full training step and loop: pseudo-labeling, ClassMix consistency,
//! source cross-entropy, the CutMix contrastive branch, SGD, EMA updates,
//! and memory-bank pushes, all behind the ablation switches.
//!
//! Every random draw comes from a purpose-tagged stream keyed by the step
//! (and batch slot), so toggling one component never perturbs the draws of
//! another, and a checkpoint resume needs no RNG state at all.

pub mod checkpoint;
pub mod config;
pub mod metrics;
pub mod optim;

use ndarray::Array2;
use rand::Rng;
use std::path::Path;
use std::time::Instant;
use thiserror::Error;

pub use checkpoint::Checkpoint;
pub use config::{AblationFlags, ConfigError, TrainConfig};
pub use metrics::{ContrastRoute, EvalPoint, MetricsWriter, StepProbes, StepReport, StepStats};
pub use optim::Sgd;

use crate::contrastive::{build_plan, rwc_loss, BankNegatives};
use crate::core::{streams, ImageTensor, LabelMap, ProbMap, RngHandle, IGNORE};
use crate::data::DatasetBundle;
use crate::eval::evaluate_model;
use crate::membank::{BankEntry, MemoryBank};
use crate::mixing::{
    apply_classmix, apply_cutmix, downsample_label_majority, photometric_augment,
    sample_classmix_spec, sample_cutmix_spec, Sample,
};
use crate::models::{
    cross_entropy, ema_update, normalize_cells, normalize_cells_backward, teacher_forward, Branch,
    EmaState, GradSet, SegModel,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] crate::models::ModelError),
    #[error(transparent)]
    Mix(#[from] crate::mixing::MixError),
    #[error(transparent)]
    Contrast(#[from] crate::contrastive::ContrastError),
    #[error(transparent)]
    Bank(#[from] crate::membank::BankError),
    #[error(transparent)]
    Data(#[from] crate::data::DataError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("non-finite {context} at step {step}")]
    NonFinite { step: u64, context: String },
    #[error("{0} dataset is empty")]
    EmptyDataset(&'static str),
    #[error("batch of {got} does not match image config {expected}")]
    BatchShape { got: String, expected: String },
    #[error("io: {0}")]
    Io(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// One source sample plus one unlabeled target image.
#[derive(Debug, Clone)]
pub struct StepInput {
    pub source: Sample,
    pub target_image: ImageTensor,
}

/// Everything a run mutates: both networks, optimizer and EMA state, the
/// memory bank, and the step counter.
pub struct TrainState {
    pub student: Branch,
    pub teacher: Branch,
    pub sgd: Sgd,
    pub ema: EmaState,
    pub bank: MemoryBank,
    pub next_step: u64,
}

impl TrainState {
    /// Fresh state: the teacher starts as an exact copy of the student.
    pub fn init(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let init_rng = RngHandle::new(cfg.seed).substream(streams::INIT_PARAMS, 0);
        let student = Branch::init(&cfg.model, &init_rng)?;
        let teacher = student.clone();
        let sgd = Sgd::new(&student);
        Ok(Self {
            student,
            teacher,
            sgd,
            ema: EmaState::new(cfg.ema_decay)?,
            bank: MemoryBank::new(cfg.bank.depth, cfg.bank.capacity),
            next_step: 0,
        })
    }

    /// Snapshot of the full mutable state plus the resolved config.
    pub fn capture(&self, cfg: &TrainConfig) -> Checkpoint {
        Checkpoint {
            format_version: env!("CARGO_PKG_VERSION").to_string(),
            step: self.next_step,
            ema_step: self.ema.step,
            config: cfg.clone(),
            student: checkpoint::params_to_map(&self.student),
            teacher: checkpoint::params_to_map(&self.teacher),
            velocity: self
                .sgd
                .velocity
                .iter()
                .map(|v| checkpoint::TensorData::from_view(&v.view()))
                .collect(),
            bank: cfg.bank.in_checkpoint.then(|| self.bank.clone()),
        }
    }

    /// Rebuilds state from a checkpoint; the embedded config governs model
    /// shapes. Resumed runs reproduce the uninterrupted run exactly when the
    /// bank was included (or the memory bank is disabled).
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<(Self, TrainConfig), TrainError> {
        let cfg = ckpt.config.clone();
        let mut state = Self::init(&cfg)?;
        checkpoint::load_params_from_map(&mut state.student, &ckpt.student, "student")?;
        checkpoint::load_params_from_map(&mut state.teacher, &ckpt.teacher, "teacher")?;
        if ckpt.velocity.len() != state.sgd.velocity.len() {
            return Err(TrainError::Checkpoint(format!(
                "velocity count {} does not match model ({})",
                ckpt.velocity.len(),
                state.sgd.velocity.len()
            )));
        }
        for (slot, tensor) in state.sgd.velocity.iter_mut().zip(&ckpt.velocity) {
            let restored = tensor.to_array()?;
            if restored.shape() != slot.shape() {
                return Err(TrainError::Checkpoint(
                    "velocity shape mismatch".to_string(),
                ));
            }
            *slot = restored;
        }
        state.ema = EmaState {
            decay: cfg.ema_decay,
            step: ckpt.ema_step,
        };
        if let Some(bank) = &ckpt.bank {
            state.bank = bank.clone();
        }
        state.next_step = ckpt.step;
        Ok((state, cfg))
    }
}

/// Teacher argmax pseudo-labels plus the full probability map. Ties break
/// toward the lowest class id; nothing here records gradients.
pub fn pseudo_label(
    teacher: &SegModel,
    target_image: &ImageTensor,
) -> Result<(LabelMap, ProbMap), TrainError> {
    let (probs, _) = teacher_forward(teacher, target_image)?;
    Ok((probs.argmax(), probs))
}

/// Cross-entropy between a probability map and a (pseudo-)label map over
/// non-IGNORE pixels, scaled by the confidence weight. The training path
/// computes the same value from logits; this is the inspection surface.
pub fn consistency_loss(
    p_class: &ProbMap,
    y_class: &LabelMap,
    confidence_weight: f64,
) -> Result<f64, TrainError> {
    let (h, w, c) = p_class.data.dim();
    if y_class.dims() != (h, w) {
        return Err(TrainError::BatchShape {
            got: format!("{:?}", y_class.dims()),
            expected: format!("({h}, {w})"),
        });
    }
    let mut total = 0.0;
    let mut valid = 0usize;
    for y in 0..h {
        for x in 0..w {
            let t = y_class.data[[y, x]];
            if t == IGNORE {
                continue;
            }
            if t as usize >= c {
                return Err(TrainError::BatchShape {
                    got: format!("label {t}"),
                    expected: format!("< {c} classes"),
                });
            }
            valid += 1;
            total -= p_class.data[[y, x, t as usize]].max(1e-300).ln();
        }
    }
    if valid == 0 {
        return Ok(0.0);
    }
    Ok(confidence_weight * total / valid as f64)
}

/// DACS-style consistency weight: the fraction of target-origin pixels
/// (mask == 0) whose teacher max-probability exceeds the threshold. A mixed
/// image with no target-origin pixels carries only ground truth, weight 1.
fn confidence_weight(mask: &Array2<u8>, teacher_probs: &ProbMap, threshold: f64) -> f64 {
    let max_prob = teacher_probs.max_prob();
    let mut target_pixels = 0usize;
    let mut confident = 0usize;
    for (m, p) in mask.iter().zip(max_prob.iter()) {
        if *m == 0 {
            target_pixels += 1;
            if *p > threshold {
                confident += 1;
            }
        }
    }
    if target_pixels == 0 {
        1.0
    } else {
        confident as f64 / target_pixels as f64
    }
}

/// Executes one full training step over a batch of source/target pairs and
/// returns the per-loss scalars, sampling statistics, and call-count probes.
pub fn train_step(
    state: &mut TrainState,
    batch: &[StepInput],
    cfg: &TrainConfig,
) -> Result<StepReport, TrainError> {
    let started = Instant::now();
    let step = state.next_step;
    let (img_h, img_w) = (cfg.model.image_h, cfg.model.image_w);
    if batch.is_empty() || batch.len() > 256 {
        return Err(TrainError::BatchShape {
            got: format!("{} items", batch.len()),
            expected: "1..=256 items".into(),
        });
    }
    for item in batch {
        if item.source.image.dims() != (img_h, img_w)
            || item.target_image.dims() != (img_h, img_w)
        {
            return Err(TrainError::BatchShape {
                got: format!(
                    "source {:?}, target {:?}",
                    item.source.image.dims(),
                    item.target_image.dims()
                ),
                expected: format!("({img_h}, {img_w})"),
            });
        }
    }

    let base = RngHandle::new(cfg.seed);
    let stride = cfg.model.stride();
    let ccfg = cfg.contrastive_config();
    let inv_b = 1.0 / batch.len() as f64;
    let need_teacher = cfg.loss.lambda_cons > 0.0 || cfg.ablation.rwc;

    let mut grads = GradSet::zeros_like(&state.student);
    let cls_off = state.student.classifier_offset();
    let proj_off = state.student.projector_offset();
    let mut probes = StepProbes::default();
    let (mut sum_ce, mut sum_cons, mut sum_cont, mut sum_weight) = (0.0, 0.0, 0.0, 0.0);
    let mut anchor_total = 0usize;
    let mut negative_total = 0usize;
    let mut bank_candidates: Vec<BankEntry> = Vec::new();

    for (slot, item) in batch.iter().enumerate() {
        let key = (step << 8) | slot as u64;

        let teacher_out = if need_teacher {
            probes.teacher_seg_forwards += 1;
            Some(state.teacher.seg.infer(&item.target_image)?)
        } else {
            None
        };
        let teacher_probs_up = teacher_out.as_ref().map(|o| o.probs());
        let pseudo = teacher_probs_up.as_ref().map(|p| p.argmax());

        // ClassMix consistency branch
        if cfg.loss.lambda_cons > 0.0 {
            let probs_up = teacher_probs_up.as_ref().expect("teacher ran");
            let pseudo = pseudo.as_ref().expect("teacher ran");
            let cm_spec = sample_classmix_spec(
                &base.substream(streams::CLASSMIX_SELECT, key),
                &item.source.label,
            )?;
            let mixed = apply_classmix(&item.source, &item.target_image, pseudo, &cm_spec)?;
            let x_class = photometric_augment(
                &mixed.image,
                &base.substream(streams::PHOTO_CLASSMIX, key),
                &cfg.mixing.photometric,
            );
            probes.student_seg_forwards += 1;
            let fwd = state.student.seg.forward(&x_class)?;
            let ce = cross_entropy(&fwd.up_logits, &mixed.label)?;
            let weight = confidence_weight(&mixed.mask, probs_up, cfg.loss.confidence_threshold);
            sum_cons += ce.value * weight;
            sum_weight += weight;
            let scale = cfg.loss.lambda_cons * weight * inv_b;
            if scale > 0.0 && ce.valid_pixels > 0 {
                let d_up = ce.grad_logits.mapv(|g| g * scale);
                let (d_z, cls_grads) = state.student.seg.classifier.backward(&fwd.cls_cache, &d_up);
                let enc_grads = state.student.seg.encoder.backward(&fwd.enc_cache, &d_z);
                grads.add_scaled_at(0, &enc_grads, 1.0);
                grads.add_scaled_at(cls_off, &cls_grads, 1.0);
            }
        }

        // Source cross-entropy branch
        {
            probes.student_seg_forwards += 1;
            let fwd = state.student.seg.forward(&item.source.image)?;
            let ce = cross_entropy(&fwd.up_logits, &item.source.label)?;
            sum_ce += ce.value;
            let scale = cfg.loss.lambda_ce * inv_b;
            if scale > 0.0 && ce.valid_pixels > 0 {
                let d_up = ce.grad_logits.mapv(|g| g * scale);
                let (d_z, cls_grads) = state.student.seg.classifier.backward(&fwd.cls_cache, &d_up);
                let enc_grads = state.student.seg.encoder.backward(&fwd.enc_cache, &d_z);
                grads.add_scaled_at(0, &enc_grads, 1.0);
                grads.add_scaled_at(cls_off, &cls_grads, 1.0);
            }
        }

        // CutMix contrastive branch
        if cfg.ablation.rwc {
            let t_out = teacher_out.as_ref().expect("teacher ran");
            let pseudo = pseudo.as_ref().expect("teacher ran");
            let cut_spec = sample_cutmix_spec(
                &base.substream(streams::CUTMIX_RECT, key),
                img_h,
                img_w,
                stride,
                &cfg.mixing.cutmix,
            )?;
            let target_sample = Sample::new(item.target_image.clone(), pseudo.clone())?;
            let mixed = apply_cutmix(&item.source, &target_sample, &cut_spec)?;
            let x_cut = photometric_augment(
                &mixed.image,
                &base.substream(streams::PHOTO_CUTMIX, key),
                &cfg.mixing.photometric,
            );
            probes.student_cut_encoder_forwards += 1;
            let (z_cut, enc_cache) = state.student.seg.encoder.forward(&x_cut)?;

            enum Route {
                Feature {
                    norm: Option<(Array2<f64>, ndarray::Array3<f64>)>,
                },
                Embedding {
                    cache: crate::models::projector::ProjectorCache,
                },
            }
            let normalize = cfg.model.normalize_embeddings;
            let (e_cut, e_t, route) = if cfg.ablation.contrast_on_z {
                probes.contrast_route = Some(ContrastRoute::Feature);
                let (cut_data, norm) = if normalize {
                    let (normalized, norms) = normalize_cells(&z_cut.data)?;
                    (normalized.clone(), Some((norms, normalized)))
                } else {
                    (z_cut.data.clone(), None)
                };
                let t_data = if normalize {
                    normalize_cells(&t_out.z.data)?.0
                } else {
                    t_out.z.data.clone()
                };
                (
                    crate::core::EmbeddingGrid::new(cut_data, normalize),
                    crate::core::EmbeddingGrid::new(t_data, normalize),
                    Route::Feature { norm },
                )
            } else {
                probes.student_projector_forwards += 1;
                let (e_cut, cache) = state.student.proj.project(&z_cut, normalize)?;
                probes.teacher_projector_forwards += 1;
                let e_t = state.teacher.proj.infer(&t_out.z, normalize)?;
                probes.contrast_route = Some(ContrastRoute::Embedding);
                (e_cut, e_t, Route::Embedding { cache })
            };

            let (gh, gw, _) = e_t.dims();
            let mixed_label_feat = downsample_label_majority(&mixed.label, stride, gh, gw);
            let feat_probs = t_out.feat_probs();
            let bank_view = if ccfg.use_memory_bank {
                state.bank.view()
            } else {
                BankNegatives::default()
            };
            probes.plans_built += 1;
            let plan = build_plan(
                &cut_spec,
                &e_t,
                &e_cut,
                &feat_probs,
                &mixed_label_feat,
                &bank_view,
                &ccfg,
                &base.substream(streams::NS_RANDOM, key),
            )?;
            probes.ns_random_applications += plan.construction.ns_random_applications as u32;
            probes.ns_category_applications += plan.construction.ns_category_applications as u32;
            if plan.construction.ps_applied {
                probes.positive_filter_applications += 1;
            }
            let rwc = rwc_loss(&plan, &e_t, &e_cut, &bank_view, ccfg.temperature)?;
            sum_cont += rwc.value;
            anchor_total += plan.anchors.len();
            negative_total += plan.anchors.iter().map(|a| a.negatives.len()).sum::<usize>();

            let mut d_z_cut: Option<ndarray::Array3<f64>> = None;
            let cont_scale = cfg.loss.lambda_cont * inv_b;
            if cont_scale > 0.0 && !plan.anchors.is_empty() {
                let d_e = rwc.grad_e_cut.mapv(|g| g * cont_scale);
                let d = match &route {
                    Route::Embedding { cache } => {
                        let (d_z, proj_grads) = state.student.proj.backward(cache, &d_e);
                        grads.add_scaled_at(proj_off, &proj_grads, 1.0);
                        d_z
                    }
                    Route::Feature { norm: Some((norms, normalized)) } => {
                        normalize_cells_backward(normalized, norms, &d_e)
                    }
                    Route::Feature { norm: None } => d_e,
                };
                d_z_cut = Some(d);
            }

            // optional CE supervision on the CutMix composite
            if cfg.loss.cutmix_ce && cfg.loss.lambda_ce > 0.0 {
                let (_, up_logits, cls_cache) =
                    state.student.seg.classifier.forward(&z_cut, img_h, img_w)?;
                let ce = cross_entropy(&up_logits, &mixed.label)?;
                sum_ce += ce.value;
                if ce.valid_pixels > 0 {
                    let d_up = ce.grad_logits.mapv(|g| g * cfg.loss.lambda_ce * inv_b);
                    let (d_z, cls_grads) =
                        state.student.seg.classifier.backward(&cls_cache, &d_up);
                    grads.add_scaled_at(cls_off, &cls_grads, 1.0);
                    match &mut d_z_cut {
                        Some(total) => *total += &d_z,
                        None => d_z_cut = Some(d_z),
                    }
                }
            }

            if let Some(d_z) = d_z_cut {
                let enc_grads = state.student.seg.encoder.backward(&enc_cache, &d_z);
                grads.add_scaled_at(0, &enc_grads, 1.0);
            }

            // teacher target embeddings at the retained anchors feed the bank
            if ccfg.use_memory_bank {
                let teacher_labels_feat = feat_probs.argmax();
                for anchor in &plan.anchors {
                    let a = anchor.anchor;
                    bank_candidates.push(BankEntry {
                        embedding: e_t.data.slice(ndarray::s![a.row, a.col, ..]).to_owned(),
                        category: teacher_labels_feat.data[[a.row, a.col]],
                        stamp: step,
                    });
                }
            }
        }
    }

    if !grads.is_all_finite() {
        return Err(TrainError::NonFinite {
            step,
            context: "parameter gradients".into(),
        });
    }
    let loss_ce = sum_ce * inv_b;
    let loss_cons = sum_cons * inv_b;
    let loss_cont = sum_cont * inv_b;
    let loss_total = cfg.loss.lambda_ce * loss_ce
        + cfg.loss.lambda_cons * loss_cons
        + cfg.loss.lambda_cont * loss_cont;
    if !loss_total.is_finite() {
        return Err(TrainError::NonFinite {
            step,
            context: "total loss".into(),
        });
    }

    let lr = Sgd::poly_lr(&cfg.optimizer, step, cfg.iterations);
    state
        .sgd
        .step(&cfg.optimizer, lr, &mut state.student, &grads);
    state.ema.decay = if cfg.ema_warmup {
        cfg.ema_decay.min(1.0 - 1.0 / (step as f64 + 1.0))
    } else {
        cfg.ema_decay
    };
    ema_update(&mut state.ema, &mut state.teacher, &state.student)?;

    if ccfg.use_memory_bank {
        probes.bank_pushes += 1;
        state.bank.push_batch(
            bank_candidates,
            step,
            &base.substream(streams::BANK_SUBSAMPLE, step),
        )?;
    }
    state.next_step += 1;

    Ok(StepReport {
        stats: StepStats {
            step,
            loss_ce,
            loss_cons,
            loss_cont,
            loss_total,
            cons_weight: sum_weight * inv_b,
            lr,
            anchor_count: anchor_total,
            mean_negatives: if anchor_total == 0 {
                0.0
            } else {
                negative_total as f64 / anchor_total as f64
            },
            bank_size: state.bank.len(),
            ema_step: state.ema.step,
            probes,
        },
        timing_ms: started.elapsed().as_secs_f64() * 1e3,
    })
}

/// Draws the step's batch from purpose-tagged index streams.
pub fn assemble_batch(
    data: &DatasetBundle,
    cfg: &TrainConfig,
    step: u64,
) -> Result<Vec<StepInput>, TrainError> {
    let base = RngHandle::new(cfg.seed);
    let mut src_rng = base.substream(streams::PICK_SOURCE, step).rng();
    let mut tgt_rng = base.substream(streams::PICK_TARGET, step).rng();
    let targets = data.target.images_only();
    let mut batch = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        let source = data.source.sample(src_rng.gen_range(0..data.source.len()))?;
        let target_image = targets.image(tgt_rng.gen_range(0..targets.len()))?;
        batch.push(StepInput {
            source,
            target_image,
        });
    }
    Ok(batch)
}

/// Results of a full run: per-step stats, eval history, and the final state.
pub struct RunArtifacts {
    pub steps: Vec<StepStats>,
    pub evals: Vec<EvalPoint>,
    pub final_eval: EvalPoint,
    pub final_checkpoint: Checkpoint,
}

fn eval_teacher(
    state: &TrainState,
    cfg: &TrainConfig,
    data: &DatasetBundle,
) -> Result<EvalPoint, TrainError> {
    let report = evaluate_model(
        &state.teacher.seg,
        &data.val,
        cfg.model.num_classes,
        &cfg.eval_subsets,
    )?;
    Ok(EvalPoint {
        step: state.next_step,
        mean_iou: report.mean_iou,
        report,
    })
}

/// Runs training from `state.next_step` to `cfg.iterations`, with periodic
/// teacher-only evaluation and checkpointing. Inference and evaluation use
/// the teacher exclusively.
pub fn train_loop(
    state: &mut TrainState,
    cfg: &TrainConfig,
    data: &DatasetBundle,
    out_dir: Option<&Path>,
) -> Result<RunArtifacts, TrainError> {
    cfg.validate()?;
    if data.source.is_empty() {
        return Err(TrainError::EmptyDataset("source"));
    }
    if data.target.is_empty() {
        return Err(TrainError::EmptyDataset("target"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptyDataset("val"));
    }
    let mut metrics = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)
                .map_err(|e| TrainError::Io(format!("create {}: {e}", dir.display())))?;
            let path = dir.join("metrics.jsonl");
            Some(if state.next_step > 0 && path.exists() {
                MetricsWriter::append(&path)
            } else {
                MetricsWriter::create(&path)
            }
            .map_err(|e| TrainError::Io(format!("metrics.jsonl: {e}")))?)
        }
        None => None,
    };

    let mut steps = Vec::new();
    let mut evals = Vec::new();
    while state.next_step < cfg.iterations {
        let batch = assemble_batch(data, cfg, state.next_step)?;
        let report = train_step(state, &batch, cfg)?;
        if let Some(m) = &mut metrics {
            m.step(&report)
                .map_err(|e| TrainError::Io(format!("metrics write: {e}")))?;
        }
        steps.push(report.stats);

        let done = state.next_step == cfg.iterations;
        if cfg.eval_every > 0 && state.next_step % cfg.eval_every == 0 && !done {
            let point = eval_teacher(state, cfg, data)?;
            if let Some(m) = &mut metrics {
                m.eval(&point)
                    .map_err(|e| TrainError::Io(format!("metrics write: {e}")))?;
            }
            evals.push(point);
        }
        if cfg.checkpoint_every > 0 && state.next_step % cfg.checkpoint_every == 0 && !done {
            if let Some(dir) = out_dir {
                state
                    .capture(cfg)
                    .save(&dir.join(format!("checkpoint_{:06}.json", state.next_step)))?;
            }
        }
    }

    let final_eval = eval_teacher(state, cfg, data)?;
    if let Some(m) = &mut metrics {
        m.eval(&final_eval)
            .map_err(|e| TrainError::Io(format!("metrics write: {e}")))?;
    }
    let final_checkpoint = state.capture(cfg);
    if let Some(dir) = out_dir {
        final_checkpoint.save(&dir.join("checkpoint_final.json"))?;
        let report_path = dir.join("final_report.json");
        let file = std::fs::File::create(&report_path)
            .map_err(|e| TrainError::Io(format!("create {}: {e}", report_path.display())))?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(file), &final_eval)
            .map_err(|e| TrainError::Io(format!("final report: {e}")))?;
    }
    Ok(RunArtifacts {
        steps,
        evals,
        final_eval,
        final_checkpoint,
    })
}
