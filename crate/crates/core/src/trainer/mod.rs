//! End-to-end training of the three experiment arms: supervised
//! source-only, backbone-level alignment (da_cnn), and full sequence
//! feature alignment (sfa).
//!
//! Each step draws equal-sized source and target batches. The supervised
//! set loss uses source labels only; alignment losses see both domains
//! with their domain labels; the consistency regularizer applies per its
//! configuration. One optimizer step descends the reported total
//! `L_det + le*L_enc + ld*L_dec + lc*L_cons`, where gradient reversal
//! inside the alignment path realizes the adversarial min-max.

mod checkpoint;

pub use checkpoint::{
    read_entries, read_state, restore_into, save_checkpoint, write_entries, Entry, TrainState,
};

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use autodiff::{Graph, NodeId};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{domain_bce, dqfa_losses, tda_losses, Discriminator};
use crate::config::{ApplyOn, Arm, ExperimentConfig, ModelConfig};
use crate::consistency::consistency_loss;
use crate::data::{read_split, Scene, Split};
use crate::error::CoreError;
use crate::eval::evaluate_map;
use crate::matching::{detection_loss, LossWeights};
use crate::model::{DetectionModel, SequenceState};
use crate::optim::Adam;
use crate::params::{Binding, ParamStore};

/// Seed salt separating discriminator initialization from the detector,
/// so arms with and without discriminators share detector init bit-exactly.
const DISC_SEED_SALT: u64 = 0x5f37_59df_a511_e857;

/// Salt for per-epoch shuffling streams.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mixed = seed ^ 0x9e37_79b9_7f4a_7c15u64.wrapping_mul(epoch as u64 + 1);
    ChaCha8Rng::seed_from_u64(mixed)
}

/// A detector plus whatever discriminators its arm requires.
#[derive(Debug)]
pub struct ModelBundle {
    pub store: ParamStore,
    pub model: DetectionModel,
    pub enc_disc: Option<Discriminator>,
    pub dec_disc: Option<Discriminator>,
    pub cnn_disc: Option<Discriminator>,
    pub arm: Arm,
}

impl ModelBundle {
    pub fn new(cfg: &ModelConfig, arm: Arm, seed: u64) -> Result<Self, CoreError> {
        let mut store = ParamStore::new();
        let mut rng_model = ChaCha8Rng::seed_from_u64(seed);
        let model = DetectionModel::new(cfg, &mut store, &mut rng_model)?;
        let mut rng_disc = ChaCha8Rng::seed_from_u64(seed ^ DISC_SEED_SALT);
        let (mut enc_disc, mut dec_disc, mut cnn_disc) = (None, None, None);
        match arm {
            Arm::Sfa => {
                enc_disc = Some(Discriminator::new(
                    &mut store,
                    &mut rng_disc,
                    "disc.enc",
                    cfg.hidden_dim,
                ));
                dec_disc = Some(Discriminator::new(
                    &mut store,
                    &mut rng_disc,
                    "disc.dec",
                    cfg.hidden_dim,
                ));
            }
            Arm::DaCnn => {
                cnn_disc = Some(Discriminator::new(&mut store, &mut rng_disc, "disc.cnn", 64));
            }
            Arm::SourceOnly => {}
        }
        Ok(Self {
            store,
            model,
            enc_disc,
            dec_disc,
            cnn_disc,
            arm,
        })
    }

    /// Rebuilds a bundle from a checkpoint, restoring parameters and
    /// optimizer moments.
    pub fn load(path: &Path) -> Result<(Self, Adam, TrainState), CoreError> {
        let (state, entries) = read_state(path)?;
        let mut bundle = Self::new(&state.model, state.arm, 0)?;
        let mut adam = Adam::new(&bundle.store, 0.9, 0.999, 1e-8);
        restore_into(path, &entries, &mut bundle.store, &mut adam)?;
        Ok((bundle, adam, state))
    }
}

/// Loss components of one step (or means over an epoch), before the
/// lambda weighting that forms `total`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepReport {
    pub l_det: f64,
    pub l_enc: f64,
    pub l_dec: f64,
    pub l_cons: f64,
    pub total: f64,
}

struct TermPlan {
    det: bool,
    enc: bool,
    dec: bool,
    cnn: bool,
    cons: bool,
}

fn plan_terms(cfg: &ExperimentConfig, domain: u8) -> TermPlan {
    let flags = &cfg.train.ablation;
    let arm = cfg.train.arm;
    let cons_domain_ok = match cfg.consistency.apply_on {
        ApplyOn::Source => domain == 0,
        ApplyOn::Target => domain == 1,
        ApplyOn::Both => true,
    };
    TermPlan {
        det: domain == 0,
        enc: arm == Arm::Sfa
            && (flags.dqfa_enc || flags.tda_enc)
            && cfg.alignment.lambda_enc > 0.0,
        dec: arm == Arm::Sfa
            && (flags.dqfa_dec || flags.tda_dec)
            && cfg.alignment.lambda_dec > 0.0,
        cnn: arm == Arm::DaCnn && cfg.alignment.lambda_enc > 0.0,
        cons: arm == Arm::Sfa
            && flags.bmc
            && cfg.consistency.lambda_cons > 0.0
            && cons_domain_ok,
    }
}

impl TermPlan {
    fn any(&self) -> bool {
        self.det || self.enc || self.dec || self.cnn || self.cons
    }
}

/// Alignment total over the given layer states with per-term toggles:
/// `sum_l ([tda] tda_l + [dqfa] lambda_q * dqfa_l)`.
fn sequence_alignment_loss(
    g: &mut Graph,
    bind: &Binding,
    states: &[SequenceState],
    disc: &Discriminator,
    domain: u8,
    use_dqfa: bool,
    use_tda: bool,
    lambda_q: f64,
) -> Result<NodeId, CoreError> {
    let dqfa = if use_dqfa {
        dqfa_losses(g, bind, states, disc, domain)?
    } else {
        Vec::new()
    };
    let tda = if use_tda {
        tda_losses(g, bind, states, disc, domain)?
    } else {
        Vec::new()
    };
    let layers = dqfa.len().max(tda.len());
    let mut total: Option<NodeId> = None;
    for l in 0..layers {
        let mut layer: Option<NodeId> = tda.get(l).copied();
        if let Some(&dq) = dqfa.get(l) {
            let weighted = g.scale(dq, lambda_q);
            layer = Some(match layer {
                Some(t) => g.add(t, weighted)?,
                None => weighted,
            });
        }
        if let Some(node) = layer {
            total = Some(match total {
                Some(t) => g.add(t, node)?,
                None => node,
            });
        }
    }
    Ok(total.unwrap_or_else(|| g.constant_scalar(0.0)))
}

/// Per-pixel domain classification on the final backbone map, behind a
/// gradient-reversal layer.
fn cnn_alignment_loss(
    g: &mut Graph,
    bind: &Binding,
    feature_map: NodeId,
    disc: &Discriminator,
    domain: u8,
) -> Result<NodeId, CoreError> {
    let shape = g.shape(feature_map).to_vec();
    let (c, hw) = (shape[0], shape[1] * shape[2]);
    let flat = g.reshape(feature_map, vec![c, hw])?;
    let tokens = g.transpose(flat)?;
    let reversed = g.grad_reverse(tokens);
    let probs = disc.forward(g, bind, reversed)?;
    domain_bce(g, probs, domain)
}

fn last_only(states: &[SequenceState]) -> &[SequenceState] {
    let n = states.len();
    &states[n - 1..]
}

#[derive(Default)]
struct ComponentAcc {
    l_det: f64,
    l_enc: f64,
    l_dec: f64,
    l_cons: f64,
}

#[allow(clippy::too_many_arguments)]
fn process_sample(
    bundle: &mut ModelBundle,
    scene: &Scene,
    domain: u8,
    cfg: &ExperimentConfig,
    weights: &LossWeights,
    batch_size: usize,
    cons_count: usize,
    acc: &mut ComponentAcc,
) -> Result<(), CoreError> {
    let plan = plan_terms(cfg, domain);
    if !plan.any() {
        return Ok(());
    }
    let inv_b = 1.0 / batch_size as f64;
    let mut g = Graph::new();
    let bind = bundle.store.bind(&mut g);
    let pass = bundle.model.forward(&mut g, &bind, &scene.image, true)?;
    let mut terms: Vec<NodeId> = Vec::new();

    if plan.det {
        let l_det = detection_loss(&mut g, &pass.predictions, &scene.annotations, weights)?;
        acc.l_det += g.scalar_value(l_det) * inv_b;
        terms.push(g.scale(l_det, inv_b));
    }
    if plan.enc {
        let disc = bundle.enc_disc.as_ref().expect("sfa arm has encoder disc");
        let flags = &cfg.train.ablation;
        let states = if flags.hierarchical {
            &pass.encoder_states[..]
        } else {
            last_only(&pass.encoder_states)
        };
        let l_enc = sequence_alignment_loss(
            &mut g,
            &bind,
            states,
            disc,
            domain,
            flags.dqfa_enc,
            flags.tda_enc,
            cfg.alignment.lambda_enc_q,
        )?;
        acc.l_enc += g.scalar_value(l_enc) * inv_b;
        terms.push(g.scale(l_enc, cfg.alignment.lambda_enc * inv_b));
    }
    if plan.dec {
        let disc = bundle.dec_disc.as_ref().expect("sfa arm has decoder disc");
        let flags = &cfg.train.ablation;
        let states = if flags.hierarchical {
            &pass.decoder_states[..]
        } else {
            last_only(&pass.decoder_states)
        };
        let l_dec = sequence_alignment_loss(
            &mut g,
            &bind,
            states,
            disc,
            domain,
            flags.dqfa_dec,
            flags.tda_dec,
            cfg.alignment.lambda_dec_q,
        )?;
        acc.l_dec += g.scalar_value(l_dec) * inv_b;
        terms.push(g.scale(l_dec, cfg.alignment.lambda_dec * inv_b));
    }
    if plan.cnn {
        let disc = bundle.cnn_disc.as_ref().expect("da_cnn arm has cnn disc");
        let map = *pass.backbone_maps.last().expect("backbone levels");
        let l_cnn = cnn_alignment_loss(&mut g, &bind, map, disc, domain)?;
        // Reported under the encoder column: it is the arm's only
        // alignment term.
        acc.l_enc += g.scalar_value(l_cnn) * inv_b;
        terms.push(g.scale(l_cnn, cfg.alignment.lambda_enc * inv_b));
    }
    if plan.cons {
        let l_cons = consistency_loss(&mut g, &pass.predictions, cfg.consistency.lambda_l1)?;
        acc.l_cons += g.scalar_value(l_cons) / cons_count as f64;
        terms.push(g.scale(l_cons, cfg.consistency.lambda_cons / cons_count as f64));
    }

    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    g.backward(total)?;
    bundle.store.absorb_grads(&g, &bind);
    Ok(())
}

/// One optimizer step over paired source/target batches. Returns the
/// unweighted loss components; `total` is their lambda-weighted sum.
pub fn train_step(
    bundle: &mut ModelBundle,
    adam: &mut Adam,
    source_batch: &[&Scene],
    target_batch: &[&Scene],
    cfg: &ExperimentConfig,
    lr: f64,
    step: u64,
) -> Result<StepReport, CoreError> {
    if source_batch.is_empty() || target_batch.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    bundle.store.zero_grads();
    let weights = LossWeights::default();
    let cons_count = {
        let mut n = 0;
        if plan_terms(cfg, 0).cons {
            n += source_batch.len();
        }
        if plan_terms(cfg, 1).cons {
            n += target_batch.len();
        }
        n.max(1)
    };
    let mut acc = ComponentAcc::default();
    for scene in source_batch {
        process_sample(bundle, scene, 0, cfg, &weights, source_batch.len(), cons_count, &mut acc)?;
    }
    for scene in target_batch {
        process_sample(bundle, scene, 1, cfg, &weights, target_batch.len(), cons_count, &mut acc)?;
    }

    let total = acc.l_det
        + cfg.alignment.lambda_enc * acc.l_enc
        + cfg.alignment.lambda_dec * acc.l_dec
        + cfg.consistency.lambda_cons * acc.l_cons;
    for (component, value) in [
        ("L_det", acc.l_det),
        ("L_enc", acc.l_enc),
        ("L_dec", acc.l_dec),
        ("L_cons", acc.l_cons),
        ("total", total),
    ] {
        if !value.is_finite() {
            return Err(CoreError::NonFiniteLoss { component, step });
        }
    }
    adam.step(&mut bundle.store, lr);
    Ok(StepReport {
        l_det: acc.l_det,
        l_enc: acc.l_enc,
        l_dec: acc.l_dec,
        l_cons: acc.l_cons,
        total,
    })
}

/// Result of a full training run.
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub epochs_run: usize,
    pub final_target_map: f64,
    pub best_target_map: f64,
    pub metrics_path: PathBuf,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
}

const EVAL_SCORE_THRESHOLD: f64 = 0.05;

/// Trains per the configuration, writing a per-epoch metrics CSV and
/// last/best checkpoints into `cfg.out_dir`. With `resume`, continues
/// bit-exactly from the last checkpoint if one exists.
pub fn fit(cfg: &ExperimentConfig, resume: bool) -> Result<FitSummary, CoreError> {
    cfg.validate()?;
    let out_dir = &cfg.out_dir;
    fs::create_dir_all(out_dir).map_err(|e| CoreError::io(out_dir, e))?;
    let metrics_path = out_dir.join("metrics.csv");
    let last_path = out_dir.join("last.ckpt");
    let best_path = out_dir.join("best.ckpt");

    let source_train = read_split(&cfg.data_dir, 0, Split::Train)?;
    let target_train = read_split(&cfg.data_dir, 1, Split::Train)?;
    let source_val = read_split(&cfg.data_dir, 0, Split::Val)?;
    let target_val = read_split(&cfg.data_dir, 1, Split::Val)?;
    if source_train.is_empty() || target_train.is_empty() {
        return Err(CoreError::EmptyBatch);
    }
    for scenes in [&source_train, &source_val, &target_val] {
        check_classes(scenes, cfg.model.num_classes)?;
    }

    let mut bundle;
    let mut adam;
    let mut start_epoch = 0usize;
    let mut global_step = 0u64;
    let mut best = f64::NEG_INFINITY;
    let mut rows: Vec<String> = Vec::new();

    if resume && last_path.exists() {
        let (b, a, state) = ModelBundle::load(&last_path)?;
        bundle = b;
        adam = a;
        start_epoch = state.completed_epochs;
        global_step = state.global_step;
        best = if state.best_target_map.is_nan() {
            f64::NEG_INFINITY
        } else {
            state.best_target_map
        };
        if metrics_path.exists() {
            let text =
                fs::read_to_string(&metrics_path).map_err(|e| CoreError::io(&metrics_path, e))?;
            rows = text
                .lines()
                .skip(1)
                .take(start_epoch)
                .map(String::from)
                .collect();
        }
    } else {
        bundle = ModelBundle::new(&cfg.model, cfg.train.arm, cfg.train.seed)?;
        adam = Adam::new(
            &bundle.store,
            cfg.train.optimizer.beta1,
            cfg.train.optimizer.beta2,
            cfg.train.optimizer.eps,
        );
        let state = TrainState {
            completed_epochs: 0,
            global_step: 0,
            best_target_map: f64::NEG_INFINITY,
            arm: cfg.train.arm,
            model: cfg.model.clone(),
        };
        save_checkpoint(&last_path, &bundle.store, &adam, &state)?;
    }

    write_metrics(&metrics_path, &rows)?;

    let batch = cfg.train.batch_size;
    let mut final_target_map = 0.0;
    for epoch in start_epoch..cfg.train.epochs {
        let lr = cfg.train.optimizer.lr_at_epoch(epoch);
        let mut rng = epoch_rng(cfg.train.seed, epoch);
        let mut order_s: Vec<usize> = (0..source_train.len()).collect();
        let mut order_t: Vec<usize> = (0..target_train.len()).collect();
        order_s.shuffle(&mut rng);
        order_t.shuffle(&mut rng);
        let steps = source_train.len().min(target_train.len()) / batch;

        let mut sums = StepReport::default();
        for s in 0..steps {
            let sb: Vec<&Scene> = order_s[s * batch..(s + 1) * batch]
                .iter()
                .map(|&i| &source_train[i])
                .collect();
            let tb: Vec<&Scene> = order_t[s * batch..(s + 1) * batch]
                .iter()
                .map(|&i| &target_train[i])
                .collect();
            let report = train_step(&mut bundle, &mut adam, &sb, &tb, cfg, lr, global_step)?;
            sums.l_det += report.l_det;
            sums.l_enc += report.l_enc;
            sums.l_dec += report.l_dec;
            sums.l_cons += report.l_cons;
            sums.total += report.total;
            global_step += 1;
        }
        let n = steps.max(1) as f64;

        let target_eval = evaluate_map(&bundle.model, &bundle.store, &target_val, EVAL_SCORE_THRESHOLD, 0.5)?;
        let source_eval = evaluate_map(&bundle.model, &bundle.store, &source_val, EVAL_SCORE_THRESHOLD, 0.5)?;
        final_target_map = target_eval.map;

        rows.push(format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            epoch,
            global_step,
            sums.l_det / n,
            sums.l_enc / n,
            sums.l_dec / n,
            sums.l_cons / n,
            sums.total / n,
            target_eval.map,
            source_eval.map,
        ));
        write_metrics(&metrics_path, &rows)?;

        if target_eval.map > best {
            best = target_eval.map;
            let state = TrainState {
                completed_epochs: epoch + 1,
                global_step,
                best_target_map: best,
                arm: cfg.train.arm,
                model: cfg.model.clone(),
            };
            save_checkpoint(&best_path, &bundle.store, &adam, &state)?;
        }
        let state = TrainState {
            completed_epochs: epoch + 1,
            global_step,
            best_target_map: best,
            arm: cfg.train.arm,
            model: cfg.model.clone(),
        };
        save_checkpoint(&last_path, &bundle.store, &adam, &state)?;
    }

    if !best_path.exists() {
        // Zero-epoch runs still leave a usable pair of checkpoints.
        fs::copy(&last_path, &best_path).map_err(|e| CoreError::io(&best_path, e))?;
    }
    Ok(FitSummary {
        epochs_run: cfg.train.epochs.saturating_sub(start_epoch),
        final_target_map,
        best_target_map: best.max(0.0),
        metrics_path,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
    })
}

pub const METRICS_HEADER: &str =
    "epoch,step,L_det,L_enc,L_dec,L_cons,total,target_mAP50,source_mAP50";

fn write_metrics(path: &Path, rows: &[String]) -> Result<(), CoreError> {
    let mut f = fs::File::create(path).map_err(|e| CoreError::io(path, e))?;
    writeln!(f, "{METRICS_HEADER}").map_err(|e| CoreError::io(path, e))?;
    for row in rows {
        writeln!(f, "{row}").map_err(|e| CoreError::io(path, e))?;
    }
    Ok(())
}

/// Errors when any annotation uses a class id outside the model's range.
pub fn check_classes(scenes: &[Scene], num_classes: usize) -> Result<(), CoreError> {
    let max = scenes
        .iter()
        .flat_map(|s| s.annotations.classes.iter().copied())
        .max();
    if let Some(max) = max {
        if max >= num_classes {
            return Err(CoreError::ClassCountMismatch {
                checkpoint_classes: num_classes,
                dataset_max_class: max,
            });
        }
    }
    Ok(())
}

/// Loss trajectories of the one-sided gradient audit on a fixed batch.
#[derive(Debug, Clone)]
pub struct AuditReport {
    /// Alignment BCE after each step updating only the discriminators.
    pub discriminator_side: Vec<f64>,
    /// Alignment BCE after each step updating only the detector.
    pub generator_side: Vec<f64>,
}

/// Runs the two one-sided phases: with features frozen the
/// discriminator BCE must descend; with discriminators frozen, gradient
/// reversal must drive the same BCE up.
pub fn one_sided_gradient_audit(steps: usize, seed: u64) -> Result<AuditReport, CoreError> {
    use crate::config::ShiftConfig;
    use crate::data::generate_scene;

    let cfg = ModelConfig {
        num_levels: 1,
        hidden_dim: 16,
        num_encoder_layers: 1,
        num_decoder_layers: 1,
        num_object_queries: 4,
        num_heads: 2,
        num_classes: 3,
        image_size: (32, 32),
    };
    let shift = ShiftConfig::fog();
    let batch: Vec<(Scene, u8)> = vec![
        (generate_scene(seed, 0, &shift, cfg.image_size), 0),
        (generate_scene(seed + 1, 0, &shift, cfg.image_size), 0),
        (generate_scene(seed, 1, &shift, cfg.image_size), 1),
        (generate_scene(seed + 1, 1, &shift, cfg.image_size), 1),
    ];

    let run_phase = |keep: fn(&str) -> bool| -> Result<Vec<f64>, CoreError> {
        let mut bundle = ModelBundle::new(&cfg, Arm::Sfa, seed)?;
        let mut adam = Adam::new(&bundle.store, 0.9, 0.999, 1e-8);
        let mut trajectory = Vec::with_capacity(steps + 1);
        for _ in 0..=steps {
            bundle.store.zero_grads();
            let mut batch_loss = 0.0;
            for (scene, domain) in &batch {
                let mut g = Graph::new();
                let bind = bundle.store.bind(&mut g);
                let pass = bundle.model.forward(&mut g, &bind, &scene.image, true)?;
                let enc = sequence_alignment_loss(
                    &mut g,
                    &bind,
                    &pass.encoder_states,
                    bundle.enc_disc.as_ref().expect("sfa"),
                    *domain,
                    true,
                    true,
                    0.1,
                )?;
                let dec = sequence_alignment_loss(
                    &mut g,
                    &bind,
                    &pass.decoder_states,
                    bundle.dec_disc.as_ref().expect("sfa"),
                    *domain,
                    true,
                    true,
                    0.1,
                )?;
                let sum = g.add(enc, dec)?;
                let weighted = g.scale(sum, 1.0 / batch.len() as f64);
                batch_loss += g.scalar_value(weighted);
                g.backward(weighted)?;
                bundle.store.absorb_grads(&g, &bind);
            }
            trajectory.push(batch_loss);
            bundle.store.mask_grads(keep);
            adam.step(&mut bundle.store, 1e-3);
        }
        Ok(trajectory)
    };

    Ok(AuditReport {
        discriminator_side: run_phase(|name| name.starts_with("disc."))?,
        generator_side: run_phase(|name| !name.starts_with("disc."))?,
    })
}
