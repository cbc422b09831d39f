//! Momentum-SGD training loop: seeded batching with horizontal-flip
//! augmentation, per-step loss logging of every objective term, periodic and
//! final checkpoints, resumable from a checkpoint with optimizer state.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array4, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint, TrainState};
use crate::config::RunConfig;
use crate::data::{self, ImagePair, Split};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::nn::sgd::Sgd;
use crate::nn::{ParamRef, Parameterized};
use crate::supervision::{total_loss, AnnotationTriplet, LossBreakdown};

/// Environment variable prefixed to relative run directories.
pub const RUN_ROOT_ENV: &str = "RGBT_DET_RUN_ROOT";

pub fn resolve_run_dir(dir: &Path) -> PathBuf {
    if dir.is_absolute() {
        return dir.to_path_buf();
    }
    match std::env::var_os(RUN_ROOT_ENV) {
        Some(root) if !root.is_empty() => PathBuf::from(root).join(dir),
        _ => dir.to_path_buf(),
    }
}

pub struct TrainOutcome {
    pub first_loss: f64,
    /// Mean total loss over the last up-to-10 steps.
    pub final_loss: f64,
    pub steps_done: u64,
    pub final_checkpoint: PathBuf,
    pub elapsed_secs: f64,
}

/// Advisory per-run-directory lock; released on drop.
struct RunLock {
    path: PathBuf,
}

impl RunLock {
    fn acquire(run_dir: &Path) -> Result<RunLock> {
        let path = run_dir.join(".lock");
        match std::fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(RunLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Config(format!(
                "run directory is locked by another process (remove {} if stale)",
                path.display()
            ))),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

/// Stacks `(3, H, W)` per-image tensors into a `(B, 3, H, W)` batch.
fn stack_batch(pairs: &[&ImagePair], flips: &[bool]) -> (Array4<f32>, Array4<f32>, Vec<AnnotationTriplet>) {
    let (h, w) = pairs[0].size();
    let b = pairs.len();
    let mut xv = Array4::zeros((b, 3, h, w));
    let mut xt = Array4::zeros((b, 3, h, w));
    let mut triplets = Vec::with_capacity(b);
    for (i, (&pair, &flip)) in pairs.iter().zip(flips).enumerate() {
        let flipped;
        let p = if flip {
            flipped = pair.hflip();
            &flipped
        } else {
            pair
        };
        let (v, t) = p.input_tensors::<f32>();
        xv.index_axis_mut(Axis(0), i).assign(&v);
        xt.index_axis_mut(Axis(0), i).assign(&t);
        triplets.push(p.annotations.clone());
    }
    (xv, xt, triplets)
}

fn log_line(step: u64, bd: &LossBreakdown, lr: f64) -> String {
    format!(
        "{step} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {:.6} {lr}\n",
        bd.total,
        bd.cls[0],
        bd.cls[1],
        bd.cls[2],
        bd.obj[0],
        bd.obj[1],
        bd.obj[2],
        bd.bbox[0],
        bd.bbox[1],
        bd.bbox[2],
        bd.seg_v,
        bd.seg_t
    )
}

pub fn train(
    cfg: &RunConfig,
    data_root: &Path,
    run_dir: &Path,
    resume: Option<&Path>,
    quiet: bool,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let run_dir = resolve_run_dir(run_dir);
    std::fs::create_dir_all(&run_dir).map_err(|e| Error::io(&run_dir, e))?;
    let _lock = RunLock::acquire(&run_dir)?;

    // anchors come from the dataset metadata, or k-means over the training
    // union boxes when the layout carries no meta file
    let pairs = data::load_dataset(data_root, Split::Train)?;
    if pairs.is_empty() {
        return Err(Error::integrity(data_root, "training split is empty"));
    }
    let (ih, iw) = pairs[0].size();
    if (ih, iw) != (cfg.image_size, cfg.image_size) {
        return Err(Error::Config(format!(
            "dataset images are {ih}x{iw} but config expects {0}x{0} (set image_size)",
            cfg.image_size
        )));
    }
    let anchors = match data::DatasetMeta::read(data_root) {
        Ok(meta) => meta.anchors,
        Err(_) => None,
    }
    .or_else(|| {
        let boxes: Vec<(f64, f64)> = pairs
            .iter()
            .flat_map(|p| {
                p.annotations
                    .union
                    .iter()
                    .map(|a| (a.w * iw as f64, a.h * ih as f64))
            })
            .collect();
        data::anchors_from_boxes(&boxes)
    });
    let net_cfg = cfg.network_config(anchors)?;

    std::fs::write(run_dir.join("config.echo"), cfg.to_kv())
        .map_err(|e| Error::io(run_dir.join("config.echo"), e))?;

    let mut model;
    let mut opt = Sgd::<f32>::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut start_step: u64 = 0;
    match resume {
        Some(ckpt) => {
            let (m, state) = load_checkpoint(ckpt)?;
            if m.cfg.to_kv() != net_cfg.to_kv() {
                return Err(Error::Checkpoint(format!(
                    "{}: checkpoint config does not match the requested run config",
                    ckpt.display()
                )));
            }
            model = m;
            if let Some(st) = state {
                start_step = st.step;
                opt.load_state(st.velocity.into_iter().map(|(k, v)| (k, v)).collect());
            }
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            model = Model::<f32>::new(&mut rng, net_cfg)?;
        }
    }

    let loss_weights = cfg.loss_weights();
    let log_path = run_dir.join("loss.log");
    let mut log = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    if start_step == 0 {
        log.write_all(
            b"# step total cls_f cls_v cls_t obj_f obj_v obj_t bbox_f bbox_v bbox_t seg_v seg_t lr\n",
        )
        .map_err(|e| Error::io(&log_path, e))?;
    }

    let n = pairs.len();
    let started = Instant::now();
    let mut first_loss = f64::NAN;
    let mut recent: Vec<f64> = Vec::new();
    let final_ckpt = run_dir.join("ckpt_final.ckpt");

    for step in start_step..cfg.steps as u64 {
        // epoch-seeded shuffle; resuming lands on the same order
        let samples_seen = step as usize * cfg.batch_size;
        let epoch = samples_seen / n;
        let offset = samples_seen % n;
        let mut order: Vec<usize> = (0..n).collect();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch as u64);
        shuffle(&mut order, &mut epoch_rng);
        let mut batch_idx = Vec::with_capacity(cfg.batch_size);
        for k in 0..cfg.batch_size {
            batch_idx.push(order[(offset + k) % n]);
        }
        let batch: Vec<&ImagePair> = batch_idx.iter().map(|&i| &pairs[i]).collect();
        let mut step_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xF11F << 32) ^ step);
        let flips: Vec<bool> = (0..cfg.batch_size)
            .map(|_| step_rng.gen::<f64>() < cfg.flip_prob)
            .collect();

        let (xv, xt, triplets) = stack_batch(&batch, &flips);
        let (outputs, cache) = model.forward_train(&xv, &xt)?;
        let loss = total_loss(&outputs, &triplets, &loss_weights, &model.cfg);
        let (bd, grads) = match loss {
            Ok(v) => v,
            Err(e @ Error::Diverged(_)) => {
                // leave the last periodic checkpoint in place and bail out
                let _ = log.flush();
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        if step == start_step && start_step == 0 {
            first_loss = bd.total;
        }
        recent.push(bd.total);
        if recent.len() > 10 {
            recent.remove(0);
        }

        model.zero_grads();
        model.backward(&cache, &grads);
        opt.step(&mut model);

        log.write_all(log_line(step, &bd, cfg.lr).as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;
        if !quiet && (step % 10 == 0 || step + 1 == cfg.steps as u64) {
            println!(
                "step {step}/{} total {:.4} obj {:.4} cls {:.4} bbox {:.4} seg {:.4} [{:.1}s]",
                cfg.steps,
                bd.total,
                bd.obj.iter().sum::<f64>(),
                bd.cls.iter().sum::<f64>(),
                bd.bbox.iter().sum::<f64>(),
                bd.seg_v + bd.seg_t,
                started.elapsed().as_secs_f64()
            );
        }

        let next = step + 1;
        if cfg.ckpt_every > 0 && next % cfg.ckpt_every as u64 == 0 && next < cfg.steps as u64 {
            let state = snapshot_state(next, &opt);
            save_checkpoint(
                &mut model,
                &run_dir.join(format!("ckpt_step{next:06}.ckpt")),
                Some(&state),
            )?;
        }
    }

    let state = snapshot_state(cfg.steps as u64, &opt);
    save_checkpoint(&mut model, &final_ckpt, Some(&state))?;
    let elapsed = started.elapsed().as_secs_f64();
    let final_loss = recent.iter().sum::<f64>() / recent.len().max(1) as f64;
    Ok(TrainOutcome {
        first_loss,
        final_loss,
        steps_done: cfg.steps as u64,
        final_checkpoint: final_ckpt,
        elapsed_secs: elapsed,
    })
}

fn snapshot_state(step: u64, opt: &Sgd<f32>) -> TrainState {
    let mut velocity: Vec<(String, Vec<f32>)> = opt
        .state()
        .iter()
        .map(|(k, v)| (k.clone(), v.clone()))
        .collect();
    velocity.sort_by(|a, b| a.0.cmp(&b.0));
    TrainState { step, velocity }
}

/// Fisher-Yates with the run's seeded generator.
fn shuffle(order: &mut [usize], rng: &mut ChaCha8Rng) {
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
}

/// Gradient coverage probe used by tests: after one step every parameter
/// must hold a finite gradient.
pub fn gradient_coverage(model: &mut Model<f32>) -> (usize, usize) {
    let mut total = 0usize;
    let mut nonzero = 0usize;
    model.visit_params("", &mut |p: ParamRef<'_, f32>| {
        total += 1;
        if p.g.iter().any(|&g| g != 0.0) && p.g.iter().all(|g| g.is_finite()) {
            nonzero += 1;
        }
    });
    (nonzero, total)
}
