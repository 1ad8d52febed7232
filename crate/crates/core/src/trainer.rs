//! Adam optimization of the refinement network over a prepared dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use dr_autodiff::{Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::eval::evaluate_prepared;
use crate::geometry::CameraRig;
use crate::io::{read_sample, save_checkpoint, write_atomic, Manifest};
use crate::refine::{build_unet, stack_inputs, training_loss, HeadMode, LossTargets, PreparedSample, RefineNetwork, UNetConfig};
use crate::stereo::{compute_disparity, MatchParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub head: HeadMode,
    pub seed: u64,
    pub z_cap: f64,
    /// Pixels with ground-truth disparity above this are not trained on.
    pub d_max: f64,
    pub flip_probability: f64,
    pub unet: UNetConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 1,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            head: HeadMode::Multiplicative,
            seed: 0,
            z_cap: 100.0,
            d_max: 128.0,
            flip_probability: 0.5,
            unet: UNetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if self.epochs < 1 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size < 1 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        for (name, b) in [("beta1", self.adam_beta1), ("beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must be in [0, 1), got {b}"));
            }
        }
        if !(self.adam_eps > 0.0) || !(self.z_cap > 0.0) || !(self.d_max > 0.0) {
            return bad("adam_eps, z_cap and d_max must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.flip_probability) {
            return bad("flip probability must be in [0, 1]".into());
        }
        self.unet.validate()
    }
}

/// Adam moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub step: u64,
}

impl AdamState {
    pub fn new<'a>(params: impl IntoIterator<Item = &'a Tensor<f32>>) -> Self {
        let m: Vec<_> = params.into_iter().map(|p| Tensor::zeros(p.shape())).collect();
        Self {
            v: m.clone(),
            m,
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = &'a mut Tensor<f32>>,
    grads: &[Tensor<f32>],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let mut count = 0;
    for (i, p) in params.into_iter().enumerate() {
        let (g, m, v) = match (grads.get(i), state.m.get_mut(i), state.v.get_mut(i)) {
            (Some(g), Some(m), Some(v)) => (g, m, v),
            _ => return Err(Error::DimensionMismatch("more parameters than gradients or moments".into())),
        };
        if g.shape() != p.shape() || m.shape() != p.shape() || v.shape() != p.shape() {
            return Err(Error::DimensionMismatch(format!(
                "parameter {i} has shape {:?}, gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = b1 * *mi as f64 + (1.0 - b1) * gi;
            let v_new = b2 * *vi as f64 + (1.0 - b2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = cfg.learning_rate * (m_new / c1) / ((v_new / c2).sqrt() + cfg.adam_eps);
            *w = (*w as f64 - update) as f32;
        }
        count += 1;
    }
    if count != grads.len() || count != state.m.len() {
        return Err(Error::DimensionMismatch("fewer parameters than gradients or moments".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Pixel-weighted mean loss of the batches seen in this epoch, each
    /// taken before its update.
    pub train_loss: f64,
    /// Refined mean absolute depth error on the validation split; NaN
    /// without one.
    pub val_depth_error_m: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: RefineNetwork,
    /// Lowest validation depth error; the final network without validation.
    pub best: RefineNetwork,
    pub log: Vec<EpochLog>,
}

pub fn log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,train_loss,val_depth_error_m\n");
    for e in log {
        let val = if e.val_depth_error_m.is_nan() {
            "nan".to_string()
        } else {
            format!("{:.9e}", e.val_depth_error_m)
        };
        let _ = writeln!(out, "{},{:.9e},{val}", e.epoch, e.train_loss);
    }
    out
}

/// Train a fresh network (seeded by `cfg.seed`) on prepared samples.
/// `on_epoch` sees each log row as it is produced.
pub fn train_prepared(
    train: &[PreparedSample],
    val: &[PreparedSample],
    rig: &CameraRig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut net = build_unet(cfg.unet, cfg.head, cfg.seed)?;
    let mut state = AdamState::new(net.parameters().iter().map(|(_, t)| t));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5EED_0F_7EA1);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, RefineNetwork)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut weighted = 0.0;
        let mut pixels = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let flipped: Vec<Option<PreparedSample>> = chunk
                .iter()
                .map(|&i| rng.gen_bool(cfg.flip_probability).then(|| train[i].flipped()))
                .collect();
            let batch: Vec<&PreparedSample> = chunk
                .iter()
                .zip(&flipped)
                .map(|(&i, f)| f.as_ref().unwrap_or(&train[i]))
                .collect();

            let targets = LossTargets::new(&batch)?;
            let count = targets.mask().iter().filter(|&&m| m).count();
            let mut tape = Tape::new();
            let params = net.register(&mut tape)?;
            let x = tape.constant(stack_inputs(&batch)?)?;
            let f = net.forward(&mut tape, &params, x)?;
            let loss = training_loss(&mut tape, f, &targets, cfg.head)?;
            let loss_value = tape.value(loss).data()[0] as f64;
            if !loss_value.is_finite() {
                return Err(Error::Diverged(format!("non-finite loss in epoch {epoch}")));
            }
            let mut grads = tape.backward(loss)?;
            let grads: Vec<Tensor<f32>> = params.iter().map(|&p| grads.take(p)).collect();
            drop(tape);
            adam_step(net.parameters_mut(), &grads, &mut state, cfg)?;
            if let Some((name, _)) = net.parameters().iter().find(|(_, t)| !t.all_finite()) {
                return Err(Error::Diverged(format!("parameter {name} became non-finite in epoch {epoch}")));
            }
            weighted += loss_value * count as f64;
            pixels += count;
        }

        let val_err = if val.is_empty() {
            f64::NAN
        } else {
            let report = evaluate_prepared(val, rig, Some(&net), 1.0)?;
            report.variant("refined").map_or(f64::NAN, |v| v.depth_error_m)
        };
        let row = EpochLog {
            epoch,
            train_loss: if pixels > 0 { weighted / pixels as f64 } else { 0.0 },
            val_depth_error_m: val_err,
        };
        log::info!(
            "epoch {epoch}/{}: train_loss {:.6} val_depth_error_m {:.6}",
            cfg.epochs,
            row.train_loss,
            row.val_depth_error_m
        );
        on_epoch(&row);
        log.push(row);
        if !val_err.is_nan() && best.as_ref().map_or(true, |(b, _)| val_err < *b) {
            best = Some((val_err, net.clone()));
        }
    }
    let best = best.map_or_else(|| net.clone(), |(_, n)| n);
    Ok(TrainOutcome { network: net, best, log })
}

/// Number of trailing manifest samples held out for validation.
pub fn validation_count(samples: usize) -> usize {
    samples / 10
}

/// Load and prepare every sample of a dataset, computing missing baseline
/// disparities with default block matching limited to `d_max`.
pub fn load_prepared(root: &Path, d_max: f64, z_cap: f64) -> Result<(Manifest, Vec<PreparedSample>)> {
    let manifest = Manifest::read(root)?;
    let params = MatchParams {
        d_max: d_max.floor().max(1.0) as usize,
        ..MatchParams::default()
    };
    let samples = manifest
        .entries
        .par_iter()
        .map(|e| {
            let mut rec = read_sample(root, &manifest.rig, e)?;
            if rec.d_baseline.is_none() {
                log::debug!("computing baseline for {}", e.sample_dir().display());
                let d = compute_disparity(&rec.left, &rec.right, &params)?;
                rec.set_baseline(d)?;
            }
            PreparedSample::from_record(&rec, d_max, z_cap)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

/// Paths written by [`train`] next to the final checkpoint.
pub fn companion_paths(ckpt_out: &Path) -> (PathBuf, PathBuf) {
    let stem = ckpt_out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    (
        ckpt_out.with_file_name(format!("{stem}.best.drck")),
        ckpt_out.with_file_name(format!("{stem}.log.csv")),
    )
}

/// Train on the dataset at `root`, holding out the last tenth of the
/// manifest for validation. Writes the final checkpoint to `ckpt_out`, the
/// best one and the epoch log next to it.
pub fn train(root: &Path, cfg: &TrainConfig, ckpt_out: &Path) -> Result<TrainOutcome> {
    cfg.validate()?;
    let (manifest, samples) = load_prepared(root, cfg.d_max, cfg.z_cap)?;
    let n_val = validation_count(samples.len());
    let (train_set, val_set) = samples.split_at(samples.len() - n_val);
    if let Some(dir) = ckpt_out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    }
    let (best_path, log_path) = companion_paths(ckpt_out);
    let mut rows = Vec::new();
    let outcome = train_prepared(train_set, val_set, &manifest.rig, cfg, |row| {
        rows.push(*row);
        // keep the log current so long runs can be watched
        if let Err(e) = write_atomic(&log_path, log_csv(&rows).as_bytes()) {
            log::warn!("could not update {}: {e}", log_path.display());
        }
    })?;
    write_atomic(&log_path, log_csv(&outcome.log).as_bytes())?;
    save_checkpoint(&outcome.network, ckpt_out)?;
    save_checkpoint(&outcome.best, &best_path)?;
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_adam_step_moves_by_the_learning_rate() {
        let cfg = TrainConfig::default();
        let mut theta = vec![Tensor::scalar(0.0f32)];
        let mut state = AdamState::new(&theta);
        adam_step(theta.iter_mut(), &[Tensor::scalar(1.0)], &mut state, &cfg).unwrap();
        // m_hat = 1, v_hat = 1, so the step is lr / (1 + eps)
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((theta[0].data()[0] as f64 - expected).abs() < 1e-6);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn zero_gradient_leaves_parameters_and_decays_moments() {
        let cfg = TrainConfig::default();
        let mut theta = vec![Tensor::new(&[2], vec![0.5f32, -1.0]).unwrap()];
        let mut state = AdamState::new(&theta);
        state.m[0] = Tensor::new(&[2], vec![0.0, 0.0]).unwrap();
        adam_step(theta.iter_mut(), &[Tensor::zeros(&[2])], &mut state, &cfg).unwrap();
        assert_eq!(theta[0].data(), &[0.5, -1.0]);

        state.m[0] = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        state.v[0] = Tensor::new(&[2], vec![1.0, 1.0]).unwrap();
        let mut fresh = vec![Tensor::zeros(&[2])];
        let mut s2 = state.clone();
        adam_step(fresh.iter_mut(), &[Tensor::zeros(&[2])], &mut s2, &cfg).unwrap();
        assert_eq!(s2.m[0].data(), &[0.9, 0.9]);
        assert_eq!(s2.v[0].data(), &[0.999, 0.999]);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let cfg = TrainConfig::default();
        let mut theta = vec![Tensor::zeros(&[2])];
        let mut state = AdamState::new(&theta);
        assert!(adam_step(theta.iter_mut(), &[Tensor::zeros(&[3])], &mut state, &cfg).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { epochs: 0, ..Default::default() },
            TrainConfig { learning_rate: 0.0, ..Default::default() },
            TrainConfig { adam_beta1: 1.0, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn log_layout() {
        let csv = log_csv(&[EpochLog {
            epoch: 1,
            train_loss: 0.25,
            val_depth_error_m: f64::NAN,
        }]);
        assert_eq!(csv, "epoch,train_loss,val_depth_error_m\n1,2.500000000e-1,nan\n");
    }

    #[test]
    fn companion_files_share_the_stem() {
        let (b, l) = companion_paths(Path::new("out/net.drck"));
        assert_eq!(b, Path::new("out/net.best.drck"));
        assert_eq!(l, Path::new("out/net.log.csv"));
    }
}
