//! End-to-end training entry point shared by the CLI and the test suites.

use crate::controller::ControllerConfig;
use crate::data::{fit_normalization, make_pairs, Demonstration};
use crate::diffusion::{train, Architecture, Checkpoint, EpochRecord, NoiseSchedule, TrainConfig, TrainLog};
use crate::error::Error;
use crate::keypoints::KeypointConfig;

/// Number of diffusion steps used by every trained policy.
pub const N_DIFF: usize = 45;

/// Fits normalization, extracts pairs and trains a policy for `controller`.
pub fn train_checkpoint(
    demos: &[Demonstration],
    controller: &ControllerConfig,
    keypoints: &KeypointConfig,
    train_cfg: &TrainConfig,
    progress: impl FnMut(&EpochRecord) -> bool,
) -> Result<(Checkpoint, TrainLog), Error> {
    if demos.is_empty() {
        return Err(Error::EmptyDataset);
    }
    controller.validate()?;
    keypoints.validate()?;
    for d in demos {
        d.validate()?;
    }
    let norm = fit_normalization(demos, keypoints)?;
    let pairs = make_pairs(demos, controller, keypoints, &norm);
    let arch = Architecture::standard(controller.h_p, controller.cond_dim(), N_DIFF);
    let sched = NoiseSchedule::cosine(N_DIFF)?;
    let (model, log) = train(&pairs, &arch, &sched, train_cfg, progress)?;
    let ck = Checkpoint::new(model, norm, *controller, *keypoints, Some(train_cfg.clone()), Some(&log));
    Ok((ck, log))
}
