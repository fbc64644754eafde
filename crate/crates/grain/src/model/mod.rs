//! The learned one-step dynamics model: a patch-attention regressor over
//! the channel-concatenated (depth, depth change, action image) stack that
//! predicts the post-excavation obstacle position, trained to minimize the
//! Euclidean error in normalized trackway coordinates. A variant feeds the
//! action to the regression head as a plain 2D vector instead of an aligned
//! image channel.

mod io;
pub mod tensor;
pub mod train;
mod vit;

pub use io::{read_model, write_model};
pub use train::{train, TrainConfig, TrainReport};
pub use vit::{backward, forward, ForwardCache, ModelParams, ParamGroup, VitConfig};

use crate::error::{Error, Result};
use crate::geom::Vec2;
use crate::imaging::{self, ActionImage, DeltaImage, DepthImage};
use crate::sim::{ExcavationAction, Obstacle};

/// Per-channel standardization constants, computed once from the training
/// split and frozen into the model file.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardization {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardization {
    pub fn identity(channels: usize) -> Self {
        Standardization {
            mean: vec![0.0; channels],
            scale: vec![1.0; channels],
        }
    }
}

/// Predicted post-excavation obstacle position (cm), clamped to the
/// trackway at inference time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub pos: Vec2,
}

/// A trained model bundled with everything inference needs.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub params: ModelParams,
    pub stdz: Standardization,
}

impl TrainedModel {
    pub fn cell_size(&self) -> f64 {
        self.params.cfg.extent.x / self.params.cfg.cols as f64
    }

    pub fn is_ablation(&self) -> bool {
        self.params.cfg.extra_head_inputs == 2
    }

    /// One forward pass on raw images. The standard variant takes the
    /// action as an aligned image channel; the ablation variant takes it as
    /// a normalized 2D vector into the head.
    pub fn predict(
        &self,
        x: &DepthImage,
        dx: &DeltaImage,
        action: &ExcavationAction,
    ) -> Result<Prediction> {
        let cfg = &self.params.cfg;
        let cache = if self.is_ablation() {
            let input = stack_channels(cfg, &self.stdz, x, dx, None)?;
            let extra = [
                action.center.x / cfg.extent.x,
                action.center.y / cfg.extent.y,
            ];
            forward(&self.params, &input, Some(extra))?
        } else {
            let img = imaging::action_image(action, cfg.rows, cfg.cols, self.cell_size())?;
            let input = stack_channels(cfg, &self.stdz, x, dx, Some(&img))?;
            forward(&self.params, &input, None)?
        };
        Ok(prediction_from_output(cfg, cache.out))
    }

    /// Per-obstacle predictions for one action: each obstacle is selected in
    /// turn, the others are masked out of both images, and the model runs on
    /// the masked pair. Output order matches the input order.
    pub fn predict_multi(
        &self,
        x: &DepthImage,
        dx: &DeltaImage,
        action: &ExcavationAction,
        obstacles: &[Obstacle],
        prev_positions: Option<&[Vec2]>,
    ) -> Result<Vec<Prediction>> {
        if obstacles.is_empty() {
            return Err(Error::Config("predict_multi needs at least one obstacle".into()));
        }
        let cell = self.cell_size();
        obstacles
            .iter()
            .map(|ob| {
                let masked_x = imaging::mask_depth(x, obstacles, ob.id, cell)?;
                let masked_dx = imaging::mask_delta(dx, obstacles, ob.id, prev_positions, cell)?;
                self.predict(&masked_x, &masked_dx, action)
            })
            .collect()
    }
}

/// Map sigmoid outputs in [0,1]^2 to trackway coordinates.
pub fn prediction_from_output(cfg: &VitConfig, out: [f64; 2]) -> Prediction {
    Prediction {
        pos: Vec2::new(out[0] * cfg.extent.x, out[1] * cfg.extent.y),
    }
}

/// Normalize a trackway position into [0,1]^2.
pub fn normalize_target(cfg: &VitConfig, pos: Vec2) -> [f64; 2] {
    [pos.x / cfg.extent.x, pos.y / cfg.extent.y]
}

/// Euclidean training loss in normalized coordinates.
pub fn loss(pred_norm: [f64; 2], truth_norm: [f64; 2]) -> f64 {
    let dx = pred_norm[0] - truth_norm[0];
    let dy = pred_norm[1] - truth_norm[1];
    dx.hypot(dy)
}

/// dL/d(pred_norm) for the Euclidean loss; zero at the (non-differentiable)
/// minimum.
pub fn loss_gradient(pred_norm: [f64; 2], truth_norm: [f64; 2]) -> [f64; 2] {
    let dx = pred_norm[0] - truth_norm[0];
    let dy = pred_norm[1] - truth_norm[1];
    let norm = dx.hypot(dy);
    if norm < 1e-15 {
        [0.0, 0.0]
    } else {
        [dx / norm, dy / norm]
    }
}

/// Build the standardized channel stack `[channels, rows, cols]` from the
/// raw images. The action channel is first rescaled from {0, 255} to
/// {0, 1}, then standardized like the rest.
pub fn stack_channels(
    cfg: &VitConfig,
    stdz: &Standardization,
    x: &DepthImage,
    dx: &DeltaImage,
    action: Option<&ActionImage>,
) -> Result<Vec<f64>> {
    let plane = cfg.rows * cfg.cols;
    let expect_channels = if action.is_some() { 3 } else { 2 };
    if cfg.channels != expect_channels {
        return Err(Error::ShapeMismatch(format!(
            "model expects {} channels, got {expect_channels}",
            cfg.channels
        )));
    }
    if x.pixels.rows() != cfg.rows || x.pixels.cols() != cfg.cols || !x.pixels.same_shape(&dx.pixels)
    {
        return Err(Error::ShapeMismatch("image dims do not match the model".into()));
    }
    if stdz.mean.len() != cfg.channels || stdz.scale.len() != cfg.channels {
        return Err(Error::ShapeMismatch(
            "standardization constants do not match the channel count".into(),
        ));
    }
    let mut out = vec![0.0; cfg.channels * plane];
    for (i, &v) in x.pixels.as_slice().iter().enumerate() {
        out[i] = (v - stdz.mean[0]) / stdz.scale[0];
    }
    for (i, &v) in dx.pixels.as_slice().iter().enumerate() {
        out[plane + i] = (v - stdz.mean[1]) / stdz.scale[1];
    }
    if let Some(a) = action {
        if a.pixels.rows() != cfg.rows || a.pixels.cols() != cfg.cols {
            return Err(Error::ShapeMismatch("action image dims do not match".into()));
        }
        for (i, &v) in a.pixels.as_slice().iter().enumerate() {
            out[2 * plane + i] = (v as f64 / 255.0 - stdz.mean[2]) / stdz.scale[2];
        }
    }
    Ok(out)
}

/// One training example: a standardized channel stack, the optional action
/// vector for the head-input variant, and the normalized target position.
#[derive(Debug, Clone)]
pub struct Example {
    pub input: Vec<f64>,
    pub extra: Option<[f64; 2]>,
    pub target_norm: [f64; 2],
}

/// Mean loss over a batch and its gradient with respect to every parameter
/// (same flat layout as `ModelParams::data`).
pub fn batch_gradients(params: &ModelParams, batch: &[Example]) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut total_loss = 0.0;
    let mut grads = vec![0.0; params.len()];
    let inv = 1.0 / batch.len() as f64;
    for ex in batch {
        let cache = forward(params, &ex.input, ex.extra)?;
        total_loss += loss(cache.out, ex.target_norm);
        let mut d_out = loss_gradient(cache.out, ex.target_norm);
        d_out[0] *= inv;
        d_out[1] *= inv;
        let g = backward(params, &cache, d_out);
        for (acc, gi) in grads.iter_mut().zip(&g) {
            *acc += gi;
        }
    }
    Ok((total_loss * inv, grads))
}
