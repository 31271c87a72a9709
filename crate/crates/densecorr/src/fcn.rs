//! Fully-convolutional path: the same head (and the same transfer-synthesized
//! surface classifier) applied densely over the whole unified map, no region
//! cropping. Restricted to single-instance square scenes; the classifier
//! machinery is shared with the region path rather than duplicated.

use dctensor::Tensor;

use crate::backbone::RegionBox;
use crate::error::{Error, Result};
use crate::head::{forward_head, HeadOutput, RegionTruth};
use crate::metrics::PredMap;
use crate::model::{region_prediction, region_truth_in_box, Model, MAP_STRIDE};
use crate::synth::{Instance, SceneAnnotation};

/// A box covering the whole image.
pub fn full_box(width: usize, height: usize) -> RegionBox {
    RegionBox::new(0.0, 0.0, width as f64, height as f64, 0).expect("nonempty image")
}

/// The scene's single instance; multi-instance input is rejected.
pub fn single_instance(scene: &SceneAnnotation) -> Result<&Instance> {
    match scene.instances.as_slice() {
        [inst] => Ok(inst),
        many => Err(Error::invalid(
            "fcn",
            format!("fully-convolutional path needs single-instance scenes, got {}", many.len()),
        )),
    }
}

fn map_extent(width: usize, height: usize) -> Result<usize> {
    if width != height {
        return Err(Error::invalid("fcn", format!("image must be square, got {width}x{height}")));
    }
    Ok(width / MAP_STRIDE)
}

/// Head over the whole unified map: six outputs at 1/4 image resolution.
pub fn forward_fcn(model: &Model, image: &Tensor, w_s: &Tensor) -> Result<HeadOutput> {
    let dec = model.forward_image(image)?;
    forward_head(&dec.unified, &model.head, w_s)
}

/// Ground truth on the map grid (the whole image is the "region").
pub fn fcn_truth(inst: &Instance, width: usize, height: usize) -> Result<RegionTruth> {
    let r = map_extent(width, height)?;
    Ok(region_truth_in_box(inst, &full_box(width, height), width, height, r))
}

/// Image-space correspondence map from a whole-map head output.
pub fn fcn_prediction(out: &HeadOutput, width: usize, height: usize) -> Result<PredMap> {
    map_extent(width, height)?;
    region_prediction(out, &full_box(width, height), width, height)
}
