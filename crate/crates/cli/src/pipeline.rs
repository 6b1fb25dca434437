//! Per-face de-identification: align, crop, swap identity, unwarp, mask,
//! feather and splice.

use deid_core::facegeom::{aligned_crop, unwarp_face, AffineTransform, LandmarkSet};
use deid_core::fatm::FatmModel;
use deid_core::image::Image;
use deid_core::maskblend::{build_mask, feather_sigma, feather_with_sigma, splice, FaceMask};
use deid_core::{Error, Result};

/// Everything produced for one face.
#[derive(Clone, Debug)]
pub struct FaceOutput {
    pub image: Image,
    /// Image to canonical frame.
    pub transform: AffineTransform,
    /// Pixels inside the binary hull mask.
    pub mask_area: f64,
    pub sigma: f64,
    pub mask: FaceMask,
    /// The decoded 64x64 donor face.
    pub synthesized: Image,
}

/// Inference-only view of a trained model with one chosen donor.
pub struct Deidentifier<'m> {
    model: &'m FatmModel<f32>,
    donor: String,
    feather_scale: f64,
}

impl<'m> Deidentifier<'m> {
    pub fn new(model: &'m FatmModel<f32>, donor: &str, feather_scale: f64) -> Result<Self> {
        if !model.has_donor(donor) {
            return Err(Error::MissingDonor(donor.to_string()));
        }
        if !(feather_scale.is_finite() && feather_scale > 0.0) {
            return Err(Error::InvalidConfig(format!("feather scale {feather_scale} must be positive")));
        }
        Ok(Deidentifier {
            model,
            donor: donor.to_string(),
            feather_scale,
        })
    }

    pub fn donor(&self) -> &str {
        &self.donor
    }

    /// The donor's rendition of an aligned 64x64 crop.
    pub fn swap_crop(&self, crop: &Image) -> Result<Image> {
        let out = self.model.transfer(&crop.to_tensor::<f32>(), &self.donor)?;
        let mut img = Image::from_tensor(&out)?;
        img.clamp01();
        Ok(img)
    }

    pub fn run(&self, img: &Image, lm: &LandmarkSet) -> Result<FaceOutput> {
        let (w, h) = img.dims();
        let (crop, transform) = aligned_crop(img, lm)?;
        let synthesized = self.swap_crop(&crop)?;
        let back = unwarp_face(&synthesized, &transform, w, h)?;
        let hull = build_mask(lm, w, h)?;
        let mask_area = hull.mass();
        let sigma = feather_sigma(lm.face_width()) * self.feather_scale;
        let feathered = feather_with_sigma(&hull, sigma);
        let alpha = feathered.alpha().iter().zip(&back.valid).map(|(&a, &v)| if v { a } else { 0.0 }).collect();
        let mask = FaceMask::new(w, h, alpha)?;
        let image = splice(img, &back.image, &mask)?;
        Ok(FaceOutput {
            image,
            transform,
            mask_area,
            sigma,
            mask,
            synthesized,
        })
    }
}
