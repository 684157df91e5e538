//! Miniature video diffusion transformer, its latent codec, text stub and
//! LoRA adapters, plus the two ways of turning the global composite into a
//! conditioning latent.

pub mod codec;
pub mod dit;
pub mod lora;
pub mod text;

use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

pub use codec::{codec_decode, codec_encode, CodecConfig, LatentVideo};
pub use dit::{Dit, DitConfig, InjectionHook};
pub use lora::{lora_apply, lora_merge, LoraAdapter, LoraLinear};
pub use text::TextConditionStub;

use crate::error::{Error, Result};
use crate::identity_embedding::{build_global_composite, place_in_cells, FaceCrop, PAD_VALUE};

/// Where the composite enters the codec relative to concatenation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GlobalConcatMode {
    /// Compose in pixel space, then encode once.
    Before,
    /// Encode each crop, then compose in latent space.
    After,
}

impl std::str::FromStr for GlobalConcatMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "before" => Ok(Self::Before),
            "after" => Ok(Self::After),
            other => Err(Error::ModeInvalid(other.to_string())),
        }
    }
}

fn replicate_frames(image: &Array3<f32>, frames: usize) -> Array4<f32> {
    let (c, h, w) = image.dim();
    Array4::from_shape_fn((c, frames, h, w), |(ci, _, y, x)| image[[ci, y, x]])
}

/// Pads `(C, H, W)` with `pad` on the bottom/right up to multiples of `(mh, mw)`.
fn pad_to_multiple(image: &Array3<f32>, mh: usize, mw: usize, pad: f32) -> Array3<f32> {
    let (c, h, w) = image.dim();
    let (ph, pw) = (h.div_ceil(mh) * mh, w.div_ceil(mw) * mw);
    let mut out = Array3::from_elem((c, ph, pw), pad);
    out.slice_mut(ndarray::s![.., ..h, ..w]).assign(image);
    out
}

/// Unnormalized `(C', T', h, w)` conditioning latent for a clip of `frames`
/// pixel frames at `(height, width)`.
pub fn global_latent(
    crops: &[FaceCrop],
    height: usize,
    width: usize,
    frames: usize,
    codec: CodecConfig,
    mode: GlobalConcatMode,
) -> Result<Array4<f32>> {
    let [_, lt, lh, lw] = codec.latent_shape(3, frames, height, width)?;
    match mode {
        GlobalConcatMode::Before => {
            let composite = build_global_composite(crops, (height, width))?;
            Ok(codec_encode(&replicate_frames(&composite.image, frames), codec)?.values)
        }
        GlobalConcatMode::After => {
            let (_, fh, fw) = codec.factors();
            let mut ordered: Vec<&FaceCrop> = crops.iter().collect();
            ordered.sort_by_key(|c| c.identity_index);
            let latents = ordered
                .iter()
                .map(|c| codec::encode_image(&pad_to_multiple(&c.pixels, fh, fw, PAD_VALUE), codec))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<&Array3<f32>> = latents.iter().collect();
            // The codec maps a white image to an all-PAD_VALUE latent.
            let (image, _) = place_in_cells(&refs, (lh, lw), PAD_VALUE)?;
            Ok(replicate_frames(&image, lt))
        }
    }
}
