use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::env::{Observation, IMAGE_SIDE};
use crate::error::{Error, Result};

/// Raw grayscale bytes, serialized as base64 with explicit dimensions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    #[serde(serialize_with = "to_b64", deserialize_with = "from_b64")]
    pub data: Vec<u8>,
}

fn to_b64<S: Serializer>(bytes: &[u8], s: S) -> std::result::Result<S::Ok, S::Error> {
    s.serialize_str(&B64.encode(bytes))
}

fn from_b64<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<u8>, D::Error> {
    let text = String::deserialize(d)?;
    B64.decode(text.as_bytes()).map_err(serde::de::Error::custom)
}

impl Frame {
    pub fn from_observation(obs: &Observation) -> Self {
        Frame {
            width: IMAGE_SIDE,
            height: IMAGE_SIDE,
            data: obs.to_gray_bytes(),
        }
    }

    /// `round(255 p)` per pixel.
    pub fn from_probabilities(p: &[f64]) -> Self {
        Frame {
            width: IMAGE_SIDE,
            height: IMAGE_SIDE,
            data: p.iter().map(|&v| (255.0 * v.clamp(0.0, 1.0)).round() as u8).collect(),
        }
    }

    pub fn to_observation(&self) -> Result<Observation> {
        if self.width != IMAGE_SIDE || self.height != IMAGE_SIDE {
            return Err(Error::dim(
                "frame",
                &[IMAGE_SIDE, IMAGE_SIDE],
                &[self.height, self.width],
            ));
        }
        Observation::from_gray_bytes(&self.data)
    }
}
