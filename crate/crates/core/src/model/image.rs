use std::path::Path;

use rand::Rng;

use super::ModelError;
use crate::nn::{Conv2d, Graph, NnError, ParamStore, Tensor, Var};

pub const FEATURE_DIM: usize = 512;

/// Feature-file header: 8-byte magic, u32 version, u32 value count.
pub const FEATURE_MAGIC: &[u8; 8] = b"VAMIDIFT";
pub const FEATURE_VERSION: u32 = 1;

/// A 512-value image embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageFeature(Vec<f64>);

impl ImageFeature {
    pub fn new(values: Vec<f64>) -> Result<Self, ModelError> {
        if values.len() != FEATURE_DIM {
            return Err(ModelError::BadFeatureFile(format!("expected {FEATURE_DIM} values, got {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::BadFeatureFile("non-finite value".into()));
        }
        Ok(Self(values))
    }

    pub fn zeros() -> Self {
        Self(vec![0.0; FEATURE_DIM])
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }

    /// Header plus 512 little-endian `f32` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(16 + 4 * FEATURE_DIM);
        out.extend_from_slice(FEATURE_MAGIC);
        out.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
        out.extend_from_slice(&(FEATURE_DIM as u32).to_le_bytes());
        for &v in &self.0 {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let bad = |m: String| ModelError::BadFeatureFile(m);
        if bytes.len() < 16 || &bytes[..8] != FEATURE_MAGIC {
            return Err(bad("missing feature-file header".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FEATURE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let count = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = &bytes[16..];
        if count != FEATURE_DIM || body.len() != 4 * count {
            return Err(bad(format!(
                "expected {FEATURE_DIM} values, header says {count} and body holds {}",
                body.len() / 4
            )));
        }
        let values = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
        Self::new(values)
    }

    pub fn load(path: &Path) -> Result<Self, ModelError> {
        let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            ModelError::BadFeatureFile(m) => ModelError::BadFeatureFile(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))
    }
}

/// What the image branch consumes.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageInput {
    /// `[3, S, S]` RGB in `[0, 1]`, for the trainable extractor.
    Pixels(Tensor),
    Feature(ImageFeature),
}

/// Decodes an image file, resizes it to `size x size` (triangle filter) and
/// returns a `[3, size, size]` tensor scaled to `[0, 1]`.
pub fn load_pixels(path: &Path, size: usize) -> Result<Tensor, ModelError> {
    let img = image::open(path).map_err(|e| ModelError::BadImage(format!("{}: {e}", path.display())))?;
    Ok(pixels_from_image(&img, size))
}

pub fn pixels_from_image(img: &image::DynamicImage, size: usize) -> Tensor {
    let rgb = img.resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle).to_rgb8();
    let mut data = vec![0.0; 3 * size * size];
    for (x, y, px) in rgb.enumerate_pixels() {
        for c in 0..3 {
            data[c * size * size + y as usize * size + x as usize] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, size, size], data).expect("pixel tensor shape")
}

/// Loads either a precomputed feature file (by magic) or an image file.
pub fn load_image_input(path: &Path, size: usize) -> Result<ImageInput, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Io(format!("{}: {e}", path.display())))?;
    if bytes.starts_with(FEATURE_MAGIC) {
        return ImageFeature::load(path).map(ImageInput::Feature);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| ModelError::BadImage(format!("{}: {e}", path.display())))?;
    Ok(ImageInput::Pixels(pixels_from_image(&img, size)))
}

/// Three conv blocks, then global spatial pooling down to 512 channels.
#[derive(Debug, Clone)]
pub struct TinyCnn {
    pub convs: [Conv2d; 3],
}

impl TinyCnn {
    pub const CHANNELS: [usize; 4] = [3, 16, 32, FEATURE_DIM];

    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, rng: &mut R) -> Result<Self, NnError> {
        let c = Self::CHANNELS;
        Ok(Self {
            convs: [
                Conv2d::new(store, &format!("{name}.conv1"), c[0], c[1], rng)?,
                Conv2d::new(store, &format!("{name}.conv2"), c[1], c[2], rng)?,
                Conv2d::new(store, &format!("{name}.conv3"), c[2], c[3], rng)?,
            ],
        })
    }

    /// `[3, S, S] -> 1 x 512`. The first two blocks halve the resolution.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var, NnError> {
        let mut h = x;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, store, h)?;
            h = g.relu(h);
            if i < 2 {
                h = g.max_pool2(h)?;
            }
        }
        g.global_avg_pool(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_file_round_trip_and_length_contract() {
        let f = ImageFeature::new((0..512).map(|i| i as f64 * 0.25).collect()).unwrap();
        assert_eq!(ImageFeature::from_bytes(&f.to_bytes()).unwrap(), f);
        assert_eq!(ImageFeature::from_bytes(&ImageFeature::zeros().to_bytes()).unwrap(), ImageFeature::zeros());
        let mut short = ImageFeature::zeros().to_bytes();
        short[12..16].copy_from_slice(&511u32.to_le_bytes());
        short.truncate(16 + 4 * 511);
        assert!(matches!(ImageFeature::from_bytes(&short), Err(ModelError::BadFeatureFile(_))));
        assert!(matches!(ImageFeature::new(vec![0.0; 511]), Err(ModelError::BadFeatureFile(_))));
    }
}
