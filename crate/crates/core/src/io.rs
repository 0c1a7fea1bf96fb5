//! Images, model containers and manifests on disk.
//!
//! # Model container (`.bgnet`)
//!
//! | bytes | content |
//! |---|---|
//! | 4 | magic `BGNT` |
//! | 4 | header length `n`, little-endian `u32` |
//! | n | UTF-8 JSON header: `version`, `config`, `tensors` (name, shape, byte offset) |
//! | ... | payload: little-endian `f32` tensors |
//! | 4 | CRC32 of the payload, little-endian |

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, Rgb};
use serde::{Deserialize, Serialize};

use crate::coeffnet::{ModelParams, NetConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::trainer::SamplePair;

pub const MAGIC: &[u8; 4] = b"BGNT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f32 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn image_err(path: &Path, message: impl ToString) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: message.to_string(),
    }
}

/// Reads a PNG (8 or 16 bit) or binary PPM as `[H, W, 3]` in `[0, 1]`.
/// Stored values map linearly; alpha is dropped.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let img = image::ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| image_err(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = match img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgba8(_) | DynamicImage::ImageLuma8(_) | DynamicImage::ImageLumaA8(_) => {
            img.to_rgb8().into_raw().into_iter().map(|v| v as f32 / 255.0).collect()
        }
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_) | DynamicImage::ImageLuma16(_) | DynamicImage::ImageLumaA16(_) => {
            img.to_rgb16().into_raw().into_iter().map(|v| v as f32 / 65535.0).collect()
        }
        other => return Err(image_err(path, format!("unsupported pixel format {:?}", other.color()))),
    };
    Tensor::from_vec(&[h, w, 3], data)
}

/// Clamps to `[0, 1]` and rounds to the nearest level of `depth`.
pub fn quantize(img: &Tensor<f32>, depth: BitDepth) -> Tensor<f32> {
    let m = depth.max();
    img.map(|v| (v.clamp(0.0, 1.0) * m).round() / m)
}

/// Writes an 8-bit image; the format follows the extension (`png`, `ppm`).
pub fn save_image(path: &Path, img: &Tensor<f32>) -> Result<()> {
    save_image_depth(path, img, BitDepth::Eight)
}

pub fn save_image_depth(path: &Path, img: &Tensor<f32>, depth: BitDepth) -> Result<()> {
    let (h, w) = match *img.shape() {
        [h, w, 3] => (h as u32, w as u32),
        _ => return Err(image_err(path, format!("expected [H, W, 3], got {:?}", img.shape()))),
    };
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if !matches!(ext.as_str(), "png" | "ppm" | "pnm") {
        return Err(image_err(path, format!("unsupported extension {ext:?} (png or ppm)")));
    }
    let m = depth.max();
    let q = img.data().iter().map(|v| (v.clamp(0.0, 1.0) * m).round());
    let result = match depth {
        BitDepth::Eight => ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, q.map(|v| v as u8).collect::<Vec<u8>>()).unwrap().save(path),
        BitDepth::Sixteen => ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, q.map(|v| v as u16).collect::<Vec<u16>>()).unwrap().save(path),
    };
    result.map_err(|e| image_err(path, e))
}

/// Writes a single-channel `[H, W]` or `[H, W, 1]` map as 8-bit grayscale
/// PNG after mapping `[lo, hi]` onto `[0, 1]`.
pub fn save_gray(path: &Path, plane: &[f32], h: usize, w: usize, lo: f32, hi: f32) -> Result<()> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    let data = plane.iter().map(|v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    ImageBuffer::<image::Luma<u8>, Vec<u8>>::from_raw(w as u32, h as u32, data)
        .ok_or_else(|| image_err(path, "plane size mismatch"))?
        .save(path)
        .map_err(|e| image_err(path, e))
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    config: NetConfig,
    #[serde(default)]
    bn_updates: u64,
    tensors: Vec<TensorEntry>,
}

/// Serializes a model to the `.bgnet` byte layout.
pub fn model_to_bytes(model: &ModelParams<f32>) -> Vec<u8> {
    let mut payload = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in model.named_tensors() {
        tensors.push(TensorEntry {
            name,
            shape: t.shape().to_vec(),
            offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = serde_json::to_vec(&Header {
        version: FORMAT_VERSION,
        config: model.config.clone(),
        bn_updates: model.bn_updates,
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(12 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out
}

/// Parses `.bgnet` bytes. With `expected`, tensor shapes are checked
/// against that configuration instead of the stored one.
pub fn model_from_bytes(bytes: &[u8], expected: Option<&NetConfig>) -> Result<ModelParams<f32>> {
    let bad = |m: String| Error::Model(m);
    if bytes.len() < 12 || &bytes[..4] != MAGIC {
        return Err(bad("not a .bgnet file (bad magic)".into()));
    }
    let hlen = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + hlen + 4 {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..8 + hlen]).map_err(|e| bad(format!("header: {e}")))?;
    if header.version != FORMAT_VERSION {
        return Err(bad(format!("unknown format version {}", header.version)));
    }
    let payload = &bytes[8 + hlen..bytes.len() - 4];
    let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let config = expected.cloned().unwrap_or(header.config);
    let mut model = ModelParams::<f32>::init(&config, 0)?;
    model.bn_updates = header.bn_updates;
    let mut seen = std::collections::HashSet::new();
    for e in &header.tensors {
        if !seen.insert(e.name.as_str()) {
            return Err(bad(format!("tensor {} stored twice", e.name)));
        }
        let t = model.tensor_mut(&e.name).ok_or_else(|| bad(format!("unexpected tensor {}", e.name)))?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Shape(format!("tensor {}: stored {:?}, expected {:?}", e.name, e.shape, t.shape())));
        }
        let n = t.len() * 4;
        let raw = payload
            .get(e.offset..e.offset + n)
            .ok_or_else(|| bad(format!("tensor {} runs past the payload", e.name)))?;
        for (v, b) in t.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
            *v = f32::from_le_bytes(b.try_into().unwrap());
        }
    }
    if let Some((name, _)) = model.named_tensors().into_iter().find(|(n, _)| !seen.contains(n.as_str())) {
        return Err(bad(format!("tensor {name} missing")));
    }
    Ok(model)
}

pub fn save_model(path: &Path, model: &ModelParams<f32>) -> Result<()> {
    fs::write(path, model_to_bytes(model)).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<ModelParams<f32>> {
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, None)
}

/// Loads and checks every tensor against `expected`.
pub fn load_model_expecting(path: &Path, expected: &NetConfig) -> Result<ModelParams<f32>> {
    model_from_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?, Some(expected))
}

/// Reads `input<TAB>target` lines; relative paths resolve against the
/// manifest's directory. Blank lines and `#` comments are skipped.
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|(i, l)| {
            let (a, b) = l
                .split_once('\t')
                .ok_or_else(|| Error::Config(format!("{}:{}: expected input<TAB>target", path.display(), i + 1)))?;
            Ok((base.join(a.trim()), base.join(b.trim())))
        })
        .collect()
}

pub fn write_manifest(path: &Path, entries: &[(PathBuf, PathBuf)]) -> Result<()> {
    let text: String = entries.iter().map(|(a, b)| format!("{}\t{}\n", a.display(), b.display())).collect();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads every pair listed in a manifest, named by input file name.
pub fn load_pairs(manifest: &Path) -> Result<Vec<SamplePair>> {
    read_manifest(manifest)?
        .into_iter()
        .map(|(a, b)| {
            let name = a.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
            SamplePair::new(name, load_image(&a)?, load_image(&b)?)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eight_bit_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = Tensor::from_fn(&[5, 7, 3], |i| ((i * 31) % 256) as f32 / 255.0);
        for ext in ["png", "ppm"] {
            let p = dir.path().join(format!("a.{ext}"));
            save_image(&p, &img).unwrap();
            assert_eq!(load_image(&p).unwrap(), img, "{ext}");
        }
    }

    #[test]
    fn sixteen_bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.png");
        let img = Tensor::full(&[2, 3, 3], 32768.0f32 / 65535.0);
        save_image_depth(&p, &img, BitDepth::Sixteen).unwrap();
        let back = load_image(&p).unwrap();
        assert!(back.data().iter().all(|&v| v == 32768.0 / 65535.0));
    }

    #[test]
    fn truncated_png_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.png");
        save_image(&p, &Tensor::full(&[16, 16, 3], 0.5)).unwrap();
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(load_image(&p).is_err());
    }

    #[test]
    fn save_clamps() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.png");
        save_image(&p, &Tensor::from_vec(&[1, 2, 3], vec![-0.5, 1.5, 0.5, 2.0, -1.0, 0.0]).unwrap()).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.data(), &[0.0, 1.0, 128.0 / 255.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn model_round_trip_and_corruption() {
        let model = ModelParams::<f32>::init(&NetConfig::tiny(4), 5).unwrap();
        let bytes = model_to_bytes(&model);
        let back = model_from_bytes(&bytes, None).unwrap();
        assert_eq!(back, model);
        let mut bad = bytes.clone();
        let i = bytes.len() - 40;
        bad[i] ^= 0x01;
        assert!(matches!(model_from_bytes(&bad, None), Err(Error::Checksum { .. })));
    }

    #[test]
    fn depth_mismatch_names_the_tensor() {
        let model = ModelParams::<f32>::init(&NetConfig::tiny(4), 5).unwrap();
        let err = model_from_bytes(&model_to_bytes(&model), Some(&NetConfig::tiny(8))).unwrap_err();
        assert!(err.to_string().contains("pred.weight"), "{err}");
    }

    #[test]
    fn manifest_resolves_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("m.tsv");
        fs::write(&m, "# pairs\na.png\tb.png\n\n").unwrap();
        let e = read_manifest(&m).unwrap();
        assert_eq!(e, vec![(dir.path().join("a.png"), dir.path().join("b.png"))]);
        fs::write(&m, "a.png b.png\n").unwrap();
        assert!(read_manifest(&m).is_err());
    }
}
