//! Dataset handling: manifest parsing, PPM / raw tensor image loading with
//! normalization, and a deterministic synthetic multi-scene generator.
//!
//! Manifest lines are `relative_image_path scene_name tx ty tz qw qx qy qz`
//! (whitespace separated, `#` comments and blank lines skipped). An
//! optional `#stats mr mg mb sr sg sb` pragma carries per-channel
//! normalization statistics.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::pose::{Pose, PoseError, Quaternion};
use crate::rng::{streams, RngState};
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}:{line}: {msg}")]
    Parse { path: String, line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("manifest references missing image {0}")]
    MissingImage(String),
    #[error("{path}: unsupported image format (binary PPM `P6` or `MSTR` raw expected)")]
    UnsupportedFormat { path: String },
    #[error("{path}: {what}")]
    Malformed { path: String, what: String },
    #[error(transparent)]
    Pose(#[from] PoseError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

/// Per-channel normalization statistics.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Default for ChannelStats {
    fn default() -> Self {
        ChannelStats { mean: [0.0; 3], std: [1.0; 3] }
    }
}

/// Where a sample's pixels come from.
#[derive(Debug, Clone)]
pub enum ImageSource {
    File(PathBuf),
    /// Raw `[h, w, 3]` pixels, not yet standardized.
    Memory(Tensor<f32>),
}

#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: ImageSource,
    pub scene_id: usize,
    pub pose: Pose,
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub root: PathBuf,
    /// Scene names in first-appearance order; position = scene index.
    pub scene_names: Vec<String>,
    pub samples: Vec<SceneSample>,
    pub stats: ChannelStats,
}

impl DatasetManifest {
    pub fn n_scenes(&self) -> usize {
        self.scene_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Parse a manifest and eagerly validate that every referenced image file
/// exists. Quaternions are normalized (with a warning beyond 1e-2 deviation)
/// and sign-canonicalized.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest, DataError> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    let display = path.display().to_string();
    let mut scene_names: Vec<String> = Vec::new();
    let mut samples = Vec::new();
    let mut stats = ChannelStats::default();

    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(pragma) = line.strip_prefix("#stats") {
            let vals: Vec<f64> = pragma
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|e| DataError::Parse {
                    path: display.clone(),
                    line: line_no,
                    msg: format!("bad #stats pragma: {e}"),
                })?;
            if vals.len() != 6 {
                return Err(DataError::Parse {
                    path: display,
                    line: line_no,
                    msg: format!("#stats needs 6 values, got {}", vals.len()),
                });
            }
            stats = ChannelStats {
                mean: [vals[0], vals[1], vals[2]],
                std: [vals[3], vals[4], vals[5]],
            };
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 9 {
            return Err(DataError::Parse {
                path: display,
                line: line_no,
                msg: format!("expected 9 fields, got {}", fields.len()),
            });
        }
        let mut nums = [0.0f64; 7];
        for (k, f) in fields[2..].iter().enumerate() {
            nums[k] = f.parse().map_err(|e| DataError::Parse {
                path: display.clone(),
                line: line_no,
                msg: format!("field {}: {e}", k + 3),
            })?;
        }
        let scene_name = fields[1];
        let scene_id = match scene_names.iter().position(|n| n == scene_name) {
            Some(id) => id,
            None => {
                scene_names.push(scene_name.to_string());
                scene_names.len() - 1
            }
        };
        let q = Quaternion::new(nums[3], nums[4], nums[5], nums[6]);
        if (q.norm() - 1.0).abs() > 1e-2 {
            log::warn!(
                "{display}:{line_no}: quaternion norm {:.4} deviates from 1; normalizing",
                q.norm()
            );
        }
        let pose = Pose::new([nums[0], nums[1], nums[2]], q).map_err(|e| DataError::Parse {
            path: display.clone(),
            line: line_no,
            msg: e.to_string(),
        })?;
        let image_path = root.join(fields[0]);
        if !image_path.is_file() {
            return Err(DataError::MissingImage(image_path.display().to_string()));
        }
        samples.push(SceneSample { image: ImageSource::File(image_path), scene_id, pose });
    }
    Ok(DatasetManifest { root, scene_names, samples, stats })
}

/// Serialize a file-backed manifest in the canonical text form.
pub fn manifest_text(manifest: &DatasetManifest) -> Result<String, DataError> {
    let mut out = String::new();
    if manifest.stats != ChannelStats::default() {
        let m = manifest.stats.mean;
        let s = manifest.stats.std;
        let _ = writeln!(out, "#stats {} {} {} {} {} {}", m[0], m[1], m[2], s[0], s[1], s[2]);
    }
    for sample in &manifest.samples {
        let rel = match &sample.image {
            ImageSource::File(p) => p
                .strip_prefix(&manifest.root)
                .unwrap_or(p)
                .to_string_lossy()
                .replace('\\', "/"),
            ImageSource::Memory(_) => {
                return Err(DataError::Malformed {
                    path: manifest.root.display().to_string(),
                    what: "cannot serialize an in-memory image reference".into(),
                })
            }
        };
        let p = sample.pose.position;
        let q = sample.pose.orientation;
        let _ = writeln!(
            out,
            "{rel} {} {} {} {} {} {} {} {}",
            manifest.scene_names[sample.scene_id], p[0], p[1], p[2], q.w, q.x, q.y, q.z
        );
    }
    Ok(out)
}

// ── image decoding ──────────────────────────────────────────────────

const RAW_MAGIC: &[u8; 4] = b"MSTR";

/// Decode a supported image file to raw `[h, w, 3]` pixels in [0,1] for
/// PPM or verbatim floats for raw tensors.
pub fn decode_image(path: &Path) -> Result<Tensor<f32>, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.starts_with(b"P6") {
        decode_ppm(&bytes, path)
    } else if bytes.starts_with(RAW_MAGIC) {
        decode_raw(&bytes, path)
    } else {
        Err(DataError::UnsupportedFormat { path: path.display().to_string() })
    }
}

fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let malformed = |what: &str| DataError::Malformed {
        path: path.display().to_string(),
        what: what.to_string(),
    };
    // header: P6, whitespace-separated width height maxval, single
    // whitespace byte, then binary RGB triplets. `#` comments allowed.
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(malformed("truncated PPM header"));
        }
        let v: usize = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| malformed("bad PPM header field"))?;
        fields.push(v);
    }
    pos += 1; // single whitespace after maxval
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(malformed("only 8-bit PPM (maxval 255) is supported"));
    }
    let need = w * h * 3;
    if bytes.len() < pos + need {
        return Err(malformed("truncated PPM pixel data"));
    }
    let data: Vec<f32> =
        bytes[pos..pos + need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::from_vec(data, &[h, w, 3])?)
}

fn decode_raw(bytes: &[u8], path: &Path) -> Result<Tensor<f32>, DataError> {
    let malformed = |what: &str| DataError::Malformed {
        path: path.display().to_string(),
        what: what.to_string(),
    };
    let read_u32 = |off: usize| -> Result<u32, DataError> {
        bytes
            .get(off..off + 4)
            .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| malformed("truncated raw tensor header"))
    };
    let rank = read_u32(4)? as usize;
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        shape.push(read_u32(8 + 4 * i)? as usize);
    }
    if rank != 3 || shape[2] != 3 {
        return Err(malformed("raw image tensor must have rank 3 with 3 channels"));
    }
    let numel: usize = shape.iter().product();
    let data_off = 8 + 4 * rank;
    if bytes.len() < data_off + 4 * numel {
        return Err(malformed("truncated raw tensor data"));
    }
    let mut data = Vec::with_capacity(numel);
    for i in 0..numel {
        let off = data_off + 4 * i;
        data.push(f32::from_le_bytes([
            bytes[off],
            bytes[off + 1],
            bytes[off + 2],
            bytes[off + 3],
        ]));
    }
    Ok(Tensor::from_vec(data, &shape)?)
}

/// Write a `[h, w, 3]` tensor in the raw format: magic `MSTR`, u32 rank,
/// u32 extents (little endian), then f32 data row-major.
pub fn write_raw_tensor(path: &Path, tensor: &Tensor<f32>) -> Result<(), DataError> {
    let mut buf = Vec::with_capacity(8 + 4 * tensor.shape().len() + 4 * tensor.numel());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
    for &extent in tensor.shape() {
        buf.extend_from_slice(&(extent as u32).to_le_bytes());
    }
    for &v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| io_err(path, e))
}

/// Center-crop to square, bilinearly resize to `target_hw`, then
/// standardize per channel.
pub fn prepare_image(
    raw: &Tensor<f32>,
    target_hw: usize,
    stats: &ChannelStats,
) -> Result<Tensor<f32>, DataError> {
    let (h, w) = match raw.shape() {
        [h, w, 3] => (*h, *w),
        s => {
            return Err(DataError::Tensor(TensorError::Shape {
                op: "prepare_image",
                msg: format!("expected [h,w,3] pixels, got {s:?}"),
            }))
        }
    };
    let side = h.min(w);
    let oy = (h - side) / 2;
    let ox = (w - side) / 2;
    let src = raw.data();
    let mut cropped = Vec::with_capacity(side * side * 3);
    for y in 0..side {
        let row = ((y + oy) * w + ox) * 3;
        cropped.extend_from_slice(&src[row..row + side * 3]);
    }
    let resized = bilinear_resize_rgb(&cropped, side, target_hw);
    let mut data = resized;
    for px in data.chunks_exact_mut(3) {
        for c in 0..3 {
            px[c] = ((px[c] as f64 - stats.mean[c]) / stats.std[c]) as f32;
        }
    }
    Ok(Tensor::from_vec(data, &[target_hw, target_hw, 3])?)
}

/// Load and preprocess one sample image.
pub fn load_image(
    source: &ImageSource,
    target_hw: usize,
    stats: &ChannelStats,
) -> Result<Tensor<f32>, DataError> {
    let raw = match source {
        ImageSource::File(path) => decode_image(path)?,
        ImageSource::Memory(t) => t.clone(),
    };
    prepare_image(&raw, target_hw, stats)
}

fn bilinear_resize_rgb(src: &[f32], side: usize, target: usize) -> Vec<f32> {
    if side == target {
        return src.to_vec();
    }
    let scale = side as f64 / target as f64;
    let mut out = vec![0.0f32; target * target * 3];
    for oy in 0..target {
        let sy = ((oy as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(side - 1);
        let fy = sy - y0 as f64;
        for ox in 0..target {
            let sx = ((ox as f64 + 0.5) * scale - 0.5).clamp(0.0, (side - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(side - 1);
            let fx = sx - x0 as f64;
            for c in 0..3 {
                let at = |y: usize, x: usize| src[(y * side + x) * 3 + c] as f64;
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                out[(oy * target + ox) * 3 + c] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

// ── synthetic dataset ───────────────────────────────────────────────

/// Per-scene linear rendering basis: pixels = map * pose7 + offset.
pub struct SceneBasis {
    /// Row-major `[hw*hw*3, 7]`.
    pub map: Vec<f64>,
    pub offset: Vec<f64>,
}

// Column scales balance the pixel signal of the two tasks: positions span
// [-2,2] m while unit-quaternion components are sub-unit, so orientation
// columns render with a larger gain. Position renders into the top image
// half and orientation into the bottom half, giving each task its own
// spatial cues (the map stays full column rank, so poses remain exactly
// decodable).
const SYNTH_POSITION_STD: f64 = 0.8;
const SYNTH_ORIENTATION_STD: f64 = 0.9;
const SYNTH_OFFSET_STD: f64 = 0.4;

/// The fixed random linear map and texture offset of one synthetic scene.
pub fn synth_scene_basis(seed: u64, scene: usize, hw: usize) -> SceneBasis {
    let n_px = hw * hw * 3;
    let mut rng = RngState::new(seed).fork(&[streams::SYNTH, scene as u64]);
    let mut map = Vec::with_capacity(n_px * 7);
    for p in 0..n_px {
        let top_half = p / (hw * 3) < hw / 2;
        for col in 0..7 {
            let draw = rng.normal();
            let std = match (col < 3, top_half) {
                (true, true) => SYNTH_POSITION_STD,
                (false, false) => SYNTH_ORIENTATION_STD,
                _ => 0.0,
            };
            map.push(draw * std);
        }
    }
    let offset = (0..n_px).map(|_| rng.normal_scaled(0.0, SYNTH_OFFSET_STD)).collect();
    SceneBasis { map, offset }
}

fn synth_pose(seed: u64, scene: usize, index: usize) -> Pose {
    let mut rng = RngState::new(seed).fork(&[streams::SYNTH, scene as u64, index as u64 + 1]);
    let position = [
        rng.uniform_range(-2.0, 2.0),
        rng.uniform_range(-2.0, 2.0),
        rng.uniform_range(-2.0, 2.0),
    ];
    // uniform on the quaternion hemisphere: 4-d gaussian, normalized,
    // sign-canonicalized
    let q = Quaternion::new(rng.normal(), rng.normal(), rng.normal(), rng.normal());
    Pose::new(position, q).expect("gaussian quaternion is non-degenerate")
}

/// Deterministic synthetic multi-scene dataset with pose-informative
/// pixels: each scene renders the 7-dim pose vector through a fixed random
/// linear map plus a scene-specific texture offset.
pub fn synth_dataset(seed: u64, n_scenes: usize, per_scene: usize, hw: usize) -> DatasetManifest {
    assert!(n_scenes >= 1 && per_scene >= 1, "synth dataset must be non-empty");
    let mut samples = Vec::with_capacity(n_scenes * per_scene);
    for scene in 0..n_scenes {
        let basis = synth_scene_basis(seed, scene, hw);
        for index in 0..per_scene {
            let pose = synth_pose(seed, scene, index);
            let v = pose.to_vec7();
            let n_px = hw * hw * 3;
            let mut pixels = Vec::with_capacity(n_px);
            for p in 0..n_px {
                let row = &basis.map[p * 7..(p + 1) * 7];
                let mut acc = basis.offset[p];
                for (m, x) in row.iter().zip(&v) {
                    acc += m * x;
                }
                pixels.push(acc as f32);
            }
            samples.push(SceneSample {
                image: ImageSource::Memory(
                    Tensor::from_vec(pixels, &[hw, hw, 3]).expect("exact pixel count"),
                ),
                scene_id: scene,
                pose,
            });
        }
    }
    DatasetManifest {
        root: PathBuf::new(),
        scene_names: (0..n_scenes).map(|s| format!("scene{s}")).collect(),
        samples,
        stats: ChannelStats::default(),
    }
}

/// Materialize an in-memory dataset under `dir`: raw tensor files plus a
/// manifest. Returns the manifest path.
pub fn write_dataset(manifest: &DatasetManifest, dir: &Path) -> Result<PathBuf, DataError> {
    let images = dir.join("images");
    fs::create_dir_all(&images).map_err(|e| io_err(&images, e))?;
    let mut on_disk = manifest.clone();
    on_disk.root = dir.to_path_buf();
    let mut counters = vec![0usize; manifest.n_scenes()];
    for sample in &mut on_disk.samples {
        if let ImageSource::Memory(pixels) = &sample.image {
            let idx = counters[sample.scene_id];
            counters[sample.scene_id] += 1;
            let name = format!("images/{}_{idx:04}.mstr", manifest.scene_names[sample.scene_id]);
            let path = dir.join(&name);
            write_raw_tensor(&path, pixels)?;
            sample.image = ImageSource::File(path);
        }
    }
    let text = manifest_text(&on_disk)?;
    let manifest_path = dir.join("manifest.txt");
    fs::write(&manifest_path, text).map_err(|e| io_err(&manifest_path, e))?;
    Ok(manifest_path)
}
