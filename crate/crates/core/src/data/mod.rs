//! Synthetic video with known ground-truth motion, plus raw planar video IO.
//!
//! Clips are rendered by sampling smooth analytic textures at per-frame
//! shifted coordinates, so the global motion between consecutive frames is
//! known exactly and warping frame `t` by it reproduces frame `t+1` up to
//! interpolation and sensor noise. Frames are 8-bit quantized at synthesis so
//! in-memory data and raw files carry identical samples.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codec::{CodecError, FrameBuffer};
use crate::par;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("raw file size mismatch: expected {expected} bytes, got {actual}")]
    SizeMismatch { expected: usize, actual: usize },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid spec: {0}")]
    InvalidSpec(String),
    #[error(transparent)]
    Codec(#[from] CodecError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Texture {
    SmoothBlobs,
    Checker,
    BandNoise,
}

impl Texture {
    pub const ALL: [Texture; 3] = [Texture::SmoothBlobs, Texture::Checker, Texture::BandNoise];

    pub fn name(self) -> &'static str {
        match self {
            Texture::SmoothBlobs => "smooth-blobs",
            Texture::Checker => "checker",
            Texture::BandNoise => "band-limited-noise",
        }
    }
}

impl std::str::FromStr for Texture {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, DataError> {
        match s {
            "smooth-blobs" => Ok(Texture::SmoothBlobs),
            "checker" => Ok(Texture::Checker),
            "band-limited-noise" | "band-noise" => Ok(Texture::BandNoise),
            other => Err(DataError::InvalidSpec(format!(
                "unknown texture `{other}` (smooth-blobs | checker | band-limited-noise)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum TextureChoice {
    /// Cycle through all textures by clip id.
    Mixed,
    Fixed(Texture),
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthSpec {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub texture: TextureChoice,
    /// Per-clip global motion is drawn uniformly from
    /// `[-motion_range, motion_range]` pixels/frame on each axis.
    pub motion_range: f64,
    /// Fixed per-clip motion overriding the draw, for controlled experiments.
    pub fixed_motion: Option<(f64, f64)>,
    /// Additive Gaussian sensor noise (std dev in sample units).
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            width: 64,
            height: 64,
            frames: 21,
            texture: TextureChoice::Mixed,
            motion_range: 3.0,
            fixed_motion: None,
            noise_sigma: 0.01,
            seed: 0,
        }
    }
}

/// Continuous texture sampled at arbitrary coordinates.
enum TextureField {
    Blobs(Vec<(f64, f64, f64, f64)>), // (cx, cy, sigma, amplitude)
    Checker { period: f64, sharpness: f64, amp: f64, phase: (f64, f64) },
    Band(Vec<(f64, f64, f64, f64)>), // (u, v, phase, amplitude)
}

impl TextureField {
    fn sample(&self, x: f64, y: f64) -> f64 {
        let v = match self {
            TextureField::Blobs(blobs) => {
                let mut acc = 0.0;
                for &(cx, cy, sigma, amp) in blobs {
                    let d2 = (x - cx) * (x - cx) + (y - cy) * (y - cy);
                    acc += amp * (-d2 / (2.0 * sigma * sigma)).exp();
                }
                acc
            }
            TextureField::Checker {
                period,
                sharpness,
                amp,
                phase,
            } => {
                let sx = (std::f64::consts::TAU * (x + phase.0) / period).sin();
                let sy = (std::f64::consts::TAU * (y + phase.1) / period).sin();
                amp * (sharpness * sx * sy).tanh()
            }
            TextureField::Band(waves) => {
                let mut acc = 0.0;
                for &(u, v, ph, amp) in waves {
                    acc += amp * (std::f64::consts::TAU * (u * x + v * y) + ph).sin();
                }
                acc
            }
        };
        (0.5 + v).clamp(0.0, 1.0)
    }
}

fn build_texture(texture: Texture, rng: &mut ChaCha8Rng, w: f64, h: f64) -> TextureField {
    match texture {
        Texture::SmoothBlobs => {
            let count = 10;
            let mut amps: Vec<f64> = (0..count)
                .map(|_| rng.gen_range(-1.0..1.0f64))
                .collect();
            let total: f64 = amps.iter().map(|a| a.abs()).sum();
            for a in &mut amps {
                *a *= 0.42 / total;
            }
            let blobs = amps
                .into_iter()
                .map(|a| {
                    (
                        rng.gen_range(-w..2.0 * w),
                        rng.gen_range(-h..2.0 * h),
                        rng.gen_range(6.0..16.0),
                        a,
                    )
                })
                .collect();
            TextureField::Blobs(blobs)
        }
        Texture::Checker => TextureField::Checker {
            period: rng.gen_range(16.0..28.0),
            sharpness: 1.5,
            amp: 0.4,
            phase: (rng.gen_range(0.0..24.0), rng.gen_range(0.0..24.0)),
        },
        Texture::BandNoise => {
            let count = 12;
            let mut amps: Vec<f64> = (0..count)
                .map(|_| rng.gen_range(-1.0..1.0f64))
                .collect();
            let total: f64 = amps.iter().map(|a| a.abs()).sum();
            for a in &mut amps {
                *a *= 0.42 / total;
            }
            let waves = amps
                .into_iter()
                .map(|a| {
                    (
                        rng.gen_range(-0.08..0.08),
                        rng.gen_range(-0.08..0.08),
                        rng.gen_range(0.0..std::f64::consts::TAU),
                        a,
                    )
                })
                .collect();
            TextureField::Band(waves)
        }
    }
}

/// One synthesized clip with its ground-truth global motion.
#[derive(Clone, Debug)]
pub struct Clip {
    pub id: u32,
    pub frames: Vec<FrameBuffer>,
    pub dx: f64,
    pub dy: f64,
    pub texture: Texture,
    pub heldout: bool,
}

fn clip_texture(choice: TextureChoice, id: u32) -> Texture {
    match choice {
        TextureChoice::Fixed(t) => t,
        TextureChoice::Mixed => Texture::ALL[id as usize % Texture::ALL.len()],
    }
}

/// Render one clip deterministically from the spec seed and clip id.
pub fn synth_clip(spec: &SynthSpec, id: u32) -> Result<Clip, DataError> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ id as u64);
    let texture = clip_texture(spec.texture, id);
    let field = build_texture(texture, &mut rng, spec.width as f64, spec.height as f64);
    let (dx, dy) = match spec.fixed_motion {
        Some(m) => m,
        None => (
            rng.gen_range(-spec.motion_range..spec.motion_range),
            rng.gen_range(-spec.motion_range..spec.motion_range),
        ),
    };
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).map_err(|e| DataError::InvalidSpec(e.to_string()))?)
    } else {
        None
    };
    let mut frames = Vec::with_capacity(spec.frames);
    for t in 0..spec.frames {
        let ox = t as f64 * dx;
        let oy = t as f64 * dy;
        let mut samples = Vec::with_capacity(spec.width * spec.height);
        for y in 0..spec.height {
            for x in 0..spec.width {
                let mut v = field.sample(x as f64 + ox, y as f64 + oy);
                if let Some(n) = &noise {
                    v = (v + n.sample(&mut rng)).clamp(0.0, 1.0);
                }
                samples.push(v);
            }
        }
        let f = FrameBuffer::new(spec.width, spec.height, 1, samples)?;
        // 8-bit quantize so memory and raw files agree exactly
        frames.push(FrameBuffer::from_u8(spec.width, spec.height, 1, &f.to_u8())?);
    }
    Ok(Clip {
        id,
        frames,
        dx,
        dy,
        texture,
        heldout: false,
    })
}

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf29ce484222325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x100000001b3);
    }
    hash
}

/// Held-out clip ids: the `heldout_count` ids ranking lowest under the FNV-1a
/// hash of their little-endian bytes (ties by id). Fixed split, independent
/// of the seed.
pub fn heldout_ids(n_clips: usize, heldout_count: usize) -> Vec<u32> {
    let mut ranked: Vec<u32> = (0..n_clips as u32).collect();
    ranked.sort_by_key(|&id| (fnv1a64(&id.to_le_bytes()), id));
    let mut ids: Vec<u32> = ranked.into_iter().take(heldout_count).collect();
    ids.sort_unstable();
    ids
}

/// An in-memory dataset of synthesized clips with a fixed train/held-out split.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: SynthSpec,
    pub clips: Vec<Clip>,
}

impl Dataset {
    pub fn synthesize(
        spec: &SynthSpec,
        n_clips: usize,
        heldout_count: usize,
    ) -> Result<Dataset, DataError> {
        if heldout_count >= n_clips {
            return Err(DataError::InvalidSpec(format!(
                "heldout {heldout_count} >= clips {n_clips}"
            )));
        }
        let heldout = heldout_ids(n_clips, heldout_count);
        let clips: Result<Vec<Clip>, DataError> = par::map_indexed(n_clips, |i| {
            let mut clip = synth_clip(spec, i as u32)?;
            clip.heldout = heldout.binary_search(&(i as u32)).is_ok();
            Ok(clip)
        })
        .into_iter()
        .collect();
        Ok(Dataset {
            spec: spec.clone(),
            clips: clips?,
        })
    }

    /// The default desk-scale set: 220 clips of 21 frames at 64x64, mixed
    /// textures, 20 held out.
    pub fn default_desk(seed: u64) -> Result<Dataset, DataError> {
        let spec = SynthSpec {
            seed,
            ..Default::default()
        };
        Dataset::synthesize(&spec, 220, 20)
    }

    pub fn train_clips(&self) -> Vec<&Clip> {
        self.clips.iter().filter(|c| !c.heldout).collect()
    }

    pub fn heldout_clips(&self) -> Vec<&Clip> {
        self.clips.iter().filter(|c| c.heldout).collect()
    }
}

/// Sidecar descriptor of a raw planar 8-bit video file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RawVideoHeader {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames: usize,
    /// Always "u8-planar".
    pub format: String,
}

impl RawVideoHeader {
    pub fn new(width: usize, height: usize, channels: usize, frames: usize) -> Self {
        RawVideoHeader {
            width,
            height,
            channels,
            frames,
            format: "u8-planar".into(),
        }
    }

    pub fn byte_len(&self) -> usize {
        self.width * self.height * self.channels * self.frames
    }

    pub fn sidecar_path(raw_path: &Path) -> PathBuf {
        let mut p = raw_path.as_os_str().to_owned();
        p.push(".json");
        PathBuf::from(p)
    }
}

/// Load raw planar samples, mapping to `[0, 1]` by `/255`.
pub fn load_raw(path: &Path, header: &RawVideoHeader) -> Result<Vec<FrameBuffer>, DataError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() != header.byte_len() {
        return Err(DataError::SizeMismatch {
            expected: header.byte_len(),
            actual: bytes.len(),
        });
    }
    let per_frame = header.width * header.height * header.channels;
    (0..header.frames)
        .map(|i| {
            FrameBuffer::from_u8(
                header.width,
                header.height,
                header.channels,
                &bytes[i * per_frame..(i + 1) * per_frame],
            )
            .map_err(DataError::from)
        })
        .collect()
}

/// Load a raw clip via its JSON sidecar.
pub fn load_raw_with_sidecar(path: &Path) -> Result<(RawVideoHeader, Vec<FrameBuffer>), DataError> {
    let sidecar = RawVideoHeader::sidecar_path(path);
    let header: RawVideoHeader = serde_json::from_str(&std::fs::read_to_string(sidecar)?)?;
    let frames = load_raw(path, &header)?;
    Ok((header, frames))
}

/// Write frames as raw planar 8-bit plus a JSON sidecar. Lossless for 8-bit
/// quantized input.
pub fn save_raw(path: &Path, frames: &[FrameBuffer]) -> Result<RawVideoHeader, DataError> {
    let first = frames
        .first()
        .ok_or_else(|| DataError::InvalidSpec("no frames to save".into()))?;
    let header = RawVideoHeader::new(first.width(), first.height(), first.channels(), frames.len());
    let mut bytes = Vec::with_capacity(header.byte_len());
    for f in frames {
        bytes.extend_from_slice(&f.to_u8());
    }
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, &bytes)?;
    std::fs::rename(&tmp, path)?;
    std::fs::write(
        RawVideoHeader::sidecar_path(path),
        serde_json::to_string_pretty(&header)?,
    )?;
    Ok(header)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClipManifestEntry {
    pub id: u32,
    pub file: String,
    pub dx: f64,
    pub dy: f64,
    pub texture: String,
    pub heldout: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub frames_per_clip: usize,
    pub noise_sigma: f64,
    pub seed: u64,
    pub clips: Vec<ClipManifestEntry>,
}

/// Synthesize a dataset onto disk: one raw clip file per clip plus
/// `manifest.json` recording the ground-truth motion and split.
pub fn synth_dataset(
    spec: &SynthSpec,
    n_clips: usize,
    heldout_count: usize,
    out_dir: &Path,
) -> Result<Manifest, DataError> {
    std::fs::create_dir_all(out_dir)?;
    let dataset = Dataset::synthesize(spec, n_clips, heldout_count)?;
    let mut entries = Vec::with_capacity(n_clips);
    for clip in &dataset.clips {
        let file = format!("clip_{:04}.raw", clip.id);
        save_raw(&out_dir.join(&file), &clip.frames)?;
        entries.push(ClipManifestEntry {
            id: clip.id,
            file,
            dx: clip.dx,
            dy: clip.dy,
            texture: clip.texture.name().into(),
            heldout: clip.heldout,
        });
    }
    let manifest = Manifest {
        width: spec.width,
        height: spec.height,
        channels: 1,
        frames_per_clip: spec.frames,
        noise_sigma: spec.noise_sigma,
        seed: spec.seed,
        clips: entries,
    };
    std::fs::write(
        out_dir.join("manifest.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(manifest)
}

/// Load a disk dataset written by [`synth_dataset`].
pub fn load_dataset(dir: &Path) -> Result<(Manifest, Vec<Clip>), DataError> {
    let manifest: Manifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json"))?)?;
    let header = RawVideoHeader::new(
        manifest.width,
        manifest.height,
        manifest.channels,
        manifest.frames_per_clip,
    );
    let mut clips = Vec::with_capacity(manifest.clips.len());
    for e in &manifest.clips {
        let frames = load_raw(&dir.join(&e.file), &header)?;
        clips.push(Clip {
            id: e.id,
            frames,
            dx: e.dx,
            dy: e.dy,
            texture: e.texture.parse()?,
            heldout: e.heldout,
        });
    }
    Ok((manifest, clips))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::kernels::warp_forward;
    use crate::autodiff::Tensor;

    #[test]
    fn zero_motion_zero_noise_gives_identical_frames() {
        let spec = SynthSpec {
            frames: 5,
            fixed_motion: Some((0.0, 0.0)),
            noise_sigma: 0.0,
            ..Default::default()
        };
        let clip = synth_clip(&spec, 3).unwrap();
        let h0 = clip.frames[0].content_hash();
        for f in &clip.frames {
            assert_eq!(f.content_hash(), h0);
        }
    }

    #[test]
    fn same_seed_is_byte_identical() {
        let spec = SynthSpec {
            frames: 4,
            ..Default::default()
        };
        let a = synth_clip(&spec, 7).unwrap();
        let b = synth_clip(&spec, 7).unwrap();
        for (fa, fb) in a.frames.iter().zip(&b.frames) {
            assert_eq!(fa.to_u8(), fb.to_u8());
        }
        assert_eq!(a.dx, b.dx);
        let c = synth_clip(&spec, 8).unwrap();
        assert_ne!(a.frames[0].to_u8(), c.frames[0].to_u8());
    }

    #[test]
    fn warping_by_manifest_motion_reproduces_next_frame() {
        for texture in Texture::ALL {
            let spec = SynthSpec {
                frames: 6,
                texture: TextureChoice::Fixed(texture),
                noise_sigma: 0.0,
                ..Default::default()
            };
            let clip = synth_clip(&spec, 11).unwrap();
            let (w, h) = (spec.width, spec.height);
            let mut flow = Tensor::zeros(&[1, 2, h, w]);
            for i in 0..h * w {
                flow.data_mut()[i] = clip.dx;
                flow.data_mut()[h * w + i] = clip.dy;
            }
            for t in 0..spec.frames - 1 {
                let warped = warp_forward(&clip.frames[t].to_tensor(), &flow).unwrap();
                // interior only: borders clamp and reveal unseen content
                let margin = 4;
                let mut err = 0.0;
                let mut count = 0;
                for y in margin..h - margin {
                    for x in margin..w - margin {
                        let a = warped.data()[y * w + x];
                        let b = clip.frames[t + 1].samples()[y * w + x];
                        err += (a - b) * (a - b);
                        count += 1;
                    }
                }
                let mse = err / count as f64;
                let psnr = 10.0 * (1.0 / mse.max(1e-12)).log10();
                assert!(
                    psnr >= 40.0,
                    "{}: frame {t} warp fidelity {psnr:.1} dB (motion {:.2},{:.2})",
                    texture.name(),
                    clip.dx,
                    clip.dy
                );
            }
        }
    }

    #[test]
    fn heldout_split_is_fixed_and_exact() {
        let ids = heldout_ids(220, 20);
        assert_eq!(ids.len(), 20);
        assert_eq!(ids, heldout_ids(220, 20));
        let ds = Dataset::synthesize(
            &SynthSpec {
                width: 16,
                height: 16,
                frames: 2,
                ..Default::default()
            },
            30,
            5,
        )
        .unwrap();
        assert_eq!(ds.heldout_clips().len(), 5);
        assert_eq!(ds.train_clips().len(), 25);
    }

    #[test]
    fn raw_round_trip_and_size_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.raw");
        let spec = SynthSpec {
            width: 16,
            height: 16,
            frames: 3,
            ..Default::default()
        };
        let clip = synth_clip(&spec, 0).unwrap();
        let header = save_raw(&path, &clip.frames).unwrap();
        assert_eq!(header.byte_len(), 16 * 16 * 3);
        let loaded = load_raw(&path, &header).unwrap();
        for (a, b) in clip.frames.iter().zip(&loaded) {
            assert_eq!(a.samples(), b.samples());
        }
        // 255 -> 1.0 and 0 -> 0.0
        let f = FrameBuffer::from_u8(8, 8, 1, &[255u8; 64]).unwrap();
        assert!(f.samples().iter().all(|&v| v == 1.0));
        let z = FrameBuffer::from_u8(8, 8, 1, &[0u8; 64]).unwrap();
        assert!(z.samples().iter().all(|&v| v == 0.0));

        let bad = RawVideoHeader::new(16, 16, 1, 4);
        match load_raw(&path, &bad) {
            Err(DataError::SizeMismatch { expected, actual }) => {
                assert_eq!(expected, 1024);
                assert_eq!(actual, 768);
            }
            other => panic!("expected size mismatch, got {other:?}"),
        }
    }

    #[test]
    fn dataset_disk_round_trip_preserves_manifest_motion() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec {
            width: 16,
            height: 16,
            frames: 3,
            ..Default::default()
        };
        let manifest = synth_dataset(&spec, 6, 2, dir.path()).unwrap();
        assert_eq!(manifest.clips.len(), 6);
        let (m2, clips) = load_dataset(dir.path()).unwrap();
        assert_eq!(m2.clips.len(), 6);
        for (e, c) in m2.clips.iter().zip(&clips) {
            assert_eq!(e.dx, c.dx);
            assert_eq!(e.dy, c.dy);
            // manifest motion equals the generator's sampled motion
            let regen = synth_clip(&spec, e.id).unwrap();
            assert_eq!(regen.dx, e.dx, "clip {} texture {}", e.id, e.texture);
            assert_eq!(regen.dy, e.dy, "clip {} texture {}", e.id, e.texture);
        }
    }
}

