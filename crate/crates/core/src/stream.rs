//! Synthetic scene-structured sensor streams and the stream file format.
//!
//! Frames are `[T, H, W, C]` stacks of range-Doppler-like maps. Class `c`
//! places `c` moving reflectors on a shared static background, so adjacent
//! classes differ by exactly one reflector. Scenes have geometric lengths and
//! consecutive scenes always change class.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Geometric, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::Frame;
use crate::tensor::Tensor;

pub const STREAM_MAGIC: &[u8; 4] = b"EXST";
pub const STREAM_FORMAT_VERSION: u16 = 1;
/// Magic, version, class count, four frame dims and the sample count.
pub const STREAM_HEADER_BYTES: usize = 4 + 2 + 2 + 4 * 4 + 8;

const KIND: &str = "stream";

const REFLECTOR_AMPLITUDE: f32 = 1.0;
const REFLECTOR_WIDTH: f32 = 1.5;
const BACKGROUND_AMPLITUDE: f32 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamConfig {
    pub class_count: usize,
    /// `[T, H, W, C]`: time-steps, range bins, Doppler bins, antennas.
    pub frame_shape: [usize; 4],
    pub mean_scene_length: usize,
    pub noise_sigma: f32,
    /// Per-sample step size of the within-scene random-walk drift.
    pub drift_rate: f32,
    pub stream_length: usize,
    pub seed: u64,
}

impl Default for StreamConfig {
    fn default() -> Self {
        Self {
            class_count: 5,
            frame_shape: [8, 16, 16, 3],
            mean_scene_length: 30,
            noise_sigma: 0.6,
            drift_rate: 0.02,
            stream_length: 10_000,
            seed: 42,
        }
    }
}

impl StreamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.class_count < 2 || self.class_count > usize::from(u16::MAX) {
            return bad(format!("class_count must be in 2..=65535, got {}", self.class_count));
        }
        if self.frame_shape.iter().any(|&d| d == 0 || d > u32::MAX as usize) {
            return bad(format!("frame_shape dims must be positive, got {:?}", self.frame_shape));
        }
        if self.mean_scene_length == 0 {
            return bad("mean_scene_length must be positive".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(format!("noise_sigma must be finite and >= 0, got {}", self.noise_sigma));
        }
        if !(self.drift_rate >= 0.0 && self.drift_rate.is_finite()) {
            return bad(format!("drift_rate must be finite and >= 0, got {}", self.drift_rate));
        }
        if self.stream_length == 0 {
            return bad("stream_length must be positive".into());
        }
        Ok(())
    }

    pub fn frame_len(&self) -> usize {
        self.frame_shape.iter().product()
    }
}

#[derive(Debug, Clone)]
pub struct StreamSample {
    pub frame: Frame,
    pub label: usize,
    pub scene_id: u32,
}

impl PartialEq for StreamSample {
    fn eq(&self, other: &Self) -> bool {
        self.label == other.label && self.scene_id == other.scene_id && self.frame.tensor() == other.frame.tensor()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratedStream {
    pub samples: Vec<StreamSample>,
    /// Noiseless frame of every class, indexed by label.
    pub centroids: Vec<Tensor>,
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

struct Reflector {
    range: f32,
    doppler: f32,
    velocity: f32,
    gains: Vec<f32>,
}

/// Noiseless class frames. Reflectors are drawn once and shared, so class `c`
/// holds reflectors `0..c` and every class contains the background.
pub fn class_centroids(config: &StreamConfig) -> Result<Vec<Tensor>> {
    config.validate()?;
    let [t, h, w, c] = config.frame_shape;
    let mut rng = rng_for(config.seed, 0);
    let reflector = |rng: &mut ChaCha8Rng| Reflector {
        range: rng.random_range(0.0..h as f32),
        doppler: rng.random_range(0.0..w as f32),
        velocity: rng.random_range(-0.5..0.5),
        gains: (0..c).map(|_| rng.random_range(0.5..1.0)).collect(),
    };
    let background = reflector(&mut rng);
    let targets: Vec<Reflector> = (1..config.class_count).map(|_| reflector(&mut rng)).collect();

    let paint = |frame: &mut [f32], r: &Reflector, amplitude: f32| {
        let denom = 2.0 * REFLECTOR_WIDTH * REFLECTOR_WIDTH;
        for ti in 0..t {
            let range = r.range + r.velocity * ti as f32;
            for hi in 0..h {
                for wi in 0..w {
                    let d2 = (hi as f32 - range).powi(2) + (wi as f32 - r.doppler).powi(2);
                    let v = amplitude * (-d2 / denom).exp();
                    let px = &mut frame[((ti * h + hi) * w + wi) * c..][..c];
                    for (p, g) in px.iter_mut().zip(&r.gains) {
                        *p += v * g;
                    }
                }
            }
        }
    };

    (0..config.class_count)
        .map(|class| {
            let mut data = vec![0.0f32; config.frame_len()];
            paint(&mut data, &background, BACKGROUND_AMPLITUDE);
            for target in &targets[..class] {
                paint(&mut data, target, REFLECTOR_AMPLITUDE);
            }
            Tensor::new(config.frame_shape.to_vec(), data)
        })
        .collect()
}

/// Fully deterministic in `config`.
pub fn generate_stream(config: &StreamConfig) -> Result<GeneratedStream> {
    generate_split(config, 0)
}

/// An independent stream over the same class centroids. Split 0 is
/// [`generate_stream`]; other splits serve as held-out data.
pub fn generate_split(config: &StreamConfig, split: u64) -> Result<GeneratedStream> {
    let centroids = class_centroids(config)?;
    let mut scene_rng = rng_for(config.seed, 1 + 2 * split);
    let mut noise_rng = rng_for(config.seed, 2 + 2 * split);
    let scene_lengths =
        Geometric::new(1.0 / config.mean_scene_length as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let unit = Normal::new(0.0f32, 1.0).expect("unit normal");

    let frame_len = config.frame_len();
    let mut samples = Vec::with_capacity(config.stream_length);
    let mut drift = vec![0.0f32; frame_len];
    let mut label = scene_rng.random_range(0..config.class_count);
    let mut scene_id = 0u32;
    while samples.len() < config.stream_length {
        let length = 1 + scene_lengths.sample(&mut scene_rng) as usize;
        drift.iter_mut().for_each(|d| *d = 0.0);
        for i in 0..length.min(config.stream_length - samples.len()) {
            if i > 0 && config.drift_rate > 0.0 {
                drift.iter_mut().for_each(|d| *d += config.drift_rate * unit.sample(&mut noise_rng));
            }
            let centroid = centroids[label].data();
            let data = centroid
                .iter()
                .zip(&drift)
                .map(|(&m, &d)| {
                    let noise = if config.noise_sigma > 0.0 {
                        config.noise_sigma * unit.sample(&mut noise_rng)
                    } else {
                        0.0
                    };
                    m + d + noise
                })
                .collect();
            samples.push(StreamSample {
                frame: Frame::new(Tensor::new(config.frame_shape.to_vec(), data)?),
                label,
                scene_id,
            });
        }
        let next = scene_rng.random_range(0..config.class_count - 1);
        label = if next >= label { next + 1 } else { next };
        scene_id += 1;
    }
    Ok(GeneratedStream { samples, centroids })
}

/// Scene lengths as drawn by the sampler, for checking its mean.
pub fn sample_scene_lengths(mean_scene_length: usize, count: usize, seed: u64) -> Result<Vec<usize>> {
    let dist = Geometric::new(1.0 / mean_scene_length as f64).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut rng = rng_for(seed, 1);
    Ok((0..count).map(|_| 1 + dist.sample(&mut rng) as usize).collect())
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Format {
        kind: KIND,
        detail: detail.into(),
    }
}

pub fn write_stream(samples: &[StreamSample], class_count: usize, mut out: impl Write) -> Result<()> {
    let first = samples.first().ok_or_else(|| Error::InvalidArgument("cannot write an empty stream".into()))?;
    let dims = first.frame.tensor().shape().to_vec();
    if dims.len() != 4 {
        return Err(Error::Shape(format!("stream frames must be rank 4, got {dims:?}")));
    }
    let class_count = u16::try_from(class_count).map_err(|_| Error::InvalidArgument("class count exceeds u16".into()))?;
    let mut header = Vec::with_capacity(STREAM_HEADER_BYTES);
    header.extend_from_slice(STREAM_MAGIC);
    header.extend_from_slice(&STREAM_FORMAT_VERSION.to_le_bytes());
    header.extend_from_slice(&class_count.to_le_bytes());
    for &d in &dims {
        let d = u32::try_from(d).map_err(|_| Error::Shape("frame dim exceeds u32".into()))?;
        header.extend_from_slice(&d.to_le_bytes());
    }
    header.extend_from_slice(&(samples.len() as u64).to_le_bytes());
    out.write_all(&header)?;

    let mut record = Vec::with_capacity(first.frame.tensor().len() * 4 + 8);
    for s in samples {
        if s.frame.tensor().shape() != dims.as_slice() {
            return Err(Error::Shape(format!(
                "frame shape {:?} differs from {dims:?}",
                s.frame.tensor().shape()
            )));
        }
        if s.label >= usize::from(class_count) {
            return Err(Error::InvalidArgument(format!("label {} >= class count {class_count}", s.label)));
        }
        record.clear();
        for v in s.frame.tensor().data() {
            record.extend_from_slice(&v.to_le_bytes());
        }
        record.extend_from_slice(&(s.label as u32).to_le_bytes());
        record.extend_from_slice(&s.scene_id.to_le_bytes());
        out.write_all(&record)?;
    }
    Ok(())
}

/// Parsed stream file: samples plus the class count recorded in the header.
#[derive(Debug, Clone)]
pub struct StreamFile {
    pub class_count: usize,
    pub samples: Vec<StreamSample>,
}

pub fn parse_stream(bytes: &[u8]) -> Result<StreamFile> {
    if bytes.len() < STREAM_HEADER_BYTES {
        return Err(malformed(format!("file is {} bytes, shorter than the header", bytes.len())));
    }
    if &bytes[..4] != STREAM_MAGIC {
        return Err(malformed("bad magic bytes"));
    }
    let u16_at = |at: usize| u16::from_le_bytes([bytes[at], bytes[at + 1]]);
    let u32_at = |at: usize| u32::from_le_bytes(bytes[at..at + 4].try_into().expect("4 bytes"));
    let version = u16_at(4);
    if version != STREAM_FORMAT_VERSION {
        return Err(Error::Version {
            kind: KIND,
            found: u32::from(version),
            expected: u32::from(STREAM_FORMAT_VERSION),
        });
    }
    let class_count = usize::from(u16_at(6));
    let dims: Vec<usize> = (0..4).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let length = u64::from_le_bytes(bytes[24..32].try_into().expect("8 bytes"));
    if dims.contains(&0) {
        return Err(malformed(format!("zero frame dimension in {dims:?}")));
    }
    let frame_len: usize = dims.iter().product();
    let record = frame_len * 4 + 8;
    let body = &bytes[STREAM_HEADER_BYTES..];
    let expected = usize::try_from(length).ok().and_then(|l| l.checked_mul(record));
    if expected != Some(body.len()) {
        return Err(malformed(format!(
            "body is {} bytes, header declares {length} samples of {record} bytes",
            body.len()
        )));
    }
    let mut samples = Vec::with_capacity(length as usize);
    for chunk in body.chunks_exact(record) {
        let data = chunk[..frame_len * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let tail = &chunk[frame_len * 4..];
        let label = u32::from_le_bytes(tail[..4].try_into().expect("4 bytes")) as usize;
        let scene_id = u32::from_le_bytes(tail[4..8].try_into().expect("4 bytes"));
        if label >= class_count {
            return Err(malformed(format!("label {label} >= class count {class_count}")));
        }
        samples.push(StreamSample {
            frame: Frame::new(Tensor::new(dims.clone(), data)?),
            label,
            scene_id,
        });
    }
    Ok(StreamFile { class_count, samples })
}

pub fn read_stream(mut input: impl Read) -> Result<StreamFile> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    parse_stream(&bytes)
}

pub fn save_stream(samples: &[StreamSample], class_count: usize, path: impl AsRef<Path>) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    write_stream(samples, class_count, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_stream(path: impl AsRef<Path>) -> Result<StreamFile> {
    parse_stream(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> StreamConfig {
        StreamConfig {
            frame_shape: [2, 4, 4, 2],
            stream_length: 200,
            mean_scene_length: 10,
            seed,
            ..StreamConfig::default()
        }
    }

    #[test]
    fn noiseless_frames_equal_centroids() {
        let cfg = StreamConfig {
            noise_sigma: 0.0,
            drift_rate: 0.0,
            ..small(3)
        };
        let s = generate_stream(&cfg).unwrap();
        for sample in &s.samples {
            assert_eq!(sample.frame.tensor(), &s.centroids[sample.label]);
        }
    }

    #[test]
    fn scenes_change_label() {
        let s = generate_stream(&small(9)).unwrap();
        for pair in s.samples.windows(2) {
            assert!(pair[1].scene_id >= pair[0].scene_id);
            if pair[1].scene_id == pair[0].scene_id {
                assert_eq!(pair[1].label, pair[0].label);
            } else {
                assert_eq!(pair[1].scene_id, pair[0].scene_id + 1);
                assert_ne!(pair[1].label, pair[0].label);
            }
        }
    }

    #[test]
    fn centroids_are_distinct() {
        let c = class_centroids(&StreamConfig::default()).unwrap();
        assert_eq!(c.len(), 5);
        for a in 0..5 {
            for b in a + 1..5 {
                assert_ne!(c[a], c[b]);
            }
        }
    }

    #[test]
    fn rejects_invalid_config() {
        for cfg in [
            StreamConfig { class_count: 1, ..small(0) },
            StreamConfig { mean_scene_length: 0, ..small(0) },
            StreamConfig { noise_sigma: -1.0, ..small(0) },
            StreamConfig { drift_rate: f32::NAN, ..small(0) },
            StreamConfig { stream_length: 0, ..small(0) },
            StreamConfig { frame_shape: [1, 0, 4, 2], ..small(0) },
        ] {
            assert!(matches!(generate_stream(&cfg), Err(Error::InvalidArgument(_))), "{cfg:?}");
        }
    }

    #[test]
    fn file_errors_are_distinct() {
        let s = generate_stream(&small(1)).unwrap();
        let mut bytes = Vec::new();
        write_stream(&s.samples, 5, &mut bytes).unwrap();

        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(parse_stream(&bad_magic), Err(Error::Format { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        assert!(matches!(parse_stream(&bad_version), Err(Error::Version { found: 9, .. })));

        assert!(matches!(parse_stream(&bytes[..bytes.len() - 3]), Err(Error::Format { .. })));
        assert!(matches!(parse_stream(&bytes[..10]), Err(Error::Format { .. })));
    }
}
