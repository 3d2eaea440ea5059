//! Single-file checkpoints.
//!
//! Layout: 8-byte magic, u32 LE format version, u64 LE manifest length, the
//! JSON manifest, then every tensor as little-endian f32 in manifest order,
//! then a SHA-256 digest of everything before it.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{EpochLog, Stage, TrainConfig};
use crate::nets::{ArchDescriptor, ModelParams, NetError};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"LBCKPT\r\n";
const DIGEST_LEN: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("checkpoint not found: {0}")]
    NotFound(String),
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint format version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("tensor `{tensor}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch {
        tensor: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("checkpoint has no network `{0}`")]
    MissingNet(String),
    #[error("checkpoint has no optimizer state for `{0}`")]
    MissingOptimizer(String),
    #[error("invalid network in checkpoint: {0}")]
    Net(NetError),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

impl From<NetError> for CheckpointError {
    fn from(e: NetError) -> Self {
        match e {
            NetError::ShapeMismatch {
                tensor,
                expected,
                found,
            } => Self::ShapeMismatch {
                tensor,
                expected,
                found,
            },
            other => Self::Net(other),
        }
    }
}

/// Resumable position of a ChaCha stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; the value is a u128.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().unwrap_or(0));
        rng
    }
}

/// Everything needed to resume or reuse a training stage.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub stage: Stage,
    pub epoch: usize,
    pub step: usize,
    pub config: TrainConfig,
    /// Networks by role, e.g. `encoder`, `translator`, `frozen.decoder2`.
    pub nets: IndexMap<String, ModelParams>,
    pub optimizers: IndexMap<String, Adam>,
    pub rng: RngState,
    pub log: Vec<EpochLog>,
}

impl Checkpoint {
    pub fn net(&self, role: &str) -> Result<&ModelParams, CheckpointError> {
        self.nets
            .get(role)
            .ok_or_else(|| CheckpointError::MissingNet(role.to_string()))
    }

    pub fn optimizer(&self, role: &str) -> Result<&Adam, CheckpointError> {
        self.optimizers
            .get(role)
            .ok_or_else(|| CheckpointError::MissingOptimizer(role.to_string()))
    }
}

#[derive(Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct NetEntry {
    role: String,
    arch: ArchDescriptor,
    init_seed: u64,
    tensors: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
struct OptEntry {
    role: String,
    config: AdamConfig,
    step: u64,
    first: Vec<BlobEntry>,
    second: Vec<BlobEntry>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    stage: Stage,
    epoch: usize,
    step: usize,
    config: TrainConfig,
    nets: Vec<NetEntry>,
    optimizers: Vec<OptEntry>,
    rng: RngState,
    log: Vec<EpochLog>,
}

fn entries(tensors: &IndexMap<String, Tensor<f32>>, blobs: &mut Vec<u8>) -> Vec<BlobEntry> {
    tensors
        .iter()
        .map(|(name, t)| {
            for v in t.data() {
                blobs.extend_from_slice(&v.to_le_bytes());
            }
            BlobEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            }
        })
        .collect()
}

/// Serializes a checkpoint to bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut blobs = Vec::new();
    let nets = ckpt
        .nets
        .iter()
        .map(|(role, p)| NetEntry {
            role: role.clone(),
            arch: p.arch.clone(),
            init_seed: p.init_seed,
            tensors: entries(&p.tensors, &mut blobs),
        })
        .collect();
    let optimizers = ckpt
        .optimizers
        .iter()
        .map(|(role, o)| OptEntry {
            role: role.clone(),
            config: o.config,
            step: o.step,
            first: entries(&o.first, &mut blobs),
            second: entries(&o.second, &mut blobs),
        })
        .collect();
    let manifest = Manifest {
        stage: ckpt.stage,
        epoch: ckpt.epoch,
        step: ckpt.step,
        config: ckpt.config.clone(),
        nets,
        optimizers,
        rng: ckpt.rng.clone(),
        log: ckpt.log.clone(),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::with_capacity(20 + json.len() + blobs.len() + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blobs);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        if self.bytes.len() - self.pos < n {
            return Err(CheckpointError::Corrupt(format!("truncated inside {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn tensors(&mut self, list: &[BlobEntry]) -> Result<IndexMap<String, Tensor<f32>>, CheckpointError> {
        let mut out = IndexMap::new();
        for e in list {
            let bytes = e
                .shape
                .iter()
                .try_fold(4usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor `{}` is too large", e.name)))?;
            let raw = self.take(bytes, &format!("tensor `{}`", e.name))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            out.insert(e.name.clone(), Tensor::from_vec(&e.shape, data));
        }
        Ok(out)
    }
}

/// Parses bytes produced by [`encode_checkpoint`].
pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::Corrupt("bad magic bytes".into()));
    }
    let mut r = Reader { bytes, pos: MAGIC.len() };
    let version = u32::from_le_bytes(r.take(4, "header")?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let len = u64::from_le_bytes(r.take(8, "header")?.try_into().unwrap()) as usize;
    if len > bytes.len() {
        return Err(CheckpointError::Corrupt("truncated inside manifest".into()));
    }
    let manifest: Manifest = serde_json::from_slice(r.take(len, "manifest")?)
        .map_err(|e| CheckpointError::Corrupt(format!("manifest: {e}")))?;

    let mut nets = IndexMap::new();
    for n in &manifest.nets {
        let tensors = r.tensors(&n.tensors)?;
        nets.insert(
            n.role.clone(),
            ModelParams::from_tensors(n.arch.clone(), tensors, n.init_seed)?,
        );
    }
    let mut optimizers = IndexMap::new();
    for o in &manifest.optimizers {
        let first = r.tensors(&o.first)?;
        let second = r.tensors(&o.second)?;
        if let Some(p) = nets.get(&o.role) {
            for (name, t) in first.iter().chain(&second) {
                let want = p.tensors.get(name).map(|p| p.shape().to_vec());
                if want.as_deref() != Some(t.shape()) {
                    return Err(CheckpointError::ShapeMismatch {
                        tensor: format!("{}/{name} optimizer moment", o.role),
                        expected: want.unwrap_or_default(),
                        found: t.shape().to_vec(),
                    });
                }
            }
        }
        optimizers.insert(
            o.role.clone(),
            Adam {
                config: o.config,
                step: o.step,
                first,
                second,
            },
        );
    }
    let body_end = r.pos;
    let digest = r.take(DIGEST_LEN, "digest")?;
    if r.pos != bytes.len() {
        return Err(CheckpointError::Corrupt("trailing bytes after digest".into()));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(CheckpointError::Corrupt("digest mismatch".into()));
    }
    Ok(Checkpoint {
        stage: manifest.stage,
        epoch: manifest.epoch,
        step: manifest.step,
        config: manifest.config,
        nets,
        optimizers,
        rng: manifest.rng,
        log: manifest.log,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CheckpointError> {
    let io = |source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io)?;
    }
    // Write then rename so a crash never leaves a half-written file behind.
    let tmp = path.with_extension("tmp");
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode_checkpoint(ckpt)).map_err(io)?;
    f.sync_all().map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    if !path.is_file() {
        return Err(CheckpointError::NotFound(path.display().to_string()));
    }
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode_checkpoint(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::defaults;
    use crate::optim::ADAM_EPSILON;

    fn sample() -> Checkpoint {
        let mut e = ModelParams::init(defaults::encoder(&[4, 8], 4), 1).unwrap();
        e.jitter(2, 0.1);
        let adam = AdamConfig {
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: ADAM_EPSILON,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rand::Rng::random(&mut rng);
        Checkpoint {
            stage: Stage::VaeganDomain1,
            epoch: 3,
            step: 12,
            config: TrainConfig::default(),
            optimizers: [("encoder".to_string(), Adam::new(adam, &e))].into_iter().collect(),
            nets: [("encoder".to_string(), e)].into_iter().collect(),
            rng: RngState::capture(&rng),
            log: Vec::new(),
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let c = sample();
        let back = decode_checkpoint(&encode_checkpoint(&c)).unwrap();
        assert_eq!(back, c);
        let (mut a, mut b) = (c.rng.restore(), back.rng.restore());
        assert_eq!(rand::Rng::random::<u64>(&mut a), rand::Rng::random::<u64>(&mut b));
    }

    #[test]
    fn re_encoding_is_byte_identical() {
        let mut c = sample();
        // Needs the shortest round-trip representation to survive parsing.
        c.config.lambda_kl = 44.039693184375764;
        let bytes = encode_checkpoint(&c);
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back.config.lambda_kl, 44.039693184375764);
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn truncation_is_reported_as_corruption() {
        let bytes = encode_checkpoint(&sample());
        for cut in [4, 30, bytes.len() / 2, bytes.len() - 1] {
            let err = decode_checkpoint(&bytes[..cut]).unwrap_err();
            assert!(err.to_string().starts_with("corrupt checkpoint"), "{err}");
        }
    }

    #[test]
    fn flipped_bit_fails_the_digest() {
        let mut bytes = encode_checkpoint(&sample());
        let n = bytes.len();
        bytes[n - 40] ^= 1;
        assert!(matches!(decode_checkpoint(&bytes), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn other_versions_are_rejected() {
        let mut bytes = encode_checkpoint(&sample());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes),
            Err(CheckpointError::VersionMismatch { found: 7, expected: CHECKPOINT_VERSION })
        ));
    }

    #[test]
    fn shape_mismatch_names_the_tensor() {
        let mut c = sample();
        let e = c.nets.get_mut("encoder").unwrap();
        e.tensors.insert("down1.weight".into(), Tensor::zeros(&[8, 4, 3, 2]));
        let err = decode_checkpoint(&encode_checkpoint(&c)).unwrap_err();
        match err {
            CheckpointError::ShapeMismatch { tensor, .. } => assert_eq!(tensor, "down1.weight"),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err_text(&c).contains("down1.weight"));
    }

    fn err_text(c: &Checkpoint) -> String {
        decode_checkpoint(&encode_checkpoint(c)).unwrap_err().to_string()
    }

    #[test]
    fn missing_file_is_not_found() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("absent.ckpt");
        let err = load_checkpoint(&p).unwrap_err();
        assert_eq!(err.to_string(), format!("checkpoint not found: {}", p.display()));
        save_checkpoint(&sample(), &p).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), sample());
    }
}
