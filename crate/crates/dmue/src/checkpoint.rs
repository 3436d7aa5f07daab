//! Self-describing binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DMUECKPT" | version u32 | kind u8 (0 full, 1 stripped)
//! num_classes u32 | feature_dim u32
//! n_sizes u32 | sizes u32 * n_sizes          (trunk_width, head_hidden)
//! n_tensors u32
//! per tensor: name_len u32 | name bytes | rank u32 | dims u32 * rank
//!             | values f64 * numel
//! ```
//!
//! Values are raw IEEE-754 bits, so save -> load -> save reproduces the file
//! byte for byte.

use std::path::Path;

use thiserror::Error;

use crate::diffcore::Tensor;
use crate::model::{strip_for_deployment, BranchSet, DeployModel, LayerSizes, UncertaintyModule};

const MAGIC: &[u8; 8] = b"DMUECKPT";
const VERSION: u32 = 1;
const KIND_FULL: u8 = 0;
const KIND_STRIPPED: u8 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint file is truncated")]
    Truncated,
    #[error("unknown checkpoint kind {0}")]
    UnknownKind(u8),
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint is stripped: auxiliary heads and the uncertainty module are absent")]
    MissingAuxiliary,
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: (usize, usize), found: (usize, usize) },
    #[error("unexpected trailing bytes after the last tensor")]
    TrailingData,
}

/// A loaded checkpoint of either kind.
pub enum Checkpoint {
    Full { model: BranchSet, uncertainty: UncertaintyModule },
    Stripped(DeployModel),
}

impl Checkpoint {
    /// The deployable model, stripping a full checkpoint if needed.
    pub fn into_deploy(self) -> DeployModel {
        match self {
            Checkpoint::Full { model, .. } => strip_for_deployment(&model),
            Checkpoint::Stripped(deploy) => deploy,
        }
    }
}

pub fn save_full(
    model: &BranchSet,
    uncertainty: &UncertaintyModule,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    model.visit_params(&mut |name, t| tensors.push((name, t.clone())));
    uncertainty.visit_params(&mut |name, t| tensors.push((name, t.clone())));
    let bytes = encode(
        KIND_FULL,
        model.num_classes,
        model.feature_dim,
        model.sizes,
        &tensors,
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn save_stripped(deploy: &DeployModel, path: &Path) -> Result<(), CheckpointError> {
    let mut tensors: Vec<(String, Tensor)> = Vec::new();
    deploy.visit_params(&mut |name, t| tensors.push((name, t.clone())));
    let bytes = encode(
        KIND_STRIPPED,
        deploy.num_classes,
        deploy.feature_dim,
        deploy.sizes,
        &tensors,
    );
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path)?;
    decode(&bytes)
}

/// Loads a checkpoint that must contain the auxiliary heads and the
/// uncertainty module (training state).
pub fn load_full(path: &Path) -> Result<(BranchSet, UncertaintyModule), CheckpointError> {
    match load(path)? {
        Checkpoint::Full { model, uncertainty } => Ok((model, uncertainty)),
        Checkpoint::Stripped(_) => Err(CheckpointError::MissingAuxiliary),
    }
}

fn encode(
    kind: u8,
    num_classes: usize,
    feature_dim: usize,
    sizes: LayerSizes,
    tensors: &[(String, Tensor)],
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&(num_classes as u32).to_le_bytes());
    out.extend_from_slice(&(feature_dim as u32).to_le_bytes());
    out.extend_from_slice(&2u32.to_le_bytes());
    out.extend_from_slice(&(sizes.trunk_width as u32).to_le_bytes());
    out.extend_from_slice(&(sizes.head_hidden as u32).to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&2u32.to_le_bytes());
        out.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.buf.len() {
            return Err(CheckpointError::Truncated);
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn decode(bytes: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let kind = r.u8()?;
    let num_classes = r.u32()? as usize;
    let feature_dim = r.u32()? as usize;
    let n_sizes = r.u32()? as usize;
    if n_sizes != 2 {
        return Err(CheckpointError::Truncated);
    }
    let sizes = LayerSizes { trunk_width: r.u32()? as usize, head_hidden: r.u32()? as usize };
    let n_tensors = r.u32()? as usize;
    let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| CheckpointError::Truncated)?;
        let rank = r.u32()? as usize;
        if rank != 2 {
            return Err(CheckpointError::Truncated);
        }
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut data = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            data.push(r.f64()?);
        }
        tensors.push((name, Tensor::new(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(CheckpointError::TrailingData);
    }

    let mut map = TensorMap { tensors };
    match kind {
        KIND_FULL => {
            let mut model = BranchSet::zeroed(num_classes, feature_dim, sizes);
            let mut missing = Ok(());
            model.visit_params_mut(&mut |name, slot| {
                if missing.is_err() {
                    return;
                }
                missing = map.fill(&name, slot);
            });
            missing?;
            let mut uncertainty = UncertaintyModule::zeroed(num_classes);
            let mut missing = Ok(());
            uncertainty.visit_params_mut(&mut |name, slot| {
                if missing.is_err() {
                    return;
                }
                missing = map.fill(&name, slot);
            });
            missing?;
            Ok(Checkpoint::Full { model, uncertainty })
        }
        KIND_STRIPPED => {
            let full = BranchSet::zeroed(num_classes, feature_dim, sizes);
            let mut deploy = DeployModel {
                num_classes,
                feature_dim,
                sizes,
                trunk: full.trunk,
                target: full.target,
            };
            let mut missing = Ok(());
            let mut fill = |name: String, slot: &mut Tensor| {
                if missing.is_err() {
                    return;
                }
                missing = map.fill(&name, slot);
            };
            fill("trunk.w".into(), &mut deploy.trunk.w);
            fill("trunk.b".into(), &mut deploy.trunk.b);
            fill("target.hidden.w".into(), &mut deploy.target.hidden.w);
            fill("target.hidden.b".into(), &mut deploy.target.hidden.b);
            fill("target.out.w".into(), &mut deploy.target.out.w);
            fill("target.out.b".into(), &mut deploy.target.out.b);
            missing?;
            Ok(Checkpoint::Stripped(deploy))
        }
        other => Err(CheckpointError::UnknownKind(other)),
    }
}

struct TensorMap {
    tensors: Vec<(String, Tensor)>,
}

impl TensorMap {
    /// Moves the named tensor into `slot`, validating its shape against the
    /// slot's (which carries the expected architecture dimensions).
    fn fill(&mut self, name: &str, slot: &mut Tensor) -> Result<(), CheckpointError> {
        let idx = self
            .tensors
            .iter()
            .position(|(n, _)| n == name)
            .ok_or_else(|| missing_error(name))?;
        let (_, tensor) = self.tensors.swap_remove(idx);
        if tensor.shape() != slot.shape() {
            return Err(CheckpointError::ShapeMismatch {
                name: name.to_string(),
                expected: slot.shape(),
                found: tensor.shape(),
            });
        }
        *slot = tensor;
        Ok(())
    }
}

fn missing_error(name: &str) -> CheckpointError {
    if name.starts_with("aux") || name.starts_with("uncertainty") {
        CheckpointError::MissingAuxiliary
    } else {
        CheckpointError::MissingTensor(name.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{self, streams};

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dmue-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        dir
    }

    fn test_model(seed: u64) -> (BranchSet, UncertaintyModule) {
        let mut r = rng::stream(seed, streams::INIT);
        let model = BranchSet::init(4, 6, LayerSizes::default(), &mut r);
        let um = UncertaintyModule::init(4, &mut r);
        (model, um)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (model, um) = test_model(1);
        let dir = tmpdir();
        let p1 = dir.join("a.ckpt");
        let p2 = dir.join("b.ckpt");
        save_full(&model, &um, &p1).unwrap();
        let (loaded, loaded_um) = load_full(&p1).unwrap();
        assert_eq!(model, loaded);
        assert_eq!(um, loaded_um);
        save_full(&loaded, &loaded_um, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn stripped_checkpoint_is_smaller_and_loads_as_deploy() {
        let (model, um) = test_model(2);
        let dir = tmpdir();
        let full_path = dir.join("full.ckpt");
        let stripped_path = dir.join("stripped.ckpt");
        save_full(&model, &um, &full_path).unwrap();
        save_stripped(&strip_for_deployment(&model), &stripped_path).unwrap();
        let full_len = std::fs::metadata(&full_path).unwrap().len();
        let stripped_len = std::fs::metadata(&stripped_path).unwrap().len();
        assert!(stripped_len < full_len, "{stripped_len} !< {full_len}");

        let deploy = match load(&stripped_path).unwrap() {
            Checkpoint::Stripped(d) => d,
            Checkpoint::Full { .. } => panic!("expected stripped"),
        };
        assert_eq!(deploy.trunk, model.trunk);
        assert_eq!(deploy.target, model.target);
    }

    #[test]
    fn loading_a_stripped_checkpoint_as_full_fails_loudly() {
        let (model, _) = test_model(3);
        let dir = tmpdir();
        let path = dir.join("stripped-only.ckpt");
        save_stripped(&strip_for_deployment(&model), &path).unwrap();
        assert!(matches!(load_full(&path), Err(CheckpointError::MissingAuxiliary)));
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let (model, um) = test_model(4);
        let dir = tmpdir();
        let path = dir.join("corrupt.ckpt");
        save_full(&model, &um, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::BadMagic)));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let (model, um) = test_model(5);
        let dir = tmpdir();
        let path = dir.join("short.ckpt");
        save_full(&model, &um, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::Truncated)));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let (model, um) = test_model(6);
        let dir = tmpdir();
        let path = dir.join("version.ckpt");
        save_full(&model, &um, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8..12].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load(&path), Err(CheckpointError::UnsupportedVersion(99))));
    }
}
