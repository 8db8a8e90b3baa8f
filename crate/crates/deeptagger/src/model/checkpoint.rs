//! Versioned binary checkpoints.
//!
//! Layout: 4-byte magic `DTAG`, u32 LE format version, u64 LE header
//! length, a JSON header (model config, vocabulary tokens, label
//! categories), then every weight tensor as little-endian f64 words in
//! layout order. Weight bytes round-trip exactly, so save -> load -> save
//! produces identical files.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{tensor_shapes, ModelConfig, ModelParameters};
use crate::corpus::{LabelScheme, Vocabulary};
use crate::tensor::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"DTAG";
const VERSION: u32 = 1;
/// Headers beyond this are corrupt, not large.
const MAX_HEADER_BYTES: u64 = 16 * 1024 * 1024;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vec<String>,
    categories: Vec<String>,
}

/// Everything needed to run the model after loading.
#[derive(Debug)]
pub struct Checkpoint {
    pub params: ModelParameters,
    pub vocab: Vocabulary,
    pub scheme: LabelScheme,
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &ModelParameters,
    vocab: &Vocabulary,
    scheme: &LabelScheme,
) -> Result<()> {
    let header = Header {
        config: params.config().clone(),
        vocab: vocab.tokens().to_vec(),
        categories: scheme.categories().to_vec(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for tensor in params.tensors() {
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{} is not a checkpoint (bad magic {:02x?})",
            path.display(),
            magic
        )));
    }
    let mut word = [0u8; 4];
    read_exact(&mut r, &mut word, "version")?;
    let version = u32::from_le_bytes(word);
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let mut len = [0u8; 8];
    read_exact(&mut r, &mut len, "header length")?;
    let header_len = u64::from_le_bytes(len);
    if header_len > MAX_HEADER_BYTES {
        return Err(Error::Checkpoint(format!("header length {header_len} is implausible")));
    }
    let mut header_bytes = vec![0u8; header_len as usize];
    read_exact(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

    let shapes = tensor_shapes(&header.config);
    let mut tensors = Vec::with_capacity(shapes.len());
    let mut buf = [0u8; 8];
    for shape in shapes {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            read_exact(&mut r, &mut buf, "weights")?;
            data.push(f64::from_le_bytes(buf));
        }
        tensors.push(Tensor::new(shape, data)?);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Checkpoint("trailing bytes after weights".into()));
    }

    let params = ModelParameters::from_tensors(header.config, tensors)?;
    let vocab = Vocabulary::from_token_list(header.vocab)?;
    let scheme = LabelScheme::new(header.categories)?;
    if params.config().vocab_size != vocab.len() {
        return Err(Error::Checkpoint(format!(
            "config vocab_size {} does not match stored vocabulary of {}",
            params.config().vocab_size,
            vocab.len()
        )));
    }
    if params.config().num_tag_classes != scheme.num_tags() {
        return Err(Error::Checkpoint(format!(
            "config num_tag_classes {} does not match {} label categories",
            params.config().num_tag_classes,
            scheme.categories().len()
        )));
    }
    Ok(Checkpoint { params, vocab, scheme })
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("truncated checkpoint while reading {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Mode;
    use crate::corpus::{encode_batch, QueryExample};
    use crate::tensor::Rng;

    fn setup() -> (ModelParameters, Vocabulary, LabelScheme) {
        let vocab = Vocabulary::build(["alpha", "beta", "gamma"]);
        let scheme = LabelScheme::default_synthetic();
        let config = ModelConfig {
            embed_dim: 8,
            ffn_dim: 16,
            ..ModelConfig::with_dims(vocab.len(), scheme.num_tags())
        };
        let params = ModelParameters::init(config, &mut Rng::new(42)).unwrap();
        (params, vocab, scheme)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let (params, vocab, scheme) = setup();
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&a, &params, &vocab, &scheme).unwrap();
        let loaded = load_checkpoint(&a).unwrap();
        save_checkpoint(&b, &loaded.params, &loaded.vocab, &loaded.scheme).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn loaded_model_reproduces_predictions_exactly() {
        let (params, vocab, scheme) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params, &vocab, &scheme).unwrap();
        let loaded = load_checkpoint(&path).unwrap();

        let e = QueryExample::unlabeled(
            vec!["alpha".into(), "gamma".into()],
            vec![vec!["beta".into()]],
        )
        .unwrap();
        let batch = encode_batch(&[e], 1, 64, &vocab, &scheme).unwrap();
        let probs_of = |p: &ModelParameters| {
            let mut pass = p.begin(&batch).unwrap();
            let x = pass.embed().unwrap();
            let h = pass.encode(x, &mut Mode::Eval).unwrap();
            let probs = pass.classify(h).unwrap();
            pass.value(probs).data().to_vec()
        };
        let a = probs_of(&params);
        let b = probs_of(&loaded.params);
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE rest of file").unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let (params, vocab, scheme) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params, &vocab, &scheme).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4] = 99;
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("version 99"), "{err}");
    }

    #[test]
    fn truncated_weights_are_rejected() {
        let (params, vocab, scheme) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params, &vocab, &scheme).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("truncated"), "{err}");
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let (params, vocab, scheme) = setup();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &params, &vocab, &scheme).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0u8; 3]);
        std::fs::write(&path, bytes).unwrap();
        let err = load_checkpoint(&path).unwrap_err();
        assert!(err.to_string().contains("trailing"), "{err}");
    }
}
