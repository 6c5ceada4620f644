//! Parameter checkpoint format shared by all trainable modules: one text
//! header line carrying the model dimensions and the tensor names with their
//! shapes, followed by a flat little-endian f64 stream in header order.
//! Writes are atomic (temp file + rename).

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::kernel::Tensor;
use crate::model::{Model, ModelDims};
use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "xmh-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|e| e.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn header_line(model: &Model) -> String {
    let d = &model.dims;
    let mut line = format!(
        "{} v{} img_h={} img_w={} img_c={} patch={} feat_c={} vocab={} txt_hidden={} txt_dim={} hash_hidden={} q={} tensors",
        CHECKPOINT_MAGIC,
        CHECKPOINT_VERSION,
        d.img_h,
        d.img_w,
        d.img_c,
        d.patch,
        d.feat_c,
        d.vocab,
        d.txt_hidden,
        d.txt_dim,
        d.hash_hidden,
        d.q
    );
    for (name, p) in model.params() {
        line.push_str(&format!(" {}:{}", name, shape_str(p.value.shape())));
    }
    line.push('\n');
    line
}

/// Saves model parameters atomically.
pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut bytes = header_line(model).into_bytes();
    for (_, p) in model.params() {
        for v in p.value.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Loads a checkpoint, reconstructing the model from the header dimensions.
pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path)?;
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| fmt_err(path, "missing header line"))?;
    let header = std::str::from_utf8(&bytes[..nl])
        .map_err(|_| fmt_err(path, "header is not valid UTF-8"))?;
    let mut tokens = header.split_whitespace();

    let magic = tokens.next().unwrap_or_default();
    if magic != CHECKPOINT_MAGIC {
        return Err(fmt_err(path, format!("bad magic {:?}", magic)));
    }
    let version = tokens.next().unwrap_or_default();
    if version != format!("v{}", CHECKPOINT_VERSION) {
        return Err(fmt_err(
            path,
            format!("unsupported checkpoint version {:?}", version),
        ));
    }

    let mut dims_kv = std::collections::HashMap::new();
    let mut saw_tensors = false;
    let mut tensor_entries: Vec<(String, Vec<usize>)> = Vec::new();
    for tok in tokens {
        if tok == "tensors" {
            saw_tensors = true;
            continue;
        }
        if !saw_tensors {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| fmt_err(path, format!("bad header token {:?}", tok)))?;
            let v: usize = v
                .parse()
                .map_err(|_| fmt_err(path, format!("bad value for {:?}", k)))?;
            dims_kv.insert(k.to_string(), v);
        } else {
            let (name, shape) = tok
                .split_once(':')
                .ok_or_else(|| fmt_err(path, format!("bad tensor entry {:?}", tok)))?;
            let shape: Vec<usize> = shape
                .split('x')
                .map(|e| {
                    e.parse()
                        .map_err(|_| fmt_err(path, format!("bad shape in {:?}", tok)))
                })
                .collect::<Result<_>>()?;
            tensor_entries.push((name.to_string(), shape));
        }
    }

    let dim = |key: &str| -> Result<usize> {
        dims_kv
            .get(key)
            .copied()
            .ok_or_else(|| fmt_err(path, format!("missing dimension {:?}", key)))
    };
    let dims = ModelDims {
        img_h: dim("img_h")?,
        img_w: dim("img_w")?,
        img_c: dim("img_c")?,
        patch: dim("patch")?,
        feat_c: dim("feat_c")?,
        vocab: dim("vocab")?,
        txt_hidden: dim("txt_hidden")?,
        txt_dim: dim("txt_dim")?,
        hash_hidden: dim("hash_hidden")?,
        q: dim("q")?,
    };

    let mut model = Model::init(dims, 0).map_err(|e| match e {
        Error::Config(msg) => fmt_err(path, format!("invalid dimensions: {}", msg)),
        other => other,
    })?;

    let expected_names = Model::param_names();
    if tensor_entries.len() != expected_names.len() {
        return Err(fmt_err(
            path,
            format!(
                "expected {} tensors, header lists {}",
                expected_names.len(),
                tensor_entries.len()
            ),
        ));
    }

    let mut offset = nl + 1;
    for ((name, shape), (expect_name, param)) in tensor_entries.iter().zip(model.params_mut()) {
        if name != expect_name {
            return Err(fmt_err(
                path,
                format!(
                    "tensor {:?} out of order (expected {:?})",
                    name, expect_name
                ),
            ));
        }
        if shape.as_slice() != param.value.shape() {
            return Err(fmt_err(
                path,
                format!(
                    "tensor {} shape {:?} does not match model shape {:?}",
                    name,
                    shape,
                    param.value.shape()
                ),
            ));
        }
        let count = param.value.len();
        let end = offset + count * 8;
        if end > bytes.len() {
            return Err(fmt_err(path, "truncated parameter stream"));
        }
        for (i, chunk) in bytes[offset..end].chunks_exact(8).enumerate() {
            let mut arr = [0u8; 8];
            arr.copy_from_slice(chunk);
            param.value.data_mut()[i] = f64::from_le_bytes(arr);
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(fmt_err(path, "trailing bytes after parameter stream"));
    }
    for (_, p) in model.params_mut() {
        if !p.value.all_finite() {
            return Err(fmt_err(path, "non-finite parameter values"));
        }
    }
    Ok(model)
}

/// The q value stored in a checkpoint header, without loading the tensors.
pub fn peek_q(path: &Path) -> Result<usize> {
    let model = load_model(path)?;
    Ok(model.dims.q)
}

/// Convenience accessor used by tests: flattens every parameter value in
/// checkpoint order.
pub fn flat_params(model: &Model) -> Tensor {
    let mut all = Vec::new();
    for (_, p) in model.params() {
        all.extend_from_slice(p.value.data());
    }
    let n = all.len();
    Tensor::from_vec(&[n], all)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            img_h: 8,
            img_w: 8,
            img_c: 1,
            patch: 2,
            feat_c: 4,
            vocab: 16,
            txt_hidden: 8,
            txt_dim: 6,
            hash_hidden: 10,
            q: 8,
        }
    }

    #[test]
    fn round_trip_is_bitwise_identity() {
        let model = Model::init(dims(), 77).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back.dims, model.dims);
        assert_eq!(flat_params(&model).data(), flat_params(&back).data());
    }

    #[test]
    fn truncated_stream_is_format_error() {
        let model = Model::init(dims(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn bad_magic_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        std::fs::write(&path, "nonsense v1 tensors\n").unwrap();
        assert!(matches!(load_model(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn peek_q_reads_header() {
        let model = Model::init(dims(), 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_model(&model, &path).unwrap();
        assert_eq!(peek_q(&path).unwrap(), 8);
    }
}
