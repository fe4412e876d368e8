//! Model checkpoints: config JSON plus named `f32` arrays.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ratplus_core::container::Container;
use ratplus_core::{Error, Result};

use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RMX1";

pub fn write_checkpoint<W: Write>(model: &Model, w: &mut W) -> Result<()> {
    let meta = serde_json::to_string(&model.config).map_err(|e| Error::Format(e.to_string()))?;
    let mut c = Container::new(meta);
    for (name, a) in model.tensors() {
        c.push(name, a.clone());
    }
    c.write_to(w, CHECKPOINT_MAGIC)
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Model> {
    let c = Container::read_from(r, CHECKPOINT_MAGIC)?;
    let config: ModelConfig = serde_json::from_str(&c.meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut model = Model::init(config, 0)?;
    for (name, slot) in model.tensors_mut() {
        let a = c.get(&name)?;
        if a.shape() != slot.shape() {
            return Err(Error::Format(format!("{name}: shape {:?}, expected {:?}", a.shape(), slot.shape())));
        }
        *slot = a.clone();
    }
    if c.arrays.len() != model.tensors().len() {
        return Err(Error::Format("checkpoint holds unexpected arrays".into()));
    }
    Ok(model)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::forward_lm;

    #[test]
    fn roundtrip_through_file() {
        let m = Model::init(ModelConfig::small(13, 8, 2, 2, 16), 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.rmx");
        save_checkpoint(&m, &path).unwrap();
        let back = load_checkpoint(&path).unwrap();
        assert_eq!(back.config, m.config);
        for ((n, a), (_, b)) in m.tensors().into_iter().zip(back.tensors()) {
            assert!(a.max_abs_diff(b) < 1e-6, "{n}");
        }
        let (x, y) = (forward_lm(&m, &[1, 2, 3]).unwrap(), forward_lm(&back, &[1, 2, 3]).unwrap());
        assert!(x.max_abs_diff(&y) < 1e-5);

        let mut bytes = std::fs::read(&path).unwrap();
        bytes[3] = b'2';
        assert!(read_checkpoint(&mut bytes.as_slice()).is_err());
    }
}
