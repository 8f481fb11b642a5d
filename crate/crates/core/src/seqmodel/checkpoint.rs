//! Binary model container.
//!
//! ```text
//! "CTCG"            4 bytes magic
//! version           u32 (currently 1)
//! input_dim         u32
//! hidden_dim        u32
//! num_layers        u32
//! direction         u8  (0 = uni, 1 = bi)
//! output_dim        u32
//! seed              u64
//! param_count       u64
//! params            param_count × f64
//! ```
//!
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Direction, ModelConfig, SequenceModel};
use crate::binio::*;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CTCG";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(w: &mut W, model: &SequenceModel) -> std::io::Result<()> {
    let cfg = model.config();
    w.write_all(MAGIC)?;
    write_u32(w, VERSION)?;
    write_u32(w, cfg.input_dim as u32)?;
    write_u32(w, cfg.hidden_dim as u32)?;
    write_u32(w, cfg.num_layers as u32)?;
    write_u8(
        w,
        match cfg.direction {
            Direction::Unidirectional => 0,
            Direction::Bidirectional => 1,
        },
    )?;
    write_u32(w, cfg.output_dim as u32)?;
    write_u64(w, cfg.seed)?;
    write_u64(w, model.params().len() as u64)?;
    write_f64s(w, model.params())
}

/// Reads a model; `path` is only used in error messages.
pub fn read_checkpoint<R: Read>(r: &mut R, path: &Path) -> Result<SequenceModel> {
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if !expect_magic(r, MAGIC)? {
        return Err(bad("missing CTCG magic".into()));
    }
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = read_u32(r)? as usize;
    let hidden_dim = read_u32(r)? as usize;
    let num_layers = read_u32(r)? as usize;
    let direction = match read_u8(r)? {
        0 => Direction::Unidirectional,
        1 => Direction::Bidirectional,
        other => return Err(bad(format!("bad direction byte {other}"))),
    };
    let output_dim = read_u32(r)? as usize;
    let seed = read_u64(r)?;
    let config = ModelConfig {
        input_dim,
        hidden_dim,
        num_layers,
        direction,
        output_dim,
        seed,
    };
    config.validate()?;
    let count = read_u64(r)? as usize;
    if count != config.num_params() {
        return Err(bad(format!(
            "parameter count {count} does not match config ({})",
            config.num_params()
        )));
    }
    let params = read_f64s(r, count)?;
    SequenceModel::from_params(config, params)
}

pub fn save_checkpoint(model: &SequenceModel, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<SequenceModel> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint(&mut r, path)
}
