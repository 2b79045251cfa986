//! Binary checkpoints.
//!
//! ```text
//! magic    b"XMVITCK\0"
//! version  u32
//! config   8 x u32: image_size patch_size embed_dim heads layers
//!          mlp_hidden num_classes half_width
//! sites    u32 count, then (level u32, dim u32) per site; 0 = pruned
//! tensors  f64, backbone then alignment, store order, shapes implied
//! ```
//!
//! All integers and floats are little-endian. A text sidecar
//! `<file>.manifest.txt` lists `name shape offset` per tensor.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::{AlignConfig, AlignmentHead, CrossModalModel};
use crate::vit::{ModelConfig, ParamStore, Vit};

pub const MAGIC: &[u8; 8] = b"XMVITCK\0";
pub const VERSION: u32 = 1;

fn push_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Contract(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn stores(model: &CrossModalModel) -> Vec<&ParamStore> {
    model.stores()
}

pub fn to_bytes(model: &CrossModalModel) -> Result<Vec<u8>> {
    let c = model.config();
    let n: usize = stores(model).iter().map(|s| s.num_values()).sum();
    let mut out = Vec::with_capacity(64 + 8 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        c.image_size,
        c.patch_size,
        c.embed_dim,
        c.heads,
        c.layers,
        c.mlp_hidden,
        c.num_classes,
        c.half_width as usize,
    ] {
        push_u32(&mut out, v)?;
    }
    let sites = model.alignment.as_ref().map(|a| a.sites.as_slice()).unwrap_or(&[]);
    push_u32(&mut out, sites.len())?;
    for s in sites {
        push_u32(&mut out, s.level)?;
        push_u32(&mut out, s.dim)?;
    }
    for store in stores(model) {
        for p in store.iter() {
            for v in p.tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        if end > self.bytes.len() {
            return Err(Error::Data(format!(
                "checkpoint truncated at byte {}",
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        Ok(f64::from_le_bytes(b.try_into().expect("8 bytes")))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<CrossModalModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Data("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()? as u32;
    if version != VERSION {
        return Err(Error::Data(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let config = ModelConfig {
        image_size: r.u32()?,
        patch_size: r.u32()?,
        embed_dim: r.u32()?,
        heads: r.u32()?,
        layers: r.u32()?,
        mlp_hidden: r.u32()?,
        num_classes: r.u32()?,
        half_width: match r.u32()? {
            0 => false,
            1 => true,
            v => return Err(Error::Data(format!("bad half_width flag {v}"))),
        },
    };
    config
        .validate()
        .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
    let count = r.u32()?;
    let mut levels = Vec::with_capacity(count);
    let mut dims = Vec::with_capacity(count);
    for _ in 0..count {
        levels.push(r.u32()?);
        dims.push(r.u32()?);
    }
    if dims.windows(2).any(|w| w[0] != w[1]) {
        return Err(Error::Data(format!("alignment sites with differing widths {dims:?}")));
    }
    let backbone = Vit::zeroed(config)?;
    let alignment = if count == 0 {
        None
    } else {
        let align = AlignConfig {
            levels: levels.clone(),
            sam_dim: Some(dims[0]),
        };
        let head = AlignmentHead::new(&backbone.config, &align, None)
            .map_err(|e| Error::Data(format!("checkpoint sites: {e}")))?;
        if head.sites.iter().map(|s| s.level).collect::<Vec<_>>() != levels {
            return Err(Error::Data(format!(
                "alignment levels {levels:?} not strictly increasing"
            )));
        }
        Some(head)
    };
    let mut model = CrossModalModel { backbone, alignment };
    for store in model.stores_mut() {
        for p in store.iter_mut() {
            for v in p.tensor.data_mut() {
                *v = r.f64()?;
            }
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Data(format!(
            "{} trailing bytes after checkpoint",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

/// `name shape offset` per tensor; offsets are byte positions in the file.
pub fn manifest_text(model: &CrossModalModel) -> String {
    let sites = model.alignment.as_ref().map_or(0, |a| a.sites.len());
    let mut offset = MAGIC.len() + 4 + 8 * 4 + 4 + 8 * sites;
    let mut out = String::new();
    for store in model.stores() {
        for p in store.iter() {
            let shape: Vec<String> = p.tensor.shape().iter().map(|d| d.to_string()).collect();
            let _ = writeln!(out, "{} {} {}", p.name, shape.join("x"), offset);
            offset += 8 * p.tensor.numel();
        }
    }
    out
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".manifest.txt");
    PathBuf::from(s)
}

/// Writes the checkpoint and its sidecar manifest.
pub fn save_checkpoint(model: &CrossModalModel, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, to_bytes(model)?).map_err(|e| Error::io(path, e))?;
    let m = manifest_path(path);
    fs::write(&m, manifest_text(model)).map_err(|e| Error::io(&m, e))
}

pub fn load_checkpoint(path: &Path) -> Result<CrossModalModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}
