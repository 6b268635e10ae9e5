//! Versioned binary checkpoints shared by both stages.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "PMILCKPT" | version u32 | model tag [u8; 4] ("smil" / "pmil")
//! C u32 | D_model u32 | hidden u32 | [pmil only: scfe mode u8]
//! block count u32 | per block: name length u16, name bytes, element count u64
//! parameters as f64, block after block
//! ```
//!
//! `D_model` is the fused width for stage 1 and the per-modality width for
//! stage 2.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::Parameters;
use crate::pmil::{PmilParams, ScfeMode};
use crate::smil::SmilParams;

pub const MAGIC: &[u8; 8] = b"PMILCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum Checkpoint {
    Smil(SmilParams),
    Pmil(PmilParams),
}

impl Checkpoint {
    pub fn tag(&self) -> &'static str {
        match self {
            Checkpoint::Smil(_) => "smil",
            Checkpoint::Pmil(_) => "pmil",
        }
    }
}

fn write_blocks<P: Parameters>(buf: &mut Vec<u8>, params: &P) {
    let blocks = params.blocks();
    buf.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for (name, values) in &blocks {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
    }
    for (_, values) in &blocks {
        for v in *values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(ckpt.tag().as_bytes());
    match ckpt {
        Checkpoint::Smil(p) => {
            buf.extend_from_slice(&(p.num_classes() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.d_model() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.attention_head.hidden() as u32).to_le_bytes());
            write_blocks(&mut buf, p);
        }
        Checkpoint::Pmil(p) => {
            buf.extend_from_slice(&(p.num_classes() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.feature_dim() as u32).to_le_bytes());
            buf.extend_from_slice(&(p.attention_head.hidden() as u32).to_le_bytes());
            buf.push(p.scfe_mode.tag());
            write_blocks(&mut buf, p);
        }
    }
    buf
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Checks the stored block table against `template` and fills it in.
fn read_blocks<P: Parameters>(r: &mut Reader<'_>, mut template: P) -> Result<P> {
    let expected: Vec<(String, usize)> = template
        .blocks()
        .into_iter()
        .map(|(n, v)| (n, v.len()))
        .collect();
    let count = r.u32()? as usize;
    if count != expected.len() {
        return Err(Error::Checkpoint(format!(
            "{count} parameter blocks, expected {}",
            expected.len()
        )));
    }
    for (name, len) in &expected {
        let n = r.u16()? as usize;
        let stored = String::from_utf8_lossy(r.take(n)?).into_owned();
        let stored_len = r.u64()?;
        if &stored != name || stored_len != *len as u64 {
            return Err(Error::Checkpoint(format!(
                "block `{stored}` ({stored_len} values) does not match `{name}` ({len} values)"
            )));
        }
    }
    for block in template.blocks_mut() {
        for v in block.iter_mut() {
            *v = f64::from_le_bytes(r.take(8)?.try_into().expect("8 bytes"));
        }
    }
    if r.pos != r.bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(template)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "checkpoint version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let tag = r.take(4)?.to_vec();
    let num_classes = r.u32()? as usize;
    let d_model = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    if num_classes == 0 || d_model == 0 || hidden == 0 {
        return Err(Error::Checkpoint("zero dimension in checkpoint header".into()));
    }
    match tag.as_slice() {
        b"smil" => {
            let p = read_blocks(&mut r, SmilParams::zeros(d_model, hidden, num_classes))?;
            Ok(Checkpoint::Smil(p))
        }
        b"pmil" => {
            let mode_tag = r.u8()?;
            let mode = ScfeMode::from_tag(mode_tag)
                .ok_or_else(|| Error::Checkpoint(format!("unknown feature mode tag {mode_tag}")))?;
            let p = read_blocks(&mut r, PmilParams::zeros(d_model, hidden, num_classes, mode))?;
            Ok(Checkpoint::Pmil(p))
        }
        other => Err(Error::Checkpoint(format!(
            "unknown model tag `{}`",
            String::from_utf8_lossy(other)
        ))),
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, encode_checkpoint(ckpt))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("cannot read {}: {e}", path.display())))?;
    decode_checkpoint(&bytes)
}

pub fn load_smil(path: impl AsRef<Path>) -> Result<SmilParams> {
    match load_checkpoint(path)? {
        Checkpoint::Smil(p) => Ok(p),
        Checkpoint::Pmil(_) => Err(Error::Checkpoint("expected a stage-1 checkpoint, found stage 2".into())),
    }
}

pub fn load_pmil(path: impl AsRef<Path>) -> Result<PmilParams> {
    match load_checkpoint(path)? {
        Checkpoint::Pmil(p) => Ok(p),
        Checkpoint::Smil(_) => Err(Error::Checkpoint("expected a stage-2 checkpoint, found stage 1".into())),
    }
}
