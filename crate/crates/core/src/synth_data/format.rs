//! Little-endian `SMDS` dataset files.
//!
//! Header: magic `SMDS`, version `u32 = 1`, count `u32`, height `u16`,
//! width `u16`, channels `u8 = 1`, families `u8 = 4`. Each record then holds
//! `sample_id u32`, `family u8`, `H·W` `f32` image values, `H·W` visible-mask
//! bytes and `H·W` amodal-mask bytes (0/1).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Dataset, GenConfig, Mask, SceneRecord, ShapeFamily};

const MAGIC: &[u8; 4] = b"SMDS";
const VERSION: u32 = 1;
const HEADER_LEN: usize = 18;

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w) = (dataset.height, dataset.width);
    if h > u16::MAX as usize || w > u16::MAX as usize {
        return Err(Error::dim("raster too large for the dataset header"));
    }
    let count = u32::try_from(dataset.records.len()).map_err(|_| Error::dim("too many records"))?;
    let hw = h * w;
    let mut buf = Vec::with_capacity(HEADER_LEN + dataset.records.len() * (5 + 6 * hw));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&count.to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    buf.push(1);
    buf.push(ShapeFamily::COUNT as u8);
    for r in &dataset.records {
        if r.height() != h || r.width() != w || r.image.len() != hw || !r.visible.same_shape(&r.amodal) {
            return Err(Error::dim(format!("record {} does not match {h}×{w}", r.sample_id)));
        }
        buf.extend_from_slice(&r.sample_id.to_le_bytes());
        buf.push(r.family as u8);
        for v in &r.image {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.extend_from_slice(r.visible.as_bytes());
        buf.extend_from_slice(r.amodal.as_bytes());
    }
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn mask(&mut self, h: usize, w: usize, what: &str) -> Result<Mask> {
        let start = self.pos;
        let bytes = self.take(h * w, what)?;
        if let Some(i) = bytes.iter().position(|&b| b > 1) {
            return Err(Error::format((start + i) as u64, format!("{what} byte is not 0/1")));
        }
        Mask::from_bytes(h, w, bytes.to_vec())
    }
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_dataset(&buf)
}

pub(crate) fn parse_dataset(buf: &[u8]) -> Result<Dataset> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad magic, expected SMDS"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let count = r.u32("count")? as usize;
    let h = r.u16("height")? as usize;
    let w = r.u16("width")? as usize;
    let channels = r.u8("channels")?;
    if channels != 1 {
        return Err(Error::format(16, format!("expected 1 channel, got {channels}")));
    }
    let families = r.u8("family count")?;
    if families as usize != ShapeFamily::COUNT {
        return Err(Error::format(17, format!("expected 4 families, got {families}")));
    }
    let hw = h * w;
    let mut records = Vec::with_capacity(count.min(buf.len() / (5 + 6 * hw).max(1)));
    for _ in 0..count {
        let sample_id = r.u32("sample id")?;
        let fam_pos = r.pos;
        let family = ShapeFamily::from_u8(r.u8("family")?)
            .ok_or_else(|| Error::format(fam_pos as u64, "unknown shape family"))?;
        let raw = r.take(4 * hw, "image")?;
        let image = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let visible = r.mask(h, w, "visible mask")?;
        let amodal = r.mask(h, w, "amodal mask")?;
        records.push(SceneRecord {
            sample_id,
            family,
            image,
            visible,
            amodal,
        });
    }
    if r.pos != buf.len() {
        return Err(Error::format(r.pos as u64, "trailing bytes after last record"));
    }
    Dataset::new(h, w, records)
}

/// Provenance sidecar written next to a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub family_histogram: [usize; ShapeFamily::COUNT],
    pub config: GenConfig,
}

/// Writes `<path>.json` describing `dataset` and the config that made it.
pub fn write_manifest(dataset: &Dataset, cfg: &GenConfig, path: impl AsRef<Path>) -> Result<PathBuf> {
    let mut out = path.as_ref().as_os_str().to_owned();
    out.push(".json");
    let out = PathBuf::from(out);
    let manifest = DatasetManifest {
        format: "SMDS".into(),
        version: VERSION,
        count: dataset.len(),
        height: dataset.height,
        width: dataset.width,
        family_histogram: dataset.family_histogram(),
        config: cfg.clone(),
    };
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&out, text + "\n").map_err(|e| Error::io(&out, e))?;
    Ok(out)
}
