//! Binary model and checkpoint files.
//!
//! Layout, all integers `u32` little-endian:
//!
//! ```text
//! "ACAE" version d h d_ff
//! repeated until EOF: name_len name(utf-8) rows cols rows*cols f32-le values
//! ```
//!
//! A checkpoint is a model file followed by `bank/...` and `oim/...` blocks in the
//! same format. Integers that must survive exactly (image ids, pair links) travel in
//! block names; labels and the queue capacity are stored as `f32` and range-checked.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::bank::{BankEntry, ImageMemoryBank};
use crate::error::{Error, Result};
use crate::head::{AcaeParams, HeadConfig};
use crate::oim::OimState;
use crate::tensor::Matrix;

pub const MAGIC: &[u8; 4] = b"ACAE";
pub const VERSION: u32 = 1;
const FLAGS: &str = "config.flags";
/// Largest integer every `f32` represents exactly.
const F32_EXACT: u64 = 1 << 24;

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl Block {
    fn from_f64(name: impl Into<String>, rows: usize, cols: usize, data: &[f64]) -> Self {
        Self {
            name: name.into(),
            rows,
            cols,
            data: data.iter().map(|&v| v as f32).collect(),
        }
    }

    fn matrix(&self) -> Matrix {
        Matrix::new(
            self.rows,
            self.cols,
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("block length checked on read")
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

fn write_u32<W: Write>(w: &mut W, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| fmt_err(format!("{v} does not fit in u32")))?;
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

/// Reads a `u32`, or `None` on a clean EOF before the first byte.
fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<Option<u32>> {
    let mut buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        let n = r.read(&mut buf[got..])?;
        if n == 0 {
            return if got == 0 {
                Ok(None)
            } else {
                Err(fmt_err(format!("truncated while reading {what}")))
            };
        }
        got += n;
    }
    Ok(Some(u32::from_le_bytes(buf)))
}

fn need_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    read_u32(r, what)?.ok_or_else(|| fmt_err(format!("truncated before {what}")))
}

pub fn write_file<W: Write>(w: &mut W, config: &HeadConfig, blocks: &[Block]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(w, VERSION as usize)?;
    write_u32(w, config.dim)?;
    write_u32(w, config.heads)?;
    write_u32(w, config.ff_dim)?;
    for b in blocks {
        if b.data.len() != b.rows * b.cols {
            return Err(fmt_err(format!("block {} has inconsistent length", b.name)));
        }
        write_u32(w, b.name.len())?;
        w.write_all(b.name.as_bytes())?;
        write_u32(w, b.rows)?;
        write_u32(w, b.cols)?;
        let mut bytes = Vec::with_capacity(b.data.len() * 4);
        for v in &b.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

/// Header dims `(d, h, d_ff)` and every block in file order.
pub fn read_file<R: Read>(r: &mut R) -> Result<((usize, usize, usize), Vec<Block>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| fmt_err("file too short for magic"))?;
    if &magic != MAGIC {
        return Err(fmt_err("bad magic, not an ACAE model file"));
    }
    let version = need_u32(r, "version")?;
    if version != VERSION {
        return Err(fmt_err(format!("unsupported version {version}")));
    }
    let d = need_u32(r, "dim")? as usize;
    let h = need_u32(r, "heads")? as usize;
    let ff = need_u32(r, "ff_dim")? as usize;
    let mut blocks = Vec::new();
    while let Some(len) = read_u32(r, "block name length")? {
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)
            .map_err(|_| fmt_err("truncated block name"))?;
        let name = String::from_utf8(name).map_err(|_| fmt_err("block name is not utf-8"))?;
        let rows = need_u32(r, "block rows")? as usize;
        let cols = need_u32(r, "block cols")? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| fmt_err(format!("block {name} too large")))?;
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)
            .map_err(|_| fmt_err(format!("truncated data in block {name}")))?;
        let data = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(Block {
            name,
            rows,
            cols,
            data,
        });
    }
    Ok(((d, h, ff), blocks))
}

pub fn model_blocks(params: &AcaeParams) -> Vec<Block> {
    let c = &params.config;
    let mut out = vec![Block::from_f64(
        FLAGS,
        1,
        3,
        &[
            c.scaled_logits as u8 as f64,
            c.share_projections as u8 as f64,
            c.ln_eps,
        ],
    )];
    out.extend(
        params
            .blocks()
            .into_iter()
            .map(|b| Block::from_f64(b.name, b.rows, b.cols, b.data)),
    );
    out
}

/// Rebuilds parameters from blocks, ignoring `bank/` and `oim/` sections.
pub fn params_from_blocks(dims: (usize, usize, usize), blocks: &[Block]) -> Result<AcaeParams> {
    let (d, h, ff) = dims;
    let flags = blocks
        .iter()
        .find(|b| b.name == FLAGS)
        .ok_or_else(|| fmt_err("missing config.flags block"))?;
    if flags.data.len() != 3 {
        return Err(fmt_err("config.flags must hold three values"));
    }
    let config = HeadConfig {
        dim: d,
        heads: h,
        ff_dim: ff,
        scaled_logits: flags.data[0] != 0.0,
        share_projections: flags.data[1] != 0.0,
        ln_eps: flags.data[2] as f64,
    };
    config
        .validate()
        .map_err(|e| fmt_err(format!("inconsistent header: {e}")))?;
    let mut params = AcaeParams::zeros(config);
    let mut by_name: BTreeMap<&str, &Block> = BTreeMap::new();
    for b in blocks {
        if b.name == FLAGS || b.name.starts_with("bank/") || b.name.starts_with("oim/") {
            continue;
        }
        if by_name.insert(b.name.as_str(), b).is_some() {
            return Err(fmt_err(format!("duplicate block {}", b.name)));
        }
    }
    let mut expected = 0;
    for dst in params.blocks_mut() {
        expected += 1;
        let src = by_name
            .get(dst.name.as_str())
            .ok_or_else(|| fmt_err(format!("missing block {}", dst.name)))?;
        if (src.rows, src.cols) != (dst.rows, dst.cols) {
            return Err(fmt_err(format!(
                "block {} is {}x{}, header implies {}x{}",
                dst.name, src.rows, src.cols, dst.rows, dst.cols
            )));
        }
        for (a, b) in dst.data.iter_mut().zip(&src.data) {
            *a = *b as f64;
        }
    }
    if by_name.len() != expected {
        let known: Vec<String> = params.blocks().into_iter().map(|b| b.name).collect();
        let extra = by_name
            .keys()
            .find(|k| !known.iter().any(|n| n == *k))
            .map(|k| k.to_string())
            .unwrap_or_default();
        return Err(fmt_err(format!("unknown block {extra}")));
    }
    if !params.is_finite() {
        return Err(Error::NonFinite("model file"));
    }
    Ok(params)
}

pub fn save_model(path: &Path, params: &AcaeParams) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_file(&mut w, &params.config, &model_blocks(params))?;
    w.flush()?;
    Ok(())
}

/// Also accepts a checkpoint and returns just its parameters.
pub fn load_model(path: &Path) -> Result<AcaeParams> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, blocks) = read_file(&mut r)?;
    params_from_blocks(dims, &blocks)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: AcaeParams,
    pub bank: ImageMemoryBank,
    pub oim: OimState,
}

fn exact_int(v: u64, what: &str) -> Result<f64> {
    if v > F32_EXACT {
        return Err(fmt_err(format!("{what} {v} too large for f32 storage")));
    }
    Ok(v as f64)
}

pub fn checkpoint_blocks(ck: &Checkpoint) -> Result<Vec<Block>> {
    let mut out = model_blocks(&ck.params);
    let d = ck.bank.dim();
    for (id, truth) in ck.bank.truth() {
        let labels: Vec<f64> = truth
            .iter()
            .map(|&l| exact_int(l as u64, "label"))
            .collect::<Result<_>>()?;
        out.push(Block::from_f64(
            format!("bank/{id}/labels"),
            1,
            labels.len(),
            &labels,
        ));
        if let Some(p) = ck.bank.pair_of(*id) {
            out.push(Block::from_f64(format!("bank/{id}/pair/{p}"), 0, 0, &[]));
        }
        if let Some(e) = ck.bank.entries().get(id) {
            out.push(Block::from_f64(
                format!("bank/{id}/labeled"),
                e.labeled.rows(),
                d,
                e.labeled.data(),
            ));
            out.push(Block::from_f64(
                format!("bank/{id}/unlabeled"),
                e.unlabeled.rows(),
                d,
                e.unlabeled.data(),
            ));
        }
    }
    let lut = ck.oim.lut();
    out.push(Block::from_f64("oim/lut", lut.rows(), lut.cols(), lut.data()));
    let queue: Vec<f64> = ck.oim.queue().flatten().copied().collect();
    out.push(Block::from_f64(
        "oim/queue",
        ck.oim.queue().len(),
        ck.oim.dim(),
        &queue,
    ));
    out.push(Block::from_f64(
        "oim/params",
        1,
        3,
        &[
            ck.oim.temperature,
            ck.oim.momentum,
            exact_int(ck.oim.capacity() as u64, "queue capacity")?,
        ],
    ));
    Ok(out)
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let blocks = checkpoint_blocks(ck)?;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_file(&mut w, &ck.params.config, &blocks)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (dims, blocks) = read_file(&mut r)?;
    checkpoint_from_blocks(dims, &blocks)
}

pub fn checkpoint_from_blocks(dims: (usize, usize, usize), blocks: &[Block]) -> Result<Checkpoint> {
    let params = params_from_blocks(dims, blocks)?;
    let d = dims.0;
    let mut truth: BTreeMap<u64, Vec<u32>> = BTreeMap::new();
    let mut pairs = BTreeMap::new();
    let mut labeled: BTreeMap<u64, Matrix> = BTreeMap::new();
    let mut unlabeled: BTreeMap<u64, Matrix> = BTreeMap::new();
    let (mut lut, mut queue, mut oim_params) = (None, None, None);
    for b in blocks {
        if let Some(rest) = b.name.strip_prefix("bank/") {
            let parts: Vec<&str> = rest.split('/').collect();
            let id: u64 = parts[0]
                .parse()
                .map_err(|_| fmt_err(format!("bad image id in {}", b.name)))?;
            let check_dim = || {
                if b.cols != d && b.rows > 0 {
                    Err(fmt_err(format!("{} has {} columns, model has {d}", b.name, b.cols)))
                } else {
                    Ok(())
                }
            };
            match parts.get(1..) {
                Some(["labels"]) => {
                    truth.insert(id, b.data.iter().map(|&v| v as u32).collect());
                }
                Some(["pair", p]) => {
                    let p: u64 = p
                        .parse()
                        .map_err(|_| fmt_err(format!("bad pair id in {}", b.name)))?;
                    pairs.insert(id, p);
                }
                Some(["labeled"]) => {
                    check_dim()?;
                    labeled.insert(id, Matrix::new(b.rows, d, b.matrix().into_data())?);
                }
                Some(["unlabeled"]) => {
                    check_dim()?;
                    unlabeled.insert(id, Matrix::new(b.rows, d, b.matrix().into_data())?);
                }
                _ => return Err(fmt_err(format!("unknown block {}", b.name))),
            }
        } else if let Some(rest) = b.name.strip_prefix("oim/") {
            match rest {
                "lut" => lut = Some(b.matrix()),
                "queue" => queue = Some(b.matrix()),
                "params" => oim_params = Some(b.data.clone()),
                _ => return Err(fmt_err(format!("unknown block {}", b.name))),
            }
        }
    }
    let mut entries = BTreeMap::new();
    for (id, l) in labeled {
        let labels = truth
            .get(&id)
            .ok_or_else(|| fmt_err(format!("bank entry {id} without labels")))?
            .clone();
        if labels.len() != l.rows() {
            return Err(Error::BankRowCount {
                image: id,
                expected: labels.len(),
                got: l.rows(),
            });
        }
        let u = unlabeled
            .remove(&id)
            .unwrap_or_else(|| Matrix::zeros(0, d));
        entries.insert(
            id,
            BankEntry {
                labeled: l,
                labels,
                unlabeled: u,
            },
        );
    }
    let bank = ImageMemoryBank::restore(d, truth, entries, pairs);
    let lut = lut.ok_or_else(|| fmt_err("missing oim/lut"))?;
    if lut.cols() != d {
        return Err(fmt_err("oim/lut dimension differs from model"));
    }
    let queue = queue.unwrap_or_else(|| Matrix::zeros(0, d));
    let p = oim_params.ok_or_else(|| fmt_err("missing oim/params"))?;
    if p.len() != 3 {
        return Err(fmt_err("oim/params must hold three values"));
    }
    let oim = OimState::restore(
        lut,
        queue.iter_rows().map(|r| r.to_vec()).collect(),
        p[2] as usize,
        p[0] as f64,
        p[1] as f64,
    );
    Ok(Checkpoint { params, bank, oim })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn params() -> AcaeParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        AcaeParams::init(HeadConfig::new(8).with_heads(2), &mut rng).unwrap()
    }

    fn rounded(p: &AcaeParams) -> AcaeParams {
        let mut q = p.clone();
        for b in q.blocks_mut() {
            b.data.iter_mut().for_each(|v| *v = *v as f32 as f64);
        }
        let eps = q.config.ln_eps as f32 as f64;
        q.config.ln_eps = eps;
        for ln in [&mut q.ln_intra, &mut q.ln_inter, &mut q.ln_final] {
            ln.epsilon = eps;
        }
        q
    }

    #[test]
    fn model_roundtrip_at_f32_precision() {
        let p = params();
        let mut buf = Vec::new();
        write_file(&mut buf, &p.config, &model_blocks(&p)).unwrap();
        let (dims, blocks) = read_file(&mut &buf[..]).unwrap();
        assert_eq!(dims, (8, 2, 16));
        assert_eq!(params_from_blocks(dims, &blocks).unwrap(), rounded(&p));
    }

    #[test]
    fn loader_rejects_bad_files() {
        let p = params();
        let mut buf = Vec::new();
        write_file(&mut buf, &p.config, &model_blocks(&p)).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_file(&mut &bad[..]).is_err());

        let mut bad = buf.clone();
        bad[4] = 9;
        assert!(read_file(&mut &bad[..]).is_err());

        assert!(read_file(&mut &buf[..buf.len() - 3]).is_err());

        // header claims 4 heads and d=12: blocks no longer fit
        let mut bad = buf.clone();
        bad[8..12].copy_from_slice(&12u32.to_le_bytes());
        let (dims, blocks) = read_file(&mut &bad[..]).unwrap();
        assert!(params_from_blocks(dims, &blocks).is_err());

        // h that does not divide d
        let mut bad = buf;
        bad[12..16].copy_from_slice(&3u32.to_le_bytes());
        let (dims, blocks) = read_file(&mut &bad[..]).unwrap();
        assert!(params_from_blocks(dims, &blocks).is_err());
    }

    #[test]
    fn missing_and_unknown_blocks() {
        let p = params();
        let mut blocks = model_blocks(&p);
        blocks.pop();
        assert!(params_from_blocks((8, 2, 16), &blocks).is_err());
        let mut blocks = model_blocks(&p);
        blocks.push(Block::from_f64("mystery", 1, 1, &[0.0]));
        assert!(params_from_blocks((8, 2, 16), &blocks).is_err());
    }
}
