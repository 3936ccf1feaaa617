//! Calibration token batches.
//!
//! Activations are captured over a small calibration set: either token ids
//! loaded from a file or a seeded synthetic stream. Sequences are fixed
//! length so capture buffers have a uniform shape.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wire;

pub const TOKEN_FILE_MAGIC: &[u8; 4] = b"RTOK";

/// Where a calibration set came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibSource {
    File,
    Synthetic,
}

/// Fixed-shape batch of calibration sequences.
///
/// Immutable after construction; masking returns a new set.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationSet {
    sequences: Vec<Vec<u32>>,
    seq_len: usize,
    source: CalibSource,
    seed: u64,
    mask_fraction: f64,
    mask_token_id: u32,
}

impl CalibrationSet {
    pub fn sequences(&self) -> &[Vec<u32>] {
        &self.sequences
    }

    pub fn n_sequences(&self) -> usize {
        self.sequences.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    /// Total token count across all sequences.
    pub fn n_tokens(&self) -> usize {
        self.sequences.len() * self.seq_len
    }

    pub fn source(&self) -> CalibSource {
        self.source
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mask_fraction(&self) -> f64 {
        self.mask_fraction
    }

    pub fn mask_token_id(&self) -> u32 {
        self.mask_token_id
    }
}

fn chunk_ids(
    ids: Vec<u32>,
    seq_len: usize,
    vocab_size: usize,
    source: CalibSource,
) -> Result<CalibrationSet> {
    if seq_len == 0 {
        return Err(Error::Input("sequence length must be positive".into()));
    }
    if ids.is_empty() {
        return Err(Error::Input("token file contains no ids".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::Input(format!(
            "token id {bad} is out of range for vocab size {vocab_size}"
        )));
    }
    if ids.len() < seq_len {
        return Err(Error::Input(format!(
            "only {} ids available, need at least one full sequence of {seq_len}",
            ids.len()
        )));
    }
    let n_sequences = ids.len() / seq_len;
    let dropped = ids.len() - n_sequences * seq_len;
    if dropped > 0 {
        log::debug!("dropping {dropped} trailing ids that do not fill a sequence");
    }
    let sequences = ids
        .chunks_exact(seq_len)
        .map(|c| c.to_vec())
        .collect::<Vec<_>>();
    Ok(CalibrationSet {
        sequences,
        seq_len,
        source,
        seed: 0,
        mask_fraction: 0.0,
        mask_token_id: 0,
    })
}

/// Loads token ids from `path`, accepting either encoding:
/// UTF-8 integers separated by whitespace, or the binary layout
/// (magic "RTOK", count as u64, then little-endian u32 ids).
///
/// Ids are chunked into length-`seq_len` sequences in file order; a trailing
/// remainder that does not fill a sequence is dropped.
pub fn load_tokens(path: &Path, seq_len: usize, vocab_size: usize) -> Result<CalibrationSet> {
    let bytes = fs::read(path)?;
    let ids = if bytes.starts_with(TOKEN_FILE_MAGIC) {
        decode_binary_tokens(&bytes)?
    } else {
        decode_text_tokens(&bytes)?
    };
    chunk_ids(ids, seq_len, vocab_size, CalibSource::File)
}

fn decode_text_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| Error::Format("token file is neither valid UTF-8 text nor binary".into()))?;
    let mut ids = Vec::new();
    for tok in text.split_whitespace() {
        let id: u32 = tok.parse().map_err(|_| {
            Error::Format(format!("token file contains a non-integer entry: {tok:?}"))
        })?;
        ids.push(id);
    }
    Ok(ids)
}

fn decode_binary_tokens(bytes: &[u8]) -> Result<Vec<u32>> {
    let mut cur = Cursor::new(bytes);
    wire::expect_magic(&mut cur, TOKEN_FILE_MAGIC, "token file")?;
    let count = wire::read_u64(&mut cur)? as usize;
    let remaining = bytes.len().saturating_sub(12);
    if remaining != count * 4 {
        return Err(Error::Format(format!(
            "token file declares {count} ids but carries {remaining} payload bytes"
        )));
    }
    let mut ids = Vec::with_capacity(count);
    for _ in 0..count {
        ids.push(wire::read_u32(&mut cur)?);
    }
    Ok(ids)
}

/// Writes ids in the binary token layout.
pub fn write_binary_tokens(path: &Path, ids: &[u32]) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + ids.len() * 4);
    wire::write_magic(&mut buf, TOKEN_FILE_MAGIC)?;
    wire::write_u64(&mut buf, ids.len() as u64)?;
    for &id in ids {
        wire::write_u32(&mut buf, id)?;
    }
    fs::write(path, buf)?;
    Ok(())
}

/// Writes ids in the text token layout (one id per line).
pub fn write_text_tokens(path: &Path, ids: &[u32]) -> Result<()> {
    let mut out = String::with_capacity(ids.len() * 6);
    for &id in ids {
        out.push_str(&id.to_string());
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Generates `n_sequences` sequences of `seq_len` seeded uniform token ids.
pub fn synthesize(
    seed: u64,
    n_sequences: usize,
    seq_len: usize,
    vocab_size: usize,
) -> Result<CalibrationSet> {
    if n_sequences == 0 || seq_len == 0 || vocab_size == 0 {
        return Err(Error::Input(
            "synthetic calibration needs positive n_sequences, seq_len and vocab_size".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dist = Uniform::new(0, vocab_size as u32);
    let sequences = (0..n_sequences)
        .map(|_| (0..seq_len).map(|_| dist.sample(&mut rng)).collect())
        .collect();
    Ok(CalibrationSet {
        sequences,
        seq_len,
        source: CalibSource::Synthetic,
        seed,
        mask_fraction: 0.0,
        mask_token_id: 0,
    })
}

/// Replaces exactly `round(p * N)` token positions — a seeded sample without
/// replacement over all N positions — with `mask_token_id`.
///
/// `p = 0` returns the input unchanged.
pub fn apply_masking(
    set: &CalibrationSet,
    mask_fraction: f64,
    mask_token_id: u32,
    seed: u64,
) -> Result<CalibrationSet> {
    if !(0.0..=1.0).contains(&mask_fraction) || mask_fraction.is_nan() {
        return Err(Error::Input(format!(
            "mask fraction must lie in [0, 1], got {mask_fraction}"
        )));
    }
    let mut out = set.clone();
    out.mask_fraction = mask_fraction;
    out.mask_token_id = mask_token_id;
    if mask_fraction == 0.0 {
        return Ok(out);
    }
    let n = set.n_tokens();
    let n_masked = (mask_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = rand::seq::index::sample(&mut rng, n, n_masked);
    for pos in picked.iter() {
        let (s, t) = (pos / set.seq_len, pos % set.seq_len);
        out.sequences[s][t] = mask_token_id;
    }
    out.seed = seed;
    Ok(out)
}
