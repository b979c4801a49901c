//! Block seeds, the keyed PRF and red/green partitions of the coefficient domain.
//!
//! The PRF is HMAC-SHA256 in counter mode: output block `j` for seed `s` is
//! `HMAC(key, label || s || j)`. Interval `i` takes bit `i` of the stream
//! (least significant bit of each byte first). Green is 1, red is 0.

use std::fmt;
use std::sync::{Arc, OnceLock};

use hmac::{Hmac, KeyInit, Mac};
use rand::RngCore;
use sha2::Sha256;

use crate::error::{Error, Result};
use crate::params::WatermarkParams;

type HmacSha256 = Hmac<Sha256>;

const PARTITION_LABEL: &[u8] = b"blockmark/partition/v1";
const SUBKEY_LABEL: &[u8] = b"blockmark/subkey/v1";
const SELECT_LABEL: &[u8] = b"blockmark/select/v1";

pub const MIN_KEY_LEN: usize = 16;

#[derive(Clone, PartialEq, Eq)]
pub struct SecretKey(Vec<u8>);

impl SecretKey {
    pub fn new(bytes: Vec<u8>) -> Result<Self> {
        if bytes.len() < MIN_KEY_LEN {
            return Err(Error::InvalidKey(format!(
                "key has {} bytes, need at least {MIN_KEY_LEN}",
                bytes.len()
            )));
        }
        Ok(Self(bytes))
    }

    pub fn from_hex(hex_str: &str) -> Result<Self> {
        let bytes = hex::decode(hex_str.trim()).map_err(|e| Error::InvalidKey(format!("not valid hex: {e}")))?;
        Self::new(bytes)
    }

    /// 32 bytes from the thread-local CSPRNG (ChaCha, seeded by the OS).
    pub fn generate() -> Self {
        let mut bytes = vec![0u8; 32];
        rand::rng().fill_bytes(&mut bytes);
        Self(bytes)
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.0)
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    fn mac(&self) -> HmacSha256 {
        HmacSha256::new_from_slice(&self.0).expect("HMAC accepts keys of any length")
    }

    fn derive(&self, label: &[u8], index: u64) -> SecretKey {
        let mut mac = self.mac();
        mac.update(label);
        mac.update(&index.to_le_bytes());
        SecretKey(mac.finalize().into_bytes().to_vec())
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SecretKey(<{} bytes redacted>)", self.0.len())
    }
}

/// Rounded block mean, a multiple of the rounding value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BlockSeed(pub u32);

/// Rounds `sum / count` to the nearest multiple of `round_val`, ties down,
/// clamped to the largest multiple not above 255. Exact integer arithmetic.
pub fn seed_from_sum(sum: u64, count: u64, round_val: u32) -> BlockSeed {
    assert!(count > 0, "seed of an empty block");
    let rv = u64::from(round_val);
    let lower = sum / (count * rv) * rv;
    // mean - lower <= rv / 2  <=>  2 * (sum - lower * count) <= rv * count
    let seed = if 2 * (sum - lower * count) <= rv * count {
        lower
    } else {
        lower + rv
    };
    let cap = 255 / rv * rv;
    BlockSeed(seed.min(cap) as u32)
}

pub fn get_seed(block: &[u8], round_val: u32) -> BlockSeed {
    let sum: u64 = block.iter().map(|&v| u64::from(v)).sum();
    seed_from_sum(sum, block.len() as u64, round_val)
}

fn prf_stream(key: &SecretKey, seed: BlockSeed, n_bytes: usize) -> Vec<u8> {
    let mut out = Vec::with_capacity(n_bytes + 32);
    let mut counter = 0u64;
    while out.len() < n_bytes {
        let mut mac = key.mac();
        mac.update(PARTITION_LABEL);
        mac.update(&seed.0.to_le_bytes());
        mac.update(&counter.to_le_bytes());
        out.extend_from_slice(&mac.finalize().into_bytes());
        counter += 1;
    }
    out.truncate(n_bytes);
    out
}

/// `n` pseudorandom bits for `(key, seed)`.
pub fn prf_bits(key: &SecretKey, seed: BlockSeed, n: usize) -> Vec<bool> {
    let bytes = prf_stream(key, seed, n.div_ceil(8));
    (0..n).map(|i| (bytes[i / 8] >> (i % 8)) & 1 == 1).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Color {
    Green,
    Red,
}

/// Colouring of `[-r, r)` into intervals of length `l`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Partition {
    interval_len: u32,
    range: u32,
    colors: Vec<bool>,
}

impl Partition {
    pub fn from_bits(interval_len: u32, range: u32, colors: Vec<bool>) -> Self {
        Self {
            interval_len,
            range,
            colors,
        }
    }

    pub fn new(key: &SecretKey, seed: BlockSeed, interval_len: u32, range: u32) -> Self {
        let n = (2 * range as usize).div_ceil(interval_len as usize);
        Self::from_bits(interval_len, range, prf_bits(key, seed, n))
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }

    pub fn bits(&self) -> &[bool] {
        &self.colors
    }

    pub fn green_fraction(&self) -> f64 {
        self.colors.iter().filter(|&&g| g).count() as f64 / self.colors.len().max(1) as f64
    }

    fn lower_edge(&self, index: usize) -> f64 {
        -f64::from(self.range) + index as f64 * f64::from(self.interval_len)
    }

    /// Interval index of `c`, or `None` outside `[-r, r)`.
    pub fn interval_index(&self, c: f64) -> Option<usize> {
        let r = f64::from(self.range);
        if !(c >= -r && c < r) {
            return None;
        }
        let idx = ((c + r) / f64::from(self.interval_len)).floor() as usize;
        Some(idx.min(self.colors.len() - 1))
    }

    pub fn classify(&self, c: f64) -> Color {
        match self.interval_index(c) {
            None => Color::Green,
            Some(i) if self.colors[i] => Color::Green,
            Some(_) => Color::Red,
        }
    }

    #[inline]
    pub fn is_green(&self, c: f64) -> bool {
        self.classify(c) == Color::Green
    }

    /// Centre of the nearest green interval within `max_intervals` on either
    /// side of the interval holding `c`. Ties go to the lower centre.
    pub fn nearest_green_target(&self, c: f64, max_intervals: u32) -> Option<f64> {
        let i0 = self.interval_index(c)?;
        let l = f64::from(self.interval_len);
        let reach = max_intervals as usize;
        let lo = i0.saturating_sub(reach);
        let hi = (i0 + reach).min(self.colors.len() - 1);
        let mut best: Option<(f64, usize)> = None;
        for j in lo..=hi {
            if j == i0 || !self.colors[j] {
                continue;
            }
            let edge = self.lower_edge(j);
            let dist = if j < i0 { c - (edge + l) } else { edge - c };
            if best.is_none_or(|(d, _)| dist < d) {
                best = Some((dist, j));
            }
        }
        best.map(|(_, j)| self.lower_edge(j) + l / 2.0)
    }
}

/// Keys used for embedding: a single key, or `K` sub-keys with balanced colourings.
#[derive(Debug, Clone)]
pub struct KeySet {
    master: SecretKey,
    subkeys: Vec<SecretKey>,
}

pub fn build_keyset(master: SecretKey, count: usize) -> Result<KeySet> {
    if count == 0 || (count > 1 && !count.is_multiple_of(2)) {
        return Err(Error::InvalidK(count));
    }
    let subkeys = if count == 1 {
        Vec::new()
    } else {
        (0..count as u64).map(|i| master.derive(SUBKEY_LABEL, i)).collect()
    };
    Ok(KeySet { master, subkeys })
}

impl KeySet {
    pub fn single(key: SecretKey) -> Self {
        Self {
            master: key,
            subkeys: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.subkeys.len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Key index used for block `(row, col)`.
    pub fn select(&self, row: usize, col: usize) -> usize {
        if self.subkeys.is_empty() {
            return 0;
        }
        let mut mac = self.master.mac();
        mac.update(SELECT_LABEL);
        mac.update(&(row as u64).to_le_bytes());
        mac.update(&(col as u64).to_le_bytes());
        let out = mac.finalize().into_bytes();
        let v = u64::from_le_bytes(out[..8].try_into().unwrap());
        (v % self.subkeys.len() as u64) as usize
    }

    /// One partition per key for `seed`.
    ///
    /// With several keys each interval is green for exactly half of them: key
    /// `j` draws a 64-bit PRF value per interval and the `K/2` largest values
    /// (lower key index on ties) colour that interval green.
    pub fn partitions(&self, seed: BlockSeed, interval_len: u32, range: u32) -> Vec<Partition> {
        if self.subkeys.is_empty() {
            return vec![Partition::new(&self.master, seed, interval_len, range)];
        }
        let n = (2 * range as usize).div_ceil(interval_len as usize);
        let k = self.subkeys.len();
        let draws: Vec<Vec<u8>> = self.subkeys.iter().map(|key| prf_stream(key, seed, n * 8)).collect();
        let value = |j: usize, i: usize| u64::from_le_bytes(draws[j][i * 8..i * 8 + 8].try_into().unwrap());
        let mut colors = vec![Vec::with_capacity(n); k];
        let mut order: Vec<usize> = (0..k).collect();
        for i in 0..n {
            order.sort_by(|&a, &b| value(b, i).cmp(&value(a, i)).then(a.cmp(&b)));
            let green = &order[..k / 2];
            for (j, col) in colors.iter_mut().enumerate() {
                col.push(green.contains(&j));
            }
        }
        colors
            .into_iter()
            .map(|c| Partition::from_bits(interval_len, range, c))
            .collect()
    }
}

/// Lazily built partitions for every seed value, shared across threads.
#[derive(Debug)]
pub struct PartitionTable {
    keyset: KeySet,
    interval_len: u32,
    range: u32,
    round_val: u32,
    slots: Vec<OnceLock<Arc<Vec<Partition>>>>,
}

impl PartitionTable {
    pub fn new(keyset: &KeySet, params: &WatermarkParams) -> Self {
        let slots = (0..=255 / params.round_val).map(|_| OnceLock::new()).collect();
        Self {
            keyset: keyset.clone(),
            interval_len: params.interval_len,
            range: params.range,
            round_val: params.round_val,
            slots,
        }
    }

    pub fn key_count(&self) -> usize {
        self.keyset.len()
    }

    pub fn keyset(&self) -> &KeySet {
        &self.keyset
    }

    /// Partitions for `seed`, one per key.
    pub fn get(&self, seed: BlockSeed) -> Arc<Vec<Partition>> {
        let slot = (seed.0 / self.round_val) as usize;
        self.slots[slot]
            .get_or_init(|| Arc::new(self.keyset.partitions(seed, self.interval_len, self.range)))
            .clone()
    }
}
