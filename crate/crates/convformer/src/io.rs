//! File formats: flat key=value config files, deterministic binary
//! checkpoints with a trailing checksum, PGM attention-map export, and
//! atomic text/byte writes.

use crate::csa::AttentionField;
use crate::model::{ConvFormerConfig, SegModel};
use crate::tensor::Tensor;
use crate::trainer::{AugmentRanges, DataSpec, TrainConfig};
use crate::{Error, Result};
use std::collections::HashSet;
use std::fs;
use std::path::Path;

/// Every tunable of the model, trainer, and data generator as a flat struct,
/// read from and written to `key = value` text.
#[derive(Clone, Debug, PartialEq)]
pub struct AppConfig {
    pub c: usize,
    pub c_m: usize,
    pub c_q: usize,
    pub c_h: usize,
    pub patch_size: usize,
    pub alpha: f64,
    pub heads: usize,
    pub layers: usize,
    pub num_classes: usize,
    pub height: usize,
    pub width: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// 0 means no step limit.
    pub max_steps: usize,
    pub checkpoint_every: usize,
    pub augment: bool,
    pub rot_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub fg_prob: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub noise: f64,
}

impl Default for AppConfig {
    fn default() -> AppConfig {
        let aug = AugmentRanges::default();
        let data = DataSpec::default();
        AppConfig {
            c: 1,
            c_m: 16,
            c_q: 16,
            c_h: 64,
            patch_size: 4,
            alpha: 0.8,
            heads: 2,
            layers: 2,
            num_classes: 2,
            height: 64,
            width: 64,
            epochs: 400,
            batch_size: 4,
            lr: 1e-4,
            max_steps: 0,
            checkpoint_every: 50,
            augment: true,
            rot_deg: aug.rot_deg,
            scale_min: aug.scale.0,
            scale_max: aug.scale.1,
            contrast_min: aug.contrast.0,
            contrast_max: aug.contrast.1,
            gamma_min: aug.gamma.0,
            gamma_max: aug.gamma.1,
            n_train: 32,
            n_val: 8,
            fg_prob: data.fg_prob,
            r_min: data.r_min,
            r_max: data.r_max,
            noise: data.noise,
        }
    }
}

impl AppConfig {
    pub fn model_config(&self) -> ConvFormerConfig {
        ConvFormerConfig {
            c: self.c,
            c_m: self.c_m,
            c_q: self.c_q,
            c_h: self.c_h,
            patch_size: self.patch_size,
            alpha: self.alpha,
            heads: self.heads,
            layers: self.layers,
            num_classes: self.num_classes,
            height: self.height,
            width: self.width,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            max_steps: if self.max_steps == 0 { None } else { Some(self.max_steps) },
            checkpoint_every: self.checkpoint_every,
            augment: if self.augment {
                Some(AugmentRanges {
                    rot_deg: self.rot_deg,
                    scale: (self.scale_min, self.scale_max),
                    contrast: (self.contrast_min, self.contrast_max),
                    gamma: (self.gamma_min, self.gamma_max),
                })
            } else {
                None
            },
        }
    }

    pub fn data_spec(&self) -> DataSpec {
        DataSpec {
            num_classes: self.num_classes,
            fg_prob: self.fg_prob,
            r_min: self.r_min,
            r_max: self.r_max,
            noise: self.noise,
        }
    }
}

macro_rules! config_fields {
    ($($name:ident),* $(,)?) => {
        #[cfg(test)]
        const CONFIG_KEYS: &[&str] = &[$(stringify!($name)),*];

        fn set_field(cfg: &mut AppConfig, key: &str, value: &str, line: usize) -> Result<()> {
            match key {
                $(stringify!($name) => {
                    cfg.$name = value.parse().map_err(|_| {
                        Error::Parse(format!(
                            "line {}: bad value '{}' for key '{}'",
                            line, value, key
                        ))
                    })?;
                    Ok(())
                })*
                _ => Err(Error::Parse(format!("line {}: unknown key '{}'", line, key))),
            }
        }

        pub fn serialize_config(cfg: &AppConfig) -> String {
            let mut s = String::new();
            $(s.push_str(&format!("{} = {}\n", stringify!($name), cfg.$name));)*
            s
        }
    };
}

config_fields!(
    c, c_m, c_q, c_h, patch_size, alpha, heads, layers, num_classes, height, width,
    epochs, batch_size, lr, max_steps, checkpoint_every,
    augment, rot_deg, scale_min, scale_max, contrast_min, contrast_max, gamma_min, gamma_max,
    n_train, n_val, fg_prob, r_min, r_max, noise,
);

/// Parses `key = value` lines with `#` comments; unknown and duplicate keys
/// are rejected. Unlisted keys keep their defaults.
pub fn parse_config(text: &str) -> Result<AppConfig> {
    let mut cfg = AppConfig::default();
    let mut seen: HashSet<String> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let stripped = match raw.find('#') {
            Some(p) => &raw[..p],
            None => raw,
        };
        let stripped = stripped.trim();
        if stripped.is_empty() {
            continue;
        }
        let (key, value) = stripped.split_once('=').ok_or_else(|| {
            Error::Parse(format!("line {}: expected 'key = value', got '{}'", line, stripped))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Parse(format!("line {}: duplicate key '{}'", line, key)));
        }
        set_field(&mut cfg, key, value, line)?;
    }
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<AppConfig> {
    parse_config(&fs::read_to_string(path)?)
}

/// Atomic write: the content appears at `path` completely or not at all.
pub fn write_bytes_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_text_atomic(path: &Path, text: &str) -> Result<()> {
    write_bytes_atomic(path, text.as_bytes())
}

const CKPT_MAGIC: &[u8; 4] = b"CFRM";
const CKPT_VERSION: u16 = 1;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Serializes named tensors: magic, u16 version, u32 count, per tensor
/// (u32 name length, name, u8 rank, rank x u64 extents, f64 values), all
/// little-endian, followed by an FNV-1a 64 checksum of the preceding bytes.
pub fn serialize_tensors(entries: &[(String, &Tensor)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.rank() as u8);
        for &e in t.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let checksum = fnv1a64(&out);
    out.extend_from_slice(&checksum.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated checkpoint".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn deserialize_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < CKPT_MAGIC.len() + 2 + 4 + 8 {
        return Err(Error::Checkpoint("truncated checkpoint".into()));
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    if fnv1a64(payload) != stored {
        return Err(Error::Checkpoint("checksum mismatch".into()));
    }
    let mut r = Reader { bytes: payload, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported version {} (expected {})",
            version, CKPT_VERSION
        )));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint("non-UTF-8 tensor name".into()))?;
        let rank = r.take(1)?[0] as usize;
        if rank > 4 {
            return Err(Error::Checkpoint(format!("tensor '{}' has rank {}", name, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let len: usize = shape.iter().product();
        let mut data = Vec::with_capacity(len);
        for _ in 0..len {
            data.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
        }
        out.push((name, Tensor::from_vec(&shape, data)?));
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint("trailing bytes after payload".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &mut SegModel, path: &Path) -> Result<()> {
    let entries: Vec<(String, Tensor)> = model
        .state_entries()
        .into_iter()
        .map(|(n, t)| (n, t.clone()))
        .collect();
    let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
    write_bytes_atomic(path, &serialize_tensors(&refs))
}

pub fn load_checkpoint(model: &mut SegModel, path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    model.load_state(deserialize_tensors(&bytes)?)
}

/// One 8-bit binary PGM per head showing the attention map of the given query
/// pixel, with values in [-1,1] mapped by v -> round(255*(v+1)/2).
pub fn export_attention(attn: &AttentionField, query: (usize, usize)) -> Result<Vec<Vec<u8>>> {
    let mut images = Vec::new();
    for head in &attn.heads {
        let shape = head.field.shape();
        let (qi, qj) = query;
        if qi >= shape[0] || qj >= shape[1] {
            return Err(Error::Invalid(format!(
                "query ({}, {}) out of range for {}x{} grid",
                qi, qj, shape[0], shape[1]
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let mut pgm = format!(
            "P5\n# signed attention values mapped by v -> round(255*(v+1)/2)\n{} {}\n255\n",
            w, h
        )
        .into_bytes();
        for m in 0..h {
            for n in 0..w {
                let v = head.field.at4(qi, qj, m, n);
                let px = (255.0 * (v + 1.0) / 2.0).round().clamp(0.0, 255.0) as u8;
                pgm.push(px);
            }
        }
        images.push(pgm);
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::csa::HeadField;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn config_round_trip_identity() {
        let mut cfg = AppConfig::default();
        // exotic float exercises shortest-round-trip formatting
        cfg.alpha = 0.30000000000000004;
        cfg.lr = 2.5e-4;
        cfg.max_steps = 123;
        cfg.augment = false;
        let text = serialize_config(&cfg);
        let back = parse_config(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn config_comments_whitespace_and_partial() {
        let text = "# a comment\n  lr = 0.5  # trailing\n\nheads = 4\n";
        let cfg = parse_config(text).unwrap();
        assert_eq!(cfg.lr, 0.5);
        assert_eq!(cfg.heads, 4);
        assert_eq!(cfg.epochs, AppConfig::default().epochs);
    }

    #[test]
    fn config_rejects_unknown_duplicate_and_bad_values() {
        assert!(matches!(parse_config("bogus = 1\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_config("lr = 0.1\nlr = 0.2\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_config("heads = soup\n"), Err(Error::Parse(_))));
        assert!(matches!(parse_config("just words\n"), Err(Error::Parse(_))));
    }

    #[test]
    fn config_keys_cover_every_field() {
        // serialize emits one line per field; parsing an empty text yields defaults
        let lines = serialize_config(&AppConfig::default()).lines().count();
        assert_eq!(lines, CONFIG_KEYS.len());
    }

    fn tensor_entries() -> Vec<(String, Tensor)> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        vec![
            ("a.weight".into(), Tensor::randn(&[2, 3], 1.0, &mut rng)),
            ("b".into(), Tensor::randn(&[4], 0.5, &mut rng)),
            ("c.deep".into(), Tensor::randn(&[1, 2, 2, 2], 2.0, &mut rng)),
        ]
    }

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let entries = tensor_entries();
        let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = serialize_tensors(&refs);
        let back = deserialize_tensors(&bytes).unwrap();
        assert_eq!(back, entries);
        // save -> load -> save gives identical bytes
        let refs2: Vec<(String, &Tensor)> = back.iter().map(|(n, t)| (n.clone(), t)).collect();
        assert_eq!(serialize_tensors(&refs2), bytes);
    }

    #[test]
    fn empty_tensor_list_is_a_valid_file() {
        let bytes = serialize_tensors(&[]);
        assert_eq!(deserialize_tensors(&bytes).unwrap(), vec![]);
    }

    #[test]
    fn single_byte_corruption_is_detected() {
        let entries = tensor_entries();
        let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = serialize_tensors(&refs);
        for pos in [6, 15, bytes.len() / 2, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            let err = deserialize_tensors(&bad).unwrap_err();
            assert!(
                format!("{}", err).contains("checksum"),
                "byte {}: {}",
                pos,
                err
            );
        }
    }

    #[test]
    fn truncation_and_future_version_are_distinct_errors() {
        let entries = tensor_entries();
        let refs: Vec<(String, &Tensor)> = entries.iter().map(|(n, t)| (n.clone(), t)).collect();
        let bytes = serialize_tensors(&refs);
        let err = deserialize_tensors(&bytes[..bytes.len() - 20]).unwrap_err();
        assert!(format!("{}", err).contains("checksum") || format!("{}", err).contains("truncated"));
        // rebuild with a future version and a fresh checksum
        let mut future = bytes[..bytes.len() - 8].to_vec();
        future[4] = 9;
        let sum = super::fnv1a64(&future);
        future.extend_from_slice(&sum.to_le_bytes());
        let err = deserialize_tensors(&future).unwrap_err();
        assert!(format!("{}", err).contains("version"), "{}", err);
    }

    #[test]
    fn checkpoint_file_round_trip() {
        use crate::model::{ConvFormerConfig, SegModel};
        let cfg = ConvFormerConfig {
            c: 1,
            c_m: 4,
            c_q: 4,
            c_h: 8,
            patch_size: 2,
            alpha: 0.5,
            heads: 1,
            layers: 1,
            num_classes: 2,
            height: 8,
            width: 8,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cfrm");
        let mut m = SegModel::build(&cfg, 1).unwrap();
        save_checkpoint(&mut m, &path).unwrap();
        let mut m2 = SegModel::build(&cfg, 2).unwrap();
        load_checkpoint(&mut m2, &path).unwrap();
        for ((n, a), (n2, b)) in m.state_entries().iter().zip(m2.state_entries().iter()) {
            assert_eq!(n, n2);
            assert_eq!(a, b);
        }
    }

    fn uniform_field(grid: usize, v: f64) -> AttentionField {
        let t = Tensor::filled(&[grid, grid, grid, grid], v);
        AttentionField {
            h: grid,
            w: grid,
            heads: vec![HeadField { field: t.clone(), scores: t.clone(), mask: t }],
        }
    }

    #[test]
    fn pgm_extremes_and_midpoint() {
        for (v, px) in [(1.0, 255u8), (-1.0, 0u8), (0.0, 128u8)] {
            let field = uniform_field(2, v);
            let images = export_attention(&field, (0, 0)).unwrap();
            assert_eq!(images.len(), 1);
            let img = &images[0];
            let header_end = img.len() - 4; // 2x2 payload
            assert!(img[..header_end].starts_with(b"P5\n"));
            assert!(img[header_end..].iter().all(|&b| b == px), "value {}", v);
        }
    }

    #[test]
    fn pgm_query_out_of_range() {
        let field = uniform_field(2, 0.0);
        assert!(export_attention(&field, (2, 0)).is_err());
    }
}
