//! Named, versioned parameter store.
//!
//! Layout: magic bytes "PYRX1", a length-prefixed UTF-8 manifest, then raw
//! little-endian f64 payloads. The manifest carries the step counter and a
//! verbatim config echo, followed by one `param <name> <d0>x<d1>... <byte
//! offset>` line per tensor, offsets into the payload region. Round trips
//! are bit-exact. Saves are atomic (temp file + rename), so killing the
//! process mid-save never leaves a corrupt checkpoint behind.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PYRX1";

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    /// Verbatim run-config echo; empty when none was supplied.
    pub config_text: String,
    pub params: BTreeMap<String, Tensor>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

pub fn to_bytes(ck: &Checkpoint) -> Vec<u8> {
    let mut manifest = String::new();
    manifest.push_str(&format!("step {}\n", ck.step));
    manifest.push_str(&format!("config {}\n", ck.config_text.len()));
    manifest.push_str(&ck.config_text);
    let mut offset = 0usize;
    for (name, t) in &ck.params {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        let dims = if dims.is_empty() {
            "scalar".to_string()
        } else {
            dims.join("x")
        };
        manifest.push_str(&format!("param {name} {dims} {offset}\n"));
        offset += t.len() * 8;
    }
    let mut out = Vec::with_capacity(5 + 8 + manifest.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
    out.extend_from_slice(manifest.as_bytes());
    for t in ck.params.values() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad("missing PYRX1 magic"));
    }
    let mlen = u64::from_le_bytes(bytes[5..13].try_into().unwrap()) as usize;
    let manifest_end = 13usize
        .checked_add(mlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("manifest length exceeds file"))?;
    let manifest =
        std::str::from_utf8(&bytes[13..manifest_end]).map_err(|_| bad("manifest is not UTF-8"))?;
    let payload = &bytes[manifest_end..];

    let rest = manifest
        .strip_prefix("step ")
        .ok_or_else(|| bad("manifest missing step"))?;
    let (step_s, rest) = rest
        .split_once('\n')
        .ok_or_else(|| bad("manifest truncated"))?;
    let step: u64 = step_s.parse().map_err(|_| bad("bad step counter"))?;
    let rest = rest
        .strip_prefix("config ")
        .ok_or_else(|| bad("manifest missing config"))?;
    let (clen_s, rest) = rest
        .split_once('\n')
        .ok_or_else(|| bad("manifest truncated"))?;
    let clen: usize = clen_s.parse().map_err(|_| bad("bad config length"))?;
    if rest.len() < clen {
        return Err(bad("config echo truncated"));
    }
    let config_text = rest[..clen].to_string();
    let param_lines = &rest[clen..];

    let mut params = BTreeMap::new();
    for line in param_lines.lines() {
        if line.is_empty() {
            continue;
        }
        let mut parts = line.split(' ');
        let (tag, name, dims_s, off_s) =
            match (parts.next(), parts.next(), parts.next(), parts.next()) {
                (Some(a), Some(b), Some(c), Some(d)) => (a, b, c, d),
                _ => return Err(bad(format!("bad manifest line: {line}"))),
            };
        if tag != "param" {
            return Err(bad(format!("unexpected manifest tag {tag}")));
        }
        let shape: Vec<usize> = if dims_s == "scalar" {
            vec![]
        } else {
            dims_s
                .split('x')
                .map(|d| d.parse().map_err(|_| bad(format!("bad shape {dims_s}"))))
                .collect::<Result<_>>()?
        };
        let offset: usize = off_s.parse().map_err(|_| bad("bad offset"))?;
        let count: usize = shape.iter().product::<usize>().max(1);
        let end = offset
            .checked_add(count * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| bad(format!("payload truncated at parameter {name}")))?;
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        params.insert(name.to_string(), Tensor::new(shape, data)?);
    }
    Ok(Checkpoint {
        step,
        config_text,
        params,
    })
}

/// Atomic save: write a temp file in the same directory, then rename over
/// the destination.
pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    let bytes = to_bytes(ck);
    let tmp = path.with_extension(format!("tmp.{}", std::process::id()));
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn sample_checkpoint() -> Checkpoint {
        let mut params = BTreeMap::new();
        params.insert(
            "a.kernel".into(),
            Tensor::new(
                vec![2, 3],
                (0..6).map(|i| rng::stream_uniform(1, &[i], 2.0)).collect(),
            )
            .unwrap(),
        );
        params.insert(
            "b.bias".into(),
            Tensor::new(vec![2], vec![-0.0, 1.5e-310]).unwrap(),
        );
        Checkpoint {
            step: 1234,
            config_text: "[model]\nlevels=4\n".into(),
            params,
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample_checkpoint();
        let back = from_bytes(&to_bytes(&ck)).unwrap();
        assert_eq!(back.step, 1234);
        assert_eq!(back.config_text, ck.config_text);
        assert_eq!(back.params.len(), ck.params.len());
        for (name, t) in &ck.params {
            assert!(back.params[name].bits_eq(t), "{name}");
        }
    }

    #[test]
    fn corrupt_inputs_are_rejected() {
        let good = to_bytes(&sample_checkpoint());
        assert!(from_bytes(b"PYRX0junk").is_err(), "bad magic");
        assert!(
            from_bytes(&good[..good.len() - 4]).is_err(),
            "truncated payload"
        );
        assert!(from_bytes(&good[..20]).is_err(), "truncated manifest");
    }

    #[test]
    fn save_is_atomic_and_loadable() {
        let dir = std::env::temp_dir().join(format!("pyrpix_ck_test_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ck");
        let ck = sample_checkpoint();
        save(&path, &ck).unwrap();
        // No temp droppings left behind.
        let leftovers: Vec<_> = std::fs::read_dir(&dir)
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.path() != path)
            .collect();
        assert!(leftovers.is_empty());
        let back = load(&path).unwrap();
        assert_eq!(back.step, ck.step);
        // Overwrite keeps the file loadable.
        save(&path, &Checkpoint { step: 5678, ..ck }).unwrap();
        assert_eq!(load(&path).unwrap().step, 5678);
        std::fs::remove_dir_all(&dir).ok();
    }
}
