//! Named-tensor archive: a plain-text header describing every tensor
//! followed by raw little-endian float64 payloads.
//!
//! ```text
//! tensor-archive v1
//! count 2
//! backbone.stem.weight f64 16x3x3x3 0
//! backbone.stem.bias f64 16 3456
//! end
//! <payload bytes>
//! ```
//!
//! Offsets are bytes from the start of the payload section (the byte after
//! the `end` line). Values survive a save/load cycle bit-exactly.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &str = "tensor-archive v1";

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | '-'))
}

/// Serialize `(name, tensor)` pairs. Names must be unique, non-empty, and
/// restricted to `[A-Za-z0-9_.-]`; rank-0 tensors are rejected (store them
/// as `[1]`).
pub fn save_tensors(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    header.push_str(&format!("count {}\n", entries.len()));
    let mut offset = 0usize;
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        if !valid_name(name) {
            return Err(Error::Archive(format!("invalid tensor name {name:?}")));
        }
        if !seen.insert(name.as_str()) {
            return Err(Error::Archive(format!("duplicate tensor name {name:?}")));
        }
        if t.ndim() == 0 {
            return Err(Error::Archive(format!("rank-0 tensor {name:?} not supported")));
        }
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        header.push_str(&format!("{name} f64 {} {offset}\n", dims.join("x")));
        offset += 8 * t.len();
    }
    header.push_str("end\n");

    let mut payload = Vec::with_capacity(offset);
    for (_, t) in entries {
        for v in t.data().iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut file = fs::File::create(path)?;
    file.write_all(header.as_bytes())?;
    file.write_all(&payload)?;
    file.flush()?;
    Ok(())
}

/// Read an archive back as constant tensors, in header order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let mut pos = 0usize;
    let mut line = || -> Result<&str> {
        let rest = &bytes[pos..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Archive("truncated header".into()))?;
        let s = std::str::from_utf8(&rest[..nl])
            .map_err(|_| Error::Archive("header is not UTF-8".into()))?;
        pos += nl + 1;
        Ok(s)
    };

    if line()? != MAGIC {
        return Err(Error::Archive("not a tensor archive (bad magic)".into()));
    }
    let count_line = line()?;
    let count: usize = count_line
        .strip_prefix("count ")
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::Archive(format!("bad count line {count_line:?}")))?;

    struct Entry {
        name: String,
        shape: Vec<usize>,
        offset: usize,
    }
    let mut entries = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let l = line()?;
        let fields: Vec<&str> = l.split(' ').collect();
        let [name, dtype, dims, offset] = fields[..] else {
            return Err(Error::Archive(format!("malformed entry line {l:?}")));
        };
        if dtype != "f64" {
            return Err(Error::Archive(format!("unsupported dtype {dtype:?} for {name:?}")));
        }
        if !valid_name(name) || !seen.insert(name.to_string()) {
            return Err(Error::Archive(format!("invalid or duplicate tensor name {name:?}")));
        }
        let shape: Vec<usize> = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| Error::Archive(format!("bad shape {dims:?}"))))
            .collect::<Result<_>>()?;
        let offset: usize =
            offset.parse().map_err(|_| Error::Archive(format!("bad offset in {l:?}")))?;
        entries.push(Entry { name: name.to_string(), shape, offset });
    }
    if line()? != "end" {
        return Err(Error::Archive("missing end marker".into()));
    }

    let payload = &bytes[pos..];
    let mut out = Vec::with_capacity(count);
    for e in entries {
        let n: usize = e.shape.iter().product();
        let lo = e.offset;
        let hi = lo
            .checked_add(8 * n)
            .filter(|&hi| hi <= payload.len())
            .ok_or_else(|| Error::Archive(format!("payload overrun for {:?}", e.name)))?;
        let data: Vec<f64> = payload[lo..hi]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::Archive(format!("non-finite value in {:?}", e.name)));
        }
        out.push((e.name, Tensor::from_vec(e.shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmpdir() -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("dctensor-ckpt-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        dir
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        // Values chosen to exercise tricky bit patterns: subnormals, negative
        // zero, exact binary fractions, irrationals.
        let vals = vec![0.1, -0.0, f64::MIN_POSITIVE / 4.0, std::f64::consts::PI, -1e300, 3.5];
        let a = Tensor::from_vec([2, 3], vals.clone()).unwrap();
        let b = Tensor::from_vec([6], vals.iter().map(|v| v * 1.7).collect()).unwrap();
        let path = tmpdir().join("roundtrip.da");
        save_tensors(&path, &[("block.w".into(), a.clone()), ("block.b".into(), b.clone())]).unwrap();
        let loaded = load_tensors(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded[0].0, "block.w");
        assert_eq!(loaded[0].1.shape(), a.shape());
        for (x, y) in loaded[0].1.to_vec().iter().zip(a.to_vec()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        for (x, y) in loaded[1].1.to_vec().iter().zip(b.to_vec()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn rejects_bad_names_and_duplicates() {
        let t = Tensor::from_vec([1], vec![1.0]).unwrap();
        let path = tmpdir().join("bad.da");
        assert!(save_tensors(&path, &[("has space".into(), t.clone())]).is_err());
        assert!(save_tensors(&path, &[("a".into(), t.clone()), ("a".into(), t.clone())]).is_err());
    }

    #[test]
    fn rejects_truncated_payload() {
        let t = Tensor::from_vec([4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let path = tmpdir().join("trunc.da");
        save_tensors(&path, &[("w".into(), t)]).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 8);
        let path2 = tmpdir().join("trunc2.da");
        fs::write(&path2, bytes).unwrap();
        assert!(load_tensors(&path2).is_err());
    }
}
