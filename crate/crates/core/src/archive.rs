//! Tensor archives: one flat little-endian `f64` blob plus a text manifest
//! with a `name shape byte_offset` line per tensor (shape written `AxBxC`).

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Writes `<stem>.bin` and `<stem>.manifest` under `dir`.
pub fn write_archive(dir: &Path, stem: &str, tensors: &[(String, &Tensor)]) -> Result<()> {
    let mut blob = Vec::new();
    let mut manifest = String::new();
    for (name, t) in tensors {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::invalid(format!("archive entry name {name:?} must be a single token")));
        }
        let shape: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        manifest.push_str(&format!("{name} {} {}\n", shape.join("x"), blob.len()));
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    }
    let bin = dir.join(format!("{stem}.bin"));
    fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
    let man = dir.join(format!("{stem}.manifest"));
    fs::write(&man, manifest).map_err(|e| Error::io(&man, e))
}

/// Reads an archive back in manifest order.
pub fn read_archive(dir: &Path, stem: &str) -> Result<Vec<(String, Tensor)>> {
    let man = dir.join(format!("{stem}.manifest"));
    let bin = dir.join(format!("{stem}.bin"));
    let text = fs::read_to_string(&man).map_err(|e| Error::io(&man, e))?;
    let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let parts: Vec<&str> = line.split_whitespace().collect();
        let bad = |m: &str| Error::format(&man, format!("line {}: {m}", ln + 1));
        if parts.len() != 3 {
            return Err(bad("expected `name shape offset`"));
        }
        let shape: Vec<usize> = parts[1]
            .split('x')
            .map(str::parse)
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("bad shape"))?;
        let offset: usize = parts[2].parse().map_err(|_| bad("bad offset"))?;
        let n: usize = shape.iter().product();
        let end = offset + 8 * n;
        if end > blob.len() {
            return Err(bad("entry runs past the end of the data file"));
        }
        let data = blob[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| bad(&e.to_string()))?;
        out.push((parts[0].to_owned(), t));
    }
    Ok(out)
}

/// Copies archived values into `targets`, matching by name and shape.
pub fn restore(entries: &[(String, Tensor)], targets: Vec<(String, &mut Tensor)>) -> Result<()> {
    for (name, slot) in targets {
        let (_, t) = entries
            .iter()
            .find(|(n, _)| *n == name)
            .ok_or_else(|| Error::invalid(format!("archive has no entry {name}")))?;
        if t.shape() != slot.shape() {
            return Err(Error::invalid(format!(
                "archive entry {name} has shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t.clone();
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut r = rng::stream(0, 0);
        let a = rng::normal_tensor(&[3, 4], &mut r);
        let b = Tensor::vector(vec![f64::MIN_POSITIVE, -0.0, 1e300]);
        let dir = tempfile::tempdir().unwrap();
        write_archive(dir.path(), "m", &[("a".into(), &a), ("b".into(), &b)]).unwrap();
        let back = read_archive(dir.path(), "m").unwrap();
        assert_eq!(back[0], ("a".to_string(), a));
        assert_eq!(back[1].1.data()[1].to_bits(), (-0.0f64).to_bits());
        let manifest = fs::read_to_string(dir.path().join("m.manifest")).unwrap();
        assert_eq!(manifest, "a 3x4 0\nb 3 96\n");
    }

    #[test]
    fn restore_checks_shapes() {
        let a = Tensor::ones(&[2, 2]);
        let entries = vec![("a".to_string(), a)];
        let mut slot = Tensor::zeros(&[2, 2]);
        restore(&entries, vec![("a".into(), &mut slot)]).unwrap();
        assert_eq!(slot, Tensor::ones(&[2, 2]));
        let mut wrong = Tensor::zeros(&[4]);
        assert!(restore(&entries, vec![("a".into(), &mut wrong)]).is_err());
        assert!(restore(&entries, vec![("b".into(), &mut slot)]).is_err());
    }
}
