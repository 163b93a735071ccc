//! `FBFT` feature files: magic, u32 count, then per record a u32-prefixed
//! UTF-8 id, u32 frames, u32 dim, frames·dim little-endian f32 and one
//! validity byte per frame.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::fusion::VideoFeatures;

pub const MAGIC: &[u8; 4] = b"FBFT";

/// Features indexed by source id.
pub type FeatureTable = BTreeMap<String, VideoFeatures>;

pub fn encode_features<'a>(records: impl IntoIterator<Item = &'a VideoFeatures>) -> Result<Vec<u8>> {
    let records: Vec<&VideoFeatures> = records.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&u32_of(records.len())?.to_le_bytes());
    for v in records {
        out.extend_from_slice(&u32_of(v.source_id.len())?.to_le_bytes());
        out.extend_from_slice(v.source_id.as_bytes());
        out.extend_from_slice(&u32_of(v.frames())?.to_le_bytes());
        out.extend_from_slice(&u32_of(v.dim)?.to_le_bytes());
        for x in &v.features {
            out.extend_from_slice(&x.to_le_bytes());
        }
        out.extend(v.valid.iter().map(|&b| b as u8));
    }
    Ok(out)
}

fn u32_of(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let s = self
            .bytes
            .get(self.at..self.at.saturating_add(n))
            .ok_or_else(|| Error::Format("truncated feature file".into()))?;
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses a feature file, padding (or rejecting) records to `frames`.
/// Every record must share one feature dimension.
pub fn decode_features(bytes: &[u8], frames: usize) -> Result<FeatureTable> {
    let mut c = Cursor { bytes, at: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Format("bad magic".into()));
    }
    let count = c.u32()?;
    let mut table = FeatureTable::new();
    let mut dim = None;
    for _ in 0..count {
        let id_len = c.u32()?;
        let id = std::str::from_utf8(c.take(id_len)?)
            .map_err(|_| Error::Format("feature id is not UTF-8".into()))?
            .to_string();
        let t = c.u32()?;
        let d = c.u32()?;
        if *dim.get_or_insert(d) != d {
            return Err(Error::Format(format!(
                "record `{id}` has dimension {d}, earlier records {}",
                dim.unwrap_or(0)
            )));
        }
        if t > frames {
            return Err(Error::Format(format!(
                "record `{id}` has {t} frames, more than the {frames} allowed"
            )));
        }
        let raw = c.take(t.checked_mul(d).and_then(|n| n.checked_mul(4)).ok_or_else(|| {
            Error::Format("record size overflows".into())
        })?)?;
        let features = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
            .collect();
        let valid = c.take(t)?.iter().map(|&b| b != 0).collect();
        let v = VideoFeatures::new(id.clone(), features, valid, d)?.padded(frames);
        if table.insert(id.clone(), v).is_some() {
            return Err(Error::Format(format!("duplicate feature id `{id}`")));
        }
    }
    if c.at != bytes.len() {
        return Err(Error::Format("trailing bytes after last record".into()));
    }
    Ok(table)
}

pub fn save_features<'a>(path: &Path, records: impl IntoIterator<Item = &'a VideoFeatures>) -> Result<()> {
    std::fs::write(path, encode_features(records)?)?;
    Ok(())
}

pub fn load_features(path: &Path, frames: usize) -> Result<FeatureTable> {
    decode_features(&std::fs::read(path)?, frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, t: usize, d: usize) -> VideoFeatures {
        let f = (0..t * d).map(|i| i as f32 * 0.25 - 1.0).collect();
        VideoFeatures::new(id, f, vec![true; t], d).unwrap()
    }

    #[test]
    fn round_trip_exact() {
        let recs = vec![rec("a", 3, 2), rec("b", 3, 2)];
        let table = decode_features(&encode_features(&recs).unwrap(), 3).unwrap();
        assert_eq!(table.len(), 2);
        assert_eq!(table["a"], recs[0]);
        assert_eq!(table["b"], recs[1]);
    }

    #[test]
    fn short_records_are_padded() {
        let table = decode_features(&encode_features(&[rec("a", 2, 2)]).unwrap(), 4).unwrap();
        let v = &table["a"];
        assert_eq!(v.valid, vec![true, true, false, false]);
        assert_eq!(&v.features[4..], &[0.0; 4]);
    }

    #[test]
    fn empty_file_and_errors() {
        let empty = encode_features(&[]).unwrap();
        assert!(decode_features(&empty, 3).unwrap().is_empty());
        let mixed = encode_features(&[rec("a", 2, 2), rec("b", 2, 3)]).unwrap();
        assert!(decode_features(&mixed, 3).is_err());
        let mut bad = encode_features(&[rec("a", 2, 2)]).unwrap();
        bad[0] = b'Z';
        assert!(decode_features(&bad, 3).unwrap_err().to_string().contains("bad magic"));
        let good = encode_features(&[rec("a", 2, 2)]).unwrap();
        assert!(decode_features(&good[..good.len() - 1], 3).is_err());
        assert!(decode_features(&good, 1).is_err());
    }
}
