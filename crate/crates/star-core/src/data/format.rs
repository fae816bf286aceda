//! Binary feature files and the corpus manifest.
//!
//! Layout: magic "STARFT01", u32 sequence count, then per sequence
//! u32 t_x, u32 d_in, u32 t_y, little-endian f32 frames row-major,
//! u32 token ids, u32 boundaries. All integers little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StarError};

use super::FeatureSequence;

pub const FEATURE_MAGIC: &[u8; 8] = b"STARFT01";

pub fn write_features(path: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(FEATURE_MAGIC)?;
    write_u32(&mut w, seqs.len() as u32)?;
    for s in seqs {
        let t_x = s.t_x();
        if t_x > u32::MAX as usize || s.frame_dim > u32::MAX as usize {
            return Err(StarError::Format("sequence dimension overflows u32".into()));
        }
        write_u32(&mut w, t_x as u32)?;
        write_u32(&mut w, s.frame_dim as u32)?;
        write_u32(&mut w, s.transcript.len() as u32)?;
        for &f in &s.frames {
            w.write_all(&f.to_le_bytes())?;
        }
        for &t in &s.transcript {
            write_u32(&mut w, t)?;
        }
        for &b in &s.boundaries {
            write_u32(&mut w, b)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_features(path: &Path) -> Result<Vec<FeatureSequence>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| StarError::Format("truncated feature file: missing magic".into()))?;
    if &magic != FEATURE_MAGIC {
        return Err(StarError::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&magic),
            String::from_utf8_lossy(FEATURE_MAGIC)
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut seqs = Vec::with_capacity(count);
    for i in 0..count {
        let t_x = read_u32(&mut r)? as usize;
        let d_in = read_u32(&mut r)? as usize;
        let t_y = read_u32(&mut r)? as usize;
        if d_in == 0 || t_x == 0 {
            return Err(StarError::Format(format!("sequence {i} has empty dimensions")));
        }
        let mut frames = vec![0f32; t_x * d_in];
        let mut buf = [0u8; 4];
        for f in frames.iter_mut() {
            r.read_exact(&mut buf)
                .map_err(|_| StarError::Format(format!("truncated frames in sequence {i}")))?;
            *f = f32::from_le_bytes(buf);
        }
        let mut transcript = vec![0u32; t_y];
        for t in transcript.iter_mut() {
            *t = read_u32(&mut r)
                .map_err(|_| StarError::Format(format!("truncated transcript in sequence {i}")))?;
        }
        let mut boundaries = vec![0u32; t_y];
        for b in boundaries.iter_mut() {
            *b = read_u32(&mut r)
                .map_err(|_| StarError::Format(format!("truncated boundaries in sequence {i}")))?;
        }
        seqs.push(FeatureSequence { frames, frame_dim: d_in, transcript, boundaries, silence: None });
    }
    Ok(seqs)
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)
        .map_err(|_| StarError::Format("truncated feature file".into()))?;
    Ok(u32::from_le_bytes(buf))
}

/// One JSON line per corpus split.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub split: String,
    pub count: usize,
    pub fingerprint: String,
}

pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in entries {
        let line = serde_json::to_string(e)
            .map_err(|e| StarError::Format(format!("manifest serialization: {e}")))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, SyntheticConfig};

    #[test]
    fn round_trip_single_frame() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("one.star");
        let seq = FeatureSequence {
            frames: vec![0.25, -1.5],
            frame_dim: 2,
            transcript: vec![3],
            boundaries: vec![0],
            silence: None,
        };
        write_features(&path, &[seq.clone()]).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, vec![seq]);
        // rewrite produces identical bytes
        let bytes1 = std::fs::read(&path).unwrap();
        let path2 = dir.path().join("two.star");
        write_features(&path2, &back).unwrap();
        assert_eq!(bytes1, std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.star");
        std::fs::write(&path, b"NOTSTARXrest").unwrap();
        let err = read_features(&path).unwrap_err();
        assert!(matches!(err, StarError::Format(_)));
    }

    #[test]
    fn truncated_file_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.star");
        let mut bytes = FEATURE_MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes()); // t_x but nothing after
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(read_features(&path), Err(StarError::Format(_))));
    }

    #[test]
    fn corpus_round_trip_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("corpus.star");
        let cfg = SyntheticConfig { seed: 5, ..Default::default() };
        let mut seqs = generate(&cfg, 100).unwrap();
        // silence masks are generation metadata, not persisted
        for s in seqs.iter_mut() {
            s.silence = None;
        }
        write_features(&path, &seqs).unwrap();
        let back = read_features(&path).unwrap();
        assert_eq!(back, seqs);
        let path2 = dir.path().join("corpus2.star");
        write_features(&path2, &back).unwrap();
        use sha2::{Digest, Sha256};
        let h1 = Sha256::digest(std::fs::read(&path).unwrap());
        let h2 = Sha256::digest(std::fs::read(&path2).unwrap());
        assert_eq!(h1, h2);
    }
}
