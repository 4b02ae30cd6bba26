//! Embedding dump format: magic "RMEMB1", count and dim as u64 LE, then
//! row-major f32 LE embeddings. A sidecar file at `<path>.meta` carries
//! one `row_index,person_id,camera_id` line per row.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use crate::numkit::Matrix;
use crate::{Error, Result};

pub const DUMP_MAGIC: &[u8; 6] = b"RMEMB1";

#[derive(Clone, Debug, PartialEq)]
pub struct DumpMeta {
    pub person_id: u32,
    pub camera_id: u32,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".meta");
    PathBuf::from(s)
}

/// Embeddings stored as f32 (training math stays f64; rows are unit-norm
/// within float32 tolerance after the round trip).
pub fn write_dump(path: &Path, embeddings: &Matrix, meta: &[DumpMeta]) -> Result<()> {
    if embeddings.rows() != meta.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows vs {} meta entries",
            embeddings.rows(),
            meta.len()
        )));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(DUMP_MAGIC)?;
    w.write_all(&(embeddings.rows() as u64).to_le_bytes())?;
    w.write_all(&(embeddings.cols() as u64).to_le_bytes())?;
    for v in embeddings.data() {
        w.write_all(&(*v as f32).to_le_bytes())?;
    }
    w.flush()?;
    let mut side = BufWriter::new(File::create(sidecar_path(path))?);
    for (i, m) in meta.iter().enumerate() {
        writeln!(side, "{i},{},{}", m.person_id, m.camera_id)?;
    }
    side.flush()?;
    Ok(())
}

pub fn read_dump(path: &Path) -> Result<(Matrix, Vec<DumpMeta>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic)?;
    if &magic != DUMP_MAGIC {
        return Err(Error::Format(format!("bad dump magic in {}", path.display())));
    }
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let rows = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let cols = u64::from_le_bytes(b8) as usize;
    let mut data = Vec::with_capacity(rows * cols);
    let mut b4 = [0u8; 4];
    for _ in 0..rows * cols {
        r.read_exact(&mut b4)?;
        data.push(f32::from_le_bytes(b4) as f64);
    }
    let embeddings = Matrix::from_vec(rows, cols, data)?;

    let side = File::open(sidecar_path(path))?;
    let mut meta = Vec::with_capacity(rows);
    for (lineno, line) in BufReader::new(side).lines().enumerate() {
        let line = line?;
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 3 {
            return Err(Error::Parse {
                line: lineno + 1,
                msg: format!("expected `row,person_id,camera_id`, got {:?}", line),
            });
        }
        let parse = |s: &str| -> Result<u32> {
            s.trim().parse().map_err(|_| Error::Parse {
                line: lineno + 1,
                msg: format!("bad integer {s:?}"),
            })
        };
        let row = parse(parts[0])? as usize;
        if row != lineno {
            return Err(Error::Parse { line: lineno + 1, msg: "row index out of order".into() });
        }
        meta.push(DumpMeta { person_id: parse(parts[1])?, camera_id: parse(parts[2])? });
    }
    if meta.len() != rows {
        return Err(Error::Format(format!(
            "dump has {} rows but sidecar has {} lines",
            rows,
            meta.len()
        )));
    }
    Ok((embeddings, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{l2_normalize, norm2, Rng};
    use tempfile::tempdir;

    #[test]
    fn round_trip_preserves_f32_values_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("e.emb");
        let mut rng = Rng::new(1);
        let mut m = Matrix::zeros(5, 8);
        for i in 0..5 {
            let v: Vec<f64> = (0..8).map(|_| rng.normal()).collect();
            m.row_mut(i).copy_from_slice(&l2_normalize(&v).unwrap());
        }
        let meta: Vec<DumpMeta> = (0..5)
            .map(|i| DumpMeta { person_id: i, camera_id: i % 2 })
            .collect();
        write_dump(&path, &m, &meta).unwrap();
        let (loaded, lmeta) = read_dump(&path).unwrap();
        assert_eq!(lmeta, meta);
        for (a, b) in loaded.data().iter().zip(m.data()) {
            // stored at f32; reading back must be bit-exact at that width
            assert_eq!(*a as f32, *b as f32);
            assert_eq!(*a, (*b as f32) as f64);
        }
        for i in 0..5 {
            assert!((norm2(loaded.row(i)) - 1.0).abs() < 1e-5);
        }
        // byte-identical on rewrite
        let path2 = dir.path().join("e2.emb");
        write_dump(&path2, &loaded, &lmeta).unwrap();
        let (again, _) = read_dump(&path2).unwrap();
        assert_eq!(again, loaded);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.emb");
        std::fs::write(&path, b"nope").unwrap();
        assert!(read_dump(&path).is_err());
    }
}
