//! On-disk formats: interaction TSV, FMAT binary feature tables, and
//! JSON-lines bundle files. Writers and readers round-trip exactly.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{CirpError, Result};

use super::{Bundle, BundleSet, FeatureMatrix, Interaction};

/// 8-byte ASCII magic prefix of the binary feature-matrix format.
pub const FMAT_MAGIC: &[u8; 8] = b"CIRPFMT1";

/// Read a `user_id<TAB>item_id<TAB>unix_seconds` log. Lines starting with
/// `#` are ignored; every other line must parse.
pub fn load_interactions(path: impl AsRef<Path>) -> Result<Vec<Interaction>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CirpError::io(path, e))?;
    let mut out = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CirpError::io(path, e))?;
        if line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(CirpError::parse(
                path,
                lineno,
                format!("expected 3 tab-separated fields, found {}", fields.len()),
            ));
        }
        let timestamp: i64 = fields[2].parse().map_err(|_| {
            CirpError::parse(path, lineno, format!("bad timestamp {:?}", fields[2]))
        })?;
        let interaction = Interaction::new(fields[0], fields[1], timestamp)
            .map_err(|e| CirpError::parse(path, lineno, e.to_string()))?;
        out.push(interaction);
    }
    Ok(out)
}

pub fn write_interactions(path: impl AsRef<Path>, interactions: &[Interaction]) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CirpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for i in interactions {
        writeln!(w, "{}\t{}\t{}", i.user_id, i.item_id, i.timestamp)
            .map_err(|e| CirpError::io(path, e))?;
    }
    w.flush().map_err(|e| CirpError::io(path, e))
}

/// Read an ids file alone: one id per line, line i pairing with row i of
/// the companion matrix.
pub fn load_ids(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CirpError::io(path, e))?;
    BufReader::new(file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| CirpError::io(path, e))
}

/// Load a binary FMAT file plus its companion ids file (one id per line,
/// line i pairing with row i).
pub fn load_features(
    path_matrix: impl AsRef<Path>,
    path_ids: impl AsRef<Path>,
) -> Result<FeatureMatrix> {
    let path_matrix = path_matrix.as_ref();
    let path_ids = path_ids.as_ref();

    let file = File::open(path_matrix).map_err(|e| CirpError::io(path_matrix, e))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|e| CirpError::io(path_matrix, e))?;
    if &magic != FMAT_MAGIC {
        return Err(CirpError::Validation(format!(
            "{} is not an FMAT file (bad magic)",
            path_matrix.display()
        )));
    }
    let rows = read_u32(&mut r, path_matrix)? as usize;
    let cols = read_u32(&mut r, path_matrix)? as usize;

    let mut buf = vec![0u8; rows * cols * 4];
    r.read_exact(&mut buf)
        .map_err(|e| CirpError::io(path_matrix, e))?;
    let mut values = Vec::with_capacity(rows * cols);
    for chunk in buf.chunks_exact(4) {
        values.push(f32::from_le_bytes(chunk.try_into().unwrap()));
    }
    let data = Array2::from_shape_vec((rows, cols), values)
        .map_err(|e| CirpError::Validation(format!("bad FMAT shape: {e}")))?;

    let ids_file = File::open(path_ids).map_err(|e| CirpError::io(path_ids, e))?;
    let ids: Vec<String> = BufReader::new(ids_file)
        .lines()
        .collect::<std::io::Result<_>>()
        .map_err(|e| CirpError::io(path_ids, e))?;
    if ids.len() != rows {
        return Err(CirpError::Validation(format!(
            "{} has {} rows but {} lists {} ids",
            path_matrix.display(),
            rows,
            path_ids.display(),
            ids.len()
        )));
    }

    FeatureMatrix::new(ids, data)
}

pub fn write_features(
    path_matrix: impl AsRef<Path>,
    path_ids: impl AsRef<Path>,
    matrix: &FeatureMatrix,
) -> Result<()> {
    let path_matrix = path_matrix.as_ref();
    let path_ids = path_ids.as_ref();

    let file = File::create(path_matrix).map_err(|e| CirpError::io(path_matrix, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(FMAT_MAGIC)
        .map_err(|e| CirpError::io(path_matrix, e))?;
    let rows: u32 = matrix
        .num_items()
        .try_into()
        .map_err(|_| CirpError::Validation("FMAT row count exceeds u32".into()))?;
    let cols: u32 = matrix
        .dim()
        .try_into()
        .map_err(|_| CirpError::Validation("FMAT column count exceeds u32".into()))?;
    w.write_all(&rows.to_le_bytes())
        .map_err(|e| CirpError::io(path_matrix, e))?;
    w.write_all(&cols.to_le_bytes())
        .map_err(|e| CirpError::io(path_matrix, e))?;
    for row in matrix.data.rows() {
        for v in row {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| CirpError::io(path_matrix, e))?;
        }
    }
    w.flush().map_err(|e| CirpError::io(path_matrix, e))?;

    let ids_file = File::create(path_ids).map_err(|e| CirpError::io(path_ids, e))?;
    let mut w = BufWriter::new(ids_file);
    for id in &matrix.ids {
        writeln!(w, "{id}").map_err(|e| CirpError::io(path_ids, e))?;
    }
    w.flush().map_err(|e| CirpError::io(path_ids, e))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| CirpError::io(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

/// Load a JSON-lines bundle file: `{"bundle_id": str, "items": [str,...]}`.
pub fn load_bundles(path: impl AsRef<Path>) -> Result<BundleSet> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CirpError::io(path, e))?;
    let mut bundles = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| CirpError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let bundle: Bundle = serde_json::from_str(&line)
            .map_err(|e| CirpError::parse(path, lineno, e.to_string()))?;
        bundles.push(bundle);
    }
    BundleSet::new(bundles)
}

pub fn write_bundles(path: impl AsRef<Path>, bundles: &BundleSet) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| CirpError::io(path, e))?;
    let mut w = BufWriter::new(file);
    for bundle in &bundles.bundles {
        let line = serde_json::to_string(bundle)
            .map_err(|e| CirpError::Validation(format!("bundle serialization failed: {e}")))?;
        writeln!(w, "{line}").map_err(|e| CirpError::io(path, e))?;
    }
    w.flush().map_err(|e| CirpError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use tempfile::tempdir;

    #[test]
    fn interactions_round_trip_and_parse_errors() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("interactions.tsv");

        std::fs::write(&path, "# comment\nu1\ti7\t1000\n").unwrap();
        let log = load_interactions(&path).unwrap();
        assert_eq!(log, vec![Interaction::new("u1", "i7", 1000).unwrap()]);

        write_interactions(&path, &log).unwrap();
        assert_eq!(load_interactions(&path).unwrap(), log);

        std::fs::write(&path, "").unwrap();
        assert!(load_interactions(&path).unwrap().is_empty());

        std::fs::write(&path, "u1\ti7\n").unwrap();
        let err = load_interactions(&path).unwrap_err();
        assert!(matches!(err, CirpError::Parse { line: 1, .. }), "{err}");

        std::fs::write(&path, "u1\ti7\tnot_a_number\n").unwrap();
        assert!(load_interactions(&path).is_err());
    }

    #[test]
    fn features_round_trip_bit_identical() {
        let dir = tempdir().unwrap();
        let fmat = dir.path().join("img.fmat");
        let ids = dir.path().join("img.ids.txt");

        let m = FeatureMatrix::new(
            vec!["a".into(), "b".into()],
            array![[1.0f32, 0.0, 0.0], [0.0, 1.0, 0.0]],
        )
        .unwrap();
        write_features(&fmat, &ids, &m).unwrap();
        let loaded = load_features(&fmat, &ids).unwrap();
        assert_eq!(loaded, m);

        // Second write produces byte-identical files.
        let bytes1 = std::fs::read(&fmat).unwrap();
        write_features(&fmat, &ids, &loaded).unwrap();
        assert_eq!(std::fs::read(&fmat).unwrap(), bytes1);
    }

    #[test]
    fn features_reject_bad_magic_and_id_mismatch() {
        let dir = tempdir().unwrap();
        let fmat = dir.path().join("x.fmat");
        let ids = dir.path().join("x.ids.txt");

        std::fs::write(&fmat, b"NOTMAGIC\x01\x00\x00\x00\x01\x00\x00\x00").unwrap();
        std::fs::write(&ids, "a\n").unwrap();
        assert!(load_features(&fmat, &ids).is_err());

        let m = FeatureMatrix::new(
            vec!["a".into(), "b".into()],
            array![[1.0f32, 0.0], [0.0, 1.0]],
        )
        .unwrap();
        write_features(&fmat, &ids, &m).unwrap();
        std::fs::write(&ids, "a\nb\nc\n").unwrap();
        let err = load_features(&fmat, &ids).unwrap_err().to_string();
        assert!(err.contains("2 rows"), "{err}");
    }

    #[test]
    fn bundles_round_trip_and_validation() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bundles.jsonl");

        std::fs::write(&path, "{\"bundle_id\":\"b1\",\"items\":[\"a\",\"b\",\"c\"]}\n").unwrap();
        let set = load_bundles(&path).unwrap();
        assert_eq!(set.bundles[0].items.len(), 3);

        write_bundles(&path, &set).unwrap();
        assert_eq!(load_bundles(&path).unwrap(), set);

        std::fs::write(&path, "{\"bundle_id\":\"b2\",\"items\":[\"a\"]}\n").unwrap();
        assert!(load_bundles(&path).unwrap_err().to_string().contains("b2"));

        std::fs::write(&path, "{\"bundle_id\":\"b3\",\"items\":[\"a\",\"a\"]}\n").unwrap();
        assert!(load_bundles(&path).unwrap_err().to_string().contains("b3"));
    }
}
