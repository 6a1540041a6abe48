//! Dataset persistence: line-delimited JSON records with a versioned header
//! line, tables in a sibling file keyed by table id.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{DataError, DatasetSplit, LwpSample, QaSample, Samples, SplitKind, Table, TaskKind, Vocabulary};

const DATASET_FORMAT: &str = "estinet.dataset";
const TABLES_FORMAT: &str = "estinet.tables";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct DatasetHeader {
    format: String,
    version: u32,
    task: String,
    split: String,
    seed: u64,
    n_samples: usize,
    tables_file: String,
    vocabulary: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TablesHeader {
    format: String,
    version: u32,
    n_tables: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io { path: path.display().to_string(), source }
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> DataError {
    DataError::Parse { path: path.display().to_string(), line, message: message.into() }
}

fn tables_path(dataset_path: &Path) -> PathBuf {
    let stem = dataset_path.file_stem().and_then(|s| s.to_str()).unwrap_or("dataset");
    dataset_path.with_file_name(format!("{stem}.tables.jsonl"))
}

/// Writes a split as JSONL: header line, then one sample per line. Tables go
/// to `<stem>.tables.jsonl` next to it. The byte stream is a pure function of
/// the split, so checksums are stable across runs.
pub fn write_dataset(split: &DatasetSplit, path: &Path) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    }
    let t_path = tables_path(path);
    let header = DatasetHeader {
        format: DATASET_FORMAT.to_string(),
        version: FORMAT_VERSION,
        task: split.task.name().to_string(),
        split: split.split.name().to_string(),
        seed: split.seed,
        n_samples: split.samples.len(),
        tables_file: t_path.file_name().unwrap().to_string_lossy().into_owned(),
        vocabulary: split.vocabulary.pieces().to_vec(),
    };
    let mut out = Vec::new();
    serde_json::to_writer(&mut out, &header).expect("header serializes");
    out.push(b'\n');
    match &split.samples {
        Samples::Taq(samples) => {
            for s in samples {
                serde_json::to_writer(&mut out, s).expect("sample serializes");
                out.push(b'\n');
            }
        }
        Samples::Lwp(samples) => {
            for s in samples {
                serde_json::to_writer(&mut out, s).expect("sample serializes");
                out.push(b'\n');
            }
        }
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| io_err(path, e))?;

    let mut t_out = Vec::new();
    let t_header = TablesHeader {
        format: TABLES_FORMAT.to_string(),
        version: FORMAT_VERSION,
        n_tables: split.tables.len(),
    };
    serde_json::to_writer(&mut t_out, &t_header).expect("header serializes");
    t_out.push(b'\n');
    for t in &split.tables {
        serde_json::to_writer(&mut t_out, t).expect("table serializes");
        t_out.push(b'\n');
    }
    fs::File::create(&t_path)
        .and_then(|mut f| f.write_all(&t_out))
        .map_err(|e| io_err(&t_path, e))?;
    Ok(())
}

/// Reads a split written by [`write_dataset`]. Malformed content is reported
/// with its line number.
pub fn read_dataset(path: &Path) -> Result<DatasetSplit, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header_line = header_line.map_err(|e| io_err(path, e))?;
    let header: DatasetHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.format != DATASET_FORMAT {
        return Err(parse_err(path, 1, format!("unexpected format tag {:?}", header.format)));
    }
    if header.version != FORMAT_VERSION {
        return Err(parse_err(path, 1, format!("unsupported version {}", header.version)));
    }
    let task = TaskKind::from_name(&header.task)
        .ok_or_else(|| parse_err(path, 1, format!("unknown task {:?}", header.task)))?;
    let split_kind = SplitKind::from_name(&header.split)
        .ok_or_else(|| parse_err(path, 1, format!("unknown split {:?}", header.split)))?;

    let mut taq = Vec::new();
    let mut lwp = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let line_no = idx + 1;
        match task {
            TaskKind::Taq => taq.push(
                serde_json::from_str::<QaSample>(&line)
                    .map_err(|e| parse_err(path, line_no, e.to_string()))?,
            ),
            TaskKind::Lwp => lwp.push(
                serde_json::from_str::<LwpSample>(&line)
                    .map_err(|e| parse_err(path, line_no, e.to_string()))?,
            ),
        }
    }
    let samples = match task {
        TaskKind::Taq => Samples::Taq(taq),
        TaskKind::Lwp => Samples::Lwp(lwp),
    };
    if samples.len() != header.n_samples {
        return Err(parse_err(
            path,
            1,
            format!("header promises {} samples, file has {}", header.n_samples, samples.len()),
        ));
    }

    let t_path = path.with_file_name(&header.tables_file);
    let tables = read_tables(&t_path)?;
    let vocabulary = Vocabulary::from_pieces(
        header.vocabulary.into_iter().filter(|p| p != "[unk]" && p != "[pad]"),
    );
    Ok(DatasetSplit { task, split: split_kind, seed: header.seed, samples, tables, vocabulary })
}

fn read_tables(path: &Path) -> Result<Vec<Table>, DataError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut lines = BufReader::new(file).lines().enumerate();
    let (_, header_line) = lines.next().ok_or_else(|| parse_err(path, 1, "empty file"))?;
    let header_line = header_line.map_err(|e| io_err(path, e))?;
    let header: TablesHeader =
        serde_json::from_str(&header_line).map_err(|e| parse_err(path, 1, e.to_string()))?;
    if header.format != TABLES_FORMAT || header.version != FORMAT_VERSION {
        return Err(parse_err(path, 1, "unexpected tables header"));
    }
    let mut tables = Vec::new();
    for (idx, line) in lines {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        tables.push(
            serde_json::from_str::<Table>(&line)
                .map_err(|e| parse_err(path, idx + 1, e.to_string()))?,
        );
    }
    if tables.len() != header.n_tables {
        return Err(parse_err(path, 1, "table count mismatch"));
    }
    Ok(tables)
}

/// SHA-256 of a file's bytes, hex encoded. Used by dataset manifests.
pub fn sha256_hex_file(path: &Path) -> Result<String, DataError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_lwp_split, generate_taq_split, taq::TaqGenConfig};

    fn tiny_taq() -> DatasetSplit {
        let cfg = TaqGenConfig { n_questions: 30, n_tables: 2, rows: 25, cols: 5, value_range: (1, 100), seed: 21 };
        generate_taq_split(&cfg, SplitKind::Train).unwrap()
    }

    #[test]
    fn round_trip_taq() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let split = tiny_taq();
        write_dataset(&split, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(split, back);
    }

    #[test]
    fn round_trip_lwp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lwp.jsonl");
        let split = generate_lwp_split(50, 8, SplitKind::Test);
        write_dataset(&split, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(split, back);
    }

    #[test]
    fn corrupt_header_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        fs::write(&path, "{\"format\":\"something.else\",\"version\":1}\n").unwrap();
        match read_dataset(&path) {
            Err(DataError::Parse { line: 1, .. }) => {}
            other => panic!("expected header parse error, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_sample_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        let split = tiny_taq();
        write_dataset(&split, &path).unwrap();
        let mut content = fs::read_to_string(&path).unwrap();
        content.push_str("not json\n");
        fs::write(&path, content).unwrap();
        match read_dataset(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 32), // header + 30 samples + bad line
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn checksum_stable_across_writes() {
        let dir = tempfile::tempdir().unwrap();
        fs::create_dir_all(dir.path().join("run1")).unwrap();
        fs::create_dir_all(dir.path().join("run2")).unwrap();
        let a = dir.path().join("run1/train.jsonl");
        let b = dir.path().join("run2/train.jsonl");
        let split = tiny_taq();
        write_dataset(&split, &a).unwrap();
        write_dataset(&split, &b).unwrap();
        assert_eq!(sha256_hex_file(&a).unwrap(), sha256_hex_file(&b).unwrap());
        assert_eq!(
            sha256_hex_file(&tables_path(&a)).unwrap(),
            sha256_hex_file(&tables_path(&b)).unwrap()
        );
    }
}
