//! Problem and matrix persistence.
//!
//! The problem itself is human-readable JSON; the dose-influence matrix lives
//! in a sidecar file referenced from the JSON, either binary (two u64
//! little-endian counts, then row-major f64 values) or dense CSV. The format
//! is picked by extension: `.csv` is text, everything else is binary.

use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DvObjective, PlanProblem, Structure};

/// Errors from reading or writing problem files.
#[derive(Debug, thiserror::Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("matrix file {path}: {reason}")]
    BadMatrixFile { path: PathBuf, reason: String },
}

#[derive(Serialize, Deserialize)]
struct ProblemFile {
    structures: Vec<Structure>,
    n_beams: usize,
    n_voxels: usize,
    dose_influence_file: String,
    objectives: Vec<DvObjective>,
}

/// Writes the matrix in binary: `n_voxels` and `n_beams` as little-endian
/// u64, then the row-major entries as little-endian f64.
pub fn write_matrix_binary(
    path: &Path,
    n_voxels: usize,
    n_beams: usize,
    entries: &[f64],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(&(n_voxels as u64).to_le_bytes())?;
    w.write_all(&(n_beams as u64).to_le_bytes())?;
    for &v in entries {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a binary matrix written by [`write_matrix_binary`].
pub fn read_matrix_binary(path: &Path) -> Result<(usize, usize, Vec<f64>), IoError> {
    let bad = |reason: &str| IoError::BadMatrixFile {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path)?);
    let mut u = [0u8; 8];
    r.read_exact(&mut u).map_err(|_| bad("truncated header"))?;
    let n_voxels = u64::from_le_bytes(u) as usize;
    r.read_exact(&mut u).map_err(|_| bad("truncated header"))?;
    let n_beams = u64::from_le_bytes(u) as usize;
    let count = n_voxels
        .checked_mul(n_beams)
        .ok_or_else(|| bad("dimension overflow"))?;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        r.read_exact(&mut u).map_err(|_| bad("truncated entries"))?;
        entries.push(f64::from_le_bytes(u));
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(bad("trailing bytes"));
    }
    Ok((n_voxels, n_beams, entries))
}

/// Writes the matrix as dense CSV, one voxel per line.
pub fn write_matrix_csv(
    path: &Path,
    n_beams: usize,
    entries: &[f64],
) -> Result<(), IoError> {
    let mut w = BufWriter::new(File::create(path)?);
    for row in entries.chunks(n_beams) {
        let line: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dense CSV matrix; dimensions come from the line and field counts.
pub fn read_matrix_csv(path: &Path) -> Result<(usize, usize, Vec<f64>), IoError> {
    let bad = |reason: String| IoError::BadMatrixFile { path: path.to_path_buf(), reason };
    let r = BufReader::new(File::open(path)?);
    let mut entries = Vec::new();
    let mut n_beams = 0usize;
    let mut n_voxels = 0usize;
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut count = 0;
        for field in line.split(',') {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| bad(format!("line {}: bad number {field:?}", i + 1)))?;
            entries.push(v);
            count += 1;
        }
        if n_voxels == 0 {
            n_beams = count;
        } else if count != n_beams {
            return Err(bad(format!("line {}: expected {n_beams} fields, got {count}", i + 1)));
        }
        n_voxels += 1;
    }
    Ok((n_voxels, n_beams, entries))
}

/// Saves a problem: JSON at `path`, the matrix in `matrix_file` next to it
/// (binary unless the name ends in `.csv`).
pub fn save_problem(problem: &PlanProblem, path: &Path, matrix_file: &str) -> Result<(), IoError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let matrix_path = dir.join(matrix_file);
    if matrix_file.ends_with(".csv") {
        write_matrix_csv(&matrix_path, problem.n_beams, &problem.dose_influence)?;
    } else {
        write_matrix_binary(
            &matrix_path,
            problem.n_voxels,
            problem.n_beams,
            &problem.dose_influence,
        )?;
    }
    let file = ProblemFile {
        structures: problem.structures.clone(),
        n_beams: problem.n_beams,
        n_voxels: problem.n_voxels,
        dose_influence_file: matrix_file.to_string(),
        objectives: problem.objectives.clone(),
    };
    fs::write(path, serde_json::to_string_pretty(&file)? + "\n")?;
    Ok(())
}

/// Loads a problem; the matrix reference resolves relative to the JSON file.
pub fn load_problem(path: &Path) -> Result<PlanProblem, IoError> {
    let file: ProblemFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let matrix_path = dir.join(&file.dose_influence_file);
    let (n_voxels, n_beams, entries) = if file.dose_influence_file.ends_with(".csv") {
        let (v, b, e) = read_matrix_csv(&matrix_path)?;
        (v, b, e)
    } else {
        read_matrix_binary(&matrix_path)?
    };
    if n_voxels != file.n_voxels || n_beams != file.n_beams {
        return Err(IoError::BadMatrixFile {
            path: matrix_path,
            reason: format!(
                "matrix is {n_voxels}x{n_beams}, problem declares {}x{}",
                file.n_voxels, file.n_beams
            ),
        });
    }
    Ok(PlanProblem {
        structures: file.structures,
        n_beams: file.n_beams,
        n_voxels: file.n_voxels,
        dose_influence: entries,
        objectives: file.objectives,
    })
}
