//! Output staging. Artifacts are held in memory until the run succeeds, then
//! each file is written to a temporary name and renamed into place, with the
//! manifest last.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use crate::manifest::MANIFEST_FILE;

#[derive(Debug, Default)]
pub struct Artifacts {
    files: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn add(&mut self, name: impl Into<String>, bytes: impl Into<Vec<u8>>) {
        let name = name.into();
        debug_assert!(name != MANIFEST_FILE);
        self.files.push((name, bytes.into()));
    }

    pub fn names(&self) -> Vec<String> {
        self.files.iter().map(|(n, _)| n.clone()).collect()
    }

    /// Writes every artifact into `dir`, then `manifest`.
    pub fn commit(&self, dir: &Path, manifest: &[u8]) -> io::Result<()> {
        fs::create_dir_all(dir)?;
        for (name, bytes) in &self.files {
            write_atomic(dir, name, bytes)?;
        }
        write_atomic(dir, MANIFEST_FILE, manifest)
    }
}

/// Writes `bytes` to `dir/name` through a temporary file in the same directory.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> io::Result<()> {
    let tmp = dir.join(format!(".{name}.{}.tmp", std::process::id()));
    let result = (|| {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
        fs::rename(&tmp, dir.join(name))
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

/// Serialises rows with the `csv` writer into an in-memory buffer.
pub fn csv_bytes<I, R>(header: &[&str], rows: I) -> io::Result<Vec<u8>>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
{
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.into_inner().map_err(|e| e.into_error())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn commit_writes_files_and_manifest_without_leftovers() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut a = Artifacts::default();
        a.add("a.csv", "x\n1\n");
        a.commit(&out, b"{}").unwrap();
        let mut names: Vec<String> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        assert_eq!(names, ["a.csv", MANIFEST_FILE]);
        assert_eq!(fs::read(out.join("a.csv")).unwrap(), b"x\n1\n");
    }

    #[test]
    fn csv_rows_are_quoted_when_needed() {
        let bytes = csv_bytes(&["a", "b"], [vec!["1".to_string(), "x,y".to_string()]]).unwrap();
        assert_eq!(String::from_utf8(bytes).unwrap(), "a,b\n1,\"x,y\"\n");
    }
}
