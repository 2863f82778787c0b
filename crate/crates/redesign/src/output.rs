//! Output directory handling. Every file written here carries the run's
//! config hash, and each command leaves a manifest of its inputs and outputs.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> io::Result<String> {
    Ok(sha256_hex(&fs::read(path)?))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputFile {
    pub role: String,
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct OutputFile {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub tool: &'static str,
    pub version: &'static str,
    pub core_version: &'static str,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub config: Value,
    pub inputs: Vec<InputFile>,
    pub outputs: Vec<OutputFile>,
    /// Excluded from reproducibility comparisons.
    pub created_at: String,
}

/// Writer for one command's outputs.
pub struct RunOutput {
    dir: PathBuf,
    config_hash: String,
    written: Vec<OutputFile>,
}

impl RunOutput {
    pub fn create(dir: &Path, config_hash: String) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.into(), config_hash, written: Vec::new() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config_hash(&self) -> &str {
        &self.config_hash
    }

    fn put(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        let path = self.dir.join(name);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, bytes)?;
        self.written.retain(|f| f.path != name);
        self.written.push(OutputFile { path: name.into(), sha256: sha256_hex(bytes) });
        Ok(())
    }

    /// `{"config_hash": ..., key: value}`, pretty-printed.
    pub fn json<T: Serialize>(&mut self, name: &str, key: &str, value: &T) -> io::Result<()> {
        let doc = json!({ "config_hash": self.config_hash, key: value });
        let mut text = serde_json::to_string_pretty(&doc).map_err(io::Error::other)?;
        text.push('\n');
        self.put(name, text.as_bytes())
    }

    /// CSV preceded by a `# config_hash=` line.
    pub fn csv<R, I>(&mut self, name: &str, header: &[&str], rows: R) -> io::Result<()>
    where
        R: IntoIterator<Item = I>,
        I: IntoIterator<Item = String>,
    {
        let mut buf = format!("# config_hash={}\n", self.config_hash).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(header).map_err(io::Error::other)?;
            for r in rows {
                w.write_record(r).map_err(io::Error::other)?;
            }
            w.flush()?;
        }
        self.put(name, &buf)
    }

    /// Raw bytes whose format already embeds the hash.
    pub fn raw(&mut self, name: &str, bytes: &[u8]) -> io::Result<()> {
        self.put(name, bytes)
    }

    /// Plain text with a leading `config_hash:` line.
    pub fn text(&mut self, name: &str, body: &str) -> io::Result<()> {
        let text = format!("config_hash: {}\n{body}", self.config_hash);
        self.put(name, text.as_bytes())
    }

    /// Writes `<command>.manifest.json` listing everything written so far.
    pub fn finish(mut self, command: &str, seed: u64, config: Value, inputs: Vec<InputFile>) -> io::Result<PathBuf> {
        self.written.sort_by(|a, b| a.path.cmp(&b.path));
        let manifest = Manifest {
            tool: "redesign",
            version: env!("CARGO_PKG_VERSION"),
            core_version: redesign_core::VERSION,
            command: command.into(),
            config_hash: self.config_hash.clone(),
            seed,
            config,
            inputs,
            outputs: self.written,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
        };
        let path = self.dir.join(manifest_name(command));
        let mut text = serde_json::to_string_pretty(&manifest).map_err(io::Error::other)?;
        text.push('\n');
        fs::write(&path, text)?;
        Ok(path)
    }
}

pub fn manifest_name(command: &str) -> String {
    format!("{command}.manifest.json")
}

/// Float formatting used in every CSV: shortest round-trip form.
pub fn num(v: f64) -> String {
    v.to_string()
}

pub fn opt_num(v: Option<f64>) -> String {
    v.map(num).unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stamped_files() {
        let dir = tempfile::tempdir().unwrap();
        let mut out = RunOutput::create(dir.path(), "abc".into()).unwrap();
        out.csv("t.csv", &["a", "b"], [vec!["1".to_string(), "x,y".to_string()]]).unwrap();
        out.json("t.json", "body", &[1, 2]).unwrap();
        out.text("t.txt", "hello\n").unwrap();
        let m = out.finish("demo", 7, json!({}), vec![]).unwrap();

        let csv = fs::read_to_string(dir.path().join("t.csv")).unwrap();
        assert_eq!(csv, "# config_hash=abc\na,b\n1,\"x,y\"\n");
        let js: Value = serde_json::from_str(&fs::read_to_string(dir.path().join("t.json")).unwrap()).unwrap();
        assert_eq!(js["config_hash"], "abc");
        assert_eq!(js["body"], json!([1, 2]));
        let man: Value = serde_json::from_str(&fs::read_to_string(m).unwrap()).unwrap();
        assert_eq!(man["outputs"].as_array().unwrap().len(), 3);
        assert_eq!(man["seed"], 7);
    }

    #[test]
    fn sha_of_empty() {
        assert_eq!(sha256_hex(b""), "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
    }
}
