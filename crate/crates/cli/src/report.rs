use anyhow::Result;
use eqft::verify::CheckOutcome;
use serde::Serialize;
use sha2::{Digest, Sha256};
use std::io::Write;
use std::path::PathBuf;

pub const FORMAT: &str = "eqft-report/1";

#[derive(Serialize)]
pub struct Report {
    pub format: &'static str,
    pub command: String,
    pub config_hash: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    pub pass: bool,
    pub checks: Vec<CheckOutcome>,
    pub data: serde_json::Value,
}

impl Report {
    pub fn new(
        command: &str,
        config_hash: String,
        seed: Option<u64>,
        checks: Vec<CheckOutcome>,
        data: serde_json::Value,
    ) -> Self {
        let pass = checks.iter().all(|c| c.pass);
        Report { format: FORMAT, command: command.into(), config_hash, seed, pass, checks, data }
    }
}

/// SHA-256 of the compact JSON form; object keys come out sorted.
pub fn hash_of(v: &impl Serialize) -> Result<String> {
    let canonical = serde_json::to_string(&serde_json::to_value(v)?)?;
    Ok(Sha256::digest(canonical.as_bytes()).iter().map(|b| format!("{b:02x}")).collect())
}

pub fn with_writer(out: &Option<PathBuf>, body: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
            body(&mut f)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            body(&mut lock)?;
        }
    }
    Ok(())
}

pub fn emit(report: &Report, out: &Option<PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(report)?;
    with_writer(out, |w| {
        w.write_all(text.as_bytes())?;
        w.write_all(b"\n")?;
        Ok(())
    })
}
