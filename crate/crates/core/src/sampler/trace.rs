use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Draw {
    pub l_base: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub l_mixed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_token: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainTrace {
    pub draws: Vec<Draw>,
    pub w_star_loss: f64,
    /// Label of the component mask, `None` for unrestricted chains.
    pub restricted: Option<String>,
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub positions: Option<Vec<Vec<f64>>>,
}

impl ChainTrace {
    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn has_mixed(&self) -> bool {
        !self.draws.is_empty() && self.draws.iter().all(|d| d.l_mixed.is_some())
    }

    pub fn has_per_token(&self) -> bool {
        !self.draws.is_empty() && self.draws.iter().all(|d| d.per_token.is_some())
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    w_star_loss: f64,
    restricted: Option<String>,
    seed: u64,
    n_draws: usize,
}

/// First line is a header, then one draw per line. Positions are not written.
pub fn write_trace_jsonl(path: &Path, trace: &ChainTrace) -> std::io::Result<()> {
    let mut out = Vec::new();
    let header = Header {
        w_star_loss: trace.w_star_loss,
        restricted: trace.restricted.clone(),
        seed: trace.seed,
        n_draws: trace.draws.len(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.push(b'\n');
    for d in &trace.draws {
        serde_json::to_writer(&mut out, d)?;
        out.push(b'\n');
    }
    fs::File::create(path)?.write_all(&out)
}

pub fn read_trace_jsonl(path: &Path) -> std::io::Result<ChainTrace> {
    let invalid = |m: String| std::io::Error::new(std::io::ErrorKind::InvalidData, m);
    let mut lines = BufReader::new(fs::File::open(path)?).lines();
    let header: Header = match lines.next() {
        Some(line) => serde_json::from_str(&line?)?,
        None => return Err(invalid(format!("{}: empty trace file", path.display()))),
    };
    let mut draws = Vec::with_capacity(header.n_draws);
    for line in lines {
        let line = line?;
        if !line.trim().is_empty() {
            draws.push(serde_json::from_str(&line)?);
        }
    }
    if draws.len() != header.n_draws {
        return Err(invalid(format!(
            "{}: header promises {} draws, found {}",
            path.display(),
            header.n_draws,
            draws.len()
        )));
    }
    Ok(ChainTrace {
        draws,
        w_star_loss: header.w_star_loss,
        restricted: header.restricted,
        seed: header.seed,
        positions: None,
    })
}
