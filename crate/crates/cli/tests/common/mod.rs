#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use suscept::corpus::{write_corpus, BigramSource, InductionPlant};
use suscept::model::{init_model, save_checkpoint, ModelConfig};

pub const VOCAB: usize = 64;

pub fn toy_model(seed: u64) -> ModelConfig {
    ModelConfig {
        vocab_size: VOCAB,
        context_len: 16,
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        seed,
        ..ModelConfig::default()
    }
}

fn bigram(table_seed: u64) -> BigramSource {
    BigramSource {
        vocab_size: VOCAB,
        bos: VOCAB as u32 - 1,
        tokens: 0..VOCAB as u32 - 1,
        fanout: 3,
        concentration: 0.8,
        seed: table_seed,
    }
}

/// Writes checkpoints, a base corpus, an induction probe and a shifted
/// bigram probe under `dir`, plus `experiment.toml` referencing them.
pub fn write_experiment(dir: &Path, checkpoints: usize, extra: &str) -> PathBuf {
    let mut ck_lines = Vec::new();
    for i in 0..checkpoints {
        let cfg = toy_model(100 + i as u64);
        let name = format!("ck{i}.json");
        save_checkpoint(&dir.join(&name), &cfg, &init_model(&cfg).unwrap()).unwrap();
        ck_lines.push(format!("{{ id = \"step{i}\", path = \"{name}\" }}"));
    }
    write_corpus(&dir.join("base.jsonl"), &bigram(1).generate("base", 200, 16, 2).unwrap()).unwrap();
    let plant = InductionPlant {
        vocab_size: VOCAB,
        bos: VOCAB as u32 - 1,
        tokens: 0..VOCAB as u32 - 1,
        rate: 0.2,
    };
    write_corpus(&dir.join("induction.jsonl"), &plant.generate("induction", 80, 16, 3).unwrap().0).unwrap();
    write_corpus(&dir.join("shifted.jsonl"), &bigram(9).generate("shifted", 80, 16, 4).unwrap()).unwrap();
    let text = format!(
        r#"seed = 7
output_dir = "out"
delta_h = 0.25
checkpoints = [{}]
{extra}
[data]
base = "base.jsonl"
probes = [{{ id = "induction", path = "induction.jsonl" }}, {{ id = "shifted", path = "shifted.jsonl" }}]

[sgld]
epsilon = 0.0005
n_draws = 30
n_chains = 2
n_batch = 16

[per_token_sgld]
epsilon = 0.0005
n_draws = 20
n_chains = 2
n_batch = 8

[per_token]
contexts = 12

[pca]
k = 3
sample_size = 150
min_tokens = 10

[report]
window = 8
top_k = 10
contexts = 2
"#,
        ck_lines.join(", ")
    );
    let path = dir.join("experiment.toml");
    fs::write(&path, text).unwrap();
    path
}

/// Every output file under `root` with its bytes, keyed by relative path.
pub fn snapshot(root: &Path) -> Vec<(String, Vec<u8>)> {
    suscept_cli::artifacts::list_outputs(root)
        .unwrap()
        .into_iter()
        .map(|f| {
            let bytes = fs::read(root.join(&f.path)).unwrap();
            (f.path, bytes)
        })
        .collect()
}

pub fn cli(args: &[&str]) -> i32 {
    suscept_cli::main_with(std::iter::once("suscept").chain(args.iter().copied()))
}
