//! The experiment commands. Each reads the config, writes its outputs under
//! `output_dir/<command>/` and leaves cell failures in `failures.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use suscept::analysis::{
    build_pertoken_matrix, build_response_matrix, context_classifier, contributions_to_csv, dataset_pc_contributions,
    pca, pca_matrix, standardize_columns, top_token_pattern_profile, trajectory_pca, ResponseMatrix,
};
use suscept::corpus::{load_corpus, mix_datasets, sample_probe_contexts, BigramStats, Corpus};
use suscept::estimators::{
    estimate_per_token, estimate_susceptibility, per_token_from_jsonl, per_token_to_jsonl, token_keys, PerTokenEstimate,
    SusceptibilityEstimate,
};
use suscept::model::{head_label, head_mask, load_checkpoint, parse_head_label, ComponentMask, ModelConfig, Transformer};
use suscept::patterns::{pattern_frequencies, PatternConfig, TokenDecoder};
use suscept::report::{per_token_csv, render_context_html, render_top_contexts};
use suscept::sampler::{run_chains, ChainInputs, ChainTrace, Execution, SgldConfig};

use crate::artifacts::{derive_seed, sha256_file, slug, write_atomic, write_json, write_manifest, CheckpointEntry};
use crate::config::{ExperimentConfig, LoadedConfig, PcaSource};
use crate::CliError;

/// A grid cell that could not be computed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CellFailure {
    pub cell: String,
    pub error: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CommandSummary {
    pub command: &'static str,
    pub cells: usize,
    pub failures: Vec<CellFailure>,
}

/// Corpora, decoder and component list shared by every command.
pub struct Inputs {
    pub config: ExperimentConfig,
    pub digest: String,
    pub model_config: ModelConfig,
    pub base: Corpus,
    pub probes: Vec<Corpus>,
    pub components: Vec<String>,
    pub decoder: TokenDecoder,
}

struct LoadedModel {
    id: String,
    model: Transformer,
    w_star: Vec<f64>,
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn require(path: &Path, what: &str) -> Result<(), CliError> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", path.display())))
    }
}

fn expand_components(list: &[String], cfg: &ModelConfig) -> Result<Vec<String>, CliError> {
    let mut out: Vec<String> = Vec::new();
    let mut push = |s: String| {
        if !out.contains(&s) {
            out.push(s);
        }
    };
    for c in list {
        match c.as_str() {
            "all" => (0..cfg.n_layers).for_each(|l| (0..cfg.n_heads).for_each(|h| push(head_label(l, h)))),
            "full" => push("full".into()),
            label => {
                let (l, h) = parse_head_label(label).ok_or_else(|| config_err(format!("bad component {label:?}")))?;
                head_mask(cfg, l, h).map_err(|e| config_err(e.to_string()))?;
                push(label.to_string());
            }
        }
    }
    Ok(out)
}

fn mask_for(cfg: &ModelConfig, component: &str) -> anyhow::Result<Option<ComponentMask>> {
    if component == "full" {
        return Ok(None);
    }
    let (l, h) = parse_head_label(component).ok_or_else(|| anyhow!("bad component {component:?}"))?;
    Ok(Some(head_mask(cfg, l, h)?))
}

fn check_lengths(c: &Corpus, cfg: &ModelConfig) -> Result<(), CliError> {
    match c.sequences().iter().position(|s| s.len() > cfg.context_len) {
        Some(i) => Err(config_err(format!(
            "corpus {}: sequence {i} is longer than the model context ({})",
            c.id, cfg.context_len
        ))),
        None => Ok(()),
    }
}

pub fn load_inputs(loaded: &LoadedConfig) -> Result<Inputs, CliError> {
    let config = loaded.config.clone();
    for c in &config.checkpoints {
        require(&c.path, "checkpoint")?;
    }
    require(&config.data.base, "base corpus")?;
    for p in &config.data.probes {
        require(&p.path, "probe corpus")?;
    }
    let (model_config, _) = load_checkpoint(&config.checkpoints[0].path)
        .map_err(|e| config_err(format!("checkpoint {}: {e}", config.checkpoints[0].id)))?;
    let (vocab, bos) = (model_config.vocab_size, model_config.bos());
    let load = |path: &Path, id: &str| {
        load_corpus(path, id, vocab, bos).map_err(|e| config_err(format!("corpus {id}: {e}")))
    };
    let base = load(&config.data.base, "base")?;
    check_lengths(&base, &model_config)?;
    let probes = config
        .data
        .probes
        .iter()
        .map(|p| {
            let c = load(&p.path, &p.id)?;
            check_lengths(&c, &model_config)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let decoder = match &config.data.decoder {
        Some(path) => {
            require(path, "decoder")?;
            let text = fs::read_to_string(path).map_err(|e| config_err(format!("decoder: {e}")))?;
            let d = TokenDecoder::from_json(&text).map_err(|e| config_err(format!("decoder: {e}")))?;
            if d.len() != vocab {
                return Err(config_err(format!("decoder has {} strings, vocab is {vocab}", d.len())));
            }
            d
        }
        None => TokenDecoder::synthetic(vocab, bos),
    };
    let components = expand_components(&config.components, &model_config)?;
    Ok(Inputs {
        digest: loaded.digest.clone(),
        config,
        model_config,
        base,
        probes,
        components,
        decoder,
    })
}

impl Inputs {
    fn out(&self, sub: &str) -> PathBuf {
        self.config.output_dir.join(sub)
    }

    fn load_model(&self, id: &str) -> anyhow::Result<LoadedModel> {
        let entry = self
            .config
            .checkpoints
            .iter()
            .find(|c| c.id == id)
            .ok_or_else(|| anyhow!("unknown checkpoint {id}"))?;
        let (cfg, params) = load_checkpoint(&entry.path).with_context(|| format!("checkpoint {id}"))?;
        if cfg.vocab_size != self.model_config.vocab_size || cfg.bos() != self.model_config.bos() {
            return Err(anyhow!("checkpoint {id} has a different vocabulary from {}", self.config.checkpoints[0].id));
        }
        Ok(LoadedModel {
            id: id.to_string(),
            model: Transformer::new(cfg)?,
            w_star: params.values,
        })
    }

    fn analysis_checkpoint(&self, chosen: &Option<String>) -> String {
        chosen
            .clone()
            .unwrap_or_else(|| self.config.checkpoints.last().expect("validated non-empty").id.clone())
    }

    pub fn manifest(&self) -> anyhow::Result<()> {
        let checkpoints = self
            .config
            .checkpoints
            .iter()
            .map(|c| {
                Ok(CheckpointEntry {
                    id: c.id.clone(),
                    sha256: sha256_file(&c.path)?,
                })
            })
            .collect::<anyhow::Result<Vec<_>>>()?;
        write_manifest(&self.config.output_dir, &self.digest, self.config.seed, checkpoints)?;
        Ok(())
    }
}

struct ChainJob<'a> {
    model: &'a LoadedModel,
    base: &'a Corpus,
    mixed: Option<&'a Corpus>,
    probe: Option<&'a [Vec<u32>]>,
    mask: Option<&'a ComponentMask>,
}

fn chains(job: ChainJob<'_>, sgld: &SgldConfig, seed: u64) -> anyhow::Result<Vec<ChainTrace>> {
    let cfg = SgldConfig { seed, ..sgld.clone() };
    let inputs = ChainInputs {
        objective: &job.model.model,
        w_star: &job.model.w_star,
        base: job.base,
        mixed: job.mixed,
        probe: job.probe,
        mask: job.mask,
    };
    Ok(run_chains(inputs, &cfg, Execution::Parallel)?)
}

fn write_failures(dir: &Path, failures: &[CellFailure]) -> anyhow::Result<()> {
    let path = dir.join("failures.json");
    if failures.is_empty() {
        if path.exists() {
            fs::remove_file(&path)?;
        }
        return Ok(());
    }
    write_json(&path, failures)
}

fn fail_all(cells: &[String], prefix: &str, err: &anyhow::Error) -> Vec<CellFailure> {
    cells
        .iter()
        .map(|c| CellFailure {
            cell: format!("{prefix}/{c}"),
            error: format!("{err:#}"),
        })
        .collect()
}

/// One susceptibility estimate with the checkpoint it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub checkpoint: String,
    pub estimate: SusceptibilityEstimate,
}

fn cell_path(inp: &Inputs, checkpoint: &str, probe: &str, component: &str) -> PathBuf {
    inp.out("estimate").join(checkpoint).join(probe).join(format!("{}.json", slug(component)))
}

fn read_cell(path: &Path) -> Option<GridCell> {
    serde_json::from_str(&fs::read_to_string(path).ok()?).ok()
}

fn estimate_group(inp: &Inputs, lm: &LoadedModel, probe: &Corpus) -> Vec<CellFailure> {
    let pending: Vec<String> = inp
        .components
        .iter()
        .filter(|c| read_cell(&cell_path(inp, &lm.id, &probe.id, c)).is_none())
        .cloned()
        .collect();
    if pending.is_empty() {
        return vec![];
    }
    let prefix = format!("{}/{}", lm.id, probe.id);
    let cfg = &inp.config;
    // D^0 and D^dh come from the same interleave and shuffle, so index i of
    // each holds the same base sample wherever no probe sample replaced it.
    let pair = mix_datasets(&inp.base, probe, 0.0, cfg.shuffle_seed)
        .and_then(|d0| Ok((d0, mix_datasets(&inp.base, probe, cfg.delta_h, cfg.shuffle_seed)?)));
    let (base0, mixed) = match pair {
        Ok(p) => p,
        Err(e) => return fail_all(&pending, &prefix, &e.into()),
    };
    let full_seed = derive_seed(cfg.seed, &["estimate", &lm.id, &probe.id, "full-posterior"]);
    fn job<'a>(lm: &'a LoadedModel, base: &'a Corpus, mixed: &'a Corpus, mask: Option<&'a ComponentMask>) -> ChainJob<'a> {
        ChainJob {
            model: lm,
            base,
            mixed: Some(mixed),
            probe: None,
            mask,
        }
    }
    let full = match chains(job(lm, &base0, &mixed, None), &cfg.sgld, full_seed) {
        Ok(f) => f,
        Err(e) => return fail_all(&pending, &prefix, &e),
    };
    pending
        .par_iter()
        .filter_map(|comp| {
            let run = || -> anyhow::Result<()> {
                let mask = mask_for(&inp.model_config, comp)?;
                let seed = derive_seed(cfg.seed, &["estimate", &lm.id, &probe.id, comp]);
                let restricted = chains(job(lm, &base0, &mixed, mask.as_ref()), &cfg.sgld, seed)?;
                let estimate = estimate_susceptibility(&restricted, &full, comp, &probe.id, cfg.delta_h)?;
                let cell = GridCell {
                    checkpoint: lm.id.clone(),
                    estimate,
                };
                write_json(&cell_path(inp, &lm.id, &probe.id, comp), &cell)
            };
            run().err().map(|e| CellFailure {
                cell: format!("{prefix}/{comp}"),
                error: format!("{e:#}"),
            })
        })
        .collect()
}

fn grid_cells(inp: &Inputs, checkpoint: &str) -> Vec<GridCell> {
    let mut out = Vec::new();
    for p in &inp.probes {
        for c in &inp.components {
            if let Some(cell) = read_cell(&cell_path(inp, checkpoint, &p.id, c)) {
                out.push(cell);
            }
        }
    }
    out
}

fn grid_csv(cells: &[GridCell]) -> String {
    let mut out = String::from("checkpoint,component,probe,delta_h,value,std_error\n");
    for c in cells {
        let e = &c.estimate;
        let se = e.std_error.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{},{},{se}\n", c.checkpoint, e.component, e.probe, e.delta_h, e.value));
    }
    out
}

/// Susceptibility for every (checkpoint, probe, component). One full-posterior
/// run per (checkpoint, probe) is shared by that group's components.
pub fn cmd_estimate(inp: &Inputs) -> anyhow::Result<CommandSummary> {
    let dir = inp.out("estimate");
    let mut failures = Vec::new();
    for ck in &inp.config.checkpoints {
        let lm = match inp.load_model(&ck.id) {
            Ok(m) => m,
            Err(e) => {
                let cells: Vec<String> = inp.probes.iter().flat_map(|p| inp.components.iter().map(move |c| format!("{}/{c}", p.id))).collect();
                failures.extend(fail_all(&cells, &ck.id, &e));
                continue;
            }
        };
        let groups: Vec<Vec<CellFailure>> = inp.probes.par_iter().map(|p| estimate_group(inp, &lm, p)).collect();
        failures.extend(groups.into_iter().flatten());
    }
    let cells: Vec<GridCell> = inp.config.checkpoints.iter().flat_map(|c| grid_cells(inp, &c.id)).collect();
    write_atomic(&dir.join("susceptibilities.csv"), grid_csv(&cells).as_bytes())?;
    write_failures(&dir, &failures)?;
    Ok(CommandSummary {
        command: "estimate",
        cells: inp.config.checkpoints.len() * inp.probes.len() * inp.components.len(),
        failures,
    })
}

fn pt_dir(inp: &Inputs, checkpoint: &str, probe: &str) -> PathBuf {
    inp.out("per_token").join(checkpoint).join(probe)
}

fn pt_path(inp: &Inputs, checkpoint: &str, probe: &str, component: &str) -> PathBuf {
    pt_dir(inp, checkpoint, probe).join(format!("{}.jsonl", slug(component)))
}

fn read_contexts(path: &Path) -> anyhow::Result<Vec<Vec<u32>>> {
    let text = fs::read_to_string(path).with_context(|| format!("missing input {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

fn read_per_token(path: &Path) -> anyhow::Result<PerTokenEstimate> {
    let text = fs::read_to_string(path).with_context(|| format!("missing input {}", path.display()))?;
    per_token_from_jsonl(&text)?
        .into_iter()
        .next()
        .ok_or_else(|| anyhow!("{} holds no records", path.display()))
}

fn per_token_group(inp: &Inputs, lm: &LoadedModel, probe: &Corpus) -> Vec<CellFailure> {
    let prefix = format!("{}/{}", lm.id, probe.id);
    let pending: Vec<String> = inp
        .components
        .iter()
        .filter(|c| read_per_token(&pt_path(inp, &lm.id, &probe.id, c)).is_err())
        .cloned()
        .collect();
    if pending.is_empty() {
        return vec![];
    }
    let cfg = &inp.config;
    let setup = || -> anyhow::Result<(Vec<Vec<u32>>, Vec<ChainTrace>)> {
        let contexts = sample_probe_contexts(probe, cfg.per_token.contexts, cfg.per_token.context_seed)?;
        write_json(&pt_dir(inp, &lm.id, &probe.id).join("contexts.json"), &contexts)?;
        let seed = derive_seed(cfg.seed, &["per-token", &lm.id, &probe.id, "full-posterior"]);
        let job = ChainJob {
            model: lm,
            base: &inp.base,
            mixed: None,
            probe: Some(&contexts),
            mask: None,
        };
        let full = chains(job, &cfg.per_token_sgld, seed)?;
        Ok((contexts, full))
    };
    let (contexts, full) = match setup() {
        Ok(v) => v,
        Err(e) => return fail_all(&pending, &prefix, &e),
    };
    let keys = token_keys(&contexts);
    pending
        .par_iter()
        .filter_map(|comp| {
            let run = || -> anyhow::Result<()> {
                let mask = mask_for(&inp.model_config, comp)?;
                let seed = derive_seed(cfg.seed, &["per-token", &lm.id, &probe.id, comp]);
                let job = ChainJob {
                    model: lm,
                    base: &inp.base,
                    mixed: None,
                    probe: Some(&contexts),
                    mask: mask.as_ref(),
                };
                let restricted = chains(job, &cfg.per_token_sgld, seed)?;
                let est = estimate_per_token(&restricted, &full, &keys, comp, &probe.id)?;
                write_atomic(&pt_path(inp, &lm.id, &probe.id, comp), per_token_to_jsonl(&est).as_bytes())
            };
            run().err().map(|e| CellFailure {
                cell: format!("{prefix}/{comp}"),
                error: format!("{e:#}"),
            })
        })
        .collect()
}

/// Per-token susceptibilities over seeded probe contexts for every
/// (checkpoint, probe, component).
pub fn cmd_per_token(inp: &Inputs) -> anyhow::Result<CommandSummary> {
    let mut failures = Vec::new();
    for ck in &inp.config.checkpoints {
        let lm = match inp.load_model(&ck.id) {
            Ok(m) => m,
            Err(e) => {
                let cells: Vec<String> = inp.probes.iter().flat_map(|p| inp.components.iter().map(move |c| format!("{}/{c}", p.id))).collect();
                failures.extend(fail_all(&cells, &ck.id, &e));
                continue;
            }
        };
        let groups: Vec<Vec<CellFailure>> = inp.probes.par_iter().map(|p| per_token_group(inp, &lm, p)).collect();
        failures.extend(groups.into_iter().flatten());
    }
    write_failures(&inp.out("per_token"), &failures)?;
    Ok(CommandSummary {
        command: "per-token",
        cells: inp.config.checkpoints.len() * inp.probes.len() * inp.components.len(),
        failures,
    })
}

fn numerical_rank(m: &ResponseMatrix) -> anyhow::Result<usize> {
    let full = pca_matrix(&m.values, m.nrows().min(m.ncols()))?;
    let top = full.singular_values.first().copied().unwrap_or(0.0);
    Ok(full.singular_values.iter().filter(|&&s| s > 1e-9 * top.max(f64::MIN_POSITIVE)).count())
}

fn check_rank(m: &ResponseMatrix, k: usize) -> Result<(), CliError> {
    let rank = numerical_rank(m).map_err(CliError::Other)?;
    if k > rank {
        return Err(config_err(format!(
            "k = {k} exceeds the numerical rank {rank} of the {}x{} matrix",
            m.nrows(),
            m.ncols()
        )));
    }
    Ok(())
}

fn grid_matrix(inp: &Inputs, checkpoint: &str) -> anyhow::Result<ResponseMatrix> {
    let mut estimates = Vec::new();
    for p in &inp.probes {
        for c in &inp.components {
            let path = cell_path(inp, checkpoint, &p.id, c);
            let cell = read_cell(&path).ok_or_else(|| anyhow!("missing input {}", path.display()))?;
            estimates.push(cell.estimate);
        }
    }
    Ok(build_response_matrix(&estimates)?)
}

#[derive(Serialize)]
struct PcaSummary<'a> {
    checkpoint: &'a str,
    source: PcaSource,
    rows: usize,
    cols: usize,
    k: usize,
    components: &'a [String],
    constant_columns: Vec<&'a str>,
    singular_values: &'a [f64],
    explained_variance_ratio: &'a [f64],
}

/// PCA of the per-token (or grid) response matrix with pattern profiles and
/// dataset contributions for every kept component.
pub fn cmd_pca(inp: &Inputs) -> Result<CommandSummary, CliError> {
    let cfg = &inp.config;
    let ck = inp.analysis_checkpoint(&cfg.pca.checkpoint);
    let dir = inp.out("pca");
    let raw = match cfg.pca.source {
        PcaSource::Grid => grid_matrix(inp, &ck)?,
        PcaSource::PerToken => {
            let mut all = Vec::new();
            for p in &inp.probes {
                for c in &inp.components {
                    all.push(read_per_token(&pt_path(inp, &ck, &p.id, c))?);
                }
            }
            build_pertoken_matrix(&all, cfg.pca.sample_size, cfg.pca.sample_seed).map_err(|e| config_err(e.to_string()))?
        }
    };
    let x = standardize_columns(&raw).map_err(anyhow::Error::from)?;
    check_rank(&x, cfg.pca.k)?;
    let result = pca(&x, cfg.pca.k).map_err(anyhow::Error::from)?;

    write_atomic(&dir.join("variance.csv"), result.variance_csv().as_bytes())?;
    write_atomic(&dir.join("loadings.csv"), result.loadings_csv(&x.cols).as_bytes())?;
    write_atomic(&dir.join("scores.csv"), result.scores_csv(&x.rows).as_bytes())?;

    let mut contributions = String::new();
    for pc in 0..result.k() {
        if let Ok(rows) = dataset_pc_contributions(pc, &x, &result) {
            let csv = contributions_to_csv(pc, &rows);
            contributions.push_str(if pc == 0 { &csv } else { csv.split_once('\n').map_or("", |(_, body)| body) });
        }
    }
    if !contributions.is_empty() {
        write_atomic(&dir.join("contributions.csv"), contributions.as_bytes())?;
    }

    if cfg.pca.source == PcaSource::PerToken {
        let mut contexts = BTreeMap::new();
        for p in &inp.probes {
            contexts.insert(p.id.clone(), read_contexts(&pt_dir(inp, &ck, &p.id).join("contexts.json"))?);
        }
        let stats = BigramStats::from_corpus(&inp.base);
        let patterns = PatternConfig::default();
        let classify = context_classifier(&contexts, &stats, &inp.decoder, &patterns);
        let mut profiles = String::new();
        for pc in 0..result.k() {
            let prof = top_token_pattern_profile(pc, &x, &result, &classify, cfg.top_selection()).map_err(anyhow::Error::from)?;
            let csv = prof.to_csv();
            profiles.push_str(if pc == 0 { &csv } else { csv.split_once('\n').map_or("", |(_, body)| body) });
        }
        write_atomic(&dir.join("profiles.csv"), profiles.as_bytes())?;
    }

    let summary = PcaSummary {
        checkpoint: &ck,
        source: cfg.pca.source,
        rows: x.nrows(),
        cols: x.ncols(),
        k: result.k(),
        components: &x.cols,
        constant_columns: x.cols.iter().zip(&x.constant_cols).filter(|(_, &f)| f).map(|(c, _)| c.as_str()).collect(),
        singular_values: &result.singular_values,
        explained_variance_ratio: &result.explained_variance_ratio,
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(CommandSummary {
        command: "pca",
        ..Default::default()
    })
}

/// Joint PCA of the grid response vectors stacked over checkpoints.
pub fn cmd_trajectory(inp: &Inputs) -> Result<CommandSummary, CliError> {
    let cfg = &inp.config;
    if cfg.checkpoints.len() < 2 {
        return Err(config_err("trajectory needs at least two checkpoints"));
    }
    let per_checkpoint = cfg
        .checkpoints
        .iter()
        .map(|c| Ok((c.id.clone(), grid_matrix(inp, &c.id)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let probe = trajectory_pca(&per_checkpoint, 1).map_err(anyhow::Error::from)?;
    check_rank(&probe.matrix, cfg.trajectory.k)?;
    let t = trajectory_pca(&per_checkpoint, cfg.trajectory.k).map_err(anyhow::Error::from)?;
    let dir = inp.out("trajectory");
    write_atomic(&dir.join("projections.csv"), t.projections_csv().as_bytes())?;
    write_atomic(&dir.join("variance.csv"), t.pca.variance_csv().as_bytes())?;
    write_atomic(&dir.join("loadings.csv"), t.pca.loadings_csv(&t.matrix.cols).as_bytes())?;
    write_atomic(&dir.join("stacked.csv"), t.matrix.to_csv().as_bytes())?;
    Ok(CommandSummary {
        command: "trajectory",
        ..Default::default()
    })
}

/// HTML heatmaps: every component stacked over the first probe contexts, and
/// the highest and lowest tokens of each component.
pub fn cmd_report(inp: &Inputs) -> Result<CommandSummary, CliError> {
    let cfg = &inp.config;
    let ck = inp.analysis_checkpoint(&cfg.report.checkpoint);
    let dir = inp.out("report");
    let mut all = Vec::new();
    for p in &inp.probes {
        let contexts = read_contexts(&pt_dir(inp, &ck, &p.id).join("contexts.json"))?;
        let ests = inp
            .components
            .iter()
            .map(|c| read_per_token(&pt_path(inp, &ck, &p.id, c)))
            .collect::<anyhow::Result<Vec<_>>>()?;
        let shown = &contexts[..cfg.report.contexts.min(contexts.len())];
        let html = render_context_html(shown, &ests, &inp.components, cfg.report.scheme, &inp.decoder)
            .map_err(anyhow::Error::from)?;
        write_atomic(&dir.join(&p.id).join("contexts.html"), html.as_bytes())?;
        for e in &ests {
            let k = cfg.report.top_k.min(e.tokens.len());
            let html = render_top_contexts(e, &contexts, &inp.decoder, cfg.report.scheme, cfg.report.window, k)
                .map_err(anyhow::Error::from)?;
            write_atomic(&dir.join(&p.id).join(format!("{}_top.html", slug(&e.component))), html.as_bytes())?;
        }
        all.extend(ests);
    }
    write_atomic(&dir.join("per_token.csv"), per_token_csv(&all).as_bytes())?;
    Ok(CommandSummary {
        command: "report",
        ..Default::default()
    })
}

#[derive(Serialize)]
struct CorpusSummary {
    id: String,
    sequences: usize,
    predicted_positions: usize,
    sha256: String,
}

/// Validates the corpora and records their sizes, base bigram statistics and
/// background pattern frequencies.
pub fn cmd_ingest(inp: &Inputs) -> Result<CommandSummary, CliError> {
    let cfg = &inp.config;
    let dir = inp.out("ingest");
    let paths = std::iter::once(&cfg.data.base).chain(cfg.data.probes.iter().map(|p| &p.path));
    let corpora: Vec<&Corpus> = std::iter::once(&inp.base).chain(&inp.probes).collect();
    let summaries = corpora
        .iter()
        .zip(paths)
        .map(|(c, path)| {
            Ok(CorpusSummary {
                id: c.id.clone(),
                sequences: c.len(),
                predicted_positions: c.predicted_positions(),
                sha256: sha256_file(path)?,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    write_json(&dir.join("corpora.json"), &summaries)?;
    let stats = BigramStats::from_corpus(&inp.base);
    write_atomic(&dir.join("bigrams.csv"), stats.to_csv().as_bytes())?;
    let patterns = PatternConfig::default();
    let mut csv = String::from("corpus,pattern,fraction,sample_size\n");
    for c in &corpora {
        let n = cfg.pca.sample_size.min(c.predicted_positions());
        let f = pattern_frequencies(c, &stats, &inp.decoder, &patterns, n, cfg.seed).map_err(anyhow::Error::from)?;
        for (l, v) in &f.fractions {
            csv.push_str(&format!("{},{},{v},{n}\n", c.id, l.name()));
        }
    }
    write_atomic(&dir.join("patterns.csv"), csv.as_bytes())?;
    Ok(CommandSummary {
        command: "ingest",
        ..Default::default()
    })
}
