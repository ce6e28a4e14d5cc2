use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};

use ropelab::analysis::{aggregate_distance_distribution, js_csv, js_table, EntropyReport};
use ropelab::harness::{self, CompareParams, GridParams, PplParams};
use ropelab::model::{read_checkpoint, write_checkpoint, Decoding};
use ropelab::report::{fmt_f64, write_ndjson, CsvTable};
use ropelab::seed::{child_rng, split_seed};
use ropelab::{AttentionRecord, RopeConfig, RotaryVariant, TinyModel};

use crate::artifacts::{Artifact, Staging};
use crate::config::{ConfigError, ExperimentConfig};

#[derive(Debug, thiserror::Error)]
#[error("missing file {}", .0.display())]
pub struct MissingFile(pub PathBuf);

pub struct Run {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub config_hash: String,
}

impl Run {
    /// Fails before any output exists if inputs are missing or the output
    /// location is unusable.
    pub fn prepare(cfg: ExperimentConfig, out_flag: Option<PathBuf>) -> Result<Self> {
        let out = out_flag
            .or_else(|| cfg.out.clone())
            .ok_or_else(|| ConfigError::Invalid("no output directory: pass --out or set out".into()))?;
        if out.exists() && !out.is_dir() {
            return Err(ConfigError::Invalid(format!("{} exists and is not a directory", out.display())).into());
        }
        let inputs = cfg.model.checkpoint.iter().chain(&cfg.analyze.attention);
        for p in inputs {
            if !p.is_file() {
                return Err(MissingFile(p.clone()).into());
            }
        }
        let config_hash = crate::artifacts::sha256_hex(cfg.hash_text().as_bytes());
        Ok(Self { cfg, out, config_hash })
    }

    /// Every command also records the resolved configuration it ran with.
    fn staging(&self, command: &str) -> Staging {
        let mut s = Staging::new(command, self.config_hash.clone(), self.cfg.seed);
        s.push(Artifact::new(format!("{command}.conf"), self.cfg.to_text().into_bytes()));
        s
    }

    /// Loads the configured checkpoint, or trains one from the config.
    fn model(&self) -> Result<TinyModel> {
        match &self.cfg.model.checkpoint {
            Some(path) => {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let model = read_checkpoint(BufReader::new(file))?;
                if model.config().head_dim != self.cfg.model.head_dim {
                    return Err(ConfigError::Invalid(format!(
                        "checkpoint head_dim {} differs from model.head_dim {}",
                        model.config().head_dim,
                        self.cfg.model.head_dim
                    ))
                    .into());
                }
                Ok(model)
            }
            None => Ok(self.train()?.0),
        }
    }

    fn train(&self) -> Result<(TinyModel, Vec<f64>)> {
        let trained = ropelab::model::train(self.cfg.model_config()?, &self.cfg.task, &self.cfg.train_options())?;
        Ok((trained.model, trained.loss_trace))
    }

    fn variants(&self) -> Result<Vec<(String, RotaryVariant)>> {
        Ok(self.cfg.resolved_variants()?)
    }

    fn grid_params(&self) -> GridParams {
        GridParams {
            lengths: self.cfg.needle_lengths(),
            depths: self.cfg.needle.depths.clone(),
            cases_per_cell: self.cfg.needle.cases,
            seed: split_seed(self.cfg.seed, "needle"),
            threads: self.cfg.threads,
        }
    }

    fn ppl_params(&self) -> PplParams {
        PplParams {
            eval_lengths: self.cfg.ppl_lengths(),
            stride: self.cfg.ppl.stride,
            max_windows: self.cfg.ppl.max_windows,
            threads: self.cfg.threads,
        }
    }

    fn corpus(&self) -> Result<Vec<usize>> {
        let longest = *self.cfg.ppl_lengths().iter().max().unwrap_or(&2);
        let episode = self.cfg.ppl.episode_length.unwrap_or(longest);
        let total = self.cfg.ppl.corpus_tokens.unwrap_or(4 * longest);
        let mut rng = child_rng(self.cfg.seed, "ppl-corpus");
        Ok(self.cfg.task.corpus(&mut rng, episode, total)?)
    }

    // ── Commands ────────────────────────────────────────────────────────

    pub fn train_cmd(&self) -> Result<Vec<PathBuf>> {
        let (model, trace) = self.train()?;
        let mut ckpt = Vec::new();
        write_checkpoint(&model, &mut ckpt)?;
        let mut loss = CsvTable::new(&["step", "loss"]);
        for (i, l) in trace.iter().enumerate() {
            loss.push(vec![i.to_string(), fmt_f64(*l)]);
        }
        let mut s = self.staging("train");
        s.push(Artifact::new("model.tmdl", ckpt));
        s.push(Artifact::new("loss.csv", loss.to_csv_string().into_bytes()));
        s.commit(&self.out)
    }

    pub fn needle_cmd(&self) -> Result<Vec<PathBuf>> {
        let model = self.model()?;
        let params = self.grid_params();
        let mut s = self.staging("needle");
        for (name, v) in self.variants()? {
            let grid = harness::run_needle_grid(&model, &self.cfg.task, &v, &params)?;
            let swapped = v != model.config().variant;
            s.push(
                Artifact::new(format!("needle_{name}.csv"), grid.to_csv().to_csv_string().into_bytes())
                    .for_variant(&name, swapped),
            );
        }
        s.commit(&self.out)
    }

    pub fn ppl_cmd(&self) -> Result<Vec<PathBuf>> {
        let model = self.model()?;
        let corpus = self.corpus()?;
        let params = self.ppl_params();
        let mut s = self.staging("ppl");
        for (name, v) in self.variants()? {
            let curve = harness::run_ppl_curve(&model, &v, &corpus, &params)?;
            let swapped = v != model.config().variant;
            s.push(
                Artifact::new(format!("ppl_{name}.csv"), curve.to_csv().to_csv_string().into_bytes())
                    .for_variant(&name, swapped),
            );
        }
        s.commit(&self.out)
    }

    pub fn compare_cmd(&self) -> Result<Vec<PathBuf>> {
        let model = self.model()?;
        let corpus = self.corpus()?;
        let variants = self.variants()?;
        let params = CompareParams {
            grid: Some(self.grid_params()),
            ppl: Some((&corpus, self.ppl_params())),
            ppl_threshold: self.cfg.compare_ppl_threshold,
        };
        let cmp = harness::compare_variants(&model, &self.cfg.task, &variants, &params)?;
        let mut s = self.staging("compare");
        let mut summary = Vec::new();
        write_ndjson(&mut summary, &cmp.summary)?;
        s.push(Artifact::new("compare.ndjson", summary));
        for run in &cmp.runs {
            let swapped = run.variant != model.config().variant;
            if let Some(g) = &run.grid {
                s.push(
                    Artifact::new(format!("needle_{}.csv", run.name), g.to_csv().to_csv_string().into_bytes())
                        .for_variant(&run.name, swapped),
                );
            }
            if let Some(c) = &run.curve {
                s.push(
                    Artifact::new(format!("ppl_{}.csv", run.name), c.to_csv().to_csv_string().into_bytes())
                        .for_variant(&run.name, swapped),
                );
            }
        }
        s.commit(&self.out)
    }

    pub fn analyze_cmd(&self) -> Result<Vec<PathBuf>> {
        let a = &self.cfg.analyze;
        let mut s = self.staging("analyze");
        let mut profiles = Vec::new();
        if !a.attention.is_empty() {
            let mut records = Vec::new();
            for path in &a.attention {
                let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
                let rec = AttentionRecord::read_ndjson(BufReader::new(file))?;
                let name = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_else(|| format!("input{}", records.len()));
                let profile = aggregate_distance_distribution(std::slice::from_ref(&rec), a.bucket_width, a.axis)?;
                s.push(Artifact::new(
                    format!("distance_{name}.csv"),
                    profile.to_csv().to_csv_string().into_bytes(),
                ));
                profiles.push((name, profile));
                records.push(rec);
            }
            let report = EntropyReport::from_records(&records)?;
            s.push(Artifact::new("entropy.csv", report.to_csv().to_csv_string().into_bytes()));
        } else {
            let model = self.model()?;
            let prompt = self.analysis_prompt()?;
            for (name, v) in self.variants()? {
                let swapped = v != model.config().variant;
                let gen = model.generate_with(&prompt, a.max_new_tokens, Decoding::Greedy, &v)?;
                let report = EntropyReport::from_records(&gen.records)?;
                let profile = aggregate_distance_distribution(&gen.records, a.bucket_width, a.axis)?;
                let mut attention = Vec::new();
                if let Some(last) = gen.records.last() {
                    last.write_ndjson(&mut attention)?;
                }
                s.push(
                    Artifact::new(format!("entropy_{name}.csv"), report.to_csv().to_csv_string().into_bytes())
                        .for_variant(&name, swapped),
                );
                s.push(
                    Artifact::new(format!("distance_{name}.csv"), profile.to_csv().to_csv_string().into_bytes())
                        .for_variant(&name, swapped),
                );
                s.push(Artifact::new(format!("attention_{name}.ndjson"), attention).for_variant(&name, swapped));
                profiles.push((name, profile));
            }
        }
        let rows = js_table(&profiles)?;
        s.push(Artifact::new("js.csv", js_csv(&rows).to_csv_string().into_bytes()));
        s.commit(&self.out)
    }

    fn analysis_prompt(&self) -> Result<Vec<usize>> {
        let a = &self.cfg.analyze;
        if let Some(p) = &a.prompt {
            return Ok(p.clone());
        }
        let total = a.length.unwrap_or(self.cfg.model.train_context_length);
        let task = &self.cfg.task;
        let haystack = task.haystack_for_total(total)?;
        let case = harness::build_needle_case(task, haystack, a.depth, split_seed(self.cfg.seed, "analyze"))?;
        Ok(case.sequence.prompt)
    }
}

// ── Rope dump ───────────────────────────────────────────────────────────

/// Rows `(m, j, theta, angle)`; `theta` is the variant's pair frequency
/// before position scaling.
pub fn rope_dump(variant: &RotaryVariant, positions: &[usize], pairs: &[usize]) -> Result<CsvTable> {
    let mut t = CsvTable::new(&["m", "j", "theta", "angle"]);
    for &m in positions {
        for &j in pairs {
            t.push(vec![
                m.to_string(),
                j.to_string(),
                fmt_f64(variant.frequency(j)?),
                fmt_f64(variant.effective_angle(m, j)?),
            ]);
        }
    }
    Ok(t)
}

pub fn rope_dump_variant(
    spec: &crate::config::VariantSpec,
    head_dim: usize,
    base: f64,
    original_context: usize,
) -> Result<RotaryVariant> {
    let rope = RopeConfig::new(head_dim, base)?;
    Ok(spec.resolve(rope, original_context)?)
}

pub fn write_stdout(table: &CsvTable) -> Result<()> {
    let stdout = std::io::stdout();
    table.write_to(stdout.lock())?;
    Ok(())
}

pub fn rope_dump_artifact(out: &Path, table: &CsvTable, hash: String) -> Result<Vec<PathBuf>> {
    let mut s = Staging::new("rope-dump", hash, 0);
    s.push(Artifact::new("rope_dump.csv", table.to_csv_string().into_bytes()));
    s.commit(out)
}
