//! Needle-in-a-haystack grids and sliding-window perplexity curves.

use serde::Serialize;

use crate::analysis::EntropyReport;
use crate::error::{Error, Result};
use crate::model::{log_sum_exp, Decoding, TinyModel};
use crate::report::{fmt_f64, CsvTable};
use crate::rope::RotaryVariant;
use crate::seed::{rng_from, split_seed};
use crate::task::{NeedleSequence, SyntheticTask};

pub const DEFAULT_DEPTHS: [f64; 5] = [0.0, 25.0, 50.0, 75.0, 100.0];
pub const DEFAULT_CASES_PER_CELL: usize = 3;

/// Powers of two from `train_length / 2` up to `8 * train_length`.
pub fn default_grid_lengths(train_length: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut n = (train_length / 2).max(1);
    while n <= 8 * train_length {
        out.push(n);
        n *= 2;
    }
    out
}

// ── Needle cases ────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleCase {
    pub haystack_length: usize,
    pub depth_percent: f64,
    pub seed: u64,
    pub sequence: NeedleSequence,
}

/// Deterministic in `seed`: filler, key and value all come from one stream.
pub fn build_needle_case(
    task: &SyntheticTask,
    haystack_length: usize,
    depth_percent: f64,
    seed: u64,
) -> Result<NeedleCase> {
    let mut rng = rng_from(seed);
    let sequence = task.needle_sequence(&mut rng, haystack_length, depth_percent)?;
    Ok(NeedleCase {
        haystack_length,
        depth_percent,
        seed,
        sequence,
    })
}

/// Seed of case `index` in the cell `(length, depth)`; independent of the
/// variant so every variant sees the same haystacks.
pub fn case_seed(seed: u64, length: usize, depth_percent: f64, index: usize) -> u64 {
    split_seed(seed, &format!("needle/{length}/{depth_percent}/{index}"))
}

// ── Needle grid ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct GridParams {
    /// Total tokens per case: prompt plus answer.
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    pub cases_per_cell: usize,
    pub seed: u64,
    pub threads: usize,
}

impl GridParams {
    pub fn validate(&self) -> Result<()> {
        if self.lengths.is_empty() || self.depths.is_empty() {
            return Err(Error::Config("grid needs at least one length and one depth".into()));
        }
        if self.cases_per_cell == 0 {
            return Err(Error::Config("cases_per_cell must be >= 1".into()));
        }
        if let Some(d) = self.depths.iter().find(|d| !(0.0..=100.0).contains(*d)) {
            return Err(Error::Config(format!("depth {d} outside [0, 100]")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleCell {
    pub length: usize,
    pub depth_percent: f64,
    /// Majority of cases reproduced the value span exactly.
    pub pass: bool,
    pub passes: usize,
    pub cases_run: usize,
    /// Mean over cases of the answer-step attention entropy.
    pub mean_entropy_nats: f64,
    /// Set when the model failed to run; such cells are neither pass nor fail.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeedleGrid {
    pub lengths: Vec<usize>,
    pub depths: Vec<f64>,
    /// Length-major: cell `(li, di)` is at `li * depths.len() + di`.
    pub cells: Vec<NeedleCell>,
}

impl NeedleGrid {
    pub fn cell(&self, length_index: usize, depth_index: usize) -> &NeedleCell {
        &self.cells[length_index * self.depths.len() + depth_index]
    }

    fn cells_at(&self, length: usize) -> impl Iterator<Item = &NeedleCell> {
        self.cells
            .iter()
            .filter(move |c| c.length == length && c.error.is_none())
    }

    /// Fraction of individual cases at `length` that passed.
    pub fn pass_rate(&self, length: usize) -> Option<f64> {
        let (p, n) = self
            .cells_at(length)
            .fold((0, 0), |(p, n), c| (p + c.passes, n + c.cases_run));
        (n > 0).then(|| p as f64 / n as f64)
    }

    /// Fraction of cells at `length` scored as a pass.
    pub fn cell_pass_rate(&self, length: usize) -> Option<f64> {
        let (p, n) = self
            .cells_at(length)
            .fold((0, 0), |(p, n), c| (p + c.pass as usize, n + 1));
        (n > 0).then(|| p as f64 / n as f64)
    }

    /// Mean of the cell entropies at `length`.
    pub fn mean_entropy(&self, length: usize) -> Option<f64> {
        let (s, n) = self
            .cells_at(length)
            .fold((0.0, 0), |(s, n), c| (s + c.mean_entropy_nats, n + 1));
        (n > 0).then(|| s / n as f64)
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["length", "depth_percent", "pass", "mean_entropy_nats", "cases_run"]);
        for c in &self.cells {
            let pass = match c.error {
                Some(_) => "error".to_string(),
                None => c.pass.to_string(),
            };
            t.push(vec![
                c.length.to_string(),
                fmt_f64(c.depth_percent),
                pass,
                fmt_f64(c.mean_entropy_nats),
                c.cases_run.to_string(),
            ]);
        }
        t
    }
}

fn run_cell(
    model: &TinyModel,
    task: &SyntheticTask,
    variant: &RotaryVariant,
    params: &GridParams,
    length: usize,
    depth: f64,
) -> NeedleCell {
    let mut cell = NeedleCell {
        length,
        depth_percent: depth,
        pass: false,
        passes: 0,
        cases_run: 0,
        mean_entropy_nats: f64::NAN,
        error: None,
    };
    let outcome = (|| -> Result<(usize, f64)> {
        let haystack = task.haystack_for_total(length)?;
        let mut passes = 0;
        let mut entropy_sum = 0.0;
        for i in 0..params.cases_per_cell {
            let case = build_needle_case(task, haystack, depth, case_seed(params.seed, length, depth, i))?;
            let seq = &case.sequence;
            let gen = model.generate_with(&seq.prompt, seq.answer.len(), Decoding::Greedy, variant)?;
            if gen.tokens == seq.answer {
                passes += 1;
            }
            entropy_sum += EntropyReport::from_records(&gen.records)?.mean;
        }
        Ok((passes, entropy_sum / params.cases_per_cell as f64))
    })();
    match outcome {
        Ok((passes, entropy)) => {
            cell.passes = passes;
            cell.cases_run = params.cases_per_cell;
            cell.pass = 2 * passes > params.cases_per_cell;
            cell.mean_entropy_nats = entropy;
        }
        Err(e) => cell.error = Some(e.to_string()),
    }
    cell
}

/// Evaluates every (length, depth) cell. Cells are split across
/// `params.threads` workers and stored by index, so the result does not
/// depend on the thread count.
pub fn run_needle_grid(
    model: &TinyModel,
    task: &SyntheticTask,
    variant: &RotaryVariant,
    params: &GridParams,
) -> Result<NeedleGrid> {
    params.validate()?;
    task.validate()?;
    check_variant(model, variant)?;
    let cap = model.config().inference_cap;
    if let Some(&n) = params.lengths.iter().find(|&&n| n > cap) {
        return Err(Error::CapExceeded { len: n, cap });
    }
    let coords: Vec<(usize, f64)> = params
        .lengths
        .iter()
        .flat_map(|&l| params.depths.iter().map(move |&d| (l, d)))
        .collect();
    let cells = parallel_map(&coords, params.threads, |&(l, d)| {
        run_cell(model, task, variant, params, l, d)
    });
    Ok(NeedleGrid {
        lengths: params.lengths.clone(),
        depths: params.depths.clone(),
        cells,
    })
}

fn check_variant(model: &TinyModel, variant: &RotaryVariant) -> Result<()> {
    variant.validate()?;
    if variant.head_dim() != model.config().head_dim {
        return Err(Error::Config(format!(
            "variant head_dim {} differs from model head_dim {}",
            variant.head_dim(),
            model.config().head_dim
        )));
    }
    Ok(())
}

/// Order-preserving map over contiguous chunks on scoped threads.
fn parallel_map<T: Sync, U: Send, F: Fn(&T) -> U + Sync>(items: &[T], threads: usize, f: F) -> Vec<U> {
    let threads = threads.clamp(1, items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items
            .chunks(chunk)
            .map(|part| s.spawn(|| part.iter().map(&f).collect::<Vec<_>>()))
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

// ── Perplexity ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, PartialEq)]
pub struct PplParams {
    pub eval_lengths: Vec<usize>,
    /// Window start spacing; `None` means non-overlapping windows.
    pub stride: Option<usize>,
    /// Cap on windows per length, taken from the start of the corpus.
    pub max_windows: Option<usize>,
    pub threads: usize,
}

impl PplParams {
    pub fn new(eval_lengths: Vec<usize>) -> Self {
        Self {
            eval_lengths,
            stride: None,
            max_windows: None,
            threads: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PerplexityCurve {
    pub eval_lengths: Vec<usize>,
    pub ppl: Vec<f64>,
    pub windows: Vec<usize>,
}

impl PerplexityCurve {
    pub fn at(&self, length: usize) -> Option<f64> {
        self.eval_lengths
            .iter()
            .position(|&n| n == length)
            .map(|i| self.ppl[i])
    }

    pub fn to_csv(&self) -> CsvTable {
        let mut t = CsvTable::new(&["eval_length", "ppl"]);
        for (n, p) in self.eval_lengths.iter().zip(&self.ppl) {
            t.push(vec![n.to_string(), fmt_f64(*p)]);
        }
        t
    }
}

/// Summed next-token NLL over one window and the number of predictions.
pub fn window_nll(model: &TinyModel, variant: &RotaryVariant, window: &[usize]) -> Result<(f64, usize)> {
    let vocab = model.config().vocab_size;
    let logits = model.logits_with(window, variant)?;
    let mut total = 0.0;
    for (i, &target) in window[1..].iter().enumerate() {
        let row = &logits[i * vocab..(i + 1) * vocab];
        total += log_sum_exp(row) - row[target];
    }
    if !total.is_finite() {
        return Err(Error::Numeric(format!("window NLL is {total}")));
    }
    Ok((total, window.len() - 1))
}

/// `exp(mean NLL)` per evaluation length over windows of that length.
pub fn run_ppl_curve(
    model: &TinyModel,
    variant: &RotaryVariant,
    corpus: &[usize],
    params: &PplParams,
) -> Result<PerplexityCurve> {
    check_variant(model, variant)?;
    let max = *params
        .eval_lengths
        .iter()
        .max()
        .ok_or_else(|| Error::Config("no evaluation lengths".into()))?;
    if params.eval_lengths.iter().any(|&n| n < 2) {
        return Err(Error::Config("evaluation lengths must be >= 2".into()));
    }
    if corpus.len() < max {
        return Err(Error::TooShort(format!(
            "corpus has {} tokens, longest window is {max}",
            corpus.len()
        )));
    }
    if params.stride == Some(0) || params.max_windows == Some(0) {
        return Err(Error::Config("stride and max_windows must be >= 1".into()));
    }
    let mut ppl = Vec::with_capacity(params.eval_lengths.len());
    let mut windows = Vec::with_capacity(params.eval_lengths.len());
    for &n in &params.eval_lengths {
        let stride = params.stride.unwrap_or(n);
        let mut starts: Vec<usize> = (0..=corpus.len() - n).step_by(stride).collect();
        if let Some(cap) = params.max_windows {
            starts.truncate(cap);
        }
        let parts = parallel_map(&starts, params.threads, |&s| {
            window_nll(model, variant, &corpus[s..s + n])
        });
        let mut total = 0.0;
        let mut count = 0;
        for p in parts {
            let (t, c) = p?;
            total += t;
            count += c;
        }
        ppl.push((total / count as f64).exp());
        windows.push(starts.len());
    }
    Ok(PerplexityCurve {
        eval_lengths: params.eval_lengths.clone(),
        ppl,
        windows,
    })
}

// ── Variant comparison ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct VariantRun {
    pub name: String,
    pub variant: RotaryVariant,
    pub grid: Option<NeedleGrid>,
    pub curve: Option<PerplexityCurve>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LengthValue {
    pub length: usize,
    pub value: f64,
}

/// One summary line per (variant, metric).
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub metric: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub by_length: Vec<LengthValue>,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub runs: Vec<VariantRun>,
    pub summary: Vec<SummaryRow>,
}

#[derive(Debug, Clone)]
pub struct CompareParams<'a> {
    pub grid: Option<GridParams>,
    pub ppl: Option<(&'a [usize], PplParams)>,
    /// Perplexity ceiling for the "longest usable length" metric.
    pub ppl_threshold: f64,
}

/// Runs the requested protocols once per variant and summarizes them.
pub fn compare_variants(
    model: &TinyModel,
    task: &SyntheticTask,
    variants: &[(String, RotaryVariant)],
    params: &CompareParams<'_>,
) -> Result<Comparison> {
    for (_, v) in variants {
        check_variant(model, v)?;
    }
    let mut runs = Vec::with_capacity(variants.len());
    for (name, variant) in variants {
        let grid = match &params.grid {
            Some(g) => Some(run_needle_grid(model, task, variant, g)?),
            None => None,
        };
        let curve = match &params.ppl {
            Some((corpus, p)) => Some(run_ppl_curve(model, variant, corpus, p)?),
            None => None,
        };
        runs.push(VariantRun {
            name: name.clone(),
            variant: *variant,
            grid,
            curve,
        });
    }
    let summary = summarize(&runs, params.ppl_threshold);
    Ok(Comparison { runs, summary })
}

pub fn summarize(runs: &[VariantRun], ppl_threshold: f64) -> Vec<SummaryRow> {
    let mut out = Vec::new();
    for run in runs {
        let row = |metric: &str| SummaryRow {
            variant: run.name.clone(),
            metric: metric.to_string(),
            value: None,
            threshold: None,
            by_length: Vec::new(),
        };
        if let Some(c) = &run.curve {
            let mut r = row("ppl");
            r.by_length = c
                .eval_lengths
                .iter()
                .zip(&c.ppl)
                .map(|(&length, &value)| LengthValue { length, value })
                .collect();
            out.push(r);
            let mut r = row("max_length_ppl_below");
            r.threshold = Some(ppl_threshold);
            r.value = c
                .eval_lengths
                .iter()
                .zip(&c.ppl)
                .filter(|(_, &p)| p < ppl_threshold)
                .map(|(&n, _)| n as f64)
                .fold(None, |m: Option<f64>, n| Some(m.map_or(n, |m| m.max(n))));
            out.push(r);
        }
        if let Some(g) = &run.grid {
            let per_length = |f: &dyn Fn(usize) -> Option<f64>| {
                g.lengths
                    .iter()
                    .filter_map(|&length| f(length).map(|value| LengthValue { length, value }))
                    .collect::<Vec<_>>()
            };
            let mut r = row("needle_pass_rate");
            r.by_length = per_length(&|n| g.pass_rate(n));
            out.push(r);
            let mut r = row("needle_mean_entropy");
            r.by_length = per_length(&|n| g.mean_entropy(n));
            out.push(r);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::test_support::small_config;
    use crate::rope::RopeConfig;

    fn task() -> SyntheticTask {
        SyntheticTask {
            key_alphabet: 2,
            value_alphabet: 3,
            filler_alphabet: 5,
            ..SyntheticTask::default()
        }
    }

    #[test]
    fn default_lengths_are_geometric() {
        assert_eq!(default_grid_lengths(128), vec![64, 128, 256, 512, 1024]);
    }

    #[test]
    fn needle_case_boundaries() {
        let t = SyntheticTask {
            key_len: 2,
            value_len: 2,
            ..SyntheticTask::default()
        };
        let a = build_needle_case(&t, 100, 50.0, 9).unwrap();
        assert_eq!(a.sequence.needle_offset, 48);
        assert_eq!(a, build_needle_case(&t, 100, 50.0, 9).unwrap());
        let start = build_needle_case(&t, 100, 0.0, 9).unwrap();
        assert_eq!(start.sequence.needle_offset, 0);
        assert_eq!(&start.sequence.prompt[..2], &start.sequence.key[..]);
        let end = build_needle_case(&t, 100, 100.0, 9).unwrap();
        assert_eq!(end.sequence.needle_offset, 96);
        assert_eq!(&end.sequence.prompt[98..100], &end.sequence.answer[..]);
        assert_eq!(end.sequence.prompt[100], crate::task::QUERY_TOKEN);
        assert!(matches!(build_needle_case(&t, 8, 50.0, 1), Err(Error::TooShort(_))));
    }

    #[test]
    fn grid_bookkeeping() {
        let mut cfg = small_config(4);
        cfg.vocab_size = task().vocab_size();
        let m = TinyModel::init(cfg).unwrap();
        let params = GridParams {
            lengths: vec![12, 14, 16, 18, 20],
            depths: DEFAULT_DEPTHS.to_vec(),
            cases_per_cell: 3,
            seed: 5,
            threads: 1,
        };
        let v = m.config().variant;
        let g = run_needle_grid(&m, &task(), &v, &params).unwrap();
        assert_eq!(g.cells.len(), 25);
        for c in &g.cells {
            assert_eq!(c.cases_run, 3);
            assert!(c.mean_entropy_nats >= 0.0 && c.mean_entropy_nats <= (c.length as f64).ln() + 1e-9);
        }
        let threaded = run_needle_grid(&m, &task(), &v, &GridParams { threads: 3, ..params.clone() }).unwrap();
        assert_eq!(threaded, g);
        assert_eq!(g.to_csv().rows.len(), 25);
    }

    #[test]
    fn errored_cells_are_annotated() {
        let mut cfg = small_config(4);
        cfg.vocab_size = task().vocab_size();
        let m = TinyModel::init(cfg).unwrap();
        let params = GridParams {
            lengths: vec![5, 16],
            depths: vec![50.0],
            cases_per_cell: 1,
            seed: 1,
            threads: 1,
        };
        let g = run_needle_grid(&m, &task(), &m.config().variant, &params).unwrap();
        assert!(g.cells[0].error.is_some());
        assert!(g.cells[1].error.is_none());
        assert_eq!(g.pass_rate(5), None);
        assert!(g.to_csv().to_csv_string().contains("\n5,50,error,NaN,0\n"));
    }

    #[test]
    fn uniform_model_perplexity_is_vocab() {
        let m = TinyModel::zeros(small_config(1)).unwrap();
        let corpus: Vec<usize> = (0..40).map(|i| i % 11).collect();
        let c = run_ppl_curve(&m, &m.config().variant, &corpus, &PplParams::new(vec![4, 8, 16])).unwrap();
        for p in &c.ppl {
            assert!((p - 11.0).abs() < 1e-9);
        }
        assert_eq!(c.windows, vec![10, 5, 2]);
        assert!(matches!(
            run_ppl_curve(&m, &m.config().variant, &corpus[..10], &PplParams::new(vec![16])),
            Err(Error::TooShort(_))
        ));
    }

    #[test]
    fn two_window_hand_check() {
        let m = TinyModel::init(small_config(7)).unwrap();
        let v = m.config().variant;
        let corpus = [1, 4, 2, 7, 3, 3, 9, 0, 5, 6];
        let (a, _) = window_nll(&m, &v, &corpus[..5]).unwrap();
        let (b, _) = window_nll(&m, &v, &corpus[5..]).unwrap();
        let c = run_ppl_curve(&m, &v, &corpus, &PplParams::new(vec![5])).unwrap();
        let want = (0.5 * (a / 4.0 + b / 4.0)).exp();
        assert!((c.ppl[0] - want).abs() < 1e-12);
    }

    #[test]
    fn comparison_rows_for_neutral_variants() {
        let mut cfg = small_config(4);
        cfg.vocab_size = task().vocab_size();
        let m = TinyModel::init(cfg).unwrap();
        let rope = RopeConfig::new(8, 10_000.0).unwrap();
        let corpus: Vec<usize> = (0..64).map(|i| (i * 7) % 11).collect();
        let params = CompareParams {
            grid: Some(GridParams {
                lengths: vec![16, 24],
                depths: vec![0.0, 100.0],
                cases_per_cell: 1,
                seed: 3,
                threads: 1,
            }),
            ppl: Some((&corpus, PplParams::new(vec![8, 16]))),
            ppl_threshold: 100.0,
        };
        let variants = vec![
            ("rope".to_string(), RotaryVariant::rope(rope)),
            ("pi1".to_string(), RotaryVariant::pi(rope, 1.0).unwrap()),
        ];
        let cmp = compare_variants(&m, &task(), &variants, &params).unwrap();
        assert_eq!(cmp.summary.len(), 8);
        for (a, b) in cmp.summary[..4].iter().zip(&cmp.summary[4..]) {
            assert_eq!(a.metric, b.metric);
            for (x, y) in a.by_length.iter().zip(&b.by_length) {
                assert!((x.value - y.value).abs() < 1e-9);
            }
        }
        assert_eq!(cmp.summary[1].value, Some(16.0));
    }
}
