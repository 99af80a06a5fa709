//! Bulk expression tables: ingestion, zero-median gene filtering, the
//! `log10(1 + a)` transform and case-wise stratified splitting.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bagging::Split;
use crate::error::{bail, Error, Result};

/// Cases × genes expression matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneTable {
    pub gene_ids: Vec<String>,
    pub cases: Vec<String>,
    /// Row-major, one row per case.
    pub values: Vec<f64>,
    pub transformed: bool,
    /// Genes removed by [`filter_median_zero`], in original order.
    pub dropped: Vec<String>,
}

impl GeneTable {
    pub fn new(gene_ids: Vec<String>, cases: Vec<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() != gene_ids.len() * cases.len() {
            bail!(
                Dimension,
                "{} values for {} cases x {} genes",
                values.len(),
                cases.len(),
                gene_ids.len()
            );
        }
        let mut seen = HashSet::new();
        for g in &gene_ids {
            if !seen.insert(g) {
                bail!(Input, "duplicate gene id {g}");
            }
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite() || *v < 0.0) {
            bail!(
                Input,
                "case {} gene {}: expression {} is negative or not finite",
                cases[i / gene_ids.len()],
                gene_ids[i % gene_ids.len()],
                values[i]
            );
        }
        Ok(Self {
            gene_ids,
            cases,
            values,
            transformed: false,
            dropped: Vec::new(),
        })
    }

    pub fn n_genes(&self) -> usize {
        self.gene_ids.len()
    }

    pub fn n_cases(&self) -> usize {
        self.cases.len()
    }

    pub fn row(&self, case: usize) -> &[f64] {
        let g = self.n_genes();
        &self.values[case * g..(case + 1) * g]
    }

    pub fn case_row(&self, case_id: &str) -> Option<&[f64]> {
        self.cases.iter().position(|c| c == case_id).map(|i| self.row(i))
    }

    pub fn column(&self, gene: usize) -> Vec<f64> {
        (0..self.n_cases()).map(|c| self.row(c)[gene]).collect()
    }

    /// Matrix TSV: header `gene_id<TAB>case...`, one row per gene.
    pub fn to_matrix_tsv(&self) -> String {
        let mut out = String::from("gene_id");
        for c in &self.cases {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (g, id) in self.gene_ids.iter().enumerate() {
            out.push_str(id);
            for c in 0..self.n_cases() {
                write!(out, "\t{}", self.row(c)[g]).unwrap();
            }
            out.push('\n');
        }
        out
    }
}

fn parse_value(s: &str, line: usize) -> Result<f64> {
    let v: f64 = s
        .trim()
        .parse()
        .map_err(|_| Error::Input(format!("line {line}: cannot parse {s:?} as a number")))?;
    if !v.is_finite() {
        bail!(Input, "line {line}: non-finite expression {s:?}");
    }
    if v < 0.0 {
        bail!(Input, "line {line}: negative expression {v}");
    }
    Ok(v)
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim_end_matches('\r')))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

/// Parses one per-case `gene_id<TAB>value` file, keeping file order.
pub fn parse_case_file(text: &str) -> Result<Vec<(String, f64)>> {
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for (line, l) in data_lines(text) {
        let mut fields = l.split('\t');
        let (Some(id), Some(val), None) = (fields.next(), fields.next(), fields.next()) else {
            bail!(Input, "line {line}: expected gene_id<TAB>value");
        };
        if !seen.insert(id.to_string()) {
            bail!(Input, "line {line}: duplicate gene id {id}");
        }
        out.push((id.to_string(), parse_value(val, line)?));
    }
    Ok(out)
}

/// Assembles per-case files into one table in the first file's gene order.
///
/// A case listed more than once keeps its first file. Every case must report
/// exactly the same gene set; nothing is imputed.
pub fn ingest_case_files(files: &[(String, String)]) -> Result<GeneTable> {
    let mut genes: Option<Vec<String>> = None;
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut cases = Vec::new();
    let mut values = Vec::new();
    let mut seen_cases = HashSet::new();
    for (case, text) in files {
        if !seen_cases.insert(case.clone()) {
            warn!("case {case} has more than one expression file; keeping the first");
            continue;
        }
        let rows = parse_case_file(text).map_err(|e| Error::Input(format!("case {case}: {e}")))?;
        let ids = genes.get_or_insert_with(|| {
            index = rows.iter().enumerate().map(|(i, (g, _))| (g.clone(), i)).collect();
            rows.iter().map(|(g, _)| g.clone()).collect()
        });
        if rows.len() != ids.len() {
            bail!(
                Input,
                "case {case} lists {} genes, expected {}",
                rows.len(),
                ids.len()
            );
        }
        let mut row = vec![f64::NAN; ids.len()];
        for (g, v) in rows {
            let Some(&i) = index.get(&g) else {
                bail!(Input, "case {case}: gene {g} is not in the first file");
            };
            row[i] = v;
        }
        if let Some(i) = row.iter().position(|v| v.is_nan()) {
            bail!(Input, "case {case}: gene {} is missing", ids[i]);
        }
        cases.push(case.clone());
        values.extend(row);
    }
    GeneTable::new(genes.unwrap_or_default(), cases, values)
}

/// Parses a matrix TSV with a header row of case ids and one row per gene.
pub fn ingest_matrix(text: &str) -> Result<GeneTable> {
    let mut lines = data_lines(text);
    let Some((_, header)) = lines.next() else {
        bail!(Input, "empty expression matrix");
    };
    let cases: Vec<String> = header.split('\t').skip(1).map(str::to_string).collect();
    if cases.is_empty() {
        bail!(Input, "matrix header lists no cases");
    }
    let mut gene_ids = Vec::new();
    let mut by_gene = Vec::new();
    for (line, l) in lines {
        let fields: Vec<&str> = l.split('\t').collect();
        if fields.len() != cases.len() + 1 {
            bail!(
                Input,
                "line {line}: {} fields, header has {}",
                fields.len(),
                cases.len() + 1
            );
        }
        gene_ids.push(fields[0].to_string());
        for f in &fields[1..] {
            by_gene.push(parse_value(f, line)?);
        }
    }
    let g = gene_ids.len();
    let n = cases.len();
    let mut values = vec![0.0; g * n];
    for gi in 0..g {
        for c in 0..n {
            values[c * g + gi] = by_gene[gi * n + c];
        }
    }
    GeneTable::new(gene_ids, cases, values)
}

/// Median with the mean of the two central order statistics for even counts.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Drops every gene whose median over cases is zero. Must run on raw values.
pub fn filter_median_zero(table: &GeneTable) -> Result<GeneTable> {
    if table.transformed {
        bail!(Contract, "median filter must run before the log transform");
    }
    let keep: Vec<usize> = (0..table.n_genes())
        .filter(|&g| median(&table.column(g)) > 0.0)
        .collect();
    let keep_set: HashSet<usize> = keep.iter().copied().collect();
    let mut values = Vec::with_capacity(keep.len() * table.n_cases());
    for c in 0..table.n_cases() {
        let row = table.row(c);
        values.extend(keep.iter().map(|&g| row[g]));
    }
    let mut dropped = table.dropped.clone();
    dropped.extend(
        (0..table.n_genes())
            .filter(|g| !keep_set.contains(g))
            .map(|g| table.gene_ids[g].clone()),
    );
    Ok(GeneTable {
        gene_ids: keep.iter().map(|&g| table.gene_ids[g].clone()).collect(),
        cases: table.cases.clone(),
        values,
        transformed: false,
        dropped,
    })
}

pub fn log_transform(table: &GeneTable) -> Result<GeneTable> {
    if table.transformed {
        bail!(Contract, "table is already log-transformed");
    }
    if table.values.iter().any(|&v| v < 0.0) {
        bail!(Contract, "log transform of negative expression");
    }
    Ok(GeneTable {
        values: table.values.iter().map(|&a| a.ln_1p() / std::f64::consts::LN_10).collect(),
        transformed: true,
        ..table.clone()
    })
}

/// Case → split assignment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub fractions: [f64; 3],
    pub assignment: BTreeMap<String, Split>,
}

impl SplitSpec {
    pub fn split_of(&self, case: &str) -> Option<Split> {
        self.assignment.get(case).copied()
    }
}

pub const DEFAULT_FRACTIONS: [f64; 3] = [0.8, 0.1, 0.1];

/// Largest-remainder apportionment of `n` items over `fractions`.
fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let exact: Vec<f64> = fractions.iter().map(|f| f * n as f64).collect();
    let mut counts = [0usize; 3];
    for i in 0..3 {
        counts[i] = (exact[i] + 1e-9).floor() as usize;
    }
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - counts[a] as f64;
        let rb = exact[b] - counts[b] as f64;
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    counts
}

/// Case-wise split, stratified by label and deterministic under `seed`.
/// `cases` pairs every case id with its class label.
pub fn split_cases(cases: &[(String, u32)], fractions: [f64; 3], seed: u64) -> Result<SplitSpec> {
    if fractions.iter().any(|&f| !(0.0..=1.0).contains(&f))
        || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9
    {
        bail!(Config, "split fractions {fractions:?} must be in [0,1] and sum to 1");
    }
    let mut by_class: BTreeMap<u32, Vec<String>> = BTreeMap::new();
    let mut seen = HashMap::new();
    for (case, label) in cases {
        match seen.insert(case.clone(), *label) {
            Some(prev) if prev != *label => {
                bail!(Input, "case {case} carries labels {prev} and {label}")
            }
            Some(_) => continue,
            None => by_class.entry(*label).or_default().push(case.clone()),
        }
    }
    let max_label = by_class.keys().last().copied().unwrap_or(0);
    for l in 0..=max_label {
        if !by_class.contains_key(&l) {
            warn!("class {l} has no cases");
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = BTreeMap::new();
    for (_, mut members) in by_class {
        members.sort();
        members.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(members.len(), &fractions);
        for (i, case) in members.into_iter().enumerate() {
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            assignment.insert(case, split);
        }
    }
    Ok(SplitSpec {
        fractions,
        assignment,
    })
}
