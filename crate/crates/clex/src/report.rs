//! Evaluation reports: CSV rows, JSON mirror and the comparison summary.

use serde::{Deserialize, Serialize};

pub const CSV_HEADER: &str = "method,train_len,eval_len,eval_t,attn_scale_mult,ppl,acc";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub train_len: usize,
    pub eval_len: usize,
    pub eval_t: f64,
    pub attn_scale_mult: f64,
    pub ppl: f64,
    pub acc: f64,
    pub nll_sum: f64,
    pub tokens: usize,
    pub windows: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedLength {
    pub method: String,
    pub eval_len: usize,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub skipped: Vec<SkippedLength>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub seed: u64,
    pub commit: String,
    pub config_hash: String,
    pub xi_form: String,
    pub precision: String,
}

#[derive(Serialize)]
struct ReportDoc<'a> {
    meta: &'a ReportMeta,
    rows: &'a [EvalRow],
    skipped: &'a [SkippedLength],
}

impl EvalReport {
    pub fn merge(&mut self, other: EvalReport) {
        self.rows.extend(other.rows);
        self.skipped.extend(other.skipped);
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                r.method, r.train_len, r.eval_len, r.eval_t, r.attn_scale_mult, r.ppl, r.acc
            ));
        }
        out
    }

    pub fn to_json(&self, meta: &ReportMeta) -> String {
        let doc = ReportDoc {
            meta,
            rows: &self.rows,
            skipped: &self.skipped,
        };
        serde_json::to_string_pretty(&doc).expect("report serializes") + "\n"
    }

    /// Rows of one method in report order.
    pub fn method_rows<'a>(&'a self, method: &'a str) -> impl Iterator<Item = &'a EvalRow> + 'a {
        self.rows.iter().filter(move |r| r.method == method)
    }

    pub fn methods(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.method) {
                out.push(r.method.clone());
            }
        }
        out
    }

    /// Smallest evaluation length at which `method`'s perplexity exceeds
    /// twice its perplexity at the training length (or at its shortest
    /// evaluated length when the training length was not evaluated).
    pub fn breakpoint(&self, method: &str) -> Option<usize> {
        let mut rows: Vec<&EvalRow> = self.method_rows(method).collect();
        rows.sort_by_key(|r| r.eval_len);
        let reference = rows.iter().find(|r| r.eval_len == r.train_len).or(rows.first())?;
        rows.iter()
            .filter(|r| r.eval_len >= reference.eval_len)
            .find(|r| !(r.ppl <= 2.0 * reference.ppl))
            .map(|r| r.eval_len)
    }

    /// Aligned text table of every row plus each method's breakpoint.
    pub fn summary_table(&self) -> String {
        let headers = ["method", "train_len", "eval_len", "eval_t", "attn_scale_mult", "ppl", "acc"];
        let cells: Vec<[String; 7]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.method.clone(),
                    r.train_len.to_string(),
                    r.eval_len.to_string(),
                    format!("{:.6}", r.eval_t),
                    format!("{:.6}", r.attn_scale_mult),
                    format!("{:.6}", r.ppl),
                    format!("{:.6}", r.acc),
                ]
            })
            .collect();
        let widths: Vec<usize> = (0..7)
            .map(|c| cells.iter().map(|row| row[c].len()).chain([headers[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |row: &[&str]| -> String {
            let parts: Vec<String> = row
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (s, w))| if i == 0 { format!("{s:<w$}") } else { format!("{s:>w$}") })
                .collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut out = line(&headers);
        out.push_str(&line(&widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().iter().map(String::as_str).collect::<Vec<_>>()));
        for row in &cells {
            out.push_str(&line(&row.iter().map(String::as_str).collect::<Vec<_>>()));
        }
        out.push('\n');
        for m in self.methods() {
            match self.breakpoint(&m) {
                Some(len) => out.push_str(&format!("{m}: ppl exceeds 2x its train-length value at eval_len {len}\n")),
                None => out.push_str(&format!("{m}: ppl stays within 2x of its train-length value\n")),
            }
        }
        for s in &self.skipped {
            out.push_str(&format!("{} at {}: skipped ({})\n", s.method, s.eval_len, s.reason));
        }
        out
    }
}
