//! CSV emission for run records, scaling tables, cost reports, and sweep
//! grids. Floats are written in shortest round-trip form so files parse
//! back losslessly.

use std::io::Write;
use std::path::Path;

use crate::analysis::{CostReport, ScalingTable, SweepResult};
use crate::error::Result;
use crate::orchestrator::RunRecord;

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(content.as_bytes())?;
    Ok(())
}

pub fn losses_csv(record: &RunRecord) -> String {
    let mut out = String::from("round,epoch,mean_train_loss\n");
    for r in &record.rounds {
        out.push_str(&format!("{},{},{}\n", r.round, r.epoch, r.mean_train_loss));
    }
    out
}

pub fn evals_csv(record: &RunRecord) -> String {
    let mut out = String::from("round,loss,perplexity\n");
    for e in &record.evals {
        out.push_str(&format!("{},{},{}\n", e.round, e.loss, e.perplexity));
    }
    out
}

/// Per-worker round log: (round, worker, bytes_out, bytes_in, blocks_attn,
/// blocks_ffn).
pub fn rounds_csv(record: &RunRecord) -> String {
    let mut out = String::from("round,worker,bytes_out,bytes_in,blocks_attn,blocks_ffn\n");
    for r in &record.rounds {
        for w in &r.workers {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.round, w.worker, w.bytes_out, w.bytes_in, w.blocks_attn, w.blocks_ffn
            ));
        }
    }
    out
}

pub fn scaling_csv(table: &ScalingTable) -> String {
    let mut out = String::from("check,x,measured,predicted,abs_err,rel_err,tolerance,pass\n");
    for r in &table.rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.check,
            r.x,
            r.measured,
            r.predicted,
            r.abs_err,
            r.rel_err,
            r.tolerance,
            r.pass()
        ));
    }
    out
}

pub fn cost_csv(report: &CostReport) -> String {
    let mut out = String::from("name,count\n");
    out.push_str(&format!("n_embd,{}\n", report.n_embd));
    out.push_str(&format!("n_pos,{}\n", report.n_pos));
    out.push_str(&format!("n_ln,{}\n", report.n_ln));
    for (l, v) in report.n_attn.iter().enumerate() {
        out.push_str(&format!("n_attn.{l},{v}\n"));
    }
    for (l, v) in report.n_ffn.iter().enumerate() {
        out.push_str(&format!("n_ffn.{l},{v}\n"));
    }
    for (l, v) in report.n_layer.iter().enumerate() {
        out.push_str(&format!("n_layer.{l},{v}\n"));
    }
    out.push_str(&format!("n_proj,{}\n", report.n_proj));
    out.push_str(&format!("n_model,{}\n", report.n_model));
    out.push_str(&format!("n_model_with_pos,{}\n", report.n_model_with_pos));
    out.push_str(&format!("memory_bytes,{}\n", report.memory_bytes));
    out
}

/// Grid cells: (train_k, eval_k, scope, n, mean, std, min, max).
pub fn sweep_csv(result: &SweepResult) -> String {
    let mut out = String::from("metric,train_ratio,eval_ratio,scope,n,mean,std,min,max\n");
    for c in &result.cells {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            result.metric,
            c.train_ratio,
            c.eval_ratio,
            c.scope,
            c.n,
            c.mean,
            c.std,
            c.min,
            c.max
        ));
    }
    out
}

pub fn write_csv(path: &Path, content: &str) -> Result<()> {
    write_file(path, content)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::ScalingRow;

    #[test]
    fn csv_floats_parse_back_losslessly() {
        let mut table = ScalingTable::default();
        let vals = [0.707_106_78_f64, 1.0 / 3.0, 2.5e-17];
        for (i, &v) in vals.iter().enumerate() {
            table.rows.push(ScalingRow {
                check: format!("row{i}"),
                x: v,
                measured: v,
                predicted: v,
                abs_err: 0.0,
                rel_err: 0.0,
                tolerance: 0.02,
            });
        }
        let csv = scaling_csv(&table);
        for (line, &v) in csv.lines().skip(1).zip(&vals) {
            let cols: Vec<&str> = line.split(',').collect();
            assert_eq!(cols[1].parse::<f64>().unwrap(), v);
            assert_eq!(cols[2].parse::<f64>().unwrap(), v);
        }
    }
}
