//! `visl impute`: fill the missing cells of a data file with a trained
//! model.  The output is a line-wise rewrite of the input, so every
//! observed cell keeps its original bytes; only missing cells change.

use crate::archive::load_model;
use crate::config::{persist_effective, CommonArgs};
use std::path::PathBuf;
use visl_core::data::{load_csv, Dataset};
use visl_core::graph::harden;
use visl_core::impute::{impute, GraphDraw, Imputation};
use visl_core::tensor::streams;
use visl_core::{Error, Result, Rng};

#[derive(clap::Args, Debug)]
pub struct Args {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Trained model archive
    #[arg(long)]
    pub archive: Option<PathBuf>,
    /// Data CSV with missing (empty or NaN) cells
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Monte-Carlo draws averaged per missing cell
    #[arg(long)]
    pub mc_samples: Option<usize>,
    /// Decode through one thresholded graph instead of posterior samples
    #[arg(long)]
    pub hard_graph: bool,
    /// Threshold for --hard-graph
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Relaxation temperature for posterior samples
    #[arg(long)]
    pub tau: Option<f64>,
}

pub fn run(args: Args) -> Result<()> {
    let mut cfg = args.common.resolve()?;
    if args.archive.is_some() {
        cfg.archive = args.archive;
    }
    if args.data.is_some() {
        cfg.data = args.data;
    }
    if let Some(v) = args.mc_samples {
        cfg.mc_samples = v;
    }
    if args.hard_graph {
        cfg.hard_graph = true;
    }
    if let Some(v) = args.threshold {
        cfg.threshold = v;
    }
    if let Some(v) = args.tau {
        cfg.tau = v;
    }
    cfg.validate()?;
    let archive_path = cfg
        .archive
        .clone()
        .ok_or_else(|| Error::Contract("impute needs --archive".into()))?;
    let data_path = cfg
        .data
        .clone()
        .ok_or_else(|| Error::Contract("impute needs --data".into()))?;
    let out = persist_effective(&cfg, "impute")?;

    let model = load_model(&archive_path)?;
    let raw = load_csv(&data_path, None)?;
    if raw.variable_names() != model.variable_names {
        return Err(Error::Contract(format!(
            "{}: variables do not match the archive (data: {:?}; archive: {:?})",
            data_path.display(),
            raw.variable_names(),
            model.variable_names
        )));
    }
    // the archive's grouping and variable kinds are authoritative
    let ds = Dataset::new(
        raw.values().clone(),
        raw.observed().clone(),
        model.spec.clone(),
        raw.variable_names().to_vec(),
        raw.provenance().to_string(),
    )?;

    let mut rng = Rng::new(cfg.seed, streams::IMPUTE);
    let hard;
    let draw = if cfg.hard_graph {
        hard = harden(&model.graph, cfg.threshold, model.spec.group_names())?;
        GraphDraw::Hard(&hard)
    } else {
        GraphDraw::Soft { posterior: &model.graph, tau: cfg.tau }
    };
    let imp = impute(
        ds.values_flat(),
        ds.observed_flat(),
        ds.n_rows(),
        &model.spec,
        &model.params,
        draw,
        cfg.mc_samples,
        &mut rng,
    )?;

    let original = std::fs::read_to_string(&data_path)?;
    let rewritten = rewrite_filled(&original, &imp)?;
    let out_path = out.join("imputed.csv");
    std::fs::write(&out_path, rewritten)?;

    let filled = imp.filled_mask.iter().filter(|&&f| f).count();
    println!(
        "filled {filled} of {} cells ({} Monte-Carlo draws) -> {}",
        imp.values.len(),
        cfg.mc_samples,
        out_path.display()
    );
    Ok(())
}

/// Rewrite a CSV, replacing exactly the filled cells and copying every
/// other byte (header, observed cells, line terminators) verbatim.
/// Assumes the plain unquoted comma layout this tool reads and writes.
fn rewrite_filled(original: &str, imp: &Imputation) -> Result<String> {
    let mut output = String::with_capacity(original.len() + 16 * imp.values.len());
    let mut row = 0usize;
    for (lineno, chunk) in original.split_inclusive('\n').enumerate() {
        if lineno == 0 {
            output.push_str(chunk); // header
            continue;
        }
        let body = chunk.strip_suffix('\n').unwrap_or(chunk);
        let (body, terminator) = match body.strip_suffix('\r') {
            Some(b) if chunk.ends_with('\n') => (b, &chunk[b.len()..]),
            _ => (body, &chunk[body.len()..]),
        };
        if body.is_empty() {
            output.push_str(chunk); // blank line; the reader skipped it too
            continue;
        }
        if row >= imp.rows {
            return Err(Error::Data(format!(
                "line {}: more data rows than the parsed table ({})",
                lineno + 1,
                imp.rows
            )));
        }
        let fields: Vec<&str> = body.split(',').collect();
        if fields.len() != imp.cols {
            return Err(Error::Data(format!(
                "line {}: {} fields, expected {} (quoted cells are not supported)",
                lineno + 1,
                fields.len(),
                imp.cols
            )));
        }
        for (c, field) in fields.iter().enumerate() {
            if c > 0 {
                output.push(',');
            }
            if imp.filled_mask[row * imp.cols + c] {
                output.push_str(&imp.values[row * imp.cols + c].to_string());
            } else {
                output.push_str(field);
            }
        }
        output.push_str(terminator);
        row += 1;
    }
    if row != imp.rows {
        return Err(Error::Data(format!(
            "file holds {row} data rows, the parsed table {}",
            imp.rows
        )));
    }
    Ok(output)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn imp(rows: usize, cols: usize, values: Vec<f64>, filled: Vec<bool>) -> Imputation {
        Imputation { values, filled_mask: filled, rows, cols }
    }

    #[test]
    fn fully_observed_input_is_returned_byte_identical() {
        // deliberately quirky but unquoted formatting: padded numbers, no
        // trailing newline
        let text = "a,b\n1.50,2\n0.25,3";
        let out = rewrite_filled(text, &imp(2, 2, vec![1.5, 2.0, 0.25, 3.0], vec![false; 4]))
            .unwrap();
        assert_eq!(out, text);
    }

    #[test]
    fn only_missing_cells_change_and_crlf_survives() {
        let text = "a,b\r\n1.50,\r\n,3\r\n";
        let out = rewrite_filled(
            text,
            &imp(2, 2, vec![1.5, 0.5, -2.0, 3.0], vec![false, true, true, false]),
        )
        .unwrap();
        assert_eq!(out, "a,b\r\n1.50,0.5\r\n-2,3\r\n");
    }

    #[test]
    fn ragged_rows_are_reported_with_their_line_number() {
        let text = "a,b\n1,2\n3\n";
        match rewrite_filled(text, &imp(2, 2, vec![0.0; 4], vec![false; 4])) {
            Err(Error::Data(msg)) => assert!(msg.contains("line 3"), "{msg}"),
            other => panic!("{:?}", other.err()),
        }
    }
}
