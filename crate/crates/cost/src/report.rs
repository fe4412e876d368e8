//! Cost tables as CSV and markdown.

use std::io::Write;

use serde::{Deserialize, Serialize};

use ratplus_core::kv_cache::STORAGE_BYTES;
use ratplus_core::patterns::{expected_cache_entries, SparsePatternSpec};
use ratplus_core::{Error, Result};

use crate::flops::{flops_per_token, Dims};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub pattern: String,
    #[serde(rename = "T")]
    pub t: usize,
    pub flops_per_token: f64,
    pub cache_entries: usize,
    pub measured_ns: Option<u64>,
}

impl CostRow {
    /// Row for decoding position `t`: FLOPs of that query and the cache
    /// footprint once it has been absorbed.
    pub fn analytic(spec: &SparsePatternSpec, t: usize, dims: Dims) -> Result<Self> {
        Ok(CostRow {
            pattern: spec.label(),
            t,
            flops_per_token: flops_per_token(spec, t, dims)?.total,
            cache_entries: expected_cache_entries(t + 1, spec),
            measured_ns: None,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub seed: u64,
    pub storage_precision: String,
    pub machine_note: String,
}

impl CostReport {
    pub fn new(rows: Vec<CostRow>, seed: u64, machine_note: impl Into<String>) -> Self {
        CostReport { rows, seed, storage_precision: format!("f{}", STORAGE_BYTES * 8), machine_note: machine_note.into() }
    }
}

pub fn emit_csv<W: Write>(rows: &[CostRow], w: W) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Empty { op: "emit_report" });
    }
    let mut wr = csv::Writer::from_writer(w);
    for r in rows {
        wr.serialize(r).map_err(|e| Error::Format(e.to_string()))?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_csv<R: std::io::Read>(r: R) -> Result<Vec<CostRow>> {
    csv::Reader::from_reader(r)
        .deserialize()
        .collect::<std::result::Result<Vec<CostRow>, _>>()
        .map_err(|e| Error::Format(e.to_string()))
}

pub fn emit_markdown(report: &CostReport) -> Result<String> {
    if report.rows.is_empty() {
        return Err(Error::Empty { op: "emit_report" });
    }
    let mut s = String::from("| pattern | T | flops_per_token | cache_entries | measured_ns |\n|---|---:|---:|---:|---:|\n");
    for r in &report.rows {
        let ns = r.measured_ns.map_or_else(|| "-".to_string(), |v| v.to_string());
        s.push_str(&format!("| {} | {} | {:.0} | {} | {} |\n", r.pattern, r.t, r.flops_per_token, r.cache_entries, ns));
    }
    s.push_str(&format!(
        "\nseed {}, storage {}, {}\n",
        report.seed, report.storage_precision, report.machine_note
    ));
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ratplus_core::attention::MixingParams;
    use ratplus_core::kv_cache::{cache_footprint, decode_step, DilatedKVCache};
    use ratplus_core::{Array, Rng, RopeParams};

    const DIMS: Dims = Dims { model_dim: 8, heads: 2, head_dim: 4 };

    #[test]
    fn csv_roundtrip_and_header() {
        let rows = vec![
            CostRow::analytic(&SparsePatternSpec::dilated(4), 100, DIMS).unwrap(),
            CostRow { measured_ns: Some(1234), ..CostRow::analytic(&SparsePatternSpec::dense(), 100, DIMS).unwrap() },
        ];
        let mut buf = Vec::new();
        emit_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("pattern,T,flops_per_token,cache_entries,measured_ns\n"));
        assert_eq!(read_csv(buf.as_slice()).unwrap(), rows);
        assert!(emit_csv(&[], Vec::new()).is_err());
    }

    #[test]
    fn markdown_rows() {
        let rows: Vec<CostRow> =
            [1, 2, 4].iter().map(|&d| CostRow::analytic(&SparsePatternSpec::dilated(d), 64, DIMS).unwrap()).collect();
        let md = emit_markdown(&CostReport::new(rows, 0, "test")).unwrap();
        assert_eq!(md.lines().filter(|l| l.starts_with('|')).count(), 2 + 3);
    }

    #[test]
    fn flops_ratio_sweep() {
        let t = 4096;
        let dense = flops_per_token(&SparsePatternSpec::dense(), t, DIMS).unwrap().attention;
        for d in [1, 2, 4, 8, 16] {
            let f = flops_per_token(&SparsePatternSpec::dilated(d).with_sinks(0), t, DIMS).unwrap().attention;
            let ratio = dense / f;
            assert!((ratio / d as f64 - 1.0).abs() <= 0.02, "D={d}: {ratio}");
        }
    }

    #[test]
    fn cache_column_matches_real_cache() {
        let mut rng = Rng::new(3);
        let params = MixingParams::init(8, 2, 4, 0.1, &mut rng);
        let x = Array::randn(&[50, 8], 1.0, &mut rng);
        for spec in [SparsePatternSpec::dense(), SparsePatternSpec::dilated(4).with_window(3)] {
            let mut cache = DilatedKVCache::new(vec![spec; 2], 2, 4, RopeParams::new(4)).unwrap();
            for t in 0..50 {
                decode_step(&mut cache, t, x.row(t), &params).unwrap();
                let row = CostRow::analytic(&spec, t, DIMS).unwrap();
                assert_eq!(row.cache_entries, cache_footprint(&cache).entries);
            }
        }
    }
}
