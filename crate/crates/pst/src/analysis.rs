//! Diagnostic exports from finished runs: mask structuredness
//! histograms, weight-vs-score scatters, kept-weight distributions, and
//! cross-run mask similarity.
//!
//! Every function here is a pure read of trained state, and every CSV
//! writer prints floats in Rust's shortest round-trip form, so re-export
//! of the same run is byte-identical.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::layer::SparseLinear;
use crate::masking::{mask_similarity, row_col_sparsity_histogram};
use crate::trainer::{MaskRecord, RunReport};

const BINS: usize = 10;

/// Row/column sparsity histograms of one layer's final mask.
#[derive(Debug, Clone)]
pub struct Structuredness {
    pub layer: String,
    pub role: String,
    /// Inclusive-exclusive bin bounds over [0, 1].
    pub bins: Vec<(f64, f64)>,
    /// Percent of rows whose sparsity falls in each bin; sums to 100.
    pub row_pct: Vec<f64>,
    /// Percent of columns per bin; sums to 100.
    pub col_pct: Vec<f64>,
}

/// 10-bin row and column sparsity histograms per layer, the masked
/// counterpart of per-matrix structured-pruning plots.
pub fn structuredness_report(masks: &[MaskRecord]) -> Result<Vec<Structuredness>> {
    if masks.is_empty() {
        return Err(Error::contract("structuredness report needs at least one mask"));
    }
    masks
        .iter()
        .map(|record| {
            let mask = record.to_mask()?;
            let (mut row_pct, mut col_pct) = row_col_sparsity_histogram(&mask, BINS)?;
            for share in row_pct.iter_mut().chain(col_pct.iter_mut()) {
                *share *= 100.0;
            }
            let bins = (0..BINS)
                .map(|b| (b as f64 / BINS as f64, (b + 1) as f64 / BINS as f64))
                .collect();
            Ok(Structuredness {
                layer: record.layer.clone(),
                role: record.role.clone(),
                bins,
                row_pct,
                col_pct,
            })
        })
        .collect()
}

/// One weight entry of a trained layer.
#[derive(Debug, Clone, Copy)]
pub struct ScatterPoint {
    pub weight: f64,
    pub score: f64,
    pub kept: bool,
}

/// (weight, score, kept) for every entry of a trained layer. Magnitude
/// criteria trace score == |weight| exactly, the v-shape.
pub fn weight_score_scatter(layer: &SparseLinear) -> Result<Vec<ScatterPoint>> {
    let mask = layer
        .current_mask()
        .ok_or_else(|| Error::contract("scatter needs a trained layer with a mask"))?;
    let weight = layer.effective_weight_value();
    let score = layer.score_value();
    let (n, k) = layer.shape();
    let mut points = Vec::with_capacity(n * k);
    for r in 0..n {
        for c in 0..k {
            points.push(ScatterPoint {
                weight: weight.get(r, c),
                score: score.get(r, c),
                kept: mask.get(r, c),
            });
        }
    }
    Ok(points)
}

/// Histogram of the kept weights over a symmetric value range.
#[derive(Debug, Clone)]
pub struct WeightHistogram {
    /// bins+1 edges from -max|w| to +max|w| over kept weights.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

pub fn remaining_weight_histogram(layer: &SparseLinear, bins: usize) -> Result<WeightHistogram> {
    if bins == 0 {
        return Err(Error::contract("histogram needs at least one bin"));
    }
    let mask = layer
        .current_mask()
        .ok_or_else(|| Error::contract("histogram needs a trained layer with a mask"))?;
    let weight = layer.effective_weight_value();
    let (n, k) = layer.shape();
    let mut kept = Vec::new();
    for r in 0..n {
        for c in 0..k {
            if mask.get(r, c) {
                kept.push(weight.get(r, c));
            }
        }
    }
    let mut max_abs = kept.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
    if max_abs == 0.0 {
        max_abs = 1.0;
    }
    let lo = -max_abs;
    let width = 2.0 * max_abs / bins as f64;
    let edges = (0..=bins).map(|b| lo + b as f64 * width).collect();
    let mut counts = vec![0usize; bins];
    for v in kept {
        let mut bin = ((v - lo) / width) as usize;
        if bin >= bins {
            bin = bins - 1;
        }
        counts[bin] += 1;
    }
    Ok(WeightHistogram { edges, counts })
}

/// Mask agreement between two runs for one layer.
#[derive(Debug, Clone)]
pub struct SimilarityRow {
    pub layer: String,
    pub role: String,
    pub depth: usize,
    /// "{label_a}-vs-{label_b}" of the compared runs.
    pub pair: String,
    pub similarity: f64,
}

/// Per-layer mask similarity between two finished runs, matched by
/// layer name. Runs must come from identically shaped models.
pub fn criterion_similarity(
    a: &RunReport,
    b: &RunReport,
    label_a: &str,
    label_b: &str,
) -> Result<Vec<SimilarityRow>> {
    if a.masks.len() != b.masks.len() {
        return Err(Error::contract(format!(
            "runs have {} and {} masked layers",
            a.masks.len(),
            b.masks.len()
        )));
    }
    let mut rows = Vec::with_capacity(a.masks.len());
    for ra in &a.masks {
        let rb = b
            .masks
            .iter()
            .find(|rb| rb.layer == ra.layer)
            .ok_or_else(|| {
                Error::contract(format!("layer {} missing from second run", ra.layer))
            })?;
        let ma = ra.to_mask()?;
        let mb = rb.to_mask()?;
        let similarity = mask_similarity(&ma, &mb)?;
        rows.push(SimilarityRow {
            layer: ra.layer.clone(),
            role: ra.role.clone(),
            depth: ra.depth,
            pair: format!("{label_a}-vs-{label_b}"),
            similarity,
        });
    }
    Ok(rows)
}

/// structuredness_<layer>.csv per layer: bin_lo,bin_hi,row_pct,col_pct.
pub fn write_structuredness_csv(dir: &Path, report: &[Structuredness]) -> Result<()> {
    for entry in report {
        let path = dir.join(format!("structuredness_{}.csv", entry.layer));
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "bin_lo,bin_hi,row_pct,col_pct")?;
        for (i, (lo, hi)) in entry.bins.iter().enumerate() {
            writeln!(out, "{lo},{hi},{},{}", entry.row_pct[i], entry.col_pct[i])?;
        }
    }
    Ok(())
}

/// scatter_<layer>.csv: weight,score,kept with kept as 0/1.
pub fn write_scatter_csv(dir: &Path, layer: &str, points: &[ScatterPoint]) -> Result<()> {
    let path = dir.join(format!("scatter_{layer}.csv"));
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "weight,score,kept")?;
    for p in points {
        writeln!(out, "{},{},{}", p.weight, p.score, u8::from(p.kept))?;
    }
    Ok(())
}

/// similarity.csv: layer,role,depth,pair,similarity.
pub fn write_similarity_csv(path: &Path, rows: &[SimilarityRow]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "layer,role,depth,pair,similarity")?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.layer, r.role, r.depth, r.pair, r.similarity)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::importance::ScoreConfig;
    use crate::layer::{Criterion, LayerRole};
    use crate::masking::{top_v_mask, BinaryMask};
    use crate::tape::Tape;
    use crate::tensor::Tensor2D;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn record(layer: &str, mask: &BinaryMask) -> MaskRecord {
        MaskRecord {
            layer: layer.to_string(),
            role: "dense".to_string(),
            depth: 0,
            rows: mask.rows(),
            cols: mask.cols(),
            bits: mask.to_bit_string(),
        }
    }

    fn trained_layer(criterion: Criterion, n: usize, k: usize, sparsity: f64) -> SparseLinear {
        let mut layer = SparseLinear::new(
            "t", 0, LayerRole::Dense, criterion,
            n, k, false, false, ScoreConfig::default(), 0.5, 42,
        );
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = tape.constant(Tensor2D::gaussian(k, 3, 1.0, &mut rng));
        layer.forward(&mut tape, x, sparsity).unwrap();
        layer
    }

    #[test]
    fn dense_mask_concentrates_in_first_bin() {
        let mask = BinaryMask::all_ones(6, 6);
        let report = structuredness_report(&[record("l", &mask)]).unwrap();
        assert_eq!(report[0].row_pct[0], 100.0);
        assert_eq!(report[0].col_pct[0], 100.0);
        assert!(report[0].row_pct[1..].iter().all(|&p| p == 0.0));
    }

    #[test]
    fn checkerboard_lands_in_the_half_bin() {
        let t = Tensor2D::new(
            4,
            4,
            (0..16).map(|i| ((i / 4 + i % 4) % 2) as f64).collect(),
        )
        .unwrap();
        let mask = BinaryMask::from_tensor(&t).unwrap();
        let report = structuredness_report(&[record("l", &mask)]).unwrap();
        assert_eq!(report[0].row_pct[5], 100.0);
        assert_eq!(report[0].col_pct[5], 100.0);
    }

    #[test]
    fn histograms_normalize() {
        let layer = trained_layer(Criterion::Map, 9, 7, 0.4);
        let report =
            structuredness_report(&[record("l", layer.current_mask().unwrap())]).unwrap();
        let row_sum: f64 = report[0].row_pct.iter().sum();
        let col_sum: f64 = report[0].col_pct.iter().sum();
        assert!((row_sum - 100.0).abs() < 1e-7);
        assert!((col_sum - 100.0).abs() < 1e-7);
        assert!(structuredness_report(&[]).is_err());
    }

    #[test]
    fn magnitude_scatter_traces_absolute_value() {
        let layer = trained_layer(Criterion::Map, 8, 8, 0.5);
        let points = weight_score_scatter(&layer).unwrap();
        assert_eq!(points.len(), 64);
        for p in &points {
            assert_eq!(p.score, p.weight.abs());
        }
        assert_eq!(points.iter().filter(|p| p.kept).count(), 32);
    }

    #[test]
    fn kept_points_are_exactly_the_top_ranked() {
        let layer = trained_layer(Criterion::Random, 8, 6, 0.25);
        let points = weight_score_scatter(&layer).unwrap();
        let oracle = top_v_mask(&layer.score_value(), 36).unwrap();
        for (i, p) in points.iter().enumerate() {
            assert_eq!(p.kept, oracle.get(i / 6, i % 6));
        }
    }

    #[test]
    fn scatter_needs_a_mask() {
        let layer = SparseLinear::new(
            "fresh", 0, LayerRole::Dense, Criterion::Map,
            4, 4, false, false, ScoreConfig::default(), 0.5, 1,
        );
        assert!(weight_score_scatter(&layer).is_err());
        assert!(remaining_weight_histogram(&layer, 10).is_err());
    }

    #[test]
    fn magnitude_histogram_has_a_gap_at_zero() {
        let layer = trained_layer(Criterion::Map, 10, 10, 0.6);
        let hist = remaining_weight_histogram(&layer, 20).unwrap();
        assert_eq!(hist.counts.iter().sum::<usize>(), 40);

        // No kept weight sits below the magnitude threshold.
        let weight = layer.effective_weight_value();
        let mut mags: Vec<f64> = weight.data().iter().map(|v| v.abs()).collect();
        mags.sort_by(|a, b| b.total_cmp(a));
        let threshold = mags[39];
        let mask = layer.current_mask().unwrap();
        for r in 0..10 {
            for c in 0..10 {
                if mask.get(r, c) {
                    assert!(weight.get(r, c).abs() >= threshold);
                }
            }
        }
    }

    fn report_from_masks(criterion: &str, masks: Vec<MaskRecord>) -> RunReport {
        RunReport {
            criterion: criterion.to_string(),
            seed: 0,
            loss_trajectory: vec![],
            sparsity_trajectory: vec![],
            final_metric: 0.0,
            metric_name: "mse".to_string(),
            masks,
            trainable_params: 0,
            score_params: 0,
            movement_params: 0,
            wall_clock_secs: 0.0,
        }
    }

    #[test]
    fn self_similarity_is_one() {
        let layer = trained_layer(Criterion::Map, 8, 8, 0.5);
        let rec = record("l", layer.current_mask().unwrap());
        let report = report_from_masks("map", vec![rec]);
        let rows = criterion_similarity(&report, &report, "a", "b").unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].similarity, 1.0);
        assert_eq!(rows[0].pair, "a-vs-b");
    }

    #[test]
    fn independent_masks_match_analytic_overlap() {
        // Two independent supports at sparsity p agree on a fraction
        // p^2 + (1-p)^2 of entries in expectation: 0.82 at p = 0.9.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let draw = |rng: &mut ChaCha8Rng| {
            let mut idx: Vec<usize> = (0..4096).collect();
            idx.shuffle(rng);
            let mut t = Tensor2D::zeros(64, 64);
            for &i in idx.iter().take(409) {
                t.data_mut()[i] = 1.0;
            }
            BinaryMask::from_tensor(&t).unwrap()
        };
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let s = mask_similarity(&a, &b).unwrap();
        assert!((s - 0.82).abs() < 0.02, "similarity {s}");
    }

    #[test]
    fn mismatched_runs_are_rejected() {
        let layer = trained_layer(Criterion::Map, 8, 8, 0.5);
        let rec = record("l", layer.current_mask().unwrap());
        let a = report_from_masks("map", vec![rec.clone()]);
        let b = report_from_masks("map", vec![]);
        assert!(criterion_similarity(&a, &b, "a", "b").is_err());

        let mut other = rec.clone();
        other.layer = "different".to_string();
        let c = report_from_masks("map", vec![other]);
        assert!(criterion_similarity(&a, &c, "a", "c").is_err());
    }

    #[test]
    fn csv_exports_are_stable() {
        let dir = tempfile::tempdir().unwrap();
        let layer = trained_layer(Criterion::Map, 6, 6, 0.5);
        let rec = record("layer0", layer.current_mask().unwrap());

        let report = structuredness_report(&[rec.clone()]).unwrap();
        write_structuredness_csv(dir.path(), &report).unwrap();
        let s1 = std::fs::read(dir.path().join("structuredness_layer0.csv")).unwrap();
        write_structuredness_csv(dir.path(), &report).unwrap();
        let s2 = std::fs::read(dir.path().join("structuredness_layer0.csv")).unwrap();
        assert_eq!(s1, s2);
        assert!(s1.starts_with(b"bin_lo,bin_hi,row_pct,col_pct\n"));

        let points = weight_score_scatter(&layer).unwrap();
        write_scatter_csv(dir.path(), "layer0", &points).unwrap();
        let scatter = std::fs::read_to_string(dir.path().join("scatter_layer0.csv")).unwrap();
        assert_eq!(scatter.lines().count(), 37);

        let run = report_from_masks("map", vec![rec]);
        let rows = criterion_similarity(&run, &run, "x", "y").unwrap();
        let path = dir.path().join("similarity.csv");
        write_similarity_csv(&path, &rows).unwrap();
        let sim = std::fs::read_to_string(&path).unwrap();
        assert_eq!(sim, "layer,role,depth,pair,similarity\nlayer0,dense,0,x-vs-y,1\n");
    }
}
