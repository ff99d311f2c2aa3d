//! Quantitative analysis of importance maps: rank correlation against
//! reference masks, POS-conditioned most-important-word histograms, and the
//! answer-flip failure-prediction signal.
//!
//! The comparison protocol per example: bring both the method's map and the
//! reference mask to the common evaluation grid, take absolute values and
//! normalize each to unit mass, then Spearman-correlate the two score lists
//! (average ranks on ties).

use crate::attribution::{
    cell_aggregate, guided_bp_attribute, occluded_cell_distributions, occlusion_attribute_image,
    random_map, word_drop_distributions, ImportanceMap, MapSource, OcclusionConfig, SeedTarget,
    WordNorm,
};
use crate::data::{PosTag, VqaExample};
use crate::error::{Error, Result};
use crate::model::{VqaModel, IMAGE_SIDE};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Everything the per-example evaluation pipeline needs to know.
#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub occlusion: OcclusionConfig,
    pub word_norm: WordNorm,
    pub seed_target: SeedTarget,
    /// Base seed for per-example random baseline maps.
    pub random_seed: u64,
    /// The common grid both maps are resized to before correlating.
    pub eval_dims: (usize, usize),
}

impl EvalConfig {
    pub fn new(occlusion: OcclusionConfig) -> Self {
        EvalConfig {
            occlusion,
            word_norm: WordNorm::L2,
            seed_target: SeedTarget::Probability,
            random_seed: 42,
            eval_dims: (14, 14),
        }
    }
}

/// Area-weighted resampling onto a new grid. Both grids are laid over the
/// same unit square; each target cell averages the source cells weighted by
/// fractional overlap, which preserves total mass (sum times cell area).
pub fn resize_map(map: &ImportanceMap, target: (usize, usize)) -> Result<ImportanceMap> {
    let (tr, tc) = target;
    if tr == 0 || tc == 0 {
        return Err(Error::InvalidArgument {
            op: "resize_map",
            reason: "target dims must be positive".into(),
        });
    }
    let (sr, sc) = (map.rows(), map.cols());
    if (sr, sc) == (tr, tc) {
        return Ok(map.clone());
    }
    let overlaps = |n_src: usize, n_tgt: usize| -> Vec<Vec<(usize, f64)>> {
        (0..n_tgt)
            .map(|t| {
                let t0 = t as f64 / n_tgt as f64;
                let t1 = (t + 1) as f64 / n_tgt as f64;
                let mut row = Vec::new();
                for s in 0..n_src {
                    let s0 = s as f64 / n_src as f64;
                    let s1 = (s + 1) as f64 / n_src as f64;
                    let ov = (t1.min(s1) - t0.max(s0)).max(0.0);
                    if ov > 0.0 {
                        row.push((s, ov));
                    }
                }
                row
            })
            .collect()
    };
    let rows_ov = overlaps(sr, tr);
    let cols_ov = overlaps(sc, tc);
    let target_area = 1.0 / (tr as f64 * tc as f64);
    let mut scores = Vec::with_capacity(tr * tc);
    for r_ov in &rows_ov {
        for c_ov in &cols_ov {
            let mut acc = 0.0f64;
            for &(si, wy) in r_ov {
                for &(sj, wx) in c_ov {
                    acc += map.scores[si * sc + sj] as f64 * wy * wx;
                }
            }
            scores.push((acc / target_area) as f32);
        }
    }
    ImportanceMap::new(map.source, tr, tc, scores)
}

/// A map after taking absolute values and dividing by the total, kept in
/// f64 so the unit-mass property holds tightly.
#[derive(Debug, Clone)]
pub struct NormalizedMap {
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
    /// Set when the input was all zero and the output fell back to uniform.
    pub degenerate: bool,
}

pub(crate) fn normalize_scores(scores: &[f64]) -> (Vec<f64>, bool) {
    let abs: Vec<f64> = scores.iter().map(|v| v.abs()).collect();
    let sum: f64 = abs.iter().sum();
    if sum == 0.0 {
        let uniform = 1.0 / abs.len() as f64;
        return (vec![uniform; abs.len()], true);
    }
    (abs.into_iter().map(|v| v / sum).collect(), false)
}

/// Absolute values, then division by their sum; an all-zero map degrades to
/// uniform and is flagged.
pub fn spatial_normalize(map: &ImportanceMap) -> NormalizedMap {
    let lifted: Vec<f64> = map.scores.iter().map(|&v| v as f64).collect();
    let (scores, degenerate) = normalize_scores(&lifted);
    NormalizedMap {
        rows: map.rows(),
        cols: map.cols(),
        scores,
        degenerate,
    }
}

/// 1-based ranks with ties assigned the average of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0f64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    ranks
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankCorrelation {
    pub rho: f64,
    /// Set when either list is constant, leaving the coefficient undefined;
    /// `rho` is reported as 0.
    pub degenerate: bool,
}

/// Spearman rank correlation: Pearson on average ranks.
pub fn rank_correlation(a: &[f64], b: &[f64]) -> Result<RankCorrelation> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch {
            op: "rank_correlation",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if a.is_empty() {
        return Err(Error::InvalidArgument {
            op: "rank_correlation",
            reason: "empty score lists".into(),
        });
    }
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = ra.len() as f64;
    let mean_a: f64 = ra.iter().sum::<f64>() / n;
    let mean_b: f64 = rb.iter().sum::<f64>() / n;
    let mut sab = 0.0f64;
    let mut saa = 0.0f64;
    let mut sbb = 0.0f64;
    for (&x, &y) in ra.iter().zip(rb.iter()) {
        let dx = x - mean_a;
        let dy = y - mean_b;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(RankCorrelation {
            rho: 0.0,
            degenerate: true,
        });
    }
    Ok(RankCorrelation {
        rho: (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// Convenience for two maps on the same grid.
pub fn rank_correlation_maps(a: &NormalizedMap, b: &NormalizedMap) -> Result<RankCorrelation> {
    rank_correlation(&a.scores, &b.scores)
}

/// Produce one image importance map for the given method. Guided-BP maps
/// come out at pixel resolution and are mean-pooled onto the occlusion grid
/// so every method is stored on the same grid.
pub fn compute_image_map(
    method: MapSource,
    model: &VqaModel,
    ex: &VqaExample,
    index: usize,
    cfg: &EvalConfig,
) -> Result<ImportanceMap> {
    match method {
        MapSource::GuidedBp => {
            let (pixel_map, _) =
                guided_bp_attribute(model, &ex.image, &ex.question, cfg.word_norm, cfg.seed_target)?;
            cell_aggregate(&pixel_map, (cfg.occlusion.grid_rows, cfg.occlusion.grid_cols))
        }
        MapSource::Occlusion => occlusion_attribute_image(model, &ex.image, &ex.question, &cfg.occlusion),
        MapSource::Random => Ok(random_map(
            cfg.random_seed.wrapping_add(index as u64),
            (cfg.occlusion.grid_rows, cfg.occlusion.grid_cols),
        )),
        MapSource::Reference => reference_map(ex),
    }
}

/// The example's relevance mask viewed as a map.
pub fn reference_map(ex: &VqaExample) -> Result<ImportanceMap> {
    ImportanceMap::new(
        MapSource::Reference,
        IMAGE_SIDE,
        IMAGE_SIDE,
        ex.relevance_mask.clone(),
    )
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MapEvalStats {
    pub method: String,
    pub mean: f64,
    /// Standard error of the mean: sample stddev / sqrt(n).
    pub se: f64,
    /// Examples entering the mean (degenerate ones are excluded).
    pub n: usize,
    pub degenerate_count: usize,
}

/// Mean rank correlation of a method's maps against the reference masks.
pub fn evaluate_image_maps(
    method: MapSource,
    model: &VqaModel,
    examples: &[VqaExample],
    cfg: &EvalConfig,
) -> Result<MapEvalStats> {
    if examples.is_empty() {
        return Err(Error::InvalidArgument {
            op: "evaluate_image_maps",
            reason: "empty example set".into(),
        });
    }
    let correlations: Vec<RankCorrelation> = examples
        .par_iter()
        .enumerate()
        .map(|(i, ex)| -> Result<RankCorrelation> {
            let map = compute_image_map(method, model, ex, i, cfg)?;
            let map14 = resize_map(&map, cfg.eval_dims)?;
            let reference = resize_map(&reference_map(ex)?, cfg.eval_dims)?;
            rank_correlation_maps(&spatial_normalize(&map14), &spatial_normalize(&reference))
        })
        .collect::<Result<Vec<_>>>()?;

    let used: Vec<f64> = correlations
        .iter()
        .filter(|c| !c.degenerate)
        .map(|c| c.rho)
        .collect();
    let degenerate_count = correlations.len() - used.len();
    let n = used.len();
    let mean = if n > 0 { used.iter().sum::<f64>() / n as f64 } else { 0.0 };
    let se = if n > 1 {
        let var = used.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    Ok(MapEvalStats {
        method: method.label().to_string(),
        mean,
        se,
        n,
        degenerate_count,
    })
}

// ── POS histogram ────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosBin {
    pub tag: PosTag,
    /// Tokens with this tag that were their question's argmax-importance
    /// token.
    pub most_important: usize,
    /// Tokens with this tag across the dataset.
    pub count: usize,
    pub probability: f64,
}

/// P(token is its question's most important | token has tag T). Exactly one
/// token per question counts as most important (argmax, ties to the lowest
/// position); tags that never occur are omitted.
pub fn pos_histogram<'a, I>(items: I) -> Result<Vec<PosBin>>
where
    I: IntoIterator<Item = (&'a [f32], &'a [PosTag])>,
{
    let mut numerator: BTreeMap<PosTag, usize> = BTreeMap::new();
    let mut denominator: BTreeMap<PosTag, usize> = BTreeMap::new();
    for (scores, tags) in items {
        if scores.len() != tags.len() || scores.is_empty() {
            return Err(Error::InvalidArgument {
                op: "pos_histogram",
                reason: format!("{} scores against {} tags", scores.len(), tags.len()),
            });
        }
        let mut best = 0usize;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        for (i, &tag) in tags.iter().enumerate() {
            *denominator.entry(tag).or_default() += 1;
            if i == best {
                *numerator.entry(tag).or_default() += 1;
            }
        }
    }
    Ok(denominator
        .into_iter()
        .map(|(tag, count)| {
            let most_important = numerator.get(&tag).copied().unwrap_or(0);
            PosBin {
                tag,
                most_important,
                count,
                probability: most_important as f64 / count as f64,
            }
        })
        .collect())
}

// ── Answer-flip failure signal ───────────────────────────────────────

#[derive(Debug, Clone)]
pub struct FlipConfig {
    pub image_cells: bool,
    pub word_drops: bool,
    pub occlusion: OcclusionConfig,
}

impl FlipConfig {
    pub fn full(occlusion: OcclusionConfig) -> Self {
        FlipConfig {
            image_cells: true,
            word_drops: true,
            occlusion,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct FlipSignal {
    pub flips: usize,
    pub total: usize,
    /// Share of occlusions whose argmax answer changed.
    pub flip_fraction: f64,
    /// Whether the unperturbed prediction matched the label.
    pub correct: bool,
}

/// Count how many single-unit occlusions (image cells and/or word drops)
/// change the argmax answer.
pub fn flip_signal(model: &VqaModel, ex: &VqaExample, cfg: &FlipConfig) -> Result<FlipSignal> {
    if !cfg.image_cells && !cfg.word_drops {
        return Err(Error::InvalidArgument {
            op: "flip_signal",
            reason: "no occlusion family enabled".into(),
        });
    }
    let original = model.forward_infer(&ex.image, &ex.question)?;
    let mut flips = 0usize;
    let mut total = 0usize;
    if cfg.image_cells {
        let masked = occluded_cell_distributions(model, &ex.image, &ex.question, &cfg.occlusion)?;
        total += masked.len();
        flips += masked.iter().filter(|d| d.predicted != original.predicted).count();
    }
    if cfg.word_drops {
        let dropped = word_drop_distributions(model, &ex.image, &ex.question)?;
        total += dropped.len();
        flips += dropped.iter().filter(|d| d.predicted != original.predicted).count();
    }
    Ok(FlipSignal {
        flips,
        total,
        flip_fraction: flips as f64 / total as f64,
        correct: original.predicted == ex.answer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipOutcome {
    pub flip_fraction: f64,
    pub correct: bool,
}

impl From<FlipSignal> for FlipOutcome {
    fn from(s: FlipSignal) -> Self {
        FlipOutcome {
            flip_fraction: s.flip_fraction,
            correct: s.correct,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlipPredictor {
    /// Failure is predicted when flip_fraction exceeds this; `None` when the
    /// training split had a single class and the predictor falls back to the
    /// majority class.
    pub threshold: Option<f64>,
    pub degenerate: bool,
    /// Majority class of the training split (true = success).
    pub majority_correct: bool,
    pub train_accuracy: f64,
    pub eval_accuracy: f64,
    /// Accuracy of always predicting the training majority class on the
    /// eval split.
    pub baseline_accuracy: f64,
    pub n_train: usize,
    pub n_eval: usize,
}

fn threshold_accuracy(outcomes: &[FlipOutcome], threshold: f64) -> f64 {
    let hits = outcomes
        .iter()
        .filter(|o| (o.flip_fraction <= threshold) == o.correct)
        .count();
    hits as f64 / outcomes.len() as f64
}

fn majority_accuracy(outcomes: &[FlipOutcome], majority_correct: bool) -> f64 {
    let hits = outcomes.iter().filter(|o| o.correct == majority_correct).count();
    hits as f64 / outcomes.len() as f64
}

/// Fit the flip-fraction threshold maximizing train-split accuracy (ties go
/// to the smallest candidate) and score it on the eval split.
pub fn flip_predict(train: &[FlipOutcome], eval: &[FlipOutcome]) -> Result<FlipPredictor> {
    if train.is_empty() || eval.is_empty() {
        return Err(Error::InvalidArgument {
            op: "flip_predict",
            reason: "both splits must be nonempty".into(),
        });
    }
    let successes = train.iter().filter(|o| o.correct).count();
    let majority_correct = 2 * successes >= train.len();

    let one_class = successes == 0 || successes == train.len();
    if one_class {
        return Ok(FlipPredictor {
            threshold: None,
            degenerate: true,
            majority_correct,
            train_accuracy: majority_accuracy(train, majority_correct),
            eval_accuracy: majority_accuracy(eval, majority_correct),
            baseline_accuracy: majority_accuracy(eval, majority_correct),
            n_train: train.len(),
            n_eval: eval.len(),
        });
    }

    let mut candidates: Vec<f64> = train.iter().map(|o| o.flip_fraction).collect();
    candidates.push(-1.0);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();

    let mut best = candidates[0];
    let mut best_acc = threshold_accuracy(train, best);
    for &theta in &candidates[1..] {
        let acc = threshold_accuracy(train, theta);
        if acc > best_acc {
            best_acc = acc;
            best = theta;
        }
    }
    Ok(FlipPredictor {
        threshold: Some(best),
        degenerate: false,
        majority_correct,
        train_accuracy: best_acc,
        eval_accuracy: threshold_accuracy(eval, best),
        baseline_accuracy: majority_accuracy(eval, majority_correct),
        n_train: train.len(),
        n_eval: eval.len(),
    })
}

// ── Aggregate report ─────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_examples: usize,
    pub correlations: Vec<MapEvalStats>,
    /// Attribution method the POS histogram was computed from.
    pub pos_method: String,
    pub pos_histogram: Vec<PosBin>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub flip: Option<FlipPredictor>,
}
