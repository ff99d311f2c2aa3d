//! Importance maps for images and questions.
//!
//! Two routes: guided backpropagation (input gradients of the predicted
//! answer's probability under the gradient-gating ReLU rule) and occlusion
//! (mask one image cell with the training-mean patch, or drop one question
//! word, and record the drop in the predicted answer's probability).

use crate::error::{Error, Result};
use crate::model::{AnswerDistribution, VqaModel, IMAGE_CHANNELS, IMAGE_SIDE};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Where an importance map came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MapSource {
    GuidedBp,
    Occlusion,
    Random,
    /// A ground-truth relevance mask treated as a map by the evaluation
    /// protocol.
    Reference,
}

impl MapSource {
    pub fn label(self) -> &'static str {
        match self {
            MapSource::GuidedBp => "guided_bp",
            MapSource::Occlusion => "occlusion",
            MapSource::Random => "random",
            MapSource::Reference => "reference",
        }
    }
}

/// Signed scores over a grid of image cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceMap {
    pub source: MapSource,
    /// [rows, cols]
    pub dims: [usize; 2],
    /// Row-major, rows * cols entries.
    pub scores: Vec<f32>,
}

impl ImportanceMap {
    pub fn new(source: MapSource, rows: usize, cols: usize, scores: Vec<f32>) -> Result<Self> {
        if rows * cols != scores.len() || rows == 0 || cols == 0 {
            return Err(Error::InvalidArgument {
                op: "importance_map",
                reason: format!("dims [{rows}, {cols}] with {} scores", scores.len()),
            });
        }
        Ok(ImportanceMap {
            source,
            dims: [rows, cols],
            scores,
        })
    }

    pub fn rows(&self) -> usize {
        self.dims[0]
    }

    pub fn cols(&self) -> usize {
        self.dims[1]
    }
}

/// One signed score per question token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordImportance {
    pub source: MapSource,
    pub scores: Vec<f32>,
}

/// Reduction of a token's embedding-row gradient to one score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordNorm {
    L2,
    LInf,
}

/// Which scalar seeds the backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedTarget {
    /// The softmax probability of the predicted answer (the default).
    Probability,
    /// The pre-softmax logit of the predicted answer.
    Logit,
}

/// Occlusion protocol: a grid laid over the image and the patch color that
/// replaces one cell at a time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcclusionConfig {
    pub grid_rows: usize,
    pub grid_cols: usize,
    /// Per-channel fill, normally the training-set mean color.
    pub patch_value: [f32; 3],
}

impl OcclusionConfig {
    pub fn new(grid_rows: usize, grid_cols: usize, patch_value: [f32; 3]) -> Result<Self> {
        if grid_rows == 0 || grid_rows > IMAGE_SIDE || grid_cols == 0 || grid_cols > IMAGE_SIDE {
            return Err(Error::InvalidArgument {
                op: "occlusion_config",
                reason: format!("grid {grid_rows}x{grid_cols} outside 1..={IMAGE_SIDE}"),
            });
        }
        if patch_value.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument {
                op: "occlusion_config",
                reason: format!("patch {patch_value:?} outside [0, 1]"),
            });
        }
        Ok(OcclusionConfig {
            grid_rows,
            grid_cols,
            patch_value,
        })
    }

    /// 16x16 grid with the given patch color.
    pub fn with_patch(patch_value: [f32; 3]) -> Result<Self> {
        Self::new(16, 16, patch_value)
    }

    /// Pixel bounds (y0, y1, x0, x1) of one grid cell; trailing cells clip
    /// to the image edge when the grid does not divide it evenly.
    pub fn cell_bounds(&self, row: usize, col: usize) -> (usize, usize, usize, usize) {
        let cell_h = IMAGE_SIDE.div_ceil(self.grid_rows);
        let cell_w = IMAGE_SIDE.div_ceil(self.grid_cols);
        let y0 = (row * cell_h).min(IMAGE_SIDE);
        let y1 = ((row + 1) * cell_h).min(IMAGE_SIDE);
        let x0 = (col * cell_w).min(IMAGE_SIDE);
        let x1 = ((col + 1) * cell_w).min(IMAGE_SIDE);
        (y0, y1, x0, x1)
    }
}

/// Guided-backprop attribution: runs a forward pass, seeds backward with
/// gradient 1.0 on the *predicted* answer's probability (never the label or
/// the loss), and reads gradients off the inputs. Pixel score = sum over
/// channels of |gradient|; word score = norm of the gradient on that
/// token's own embedding-lookup row.
pub fn guided_bp_attribute(
    model: &VqaModel,
    image: &Tensor,
    question: &[usize],
    word_norm: WordNorm,
    seed_target: SeedTarget,
) -> Result<(ImportanceMap, WordImportance)> {
    let pass = model.forward(image, question)?;
    let mut tape = pass.tape;
    tape.set_relu_mode(crate::tape::ReluMode::Guided);
    let seed_on = match seed_target {
        SeedTarget::Probability => pass.ids.probabilities,
        SeedTarget::Logit => pass.ids.logits,
    };
    let seed = tape.pick(seed_on, pass.dist.predicted)?;
    let grads = tape.backward(seed)?;

    let g_image = grads.wrt(pass.ids.image);
    let hw = IMAGE_SIDE * IMAGE_SIDE;
    let mut pixel_scores = vec![0.0f32; hw];
    for c in 0..IMAGE_CHANNELS {
        let plane = &g_image.data()[c * hw..(c + 1) * hw];
        for (s, &g) in pixel_scores.iter_mut().zip(plane.iter()) {
            *s += g.abs();
        }
    }
    let map = ImportanceMap::new(MapSource::GuidedBp, IMAGE_SIDE, IMAGE_SIDE, pixel_scores)?;

    let g_rows = grads.wrt(pass.ids.embed_rows);
    let dim = g_rows.shape()[1];
    let scores = (0..question.len())
        .map(|t| {
            let row = &g_rows.data()[t * dim..(t + 1) * dim];
            match word_norm {
                WordNorm::L2 => row.iter().map(|&v| v * v).sum::<f32>().sqrt(),
                WordNorm::LInf => row.iter().fold(0.0f32, |m, &v| m.max(v.abs())),
            }
        })
        .collect();
    Ok((
        map,
        WordImportance {
            source: MapSource::GuidedBp,
            scores,
        },
    ))
}

/// The question with position `t` removed; a one-word question degrades to
/// the reserved padding token instead of an empty sequence.
pub fn question_without(question: &[usize], t: usize) -> Vec<usize> {
    let mut q: Vec<usize> = question
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != t)
        .map(|(_, &w)| w)
        .collect();
    if q.is_empty() {
        q.push(crate::data::PAD_TOKEN);
    }
    q
}

fn occlude_cell(image: &Tensor, config: &OcclusionConfig, row: usize, col: usize) -> Tensor {
    let mut data = image.data().to_vec();
    let hw = IMAGE_SIDE * IMAGE_SIDE;
    let (y0, y1, x0, x1) = config.cell_bounds(row, col);
    for (c, &fill) in config.patch_value.iter().enumerate() {
        for y in y0..y1 {
            for x in x0..x1 {
                data[c * hw + y * IMAGE_SIDE + x] = fill;
            }
        }
    }
    Tensor::new(image.shape().to_vec(), data).expect("occluded image shape")
}

/// Answer distribution for every single-cell occlusion, row-major over the
/// grid. Each perturbation starts from a fresh copy of the original image.
pub(crate) fn occluded_cell_distributions(
    model: &VqaModel,
    image: &Tensor,
    question: &[usize],
    config: &OcclusionConfig,
) -> Result<Vec<AnswerDistribution>> {
    let cells: Vec<(usize, usize)> = (0..config.grid_rows)
        .flat_map(|r| (0..config.grid_cols).map(move |c| (r, c)))
        .collect();
    cells
        .par_iter()
        .map(|&(r, c)| model.forward_infer(&occlude_cell(image, config, r, c), question))
        .collect()
}

/// Answer distribution for every single-word drop.
pub(crate) fn word_drop_distributions(
    model: &VqaModel,
    image: &Tensor,
    question: &[usize],
) -> Result<Vec<AnswerDistribution>> {
    (0..question.len())
        .into_par_iter()
        .map(|t| model.forward_infer(image, &question_without(question, t)))
        .collect()
}

/// Occlusion attribution over image cells: score = p_orig(a*) - p_masked(a*)
/// where a* is the answer predicted on the unmasked input.
pub fn occlusion_attribute_image(
    model: &VqaModel,
    image: &Tensor,
    question: &[usize],
    config: &OcclusionConfig,
) -> Result<ImportanceMap> {
    let original = model.forward_infer(image, question)?;
    let masked = occluded_cell_distributions(model, image, question, config)?;
    let scores = masked
        .iter()
        .map(|d| original.predicted_prob - d.probabilities[original.predicted])
        .collect();
    ImportanceMap::new(MapSource::Occlusion, config.grid_rows, config.grid_cols, scores)
}

/// Occlusion attribution over question words: score = p_orig(a*) minus the
/// probability of a* after dropping the word; the image stays untouched.
pub fn occlusion_attribute_words(
    model: &VqaModel,
    image: &Tensor,
    question: &[usize],
) -> Result<WordImportance> {
    let original = model.forward_infer(image, question)?;
    let dropped = word_drop_distributions(model, image, question)?;
    let scores = dropped
        .iter()
        .map(|d| original.predicted_prob - d.probabilities[original.predicted])
        .collect();
    Ok(WordImportance {
        source: MapSource::Occlusion,
        scores,
    })
}

/// Seeded uniform-[0,1) baseline map.
pub fn random_map(seed: u64, dims: (usize, usize)) -> ImportanceMap {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let scores = (0..dims.0 * dims.1).map(|_| rng.gen_range(0.0..1.0)).collect();
    ImportanceMap {
        source: MapSource::Random,
        dims: [dims.0, dims.1],
        scores,
    }
}

/// Mean-pool a map onto a coarser grid whose dims divide the source dims;
/// aligns pixel-resolution guided-BP maps with the occlusion grid.
pub fn cell_aggregate(map: &ImportanceMap, target: (usize, usize)) -> Result<ImportanceMap> {
    let (tr, tc) = target;
    if tr == 0 || tc == 0 || map.rows() % tr != 0 || map.cols() % tc != 0 {
        return Err(Error::InvalidArgument {
            op: "cell_aggregate",
            reason: format!("target {tr}x{tc} does not divide {}x{}", map.rows(), map.cols()),
        });
    }
    let bh = map.rows() / tr;
    let bw = map.cols() / tc;
    let norm = 1.0 / (bh * bw) as f32;
    let mut scores = vec![0.0f32; tr * tc];
    for r in 0..map.rows() {
        for c in 0..map.cols() {
            scores[(r / bh) * tc + c / bw] += map.scores[r * map.cols() + c];
        }
    }
    for s in scores.iter_mut() {
        *s *= norm;
    }
    ImportanceMap::new(map.source, tr, tc, scores)
}
